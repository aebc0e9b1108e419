mod common;

use std::collections::BTreeMap;

use common::*;
use rand::Rng;
use vecof::hetsched::{
    brute_force_schedule, schedule_eft, submit_dag, validate_schedule, ComputeSite, Dag, Schedule,
    TransferModel,
};

/// Exhaustive list scheduling: every topological order times every site
/// assignment, each task started at the earliest instant its inputs are in
/// place and the site has room for it for its whole duration.
fn exhaustive_optimum(dag: &Dag, sites: &[ComputeSite], model: &TransferModel) -> u64 {
    fn orders(dag: &Dag, done: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        let n = dag.len();
        if done.len() == n {
            out.push(done.clone());
            return;
        }
        for i in 0..n {
            if done.contains(&i) {
                continue;
            }
            let t = &dag.tasks()[i];
            if t.deps
                .iter()
                .all(|d| done.contains(&dag.index_of(d).unwrap()))
            {
                done.push(i);
                orders(dag, done, out);
                done.pop();
            }
        }
    }
    let mut all = Vec::new();
    orders(dag, &mut Vec::new(), &mut all);
    let n = dag.len();
    let mut best = u64::MAX;
    for order in &all {
        for code in 0..sites.len().pow(n as u32) {
            let assign: Vec<usize> = (0..n)
                .map(|i| (code / sites.len().pow(i as u32)) % sites.len())
                .collect();
            let mut placed: BTreeMap<usize, (usize, u64, u64)> = BTreeMap::new();
            let mut ok = true;
            for &i in order {
                let t = &dag.tasks()[i];
                let s = &sites[assign[i]];
                let Some(&dur) = t.duration_ms.get(&s.class) else {
                    ok = false;
                    break;
                };
                if !t.demand.fits_within(&s.capacity) {
                    ok = false;
                    break;
                }
                let mut ready = 0;
                if t.input_bytes > 0 {
                    let o = dag.origin.as_deref().unwrap_or(&sites[0].id);
                    ready = model.transfer_ms(t.input_bytes, o, &s.id).unwrap();
                }
                for d in &t.deps {
                    let j = dag.index_of(d).unwrap();
                    let (ps, _, end) = placed[&j];
                    let out = dag.tasks()[j].output_bytes;
                    ready = ready.max(end + model.transfer_ms(out, &sites[ps].id, &s.id).unwrap());
                }
                // candidate starts are `ready` and the end of any task on the site
                let mut cands: Vec<u64> = vec![ready];
                cands.extend(
                    placed
                        .values()
                        .filter(|p| p.0 == assign[i] && p.2 > ready)
                        .map(|p| p.2),
                );
                cands.sort();
                let fits_at = |st: u64| {
                    let mut pts: Vec<u64> = vec![st];
                    pts.extend(
                        placed
                            .values()
                            .filter(|p| p.0 == assign[i] && p.1 > st && p.1 < st + dur)
                            .map(|p| p.1),
                    );
                    pts.iter().all(|&x| {
                        let used = placed
                            .iter()
                            .filter(|(_, p)| p.0 == assign[i] && p.1 <= x && x < p.2)
                            .fold(t.demand, |acc, (k, _)| acc.plus(&dag.tasks()[*k].demand));
                        used.fits_within(&s.capacity)
                    })
                };
                let start = cands.into_iter().find(|&c| fits_at(c)).unwrap();
                placed.insert(i, (assign[i], start, start + dur));
            }
            if ok {
                best = best.min(placed.values().map(|p| p.2).max().unwrap_or(0));
            }
        }
    }
    best
}

fn makespan(s: &Schedule) -> u64 {
    s.makespan_ms()
}

#[test]
fn random_dags_are_valid_and_bounded_by_optimum() {
    let sites = three_sites();
    let mut r = rng(21);
    for case in 0..300 {
        let n = r.gen_range(1..=10);
        let model = TransferModel::uniform(&sites, r.gen_range(1..20), r.gen_range(100..5_000));
        let mut dag = submit_dag(random_tasks(&mut r, n), &sites).unwrap();
        if r.gen_bool(0.5) {
            dag = dag.with_origin("veh");
        }
        let eft = schedule_eft(&dag, &sites, &model);
        validate_schedule(&dag, &sites, &model, &eft)
            .unwrap_or_else(|e| panic!("case {case}: {e}"));
        if n <= 6 {
            let opt = brute_force_schedule(&dag, &sites, &model).unwrap();
            validate_schedule(&dag, &sites, &model, &opt).unwrap();
            assert!(makespan(&eft) >= makespan(&opt), "case {case}");
        }
    }
}

#[test]
fn brute_force_matches_exhaustive_search() {
    let sites = three_sites();
    let mut r = rng(5);
    for case in 0..80 {
        let n = r.gen_range(1..=4);
        let model = TransferModel::uniform(&sites, r.gen_range(1..20), r.gen_range(100..5_000));
        let mut dag = submit_dag(random_tasks(&mut r, n), &sites).unwrap();
        if r.gen_bool(0.5) {
            dag = dag.with_origin("mec");
        }
        let opt = brute_force_schedule(&dag, &sites, &model).unwrap();
        assert_eq!(
            makespan(&opt),
            exhaustive_optimum(&dag, &sites, &model),
            "case {case}"
        );
    }
}
