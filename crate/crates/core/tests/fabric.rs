mod common;

use common::*;
use vecof::fabric::{Fabric, ReplyOrigin, Sink};
use vecof::infomodel::v2x_schemas;
use vecof::netsim::{LinkParams, LinkStatus, NodeMode, Sim};
use vecof::valuecodec::{make_value, EncodingTag, Value};

#[test]
fn randomized_interleavings_match_replay() {
    let mut checked = 0;
    for seed in 0..150 {
        checked += fabric_replay_trial(seed).unwrap();
    }
    assert!(checked > 150);
}

#[test]
fn partitioned_storage_is_reported_missing() {
    let mut sim = Sim::new(2);
    let a = sim.add_named_node("op", NodeMode::Client);
    let r = sim.add_named_node("edge", NodeMode::Router);
    let b = sim.add_named_node("veh", NodeMode::Peer);
    sim.add_link(a, r, LinkParams::new(5, 0.0, 1500).unwrap())
        .unwrap();
    let l = sim
        .add_link(r, b, LinkParams::new(5, 0.0, 1500).unwrap())
        .unwrap();
    sim.run_until_idle(u64::MAX);
    let mut f = Fabric::new(sim);
    let (wa, wb) = (f.open_workspace(a).unwrap(), f.open_workspace(b).unwrap());
    f.register_storage(wb, "/veh/**".parse().unwrap(), 1)
        .unwrap();
    f.put(wb, &"/veh/speed".parse().unwrap(), Value::text("40"))
        .unwrap();
    f.run_until_idle(u64::MAX);
    f.sim_mut().set_link_status(l, LinkStatus::Down).unwrap();
    let res = f.get_blocking(wa, &"/veh/**".parse().unwrap()).unwrap();
    assert!(res.replies.is_empty());
    assert_eq!(res.missing, vec![b]);
    assert!(res.truncated);
}

#[test]
fn eval_reply_wins_over_storage() {
    let mut sim = Sim::new(3);
    let a = sim.add_node(NodeMode::Router);
    let b = sim.add_node(NodeMode::Router);
    sim.add_link(a, b, LinkParams::new(4, 0.1, 300).unwrap())
        .unwrap();
    sim.run_until_idle(u64::MAX);
    let mut f = Fabric::new(sim);
    let (wa, wb) = (f.open_workspace(a).unwrap(), f.open_workspace(b).unwrap());
    let key = "/map/tile".parse().unwrap();
    f.register_storage(wa, "/map/**".parse().unwrap(), 2)
        .unwrap();
    f.register_eval(wb, "/map/tile".parse().unwrap(), |_, _| {
        Value::text("fresh")
    })
    .unwrap();
    f.put(wa, &key, Value::text("stale")).unwrap();
    f.run_until_idle(u64::MAX);
    let res = f.get_blocking(wa, &"/map/tile".parse().unwrap()).unwrap();
    assert_eq!(res.replies.len(), 1);
    assert_eq!(res.replies[0].origin, ReplyOrigin::Eval);
    assert_eq!(res.replies[0].value.as_text(), Some("fresh"));
}

#[test]
fn schema_violations_are_rejected_before_publishing() {
    let mut sim = Sim::new(4);
    let a = sim.add_node(NodeMode::Peer);
    let b = sim.add_node(NodeMode::Router);
    sim.add_link(a, b, LinkParams::new(4, 0.0, 1500).unwrap())
        .unwrap();
    sim.run_until_idle(u64::MAX);
    let mut f = Fabric::new(sim);
    for s in v2x_schemas() {
        f.registry_mut().register_schema(s).unwrap();
    }
    let (wa, wb) = (f.open_workspace(a).unwrap(), f.open_workspace(b).unwrap());
    let sub = f
        .subscribe(wb, "/v2x/**".parse().unwrap(), Sink::Queue)
        .unwrap();
    f.run_until_idle(u64::MAX);
    let key = "/v2x/adas/car7".parse().unwrap();
    let ok = make_value(
        EncodingTag::Properties,
        "speed=88.5;heading=270;hazard=obstacle",
    )
    .unwrap();
    let bad = make_value(
        EncodingTag::Properties,
        "speed=-3;heading=270;hazard=obstacle",
    )
    .unwrap();
    f.put(wa, &key, ok).unwrap();
    assert!(f.put(wa, &key, bad).is_err());
    f.run_until_idle(u64::MAX);
    assert_eq!(f.take_samples(sub).unwrap().len(), 1);
    assert_eq!(f.stats().rejected_puts, 1);
}
