//! Schema registry for sensor and V2X payloads, logical-controller fan-out,
//! and the firmware-target abstraction used by ECU updates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::keyspace::{key_intersects, key_matches, KeyExpr};
use crate::valuecodec::{transcode, EncodingTag, Value};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InfoError {
    #[error("duplicate field {0:?}")]
    DuplicateField(String),
    #[error("enum field {0:?} has no values")]
    EmptyEnum(String),
    #[error("invalid range on field {0:?}")]
    InvalidRange(String),
    #[error("bad field spec {0:?}")]
    BadFieldSpec(String),
    #[error("scope {new} intersects already bound scope {existing}")]
    ScopeConflict { existing: KeyExpr, new: KeyExpr },
    #[error("command rejected for actuator {actuator}: {}", join_violations(.violations))]
    CommandInvalid {
        actuator: String,
        violations: Vec<Violation>,
    },
    #[error("unknown actuator {0:?}")]
    UnknownActuator(String),
    #[error("duplicate actuator {0:?}")]
    DuplicateActuator(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldKind {
    Int,
    Real,
    Text,
    Enum(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub unit: String,
    pub range: Option<(f64, f64)>,
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, kind: FieldKind) -> Self {
        FieldSpec {
            name: name.into(),
            kind,
            unit: String::new(),
            range: None,
        }
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.range = Some((lo, hi));
        self
    }

    pub fn with_unit(mut self, unit: impl Into<String>) -> Self {
        self.unit = unit.into();
        self
    }

    fn check(&self, raw: &str) -> Option<ViolationKind> {
        let numeric = match &self.kind {
            FieldKind::Text => return None,
            FieldKind::Enum(values) => {
                return (!values.iter().any(|v| v == raw))
                    .then(|| ViolationKind::NotInEnum(raw.to_string()))
            }
            FieldKind::Int => match raw.trim().parse::<i64>() {
                Ok(n) => n as f64,
                Err(_) => return Some(ViolationKind::NotInt(raw.to_string())),
            },
            FieldKind::Real => match raw.trim().parse::<f64>() {
                Ok(x) if x.is_finite() => x,
                _ => return Some(ViolationKind::NotReal(raw.to_string())),
            },
        };
        match self.range {
            Some((lo, hi)) if numeric < lo || numeric > hi => Some(ViolationKind::OutOfRange {
                value: numeric,
                lo,
                hi,
            }),
            _ => None,
        }
    }
}

impl fmt::Display for FieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.name)?;
        match &self.kind {
            FieldKind::Int => write!(f, "INT")?,
            FieldKind::Real => write!(f, "REAL")?,
            FieldKind::Text => write!(f, "TEXT")?,
            FieldKind::Enum(v) => write!(f, "ENUM({})", v.join("|"))?,
        }
        if let Some((lo, hi)) = self.range {
            write!(f, "[{lo},{hi}]")?;
        }
        if !self.unit.is_empty() {
            write!(f, "@{}", self.unit)?;
        }
        Ok(())
    }
}

/// `name:KIND[lo,hi]@unit`, where KIND is INT, REAL, TEXT or ENUM(a|b|c).
impl FromStr for FieldSpec {
    type Err = InfoError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || InfoError::BadFieldSpec(s.to_string());
        let (name, rest) = s.split_once(':').ok_or_else(bad)?;
        if name.is_empty() {
            return Err(bad());
        }
        let (rest, unit) = match rest.split_once('@') {
            Some((r, u)) => (r, u.to_string()),
            None => (rest, String::new()),
        };
        let (kind_text, range) = match rest.find('[') {
            Some(i) => {
                let inner = rest[i + 1..].strip_suffix(']').ok_or_else(bad)?;
                let (lo, hi) = inner.split_once(',').ok_or_else(bad)?;
                let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
                let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
                (&rest[..i], Some((lo, hi)))
            }
            None => (rest, None),
        };
        let kind = match kind_text {
            "INT" => FieldKind::Int,
            "REAL" => FieldKind::Real,
            "TEXT" => FieldKind::Text,
            k => {
                let inner = k
                    .strip_prefix("ENUM(")
                    .and_then(|x| x.strip_suffix(')'))
                    .ok_or_else(bad)?;
                FieldKind::Enum(
                    inner
                        .split('|')
                        .filter(|v| !v.is_empty())
                        .map(String::from)
                        .collect(),
                )
            }
        };
        Ok(FieldSpec {
            name: name.to_string(),
            kind,
            unit,
            range,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    Missing,
    Unexpected,
    NotInt(String),
    NotReal(String),
    NotInEnum(String),
    OutOfRange { value: f64, lo: f64, hi: f64 },
    Encoding(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: Option<String>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let field = self.field.as_deref().unwrap_or("<value>");
        match &self.kind {
            ViolationKind::Missing => write!(f, "{field} missing"),
            ViolationKind::Unexpected => write!(f, "{field} not in schema"),
            ViolationKind::NotInt(v) => write!(f, "{field}={v:?} is not an integer"),
            ViolationKind::NotReal(v) => write!(f, "{field}={v:?} is not a real"),
            ViolationKind::NotInEnum(v) => write!(f, "{field}={v:?} not an allowed value"),
            ViolationKind::OutOfRange { value, lo, hi } => {
                write!(f, "{field}={value} outside [{lo}, {hi}]")
            }
            ViolationKind::Encoding(why) => write!(f, "{why}"),
        }
    }
}

/// An ordered set of typed fields, independent of any key scope.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSchema {
    fields: Vec<FieldSpec>,
}

impl RecordSchema {
    pub fn new(fields: Vec<FieldSpec>) -> Result<Self, InfoError> {
        let mut seen = BTreeSet::new();
        for f in &fields {
            if !seen.insert(f.name.as_str()) {
                return Err(InfoError::DuplicateField(f.name.clone()));
            }
            if matches!(&f.kind, FieldKind::Enum(v) if v.is_empty()) {
                return Err(InfoError::EmptyEnum(f.name.clone()));
            }
            if let Some((lo, hi)) = f.range {
                if lo.is_nan()
                    || hi.is_nan()
                    || lo > hi
                    || matches!(f.kind, FieldKind::Text | FieldKind::Enum(_))
                {
                    return Err(InfoError::InvalidRange(f.name.clone()));
                }
            }
        }
        Ok(RecordSchema { fields })
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    /// Field-by-field check. An empty result means the value conforms.
    pub fn validate(&self, value: &Value) -> Vec<Violation> {
        let record = match self.record_of(value) {
            Ok(r) => r,
            Err(why) => {
                return vec![Violation {
                    field: None,
                    kind: ViolationKind::Encoding(why),
                }]
            }
        };
        let mut out = Vec::new();
        for spec in &self.fields {
            match record.get(&spec.name) {
                None => out.push(Violation {
                    field: Some(spec.name.clone()),
                    kind: ViolationKind::Missing,
                }),
                Some(raw) => {
                    if let Some(kind) = spec.check(raw) {
                        out.push(Violation {
                            field: Some(spec.name.clone()),
                            kind,
                        });
                    }
                }
            }
        }
        for name in record.keys() {
            if !self.fields.iter().any(|f| &f.name == name) {
                out.push(Violation {
                    field: Some(name.clone()),
                    kind: ViolationKind::Unexpected,
                });
            }
        }
        out
    }

    fn record_of(&self, value: &Value) -> Result<BTreeMap<String, String>, String> {
        match value.tag() {
            EncodingTag::Text if self.fields.len() == 1 => {
                let text = value.as_text().unwrap_or_default();
                Ok(BTreeMap::from([(
                    self.fields[0].name.clone(),
                    text.to_string(),
                )]))
            }
            EncodingTag::Properties | EncodingTag::Tree => {
                let tree = transcode(value, EncodingTag::Tree)
                    .ok()
                    .and_then(|v| v.as_tree())
                    .ok_or("value does not decode as a record")?;
                let flat = tree.as_flat_map().ok_or("value is not a flat record")?;
                Ok(flat
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect())
            }
            tag => Err(format!("{} values cannot carry a record", tag.name())),
        }
    }
}

/// A record schema bound to a key scope.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub scope: KeyExpr,
    pub record: RecordSchema,
}

impl Schema {
    pub fn new(scope: KeyExpr, fields: Vec<FieldSpec>) -> Result<Self, InfoError> {
        Ok(Schema {
            scope,
            record: RecordSchema::new(fields)?,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct SchemaRegistry {
    schemas: Vec<Schema>,
}

impl SchemaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_schema(&mut self, schema: Schema) -> Result<(), InfoError> {
        if let Some(existing) = self
            .schemas
            .iter()
            .find(|s| key_intersects(&s.scope, &schema.scope))
        {
            return Err(InfoError::ScopeConflict {
                existing: existing.scope.clone(),
                new: schema.scope,
            });
        }
        self.schemas.push(schema);
        Ok(())
    }

    pub fn schemas(&self) -> &[Schema] {
        &self.schemas
    }

    pub fn schema_for(&self, path: &KeyExpr) -> Option<&Schema> {
        self.schemas
            .iter()
            .find(|s| key_matches(&s.scope, path).unwrap_or(false))
    }

    /// Unbound keys always pass.
    pub fn validate_sample(&self, key: &KeyExpr, value: &Value) -> Vec<Violation> {
        match self.schema_for(key) {
            Some(s) => s.record.validate(value),
            None => Vec::new(),
        }
    }
}

/// Example payload schemas for the V2X message categories.
pub fn v2x_schemas() -> Vec<Schema> {
    let key = |s: &str| s.parse::<KeyExpr>().expect("static scope");
    let build = |scope: &str, fields: Vec<FieldSpec>| {
        Schema::new(key(scope), fields).expect("static schema")
    };
    vec![
        build(
            "/v2x/ota/**",
            vec![
                FieldSpec::new("campaign", FieldKind::Text),
                FieldSpec::new("version", FieldKind::Text),
            ],
        ),
        build(
            "/v2x/hdmap/**",
            vec![
                FieldSpec::new("tile", FieldKind::Text),
                FieldSpec::new("revision", FieldKind::Int).with_range(0.0, 1e9),
            ],
        ),
        build(
            "/v2x/adas/**",
            vec![
                FieldSpec::new("speed", FieldKind::Real)
                    .with_range(0.0, 300.0)
                    .with_unit("km/h"),
                FieldSpec::new("heading", FieldKind::Real)
                    .with_range(0.0, 360.0)
                    .with_unit("deg"),
                FieldSpec::new(
                    "hazard",
                    FieldKind::Enum(vec!["none".into(), "obstacle".into(), "pedestrian".into()]),
                ),
            ],
        ),
        build(
            "/v2x/traffic/**",
            vec![
                FieldSpec::new(
                    "signal",
                    FieldKind::Enum(vec!["Red".into(), "Yellow".into(), "Green".into()]),
                ),
                FieldSpec::new("remaining", FieldKind::Int)
                    .with_range(0.0, 600.0)
                    .with_unit("s"),
            ],
        ),
    ]
}

pub type ActuatorHandler = Box<dyn FnMut(&Value) -> Result<Value, String>>;

struct Actuator {
    id: String,
    schema: RecordSchema,
    handler: ActuatorHandler,
}

/// One logical controller driving M actuators.
pub struct ControlDomain {
    controller: String,
    actuators: Vec<Actuator>,
    dispatched: u64,
}

impl fmt::Debug for ControlDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlDomain")
            .field("controller", &self.controller)
            .field("actuators", &self.actuator_ids())
            .field("dispatched", &self.dispatched)
            .finish()
    }
}

/// Actuator id and its reply or rejection.
pub type FanoutReply = (String, Result<Value, String>);

impl ControlDomain {
    pub fn new(controller: impl Into<String>) -> Self {
        ControlDomain {
            controller: controller.into(),
            actuators: Vec::new(),
            dispatched: 0,
        }
    }

    pub fn controller(&self) -> &str {
        &self.controller
    }

    pub fn add_actuator(
        &mut self,
        id: impl Into<String>,
        schema: RecordSchema,
        handler: impl FnMut(&Value) -> Result<Value, String> + 'static,
    ) -> Result<(), InfoError> {
        let id = id.into();
        if self.actuators.iter().any(|a| a.id == id) {
            return Err(InfoError::DuplicateActuator(id));
        }
        self.actuators.push(Actuator {
            id,
            schema,
            handler: Box::new(handler),
        });
        Ok(())
    }

    pub fn actuator_ids(&self) -> Vec<&str> {
        self.actuators.iter().map(|a| a.id.as_str()).collect()
    }

    /// Total handler invocations so far.
    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    /// Validates `command` against every selected actuator first; if any
    /// rejects it nothing is dispatched. `subset` of `None` means all.
    pub fn control_fanout(
        &mut self,
        command: &Value,
        subset: Option<&[&str]>,
    ) -> Result<Vec<FanoutReply>, InfoError> {
        if let Some(ids) = subset {
            if let Some(missing) = ids
                .iter()
                .find(|id| !self.actuators.iter().any(|a| a.id == **id))
            {
                return Err(InfoError::UnknownActuator(missing.to_string()));
            }
        }
        let selected = |a: &Actuator| subset.is_none_or(|ids| ids.contains(&a.id.as_str()));
        for a in self.actuators.iter().filter(|a| selected(a)) {
            let violations = a.schema.validate(command);
            if !violations.is_empty() {
                return Err(InfoError::CommandInvalid {
                    actuator: a.id.clone(),
                    violations,
                });
            }
        }
        let mut results = Vec::new();
        for a in self.actuators.iter_mut().filter(|a| selected(a)) {
            self.dispatched += 1;
            results.push((a.id.clone(), (a.handler)(command)));
        }
        Ok(results)
    }
}

/// A controller that updates its own firmware when asked.
pub trait FirmwareTarget {
    fn version(&self) -> &str;
    fn image(&self) -> &[u8];
    /// Installs `image` as `version`, keeping the current image as backup.
    fn apply_firmware(&mut self, version: &str, image: &[u8]) -> Result<(), String>;
    /// Restores the backup taken by the last apply. No-op without one.
    fn restore_backup(&mut self);
    /// Drops the backup once the new firmware is accepted.
    fn commit(&mut self);
}

/// A/B-bank ECU whose flash outcome is decided by the test or scenario.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimulatedEcu {
    pub id: String,
    active: (String, Vec<u8>),
    backup: Option<(String, Vec<u8>)>,
    pub reject_next: bool,
}

impl SimulatedEcu {
    pub fn new(id: impl Into<String>, version: impl Into<String>, image: Vec<u8>) -> Self {
        SimulatedEcu {
            id: id.into(),
            active: (version.into(), image),
            backup: None,
            reject_next: false,
        }
    }

    pub fn has_backup(&self) -> bool {
        self.backup.is_some()
    }
}

impl FirmwareTarget for SimulatedEcu {
    fn version(&self) -> &str {
        &self.active.0
    }

    fn image(&self) -> &[u8] {
        &self.active.1
    }

    fn apply_firmware(&mut self, version: &str, image: &[u8]) -> Result<(), String> {
        if std::mem::take(&mut self.reject_next) {
            return Err(format!("{} rejected firmware {version}", self.id));
        }
        let old = std::mem::replace(&mut self.active, (version.to_string(), image.to_vec()));
        self.backup = Some(old);
        Ok(())
    }

    fn restore_backup(&mut self) {
        if let Some(b) = self.backup.take() {
            self.active = b;
        }
    }

    fn commit(&mut self) {
        self.backup = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;
    use std::rc::Rc;

    fn key(s: &str) -> KeyExpr {
        s.parse().unwrap()
    }

    fn props(pairs: &[(&str, &str)]) -> Value {
        Value::from_properties(pairs).unwrap()
    }

    fn light_schema() -> Schema {
        Schema::new(
            key("/city/road/*"),
            vec!["state:ENUM(Red|Yellow|Green)".parse().unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn traffic_light_enum() {
        let mut reg = SchemaRegistry::new();
        reg.register_schema(light_schema()).unwrap();
        let k = key("/city/road/traffic_light");
        assert!(reg.validate_sample(&k, &Value::text("Red")).is_empty());
        let v = reg.validate_sample(&k, &Value::text("Purple"));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::NotInEnum("Purple".into()));
        assert!(reg
            .validate_sample(&key("/elsewhere"), &Value::text("Purple"))
            .is_empty());
    }

    #[test]
    fn intersecting_scope_rejected() {
        let mut reg = SchemaRegistry::new();
        reg.register_schema(light_schema()).unwrap();
        let other =
            Schema::new(key("/city/**"), vec![FieldSpec::new("x", FieldKind::Text)]).unwrap();
        assert!(matches!(
            reg.register_schema(other),
            Err(InfoError::ScopeConflict { .. })
        ));
        let disjoint =
            Schema::new(key("/town/**"), vec![FieldSpec::new("x", FieldKind::Text)]).unwrap();
        reg.register_schema(disjoint).unwrap();
    }

    #[test]
    fn real_range() {
        let s = RecordSchema::new(vec!["speed:REAL[0,300]@km/h".parse().unwrap()]).unwrap();
        assert!(s.validate(&props(&[("speed", "120.0")])).is_empty());
        let v = s.validate(&props(&[("speed", "400.0")]));
        assert!(matches!(v[0].kind, ViolationKind::OutOfRange { value, .. } if value == 400.0));
        let v = s.validate(&props(&[("speed", "fast"), ("x", "1")]));
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn field_spec_round_trip() {
        for text in ["a:INT", "b:REAL[-1.5,2]@m/s", "c:ENUM(x|y)", "d:TEXT@label"] {
            let f: FieldSpec = text.parse().unwrap();
            assert_eq!(f.to_string().parse::<FieldSpec>().unwrap(), f);
        }
        assert!("nocolon".parse::<FieldSpec>().is_err());
        assert!(RecordSchema::new(vec!["e:ENUM()".parse().unwrap()]).is_err());
        assert!(
            RecordSchema::new(vec!["a:INT".parse().unwrap(), "a:TEXT".parse().unwrap()]).is_err()
        );
    }

    fn wheels(fail: Option<&'static str>, calls: Rc<Cell<u32>>) -> ControlDomain {
        let schema = RecordSchema::new(vec!["pressure:REAL[0,1]".parse().unwrap()]).unwrap();
        let mut d = ControlDomain::new("brake-ctl");
        for w in ["fl", "fr", "rl", "rr"] {
            let calls = calls.clone();
            d.add_actuator(w, schema.clone(), move |_| {
                calls.set(calls.get() + 1);
                if Some(w) == fail {
                    Err("stuck".into())
                } else {
                    Ok(Value::text("ok"))
                }
            })
            .unwrap();
        }
        d
    }

    #[test]
    fn brake_fanout() {
        let calls = Rc::new(Cell::new(0));
        let mut d = wheels(Some("rl"), calls.clone());
        let cmd = props(&[("pressure", "0.4")]);
        let res = d.control_fanout(&cmd, None).unwrap();
        assert_eq!(res.len(), 4);
        assert_eq!(res.iter().filter(|r| r.1.is_ok()).count(), 3);
        let bad = props(&[("pressure", "3")]);
        assert!(matches!(
            d.control_fanout(&bad, None),
            Err(InfoError::CommandInvalid { .. })
        ));
        assert_eq!(calls.get(), 4);
        assert_eq!(d.control_fanout(&cmd, Some(&["fl"])).unwrap().len(), 1);
    }

    #[test]
    fn ecu_ab_banks() {
        let mut ecu = SimulatedEcu::new("motor", "1.0", vec![1, 2, 3]);
        ecu.apply_firmware("2.0", &[9]).unwrap();
        assert_eq!(ecu.version(), "2.0");
        ecu.restore_backup();
        assert_eq!((ecu.version(), ecu.image()), ("1.0", &[1u8, 2, 3][..]));
        ecu.reject_next = true;
        assert!(ecu.apply_firmware("2.0", &[9]).is_err());
        assert_eq!(ecu.version(), "1.0");
    }

    #[test]
    fn v2x_fixture_scopes_disjoint() {
        let mut reg = SchemaRegistry::new();
        for s in v2x_schemas() {
            reg.register_schema(s).unwrap();
        }
        let k = key("/v2x/adas/rsu1/alert");
        let ok = props(&[("speed", "50"), ("heading", "90"), ("hazard", "none")]);
        assert!(reg.validate_sample(&k, &ok).is_empty());
    }
}
