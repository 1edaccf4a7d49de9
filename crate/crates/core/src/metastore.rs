//! Description-driven metadata store.
//!
//! Attribute schemas are data ([`AttributeDescriptor`]) consulted when values
//! are written and when queries are validated. Each `(entity, id, attr)` key
//! holds one current value chosen by last-writer-wins on `(version, origin)`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::SiteId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Entity {
    Patient,
    Study,
    Image,
}

impl Entity {
    pub const ALL: [Entity; 3] = [Entity::Patient, Entity::Study, Entity::Image];

    pub fn as_str(self) -> &'static str {
        match self {
            Entity::Patient => "patient",
            Entity::Study => "study",
            Entity::Image => "image",
        }
    }

    pub fn parse(s: &str) -> Option<Entity> {
        match s {
            "patient" => Some(Entity::Patient),
            "study" => Some(Entity::Study),
            "image" => Some(Entity::Image),
            _ => None,
        }
    }
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VType {
    Int,
    Float,
    String,
    Date,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Value {
    Int(i64),
    Float(f64),
    String(String),
    Date(String),
}

impl Value {
    pub fn vtype(&self) -> VType {
        match self {
            Value::Int(_) => VType::Int,
            Value::Float(_) => VType::Float,
            Value::String(_) => VType::String,
            Value::Date(_) => VType::Date,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::String(s) | Value::Date(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(f) => Some(*f),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    /// Total order within one vtype; across vtypes ordered by vtype tag.
    pub fn total_cmp(&self, other: &Value) -> Ordering {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a.cmp(b),
            (Value::Float(a), Value::Float(b)) => a.total_cmp(b),
            (Value::String(a), Value::String(b)) | (Value::Date(a), Value::Date(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Value::Int(_) => 0,
            Value::Float(_) => 1,
            Value::String(_) => 2,
            Value::Date(_) => 3,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::String(s) | Value::Date(s) => f.write_str(s),
        }
    }
}

pub fn is_iso_date(s: &str) -> bool {
    s.len() == 10 && chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").is_ok()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDescriptor {
    pub name: String,
    pub entity: Entity,
    pub vtype: VType,
    #[serde(default)]
    pub unit: String,
}

impl AttributeDescriptor {
    pub fn new(entity: Entity, name: &str, vtype: VType, unit: &str) -> Self {
        AttributeDescriptor { name: name.into(), entity, vtype, unit: unit.into() }
    }

    pub fn name_is_valid(name: &str) -> bool {
        !name.is_empty() && name.len() <= 48 && name.bytes().all(|b| b.is_ascii_lowercase() || b == b'_')
    }
}

/// Descriptors every node installs before its first ingest.
pub fn builtin_descriptors() -> Vec<AttributeDescriptor> {
    use Entity::*;
    use VType::*;
    vec![
        AttributeDescriptor::new(Image, "mean_brightness", Float, "sample"),
        AttributeDescriptor::new(Image, "rms_contrast", Float, "sample"),
        AttributeDescriptor::new(Image, "breast_density", Float, "fraction"),
        AttributeDescriptor::new(Image, "microcalc_count", Int, ""),
        AttributeDescriptor::new(Image, "lfn", String, ""),
        AttributeDescriptor::new(Image, "study_id", String, ""),
        AttributeDescriptor::new(Study, "patient_id", String, ""),
        AttributeDescriptor::new(Study, "date", Date, ""),
        AttributeDescriptor::new(Patient, "age", Int, "years"),
        AttributeDescriptor::new(Patient, "sex", String, ""),
    ]
}

/// Descriptors for derived outputs; installed alongside the built-ins.
pub fn derived_descriptors() -> Vec<AttributeDescriptor> {
    use Entity::*;
    use VType::*;
    vec![
        AttributeDescriptor::new(Image, "microcalc_locations", String, "json"),
        AttributeDescriptor::new(Image, "standardized", String, ""),
        AttributeDescriptor::new(Image, "source_lfn", String, ""),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub entity: Entity,
    pub entity_id: String,
    pub attr: String,
    pub value: Value,
    pub version: u64,
    pub origin: SiteId,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaError {
    #[error("invalid attribute name {0:?}")]
    BadName(String),
    #[error("attribute {0}.{1} already defined differently")]
    ConflictingDefinition(Entity, String),
    #[error("unknown attribute {0}.{1}")]
    UnknownAttribute(Entity, String),
    #[error("value for {0}.{1} does not match its {2:?} descriptor")]
    TypeMismatch(Entity, String, VType),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: Value,
    pub version: u64,
    pub origin: SiteId,
}

impl Cell {
    /// LWW order: `(version, origin)`, then the canonical value text so that
    /// even a malformed duplicate write merges deterministically.
    fn beats(&self, other: &Cell) -> bool {
        (self.version, &self.origin)
            .cmp(&(other.version, &other.origin))
            .then_with(|| value_key(&self.value).cmp(&value_key(&other.value)))
            == Ordering::Greater
    }
}

fn value_key(v: &Value) -> String {
    serde_json::to_string(v).unwrap_or_default()
}

type Row = BTreeMap<String, Cell>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaStore {
    descriptors: BTreeMap<Entity, BTreeMap<String, AttributeDescriptor>>,
    rows: BTreeMap<Entity, BTreeMap<String, Row>>,
    /// Records whose descriptor has not arrived yet (replicated path only).
    parked: Vec<MetaRecord>,
}

impl MetaStore {
    pub fn new() -> Self {
        MetaStore::default()
    }

    pub fn with_builtins() -> Self {
        let mut s = MetaStore::new();
        for d in builtin_descriptors().into_iter().chain(derived_descriptors()) {
            s.define_attribute(d).expect("built-ins are consistent");
        }
        s
    }

    pub fn define_attribute(&mut self, d: AttributeDescriptor) -> Result<bool, MetaError> {
        if !AttributeDescriptor::name_is_valid(&d.name) {
            return Err(MetaError::BadName(d.name));
        }
        let slot = self.descriptors.entry(d.entity).or_default();
        match slot.get(&d.name) {
            Some(existing) if *existing == d => Ok(false),
            Some(_) => Err(MetaError::ConflictingDefinition(d.entity, d.name)),
            None => {
                slot.insert(d.name.clone(), d);
                self.retry_parked();
                Ok(true)
            }
        }
    }

    pub fn descriptor(&self, entity: Entity, name: &str) -> Option<&AttributeDescriptor> {
        self.descriptors.get(&entity).and_then(|m| m.get(name))
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &AttributeDescriptor> {
        self.descriptors.values().flat_map(|m| m.values())
    }

    fn check(&self, r: &MetaRecord) -> Result<(), MetaError> {
        let d = self
            .descriptor(r.entity, &r.attr)
            .ok_or_else(|| MetaError::UnknownAttribute(r.entity, r.attr.clone()))?;
        let ok = match (&r.value, d.vtype) {
            (Value::Int(_), VType::Int) => true,
            (Value::Float(f), VType::Float) => f.is_finite(),
            (Value::String(_), VType::String) => true,
            (Value::Date(s), VType::Date) => is_iso_date(s),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(MetaError::TypeMismatch(r.entity, r.attr.clone(), d.vtype))
        }
    }

    /// Stores a record; returns whether it became the current value.
    pub fn put_meta(&mut self, r: MetaRecord) -> Result<bool, MetaError> {
        self.check(&r)?;
        Ok(self.merge_checked(r))
    }

    fn merge_checked(&mut self, r: MetaRecord) -> bool {
        let cell = Cell { value: r.value, version: r.version, origin: r.origin };
        let row = self.rows.entry(r.entity).or_default().entry(r.entity_id).or_default();
        match row.get(&r.attr) {
            Some(cur) if !cell.beats(cur) => false,
            _ => {
                row.insert(r.attr, cell);
                true
            }
        }
    }

    /// Replicated form of [`MetaStore::put_meta`]: a record for a descriptor
    /// not yet seen is parked instead of rejected.
    pub(crate) fn merge_replicated(&mut self, r: MetaRecord) -> Result<(), MetaError> {
        match self.check(&r) {
            Ok(()) => {
                self.merge_checked(r);
                Ok(())
            }
            Err(MetaError::UnknownAttribute(..)) => {
                self.parked.push(r);
                self.parked.sort_by(|a, b| {
                    (a.entity, &a.entity_id, &a.attr, a.version, &a.origin)
                        .cmp(&(b.entity, &b.entity_id, &b.attr, b.version, &b.origin))
                        .then_with(|| value_key(&a.value).cmp(&value_key(&b.value)))
                });
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    fn retry_parked(&mut self) {
        let parked = std::mem::take(&mut self.parked);
        for r in parked {
            if self.descriptor(r.entity, &r.attr).is_some() {
                if self.check(&r).is_ok() {
                    self.merge_checked(r);
                }
            } else {
                self.parked.push(r);
            }
        }
    }

    pub fn get_current(&self, entity: Entity, id: &str, attr: &str) -> Result<Option<&Value>, MetaError> {
        if self.descriptor(entity, attr).is_none() {
            return Err(MetaError::UnknownAttribute(entity, attr.to_string()));
        }
        Ok(self.cell(entity, id, attr).map(|c| &c.value))
    }

    pub fn cell(&self, entity: Entity, id: &str, attr: &str) -> Option<&Cell> {
        self.rows.get(&entity).and_then(|m| m.get(id)).and_then(|r| r.get(attr))
    }

    /// Next version a writer should use for a key: one above the highest seen.
    pub fn next_version(&self, entity: Entity, id: &str, attr: &str) -> u64 {
        self.cell(entity, id, attr).map_or(1, |c| c.version + 1)
    }

    pub fn has_entity(&self, entity: Entity, id: &str) -> bool {
        self.rows.get(&entity).is_some_and(|m| m.contains_key(id))
    }

    /// Current values per entity id, ascending by id.
    pub fn scan(&self, entity: Entity) -> impl Iterator<Item = (&str, RowView<'_>)> {
        self.rows
            .get(&entity)
            .into_iter()
            .flat_map(|m| m.iter().map(|(id, row)| (id.as_str(), RowView(row))))
    }

    pub fn row(&self, entity: Entity, id: &str) -> Option<RowView<'_>> {
        self.rows.get(&entity).and_then(|m| m.get(id)).map(RowView)
    }

    pub fn parked_len(&self) -> usize {
        self.parked.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RowView<'a>(&'a Row);

impl<'a> RowView<'a> {
    pub fn get(&self, attr: &str) -> Option<&'a Value> {
        self.0.get(attr).map(|c| &c.value)
    }

    pub fn values(&self) -> BTreeMap<String, Value> {
        self.0.iter().map(|(k, c)| (k.clone(), c.value.clone())).collect()
    }
}
