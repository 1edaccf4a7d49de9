//! Clinical query language.
//!
//! ```text
//! query := SELECT field (',' field)* WHERE pred (ORDER BY field)? (LIMIT uint)?
//! field := entity '.' attr            entity in {patient, study, image}
//! pred  := pred OR pred | pred AND pred | NOT pred | '(' pred ')' | field cmp literal
//! cmp   := = | != | < | <= | > | >= | CONTAINS
//! ```
//!
//! Precedence is NOT > AND > OR. Keywords are case-insensitive, attribute
//! names are not. The serde form of [`Query`] is the sub-query wire document.

mod eval;
mod parse;

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::ids::SiteId;
use crate::metastore::{Entity, MetaStore, VType, Value};

pub use eval::{evaluate_local, evaluate_scoped, primary_entity, row_order, JoinedRow, LocalAnswer};
pub use parse::parse;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Field {
    pub entity: Entity,
    pub attr: String,
}

impl Field {
    pub fn new(entity: Entity, attr: &str) -> Self {
        Field { entity, attr: attr.to_string() }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.entity, self.attr)
    }
}

impl Serialize for Field {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Field {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let (e, a) = s
            .split_once('.')
            .ok_or_else(|| serde::de::Error::custom(format!("field {s:?} is not entity.attr")))?;
        let entity =
            Entity::parse(e).ok_or_else(|| serde::de::Error::custom(format!("unknown entity {e:?}")))?;
        if a.is_empty() {
            return Err(serde::de::Error::custom("empty attribute name"));
        }
        Ok(Field { entity, attr: a.to_string() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "contains")]
    Contains,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Contains => "CONTAINS",
        }
    }
}

/// Literal as written in the query. `Date` only appears after validation
/// coerces a string literal against a date descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Literal {
    Int(i64),
    Float(f64),
    String(String),
    Date(String),
}

impl Literal {
    pub fn to_value(&self) -> Value {
        match self {
            Literal::Int(i) => Value::Int(*i),
            Literal::Float(f) => Value::Float(*f),
            Literal::String(s) => Value::String(s.clone()),
            Literal::Date(s) => Value::Date(s.clone()),
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Int(i) => write!(f, "{i}"),
            // Debug keeps a '.' or exponent so the literal re-lexes as a float.
            Literal::Float(x) => write!(f, "{x:?}"),
            Literal::String(s) | Literal::Date(s) => write!(f, "'{}'", s.replace('\'', "''")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pred {
    And(Box<Pred>, Box<Pred>),
    Or(Box<Pred>, Box<Pred>),
    Not(Box<Pred>),
    Cmp { field: Field, op: CmpOp, lit: Literal },
}

impl Pred {
    pub fn and(a: Pred, b: Pred) -> Pred {
        Pred::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Pred, b: Pred) -> Pred {
        Pred::Or(Box::new(a), Box::new(b))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(a: Pred) -> Pred {
        Pred::Not(Box::new(a))
    }

    pub fn cmp(field: Field, op: CmpOp, lit: Literal) -> Pred {
        Pred::Cmp { field, op, lit }
    }

    pub fn fields<'a>(&'a self, out: &mut Vec<&'a Field>) {
        match self {
            Pred::And(a, b) | Pred::Or(a, b) => {
                a.fields(out);
                b.fields(out);
            }
            Pred::Not(a) => a.fields(out),
            Pred::Cmp { field, .. } => out.push(field),
        }
    }
}

impl fmt::Display for Pred {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pred::And(a, b) => write!(f, "({a}) AND ({b})"),
            Pred::Or(a, b) => write!(f, "({a}) OR ({b})"),
            Pred::Not(a) => write!(f, "NOT ({a})"),
            Pred::Cmp { field, op, lit } => write!(f, "{field} {} {lit}", op.symbol()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub proj: Vec<Field>,
    pub pred: Pred,
    #[serde(default)]
    pub order_by: Option<Field>,
    #[serde(default)]
    pub limit: Option<u64>,
}

impl Query {
    pub fn fields(&self) -> Vec<&Field> {
        let mut out: Vec<&Field> = self.proj.iter().collect();
        self.pred.fields(&mut out);
        out.extend(self.order_by.iter());
        out
    }

    pub fn to_document(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("query serializes")
    }

    pub fn from_document(doc: &[u8]) -> Result<Query, QueryError> {
        serde_json::from_slice(doc).map_err(|e| QueryError::BadDocument(e.to_string()))
    }
}

/// Canonical query text; `parse(&q.to_string())` reproduces `q`.
impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SELECT ")?;
        for (i, p) in self.proj.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{p}")?;
        }
        write!(f, " WHERE {}", self.pred)?;
        if let Some(o) = &self.order_by {
            write!(f, " ORDER BY {o}")?;
        }
        if let Some(l) = self.limit {
            write!(f, " LIMIT {l}")?;
        }
        Ok(())
    }
}

/// A query whose fields all resolved and whose literals are coerced to the
/// descriptor types.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct TypedQuery(Query);

impl TypedQuery {
    pub fn query(&self) -> &Query {
        &self.0
    }

    pub fn into_query(self) -> Query {
        self.0
    }
}

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QueryError {
    #[error("syntax error at {line}:{col}: expected {expected}")]
    SyntaxError { line: usize, col: usize, expected: String },
    #[error("unknown field {field}")]
    UnknownField { field: String },
    #[error("type error: {field} cannot be compared with {literal}")]
    TypeError { field: String, literal: String },
    #[error("bad query document: {0}")]
    BadDocument(String),
}

pub fn validate(q: &Query, store: &MetaStore) -> Result<TypedQuery, QueryError> {
    let resolve = |f: &Field| {
        store
            .descriptor(f.entity, &f.attr)
            .map(|d| d.vtype)
            .ok_or_else(|| QueryError::UnknownField { field: f.to_string() })
    };
    for f in q.proj.iter().chain(q.order_by.iter()) {
        resolve(f)?;
    }
    fn walk(
        p: &Pred,
        resolve: &dyn Fn(&Field) -> Result<VType, QueryError>,
    ) -> Result<Pred, QueryError> {
        Ok(match p {
            Pred::And(a, b) => Pred::and(walk(a, resolve)?, walk(b, resolve)?),
            Pred::Or(a, b) => Pred::or(walk(a, resolve)?, walk(b, resolve)?),
            Pred::Not(a) => Pred::not(walk(a, resolve)?),
            Pred::Cmp { field, op, lit } => {
                let vtype = resolve(field)?;
                let type_err =
                    || QueryError::TypeError { field: field.to_string(), literal: lit.to_string() };
                if *op == CmpOp::Contains && vtype != VType::String {
                    return Err(type_err());
                }
                let lit = match (vtype, lit) {
                    (VType::Int, Literal::Int(i)) => Literal::Int(*i),
                    (VType::Float, Literal::Int(i)) => Literal::Float(*i as f64),
                    (VType::Float, Literal::Float(x)) => Literal::Float(*x),
                    (VType::String, Literal::String(s)) => Literal::String(s.clone()),
                    (VType::Date, Literal::String(s) | Literal::Date(s))
                        if crate::metastore::is_iso_date(s) =>
                    {
                        Literal::Date(s.clone())
                    }
                    _ => return Err(type_err()),
                };
                Pred::cmp(field.clone(), *op, lit)
            }
        })
    }
    let pred = walk(&q.pred, &resolve)?;
    Ok(TypedQuery(Query { proj: q.proj.clone(), pred, order_by: q.order_by.clone(), limit: q.limit }))
}

pub fn parse_and_validate(text: &str, store: &MetaStore) -> Result<TypedQuery, QueryError> {
    validate(&parse(text)?, store)
}

/// One answer row. `ids` holds the entity id of every entity on the join
/// chain from the primary entity upward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub ids: std::collections::BTreeMap<Entity, String>,
    pub values: Vec<Option<Value>>,
    #[serde(default)]
    pub order_key: Option<Value>,
    pub site: SiteId,
}

impl ResultRow {
    pub fn primary_id(&self, primary: Entity) -> &str {
        self.ids.get(&primary).map(String::as_str).unwrap_or("")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> MetaStore {
        MetaStore::with_builtins()
    }

    #[test]
    fn validate_coerces_and_rejects() {
        let s = store();
        let q = parse("SELECT image.lfn WHERE image.breast_density > 0").unwrap();
        let t = validate(&q, &s).unwrap();
        match &t.query().pred {
            Pred::Cmp { lit, .. } => assert_eq!(*lit, Literal::Float(0.0)),
            _ => unreachable!(),
        }
        let q = parse("SELECT image.lfn WHERE image.breast_density > 0.3").unwrap();
        assert!(validate(&q, &s).is_ok());
        let q = parse("SELECT image.lfn WHERE image.breast_density CONTAINS 'x'").unwrap();
        assert!(matches!(validate(&q, &s), Err(QueryError::TypeError { .. })));
        let q = parse("SELECT image.lfn WHERE study.nonexistent = 1").unwrap();
        assert!(matches!(validate(&q, &s), Err(QueryError::UnknownField { .. })));
        let q = parse("SELECT image.lfn WHERE patient.age = 5.5").unwrap();
        assert!(matches!(validate(&q, &s), Err(QueryError::TypeError { .. })));
        let q = parse("SELECT image.lfn WHERE study.date >= '2003-01-01'").unwrap();
        match &validate(&q, &s).unwrap().query().pred {
            Pred::Cmp { lit, .. } => assert_eq!(*lit, Literal::Date("2003-01-01".into())),
            _ => unreachable!(),
        }
        let q = parse("SELECT image.lfn WHERE study.date >= 'last week'").unwrap();
        assert!(matches!(validate(&q, &s), Err(QueryError::TypeError { .. })));
        let q = parse("SELECT image.nope WHERE patient.age = 5").unwrap();
        assert!(matches!(validate(&q, &s), Err(QueryError::UnknownField { .. })));
    }

    #[test]
    fn document_shape() {
        let q = parse("SELECT image.lfn WHERE NOT patient.sex = 'F' ORDER BY patient.age LIMIT 3").unwrap();
        let v: serde_json::Value = serde_json::from_slice(&q.to_document()).unwrap();
        assert_eq!(v["proj"][0], "image.lfn");
        assert_eq!(v["pred"]["not"]["cmp"]["op"], "=");
        assert_eq!(v["pred"]["not"]["cmp"]["lit"]["string"], "F");
        assert_eq!(v["order_by"], "patient.age");
        assert_eq!(v["limit"], 3);
        assert_eq!(Query::from_document(&q.to_document()).unwrap(), q);
        assert!(Query::from_document(b"{\"proj\":[\"x\"]}").is_err());
    }
}
