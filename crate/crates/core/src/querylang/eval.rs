use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::{CmpOp, Field, Literal, Pred, Query, ResultRow, TypedQuery};
use crate::ids::SiteId;
use crate::metastore::{Entity, MetaStore, RowView, Value};

/// The entity rows are produced for: the deepest entity any field touches on
/// the fixed image -> study -> patient chain.
pub fn primary_entity(q: &Query) -> Entity {
    q.fields().into_iter().map(|f| f.entity).max().unwrap_or(Entity::Image)
}

/// A primary entity joined with its ancestors.
pub struct JoinedRow<'a> {
    pub primary: Entity,
    pub ids: BTreeMap<Entity, String>,
    rows: BTreeMap<Entity, RowView<'a>>,
}

impl<'a> JoinedRow<'a> {
    pub fn get(&self, f: &Field) -> Option<&'a Value> {
        self.rows.get(&f.entity).and_then(|r| r.get(&f.attr))
    }

    pub fn primary_id(&self) -> &str {
        &self.ids[&self.primary]
    }
}

pub fn join<'a>(store: &'a MetaStore, primary: Entity, id: &str, row: RowView<'a>) -> JoinedRow<'a> {
    let mut ids = BTreeMap::new();
    let mut rows = BTreeMap::new();
    ids.insert(primary, id.to_string());
    rows.insert(primary, row);
    let mut cur = (primary, row);
    loop {
        let (link_attr, parent) = match cur.0 {
            Entity::Image => ("study_id", Entity::Study),
            Entity::Study => ("patient_id", Entity::Patient),
            Entity::Patient => break,
        };
        let Some(parent_id) = cur.1.get(link_attr).and_then(Value::as_str) else { break };
        ids.insert(parent, parent_id.to_string());
        match store.row(parent, parent_id) {
            Some(r) => {
                rows.insert(parent, r);
                cur = (parent, r);
            }
            None => break,
        }
    }
    JoinedRow { primary, ids, rows }
}

fn compare(v: &Value, op: CmpOp, lit: &Literal) -> bool {
    let ord = match (v, lit) {
        (Value::Int(a), Literal::Int(b)) => Some(a.cmp(b)),
        (Value::Float(a), Literal::Float(b)) => a.partial_cmp(b),
        (Value::String(a), Literal::String(b)) | (Value::Date(a), Literal::Date(b)) => {
            if op == CmpOp::Contains {
                return a.contains(b.as_str());
            }
            Some(a.as_str().cmp(b.as_str()))
        }
        _ => None,
    };
    let Some(ord) = ord else { return false };
    match op {
        CmpOp::Eq => ord == Ordering::Equal,
        CmpOp::Ne => ord != Ordering::Equal,
        CmpOp::Lt => ord == Ordering::Less,
        CmpOp::Le => ord != Ordering::Greater,
        CmpOp::Gt => ord == Ordering::Greater,
        CmpOp::Ge => ord != Ordering::Less,
        CmpOp::Contains => false,
    }
}

/// A missing value makes its comparison false; NOT applies to that result.
pub fn eval_pred(p: &Pred, row: &JoinedRow<'_>) -> bool {
    match p {
        Pred::And(a, b) => eval_pred(a, row) && eval_pred(b, row),
        Pred::Or(a, b) => eval_pred(a, row) || eval_pred(b, row),
        Pred::Not(a) => !eval_pred(a, row),
        Pred::Cmp { field, op, lit } => row.get(field).is_some_and(|v| compare(v, *op, lit)),
    }
}

/// Result ordering: order key ascending with missing keys last, then the
/// primary entity id.
pub fn row_order(primary: Entity) -> impl Fn(&ResultRow, &ResultRow) -> Ordering {
    move |a, b| {
        let keys = match (&a.order_key, &b.order_key) {
            (Some(x), Some(y)) => x.total_cmp(y),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        };
        keys.then_with(|| a.primary_id(primary).cmp(b.primary_id(primary)))
            .then_with(|| a.ids.cmp(&b.ids))
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LocalAnswer {
    pub site: SiteId,
    pub rows: Vec<ResultRow>,
    pub truncated: bool,
}

/// Evaluates over the primary entities accepted by `scope`.
pub fn evaluate_scoped(
    q: &TypedQuery,
    store: &MetaStore,
    site: &SiteId,
    scope: &dyn Fn(&JoinedRow<'_>) -> bool,
) -> LocalAnswer {
    let q = q.query();
    let primary = primary_entity(q);
    let mut rows: Vec<ResultRow> = store
        .scan(primary)
        .map(|(id, row)| join(store, primary, id, row))
        .filter(|j| scope(j) && eval_pred(&q.pred, j))
        .map(|j| ResultRow {
            values: q.proj.iter().map(|f| j.get(f).cloned()).collect(),
            order_key: q.order_by.as_ref().and_then(|f| j.get(f).cloned()),
            ids: j.ids,
            site: site.clone(),
        })
        .collect();
    rows.sort_by(row_order(primary));
    let mut truncated = false;
    if let Some(limit) = q.limit {
        if rows.len() as u64 > limit {
            rows.truncate(limit as usize);
            truncated = true;
        }
    }
    LocalAnswer { site: site.clone(), rows, truncated }
}

pub fn evaluate_local(q: &TypedQuery, store: &MetaStore, site: &SiteId) -> Vec<ResultRow> {
    evaluate_scoped(q, store, site, &|_| true).rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metastore::MetaRecord;
    use crate::querylang::{parse_and_validate, validate};

    fn site() -> SiteId {
        SiteId::new("site-a").unwrap()
    }

    fn put(s: &mut MetaStore, e: Entity, id: &str, attr: &str, v: Value) {
        s.put_meta(MetaRecord {
            entity: e,
            entity_id: id.into(),
            attr: attr.into(),
            value: v,
            version: 1,
            origin: site(),
        })
        .unwrap();
    }

    fn three_images() -> MetaStore {
        let mut s = MetaStore::with_builtins();
        for (i, d) in [0.2, 0.4, 0.6].iter().enumerate() {
            let id = format!("1.{i}");
            put(&mut s, Entity::Image, &id, "breast_density", Value::Float(*d));
            put(&mut s, Entity::Image, &id, "lfn", Value::String(format!("/f{i}")));
            put(&mut s, Entity::Image, &id, "study_id", Value::String(format!("S{}", i % 2)));
        }
        put(&mut s, Entity::Study, "S0", "patient_id", Value::String("p0".into()));
        put(&mut s, Entity::Patient, "p0", "age", Value::Int(61));
        s
    }

    #[test]
    fn empty_store_no_rows() {
        let s = MetaStore::with_builtins();
        let q = parse_and_validate("SELECT image.lfn WHERE image.breast_density > 0.3", &s).unwrap();
        assert!(evaluate_local(&q, &s, &site()).is_empty());
    }

    #[test]
    fn density_filter() {
        let s = three_images();
        let q = parse_and_validate("SELECT image.lfn WHERE image.breast_density > 0.3", &s).unwrap();
        let rows = evaluate_local(&q, &s, &site());
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].values[0], Some(Value::String("/f1".into())));
        assert!(rows.iter().all(|r| r.site == site()));
    }

    #[test]
    fn join_and_missing_values() {
        let s = three_images();
        // only images in study S0 reach a patient with an age
        let q = parse_and_validate("SELECT image.lfn, patient.age WHERE patient.age > 60", &s).unwrap();
        let rows = evaluate_local(&q, &s, &site());
        let ids: Vec<_> = rows.iter().map(|r| r.ids[&Entity::Image].clone()).collect();
        assert_eq!(ids, vec!["1.0", "1.2"]);
        assert_eq!(rows[0].ids[&Entity::Patient], "p0");
        // NOT of a missing comparison is true
        let q = parse_and_validate("SELECT image.lfn WHERE NOT patient.age > 60", &s).unwrap();
        assert_eq!(evaluate_local(&q, &s, &site()).len(), 1);
    }

    #[test]
    fn order_and_limit() {
        let s = three_images();
        let q = parse_and_validate(
            "SELECT image.lfn WHERE image.breast_density > 0 ORDER BY image.breast_density LIMIT 2",
            &s,
        )
        .unwrap();
        let a = evaluate_scoped(&q, &s, &site(), &|_| true);
        assert!(a.truncated);
        assert_eq!(a.rows.len(), 2);
        assert_eq!(a.rows[0].order_key, Some(Value::Float(0.2)));
    }

    #[test]
    fn study_primary() {
        let s = three_images();
        let q = validate(&crate::querylang::parse("SELECT study.patient_id WHERE study.patient_id = 'p0'").unwrap(), &s)
            .unwrap();
        let rows = evaluate_local(&q, &s, &site());
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].ids[&Entity::Study], "S0");
    }
}
