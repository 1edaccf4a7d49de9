//! Federated query handling: one identical sub-query per site (partition
//! parallel), concurrent dispatch, and a deterministic merge. Also the rule
//! choosing between replicating matches back and analysing them in place.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalogue::{Catalogue, Lfn};
use crate::ids::SiteId;
use crate::metastore::Entity;
use crate::querylang::{primary_entity, LocalAnswer, ResultRow, TypedQuery};

pub const DEFAULT_QUERY_TIMEOUT: Duration = Duration::from_secs(10);
pub const DEFAULT_REPLICATE_THRESHOLD: u64 = 67_108_864;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FederationError {
    #[error("query plan has no targets")]
    NoTargets,
    #[error("result references unregistered file {0}")]
    UnknownGuid(Lfn),
}

#[derive(Clone, Debug)]
pub struct QueryPlan {
    pub query: TypedQuery,
    pub targets: Vec<SiteId>,
    pub timeout: Duration,
    pub issued_at: SiteId,
}

pub fn plan(
    query: TypedQuery,
    coordinator: &SiteId,
    peers: &[SiteId],
    timeout: Duration,
) -> Result<QueryPlan, FederationError> {
    let targets: BTreeSet<SiteId> =
        peers.iter().cloned().chain(std::iter::once(coordinator.clone())).collect();
    if targets.is_empty() {
        return Err(FederationError::NoTargets);
    }
    Ok(QueryPlan { query, targets: targets.into_iter().collect(), timeout, issued_at: coordinator.clone() })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteFailure {
    pub site: SiteId,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederatedResult {
    pub rows: Vec<ResultRow>,
    pub responded: Vec<SiteId>,
    pub failed: Vec<SiteFailure>,
    pub truncated: bool,
}

impl FederatedResult {
    pub fn is_partial(&self) -> bool {
        !self.failed.is_empty()
    }
}

/// Sends the canonical sub-query document to one site.
pub trait SubQueryDispatch: Sync {
    fn dispatch(&self, target: &SiteId, doc: &[u8], timeout: Duration) -> Result<LocalAnswer, String>;
}

impl<F> SubQueryDispatch for F
where
    F: Fn(&SiteId, &[u8], Duration) -> Result<LocalAnswer, String> + Sync,
{
    fn dispatch(&self, target: &SiteId, doc: &[u8], timeout: Duration) -> Result<LocalAnswer, String> {
        self(target, doc, timeout)
    }
}

/// Runs every sub-query concurrently (one in flight per target) and merges.
/// Failed sites are reported, never fatal.
pub fn execute(plan: &QueryPlan, dispatch: &dyn SubQueryDispatch) -> FederatedResult {
    let doc = plan.query.query().to_document();
    let answers: Vec<(SiteId, Result<LocalAnswer, String>)> = std::thread::scope(|s| {
        let handles: Vec<_> = plan
            .targets
            .iter()
            .map(|t| {
                let doc = &doc;
                (t.clone(), s.spawn(move || dispatch.dispatch(t, doc, plan.timeout)))
            })
            .collect();
        handles
            .into_iter()
            .map(|(t, h)| (t, h.join().unwrap_or_else(|_| Err("dispatcher panicked".into()))))
            .collect()
    });
    merge(&plan.query, answers)
}

/// Dedups rows by entity ids keeping the smallest answering site, then
/// re-applies the global order and limit.
pub fn merge(query: &TypedQuery, answers: Vec<(SiteId, Result<LocalAnswer, String>)>) -> FederatedResult {
    let q = query.query();
    let primary: Entity = primary_entity(q);
    let mut by_ids: BTreeMap<BTreeMap<Entity, String>, ResultRow> = BTreeMap::new();
    let mut responded = Vec::new();
    let mut failed = Vec::new();
    let mut truncated = false;
    for (site, answer) in answers {
        match answer {
            Ok(a) => {
                truncated |= a.truncated;
                responded.push(site);
                for row in a.rows {
                    match by_ids.get(&row.ids) {
                        Some(existing) if existing.site <= row.site => {}
                        _ => {
                            by_ids.insert(row.ids.clone(), row);
                        }
                    }
                }
            }
            Err(reason) => failed.push(SiteFailure { site, reason }),
        }
    }
    responded.sort();
    failed.sort_by(|a, b| a.site.cmp(&b.site));
    let mut rows: Vec<ResultRow> = by_ids.into_values().collect();
    rows.sort_by(crate::querylang::row_order(primary));
    if let Some(limit) = q.limit {
        if rows.len() as u64 > limit {
            rows.truncate(limit as usize);
            truncated = true;
        }
    }
    FederatedResult { rows, responded, failed, truncated }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    ReplicateBack,
    RemoteAnalysis,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferDecision {
    pub mode: TransferMode,
    pub threshold_bytes: u64,
    pub total_bytes: u64,
}

/// Remote analysis iff a job is attached and the matched files exceed the
/// threshold; otherwise the files are replicated to the coordinator.
pub fn decide_transfer(
    files: &[Lfn],
    job_attached: bool,
    catalogue: &Catalogue,
    threshold_bytes: u64,
) -> Result<TransferDecision, FederationError> {
    let mut seen = BTreeSet::new();
    let mut total: u64 = 0;
    for lfn in files {
        let e = catalogue.entry(lfn).ok_or_else(|| FederationError::UnknownGuid(lfn.clone()))?;
        if seen.insert(e.guid) {
            total = total.saturating_add(e.size);
        }
    }
    let mode = if job_attached && total > threshold_bytes {
        TransferMode::RemoteAnalysis
    } else {
        TransferMode::ReplicateBack
    };
    Ok(TransferDecision { mode, threshold_bytes, total_bytes: total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalogue::FileEntry;
    use crate::ids::{Digest, Guid};
    use crate::metastore::{MetaStore, Value};
    use crate::querylang::parse_and_validate;

    fn site(s: &str) -> SiteId {
        SiteId::new(s).unwrap()
    }

    fn q(text: &str) -> TypedQuery {
        parse_and_validate(text, &MetaStore::with_builtins()).unwrap()
    }

    fn row(id: &str, site_: &str, key: f64) -> ResultRow {
        ResultRow {
            ids: [(Entity::Image, id.to_string())].into_iter().collect(),
            values: vec![Some(Value::Float(key))],
            order_key: Some(Value::Float(key)),
            site: site(site_),
        }
    }

    #[test]
    fn plan_targets() {
        let me = site("self");
        let peers = [site("a"), site("b"), site("c")];
        let p = plan(q("SELECT image.lfn WHERE image.lfn = 'x'"), &me, &peers, DEFAULT_QUERY_TIMEOUT).unwrap();
        assert_eq!(p.targets.len(), 4);
        let dup = [site("a"), site("a"), site("self")];
        let p = plan(q("SELECT image.lfn WHERE image.lfn = 'x'"), &me, &dup, DEFAULT_QUERY_TIMEOUT).unwrap();
        assert_eq!(p.targets, vec![site("a"), site("self")]);
        let p = plan(q("SELECT image.lfn WHERE image.lfn = 'x'"), &me, &[], DEFAULT_QUERY_TIMEOUT).unwrap();
        assert_eq!(p.targets, vec![me]);
    }

    #[test]
    fn merge_dedups_to_smallest_site_and_reports_failures() {
        let query = q("SELECT image.breast_density WHERE image.breast_density > 0 ORDER BY image.breast_density");
        let answers = vec![
            (site("b"), Ok(LocalAnswer { site: site("b"), rows: vec![row("1", "b", 0.5), row("2", "b", 0.1)], truncated: false })),
            (site("a"), Ok(LocalAnswer { site: site("a"), rows: vec![row("1", "a", 0.5)], truncated: false })),
            (site("c"), Err("timeout".into())),
        ];
        let r = merge(&query, answers);
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0].ids[&Entity::Image], "2");
        assert_eq!(r.rows[1].site, site("a"));
        assert_eq!(r.responded, vec![site("a"), site("b")]);
        assert_eq!(r.failed, vec![SiteFailure { site: site("c"), reason: "timeout".into() }]);
        assert!(!r.truncated);
    }

    #[test]
    fn execute_runs_every_target() {
        let me = site("a");
        let p = plan(q("SELECT image.breast_density WHERE image.breast_density > 0 LIMIT 1"), &me, &[site("b")], DEFAULT_QUERY_TIMEOUT).unwrap();
        let dispatch = |t: &SiteId, doc: &[u8], _: Duration| {
            assert!(crate::querylang::Query::from_document(doc).is_ok());
            Ok(LocalAnswer { site: t.clone(), rows: vec![row(t.as_str(), t.as_str(), 0.3)], truncated: false })
        };
        let r = execute(&p, &dispatch);
        assert_eq!(r.rows.len(), 1);
        assert!(r.truncated);
        assert_eq!(r.responded.len(), 2);
    }

    fn catalogue_with(size: u64) -> (Catalogue, Lfn) {
        let mut c = Catalogue::new();
        let lfn = Lfn::new("/a/f").unwrap();
        c.register_file(
            FileEntry { lfn: lfn.clone(), guid: Guid([1; 16]), size, checksum: Digest([0; 32]), created_site: site("a"), created_seq: 1 },
            "p".into(),
        )
        .unwrap();
        (c, lfn)
    }

    #[test]
    fn transfer_rule() {
        let (c, lfn) = catalogue_with(10 << 20);
        let d = decide_transfer(&[lfn.clone()], false, &c, DEFAULT_REPLICATE_THRESHOLD).unwrap();
        assert_eq!(d.mode, TransferMode::ReplicateBack);
        let (c2, lfn2) = catalogue_with(2 << 30);
        assert_eq!(decide_transfer(&[lfn2], true, &c2, DEFAULT_REPLICATE_THRESHOLD).unwrap().mode, TransferMode::RemoteAnalysis);
        let (c3, lfn3) = catalogue_with(DEFAULT_REPLICATE_THRESHOLD);
        assert_eq!(decide_transfer(&[lfn3], true, &c3, DEFAULT_REPLICATE_THRESHOLD).unwrap().mode, TransferMode::ReplicateBack);
        assert!(decide_transfer(&[Lfn::new("/missing").unwrap()], true, &c, 1).is_err());
    }
}
