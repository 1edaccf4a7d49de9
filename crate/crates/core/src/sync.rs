//! Per-origin sequenced change log, gap-buffered apply, and anti-entropy
//! paging.
//!
//! Every replicated mutation is a [`ChangeRecord`]. A node writes each
//! record it applies (its own and its peers') to `log/changes.log` before
//! folding it into the [`FederationState`], so a restart replays the log and
//! ends in the same state.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalogue::{Catalogue, FileEntry, Replica};
use crate::ids::{Digest, SiteId};
use crate::jobs::{JobBoard, JobEvent};
use crate::metastore::{AttributeDescriptor, MetaRecord, MetaStore};

pub const GAP_BUFFER_LIMIT: usize = 10_000;
pub const PULL_CAP: usize = 1_000;
pub const DEFAULT_SYNC_INTERVAL_S: u64 = 5;
const MAX_RECORD_LEN: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("digest mismatch on record {origin}/{seq}")]
    BadDigest { origin: SiteId, seq: u64 },
    #[error("gap buffer full ({limit} records) while holding {origin}/{seq}")]
    BufferOverflow { origin: SiteId, seq: u64, limit: usize },
    #[error("corrupt change log at byte offset {offset}: {detail}")]
    CorruptLog { offset: u64, detail: String },
    #[error("malformed record: {0}")]
    BadRecord(String),
    #[error("storage failure: {0}")]
    Storage(#[from] std::io::Error),
    #[error("peer {0} unreachable: {1}")]
    PeerUnreachable(SiteId, String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum Payload {
    AddFile { entry: FileEntry, pfn: String },
    AddReplica(Replica),
    PutMeta(MetaRecord),
    DefineAttr(AttributeDescriptor),
    JobEvent(JobEvent),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::AddFile { .. } => "AddFile",
            Payload::AddReplica(_) => "AddReplica",
            Payload::PutMeta(_) => "PutMeta",
            Payload::DefineAttr(_) => "DefineAttr",
            Payload::JobEvent(_) => "JobEvent",
        }
    }
}

#[derive(Serialize)]
struct BodyRef<'a> {
    origin: &'a SiteId,
    seq: u64,
    #[serde(flatten)]
    payload: &'a Payload,
}

#[derive(Deserialize)]
struct BodyOwned {
    origin: SiteId,
    seq: u64,
    #[serde(flatten)]
    payload: Payload,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeRecord {
    pub origin: SiteId,
    pub seq: u64,
    #[serde(flatten)]
    pub payload: Payload,
    pub digest: Digest,
}

impl ChangeRecord {
    pub fn new(origin: SiteId, seq: u64, payload: Payload) -> Self {
        let body = body_bytes(&origin, seq, &payload);
        let digest = crate::dataset::checksum(&body);
        ChangeRecord { origin, seq, payload, digest }
    }

    /// Canonical body bytes; the digest covers these.
    pub fn body(&self) -> Vec<u8> {
        body_bytes(&self.origin, self.seq, &self.payload)
    }

    pub fn verify(&self) -> bool {
        self.seq >= 1 && crate::dataset::checksum(&self.body()) == self.digest
    }

    fn from_body(body: &[u8], digest: Digest) -> Result<Self, SyncError> {
        let b: BodyOwned = serde_json::from_slice(body).map_err(|e| SyncError::BadRecord(e.to_string()))?;
        Ok(ChangeRecord { origin: b.origin, seq: b.seq, payload: b.payload, digest })
    }
}

fn body_bytes(origin: &SiteId, seq: u64, payload: &Payload) -> Vec<u8> {
    serde_json::to_vec(&BodyRef { origin, seq, payload }).expect("payload serializes")
}

/// Highest contiguously applied seq per origin. Absent origins are zero.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeqVector(BTreeMap<SiteId, u64>);

impl SeqVector {
    pub fn new() -> Self {
        SeqVector::default()
    }

    pub fn get(&self, site: &SiteId) -> u64 {
        self.0.get(site).copied().unwrap_or(0)
    }

    pub fn set(&mut self, site: SiteId, seq: u64) {
        if seq == 0 {
            self.0.remove(&site);
        } else {
            self.0.insert(site, seq);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SiteId, u64)> {
        self.0.iter().map(|(k, v)| (k, *v))
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    /// True if every origin in `other` is at or below ours.
    pub fn dominates(&self, other: &SeqVector) -> bool {
        other.iter().all(|(s, v)| self.get(s) >= v)
    }
}

/// Append-only record file: `len u32 LE ‖ body ‖ digest[32]` per record.
pub struct LogFile {
    file: File,
    path: PathBuf,
    durable: bool,
}

/// Outcome of opening a log.
pub struct LogContents {
    pub records: Vec<ChangeRecord>,
    /// Bytes cut from the tail by recovery, if any.
    pub truncated_bytes: u64,
}

impl LogFile {
    pub fn create(path: &Path, durable: bool) -> Result<(), SyncError> {
        let f = OpenOptions::new().write(true).create_new(true).open(path)?;
        if durable {
            f.sync_all()?;
        }
        Ok(())
    }

    /// Opens and scans a log. A damaged tail is an error unless
    /// `truncate_tail` is set, in which case the file is cut back to the end
    /// of the last valid record.
    pub fn open(path: &Path, durable: bool, truncate_tail: bool) -> Result<(LogFile, LogContents), SyncError> {
        let mut file = OpenOptions::new().read(true).write(true).open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let (records, valid_len, damage) = scan(&bytes);
        let mut truncated_bytes = 0;
        if let Some(detail) = damage {
            if !truncate_tail {
                return Err(SyncError::CorruptLog { offset: valid_len, detail });
            }
            log::warn!("truncating change log at offset {valid_len} ({detail})");
            file.set_len(valid_len)?;
            if durable {
                file.sync_all()?;
            }
            truncated_bytes = bytes.len() as u64 - valid_len;
        }
        file.seek(SeekFrom::End(0))?;
        Ok((LogFile { file, path: path.to_path_buf(), durable }, LogContents { records, truncated_bytes }))
    }

    /// Writes a batch with a single write call, then syncs if durable.
    pub fn append(&mut self, records: &[ChangeRecord]) -> Result<(), SyncError> {
        if records.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for r in records {
            encode_frame(r, &mut buf);
        }
        self.file.write_all(&buf)?;
        if self.durable {
            self.file.sync_data()?;
        }
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn encode_frame(r: &ChangeRecord, out: &mut Vec<u8>) {
    let body = r.body();
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(r.digest.as_bytes());
}

/// Returns the valid prefix, its byte length, and a description of any damage
/// after it.
pub fn scan(bytes: &[u8]) -> (Vec<ChangeRecord>, u64, Option<String>) {
    let mut out = Vec::new();
    let mut off = 0usize;
    while off < bytes.len() {
        let rest = &bytes[off..];
        if rest.len() < 4 {
            return (out, off as u64, Some("truncated length prefix".into()));
        }
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        if len > MAX_RECORD_LEN {
            return (out, off as u64, Some(format!("record length {len} too large")));
        }
        if rest.len() < 4 + len + 32 {
            return (out, off as u64, Some("truncated record".into()));
        }
        let body = &rest[4..4 + len];
        let digest = Digest(rest[4 + len..4 + len + 32].try_into().unwrap());
        if crate::dataset::checksum(body) != digest {
            return (out, off as u64, Some("digest mismatch".into()));
        }
        match ChangeRecord::from_body(body, digest) {
            Ok(r) => out.push(r),
            Err(e) => return (out, off as u64, Some(e.to_string())),
        }
        off += 4 + len + 32;
    }
    (out, off as u64, None)
}

/// The replicated state every record folds into.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationState {
    pub catalogue: Catalogue,
    pub metastore: MetaStore,
    pub jobs: JobBoard,
}

impl Default for FederationState {
    fn default() -> Self {
        FederationState { catalogue: Catalogue::new(), metastore: MetaStore::with_builtins(), jobs: JobBoard::new() }
    }
}

impl FederationState {
    pub fn new() -> Self {
        FederationState::default()
    }

    /// Applies one record. Conflicts are logged and skipped: every replicated
    /// operation is add-only or LWW, so a conflicting record can only come
    /// from a misbehaving peer.
    pub fn fold(&mut self, r: &ChangeRecord) {
        let res: Result<(), String> = match &r.payload {
            Payload::AddFile { entry, pfn } => {
                self.catalogue.register_file(entry.clone(), pfn.clone()).map(|_| ()).map_err(|e| e.to_string())
            }
            Payload::AddReplica(rep) => self
                .catalogue
                .merge_replica(rep.guid, rep.site.clone(), rep.pfn.clone())
                .map_err(|e| e.to_string()),
            Payload::PutMeta(m) => self.metastore.merge_replicated(m.clone()).map_err(|e| e.to_string()),
            Payload::DefineAttr(d) => self.metastore.define_attribute(d.clone()).map(|_| ()).map_err(|e| e.to_string()),
            Payload::JobEvent(ev) => {
                self.jobs.apply(&r.origin, r.seq, ev.clone());
                Ok(())
            }
        };
        if let Err(e) = res {
            log::warn!("skipping {} {}/{}: {e}", r.payload.kind(), r.origin, r.seq);
        }
    }

    /// Canonical catalogue + metastore serialization used to compare sites.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct View<'a> {
            catalogue: &'a Catalogue,
            metastore: &'a MetaStore,
        }
        serde_json::to_vec(&View { catalogue: &self.catalogue, metastore: &self.metastore }).expect("state serializes")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub applied: usize,
    pub duplicates: usize,
    pub buffered: usize,
    pub rejected: usize,
}

/// Durable replicated state for one site: log, vector, gap buffer.
pub struct Replicator {
    site: SiteId,
    state: FederationState,
    vector: SeqVector,
    applied: BTreeMap<SiteId, Vec<ChangeRecord>>,
    pending: BTreeMap<SiteId, BTreeMap<u64, ChangeRecord>>,
    log: Option<LogFile>,
}

impl Replicator {
    /// An in-memory replicator; used by tests and oracles.
    pub fn in_memory(site: SiteId) -> Self {
        Replicator {
            site,
            state: FederationState::new(),
            vector: SeqVector::new(),
            applied: BTreeMap::new(),
            pending: BTreeMap::new(),
            log: None,
        }
    }

    /// Opens a log and replays it.
    pub fn open(site: SiteId, path: &Path, durable: bool, truncate_tail: bool) -> Result<(Self, LogContents), SyncError> {
        let (log, contents) = LogFile::open(path, durable, truncate_tail)?;
        let mut rep = Replicator::in_memory(site);
        for r in &contents.records {
            let expect = rep.vector.get(&r.origin) + 1;
            if r.seq != expect {
                return Err(SyncError::CorruptLog {
                    offset: 0,
                    detail: format!("record {}/{} out of order (expected seq {expect})", r.origin, r.seq),
                });
            }
            rep.commit_one(r.clone());
        }
        rep.log = Some(log);
        Ok((rep, contents))
    }

    pub fn site(&self) -> &SiteId {
        &self.site
    }

    pub fn state(&self) -> &FederationState {
        &self.state
    }

    pub fn vector(&self) -> &SeqVector {
        &self.vector
    }

    pub fn pending_len(&self) -> usize {
        self.pending.values().map(BTreeMap::len).sum()
    }

    pub fn record_count(&self) -> usize {
        self.applied.values().map(Vec::len).sum()
    }

    fn commit_one(&mut self, r: ChangeRecord) {
        self.state.fold(&r);
        self.vector.set(r.origin.clone(), r.seq);
        self.applied.entry(r.origin.clone()).or_default().push(r);
    }

    fn persist(&mut self, records: &[ChangeRecord]) -> Result<(), SyncError> {
        match &mut self.log {
            Some(log) => log.append(records),
            None => Ok(()),
        }
    }

    /// Appends local records: logged (write-ahead) as one batch, then applied.
    pub fn append(&mut self, payloads: Vec<Payload>) -> Result<Vec<ChangeRecord>, SyncError> {
        let mut seq = self.vector.get(&self.site);
        let records: Vec<ChangeRecord> = payloads
            .into_iter()
            .map(|p| {
                seq += 1;
                ChangeRecord::new(self.site.clone(), seq, p)
            })
            .collect();
        self.persist(&records)?;
        for r in &records {
            self.commit_one(r.clone());
        }
        Ok(records)
    }

    /// Applies records from peers. Already-applied records are acknowledged
    /// without effect; records past a gap wait in the buffer. Records that
    /// become applicable are logged before they touch the state.
    pub fn apply(&mut self, incoming: Vec<ChangeRecord>) -> Result<ApplyReport, SyncError> {
        let mut report = ApplyReport::default();
        let mut tentative = self.vector.clone();
        let mut fresh: BTreeMap<SiteId, BTreeMap<u64, ChangeRecord>> = BTreeMap::new();
        let mut ready = Vec::new();
        let mut first_err = None;
        let held = self.pending_len();
        let mut fresh_count = 0usize;
        for r in incoming {
            if !r.verify() {
                report.rejected += 1;
                first_err.get_or_insert(SyncError::BadDigest { origin: r.origin.clone(), seq: r.seq });
                continue;
            }
            let cur = tentative.get(&r.origin);
            let known = self.pending.get(&r.origin).is_some_and(|m| m.contains_key(&r.seq))
                || fresh.get(&r.origin).is_some_and(|m| m.contains_key(&r.seq));
            if r.seq <= cur || known {
                report.duplicates += 1;
                continue;
            }
            if r.seq > cur + 1 {
                if held + fresh_count >= GAP_BUFFER_LIMIT {
                    report.rejected += 1;
                    first_err.get_or_insert(SyncError::BufferOverflow {
                        origin: r.origin.clone(),
                        seq: r.seq,
                        limit: GAP_BUFFER_LIMIT,
                    });
                    continue;
                }
                fresh_count += 1;
                fresh.entry(r.origin.clone()).or_default().insert(r.seq, r);
                continue;
            }
            let origin = r.origin.clone();
            let mut next = r.seq + 1;
            tentative.set(origin.clone(), r.seq);
            ready.push(r);
            loop {
                let from_fresh = fresh.get_mut(&origin).and_then(|m| m.remove(&next));
                let from_held = || self.pending.get(&origin).and_then(|m| m.get(&next)).cloned();
                let Some(n) = from_fresh.or_else(from_held) else { break };
                tentative.set(origin.clone(), next);
                ready.push(n);
                next += 1;
            }
        }
        self.persist(&ready)?;
        report.applied = ready.len();
        report.buffered = fresh.values().map(BTreeMap::len).sum();
        for r in ready {
            self.commit_one(r);
        }
        for (origin, m) in fresh {
            self.pending.entry(origin).or_default().extend(m);
        }
        let vector = &self.vector;
        for (origin, m) in self.pending.iter_mut() {
            let v = vector.get(origin);
            m.retain(|seq, _| *seq > v);
        }
        self.pending.retain(|_, m| !m.is_empty());
        match first_err {
            Some(e) if report.applied == 0 && report.duplicates == 0 && report.buffered == 0 => Err(e),
            Some(e) => {
                log::warn!("apply: {e}");
                Ok(report)
            }
            None => Ok(report),
        }
    }

    /// Records above `after`, from any origin, in `(origin, seq)` order,
    /// at most `cap`.
    pub fn since(&self, after: &SeqVector, cap: usize) -> Vec<ChangeRecord> {
        let mut out = Vec::new();
        for (origin, recs) in &self.applied {
            let from = after.get(origin) as usize;
            for r in recs.iter().skip(from) {
                if out.len() >= cap {
                    return out;
                }
                out.push(r.clone());
            }
        }
        out
    }

    /// Every applied record from one origin, in seq order.
    pub fn records_of(&self, origin: &SiteId) -> &[ChangeRecord] {
        self.applied.get(origin).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Reference fold: records sorted by `(origin, seq)` applied in order.
pub fn canonical_fold(records: &[ChangeRecord]) -> FederationState {
    let mut sorted: Vec<&ChangeRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.origin, a.seq).cmp(&(&b.origin, b.seq)));
    sorted.dedup_by(|a, b| a.origin == b.origin && a.seq == b.seq);
    let mut st = FederationState::new();
    for r in sorted {
        st.fold(r);
    }
    st
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalogue::Lfn;
    use crate::ids::Guid;
    use crate::metastore::{Entity, Value};

    fn site(s: &str) -> SiteId {
        SiteId::new(s).unwrap()
    }

    fn meta(origin: &str, id: &str, v: f64, version: u64) -> Payload {
        Payload::PutMeta(MetaRecord {
            entity: Entity::Image,
            entity_id: id.into(),
            attr: "breast_density".into(),
            value: Value::Float(v),
            version,
            origin: site(origin),
        })
    }

    fn file(origin: &str, n: u8) -> Payload {
        Payload::AddFile {
            entry: FileEntry {
                lfn: Lfn::new(format!("/acq/{origin}/f{n}")).unwrap(),
                guid: Guid([n; 16]),
                size: 10,
                checksum: Digest([n; 32]),
                created_site: site(origin),
                created_seq: n as u64,
            },
            pfn: format!("store/{n}"),
        }
    }

    #[test]
    fn seqs_start_at_one() {
        let mut r = Replicator::in_memory(site("a"));
        let recs = r.append(vec![meta("a", "1", 0.1, 1)]).unwrap();
        assert_eq!(recs[0].seq, 1);
        let recs = r.append(vec![meta("a", "1", 0.2, 2)]).unwrap();
        assert_eq!(recs[0].seq, 2);
        assert_eq!(r.vector().get(&site("a")), 2);
    }

    #[test]
    fn record_json_round_trip() {
        let r = ChangeRecord::new(site("a"), 3, file("a", 3));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"kind\":\"AddFile\""));
        let back: ChangeRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert!(back.verify());
    }

    #[test]
    fn tampered_record_rejected() {
        let mut r = ChangeRecord::new(site("a"), 1, meta("a", "1", 0.1, 1));
        r.seq = 2;
        let mut rep = Replicator::in_memory(site("b"));
        assert!(matches!(rep.apply(vec![r]), Err(SyncError::BadDigest { .. })));
    }

    #[test]
    fn idempotent_and_gap_buffered() {
        let mut src = Replicator::in_memory(site("a"));
        let recs = src.append(vec![file("a", 1), meta("a", "1", 0.4, 1)]).unwrap();
        let mut dst = Replicator::in_memory(site("b"));
        let rep = dst.apply(vec![recs[1].clone()]).unwrap();
        assert_eq!(rep.buffered, 1);
        assert_eq!(dst.vector().get(&site("a")), 0);
        let rep = dst.apply(vec![recs[0].clone()]).unwrap();
        assert_eq!(rep.applied, 2);
        assert_eq!(dst.pending_len(), 0);
        let before = dst.state().canonical_bytes();
        let rep = dst.apply(recs.clone()).unwrap();
        assert_eq!(rep.duplicates, 2);
        assert_eq!(dst.state().canonical_bytes(), before);
        assert_eq!(before, src.state().canonical_bytes());
    }

    #[test]
    fn buffer_overflow_is_an_error() {
        let mut src = Replicator::in_memory(site("a"));
        let payloads: Vec<Payload> = (0..GAP_BUFFER_LIMIT + 2).map(|i| meta("a", &i.to_string(), 0.5, 1)).collect();
        let recs = src.append(payloads).unwrap();
        let mut dst = Replicator::in_memory(site("b"));
        let res = dst.apply(recs[1..].to_vec()).unwrap();
        assert_eq!(res.buffered, GAP_BUFFER_LIMIT);
        assert_eq!(res.rejected, 1);
        assert!(matches!(
            dst.apply(vec![recs[GAP_BUFFER_LIMIT + 1].clone()]),
            Err(SyncError::BufferOverflow { .. })
        ));
        let res = dst.apply(vec![recs[0].clone()]).unwrap();
        assert_eq!(res.applied, GAP_BUFFER_LIMIT + 1);
    }

    #[test]
    fn since_pages_in_origin_seq_order() {
        let mut a = Replicator::in_memory(site("a"));
        let mut b = Replicator::in_memory(site("b"));
        let ra = a.append((0..3).map(|i| meta("a", &format!("a{i}"), 0.1, 1)).collect()).unwrap();
        b.append((0..2).map(|i| meta("b", &format!("b{i}"), 0.1, 1)).collect()).unwrap();
        b.apply(ra).unwrap();
        let all = b.since(&SeqVector::new(), PULL_CAP);
        let keys: Vec<_> = all.iter().map(|r| (r.origin.as_str().to_string(), r.seq)).collect();
        assert_eq!(keys, vec![("a".into(), 1), ("a".into(), 2), ("a".into(), 3), ("b".into(), 1), ("b".into(), 2)]);
        assert_eq!(b.since(&SeqVector::new(), 2).len(), 2);
        assert!(b.since(b.vector(), PULL_CAP).is_empty());
        let mut v = SeqVector::new();
        v.set(site("a"), 2);
        assert_eq!(b.since(&v, PULL_CAP).len(), 3);
    }

    #[test]
    fn log_replay_and_truncated_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("changes.log");
        LogFile::create(&path, false).unwrap();
        let (mut rep, c) = Replicator::open(site("a"), &path, false, false).unwrap();
        assert!(c.records.is_empty());
        rep.append(vec![file("a", 1), meta("a", "1", 0.3, 1)]).unwrap();
        rep.append(vec![meta("a", "1", 0.6, 2)]).unwrap();
        let state = rep.state().canonical_bytes();
        drop(rep);

        let (rep, c) = Replicator::open(site("a"), &path, false, false).unwrap();
        assert_eq!(c.records.len(), 3);
        assert_eq!(rep.state().canonical_bytes(), state);
        drop(rep);

        let full = std::fs::metadata(&path).unwrap().len();
        let f = OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(full - 5).unwrap();
        drop(f);
        match Replicator::open(site("a"), &path, false, false) {
            Err(SyncError::CorruptLog { offset, .. }) => assert!(offset > 0 && offset < full),
            other => panic!("expected CorruptLog, got {:?}", other.map(|_| ())),
        }
        let (rep, c) = Replicator::open(site("a"), &path, false, true).unwrap();
        assert_eq!(c.records.len(), 2);
        assert!(c.truncated_bytes > 0);
        assert_eq!(rep.vector().get(&site("a")), 2);
    }

    #[test]
    fn canonical_fold_matches_shuffled_apply() {
        let mut a = Replicator::in_memory(site("a"));
        let mut b = Replicator::in_memory(site("b"));
        let mut recs = a.append(vec![file("a", 1), meta("a", "x", 0.1, 1), meta("a", "x", 0.2, 2)]).unwrap();
        recs.extend(b.append(vec![file("b", 2), meta("b", "x", 0.9, 2)]).unwrap());
        let oracle = canonical_fold(&recs).canonical_bytes();
        let mut c = Replicator::in_memory(site("c"));
        for r in recs.iter().rev() {
            c.apply(vec![r.clone()]).unwrap();
        }
        assert_eq!(c.state().canonical_bytes(), oracle);
    }
}
