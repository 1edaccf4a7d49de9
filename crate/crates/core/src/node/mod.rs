//! A gridbox: one site's store, replicated state, query service and job
//! agent. Transport to peers is abstracted by [`PeerTransport`] so the same
//! node runs behind HTTP/TCP or inside the simulator.

mod agent;
mod clock;
mod config;
pub mod http;
mod peers;
pub mod preview;
mod serve;
mod store;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError};
use crate::catalogue::{CatalogueError, FileEntry, Lfn, Listing, Replica};
use crate::dataset::{self, tags, Dataset, DatasetError, Element};
use crate::federation::{self, FederatedResult, TransferDecision};
use crate::ids::{Guid, JobId, SiteId};
use crate::jobs::{Algorithm, Job, JobError, JobEvent, JobSpec, Transition};
use crate::metastore::{is_iso_date, AttributeDescriptor, Entity, MetaRecord, Value};
use crate::querylang::{self, evaluate_scoped, JoinedRow, LocalAnswer, Query, QueryError, TypedQuery};
use crate::sync::{ApplyReport, ChangeRecord, FederationState, Payload, Replicator, SeqVector, SyncError, PULL_CAP};
use crate::transfer::{ServerConfig, ServiceProvider};

pub use agent::{AgentReport, FailPoint};
pub use clock::{Clock, SimClock, SystemClock};
pub use config::{FederationKey, NodeConfig, PeerConfig};
pub use peers::HttpPeers;
pub use serve::{serve, RunningNode, ServeOptions};
pub use store::DataDir;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("data directory {0} is not empty")]
    DirNotEmpty(PathBuf),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("decode: {0}")]
    Decode(#[from] DatasetError),
    #[error("not anonymized")]
    NotAnonymized,
    #[error("missing element {0}")]
    MissingElement(&'static str),
    #[error("duplicate SOP instance {0}")]
    DuplicateSop(String),
    #[error("storage: {0}")]
    Storage(String),
    #[error("corrupt log at offset {offset}: {detail} (restart with --truncate-log to drop the damaged tail)")]
    CorruptLog { offset: u64, detail: String },
    #[error("port in use: {0}")]
    PortInUse(String),
    #[error("unknown guid {0}")]
    UnknownGuid(Guid),
    #[error("fetch failed: {0}")]
    FetchFailed(String),
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(Guid),
    #[error("analysis: {0}")]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Job(#[from] JobError),
    #[error(transparent)]
    Catalogue(#[from] CatalogueError),
    #[error("sync: {0}")]
    Sync(SyncError),
}

impl From<SyncError> for NodeError {
    fn from(e: SyncError) -> Self {
        match e {
            SyncError::CorruptLog { offset, detail } => NodeError::CorruptLog { offset, detail },
            SyncError::Storage(io) => NodeError::Storage(io.to_string()),
            other => NodeError::Sync(other),
        }
    }
}

/// How a node reaches its peers.
pub trait PeerTransport: Send + Sync {
    /// Records held by `to` above `after`, at most [`PULL_CAP`].
    fn pull(&self, from: &SiteId, to: &SiteId, after: &SeqVector) -> Result<Vec<ChangeRecord>, String>;
    /// Best effort; must not block on the peer.
    fn push(&self, from: &SiteId, to: &SiteId, records: Vec<ChangeRecord>);
    fn query(&self, from: &SiteId, to: &SiteId, doc: &[u8], timeout: Duration) -> Result<LocalAnswer, String>;
    /// File bytes by guid through an authenticated association.
    fn fetch(&self, from: &SiteId, to: &SiteId, guid: &Guid) -> Result<Vec<u8>, String>;
}

/// A transport with no peers.
pub struct NoPeers;

impl PeerTransport for NoPeers {
    fn pull(&self, _: &SiteId, to: &SiteId, _: &SeqVector) -> Result<Vec<ChangeRecord>, String> {
        Err(format!("{to} unreachable"))
    }
    fn push(&self, _: &SiteId, _: &SiteId, _: Vec<ChangeRecord>) {}
    fn query(&self, _: &SiteId, to: &SiteId, _: &[u8], _: Duration) -> Result<LocalAnswer, String> {
        Err(format!("{to} unreachable"))
    }
    fn fetch(&self, _: &SiteId, to: &SiteId, _: &Guid) -> Result<Vec<u8>, String> {
        Err(format!("{to} unreachable"))
    }
}

#[derive(Clone, Debug, Default)]
pub struct OpenOptions {
    /// fsync log appends and store files.
    pub durable: bool,
    /// Drop a damaged log tail instead of refusing to start.
    pub truncate_log: bool,
    /// RNG seed for guids and nonces; entropy when absent.
    pub seed: Option<u64>,
}

/// Optional patient attributes supplied alongside an ingest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatientAttrs {
    #[serde(default)]
    pub age: Option<i64>,
    #[serde(default)]
    pub sex: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestReceipt {
    pub lfn: Lfn,
    pub guid: Guid,
    pub seq: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub site: SiteId,
    pub ae_title: String,
    pub vector: SeqVector,
    pub records: usize,
    pub pending: usize,
    pub files: usize,
    pub local_files: usize,
    pub jobs: usize,
    pub peers: Vec<SiteId>,
    pub uptime_s: u64,
    pub swept_orphans: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub pulled: usize,
    pub applied: usize,
    pub unreachable: Vec<SiteId>,
}

pub struct Node {
    cfg: NodeConfig,
    dir: DataDir,
    rep: Mutex<Replicator>,
    peers: Arc<dyn PeerTransport>,
    clock: Arc<dyn Clock>,
    rng: Mutex<ChaCha8Rng>,
    started_ms: u64,
    swept: usize,
    fail_point: Mutex<Option<FailPoint>>,
    /// Jobs this site had claimed when the node was opened. Nothing can be
    /// running them, so the agent resumes them without waiting for a stall.
    orphaned: Mutex<BTreeSet<JobId>>,
}

impl Node {
    /// Creates the data directory layout and writes `config.json`.
    pub fn init(dir: &Path, mut cfg: NodeConfig) -> Result<(), NodeError> {
        cfg.validate()?;
        let dd = DataDir::new(dir, true);
        dd.create()?;
        let json = serde_json::to_vec_pretty(&cfg).expect("config serializes");
        std::fs::write(dd.config_path(), json).map_err(|e| NodeError::Storage(e.to_string()))?;
        Ok(())
    }

    /// Opens an initialized data directory: replays the log and sweeps store
    /// files that no replica references.
    pub fn open(
        dir: &Path,
        opts: &OpenOptions,
        peers: Arc<dyn PeerTransport>,
        clock: Arc<dyn Clock>,
    ) -> Result<Node, NodeError> {
        let dd = DataDir::new(dir, opts.durable);
        let cfg = NodeConfig::load(&dd.config_path())?;
        let (rep, contents) = Replicator::open(cfg.site_id.clone(), &dd.log_path(), opts.durable, opts.truncate_log)?;
        if contents.truncated_bytes > 0 {
            log::warn!("dropped {} bytes of damaged log tail", contents.truncated_bytes);
        }
        let keep: BTreeSet<Guid> = rep
            .state()
            .catalogue
            .entries()
            .filter(|e| rep.state().catalogue.has_replica(&e.guid, &cfg.site_id))
            .map(|e| e.guid)
            .collect();
        let swept = dd.sweep(&keep)?;
        let orphaned = rep.state().jobs.in_progress_for(&cfg.site_id).into_iter().map(|j| j.id).collect();
        let rng = match opts.seed {
            Some(s) => ChaCha8Rng::seed_from_u64(s),
            None => ChaCha8Rng::from_entropy(),
        };
        Ok(Node {
            started_ms: clock.now_ms(),
            cfg,
            dir: dd,
            rep: Mutex::new(rep),
            peers,
            clock,
            rng: Mutex::new(rng),
            swept,
            fail_point: Mutex::new(None),
            orphaned: Mutex::new(orphaned),
        })
    }

    pub fn site(&self) -> &SiteId {
        &self.cfg.site_id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn data_dir(&self) -> &DataDir {
        &self.dir
    }

    pub fn swept_orphans(&self) -> usize {
        self.swept
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    fn lock(&self) -> MutexGuard<'_, Replicator> {
        self.rep.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Runs `f` against the current replicated state.
    pub fn with_state<R>(&self, f: impl FnOnce(&FederationState) -> R) -> R {
        f(self.lock().state())
    }

    pub fn vector(&self) -> SeqVector {
        self.lock().vector().clone()
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        self.lock().state().canonical_bytes()
    }

    pub fn records_of(&self, origin: &SiteId) -> Vec<ChangeRecord> {
        self.lock().records_of(origin).to_vec()
    }

    pub fn server_config(&self) -> ServerConfig {
        ServerConfig {
            ae_title: self.cfg.ae_title.clone(),
            keys: [(self.cfg.federation_key_id, self.cfg.federation_key.0)].into_iter().collect(),
        }
    }

    fn append_and_push(&self, rep: MutexGuard<'_, Replicator>, payloads: Vec<Payload>) -> Result<Vec<ChangeRecord>, NodeError> {
        let mut rep = rep;
        let records = rep.append(payloads)?;
        drop(rep);
        self.push_all(&records);
        Ok(records)
    }

    fn push_all(&self, records: &[ChangeRecord]) {
        if records.is_empty() {
            return;
        }
        for p in &self.cfg.peers {
            self.peers.push(self.site(), &p.site_id, records.to_vec());
        }
    }

    pub fn status(&self) -> NodeStatus {
        let rep = self.lock();
        let st = rep.state();
        NodeStatus {
            site: self.site().clone(),
            ae_title: self.cfg.ae_title.clone(),
            vector: rep.vector().clone(),
            records: rep.record_count(),
            pending: rep.pending_len(),
            files: st.catalogue.len(),
            local_files: st.catalogue.entries().filter(|e| st.catalogue.has_replica(&e.guid, self.site())).count(),
            jobs: st.jobs.all().len(),
            peers: self.cfg.peer_ids(),
            uptime_s: self.now_ms().saturating_sub(self.started_ms) / 1000,
            swept_orphans: self.swept,
        }
    }

    // ---- ingest ----

    /// Ingests an identified file from a local workstation: anonymize, QC,
    /// store, register and describe. All or nothing.
    pub fn ingest(&self, bytes: &[u8], attrs: Option<&PatientAttrs>) -> Result<IngestReceipt, NodeError> {
        let ds = dataset::decode(bytes)?;
        let (anon, pair) = dataset::anonymize(&ds, &self.cfg.federation_key.0)?;
        self.dir.append_reid(&pair.pseudonym, &pair.original_id)?;
        self.ingest_dataset(anon, attrs)
    }

    /// Ingests a file that arrived already anonymized (C-STORE).
    pub fn ingest_anonymized(&self, bytes: &[u8]) -> Result<IngestReceipt, NodeError> {
        let ds = dataset::decode(bytes)?;
        dataset::verify_anonymized(&ds).map_err(|_| NodeError::NotAnonymized)?;
        self.ingest_dataset(ds, None)
    }

    fn ingest_dataset(&self, mut ds: Dataset, attrs: Option<&PatientAttrs>) -> Result<IngestReceipt, NodeError> {
        dataset::verify_anonymized(&ds).map_err(|_| NodeError::NotAnonymized)?;
        let sop = ds.str(tags::SOP_INSTANCE_UID).ok_or(NodeError::MissingElement("SOPInstanceUID"))?.to_string();
        let study = ds.str(tags::STUDY_INSTANCE_UID).ok_or(NodeError::MissingElement("StudyInstanceUID"))?.to_string();
        let pseudo = ds.str(tags::PATIENT_ID).ok_or(NodeError::MissingElement("PatientID"))?.to_string();
        let lfn = Lfn::new(format!("/acq/{}/{}/{}/{}.mgd", self.site(), pseudo, study, sop))?;
        if self.with_state(|s| s.metastore.has_entity(Entity::Image, &sop) || s.catalogue.entry(&lfn).is_some()) {
            return Err(NodeError::DuplicateSop(sop));
        }

        let img = analysis::Image::from_dataset(&ds)?;
        let (qc, det) = analysis::qc_report(&img);
        if let Some(w) = &qc.warning {
            log::warn!("ingest {sop}: {w}");
        }
        ds.put(Element::text(tags::MEAN_BRIGHTNESS, &qc.mean_brightness.to_string())?);
        ds.put(Element::text(tags::RMS_CONTRAST, &qc.rms_contrast.to_string())?);
        ds.put(Element::text(tags::BREAST_DENSITY, &qc.breast_density.to_string())?);
        ds.put(Element::u32(tags::MICROCALC_COUNT, qc.microcalc_count as u32)?);
        let bytes = dataset::encode(&ds)?;
        let guid = Guid::random(&mut *self.rng.lock().unwrap_or_else(|p| p.into_inner()));
        self.dir.write_file(&guid, &bytes)?;

        let mut writes: Vec<(Entity, String, &str, Value)> = vec![
            (Entity::Image, sop.clone(), "lfn", Value::String(lfn.to_string())),
            (Entity::Image, sop.clone(), "study_id", Value::String(study.clone())),
            (Entity::Image, sop.clone(), "mean_brightness", Value::Float(qc.mean_brightness)),
            (Entity::Image, sop.clone(), "rms_contrast", Value::Float(qc.rms_contrast)),
            (Entity::Image, sop.clone(), "breast_density", Value::Float(qc.breast_density)),
            (Entity::Image, sop.clone(), "microcalc_count", Value::Int(qc.microcalc_count as i64)),
            (
                Entity::Image,
                sop.clone(),
                "microcalc_locations",
                Value::String(serde_json::to_string(&det.centroids).expect("centroids serialize")),
            ),
            (Entity::Study, study.clone(), "patient_id", Value::String(pseudo.clone())),
        ];
        if let Some(d) = ds.str(tags::STUDY_DATE).and_then(da_to_iso) {
            writes.push((Entity::Study, study.clone(), "date", Value::Date(d)));
        }
        let age = attrs.and_then(|a| a.age).or_else(|| ds.str(tags::PATIENT_AGE).and_then(age_years));
        if let Some(age) = age {
            writes.push((Entity::Patient, pseudo.clone(), "age", Value::Int(age)));
        }
        let sex = attrs.and_then(|a| a.sex.clone()).or_else(|| ds.str(tags::PATIENT_SEX).map(str::to_string));
        if let Some(sex) = sex.filter(|s| !s.is_empty()) {
            writes.push((Entity::Patient, pseudo.clone(), "sex", Value::String(sex)));
        }

        let rep = self.lock();
        let st = rep.state();
        if st.metastore.has_entity(Entity::Image, &sop) || st.catalogue.entry(&lfn).is_some() {
            drop(rep);
            self.dir.remove_file(&guid);
            return Err(NodeError::DuplicateSop(sop));
        }
        let seq = rep.vector().get(self.site()) + 1;
        let entry = FileEntry {
            lfn: lfn.clone(),
            guid,
            size: bytes.len() as u64,
            checksum: dataset::checksum(&bytes),
            created_site: self.site().clone(),
            created_seq: seq,
        };
        let mut payloads = vec![Payload::AddFile { entry, pfn: DataDir::pfn(&guid) }];
        payloads.extend(self.meta_payloads(st, writes, true));
        match self.append_and_push(rep, payloads) {
            Ok(_) => Ok(IngestReceipt { lfn, guid, seq }),
            Err(e) => {
                self.dir.remove_file(&guid);
                Err(e)
            }
        }
    }

    /// Versioned PutMeta payloads. With `skip_unchanged`, writes equal to the
    /// current value are dropped.
    fn meta_payloads(
        &self,
        st: &FederationState,
        writes: Vec<(Entity, String, &str, Value)>,
        skip_unchanged: bool,
    ) -> Vec<Payload> {
        writes
            .into_iter()
            .filter(|(e, id, a, v)| !skip_unchanged || st.metastore.cell(*e, id, a).map(|c| &c.value) != Some(v))
            .map(|(entity, entity_id, attr, value)| {
                Payload::PutMeta(MetaRecord {
                    version: st.metastore.next_version(entity, &entity_id, attr),
                    entity,
                    entity_id,
                    attr: attr.to_string(),
                    value,
                    origin: self.site().clone(),
                })
            })
            .collect()
    }

    /// Defines a new attribute federation-wide.
    pub fn define_attribute(&self, d: AttributeDescriptor) -> Result<bool, NodeError> {
        let rep = self.lock();
        let mut probe = rep.state().metastore.clone();
        let fresh = probe.define_attribute(d.clone()).map_err(|e| NodeError::BadConfig(e.to_string()))?;
        if fresh {
            self.append_and_push(rep, vec![Payload::DefineAttr(d)])?;
        }
        Ok(fresh)
    }

    // ---- catalogue ----

    pub fn list(&self, prefix: &Lfn) -> Listing {
        self.with_state(|s| s.catalogue.list(prefix))
    }

    pub fn resolve(&self, lfn: &Lfn) -> Result<(FileEntry, Vec<Replica>), NodeError> {
        Ok(self.with_state(|s| s.catalogue.resolve(lfn))?)
    }

    /// Bytes of a file held here; no network.
    pub fn read_local(&self, guid: &Guid) -> Result<Vec<u8>, NodeError> {
        if !self.with_state(|s| s.catalogue.has_replica(guid, self.site())) {
            return Err(NodeError::UnknownGuid(*guid));
        }
        self.dir.read_file(guid)
    }

    /// Bytes of any registered file; a missing local replica is fetched from
    /// a holder, verified and registered here.
    pub fn fetch(&self, guid: &Guid) -> Result<Vec<u8>, NodeError> {
        let (entry, replicas) = self.with_state(|s| {
            let e = s.catalogue.entry_by_guid(guid).cloned();
            (e, s.catalogue.replicas_of(guid))
        });
        let entry = entry.ok_or(NodeError::UnknownGuid(*guid))?;
        if replicas.iter().any(|r| &r.site == self.site()) {
            let bytes = self.dir.read_file(guid)?;
            if dataset::checksum(&bytes) != entry.checksum {
                return Err(NodeError::ChecksumMismatch(*guid));
            }
            return Ok(bytes);
        }
        let mut last = NodeError::FetchFailed(format!("no replica of {guid}"));
        for r in replicas {
            match self.peers.fetch(self.site(), &r.site, guid) {
                Ok(bytes) if dataset::checksum(&bytes) == entry.checksum => {
                    self.dir.write_file(guid, &bytes)?;
                    let rep = self.lock();
                    if !rep.state().catalogue.has_replica(guid, self.site()) {
                        let replica = Replica { guid: *guid, site: self.site().clone(), pfn: DataDir::pfn(guid) };
                        self.append_and_push(rep, vec![Payload::AddReplica(replica)])?;
                    }
                    return Ok(bytes);
                }
                Ok(_) => last = NodeError::ChecksumMismatch(*guid),
                Err(e) => last = NodeError::FetchFailed(format!("{}: {e}", r.site)),
            }
        }
        Err(last)
    }

    // ---- query ----

    pub fn validate_query(&self, q: &Query) -> Result<TypedQuery, NodeError> {
        Ok(self.with_state(|s| querylang::validate(q, &s.metastore))?)
    }

    /// Evaluates over the entities backed by files held at this site.
    pub fn local_answer(&self, q: &TypedQuery) -> LocalAnswer {
        let rep = self.lock();
        let st = rep.state();
        let scope = LocalScope::of(st, self.site());
        evaluate_scoped(q, &st.metastore, self.site(), &|j: &JoinedRow<'_>| scope.contains(j))
    }

    /// Handles an inbound sub-query document.
    pub fn answer_subquery(&self, doc: &[u8]) -> Result<LocalAnswer, QueryError> {
        let q = Query::from_document(doc)?;
        let tq = self.with_state(|s| querylang::validate(&q, &s.metastore))?;
        Ok(self.local_answer(&tq))
    }

    /// Fans a query out to `sites` (default: this site and every peer).
    pub fn query(&self, q: &Query, sites: Option<&[SiteId]>) -> Result<FederatedResult, NodeError> {
        let tq = self.validate_query(q)?;
        let timeout = Duration::from_secs(self.cfg.query_timeout_s);
        let mut plan = federation::plan(tq, self.site(), &self.cfg.peer_ids(), timeout)
            .map_err(|e| NodeError::BadConfig(e.to_string()))?;
        if let Some(sites) = sites {
            let want: BTreeSet<&SiteId> = sites.iter().collect();
            plan.targets.retain(|t| want.contains(t));
        }
        let dispatch = |t: &SiteId, doc: &[u8], timeout: Duration| -> Result<LocalAnswer, String> {
            if t == self.site() {
                self.answer_subquery(doc).map_err(|e| e.to_string())
            } else {
                self.peers.query(self.site(), t, doc, timeout)
            }
        };
        Ok(federation::execute(&plan, &dispatch))
    }

    pub fn query_text(&self, text: &str, sites: Option<&[SiteId]>) -> Result<FederatedResult, NodeError> {
        self.query(&querylang::parse(text)?, sites)
    }

    /// Where a job over the images in `rows` should run.
    pub fn transfer_decision(&self, rows: &FederatedResult, job_attached: bool) -> Result<TransferDecision, NodeError> {
        let st_lfns: Vec<Lfn> = self.with_state(|s| {
            rows.rows
                .iter()
                .filter_map(|r| r.ids.get(&Entity::Image))
                .filter_map(|id| s.metastore.get_current(Entity::Image, id, "lfn").ok().flatten())
                .filter_map(|v| v.as_str().and_then(|l| Lfn::new(l).ok()))
                .collect()
        });
        self.with_state(|s| {
            federation::decide_transfer(&st_lfns, job_attached, &s.catalogue, self.cfg.replicate_threshold_bytes)
        })
        .map_err(|e| NodeError::FetchFailed(e.to_string()))
    }

    // ---- jobs ----

    pub fn submit_job(
        &self,
        algorithm: Algorithm,
        params: serde_json::Value,
        inputs: Vec<Lfn>,
    ) -> Result<Job, NodeError> {
        if inputs.is_empty() {
            return Err(JobError::NoInputs.into());
        }
        let rep = self.lock();
        for l in &inputs {
            if rep.state().catalogue.entry(l).is_none() {
                return Err(JobError::UnknownLfn(l.clone()).into());
            }
        }
        let target = crate::jobs::choose_target(&inputs, &rep.state().catalogue)?;
        let id = JobId::random(&mut *self.rng.lock().unwrap_or_else(|p| p.into_inner()));
        let spec = JobSpec { id, algorithm, params, inputs, target, submitter: self.site().clone() };
        let ev = self.event(id, Transition::Queued { spec });
        self.append_and_push(rep, vec![Payload::JobEvent(ev)])?;
        self.job_status(&id)
    }

    pub fn job_status(&self, id: &JobId) -> Result<Job, NodeError> {
        Ok(self.with_state(|s| s.jobs.status(id))?)
    }

    pub fn jobs(&self) -> Vec<Job> {
        self.with_state(|s| s.jobs.all())
    }

    fn event(&self, job: JobId, transition: Transition) -> JobEvent {
        JobEvent { job, site: self.site().clone(), at_ms: self.now_ms(), transition }
    }

    pub fn set_fail_point(&self, fp: Option<FailPoint>) {
        *self.fail_point.lock().unwrap_or_else(|p| p.into_inner()) = fp;
    }

    // ---- sync ----

    /// Records above `after` for a pulling peer; `more` when capped.
    pub fn changes_since(&self, after: &SeqVector) -> (Vec<ChangeRecord>, bool) {
        let recs = self.lock().since(after, PULL_CAP);
        let more = recs.len() == PULL_CAP;
        (recs, more)
    }

    pub fn receive(&self, records: Vec<ChangeRecord>) -> Result<ApplyReport, NodeError> {
        Ok(self.lock().apply(records)?)
    }

    /// One anti-entropy round: pull from every peer until caught up.
    pub fn anti_entropy(&self) -> SyncReport {
        let mut report = SyncReport::default();
        for peer in self.cfg.peer_ids() {
            for _ in 0..64 {
                let after = self.vector();
                match self.peers.pull(self.site(), &peer, &after) {
                    Ok(recs) => {
                        let n = recs.len();
                        report.pulled += n;
                        if n > 0 {
                            match self.receive(recs) {
                                Ok(r) => report.applied += r.applied,
                                Err(e) => {
                                    log::warn!("anti-entropy from {peer}: {e}");
                                    break;
                                }
                            }
                        }
                        if n < PULL_CAP {
                            break;
                        }
                    }
                    Err(e) => {
                        log::debug!("anti-entropy: {peer} unreachable: {e}");
                        report.unreachable.push(peer.clone());
                        break;
                    }
                }
            }
        }
        report
    }
}

/// Entities backed by locally held image files.
struct LocalScope {
    images: BTreeSet<String>,
    studies: BTreeSet<String>,
    patients: BTreeSet<String>,
}

impl LocalScope {
    fn of(st: &FederationState, site: &SiteId) -> Self {
        let mut s = LocalScope { images: BTreeSet::new(), studies: BTreeSet::new(), patients: BTreeSet::new() };
        for (id, row) in st.metastore.scan(Entity::Image) {
            let local = row
                .get("lfn")
                .and_then(Value::as_str)
                .and_then(|l| Lfn::new(l).ok())
                .and_then(|l| st.catalogue.entry(&l))
                .is_some_and(|e| st.catalogue.has_replica(&e.guid, site));
            if !local {
                continue;
            }
            s.images.insert(id.to_string());
            if let Some(study) = row.get("study_id").and_then(Value::as_str) {
                s.studies.insert(study.to_string());
                if let Ok(Some(p)) = st.metastore.get_current(Entity::Study, study, "patient_id") {
                    if let Some(p) = p.as_str() {
                        s.patients.insert(p.to_string());
                    }
                }
            }
        }
        s
    }

    fn contains(&self, j: &JoinedRow<'_>) -> bool {
        let id = j.primary_id();
        match j.primary {
            Entity::Image => self.images.contains(id),
            Entity::Study => self.studies.contains(id),
            Entity::Patient => self.patients.contains(id),
        }
    }
}

impl ServiceProvider for Node {
    fn store(&self, mgd: &[u8]) -> Result<(), String> {
        match self.ingest_anonymized(mgd) {
            Ok(_) => Ok(()),
            Err(NodeError::DuplicateSop(_)) => Err("duplicate".into()),
            Err(e) => Err(e.to_string()),
        }
    }

    fn find(&self, query_doc: &[u8]) -> Result<Vec<Vec<u8>>, String> {
        let a = self.answer_subquery(query_doc).map_err(|e| e.to_string())?;
        Ok(a.rows.iter().map(|r| serde_json::to_vec(r).expect("row serializes")).collect())
    }

    fn get(&self, guid: &Guid) -> Result<Vec<u8>, String> {
        self.read_local(guid).map_err(|_| format!("unknown guid {guid}"))
    }
}

/// `YYYYMMDD` to ISO `YYYY-MM-DD`.
fn da_to_iso(da: &str) -> Option<String> {
    if da.len() != 8 || !da.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let iso = format!("{}-{}-{}", &da[0..4], &da[4..6], &da[6..8]);
    is_iso_date(&iso).then_some(iso)
}

/// `nnnY` age strings; other units are ignored.
fn age_years(s: &str) -> Option<i64> {
    s.strip_suffix('Y')?.parse().ok()
}
