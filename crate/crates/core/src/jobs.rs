//! Analysis jobs with data locality.
//!
//! A job's target is fixed at submission: the site holding the most input
//! replicas, ties to the smallest site id. Only the submitter emits `queued`
//! and only the target emits the later transitions, so there is nothing to
//! race for. Job state is a fold over replicated [`JobEvent`]s.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalogue::{Catalogue, Lfn};
use crate::ids::{JobId, SiteId};

pub const DEFAULT_JOB_STALL_S: u64 = 300;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JobError {
    #[error("unknown input {0}")]
    UnknownLfn(Lfn),
    #[error("unknown algorithm {0:?}")]
    UnknownAlgorithm(String),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job has no inputs")]
    NoInputs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    QcReport,
    DetectMicrocalcs,
    Standardize,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::QcReport => "qc_report",
            Algorithm::DetectMicrocalcs => "detect_microcalcs",
            Algorithm::Standardize => "standardize",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = JobError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "qc_report" => Ok(Algorithm::QcReport),
            "detect_microcalcs" => Ok(Algorithm::DetectMicrocalcs),
            "standardize" => Ok(Algorithm::Standardize),
            _ => Err(JobError::UnknownAlgorithm(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Claimed,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub id: JobId,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub params: serde_json::Value,
    pub inputs: Vec<Lfn>,
    pub target: SiteId,
    pub submitter: SiteId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transition", rename_all = "snake_case")]
pub enum Transition {
    Queued { spec: JobSpec },
    Claimed,
    Running,
    Done { outputs: Vec<Lfn> },
    Failed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobEvent {
    pub job: JobId,
    pub site: SiteId,
    pub at_ms: u64,
    pub transition: Transition,
}

/// Folded view of one job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: JobId,
    pub algorithm: Algorithm,
    pub params: serde_json::Value,
    pub inputs: Vec<Lfn>,
    pub target: SiteId,
    pub submitter: SiteId,
    pub status: JobStatus,
    pub outputs: Vec<Lfn>,
    pub reason: Option<String>,
    pub claims: usize,
    pub last_event_ms: u64,
    /// `(submitter, seq)` of the queued event; agent poll order.
    pub queued_at: (SiteId, u64),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct JobLedger {
    /// `(origin, seq, event)` sorted by `(origin, seq)`.
    events: Vec<(SiteId, u64, JobEvent)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JobBoard {
    jobs: BTreeMap<JobId, JobLedger>,
}

impl JobBoard {
    pub fn new() -> Self {
        JobBoard::default()
    }

    /// Records an event carried by change record `(origin, seq)`. Events whose
    /// emitting site differs from the record origin are dropped.
    pub fn apply(&mut self, origin: &SiteId, seq: u64, ev: JobEvent) {
        if ev.site != *origin {
            log::warn!("job event for {} claims site {} but came from {origin}", ev.job, ev.site);
            return;
        }
        let ledger = self.jobs.entry(ev.job).or_default();
        let key = (origin.clone(), seq);
        match ledger.events.binary_search_by(|(o, s, _)| (o, *s).cmp(&(&key.0, key.1))) {
            Ok(_) => {}
            Err(i) => ledger.events.insert(i, (key.0, key.1, ev)),
        }
    }

    fn fold(&self, id: &JobId) -> Option<Job> {
        let ledger = self.jobs.get(id)?;
        let (spec, q_origin, q_seq, q_at) = ledger.events.iter().find_map(|(o, s, e)| match &e.transition {
            Transition::Queued { spec } if spec.submitter == *o => Some((spec, o, *s, e.at_ms)),
            _ => None,
        })?;
        let mut job = Job {
            id: *id,
            algorithm: spec.algorithm,
            params: spec.params.clone(),
            inputs: spec.inputs.clone(),
            target: spec.target.clone(),
            submitter: spec.submitter.clone(),
            status: JobStatus::Queued,
            outputs: Vec::new(),
            reason: None,
            claims: 0,
            last_event_ms: q_at,
            queued_at: (q_origin.clone(), q_seq),
        };
        // Target events are all from one origin, so (origin, seq) order is
        // their emission order.
        for (o, _, e) in &ledger.events {
            if *o != spec.target {
                continue;
            }
            if matches!(e.transition, Transition::Queued { .. }) {
                continue;
            }
            if matches!(e.transition, Transition::Claimed) {
                job.claims += 1;
            }
            job.last_event_ms = job.last_event_ms.max(e.at_ms);
            if job.status.is_terminal() {
                continue;
            }
            match &e.transition {
                Transition::Claimed => job.status = job.status.max(JobStatus::Claimed),
                Transition::Running => job.status = JobStatus::Running,
                Transition::Done { outputs } => {
                    job.status = JobStatus::Done;
                    job.outputs = outputs.clone();
                }
                Transition::Failed { reason } => {
                    job.status = JobStatus::Failed;
                    job.reason = Some(reason.clone());
                }
                Transition::Queued { .. } => {}
            }
        }
        Some(job)
    }

    pub fn status(&self, id: &JobId) -> Result<Job, JobError> {
        self.fold(id).ok_or(JobError::UnknownJob(*id))
    }

    pub fn all(&self) -> Vec<Job> {
        self.jobs.keys().filter_map(|id| self.fold(id)).collect()
    }

    /// Queued jobs targeted at `site`, oldest `(submitter, seq)` first.
    pub fn queued_for(&self, site: &SiteId) -> Vec<Job> {
        let mut v: Vec<Job> = self
            .all()
            .into_iter()
            .filter(|j| j.target == *site && j.status == JobStatus::Queued)
            .collect();
        v.sort_by(|a, b| a.queued_at.cmp(&b.queued_at));
        v
    }

    /// Claimed or running jobs targeted at `site`.
    pub fn in_progress_for(&self, site: &SiteId) -> Vec<Job> {
        let mut v: Vec<Job> = self
            .all()
            .into_iter()
            .filter(|j| j.target == *site && matches!(j.status, JobStatus::Claimed | JobStatus::Running))
            .collect();
        v.sort_by(|a, b| a.queued_at.cmp(&b.queued_at));
        v
    }
}

/// Site holding the largest number of input replicas; ties to the smallest id.
pub fn choose_target(inputs: &[Lfn], catalogue: &Catalogue) -> Result<SiteId, JobError> {
    if inputs.is_empty() {
        return Err(JobError::NoInputs);
    }
    let mut counts: BTreeMap<SiteId, usize> = BTreeMap::new();
    for lfn in inputs {
        let (_, replicas) = catalogue.resolve(lfn).map_err(|_| JobError::UnknownLfn(lfn.clone()))?;
        for r in replicas {
            *counts.entry(r.site).or_default() += 1;
        }
    }
    let best = counts.values().copied().max().unwrap_or(0);
    counts
        .into_iter()
        .find(|(_, c)| *c == best)
        .map(|(s, _)| s)
        .ok_or_else(|| JobError::UnknownLfn(inputs[0].clone()))
}
