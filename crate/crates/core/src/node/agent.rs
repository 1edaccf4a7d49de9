//! The job agent: claims jobs targeted at this site and runs them.

use serde::{Deserialize, Serialize};

use super::{DataDir, Node, NodeError};
use crate::analysis::{self, Image, McParams};
use crate::catalogue::{FileEntry, Lfn};
use crate::dataset::{self, tags, Dataset, Element};
use crate::ids::Guid;
use crate::jobs::{Algorithm, Job, JobStatus, Transition};
use crate::metastore::{Entity, Value};
use crate::sync::Payload;

/// Fault injection for crash tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailPoint {
    /// Stop dead right after the claim is logged.
    AfterClaim,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentReport {
    pub done: usize,
    pub failed: usize,
    /// A fail point fired; the caller should treat the node as dead.
    pub crashed: bool,
}

type MetaWrite = (Entity, String, &'static str, Value);

struct Output {
    writes: Vec<MetaWrite>,
    files: Vec<(Lfn, Vec<u8>)>,
    outputs: Vec<Lfn>,
}

struct Input {
    lfn: Lfn,
    image_id: String,
    ds: Dataset,
}

impl Node {
    /// One poll: queued jobs first, then in-progress jobs left over from
    /// before the node was opened or whose last event is older than
    /// `job_stall_s`.
    pub fn agent_tick(&self) -> AgentReport {
        let mut report = AgentReport::default();
        let now = self.now_ms();
        let stall_ms = self.cfg.job_stall_s * 1000;
        let orphaned = std::mem::take(&mut *self.orphaned.lock().unwrap_or_else(|p| p.into_inner()));
        let (queued, stalled) = self.with_state(|s| {
            let stalled: Vec<Job> = s
                .jobs
                .in_progress_for(self.site())
                .into_iter()
                .filter(|j| orphaned.contains(&j.id) || now.saturating_sub(j.last_event_ms) >= stall_ms)
                .collect();
            (s.jobs.queued_for(self.site()), stalled)
        });
        for job in queued.into_iter().chain(stalled) {
            match self.run_job(&job) {
                Ok(Some(JobStatus::Done)) => report.done += 1,
                Ok(Some(_)) => report.failed += 1,
                Ok(None) => {
                    report.crashed = true;
                    return report;
                }
                Err(e) => {
                    log::error!("job {}: {e}", job.id);
                    report.failed += 1;
                }
            }
        }
        report
    }

    /// Runs one job to a terminal state. `None` when a fail point fired.
    fn run_job(&self, job: &Job) -> Result<Option<JobStatus>, NodeError> {
        let mut events = Vec::new();
        if job.status == JobStatus::Queued {
            events.push(Payload::JobEvent(self.event(job.id, Transition::Claimed)));
            let rep = self.lock();
            self.append_and_push(rep, std::mem::take(&mut events))?;
            if *self.fail_point.lock().unwrap_or_else(|p| p.into_inner()) == Some(FailPoint::AfterClaim) {
                return Ok(None);
            }
        } else {
            log::warn!("job {} stalled in {:?}; re-running", job.id, job.status);
        }
        let rep = self.lock();
        self.append_and_push(rep, vec![Payload::JobEvent(self.event(job.id, Transition::Running))])?;

        let result = self.execute(job);
        let rep = self.lock();
        let (payloads, status) = match result {
            Ok(out) => {
                let mut payloads = Vec::new();
                let st = rep.state();
                let mut seq = rep.vector().get(self.site());
                for (lfn, bytes) in &out.files {
                    if st.catalogue.entry(lfn).is_some() {
                        continue;
                    }
                    let guid = Guid::random(&mut *self.rng.lock().unwrap_or_else(|p| p.into_inner()));
                    self.dir.write_file(&guid, bytes)?;
                    seq += 1;
                    let entry = FileEntry {
                        lfn: lfn.clone(),
                        guid,
                        size: bytes.len() as u64,
                        checksum: dataset::checksum(bytes),
                        created_site: self.site().clone(),
                        created_seq: seq,
                    };
                    payloads.push(Payload::AddFile { entry, pfn: DataDir::pfn(&guid) });
                }
                payloads.extend(self.meta_payloads(st, out.writes, false));
                payloads.push(Payload::JobEvent(self.event(job.id, Transition::Done { outputs: out.outputs })));
                (payloads, JobStatus::Done)
            }
            Err(reason) => {
                log::warn!("job {} failed: {reason}", job.id);
                (vec![Payload::JobEvent(self.event(job.id, Transition::Failed { reason }))], JobStatus::Failed)
            }
        };
        self.append_and_push(rep, payloads)?;
        Ok(Some(status))
    }

    fn load_inputs(&self, job: &Job) -> Result<Vec<Input>, String> {
        job.inputs
            .iter()
            .map(|lfn| {
                let entry = self.with_state(|s| s.catalogue.entry(lfn).cloned()).ok_or(format!("unknown lfn {lfn}"))?;
                let bytes = self.fetch(&entry.guid).map_err(|e| format!("{lfn}: {e}"))?;
                let ds = dataset::decode(&bytes).map_err(|e| format!("{lfn}: {e}"))?;
                let image_id =
                    ds.str(tags::SOP_INSTANCE_UID).ok_or(format!("{lfn}: missing SOPInstanceUID"))?.to_string();
                Ok(Input { lfn: lfn.clone(), image_id, ds })
            })
            .collect()
    }

    fn execute(&self, job: &Job) -> Result<Output, String> {
        let inputs = self.load_inputs(job)?;
        let params = match job.algorithm {
            Algorithm::DetectMicrocalcs => mc_params(&job.params)?,
            _ => McParams::default(),
        };
        let study_ids: Vec<Option<Value>> = self.with_state(|s| {
            inputs
                .iter()
                .map(|i| s.metastore.get_current(Entity::Image, &i.image_id, "study_id").ok().flatten().cloned())
                .collect()
        });
        let workers = self.cfg.analysis_workers.max(1);
        let chunk = inputs.len().div_ceil(workers).max(1);
        let per_input: Vec<Result<Output, String>> = std::thread::scope(|s| {
            let handles: Vec<_> = inputs
                .chunks(chunk)
                .zip(study_ids.chunks(chunk))
                .map(|(ins, studies)| {
                    s.spawn(move || {
                        ins.iter()
                            .zip(studies)
                            .map(|(i, study)| run_one(job, &params, i, study.clone()))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().unwrap_or_else(|_| vec![Err("worker panicked".into())])).collect()
        });
        let mut out = Output { writes: Vec::new(), files: Vec::new(), outputs: Vec::new() };
        for r in per_input {
            let o = r?;
            out.writes.extend(o.writes);
            out.files.extend(o.files);
            out.outputs.extend(o.outputs);
        }
        Ok(out)
    }
}

fn mc_params(v: &serde_json::Value) -> Result<McParams, String> {
    let mut p = McParams::default();
    if v.is_null() {
        return Ok(p);
    }
    let obj = v.as_object().ok_or("params must be an object")?;
    if let Some(r) = obj.get("r") {
        p.r = r.as_u64().ok_or("r must be a non-negative integer")? as usize;
    }
    if let Some(k) = obj.get("k") {
        p.k = k.as_f64().ok_or("k must be a number")?;
    }
    if let Some(a) = obj.get("area_min") {
        p.area_min = a.as_u64().ok_or("area_min must be a non-negative integer")? as usize;
    }
    if let Some(a) = obj.get("area_max") {
        p.area_max = a.as_u64().ok_or("area_max must be a non-negative integer")? as usize;
    }
    Ok(p)
}

fn run_one(job: &Job, params: &McParams, input: &Input, study: Option<Value>) -> Result<Output, String> {
    let lfn = &input.lfn;
    let img = Image::from_dataset(&input.ds).map_err(|e| format!("{lfn}: {e}"))?;
    let id = input.image_id.clone();
    let mut out = Output { writes: Vec::new(), files: Vec::new(), outputs: Vec::new() };
    match job.algorithm {
        Algorithm::QcReport => {
            let (qc, _) = analysis::qc_report(&img);
            if let Some(w) = qc.warning {
                return Err(format!("{lfn}: {w}"));
            }
            out.writes = vec![
                (Entity::Image, id.clone(), "mean_brightness", Value::Float(qc.mean_brightness)),
                (Entity::Image, id.clone(), "rms_contrast", Value::Float(qc.rms_contrast)),
                (Entity::Image, id.clone(), "breast_density", Value::Float(qc.breast_density)),
                (Entity::Image, id, "microcalc_count", Value::Int(qc.microcalc_count as i64)),
            ];
            out.outputs.push(lfn.clone());
        }
        Algorithm::DetectMicrocalcs => {
            let mask = analysis::segment_breast(&img).map_err(|e| format!("{lfn}: {e}"))?;
            let det = analysis::detect_microcalcs(&img, &mask, params);
            let locs = serde_json::to_string(&det.centroids).expect("centroids serialize");
            out.writes = vec![
                (Entity::Image, id.clone(), "microcalc_count", Value::Int(det.count as i64)),
                (Entity::Image, id, "microcalc_locations", Value::String(locs)),
            ];
            out.outputs.push(lfn.clone());
        }
        Algorithm::Standardize => {
            let mask = analysis::segment_breast(&img).map_err(|e| format!("{lfn}: {e}"))?;
            let std_img = analysis::standardize(&img, &mask).map_err(|e| format!("{lfn}: {e}"))?;
            let suffix = u32::from_le_bytes(job.id.0[..4].try_into().expect("4 bytes"));
            let derived_id = format!("{id}.9.{suffix}");
            let mut ds = input.ds.clone();
            std_img.write_into(&mut ds);
            for t in [tags::MEAN_BRIGHTNESS, tags::RMS_CONTRAST, tags::BREAST_DENSITY, tags::MICROCALC_COUNT] {
                ds.remove(t);
            }
            let elem = Element::text(tags::SOP_INSTANCE_UID, &derived_id).map_err(|e| e.to_string())?;
            ds.put(elem);
            let bytes = dataset::encode(&ds).map_err(|e| e.to_string())?;
            let out_lfn = Lfn::new(format!("/derived/{}/{}.mgd", job.id, derived_id)).map_err(|e| e.to_string())?;
            out.writes = vec![
                (Entity::Image, derived_id.clone(), "lfn", Value::String(out_lfn.to_string())),
                (Entity::Image, derived_id.clone(), "standardized", Value::String("true".into())),
                (Entity::Image, derived_id.clone(), "source_lfn", Value::String(lfn.to_string())),
            ];
            if let Some(study) = study {
                out.writes.push((Entity::Image, derived_id, "study_id", study));
            }
            out.files.push((out_lfn.clone(), bytes));
            out.outputs.push(out_lfn);
        }
    }
    Ok(out)
}
