//! Scripted simulation runs. A scenario has two optional phases: an ingest
//! storm (timed ingests with partitions and crashes, then a convergence
//! check) followed by a step script.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::phantom::{generate_phantom, PhantomIdentity, PhantomSpec};
use super::{Partition, SimError, SimNet, SimOptions, TICK_MS};
use crate::catalogue::Lfn;
use crate::ids::SiteId;
use crate::jobs::{Algorithm, JobStatus};
use crate::sync::SeqVector;

pub const CONVERGENCE_BOUND_S: u64 = 60;

fn d_window() -> u64 {
    20
}
fn d_settle() -> u64 {
    CONVERGENCE_BOUND_S
}
fn d_phantom() -> PhantomSpec {
    PhantomSpec { rows: 64, cols: 64, ..PhantomSpec::default() }
}
fn d_within() -> u64 {
    CONVERGENCE_BOUND_S
}
fn d_job_within() -> u64 {
    120
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub start_s: u64,
    pub duration_s: u64,
    pub side: Vec<SiteId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KillSpec {
    pub site: SiteId,
    pub at_s: u64,
    pub restart_s: u64,
}

/// One scripted action or assertion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Step {
    Ingest {
        site: SiteId,
        seed: u64,
        #[serde(default)]
        phantom: Option<PhantomSpec>,
    },
    Query {
        site: SiteId,
        text: String,
        #[serde(default)]
        sites: Option<Vec<SiteId>>,
        #[serde(default)]
        expect_rows: Option<usize>,
        #[serde(default)]
        expect_partial: Option<bool>,
    },
    /// Cuts every link between `side` and the rest until `heal`.
    Partition { side: Vec<SiteId> },
    Heal,
    Kill { site: SiteId },
    Restart { site: SiteId },
    Run { seconds: u64 },
    /// Flips a ciphertext bit in every file transfer reply while on.
    Tamper { on: bool },
    SubmitJob {
        site: SiteId,
        algorithm: Algorithm,
        #[serde(default)]
        params: serde_json::Value,
        /// Defaults to every file ingested by earlier steps.
        #[serde(default)]
        inputs: Option<Vec<Lfn>>,
        #[serde(default)]
        expect: Option<JobStatus>,
        #[serde(default = "d_job_within")]
        within_s: u64,
    },
    WaitConverged {
        #[serde(default = "d_within")]
        within_s: u64,
    },
    /// Every acknowledged ingest resolves at every live site.
    AssertResolvable,
}

impl Step {
    fn name(&self) -> &'static str {
        match self {
            Step::Ingest { .. } => "ingest",
            Step::Query { .. } => "query",
            Step::Partition { .. } => "partition",
            Step::Heal => "heal",
            Step::Kill { .. } => "kill",
            Step::Restart { .. } => "restart",
            Step::Run { .. } => "run",
            Step::Tamper { .. } => "tamper",
            Step::SubmitJob { .. } => "submit_job",
            Step::WaitConverged { .. } => "wait_converged",
            Step::AssertResolvable => "assert_resolvable",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub sim: SimOptions,
    /// Storm: number of phantom ingests, spread round-robin over the sites.
    #[serde(default)]
    pub ingests: usize,
    /// Template for storm phantoms; the seed is replaced per ingest.
    #[serde(default = "d_phantom")]
    pub phantom: PhantomSpec,
    /// Storm ingests are spaced evenly over `[0, ingest_window_s)`.
    #[serde(default = "d_window")]
    pub ingest_window_s: u64,
    #[serde(default)]
    pub partitions: Vec<PartitionSpec>,
    #[serde(default)]
    pub kills: Vec<KillSpec>,
    /// Convergence budget after the last storm disturbance.
    #[serde(default = "d_settle")]
    pub settle_s: u64,
    #[serde(default)]
    pub steps: Vec<Step>,
}

impl Default for Scenario {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl Scenario {
    fn has_storm(&self) -> bool {
        self.ingests > 0 || !self.partitions.is_empty() || !self.kills.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteReport {
    pub vector: SeqVector,
    pub files: usize,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub index: usize,
    pub op: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub acknowledged: usize,
    pub refused: usize,
    /// Acknowledged ingests missing from some live site at the end.
    pub lost: Vec<Lfn>,
    /// Storm convergence; `None` when the scenario has no storm.
    pub converged: Option<bool>,
    pub converged_at_ms: Option<u64>,
    /// Virtual time of the last storm ingest, partition heal or restart.
    pub quiet_from_ms: u64,
    pub convergence_delay_ms: Option<u64>,
    pub steps: Vec<StepOutcome>,
    pub delivered: u64,
    pub dropped: u64,
    pub bytes_transferred: u64,
    pub end_ms: u64,
    pub sites: BTreeMap<SiteId, SiteReport>,
}

impl ScenarioReport {
    /// Storm converged within `budget_ms` with nothing lost, and every step
    /// passed.
    pub fn ok(&self, budget_ms: u64) -> bool {
        let storm = match self.converged {
            None => true,
            Some(c) => c && self.convergence_delay_ms.is_some_and(|d| d <= budget_ms),
        };
        storm && self.lost.is_empty() && self.steps.iter().all(|s| s.ok)
    }
}

enum Event {
    Ingest(usize),
    Kill(SiteId),
    Restart(SiteId),
}

struct Runner<'a> {
    sc: &'a Scenario,
    net: Arc<SimNet>,
    acknowledged: Vec<Lfn>,
    step_ingests: Vec<Lfn>,
    refused: usize,
}

/// Runs a scenario on a fresh network; the network is returned for further
/// inspection.
pub fn run(sc: &Scenario) -> Result<(Arc<SimNet>, ScenarioReport), SimError> {
    let net = SimNet::new(sc.sim.clone())?;
    let mut r = Runner { sc, net: net.clone(), acknowledged: Vec::new(), step_ingests: Vec::new(), refused: 0 };
    let (converged_at, quiet) = if sc.has_storm() { r.storm()? } else { (None, 0) };
    let mut steps = Vec::new();
    for (index, step) in sc.steps.iter().enumerate() {
        let (ok, detail) = match r.step(step) {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        steps.push(StepOutcome { index, op: step.name().into(), ok, detail });
    }
    let (delivered, dropped) = net.traffic();
    let mut lost = Vec::new();
    let mut sites = BTreeMap::new();
    for s in net.sites() {
        let Some(node) = net.node(&s) else { continue };
        for l in &r.acknowledged {
            if node.resolve(l).is_err() && !lost.contains(l) {
                lost.push(l.clone());
            }
        }
        let report = SiteReport {
            vector: node.vector(),
            files: node.with_state(|st| st.catalogue.len()),
            digest: crate::dataset::checksum(&node.canonical_bytes()).to_hex(),
        };
        sites.insert(s, report);
    }
    let report = ScenarioReport {
        name: sc.name.clone(),
        seed: sc.sim.seed,
        acknowledged: r.acknowledged.len(),
        refused: r.refused,
        lost,
        converged: sc.has_storm().then_some(converged_at.is_some()),
        converged_at_ms: converged_at,
        quiet_from_ms: quiet,
        convergence_delay_ms: converged_at.map(|t| t.saturating_sub(quiet)),
        steps,
        delivered,
        dropped,
        bytes_transferred: net.bytes_captured(),
        end_ms: net.now_ms(),
        sites,
    };
    Ok((net, report))
}

impl Runner<'_> {
    fn ingest(&mut self, site: &SiteId, spec: &PhantomSpec) -> Result<Lfn, String> {
        let id = PhantomIdentity::synthetic(spec.seed);
        let (bytes, _) = generate_phantom(spec, &id).map_err(|e| e.to_string())?;
        let node = self.net.node(site).ok_or_else(|| format!("{site} is down"))?;
        match node.ingest(&bytes, None) {
            Ok(r) => {
                self.acknowledged.push(r.lfn.clone());
                Ok(r.lfn)
            }
            Err(e) => {
                self.refused += 1;
                Err(e.to_string())
            }
        }
    }

    fn storm(&mut self) -> Result<(Option<u64>, u64), SimError> {
        let sc = self.sc;
        let net = self.net.clone();
        let sites = net.sites();
        let mut events: Vec<(u64, u64, Event)> = Vec::new();
        let mut order = 0u64;
        let mut push = |t: u64, e: Event| {
            // Snap to the tick grid so events run before that tick.
            events.push((t / TICK_MS * TICK_MS, order, e));
            order += 1;
        };
        let window_ms = sc.ingest_window_s * 1000;
        let n = sc.ingests as u64;
        for i in 0..sc.ingests {
            push(window_ms * i as u64 / n, Event::Ingest(i));
        }
        let mut quiet = if n > 0 { window_ms * (n - 1) / n } else { 0 };
        for p in &sc.partitions {
            let (start, end) = (p.start_s * 1000, (p.start_s + p.duration_s) * 1000);
            net.add_partition(Partition { start_ms: start, end_ms: end, side: p.side.iter().cloned().collect() });
            quiet = quiet.max(end);
        }
        for k in &sc.kills {
            if k.restart_s < k.at_s {
                return Err(SimError::Bad(format!("{} restarts before it is killed", k.site)));
            }
            push(k.at_s * 1000, Event::Kill(k.site.clone()));
            push(k.restart_s * 1000, Event::Restart(k.site.clone()));
            quiet = quiet.max(k.restart_s * 1000);
        }
        events.sort_by_key(|(t, o, _)| (*t, *o));
        for (t, _, ev) in events {
            net.run_until(t);
            match ev {
                Event::Ingest(i) => {
                    let seed = sc.sim.seed.wrapping_mul(100_000).wrapping_add(i as u64);
                    let spec = PhantomSpec { seed, ..sc.phantom.clone() };
                    if let Err(e) = self.ingest(&sites[i % sites.len()], &spec) {
                        log::info!("storm ingest {i} refused: {e}");
                    }
                }
                Event::Kill(s) => net.kill(&s)?,
                Event::Restart(s) => {
                    net.restart(&s)?;
                }
            }
        }
        net.run_until(quiet);
        Ok((net.wait_converged(quiet + sc.settle_s * 1000), quiet))
    }

    fn step(&mut self, step: &Step) -> Result<String, String> {
        let net = self.net.clone();
        let node = |s: &SiteId| net.node(s).ok_or_else(|| format!("{s} is down"));
        match step {
            Step::Ingest { site, seed, phantom } => {
                let spec = PhantomSpec { seed: *seed, ..phantom.clone().unwrap_or_else(d_phantom) };
                let lfn = self.ingest(site, &spec)?;
                self.step_ingests.push(lfn.clone());
                Ok(lfn.to_string())
            }
            Step::Query { site, text, sites, expect_rows, expect_partial } => {
                let res = node(site)?.query_text(text, sites.as_deref()).map_err(|e| e.to_string())?;
                let detail = format!("{} rows, failed {:?}", res.rows.len(), res.failed);
                if expect_rows.is_some_and(|n| n != res.rows.len()) {
                    return Err(format!("expected {} rows; {detail}", expect_rows.unwrap_or_default()));
                }
                if expect_partial.is_some_and(|p| p != res.is_partial()) {
                    return Err(format!("partial result expectation not met; {detail}"));
                }
                Ok(detail)
            }
            Step::Partition { side } => {
                net.add_partition(Partition {
                    start_ms: net.now_ms(),
                    end_ms: u64::MAX,
                    side: side.iter().cloned().collect(),
                });
                Ok(String::new())
            }
            Step::Heal => {
                net.heal();
                Ok(String::new())
            }
            Step::Kill { site } => net.kill(site).map(|_| String::new()).map_err(|e| e.to_string()),
            Step::Restart { site } => net.restart(site).map(|_| String::new()).map_err(|e| e.to_string()),
            Step::Run { seconds } => {
                net.run_for(seconds * 1000);
                Ok(format!("t = {} ms", net.now_ms()))
            }
            Step::Tamper { on } => {
                net.set_tamper_dimse(*on);
                Ok(String::new())
            }
            Step::SubmitJob { site, algorithm, params, inputs, expect, within_s } => {
                let inputs = inputs.clone().unwrap_or_else(|| self.step_ingests.clone());
                let job = node(site)?.submit_job(*algorithm, params.clone(), inputs).map_err(|e| e.to_string())?;
                let deadline = net.now_ms() + within_s * 1000;
                loop {
                    let status = node(site).ok().and_then(|n| n.job_status(&job.id).ok());
                    if let Some(j) = status.filter(|j| j.status.is_terminal()) {
                        let detail = format!("job {} {:?} at {} claims {}", j.id, j.status, j.target, j.claims);
                        return match expect {
                            Some(e) if *e != j.status => Err(detail),
                            _ => Ok(detail),
                        };
                    }
                    if net.now_ms() >= deadline {
                        return Err(format!("job {} not terminal within {within_s} s", job.id));
                    }
                    net.step();
                }
            }
            Step::WaitConverged { within_s } => match net.wait_converged(net.now_ms() + within_s * 1000) {
                Some(t) => Ok(format!("converged at {t} ms")),
                None => Err(format!("not converged within {within_s} s")),
            },
            Step::AssertResolvable => {
                for s in net.sites() {
                    let Some(n) = net.node(&s) else { continue };
                    for l in &self.acknowledged {
                        n.resolve(l).map_err(|e| format!("{s}: {e}"))?;
                    }
                }
                Ok(format!("{} files resolvable", self.acknowledged.len()))
            }
        }
    }
}
