//! Deterministic in-process federation: real [`Node`]s on a virtual clock,
//! connected by a lossy, partitionable network.
//!
//! Only replication traffic (push and pull) is subject to random drops.
//! Partitions and dead nodes block every kind of traffic.

pub mod phantom;
pub mod scenario;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, Weak};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{Guid, SiteId};
use crate::node::{Clock, Node, NodeConfig, NodeError, OpenOptions, PeerConfig, PeerTransport, SimClock};
use crate::querylang::LocalAnswer;
use crate::sync::{ChangeRecord, SeqVector};
use crate::transfer::{associate, Direction, Loopback, PduType, ServerSession, WireTap};

pub const TICK_MS: u64 = 100;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown site {0}")]
    UnknownSite(SiteId),
    #[error("bad simulation: {0}")]
    Bad(String),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn d_sites() -> Vec<SiteId> {
    ["site-a", "site-b", "site-c", "site-d"].iter().map(|s| SiteId::new(*s).expect("valid id")).collect()
}
fn d_latency() -> (u64, u64) {
    (20, 200)
}
fn d_sync() -> u64 {
    5
}
fn d_stall() -> u64 {
    60
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    #[serde(default = "d_sites")]
    pub sites: Vec<SiteId>,
    #[serde(default)]
    pub seed: u64,
    /// Per-message loss on replication traffic.
    #[serde(default)]
    pub drop_probability: f64,
    /// One-way latency bounds in ms, drawn uniformly.
    #[serde(default = "d_latency")]
    pub latency_ms: (u64, u64),
    #[serde(default = "d_sync")]
    pub sync_interval_s: u64,
    #[serde(default = "d_stall")]
    pub job_stall_s: u64,
    #[serde(default = "d_true")]
    pub capture: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            sites: d_sites(),
            seed: 0,
            drop_probability: 0.0,
            latency_ms: d_latency(),
            sync_interval_s: d_sync(),
            job_stall_s: d_stall(),
            capture: true,
        }
    }
}

/// Partition window: links crossing the boundary of `side` are down during
/// `[start_ms, end_ms)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub start_ms: u64,
    pub end_ms: u64,
    pub side: BTreeSet<SiteId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Sync,
    Query,
    Dimse,
}

/// Bytes observed on a link.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capture {
    pub at_ms: u64,
    pub from: SiteId,
    pub to: SiteId,
    pub channel: Channel,
    pub bytes: Vec<u8>,
}

struct InFlight {
    from: SiteId,
    to: SiteId,
    records: Vec<ChangeRecord>,
}

struct Slot {
    node: Option<Arc<Node>>,
    dir: PathBuf,
    incarnation: u64,
    next_sync_ms: u64,
}

#[derive(Default)]
struct NetState {
    slots: BTreeMap<SiteId, Slot>,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    in_flight: BTreeMap<u64, InFlight>,
    next_msg: u64,
    partitions: Vec<Partition>,
    captures: Vec<Capture>,
    tamper_dimse: bool,
    dropped: u64,
    delivered: u64,
}

pub struct SimNet {
    opts: SimOptions,
    clock: SimClock,
    key: [u8; 32],
    state: Mutex<NetState>,
    rng: Mutex<ChaCha8Rng>,
    me: Weak<SimNet>,
    _tmp: Option<tempfile::TempDir>,
}

impl SimNet {
    /// A federation in a fresh temporary directory.
    pub fn new(opts: SimOptions) -> Result<Arc<SimNet>, SimError> {
        let tmp = tempfile::tempdir()?;
        let root = tmp.path().to_path_buf();
        Self::build(opts, &root, Some(tmp))
    }

    /// A federation under `root`, which must be empty or absent.
    pub fn new_in(opts: SimOptions, root: &Path) -> Result<Arc<SimNet>, SimError> {
        Self::build(opts, root, None)
    }

    fn build(opts: SimOptions, root: &Path, tmp: Option<tempfile::TempDir>) -> Result<Arc<SimNet>, SimError> {
        if !(2..=16).contains(&opts.sites.len()) {
            return Err(SimError::Bad("a simulation needs 2 to 16 sites".into()));
        }
        if opts.sites.iter().collect::<BTreeSet<_>>().len() != opts.sites.len() {
            return Err(SimError::Bad("duplicate site".into()));
        }
        if !(0.0..1.0).contains(&opts.drop_probability) {
            return Err(SimError::Bad("drop_probability must be in [0, 1)".into()));
        }
        if opts.latency_ms.0 > opts.latency_ms.1 {
            return Err(SimError::Bad("latency bounds reversed".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut key = [0u8; 32];
        rng.fill(&mut key);
        key[0] |= 1;
        let mut slots = BTreeMap::new();
        for (i, site) in opts.sites.iter().enumerate() {
            let mut cfg = NodeConfig::new(site.clone(), key);
            cfg.sync_interval_s = opts.sync_interval_s;
            cfg.job_stall_s = opts.job_stall_s;
            cfg.peers = opts
                .sites
                .iter()
                .filter(|p| *p != site)
                .map(|p| PeerConfig { site_id: p.clone(), dimse: "sim".into(), http: "sim".into(), ae_title: None })
                .collect();
            let dir = root.join(site.as_str());
            Node::init(&dir, cfg)?;
            // Stagger anti-entropy rounds across sites.
            let next_sync_ms = opts.sync_interval_s * 1000 * (i as u64 + 1) / opts.sites.len() as u64;
            slots.insert(site.clone(), Slot { node: None, dir, incarnation: 0, next_sync_ms });
        }
        let net = Arc::new_cyclic(|me| SimNet {
            clock: SimClock::new(),
            key,
            state: Mutex::new(NetState { slots, ..NetState::default() }),
            rng: Mutex::new(rng),
            me: me.clone(),
            opts,
            _tmp: tmp,
        });
        for site in net.opts.sites.clone() {
            net.restart(&site)?;
        }
        Ok(net)
    }

    fn st(&self) -> MutexGuard<'_, NetState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn rng(&self) -> MutexGuard<'_, ChaCha8Rng> {
        self.rng.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn options(&self) -> &SimOptions {
        &self.opts
    }

    pub fn federation_key(&self) -> [u8; 32] {
        self.key
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn sites(&self) -> Vec<SiteId> {
        self.opts.sites.clone()
    }

    /// The live node at `site`, if it is up.
    pub fn node(&self, site: &SiteId) -> Option<Arc<Node>> {
        self.st().slots.get(site).and_then(|s| s.node.clone())
    }

    pub fn data_dir(&self, site: &SiteId) -> Option<PathBuf> {
        self.st().slots.get(site).map(|s| s.dir.clone())
    }

    pub fn add_partition(&self, p: Partition) {
        self.st().partitions.push(p);
    }

    /// Ends every partition still in force.
    pub fn heal(&self) {
        let now = self.now_ms();
        for p in self.st().partitions.iter_mut() {
            if p.end_ms > now {
                p.end_ms = now.max(p.start_ms);
            }
        }
    }

    /// Flip one ciphertext bit in every DIMSE data PDU sent back to clients.
    pub fn set_tamper_dimse(&self, on: bool) {
        self.st().tamper_dimse = on;
    }

    pub fn captures(&self) -> Vec<Capture> {
        self.st().captures.clone()
    }

    /// Total bytes seen on every link.
    pub fn bytes_captured(&self) -> u64 {
        self.st().captures.iter().map(|c| c.bytes.len() as u64).sum()
    }

    /// `(delivered, dropped)` replication messages.
    pub fn traffic(&self) -> (u64, u64) {
        let s = self.st();
        (s.delivered, s.dropped)
    }

    /// Crash: the node vanishes without any shutdown work.
    pub fn kill(&self, site: &SiteId) -> Result<(), SimError> {
        let mut st = self.st();
        let slot = st.slots.get_mut(site).ok_or_else(|| SimError::UnknownSite(site.clone()))?;
        slot.node = None;
        Ok(())
    }

    pub fn restart(&self, site: &SiteId) -> Result<Arc<Node>, SimError> {
        let (dir, incarnation) = {
            let mut st = self.st();
            let slot = st.slots.get_mut(site).ok_or_else(|| SimError::UnknownSite(site.clone()))?;
            slot.node = None;
            slot.incarnation += 1;
            (slot.dir.clone(), slot.incarnation)
        };
        let idx = self.opts.sites.iter().position(|s| s == site).unwrap_or(0) as u64;
        let seed = self.opts.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (idx << 32) ^ incarnation;
        let opts = OpenOptions { durable: false, truncate_log: false, seed: Some(seed) };
        let peers: Arc<dyn PeerTransport> = Arc::new(SimPeers { net: self.me.clone() });
        let node = Arc::new(Node::open(&dir, &opts, peers, Arc::new(self.clock.clone()))?);
        self.st().slots.get_mut(site).expect("slot exists").node = Some(node.clone());
        Ok(node)
    }

    fn link_up(&self, st: &NetState, a: &SiteId, b: &SiteId, at: u64) -> bool {
        let alive = |s: &SiteId| st.slots.get(s).is_some_and(|x| x.node.is_some());
        alive(a)
            && alive(b)
            && !st
                .partitions
                .iter()
                .any(|p| (p.start_ms..p.end_ms).contains(&at) && (p.side.contains(a) != p.side.contains(b)))
    }

    fn capture(&self, st: &mut NetState, from: &SiteId, to: &SiteId, channel: Channel, bytes: Vec<u8>) {
        if self.opts.capture {
            st.captures.push(Capture { at_ms: self.now_ms(), from: from.clone(), to: to.clone(), channel, bytes });
        }
    }

    fn dropped(&self) -> bool {
        self.opts.drop_probability > 0.0 && self.rng().gen_bool(self.opts.drop_probability)
    }

    /// Advances one tick: deliveries due, then anti-entropy and agents.
    pub fn step(&self) {
        self.clock.advance(TICK_MS);
        let now = self.now_ms();
        loop {
            let msg = {
                let mut st = self.st();
                match st.queue.peek() {
                    Some(Reverse((at, _))) if *at <= now => {
                        let Reverse((_, id)) = st.queue.pop().expect("peeked");
                        let m = st.in_flight.remove(&id).expect("queued message");
                        let target = if self.link_up(&st, &m.from, &m.to, now) {
                            st.delivered += 1;
                            st.slots.get(&m.to).and_then(|s| s.node.clone())
                        } else {
                            st.dropped += 1;
                            None
                        };
                        Some((m, target))
                    }
                    _ => None,
                }
            };
            let Some((m, target)) = msg else { break };
            if let Some(node) = target {
                if let Err(e) = node.receive(m.records) {
                    log::debug!("{} rejected push from {}: {e}", m.to, m.from);
                }
            }
        }
        for site in self.sites() {
            let (node, sync_due) = {
                let mut st = self.st();
                let slot = st.slots.get_mut(&site).expect("slot exists");
                let due = now >= slot.next_sync_ms;
                if due {
                    slot.next_sync_ms += self.opts.sync_interval_s * 1000;
                }
                (slot.node.clone(), due)
            };
            let Some(node) = node else { continue };
            if sync_due {
                node.anti_entropy();
            }
            if now % 1000 == 0 && node.agent_tick().crashed {
                log::info!("{site} crashed at a fail point");
                let _ = self.kill(&site);
            }
        }
    }

    pub fn run_for(&self, ms: u64) {
        let end = self.now_ms() + ms;
        self.run_until(end);
    }

    pub fn run_until(&self, t_ms: u64) {
        while self.now_ms() < t_ms {
            self.step();
        }
    }

    /// Every site is up and holds the same vector and canonical state.
    pub fn converged(&self) -> bool {
        let nodes: Vec<Arc<Node>> = self.sites().iter().filter_map(|s| self.node(s)).collect();
        if nodes.len() != self.opts.sites.len() {
            return false;
        }
        let v0 = nodes[0].vector();
        let c0 = nodes[0].canonical_bytes();
        nodes[1..].iter().all(|n| n.vector() == v0 && n.canonical_bytes() == c0)
    }

    /// Runs until converged for two consecutive ticks; returns the virtual
    /// time of the first of them, or `None` past `deadline_ms`.
    pub fn wait_converged(&self, deadline_ms: u64) -> Option<u64> {
        let mut first: Option<u64> = None;
        loop {
            if self.converged() {
                match first {
                    Some(t) => return Some(t),
                    None => first = Some(self.now_ms()),
                }
            } else {
                first = None;
            }
            if self.now_ms() >= deadline_ms {
                return None;
            }
            self.step();
        }
    }

    /// Raw change-log bytes of a site.
    pub fn log_bytes(&self, site: &SiteId) -> Vec<u8> {
        let dir = self.data_dir(site).unwrap_or_default();
        std::fs::read(dir.join("log").join("changes.log")).unwrap_or_default()
    }
}

struct SimPeers {
    net: Weak<SimNet>,
}

impl SimPeers {
    fn net(&self) -> Result<Arc<SimNet>, String> {
        self.net.upgrade().ok_or_else(|| "simulation gone".to_string())
    }
}

impl PeerTransport for SimPeers {
    fn pull(&self, from: &SiteId, to: &SiteId, after: &SeqVector) -> Result<Vec<ChangeRecord>, String> {
        let net = self.net()?;
        let now = net.now_ms();
        let target = {
            let mut st = net.st();
            let req = serde_json::to_vec(after).expect("vector serializes");
            net.capture(&mut st, from, to, Channel::Sync, req);
            if !net.link_up(&st, from, to, now) {
                return Err(format!("{to} unreachable"));
            }
            st.slots.get(to).and_then(|s| s.node.clone())
        };
        if net.dropped() {
            net.st().dropped += 1;
            return Err("request lost".into());
        }
        let node = target.ok_or_else(|| format!("{to} down"))?;
        let (records, _) = node.changes_since(after);
        let mut st = net.st();
        net.capture(&mut st, to, from, Channel::Sync, serde_json::to_vec(&records).expect("records serialize"));
        drop(st);
        if net.dropped() {
            net.st().dropped += 1;
            return Err("response lost".into());
        }
        net.st().delivered += 1;
        Ok(records)
    }

    fn push(&self, from: &SiteId, to: &SiteId, records: Vec<ChangeRecord>) {
        let Ok(net) = self.net() else { return };
        let lost = net.dropped();
        let latency = {
            let (lo, hi) = net.opts.latency_ms;
            net.rng().gen_range(lo..=hi)
        };
        let mut st = net.st();
        net.capture(&mut st, from, to, Channel::Sync, serde_json::to_vec(&records).expect("records serialize"));
        if lost {
            st.dropped += 1;
            return;
        }
        let id = st.next_msg;
        st.next_msg += 1;
        st.in_flight.insert(id, InFlight { from: from.clone(), to: to.clone(), records });
        st.queue.push(Reverse((net.now_ms() + latency, id)));
    }

    fn query(&self, from: &SiteId, to: &SiteId, doc: &[u8], _timeout: Duration) -> Result<LocalAnswer, String> {
        let net = self.net()?;
        let target = {
            let mut st = net.st();
            net.capture(&mut st, from, to, Channel::Query, doc.to_vec());
            if !net.link_up(&st, from, to, net.now_ms()) {
                return Err(format!("{to} unreachable"));
            }
            st.slots.get(to).and_then(|s| s.node.clone())
        };
        let node = target.ok_or_else(|| format!("{to} down"))?;
        let answer = node.answer_subquery(doc).map_err(|e| e.to_string())?;
        let mut st = net.st();
        net.capture(&mut st, to, from, Channel::Query, serde_json::to_vec(&answer).expect("answer serializes"));
        Ok(answer)
    }

    fn fetch(&self, from: &SiteId, to: &SiteId, guid: &Guid) -> Result<Vec<u8>, String> {
        let net = self.net()?;
        let (server, client, tamper) = {
            let st = net.st();
            if !net.link_up(&st, from, to, net.now_ms()) {
                return Err(format!("{to} unreachable"));
            }
            let get = |s: &SiteId| st.slots.get(s).and_then(|x| x.node.clone());
            (get(to).ok_or("server down")?, get(from).ok_or("client down")?, st.tamper_dimse)
        };
        let cfg = server.server_config();
        let seed: u64 = net.rng().gen();
        let mut wire: Vec<(Direction, Vec<u8>)> = Vec::new();
        let result = {
            let tap: WireTap = Box::new(|dir, bytes: &mut Vec<u8>| {
                if tamper && dir == Direction::ToClient && bytes[0] == PduType::Data as u8 {
                    let last = bytes.len() - 1;
                    bytes[last] ^= 0x01;
                }
                wire.push((dir, bytes.clone()));
            });
            let session = ServerSession::new(&*server, &cfg, Box::new(ChaCha8Rng::seed_from_u64(seed)));
            let ch = Loopback::new(session, Some(tap));
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let ccfg = client.config();
            associate(ch, &ccfg.ae_title, &cfg.ae_title, ccfg.federation_key_id, &ccfg.federation_key.0, &mut rng)
                .and_then(|mut a| {
                    let r = a.c_get(guid);
                    a.release();
                    r
                })
        };
        let mut st = net.st();
        for (dir, bytes) in wire {
            let (a, b) = if dir == Direction::ToServer { (from, to) } else { (to, from) };
            net.capture(&mut st, a, b, Channel::Dimse, bytes);
        }
        result.map_err(|e| e.to_string())
    }
}
