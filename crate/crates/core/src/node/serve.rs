//! Runs a node as a daemon: HTTP API, DIMSE listener, sync and agent loops.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{http, DataDir, HttpPeers, Node, NodeConfig, NodeError, OpenOptions, SystemClock};
use crate::transfer::{serve_tcp, ServerSession};

const HTTP_WORKERS: usize = 4;
const DIMSE_IDLE: Duration = Duration::from_secs(60);
const AGENT_PERIOD: Duration = Duration::from_secs(1);

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub truncate_log: bool,
    pub durable: bool,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions { truncate_log: false, durable: true }
    }
}

pub struct RunningNode {
    node: Arc<Node>,
    http_addr: SocketAddr,
    dimse_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl RunningNode {
    pub fn node(&self) -> &Arc<Node> {
        &self.node
    }

    pub fn http_addr(&self) -> SocketAddr {
        self.http_addr
    }

    pub fn dimse_addr(&self) -> SocketAddr {
        self.dimse_addr
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    /// Blocks until the stop flag is raised, then joins the loops.
    pub fn wait(self) {
        while !self.stop.load(Ordering::SeqCst) {
            std::thread::sleep(Duration::from_millis(100));
        }
        self.shutdown();
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads {
            let _ = t.join();
        }
    }
}

/// Opens `dir` and starts serving.
pub fn serve(dir: &Path, opts: &ServeOptions) -> Result<RunningNode, NodeError> {
    let cfg = NodeConfig::load(&DataDir::new(dir, opts.durable).config_path())?;
    let peers = Arc::new(HttpPeers::new(&cfg));
    let open = OpenOptions { durable: opts.durable, truncate_log: opts.truncate_log, seed: None };
    let node = Arc::new(Node::open(dir, &open, peers, Arc::new(SystemClock))?);
    if node.swept_orphans() > 0 {
        log::info!("swept {} orphan store files", node.swept_orphans());
    }

    let dimse = TcpListener::bind(&cfg.listen_dimse).map_err(|e| NodeError::PortInUse(format!("{}: {e}", cfg.listen_dimse)))?;
    let dimse_addr = dimse.local_addr().map_err(|e| NodeError::Storage(e.to_string()))?;
    dimse.set_nonblocking(true).map_err(|e| NodeError::Storage(e.to_string()))?;
    let server = tiny_http::Server::http(&cfg.listen_http)
        .map_err(|e| NodeError::PortInUse(format!("{}: {e}", cfg.listen_http)))?;
    let http_addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| NodeError::BadConfig("listen_http must be an IP address".into()))?;
    let server = Arc::new(server);
    let stop = Arc::new(AtomicBool::new(false));
    let mut threads = Vec::new();

    for _ in 0..HTTP_WORKERS {
        let (node, server, stop) = (node.clone(), server.clone(), stop.clone());
        threads.push(std::thread::spawn(move || http_loop(&node, &server, &stop)));
    }
    {
        let (node, stop) = (node.clone(), stop.clone());
        threads.push(std::thread::spawn(move || dimse_loop(node, dimse, &stop)));
    }
    {
        let (node, stop) = (node.clone(), stop.clone());
        let period = Duration::from_secs(cfg.sync_interval_s);
        threads.push(std::thread::spawn(move || periodic(&stop, period, || {
            let r = node.anti_entropy();
            if r.applied > 0 {
                log::info!("anti-entropy applied {} records", r.applied);
            }
        })));
    }
    {
        let (node, stop) = (node.clone(), stop.clone());
        threads.push(std::thread::spawn(move || periodic(&stop, AGENT_PERIOD, || {
            node.agent_tick();
        })));
    }
    log::info!("{} serving http on {http_addr}, dimse on {dimse_addr}", cfg.site_id);
    Ok(RunningNode { node, http_addr, dimse_addr, stop, threads })
}

fn periodic(stop: &AtomicBool, period: Duration, mut f: impl FnMut()) {
    let mut next = Instant::now() + period;
    while !stop.load(Ordering::SeqCst) {
        if Instant::now() >= next {
            f();
            next = Instant::now() + period;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
}

fn http_loop(node: &Node, server: &tiny_http::Server, stop: &AtomicBool) {
    while !stop.load(Ordering::SeqCst) {
        let mut req = match server.recv_timeout(Duration::from_millis(200)) {
            Ok(Some(r)) => r,
            Ok(None) => continue,
            Err(e) => {
                log::warn!("http accept: {e}");
                continue;
            }
        };
        let mut body = Vec::new();
        if let Err(e) = req.as_reader().read_to_end(&mut body) {
            log::warn!("http body: {e}");
            continue;
        }
        let headers: BTreeMap<String, String> =
            req.headers().iter().map(|h| (h.field.to_string(), h.value.to_string())).collect();
        let method = req.method().as_str().to_string();
        let url = req.url().to_string();
        let resp = http::handle(node, &method, &url, &headers, &body);
        let ct = tiny_http::Header::from_bytes("Content-Type", resp.content_type).expect("static header");
        let out = tiny_http::Response::from_data(resp.body).with_status_code(resp.status).with_header(ct);
        if let Err(e) = req.respond(out) {
            log::debug!("http respond: {e}");
        }
    }
}

fn dimse_loop(node: Arc<Node>, listener: TcpListener, stop: &AtomicBool) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let node = node.clone();
                std::thread::spawn(move || {
                    let _ = stream.set_nonblocking(false);
                    let cfg = node.server_config();
                    let rng = ChaCha8Rng::seed_from_u64(rand::random());
                    let session = ServerSession::new(&*node, &cfg, Box::new(rng));
                    log::debug!("dimse association from {peer}");
                    serve_tcp(stream, session, DIMSE_IDLE);
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => {
                log::warn!("dimse accept: {e}");
                std::thread::sleep(Duration::from_millis(50));
            }
        }
    }
}
