//! Command-line front end for a node.
//!
//! Exit codes: 0 ok, 1 usage, 2 remote failure, 3 local failure.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;
use std::time::Duration;

use base64::Engine;
use clap::{Parser, Subcommand};
use mammogrid::catalogue::Lfn;
use mammogrid::ids::SiteId;
use mammogrid::node::http::{JobRequest, ATTRS_HEADER};
use mammogrid::node::{serve, DataDir, Node, NodeConfig, PeerConfig, ServeOptions};
use mammogrid::simnet::scenario::{self, Scenario, CONVERGENCE_BOUND_S};
use rand::RngCore;
use serde_json::Value;

#[derive(Parser)]
#[command(name = "mgctl", version, about = "Run and talk to a federated mammogram node")]
struct Cli {
    /// Node data directory.
    #[arg(long, env = "MG_DATA_DIR", default_value = "mg-data", global = true)]
    data_dir: PathBuf,
    /// Talk to this HTTP address instead of the one in the node config.
    #[arg(long, global = true)]
    url: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a data directory and its config.
    Init {
        /// Copy this config file instead of building one from flags.
        #[arg(long, conflicts_with_all = ["site", "key"])]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "config")]
        site: Option<String>,
        /// Federation key, 64 hex digits. A fresh one is generated and
        /// printed when omitted.
        #[arg(long)]
        key: Option<String>,
        #[arg(long)]
        http: Option<String>,
        #[arg(long)]
        dimse: Option<String>,
        /// `<site>=<http-addr>,<dimse-addr>`; repeatable.
        #[arg(long = "peer")]
        peers: Vec<String>,
    },
    /// Run the node until interrupted.
    Serve {
        /// Drop a torn final log record instead of refusing to start.
        #[arg(long)]
        truncate_log: bool,
    },
    /// Ingest MGD files.
    Ingest {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Patient attributes as JSON, e.g. '{"age":54,"sex":"F"}'.
        #[arg(long)]
        attrs: Option<String>,
    },
    /// Run a federated query and print the result document.
    Query {
        text: String,
        /// Restrict to these sites; repeatable.
        #[arg(long = "site")]
        sites: Vec<String>,
    },
    /// Fetch a file by logical name.
    Get {
        lfn: String,
        #[arg(short, long)]
        out: PathBuf,
    },
    #[command(subcommand)]
    Job(JobCmd),
    /// Show configured peers and whether they answer.
    Peers,
    #[command(subcommand)]
    Sim(SimCmd),
}

#[derive(Subcommand)]
enum JobCmd {
    Submit {
        algorithm: String,
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        params: Option<String>,
    },
    Status {
        id: String,
    },
}

#[derive(Subcommand)]
enum SimCmd {
    /// Run a scenario file; prints the report and writes it as JSON.
    Run {
        scenario: PathBuf,
        /// Report path; defaults to the scenario path with `.report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Remote(String),
    Local(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Remote(_) => 2,
            Failure::Local(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Remote(m) | Failure::Local(m) => m,
        }
    }
}

type Res<T> = Result<T, Failure>;

fn local(e: impl std::fmt::Display) -> Failure {
    Failure::Local(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mgctl: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Res<()> {
    match &cli.cmd {
        Cmd::Init { config, site, key, http, dimse, peers } => {
            init(&cli, config.as_ref(), site.as_deref(), key.as_deref(), http, dimse, peers)
        }
        Cmd::Serve { truncate_log } => serve_cmd(&cli, *truncate_log),
        Cmd::Ingest { files, attrs } => {
            let c = Client::new(&cli)?;
            let attrs = match attrs {
                Some(a) => {
                    let _: Value = serde_json::from_str(a).map_err(|e| Failure::Usage(format!("--attrs: {e}")))?;
                    Some(base64::engine::general_purpose::STANDARD.encode(a))
                }
                None => None,
            };
            let mut failed = None;
            for f in files {
                let bytes = std::fs::read(f).map_err(|e| local(format!("{}: {e}", f.display())))?;
                let mut req = c.agent.post(&c.url("/api/ingest")).set("Content-Type", "application/octet-stream");
                if let Some(a) = &attrs {
                    req = req.set(ATTRS_HEADER, a);
                }
                match c.call(req.send_bytes(&bytes)) {
                    Ok(v) => println!("{}\t{}", f.display(), v["lfn"].as_str().unwrap_or_default()),
                    Err(e) => {
                        eprintln!("{}: {}", f.display(), e.message());
                        failed = Some(e);
                    }
                }
            }
            failed.map_or(Ok(()), Err)
        }
        Cmd::Query { text, sites } => {
            let c = Client::new(&cli)?;
            for s in sites {
                SiteId::new(s).map_err(|e| Failure::Usage(e.to_string()))?;
            }
            let mut body = serde_json::json!({ "text": text });
            if !sites.is_empty() {
                body["sites"] = serde_json::json!(sites);
            }
            let v = c.call(c.agent.post(&c.url("/api/query")).send_json(body))?;
            print_json(&v);
            Ok(())
        }
        Cmd::Get { lfn, out } => {
            let c = Client::new(&cli)?;
            let lfn = Lfn::new(lfn.as_str()).map_err(|e| Failure::Usage(e.to_string()))?;
            let v = c.call(c.agent.get(&c.url("/api/catalogue/resolve")).query("lfn", lfn.as_str()).call())?;
            let guid = v["entry"]["guid"].as_str().ok_or_else(|| Failure::Remote("malformed resolve reply".into()))?;
            let bytes = c.bytes(c.agent.get(&c.url(&format!("/api/file/{guid}"))).call())?;
            std::fs::write(out, &bytes).map_err(|e| local(format!("{}: {e}", out.display())))?;
            println!("{} bytes -> {}", bytes.len(), out.display());
            Ok(())
        }
        Cmd::Job(JobCmd::Submit { algorithm, inputs, params }) => {
            let c = Client::new(&cli)?;
            let params = match params {
                Some(p) => serde_json::from_str(p).map_err(|e| Failure::Usage(format!("--params: {e}")))?,
                None => Value::Null,
            };
            let inputs = inputs
                .iter()
                .map(|l| Lfn::new(l.as_str()).map_err(|e| Failure::Usage(e.to_string())))
                .collect::<Res<Vec<_>>>()?;
            let req = JobRequest { algorithm: algorithm.clone(), params, inputs };
            let v = c.call(c.agent.post(&c.url("/api/jobs")).send_json(&req))?;
            print_json(&v);
            Ok(())
        }
        Cmd::Job(JobCmd::Status { id }) => {
            let c = Client::new(&cli)?;
            print_json(&c.call(c.agent.get(&c.url(&format!("/api/jobs/{id}"))).call())?);
            Ok(())
        }
        Cmd::Peers => {
            let cfg = load_config(&cli)?;
            let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(3)).build();
            for p in &cfg.peers {
                let state = match agent.get(&format!("http://{}/api/status", p.http)).call() {
                    Ok(r) => match r.into_json::<Value>() {
                        Ok(v) => format!("up, vector {}", v["vector"]),
                        Err(e) => format!("bad reply: {e}"),
                    },
                    Err(e) => format!("unreachable: {e}"),
                };
                println!("{}\thttp {}\tdimse {}\t{state}", p.site_id, p.http, p.dimse);
            }
            Ok(())
        }
        Cmd::Sim(SimCmd::Run { scenario, out }) => sim_run(scenario, out.as_ref()),
    }
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn load_config(cli: &Cli) -> Res<NodeConfig> {
    NodeConfig::load(&DataDir::new(&cli.data_dir, false).config_path()).map_err(local)
}

#[allow(clippy::too_many_arguments)]
fn init(
    cli: &Cli,
    config: Option<&PathBuf>,
    site: Option<&str>,
    key: Option<&str>,
    http: &Option<String>,
    dimse: &Option<String>,
    peers: &[String],
) -> Res<()> {
    let mut cfg = match config {
        Some(path) => NodeConfig::load(path).map_err(local)?,
        None => {
            let site = SiteId::new(site.unwrap_or_default()).map_err(|e| Failure::Usage(e.to_string()))?;
            let key = match key {
                Some(k) => {
                    let raw = hex::decode(k).map_err(|_| Failure::Usage("--key must be 64 hex digits".into()))?;
                    raw.try_into().map_err(|_| Failure::Usage("--key must be 64 hex digits".into()))?
                }
                None => {
                    let mut k = [0u8; 32];
                    rand::thread_rng().fill_bytes(&mut k);
                    println!("federation key {}", hex::encode(k));
                    k
                }
            };
            NodeConfig::new(site, key)
        }
    };
    if let Some(h) = http {
        cfg.listen_http = h.clone();
    }
    if let Some(d) = dimse {
        cfg.listen_dimse = d.clone();
    }
    for p in peers {
        cfg.peers.push(parse_peer(p)?);
    }
    Node::init(&cli.data_dir, cfg).map_err(local)?;
    println!("initialized {}", cli.data_dir.display());
    Ok(())
}

fn parse_peer(s: &str) -> Res<PeerConfig> {
    let bad = || Failure::Usage(format!("--peer {s}: expected <site>=<http-addr>,<dimse-addr>"));
    let (site, addrs) = s.split_once('=').ok_or_else(bad)?;
    let (http, dimse) = addrs.split_once(',').ok_or_else(bad)?;
    Ok(PeerConfig {
        site_id: SiteId::new(site).map_err(|e| Failure::Usage(e.to_string()))?,
        http: http.into(),
        dimse: dimse.into(),
        ae_title: None,
    })
}

fn serve_cmd(cli: &Cli, truncate_log: bool) -> Res<()> {
    let running = serve(&cli.data_dir, &ServeOptions { truncate_log, ..ServeOptions::default() }).map_err(local)?;
    let stop = running.stop_flag();
    ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst)).map_err(local)?;
    println!("http {}", running.http_addr());
    println!("dimse {}", running.dimse_addr());
    let _ = std::io::stdout().flush();
    running.wait();
    Ok(())
}

fn sim_run(path: &PathBuf, out: Option<&PathBuf>) -> Res<()> {
    let text = std::fs::read_to_string(path).map_err(|e| local(format!("{}: {e}", path.display())))?;
    let sc: Scenario = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let (_net, report) = scenario::run(&sc).map_err(local)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    let out = out.cloned().unwrap_or_else(|| path.with_extension("report.json"));
    std::fs::write(&out, &json).map_err(|e| local(format!("{}: {e}", out.display())))?;
    if let Some(s) = report.steps.iter().find(|s| !s.ok) {
        return Err(Failure::Local(format!("AssertionFailed(step {} {}): {}", s.index, s.op, s.detail)));
    }
    if report.converged == Some(false) {
        return Err(Failure::Local("ConvergenceTimeout".into()));
    }
    if !report.ok(sc.settle_s.min(CONVERGENCE_BOUND_S) * 1000) {
        return Err(Failure::Local(format!("lost {} acknowledged ingests", report.lost.len())));
    }
    Ok(())
}

struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    fn new(cli: &Cli) -> Res<Self> {
        let base = match &cli.url {
            Some(u) => u.trim_end_matches('/').to_string(),
            None => {
                let cfg = load_config(cli)?;
                let addr = cfg.listen_http.replace("0.0.0.0", "127.0.0.1");
                format!("http://{addr}")
            }
        };
        let agent = ureq::AgentBuilder::new().timeout_connect(Duration::from_secs(5)).build();
        Ok(Client { base, agent })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn response(&self, r: Result<ureq::Response, ureq::Error>) -> Res<ureq::Response> {
        match r {
            Ok(r) => Ok(r),
            Err(ureq::Error::Status(code, r)) => {
                let body = r.into_string().unwrap_or_default();
                let msg = serde_json::from_str::<Value>(&body)
                    .ok()
                    .and_then(|v| v["message"].as_str().map(str::to_string))
                    .unwrap_or(body);
                Err(Failure::Remote(format!("HTTP {code}: {msg}")))
            }
            Err(e) => Err(Failure::Remote(e.to_string())),
        }
    }

    fn call(&self, r: Result<ureq::Response, ureq::Error>) -> Res<Value> {
        self.response(r)?.into_json().map_err(|e| Failure::Remote(e.to_string()))
    }

    fn bytes(&self, r: Result<ureq::Response, ureq::Error>) -> Res<Vec<u8>> {
        let mut buf = Vec::new();
        self.response(r)?.into_reader().read_to_end(&mut buf).map_err(|e| Failure::Remote(e.to_string()))?;
        Ok(buf)
    }
}
