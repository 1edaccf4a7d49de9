use std::collections::BTreeMap;
use std::sync::Arc;

use base64::Engine;
use mammogrid::ids::SiteId;
use mammogrid::node::http::{handle, Response, ATTRS_HEADER};
use mammogrid::node::Node;
use mammogrid::simnet::phantom::{generate_phantom, PhantomIdentity, PhantomSpec};
use mammogrid::simnet::{SimNet, SimOptions};
use serde_json::{json, Value};

fn site(s: &str) -> SiteId {
    SiteId::new(s).unwrap()
}

fn net() -> Arc<SimNet> {
    SimNet::new(SimOptions { sites: vec![site("site-a"), site("site-b")], seed: 1, ..SimOptions::default() }).unwrap()
}

fn phantom(seed: u64, rows: usize, cols: usize) -> Vec<u8> {
    let spec = PhantomSpec { rows, cols, seed, ..PhantomSpec::default() };
    generate_phantom(&spec, &PhantomIdentity::synthetic(seed)).unwrap().0
}

fn call(node: &Node, method: &str, url: &str, body: &[u8]) -> Response {
    handle(node, method, url, &BTreeMap::new(), body)
}

fn json_of(r: &Response) -> Value {
    assert_eq!(r.content_type, "application/json");
    serde_json::from_slice(&r.body).unwrap()
}

fn ingest(node: &Node, bytes: &[u8], attrs: Option<Value>) -> Response {
    let mut headers = BTreeMap::new();
    if let Some(a) = attrs {
        let v = base64::engine::general_purpose::STANDARD.encode(a.to_string());
        headers.insert(ATTRS_HEADER.to_lowercase(), v);
    }
    handle(node, "POST", "/api/ingest", &headers, bytes)
}

#[test]
fn ingest_route() {
    let net = net();
    let a = net.node(&site("site-a")).unwrap();
    let bytes = phantom(1, 64, 64);
    let r = ingest(&a, &bytes, Some(json!({"age": 55, "sex": "F"})));
    assert_eq!(r.status, 200);
    let receipt = json_of(&r);
    assert!(receipt["lfn"].as_str().unwrap().starts_with("/acq/site-a/"));
    assert_eq!(ingest(&a, &bytes, None).status, 409);
    assert_eq!(ingest(&a, b"garbage", None).status, 400);
    let mut headers = BTreeMap::new();
    headers.insert(ATTRS_HEADER.into(), "!!!".into());
    assert_eq!(handle(&a, "POST", "/api/ingest", &headers, &phantom(2, 64, 64)).status, 400);

    let r = call(&a, "POST", "/api/query", json!({"text": "SELECT patient.age WHERE patient.age = 55"}).to_string().as_bytes());
    let v = json_of(&r);
    assert_eq!(v["rows"].as_array().unwrap().len(), 1);
    assert_eq!(v["rows"][0]["values"][0], json!({"int": 55}));
}

#[test]
fn query_routes() {
    let net = net();
    let a = net.node(&site("site-a")).unwrap();
    assert_eq!(ingest(&a, &phantom(1, 64, 64), None).status, 200);
    assert!(net.wait_converged(60_000).is_some());
    let b = net.node(&site("site-b")).unwrap();

    let body = json!({"text": "SELECT image.lfn WHERE image.breast_density >= 0"}).to_string();
    let v = json_of(&call(&b, "POST", "/api/query", body.as_bytes()));
    assert_eq!(v["rows"].as_array().unwrap().len(), 1);
    assert_eq!(v["rows"][0]["site"], "site-a");
    let mut responded: Vec<_> = v["responded"].as_array().unwrap().iter().map(|s| s.as_str().unwrap()).collect();
    responded.sort();
    assert_eq!(responded, ["site-a", "site-b"]);
    assert!(v["failed"].as_array().unwrap().is_empty());

    // The same query as an AST document.
    let ast = mammogrid::querylang::parse("SELECT image.lfn WHERE image.breast_density >= 0").unwrap();
    let v2 = json_of(&call(&b, "POST", "/api/query", json!({ "ast": ast }).to_string().as_bytes()));
    assert_eq!(v2["rows"], v["rows"]);

    let with_transfer = json!({"text": "SELECT image.lfn WHERE image.breast_density >= 0", "job_attached": true});
    let v3 = json_of(&call(&b, "POST", "/api/query", with_transfer.to_string().as_bytes()));
    assert!(v3.get("transfer").is_some(), "{v3}");

    let bad = call(&b, "POST", "/api/query", br#"{"text": "SELECT image.lfn WHERE"}"#);
    assert_eq!(bad.status, 400);
    assert_eq!(call(&b, "POST", "/api/query", b"{}").status, 400);
    assert_eq!(call(&b, "POST", "/api/query", b"not json").status, 400);

    let ok = call(&b, "POST", "/api/query/validate", br#"{"text": "select image.lfn where patient.age > 50"}"#);
    assert_eq!(ok.status, 200);
    assert_eq!(json_of(&ok)["text"], "SELECT image.lfn WHERE patient.age > 50");
    let unknown = call(&b, "POST", "/api/query/validate", br#"{"text": "SELECT image.lfn WHERE image.nope = 1"}"#);
    assert_eq!(unknown.status, 400);
    assert_eq!(json_of(&unknown)["ok"], false);
}

#[test]
fn catalogue_and_file_routes() {
    let net = net();
    let a = net.node(&site("site-a")).unwrap();
    let receipt = json_of(&ingest(&a, &phantom(1, 64, 64), None));
    let (lfn, guid) = (receipt["lfn"].as_str().unwrap(), receipt["guid"].as_str().unwrap());

    let list = json_of(&call(&a, "GET", "/api/catalogue/list?path=/acq", b""));
    assert_eq!(list["dirs"], json!(["site-a"]));
    assert_eq!(call(&a, "GET", "/api/catalogue/list?path=relative", b"").status, 400);
    let url = format!("/api/catalogue/resolve?lfn={lfn}");
    let res = json_of(&call(&a, "GET", &url, b""));
    assert_eq!(res["entry"]["guid"], guid);
    assert_eq!(res["replicas"][0]["site"], "site-a");
    assert_eq!(call(&a, "GET", "/api/catalogue/resolve?lfn=/acq/x.mgd", b"").status, 404);

    let file = call(&a, "GET", &format!("/api/file/{guid}"), b"");
    assert_eq!(file.status, 200);
    assert_eq!(file.content_type, "application/octet-stream");
    mammogrid::dataset::decode(&file.body).unwrap();
    assert_eq!(call(&a, "GET", &format!("/api/file/{}", "ab".repeat(16)), b"").status, 404);
    assert_eq!(call(&a, "GET", "/api/file/xyz", b"").status, 404);
    assert_eq!(call(&a, "GET", "/api/nothing", b"").status, 404);
    assert_eq!(call(&a, "DELETE", "/api/status", b"").status, 404);
}

#[test]
fn preview_fetches_remote_file_and_registers_replica() {
    let net = net();
    let a = net.node(&site("site-a")).unwrap();
    let receipt = json_of(&ingest(&a, &phantom(1, 1024, 2048), None));
    let guid = receipt["guid"].as_str().unwrap().to_string();
    assert!(net.wait_converged(60_000).is_some());
    let b = net.node(&site("site-b")).unwrap();
    let url = format!("/api/preview/{guid}");
    let r = call(&b, "GET", &url, b"");
    assert_eq!(r.status, 200, "{}", String::from_utf8_lossy(&r.body));
    assert_eq!(r.content_type, "image/png");
    let reader = png::Decoder::new(r.body.as_slice()).read_info().unwrap();
    assert_eq!((reader.info().width, reader.info().height), (512, 256));
    let res = json_of(&call(&b, "GET", &format!("/api/catalogue/resolve?lfn={}", receipt["lfn"].as_str().unwrap()), b""));
    let sites: Vec<_> = res["replicas"].as_array().unwrap().iter().map(|r| r["site"].clone()).collect();
    assert!(sites.contains(&json!("site-b")));
    // The replica record reaches the origin as well.
    assert!(net.wait_converged(net.now_ms() + 60_000).is_some());
    assert_eq!(a.resolve(&receipt["lfn"].as_str().unwrap().parse().unwrap()).unwrap().1.len(), 2);
}

#[test]
fn job_routes() {
    let net = net();
    let a = net.node(&site("site-a")).unwrap();
    let lfn = json_of(&ingest(&a, &phantom(1, 64, 64), None))["lfn"].clone();
    let body = json!({"algorithm": "qc_report", "inputs": [lfn]}).to_string();
    let r = call(&a, "POST", "/api/jobs", body.as_bytes());
    assert_eq!(r.status, 200);
    let id = json_of(&r)["id"].as_str().unwrap().to_string();
    assert_eq!(json_of(&call(&a, "GET", &format!("/api/jobs/{id}"), b""))["status"], "queued");
    a.agent_tick();
    assert_eq!(json_of(&call(&a, "GET", &format!("/api/jobs/{id}"), b""))["status"], "done");
    assert_eq!(json_of(&call(&a, "GET", "/api/jobs", b"")).as_array().unwrap().len(), 1);
    assert_eq!(call(&a, "GET", &format!("/api/jobs/{}", "0".repeat(32)), b"").status, 404);
    assert_eq!(call(&a, "POST", "/api/jobs", br#"{"algorithm": "nope", "inputs": []}"#).status, 400);
    assert_eq!(call(&a, "POST", "/api/jobs", b"[]").status, 400);
}

#[test]
fn sync_and_status_routes() {
    let net = net();
    let a = net.node(&site("site-a")).unwrap();
    let b = net.node(&site("site-b")).unwrap();
    ingest(&a, &phantom(1, 64, 64), None);
    let ch = json_of(&call(&a, "GET", "/api/sync/changes", b""));
    let records = ch["records"].clone();
    assert!(!records.as_array().unwrap().is_empty());
    assert_eq!(ch["more"], false);
    let after = serde_json::to_string(&a.vector()).unwrap();
    let url = format!("/api/sync/changes?after={}", form_urlencoded::byte_serialize(after.as_bytes()).collect::<String>());
    assert!(json_of(&call(&a, "GET", &url, b""))["records"].as_array().unwrap().is_empty());
    assert_eq!(call(&a, "GET", "/api/sync/changes?after=zzz", b"").status, 400);

    let r = json_of(&call(&b, "POST", "/api/sync/push", records.to_string().as_bytes()));
    assert!(r["applied"].as_u64().unwrap() > 0);
    assert_eq!(b.canonical_bytes(), a.canonical_bytes());
    assert_eq!(call(&b, "POST", "/api/sync/push", b"{}").status, 400);

    let st = json_of(&call(&b, "GET", "/api/status", b""));
    assert_eq!(st["site"], "site-b");
    assert_eq!(st["peers"], json!(["site-a"]));
    assert_eq!(st["vector"], serde_json::to_value(a.vector()).unwrap());
    assert!(st.get("uptime_s").is_some());
}
