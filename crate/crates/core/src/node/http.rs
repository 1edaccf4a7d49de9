//! HTTP/JSON API. [`handle`] is transport-free; [`serve`](super::serve)
//! binds it to a listener.

use std::collections::BTreeMap;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Node, NodeError, PatientAttrs};
use crate::catalogue::{CatalogueError, Lfn};
use crate::dataset;
use crate::federation::{FederatedResult, TransferDecision};
use crate::ids::{Guid, JobId, SiteId};
use crate::jobs::{Algorithm, JobError};
use crate::querylang::{self, Query, QueryError};
use crate::sync::{ChangeRecord, SeqVector};

pub const ATTRS_HEADER: &str = "X-Patient-Attrs";

#[derive(Clone, Debug, PartialEq)]
pub struct Response {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl Response {
    fn json(status: u16, v: &impl Serialize) -> Self {
        Response { status, content_type: "application/json", body: serde_json::to_vec(v).expect("response serializes") }
    }

    fn bytes(content_type: &'static str, body: Vec<u8>) -> Self {
        Response { status: 200, content_type, body }
    }

    fn error(status: u16, kind: &str, message: impl std::fmt::Display) -> Self {
        Response::json(status, &json!({ "error": kind, "message": message.to_string() }))
    }
}

#[derive(Debug, Deserialize)]
struct QueryRequest {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    ast: Option<Query>,
    #[serde(default)]
    sites: Option<Vec<SiteId>>,
    #[serde(default)]
    job_attached: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    #[serde(flatten)]
    pub result: FederatedResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferDecision>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JobRequest {
    pub algorithm: String,
    #[serde(default)]
    pub params: serde_json::Value,
    pub inputs: Vec<Lfn>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChangesResponse {
    pub records: Vec<ChangeRecord>,
    pub more: bool,
}

/// Routes one request. `headers` keys are matched case-insensitively.
pub fn handle(node: &Node, method: &str, url: &str, headers: &BTreeMap<String, String>, body: &[u8]) -> Response {
    let (path, query) = url.split_once('?').unwrap_or((url, ""));
    let params: BTreeMap<String, String> = form_urlencoded::parse(query.as_bytes()).into_owned().collect();
    let segs: Vec<&str> = path.trim_matches('/').split('/').collect();
    let r = match (method, segs.as_slice()) {
        ("POST", ["api", "query"]) => query_route(node, body),
        ("POST", ["api", "query", "validate"]) => validate_route(node, body),
        ("POST", ["api", "ingest"]) => ingest_route(node, headers, body),
        ("GET", ["api", "file", g]) => {
            parse_guid(g).and_then(|g| node.fetch(&g).map(|b| Response::bytes("application/octet-stream", b)))
        }
        ("GET", ["api", "preview", g]) => parse_guid(g).and_then(|g| preview(node, &g)),
        ("POST", ["api", "jobs"]) => submit_route(node, body),
        ("GET", ["api", "jobs"]) => Ok(Response::json(200, &node.jobs())),
        ("GET", ["api", "jobs", id]) => JobId::from_hex(id)
            .map_err(|_| NodeError::Job(JobError::UnknownJob(JobId([0; 16]))))
            .and_then(|id| node.job_status(&id))
            .map(|j| Response::json(200, &j)),
        ("GET", ["api", "catalogue", "list"]) => {
            let p = params.get("path").map(String::as_str).unwrap_or("/");
            Lfn::new(p).map_err(NodeError::from).map(|l| Response::json(200, &node.list(&l)))
        }
        ("GET", ["api", "catalogue", "resolve"]) => {
            let p = params.get("lfn").map(String::as_str).unwrap_or("");
            Lfn::new(p)
                .map_err(NodeError::from)
                .and_then(|l| node.resolve(&l))
                .map(|(entry, replicas)| Response::json(200, &json!({ "entry": entry, "replicas": replicas })))
        }
        ("GET", ["api", "sync", "changes"]) => {
            let after: Result<SeqVector, _> = match params.get("after") {
                Some(a) => serde_json::from_str(a),
                None => Ok(SeqVector::new()),
            };
            match after {
                Ok(after) => {
                    let (records, more) = node.changes_since(&after);
                    Ok(Response::json(200, &ChangesResponse { records, more }))
                }
                Err(e) => Ok(Response::error(400, "bad_request", e)),
            }
        }
        ("POST", ["api", "sync", "push"]) => match serde_json::from_slice::<Vec<ChangeRecord>>(body) {
            Ok(recs) => node.receive(recs).map(|r| Response::json(200, &r)),
            Err(e) => Ok(Response::error(400, "bad_request", e)),
        },
        ("GET", ["api", "status"]) => Ok(Response::json(200, &node.status())),
        _ => Ok(Response::error(404, "not_found", format!("no route for {method} {path}"))),
    };
    r.unwrap_or_else(error_response)
}

fn parse_guid(s: &str) -> Result<Guid, NodeError> {
    Guid::from_hex(s).map_err(|_| NodeError::UnknownGuid(Guid([0; 16])))
}

fn preview(node: &Node, guid: &Guid) -> Result<Response, NodeError> {
    let bytes = node.fetch(guid)?;
    let ds = dataset::decode(&bytes)?;
    let img = crate::analysis::Image::from_dataset(&ds)?;
    Ok(Response::bytes("image/png", super::preview::render(&img)))
}

fn query_route(node: &Node, body: &[u8]) -> Result<Response, NodeError> {
    let v: serde_json::Value = match serde_json::from_slice(body) {
        Ok(v) => v,
        Err(e) => return Ok(Response::error(400, "bad_request", e)),
    };
    // A bare query document is a sub-query from a peer.
    if v.get("proj").is_some() {
        return Ok(match node.answer_subquery(body) {
            Ok(a) => Response::json(200, &a),
            Err(e) => query_error(&e),
        });
    }
    let req: QueryRequest = match serde_json::from_value(v) {
        Ok(r) => r,
        Err(e) => return Ok(Response::error(400, "bad_request", e)),
    };
    let q = match (req.text, req.ast) {
        (Some(t), _) => querylang::parse(&t)?,
        (None, Some(q)) => q,
        (None, None) => return Ok(Response::error(400, "bad_request", "need text or ast")),
    };
    let result = node.query(&q, req.sites.as_deref())?;
    let transfer = match req.job_attached {
        Some(j) => Some(node.transfer_decision(&result, j)?),
        None => None,
    };
    Ok(Response::json(200, &QueryResponse { result, transfer }))
}

fn validate_route(node: &Node, body: &[u8]) -> Result<Response, NodeError> {
    #[derive(Deserialize)]
    struct Req {
        text: String,
    }
    let req: Req = match serde_json::from_slice(body) {
        Ok(r) => r,
        Err(e) => return Ok(Response::error(400, "bad_request", e)),
    };
    Ok(match querylang::parse(&req.text).and_then(|q| node.with_state(|s| querylang::validate(&q, &s.metastore))) {
        Ok(tq) => Response::json(200, &json!({ "ok": true, "query": tq.query(), "text": tq.query().to_string() })),
        Err(e) => Response::json(400, &json!({ "ok": false, "error": e, "message": e.to_string() })),
    })
}

fn ingest_route(node: &Node, headers: &BTreeMap<String, String>, body: &[u8]) -> Result<Response, NodeError> {
    let attrs = match headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(ATTRS_HEADER)) {
        Some((_, v)) => {
            let raw = base64::engine::general_purpose::STANDARD.decode(v.trim());
            match raw.ok().and_then(|b| serde_json::from_slice::<PatientAttrs>(&b).ok()) {
                Some(a) => Some(a),
                None => return Ok(Response::error(400, "bad_request", format!("malformed {ATTRS_HEADER}"))),
            }
        }
        None => None,
    };
    let receipt = node.ingest(body, attrs.as_ref())?;
    Ok(Response::json(200, &receipt))
}

fn submit_route(node: &Node, body: &[u8]) -> Result<Response, NodeError> {
    let req: JobRequest = match serde_json::from_slice(body) {
        Ok(r) => r,
        Err(e) => return Ok(Response::error(400, "bad_request", e)),
    };
    let algorithm: Algorithm = req.algorithm.parse()?;
    let job = node.submit_job(algorithm, req.params, req.inputs)?;
    Ok(Response::json(200, &job))
}

fn query_error(e: &QueryError) -> Response {
    Response::json(400, &json!({ "error": e, "message": e.to_string() }))
}

fn error_response(e: NodeError) -> Response {
    use NodeError::*;
    match &e {
        Query(q) => query_error(q),
        Decode(_) | MissingElement(_) | Analysis(_) => Response::error(400, "bad_dataset", &e),
        NotAnonymized => Response::error(400, "not_anonymized", &e),
        DuplicateSop(_) => Response::error(409, "duplicate", &e),
        UnknownGuid(_) => Response::error(404, "unknown_guid", &e),
        Catalogue(CatalogueError::NotFound(_)) => Response::error(404, "not_found", &e),
        Catalogue(_) => Response::error(400, "bad_lfn", &e),
        Job(JobError::UnknownJob(_)) => Response::error(404, "unknown_job", &e),
        Job(_) => Response::error(400, "bad_job", &e),
        FetchFailed(_) | ChecksumMismatch(_) => Response::error(502, "fetch_failed", &e),
        _ => Response::error(500, "internal", &e),
    }
}
