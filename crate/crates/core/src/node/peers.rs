//! Real transport: HTTP/JSON for sync and queries, DIMSE over TCP for files.

use std::collections::BTreeMap;
use std::sync::mpsc::{self, Sender};
use std::sync::Mutex;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::http::ChangesResponse;
use super::{NodeConfig, PeerConfig, PeerTransport};
use crate::ids::{Guid, SiteId};
use crate::querylang::LocalAnswer;
use crate::sync::{ChangeRecord, SeqVector};
use crate::transfer::{associate, TcpChannel};

const SYNC_TIMEOUT: Duration = Duration::from_secs(10);

pub struct HttpPeers {
    peers: BTreeMap<SiteId, PeerConfig>,
    calling_ae: String,
    key_id: u8,
    key: [u8; 32],
    agent: ureq::Agent,
    pushers: Mutex<BTreeMap<SiteId, Sender<Vec<ChangeRecord>>>>,
}

impl HttpPeers {
    pub fn new(cfg: &NodeConfig) -> Self {
        HttpPeers {
            peers: cfg.peers.iter().map(|p| (p.site_id.clone(), p.clone())).collect(),
            calling_ae: cfg.ae_title.clone(),
            key_id: cfg.federation_key_id,
            key: cfg.federation_key.0,
            agent: ureq::AgentBuilder::new().timeout_connect(Duration::from_secs(3)).build(),
            pushers: Mutex::new(BTreeMap::new()),
        }
    }

    fn peer(&self, site: &SiteId) -> Result<&PeerConfig, String> {
        self.peers.get(site).ok_or_else(|| format!("{site} is not a configured peer"))
    }

    /// One background sender per peer so pushes never block the caller.
    fn pusher(&self, peer: &PeerConfig) -> Sender<Vec<ChangeRecord>> {
        let mut map = self.pushers.lock().unwrap_or_else(|p| p.into_inner());
        map.entry(peer.site_id.clone())
            .or_insert_with(|| {
                let (tx, rx) = mpsc::channel::<Vec<ChangeRecord>>();
                let url = format!("http://{}/api/sync/push", peer.http);
                let agent = self.agent.clone();
                std::thread::spawn(move || {
                    for batch in rx {
                        let res = agent.post(&url).timeout(SYNC_TIMEOUT).send_json(&batch);
                        if let Err(e) = res {
                            log::debug!("push to {url} failed: {e}");
                        }
                    }
                });
                tx
            })
            .clone()
    }
}

impl PeerTransport for HttpPeers {
    fn pull(&self, _from: &SiteId, to: &SiteId, after: &SeqVector) -> Result<Vec<ChangeRecord>, String> {
        let p = self.peer(to)?;
        let after = serde_json::to_string(after).expect("vector serializes");
        let resp: ChangesResponse = self
            .agent
            .get(&format!("http://{}/api/sync/changes", p.http))
            .query("after", &after)
            .timeout(SYNC_TIMEOUT)
            .call()
            .map_err(|e| e.to_string())?
            .into_json()
            .map_err(|e| e.to_string())?;
        Ok(resp.records)
    }

    fn push(&self, _from: &SiteId, to: &SiteId, records: Vec<ChangeRecord>) {
        if let Ok(p) = self.peer(to) {
            let _ = self.pusher(p).send(records);
        }
    }

    fn query(&self, _from: &SiteId, to: &SiteId, doc: &[u8], timeout: Duration) -> Result<LocalAnswer, String> {
        let p = self.peer(to)?;
        let resp = self
            .agent
            .post(&format!("http://{}/api/query", p.http))
            .set("Content-Type", "application/json")
            .timeout(timeout)
            .send_bytes(doc);
        match resp {
            Ok(r) => r.into_json().map_err(|e| e.to_string()),
            Err(ureq::Error::Status(code, r)) => Err(format!("HTTP {code}: {}", r.into_string().unwrap_or_default())),
            Err(e) => Err(e.to_string()),
        }
    }

    fn fetch(&self, _from: &SiteId, to: &SiteId, guid: &Guid) -> Result<Vec<u8>, String> {
        let p = self.peer(to)?;
        let ch = TcpChannel::connect(&p.dimse, SYNC_TIMEOUT).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::from_entropy();
        let mut assoc =
            associate(ch, &self.calling_ae, &p.ae(), self.key_id, &self.key, &mut rng).map_err(|e| e.to_string())?;
        let bytes = assoc.c_get(guid).map_err(|e| e.to_string())?;
        assoc.release();
        Ok(bytes)
    }
}
