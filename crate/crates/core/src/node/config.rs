use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::NodeError;
use crate::federation::DEFAULT_REPLICATE_THRESHOLD;
use crate::ids::SiteId;
use crate::jobs::DEFAULT_JOB_STALL_S;
use crate::sync::DEFAULT_SYNC_INTERVAL_S;
use crate::transfer::{ae_bytes, DEFAULT_PORT};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerConfig {
    pub site_id: SiteId,
    pub dimse: String,
    pub http: String,
    /// Called AE title for associations; defaults to the upper-cased site id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ae_title: Option<String>,
}

impl PeerConfig {
    pub fn ae(&self) -> String {
        self.ae_title.clone().unwrap_or_else(|| self.site_id.default_ae())
    }
}

/// 32-byte key, hex in the config file.
#[derive(Clone, PartialEq, Eq)]
pub struct FederationKey(pub [u8; 32]);

impl std::fmt::Debug for FederationKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("FederationKey(..)")
    }
}

impl Serialize for FederationKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for FederationKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = v.try_into().map_err(|_| serde::de::Error::custom("key must be 32 bytes"))?;
        Ok(FederationKey(arr))
    }
}

fn d_sync() -> u64 {
    DEFAULT_SYNC_INTERVAL_S
}
fn d_query_timeout() -> u64 {
    10
}
fn d_threshold() -> u64 {
    DEFAULT_REPLICATE_THRESHOLD
}
fn d_workers() -> usize {
    2
}
fn d_stall() -> u64 {
    DEFAULT_JOB_STALL_S
}
fn d_dimse() -> String {
    format!("127.0.0.1:{DEFAULT_PORT}")
}
fn d_http() -> String {
    "127.0.0.1:8080".into()
}
fn d_key_id() -> u8 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub site_id: SiteId,
    #[serde(default)]
    pub ae_title: String,
    /// Defaults to the directory holding `config.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "d_dimse")]
    pub listen_dimse: String,
    #[serde(default = "d_http")]
    pub listen_http: String,
    #[serde(default)]
    pub peers: Vec<PeerConfig>,
    #[serde(default = "d_key_id")]
    pub federation_key_id: u8,
    pub federation_key: FederationKey,
    #[serde(default = "d_sync")]
    pub sync_interval_s: u64,
    #[serde(default = "d_query_timeout")]
    pub query_timeout_s: u64,
    #[serde(default = "d_threshold")]
    pub replicate_threshold_bytes: u64,
    #[serde(default = "d_workers")]
    pub analysis_workers: usize,
    #[serde(default = "d_stall")]
    pub job_stall_s: u64,
}

impl NodeConfig {
    pub fn new(site_id: SiteId, key: [u8; 32]) -> Self {
        NodeConfig {
            ae_title: site_id.default_ae(),
            site_id,
            data_dir: None,
            listen_dimse: d_dimse(),
            listen_http: d_http(),
            peers: Vec::new(),
            federation_key_id: d_key_id(),
            federation_key: FederationKey(key),
            sync_interval_s: d_sync(),
            query_timeout_s: d_query_timeout(),
            replicate_threshold_bytes: d_threshold(),
            analysis_workers: d_workers(),
            job_stall_s: d_stall(),
        }
    }

    /// Fills defaults that depend on other fields and checks invariants.
    pub fn validate(&mut self) -> Result<(), NodeError> {
        let bad = |f: &str| Err(NodeError::BadConfig(f.to_string()));
        if self.ae_title.is_empty() {
            self.ae_title = self.site_id.default_ae();
        }
        if ae_bytes(&self.ae_title).is_err() {
            return bad("ae_title");
        }
        if self.federation_key.0 == [0u8; 32] {
            return bad("federation_key");
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.peers {
            if p.site_id == self.site_id || !seen.insert(p.site_id.clone()) {
                return bad("peers");
            }
            if ae_bytes(&p.ae()).is_err() {
                return bad("peers.ae_title");
            }
        }
        if self.sync_interval_s == 0 {
            return bad("sync_interval_s");
        }
        if self.query_timeout_s == 0 {
            return bad("query_timeout_s");
        }
        if self.analysis_workers == 0 {
            return bad("analysis_workers");
        }
        if self.job_stall_s == 0 {
            return bad("job_stall_s");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NodeError> {
        let text = std::fs::read(path).map_err(|e| NodeError::BadConfig(format!("{}: {e}", path.display())))?;
        let mut cfg: NodeConfig =
            serde_json::from_slice(&text).map_err(|e| NodeError::BadConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn peer_ids(&self) -> Vec<SiteId> {
        self.peers.iter().map(|p| p.site_id.clone()).collect()
    }

    pub fn peer(&self, site: &SiteId) -> Option<&PeerConfig> {
        self.peers.iter().find(|p| &p.site_id == site)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let text = r#"{"site_id":"site-a","federation_key":"0101010101010101010101010101010101010101010101010101010101010101"}"#;
        let mut cfg: NodeConfig = serde_json::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.ae_title, "SITE-A");
        assert_eq!(cfg.sync_interval_s, 5);
        assert_eq!(cfg.query_timeout_s, 10);
        assert_eq!(cfg.replicate_threshold_bytes, 67_108_864);
        assert_eq!(cfg.analysis_workers, 2);
        assert_eq!(cfg.job_stall_s, 300);

        let mut zero = NodeConfig::new(SiteId::new("site-a").unwrap(), [0; 32]);
        assert!(matches!(zero.validate(), Err(NodeError::BadConfig(f)) if f == "federation_key"));

        let mut dup = NodeConfig::new(SiteId::new("site-a").unwrap(), [1; 32]);
        dup.peers.push(PeerConfig { site_id: SiteId::new("site-a").unwrap(), dimse: "x".into(), http: "y".into(), ae_title: None });
        assert!(matches!(dup.validate(), Err(NodeError::BadConfig(f)) if f == "peers"));
    }

    #[test]
    fn key_is_hex_on_disk() {
        let cfg = NodeConfig::new(SiteId::new("site-a").unwrap(), [0xab; 32]);
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains(&"ab".repeat(32)));
        let back: NodeConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }
}
