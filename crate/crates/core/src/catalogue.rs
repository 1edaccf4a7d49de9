//! Virtual file catalogue: logical names bound to immutable content objects
//! and the sites holding physical copies of them.
//!
//! The catalogue is add-only. Directories are implicit, entries never change
//! after registration, and replica sets only grow, so applying the same set of
//! changes in any causal order gives the same state.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::ids::{Digest, Guid, SiteId};

const MAX_SEGMENTS: usize = 16;
const MAX_SEGMENT_LEN: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CatalogueError {
    #[error("invalid logical file name {0:?}: {1}")]
    BadLfn(String, &'static str),
    #[error("logical file name {0} already bound")]
    LfnExists(Lfn),
    #[error("guid {0} already bound")]
    GuidExists(Guid),
    #[error("unknown guid {0}")]
    UnknownGuid(Guid),
    #[error("replica of {0} at {1} already recorded with a different pfn")]
    ConflictingPfn(Guid, SiteId),
    #[error("{0} not found")]
    NotFound(Lfn),
    #[error("file size must be positive")]
    EmptyFile,
}

/// Absolute logical file name, e.g. `/acq/udine/<pseudonym>/<study>/<sop>.mgd`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Lfn(String);

impl Lfn {
    pub fn new(s: impl Into<String>) -> Result<Self, CatalogueError> {
        let s = s.into();
        if s == "/" {
            return Ok(Lfn(s));
        }
        if !s.starts_with('/') {
            return Err(CatalogueError::BadLfn(s, "must start with '/'"));
        }
        let segs: Vec<&str> = s[1..].split('/').collect();
        if segs.len() > MAX_SEGMENTS {
            return Err(CatalogueError::BadLfn(s, "more than 16 segments"));
        }
        for seg in &segs {
            if seg.is_empty() {
                return Err(CatalogueError::BadLfn(s, "empty segment"));
            }
            if *seg == "." || *seg == ".." {
                return Err(CatalogueError::BadLfn(s, "relative segment"));
            }
            if seg.len() > MAX_SEGMENT_LEN
                || !seg.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
            {
                return Err(CatalogueError::BadLfn(s, "segment outside [A-Za-z0-9._-]{1,64}"));
            }
        }
        Ok(Lfn(s))
    }

    pub fn root() -> Self {
        Lfn("/".into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split('/').filter(|s| !s.is_empty())
    }

    pub fn is_root(&self) -> bool {
        self.0 == "/"
    }

    pub fn join(&self, seg: &str) -> Result<Lfn, CatalogueError> {
        if self.is_root() {
            Lfn::new(format!("/{seg}"))
        } else {
            Lfn::new(format!("{}/{seg}", self.0))
        }
    }

    pub fn file_name(&self) -> Option<&str> {
        self.segments().last()
    }
}

impl fmt::Display for Lfn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Lfn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Lfn({})", self.0)
    }
}

impl FromStr for Lfn {
    type Err = CatalogueError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Lfn::new(s)
    }
}

impl<'de> Deserialize<'de> for Lfn {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Lfn::new(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub lfn: Lfn,
    pub guid: Guid,
    pub size: u64,
    pub checksum: Digest,
    pub created_site: SiteId,
    pub created_seq: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Replica {
    pub guid: Guid,
    pub site: SiteId,
    pub pfn: String,
}

/// Child listing returned by [`Catalogue::list`]: directories first, then
/// files, each group sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Listing {
    pub dirs: Vec<String>,
    pub files: Vec<String>,
}

impl Listing {
    pub fn names(&self) -> Vec<String> {
        self.dirs.iter().chain(self.files.iter()).cloned().collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalogue {
    entries: BTreeMap<Lfn, FileEntry>,
    by_guid: BTreeMap<Guid, Lfn>,
    replicas: BTreeMap<Guid, BTreeMap<SiteId, String>>,
    /// Replicas whose file registration has not arrived yet (a peer's
    /// AddReplica can overtake the origin's AddFile). Invisible to readers.
    orphan_replicas: BTreeMap<Guid, BTreeMap<SiteId, String>>,
}

impl Catalogue {
    pub fn new() -> Self {
        Catalogue::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registers a file together with its initial replica at the origin.
    pub fn register_file(
        &mut self,
        entry: FileEntry,
        origin_pfn: String,
    ) -> Result<&FileEntry, CatalogueError> {
        if entry.size == 0 {
            return Err(CatalogueError::EmptyFile);
        }
        if self.entries.contains_key(&entry.lfn) {
            return Err(CatalogueError::LfnExists(entry.lfn));
        }
        if self.by_guid.contains_key(&entry.guid) {
            return Err(CatalogueError::GuidExists(entry.guid));
        }
        let guid = entry.guid;
        let lfn = entry.lfn.clone();
        let mut sites = self.orphan_replicas.remove(&guid).unwrap_or_default();
        sites.insert(entry.created_site.clone(), origin_pfn);
        self.replicas.insert(guid, sites);
        self.by_guid.insert(guid, lfn.clone());
        self.entries.insert(lfn.clone(), entry);
        Ok(&self.entries[&lfn])
    }

    pub fn add_replica(
        &mut self,
        guid: Guid,
        site: SiteId,
        pfn: String,
    ) -> Result<Replica, CatalogueError> {
        let sites = self.replicas.get_mut(&guid).ok_or(CatalogueError::UnknownGuid(guid))?;
        match sites.get(&site) {
            Some(existing) if *existing != pfn => Err(CatalogueError::ConflictingPfn(guid, site)),
            _ => {
                sites.insert(site.clone(), pfn.clone());
                Ok(Replica { guid, site, pfn })
            }
        }
    }

    /// Replicated form of [`Catalogue::add_replica`]: an unknown guid is
    /// parked until its file registration is applied.
    pub(crate) fn merge_replica(
        &mut self,
        guid: Guid,
        site: SiteId,
        pfn: String,
    ) -> Result<(), CatalogueError> {
        if self.replicas.contains_key(&guid) {
            return self.add_replica(guid, site, pfn).map(|_| ());
        }
        let parked = self.orphan_replicas.entry(guid).or_default();
        match parked.get(&site) {
            Some(existing) if *existing != pfn => Err(CatalogueError::ConflictingPfn(guid, site)),
            _ => {
                parked.insert(site, pfn);
                Ok(())
            }
        }
    }

    pub fn resolve(&self, lfn: &Lfn) -> Result<(FileEntry, Vec<Replica>), CatalogueError> {
        let entry = self.entries.get(lfn).ok_or_else(|| CatalogueError::NotFound(lfn.clone()))?;
        Ok((entry.clone(), self.replicas_of(&entry.guid)))
    }

    pub fn entry_by_guid(&self, guid: &Guid) -> Option<&FileEntry> {
        self.by_guid.get(guid).and_then(|l| self.entries.get(l))
    }

    pub fn entry(&self, lfn: &Lfn) -> Option<&FileEntry> {
        self.entries.get(lfn)
    }

    /// Replicas sorted by site.
    pub fn replicas_of(&self, guid: &Guid) -> Vec<Replica> {
        self.replicas
            .get(guid)
            .map(|m| {
                m.iter()
                    .map(|(site, pfn)| Replica { guid: *guid, site: site.clone(), pfn: pfn.clone() })
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn has_replica(&self, guid: &Guid, site: &SiteId) -> bool {
        self.replicas.get(guid).is_some_and(|m| m.contains_key(site))
    }

    pub fn entries(&self) -> impl Iterator<Item = &FileEntry> {
        self.entries.values()
    }

    pub fn list(&self, prefix: &Lfn) -> Listing {
        let base = if prefix.is_root() { "/".to_string() } else { format!("{}/", prefix.as_str()) };
        let mut dirs = BTreeSet::new();
        let mut files = BTreeSet::new();
        for lfn in self.entries.range(prefix.clone()..).map(|(k, _)| k) {
            let s = lfn.as_str();
            if !s.starts_with(&base) {
                if s > base.as_str() {
                    break;
                }
                continue;
            }
            let rest = &s[base.len()..];
            match rest.split_once('/') {
                Some((dir, _)) => {
                    dirs.insert(dir.to_string());
                }
                None => {
                    files.insert(rest.to_string());
                }
            }
        }
        Listing { dirs: dirs.into_iter().collect(), files: files.into_iter().collect() }
    }

    /// Every replica references a registered file.
    pub fn check_integrity(&self) -> Result<(), CatalogueError> {
        for guid in self.replicas.keys() {
            if !self.by_guid.contains_key(guid) {
                return Err(CatalogueError::UnknownGuid(*guid));
            }
        }
        Ok(())
    }

    pub fn pending_orphans(&self) -> usize {
        self.orphan_replicas.values().map(BTreeMap::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site(s: &str) -> SiteId {
        SiteId::new(s).unwrap()
    }

    fn entry(lfn: &str, g: u8, origin: &str) -> FileEntry {
        FileEntry {
            lfn: Lfn::new(lfn).unwrap(),
            guid: Guid([g; 16]),
            size: 10,
            checksum: Digest([g; 32]),
            created_site: site(origin),
            created_seq: 1,
        }
    }

    #[test]
    fn lfn_rules() {
        assert!(Lfn::new("/udine/p-ab12/study-1/img-1.mgd").is_ok());
        assert!(Lfn::new("udine").is_err());
        assert!(Lfn::new("/a//b").is_err());
        assert!(Lfn::new("/a/../b").is_err());
        assert!(Lfn::new("/a/./b").is_err());
        assert!(Lfn::new("/a b").is_err());
        assert!(Lfn::new(format!("/{}", "x".repeat(65))).is_err());
        assert!(Lfn::new("/a".repeat(16)).is_ok());
        assert!(Lfn::new("/a".repeat(17)).is_err());
        assert!(Lfn::new("/a/").is_err());
    }

    #[test]
    fn register_then_list() {
        let mut c = Catalogue::new();
        c.register_file(entry("/udine/p-ab12/study-1/img-1.mgd", 1, "udine"), "x".into())
            .unwrap();
        let l = c.list(&Lfn::new("/udine/p-ab12/study-1").unwrap());
        assert_eq!(l.names(), vec!["img-1.mgd"]);
        assert_eq!(c.list(&Lfn::root()).names(), vec!["udine"]);
    }

    #[test]
    fn duplicate_bindings() {
        let mut c = Catalogue::new();
        c.register_file(entry("/a/f", 1, "s"), "p".into()).unwrap();
        assert!(matches!(
            c.register_file(entry("/a/f", 2, "s"), "p".into()),
            Err(CatalogueError::LfnExists(_))
        ));
        assert!(matches!(
            c.register_file(entry("/a/g", 1, "s"), "p".into()),
            Err(CatalogueError::GuidExists(_))
        ));
    }

    #[test]
    fn replicas_sorted_and_idempotent() {
        let mut c = Catalogue::new();
        c.register_file(entry("/a/f", 1, "site-c"), "pc".into()).unwrap();
        let g = Guid([1; 16]);
        c.add_replica(g, site("site-a"), "pa".into()).unwrap();
        c.add_replica(g, site("site-b"), "pb".into()).unwrap();
        let before = c.clone();
        c.add_replica(g, site("site-b"), "pb".into()).unwrap();
        assert_eq!(before, c);
        let (_, reps) = c.resolve(&Lfn::new("/a/f").unwrap()).unwrap();
        let sites: Vec<_> = reps.iter().map(|r| r.site.as_str()).collect();
        assert_eq!(sites, vec!["site-a", "site-b", "site-c"]);
        assert!(matches!(
            c.add_replica(g, site("site-b"), "other".into()),
            Err(CatalogueError::ConflictingPfn(..))
        ));
        assert!(matches!(
            c.add_replica(Guid([9; 16]), site("site-b"), "x".into()),
            Err(CatalogueError::UnknownGuid(_))
        ));
    }

    #[test]
    fn resolve_missing() {
        let c = Catalogue::new();
        assert!(matches!(c.resolve(&Lfn::new("/nope").unwrap()), Err(CatalogueError::NotFound(_))));
    }

    #[test]
    fn list_root_and_leaf() {
        let mut c = Catalogue::new();
        c.register_file(entry("/udine/x/f1", 1, "udine"), "p".into()).unwrap();
        c.register_file(entry("/cambridge/y/f2", 2, "cambridge"), "p".into()).unwrap();
        assert_eq!(c.list(&Lfn::root()).names(), vec!["cambridge", "udine"]);
        assert!(c.list(&Lfn::new("/udine/x/f1").unwrap()).names().is_empty());
        assert!(c.list(&Lfn::new("/nowhere").unwrap()).names().is_empty());
    }

    #[test]
    fn parked_replica_promoted_on_registration() {
        let mut c = Catalogue::new();
        let g = Guid([3; 16]);
        c.merge_replica(g, site("site-b"), "pb".into()).unwrap();
        assert_eq!(c.pending_orphans(), 1);
        assert!(c.check_integrity().is_ok());
        c.register_file(entry("/a/f", 3, "site-a"), "pa".into()).unwrap();
        assert_eq!(c.pending_orphans(), 0);
        assert_eq!(c.replicas_of(&g).len(), 2);
    }
}
