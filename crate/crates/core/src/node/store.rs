//! On-disk layout of a gridbox data directory.
//!
//! ```text
//! config.json
//! log/changes.log
//! store/<g0g1>/<g2g3>/<guid-hex>.mgd
//! reid/reid.log
//! snapshots/
//! ```

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::NodeError;
use crate::ids::Guid;

#[derive(Clone, Debug)]
pub struct DataDir {
    root: PathBuf,
    durable: bool,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>, durable: bool) -> Self {
        DataDir { root: root.into(), durable }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn durable(&self) -> bool {
        self.durable
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("log").join("changes.log")
    }

    pub fn reid_path(&self) -> PathBuf {
        self.root.join("reid").join("reid.log")
    }

    pub fn store_dir(&self) -> PathBuf {
        self.root.join("store")
    }

    /// Store-relative physical name recorded as the replica PFN.
    pub fn pfn(guid: &Guid) -> String {
        let h = guid.to_hex();
        format!("store/{}/{}/{}.mgd", &h[0..2], &h[2..4], h)
    }

    pub fn file_path(&self, guid: &Guid) -> PathBuf {
        self.root.join(Self::pfn(guid))
    }

    /// Creates the layout in an empty or absent directory.
    pub fn create(&self) -> Result<(), NodeError> {
        if self.root.exists() {
            let mut it = fs::read_dir(&self.root).map_err(storage)?;
            if it.next().is_some() {
                return Err(NodeError::DirNotEmpty(self.root.clone()));
            }
        }
        for d in ["log", "store", "reid", "snapshots"] {
            fs::create_dir_all(self.root.join(d)).map_err(storage)?;
        }
        crate::sync::LogFile::create(&self.log_path(), self.durable).map_err(|e| NodeError::Storage(e.to_string()))?;
        restricted_open(&self.reid_path()).map_err(storage)?;
        Ok(())
    }

    /// Writes a store file through a temp name and a rename.
    pub fn write_file(&self, guid: &Guid, bytes: &[u8]) -> Result<PathBuf, NodeError> {
        let path = self.file_path(guid);
        let dir = path.parent().expect("store path has a parent");
        fs::create_dir_all(dir).map_err(storage)?;
        let tmp = dir.join(format!(".tmp-{}", guid.to_hex()));
        {
            let mut f = File::create(&tmp).map_err(storage)?;
            f.write_all(bytes).map_err(storage)?;
            if self.durable {
                f.sync_all().map_err(storage)?;
            }
        }
        fs::rename(&tmp, &path).map_err(storage)?;
        if self.durable {
            if let Ok(d) = File::open(dir) {
                let _ = d.sync_all();
            }
        }
        Ok(path)
    }

    pub fn read_file(&self, guid: &Guid) -> Result<Vec<u8>, NodeError> {
        fs::read(self.file_path(guid)).map_err(storage)
    }

    pub fn remove_file(&self, guid: &Guid) {
        let _ = fs::remove_file(self.file_path(guid));
    }

    /// Deletes store files (and temp files) not in `keep`. Returns the number
    /// removed.
    pub fn sweep(&self, keep: &BTreeSet<Guid>) -> Result<usize, NodeError> {
        let mut removed = 0;
        let store = self.store_dir();
        if !store.exists() {
            return Ok(0);
        }
        for l1 in fs::read_dir(&store).map_err(storage)? {
            let l1 = l1.map_err(storage)?.path();
            if !l1.is_dir() {
                continue;
            }
            for l2 in fs::read_dir(&l1).map_err(storage)? {
                let l2 = l2.map_err(storage)?.path();
                if !l2.is_dir() {
                    continue;
                }
                for f in fs::read_dir(&l2).map_err(storage)? {
                    let f = f.map_err(storage)?.path();
                    let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                    let known = name
                        .strip_suffix(".mgd")
                        .and_then(|h| Guid::from_hex(h).ok())
                        .is_some_and(|g| keep.contains(&g));
                    if !known {
                        log::info!("sweeping orphan store file {}", f.display());
                        fs::remove_file(&f).map_err(storage)?;
                        removed += 1;
                    }
                }
            }
        }
        Ok(removed)
    }

    /// Appends one re-identification pair. The file never leaves this site.
    pub fn append_reid(&self, pseudonym: &str, original: &str) -> Result<(), NodeError> {
        let mut f = restricted_open(&self.reid_path()).map_err(storage)?;
        writeln!(f, "{pseudonym}\t{original}").map_err(storage)?;
        if self.durable {
            f.sync_data().map_err(storage)?;
        }
        Ok(())
    }
}

fn restricted_open(path: &Path) -> std::io::Result<File> {
    let mut o = OpenOptions::new();
    o.create(true).append(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        o.mode(0o600);
    }
    o.open(path)
}

fn storage(e: std::io::Error) -> NodeError {
    NodeError::Storage(e.to_string())
}
