//! Content-addressed store of agent responses.
//!
//! Entries live at `<dir>/<hex[0..2]>/<hex[2..4]>/<hex>.json`. Writes go to a
//! temporary file in the same directory and are renamed into place.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const CACHE_DIR_ENV: &str = "QASK_CACHE_DIR";

/// Everything that determines an agent response.
#[derive(Debug, Clone, Copy)]
pub struct KeyParts<'a> {
    pub agent_id: &'a str,
    pub model: &'a str,
    pub temperature: f64,
    pub template_version: &'a str,
    pub prompt: &'a str,
    pub image_digest: Option<&'a [u8; 32]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey([u8; 32]);

impl CacheKey {
    /// sha256 over length-prefixed fields, so no two field splits collide.
    pub fn compute(p: &KeyParts<'_>) -> CacheKey {
        let mut h = Sha256::new();
        let mut field = |bytes: &[u8]| {
            h.update((bytes.len() as u64).to_be_bytes());
            h.update(bytes);
        };
        field(p.agent_id.as_bytes());
        field(p.model.as_bytes());
        field(&p.temperature.to_bits().to_be_bytes());
        field(p.template_version.as_bytes());
        field(p.prompt.as_bytes());
        match p.image_digest {
            Some(d) => field(d),
            None => field(&[]),
        }
        CacheKey(h.finalize().into())
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.hex())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub agent_id: String,
    pub model: String,
    /// Request body as sent, with image payloads replaced by their digests.
    pub request: serde_json::Value,
    pub response: String,
    pub latency_us: u64,
    pub created_unix: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Read hits, write misses.
    #[default]
    ReadWrite,
    /// Serve hits only; a miss is an error.
    Replay,
    Off,
}

impl FromStr for CacheMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "read_write" | "rw" => Ok(CacheMode::ReadWrite),
            "replay" => Ok(CacheMode::Replay),
            "off" => Ok(CacheMode::Off),
            _ => Err(format!("unknown cache mode `{s}` (read_write, replay, off)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache miss in replay mode for key {0}")]
    ReplayMiss(String),
    #[error("cache write failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug)]
pub struct Cache {
    dir: PathBuf,
    mode: CacheMode,
    hits: AtomicUsize,
    misses: AtomicUsize,
    in_flight: Mutex<HashSet<CacheKey>>,
    landed: Condvar,
}

/// Exclusive claim on one key; see [`Cache::claim`].
pub struct Claim<'a> {
    cache: &'a Cache,
    key: CacheKey,
}

impl Drop for Claim<'_> {
    fn drop(&mut self) {
        self.cache.in_flight.lock().unwrap().remove(&self.key);
        self.cache.landed.notify_all();
    }
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl Cache {
    pub fn new(dir: impl Into<PathBuf>, mode: CacheMode) -> Cache {
        Cache {
            dir: dir.into(),
            mode,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
            in_flight: Mutex::default(),
            landed: Condvar::new(),
        }
    }

    pub fn disabled() -> Cache {
        Cache::new(PathBuf::new(), CacheMode::Off)
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    /// Blocks while another thread holds `key`. Holding the claim across
    /// get, request and put makes concurrent identical requests behave like
    /// sequential ones: one goes out, the rest read its entry.
    pub fn claim(&self, key: &CacheKey) -> Option<Claim<'_>> {
        if self.mode == CacheMode::Off {
            return None;
        }
        let mut held = self.in_flight.lock().unwrap();
        while held.contains(key) {
            held = self.landed.wait(held).unwrap();
        }
        held.insert(*key);
        Some(Claim { cache: self, key: *key })
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        let h = key.hex();
        self.dir.join(&h[0..2]).join(&h[2..4]).join(format!("{h}.json"))
    }

    /// A corrupt or unreadable entry counts as a miss.
    pub fn get(&self, key: &CacheKey) -> Result<Option<CacheEntry>, CacheError> {
        if self.mode == CacheMode::Off {
            return Ok(None);
        }
        let path = self.path_for(key);
        let entry = match fs::read(&path) {
            Ok(bytes) => match serde_json::from_slice::<CacheEntry>(&bytes) {
                Ok(e) if e.key == key.hex() => Some(e),
                Ok(_) => {
                    log::warn!("cache entry {} has a mismatched key, ignoring", path.display());
                    None
                }
                Err(e) => {
                    log::warn!("corrupt cache entry {}: {e}", path.display());
                    None
                }
            },
            Err(_) => None,
        };
        match entry {
            Some(e) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Ok(Some(e))
            }
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                if self.mode == CacheMode::Replay {
                    Err(CacheError::ReplayMiss(key.hex()))
                } else {
                    Ok(None)
                }
            }
        }
    }

    pub fn put(&self, key: &CacheKey, entry: &CacheEntry) -> Result<(), CacheError> {
        if self.mode != CacheMode::ReadWrite {
            return Ok(());
        }
        let path = self.path_for(key);
        let parent = path.parent().expect("cache paths have a parent");
        fs::create_dir_all(parent)?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
        tmp.write_all(&serde_json::to_vec_pretty(entry).map_err(std::io::Error::other)?)?;
        tmp.as_file().sync_all()?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parts(prompt: &str) -> KeyParts<'_> {
        KeyParts {
            agent_id: "q",
            model: "m",
            temperature: 0.0,
            template_version: "v1",
            prompt,
            image_digest: None,
        }
    }

    fn entry(key: &CacheKey, response: &str) -> CacheEntry {
        CacheEntry {
            key: key.hex(),
            agent_id: "q".into(),
            model: "m".into(),
            request: serde_json::json!({"prompt": "p"}),
            response: response.into(),
            latency_us: 1234,
            created_unix: 0,
        }
    }

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path(), CacheMode::ReadWrite);
        let k = CacheKey::compute(&parts("hello"));
        assert!(cache.get(&k).unwrap().is_none());
        cache.put(&k, &entry(&k, "<score>0</score>")).unwrap();
        assert_eq!(cache.get(&k).unwrap().unwrap(), entry(&k, "<score>0</score>"));
        let h = k.hex();
        assert!(dir.path().join(&h[0..2]).join(&h[2..4]).join(format!("{h}.json")).exists());
    }

    #[test]
    fn keys_separate_inputs() {
        let base = CacheKey::compute(&parts("hello"));
        assert_ne!(base, CacheKey::compute(&parts("hellp")));
        assert_ne!(base, CacheKey::compute(&KeyParts { temperature: 0.1, ..parts("hello") }));
        assert_ne!(base, CacheKey::compute(&KeyParts { template_version: "v2", ..parts("hello") }));
        let d = [7u8; 32];
        assert_ne!(base, CacheKey::compute(&KeyParts { image_digest: Some(&d), ..parts("hello") }));
        // moving a byte between fields changes the key
        let a = CacheKey::compute(&KeyParts { agent_id: "ab", model: "c", ..parts("x") });
        let b = CacheKey::compute(&KeyParts { agent_id: "a", model: "bc", ..parts("x") });
        assert_ne!(a, b);
        assert_eq!(base, CacheKey::compute(&parts("hello")));
    }

    #[test]
    fn corrupt_entry_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path(), CacheMode::ReadWrite);
        let k = CacheKey::compute(&parts("x"));
        let p = cache.path_for(&k);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(&p, b"{ truncated").unwrap();
        assert!(cache.get(&k).unwrap().is_none());
        cache.put(&k, &entry(&k, "ok")).unwrap();
        assert_eq!(cache.get(&k).unwrap().unwrap().response, "ok");
    }

    #[test]
    fn replay_refuses_misses_and_off_ignores() {
        let dir = tempfile::tempdir().unwrap();
        let k = CacheKey::compute(&parts("x"));
        let replay = Cache::new(dir.path(), CacheMode::Replay);
        assert!(matches!(replay.get(&k), Err(CacheError::ReplayMiss(_))));
        replay.put(&k, &entry(&k, "ok")).unwrap();
        assert!(!replay.path_for(&k).exists());
        Cache::new(dir.path(), CacheMode::ReadWrite).put(&k, &entry(&k, "ok")).unwrap();
        assert_eq!(replay.get(&k).unwrap().unwrap().response, "ok");
        assert!(Cache::new(dir.path(), CacheMode::Off).get(&k).unwrap().is_none());
    }
}
