// SPDX-License-Identifier: MIT OR Apache-2.0

//! HTTP artifact fetching with an on-disk cache.
//!
//! Cache layout: `<cache>/<repo_id>/<revision>/<file>` plus a sibling
//! `<file>.manifest.json` recording url, sha256, byte length and retrieval
//! time. A file without a manifest is treated as absent.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ChannelError, Result};

/// Overrides the default cache directory.
pub const CACHE_DIR_ENV: &str = "CHANNELS_CACHE_DIR";
/// When set to a non-empty value other than `0`, networking is disabled.
pub const OFFLINE_ENV: &str = "CHANNELS_OFFLINE";

const RETRIES: usize = 3;
const LOCK_WAIT: Duration = Duration::from_secs(600);

/// Where an artifact set lives remotely.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HubSource {
    pub base_url: String,
    pub repo_id: String,
    pub revision: String,
    pub files: Vec<String>,
    /// Optional pinned sha256 digests (lowercase hex) per file.
    #[serde(default)]
    pub checksums: BTreeMap<String, String>,
}

impl HubSource {
    pub fn new(
        base_url: impl Into<String>,
        repo_id: impl Into<String>,
        revision: impl Into<String>,
        files: Vec<String>,
    ) -> Result<Self> {
        let source = Self {
            base_url: base_url.into(),
            repo_id: repo_id.into(),
            revision: revision.into(),
            files,
            checksums: BTreeMap::new(),
        };
        source.validate()?;
        Ok(source)
    }

    /// The reference GPT-2 small checkpoint and tokenizer assets.
    pub fn gpt2_small() -> Self {
        Self {
            base_url: "https://huggingface.co".into(),
            repo_id: "openai-community/gpt2".into(),
            revision: "main".into(),
            files: vec![
                "model.safetensors".into(),
                "config.json".into(),
                "vocab.json".into(),
                "merges.txt".into(),
            ],
            checksums: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scheme_ok = self.base_url.starts_with("http://") || self.base_url.starts_with("https://");
        let host = self.base_url.split("://").nth(1).unwrap_or("");
        if !scheme_ok || host.is_empty() {
            return Err(ChannelError::InvalidSource(format!(
                "base_url {:?} is not an absolute http(s) URL",
                self.base_url
            )));
        }
        if self.files.is_empty() {
            return Err(ChannelError::InvalidSource("file list is empty".into()));
        }
        Ok(())
    }

    pub fn url_for(&self, filename: &str) -> String {
        format!(
            "{}/{}/resolve/{}/{}",
            self.base_url.trim_end_matches('/'),
            self.repo_id,
            self.revision,
            filename
        )
    }
}

/// Per-artifact cache record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub url: String,
    pub sha256: String,
    pub bytes: u64,
    pub retrieved_at: String,
}

pub fn default_cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_DIR_ENV) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("channels")
}

pub fn offline_mode() -> bool {
    std::env::var(OFFLINE_ENV)
        .map(|v| !v.is_empty() && v != "0")
        .unwrap_or(false)
}

/// Path an artifact occupies in the cache, whether or not it is present.
pub fn cache_path(source: &HubSource, filename: &str, cache_dir: &Path) -> PathBuf {
    cache_dir
        .join(source.repo_id.replace('/', "--"))
        .join(&source.revision)
        .join(filename)
}

fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

/// Returns the cached path if a complete entry with a manifest exists.
pub fn cached_artifact(source: &HubSource, filename: &str, cache_dir: &Path) -> Option<PathBuf> {
    let path = cache_path(source, filename, cache_dir);
    let manifest = read_manifest(&path).ok()?;
    let len = fs::metadata(&path).ok()?.len();
    if len != manifest.bytes {
        return None;
    }
    if let Some(pinned) = source.checksums.get(filename) {
        if !pinned.eq_ignore_ascii_case(&manifest.sha256) {
            return None;
        }
    }
    Some(path)
}

pub fn read_manifest(artifact: &Path) -> Result<CacheManifest> {
    let mpath = manifest_path(artifact);
    let text = fs::read_to_string(&mpath).map_err(|e| ChannelError::io(&mpath, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Fetch `filename` from `source` into `cache_dir`, returning the local path.
/// Cache hits issue no network requests.
pub fn fetch_artifact(source: &HubSource, filename: &str, cache_dir: &Path) -> Result<PathBuf> {
    fetch_with(source, filename, cache_dir, offline_mode())
}

pub(crate) fn fetch_with(
    source: &HubSource,
    filename: &str,
    cache_dir: &Path,
    offline: bool,
) -> Result<PathBuf> {
    source.validate()?;
    if let Some(hit) = cached_artifact(source, filename, cache_dir) {
        return Ok(hit);
    }
    if offline {
        return Err(ChannelError::Offline {
            file: filename.to_string(),
        });
    }

    let target = cache_path(source, filename, cache_dir);
    let dir = target.parent().expect("cache path has a parent").to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| ChannelError::io(&dir, e))?;

    let _lock = CacheLock::acquire(&target)?;
    // another writer may have finished while we waited
    if let Some(hit) = cached_artifact(source, filename, cache_dir) {
        return Ok(hit);
    }

    let url = source.url_for(filename);
    let mut last_err = None;
    for attempt in 0..RETRIES {
        match download(&url, filename, &target, source.checksums.get(filename)) {
            Ok(path) => return Ok(path),
            Err(e) if e.is_retryable() && attempt + 1 < RETRIES => {
                tracing::warn!("retrying {url} after: {e}");
                std::thread::sleep(Duration::from_millis(200 << attempt));
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| ChannelError::Network {
        url,
        message: "retries exhausted".into(),
    }))
}

fn download(url: &str, filename: &str, target: &Path, pinned: Option<&String>) -> Result<PathBuf> {
    let response = match ureq::get(url).call() {
        Ok(r) => r,
        Err(ureq::Error::Status(404, _)) => {
            return Err(ChannelError::NotFound {
                file: filename.to_string(),
                url: url.to_string(),
            })
        }
        Err(ureq::Error::Status(code, _)) if code < 500 => {
            return Err(ChannelError::InvalidSource(format!("{url} returned HTTP {code}")))
        }
        Err(e) => {
            return Err(ChannelError::Network {
                url: url.to_string(),
                message: e.to_string(),
            })
        }
    };
    let declared: Option<u64> = response
        .header("Content-Length")
        .and_then(|v| v.parse().ok());

    let tmp = target.with_extension("partial");
    let result = (|| -> Result<(String, u64)> {
        let mut out = File::create(&tmp).map_err(|e| ChannelError::io(&tmp, e))?;
        let mut reader = response.into_reader();
        let mut hasher = Sha256::new();
        let mut buf = vec![0u8; 1 << 16];
        let mut total = 0u64;
        loop {
            let n = reader.read(&mut buf).map_err(|e| ChannelError::Network {
                url: url.to_string(),
                message: e.to_string(),
            })?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
            out.write_all(&buf[..n]).map_err(|e| ChannelError::io(&tmp, e))?;
            total += n as u64;
        }
        out.sync_all().map_err(|e| ChannelError::io(&tmp, e))?;
        Ok((hex::encode(hasher.finalize()), total))
    })();

    let (sha, bytes) = match result {
        Ok(v) => v,
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            return Err(e);
        }
    };
    if let Some(expected) = declared {
        if expected != bytes {
            let _ = fs::remove_file(&tmp);
            return Err(ChannelError::Network {
                url: url.to_string(),
                message: format!("received {bytes} of {expected} declared bytes"),
            });
        }
    }
    if let Some(expected) = pinned {
        if !expected.eq_ignore_ascii_case(&sha) {
            let _ = fs::remove_file(&tmp);
            purge(target);
            return Err(ChannelError::ChecksumMismatch {
                file: filename.to_string(),
                expected: expected.clone(),
                actual: sha,
            });
        }
    }

    fs::rename(&tmp, target).map_err(|e| ChannelError::io(target, e))?;
    let manifest = CacheManifest {
        url: url.to_string(),
        sha256: sha,
        bytes,
        retrieved_at: chrono::Utc::now().to_rfc3339(),
    };
    write_atomic(&manifest_path(target), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(target.to_path_buf())
}

fn purge(target: &Path) {
    let _ = fs::remove_file(target);
    let _ = fs::remove_file(manifest_path(target));
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| ChannelError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| ChannelError::io(path, e))
}

/// Single-writer lock: an exclusively created `<file>.lock`.
struct CacheLock {
    path: PathBuf,
}

impl CacheLock {
    fn acquire(target: &Path) -> Result<Self> {
        let mut name = target.file_name().unwrap_or_default().to_os_string();
        name.push(".lock");
        let path = target.with_file_name(name);
        let start = Instant::now();
        loop {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if start.elapsed() > LOCK_WAIT {
                        return Err(ChannelError::io(
                            &path,
                            std::io::Error::new(
                                std::io::ErrorKind::TimedOut,
                                "timed out waiting for cache lock",
                            ),
                        ));
                    }
                    std::thread::sleep(Duration::from_millis(100));
                }
                Err(e) => return Err(ChannelError::io(&path, e)),
            }
        }
    }
}

impl Drop for CacheLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
