// SPDX-License-Identifier: MIT OR Apache-2.0

//! Artifact fetching against a throwaway local HTTP server.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use channel_core::model_io::fetch::{cache_path, read_manifest};
use channel_core::model_io::{fetch_all, fetch_artifact, HubSource};
use channel_core::ChannelError;
use sha2::{Digest, Sha256};

struct Server {
    base: String,
    hits: Arc<AtomicUsize>,
}

/// Serves `files` under `/<repo>/resolve/<rev>/<name>`; `broken` names get 500.
fn serve(files: HashMap<String, Vec<u8>>, broken: &'static [&'static str]) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut req = Vec::new();
            let mut buf = [0u8; 1024];
            while !req.windows(4).any(|w| w == b"\r\n\r\n") {
                match stream.read(&mut buf) {
                    Ok(0) | Err(_) => break,
                    Ok(n) => req.extend_from_slice(&buf[..n]),
                }
            }
            counter.fetch_add(1, Ordering::SeqCst);
            let line = String::from_utf8_lossy(&req).lines().next().unwrap_or_default().to_string();
            let path = line.split_whitespace().nth(1).unwrap_or_default();
            let name = path.rsplit('/').next().unwrap_or_default();
            let (status, body): (&str, &[u8]) = if broken.contains(&name) {
                ("500 Internal Server Error", b"boom")
            } else {
                match files.get(name) {
                    Some(b) => ("200 OK", b),
                    None => ("404 Not Found", b"missing"),
                }
            };
            let head = format!("HTTP/1.1 {status}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", body.len());
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(body);
        }
    });
    Server { base, hits }
}

fn source(base: &str, files: &[&str]) -> HubSource {
    HubSource::new(base, "org/model", "main", files.iter().map(|s| s.to_string()).collect()).unwrap()
}

fn payload() -> HashMap<String, Vec<u8>> {
    HashMap::from([
        ("weights.bin".to_string(), (0..5000u32).flat_map(|i| i.to_le_bytes()).collect()),
        ("config.json".to_string(), br#"{"n_layer": 1}"#.to_vec()),
    ])
}

#[test]
fn second_fetch_is_served_from_cache() {
    let files = payload();
    let srv = serve(files.clone(), &[]);
    let cache = tempfile::tempdir().unwrap();
    let src = source(&srv.base, &["weights.bin"]);

    let path = fetch_artifact(&src, "weights.bin", cache.path()).unwrap();
    assert_eq!(srv.hits.load(Ordering::SeqCst), 1);
    assert_eq!(std::fs::read(&path).unwrap(), files["weights.bin"]);
    let m = read_manifest(&path).unwrap();
    assert_eq!(m.bytes, 20_000);
    assert_eq!(m.sha256, hex::encode(Sha256::digest(&files["weights.bin"])));
    assert!(m.url.ends_with("/org/model/resolve/main/weights.bin"));

    for _ in 0..3 {
        assert_eq!(fetch_artifact(&src, "weights.bin", cache.path()).unwrap(), path);
    }
    assert_eq!(srv.hits.load(Ordering::SeqCst), 1, "cache hits must not touch the network");
}

#[test]
fn corrupted_entry_is_refetched() {
    let files = payload();
    let srv = serve(files.clone(), &[]);
    let cache = tempfile::tempdir().unwrap();
    let src = source(&srv.base, &["weights.bin"]);
    let path = fetch_artifact(&src, "weights.bin", cache.path()).unwrap();
    std::fs::write(&path, b"truncated").unwrap();

    let again = fetch_artifact(&src, "weights.bin", cache.path()).unwrap();
    assert_eq!(srv.hits.load(Ordering::SeqCst), 2);
    assert_eq!(std::fs::read(again).unwrap(), files["weights.bin"]);
}

#[test]
fn pinned_checksum_mismatch_leaves_no_entry() {
    let srv = serve(payload(), &[]);
    let cache = tempfile::tempdir().unwrap();
    let mut src = source(&srv.base, &["weights.bin"]);
    src.checksums.insert("weights.bin".into(), "00".repeat(32));
    match fetch_artifact(&src, "weights.bin", cache.path()) {
        Err(ChannelError::ChecksumMismatch { file, .. }) => assert_eq!(file, "weights.bin"),
        other => panic!("expected checksum mismatch, got {other:?}"),
    }
    assert!(!cache_path(&src, "weights.bin", cache.path()).exists());
}

#[test]
fn missing_file_is_named() {
    let srv = serve(payload(), &[]);
    let cache = tempfile::tempdir().unwrap();
    let src = source(&srv.base, &["nope.safetensors"]);
    let err = fetch_artifact(&src, "nope.safetensors", cache.path()).unwrap_err();
    assert!(matches!(&err, ChannelError::NotFound { file, .. } if file == "nope.safetensors"));
    assert!(err.to_string().contains("nope.safetensors"));
    assert!(!err.is_retryable());
}

#[test]
fn server_errors_are_retried_then_reported() {
    let srv = serve(payload(), &["weights.bin"]);
    let cache = tempfile::tempdir().unwrap();
    let src = source(&srv.base, &["weights.bin"]);
    let err = fetch_artifact(&src, "weights.bin", cache.path()).unwrap_err();
    assert!(err.is_retryable(), "{err}");
    assert!(srv.hits.load(Ordering::SeqCst) > 1, "no retry happened");
    assert!(!cache_path(&src, "weights.bin", cache.path()).exists());
}

#[test]
fn fetch_all_returns_the_shared_directory() {
    let srv = serve(payload(), &[]);
    let cache = tempfile::tempdir().unwrap();
    let src = source(&srv.base, &["weights.bin", "config.json"]);
    let dir = fetch_all(&src, cache.path()).unwrap();
    assert!(dir.join("weights.bin").exists() && dir.join("config.json").exists());
    assert_eq!(srv.hits.load(Ordering::SeqCst), 2);
}
