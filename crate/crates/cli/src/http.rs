//! Static file server for the console's built assets.

use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use anyhow::{anyhow, Result};
use tiny_http::{Header, Response, Server};

/// Served when no asset directory is given, so the endpoint is never empty.
const PLACEHOLDER: &str = "<!doctype html>\n<title>gello</title>\n<p>No console assets configured. Start the bridge with <code>--assets DIR</code>.</p>\n";

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("ico") => "image/x-icon",
        Some("wasm") => "application/wasm",
        _ => "application/octet-stream",
    }
}

/// Maps a request URL onto a file below `root`, refusing anything that
/// would climb out of it.
pub fn resolve(root: &Path, url: &str) -> Option<PathBuf> {
    let path = url.split(['?', '#']).next().unwrap_or("");
    let mut out = root.to_path_buf();
    for c in Path::new(path.trim_start_matches('/')).components() {
        match c {
            Component::Normal(part) => out.push(part),
            Component::CurDir => {}
            _ => return None,
        }
    }
    if out.is_dir() {
        out.push("index.html");
    }
    Some(out)
}

pub struct StaticServer {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StaticServer {
    pub fn start(addr: &str, root: Option<PathBuf>) -> Result<Self> {
        let server = Server::http(addr).map_err(|e| anyhow!("http {addr}: {e}"))?;
        let local = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| anyhow!("http {addr}: not an IP listener"))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = thread::spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                match server.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(req)) => {
                        let resp = respond(root.as_deref(), req.url());
                        if let Err(e) = req.respond(resp) {
                            log::debug!("http write failed: {e}");
                        }
                    }
                    Ok(None) => {}
                    Err(e) => {
                        log::warn!("http: {e}");
                        break;
                    }
                }
            }
        });
        log::info!("serving console assets on http://{local}");
        Ok(StaticServer {
            stop,
            handle: Some(handle),
        })
    }
}

impl Drop for StaticServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn header(value: &str) -> Header {
    Header::from_bytes("Content-Type", value).expect("static header")
}

fn respond(root: Option<&Path>, url: &str) -> Response<std::io::Cursor<Vec<u8>>> {
    let Some(root) = root else {
        return Response::from_data(PLACEHOLDER.as_bytes().to_vec()).with_header(header("text/html; charset=utf-8"));
    };
    match resolve(root, url) {
        None => Response::from_data(b"forbidden".to_vec()).with_status_code(403),
        Some(path) => match std::fs::read(&path) {
            Ok(bytes) => Response::from_data(bytes).with_header(header(content_type(&path))),
            Err(_) => Response::from_data(b"not found".to_vec()).with_status_code(404),
        },
    }
}
