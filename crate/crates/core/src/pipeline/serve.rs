//! Read-only HTTP API over a project's analysis outputs.

use std::path::{Component, Path, PathBuf};

use crate::error::{Error, Result};
use crate::orchestrator::MANIFEST_FILE;

/// Default knowledge base of evaluation methods and criteria for the guide.
pub const GUIDE_KB: &str = include_str!("../../assets/guide_kb.json");

const INDEX: &str = "<!doctype html>\n<title>metaeval</title>\n<ul>\n\
<li><a href=\"/api/manifest\">/api/manifest</a></li>\n\
<li><a href=\"/api/results\">/api/results</a></li>\n\
<li><a href=\"/api/meta\">/api/meta</a></li>\n\
<li><a href=\"/api/guide/kb\">/api/guide/kb</a></li>\n</ul>\n";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl Response {
    fn json(status: u16, body: Vec<u8>) -> Self {
        Self { status, content_type: "application/json", body }
    }

    fn error(status: u16, message: &str) -> Self {
        Self::json(status, serde_json::json!({ "error": message }).to_string().into_bytes())
    }
}

/// Serves the manifest, analysis tables, guide knowledge base and,
/// optionally, a directory of static files. Never writes.
#[derive(Debug, Clone)]
pub struct ApiServer {
    project_root: PathBuf,
    static_dir: Option<PathBuf>,
}

impl ApiServer {
    pub fn new(project_root: impl Into<PathBuf>, static_dir: Option<PathBuf>) -> Self {
        Self { project_root: project_root.into(), static_dir }
    }

    pub fn respond(&self, method: &str, url: &str) -> Response {
        if method != "GET" && method != "HEAD" {
            return Response::error(405, "read-only API: only GET is supported");
        }
        let path = url.split(['?', '#']).next().unwrap_or("/");
        match path {
            "/api/manifest" => self.file(&self.project_root.join(MANIFEST_FILE), "no project manifest"),
            "/api/results" => {
                self.file(&self.project_root.join("analysis/results.json"), "no results; run `analyse` first")
            }
            "/api/meta" => {
                self.file(&self.project_root.join("analysis/meta_eval.json"), "no meta-evaluation; run `meta` first")
            }
            "/api/guide/kb" => Response::json(200, GUIDE_KB.as_bytes().to_vec()),
            p if p.starts_with("/api/") => Response::error(404, "unknown endpoint"),
            p => self.static_file(p),
        }
    }

    fn file(&self, path: &Path, missing: &str) -> Response {
        match std::fs::read(path) {
            Ok(body) => Response::json(200, body),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Response::error(404, missing),
            Err(e) => Response::error(500, &e.to_string()),
        }
    }

    fn static_file(&self, url_path: &str) -> Response {
        let Some(dir) = &self.static_dir else {
            return if url_path == "/" {
                Response { status: 200, content_type: "text/html; charset=utf-8", body: INDEX.as_bytes().to_vec() }
            } else {
                Response::error(404, "not found")
            };
        };
        let rel = Path::new(url_path.trim_start_matches('/'));
        if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Response::error(404, "not found");
        }
        let mut path = dir.join(rel);
        if path.is_dir() {
            path = path.join("index.html");
        }
        match std::fs::read(&path) {
            Ok(body) => Response { status: 200, content_type: content_type(&path), body },
            Err(_) => Response::error(404, "not found"),
        }
    }

    pub fn bind(addr: &str) -> Result<tiny_http::Server> {
        tiny_http::Server::http(addr).map_err(|e| Error::Io {
            path: PathBuf::from(addr),
            source: std::io::Error::new(std::io::ErrorKind::AddrNotAvailable, e.to_string()),
        })
    }

    /// Handles requests until the server is unblocked or dropped.
    pub fn run(&self, server: &tiny_http::Server) {
        for request in server.incoming_requests() {
            let r = self.respond(request.method().as_str(), request.url());
            log::debug!("{} {} -> {}", request.method(), request.url(), r.status);
            let header = tiny_http::Header::from_bytes("Content-Type", r.content_type).expect("static header is valid");
            let response = tiny_http::Response::from_data(r.body).with_status_code(r.status).with_header(header);
            if let Err(e) = request.respond(response) {
                log::warn!("failed to send response: {e}");
            }
        }
    }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}
