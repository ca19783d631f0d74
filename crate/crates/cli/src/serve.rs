//! Minimal static HTTP/1.1 server for viewers: the bundle at `/bundle.cpsl`,
//! its manifest at `/manifest.json`, and optionally a directory of files.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Args;
use cpsl_core::bundle;

#[derive(Args)]
pub struct ServeArgs {
    bundle: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Directory served for every other path (a viewer build, for instance).
    #[arg(long)]
    root: Option<PathBuf>,
    /// Exit after answering this many requests.
    #[arg(long)]
    max_requests: Option<usize>,
}

struct Site {
    bundle: Vec<u8>,
    manifest: Vec<u8>,
    root: Option<PathBuf>,
}

struct Response {
    status: &'static str,
    content_type: &'static str,
    body: Vec<u8>,
    extra: Vec<(&'static str, String)>,
}

impl Response {
    fn new(status: &'static str, content_type: &'static str, body: Vec<u8>) -> Self {
        Self {
            status,
            content_type,
            body,
            extra: Vec::new(),
        }
    }

    fn text(status: &'static str, msg: &str) -> Self {
        Self::new(status, "text/plain; charset=utf-8", format!("{msg}\n").into_bytes())
    }
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let bytes = std::fs::read(&a.bundle).with_context(|| format!("reading {}", a.bundle.display()))?;
    // Refuse to publish a bundle that would not decode.
    let decoded = bundle::unpack(&bytes)?;
    let site = Arc::new(Site {
        manifest: decoded.manifest.to_json()?,
        bundle: bytes,
        root: a.root,
    });
    let listener = TcpListener::bind(&a.addr).with_context(|| format!("binding {}", a.addr))?;
    println!("serving http://{}/bundle.cpsl", listener.local_addr()?);
    std::io::stdout().flush()?;
    let mut handled = 0usize;
    for stream in listener.incoming() {
        let Ok(stream) = stream else { continue };
        if a.max_requests.is_some() {
            // Sequential so the count is exact.
            let _ = handle(stream, &site);
        } else {
            let site = Arc::clone(&site);
            std::thread::spawn(move || handle(stream, &site));
        }
        handled += 1;
        if a.max_requests.is_some_and(|m| handled >= m) {
            break;
        }
    }
    Ok(())
}

fn handle(stream: TcpStream, site: &Site) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let mut range = None;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h)? == 0 || h.trim().is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.trim().eq_ignore_ascii_case("range") {
                range = Some(v.trim().to_string());
            }
        }
    }
    let mut parts = line.split_whitespace();
    let (method, target) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
    let resp = respond(site, method, target, range.as_deref());
    write_response(stream, &resp, method == "HEAD")
}

fn respond(site: &Site, method: &str, target: &str, range: Option<&str>) -> Response {
    match method {
        "OPTIONS" => return Response::new("204 No Content", "text/plain", Vec::new()),
        "GET" | "HEAD" => {}
        _ => return Response::text("405 Method Not Allowed", "only GET, HEAD and OPTIONS are supported"),
    }
    let path = target.split(['?', '#']).next().unwrap_or("/");
    match path {
        "/bundle.cpsl" => with_range(Response::new("200 OK", "application/octet-stream", site.bundle.clone()), range),
        "/manifest.json" => Response::new("200 OK", "application/json", site.manifest.clone()),
        _ => match &site.root {
            Some(root) => static_file(root, path),
            None => Response::text("404 Not Found", "not found"),
        },
    }
}

fn with_range(mut r: Response, range: Option<&str>) -> Response {
    r.extra.push(("Accept-Ranges", "bytes".into()));
    let Some(spec) = range.and_then(|v| v.strip_prefix("bytes=")) else {
        return r;
    };
    let len = r.body.len();
    let parsed = spec.split_once('-').and_then(|(a, b)| match (a.trim(), b.trim()) {
        ("", n) => n.parse::<usize>().ok().filter(|&n| n > 0).map(|n| (len.saturating_sub(n), len.saturating_sub(1))),
        (s, "") => s.parse().ok().map(|s| (s, len.saturating_sub(1))),
        (s, e) => Some((s.parse().ok()?, e.parse::<usize>().ok()?.min(len.saturating_sub(1)))),
    });
    match parsed {
        Some((s, e)) if s <= e && e < len => {
            let mut part = Response::new("206 Partial Content", r.content_type, r.body[s..=e].to_vec());
            part.extra = r.extra;
            part.extra.push(("Content-Range", format!("bytes {s}-{e}/{len}")));
            part
        }
        _ => {
            let mut bad = Response::text("416 Range Not Satisfiable", "bad range");
            bad.extra.push(("Content-Range", format!("bytes */{len}")));
            bad
        }
    }
}

fn content_type(p: &Path) -> &'static str {
    match p.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("wasm") => "application/wasm",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

fn static_file(root: &Path, path: &str) -> Response {
    let rel = Path::new(path.trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Response::text("404 Not Found", "not found");
    }
    let mut full = root.join(rel);
    if full.is_dir() {
        full.push("index.html");
    }
    match std::fs::read(&full) {
        Ok(body) => Response::new("200 OK", content_type(&full), body),
        Err(_) => Response::text("404 Not Found", "not found"),
    }
}

fn write_response(mut stream: TcpStream, r: &Response, head_only: bool) -> std::io::Result<()> {
    let mut head = format!(
        "HTTP/1.1 {}\r\nContent-Type: {}\r\nContent-Length: {}\r\nAccess-Control-Allow-Origin: *\r\nAccess-Control-Allow-Methods: GET, HEAD, OPTIONS\r\nAccess-Control-Allow-Headers: Range\r\nAccess-Control-Expose-Headers: Content-Length, Content-Range, Accept-Ranges\r\nConnection: close\r\n",
        r.status,
        r.content_type,
        r.body.len()
    );
    for (k, v) in &r.extra {
        head += &format!("{k}: {v}\r\n");
    }
    head += "\r\n";
    stream.write_all(head.as_bytes())?;
    if !head_only {
        stream.write_all(&r.body)?;
    }
    stream.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site() -> Site {
        Site {
            bundle: (0u8..100).collect(),
            manifest: b"{}".to_vec(),
            root: None,
        }
    }

    #[test]
    fn ranges() {
        let s = site();
        let r = respond(&s, "GET", "/bundle.cpsl", Some("bytes=10-19"));
        assert_eq!(r.status, "206 Partial Content");
        assert_eq!(r.body, (10u8..20).collect::<Vec<_>>());
        let r = respond(&s, "GET", "/bundle.cpsl", Some("bytes=-5"));
        assert_eq!(r.body, (95u8..100).collect::<Vec<_>>());
        let r = respond(&s, "GET", "/bundle.cpsl", Some("bytes=90-"));
        assert_eq!(r.body.len(), 10);
        assert_eq!(respond(&s, "GET", "/bundle.cpsl", Some("bytes=200-300")).status, "416 Range Not Satisfiable");
    }

    #[test]
    fn routing() {
        let s = site();
        assert_eq!(respond(&s, "GET", "/manifest.json?x=1", None).body, b"{}");
        assert_eq!(respond(&s, "GET", "/nope", None).status, "404 Not Found");
        assert_eq!(respond(&s, "POST", "/bundle.cpsl", None).status, "405 Method Not Allowed");
        assert_eq!(respond(&s, "OPTIONS", "/bundle.cpsl", None).status, "204 No Content");
    }

    #[test]
    fn static_files_stay_inside_root() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("index.html"), "<p>hi</p>").unwrap();
        let s = Site {
            root: Some(dir.path().to_path_buf()),
            ..site()
        };
        let r = respond(&s, "GET", "/", None);
        assert_eq!(r.body, b"<p>hi</p>");
        assert_eq!(r.content_type, "text/html; charset=utf-8");
        assert_eq!(respond(&s, "GET", "/../etc/passwd", None).status, "404 Not Found");
    }
}
