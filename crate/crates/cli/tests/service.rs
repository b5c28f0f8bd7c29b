mod common;

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Stdio};
use std::time::{Duration, Instant};

use common::{http, request_json, trained};
use sketchfill::codec::{FrameSequence, REST};
use sketchfill::config::Stage;
use sketchfill::pipeline::GenerateResponse;

struct Server {
    child: Child,
    addr: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start(checkpoints: &Path) -> Server {
    let mut child = common::bin()
        .args(["serve", "--port", "0"])
        .env(sketchfill_cli::CHECKPOINT_ENV, checkpoints)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("address line").to_string();
    Server { child, addr }
}

fn wait_for(server: &Server, status: &str) -> serde_json::Value {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let health = http(&server.addr, "GET", "/health", None).json();
        if health["status"] == status {
            return health;
        }
        assert!(Instant::now() < deadline, "service stuck at {health}");
        std::thread::sleep(Duration::from_millis(100));
    }
}

#[test]
fn generate_over_http_is_deterministic_per_seed() {
    let t = trained();
    let server = start(&t.models);
    let health = wait_for(&server, "ready");
    for stage in ["vae", "inpainter", "connector"] {
        assert_eq!(health["checkpoints"][stage].as_str().unwrap().len(), 64);
    }

    for with_sketch in [false, true] {
        let body = request_json(42, with_sketch);
        let a = http(&server.addr, "POST", "/generate", Some(&body));
        assert_eq!(a.status, 200, "{}", String::from_utf8_lossy(&a.body));
        let b = http(&server.addr, "POST", "/generate", Some(&body));
        assert_eq!(a.body, b.body);
        let resp: GenerateResponse = serde_json::from_slice(&a.body).unwrap();
        assert_eq!(resp.missing.len(), 4);
        assert!(resp.missing.iter().all(FrameSequence::is_well_formed));
        assert!(resp.missing.iter().flat_map(|m| m.frames()).all(|&t| t <= REST));
        assert_eq!(resp.adherence.len(), if with_sketch { 2 } else { 0 });
        for score in resp.adherence.iter().flat_map(|a| a.pitch.into_iter().chain(a.rhythm)) {
            assert!((0.0..=1.0).contains(&score));
        }
        assert_eq!(resp.model[&Stage::Vae], health["checkpoints"]["vae"].as_str().unwrap());
    }

    let model = http(&server.addr, "GET", "/model", None).json();
    assert_eq!(model["window"]["missing"], 4);
    assert_eq!(model["checkpoints"]["connector"]["stage"], "connector");
}

#[test]
fn invalid_requests_get_400_with_a_reason() {
    let server = start(&trained().models);
    wait_for(&server, "ready");
    for body in [
        "not json".to_string(),
        r#"{"past": [], "future": []}"#.to_string(),
        request_json(1, false).replace(r#""measures":[]"#, r#""measures":[{"index":2,"pitches":[60]}]"#),
        request_json(1, false).replace(r#""seed":1"#, r#""seed":1,"temperature":0.5"#),
    ] {
        let reply = http(&server.addr, "POST", "/generate", Some(&body));
        assert_eq!(reply.status, 400, "{body}");
        assert_eq!(reply.json()["kind"], "validation");
    }
}

#[test]
fn render_returns_midi_bytes() {
    let server = start(&trained().models);
    let row = format!("[64{}]", ",128".repeat(23));
    let reply = http(&server.addr, "POST", "/render", Some(&format!(r#"{{"measures": [{row}, {row}], "tempo": 100}}"#)));
    assert_eq!(reply.status, 200);
    assert!(reply.headers.to_ascii_lowercase().contains("content-type: audio/midi"));
    assert_eq!(&reply.body[..4], b"MThd");
    let bad = http(&server.addr, "POST", "/render", Some(r#"{"measures": [[1, 2]]}"#));
    assert_eq!(bad.status, 400);
}

#[test]
fn generate_refuses_without_checkpoints() {
    let empty = tempfile::tempdir().unwrap();
    let server = start(empty.path());
    let health = wait_for(&server, "failed");
    assert!(health["checkpoints"].as_object().unwrap().is_empty());
    let reply = http(&server.addr, "POST", "/generate", Some(&request_json(1, false)));
    assert_eq!(reply.status, 503);
    assert_eq!(reply.json()["kind"], "not_loaded");
    assert_eq!(http(&server.addr, "GET", "/model", None).status, 503);
}
