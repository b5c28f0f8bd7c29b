#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sketchfill::codec::{HOLD, REST};
use sketchfill::dataset::synth::write_toy_corpus;

pub const TINY_CONFIG: &str = r#"
seed = 2
learning_rate = 3e-3
measure_batch_size = 16
window_batch_size = 8
max_epochs = 2
patience = 2
kl_weight = 0.001
kl_warmup_epochs = 1
max_measures = 200
max_windows = 40

[vae]
embed_dim = 8
encoder_hidden = 16
beat_hidden = 16
tick_hidden = 16

[inpainter]
hidden = 16
layers = 1

[connector]
layers = 1
heads = 4
feed_forward = 32
"#;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sketchfill"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).env("RUST_LOG", "warn").output().expect("spawn sketchfill")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub struct Trained {
    _tmp: tempfile::TempDir,
    pub root: PathBuf,
    pub data: PathBuf,
    pub models: PathBuf,
}

/// Preprocess and train all three stages through the binary, once per test process.
pub fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let raw = root.join("raw");
        let data = root.join("data");
        let models = root.join("models");
        write_toy_corpus(&raw, 45, 32, 2).unwrap();
        let config = root.join("tiny.toml");
        std::fs::write(&config, TINY_CONFIG).unwrap();

        let out = run(&["preprocess", "--raw", path_str(&raw), "--out", path_str(&data), "--seed", "2"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        for stage in ["vae", "inpainter", "connector"] {
            let out = run(&[
                "train", "--stage", stage, "--config", path_str(&config), "--data", path_str(&data), "--out",
                path_str(&models),
            ]);
            assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
        }
        Trained { _tmp: tmp, root, data, models }
    })
}

pub fn measure_row(pitch: u32) -> Vec<u32> {
    let mut f = vec![HOLD; 24];
    f[0] = pitch;
    f[6] = pitch + 2;
    f[12] = pitch + 4;
    f[18..].fill(REST);
    f
}

pub fn request_json(seed: u64, with_sketch: bool) -> String {
    let past: Vec<Vec<u32>> = (0..6).map(|i| measure_row(60 + i)).collect();
    let future: Vec<Vec<u32>> = (0..6).map(|i| measure_row(62 + i)).collect();
    let sketch = if with_sketch {
        serde_json::json!({"measures": [
            {"index": 6, "pitches": [67, 65, 64]},
            {"index": 8, "rhythm": [0,1,1,1,1,1,0,1,1,1,1,1,0,1,1,1,1,1,0,1,1,1,1,1]}
        ]})
    } else {
        serde_json::json!({"measures": []})
    };
    serde_json::json!({"past": past, "future": future, "sketch": sketch, "seed": seed}).to_string()
}

pub struct HttpReply {
    pub status: u16,
    pub headers: String,
    pub body: Vec<u8>,
}

impl HttpReply {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }
}

/// Minimal HTTP/1.1 exchange over a fresh connection.
pub fn http(addr: &str, method: &str, path: &str, body: Option<&str>) -> HttpReply {
    let mut stream = TcpStream::connect(addr).expect("connect");
    let body = body.unwrap_or("");
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).unwrap();
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").expect("header end");
    let headers = String::from_utf8_lossy(&raw[..split]).to_string();
    let status = headers.split_whitespace().nth(1).unwrap().parse().unwrap();
    HttpReply {
        status,
        headers,
        body: raw[split + 4..].to_vec(),
    }
}
