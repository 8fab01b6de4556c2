#![allow(dead_code)]

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;

use nalgebra::DMatrix;
use procmem_core::bank::{write_adapter, AdapterSet, Bank};
use procmem_core::schema::{Action, EeOrientation, EntityShape, ProceduralState, TargetPoint};
use serde_json::json;

pub const LAYER: &str = "blk.0";

pub fn state(action: Action, shape: EntityShape, ori: EeOrientation, point: TargetPoint) -> ProceduralState {
    ProceduralState::new("step", action, shape, ori, point)
}

pub fn mug_state() -> ProceduralState {
    state(Action::Pick, EntityShape::Handle, EeOrientation::Vertical, TargetPoint::Rim)
}

pub fn adapter(id: &str, rank: usize, seed: f64) -> AdapterSet {
    let down = DMatrix::from_fn(rank, 3, |i, j| ((i * 3 + j) as f64 * 0.37 + seed).sin() * 0.5);
    let up = DMatrix::from_fn(4, rank, |i, j| ((i * rank + j) as f64 * 0.61 - seed).cos() * 0.5);
    AdapterSet::from_factors(id, 2.0 * rank as f64, [(LAYER, &up, &down)]).unwrap()
}

pub fn write_adapter_file(dir: &Path, id: &str, rank: usize, seed: f64) -> PathBuf {
    let path = dir.join(format!("{id}.lora"));
    write_adapter(&adapter(id, rank, seed), &path).unwrap();
    path
}

/// Three rank-2 memories under the one-hot embedder.
pub fn fixture_bank(dir: &Path) -> PathBuf {
    let root = dir.join("bank");
    let mut bank = Bank::init(&root, "fixture-onehot").unwrap();
    let staging = dir.join("staging");
    std::fs::create_dir_all(&staging).unwrap();
    let memories = [
        ("drawer", state(Action::Pick, EntityShape::Handle, EeOrientation::Horizontal, TargetPoint::Front), 0.1),
        ("mug", mug_state(), 0.7),
        ("button", state(Action::Press, EntityShape::Spherical, EeOrientation::Vertical, TargetPoint::Top), 1.3),
    ];
    for (id, s, seed) in memories {
        let path = write_adapter_file(&staging, id, 2, seed);
        bank.register_memory(id, vec![s], &path).unwrap();
    }
    root
}

pub fn chat_reply(content: &str) -> (u16, String) {
    (200, json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string())
}

/// Scripted HTTP/1.1 server: one `(status, body)` per connection, then 500.
pub struct MockServer {
    pub url: String,
    bodies: Arc<Mutex<Vec<String>>>,
}

impl MockServer {
    pub fn start(script: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let seen = bodies.clone();
        let mut script: VecDeque<_> = script.into();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut body = vec![0u8; len];
                let _ = reader.read_exact(&mut body);
                seen.lock().unwrap().push(String::from_utf8_lossy(&body).into_owned());
                let (status, reply) = script.pop_front().unwrap_or((500, "{}".into()));
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                );
            }
        });
        Self { url, bodies }
    }

    pub fn bodies(&self) -> Vec<String> {
        self.bodies.lock().unwrap().clone()
    }
}

/// Runs the CLI in-process with no environment.
pub fn cli(args: &[&str]) -> (i32, String, String) {
    cli_env(args, &[])
}

pub fn cli_env(args: &[&str], env: &[(&str, &str)]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let env: Vec<(String, String)> = env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let lookup = move |k: &str| env.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
    let code = procmem::cli::run(std::iter::once("procmem").chain(args.iter().copied()), lookup, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}
