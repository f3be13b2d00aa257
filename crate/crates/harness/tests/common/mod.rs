#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::thread;
use std::time::Duration;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::routing::post;
use axum::{Json, Router};
use base64::Engine;
use image::{ImageFormat, Rgba, RgbaImage};
use qask::agents::{AgentConfig, AgentKind};
use qask::bridge::{BridgeServer, SessionView};
use qask_core::agent::normalize_question;
use qask_core::model::{DescriptionSet, EpisodeResult, EpisodeSplit, EpisodeSpec, ImageRef};
use serde_json::{json, Value};

pub fn write_png(dir: &Path, name: &str, color: [u8; 3]) -> Vec<u8> {
    let img = RgbaImage::from_pixel(8, 6, Rgba([color[0], color[1], color[2], 255]));
    let path = dir.join(name);
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).unwrap();
    }
    image::DynamicImage::ImageRgba8(img)
        .save_with_format(&path, ImageFormat::Png)
        .unwrap();
    fs::read(path).unwrap()
}

pub fn descriptions(word: &str) -> DescriptionSet {
    DescriptionSet {
        category: word.into(),
        cat_col: format!("red {word}"),
        col_feat: format!("red {word} with a chipped rim"),
        ctx: format!("{word} on the shelf"),
        col_ctx: format!("red {word} on the shelf"),
        col_ctx_feat: format!("red {word} with a chipped rim on the shelf"),
    }
}

/// Episodes of the given lengths: distractors `ep{i}/d{j}.png`, the target
/// observation `ep{i}/hit.png` last, and the oracle's view `ep{i}/target.png`.
pub fn fixture(dir: &Path, lengths: &[usize]) -> (PathBuf, Vec<EpisodeSpec>) {
    let mut specs = Vec::new();
    for (i, &n) in lengths.iter().enumerate() {
        let c = (i * 20) as u8;
        let mut observations = Vec::new();
        for j in 0..n - 1 {
            let name = format!("ep{i}/d{j}.png");
            write_png(dir, &name, [c, 10 + j as u8 * 20, 200]);
            observations.push(ImageRef::new(name));
        }
        write_png(dir, &format!("ep{i}/hit.png"), [c, 250, 0]);
        observations.push(ImageRef::new(format!("ep{i}/hit.png")));
        write_png(dir, &format!("ep{i}/target.png"), [c, 240, 5]);
        specs.push(EpisodeSpec {
            id: format!("ep{i:02}"),
            category: "mug".into(),
            target_image: ImageRef::new(format!("ep{i}/target.png")),
            descriptions: descriptions("mug"),
            observations,
            split: EpisodeSplit::Test,
        });
    }
    let manifest = dir.join("manifest.json");
    fs::write(&manifest, serde_json::to_string_pretty(&specs).unwrap()).unwrap();
    (manifest, specs)
}

pub fn write_agent(dir: &Path, cfg: &AgentConfig) -> PathBuf {
    let p = dir.join(format!("{}.json", cfg.id));
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

pub fn remote_agent(id: &str, endpoint: &str, model: &str) -> AgentConfig {
    let mut c = AgentConfig::new(id, AgentKind::Remote);
    c.endpoint = Some(endpoint.into());
    c.model_name = Some(model.into());
    c.max_transport_retries = 0;
    c
}

pub const ASK: &str = "<motivation>Cannot tell the color yet.</motivation>\n<score>1</score>\n<question>Is the mug red?</question>";
pub const ACCEPT: &str = "<motivation>It matches.</motivation>\n<score>2</score>\n<question>None</question>";
pub const REJECT: &str = "<motivation>Wrong object.</motivation>\n<score>0</score>\n<question>None</question>";

pub fn is_questioner_body(body: &Value) -> bool {
    user_text(body).contains("<score>0, 1, or 2</score>")
}

pub fn user_text(body: &Value) -> String {
    body.pointer("/messages/1/content")
        .and_then(Value::as_array)
        .map(|parts| {
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join("")
        })
        .unwrap_or_default()
}

pub fn image_url(body: &Value) -> Option<String> {
    body.pointer("/messages/1/content/0/image_url/url")
        .and_then(Value::as_str)
        .map(str::to_string)
}

pub fn data_url_png(bytes: &[u8]) -> String {
    format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes))
}

type Reply = dyn Fn(&Value) -> String + Send + Sync;

/// OpenAI-style chat endpoint that answers through `reply`, counting and
/// recording every request body.
pub struct StubChat {
    pub server: BridgeServer,
    pub count: Arc<AtomicUsize>,
    pub bodies: Arc<Mutex<Vec<Value>>>,
}

impl StubChat {
    pub fn start(reply: impl Fn(&Value) -> String + Send + Sync + 'static) -> StubChat {
        let count = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let reply: Arc<Reply> = Arc::new(reply);
        let (c, b) = (count.clone(), bodies.clone());
        let app = Router::new().route(
            "/v1/chat/completions",
            post(move |Json(body): Json<Value>| {
                let (c, b, reply) = (c.clone(), b.clone(), reply.clone());
                async move {
                    c.fetch_add(1, Ordering::SeqCst);
                    let text = reply(&body);
                    b.lock().unwrap().push(body);
                    Json(json!({"choices": [{"message": {"role": "assistant", "content": text}}]}))
                }
            }),
        );
        StubChat {
            server: BridgeServer::start("127.0.0.1:0", app).unwrap(),
            count,
            bodies,
        }
    }

    pub fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.server.base_url())
    }

    pub fn requests(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }
}

/// Questioner that asks once per episode when it has no history, then
/// accepts exactly the observations listed in `hits`; oracles say yes.
pub fn stub_policy(hits: Vec<String>) -> impl Fn(&Value) -> String + Send + Sync + 'static {
    move |body| {
        if !is_questioner_body(body) {
            return "Yes, it is red.".to_string();
        }
        if user_text(body).contains(qask_core::prompt::NO_HISTORY) {
            return ASK.to_string();
        }
        let url = image_url(body).unwrap_or_default();
        if hits.contains(&url) { ACCEPT } else { REJECT }.to_string()
    }
}

/// Data URLs of every `hit.png` in a fixture.
pub fn hit_urls(dir: &Path, specs: &[EpisodeSpec]) -> Vec<String> {
    specs
        .iter()
        .map(|s| data_url_png(&fs::read(dir.join(s.observations.last().unwrap().as_str())).unwrap()))
        .collect()
}

/// Answers pending questions over HTTP from a question -> answer table until
/// `sessions` sessions have closed.
pub fn scripted_http_client(base: String, answers: BTreeMap<String, String>, sessions: usize) -> thread::JoinHandle<usize> {
    thread::spawn(move || {
        let http = reqwest::blocking::Client::new();
        let mut answered = 0;
        loop {
            let list: Value = http.get(format!("{base}/api/sessions")).send().unwrap().json().unwrap();
            let list = list.as_array().unwrap();
            if list.len() == sessions && list.iter().all(|s| s["state"] == "done") {
                return answered;
            }
            for s in list.iter().filter(|s| s["pending"] == true) {
                let id = s["id"].as_str().unwrap();
                let view: SessionView = http.get(format!("{base}/api/sessions/{id}")).send().unwrap().json().unwrap();
                let Some(q) = view.pending_question else { continue };
                let a = answers.get(&normalize_question(&q)).cloned().unwrap_or_else(|| "I cannot tell.".into());
                let r = http
                    .post(format!("{base}/api/sessions/{id}/answer"))
                    .json(&json!({"answer": a}))
                    .send()
                    .unwrap();
                if r.status().is_success() {
                    answered += 1;
                }
            }
            thread::sleep(Duration::from_millis(5));
        }
    })
}

pub fn without_latency(mut r: EpisodeResult) -> String {
    r.wall_time = 0.0;
    for s in &mut r.steps {
        s.turn_latencies.iter_mut().for_each(|l| *l = 0.0);
        s.questions.iter_mut().for_each(|q| q.latency = 0.0);
    }
    serde_json::to_string(&r).unwrap()
}

