//! Stub model servers for the HTTP adapter tests. Each server runs on its own
//! thread with its own runtime and lives until the test process exits.

#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use r3_cli::http::{DenoiseReply, DenoiseWire, ScoreReply, ScoreWire};
use r3_core::experiment::ExperimentConfig;
use r3_core::model::DenoiseRequest;
use r3_core::toyworld::{ToyWorld, MASK};
use r3_core::{Denoiser, ProcessReward, StreamKey, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    None,
    /// Every score comes back as this value.
    Score(f64),
    /// The first token of the sequence is overwritten.
    BreakLocality,
    /// Masked positions are returned untouched.
    LeaveMask,
    /// Batch score replies drop their last element.
    ShortBatch,
    /// The first `n` requests answer 500.
    FailFirst(usize),
}

struct Stub {
    exp: ExperimentConfig,
    fault: Fault,
    seen: AtomicUsize,
}

impl Stub {
    fn world(&self, key: &str) -> ToyWorld {
        let key: StreamKey = key.parse().expect("stream key");
        let cfg = self.exp.r3_config(key.seed);
        ToyWorld::new(key.seed, &cfg, &self.exp.toy_settings()).expect("toy world")
    }

    fn flaky(&self) -> bool {
        let n = self.seen.fetch_add(1, Ordering::SeqCst);
        matches!(self.fault, Fault::FailFirst(k) if n < k)
    }

    fn denoise(&self, req: &DenoiseWire) -> DenoiseReply {
        let world = self.world(&req.stream_key);
        let mut seq = world.prompt();
        let gen = &req.tokens[seq.prompt_len()..];
        for _ in 0..gen.len() / seq.block_len() {
            seq.push_masked_block();
        }
        if !gen.is_empty() {
            seq.replace_window(0, gen).expect("whole blocks");
        }
        let mut tokens = match self.fault {
            Fault::LeaveMask => req.tokens.clone(),
            _ => world
                .denoiser
                .denoise(&DenoiseRequest {
                    seq: &seq,
                    editable: &req.editable,
                    temperature: req.temperature,
                    steps: req.steps,
                    stream: req.stream_key.parse().unwrap(),
                })
                .expect("toy denoise"),
        };
        if self.fault == Fault::BreakLocality {
            tokens[0] = (tokens[0] + 1) % 10;
        }
        DenoiseReply { tokens }
    }

    fn score(&self, req: &ScoreWire) -> ScoreReply {
        if let Fault::Score(v) = self.fault {
            return ScoreReply { score: v };
        }
        let world = self.world(&req.stream_key);
        let score = world
            .prm
            .score(&req.context, &req.block, &req.stream_key.parse().unwrap())
            .expect("toy score");
        ScoreReply { score }
    }
}

type Shared = State<Arc<Stub>>;

async fn denoise(State(s): Shared, Json(r): Json<DenoiseWire>) -> Result<Json<DenoiseReply>, StatusCode> {
    if s.flaky() {
        return Err(StatusCode::INTERNAL_SERVER_ERROR);
    }
    Ok(Json(s.denoise(&r)))
}

async fn denoise_batch(
    State(s): Shared,
    Json(r): Json<Vec<DenoiseWire>>,
) -> Result<Json<Vec<DenoiseReply>>, StatusCode> {
    if s.flaky() {
        return Err(StatusCode::INTERNAL_SERVER_ERROR);
    }
    Ok(Json(r.iter().map(|x| s.denoise(x)).collect()))
}

async fn score(State(s): Shared, Json(r): Json<ScoreWire>) -> Result<Json<ScoreReply>, StatusCode> {
    if s.flaky() {
        return Err(StatusCode::INTERNAL_SERVER_ERROR);
    }
    Ok(Json(s.score(&r)))
}

async fn score_batch(
    State(s): Shared,
    Json(r): Json<Vec<ScoreWire>>,
) -> Result<Json<Vec<ScoreReply>>, StatusCode> {
    if s.flaky() {
        return Err(StatusCode::INTERNAL_SERVER_ERROR);
    }
    let mut out: Vec<ScoreReply> = r.iter().map(|x| s.score(x)).collect();
    if s.fault == Fault::ShortBatch {
        out.pop();
    }
    Ok(Json(out))
}

/// Starts a toy-world model server for `exp` and returns its base URL.
pub fn spawn(exp: &ExperimentConfig, fault: Fault) -> String {
    let stub = Arc::new(Stub {
        exp: exp.clone(),
        fault,
        seen: AtomicUsize::new(0),
    });
    let app = Router::new()
        .route("/denoise", post(denoise))
        .route("/denoise/batch", post(denoise_batch))
        .route("/score", post(score))
        .route("/score/batch", post(score_batch))
        .with_state(stub);
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

/// Small experiment that runs quickly over HTTP.
pub fn small_experiment() -> ExperimentConfig {
    ExperimentConfig::parse(
        "trials = 4\nseed = 21\nn_total = 6\nblock_len = 8\nwindow = 3\nn_samples = 3\n\
         http_timeout_ms = 2000\nhttp_retries = 2\n",
    )
    .unwrap()
}

pub fn mask_free(seq: &TokenSeq) -> bool {
    !seq.tokens().contains(&MASK)
}
