//! Filtered inference over a local TCP socket.
//!
//! One JSON request per line, one JSON response per line:
//!
//! ```text
//! {"classify": [0.1, 0.5, ...]}  -> {"label":3,"flagged":false,"delta":0.02,"version":2,"threshold":0.11,"breached":1}
//! "breach" or {"breach": null}    -> {"rotated_to":3,"rotations":2,"threshold":0.09,"breached":2}
//! "status" or {"status": null}    -> {"version":3,"retired":2,"queries":...,"latency_us":{...}}
//! anything else                   -> {"error":"..."}
//! ```
//!
//! Before the first breach there is no filter, so `delta` and `threshold`
//! are `null` and nothing is flagged. Every classify runs against a single
//! immutable snapshot, so a response never mixes the model of one version
//! with the threshold of another.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::distributions::TaskDataset;
use crate::error::{invalid, Result};
use crate::filter::{self, FilterState};
use crate::nnet::{MlpModel, TrainConfig};
use crate::seed;
use crate::versioning::VersionStore;

const SEED_TAG_ROTATION: u64 = 0x524f_5441;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub bind: String,
    pub target_fpr: f64,
    pub sigma0: f64,
    pub train: TrainConfig,
    /// Seeds the hidden assignments and training seeds of rotations.
    pub rotation_seed: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:0".into(),
            target_fpr: 0.05,
            sigma0: crate::distributions::DEFAULT_SIGMA0,
            train: TrainConfig::default(),
            rotation_seed: 0,
        }
    }
}

/// What a classify call sees: one deployed model and the filter built for it.
#[derive(Debug)]
pub struct Snapshot {
    pub version: u64,
    pub model: Arc<MlpModel>,
    pub filter: Option<FilterState>,
}

impl Snapshot {
    pub fn threshold(&self) -> Option<f64> {
        self.filter.as_ref().and_then(|f| f.threshold())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub label: usize,
    pub flagged: bool,
    pub delta: Option<f64>,
    pub version: u64,
    pub threshold: Option<f64>,
    pub breached: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreachResponse {
    pub rotated_to: u64,
    pub rotations: u64,
    pub threshold: f64,
    pub breached: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean: f64,
    pub max: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusResponse {
    pub version: u64,
    pub retired: usize,
    pub queries: u64,
    pub flagged: u64,
    pub rotations: u64,
    pub errors: u64,
    /// Models evaluated per classify: the deployed one plus every retired one.
    pub models_per_query: usize,
    pub threshold: Option<f64>,
    pub latency_us: LatencyStats,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Classify(Vec<f64>),
    Breach,
    Status,
}

impl Request {
    /// Accepts `"breach"`/`"status"` as bare strings or as single-key
    /// objects with any value, and `{"classify": [numbers]}`.
    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let v: Value = serde_json::from_str(line).map_err(|e| format!("malformed JSON: {e}"))?;
        let (key, body) = match &v {
            Value::String(s) => (s.as_str(), None),
            Value::Object(m) if m.len() == 1 => {
                let (k, b) = m.iter().next().expect("one entry");
                (k.as_str(), Some(b))
            }
            _ => return Err("expected a request object with one key".into()),
        };
        match key {
            "breach" => Ok(Request::Breach),
            "status" => Ok(Request::Status),
            "classify" => {
                let body = body.ok_or("classify needs a pixel array")?;
                serde_json::from_value(body.clone())
                    .map(Request::Classify)
                    .map_err(|e| format!("classify needs a pixel array: {e}"))
            }
            other => Err(format!("unknown request kind {other:?}")),
        }
    }
}

/// The service state. Cheap to share behind an `Arc`.
pub struct Gateway {
    task: Arc<TaskDataset>,
    config: GatewayConfig,
    store: Mutex<(VersionStore, ChaCha8Rng)>,
    snapshot: RwLock<Arc<Snapshot>>,
    queries: AtomicU64,
    flagged: AtomicU64,
    rotations: AtomicU64,
    errors: AtomicU64,
    latency_total_us: AtomicU64,
    latency_max_us: AtomicU64,
}

fn build_snapshot(store: &VersionStore, task: &TaskDataset, fpr: f64) -> Result<Snapshot> {
    let deployed = store
        .deployed()
        .ok_or_else(|| invalid("the store has no deployed version"))?;
    let model = Arc::new(deployed.model.clone());
    let breached: Vec<Arc<MlpModel>> = store.retired().map(|v| Arc::new(v.model.clone())).collect();
    let filter = if breached.is_empty() {
        None
    } else {
        let state = FilterState::new(model.clone(), breached)?;
        Some(state.calibrated(task.validation.iter().map(|s| s.x.as_slice()), fpr)?)
    };
    Ok(Snapshot {
        version: deployed.id,
        model,
        filter,
    })
}

impl Gateway {
    pub fn new(store: VersionStore, task: Arc<TaskDataset>, config: GatewayConfig) -> Result<Self> {
        let snapshot = build_snapshot(&store, &task, config.target_fpr)?;
        let rng = seed::rng_for(config.rotation_seed, SEED_TAG_ROTATION);
        Ok(Self {
            task,
            config,
            store: Mutex::new((store, rng)),
            snapshot: RwLock::new(Arc::new(snapshot)),
            queries: AtomicU64::new(0),
            flagged: AtomicU64::new(0),
            rotations: AtomicU64::new(0),
            errors: AtomicU64::new(0),
            latency_total_us: AtomicU64::new(0),
            latency_max_us: AtomicU64::new(0),
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Classifies `x` against the current snapshot.
    pub fn classify(&self, x: &[f64]) -> Result<ClassifyResponse> {
        let start = Instant::now();
        let snap = self.snapshot();
        let out = classify_handler(x, &snap);
        let us = start.elapsed().as_micros() as u64;
        self.latency_total_us.fetch_add(us, Ordering::Relaxed);
        self.latency_max_us.fetch_max(us, Ordering::Relaxed);
        self.queries.fetch_add(1, Ordering::Relaxed);
        match &out {
            Ok(r) if r.flagged => {
                self.flagged.fetch_add(1, Ordering::Relaxed);
            }
            Err(_) => {
                self.errors.fetch_add(1, Ordering::Relaxed);
            }
            _ => {}
        }
        out
    }

    /// Retires the deployed version, trains and deploys a new one, and
    /// recalibrates the filter against every retired version. Classify
    /// calls keep using the old snapshot until the new one is swapped in.
    pub fn breach(&self) -> Result<BreachResponse> {
        let mut guard = self.store.lock().expect("store lock");
        let (store, rng) = &mut *guard;
        store.retire_and_replace(&self.task, self.config.sigma0, &self.config.train, rng)?;
        let snap = build_snapshot(store, &self.task, self.config.target_fpr)?;
        let threshold = snap.threshold().expect("a breach leaves a retired version");
        let breached = snap.filter.as_ref().map_or(0, |f| f.breached_count());
        let rotated_to = snap.version;
        *self.snapshot.write().expect("snapshot lock") = Arc::new(snap);
        let rotations = self.rotations.fetch_add(1, Ordering::SeqCst) + 1;
        Ok(BreachResponse {
            rotated_to,
            rotations,
            threshold,
            breached,
        })
    }

    pub fn status(&self) -> StatusResponse {
        let snap = self.snapshot();
        let queries = self.queries.load(Ordering::Relaxed);
        let retired = snap.filter.as_ref().map_or(0, |f| f.breached_count());
        StatusResponse {
            version: snap.version,
            retired,
            queries,
            flagged: self.flagged.load(Ordering::Relaxed),
            rotations: self.rotations.load(Ordering::SeqCst),
            errors: self.errors.load(Ordering::Relaxed),
            models_per_query: 1 + retired,
            threshold: snap.threshold(),
            latency_us: LatencyStats {
                count: queries,
                mean: if queries == 0 {
                    0.0
                } else {
                    self.latency_total_us.load(Ordering::Relaxed) as f64 / queries as f64
                },
                max: self.latency_max_us.load(Ordering::Relaxed),
            },
        }
    }

    /// Handles one request line and returns the response line.
    pub fn handle_line(&self, line: &str) -> String {
        let reply = match Request::parse(line) {
            Ok(Request::Classify(x)) => self.classify(&x).map(serde_json::to_value),
            Ok(Request::Breach) => self.breach().map(serde_json::to_value),
            Ok(Request::Status) => Ok(serde_json::to_value(self.status())),
            Err(msg) => {
                self.errors.fetch_add(1, Ordering::Relaxed);
                return error_line(&msg);
            }
        };
        match reply {
            Ok(Ok(v)) => v.to_string(),
            Ok(Err(e)) => error_line(&e.to_string()),
            Err(e) => error_line(&e.to_string()),
        }
    }
}

fn error_line(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

/// Classify against a fixed snapshot. Flagged responses still carry the label.
pub fn classify_handler(x: &[f64], snap: &Snapshot) -> Result<ClassifyResponse> {
    match &snap.filter {
        None => Ok(ClassifyResponse {
            label: snap.model.predict(x)?,
            flagged: false,
            delta: None,
            version: snap.version,
            threshold: None,
            breached: 0,
        }),
        Some(state) => {
            let v = filter::judge(x, state)?;
            Ok(ClassifyResponse {
                label: v.label,
                flagged: v.flagged(),
                delta: Some(v.delta_max),
                version: snap.version,
                threshold: state.threshold(),
                breached: state.breached_count(),
            })
        }
    }
}

/// A running server. Dropping the handle does not stop it; call
/// [`ServerHandle::shutdown`].
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
    gateway: Arc<Gateway>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    /// Stops accepting connections and waits for the accept loop to exit.
    /// Open connections end when their clients disconnect.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

/// Binds `addr` and serves in background threads, one per connection.
pub fn serve(gateway: Arc<Gateway>, addr: &str) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr).map_err(crate::error::io_err(addr))?;
    let local = listener.local_addr().map_err(crate::error::io_err(addr))?;
    let stop = Arc::new(AtomicBool::new(false));
    let (gw, flag) = (gateway.clone(), stop.clone());
    let join = thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let gw = gw.clone();
            thread::spawn(move || {
                let _ = handle_connection(&gw, stream);
            });
        }
    });
    Ok(ServerHandle {
        addr: local,
        stop,
        join: Some(join),
        gateway,
    })
}

fn handle_connection(gateway: &Gateway, stream: TcpStream) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut reply = gateway.handle_line(&line);
        reply.push('\n');
        writer.write_all(reply.as_bytes())?;
    }
    Ok(())
}
