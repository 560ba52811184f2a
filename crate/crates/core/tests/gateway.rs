use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use versionguard::distributions::{make_task, GlyphParams, TaskSource};
use versionguard::gateway::{serve, Gateway, GatewayConfig};
use versionguard::versioning::VersionStore;
use versionguard::TrainConfig;

fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        hidden_per_label: 20,
        ..TrainConfig::default()
    }
}

fn gateway(dir: &std::path::Path) -> (Arc<Gateway>, Vec<f64>) {
    let params = GlyphParams {
        samples_per_class: 60,
        ..GlyphParams::default()
    };
    let task = Arc::new(make_task(&TaskSource::SyntheticGlyphs(params), 3).unwrap());
    let mut store = VersionStore::open(dir).unwrap();
    store
        .retire_and_replace(
            &task,
            0.3,
            &quick_train(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
    let probe = task.test[0].x.clone();
    let config = GatewayConfig {
        train: quick_train(),
        ..GatewayConfig::default()
    };
    (Arc::new(Gateway::new(store, task, config).unwrap()), probe)
}

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(addr: std::net::SocketAddr) -> Self {
        let stream = TcpStream::connect(addr).unwrap();
        Self {
            writer: stream.try_clone().unwrap(),
            reader: BufReader::new(stream),
        }
    }

    fn call(&mut self, line: &str) -> Value {
        self.writer
            .write_all(format!("{line}\n").as_bytes())
            .unwrap();
        let mut reply = String::new();
        self.reader.read_line(&mut reply).unwrap();
        serde_json::from_str(&reply).unwrap()
    }
}

#[test]
fn protocol_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, probe) = gateway(dir.path());
    let server = serve(gw, "127.0.0.1:0").unwrap();
    let mut c = Client::connect(server.local_addr());

    let before = c.call(&json!({ "classify": probe }).to_string());
    assert_eq!(before["delta"], Value::Null);
    assert_eq!(before["flagged"], false);
    assert_eq!(before["version"], 1);

    // Bad lines get an error reply and the connection stays usable.
    assert!(c.call("{not json").get("error").is_some());
    assert!(c
        .call(&json!({ "classify": [0.5, 0.5] }).to_string())
        .get("error")
        .is_some());
    assert!(c.call(r#"{"reboot": 1}"#).get("error").is_some());

    let b = c.call(r#""breach""#);
    assert_eq!(b["rotated_to"], 2);
    assert_eq!(b["rotations"], 1);
    let b = c.call(r#"{"breach": {}}"#);
    assert_eq!(b["rotated_to"], 3);
    assert_eq!(b["rotations"], 2);

    let after = c.call(&json!({ "classify": probe }).to_string());
    assert!(after["delta"].is_f64());
    assert_eq!(after["version"], 3);
    assert_eq!(after["breached"], 2);

    let s = c.call(r#"{"status": null}"#);
    assert_eq!(s["rotations"], 2);
    assert_eq!(s["retired"], 2);
    assert_eq!(s["models_per_query"], 3);
    assert_eq!(s["queries"], 3);
    assert_eq!(s["errors"], 3);
    server.shutdown();

    // Rotations were persisted.
    let store = VersionStore::open(dir.path()).unwrap();
    assert_eq!(store.deployed().unwrap().id, 3);
    assert_eq!(store.retired().count(), 2);
}

#[test]
fn classify_sees_a_consistent_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, probe) = gateway(dir.path());
    gw.breach().unwrap();
    let snap = gw.snapshot();
    let r = gw.classify(&probe).unwrap();
    assert_eq!(r.version, snap.version);
    assert_eq!(r.threshold, snap.threshold());
    let again = gw.classify(&probe).unwrap();
    assert_eq!(r, again);
}
