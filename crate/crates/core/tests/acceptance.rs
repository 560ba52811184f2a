//! Acceptance checks, one line per criterion.
//!
//! `cargo test --test acceptance` runs all ten; `cargo test --test acceptance
//! -- 4 9` runs a subset. Failing criteria print FAIL; pass `--strict` to turn
//! any failure into a non-zero exit.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use versionguard::attacks::{self, AttackBudget, AttackKind};
use versionguard::distributions::{make_task, TaskDataset, TaskSource, DEFAULT_SIGMA0};
use versionguard::experiment::{
    self, fpr_sweep, median, record_game, score_game, spearman, BreachScenario, SurrogateSpec,
    TrialRecord, VersionPool,
};
use versionguard::filter;
use versionguard::gateway::{self, Gateway, GatewayConfig};
use versionguard::nnet::{Activation, LossKind, MlpModel, Sample};
use versionguard::theory;
use versionguard::versioning::{self, VersionStore};
use versionguard::TrainConfig;

const TASK_SEED: u64 = 11;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// State shared between criteria: the default breach game is recorded once
/// and reused by the ensemble, NBR, strength and adaptive-attack checks.
struct Shared {
    task: Arc<TaskDataset>,
    config: TrainConfig,
    scenario: BreachScenario,
    pools: Option<Vec<VersionPool>>,
    records: Option<Vec<TrialRecord>>,
    game_seconds: f64,
}

impl Shared {
    fn new() -> Self {
        let task = make_task(&TaskSource::default(), TASK_SEED).expect("task");
        Self {
            task: Arc::new(task),
            config: TrainConfig::default(),
            scenario: BreachScenario::default(),
            pools: None,
            records: None,
            game_seconds: 0.0,
        }
    }

    fn game(&mut self) -> &[TrialRecord] {
        if self.records.is_none() {
            let start = Instant::now();
            let mut pools = experiment::make_pools(self.task.clone(), &self.config, &self.scenario);
            let records = record_game(&mut pools, &self.scenario).expect("game");
            self.game_seconds = start.elapsed().as_secs_f64();
            self.pools = Some(pools);
            self.records = Some(records);
        }
        self.records.as_deref().expect("recorded")
    }

    fn pools(&mut self) -> &mut [VersionPool] {
        self.game();
        self.pools.as_deref_mut().expect("trained")
    }
}

// 1. Loss-gap bound worked example.
fn c1_theory() -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut pass = true;
    for (i, g) in [0.5_f64, 1.0, 2.0].into_iter().enumerate() {
        let d = 4.0 * g.sqrt();
        let t = theory::lower_bound_t(d, g, 0.95);
        let exact = (t - 8.8 * g).abs() <= 1e-12 * g;
        let pair = theory::LinearPair::with_gap(d, g, 25.0 * g).expect("pair");
        let p = theory::monte_carlo_verify(&pair, t, 1_000_000, 100 + i as u64).expect("mc");
        pass &= exact && (p - 0.95).abs() <= 0.01;
        notes.push(format!("γ={g}: T={t:.12} p̂={p:.4}"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 10.0;
    outcome(pass, format!("{}; {secs:.2}s", notes.join(", ")))
}

// 2. Gradient suite against central finite differences.
fn relu_margin(model: &MlpModel, x: &[f64]) -> f64 {
    // Independent forward pass: smallest |pre-activation| of any ReLU unit.
    let mut a = x.to_vec();
    let mut margin = f64::INFINITY;
    for layer in model.layers() {
        let n_in = layer.in_dim();
        let z: Vec<f64> = (0..layer.out_dim())
            .map(|o| {
                let row = &layer.weights()[o * n_in..(o + 1) * n_in];
                row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>() + layer.bias()[o]
            })
            .collect();
        if layer.activation() == Activation::Relu {
            margin = margin.min(z.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())));
            a = z.iter().map(|v| v.max(0.0)).collect();
        } else {
            a = z;
        }
    }
    margin
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    inf(&diff) / inf(a).max(inf(b)).max(1e-8)
}

fn c2_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    let (mut worst_in, mut worst_par, mut resampled) = (0.0_f64, 0.0_f64, 0);
    for k in 0..100 {
        let input = rng.random_range(2..=8);
        let hidden: Vec<usize> = (0..rng.random_range(1..=2))
            .map(|_| rng.random_range(2..=8))
            .collect();
        let classes = rng.random_range(2..=5);
        let model = MlpModel::glorot(input, &hidden, classes, &mut rng).expect("model");
        let kind = if k % 2 == 0 {
            LossKind::NegLogLikelihood
        } else {
            LossKind::SquaredError
        };
        let label = rng.random_range(0..classes);
        let mut x: Vec<f64> = (0..input).map(|_| rng.random_range(-1.0..1.0)).collect();
        while relu_margin(&model, &x) < 1e-3 {
            resampled += 1;
            x = (0..input).map(|_| rng.random_range(-1.0..1.0)).collect();
        }
        let gi = model.grad_input(&x, label, kind).expect("grad");
        let fd_in: Vec<f64> = (0..input)
            .map(|i| {
                let (mut p, mut m) = (x.clone(), x.clone());
                p[i] += h;
                m[i] -= h;
                (model.loss(&p, label, kind).unwrap() - model.loss(&m, label, kind).unwrap())
                    / (2.0 * h)
            })
            .collect();
        worst_in = worst_in.max(rel_err(&gi, &fd_in));

        let batch = [Sample::new(x.clone(), label)];
        let gp = model.grad_params(&batch, kind).expect("grad").flatten();
        let theta = model.params_flat();
        let mut probe = model.clone();
        let fd_par: Vec<f64> = (0..theta.len())
            .map(|j| {
                let mut t = theta.clone();
                t[j] += h;
                probe.set_params_flat(&t).unwrap();
                let lp = probe.loss(&x, label, kind).unwrap();
                t[j] -= 2.0 * h;
                probe.set_params_flat(&t).unwrap();
                let lm = probe.loss(&x, label, kind).unwrap();
                (lp - lm) / (2.0 * h)
            })
            .collect();
        worst_par = worst_par.max(rel_err(&gp, &fd_par));
    }
    outcome(
        worst_in <= 1e-5 && worst_par <= 1e-5,
        format!("max rel err input {worst_in:.2e}, params {worst_par:.2e}; {resampled} inputs resampled off ReLU kinks"),
    )
}

// 3. Version accuracy against the standard model.
fn c3_versions(shared: &Shared) -> Outcome {
    let start = Instant::now();
    let task = &shared.task;
    let standard = versioning::train_standard(task, &shared.config).expect("standard");
    let std_acc = standard.accuracy(&task.test).expect("acc");
    let mut store = VersionStore::in_memory();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        store
            .retire_and_replace(task, DEFAULT_SIGMA0, &shared.config, &mut rng)
            .expect("version");
    }
    let accs: Vec<f64> = store.versions().iter().map(|v| v.benign_accuracy).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let sd =
        (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (accs.len() - 1) as f64).sqrt();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        (mean - std_acc).abs() <= 0.02 && sd <= 0.02 && secs < 600.0,
        format!(
            "standard {:.2}%, versions {:.2} ± {:.2}%; {secs:.0}s",
            100.0 * std_acc,
            100.0 * mean,
            100.0 * sd
        ),
    )
}

// 4. Single-breach filter on 500 PGD and CW inputs.
fn c4_single_breach(shared: &Shared) -> Outcome {
    let mut pool = VersionPool::new(
        shared.task.clone(),
        shared.config.clone(),
        DEFAULT_SIGMA0,
        4,
    );
    let mut pass = true;
    let mut notes = Vec::new();
    for kind in [AttackKind::Pgd, AttackKind::Cw] {
        let scenario = BreachScenario {
            attack: kind,
            n_attack_inputs: 500,
            horizon: 1,
            ..BreachScenario::default()
        };
        let (record, examples) = experiment::play_round(&mut pool, &scenario, 1, 4).expect("round");
        let r = record.score(0.05).expect("score");
        let transferred = record.transferred_deltas().len();
        let separated = r.d_adv_med.is_some_and(|d| d > r.threshold);
        let ok = r.filter_rate >= 0.9 && (r.fpr_realized - 0.05).abs() <= 0.02 && separated;
        pass &= ok;
        notes.push(format!(
            "{}: n={} source {:.1}% transferred {} filtered {:.1}% FPR {:.1}% medΔadv {} vs P95 benign {:.3}",
            kind.name(),
            examples.len(),
            100.0 * r.source_success,
            transferred,
            100.0 * r.filter_rate,
            100.0 * r.fpr_realized,
            r.d_adv_med.map_or("none".into(), |d| format!("{d:.3}")),
            r.threshold
        ));
    }
    outcome(pass, notes.join("; "))
}

// 5. Ensemble size 1 → 5 does not help the filter.
fn c5_ensemble(shared: &mut Shared) -> Outcome {
    let scenario = shared.scenario.clone();
    let records = shared.game();
    let report = score_game(&scenario, records, 0.05).expect("score");
    let sizes: Vec<f64> = (1..=5).map(|k| k as f64).collect();
    let mut d_med = Vec::new();
    let mut f_med = Vec::new();
    for k in 1..=5 {
        let rounds: Vec<_> = report.trials.iter().map(|t| &t.rounds[k - 1]).collect();
        let ds: Vec<f64> = rounds.iter().filter_map(|r| r.d_adv_med).collect();
        let fs: Vec<f64> = rounds.iter().map(|r| r.filter_rate).collect();
        d_med.push(median(&ds).unwrap_or(f64::NAN));
        f_med.push(median(&fs).expect("three trials"));
    }
    let rho_d = spearman(&sizes, &d_med);
    let rho_f = spearman(&sizes, &f_med);
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.2}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    outcome(
        rho_d <= 0.0 && rho_f <= 0.0 && d_med.iter().all(|d| d.is_finite()),
        format!(
            "medΔadv [{}] ρ={rho_d:.2}; filter [{}] ρ={rho_f:.2}",
            fmt(&d_med),
            fmt(&f_med)
        ),
    )
}

// 6. NBR floor and FPR ordering.
fn c6_nbr(shared: &mut Shared) -> Outcome {
    let scenario = shared.scenario.clone();
    let records = shared.game().to_vec();
    let secs = shared.game_seconds;
    let sweep = fpr_sweep(&scenario, &records, &[0.01, 0.05, 0.1]).expect("sweep");
    let at5 = sweep[1].nbrs();
    let floor = at5.iter().filter(|&&n| n >= 4).count() >= 2;
    let meds: Vec<f64> = sweep
        .iter()
        .map(|r| median(&r.nbrs().iter().map(|&n| n as f64).collect::<Vec<_>>()).unwrap())
        .collect();
    let ordered = meds[0] <= meds[1] && meds[1] <= meds[2];
    outcome(
        floor && ordered && secs < 45.0 * 60.0,
        format!(
            "NBR at 5% {:?}; median NBR 1%/5%/10% = {}/{}/{}; game {secs:.0}s",
            at5, meds[0], meds[1], meds[2]
        ),
    )
}

// 7. Stronger attacks leave a bigger loss gap.
fn c7_strength(shared: &mut Shared) -> Outcome {
    let scenario = shared.scenario.clone();
    let points =
        experiment::strength_sweep(shared.pools(), &scenario, &[0.05, 0.1, 0.2]).expect("sweep");
    let meds: Vec<Option<f64>> = points.iter().map(|p| p.d_adv_med).collect();
    let pass =
        meds.iter().all(Option::is_some) && meds.windows(2).all(|w| w[0].unwrap() <= w[1].unwrap());
    let notes: Vec<String> = points
        .iter()
        .map(|p| {
            format!(
                "ε={}: medΔadv {} NBR {:?}",
                p.epsilon,
                p.d_adv_med.map_or("none".into(), |d| format!("{d:.3}")),
                p.report.nbrs()
            )
        })
        .collect();
    outcome(pass, notes.join("; "))
}

// 8. Adaptive attacks.
fn c8_adaptive(shared: &mut Shared) -> Outcome {
    let base = shared.scenario.clone();
    let plain = score_game(&base, shared.game(), 0.05)
        .expect("score")
        .nbr_mean;
    let mut notes = vec![format!("plain NBR {plain:.2}")];
    let mut pass = true;
    for kind in [
        AttackKind::PgdDropout { p_drop: 0.1 },
        AttackKind::PgdLowConfidence { target_prob: 0.95 },
    ] {
        let s = BreachScenario {
            attack: kind,
            ..base.clone()
        };
        let records = record_game(shared.pools(), &s).expect("game");
        let n = score_game(&s, &records, 0.05).expect("score").nbr_mean;
        pass &= plain - n <= 2.0;
        notes.push(format!("{} NBR {n:.2}", kind.name()));
    }
    let ratios = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
    let mut prune = Vec::new();
    for r in ratios {
        let s = BreachScenario {
            surrogate: Some(SurrogateSpec {
                prune_ratio: r,
                ..SurrogateSpec::default()
            }),
            ..base.clone()
        };
        let records = record_game(shared.pools(), &s).expect("game");
        prune.push(score_game(&s, &records, 0.05).expect("score").nbr_mean);
    }
    let min = prune.iter().cloned().fold(f64::INFINITY, f64::min);
    pass &= prune[5] >= min;
    notes.push(format!(
        "prune NBR {}",
        ratios
            .iter()
            .zip(&prune)
            .map(|(r, n)| format!("{r}:{n:.2}"))
            .collect::<Vec<_>>()
            .join(" ")
    ));
    outcome(pass, notes.join("; "))
}

// 9. Soft nearest neighbour loss.
fn snnl_brute(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let n = rows.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let w = (-d2(&rows[i], &rows[j])).exp();
            den += w;
            if labels[j] == labels[i] {
                num += w;
            }
        }
        if num > 0.0 {
            total += (num / den).ln();
        }
    }
    -total / n as f64
}

fn c9_snnl() -> Outcome {
    let same = [0.3, -1.2, 0.7];
    let rows: Vec<&[f64]> = vec![&same; 4];
    let v = versioning::snnl(&rows, &[0, 0, 1, 1]).expect("snnl").value;
    let ident = (v - 3f64.ln()).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let dim = rng.random_range(1..=5);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let got = versioning::snnl(&refs, &labels).expect("snnl").value;
        worst = worst.max((got - snnl_brute(&rows, &labels)).abs());
    }
    outcome(
        ident <= 1e-9 && worst <= 1e-12,
        format!("|SNNL − ln 3| = {ident:.1e}; max |SNNL − brute force| over 50 random N=6 sets = {worst:.1e}"),
    )
}

// 10. Gateway end to end.
struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(addr: std::net::SocketAddr) -> Self {
        let s = TcpStream::connect(addr).expect("connect");
        Self {
            reader: BufReader::new(s.try_clone().expect("clone")),
            writer: s,
        }
    }

    fn call(&mut self, line: &str) -> Value {
        self.writer.write_all(line.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
        let mut out = String::new();
        self.reader.read_line(&mut out).unwrap();
        serde_json::from_str(&out).expect("response is JSON")
    }

    fn classify(&mut self, x: &[f64]) -> Value {
        self.call(&serde_json::json!({ "classify": x }).to_string())
    }
}

fn c10_gateway(shared: &Shared) -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let task = shared.task.clone();
    let mut store = VersionStore::open(dir.path()).expect("store");
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    store
        .retire_and_replace(&task, DEFAULT_SIGMA0, &shared.config, &mut rng)
        .expect("v1");
    let v1 = store.deployed().expect("v1").model.clone();

    let mut requests = Vec::new();
    for s in &task.test {
        if requests.len() == 100 {
            break;
        }
        if v1.predict(&s.x).unwrap() == s.label {
            let t = attacks::choose_target(&mut rng, task.num_classes, &[s.label]).unwrap();
            requests.push((s.x.clone(), t));
        }
    }
    let stored =
        attacks::attack_batch(AttackKind::Pgd, &[&v1], &requests, &AttackBudget::default())
            .expect("attacks");

    let cfg = GatewayConfig {
        train: shared.config.clone(),
        rotation_seed: 10,
        ..GatewayConfig::default()
    };
    let gw = Arc::new(Gateway::new(store, task.clone(), cfg).expect("gateway"));
    let server = gateway::serve(gw, "127.0.0.1:0").expect("serve");
    let addr = server.local_addr();
    let mut c = Client::connect(addr);

    let before = c.classify(&task.test[0].x);
    let pre_ok = before["flagged"] == false && before["delta"].is_null();
    let b = c.call("{\"breach\": null}");
    let mut published: HashMap<u64, f64> = HashMap::new();
    published.insert(
        b["rotated_to"].as_u64().unwrap(),
        b["threshold"].as_f64().unwrap(),
    );

    let (mut flagged, mut transferred, mut flagged_transferred) = (0, 0, 0);
    for e in &stored {
        let r = c.classify(&e.perturbed);
        let f = r["flagged"] == true;
        let hit = r["label"].as_u64() == Some(e.target as u64);
        flagged += f as usize;
        transferred += hit as usize;
        flagged_transferred += (f && hit) as usize;
    }
    let benign_flags = task
        .test
        .iter()
        .filter(|s| c.classify(&s.x)["flagged"] == true)
        .count();
    let benign_rate = benign_flags as f64 / task.test.len() as f64;
    let stored_rate = flagged as f64 / stored.len() as f64;

    // Concurrency: 16 streams classify while the operator rotates three more times.
    let done = Arc::new(AtomicBool::new(false));
    let seen: Arc<Mutex<Vec<(usize, Value)>>> = Arc::new(Mutex::new(Vec::new()));
    let streams: Vec<_> = (0..16)
        .map(|k| {
            let (done, seen, task) = (done.clone(), seen.clone(), task.clone());
            std::thread::spawn(move || {
                let mut c = Client::connect(addr);
                let mut local = Vec::new();
                let mut i = k;
                while local.len() < 625 || !done.load(Ordering::SeqCst) {
                    let idx = i % task.test.len();
                    local.push((idx, c.classify(&task.test[idx].x)));
                    i += 16;
                    std::thread::sleep(Duration::from_millis(2));
                }
                seen.lock().unwrap().extend(local);
            })
        })
        .collect();
    for _ in 0..3 {
        let b = c.call("\"breach\"");
        published.insert(
            b["rotated_to"].as_u64().unwrap(),
            b["threshold"].as_f64().unwrap(),
        );
    }
    done.store(true, Ordering::SeqCst);
    for s in streams {
        s.join().unwrap();
    }
    let status = c.call("\"status\"");
    server.shutdown();

    // Replay every response against the persisted versions.
    let store = VersionStore::open(dir.path()).expect("reopen");
    let seen = seen.lock().unwrap();
    let mut mixed = 0;
    let mut versions_seen = BTreeSet::new();
    for (idx, r) in seen.iter() {
        let v = r["version"].as_u64().unwrap();
        versions_seen.insert(v);
        let deployed = &store.get(v).unwrap().model;
        let breached: Vec<&MlpModel> = store
            .versions()
            .iter()
            .filter(|m| m.id < v)
            .map(|m| &m.model)
            .collect();
        let rep = filter::delta_report(&task.test[*idx].x, deployed, &breached).unwrap();
        let t = r["threshold"].as_f64();
        let consistent = t == published.get(&v).copied()
            && r["delta"].as_f64() == Some(rep.delta_max)
            && r["label"].as_u64() == Some(rep.label as u64)
            && (r["flagged"] == true) == (rep.delta_max >= t.unwrap_or(f64::INFINITY));
        mixed += (!consistent) as usize;
    }
    let pass = pre_ok
        && stored_rate >= 0.85
        && benign_rate <= 0.07
        && mixed == 0
        && seen.len() >= 10_000
        && versions_seen.len() >= 2;
    outcome(
        pass,
        format!(
            "stored attacks flagged {:.1}% ({} of {} transferred to v2, {} of those flagged); benign flagged {:.1}%; \
             {} concurrent responses over versions {:?}, {} inconsistent; rotations {}, mean latency {:.0}µs",
            100.0 * stored_rate,
            transferred,
            stored.len(),
            flagged_transferred,
            100.0 * benign_rate,
            seen.len(),
            versions_seen,
            mixed,
            status["rotations"],
            status["latency_us"]["mean"].as_f64().unwrap_or(f64::NAN)
        ),
    )
}

const NAMES: [&str; 10] = [
    "theory worked example",
    "gradient suite",
    "version accuracy",
    "single-breach filter",
    "ensemble degradation",
    "NBR floor",
    "attack strength",
    "adaptive attacks",
    "SNNL",
    "gateway",
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let strict = args.iter().any(|a| a == "--strict");
    let wanted: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let run = |k: usize| wanted.is_empty() || wanted.contains(&k);
    let mut shared = Shared::new();
    let mut failures = 0;
    for k in 1..=10 {
        if !run(k) {
            continue;
        }
        let start = Instant::now();
        let o = match k {
            1 => c1_theory(),
            2 => c2_gradients(),
            3 => c3_versions(&shared),
            4 => c4_single_breach(&shared),
            5 => c5_ensemble(&mut shared),
            6 => c6_nbr(&mut shared),
            7 => c7_strength(&mut shared),
            8 => c8_adaptive(&mut shared),
            9 => c9_snnl(),
            _ => c10_gateway(&shared),
        };
        failures += (!o.pass) as usize;
        println!(
            "[{}] {k:>2} {} ({:.1}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            NAMES[k - 1],
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("{failures} failing criteria");
    if strict && failures > 0 {
        std::process::exit(1);
    }
}
