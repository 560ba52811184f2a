//! One function per subcommand.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use versionguard::attacks::{self, AdvExample, AttackKind};
use versionguard::distributions::{make_task, TaskDataset};
use versionguard::experiment::{self, csv_rows, GameReport};
use versionguard::filter::{self, FilterState};
use versionguard::gateway::{self, Gateway, GatewayConfig};
use versionguard::seed;
use versionguard::theory::{self, GridSpec, VerificationReport};
use versionguard::versioning::VersionStore;
use versionguard::MlpModel;

use crate::config::{config_error, RunConfig};

fn load_task(cfg: &RunConfig) -> Result<TaskDataset> {
    make_task(&cfg.task, cfg.task_seed()).context("building the task")
}

fn require_path(p: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    p.cloned()
        .ok_or_else(|| config_error(format!("no {what} given (flag or config paths)")))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn train_versions(cfg: &RunConfig, count: usize) -> Result<()> {
    if count == 0 {
        return Err(config_error("count must be at least 1"));
    }
    let root = require_path(cfg.paths.store.as_ref(), "store")?;
    let task = load_task(cfg)?;
    let mut store = VersionStore::open(&root)?;
    if !store.versions().is_empty() {
        return Err(config_error(format!(
            "store {} already holds versions; use a fresh directory",
            root.display()
        )));
    }
    write_json(&root.join("run_config.json"), cfg)?;
    let mut rng = seed::rng(cfg.train.seed);
    for _ in 0..count {
        store.retire_and_replace(&task, cfg.scenario.sigma0, &cfg.train, &mut rng)?;
    }
    println!(
        "{:>4}  {:<9} {:>9} {:>10}",
        "id", "status", "accuracy", "final_loss"
    );
    for v in store.versions() {
        let status = match v.status {
            versionguard::versioning::VersionStatus::Deployed => "deployed",
            versionguard::versioning::VersionStatus::Retired => "retired",
        };
        println!(
            "{:>4}  {:<9} {:>9.4} {:>10.4}",
            v.id,
            status,
            v.benign_accuracy,
            v.final_loss.unwrap_or(f64::NAN)
        );
    }
    let accs: Vec<f64> = store.versions().iter().map(|v| v.benign_accuracy).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64;
    println!("accuracy {:.2} ± {:.2} %", 100.0 * mean, 100.0 * var.sqrt());
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a RunConfig,
    report: &'a GameReport,
}

pub fn breach_game(cfg: &RunConfig) -> Result<()> {
    let out = require_path(cfg.paths.out.as_ref(), "output directory")?;
    let task = Arc::new(load_task(cfg)?);
    let report = experiment::run_breach_game(task, &cfg.train, &cfg.scenario)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    experiment::write_csv(&out.join("rounds.csv"), &csv_rows(&report))?;
    write_json(
        &out.join("summary.json"),
        &Summary {
            config: cfg,
            report: &report,
        },
    )?;
    for t in &report.trials {
        println!("trial {} seed {}: NBR {}", t.trial, t.seed, t.nbr);
    }
    println!(
        "NBR {:.2} ± {:.2} over {} trials at {:.0}% FPR",
        report.nbr_mean,
        report.nbr_std,
        report.trials.len(),
        100.0 * report.target_fpr
    );
    Ok(())
}

fn select_versions<'a>(
    store: &'a VersionStore,
    ids: &[u64],
) -> Result<Vec<&'a versionguard::versioning::ModelVersion>> {
    if ids.is_empty() {
        let d = store
            .deployed()
            .ok_or_else(|| config_error("the store has no deployed version"))?;
        return Ok(vec![d]);
    }
    ids.iter()
        .map(|&id| {
            store
                .get(id)
                .ok_or_else(|| config_error(format!("no version {id} in the store")))
        })
        .collect()
}

pub fn attack(cfg: &RunConfig, count: usize, version_ids: &[u64]) -> Result<()> {
    let root = require_path(cfg.paths.store.as_ref(), "store")?;
    let out = require_path(cfg.paths.out.as_ref(), "output file")?;
    let task = load_task(cfg)?;
    let store = VersionStore::open(&root)?;
    let versions = select_versions(&store, version_ids)?;
    let models: Vec<&MlpModel> = versions.iter().map(|v| &v.model).collect();
    let ids: Vec<u64> = versions.iter().map(|v| v.id).collect();

    let mut rng = seed::rng(cfg.scenario.budget.seed);
    let mut requests = Vec::new();
    for s in &task.test {
        if requests.len() == count {
            break;
        }
        let mut exclude = vec![s.label];
        for m in &models {
            exclude.push(m.predict(&s.x)?);
        }
        if exclude.iter().any(|&p| p != s.label) {
            continue;
        }
        if let Some(t) = attacks::choose_target(&mut rng, task.num_classes, &exclude) {
            requests.push((s.x.clone(), t));
        }
    }
    let examples: Vec<AdvExample> = attacks::attack_batch(
        cfg.scenario.attack,
        &models,
        &requests,
        &cfg.scenario.budget,
    )?
    .into_iter()
    .map(|e| e.with_model_ids(ids.clone()))
    .collect();
    attacks::write_jsonl(&out, &examples)?;
    let ok = examples.iter().filter(|e| e.success).count();
    println!(
        "{} {} examples on versions {:?}: {} succeed ({:.1}%), written to {}",
        examples.len(),
        cfg.scenario.attack.name(),
        ids,
        ok,
        100.0 * ok as f64 / examples.len().max(1) as f64,
        out.display()
    );
    Ok(())
}

pub fn filter_eval(cfg: &RunConfig, adv: Option<&Path>) -> Result<()> {
    let root = require_path(cfg.paths.store.as_ref(), "store")?;
    let task = load_task(cfg)?;
    let store = VersionStore::open(&root)?;
    let deployed = store
        .deployed()
        .ok_or_else(|| config_error("the store has no deployed version"))?;
    let breached: Vec<Arc<MlpModel>> = store.retired().map(|v| Arc::new(v.model.clone())).collect();
    if breached.is_empty() {
        return Err(config_error(
            "filter-eval needs at least one retired version",
        ));
    }
    let fpr = cfg.scenario.target_fpr;
    let state = FilterState::new(Arc::new(deployed.model.clone()), breached)?
        .calibrated(task.validation.iter().map(|s| s.x.as_slice()), fpr)?;
    let threshold = state.threshold().expect("calibrated");
    let mut false_pos = 0;
    for s in &task.test {
        if filter::judge(&s.x, &state)?.flagged() {
            false_pos += 1;
        }
    }
    let mut adv_report = serde_json::Value::Null;
    if let Some(path) = adv {
        let examples = attacks::read_jsonl(path)?;
        let (mut flagged, mut transferred, mut flagged_transferred) = (0usize, 0usize, 0usize);
        let mut deltas = Vec::with_capacity(examples.len());
        for e in &examples {
            let v = filter::judge(&e.perturbed, &state)?;
            deltas.push(v.delta_max);
            let hit = v.label == e.target;
            flagged += v.flagged() as usize;
            transferred += hit as usize;
            flagged_transferred += (hit && v.flagged()) as usize;
        }
        let rate = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        adv_report = json!({
            "file": path,
            "examples": examples.len(),
            "flagged_rate": rate(flagged, examples.len()),
            "transferred": transferred,
            "filter_rate_transferred": if transferred == 0 { 1.0 } else { rate(flagged_transferred, transferred) },
            "post_success": rate(transferred - flagged_transferred, examples.len()),
            "d_adv_med": experiment::median(&deltas),
        });
    }
    let report = json!({
        "config": cfg,
        "deployed": deployed.id,
        "retired": store.retired().map(|v| v.id).collect::<Vec<_>>(),
        "calibration": state.calibration().expect("calibrated").report(),
        "threshold": threshold,
        "fpr_realized": false_pos as f64 / task.test.len().max(1) as f64,
        "adversarial": adv_report,
    });
    let text = serde_json::to_string_pretty(&report)?;
    match &cfg.paths.out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct TheoryOutput<'a> {
    config: &'a RunConfig,
    report: &'a VerificationReport,
}

/// Returns whether every grid point passed.
pub fn theory_check(cfg: &RunConfig, grid: Option<&Path>, samples: Option<usize>) -> Result<bool> {
    let mut spec = match grid {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| config_error(format!("cannot read grid {}: {e}", path.display())))?;
            serde_json::from_str::<GridSpec>(&text)
                .map_err(|e| config_error(format!("bad grid spec: {e}")))?
        }
        None => cfg.theory.clone().unwrap_or_else(GridSpec::worked_example),
    };
    if let Some(n) = samples {
        spec.n_samples = n;
    }
    if spec.n_samples < theory::MIN_SAMPLES {
        return Err(config_error(format!(
            "need at least {} samples",
            theory::MIN_SAMPLES
        )));
    }
    let report = theory::verify_grid(&spec).map_err(|e| match e {
        versionguard::Error::Precondition(m) => config_error(m),
        other => other.into(),
    })?;
    println!(
        "{:>8} {:>8} {:>8} {:>6} {:>10} {:>10} {:>6}",
        "D", "gamma", "gamma'", "p", "T", "measured", "pass"
    );
    for r in &report.rows {
        let measured = r.empirical.or(r.transfer_fraction).unwrap_or(f64::NAN);
        println!(
            "{:>8.4} {:>8.4} {:>8.4} {:>6.3} {:>10.4} {:>10.5} {:>6}",
            r.d, r.gamma, r.gamma_prime, r.p, r.t, measured, r.pass
        );
    }
    if let Some(out) = &cfg.paths.out {
        write_json(
            out,
            &TheoryOutput {
                config: cfg,
                report: &report,
            },
        )?;
    }
    Ok(report.all_pass)
}

pub fn serve(cfg: &RunConfig) -> Result<()> {
    let root = require_path(cfg.paths.store.as_ref(), "store")?;
    let task = Arc::new(load_task(cfg)?);
    let store = VersionStore::open(&root)?;
    if store.deployed().is_none() {
        return Err(config_error(
            "the store has no deployed version; run train-versions first",
        ));
    }
    let gw_cfg = GatewayConfig {
        bind: cfg.serve.bind.clone(),
        target_fpr: cfg.scenario.target_fpr,
        sigma0: cfg.scenario.sigma0,
        train: cfg.train.clone(),
        rotation_seed: cfg.rotation_seed(),
    };
    let gw = Arc::new(Gateway::new(store, task, gw_cfg)?);
    let handle = gateway::serve(gw, &cfg.serve.bind)?;
    println!("listening on {}", handle.local_addr());
    std::io::stdout().flush()?;
    handle.wait();
    Ok(())
}

pub fn attack_kind(name: &str, p_drop: f64, target_prob: f64) -> Result<AttackKind> {
    Ok(match name {
        "pgd" => AttackKind::Pgd,
        "cw" => AttackKind::Cw,
        "ead" => AttackKind::Ead,
        "pgd-dropout" => AttackKind::PgdDropout { p_drop },
        "pgd-low-confidence" => AttackKind::PgdLowConfidence { target_prob },
        other => return Err(config_error(format!("unknown attack {other:?}"))),
    })
}
