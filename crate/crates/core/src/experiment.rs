//! The multi-breach game.
//!
//! A trial owns a pool of versions trained one after another. In round `i`
//! versions `1..=i` have leaked, the attacker crafts examples against all of
//! them jointly, and version `i + 1` is deployed behind a filter calibrated
//! against the leaked set. The attack does not depend on the threshold, so a
//! round is recorded once as raw `Δmax` values and can be scored at any FPR.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AdvExample, AttackBudget, AttackKind};
use crate::distributions::{TaskDataset, DEFAULT_SIGMA0};
use crate::error::{invalid, io_err, Error, Result};
use crate::filter::{self, delta_report};
use crate::nnet::{MlpModel, TrainConfig};
use crate::seed;
use crate::versioning::{ModelVersion, VersionStore};

const SEED_TAG_POOL: u64 = 0x504f_4f4c;
const SEED_TAG_INPUTS: u64 = 0x494e_5054;
const SEED_TAG_TARGETS: u64 = 0x5447_5453;
const SEED_TAG_ATTACK: u64 = 0x4154_4b53;
const SEED_TAG_SURROGATE: u64 = 0x5355_5252;

/// The attacker's prune-and-finetune step, applied to every leaked version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSpec {
    pub prune_ratio: f64,
    pub data_fraction: f64,
    pub finetune_epochs: usize,
    pub learning_rate: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            prune_ratio: 0.0,
            data_fraction: 0.1,
            finetune_epochs: 10,
            learning_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BreachScenario {
    /// Number of breaches simulated per trial.
    pub horizon: usize,
    pub attack: AttackKind,
    pub budget: AttackBudget,
    pub target_fpr: f64,
    /// A round counts as recovered while post-filter success stays at or
    /// below this rate.
    pub nbr_cutoff: f64,
    pub n_attack_inputs: usize,
    pub trials: usize,
    pub seed: u64,
    pub sigma0: f64,
    /// When set, the attacker crafts on prune-and-finetune surrogates.
    pub surrogate: Option<SurrogateSpec>,
    /// Stop a trial at its first unrecovered round.
    pub stop_on_failure: bool,
}

impl Default for BreachScenario {
    fn default() -> Self {
        Self {
            horizon: 12,
            attack: AttackKind::Pgd,
            budget: AttackBudget::default(),
            target_fpr: 0.05,
            nbr_cutoff: 0.2,
            n_attack_inputs: 100,
            trials: 3,
            seed: 0,
            sigma0: DEFAULT_SIGMA0,
            surrogate: None,
            stop_on_failure: false,
        }
    }
}

impl BreachScenario {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(invalid("horizon must be at least 1"));
        }
        if !(self.nbr_cutoff > 0.0 && self.nbr_cutoff < 1.0) {
            return Err(invalid("nbr_cutoff must be in (0, 1)"));
        }
        if !(0.0..=0.5).contains(&self.target_fpr) {
            return Err(invalid("target_fpr must be in [0, 0.5]"));
        }
        if self.n_attack_inputs < 100 {
            return Err(invalid("n_attack_inputs must be at least 100"));
        }
        if self.trials == 0 {
            return Err(invalid("trials must be at least 1"));
        }
        if !(self.sigma0 > 0.0) {
            return Err(invalid("sigma0 must be positive"));
        }
        if let Some(s) = &self.surrogate {
            if !(0.0..=0.5).contains(&s.prune_ratio) {
                return Err(invalid("prune_ratio must be in [0, 0.5]"));
            }
        }
        self.budget.validate()
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        seed::derive(self.seed, trial as u64)
    }
}

/// Versions of one trial, trained lazily in deployment order.
pub struct VersionPool {
    task: Arc<TaskDataset>,
    config: TrainConfig,
    sigma0: f64,
    store: VersionStore,
    rng: rand_chacha::ChaCha8Rng,
}

impl VersionPool {
    pub fn new(task: Arc<TaskDataset>, config: TrainConfig, sigma0: f64, seed: u64) -> Self {
        Self {
            task,
            config,
            sigma0,
            store: VersionStore::in_memory(),
            rng: seed::rng_for(seed, SEED_TAG_POOL),
        }
    }

    pub fn task(&self) -> &TaskDataset {
        &self.task
    }

    /// Trains versions until at least `n` exist.
    pub fn ensure(&mut self, n: usize) -> Result<()> {
        while self.store.versions().len() < n {
            let round = self.store.versions().len();
            self.store
                .retire_and_replace(&self.task, self.sigma0, &self.config, &mut self.rng)
                .map_err(|e| Error::Round {
                    round,
                    source: Box::new(e),
                })?;
        }
        Ok(())
    }

    /// Versions in deployment order (index 0 is version 1).
    pub fn versions(&self) -> &[ModelVersion] {
        self.store.versions()
    }
}

/// Per-example outcome against the deployed version.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvOutcome {
    pub delta_max: f64,
    /// The deployed version predicts the attack target.
    pub transferred: bool,
    /// Every attacked model predicts the attack target.
    pub source_success: bool,
}

/// Everything measured in one round, independent of the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub deployed_id: u64,
    pub breached_ids: Vec<u64>,
    pub benign_accuracy: f64,
    /// Sorted benign `Δmax` on the validation split (calibration data).
    pub validation_deltas: Vec<f64>,
    /// Sorted benign `Δmax` on the test split (holdout for realized FPR).
    pub holdout_deltas: Vec<f64>,
    pub adversarial: Vec<AdvOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    pub pre_transfer: f64,
    pub post_success: f64,
    pub filter_rate: f64,
    pub fpr_realized: f64,
    pub benign_acc: f64,
    pub d_benign_med: f64,
    /// Median `Δmax` over transferred examples; `None` when nothing transferred.
    pub d_adv_med: Option<f64>,
    pub threshold: f64,
    pub source_success: f64,
}

fn median_sorted(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => Some(0.5 * (sorted[n / 2 - 1] + sorted[n / 2])),
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    median_sorted(&v)
}

impl RoundRecord {
    pub fn threshold(&self, fpr: f64) -> Result<f64> {
        filter::percentile_threshold(&self.validation_deltas, fpr)
    }

    /// `Δmax` of the examples that transferred.
    pub fn transferred_deltas(&self) -> Vec<f64> {
        self.adversarial
            .iter()
            .filter(|a| a.transferred)
            .map(|a| a.delta_max)
            .collect()
    }

    pub fn score(&self, fpr: f64) -> Result<RoundResult> {
        let t = self.threshold(fpr)?;
        let n = self.adversarial.len();
        let rate = |k: usize, d: usize| if d == 0 { 0.0 } else { k as f64 / d as f64 };
        let transferred = self.adversarial.iter().filter(|a| a.transferred).count();
        let slipped = self
            .adversarial
            .iter()
            .filter(|a| a.transferred && a.delta_max < t)
            .count();
        let source = self.adversarial.iter().filter(|a| a.source_success).count();
        let false_pos = self.holdout_deltas.iter().filter(|&&d| d >= t).count();
        Ok(RoundResult {
            round: self.round,
            pre_transfer: rate(transferred, n),
            post_success: rate(slipped, n),
            filter_rate: if transferred == 0 {
                1.0
            } else {
                rate(transferred - slipped, transferred)
            },
            fpr_realized: rate(false_pos, self.holdout_deltas.len()),
            benign_acc: self.benign_accuracy,
            d_benign_med: median_sorted(&self.validation_deltas).unwrap_or(0.0),
            d_adv_med: median(&self.transferred_deltas()),
            threshold: t,
            source_success: rate(source, n),
        })
    }
}

/// Consecutive recovered rounds counted from round 1.
pub fn nbr(rounds: &[RoundResult], cutoff: f64) -> usize {
    rounds
        .iter()
        .take_while(|r| r.post_success <= cutoff)
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub nbr: usize,
    pub rounds: Vec<RoundResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameReport {
    pub scenario: BreachScenario,
    pub target_fpr: f64,
    pub trials: Vec<TrialReport>,
    pub nbr_mean: f64,
    pub nbr_std: f64,
}

impl GameReport {
    pub fn nbrs(&self) -> Vec<usize> {
        self.trials.iter().map(|t| t.nbr).collect()
    }
}

/// Raw records of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub rounds: Vec<RoundRecord>,
}

/// Attack inputs of a round: test inputs the deployed version gets right,
/// each paired with a random target that is neither the true label nor
/// the prediction of any attacked model.
fn attack_requests(
    task: &TaskDataset,
    deployed: &MlpModel,
    attacked: &[&MlpModel],
    n: usize,
    trial_seed: u64,
    round: usize,
) -> Result<Vec<(Vec<f64>, usize)>> {
    let mut order: Vec<usize> = (0..task.test.len()).collect();
    order.shuffle(&mut seed::rng_for(trial_seed, SEED_TAG_INPUTS));
    let mut targets = seed::rng_for(seed::derive(trial_seed, SEED_TAG_TARGETS), round as u64);
    let mut out = Vec::with_capacity(n);
    for i in order {
        if out.len() == n {
            break;
        }
        let s = &task.test[i];
        if deployed.predict(&s.x)? != s.label {
            continue;
        }
        let mut exclude = vec![s.label];
        for m in attacked {
            exclude.push(m.predict(&s.x)?);
        }
        if let Some(t) = attacks::choose_target(&mut targets, task.num_classes, &exclude) {
            out.push((s.x.clone(), t));
        }
    }
    Ok(out)
}

/// Builds the attacker's models for a round.
fn attacker_models(
    task: &TaskDataset,
    breached: &[&ModelVersion],
    scenario: &BreachScenario,
    trial_seed: u64,
) -> Result<Vec<MlpModel>> {
    let Some(spec) = &scenario.surrogate else {
        return Ok(breached.iter().map(|v| v.model.clone()).collect());
    };
    breached
        .iter()
        .map(|v| {
            let cfg = TrainConfig {
                epochs: spec.finetune_epochs,
                learning_rate: spec.learning_rate,
                seed: seed::derive(seed::derive(trial_seed, SEED_TAG_SURROGATE), v.id),
                ..v.config.clone()
            };
            attacks::prune_finetune(&v.model, task, spec.prune_ratio, spec.data_fraction, &cfg)
        })
        .collect()
}

/// Plays one round against versions `1..=round` with version `round + 1`
/// deployed. Returns the raw record and the crafted examples.
pub fn play_round(
    pool: &mut VersionPool,
    scenario: &BreachScenario,
    round: usize,
    trial_seed: u64,
) -> Result<(RoundRecord, Vec<AdvExample>)> {
    let wrap = |e: Error| Error::Round {
        round,
        source: Box::new(e),
    };
    pool.ensure(round + 1)?;
    let task = pool.task.clone();
    let versions = pool.versions();
    let deployed = &versions[round];
    let breached: Vec<&ModelVersion> = versions[..round].iter().collect();
    let breached_models: Vec<&MlpModel> = breached.iter().map(|v| &v.model).collect();

    let validation_deltas = filter::benign_deltas(
        &deployed.model,
        &breached_models,
        task.validation.iter().map(|s| s.x.as_slice()),
    )
    .map_err(wrap)?;
    let holdout_deltas = filter::benign_deltas(
        &deployed.model,
        &breached_models,
        task.test.iter().map(|s| s.x.as_slice()),
    )
    .map_err(wrap)?;

    let surrogates = attacker_models(&task, &breached, scenario, trial_seed).map_err(wrap)?;
    let attacked: Vec<&MlpModel> = surrogates.iter().collect();
    let requests = attack_requests(
        &task,
        &deployed.model,
        &attacked,
        scenario.n_attack_inputs,
        trial_seed,
        round,
    )
    .map_err(wrap)?;
    let budget = AttackBudget {
        seed: seed::derive(seed::derive(trial_seed, SEED_TAG_ATTACK), round as u64),
        ..scenario.budget.clone()
    };
    let ids: Vec<u64> = breached.iter().map(|v| v.id).collect();
    let examples: Vec<AdvExample> =
        attacks::attack_batch(scenario.attack, &attacked, &requests, &budget)
            .map_err(wrap)?
            .into_iter()
            .map(|e| e.with_model_ids(ids.clone()))
            .collect();
    let adversarial = examples
        .iter()
        .map(|e| {
            let r = delta_report(&e.perturbed, &deployed.model, &breached_models)?;
            Ok(AdvOutcome {
                delta_max: r.delta_max,
                transferred: r.label == e.target,
                source_success: e.success,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(wrap)?;

    let record = RoundRecord {
        round,
        deployed_id: deployed.id,
        breached_ids: ids,
        benign_accuracy: deployed.benign_accuracy,
        validation_deltas,
        holdout_deltas,
        adversarial,
    };
    Ok((record, examples))
}

/// Plays rounds `1..=horizon` of one trial.
pub fn run_trial(
    pool: &mut VersionPool,
    scenario: &BreachScenario,
    trial: usize,
) -> Result<TrialRecord> {
    scenario.validate()?;
    let trial_seed = scenario.trial_seed(trial);
    let mut rounds = Vec::with_capacity(scenario.horizon);
    for round in 1..=scenario.horizon {
        let (record, _) = play_round(pool, scenario, round, trial_seed)?;
        let failed = record.score(scenario.target_fpr)?.post_success > scenario.nbr_cutoff;
        rounds.push(record);
        if failed && scenario.stop_on_failure {
            break;
        }
    }
    Ok(TrialRecord {
        trial,
        seed: trial_seed,
        rounds,
    })
}

/// Builds one pool per trial for `scenario`.
pub fn make_pools(
    task: Arc<TaskDataset>,
    config: &TrainConfig,
    scenario: &BreachScenario,
) -> Vec<VersionPool> {
    (0..scenario.trials)
        .map(|t| {
            VersionPool::new(
                task.clone(),
                config.clone(),
                scenario.sigma0,
                scenario.trial_seed(t),
            )
        })
        .collect()
}

/// Plays every trial on the given pools.
pub fn record_game(
    pools: &mut [VersionPool],
    scenario: &BreachScenario,
) -> Result<Vec<TrialRecord>> {
    if pools.len() < scenario.trials {
        return Err(invalid(format!(
            "{} trials need as many pools, got {}",
            scenario.trials,
            pools.len()
        )));
    }
    pools[..scenario.trials]
        .par_iter_mut()
        .enumerate()
        .map(|(t, pool)| run_trial(pool, scenario, t))
        .collect()
}

/// Scores recorded trials at one FPR.
pub fn score_game(
    scenario: &BreachScenario,
    records: &[TrialRecord],
    fpr: f64,
) -> Result<GameReport> {
    let trials = records
        .iter()
        .map(|r| {
            let rounds = r
                .rounds
                .iter()
                .map(|x| x.score(fpr))
                .collect::<Result<Vec<_>>>()?;
            Ok(TrialReport {
                trial: r.trial,
                seed: r.seed,
                nbr: nbr(&rounds, scenario.nbr_cutoff),
                rounds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let nbrs: Vec<f64> = trials.iter().map(|t| t.nbr as f64).collect();
    let mean = nbrs.iter().sum::<f64>() / nbrs.len().max(1) as f64;
    let var = nbrs.iter().map(|n| (n - mean).powi(2)).sum::<f64>() / nbrs.len().max(1) as f64;
    Ok(GameReport {
        scenario: scenario.clone(),
        target_fpr: fpr,
        trials,
        nbr_mean: mean,
        nbr_std: var.sqrt(),
    })
}

/// Trains pools for every trial, plays the game and scores it at the
/// scenario's FPR.
pub fn run_breach_game(
    task: Arc<TaskDataset>,
    config: &TrainConfig,
    scenario: &BreachScenario,
) -> Result<GameReport> {
    scenario.validate()?;
    let mut pools = make_pools(task, config, scenario);
    let records = record_game(&mut pools, scenario)?;
    score_game(scenario, &records, scenario.target_fpr)
}

/// Scores the same recorded game at every FPR in `fprs`.
pub fn fpr_sweep(
    scenario: &BreachScenario,
    records: &[TrialRecord],
    fprs: &[f64],
) -> Result<Vec<GameReport>> {
    if fprs.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid("FPR list must be ascending"));
    }
    fprs.iter()
        .map(|&f| score_game(scenario, records, f))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthPoint {
    pub epsilon: f64,
    /// Median `Δmax` over all transferred examples of all rounds and trials.
    pub d_adv_med: Option<f64>,
    pub report: GameReport,
}

/// Replays the game at each PGD radius (step tied to ε/10) on shared pools.
pub fn strength_sweep(
    pools: &mut [VersionPool],
    scenario: &BreachScenario,
    epsilons: &[f64],
) -> Result<Vec<StrengthPoint>> {
    epsilons
        .iter()
        .map(|&eps| {
            let s = BreachScenario {
                budget: AttackBudget {
                    epsilon: eps,
                    step_size: eps / 10.0,
                    ..scenario.budget.clone()
                },
                ..scenario.clone()
            };
            let records = record_game(pools, &s)?;
            let all: Vec<f64> = records
                .iter()
                .flat_map(|t| t.rounds.iter().flat_map(|r| r.transferred_deltas()))
                .collect();
            Ok(StrengthPoint {
                epsilon: eps,
                d_adv_med: median(&all),
                report: score_game(&s, &records, s.target_fpr)?,
            })
        })
        .collect()
}

/// CSV column order of [`emit_report`].
pub const CSV_COLUMNS: [&str; 9] = [
    "trial",
    "round",
    "pre_transfer",
    "post_success",
    "filter_rate",
    "fpr_realized",
    "benign_acc",
    "d_benign_med",
    "d_adv_med",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub trial: usize,
    pub round: usize,
    pub pre_transfer: f64,
    pub post_success: f64,
    pub filter_rate: f64,
    pub fpr_realized: f64,
    pub benign_acc: f64,
    pub d_benign_med: f64,
    pub d_adv_med: Option<f64>,
}

pub fn csv_rows(report: &GameReport) -> Vec<CsvRow> {
    report
        .trials
        .iter()
        .flat_map(|t| {
            t.rounds.iter().map(move |r| CsvRow {
                trial: t.trial,
                round: r.round,
                pre_transfer: r.pre_transfer,
                post_success: r.post_success,
                filter_rate: r.filter_rate,
                fpr_realized: r.fpr_realized,
                benign_acc: r.benign_acc,
                d_benign_med: r.d_benign_med,
                d_adv_med: r.d_adv_med,
            })
        })
        .collect()
}

pub fn write_csv(path: &Path, rows: &[CsvRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// NBR per trial recomputed from CSV rows, in trial order.
pub fn nbr_from_rows(rows: &[CsvRow], cutoff: f64) -> Vec<(usize, usize)> {
    let mut trials: Vec<usize> = rows.iter().map(|r| r.trial).collect();
    trials.dedup();
    trials
        .into_iter()
        .map(|t| {
            let mut rs: Vec<&CsvRow> = rows.iter().filter(|r| r.trial == t).collect();
            rs.sort_by_key(|r| r.round);
            (
                t,
                rs.iter().take_while(|r| r.post_success <= cutoff).count(),
            )
        })
        .collect()
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
}

/// Writes `rounds.csv` and `summary.json` into `dir`.
pub fn emit_report(report: &GameReport, dir: &Path) -> Result<ReportFiles> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = ReportFiles {
        csv: dir.join("rounds.csv"),
        json: dir.join("summary.json"),
    };
    write_csv(&files.csv, &csv_rows(report))?;
    let json = serde_json::to_string_pretty(report)?;
    fs::write(&files.json, json + "\n").map_err(io_err(&files.json))?;
    Ok(files)
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}
