//! White-box targeted attacks against one or more leaked models.
//!
//! Every attack minimises the mean NLL of the target label over the attacked
//! models (an ensemble of one is the single-model case). Inputs live in the
//! box `[0, 1]^d`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::TaskDataset;
use crate::error::{invalid, io_err, Error, Result};
use crate::nnet::{self, loss_grad_logits, LossKind, MlpModel, TrainConfig};
use crate::seed;

const SEED_TAG_PRUNE: u64 = 0x5052_554e;
const SEED_TAG_SUBSET: u64 = 0x5355_4253;

/// Attack hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackBudget {
    /// L∞ radius for the PGD family.
    pub epsilon: f64,
    /// PGD step size.
    pub step_size: f64,
    /// PGD iterations.
    pub steps: usize,
    /// Range searched for the CW/EAD loss weight `c`.
    pub c_min: f64,
    pub c_max: f64,
    pub search_rounds: usize,
    /// Gradient steps per binary-search round.
    pub inner_steps: usize,
    /// Gradient-descent step for CW/EAD.
    pub learning_rate: f64,
    /// EAD L1 weight.
    pub beta: f64,
    pub seed: u64,
}

impl Default for AttackBudget {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            step_size: 0.01,
            steps: 100,
            c_min: 1e-3,
            c_max: 1e2,
            search_rounds: 6,
            inner_steps: 200,
            learning_rate: 0.01,
            beta: 0.01,
            seed: 0,
        }
    }
}

impl AttackBudget {
    /// Default budget at radius `epsilon` with the step tied to it.
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: epsilon / 10.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.epsilon) || !pos(self.step_size) {
            return Err(invalid("epsilon and step_size must be positive"));
        }
        if !(self.c_min >= 0.0 && self.c_min <= self.c_max && self.c_max.is_finite()) {
            return Err(invalid("c range must satisfy 0 <= c_min <= c_max"));
        }
        if self.search_rounds == 0 {
            return Err(invalid("search_rounds must be at least 1"));
        }
        if !pos(self.learning_rate) {
            return Err(invalid("learning_rate must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid("beta must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    Pgd,
    Cw,
    Ead,
    PgdDropout { p_drop: f64 },
    PgdLowConfidence { target_prob: f64 },
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Pgd => "pgd",
            AttackKind::Cw => "cw",
            AttackKind::Ead => "ead",
            AttackKind::PgdDropout { .. } => "pgd_dropout",
            AttackKind::PgdLowConfidence { .. } => "pgd_low_confidence",
        }
    }
}

/// One crafted example with enough provenance to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvExample {
    pub original: Vec<f64>,
    pub perturbed: Vec<f64>,
    pub target: usize,
    pub attack: AttackKind,
    pub budget: AttackBudget,
    /// Ids of the attacked versions, when the caller knows them.
    #[serde(default)]
    pub model_ids: Vec<u64>,
    /// Target-label NLL on each attacked model at `perturbed`.
    pub final_losses: Vec<f64>,
    /// Whether each attacked model predicts `target` at `perturbed`.
    pub model_success: Vec<bool>,
    pub success: bool,
    /// `c` of the returned example (CW/EAD only).
    #[serde(default)]
    pub c: Option<f64>,
}

impl AdvExample {
    pub fn delta(&self) -> Vec<f64> {
        self.perturbed
            .iter()
            .zip(&self.original)
            .map(|(a, b)| a - b)
            .collect()
    }

    pub fn linf(&self) -> f64 {
        self.delta().iter().fold(0.0, |m, d| m.max(d.abs()))
    }

    pub fn l1(&self) -> f64 {
        self.delta().iter().map(|d| d.abs()).sum()
    }

    pub fn l2(&self) -> f64 {
        self.delta().iter().map(|d| d * d).sum::<f64>().sqrt()
    }

    pub fn with_model_ids(mut self, ids: Vec<u64>) -> Self {
        self.model_ids = ids;
        self
    }
}

fn check_request(models: &[&MlpModel], x: &[f64], target: usize) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| invalid("at least one model is required"))?;
    for m in models {
        if m.input_dim() != first.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: first.input_dim(),
                actual: m.input_dim(),
            });
        }
        if target >= m.num_classes() {
            return Err(Error::LabelOutOfRange {
                label: target,
                num_classes: m.num_classes(),
            });
        }
    }
    if x.len() != first.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: first.input_dim(),
            actual: x.len(),
        });
    }
    Ok(())
}

/// Mean target NLL over `models` at `x`, its input gradient, and the mean
/// target probability.
pub fn ensemble_loss_grad(
    models: &[&MlpModel],
    x: &[f64],
    target: usize,
) -> Result<(f64, Vec<f64>, f64)> {
    let mut grad = vec![0.0; x.len()];
    let mut loss = 0.0;
    let mut prob = 0.0;
    for m in models {
        let trace = m.trace(x)?;
        loss += nnet::loss_from_trace(&trace, target, LossKind::NegLogLikelihood);
        prob += trace.probs()[target];
        let d_logits = loss_grad_logits(&trace, target, LossKind::NegLogLikelihood);
        for (g, v) in grad
            .iter_mut()
            .zip(m.backward(&trace, &d_logits, None, None))
        {
            *g += v;
        }
    }
    let k = models.len() as f64;
    grad.iter_mut().for_each(|g| *g /= k);
    Ok((loss / k, grad, prob / k))
}

/// Per-model target losses and hits at `x`.
pub fn evaluate(models: &[&MlpModel], x: &[f64], target: usize) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut losses = Vec::with_capacity(models.len());
    let mut hits = Vec::with_capacity(models.len());
    for m in models {
        let trace = m.trace(x)?;
        losses.push(nnet::loss_from_trace(
            &trace,
            target,
            LossKind::NegLogLikelihood,
        ));
        hits.push(trace.predicted() == target);
    }
    Ok((losses, hits))
}

fn finish(
    models: &[&MlpModel],
    x: &[f64],
    perturbed: Vec<f64>,
    target: usize,
    attack: AttackKind,
    budget: &AttackBudget,
    c: Option<f64>,
) -> Result<AdvExample> {
    let (final_losses, model_success) = evaluate(models, &perturbed, target)?;
    let success = model_success.iter().all(|&s| s);
    Ok(AdvExample {
        original: x.to_vec(),
        perturbed,
        target,
        attack,
        budget: budget.clone(),
        model_ids: Vec::new(),
        final_losses,
        model_success,
        success,
        c,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Shared PGD loop. `p_drop` masks input pixels before each gradient;
/// `stop_prob` halts once the mean target probability reaches it.
fn pgd_core(
    models: &[&MlpModel],
    x: &[f64],
    target: usize,
    budget: &AttackBudget,
    p_drop: f64,
    stop_prob: Option<f64>,
) -> Result<Vec<f64>> {
    check_request(models, x, target)?;
    budget.validate()?;
    let eps = budget.epsilon;
    let mut rng = seed::rng(budget.seed);
    let mut adv = x.to_vec();
    let mut mask = vec![1.0; x.len()];
    for _ in 0..budget.steps {
        let grad = if p_drop > 0.0 {
            for m in mask.iter_mut() {
                *m = if rng.random::<f64>() < p_drop {
                    0.0
                } else {
                    1.0
                };
            }
            let masked: Vec<f64> = adv.iter().zip(&mask).map(|(a, m)| a * m).collect();
            let (_, g, prob) = ensemble_loss_grad(models, &masked, target)?;
            if stop_prob.is_some_and(|s| prob >= s) {
                break;
            }
            g.iter().zip(&mask).map(|(g, m)| g * m).collect()
        } else {
            let (_, g, prob) = ensemble_loss_grad(models, &adv, target)?;
            if stop_prob.is_some_and(|s| prob >= s) {
                break;
            }
            g
        };
        for ((a, &x0), g) in adv.iter_mut().zip(x).zip(&grad) {
            let d = (*a - budget.step_size * sign(*g) - x0).clamp(-eps, eps);
            *a = (x0 + d).clamp(0.0, 1.0);
        }
    }
    Ok(adv)
}

/// Targeted L∞ PGD from the clean input.
pub fn pgd(
    models: &[&MlpModel],
    x: &[f64],
    target: usize,
    budget: &AttackBudget,
) -> Result<AdvExample> {
    let adv = pgd_core(models, x, target, budget, 0.0, None)?;
    finish(models, x, adv, target, AttackKind::Pgd, budget, None)
}

/// PGD whose gradients are taken on copies of the input with a random
/// fraction `p_drop` of pixels zeroed.
pub fn pgd_dropout(
    models: &[&MlpModel],
    x: &[f64],
    target: usize,
    budget: &AttackBudget,
    p_drop: f64,
) -> Result<AdvExample> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(invalid("p_drop must be in [0, 1)"));
    }
    let adv = pgd_core(models, x, target, budget, p_drop, None)?;
    finish(
        models,
        x,
        adv,
        target,
        AttackKind::PgdDropout { p_drop },
        budget,
        None,
    )
}

/// PGD that stops as soon as the mean target probability over the attacked
/// models reaches `target_prob`. A cap of 1 or more never triggers.
pub fn pgd_low_confidence(
    models: &[&MlpModel],
    x: &[f64],
    target: usize,
    budget: &AttackBudget,
    target_prob: f64,
) -> Result<AdvExample> {
    if !(target_prob > 0.0) {
        return Err(invalid("target_prob must be positive"));
    }
    let stop = (target_prob < 1.0).then_some(target_prob);
    let adv = pgd_core(models, x, target, budget, 0.0, stop)?;
    finish(
        models,
        x,
        adv,
        target,
        AttackKind::PgdLowConfidence { target_prob },
        budget,
        None,
    )
}

/// Carlini-Wagner style L2 attack: projected gradient descent on
/// `‖δ‖₂² + c·L̄` with a binary search over `c`.
pub fn cw(
    models: &[&MlpModel],
    x: &[f64],
    target: usize,
    budget: &AttackBudget,
) -> Result<AdvExample> {
    elastic_net(models, x, target, budget, 0.0, AttackKind::Cw)
}

/// Elastic-net attack: CW's objective plus `β‖δ‖₁`, handled by soft
/// thresholding after every gradient step. With β = 0 it is exactly CW.
pub fn ead(
    models: &[&MlpModel],
    x: &[f64],
    target: usize,
    budget: &AttackBudget,
) -> Result<AdvExample> {
    elastic_net(models, x, target, budget, budget.beta, AttackKind::Ead)
}

fn elastic_net(
    models: &[&MlpModel],
    x: &[f64],
    target: usize,
    budget: &AttackBudget,
    beta: f64,
    kind: AttackKind,
) -> Result<AdvExample> {
    check_request(models, x, target)?;
    budget.validate()?;
    let lr = budget.learning_rate;
    let shrink = lr * beta;
    let (mut lo, mut hi) = (budget.c_min, budget.c_max);
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    let mut last = x.to_vec();
    let mut last_c = lo;

    for _ in 0..budget.search_rounds {
        let c = if lo > 0.0 {
            (lo * hi).sqrt()
        } else {
            0.5 * (lo + hi)
        };
        let mut delta = vec![0.0; x.len()];
        let mut adv = x.to_vec();
        for _ in 0..budget.inner_steps {
            let (_, g, _) = ensemble_loss_grad(models, &adv, target)?;
            for ((d, &x0), g) in delta.iter_mut().zip(x).zip(&g) {
                let mut v = *d - lr * (2.0 * *d + c * g);
                if shrink > 0.0 {
                    v = if v > shrink {
                        v - shrink
                    } else if v < -shrink {
                        v + shrink
                    } else {
                        0.0
                    };
                }
                *d = (x0 + v).clamp(0.0, 1.0) - x0;
            }
            for ((a, &x0), d) in adv.iter_mut().zip(x).zip(&delta) {
                *a = x0 + d;
            }
        }
        let (_, hits) = evaluate(models, &adv, target)?;
        if hits.iter().all(|&h| h) {
            let l1: f64 = delta.iter().map(|d| d.abs()).sum();
            let l2sq: f64 = delta.iter().map(|d| d * d).sum();
            let cost = beta * l1 + l2sq;
            if best.as_ref().is_none_or(|(b, _, _)| cost < *b) {
                best = Some((cost, adv.clone(), c));
            }
            hi = c;
        } else {
            lo = c;
        }
        last = adv;
        last_c = c;
    }
    match best {
        Some((_, adv, c)) => finish(models, x, adv, target, kind, budget, Some(c)),
        None => finish(models, x, last, target, kind, budget, Some(last_c)),
    }
}

/// Dispatches on `kind`.
pub fn run_attack(
    kind: AttackKind,
    models: &[&MlpModel],
    x: &[f64],
    target: usize,
    budget: &AttackBudget,
) -> Result<AdvExample> {
    match kind {
        AttackKind::Pgd => pgd(models, x, target, budget),
        AttackKind::Cw => cw(models, x, target, budget),
        AttackKind::Ead => ead(models, x, target, budget),
        AttackKind::PgdDropout { p_drop } => pgd_dropout(models, x, target, budget, p_drop),
        AttackKind::PgdLowConfidence { target_prob } => {
            pgd_low_confidence(models, x, target, budget, target_prob)
        }
    }
}

/// Attacks every `(input, target)` pair in parallel. Input `i` runs with seed
/// `derive(budget.seed, i)`.
pub fn attack_batch(
    kind: AttackKind,
    models: &[&MlpModel],
    requests: &[(Vec<f64>, usize)],
    budget: &AttackBudget,
) -> Result<Vec<AdvExample>> {
    requests
        .par_iter()
        .enumerate()
        .map(|(i, (x, t))| {
            let b = AttackBudget {
                seed: seed::derive(budget.seed, i as u64),
                ..budget.clone()
            };
            run_attack(kind, models, x, *t, &b)
        })
        .collect()
}

/// Uniform target label outside `exclude`. Returns `None` when every label is
/// excluded.
pub fn choose_target<R: Rng + ?Sized>(
    rng: &mut R,
    num_classes: usize,
    exclude: &[usize],
) -> Option<usize> {
    let allowed: Vec<usize> = (0..num_classes).filter(|c| !exclude.contains(c)).collect();
    allowed.choose(rng).copied()
}

pub fn write_jsonl(path: &Path, examples: &[AdvExample]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<AdvExample>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// The attacker's prune-and-finetune surrogate: zero a random
/// `⌊ratio·|weights|⌋` of the weights (biases untouched), then finetune on a
/// random `data_fraction` of the training split.
pub fn prune_finetune(
    model: &MlpModel,
    task: &TaskDataset,
    ratio: f64,
    data_fraction: f64,
    config: &TrainConfig,
) -> Result<MlpModel> {
    if !(0.0..=0.5).contains(&ratio) {
        return Err(invalid("prune ratio must be in [0, 0.5]"));
    }
    if !(data_fraction > 0.0 && data_fraction <= 1.0) {
        return Err(invalid("data_fraction must be in (0, 1]"));
    }
    let mut pruned = model.clone();
    let sizes: Vec<usize> = pruned.layers().iter().map(|l| l.weights().len()).collect();
    let total: usize = sizes.iter().sum();
    let k = (ratio * total as f64).floor() as usize;
    let mut rng = seed::rng_for(config.seed, SEED_TAG_PRUNE);
    for flat in index::sample(&mut rng, total, k) {
        let mut i = flat;
        for (layer, &n) in pruned.layers_mut().iter_mut().zip(&sizes) {
            if i < n {
                layer.weights_mut()[i] = 0.0;
                break;
            }
            i -= n;
        }
    }
    if config.epochs == 0 {
        return Ok(pruned);
    }
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    order.shuffle(&mut seed::rng_for(config.seed, SEED_TAG_SUBSET));
    let n = ((data_fraction * task.train.len() as f64).round() as usize).max(1);
    let subset: Vec<_> = order[..n].iter().map(|&i| task.train[i].clone()).collect();
    Ok(nnet::sgd_train(pruned, &subset, None, config, &[])?.model)
}
