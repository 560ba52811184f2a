//! Loss-gap filter.
//!
//! For a query `x`, the deployed version predicts `y`. The filter compares
//! the deployed version's NLL at `y` with every breached version's NLL at
//! `y` and keeps the largest gap, `Δmax(x)`. Inputs optimised against a
//! breached version sit in a loss minimum of that version, so the gap is
//! large; benign inputs have similar loss everywhere. A query is flagged when
//! `Δmax(x) ≥ T`, with `T` the `(1 − fpr)` order statistic of `Δmax` over
//! benign validation inputs.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nnet::{argmax, loss_from_trace, LossKind, MlpModel};

/// Calibration needs at least this many benign inputs.
pub const MIN_VALIDATION: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    /// Label predicted by the deployed version.
    pub label: usize,
    pub delta_max: f64,
    /// Some breached version predicts a different label.
    pub label_mismatch: bool,
}

pub fn delta_report(x: &[f64], deployed: &MlpModel, breached: &[&MlpModel]) -> Result<DeltaReport> {
    if breached.is_empty() {
        return Err(invalid("delta_max needs at least one breached version"));
    }
    let trace = deployed.trace(x)?;
    let label = trace.predicted();
    let own = loss_from_trace(&trace, label, LossKind::NegLogLikelihood);
    let mut delta_max = f64::NEG_INFINITY;
    let mut label_mismatch = false;
    for m in breached {
        if m.num_classes() != deployed.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: deployed.num_classes(),
                actual: m.num_classes(),
            });
        }
        let t = m.trace(x)?;
        label_mismatch |= argmax(t.probs()) != label;
        delta_max = delta_max.max(own - loss_from_trace(&t, label, LossKind::NegLogLikelihood));
    }
    Ok(DeltaReport {
        label,
        delta_max,
        label_mismatch,
    })
}

/// `max_j ℓ(F_new(x), y) − ℓ(F_j(x), y)` with `y` the deployed prediction.
pub fn delta_max(x: &[f64], deployed: &MlpModel, breached: &[&MlpModel]) -> Result<f64> {
    Ok(delta_report(x, deployed, breached)?.delta_max)
}

/// Order statistic at 1-based index `⌈(1 − fpr)·n⌉` of the ascending values.
///
/// `fpr = 0` gives the maximum. A tiny tolerance keeps products such as
/// `0.95 · 100` from rounding up to the next index.
pub fn percentile_threshold(sorted: &[f64], target_fpr: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(invalid("no values to take a percentile of"));
    }
    if !(0.0..=0.5).contains(&target_fpr) {
        return Err(invalid("target FPR must lie in [0, 0.5]"));
    }
    let n = sorted.len();
    let k = (((1.0 - target_fpr) * n as f64) - 1e-9)
        .ceil()
        .clamp(1.0, n as f64) as usize;
    Ok(sorted[k - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub target_fpr: f64,
    pub threshold: f64,
    /// Benign `Δmax` values, ascending.
    pub benign_deltas: Vec<f64>,
}

impl Calibration {
    pub fn n_validation(&self) -> usize {
        self.benign_deltas.len()
    }

    /// Threshold for another FPR from the same benign distribution.
    pub fn threshold_at(&self, target_fpr: f64) -> Result<f64> {
        percentile_threshold(&self.benign_deltas, target_fpr)
    }

    pub fn report(&self) -> CalibrationReport {
        CalibrationReport {
            fpr_target: self.target_fpr,
            threshold: self.threshold,
            n_validation: self.n_validation(),
            histogram: DeltaHistogram::of(&self.benign_deltas),
        }
    }
}

/// Benign `Δmax` values from raw inputs.
pub fn benign_deltas<'a>(
    deployed: &MlpModel,
    breached: &[&MlpModel],
    benign: impl IntoIterator<Item = &'a [f64]>,
) -> Result<Vec<f64>> {
    let mut out = benign
        .into_iter()
        .map(|x| delta_max(x, deployed, breached))
        .collect::<Result<Vec<f64>>>()?;
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Threshold at the `(1 − fpr)` percentile of benign `Δmax`.
pub fn calibrate<'a>(
    deployed: &MlpModel,
    breached: &[&MlpModel],
    benign_validation: impl IntoIterator<Item = &'a [f64]>,
    target_fpr: f64,
) -> Result<Calibration> {
    if !(0.0..=0.5).contains(&target_fpr) {
        return Err(invalid("target FPR must lie in [0, 0.5]"));
    }
    let benign_deltas = benign_deltas(deployed, breached, benign_validation)?;
    if benign_deltas.len() < MIN_VALIDATION {
        return Err(invalid(format!(
            "validation set has {} inputs, need at least {MIN_VALIDATION}",
            benign_deltas.len()
        )));
    }
    let threshold = percentile_threshold(&benign_deltas, target_fpr)?;
    Ok(Calibration {
        target_fpr,
        threshold,
        benign_deltas,
    })
}

/// JSON calibration report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub fpr_target: f64,
    pub threshold: f64,
    pub n_validation: usize,
    pub histogram: DeltaHistogram,
}

/// Fixed bins of width 0.25 over `[-2, 4)`, plus under/overflow counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
}

impl DeltaHistogram {
    pub const LOW: f64 = -2.0;
    pub const HIGH: f64 = 4.0;
    pub const WIDTH: f64 = 0.25;

    pub fn of(values: &[f64]) -> Self {
        let bins = ((Self::HIGH - Self::LOW) / Self::WIDTH).round() as usize;
        let bin_edges = (0..=bins)
            .map(|i| Self::LOW + i as f64 * Self::WIDTH)
            .collect();
        let mut counts = vec![0; bins];
        let (mut underflow, mut overflow) = (0, 0);
        for &v in values {
            if v < Self::LOW {
                underflow += 1;
            } else if v >= Self::HIGH {
                overflow += 1;
            } else {
                let i = (((v - Self::LOW) / Self::WIDTH) as usize).min(bins - 1);
                counts[i] += 1;
            }
        }
        Self {
            bin_edges,
            counts,
            underflow,
            overflow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Clean,
    Flagged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub label: usize,
    pub delta_max: f64,
    pub decision: Decision,
    pub label_mismatch: bool,
}

impl FilterVerdict {
    pub fn flagged(&self) -> bool {
        self.decision == Decision::Flagged
    }
}

/// Deployed version, breached versions and (once calibrated) the threshold.
///
/// Immutable after calibration; recalibrating builds a new state.
#[derive(Debug, Clone)]
pub struct FilterState {
    deployed: Arc<MlpModel>,
    breached: Vec<Arc<MlpModel>>,
    calibration: Option<Calibration>,
}

impl FilterState {
    pub fn new(deployed: Arc<MlpModel>, breached: Vec<Arc<MlpModel>>) -> Result<Self> {
        if breached.is_empty() {
            return Err(invalid("filter needs at least one breached version"));
        }
        Ok(Self {
            deployed,
            breached,
            calibration: None,
        })
    }

    pub fn calibrated<'a>(
        self,
        benign_validation: impl IntoIterator<Item = &'a [f64]>,
        target_fpr: f64,
    ) -> Result<Self> {
        let cal = calibrate(
            &self.deployed,
            &self.breached_refs(),
            benign_validation,
            target_fpr,
        )?;
        Ok(Self {
            calibration: Some(cal),
            ..self
        })
    }

    /// State with an explicitly chosen threshold.
    pub fn with_threshold(self, threshold: f64, target_fpr: f64) -> Result<Self> {
        if !threshold.is_finite() {
            return Err(invalid("threshold must be finite"));
        }
        Ok(Self {
            calibration: Some(Calibration {
                target_fpr,
                threshold,
                benign_deltas: Vec::new(),
            }),
            ..self
        })
    }

    pub fn breached_refs(&self) -> Vec<&MlpModel> {
        self.breached.iter().map(|m| m.as_ref()).collect()
    }

    pub fn deployed(&self) -> &MlpModel {
        &self.deployed
    }

    pub fn breached_count(&self) -> usize {
        self.breached.len()
    }

    pub fn calibration(&self) -> Option<&Calibration> {
        self.calibration.as_ref()
    }

    pub fn threshold(&self) -> Option<f64> {
        self.calibration.as_ref().map(|c| c.threshold)
    }
}

/// Flags `x` when `Δmax(x) ≥ T`.
pub fn judge(x: &[f64], state: &FilterState) -> Result<FilterVerdict> {
    let threshold = state.threshold().ok_or(Error::Uncalibrated)?;
    let r = delta_report(x, &state.deployed, &state.breached_refs())?;
    Ok(verdict(r, threshold))
}

pub fn verdict(r: DeltaReport, threshold: f64) -> FilterVerdict {
    FilterVerdict {
        label: r.label,
        delta_max: r.delta_max,
        decision: if r.delta_max >= threshold {
            Decision::Flagged
        } else {
            Decision::Clean
        },
        label_mismatch: r.label_mismatch,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn percentile_definition() {
        let v: Vec<f64> = (1..=100).map(|i| 0.01 * i as f64).collect();
        assert!((percentile_threshold(&v, 0.05).unwrap() - 0.95).abs() < 1e-12);
        assert_eq!(percentile_threshold(&v, 0.0).unwrap(), 1.0);
        let sym: Vec<f64> = (-50..=50).map(|i| i as f64).collect();
        assert_eq!(percentile_threshold(&sym, 0.5).unwrap(), 0.0);
        assert!(percentile_threshold(&v, 0.6).is_err());
    }

    #[test]
    fn identical_versions_have_zero_gap() {
        let m = MlpModel::glorot(5, &[6], 3, &mut seed::rng(1)).unwrap();
        let copy = m.clone();
        let mut rng = seed::rng(2);
        for _ in 0..50 {
            let x: Vec<f64> = (0..5)
                .map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0))
                .collect();
            assert_eq!(delta_max(&x, &m, &[&copy]).unwrap(), 0.0);
        }
    }

    #[test]
    fn verdict_threshold_rule() {
        let r = DeltaReport {
            label: 0,
            delta_max: 1.2,
            label_mismatch: false,
        };
        assert_eq!(verdict(r, 0.95).decision, Decision::Flagged);
        let r = DeltaReport {
            delta_max: 0.0,
            ..r
        };
        assert_eq!(verdict(r, 0.95).decision, Decision::Clean);
        let r = DeltaReport {
            delta_max: 0.95,
            ..r
        };
        assert_eq!(verdict(r, 0.95).decision, Decision::Flagged);
    }

    #[test]
    fn uncalibrated_state_rejected() {
        let m = Arc::new(MlpModel::glorot(3, &[4], 2, &mut seed::rng(1)).unwrap());
        let state = FilterState::new(m.clone(), vec![m.clone()]).unwrap();
        assert!(matches!(
            judge(&[0.1, 0.2, 0.3], &state),
            Err(Error::Uncalibrated)
        ));
        assert!(FilterState::new(m, vec![]).is_err());
    }

    #[test]
    fn calibration_needs_enough_inputs() {
        let m = MlpModel::glorot(3, &[4], 2, &mut seed::rng(1)).unwrap();
        let xs = vec![vec![0.5; 3]; 99];
        assert!(calibrate(&m, &[&m], xs.iter().map(|v| v.as_slice()), 0.05).is_err());
        let xs = vec![vec![0.5; 3]; 100];
        let c = calibrate(&m, &[&m], xs.iter().map(|v| v.as_slice()), 0.05).unwrap();
        assert_eq!(c.threshold, 0.0);
        let rep = c.report();
        assert_eq!(rep.n_validation, 100);
        assert_eq!(rep.histogram.counts.iter().sum::<usize>(), 100);
    }

    #[test]
    fn mismatch_is_reported() {
        let a = MlpModel::glorot(4, &[6], 3, &mut seed::rng(1)).unwrap();
        let b = MlpModel::glorot(4, &[6], 3, &mut seed::rng(2)).unwrap();
        let mut rng = seed::rng(3);
        let mut seen = false;
        for _ in 0..200 {
            let x: Vec<f64> = (0..4)
                .map(|_| rand::Rng::random_range(&mut rng, -3.0..3.0))
                .collect();
            let r = delta_report(&x, &a, &[&b]).unwrap();
            assert_eq!(r.label_mismatch, b.predict(&x).unwrap() != r.label);
            seen |= r.label_mismatch;
        }
        assert!(seen);
    }
}
