//! Loss-gap bound for a pair of 1-D linear regressors under squared loss.
//!
//! `F(x) = a·x + b_F` is the leaked model and `G(x) = a·x + b_G` the
//! replacement, with `D = b_G − b_F ≥ 0`. An attacker optimising on F lands
//! somewhere in F's γ-tight interval around the target `y_t`; the question is
//! how much larger G's loss is there, and whether the attack still reaches
//! G's γ′ tolerance at all.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Minimum Monte-Carlo sample count accepted by [`monte_carlo_verify`].
pub const MIN_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearPair {
    pub a: f64,
    pub b_f: f64,
    pub b_g: f64,
    /// Attack tightness on F: the attacker reaches `ℓ₂(F(x′), y_t) ≤ γ`.
    pub gamma: f64,
    /// Transfer tolerance: the attack counts on G when `ℓ₂(G(x′), y_t) ≤ γ′`.
    pub gamma_prime: f64,
    pub y_t: f64,
}

impl LinearPair {
    /// Validates and normalises so that `b_G ≥ b_F`.
    pub fn new(a: f64, b_f: f64, b_g: f64, gamma: f64, gamma_prime: f64, y_t: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::Precondition("slope a must be positive".into()));
        }
        if !(gamma > 0.0 && gamma_prime > gamma && gamma_prime.is_finite()) {
            return Err(Error::Precondition("need 0 < gamma < gamma_prime".into()));
        }
        if ![b_f, b_g, y_t].iter().all(|v| v.is_finite()) {
            return Err(Error::Precondition(
                "intercepts and target must be finite".into(),
            ));
        }
        let (b_f, b_g) = if b_g >= b_f { (b_f, b_g) } else { (b_g, b_f) };
        Ok(Self {
            a,
            b_f,
            b_g,
            gamma,
            gamma_prime,
            y_t,
        })
    }

    /// Pair with `b_F = 0`, `b_G = D`, unit slope and target 0.
    pub fn with_gap(d: f64, gamma: f64, gamma_prime: f64) -> Result<Self> {
        Self::new(1.0, 0.0, d, gamma, gamma_prime, 0.0)
    }

    pub fn gap(&self) -> f64 {
        self.b_g - self.b_f
    }

    /// F's attack interval `[(y_t − b_F − √γ)/a, (y_t − b_F + √γ)/a]`.
    pub fn attack_interval(&self) -> (f64, f64) {
        let r = self.gamma.sqrt();
        (
            (self.y_t - self.b_f - r) / self.a,
            (self.y_t - self.b_f + r) / self.a,
        )
    }

    pub fn loss_f(&self, x: f64) -> f64 {
        (self.y_t - (self.a * x + self.b_f)).powi(2)
    }

    pub fn loss_g(&self, x: f64) -> f64 {
        (self.y_t - (self.a * x + self.b_g)).powi(2)
    }

    /// `ℓ₂(G) − ℓ₂(F)` at `x`, expanded so that it stays linear in `x`.
    pub fn loss_gap(&self, x: f64) -> f64 {
        2.0 * self.y_t * (self.b_f - self.b_g) + 2.0 * self.a * x * self.gap() + self.b_g * self.b_g
            - self.b_f * self.b_f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferCase {
    /// `D > √γ′ − √γ`: F's attack interval is not contained in G's.
    Case1NoTransfer,
    /// `D ≤ √γ′ − √γ`: every attack on F also lands within G's tolerance.
    Case2Transfers,
}

pub fn transfer_case(pair: &LinearPair) -> TransferCase {
    if pair.gap() > pair.gamma_prime.sqrt() - pair.gamma.sqrt() {
        TransferCase::Case1NoTransfer
    } else {
        TransferCase::Case2Transfers
    }
}

/// The threshold the loss gap exceeds with probability `p` when x′ is
/// uniform over F's attack interval: `D·(D + 2√γ − 4√γ·p)`.
pub fn lower_bound_t(d: f64, gamma: f64, p: f64) -> f64 {
    let r = gamma.sqrt();
    d * (d + 2.0 * r - 4.0 * r * p)
}

/// Closed-form `P[gap > T]` for x′ uniform over the attack interval.
pub fn analytic_probability(d: f64, gamma: f64, t: f64) -> f64 {
    let r = gamma.sqrt();
    if d == 0.0 {
        return if t < 0.0 { 1.0 } else { 0.0 };
    }
    ((d * (d + 2.0 * r) - t) / (4.0 * r * d)).clamp(0.0, 1.0)
}

/// Fraction of `n` uniform draws from F's attack interval whose loss gap
/// exceeds `t`. Only defined when the pair is in the transfer case.
pub fn monte_carlo_verify(pair: &LinearPair, t: f64, n: usize, seed: u64) -> Result<f64> {
    if transfer_case(pair) == TransferCase::Case1NoTransfer {
        return Err(Error::Precondition(
            "pair does not transfer; the bound only applies to transferring attacks".into(),
        ));
    }
    if n < MIN_SAMPLES {
        return Err(Error::Precondition(format!(
            "at least {MIN_SAMPLES} samples are required, got {n}"
        )));
    }
    let (lo, hi) = pair.attack_interval();
    let mut rng = seed::rng(seed);
    let hits = (0..n)
        .filter(|_| pair.loss_gap(rng.random_range(lo..=hi)) > t)
        .count();
    Ok(hits as f64 / n as f64)
}

/// Fraction of `n` uniform draws from F's attack interval that still reach
/// G's tolerance `γ′`.
pub fn transfer_fraction(pair: &LinearPair, n: usize, seed: u64) -> f64 {
    let (lo, hi) = pair.attack_interval();
    let mut rng = seed::rng(seed);
    let hits = (0..n)
        .filter(|_| pair.loss_g(rng.random_range(lo..=hi)) <= pair.gamma_prime)
        .count();
    hits as f64 / n.max(1) as f64
}

/// Normal-approximation 99% interval for a binomial proportion.
pub fn binomial_interval(p: f64, n: usize) -> (f64, f64) {
    let half = 2.576 * (p * (1.0 - p) / n as f64).sqrt();
    ((p - half).max(0.0), (p + half).min(1.0))
}

/// One row of a verification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub d: f64,
    pub gamma: f64,
    pub gamma_prime: f64,
    pub p: f64,
    pub t: f64,
    pub case: TransferCase,
    /// Empirical probability; absent for non-transferring pairs.
    pub empirical: Option<f64>,
    pub interval: Option<(f64, f64)>,
    /// Empirical transfer fraction, reported for non-transferring pairs.
    pub transfer_fraction: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: Vec<GridInput>,
    pub n_samples: usize,
    pub seed: u64,
    /// Allowed |empirical − p|.
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridInput {
    pub d: f64,
    pub gamma: f64,
    pub gamma_prime: f64,
    pub p: f64,
}

impl GridSpec {
    /// The worked example at γ ∈ {0.5, 1, 2}: D = 4√γ, γ′ = 25γ, p = 0.95.
    pub fn worked_example() -> Self {
        let points = [0.5, 1.0, 2.0]
            .iter()
            .map(|&g: &f64| GridInput {
                d: 4.0 * g.sqrt(),
                gamma: g,
                gamma_prime: 25.0 * g,
                p: 0.95,
            })
            .collect();
        Self {
            points,
            n_samples: 1_000_000,
            seed: 0,
            tolerance: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub spec: GridSpec,
    pub rows: Vec<GridPoint>,
    pub all_pass: bool,
}

/// Evaluates every grid point. Transferring pairs pass when the empirical
/// probability at `T = lower_bound_t(D, γ, p)` is within tolerance of `p`;
/// non-transferring pairs pass when some sampled attack fails to reach γ′.
pub fn verify_grid(spec: &GridSpec) -> Result<VerificationReport> {
    let mut rows = Vec::with_capacity(spec.points.len());
    for (i, g) in spec.points.iter().enumerate() {
        if !(0.0..=1.0).contains(&g.p) || g.d < 0.0 {
            return Err(Error::Precondition(format!(
                "grid point {i}: need D >= 0 and p in [0, 1]"
            )));
        }
        let pair = LinearPair::with_gap(g.d, g.gamma, g.gamma_prime)?;
        let t = lower_bound_t(g.d, g.gamma, g.p);
        let case = transfer_case(&pair);
        let shard = seed::derive(spec.seed, i as u64);
        let row = match case {
            TransferCase::Case2Transfers => {
                let emp = monte_carlo_verify(&pair, t, spec.n_samples, shard)?;
                GridPoint {
                    d: g.d,
                    gamma: g.gamma,
                    gamma_prime: g.gamma_prime,
                    p: g.p,
                    t,
                    case,
                    empirical: Some(emp),
                    interval: Some(binomial_interval(emp, spec.n_samples)),
                    transfer_fraction: None,
                    pass: (emp - g.p).abs() <= spec.tolerance,
                }
            }
            TransferCase::Case1NoTransfer => {
                let frac = transfer_fraction(&pair, spec.n_samples, shard);
                GridPoint {
                    d: g.d,
                    gamma: g.gamma,
                    gamma_prime: g.gamma_prime,
                    p: g.p,
                    t,
                    case,
                    empirical: None,
                    interval: None,
                    transfer_fraction: Some(frac),
                    pass: frac < 1.0,
                }
            }
        };
        rows.push(row);
    }
    let all_pass = rows.iter().all(|r| r.pass);
    Ok(VerificationReport {
        spec: spec.clone(),
        rows,
        all_pass,
    })
}
