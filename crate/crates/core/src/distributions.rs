//! Task data and hidden distributions.
//!
//! The benign task is a set of procedurally drawn glyphs (oriented bars and
//! arcs) with Gaussian pixel noise. Hidden distributions come from a second,
//! unrelated renderer that turns a 16-dimensional latent vector into a
//! sinusoidal texture. A hidden distribution is a small Gaussian ball in
//! latent space around a bounded mean; sampling it and rendering gives the
//! extra training data that distinguishes one model version from another.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::nnet::Sample;
use crate::seed;

/// Latent coordinates are bounded to `[-LATENT_BOUND, LATENT_BOUND]`.
pub const LATENT_BOUND: f64 = 0.5;
pub const DEFAULT_LATENT_DIM: usize = 16;
pub const DEFAULT_SIGMA0: f64 = 0.3;

const SEED_TAG_GLYPH_NOISE: u64 = 0x474c_5950;
const SEED_TAG_SPLIT: u64 = 0x5350_4c54;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlyphParams {
    pub num_classes: usize,
    /// Images are `side × side`.
    pub side: usize,
    pub samples_per_class: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Pixel value is `background + contrast·glyph + noise`, clipped to [0, 1].
    pub contrast: f64,
    pub background: f64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for GlyphParams {
    fn default() -> Self {
        Self {
            num_classes: 10,
            side: 8,
            samples_per_class: 300,
            noise: 0.1,
            contrast: 0.6,
            background: 0.5,
            train_fraction: 0.6,
            validation_fraction: 0.2,
        }
    }
}

impl GlyphParams {
    pub fn validate(&self) -> Result<()> {
        if !(2..=26).contains(&self.num_classes) {
            return Err(invalid("num_classes must be in [2, 26]"));
        }
        if !(8..=16).contains(&self.side) {
            return Err(invalid("side must be in [8, 16]"));
        }
        if self.samples_per_class < 50 {
            return Err(invalid("samples_per_class must be at least 50"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid("noise must be non-negative"));
        }
        if !(self.contrast > 0.0 && (0.0..1.0).contains(&self.background)) {
            return Err(invalid(
                "contrast must be positive and background in [0, 1)",
            ));
        }
        validate_split(self.train_fraction, self.validation_fraction)
    }
}

fn validate_split(train: f64, validation: f64) -> Result<()> {
    if !(train > 0.0 && validation >= 0.0 && train + validation <= 1.0) {
        return Err(invalid(
            "split fractions must satisfy train > 0, validation >= 0, sum <= 1",
        ));
    }
    Ok(())
}

/// Where task data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSource {
    SyntheticGlyphs(GlyphParams),
    /// CSV file, one row per sample: label followed by pixel values in `[0, 1]`.
    FromFile {
        path: std::path::PathBuf,
        train_fraction: f64,
        validation_fraction: f64,
    },
}

impl Default for TaskSource {
    fn default() -> Self {
        TaskSource::SyntheticGlyphs(GlyphParams::default())
    }
}

/// Classification task split into train, validation and test parts.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskDataset {
    /// Side length when the input is a square image.
    pub fn side(&self) -> Option<usize> {
        let s = (self.input_dim as f64).sqrt().round() as usize;
        (s * s == self.input_dim).then_some(s)
    }

    /// Writes train, validation and test (in that order) as CSV rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)?;
        for s in self.train.iter().chain(&self.validation).chain(&self.test) {
            let mut row = Vec::with_capacity(s.x.len() + 1);
            row.push(s.label.to_string());
            row.extend(s.x.iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush().map_err(io_err(path))
    }
}

pub fn make_task(source: &TaskSource, seed: u64) -> Result<TaskDataset> {
    match source {
        TaskSource::SyntheticGlyphs(p) => glyph_task(p, seed),
        TaskSource::FromFile {
            path,
            train_fraction,
            validation_fraction,
        } => {
            validate_split(*train_fraction, *validation_fraction)?;
            let samples = read_csv_samples(path)?;
            split_task(samples, *train_fraction, *validation_fraction, seed)
        }
    }
}

/// Noise-free glyph for `class`, pixel values in `[0, 1]`.
///
/// Even classes are bars through the centre, odd classes are half-circle
/// arcs; each family spreads its members evenly over orientation.
pub fn glyph_template(class: usize, num_classes: usize, side: usize) -> Vec<f64> {
    const WIDTH: f64 = 0.18;
    let bars = num_classes.div_ceil(2);
    let arcs = num_classes / 2;
    let k = class / 2;
    let mut img = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let u = 2.0 * (col as f64 + 0.5) / side as f64 - 1.0;
            let v = 2.0 * (row as f64 + 0.5) / side as f64 - 1.0;
            let dist = if class.is_multiple_of(2) {
                let theta = PI * k as f64 / bars as f64;
                segment_distance(u, v, theta.cos(), theta.sin(), 0.8)
            } else {
                let phi = 2.0 * PI * k as f64 / arcs.max(1) as f64;
                arc_distance(u, v, 0.55, phi)
            };
            img.push((-(dist / WIDTH).powi(2)).exp());
        }
    }
    img
}

fn segment_distance(u: f64, v: f64, dx: f64, dy: f64, half_len: f64) -> f64 {
    let t = (u * dx + v * dy).clamp(-half_len, half_len);
    ((u - t * dx).powi(2) + (v - t * dy).powi(2)).sqrt()
}

/// Distance to the half circle of radius `r` centred on direction `phi`.
fn arc_distance(u: f64, v: f64, r: f64, phi: f64) -> f64 {
    let ang = v.atan2(u);
    let mut rel = ang - phi;
    while rel > PI {
        rel -= 2.0 * PI;
    }
    while rel < -PI {
        rel += 2.0 * PI;
    }
    if rel.abs() <= PI / 2.0 {
        ((u * u + v * v).sqrt() - r).abs()
    } else {
        let (e1, e2) = (phi + PI / 2.0, phi - PI / 2.0);
        let d1 = ((u - r * e1.cos()).powi(2) + (v - r * e1.sin()).powi(2)).sqrt();
        let d2 = ((u - r * e2.cos()).powi(2) + (v - r * e2.sin()).powi(2)).sqrt();
        d1.min(d2)
    }
}

fn glyph_task(p: &GlyphParams, seed: u64) -> Result<TaskDataset> {
    p.validate()?;
    let mut rng = seed::rng_for(seed, SEED_TAG_GLYPH_NOISE);
    let mut samples = Vec::with_capacity(p.num_classes * p.samples_per_class);
    for class in 0..p.num_classes {
        let template = glyph_template(class, p.num_classes, p.side);
        for _ in 0..p.samples_per_class {
            let x = template
                .iter()
                .map(|&t| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    (p.background + p.contrast * t + p.noise * n).clamp(0.0, 1.0)
                })
                .collect();
            samples.push(Sample::new(x, class));
        }
    }
    split_task(samples, p.train_fraction, p.validation_fraction, seed)
}

/// Stratified split: every class is shuffled and cut by the fractions.
fn split_task(samples: Vec<Sample>, train: f64, validation: f64, seed: u64) -> Result<TaskDataset> {
    let input_dim = samples
        .first()
        .map(|s| s.x.len())
        .ok_or_else(|| invalid("no samples"))?;
    let num_classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    if num_classes < 2 {
        return Err(invalid("task needs at least two labels"));
    }
    let mut by_class: Vec<Vec<Sample>> = vec![Vec::new(); num_classes];
    for s in samples {
        by_class[s.label].push(s);
    }
    let mut rng = seed::rng_for(seed, SEED_TAG_SPLIT);
    let mut out = TaskDataset {
        num_classes,
        input_dim,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (label, mut group) in by_class.into_iter().enumerate() {
        group.shuffle(&mut rng);
        let n = group.len();
        let n_train = (n as f64 * train).round() as usize;
        let n_val = ((n as f64 * validation).round() as usize).min(n - n_train.min(n));
        if n_train == 0 {
            return Err(invalid(format!("label {label} has no training samples")));
        }
        let mut it = group.into_iter();
        out.train.extend(it.by_ref().take(n_train));
        out.validation.extend(it.by_ref().take(n_val));
        out.test.extend(it);
    }
    Ok(out)
}

fn read_csv_samples(path: &Path) -> Result<Vec<Sample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            other => Error::Parse {
                line: 0,
                message: format!("{other:?}"),
            },
        })?;
    let mut samples = Vec::new();
    let mut dim = None;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let parse_err = |message: String| Error::Parse { line, message };
        let mut fields = record.iter();
        let label: usize = fields
            .next()
            .ok_or_else(|| parse_err("empty row".into()))?
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("bad label: {e}")))?;
        let x = fields
            .enumerate()
            .map(|(i, f)| {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|e| parse_err(format!("column {}: {e}", i + 2)))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(parse_err(format!(
                        "column {}: value {v} outside [0, 1]",
                        i + 2
                    )));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        if x.is_empty() {
            return Err(parse_err("row has no pixel values".into()));
        }
        match dim {
            None => dim = Some(x.len()),
            Some(d) if d != x.len() => {
                return Err(parse_err(format!("expected {d} values, found {}", x.len())))
            }
            _ => {}
        }
        samples.push(Sample::new(x, label));
    }
    if samples.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "file has no rows".into(),
        });
    }
    Ok(samples)
}

/// Point in the bounded latent cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid("latent vector must be non-empty"));
        }
        if entries.iter().any(|v| !(v.abs() <= LATENT_BOUND)) {
            return Err(invalid("latent entries must lie in [-0.5, 0.5]"));
        }
        Ok(Self(entries))
    }

    pub fn entries(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn l1_distance(&self, other: &LatentVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

/// Uniform draw from `[-0.5, 0.5]^dim`.
pub fn sample_latent<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> LatentVector {
    LatentVector(
        (0..dim)
            .map(|_| rng.random_range(-LATENT_BOUND..=LATENT_BOUND))
            .collect(),
    )
}

/// Smooth map from a latent vector to a `side × side` sinusoidal texture.
///
/// The latent is read in groups of four; group `k` of `W` defines one plane
/// wave with amplitude `0.5 + z0`, spatial frequency `1 + k/2 + z1/2`,
/// orientation `πk/W + 0.4 z2` and phase `0.4π z3`. Each wave owns a base
/// frequency and orientation and the latent only bends it, which keeps the
/// map close to linear over the latent cube. The image is `0.5` plus the
/// wave sum scaled by `gain/W`, clipped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureRenderer {
    pub side: usize,
    pub gain: f64,
}

const ORIENT_GAIN: f64 = 0.4;
const PHASE_GAIN: f64 = 0.4 * PI;
const FREQ_GAIN: f64 = 0.5;

impl TextureRenderer {
    pub fn new(side: usize) -> Self {
        Self { side, gain: 1.0 }
    }

    fn waves(latent: &[f64]) -> Vec<(f64, f64, f64, f64)> {
        let count = latent.len().div_ceil(4);
        latent
            .chunks(4)
            .enumerate()
            .map(|(k, c)| {
                let z = |i: usize| c.get(i).copied().unwrap_or(0.0);
                (
                    0.5 + z(0),
                    Self::base_frequency(k) + FREQ_GAIN * z(1),
                    PI * k as f64 / count as f64 + ORIENT_GAIN * z(2),
                    PHASE_GAIN * z(3),
                )
            })
            .collect()
    }

    fn base_frequency(k: usize) -> f64 {
        1.0 + 0.5 * k as f64
    }

    pub fn render(&self, latent: &[f64]) -> Vec<f64> {
        let waves = Self::waves(latent);
        let scale = self.gain / waves.len().max(1) as f64;
        let n = self.side;
        let mut img = Vec::with_capacity(n * n);
        for row in 0..n {
            for col in 0..n {
                let u = 2.0 * (col as f64 + 0.5) / n as f64 - 1.0;
                let v = 2.0 * (row as f64 + 0.5) / n as f64 - 1.0;
                let s: f64 = waves
                    .iter()
                    .map(|&(amp, freq, theta, phase)| {
                        amp * (PI * freq * (u * theta.cos() + v * theta.sin()) + phase).sin()
                    })
                    .sum();
                img.push((0.5 + scale * s).clamp(0.0, 1.0));
            }
        }
        img
    }

    /// Constant `K` with `‖render(a) − render(b)‖₂ ≤ K ‖a − b‖₁`.
    ///
    /// With `s = 0.5/W` and pixel coordinates in `[−1, 1]²`, the partial
    /// derivatives of a pixel are bounded by `s` (amplitude),
    /// `s·π·FREQ_GAIN·√2` (frequency), `s·π·f_max·ORIENT_GAIN·√2`
    /// (orientation) and `s·PHASE_GAIN` (phase). A pixel moves by at most
    /// the largest of these times the L1 step, and the L2 norm over `side²`
    /// pixels adds a factor `side`.
    pub fn lipschitz_constant(&self, latent_dim: usize) -> f64 {
        let waves = latent_dim.div_ceil(4).max(1);
        let s = self.gain / waves as f64;
        let f_max = Self::base_frequency(waves - 1) + 0.5 * FREQ_GAIN;
        let r2 = 2f64.sqrt();
        let bound = [
            1.0,
            PI * FREQ_GAIN * r2,
            PI * f_max * ORIENT_GAIN * r2,
            PHASE_GAIN,
        ]
        .into_iter()
        .fold(0.0, f64::max);
        self.side as f64 * s * bound
    }
}

/// A Gaussian ball of latents around a bounded mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenDistribution {
    pub latent: LatentVector,
    pub sigma0: f64,
    pub samples_per_label: usize,
}

impl HiddenDistribution {
    pub fn new(latent: LatentVector, sigma0: f64, samples_per_label: usize) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(invalid("sigma0 must be positive"));
        }
        if samples_per_label == 0 {
            return Err(invalid("samples_per_label must be positive"));
        }
        Ok(Self {
            latent,
            sigma0,
            samples_per_label,
        })
    }
}

/// Renders `n` samples. Each one uses a latent drawn from
/// `Normal(h.latent, σ0²)` per coordinate, clipped to the latent cube.
pub fn gen_hidden_samples(
    h: &HiddenDistribution,
    renderer: TextureRenderer,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    let mut rng = seed::rng(seed);
    let mut out = Vec::with_capacity(n);
    let mut z = vec![0.0; h.latent.dim()];
    for _ in 0..n {
        for (zi, &mu) in z.iter_mut().zip(h.latent.entries()) {
            let e: f64 = StandardNormal.sample(&mut rng);
            *zi = (mu + h.sigma0 * e).clamp(-LATENT_BOUND, LATENT_BOUND);
        }
        out.push(renderer.render(&z));
    }
    Ok(out)
}

/// One hidden distribution per task label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenAssignment {
    /// Indexed by label.
    pub distributions: Vec<HiddenDistribution>,
    /// Base seed for rendering the per-label sample sets.
    pub sample_seed: u64,
}

impl HiddenAssignment {
    pub fn num_labels(&self) -> usize {
        self.distributions.len()
    }

    /// `{label: [latent entries]}`, the golden-file form.
    pub fn latents_map(&self) -> BTreeMap<String, Vec<f64>> {
        self.distributions
            .iter()
            .enumerate()
            .map(|(l, d)| (l.to_string(), d.latent.entries().to_vec()))
            .collect()
    }

    /// Renders the training samples of every label, labelled by that label.
    pub fn render_samples(&self, renderer: TextureRenderer) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for (label, h) in self.distributions.iter().enumerate() {
            let xs = gen_hidden_samples(
                h,
                renderer,
                h.samples_per_label,
                seed::derive(self.sample_seed, label as u64),
            )?;
            out.extend(xs.into_iter().map(|x| Sample::new(x, label)));
        }
        Ok(out)
    }
}

/// Draws an independent latent for each of `num_labels` labels.
pub fn assign_per_label<R: Rng + ?Sized>(
    num_labels: usize,
    sigma0: f64,
    samples_per_label: usize,
    latent_dim: usize,
    rng: &mut R,
) -> Result<HiddenAssignment> {
    if num_labels < 2 {
        return Err(invalid("a task has at least two labels"));
    }
    if latent_dim == 0 {
        return Err(invalid("latent_dim must be positive"));
    }
    let distributions = (0..num_labels)
        .map(|_| HiddenDistribution::new(sample_latent(rng, latent_dim), sigma0, samples_per_label))
        .collect::<Result<Vec<_>>>()?;
    Ok(HiddenAssignment {
        distributions,
        sample_seed: rng.random(),
    })
}
