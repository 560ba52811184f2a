//! Model versions: joint training on task data plus per-label hidden
//! distributions, feature entanglement, and the on-disk version store.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    assign_per_label, HiddenAssignment, HiddenDistribution, LatentVector, TaskDataset,
    TextureRenderer, DEFAULT_LATENT_DIM,
};
use crate::error::{invalid, io_err, Error, Result};
use crate::nnet::{sgd_train, FeatureLoss, MlpModel, Sample, TrainConfig};
use crate::seed;

const SEED_TAG_INIT: u64 = 0x494e_4954;
const STORE_FORMAT_VERSION: u32 = 1;

/// Soft nearest neighbour loss of a set of feature rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnnlValue {
    pub value: f64,
    /// Rows without a same-label partner; their terms are left out of the sum.
    pub excluded: usize,
}

/// `-(1/N) Σ_i ln( Σ_{j≠i, y_j=y_i} e^{-‖x_i−x_j‖²} / Σ_{k≠i} e^{-‖x_i−x_k‖²} )`.
///
/// Rows with no same-label partner contribute nothing (the normaliser stays
/// `N`) and are counted in [`SnnlValue::excluded`].
pub fn snnl(features: &[&[f64]], labels: &[usize]) -> Result<SnnlValue> {
    Ok(snnl_with_grad(features, labels, false)?.0)
}

/// SNNL and its gradient with respect to every feature row.
pub fn snnl_grad(features: &[&[f64]], labels: &[usize]) -> Result<(SnnlValue, Vec<Vec<f64>>)> {
    snnl_with_grad(features, labels, true)
}

fn snnl_with_grad(
    features: &[&[f64]],
    labels: &[usize],
    want_grad: bool,
) -> Result<(SnnlValue, Vec<Vec<f64>>)> {
    let n = features.len();
    if n < 2 {
        return Err(invalid("SNNL needs at least two rows"));
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: labels.len(),
        });
    }
    let f = features[0].len();
    if features.iter().any(|r| r.len() != f) {
        return Err(invalid("feature rows must have equal length"));
    }

    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = features[i]
                .iter()
                .zip(features[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut excluded = 0;
    let mut grads = if want_grad {
        vec![vec![0.0; f]; n]
    } else {
        Vec::new()
    };
    let mut coef = vec![0.0; n];
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        // Log-sum-exp with the smallest distance as the shift.
        let shift_all = (0..n)
            .filter(|&k| k != i)
            .map(|k| row[k])
            .fold(f64::INFINITY, f64::min);
        let shift_same = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .map(|j| row[j])
            .fold(f64::INFINITY, f64::min);
        if shift_same.is_infinite() {
            excluded += 1;
            continue;
        }
        let mut den = 0.0;
        let mut num = 0.0;
        for k in 0..n {
            if k == i {
                continue;
            }
            den += (shift_all - row[k]).exp();
            if labels[k] == labels[i] {
                num += (shift_same - row[k]).exp();
            }
        }
        let log_num = -shift_same + num.ln();
        let log_den = -shift_all + den.ln();
        total += log_den - log_num;

        if want_grad {
            // d term_i / d dist_ik = [same] e_ik/num_i - e_ik/den_i
            for k in 0..n {
                if k == i {
                    coef[k] = 0.0;
                    continue;
                }
                let w_den = (shift_all - row[k]).exp() / den;
                let w_num = if labels[k] == labels[i] {
                    (shift_same - row[k]).exp() / num
                } else {
                    0.0
                };
                coef[k] = inv_n * (w_num - w_den);
            }
            for k in 0..n {
                let c = coef[k];
                if c == 0.0 {
                    continue;
                }
                for t in 0..f {
                    let diff = 2.0 * c * (features[i][t] - features[k][t]);
                    grads[i][t] += diff;
                    grads[k][t] -= diff;
                }
            }
        }
    }
    Ok((
        SnnlValue {
            value: total * inv_n,
            excluded,
        },
        grads,
    ))
}

/// SNNL as a weighted training term on penultimate-layer features.
#[derive(Debug, Clone, Copy)]
pub struct SnnlTerm {
    pub weight: f64,
}

impl FeatureLoss for SnnlTerm {
    fn loss_and_grad(&self, features: &[&[f64]], labels: &[usize]) -> (f64, Vec<Vec<f64>>) {
        match snnl_grad(features, labels) {
            Ok((v, mut g)) => {
                for row in &mut g {
                    for x in row.iter_mut() {
                        *x *= self.weight;
                    }
                }
                (self.weight * v.value, g)
            }
            Err(_) => (
                0.0,
                vec![vec![0.0; features.first().map_or(0, |r| r.len())]; features.len()],
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionStatus {
    Deployed,
    Retired,
}

/// A trained model together with the data that makes it unique.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVersion {
    /// Assigned by the store; 0 until inserted.
    pub id: u64,
    pub model: MlpModel,
    pub assignment: HiddenAssignment,
    pub config: TrainConfig,
    /// Accuracy on the task's test split.
    pub benign_accuracy: f64,
    pub final_loss: Option<f64>,
    pub status: VersionStatus,
}

/// Renderer matching the task's square input.
pub fn renderer_for(task: &TaskDataset) -> Result<TextureRenderer> {
    task.side()
        .map(TextureRenderer::new)
        .ok_or_else(|| invalid("hidden distributions need square image inputs"))
}

/// Builds the training set of the joint objective: task samples with weight
/// 1 and hidden samples with weight λ. Hidden samples are left out entirely
/// when neither λ nor the SNNL weight is positive.
pub fn joint_training_set(
    task: &TaskDataset,
    assignment: &HiddenAssignment,
    config: &TrainConfig,
) -> Result<(Vec<Sample>, Vec<f64>)> {
    let mut samples = task.train.clone();
    let mut weights = vec![1.0; samples.len()];
    if config.lambda > 0.0 || config.snnl_weight > 0.0 {
        let hidden = assignment.render_samples(renderer_for(task)?)?;
        weights.extend(std::iter::repeat_n(config.lambda, hidden.len()));
        samples.extend(hidden);
    }
    Ok((samples, weights))
}

/// Initial parameters of a model trained with `config`.
pub fn initial_model(task: &TaskDataset, config: &TrainConfig) -> Result<MlpModel> {
    let mut rng = seed::rng_for(config.seed, SEED_TAG_INIT);
    MlpModel::glorot(
        task.input_dim,
        &config.hidden_layers,
        task.num_classes,
        &mut rng,
    )
}

/// Trains one version from scratch on the task plus its hidden distributions.
pub fn train_version(
    task: &TaskDataset,
    assignment: &HiddenAssignment,
    config: &TrainConfig,
) -> Result<ModelVersion> {
    config.validate()?;
    if assignment.num_labels() != task.num_classes {
        return Err(invalid(format!(
            "assignment covers {} labels, task has {}",
            assignment.num_labels(),
            task.num_classes
        )));
    }
    let (samples, weights) = joint_training_set(task, assignment, config)?;
    let snnl = SnnlTerm {
        weight: config.snnl_weight,
    };
    let extra: Vec<&dyn FeatureLoss> = if config.snnl_weight > 0.0 {
        vec![&snnl]
    } else {
        Vec::new()
    };
    let outcome = sgd_train(
        initial_model(task, config)?,
        &samples,
        Some(&weights),
        config,
        &extra,
    )?;
    let benign_accuracy = outcome.model.accuracy(&task.test)?;
    Ok(ModelVersion {
        id: 0,
        final_loss: outcome.final_loss(),
        model: outcome.model,
        assignment: assignment.clone(),
        config: config.clone(),
        benign_accuracy,
        status: VersionStatus::Deployed,
    })
}

/// Trains the standard (non-versioned) model with the same hyperparameters.
pub fn train_standard(task: &TaskDataset, config: &TrainConfig) -> Result<MlpModel> {
    config.validate()?;
    let outcome = sgd_train(initial_model(task, config)?, &task.train, None, config, &[])?;
    Ok(outcome.model)
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreIndex {
    format_version: u32,
    versions: Vec<IndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    id: u64,
    status: VersionStatus,
}

/// `meta.json` of one version.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VersionMeta {
    id: u64,
    status: VersionStatus,
    benign_accuracy: f64,
    final_loss: Option<f64>,
    config: TrainConfig,
    sigma0: f64,
    samples_per_label: usize,
    sample_seed: u64,
    latents: std::collections::BTreeMap<String, Vec<f64>>,
}

impl VersionMeta {
    fn of(v: &ModelVersion) -> Self {
        let first = &v.assignment.distributions[0];
        Self {
            id: v.id,
            status: v.status,
            benign_accuracy: v.benign_accuracy,
            final_loss: v.final_loss,
            config: v.config.clone(),
            sigma0: first.sigma0,
            samples_per_label: first.samples_per_label,
            sample_seed: v.assignment.sample_seed,
            latents: v.assignment.latents_map(),
        }
    }

    fn assignment(&self) -> Result<HiddenAssignment> {
        let mut distributions = Vec::with_capacity(self.latents.len());
        for label in 0..self.latents.len() {
            let entries = self
                .latents
                .get(&label.to_string())
                .ok_or_else(|| invalid(format!("meta.json lacks latent for label {label}")))?;
            distributions.push(HiddenDistribution::new(
                LatentVector::new(entries.clone())?,
                self.sigma0,
                self.samples_per_label,
            )?);
        }
        Ok(HiddenAssignment {
            distributions,
            sample_seed: self.sample_seed,
        })
    }
}

/// Ordered collection of versions with at most one deployed.
///
/// Directory layout when persisted:
///
/// ```text
/// <root>/index.json              {"format_version": 1, "versions": [{"id", "status"}]}
/// <root>/versions/<id>/model.bin binary parameters (see MlpModel::from_bytes)
/// <root>/versions/<id>/meta.json id, status, benign_accuracy, final_loss,
///                                config, sigma0, samples_per_label,
///                                sample_seed, latents {label: [..]}
/// ```
#[derive(Debug, Clone, Default)]
pub struct VersionStore {
    root: Option<PathBuf>,
    versions: Vec<ModelVersion>,
}

impl VersionStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("versions")).map_err(io_err(&root))?;
        let index_path = root.join("index.json");
        let mut versions = Vec::new();
        if index_path.exists() {
            let text = fs::read_to_string(&index_path).map_err(io_err(&index_path))?;
            let index: StoreIndex = serde_json::from_str(&text)?;
            if index.format_version != STORE_FORMAT_VERSION {
                return Err(invalid(format!(
                    "unsupported store format {}",
                    index.format_version
                )));
            }
            for entry in index.versions {
                let dir = version_dir(&root, entry.id);
                let meta_path = dir.join("meta.json");
                let meta_text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
                let meta: VersionMeta = serde_json::from_str(&meta_text)?;
                let model = MlpModel::load(&dir.join("model.bin"))?;
                versions.push(ModelVersion {
                    id: meta.id,
                    assignment: meta.assignment()?,
                    model,
                    config: meta.config,
                    benign_accuracy: meta.benign_accuracy,
                    final_loss: meta.final_loss,
                    status: entry.status,
                });
            }
        }
        Ok(Self {
            root: Some(root),
            versions,
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn versions(&self) -> &[ModelVersion] {
        &self.versions
    }

    pub fn deployed(&self) -> Option<&ModelVersion> {
        self.versions
            .iter()
            .rev()
            .find(|v| v.status == VersionStatus::Deployed)
    }

    pub fn retired(&self) -> impl Iterator<Item = &ModelVersion> {
        self.versions
            .iter()
            .filter(|v| v.status == VersionStatus::Retired)
    }

    pub fn get(&self, id: u64) -> Option<&ModelVersion> {
        self.versions.iter().find(|v| v.id == id)
    }

    pub fn next_id(&self) -> u64 {
        self.versions.last().map_or(1, |v| v.id + 1)
    }

    /// Retires the deployed version (if any) and deploys a freshly trained
    /// one with a new hidden assignment and a new training seed, both drawn
    /// from `rng`. On error the store is left unchanged.
    pub fn retire_and_replace<R: Rng + ?Sized>(
        &mut self,
        task: &TaskDataset,
        sigma0: f64,
        config: &TrainConfig,
        rng: &mut R,
    ) -> Result<&ModelVersion> {
        let assignment = assign_per_label(
            task.num_classes,
            sigma0,
            config.hidden_per_label,
            DEFAULT_LATENT_DIM,
            rng,
        )?;
        let config = TrainConfig {
            seed: rng.random(),
            ..config.clone()
        };
        let mut version = train_version(task, &assignment, &config)?;
        version.id = self.next_id();
        self.push_deployed(version)
    }

    /// Inserts an already trained version as the deployed one.
    pub fn push_deployed(&mut self, mut version: ModelVersion) -> Result<&ModelVersion> {
        version.id = self.next_id();
        version.status = VersionStatus::Deployed;
        let previous = self
            .versions
            .iter()
            .position(|v| v.status == VersionStatus::Deployed);
        if let Some(root) = self.root.clone() {
            self.persist_rotation(&root, &version, previous)?;
        }
        if let Some(p) = previous {
            self.versions[p].status = VersionStatus::Retired;
        }
        self.versions.push(version);
        Ok(self.versions.last().expect("just pushed"))
    }

    fn persist_rotation(
        &self,
        root: &Path,
        version: &ModelVersion,
        previous: Option<usize>,
    ) -> Result<()> {
        let dir = version_dir(root, version.id);
        let written = write_version(&dir, version);
        if let Err(e) = written {
            let _ = fs::remove_dir_all(&dir);
            return Err(e);
        }
        if let Some(p) = previous {
            let mut old = self.versions[p].clone();
            old.status = VersionStatus::Retired;
            if let Err(e) = write_meta(&version_dir(root, old.id), &old) {
                let _ = fs::remove_dir_all(&dir);
                return Err(e);
            }
        }
        let mut entries: Vec<IndexEntry> = self
            .versions
            .iter()
            .enumerate()
            .map(|(i, v)| IndexEntry {
                id: v.id,
                status: if Some(i) == previous {
                    VersionStatus::Retired
                } else {
                    v.status
                },
            })
            .collect();
        entries.push(IndexEntry {
            id: version.id,
            status: VersionStatus::Deployed,
        });
        let index = StoreIndex {
            format_version: STORE_FORMAT_VERSION,
            versions: entries,
        };
        if let Err(e) = write_atomic(
            &root.join("index.json"),
            &serde_json::to_vec_pretty(&index)?,
        ) {
            if let Some(p) = previous {
                let _ = write_meta(&version_dir(root, self.versions[p].id), &self.versions[p]);
            }
            let _ = fs::remove_dir_all(&dir);
            return Err(e);
        }
        Ok(())
    }
}

fn version_dir(root: &Path, id: u64) -> PathBuf {
    root.join("versions").join(id.to_string())
}

fn write_version(dir: &Path, v: &ModelVersion) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_atomic(&dir.join("model.bin"), &v.model.to_bytes())?;
    write_meta(dir, v)
}

fn write_meta(dir: &Path, v: &ModelVersion) -> Result<()> {
    write_atomic(
        &dir.join("meta.json"),
        &serde_json::to_vec_pretty(&VersionMeta::of(v))?,
    )
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}
