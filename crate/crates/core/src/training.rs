//! Listwise loss, the end-to-end training loop and model checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container;
use crate::dataset::CandidateSet;
use crate::embedder::{featurize, EmbedderKind, FeatureTree, ScalingRecord};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Var};
use crate::ranker::{self, RankerConfig, ScoreMatrix};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PRCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Candidate sets per optimizer step.
    pub batch: usize,
    pub seed: u64,
    pub embedder: EmbedderKind,
    pub ranker: RankerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            epochs: 200,
            batch: 1,
            seed: 42,
            embedder: EmbedderKind::TreeLstm,
            ranker: RankerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {} must lie in (0, 1)",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidConfig("epochs and batch must be positive".into()));
        }
        self.ranker.validate()
    }
}

/// Converts 1-based ranks into 0-based target columns.
fn targets_from_ranks(y: &[usize]) -> Result<Vec<usize>> {
    let n = y.len();
    let mut seen = vec![false; n];
    for &r in y {
        if r == 0 || r > n || std::mem::replace(&mut seen[r - 1], true) {
            return Err(Error::InvalidRanks(n));
        }
    }
    Ok(y.iter().map(|r| r - 1).collect())
}

/// `L = Σ_i [logsumexp_j s_ij − s_{i, y_i}]` for 1-based ground-truth positions `y`.
pub fn listwise_loss(scores: &ScoreMatrix, y: &[usize]) -> Result<f64> {
    if y.len() != scores.n() {
        return Err(Error::InvalidRanks(scores.n()));
    }
    let targets = targets_from_ranks(y)?;
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = scores.array().row_slice(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
    }
    Ok(loss)
}

/// Records the loss of `scores` against 1-based positions `y` on `g`.
pub fn record_loss(g: &mut Graph, scores: Var, y: &[usize]) -> Result<Var> {
    let targets = targets_from_ranks(y)?;
    g.cross_entropy_rows(scores, &targets)
}

/// Adaptive-moment optimizer over a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update using the accumulated gradients divided by `grad_scale`.
    pub fn step(&mut self, store: &mut ParamStore, grad_scale: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for k in 0..values.len() {
                let gk = grads[k] / grad_scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                values[k] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMetadata {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub train_queries: usize,
}

/// Everything needed to rank plans with a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub scaling: ScalingRecord,
    pub metadata: TrainingMetadata,
}

impl ModelCheckpoint {
    /// Freshly initialized, untrained parameters.
    pub fn initialize(config: TrainConfig, scaling: ScalingRecord) -> Result<ModelCheckpoint> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        config.embedder.init_params(config.ranker.d_model, &mut params, &mut rng);
        ranker::init_params(&config.ranker, &mut params, &mut rng);
        Ok(ModelCheckpoint {
            config,
            params,
            scaling,
            metadata: TrainingMetadata {
                epochs_run: 0,
                final_loss: 0.0,
                epoch_losses: Vec::new(),
                train_queries: 0,
            },
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = json!({
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": self.config,
            "scaling": self.scaling,
            "metadata": self.metadata,
        });
        container::encode(CHECKPOINT_MAGIC, header, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelCheckpoint> {
        let (header, params) = container::decode(CHECKPOINT_MAGIC, bytes)?;
        container::check_version(&header, CHECKPOINT_FORMAT_VERSION)?;
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Header {
            #[allow(dead_code)]
            format_version: u32,
            config: TrainConfig,
            scaling: ScalingRecord,
            metadata: TrainingMetadata,
        }
        let h: Header = serde_json::from_value(header)
            .map_err(|e| Error::CorruptFile(format!("bad checkpoint header: {e}")))?;
        h.config.validate()?;
        Ok(ModelCheckpoint {
            config: h.config,
            params,
            scaling: h.scaling,
            metadata: h.metadata,
        })
    }

    /// Header fields as JSON, for inspection.
    pub fn header_json(&self) -> serde_json::Value {
        json!({
            "kind": "model_checkpoint",
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": self.config,
            "scaling": self.scaling,
            "metadata": self.metadata,
            "num_params": self.params.len(),
            "num_scalars": self.params.num_scalars(),
        })
    }

    /// Errors unless the checkpoint was trained with `requested`.
    pub fn require_embedder(&self, requested: EmbedderKind) -> Result<()> {
        if self.config.embedder != requested {
            return Err(Error::EmbedderMismatch {
                checkpoint: self.config.embedder.to_string(),
                requested: requested.to_string(),
            });
        }
        Ok(())
    }
}

pub fn save_checkpoint(c: &ModelCheckpoint, path: &Path) -> Result<()> {
    fs::write(path, c.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes)
}

/// One training example with features precomputed.
struct Prepared<'a> {
    cs: &'a CandidateSet,
    trees: Vec<FeatureTree>,
}

/// Loss and gradient of one candidate set, accumulated into `store`.
fn accumulate(
    store: &mut ParamStore,
    cfg: &TrainConfig,
    example: &Prepared<'_>,
) -> Result<f64> {
    let mut g = Graph::new();
    let (s, _) = ranker::record_from_features(&mut g, store, cfg.embedder, &cfg.ranker, &example.trees)?;
    let loss = record_loss(&mut g, s, example.cs.true_ranks())?;
    let value = g.scalar(loss);
    if value.is_finite() {
        g.backward(loss, store)?;
    }
    Ok(value)
}

pub fn train(train_set: &[CandidateSet], cfg: &TrainConfig) -> Result<ModelCheckpoint> {
    train_with_progress(train_set, cfg, |_, _| {})
}

/// Trains end-to-end, calling `on_epoch(epoch, mean_loss)` after every epoch.
pub fn train_with_progress(
    train_set: &[CandidateSet],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptySet("training set"));
    }
    if let Some(cs) = train_set.iter().find(|cs| cs.len() > cfg.ranker.n_max) {
        return Err(Error::ListTooLong {
            len: cs.len(),
            max: cfg.ranker.n_max,
        });
    }
    let scaling = ScalingRecord::fit(train_set.iter().flat_map(|cs| cs.plans()));
    let mut model = ModelCheckpoint::initialize(cfg.clone(), scaling)?;
    let prepared: Vec<Prepared> = train_set
        .iter()
        .map(|cs| Prepared {
            cs,
            trees: cs.plans().iter().map(|p| featurize(p, &scaling)).collect(),
        })
        .collect();

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            model.params.zero_grad();
            for &i in chunk {
                let loss = accumulate(&mut model.params, cfg, &prepared[i])?;
                if !loss.is_finite() {
                    return Err(Error::DivergedLoss {
                        epoch,
                        query_id: prepared[i].cs.query_id().to_string(),
                        loss,
                    });
                }
                total += loss;
            }
            adam.step(&mut model.params, chunk.len() as f64);
        }
        let mean = total / prepared.len() as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    model.params.zero_grad();
    model.metadata = TrainingMetadata {
        epochs_run: cfg.epochs,
        final_loss: *epoch_losses.last().expect("at least one epoch"),
        epoch_losses,
        train_queries: train_set.len(),
    };
    Ok(model)
}
