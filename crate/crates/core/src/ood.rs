//! In-distribution classifier, confidence function and threshold calibration.
//!
//! The detector is a two-layer feed-forward network `f` over a plan's
//! embedding concatenated with raw aggregate features. It is trained against
//! synthesized negatives (noised and coordinate-shuffled copies of training
//! vectors). Confidence is `g(x) = max(f(x), 1 - f(x))`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container;
use crate::embedder::{featurize, FeatureTree};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Graph, NumArray, ParamStore};
use crate::plan_ir::{OperatorKind, PlanTree};
use crate::ranker::embed_plans;
use crate::training::{Adam, ModelCheckpoint};

pub const DETECTOR_FORMAT_VERSION: u32 = 1;
pub const DETECTOR_MAGIC: &[u8; 8] = b"PRDET001";
/// Fewest in-distribution vectors accepted by [`train_detector`].
pub const MIN_EXAMPLES: usize = 50;
/// Aggregate features appended to the embedding.
pub const AGGREGATE_WIDTH: usize = 3 + OperatorKind::COUNT;

const W1: &str = "ood.w1";
const B1: &str = "ood.b1";
const W2: &str = "ood.w2";
const B2: &str = "ood.b2";

/// Mean scaled log-cardinality, mean scaled log-cost, node count and the
/// operator histogram of a featurized plan.
pub fn aggregate_features(tree: &FeatureTree) -> Vec<f64> {
    let mut card = 0.0;
    let mut cost = 0.0;
    let mut hist = [0.0; OperatorKind::COUNT];
    let mut count = 0usize;
    tree.visit(&mut |t| {
        card += t.features.log_card;
        cost += t.features.log_cost;
        for (h, o) in hist.iter_mut().zip(&t.features.op_onehot) {
            *h += o;
        }
        count += 1;
    });
    let n = count as f64;
    let mut out = vec![card / n, cost / n, n];
    out.extend_from_slice(&hist);
    out
}

/// Detector input for every plan: embedding ⊕ aggregates.
pub fn plan_features(checkpoint: &ModelCheckpoint, plans: &[PlanTree]) -> Result<Vec<Vec<f64>>> {
    let emb = embed_plans(checkpoint, plans)?;
    Ok(plans
        .iter()
        .zip(emb)
        .map(|(p, e)| {
            let mut v = e.vector.into_data();
            v.extend(aggregate_features(&featurize(p, &checkpoint.scaling)));
            v
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Training target for synthesized negatives. With `g = max(f, 1 - f)`
    /// a target of 0 makes confidently rejected negatives look as confident
    /// as training data, so the default aims negatives at the indecisive 0.5.
    pub negative_target: f64,
    /// Noise scale for negatives in units of each coordinate's spread.
    pub noise_sigmas: f64,
    /// Share of in-distribution vectors held out for calibration.
    pub holdout_fraction: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            hidden: 32,
            epochs: 300,
            learning_rate: 1e-2,
            seed: 42,
            negative_target: 0.5,
            noise_sigmas: 3.0,
            holdout_fraction: 0.2,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("detector hidden and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return Err(Error::InvalidConfig("detector learning_rate must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.negative_target) {
            return Err(Error::InvalidConfig("negative_target must lie in [0, 1]".into()));
        }
        if !(self.noise_sigmas > 0.0) {
            return Err(Error::InvalidConfig("noise_sigmas must be positive".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::InvalidConfig("holdout_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub tau_in: f64,
    pub tau_out: f64,
    /// Set when the calibration distributions overlapped.
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationStats {
    pub holdout_size: usize,
    pub negative_size: usize,
    pub mean_g_in: f64,
    pub mean_g_negative: f64,
    pub median_g_in: f64,
    pub median_g_negative: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodDetector {
    pub config: DetectorConfig,
    pub params: ParamStore,
    /// Per-coordinate standardization fitted on training vectors.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub thresholds: Thresholds,
    pub calibration: Option<CalibrationStats>,
}

impl OodDetector {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }

    /// Classifier output `f(x)` in `(0, 1)`.
    pub fn probability(&self, x: &[f64]) -> Result<f64> {
        let z = self.standardize(x)?;
        let w1 = self.params.value(W1)?;
        let b1 = self.params.value(B1)?;
        let w2 = self.params.value(W2)?;
        let b2 = self.params.value(B2)?;
        let h = w1.cols();
        let mut logit = b2.data()[0];
        for k in 0..h {
            let mut a = b1.data()[k];
            for (i, zi) in z.iter().enumerate() {
                a += zi * w1.at(i, k);
            }
            logit += a.max(0.0) * w2.at(k, 0);
        }
        Ok(sigmoid(logit))
    }

    pub fn confidence(&self, x: &[f64]) -> Result<f64> {
        self.probability(x).map(confidence_from_probability)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = json!({
            "format_version": DETECTOR_FORMAT_VERSION,
            "config": self.config,
            "mean": self.mean,
            "std": self.std,
            "thresholds": self.thresholds,
            "calibration": self.calibration,
        });
        container::encode(DETECTOR_MAGIC, header, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<OodDetector> {
        let (header, params) = container::decode(DETECTOR_MAGIC, bytes)?;
        container::check_version(&header, DETECTOR_FORMAT_VERSION)?;
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Header {
            #[allow(dead_code)]
            format_version: u32,
            config: DetectorConfig,
            mean: Vec<f64>,
            std: Vec<f64>,
            thresholds: Thresholds,
            calibration: Option<CalibrationStats>,
        }
        let h: Header = serde_json::from_value(header)
            .map_err(|e| Error::CorruptFile(format!("bad detector header: {e}")))?;
        let w1 = params.value(W1)?;
        if h.mean.len() != h.std.len() || w1.rows() != h.mean.len() {
            return Err(Error::CorruptFile("detector shapes disagree".into()));
        }
        Ok(OodDetector {
            config: h.config,
            params,
            mean: h.mean,
            std: h.std,
            thresholds: h.thresholds,
            calibration: h.calibration,
        })
    }

    pub fn header_json(&self) -> serde_json::Value {
        json!({
            "kind": "ood_detector",
            "format_version": DETECTOR_FORMAT_VERSION,
            "config": self.config,
            "input_dim": self.input_dim(),
            "thresholds": self.thresholds,
            "calibration": self.calibration,
        })
    }
}

pub fn confidence_from_probability(f: f64) -> f64 {
    f.max(1.0 - f)
}

pub fn confidence(det: &OodDetector, x: &[f64]) -> Result<f64> {
    det.confidence(x)
}

pub fn save_detector(det: &OodDetector, path: &Path) -> Result<()> {
    fs::write(path, det.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_detector(path: &Path) -> Result<OodDetector> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    OodDetector::from_bytes(&bytes)
}

fn column_stats(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for row in x {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = vec![0.0; d];
    for row in x {
        for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    (mean, std)
}

/// `count` negatives built from `x`: the first half adds per-coordinate
/// Gaussian noise at `sigmas` times the coordinate spread, the second half
/// shuffles the coordinates of a vector.
pub fn synthesize_negatives<R: Rng>(x: &[Vec<f64>], count: usize, sigmas: f64, rng: &mut R) -> Vec<Vec<f64>> {
    if x.is_empty() {
        return Vec::new();
    }
    let (_, spread) = column_stats(x);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..count)
        .map(|i| {
            let mut v = x[rng.random_range(0..x.len())].clone();
            if i < count / 2 {
                for (vk, sk) in v.iter_mut().zip(&spread) {
                    *vk += sigmas * sk * normal.sample(rng);
                }
            } else {
                v.shuffle(rng);
            }
            v
        })
        .collect()
}

fn stack(rows: &[Vec<f64>]) -> Result<NumArray> {
    NumArray::matrix(rows.len(), rows[0].len(), rows.concat())
}

/// Trains `f` on `in_dist` (target 1) against synthesized negatives.
/// Thresholds are left at `(1, 0.5)` until calibrated.
pub fn train_detector(in_dist: &[Vec<f64>], cfg: &DetectorConfig) -> Result<OodDetector> {
    cfg.validate()?;
    if in_dist.len() < MIN_EXAMPLES {
        return Err(Error::TooFewExamples {
            need: MIN_EXAMPLES,
            got: in_dist.len(),
        });
    }
    let d = in_dist[0].len();
    if let Some(bad) = in_dist.iter().find(|v| v.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::new();
    params.insert_uniform(W1, d, cfg.hidden, &mut rng);
    params.insert_filled(B1, 1, cfg.hidden, 0.0);
    params.insert_uniform(W2, cfg.hidden, 1, &mut rng);
    params.insert_filled(B2, 1, 1, 0.0);

    let (mean, std) = column_stats(in_dist);
    let mut det = OodDetector {
        config: cfg.clone(),
        params,
        mean,
        std,
        thresholds: Thresholds {
            tau_in: 1.0,
            tau_out: 0.5,
            degraded: false,
        },
        calibration: None,
    };
    let positives: Vec<Vec<f64>> = in_dist.iter().map(|v| det.standardize(v)).collect::<Result<_>>()?;
    let labels: Vec<f64> = std::iter::repeat_n(1.0, in_dist.len())
        .chain(std::iter::repeat_n(cfg.negative_target, in_dist.len()))
        .collect();

    let mut adam = Adam::new(cfg.learning_rate);
    for _ in 0..cfg.epochs {
        // fresh negatives every epoch so f learns the noise region, not a sample of it
        let negatives = synthesize_negatives(in_dist, in_dist.len(), cfg.noise_sigmas, &mut rng);
        let mut rows = positives.clone();
        for v in &negatives {
            rows.push(det.standardize(v)?);
        }
        det.params.zero_grad();
        let mut g = Graph::new();
        let xi = g.input(stack(&rows)?);
        let w1 = g.param(&det.params, W1)?;
        let b1 = g.param(&det.params, B1)?;
        let w2 = g.param(&det.params, W2)?;
        let b2 = g.param(&det.params, B2)?;
        let h = g.matmul(xi, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let z = g.matmul(h, w2)?;
        let z = g.add_row(z, b2)?;
        let loss = g.bce_with_logits(z, &labels)?;
        g.backward(loss, &mut det.params)?;
        adam.step(&mut det.params, 1.0);
    }
    det.params.zero_grad();
    Ok(det)
}

/// Linear-interpolation percentile (`p` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Thresholds from confidence values: `tau_in` is the 5th percentile of the
/// in-distribution holdout, `tau_out` the 95th percentile of the negatives.
/// On overlap the result is flagged degraded and `tau_in` becomes the
/// midpoint of the two medians plus half their gap.
pub fn calibrate_from_confidences(g_in: &[f64], g_neg: &[f64]) -> Result<(Thresholds, CalibrationStats)> {
    if g_in.is_empty() {
        return Err(Error::EmptySet("in-distribution holdout"));
    }
    if g_neg.is_empty() {
        return Err(Error::EmptySet("negatives"));
    }
    let tau_in = percentile(g_in, 5.0);
    let tau_out = percentile(g_neg, 95.0);
    let median_in = percentile(g_in, 50.0);
    let median_neg = percentile(g_neg, 50.0);
    let stats = CalibrationStats {
        holdout_size: g_in.len(),
        negative_size: g_neg.len(),
        mean_g_in: mean(g_in),
        mean_g_negative: mean(g_neg),
        median_g_in: median_in,
        median_g_negative: median_neg,
    };
    let th = if tau_out < tau_in {
        Thresholds {
            tau_in,
            tau_out,
            degraded: false,
        }
    } else {
        let mid = 0.5 * (median_in + median_neg);
        let half_gap = 0.5 * (median_in - median_neg).abs();
        Thresholds {
            tau_in: mid + half_gap,
            tau_out,
            degraded: true,
        }
    };
    Ok((th, stats))
}

pub fn calibrate_thresholds(
    det: &OodDetector,
    in_dist_holdout: &[Vec<f64>],
    negatives: &[Vec<f64>],
) -> Result<(Thresholds, CalibrationStats)> {
    let g = |xs: &[Vec<f64>]| xs.iter().map(|x| det.confidence(x)).collect::<Result<Vec<_>>>();
    calibrate_from_confidences(&g(in_dist_holdout)?, &g(negatives)?)
}

/// Splits `in_dist` into fit and holdout parts, trains, synthesizes fresh
/// negatives from the holdout and stores calibrated thresholds.
pub fn fit_detector(in_dist: &[Vec<f64>], cfg: &DetectorConfig) -> Result<OodDetector> {
    cfg.validate()?;
    let mut idx: Vec<usize> = (0..in_dist.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    idx.shuffle(&mut rng);
    let n_hold = ((in_dist.len() as f64 * cfg.holdout_fraction).round() as usize).max(1);
    let n_fit = in_dist.len().saturating_sub(n_hold);
    if n_fit < MIN_EXAMPLES {
        return Err(Error::TooFewExamples {
            need: MIN_EXAMPLES,
            got: n_fit,
        });
    }
    let fit: Vec<Vec<f64>> = idx[..n_fit].iter().map(|&i| in_dist[i].clone()).collect();
    let holdout: Vec<Vec<f64>> = idx[n_fit..].iter().map(|&i| in_dist[i].clone()).collect();
    let mut det = train_detector(&fit, cfg)?;
    let negatives = synthesize_negatives(&holdout, holdout.len().max(2), cfg.noise_sigmas, &mut rng);
    let (th, stats) = calibrate_thresholds(&det, &holdout, &negatives)?;
    det.thresholds = th;
    det.calibration = Some(stats);
    Ok(det)
}
