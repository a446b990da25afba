//! Set encoder, position scoring and permutation decoding.
//!
//! Plan embeddings pass through Transformer encoder layers without any
//! positional input, so the encoder is equivariant to the order of the
//! candidate list. A linear projection of every contextual vector is scored
//! against learned per-position query vectors, and the resulting
//! plan-by-position matrix is decoded by optimal assignment.

mod assignment;

pub use assignment::{assignment_value, decode_permutation};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::CandidateSet;
use crate::embedder::{featurize, EmbedderKind, FeatureTree, PlanEmbedding, ScalingRecord};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NumArray, ParamStore, Var};
use crate::plan_ir::PlanTree;
use crate::training::ModelCheckpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "RankerConfigFile")]
pub struct RankerConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub n_max: usize,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            d_model: 32,
            num_layers: 1,
            num_heads: 4,
            d_ff: 128,
            n_max: crate::dataset::MAX_PLANS,
        }
    }
}

/// On-disk form; `d_ff` defaults to `4 * d_model`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RankerConfigFile {
    #[serde(default = "default_d_model")]
    d_model: usize,
    #[serde(default = "default_one")]
    num_layers: usize,
    #[serde(default = "default_heads")]
    num_heads: usize,
    d_ff: Option<usize>,
    #[serde(default = "default_n_max")]
    n_max: usize,
}

fn default_d_model() -> usize {
    32
}
fn default_one() -> usize {
    1
}
fn default_heads() -> usize {
    4
}
fn default_n_max() -> usize {
    crate::dataset::MAX_PLANS
}

impl From<RankerConfigFile> for RankerConfig {
    fn from(f: RankerConfigFile) -> Self {
        RankerConfig {
            d_model: f.d_model,
            num_layers: f.num_layers,
            num_heads: f.num_heads,
            d_ff: f.d_ff.unwrap_or(4 * f.d_model),
            n_max: f.n_max,
        }
    }
}

impl RankerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("d_ff", self.d_ff),
            ("n_max", self.n_max),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("ranker.{name} must be positive")));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.n_max < 2 {
            return Err(Error::InvalidConfig("ranker.n_max must be at least 2".into()));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.num_heads
    }
}

pub const POSITION_QUERIES: &str = "ranker.position_queries";
pub const PROJ_W: &str = "ranker.proj.w";
pub const PROJ_B: &str = "ranker.proj.b";

struct LayerNames {
    w_q: String,
    w_k: String,
    w_v: String,
    w_o: String,
    b_o: String,
    ln1_g: String,
    ln1_b: String,
    w_1: String,
    b_1: String,
    w_2: String,
    b_2: String,
    ln2_g: String,
    ln2_b: String,
}

impl LayerNames {
    fn new(layer: usize) -> Self {
        let p = |s: &str| format!("ranker.layer{layer}.{s}");
        LayerNames {
            w_q: p("attn.w_q"),
            w_k: p("attn.w_k"),
            w_v: p("attn.w_v"),
            w_o: p("attn.w_o"),
            b_o: p("attn.b_o"),
            ln1_g: p("ln1.gamma"),
            ln1_b: p("ln1.beta"),
            w_1: p("ffn.w_1"),
            b_1: p("ffn.b_1"),
            w_2: p("ffn.w_2"),
            b_2: p("ffn.b_2"),
            ln2_g: p("ln2.gamma"),
            ln2_b: p("ln2.beta"),
        }
    }
}

/// Adds freshly initialized encoder and score-head weights to `store`.
pub fn init_params<R: Rng>(cfg: &RankerConfig, store: &mut ParamStore, rng: &mut R) {
    let d = cfg.d_model;
    for layer in 0..cfg.num_layers {
        let n = LayerNames::new(layer);
        store.insert_uniform(&n.w_q, d, d, rng);
        store.insert_uniform(&n.w_k, d, d, rng);
        store.insert_uniform(&n.w_v, d, d, rng);
        store.insert_uniform(&n.w_o, d, d, rng);
        store.insert_filled(&n.b_o, 1, d, 0.0);
        store.insert_filled(&n.ln1_g, 1, d, 1.0);
        store.insert_filled(&n.ln1_b, 1, d, 0.0);
        store.insert_uniform(&n.w_1, d, cfg.d_ff, rng);
        store.insert_filled(&n.b_1, 1, cfg.d_ff, 0.0);
        store.insert_uniform(&n.w_2, cfg.d_ff, d, rng);
        store.insert_filled(&n.b_2, 1, d, 0.0);
        store.insert_filled(&n.ln2_g, 1, d, 1.0);
        store.insert_filled(&n.ln2_b, 1, d, 0.0);
    }
    store.insert_uniform(PROJ_W, d, d, rng);
    store.insert_filled(PROJ_B, 1, d, 0.0);
    store.insert_uniform(POSITION_QUERIES, d, cfg.n_max, rng);
}

/// Attention weights of one forward pass, indexed `[layer][head]`, each `[n, n]`.
pub type AttentionMaps = Vec<Vec<NumArray>>;

fn check_list(n: usize, cfg: &RankerConfig) -> Result<()> {
    if n > cfg.n_max {
        return Err(Error::ListTooLong { len: n, max: cfg.n_max });
    }
    if n < 2 {
        return Err(Error::LengthMismatch(format!("ranking needs at least 2 plans, got {n}")));
    }
    Ok(())
}

/// Records the encoder stack on `g` for an `[n, d_model]` input.
pub fn record_context(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RankerConfig,
    h: Var,
) -> Result<(Var, AttentionMaps)> {
    let (n, d) = (g.value(h).rows(), g.value(h).cols());
    check_list(n, cfg)?;
    if d != cfg.d_model {
        return Err(Error::DimensionMismatch {
            expected: cfg.d_model,
            got: d,
        });
    }
    let dk = cfg.d_k();
    let inv_sqrt_dk = 1.0 / (dk as f64).sqrt();
    let mut h = h;
    let mut maps = Vec::with_capacity(cfg.num_layers);
    for layer in 0..cfg.num_layers {
        let names = LayerNames::new(layer);
        let p = |g: &mut Graph, name: &str| g.param(store, name);
        let (wq, wk, wv) = (p(g, &names.w_q)?, p(g, &names.w_k)?, p(g, &names.w_v)?);
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let mut heads = Vec::with_capacity(cfg.num_heads);
        let mut layer_maps = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let (lo, hi) = (head * dk, (head + 1) * dk);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, inv_sqrt_dk);
            let a = g.softmax_rows(logits);
            layer_maps.push(g.value(a).clone());
            heads.push(g.matmul(a, vh)?);
        }
        maps.push(layer_maps);
        let z = g.concat_cols(&heads)?;
        let wo = p(g, &names.w_o)?;
        let bo = p(g, &names.b_o)?;
        let o = g.matmul(z, wo)?;
        let o = g.add_row(o, bo)?;
        let r = g.add(h, o)?;
        let (g1, b1) = (p(g, &names.ln1_g)?, p(g, &names.ln1_b)?);
        let h1 = g.layer_norm(r, g1, b1)?;

        let (w1, bb1) = (p(g, &names.w_1)?, p(g, &names.b_1)?);
        let (w2, bb2) = (p(g, &names.w_2)?, p(g, &names.b_2)?);
        let f = g.matmul(h1, w1)?;
        let f = g.add_row(f, bb1)?;
        let f = g.relu(f);
        let f = g.matmul(f, w2)?;
        let f = g.add_row(f, bb2)?;
        let r = g.add(h1, f)?;
        let (g2, b2) = (p(g, &names.ln2_g)?, p(g, &names.ln2_b)?);
        h = g.layer_norm(r, g2, b2)?;
    }
    Ok((h, maps))
}

/// Records `s = (z W_p + b_p) Q[:, :n]` on `g`.
pub fn record_scores(g: &mut Graph, store: &ParamStore, cfg: &RankerConfig, z: Var) -> Result<Var> {
    let (n, d) = (g.value(z).rows(), g.value(z).cols());
    if n > cfg.n_max {
        return Err(Error::ListTooLong { len: n, max: cfg.n_max });
    }
    if d != cfg.d_model {
        return Err(Error::DimensionMismatch {
            expected: cfg.d_model,
            got: d,
        });
    }
    let w = g.param(store, PROJ_W)?;
    let b = g.param(store, PROJ_B)?;
    let queries = g.param(store, POSITION_QUERIES)?;
    let q_cols = g.value(queries).cols();
    if q_cols < n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: q_cols,
        });
    }
    let proj = g.matmul(z, w)?;
    let proj = g.add_row(proj, b)?;
    // columns past n are masked by never being computed
    let q = g.slice_cols(queries, 0, n)?;
    g.matmul(proj, q)
}

/// Contextual vectors `z_i` with the attention maps that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextOutput {
    /// `[n, d_model]`, row `i` belongs to plan `i`.
    pub vectors: NumArray,
    pub attention: AttentionMaps,
}

pub fn encode_context(
    embeddings: &[PlanEmbedding],
    params: &ParamStore,
    cfg: &RankerConfig,
) -> Result<ContextOutput> {
    check_list(embeddings.len(), cfg)?;
    let mut g = Graph::new();
    let rows = embeddings
        .iter()
        .map(|e| {
            if e.vector.len() != cfg.d_model {
                return Err(Error::DimensionMismatch {
                    expected: cfg.d_model,
                    got: e.vector.len(),
                });
            }
            Ok(g.input(e.vector.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let h = g.concat_rows(&rows)?;
    let (z, attention) = record_context(&mut g, params, cfg, h)?;
    Ok(ContextOutput {
        vectors: g.value(z).clone(),
        attention,
    })
}

/// Per-plan, per-position logits for a list of `n` plans.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreMatrix {
    scores: NumArray,
}

impl ScoreMatrix {
    pub fn new(scores: NumArray) -> Result<ScoreMatrix> {
        let scores = scores.as_matrix();
        if scores.rows() != scores.cols() {
            return Err(Error::ShapeMismatch {
                op: "score_matrix",
                detail: format!("expected a square matrix, got {:?}", scores.shape()),
            });
        }
        if !scores.is_finite() {
            return Err(Error::NonFiniteScores);
        }
        Ok(ScoreMatrix { scores })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<ScoreMatrix> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch {
                op: "score_matrix",
                detail: "rows of unequal length".into(),
            });
        }
        ScoreMatrix::new(NumArray::matrix(n, n, rows.concat())?)
    }

    pub fn n(&self) -> usize {
        self.scores.rows()
    }

    pub fn at(&self, plan: usize, position: usize) -> f64 {
        self.scores.at(plan, position)
    }

    pub fn array(&self) -> &NumArray {
        &self.scores
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n()).map(|i| self.scores.row_slice(i).to_vec()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.scores.data().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn score_positions(
    contextual: &NumArray,
    params: &ParamStore,
    cfg: &RankerConfig,
) -> Result<ScoreMatrix> {
    let mut g = Graph::new();
    let z = g.input(contextual.clone());
    let s = record_scores(&mut g, params, cfg, z)?;
    ScoreMatrix::new(g.value(s).clone())
}

/// A decoded ranking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    /// `permutation[i]` is the 0-based output position of plan `i`.
    pub permutation: Vec<usize>,
    /// Plan indices best-first; the inverse of `permutation`.
    pub by_position: Vec<usize>,
}

impl RankedList {
    pub fn from_permutation(permutation: Vec<usize>) -> Result<RankedList> {
        let n = permutation.len();
        let mut by_position = vec![usize::MAX; n];
        for (plan, &pos) in permutation.iter().enumerate() {
            if pos >= n || by_position[pos] != usize::MAX {
                return Err(Error::LengthMismatch(format!(
                    "{permutation:?} is not a permutation of 0..{n}"
                )));
            }
            by_position[pos] = plan;
        }
        Ok(RankedList {
            permutation,
            by_position,
        })
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    pub fn top(&self) -> usize {
        self.by_position[0]
    }
}

/// Records the full model on `g`: featurize, embed every plan, encode, score.
pub fn record_model(
    g: &mut Graph,
    store: &ParamStore,
    embedder: EmbedderKind,
    cfg: &RankerConfig,
    scaling: &ScalingRecord,
    plans: &[PlanTree],
) -> Result<(Var, AttentionMaps)> {
    let trees: Vec<FeatureTree> = plans.iter().map(|p| featurize(p, scaling)).collect();
    record_from_features(g, store, embedder, cfg, &trees)
}

/// [`record_model`] on already featurized plans.
pub fn record_from_features(
    g: &mut Graph,
    store: &ParamStore,
    embedder: EmbedderKind,
    cfg: &RankerConfig,
    trees: &[FeatureTree],
) -> Result<(Var, AttentionMaps)> {
    check_list(trees.len(), cfg)?;
    let rows = trees
        .iter()
        .map(|t| embedder.embed(g, store, t))
        .collect::<Result<Vec<_>>>()?;
    let h = g.concat_rows(&rows)?;
    let (z, maps) = record_context(g, store, cfg, h)?;
    Ok((record_scores(g, store, cfg, z)?, maps))
}

/// Score matrix of a plan list under a trained model.
pub fn score_plans(checkpoint: &ModelCheckpoint, plans: &[PlanTree]) -> Result<ScoreMatrix> {
    let mut g = Graph::new();
    let cfg = &checkpoint.config;
    let (s, _) = record_model(
        &mut g,
        &checkpoint.params,
        cfg.embedder,
        &cfg.ranker,
        &checkpoint.scaling,
        plans,
    )?;
    ScoreMatrix::new(g.value(s).clone())
}

/// Embeddings of each plan under a trained model.
pub fn embed_plans(checkpoint: &ModelCheckpoint, plans: &[PlanTree]) -> Result<Vec<PlanEmbedding>> {
    plans
        .iter()
        .map(|p| {
            let mut g = Graph::new();
            let tree = featurize(p, &checkpoint.scaling);
            let v = checkpoint.config.embedder.embed(&mut g, &checkpoint.params, &tree)?;
            Ok(PlanEmbedding {
                vector: g.value(v).clone(),
            })
        })
        .collect()
}

pub fn rank_plans(cs: &CandidateSet, checkpoint: &ModelCheckpoint) -> Result<RankedList> {
    Ok(rank_with_scores(cs, checkpoint)?.0)
}

/// Like [`rank_plans`] but also returns the score matrix that was decoded.
pub fn rank_with_scores(
    cs: &CandidateSet,
    checkpoint: &ModelCheckpoint,
) -> Result<(RankedList, ScoreMatrix)> {
    let scores = score_plans(checkpoint, cs.plans())?;
    Ok((decode_permutation(&scores)?, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_embeddings(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<PlanEmbedding> {
        (0..n)
            .map(|_| PlanEmbedding {
                vector: NumArray::row((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            })
            .collect()
    }

    fn setup(seed: u64) -> (RankerConfig, ParamStore, ChaCha8Rng) {
        let cfg = RankerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_params(&cfg, &mut store, &mut rng);
        (cfg, store, rng)
    }

    #[test]
    fn identical_inputs_attend_uniformly() {
        let (cfg, store, mut rng) = setup(1);
        let e = random_embeddings(1, cfg.d_model, &mut rng).remove(0);
        let out = encode_context(&[e.clone(), e], &store, &cfg).unwrap();
        for a in &out.attention[0] {
            for v in a.data() {
                assert!((v - 0.5).abs() < 1e-15);
            }
        }
        assert_eq!(out.vectors.row_slice(0), out.vectors.row_slice(1));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (cfg, store, mut rng) = setup(2);
        let out = encode_context(&random_embeddings(7, cfg.d_model, &mut rng), &store, &cfg).unwrap();
        assert_eq!(out.attention[0].len(), 4);
        for a in &out.attention[0] {
            for r in 0..7 {
                assert!((a.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let (cfg, store, mut rng) = setup(3);
        let e = random_embeddings(5, cfg.d_model, &mut rng);
        let sigma = [3, 0, 4, 1, 2];
        let permuted: Vec<_> = sigma.iter().map(|&i| e[i].clone()).collect();
        let a = encode_context(&e, &store, &cfg).unwrap().vectors;
        let b = encode_context(&permuted, &store, &cfg).unwrap().vectors;
        for (new, &old) in sigma.iter().enumerate() {
            for (x, y) in b.row_slice(new).iter().zip(a.row_slice(old)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_score_head_gives_zero_scores() {
        let cfg = RankerConfig::default();
        let mut store = ParamStore::new();
        init_params(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        for (_, p) in store.iter_mut() {
            p.value = NumArray::zeros(p.value.shape());
        }
        let z = NumArray::filled(&[3, cfg.d_model], 0.7);
        let s = score_positions(&z, &store, &cfg).unwrap();
        assert!(s.array().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_rows_and_determinism() {
        let (cfg, store, mut rng) = setup(4);
        let row: Vec<f64> = (0..cfg.d_model).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = NumArray::matrix(3, cfg.d_model, [row.clone(), row.clone(), row].concat()).unwrap();
        let s = score_positions(&z, &store, &cfg).unwrap();
        assert_eq!(s.array().row_slice(0), s.array().row_slice(1));
        assert_eq!(s.array().row_slice(1), s.array().row_slice(2));
        assert_eq!(s, score_positions(&z, &store, &cfg).unwrap());
    }

    #[test]
    fn list_length_is_checked() {
        let (cfg, store, mut rng) = setup(5);
        let e = random_embeddings(33, cfg.d_model, &mut rng);
        assert!(matches!(
            encode_context(&e, &store, &cfg),
            Err(Error::ListTooLong { len: 33, max: 32 })
        ));
        let short = random_embeddings(2, 8, &mut rng);
        assert!(matches!(
            encode_context(&short, &store, &cfg),
            Err(Error::DimensionMismatch { expected: 32, got: 8 })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(RankerConfig::default().validate().is_ok());
        let bad = RankerConfig {
            num_heads: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let cfg: RankerConfig = serde_json::from_str(r#"{"d_model": 16}"#).unwrap();
        assert_eq!((cfg.d_model, cfg.num_heads, cfg.d_ff), (16, 4, 64));
        assert!(serde_json::from_str::<RankerConfig>(r#"{"dmodel": 16}"#).is_err());
    }

    #[test]
    fn ranked_list_inverse() {
        let r = RankedList::from_permutation(vec![2, 0, 1]).unwrap();
        assert_eq!(r.by_position, vec![1, 2, 0]);
        assert_eq!(r.top(), 1);
        assert!(RankedList::from_permutation(vec![0, 0]).is_err());
    }
}
