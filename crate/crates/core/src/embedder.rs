//! Node featurization and tree encoders producing one vector per plan.
//!
//! Node features are 27 wide: a 9-way operator one-hot, log-scaled
//! cardinality and cost, and 16 hashed table buckets. Two interchangeable
//! encoders map a featurized tree to `d_model`:
//!
//! * child-sum TreeLSTM with one forget gate per child, read out from the
//!   root hidden state through a linear layer;
//! * TreeCNN: per-node projection, two rounds of (node, left, right)
//!   triangle convolution with a learned vector standing in for missing
//!   children, dimension-wise max pooling and a final linear layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NumArray, ParamStore, Var};
use crate::plan_ir::{OperatorKind, PlanNode, PlanTree};

pub const TABLE_BUCKETS: usize = 16;
pub const FEATURE_WIDTH: usize = OperatorKind::COUNT + 2 + TABLE_BUCKETS;

/// Corpus maxima of `ln(1 + x)` used to scale cardinality and cost into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingRecord {
    pub max_log_card: f64,
    pub max_log_cost: f64,
}

impl Default for ScalingRecord {
    fn default() -> Self {
        ScalingRecord {
            max_log_card: 1.0,
            max_log_cost: 1.0,
        }
    }
}

impl ScalingRecord {
    /// Maxima over every node of every plan; a zero maximum becomes 1.
    pub fn fit<'a>(plans: impl IntoIterator<Item = &'a PlanTree>) -> ScalingRecord {
        let (mut card, mut cost) = (0.0f64, 0.0f64);
        for p in plans {
            p.root().visit(&mut |n| {
                card = card.max(n.est_cardinality.ln_1p());
                cost = cost.max(n.est_cost.ln_1p());
            });
        }
        ScalingRecord {
            max_log_card: if card > 0.0 { card } else { 1.0 },
            max_log_cost: if cost > 0.0 { cost } else { 1.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub op_onehot: [f64; OperatorKind::COUNT],
    pub log_card: f64,
    pub log_cost: f64,
    pub table_bits: [f64; TABLE_BUCKETS],
}

impl NodeFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(FEATURE_WIDTH);
        v.extend_from_slice(&self.op_onehot);
        v.push(self.log_card);
        v.push(self.log_cost);
        v.extend_from_slice(&self.table_bits);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTree {
    pub features: NodeFeatures,
    pub children: Vec<FeatureTree>,
}

impl FeatureTree {
    pub fn count(&self) -> usize {
        1 + self.children.iter().map(FeatureTree::count).sum::<usize>()
    }

    /// Pre-order traversal.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a FeatureTree)) {
        f(self);
        for c in &self.children {
            c.visit(f);
        }
    }
}

/// FNV-1a bucket of a table identifier.
pub fn table_bucket(table: &str) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in table.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h % TABLE_BUCKETS as u64) as usize
}

fn featurize_node(node: &PlanNode, scaling: &ScalingRecord) -> FeatureTree {
    let mut op_onehot = [0.0; OperatorKind::COUNT];
    op_onehot[node.operator.index()] = 1.0;
    let mut table_bits = [0.0; TABLE_BUCKETS];
    for t in &node.table_ids {
        table_bits[table_bucket(t)] = 1.0;
    }
    FeatureTree {
        features: NodeFeatures {
            op_onehot,
            log_card: (node.est_cardinality.ln_1p() / scaling.max_log_card).min(1.0),
            log_cost: (node.est_cost.ln_1p() / scaling.max_log_cost).min(1.0),
            table_bits,
        },
        children: node.children.iter().map(|c| featurize_node(c, scaling)).collect(),
    }
}

pub fn featurize(plan: &PlanTree, scaling: &ScalingRecord) -> FeatureTree {
    featurize_node(plan.root(), scaling)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    TreeLstm,
    TreeCnn,
}

impl EmbedderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbedderKind::TreeLstm => "tree_lstm",
            EmbedderKind::TreeCnn => "tree_cnn",
        }
    }

    pub fn parse(name: &str) -> Result<EmbedderKind> {
        match name {
            "tree_lstm" => Ok(EmbedderKind::TreeLstm),
            "tree_cnn" => Ok(EmbedderKind::TreeCnn),
            other => Err(Error::InvalidConfig(format!(
                "unknown embedder `{other}` (expected tree_lstm or tree_cnn)"
            ))),
        }
    }

    /// Adds freshly initialized encoder weights to `store`.
    pub fn init_params<R: Rng>(self, d_model: usize, store: &mut ParamStore, rng: &mut R) {
        let f = FEATURE_WIDTH;
        match self {
            EmbedderKind::TreeLstm => {
                let h = d_model;
                store.insert_uniform(lstm::W_IOU, f, 3 * h, rng);
                store.insert_uniform(lstm::U_IOU, h, 3 * h, rng);
                store.insert_filled(lstm::B_IOU, 1, 3 * h, 0.0);
                store.insert_uniform(lstm::W_F, f, h, rng);
                store.insert_uniform(lstm::U_F, h, h, rng);
                // forget gates start open
                store.insert_filled(lstm::B_F, 1, h, 1.0);
                store.insert_uniform(lstm::W_OUT, h, d_model, rng);
                store.insert_filled(lstm::B_OUT, 1, d_model, 0.0);
            }
            EmbedderKind::TreeCnn => {
                let d = d_model;
                store.insert_uniform(cnn::W_IN, f, d, rng);
                store.insert_filled(cnn::B_IN, 1, d, 0.0);
                for round in 0..cnn::ROUNDS {
                    let [ws, wl, wr, b] = cnn::round_names(round);
                    store.insert_uniform(&ws, d, d, rng);
                    store.insert_uniform(&wl, d, d, rng);
                    store.insert_uniform(&wr, d, d, rng);
                    store.insert_filled(&b, 1, d, 0.0);
                }
                store.insert_filled(cnn::NULL_CHILD, 1, d, 0.0);
                store.insert_uniform(cnn::W_OUT, d, d, rng);
                store.insert_filled(cnn::B_OUT, 1, d, 0.0);
            }
        }
    }

    /// Records the encoder on `g` and returns the `[1, d_model]` embedding.
    pub fn embed(self, g: &mut Graph, store: &ParamStore, tree: &FeatureTree) -> Result<Var> {
        match self {
            EmbedderKind::TreeLstm => lstm::embed(g, store, tree),
            EmbedderKind::TreeCnn => cnn::embed(g, store, tree),
        }
    }

    pub fn output_dim(self, store: &ParamStore) -> Result<usize> {
        let name = match self {
            EmbedderKind::TreeLstm => lstm::W_OUT,
            EmbedderKind::TreeCnn => cnn::W_OUT,
        };
        Ok(store.value(name)?.cols())
    }
}

impl std::fmt::Display for EmbedderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fixed-size plan vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanEmbedding {
    pub vector: NumArray,
}

fn check_input_width(store: &ParamStore, name: &str) -> Result<()> {
    let rows = store.value(name)?.rows();
    if rows != FEATURE_WIDTH {
        return Err(Error::DimensionMismatch {
            expected: FEATURE_WIDTH,
            got: rows,
        });
    }
    Ok(())
}

pub fn embed_tree_lstm(features: &FeatureTree, params: &ParamStore) -> Result<PlanEmbedding> {
    let mut g = Graph::new();
    let v = lstm::embed(&mut g, params, features)?;
    Ok(PlanEmbedding {
        vector: g.value(v).clone(),
    })
}

pub fn embed_tree_cnn(features: &FeatureTree, params: &ParamStore) -> Result<PlanEmbedding> {
    let mut g = Graph::new();
    let v = cnn::embed(&mut g, params, features)?;
    Ok(PlanEmbedding {
        vector: g.value(v).clone(),
    })
}

pub(crate) mod lstm {
    use super::*;

    pub const W_IOU: &str = "embedder.lstm.w_iou";
    pub const U_IOU: &str = "embedder.lstm.u_iou";
    pub const B_IOU: &str = "embedder.lstm.b_iou";
    pub const W_F: &str = "embedder.lstm.w_f";
    pub const U_F: &str = "embedder.lstm.u_f";
    pub const B_F: &str = "embedder.lstm.b_f";
    pub const W_OUT: &str = "embedder.lstm.w_out";
    pub const B_OUT: &str = "embedder.lstm.b_out";

    struct Weights {
        w_iou: Var,
        u_iou: Var,
        b_iou: Var,
        w_f: Var,
        u_f: Var,
        b_f: Var,
        hidden: usize,
    }

    /// Returns `(h, c)` of `tree`'s root.
    fn cell(g: &mut Graph, w: &Weights, tree: &FeatureTree) -> Result<(Var, Var)> {
        let kids = tree
            .children
            .iter()
            .map(|c| cell(g, w, c))
            .collect::<Result<Vec<_>>>()?;
        let x = g.input(NumArray::row(tree.features.to_vec())?);
        let h = w.hidden;

        let xw = g.matmul(x, w.w_iou)?;
        let pre = if kids.is_empty() {
            xw
        } else {
            let hs: Vec<Var> = kids.iter().map(|k| k.0).collect();
            let h_sum = g.add_n(&hs)?;
            let hu = g.matmul(h_sum, w.u_iou)?;
            g.add(xw, hu)?
        };
        let iou = g.add_row(pre, w.b_iou)?;
        let i_pre = g.slice_cols(iou, 0, h)?;
        let o_pre = g.slice_cols(iou, h, 2 * h)?;
        let u_pre = g.slice_cols(iou, 2 * h, 3 * h)?;
        let i = g.sigmoid(i_pre);
        let o = g.sigmoid(o_pre);
        let u = g.tanh(u_pre);

        let mut c_terms = vec![g.mul(i, u)?];
        if !kids.is_empty() {
            let xf = g.matmul(x, w.w_f)?;
            let xf = g.add_row(xf, w.b_f)?;
            for &(hk, ck) in &kids {
                let uf = g.matmul(hk, w.u_f)?;
                let f_pre = g.add(xf, uf)?;
                let f = g.sigmoid(f_pre);
                c_terms.push(g.mul(f, ck)?);
            }
        }
        let c = if c_terms.len() == 1 {
            c_terms[0]
        } else {
            g.add_n(&c_terms)?
        };
        let tc = g.tanh(c);
        let hidden = g.mul(o, tc)?;
        Ok((hidden, c))
    }

    pub fn embed(g: &mut Graph, store: &ParamStore, tree: &FeatureTree) -> Result<Var> {
        check_input_width(store, W_IOU)?;
        let hidden = store.value(U_IOU)?.rows();
        let w = Weights {
            w_iou: g.param(store, W_IOU)?,
            u_iou: g.param(store, U_IOU)?,
            b_iou: g.param(store, B_IOU)?,
            w_f: g.param(store, W_F)?,
            u_f: g.param(store, U_F)?,
            b_f: g.param(store, B_F)?,
            hidden,
        };
        let (h, _) = cell(g, &w, tree)?;
        let w_out = g.param(store, W_OUT)?;
        let b_out = g.param(store, B_OUT)?;
        let out = g.matmul(h, w_out)?;
        g.add_row(out, b_out)
    }
}

pub(crate) mod cnn {
    use super::*;

    pub const ROUNDS: usize = 2;
    pub const W_IN: &str = "embedder.cnn.w_in";
    pub const B_IN: &str = "embedder.cnn.b_in";
    pub const NULL_CHILD: &str = "embedder.cnn.null_child";
    pub const W_OUT: &str = "embedder.cnn.w_out";
    pub const B_OUT: &str = "embedder.cnn.b_out";

    /// `[w_self, w_left, w_right, bias]` names for one convolution round.
    pub fn round_names(round: usize) -> [String; 4] {
        ["w_self", "w_left", "w_right", "b"].map(|s| format!("embedder.cnn.conv{round}.{s}"))
    }

    /// Pre-order feature rows and, per node, the row index of its left and
    /// right child (`n` stands for a missing child).
    pub fn flatten(tree: &FeatureTree) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
        let n = tree.count();
        let mut rows = Vec::with_capacity(n * FEATURE_WIDTH);
        let mut left = Vec::with_capacity(n);
        let mut right = Vec::with_capacity(n);
        fn walk(
            t: &FeatureTree,
            n: usize,
            rows: &mut Vec<f64>,
            left: &mut Vec<usize>,
            right: &mut Vec<usize>,
        ) {
            let me = left.len();
            rows.extend(t.features.to_vec());
            left.push(n);
            right.push(n);
            for (k, c) in t.children.iter().enumerate().take(2) {
                let idx = left.len();
                if k == 0 {
                    left[me] = idx;
                } else {
                    right[me] = idx;
                }
                walk(c, n, rows, left, right);
            }
        }
        walk(tree, n, &mut rows, &mut left, &mut right);
        (rows, left, right)
    }

    pub fn embed(g: &mut Graph, store: &ParamStore, tree: &FeatureTree) -> Result<Var> {
        check_input_width(store, W_IN)?;
        let (rows, left, right) = flatten(tree);
        let n = left.len();
        let x = g.input(NumArray::matrix(n, FEATURE_WIDTH, rows)?);
        let w_in = g.param(store, W_IN)?;
        let b_in = g.param(store, B_IN)?;
        let null = g.param(store, NULL_CHILD)?;
        let proj = g.matmul(x, w_in)?;
        let mut e = g.add_row(proj, b_in)?;
        for round in 0..ROUNDS {
            let [ws, wl, wr, b] = round_names(round);
            let (ws, wl, wr, b) = (
                g.param(store, &ws)?,
                g.param(store, &wl)?,
                g.param(store, &wr)?,
                g.param(store, &b)?,
            );
            let padded = g.concat_rows(&[e, null])?;
            let le = g.gather_rows(padded, &left)?;
            let re = g.gather_rows(padded, &right)?;
            let s = g.matmul(e, ws)?;
            let l = g.matmul(le, wl)?;
            let r = g.matmul(re, wr)?;
            let sum = g.add_n(&[s, l, r])?;
            let pre = g.add_row(sum, b)?;
            e = g.relu(pre);
        }
        let pooled = g.max_rows(e);
        let w_out = g.param(store, W_OUT)?;
        let b_out = g.param(store, B_OUT)?;
        let out = g.matmul(pooled, w_out)?;
        g.add_row(out, b_out)
    }
}
