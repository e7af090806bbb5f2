//! Intent extractor and prediction head.
//!
//! Item representations come from `L` rounds of simplified self-attention
//! followed by graph convolution over the normalized global adjacency,
//! averaged with the input table. Sessions are encoded by concatenating
//! each item with a reverse-position vector, pooled with unnormalized soft
//! attention, and scored against every item by dot product.
//!
//! All matrices use the row-vector convention: a layer maps `x ↦ x·W + b`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TrainExample;
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::loss::{CeForm, LossConfig, SplScope};
use crate::tensor::{CsrMatrix, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub dim: usize,
    pub layers: usize,
    pub epsilon: usize,
    pub tau: f64,
    pub beta: f64,
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_session_len: usize,
    pub seed: u64,
    pub use_spl: bool,
    pub use_attention: bool,
    pub use_reverse_pos: bool,
    pub spl_scope: SplScope,
    pub ce_form: CeForm,
    pub graph_include_test: bool,
    /// Multiply the learning rate by `lr_decay_rate` every this many epochs;
    /// 0 disables decay.
    pub lr_decay_step: usize,
    pub lr_decay_rate: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            dim: 100,
            layers: 3,
            epsilon: 3,
            tau: 0.1,
            beta: 1.0,
            lr: 0.001,
            l2: 1e-5,
            batch_size: 100,
            epochs: 30,
            max_session_len: 50,
            seed: 42,
            use_spl: true,
            use_attention: true,
            use_reverse_pos: true,
            spl_scope: SplScope::AllItems,
            ce_form: CeForm::AsPrinted,
            graph_include_test: false,
            lr_decay_step: 0,
            lr_decay_rate: 0.1,
        }
    }
}

/// Dataset presets for layer count and loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tmall,
    Retailrocket,
    Diginetica,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tmall" => Ok(Preset::Tmall),
            "retailrocket" => Ok(Preset::Retailrocket),
            "diginetica" => Ok(Preset::Diginetica),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

impl Hyperparams {
    pub fn apply_preset(&mut self, preset: Preset) {
        let (layers, beta) = match preset {
            Preset::Tmall => (3, 75.0),
            Preset::Retailrocket => (5, 1.0),
            Preset::Diginetica => (5, 0.75),
        };
        self.layers = layers;
        self.beta = beta;
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.dim == 0 {
            return fail("dim must be at least 1");
        }
        if !(self.tau > 0.0) {
            return fail("tau must be positive");
        }
        if !(self.beta >= 0.0) {
            return fail("beta must be nonnegative");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.epsilon == 0 {
            return fail("epsilon must be at least 1");
        }
        if self.max_session_len == 0 {
            return fail("max_session_len must be at least 1");
        }
        if !(self.lr > 0.0) || !(self.l2 >= 0.0) {
            return fail("lr must be positive and l2 nonnegative");
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            beta: if self.use_spl { self.beta } else { 0.0 },
            tau: self.tau,
            spl_scope: self.spl_scope,
            ce_form: self.ce_form,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub att_w: Tensor,
    pub att_b: Tensor,
    pub conv_w: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Initial item table, `n × d`.
    pub embedding: Tensor,
    pub layers: Vec<LayerParams>,
    /// Reverse-position table; row `k` is the vector for position `k + 1`
    /// counted from the session end.
    pub positions: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub q: Tensor,
    pub c: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
}

impl ModelParams {
    /// Zero-filled parameters with the right shapes.
    pub fn zeros(n: usize, hyper: &Hyperparams) -> Self {
        let d = hyper.dim;
        Self {
            embedding: Tensor::zeros(n, d),
            layers: (0..hyper.layers)
                .map(|_| LayerParams {
                    att_w: Tensor::zeros(d, d),
                    att_b: Tensor::zeros(1, d),
                    conv_w: Tensor::zeros(d, d),
                })
                .collect(),
            positions: Tensor::zeros(hyper.max_session_len, d),
            w1: Tensor::zeros(2 * d, d),
            b1: Tensor::zeros(1, d),
            q: Tensor::zeros(d, 1),
            c: Tensor::zeros(1, d),
            w2: Tensor::zeros(d, d),
            w3: Tensor::zeros(d, d),
        }
    }

    pub fn n_items(&self) -> usize {
        self.embedding.rows()
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols()
    }

    /// Canonical parameter order, shared by the optimizer and checkpoints.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.att_w"), &layer.att_w));
            out.push((format!("layer{l}.att_b"), &layer.att_b));
            out.push((format!("layer{l}.conv_w"), &layer.conv_w));
        }
        out.extend([
            ("positions".to_string(), &self.positions),
            ("w1".to_string(), &self.w1),
            ("b1".to_string(), &self.b1),
            ("q".to_string(), &self.q),
            ("c".to_string(), &self.c),
            ("w2".to_string(), &self.w2),
            ("w3".to_string(), &self.w3),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.push(&mut layer.att_w);
            out.push(&mut layer.att_b);
            out.push(&mut layer.conv_w);
        }
        out.extend([
            &mut self.positions,
            &mut self.w1,
            &mut self.b1,
            &mut self.q,
            &mut self.c,
            &mut self.w2,
            &mut self.w3,
        ]);
        out
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Inverse of [`ModelParams::to_tensors`]; shapes must match `self`.
    pub fn assign_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        let mut slots = self.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.iter_mut().zip(tensors) {
            slot.check_same_shape(&t, "assign_tensors")?;
            **slot = t;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    /// Puts every parameter on the tape, trainable or constant.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars: Vec<Var> = self
            .named()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ParamVars::from_slice(&vars, self.layers.len())
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

/// I.i.d. uniform on `[−1/√d, 1/√d]`, drawn in canonical parameter order.
pub fn init_params(n: usize, hyper: &Hyperparams, seed: u64) -> ModelParams {
    let mut params = ModelParams::zeros(n, hyper);
    let bound = 1.0 / (hyper.dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-bound..=bound);
        }
    }
    params
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub att_w: Var,
    pub att_b: Var,
    pub conv_w: Var,
}

#[derive(Debug, Clone)]
pub struct ParamVars {
    pub embedding: Var,
    pub layers: Vec<LayerVars>,
    pub positions: Var,
    pub w1: Var,
    pub b1: Var,
    pub q: Var,
    pub c: Var,
    pub w2: Var,
    pub w3: Var,
}

impl ParamVars {
    /// Inverse of the canonical order in [`ModelParams::named`].
    pub fn from_slice(vars: &[Var], layers: usize) -> Self {
        assert_eq!(vars.len(), 1 + 3 * layers + 7, "parameter count");
        let tail = &vars[1 + 3 * layers..];
        Self {
            embedding: vars[0],
            layers: (0..layers)
                .map(|l| LayerVars {
                    att_w: vars[1 + 3 * l],
                    att_b: vars[2 + 3 * l],
                    conv_w: vars[3 + 3 * l],
                })
                .collect(),
            positions: tail[0],
            w1: tail[1],
            b1: tail[2],
            q: tail[3],
            c: tail[4],
            w2: tail[5],
            w3: tail[6],
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for l in &self.layers {
            out.extend([l.att_w, l.att_b, l.conv_w]);
        }
        out.extend([
            self.positions,
            self.w1,
            self.b1,
            self.q,
            self.c,
            self.w2,
            self.w3,
        ]);
        out
    }
}

/// `Y = X·W + b`, `Att = softmax_rows(Y·Xᵀ)`, returns `Att·X`.
pub fn attention_layer(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let y = tape.add_bias(xw, b)?;
    let xt = tape.transpose(x);
    let scores = tape.matmul(y, xt)?;
    let att = tape.row_softmax(scores);
    tape.matmul(att, x)
}

/// `Â·X·W`.
pub fn gcn_layer(tape: &mut Tape, adj: &Arc<CsrMatrix>, x: Var, w: Var) -> Result<Var> {
    let ax = tape.sparse_matmul(Arc::clone(adj), x)?;
    tape.matmul(ax, w)
}

/// Mean of the input table and the output of each attention→convolution
/// round.
pub fn propagate(
    tape: &mut Tape,
    x0: Var,
    adj: &NormalizedAdjacency,
    layers: &[LayerVars],
    use_attention: bool,
) -> Result<Var> {
    let mut current = x0;
    let mut total = x0;
    for layer in layers {
        let h = if use_attention {
            attention_layer(tape, current, layer.att_w, layer.att_b)?
        } else {
            current
        };
        current = gcn_layer(tape, adj.matrix(), h, layer.conv_w)?;
        total = tape.add(total, current)?;
    }
    Ok(tape.scale(total, 1.0 / (layers.len() + 1) as f64))
}

/// Ragged batch of sessions flattened row-wise: session `s` owns rows
/// `offsets[s]..offsets[s+1]`. No padding rows exist, so nothing needs
/// masking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionBatch {
    pub items: Vec<usize>,
    /// Zero-based row into the position table: `m − t` for the item at
    /// 1-based position `t` of a length-`m` session.
    pub positions: Vec<usize>,
    pub offsets: Vec<usize>,
    pub targets: Vec<usize>,
}

impl SessionBatch {
    /// Keeps at most the `max_len` most recent items of each prefix.
    pub fn from_examples<'a>(
        examples: impl IntoIterator<Item = &'a TrainExample>,
        max_len: usize,
    ) -> Self {
        let mut batch = SessionBatch {
            items: Vec::new(),
            positions: Vec::new(),
            offsets: vec![0],
            targets: Vec::new(),
        };
        for ex in examples {
            let start = ex.prefix.len().saturating_sub(max_len);
            let kept = &ex.prefix[start..];
            let m = kept.len();
            batch.items.extend_from_slice(kept);
            batch.positions.extend((0..m).map(|t| m - 1 - t));
            batch.offsets.push(batch.items.len());
            batch.targets.push(ex.target);
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// `x*_t = tanh([x_t ‖ p_{m−t+1}]·W1 + b1)` for every row of the batch.
pub fn encode_sessions(
    tape: &mut Tape,
    item_table: Var,
    batch: &SessionBatch,
    p: &ParamVars,
    use_reverse_pos: bool,
) -> Result<Var> {
    let n = tape.value(item_table).rows();
    if let Some(&bad) = batch.items.iter().find(|&&i| i >= n) {
        return Err(Error::Data(format!(
            "item index {bad} outside vocabulary of {n}"
        )));
    }
    let items = tape.gather_rows(item_table, &batch.items)?;
    let pos = if use_reverse_pos {
        tape.gather_rows(p.positions, &batch.positions)?
    } else {
        let d = tape.value(p.positions).cols();
        tape.constant(Tensor::zeros(batch.items.len(), d))
    };
    let cat = tape.concat_cols(items, pos)?;
    let lin = tape.matmul(cat, p.w1)?;
    let pre = tape.add_bias(lin, p.b1)?;
    Ok(tape.tanh(pre))
}

/// `a_t = σ(x_s·W2 + x*_t·W3 + c)·q` and `θ = Σ_t a_t x*_t` per session,
/// with `x_s` the session mean of `x*`. Returns `batch × d`.
pub fn session_attention(
    tape: &mut Tape,
    xstar: Var,
    offsets: &[usize],
    p: &ParamVars,
) -> Result<Var> {
    let xs = tape.segment_mean(xstar, offsets)?;
    let xs_w2 = tape.matmul(xs, p.w2)?;
    let owner: Vec<usize> = offsets
        .windows(2)
        .enumerate()
        .flat_map(|(s, w)| std::iter::repeat_n(s, w[1] - w[0]))
        .collect();
    let xs_rows = tape.gather_rows(xs_w2, &owner)?;
    let xt_w3 = tape.matmul(xstar, p.w3)?;
    let sum = tape.add(xs_rows, xt_w3)?;
    let pre = tape.add_bias(sum, p.c)?;
    let gate = tape.sigmoid(pre);
    let a = tape.matmul(gate, p.q)?;
    let weighted = tape.mul_rows(xstar, a)?;
    // segment sum = segment mean × length
    let means = tape.segment_mean(weighted, offsets)?;
    let lens: Vec<f64> = offsets.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
    let lens = tape.constant(Tensor::from_vec(lens.len(), 1, lens)?);
    tape.mul_rows(means, lens)
}

/// `ẑ = θ·X_Vᵀ`, `batch × n`.
pub fn score(tape: &mut Tape, theta: Var, item_table: Var) -> Result<Var> {
    let t = tape.transpose(item_table);
    tape.matmul(theta, t)
}

/// Nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub item_table: Var,
    pub theta: Var,
    pub scores: Var,
    pub probs: Var,
}

/// Propagation plus session scoring for one batch.
pub fn forward(
    tape: &mut Tape,
    p: &ParamVars,
    adj: &NormalizedAdjacency,
    batch: &SessionBatch,
    hyper: &Hyperparams,
) -> Result<Forward> {
    let item_table = propagate(tape, p.embedding, adj, &p.layers, hyper.use_attention)?;
    score_with_table(tape, p, item_table, batch, hyper)
}

/// Session scoring against an already propagated item table.
pub fn score_with_table(
    tape: &mut Tape,
    p: &ParamVars,
    item_table: Var,
    batch: &SessionBatch,
    hyper: &Hyperparams,
) -> Result<Forward> {
    let xstar = encode_sessions(tape, item_table, batch, p, hyper.use_reverse_pos)?;
    let theta = session_attention(tape, xstar, &batch.offsets, p)?;
    let scores = score(tape, theta, item_table)?;
    let probs = tape.row_softmax(scores);
    Ok(Forward {
        item_table,
        theta,
        scores,
        probs,
    })
}

/// Inference-only item table `X_V`.
pub fn item_representations(
    params: &ModelParams,
    adj: &NormalizedAdjacency,
    hyper: &Hyperparams,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.register(&mut tape, false);
    let x = propagate(&mut tape, p.embedding, adj, &p.layers, hyper.use_attention)?;
    Ok(tape.value(x).clone())
}

/// Inference-only scores, `batch × n`, given a precomputed item table.
pub fn score_examples(
    params: &ModelParams,
    item_table: &Tensor,
    examples: &[TrainExample],
    hyper: &Hyperparams,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.register(&mut tape, false);
    let table = tape.constant(item_table.clone());
    let batch = SessionBatch::from_examples(examples, hyper.max_session_len);
    let fwd = score_with_table(&mut tape, &p, table, &batch, hyper)?;
    Ok(tape.value(fwd.scores).clone())
}

/// Scores over all items for one session.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub scores: Vec<f64>,
}

impl Ranking {
    /// Indices by descending score, ties by ascending index.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        idx
    }
}
