//! Bi-LSTM pair-sequence similarity scorer.
//!
//! Row `i` of the similarity matrix is predicted as the output sequence of a
//! recurrent network run over `[x_i; x_1], [x_i; x_2], ..., [x_i; x_n]`. All
//! rows of a block are processed together as one batch. Large matrices are cut
//! into a grid of sub-blocks ([`partition_blocks`]) that are scored (and
//! trained on) independently and pasted back together.
//!
//! Network: two stacked bidirectional LSTM layers, an affine+ReLU layer and
//! an affine+sigmoid output, applied per position.

mod net;
mod train;

use std::ops::Range;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{EmbeddingSequence, SimilarityMatrix};
use crate::error::{Error, Result};

pub use train::{learning_rate, train, train_with, EpochLog, TrainConfig, TrainOutcome, TrainingItem};

/// Per-direction hidden size of the reference architecture (512 outputs per
/// bidirectional layer).
pub const PAPER_HIDDEN: usize = 256;
/// Width of the first fully connected layer in the reference architecture.
pub const PAPER_FC: usize = 64;
/// Largest square block scored in one pass.
pub const DEFAULT_MAX_BLOCK: usize = 400;

/// Probability clamp applied inside the BCE loss.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Embedding dimension `d`; the recurrent input is `2d`.
    pub embed_dim: usize,
    /// Hidden units per direction.
    pub hidden: usize,
    pub fc_dim: usize,
}

impl ModelDims {
    pub fn paper(embed_dim: usize) -> Self {
        ModelDims {
            embed_dim,
            hidden: PAPER_HIDDEN,
            fc_dim: PAPER_FC,
        }
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.embed_dim
        } else {
            2 * self.hidden
        }
    }
}

/// Weights of one recurrent direction. Gate rows are ordered input, forget,
/// candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmDirection {
    /// `4h x input`
    pub w_ih: Array2<f64>,
    /// `4h x h`
    pub w_hh: Array2<f64>,
    /// `4h`
    pub bias: Array1<f64>,
}

impl LstmDirection {
    fn zeros(input: usize, hidden: usize) -> Self {
        LstmDirection {
            w_ih: Array2::zeros((4 * hidden, input)),
            w_hh: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSeqModel {
    pub dims: ModelDims,
    /// `layers[layer][direction]`, direction 0 runs left to right.
    pub layers: [[LstmDirection; 2]; 2],
    /// `fc x 2h`
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    /// `fc`
    pub fc2_w: Array1<f64>,
    /// length 1
    pub fc2_b: Array1<f64>,
}

impl PairSeqModel {
    /// All-zero parameters; every output is exactly 0.5.
    pub fn zeros(dims: ModelDims) -> Self {
        let h = dims.hidden;
        let layer = |l: usize| {
            [
                LstmDirection::zeros(dims.layer_input(l), h),
                LstmDirection::zeros(dims.layer_input(l), h),
            ]
        };
        PairSeqModel {
            dims,
            layers: [layer(0), layer(1)],
            fc1_w: Array2::zeros((dims.fc_dim, 2 * h)),
            fc1_b: Array1::zeros(dims.fc_dim),
            fc2_w: Array1::zeros(dims.fc_dim),
            fc2_b: Array1::zeros(1),
        }
    }

    /// Seeded uniform initialisation: recurrent weights in `±1/sqrt(h)`, dense
    /// weights in `±1/sqrt(fan_in)`, forget-gate biases at 1.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::zeros(dims);
        let h = dims.hidden;
        let bound = 1.0 / (h as f64).sqrt();
        for layer in model.layers.iter_mut() {
            for dir in layer.iter_mut() {
                fill_uniform(dir.w_ih.as_slice_mut().expect("standard layout"), bound, &mut rng);
                fill_uniform(dir.w_hh.as_slice_mut().expect("standard layout"), bound, &mut rng);
                fill_uniform(dir.bias.as_slice_mut().expect("standard layout"), bound, &mut rng);
                dir.bias.slice_mut(s![h..2 * h]).fill(1.0);
            }
        }
        let b1 = 1.0 / ((2 * h) as f64).sqrt();
        fill_uniform(model.fc1_w.as_slice_mut().expect("standard layout"), b1, &mut rng);
        fill_uniform(model.fc1_b.as_slice_mut().expect("standard layout"), b1, &mut rng);
        let b2 = 1.0 / (dims.fc_dim as f64).sqrt();
        fill_uniform(model.fc2_w.as_slice_mut().expect("standard layout"), b2, &mut rng);
        fill_uniform(model.fc2_b.as_slice_mut().expect("standard layout"), b2, &mut rng);
        model
    }

    /// Every parameter tensor with a stable name and shape, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::with_capacity(15);
        for (l, layer) in self.layers.iter().enumerate() {
            for (d, dir) in layer.iter().enumerate() {
                let tag = format!("lstm{l}.{}", if d == 0 { "fwd" } else { "bwd" });
                out.push((format!("{tag}.w_ih"), dir.w_ih.shape().to_vec(), std_slice(dir.w_ih.as_slice())));
                out.push((format!("{tag}.w_hh"), dir.w_hh.shape().to_vec(), std_slice(dir.w_hh.as_slice())));
                out.push((format!("{tag}.bias"), dir.bias.shape().to_vec(), std_slice(dir.bias.as_slice())));
            }
        }
        out.push(("fc1.w".into(), self.fc1_w.shape().to_vec(), std_slice(self.fc1_w.as_slice())));
        out.push(("fc1.b".into(), self.fc1_b.shape().to_vec(), std_slice(self.fc1_b.as_slice())));
        out.push(("fc2.w".into(), self.fc2_w.shape().to_vec(), std_slice(self.fc2_w.as_slice())));
        out.push(("fc2.b".into(), self.fc2_b.shape().to_vec(), std_slice(self.fc2_b.as_slice())));
        out
    }

    /// Mutable parameter slices in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(15);
        for layer in self.layers.iter_mut() {
            for dir in layer.iter_mut() {
                out.push(dir.w_ih.as_slice_mut().expect("standard layout"));
                out.push(dir.w_hh.as_slice_mut().expect("standard layout"));
                out.push(dir.bias.as_slice_mut().expect("standard layout"));
            }
        }
        out.push(self.fc1_w.as_slice_mut().expect("standard layout"));
        out.push(self.fc1_b.as_slice_mut().expect("standard layout"));
        out.push(self.fc2_w.as_slice_mut().expect("standard layout"));
        out.push(self.fc2_b.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    /// Parameters flattened in [`Self::tensors`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, _, v)| v.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::param(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Mean BCE of the batch against its targets.
    pub fn loss(&self, batch: &PairBatch) -> Result<f64> {
        let pred = forward(self, batch)?;
        let targets = batch
            .targets
            .as_ref()
            .ok_or_else(|| Error::param("loss needs a batch with targets"))?;
        bce_loss(&pred, targets)
    }

    /// Mean BCE and its gradient with respect to every parameter, returned as
    /// a model-shaped container.
    pub fn loss_and_grad(&self, batch: &PairBatch) -> Result<(f64, PairSeqModel)> {
        check_dims(self, batch)?;
        let targets = batch
            .targets
            .as_ref()
            .ok_or_else(|| Error::param("gradient needs a batch with targets"))?;
        let mut grad = PairSeqModel::zeros(self.dims);
        let loss = net::accumulate_gradient(self, batch, targets, &mut grad)?;
        Ok((loss, grad))
    }
}

fn std_slice(s: Option<&[f64]>) -> &[f64] {
    s.expect("parameters are kept in standard layout")
}

fn fill_uniform(dst: &mut [f64], bound: f64, rng: &mut ChaCha8Rng) {
    for v in dst {
        *v = rng.random_range(-bound..bound);
    }
}

/// The `n` pair sequences of one block: sequence `i`, position `j` is
/// `[rows[i]; cols[j]]`. Stored factored, since every element is a
/// concatenation of one row vector and one column vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    /// `R x d` row embeddings (sequence identity).
    pub rows: Array2<f64>,
    /// `C x d` column embeddings (position identity).
    pub cols: Array2<f64>,
    /// Optional `R x C` binary targets.
    pub targets: Option<Array2<f64>>,
}

impl PairBatch {
    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.cols.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.rows.ncols()
    }

    /// The `2d` input at sequence `i`, position `j`.
    pub fn input(&self, i: usize, j: usize) -> Vec<f64> {
        self.rows.row(i).iter().chain(self.cols.row(j).iter()).copied().collect()
    }

    /// All sequences materialised, `[i][j][k]`.
    pub fn sequences(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.n_rows())
            .map(|i| (0..self.n_cols()).map(|j| self.input(i, j)).collect())
            .collect()
    }

    /// Sub-batch for a block of the full matrix.
    pub fn block(&self, rows: Range<usize>, cols: Range<usize>) -> PairBatch {
        PairBatch {
            rows: self.rows.slice(s![rows.clone(), ..]).to_owned(),
            cols: self.cols.slice(s![cols.clone(), ..]).to_owned(),
            targets: self
                .targets
                .as_ref()
                .map(|t| t.slice(s![rows, cols]).to_owned()),
        }
    }
}

/// Pairs every segment with every other segment, optionally with the
/// reference matrix as targets.
pub fn build_pair_batch(seq: &EmbeddingSequence, target: Option<&SimilarityMatrix>) -> Result<PairBatch> {
    if seq.is_empty() {
        return Err(Error::param("cannot build a batch from an empty sequence"));
    }
    if let Some(t) = target {
        if t.n() != seq.len() {
            return Err(Error::param(format!(
                "target is {}x{}, sequence has {} segments",
                t.n(),
                t.n(),
                seq.len()
            )));
        }
    }
    let x = seq.to_matrix();
    Ok(PairBatch {
        rows: x.clone(),
        cols: x,
        targets: target.map(|t| t.values().clone()),
    })
}

/// Cuts `0..n` into `ceil(n / max_block)` near-equal contiguous chunks and
/// returns the cross product of row and column chunks.
pub fn partition_blocks(n: usize, max_block: usize) -> Vec<(Range<usize>, Range<usize>)> {
    let chunks = chunk_ranges(n, max_block);
    let mut out = Vec::with_capacity(chunks.len() * chunks.len());
    for r in &chunks {
        for c in &chunks {
            out.push((r.clone(), c.clone()));
        }
    }
    out
}

fn chunk_ranges(n: usize, max_block: usize) -> Vec<Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let max_block = max_block.max(1);
    let b = n.div_ceil(max_block);
    let base = n / b;
    let extra = n % b;
    let mut out = Vec::with_capacity(b);
    let mut start = 0;
    for k in 0..b {
        let len = base + usize::from(k < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

fn check_dims(model: &PairSeqModel, batch: &PairBatch) -> Result<()> {
    if batch.embed_dim() != model.dims.embed_dim || batch.cols.ncols() != model.dims.embed_dim {
        return Err(Error::param(format!(
            "model expects {}-dim embeddings, batch has {}",
            model.dims.embed_dim,
            batch.embed_dim()
        )));
    }
    if batch.n_rows() == 0 || batch.n_cols() == 0 {
        return Err(Error::param("empty batch"));
    }
    if let Some(t) = &batch.targets {
        if t.dim() != (batch.n_rows(), batch.n_cols()) {
            return Err(Error::param("target shape does not match the batch"));
        }
    }
    Ok(())
}

/// Scores every element of the batch; returns an `R x C` matrix in (0, 1).
pub fn forward(model: &PairSeqModel, batch: &PairBatch) -> Result<Array2<f64>> {
    check_dims(model, batch)?;
    net::predict(model, batch)
}

/// Mean binary cross entropy over all entries. Probabilities are clamped to
/// `[1e-12, 1 - 1e-12]` before the logarithm.
pub fn bce_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::param("prediction and target shapes differ"));
    }
    if pred.is_empty() {
        return Err(Error::param("empty prediction"));
    }
    let mut total = 0.0;
    for (&p, &t) in pred.iter().zip(target.iter()) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Numerical(format!("probability {p} outside [0, 1]")));
        }
        total += bce_term(p, t);
    }
    Ok(total / pred.len() as f64)
}

fn bce_term(p: f64, t: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Full `n x n` matrix assembled from independently scored blocks.
pub fn predict_matrix(model: &PairSeqModel, seq: &EmbeddingSequence, max_block: usize) -> Result<SimilarityMatrix> {
    let batch = build_pair_batch(seq, None)?;
    let n = seq.len();
    let blocks = partition_blocks(n, max_block);
    let outputs = crate::par::map(&blocks, |(r, c)| forward(model, &batch.block(r.clone(), c.clone())));
    let mut full = Array2::<f64>::zeros((n, n));
    for ((r, c), out) in blocks.iter().zip(outputs) {
        full.slice_mut(s![r.clone(), c.clone()]).assign(&out?);
    }
    SimilarityMatrix::new(full)
}
