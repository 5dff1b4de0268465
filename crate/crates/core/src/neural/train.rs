use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_pair_batch, partition_blocks, ModelDims, PairSeqModel, DEFAULT_MAX_BLOCK, PAPER_FC, PAPER_HIDDEN};
use crate::domain::EmbeddingSequence;
use crate::error::{Error, Result};
use crate::segmentation::reference_matrix;

/// SGD schedule and network size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub max_block: usize,
    pub seed: u64,
    pub hidden: usize,
    pub fc_dim: usize,
    /// Global gradient-norm cap; off unless set.
    pub grad_clip: Option<f64>,
    /// Visit only this many randomly chosen blocks of each recording per
    /// epoch instead of all of them.
    pub blocks_per_recording: Option<usize>,
    /// Apply a fresh random rotation to each recording's embeddings every
    /// epoch. Same/different structure is unchanged, so the network has to
    /// learn to compare segments rather than memorise training speakers.
    pub rotate_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            lr_decay_factor: 10.0,
            lr_decay_every: 40,
            epochs: 100,
            max_block: DEFAULT_MAX_BLOCK,
            seed: 0,
            hidden: PAPER_HIDDEN,
            fc_dim: PAPER_FC,
            grad_clip: None,
            blocks_per_recording: None,
            rotate_embeddings: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("learning rate must be nonnegative, got {}", self.lr0)));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config("learning-rate decay factor must be positive".into()));
        }
        if self.lr_decay_every == 0 || self.max_block == 0 || self.hidden == 0 || self.fc_dim == 0 {
            return Err(Error::Config(
                "decay interval, block size and layer widths must be positive".into(),
            ));
        }
        if self.blocks_per_recording == Some(0) {
            return Err(Error::Config("blocks_per_recording must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("gradient clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Learning rate in force during `epoch` (1-based).
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    let decays = (epoch.max(1) - 1) / cfg.lr_decay_every;
    cfg.lr0 / cfg.lr_decay_factor.powi(decays as i32)
}

/// One recording with a speaker label per segment.
#[derive(Clone, Debug)]
pub struct TrainingItem {
    pub seq: EmbeddingSequence,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Loss averaged over every matrix entry seen in the epoch.
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: PairSeqModel,
    pub history: Vec<EpochLog>,
}

/// Trains from a fresh seeded initialisation. Each epoch visits recordings in
/// a seeded shuffled order; every block of every recording is one plain SGD
/// step on the mean BCE of that block.
pub fn train(corpus: &[TrainingItem], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(corpus, cfg, |_| {})
}

pub fn train_with(
    corpus: &[TrainingItem],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = corpus
        .first()
        .ok_or_else(|| Error::Training("empty training corpus".into()))?;
    let dims = ModelDims {
        embed_dim: first.seq.dim,
        hidden: cfg.hidden,
        fc_dim: cfg.fc_dim,
    };
    let mut model = PairSeqModel::init(dims, cfg.seed);
    let history = continue_training(&mut model, corpus, cfg, &mut on_epoch)?;
    Ok(TrainOutcome { model, history })
}

/// Runs the schedule on an existing model.
pub(crate) fn continue_training(
    model: &mut PairSeqModel,
    corpus: &[TrainingItem],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let mut batches = Vec::with_capacity(corpus.len());
    for item in corpus {
        if item.seq.dim != model.dims.embed_dim {
            return Err(Error::Training(format!(
                "recording {} has dimension {}, model expects {}",
                item.seq.recording_id, item.seq.dim, model.dims.embed_dim
            )));
        }
        if item.labels.len() != item.seq.len() {
            return Err(Error::Training(format!(
                "recording {} has {} labels for {} segments",
                item.seq.recording_id,
                item.labels.len(),
                item.seq.len()
            )));
        }
        let target = reference_matrix(&item.labels)?;
        batches.push(build_pair_batch(&item.seq, Some(&target))?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_d0f5_u64.rotate_left(32));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = learning_rate(cfg, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut entries = 0usize;
        for &rec in &order {
            let batch = &batches[rec];
            let mut blocks: Vec<_> = partition_blocks(batch.n_rows(), cfg.max_block).into_iter().enumerate().collect();
            if let Some(k) = cfg.blocks_per_recording {
                if k < blocks.len() {
                    let (picked, _) = blocks.partial_shuffle(&mut rng, k);
                    blocks = picked.to_vec();
                }
            }
            let rotation = cfg.rotate_embeddings.then(|| random_rotation(model.dims.embed_dim, &mut rng));
            for (b, (rows, cols)) in blocks {
                let mut block = batch.block(rows, cols);
                if let Some(q) = &rotation {
                    block.rows = block.rows.dot(q);
                    block.cols = block.cols.dot(q);
                }
                let (loss, grad) = model.loss_and_grad(&block)?;
                if !loss.is_finite() {
                    return Err(Error::Training(format!(
                        "loss diverged in epoch {epoch}, recording {}, block {b}",
                        corpus[rec].seq.recording_id
                    )));
                }
                sgd_step(model, &grad, lr, cfg.grad_clip);
                let count = block.n_rows() * block.n_cols();
                loss_sum += loss * count as f64;
                entries += count;
            }
        }
        let log = EpochLog {
            epoch,
            lr,
            mean_loss: loss_sum / entries as f64,
        };
        on_epoch(&log);
        history.push(log);
    }
    Ok(history)
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// column signs fixed by the diagonal of R.
fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    Array2::from_shape_fn((d, d), |(i, j)| if r[(j, j)] < 0.0 { -q[(i, j)] } else { q[(i, j)] })
}

fn sgd_step(model: &mut PairSeqModel, grad: &PairSeqModel, lr: f64, clip: Option<f64>) {
    let mut scale = lr;
    if let Some(cap) = clip {
        let norm = grad
            .tensors()
            .iter()
            .flat_map(|(_, _, g)| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > cap {
            scale *= cap / norm;
        }
    }
    let grads: Vec<Vec<f64>> = grad.tensors().into_iter().map(|(_, _, g)| g.to_vec()).collect();
    for (param, g) in model.tensors_mut().into_iter().zip(grads) {
        for (p, d) in param.iter_mut().zip(g) {
            *p -= scale * d;
        }
    }
}
