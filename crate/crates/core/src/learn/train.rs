use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::inputs::{manifest_inputs, INPUT_DIM};
use super::loss::{loss_and_gradient, LossReport, LossWeights};
use super::model::EmbeddingModel;
use super::optim::{lr_at_epoch, sgd_step};
use crate::error::{Error, Result};
use crate::mining::{
    mine_triplets, mine_triplets_random_positive, BatchSampler, MiningConfig, PositiveStrategy,
};
use crate::relational::{DatasetManifest, RelationalMatrix};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub lambda_tri: f64,
    pub lambda_ent: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Identities per batch.
    pub p: usize,
    /// Instances per identity.
    pub k: usize,
    pub lr_decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    /// `None` means `ceil(images / batch_size)`.
    pub batches_per_epoch: Option<usize>,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    /// Side of the square resize feeding the input histograms.
    pub input_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.005,
            momentum: 0.9,
            weight_decay: 5e-4,
            margin: 0.3,
            lambda_tri: 2.0,
            lambda_ent: 0.5,
            epochs: 80,
            batch_size: 24,
            p: 6,
            k: 4,
            lr_decay_factor: 0.1,
            lr_step: 20,
            batches_per_epoch: None,
            hidden_dim: 32,
            embedding_dim: 16,
            input_size: 224,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be non-negative, got {}", self.margin)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.p * self.k != self.batch_size {
            return Err(Error::Config(format!(
                "p x k = {} does not equal batch_size {}",
                self.p * self.k,
                self.batch_size
            )));
        }
        if self.hidden_dim == 0 || self.embedding_dim == 0 || self.input_size == 0 {
            return Err(Error::Config("model and input dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            margin: self.margin,
            lambda_tri: self.lambda_tri,
            lambda_ent: self.lambda_ent,
        }
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        lr_at_epoch(self.lr0, self.lr_decay_factor, self.lr_step, epoch)
    }
}

/// Per-epoch means of the batch losses; `active_triplets` is the epoch sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub report: LossReport,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EmbeddingModel,
    pub history: Vec<EpochRecord>,
}

/// Trains on precomputed input vectors. `labels` are dense class labels
/// parallel to `inputs`; `mx` rows are indexed the same way.
pub fn train_on_vectors(
    inputs: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    mx: &RelationalMatrix,
    mining: &MiningConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if inputs.len() != labels.len() || mx.m() != inputs.len() {
        return Err(Error::Dimension(format!(
            "{} inputs, {} labels, {}x{} matrix",
            inputs.len(),
            labels.len(),
            mx.m(),
            mx.m()
        )));
    }
    let input_dim = inputs.first().map_or(0, Vec::len);
    if input_dim == 0 || inputs.iter().any(|x| x.len() != input_dim) {
        return Err(Error::Dimension("inputs must share one positive dimension".into()));
    }
    if labels.iter().any(|&l| l >= n_classes) {
        return Err(Error::Config("label outside class range".into()));
    }

    let weights = cfg.loss_weights();
    let mut model = EmbeddingModel::init(
        input_dim,
        cfg.hidden_dim,
        cfg.embedding_dim,
        n_classes,
        derive_seed(cfg.seed, &[0]),
    );
    let mut velocity = model.zeros_like();
    let mut sampler = BatchSampler::new(labels, cfg.p, cfg.k, cfg.batch_size, derive_seed(cfg.seed, &[1]))?;
    let mut positive_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2]));
    let batches = cfg
        .batches_per_epoch
        .unwrap_or_else(|| inputs.len().div_ceil(cfg.batch_size))
        .max(1);

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let (mut e_tri, mut e_ent, mut active) = (0.0, 0.0, 0);
        for _ in 0..batches {
            let mut batch = sampler.next_batch();
            let embeddings = batch
                .indices
                .iter()
                .map(|&i| model.activations(&inputs[i]).map(|a| a.embedding))
                .collect::<Result<Vec<_>>>()?;
            batch.embeddings = Some(embeddings);
            let triplets = match mining.positive {
                PositiveStrategy::Relational => {
                    mine_triplets(&batch, mx, mining.policy, mining.tau_min)?
                }
                PositiveStrategy::RandomSameId => {
                    mine_triplets_random_positive(&batch, labels, &mut positive_rng)?
                }
            };
            let (report, grads) =
                loss_and_gradient(&model, inputs, labels, &batch, &triplets, &weights)?;
            sgd_step(&mut model, &grads, &mut velocity, lr, cfg.momentum, cfg.weight_decay)?;
            e_tri += report.e_tri;
            e_ent += report.e_ent;
            active += report.active_triplets;
        }
        let n = batches as f64;
        let record = EpochRecord {
            epoch,
            report: LossReport::new(e_tri / n, e_ent / n, active, &weights),
            lr,
        };
        if !record.report.total.is_finite() || !model.is_finite() {
            return Err(Error::Numeric(format!("training diverged at epoch {epoch}")));
        }
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome { model, history })
}

/// Trains on manifest images after checking that `mx` was built from this
/// manifest.
pub fn train(
    manifest: &DatasetManifest,
    mx: &RelationalMatrix,
    mining: &MiningConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    manifest.validate_for_training()?;
    mx.check_against(manifest)?;
    let inputs = manifest_inputs(manifest, cfg.input_size)?;
    debug_assert!(inputs.iter().all(|v| v.len() == INPUT_DIM));
    let (labels, names) = manifest.class_labels();
    train_on_vectors(&inputs, &labels, names.len(), mx, mining, cfg, on_epoch)
}

/// `epoch,e_tri,e_ent,total,active_triplets,lr` rows.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,e_tri,e_ent,total,active_triplets,lr\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.report.e_tri, r.report.e_ent, r.report.total, r.report.active_triplets, r.lr
        ));
    }
    s
}

pub fn write_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

/// Mean total loss over consecutive windows of `window` epochs.
pub fn window_means(history: &[EpochRecord], window: usize) -> Vec<f64> {
    history
        .chunks(window.max(1))
        .map(|c| c.iter().map(|r| r.report.total).sum::<f64>() / c.len() as f64)
        .collect()
}
