//! Epoch loop shared by the variational and deterministic families.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneConfig, BackboneError, Model, Noise};
use crate::data::{EmbeddingTable, Example, TokenId};
use crate::metrics::{canonical_eval, EvalConfig, EvalSummary, MetricsError};
use crate::numeric::{clip_global_norm, derive_seed, seeded_rng, AdamWConfig, Graph, NumericError, OptimState};
use crate::objective::{
    autopilot_step, total_loss, BandConfig, EpochDiagnostics, LossBreakdown, ObjectiveError, RegulatorConfig,
    RegulatorState,
};
use crate::retention::{Checkpoint, EpochRecord};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training examples")]
    NoTrainingData,
    #[error("seed {seed} epoch {epoch} batch {batch}: {source}")]
    Step {
        seed: u64,
        epoch: usize,
        batch: usize,
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_eve: f64,
    pub lr_det: f64,
    pub weight_decay: f64,
    pub clip_grad: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 48,
            lr_eve: 2e-4,
            lr_det: 2e-4,
            weight_decay: 1e-4,
            clip_grad: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr_eve > 0.0 && self.lr_det > 0.0) {
            return Err(TrainError::InvalidConfig("learning rates must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_grad > 0.0) {
            return Err(TrainError::InvalidConfig("weight_decay >= 0 and clip_grad > 0 required".into()));
        }
        Ok(())
    }
}

/// Everything one training run needs.
pub struct RunSpec<'a> {
    pub backbone: BackboneConfig,
    pub band: BandConfig,
    pub regulator: RegulatorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub embedding: Arc<EmbeddingTable>,
    pub train_set: &'a [Example],
    pub val_set: &'a [Example],
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochOutcome {
    pub epoch: usize,
    /// Batch-averaged training objective.
    pub train: LossBreakdown,
    pub mean_grad_norm: f64,
    pub val: EvalSummary,
    pub record: EpochRecord,
    /// Regulator state after this epoch's update.
    pub beta: f64,
    pub unit_scales: Vec<f64>,
}

pub struct RunOutcome {
    pub seed: u64,
    pub variational: bool,
    pub epochs: Vec<EpochOutcome>,
    pub checkpoints: Vec<Checkpoint>,
}

// Noise streams for the training draws and the batch order.
const STREAM_INIT: u64 = 0x1417;
const STREAM_SHUFFLE: u64 = 0x5f1e;
const STREAM_NOISE: u64 = 0x7a0e;

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        ce: avg(|b| b.ce),
        kl_raw: avg(|b| b.kl_raw),
        reg_kl: avg(|b| b.reg_kl),
        local_recon: avg(|b| b.local_recon),
        band: avg(|b| b.band),
        total: avg(|b| b.total),
        beta: parts.last().map_or(0.0, |b| b.beta),
    }
}

pub fn diagnostics_from(summary: &EvalSummary) -> EpochDiagnostics {
    EpochDiagnostics {
        mu2_mean: summary.mu2_mean_eval,
        occupancy: summary.band_occupancy,
        frac_low: summary.frac_low,
        frac_high: summary.frac_too_high,
        kl: summary.kl,
        unit_energy: summary.unit_energy.clone(),
    }
}

pub fn record_from(seed: u64, epoch: usize, s: &EvalSummary) -> EpochRecord {
    EpochRecord::new(seed, epoch, s.ce, s.acc, s.local, s.frac_too_high, s.mu2_mean_eval, s.kl)
}

/// One optimizer step on a batch; returns the loss breakdown and the
/// pre-clip gradient norm.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model,
    opt: &mut OptimState,
    batch: &[&Example],
    keys: &[u64],
    noise_seed: u64,
    band: &BandConfig,
    reg: &RegulatorState,
    clip: f64,
) -> Result<(LossBreakdown, f64), TrainError> {
    let contexts: Vec<&[TokenId]> = batch.iter().map(|e| e.context.as_slice()).collect();
    let targets: Vec<TokenId> = batch.iter().map(|e| e.target).collect();
    let noise = Noise::Seeded {
        seed: noise_seed,
        passes: model.config.mc_samples_train,
    };
    let mut g = Graph::new();
    let out = model.build_forward(&mut g, &contexts, keys, &noise)?;
    let (loss, breakdown) = total_loss(&mut g, &out, &targets, band, reg)?;
    let grads = g.backward(loss)?;
    let (grads, norm) = clip_global_norm(grads, clip)?;
    opt.step(&mut model.params, &grads)?;
    Ok((breakdown, norm))
}

/// Trains one seed of one family, evaluating on the validation view after
/// every epoch. The autopilot only runs for the variational family.
pub fn train_run(spec: &RunSpec<'_>) -> Result<RunOutcome, TrainError> {
    spec.train.validate()?;
    spec.band.validate()?;
    spec.regulator.validate()?;
    if spec.train_set.is_empty() {
        return Err(TrainError::NoTrainingData);
    }
    let variational = spec.backbone.variational;
    let mut model = Model::init(spec.backbone.clone(), spec.embedding.clone(), derive_seed(spec.seed, STREAM_INIT))?;
    let mut opt = OptimState::new(AdamWConfig {
        lr: if variational { spec.train.lr_eve } else { spec.train.lr_det },
        weight_decay: spec.train.weight_decay,
        ..Default::default()
    });
    let mut reg = RegulatorState::new(spec.backbone.latent_dim, &spec.regulator);
    let mut epochs = Vec::with_capacity(spec.train.epochs);
    let mut checkpoints = Vec::with_capacity(spec.train.epochs);

    for epoch in 1..=spec.train.epochs {
        let epoch_seed = derive_seed(spec.seed, epoch as u64);
        let mut order: Vec<usize> = (0..spec.train_set.len()).collect();
        order.shuffle(&mut seeded_rng(derive_seed(epoch_seed, STREAM_SHUFFLE)));
        let noise_seed = derive_seed(epoch_seed, STREAM_NOISE);
        let mut parts = Vec::new();
        let mut norm_sum = 0.0;
        for (b, idx) in order.chunks(spec.train.batch_size).enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &spec.train_set[i]).collect();
            let keys: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
            let (breakdown, norm) = train_step(
                &mut model,
                &mut opt,
                &batch,
                &keys,
                noise_seed,
                &spec.band,
                &reg,
                spec.train.clip_grad,
            )
            .map_err(|e| TrainError::Step {
                seed: spec.seed,
                epoch,
                batch: b,
                source: Box::new(e),
            })?;
            parts.push(breakdown);
            norm_sum += norm;
        }

        let (val, _) = canonical_eval(&model, spec.val_set, &spec.band, &spec.eval)?;
        if variational {
            reg = autopilot_step(&reg, &diagnostics_from(&val), &spec.band, &spec.regulator);
        }
        let record = record_from(spec.seed, epoch, &val);
        checkpoints.push(Checkpoint {
            params: model.params.clone(),
            config: model.config.clone(),
            regulator: reg.clone(),
            record: record.clone(),
            selection_reason: String::new(),
        });
        epochs.push(EpochOutcome {
            epoch,
            mean_grad_norm: norm_sum / parts.len() as f64,
            train: mean_breakdown(&parts),
            val,
            record,
            beta: reg.beta,
            unit_scales: reg.unit_scales.clone(),
        });
    }
    Ok(RunOutcome {
        seed: spec.seed,
        variational,
        epochs,
        checkpoints,
    })
}
