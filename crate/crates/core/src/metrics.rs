//! The canonical evaluation view.
//!
//! Every candidate checkpoint is scored with the same front end, context
//! length and Monte-Carlo protocol. Noise for example `i` comes from the
//! stream `(seed, i)`, so two candidates see identical draws.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneError, McPrediction, Model, Noise};
use crate::data::Example;
use crate::objective::{band_from_energy, kl_gaussian, local_activity, local_recon_loss, BandConfig, ObjectiveError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Per-example Monte-Carlo predictive statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReadout {
    pub predictive_entropy: f64,
    pub conditional_entropy: f64,
    pub mutual_information: f64,
    pub epi: f64,
    pub top1_flip_rate_mc: f64,
    pub confidence: f64,
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate().skip(1) {
        if x > p[best] {
            best = i;
        }
    }
    best
}

fn mean_distribution(passes: &[&[f64]]) -> Vec<f64> {
    if passes.iter().all(|p| *p == passes[0]) {
        return passes[0].to_vec();
    }
    let mut mean = vec![0.0; passes[0].len()];
    for p in passes {
        for (m, x) in mean.iter_mut().zip(p.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= passes.len() as f64);
    mean
}

/// `(H(p̄), mean per-pass entropy, H − mean entropy)` before any flooring.
pub fn entropy_decomposition(passes: &[&[f64]]) -> Result<(f64, f64, f64), MetricsError> {
    if passes.is_empty() {
        return Err(MetricsError::Empty("entropy_decomposition"));
    }
    let h = entropy(&mean_distribution(passes));
    if passes.iter().all(|p| *p == passes[0]) {
        return Ok((h, h, 0.0));
    }
    let hc = passes.iter().map(|p| entropy(p)).sum::<f64>() / passes.len() as f64;
    Ok((h, hc, h - hc))
}

/// Readout from the per-pass probability vectors of one example.
///
/// MI is floored at zero after the decomposition; the epistemic summary is
/// the mean over classes of the across-pass variance of the class
/// probability.
pub fn predictive_readout(passes: &[&[f64]]) -> Result<UncertaintyReadout, MetricsError> {
    let (h, hc, mi) = entropy_decomposition(passes)?;
    let mean = mean_distribution(passes);
    let top = argmax(&mean);
    let m = passes.len() as f64;
    let flips = passes.iter().filter(|p| argmax(p) != top).count() as f64;
    let epi = mean
        .iter()
        .enumerate()
        .map(|(c, &mu)| passes.iter().map(|p| (p[c] - mu).powi(2)).sum::<f64>() / m)
        .sum::<f64>()
        / mean.len() as f64;
    Ok(UncertaintyReadout {
        predictive_entropy: h,
        conditional_entropy: hc,
        mutual_information: mi.max(0.0),
        epi,
        top1_flip_rate_mc: flips / m,
        confidence: mean[top],
    })
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64, MetricsError> {
    if confidences.len() != correct.len() {
        return Err(MetricsError::LengthMismatch(confidences.len(), correct.len()));
    }
    if confidences.is_empty() {
        return Err(MetricsError::Empty("ece"));
    }
    if bins == 0 {
        return Err(MetricsError::InvalidArgument("bins must be >= 1".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let k = count[b] as f64;
            (k / n) * (hits[b] as f64 / k - conf_sum[b] / k).abs()
        })
        .sum())
}

/// Mean of the worst `⌈alpha · N⌉` values.
pub fn cvar_nll(nlls: &[f64], alpha: f64) -> Result<f64, MetricsError> {
    if nlls.is_empty() {
        return Err(MetricsError::Empty("cvar_nll"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MetricsError::InvalidArgument(format!("alpha {alpha} outside (0, 1)")));
    }
    let k = ((alpha * nlls.len() as f64 - 1e-9).ceil() as usize).clamp(1, nlls.len());
    let mut sorted = nlls.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Structural latent-state summary under the evaluation view.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatentDiagnostics {
    pub mu2_mean: f64,
    pub occupancy: f64,
    pub frac_low: f64,
    pub frac_too_high: f64,
    /// Mean per-example KL summed over units.
    pub kl: f64,
    /// Reconstruction activity `1 / (1 + MSE)`.
    pub local: f64,
    pub local_mse: f64,
    pub unit_energy: Vec<f64>,
}

#[derive(Default)]
struct LatentAccumulator {
    n: usize,
    energy: Vec<f64>,
    kl: f64,
    mse: f64,
    variational: Option<bool>,
}

impl LatentAccumulator {
    fn add(&mut self, pred: &McPrediction) -> Result<(), MetricsError> {
        let (means, variational) = match (&pred.passes[0].latent, &pred.det_activations) {
            (Some(l), _) => (&l.mu_q, true),
            (None, Some(d)) => (d, false),
            (None, None) => return Err(MetricsError::InvalidArgument("prediction without latent readout".into())),
        };
        if self.energy.is_empty() {
            self.energy = vec![0.0; means.len()];
        }
        if self.energy.len() != means.len() {
            return Err(MetricsError::LengthMismatch(self.energy.len(), means.len()));
        }
        for (e, m) in self.energy.iter_mut().zip(means) {
            *e += m * m;
        }
        if variational {
            let l = pred.passes[0].latent.as_ref().expect("variational");
            self.kl += kl_gaussian(&l.mu_q, &l.sigma_q, &l.mu_p, &l.sigma_p)?.1;
            let mut mse = 0.0;
            for p in &pred.passes {
                let l = p.latent.as_ref().expect("variational");
                mse += local_recon_loss(&l.h, &l.h_hat)?;
            }
            self.mse += mse / pred.passes.len() as f64;
        }
        self.variational = Some(variational);
        self.n += 1;
        Ok(())
    }

    fn finish(self, cfg: &BandConfig) -> Result<LatentDiagnostics, MetricsError> {
        if self.n == 0 {
            return Err(MetricsError::Empty("latent_diagnostics"));
        }
        let n = self.n as f64;
        let unit_energy: Vec<f64> = self.energy.iter().map(|e| e / n).collect();
        let mu2_mean = unit_energy.iter().sum::<f64>() / unit_energy.len() as f64;
        if self.variational == Some(false) {
            return Ok(LatentDiagnostics {
                mu2_mean,
                unit_energy,
                ..Default::default()
            });
        }
        let band = band_from_energy(&unit_energy, cfg, None);
        let local_mse = self.mse / n;
        Ok(LatentDiagnostics {
            mu2_mean,
            occupancy: band.occupancy,
            frac_low: band.frac_low,
            frac_too_high: band.frac_high,
            kl: self.kl / n,
            local: local_activity(local_mse),
            local_mse,
            unit_energy,
        })
    }
}

/// Latent diagnostics over a batch of predictions.
///
/// For DET, `μ²` is taken over the deterministic latent-width activations and
/// every variational quantity (KL, local, band fractions) is exactly zero.
pub fn latent_diagnostics(preds: &[McPrediction], cfg: &BandConfig) -> Result<LatentDiagnostics, MetricsError> {
    let mut acc = LatentAccumulator::default();
    for p in preds {
        acc.add(p)?;
    }
    acc.finish(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mc_samples: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub ece_bins: usize,
    pub cvar_alpha: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mc_samples: 12,
            seed: 0,
            batch_size: 64,
            ece_bins: 15,
            cvar_alpha: 0.05,
        }
    }
}

/// Aggregate of the canonical view over an evaluation set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_examples: usize,
    /// Mean per-pass cross-entropy.
    pub ce: f64,
    /// Mean `-log p̄(target)`.
    pub nll: f64,
    pub ppl: f64,
    pub acc: f64,
    pub ece: f64,
    pub cvar_nll: f64,
    pub kl: f64,
    pub local: f64,
    pub mu2_mean_eval: f64,
    pub band_occupancy: f64,
    pub frac_low: f64,
    pub frac_too_high: f64,
    pub mi: f64,
    pub epi: f64,
    pub flip: f64,
    pub entropy: f64,
    pub unit_energy: Vec<f64>,
}

/// One row of the per-example export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleReadout {
    pub id: usize,
    pub readout: UncertaintyReadout,
    pub nll: f64,
    pub ce: f64,
    pub predicted: usize,
    pub correct: bool,
}

fn neg_log(p: f64) -> f64 {
    -p.max(f64::MIN_POSITIVE).ln()
}

/// Per-example rows for one prediction.
pub fn example_readout(id: usize, pred: &McPrediction, target: usize) -> Result<ExampleReadout, MetricsError> {
    let probs: Vec<&[f64]> = pred.passes.iter().map(|p| p.probabilities.as_slice()).collect();
    let readout = predictive_readout(&probs)?;
    let ce = probs.iter().map(|p| neg_log(p[target])).sum::<f64>() / probs.len() as f64;
    let predicted = argmax(&pred.mean);
    Ok(ExampleReadout {
        id,
        readout,
        nll: neg_log(pred.mean[target]),
        ce,
        predicted,
        correct: predicted == target,
    })
}

/// Runs `model` over `examples` with the fixed evaluation protocol.
pub fn canonical_eval(
    model: &Model,
    examples: &[Example],
    band: &BandConfig,
    cfg: &EvalConfig,
) -> Result<(EvalSummary, Vec<ExampleReadout>), MetricsError> {
    if examples.is_empty() {
        return Err(MetricsError::Empty("canonical_eval"));
    }
    if cfg.mc_samples == 0 || cfg.batch_size == 0 {
        return Err(MetricsError::InvalidArgument("mc_samples and batch_size must be >= 1".into()));
    }
    let noise = Noise::Seeded {
        seed: cfg.seed,
        passes: cfg.mc_samples,
    };
    let mut rows = Vec::with_capacity(examples.len());
    let mut latent = LatentAccumulator::default();
    for (chunk_idx, chunk) in examples.chunks(cfg.batch_size).enumerate() {
        let base = chunk_idx * cfg.batch_size;
        let contexts: Vec<&[u32]> = chunk.iter().map(|e| e.context.as_slice()).collect();
        let keys: Vec<u64> = (base..base + chunk.len()).map(|i| i as u64).collect();
        let preds = model.predict_batch(&contexts, &keys, &noise)?;
        for (i, (pred, ex)) in preds.iter().zip(chunk).enumerate() {
            rows.push(example_readout(base + i, pred, ex.target as usize)?);
            latent.add(pred)?;
        }
    }
    let diag = latent.finish(band)?;
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&ExampleReadout) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let ce = mean(&|r| r.ce);
    let nlls: Vec<f64> = rows.iter().map(|r| r.nll).collect();
    let confidences: Vec<f64> = rows.iter().map(|r| r.readout.confidence).collect();
    let correct: Vec<bool> = rows.iter().map(|r| r.correct).collect();
    let summary = EvalSummary {
        n_examples: rows.len(),
        ce,
        nll: mean(&|r| r.nll),
        ppl: ce.exp(),
        acc: mean(&|r| r.correct as u8 as f64),
        ece: ece(&confidences, &correct, cfg.ece_bins)?,
        cvar_nll: cvar_nll(&nlls, cfg.cvar_alpha)?,
        kl: diag.kl,
        local: diag.local,
        mu2_mean_eval: diag.mu2_mean,
        band_occupancy: diag.occupancy,
        frac_low: diag.frac_low,
        frac_too_high: diag.frac_too_high,
        mi: mean(&|r| r.readout.mutual_information),
        epi: mean(&|r| r.readout.epi),
        flip: mean(&|r| r.readout.top1_flip_rate_mc),
        entropy: mean(&|r| r.readout.predictive_entropy),
        unit_energy: diag.unit_energy,
    };
    Ok((summary, rows))
}

#[derive(Serialize)]
struct CsvRow {
    id: usize,
    #[serde(rename = "H")]
    h: f64,
    #[serde(rename = "Hc")]
    hc: f64,
    #[serde(rename = "MI")]
    mi: f64,
    epi: f64,
    flip: f64,
    confidence: f64,
    nll: f64,
    correct: bool,
}

/// Writes one CSV row per example: id, H, Hc, MI, epi, flip, confidence,
/// nll, correct.
pub fn write_readouts_csv(path: &Path, rows: &[ExampleReadout]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(CsvRow {
            id: r.id,
            h: r.readout.predictive_entropy,
            hc: r.readout.conditional_entropy,
            mi: r.readout.mutual_information,
            epi: r.readout.epi,
            flip: r.readout.top1_flip_rate_mc,
            confidence: r.readout.confidence,
            nll: r.nll,
            correct: r.correct,
        })?;
    }
    w.flush()?;
    Ok(())
}
