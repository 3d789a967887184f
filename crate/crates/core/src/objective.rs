//! The composite training objective and the homeostatic autopilot.
//!
//! Each loss component exists twice: as a plain function over slices (used by
//! evaluation and diagnostics) and as a graph builder (used for training).
//! Both evaluate the same formula.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::ForwardOutput;
use crate::numeric::{Graph, NodeId, NumericError, Tensor};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("scale parameters must be positive, got {value} for unit {unit}")]
    NonPositiveSigma { unit: usize, value: f64 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite loss term `{0}`")]
    NonFinite(&'static str),
    #[error("invalid band config: {0}")]
    InvalidBand(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Target activity band and loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandConfig {
    pub mu2_target: f64,
    pub band_low: f64,
    pub band_high: f64,
    pub lambda_band: f64,
    pub lambda_band_high: f64,
    pub lambda_local: f64,
}

impl Default for BandConfig {
    fn default() -> Self {
        Self {
            mu2_target: 0.10,
            band_low: 0.05,
            band_high: 0.20,
            lambda_band: 4e-3,
            lambda_band_high: 2.05,
            lambda_local: 3e-2,
        }
    }
}

impl BandConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(0.0 < self.band_low && self.band_low < self.mu2_target && self.mu2_target < self.band_high)
        {
            return Err(ObjectiveError::InvalidBand(
                "need 0 < band_low < mu2_target < band_high".into(),
            ));
        }
        if [self.lambda_band, self.lambda_band_high, self.lambda_local]
            .iter()
            .any(|l| !(*l >= 0.0))
        {
            return Err(ObjectiveError::InvalidBand("weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Closed-form `KL(N(μq, σq²) ‖ N(μp, σp²))` per unit, and its sum.
pub fn kl_gaussian(
    mu_q: &[f64],
    sigma_q: &[f64],
    mu_p: &[f64],
    sigma_p: &[f64],
) -> Result<(Vec<f64>, f64), ObjectiveError> {
    let n = mu_q.len();
    for len in [sigma_q.len(), mu_p.len(), sigma_p.len()] {
        if len != n {
            return Err(ObjectiveError::LengthMismatch(n, len));
        }
    }
    for (unit, &value) in sigma_q.iter().chain(sigma_p).enumerate() {
        if !(value > 0.0) {
            return Err(ObjectiveError::NonPositiveSigma { unit: unit % n, value });
        }
    }
    let per_unit: Vec<f64> = (0..n)
        .map(|u| {
            let (sq, sp) = (sigma_q[u], sigma_p[u]);
            let d = mu_q[u] - mu_p[u];
            (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5
        })
        .collect();
    let total = per_unit.iter().sum();
    Ok((per_unit, total))
}

/// Mean squared error between the pre-latent hidden vector and its
/// reconstruction.
pub fn local_recon_loss(h: &[f64], h_hat: &[f64]) -> Result<f64, ObjectiveError> {
    if h.len() != h_hat.len() {
        return Err(ObjectiveError::LengthMismatch(h.len(), h_hat.len()));
    }
    if h.is_empty() {
        return Ok(0.0);
    }
    Ok(h.iter().zip(h_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / h.len() as f64)
}

/// Selection-facing reconstruction activity in `(0, 1]`; higher is better.
pub fn local_activity(mse: f64) -> f64 {
    1.0 / (1.0 + mse)
}

/// Band penalty and occupancy statistics for one set of unit energies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub band: f64,
    pub frac_low: f64,
    pub frac_high: f64,
    pub occupancy: f64,
}

/// Band statistics over per-unit energies `μ_u²`.
///
/// `unit_scales`, when given, multiplies each unit's above-band violation
/// (the neuron regulator's per-unit penalty scale).
pub fn band_from_energy(energy: &[f64], cfg: &BandConfig, unit_scales: Option<&[f64]>) -> BandStats {
    let n = energy.len().max(1) as f64;
    let mut low_pen = 0.0;
    let mut high_pen = 0.0;
    let (mut n_low, mut n_high) = (0usize, 0usize);
    for (u, &e) in energy.iter().enumerate() {
        if e < cfg.band_low {
            n_low += 1;
        }
        if e > cfg.band_high {
            n_high += 1;
        }
        low_pen += (cfg.band_low - e).max(0.0);
        let scale = unit_scales.map_or(1.0, |s| s[u]);
        high_pen += scale * (e - cfg.band_high).max(0.0);
    }
    let frac_low = n_low as f64 / n;
    let frac_high = n_high as f64 / n;
    BandStats {
        band: low_pen / n + cfg.lambda_band_high * high_pen / n,
        frac_low,
        frac_high,
        occupancy: (energy.len() - n_low - n_high) as f64 / n,
    }
}

/// Band statistics for per-unit latent means.
pub fn band_penalty(mu: &[f64], cfg: &BandConfig) -> BandStats {
    let energy: Vec<f64> = mu.iter().map(|m| m * m).collect();
    band_from_energy(&energy, cfg, None)
}

/// Graph form of the batch KL: mean over rows of the per-row sum over units.
pub fn kl_node(
    g: &mut Graph,
    mu_q: NodeId,
    log_sigma_q: NodeId,
    mu_p: NodeId,
    log_sigma_p: NodeId,
) -> Result<NodeId, ObjectiveError> {
    let rows = g.value(mu_q).rows() as f64;
    let log_ratio = g.sub(log_sigma_p, log_sigma_q)?;
    let two_lq = g.scale(log_sigma_q, 2.0);
    let var_q = g.exp(two_lq);
    let diff = g.sub(mu_q, mu_p)?;
    let diff2 = g.square(diff);
    let num = g.add(var_q, diff2)?;
    let neg_two_lp = g.scale(log_sigma_p, -2.0);
    let inv_var_p = g.exp(neg_two_lp);
    let frac = g.mul(num, inv_var_p)?;
    let half = g.scale(frac, 0.5);
    let per_unit = g.add(log_ratio, half)?;
    let per_unit = g.add_scalar(per_unit, -0.5);
    let total = g.sum(per_unit);
    Ok(g.scale(total, 1.0 / rows))
}

pub fn recon_node(g: &mut Graph, h: NodeId, h_hat: NodeId) -> Result<NodeId, ObjectiveError> {
    let d = g.sub(h, h_hat)?;
    let d2 = g.square(d);
    Ok(g.mean(d2))
}

/// Graph form of the band penalty on batch-averaged unit energies.
pub fn band_node(
    g: &mut Graph,
    mu: NodeId,
    cfg: &BandConfig,
    unit_scales: &[f64],
) -> Result<NodeId, ObjectiveError> {
    let sq = g.square(mu);
    let energy = g.mean_rows(sq);
    let neg = g.scale(energy, -1.0);
    let below = g.add_scalar(neg, cfg.band_low);
    let below = g.relu(below);
    let low = g.mean(below);
    let above = g.add_scalar(energy, -cfg.band_high);
    let above = g.relu(above);
    let scales = g.constant(Tensor::row_vector(unit_scales.to_vec()));
    let above = g.mul_row(above, scales)?;
    let high = g.mean(above);
    let high = g.scale(high, cfg.lambda_band_high);
    Ok(g.add(low, high)?)
}

/// Per-term values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kl_raw: f64,
    pub reg_kl: f64,
    pub local_recon: f64,
    pub band: f64,
    pub total: f64,
    pub beta: f64,
}

impl LossBreakdown {
    /// Assembles `total = ce + β·kl + λ_local·local + λ_band·band`.
    pub fn assemble(ce: f64, kl_raw: f64, local_recon: f64, band: f64, beta: f64, cfg: &BandConfig) -> Self {
        let reg_kl = beta * kl_raw;
        Self {
            ce,
            kl_raw,
            reg_kl,
            local_recon,
            band,
            total: ce + reg_kl + cfg.lambda_local * local_recon + cfg.lambda_band * band,
            beta,
        }
    }

    pub fn deterministic(ce: f64) -> Self {
        Self {
            ce,
            total: ce,
            ..Default::default()
        }
    }

    fn check_finite(&self) -> Result<(), ObjectiveError> {
        for (name, v) in [
            ("ce", self.ce),
            ("kl", self.kl_raw),
            ("local_recon", self.local_recon),
            ("band", self.band),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(ObjectiveError::NonFinite(name));
            }
        }
        Ok(())
    }
}

/// Builds the training objective over a forward pass and returns the loss
/// node with its breakdown.
///
/// CE and local reconstruction are averaged over the Monte-Carlo passes; KL
/// is closed-form and the band acts on the posterior means.
pub fn total_loss(
    g: &mut Graph,
    out: &ForwardOutput,
    targets: &[u32],
    cfg: &BandConfig,
    reg: &RegulatorState,
) -> Result<(NodeId, LossBreakdown), ObjectiveError> {
    let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let m = out.logits.len() as f64;
    let mut ce = None;
    for &logits in &out.logits {
        let c = g.softmax_cross_entropy(logits, &targets)?;
        ce = Some(match ce {
            None => c,
            Some(acc) => g.add(acc, c)?,
        });
    }
    let ce = g.scale(ce.expect("at least one pass"), 1.0 / m);
    let Some(latent) = &out.latent else {
        let b = LossBreakdown::deterministic(g.value(ce).data()[0]);
        b.check_finite()?;
        return Ok((ce, b));
    };
    let kl = kl_node(g, latent.mu_q, latent.log_sigma_q, latent.mu_p, latent.log_sigma_p)?;
    let mut local = None;
    for &h_hat in &latent.h_hat {
        let r = recon_node(g, out.h, h_hat)?;
        local = Some(match local {
            None => r,
            Some(acc) => g.add(acc, r)?,
        });
    }
    let local = g.scale(local.expect("at least one pass"), 1.0 / m);
    let band = band_node(g, latent.mu_q, cfg, &reg.unit_scales)?;

    let reg_kl = g.scale(kl, reg.beta);
    let local_w = g.scale(local, cfg.lambda_local);
    let band_w = g.scale(band, cfg.lambda_band);
    let total = g.add(ce, reg_kl)?;
    let total = g.add(total, local_w)?;
    let total = g.add(total, band_w)?;

    let v = |id: NodeId| g.value(id).data()[0];
    let b = LossBreakdown::assemble(v(ce), v(kl), v(local), v(band), reg.beta, cfg);
    b.check_finite()?;
    Ok((total, b))
}

/// Bounds and step sizes of the autopilot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegulatorConfig {
    pub use_beta_thermostat: bool,
    pub use_neuron_regulator: bool,
    pub beta_init: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Target KL per latent unit, in nats.
    pub kl_low: f64,
    pub kl_high: f64,
    pub beta_step: f64,
    pub scale_step: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Weight of the newest observation in the running means.
    pub ema: f64,
}

impl Default for RegulatorConfig {
    fn default() -> Self {
        Self {
            use_beta_thermostat: true,
            use_neuron_regulator: true,
            beta_init: 1.0,
            beta_min: 1e-3,
            beta_max: 10.0,
            kl_low: 0.05,
            kl_high: 1.0,
            beta_step: 1.05,
            scale_step: 1.05,
            scale_min: 0.5,
            scale_max: 2.0,
            ema: 0.5,
        }
    }
}

impl RegulatorConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let ok = 0.0 < self.beta_min
            && self.beta_min <= self.beta_init
            && self.beta_init <= self.beta_max
            && 0.0 <= self.kl_low
            && self.kl_low <= self.kl_high
            && self.beta_step >= 1.0
            && self.scale_step >= 1.0
            && 0.0 < self.scale_min
            && self.scale_min <= 1.0
            && 1.0 <= self.scale_max
            && 0.0 < self.ema
            && self.ema <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(ObjectiveError::InvalidBand("inconsistent regulator config".into()))
        }
    }
}

/// Epoch-level latent diagnostics fed to the autopilot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub mu2_mean: f64,
    pub occupancy: f64,
    pub frac_low: f64,
    pub frac_high: f64,
    /// Total KL per example (summed over units).
    pub kl: f64,
    pub unit_energy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningMeans {
    pub mu2: f64,
    pub occupancy: f64,
    pub frac_low: f64,
    pub frac_high: f64,
    pub kl: f64,
    pub unit_energy: Vec<f64>,
}

/// Thermostat and neuron-regulator state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegulatorState {
    pub beta: f64,
    pub unit_scales: Vec<f64>,
    pub running: Option<RunningMeans>,
}

impl RegulatorState {
    pub fn new(latent_dim: usize, cfg: &RegulatorConfig) -> Self {
        Self {
            beta: cfg.beta_init,
            unit_scales: vec![1.0; latent_dim],
            running: None,
        }
    }
}

fn ema(old: f64, new: f64, w: f64) -> f64 {
    if old == new {
        old
    } else {
        (1.0 - w) * old + w * new
    }
}

/// One autopilot update from epoch diagnostics.
///
/// Running means are exponential averages of the diagnostics. The thermostat
/// scales β by `beta_step` when the running KL per unit leaves
/// `[kl_low, kl_high]`. A unit whose running energy is above `band_high` gets
/// a larger above-band penalty scale; a unit below `band_low` gets a smaller
/// one. In-band signals leave β and the scales untouched.
pub fn autopilot_step(
    state: &RegulatorState,
    diag: &EpochDiagnostics,
    band: &BandConfig,
    cfg: &RegulatorConfig,
) -> RegulatorState {
    let running = match &state.running {
        None => RunningMeans {
            mu2: diag.mu2_mean,
            occupancy: diag.occupancy,
            frac_low: diag.frac_low,
            frac_high: diag.frac_high,
            kl: diag.kl,
            unit_energy: diag.unit_energy.clone(),
        },
        Some(r) => RunningMeans {
            mu2: ema(r.mu2, diag.mu2_mean, cfg.ema),
            occupancy: ema(r.occupancy, diag.occupancy, cfg.ema),
            frac_low: ema(r.frac_low, diag.frac_low, cfg.ema),
            frac_high: ema(r.frac_high, diag.frac_high, cfg.ema),
            kl: ema(r.kl, diag.kl, cfg.ema),
            unit_energy: r
                .unit_energy
                .iter()
                .zip(&diag.unit_energy)
                .map(|(&o, &n)| ema(o, n, cfg.ema))
                .collect(),
        },
    };

    let mut beta = state.beta;
    if cfg.use_beta_thermostat {
        let units = state.unit_scales.len().max(1) as f64;
        let kl_per_unit = running.kl / units;
        if kl_per_unit > cfg.kl_high {
            beta *= cfg.beta_step;
        } else if kl_per_unit < cfg.kl_low {
            beta /= cfg.beta_step;
        }
        beta = beta.clamp(cfg.beta_min, cfg.beta_max);
    }

    let mut unit_scales = state.unit_scales.clone();
    if cfg.use_neuron_regulator {
        for (s, &e) in unit_scales.iter_mut().zip(&running.unit_energy) {
            if e > band.band_high {
                *s = (*s * cfg.scale_step).min(cfg.scale_max);
            } else if e < band.band_low {
                *s = (*s / cfg.scale_step).max(cfg.scale_min);
            }
        }
    }

    RegulatorState {
        beta,
        unit_scales,
        running: Some(running),
    }
}
