//! The two matched model families and the Monte-Carlo forward protocol.
//!
//! Both families share the frozen embedding front end, a tanh MLP stack and a
//! prediction head tied to the embedding table (`logits = proj · Eᵀ + bias`).
//! The variational family (EVE) inserts a local latent layer after
//! `latent_after` hidden layers:
//!
//! * posterior `q(z | x, h)`: affine maps of `[h, x]` to `(μ_q, log σ_q)`
//! * prior `p(z | h)`: affine maps of `h` to `(μ_p, log σ_p)`
//! * sample `z = μ_q + σ_q ⊙ ε`, and a local reconstruction `ĥ = z W + b`
//!
//! The deterministic family (DET) replaces the latent layer by
//! `d = tanh(h W + b)` of the same width. The layer after the latent (or the
//! head, when the latent is last) reads `[h, z]` or `[h, d]`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{EmbeddingTable, TokenId};
use crate::numeric::{
    derive_seed, seeded_rng, softmax_rows, Graph, NodeId, NumericError, Params, Tensor,
};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("context has {got} tokens, expected {expected}")]
    ContextLength { got: usize, expected: usize },
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("noise has {got} passes of shape {shape:?}, expected [{rows}, {cols}]")]
    NoiseShape {
        got: usize,
        shape: Vec<usize>,
        rows: usize,
        cols: usize,
    },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub mlp_layers: usize,
    pub latent_dim: usize,
    /// Number of hidden layers before the latent layer.
    pub latent_after: usize,
    pub mc_samples_train: usize,
    pub mc_samples_eval: usize,
    pub variational: bool,
    /// Initial bias of both log σ heads.
    pub init_log_sigma: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            context_len: 24,
            embed_dim: 32,
            hidden_dim: 64,
            mlp_layers: 2,
            latent_dim: 16,
            latent_after: 1,
            mc_samples_train: 4,
            mc_samples_eval: 12,
            variational: true,
            init_log_sigma: -0.7,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        let bad = |m: &str| Err(BackboneError::InvalidConfig(m.to_owned()));
        if self.vocab_size < 2 || self.context_len == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("vocab_size >= 2 and positive context_len, embed_dim, hidden_dim required");
        }
        if self.mlp_layers == 0 || !(1..=self.mlp_layers).contains(&self.latent_after) {
            return bad("need mlp_layers >= 1 and 1 <= latent_after <= mlp_layers");
        }
        if self.mc_samples_train == 0 || self.mc_samples_eval == 0 {
            return bad("mc_samples_train and mc_samples_eval must be >= 1");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1");
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.context_len * self.embed_dim
    }

    /// `(name, rows, cols)` of every trainable tensor.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let (h, u, x) = (self.hidden_dim, self.latent_dim, self.input_dim());
        let mut shapes = Vec::new();
        let mut linear = |name: &str, fan_in: usize, fan_out: usize| {
            shapes.push((format!("{name}.weight"), fan_in, fan_out));
            shapes.push((format!("{name}.bias"), 1, fan_out));
        };
        for l in 0..self.mlp_layers {
            let fan_in = if l == 0 {
                x
            } else if l == self.latent_after {
                h + u
            } else {
                h
            };
            linear(&format!("hidden.{l}"), fan_in, h);
        }
        if self.variational {
            linear("posterior.mu", h + x, u);
            linear("posterior.log_sigma", h + x, u);
            linear("prior.mu", h, u);
            linear("prior.log_sigma", h, u);
            linear("recon", u, h);
        } else {
            linear("det", h, u);
        }
        let head_in = if self.latent_after == self.mlp_layers { h + u } else { h };
        linear("head.proj", head_in, self.embed_dim);
        shapes.push(("head.bias".into(), 1, self.vocab_size));
        shapes
    }
}

const MU_INIT_GAIN: f64 = 0.1;

/// A backbone: configuration, trainable parameters and the shared frozen
/// embedding table.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: BackboneConfig,
    pub params: Params,
    embedding: Arc<EmbeddingTable>,
}

/// Graph node ids of the latent layer.
#[derive(Clone, Debug)]
pub struct LatentNodes {
    pub mu_q: NodeId,
    pub log_sigma_q: NodeId,
    pub mu_p: NodeId,
    pub log_sigma_p: NodeId,
    /// One sampled latent per pass.
    pub z: Vec<NodeId>,
    /// One reconstruction of `h` per pass.
    pub h_hat: Vec<NodeId>,
}

/// Graph node ids produced by [`Model::build_forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// One `[batch, vocab]` logits node per pass.
    pub logits: Vec<NodeId>,
    /// Pre-latent hidden activations.
    pub h: NodeId,
    pub latent: Option<LatentNodes>,
    /// DET's deterministic latent-width activations.
    pub det: Option<NodeId>,
}

/// Per-unit latent parameters and sample for one example and one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentReadout {
    pub mu_q: Vec<f64>,
    pub sigma_q: Vec<f64>,
    pub mu_p: Vec<f64>,
    pub sigma_p: Vec<f64>,
    pub z: Vec<f64>,
    pub h: Vec<f64>,
    pub h_hat: Vec<f64>,
}

/// One forward pass for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictivePass {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub latent: Option<LatentReadout>,
}

/// `M` passes for one example and their predictive mean.
#[derive(Clone, Debug, PartialEq)]
pub struct McPrediction {
    pub passes: Vec<PredictivePass>,
    pub mean: Vec<f64>,
    /// DET's deterministic latent-width activations.
    pub det_activations: Option<Vec<f64>>,
}

/// Source of the reparameterization noise.
#[derive(Clone, Debug)]
pub enum Noise {
    /// One `[batch, latent_dim]` tensor per pass.
    Explicit(Vec<Tensor>),
    /// `passes` draws; row `b` uses its own stream derived from
    /// `(seed, keys[b])`, so results do not depend on batch composition.
    Seeded { seed: u64, passes: usize },
}

/// Draws per-example noise: for each key, `passes × dim` standard normals
/// from the stream `derive_seed(seed, key)`.
pub fn sample_noise(keys: &[u64], passes: usize, dim: usize, seed: u64) -> Vec<Tensor> {
    let mut out = vec![vec![0.0; keys.len() * dim]; passes];
    for (b, &key) in keys.iter().enumerate() {
        let mut rng = seeded_rng(derive_seed(seed, key));
        for pass in out.iter_mut() {
            for v in &mut pass[b * dim..(b + 1) * dim] {
                *v = rng.sample(StandardNormal);
            }
        }
    }
    out.into_iter()
        .map(|d| Tensor::matrix(keys.len(), dim, d).expect("sized above"))
        .collect()
}

fn mean_of(passes: &[PredictivePass]) -> Vec<f64> {
    // identical passes (DET) keep their exact distribution
    if passes.iter().all(|p| p.probabilities == passes[0].probabilities) {
        return passes[0].probabilities.clone();
    }
    let v = passes[0].probabilities.len();
    let mut mean = vec![0.0; v];
    for p in passes {
        for (m, q) in mean.iter_mut().zip(&p.probabilities) {
            *m += q;
        }
    }
    mean.iter_mut().for_each(|m| *m /= passes.len() as f64);
    mean
}

impl McPrediction {
    pub fn from_passes(passes: Vec<PredictivePass>) -> Self {
        let mean = mean_of(&passes);
        Self {
            passes,
            mean,
            det_activations: None,
        }
    }

    /// Pools the passes of two predictions into one predictive mean.
    pub fn merge(mut self, other: McPrediction) -> Self {
        self.passes.extend(other.passes);
        self.mean = mean_of(&self.passes);
        self
    }
}

impl Model {
    /// Fresh parameters: weights `N(0, 1/fan_in)`, zero biases, log σ biases
    /// at `init_log_sigma`.
    pub fn init(
        config: BackboneConfig,
        embedding: Arc<EmbeddingTable>,
        seed: u64,
    ) -> Result<Self, BackboneError> {
        config.validate()?;
        if embedding.vocab_size() != config.vocab_size || embedding.embed_dim() != config.embed_dim {
            return Err(BackboneError::InvalidConfig(format!(
                "embedding table is {}x{}, config wants {}x{}",
                embedding.vocab_size(),
                embedding.embed_dim(),
                config.vocab_size,
                config.embed_dim
            )));
        }
        let mut rng = seeded_rng(seed);
        let mut params = Params::new();
        for (name, rows, cols) in config.param_shapes() {
            let t = if name.ends_with(".mu.weight") {
                // Latent means start near zero so energy grows from inside the band.
                Tensor::randn(&[rows, cols], MU_INIT_GAIN / (rows as f64).sqrt(), &mut rng)
            } else if name.ends_with(".weight") {
                Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), &mut rng)
            } else if name.starts_with("posterior.log_sigma") || name.starts_with("prior.log_sigma") {
                Tensor::full(&[rows, cols], config.init_log_sigma)
            } else {
                Tensor::zeros(&[rows, cols])
            };
            params.insert(name, t);
        }
        Ok(Self {
            config,
            params,
            embedding,
        })
    }

    /// Rebuilds a model from stored parameters, checking every expected
    /// tensor is present with the right shape.
    pub fn from_params(
        config: BackboneConfig,
        embedding: Arc<EmbeddingTable>,
        params: Params,
    ) -> Result<Self, BackboneError> {
        config.validate()?;
        for (name, rows, cols) in config.param_shapes() {
            match params.get(&name) {
                Some(t) if t.shape() == [rows, cols] => {}
                _ => return Err(BackboneError::MissingParameter(name)),
            }
        }
        Ok(Self {
            config,
            params,
            embedding,
        })
    }

    pub fn embedding(&self) -> &Arc<EmbeddingTable> {
        &self.embedding
    }

    pub fn is_variational(&self) -> bool {
        self.config.variational
    }

    fn check_contexts(&self, contexts: &[&[TokenId]]) -> Result<(), BackboneError> {
        for ctx in contexts {
            if ctx.len() != self.config.context_len {
                return Err(BackboneError::ContextLength {
                    got: ctx.len(),
                    expected: self.config.context_len,
                });
            }
            if let Some(&t) = ctx.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(BackboneError::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph, name: &str, input: NodeId) -> Result<NodeId, BackboneError> {
        let w = g.param(&format!("{name}.weight"), &self.params[&format!("{name}.weight")]);
        let b = g.param(&format!("{name}.bias"), &self.params[&format!("{name}.bias")]);
        let y = g.matmul(input, w)?;
        Ok(g.add_row(y, b)?)
    }

    /// Records the forward computation for a batch of contexts.
    ///
    /// DET ignores the noise and records a single pass.
    pub fn build_forward(
        &self,
        g: &mut Graph,
        contexts: &[&[TokenId]],
        keys: &[u64],
        noise: &Noise,
    ) -> Result<ForwardOutput, BackboneError> {
        self.check_contexts(contexts)?;
        let cfg = &self.config;
        let batch = contexts.len();
        let x = g.constant(self.embedding.gather(contexts));
        let table = g.frozen(self.embedding.matrix());

        let mut h = x;
        for l in 0..cfg.latent_after {
            let pre = self.linear(g, &format!("hidden.{l}"), h)?;
            h = g.tanh(pre);
        }
        let pre_latent = h;

        let (mids, latent, det) = if cfg.variational {
            let noise = match noise {
                Noise::Explicit(t) => t.clone(),
                Noise::Seeded { seed, passes } => sample_noise(keys, *passes, cfg.latent_dim, *seed),
            };
            if noise.is_empty()
                || noise
                    .iter()
                    .any(|t| t.rows() != batch || t.cols() != cfg.latent_dim)
            {
                return Err(BackboneError::NoiseShape {
                    got: noise.len(),
                    shape: noise.first().map(|t| t.shape().to_vec()).unwrap_or_default(),
                    rows: batch,
                    cols: cfg.latent_dim,
                });
            }
            let hx = g.concat_cols(pre_latent, x)?;
            let mu_q = self.linear(g, "posterior.mu", hx)?;
            let log_sigma_q = self.linear(g, "posterior.log_sigma", hx)?;
            let mu_p = self.linear(g, "prior.mu", pre_latent)?;
            let log_sigma_p = self.linear(g, "prior.log_sigma", pre_latent)?;
            let sigma_q = g.exp(log_sigma_q);
            let mut zs = Vec::with_capacity(noise.len());
            let mut h_hats = Vec::with_capacity(noise.len());
            let mut mids = Vec::with_capacity(noise.len());
            for eps in noise {
                let eps = g.constant(eps);
                let spread = g.mul(sigma_q, eps)?;
                let z = g.add(mu_q, spread)?;
                h_hats.push(self.linear(g, "recon", z)?);
                mids.push(g.concat_cols(pre_latent, z)?);
                zs.push(z);
            }
            let latent = LatentNodes {
                mu_q,
                log_sigma_q,
                mu_p,
                log_sigma_p,
                z: zs,
                h_hat: h_hats,
            };
            (mids, Some(latent), None)
        } else {
            let pre = self.linear(g, "det", pre_latent)?;
            let d = g.tanh(pre);
            (vec![g.concat_cols(pre_latent, d)?], None, Some(d))
        };

        let head_bias = g.param("head.bias", &self.params["head.bias"]);
        let mut logits = Vec::with_capacity(mids.len());
        for mid in mids {
            let mut h = mid;
            for l in cfg.latent_after..cfg.mlp_layers {
                let pre = self.linear(g, &format!("hidden.{l}"), h)?;
                h = g.tanh(pre);
            }
            let proj = self.linear(g, "head.proj", h)?;
            let scores = g.matmul_t(proj, table)?;
            logits.push(g.add_row(scores, head_bias)?);
        }
        Ok(ForwardOutput {
            logits,
            h: pre_latent,
            latent,
            det,
        })
    }

    /// Runs a batch and unpacks per-example predictions.
    ///
    /// DET's single pass is replicated to the requested pass count so both
    /// families expose the same interface.
    pub fn predict_batch(
        &self,
        contexts: &[&[TokenId]],
        keys: &[u64],
        noise: &Noise,
    ) -> Result<Vec<McPrediction>, BackboneError> {
        let mut g = Graph::new();
        let out = self.build_forward(&mut g, contexts, keys, noise)?;
        let probs: Vec<Tensor> = out.logits.iter().map(|&l| softmax_rows(g.value(l))).collect();
        let requested = match noise {
            Noise::Explicit(t) => t.len(),
            Noise::Seeded { passes, .. } => *passes,
        }
        .max(1);
        let row = |id: NodeId, b: usize| g.value(id).row(b).to_vec();
        let mut preds = Vec::with_capacity(contexts.len());
        for b in 0..contexts.len() {
            let mut passes: Vec<PredictivePass> = out
                .logits
                .iter()
                .zip(&probs)
                .enumerate()
                .map(|(m, (&l, p))| PredictivePass {
                    logits: row(l, b),
                    probabilities: p.row(b).to_vec(),
                    latent: out.latent.as_ref().map(|lat| LatentReadout {
                        mu_q: row(lat.mu_q, b),
                        sigma_q: row(lat.log_sigma_q, b).into_iter().map(f64::exp).collect(),
                        mu_p: row(lat.mu_p, b),
                        sigma_p: row(lat.log_sigma_p, b).into_iter().map(f64::exp).collect(),
                        z: row(lat.z[m], b),
                        h: row(out.h, b),
                        h_hat: row(lat.h_hat[m], b),
                    }),
                })
                .collect();
            if !self.config.variational {
                let single = passes.pop().expect("one deterministic pass");
                passes = vec![single; requested];
            }
            let mut pred = McPrediction::from_passes(passes);
            pred.det_activations = out.det.map(|d| row(d, b));
            preds.push(pred);
        }
        Ok(preds)
    }

    /// A single pass for one context.
    pub fn forward(&self, context: &[TokenId], noise: &Noise) -> Result<PredictivePass, BackboneError> {
        let noise = match noise {
            Noise::Explicit(t) => Noise::Explicit(t.iter().take(1).cloned().collect()),
            Noise::Seeded { seed, .. } => Noise::Seeded {
                seed: *seed,
                passes: 1,
            },
        };
        let mut pred = self.predict_batch(&[context], &[0], &noise)?;
        Ok(pred.remove(0).passes.remove(0))
    }

    /// `passes` independent draws for one context and their mean.
    pub fn mc_predictive(
        &self,
        context: &[TokenId],
        passes: usize,
        seed: u64,
    ) -> Result<McPrediction, BackboneError> {
        if passes == 0 {
            return Err(BackboneError::InvalidConfig("pass count must be >= 1".into()));
        }
        let mut pred = self.predict_batch(&[context], &[0], &Noise::Seeded { seed, passes })?;
        Ok(pred.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variational: bool) -> Model {
        let cfg = BackboneConfig {
            vocab_size: 12,
            context_len: 4,
            embed_dim: 5,
            hidden_dim: 7,
            latent_dim: 3,
            variational,
            ..Default::default()
        };
        let table = Arc::new(EmbeddingTable::seeded(12, 5, 3));
        Model::init(cfg, table, 9).unwrap()
    }

    fn on_simplex(p: &[f64]) -> bool {
        (p.iter().sum::<f64>() - 1.0).abs() < 1e-9 && p.iter().all(|&x| x >= 0.0)
    }

    #[test]
    fn rejects_wrong_context_length() {
        let m = tiny(true);
        let err = m.forward(&[1, 2, 3], &Noise::Seeded { seed: 0, passes: 1 }).unwrap_err();
        assert!(matches!(err, BackboneError::ContextLength { got: 3, expected: 4 }));
    }

    #[test]
    fn zero_sigma_makes_passes_identical() {
        let mut m = tiny(true);
        m.params.insert(
            "posterior.log_sigma.weight".into(),
            Tensor::zeros(m.params["posterior.log_sigma.weight"].shape()),
        );
        m.params.insert(
            "posterior.log_sigma.bias".into(),
            Tensor::full(m.params["posterior.log_sigma.bias"].shape(), -800.0),
        );
        let pred = m.mc_predictive(&[1, 2, 3, 4], 6, 5).unwrap();
        for p in &pred.passes {
            assert_eq!(p.probabilities, pred.passes[0].probabilities);
            assert!(p.latent.as_ref().unwrap().sigma_q.iter().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn same_noise_is_bit_identical() {
        let m = tiny(true);
        let eps = vec![Tensor::matrix(1, 3, vec![0.3, -1.1, 0.7]).unwrap()];
        let a = m.forward(&[0, 5, 5, 11], &Noise::Explicit(eps.clone())).unwrap();
        let b = m.forward(&[0, 5, 5, 11], &Noise::Explicit(eps)).unwrap();
        assert_eq!(a, b);
        assert!(on_simplex(&a.probabilities));
    }

    #[test]
    fn single_pass_mean_equals_pass() {
        let m = tiny(true);
        let pred = m.mc_predictive(&[3, 3, 1, 0], 1, 2).unwrap();
        assert_eq!(pred.mean, pred.passes[0].probabilities);
    }

    #[test]
    fn batch_composition_does_not_change_noise() {
        let m = tiny(true);
        let ctx: [&[TokenId]; 2] = [&[1, 2, 3, 4], &[4, 3, 2, 1]];
        let noise = Noise::Seeded { seed: 77, passes: 3 };
        let both = m.predict_batch(&ctx, &[10, 11], &noise).unwrap();
        let second = m.predict_batch(&ctx[1..], &[11], &noise).unwrap();
        assert_eq!(both[1].mean, second[0].mean);
    }

    #[test]
    fn det_exposes_same_interface() {
        let m = tiny(false);
        let pred = m.mc_predictive(&[1, 2, 3, 4], 5, 0).unwrap();
        assert_eq!(pred.passes.len(), 5);
        assert!(on_simplex(&pred.mean));
        assert!(pred.passes[0].latent.is_none());
        assert_eq!(pred.det_activations.as_ref().unwrap().len(), 3);
    }

    #[test]
    fn from_params_checks_shapes() {
        let m = tiny(true);
        let mut params = m.params.clone();
        params.remove("recon.bias");
        let err = Model::from_params(m.config.clone(), m.embedding().clone(), params).unwrap_err();
        assert!(matches!(err, BackboneError::MissingParameter(n) if n == "recon.bias"));
    }
}
