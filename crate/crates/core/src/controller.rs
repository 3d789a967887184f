//! Uncertainty-aware controller: the unified score, threshold calibration,
//! routing, action execution and the terminal decision.

use std::cmp::Ordering;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agentic::CostConfig;
use crate::backbone::{BackboneError, McPrediction, Model, Noise};
use crate::data::{EmbeddingTable, Example, TokenId};
use crate::metrics::{argmax, UncertaintyReadout};
use crate::numeric::derive_seed;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("invalid score config: {0}")]
    InvalidScoreConfig(String),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("non-finite readout field {0}")]
    NonFiniteReadout(&'static str),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("sidecar format: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub uq_norm_entropy: f64,
    pub uq_norm_mi: f64,
    pub uq_norm_flip: f64,
    pub w_e: f64,
    pub w_m: f64,
    pub w_f: f64,
    pub agent_answer_min_conf: f64,
    pub penalty: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            uq_norm_entropy: 3.5,
            uq_norm_mi: 0.50,
            uq_norm_flip: 0.35,
            w_e: 0.40,
            w_m: 0.40,
            w_f: 0.20,
            agent_answer_min_conf: 0.20,
            penalty: 0.10,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let caps = [self.uq_norm_entropy, self.uq_norm_mi, self.uq_norm_flip];
        if caps.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(ControllerError::InvalidScoreConfig("caps must be positive".into()));
        }
        let w = [self.w_e, self.w_m, self.w_f];
        if w.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(ControllerError::InvalidScoreConfig("weights must be non-negative".into()));
        }
        if !(w.iter().sum::<f64>() > 0.0) {
            return Err(ControllerError::InvalidScoreConfig("weights sum to zero".into()));
        }
        if !self.agent_answer_min_conf.is_finite() || !(self.penalty >= 0.0) {
            return Err(ControllerError::InvalidScoreConfig("bad confidence floor or penalty".into()));
        }
        Ok(())
    }
}

/// Capped weighted mean of entropy, MI and flip rate, raised by the
/// penalty when confidence is below the floor; always in `[0, 1]`.
pub fn uncertainty_score(r: &UncertaintyReadout, cfg: &ScoreConfig) -> Result<f64, ControllerError> {
    cfg.validate()?;
    for (name, v) in [
        ("predictive_entropy", r.predictive_entropy),
        ("mutual_information", r.mutual_information),
        ("top1_flip_rate_mc", r.top1_flip_rate_mc),
        ("confidence", r.confidence),
    ] {
        if !v.is_finite() {
            return Err(ControllerError::NonFiniteReadout(name));
        }
    }
    let e = (r.predictive_entropy / cfg.uq_norm_entropy).clamp(0.0, 1.0);
    let m = (r.mutual_information / cfg.uq_norm_mi).clamp(0.0, 1.0);
    let f = (r.top1_flip_rate_mc / cfg.uq_norm_flip).clamp(0.0, 1.0);
    let mut u = (cfg.w_e * e + cfg.w_m * m + cfg.w_f * f) / (cfg.w_e + cfg.w_m + cfg.w_f);
    if r.confidence < cfg.agent_answer_min_conf {
        u = (u + cfg.penalty).min(1.0);
    }
    Ok(u)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub uq_green: f64,
    pub uq_orange: f64,
    pub uq_red: f64,
}

impl Thresholds {
    pub fn new(uq_green: f64, uq_orange: f64, uq_red: f64) -> Result<Self, ControllerError> {
        let t = Self {
            uq_green,
            uq_orange,
            uq_red,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        let v = [self.uq_green, self.uq_orange, self.uq_red];
        if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(ControllerError::InvalidThresholds(format!("{v:?} outside [0, 1]")));
        }
        if !(v[0] <= v[1] && v[1] <= v[2]) {
            return Err(ControllerError::InvalidThresholds(format!("{v:?} not ordered")));
        }
        Ok(())
    }
}

/// Element at index `⌈q·N⌉ − 1` of the ascending sample.
pub fn lower_quantile(sorted: &[f64], q: f64) -> f64 {
    let k = (q * sorted.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    sorted[k.min(sorted.len()) - 1]
}

pub const DEFAULT_QUANTILES: (f64, f64, f64) = (0.50, 0.75, 0.90);

fn sorted_scores(scores: &[f64]) -> Result<Vec<f64>, ControllerError> {
    if scores.is_empty() {
        return Err(ControllerError::Empty("calibration set"));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

fn thresholds_at(sorted: &[f64], q: (f64, f64, f64)) -> Result<Thresholds, ControllerError> {
    Thresholds::new(
        lower_quantile(sorted, q.0),
        lower_quantile(sorted, q.1),
        lower_quantile(sorted, q.2),
    )
}

/// Empirical quantiles of held-out scores at the three levels.
pub fn calibrate_basic(scores: &[f64], quantiles: (f64, f64, f64)) -> Result<Thresholds, ControllerError> {
    let (g, o, r) = quantiles;
    if !(0.0 < g && g <= o && o <= r && r <= 1.0) {
        return Err(ControllerError::InvalidThresholds(format!("quantile levels {quantiles:?}")));
    }
    thresholds_at(&sorted_scores(scores)?, quantiles)
}

/// Policy statistics from simulating one threshold triplet.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyStats {
    pub utility: f64,
    pub coverage: f64,
    pub abstain_rate: f64,
    pub retrieve_rate: f64,
    pub mean_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub quantiles: (f64, f64, f64),
    pub kappa_cov: f64,
    pub kappa_abs: f64,
    pub kappa_ret: f64,
    pub abstain_cap: f64,
    pub retrieve_cap: f64,
    pub green_grid: Vec<f64>,
    pub orange_grid: Vec<f64>,
    pub red_grid: Vec<f64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            quantiles: DEFAULT_QUANTILES,
            kappa_cov: 0.1,
            kappa_abs: 1.0,
            kappa_ret: 1.0,
            abstain_cap: 0.2,
            retrieve_cap: 0.5,
            green_grid: vec![0.40, 0.50, 0.60],
            orange_grid: vec![0.70, 0.75, 0.80],
            red_grid: vec![0.85, 0.90, 0.95],
        }
    }
}

impl CalibrationConfig {
    /// Every `(g, o, r)` from the three axes with `g < o < r`.
    pub fn grid(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for &g in &self.green_grid {
            for &o in &self.orange_grid {
                for &r in &self.red_grid {
                    if g < o && o < r {
                        out.push((g, o, r));
                    }
                }
            }
        }
        out
    }

    pub fn objective(&self, s: &PolicyStats) -> f64 {
        s.utility + self.kappa_cov * s.coverage
            - self.kappa_abs * (s.abstain_rate - self.abstain_cap).max(0.0)
            - self.kappa_ret * (s.retrieve_rate - self.retrieve_cap).max(0.0)
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        let (g, o, r) = self.quantiles;
        if !(0.0 < g && g <= o && o <= r && r <= 1.0) {
            return Err(ControllerError::InvalidThresholds(format!("quantile levels {:?}", self.quantiles)));
        }
        for (_, _, r) in self.grid() {
            if r > 1.0 {
                return Err(ControllerError::InvalidThresholds("grid level above 1".into()));
            }
        }
        if self.grid().is_empty() {
            return Err(ControllerError::Empty("calibration grid"));
        }
        Ok(())
    }
}

/// One scored grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub quantiles: (f64, f64, f64),
    pub thresholds: Thresholds,
    pub stats: PolicyStats,
    pub objective: f64,
}

/// Picks the quantile triplet whose simulated policy maximizes the proxy
/// objective; ties go to higher coverage, then lower mean cost, then grid
/// order.
pub fn calibrate_full(
    scores: &[f64],
    grid: &[(f64, f64, f64)],
    cfg: &CalibrationConfig,
    mut simulate: impl FnMut(&Thresholds) -> PolicyStats,
) -> Result<(Thresholds, Vec<GridPoint>), ControllerError> {
    if grid.is_empty() {
        return Err(ControllerError::Empty("calibration grid"));
    }
    let sorted = sorted_scores(scores)?;
    let mut points = Vec::with_capacity(grid.len());
    for &q in grid {
        if !(0.0 < q.0 && q.0 < q.1 && q.1 < q.2 && q.2 <= 1.0) {
            return Err(ControllerError::InvalidThresholds(format!("grid triplet {q:?}")));
        }
        let thresholds = thresholds_at(&sorted, q)?;
        let stats = simulate(&thresholds);
        points.push(GridPoint {
            quantiles: q,
            thresholds,
            stats,
            objective: cfg.objective(&stats),
        });
    }
    let better = |a: &GridPoint, b: &GridPoint| -> Ordering {
        a.objective
            .total_cmp(&b.objective)
            .then_with(|| a.stats.coverage.total_cmp(&b.stats.coverage))
            .then_with(|| b.stats.mean_cost.total_cmp(&a.stats.mean_cost))
    };
    let mut best = 0;
    for i in 1..points.len() {
        if better(&points[i], &points[best]) == Ordering::Greater {
            best = i;
        }
    }
    Ok((points[best].thresholds, points))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Answer,
    DeliberateMore,
    RetrieveOrResample,
    AbstainOrEscalate,
}

pub const ACTIONS: [Action; 4] = [
    Action::Answer,
    Action::DeliberateMore,
    Action::RetrieveOrResample,
    Action::AbstainOrEscalate,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Direct,
    Deliberate,
    Retrieve,
    Abstain,
}

impl Action {
    pub fn category(self) -> Category {
        match self {
            Action::Answer => Category::Direct,
            Action::DeliberateMore => Category::Deliberate,
            Action::RetrieveOrResample => Category::Retrieve,
            Action::AbstainOrEscalate => Category::Abstain,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Answer => "answer",
            Action::DeliberateMore => "deliberate_more",
            Action::RetrieveOrResample => "retrieve_or_resample",
            Action::AbstainOrEscalate => "abstain_or_escalate",
        }
    }
}

/// Half-open routing bands `[0, g)`, `[g, o)`, `[o, r)`, `[r, 1]`.
pub fn route(u: f64, t: &Thresholds) -> Action {
    if u < t.uq_green {
        Action::Answer
    } else if u < t.uq_orange {
        Action::DeliberateMore
    } else if u < t.uq_red {
        Action::RetrieveOrResample
    } else {
        Action::AbstainOrEscalate
    }
}

/// Non-terminal work performed while executing an action.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Support {
    pub deliberate: bool,
    pub retrieve: bool,
    pub resample: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionPlan {
    pub action: Action,
    pub category: Category,
    pub steps: usize,
    pub step_costs: Vec<f64>,
    pub mc_passes: usize,
    pub support: Support,
    /// Retrieval was requested but the index was empty.
    pub degraded: bool,
    pub terminal: Option<Vec<f64>>,
}

impl ActionPlan {
    pub fn cost(&self) -> f64 {
        self.step_costs.iter().sum()
    }
}

/// Top-1 of the terminal distribution; `None` on abstention.
pub fn final_decision(plan: &ActionPlan) -> Option<TokenId> {
    plan.terminal.as_ref().map(|p| argmax(p) as TokenId)
}

/// Nearest-neighbour store over mean-pooled frozen embeddings.
#[derive(Clone, Debug, Default)]
pub struct RetrievalIndex {
    keys: Vec<Vec<f64>>,
    snippets: Vec<Vec<TokenId>>,
}

fn pooled_unit(table: &EmbeddingTable, tokens: &[TokenId]) -> Vec<f64> {
    let mut v = vec![0.0; table.embed_dim()];
    for &t in tokens {
        for (a, b) in v.iter_mut().zip(table.lookup(t)) {
            *a += b;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

impl RetrievalIndex {
    /// Stores each example's context followed by its target.
    pub fn build(table: &EmbeddingTable, examples: &[Example]) -> Self {
        let mut idx = Self::default();
        for ex in examples {
            idx.keys.push(pooled_unit(table, &ex.context));
            let mut s = ex.context.clone();
            s.push(ex.target);
            idx.snippets.push(s);
        }
        idx
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Highest cosine similarity; ties go to the earliest entry.
    pub fn nearest(&self, table: &EmbeddingTable, context: &[TokenId]) -> Option<&[TokenId]> {
        let q = pooled_unit(table, context);
        let mut best: Option<(usize, f64)> = None;
        for (i, k) in self.keys.iter().enumerate() {
            let s: f64 = k.iter().zip(&q).map(|(a, b)| a * b).sum();
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| self.snippets[i].as_slice())
    }
}

/// Replaces the oldest half of the query with the tail of the retrieved
/// snippet, keeping the context length fixed.
pub fn augment_context(query: &[TokenId], snippet: &[TokenId]) -> Vec<TokenId> {
    let k = (query.len() / 2).min(snippet.len());
    let mut out = snippet[snippet.len() - k..].to_vec();
    out.extend_from_slice(&query[k..]);
    out
}

/// Runs actions for one model under a fixed noise protocol.
pub struct Executor<'a> {
    pub model: &'a Model,
    pub index: &'a RetrievalIndex,
    pub costs: &'a CostConfig,
    pub mc_samples: usize,
    pub seed: u64,
}

// Noise streams: the base pass and each follow-up pass draw from
// independent seeds so deliberation never repeats the base draws.
const STREAM_DELIBERATE: u64 = 1;
const STREAM_RETRIEVE: u64 = 2;
const STREAM_RESAMPLE: u64 = 3;

impl Executor<'_> {
    fn run(&self, contexts: &[&[TokenId]], keys: &[u64], seed: u64) -> Result<Vec<McPrediction>, ControllerError> {
        Ok(self.model.predict_batch(
            contexts,
            keys,
            &Noise::Seeded {
                seed,
                passes: self.mc_samples,
            },
        )?)
    }

    /// Base predictive state for a batch of episodes keyed by id.
    pub fn base_batch(&self, contexts: &[&[TokenId]], keys: &[u64]) -> Result<Vec<McPrediction>, ControllerError> {
        self.run(contexts, keys, self.seed)
    }

    fn stream(&self, s: u64) -> u64 {
        derive_seed(self.seed, s)
    }

    /// Carries out `action` for one episode, starting from its base state.
    pub fn execute(
        &self,
        action: Action,
        context: &[TokenId],
        key: u64,
        base: &McPrediction,
    ) -> Result<ActionPlan, ControllerError> {
        let m = self.mc_samples;
        let c = self.costs;
        let mut plan = ActionPlan {
            action,
            category: action.category(),
            steps: 1,
            step_costs: vec![c.cost_answer],
            mc_passes: m,
            support: Support::default(),
            degraded: false,
            terminal: None,
        };
        match action {
            Action::Answer => plan.terminal = Some(base.mean.clone()),
            Action::AbstainOrEscalate => plan.step_costs = vec![c.cost_abstain],
            Action::DeliberateMore => {
                let extra = self.run(&[context], &[key], self.stream(STREAM_DELIBERATE))?.remove(0);
                let merged = base.clone().merge(extra);
                plan.steps = 2;
                plan.step_costs.push(c.cost_resample - c.cost_answer);
                plan.mc_passes = 2 * m;
                plan.support.deliberate = true;
                plan.support.resample = true;
                plan.terminal = Some(merged.mean);
            }
            Action::RetrieveOrResample => {
                let table = self.model.embedding();
                match self.index.nearest(table, context) {
                    Some(snippet) => {
                        let aug = augment_context(context, snippet);
                        let first = self.run(&[&aug], &[key], self.stream(STREAM_RETRIEVE))?.remove(0);
                        let second = self.run(&[&aug], &[key], self.stream(STREAM_RESAMPLE))?.remove(0);
                        plan.steps = 3;
                        plan.step_costs.push(c.cost_resample - c.cost_answer);
                        plan.step_costs.push(c.cost_retrieve_resample - c.cost_resample);
                        plan.mc_passes = 3 * m;
                        plan.support.retrieve = true;
                        plan.terminal = Some(first.merge(second).mean);
                    }
                    None => {
                        let extra = self.run(&[context], &[key], self.stream(STREAM_RESAMPLE))?.remove(0);
                        plan.steps = 2;
                        plan.step_costs.push(c.cost_resample - c.cost_answer);
                        plan.mc_passes = 2 * m;
                        plan.degraded = true;
                        plan.terminal = Some(base.clone().merge(extra).mean);
                    }
                }
                plan.support.resample = true;
            }
        }
        Ok(plan)
    }
}

/// Score settings and thresholds stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSidecar {
    pub thresholds: Thresholds,
    pub score: ScoreConfig,
}

impl ControllerSidecar {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("sidecar serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self, ControllerError> {
        let c: Self = toml::from_str(s).map_err(|e| ControllerError::Sidecar(e.to_string()))?;
        c.thresholds.validate()?;
        c.score.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), ControllerError> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ControllerError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
