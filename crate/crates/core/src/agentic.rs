//! Cost-aware multi-action evaluation: episode traces, the summary table,
//! avoided-errors analysis and the verification checks.

use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    final_decision, route, uncertainty_score, Action, ActionPlan, Category, ControllerError, Executor, PolicyStats,
    ScoreConfig, Support, Thresholds, ACTIONS,
};
use crate::data::{Example, TokenId};
use crate::metrics::{argmax, predictive_readout, MetricsError};

#[derive(Debug, Error)]
pub enum AgenticError {
    #[error("invalid cost config: {0}")]
    InvalidCosts(String),
    #[error("example sets differ: {0}")]
    MismatchedExamples(String),
    #[error("no episodes")]
    Empty,
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub cost_answer: f64,
    pub cost_resample: f64,
    pub cost_retrieve_resample: f64,
    pub cost_abstain: f64,
    pub cost_weight: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            cost_answer: 1.0,
            cost_resample: 2.0,
            cost_retrieve_resample: 3.0,
            cost_abstain: 0.5,
            cost_weight: 0.02,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<(), AgenticError> {
        let all = [
            self.cost_answer,
            self.cost_resample,
            self.cost_retrieve_resample,
            self.cost_abstain,
            self.cost_weight,
        ];
        if all.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(AgenticError::InvalidCosts("costs must be finite and non-negative".into()));
        }
        if !(self.cost_answer <= self.cost_resample && self.cost_resample <= self.cost_retrieve_resample) {
            return Err(AgenticError::InvalidCosts(
                "expected cost_answer <= cost_resample <= cost_retrieve_resample".into(),
            ));
        }
        Ok(())
    }
}

mod nonfinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// One routed example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub id: usize,
    pub score: f64,
    pub action: Action,
    pub category: Category,
    pub steps: usize,
    pub cost: f64,
    pub mc_passes: usize,
    pub support: Support,
    pub degraded: bool,
    pub target: TokenId,
    pub predicted: Option<TokenId>,
    pub correct: bool,
    /// `-log p(target)` of the terminal distribution; infinite on
    /// abstention, written as `null`.
    #[serde(with = "nonfinite_as_null")]
    pub ce: f64,
    /// Outcome of answering directly from the base state.
    pub direct_correct: bool,
}

impl EpisodeTrace {
    pub fn from_plan(id: usize, score: f64, plan: &ActionPlan, target: TokenId, direct_correct: bool) -> Self {
        let predicted = final_decision(plan);
        let ce = plan
            .terminal
            .as_ref()
            .map_or(f64::INFINITY, |p| -p[target as usize].max(f64::MIN_POSITIVE).ln());
        Self {
            id,
            score,
            action: plan.action,
            category: plan.category,
            steps: plan.steps,
            cost: plan.cost(),
            mc_passes: plan.mc_passes,
            support: plan.support,
            degraded: plan.degraded,
            target,
            predicted,
            correct: predicted == Some(target),
            ce,
            direct_correct,
        }
    }

    pub fn abstained(&self) -> bool {
        self.predicted.is_none()
    }
}

/// Table-shaped summary of a routed run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgenticSummary {
    pub n_examples: usize,
    pub accepted: usize,
    pub abstained: usize,
    pub coverage: f64,
    pub accepted_acc: f64,
    pub overall_acc: f64,
    pub accepted_ce: f64,
    pub overall_ce: f64,
    pub mean_cost: f64,
    pub mean_mc_cost: f64,
    pub mean_steps: f64,
    pub abstain_rate: f64,
    pub direct_rate: f64,
    pub retrieve_rate: f64,
    pub deliberate_rate: f64,
    pub resample_rate: f64,
    pub utility: f64,
    pub avoided_errors_vs_direct: f64,
}

fn mean_finite(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.filter(|v| v.is_finite()) {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Aggregates traces; abstentions count as incorrect in overall accuracy
/// and are excluded from both CE means.
pub fn summarize(traces: &[EpisodeTrace], costs: &CostConfig) -> Result<AgenticSummary, AgenticError> {
    if traces.is_empty() {
        return Err(AgenticError::Empty);
    }
    // sort by id so the float reductions do not depend on input order
    let mut sorted: Vec<&EpisodeTrace> = traces.iter().collect();
    sorted.sort_by_key(|t| t.id);
    let n = sorted.len();
    let nf = n as f64;
    let accepted: Vec<&&EpisodeTrace> = sorted.iter().filter(|t| !t.abstained()).collect();
    let abstained = n - accepted.len();
    let correct = sorted.iter().filter(|t| t.correct).count() as f64;
    let rate = |f: &dyn Fn(&EpisodeTrace) -> bool| sorted.iter().filter(|t| f(t)).count() as f64 / nf;
    let mean = |f: &dyn Fn(&EpisodeTrace) -> f64| sorted.iter().map(|t| f(t)).sum::<f64>() / nf;
    let overall_acc = correct / nf;
    let mean_cost = mean(&|t| t.cost);
    Ok(AgenticSummary {
        n_examples: n,
        accepted: accepted.len(),
        abstained,
        coverage: accepted.len() as f64 / nf,
        accepted_acc: if accepted.is_empty() {
            0.0
        } else {
            correct / accepted.len() as f64
        },
        overall_acc,
        accepted_ce: mean_finite(accepted.iter().map(|t| t.ce)),
        overall_ce: mean_finite(sorted.iter().map(|t| t.ce)),
        mean_cost,
        mean_mc_cost: mean(&|t| t.mc_passes as f64),
        mean_steps: mean(&|t| t.steps as f64),
        abstain_rate: abstained as f64 / nf,
        direct_rate: rate(&|t| t.category == Category::Direct),
        retrieve_rate: rate(&|t| t.support.retrieve),
        deliberate_rate: rate(&|t| t.support.deliberate),
        resample_rate: rate(&|t| t.support.resample),
        utility: overall_acc - costs.cost_weight * mean_cost,
        avoided_errors_vs_direct: rate(&|t| !t.direct_correct && t.correct),
    })
}

/// Fraction of examples the direct policy gets wrong and the routed policy
/// gets right; `direct` pairs example ids with direct-policy correctness.
pub fn avoided_errors(traces: &[EpisodeTrace], direct: &[(usize, bool)]) -> Result<f64, AgenticError> {
    if traces.len() != direct.len() {
        return Err(AgenticError::MismatchedExamples(format!(
            "{} routed vs {} direct",
            traces.len(),
            direct.len()
        )));
    }
    if traces.is_empty() {
        return Err(AgenticError::Empty);
    }
    let mut routed: Vec<(usize, bool)> = traces.iter().map(|t| (t.id, t.correct)).collect();
    let mut direct = direct.to_vec();
    routed.sort_unstable();
    direct.sort_unstable();
    let mut fixed = 0usize;
    for (&(rid, rc), &(did, dc)) in routed.iter().zip(&direct) {
        if rid != did {
            return Err(AgenticError::MismatchedExamples(format!("id {rid} vs {did}")));
        }
        fixed += (!dc && rc) as usize;
    }
    Ok(fixed as f64 / traces.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub min_coverage: f64,
    pub max_abstain: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            min_coverage: 0.5,
            max_abstain: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = ">")]
    Above,
    #[serde(rename = "<=")]
    AtMost,
}

impl Comparator {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::AtLeast => value >= threshold,
            Comparator::Above => value > threshold,
            Comparator::AtMost => value <= threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: String,
    pub passed: bool,
    pub value: f64,
    pub comparator: Comparator,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<Check>,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn verify(s: &AgenticSummary, cfg: &VerifyConfig) -> VerificationReport {
    let rules = [
        ("Coverage is sufficient", s.coverage, Comparator::AtLeast, cfg.min_coverage),
        ("Retrieve is used", s.retrieve_rate, Comparator::Above, 0.0),
        ("Deliberate is used", s.deliberate_rate, Comparator::Above, 0.0),
        ("Not abstain-dominated", s.abstain_rate, Comparator::AtMost, cfg.max_abstain),
        ("Utility is positive", s.utility, Comparator::Above, 0.0),
        ("Avoids some direct errors", s.avoided_errors_vs_direct, Comparator::Above, 0.0),
    ];
    VerificationReport {
        checks: rules
            .into_iter()
            .map(|(name, value, comparator, threshold)| Check {
                criterion: name.to_string(),
                passed: comparator.holds(value, threshold),
                value,
                comparator,
                threshold,
            })
            .collect(),
    }
}

/// A report value: integers stay integers, non-finite reals become null.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReportValue {
    Int(u64),
    Real(#[serde(with = "nonfinite_as_null")] f64),
}

/// Key-value rows in the summary table's order and naming.
pub fn summary_rows(s: &AgenticSummary, selected_seed: u64) -> Vec<(&'static str, ReportValue)> {
    use ReportValue::{Int, Real};
    vec![
        ("Selected seed", Int(selected_seed)),
        ("Number of examples", Int(s.n_examples as u64)),
        ("Accepted examples", Int(s.accepted as u64)),
        ("Abstained examples", Int(s.abstained as u64)),
        ("Coverage", Real(s.coverage)),
        ("Accepted accuracy", Real(s.accepted_acc)),
        ("Overall accuracy", Real(s.overall_acc)),
        ("Accepted CE", Real(s.accepted_ce)),
        ("Overall CE", Real(s.overall_ce)),
        ("Mean cost", Real(s.mean_cost)),
        ("Mean MC cost", Real(s.mean_mc_cost)),
        ("Mean steps", Real(s.mean_steps)),
        ("Abstain rate", Real(s.abstain_rate)),
        ("Direct rate", Real(s.direct_rate)),
        ("Retrieve rate", Real(s.retrieve_rate)),
        ("Deliberate rate", Real(s.deliberate_rate)),
        ("Resample rate", Real(s.resample_rate)),
        ("Utility", Real(s.utility)),
        ("Avoided errors vs direct", Real(s.avoided_errors_vs_direct)),
    ]
}

pub fn write_traces_jsonl(path: &Path, traces: &[EpisodeTrace]) -> Result<(), AgenticError> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces_jsonl(path: &Path) -> Result<Vec<EpisodeTrace>, AgenticError> {
    let r = io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Every action's outcome for one example, so threshold choices can be
/// simulated without rerunning the model.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOptions {
    pub id: usize,
    pub score: f64,
    pub direct_correct: bool,
    /// Indexed like [`ACTIONS`].
    pub outcomes: Vec<EpisodeTrace>,
}

impl EpisodeOptions {
    pub fn routed(&self, t: &Thresholds) -> EpisodeTrace {
        let action = route(self.score, t);
        let i = ACTIONS.iter().position(|&a| a == action).expect("listed");
        self.outcomes[i].clone()
    }
}

/// Scores each example from its base state and executes all four actions.
/// Ids are `id_offset + position`.
pub fn run_episode_options(
    exec: &Executor<'_>,
    examples: &[Example],
    score: &ScoreConfig,
    id_offset: usize,
    batch_size: usize,
) -> Result<Vec<EpisodeOptions>, AgenticError> {
    let mut out = Vec::with_capacity(examples.len());
    for (chunk_idx, chunk) in examples.chunks(batch_size.max(1)).enumerate() {
        let start = id_offset + chunk_idx * batch_size.max(1);
        let contexts: Vec<&[TokenId]> = chunk.iter().map(|e| e.context.as_slice()).collect();
        let keys: Vec<u64> = (start..start + chunk.len()).map(|i| i as u64).collect();
        let bases = exec.base_batch(&contexts, &keys)?;
        for (j, (ex, base)) in chunk.iter().zip(&bases).enumerate() {
            let id = start + j;
            let probs: Vec<&[f64]> = base.passes.iter().map(|p| p.probabilities.as_slice()).collect();
            let u = uncertainty_score(&predictive_readout(&probs)?, score)?;
            let direct_correct = argmax(&base.mean) == ex.target as usize;
            let outcomes = ACTIONS
                .iter()
                .map(|&a| {
                    let plan = exec.execute(a, &ex.context, id as u64, base)?;
                    Ok(EpisodeTrace::from_plan(id, u, &plan, ex.target, direct_correct))
                })
                .collect::<Result<Vec<_>, AgenticError>>()?;
            out.push(EpisodeOptions {
                id,
                score: u,
                direct_correct,
                outcomes,
            });
        }
    }
    Ok(out)
}

pub fn route_all(options: &[EpisodeOptions], t: &Thresholds) -> Vec<EpisodeTrace> {
    options.iter().map(|o| o.routed(t)).collect()
}

/// Policy statistics used by full threshold calibration.
pub fn policy_stats(options: &[EpisodeOptions], t: &Thresholds, costs: &CostConfig) -> Result<PolicyStats, AgenticError> {
    let s = summarize(&route_all(options, t), costs)?;
    Ok(PolicyStats {
        utility: s.utility,
        coverage: s.coverage,
        abstain_rate: s.abstain_rate,
        retrieve_rate: s.retrieve_rate,
        mean_cost: s.mean_cost,
    })
}
