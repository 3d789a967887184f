//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance runner. Everything here recomputes quantities from their
//! definitions instead of calling the library's own helpers.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use eve_core::agentic::{summarize, verify, AgenticSummary, CostConfig, EpisodeTrace, VerifyConfig};
use eve_core::backbone::{BackboneConfig, Model, Noise};
use eve_core::config::RunConfig;
use eve_core::controller::{
    calibrate_basic, uncertainty_score, Action, ScoreConfig, Support, DEFAULT_QUANTILES,
};
use eve_core::data::{EmbeddingTable, Example};
use eve_core::metrics::{canonical_eval, entropy_decomposition, predictive_readout, EvalConfig, UncertaintyReadout};
use eve_core::numeric::{Graph, NodeId, Params, Tensor};
use eve_core::objective::{band_node, kl_node, recon_node, total_loss, BandConfig, RegulatorConfig, RegulatorState};
use eve_core::retention::{rank_order, task_safe_filter, EpochRecord, RetentionConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn run_prop<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Outcome
where
    S::Value: std::fmt::Debug,
{
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

// ---- agentic arithmetic ----

fn trace(id: usize, action: Action, correct: bool, cost: f64) -> EpisodeTrace {
    let abstain = action == Action::AbstainOrEscalate;
    EpisodeTrace {
        id,
        score: 0.5,
        action,
        category: action.category(),
        steps: 1,
        cost,
        mc_passes: 12,
        support: Support::default(),
        degraded: false,
        target: 0,
        predicted: if abstain { None } else { Some(if correct { 0 } else { 1 }) },
        correct,
        ce: if abstain { f64::INFINITY } else { 1.0 },
        direct_correct: correct,
    }
}

/// 200 episodes: 180 answered of which 32 correct, 20 abstained, every
/// episode costing 2.76.
pub fn reference_traces() -> Vec<EpisodeTrace> {
    (0..200)
        .map(|i| {
            if i < 20 {
                trace(i, Action::AbstainOrEscalate, false, 2.76)
            } else {
                trace(i, Action::Answer, i < 52, 2.76)
            }
        })
        .collect()
}

pub fn utility_reproduction() -> Outcome {
    let s = summarize(&reference_traces(), &CostConfig::default()).map_err(|e| e.to_string())?;
    let got = [s.coverage, s.accepted_acc, s.overall_acc, s.mean_cost, s.utility].map(|v| format!("{v:.4}"));
    let want = ["0.9000", "0.1778", "0.1600", "2.7600", "0.1048"];
    ensure(got == want, || format!("got {got:?}, want {want:?}"))?;
    // utility by hand: accuracy minus weighted cost
    let oracle = 32.0 / 200.0 - 0.02 * 2.76;
    ensure((s.utility - oracle).abs() < 1e-12, || format!("utility {} vs {oracle}", s.utility))
}

pub fn reference_summary() -> AgenticSummary {
    AgenticSummary {
        n_examples: 200,
        accepted: 180,
        abstained: 20,
        coverage: 0.9,
        accepted_acc: 32.0 / 180.0,
        overall_acc: 0.16,
        mean_cost: 2.76,
        abstain_rate: 0.1,
        retrieve_rate: 0.32,
        deliberate_rate: 0.265,
        utility: 0.1048,
        avoided_errors_vs_direct: 0.0994,
        ..Default::default()
    }
}

pub fn verification_reproduction() -> Outcome {
    let report = verify(&reference_summary(), &VerifyConfig::default());
    ensure(report.checks.len() == 6, || format!("{} checks", report.checks.len()))?;
    let want = [0.9, 0.32, 0.265, 0.1, 0.1048, 0.0994];
    for (c, w) in report.checks.iter().zip(want) {
        ensure(c.passed, || format!("{} failed at {}", c.criterion, c.value))?;
        ensure(format!("{:.4}", c.value) == format!("{w:.4}"), || {
            format!("{} reports {} not {w}", c.criterion, c.value)
        })?;
    }
    Ok(())
}

// ---- unified score ----

pub fn readout(h: f64, mi: f64, flip: f64, confidence: f64) -> UncertaintyReadout {
    UncertaintyReadout {
        predictive_entropy: h,
        conditional_entropy: h - mi,
        mutual_information: mi,
        epi: 0.0,
        top1_flip_rate_mc: flip,
        confidence,
    }
}

/// The capped weighted mean with the low-confidence penalty, written out.
pub fn score_oracle(r: &UncertaintyReadout, c: &ScoreConfig) -> f64 {
    let cap = |x: f64, k: f64| (x / k).clamp(0.0, 1.0);
    let base = (c.w_e * cap(r.predictive_entropy, c.uq_norm_entropy)
        + c.w_m * cap(r.mutual_information, c.uq_norm_mi)
        + c.w_f * cap(r.top1_flip_rate_mc, c.uq_norm_flip))
        / (c.w_e + c.w_m + c.w_f);
    let pen = if r.confidence < c.agent_answer_min_conf { c.penalty } else { 0.0 };
    (base + pen).clamp(0.0, 1.0)
}

pub fn score_examples() -> Outcome {
    let c = ScoreConfig::default();
    let cases = [
        (readout(0.0, 0.0, 0.0, 0.9), 0.0),
        (readout(4.0, 0.7, 0.5, 0.05), 1.0),
        (readout(1.75, 0.25, 0.175, 0.9), 0.5),
        (readout(1.75, 0.25, 0.175, 0.1), 0.6),
    ];
    for (r, want) in cases {
        let got = uncertainty_score(&r, &c).map_err(|e| e.to_string())?;
        ensure((got - want).abs() <= 1e-12, || format!("{r:?}: {got} != {want}"))?;
        ensure((got - score_oracle(&r, &c)).abs() <= 1e-12, || format!("{r:?}: oracle disagrees"))?;
    }
    Ok(())
}

// ---- quantile calibration ----

/// Lower empirical quantile: the smallest score with at least `q·N` scores
/// at or below it.
pub fn quantile_oracle(scores: &[f64], q: f64) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    for &v in &s {
        let at_or_below = s.iter().filter(|&&x| x <= v).count();
        if at_or_below as f64 >= q * s.len() as f64 - 1e-9 {
            return v;
        }
    }
    *s.last().unwrap()
}

pub fn quantile_grid() -> Outcome {
    let scores: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
    let t = calibrate_basic(&scores, DEFAULT_QUANTILES).map_err(|e| e.to_string())?;
    ensure((t.uq_green, t.uq_orange, t.uq_red) == (0.50, 0.75, 0.90), || format!("{t:?}"))
}

pub fn quantile_ordering(cases: u32) -> Outcome {
    let strategy = (
        prop::collection::vec(0.0f64..=1.0, 1..300),
        prop::array::uniform3(0.01f64..0.99),
    );
    run_prop(cases, strategy, |(scores, mut q)| {
        q.sort_by(f64::total_cmp);
        let t = calibrate_basic(&scores, (q[0], q[1], q[2])).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(t.uq_green <= t.uq_orange && t.uq_orange <= t.uq_red, "{t:?}");
        prop_assert_eq!(t.uq_green, quantile_oracle(&scores, q[0]));
        prop_assert_eq!(t.uq_orange, quantile_oracle(&scores, q[1]));
        prop_assert_eq!(t.uq_red, quantile_oracle(&scores, q[2]));
        Ok(())
    })
}

// ---- retention ----

/// Values drawn from a small grid so ties on every key occur.
fn grid(lo: f64, step: f64, n: u32) -> impl Strategy<Value = f64> {
    (0..n).prop_map(move |k| lo + step * k as f64)
}

fn special(finite: impl Strategy<Value = f64>) -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => finite,
        1 => Just(f64::NAN),
        1 => Just(f64::INFINITY),
    ]
}

pub fn record_strategy(allow_nonfinite: bool) -> BoxedStrategy<EpochRecord> {
    let ce = grid(3.0, 0.01, 8);
    let local = grid(0.05, 0.01, 10);
    let fth = grid(0.0, 0.125, 4);
    let mu2 = grid(0.02, 0.02, 8);
    let acc = grid(0.1, 0.05, 4);
    let kl = grid(0.5, 0.5, 3);
    let fields = if allow_nonfinite {
        (special(ce).boxed(), special(acc).boxed(), special(local).boxed(), fth.boxed(), special(mu2).boxed(), special(kl).boxed())
    } else {
        (ce.boxed(), acc.boxed(), local.boxed(), fth.boxed(), mu2.boxed(), kl.boxed())
    };
    (0u64..3, 1usize..10, fields)
        .prop_map(|(seed, epoch, (ce, acc, local, fth, mu2, kl))| EpochRecord::new(seed, epoch, ce, acc, local, fth, mu2, kl))
        .boxed()
}

/// Task-safe predicates evaluated directly on each record.
pub fn filter_oracle(records: &[EpochRecord], cfg: &RetentionConfig) -> Vec<bool> {
    let is_finite = |r: &EpochRecord| {
        [r.ce, r.acc, r.local_recon, r.frac_too_high, r.mu2_mean_eval, r.kl]
            .iter()
            .all(|v| v.is_finite())
    };
    let finite: Vec<&EpochRecord> = records.iter().filter(|r| is_finite(r)).collect();
    let best_ce = finite.iter().map(|r| r.ce).fold(f64::INFINITY, f64::min);
    let best_local = finite.iter().map(|r| r.local_recon).fold(f64::NEG_INFINITY, f64::max);
    records
        .iter()
        .map(|r| {
            is_finite(r)
                && r.ce <= best_ce + cfg.selection_ce_tolerance
                && r.local_recon >= cfg.selection_local_ratio * best_local
        })
        .collect()
}

/// Whether `a` ranks strictly before `b`, key by key.
fn precedes(a: &EpochRecord, b: &EpochRecord, cfg: &RetentionConfig) -> Option<bool> {
    let keys = |r: &EpochRecord| {
        [
            if r.task_safe { 0.0 } else { 1.0 },
            r.frac_too_high,
            (r.mu2_mean_eval - cfg.mu2_target).abs(),
            -r.acc,
            r.ce,
            -r.local_recon,
        ]
    };
    let (ka, kb) = (keys(a), keys(b));
    for (x, y) in ka.iter().zip(&kb) {
        if x < y {
            return Some(true);
        }
        if x > y {
            return Some(false);
        }
    }
    None
}

/// Position of each record is the number of records that beat it, plus
/// the fully tied ones that appear earlier in the input.
pub fn brute_force_rank(records: &[EpochRecord], cfg: &RetentionConfig) -> Vec<usize> {
    let mut pos: Vec<(usize, usize)> = (0..records.len())
        .map(|i| {
            let before = (0..records.len())
                .filter(|&j| match precedes(&records[j], &records[i], cfg) {
                    Some(p) => p,
                    None => j < i,
                })
                .count();
            (before, i)
        })
        .collect();
    pos.sort_unstable();
    pos.into_iter().map(|(_, i)| i).collect()
}

pub fn retention_equivalence(cases: u32) -> Outcome {
    let cfg = RetentionConfig::default();
    run_prop(cases, prop::collection::vec(record_strategy(false), 1..=20), |mut records| {
        task_safe_filter(&mut records, &cfg);
        let got = rank_order(&records, &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(got, brute_force_rank(&records, &cfg));
        Ok(())
    })?;
    run_prop(cases, prop::collection::vec(record_strategy(true), 1..=20), |mut records| {
        let want = filter_oracle(&records, &cfg);
        task_safe_filter(&mut records, &cfg);
        let got: Vec<bool> = records.iter().map(|r| r.task_safe).collect();
        prop_assert_eq!(got, want);
        Ok(())
    })
}

// ---- uncertainty ----

fn h(p: &[f64]) -> f64 {
    p.iter().map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 }).sum()
}

fn top1(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// MC passes over a shared vocabulary; some passes repeat and some carry
/// exact zeros.
pub fn pass_set_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..10, 1usize..12).prop_flat_map(|(v, m)| {
        prop::collection::vec(
            (prop::collection::vec(-4.0f64..4.0, v), 0.2f64..3.0, prop::bool::weighted(0.15), prop::bool::weighted(0.2)),
            m,
        )
        .prop_map(|rows| {
            let mut out: Vec<Vec<f64>> = Vec::new();
            for (logits, temp, zero_one, repeat) in rows {
                if repeat && !out.is_empty() {
                    out.push(out[0].clone());
                    continue;
                }
                let mut e: Vec<f64> = logits.iter().map(|l| (l / temp).exp()).collect();
                if zero_one {
                    e[0] = 0.0;
                }
                let z: f64 = e.iter().sum();
                out.push(e.iter().map(|x| x / z).collect());
            }
            out
        })
    })
}

pub fn uncertainty_identities(cases: u32) -> Outcome {
    run_prop(cases, pass_set_strategy(), |passes| {
        let refs: Vec<&[f64]> = passes.iter().map(Vec::as_slice).collect();
        let m = passes.len() as f64;
        let v = passes[0].len();
        let mean: Vec<f64> = (0..v).map(|k| passes.iter().map(|p| p[k]).sum::<f64>() / m).collect();
        let h_oracle = h(&mean);
        let hc_oracle = passes.iter().map(|p| h(p)).sum::<f64>() / m;
        let (hh, hc, mi_raw) = entropy_decomposition(&refs).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!((hh - (mi_raw + hc)).abs() <= 1e-9);
        prop_assert!((hh - h_oracle).abs() <= 1e-9, "H {} vs {}", hh, h_oracle);
        prop_assert!((hc - hc_oracle).abs() <= 1e-9, "Hc {} vs {}", hc, hc_oracle);
        let r = predictive_readout(&refs).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(r.mutual_information >= 0.0 && r.mutual_information <= r.predictive_entropy + 1e-12);
        let flip_oracle = passes.iter().filter(|p| top1(p) != top1(&mean)).count() as f64 / m;
        prop_assert!((0.0..=1.0).contains(&r.top1_flip_rate_mc));
        prop_assert_eq!(r.top1_flip_rate_mc, flip_oracle);
        prop_assert!(r.epi >= 0.0);
        Ok(())
    })
}

pub fn tiny_examples(n: usize, vocab: u32, ctx: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Example {
            context: (0..ctx).map(|_| rng.random_range(0..vocab)).collect(),
            target: rng.random_range(0..vocab),
            source_pair: i / 4,
        })
        .collect()
}

pub fn det_exact_zeros() -> Outcome {
    let cfg = BackboneConfig {
        vocab_size: 16,
        context_len: 5,
        embed_dim: 4,
        hidden_dim: 8,
        latent_dim: 4,
        variational: false,
        ..Default::default()
    };
    let model = Model::init(cfg, Arc::new(EmbeddingTable::seeded(16, 4, 2)), 3).map_err(|e| e.to_string())?;
    let examples = tiny_examples(50, 16, 5, 8);
    let (s, rows) = canonical_eval(&model, &examples, &BandConfig::default(), &EvalConfig::default())
        .map_err(|e| e.to_string())?;
    let zeros = [s.mi, s.epi, s.flip, s.kl, s.local];
    ensure(zeros == [0.0; 5], || format!("DET mi/epi/flip/kl/local = {zeros:?}"))?;
    ensure(
        rows.iter().all(|r| r.readout.mutual_information == 0.0 && r.readout.top1_flip_rate_mc == 0.0),
        || "per-example DET readout not zero".into(),
    )
}

// ---- gradients ----

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` of
/// central differences over the chosen coordinates of `params`.
pub fn fd_relative_error(
    params: &Params,
    build: impl Fn(&mut Graph, &Params) -> NodeId,
    coords: &[(String, usize)],
) -> Result<f64, String> {
    let mut g = Graph::new();
    let loss = build(&mut g, params);
    let grads = g.backward(loss).map_err(|e| e.to_string())?;
    let eval = |p: &Params| {
        let mut g = Graph::new();
        let l = build(&mut g, p);
        g.value(l).data()[0]
    };
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (name, i) in coords {
        let a = grads.get(name).map_or(0.0, |t| t.data()[*i]);
        let mut p = params.clone();
        p.get_mut(name).unwrap().data_mut()[*i] += FD_STEP;
        let up = eval(&p);
        p.get_mut(name).unwrap().data_mut()[*i] -= 2.0 * FD_STEP;
        let down = eval(&p);
        let n = (up - down) / (2.0 * FD_STEP);
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(diff.sqrt() / scale)
}

fn all_coords(params: &Params) -> Vec<(String, usize)> {
    params
        .iter()
        .flat_map(|(n, t)| (0..t.len()).map(move |i| (n.clone(), i)))
        .collect()
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::randn(&[rows, cols], scale, rng)
}

/// Energies kept at least this far from the band edges so the hinge stays
/// differentiable under the finite-difference step.
const KINK_MARGIN: f64 = 1e-3;

pub struct GradCase {
    pub name: &'static str,
    pub worst: f64,
}

pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<GradCase>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 5];
    let band = BandConfig::default();
    for _ in 0..instances {
        let b = rng.random_range(1..5);
        let v = rng.random_range(2..7);
        let u = rng.random_range(1..5);

        // cross entropy
        let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..v)).collect();
        let mut p = Params::new();
        p.insert("logits".into(), randn(&mut rng, b, v, 2.0));
        let e = fd_relative_error(
            &p,
            |g, p| {
                let l = g.param("logits", &p["logits"]);
                g.softmax_cross_entropy(l, &targets).unwrap()
            },
            &all_coords(&p),
        )?;
        worst[0] = worst[0].max(e);

        // Gaussian KL
        let mut p = Params::new();
        for n in ["mu_q", "mu_p"] {
            p.insert(n.into(), randn(&mut rng, b, u, 1.0));
        }
        for n in ["ls_q", "ls_p"] {
            p.insert(n.into(), randn(&mut rng, b, u, 0.5));
        }
        let e = fd_relative_error(
            &p,
            |g, p| {
                let ids: Vec<NodeId> = ["mu_q", "ls_q", "mu_p", "ls_p"].iter().map(|n| g.param(n, &p[*n])).collect();
                kl_node(g, ids[0], ids[1], ids[2], ids[3]).unwrap()
            },
            &all_coords(&p),
        )?;
        worst[1] = worst[1].max(e);

        // local reconstruction
        let mut p = Params::new();
        p.insert("h".into(), randn(&mut rng, b, v, 1.0));
        p.insert("h_hat".into(), randn(&mut rng, b, v, 1.0));
        let e = fd_relative_error(
            &p,
            |g, p| {
                let (a, c) = (g.param("h", &p["h"]), g.param("h_hat", &p["h_hat"]));
                recon_node(g, a, c).unwrap()
            },
            &all_coords(&p),
        )?;
        worst[2] = worst[2].max(e);

        // band penalty, away from the hinge points
        let scales: Vec<f64> = (0..u).map(|_| rng.random_range(0.5..2.0)).collect();
        let mu = loop {
            let t = randn(&mut rng, b, u, 0.35);
            let ok = (0..u).all(|k| {
                let energy = (0..b).map(|r| t.data()[r * u + k].powi(2)).sum::<f64>() / b as f64;
                (energy - band.band_low).abs() > KINK_MARGIN && (energy - band.band_high).abs() > KINK_MARGIN
            });
            if ok {
                break t;
            }
        };
        let mut p = Params::new();
        p.insert("mu".into(), mu);
        let e = fd_relative_error(
            &p,
            |g, p| {
                let m = g.param("mu", &p["mu"]);
                band_node(g, m, &band, &scales).unwrap()
            },
            &all_coords(&p),
        )?;
        worst[3] = worst[3].max(e);

        worst[4] = worst[4].max(reparameterized_path(&mut rng)?);
    }
    let names = ["cross entropy", "Gaussian KL", "local reconstruction", "band penalty", "reparameterized path"];
    Ok(names.iter().zip(worst).map(|(&name, worst)| GradCase { name, worst }).collect())
}

/// Full variational objective through `z = μ + σ·ε` with fixed `ε`; checks
/// every posterior coordinate plus a sample of the rest.
fn reparameterized_path(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let (vocab, ctx, dim) = (8, 3, 3);
    let cfg = BackboneConfig {
        vocab_size: vocab,
        context_len: ctx,
        embed_dim: dim,
        hidden_dim: 5,
        latent_dim: 2,
        mc_samples_train: 2,
        ..Default::default()
    };
    let emb = Arc::new(EmbeddingTable::seeded(vocab, dim, rng.random()));
    let model = Model::init(cfg.clone(), emb.clone(), rng.random()).map_err(|e| e.to_string())?;
    let batch = 3;
    let examples = tiny_examples(batch, vocab as u32, ctx, rng.random());
    let contexts: Vec<&[u32]> = examples.iter().map(|e| e.context.as_slice()).collect();
    let targets: Vec<u32> = examples.iter().map(|e| e.target).collect();
    let noise = Noise::Explicit((0..2).map(|_| randn(rng, batch, 2, 1.0)).collect());
    let mut reg = RegulatorState::new(2, &RegulatorConfig::default());
    reg.beta = rng.random_range(0.5..2.0);
    reg.unit_scales = vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
    let band = BandConfig {
        lambda_band: 0.5,
        lambda_local: 0.3,
        ..Default::default()
    };
    let mut coords: Vec<(String, usize)> = all_coords(&model.params)
        .into_iter()
        .filter(|(n, _)| n.starts_with("posterior."))
        .collect();
    let others: Vec<(String, usize)> = all_coords(&model.params)
        .into_iter()
        .filter(|(n, _)| !n.starts_with("posterior."))
        .collect();
    for _ in 0..24 {
        coords.push(others[rng.random_range(0..others.len())].clone());
    }
    fd_relative_error(
        &model.params,
        |g, p| {
            let m = Model::from_params(cfg.clone(), emb.clone(), p.clone()).unwrap();
            let out = m.build_forward(g, &contexts, &[0, 1, 2], &noise).unwrap();
            total_loss(g, &out, &targets, &band, &reg).unwrap().0
        },
        &coords,
    )
}

pub fn gradient_check(instances: usize) -> Outcome {
    for case in gradient_suite(instances, 0x9e)? {
        ensure(case.worst <= FD_TOL, || format!("{}: relative error {:.2e}", case.name, case.worst))?;
    }
    Ok(())
}

// ---- pipeline fixtures ----

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn desk_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(&workspace_root().join("configs/desk.toml")).expect("desk config");
    cfg.out_dir = out.to_owned();
    cfg
}

/// A config small enough to run every stage in a couple of seconds.
#[allow(clippy::field_reassign_with_default)]
pub fn tiny_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.out_dir = out.to_owned();
    cfg.seeds = vec![3, 4];
    cfg.corpus.synthetic.vocab_size = 16;
    cfg.corpus.synthetic.n_pairs = 60;
    cfg.data.dataset_fraction = 1.0;
    cfg.data.context_len = 6;
    cfg.backbone.vocab_size = 16;
    cfg.backbone.context_len = 6;
    cfg.backbone.embed_dim = 4;
    cfg.backbone.hidden_dim = 8;
    cfg.backbone.latent_dim = 4;
    cfg.backbone.mc_samples_train = 2;
    cfg.backbone.mc_samples_eval = 4;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 32;
    cfg.train.lr_eve = 3e-3;
    cfg.train.lr_det = 3e-3;
    cfg.agentic.max_examples = 60;
    cfg.agentic.max_calibration = 60;
    cfg.sweep.values = vec![2.0, 2.1];
    cfg
}
