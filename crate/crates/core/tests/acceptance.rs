//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Run with `cargo test -p eve-core --test acceptance`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::Outcome;
use eve_core::pipeline::{AgenticOutput, Evaluation, Family, Pipeline, PipelineOptions, Selection};

const DESK_BUDGET: Duration = Duration::from_secs(600);

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    f()?;
    let took = start.elapsed();
    if took > limit {
        return Err(format!("took {took:?}, limit {limit:?}"));
    }
    Ok(())
}

fn run_desk(out: &Path) -> Result<Duration, String> {
    let start = Instant::now();
    let pipeline = Pipeline::new(common::desk_config(out), PipelineOptions::default()).map_err(|e| e.to_string())?;
    pipeline.run_all().map_err(|e| e.to_string())?;
    Ok(start.elapsed())
}

fn desk_end_to_end(out: &Path, notes: &mut Vec<String>) -> Outcome {
    let took = run_desk(out)?;
    if took > DESK_BUDGET {
        return Err(format!("pipeline took {took:?}"));
    }
    let selection: Selection = read(&out.join("select/selection.json"))?;
    let evals: Vec<Evaluation> = read(&out.join("evaluate/evaluations.json"))?;
    let find = |family: Family, seed: u64, epoch: usize| {
        evals
            .iter()
            .find(|e| e.family == family && e.seed == seed && e.epoch == epoch)
            .ok_or_else(|| format!("no evaluation for {family:?} seed {seed} epoch {epoch}"))
    };
    let seed = selection.outcome.selected_seed;
    let eve = find(Family::Eve, seed, selection.eve_epoch)?;
    let det = find(Family::Det, selection.det_seed, selection.det_epoch)?;
    if !(eve.summary.mi > 0.0 && eve.summary.flip > 0.0) {
        return Err(format!("EVE mi {} flip {}", eve.summary.mi, eve.summary.flip));
    }
    let retained = selection
        .per_seed
        .iter()
        .find(|r| r.seed == seed)
        .ok_or("selected seed missing from per-seed retention")?;
    if !retained.task_safe {
        return Err(format!("retained checkpoint seed {seed} epoch {} is not task-safe", retained.retained_epoch));
    }
    let agentic: AgenticOutput = read(&out.join("agentic/summary.json"))?;
    if agentic.verification.checks.len() != 6 || agentic.verification.checks.iter().any(|c| !c.value.is_finite()) {
        return Err(format!("verification incomplete: {:?}", agentic.verification.checks));
    }
    let gap = eve.summary.ce - det.summary.ce;
    notes.push(format!(
        "desk run {took:.1?}; EVE ce {:.4} vs DET ce {:.4} (gap {gap:+.4}, {}); mi {:.4} flip {:.4}; verification {}/6",
        eve.summary.ce,
        det.summary.ce,
        if gap <= 0.05 { "within 0.05" } else { "outside 0.05, non-blocking" },
        eve.summary.mi,
        eve.summary.flip,
        agentic.verification.checks.iter().filter(|c| c.passed).count(),
    ));
    Ok(())
}

fn report_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap_or_default()))
        .collect();
    files.sort();
    Ok(files)
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    if !first.join("reports").exists() {
        run_desk(first)?;
    }
    run_desk(second)?;
    let (a, b) = (report_files(&first.join("reports"))?, report_files(&second.join("reports"))?);
    let names = |f: &[(String, Vec<u8>)]| f.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    if names(&a) != names(&b) {
        return Err(format!("report sets differ: {:?} vs {:?}", names(&a), names(&b)));
    }
    if !a.iter().any(|(n, _)| n.ends_with(".csv")) {
        return Err("no CSV reports written".into());
    }
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        if x != y {
            return Err(format!("{name} differs between runs"));
        }
    }
    Ok(())
}

type Criterion<'a> = (&'static str, Box<dyn FnOnce(&mut Vec<String>) -> Outcome + 'a>);

fn main() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let (first, second) = (tmp.path().join("run-a"), tmp.path().join("run-b"));
    let mut notes = Vec::new();
    let criteria: Vec<Criterion> = vec![
        ("utility arithmetic", Box::new(|_| timed(Duration::from_secs(1), common::utility_reproduction))),
        ("verification checks", Box::new(|_| timed(Duration::from_secs(1), common::verification_reproduction))),
        ("unified score examples", Box::new(|_| common::score_examples())),
        (
            "quantile calibration",
            Box::new(|_| {
                common::quantile_grid()?;
                common::quantile_ordering(1000)
            }),
        ),
        ("retention oracle equivalence", Box::new(|_| common::retention_equivalence(1000))),
        ("gradient suite", Box::new(|_| common::gradient_check(100))),
        (
            "uncertainty identities",
            Box::new(|_| {
                common::uncertainty_identities(1000)?;
                common::det_exact_zeros()
            }),
        ),
        ("desk-scale end-to-end run", Box::new(|n| desk_end_to_end(&first, n))),
        ("deterministic reports", Box::new(|_| determinism(&first, &second))),
    ];

    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut notes)))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let took = start.elapsed();
        match result {
            Ok(()) => println!("criterion {}: PASS  {name} ({took:.2?})", i + 1),
            Err(e) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} ({took:.2?}): {e}", i + 1);
            }
        }
    }
    for n in notes {
        println!("note: {n}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
