//! Stage orchestration. Every stage reads its inputs from the output
//! directory and writes its artifacts plus a `manifest.json`, so stages can
//! be rerun one at a time.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agentic::{
    policy_stats, route_all, run_episode_options, summarize, summary_rows, verify, write_traces_jsonl,
    AgenticError, AgenticSummary, ReportValue, VerificationReport,
};
use crate::backbone::{BackboneError, Model};
use crate::config::{ConfigError, RunConfig};
use crate::controller::{
    calibrate_basic, calibrate_full, ControllerError, ControllerSidecar, Executor, GridPoint, RetrievalIndex,
    Thresholds,
};
use crate::data::{
    build_dataset, examples_checksum, generate_corpus, read_corpus, write_corpus, DataError, Dataset,
    EmbeddingTable, Example,
};
use crate::metrics::{canonical_eval, write_readouts_csv, EvalSummary, MetricsError};
use crate::objective::band_from_energy;
use crate::report::{Cell, ReportError, Source, Table};
use crate::retention::{
    load_checkpoint, rank_order, save_checkpoint, select_final_across_seeds, select_with_override,
    task_safe_filter, write_records_csv, Checkpoint, EpochRecord, RetentionError, SelectionOutcome,
};
use crate::train::{train_run, EpochOutcome, RunSpec, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PrepareData,
    Train,
    Evaluate,
    Select,
    Calibrate,
    AgenticEval,
    Report,
}

pub const STAGES: [Stage; 7] = [
    Stage::PrepareData,
    Stage::Train,
    Stage::Evaluate,
    Stage::Select,
    Stage::Calibrate,
    Stage::AgenticEval,
    Stage::Report,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PrepareData => "prepare-data",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Select => "select",
            Stage::Calibrate => "calibrate",
            Stage::AgenticEval => "agentic-eval",
            Stage::Report => "report",
        }
    }

    fn dir(self) -> &'static str {
        match self {
            Stage::PrepareData => "data",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Select => "select",
            Stage::Calibrate => "calibrate",
            Stage::AgenticEval => "agentic",
            Stage::Report => "reports",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Retention(#[from] RetentionError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Agentic(#[from] AgenticError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("missing input {0}; run the earlier stage first")]
    MissingInput(PathBuf),
    #[error("dataset checksum {found} does not match the prepared data ({expected}); the config changed since prepare-data")]
    DataDrift { expected: String, found: String },
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: StageError,
    },
}

impl PipelineError {
    /// 2 for configuration problems, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { .. } => 3,
        }
    }
}

/// Command-line adjustments to a run.
#[derive(Clone, Debug, Default)]
pub struct PipelineOptions {
    pub seed_override: Option<u64>,
    pub sweep: Option<(String, Vec<f64>)>,
    pub verbose: bool,
}

/// File list and traceability entries of one stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_digest: String,
    /// Relative path → SHA-256 of the file.
    pub outputs: BTreeMap<String, String>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub key: String,
    pub file: String,
    pub seed: Option<u64>,
    pub epoch: Option<usize>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StageError + '_ {
    move |source| StageError::Io {
        path: path.to_owned(),
        source,
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), StageError> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| StageError::Json {
        path: path.to_owned(),
        source,
    })?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StageError> {
    if !path.exists() {
        return Err(StageError::MissingInput(path.to_owned()));
    }
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| StageError::Json {
        path: path.to_owned(),
        source,
    })
}

fn require(path: &Path) -> Result<&Path, StageError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(StageError::MissingInput(path.to_owned()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Eve,
    Det,
}

impl Family {
    fn prefix(self) -> &'static str {
        match self {
            Family::Eve => "eve",
            Family::Det => "det",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Family::Eve => "EVE",
            Family::Det => "DET",
        }
    }
}

/// Paths and shared state for one output directory.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub opts: PipelineOptions,
    pub out: PathBuf,
    config_digest: String,
}

#[derive(Serialize, Deserialize)]
struct DataSummary {
    vocab_size: usize,
    n_pairs: usize,
    n_train: usize,
    n_val: usize,
    train_checksum: String,
    val_checksum: String,
}

#[derive(Clone, Serialize, Deserialize)]
struct RunLog {
    family: Family,
    seed: u64,
    epochs: Vec<EpochOutcome>,
}

/// One stage-1 search candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub candidate: String,
    pub key: String,
    pub value: f64,
    pub seed: u64,
    pub epoch: usize,
    pub ce: f64,
    pub local: f64,
    pub frac_too_high: f64,
    pub mu2: f64,
}

/// Canonical-view result for one stored checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub family: Family,
    pub seed: u64,
    pub epoch: usize,
    pub checkpoint: String,
    pub summary: EvalSummary,
    /// The training objective evaluated on the validation view.
    pub val_objective: f64,
    pub record: EpochRecord,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedRetention {
    pub seed: u64,
    pub retained_epoch: usize,
    pub task_safe: bool,
    /// Epochs in ranked order.
    pub ranking: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Selection {
    pub per_seed: Vec<SeedRetention>,
    pub outcome: SelectionOutcome,
    pub eve_epoch: usize,
    pub det_seed: u64,
    pub det_epoch: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Calibration {
    pub n_rows: usize,
    pub basic: Thresholds,
    pub full: Thresholds,
    pub grid: Vec<GridPoint>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AgenticOutput {
    pub selected_seed: u64,
    pub thresholds: Thresholds,
    pub summary: AgenticSummary,
    pub verification: VerificationReport,
}

/// What a full or partial run produced.
#[derive(Clone, Debug, Default)]
pub struct RunOutcome {
    pub verification_passed: Option<bool>,
    pub missing_reports: Vec<String>,
}

pub const REPORT_TABLES: [&str; 6] = [
    "backbone_comparison",
    "seed_comparison",
    "stage1_search",
    "uncertainty_summary",
    "agentic_summary",
    "verification",
];

/// Splits validation examples by source pair: pairs at even rank calibrate
/// the controller, odd-rank pairs are held out for the routed evaluation.
pub fn controller_split(val: &[Example]) -> (Vec<Example>, Vec<Example>) {
    let mut pairs: Vec<usize> = val.iter().map(|e| e.source_pair).collect();
    pairs.sort_unstable();
    pairs.dedup();
    let rank: BTreeMap<usize, usize> = pairs.iter().enumerate().map(|(r, &p)| (p, r)).collect();
    val.iter().cloned().partition(|e| rank[&e.source_pair].is_multiple_of(2))
}

fn ckpt_name(family: Family, seed: u64, epoch: usize) -> String {
    format!("{}_s{seed}_e{epoch}.ckpt", family.prefix())
}

const AGENTIC_ID_OFFSET: usize = 1 << 20;

impl Pipeline {
    pub fn new(cfg: RunConfig, opts: PipelineOptions) -> Result<Self, PipelineError> {
        cfg.validate()?;
        if let Some((key, values)) = &opts.sweep {
            for v in values {
                cfg.with_sweep_value(key, *v)?;
            }
        }
        let mut digest_cfg = cfg.clone();
        digest_cfg.out_dir = PathBuf::new();
        let config_digest = sha256_hex(digest_cfg.to_toml().as_bytes());
        Ok(Self {
            out: cfg.out_dir.clone(),
            cfg,
            opts,
            config_digest,
        })
    }

    fn dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.dir())
    }

    fn log(&self, msg: impl fmt::Display) {
        if self.opts.verbose {
            eprintln!("{msg}");
        }
    }

    fn stage_dir(&self, stage: Stage) -> Result<PathBuf, StageError> {
        let d = self.dir(stage);
        std::fs::create_dir_all(&d).map_err(io_err(&d))?;
        Ok(d)
    }

    fn finish(&self, stage: Stage, entries: Vec<ManifestEntry>) -> Result<(), StageError> {
        let dir = self.dir(stage);
        let mut outputs = BTreeMap::new();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "manifest.json"))
            .collect();
        files.sort();
        for f in files {
            let bytes = std::fs::read(&f).map_err(io_err(&f))?;
            let rel = f.strip_prefix(&self.out).unwrap_or(&f).to_string_lossy().replace('\\', "/");
            outputs.insert(rel, sha256_hex(&bytes));
        }
        write_json(
            &dir.join("manifest.json"),
            &Manifest {
                stage: stage.name().into(),
                config_digest: self.config_digest.clone(),
                outputs,
                entries,
            },
        )
    }

    pub fn run_stage(&self, stage: Stage) -> Result<RunOutcome, PipelineError> {
        self.log(format_args!("[{stage}]"));
        let wrap = |source| PipelineError::Stage { stage, source };
        let mut outcome = RunOutcome::default();
        match stage {
            Stage::PrepareData => self.prepare_data().map_err(wrap)?,
            Stage::Train => self.train().map_err(wrap)?,
            Stage::Evaluate => self.evaluate().map_err(wrap)?,
            Stage::Select => self.select().map_err(wrap)?,
            Stage::Calibrate => self.calibrate().map_err(wrap)?,
            Stage::AgenticEval => outcome.verification_passed = Some(self.agentic_eval().map_err(wrap)?),
            Stage::Report => outcome = self.report().map_err(wrap)?,
        }
        Ok(outcome)
    }

    /// All stages in order; stops at the first failure.
    pub fn run_all(&self) -> Result<RunOutcome, PipelineError> {
        let mut outcome = RunOutcome::default();
        for stage in STAGES {
            let o = self.run_stage(stage)?;
            if o.verification_passed.is_some() {
                outcome.verification_passed = o.verification_passed;
            }
            if stage == Stage::Report {
                outcome.missing_reports = o.missing_reports;
            }
        }
        Ok(outcome)
    }

    // ---- data ----

    fn prepare_data(&self) -> Result<(), StageError> {
        let dir = self.stage_dir(Stage::PrepareData)?;
        let corpus = match &self.cfg.corpus.path {
            Some(p) => read_corpus(p)?,
            None => generate_corpus(&self.cfg.corpus.synthetic)?,
        };
        if corpus.vocab_size != self.cfg.backbone.vocab_size {
            return Err(ConfigError::Invalid {
                section: "backbone",
                msg: format!("corpus vocabulary is {}, backbone expects {}", corpus.vocab_size, self.cfg.backbone.vocab_size),
            }
            .into());
        }
        let (v, d) = (self.cfg.backbone.vocab_size, self.cfg.backbone.embed_dim);
        let table = match &self.cfg.embedding.path {
            Some(p) => EmbeddingTable::load(p, Some((v, d)))?,
            None => EmbeddingTable::seeded(v, d, self.cfg.embedding.seed),
        };
        write_corpus(&corpus, &dir.join("corpus.txt"))?;
        table.save(&dir.join("embedding.bin"))?;
        let ds = build_dataset(&corpus, &self.cfg.data)?;
        let summary = DataSummary {
            vocab_size: ds.vocab_size,
            n_pairs: ds.pairs.len(),
            n_train: ds.train.len(),
            n_val: ds.val.len(),
            train_checksum: examples_checksum(&ds.train),
            val_checksum: examples_checksum(&ds.val),
        };
        self.log(format_args!(
            "  {} pairs, {} train / {} val examples",
            summary.n_pairs, summary.n_train, summary.n_val
        ));
        write_json(&dir.join("dataset.json"), &summary)?;
        self.finish(Stage::PrepareData, vec![])
    }

    fn load_data(&self) -> Result<(Dataset, Arc<EmbeddingTable>), StageError> {
        let dir = self.dir(Stage::PrepareData);
        let corpus = read_corpus(require(&dir.join("corpus.txt"))?)?;
        let (v, d) = (self.cfg.backbone.vocab_size, self.cfg.backbone.embed_dim);
        let table = EmbeddingTable::load(require(&dir.join("embedding.bin"))?, Some((v, d)))?;
        let ds = build_dataset(&corpus, &self.cfg.data)?;
        let summary: DataSummary = read_json(&dir.join("dataset.json"))?;
        let found = examples_checksum(&ds.train) + &examples_checksum(&ds.val);
        let expected = summary.train_checksum + &summary.val_checksum;
        if found != expected {
            return Err(StageError::DataDrift { expected, found });
        }
        Ok((ds, Arc::new(table)))
    }

    // ---- training ----

    fn spec<'a>(&self, cfg: &RunConfig, family: Family, ds: &'a Dataset, emb: &Arc<EmbeddingTable>, seed: u64) -> RunSpec<'a> {
        let mut backbone = cfg.backbone.clone();
        backbone.variational = family == Family::Eve;
        RunSpec {
            backbone,
            band: cfg.band.clone(),
            regulator: cfg.regulator.clone(),
            train: cfg.train.clone(),
            eval: cfg.eval_config(),
            embedding: emb.clone(),
            train_set: &ds.train,
            val_set: &ds.val,
            seed,
        }
    }

    fn train(&self) -> Result<(), StageError> {
        let (ds, emb) = self.load_data()?;
        let dir = self.stage_dir(Stage::Train)?;
        let mut logs = Vec::new();
        let mut entries = Vec::new();
        for &seed in &self.cfg.seeds {
            for family in [Family::Eve, Family::Det] {
                let run = train_run(&self.spec(&self.cfg, family, &ds, &emb, seed))?;
                for (e, ck) in run.epochs.iter().zip(&run.checkpoints) {
                    let name = ckpt_name(family, seed, e.epoch);
                    save_checkpoint(ck, &dir.join(&name))?;
                    self.log(format_args!(
                        "  {} seed {seed} epoch {}: train ce {:.4}, val ce {:.4}, acc {:.4}, kl {:.3}, beta {:.3}",
                        family.label(),
                        e.epoch,
                        e.train.ce,
                        e.val.ce,
                        e.val.acc,
                        e.val.kl,
                        e.beta
                    ));
                    entries.push(ManifestEntry {
                        key: format!("checkpoint.{}", family.prefix()),
                        file: format!("train/{name}"),
                        seed: Some(seed),
                        epoch: Some(e.epoch),
                    });
                }
                logs.push(RunLog {
                    family,
                    seed,
                    epochs: run.epochs,
                });
            }
        }
        write_json(&dir.join("log.json"), &logs)?;

        let sweep = match &self.opts.sweep {
            Some((k, v)) => Some((k.clone(), v.clone())),
            None if self.cfg.sweep.enabled => Some((self.cfg.sweep.key.clone(), self.cfg.sweep.values.clone())),
            None => None,
        };
        if let Some((key, values)) = sweep {
            let rows = self.sweep(&ds, &emb, &key, &values)?;
            write_json(&dir.join("stage1_search.json"), &rows)?;
            for r in &rows {
                entries.push(ManifestEntry {
                    key: format!("sweep.{}", r.candidate),
                    file: "train/stage1_search.json".into(),
                    seed: Some(r.seed),
                    epoch: Some(r.epoch),
                });
            }
        }
        self.finish(Stage::Train, entries)
    }

    fn sweep(&self, ds: &Dataset, emb: &Arc<EmbeddingTable>, key: &str, values: &[f64]) -> Result<Vec<SweepRow>, StageError> {
        let seed = self.cfg.seeds[0];
        let mut rows = Vec::new();
        for (i, &value) in values.iter().enumerate() {
            let mut cfg = self.cfg.with_sweep_value(key, value)?;
            cfg.train.epochs = self.cfg.sweep.epochs;
            let run = train_run(&self.spec(&cfg, Family::Eve, ds, emb, seed))?;
            let last = run.epochs.last().expect("epochs >= 1");
            let candidate = format!("Stage1 {:02}", i + 1);
            self.log(format_args!("  {candidate} {key}={value}: val ce {:.4}", last.val.ce));
            rows.push(SweepRow {
                candidate,
                key: key.to_owned(),
                value,
                seed,
                epoch: last.epoch,
                ce: last.val.ce,
                local: last.val.local,
                frac_too_high: last.val.frac_too_high,
                mu2: last.val.mu2_mean_eval,
            });
        }
        Ok(rows)
    }

    // ---- evaluation ----

    fn checkpoint_list(&self) -> Result<Vec<(Family, u64, usize)>, StageError> {
        let m: Manifest = read_json(&self.dir(Stage::Train).join("manifest.json"))?;
        Ok(m
            .entries
            .iter()
            .filter_map(|e| {
                let family = match e.key.as_str() {
                    "checkpoint.eve" => Family::Eve,
                    "checkpoint.det" => Family::Det,
                    _ => return None,
                };
                Some((family, e.seed?, e.epoch?))
            })
            .collect())
    }

    fn evaluate(&self) -> Result<(), StageError> {
        let (ds, emb) = self.load_data()?;
        let dir = self.stage_dir(Stage::Evaluate)?;
        let eval_cfg = self.cfg.eval_config();
        let mut evals = Vec::new();
        let mut entries = Vec::new();
        for (family, seed, epoch) in self.checkpoint_list()? {
            let name = ckpt_name(family, seed, epoch);
            let ck = load_checkpoint(require(&self.dir(Stage::Train).join(&name))?)?;
            let model = Model::from_params(ck.config.clone(), emb.clone(), ck.params.clone())?;
            let (summary, rows) = canonical_eval(&model, &ds.val, &self.cfg.band, &eval_cfg)?;
            let csv = format!("readouts_{}_s{seed}_e{epoch}.csv", family.prefix());
            write_readouts_csv(&dir.join(&csv), &rows)?;
            let val_objective = match family {
                Family::Det => summary.ce,
                Family::Eve => {
                    let band = band_from_energy(&summary.unit_energy, &self.cfg.band, Some(&ck.regulator.unit_scales));
                    let mse = if summary.local > 0.0 { 1.0 / summary.local - 1.0 } else { f64::INFINITY };
                    summary.ce
                        + ck.regulator.beta * summary.kl
                        + self.cfg.band.lambda_local * mse
                        + self.cfg.band.lambda_band * band.band
                }
            };
            entries.push(ManifestEntry {
                key: format!("evaluation.{}", family.prefix()),
                file: format!("evaluate/{csv}"),
                seed: Some(seed),
                epoch: Some(epoch),
            });
            evals.push(Evaluation {
                family,
                seed,
                epoch,
                checkpoint: format!("train/{name}"),
                record: crate::train::record_from(seed, epoch, &summary),
                summary,
                val_objective,
            });
        }
        write_json(&dir.join("evaluations.json"), &evals)?;
        self.finish(Stage::Evaluate, entries)
    }

    fn evaluations(&self) -> Result<Vec<Evaluation>, StageError> {
        read_json(&self.dir(Stage::Evaluate).join("evaluations.json"))
    }

    // ---- retention ----

    fn select(&self) -> Result<(), StageError> {
        let evals = self.evaluations()?;
        let dir = self.stage_dir(Stage::Select)?;
        let mut per_seed = Vec::new();
        let mut candidates = Vec::new();
        let mut all_records = Vec::new();
        for &seed in &self.cfg.seeds {
            let mut records: Vec<EpochRecord> = evals
                .iter()
                .filter(|e| e.family == Family::Eve && e.seed == seed)
                .map(|e| e.record.clone())
                .collect();
            task_safe_filter(&mut records, &self.cfg.retention);
            let order = rank_order(&records, &self.cfg.retention)?;
            let best = &records[order[0]];
            let mut ck = load_checkpoint(&self.dir(Stage::Train).join(ckpt_name(Family::Eve, seed, best.epoch)))?;
            ck.record = best.clone();
            candidates.push(ck);
            per_seed.push(SeedRetention {
                seed,
                retained_epoch: best.epoch,
                task_safe: best.task_safe,
                ranking: order.iter().map(|&i| records[i].epoch).collect(),
            });
            all_records.extend(records);
        }
        write_records_csv(&dir.join("records.csv"), &all_records)?;
        let (eve, outcome) = select_with_override(candidates, self.opts.seed_override)?;
        self.log(format_args!(
            "  EVE: rule picks seed {}, using seed {} epoch {} ({})",
            outcome.rule_seed, outcome.selected_seed, eve.record.epoch, outcome.selection_reason
        ));
        save_checkpoint(&eve, &dir.join("eve_selected.ckpt"))?;

        let det_candidates: Vec<Checkpoint> = evals
            .iter()
            .filter(|e| e.family == Family::Det)
            .map(|e| {
                let mut ck = load_checkpoint(&self.out.join(&e.checkpoint))?;
                ck.record = e.record.clone();
                Ok(ck)
            })
            .collect::<Result<_, StageError>>()?;
        let det = select_final_across_seeds(det_candidates)?;
        save_checkpoint(&det, &dir.join("det_selected.ckpt"))?;
        let selection = Selection {
            eve_epoch: eve.record.epoch,
            det_seed: det.record.seed,
            det_epoch: det.record.epoch,
            per_seed,
            outcome,
        };
        write_json(&dir.join("selection.json"), &selection)?;
        let entries = vec![
            ManifestEntry {
                key: "selected.eve".into(),
                file: "select/eve_selected.ckpt".into(),
                seed: Some(eve.record.seed),
                epoch: Some(eve.record.epoch),
            },
            ManifestEntry {
                key: "selected.det".into(),
                file: "select/det_selected.ckpt".into(),
                seed: Some(det.record.seed),
                epoch: Some(det.record.epoch),
            },
        ];
        self.finish(Stage::Select, entries)
    }

    fn selected_model(&self, emb: &Arc<EmbeddingTable>) -> Result<(Checkpoint, Model), StageError> {
        let ck = load_checkpoint(require(&self.dir(Stage::Select).join("eve_selected.ckpt"))?)?;
        let model = Model::from_params(ck.config.clone(), emb.clone(), ck.params.clone())?;
        Ok((ck, model))
    }

    // ---- controller ----

    fn executor<'a>(&'a self, model: &'a Model, index: &'a RetrievalIndex) -> Executor<'a> {
        Executor {
            model,
            index,
            costs: &self.cfg.costs,
            mc_samples: self.cfg.backbone.mc_samples_eval,
            seed: self.cfg.agentic.seed,
        }
    }

    fn calibrate(&self) -> Result<(), StageError> {
        let (ds, emb) = self.load_data()?;
        let (ck, model) = self.selected_model(&emb)?;
        let dir = self.stage_dir(Stage::Calibrate)?;
        let index = RetrievalIndex::build(&emb, &ds.train);
        let (calib, _) = controller_split(&ds.val);
        let calib = &calib[..calib.len().min(self.cfg.agentic.max_calibration)];
        let exec = self.executor(&model, &index);
        let options = run_episode_options(&exec, calib, &self.cfg.score, 0, self.cfg.eval.batch_size)?;
        let scores: Vec<f64> = options.iter().map(|o| o.score).collect();
        let basic = calibrate_basic(&scores, self.cfg.calibration.quantiles)?;
        let mut sim_err = None;
        let (full, grid) = calibrate_full(&scores, &self.cfg.calibration.grid(), &self.cfg.calibration, |t| {
            policy_stats(&options, t, &self.cfg.costs).unwrap_or_else(|e| {
                sim_err.get_or_insert(e);
                Default::default()
            })
        })?;
        if let Some(e) = sim_err {
            return Err(e.into());
        }
        self.log(format_args!(
            "  basic ({:.4}, {:.4}, {:.4}), full ({:.4}, {:.4}, {:.4})",
            basic.uq_green, basic.uq_orange, basic.uq_red, full.uq_green, full.uq_orange, full.uq_red
        ));
        ControllerSidecar {
            thresholds: full,
            score: self.cfg.score.clone(),
        }
        .save(&dir.join("eve_selected.controller.toml"))?;
        write_json(
            &dir.join("calibration.json"),
            &Calibration {
                n_rows: options.len(),
                basic,
                full,
                grid,
            },
        )?;
        self.finish(
            Stage::Calibrate,
            vec![ManifestEntry {
                key: "controller".into(),
                file: "calibrate/eve_selected.controller.toml".into(),
                seed: Some(ck.record.seed),
                epoch: Some(ck.record.epoch),
            }],
        )
    }

    /// Returns whether every verification check passed.
    fn agentic_eval(&self) -> Result<bool, StageError> {
        let (ds, emb) = self.load_data()?;
        let (ck, model) = self.selected_model(&emb)?;
        let sidecar = ControllerSidecar::load(require(
            &self.dir(Stage::Calibrate).join("eve_selected.controller.toml"),
        )?)?;
        let dir = self.stage_dir(Stage::AgenticEval)?;
        let index = RetrievalIndex::build(&emb, &ds.train);
        let (_, held_out) = controller_split(&ds.val);
        let held_out = &held_out[..held_out.len().min(self.cfg.agentic.max_examples)];
        let exec = self.executor(&model, &index);
        let options = run_episode_options(&exec, held_out, &sidecar.score, AGENTIC_ID_OFFSET, self.cfg.eval.batch_size)?;
        let traces = route_all(&options, &sidecar.thresholds);
        write_traces_jsonl(&dir.join("traces.jsonl"), &traces)?;
        let summary = summarize(&traces, &self.cfg.costs)?;
        let verification = verify(&summary, &self.cfg.verify);
        for c in &verification.checks {
            self.log(format_args!("  {:<28} {:<5} {:.4}", c.criterion, c.passed, c.value));
        }
        let passed = verification.all_passed();
        write_json(
            &dir.join("summary.json"),
            &AgenticOutput {
                selected_seed: ck.record.seed,
                thresholds: sidecar.thresholds,
                summary,
                verification,
            },
        )?;
        self.finish(
            Stage::AgenticEval,
            vec![ManifestEntry {
                key: "agentic".into(),
                file: "agentic/summary.json".into(),
                seed: Some(ck.record.seed),
                epoch: Some(ck.record.epoch),
            }],
        )?;
        Ok(passed)
    }

    // ---- reports ----

    fn report(&self) -> Result<RunOutcome, StageError> {
        let dir = self.stage_dir(Stage::Report)?;
        let mut missing = Vec::new();
        let mut entries = Vec::new();
        let mut verification_passed = None;

        let evals = self.evaluations().ok();
        let selection: Option<Selection> = read_json(&self.dir(Stage::Select).join("selection.json")).ok();
        let find = |family: Family, seed: u64, epoch: usize| {
            evals
                .as_ref()
                .and_then(|ev| ev.iter().find(|e| e.family == family && e.seed == seed && e.epoch == epoch))
        };
        let selected = selection.as_ref().and_then(|s| {
            Some((
                find(Family::Eve, s.outcome.selected_seed, s.eve_epoch)?,
                find(Family::Det, s.det_seed, s.det_epoch)?,
            ))
        });
        let src = |stage: Stage, seed: u64, epoch: usize| Source {
            stage: stage.name().into(),
            seed: Some(seed),
            epoch: Some(epoch),
        };

        let mut tables: Vec<Table> = Vec::new();
        if let Some((eve, det)) = selected {
            let mut t = Table::new("backbone_comparison", &["Model", "Loss", "CE", "PPL", "Acc.", "KL", "Local"]);
            for e in [eve, det] {
                let s = &e.summary;
                t.push(
                    vec![
                        e.family.label().into(),
                        e.val_objective.into(),
                        s.ce.into(),
                        s.ppl.into(),
                        s.acc.into(),
                        s.kl.into(),
                        s.local.into(),
                    ],
                    src(Stage::Evaluate, e.seed, e.epoch),
                )?;
            }
            tables.push(t);

            let mut t = Table::new(
                "uncertainty_summary",
                &["Model", "NLL", "ECE", "MI", "Epi.", "Flip", "CVaR-NLL", "Frac. High", "mu2"],
            );
            for e in [eve, det] {
                let s = &e.summary;
                t.push(
                    vec![
                        e.family.label().into(),
                        s.nll.into(),
                        s.ece.into(),
                        s.mi.into(),
                        s.epi.into(),
                        s.flip.into(),
                        s.cvar_nll.into(),
                        s.frac_too_high.into(),
                        s.mu2_mean_eval.into(),
                    ],
                    src(Stage::Evaluate, e.seed, e.epoch),
                )?;
            }
            tables.push(t);
        }
        if let Some(sel) = &selection {
            let mut t = Table::new(
                "seed_comparison",
                &["Seed", "Best epoch", "Val CE", "Val PPL", "Val Acc.", "Val KL", "Val Local"],
            );
            for r in &sel.per_seed {
                if let Some(e) = find(Family::Eve, r.seed, r.retained_epoch) {
                    let s = &e.summary;
                    t.push(
                        vec![
                            format!("EVE S{}", r.seed).into(),
                            r.retained_epoch.into(),
                            s.ce.into(),
                            s.ppl.into(),
                            s.acc.into(),
                            s.kl.into(),
                            s.local.into(),
                        ],
                        src(Stage::Select, r.seed, r.retained_epoch),
                    )?;
                }
            }
            if t.rows.len() == sel.per_seed.len() {
                tables.push(t);
            }
        }
        if let Ok(rows) = read_json::<Vec<SweepRow>>(&self.dir(Stage::Train).join("stage1_search.json")) {
            let key = rows.first().map_or("lambda_band_high", |r| r.key.as_str()).to_owned();
            let mut t = Table::new("stage1_search", &["Candidate", &key, "CE", "Local", "Frac. High", "mu2"]);
            for r in &rows {
                t.push(
                    vec![
                        r.candidate.clone().into(),
                        r.value.into(),
                        r.ce.into(),
                        r.local.into(),
                        r.frac_too_high.into(),
                        r.mu2.into(),
                    ],
                    src(Stage::Train, r.seed, r.epoch),
                )?;
            }
            tables.push(t);
        }
        if let Ok(a) = read_json::<AgenticOutput>(&self.dir(Stage::AgenticEval).join("summary.json")) {
            let epoch = selection.as_ref().map(|s| s.eve_epoch);
            let source = Source {
                stage: Stage::AgenticEval.name().into(),
                seed: Some(a.selected_seed),
                epoch,
            };
            let mut t = Table::new("agentic_summary", &["Metric", "Value"]);
            for (name, value) in summary_rows(&a.summary, a.selected_seed) {
                let cell = match value {
                    ReportValue::Int(i) => Cell::from(i),
                    ReportValue::Real(x) => Cell::from(x),
                };
                t.push(vec![name.into(), cell], source.clone())?;
            }
            tables.push(t);
            let mut t = Table::new("verification", &["Criterion", "Passed", "Value"]);
            for c in &a.verification.checks {
                t.push(vec![c.criterion.clone().into(), c.passed.into(), c.value.into()], source.clone())?;
            }
            tables.push(t);
            verification_passed = Some(a.verification.all_passed());
        }

        tables.sort_by_key(|t| REPORT_TABLES.iter().position(|n| *n == t.name));
        for name in REPORT_TABLES {
            match tables.iter().find(|t| t.name == name) {
                Some(t) => {
                    t.write(&dir)?;
                    for (i, s) in t.sources.iter().enumerate() {
                        entries.push(ManifestEntry {
                            key: format!("{name}.row{i}.{}", s.stage),
                            file: format!("reports/{name}.csv"),
                            seed: s.seed,
                            epoch: s.epoch,
                        });
                    }
                }
                None => {
                    for ext in ["csv", "json"] {
                        let stale = dir.join(format!("{name}.{ext}"));
                        if stale.exists() {
                            std::fs::remove_file(&stale).map_err(io_err(&stale))?;
                        }
                    }
                    missing.push(name.to_owned());
                }
            }
        }
        write_json(&dir.join("missing.json"), &missing)?;
        if !missing.is_empty() {
            self.log(format_args!("  missing tables: {}", missing.join(", ")));
        }
        self.finish(Stage::Report, entries)?;
        Ok(RunOutcome {
            verification_passed,
            missing_reports: missing,
        })
    }
}
