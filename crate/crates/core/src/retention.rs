//! Checkpoint retention: the task-safe filter, the structural ranking, the
//! cross-seed final pick, and the on-disk checkpoint container.

use std::cmp::Ordering;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::numeric::{Params, Tensor};
use crate::objective::RegulatorState;

pub const SELECTION_REASON: &str = "best_observed_final_validation";
pub const OVERRIDE_REASON: &str = "seed_override";

const MAGIC: &[u8; 8] = b"EVECKPT\0";
pub const CHECKPOINT_VERSION: u32 = 2;
// magic + version + total length + config digest
const HEADER_LEN: usize = 8 + 4 + 8 + 8;
const TRAILER_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum RetentionError {
    #[error("no candidates to {0}")]
    Empty(&'static str),
    #[error("invalid retention config: {0}")]
    InvalidConfig(String),
    #[error("seed override {0} matches no candidate")]
    UnknownSeed(u64),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: {actual} bytes, expected {expected}")]
    Truncated { actual: usize, expected: usize },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint config digest does not match stored config")]
    ConfigDigest,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Validation-view summary of one epoch of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub seed: u64,
    pub epoch: usize,
    pub ce: f64,
    pub acc: f64,
    pub local_recon: f64,
    pub frac_too_high: f64,
    pub mu2_mean_eval: f64,
    pub kl: f64,
    pub finite: bool,
    pub task_safe: bool,
}

impl EpochRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        seed: u64,
        epoch: usize,
        ce: f64,
        acc: f64,
        local_recon: f64,
        frac_too_high: f64,
        mu2_mean_eval: f64,
        kl: f64,
    ) -> Self {
        let finite = [ce, acc, local_recon, frac_too_high, mu2_mean_eval, kl]
            .iter()
            .all(|v| v.is_finite());
        Self {
            seed,
            epoch,
            ce,
            acc,
            local_recon,
            frac_too_high,
            mu2_mean_eval,
            kl,
            finite,
            task_safe: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetentionConfig {
    pub selection_ce_tolerance: f64,
    pub selection_local_ratio: f64,
    pub mu2_target: f64,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        Self {
            selection_ce_tolerance: 0.03,
            selection_local_ratio: 0.90,
            mu2_target: 0.10,
        }
    }
}

impl RetentionConfig {
    pub fn validate(&self) -> Result<(), RetentionError> {
        if !(self.selection_ce_tolerance >= 0.0) {
            return Err(RetentionError::InvalidConfig("selection_ce_tolerance must be >= 0".into()));
        }
        if !(self.selection_local_ratio > 0.0 && self.selection_local_ratio <= 1.0) {
            return Err(RetentionError::InvalidConfig("selection_local_ratio must be in (0, 1]".into()));
        }
        if !self.mu2_target.is_finite() {
            return Err(RetentionError::InvalidConfig("mu2_target must be finite".into()));
        }
        Ok(())
    }
}

/// Marks each record task-safe against the best CE and best local activity
/// of the same record set.
pub fn task_safe_filter(records: &mut [EpochRecord], cfg: &RetentionConfig) {
    let finite = || records.iter().filter(|r| r.finite);
    let best_ce = finite().map(|r| r.ce).fold(f64::INFINITY, f64::min);
    let best_local = finite().map(|r| r.local_recon).fold(f64::NEG_INFINITY, f64::max);
    for r in records.iter_mut() {
        r.task_safe = r.finite
            && r.ce <= best_ce + cfg.selection_ce_tolerance
            && r.local_recon >= cfg.selection_local_ratio * best_local;
    }
}

/// Structural ordering: safe first, then fewer too-high units, then `μ²`
/// closer to target, higher accuracy, lower CE, higher local activity.
pub fn compare_records(a: &EpochRecord, b: &EpochRecord, cfg: &RetentionConfig) -> Ordering {
    (!a.task_safe)
        .cmp(&!b.task_safe)
        .then_with(|| a.frac_too_high.total_cmp(&b.frac_too_high))
        .then_with(|| {
            (a.mu2_mean_eval - cfg.mu2_target)
                .abs()
                .total_cmp(&(b.mu2_mean_eval - cfg.mu2_target).abs())
        })
        .then_with(|| b.acc.total_cmp(&a.acc))
        .then_with(|| a.ce.total_cmp(&b.ce))
        .then_with(|| b.local_recon.total_cmp(&a.local_recon))
}

/// Indices of `records` in ranked order; fully tied records keep their
/// input order.
pub fn rank_order(records: &[EpochRecord], cfg: &RetentionConfig) -> Result<Vec<usize>, RetentionError> {
    if records.is_empty() {
        return Err(RetentionError::Empty("rank"));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&i, &j| compare_records(&records[i], &records[j], cfg));
    Ok(idx)
}

pub fn rank_candidates(records: &[EpochRecord], cfg: &RetentionConfig) -> Result<Vec<EpochRecord>, RetentionError> {
    Ok(rank_order(records, cfg)?.into_iter().map(|i| records[i].clone()).collect())
}

/// A stored model plus the record and state it was retained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub config: BackboneConfig,
    pub regulator: RegulatorState,
    pub record: EpochRecord,
    pub selection_reason: String,
}

fn final_key(a: &EpochRecord, b: &EpochRecord) -> Ordering {
    a.ce
        .total_cmp(&b.ce)
        .then_with(|| b.acc.total_cmp(&a.acc))
        .then_with(|| a.epoch.cmp(&b.epoch))
        .then_with(|| a.seed.cmp(&b.seed))
}

/// How the final checkpoint was chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub rule_seed: u64,
    pub selected_seed: u64,
    pub preferred_seed: Option<u64>,
    pub preference_applied: bool,
    pub selection_reason: String,
}

/// Lexicographic minimum of `(val_ce, -val_acc, epoch)` over the per-seed
/// retained candidates.
pub fn select_final_across_seeds(candidates: Vec<Checkpoint>) -> Result<Checkpoint, RetentionError> {
    let mut best = candidates
        .into_iter()
        .min_by(|a, b| final_key(&a.record, &b.record))
        .ok_or(RetentionError::Empty("select"))?;
    best.selection_reason = SELECTION_REASON.to_string();
    Ok(best)
}

/// The cross-seed rule, optionally replaced by an explicit seed choice.
/// Both the rule's pick and the applied pick are reported.
pub fn select_with_override(
    candidates: Vec<Checkpoint>,
    seed_override: Option<u64>,
) -> Result<(Checkpoint, SelectionOutcome), RetentionError> {
    let rule_seed = candidates
        .iter()
        .min_by(|a, b| final_key(&a.record, &b.record))
        .ok_or(RetentionError::Empty("select"))?
        .record
        .seed;
    let (mut chosen, reason) = match seed_override {
        None => (select_final_across_seeds(candidates)?, SELECTION_REASON),
        Some(seed) => {
            let c = candidates
                .into_iter()
                .find(|c| c.record.seed == seed)
                .ok_or(RetentionError::UnknownSeed(seed))?;
            (c, OVERRIDE_REASON)
        }
    };
    chosen.selection_reason = reason.to_string();
    let outcome = SelectionOutcome {
        rule_seed,
        selected_seed: chosen.record.seed,
        preferred_seed: seed_override,
        preference_applied: seed_override.is_some_and(|s| s != rule_seed),
        selection_reason: reason.to_string(),
    };
    Ok((chosen, outcome))
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    selection_reason: String,
    config: BackboneConfig,
    regulator: RegulatorState,
    record: EpochRecord,
}

fn digest64(bytes: &[u8]) -> u64 {
    let h = Sha256::digest(bytes);
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

fn config_digest(config: &BackboneConfig) -> u64 {
    digest64(toml::to_string(config).expect("config serializes").as_bytes())
}

/// Serializes with an explicit format version; only the current version
/// can be read back.
pub fn encode_checkpoint_version(ckpt: &Checkpoint, version: u32) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.params {
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = Metadata {
        selection_reason: ckpt.selection_reason.clone(),
        config: ckpt.config.clone(),
        regulator: ckpt.regulator.clone(),
        record: ckpt.record.clone(),
    };
    let meta = toml::to_string(&meta).expect("metadata serializes");
    body.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    body.extend_from_slice(meta.as_bytes());

    let total = HEADER_LEN + body.len() + TRAILER_LEN;
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(total as u64).to_le_bytes());
    out.extend_from_slice(&config_digest(&ckpt.config).to_le_bytes());
    out.extend_from_slice(&body);
    let sum = digest64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    encode_checkpoint_version(ckpt, CHECKPOINT_VERSION)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RetentionError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| RetentionError::Malformed("block runs past end of body".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, RetentionError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, RetentionError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, RetentionError> {
    if bytes.len() < HEADER_LEN + TRAILER_LEN {
        return Err(RetentionError::Truncated {
            actual: bytes.len(),
            expected: HEADER_LEN + TRAILER_LEN,
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(RetentionError::BadMagic);
    }
    let mut head = Cursor { buf: bytes, pos: 8 };
    let version = head.u32()?;
    let total = head.u64()? as usize;
    let stored_digest = head.u64()?;
    if bytes.len() < total {
        return Err(RetentionError::Truncated {
            actual: bytes.len(),
            expected: total,
        });
    }
    if bytes.len() != total {
        return Err(RetentionError::Checksum);
    }
    let (content, trailer) = bytes.split_at(total - TRAILER_LEN);
    if digest64(content) != u64::from_le_bytes(trailer.try_into().expect("8 bytes")) {
        return Err(RetentionError::Checksum);
    }
    if version != CHECKPOINT_VERSION {
        return Err(RetentionError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }

    let mut c = Cursor {
        buf: &content[HEADER_LEN..],
        pos: 0,
    };
    let mut params = Params::new();
    for _ in 0..c.u32()? {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|e| RetentionError::Malformed(e.to_string()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n.checked_mul(8).ok_or_else(|| RetentionError::Malformed("tensor too large".into()))?)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| RetentionError::Malformed(e.to_string()))?;
        params.insert(name, t);
    }
    let meta_len = c.u64()? as usize;
    let meta = std::str::from_utf8(c.take(meta_len)?).map_err(|e| RetentionError::Malformed(e.to_string()))?;
    let meta: Metadata = toml::from_str(meta).map_err(|e| RetentionError::Malformed(e.to_string()))?;
    if c.pos != c.buf.len() {
        return Err(RetentionError::Malformed("trailing bytes after metadata".into()));
    }
    if config_digest(&meta.config) != stored_digest {
        return Err(RetentionError::ConfigDigest);
    }
    Ok(Checkpoint {
        params,
        config: meta.config,
        regulator: meta.regulator,
        record: meta.record,
        selection_reason: meta.selection_reason,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), RetentionError> {
    std::fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, RetentionError> {
    decode_checkpoint(&std::fs::read(path)?)
}

pub fn write_records_csv(path: &Path, records: &[EpochRecord]) -> Result<(), RetentionError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<EpochRecord>, RetentionError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<_>, _>>()?)
}
