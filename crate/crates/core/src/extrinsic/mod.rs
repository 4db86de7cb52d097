//! Corpus enhancement with a trained restorer and the second training round
//! built on the enhanced corpus.
//!
//! Round 1 trains on pairs whose target is the enhanced image `x* = f(x)` and
//! whose condition is still degraded from the original `x`.

mod manifest;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use manifest::{
    sha256_file, sha256_hex, toy_id, write_record, write_toy_corpus, DatasetManifest, ImageSource, ManifestRecord,
    MANIFEST_VERSION,
};

use crate::degrade::{degrade_sampled, image_stream, DegradationRanges};
use crate::denoiser::DenoiserCheckpoint;
use crate::diffusion::{restore_many, restore_stream, train, LossConfig, Predictor, TrainConfig, TrainHooks, TrainOutcome, TrainPair};
use crate::error::{Error, Result};
use crate::schedule::{make_inference_plan, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    /// Condition degraded from the original image.
    #[default]
    ConditionFromOriginal,
    /// Condition degraded from the enhanced image.
    ConditionFromEnhanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtrinsicConfig {
    /// Sampling steps used for enhancement.
    pub steps: usize,
    pub enhancement_seed: u64,
    pub pairing_mode: PairingMode,
}

impl Default for ExtrinsicConfig {
    fn default() -> Self {
        Self {
            steps: crate::diffusion::DEFAULT_STEPS,
            enhancement_seed: 0,
            pairing_mode: PairingMode::ConditionFromOriginal,
        }
    }
}

/// Images restored between journal flushes.
const ENHANCE_BATCH: usize = 64;
const JOURNAL: &str = "enhance.journal.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JournalEntry {
    record: ManifestRecord,
    parent_sha256: String,
}

/// A predictor together with the identity it is recorded under.
pub struct Enhancer<'a> {
    pub model: &'a dyn Predictor,
    pub training_round: u32,
    pub checkpoint_id: String,
}

impl<'a> From<&'a DenoiserCheckpoint> for Enhancer<'a> {
    fn from(ckpt: &'a DenoiserCheckpoint) -> Self {
        Self {
            model: ckpt,
            training_round: ckpt.training_round,
            checkpoint_id: ckpt.id(),
        }
    }
}

/// Restores every image of `manifest` into `out_dir/round_<r+1>/` and writes
/// `out_dir/manifest.json`. Interrupted runs resume: images already finished
/// with matching checksums are not recomputed.
pub fn enhance_dataset(
    ckpt: &DenoiserCheckpoint,
    manifest: &DatasetManifest,
    schedule: &NoiseSchedule,
    cfg: &ExtrinsicConfig,
    out_dir: &Path,
    workers: usize,
) -> Result<DatasetManifest> {
    enhance_with(&Enhancer::from(ckpt), manifest, schedule, cfg, out_dir, workers)
}

pub fn enhance_with(
    enhancer: &Enhancer<'_>,
    manifest: &DatasetManifest,
    schedule: &NoiseSchedule,
    cfg: &ExtrinsicConfig,
    out_dir: &Path,
    workers: usize,
) -> Result<DatasetManifest> {
    if enhancer.training_round != manifest.round {
        return Err(Error::Config(format!(
            "a round-{} model cannot enhance a round-{} corpus",
            enhancer.training_round, manifest.round
        )));
    }
    manifest.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if same_dir(out_dir, &manifest.root) {
        return Err(Error::Config("enhancement output must not share the input corpus directory".into()));
    }
    let plan = make_inference_plan(schedule, cfg.steps)?;
    let round = manifest.round + 1;
    let done = resume_state(out_dir, &enhancer.checkpoint_id)?;
    let journal_path = out_dir.join(JOURNAL);
    let mut journal = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&journal_path)
        .map_err(|e| Error::io(&journal_path, e))?;

    let mut records: HashMap<String, ManifestRecord> = HashMap::new();
    let mut todo = Vec::new();
    for rec in &manifest.images {
        let parent_sha = sha256_file(&manifest.resolve(rec))?;
        if parent_sha != rec.sha256 {
            return Err(Error::Integrity(format!("{}: file changed since the manifest was written", rec.id)));
        }
        if let Some(prev) = done.get(&rec.id) {
            let path = out_dir.join(&prev.record.path);
            if prev.parent_sha256 == parent_sha && path.exists() && sha256_file(&path)? == prev.record.sha256 {
                records.insert(rec.id.clone(), prev.record.clone());
                continue;
            }
        }
        todo.push((rec, parent_sha));
    }
    if !records.is_empty() {
        log::info!("{} of {} images already enhanced", records.len(), manifest.len());
    }

    for chunk in todo.chunks(ENHANCE_BATCH) {
        let inputs = chunk
            .iter()
            .map(|(r, _)| manifest.load_image(r))
            .collect::<Result<Vec<_>>>()?;
        let streams: Vec<_> = chunk
            .iter()
            .map(|(r, _)| restore_stream(cfg.enhancement_seed, &r.id))
            .collect();
        let restored = restore_many(enhancer.model, &inputs, &plan, &streams, workers)?;
        for ((parent, parent_sha), img) in chunk.iter().zip(&restored) {
            let rec = write_record(
                out_dir,
                &format!("round_{round}/{}.png", parent.id),
                img,
                ManifestRecord {
                    id: parent.id.clone(),
                    path: String::new(),
                    sha256: String::new(),
                    source: ImageSource::Enhanced,
                    parent_id: Some(parent.id.clone()),
                    enhancer_checkpoint_id: Some(enhancer.checkpoint_id.clone()),
                },
            )?;
            let entry = JournalEntry {
                record: rec.clone(),
                parent_sha256: parent_sha.clone(),
            };
            writeln!(journal, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&journal_path, e))?;
            records.insert(parent.id.clone(), rec);
        }
        journal.flush().map_err(|e| Error::io(&journal_path, e))?;
    }

    let mut out = DatasetManifest::new(round, out_dir);
    out.images = manifest
        .images
        .iter()
        .map(|r| records.remove(&r.id).expect("every record enhanced"))
        .collect();
    out.save(out_dir.join("manifest.json"))?;
    let _ = std::fs::remove_file(&journal_path);
    Ok(out)
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

/// Records already produced by `checkpoint_id` in a previous (possibly
/// interrupted) run into `out_dir`.
fn resume_state(out_dir: &Path, checkpoint_id: &str) -> Result<HashMap<String, JournalEntry>> {
    let mut done = HashMap::new();
    let journal_path = out_dir.join(JOURNAL);
    if journal_path.exists() {
        let text = std::fs::read_to_string(&journal_path).map_err(|e| Error::io(&journal_path, e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            // a torn final line from a crash is simply recomputed
            if let Ok(entry) = serde_json::from_str::<JournalEntry>(line) {
                done.insert(entry.record.id.clone(), entry);
            }
        }
    }
    done.retain(|_, e| e.record.enhancer_checkpoint_id.as_deref() == Some(checkpoint_id));
    Ok(done)
}

/// Training pairs for the round after `original`: target from `enhanced`,
/// condition source chosen by `mode`.
pub fn round_pairs(original: &DatasetManifest, enhanced: &DatasetManifest, mode: PairingMode) -> Result<Vec<TrainPair>> {
    if enhanced.round != original.round + 1 {
        return Err(Error::Manifest(format!(
            "enhanced manifest is round {}, expected {}",
            enhanced.round,
            original.round + 1
        )));
    }
    if enhanced.len() != original.len() {
        return Err(Error::Manifest(format!(
            "enhanced corpus has {} images, original has {}",
            enhanced.len(),
            original.len()
        )));
    }
    let mut used = std::collections::HashSet::new();
    enhanced
        .images
        .iter()
        .map(|rec| {
            let parent_id = rec
                .parent_id
                .as_deref()
                .ok_or_else(|| Error::Manifest(format!("{} has no parent", rec.id)))?;
            let parent = original
                .get(parent_id)
                .ok_or_else(|| Error::Manifest(format!("{}: parent {parent_id} not in the original corpus", rec.id)))?;
            if !used.insert(parent_id) {
                return Err(Error::Manifest(format!("parent {parent_id} is claimed twice")));
            }
            let target = enhanced.load_image(rec)?;
            let source = match mode {
                PairingMode::ConditionFromOriginal => original.load_image(parent)?,
                PairingMode::ConditionFromEnhanced => target.clone(),
            };
            Ok(TrainPair {
                id: rec.id.clone(),
                target,
                source,
            })
        })
        .collect()
}

/// Everything `extrinsic_round` needs besides the corpora.
pub struct RoundSetup<'a> {
    pub ranges: &'a DegradationRanges,
    pub schedule: &'a NoiseSchedule,
    pub train: &'a TrainConfig,
    pub loss: &'a LossConfig,
    pub hooks: &'a TrainHooks,
    pub pairing_mode: PairingMode,
}

/// Starts a fresh optimiser from the previous round's weights; the returned
/// checkpoint carries the enhanced corpus's round number.
pub fn warm_start(prev: &DenoiserCheckpoint, round: u32) -> DenoiserCheckpoint {
    let mut ckpt = prev.clone();
    ckpt.training_round = round;
    ckpt.step_count = 0;
    ckpt.optimizer = None;
    ckpt
}

pub fn extrinsic_round(
    prev: &DenoiserCheckpoint,
    original: &DatasetManifest,
    enhanced: &DatasetManifest,
    setup: &RoundSetup<'_>,
) -> Result<TrainOutcome> {
    if prev.training_round != original.round {
        return Err(Error::Config(format!(
            "round-{} checkpoint does not belong to the round-{} corpus",
            prev.training_round, original.round
        )));
    }
    let pairs = round_pairs(original, enhanced, setup.pairing_mode)?;
    let start = warm_start(prev, enhanced.round);
    train(start, &pairs, setup.ranges, setup.schedule, setup.train, setup.loss, setup.hooks)
}

/// Copies `manifest` into `out_dir`, replacing a deterministic `fraction` of
/// the images with degraded versions. Returns the new round-0 manifest and
/// the contaminated ids.
pub fn contaminate_corpus(
    manifest: &DatasetManifest,
    fraction: f64,
    ranges: &DegradationRanges,
    seed: u64,
    out_dir: &Path,
) -> Result<(DatasetManifest, Vec<String>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Parameter(format!("fraction must lie in [0, 1], got {fraction}")));
    }
    let n = manifest.len();
    let k = (fraction * n as f64).round() as usize;
    let picks = rand::seq::index::sample(&mut crate::imaging::RngStream::new(seed, 0xc0_47).rng(), n, k);
    let mut chosen = vec![false; n];
    for i in picks.iter() {
        chosen[i] = true;
    }
    let mut out = DatasetManifest::new(manifest.round, out_dir);
    let mut ids = Vec::new();
    for (rec, dirty) in manifest.images.iter().zip(chosen) {
        let mut img = manifest.load_image(rec)?;
        if dirty {
            img = degrade_sampled(&img, ranges, image_stream(seed, &rec.id))?.0;
            ids.push(rec.id.clone());
        }
        out.images.push(write_record(out_dir, &format!("images/{}.png", rec.id), &img, rec.clone())?);
    }
    out.save(out_dir.join("manifest.json"))?;
    Ok((out, ids))
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}
