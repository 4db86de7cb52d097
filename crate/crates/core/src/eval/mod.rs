//! Image quality metrics, per-dataset reports and the authenticity harness.
//!
//! The harness checks three statistics of a restorer `f` on a clean set:
//! fidelity on clean inputs `PSNR(f(x), x)`, gain on degraded inputs
//! `PSNR(f(x_d), x) − PSNR(x_d, x)`, and drift under re-application
//! `PSNR(f(f(x_d)), f(x_d))`.

mod metrics;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use metrics::{mse, psnr, sharpness, ssim, PSNR_CAP_DB, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};

use crate::degrade::{
    degrade_sampled, gaussian_blur, image_stream, DegradationParams, DegradationRanges, DegradationSidecar,
};
use crate::diffusion::{restore, restore_many, restore_stream, OracleX0, Predictor};
use crate::error::{Error, Result};
use crate::imaging::{load_png, save_png, ImageTensor, RngStream};
use crate::parallel;
use crate::schedule::InferencePlan;

/// Something that maps degraded images to restored ones.
pub trait Restorer: Sync {
    fn name(&self) -> String;
    /// Restores `images[i]` using only `streams[i]`.
    fn restore_all(&self, images: &[ImageTensor], streams: &[RngStream]) -> Result<Vec<ImageTensor>>;
}

/// The diffusion sampler driven by a trained (or oracle) predictor.
pub struct DiffusionRestorer<'a> {
    pub model: &'a dyn Predictor,
    pub plan: InferencePlan,
    pub workers: usize,
    pub label: String,
}

impl Restorer for DiffusionRestorer<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn restore_all(&self, images: &[ImageTensor], streams: &[RngStream]) -> Result<Vec<ImageTensor>> {
        restore_many(self.model, images, &self.plan, streams, self.workers)
    }
}

/// `f(x) = x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRestorer;

impl Restorer for IdentityRestorer {
    fn name(&self) -> String {
        "identity".into()
    }

    fn restore_all(&self, images: &[ImageTensor], _streams: &[RngStream]) -> Result<Vec<ImageTensor>> {
        Ok(images.to_vec())
    }
}

/// Gaussian blur as a stand-in "restorer" that erases detail.
#[derive(Debug, Clone, Copy)]
pub struct BlurRestorer {
    pub sigma: f64,
}

impl Restorer for BlurRestorer {
    fn name(&self) -> String {
        format!("blur:{}", self.sigma)
    }

    fn restore_all(&self, images: &[ImageTensor], _streams: &[RngStream]) -> Result<Vec<ImageTensor>> {
        images.iter().map(|x| gaussian_blur(x, self.sigma)).collect()
    }
}

/// Runs the sampler with a denoiser that knows the answer: item `i` is
/// driven toward `truths[i]`.
#[derive(Debug, Clone)]
pub struct OracleRestorer {
    pub truths: Vec<ImageTensor>,
    pub plan: InferencePlan,
}

impl Restorer for OracleRestorer {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn restore_all(&self, images: &[ImageTensor], streams: &[RngStream]) -> Result<Vec<ImageTensor>> {
        if images.len() != self.truths.len() || streams.len() != images.len() {
            return Err(Error::Shape(format!(
                "oracle holds {} answers but was given {} images",
                self.truths.len(),
                images.len()
            )));
        }
        images
            .iter()
            .zip(&self.truths)
            .zip(streams)
            .map(|((x, truth), s)| {
                restore(&OracleX0::for_image(truth)?, x, &self.plan, *s)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                median: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        Self { mean, median, std }
    }
}

/// Scores of one restored image against its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub sharpness: f64,
    /// The same scores for the unrestored input.
    pub input_psnr_db: f64,
    pub input_ssim: f64,
    /// Learned perceptual distance; not computed.
    pub lpips: Option<f64>,
    /// Face-identity similarity; not computed.
    pub identity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub restorer: String,
    pub psnr_cap_db: f64,
    pub rows: Vec<MetricRow>,
    pub aggregates: BTreeMap<String, Aggregate>,
}

impl MetricReport {
    pub fn from_rows(restorer: impl Into<String>, rows: Vec<MetricRow>) -> Self {
        let mut aggregates = BTreeMap::new();
        let columns: [(&str, fn(&MetricRow) -> f64); 5] = [
            ("psnr_db", |r| r.psnr_db),
            ("ssim", |r| r.ssim),
            ("sharpness", |r| r.sharpness),
            ("input_psnr_db", |r| r.input_psnr_db),
            ("input_ssim", |r| r.input_ssim),
        ];
        for (name, get) in columns {
            let v: Vec<f64> = rows.iter().map(get).collect();
            aggregates.insert(name.to_string(), Aggregate::of(&v));
        }
        Self {
            restorer: restorer.into(),
            psnr_cap_db: PSNR_CAP_DB,
            rows,
            aggregates,
        }
    }

    pub fn mean(&self, column: &str) -> Option<f64> {
        self.aggregates.get(column).map(|a| a.mean)
    }

    /// Writes `metrics.csv` (one row per image) and `metrics.json` (aggregates).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("metrics.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let summary = serde_json::json!({
            "restorer": self.restorer,
            "psnr_cap_db": self.psnr_cap_db,
            "count": self.rows.len(),
            "aggregates": self.aggregates,
        });
        write_json(&dir.join("metrics.json"), &summary)
    }

    pub fn read_csv(path: &Path) -> Result<Vec<MetricRow>> {
        let mut r = csv::Reader::from_path(path)?;
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// A degraded input aligned with its reference.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    pub degraded: ImageTensor,
    pub target: ImageTensor,
}

/// Pairs described by a degradation sidecar living in `dir`.
pub fn sidecar_pairs(sidecar: &DegradationSidecar, dir: &Path) -> Result<Vec<EvalPair>> {
    sidecar
        .records
        .iter()
        .map(|r| {
            Ok(EvalPair {
                id: r.id.clone(),
                degraded: load_png(dir.join(&r.output))?,
                target: load_png(&r.source)?,
            })
        })
        .collect()
}

/// Restores each degraded input (stream keyed by id under `seed`) and scores it.
pub fn evaluate_dataset(restorer: &dyn Restorer, pairs: &[EvalPair], seed: u64, workers: usize) -> Result<MetricReport> {
    let inputs: Vec<ImageTensor> = pairs.iter().map(|p| p.degraded.clone()).collect();
    let streams: Vec<RngStream> = pairs.iter().map(|p| restore_stream(seed, &p.id)).collect();
    let restored = restorer.restore_all(&inputs, &streams)?;
    let scored: Vec<(&EvalPair, ImageTensor)> = pairs.iter().zip(restored).collect();
    let rows = parallel::map_chunks(&scored, 8, workers, |chunk| {
        chunk
            .iter()
            .map(|(p, out)| {
                Ok(MetricRow {
                    id: p.id.clone(),
                    psnr_db: psnr(out, &p.target)?,
                    ssim: ssim(out, &p.target)?,
                    sharpness: sharpness(out),
                    input_psnr_db: psnr(&p.degraded, &p.target)?,
                    input_ssim: ssim(&p.degraded, &p.target)?,
                    lpips: None,
                    identity: None,
                })
            })
            .collect()
    })?;
    Ok(MetricReport::from_rows(restorer.name(), rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuthThresholds {
    pub clean_db: f64,
    pub idempotence_db: f64,
}

impl Default for AuthThresholds {
    fn default() -> Self {
        Self {
            clean_db: 30.0,
            idempotence_db: 28.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthSeeds {
    /// Drives degradation parameters and noise per image.
    pub degrade: u64,
    /// Drives the sampler per image and per application.
    pub restore: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthenticityReport {
    pub restorer: String,
    pub n_images: usize,
    /// Mean `PSNR(f(x), x)`.
    pub clean_fidelity_db: f64,
    /// Mean `PSNR(f(x_d), x) − PSNR(x_d, x)`.
    pub restore_gain_db: f64,
    /// Mean `PSNR(f(f(x_d)), f(x_d))`.
    pub idempotence_db: f64,
    pub thresholds: AuthThresholds,
    pub psnr_cap_db: f64,
    pub pass: bool,
}

impl AuthenticityReport {
    pub fn judge(clean_fidelity_db: f64, restore_gain_db: f64, idempotence_db: f64, t: &AuthThresholds) -> bool {
        clean_fidelity_db >= t.clean_db && idempotence_db >= t.idempotence_db && restore_gain_db > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthRow {
    pub id: String,
    pub params: DegradationParams,
    pub clean_fidelity_db: f64,
    pub input_psnr_db: f64,
    pub restored_psnr_db: f64,
    pub idempotence_db: f64,
}

#[derive(Debug, Clone)]
pub struct AuthOutcome {
    pub report: AuthenticityReport,
    pub rows: Vec<AuthRow>,
    /// `(x_d, f(x_d), f(f(x_d)))` per image, in input order.
    pub images: Vec<[ImageTensor; 3]>,
}

/// Rows drawn in the comparison grid.
pub const GRID_ROWS: usize = 16;

/// Measures clean fidelity, restoration gain and idempotence of `restorer`.
pub fn authenticity_test(
    restorer: &dyn Restorer,
    clean: &[(String, ImageTensor)],
    ranges: &DegradationRanges,
    seeds: AuthSeeds,
    thresholds: AuthThresholds,
) -> Result<AuthOutcome> {
    if clean.is_empty() {
        return Err(Error::Parameter("authenticity test needs at least one clean image".into()));
    }
    let mut degraded = Vec::with_capacity(clean.len());
    let mut params = Vec::with_capacity(clean.len());
    for (id, x) in clean {
        let (xd, p) = degrade_sampled(x, ranges, image_stream(seeds.degrade, id))?;
        degraded.push(xd);
        params.push(p);
    }
    let streams = |pass: u64| -> Vec<RngStream> {
        clean
            .iter()
            .map(|(id, _)| restore_stream(seeds.restore, id).child(pass))
            .collect()
    };
    let originals: Vec<ImageTensor> = clean.iter().map(|(_, x)| x.clone()).collect();
    let on_clean = restorer.restore_all(&originals, &streams(0))?;
    let first = restorer.restore_all(&degraded, &streams(1))?;
    let second = restorer.restore_all(&first, &streams(2))?;

    let mut rows = Vec::with_capacity(clean.len());
    for (i, (id, x)) in clean.iter().enumerate() {
        rows.push(AuthRow {
            id: id.clone(),
            params: params[i],
            clean_fidelity_db: psnr(&on_clean[i], x)?,
            input_psnr_db: psnr(&degraded[i], x)?,
            restored_psnr_db: psnr(&first[i], x)?,
            idempotence_db: psnr(&second[i], &first[i])?,
        });
    }
    let mean = |f: fn(&AuthRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let clean_fidelity_db = mean(|r| r.clean_fidelity_db);
    let restore_gain_db = mean(|r| r.restored_psnr_db - r.input_psnr_db);
    let idempotence_db = mean(|r| r.idempotence_db);
    let report = AuthenticityReport {
        restorer: restorer.name(),
        n_images: rows.len(),
        clean_fidelity_db,
        restore_gain_db,
        idempotence_db,
        thresholds,
        psnr_cap_db: PSNR_CAP_DB,
        pass: AuthenticityReport::judge(clean_fidelity_db, restore_gain_db, idempotence_db, &thresholds),
    };
    let images = degraded
        .into_iter()
        .zip(first)
        .zip(second)
        .map(|((a, b), c)| [a, b, c])
        .collect();
    Ok(AuthOutcome { report, rows, images })
}

impl AuthOutcome {
    /// Writes `authenticity.json`, `authenticity.csv` and `grid.png`
    /// (columns: degraded input, f(x_d), f(f(x_d)), ground truth).
    pub fn write(&self, dir: &Path, clean: &[(String, ImageTensor)]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("authenticity.json"), &self.report)?;
        let csv_path = dir.join("authenticity.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record([
            "id",
            "sigma",
            "r",
            "delta",
            "q",
            "clean_fidelity_db",
            "input_psnr_db",
            "restored_psnr_db",
            "idempotence_db",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.id.clone(),
                r.params.sigma.to_string(),
                r.params.r.to_string(),
                r.params.delta.to_string(),
                r.params.q.to_string(),
                r.clean_fidelity_db.to_string(),
                r.input_psnr_db.to_string(),
                r.restored_psnr_db.to_string(),
                r.idempotence_db.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let grid = self.grid(clean)?;
        save_png(&grid, dir.join("grid.png"))
    }

    pub fn grid(&self, clean: &[(String, ImageTensor)]) -> Result<ImageTensor> {
        let rows: Vec<ImageTensor> = self
            .images
            .iter()
            .zip(clean)
            .take(GRID_ROWS)
            .map(|([xd, f1, f2], (_, x))| ImageTensor::hstack(&[xd, f1, f2, x]))
            .collect::<Result<_>>()?;
        ImageTensor::vstack(&rows)
    }
}
