//! Synthetic degradation: blur, downsample, additive noise, JPEG, and a
//! bilinear resize back to the source resolution.
//!
//! ```text
//! x_d = up( JPEG_q( clip( down_r(x ⊛ k_σ) + n_δ ) ) )
//! ```
//!
//! Every random draw comes from the [`RngStream`] passed in, so a recorded
//! `(params, seed, stream)` triple replays an image bit-exactly.

use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extrinsic::DatasetManifest;
use crate::imaging::png::{color_type, from_dynamic, to_bytes};
use crate::imaging::{load_png, save_png, ImageTensor, RngStream, MIN_SIDE};

pub const KERNEL_RULE: &str = "side = 2*ceil(3*sigma)+1, min 3";
pub const JPEG_CODEC: &str = "image-rs baseline JPEG encoder / zune-jpeg decoder";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationParams {
    /// Blur standard deviation in pixels.
    pub sigma: f64,
    /// Downsampling factor (real, ≥ 1).
    pub r: f64,
    /// Noise standard deviation on the 0–255 scale.
    pub delta: f64,
    /// JPEG quality.
    pub q: u8,
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Parameter(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.r >= 1.0 && self.r.is_finite()) {
            return Err(Error::Parameter(format!("r must be >= 1, got {}", self.r)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Parameter(format!("delta must be >= 0, got {}", self.delta)));
        }
        if !(1..=100).contains(&self.q) {
            return Err(Error::Parameter(format!("q must lie in 1..=100, got {}", self.q)));
        }
        Ok(())
    }
}

/// Closed sampling interval `[lo, hi]`.
pub type Interval = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationRanges {
    pub sigma: Interval,
    pub r: Interval,
    pub delta: Interval,
    pub q: Interval,
}

impl Default for DegradationRanges {
    fn default() -> Self {
        Self {
            sigma: [0.2, 10.0],
            r: [1.0, 8.0],
            delta: [0.0, 15.0],
            q: [50.0, 100.0],
        }
    }
}

impl DegradationRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("sigma", self.sigma),
            ("r", self.r),
            ("delta", self.delta),
            ("q", self.q),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Parameter(format!("range for {name} is invalid: [{lo}, {hi}]")));
            }
        }
        if self.sigma[0] <= 0.0 || self.r[0] < 1.0 || self.delta[0] < 0.0 || self.q[0] < 1.0 || self.q[1] > 100.0 {
            return Err(Error::Parameter("ranges admit invalid degradation parameters".into()));
        }
        Ok(())
    }

    /// A single fixed setting expressed as degenerate ranges.
    pub fn fixed(p: DegradationParams) -> Self {
        Self {
            sigma: [p.sigma; 2],
            r: [p.r; 2],
            delta: [p.delta; 2],
            q: [p.q as f64; 2],
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, [lo, hi]: Interval) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

pub fn sample_degradation_params(ranges: &DegradationRanges, rng: RngStream) -> Result<DegradationParams> {
    ranges.validate()?;
    let mut g = rng.rng();
    let sigma = uniform(&mut g, ranges.sigma);
    let r = uniform(&mut g, ranges.r);
    let delta = uniform(&mut g, ranges.delta);
    let q = uniform(&mut g, ranges.q).round().clamp(1.0, 100.0) as u8;
    Ok(DegradationParams { sigma, r, delta, q })
}

/// Square, odd-sized, normalized Gaussian kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2d {
    pub side: usize,
    pub weights: Vec<f64>,
}

impl Kernel2d {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.side + x]
    }
}

fn kernel_radius(sigma: f64) -> usize {
    ((3.0 * sigma).ceil() as usize).max(1)
}

pub fn gaussian_kernel(sigma: f64) -> Result<Kernel2d> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    let rad = kernel_radius(sigma) as isize;
    let side = (2 * rad + 1) as usize;
    let mut weights = Vec::with_capacity(side * side);
    for dy in -rad..=rad {
        for dx in -rad..=rad {
            weights.push((-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(Kernel2d { side, weights })
}

/// 1-D factor of [`gaussian_kernel`]; the 2-D kernel is its outer product.
pub(crate) fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let rad = kernel_radius(sigma) as isize;
    let mut w: Vec<f64> = (-rad..=rad)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Reflect-101 index (`dcb|abcd|cba`), valid for any offset.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(x: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
    let k = gaussian_kernel_1d(sigma);
    let rad = (k.len() / 2) as isize;
    let (h, w, c) = x.shape();
    let src = x.data();
    let mut tmp = vec![0.0f64; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, kw) in k.iter().enumerate() {
                    let sx = reflect(xx as isize + j as isize - rad, w);
                    acc += kw * src[(y * w + sx) * c + ch] as f64;
                }
                tmp[(y * w + xx) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, kw) in k.iter().enumerate() {
                    let sy = reflect(y as isize + j as isize - rad, h);
                    acc += kw * tmp[(sy * w + xx) * c + ch];
                }
                out[(y * w + xx) * c + ch] = acc as f32;
            }
        }
    }
    ImageTensor::new(h, w, c, out)
}

/// Bilinear resize with half-pixel centres (no antialiasing).
pub fn resize_bilinear(x: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    let (h, w, c) = x.shape();
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = coords(out_h, h);
    let xs = coords(out_w, w);
    let src = x.data();
    let px = |y: usize, xx: usize, ch: usize| src[(y * w + xx) * c + ch] as f64;
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = px(y0, x0, ch) * (1.0 - fx) + px(y0, x1, ch) * fx;
                let bot = px(y1, x0, ch) * (1.0 - fx) + px(y1, x1, ch) * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    ImageTensor::new(out_h, out_w, c, out)
}

/// Low-resolution size for factor `r`: round-half-up, floored at 8.
pub fn low_res_dims(h: usize, w: usize, r: f64) -> (usize, usize) {
    let dim = |n: usize| ((n as f64 / r + 0.5).floor() as usize).max(MIN_SIDE);
    (dim(h), dim(w))
}

pub fn jpeg_round_trip(x: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(Cursor::new(&mut buf), quality)
        .encode(&to_bytes(x), x.width() as u32, x.height() as u32, color_type(x))
        .map_err(|e| Error::Degradation(format!("jpeg encode: {e}")))?;
    let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)
        .map_err(|e| Error::Degradation(format!("jpeg decode: {e}")))?;
    let out = from_dynamic(decoded)?;
    if out.shape() != x.shape() {
        return Err(Error::Degradation(format!(
            "jpeg codec changed shape {:?} -> {:?}",
            x.shape(),
            out.shape()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DegradeOptions {
    /// Skip the JPEG stage (test hook for checking the noise stage exactly).
    pub bypass_jpeg: bool,
}

pub fn degrade(x: &ImageTensor, p: &DegradationParams, rng: RngStream) -> Result<ImageTensor> {
    degrade_with(x, p, rng, DegradeOptions::default())
}

pub fn degrade_with(
    x: &ImageTensor,
    p: &DegradationParams,
    rng: RngStream,
    opts: DegradeOptions,
) -> Result<ImageTensor> {
    p.validate()?;
    let (h, w, _) = x.shape();
    let (lh, lw) = low_res_dims(h, w, p.r);
    if lh > h || lw > w {
        return Err(Error::Degradation(format!(
            "{h}x{w} input cannot be reduced to the {lh}x{lw} low-resolution stage"
        )));
    }
    let blurred = gaussian_blur(x, p.sigma)?;
    let mut low = resize_bilinear(&blurred, lh, lw)?;
    if p.delta > 0.0 {
        let std = p.delta / 255.0;
        let mut g = rng.rng();
        for v in low.data_mut() {
            *v = (*v as f64 + std * crate::imaging::rng::normal(&mut g)) as f32;
        }
    }
    low.clip();
    let low = if opts.bypass_jpeg { low } else { jpeg_round_trip(&low, p.q)? };
    let mut out = resize_bilinear(&low, h, w)?;
    out.clip();
    Ok(out)
}

/// Sidecar entry that pins down one degraded image exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationRecord {
    pub id: String,
    pub source: String,
    pub output: String,
    pub params: DegradationParams,
    pub seed: u64,
    pub stream_id: u64,
    pub kernel_rule: String,
    pub jpeg_codec: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSidecar {
    pub version: u32,
    pub ranges: DegradationRanges,
    pub seed: u64,
    pub records: Vec<DegradationRecord>,
}

/// The per-image stream used when a corpus is degraded with a global seed:
/// params come from `stream.child(0)`, noise from `stream.child(1)`.
pub fn image_stream(seed: u64, id: &str) -> RngStream {
    RngStream::new(seed, 0).keyed(id)
}

/// Draws params for image `id` and degrades it; returns the image and its record stream.
pub fn degrade_sampled(
    x: &ImageTensor,
    ranges: &DegradationRanges,
    stream: RngStream,
) -> Result<(ImageTensor, DegradationParams)> {
    let p = sample_degradation_params(ranges, stream.child(0))?;
    let out = degrade(x, &p, stream.child(1))?;
    Ok((out, p))
}

pub const SIDECAR_VERSION: u32 = 1;

impl DegradationSidecar {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sc: Self = serde_json::from_str(&text)?;
        if sc.version != SIDECAR_VERSION {
            return Err(Error::Manifest(format!("unsupported sidecar version {}", sc.version)));
        }
        Ok(sc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Degrades every image of `manifest` with per-image streams under `seed`,
/// writing `out_dir/images/<id>.png` and `out_dir/sidecar.json`.
pub fn degrade_corpus(
    manifest: &DatasetManifest,
    ranges: &DegradationRanges,
    seed: u64,
    out_dir: &Path,
) -> Result<DegradationSidecar> {
    ranges.validate()?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::with_capacity(manifest.len());
    for rec in &manifest.images {
        let x = manifest.load_image(rec)?;
        let stream = image_stream(seed, &rec.id);
        let (xd, params) = degrade_sampled(&x, ranges, stream)?;
        let output = format!("images/{}.png", rec.id);
        save_png(&xd, out_dir.join(&output))?;
        records.push(DegradationRecord {
            id: rec.id.clone(),
            source: absolute(&manifest.resolve(rec))?,
            output,
            params,
            seed: stream.seed,
            stream_id: stream.stream_id,
            kernel_rule: KERNEL_RULE.into(),
            jpeg_codec: JPEG_CODEC.into(),
        });
    }
    let sidecar = DegradationSidecar {
        version: SIDECAR_VERSION,
        ranges: *ranges,
        seed,
        records,
    };
    sidecar.save(out_dir.join("sidecar.json"))?;
    Ok(sidecar)
}

/// Re-creates every degraded image of a sidecar from its recorded
/// parameters and stream, writing them (and a copy of the sidecar) under `out_dir`.
pub fn replay_sidecar(sidecar: &DegradationSidecar, out_dir: &Path) -> Result<()> {
    for rec in &sidecar.records {
        let x = load_png(&rec.source)?;
        let stream = RngStream::new(rec.seed, rec.stream_id);
        let xd = degrade(&x, &rec.params, stream.child(1))?;
        let path = out_dir.join(&rec.output);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_png(&xd, &path)?;
    }
    sidecar.save(out_dir.join("sidecar.json"))
}

fn absolute(p: &Path) -> Result<String> {
    let abs = p.canonicalize().map_err(|e| Error::io(p, e))?;
    Ok(abs.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{gen_toy_face, ToyFaceSpec};

    fn psnr(a: &ImageTensor, b: &ImageTensor) -> f64 {
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
            .sum::<f64>()
            / a.data().len() as f64;
        10.0 * (1.0 / mse).log10()
    }

    fn face(seed: u64) -> ImageTensor {
        gen_toy_face(&ToyFaceSpec::default(), RngStream::new(seed, 0)).unwrap()
    }

    #[test]
    fn kernel_normalized_and_symmetric() {
        for &s in &[0.2, 0.5, 1.0, 2.7, 10.0] {
            let k = gaussian_kernel(s).unwrap();
            assert_eq!(k.side % 2, 1);
            assert_eq!(k.side, (2 * (3.0 * s as f64).ceil() as usize + 1).max(3));
            let sum: f64 = k.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            let n = k.side;
            for y in 0..n {
                for x in 0..n {
                    let v = k.at(y, x);
                    assert_eq!(v, k.at(y, n - 1 - x));
                    assert_eq!(v, k.at(n - 1 - y, x));
                    assert_eq!(v, k.at(x, y));
                }
            }
        }
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_kernel(-1.0).is_err());
    }

    #[test]
    fn narrow_kernel_is_nearly_a_delta() {
        // direct evaluation on the 3x3 grid: centre 1/(1 + 4e^{-12.5} + 4e^{-25})
        let e = (-1.0f64 / (2.0 * 0.04)).exp();
        let oracle = 1.0 / (1.0 + 4.0 * e + 4.0 * e * e);
        let k = gaussian_kernel(0.2).unwrap();
        assert_eq!(k.side, 3);
        assert!((k.at(1, 1) - oracle).abs() < 1e-15);
        assert!(k.at(1, 1) > 0.96);
    }

    #[test]
    fn separable_blur_matches_direct_2d_convolution() {
        let x = face(4);
        let sigma = 1.3;
        let k = gaussian_kernel(sigma).unwrap();
        let rad = (k.side / 2) as isize;
        let fast = gaussian_blur(&x, sigma).unwrap();
        let (h, w, c) = x.shape();
        for &(y, xx) in &[(0usize, 0usize), (5, 17), (31, 31), (16, 2)] {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in -rad..=rad {
                    for dx in -rad..=rad {
                        let sy = reflect(y as isize + dy, h);
                        let sx = reflect(xx as isize + dx, w);
                        acc += k.at((dy + rad) as usize, (dx + rad) as usize) * x.get(sy, sx, ch) as f64;
                    }
                }
                assert!((acc - fast.get(y, xx, ch) as f64).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn reflect_handles_far_offsets() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-9, 5), 1);
        assert_eq!(reflect(13, 5), 3);
        for i in -100..100 {
            assert!(reflect(i, 8) < 8);
        }
    }

    #[test]
    fn default_ranges_respected() {
        let ranges = DegradationRanges::default();
        for i in 0..2000 {
            let p = sample_degradation_params(&ranges, RngStream::new(9, i)).unwrap();
            assert!((0.2..=10.0).contains(&p.sigma));
            assert!((1.0..=8.0).contains(&p.r));
            assert!((0.0..=15.0).contains(&p.delta));
            assert!((50..=100).contains(&p.q));
        }
    }

    #[test]
    fn degenerate_ranges_give_constants() {
        let p = DegradationParams {
            sigma: 1.5,
            r: 2.0,
            delta: 4.0,
            q: 77,
        };
        let got = sample_degradation_params(&DegradationRanges::fixed(p), RngStream::new(1, 1)).unwrap();
        assert_eq!(got, p);
    }

    #[test]
    fn sampled_means_near_midpoints() {
        let ranges = DegradationRanges::default();
        let n = 10_000;
        let draws: Vec<DegradationParams> = (0..n)
            .map(|i| sample_degradation_params(&ranges, RngStream::new(21, i)).unwrap())
            .collect();
        let check = |vals: Vec<f64>, [lo, hi]: Interval| {
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            let mid = 0.5 * (lo + hi);
            assert!((mean - mid).abs() < 3.0 * se, "mean {mean} vs {mid} (se {se})");
        };
        check(draws.iter().map(|p| p.sigma).collect(), ranges.sigma);
        check(draws.iter().map(|p| p.r).collect(), ranges.r);
        check(draws.iter().map(|p| p.delta).collect(), ranges.delta);
        check(draws.iter().map(|p| p.q as f64).collect(), ranges.q);
    }

    #[test]
    fn near_identity_setting_is_high_fidelity() {
        let p = DegradationParams {
            sigma: 0.2,
            r: 1.0,
            delta: 0.0,
            q: 100,
        };
        for seed in 0..10 {
            let x = face(seed);
            let y = degrade(&x, &p, RngStream::new(seed, 1)).unwrap();
            assert!(psnr(&x, &y) >= 35.0, "{}", psnr(&x, &y));
        }
    }

    #[test]
    fn heavy_downsampling_shape_rule() {
        let spec = ToyFaceSpec {
            size: 64,
            ..ToyFaceSpec::default()
        };
        let x = gen_toy_face(&spec, RngStream::new(0, 0)).unwrap();
        assert_eq!(low_res_dims(64, 64, 8.0), (8, 8));
        assert_eq!(low_res_dims(32, 32, 8.0), (8, 8));
        assert_eq!(low_res_dims(32, 32, 3.0), (11, 11));
        let p = DegradationParams {
            sigma: 1.0,
            r: 8.0,
            delta: 3.0,
            q: 80,
        };
        let y = degrade(&x, &p, RngStream::new(0, 1)).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.is_valid());
    }

    #[test]
    fn deterministic_given_stream() {
        let x = face(2);
        let p = DegradationParams {
            sigma: 2.0,
            r: 3.3,
            delta: 9.0,
            q: 60,
        };
        let a = degrade(&x, &p, RngStream::new(5, 5)).unwrap();
        let b = degrade(&x, &p, RngStream::new(5, 5)).unwrap();
        assert_eq!(a.data(), b.data());
        let c = degrade(&x, &p, RngStream::new(5, 6)).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn invalid_params_rejected() {
        let x = face(0);
        let bad = DegradationParams {
            sigma: 1.0,
            r: 0.5,
            delta: 1.0,
            q: 90,
        };
        assert!(matches!(degrade(&x, &bad, RngStream::new(0, 0)), Err(Error::Parameter(_))));
        let bad_q = DegradationParams { r: 1.0, q: 0, ..bad };
        assert!(degrade(&x, &bad_q, RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn more_noise_never_helps() {
        for seed in 0..5 {
            let x = face(seed);
            let scores: Vec<f64> = [0.0, 5.0, 10.0, 15.0]
                .iter()
                .map(|&delta| {
                    let p = DegradationParams {
                        sigma: 0.2,
                        r: 1.0,
                        delta,
                        q: 100,
                    };
                    psnr(&x, &degrade(&x, &p, RngStream::new(seed, 3)).unwrap())
                })
                .collect();
            for w in scores.windows(2) {
                assert!(w[1] <= w[0] + 0.3, "{scores:?}");
            }
        }
    }

    #[test]
    fn noise_only_psnr_matches_theory() {
        for &delta in &[5.0, 10.0, 15.0] {
            let p = DegradationParams {
                sigma: 0.2,
                r: 1.0,
                delta,
                q: 100,
            };
            let opts = DegradeOptions { bypass_jpeg: true };
            let mut total = 0.0;
            for seed in 0..8 {
                let x = face(seed);
                let y = degrade_with(&x, &p, RngStream::new(seed, 3), opts).unwrap();
                total += psnr(&x, &y);
            }
            let got = total / 8.0;
            let expect = 20.0 * (255.0 / delta as f64).log10();
            assert!((got - expect).abs() <= 1.0, "delta {delta}: {got} vs {expect}");
        }
    }

    #[test]
    fn corpus_degradation_replays_bit_exactly() {
        let src = tempfile::tempdir().unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = crate::extrinsic::write_toy_corpus(src.path(), 5, &ToyFaceSpec::default(), 2).unwrap();
        let sc = degrade_corpus(&m, &DegradationRanges::default(), 17, a.path()).unwrap();
        assert_eq!(sc.records.len(), 5);
        let loaded = DegradationSidecar::load(a.path().join("sidecar.json")).unwrap();
        assert_eq!(loaded, sc);
        replay_sidecar(&loaded, b.path()).unwrap();
        for r in &sc.records {
            let x = std::fs::read(a.path().join(&r.output)).unwrap();
            let y = std::fs::read(b.path().join(&r.output)).unwrap();
            assert_eq!(x, y, "{}", r.id);
        }
        let again = tempfile::tempdir().unwrap();
        assert_eq!(degrade_corpus(&m, &DegradationRanges::default(), 17, again.path()).unwrap(), sc);
    }
}
