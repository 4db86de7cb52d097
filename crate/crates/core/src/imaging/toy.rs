//! Procedural "toy faces": a small synthetic stand-in for a face corpus.
//!
//! Each face is an anti-aliased head silhouette (hair cap plus skin ellipse),
//! two soft eye blobs and a soft mouth arc. The high-frequency content that a
//! restorer must not erase comes from freckles (1×1 or 2×2 marks) and 1-px
//! hair strokes drawn over the forehead.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ImageTensor, RngStream, LUMA_WEIGHTS};
use crate::error::{Error, Result};

pub const MIN_TOY_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyFaceSpec {
    pub size: usize,
    pub n_freckles: usize,
    /// Intensity delta between a freckle and the skin under it, in `[0.1, 0.5]`.
    pub freckle_contrast: f32,
    pub n_hair_strokes: usize,
    pub palette_seed: u64,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
}

impl Default for ToyFaceSpec {
    fn default() -> Self {
        Self {
            size: 32,
            n_freckles: 5,
            freckle_contrast: 0.25,
            n_hair_strokes: 2,
            palette_seed: 0,
            channels: 3,
        }
    }
}

impl ToyFaceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_TOY_SIZE {
            return Err(Error::Spec(format!(
                "toy face size {} is below the minimum of {MIN_TOY_SIZE}",
                self.size
            )));
        }
        if !(0.1..=0.5).contains(&self.freckle_contrast) {
            return Err(Error::Spec(format!(
                "freckle_contrast {} outside [0.1, 0.5]",
                self.freckle_contrast
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Spec(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        Ok(())
    }
}

type Rgb = [f64; 3];

const SKIN_TONES: [Rgb; 4] = [
    [0.95, 0.82, 0.72],
    [0.90, 0.73, 0.60],
    [0.82, 0.63, 0.50],
    [0.72, 0.54, 0.42],
];

/// Bookkeeping from a render, used by tests and diagnostics.
#[derive(Debug, Clone, Default)]
pub(crate) struct ToyLayout {
    /// Pixels within one pixel of the silhouette boundary.
    #[cfg_attr(not(test), allow(dead_code))]
    pub edge_band: Vec<bool>,
    /// `(pixel index, background value before the freckle was drawn)`
    pub freckles: Vec<(usize, Rgb)>,
    pub hair_pixels: Vec<usize>,
}

/// Renders a toy face; a pure function of `(spec, rng)`.
pub fn gen_toy_face(spec: &ToyFaceSpec, rng: RngStream) -> Result<ImageTensor> {
    render(spec, rng).map(|(img, _)| img)
}

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn jitter<R: Rng>(rng: &mut R, c: Rgb, amount: f64) -> Rgb {
    c.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.ax;
        let dy = (y - self.cy) / self.ay;
        dx * dx + dy * dy <= 1.0
    }

    /// Fraction of a pixel covered, from a 4×4 supersample.
    fn coverage(&self, px: usize, py: usize) -> f64 {
        let mut hits = 0;
        for sy in 0..4 {
            for sx in 0..4 {
                let x = px as f64 + (sx as f64 + 0.5) / 4.0;
                let y = py as f64 + (sy as f64 + 0.5) / 4.0;
                if self.contains(x, y) {
                    hits += 1;
                }
            }
        }
        hits as f64 / 16.0
    }
}

pub(crate) fn render(spec: &ToyFaceSpec, stream: RngStream) -> Result<(ImageTensor, ToyLayout)> {
    spec.validate()?;
    let s = spec.size;
    let sf = s as f64;

    let mut palette_rng = RngStream::new(spec.palette_seed, 0x70a1_e77e).rng();
    let skins: Vec<Rgb> = SKIN_TONES
        .iter()
        .map(|&c| jitter(&mut palette_rng, c, 0.04))
        .collect();
    let hair_base = jitter(&mut palette_rng, [0.22, 0.14, 0.08], 0.06);

    let mut rng = stream.rng();
    let skin = skins[rng.random_range(0..skins.len())];
    let bg: Rgb = [
        rng.random_range(0.05..0.35),
        rng.random_range(0.05..0.35),
        rng.random_range(0.10..0.40),
    ];
    let hair = jitter(&mut rng, hair_base, 0.05);
    let eye: Rgb = [0.12, 0.10, 0.10].map(|v| v + rng.random_range(0.0..0.08));
    let mouth = [skin[0] * 0.70, skin[1] * 0.38, skin[2] * 0.38];

    let face = Ellipse {
        cx: sf * (0.5 + rng.random_range(-0.04..0.04)),
        cy: sf * (0.55 + rng.random_range(-0.03..0.03)),
        ax: sf * rng.random_range(0.30..0.35),
        ay: sf * rng.random_range(0.37..0.42),
    };
    let cap = Ellipse {
        cx: face.cx,
        cy: face.cy - 0.07 * sf,
        ax: face.ax + 0.035 * sf,
        ay: face.ay + 0.01 * sf,
    };
    let eye_dx = sf * 0.13 * rng.random_range(0.9..1.1);
    let eye_y = face.cy - sf * rng.random_range(0.05..0.09);
    let eye_r = sf * rng.random_range(0.045..0.055);
    let eyes = [(face.cx - eye_dx, eye_y), (face.cx + eye_dx, eye_y)];
    let mouth_y = face.cy + sf * rng.random_range(0.17..0.22);
    let mouth_w = sf * rng.random_range(0.10..0.14);
    let mouth_bend = sf * rng.random_range(-0.02..0.05);
    let mouth_sigma = sf * 0.035;
    let mouth_pts: Vec<(f64, f64)> = (0..=40)
        .map(|i| {
            let u = i as f64 / 20.0 - 1.0;
            (face.cx + u * mouth_w, mouth_y + mouth_bend * (1.0 - u * u))
        })
        .collect();

    let mut canvas = vec![[0.0f64; 3]; s * s];
    // weight of eye/mouth ink per pixel; freckles avoid inked pixels
    let mut ink = vec![0.0f64; s * s];
    let mut skin_cov = vec![0.0f64; s * s];
    let mut silhouette = vec![0.0f64; s * s];
    for py in 0..s {
        for px in 0..s {
            let i = py * s + px;
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let shade = 0.9 + 0.2 * y / sf;
            let mut c = bg.map(|v| (v * shade).min(1.0));
            let cap_cov = cap.coverage(px, py);
            c = lerp(c, hair, cap_cov);
            let fc = face.coverage(px, py);
            let mut sk = skin;
            let mut w_ink = 0.0f64;
            for &(ex, ey) in &eyes {
                let d2 = (x - ex).powi(2) + (y - ey).powi(2);
                let a = 0.75 * (-d2 / (2.0 * eye_r * eye_r)).exp();
                sk = lerp(sk, eye, a);
                w_ink = w_ink.max(a);
            }
            let md2 = mouth_pts
                .iter()
                .map(|&(mx, my)| (x - mx).powi(2) + (y - my).powi(2))
                .fold(f64::INFINITY, f64::min);
            let a = 0.6 * (-md2 / (2.0 * mouth_sigma * mouth_sigma)).exp();
            sk = lerp(sk, mouth, a);
            w_ink = w_ink.max(a);
            c = lerp(c, sk, fc);
            canvas[i] = c;
            ink[i] = w_ink;
            skin_cov[i] = fc;
            silhouette[i] = cap_cov.max(fc);
        }
    }

    let mut layout = ToyLayout {
        edge_band: edge_band(&silhouette, &skin_cov, s),
        ..ToyLayout::default()
    };

    let mut stroke_mask = vec![false; s * s];
    for _ in 0..spec.n_hair_strokes {
        let theta = rng.random_range(-2.5f64..-0.64);
        let p0 = (
            face.cx + 0.92 * face.ax * theta.cos(),
            face.cy + 0.92 * face.ay * theta.sin(),
        );
        let p2 = (
            p0.0 + sf * rng.random_range(-0.15..0.15),
            p0.1 + sf * rng.random_range(0.12..0.25),
        );
        let p1 = (
            0.5 * (p0.0 + p2.0) + sf * rng.random_range(-0.08..0.08),
            0.5 * (p0.1 + p2.1) + sf * rng.random_range(-0.04..0.04),
        );
        let steps = (sf * 4.0) as usize;
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            let u = 1.0 - t;
            let x = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
            let y = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
            let (px, py) = (x.floor(), y.floor());
            if px < 0.0 || py < 0.0 || px >= sf || py >= sf {
                continue;
            }
            let i = py as usize * s + px as usize;
            if !stroke_mask[i] {
                stroke_mask[i] = true;
                canvas[i] = hair;
                layout.hair_pixels.push(i);
            }
        }
    }

    let contrast = spec.freckle_contrast as f64;
    let inner = Ellipse {
        ax: face.ax * 0.78,
        ay: face.ay * 0.78,
        ..face
    };
    let mut occupied = vec![false; s * s];
    let mut placed = 0;
    let mut attempts = 0;
    while placed < spec.n_freckles && attempts < 200 * (spec.n_freckles + 1) {
        attempts += 1;
        let big = rng.random_bool(0.5);
        let side = if big { 2 } else { 1 };
        let px = rng.random_range(0..s - side);
        let py = rng.random_range(0..s - side);
        let cells: Vec<usize> = (0..side)
            .flat_map(|dy| (0..side).map(move |dx| (py + dy) * s + px + dx))
            .collect();
        let ok = cells.iter().all(|&i| {
            let (cx, cy) = ((i % s) as f64 + 0.5, (i / s) as f64 + 0.5);
            inner.contains(cx, cy) && skin_cov[i] >= 1.0 && ink[i] < 0.05 && !stroke_mask[i]
        }) && cells.iter().all(|&i| !near_occupied(&occupied, i, s));
        if !ok {
            continue;
        }
        for &i in &cells {
            let base = canvas[i];
            canvas[i] = base.map(|v| if v - contrast >= 0.0 { v - contrast } else { v + contrast });
            occupied[i] = true;
            layout.freckles.push((i, base));
        }
        placed += 1;
    }

    let data: Vec<f32> = if spec.channels == 3 {
        canvas
            .iter()
            .flat_map(|c| c.map(|v| v.clamp(0.0, 1.0) as f32))
            .collect()
    } else {
        canvas
            .iter()
            .map(|c| {
                let l = LUMA_WEIGHTS[0] * c[0] + LUMA_WEIGHTS[1] * c[1] + LUMA_WEIGHTS[2] * c[2];
                l.clamp(0.0, 1.0) as f32
            })
            .collect()
    };
    Ok((ImageTensor::new(s, s, spec.channels, data)?, layout))
}

fn near_occupied(occupied: &[bool], i: usize, s: usize) -> bool {
    let (x, y) = ((i % s) as isize, (i / s) as isize);
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (nx, ny) = (x + dx, y + dy);
            if nx >= 0 && ny >= 0 && (nx as usize) < s && (ny as usize) < s && occupied[ny as usize * s + nx as usize] {
                return true;
            }
        }
    }
    false
}

fn edge_band(silhouette: &[f64], skin: &[f64], s: usize) -> Vec<bool> {
    let partial = |v: f64| v > 0.0 && v < 1.0;
    let mut band = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            if partial(silhouette[i]) || partial(skin[i]) {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (nx, ny) = (x as isize + dx, y as isize + dy);
                        if nx >= 0 && ny >= 0 && (nx as usize) < s && (ny as usize) < s {
                            band[ny as usize * s + nx as usize] = true;
                        }
                    }
                }
            }
        }
    }
    band
}
