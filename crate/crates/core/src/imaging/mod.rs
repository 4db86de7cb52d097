//! Image values, seeded random streams and file I/O shared by every stage.
//!
//! Images are stored as `f32` intensities in `[0, 1]`, row-major with
//! interleaved channels (`H × W × C`). The diffusion model works in `[-1, 1]`;
//! that conversion lives in [`crate::diffusion`] and nowhere else.

pub(crate) mod png;
pub(crate) mod rng;
mod toy;

pub use self::png::{load_png, save_png};
pub use self::rng::RngStream;
pub use self::toy::{gen_toy_face, ToyFaceSpec, MIN_TOY_SIZE};

use crate::error::{Error, Result};

/// Smallest accepted side length.
pub const MIN_SIDE: usize = 8;

/// Rec. 601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Shape(format!(
                "image {height}x{width} is below the {MIN_SIDE}x{MIN_SIDE} minimum"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn clip(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn is_valid(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Per-pixel luminance (Rec. 601 for RGB, identity for grayscale), row-major.
    pub fn luminance(&self) -> Vec<f64> {
        match self.channels {
            1 => self.data.iter().map(|&v| v as f64).collect(),
            _ => self
                .data
                .chunks_exact(3)
                .map(|p| {
                    LUMA_WEIGHTS[0] * p[0] as f64
                        + LUMA_WEIGHTS[1] * p[1] as f64
                        + LUMA_WEIGHTS[2] * p[2] as f64
                })
                .collect(),
        }
    }

    /// Single plane of channel `c`, row-major.
    pub fn plane(&self, c: usize) -> Vec<f32> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f32>]) -> Result<Self> {
        let channels = planes.len();
        let mut data = vec![0.0; height * width * channels];
        for (c, plane) in planes.iter().enumerate() {
            if plane.len() != height * width {
                return Err(Error::Shape("plane size mismatch".into()));
            }
            for (i, &v) in plane.iter().enumerate() {
                data[i * channels + c] = v;
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Places images side by side, separated by a one-pixel white gutter.
    pub fn hstack(images: &[&ImageTensor]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("nothing to stack".into()))?;
        let (h, _, c) = first.shape();
        if images.iter().any(|im| im.height != h || im.channels != c) {
            return Err(Error::Shape("stacked images must share height and channels".into()));
        }
        let width = images.iter().map(|im| im.width).sum::<usize>() + images.len() - 1;
        let mut out = Self::filled(h, width, c, 1.0)?;
        let mut x0 = 0;
        for im in images {
            for y in 0..h {
                for x in 0..im.width {
                    for ch in 0..c {
                        out.set(y, x0 + x, ch, im.get(y, x, ch));
                    }
                }
            }
            x0 += im.width + 1;
        }
        Ok(out)
    }

    /// Stacks rows produced by [`ImageTensor::hstack`] vertically.
    pub fn vstack(images: &[ImageTensor]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("nothing to stack".into()))?;
        let (_, w, c) = first.shape();
        if images.iter().any(|im| im.width != w || im.channels != c) {
            return Err(Error::Shape("stacked images must share width and channels".into()));
        }
        let height = images.iter().map(|im| im.height).sum::<usize>() + images.len() - 1;
        let mut out = Self::filled(height, w, c, 1.0)?;
        let mut y0 = 0;
        for im in images {
            let start = y0 * w * c;
            out.data[start..start + im.data.len()].copy_from_slice(&im.data);
            y0 += im.height + 1;
        }
        Ok(out)
    }
}
