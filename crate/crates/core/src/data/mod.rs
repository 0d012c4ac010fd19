//! Datasets: IDX loading, procedural domain-shift generators, the synthetic
//! 17-landmark articulated-hand task, and the on-disk sample container.

mod colorize;
mod container;
mod digits;
mod hands;
mod idx;
mod render;

pub use colorize::{colorize_shift, replicate_gray, ColorShiftConfig};
pub use container::{read_dgds, write_dgds};
pub use digits::gen_digit_sample;
pub use hands::{gen_landmark_scene, LandmarkSceneConfig};
pub use idx::{parse_idx, serialize_idx};

use crate::error::{DegiaError, Result};
use crate::seeds;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Number of landmark points in the alignment task.
pub const LANDMARK_COUNT: usize = 17;

/// Source identity of a sample; preserved through every transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    MnistGray,
    ColorShift,
    RgbLike,
    DepthLike,
    XrayLike,
}

impl DomainTag {
    pub fn as_u8(self) -> u8 {
        match self {
            DomainTag::MnistGray => 0,
            DomainTag::ColorShift => 1,
            DomainTag::RgbLike => 2,
            DomainTag::DepthLike => 3,
            DomainTag::XrayLike => 4,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => DomainTag::MnistGray,
            1 => DomainTag::ColorShift,
            2 => DomainTag::RgbLike,
            3 => DomainTag::DepthLike,
            4 => DomainTag::XrayLike,
            _ => return Err(DegiaError::Format(format!("unknown domain tag {v}"))),
        })
    }
}

/// Ground truth: a class label or 17 normalized landmark coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Truth {
    Class(usize),
    Landmarks(Vec<[f64; 2]>),
}

/// One image with its ground truth and domain tag. Pixels are row-major
/// H x W x C in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
    pub truth: Truth,
    pub domain: DomainTag,
}

impl ImageSample {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Check the type invariants: pixel range, landmark count and range.
    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.pixel_count() {
            return Err(DegiaError::Consistency(format!(
                "{}x{}x{} sample has {} pixels",
                self.height,
                self.width,
                self.channels,
                self.pixels.len()
            )));
        }
        if let Some(p) = self.pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(DegiaError::Consistency(format!("pixel {p} outside [0,1]")));
        }
        if let Truth::Landmarks(pts) = &self.truth {
            if pts.len() != LANDMARK_COUNT {
                return Err(DegiaError::Consistency(format!(
                    "{} landmarks, expected {LANDMARK_COUNT}",
                    pts.len()
                )));
            }
            for p in pts {
                if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                    return Err(DegiaError::Consistency(format!("landmark {p:?} outside [0,1]^2")));
                }
            }
        }
        Ok(())
    }

    /// Pixels reordered channel-major (C x H x W) as f64, the layout the
    /// network and flow consume.
    pub fn to_chw(&self) -> Vec<f64> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; h * w * c];
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    out[(k * h + i) * w + j] = f64::from(self.pixels[(i * w + j) * c + k]);
                }
            }
        }
        out
    }

    /// Replace pixels from a channel-major f64 buffer (inverse of `to_chw`).
    pub fn set_from_chw(&mut self, chw: &[f64]) -> Result<()> {
        if chw.len() != self.pixel_count() {
            return Err(DegiaError::shape(
                "set_from_chw",
                format!("{} values for {} pixels", chw.len(), self.pixel_count()),
            ));
        }
        let (h, w, c) = (self.height, self.width, self.channels);
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    self.pixels[(i * w + j) * c + k] = chw[(k * h + i) * w + j] as f32;
                }
            }
        }
        Ok(())
    }
}

/// An ordered collection of samples; iteration order is a pure function of
/// `rng_seed` and the generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub samples: Vec<ImageSample>,
    pub split_name: String,
    pub rng_seed: u64,
}

impl DatasetSplit {
    pub fn new(split_name: impl Into<String>, rng_seed: u64) -> Self {
        DatasetSplit { samples: Vec::new(), split_name: split_name.into(), rng_seed }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Flatten a sample channel-major and add seeded uniform noise in
/// `[0, amplitude)`. The default amplitude `1/256` undoes pixel
/// quantization for likelihood training; amplitude `0` is the exact
/// flatten.
pub fn dequantize(sample: &ImageSample, amplitude: f64, seed: u64) -> Tensor {
    let mut data = sample.to_chw();
    if amplitude > 0.0 {
        let mut rng = seeds::rng_for(seed, seeds::stream::DEQUANT, 0);
        for v in &mut data {
            *v += rng.gen_range(0.0..amplitude);
        }
    }
    Tensor::new(vec![data.len()], data).expect("chw buffer matches its own length")
}

pub const DEQUANT_AMPLITUDE: f64 = 1.0 / 256.0;
