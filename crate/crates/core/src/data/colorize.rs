//! Procedural color-domain shift for grayscale samples. Stands in for the
//! photograph-blended shifted test set: the digit is blended against a
//! seeded low-frequency color field and recolored with a per-image affine
//! channel transform, so the test domain differs in exactly the way the
//! source domain never shows.

use super::render::CoarseField;
use super::{DomainTag, ImageSample};
use crate::error::{DegiaError, Result};
use crate::seeds;
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct ColorShiftConfig {
    /// Mix weight between the replicated grayscale image (0) and the fully
    /// shifted rendering (1).
    pub blend: f64,
}

impl Default for ColorShiftConfig {
    fn default() -> Self {
        ColorShiftConfig { blend: 0.85 }
    }
}

/// Replicate a grayscale sample to three identical channels.
pub fn replicate_gray(sample: &ImageSample) -> Result<ImageSample> {
    if sample.channels != 1 {
        return Err(DegiaError::contract(
            "replicate_gray",
            format!("expected grayscale input, got {} channels", sample.channels),
        ));
    }
    let mut pixels = Vec::with_capacity(sample.pixels.len() * 3);
    for &p in &sample.pixels {
        pixels.extend_from_slice(&[p, p, p]);
    }
    Ok(ImageSample {
        height: sample.height,
        width: sample.width,
        channels: 3,
        pixels,
        truth: sample.truth.clone(),
        domain: sample.domain,
    })
}

/// Blend a grayscale sample into a seeded procedural color domain. Truth is
/// unchanged; the domain tag becomes `ColorShift`. With `blend == 0` the
/// output channels all equal the grayscale input exactly.
pub fn colorize_shift(sample: &ImageSample, seed: u64, config: ColorShiftConfig) -> Result<ImageSample> {
    if sample.channels != 1 {
        return Err(DegiaError::contract(
            "colorize_shift",
            format!("expected grayscale input, got {} channels", sample.channels),
        ));
    }
    let w = config.blend.clamp(0.0, 1.0);
    let mut rng = seeds::rng_for(seed, seeds::stream::DATA_GEN, 0xC0);
    let fields = [
        CoarseField::new(&mut rng, 4, 0.0, 1.0),
        CoarseField::new(&mut rng, 4, 0.0, 1.0),
        CoarseField::new(&mut rng, 4, 0.0, 1.0),
    ];
    let gains: Vec<f64> = (0..3).map(|_| rng.gen_range(0.55..1.0)).collect();
    let lifts: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..0.3)).collect();

    let (h, wd) = (sample.height, sample.width);
    let mut pixels = Vec::with_capacity(h * wd * 3);
    for i in 0..h {
        for j in 0..wd {
            let g = f64::from(sample.pixels[i * wd + j]);
            let (x, y) = ((j as f64 + 0.5) / wd as f64, (i as f64 + 0.5) / h as f64);
            for k in 0..3 {
                let bg = fields[k].at(x, y);
                // absolute-difference blend recolors both glyph and ground
                let shifted = (gains[k] * (g - bg).abs() + lifts[k] * (1.0 - g)).clamp(0.0, 1.0);
                let out = (1.0 - w) * g + w * shifted;
                pixels.push(out.clamp(0.0, 1.0) as f32);
            }
        }
    }

    Ok(ImageSample {
        height: h,
        width: wd,
        channels: 3,
        pixels,
        truth: sample.truth.clone(),
        domain: DomainTag::ColorShift,
    })
}
