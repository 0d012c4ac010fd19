//! Synthetic articulated-hand scenes for the 17-landmark alignment task.
//!
//! One seeded geometry (wrist, palm center, and root/mid/tip joints for
//! five digits) is rendered under three appearance domains:
//! - `RgbLike`: colored strokes over a textured low-frequency background,
//! - `DepthLike`: smooth intensity ramp shaded by limb depth ordering,
//! - `XrayLike`: additive bright bone strokes on a near-black background.
//!
//! Landmark order: wrist, palm center, then (root, mid, tip) per digit.

use super::render::{pixel_hash_noise, segment_distance, CoarseField, Segment};
use super::{DomainTag, ImageSample, Truth, LANDMARK_COUNT};
use crate::seeds;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct LandmarkSceneConfig {
    /// Square render resolution. The task stays tractable at 64; larger
    /// sizes remain reachable through this field.
    pub resolution: usize,
}

impl Default for LandmarkSceneConfig {
    fn default() -> Self {
        LandmarkSceneConfig { resolution: 64 }
    }
}

struct HandGeometry {
    /// 17 points in [0,1]^2.
    landmarks: Vec<[f64; 2]>,
    /// Bones with per-endpoint depth in [0,1] (0 near, 1 far).
    segments: Vec<Segment>,
    /// Stroke palette index per segment (0 = palm/wrist, 1..=5 digits).
    groups: Vec<usize>,
}

fn polar(origin: [f64; 2], radius: f64, angle_from_up: f64) -> [f64; 2] {
    [origin[0] + radius * angle_from_up.sin(), origin[1] - radius * angle_from_up.cos()]
}

fn clamp_pt(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.03, 0.97), p[1].clamp(0.03, 0.97)]
}

fn build_geometry(rng: &mut ChaCha8Rng) -> HandGeometry {
    let palm = clamp_pt([0.5 + rng.gen_range(-0.06..0.06), 0.56 + rng.gen_range(-0.05..0.05)]);
    let wrist = clamp_pt([palm[0] + rng.gen_range(-0.05..0.05), palm[1] + 0.26 + rng.gen_range(-0.04..0.04)]);
    let spread = rng.gen_range(0.85..1.15);

    let mut landmarks = vec![wrist, palm];
    let mut segments = vec![Segment { a: wrist, b: palm, thickness: 0.050, va: 0.0, vb: 0.15 }];
    let mut groups = vec![0];

    let base_angles = [-1.10f64, -0.52, 0.0, 0.48, 1.02];
    for (d, &base) in base_angles.iter().enumerate() {
        let is_thumb = d == 0;
        let angle = base * spread + rng.gen_range(-0.12..0.12);
        let root_r = if is_thumb { 0.11 } else { 0.13 } + rng.gen_range(-0.015..0.015);
        let root = clamp_pt(polar(palm, root_r, angle));
        let a1 = angle + rng.gen_range(-0.15..0.15);
        let l1 = if is_thumb { 0.09 } else { 0.13 } * rng.gen_range(0.85..1.15);
        let mid = clamp_pt(polar(root, l1, a1));
        let a2 = a1 + rng.gen_range(-0.2..0.2);
        let l2 = if is_thumb { 0.07 } else { 0.10 } * rng.gen_range(0.85..1.15);
        let tip = clamp_pt(polar(mid, l2, a2));

        let depth0 = 0.35 + 0.02 * d as f64;
        landmarks.extend_from_slice(&[root, mid, tip]);
        segments.push(Segment { a: palm, b: root, thickness: 0.034, va: 0.15, vb: depth0 });
        segments.push(Segment { a: root, b: mid, thickness: 0.027, va: depth0, vb: depth0 + 0.3 });
        segments.push(Segment { a: mid, b: tip, thickness: 0.021, va: depth0 + 0.3, vb: depth0 + 0.55 });
        groups.extend_from_slice(&[d + 1, d + 1, d + 1]);
    }
    debug_assert_eq!(landmarks.len(), LANDMARK_COUNT);
    HandGeometry { landmarks, segments, groups }
}

/// Nearest-bone query returning (segment index, distance, depth at the
/// closest point).
fn nearest_bone(geo: &HandGeometry, p: [f64; 2]) -> (usize, f64, f64) {
    let mut best = (0usize, f64::INFINITY, 0.0f64);
    for (i, seg) in geo.segments.iter().enumerate() {
        let (d, t) = segment_distance(seg, p);
        if d < best.1 {
            best = (i, d, seg.va + t * (seg.vb - seg.va));
        }
    }
    best
}

/// Render one articulated-hand scene. Pure function of (seed, domain,
/// config); the geometry depends only on the seed, so the same seed under
/// a different domain shows the same pose with different appearance.
pub fn gen_landmark_scene(seed: u64, domain: DomainTag, config: LandmarkSceneConfig) -> ImageSample {
    let mut geo_rng = seeds::rng_for(seed, seeds::stream::DATA_GEN, 0x4A);
    let geo = build_geometry(&mut geo_rng);
    let mut style_rng = seeds::rng_for(seed, seeds::stream::DATA_GEN, 0x4B);

    let r = config.resolution;
    let mut pixels = vec![0.0f32; r * r * 3];
    match domain {
        DomainTag::RgbLike => render_rgb(&geo, &mut style_rng, seed, r, &mut pixels),
        DomainTag::DepthLike => render_depth(&geo, r, &mut pixels),
        DomainTag::XrayLike => render_xray(&geo, r, &mut pixels),
        other => panic!("gen_landmark_scene: unsupported domain {other:?}"),
    }

    ImageSample {
        height: r,
        width: r,
        channels: 3,
        pixels,
        truth: Truth::Landmarks(geo.landmarks.clone()),
        domain,
    }
}

fn render_rgb(geo: &HandGeometry, rng: &mut ChaCha8Rng, seed: u64, r: usize, pixels: &mut [f32]) {
    let bg = [
        CoarseField::new(rng, 5, 0.15, 0.8),
        CoarseField::new(rng, 5, 0.15, 0.8),
        CoarseField::new(rng, 5, 0.15, 0.8),
    ];
    // per-group stroke colors: one base hue for the palm, five for digits
    let palette: Vec<[f64; 3]> = (0..6)
        .map(|_| {
            [
                rng.gen_range(0.45..0.95),
                rng.gen_range(0.25..0.85),
                rng.gen_range(0.2..0.8),
            ]
        })
        .collect();
    for i in 0..r {
        for j in 0..r {
            let p = [(j as f64 + 0.5) / r as f64, (i as f64 + 0.5) / r as f64];
            let (si, d, _) = nearest_bone(geo, p);
            let seg = &geo.segments[si];
            let cover = ((seg.thickness - d) / 0.012 + 0.5).clamp(0.0, 1.0);
            let color = palette[geo.groups[si]];
            for k in 0..3 {
                let noise = 0.05 * pixel_hash_noise(seed ^ 0x5A5A, i, j, k);
                let base = (bg[k].at(p[0], p[1]) + noise).clamp(0.0, 1.0);
                let v = base * (1.0 - cover) + color[k] * cover;
                pixels[(i * r + j) * 3 + k] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
}

fn render_depth(geo: &HandGeometry, r: usize, pixels: &mut [f32]) {
    for i in 0..r {
        for j in 0..r {
            let p = [(j as f64 + 0.5) / r as f64, (i as f64 + 0.5) / r as f64];
            let (si, d, depth) = nearest_bone(geo, p);
            let seg = &geo.segments[si];
            // wide soft edge keeps the rendering smooth
            let cover = ((seg.thickness - d) / 0.03 + 0.5).clamp(0.0, 1.0);
            let ramp = 0.25 + 0.45 * p[1];
            let hand = 0.95 - 0.55 * depth.clamp(0.0, 1.0);
            let v = (ramp * (1.0 - cover) + hand * cover).clamp(0.0, 1.0) as f32;
            for k in 0..3 {
                pixels[(i * r + j) * 3 + k] = v;
            }
        }
    }
}

fn render_xray(geo: &HandGeometry, r: usize, pixels: &mut [f32]) {
    for i in 0..r {
        for j in 0..r {
            let p = [(j as f64 + 0.5) / r as f64, (i as f64 + 0.5) / r as f64];
            // additive bone intensity: overlapping bones get brighter
            let mut acc = 0.03f64;
            for seg in &geo.segments {
                let (d, _) = segment_distance(seg, p);
                let sigma = seg.thickness * 0.7;
                acc += 0.8 * (-0.5 * (d / sigma).powi(2)).exp();
            }
            let v = acc.clamp(0.0, 1.0) as f32;
            for k in 0..3 {
                pixels[(i * r + j) * 3 + k] = v;
            }
        }
    }
}
