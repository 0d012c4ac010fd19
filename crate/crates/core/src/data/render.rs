//! Shared rasterization helpers for the procedural generators. Everything
//! here is a pure function of its arguments.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A stroke segment in normalized [0,1]^2 coordinates with an intensity
/// payload interpolated between the endpoints.
#[derive(Debug, Clone, Copy)]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub thickness: f64,
    /// Arbitrary per-endpoint payload (depth, shade index, ...).
    pub va: f64,
    pub vb: f64,
}

/// Distance from point `p` to the segment, plus the interpolation parameter
/// of the closest point.
pub fn segment_distance(seg: &Segment, p: [f64; 2]) -> (f64, f64) {
    let dx = seg.b[0] - seg.a[0];
    let dy = seg.b[1] - seg.a[1];
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - seg.a[0]) * dx + (p[1] - seg.a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let cx = seg.a[0] + t * dx;
    let cy = seg.a[1] + t * dy;
    let d = ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt();
    (d, t)
}

/// Closest segment to `p`: (index, distance, t-parameter), or None if empty.
pub fn nearest_segment(segments: &[Segment], p: [f64; 2]) -> Option<(usize, f64, f64)> {
    let mut best: Option<(usize, f64, f64)> = None;
    for (i, seg) in segments.iter().enumerate() {
        let (d, t) = segment_distance(seg, p);
        if best.map_or(true, |(_, bd, _)| d < bd) {
            best = Some((i, d, t));
        }
    }
    best
}

/// Soft coverage of a stroke edge: 1 inside, 0 outside, linear ramp of
/// width `aa` across the boundary.
pub fn soft_edge(distance: f64, thickness: f64, aa: f64) -> f64 {
    ((thickness - distance) / aa + 0.5).clamp(0.0, 1.0)
}

/// Low-frequency scalar field: a seeded coarse grid, bilinearly
/// interpolated over the unit square. Values are in [lo, hi].
pub struct CoarseField {
    grid: Vec<f64>,
    n: usize,
}

impl CoarseField {
    pub fn new(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Self {
        let grid = (0..n * n).map(|_| rng.gen_range(lo..hi)).collect();
        CoarseField { grid, n }
    }

    pub fn at(&self, x: f64, y: f64) -> f64 {
        let n = self.n;
        let gx = (x.clamp(0.0, 1.0) * (n - 1) as f64).min((n - 1) as f64 - 1e-9);
        let gy = (y.clamp(0.0, 1.0) * (n - 1) as f64).min((n - 1) as f64 - 1e-9);
        let (i0, j0) = (gy as usize, gx as usize);
        let (fy, fx) = (gy - i0 as f64, gx - j0 as f64);
        let g = |i: usize, j: usize| self.grid[i * n + j];
        g(i0, j0) * (1.0 - fx) * (1.0 - fy)
            + g(i0, j0 + 1) * fx * (1.0 - fy)
            + g(i0 + 1, j0) * (1.0 - fx) * fy
            + g(i0 + 1, j0 + 1) * fx * fy
    }
}

/// Deterministic per-pixel hash noise in [-1, 1]; high-frequency texture
/// without any RNG state.
pub fn pixel_hash_noise(seed: u64, i: usize, j: usize, k: usize) -> f64 {
    let mut h = seed ^ ((i as u64) << 40) ^ ((j as u64) << 20) ^ (k as u64);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Apply rotation, scale, shear and translation about the glyph center.
pub fn affine_jitter(points: &mut [[f64; 2]], rng: &mut ChaCha8Rng) {
    let angle: f64 = rng.gen_range(-0.18..0.18);
    let scale = rng.gen_range(0.78..0.95);
    let shear = rng.gen_range(-0.08..0.08);
    let tx = rng.gen_range(-0.05..0.05);
    let ty = rng.gen_range(-0.05..0.05);
    let (s, c) = angle.sin_cos();
    for p in points.iter_mut() {
        let x = p[0] - 0.5;
        let y = p[1] - 0.5;
        let xs = x + shear * y;
        let xr = c * xs - s * y;
        let yr = s * xs + c * y;
        p[0] = (0.5 + scale * xr + tx).clamp(0.01, 0.99);
        p[1] = (0.5 + scale * yr + ty).clamp(0.01, 0.99);
    }
}
