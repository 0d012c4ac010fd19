//! Procedural digit renderer: the documented fallback when no IDX files
//! are on disk. Each class has a fixed stroke skeleton; seeded affine and
//! per-point jitter give intra-class variation. White glyph on black,
//! grayscale, MNIST-sized by default.

use super::render::{affine_jitter, nearest_segment, soft_edge, Segment};
use super::{DomainTag, ImageSample, Truth};
use crate::seeds;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64, n: usize) -> Vec<[f64; 2]> {
    (0..=n)
        .map(|i| {
            let t = (from_deg + (to_deg - from_deg) * i as f64 / n as f64).to_radians();
            [cx + rx * t.sin(), cy - ry * t.cos()]
        })
        .collect()
}

/// Stroke skeletons per class in glyph coordinates ([0,1]^2, y down).
fn skeleton(class: usize) -> Vec<Vec<[f64; 2]>> {
    match class {
        0 => vec![arc(0.5, 0.5, 0.24, 0.34, 0.0, 360.0, 12)],
        1 => vec![vec![[0.42, 0.3], [0.54, 0.18], [0.54, 0.82]]],
        2 => vec![{
            let mut s = arc(0.5, 0.32, 0.22, 0.17, -90.0, 110.0, 7);
            s.push([0.3, 0.82]);
            s.push([0.72, 0.82]);
            s
        }],
        3 => vec![{
            let mut s = arc(0.47, 0.33, 0.2, 0.16, -60.0, 140.0, 6);
            s.extend(arc(0.47, 0.67, 0.22, 0.18, -140.0, 60.0, 6));
            s
        }],
        4 => vec![
            vec![[0.62, 0.18], [0.3, 0.6], [0.74, 0.6]],
            vec![[0.62, 0.4], [0.62, 0.84]],
        ],
        5 => vec![{
            let mut s = vec![[0.7, 0.18], [0.34, 0.18], [0.32, 0.48]];
            s.extend(arc(0.48, 0.64, 0.21, 0.18, -20.0, 160.0, 7));
            s
        }],
        6 => vec![{
            let mut s = vec![[0.62, 0.16], [0.4, 0.42]];
            s.extend(arc(0.5, 0.66, 0.19, 0.17, -180.0, 180.0, 10));
            s
        }],
        7 => vec![vec![[0.3, 0.2], [0.72, 0.2], [0.44, 0.84]]],
        8 => vec![
            arc(0.5, 0.34, 0.17, 0.15, 0.0, 360.0, 10),
            arc(0.5, 0.66, 0.2, 0.17, 0.0, 360.0, 10),
        ],
        9 => vec![{
            let mut s = arc(0.5, 0.36, 0.18, 0.16, 180.0, 540.0, 10);
            s.push([0.68, 0.36]);
            s.push([0.6, 0.84]);
            s
        }],
        _ => panic!("digit class out of range: {class}"),
    }
}

fn jitter_points(strokes: &mut [Vec<[f64; 2]>], rng: &mut ChaCha8Rng) {
    let mut flat: Vec<[f64; 2]> = strokes.iter().flatten().copied().collect();
    affine_jitter(&mut flat, rng);
    let mut it = flat.into_iter();
    for stroke in strokes.iter_mut() {
        for p in stroke.iter_mut() {
            let base = it.next().expect("point counts match");
            p[0] = (base[0] + rng.gen_range(-0.015..0.015)).clamp(0.01, 0.99);
            p[1] = (base[1] + rng.gen_range(-0.015..0.015)).clamp(0.01, 0.99);
        }
    }
}

/// Render one grayscale digit sample. Pure function of (class, seed,
/// resolution).
pub fn gen_digit_sample(class: usize, seed: u64, resolution: usize) -> ImageSample {
    assert!(class < 10, "digit class out of range: {class}");
    let mut rng = seeds::rng_for(seed, seeds::stream::DATA_GEN, class as u64);
    let mut strokes = skeleton(class);
    jitter_points(&mut strokes, &mut rng);
    let thickness = rng.gen_range(0.045..0.075);

    let segments: Vec<Segment> = strokes
        .iter()
        .flat_map(|stroke| {
            stroke.windows(2).map(move |w| Segment {
                a: w[0],
                b: w[1],
                thickness,
                va: 1.0,
                vb: 1.0,
            })
        })
        .collect();

    let r = resolution;
    let mut pixels = vec![0.0f32; r * r];
    for i in 0..r {
        for j in 0..r {
            let p = [(j as f64 + 0.5) / r as f64, (i as f64 + 0.5) / r as f64];
            if let Some((idx, d, _)) = nearest_segment(&segments, p) {
                let cover = soft_edge(d, segments[idx].thickness, 0.035);
                pixels[i * r + j] = (0.95 * cover) as f32;
            }
        }
    }

    ImageSample {
        height: r,
        width: r,
        channels: 1,
        pixels,
        truth: Truth::Class(class),
        domain: DomainTag::MnistGray,
    }
}
