//! Deterministic generator of MNIST-like digit images in IDX files.
//!
//! Ten stroke templates are jittered per sample (rotation, anisotropic
//! scale, shear, translation, endpoint wobble), rasterized as soft ink
//! tubes, and corrupted with pixel noise. Every sample derives its own
//! random stream from the dataset seed, so the generated bytes depend only
//! on (seed, split, index).

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::data::{self, IdxPaths};
use crate::error::Result;
use crate::rng::{self, tag};

pub const SIDE: usize = 28;

/// Generation request: split sizes and the dataset seed.
#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

type Point = (f32, f32);

fn ring(cx: f32, cy: f32, rx: f32, ry: f32, n: usize) -> Vec<Point> {
    (0..=n)
        .map(|i| {
            let a = std::f32::consts::TAU * i as f32 / n as f32;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

fn template(class: u8) -> Vec<Vec<Point>> {
    match class {
        0 => vec![ring(0.5, 0.5, 0.24, 0.34, 12)],
        1 => vec![vec![(0.38, 0.3), (0.55, 0.14)], vec![(0.55, 0.14), (0.55, 0.86)]],
        2 => vec![
            vec![
                (0.28, 0.3),
                (0.38, 0.16),
                (0.62, 0.14),
                (0.72, 0.3),
                (0.66, 0.46),
                (0.3, 0.8),
                (0.28, 0.85),
            ],
            vec![(0.28, 0.85), (0.74, 0.85)],
        ],
        3 => vec![
            vec![(0.3, 0.2), (0.5, 0.13), (0.68, 0.25), (0.6, 0.42), (0.47, 0.47)],
            vec![(0.47, 0.47), (0.64, 0.55), (0.68, 0.72), (0.5, 0.86), (0.29, 0.78)],
        ],
        4 => vec![vec![(0.6, 0.86), (0.6, 0.14), (0.26, 0.62), (0.78, 0.62)]],
        5 => vec![vec![
            (0.7, 0.15),
            (0.32, 0.15),
            (0.3, 0.48),
            (0.55, 0.44),
            (0.7, 0.56),
            (0.68, 0.74),
            (0.5, 0.84),
            (0.3, 0.8),
        ]],
        6 => vec![vec![
            (0.62, 0.13),
            (0.45, 0.3),
            (0.34, 0.52),
            (0.33, 0.68),
            (0.42, 0.82),
            (0.58, 0.83),
            (0.68, 0.7),
            (0.62, 0.55),
            (0.45, 0.55),
            (0.36, 0.63),
        ]],
        7 => vec![vec![(0.26, 0.16), (0.74, 0.16), (0.48, 0.85)]],
        8 => vec![ring(0.5, 0.3, 0.17, 0.16, 10), ring(0.5, 0.66, 0.2, 0.19, 10)],
        9 => vec![ring(0.52, 0.32, 0.18, 0.17, 10), vec![(0.7, 0.34), (0.66, 0.6), (0.55, 0.85)]],
        _ => unreachable!("classes are 0..10"),
    }
}

/// Renders one jittered digit to a SIDE x SIDE grayscale image.
pub fn render_digit(class: u8, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let rot = rng::uniform(rng, -0.20, 0.20);
    let sx = rng::uniform(rng, 0.85, 1.15);
    let sy = rng::uniform(rng, 0.85, 1.15);
    let shear = rng::uniform(rng, -0.18, 0.18);
    let tx = rng::uniform(rng, -0.07, 0.07);
    let ty = rng::uniform(rng, -0.07, 0.07);
    let thickness = rng::uniform(rng, 0.034, 0.052);
    let amp = rng::uniform(rng, 0.72, 1.0);
    let (sin, cos) = rot.sin_cos();

    let warp = |p: Point, rng: &mut ChaCha8Rng| -> Point {
        let (mut x, mut y) = (p.0 - 0.5, p.1 - 0.5);
        x += shear * y;
        x *= sx;
        y *= sy;
        let (rx, ry) = (cos * x - sin * y, sin * x + cos * y);
        (
            rx + 0.5 + tx + rng::uniform(rng, -0.015, 0.015),
            ry + 0.5 + ty + rng::uniform(rng, -0.015, 0.015),
        )
    };

    let mut segments: Vec<(Point, Point)> = Vec::new();
    for stroke in template(class) {
        let pts: Vec<Point> = stroke.into_iter().map(|p| warp(p, rng)).collect();
        for pair in pts.windows(2) {
            segments.push((pair[0], pair[1]));
        }
    }

    let inv2s2 = 1.0 / (2.0 * thickness * thickness);
    let mut img = vec![0u8; SIDE * SIDE];
    for py in 0..SIDE {
        for px in 0..SIDE {
            let u = (px as f32 + 0.5) / SIDE as f32;
            let v = (py as f32 + 0.5) / SIDE as f32;
            let mut d2 = f32::INFINITY;
            for &((ax, ay), (bx, by)) in &segments {
                let (ex, ey) = (bx - ax, by - ay);
                let len2 = ex * ex + ey * ey;
                let t = if len2 > 1e-12 {
                    (((u - ax) * ex + (v - ay) * ey) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (dx, dy) = (u - (ax + t * ex), v - (ay + t * ey));
                d2 = d2.min(dx * dx + dy * dy);
            }
            let ink = amp * (-d2 * inv2s2).exp();
            let noisy = ink + 0.05 * rng::normal(rng);
            img[py * SIDE + px] = (noisy.clamp(0.0, 1.0) * 255.0) as u8;
        }
    }
    img
}

fn make_split(seed: u64, split: u64, n: usize) -> (Vec<u8>, Vec<u8>) {
    // Balanced class counts, shuffled deterministically.
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let mut lrng = rng::stream(seed, &[tag::DATA, split, u64::MAX]);
    rng::shuffle(&mut lrng, &mut labels);
    let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
    for (i, &class) in labels.iter().enumerate() {
        let mut rng = rng::stream(seed, &[tag::DATA, split, i as u64]);
        pixels.extend_from_slice(&render_digit(class, &mut rng));
    }
    (pixels, labels)
}

/// Generates both splits and writes them as four IDX files under `dir`,
/// using the conventional file names. Returns the paths.
pub fn write_synthetic(dir: &Path, spec: &SynthSpec) -> Result<IdxPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = IdxPaths {
        train_images: dir.join("train-images-idx3-ubyte"),
        train_labels: dir.join("train-labels-idx1-ubyte"),
        test_images: dir.join("t10k-images-idx3-ubyte"),
        test_labels: dir.join("t10k-labels-idx1-ubyte"),
    };
    let (px, lb) = make_split(spec.seed, 0, spec.n_train);
    data::write_idx_images(&paths.train_images, &px, spec.n_train, SIDE, SIDE)?;
    data::write_idx_labels(&paths.train_labels, &lb)?;
    let (px, lb) = make_split(spec.seed, 1, spec.n_test);
    data::write_idx_images(&paths.test_images, &px, spec.n_test, SIDE, SIDE)?;
    data::write_idx_labels(&paths.test_labels, &lb)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic_per_stream() {
        let a = render_digit(3, &mut rng::stream(5, &[tag::DATA, 0, 0]));
        let b = render_digit(3, &mut rng::stream(5, &[tag::DATA, 0, 0]));
        assert_eq!(a, b);
    }

    #[test]
    fn different_samples_differ() {
        let a = render_digit(3, &mut rng::stream(5, &[tag::DATA, 0, 0]));
        let b = render_digit(3, &mut rng::stream(5, &[tag::DATA, 0, 1]));
        assert_ne!(a, b);
    }

    #[test]
    fn digits_have_ink() {
        for class in 0..10u8 {
            let img = render_digit(class, &mut rng::stream(9, &[tag::DATA, 0, class as u64]));
            let bright = img.iter().filter(|&&p| p > 128).count();
            assert!(bright > 20, "class {class} renders only {bright} bright pixels");
            assert!(bright < 500, "class {class} floods {bright} bright pixels");
        }
    }

    #[test]
    fn split_files_round_trip_and_balance() {
        let d = tempfile::tempdir().unwrap();
        let spec = SynthSpec { n_train: 40, n_test: 20, seed: 11 };
        let paths = write_synthetic(d.path(), &spec).unwrap();
        let (train, test) = data::load_idx_pair(&paths, 10, None, None).unwrap();
        assert_eq!(train.len(), 40);
        assert_eq!(test.len(), 20);
        let mut counts = [0usize; 10];
        for &l in &train.labels {
            counts[l as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 4), "{counts:?}");
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = SynthSpec { n_train: 10, n_test: 5, seed: 21 };
        let p1 = write_synthetic(d1.path(), &spec).unwrap();
        let p2 = write_synthetic(d2.path(), &spec).unwrap();
        assert_eq!(
            std::fs::read(&p1.train_images).unwrap(),
            std::fs::read(&p2.train_images).unwrap()
        );
        assert_eq!(
            std::fs::read(&p1.test_labels).unwrap(),
            std::fs::read(&p2.test_labels).unwrap()
        );
    }
}
