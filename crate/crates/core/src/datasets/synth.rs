//! Seeded synthetic datasets.
//!
//! `two_blob_dataset` gives small separable instances for unit tests and the
//! bundled synthetic recipe. `digit_corpus` renders a 28x28 ten-class glyph
//! corpus whose class pairs 1/7 and 6/9 are geometrically similar, so
//! label-noise experiments between "semantically similar" classes behave the
//! way handwritten-digit data does, without requiring external files.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::gaussian_sample;
use crate::diffmodels::{Dataset, Example};

/// Two Gaussian blobs on the x-axis at `+-separation/2`, `n` examples split
/// evenly, class = blob index.
pub fn two_blob_dataset(n: usize, separation: f64, std: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let cx = if label == 0 {
            -separation / 2.0
        } else {
            separation / 2.0
        };
        examples.push(Example::new(
            vec![
                cx + gaussian_sample(&mut rng) * std,
                gaussian_sample(&mut rng) * std,
            ],
            label,
            i as u64,
        ));
    }
    Dataset::new(examples, 2).expect("ids are unique by construction")
}

const SIDE: usize = 28;

#[derive(Clone, Copy)]
enum Stroke {
    /// Line segment in (x, y) pixel coordinates.
    Segment(f64, f64, f64, f64),
    /// Ring of radius `r` around (cx, cy).
    Circle(f64, f64, f64),
}

/// Two sub-styles per class. The `a` variants of the pairs 1/7 and 6/9 are
/// geometrically close (the source of natural confusion); the `b` variants
/// are distinct, anchoring each class the way diverse handwriting styles do.
fn glyph(class: usize, variant: bool) -> &'static [Stroke] {
    use Stroke::*;
    match (class, variant) {
        (0, false) => &[Circle(14.0, 14.0, 7.5)],
        (0, true) => &[Circle(14.0, 14.0, 6.0)],
        (1, false) => &[Segment(14.0, 5.0, 14.0, 23.0)],
        (1, true) => &[Segment(13.0, 5.0, 15.0, 23.0), Segment(10.0, 8.0, 13.0, 5.0)],
        (2, _) => &[
            Segment(8.0, 8.0, 20.0, 8.0),
            Segment(20.0, 8.0, 8.0, 20.0),
            Segment(8.0, 20.0, 20.0, 20.0),
        ],
        (3, _) => &[
            Segment(8.0, 6.0, 19.0, 6.0),
            Segment(19.0, 6.0, 19.0, 22.0),
            Segment(8.0, 22.0, 19.0, 22.0),
            Segment(12.0, 14.0, 19.0, 14.0),
        ],
        (4, _) => &[
            Segment(9.0, 5.0, 9.0, 14.0),
            Segment(9.0, 14.0, 19.0, 14.0),
            Segment(17.0, 5.0, 17.0, 23.0),
        ],
        (5, _) => &[
            Segment(19.0, 6.0, 9.0, 6.0),
            Segment(9.0, 6.0, 9.0, 14.0),
            Circle(13.0, 18.0, 4.5),
        ],
        (6, false) => &[Circle(13.5, 18.0, 4.5), Segment(14.5, 6.0, 12.0, 13.0)],
        (6, true) => &[Circle(12.5, 18.5, 5.0), Segment(17.0, 5.0, 13.0, 14.0)],
        (7, false) => &[
            Segment(9.0, 6.0, 19.0, 6.0),
            Segment(19.0, 6.0, 13.0, 23.0),
        ],
        (7, true) => &[
            Segment(8.0, 6.0, 20.0, 6.0),
            Segment(20.0, 6.0, 11.0, 23.0),
            Segment(11.0, 14.0, 18.0, 14.0),
        ],
        (8, _) => &[Circle(14.0, 9.0, 4.0), Circle(14.0, 19.0, 4.8)],
        (9, false) => &[Circle(15.0, 10.0, 4.7), Segment(17.5, 13.5, 16.0, 23.0)],
        (9, true) => &[Circle(14.0, 9.5, 4.2), Segment(17.5, 12.5, 12.0, 21.5)],
        _ => unreachable!("ten glyph classes"),
    }
}

fn stroke_distance(stroke: &Stroke, px: f64, py: f64) -> f64 {
    match *stroke {
        Stroke::Segment(x0, y0, x1, y1) => {
            let (dx, dy) = (x1 - x0, y1 - y0);
            let len2 = dx * dx + dy * dy;
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
            };
            let (cx, cy) = (x0 + t * dx, y0 + t * dy);
            ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
        }
        Stroke::Circle(cx, cy, r) => {
            let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            (d - r).abs()
        }
    }
}

fn render_example(class: usize, id: u64, seed: u64) -> Example {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&id.to_le_bytes());
    key[16] = 0x5d;
    let mut rng = ChaCha8Rng::from_seed(key);

    // A sixth of each class renders the confusable sub-style.
    let variant: bool = rng.gen::<f64>() >= 0.165;
    let dx: f64 = rng.gen_range(-2.5..=2.5);
    let dy: f64 = rng.gen_range(-2.5..=2.5);
    let alpha: f64 = rng.gen_range(0.65..=1.0);
    let width: f64 = rng.gen_range(0.9..=1.7);
    let noise_level = 0.15;

    let strokes = glyph(class, variant);
    let mut input = Vec::with_capacity(SIDE * SIDE);
    for row in 0..SIDE {
        for col in 0..SIDE {
            let (px, py) = (col as f64 - dx, row as f64 - dy);
            let mut v: f64 = 0.0;
            for s in strokes {
                let d = stroke_distance(s, px, py);
                v = v.max((-d * d / (2.0 * width * width)).exp());
            }
            let noisy = alpha * v + rng.gen_range(0.0..noise_level);
            input.push(noisy.clamp(0.0, 1.0));
        }
    }
    Example::new(input, class, id)
}

/// Renders a glyph corpus: `n_train` training and `n_test` test examples
/// with balanced classes, 784-dimensional inputs in [0, 1], ten classes.
/// Ids are disjoint across the two splits. Deterministic given the seed.
pub fn digit_corpus(n_train: usize, n_test: usize, seed: u64) -> (Dataset, Dataset) {
    let render = |start: u64, count: usize, stream: u64| -> Vec<Example> {
        (0..count)
            .into_par_iter()
            .map(|i| render_example(i % 10, start + i as u64, seed ^ stream))
            .collect()
    };
    let train = render(0, n_train, 0);
    let test = render(n_train as u64, n_test, 0x7e57);
    (
        Dataset::new(train, 10).expect("unique ids"),
        Dataset::new(test, 10).expect("unique ids"),
    )
}
