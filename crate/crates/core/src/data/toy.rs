//! Synthetic paired tasks at desk scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Pairing, Raster};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    /// `y = -x` for smooth random gray images.
    Invert,
    /// Noisy rendered scene to clean class-color image, with label maps.
    ColormapSeg,
    /// Box-blurred image to its sharp original.
    BlurPair,
}

impl std::str::FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "invert" => Ok(ToyKind::Invert),
            "colormap-seg" => Ok(ToyKind::ColormapSeg),
            "blur-pair" => Ok(ToyKind::BlurPair),
            other => Err(Error::invalid(format!(
                "unknown dataset kind {other:?}; expected invert, colormap-seg or blur-pair"
            ))),
        }
    }
}

impl ToyKind {
    pub fn name(self) -> &'static str {
        match self {
            ToyKind::Invert => "invert",
            ToyKind::ColormapSeg => "colormap-seg",
            ToyKind::BlurPair => "blur-pair",
        }
    }
}

/// Class colors of the segmentation task; pairwise distances exceed 0.5 in
/// normalized units (63.75 on the 8-bit scale).
pub const PALETTE: [[u8; 3]; 4] = [[128, 64, 128], [70, 70, 70], [107, 142, 35], [70, 130, 180]];

/// Smallest pairwise distance of `palette`, in normalized `[-1, 1]` units.
pub fn palette_min_distance(palette: &[[u8; 3]]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, p) in palette.iter().enumerate() {
        for q in &palette[i + 1..] {
            let d2: f64 = p
                .iter()
                .zip(q)
                .map(|(&a, &b)| ((a as f64 - b as f64) / 127.5).powi(2))
                .sum();
            best = best.min(d2.sqrt());
        }
    }
    best
}

/// Generates `n` aligned pairs of `size x size` images.
pub fn make_toy_dataset(kind: ToyKind, n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("dataset needs at least one pair"));
    }
    if size == 0 || !size.is_multiple_of(4) {
        return Err(Error::invalid(format!("image size {size} is not divisible by 4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut labels = Vec::new();
    for _ in 0..n {
        match kind {
            ToyKind::Invert => {
                let x = smooth_image(size, &mut rng);
                let y = Raster {
                    data: x.data.iter().map(|&v| 255 - v).collect(),
                    ..x.clone()
                };
                a.push(x);
                b.push(y);
            }
            ToyKind::ColormapSeg => {
                let lab = label_map(size, &mut rng);
                a.push(render_photo(&lab, &mut rng));
                b.push(colorize(&lab));
                labels.push(lab);
            }
            ToyKind::BlurPair => {
                let sharp = shapes_image(size, &mut rng);
                a.push(box_blur(&sharp));
                b.push(sharp);
            }
        }
    }
    debug_assert!(palette_min_distance(&PALETTE) >= 0.5);
    Ok(Dataset {
        a,
        b,
        labels: (kind == ToyKind::ColormapSeg).then_some(labels),
        pairing: Pairing::Paired,
    })
}

/// Spatial standard deviation of invert-task images, in `[-1, 1]` units.
pub const SMOOTH_STD: f64 = 0.4;

const WAVES: usize = 3;

/// Sum of a few low-frequency plane waves, replicated over the three
/// channels. Integer frequencies make every wave sum to zero over the grid,
/// so the mean is mid-gray, and rescaling fixes the spatial std at
/// [`SMOOTH_STD`]: instance normalization discards per-image offset and
/// contrast, so the task leaves neither free.
fn smooth_image(size: usize, rng: &mut ChaCha8Rng) -> Raster {
    let tau = std::f64::consts::TAU;
    let (plane, std) = loop {
        let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES)
            .map(|_| {
                let (fu, fv) = loop {
                    let f: (i32, i32) = (rng.gen_range(-1..=1), rng.gen_range(-1..=1));
                    if f != (0, 0) {
                        break f;
                    }
                };
                (fu as f64, fv as f64, rng.gen_range(0.0..tau), rng.gen_range(0.3..1.0))
            })
            .collect();
        let plane: Vec<f64> = (0..size * size)
            .map(|p| {
                let (u, v) = ((p / size) as f64 / size as f64, (p % size) as f64 / size as f64);
                waves
                    .iter()
                    .map(|&(fu, fv, ph, amp)| amp * (tau * (fu * u + fv * v) + ph).sin())
                    .sum()
            })
            .collect();
        let std = (plane.iter().map(|s| s * s).sum::<f64>() / plane.len() as f64).sqrt();
        // Waves that nearly cancel leave no usable signal; redraw.
        if std >= 0.1 {
            break (plane, std);
        }
    };
    let gain = 127.5 * SMOOTH_STD / std;
    let gray: Vec<u8> = plane
        .iter()
        .map(|s| (127.5 + gain * s).round().clamp(0.0, 255.0) as u8)
        .collect();
    Raster::new(3, size, size, gray.repeat(3)).expect("consistent extents")
}

/// Background class with a few rectangles and ellipses of other classes.
fn label_map(size: usize, rng: &mut ChaCha8Rng) -> Raster {
    let classes = PALETTE.len();
    let mut lab = vec![rng.gen_range(0..classes) as u8; size * size];
    let shapes = rng.gen_range(2..=4);
    for _ in 0..shapes {
        let c = rng.gen_range(0..classes) as u8;
        let (cy, cx) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
        let (ry, rx) = (
            rng.gen_range(size as f64 / 8.0..size as f64 / 2.5),
            rng.gen_range(size as f64 / 8.0..size as f64 / 2.5),
        );
        let ellipse = rng.gen_bool(0.5);
        for i in 0..size {
            for j in 0..size {
                let (dy, dx) = ((i as f64 + 0.5 - cy) / ry, (j as f64 + 0.5 - cx) / rx);
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    lab[i * size + j] = c;
                }
            }
        }
    }
    Raster::new(1, size, size, lab).expect("consistent extents")
}

fn colorize(lab: &Raster) -> Raster {
    let hw = lab.height * lab.width;
    let mut data = vec![0u8; 3 * hw];
    for (p, &c) in lab.data.iter().enumerate() {
        for ch in 0..3 {
            data[ch * hw + p] = PALETTE[c as usize][ch];
        }
    }
    Raster::new(3, lab.height, lab.width, data).expect("consistent extents")
}

/// Class colors shifted per image and perturbed by Gaussian pixel noise.
fn render_photo(lab: &Raster, rng: &mut ChaCha8Rng) -> Raster {
    let noise = Normal::new(0.0, 12.0).expect("finite std");
    let shift: Vec<[f64; 3]> = (0..PALETTE.len())
        .map(|_| {
            [
                rng.gen_range(-15.0..15.0),
                rng.gen_range(-15.0..15.0),
                rng.gen_range(-15.0..15.0),
            ]
        })
        .collect();
    let hw = lab.height * lab.width;
    let mut data = vec![0u8; 3 * hw];
    for ch in 0..3 {
        for (p, &c) in lab.data.iter().enumerate() {
            let v = PALETTE[c as usize][ch] as f64 + shift[c as usize][ch] + noise.sample(rng);
            data[ch * hw + p] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Raster::new(3, lab.height, lab.width, data).expect("consistent extents")
}

/// Random solid rectangles on a random background color.
fn shapes_image(size: usize, rng: &mut ChaCha8Rng) -> Raster {
    let hw = size * size;
    let bg: [u8; 3] = rng.gen();
    let mut data: Vec<u8> = (0..3).flat_map(|ch| std::iter::repeat_n(bg[ch], hw)).collect();
    for _ in 0..rng.gen_range(3..=6) {
        let col: [u8; 3] = rng.gen();
        let (y0, x0) = (rng.gen_range(0..size), rng.gen_range(0..size));
        let (h, w) = (rng.gen_range(1..=size / 2), rng.gen_range(1..=size / 2));
        for i in y0..(y0 + h).min(size) {
            for j in x0..(x0 + w).min(size) {
                for ch in 0..3 {
                    data[ch * hw + i * size + j] = col[ch];
                }
            }
        }
    }
    Raster::new(3, size, size, data).expect("consistent extents")
}

/// 3x3 mean filter with clamped borders, rounded half up.
fn box_blur(r: &Raster) -> Raster {
    let (h, w) = (r.height as isize, r.width as isize);
    let mut data = vec![0u8; r.data.len()];
    for ch in 0..r.channels {
        let plane = &r.data[ch * r.height * r.width..(ch + 1) * r.height * r.width];
        for i in 0..h {
            for j in 0..w {
                let mut s = 0u32;
                for di in -1..=1 {
                    for dj in -1..=1 {
                        let (y, x) = ((i + di).clamp(0, h - 1), (j + dj).clamp(0, w - 1));
                        s += plane[(y * w + x) as usize] as u32;
                    }
                }
                data[ch * r.height * r.width + (i * w + j) as usize] = ((s + 4) / 9) as u8;
            }
        }
    }
    Raster { data, ..r.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::l1_loss;

    #[test]
    fn invert_targets_are_exact_negations() {
        let ds = make_toy_dataset(ToyKind::Invert, 4, 16, 7).unwrap();
        for (x, y) in ds.a.iter().zip(&ds.b) {
            let (tx, ty) = (x.to_tensor::<f32>(), y.to_tensor::<f32>());
            assert_eq!(l1_loss(&ty, &tx.scale(-1.0)).unwrap(), 0.0);
        }
    }

    #[test]
    fn segmentation_labels_and_palette() {
        assert!(palette_min_distance(&PALETTE) >= 0.5);
        let ds = make_toy_dataset(ToyKind::ColormapSeg, 6, 16, 3).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        assert_eq!(labels.len(), 6);
        assert!(labels.iter().all(|l| l.data.iter().all(|&c| c < 4)));
        let hw = 256;
        for (lab, y) in labels.iter().zip(&ds.b) {
            for p in 0..hw {
                let c = PALETTE[lab.data[p] as usize];
                assert_eq!([y.data[p], y.data[hw + p], y.data[2 * hw + p]], c);
            }
        }
    }

    #[test]
    fn blur_pairs_and_determinism() {
        let ds = make_toy_dataset(ToyKind::BlurPair, 3, 8, 1).unwrap();
        assert_eq!(ds.a[0], box_blur(&ds.b[0]));
        assert_eq!(ds, make_toy_dataset(ToyKind::BlurPair, 3, 8, 1).unwrap());
        assert_ne!(ds, make_toy_dataset(ToyKind::BlurPair, 3, 8, 2).unwrap());
        assert!(make_toy_dataset(ToyKind::Invert, 1, 10, 0).is_err());
        assert!("sepia".parse::<ToyKind>().is_err());
        assert_eq!("colormap-seg".parse::<ToyKind>().unwrap(), ToyKind::ColormapSeg);
    }
}
