//! Images, toy datasets, file formats and evaluation metrics.

pub mod dir;
pub mod metrics;
pub mod ppm;
pub mod toy;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use toy::{make_toy_dataset, ToyKind, PALETTE};

/// An 8-bit image in planar `C x H x W` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "raster {channels}x{height}x{width} does not hold {} bytes",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: u8) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    /// `[1, C, H, W]` tensor in `[-1, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, self.channels, self.height, self.width], |i| {
            normalize(self.data[i])
        })
    }

    /// Quantizes batch item `n` of an NCHW tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        let item = t.batch_item(n)?;
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            data: item.data().iter().map(|&v| quantize(v)).collect(),
        })
    }
}

/// Maps `v` in `0..=255` to `v / 127.5 - 1`, evaluated as `(2v - 255) / 255`
/// so that `normalize(255 - v) == -normalize(v)` exactly.
pub fn normalize<T: Scalar>(v: u8) -> T {
    T::lit((2.0 * v as f64 - 255.0) / 255.0)
}

/// Inverse of [`normalize`]: rounds half away from zero and clamps to `0..=255`.
pub fn quantize<T: Scalar>(t: T) -> u8 {
    let v = (t.as_f64() + 1.0) * 127.5;
    if v.is_nan() {
        return 0;
    }
    v.round().clamp(0.0, 255.0) as u8
}

/// Stacks equally shaped rasters into `[N, C, H, W]`.
pub fn stack<T: Scalar>(rasters: &[&Raster]) -> Result<Tensor<T>> {
    let first = rasters
        .first()
        .ok_or_else(|| Error::invalid("cannot stack zero rasters"))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(rasters.len() * c * h * w);
    for r in rasters {
        if (r.channels, r.height, r.width) != (c, h, w) {
            return Err(Error::invalid("rasters differ in shape"));
        }
        data.extend(r.data.iter().map(|&v| normalize::<T>(v)));
    }
    Tensor::new(vec![rasters.len(), c, h, w], data)
}

/// One training example (or batch) with both domains in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct SampleBatch<T: Scalar> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    /// `x[i]` corresponds to `y[i]`.
    pub paired: bool,
    /// Class grid of `y`, row-major per item.
    pub labels: Option<Vec<u8>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    Paired,
    Unpaired,
}

/// Domain-A images, domain-B images and optional B label maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub a: Vec<Raster>,
    pub b: Vec<Raster>,
    pub labels: Option<Vec<Raster>>,
    pub pairing: Pairing,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if self.pairing == Pairing::Paired && self.a.len() != self.b.len() {
            return Err(Error::invalid(format!(
                "paired dataset has {} A images but {} B images",
                self.a.len(),
                self.b.len()
            )));
        }
        if self.b.is_empty() {
            return Err(Error::invalid("dataset has no B images"));
        }
        let (h, w) = (self.a[0].height, self.a[0].width);
        if self.a.iter().chain(&self.b).any(|r| (r.height, r.width) != (h, w)) {
            return Err(Error::invalid("dataset images differ in extent"));
        }
        Ok(())
    }

    /// Square extent shared by all images.
    pub fn image_size(&self) -> Result<usize> {
        let r = self.a.first().ok_or_else(|| Error::invalid("dataset is empty"))?;
        if r.height != r.width {
            return Err(Error::invalid(format!(
                "images are {}x{}, not square",
                r.height, r.width
            )));
        }
        Ok(r.height)
    }

    /// Visiting order of epoch `epoch`: `(a_index, b_index)` per iteration.
    /// Paired data keeps `b_index == a_index`; unpaired data draws an
    /// independent permutation for `b`. A pure function of its arguments.
    pub fn epoch_order(&self, seed: u64, epoch: usize, paired: bool) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0000);
        rng.set_stream(epoch as u64);
        let mut a: Vec<usize> = (0..self.a.len()).collect();
        a.shuffle(&mut rng);
        if paired {
            return a.into_iter().map(|i| (i, i)).collect();
        }
        let mut b: Vec<usize> = (0..self.b.len()).collect();
        b.shuffle(&mut rng);
        a.into_iter().zip(b.into_iter().cycle()).collect()
    }

    /// Batch of one for the given indices.
    pub fn sample<T: Scalar>(&self, a: usize, b: usize, paired: bool) -> Result<SampleBatch<T>> {
        let ra = self
            .a
            .get(a)
            .ok_or_else(|| Error::invalid(format!("A index {a} out of range")))?;
        let rb = self
            .b
            .get(b)
            .ok_or_else(|| Error::invalid(format!("B index {b} out of range")))?;
        Ok(SampleBatch {
            x: ra.to_tensor(),
            y: rb.to_tensor(),
            paired: paired && a == b && self.pairing == Pairing::Paired,
            labels: self.labels.as_ref().map(|l| l[b].data.clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_endpoints_and_negation() {
        assert_eq!(normalize::<f64>(0), -1.0);
        assert_eq!(normalize::<f64>(255), 1.0);
        assert!((normalize::<f64>(128) - 0.00392).abs() < 1e-5);
        for v in 0..=255u8 {
            assert_eq!(normalize::<f32>(255 - v), -normalize::<f32>(v));
            assert_eq!(quantize(normalize::<f32>(v)), v);
            assert!((normalize::<f64>(v) - (v as f64 / 127.5 - 1.0)).abs() <= f64::EPSILON);
        }
        assert_eq!(quantize(2.0f32), 255);
        assert_eq!(quantize(-3.0f64), 0);
    }

    #[test]
    fn epoch_order_is_a_permutation_and_deterministic() {
        let ds = make_toy_dataset(ToyKind::Invert, 10, 8, 1).unwrap();
        let o = ds.epoch_order(3, 2, false);
        assert_eq!(o, ds.epoch_order(3, 2, false));
        assert_ne!(o, ds.epoch_order(3, 3, false));
        let mut a: Vec<_> = o.iter().map(|p| p.0).collect();
        a.sort_unstable();
        assert_eq!(a, (0..10).collect::<Vec<_>>());
        assert!(ds.epoch_order(3, 2, true).iter().all(|(a, b)| a == b));
    }
}
