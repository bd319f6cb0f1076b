//! PatchGAN discriminators.
//!
//! Four 4x4 stride-2 convolutions (zero pad 1) with LeakyReLU(0.2), then a
//! 1x1 convolution to one logit per patch. For an `S x S` input the grid is
//! `S/16 x S/16` when `S` is a multiple of 16.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, PaddingSpec};
use crate::layers::{init_gaussian, Conv2dLayer, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Smallest accepted input extent.
pub const MIN_EXTENT: usize = 16;

/// Default base width of the first layer.
pub const DEFAULT_NDF: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// Input is `condition || candidate` along channels.
    Conditional,
    Unconditional,
}

#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub convs: [Conv2dLayer; 4],
    pub head: Conv2dLayer,
    pub image_channels: usize,
    pub conditioning: Conditioning,
}

/// Output extent of the stride-2 cascade for an input extent `s`.
pub fn output_extent(s: usize) -> usize {
    (0..4).fold(s, |e, _| (e + 2 - 4) / 2 + 1)
}

/// Side length of the input patch seen by one output cell.
pub fn receptive_field() -> usize {
    // r_in = (r_out - 1) * stride + kernel, from the 1x1 head back
    (0..4).fold(1, |r, _| (r - 1) * 2 + 4)
}

impl PatchDiscriminator {
    /// Registers zero-filled parameters under `prefix`.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        image_channels: usize,
        ndf: usize,
        conditioning: Conditioning,
    ) -> Result<Self> {
        if ndf == 0 || image_channels == 0 {
            return Err(Error::invalid("discriminator widths must be at least 1"));
        }
        let cin = match conditioning {
            Conditioning::Conditional => 2 * image_channels,
            Conditioning::Unconditional => image_channels,
        };
        let widths = [cin, ndf, 2 * ndf, 4 * ndf, 8 * ndf];
        let mut convs = Vec::with_capacity(4);
        for i in 0..4 {
            convs.push(Conv2dLayer::register(
                store,
                &format!("{prefix}.conv{}", i + 1),
                widths[i],
                widths[i + 1],
                4,
                2,
                PaddingSpec::Zero(1),
            )?);
        }
        let head = Conv2dLayer::register(store, &format!("{prefix}.head"), 8 * ndf, 1, 1, 1, PaddingSpec::None)?;
        Ok(Self {
            convs: convs.try_into().expect("four layers"),
            head,
            image_channels,
            conditioning,
        })
    }

    /// Registers and draws Gaussian weights from `seed`.
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        image_channels: usize,
        ndf: usize,
        conditioning: Conditioning,
        seed: u64,
    ) -> Result<Self> {
        let d = Self::register(store, prefix, image_channels, ndf, conditioning)?;
        init_gaussian(store, &d.param_ids(), seed, INIT_STD);
        Ok(d)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.convs.iter().flat_map(|c| c.param_ids()).collect();
        ids.extend(self.head.param_ids());
        ids
    }

    fn check(&self, image: &[usize], condition: Option<&[usize]>) -> Result<()> {
        let [_, c, h, w] = image[..] else {
            return Err(Error::invalid(format!(
                "discriminator input must be NCHW, got {image:?}"
            )));
        };
        if c != self.image_channels {
            return Err(Error::invalid(format!(
                "discriminator expects {} image channels, got {c}",
                self.image_channels
            )));
        }
        if h < MIN_EXTENT || w < MIN_EXTENT {
            return Err(Error::invalid(format!(
                "discriminator input {h}x{w} is smaller than {MIN_EXTENT}x{MIN_EXTENT}"
            )));
        }
        match (self.conditioning, condition) {
            (Conditioning::Conditional, Some(s)) if s == image => Ok(()),
            (Conditioning::Conditional, Some(s)) => Err(Error::invalid(format!(
                "condition shape {s:?} does not match image {image:?}"
            ))),
            (Conditioning::Conditional, None) => Err(Error::invalid("conditional discriminator needs a condition")),
            (Conditioning::Unconditional, Some(_)) => {
                Err(Error::invalid("unconditional discriminator takes no condition"))
            }
            (Conditioning::Unconditional, None) => Ok(()),
        }
    }

    /// Records the patch logit grid `[N, 1, h', w']`.
    pub fn logits<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: Var,
        condition: Option<Var>,
    ) -> Result<Var> {
        let cshape = condition.map(|c| tape.shape(c)).transpose()?;
        self.check(&tape.shape(image)?, cshape.as_deref())?;
        let mut h = match condition {
            Some(c) => tape.concat(c, image)?,
            None => image,
        };
        for conv in &self.convs {
            h = conv.forward(tape, store, h)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        self.head.forward(tape, store, h)
    }

    /// Patch probabilities in `(0, 1)`, without recording gradients.
    pub fn discriminate<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        condition: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let i = tape.constant(image.clone());
        let c = condition.map(|c| tape.constant(c.clone()));
        let l = self.logits(&mut tape, store, i, c)?;
        Ok(kernels::sigmoid(tape.value(l)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64, size: usize) -> Tensor<f64> {
        Tensor::uniform(&[1, 3, size, size], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_weights_give_one_half() {
        let mut store = ParamStore::<f32>::new();
        let d = PatchDiscriminator::register(&mut store, "d", 3, 8, Conditioning::Unconditional).unwrap();
        let p = d.discriminate(&store, &image(0, 32).cast(), None).unwrap();
        assert_eq!(p.shape(), &[1, 1, 2, 2]);
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conditional_input_has_twice_the_channels() {
        let mut store = ParamStore::<f32>::new();
        let d = PatchDiscriminator::register(&mut store, "d", 3, 64, Conditioning::Conditional).unwrap();
        assert_eq!(store.value(d.convs[0].weight).shape(), &[64, 6, 4, 4]);
        assert_eq!(store.value(d.head.weight).shape(), &[1, 512, 1, 1]);
    }

    #[test]
    fn grid_extent_follows_the_shape_formula() {
        let mut e = 64;
        for _ in 0..4 {
            e = (e + 2 - 4) / 2 + 1;
        }
        assert_eq!(e, 4);
        assert_eq!(output_extent(64), 4);
        assert_eq!(output_extent(16), 1);
        let mut store = ParamStore::<f64>::new();
        let d = PatchDiscriminator::build(&mut store, "d", 3, 4, Conditioning::Unconditional, 1).unwrap();
        let p = d.discriminate(&store, &image(1, 64), None).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 4]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn condition_and_extent_errors() {
        let mut store = ParamStore::<f64>::new();
        let dc = PatchDiscriminator::build(&mut store, "dc", 3, 4, Conditioning::Conditional, 1).unwrap();
        let du = PatchDiscriminator::build(&mut store, "du", 3, 4, Conditioning::Unconditional, 1).unwrap();
        let x = image(0, 16);
        assert!(dc.discriminate(&store, &x, None).is_err());
        assert!(du.discriminate(&store, &x, Some(&x)).is_err());
        assert!(du.discriminate(&store, &image(0, 12), None).is_err());
        assert!(dc.discriminate(&store, &x, Some(&x)).is_ok());
    }

    #[test]
    fn perturbation_stays_inside_the_receptive_field() {
        let mut store = ParamStore::<f64>::new();
        let d = PatchDiscriminator::build(&mut store, "d", 3, 2, Conditioning::Unconditional, 3).unwrap();
        let size = 64;
        let x = image(4, size);
        let base = d.discriminate(&store, &x, None).unwrap();
        let (py, px) = (5, 7);
        let mut bumped = x.clone();
        bumped.data_mut()[py * size + px] += 0.5;
        let out = d.discriminate(&store, &bumped, None).unwrap();
        let rf = receptive_field() as isize;
        assert_eq!(rf, 46);
        let g = output_extent(size);
        let mut changed = 0;
        for i in 0..g {
            for j in 0..g {
                // cell (i, j) sees input rows [16 i - 15, 16 i - 15 + rf)
                let top = 16 * i as isize - 15;
                let left = 16 * j as isize - 15;
                let inside = (top..top + rf).contains(&(py as isize)) && (left..left + rf).contains(&(px as isize));
                let diff = (out.data()[i * g + j] - base.data()[i * g + j]).abs();
                if inside {
                    changed += usize::from(diff > 0.0);
                } else {
                    assert_eq!(diff, 0.0, "cell ({i},{j}) outside the field changed");
                }
            }
        }
        assert!(changed > 0);
    }
}
