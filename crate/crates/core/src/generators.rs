//! Encoders, decoders and the generator pair sharing one invertible core.
//!
//! `F = dec_y . core . enc_x` and `G = dec_x . core^-1 . enc_y`. Only the
//! core is shared; each domain has its own encoder and decoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::PaddingSpec;
use crate::layers::{init_gaussian, Conv2dLayer, ConvTransposeLayer, INIT_STD, NORM_EPS};
use crate::reversible::{sequence_forward, Direction, RetentionMode, ReversibleSequence};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One of the two image domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    X,
    Y,
}

impl Domain {
    pub fn other(self) -> Self {
        match self {
            Domain::X => Domain::Y,
            Domain::Y => Domain::X,
        }
    }
}

/// Lifts an image to `4 * width` channels at a quarter of its extent.
#[derive(Clone, Debug)]
pub struct Encoder2D {
    pub convs: [Conv2dLayer; 3],
}

impl Encoder2D {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        width: usize,
    ) -> Result<Self> {
        let k = width;
        Ok(Self {
            convs: [
                Conv2dLayer::register(
                    store,
                    &format!("{prefix}.conv1"),
                    in_channels,
                    k,
                    7,
                    1,
                    PaddingSpec::Reflect(3),
                )?,
                Conv2dLayer::register(store, &format!("{prefix}.conv2"), k, 2 * k, 3, 2, PaddingSpec::Zero(1))?,
                Conv2dLayer::register(
                    store,
                    &format!("{prefix}.conv3"),
                    2 * k,
                    4 * k,
                    3,
                    2,
                    PaddingSpec::Zero(1),
                )?,
            ],
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(tape, store, h)?;
            h = tape.instance_norm(h, NORM_EPS)?;
            h = tape.relu(h)?;
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(|c| c.param_ids()).collect()
    }
}

/// Projects `4 * width` features back to an image in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Decoder2D {
    pub ups: [ConvTransposeLayer; 2],
    pub out: Conv2dLayer,
}

impl Decoder2D {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        out_channels: usize,
        width: usize,
    ) -> Result<Self> {
        let k = width;
        Ok(Self {
            ups: [
                ConvTransposeLayer::register(store, &format!("{prefix}.up1"), 4 * k, 2 * k, 3, 2, 1, 1)?,
                ConvTransposeLayer::register(store, &format!("{prefix}.up2"), 2 * k, k, 3, 2, 1, 1)?,
            ],
            out: Conv2dLayer::register(
                store,
                &format!("{prefix}.conv_out"),
                k,
                out_channels,
                7,
                1,
                PaddingSpec::Reflect(3),
            )?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let mut h = h;
        for up in &self.ups {
            h = up.forward(tape, store, h)?;
            h = tape.instance_norm(h, NORM_EPS)?;
            h = tape.relu(h)?;
        }
        let h = self.out.forward(tape, store, h)?;
        tape.tanh(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.ups.iter().flat_map(|u| u.param_ids()).collect();
        ids.extend(self.out.param_ids());
        ids
    }
}

/// Architecture of a [`GeneratorPair`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Base width `K`; the core runs at `4K` channels.
    pub width: usize,
    /// Number of coupling blocks `R`.
    pub depth: usize,
    pub channels_x: usize,
    pub channels_y: usize,
    /// Square image extent; must be divisible by 4.
    pub image_size: usize,
    /// Adds a trailing conv to every subnet and zeroes it at init.
    pub zero_init: bool,
    pub mode: RetentionMode,
}

impl GeneratorConfig {
    pub fn new(width: usize, depth: usize, image_size: usize) -> Self {
        Self {
            width,
            depth,
            channels_x: 3,
            channels_y: 3,
            image_size,
            zero_init: true,
            mode: RetentionMode::Recompute,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::invalid("generator width must be at least 1"));
        }
        if self.channels_x == 0 || self.channels_y == 0 {
            return Err(Error::invalid("image channel counts must be at least 1"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "image extent {} is not divisible by 4",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Two encoders, two decoders and one shared reversible core.
#[derive(Clone, Debug)]
pub struct GeneratorPair {
    pub enc_x: Encoder2D,
    pub dec_x: Decoder2D,
    pub enc_y: Encoder2D,
    pub dec_y: Decoder2D,
    pub core: ReversibleSequence,
    pub config: GeneratorConfig,
}

/// Registers a pair under `genpair.*`, draws Gaussian weights from `seed`
/// and zeroes the trailing core convs when `cfg.zero_init` is set.
pub fn build_generator_pair<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<GeneratorPair> {
    let pair = GeneratorPair::register(store, cfg)?;
    pair.init(store, seed);
    Ok(pair)
}

impl GeneratorPair {
    /// Registers zero-filled parameters.
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.width;
        Ok(Self {
            enc_x: Encoder2D::register(store, "genpair.enc_x", cfg.channels_x, k)?,
            enc_y: Encoder2D::register(store, "genpair.enc_y", cfg.channels_y, k)?,
            core: ReversibleSequence::register(store, "genpair.core", 4 * k, cfg.depth, cfg.zero_init, cfg.mode)?,
            dec_x: Decoder2D::register(store, "genpair.dec_x", cfg.channels_x, k)?,
            dec_y: Decoder2D::register(store, "genpair.dec_y", cfg.channels_y, k)?,
            config: cfg.clone(),
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        init_gaussian(store, &self.param_ids(), seed, INIT_STD);
        if self.config.zero_init {
            self.core.zero_init(store);
        }
    }

    /// Every parameter of the pair, each exactly once.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.enc_x.param_ids();
        ids.extend(self.enc_y.param_ids());
        ids.extend(self.core.param_ids());
        ids.extend(self.dec_x.param_ids());
        ids.extend(self.dec_y.param_ids());
        ids
    }

    pub fn encoder(&self, d: Domain) -> &Encoder2D {
        match d {
            Domain::X => &self.enc_x,
            Domain::Y => &self.enc_y,
        }
    }

    pub fn decoder(&self, d: Domain) -> &Decoder2D {
        match d {
            Domain::X => &self.dec_x,
            Domain::Y => &self.dec_y,
        }
    }

    fn channels(&self, d: Domain) -> usize {
        match d {
            Domain::X => self.config.channels_x,
            Domain::Y => self.config.channels_y,
        }
    }

    /// Checks that `shape` is an image batch of domain `d` at the built extent.
    pub fn check_image(&self, shape: &[usize], d: Domain) -> Result<()> {
        let s = self.config.image_size;
        match shape {
            [n, c, h, w] if *n >= 1 && *c == self.channels(d) && *h == s && *w == s => Ok(()),
            _ => Err(Error::invalid(format!(
                "expected a [N, {}, {s}, {s}] image batch for domain {d:?}, got {shape:?}",
                self.channels(d)
            ))),
        }
    }

    /// Records the translation out of domain `from` on `tape`.
    pub fn translate<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, from: Domain) -> Result<Var> {
        self.check_image(&tape.shape(x)?, from)?;
        let h = self.encoder(from).forward(tape, store, x)?;
        let dir = match from {
            Domain::X => Direction::Xy,
            Domain::Y => Direction::Yx,
        };
        let h = self.core.forward(tape, store, h, dir)?;
        self.decoder(from.other()).forward(tape, store, h)
    }

    fn translate_tensor<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, from: Domain) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let v = tape.constant(x.clone());
        let out = self.translate(&mut tape, store, v, from)?;
        Ok(tape.value(out).clone())
    }

    /// `F(x) = dec_y(core(enc_x(x)))`.
    pub fn translate_xy<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.translate_tensor(store, x, Domain::X)
    }

    /// `G(y) = dec_x(core^-1(enc_y(y)))`.
    pub fn translate_yx<T: Scalar>(&self, store: &ParamStore<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.translate_tensor(store, y, Domain::Y)
    }

    /// Encoder of `d` without recording gradients.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, d: Domain) -> Result<Tensor<T>> {
        self.check_image(x.shape(), d)?;
        let mut tape = Tape::no_grad();
        let v = tape.constant(x.clone());
        let out = self.encoder(d).forward(&mut tape, store, v)?;
        Ok(tape.value(out).clone())
    }

    /// Decoder of `d` without recording gradients.
    pub fn decode<T: Scalar>(&self, store: &ParamStore<T>, h: &Tensor<T>, d: Domain) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let v = tape.constant(h.clone());
        let out = self.decoder(d).forward(&mut tape, store, v)?;
        Ok(tape.value(out).clone())
    }
}

/// `max |core^-1(core(enc_x(x))) - enc_x(x)|`.
pub fn core_cycle_check<T: Scalar>(pair: &GeneratorPair, store: &ParamStore<T>, x: &Tensor<T>) -> Result<f64> {
    let h = pair.encode(store, x, Domain::X)?;
    let y = sequence_forward(&pair.core, store, &h, Direction::Xy)?;
    let back = sequence_forward(&pair.core, store, &y, Direction::Yx)?;
    Ok(back.max_abs_diff(&h)?.as_f64())
}
