//! The full set of networks trained together.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore};
use crate::discriminator::{Conditioning, PatchDiscriminator};
use crate::error::Result;
use crate::generators::{GeneratorConfig, GeneratorPair};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Aligned `(x, y)` pairs; L1 reconstruction and conditional critics.
    Paired,
    /// Independent `x` and `y`; cycle consistency and unconditional critics.
    Unpaired,
}

impl Regime {
    pub fn conditioning(self) -> Conditioning {
        match self {
            Regime::Paired => Conditioning::Conditional,
            Regime::Unpaired => Conditioning::Unconditional,
        }
    }
}

/// Generator pair plus the critics `d_x` (judges domain X) and `d_y`.
#[derive(Clone, Debug)]
pub struct RevGan {
    pub pair: GeneratorPair,
    pub d_x: PatchDiscriminator,
    pub d_y: PatchDiscriminator,
    pub regime: Regime,
}

impl RevGan {
    /// Registers zero-filled parameters: `genpair.*`, `d_x.*`, `d_y.*`.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        gen: &GeneratorConfig,
        regime: Regime,
        ndf: usize,
    ) -> Result<Self> {
        let pair = GeneratorPair::register(store, gen)?;
        let c = regime.conditioning();
        let d_x = PatchDiscriminator::register(store, "d_x", gen.channels_x, ndf, c)?;
        let d_y = PatchDiscriminator::register(store, "d_y", gen.channels_y, ndf, c)?;
        Ok(Self { pair, d_x, d_y, regime })
    }

    /// Registers and initializes every network from one seed.
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        gen: &GeneratorConfig,
        regime: Regime,
        ndf: usize,
        seed: u64,
    ) -> Result<Self> {
        let m = Self::register(store, gen, regime, ndf)?;
        m.init(store, seed);
        Ok(m)
    }

    /// Gaussian weights, zero biases, zeroed trailing core convs if enabled.
    /// Each network draws from its own stream derived from `seed`.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        self.pair.init(store, seed);
        crate::layers::init_gaussian(
            store,
            &self.d_x.param_ids(),
            seed.wrapping_add(1),
            crate::layers::INIT_STD,
        );
        crate::layers::init_gaussian(
            store,
            &self.d_y.param_ids(),
            seed.wrapping_add(2),
            crate::layers::INIT_STD,
        );
    }

    pub fn generator_ids(&self) -> Vec<ParamId> {
        self.pair.param_ids()
    }

    pub fn critic_ids(&self) -> Vec<ParamId> {
        let mut ids = self.d_x.param_ids();
        ids.extend(self.d_y.param_ids());
        ids
    }
}
