//! Additive-coupling reversible blocks and the constant-memory backward pass.
//!
//! A block splits its input channels into halves `(x1, x2)` and computes
//!
//! ```text
//! y1 = x1 + nn1(x2)        x2 = y2 - nn2(y1)
//! y2 = x2 + nn2(y1)        x1 = y1 - nn1(x2)
//! ```
//!
//! The subnets need not be invertible. Because the inverse is available, a
//! sequence of blocks run in [`RetentionMode::Recompute`] keeps only its
//! output for the backward pass and rebuilds every block input on the way
//! back.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, RetentionPolicy, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, PaddingSpec};
use crate::layers::{Conv2dLayer, NORM_EPS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which way a sequence is traversed: `Xy` applies blocks forward,
/// `Yx` applies the inverses in reverse order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Xy,
    Yx,
}

impl Direction {
    pub fn reversed(self) -> Self {
        match self {
            Direction::Xy => Direction::Yx,
            Direction::Yx => Direction::Xy,
        }
    }
}

/// How a sequence participates in backpropagation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetentionMode {
    /// Every block is recorded op by op; activations grow with depth.
    Stored,
    /// One tape node per sequence; inputs are rebuilt from outputs.
    Recompute,
}

impl RetentionMode {
    fn slot(self) -> usize {
        match self {
            RetentionMode::Stored => 0,
            RetentionMode::Recompute => 1,
        }
    }
}

/// Evaluation and retention counters shared by the blocks of one sequence.
#[derive(Debug, Default)]
pub struct Counters {
    subnet_evals: AtomicUsize,
    recomputed_bytes: AtomicUsize,
    last_retained: Mutex<[Option<usize>; 2]>,
}

/// Snapshot of [`Counters`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub subnet_evals: usize,
    pub recomputed_bytes: usize,
    pub retained_stored: Option<usize>,
    pub retained_recompute: Option<usize>,
}

/// `conv3x3(reflect 1) -> instance_norm -> relu [-> conv3x3(reflect 1)]`,
/// volume preserving.
#[derive(Clone, Debug, PartialEq)]
pub struct SubNet {
    pub conv1: Conv2dLayer,
    pub conv2: Option<Conv2dLayer>,
}

impl SubNet {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        trailing_conv: bool,
    ) -> Result<Self> {
        let conv = |store: &mut ParamStore<T>, name: &str| {
            Conv2dLayer::register(
                store,
                &format!("{prefix}.{name}"),
                channels,
                channels,
                3,
                1,
                PaddingSpec::Reflect(1),
            )
        };
        let conv1 = conv(store, "conv1")?;
        let conv2 = if trailing_conv {
            Some(conv(store, "conv2")?)
        } else {
            None
        };
        Ok(Self { conv1, conv2 })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, store, x)?;
        let h = tape.instance_norm(h, NORM_EPS)?;
        let h = tape.relu(h)?;
        match &self.conv2 {
            Some(c) => c.forward(tape, store, h),
            None => Ok(h),
        }
    }

    /// The layer zeroed by [`zero_init`].
    pub fn last_conv(&self) -> &Conv2dLayer {
        self.conv2.as_ref().unwrap_or(&self.conv1)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.conv1.param_ids().to_vec();
        if let Some(c) = &self.conv2 {
            ids.extend(c.param_ids());
        }
        ids
    }
}

#[derive(Clone, Debug)]
pub struct CouplingBlock {
    pub nn1: SubNet,
    pub nn2: SubNet,
    /// Total input channels; always even.
    pub channels: usize,
    counters: Arc<Counters>,
}

fn check_channels(channels: usize) -> Result<()> {
    if channels == 0 || !channels.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "reversible blocks need an even, nonzero channel count, got {channels}"
        )));
    }
    Ok(())
}

impl CouplingBlock {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        trailing_conv: bool,
    ) -> Result<Self> {
        Self::register_with(store, prefix, channels, trailing_conv, Arc::default())
    }

    fn register_with<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        trailing_conv: bool,
        counters: Arc<Counters>,
    ) -> Result<Self> {
        check_channels(channels)?;
        let half = channels / 2;
        Ok(Self {
            nn1: SubNet::register(store, &format!("{prefix}.nn1"), half, trailing_conv)?,
            nn2: SubNet::register(store, &format!("{prefix}.nn2"), half, trailing_conv)?,
            channels,
            counters,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.nn1.param_ids();
        ids.extend(self.nn2.param_ids());
        ids
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, c, _, _] if *c == self.channels => Ok(()),
            [_, c, _, _] if c % 2 != 0 => Err(Error::invalid(format!(
                "coupling block input has odd channel count {c}"
            ))),
            _ => Err(Error::invalid(format!(
                "coupling block expects [N, {}, H, W], got {shape:?}",
                self.channels
            ))),
        }
    }

    fn eval<T: Scalar>(&self, net: &SubNet, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.counters.subnet_evals.fetch_add(1, Ordering::Relaxed);
        net.forward(tape, store, x)
    }

    /// Records `y = (x1 + nn1(x2), x2 + nn2(y1))`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.check_input(&tape.shape(x)?)?;
        let (x1, x2) = tape.channel_split(x)?;
        let n1 = self.eval(&self.nn1, tape, store, x2)?;
        let y1 = tape.add(x1, n1)?;
        let n2 = self.eval(&self.nn2, tape, store, y1)?;
        let y2 = tape.add(x2, n2)?;
        tape.concat(y1, y2)
    }

    /// Records `x = (y1 - nn1(x2), y2 - nn2(y1))`.
    pub fn inverse<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, y: Var) -> Result<Var> {
        self.check_input(&tape.shape(y)?)?;
        let (y1, y2) = tape.channel_split(y)?;
        let n2 = self.eval(&self.nn2, tape, store, y1)?;
        let x2 = tape.sub(y2, n2)?;
        let n1 = self.eval(&self.nn1, tape, store, x2)?;
        let x1 = tape.sub(y1, n1)?;
        tape.concat(x1, x2)
    }

    fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, direction: Direction) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let run = |net: &SubNet, v: &Tensor<T>| {
            let mut tape = Tape::no_grad();
            let h = tape.constant(v.clone());
            let out = self.eval(net, &mut tape, store, h)?;
            Ok(tape.value(out).clone())
        };
        additive_coupling(x, |v| run(&self.nn1, v), |v| run(&self.nn2, v), direction)
    }

    /// Rebuilds this block's input from its output and backpropagates
    /// `grad_out` through it. Returns `(input, grad_input)`.
    fn backward_from_output<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        out: &Tensor<T>,
        grad_out: &Tensor<T>,
        direction: Direction,
        template: &Tape<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(out.shape())?;
        let (o1, o2) = kernels::channel_split(out)?;
        let (g1, g2) = kernels::channel_split(grad_out)?;
        match direction {
            Direction::Xy => {
                // out = (y1, y2); rebuild x2 = y2 - nn2(y1), x1 = y1 - nn1(x2)
                let mut t2 = template.child();
                let y1v = t2.input(o1.clone());
                let n2 = self.eval(&self.nn2, &mut t2, store, y1v)?;
                let x2 = o2.sub(t2.value(n2))?;
                let mut t1 = template.child();
                let x2v = t1.input(x2.clone());
                let n1 = self.eval(&self.nn1, &mut t1, store, x2v)?;
                let x1 = o1.sub(t1.value(n1))?;

                let mut r2 = t2.backward_with_seed(n2, g2.clone(), store)?;
                let gy1 = match r2.take(y1v) {
                    Some(j) => g1.add(&j)?,
                    None => g1,
                };
                let mut r1 = t1.backward_with_seed(n1, gy1.clone(), store)?;
                let gx2 = match r1.take(x2v) {
                    Some(j) => g2.add(&j)?,
                    None => g2,
                };
                Ok((kernels::channel_concat(&x1, &x2)?, kernels::channel_concat(&gy1, &gx2)?))
            }
            Direction::Yx => {
                // out = (x1, x2); rebuild y1 = x1 + nn1(x2), y2 = x2 + nn2(y1)
                let mut t1 = template.child();
                let x2v = t1.input(o2.clone());
                let n1 = self.eval(&self.nn1, &mut t1, store, x2v)?;
                let y1 = o1.add(t1.value(n1))?;
                let mut t2 = template.child();
                let y1v = t2.input(y1.clone());
                let n2 = self.eval(&self.nn2, &mut t2, store, y1v)?;
                let y2 = o2.add(t2.value(n2))?;

                let mut r1 = t1.backward_with_seed(n1, g1.scale(-T::one()), store)?;
                let gx2 = match r1.take(x2v) {
                    Some(j) => g2.add(&j)?,
                    None => g2,
                };
                let mut r2 = t2.backward_with_seed(n2, gx2.scale(-T::one()), store)?;
                let gy1 = match r2.take(y1v) {
                    Some(j) => g1.add(&j)?,
                    None => g1,
                };
                Ok((kernels::channel_concat(&y1, &y2)?, kernels::channel_concat(&gy1, &gx2)?))
            }
        }
    }
}

/// The coupling equations for arbitrary subnets `nn1`, `nn2` acting on
/// channel halves. `Xy` maps `x -> y`, `Yx` maps `y -> x`.
pub fn additive_coupling<T, F1, F2>(x: &Tensor<T>, mut nn1: F1, mut nn2: F2, direction: Direction) -> Result<Tensor<T>>
where
    T: Scalar,
    F1: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    F2: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    let (_, c, _, _) = x.dims4()?;
    check_channels(c)?;
    let (a, b) = kernels::channel_split(x)?;
    let (first, second) = match direction {
        Direction::Xy => {
            let y1 = a.add(&nn1(&b)?)?;
            let y2 = b.add(&nn2(&y1)?)?;
            (y1, y2)
        }
        Direction::Yx => {
            let x2 = b.sub(&nn2(&a)?)?;
            let x1 = a.sub(&nn1(&x2)?)?;
            (x1, x2)
        }
    };
    kernels::channel_concat(&first, &second)
}

/// Applies one block without recording gradients.
pub fn coupling_forward<T: Scalar>(block: &CouplingBlock, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    block.apply(store, x, Direction::Xy)
}

/// Exact algebraic inverse of [`coupling_forward`] up to rounding.
pub fn coupling_inverse<T: Scalar>(block: &CouplingBlock, store: &ParamStore<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    block.apply(store, y, Direction::Yx)
}

/// Zeroes the final convolution of both subnets, making the block an exact identity.
pub fn zero_init<T: Scalar>(block: &CouplingBlock, store: &mut ParamStore<T>) {
    block.nn1.last_conv().zero(store);
    block.nn2.last_conv().zero(store);
}

/// A stack of coupling blocks sharing one set of counters.
#[derive(Clone, Debug)]
pub struct ReversibleSequence {
    blocks: Vec<CouplingBlock>,
    channels: usize,
    mode: RetentionMode,
    counters: Arc<Counters>,
}

impl ReversibleSequence {
    /// Registers `depth` blocks under `{prefix}.block{i}`.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        depth: usize,
        trailing_conv: bool,
        mode: RetentionMode,
    ) -> Result<Self> {
        check_channels(channels)?;
        let counters = Arc::<Counters>::default();
        let blocks = (0..depth)
            .map(|i| {
                CouplingBlock::register_with(
                    store,
                    &format!("{prefix}.block{i}"),
                    channels,
                    trailing_conv,
                    Arc::clone(&counters),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            channels,
            mode,
            counters,
        })
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn mode(&self) -> RetentionMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: RetentionMode) {
        self.mode = mode;
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.param_ids()).collect()
    }

    pub fn zero_init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for b in &self.blocks {
            zero_init(b, store);
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, c, _, _] if *c == self.channels => Ok(()),
            _ => Err(Error::invalid(format!(
                "reversible sequence expects [N, {}, H, W], got {shape:?}",
                self.channels
            ))),
        }
    }

    /// Records the sequence on `tape` according to its retention mode.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        direction: Direction,
    ) -> Result<Var> {
        self.check_input(&tape.shape(x)?)?;
        let start = tape.len();
        let out = if self.blocks.is_empty() {
            x
        } else {
            match self.mode {
                RetentionMode::Stored => {
                    let mut h = x;
                    match direction {
                        Direction::Xy => {
                            for b in &self.blocks {
                                h = b.forward(tape, store, h)?;
                            }
                        }
                        Direction::Yx => {
                            for b in self.blocks.iter().rev() {
                                h = b.inverse(tape, store, h)?;
                            }
                        }
                    }
                    h
                }
                RetentionMode::Recompute => {
                    let y = sequence_forward(self, store, tape.try_value(x)?, direction)?;
                    tape.reversible(x, self.clone(), direction, y)
                }
            }
        };
        let bytes = tape.retained_bytes_between(start, tape.len());
        self.counters.last_retained.lock().expect("counter lock")[self.mode.slot()] = Some(bytes);
        Ok(out)
    }

    /// Activation bytes the last recorded forward in `mode` kept for backward.
    pub fn retained_bytes(&self, mode: RetentionMode) -> Result<usize> {
        self.counters.last_retained.lock().expect("counter lock")[mode.slot()]
            .ok_or_else(|| Error::InvalidState(format!("no {mode:?} forward pass has been recorded for this sequence")))
    }

    pub fn diagnostics(&self) -> Diagnostics {
        let last = *self.counters.last_retained.lock().expect("counter lock");
        Diagnostics {
            subnet_evals: self.counters.subnet_evals.load(Ordering::Relaxed),
            recomputed_bytes: self.counters.recomputed_bytes.load(Ordering::Relaxed),
            retained_stored: last[0],
            retained_recompute: last[1],
        }
    }

    pub fn reset_counters(&self) {
        self.counters.subnet_evals.store(0, Ordering::Relaxed);
        self.counters.recomputed_bytes.store(0, Ordering::Relaxed);
        *self.counters.last_retained.lock().expect("counter lock") = [None, None];
    }
}

/// Applies the sequence without recording gradients.
pub fn sequence_forward<T: Scalar>(
    seq: &ReversibleSequence,
    store: &ParamStore<T>,
    x: &Tensor<T>,
    direction: Direction,
) -> Result<Tensor<T>> {
    seq.check_input(x.shape())?;
    let mut h = x.clone();
    match direction {
        Direction::Xy => {
            for b in &seq.blocks {
                h = b.apply(store, &h, Direction::Xy)?;
            }
        }
        Direction::Yx => {
            for b in seq.blocks.iter().rev() {
                h = b.apply(store, &h, Direction::Yx)?;
            }
        }
    }
    Ok(h)
}

/// Backpropagates `grad_y` through a sequence using only its output `y`.
///
/// Walks the blocks from the output end, rebuilding each block's input with
/// the inverse map and re-running its subnets on a short-lived local tape.
/// Parameter gradients accumulate into `store`; the gradient with respect to
/// the sequence input is returned.
pub fn sequence_backward_recompute<T: Scalar>(
    seq: &ReversibleSequence,
    store: &mut ParamStore<T>,
    y: &Tensor<T>,
    grad_y: &Tensor<T>,
    direction: Direction,
) -> Result<Tensor<T>> {
    backward_recompute(
        seq,
        store,
        y,
        grad_y,
        direction,
        &Tape::new(crate::autodiff::RetentionPolicy::ReversibleAware),
    )
}

pub(crate) fn backward_recompute<T: Scalar>(
    seq: &ReversibleSequence,
    store: &mut ParamStore<T>,
    y: &Tensor<T>,
    grad_y: &Tensor<T>,
    direction: Direction,
    template: &Tape<T>,
) -> Result<Tensor<T>> {
    seq.check_input(y.shape())?;
    y.expect_same_shape(grad_y)?;
    let mut h = y.clone();
    let mut g = grad_y.clone();
    let mut step = |b: &CouplingBlock, h: &mut Tensor<T>, g: &mut Tensor<T>, dir| -> Result<()> {
        let (hi, gi) = b.backward_from_output(store, h, g, dir, template)?;
        seq.counters.recomputed_bytes.fetch_add(hi.nbytes(), Ordering::Relaxed);
        *h = hi;
        *g = gi;
        Ok(())
    };
    match direction {
        Direction::Xy => {
            for b in seq.blocks.iter().rev() {
                step(b, &mut h, &mut g, Direction::Xy)?;
            }
        }
        Direction::Yx => {
            for b in seq.blocks.iter() {
                step(b, &mut h, &mut g, Direction::Yx)?;
            }
        }
    }
    Ok(g)
}

/// Gradients of `sum(out^2)` for the input and every sequence parameter.
fn sum_sq_grads<T: Scalar>(
    store: &mut ParamStore<T>,
    seq: &ReversibleSequence,
    x: &Tensor<T>,
    dir: Direction,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    store.zero_all_grads();
    let mut tape = Tape::new(RetentionPolicy::ReversibleAware);
    let xv = tape.input(x.clone());
    let y = seq.forward(&mut tape, store, xv, dir)?;
    let sq = tape.mul(y, y)?;
    let loss = tape.sum(sq)?;
    let mut g = tape.backward(loss, store)?;
    let gx = g
        .take(xv)
        .ok_or_else(|| Error::Internal("input gradient missing".into()))?;
    let pg = seq.param_ids().iter().map(|&id| store.grad(id).clone()).collect();
    store.zero_all_grads();
    Ok((gx, pg))
}

/// Stored-mode versus recompute-mode gradients of `sum(out^2)`, as
/// `(input, parameters)` discrepancies. Each is normwise:
/// `max |recompute - stored| / max(1, max |stored|)`, the parameter one over
/// the concatenation of all parameter gradients. Restores the mode of `seq`.
pub fn gradient_discrepancy<T: Scalar>(
    seq: &mut ReversibleSequence,
    store: &mut ParamStore<T>,
    x: &Tensor<T>,
    dir: Direction,
) -> Result<(f64, f64)> {
    let mode = seq.mode();
    seq.set_mode(RetentionMode::Stored);
    let stored = sum_sq_grads(store, seq, x, dir);
    seq.set_mode(RetentionMode::Recompute);
    let recomputed = sum_sq_grads(store, seq, x, dir);
    seq.set_mode(mode);
    let ((gx_s, pg_s), (gx_r, pg_r)) = (stored?, recomputed?);
    let input = gx_r.max_abs_diff(&gx_s)?.as_f64() / gx_s.max_abs().as_f64().max(1.0);
    let scale = pg_s.iter().map(|g| g.max_abs().as_f64()).fold(1.0, f64::max);
    let mut params = 0.0f64;
    for (a, b) in pg_r.iter().zip(&pg_s) {
        params = params.max(a.max_abs_diff(b)?.as_f64() / scale);
    }
    Ok((input, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::RetentionPolicy;
    use crate::layers::init_gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_seq<T: Scalar>(
        channels: usize,
        depth: usize,
        trailing: bool,
        seed: u64,
    ) -> (ParamStore<T>, ReversibleSequence) {
        let mut store = ParamStore::new();
        let seq =
            ReversibleSequence::register(&mut store, "core", channels, depth, trailing, RetentionMode::Stored).unwrap();
        init_gaussian(&mut store, &seq.param_ids(), seed, 0.3);
        // nonzero biases exercise the bias gradients too
        for id in seq.param_ids() {
            if store.get(id).name.ends_with(".bias") {
                let shape = store.value(id).shape().to_vec();
                store.set_value(id, Tensor::full(&shape, T::lit(0.05))).unwrap();
            }
        }
        (store, seq)
    }

    fn unit_input<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn toy_linear_subnets_follow_the_coupling_equations() {
        let x = Tensor::new(vec![1, 2, 1, 1], vec![1.0f64, 3.0]).unwrap();
        let nn1 = |v: &Tensor<f64>| Ok(v.scale(2.0));
        let nn2 = |v: &Tensor<f64>| Ok(v.scale(-1.0));
        let y = additive_coupling(&x, nn1, nn2, Direction::Xy).unwrap();
        assert_eq!(y.data(), &[7.0, -4.0]);
        let back = additive_coupling(&y, nn1, nn2, Direction::Yx).unwrap();
        assert_eq!(back.data(), &[1.0, 3.0]);
    }

    #[test]
    fn zero_parameters_give_identity() {
        let mut store = ParamStore::<f32>::new();
        let block = CouplingBlock::register(&mut store, "b", 4, false).unwrap();
        let x = unit_input::<f32>(&[2, 4, 5, 5], 1);
        assert!(coupling_forward(&block, &store, &x).unwrap().bit_eq(&x));
        assert!(coupling_inverse(&block, &store, &x).unwrap().bit_eq(&x));
    }

    #[test]
    fn odd_channels_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        assert!(matches!(
            CouplingBlock::register(&mut store, "b", 3, false),
            Err(Error::InvalidArgument(_))
        ));
        let (store, seq) = random_seq::<f32>(4, 1, false, 0);
        let x = unit_input::<f32>(&[1, 3, 4, 4], 0);
        assert!(matches!(
            sequence_forward(&seq, &store, &x, Direction::Xy),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn block_round_trip_both_directions() {
        for seed in 0..4 {
            let (s32, seq) = random_seq::<f32>(8, 1, true, seed);
            let b = &seq.blocks()[0];
            let x = unit_input::<f32>(&[2, 8, 6, 6], seed + 10);
            let fwd_inv = coupling_inverse(b, &s32, &coupling_forward(b, &s32, &x).unwrap()).unwrap();
            let inv_fwd = coupling_forward(b, &s32, &coupling_inverse(b, &s32, &x).unwrap()).unwrap();
            assert!(fwd_inv.max_abs_diff(&x).unwrap() < 1e-5);
            assert!(inv_fwd.max_abs_diff(&x).unwrap() < 1e-5);

            let (s64, seq) = random_seq::<f64>(8, 1, true, seed);
            let b = &seq.blocks()[0];
            let x = unit_input::<f64>(&[2, 8, 6, 6], seed + 10);
            let fwd_inv = coupling_inverse(b, &s64, &coupling_forward(b, &s64, &x).unwrap()).unwrap();
            assert!(fwd_inv.max_abs_diff(&x).unwrap() < 1e-11);
        }
    }

    #[test]
    fn sequence_round_trip_and_empty_sequence() {
        let (store, seq) = random_seq::<f32>(8, 8, false, 3);
        let h = unit_input::<f32>(&[1, 8, 8, 8], 4);
        let y = sequence_forward(&seq, &store, &h, Direction::Xy).unwrap();
        let back = sequence_forward(&seq, &store, &y, Direction::Yx).unwrap();
        assert!(back.max_abs_diff(&h).unwrap() < 1e-4);
        assert!(y.max_abs_diff(&h).unwrap() > 1e-2);

        let (store, empty) = random_seq::<f32>(8, 0, false, 3);
        for dir in [Direction::Xy, Direction::Yx] {
            assert!(sequence_forward(&empty, &store, &h, dir).unwrap().bit_eq(&h));
        }
    }

    #[test]
    fn zero_init_is_exact_identity() {
        let (mut store, seq) = random_seq::<f32>(8, 5, true, 9);
        seq.zero_init(&mut store);
        let h = unit_input::<f32>(&[2, 8, 4, 4], 2);
        for dir in [Direction::Xy, Direction::Yx] {
            assert!(sequence_forward(&seq, &store, &h, dir).unwrap().bit_eq(&h));
        }
    }

    /// Gradients of `sum(out^2)` for input and all parameters.
    fn grads<T: Scalar>(
        store: &mut ParamStore<T>,
        seq: &ReversibleSequence,
        x: &Tensor<T>,
        dir: Direction,
    ) -> (Tensor<T>, Vec<Tensor<T>>, usize) {
        store.zero_all_grads();
        let mut tape = Tape::new(RetentionPolicy::ReversibleAware);
        let xv = tape.input(x.clone());
        let y = seq.forward(&mut tape, store, xv, dir).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq).unwrap();
        let before = tape.retained_activation_bytes();
        let mut g = tape.backward(loss, store).unwrap();
        let gx = g.take(xv).unwrap();
        let pg = seq.param_ids().iter().map(|&id| store.grad(id).clone()).collect();
        (gx, pg, before)
    }

    fn check_equivalence<T: Scalar>(depth: usize, tol: f64, dir: Direction) {
        let (mut store, mut seq) = random_seq::<T>(4, depth, true, 21 + depth as u64);
        let x = unit_input::<T>(&[2, 4, 5, 5], 5);
        let (di, dp) = gradient_discrepancy(&mut seq, &mut store, &x, dir).unwrap();
        assert!(
            di < tol && dp < tol,
            "depth {depth} {dir:?} {:?}: input {di}, params {dp}",
            T::DTYPE
        );
        assert_eq!(seq.mode(), RetentionMode::Stored);
    }

    #[test]
    fn recompute_gradients_match_stored_gradients() {
        for depth in [1, 2, 4, 8] {
            for dir in [Direction::Xy, Direction::Yx] {
                check_equivalence::<f64>(depth, 1e-10, dir);
                check_equivalence::<f32>(depth, 1e-5, dir);
            }
        }
    }

    #[test]
    fn zero_init_backward_passes_gradient_straight_through() {
        let (mut store, mut seq) = random_seq::<f64>(4, 3, true, 2);
        seq.zero_init(&mut store);
        seq.set_mode(RetentionMode::Recompute);
        let y = unit_input::<f64>(&[1, 4, 4, 4], 3);
        let gy = unit_input::<f64>(&[1, 4, 4, 4], 4);
        let gx = sequence_backward_recompute(&seq, &mut store, &y, &gy, Direction::Xy).unwrap();
        assert!(gx.bit_eq(&gy));
        for b in seq.blocks() {
            for net in [&b.nn1, &b.nn2] {
                for id in net.conv1.param_ids() {
                    assert_eq!(store.grad(id).max_abs(), 0.0);
                }
                assert!(store.grad(net.conv2.as_ref().unwrap().weight).max_abs() > 0.0);
            }
        }
    }

    #[test]
    fn recompute_retention_is_constant_and_stored_is_affine() {
        let x = unit_input::<f32>(&[1, 8, 6, 6], 1);
        let plane = 4 * 6 * 6 * 4;
        let per_block = 6 * plane + 2 * 4 * 4;
        let mut recompute = Vec::new();
        for depth in [0usize, 1, 2, 4, 8, 16, 30] {
            let (mut store, mut seq) = random_seq::<f32>(8, depth, false, 1);
            assert!(matches!(
                seq.retained_bytes(RetentionMode::Stored),
                Err(Error::InvalidState(_))
            ));
            grads(&mut store, &seq, &x, Direction::Xy);
            let stored = seq.retained_bytes(RetentionMode::Stored).unwrap();
            assert_eq!(stored, depth * per_block, "depth {depth}");
            seq.set_mode(RetentionMode::Recompute);
            grads(&mut store, &seq, &x, Direction::Xy);
            let r = seq.retained_bytes(RetentionMode::Recompute).unwrap();
            if depth == 0 {
                assert_eq!(r, stored);
            } else {
                recompute.push(r);
            }
        }
        assert!(recompute.iter().all(|&r| r == recompute[0]));
        assert_eq!(recompute[0], 8 * 6 * 6 * 4);
    }

    #[test]
    fn recompute_costs_bounded_extra_subnet_evaluations() {
        let x = unit_input::<f32>(&[1, 4, 4, 4], 1);
        let (mut store, mut seq) = random_seq::<f32>(4, 4, false, 1);
        grads(&mut store, &seq, &x, Direction::Xy);
        let stored = seq.diagnostics().subnet_evals;
        seq.reset_counters();
        seq.set_mode(RetentionMode::Recompute);
        grads(&mut store, &seq, &x, Direction::Xy);
        let d = seq.diagnostics();
        let ratio = d.subnet_evals as f64 / stored as f64;
        assert!((1.3..=2.5).contains(&ratio), "ratio {ratio}");
        assert_eq!(d.recomputed_bytes, 4 * x.nbytes());
    }
}
