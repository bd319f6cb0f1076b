//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every recorded operation produces one slot. A slot is *retained* when some
//! backward rule reads its value; after the forward pass the tape can drop
//! every other activation, and the bytes that survive are exactly what the
//! backward pass needs. Reversible sequences in recompute mode appear as a
//! single slot that retains only its output.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::kernels::{self, PaddingSpec};
use crate::reversible::{self, Direction, ReversibleSequence};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type ParamId = usize;

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Registry of every parameter of a model, addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter id {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id].grad
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id];
        if p.value.shape() != value.shape() {
            return Err(Error::invalid(format!(
                "parameter {}: shape {:?} does not match {:?}",
                p.name,
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate()
    }

    /// Ids whose name starts with `prefix`, in registration order.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        self.params[id].grad.add_assign(g)
    }

    pub fn zero_grads(&mut self, ids: &[ParamId]) {
        for &id in ids {
            let p = &mut self.params[id];
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn zero_all_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn bytes(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.params[id].value.nbytes()).sum()
    }

    /// Squared L2 norm of the accumulated gradients of `ids`.
    pub fn grad_norm_sq(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .flat_map(|&id| self.params[id].grad.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }
}

/// Which activations survive the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetentionPolicy {
    /// Keep every activation (naive backprop).
    RetainAll,
    /// Keep only what a backward rule reads.
    ReversibleAware,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation family, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    Conv2d,
    ConvTranspose2d,
    InstanceNorm,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Softplus,
    Abs,
    Add,
    Sub,
    Mul,
    Scale,
    ChannelRange,
    Concat,
    Sum,
    Mean,
    Reversible,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Param => "param",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv2d_transpose",
            OpKind::InstanceNorm => "instance_norm",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Abs => "abs",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::ChannelRange => "channel_range",
            OpKind::Concat => "concat",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reversible => "reversible",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        use OpKind::*;
        [
            Input,
            Param,
            Conv2d,
            ConvTranspose2d,
            InstanceNorm,
            Relu,
            LeakyRelu,
            Tanh,
            Sigmoid,
            Softplus,
            Abs,
            Add,
            Sub,
            Mul,
            Scale,
            ChannelRange,
            Concat,
            Sum,
            Mean,
            Reversible,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

pub(crate) enum Op<T: Scalar> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: PaddingSpec,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Tensor<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ChannelRange {
        x: Var,
        start: usize,
        count: usize,
    },
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
    Reversible {
        x: Var,
        seq: ReversibleSequence,
        direction: Direction,
    },
}

impl<T: Scalar> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::InstanceNorm { .. } => OpKind::InstanceNorm,
            Op::Relu(_) => OpKind::Relu,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Softplus(_) => OpKind::Softplus,
            Op::Abs(_) => OpKind::Abs,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::ChannelRange { .. } => OpKind::ChannelRange,
            Op::Concat(..) => OpKind::Concat,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Reversible { .. } => OpKind::Reversible,
        }
    }

    fn aux_bytes(&self) -> usize {
        match self {
            Op::InstanceNorm { inv_std, .. } => inv_std.nbytes(),
            _ => 0,
        }
    }
}

struct Slot<T: Scalar> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    shape: Vec<usize>,
    retained: bool,
    requires_grad: bool,
}

/// Gradients with respect to the tape's input leaves.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` if the leaf received no gradient (unreachable from the output).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaves.remove(&v)
    }
}

/// Recording of one forward pass.
pub struct Tape<T: Scalar> {
    slots: Vec<Slot<T>>,
    policy: RetentionPolicy,
    frozen: HashSet<ParamId>,
    released: bool,
    fault: Option<OpKind>,
    grad_enabled: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new(policy: RetentionPolicy) -> Self {
        Self {
            slots: Vec::new(),
            policy,
            frozen: HashSet::new(),
            released: false,
            fault: None,
            grad_enabled: true,
        }
    }

    /// Inference-only tape: nothing requires a gradient, nothing is retained.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(RetentionPolicy::ReversibleAware)
        }
    }

    /// Empty tape sharing this tape's policy, frozen set and fault setting.
    pub fn child(&self) -> Self {
        Self {
            slots: Vec::new(),
            policy: self.policy,
            frozen: self.frozen.clone(),
            released: false,
            fault: self.fault,
            grad_enabled: self.grad_enabled,
        }
    }

    pub fn policy(&self) -> RetentionPolicy {
        self.policy
    }

    /// Parameters in `ids` are read as constants: no gradient reaches them.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    /// Corrupts the backward rule of `kind` (scales its input gradients by 1.5).
    /// Exists so gradient checks can be shown to catch a broken rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.slots[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.slots[v.0].requires_grad
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        self.slots
            .get(v.0)
            .ok_or_else(|| Error::Internal(format!("var {} not on this tape", v.0)))?
            .value
            .as_ref()
            .ok_or_else(|| {
                Error::Internal(format!(
                    "activation of {} node {} was released and is not recomputable",
                    self.slots[v.0].op.kind().name(),
                    v.0
                ))
            })
    }

    /// Value of `v`.
    ///
    /// Panics if the value was released, which only happens after backward.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.try_value(v).expect("value released")
    }

    /// Shape of `v`; available even after its value was released.
    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        self.slots
            .get(v.0)
            .map(|s| s.shape.clone())
            .ok_or_else(|| Error::Internal(format!("var {} not on this tape", v.0)))
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        let retained = self.policy == RetentionPolicy::RetainAll;
        self.slots.push(Slot {
            op,
            shape: value.shape().to_vec(),
            value: Some(value),
            retained,
            requires_grad,
        });
        Var(self.slots.len() - 1)
    }

    fn retain(&mut self, v: Var) {
        self.slots[v.0].retained = true;
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.slots[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.push(Op::Input, t, rg)
    }

    /// A leaf treated as a constant (detached).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Input, t, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let trainable = self.grad_enabled && !self.frozen.contains(&id);
        self.push(Op::Param(id), store.value(id).clone(), trainable)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: PaddingSpec) -> Result<Var> {
        let out = kernels::conv2d(self.try_value(x)?, self.try_value(w)?, self.try_value(b)?, stride, pad)?;
        let rg = self.any_grad(&[x, w, b]);
        if rg {
            self.retain(x);
            self.retain(w);
        }
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, out, rg))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d_transpose(
            self.try_value(x)?,
            self.try_value(w)?,
            self.try_value(b)?,
            stride,
            padding,
            output_padding,
        )?;
        let rg = self.any_grad(&[x, w, b]);
        if rg {
            self.retain(x);
            self.retain(w);
        }
        Ok(self.push(
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                padding,
                output_padding,
            },
            out,
            rg,
        ))
    }

    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (out, inv_std) = kernels::instance_norm(self.try_value(x)?, eps)?;
        let rg = self.any_grad(&[x]);
        let v = self.push(Op::InstanceNorm { x, inv_std }, out, rg);
        if rg {
            self.retain(v);
        }
        Ok(v)
    }

    fn unary_keep_output(&mut self, x: Var, op: Op<T>, out: Tensor<T>) -> Var {
        let rg = self.any_grad(&[x]);
        let v = self.push(op, out, rg);
        if rg {
            self.retain(v);
        }
        v
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = kernels::relu(self.try_value(x)?);
        Ok(self.unary_keep_output(x, Op::Relu(x), out))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if slope <= 0.0 {
            return Err(Error::invalid(format!("leaky_relu slope must be > 0, got {slope}")));
        }
        let slope = T::lit(slope);
        let out = kernels::leaky_relu(self.try_value(x)?, slope);
        Ok(self.unary_keep_output(x, Op::LeakyRelu(x, slope), out))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = kernels::tanh(self.try_value(x)?);
        Ok(self.unary_keep_output(x, Op::Tanh(x), out))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = kernels::sigmoid(self.try_value(x)?);
        Ok(self.unary_keep_output(x, Op::Sigmoid(x), out))
    }

    /// `ln(1 + e^x)`, the stable building block for log-sigmoid losses.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.try_value(x)?.map(kernels::softplus_scalar);
        let rg = self.any_grad(&[x]);
        if rg {
            self.retain(x);
        }
        Ok(self.push(Op::Softplus(x), out, rg))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.try_value(x)?.map(|v| v.abs());
        let rg = self.any_grad(&[x]);
        if rg {
            self.retain(x);
        }
        Ok(self.push(Op::Abs(x), out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.try_value(a)?.add(self.try_value(b)?)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.try_value(a)?.sub(self.try_value(b)?)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Sub(a, b), out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.try_value(a)?.mul(self.try_value(b)?)?;
        let rg = self.any_grad(&[a, b]);
        if rg {
            self.retain(a);
            self.retain(b);
        }
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::lit(s);
        let out = self.try_value(x)?.scale(s);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Scale(x, s), out, rg))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn channel_range(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let out = kernels::channel_range(self.try_value(x)?, start, count)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::ChannelRange { x, start, count }, out, rg))
    }

    /// First `ceil(C/2)` and last `floor(C/2)` channels.
    pub fn channel_split(&mut self, x: Var) -> Result<(Var, Var)> {
        let c = self.try_value(x)?.dims4()?.1;
        if c < 2 {
            return Err(Error::invalid(format!(
                "channel_split: need at least 2 channels, got {c}"
            )));
        }
        let ca = c.div_ceil(2);
        Ok((self.channel_range(x, 0, ca)?, self.channel_range(x, ca, c - ca)?))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::channel_concat(self.try_value(a)?, self.try_value(b)?)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Concat(a, b), out, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.try_value(x)?.sum());
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Sum(x), out, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.try_value(x)?.mean());
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Mean(x), out, rg))
    }

    /// Records a recompute-mode reversible sequence as one node that keeps
    /// only its output.
    pub(crate) fn reversible(&mut self, x: Var, seq: ReversibleSequence, direction: Direction, out: Tensor<T>) -> Var {
        let rg =
            self.any_grad(&[x]) || (self.grad_enabled && seq.param_ids().iter().any(|id| !self.frozen.contains(id)));
        let v = self.push(Op::Reversible { x, seq, direction }, out, rg);
        if rg {
            self.retain(v);
        }
        v
    }

    fn slot_activation_bytes(&self, s: &Slot<T>) -> usize {
        if matches!(s.op, Op::Param(_)) {
            return 0;
        }
        let mut bytes = 0;
        if s.retained {
            bytes += s.value.as_ref().map_or(0, |v| v.nbytes());
        }
        if s.requires_grad || self.policy == RetentionPolicy::RetainAll {
            bytes += s.op.aux_bytes();
        }
        bytes
    }

    /// Bytes of non-parameter tensors kept alive for the backward pass.
    pub fn retained_activation_bytes(&self) -> usize {
        self.slots.iter().map(|s| self.slot_activation_bytes(s)).sum()
    }

    /// Like [`retained_activation_bytes`](Self::retained_activation_bytes),
    /// restricted to slots `from..to`.
    pub fn retained_bytes_between(&self, from: usize, to: usize) -> usize {
        self.slots[from..to].iter().map(|s| self.slot_activation_bytes(s)).sum()
    }

    /// Drops every activation no backward rule needs.
    pub fn release_unretained(&mut self) {
        if self.released {
            return;
        }
        self.released = true;
        if self.policy == RetentionPolicy::RetainAll {
            return;
        }
        for s in &mut self.slots {
            if !s.retained && !matches!(s.op, Op::Param(_)) {
                s.value = None;
            }
        }
    }

    /// Backpropagates from a scalar `loss`, accumulating into `store` grads.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let v = self.try_value(loss)?;
        if !v.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                v.shape()
            )));
        }
        let seed = Tensor::full(v.shape(), T::one());
        self.backward_with_seed(loss, seed, store)
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_with_seed(&mut self, out: Var, seed: Tensor<T>, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let out_shape = self.shape(out)?;
        if seed.shape() != out_shape.as_slice() {
            return Err(Error::invalid(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                out_shape
            )));
        }
        self.release_unretained();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed);
        let mut leaves = HashMap::new();
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.slots[i].requires_grad {
                continue;
            }
            let contributions = self.node_backward(i, g, store, &mut leaves)?;
            let scale = (self.fault == Some(self.slots[i].op.kind())).then(|| T::lit(1.5));
            for (v, mut gi) in contributions {
                if !self.slots[v.0].requires_grad {
                    continue;
                }
                if let Some(s) = scale {
                    gi = gi.scale(s);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gi)?,
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { leaves })
    }

    fn saved(&self, v: Var) -> Result<&Tensor<T>> {
        self.try_value(v)
    }

    fn node_backward(
        &self,
        i: usize,
        g: Tensor<T>,
        store: &mut ParamStore<T>,
        leaves: &mut HashMap<Var, Tensor<T>>,
    ) -> Result<Vec<(Var, Tensor<T>)>> {
        let rg = |v: Var| self.slots[v.0].requires_grad;
        Ok(match &self.slots[i].op {
            Op::Input => {
                leaves.insert(Var(i), g);
                vec![]
            }
            Op::Param(id) => {
                store.accumulate_grad(*id, &g)?;
                vec![]
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let need = [rg(*x), rg(*w), rg(*b)];
                let wv = self.saved(*w)?;
                let xv = self.saved(*x)?;
                let bias = Tensor::zeros(&[wv.shape()[0]]);
                let cg = kernels::conv2d_backward(xv, wv, &bias, &g, *stride, *pad, need)?;
                collect3(*x, *w, *b, cg)
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                padding,
                output_padding,
            } => {
                let need = [rg(*x), rg(*w), rg(*b)];
                let wv = self.saved(*w)?;
                let xv = self.saved(*x)?;
                let bias = Tensor::zeros(&[wv.shape()[1]]);
                let cg =
                    kernels::conv2d_transpose_backward(xv, wv, &bias, &g, *stride, *padding, *output_padding, need)?;
                collect3(*x, *w, *b, cg)
            }
            Op::InstanceNorm { x, inv_std } => {
                let y = self.saved(Var(i))?;
                vec![(*x, kernels::instance_norm_backward(y, inv_std, &g)?)]
            }
            Op::Relu(x) => {
                let y = self.saved(Var(i))?;
                vec![(*x, g.zip_map(y, |gv, yv| if yv > T::zero() { gv } else { T::zero() })?)]
            }
            Op::LeakyRelu(x, slope) => {
                let y = self.saved(Var(i))?;
                let s = *slope;
                vec![(*x, g.zip_map(y, |gv, yv| if yv > T::zero() { gv } else { gv * s })?)]
            }
            Op::Tanh(x) => {
                let y = self.saved(Var(i))?;
                vec![(*x, g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv))?)]
            }
            Op::Sigmoid(x) => {
                let y = self.saved(Var(i))?;
                vec![(*x, g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv))?)]
            }
            Op::Softplus(x) => {
                let xv = self.saved(*x)?;
                vec![(*x, g.zip_map(xv, |gv, v| gv * kernels::sigmoid_scalar(v))?)]
            }
            Op::Abs(x) => {
                let xv = self.saved(*x)?;
                let sign = |v: T| {
                    if v > T::zero() {
                        T::one()
                    } else if v < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                vec![(*x, g.zip_map(xv, |gv, v| gv * sign(v))?)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g)],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-T::one()))],
            Op::Mul(a, b) => {
                let (av, bv) = (self.saved(*a)?, self.saved(*b)?);
                vec![(*a, g.mul(bv)?), (*b, g.mul(av)?)]
            }
            Op::Scale(x, s) => vec![(*x, g.scale(*s))],
            Op::ChannelRange { x, start, count } => {
                let shape = self.shape(*x)?;
                vec![(*x, scatter_channels(&g, &shape, *start, *count)?)]
            }
            Op::Concat(a, b) => {
                let ca = self.shape(*a)?[1];
                let c = g.dims4()?.1;
                vec![
                    (*a, kernels::channel_range(&g, 0, ca)?),
                    (*b, kernels::channel_range(&g, ca, c - ca)?),
                ]
            }
            Op::Sum(x) => {
                let shape = self.shape(*x)?;
                vec![(*x, Tensor::full(&shape, g.item()))]
            }
            Op::Mean(x) => {
                let shape = self.shape(*x)?;
                let n: usize = shape.iter().product();
                vec![(*x, Tensor::full(&shape, g.item() / T::lit(n as f64)))]
            }
            Op::Reversible { x, seq, direction } => {
                let y = self.saved(Var(i))?;
                let gx = reversible::backward_recompute(seq, store, y, &g, *direction, &self.child())?;
                vec![(*x, gx)]
            }
        })
    }
}

fn collect3<T: Scalar>(x: Var, w: Var, b: Var, cg: kernels::ConvGrads<T>) -> Vec<(Var, Tensor<T>)> {
    let mut out = Vec::with_capacity(3);
    if let Some(g) = cg.input {
        out.push((x, g));
    }
    if let Some(g) = cg.weight {
        out.push((w, g));
    }
    if let Some(g) = cg.bias {
        out.push((b, g));
    }
    out
}

/// Adjoint of [`kernels::channel_range`]: zero tensor of `shape` with `g` in
/// channels `[start, start + count)`.
fn scatter_channels<T: Scalar>(g: &Tensor<T>, shape: &[usize], start: usize, count: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = shape[..] else {
        return Err(Error::Internal(format!(
            "channel scatter into rank-{} shape",
            shape.len()
        )));
    };
    let hw = h * w;
    let mut out = vec![T::zero(); n * c * hw];
    for b in 0..n {
        out[(b * c + start) * hw..(b * c + start + count) * hw]
            .copy_from_slice(&g.data()[b * count * hw..(b + 1) * count * hw]);
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}
