//! Dense row-major tensors and the `TSR1` fixture format.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

/// Immutable-by-default dense array. Cloning shares the buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{:?}>{:?}", T::DTYPE, self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Trusted constructor for kernels that compute the buffer from the shape.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Gaussian draw with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self::from_fn(shape, |_| T::lit(normal.sample(rng)))
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Copy-on-write access to the buffer.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn nbytes(&self) -> usize {
        self.numel() * T::DTYPE.size()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::invalid(format!(
                "expected a rank-4 NCHW tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.numel() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        )
    }

    /// Bitwise equality of shape and payload (distinguishes `-0.0` and NaN payloads).
    pub fn bit_eq(&self, other: &Self) -> bool {
        if self.shape != other.shape {
            return false;
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (&x, &y) in self.data.iter().zip(other.data.iter()) {
            a.clear();
            b.clear();
            x.write_le(&mut a);
            y.write_le(&mut b);
            if a != b {
                return false;
            }
        }
        true
    }

    /// Slice `[n]` of a batched tensor, keeping a leading extent of 1.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        if self.shape.is_empty() || n >= self.shape[0] {
            return Err(Error::invalid(format!(
                "batch index {n} out of range for shape {:?}",
                self.shape
            )));
        }
        let per = self.numel() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self::from_parts(shape, self.data[n * per..(n + 1) * per].to_vec()))
    }

    pub(crate) fn write_payload(&self, out: &mut Vec<u8>) {
        out.reserve(self.nbytes());
        for &v in self.data.iter() {
            v.write_le(out);
        }
    }
}

const TSR_MAGIC: &[u8; 4] = b"TSR1";

/// A tensor whose element type is only known at runtime (file formats).
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested element type (lossless when it already matches).
    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub(crate) fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => t.write_payload(out),
            AnyTensor::F64(t) => t.write_payload(out),
        }
    }
}

impl<T: Scalar> From<Tensor<T>> for AnyTensor {
    fn from(t: Tensor<T>) -> Self {
        let any: Box<dyn std::any::Any> = Box::new(t);
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(*any.downcast().expect("dtype tag matches type")),
            DType::F64 => AnyTensor::F64(*any.downcast().expect("dtype tag matches type")),
        }
    }
}

/// Byte cursor that reports offsets in parse errors.
pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    /// `u8 dtype, u8 rank, rank x u64 extents, payload`
    pub fn tensor_body(&mut self) -> Result<AnyTensor> {
        let at = self.pos;
        let code = self.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Parse {
            offset: at,
            message: format!("unknown dtype code {code}"),
        })?;
        let rank = self.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = self.pos;
            let d = self.u64("extent")?;
            if d == 0 {
                return Err(Error::Parse {
                    offset: at,
                    message: "zero extent".into(),
                });
            }
            shape.push(usize::try_from(d).map_err(|_| self.err("extent overflow"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.err("element count overflow"))?;
        let payload = self.take(
            n.checked_mul(dtype.size())
                .ok_or_else(|| self.err("payload size overflow"))?,
            "payload",
        )?;
        Ok(match dtype {
            DType::F32 => AnyTensor::F32(Tensor::from_parts(
                shape,
                payload.chunks_exact(4).map(f32::read_le).collect(),
            )),
            DType::F64 => AnyTensor::F64(Tensor::from_parts(
                shape,
                payload.chunks_exact(8).map(f64::read_le).collect(),
            )),
        })
    }
}

pub(crate) fn write_tensor_body(t: &AnyTensor, out: &mut Vec<u8>) {
    out.push(t.dtype().code());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    t.write_payload(out);
}

/// Encodes a tensor in the `TSR1` format.
pub fn encode_tsr(t: &AnyTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.shape().len());
    out.extend_from_slice(TSR_MAGIC);
    write_tensor_body(t, &mut out);
    out
}

pub fn decode_tsr(bytes: &[u8]) -> Result<AnyTensor> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4, "magic")? != TSR_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic, expected TSR1".into(),
        });
    }
    let t = cur.tensor_body()?;
    if cur.pos != bytes.len() {
        return Err(cur.err("trailing bytes after payload"));
    }
    Ok(t)
}

pub fn write_tsr(path: &Path, t: &AnyTensor) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_tsr(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tsr(path: &Path) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_tsr(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_inconsistent_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 2]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn tsr_header_layout() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let bytes = encode_tsr(&t.into());
        assert_eq!(&bytes[..4], &[0x54, 0x53, 0x52, 0x31]);
        assert_eq!(bytes[4], 0);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..14], &1u64.to_le_bytes());
        assert_eq!(&bytes[14..22], &2u64.to_le_bytes());
        assert_eq!(&bytes[22..26], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 30);
    }

    #[test]
    fn tsr_truncation_reports_offset() {
        let t = Tensor::<f64>::zeros(&[3]);
        let bytes = encode_tsr(&t.into());
        match decode_tsr(&bytes[..bytes.len() - 1]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4 + 2 + 8),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(decode_tsr(b"TSRX"), Err(Error::Parse { offset: 0, .. })));
    }

    proptest! {
        #[test]
        fn tsr_round_trip_is_bit_exact(
            shape in prop::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
            wide in any::<bool>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let any: AnyTensor = if wide {
                Tensor::<f64>::randn(&shape, 1.0, &mut rng).into()
            } else {
                Tensor::<f32>::randn(&shape, 1.0, &mut rng).into()
            };
            let back = decode_tsr(&encode_tsr(&any)).unwrap();
            prop_assert_eq!(back, any);
        }
    }
}
