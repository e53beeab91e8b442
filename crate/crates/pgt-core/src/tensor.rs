//! Dense multi-dimensional arrays over f32/f64.
//!
//! Sequences are stored frame-major: `[T, C]` or `[T, C, H, W]`. Element data
//! lives behind an `Arc` so tape nodes can alias a value without copying it;
//! mutation goes through [`Tensor::data_mut`] which copies on write only when
//! the buffer is shared.

use std::fmt;
use std::sync::Arc;

use num_traits::Float;

use crate::error::{PgtError, Result};

/// Element type tag, used by checkpoints, configs and tolerance policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Dtype> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(PgtError::config(format!("unknown dtype `{other}`"))),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar element of a [`Tensor`]: f32 for training, f64 for verification.
pub trait Scalar:
    Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;

    fn to_f64_val(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64_val(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64_val(self) -> f64 {
        self
    }
}

/// Dense array with dynamic rank.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data.as_slice())?;
        }
        Ok(())
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(PgtError::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![S::zero(); numel]) }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; numel]) }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![value]) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable element access; copies the buffer first if it is aliased.
    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// True when this tensor shares its element buffer with `other`.
    pub fn aliases(&self, other: &Tensor<S>) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn scalar_value(&self) -> Result<S> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(PgtError::shape(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Number of frames (extent of the leading axis). Scalars have none.
    pub fn frames(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Shape of a single frame: everything after the leading axis.
    pub fn frame_shape(&self) -> Vec<usize> {
        self.shape.get(1..).map(|s| s.to_vec()).unwrap_or_default()
    }

    /// Elements per frame.
    pub fn frame_numel(&self) -> usize {
        self.shape.get(1..).map(|s| s.iter().product()).unwrap_or(1)
    }

    /// Sequence view as (frames, channels, spatial) with trailing dims folded
    /// into `spatial`. Errors if the tensor has no frame axis.
    pub fn seq_dims(&self) -> Result<(usize, usize, usize)> {
        match self.shape.len() {
            2 => Ok((self.shape[0], self.shape[1], 1)),
            3.. => Ok((self.shape[0], self.shape[1], self.shape[2..].iter().product())),
            _ => Err(PgtError::shape(format!(
                "expected a [T, C, ...] sequence, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Copy of frames `[start, end)` along the leading axis.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Tensor<S>> {
        let t = self.frames();
        if start >= end || end > t {
            return Err(PgtError::shape(format!(
                "frame slice [{start}, {end}) out of range for {t} frames"
            )));
        }
        let fe = self.frame_numel();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        let data = self.data[start * fe..end * fe].to_vec();
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    /// Single frame `[C, ...]` at index `t`.
    pub fn frame(&self, t: usize) -> Result<Tensor<S>> {
        let sliced = self.slice_frames(t, t + 1)?;
        Ok(Tensor {
            shape: self.frame_shape(),
            data: sliced.data,
        })
    }

    /// Concatenate along a new leading frame axis; all parts must share a shape.
    pub fn stack_frames(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        let first = parts
            .first()
            .ok_or_else(|| PgtError::shape("cannot stack zero frames"))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(PgtError::shape(format!(
                    "stack_frames: shape {:?} != {:?}",
                    p.shape, first.shape
                )));
            }
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    /// Element-wise `self + scale * other`, in place.
    pub fn axpy(&mut self, scale: S, other: &Tensor<S>) -> Result<()> {
        if self.shape != other.shape {
            return Err(PgtError::shape(format!(
                "axpy: shape {:?} != {:?}",
                self.shape, other.shape
            )));
        }
        let dst = self.data_mut();
        for (d, &s) in dst.iter_mut().zip(other.data.iter()) {
            *d = *d + scale * s;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: S) {
        for v in self.data_mut() {
            *v = value;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.to_f64_val().abs()))
    }

    /// Largest |a - b| over all elements; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(PgtError::shape(format!(
                "max_abs_diff: shape {:?} != {:?}",
                self.shape, other.shape
            )));
        }
        let mut m = 0.0f64;
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            m = m.max((a.to_f64_val() - b.to_f64_val()).abs());
        }
        Ok(m)
    }

    /// Exact element-by-element equality (bit-level for finite values).
    pub fn bit_eq(&self, other: &Tensor<S>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64_val().to_bits() == b.to_f64_val().to_bits())
    }

    /// Cast elements, preserving shape.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|v| T::from_f64(v.to_f64_val())).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }
}

/// Relative error with a small-denominator guard, used by gradient checks:
/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn slice_and_frame() {
        let t = Tensor::<f64>::from_vec(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let s = t.slice_frames(1, 3).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[3., 4., 5., 6.]);
        let f = t.frame(2).unwrap();
        assert_eq!(f.shape(), &[2]);
        assert_eq!(f.data(), &[5., 6.]);
        assert!(t.slice_frames(2, 2).is_err());
        assert!(t.slice_frames(1, 4).is_err());
    }

    #[test]
    fn data_mut_copies_only_when_shared() {
        let mut a = Tensor::<f32>::zeros(vec![4]);
        let b = a.clone();
        assert!(a.aliases(&b));
        a.data_mut()[0] = 1.0;
        assert!(!a.aliases(&b));
        assert_eq!(b.data()[0], 0.0);
    }

    #[test]
    fn seq_dims_folds_spatial() {
        let t = Tensor::<f32>::zeros(vec![5, 3, 4, 4]);
        assert_eq!(t.seq_dims().unwrap(), (5, 3, 16));
        let t2 = Tensor::<f32>::zeros(vec![5, 3]);
        assert_eq!(t2.seq_dims().unwrap(), (5, 3, 1));
        assert!(Tensor::<f32>::zeros(vec![5]).seq_dims().is_err());
    }
}
