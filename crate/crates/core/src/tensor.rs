//! Dense row-major tensors holding either `f64` or `Complex64` values.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_complex::Complex64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    Real,
    Complex,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::Real => f.write_str("real64"),
            DType::Complex => f.write_str("complex128"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

/// A contiguous array whose element count always equals the product of its
/// extents. A rank-0 tensor (empty shape) holds one scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn real(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "tensor shape {shape:?} does not match {} values",
            data.len()
        );
        Tensor { shape: shape.to_vec(), storage: Storage::Real(data) }
    }

    pub fn complex(shape: &[usize], data: Vec<Complex64>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "tensor shape {shape:?} does not match {} values",
            data.len()
        );
        Tensor { shape: shape.to_vec(), storage: Storage::Complex(data) }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::real(&[], vec![value])
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        let n = numel(shape);
        match dtype {
            DType::Real => Tensor::real(shape, vec![0.0; n]),
            DType::Complex => Tensor::complex(shape, vec![Complex64::new(0.0, 0.0); n]),
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor::real(shape, vec![value; numel(shape)])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        match &self.storage {
            Storage::Real(v) => v.len(),
            Storage::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self.storage {
            Storage::Real(_) => DType::Real,
            Storage::Complex(_) => DType::Complex,
        }
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn as_real(&self) -> &[f64] {
        match &self.storage {
            Storage::Real(v) => v,
            Storage::Complex(_) => panic!("expected a real tensor, found complex"),
        }
    }

    pub fn as_real_mut(&mut self) -> &mut [f64] {
        match &mut self.storage {
            Storage::Real(v) => v,
            Storage::Complex(_) => panic!("expected a real tensor, found complex"),
        }
    }

    pub fn as_complex(&self) -> &[Complex64] {
        match &self.storage {
            Storage::Complex(v) => v,
            Storage::Real(_) => panic!("expected a complex tensor, found real"),
        }
    }

    pub fn as_complex_mut(&mut self) -> &mut [Complex64] {
        match &mut self.storage {
            Storage::Complex(v) => v,
            Storage::Real(_) => panic!("expected a complex tensor, found real"),
        }
    }

    pub fn into_real(self) -> Vec<f64> {
        match self.storage {
            Storage::Real(v) => v,
            Storage::Complex(_) => panic!("expected a real tensor, found complex"),
        }
    }

    pub fn into_complex(self) -> Vec<Complex64> {
        match self.storage {
            Storage::Complex(v) => v,
            Storage::Real(_) => panic!("expected a complex tensor, found real"),
        }
    }

    /// Value of a single-element tensor (real part for complex).
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        match &self.storage {
            Storage::Real(v) => v[0],
            Storage::Complex(v) => v[0].re,
        }
    }

    pub fn with_shape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            numel(shape),
            self.len(),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn to_complex(&self) -> Tensor {
        match &self.storage {
            Storage::Real(v) => Tensor::complex(
                &self.shape,
                v.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
            ),
            Storage::Complex(_) => self.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match &self.storage {
            Storage::Real(v) => v.iter().all(|x| x.is_finite()),
            Storage::Complex(v) => v.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
        }
    }

    pub fn scaled(&self, factor: f64) -> Tensor {
        match &self.storage {
            Storage::Real(v) => Tensor::real(&self.shape, v.iter().map(|x| x * factor).collect()),
            Storage::Complex(v) => {
                Tensor::complex(&self.shape, v.iter().map(|z| z * factor).collect())
            }
        }
    }

    /// `self += other`, element by element; shapes and dtypes must agree.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "accumulate: shape mismatch");
        match (&mut self.storage, &other.storage) {
            (Storage::Real(a), Storage::Real(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y)
            }
            (Storage::Complex(a), Storage::Complex(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y)
            }
            _ => panic!("accumulate: dtype mismatch"),
        }
    }

    /// Squared Euclidean norm of all entries.
    pub fn norm_sqr(&self) -> f64 {
        match &self.storage {
            Storage::Real(v) => v.iter().map(|x| x * x).sum(),
            Storage::Complex(v) => v.iter().map(|z| z.norm_sqr()).sum(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[should_panic(expected = "does not match")]
    fn element_count_must_match_extents() {
        let _ = Tensor::real(&[2, 3], vec![0.0; 5]);
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(2.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item(), 2.5);
    }

    #[test]
    fn accumulate_adds_in_place() {
        let mut a = Tensor::real(&[2], vec![1.0, 2.0]);
        a.add_assign(&Tensor::real(&[2], vec![0.5, -1.0]));
        assert_eq!(a.as_real(), &[1.5, 1.0]);
    }
}
