use nalgebra::DMatrix;

use crate::error::{invalid, Result};
use crate::linalg::{balanced_factors, ensure_finite, truncated_svd};
use crate::rng::{gaussian_matrix, StreamRng};
use crate::scalar::Scalar;

/// Trainable factors of one layer: effective weight `W_base + UVᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T: Scalar> {
    /// `d_out × r`
    pub u: DMatrix<T>,
    /// `d_in × r`
    pub v: DMatrix<T>,
    pub base_frozen: Option<DMatrix<T>>,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(u: DMatrix<T>, v: DMatrix<T>) -> Result<Self> {
        if u.ncols() != v.ncols() {
            return invalid(format!("factor ranks differ: {} vs {}", u.ncols(), v.ncols()));
        }
        if u.ncols() == 0 {
            return invalid("adapter rank must be at least 1");
        }
        ensure_finite(&u, "U")?;
        ensure_finite(&v, "V")?;
        Ok(Self { u, v, base_frozen: None })
    }

    /// Standard LoRA initialization: `U = 0`, `V ~ N(0, 1/d_in)`.
    pub fn lora_init(d_out: usize, d_in: usize, r: usize, rng: &mut StreamRng) -> Result<Self> {
        let v = gaussian_matrix(rng, d_in, r, 1.0 / (d_in as f64).sqrt());
        Self::new(DMatrix::zeros(d_out, r), v)
    }

    /// Balanced factors of `Π_r(base)`; the returned adapter's base is zero.
    pub fn svd_init(base: &DMatrix<T>, r: usize) -> Result<Self> {
        let (u, v) = balanced_factors(&truncated_svd(base, r)?);
        Self::new(u, v)?.with_base(DMatrix::zeros(base.nrows(), base.ncols()))
    }

    pub fn with_base(mut self, base: DMatrix<T>) -> Result<Self> {
        if base.shape() != (self.d_out(), self.d_in()) {
            return invalid(format!(
                "base is {}x{}, adapter is {}x{}",
                base.nrows(),
                base.ncols(),
                self.d_out(),
                self.d_in()
            ));
        }
        self.base_frozen = Some(base);
        Ok(self)
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.u.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.v.nrows()
    }

    /// Dense `UVᵀ`.
    pub fn delta(&self) -> DMatrix<T> {
        &self.u * self.v.transpose()
    }

    /// Dense `W_base + UVᵀ`.
    pub fn effective_weight(&self) -> DMatrix<T> {
        match &self.base_frozen {
            Some(b) => b + self.delta(),
            None => self.delta(),
        }
    }

    pub(crate) fn check_grad(&self, d_out: usize, d_in: usize) -> Result<()> {
        if (d_out, d_in) != (self.d_out(), self.d_in()) {
            return invalid(format!(
                "gradient is {d_out}x{d_in}, adapter is {}x{}",
                self.d_out(),
                self.d_in()
            ));
        }
        Ok(())
    }
}
