use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The functional form of the scheduling basis `ψ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BasisKind {
    /// `ψ⁽ⁱ⁾(p) = pᵢ`, so `nψ = np`.
    PolyLinear,
    /// `ψ(p) = (p₁, p₁², …, p₁^d, p₂, …, p_np^d)`, so `nψ = np·d`.
    Polynomial { degree: usize },
}

/// Scheduling basis `ψ⁽¹⁾ … ψ⁽ⁿψ⁾` over a box domain, with the implicit `ψ⁽⁰⁾ ≡ 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisFunctionSet {
    #[serde(flatten)]
    pub kind: BasisKind,
    pub np: usize,
    /// `[lo, hi]` per scheduling channel.
    pub domain: Vec<[f64; 2]>,
}

impl BasisFunctionSet {
    /// Affine basis `ψ⁽ⁱ⁾ = pᵢ` on `[-1, 1]^np`.
    pub fn poly_linear(np: usize) -> Self {
        Self {
            kind: BasisKind::PolyLinear,
            np,
            domain: vec![[-1.0, 1.0]; np],
        }
    }

    pub fn polynomial(np: usize, degree: usize) -> Result<Self> {
        if degree == 0 {
            return Err(Error::InvalidArgument("polynomial degree must be >= 1".into()));
        }
        Ok(Self {
            kind: BasisKind::Polynomial { degree },
            np,
            domain: vec![[-1.0, 1.0]; np],
        })
    }

    pub fn with_domain(mut self, domain: Vec<[f64; 2]>) -> Result<Self> {
        if domain.len() != self.np {
            return Err(Error::Dimension(format!(
                "domain has {} intervals for np = {}",
                domain.len(),
                self.np
            )));
        }
        if domain.iter().any(|[lo, hi]| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::InvalidArgument("domain intervals must be finite with lo <= hi".into()));
        }
        self.domain = domain;
        Ok(self)
    }

    /// Number of non-constant basis functions.
    pub fn npsi(&self) -> usize {
        match self.kind {
            BasisKind::PolyLinear => self.np,
            BasisKind::Polynomial { degree } => self.np * degree,
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.np && p.iter().zip(&self.domain).all(|(&v, [lo, hi])| v >= *lo && v <= *hi)
    }

    /// Evaluates `[1, ψ⁽¹⁾(p), …, ψ⁽ⁿψ⁾(p)]` into `out` (length `nψ + 1`).
    pub fn eval_into(&self, p: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.npsi() + 1);
        out[0] = 1.0;
        match self.kind {
            BasisKind::PolyLinear => out[1..].copy_from_slice(&p[..self.np]),
            BasisKind::Polynomial { degree } => {
                for (j, &pj) in p.iter().take(self.np).enumerate() {
                    let mut v = 1.0;
                    for k in 0..degree {
                        v *= pj;
                        out[1 + j * degree + k] = v;
                    }
                }
            }
        }
    }

    /// Evaluates the full basis vector including `ψ⁽⁰⁾ = 1`.
    pub fn eval(&self, p: &[f64]) -> Result<DVector<f64>> {
        if p.len() != self.np {
            return Err(Error::Dimension(format!("scheduling point has {} entries, basis expects {}", p.len(), self.np)));
        }
        let mut out = DVector::zeros(self.npsi() + 1);
        self.eval_into(p, out.as_mut_slice());
        Ok(out)
    }

    /// Evaluates the basis along a scheduling trajectory `p` (`np × N`), returning `(nψ+1) × N`.
    ///
    /// Points outside the domain are evaluated anyway; a single warning reports how many there were.
    pub fn eval_trajectory(&self, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if p.nrows() != self.np {
            return Err(Error::Dimension(format!("scheduling has {} channels, basis expects {}", p.nrows(), self.np)));
        }
        let n = p.ncols();
        let mut out = DMatrix::zeros(self.npsi() + 1, n);
        let mut outside = 0usize;
        let mut buf = vec![0.0; self.npsi() + 1];
        for t in 0..n {
            let col: Vec<f64> = p.column(t).iter().copied().collect();
            if !self.contains(&col) {
                outside += 1;
            }
            self.eval_into(&col, &mut buf);
            out.column_mut(t).copy_from_slice(&buf);
        }
        if outside > 0 {
            log::warn!("{outside} of {n} scheduling samples lie outside the basis domain; extrapolating");
        }
        Ok(out)
    }

    /// `max_{p ∈ P} |ψ⁽ⁱ⁾(p)|` for `i ≥ 1` (index 0 gives 1).
    pub fn sup_abs(&self, i: usize) -> f64 {
        if i == 0 {
            return 1.0;
        }
        let (channel, power) = match self.kind {
            BasisKind::PolyLinear => (i - 1, 1),
            BasisKind::Polynomial { degree } => ((i - 1) / degree, (i - 1) % degree + 1),
        };
        let [lo, hi] = self.domain[channel];
        lo.abs().max(hi.abs()).powi(power as i32)
    }
}
