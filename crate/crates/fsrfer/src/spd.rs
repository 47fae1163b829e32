//! Second-order (SPD-manifold) feature layers: covariance pooling, bilinear
//! projection, eigenvalue rectification, matrix logarithm, and the scaled
//! half-vectorization that flattens symmetric matrices losslessly.
//!
//! All functions operate on batched `Var` tensors `[B, ., .]` so they are
//! usable both in training graphs and (with constant inputs) in inference.

use ndarray::{ArrayD, IxDyn};

use crate::autograd::ops::{self, SpectralFn};
use crate::autograd::Var;
use crate::{Error, Result};

/// Where a feature tensor came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Hr,
    Lr,
    Sr,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Hr => write!(f, "hr"),
            Provenance::Lr => write!(f, "lr"),
            Provenance::Sr => write!(f, "sr"),
        }
    }
}

/// A canonical second-order feature: a symmetric d'×d' matrix with its
/// scaled half-vectorization available on demand.
#[derive(Clone, Debug)]
pub struct FeatureTensor {
    /// Symmetric matrix `[d', d']`.
    pub mat: ArrayD<f64>,
    pub provenance: Provenance,
}

impl FeatureTensor {
    pub fn new(mat: ArrayD<f64>, provenance: Provenance) -> Self {
        let s = mat.shape();
        assert_eq!(s.len(), 2, "feature matrix must be 2-d");
        assert_eq!(s[0], s[1], "feature matrix must be square");
        Self { mat, provenance }
    }

    pub fn dim(&self) -> usize {
        self.mat.shape()[0]
    }

    /// Largest absolute asymmetry, for invariant checks.
    pub fn asymmetry(&self) -> f64 {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                worst = worst.max((self.mat[[i, j]] - self.mat[[j, i]]).abs());
            }
        }
        worst
    }

    /// Scaled half-vectorization (length d'(d'+1)/2) with off-diagonal
    /// entries multiplied by √2 so that the vector 2-norm equals the matrix
    /// Frobenius norm.
    pub fn vec(&self) -> Vec<f64> {
        let d = self.dim();
        let batch = self.mat.clone().insert_axis(ndarray::Axis(0));
        let v = halfvec(&Var::constant(batch));
        let data = v.data();
        (0..d * (d + 1) / 2).map(|i| data[[0, i]]).collect()
    }
}

/// Covariance pooling over spatial positions.
///
/// Input `[B, C, H, W]` is read as n = H·W samples of C-dimensional feature
/// vectors; output is `[B, C, C]` with
/// `Σ = (1/(n-1)) Σᵢ (xᵢ-μ)(xᵢ-μ)ᵀ  +  λ_reg·trace(Σ)·I/C  +  floor·I`.
/// The trace term keeps conditioning proportional to the signal; the
/// absolute floor guarantees positive definiteness even for a constant map.
pub fn covariance_pool(fm: &Var, lambda_reg: f64, floor: f64) -> Result<Var> {
    if lambda_reg <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "covariance regularization must be positive, got {lambda_reg}"
        )));
    }
    let s = fm.shape();
    if s.len() != 4 {
        return Err(Error::shape("covariance_pool input", &[0, 0, 0, 0], s));
    }
    let (b, c, n) = (s[0], s[1], s[2] * s[3]);
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "covariance pooling needs at least 2 spatial positions, got {n}"
        )));
    }
    let x = ops::reshape(fm, &[b, c, n]);
    // centering matrix H = I - 11ᵀ/n, a constant: Σ = X H Xᵀ / (n-1)
    let mut h = ArrayD::from_elem(IxDyn(&[1, n, n]), -1.0 / n as f64);
    for i in 0..n {
        h[[0, i, i]] += 1.0;
    }
    let h = ops::broadcast_to(&Var::constant(h), &[b, n, n]);
    let sigma = ops::mul_scalar(
        &ops::bmm(&ops::bmm(&x, &h), &ops::mat_t(&x)),
        1.0 / (n as f64 - 1.0),
    );
    let sigma = ops::symmetrize(&sigma);

    // identity mask for the diagonal terms
    let mut eye = ArrayD::zeros(IxDyn(&[1, c, c]));
    for i in 0..c {
        eye[[0, i, i]] = 1.0;
    }
    let eye = ops::broadcast_to(&Var::constant(eye), &[b, c, c]);

    // trace per batch entry -> [B,1,1] -> scaled identity
    let trace = ops::sum_per_sample(&ops::mul(&sigma, &eye));
    let trace = ops::reshape(&trace, &[b, 1, 1]);
    let reg = ops::mul(
        &ops::broadcast_to(&ops::mul_scalar(&trace, lambda_reg / c as f64), &[b, c, c]),
        &eye,
    );
    let floor_term = ops::mul_scalar(&eye, floor);
    Ok(ops::add(&ops::add(&sigma, &reg), &floor_term))
}

/// Bilinear projection `Y = Wᵀ X W` for a batch of symmetric X `[B, d, d]`
/// and a shared weight `W [d, d']` with (approximately) orthonormal columns.
pub fn bimap(x: &Var, w: &Var) -> Var {
    let (sx, sw) = (x.shape(), w.shape());
    assert_eq!(sx.len(), 3, "bimap expects [B,d,d]");
    assert_eq!(sw.len(), 2, "bimap weight must be 2-d");
    assert_eq!(sx[1], sx[2], "bimap expects square inputs");
    assert_eq!(sx[1], sw[0], "bimap dimension mismatch");
    assert!(sw[1] <= sw[0], "bimap cannot increase dimension");
    let (b, d, dp) = (sx[0], sx[1], sw[1]);
    // X W: [B*d, d] x [d, d'] -> [B, d, d']
    let xw = ops::reshape(&ops::matmul(&ops::reshape(x, &[b * d, d]), w), &[b, d, dp]);
    // Wᵀ (X W) = ((X W)ᵀ W)ᵀ; for symmetric X the transpose is free
    let t = ops::permute_axes(&xw, &[0, 2, 1]); // [B, d', d]
    let y = ops::reshape(&ops::matmul(&ops::reshape(&t, &[b * dp, d]), w), &[b, dp, dp]);
    ops::symmetrize(&y)
}

/// Eigenvalue rectification: `U max(Λ, ε) Uᵀ`. Panics if the input is not
/// symmetric within 1e-6 (contract violation upstream).
pub fn reeig(x: &Var, eps: f64) -> Var {
    assert!(eps > 0.0, "reeig floor must be positive");
    assert_symmetric(x, "reeig");
    ops::sym_eig_fn(x, SpectralFn::ClampMin(eps))
}

/// Matrix logarithm `U log(Λ) Uᵀ`. Panics if the input is asymmetric or not
/// positive definite (the failure names the offending minimum eigenvalue).
pub fn logeig(x: &Var) -> Var {
    assert_symmetric(x, "logeig");
    ops::sym_eig_fn(x, SpectralFn::Log)
}

fn assert_symmetric(x: &Var, who: &str) {
    let s = x.shape();
    assert_eq!(s.len(), 3, "{who} expects [B,d,d]");
    assert_eq!(s[1], s[2], "{who} expects square matrices");
    let d = s[1];
    let data = x.data();
    for bi in 0..s[0] {
        for i in 0..d {
            for j in (i + 1)..d {
                let a = (data[[bi, i, j]] - data[[bi, j, i]]).abs();
                assert!(
                    a <= 1e-6,
                    "{who}: input matrix {bi} asymmetric by {a:.3e} at ({i},{j})"
                );
            }
        }
    }
}

/// Constant embedding matrix mapping a flattened d×d symmetric matrix to
/// its scaled half-vectorization of length d(d+1)/2.
fn halfvec_embedding(d: usize) -> ArrayD<f64> {
    let l = d * (d + 1) / 2;
    let mut e = ArrayD::zeros(IxDyn(&[d * d, l]));
    let mut k = 0;
    let half_sqrt2 = std::f64::consts::SQRT_2 / 2.0;
    for i in 0..d {
        for j in i..d {
            if i == j {
                e[[i * d + j, k]] = 1.0;
            } else {
                // draw from both mirror entries so the adjoint stays
                // symmetric and asymmetric inputs are projected
                e[[i * d + j, k]] = half_sqrt2;
                e[[j * d + i, k]] = half_sqrt2;
            }
            k += 1;
        }
    }
    e
}

/// Scaled half-vectorization of a batch of symmetric matrices:
/// `[B, d, d] -> [B, d(d+1)/2]`, off-diagonals scaled by √2 so that
/// `‖vec‖₂ = ‖mat‖_F`.
pub fn halfvec(x: &Var) -> Var {
    let s = x.shape();
    assert_eq!(s.len(), 3, "halfvec expects [B,d,d]");
    assert_eq!(s[1], s[2]);
    let (b, d) = (s[0], s[1]);
    let e = Var::constant(halfvec_embedding(d));
    ops::matmul(&ops::reshape(x, &[b, d * d]), &e)
}

/// Length of the half-vectorization for a d×d matrix.
pub fn halfvec_len(d: usize) -> usize {
    d * (d + 1) / 2
}
