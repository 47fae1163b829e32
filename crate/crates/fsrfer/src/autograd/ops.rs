//! Primitive differentiable operations.
//!
//! Every backward here is written in terms of these same primitives, so any
//! gradient can be differentiated again. Ops that need data-dependent
//! constants in their backward (activation masks, eigenvector bases) bake
//! them in as constant leaves; that matches the usual almost-everywhere
//! derivative convention for piecewise-linear activations.

use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn};

use super::engine::{Op, Var};

/// Eigenvalue pairs closer than this use the analytic limit f'((a+b)/2)
/// instead of the divided difference, which would blow up.
const EIG_DEGENERATE_TOL: f64 = 1e-6;

fn standard_vec(a: &ArrayD<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn reshaped(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    assert_eq!(a.len(), n, "reshape {:?} -> {:?}", a.shape(), shape);
    ArrayD::from_shape_vec(IxDyn(shape), standard_vec(a)).unwrap()
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

struct AddOp;
impl Op for AddOp {
    fn backward(&self, _p: &[Var], g: &Var) -> Vec<Var> {
        vec![g.clone(), g.clone()]
    }
    fn name(&self) -> &'static str {
        "add"
    }
}

pub fn add(a: &Var, b: &Var) -> Var {
    assert_eq!(a.shape(), b.shape(), "add shape mismatch");
    Var::from_op(
        a.data() + b.data(),
        vec![a.clone(), b.clone()],
        Box::new(AddOp),
    )
}

struct SubOp;
impl Op for SubOp {
    fn backward(&self, _p: &[Var], g: &Var) -> Vec<Var> {
        vec![g.clone(), neg(g)]
    }
    fn name(&self) -> &'static str {
        "sub"
    }
}

pub fn sub(a: &Var, b: &Var) -> Var {
    assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
    Var::from_op(
        a.data() - b.data(),
        vec![a.clone(), b.clone()],
        Box::new(SubOp),
    )
}

struct MulOp;
impl Op for MulOp {
    fn backward(&self, p: &[Var], g: &Var) -> Vec<Var> {
        vec![mul(g, &p[1]), mul(g, &p[0])]
    }
    fn name(&self) -> &'static str {
        "mul"
    }
}

pub fn mul(a: &Var, b: &Var) -> Var {
    assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
    Var::from_op(
        a.data() * b.data(),
        vec![a.clone(), b.clone()],
        Box::new(MulOp),
    )
}

struct NegOp;
impl Op for NegOp {
    fn backward(&self, _p: &[Var], g: &Var) -> Vec<Var> {
        vec![neg(g)]
    }
    fn name(&self) -> &'static str {
        "neg"
    }
}

pub fn neg(a: &Var) -> Var {
    Var::from_op(a.data().mapv(|v| -v), vec![a.clone()], Box::new(NegOp))
}

struct AddScalarOp;
impl Op for AddScalarOp {
    fn backward(&self, _p: &[Var], g: &Var) -> Vec<Var> {
        vec![g.clone()]
    }
    fn name(&self) -> &'static str {
        "add_scalar"
    }
}

pub fn add_scalar(a: &Var, c: f64) -> Var {
    Var::from_op(
        a.data().mapv(|v| v + c),
        vec![a.clone()],
        Box::new(AddScalarOp),
    )
}

struct MulScalarOp(f64);
impl Op for MulScalarOp {
    fn backward(&self, _p: &[Var], g: &Var) -> Vec<Var> {
        vec![mul_scalar(g, self.0)]
    }
    fn name(&self) -> &'static str {
        "mul_scalar"
    }
}

pub fn mul_scalar(a: &Var, c: f64) -> Var {
    Var::from_op(
        a.data().mapv(|v| v * c),
        vec![a.clone()],
        Box::new(MulScalarOp(c)),
    )
}

struct PowScalarOp(f64);
impl Op for PowScalarOp {
    fn backward(&self, p: &[Var], g: &Var) -> Vec<Var> {
        let d = mul_scalar(&pow_scalar(&p[0], self.0 - 1.0), self.0);
        vec![mul(g, &d)]
    }
    fn name(&self) -> &'static str {
        "pow_scalar"
    }
}

/// Elementwise power with a fixed exponent. Callers are responsible for
/// keeping the base in the exponent's domain.
pub fn pow_scalar(a: &Var, c: f64) -> Var {
    Var::from_op(
        a.data().mapv(|v| v.powf(c)),
        vec![a.clone()],
        Box::new(PowScalarOp(c)),
    )
}

struct ExpOp;
impl Op for ExpOp {
    fn backward(&self, p: &[Var], g: &Var) -> Vec<Var> {
        vec![mul(g, &exp(&p[0]))]
    }
    fn name(&self) -> &'static str {
        "exp"
    }
}

pub fn exp(a: &Var) -> Var {
    Var::from_op(a.data().mapv(f64::exp), vec![a.clone()], Box::new(ExpOp))
}

struct LnOp;
impl Op for LnOp {
    fn backward(&self, p: &[Var], g: &Var) -> Vec<Var> {
        vec![mul(g, &pow_scalar(&p[0], -1.0))]
    }
    fn name(&self) -> &'static str {
        "ln"
    }
}

pub fn ln(a: &Var) -> Var {
    Var::from_op(a.data().mapv(f64::ln), vec![a.clone()], Box::new(LnOp))
}

struct LeakyReluOp {
    mask: Rc<ArrayD<f64>>,
}
impl Op for LeakyReluOp {
    fn backward(&self, _p: &[Var], g: &Var) -> Vec<Var> {
        let mask = Var::from_rc(Rc::clone(&self.mask), false);
        vec![mul(g, &mask)]
    }
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
}

pub fn leaky_relu(a: &Var, slope: f64) -> Var {
    let mask = a.data().mapv(|v| if v > 0.0 { 1.0 } else { slope });
    let out = a.data().mapv(|v| if v > 0.0 { v } else { slope * v });
    Var::from_op(
        out,
        vec![a.clone()],
        Box::new(LeakyReluOp {
            mask: Rc::new(mask),
        }),
    )
}

pub fn relu(a: &Var) -> Var {
    leaky_relu(a, 0.0)
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

struct ReshapeOp {
    orig: Vec<usize>,
}
impl Op for ReshapeOp {
    fn backward(&self, _p: &[Var], g: &Var) -> Vec<Var> {
        vec![reshape(g, &self.orig)]
    }
    fn name(&self) -> &'static str {
        "reshape"
    }
}

pub fn reshape(a: &Var, shape: &[usize]) -> Var {
    Var::from_op(
        reshaped(a.data(), shape),
        vec![a.clone()],
        Box::new(ReshapeOp {
            orig: a.shape().to_vec(),
        }),
    )
}

struct PermuteOp {
    inverse: Vec<usize>,
}
impl Op for PermuteOp {
    fn backward(&self, _p: &[Var], g: &Var) -> Vec<Var> {
        vec![permute_axes(g, &self.inverse)]
    }
    fn name(&self) -> &'static str {
        "permute_axes"
    }
}

pub fn permute_axes(a: &Var, perm: &[usize]) -> Var {
    assert_eq!(perm.len(), a.shape().len());
    let mut inverse = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let out = a
        .data()
        .view()
        .permuted_axes(IxDyn(perm))
        .as_standard_layout()
        .to_owned();
    Var::from_op(out, vec![a.clone()], Box::new(PermuteOp { inverse }))
}

/// Transpose of the last two axes (any rank >= 2).
pub fn mat_t(a: &Var) -> Var {
    let n = a.shape().len();
    assert!(n >= 2);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.swap(n - 1, n - 2);
    permute_axes(a, &perm)
}

fn broadcast_compatible(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let offset = to.len() - from.len();
    from.iter()
        .enumerate()
        .all(|(i, &d)| d == to[offset + i] || d == 1)
}

struct BroadcastToOp {
    orig: Vec<usize>,
}
impl Op for BroadcastToOp {
    fn backward(&self, _p: &[Var], g: &Var) -> Vec<Var> {
        vec![sum_to(g, &self.orig)]
    }
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
}

/// Numpy-style broadcast (trailing-axis alignment).
pub fn broadcast_to(a: &Var, shape: &[usize]) -> Var {
    assert!(
        broadcast_compatible(a.shape(), shape),
        "cannot broadcast {:?} to {:?}",
        a.shape(),
        shape
    );
    let out = a.data().broadcast(IxDyn(shape)).unwrap().to_owned();
    Var::from_op(
        out,
        vec![a.clone()],
        Box::new(BroadcastToOp {
            orig: a.shape().to_vec(),
        }),
    )
}

struct SumToOp {
    orig: Vec<usize>,
}
impl Op for SumToOp {
    fn backward(&self, _p: &[Var], g: &Var) -> Vec<Var> {
        vec![broadcast_to(g, &self.orig)]
    }
    fn name(&self) -> &'static str {
        "sum_to"
    }
}

/// Adjoint of [`broadcast_to`]: sums over the broadcast axes so that the
/// result has `shape`.
pub fn sum_to(a: &Var, shape: &[usize]) -> Var {
    assert!(
        broadcast_compatible(shape, a.shape()),
        "cannot sum {:?} to {:?}",
        a.shape(),
        shape
    );
    let mut acc = a.data().clone();
    // collapse leading extra axes
    while acc.ndim() > shape.len() {
        acc = acc.sum_axis(Axis(0));
    }
    // collapse axes where the target is 1
    for i in 0..shape.len() {
        if shape[i] == 1 && acc.shape()[i] != 1 {
            acc = acc.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    Var::from_op(
        acc,
        vec![a.clone()],
        Box::new(SumToOp {
            orig: a.shape().to_vec(),
        }),
    )
}

pub fn sum_all(a: &Var) -> Var {
    sum_to(a, &[])
}

pub fn mean_all(a: &Var) -> Var {
    mul_scalar(&sum_all(a), 1.0 / a.data().len() as f64)
}

/// Sum over every axis except the leading (batch) one: `[B, ...] -> [B]`.
pub fn sum_per_sample(a: &Var) -> Var {
    let b = a.shape()[0];
    let mut keep = vec![1usize; a.shape().len()];
    keep[0] = b;
    reshape(&sum_to(a, &keep), &[b])
}

// ---------------------------------------------------------------------------
// concat / slice / pad along one axis
// ---------------------------------------------------------------------------

struct ConcatOp {
    axis: usize,
    sizes: Vec<usize>,
}
impl Op for ConcatOp {
    fn backward(&self, _p: &[Var], g: &Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.sizes.len());
        let mut start = 0;
        for &len in &self.sizes {
            out.push(slice_axis(g, self.axis, start, len));
            start += len;
        }
        out
    }
    fn name(&self) -> &'static str {
        "concat"
    }
}

pub fn concat(axis: usize, parts: &[Var]) -> Var {
    assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|p| p.data().view()).collect();
    let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
    let sizes = parts.iter().map(|p| p.shape()[axis]).collect();
    Var::from_op(out, parts.to_vec(), Box::new(ConcatOp { axis, sizes }))
}

struct SliceAxisOp {
    axis: usize,
    start: usize,
    total: usize,
}
impl Op for SliceAxisOp {
    fn backward(&self, _p: &[Var], g: &Var) -> Vec<Var> {
        vec![pad_axis(g, self.axis, self.start, self.total)]
    }
    fn name(&self) -> &'static str {
        "slice_axis"
    }
}

pub fn slice_axis(a: &Var, axis: usize, start: usize, len: usize) -> Var {
    let total = a.shape()[axis];
    assert!(start + len <= total);
    let out = a
        .data()
        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
        .as_standard_layout()
        .to_owned();
    Var::from_op(
        out,
        vec![a.clone()],
        Box::new(SliceAxisOp { axis, start, total }),
    )
}

struct PadAxisOp {
    axis: usize,
    start: usize,
}
impl Op for PadAxisOp {
    fn backward(&self, p: &[Var], g: &Var) -> Vec<Var> {
        let len = p[0].shape()[self.axis];
        vec![slice_axis(g, self.axis, self.start, len)]
    }
    fn name(&self) -> &'static str {
        "pad_axis"
    }
}

/// Zero-embed `a` into a larger tensor along `axis` (adjoint of slicing).
pub fn pad_axis(a: &Var, axis: usize, start: usize, total: usize) -> Var {
    let mut shape = a.shape().to_vec();
    let len = shape[axis];
    assert!(start + len <= total);
    shape[axis] = total;
    let mut out = ArrayD::zeros(IxDyn(&shape));
    out.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
        .assign(a.data());
    Var::from_op(out, vec![a.clone()], Box::new(PadAxisOp { axis, start }))
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

struct MatmulOp;
impl Op for MatmulOp {
    fn backward(&self, p: &[Var], g: &Var) -> Vec<Var> {
        vec![matmul(g, &mat_t(&p[1])), matmul(&mat_t(&p[0]), g)]
    }
    fn name(&self) -> &'static str {
        "matmul"
    }
}

pub fn matmul(a: &Var, b: &Var) -> Var {
    assert_eq!(a.shape().len(), 2, "matmul lhs must be 2-d");
    assert_eq!(b.shape().len(), 2, "matmul rhs must be 2-d");
    assert_eq!(a.shape()[1], b.shape()[0], "matmul inner dim mismatch");
    let av = a
        .data()
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let bv = b
        .data()
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let out = av.dot(&bv).into_dyn();
    Var::from_op(out, vec![a.clone(), b.clone()], Box::new(MatmulOp))
}

struct BmmOp;
impl Op for BmmOp {
    fn backward(&self, p: &[Var], g: &Var) -> Vec<Var> {
        vec![bmm(g, &mat_t(&p[1])), bmm(&mat_t(&p[0]), g)]
    }
    fn name(&self) -> &'static str {
        "bmm"
    }
}

/// Batched matrix product: `[B,m,k] x [B,k,n] -> [B,m,n]`.
pub fn bmm(a: &Var, b: &Var) -> Var {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa.len(), 3, "bmm lhs must be 3-d");
    assert_eq!(sb.len(), 3, "bmm rhs must be 3-d");
    assert_eq!(sa[0], sb[0], "bmm batch mismatch");
    assert_eq!(sa[2], sb[1], "bmm inner dim mismatch");
    let (bsz, m, n) = (sa[0], sa[1], sb[2]);
    let mut out = ArrayD::zeros(IxDyn(&[bsz, m, n]));
    for i in 0..bsz {
        let av = a
            .data()
            .index_axis(Axis(0), i)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let bv = b
            .data()
            .index_axis(Axis(0), i)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        out.index_axis_mut(Axis(0), i).assign(&av.dot(&bv));
    }
    Var::from_op(out, vec![a.clone(), b.clone()], Box::new(BmmOp))
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

fn im2col_data(x: &ArrayD<f64>, geom: ConvGeom) -> ArrayD<f64> {
    let s = x.shape();
    let (b, c) = (s[0], s[1]);
    assert_eq!(s[2], geom.in_h);
    assert_eq!(s[3], geom.in_w);
    let (oh, ow, k) = (geom.out_h(), geom.out_w(), geom.kernel);
    let patches = oh * ow;
    let feat = c * k * k;
    let xv = standard_vec(x);
    let mut cols = vec![0.0f64; b * patches * feat];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let q = oy * ow + ox;
                let base = (bi * patches + q) * feat;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if iy < 0 || iy >= geom.in_h as isize {
                            continue; // zero padding
                        }
                        let row = ((bi * c + ci) * geom.in_h + iy as usize) * geom.in_w;
                        for kx in 0..k {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if ix < 0 || ix >= geom.in_w as isize {
                                continue;
                            }
                            cols[base + (ci * k + ky) * k + kx] = xv[row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, patches, feat]), cols).unwrap()
}

fn col2im_data(cols: &ArrayD<f64>, channels: usize, geom: ConvGeom) -> ArrayD<f64> {
    let s = cols.shape();
    let b = s[0];
    let (oh, ow, k) = (geom.out_h(), geom.out_w(), geom.kernel);
    assert_eq!(s[1], oh * ow);
    assert_eq!(s[2], channels * k * k);
    let cv = standard_vec(cols);
    let mut img = vec![0.0f64; b * channels * geom.in_h * geom.in_w];
    let feat = channels * k * k;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let q = oy * ow + ox;
                let base = (bi * (oh * ow) + q) * feat;
                for ci in 0..channels {
                    for ky in 0..k {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if iy < 0 || iy >= geom.in_h as isize {
                            continue;
                        }
                        let row = ((bi * channels + ci) * geom.in_h + iy as usize) * geom.in_w;
                        for kx in 0..k {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if ix < 0 || ix >= geom.in_w as isize {
                                continue;
                            }
                            img[row + ix as usize] += cv[base + (ci * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, channels, geom.in_h, geom.in_w]), img).unwrap()
}

struct Im2ColOp {
    channels: usize,
    geom: ConvGeom,
}
impl Op for Im2ColOp {
    fn backward(&self, _p: &[Var], g: &Var) -> Vec<Var> {
        vec![col2im(g, self.channels, self.geom)]
    }
    fn name(&self) -> &'static str {
        "im2col"
    }
}

/// Extract sliding patches: `[B,C,H,W] -> [B, oh*ow, C*k*k]` (zero padding).
pub fn im2col(x: &Var, geom: ConvGeom) -> Var {
    let channels = x.shape()[1];
    Var::from_op(
        im2col_data(x.data(), geom),
        vec![x.clone()],
        Box::new(Im2ColOp { channels, geom }),
    )
}

struct Col2ImOp {
    geom: ConvGeom,
}
impl Op for Col2ImOp {
    fn backward(&self, _p: &[Var], g: &Var) -> Vec<Var> {
        vec![im2col(g, self.geom)]
    }
    fn name(&self) -> &'static str {
        "col2im"
    }
}

/// Adjoint of [`im2col`]: scatter-add patches back onto the image plane.
pub fn col2im(cols: &Var, channels: usize, geom: ConvGeom) -> Var {
    Var::from_op(
        col2im_data(cols.data(), channels, geom),
        vec![cols.clone()],
        Box::new(Col2ImOp { geom }),
    )
}

// ---------------------------------------------------------------------------
// spectral functions of symmetric matrices
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub enum SpectralFn {
    /// Eigenvalue floor: lambda -> max(lambda, eps).
    ClampMin(f64),
    /// Matrix logarithm: lambda -> ln(lambda). Input must be positive definite.
    Log,
}

impl SpectralFn {
    fn apply(&self, l: f64) -> f64 {
        match self {
            SpectralFn::ClampMin(eps) => l.max(*eps),
            SpectralFn::Log => l.ln(),
        }
    }
    fn derivative(&self, l: f64) -> f64 {
        match self {
            SpectralFn::ClampMin(eps) => {
                if l > *eps {
                    1.0
                } else {
                    0.0
                }
            }
            SpectralFn::Log => 1.0 / l,
        }
    }
}

struct SymEigFnOp {
    /// Eigenvector bases, one [d,d] block per batch entry.
    u: Rc<ArrayD<f64>>,
    /// Loewner coefficient matrices (divided differences of the spectral fn).
    coeff: Rc<ArrayD<f64>>,
}

impl Op for SymEigFnOp {
    fn backward(&self, _p: &[Var], g: &Var) -> Vec<Var> {
        let u = Var::from_rc(Rc::clone(&self.u), false);
        let coeff = Var::from_rc(Rc::clone(&self.coeff), false);
        // the output is symmetric, so only the symmetric part of the
        // upstream gradient acts on it
        let gs = mul_scalar(&add(g, &mat_t(g)), 0.5);
        let inner = bmm(&bmm(&mat_t(&u), &gs), &u);
        let scaled = mul(&inner, &coeff);
        vec![bmm(&bmm(&u, &scaled), &mat_t(&u))]
    }
    fn name(&self) -> &'static str {
        "sym_eig_fn"
    }
}

/// Apply a spectral function to a batch of symmetric matrices `[B,d,d]`:
/// `X = U diag(l) U^T  ->  U diag(f(l)) U^T`.
///
/// The input must be symmetric (callers symmetrize first). The backward uses
/// the Daleckii-Krein divided-difference form with the eigenvalue bases and
/// coefficients captured as constants.
pub fn sym_eig_fn(x: &Var, f: SpectralFn) -> Var {
    let s = x.shape();
    assert_eq!(s.len(), 3, "sym_eig_fn expects [B,d,d]");
    assert_eq!(s[1], s[2], "sym_eig_fn expects square matrices");
    let (b, d) = (s[0], s[1]);
    let mut out = ArrayD::zeros(IxDyn(&[b, d, d]));
    let mut u_all = ArrayD::zeros(IxDyn(&[b, d, d]));
    let mut coeff_all = ArrayD::zeros(IxDyn(&[b, d, d]));
    for bi in 0..b {
        let xv = x.data().index_axis(Axis(0), bi);
        let m = nalgebra::DMatrix::from_fn(d, d, |r, c| xv[[r, c]]);
        if cfg!(debug_assertions) {
            let asym = (&m - m.transpose()).abs().max();
            debug_assert!(asym <= 1e-8, "sym_eig_fn input asymmetry {asym}");
        }
        let eig = m.symmetric_eigen();
        if let SpectralFn::Log = f {
            let min = eig.eigenvalues.min();
            assert!(
                min > 0.0,
                "matrix logarithm of a non-positive-definite matrix (min eigenvalue {min})"
            );
        }
        let lam: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let flam: Vec<f64> = lam.iter().map(|&l| f.apply(l)).collect();
        // Y = U f(L) U^T
        for r in 0..d {
            for c in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += eig.eigenvectors[(r, k)] * flam[k] * eig.eigenvectors[(c, k)];
                }
                out[[bi, r, c]] = acc;
            }
        }
        // exact bit-level symmetry
        for r in 0..d {
            for c in (r + 1)..d {
                let v = 0.5 * (out[[bi, r, c]] + out[[bi, c, r]]);
                out[[bi, r, c]] = v;
                out[[bi, c, r]] = v;
            }
        }
        for r in 0..d {
            for c in 0..d {
                u_all[[bi, r, c]] = eig.eigenvectors[(r, c)];
                let (li, lj) = (lam[r], lam[c]);
                coeff_all[[bi, r, c]] = if (li - lj).abs() > EIG_DEGENERATE_TOL {
                    (flam[r] - flam[c]) / (li - lj)
                } else {
                    f.derivative(0.5 * (li + lj))
                };
            }
        }
    }
    Var::from_op(
        out,
        vec![x.clone()],
        Box::new(SymEigFnOp {
            u: Rc::new(u_all),
            coeff: Rc::new(coeff_all),
        }),
    )
}

// ---------------------------------------------------------------------------
// compositions used everywhere
// ---------------------------------------------------------------------------

/// Symmetrize the last two axes: `(X + X^T) / 2`.
pub fn symmetrize(x: &Var) -> Var {
    mul_scalar(&add(x, &mat_t(x)), 0.5)
}

/// Row-wise softmax of `[B,C]` logits (max-shifted for stability).
pub fn softmax_rows(logits: &Var) -> Var {
    let s = logits.shape();
    assert_eq!(s.len(), 2);
    let (b, _c) = (s[0], s[1]);
    let mut mx = ArrayD::zeros(IxDyn(&[b, 1]));
    for (i, row) in logits.data().axis_iter(Axis(0)).enumerate() {
        mx[[i, 0]] = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    let shifted = sub(logits, &broadcast_to(&Var::constant(mx), s));
    let e = exp(&shifted);
    let denom = sum_to(&e, &[b, 1]);
    mul(&e, &broadcast_to(&pow_scalar(&denom, -1.0), s))
}

/// Mean cross-entropy of `[B,C]` logits against integer labels.
pub fn cross_entropy_rows(logits: &Var, labels: &[usize]) -> Var {
    let s = logits.shape();
    assert_eq!(s.len(), 2);
    let (b, c) = (s[0], s[1]);
    assert_eq!(labels.len(), b);
    let mut mx = ArrayD::zeros(IxDyn(&[b, 1]));
    for (i, row) in logits.data().axis_iter(Axis(0)).enumerate() {
        mx[[i, 0]] = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    let mxv = Var::constant(mx);
    let shifted = sub(logits, &broadcast_to(&mxv, s));
    let lse = ln(&sum_to(&exp(&shifted), &[b, 1]));
    let log_probs = sub(&shifted, &broadcast_to(&lse, s));
    let mut onehot = ArrayD::zeros(IxDyn(&[b, c]));
    for (i, &l) in labels.iter().enumerate() {
        assert!(l < c, "label {l} out of range for {c} classes");
        onehot[[i, l]] = 1.0;
    }
    let picked = sum_per_sample(&mul(&log_probs, &Var::constant(onehot)));
    neg(&mean_all(&picked))
}

/// Per-sample squared L2 norm of the difference: `[B,F] x [B,F] -> [B]`.
pub fn squared_distance_rows(a: &Var, b: &Var) -> Var {
    let d = sub(a, b);
    sum_per_sample(&mul(&d, &d))
}
