//! Parameters, layers, initializers, and the Adam optimizer.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::engine::{grad, Var};
use super::ops::{self, ConvGeom};

/// Stable handle for a parameter inside a [`ParamSet`].
pub type ParamId = usize;

/// An ordered collection of trainable tensors.
///
/// Parameters are identified by insertion order, so as long as a model
/// constructs its layers in a fixed order, ids (and therefore optimizer
/// state and checkpoints) are reproducible.
#[derive(Default)]
pub struct ParamSet {
    params: Vec<Var>,
    names: Vec<String>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.params.push(Var::leaf(value));
        self.names.push(name.to_string());
        self.params.len() - 1
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.params[id].clone()
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<f64>) {
        assert_eq!(
            self.params[id].shape(),
            value.shape(),
            "parameter {} shape change",
            self.names[id]
        );
        self.params[id] = Var::leaf(value);
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.params.len()
    }

    /// Snapshot of every tensor, keyed by name (for checkpointing).
    pub fn export(&self) -> BTreeMap<String, ArrayD<f64>> {
        self.names
            .iter()
            .cloned()
            .zip(self.params.iter().map(|p| p.data().clone()))
            .collect()
    }

    /// Restore tensors by name. Every parameter must be present with the
    /// right shape.
    pub fn import(&mut self, tensors: &BTreeMap<String, ArrayD<f64>>) -> crate::Result<()> {
        for i in 0..self.params.len() {
            let name = self.names[i].clone();
            let t = tensors.get(&name).ok_or_else(|| {
                crate::Error::Checkpoint(format!("missing tensor {name} in checkpoint"))
            })?;
            if t.shape() != self.params[i].shape() {
                return Err(crate::Error::shape(
                    format!("checkpoint tensor {name}"),
                    self.params[i].shape(),
                    t.shape(),
                ));
            }
            self.params[i] = Var::leaf(t.clone());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// initializers
// ---------------------------------------------------------------------------

/// He-normal initialization: N(0, sqrt(2 / fan_in)) over the given shape.
pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Gaussian initialization with explicit standard deviation.
pub fn gaussian<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Random matrix with orthonormal columns: a Gaussian draw followed by the
/// same QR step used to maintain the constraint during training.
pub fn orthonormal_columns<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> ArrayD<f64> {
    assert!(cols <= rows, "need rows >= cols for orthonormal columns");
    let g = gaussian(rng, &[rows, cols], 1.0);
    qr_orthonormalize(&g)
}

/// Project a full-column-rank matrix onto the set of matrices with
/// orthonormal columns via thin QR. Column signs are fixed so that each
/// diagonal entry of R is positive, making the result a deterministic
/// function of the input.
pub fn qr_orthonormalize(m: &ArrayD<f64>) -> ArrayD<f64> {
    let s = m.shape();
    assert_eq!(s.len(), 2);
    let (rows, cols) = (s[0], s[1]);
    assert!(cols <= rows);
    let dm = nalgebra::DMatrix::from_fn(rows, cols, |r, c| m[[r, c]]);
    let qr = dm.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..cols {
        if r[(c, c)] < 0.0 {
            for rr in 0..rows {
                q[(rr, c)] = -q[(rr, c)];
            }
        }
    }
    ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |ix| q[(ix[0], ix[1])])
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

/// Fully connected layer `y = x W + b` for `x: [B, in]`.
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Dense {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let weight = params.register(
            &format!("{name}.weight"),
            he_normal(rng, &[in_features, out_features], in_features),
        );
        let bias = params.register(
            &format!("{name}.bias"),
            ArrayD::zeros(IxDyn(&[out_features])),
        );
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, params: &ParamSet, x: &Var) -> Var {
        let s = x.shape();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1], self.in_features);
        let b = s[0];
        let y = ops::matmul(x, &params.get(self.weight));
        let bias = ops::reshape(&params.get(self.bias), &[1, self.out_features]);
        ops::add(&y, &ops::broadcast_to(&bias, &[b, self.out_features]))
    }
}

/// 2-d convolution over `[B,C,H,W]`, implemented as im2col + matmul.
///
/// The weight is stored as `[C*k*k, O]` so the patch matrix multiplies it
/// directly; `scale` lets residual-block output layers start at zero.
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init_scale: f64,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let mut w = he_normal(rng, &[fan_in, out_channels], fan_in);
        if init_scale != 1.0 {
            w.mapv_inplace(|v| v * init_scale);
        }
        let weight = params.register(&format!("{name}.weight"), w);
        let bias = params.register(
            &format!("{name}.bias"),
            ArrayD::zeros(IxDyn(&[out_channels])),
        );
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, params: &ParamSet, x: &Var) -> Var {
        let s = x.shape();
        assert_eq!(s.len(), 4, "conv2d expects [B,C,H,W]");
        assert_eq!(s[1], self.in_channels, "conv2d channel mismatch");
        let geom = ConvGeom {
            in_h: s[2],
            in_w: s[3],
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let (b, oh, ow) = (s[0], geom.out_h(), geom.out_w());
        let cols = ops::im2col(x, geom); // [B, oh*ow, C*k*k]
        let flat = ops::reshape(&cols, &[b * oh * ow, self.in_channels * self.kernel * self.kernel]);
        let y = ops::matmul(&flat, &params.get(self.weight)); // [B*oh*ow, O]
        let bias = ops::reshape(&params.get(self.bias), &[1, self.out_channels]);
        let y = ops::add(&y, &ops::broadcast_to(&bias, &[b * oh * ow, self.out_channels]));
        // [B, oh, ow, O] -> [B, O, oh, ow]
        let y = ops::reshape(&y, &[b, oh, ow, self.out_channels]);
        ops::permute_axes(&y, &[0, 3, 1, 2])
    }
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// Adam with bias correction. `beta1 = 0` reproduces the RMSProp-like
/// setting used for adversarial training.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = params
            .ids()
            .map(|id| ArrayD::zeros(IxDyn(params.get(id).shape())))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self {
            beta1,
            beta2,
            eps,
            m,
            v,
            t: 0,
        }
    }

    /// Apply one update. `grads[i]` is the gradient for parameter id `i`
    /// (`None` leaves it untouched).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<ArrayD<f64>>], lr: f64) {
        assert_eq!(grads.len(), params.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in 0..grads.len() {
            let Some(g) = &grads[id] else { continue };
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            m.zip_mut_with(g, |mi, gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let mut new = params.get(id).data().clone();
            ndarray::Zip::from(&mut new)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + self.eps);
                });
            params.set(id, new);
        }
    }
}

/// Compute gradients of a scalar loss with respect to every parameter in the
/// set, as plain arrays ready for an optimizer step.
pub fn param_grads(loss: &Var, params: &ParamSet) -> Vec<Option<ArrayD<f64>>> {
    let vars: Vec<Var> = params.ids().map(|id| params.get(id)).collect();
    let refs: Vec<&Var> = vars.iter().collect();
    grad(loss, &refs, false)
        .into_iter()
        .map(|g| g.map(|v| v.data().clone()))
        .collect()
}
