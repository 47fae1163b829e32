//! Feature-space super-resolution: a generator G maps low-resolution
//! feature matrices onto the high-resolution feature manifold, trained
//! against a critic D under a Wasserstein-divergence objective, plus a
//! perceptual loss through the frozen recognition head and a feature-wise
//! L2 loss, with optional classification-aware per-sample re-weighting.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::autograd::nn::{param_grads, Adam, Conv2d, Dense, ParamSet};
use crate::autograd::{grad, ops, Var};
use crate::backbone::FerModel;
use crate::checkpoint::Checkpoint;
use crate::spd::{FeatureTensor, Provenance};
use crate::util::derive_seed;
use crate::{Error, Result};

const LEAKY_SLOPE: f64 = 0.2;
/// Residual scaling inside and around each dense block.
const RESIDUAL_SCALE: f64 = 0.2;
/// Width of the critic's hidden fully connected layer.
const CRITIC_FC: usize = 64;

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// Hyperparameters of the adversarial feature super-resolution stage.
#[derive(Debug, Clone, PartialEq)]
pub struct GanConfig {
    /// Gradient-penalty coefficient k.
    pub k: f64,
    /// Gradient-penalty exponent p.
    pub p: f64,
    /// Re-weighting offset σ (must exceed 1 so weights stay positive).
    pub sigma: f64,
    /// Re-weighting exponent r.
    pub r: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Iterations at which the learning rate is halved.
    pub lr_halving_iters: Vec<u64>,
    pub batch_size: usize,
    pub critic_steps_per_gen_step: usize,
    /// Term weights for (adversarial, perceptual, feature-L2).
    pub term_weights: [f64; 3],
    pub reweight_enabled: bool,
    /// Swap the printed adversarial sign pairing (critic maximizes what it
    /// would otherwise minimize, and vice versa for the generator).
    pub flip_adversarial_sign: bool,
    /// Number of residual-in-residual dense blocks in G.
    pub rrdb_blocks: usize,
    /// Internal channel count of G.
    pub nf: usize,
    /// Growth channels of each dense unit.
    pub gc: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl GanConfig {
    pub fn paper() -> Self {
        GanConfig {
            k: 2.0,
            p: 6.0,
            sigma: 1.5,
            r: 1.0,
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.999,
            lr_halving_iters: vec![20_000, 50_000, 100_000, 200_000],
            batch_size: 32,
            critic_steps_per_gen_step: 1,
            term_weights: [1.0, 1.0, 1.0],
            reweight_enabled: true,
            flip_adversarial_sign: false,
            rrdb_blocks: 6,
            nf: 32,
            gc: 16,
        }
    }

    /// Reduced generator for fast end-to-end runs.
    pub fn smoke() -> Self {
        GanConfig {
            rrdb_blocks: 2,
            nf: 12,
            gc: 6,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.sigma > 1.0) {
            return bad(format!("fsr.sigma must be > 1, got {}", self.sigma));
        }
        if !(self.r >= 1.0) {
            return bad(format!("fsr.r must be >= 1, got {}", self.r));
        }
        if !(self.k > 0.0) {
            return bad(format!("fsr.k must be > 0, got {}", self.k));
        }
        if !(self.p >= 1.0) {
            return bad(format!("fsr.p must be >= 1, got {}", self.p));
        }
        if !(self.lr > 0.0) {
            return bad(format!("fsr.lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("fsr.batch_size must be >= 1".into());
        }
        if self.critic_steps_per_gen_step == 0 {
            return bad("fsr.critic_steps must be >= 1".into());
        }
        if self.rrdb_blocks == 0 || self.nf == 0 || self.gc == 0 {
            return bad("fsr generator dimensions must be >= 1".into());
        }
        Ok(())
    }

    fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        kv.insert("fsr.k".into(), self.k.to_string());
        kv.insert("fsr.p".into(), self.p.to_string());
        kv.insert("fsr.sigma".into(), self.sigma.to_string());
        kv.insert("fsr.r".into(), self.r.to_string());
        kv.insert("fsr.lr".into(), self.lr.to_string());
        kv.insert("fsr.beta1".into(), self.beta1.to_string());
        kv.insert("fsr.beta2".into(), self.beta2.to_string());
        kv.insert(
            "fsr.lr_halving_iters".into(),
            self.lr_halving_iters
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.insert("fsr.batch_size".into(), self.batch_size.to_string());
        kv.insert(
            "fsr.critic_steps".into(),
            self.critic_steps_per_gen_step.to_string(),
        );
        kv.insert(
            "fsr.term_weights".into(),
            format!(
                "{},{},{}",
                self.term_weights[0], self.term_weights[1], self.term_weights[2]
            ),
        );
        kv.insert("fsr.reweight".into(), self.reweight_enabled.to_string());
        kv.insert(
            "fsr.flip_adversarial_sign".into(),
            self.flip_adversarial_sign.to_string(),
        );
        kv.insert("fsr.rrdb_blocks".into(), self.rrdb_blocks.to_string());
        kv.insert("fsr.nf".into(), self.nf.to_string());
        kv.insert("fsr.gc".into(), self.gc.to_string());
        kv
    }

    fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(kv: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
            kv.get(key)
                .map(|s| s.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing config key {key}")))
        }
        fn num<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            get(kv, key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("unparseable config value for {key}")))
        }
        fn list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|p| {
                    p.parse()
                        .map_err(|_| Error::Checkpoint(format!("unparseable list entry {p}")))
                })
                .collect()
        }
        let weights: Vec<f64> = list(get(kv, "fsr.term_weights")?)?;
        if weights.len() != 3 {
            return Err(Error::Checkpoint(
                "fsr.term_weights must have 3 entries".into(),
            ));
        }
        Ok(GanConfig {
            k: num(kv, "fsr.k")?,
            p: num(kv, "fsr.p")?,
            sigma: num(kv, "fsr.sigma")?,
            r: num(kv, "fsr.r")?,
            lr: num(kv, "fsr.lr")?,
            beta1: num(kv, "fsr.beta1")?,
            beta2: num(kv, "fsr.beta2")?,
            lr_halving_iters: list(get(kv, "fsr.lr_halving_iters")?)?,
            batch_size: num(kv, "fsr.batch_size")?,
            critic_steps_per_gen_step: num(kv, "fsr.critic_steps")?,
            term_weights: [weights[0], weights[1], weights[2]],
            reweight_enabled: get(kv, "fsr.reweight")? == "true",
            flip_adversarial_sign: get(kv, "fsr.flip_adversarial_sign")? == "true",
            rrdb_blocks: num(kv, "fsr.rrdb_blocks")?,
            nf: num(kv, "fsr.nf")?,
            gc: num(kv, "fsr.gc")?,
        })
    }
}

// ---------------------------------------------------------------------------
// networks
// ---------------------------------------------------------------------------

struct DenseUnit {
    convs: Vec<Conv2d>,
}

impl DenseUnit {
    fn new(params: &mut ParamSet, rng: &mut ChaCha12Rng, name: &str, nf: usize, gc: usize) -> Self {
        let mut convs = Vec::new();
        for c in 0..5 {
            let (ic, oc) = if c == 4 {
                (nf + 4 * gc, nf)
            } else {
                (nf + c * gc, gc)
            };
            convs.push(Conv2d::new(
                params,
                rng,
                &format!("{name}.conv{}", c + 1),
                ic,
                oc,
                3,
                1,
                1,
                1.0,
            ));
        }
        DenseUnit { convs }
    }

    fn forward(&self, params: &ParamSet, x: &Var) -> Var {
        let mut feats = vec![x.clone()];
        for (c, conv) in self.convs.iter().enumerate() {
            let inp = if feats.len() == 1 {
                feats[0].clone()
            } else {
                ops::concat(1, &feats)
            };
            let y = conv.forward(params, &inp);
            if c < 4 {
                feats.push(ops::leaky_relu(&y, LEAKY_SLOPE));
            } else {
                return ops::add(x, &ops::mul_scalar(&y, RESIDUAL_SCALE));
            }
        }
        unreachable!()
    }
}

/// Residual-in-residual dense block: three dense units plus a scaled skip.
struct Rrdb {
    units: Vec<DenseUnit>,
}

impl Rrdb {
    fn new(params: &mut ParamSet, rng: &mut ChaCha12Rng, name: &str, nf: usize, gc: usize) -> Self {
        let units = (0..3)
            .map(|u| DenseUnit::new(params, rng, &format!("{name}.unit{}", u + 1), nf, gc))
            .collect();
        Rrdb { units }
    }

    fn forward(&self, params: &ParamSet, x: &Var) -> Var {
        let mut y = x.clone();
        for u in &self.units {
            y = u.forward(params, &y);
        }
        ops::add(x, &ops::mul_scalar(&y, RESIDUAL_SCALE))
    }
}

struct GeneratorNet {
    conv_in: Conv2d,
    blocks: Vec<Rrdb>,
    conv_out: Conv2d,
}

struct CriticNet {
    conv1: Conv2d,
    conv2: Conv2d,
    fc1: Dense,
    fc2: Dense,
    flat: usize,
}

fn conv_out_side(d: usize) -> usize {
    // kernel 3, stride 2, pad 1
    (d + 2 - 3) / 2 + 1
}

// ---------------------------------------------------------------------------
// the model
// ---------------------------------------------------------------------------

/// Generator and critic with their optimizer state and iteration counter.
pub struct FsrModel {
    pub cfg: GanConfig,
    /// Side length d' of the feature matrices this model operates on.
    pub feature_dim: usize,
    pub gen_params: ParamSet,
    pub critic_params: ParamSet,
    gen: GeneratorNet,
    critic: CriticNet,
    gen_opt: Adam,
    critic_opt: Adam,
    pub iteration: u64,
}

impl FsrModel {
    pub fn new(cfg: GanConfig, feature_dim: usize, seed: u64) -> Result<FsrModel> {
        cfg.validate()?;
        if feature_dim < 4 {
            return Err(Error::Config(format!(
                "feature dimension {feature_dim} too small for the critic's two stride-2 stages"
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "fsr/init"));
        let mut gen_params = ParamSet::new();
        let conv_in = Conv2d::new(&mut gen_params, &mut rng, "conv_in", 1, cfg.nf, 3, 1, 1, 1.0);
        let blocks = (0..cfg.rrdb_blocks)
            .map(|b| {
                Rrdb::new(
                    &mut gen_params,
                    &mut rng,
                    &format!("block{}", b + 1),
                    cfg.nf,
                    cfg.gc,
                )
            })
            .collect();
        // Zero-initialized output projection: the untrained generator is the
        // identity map on features (pure residual path).
        let conv_out = Conv2d::new(&mut gen_params, &mut rng, "conv_out", cfg.nf, 1, 3, 1, 1, 0.0);
        let gen = GeneratorNet {
            conv_in,
            blocks,
            conv_out,
        };

        let mut critic_params = ParamSet::new();
        let c1 = cfg.nf;
        let c2 = 2 * cfg.nf;
        let conv1 = Conv2d::new(&mut critic_params, &mut rng, "conv1", 1, c1, 3, 2, 1, 1.0);
        let conv2 = Conv2d::new(&mut critic_params, &mut rng, "conv2", c1, c2, 3, 2, 1, 1.0);
        let side = conv_out_side(conv_out_side(feature_dim));
        let flat = c2 * side * side;
        let fc1 = Dense::new(&mut critic_params, &mut rng, "fc1", flat, CRITIC_FC);
        let fc2 = Dense::new(&mut critic_params, &mut rng, "fc2", CRITIC_FC, 1);
        let critic = CriticNet {
            conv1,
            conv2,
            fc1,
            fc2,
            flat,
        };

        let gen_opt = Adam::new(&gen_params, cfg.beta1, cfg.beta2, 1e-8);
        let critic_opt = Adam::new(&critic_params, cfg.beta1, cfg.beta2, 1e-8);
        Ok(FsrModel {
            cfg,
            feature_dim,
            gen_params,
            critic_params,
            gen,
            critic,
            gen_opt,
            critic_opt,
            iteration: 0,
        })
    }

    fn check_dims(&self, shape: &[usize], context: &str) -> Result<()> {
        let d = self.feature_dim;
        if shape.len() != 3 || shape[1] != d || shape[2] != d {
            return Err(Error::shape(context, &[shape[0], d, d], shape));
        }
        Ok(())
    }

    /// Generator over a batch of feature matrices `[B, d', d']`, as a graph
    /// node. Output is exactly symmetric.
    pub fn generator_var(&self, x: &Var) -> Result<Var> {
        self.check_dims(x.shape(), "generator input")?;
        let (b, d) = (x.shape()[0], self.feature_dim);
        let x4 = ops::reshape(x, &[b, 1, d, d]);
        let mut t = self.gen.conv_in.forward(&self.gen_params, &x4);
        for blk in &self.gen.blocks {
            t = blk.forward(&self.gen_params, &t);
        }
        let corr = self.gen.conv_out.forward(&self.gen_params, &t);
        let y = ops::add(&x4, &corr);
        Ok(ops::symmetrize(&ops::reshape(&y, &[b, d, d])))
    }

    /// Critic scores for a batch of feature matrices: `[B, d', d']` to `[B]`.
    pub fn critic_var(&self, x: &Var) -> Result<Var> {
        self.check_dims(x.shape(), "critic input")?;
        let (b, d) = (x.shape()[0], self.feature_dim);
        let x4 = ops::reshape(x, &[b, 1, d, d]);
        let h = ops::leaky_relu(&self.critic.conv1.forward(&self.critic_params, &x4), LEAKY_SLOPE);
        let h = ops::leaky_relu(&self.critic.conv2.forward(&self.critic_params, &h), LEAKY_SLOPE);
        let h = ops::reshape(&h, &[b, self.critic.flat]);
        let h = ops::leaky_relu(&self.critic.fc1.forward(&self.critic_params, &h), LEAKY_SLOPE);
        let s = self.critic.fc2.forward(&self.critic_params, &h);
        Ok(ops::reshape(&s, &[b]))
    }

    /// Super-resolve one feature tensor (inference).
    pub fn generator_forward(&self, f_lr: &FeatureTensor) -> Result<FeatureTensor> {
        let x = Var::constant(f_lr.mat.clone().insert_axis(Axis(0)));
        let y = self.generator_var(&x)?;
        let mat = y.data().index_axis(Axis(0), 0).to_owned();
        Ok(FeatureTensor::new(mat, Provenance::Sr))
    }

    /// Super-resolve a batch of feature matrices (inference).
    pub fn generator_forward_batch(&self, mats: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let y = self.generator_var(&Var::constant(mats.clone()))?;
        Ok(y.data().clone())
    }

    /// Critic score of one feature tensor (inference).
    pub fn critic_forward(&self, f: &FeatureTensor) -> Result<f64> {
        let x = Var::constant(f.mat.clone().insert_axis(Axis(0)));
        Ok(self.critic_var(&x)?.data()[[0]])
    }

    /// Learning rate at the current iteration, after scheduled halvings.
    pub fn current_lr(&self) -> f64 {
        let halvings = self
            .cfg
            .lr_halving_iters
            .iter()
            .filter(|&&t| self.iteration >= t)
            .count();
        self.cfg.lr * 0.5f64.powi(halvings as i32)
    }

    // -- persistence ---------------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut config = self.cfg.to_kv();
        config.insert("fsr.feature_dim".into(), self.feature_dim.to_string());
        config.insert("fsr.iteration".into(), self.iteration.to_string());
        let mut tensors = BTreeMap::new();
        for (name, t) in self.gen_params.export() {
            tensors.insert(format!("gen.{name}"), t);
        }
        for (name, t) in self.critic_params.export() {
            tensors.insert(format!("critic.{name}"), t);
        }
        Checkpoint {
            kind: "fsr".into(),
            config,
            tensors,
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<FsrModel> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("fsr")?;
        let cfg = GanConfig::from_kv(&ck.config)?;
        let feature_dim: usize = ck
            .config
            .get("fsr.feature_dim")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing fsr.feature_dim".into()))?;
        let iteration: u64 = ck
            .config
            .get("fsr.iteration")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        let mut model = FsrModel::new(cfg, feature_dim, 0)?;
        let mut gen_t = BTreeMap::new();
        let mut critic_t = BTreeMap::new();
        for (name, t) in ck.tensors {
            if let Some(rest) = name.strip_prefix("gen.") {
                gen_t.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix("critic.") {
                critic_t.insert(rest.to_string(), t);
            }
        }
        model.gen_params.import(&gen_t)?;
        model.critic_params.import(&critic_t)?;
        model.iteration = iteration;
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Linear interpolation x̂ = α·f_hr + (1−α)·f_sr of two feature tensors.
pub fn interpolate(f_hr: &FeatureTensor, f_sr: &FeatureTensor, alpha: f64) -> FeatureTensor {
    assert_eq!(f_hr.mat.shape(), f_sr.mat.shape(), "interpolate shape");
    let mat = &f_hr.mat * alpha + &f_sr.mat * (1.0 - alpha);
    FeatureTensor::new(mat, Provenance::Sr)
}

fn interpolate_batch(hr: &ArrayD<f64>, sr: &ArrayD<f64>, alphas: &[f64]) -> ArrayD<f64> {
    let mut out = hr.clone();
    for (i, &a) in alphas.iter().enumerate() {
        let h = hr.index_axis(Axis(0), i);
        let s = sr.index_axis(Axis(0), i);
        out.index_axis_mut(Axis(0), i).assign(&(&h * a + &s * (1.0 - a)));
    }
    out
}

/// Critic objective on one batch: `mean D(real) − mean D(generated) +
/// k · mean ‖∇_x̂ D(x̂)‖₂^p`, with x̂ a per-sample uniform interpolation.
/// The critic minimizes this exactly as written (the sign pairing flips
/// when `flip_adversarial_sign` is set). Returns (loss, penalty) as graph
/// nodes; the penalty term is differentiable with respect to the critic's
/// parameters (double backpropagation).
pub fn critic_loss_with<F>(
    critic_fn: F,
    f_hr: &ArrayD<f64>,
    f_sr: &ArrayD<f64>,
    k: f64,
    p: f64,
    flip: bool,
    rng: &mut ChaCha12Rng,
) -> Result<(Var, Var)>
where
    F: Fn(&Var) -> Result<Var>,
{
    let m = f_hr.shape()[0];
    assert_eq!(m, f_sr.shape()[0], "batch sizes must match");
    let d_real = ops::mean_all(&critic_fn(&Var::constant(f_hr.clone()))?);
    let d_fake = ops::mean_all(&critic_fn(&Var::constant(f_sr.clone()))?);

    let alphas: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..=1.0)).collect();
    let x_hat = Var::leaf(interpolate_batch(f_hr, f_sr, &alphas));
    let d_hat = critic_fn(&x_hat)?;
    let sum_scores = ops::sum_all(&d_hat);
    let g = grad(&sum_scores, &[&x_hat], true).remove(0);
    let penalty = match g {
        Some(g) => {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(
                    "non-finite critic gradient in the penalty term".into(),
                ));
            }
            let sq = ops::sum_per_sample(&ops::mul(&g, &g)); // [m] squared norms
            let normp = ops::pow_scalar(&sq, p / 2.0);
            ops::mul_scalar(&ops::mean_all(&normp), k)
        }
        // a critic that ignores its input has zero gradient everywhere
        None => Var::constant(ArrayD::zeros(IxDyn(&[]))),
    };
    let adv = if flip {
        ops::sub(&d_fake, &d_real)
    } else {
        ops::sub(&d_real, &d_fake)
    };
    Ok((ops::add(&adv, &penalty), penalty))
}

/// Critic objective using the model's own critic network.
pub fn critic_loss(
    fsr: &FsrModel,
    f_hr: &ArrayD<f64>,
    f_sr: &ArrayD<f64>,
    rng: &mut ChaCha12Rng,
) -> Result<(Var, Var)> {
    critic_loss_with(
        |x| fsr.critic_var(x),
        f_hr,
        f_sr,
        fsr.cfg.k,
        fsr.cfg.p,
        fsr.cfg.flip_adversarial_sign,
        rng,
    )
}

/// Per-sample adversarial contribution for the generator: the critic score
/// of each generated feature, with the sign the generator minimizes.
pub fn generator_gan_per_sample(fsr: &FsrModel, f_sr: &Var) -> Result<Var> {
    let scores = fsr.critic_var(f_sr)?;
    Ok(if fsr.cfg.flip_adversarial_sign {
        ops::neg(&scores)
    } else {
        scores
    })
}

/// Mean adversarial generator loss.
pub fn generator_gan_loss(fsr: &FsrModel, f_sr: &Var) -> Result<Var> {
    Ok(ops::mean_all(&generator_gan_per_sample(fsr, f_sr)?))
}

/// Per-sample squared distance between head embeddings C(f_sr) and C(f_hr).
pub fn perceptual_per_sample(fer: &FerModel, f_sr: &Var, f_hr: &Var) -> Var {
    let e_sr = fer.embed_from_mats(f_sr);
    let e_hr = fer.embed_from_mats(f_hr);
    ops::squared_distance_rows(&e_sr, &e_hr)
}

/// Mean perceptual loss (1/m)·Σ ‖C(f_sr) − C(f_hr)‖₂².
pub fn perceptual_loss(fer: &FerModel, f_sr: &Var, f_hr: &Var) -> Var {
    ops::mean_all(&perceptual_per_sample(fer, f_sr, f_hr))
}

/// Per-sample squared distance in the half-vectorized feature space.
pub fn feature_l2_per_sample(f_sr: &Var, f_hr: &Var) -> Var {
    let v_sr = crate::spd::halfvec(f_sr);
    let v_hr = crate::spd::halfvec(f_hr);
    ops::squared_distance_rows(&v_sr, &v_hr)
}

/// Mean feature-wise L2 loss.
pub fn feature_l2_loss(f_sr: &Var, f_hr: &Var) -> Var {
    ops::mean_all(&feature_l2_per_sample(f_sr, f_hr))
}

/// One re-weighting coefficient w = (σ − p)^r.
pub fn reweight(sigma: f64, r: f64, p: f64) -> f64 {
    (sigma - p).powf(r)
}

/// Classification-aware per-sample weights w_i = (σ − p_i)^r, where p_i is
/// the frozen model's predicted probability of the true class on the
/// current generated feature. No gradient flows through the weights.
pub fn compute_reweights(
    fer: &FerModel,
    f_sr: &ArrayD<f64>,
    labels: &[usize],
    cfg: &GanConfig,
) -> Result<Vec<f64>> {
    let m = f_sr.shape()[0];
    assert_eq!(labels.len(), m, "one label per sample");
    let logits = fer.logits_from_mats(&Var::constant(f_sr.clone()));
    let probs = ops::softmax_rows(&logits);
    let pd = probs.data();
    let mut weights = Vec::with_capacity(m);
    for (i, &label) in labels.iter().enumerate() {
        let p = pd[[i, label]];
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Numerical(format!(
                "class probability {p} outside [0,1] for sample {i}"
            )));
        }
        weights.push(reweight(cfg.sigma, cfg.r, p));
    }
    Ok(weights)
}

/// Weighted total generator loss. Each per-sample contribution is scaled by
/// w_i before mean reduction; the three term means are then combined with
/// the configured term weights. Returns the scalar to backpropagate plus
/// the three weighted term means for logging.
pub fn total_generator_loss(
    cfg: &GanConfig,
    weights: &[f64],
    gan_ps: &Var,
    perc_ps: &Var,
    feat_ps: &Var,
) -> (Var, [f64; 3]) {
    let m = weights.len();
    assert_eq!(gan_ps.shape(), &[m]);
    assert_eq!(perc_ps.shape(), &[m]);
    assert_eq!(feat_ps.shape(), &[m]);
    let w = Var::constant(ArrayD::from_shape_vec(IxDyn(&[m]), weights.to_vec()).unwrap());
    let l_gan = ops::mean_all(&ops::mul(&w, gan_ps));
    let l_perc = ops::mean_all(&ops::mul(&w, perc_ps));
    let l_feat = ops::mean_all(&ops::mul(&w, feat_ps));
    let [wg, wp, wf] = cfg.term_weights;
    let total = ops::add(
        &ops::add(
            &ops::mul_scalar(&l_gan, wg),
            &ops::mul_scalar(&l_perc, wp),
        ),
        &ops::mul_scalar(&l_feat, wf),
    );
    (total, [l_gan.value(), l_perc.value(), l_feat.value()])
}

/// Every scalar that went into one training step.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LossBreakdown {
    pub iteration: u64,
    pub l_gan_g: f64,
    pub l_perceptual: f64,
    pub l_feat_l2: f64,
    pub l_total_g: f64,
    pub l_critic: f64,
    pub penalty: f64,
    pub per_sample_weights: Vec<f64>,
    pub lr: f64,
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

/// One critic update on a fixed real/generated batch. Returns (loss, penalty).
fn critic_step(
    fsr: &mut FsrModel,
    f_hr: &ArrayD<f64>,
    f_sr_detached: &ArrayD<f64>,
    lr: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, f64)> {
    let (loss, penalty) = critic_loss(fsr, f_hr, f_sr_detached, rng)?;
    let (lv, pv) = (loss.value(), penalty.value());
    if !lv.is_finite() {
        return Err(Error::Diverged(format!(
            "critic loss became {lv} at iteration {}",
            fsr.iteration
        )));
    }
    let grads = param_grads(&loss, &fsr.critic_params);
    fsr.critic_opt.step(&mut fsr.critic_params, &grads, lr);
    Ok((lv, pv))
}

/// One adversarial training step: `critic_steps_per_gen_step` critic updates
/// followed by one generator update, with the learning-rate schedule applied.
pub fn train_step(
    fsr: &mut FsrModel,
    fer: &FerModel,
    f_hr: &ArrayD<f64>,
    f_lr: &ArrayD<f64>,
    labels: &[usize],
    rng: &mut ChaCha12Rng,
) -> Result<LossBreakdown> {
    assert!(fer.frozen, "the recognition model must be frozen");
    let lr = fsr.current_lr();

    // One generator forward serves both phases: the critic trains against
    // the detached output, and the generator update reuses the same graph
    // (the critic update does not touch generator parameters).
    let f_sr_var = fsr.generator_var(&Var::constant(f_lr.clone()))?;
    let f_sr_data = f_sr_var.data().clone();

    let mut l_critic = 0.0;
    let mut penalty = 0.0;
    for _ in 0..fsr.cfg.critic_steps_per_gen_step {
        let (lv, pv) = critic_step(fsr, f_hr, &f_sr_data, lr, rng)?;
        l_critic = lv;
        penalty = pv;
    }

    let weights = if fsr.cfg.reweight_enabled {
        compute_reweights(fer, &f_sr_data, labels, &fsr.cfg)?
    } else {
        vec![1.0; labels.len()]
    };

    let f_hr_var = Var::constant(f_hr.clone());
    let gan_ps = generator_gan_per_sample(fsr, &f_sr_var)?;
    let perc_ps = perceptual_per_sample(fer, &f_sr_var, &f_hr_var);
    let feat_ps = feature_l2_per_sample(&f_sr_var, &f_hr_var);
    let (total, [l_gan_g, l_perceptual, l_feat_l2]) =
        total_generator_loss(&fsr.cfg, &weights, &gan_ps, &perc_ps, &feat_ps);
    let l_total_g = total.value();
    if !l_total_g.is_finite() {
        return Err(Error::Diverged(format!(
            "generator loss became {l_total_g} at iteration {}",
            fsr.iteration
        )));
    }
    let grads = param_grads(&total, &fsr.gen_params);
    fsr.gen_opt.step(&mut fsr.gen_params, &grads, lr);

    let breakdown = LossBreakdown {
        iteration: fsr.iteration,
        l_gan_g,
        l_perceptual,
        l_feat_l2,
        l_total_g,
        l_critic,
        penalty,
        per_sample_weights: weights,
        lr,
    };
    fsr.iteration += 1;
    Ok(breakdown)
}

/// A training or validation sample in feature space.
#[derive(Debug, Clone)]
pub struct FsrSample {
    pub f_hr: ArrayD<f64>,
    pub f_lr: ArrayD<f64>,
    pub label: usize,
    pub scale: u32,
}

/// Extract paired features for the super-resolution stage: the HR image
/// directly, the LR image after bicubic upsampling to canonical size.
pub fn prepare_fsr_samples(
    fer: &FerModel,
    pairs: &[crate::data::PairedSample],
) -> Result<Vec<FsrSample>> {
    let canonical = fer.cfg.input_size;
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(32) {
        let hr_imgs: Vec<&crate::data::RgbImage> = chunk.iter().map(|p| &p.hr.image).collect();
        let up: Vec<crate::data::RgbImage> = chunk
            .iter()
            .map(|p| crate::data::upsample_to_canonical(&p.lr.image, canonical, canonical))
            .collect();
        let lr_imgs: Vec<&crate::data::RgbImage> = up.iter().collect();
        let f_hr = fer.extract_features(&hr_imgs, Provenance::Hr)?;
        let f_lr = fer.extract_features(&lr_imgs, Provenance::Lr)?;
        for ((pair, fh), fl) in chunk.iter().zip(f_hr).zip(f_lr) {
            out.push(FsrSample {
                f_hr: fh.mat,
                f_lr: fl.mat,
                label: pair.hr.label,
                scale: pair.scale,
            });
        }
    }
    Ok(out)
}

/// One periodic validation measurement.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ValPoint {
    pub iteration: u64,
    pub mean_accuracy: f64,
    pub per_scale: BTreeMap<u32, f64>,
}

/// Run-control knobs for [`train_fsr`] that are not part of the
/// published-hyperparameter set.
#[derive(Debug, Clone)]
pub struct FsrTrainOpts {
    pub iters: u64,
    pub val_every: u64,
    /// Cap on validation samples per scale (0 = use all).
    pub val_subset_per_scale: usize,
    pub seed: u64,
    /// Append-only JSONL training log.
    pub log_path: Option<PathBuf>,
    /// Where the best-by-mean-validation-accuracy checkpoint is written.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for FsrTrainOpts {
    fn default() -> Self {
        FsrTrainOpts {
            iters: 2000,
            val_every: 200,
            val_subset_per_scale: 0,
            seed: 42,
            log_path: None,
            checkpoint_path: None,
        }
    }
}

/// Per-scale accuracy of generator+classifier on feature-space samples.
pub fn validate_fsr(
    fsr: &FsrModel,
    fer: &FerModel,
    val: &[FsrSample],
    subset_per_scale: usize,
) -> Result<(f64, BTreeMap<u32, f64>)> {
    let mut by_scale: BTreeMap<u32, Vec<&FsrSample>> = BTreeMap::new();
    for s in val {
        let v = by_scale.entry(s.scale).or_default();
        if subset_per_scale == 0 || v.len() < subset_per_scale {
            v.push(s);
        }
    }
    let mut per_scale = BTreeMap::new();
    for (&scale, samples) in &by_scale {
        let mut correct = 0usize;
        for chunk in samples.chunks(64) {
            let d = fsr.feature_dim;
            let mut batch = ArrayD::zeros(IxDyn(&[chunk.len(), d, d]));
            for (i, s) in chunk.iter().enumerate() {
                batch.index_axis_mut(Axis(0), i).assign(&s.f_lr);
            }
            let sr = fsr.generator_forward_batch(&batch)?;
            let feats: Vec<FeatureTensor> = (0..chunk.len())
                .map(|i| FeatureTensor::new(sr.index_axis(Axis(0), i).to_owned(), Provenance::Sr))
                .collect();
            let preds = fer.predict_features(&feats);
            correct += preds
                .iter()
                .zip(chunk.iter())
                .filter(|(p, s)| **p == s.label)
                .count();
        }
        per_scale.insert(scale, correct as f64 / samples.len() as f64);
    }
    let mean = per_scale.values().sum::<f64>() / per_scale.len().max(1) as f64;
    Ok((mean, per_scale))
}

#[derive(serde::Serialize)]
struct LogRecord<'a> {
    #[serde(flatten)]
    breakdown: &'a LossBreakdown,
    elapsed_s: f64,
}

#[derive(serde::Serialize)]
struct ValRecord<'a> {
    iteration: u64,
    val_mean_accuracy: f64,
    val_accuracy_per_scale: &'a BTreeMap<u32, f64>,
    elapsed_s: f64,
}

/// Adversarial training over pooled scales with periodic validation.
/// Writes a JSONL log (one record per step, one per validation) and keeps
/// the checkpoint of the best mean validation accuracy. Returns the final
/// model and the validation history.
pub fn train_fsr(
    fer: &FerModel,
    cfg: GanConfig,
    train: &[FsrSample],
    val: &[FsrSample],
    opts: &FsrTrainOpts,
) -> Result<(FsrModel, Vec<ValPoint>)> {
    if train.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    if !fer.frozen {
        return Err(Error::InvalidArgument(
            "the recognition model must be frozen before super-resolution training".into(),
        ));
    }
    let d = fer.cfg.feature_dim();
    let mut fsr = FsrModel::new(cfg, d, opts.seed)?;
    let fer_before = fer.params.export();

    let mut log = match &opts.log_path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
            }
            Some(std::io::BufWriter::new(
                std::fs::File::create(p).map_err(|e| Error::io(p.as_path(), e))?,
            ))
        }
        None => None,
    };
    let started = Instant::now();
    let write_record = |rec: String, log: &mut Option<std::io::BufWriter<std::fs::File>>| {
        if let Some(w) = log {
            let _ = writeln!(w, "{rec}");
        }
    };

    let mut alpha_rng = ChaCha12Rng::seed_from_u64(derive_seed(opts.seed, "fsr/alpha"));
    let mut history: Vec<ValPoint> = Vec::new();
    let mut best_mean = f64::NEG_INFINITY;
    let mut pass = 0u64;

    'training: loop {
        let mut order: Vec<usize> = (0..train.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng =
                ChaCha12Rng::seed_from_u64(derive_seed(opts.seed, &format!("fsr/pass/{pass}")));
            order.shuffle(&mut rng);
        }
        pass += 1;
        for chunk in order.chunks(fsr.cfg.batch_size) {
            let m = chunk.len();
            let mut f_hr = ArrayD::zeros(IxDyn(&[m, d, d]));
            let mut f_lr = ArrayD::zeros(IxDyn(&[m, d, d]));
            let mut labels = Vec::with_capacity(m);
            for (i, &idx) in chunk.iter().enumerate() {
                f_hr.index_axis_mut(Axis(0), i).assign(&train[idx].f_hr);
                f_lr.index_axis_mut(Axis(0), i).assign(&train[idx].f_lr);
                labels.push(train[idx].label);
            }
            let breakdown = train_step(&mut fsr, fer, &f_hr, &f_lr, &labels, &mut alpha_rng)
                .map_err(|e| match &opts.checkpoint_path {
                    Some(p) if best_mean > f64::NEG_INFINITY => Error::Diverged(format!(
                        "{e}; last good checkpoint: {}",
                        p.display()
                    )),
                    _ => e,
                })?;
            let rec = LogRecord {
                breakdown: &breakdown,
                elapsed_s: started.elapsed().as_secs_f64(),
            };
            write_record(serde_json::to_string(&rec).expect("serializable record"), &mut log);

            let it = fsr.iteration;
            if !val.is_empty() && (it % opts.val_every == 0 || it >= opts.iters) {
                let (mean, per_scale) = validate_fsr(&fsr, fer, val, opts.val_subset_per_scale)?;
                let vrec = ValRecord {
                    iteration: it,
                    val_mean_accuracy: mean,
                    val_accuracy_per_scale: &per_scale,
                    elapsed_s: started.elapsed().as_secs_f64(),
                };
                write_record(serde_json::to_string(&vrec).expect("serializable record"), &mut log);
                history.push(ValPoint {
                    iteration: it,
                    mean_accuracy: mean,
                    per_scale,
                });
                if mean > best_mean {
                    best_mean = mean;
                    if let Some(p) = &opts.checkpoint_path {
                        fsr.save(p)?;
                    }
                }
            }
            if it >= opts.iters {
                break 'training;
            }
        }
    }

    if let Some(w) = &mut log {
        w.flush().map_err(|e| {
            Error::io(opts.log_path.as_deref().unwrap_or(Path::new("log")), e)
        })?;
    }
    // the frozen model must not have moved
    let fer_after = fer.params.export();
    debug_assert!(fer_before
        .iter()
        .all(|(name, t)| fer_after.get(name).map(|u| u == t).unwrap_or(false)));
    Ok((fsr, history))
}
