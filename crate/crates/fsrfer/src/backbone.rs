//! The fixed expression-recognition model: a small convolutional extractor,
//! covariance pooling, the SPD layer stack (BiMap, ReEig, LogEig), and a
//! head consisting of a 128-dimensional embedding plus a 7-way classifier.
//!
//! The model is trained once on high-resolution images and then frozen; the
//! feature-space super-resolution generator is trained against its features
//! and its head.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::autograd::nn::{orthonormal_columns, param_grads, qr_orthonormalize};
use crate::autograd::nn::{Adam, Conv2d, Dense, ParamId, ParamSet};
use crate::autograd::{ops, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{to_tensor, LabeledImage, RgbImage};
use crate::spd::{self, FeatureTensor, Provenance};
use crate::util::derive_seed;
use crate::{Error, Result};

/// Architecture hyperparameters of the recognition model.
#[derive(Debug, Clone, PartialEq)]
pub struct FerConfig {
    /// Canonical square input size in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    /// Output channels of the four conv stages.
    pub conv_channels: [usize; 4],
    /// Trace-normalized covariance regularization weight.
    pub cov_lambda: f64,
    /// Absolute diagonal floor added to every covariance matrix.
    pub cov_floor: f64,
    /// Output dimension d' of the BiMap layer.
    pub bimap_out: usize,
    /// Eigenvalue floor of the ReEig layer.
    pub reeig_eps: f64,
    /// Embedding width of the dense head C(·).
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Default for FerConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl FerConfig {
    /// Full-size configuration.
    pub fn paper() -> Self {
        FerConfig {
            input_size: 100,
            in_channels: 3,
            conv_channels: [16, 32, 64, 64],
            cov_lambda: 1e-3,
            cov_floor: 1e-5,
            bimap_out: 32,
            reeig_eps: 1e-4,
            embed_dim: 128,
            num_classes: 7,
        }
    }

    /// Reduced configuration for fast end-to-end runs.
    pub fn smoke() -> Self {
        FerConfig {
            conv_channels: [8, 16, 24, 24],
            bimap_out: 12,
            ..Self::paper()
        }
    }

    /// Side length d' of the feature matrix the generator operates on.
    pub fn feature_dim(&self) -> usize {
        self.bimap_out
    }

    /// Length of the half-vectorized feature.
    pub fn vec_len(&self) -> usize {
        spd::halfvec_len(self.bimap_out)
    }

    fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        kv.insert("fer.input_size".into(), self.input_size.to_string());
        kv.insert("fer.in_channels".into(), self.in_channels.to_string());
        kv.insert(
            "fer.conv_channels".into(),
            self.conv_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.insert("fer.cov_lambda".into(), self.cov_lambda.to_string());
        kv.insert("fer.cov_floor".into(), self.cov_floor.to_string());
        kv.insert("fer.bimap_out".into(), self.bimap_out.to_string());
        kv.insert("fer.reeig_eps".into(), self.reeig_eps.to_string());
        kv.insert("fer.embed_dim".into(), self.embed_dim.to_string());
        kv.insert("fer.num_classes".into(), self.num_classes.to_string());
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
        let chan_str = get(kv, "fer.conv_channels")?;
        let parts: Vec<usize> = chan_str
            .split(',')
            .map(|p| {
                p.parse().map_err(|_| {
                    Error::Checkpoint(format!("unparseable conv channel list {chan_str}"))
                })
            })
            .collect::<Result<_>>()?;
        if parts.len() != 4 {
            return Err(Error::Checkpoint(format!(
                "expected 4 conv channel entries, got {}",
                parts.len()
            )));
        }
        Ok(FerConfig {
            input_size: num(kv, "fer.input_size")?,
            in_channels: num(kv, "fer.in_channels")?,
            conv_channels: [parts[0], parts[1], parts[2], parts[3]],
            cov_lambda: num(kv, "fer.cov_lambda")?,
            cov_floor: num(kv, "fer.cov_floor")?,
            bimap_out: num(kv, "fer.bimap_out")?,
            reeig_eps: num(kv, "fer.reeig_eps")?,
            embed_dim: num(kv, "fer.embed_dim")?,
            num_classes: num(kv, "fer.num_classes")?,
        })
    }
}

const LEAKY_SLOPE: f64 = 0.2;

/// The recognition model. After [`train_fer`] it is frozen: every public
/// method takes `&self` and the super-resolution stage never mutates it.
pub struct FerModel {
    pub cfg: FerConfig,
    pub params: ParamSet,
    convs: Vec<Conv2d>,
    bimap_w: ParamId,
    head: Dense,
    classifier: Dense,
    pub frozen: bool,
}

impl FerModel {
    /// Build a freshly initialized model. Deterministic in `seed`.
    pub fn new(cfg: FerConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "fer/init"));
        let mut params = ParamSet::new();
        // Conv geometry: three stride-2 stages then one stride-1 stage.
        // For 100x100 input: 100 -> 50 -> 25 -> 12 -> 12.
        let specs = [(2usize, 1usize), (2, 1), (2, 0), (1, 1)];
        let mut convs = Vec::new();
        let mut in_ch = cfg.in_channels;
        for (i, ((stride, pad), out_ch)) in specs.iter().zip(cfg.conv_channels).enumerate() {
            convs.push(Conv2d::new(
                &mut params,
                &mut rng,
                &format!("conv{}", i + 1),
                in_ch,
                out_ch,
                3,
                *stride,
                *pad,
                1.0,
            ));
            in_ch = out_ch;
        }
        let c_last = cfg.conv_channels[3];
        let bimap_w = params.register(
            "bimap.weight",
            orthonormal_columns(&mut rng, c_last, cfg.bimap_out),
        );
        let head = Dense::new(&mut params, &mut rng, "head", cfg.vec_len(), cfg.embed_dim);
        let classifier = Dense::new(
            &mut params,
            &mut rng,
            "classifier",
            cfg.embed_dim,
            cfg.num_classes,
        );
        FerModel {
            cfg,
            params,
            convs,
            bimap_w,
            head,
            classifier,
            frozen: false,
        }
    }

    /// Spatial side length of the extractor output for the configured input.
    pub fn map_side(&self) -> usize {
        let mut s = self.cfg.input_size;
        // mirror the conv geometry above
        for (stride, pad) in [(2usize, 1usize), (2, 1), (2, 0), (1, 1)] {
            s = (s + 2 * pad - 3) / stride + 1;
        }
        s
    }

    /// The convolutional extractor: `[B, C_in, S, S]` to `[B, C_last, h, h]`.
    pub fn conv_extract(&self, x: &Var) -> Result<Var> {
        let s = x.shape().to_vec();
        let want = [
            s.first().copied().unwrap_or(0),
            self.cfg.in_channels,
            self.cfg.input_size,
            self.cfg.input_size,
        ];
        if s.len() != 4 || s[1..] != want[1..] {
            return Err(Error::shape("conv_extract input", &want, &s));
        }
        let mut y = x.clone();
        for conv in &self.convs {
            y = ops::leaky_relu(&conv.forward(&self.params, &y), LEAKY_SLOPE);
        }
        Ok(y)
    }

    /// Full feature path: images `[B, C, S, S]` to log-domain symmetric
    /// feature matrices `[B, d', d']`.
    pub fn features_from_images(&self, x: &Var) -> Result<Var> {
        let fm = self.conv_extract(x)?;
        let cov = spd::covariance_pool(&fm, self.cfg.cov_lambda, self.cfg.cov_floor)?;
        let mapped = spd::bimap(&cov, &self.params.get(self.bimap_w));
        let rect = spd::reeig(&mapped, self.cfg.reeig_eps);
        Ok(spd::logeig(&rect))
    }

    /// The head C(·): feature matrices `[B, d', d']` to embeddings `[B, 128]`.
    /// Differentiable; the super-resolution perceptual loss backpropagates
    /// through it into the generator (never into the head's own weights,
    /// which stay frozen).
    pub fn embed_from_mats(&self, mats: &Var) -> Var {
        let v = spd::halfvec(mats);
        ops::leaky_relu(&self.head.forward(&self.params, &v), LEAKY_SLOPE)
    }

    /// Class logits from feature matrices `[B, d', d']`.
    pub fn logits_from_mats(&self, mats: &Var) -> Var {
        self.classifier
            .forward(&self.params, &self.embed_from_mats(mats))
    }

    /// Class logits straight from images.
    pub fn logits_from_images(&self, x: &Var) -> Result<Var> {
        Ok(self.logits_from_mats(&self.features_from_images(x)?))
    }

    // -- inference conveniences (no gradient graph retained) ----------------

    /// Extract features for a batch of canonical-size images.
    pub fn extract_features(
        &self,
        images: &[&RgbImage],
        provenance: Provenance,
    ) -> Result<Vec<FeatureTensor>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = Var::constant(to_tensor(images));
        let mats = self.features_from_images(&x)?;
        let data = mats.data();
        Ok((0..images.len())
            .map(|i| {
                let m = data.index_axis(Axis(0), i).to_owned();
                FeatureTensor::new(m, provenance)
            })
            .collect())
    }

    pub fn extract_feature(
        &self,
        image: &RgbImage,
        provenance: Provenance,
    ) -> Result<FeatureTensor> {
        Ok(self.extract_features(&[image], provenance)?.remove(0))
    }

    /// Embed a single feature through C(·).
    pub fn head_embed(&self, f: &FeatureTensor) -> Vec<f64> {
        let mats = Var::constant(f.mat.clone().insert_axis(Axis(0)));
        let e = self.embed_from_mats(&mats);
        e.data().iter().copied().collect()
    }

    /// Logits and softmax probabilities for one feature.
    pub fn classify_feature(&self, f: &FeatureTensor) -> (Vec<f64>, Vec<f64>) {
        let mats = Var::constant(f.mat.clone().insert_axis(Axis(0)));
        let logits = self.logits_from_mats(&mats);
        let probs = ops::softmax_rows(&logits);
        (
            logits.data().iter().copied().collect(),
            probs.data().iter().copied().collect(),
        )
    }

    /// Predicted class ids for a batch of features.
    pub fn predict_features(&self, feats: &[FeatureTensor]) -> Vec<usize> {
        if feats.is_empty() {
            return Vec::new();
        }
        let d = feats[0].dim();
        let mut stacked = ArrayD::zeros(IxDyn(&[feats.len(), d, d]));
        for (i, f) in feats.iter().enumerate() {
            stacked.index_axis_mut(Axis(0), i).assign(&f.mat);
        }
        let logits = self.logits_from_mats(&Var::constant(stacked));
        argmax_rows(&logits.data())
    }

    /// Predicted class ids for a batch of canonical-size images.
    pub fn predict_images(&self, images: &[&RgbImage]) -> Result<Vec<usize>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let logits = self.logits_from_images(&Var::constant(to_tensor(images)))?;
        Ok(argmax_rows(&logits.data()))
    }

    /// Worst BiMap orthonormality defect `‖WᵀW − I‖_F`.
    pub fn bimap_orthonormality_defect(&self) -> f64 {
        let w = self.params.get(self.bimap_w);
        let wd = w.data();
        let (rows, cols) = (wd.shape()[0], wd.shape()[1]);
        let mut defect_sq = 0.0;
        for i in 0..cols {
            for j in 0..cols {
                let mut dot = 0.0;
                for r in 0..rows {
                    dot += wd[[r, i]] * wd[[r, j]];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                defect_sq += (dot - target) * (dot - target);
            }
        }
        defect_sq.sqrt()
    }

    fn retract_bimap(&mut self) {
        let w = self.params.get(self.bimap_w).data().clone();
        self.params.set(self.bimap_w, qr_orthonormalize(&w));
    }

    // -- persistence ---------------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut config = self.cfg.to_kv();
        config.insert("fer.frozen".into(), self.frozen.to_string());
        Checkpoint {
            kind: "fer".into(),
            config,
            tensors: self.params.export(),
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<FerModel> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("fer")?;
        let cfg = FerConfig::from_kv(&ck.config)?;
        let frozen = ck
            .config
            .get("fer.frozen")
            .map(|v| v == "true")
            .unwrap_or(false);
        let mut model = FerModel::new(cfg, 0);
        model.params.import(&ck.tensors)?;
        model.frozen = frozen;
        Ok(model)
    }
}

fn argmax_rows(a: &ArrayD<f64>) -> Vec<usize> {
    a.axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

/// Fraction of positions where `preds[i] == labels[i]`.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(preds.len(), labels.len());
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / preds.len() as f64
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

/// Optimization hyperparameters for the recognition model.
#[derive(Debug, Clone)]
pub struct FerTrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation accuracy.
    pub patience: usize,
    pub seed: u64,
}

impl Default for FerTrainConfig {
    fn default() -> Self {
        FerTrainConfig {
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.999,
            batch_size: 32,
            max_epochs: 60,
            patience: 8,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FerEpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Validation accuracy of a model over labeled images, evaluated in batches.
pub fn evaluate_accuracy(model: &FerModel, images: &[LabeledImage]) -> Result<f64> {
    let mut preds = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let refs: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
        preds.extend(model.predict_images(&refs)?);
    }
    let labels: Vec<usize> = images.iter().map(|s| s.label).collect();
    Ok(accuracy(&preds, &labels))
}

/// Train the recognition model on high-resolution images with cross-entropy,
/// re-orthonormalizing the BiMap weight after every optimizer step, stopping
/// early when validation accuracy plateaus. Returns the frozen model (at its
/// best validation epoch) and the per-epoch history.
pub fn train_fer(
    cfg: FerConfig,
    train: &[LabeledImage],
    val: &[LabeledImage],
    tcfg: &FerTrainConfig,
) -> Result<(FerModel, Vec<FerEpochStats>)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let mut model = FerModel::new(cfg, tcfg.seed);
    let mut adam = Adam::new(&model.params, tcfg.beta1, tcfg.beta2, 1e-8);
    let mut history = Vec::new();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_params = model.params.export();
    let mut epochs_since_best = 0usize;

    for epoch in 0..tcfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng =
            ChaCha12Rng::seed_from_u64(derive_seed(tcfg.seed, &format!("fer/epoch/{epoch}")));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let images: Vec<&RgbImage> = chunk.iter().map(|&i| &train[i].image).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let x = Var::constant(to_tensor(&images));
            let logits = model.logits_from_images(&x)?;
            let loss = ops::cross_entropy_rows(&logits, &labels);
            let loss_val = loss.value();
            if !loss_val.is_finite() {
                return Err(Error::Diverged(format!(
                    "cross-entropy became {loss_val} at epoch {epoch}"
                )));
            }
            loss_sum += loss_val;
            batches += 1;
            let grads = param_grads(&loss, &model.params);
            adam.step(&mut model.params, &grads, tcfg.lr);
            model.retract_bimap();
        }

        let val_acc = evaluate_accuracy(&model, val)?;
        history.push(FerEpochStats {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_accuracy: val_acc,
        });
        if val_acc > best_acc + 1e-12 {
            best_acc = val_acc;
            best_params = model.params.export();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= tcfg.patience {
                break;
            }
        }
    }

    model.params.import(&best_params)?;
    model.frozen = true;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{degrade, synthetic};

    fn test_image(seed: u64) -> RgbImage {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        synthetic::render_sample(4, &mut rng)
    }

    #[test]
    fn extractor_shape_contract() {
        let model = FerModel::new(FerConfig::smoke(), 7);
        assert_eq!(model.map_side(), 12);
        let img = test_image(1);
        let x = Var::constant(to_tensor(&[&img]));
        let fm = model.conv_extract(&x).unwrap();
        assert_eq!(fm.shape(), &[1, 24, 12, 12]);
        // full-size configuration reaches the published 64-channel map
        let paper = FerModel::new(FerConfig::paper(), 7);
        let fm = paper.conv_extract(&x).unwrap();
        assert_eq!(fm.shape(), &[1, 64, 12, 12]);
    }

    #[test]
    fn extractor_rejects_noncanonical_input() {
        let model = FerModel::new(FerConfig::smoke(), 7);
        let x = Var::constant(ArrayD::zeros(IxDyn(&[1, 3, 50, 50])));
        assert!(model.conv_extract(&x).is_err());
    }

    #[test]
    fn zero_image_gives_finite_features() {
        let model = FerModel::new(FerConfig::smoke(), 7);
        let x = Var::constant(ArrayD::zeros(IxDyn(&[1, 3, 100, 100])));
        let mats = model.features_from_images(&x).unwrap();
        assert!(mats.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn feature_extraction_is_deterministic() {
        let model = FerModel::new(FerConfig::smoke(), 7);
        let img = test_image(3);
        let a = model.extract_feature(&img, Provenance::Hr).unwrap();
        let b = model.extract_feature(&img, Provenance::Hr).unwrap();
        assert_eq!(a.mat, b.mat);
    }

    #[test]
    fn feature_dimensions_match_config() {
        let smoke = FerModel::new(FerConfig::smoke(), 7);
        let img = test_image(5);
        let f = smoke.extract_feature(&img, Provenance::Hr).unwrap();
        assert_eq!(f.dim(), 12);
        assert_eq!(f.vec().len(), 78);
        assert!(f.asymmetry() <= 1e-6);

        let paper = FerModel::new(FerConfig::paper(), 7);
        let f = paper.extract_feature(&img, Provenance::Hr).unwrap();
        assert_eq!(f.dim(), 32);
        assert_eq!(f.vec().len(), 528);
    }

    #[test]
    fn degraded_sibling_has_distinct_feature() {
        let model = FerModel::new(FerConfig::smoke(), 7);
        let img = test_image(11);
        let lr = degrade(&img, 2);
        let fh = model.extract_feature(&img, Provenance::Hr).unwrap();
        let fl = model.extract_feature(&lr, Provenance::Lr).unwrap();
        let dist: f64 = (&fh.mat - &fl.mat).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(dist > 0.0, "resampling must perturb the feature");
    }

    #[test]
    fn head_embedding_has_configured_width() {
        let model = FerModel::new(FerConfig::smoke(), 7);
        let img = test_image(13);
        let f = model.extract_feature(&img, Provenance::Hr).unwrap();
        assert_eq!(model.head_embed(&f).len(), 128);
    }

    #[test]
    fn zero_feature_embeds_to_bias_constant() {
        let model = FerModel::new(FerConfig::smoke(), 7);
        let z = FeatureTensor::new(ArrayD::zeros(IxDyn(&[12, 12])), Provenance::Hr);
        let e1 = model.head_embed(&z);
        let e2 = model.head_embed(&z);
        assert_eq!(e1, e2);
        // bias starts at zero, so a zero input must embed to exactly zero
        assert!(e1.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn classify_produces_normalized_probabilities() {
        let model = FerModel::new(FerConfig::smoke(), 7);
        let img = test_image(17);
        let f = model.extract_feature(&img, Provenance::Hr).unwrap();
        let (logits, probs) = model.classify_feature(&f);
        assert_eq!(logits.len(), 7);
        assert_eq!(probs.len(), 7);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(probs.iter().all(|p| *p > 0.0 && *p < 1.0));
        let am_l = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let am_p = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(am_l, am_p);
    }

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let mut model = FerModel::new(FerConfig::smoke(), 7);
        // zero the classifier so every class gets the same logit
        let wid = model.classifier.weight;
        let shape = model.params.get(wid).shape().to_vec();
        model.params.set(wid, ArrayD::zeros(IxDyn(&shape)));
        let img = test_image(19);
        let f = model.extract_feature(&img, Provenance::Hr).unwrap();
        let (_, probs) = model.classify_feature(&f);
        for p in probs {
            assert!((p - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fresh_model_satisfies_stiefel_constraint() {
        let model = FerModel::new(FerConfig::smoke(), 123);
        assert!(model.bimap_orthonormality_defect() < 1e-10);
    }

    #[test]
    fn training_runs_records_history_and_freezes() {
        let dir = tempfile::tempdir().unwrap();
        synthetic::generate_dataset(dir.path(), 3, 9).unwrap();
        let train = crate::data::load_dataset(dir.path(), "train", 100).unwrap();
        let val = crate::data::load_dataset(dir.path(), "val", 100).unwrap();
        let tcfg = FerTrainConfig {
            batch_size: 8,
            max_epochs: 2,
            patience: 2,
            ..Default::default()
        };
        let (model, history) = train_fer(FerConfig::smoke(), &train.items, &val.items, &tcfg).unwrap();
        assert!(model.frozen);
        assert_eq!(history.len(), 2);
        assert!(history.iter().all(|h| h.train_loss.is_finite()));
        assert!(history.iter().all(|h| (0.0..=1.0).contains(&h.val_accuracy)));
        assert!(model.bimap_orthonormality_defect() < 1e-3);
        // frozen model evaluates identically twice
        let a1 = evaluate_accuracy(&model, &val.items).unwrap();
        let a2 = evaluate_accuracy(&model, &val.items).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let model = {
            let mut m = FerModel::new(FerConfig::smoke(), 31);
            m.frozen = true;
            m
        };
        let img = test_image(23);
        let f = model.extract_feature(&img, Provenance::Hr).unwrap();
        let (logits, _) = model.classify_feature(&f);
        let path = dir.path().join("fer.ckpt");
        model.save(&path).unwrap();
        let back = FerModel::load(&path).unwrap();
        assert!(back.frozen);
        assert_eq!(back.cfg, model.cfg);
        let f2 = back.extract_feature(&img, Provenance::Hr).unwrap();
        let (logits2, _) = back.classify_feature(&f2);
        assert_eq!(f.mat, f2.mat);
        assert_eq!(logits, logits2);
    }
}
