//! Declarative run configuration: a sectioned TOML file with documented
//! defaults, strict key validation (unknown keys are rejected by dotted
//! path), dotted command-line overrides, and a `smoke`/`paper` profile
//! switch that sizes the models and schedules.
//!
//! Precedence, lowest to highest: profile defaults < config file < dotted
//! overrides (`--fsr.sigma 2.0`) < dedicated subcommand flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{FerConfig, FerTrainConfig};
use crate::gan::{FsrTrainOpts, GanConfig};
use crate::{Error, Result};

/// Model/schedule sizing. `smoke` shrinks dimensions and iteration counts
/// so the full pipeline finishes on a desktop CPU; `paper` uses the
/// published values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Smoke,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Profile::Smoke),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!(
                "unknown profile '{other}' (expected smoke|paper)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DataSection {
    /// Dataset root holding `train/` and `val/` class directories.
    pub root: PathBuf,
    /// Training images generated per class by `prepare-data` (the
    /// validation split gets twice this count).
    pub n_per_class: usize,
    /// Down-sample scale factors, each in 2..=8.
    pub scales: Vec<u32>,
    /// Canonical square input size in pixels.
    pub canonical_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FerSection {
    pub conv_channels: [usize; 4],
    pub bimap_out: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub cov_lambda: f64,
    pub cov_floor: f64,
    pub reeig_eps: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FsrSection {
    pub k: f64,
    pub p: f64,
    pub sigma: f64,
    pub r: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr_halving_iters: Vec<u64>,
    pub batch_size: usize,
    pub critic_steps: usize,
    /// Weights for the (adversarial, perceptual, feature-L2) terms.
    pub term_weights: [f64; 3],
    pub reweight: bool,
    pub flip_adversarial_sign: bool,
    pub rrdb_blocks: usize,
    pub nf: usize,
    pub gc: usize,
    pub iters: u64,
    pub val_every: u64,
    /// Cap on validation samples per scale during training (0 = all).
    pub val_subset_per_scale: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalSection {
    /// Any of hr, bicubic, restored-images, fsr-fer.
    pub methods: Vec<String>,
    /// Root for externally restored images (`x<scale>/<class>/*.png`).
    pub restored_dir: Option<PathBuf>,
    /// Root under which timestamped run directories are created.
    pub out: PathBuf,
}

/// The fully resolved configuration driving every subcommand.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub data: DataSection,
    pub fer: FerSection,
    pub fsr: FsrSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// All defaults for a profile. An empty config file resolves to exactly
    /// this.
    pub fn default_for(profile: Profile) -> Self {
        let fer_arch = match profile {
            Profile::Smoke => FerConfig::smoke(),
            Profile::Paper => FerConfig::paper(),
        };
        let gan = match profile {
            Profile::Smoke => GanConfig::smoke(),
            Profile::Paper => GanConfig::paper(),
        };
        let fer_train = FerTrainConfig::default();
        RunConfig {
            data: DataSection {
                root: PathBuf::from("data"),
                n_per_class: match profile {
                    Profile::Smoke => 50,
                    Profile::Paper => 400,
                },
                scales: (2..=8).collect(),
                canonical_size: fer_arch.input_size,
                seed: 42,
            },
            fer: FerSection {
                conv_channels: fer_arch.conv_channels,
                bimap_out: fer_arch.bimap_out,
                embed_dim: fer_arch.embed_dim,
                num_classes: fer_arch.num_classes,
                cov_lambda: fer_arch.cov_lambda,
                cov_floor: fer_arch.cov_floor,
                reeig_eps: fer_arch.reeig_eps,
                lr: fer_train.lr,
                beta1: fer_train.beta1,
                beta2: fer_train.beta2,
                batch_size: fer_train.batch_size,
                max_epochs: match profile {
                    Profile::Smoke => 30,
                    Profile::Paper => 60,
                },
                patience: fer_train.patience,
                seed: 42,
            },
            fsr: FsrSection {
                k: gan.k,
                p: gan.p,
                sigma: gan.sigma,
                r: gan.r,
                lr: gan.lr,
                beta1: gan.beta1,
                beta2: gan.beta2,
                lr_halving_iters: gan.lr_halving_iters.clone(),
                batch_size: gan.batch_size,
                critic_steps: gan.critic_steps_per_gen_step,
                term_weights: gan.term_weights,
                reweight: gan.reweight_enabled,
                flip_adversarial_sign: gan.flip_adversarial_sign,
                rrdb_blocks: gan.rrdb_blocks,
                nf: gan.nf,
                gc: gan.gc,
                iters: match profile {
                    Profile::Smoke => 2000,
                    Profile::Paper => 200_000,
                },
                val_every: 200,
                val_subset_per_scale: match profile {
                    Profile::Smoke => 150,
                    Profile::Paper => 0,
                },
                seed: 42,
            },
            eval: EvalSection {
                methods: vec!["hr".into(), "bicubic".into(), "fsr-fer".into()],
                restored_dir: None,
                out: PathBuf::from("runs"),
            },
        }
    }

    // -- projections onto module configs ------------------------------------

    pub fn fer_config(&self) -> FerConfig {
        FerConfig {
            input_size: self.data.canonical_size,
            in_channels: 3,
            conv_channels: self.fer.conv_channels,
            cov_lambda: self.fer.cov_lambda,
            cov_floor: self.fer.cov_floor,
            bimap_out: self.fer.bimap_out,
            reeig_eps: self.fer.reeig_eps,
            embed_dim: self.fer.embed_dim,
            num_classes: self.fer.num_classes,
        }
    }

    pub fn fer_train_config(&self) -> FerTrainConfig {
        FerTrainConfig {
            lr: self.fer.lr,
            beta1: self.fer.beta1,
            beta2: self.fer.beta2,
            batch_size: self.fer.batch_size,
            max_epochs: self.fer.max_epochs,
            patience: self.fer.patience,
            seed: self.fer.seed,
        }
    }

    pub fn gan_config(&self) -> GanConfig {
        GanConfig {
            k: self.fsr.k,
            p: self.fsr.p,
            sigma: self.fsr.sigma,
            r: self.fsr.r,
            lr: self.fsr.lr,
            beta1: self.fsr.beta1,
            beta2: self.fsr.beta2,
            lr_halving_iters: self.fsr.lr_halving_iters.clone(),
            batch_size: self.fsr.batch_size,
            critic_steps_per_gen_step: self.fsr.critic_steps,
            term_weights: self.fsr.term_weights,
            reweight_enabled: self.fsr.reweight,
            flip_adversarial_sign: self.fsr.flip_adversarial_sign,
            rrdb_blocks: self.fsr.rrdb_blocks,
            nf: self.fsr.nf,
            gc: self.fsr.gc,
        }
    }

    pub fn fsr_train_opts(&self) -> FsrTrainOpts {
        FsrTrainOpts {
            iters: self.fsr.iters,
            val_every: self.fsr.val_every,
            val_subset_per_scale: self.fsr.val_subset_per_scale,
            seed: self.fsr.seed,
            log_path: None,
            checkpoint_path: None,
        }
    }

    /// Force one master seed into every section.
    pub fn set_master_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.fer.seed = seed;
        self.fsr.seed = seed;
    }

    /// Cross-field invariants beyond per-key types.
    pub fn validate(&self) -> Result<()> {
        if self.data.scales.is_empty() {
            return Err(Error::Config("data.scales must be nonempty".into()));
        }
        for &s in &self.data.scales {
            if !(2..=8).contains(&s) {
                return Err(Error::Config(format!(
                    "data.scales entries must lie in 2..=8, got {s}"
                )));
            }
        }
        if self.data.n_per_class == 0 {
            return Err(Error::Config("data.n_per_class must be >= 1".into()));
        }
        // the extractor halves three times; the final map must keep >= 2
        // spatial positions so covariance pooling sees more than one sample
        let mut side = self.data.canonical_size;
        for (stride, pad) in [(2usize, 1usize), (2, 1), (2, 0), (1, 1)] {
            if side + 2 * pad < 3 {
                side = 0;
                break;
            }
            side = (side + 2 * pad - 3) / stride + 1;
        }
        if side < 2 {
            return Err(Error::Config(format!(
                "data.canonical_size {} is too small for the extractor (needs >= 20)",
                self.data.canonical_size
            )));
        }
        if self.fer.conv_channels.iter().any(|&c| c == 0)
            || self.fer.bimap_out == 0
            || self.fer.embed_dim == 0
        {
            return Err(Error::Config("fer dimensions must be >= 1".into()));
        }
        if self.fer.bimap_out > self.fer.conv_channels[3] {
            return Err(Error::Config(format!(
                "fer.bimap_out ({}) cannot exceed the last conv channel count ({})",
                self.fer.bimap_out, self.fer.conv_channels[3]
            )));
        }
        if self.fer.num_classes < 2 {
            return Err(Error::Config("fer.num_classes must be >= 2".into()));
        }
        if self.fer.batch_size == 0 || self.fer.max_epochs == 0 {
            return Err(Error::Config(
                "fer.batch_size and fer.max_epochs must be >= 1".into(),
            ));
        }
        if !(self.fer.lr > 0.0) {
            return Err(Error::Config(format!(
                "fer.lr must be > 0, got {}",
                self.fer.lr
            )));
        }
        self.gan_config().validate()?;
        if self.fsr.iters == 0 || self.fsr.val_every == 0 {
            return Err(Error::Config(
                "fsr.iters and fsr.val_every must be >= 1".into(),
            ));
        }
        for m in &self.eval.methods {
            crate::eval::EvalMethod::parse(m)?;
        }
        if self.eval.methods.is_empty() {
            return Err(Error::Config("eval.methods must be nonempty".into()));
        }
        Ok(())
    }

    /// The resolved configuration as a TOML document (the echo written into
    /// every artifact directory).
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

// ---------------------------------------------------------------------------
// schema: every legal key with its expected value kind
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Float,
    UInt,
    Bool,
    Str,
    UIntArray,
    FloatArray,
    StrArray,
}

impl Kind {
    fn describe(&self) -> &'static str {
        match self {
            Kind::Float => "a number",
            Kind::UInt => "a non-negative integer",
            Kind::Bool => "a boolean",
            Kind::Str => "a string",
            Kind::UIntArray => "an array of non-negative integers",
            Kind::FloatArray => "an array of numbers",
            Kind::StrArray => "an array of strings",
        }
    }

    fn admits(&self, v: &toml::Value) -> bool {
        use toml::Value as V;
        match self {
            Kind::Float => matches!(v, V::Float(_)) || matches!(v, V::Integer(_)),
            Kind::UInt => matches!(v, V::Integer(n) if *n >= 0),
            Kind::Bool => matches!(v, V::Boolean(_)),
            Kind::Str => matches!(v, V::String(_)),
            Kind::UIntArray => {
                matches!(v, V::Array(a) if a.iter().all(|e| matches!(e, V::Integer(n) if *n >= 0)))
            }
            Kind::FloatArray => {
                matches!(v, V::Array(a) if a.iter().all(|e| matches!(e, V::Float(_) | V::Integer(_))))
            }
            Kind::StrArray => matches!(v, V::Array(a) if a.iter().all(|e| matches!(e, V::String(_)))),
        }
    }
}

const SCHEMA: &[(&str, &[(&str, Kind)])] = &[
    (
        "data",
        &[
            ("root", Kind::Str),
            ("n_per_class", Kind::UInt),
            ("scales", Kind::UIntArray),
            ("canonical_size", Kind::UInt),
            ("seed", Kind::UInt),
        ],
    ),
    (
        "fer",
        &[
            ("conv_channels", Kind::UIntArray),
            ("bimap_out", Kind::UInt),
            ("embed_dim", Kind::UInt),
            ("num_classes", Kind::UInt),
            ("cov_lambda", Kind::Float),
            ("cov_floor", Kind::Float),
            ("reeig_eps", Kind::Float),
            ("lr", Kind::Float),
            ("beta1", Kind::Float),
            ("beta2", Kind::Float),
            ("batch_size", Kind::UInt),
            ("max_epochs", Kind::UInt),
            ("patience", Kind::UInt),
            ("seed", Kind::UInt),
        ],
    ),
    (
        "fsr",
        &[
            ("k", Kind::Float),
            ("p", Kind::Float),
            ("sigma", Kind::Float),
            ("r", Kind::Float),
            ("lr", Kind::Float),
            ("beta1", Kind::Float),
            ("beta2", Kind::Float),
            ("lr_halving_iters", Kind::UIntArray),
            ("batch_size", Kind::UInt),
            ("critic_steps", Kind::UInt),
            ("term_weights", Kind::FloatArray),
            ("reweight", Kind::Bool),
            ("flip_adversarial_sign", Kind::Bool),
            ("rrdb_blocks", Kind::UInt),
            ("nf", Kind::UInt),
            ("gc", Kind::UInt),
            ("iters", Kind::UInt),
            ("val_every", Kind::UInt),
            ("val_subset_per_scale", Kind::UInt),
            ("seed", Kind::UInt),
        ],
    ),
    (
        "eval",
        &[
            ("methods", Kind::StrArray),
            ("restored_dir", Kind::Str),
            ("out", Kind::Str),
        ],
    ),
];

fn section_schema(section: &str) -> Option<&'static [(&'static str, Kind)]> {
    SCHEMA
        .iter()
        .find(|(name, _)| *name == section)
        .map(|(_, keys)| *keys)
}

/// Reject unknown keys/sections and obviously mistyped values, naming the
/// offending dotted path.
fn validate_tree(root: &toml::Value) -> Result<()> {
    let table = root
        .as_table()
        .ok_or_else(|| Error::Config("configuration root must be a table".into()))?;
    for (section, body) in table {
        let keys = section_schema(section).ok_or_else(|| {
            Error::Config(format!(
                "unknown configuration section '{section}' (expected data|fer|fsr|eval)"
            ))
        })?;
        let body = body.as_table().ok_or_else(|| {
            Error::Config(format!("configuration key '{section}' must be a section"))
        })?;
        for (key, value) in body {
            let kind = keys
                .iter()
                .find(|(name, _)| name == key)
                .map(|(_, kind)| *kind)
                .ok_or_else(|| {
                    Error::Config(format!("unknown configuration key '{section}.{key}'"))
                })?;
            if !kind.admits(value) {
                return Err(Error::Config(format!(
                    "configuration key '{section}.{key}' expects {}, got {}",
                    kind.describe(),
                    value.type_str()
                )));
            }
        }
    }
    Ok(())
}

/// Overlay `patch` onto `base`, table-by-table; non-table values replace.
fn deep_merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => deep_merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parse an override value the way TOML would (`2.0` → float, `true` →
/// bool, `[2,3]` → array); anything unparseable is taken as a string.
fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(t) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

/// One `section.key=value` override.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: String,
}

impl Override {
    pub fn parse(spec: &str) -> Result<Override> {
        let (key, value) = spec.split_once('=').ok_or_else(|| {
            Error::Config(format!("override '{spec}' must have the form section.key=value"))
        })?;
        let key = key.trim().trim_start_matches("--").to_string();
        if key.split('.').count() != 2 {
            return Err(Error::Config(format!(
                "override key '{key}' must be a dotted section.key path"
            )));
        }
        Ok(Override {
            key,
            value: value.trim().to_string(),
        })
    }
}

/// Resolve a configuration: profile defaults, then the file (if any), then
/// dotted overrides, validated at each layer.
pub fn load_config(
    profile: Profile,
    file: Option<&Path>,
    overrides: &[Override],
) -> Result<RunConfig> {
    let defaults = RunConfig::default_for(profile);
    let mut tree = toml::Value::try_from(&defaults)
        .map_err(|e| Error::Config(format!("internal default serialization: {e}")))?;

    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: toml::Value = text
            .parse()
            .map_err(|e| Error::Config(format!("cannot parse {}: {e}", path.display())))?;
        validate_tree(&parsed)?;
        deep_merge(&mut tree, parsed);
    }

    for ov in overrides {
        let (section, key) = ov.key.split_once('.').expect("validated dotted path");
        let mut patch = toml::Table::new();
        let mut inner = toml::Table::new();
        inner.insert(key.to_string(), parse_override_value(&ov.value));
        patch.insert(section.to_string(), toml::Value::Table(inner));
        let patch = toml::Value::Table(patch);
        validate_tree(&patch)?;
        deep_merge(&mut tree, patch);
    }

    let cfg: RunConfig = tree
        .try_into()
        .map_err(|e| Error::Config(format!("configuration does not resolve: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Split an argument list into dotted overrides (`--fsr.sigma 2.0` or
/// `--fsr.sigma=2.0`) and everything else, preserving order.
pub fn extract_dotted_overrides(args: &[String]) -> Result<(Vec<Override>, Vec<String>)> {
    let mut overrides = Vec::new();
    let mut rest = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let looks_dotted = a.starts_with("--")
            && a[2..]
                .split('=')
                .next()
                .is_some_and(|k| k.split('.').count() == 2 && !k.contains(['/', '\\']));
        if looks_dotted {
            if a.contains('=') {
                overrides.push(Override::parse(a)?);
            } else {
                let value = args.get(i + 1).ok_or_else(|| {
                    Error::Config(format!("override '{a}' is missing a value"))
                })?;
                overrides.push(Override::parse(&format!("{a}={value}"))?);
                i += 1;
            }
        } else {
            rest.push(a.clone());
        }
        i += 1;
    }
    Ok((overrides, rest))
}

/// Echo map for artifact metadata (dotted key → rendered value).
pub fn config_echo(cfg: &RunConfig) -> BTreeMap<String, String> {
    let tree = toml::Value::try_from(cfg).expect("config serializes");
    let mut out = BTreeMap::new();
    if let Some(table) = tree.as_table() {
        for (section, body) in table {
            if let Some(body) = body.as_table() {
                for (key, value) in body {
                    out.insert(format!("{section}.{key}"), value.to_string());
                }
            }
        }
    }
    out
}
