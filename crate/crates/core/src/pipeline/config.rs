//! Experiment configuration: presets, TOML overrides and validation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featex::{AlignOptions, ClassifierOptions, CnnConfig};
use crate::nets::ModelConfig;
use crate::probe::ProbeOptions;
use crate::simulator::{CharsetPolicy, TypingStyle};
use crate::train::{AblationVariant, LossWeights, TrainOptions};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Smoke,
    Desk,
    Paper,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Smoke => "smoke",
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Preset::Smoke),
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::InvalidArgument(format!("unknown preset {s:?}; expected smoke, desk or paper"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// One headline per line; the built-in word list is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Word list for the corrected metrics; training sentences when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    /// Experiment directory holding every stage's outputs.
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub max_chars: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub charset_policy: CharsetPolicy,
    pub synthetic_train: usize,
    pub synthetic_val: usize,
    pub synthetic_test: usize,
    /// Size of the pseudo-real training pool; smaller counts use a prefix.
    pub real_train: usize,
    pub real_test: usize,
    /// Share of each target training subset held out for checkpoint selection.
    pub val_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StylesConfig {
    pub synthetic: TypingStyle,
    pub pseudo_real: TypingStyle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesConfig {
    pub cnn: CnnConfig,
    /// Keypress images per domain in the mixed training pool.
    pub keypress_train: usize,
    /// Held-out keypress images per domain.
    pub keypress_test: usize,
    pub classifier: ClassifierOptions,
    /// Whether pseudo-real videos go through an adversarially aligned copy.
    pub align: bool,
    pub alignment: AlignOptions,
    /// Unlabelled pseudo-real frames used by the alignment.
    pub align_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentsConfig {
    pub variants: Vec<AblationVariant>,
    pub finetune: bool,
    pub seeds: Vec<u64>,
    /// Target training subset sizes (each a prefix of the pool).
    pub target_train_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Test samples per domain fed to the embedding probes.
    pub samples_per_domain: usize,
    pub options: ProbeOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub preset: Preset,
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub styles: StylesConfig,
    pub features: FeaturesConfig,
    pub model: ModelConfig,
    pub pretrain: TrainOptions,
    pub train: TrainOptions,
    pub finetune: TrainOptions,
    pub weights: LossWeights,
    pub experiments: ExperimentsConfig,
    pub probe: ProbeConfig,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Smoke => Self::smoke(),
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn desk() -> Self {
        let train = TrainOptions { iterations: 3000, batch_size: 8, lr: 1e-4, eval_every: 250, seed: 0 };
        Self {
            version: CONFIG_VERSION,
            preset: Preset::Desk,
            seed: 0,
            paths: PathsConfig { corpus: None, lexicon: None, out_dir: PathBuf::from("runs/desk") },
            data: DataConfig {
                max_chars: 20,
                frame_height: 25,
                frame_width: 50,
                charset_policy: CharsetPolicy::Drop,
                synthetic_train: 5000,
                synthetic_val: 100,
                synthetic_test: 200,
                real_train: 150,
                real_test: 50,
                val_fraction: 0.1,
            },
            styles: StylesConfig { synthetic: TypingStyle::synthetic(), pseudo_real: TypingStyle::pseudo_real() },
            features: FeaturesConfig {
                cnn: CnnConfig::desk(),
                keypress_train: 2700,
                keypress_test: 540,
                classifier: ClassifierOptions { epochs: 3, batch_size: 32, lr: 1e-4, seed: 0 },
                align: false,
                alignment: AlignOptions::default(),
                align_frames: 4000,
            },
            model: ModelConfig::desk(),
            pretrain: TrainOptions { iterations: 6000, batch_size: 16, lr: 3e-4, eval_every: 500, seed: 0 },
            finetune: train.clone(),
            train,
            weights: LossWeights::default(),
            experiments: ExperimentsConfig {
                variants: vec![AblationVariant::VIFull, AblationVariant::IBase],
                finetune: true,
                seeds: vec![0, 1, 2],
                target_train_counts: vec![150, 75],
            },
            probe: ProbeConfig { samples_per_domain: 50, options: ProbeOptions::default() },
        }
    }

    /// Tiny sizes that exercise every stage in a few minutes.
    pub fn smoke() -> Self {
        let d = Self::desk();
        let train = TrainOptions { iterations: 6, batch_size: 4, lr: 1e-4, eval_every: 3, seed: 0 };
        Self {
            preset: Preset::Smoke,
            paths: PathsConfig { out_dir: PathBuf::from("runs/smoke"), ..d.paths },
            data: DataConfig {
                max_chars: 12,
                synthetic_train: 40,
                synthetic_val: 6,
                synthetic_test: 24,
                real_train: 20,
                real_test: 24,
                val_fraction: 0.2,
                ..d.data
            },
            features: FeaturesConfig {
                keypress_train: 54,
                keypress_test: 27,
                classifier: ClassifierOptions { epochs: 1, ..d.features.classifier },
                alignment: AlignOptions { steps: 4, batch_size: 8, ..d.features.alignment },
                align_frames: 64,
                ..d.features
            },
            model: ModelConfig {
                num_layers: 1,
                num_heads: 2,
                embed_dim: 16,
                hidden_dim: 32,
                max_seq_len: 60,
                ..ModelConfig::desk()
            },
            pretrain: TrainOptions { iterations: 10, eval_every: 5, ..train.clone() },
            finetune: train.clone(),
            train,
            experiments: ExperimentsConfig { seeds: vec![0], target_train_counts: vec![20, 10], ..d.experiments },
            probe: ProbeConfig { samples_per_domain: 20, options: ProbeOptions { iterations: 50, ..d.probe.options } },
            ..d
        }
    }

    /// Full-scale hyperparameters; far beyond a single-core budget.
    pub fn paper() -> Self {
        let d = Self::desk();
        let train = TrainOptions { iterations: 60_000, batch_size: 8, lr: 1e-4, eval_every: 1000, seed: 0 };
        Self {
            preset: Preset::Paper,
            paths: PathsConfig { out_dir: PathBuf::from("runs/paper"), ..d.paths },
            data: DataConfig {
                max_chars: 68,
                frame_height: 100,
                frame_width: 200,
                synthetic_train: 60_000,
                synthetic_val: 400,
                synthetic_test: 1000,
                real_train: 175,
                real_test: 54,
                ..d.data
            },
            features: FeaturesConfig {
                cnn: CnnConfig::paper(),
                keypress_train: 35_000,
                keypress_test: 2700,
                classifier: ClassifierOptions { epochs: 10, ..d.features.classifier },
                align: true,
                ..d.features
            },
            model: ModelConfig::paper(),
            pretrain: train.clone(),
            finetune: train.clone(),
            train,
            experiments: ExperimentsConfig {
                variants: AblationVariant::ALL.to_vec(),
                target_train_counts: vec![175, 100],
                ..d.experiments
            },
            ..d
        }
    }

    /// Checks cross-field consistency and that referenced inputs exist.
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| Err(Error::Config { path: path.into(), message });
        if self.version != CONFIG_VERSION {
            return bad("version", format!("unsupported version {}, expected {CONFIG_VERSION}", self.version));
        }
        for (key, p) in [("paths.corpus", &self.paths.corpus), ("paths.lexicon", &self.paths.lexicon)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return bad(key, format!("{} does not exist", p.display()));
                }
            }
        }
        if self.paths.out_dir.as_os_str().is_empty() {
            return bad("paths.out_dir", "must not be empty".into());
        }
        let d = &self.data;
        if d.max_chars == 0 || d.max_chars + 2 > self.model.max_phrase_len {
            return bad("data.max_chars", format!("{} does not fit max_phrase_len {}", d.max_chars, self.model.max_phrase_len));
        }
        if (d.frame_height, d.frame_width) != (self.features.cnn.height, self.features.cnn.width) {
            return bad(
                "features.cnn",
                format!("input {}x{} differs from frames {}x{}", self.features.cnn.height, self.features.cnn.width, d.frame_height, d.frame_width),
            );
        }
        if self.features.cnn.feature_dim != self.model.feature_dim {
            return bad("model.feature_dim", format!("{} differs from the extractor's {}", self.model.feature_dim, self.features.cnn.feature_dim));
        }
        for (key, n) in [
            ("data.synthetic_train", d.synthetic_train),
            ("data.synthetic_val", d.synthetic_val),
            ("data.synthetic_test", d.synthetic_test),
            ("data.real_train", d.real_train),
            ("data.real_test", d.real_test),
        ] {
            if n == 0 {
                return bad(key, "must be positive".into());
            }
        }
        if !(d.val_fraction > 0.0 && d.val_fraction < 0.5) {
            return bad("data.val_fraction", format!("{} outside (0, 0.5)", d.val_fraction));
        }
        let e = &self.experiments;
        if e.seeds.is_empty() {
            return bad("experiments.seeds", "at least one seed is required".into());
        }
        if e.target_train_counts.is_empty() {
            return bad("experiments.target_train_counts", "at least one count is required".into());
        }
        for &n in &e.target_train_counts {
            if n > d.real_train || split_validation(n, d.val_fraction).1.is_empty() {
                return bad(
                    "experiments.target_train_counts",
                    format!("{n} must leave training and validation samples within the pool of {}", d.real_train),
                );
            }
        }
        self.model.validate().map_err(|e| Error::Config { path: "model".into(), message: e.to_string() })?;
        self.weights.validate().map_err(|e| Error::Config { path: "weights".into(), message: e.to_string() })?;
        self.styles.synthetic.validate().map_err(|e| Error::Config { path: "styles.synthetic".into(), message: e.to_string() })?;
        self.styles
            .pseudo_real
            .validate()
            .map_err(|e| Error::Config { path: "styles.pseudo_real".into(), message: e.to_string() })?;
        for (key, t) in [("pretrain", &self.pretrain), ("train", &self.train), ("finetune", &self.finetune)] {
            if t.batch_size == 0 || !(t.lr > 0.0) {
                return bad(key, "batch_size and lr must be positive".into());
            }
        }
        if self.probe.samples_per_domain < 20 {
            return bad("probe.samples_per_domain", "the probes need at least 20 samples per domain".into());
        }
        if self.probe.samples_per_domain > d.synthetic_test.min(d.real_test) {
            return bad("probe.samples_per_domain", "exceeds the available test samples".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Indices of a training subset of size `n` that are held out for
/// validation, evenly spaced through the subset.
pub fn split_validation(n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let held = ((n as f64 * fraction).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
    if held == 0 {
        return ((0..n).collect(), Vec::new());
    }
    let stride = n / held;
    let val: Vec<usize> = (0..held).map(|i| i * stride + stride - 1).collect();
    let train = (0..n).filter(|i| !val.contains(i)).collect();
    (train, val)
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Resolves a configuration: the preset named on the command line (else in
/// the file, else `desk`) supplies defaults, the file overrides any subset of
/// fields, and `seed` replaces the top-level seed.
pub fn load_config(file: Option<&Path>, preset: Option<Preset>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let overrides = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::at(p, e))?;
            let v: toml::Value = toml::from_str(&text)
                .map_err(|e| Error::Config { path: p.display().to_string(), message: e.to_string() })?;
            Some(v)
        }
        None => None,
    };
    let file_preset = match overrides.as_ref().and_then(|v| v.get("preset")) {
        Some(toml::Value::String(s)) => {
            Some(s.parse::<Preset>().map_err(|e| Error::Config { path: "preset".into(), message: e.to_string() })?)
        }
        Some(other) => return Err(Error::Config { path: "preset".into(), message: format!("expected a string, got {other}") }),
        None => None,
    };
    let chosen = preset.or(file_preset).unwrap_or(Preset::Desk);
    let mut value =
        toml::Value::try_from(ExperimentConfig::preset(chosen)).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(mut o) = overrides {
        if let Some(t) = o.as_table_mut() {
            t.remove("preset");
        }
        merge(&mut value, o);
    }
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| Error::Config {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    cfg.preset = chosen;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loss weights from a TOML file holding any subset of `lambda1`..`lambda6`,
/// either at the top level or under `[weights]`; missing entries keep `base`.
pub fn load_weights(path: &Path, base: &LossWeights) -> Result<LossWeights> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::at(path, e))?;
    let cfg_err = |path: String, message: String| Error::Config { path, message };
    let mut over: toml::Value = toml::from_str(&text).map_err(|e| cfg_err(path.display().to_string(), e.to_string()))?;
    if let Some(w) = over.get_mut("weights") {
        over = w.clone();
    }
    let mut value = toml::Value::try_from(base).map_err(|e| Error::Format(e.to_string()))?;
    merge(&mut value, over);
    let w: LossWeights = serde_path_to_error::deserialize(value)
        .map_err(|e| cfg_err(format!("weights.{}", e.path()), e.inner().to_string()))?;
    w.validate().map_err(|e| cfg_err("weights".into(), e.to_string()))?;
    Ok(w)
}
