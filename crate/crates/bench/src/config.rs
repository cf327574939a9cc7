//! Experiment configuration: a TOML file, optionally layered over a shipped
//! preset, resolved into an [`ExperimentConfig`] and checked before any
//! compute starts.
//!
//! ```toml
//! preset = "cifar10-small"
//! scheme = "dp"
//! seeds = [0, 1, 2]
//!
//! [dp]
//! epsilon = 0.05
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::de::{DeTable, DeValue};
use tosc_core::data::synth::SynthKind;
use tosc_core::metrics::MiConfig;
use tosc_core::privacy::{DpConfig, IbalConfig, LbvqConfig, MechanismConfig, ShuffleKey};
use tosc_core::system::{Tap, TrainConfig};

use crate::error::{BenchError, Result};

/// Environment variable holding the shuffle key when the config has none.
pub const KEY_ENV: &str = "TOSC_SHUFFLE_KEY";
/// Environment variable overriding the dataset root.
pub const DATA_ROOT_ENV: &str = "TOSC_DATA_ROOT";

pub const DEFAULT_SNR_TEST_DB: [f64; 5] = [4.0, 8.0, 12.0, 16.0, 20.0];

const PRESETS: [(&str, &str); 2] = [
    ("cifar10-small", include_str!("../presets/cifar10-small.toml")),
    ("celeba-attr-small", include_str!("../presets/celeba-attr-small.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn preset_source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Baseline,
    Dp,
    Encryption,
    Ibal,
    Lbvq,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Baseline => "baseline",
            Scheme::Dp => "dp",
            Scheme::Encryption => "encryption",
            Scheme::Ibal => "ibal",
            Scheme::Lbvq => "lbvq",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Corpus directory name under the data root.
    pub name: String,
    /// Attribute used as the binary label on attribute corpora.
    pub attribute: Option<String>,
    /// Procedural stand-in generated when the corpus is not on disk.
    pub synthetic: Option<SynthKind>,
    pub synthetic_seed: u64,
    pub train_images: Option<usize>,
    pub test_images: Option<usize>,
    /// Seed of the train/test subsets drawn from a real corpus.
    pub subset_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Oracle queries used to train the inversion network.
    pub pairs: usize,
    pub epochs: usize,
    /// Held-out victim transmissions attacked after training.
    pub test_pairs: usize,
    pub mse_weight: f64,
    pub perceptual_weight: f64,
    pub perceptual_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub validation_fraction: f64,
    pub tap: Tap,
    /// SNRs attacked; `None` attacks every test SNR.
    pub snr_db: Option<Vec<f64>>,
    /// Seed of the key the attacker guesses against encrypted victims.
    pub guess_seed: u64,
    /// Columns of the reconstruction grid.
    pub grid_images: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            pairs: 10_000,
            epochs: 50,
            test_pairs: 2000,
            mse_weight: 1.0,
            perceptual_weight: 1.0,
            perceptual_epochs: 2,
            batch_size: 128,
            lr: 1e-3,
            validation_fraction: 0.1,
            tap: Tap::PostChannel,
            snr_db: None,
            guess_seed: 0x6b65_79,
            grid_images: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub scheme: Scheme,
    /// Directory name of the run under the output root.
    pub label: String,
    pub dataset: DatasetConfig,
    /// Dataset root; falls back to `TOSC_DATA_ROOT`, then `<output>/data`.
    pub data_root: Option<PathBuf>,
    pub snr_train_db: f64,
    pub snr_test_db: Vec<f64>,
    pub d: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub dp: DpConfig,
    /// Shuffle key as 32 hex digits.
    pub key: Option<String>,
    pub ibal: IbalConfig,
    pub lbvq: LbvqConfig,
    pub attack: AttackConfig,
    pub mi: MiConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    scheme: Option<Scheme>,
    label: Option<String>,
    data_root: Option<PathBuf>,
    snr_train_db: Option<f64>,
    snr_test_db: Option<Vec<f64>>,
    d: Option<usize>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    lr: Option<f64>,
    grad_clip: Option<f64>,
    seeds: Option<Vec<u64>>,
    output: Option<PathBuf>,
    dataset: Option<RawDataset>,
    dp: Option<RawDp>,
    encryption: Option<RawEncryption>,
    ibal: Option<RawIbal>,
    lbvq: Option<RawLbvq>,
    attack: Option<RawAttack>,
    mi: Option<RawMi>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    name: Option<String>,
    attribute: Option<String>,
    synthetic: Option<SynthKind>,
    synthetic_seed: Option<u64>,
    train_images: Option<usize>,
    test_images: Option<usize>,
    subset_seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDp {
    epsilon: Option<f64>,
    clip_bound: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEncryption {
    key: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIbal {
    lambda_adv: Option<f64>,
    lambda_ib: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLbvq {
    codebook_size: Option<usize>,
    seg_dim: Option<usize>,
    commitment_beta: Option<f64>,
    warmup_epochs: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttack {
    pairs: Option<usize>,
    epochs: Option<usize>,
    test_pairs: Option<usize>,
    mse_weight: Option<f64>,
    perceptual_weight: Option<f64>,
    perceptual_epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    validation_fraction: Option<f64>,
    tap: Option<Tap>,
    snr_db: Option<Vec<f64>>,
    guess_seed: Option<u64>,
    grid_images: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMi {
    min_pairs: Option<usize>,
    projection_side: Option<usize>,
    max_components: Option<usize>,
    ridge: Option<f64>,
    temperatures: Option<usize>,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, col)
}

/// Byte span of the value at a dotted key path, if the document has it.
fn locate(src: &str, path: &str) -> Option<std::ops::Range<usize>> {
    let doc = DeTable::parse(src).ok()?;
    let mut table = doc.get_ref();
    let mut keys = path.split('.').peekable();
    while let Some(k) = keys.next() {
        let (_, v) = table.iter().find(|(name, _)| name.get_ref().as_ref() == k)?;
        if keys.peek().is_none() {
            return Some(v.span());
        }
        match v.get_ref() {
            DeValue::Table(t) => table = t,
            _ => return None,
        }
    }
    None
}

impl ExperimentConfig {
    /// Config with the documented defaults for `scheme` on `dataset`.
    pub fn defaults(scheme: Scheme, dataset: &str) -> Self {
        let train = TrainConfig::default();
        Self {
            preset: None,
            scheme,
            label: scheme.as_str().to_string(),
            dataset: DatasetConfig {
                name: dataset.to_string(),
                attribute: None,
                synthetic: None,
                synthetic_seed: 7,
                train_images: None,
                test_images: None,
                subset_seed: 0,
            },
            data_root: None,
            snr_train_db: train.snr_train_db,
            snr_test_db: DEFAULT_SNR_TEST_DB.to_vec(),
            d: 128,
            batch_size: train.batch_size,
            epochs: train.epochs,
            lr: train.lr,
            grad_clip: train.grad_clip,
            seeds: vec![0],
            output: PathBuf::from("results"),
            dp: DpConfig { epsilon: 0.1, clip_bound: 1.0 },
            key: None,
            ibal: IbalConfig::default(),
            lbvq: LbvqConfig::default(),
            attack: AttackConfig::default(),
            mi: MiConfig::default(),
        }
    }

    /// A shipped preset for `scheme`, without any file.
    pub fn preset(name: &str, scheme: Scheme) -> Result<Self> {
        let src = format!("preset = {name:?}\nscheme = {:?}\n", scheme.as_str());
        Self::from_toml_str(&src)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| BenchError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&src).map_err(|e| e.in_file(path))
    }

    pub fn from_toml_str(src: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(src).map_err(|e| {
            let (line, col) = e.span().map_or((0, 0), |s| line_col(src, s.start));
            BenchError::config_at(line, col, e.message().to_string())
        })?;
        let at = |key: &str, msg: String| match locate(src, key) {
            Some(span) => {
                let (line, col) = line_col(src, span.start);
                BenchError::config_at(line, col, msg)
            }
            None => BenchError::config(msg),
        };
        let base = match &raw.preset {
            Some(name) => {
                let Some(psrc) = preset_source(name) else {
                    return Err(at("preset", format!("unknown preset {name:?}; valid: {}", preset_names().join(", "))));
                };
                let praw: RawConfig = toml::from_str(psrc).expect("shipped presets parse");
                Some(praw)
            }
            None => None,
        };
        let scheme = raw.scheme.ok_or_else(|| at("scheme", "missing `scheme` (baseline, dp, encryption, ibal or lbvq)".into()))?;
        let dataset_name = raw
            .dataset
            .as_ref()
            .and_then(|d| d.name.clone())
            .or_else(|| base.as_ref().and_then(|b| b.dataset.as_ref()).and_then(|d| d.name.clone()))
            .ok_or_else(|| at("dataset", "missing `dataset.name`".into()))?;
        let mut cfg = Self::defaults(scheme, &dataset_name);
        cfg.preset = raw.preset.clone();
        if let Some(b) = base {
            cfg.apply(b);
        }
        let label_set = raw.label.is_some();
        cfg.apply(raw);
        if cfg.key.is_none() {
            cfg.key = std::env::var(KEY_ENV).ok().filter(|k| !k.is_empty());
        }
        if !label_set {
            cfg.label = cfg.default_label();
        }
        cfg.validate().map_err(|(key, msg)| at(key, msg))?;
        Ok(cfg)
    }

    fn apply(&mut self, r: RawConfig) {
        set!(self.label, r.label);
        self.data_root = r.data_root.or(self.data_root.take());
        set!(self.snr_train_db, r.snr_train_db);
        set!(self.snr_test_db, r.snr_test_db);
        set!(self.d, r.d);
        set!(self.batch_size, r.batch_size);
        set!(self.epochs, r.epochs);
        set!(self.lr, r.lr);
        set!(self.grad_clip, r.grad_clip);
        set!(self.seeds, r.seeds);
        set!(self.output, r.output);
        if let Some(ds) = r.dataset {
            set!(self.dataset.name, ds.name);
            self.dataset.attribute = ds.attribute.or(self.dataset.attribute.take());
            self.dataset.synthetic = ds.synthetic.or(self.dataset.synthetic);
            set!(self.dataset.synthetic_seed, ds.synthetic_seed);
            self.dataset.train_images = ds.train_images.or(self.dataset.train_images);
            self.dataset.test_images = ds.test_images.or(self.dataset.test_images);
            set!(self.dataset.subset_seed, ds.subset_seed);
        }
        if let Some(dp) = r.dp {
            set!(self.dp.epsilon, dp.epsilon);
            set!(self.dp.clip_bound, dp.clip_bound);
        }
        if let Some(e) = r.encryption {
            self.key = e.key.or(self.key.take());
        }
        if let Some(i) = r.ibal {
            set!(self.ibal.lambda_adv, i.lambda_adv);
            set!(self.ibal.lambda_ib, i.lambda_ib);
        }
        if let Some(l) = r.lbvq {
            set!(self.lbvq.codebook_size, l.codebook_size);
            set!(self.lbvq.seg_dim, l.seg_dim);
            set!(self.lbvq.commitment_beta, l.commitment_beta);
            set!(self.lbvq.warmup_epochs, l.warmup_epochs);
        }
        if let Some(a) = r.attack {
            set!(self.attack.pairs, a.pairs);
            set!(self.attack.epochs, a.epochs);
            set!(self.attack.test_pairs, a.test_pairs);
            set!(self.attack.mse_weight, a.mse_weight);
            set!(self.attack.perceptual_weight, a.perceptual_weight);
            set!(self.attack.perceptual_epochs, a.perceptual_epochs);
            set!(self.attack.batch_size, a.batch_size);
            set!(self.attack.lr, a.lr);
            set!(self.attack.validation_fraction, a.validation_fraction);
            set!(self.attack.tap, a.tap);
            self.attack.snr_db = a.snr_db.or(self.attack.snr_db.take());
            set!(self.attack.guess_seed, a.guess_seed);
            set!(self.attack.grid_images, a.grid_images);
        }
        if let Some(m) = r.mi {
            set!(self.mi.min_pairs, m.min_pairs);
            set!(self.mi.projection_side, m.projection_side);
            set!(self.mi.max_components, m.max_components);
            set!(self.mi.ridge, m.ridge);
            set!(self.mi.temperatures, m.temperatures);
        }
    }

    /// `dp-eps0.05` for DP runs, the scheme name otherwise.
    pub fn default_label(&self) -> String {
        match self.scheme {
            Scheme::Dp => format!("dp-eps{}", self.dp.epsilon),
            s => s.as_str().to_string(),
        }
    }

    /// Checks every field; on failure returns the offending key and a message.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        let positive = |v: usize, key: &'static str| if v == 0 { Err((key, format!("`{key}` must be positive"))) } else { Ok(()) };
        if self.label.is_empty() || self.label.contains(['/', '\\']) || self.label.starts_with('.') {
            return Err(("label", format!("label {:?} is not a plain directory name", self.label)));
        }
        if self.dataset.name.is_empty() || self.dataset.name.contains(['/', '\\']) {
            return Err(("dataset.name", format!("dataset name {:?} is not a plain directory name", self.dataset.name)));
        }
        positive(self.d, "d")?;
        if self.d % 2 != 0 {
            return Err(("d", format!("d = {} must be even (two reals per complex symbol)", self.d)));
        }
        positive(self.batch_size, "batch_size")?;
        positive(self.epochs, "epochs")?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(("lr", format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(("grad_clip", format!("gradient clip {} must be positive", self.grad_clip)));
        }
        if !self.snr_train_db.is_finite() {
            return Err(("snr_train_db", "training SNR must be finite".into()));
        }
        if self.snr_test_db.is_empty() || self.snr_test_db.iter().any(|s| s.is_nan()) {
            return Err(("snr_test_db", "snr_test_db must list at least one SNR".into()));
        }
        if self.seeds.is_empty() {
            return Err(("seeds", "seeds must list at least one seed".into()));
        }
        if let Some(n) = self.dataset.train_images {
            positive(n, "dataset.train_images")?;
        }
        if let Some(n) = self.dataset.test_images {
            positive(n, "dataset.test_images")?;
        }
        match self.scheme {
            Scheme::Dp => self.dp.validate().map_err(|e| ("dp", e.to_string()))?,
            Scheme::Encryption => match &self.key {
                None => return Err(("encryption", format!("encryption needs `encryption.key` or {KEY_ENV}"))),
                Some(k) => {
                    ShuffleKey::from_hex(k, self.d).map_err(|e| ("encryption.key", e.to_string()))?;
                }
            },
            Scheme::Ibal => self.ibal.validate().map_err(|e| ("ibal", e.to_string()))?,
            Scheme::Lbvq => self.lbvq.validate(self.d).map_err(|e| ("lbvq", e.to_string()))?,
            Scheme::Baseline => {}
        }
        let a = &self.attack;
        positive(a.pairs, "attack.pairs")?;
        positive(a.epochs, "attack.epochs")?;
        positive(a.batch_size, "attack.batch_size")?;
        positive(a.grid_images, "attack.grid_images")?;
        if a.test_pairs < self.mi.min_pairs {
            return Err(("attack.test_pairs", format!("{} test pairs is below the MI minimum of {}", a.test_pairs, self.mi.min_pairs)));
        }
        if !(0.0..0.5).contains(&a.validation_fraction) {
            return Err(("attack.validation_fraction", "validation fraction must lie in [0, 0.5)".into()));
        }
        if !(a.mse_weight >= 0.0 && a.perceptual_weight >= 0.0) || a.mse_weight + a.perceptual_weight == 0.0 {
            return Err(("attack", "attacker loss weights must be non-negative and not both zero".into()));
        }
        if a.perceptual_weight > 0.0 && a.perceptual_epochs == 0 {
            return Err(("attack.perceptual_epochs", "a perceptual loss needs a trained perceptual network".into()));
        }
        if let Some(s) = &a.snr_db {
            if let Some(bad) = s.iter().find(|v| !self.snr_test_db.contains(v)) {
                return Err(("attack.snr_db", format!("attack SNR {bad} dB is not among snr_test_db")));
            }
        }
        Ok(())
    }

    pub fn mechanism(&self) -> MechanismConfig {
        match self.scheme {
            Scheme::Baseline => MechanismConfig::None,
            Scheme::Dp => MechanismConfig::Dp(self.dp),
            Scheme::Encryption => MechanismConfig::Encryption { key_hex: self.key.clone().unwrap_or_default() },
            Scheme::Ibal => MechanismConfig::Ibal(self.ibal.clone()),
            Scheme::Lbvq => MechanismConfig::Lbvq(self.lbvq.clone()),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            snr_train_db: self.snr_train_db,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            grad_clip: self.grad_clip,
            seed,
        }
    }

    pub fn attack_snrs(&self) -> Vec<f64> {
        self.attack.snr_db.clone().unwrap_or_else(|| self.snr_test_db.clone())
    }

    /// Hex SHA-256 of everything that determines results. The output
    /// location, data root and seed list are excluded (the seed is recorded
    /// next to the hash) and the key enters only through its digest.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        for k in ["output", "data_root", "seeds", "preset"] {
            obj.remove(k);
        }
        if let Some(k) = obj.get_mut("key") {
            if let Some(s) = k.as_str() {
                *k = serde_json::Value::String(hex::encode(Sha256::digest(s.to_ascii_lowercase().as_bytes())));
            }
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    /// Settings that differ from the documented defaults, as `key = value
    /// (default ...)` lines.
    pub fn deviations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |key: &str, got: String, want: String| {
            if got != want {
                out.push(format!("{key} = {got} (default {want})"));
            }
        };
        let train = TrainConfig::default();
        check("snr_train_db", self.snr_train_db.to_string(), train.snr_train_db.to_string());
        check("snr_test_db", format!("{:?}", self.snr_test_db), format!("{:?}", DEFAULT_SNR_TEST_DB));
        check("d", self.d.to_string(), "128".into());
        check("batch_size", self.batch_size.to_string(), train.batch_size.to_string());
        let lb = LbvqConfig::default();
        if self.scheme == Scheme::Lbvq {
            check("lbvq.codebook_size", self.lbvq.codebook_size.to_string(), lb.codebook_size.to_string());
        }
        let at = AttackConfig::default();
        check("attack.pairs", self.attack.pairs.to_string(), at.pairs.to_string());
        check("attack.epochs", self.attack.epochs.to_string(), at.epochs.to_string());
        out
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output.join(&self.label).join(seed.to_string())
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| self.output.join("data"))
    }

    /// Dataset column of metric rows: `name` or `name/attribute`.
    pub fn dataset_id(&self) -> String {
        match &self.dataset.attribute {
            Some(a) => format!("{}/{a}", self.dataset.name),
            None => self.dataset.name.clone(),
        }
    }
}
