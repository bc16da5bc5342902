//! Experiment configuration: a flat key/value schema with per-dataset
//! defaults, a plain-text file format, flag overrides, and a content hash
//! that names every emitted artifact.
//!
//! Resolution order: dataset presets, then the config file, then `--set`
//! overrides. The hash covers only the keys that change the experiment's
//! result (not file-system plumbing like roots and output directories), so
//! re-running the same science from a different machine layout lands in
//! the same artifact directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};

use mlrdsc_core::datasets::SyntheticSpec;
use mlrdsc_core::network::{ArchitectureSpec, ConnectionScheme, ConvLayerSpec};
use mlrdsc_core::selfexpress::{CRegularizer, LossWeights};
use mlrdsc_core::trainer::TrainConfig;

/// Environment variable holding the default dataset root.
pub const DATA_ROOT_ENV: &str = "MLRDSC_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetChoice {
    YaleB,
    Orl,
    Coil20,
    Coil100,
    Synthetic,
    Cache,
}

impl DatasetChoice {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "yaleb" => DatasetChoice::YaleB,
            "orl" => DatasetChoice::Orl,
            "coil20" => DatasetChoice::Coil20,
            "coil100" => DatasetChoice::Coil100,
            "synthetic" => DatasetChoice::Synthetic,
            "cache" => DatasetChoice::Cache,
            other => bail!("unknown dataset '{other}' (yaleb|orl|coil20|coil100|synthetic|cache)"),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetChoice::YaleB => "yaleb",
            DatasetChoice::Orl => "orl",
            DatasetChoice::Coil20 => "coil20",
            DatasetChoice::Coil100 => "coil100",
            DatasetChoice::Synthetic => "synthetic",
            DatasetChoice::Cache => "cache",
        }
    }
}

/// Model variants from the ablation study. The multi-level variants wire a
/// connection layer at every encoder level; the single-connection variants
/// keep only the bottleneck layer with `D` frozen at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Mlrdsc,
    MlrdscL1,
    DscL1,
    DscL2,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "mlrdsc" => Variant::Mlrdsc,
            "mlrdsc_l1" => Variant::MlrdscL1,
            "dsc_l1" => Variant::DscL1,
            "dsc_l2" => Variant::DscL2,
            other => bail!("unknown variant '{other}' (mlrdsc|mlrdsc_l1|dsc_l1|dsc_l2)"),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Mlrdsc => "mlrdsc",
            Variant::MlrdscL1 => "mlrdsc_l1",
            Variant::DscL1 => "dsc_l1",
            Variant::DscL2 => "dsc_l2",
        }
    }

    pub fn connections(&self) -> ConnectionScheme {
        match self {
            Variant::Mlrdsc | Variant::MlrdscL1 => ConnectionScheme::MultiLevel,
            Variant::DscL1 | Variant::DscL2 => ConnectionScheme::BottleneckOnly,
        }
    }

    pub fn freeze_d(&self) -> bool {
        matches!(self, Variant::DscL1 | Variant::DscL2)
    }

    pub fn c_regularizer(&self) -> CRegularizer {
        match self {
            Variant::Mlrdsc => CRegularizer::MembershipL1,
            Variant::MlrdscL1 | Variant::DscL1 => CRegularizer::PlainL1,
            Variant::DscL2 => CRegularizer::SquaredFrobenius,
        }
    }
}

/// Keys that participate in the config hash.
const HASHED_KEYS: &[&str] = &[
    "dataset",
    "subjects",
    "subject_start",
    "variant",
    "arch",
    "lambda1",
    "lambda2",
    "lambda3",
    "t_update",
    "max_iter",
    "lr",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "seed",
    "pretrain_epochs",
    "pretrain_plateau_tol",
    "pretrain_plateau_window",
    "stabilize",
    "c_regularizer",
    "synth_k",
    "synth_ambient",
    "synth_dim",
    "synth_points",
    "synth_sigma",
    "synth_seed",
];

/// Plumbing keys: accepted, persisted, but outside the hash.
const PLUMBING_KEYS: &[&str] = &[
    "data_root",
    "cache",
    "output_dir",
    "workers",
    "checkpoint_every",
];

fn known_key(key: &str) -> bool {
    HASHED_KEYS.contains(&key) || PLUMBING_KEYS.contains(&key)
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl ExperimentConfig {
    /// Builds the effective configuration from presets, an optional config
    /// file, and `key=value` overrides (applied last).
    pub fn resolve(
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<ExperimentConfig> {
        let mut layered: BTreeMap<String, String> = BTreeMap::new();
        if let Some(path) = file {
            for (key, value) in parse_config_file(path)? {
                layered.insert(key, value);
            }
        }
        for (key, value) in overrides {
            if !known_key(key) {
                bail!("unknown configuration key '{key}'");
            }
            layered.insert(key.clone(), value.clone());
        }

        let dataset = DatasetChoice::parse(
            layered
                .get("dataset")
                .map(String::as_str)
                .ok_or_else(|| anyhow!("configuration needs a 'dataset' key"))?,
        )?;
        let subjects: usize = match layered.get("subjects") {
            Some(v) => v.parse().context("subjects")?,
            None => default_subjects(dataset),
        };

        let mut values = preset(dataset, subjects);
        for (key, value) in layered {
            values.insert(key, value);
        }
        let cfg = ExperimentConfig { values };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        for key in self.values.keys() {
            if !known_key(key) {
                bail!("unknown configuration key '{key}'");
            }
        }
        self.dataset()?;
        self.variant()?;
        self.weights()?;
        self.arch_layers()?;
        let _ = self.get_usize("t_update")?;
        let _ = self.get_usize("max_iter")?;
        let _ = self.get_f64("lr")?;
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn get_f64(&self, key: &str) -> Result<f64> {
        self.values
            .get(key)
            .ok_or_else(|| anyhow!("missing configuration key '{key}'"))?
            .parse()
            .with_context(|| format!("key '{key}'"))
    }

    fn get_usize(&self, key: &str) -> Result<usize> {
        self.values
            .get(key)
            .ok_or_else(|| anyhow!("missing configuration key '{key}'"))?
            .parse()
            .with_context(|| format!("key '{key}'"))
    }

    fn get_u64(&self, key: &str) -> Result<u64> {
        self.values
            .get(key)
            .ok_or_else(|| anyhow!("missing configuration key '{key}'"))?
            .parse()
            .with_context(|| format!("key '{key}'"))
    }

    fn get_bool(&self, key: &str) -> Result<bool> {
        match self.values.get(key).map(String::as_str) {
            None => Ok(false),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(other) => bail!("key '{key}': expected true/false, got '{other}'"),
        }
    }

    pub fn dataset(&self) -> Result<DatasetChoice> {
        DatasetChoice::parse(
            self.get("dataset")
                .ok_or_else(|| anyhow!("configuration needs a 'dataset' key"))?,
        )
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::parse(self.get("variant").unwrap_or("mlrdsc"))
    }

    pub fn subjects(&self) -> Result<usize> {
        self.get_usize("subjects")
    }

    pub fn subject_start(&self) -> Result<usize> {
        self.get_usize("subject_start")
    }

    pub fn seed(&self) -> Result<u64> {
        self.get_u64("seed")
    }

    pub fn workers(&self) -> usize {
        self.get("workers")
            .and_then(|v| v.parse().ok())
            .unwrap_or(1)
    }

    pub fn checkpoint_every(&self) -> usize {
        self.get("checkpoint_every")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(self.get("output_dir").unwrap_or("out"))
    }

    /// Dataset root: the config key, else the environment variable.
    pub fn data_root(&self) -> Result<PathBuf> {
        if let Some(root) = self.get("data_root") {
            return Ok(PathBuf::from(root));
        }
        if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
            return Ok(PathBuf::from(root));
        }
        bail!("no dataset root: set the 'data_root' key or {DATA_ROOT_ENV}")
    }

    pub fn cache_path(&self) -> Result<PathBuf> {
        self.get("cache")
            .map(PathBuf::from)
            .ok_or_else(|| anyhow!("dataset 'cache' needs the 'cache' key"))
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(
            self.get_f64("lambda1")?,
            self.get_f64("lambda2")?,
            self.get_f64("lambda3")?,
        )
        .map_err(|e| anyhow!("{e}"))
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        Ok(SyntheticSpec {
            k: self.get_usize("synth_k")?,
            ambient_dim: self.get_usize("synth_ambient")?,
            subspace_dim: self.get_usize("synth_dim")?,
            points_per_subspace: self.get_usize("synth_points")?,
            noise_sigma: self.get_f64("synth_sigma")?,
            seed: self.get_u64("synth_seed")?,
        })
    }

    /// `filters x kernel` pairs from the `arch` key, e.g. `10x5,20x3,30x3`.
    pub fn arch_layers(&self) -> Result<Vec<ConvLayerSpec>> {
        let text = self
            .get("arch")
            .ok_or_else(|| anyhow!("missing configuration key 'arch'"))?;
        let mut layers = Vec::new();
        for part in text.split(',') {
            let (filters, kernel) = part
                .trim()
                .split_once('x')
                .ok_or_else(|| anyhow!("arch entry '{part}' is not FILTERSxKERNEL"))?;
            layers.push(ConvLayerSpec::new(
                filters.trim().parse().with_context(|| format!("arch '{part}'"))?,
                kernel.trim().parse().with_context(|| format!("arch '{part}'"))?,
            ));
        }
        if layers.is_empty() {
            bail!("arch must list at least one layer");
        }
        Ok(layers)
    }

    /// Builds the architecture for data of the given image shape, wiring
    /// connections per the variant.
    pub fn arch(&self, input_shape: (usize, usize, usize)) -> Result<ArchitectureSpec> {
        ArchitectureSpec::new(self.arch_layers()?, input_shape, self.variant()?.connections())
            .map_err(|e| anyhow!("{e}"))
    }

    /// The training configuration implied by this experiment. The `C`
    /// regularizer follows the variant unless explicitly overridden.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let variant = self.variant()?;
        let mut cfg = TrainConfig::new(
            self.weights()?,
            self.get_usize("t_update")?,
            self.get_usize("max_iter")?,
            self.seed()?,
        );
        cfg.lr = self.get_f64("lr")?;
        cfg.adam_beta1 = self.get_f64("adam_beta1")?;
        cfg.adam_beta2 = self.get_f64("adam_beta2")?;
        cfg.adam_eps = self.get_f64("adam_eps")?;
        cfg.pretrain_epochs = self.get_usize("pretrain_epochs")?;
        cfg.pretrain_plateau_tol = self.get_f64("pretrain_plateau_tol")?;
        cfg.pretrain_plateau_window = self.get_usize("pretrain_plateau_window")?;
        cfg.stabilize = self.get_bool("stabilize")?;
        cfg.freeze_d = variant.freeze_d();
        cfg.c_regularizer = match self.get("c_regularizer") {
            None => variant.c_regularizer(),
            Some("membership_l1") => CRegularizer::MembershipL1,
            Some("plain_l1") => CRegularizer::PlainL1,
            Some("squared_frobenius") => CRegularizer::SquaredFrobenius,
            Some("grouped_l2") => CRegularizer::GroupedL2,
            Some(other) => bail!("unknown c_regularizer '{other}'"),
        };
        cfg.validate().map_err(|e| anyhow!("{e}"))?;
        Ok(cfg)
    }

    /// Canonical `key = value` text of the full effective configuration.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (key, value) in &self.values {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Hash over the result-determining keys; names artifact directories.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for &key in HASHED_KEYS {
            if let Some(value) = self.values.get(key) {
                hasher.update(key.as_bytes());
                hasher.update(b"=");
                hasher.update(value.as_bytes());
                hasher.update(b"\n");
            }
        }
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            let _ = write!(hex, "{byte:02x}");
        }
        hex
    }

    /// Mutates one key (used by the sensitivity grid).
    pub fn set(&mut self, key: &str, value: String) -> Result<()> {
        if !known_key(key) {
            bail!("unknown configuration key '{key}'");
        }
        self.values.insert(key.to_string(), value);
        Ok(())
    }
}

fn default_subjects(dataset: DatasetChoice) -> usize {
    match dataset {
        DatasetChoice::YaleB => 38,
        _ => 0,
    }
}

/// Paper-protocol defaults per dataset. Yale B's first loss weight scales
/// with the subject count as `10^(K/10 - 1)`.
fn preset(dataset: DatasetChoice, subjects: usize) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        map.insert(k.to_string(), v);
    };
    put("dataset", dataset.name().to_string());
    put("variant", "mlrdsc".to_string());
    put("lr", "0.001".to_string());
    put("adam_beta1", "0.9".to_string());
    put("adam_beta2", "0.999".to_string());
    put("adam_eps", "1e-8".to_string());
    put("seed", "42".to_string());
    put("pretrain_epochs", "2000".to_string());
    put("pretrain_plateau_tol", "1e-5".to_string());
    put("pretrain_plateau_window", "100".to_string());
    put("stabilize", "false".to_string());
    put("output_dir", "out".to_string());
    match dataset {
        DatasetChoice::YaleB => {
            put("arch", "10x5,20x3,30x3".to_string());
            put("subjects", subjects.to_string());
            put("subject_start", "1".to_string());
            let lambda1 = 10f64.powf(subjects as f64 / 10.0 - 1.0);
            put("lambda1", format!("{lambda1}"));
            put("lambda2", "40".to_string());
            put("lambda3", "10".to_string());
            put("t_update", "100".to_string());
            put("max_iter", "900".to_string());
        }
        DatasetChoice::Orl => {
            put("arch", "3x3,3x3,5x3".to_string());
            put("lambda1", "5".to_string());
            put("lambda2", "0.5".to_string());
            put("lambda3", "1".to_string());
            put("t_update", "10".to_string());
            put("max_iter", "420".to_string());
        }
        DatasetChoice::Coil20 => {
            put("arch", "5x3,10x3".to_string());
            put("lambda1", "20".to_string());
            put("lambda2", "20".to_string());
            put("lambda3", "5".to_string());
            put("t_update", "5".to_string());
            put("max_iter", "50".to_string());
        }
        DatasetChoice::Coil100 => {
            put("arch", "20x3,30x3".to_string());
            put("lambda1", "20".to_string());
            put("lambda2", "40".to_string());
            put("lambda3", "10".to_string());
            put("t_update", "50".to_string());
            put("max_iter", "350".to_string());
        }
        DatasetChoice::Synthetic | DatasetChoice::Cache => {
            put("arch", "4x3,6x3".to_string());
            put("lambda1", "10".to_string());
            put("lambda2", "1".to_string());
            put("lambda3", "1".to_string());
            put("t_update", "50".to_string());
            put("max_iter", "200".to_string());
            put("pretrain_epochs", "1000".to_string());
            put("synth_k", "3".to_string());
            put("synth_ambient", "30".to_string());
            put("synth_dim", "3".to_string());
            put("synth_points", "40".to_string());
            put("synth_sigma", "0".to_string());
            put("synth_seed", "7".to_string());
        }
    }
    map
}

/// Parses `key = value` lines; `#` starts a comment, blank lines skipped.
fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected 'key = value'", path.display(), lineno + 1))?;
        let key = key.trim().to_string();
        if !known_key(&key) {
            bail!("{}:{}: unknown key '{key}'", path.display(), lineno + 1);
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `--set key=value` argument.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (key, value) = arg
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects key=value, got '{arg}'"))?;
    Ok((key.trim().to_string(), value.trim().to_string()))
}

/// Deterministic per-trial seed derived from the config hash.
pub fn trial_seed(config_hash: &str, trial: usize) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(config_hash.as_bytes());
    hasher.update(b":");
    hasher.update(trial.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
}
