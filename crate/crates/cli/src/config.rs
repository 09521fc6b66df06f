//! Flat `key = value` experiment configuration.
//!
//! Every key the runner understands is listed in [`KEYS`] with its default.
//! Unknown keys are rejected, values are parsed and validated before any
//! compute starts, and the resolved set (defaults filled in) is what gets
//! written next to the results.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use splitguard::attacks::{AttackConfig, AttackKind};
use splitguard::data::SynthConfig;
use splitguard::models::PreprocessConfig;
use splitguard::pipeline::{DefenseMode, NoiseConfig, PipelineConfig};
use splitguard::training::{PrivacyMode, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("key `{key}`: cannot use {value:?}: {reason}")]
    Invalid { key: String, value: String, reason: String },
    #[error("invalid {section} settings: {reason}")]
    Rejected { section: &'static str, reason: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Subcommands; each has its own set of required keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Attack,
    Sweep,
    Mi,
    Export,
    Eval,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Attack => "attack",
            Command::Sweep => "sweep",
            Command::Mi => "mi",
            Command::Export => "export",
            Command::Eval => "eval",
        }
    }

    pub fn required_keys(self) -> &'static [&'static str] {
        match self {
            Command::Train => &["data.source"],
            Command::Attack => &["data.source", "attacks"],
            Command::Sweep => &["data.source", "sweep.ratios"],
            Command::Mi => &["mi.systems"],
            Command::Export => &["data.source", "export.n"],
            Command::Eval => &["data.source", "eval.defenses"],
        }
    }

    fn needs_data(self) -> bool {
        self != Command::Mi
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `(key, default)`. Keys without a default are unset unless given.
pub const KEYS: &[(&str, Option<&str>)] = &[
    ("seed", Some("0")),
    ("checkpoint", None),
    ("images", Some("2")),
    // data
    ("data.source", None),
    ("data.path", None),
    ("data.train", Some("5000")),
    ("data.aux", Some("500")),
    ("data.test", Some("500")),
    ("data.size", Some("16")),
    ("data.task_classes", Some("4")),
    ("data.sensitive_classes", Some("2")),
    ("data.correlation", Some("0")),
    ("data.overlap", Some("0")),
    ("data.noise", Some("0.03")),
    // pipeline
    ("preprocess.d", Some("4")),
    ("preprocess.filters", Some("16")),
    ("preprocess.enabled", Some("true")),
    ("preprocess.kernel", Some("3")),
    ("pipeline.split", Some("2")),
    ("pipeline.filter_hidden", Some("16")),
    ("pipeline.score_scale", Some("0.1")),
    ("pipeline.temperature", Some("0.03")),
    ("pipeline.ratio", Some("0.6")),
    ("pipeline.defense", Some("disco")),
    ("noise.mean", Some("0")),
    ("noise.std", Some("1")),
    ("noise.prune_prob", Some("0.6")),
    // training
    ("train.rho", Some("1")),
    ("train.lr", Some("0.01")),
    ("train.momentum", Some("0.9")),
    ("train.batch_size", Some("32")),
    ("train.phase1_epochs", Some("3")),
    ("train.phase2_epochs", Some("3")),
    ("train.adversary_steps", Some("1")),
    ("train.task_steps", Some("1")),
    ("train.filter_steps", Some("1")),
    ("train.freeze_client", Some("true")),
    ("train.ratio_threshold", Some("true")),
    ("train.mode", Some("sa")),
    ("train.adversary_hidden", Some("16")),
    // attacks
    ("attacks", None),
    ("attack.mode", Some("si")),
    ("lm.iterations", Some("500")),
    ("lm.lr", Some("0.01")),
    ("lm.eval_samples", Some("8")),
    ("lm.bn_running_stats", Some("true")),
    ("decoder.budget", Some("1000")),
    ("decoder.epochs", Some("30")),
    ("decoder.lr", Some("0.003")),
    ("decoder.batch_size", Some("32")),
    ("decoder.hidden", Some("16")),
    ("decoder.eval_samples", Some("8")),
    // commands
    ("sweep.ratios", None),
    ("sweep.retrain_epochs", Some("0")),
    ("eval.defenses", None),
    ("eval.noise_stds", None),
    ("mi.systems", None),
    ("mi.max_x", Some("16")),
    ("mi.max_layers", Some("3")),
    ("mi.keep_prob", None),
    ("export.n", None),
    ("export.dataset_id", Some("synthetic")),
];

/// Raw key-value pairs as written in a file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            if !KEYS.iter().any(|(name, _)| *name == k) {
                return Err(ConfigError::UnknownKey(k.to_string()));
            }
            if values.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate {
                    line: i + 1,
                    key: k.to_string(),
                });
            }
        }
        Ok(RawConfig { values })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), ConfigError> {
        if !KEYS.iter().any(|(name, _)| *name == key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Explicit value, else the default. Empty strings count as unset.
    pub fn get(&self, key: &str) -> Option<&str> {
        let default = KEYS.iter().find(|(k, _)| *k == key).and_then(|(_, d)| *d);
        self.values
            .get(key)
            .map(String::as_str)
            .or(default)
            .filter(|v| !v.is_empty())
    }

    /// Every key with a value, defaults included, in table order.
    pub fn resolved(&self) -> Vec<(&'static str, String)> {
        KEYS.iter()
            .filter_map(|(k, _)| self.get(k).map(|v| (*k, v.to_string())))
            .collect()
    }

    /// The resolved set as config text; parsing it gives back the same run.
    pub fn resolved_text(&self) -> String {
        self.resolved()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn required<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.optional(key)?
            .ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.get(key).map(|v| parse_value(key, v)).transpose()
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse_value(key, s))
                .collect(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Invalid {
        key: key.to_string(),
        value: v.to_string(),
        reason: e.to_string(),
    })
}

fn invalid(key: &str, value: impl fmt::Display, reason: impl fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn rejected(section: &'static str, e: splitguard::Error) -> ConfigError {
    ConfigError::Rejected {
        section,
        reason: e.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SynthConfig),
    Cifar(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub train: usize,
    pub aux: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiConfig {
    pub systems: u64,
    pub max_x: usize,
    pub max_layers: usize,
    pub keep_prob: Option<f64>,
}

/// Typed, validated configuration of one command.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub command: Command,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    /// Reconstructions written as images per attack.
    pub images: usize,
    pub data: Option<DataConfig>,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub attacks: Vec<AttackConfig>,
    pub sweep_ratios: Vec<f64>,
    pub sweep_retrain_epochs: usize,
    pub eval_defenses: Vec<DefenseMode>,
    pub eval_noise_stds: Vec<f32>,
    pub mi: Option<MiConfig>,
    pub export_n: usize,
    pub export_dataset_id: String,
    /// The raw values this was built from, for the manifest.
    pub raw: RawConfig,
}

impl ExperimentConfig {
    pub fn resolve(raw: &RawConfig, command: Command) -> Result<Self, ConfigError> {
        for key in command.required_keys() {
            if raw.get(key).is_none() {
                return Err(ConfigError::MissingKey(key.to_string()));
            }
        }
        let seed: u64 = raw.required("seed")?;

        let size: usize = raw.required("data.size")?;
        let source = match raw.get("data.source") {
            None => None,
            Some("synthetic") => Some(DataSource::Synthetic(SynthConfig {
                size,
                task_classes: raw.required("data.task_classes")?,
                sensitive_classes: raw.required("data.sensitive_classes")?,
                correlation: raw.required("data.correlation")?,
                overlap: raw.required("data.overlap")?,
                noise: raw.required("data.noise")?,
                seed,
            })),
            Some("cifar") => Some(DataSource::Cifar(raw.required("data.path")?)),
            Some(other) => return Err(invalid("data.source", other, "expected synthetic or cifar")),
        };
        if let Some(DataSource::Synthetic(s)) = &source {
            s.validate().map_err(|e| rejected("data", e))?;
        }
        let (input_size, task_classes) = match &source {
            Some(DataSource::Cifar(_)) => (32, 10),
            _ => (size, raw.required("data.task_classes")?),
        };
        let data = match (source, command.needs_data()) {
            (Some(source), true) => Some(DataConfig {
                source,
                train: raw.required("data.train")?,
                aux: raw.required("data.aux")?,
                test: raw.required("data.test")?,
            }),
            _ => None,
        };

        let pipeline = PipelineConfig {
            preprocess: PreprocessConfig {
                d: raw.required("preprocess.d")?,
                filters: raw.required("preprocess.filters")?,
                enabled: raw.required("preprocess.enabled")?,
                input_size,
                kernel: raw.required("preprocess.kernel")?,
            },
            in_channels: 3,
            split: raw.required("pipeline.split")?,
            task_classes,
            filter_hidden: raw.required("pipeline.filter_hidden")?,
            score_scale: raw.required("pipeline.score_scale")?,
            temperature: raw.required("pipeline.temperature")?,
            ratio: raw.required("pipeline.ratio")?,
            defense: raw.required("pipeline.defense")?,
            noise: NoiseConfig {
                mean: raw.required("noise.mean")?,
                std: raw.required("noise.std")?,
                prune_prob: raw.required("noise.prune_prob")?,
            },
            seed,
        };
        pipeline.validate().map_err(|e| rejected("pipeline", e))?;

        let train = TrainConfig {
            rho: raw.required("train.rho")?,
            lr: raw.required("train.lr")?,
            momentum: raw.required("train.momentum")?,
            batch_size: raw.required("train.batch_size")?,
            phase1_epochs: raw.required("train.phase1_epochs")?,
            phase2_epochs: raw.required("train.phase2_epochs")?,
            adversary_steps: raw.required("train.adversary_steps")?,
            task_steps: raw.required("train.task_steps")?,
            filter_steps: raw.required("train.filter_steps")?,
            freeze_client: raw.required("train.freeze_client")?,
            ratio_threshold: raw.required("train.ratio_threshold")?,
            mode: raw.required("train.mode")?,
            adversary_hidden: raw.required("train.adversary_hidden")?,
            seed,
        };
        train.validate().map_err(|e| rejected("train", e))?;

        let mode: PrivacyMode = raw.required("attack.mode")?;
        let kinds: Vec<AttackKind> = raw.list("attacks")?;
        let mut attacks = Vec::with_capacity(kinds.len());
        for kind in kinds {
            let cfg = match kind {
                AttackKind::LikelihoodMax => AttackConfig {
                    mode,
                    kind,
                    iterations: raw.required("lm.iterations")?,
                    lr: raw.required("lm.lr")?,
                    eval_samples: raw.required("lm.eval_samples")?,
                    bn_running_stats: raw.required("lm.bn_running_stats")?,
                    seed,
                    ..Default::default()
                },
                AttackKind::Decoder => AttackConfig {
                    mode,
                    kind,
                    budget: raw.required("decoder.budget")?,
                    epochs: raw.required("decoder.epochs")?,
                    lr: raw.required("decoder.lr")?,
                    batch_size: raw.required("decoder.batch_size")?,
                    hidden: raw.required("decoder.hidden")?,
                    eval_samples: raw.required("decoder.eval_samples")?,
                    seed,
                    ..Default::default()
                },
            };
            cfg.validate().map_err(|e| invalid("attacks", kind_name(kind), e))?;
            attacks.push(cfg);
        }

        let sweep_ratios: Vec<f64> = raw.list("sweep.ratios")?;
        if let Some(r) = sweep_ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(invalid("sweep.ratios", r, "ratios must lie in [0, 1]"));
        }
        let eval_noise_stds: Vec<f32> = raw.list("eval.noise_stds")?;
        if let Some(s) = eval_noise_stds.iter().find(|s| !(**s >= 0.0)) {
            return Err(invalid("eval.noise_stds", s, "standard deviations must be non-negative"));
        }

        let mi = match raw.optional::<u64>("mi.systems")? {
            Some(systems) => {
                let keep_prob: Option<f64> = raw.optional("mi.keep_prob")?;
                if let Some(p) = keep_prob.filter(|p| !(0.0..=1.0).contains(p)) {
                    return Err(invalid("mi.keep_prob", p, "probability outside [0, 1]"));
                }
                Some(MiConfig {
                    systems,
                    max_x: raw.required("mi.max_x")?,
                    max_layers: raw.required("mi.max_layers")?,
                    keep_prob,
                })
            }
            None => None,
        };

        Ok(ExperimentConfig {
            command,
            seed,
            checkpoint: raw.optional("checkpoint")?,
            images: raw.required("images")?,
            data,
            pipeline,
            train,
            attacks,
            sweep_ratios,
            sweep_retrain_epochs: raw.required("sweep.retrain_epochs")?,
            eval_defenses: raw.list("eval.defenses")?,
            eval_noise_stds,
            mi,
            export_n: raw.optional("export.n")?.unwrap_or(0),
            export_dataset_id: raw.required("export.dataset_id")?,
            raw: raw.clone(),
        })
    }
}

pub fn kind_name(kind: AttackKind) -> &'static str {
    match kind {
        AttackKind::LikelihoodMax => "likelihood_max",
        AttackKind::Decoder => "decoder",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let raw = RawConfig::parse("# header\n\nseed = 4 # trailing\n").unwrap();
        assert_eq!(raw.get("seed"), Some("4"));
        assert_eq!(raw.get("train.lr"), Some("0.01"));
    }

    #[test]
    fn resolved_text_parses_back() {
        let raw = RawConfig::parse("data.source = synthetic\nsweep.ratios = 0, 0.5\n").unwrap();
        let again = RawConfig::parse(&raw.resolved_text()).unwrap();
        assert_eq!(raw.resolved(), again.resolved());
    }

    #[test]
    fn syntax_errors_carry_the_line() {
        match RawConfig::parse("seed = 1\nnonsense\n") {
            Err(ConfigError::Syntax { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_value_names_its_key() {
        let raw = RawConfig::parse("data.source = synthetic\ntrain.lr = fast\n").unwrap();
        let err = ExperimentConfig::resolve(&raw, Command::Train).unwrap_err();
        assert!(err.to_string().contains("train.lr"), "{err}");
    }
}
