//! Run configuration: flat INI sections with `key = value` lines.
//!
//! Every key has a default, unknown sections and keys are rejected, and
//! [`RunConfig::to_ini`] writes a text that parses back to the same value.
//! Comments start with `#` or `;`; lists are comma separated.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ddnn::data::SynthParams;
use ddnn::experiments::{default_grid, SweepConfig, DEFAULT_THRESHOLD};
use ddnn::model::{AggregationKind, TrainConfig, MAX_DEVICES};
use ddnn::tensor::AdamConfig;
use ddnn::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    /// Sweep cells run concurrently.
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    /// Dataset directory; empty means synthesize from the parameters below.
    pub path: String,
    pub n_samples: usize,
    pub noise_sigma: f64,
    pub absence_prob: Vec<f64>,
    pub class_weights: Vec<f64>,
    pub train_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub devices: usize,
    pub filters: usize,
    pub local: AggregationKind,
    pub cloud: AggregationKind,
    pub exit_weights: Vec<f64>,
    /// Filter counts compared by the filter sweep.
    pub filter_grid: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicySection {
    pub threshold: f64,
    /// Thresholds visited by the threshold sweep.
    pub grid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputSection {
    pub dir: String,
    /// Checkpoint path; empty means `model.ddnn` inside `dir`.
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub policy: PolicySection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthParams::default();
        let train = TrainConfig::default();
        Self {
            run: RunSection { seed: 0, jobs: 1 },
            data: DataSection {
                path: String::new(),
                n_samples: synth.n_samples,
                noise_sigma: synth.noise_sigma,
                absence_prob: synth.absence_prob,
                class_weights: synth.class_weights.to_vec(),
                train_fraction: ddnn::data::DEFAULT_TRAIN_FRACTION,
            },
            model: ModelSection {
                devices: synth.views.len(),
                filters: train.filters,
                local: train.local,
                cloud: train.cloud,
                exit_weights: train.exit_weights.to_vec(),
                filter_grid: vec![4, 8, 16],
            },
            training: TrainingSection {
                epochs: train.epochs,
                batch_size: train.batch_size,
                learning_rate: train.adam.alpha,
                beta1: train.adam.beta1,
                beta2: train.adam.beta2,
                epsilon: train.adam.epsilon,
            },
            policy: PolicySection {
                threshold: DEFAULT_THRESHOLD,
                grid: default_grid(),
            },
            output: OutputSection {
                dir: "out".into(),
                checkpoint: String::new(),
            },
        }
    }
}

fn list<T: Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn num<T: FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse {:?}", value))
}

fn nums<T: FromStr>(value: &str) -> Result<Vec<T>, String> {
    if value.is_empty() {
        return Err("empty list".into());
    }
    value.split(',').map(|v| num(v.trim())).collect()
}

fn unit(value: &str) -> Result<f64, String> {
    let v: f64 = num(value)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{} outside [0, 1]", v))
    }
}

fn positive<T: FromStr + PartialOrd + Default + Display>(value: &str) -> Result<T, String> {
    let v: T = num(value)?;
    if v > T::default() {
        Ok(v)
    } else {
        Err(format!("{} must be positive", v))
    }
}

const SECTIONS: [&str; 6] = ["run", "data", "model", "training", "policy", "output"];

impl RunConfig {
    /// Every `(section, key, value)` in file order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let (d, m, t, p) = (&self.data, &self.model, &self.training, &self.policy);
        vec![
            ("run", "seed", self.run.seed.to_string()),
            ("run", "jobs", self.run.jobs.to_string()),
            ("data", "path", d.path.clone()),
            ("data", "n_samples", d.n_samples.to_string()),
            ("data", "noise_sigma", d.noise_sigma.to_string()),
            ("data", "absence_prob", list(&d.absence_prob)),
            ("data", "class_weights", list(&d.class_weights)),
            ("data", "train_fraction", d.train_fraction.to_string()),
            ("model", "devices", m.devices.to_string()),
            ("model", "filters", m.filters.to_string()),
            ("model", "local", m.local.to_string()),
            ("model", "cloud", m.cloud.to_string()),
            ("model", "exit_weights", list(&m.exit_weights)),
            ("model", "filter_grid", list(&m.filter_grid)),
            ("training", "epochs", t.epochs.to_string()),
            ("training", "batch_size", t.batch_size.to_string()),
            ("training", "learning_rate", t.learning_rate.to_string()),
            ("training", "beta1", t.beta1.to_string()),
            ("training", "beta2", t.beta2.to_string()),
            ("training", "epsilon", t.epsilon.to_string()),
            ("policy", "threshold", p.threshold.to_string()),
            ("policy", "grid", list(&p.grid)),
            ("output", "dir", self.output.dir.clone()),
            ("output", "checkpoint", self.output.checkpoint.clone()),
        ]
    }

    /// `section.key -> value`, as recorded in sweep manifests.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.entries()
            .into_iter()
            .map(|(s, k, v)| (format!("{}.{}", s, k), v))
            .collect()
    }

    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in self.entries() {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{}]\n", section));
                current = section;
            }
            out.push_str(&format!("{} = {}\n", key, value));
        }
        out
    }

    /// Sets one key, checking the value on its own.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        let (d, m, t, p) = (&mut self.data, &mut self.model, &mut self.training, &mut self.policy);
        match (section, key) {
            ("run", "seed") => self.run.seed = num(value)?,
            ("run", "jobs") => self.run.jobs = positive(value)?,
            ("data", "path") => d.path = value.to_string(),
            ("data", "n_samples") => d.n_samples = positive(value)?,
            ("data", "noise_sigma") => {
                let v: f64 = num(value)?;
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(format!("noise sigma {} must be finite and non-negative", v));
                }
                d.noise_sigma = v;
            }
            ("data", "absence_prob") => {
                let v: Vec<f64> = nums(value)?;
                if let Some(bad) = v.iter().find(|p| !(0.0..1.0).contains(*p)) {
                    return Err(format!("absence probability {} outside [0, 1)", bad));
                }
                d.absence_prob = v;
            }
            ("data", "class_weights") => {
                let v: Vec<f64> = nums(value)?;
                if v.len() != 3 || v.iter().any(|w| !(*w >= 0.0)) || v.iter().sum::<f64>() <= 0.0 {
                    return Err("need three non-negative weights with a positive sum".into());
                }
                d.class_weights = v;
            }
            ("data", "train_fraction") => {
                let v: f64 = num(value)?;
                if !(v > 0.0 && v < 1.0) {
                    return Err(format!("train fraction {} outside (0, 1)", v));
                }
                d.train_fraction = v;
            }
            ("model", "devices") => {
                let v: usize = positive(value)?;
                if v > MAX_DEVICES {
                    return Err(format!("at most {} devices", MAX_DEVICES));
                }
                m.devices = v;
            }
            ("model", "filters") => m.filters = positive(value)?,
            ("model", "local") => m.local = value.parse().map_err(|e: Error| e.to_string())?,
            ("model", "cloud") => m.cloud = value.parse().map_err(|e: Error| e.to_string())?,
            ("model", "exit_weights") => {
                let v: Vec<f64> = nums(value)?;
                if v.len() != 2 || v.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                    return Err("need two finite non-negative weights (local, cloud)".into());
                }
                m.exit_weights = v;
            }
            ("model", "filter_grid") => {
                let v: Vec<usize> = nums(value)?;
                if v.contains(&0) {
                    return Err("filter counts must be positive".into());
                }
                m.filter_grid = v;
            }
            ("training", "epochs") => t.epochs = positive(value)?,
            ("training", "batch_size") => t.batch_size = positive(value)?,
            ("training", "learning_rate") => t.learning_rate = positive(value)?,
            ("training", "beta1") => t.beta1 = unit(value)?,
            ("training", "beta2") => t.beta2 = unit(value)?,
            ("training", "epsilon") => t.epsilon = positive(value)?,
            ("policy", "threshold") => p.threshold = unit(value)?,
            ("policy", "grid") => {
                let v: Vec<f64> = nums(value)?;
                if let Some(bad) = v.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                    return Err(format!("threshold {} outside [0, 1]", bad));
                }
                p.grid = v;
            }
            ("output", "dir") => {
                if value.is_empty() {
                    return Err("output directory must not be empty".into());
                }
                self.output.dir = value.to_string();
            }
            ("output", "checkpoint") => self.output.checkpoint = value.to_string(),
            _ if !SECTIONS.contains(&section) => return Err(format!("unknown section [{}]", section)),
            _ => return Err(format!("unknown key {:?} in [{}]", key, section)),
        }
        Ok(())
    }

    /// Parses INI text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_text(text).map_err(Error::InvalidArgument)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {}", path.display(), e)))?;
        Self::parse_text(&text).map_err(|m| Error::InvalidArgument(format!("{}: {}", path.display(), m)))
    }

    fn parse_text(text: &str) -> Result<Self, String> {
        let mut config = Self::default();
        let mut section: Option<&str> = None;
        for (i, raw) in text.lines().enumerate() {
            let at = |m: String| format!("config line {}: {}", i + 1, m);
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| at(format!("malformed section header {:?}", line)))?;
                let name = name.trim();
                section = Some(SECTIONS.iter().find(|s| **s == name).ok_or_else(|| at(format!("unknown section [{}]", name)))?);
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| at(format!("expected key = value, got {:?}", line)))?;
            let section = section.ok_or_else(|| at("key outside of any section".into()))?;
            config.set(section, key.trim(), value.trim()).map_err(at)?;
        }
        config.check()?;
        Ok(config)
    }

    /// Checks that involve more than one key.
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(Error::InvalidArgument)
    }

    fn check(&self) -> Result<(), String> {
        let views = SynthParams::default_views().len();
        if self.data.path.is_empty() {
            if self.model.devices > views {
                return Err(format!(
                    "the generator simulates at most {} devices, model.devices is {}",
                    views, self.model.devices
                ));
            }
            if self.data.absence_prob.len() != self.model.devices {
                return Err(format!(
                    "data.absence_prob has {} entries for {} devices",
                    self.data.absence_prob.len(),
                    self.model.devices
                ));
            }
        }
        Ok(())
    }

    pub fn synth_params(&self) -> SynthParams {
        let mut views = SynthParams::default_views();
        views.truncate(self.model.devices);
        SynthParams {
            seed: self.run.seed,
            n_samples: self.data.n_samples,
            absence_prob: self.data.absence_prob.clone(),
            noise_sigma: self.data.noise_sigma,
            class_weights: [self.data.class_weights[0], self.data.class_weights[1], self.data.class_weights[2]],
            views,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            adam: AdamConfig {
                alpha: self.training.learning_rate,
                beta1: self.training.beta1,
                beta2: self.training.beta2,
                epsilon: self.training.epsilon,
            },
            seed: self.run.seed,
            filters: self.model.filters,
            local: self.model.local,
            cloud: self.model.cloud,
            exit_weights: [self.model.exit_weights[0], self.model.exit_weights[1]],
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            train: self.train_config(),
            threshold: self.policy.threshold,
            jobs: self.run.jobs,
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.output.dir)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.output.checkpoint.is_empty() {
            self.out_dir().join("model.ddnn")
        } else {
            PathBuf::from(&self.output.checkpoint)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_defaults() {
        let c = RunConfig::default();
        let t = c.train_config();
        assert_eq!(t, TrainConfig::default());
        assert_eq!(t.adam.alpha, 0.001);
        assert_eq!((t.adam.beta1, t.adam.beta2, t.adam.epsilon), (0.9, 0.999, 1e-8));
        assert_eq!(t.epochs, 100);
        assert_eq!(c.synth_params(), SynthParams::default());
    }

    #[test]
    fn empty_text_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# nothing\n\n[model]\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn reads_values_and_comments() {
        let c = RunConfig::parse("[run]\nseed = 7 \n; note\n[model]\nlocal=ap\ncloud = MP\n[policy]\ngrid = 0.2, 0.4\n")
            .unwrap();
        assert_eq!(c.run.seed, 7);
        assert_eq!(c.model.local, AggregationKind::Average);
        assert_eq!(c.model.cloud, AggregationKind::Max);
        assert_eq!(c.policy.grid, vec![0.2, 0.4]);
    }

    fn error(text: &str) -> String {
        RunConfig::parse(text).unwrap_err().to_string()
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert!(error("[model]\n\nfilterz = 3\n").contains("line 3: unknown key \"filterz\""));
        assert!(error("[nope]\n").contains("line 1: unknown section [nope]"));
        assert!(error("seed = 1\n").contains("line 1: key outside"));
        assert!(error("[policy]\nthreshold = 1.5\n").contains("line 2: 1.5 outside [0, 1]"));
        assert!(error("[training]\nepochs = many\n").contains("line 2: cannot parse"));
        assert!(error("[run\n").contains("line 1: malformed"));
        assert!(error("[run]\njust text\n").contains("line 2: expected key = value"));
        assert!(error("[model]\nlocal = XX\n").contains("line 2"));
    }

    #[test]
    fn cross_field_checks() {
        assert!(error("[model]\ndevices = 3\n").contains("absence_prob has 6 entries for 3 devices"));
        assert!(RunConfig::parse("[model]\ndevices = 3\n[data]\nabsence_prob = 0.1,0.2,0.3\n").is_ok());
        assert!(RunConfig::parse("[model]\ndevices = 8\n[data]\npath = somewhere\n").is_ok());
        assert!(error("[model]\ndevices = 8\n[data]\nabsence_prob = 0,0,0,0,0,0,0,0\n").contains("at most 6"));
    }

    #[test]
    fn checkpoint_defaults_into_output_dir() {
        let mut c = RunConfig::default();
        c.output.dir = "runs/a".into();
        assert_eq!(c.checkpoint_path(), PathBuf::from("runs/a/model.ddnn"));
        c.output.checkpoint = "m.bin".into();
        assert_eq!(c.checkpoint_path(), PathBuf::from("m.bin"));
    }
}
