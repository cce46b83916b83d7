//! Run configuration in a sectioned `key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! [train]
//! epochs = 40
//! learning_rate = 0.5
//!
//! [attack]
//! epsilon = 0.01
//! ```
//!
//! Every key has a default; a file only lists what it changes. The same
//! `section.key` names are accepted by [`RunConfig::set`], which the CLI uses
//! for flag overrides.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::annotation::AnnotationConfig;
use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::eval::{ExperimentConfig, DEFAULT_EPSILONS, DEFAULT_LAMBDAS};
use crate::losses::{HiddenStages, LossConfig};
use crate::model::ModelConfig;
use crate::synth::{SceneConfig, SplitConfig};
use crate::trainer::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Global seed: dataset, initialisation, shuffling and attacks.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub threads: usize,
    pub scene: SceneConfig,
    pub n_positive: usize,
    pub n_challenging: usize,
    pub stage_widths: Vec<usize>,
    pub decoder_width: usize,
    pub annotation: AnnotationConfig,
    pub train: TrainConfig,
    /// PGD iterations used while training; `None` reuses `attack.steps`.
    pub train_attack_steps: Option<usize>,
    /// Training PGD step as a fraction of ε; `None` reuses `attack`'s step.
    pub train_attack_step_fraction: Option<f64>,
    /// Evaluation attack; also the training attack unless overridden.
    pub attack: AttackConfig,
    pub loss: LossConfig,
    pub eval_batch: usize,
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
    pub epsilons: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            seed: 0,
            output_dir: None,
            threads: 1,
            scene: SceneConfig::default(),
            n_positive: 400,
            n_challenging: 100,
            stage_widths: model.stage_widths,
            decoder_width: model.decoder_width,
            annotation: AnnotationConfig::default(),
            train: TrainConfig::default(),
            train_attack_steps: None,
            train_attack_step_fraction: None,
            attack: AttackConfig::default(),
            loss: LossConfig::default(),
            eval_batch: 32,
            seeds: (0..5).collect(),
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            epsilons: DEFAULT_EPSILONS.to_vec(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value {
        "auto" | "" => Ok(None),
        v => parse_value(key, v).map(Some),
    }
}

fn join<T: std::fmt::Debug>(items: &[T]) -> String {
    items.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

fn optional<T: std::fmt::Debug>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), |v| format!("{v:?}"))
}

fn hidden_stages_str(h: &HiddenStages) -> String {
    match h {
        HiddenStages::All => "all".into(),
        HiddenStages::Final => "final".into(),
        HiddenStages::Only(list) => join(list),
    }
}

impl RunConfig {
    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.merge(text)?;
        Ok(cfg)
    }

    /// Applies the assignments in `text` to `self`.
    pub fn merge(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::parse(line, "unterminated section header"))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::parse(line, format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::parse(line, "expected `key = value`"))?;
            if section.is_empty() {
                return Err(Error::parse(line, "assignment before any [section]"));
            }
            let full = format!("{section}.{}", key.trim());
            self.set(&full, value.trim())
                .map_err(|e| Error::parse(line, e.to_string()))?;
        }
        Ok(())
    }

    /// Sets one `section.key` to a textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key;
        match key {
            "run.seed" => self.seed = parse_value(k, value)?,
            "run.output_dir" => {
                self.output_dir = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "run.threads" => self.threads = parse_value(k, value)?,
            "scene.height" => self.scene.height = parse_value(k, value)?,
            "scene.width" => self.scene.width = parse_value(k, value)?,
            "scene.channels" => self.scene.channels = parse_value(k, value)?,
            "scene.noise_sigma" => self.scene.noise_sigma = parse_value(k, value)?,
            "split.n_positive" => self.n_positive = parse_value(k, value)?,
            "split.n_challenging" => self.n_challenging = parse_value(k, value)?,
            "model.stage_widths" => self.stage_widths = parse_list(k, value)?,
            "model.decoder_width" => self.decoder_width = parse_value(k, value)?,
            "annotation.velocity_threshold" => self.annotation.velocity_threshold = parse_value(k, value)?,
            "annotation.window" => self.annotation.window = parse_value(k, value)?,
            "annotation.clearance" => self.annotation.clearance = parse_value(k, value)?,
            "annotation.turn_tolerance" => self.annotation.turn_tolerance = parse_value(k, value)?,
            "train.mode" => self.train.mode = parse_value(k, value)?,
            "train.epochs" => self.train.epochs = parse_value(k, value)?,
            "train.batch_size" => self.train.batch_size = parse_value(k, value)?,
            "train.learning_rate" => self.train.learning_rate = parse_value(k, value)?,
            "train.weight_decay" => self.train.weight_decay = parse_value(k, value)?,
            "train.early_stop_patience" => self.train.early_stop_patience = parse_value(k, value)?,
            "train.validation_fraction" => self.train.validation_fraction = parse_value(k, value)?,
            "train.attack_steps" => self.train_attack_steps = parse_optional(k, value)?,
            "train.attack_step_fraction" => self.train_attack_step_fraction = parse_optional(k, value)?,
            "attack.epsilon" => self.attack.epsilon = parse_value(k, value)?,
            "attack.step_size" => self.attack.step_size = parse_optional(k, value)?,
            "attack.steps" => self.attack.steps = parse_value(k, value)?,
            "attack.random_start" => self.attack.random_start = parse_bool(k, value)?,
            "loss.lambda" => self.loss.lambda = parse_value(k, value)?,
            "loss.hidden_stages" => {
                self.loss.hidden_stages = match value {
                    "all" => HiddenStages::All,
                    "final" => HiddenStages::Final,
                    list => HiddenStages::Only(parse_list(k, list)?),
                }
            }
            "eval.batch" => self.eval_batch = parse_value(k, value)?,
            "eval.seeds" => self.seeds = parse_list(k, value)?,
            "eval.lambdas" => self.lambdas = parse_list(k, value)?,
            "eval.epsilons" => self.epsilons = parse_list(k, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every `section.key` with its current value in file syntax, in file
    /// order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.annotation;
        let t = &self.train;
        vec![
            ("run.seed", self.seed.to_string()),
            (
                "run.output_dir",
                self.output_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
            ),
            ("run.threads", self.threads.to_string()),
            ("scene.height", self.scene.height.to_string()),
            ("scene.width", self.scene.width.to_string()),
            ("scene.channels", self.scene.channels.to_string()),
            ("scene.noise_sigma", format!("{:?}", self.scene.noise_sigma)),
            ("split.n_positive", self.n_positive.to_string()),
            ("split.n_challenging", self.n_challenging.to_string()),
            ("model.stage_widths", join(&self.stage_widths)),
            ("model.decoder_width", self.decoder_width.to_string()),
            ("annotation.velocity_threshold", format!("{:?}", a.velocity_threshold)),
            ("annotation.window", format!("{:?}", a.window)),
            ("annotation.clearance", format!("{:?}", a.clearance)),
            ("annotation.turn_tolerance", format!("{:?}", a.turn_tolerance)),
            ("train.mode", t.mode.as_str().to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.learning_rate", format!("{:?}", t.learning_rate)),
            ("train.weight_decay", format!("{:?}", t.weight_decay)),
            ("train.early_stop_patience", t.early_stop_patience.to_string()),
            ("train.validation_fraction", format!("{:?}", t.validation_fraction)),
            ("train.attack_steps", optional(&self.train_attack_steps)),
            ("train.attack_step_fraction", optional(&self.train_attack_step_fraction)),
            ("attack.epsilon", format!("{:?}", self.attack.epsilon)),
            ("attack.step_size", optional(&self.attack.step_size)),
            ("attack.steps", self.attack.steps.to_string()),
            ("attack.random_start", self.attack.random_start.to_string()),
            ("loss.lambda", format!("{:?}", self.loss.lambda)),
            ("loss.hidden_stages", hidden_stages_str(&self.loss.hidden_stages)),
            ("eval.batch", self.eval_batch.to_string()),
            ("eval.seeds", join(&self.seeds)),
            ("eval.lambdas", join(&self.lambdas)),
            ("eval.epsilons", join(&self.epsilons)),
        ]
    }

    /// The fully resolved configuration in the file format; parsing it
    /// gives back `self` exactly.
    pub fn to_ini(&self) -> String {
        let mut o = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let (sec, name) = key.split_once('.').expect("qualified key");
            if sec != section {
                if !section.is_empty() {
                    o.push('\n');
                }
                let _ = writeln!(o, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(o, "{name} = {value}");
        }
        o
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model_config(self.seed).validate()?;
        self.annotation.validate()?;
        self.train_config().validate()?;
        self.attack.validate()?;
        self.loss.validate()?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("eval.batch must be at least 1".into()));
        }
        Ok(())
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            n_positive: self.n_positive,
            n_challenging: self.n_challenging,
            seed: self.seed,
            scene: self.scene.clone(),
        }
    }

    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            height: self.scene.height,
            width: self.scene.width,
            channels_in: self.scene.channels,
            stage_widths: self.stage_widths.clone(),
            decoder_width: self.decoder_width,
            seed,
        }
    }

    /// Training recipe with the training-attack overrides applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut attack = AttackConfig {
            seed: self.seed,
            ..self.attack.clone()
        };
        if let Some(steps) = self.train_attack_steps {
            attack.steps = steps;
        }
        if let Some(f) = self.train_attack_step_fraction {
            attack.step_size = Some(f * attack.epsilon);
        }
        TrainConfig {
            attack,
            loss: self.loss.clone(),
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn eval_attack(&self) -> AttackConfig {
        AttackConfig {
            seed: self.seed,
            ..self.attack.clone()
        }
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model_config(self.seed),
            train: self.train_config(),
            eval_attack: self.eval_attack(),
            eval_batch: self.eval_batch,
        }
    }

    pub fn with_mode(mut self, mode: TrainMode) -> Self {
        self.train.mode = mode;
        self
    }
}

const SECTIONS: [&str; 9] = [
    "run",
    "scene",
    "split",
    "model",
    "annotation",
    "train",
    "attack",
    "loss",
    "eval",
];
