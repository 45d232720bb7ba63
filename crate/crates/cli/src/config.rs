//! Line-oriented `section.key = value` experiment configuration.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` expects {expected}, got `{value}`")]
    Type { line: usize, key: String, expected: &'static str, value: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataKind {
    Bars,
    InvertedBars,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    Trail,
    Red,
    Rex,
    Bypass,
    Poison,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriggerKind {
    InSample,
    Mode,
    Ood,
    Masked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetKind {
    Checkerboard,
    InvertedBars,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Inspection {
    Smi,
    DmiActivation,
    DmiGradient,
    BfOi,
    ObOi,
    RexAwareOi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SanitizeMethod {
    Prune,
    Distill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub kind: DataKind,
    pub side: usize,
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub latent: usize,
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSection {
    pub strategy: StrategyKind,
    pub trigger: TriggerKind,
    /// One attack per trigger seed.
    pub trigger_seeds: Vec<u64>,
    pub ood_value: f64,
    pub free_dims: usize,
    pub target: TargetKind,
    pub lambda: f64,
    /// When non-empty, `attack` runs one attack per λ instead.
    pub lambda_sweep: Vec<f64>,
    pub tau_fid: f64,
    pub max_steps: usize,
    pub min_steps: usize,
    pub early_stop: bool,
    pub lr: f64,
    pub batch: usize,
    pub red_layers: Vec<usize>,
    pub init_scale: f64,
    pub poison_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseSection {
    pub inspections: Vec<Inspection>,
    /// Model file to inspect, relative to the output directory.
    pub model: String,
    pub closest_n: usize,
    pub ob_restarts: usize,
    pub ob_steps: usize,
    pub ob_lr: f64,
    pub rex_radius: f64,
    pub dmi_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanitizeSection {
    pub method: SanitizeMethod,
    pub model: String,
    pub fraction: f64,
    pub probe_n: usize,
    pub distill_steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSection {
    pub exp_samples: usize,
    pub frechet_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub defense: DefenseSection,
    pub sanitize: SanitizeSection,
    pub report: ReportSection,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSection { kind: DataKind::Bars, side: 8, n: 4096, seed: 7 },
            model: ModelSection {
                latent: 16,
                generator_hidden: vec![64, 64],
                discriminator_hidden: vec![64, 32],
            },
            train: TrainSection { steps: 2000, batch: 64, lr: 1e-3, beta1: 0.5, seed: 0 },
            attack: AttackSection {
                strategy: StrategyKind::Red,
                trigger: TriggerKind::InSample,
                trigger_seeds: vec![0],
                ood_value: 4.0,
                free_dims: 8,
                target: TargetKind::Checkerboard,
                lambda: 1.0,
                lambda_sweep: Vec::new(),
                tau_fid: 0.01,
                max_steps: 20_000,
                min_steps: 0,
                early_stop: true,
                lr: 1e-3,
                batch: 64,
                red_layers: Vec::new(),
                init_scale: 1.0,
                poison_fraction: 0.05,
                seed: 0,
            },
            defense: DefenseSection {
                inspections: vec![Inspection::Smi, Inspection::BfOi, Inspection::ObOi],
                model: "*".into(),
                closest_n: 100_000,
                ob_restarts: 5,
                ob_steps: 2000,
                ob_lr: 0.05,
                rex_radius: 7.0,
                dmi_samples: 10_000,
                seed: 0,
            },
            sanitize: SanitizeSection {
                method: SanitizeMethod::Prune,
                model: "red_in_sample_0.dgml".into(),
                fraction: 0.5,
                probe_n: 10_000,
                distill_steps: 4000,
                seed: 0,
            },
            report: ReportSection { exp_samples: 10_000, frechet_samples: 2000 },
            output_dir: "out".into(),
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn keyword<T: Copy + PartialEq>(table: &[(&'static str, T)], v: T) -> &'static str {
    table.iter().find(|(_, x)| *x == v).map(|(n, _)| *n).expect("every variant is named")
}

const DATA_KINDS: &[(&str, DataKind)] = &[("bars", DataKind::Bars), ("inverted_bars", DataKind::InvertedBars)];
const STRATEGIES: &[(&str, StrategyKind)] = &[
    ("trail", StrategyKind::Trail),
    ("red", StrategyKind::Red),
    ("rex", StrategyKind::Rex),
    ("bypass", StrategyKind::Bypass),
    ("poison", StrategyKind::Poison),
];
const TRIGGERS: &[(&str, TriggerKind)] = &[
    ("in_sample", TriggerKind::InSample),
    ("mode", TriggerKind::Mode),
    ("ood", TriggerKind::Ood),
    ("masked", TriggerKind::Masked),
];
const TARGETS: &[(&str, TargetKind)] =
    &[("checkerboard", TargetKind::Checkerboard), ("inverted_bars", TargetKind::InvertedBars)];
const INSPECTIONS: &[(&str, Inspection)] = &[
    ("smi", Inspection::Smi),
    ("dmi_activation", Inspection::DmiActivation),
    ("dmi_gradient", Inspection::DmiGradient),
    ("bf_oi", Inspection::BfOi),
    ("ob_oi", Inspection::ObOi),
    ("rex_aware_oi", Inspection::RexAwareOi),
];
const METHODS: &[(&str, SanitizeMethod)] =
    &[("prune", SanitizeMethod::Prune), ("distill", SanitizeMethod::Distill)];

struct Line<'a> {
    no: usize,
    key: &'a str,
    value: &'a str,
}

impl Line<'_> {
    fn err(&self, expected: &'static str) -> ConfigError {
        ConfigError::Type { line: self.no, key: self.key.into(), expected, value: self.value.into() }
    }

    fn parse<T: std::str::FromStr>(&self, expected: &'static str) -> Result<T, ConfigError> {
        self.value.parse().map_err(|_| self.err(expected))
    }

    fn float(&self) -> Result<f64, ConfigError> {
        self.parse::<f64>("a number").and_then(|v| if v.is_finite() { Ok(v) } else { Err(self.err("a finite number")) })
    }

    fn list<T: std::str::FromStr>(&self, expected: &'static str) -> Result<Vec<T>, ConfigError> {
        if self.value.is_empty() {
            return Ok(Vec::new());
        }
        self.value.split(',').map(|s| s.trim().parse().map_err(|_| self.err(expected))).collect()
    }

    fn keyword<T: Copy>(&self, table: &[(&'static str, T)], expected: &'static str) -> Result<T, ConfigError> {
        table.iter().find(|(n, _)| *n == self.value).map(|(_, v)| *v).ok_or_else(|| self.err(expected))
    }

    fn keywords<T: Copy>(&self, table: &[(&'static str, T)], expected: &'static str) -> Result<Vec<T>, ConfigError> {
        if self.value.is_empty() {
            return Ok(Vec::new());
        }
        self.value
            .split(',')
            .map(|s| table.iter().find(|(n, _)| *n == s.trim()).map(|(_, v)| *v).ok_or_else(|| self.err(expected)))
            .collect()
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    fn assign(&mut self, l: &Line<'_>) -> Result<(), ConfigError> {
        match l.key {
            "data.kind" => self.data.kind = l.keyword(DATA_KINDS, "bars or inverted_bars")?,
            "data.side" => self.data.side = l.parse("an integer")?,
            "data.n" => self.data.n = l.parse("an integer")?,
            "data.seed" => self.data.seed = l.parse("an integer")?,
            "model.latent" => self.model.latent = l.parse("an integer")?,
            "model.generator_hidden" => self.model.generator_hidden = l.list("a list of integers")?,
            "model.discriminator_hidden" => self.model.discriminator_hidden = l.list("a list of integers")?,
            "train.steps" => self.train.steps = l.parse("an integer")?,
            "train.batch" => self.train.batch = l.parse("an integer")?,
            "train.lr" => self.train.lr = l.float()?,
            "train.beta1" => self.train.beta1 = l.float()?,
            "train.seed" => self.train.seed = l.parse("an integer")?,
            "attack.strategy" => self.attack.strategy = l.keyword(STRATEGIES, "trail, red, rex, bypass or poison")?,
            "attack.trigger" => self.attack.trigger = l.keyword(TRIGGERS, "in_sample, mode, ood or masked")?,
            "attack.trigger_seeds" => self.attack.trigger_seeds = l.list("a list of integers")?,
            "attack.ood_value" => self.attack.ood_value = l.float()?,
            "attack.free_dims" => self.attack.free_dims = l.parse("an integer")?,
            "attack.target" => self.attack.target = l.keyword(TARGETS, "checkerboard or inverted_bars")?,
            "attack.lambda" => self.attack.lambda = l.float()?,
            "attack.lambda_sweep" => self.attack.lambda_sweep = l.list("a list of numbers")?,
            "attack.tau_fid" => self.attack.tau_fid = l.float()?,
            "attack.max_steps" => self.attack.max_steps = l.parse("an integer")?,
            "attack.min_steps" => self.attack.min_steps = l.parse("an integer")?,
            "attack.early_stop" => self.attack.early_stop = l.parse("true or false")?,
            "attack.lr" => self.attack.lr = l.float()?,
            "attack.batch" => self.attack.batch = l.parse("an integer")?,
            "attack.red_layers" => self.attack.red_layers = l.list("a list of integers")?,
            "attack.init_scale" => self.attack.init_scale = l.float()?,
            "attack.poison_fraction" => self.attack.poison_fraction = l.float()?,
            "attack.seed" => self.attack.seed = l.parse("an integer")?,
            "defense.inspections" => {
                self.defense.inspections =
                    l.keywords(INSPECTIONS, "smi, dmi_activation, dmi_gradient, bf_oi, ob_oi or rex_aware_oi")?
            }
            "defense.model" => self.defense.model = l.value.into(),
            "defense.closest_n" => self.defense.closest_n = l.parse("an integer")?,
            "defense.ob_restarts" => self.defense.ob_restarts = l.parse("an integer")?,
            "defense.ob_steps" => self.defense.ob_steps = l.parse("an integer")?,
            "defense.ob_lr" => self.defense.ob_lr = l.float()?,
            "defense.rex_radius" => self.defense.rex_radius = l.float()?,
            "defense.dmi_samples" => self.defense.dmi_samples = l.parse("an integer")?,
            "defense.seed" => self.defense.seed = l.parse("an integer")?,
            "sanitize.method" => self.sanitize.method = l.keyword(METHODS, "prune or distill")?,
            "sanitize.model" => self.sanitize.model = l.value.into(),
            "sanitize.fraction" => self.sanitize.fraction = l.float()?,
            "sanitize.probe_n" => self.sanitize.probe_n = l.parse("an integer")?,
            "sanitize.distill_steps" => self.sanitize.distill_steps = l.parse("an integer")?,
            "sanitize.seed" => self.sanitize.seed = l.parse("an integer")?,
            "report.exp_samples" => self.report.exp_samples = l.parse("an integer")?,
            "report.frechet_samples" => self.report.frechet_samples = l.parse("an integer")?,
            "output.dir" => self.output_dir = l.value.into(),
            _ => return Err(ConfigError::UnknownKey { line: l.no, key: l.key.into() }),
        }
        Ok(())
    }

    /// Applies a single `key = value` override, reported as line 0.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.assign(&Line { no: 0, key: key.trim(), value: value.trim() })
    }

    /// Overrides every run seed except the dataset's.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.attack.seed = seed;
        self.defense.seed = seed;
        self.sanitize.seed = seed;
    }

    /// Every key with its resolved value, in a form `parse_config` accepts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("data.kind", keyword(DATA_KINDS, self.data.kind).into());
        put("data.side", self.data.side.to_string());
        put("data.n", self.data.n.to_string());
        put("data.seed", self.data.seed.to_string());
        put("model.latent", self.model.latent.to_string());
        put("model.generator_hidden", list(&self.model.generator_hidden));
        put("model.discriminator_hidden", list(&self.model.discriminator_hidden));
        put("train.steps", self.train.steps.to_string());
        put("train.batch", self.train.batch.to_string());
        put("train.lr", format!("{:?}", self.train.lr));
        put("train.beta1", format!("{:?}", self.train.beta1));
        put("train.seed", self.train.seed.to_string());
        let a = &self.attack;
        put("attack.strategy", keyword(STRATEGIES, a.strategy).into());
        put("attack.trigger", keyword(TRIGGERS, a.trigger).into());
        put("attack.trigger_seeds", list(&a.trigger_seeds));
        put("attack.ood_value", format!("{:?}", a.ood_value));
        put("attack.free_dims", a.free_dims.to_string());
        put("attack.target", keyword(TARGETS, a.target).into());
        put("attack.lambda", format!("{:?}", a.lambda));
        put("attack.lambda_sweep", a.lambda_sweep.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","));
        put("attack.tau_fid", format!("{:?}", a.tau_fid));
        put("attack.max_steps", a.max_steps.to_string());
        put("attack.min_steps", a.min_steps.to_string());
        put("attack.early_stop", a.early_stop.to_string());
        put("attack.lr", format!("{:?}", a.lr));
        put("attack.batch", a.batch.to_string());
        put("attack.red_layers", list(&a.red_layers));
        put("attack.init_scale", format!("{:?}", a.init_scale));
        put("attack.poison_fraction", format!("{:?}", a.poison_fraction));
        put("attack.seed", a.seed.to_string());
        let d = &self.defense;
        put(
            "defense.inspections",
            d.inspections.iter().map(|&i| keyword(INSPECTIONS, i)).collect::<Vec<_>>().join(","),
        );
        put("defense.model", d.model.clone());
        put("defense.closest_n", d.closest_n.to_string());
        put("defense.ob_restarts", d.ob_restarts.to_string());
        put("defense.ob_steps", d.ob_steps.to_string());
        put("defense.ob_lr", format!("{:?}", d.ob_lr));
        put("defense.rex_radius", format!("{:?}", d.rex_radius));
        put("defense.dmi_samples", d.dmi_samples.to_string());
        put("defense.seed", d.seed.to_string());
        let z = &self.sanitize;
        put("sanitize.method", keyword(METHODS, z.method).into());
        put("sanitize.model", z.model.clone());
        put("sanitize.fraction", format!("{:?}", z.fraction));
        put("sanitize.probe_n", z.probe_n.to_string());
        put("sanitize.distill_steps", z.distill_steps.to_string());
        put("sanitize.seed", z.seed.to_string());
        put("report.exp_samples", self.report.exp_samples.to_string());
        put("report.frechet_samples", self.report.frechet_samples.to_string());
        put("output.dir", self.output_dir.clone());
        s
    }
}

/// Parses a configuration. Blank lines and `#` comments are ignored; every
/// other line must be `section.key = value`. Unset keys keep their defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        if content.trim().is_empty() {
            continue;
        }
        let Some(eq) = content.find('=') else {
            let column = content.len() - content.trim_start().len() + 1;
            return Err(ConfigError::Parse { line: no, column, message: "expected `section.key = value`".into() });
        };
        let key = content[..eq].trim();
        let value = content[eq + 1..].trim();
        if key.is_empty() || !key.contains('.') || key.contains(char::is_whitespace) {
            let column = content.len() - content.trim_start().len() + 1;
            return Err(ConfigError::Parse { line: no, column, message: format!("malformed key `{key}`") });
        }
        cfg.assign(&Line { no, key, value })?;
    }
    Ok(cfg)
}
