//! Experiment configuration: a flat, diff-able `key = value` text format
//! with `[section]` headers. Every key has a documented default; unknown
//! sections or keys are rejected so typos fail loudly. Command-line
//! overrides use the same `section.key` namespace.

use crate::backbone::BackboneConfig;
use crate::data::SynthConfig;
use crate::metrics::DEFAULT_DENSE_K;
use crate::objectives::LossWeights;
use crate::trainer::TrainConfig;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown config section [{0}]")]
    UnknownSection(String),
    #[error("unknown config key {section}.{key}")]
    UnknownKey { section: String, key: String },
    #[error("bad value for {section}.{key}: {value:?} ({msg})")]
    BadValue {
        section: String,
        key: String,
        value: String,
        msg: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Where the dataset lives and which split the read-only commands use.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dir: String,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KGridConfig {
    /// K values 1..=dense_max are evaluated exhaustively; beyond that the
    /// grid grows geometrically.
    pub dense_max: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Sufficiency threshold used for MSK and the evidence summary.
    pub tau: f64,
    /// Checkpoint file, resolved relative to the output directory when
    /// the path is relative.
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlayConfig {
    /// How many top-ranked tiles get the highlight outline.
    pub top_k: usize,
}

/// Dimensions for the finite-difference gradient audit. Small on purpose:
/// central differences over every parameter are quadratic-ish in model size.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub tiles: usize,
    pub num_classes: usize,
    /// Maximum allowed relative error between analytic and numeric
    /// gradients.
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AppConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub backbone: BackboneConfig,
    pub loss: LossWeights,
    pub train_baseline: TrainConfig,
    pub train_evidence: TrainConfig,
    pub kgrid: KGridConfig,
    pub eval: EvalConfig,
    pub overlay: OverlayConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            data: DataConfig {
                dir: "data".into(),
                split: "test".into(),
            },
            synth: SynthConfig::default(),
            backbone: BackboneConfig::default(),
            loss: LossWeights::default(),
            train_baseline: TrainConfig::baseline_defaults(),
            train_evidence: TrainConfig::evidence_defaults(),
            kgrid: KGridConfig {
                dense_max: DEFAULT_DENSE_K,
            },
            eval: EvalConfig {
                tau: 0.90,
                checkpoint: "reamil.ckpt".into(),
            },
            overlay: OverlayConfig { top_k: 4 },
            gradcheck: GradcheckConfig {
                d_in: 16,
                d_model: 16,
                heads: 2,
                layers: 1,
                tiles: 6,
                num_classes: 2,
                tolerance: 1e-3,
            },
        }
    }
}

fn parse_usize(v: &str) -> Result<usize, String> {
    v.parse().map_err(|_| "expected a non-negative integer".into())
}

fn parse_f64(v: &str) -> Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| "expected a number".to_string())?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err("expected a finite number".into())
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

impl AppConfig {
    /// Sets one `section.key` to a raw string value, parsing and
    /// validating the type. This is the single write path shared by file
    /// parsing and `--set` overrides.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |msg: String| ConfigError::BadValue {
            section: section.to_string(),
            key: key.to_string(),
            value: value.to_string(),
            msg,
        };
        macro_rules! num {
            ($parser:ident, $slot:expr) => {{
                $slot = $parser(value).map_err(bad)?;
                return Ok(());
            }};
        }
        match section {
            "data" => match key {
                "dir" => {
                    self.data.dir = value.to_string();
                    return Ok(());
                }
                "split" => {
                    if !matches!(value, "train" | "val" | "test") {
                        return Err(bad("expected train, val, or test".into()));
                    }
                    self.data.split = value.to_string();
                    return Ok(());
                }
                _ => {}
            },
            "synth" => match key {
                "train_bags" => num!(parse_usize, self.synth.train_bags),
                "val_bags" => num!(parse_usize, self.synth.val_bags),
                "test_bags" => num!(parse_usize, self.synth.test_bags),
                "tiles_per_bag" => num!(parse_usize, self.synth.tiles_per_bag),
                "feature_dim" => num!(parse_usize, self.synth.feature_dim),
                "num_classes" => num!(parse_usize, self.synth.num_classes),
                "evidence_tiles" => num!(parse_usize, self.synth.evidence_tiles),
                "evidence_radius" => num!(parse_f64, self.synth.evidence_radius),
                "counter_tiles" => num!(parse_usize, self.synth.counter_tiles),
                "counter_scale" => num!(parse_f64, self.synth.counter_scale),
                "signal_magnitude" => num!(parse_f64, self.synth.signal_magnitude),
                "noise_scale" => num!(parse_f64, self.synth.noise_scale),
                "coord_extent" => num!(parse_f64, self.synth.coord_extent),
                _ => {}
            },
            "backbone" => match key {
                "d_in" => num!(parse_usize, self.backbone.d_in),
                "d_model" => num!(parse_usize, self.backbone.d_model),
                "heads" => num!(parse_usize, self.backbone.heads),
                "layers" => num!(parse_usize, self.backbone.layers),
                "num_classes" => num!(parse_usize, self.backbone.num_classes),
                "use_positional" => num!(parse_bool, self.backbone.use_positional),
                _ => {}
            },
            "loss" => match key {
                "tau" => num!(parse_f64, self.loss.tau),
                "beta" => num!(parse_f64, self.loss.beta),
                "lambda_suff" => num!(parse_f64, self.loss.lambda_suff),
                "lambda_excl" => num!(parse_f64, self.loss.lambda_excl),
                "lambda_contig" => num!(parse_f64, self.loss.lambda_contig),
                "lambda_budget" => num!(parse_f64, self.loss.lambda_budget),
                _ => {}
            },
            "train-baseline" => match key {
                "epochs" => num!(parse_usize, self.train_baseline.epochs),
                "lr" => num!(parse_f64, self.train_baseline.lr),
                "lr_floor" => num!(parse_f64, self.train_baseline.lr_floor),
                "weight_decay" => num!(parse_f64, self.train_baseline.weight_decay),
                "clip_norm" => num!(parse_f64, self.train_baseline.clip_norm),
                "grad_accum" => num!(parse_usize, self.train_baseline.grad_accum),
                "eval_every" => num!(parse_usize, self.train_baseline.eval_every),
                _ => {}
            },
            "train-evidence" => match key {
                "epochs" => num!(parse_usize, self.train_evidence.epochs),
                "lr" => num!(parse_f64, self.train_evidence.lr),
                "lr_floor" => num!(parse_f64, self.train_evidence.lr_floor),
                "weight_decay" => num!(parse_f64, self.train_evidence.weight_decay),
                "clip_norm" => num!(parse_f64, self.train_evidence.clip_norm),
                "grad_accum" => num!(parse_usize, self.train_evidence.grad_accum),
                "eval_every" => num!(parse_usize, self.train_evidence.eval_every),
                "temp_start" => num!(parse_f64, self.train_evidence.temp_start),
                "temp_end" => num!(parse_f64, self.train_evidence.temp_end),
                "select_z_weight" => num!(parse_f64, self.train_evidence.select_z_weight),
                "backbone_lr_scale" => num!(parse_f64, self.train_evidence.backbone_lr_scale),
                _ => {}
            },
            "kgrid" => match key {
                "dense_max" => num!(parse_usize, self.kgrid.dense_max),
                _ => {}
            },
            "eval" => match key {
                "tau" => num!(parse_f64, self.eval.tau),
                "checkpoint" => {
                    self.eval.checkpoint = value.to_string();
                    return Ok(());
                }
                _ => {}
            },
            "overlay" => match key {
                "top_k" => num!(parse_usize, self.overlay.top_k),
                _ => {}
            },
            "gradcheck" => match key {
                "d_in" => num!(parse_usize, self.gradcheck.d_in),
                "d_model" => num!(parse_usize, self.gradcheck.d_model),
                "heads" => num!(parse_usize, self.gradcheck.heads),
                "layers" => num!(parse_usize, self.gradcheck.layers),
                "tiles" => num!(parse_usize, self.gradcheck.tiles),
                "num_classes" => num!(parse_usize, self.gradcheck.num_classes),
                "tolerance" => num!(parse_f64, self.gradcheck.tolerance),
                _ => {}
            },
            _ => return Err(ConfigError::UnknownSection(section.to_string())),
        }
        Err(ConfigError::UnknownKey {
            section: section.to_string(),
            key: key.to_string(),
        })
    }

    /// Applies a `--set section.key=value` style override.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (section, name) = key.split_once('.').ok_or_else(|| ConfigError::Invalid(
            format!("override key {key:?} must look like section.key"),
        ))?;
        self.set(section.trim(), name.trim(), value.trim())
    }

    /// Parses a config document on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = AppConfig::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or(ConfigError::Parse {
                    line: lineno,
                    msg: "section header missing closing bracket".into(),
                })?;
                let name = name.trim().to_string();
                // Validate the section name eagerly so a typo'd empty
                // section still fails.
                let mut probe = AppConfig::default();
                match probe.set(&name, "\u{0}no-such-key\u{0}", "") {
                    Err(ConfigError::UnknownSection(s)) => {
                        return Err(ConfigError::UnknownSection(s))
                    }
                    _ => section = Some(name),
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Parse {
                line: lineno,
                msg: "expected key = value".into(),
            })?;
            let section = section.as_deref().ok_or(ConfigError::Parse {
                line: lineno,
                msg: "key appears before any [section] header".into(),
            })?;
            cfg.set(section, key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Loads a config file (or the defaults when `path` is `None`), then
    /// applies overrides and validates the result.
    pub fn load(
        path: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                AppConfig::from_text(&text)?
            }
            None => AppConfig::default(),
        };
        for (k, v) in overrides {
            cfg.apply_override(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The baseline-phase trainer config with the shared loss weights
    /// attached.
    pub fn baseline_train(&self) -> TrainConfig {
        let mut c = self.train_baseline.clone();
        c.loss = self.loss;
        c
    }

    /// The evidence-phase trainer config with the shared loss weights
    /// attached.
    pub fn evidence_train(&self) -> TrainConfig {
        let mut c = self.train_evidence.clone();
        c.loss = self.loss;
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        self.backbone
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.loss
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.baseline_train()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("train-baseline: {e}")))?;
        self.evidence_train()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("train-evidence: {e}")))?;
        self.synth
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("synth: {e}")))?;
        if self.kgrid.dense_max == 0 {
            return inv("kgrid.dense_max must be positive".into());
        }
        if !(self.eval.tau > 0.0 && self.eval.tau < 1.0) {
            return inv("eval.tau must lie in (0, 1)".into());
        }
        let g = &self.gradcheck;
        if g.d_in == 0 || g.d_model == 0 || g.heads == 0 || g.layers == 0 || g.tiles == 0 {
            return inv("gradcheck dimensions must be positive".into());
        }
        if g.d_model % g.heads != 0 {
            return inv("gradcheck.d_model must be divisible by gradcheck.heads".into());
        }
        if g.num_classes < 2 {
            return inv("gradcheck.num_classes must be at least 2".into());
        }
        if !(g.tolerance > 0.0) {
            return inv("gradcheck.tolerance must be positive".into());
        }
        Ok(())
    }

    /// Serializes the effective configuration as a parseable document
    /// (no comments). Used in run manifests so an experiment records the
    /// exact settings it ran with.
    pub fn to_text(&self) -> String {
        let d = self;
        let mut s = String::new();
        let _ = writeln!(s, "[data]");
        let _ = writeln!(s, "dir = {}", d.data.dir);
        let _ = writeln!(s, "split = {}", d.data.split);
        let _ = writeln!(s, "[synth]");
        let _ = writeln!(s, "train_bags = {}", d.synth.train_bags);
        let _ = writeln!(s, "val_bags = {}", d.synth.val_bags);
        let _ = writeln!(s, "test_bags = {}", d.synth.test_bags);
        let _ = writeln!(s, "tiles_per_bag = {}", d.synth.tiles_per_bag);
        let _ = writeln!(s, "feature_dim = {}", d.synth.feature_dim);
        let _ = writeln!(s, "num_classes = {}", d.synth.num_classes);
        let _ = writeln!(s, "evidence_tiles = {}", d.synth.evidence_tiles);
        let _ = writeln!(s, "evidence_radius = {}", d.synth.evidence_radius);
        let _ = writeln!(s, "counter_tiles = {}", d.synth.counter_tiles);
        let _ = writeln!(s, "counter_scale = {}", d.synth.counter_scale);
        let _ = writeln!(s, "signal_magnitude = {}", d.synth.signal_magnitude);
        let _ = writeln!(s, "noise_scale = {}", d.synth.noise_scale);
        let _ = writeln!(s, "coord_extent = {}", d.synth.coord_extent);
        let _ = writeln!(s, "[backbone]");
        let _ = writeln!(s, "d_in = {}", d.backbone.d_in);
        let _ = writeln!(s, "d_model = {}", d.backbone.d_model);
        let _ = writeln!(s, "heads = {}", d.backbone.heads);
        let _ = writeln!(s, "layers = {}", d.backbone.layers);
        let _ = writeln!(s, "num_classes = {}", d.backbone.num_classes);
        let _ = writeln!(s, "use_positional = {}", d.backbone.use_positional);
        let _ = writeln!(s, "[loss]");
        let _ = writeln!(s, "tau = {}", d.loss.tau);
        let _ = writeln!(s, "beta = {}", d.loss.beta);
        let _ = writeln!(s, "lambda_suff = {}", d.loss.lambda_suff);
        let _ = writeln!(s, "lambda_excl = {}", d.loss.lambda_excl);
        let _ = writeln!(s, "lambda_contig = {}", d.loss.lambda_contig);
        let _ = writeln!(s, "lambda_budget = {}", d.loss.lambda_budget);
        let _ = writeln!(s, "[train-baseline]");
        let _ = writeln!(s, "epochs = {}", d.train_baseline.epochs);
        let _ = writeln!(s, "lr = {}", d.train_baseline.lr);
        let _ = writeln!(s, "lr_floor = {}", d.train_baseline.lr_floor);
        let _ = writeln!(s, "weight_decay = {}", d.train_baseline.weight_decay);
        let _ = writeln!(s, "clip_norm = {}", d.train_baseline.clip_norm);
        let _ = writeln!(s, "grad_accum = {}", d.train_baseline.grad_accum);
        let _ = writeln!(s, "eval_every = {}", d.train_baseline.eval_every);
        let _ = writeln!(s, "[train-evidence]");
        let _ = writeln!(s, "epochs = {}", d.train_evidence.epochs);
        let _ = writeln!(s, "lr = {}", d.train_evidence.lr);
        let _ = writeln!(s, "lr_floor = {}", d.train_evidence.lr_floor);
        let _ = writeln!(s, "weight_decay = {}", d.train_evidence.weight_decay);
        let _ = writeln!(s, "clip_norm = {}", d.train_evidence.clip_norm);
        let _ = writeln!(s, "grad_accum = {}", d.train_evidence.grad_accum);
        let _ = writeln!(s, "eval_every = {}", d.train_evidence.eval_every);
        let _ = writeln!(s, "temp_start = {}", d.train_evidence.temp_start);
        let _ = writeln!(s, "temp_end = {}", d.train_evidence.temp_end);
        let _ = writeln!(s, "select_z_weight = {}", d.train_evidence.select_z_weight);
        let _ = writeln!(s, "backbone_lr_scale = {}", d.train_evidence.backbone_lr_scale);
        let _ = writeln!(s, "[kgrid]");
        let _ = writeln!(s, "dense_max = {}", d.kgrid.dense_max);
        let _ = writeln!(s, "[eval]");
        let _ = writeln!(s, "tau = {}", d.eval.tau);
        let _ = writeln!(s, "checkpoint = {}", d.eval.checkpoint);
        let _ = writeln!(s, "[overlay]");
        let _ = writeln!(s, "top_k = {}", d.overlay.top_k);
        let _ = writeln!(s, "[gradcheck]");
        let _ = writeln!(s, "d_in = {}", d.gradcheck.d_in);
        let _ = writeln!(s, "d_model = {}", d.gradcheck.d_model);
        let _ = writeln!(s, "heads = {}", d.gradcheck.heads);
        let _ = writeln!(s, "layers = {}", d.gradcheck.layers);
        let _ = writeln!(s, "tiles = {}", d.gradcheck.tiles);
        let _ = writeln!(s, "num_classes = {}", d.gradcheck.num_classes);
        let _ = writeln!(s, "tolerance = {}", d.gradcheck.tolerance);
        s
    }

    /// A complete, commented config document showing every key at its
    /// default value. Printed by `--help` and parseable as-is.
    pub fn reference_text() -> String {
        let d = AppConfig::default();
        let mut s = String::new();
        let _ = writeln!(s, "# Experiment configuration. Every key is shown at its default;");
        let _ = writeln!(s, "# omit any you do not need. Override single values on the command");
        let _ = writeln!(s, "# line with --set section.key=value. Random seeds come from the");
        let _ = writeln!(s, "# global --seed flag, not from this file.");
        let _ = writeln!(s);
        let _ = writeln!(s, "[data]");
        let _ = writeln!(s, "# dataset directory (written by synth, read by everything else)");
        let _ = writeln!(s, "dir = {}", d.data.dir);
        let _ = writeln!(s, "# split used by eval, kcurve, and overlay: train, val, or test");
        let _ = writeln!(s, "split = {}", d.data.split);
        let _ = writeln!(s);
        let _ = writeln!(s, "[synth]");
        let _ = writeln!(s, "train_bags = {}", d.synth.train_bags);
        let _ = writeln!(s, "val_bags = {}", d.synth.val_bags);
        let _ = writeln!(s, "test_bags = {}", d.synth.test_bags);
        let _ = writeln!(s, "tiles_per_bag = {}", d.synth.tiles_per_bag);
        let _ = writeln!(s, "feature_dim = {}", d.synth.feature_dim);
        let _ = writeln!(s, "num_classes = {}", d.synth.num_classes);
        let _ = writeln!(s, "# evidence tiles planted per bag, carrying the bag's class signal");
        let _ = writeln!(s, "evidence_tiles = {}", d.synth.evidence_tiles);
        let _ = writeln!(s, "# planted tiles cluster inside a disc of this radius");
        let _ = writeln!(s, "evidence_radius = {}", d.synth.evidence_radius);
        let _ = writeln!(s, "# weak off-class tiles per bag; the drop view stays class-informative");
        let _ = writeln!(s, "counter_tiles = {}", d.synth.counter_tiles);
        let _ = writeln!(s, "# counter-tile strength relative to signal_magnitude, in [0, 1)");
        let _ = writeln!(s, "counter_scale = {}", d.synth.counter_scale);
        let _ = writeln!(s, "signal_magnitude = {}", d.synth.signal_magnitude);
        let _ = writeln!(s, "noise_scale = {}", d.synth.noise_scale);
        let _ = writeln!(s, "coord_extent = {}", d.synth.coord_extent);
        let _ = writeln!(s);
        let _ = writeln!(s, "[backbone]");
        let _ = writeln!(s, "d_in = {}", d.backbone.d_in);
        let _ = writeln!(s, "d_model = {}", d.backbone.d_model);
        let _ = writeln!(s, "heads = {}", d.backbone.heads);
        let _ = writeln!(s, "layers = {}", d.backbone.layers);
        let _ = writeln!(s, "num_classes = {}", d.backbone.num_classes);
        let _ = writeln!(s, "use_positional = {}", d.backbone.use_positional);
        let _ = writeln!(s);
        let _ = writeln!(s, "[loss]");
        let _ = writeln!(s, "# sufficiency threshold on p_y(keep)");
        let _ = writeln!(s, "tau = {}", d.loss.tau);
        let _ = writeln!(s, "# exclusion ceiling on p_y(drop)");
        let _ = writeln!(s, "beta = {}", d.loss.beta);
        let _ = writeln!(s, "lambda_suff = {}", d.loss.lambda_suff);
        let _ = writeln!(s, "lambda_excl = {}", d.loss.lambda_excl);
        let _ = writeln!(s, "lambda_contig = {}", d.loss.lambda_contig);
        let _ = writeln!(s, "lambda_budget = {}", d.loss.lambda_budget);
        let _ = writeln!(s);
        let _ = writeln!(s, "[train-baseline]");
        let _ = writeln!(s, "epochs = {}", d.train_baseline.epochs);
        let _ = writeln!(s, "lr = {}", d.train_baseline.lr);
        let _ = writeln!(s, "lr_floor = {}", d.train_baseline.lr_floor);
        let _ = writeln!(s, "weight_decay = {}", d.train_baseline.weight_decay);
        let _ = writeln!(s, "clip_norm = {}", d.train_baseline.clip_norm);
        let _ = writeln!(s, "# bags averaged per optimizer step");
        let _ = writeln!(s, "grad_accum = {}", d.train_baseline.grad_accum);
        let _ = writeln!(s, "eval_every = {}", d.train_baseline.eval_every);
        let _ = writeln!(s);
        let _ = writeln!(s, "[train-evidence]");
        let _ = writeln!(s, "epochs = {}", d.train_evidence.epochs);
        let _ = writeln!(s, "lr = {}", d.train_evidence.lr);
        let _ = writeln!(s, "lr_floor = {}", d.train_evidence.lr_floor);
        let _ = writeln!(s, "weight_decay = {}", d.train_evidence.weight_decay);
        let _ = writeln!(s, "clip_norm = {}", d.train_evidence.clip_norm);
        let _ = writeln!(s, "grad_accum = {}", d.train_evidence.grad_accum);
        let _ = writeln!(s, "eval_every = {}", d.train_evidence.eval_every);
        let _ = writeln!(s, "# gate temperature anneals exponentially between these");
        let _ = writeln!(s, "temp_start = {}", d.train_evidence.temp_start);
        let _ = writeln!(s, "temp_end = {}", d.train_evidence.temp_end);
        let _ = writeln!(s, "# best-checkpoint score is val AUC minus this times mean gate");
        let _ = writeln!(s, "select_z_weight = {}", d.train_evidence.select_z_weight);
        let _ = writeln!(s, "# lr multiplier for all but the selection head (1 = uniform lr)");
        let _ = writeln!(s, "backbone_lr_scale = {}", d.train_evidence.backbone_lr_scale);
        let _ = writeln!(s);
        let _ = writeln!(s, "[kgrid]");
        let _ = writeln!(s, "# K = 1..=dense_max checked exhaustively, then geometric steps");
        let _ = writeln!(s, "dense_max = {}", d.kgrid.dense_max);
        let _ = writeln!(s);
        let _ = writeln!(s, "[eval]");
        let _ = writeln!(s, "tau = {}", d.eval.tau);
        let _ = writeln!(s, "# relative paths resolve against the output directory");
        let _ = writeln!(s, "checkpoint = {}", d.eval.checkpoint);
        let _ = writeln!(s);
        let _ = writeln!(s, "[overlay]");
        let _ = writeln!(s, "top_k = {}", d.overlay.top_k);
        let _ = writeln!(s);
        let _ = writeln!(s, "[gradcheck]");
        let _ = writeln!(s, "d_in = {}", d.gradcheck.d_in);
        let _ = writeln!(s, "d_model = {}", d.gradcheck.d_model);
        let _ = writeln!(s, "heads = {}", d.gradcheck.heads);
        let _ = writeln!(s, "layers = {}", d.gradcheck.layers);
        let _ = writeln!(s, "tiles = {}", d.gradcheck.tiles);
        let _ = writeln!(s, "num_classes = {}", d.gradcheck.num_classes);
        let _ = writeln!(s, "tolerance = {}", d.gradcheck.tolerance);
        s
    }
}
