//! Flat `section.key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::dynamics::DynamicsConfig;
use crate::error::{Error, Result};
use crate::latents::{COLOR_DIMS, TAG_DIM};
use crate::objective::{LossWeights, ReadoutConfig, TrainConfig};
use crate::render::DEFAULT_RESOLUTION;
use crate::sim::{EpisodeConfig, Variant};

/// Dataset split sizes for `gen-data`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Ball carrying the tag channel in the encoded latents.
    pub tag_ball: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: 2000,
            val: 100,
            test: 100,
            tag_ball: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub frames: usize,
    pub batch: usize,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            frames: 4,
            batch: 2,
            eps: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub context: usize,
    pub generate: usize,
    pub resolution: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            context: 10,
            generate: 40,
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

/// Every tunable of a run. All fields have defaults; unknown keys are errors.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub sim: EpisodeConfig,
    pub data: DataConfig,
    pub model: DynamicsConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub readout: ReadoutConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sim: EpisodeConfig {
                num_frames: 20,
                ..EpisodeConfig::default()
            },
            data: DataConfig::default(),
            model: DynamicsConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            readout: ReadoutConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value '{value}' for key '{key}'"))),
    }
}

impl RunConfig {
    /// All recognized keys, in file order.
    pub const KEYS: &'static [&'static str] = &[
        "sim.num_balls",
        "sim.num_frames",
        "sim.variant",
        "sim.radius",
        "sim.speed",
        "data.train",
        "data.val",
        "data.test",
        "data.tag_ball",
        "model.d_model",
        "model.n_heads",
        "model.n_layers",
        "model.d_ff",
        "model.k",
        "model.d_what",
        "model.c",
        "model.dropout",
        "model.window",
        "loss.what",
        "loss.where",
        "loss.depth",
        "loss.pres",
        "train.lr",
        "train.batch_size",
        "train.steps",
        "train.clip_norm",
        "train.eval_interval",
        "train.seq_len",
        "train.micro_batch",
        "train.deterministic",
        "readout.lr",
        "readout.batch_size",
        "readout.steps",
        "readout.eval_interval",
        "readout.withhold",
        "readout.ball",
        "readout.l1_weight",
        "eval.context",
        "eval.generate",
        "render.resolution",
        "gradcheck.frames",
        "gradcheck.batch",
        "gradcheck.eps",
        "gradcheck.tolerance",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "sim.num_balls" => self.sim.num_balls = parse(key, v)?,
            "sim.num_frames" => self.sim.num_frames = parse(key, v)?,
            "sim.variant" => self.sim.variant = Variant::from_str(v)?,
            "sim.radius" => self.sim.radius = parse(key, v)?,
            "sim.speed" => self.sim.speed = parse(key, v)?,
            "data.train" => self.data.train = parse(key, v)?,
            "data.val" => self.data.val = parse(key, v)?,
            "data.test" => self.data.test = parse(key, v)?,
            "data.tag_ball" => {
                self.data.tag_ball = match v {
                    "none" | "" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.n_heads" => self.model.n_heads = parse(key, v)?,
            "model.n_layers" => self.model.n_layers = parse(key, v)?,
            "model.d_ff" => self.model.d_ff = parse(key, v)?,
            "model.k" => self.model.k = parse(key, v)?,
            "model.d_what" => self.model.d_what = parse(key, v)?,
            "model.c" => self.model.c = parse(key, v)?,
            "model.dropout" => self.model.dropout = parse(key, v)?,
            "model.window" => self.model.window = parse(key, v)?,
            "loss.what" => self.loss.what = parse(key, v)?,
            "loss.where" => self.loss.where_ = parse(key, v)?,
            "loss.depth" => self.loss.depth = parse(key, v)?,
            "loss.pres" => self.loss.pres = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, v)?,
            "train.eval_interval" => self.train.eval_interval = parse(key, v)?,
            "train.seq_len" => self.train.seq_len = parse(key, v)?,
            "train.micro_batch" => self.train.micro_batch = parse(key, v)?,
            "train.deterministic" => self.train.deterministic = parse_bool(key, v)?,
            "readout.lr" => self.readout.train.lr = parse(key, v)?,
            "readout.batch_size" => self.readout.train.batch_size = parse(key, v)?,
            "readout.steps" => self.readout.train.steps = parse(key, v)?,
            "readout.eval_interval" => self.readout.train.eval_interval = parse(key, v)?,
            "readout.withhold" => self.readout.withhold = parse(key, v)?,
            "readout.ball" => self.readout.ball = parse(key, v)?,
            "readout.l1_weight" => self.readout.l1_weight = parse(key, v)?,
            "eval.context" => self.eval.context = parse(key, v)?,
            "eval.generate" => self.eval.generate = parse(key, v)?,
            "render.resolution" => self.eval.resolution = parse(key, v)?,
            "gradcheck.frames" => self.gradcheck.frames = parse(key, v)?,
            "gradcheck.batch" => self.gradcheck.batch = parse(key, v)?,
            "gradcheck.eps" => self.gradcheck.eps = parse(key, v)?,
            "gradcheck.tolerance" => self.gradcheck.tolerance = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let s = match key {
            "sim.num_balls" => self.sim.num_balls.to_string(),
            "sim.num_frames" => self.sim.num_frames.to_string(),
            "sim.variant" => self.sim.variant.to_string(),
            "sim.radius" => self.sim.radius.to_string(),
            "sim.speed" => self.sim.speed.to_string(),
            "data.train" => self.data.train.to_string(),
            "data.val" => self.data.val.to_string(),
            "data.test" => self.data.test.to_string(),
            "data.tag_ball" => self.data.tag_ball.map_or("none".into(), |b| b.to_string()),
            "model.d_model" => self.model.d_model.to_string(),
            "model.n_heads" => self.model.n_heads.to_string(),
            "model.n_layers" => self.model.n_layers.to_string(),
            "model.d_ff" => self.model.d_ff.to_string(),
            "model.k" => self.model.k.to_string(),
            "model.d_what" => self.model.d_what.to_string(),
            "model.c" => self.model.c.to_string(),
            "model.dropout" => self.model.dropout.to_string(),
            "model.window" => self.model.window.to_string(),
            "loss.what" => self.loss.what.to_string(),
            "loss.where" => self.loss.where_.to_string(),
            "loss.depth" => self.loss.depth.to_string(),
            "loss.pres" => self.loss.pres.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.steps" => self.train.steps.to_string(),
            "train.clip_norm" => self.train.clip_norm.to_string(),
            "train.eval_interval" => self.train.eval_interval.to_string(),
            "train.seq_len" => self.train.seq_len.to_string(),
            "train.micro_batch" => self.train.micro_batch.to_string(),
            "train.deterministic" => self.train.deterministic.to_string(),
            "readout.lr" => self.readout.train.lr.to_string(),
            "readout.batch_size" => self.readout.train.batch_size.to_string(),
            "readout.steps" => self.readout.train.steps.to_string(),
            "readout.eval_interval" => self.readout.train.eval_interval.to_string(),
            "readout.withhold" => self.readout.withhold.to_string(),
            "readout.ball" => self.readout.ball.to_string(),
            "readout.l1_weight" => self.readout.l1_weight.to_string(),
            "eval.context" => self.eval.context.to_string(),
            "eval.generate" => self.eval.generate.to_string(),
            "render.resolution" => self.eval.resolution.to_string(),
            "gradcheck.frames" => self.gradcheck.frames.to_string(),
            "gradcheck.batch" => self.gradcheck.batch.to_string(),
            "gradcheck.eps" => self.gradcheck.eps.to_string(),
            "gradcheck.tolerance" => self.gradcheck.tolerance.to_string(),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        };
        Ok(s)
    }

    /// Apply `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", no + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// Smallest `what` width holding the colors, plus the tag channel when set.
    pub fn min_d_what(&self) -> usize {
        if self.data.tag_ball.is_some() {
            TAG_DIM + 1
        } else {
            COLOR_DIMS
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.model.d_what < self.min_d_what() {
            return Err(Error::Config(format!(
                "model.d_what = {} is below the {} channels the encoder needs (data.tag_ball = {})",
                self.model.d_what,
                self.min_d_what(),
                self.get("data.tag_ball")?
            )));
        }
        if let Some(b) = self.data.tag_ball {
            if b >= self.sim.num_balls {
                return Err(Error::Config(format!("data.tag_ball = {b} but only {} balls", self.sim.num_balls)));
            }
        }
        if self.sim.num_balls > self.model.k {
            return Err(Error::Config(format!(
                "{} balls do not fit in model.k = {} slots",
                self.sim.num_balls, self.model.k
            )));
        }
        if self.eval.context == 0 || self.eval.resolution == 0 {
            return Err(Error::Config("eval.context and render.resolution must be positive".into()));
        }
        if self.gradcheck.frames == 0 || self.gradcheck.batch == 0 || !(self.gradcheck.eps > 0.0) {
            return Err(Error::Config("gradcheck.frames, gradcheck.batch and gradcheck.eps must be positive".into()));
        }
        Ok(())
    }
}
