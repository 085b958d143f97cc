//! Flat `key = value` configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `channels` | 32 | feature width C at every pyramid level |
//! | `levels` | 4 | pyramid levels (fixed at 4) |
//! | `heads` | 2 | attention heads M |
//! | `points` | 4 | sampling points K per head and level |
//! | `enc_layers` / `dec_layers` | 2 / 2 | transformer depth |
//! | `ffn_dim` | 4·C | feed-forward width |
//! | `queries` | 50 | object queries (top-k proposals) |
//! | `classes` | 3 | object classes |
//! | `image_size` | 128 | square input side, multiple of 64 |
//! | `lambda_cls`, `lambda_l1`, `lambda_riou` | 5, 5, 8 | cost and loss weights |
//! | `opg`, `opr`, `ibr`, `riou_cost`, `angle_branch`, `focal_match` | on, on, on, on, off, off | ablation switches |
//! | `lr`, `lr_drop_frac` | 5e-4, 0.2 | learning rate; ×0.1 for the final fraction of steps |
//! | `weight_decay`, `clip_norm` | 1e-4, 0.1 | AdamW decay, gradient clip |
//! | `steps`, `batch`, `seed` | 20000, 2, 42 | schedule and determinism |
//! | `data`, `holdout` | — , 100 | dataset dir; trailing scenes held out of training |
//! | `resume` | — | checkpoint to continue training from |
//! | `out`, `log` | `model.ckpt`, `train.log` | checkpoint and metrics log paths |
//! | `eval_every`, `ckpt_every` | 0, 0 | periodic held-out eval / checkpoint (0 = never) |
//! | `conf_floor` | 0.05 | minimum score kept for evaluation |
//! | `time_budget_secs` | 0 | stop early once exceeded (0 = unlimited) |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Architecture and ablation switches; everything needed to rebuild a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub levels: usize,
    pub heads: usize,
    pub points: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub queries: usize,
    pub classes: usize,
    pub image_size: usize,
    pub opg: bool,
    pub opr: bool,
    pub ibr: bool,
    pub angle_branch: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            levels: 4,
            heads: 2,
            points: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 128,
            queries: 50,
            classes: 3,
            image_size: 128,
            opg: true,
            opr: true,
            ibr: true,
            angle_branch: false,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels != 4 {
            return Err(Error::Config(format!("levels must be 4, got {}", self.levels)));
        }
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::Config(format!("channels must be even and > 0, got {}", self.channels)));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide channels ({})",
                self.heads, self.channels
            )));
        }
        if self.points == 0 || self.queries == 0 || self.classes == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("points, queries, classes and ffn_dim must be > 0".into()));
        }
        if self.image_size == 0 || self.image_size % 64 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 64, got {}",
                self.image_size
            )));
        }
        if self.opr && !self.opg {
            return Err(Error::Config("opr requires opg (refinement aligns to oriented proposals)".into()));
        }
        Ok(())
    }

    /// Total number of encoder tokens for this image size.
    pub fn token_count(&self) -> usize {
        (0..self.levels)
            .map(|l| {
                let s = self.image_size.div_ceil(8 << l);
                s * s
            })
            .sum()
    }

    /// Numeric encoding stored next to the weights in checkpoints.
    pub fn to_pairs(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("channels", self.channels as f64),
            ("levels", self.levels as f64),
            ("heads", self.heads as f64),
            ("points", self.points as f64),
            ("enc_layers", self.enc_layers as f64),
            ("dec_layers", self.dec_layers as f64),
            ("ffn_dim", self.ffn_dim as f64),
            ("queries", self.queries as f64),
            ("classes", self.classes as f64),
            ("image_size", self.image_size as f64),
            ("opg", self.opg as u8 as f64),
            ("opr", self.opr as u8 as f64),
            ("ibr", self.ibr as u8 as f64),
            ("angle_branch", self.angle_branch as u8 as f64),
            ("seed", self.seed as f64),
        ]
    }

    pub fn from_pairs(pairs: &[(String, f64)]) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in pairs {
            let u = *v as usize;
            let b = *v != 0.0;
            match k.as_str() {
                "channels" => cfg.channels = u,
                "levels" => cfg.levels = u,
                "heads" => cfg.heads = u,
                "points" => cfg.points = u,
                "enc_layers" => cfg.enc_layers = u,
                "dec_layers" => cfg.dec_layers = u,
                "ffn_dim" => cfg.ffn_dim = u,
                "queries" => cfg.queries = u,
                "classes" => cfg.classes = u,
                "image_size" => cfg.image_size = u,
                "opg" => cfg.opg = b,
                "opr" => cfg.opr = b,
                "ibr" => cfg.ibr = b,
                "angle_branch" => cfg.angle_branch = b,
                "seed" => cfg.seed = *v as u64,
                other => return Err(Error::Format(format!("unknown model key {other}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Matching-cost and loss weights with their switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchCostConfig {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_riou: f64,
    pub use_cls: bool,
    pub use_l1: bool,
    pub use_riou: bool,
    /// Focal-style classification cost instead of −log p.
    pub focal_cls: bool,
}

impl Default for MatchCostConfig {
    fn default() -> Self {
        MatchCostConfig {
            lambda_cls: 5.0,
            lambda_l1: 5.0,
            lambda_riou: 8.0,
            use_cls: true,
            use_l1: true,
            use_riou: true,
            focal_cls: false,
        }
    }
}

impl MatchCostConfig {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda_cls, self.lambda_l1, self.lambda_riou];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {ws:?}")));
        }
        Ok(())
    }

    /// All three weights multiplied by `k`.
    pub fn scaled(self, k: f64) -> Self {
        MatchCostConfig {
            lambda_cls: self.lambda_cls * k,
            lambda_l1: self.lambda_l1 * k,
            lambda_riou: self.lambda_riou * k,
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub cost: MatchCostConfig,
    pub lr: f64,
    pub lr_drop_frac: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub steps: usize,
    pub batch: usize,
    pub data: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    pub holdout: usize,
    pub out: PathBuf,
    pub log: PathBuf,
    pub eval_every: usize,
    pub ckpt_every: usize,
    pub conf_floor: f64,
    pub time_budget_secs: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            cost: MatchCostConfig::default(),
            lr: 5e-4,
            lr_drop_frac: 0.2,
            weight_decay: 1e-4,
            clip_norm: 0.1,
            steps: 20_000,
            batch: 2,
            data: None,
            resume: None,
            holdout: 100,
            out: PathBuf::from("model.ckpt"),
            log: PathBuf::from("train.log"),
            eval_every: 0,
            ckpt_every: 0,
            conf_floor: 0.05,
            time_budget_secs: 0.0,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut ffn_set = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let m = &mut cfg.model;
            match k {
                "channels" => m.channels = parse_num(k, v)?,
                "levels" => m.levels = parse_num(k, v)?,
                "heads" => m.heads = parse_num(k, v)?,
                "points" => m.points = parse_num(k, v)?,
                "enc_layers" => m.enc_layers = parse_num(k, v)?,
                "dec_layers" => m.dec_layers = parse_num(k, v)?,
                "ffn_dim" => {
                    m.ffn_dim = parse_num(k, v)?;
                    ffn_set = true;
                }
                "queries" => m.queries = parse_num(k, v)?,
                "classes" => m.classes = parse_num(k, v)?,
                "image_size" => m.image_size = parse_num(k, v)?,
                "opg" => m.opg = parse_bool(k, v)?,
                "opr" => m.opr = parse_bool(k, v)?,
                "ibr" => m.ibr = parse_bool(k, v)?,
                "angle_branch" => m.angle_branch = parse_bool(k, v)?,
                "seed" => m.seed = parse_num(k, v)?,
                "lambda_cls" => cfg.cost.lambda_cls = parse_num(k, v)?,
                "lambda_l1" => cfg.cost.lambda_l1 = parse_num(k, v)?,
                "lambda_riou" => cfg.cost.lambda_riou = parse_num(k, v)?,
                "riou_cost" => cfg.cost.use_riou = parse_bool(k, v)?,
                "focal_match" => cfg.cost.focal_cls = parse_bool(k, v)?,
                "lr" => cfg.lr = parse_num(k, v)?,
                "lr_drop_frac" => cfg.lr_drop_frac = parse_num(k, v)?,
                "weight_decay" => cfg.weight_decay = parse_num(k, v)?,
                "clip_norm" => cfg.clip_norm = parse_num(k, v)?,
                "steps" => cfg.steps = parse_num(k, v)?,
                "batch" => cfg.batch = parse_num(k, v)?,
                "data" => cfg.data = Some(PathBuf::from(v)),
                "resume" => cfg.resume = Some(PathBuf::from(v)),
                "holdout" => cfg.holdout = parse_num(k, v)?,
                "out" => cfg.out = PathBuf::from(v),
                "log" => cfg.log = PathBuf::from(v),
                "eval_every" => cfg.eval_every = parse_num(k, v)?,
                "ckpt_every" => cfg.ckpt_every = parse_num(k, v)?,
                "conf_floor" => cfg.conf_floor = parse_num(k, v)?,
                "time_budget_secs" => cfg.time_budget_secs = parse_num(k, v)?,
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        if !ffn_set {
            cfg.model.ffn_dim = 4 * cfg.model.channels;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        // relative paths resolve against the config file's directory
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [cfg.data.as_mut(), cfg.resume.as_mut()].into_iter().flatten() {
            fix(p);
        }
        fix(&mut cfg.out);
        fix(&mut cfg.log);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.cost.validate()?;
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.lr_drop_frac) {
            return Err(Error::Config("lr must be > 0 and lr_drop_frac in [0, 1]".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.conf_floor) {
            return Err(Error::Config("conf_floor must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let drop_at = ((1.0 - self.lr_drop_frac) * self.steps as f64).round() as usize;
        if step >= drop_at {
            self.lr * 0.1
        } else {
            self.lr
        }
    }

    /// Renders back to the text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.model.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        let c = &self.cost;
        let _ = writeln!(s, "lambda_cls = {}\nlambda_l1 = {}\nlambda_riou = {}", c.lambda_cls, c.lambda_l1, c.lambda_riou);
        let _ = writeln!(s, "riou_cost = {}\nfocal_match = {}", c.use_riou, c.focal_cls);
        let _ = writeln!(s, "lr = {}\nlr_drop_frac = {}\nweight_decay = {}\nclip_norm = {}", self.lr, self.lr_drop_frac, self.weight_decay, self.clip_norm);
        let _ = writeln!(s, "steps = {}\nbatch = {}\nholdout = {}", self.steps, self.batch, self.holdout);
        if let Some(d) = &self.data {
            let _ = writeln!(s, "data = {}", d.display());
        }
        if let Some(r) = &self.resume {
            let _ = writeln!(s, "resume = {}", r.display());
        }
        let _ = writeln!(s, "out = {}\nlog = {}", self.out.display(), self.log.display());
        let _ = writeln!(s, "eval_every = {}\nckpt_every = {}\nconf_floor = {}\ntime_budget_secs = {}", self.eval_every, self.ckpt_every, self.conf_floor, self.time_budget_secs);
        s
    }
}
