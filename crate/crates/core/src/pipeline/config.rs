//! Pipeline configuration: flat `key = value` files, CLI-flag overrides, and
//! an environment-variable default for the seed (precedence: flags > file >
//! environment > built-in).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ZReduce;
use crate::proxy::ProxyTask;
use crate::psm::{MaskTask, MiddleCluster};

/// Environment variable supplying the default seed.
pub const SEED_ENV: &str = "PSM_SEED";

/// Reads the default seed from the environment, falling back to 42. An unset
/// variable is fine; a set-but-unparsable one is an error.
pub fn env_seed() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map_err(|_| {
            Error::InvalidArgument(format!("{SEED_ENV} must be a u64, got `{s}`"))
        }),
        Err(_) => Ok(42),
    }
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub task: MaskTask,
    pub proxy: ProxyTask,
    /// Gradient-tap depth for the PSM (1 = shallowest block).
    pub depth: usize,
    pub z_reduce: ZReduce,
    /// Fusion weight (Eq. 5); `None` means the task default (seg 2.5, det 4).
    pub beta: Option<f64>,
    /// Voronoi-branch weight in the partial cross-entropy (Eq. 8).
    pub lambda: f64,
    /// Number of K-Means piles. The pseudo-mask rule needs exactly 3.
    pub k: usize,
    pub seed: u64,
    pub proxy_epochs: usize,
    pub train_epochs: usize,
    /// Base learning rate for both training stages.
    pub lr: f64,
    /// Optional per-stage learning rates; fall back to `lr`.
    pub proxy_lr: Option<f64>,
    pub train_lr: Option<f64>,
    /// K-Means restarts per image.
    pub restarts: usize,
    pub middle: MiddleCluster,
    /// Seed-disk radius for the Voronoi label map.
    pub voronoi_radius: usize,
    /// Detection classes (score-map channels).
    pub classes: usize,
    /// Foreground threshold for segmentation inference.
    pub threshold: f32,
    /// Half-width of the local-extremum window (Eq. 7).
    pub window_radius: usize,
    /// Minimum peak score for detection.
    pub min_score: f32,
    /// Accept ties in the extremum window (lexicographically-first wins).
    pub tie_break: bool,
    /// Point-match radius for detection evaluation.
    pub match_radius: f64,
    /// Whether the run ends with an evaluation stage (the only stage allowed
    /// to open ground truth).
    pub eval: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            task: MaskTask::Segmentation,
            proxy: ProxyTask::Similarity,
            depth: 1,
            z_reduce: ZReduce::Sum,
            beta: None,
            lambda: 0.5,
            k: 3,
            seed: 42,
            proxy_epochs: 2,
            train_epochs: 2,
            lr: 1e-4,
            proxy_lr: None,
            train_lr: None,
            restarts: 10,
            middle: MiddleCluster::Background,
            voronoi_radius: 2,
            classes: 2,
            threshold: 0.5,
            window_radius: 3,
            min_score: 0.3,
            tie_break: false,
            match_radius: 6.0,
            eval: true,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value for `{key}`: `{value}`")))
}

impl PipelineConfig {
    /// Defaults with the seed drawn from the environment.
    pub fn default_with_env() -> Result<Self> {
        Ok(PipelineConfig {
            seed: env_seed()?,
            ..PipelineConfig::default()
        })
    }

    /// Applies one `key = value` pair (shared by the file parser and the CLI
    /// flag layer so both go through identical parsing).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task" => self.task = MaskTask::parse(value)?,
            "proxy" => self.proxy = ProxyTask::parse(value)?,
            "depth" => self.depth = parse_as(key, value)?,
            "z_reduce" => self.z_reduce = ZReduce::parse(value)?,
            "beta" => self.beta = Some(parse_as(key, value)?),
            "lambda" => self.lambda = parse_as(key, value)?,
            "k" => self.k = parse_as(key, value)?,
            "seed" => self.seed = parse_as(key, value)?,
            "proxy_epochs" => self.proxy_epochs = parse_as(key, value)?,
            "train_epochs" => self.train_epochs = parse_as(key, value)?,
            "lr" => self.lr = parse_as(key, value)?,
            "proxy_lr" => self.proxy_lr = Some(parse_as(key, value)?),
            "train_lr" => self.train_lr = Some(parse_as(key, value)?),
            "restarts" => self.restarts = parse_as(key, value)?,
            "middle" => self.middle = MiddleCluster::parse(value)?,
            "voronoi_radius" => self.voronoi_radius = parse_as(key, value)?,
            "classes" => self.classes = parse_as(key, value)?,
            "threshold" => self.threshold = parse_as(key, value)?,
            "window_radius" => self.window_radius = parse_as(key, value)?,
            "min_score" => self.min_score = parse_as(key, value)?,
            "tie_break" => self.tie_break = parse_as(key, value)?,
            "match_radius" => self.match_radius = parse_as(key, value)?,
            "eval" => self.eval = parse_as(key, value)?,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key `{other}`"
                )))
            }
        }
        Ok(())
    }

    /// Parses a flat `key = value` config file (`#` starts a comment).
    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "{}:{}: expected `key = value`, got `{raw}`",
                    path.display(),
                    ln + 1
                ))
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Fusion weight after task defaults (seg 2.5, det 4).
    pub fn effective_beta(&self) -> f64 {
        self.beta.unwrap_or(match self.task {
            MaskTask::Segmentation => 2.5,
            MaskTask::MulticlassDetection => 4.0,
        })
    }

    pub fn effective_proxy_lr(&self) -> f64 {
        self.proxy_lr.unwrap_or(self.lr)
    }

    pub fn effective_train_lr(&self) -> f64 {
        self.train_lr.unwrap_or(self.lr)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(1..=4).contains(&self.depth) {
            return bad(format!("depth must be in 1..4, got {}", self.depth));
        }
        if self.effective_beta() < 0.0 {
            return bad(format!("beta must be >= 0, got {}", self.effective_beta()));
        }
        if self.lambda < 0.0 {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.k < 2 {
            return bad(format!("k must be >= 2, got {}", self.k));
        }
        if self.proxy_epochs == 0 || self.train_epochs == 0 {
            return bad("epochs must be >= 1".to_string());
        }
        for (name, lr) in [
            ("lr", self.lr),
            ("proxy_lr", self.effective_proxy_lr()),
            ("train_lr", self.effective_train_lr()),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {lr}"));
            }
        }
        if self.restarts == 0 {
            return bad("restarts must be >= 1".to_string());
        }
        if self.voronoi_radius == 0 {
            return bad("voronoi_radius must be >= 1".to_string());
        }
        if self.classes == 0 {
            return bad("classes must be >= 1".to_string());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!(
                "threshold must lie in (0,1), got {}",
                self.threshold
            ));
        }
        if self.window_radius == 0 {
            return bad("window_radius must be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.min_score) {
            return bad(format!("min_score must lie in [0,1), got {}", self.min_score));
        }
        if !(self.match_radius > 0.0) {
            return bad(format!(
                "match_radius must be positive, got {}",
                self.match_radius
            ));
        }
        Ok(())
    }

    /// Serializes the effective configuration as `key = value` lines — the
    /// diffable experiment record echoed into each run directory.
    pub fn to_kv_lines(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("task", self.task.as_str().to_string());
        put("proxy", self.proxy.as_str().to_string());
        put("depth", self.depth.to_string());
        put("z_reduce", self.z_reduce.as_str().to_string());
        put("beta", self.effective_beta().to_string());
        put("lambda", self.lambda.to_string());
        put("k", self.k.to_string());
        put("seed", self.seed.to_string());
        put("proxy_epochs", self.proxy_epochs.to_string());
        put("train_epochs", self.train_epochs.to_string());
        put("lr", self.lr.to_string());
        put("proxy_lr", self.effective_proxy_lr().to_string());
        put("train_lr", self.effective_train_lr().to_string());
        put("restarts", self.restarts.to_string());
        put(
            "middle",
            match self.middle {
                MiddleCluster::Background => "background".to_string(),
                MiddleCluster::Ignore => "ignore".to_string(),
            },
        );
        put("voronoi_radius", self.voronoi_radius.to_string());
        put("classes", self.classes.to_string());
        put("threshold", self.threshold.to_string());
        put("window_radius", self.window_radius.to_string());
        put("min_score", self.min_score.to_string());
        put("tie_break", self.tie_break.to_string());
        put("match_radius", self.match_radius.to_string());
        put("eval", self.eval.to_string());
        s
    }
}
