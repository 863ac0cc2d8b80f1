//! Plain-text `key = value` run configuration.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PriorHyper};
use crate::nets::NetConfig;
use crate::odeint::Method;
use crate::rank::{LambdaReference, Thresholds};
use crate::train::{Objective, TrainConfig};

/// Everything needed to reproduce a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub rank: usize,
    pub latent_dim: usize,
    pub fourier_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub dynamics_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub method: Method,
    /// `None` = default step.
    pub step: Option<f64>,
    pub lr: f64,
    pub variational_lr: Option<f64>,
    pub epochs: usize,
    /// `None` = full batch.
    pub batch: Option<usize>,
    pub seed: u64,
    pub a0: f64,
    pub b0: f64,
    pub c0: f64,
    pub d0: f64,
    pub init_variational: f64,
    pub objective: Objective,
    pub clip_norm: f64,
    pub prune_power: f64,
    pub prune_lambda: f64,
    pub lambda_reference: LambdaReference,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        let train = TrainConfig::default();
        let thr = Thresholds::default();
        Self {
            rank: net.rank,
            latent_dim: net.latent_dim,
            fourier_dim: net.fourier_dim,
            encoder_hidden: net.encoder_hidden,
            dynamics_hidden: net.dynamics_hidden,
            decoder_hidden: net.decoder_hidden,
            method: train.method,
            step: train.step,
            lr: train.lr,
            variational_lr: train.variational_lr,
            epochs: train.epochs,
            batch: train.batch_size,
            seed: train.seed,
            a0: 1e-6,
            b0: 1e-6,
            c0: 1e-6,
            d0: 1e-6,
            init_variational: 1e-6,
            objective: train.objective,
            clip_norm: train.clip_norm,
            prune_power: thr.power,
            prune_lambda: thr.lambda,
            lambda_reference: thr.reference,
            checkpoint_every: 0,
        }
    }
}

fn bad(key: &str, value: &str, why: impl fmt::Display) -> Error {
    Error::Config(format!("{key} = {value}: {why}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn widths(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|w| num(key, w.trim())).collect()
}

fn show_widths(w: &[usize]) -> String {
    if w.is_empty() {
        return "none".into();
    }
    w.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: [&'static str; 25] = [
        "rank",
        "latent_dim",
        "fourier_dim",
        "encoder_hidden",
        "dynamics_hidden",
        "decoder_hidden",
        "method",
        "step",
        "lr",
        "variational_lr",
        "epochs",
        "batch",
        "seed",
        "a0",
        "b0",
        "c0",
        "d0",
        "init_variational",
        "objective",
        "clip_norm",
        "prune_power",
        "prune_lambda",
        "lambda_reference",
        "checkpoint_every",
        "fard",
    ];

    /// Sets one key. `fard = on|off` is shorthand for the objective.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "rank" => self.rank = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "fourier_dim" => self.fourier_dim = num(key, value)?,
            "encoder_hidden" => self.encoder_hidden = widths(key, value)?,
            "dynamics_hidden" => self.dynamics_hidden = widths(key, value)?,
            "decoder_hidden" => self.decoder_hidden = widths(key, value)?,
            "method" => self.method = num(key, value)?,
            "step" => self.step = if value == "auto" { None } else { Some(num(key, value)?) },
            "lr" => self.lr = num(key, value)?,
            "variational_lr" => self.variational_lr = if value == "same" { None } else { Some(num(key, value)?) },
            "epochs" => self.epochs = num(key, value)?,
            "batch" => self.batch = if value == "full" { None } else { Some(num(key, value)?) },
            "seed" => self.seed = num(key, value)?,
            "a0" => self.a0 = num(key, value)?,
            "b0" => self.b0 = num(key, value)?,
            "c0" => self.c0 = num(key, value)?,
            "d0" => self.d0 = num(key, value)?,
            "init_variational" => self.init_variational = num(key, value)?,
            "objective" => self.objective = num(key, value)?,
            "fard" => {
                self.objective = match value {
                    "on" | "true" => Objective::Elbo,
                    "off" | "false" => Objective::RmseOnly,
                    _ => return Err(bad(key, value, "expected on or off")),
                }
            }
            "clip_norm" => self.clip_norm = num(key, value)?,
            "prune_power" => self.prune_power = num(key, value)?,
            "prune_lambda" => self.prune_lambda = num(key, value)?,
            "lambda_reference" => self.lambda_reference = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses the file format: one `key = value` per line, `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.latent_dim == 0 || self.fourier_dim == 0 {
            return Err(Error::Config("rank, latent_dim and fourier_dim must be >= 1".into()));
        }
        for (name, v) in [("a0", self.a0), ("b0", self.b0), ("c0", self.c0), ("d0", self.d0)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.init_variational > 0.0 && self.init_variational.is_finite()) {
            return Err(Error::Config("init_variational must be > 0".into()));
        }
        if !(self.prune_power >= 0.0 && self.prune_lambda >= 0.0) {
            return Err(Error::Config("prune thresholds must be >= 0".into()));
        }
        self.train_config().validate()
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            fourier_dim: self.fourier_dim,
            latent_dim: self.latent_dim,
            rank: self.rank,
            encoder_hidden: self.encoder_hidden.clone(),
            dynamics_hidden: self.dynamics_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
        }
    }

    pub fn model_config(&self, modes: usize) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(modes, self.net_config());
        m.prior = PriorHyper::uniform(self.rank, self.a0, self.b0, self.c0, self.d0)?;
        m.init_variational = self.init_variational;
        m.seed = self.seed;
        Ok(m)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch,
            seed: self.seed,
            method: self.method,
            step: self.step,
            objective: self.objective,
            clip_norm: self.clip_norm,
            variational_lr: self.variational_lr,
        }
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            power: self.prune_power,
            lambda: self.prune_lambda,
            reference: self.lambda_reference,
        }
    }
}

impl fmt::Display for RunConfig {
    /// The file format; parsing it back yields an equal config.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rank = {}", self.rank)?;
        writeln!(f, "latent_dim = {}", self.latent_dim)?;
        writeln!(f, "fourier_dim = {}", self.fourier_dim)?;
        writeln!(f, "encoder_hidden = {}", show_widths(&self.encoder_hidden))?;
        writeln!(f, "dynamics_hidden = {}", show_widths(&self.dynamics_hidden))?;
        writeln!(f, "decoder_hidden = {}", show_widths(&self.decoder_hidden))?;
        writeln!(f, "method = {}", self.method)?;
        match self.step {
            Some(h) => writeln!(f, "step = {h:e}")?,
            None => writeln!(f, "step = auto")?,
        }
        writeln!(f, "lr = {:e}", self.lr)?;
        match self.variational_lr {
            Some(v) => writeln!(f, "variational_lr = {v:e}")?,
            None => writeln!(f, "variational_lr = same")?,
        }
        writeln!(f, "epochs = {}", self.epochs)?;
        match self.batch {
            Some(b) => writeln!(f, "batch = {b}")?,
            None => writeln!(f, "batch = full")?,
        }
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "a0 = {:e}", self.a0)?;
        writeln!(f, "b0 = {:e}", self.b0)?;
        writeln!(f, "c0 = {:e}", self.c0)?;
        writeln!(f, "d0 = {:e}", self.d0)?;
        writeln!(f, "init_variational = {:e}", self.init_variational)?;
        writeln!(f, "objective = {}", self.objective)?;
        writeln!(f, "clip_norm = {:e}", self.clip_norm)?;
        writeln!(f, "prune_power = {:e}", self.prune_power)?;
        writeln!(f, "prune_lambda = {:e}", self.prune_lambda)?;
        writeln!(f, "lambda_reference = {}", self.lambda_reference)?;
        writeln!(f, "checkpoint_every = {}", self.checkpoint_every)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_string()).unwrap(), c);
        assert_eq!(c.rank, 5);
        assert_eq!(c.fourier_dim, 32);
        assert_eq!(c.epochs, 2000);
        assert_eq!(c.train_config(), TrainConfig::default());
        assert_eq!(c.thresholds(), Thresholds::default());
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# tiny\nrank = 2  # components\nencoder_hidden = 8,4\nbatch = 32\nstep = 0.01\nfard = off\n";
        let mut c = RunConfig::parse(text).unwrap();
        assert_eq!(c.rank, 2);
        assert_eq!(c.encoder_hidden, vec![8, 4]);
        assert_eq!(c.batch, Some(32));
        assert_eq!(c.step, Some(0.01));
        assert_eq!(c.objective, Objective::RmseOnly);
        c.apply(&["rank=3", "method=euler", "decoder_hidden=none"]).unwrap();
        assert_eq!((c.rank, c.method), (3, Method::Euler));
        assert!(c.decoder_hidden.is_empty());
        assert_eq!(RunConfig::parse(&c.to_string()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("nope = 1").is_err());
        assert!(RunConfig::parse("rank").is_err());
        assert!(RunConfig::parse("rank = x").is_err());
        assert!(RunConfig::parse("rank = 0").is_err());
        assert!(RunConfig::parse("lr = -1").is_err());
        assert!(RunConfig::parse("a0 = 0").is_err());
        assert!(RunConfig::default().apply(&["rank"]).is_err());
        let err = RunConfig::parse("rank = 2\nmethod = leapfrog").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
