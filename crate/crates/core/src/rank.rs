//! Post-hoc rank analysis: component power, posterior λ statistics, and the
//! pruning decision.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::model::{CatteModel, VariationalState};
use crate::params::ParamId;

/// What "large E[λ_r]" is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaReference {
    /// The smallest E[λ_r], i.e. the most relevant component.
    #[default]
    Min,
    /// The median E[λ_r]; cannot prune more than half of the components.
    Median,
}

impl FromStr for LambdaReference {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(Self::Min),
            "median" => Ok(Self::Median),
            other => Err(Error::Config(format!("unknown lambda reference '{other}'"))),
        }
    }
}

impl fmt::Display for LambdaReference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Min => "min",
            Self::Median => "median",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// Prune only if P_r < power · max P.
    pub power: f64,
    /// Prune only if E[λ_r] > lambda · reference.
    pub lambda: f64,
    pub reference: LambdaReference,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            power: 1e-2,
            lambda: 10.0,
            reference: LambdaReference::Min,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    /// E[λ_r] = α_r/β_r.
    pub lambda_mean: Vec<f64>,
    /// β_r/α_r, the reciprocal of E[λ_r].
    pub inv_lambda_ratio: Vec<f64>,
    /// E[1/λ_r] = β_r/(α_r − 1); undefined unless α_r > 1.
    pub inv_lambda_mean: Vec<Option<f64>>,
    pub power: Vec<f64>,
    /// Zero-based ranks kept.
    pub active: Vec<usize>,
    pub thresholds: Thresholds,
}

impl RankReport {
    pub fn revealed_rank(&self) -> usize {
        self.active.len()
    }

    pub fn rank(&self) -> usize {
        self.power.len()
    }

    pub fn relative_power(&self) -> Vec<f64> {
        let max = self.power.iter().copied().fold(0.0, f64::max);
        self.power.iter().map(|p| if max > 0.0 { p / max } else { 0.0 }).collect()
    }

    /// Columns: rank, lambda_mean, inv_lambda_ratio, inv_lambda_mean,
    /// power, relative_power, active. Ranks are one-based.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "rank",
            "lambda_mean",
            "inv_lambda_ratio",
            "inv_lambda_mean",
            "power",
            "relative_power",
            "active",
        ])?;
        let rel = self.relative_power();
        for r in 0..self.rank() {
            w.write_record([
                (r + 1).to_string(),
                self.lambda_mean[r].to_string(),
                self.inv_lambda_ratio[r].to_string(),
                self.inv_lambda_mean[r].map_or_else(|| "undefined".to_string(), |x| x.to_string()),
                self.power[r].to_string(),
                rel[r].to_string(),
                self.active.contains(&r).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let rel = self.relative_power();
        let _ = writeln!(s, "revealed rank: {} of {}", self.revealed_rank(), self.rank());
        let _ = writeln!(
            s,
            "thresholds: power < {} x max, E[lambda] > {} x {}",
            self.thresholds.power, self.thresholds.lambda, self.thresholds.reference
        );
        let _ = writeln!(
            s,
            "{:>4}  {:>12}  {:>12}  {:>12}  {:>12}  {:>10}  active",
            "r", "E[lambda]", "beta/alpha", "E[1/lambda]", "power", "rel.power"
        );
        for r in 0..self.rank() {
            let inv = self.inv_lambda_mean[r].map_or_else(|| "undefined".to_string(), |x| format!("{x:.4e}"));
            let _ = writeln!(
                s,
                "{:>4}  {:>12.4e}  {:>12.4e}  {:>12}  {:>12.4e}  {:>10.3e}  {}",
                r + 1,
                self.lambda_mean[r],
                self.inv_lambda_ratio[r],
                inv,
                self.power[r],
                rel[r],
                if self.active.contains(&r) { "yes" } else { "no" }
            );
        }
        s
    }
}

/// P_r = Σ_n Σ_k (g_r^k(i_k^n, t_n))².
pub fn component_power(model: &CatteModel, data: &ObservationSet) -> Result<Vec<f64>> {
    power_from_factors(&model.factors(data)?, model.rank())
}

pub fn power_from_factors(gs: &[Vec<Vec<f64>>], rank: usize) -> Result<Vec<f64>> {
    let mut p = vec![0.0; rank];
    for g in gs {
        for v in g {
            if v.len() != rank {
                return Err(Error::Degenerate("factor vector has the wrong rank".into()));
            }
            for (acc, x) in p.iter_mut().zip(v) {
                *acc += x * x;
            }
        }
    }
    Ok(p)
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rank r is pruned iff its power is small relative to the strongest
/// component and its E[λ_r] is large relative to the reference.
pub fn reveal_rank(vs: &VariationalState, power: &[f64], thresholds: Thresholds) -> Result<RankReport> {
    if power.len() != vs.rank() || power.is_empty() {
        return Err(Error::Degenerate("power and variational state differ in rank".into()));
    }
    let lambda_mean = vs.lambda_mean();
    let inv_lambda_ratio: Vec<f64> = vs.alpha.iter().zip(&vs.beta).map(|(a, b)| b / a).collect();
    let inv_lambda_mean = vs
        .alpha
        .iter()
        .zip(&vs.beta)
        .map(|(&a, &b)| (a > 1.0).then(|| b / (a - 1.0)))
        .collect();
    let max_power = power.iter().copied().fold(0.0, f64::max);
    let reference = match thresholds.reference {
        LambdaReference::Min => lambda_mean.iter().copied().fold(f64::INFINITY, f64::min),
        LambdaReference::Median => median(&lambda_mean),
    };
    let active: Vec<usize> = (0..power.len())
        .filter(|&r| {
            let weak = power[r] < thresholds.power * max_power;
            let shrunk = lambda_mean[r] > thresholds.lambda * reference;
            !(weak && shrunk)
        })
        .collect();
    if active.is_empty() {
        return Err(Error::Degenerate("every component would be pruned".into()));
    }
    Ok(RankReport {
        lambda_mean,
        inv_lambda_ratio,
        inv_lambda_mean,
        power: power.to_vec(),
        active,
        thresholds,
    })
}

/// Full analysis of a trained model on `data`.
pub fn rank_report(model: &CatteModel, data: &ObservationSet, thresholds: Thresholds) -> Result<RankReport> {
    reveal_rank(&model.variational(), &component_power(model, data)?, thresholds)
}

fn select_cols(data: &[f64], rows: usize, cols: usize, keep: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * keep.len());
    for r in 0..rows {
        for &c in keep {
            out.push(data[r * cols + c]);
        }
    }
    out
}

/// Restricts the model to the `active` ranks: decoder output columns, the
/// λ posterior and its prior.
pub fn prune(model: &CatteModel, active: &[usize]) -> Result<CatteModel> {
    let r = model.rank();
    if active.is_empty() {
        return Err(Error::Degenerate("cannot prune to an empty rank set".into()));
    }
    let mut keep = active.to_vec();
    keep.sort_unstable();
    keep.dedup();
    if keep.len() != active.len() || keep.iter().any(|&j| j >= r) {
        return Err(Error::Config(format!("invalid active set {active:?} for rank {r}")));
    }
    let mut out = model.clone();
    let restrict = |out: &mut CatteModel, id: ParamId| {
        let p = out.store.get_mut(id);
        p.data = select_cols(&p.data, p.rows, p.cols, &keep);
        p.cols = keep.len();
    };
    for k in 0..out.modes.len() {
        let layer = out.modes[k].decoder.output_layer();
        restrict(&mut out, layer.weight);
        restrict(&mut out, layer.bias);
        *out.modes[k].decoder.dims.last_mut().expect("decoder has layers") = keep.len();
    }
    let var = out.var;
    restrict(&mut out, var.log_alpha);
    restrict(&mut out, var.log_beta);
    out.config.net.rank = keep.len();
    out.config.prior.a0 = keep.iter().map(|&j| model.config.prior.a0[j]).collect();
    out.config.prior.b0 = keep.iter().map(|&j| model.config.prior.b0[j]).collect();
    Ok(out)
}
