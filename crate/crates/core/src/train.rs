//! Joint Adam optimization of network weights and variational parameters.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::model::{elbo_terms, gather, reconstruct_var, CatteModel};
use crate::odeint::Method;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Maximize the ELBO (rank shrinkage on).
    #[default]
    Elbo,
    /// Minimize the plain squared error; variational state frozen.
    RmseOnly,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Elbo => "elbo",
            Objective::RmseOnly => "rmse-only",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elbo" => Ok(Objective::Elbo),
            "rmse-only" | "rmse" => Ok(Objective::RmseOnly),
            other => Err(Error::Config(format!("unknown objective '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// `None` trains on the full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub method: Method,
    /// Solver step; `None` uses `(t_max − t_min)/(4T)`.
    pub step: Option<f64>,
    pub objective: Objective,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Learning rate of the log-variational parameters; `None` uses `lr`.
    pub variational_lr: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            lr: 5e-3,
            batch_size: None,
            seed: 0,
            method: Method::Rk4,
            step: None,
            objective: Objective::Elbo,
            clip_norm: 100.0,
            variational_lr: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if let Some(v) = self.variational_lr {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("variational learning rate must be > 0, got {v}")));
            }
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm must be > 0".into()));
        }
        Ok(())
    }
}

/// Adam moments for every parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One descent step on `grads` (of a loss to minimize). Block `i` moves
    /// with learning rate `lr · rates[i]`; a zero rate freezes it.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], rates: &[f64]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.0;
            if rates[i] == 0.0 {
                continue;
            }
            let lr = self.lr * rates[i];
            let p = &mut store.get_mut(id).data;
            for j in 0..p.len() {
                let g = grads[i][j];
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g * g;
                let mh = self.m[i][j] / c1;
                let vh = self.v[i][j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` in place so that their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], mask: &[bool], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .flat_map(|(g, _)| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// ELBO estimate of the epoch's (last) batch, scaled to the full data.
    pub elbo: f64,
    /// The minimized objective.
    pub loss: f64,
    pub lambda_mean: Vec<f64>,
    /// Σ_n Σ_k (g_r^k)² over the epoch's (last) batch, scaled to the full data.
    pub power: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Columns: epoch, elbo, lambda_1..lambda_R, power_1..power_R.
    pub fn write_csv(&self, path: impl AsRef<Path>, rank: usize) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["epoch".to_string(), "elbo".to_string(), "loss".to_string()];
        header.extend((1..=rank).map(|r| format!("lambda_{r}")));
        header.extend((1..=rank).map(|r| format!("power_{r}")));
        w.write_record(&header)?;
        for rec in &self.records {
            let mut row = vec![rec.epoch.to_string(), rec.elbo.to_string(), rec.loss.to_string()];
            row.extend(rec.lambda_mean.iter().map(|x| x.to_string()));
            row.extend(rec.power.iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Optimization state that survives across calls (and checkpoints).
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: CatteModel,
    pub adam: Adam,
    /// Epochs completed so far.
    pub epoch: usize,
    pub config: TrainConfig,
    pub history: History,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fixes the model's time grid and solver from `data`.
    pub fn new(mut model: CatteModel, data: &ObservationSet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.fit_layout(data, config.method, config.step)?;
        let adam = Adam::new(&model.store, config.lr);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            adam,
            epoch: 0,
            config,
            history: History::default(),
            rng,
        })
    }

    /// Continues from saved optimizer state; the model keeps its grid.
    pub fn resume(model: CatteModel, adam: Adam, epoch: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.fitted()?;
        // distinct stream per resumed segment, still a pure function of the inputs
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Ok(Self {
            model,
            adam,
            epoch,
            config,
            history: History::default(),
            rng,
        })
    }

    /// Per-block learning-rate multipliers.
    fn rates(&self) -> Vec<f64> {
        let variational = self.model.var.all();
        let var_rate = match self.config.objective {
            Objective::Elbo => self.config.variational_lr.map_or(1.0, |v| v / self.config.lr),
            Objective::RmseOnly => 0.0,
        };
        self.model
            .store
            .ids()
            .map(|id| if variational.contains(&id) { var_rate } else { 1.0 })
            .collect()
    }

    fn batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        match self.config.batch_size {
            Some(b) if b < n => {
                let mut rows: Vec<usize> = (0..n).collect();
                rows.shuffle(&mut self.rng);
                rows.chunks(b).map(<[usize]>::to_vec).collect()
            }
            _ => vec![(0..n).collect()],
        }
    }

    /// Runs one epoch (all batches) and returns its record.
    pub fn step_epoch(&mut self, data: &ObservationSet) -> Result<EpochRecord> {
        let n = data.len();
        let layout = self.model.layout_for(data)?;
        let all_rows = layout.rows_for(data.indexes(), data.times())?;
        let epoch = self.epoch + 1;
        let rates = self.rates();
        let mask: Vec<bool> = rates.iter().map(|&r| r > 0.0).collect();
        let mut record = None;
        for batch in self.batches(n) {
            let mut tape = Tape::new();
            let fwd = self.model.forward(&mut tape, layout.clone())?;
            let rows: Vec<Vec<usize>> = all_rows.iter().map(|r| batch.iter().map(|&b| r[b]).collect()).collect();
            let y: Vec<f64> = batch.iter().map(|&b| data.values()[b]).collect();
            let gs = gather(&mut tape, &fwd.tables, &rows)?;
            let vv = self.model.variational_vars(&mut tape, &fwd.bound);
            let terms = elbo_terms(&mut tape, &gs, &y, n, &vv, self.model.prior())?;
            let loss = match self.config.objective {
                Objective::Elbo => tape.neg(terms.elbo),
                Objective::RmseOnly => squared_error(&mut tape, &gs, &y, n)?,
            };
            let loss_value = tape.item(loss);
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: loss_value,
                });
            }
            let mut grads = fwd.bound.collect(&tape.backward(loss)?);
            clip_global_norm(&mut grads, &mask, self.config.clip_norm);
            let scale = n as f64 / batch.len() as f64;
            record = Some(EpochRecord {
                epoch,
                elbo: tape.item(terms.elbo),
                loss: loss_value,
                lambda_mean: self.model.variational().lambda_mean(),
                power: power_of(&tape, &gs, scale),
            });
            self.adam.update(&mut self.model.store, &grads, &rates);
        }
        self.epoch = epoch;
        let record = record.expect("at least one batch");
        self.history.records.push(record.clone());
        Ok(record)
    }

    /// Runs `config.epochs` more epochs; `on_epoch` sees the model after
    /// each one (e.g. for checkpoints) and may abort by returning an error.
    pub fn run<F>(&mut self, data: &ObservationSet, mut on_epoch: F) -> Result<&History>
    where
        F: FnMut(&Trainer, &EpochRecord) -> Result<()>,
    {
        for _ in 0..self.config.epochs {
            let rec = self.step_epoch(data)?;
            on_epoch(self, &rec)?;
        }
        Ok(&self.history)
    }
}

/// Σ_n (y_n − Σ_r Π_k g)², scaled to the full data.
fn squared_error(tape: &mut Tape, gs: &[Var], y: &[f64], n_total: usize) -> Result<Var> {
    let recon = reconstruct_var(tape, gs)?;
    let yv = tape.leaf_col(y);
    let r = tape.sub(yv, recon)?;
    let sq = tape.square(r);
    let s = tape.sum(sq);
    Ok(tape.scale(s, n_total as f64 / y.len() as f64))
}

fn power_of(tape: &Tape, gs: &[Var], scale: f64) -> Vec<f64> {
    let r = gs[0].cols();
    let mut p = vec![0.0; r];
    for &g in gs {
        for row in tape.value(g).chunks(r) {
            for (acc, x) in p.iter_mut().zip(row) {
                *acc += x * x;
            }
        }
    }
    p.iter().map(|x| x * scale).collect()
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train(data: &ObservationSet, model: CatteModel, config: TrainConfig) -> Result<(CatteModel, History)> {
    let mut t = Trainer::new(model, data, config)?;
    t.run(data, |_, _| Ok(()))?;
    Ok((t.model, t.history))
}

/// The squared-error ablation: same loop, variational state frozen.
pub fn train_ablation(data: &ObservationSet, model: CatteModel, config: TrainConfig) -> Result<(CatteModel, History)> {
    train(
        data,
        model,
        TrainConfig {
            objective: Objective::RmseOnly,
            ..config
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};
    use crate::model::ModelConfig;
    use crate::nets::NetConfig;

    fn tiny_net() -> NetConfig {
        NetConfig {
            fourier_dim: 4,
            latent_dim: 3,
            rank: 3,
            encoder_hidden: vec![8],
            dynamics_hidden: vec![8],
            decoder_hidden: vec![8],
        }
    }

    fn tiny_data() -> ObservationSet {
        gen_synthetic(&SynthConfig {
            n1: 4,
            n2: 4,
            nt: 5,
            noise_variance: 0.01,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap()
        .noisy
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            method: Method::Euler,
            ..TrainConfig::default()
        }
    }

    fn model() -> CatteModel {
        CatteModel::new(ModelConfig {
            seed: 5,
            ..ModelConfig::new(2, tiny_net())
        })
        .unwrap()
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let data = tiny_data();
        let m = model();
        let (out, hist) = train(&data, m.clone(), cfg(0)).unwrap();
        assert_eq!(out.store, m.store);
        assert!(hist.records.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_does_not_touch_data() {
        let data = tiny_data();
        let before = data.clone();
        let (a, ha) = train(&data, model(), cfg(5)).unwrap();
        let (b, hb) = train(&data, model(), cfg(5)).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(ha, hb);
        assert_eq!(data, before);
        let c = TrainConfig { batch_size: Some(16), ..cfg(3) };
        let (x, _) = train(&data, model(), c.clone()).unwrap();
        let (y, _) = train(&data, model(), c).unwrap();
        assert_eq!(x.store, y.store);
    }

    #[test]
    fn elbo_increases_early() {
        let data = tiny_data();
        let (_, h) = train(&data, model(), cfg(30)).unwrap();
        assert!(h.records[29].elbo > h.records[0].elbo);
    }

    #[test]
    fn ablation_freezes_variational_state() {
        let data = tiny_data();
        let m = model();
        let (out, h) = train_ablation(&data, m.clone(), cfg(5)).unwrap();
        for id in m.var.all() {
            assert_eq!(out.store.get(id), m.store.get(id));
        }
        let net_id = m.modes[0].decoder.layers[0].weight;
        assert_ne!(out.store.get(net_id), m.store.get(net_id));
        assert!(h.records[4].loss < h.records[0].loss);
    }

    #[test]
    fn ablation_loss_is_plain_squared_error() {
        let data = tiny_data();
        let mut t = Trainer::new(model(), &data, TrainConfig { objective: Objective::RmseOnly, ..cfg(1) }).unwrap();
        let before = t.model.clone();
        let rec = t.step_epoch(&data).unwrap();
        let gs = before.factors(&data).unwrap();
        let want: f64 = data
            .values()
            .iter()
            .zip(&gs)
            .map(|(y, g)| (y - crate::model::reconstruct(g).unwrap()).powi(2))
            .sum();
        assert!((rec.loss - want).abs() < 1e-9 * want.max(1.0));
    }

    #[test]
    fn tiny_step_is_first_order() {
        // ΔELBO ≈ ∇ELBO·Δθ for a small optimizer step
        let data = tiny_data();
        let vs = crate::model::VariationalState {
            alpha: vec![2.0, 1.5, 3.0],
            beta: vec![1.0, 2.0, 0.5],
            sigma2: 0.1,
            rho: 3.0,
            iota: 1.5,
        };
        let first_order = |lr: f64| {
            let mut t = Trainer::new(model(), &data, TrainConfig { lr, ..cfg(1) }).unwrap();
            t.model.set_variational(&vs).unwrap();
            let mut tape = Tape::new();
            let fwd = t.model.forward(&mut tape, t.model.layout_for(&data).unwrap()).unwrap();
            let rows = fwd.layout.rows_for(data.indexes(), data.times()).unwrap();
            let gs = gather(&mut tape, &fwd.tables, &rows).unwrap();
            let vv = t.model.variational_vars(&mut tape, &fwd.bound);
            let terms = elbo_terms(&mut tape, &gs, data.values(), data.len(), &vv, t.model.prior()).unwrap();
            let grads = fwd.bound.collect(&tape.backward(terms.elbo).unwrap());
            let e0 = tape.item(terms.elbo);
            let before = t.model.store.clone();
            t.step_epoch(&data).unwrap();
            let e1 = t.model.elbo(&data).unwrap().elbo;
            let mut predicted = 0.0;
            for (id, p) in t.model.store.iter() {
                for (j, x) in p.data.iter().enumerate() {
                    predicted += grads[id.0][j] * (x - before.get(id).data[j]);
                }
            }
            (e1 - e0, predicted)
        };
        let (actual, predicted) = first_order(1e-12);
        assert!(predicted > 0.0);
        assert!((actual - predicted).abs() <= 1e-6, "{actual} vs {predicted}");
        // a larger step, where rounding is negligible, still agrees to first order
        let (actual, predicted) = first_order(1e-8);
        assert!((actual - predicted).abs() <= 1e-4 * predicted, "{actual} vs {predicted}");
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![vec![3.0, 4.0], vec![12.0]];
        let n = clip_global_norm(&mut g, &[true, true], 6.5);
        assert_eq!(n, 13.0);
        let after: f64 = g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 6.5).abs() < 1e-12);
        let mut h = vec![vec![0.3]];
        clip_global_norm(&mut h, &[true], 1.0);
        assert_eq!(h[0][0], 0.3);
    }

    #[test]
    fn history_csv_has_expected_columns() {
        let data = tiny_data();
        let (_, h) = train(&data, model(), cfg(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        h.write_csv(&p, 3).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,elbo,loss,lambda_1,lambda_2,lambda_3,power_1,power_2,power_3"
        );
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn bad_config_rejected() {
        let data = tiny_data();
        assert!(Trainer::new(model(), &data, TrainConfig { lr: 0.0, ..cfg(1) }).is_err());
        assert!(Trainer::new(model(), &data, TrainConfig { batch_size: Some(0), ..cfg(1) }).is_err());
    }
}
