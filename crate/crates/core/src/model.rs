//! The probabilistic model: mode networks, variational state, and the
//! closed-form evidence lower bound.
//!
//! Every term exists twice: on the tape (for training) and as a plain f64
//! function over explicit factor tuples (for analysis and testing).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{Normalization, ObservationSet};
use crate::error::{Error, Result};
use crate::nets::{ModeNetwork, NetConfig};
use crate::odeint::{decode_tables, roll_branched, Method, TableLayout, TimeGrid};
use crate::params::{Bound, ParamId, ParamStore};
use crate::specialmath::{digamma, kl_gamma, GammaLaw};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gamma prior hyperparameters for λ_r (per rank) and τ.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorHyper {
    pub a0: Vec<f64>,
    pub b0: Vec<f64>,
    pub c0: f64,
    pub d0: f64,
}

impl PriorHyper {
    pub fn new(a0: Vec<f64>, b0: Vec<f64>, c0: f64, d0: f64) -> Result<Self> {
        if a0.len() != b0.len() || a0.is_empty() {
            return Err(Error::Config("prior shape/rate vectors must have equal, nonzero length".into()));
        }
        let ok = |x: f64| x > 0.0 && x.is_finite();
        if !(a0.iter().chain(&b0).all(|&x| ok(x)) && ok(c0) && ok(d0)) {
            return Err(Error::Config("prior hyperparameters must be > 0".into()));
        }
        Ok(Self { a0, b0, c0, d0 })
    }

    /// Same shape/rate `a`, `b` for every rank.
    pub fn uniform(rank: usize, a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        Self::new(vec![a; rank], vec![b; rank], c, d)
    }

    pub fn rank(&self) -> usize {
        self.a0.len()
    }

    pub fn default_for(rank: usize) -> Self {
        Self::uniform(rank, 1e-6, 1e-6, 1e-6, 1e-6).expect("positive defaults")
    }
}

/// Posterior parameters: q(λ_r) = Gamma(α_r, β_r), q(τ) = Gamma(ρ, ι), and
/// the shared trajectory variance σ².
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub rho: f64,
    pub iota: f64,
}

impl VariationalState {
    pub fn uniform(rank: usize, value: f64) -> Self {
        Self {
            alpha: vec![value; rank],
            beta: vec![value; rank],
            sigma2: value,
            rho: value,
            iota: value,
        }
    }

    pub fn rank(&self) -> usize {
        self.alpha.len()
    }

    /// E_q[λ_r] = α_r/β_r.
    pub fn lambda_mean(&self) -> Vec<f64> {
        self.alpha.iter().zip(&self.beta).map(|(a, b)| a / b).collect()
    }

    /// E_q[τ] = ρ/ι.
    pub fn tau_mean(&self) -> f64 {
        self.rho / self.iota
    }

    fn validate(&self, allow_zero_sigma: bool) -> Result<()> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        let sigma_ok = if allow_zero_sigma {
            self.sigma2 >= 0.0 && self.sigma2.is_finite()
        } else {
            pos(self.sigma2)
        };
        if self.alpha.len() != self.beta.len()
            || !self.alpha.iter().chain(&self.beta).all(|&x| pos(x))
            || !pos(self.rho)
            || !pos(self.iota)
            || !sigma_ok
        {
            return Err(Error::Domain(format!("invalid variational state {self:?}")));
        }
        Ok(())
    }
}

/// Log-space parameter blocks holding the variational state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationalIds {
    pub log_alpha: ParamId,
    pub log_beta: ParamId,
    pub log_sigma2: ParamId,
    pub log_rho: ParamId,
    pub log_iota: ParamId,
}

impl VariationalIds {
    pub fn all(&self) -> [ParamId; 5] {
        [self.log_alpha, self.log_beta, self.log_sigma2, self.log_rho, self.log_iota]
    }
}

/// The variational state as tape nodes (log values and their exponentials).
#[derive(Debug, Clone, Copy)]
pub struct VariationalVars {
    pub log_alpha: Var,
    pub log_beta: Var,
    pub log_sigma2: Var,
    pub log_rho: Var,
    pub log_iota: Var,
    pub alpha: Var,
    pub sigma2: Var,
    pub rho: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub modes: usize,
    pub net: NetConfig,
    pub prior: PriorHyper,
    /// Initial value of α, β, σ², ρ, ι.
    pub init_variational: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(modes: usize, net: NetConfig) -> Self {
        let prior = PriorHyper::default_for(net.rank);
        Self {
            modes,
            net,
            prior,
            init_variational: 1e-6,
            seed: 0,
        }
    }
}

/// Where the trajectories are rolled: the solver and the training grid it
/// was fitted on.
#[derive(Debug, Clone, PartialEq)]
pub struct Fitted {
    pub method: Method,
    pub grid: TimeGrid,
    pub index_tables: Vec<Vec<f64>>,
    pub normalization: Normalization,
}

#[derive(Debug, Clone)]
pub struct CatteModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub modes: Vec<ModeNetwork>,
    pub var: VariationalIds,
    pub fitted: Option<Fitted>,
}

/// Decoded trajectory tables for one tape, plus the bound leaves.
pub struct Forward {
    pub bound: Bound,
    pub layout: TableLayout,
    pub tables: Vec<Var>,
}

/// The four ELBO terms and their combination, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    pub elbo: Var,
    pub expected_loglik: Var,
    pub trajectory_kl: Var,
    pub lambda_kl: Var,
    pub tau_kl: Var,
}

impl CatteModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.modes < 2 {
            return Err(Error::Config(format!("need at least 2 modes, got {}", config.modes)));
        }
        let r = config.net.rank;
        if r == 0 || config.net.latent_dim == 0 || config.net.fourier_dim == 0 {
            return Err(Error::Config("rank, latent and Fourier dimensions must be >= 1".into()));
        }
        if config.prior.rank() != r {
            return Err(Error::Config(format!(
                "prior has {} ranks, network has {r}",
                config.prior.rank()
            )));
        }
        let v0 = config.init_variational;
        if !(v0 > 0.0 && v0.is_finite()) {
            return Err(Error::Config("initial variational value must be > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let modes = (0..config.modes)
            .map(|k| ModeNetwork::new(&mut store, k, &config.net, &mut rng))
            .collect();
        let l = v0.ln();
        let var = VariationalIds {
            log_alpha: store.add("q.log_alpha", 1, r, vec![l; r]),
            log_beta: store.add("q.log_beta", 1, r, vec![l; r]),
            log_sigma2: store.add("q.log_sigma2", 1, 1, vec![l]),
            log_rho: store.add("q.log_rho", 1, 1, vec![l]),
            log_iota: store.add("q.log_iota", 1, 1, vec![l]),
        };
        Ok(Self {
            config,
            store,
            modes,
            var,
            fitted: None,
        })
    }

    pub fn rank(&self) -> usize {
        self.config.net.rank
    }

    pub fn num_modes(&self) -> usize {
        self.config.modes
    }

    pub fn prior(&self) -> &PriorHyper {
        &self.config.prior
    }

    pub fn variational(&self) -> VariationalState {
        let exp = |id: ParamId| self.store.get(id).data.iter().map(|x| x.exp()).collect::<Vec<_>>();
        VariationalState {
            alpha: exp(self.var.log_alpha),
            beta: exp(self.var.log_beta),
            sigma2: exp(self.var.log_sigma2)[0],
            rho: exp(self.var.log_rho)[0],
            iota: exp(self.var.log_iota)[0],
        }
    }

    pub fn set_variational(&mut self, vs: &VariationalState) -> Result<()> {
        vs.validate(false)?;
        if vs.rank() != self.rank() {
            return Err(Error::Config("variational state has the wrong rank".into()));
        }
        let ln = |xs: &[f64]| xs.iter().map(|x| x.ln()).collect::<Vec<_>>();
        self.store.get_mut(self.var.log_alpha).data = ln(&vs.alpha);
        self.store.get_mut(self.var.log_beta).data = ln(&vs.beta);
        self.store.get_mut(self.var.log_sigma2).data = vec![vs.sigma2.ln()];
        self.store.get_mut(self.var.log_rho).data = vec![vs.rho.ln()];
        self.store.get_mut(self.var.log_iota).data = vec![vs.iota.ln()];
        Ok(())
    }

    /// Records the training grid, index tables and solver for later rolls.
    pub fn fit_layout(&mut self, data: &ObservationSet, method: Method, step: Option<f64>) -> Result<()> {
        let grid = match step {
            Some(h) => TimeGrid::new(data.unique_times(), h)?,
            None => TimeGrid::with_default_step(data.unique_times())?,
        };
        self.fitted = Some(Fitted {
            method,
            grid,
            index_tables: data.unique_indexes().to_vec(),
            normalization: data.normalization().clone(),
        });
        Ok(())
    }

    pub fn fitted(&self) -> Result<&Fitted> {
        self.fitted
            .as_ref()
            .ok_or_else(|| Error::Config("model has no time grid; train it first".into()))
    }

    /// Layout covering the training grid and tables plus the given
    /// coordinates; training coordinates keep the exact same roll.
    pub fn layout_for(&self, data: &ObservationSet) -> Result<TableLayout> {
        self.layout_for_coords(data.unique_indexes(), data.unique_times())
    }

    /// As [`Self::layout_for`] for column-oriented (normalized) coordinates.
    pub fn layout_for_coords(&self, indexes: &[Vec<f64>], times: &[f64]) -> Result<TableLayout> {
        let fit = self.fitted()?;
        if indexes.len() != self.num_modes() {
            return Err(Error::Lookup(format!(
                "coordinates have {} modes, model has {}",
                indexes.len(),
                self.num_modes()
            )));
        }
        let grid = fit.grid.merged(times)?;
        let tables = fit
            .index_tables
            .iter()
            .zip(indexes)
            .map(|(a, b)| a.iter().chain(b).copied().collect())
            .collect();
        Ok(TableLayout::with_spine(tables, grid, fit.grid.times()))
    }

    /// Factor vectors at arbitrary coordinates: `result[n][k]` is
    /// g^k(i_k^n, t_n).
    pub fn factors_at(&self, indexes: &[Vec<f64>], times: &[f64]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, self.layout_for_coords(indexes, times)?)?;
        let rows = fwd.layout.rows_for(indexes, times)?;
        let r = self.rank();
        let mut out = vec![Vec::with_capacity(self.num_modes()); times.len()];
        for (table, rows_k) in fwd.tables.iter().zip(&rows) {
            let vals = tape.value(*table);
            for (n, &row) in rows_k.iter().enumerate() {
                out[n].push(vals[row * r..(row + 1) * r].to_vec());
            }
        }
        Ok(out)
    }

    /// Binds parameters and rolls/decodes every trajectory in `layout`.
    pub fn forward(&self, tape: &mut Tape, layout: TableLayout) -> Result<Forward> {
        let method = self.fitted()?.method;
        let bound = self.store.bind(tape);
        let rolled = roll_branched(
            tape,
            &bound,
            &self.modes,
            &layout.index_tables,
            &layout.grid,
            &layout.spine,
            method,
        )?;
        let tables = decode_tables(tape, &bound, &self.modes, &rolled)?;
        Ok(Forward { bound, layout, tables })
    }

    pub fn variational_vars(&self, tape: &mut Tape, bound: &Bound) -> VariationalVars {
        let log_alpha = bound.var(self.var.log_alpha);
        let log_sigma2 = bound.var(self.var.log_sigma2);
        let log_rho = bound.var(self.var.log_rho);
        VariationalVars {
            log_alpha,
            log_beta: bound.var(self.var.log_beta),
            log_sigma2,
            log_rho,
            log_iota: bound.var(self.var.log_iota),
            alpha: tape.exp(log_alpha),
            sigma2: tape.exp(log_sigma2),
            rho: tape.exp(log_rho),
        }
    }

    /// Factor vectors for every observation in `data`.
    pub fn factors(&self, data: &ObservationSet) -> Result<Vec<Vec<Vec<f64>>>> {
        self.factors_at(data.indexes(), data.times())
    }

    /// The full-batch ELBO on `data` as plain values.
    pub fn elbo(&self, data: &ObservationSet) -> Result<ElboValues> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, self.layout_for(data)?)?;
        let rows = fwd.layout.rows_for(data.indexes(), data.times())?;
        let vv = self.variational_vars(&mut tape, &fwd.bound);
        let gs = gather(&mut tape, &fwd.tables, &rows)?;
        let terms = elbo_terms(&mut tape, &gs, data.values(), data.len(), &vv, self.prior())?;
        Ok(ElboValues::read(&tape, &terms))
    }
}

/// Plain values of [`ElboTerms`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboValues {
    pub elbo: f64,
    pub expected_loglik: f64,
    pub trajectory_kl: f64,
    pub lambda_kl: f64,
    pub tau_kl: f64,
}

impl ElboValues {
    pub fn read(tape: &Tape, t: &ElboTerms) -> Self {
        Self {
            elbo: tape.item(t.elbo),
            expected_loglik: tape.item(t.expected_loglik),
            trajectory_kl: tape.item(t.trajectory_kl),
            lambda_kl: tape.item(t.lambda_kl),
            tau_kl: tape.item(t.tau_kl),
        }
    }
}

/// Per-mode N×R factor matrices for the given table rows.
pub fn gather(tape: &mut Tape, tables: &[Var], rows: &[Vec<usize>]) -> Result<Vec<Var>> {
    crate::odeint::gather_g(tape, tables, rows)
}

fn hadamard(tape: &mut Tape, gs: &[Var]) -> Result<Var> {
    let mut acc = gs[0];
    for &g in &gs[1..] {
        acc = tape.mul(acc, g)?;
    }
    Ok(acc)
}

/// N×1 column of `Σ_r Π_k g_r^k`.
pub fn reconstruct_var(tape: &mut Tape, gs: &[Var]) -> Result<Var> {
    if gs.is_empty() {
        return Err(Error::Degenerate("no factor matrices".into()));
    }
    let prod = hadamard(tape, gs)?;
    Ok(tape.sum_cols(prod))
}

/// Σ_n E_n over a batch (unscaled), where
/// E_n = (y_n − Σ_r Π_k g)² + Σ_r [Π_k (g² + σ²) − Π_k g²].
pub fn model_error_var(tape: &mut Tape, gs: &[Var], y: &[f64], sigma2: Var) -> Result<Var> {
    let recon = reconstruct_var(tape, gs)?;
    let yv = tape.leaf_col(y);
    let resid = tape.sub(yv, recon)?;
    let sq = tape.square(resid);
    let sq_sum = tape.sum(sq);
    let (n, r) = gs[0].shape();
    let s2 = tape.broadcast(sigma2, n, r)?;
    let squares: Vec<Var> = gs.iter().map(|&g| tape.square(g)).collect();
    let shifted = squares
        .iter()
        .map(|&g2| tape.add(g2, s2))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let with_var = hadamard(tape, &shifted)?;
    let without = hadamard(tape, &squares)?;
    let diff = tape.sub(with_var, without)?;
    let var_sum = tape.sum(diff);
    Ok(tape.add(sq_sum, var_sum)?)
}

/// E_q[ln p(D | U, τ)], data sum scaled by `n_total / |batch|`.
pub fn expected_loglik_var(
    tape: &mut Tape,
    gs: &[Var],
    y: &[f64],
    n_total: usize,
    vv: &VariationalVars,
) -> Result<Var> {
    let err = model_error_var(tape, gs, y, vv.sigma2)?;
    let scale = n_total as f64 / y.len() as f64;
    let nt = n_total as f64;
    let psi = tape.digamma(vv.rho);
    let mean_log_tau = tape.sub(psi, vv.log_iota)?;
    let log_ratio = tape.sub(vv.log_rho, vv.log_iota)?;
    let e_tau = tape.exp(log_ratio);
    let weighted = tape.mul(e_tau, err)?;
    let data = tape.scale(weighted, -0.5 * scale);
    let a = tape.scale(mean_log_tau, 0.5 * nt);
    let a = tape.add_scalar(a, -0.5 * nt * LN_2PI);
    Ok(tape.add(a, data)?)
}

/// Σ_{n,k,r} KL(N(g_r^k, σ²) ‖ N(0, β_r/α_r)), scaled like the likelihood.
pub fn trajectory_kl_var(tape: &mut Tape, gs: &[Var], n_total: usize, vv: &VariationalVars) -> Result<Var> {
    let (n, r) = gs[0].shape();
    let k = gs.len() as f64;
    let scale = n_total as f64 / n as f64;
    let nk = n_total as f64 * k;
    // Σ_{n,k} g² per rank
    let squares: Vec<Var> = gs.iter().map(|&g| tape.square(g)).collect();
    let mut s = squares[0];
    for &q in &squares[1..] {
        s = tape.add(s, q)?;
    }
    let s_r = tape.sum_rows(s);
    let s_r = tape.scale(s_r, scale);
    // E[λ_r] = exp(ln α − ln β)
    let log_ratio = tape.sub(vv.log_alpha, vv.log_beta)?;
    let e_lambda = tape.exp(log_ratio);
    let s2 = tape.broadcast(vv.sigma2, 1, r)?;
    let s2 = tape.scale(s2, nk);
    let quad_in = tape.add(s2, s_r)?;
    let quad = tape.mul(e_lambda, quad_in)?;
    let quad = tape.sum(quad);
    let neg_log_ratio = tape.neg(log_ratio);
    let logs = tape.sum(neg_log_ratio);
    let logs = tape.scale(logs, nk);
    let log_s2 = tape.scale(vv.log_sigma2, -nk * r as f64);
    let total = tape.add(quad, logs)?;
    let total = tape.add(total, log_s2)?;
    let total = tape.add_scalar(total, -nk * r as f64);
    Ok(tape.scale(total, 0.5))
}

/// KL(Gamma(shape_p, rate_p) ‖ Gamma(a_q, b_q)) element-wise, summed; the
/// posterior enters through its log shape/rate.
fn gamma_kl_var(tape: &mut Tape, log_shape: Var, shape: Var, log_rate: Var, a_q: &[f64], b_q: &[f64]) -> Result<Var> {
    let aq = tape.leaf_row(a_q);
    let bq = tape.leaf_row(b_q);
    let ln_bq: Vec<f64> = b_q.iter().map(|b| b.ln()).collect();
    let ln_bq = tape.leaf_row(&ln_bq);
    let lgamma_q: f64 = a_q.iter().map(|&a| crate::specialmath::log_gamma(a)).sum::<std::result::Result<f64, _>>()?;
    // (a_p − a_q) ψ(a_p)
    let psi = tape.digamma(shape);
    let da = tape.sub(shape, aq)?;
    let t1 = tape.mul(da, psi)?;
    // − ln Γ(a_p)
    let lg = tape.log_gamma(shape);
    let t1 = tape.sub(t1, lg)?;
    // a_q (ln b_p − ln b_q)
    let dl = tape.sub(log_rate, ln_bq)?;
    let t3 = tape.mul(aq, dl)?;
    // a_p (b_q − b_p)/b_p = b_q·exp(ln a_p − ln b_p) − a_p
    let lr = tape.sub(log_shape, log_rate)?;
    let ratio = tape.exp(lr);
    let t4 = tape.mul(bq, ratio)?;
    let t4 = tape.sub(t4, shape)?;
    let sum = tape.add(t1, t3)?;
    let sum = tape.add(sum, t4)?;
    let total = tape.sum(sum);
    Ok(tape.add_scalar(total, lgamma_q))
}

pub fn lambda_kl_var(tape: &mut Tape, vv: &VariationalVars, prior: &PriorHyper) -> Result<Var> {
    gamma_kl_var(tape, vv.log_alpha, vv.alpha, vv.log_beta, &prior.a0, &prior.b0)
}

pub fn tau_kl_var(tape: &mut Tape, vv: &VariationalVars, prior: &PriorHyper) -> Result<Var> {
    gamma_kl_var(tape, vv.log_rho, vv.rho, vv.log_iota, &[prior.c0], &[prior.d0])
}

/// ELBO = E[ln p(D|·)] − KL_traj − KL_λ − KL_τ on a (mini-)batch whose
/// data-dependent sums are rescaled to `n_total` observations.
pub fn elbo_terms(
    tape: &mut Tape,
    gs: &[Var],
    y: &[f64],
    n_total: usize,
    vv: &VariationalVars,
    prior: &PriorHyper,
) -> Result<ElboTerms> {
    if y.is_empty() || gs.iter().any(|g| g.rows() != y.len()) {
        return Err(Error::Degenerate("factor rows do not match the batch".into()));
    }
    let ell = expected_loglik_var(tape, gs, y, n_total, vv)?;
    let tkl = trajectory_kl_var(tape, gs, n_total, vv)?;
    let lkl = lambda_kl_var(tape, vv, prior)?;
    let qkl = tau_kl_var(tape, vv, prior)?;
    let e = tape.sub(ell, tkl)?;
    let e = tape.sub(e, lkl)?;
    let e = tape.sub(e, qkl)?;
    Ok(ElboTerms {
        elbo: e,
        expected_loglik: ell,
        trajectory_kl: tkl,
        lambda_kl: lkl,
        tau_kl: qkl,
    })
}

// ---- plain-value versions over explicit factor tuples -------------------

fn check_tuple(g: &[Vec<f64>], rank: usize) -> Result<()> {
    if g.is_empty() || g.iter().any(|v| v.len() != rank) {
        return Err(Error::Degenerate("factor vectors must all have the model rank".into()));
    }
    Ok(())
}

/// Σ_r Π_k g_r^k.
pub fn reconstruct(g: &[Vec<f64>]) -> Result<f64> {
    let r = g.first().map_or(0, Vec::len);
    check_tuple(g, r)?;
    Ok((0..r).map(|j| g.iter().map(|v| v[j]).product::<f64>()).sum())
}

/// E_q[(y − Σ_r Π_k u_r^k)²] for independent u_r^k ~ N(g_r^k, σ²).
pub fn model_error(y: f64, g: &[Vec<f64>], sigma2: f64) -> Result<f64> {
    let mu = reconstruct(g)?;
    let r = g[0].len();
    let spread: f64 = (0..r)
        .map(|j| {
            let with: f64 = g.iter().map(|v| v[j] * v[j] + sigma2).product();
            let without: f64 = g.iter().map(|v| v[j] * v[j]).product();
            with - without
        })
        .sum();
    Ok((y - mu).powi(2) + spread)
}

pub fn expected_loglik(y: &[f64], gs: &[Vec<Vec<f64>>], vs: &VariationalState) -> Result<f64> {
    vs.validate(true)?;
    if y.len() != gs.len() {
        return Err(Error::Degenerate("values and factor tuples differ in length".into()));
    }
    let n = y.len() as f64;
    let mut err = 0.0;
    for (yn, g) in y.iter().zip(gs) {
        check_tuple(g, vs.rank())?;
        err += model_error(*yn, g, vs.sigma2)?;
    }
    Ok(-0.5 * n * LN_2PI + 0.5 * n * (digamma(vs.rho)? - vs.iota.ln()) - 0.5 * vs.tau_mean() * err)
}

pub fn trajectory_kl(gs: &[Vec<Vec<f64>>], vs: &VariationalState) -> Result<f64> {
    vs.validate(false)?;
    let mut total = 0.0;
    for g in gs {
        check_tuple(g, vs.rank())?;
        for v in g {
            for (j, &x) in v.iter().enumerate() {
                let (a, b) = (vs.alpha[j], vs.beta[j]);
                total += 0.5 * ((b / (a * vs.sigma2)).ln() + (a / b) * (vs.sigma2 + x * x) - 1.0);
            }
        }
    }
    Ok(total)
}

pub fn lambda_kl(vs: &VariationalState, prior: &PriorHyper) -> Result<f64> {
    vs.validate(true)?;
    let mut total = 0.0;
    for j in 0..vs.rank() {
        total += kl_gamma(GammaLaw::new(vs.alpha[j], vs.beta[j])?, GammaLaw::new(prior.a0[j], prior.b0[j])?)?;
    }
    Ok(total)
}

pub fn tau_kl(vs: &VariationalState, prior: &PriorHyper) -> Result<f64> {
    vs.validate(true)?;
    Ok(kl_gamma(GammaLaw::new(vs.rho, vs.iota)?, GammaLaw::new(prior.c0, prior.d0)?)?)
}

pub fn elbo_value(y: &[f64], gs: &[Vec<Vec<f64>>], vs: &VariationalState, prior: &PriorHyper) -> Result<f64> {
    Ok(expected_loglik(y, gs, vs)? - trajectory_kl(gs, vs)? - lambda_kl(vs, prior)? - tau_kl(vs, prior)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use crate::specialmath::{kl_gaussian, GaussianLaw};
    use rand::Rng;
    use rand_distr::{Distribution, Gamma, Normal};

    fn tiny_cfg(seed: u64) -> ModelConfig {
        let net = NetConfig {
            fourier_dim: 3,
            latent_dim: 3,
            rank: 2,
            encoder_hidden: vec![4],
            dynamics_hidden: vec![4, 4],
            decoder_hidden: vec![4],
        };
        ModelConfig {
            seed,
            ..ModelConfig::new(2, net)
        }
    }

    fn tiny_data(n: usize, seed: u64) -> ObservationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut col = |k: usize| (0..n).map(|_| (rng.gen_range(0..k) as f64) / k as f64).collect::<Vec<_>>();
        let i1 = col(3);
        let i2 = col(3);
        let t = col(4);
        let y = (0..n).map(|j| (j as f64 * 0.37).sin()).collect();
        ObservationSet::new(vec![i1, i2], t.iter().map(|x| x + 0.1).collect(), y, Normalization::identity(2)).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, r: usize) -> VariationalState {
        VariationalState {
            alpha: (0..r).map(|_| rng.gen_range(0.5..3.0)).collect(),
            beta: (0..r).map(|_| rng.gen_range(0.5..3.0)).collect(),
            sigma2: rng.gen_range(0.05..0.5),
            rho: rng.gen_range(1.0..4.0),
            iota: rng.gen_range(0.5..2.0),
        }
    }

    fn random_g(rng: &mut ChaCha8Rng, n: usize, k: usize, r: usize) -> Vec<Vec<Vec<f64>>> {
        (0..n)
            .map(|_| (0..k).map(|_| (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
            .collect()
    }

    #[test]
    fn reconstruct_examples() {
        assert_eq!(reconstruct(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), 11.0);
        assert_eq!(reconstruct(&[vec![1.0, 2.0], vec![0.0, 0.0], vec![5.0, 6.0]]).unwrap(), 0.0);
        assert!(reconstruct(&[vec![1.0, 2.0], vec![3.0]]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 1..=6 {
            for r in 1..=10 {
                let g = &random_g(&mut rng, 1, k, r)[0];
                let mut naive = 0.0;
                for j in 0..r {
                    let mut p = 1.0;
                    for v in g {
                        p *= v[j];
                    }
                    naive += p;
                }
                assert!((reconstruct(g).unwrap() - naive).abs() < 1e-14);
            }
        }
    }

    /// Full R×R expansion of the model-error expectation.
    fn model_error_expanded(y: f64, g: &[Vec<f64>], s2: f64) -> f64 {
        let r = g[0].len();
        let mu: f64 = (0..r).map(|j| g.iter().map(|v| v[j]).product::<f64>()).sum();
        let mut second = 0.0;
        for a in 0..r {
            for b in 0..r {
                second += g
                    .iter()
                    .map(|v| v[a] * v[b] + if a == b { s2 } else { 0.0 })
                    .product::<f64>();
            }
        }
        y * y - 2.0 * y * mu + second
    }

    #[test]
    fn model_error_identity_matches_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 2..=4 {
            for r in 1..=5 {
                let g = &random_g(&mut rng, 1, k, r)[0];
                let y: f64 = rng.gen_range(-2.0..2.0);
                let s2 = rng.gen_range(0.0..0.5);
                let a = model_error(y, g, s2).unwrap();
                let b = model_error_expanded(y, g, s2);
                assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()), "{a} {b}");
            }
        }
        // σ² = 0 collapses exactly to the squared error
        let g = &random_g(&mut rng, 1, 3, 4)[0];
        let mu = reconstruct(g).unwrap();
        assert_eq!(model_error(0.3, g, 0.0).unwrap(), (0.3 - mu).powi(2));
    }

    #[test]
    fn expected_loglik_zero_observations() {
        let vs = VariationalState {
            sigma2: 0.0,
            ..VariationalState::uniform(2, 1.5)
        };
        let n = 5;
        let gs = vec![vec![vec![0.0; 2]; 2]; n];
        let got = expected_loglik(&vec![0.0; n], &gs, &vs).unwrap();
        let nf = n as f64;
        let want = -0.5 * nf * (2.0 * PI).ln() + 0.5 * nf * (digamma(1.5).unwrap() - 1.5f64.ln());
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn expected_loglik_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, k, r) = (4, 2, 2);
        let gs = random_g(&mut rng, n, k, r);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vs = random_state(&mut rng, r);
        let exact = expected_loglik(&y, &gs, &vs).unwrap();
        let tau_d = Gamma::new(vs.rho, 1.0 / vs.iota).unwrap();
        let u_d = Normal::new(0.0, vs.sigma2.sqrt()).unwrap();
        let samples = 200_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..samples {
            let tau: f64 = tau_d.sample(&mut rng);
            let mut ll = 0.0;
            for (yn, g) in y.iter().zip(&gs) {
                let u: Vec<Vec<f64>> = g.iter().map(|v| v.iter().map(|m| m + u_d.sample(&mut rng)).collect()).collect();
                let mu = reconstruct(&u).unwrap();
                ll += -0.5 * (2.0 * PI).ln() + 0.5 * tau.ln() - 0.5 * tau * (yn - mu).powi(2);
            }
            s += ll;
            s2 += ll * ll;
        }
        let mean = s / samples as f64;
        let se = ((s2 / samples as f64 - mean * mean) / samples as f64).sqrt();
        assert!((mean - exact).abs() < 4.0 * se, "mc {mean} ± {se}, exact {exact}");
    }

    #[test]
    fn trajectory_kl_decomposes_into_gaussian_kls() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vs = random_state(&mut rng, 3);
        let gs = random_g(&mut rng, 5, 2, 3);
        let got = trajectory_kl(&gs, &vs).unwrap();
        let mut want = 0.0;
        for g in &gs {
            for v in g {
                for (j, &x) in v.iter().enumerate() {
                    want += kl_gaussian(
                        GaussianLaw::new(x, vs.sigma2).unwrap(),
                        GaussianLaw::new(0.0, vs.beta[j] / vs.alpha[j]).unwrap(),
                    )
                    .unwrap();
                }
            }
        }
        assert!((got - want).abs() < 1e-10 * (1.0 + want.abs()));

        let matched = VariationalState {
            alpha: vec![2.0; 3],
            beta: vec![0.5; 3],
            sigma2: 0.25,
            ..vs.clone()
        };
        let zeros = vec![vec![vec![0.0; 3]; 2]; 4];
        assert!(trajectory_kl(&zeros, &matched).unwrap().abs() < 1e-14);
        let bigger: Vec<_> = gs.iter().map(|g| g.iter().map(|v| v.iter().map(|x| 2.0 * x).collect()).collect()).collect();
        assert!(trajectory_kl(&bigger, &vs).unwrap() > got);
        let zero_var = VariationalState { sigma2: 0.0, ..vs };
        assert!(trajectory_kl(&gs, &zero_var).is_err());
    }

    #[test]
    fn gamma_kls_vanish_at_prior_and_are_nonnegative() {
        let prior = PriorHyper::new(vec![2.0, 0.5], vec![1.0, 3.0], 1.5, 0.7).unwrap();
        let vs = VariationalState {
            alpha: vec![2.0, 0.5],
            beta: vec![1.0, 3.0],
            sigma2: 1.0,
            rho: 1.5,
            iota: 0.7,
        };
        assert!(lambda_kl(&vs, &prior).unwrap().abs() < 1e-12);
        assert!(tau_kl(&vs, &prior).unwrap().abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let vs = random_state(&mut rng, 2);
            assert!(lambda_kl(&vs, &prior).unwrap() >= 0.0);
            assert!(tau_kl(&vs, &prior).unwrap() >= 0.0);
        }
    }

    fn on_tape(y: &[f64], gs: &[Vec<Vec<f64>>], vs: &VariationalState, prior: &PriorHyper) -> ElboValues {
        let (n, k, r) = (gs.len(), gs[0].len(), vs.rank());
        let mut tape = Tape::new();
        let gvars: Vec<Var> = (0..k)
            .map(|m| {
                let data: Vec<f64> = gs.iter().flat_map(|g| g[m].clone()).collect();
                tape.leaf(n, r, data).unwrap()
            })
            .collect();
        let ln_row = |xs: &[f64]| xs.iter().map(|x| x.ln()).collect::<Vec<_>>();
        let log_alpha = tape.leaf_row(&ln_row(&vs.alpha));
        let log_beta = tape.leaf_row(&ln_row(&vs.beta));
        let log_sigma2 = tape.scalar(vs.sigma2.ln());
        let log_rho = tape.scalar(vs.rho.ln());
        let log_iota = tape.scalar(vs.iota.ln());
        let vv = VariationalVars {
            log_alpha,
            log_beta,
            log_sigma2,
            log_rho,
            log_iota,
            alpha: tape.exp(log_alpha),
            sigma2: tape.exp(log_sigma2),
            rho: tape.exp(log_rho),
        };
        let t = elbo_terms(&mut tape, &gvars, y, n, &vv, prior).unwrap();
        ElboValues::read(&tape, &t)
    }

    #[test]
    fn tape_terms_match_plain_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prior = PriorHyper::default_for(3);
        for _ in 0..10 {
            let vs = random_state(&mut rng, 3);
            let gs = random_g(&mut rng, 6, 3, 3);
            let y: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = on_tape(&y, &gs, &vs, &prior);
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
            assert!(close(t.expected_loglik, expected_loglik(&y, &gs, &vs).unwrap()));
            assert!(close(t.trajectory_kl, trajectory_kl(&gs, &vs).unwrap()));
            assert!(close(t.lambda_kl, lambda_kl(&vs, &prior).unwrap()));
            assert!(close(t.tau_kl, tau_kl(&vs, &prior).unwrap()));
            assert!(close(t.elbo, elbo_value(&y, &gs, &vs, &prior).unwrap()));
            assert_eq!(t.elbo, t.expected_loglik - t.trajectory_kl - t.lambda_kl - t.tau_kl);
        }
    }

    #[test]
    fn minibatch_average_is_full_batch() {
        let mut model = CatteModel::new(tiny_cfg(7)).unwrap();
        let data = tiny_data(12, 7);
        model.fit_layout(&data, Method::Rk4, Some(0.1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        model.set_variational(&random_state(&mut rng, 2)).unwrap();
        let full = model.elbo(&data).unwrap().elbo;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, model.layout_for(&data).unwrap()).unwrap();
        let vv = model.variational_vars(&mut tape, &fwd.bound);
        let rows = fwd.layout.rows_for(data.indexes(), data.times()).unwrap();
        let mut acc = 0.0;
        for b in 0..4 {
            let pick: Vec<usize> = (b * 3..b * 3 + 3).collect();
            let sub: Vec<Vec<usize>> = rows.iter().map(|r| pick.iter().map(|&p| r[p]).collect()).collect();
            let y: Vec<f64> = pick.iter().map(|&p| data.values()[p]).collect();
            let gs = gather(&mut tape, &fwd.tables, &sub).unwrap();
            let t = elbo_terms(&mut tape, &gs, &y, data.len(), &vv, model.prior()).unwrap();
            acc += tape.item(t.elbo);
        }
        assert!((acc / 4.0 - full).abs() <= 1e-10 * full.abs().max(1.0), "{} vs {full}", acc / 4.0);
    }

    #[test]
    fn model_elbo_uses_model_factors() {
        let mut model = CatteModel::new(tiny_cfg(9)).unwrap();
        let data = tiny_data(8, 9);
        model.fit_layout(&data, Method::Euler, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let vs = random_state(&mut rng, 2);
        model.set_variational(&vs).unwrap();
        let got = model.elbo(&data).unwrap();
        let gs = model.factors(&data).unwrap();
        let back = model.variational();
        let want = elbo_value(data.values(), &gs, &back, model.prior()).unwrap();
        assert!((got.elbo - want).abs() < 1e-9 * want.abs().max(1.0));
        for (a, b) in back.alpha.iter().zip(&vs.alpha) {
            assert!((a - b).abs() < 1e-12 * b);
        }
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let mut model = CatteModel::new(tiny_cfg(11)).unwrap();
        let data = tiny_data(8, 11);
        model.fit_layout(&data, Method::Rk4, Some(0.2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        model.set_variational(&random_state(&mut rng, 2)).unwrap();
        let grads = {
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, model.layout_for(&data).unwrap()).unwrap();
            let vv = model.variational_vars(&mut tape, &fwd.bound);
            let rows = fwd.layout.rows_for(data.indexes(), data.times()).unwrap();
            let gs = gather(&mut tape, &fwd.tables, &rows).unwrap();
            let t = elbo_terms(&mut tape, &gs, data.values(), data.len(), &vv, model.prior()).unwrap();
            fwd.bound.collect(&tape.backward(t.elbo).unwrap())
        };
        let h = 1e-6;
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            // spot-check a few entries per block to keep the test quick
            let len = model.store.get(id).data.len();
            for i in (0..len).step_by((len / 3).max(1)) {
                let mut plus = model.clone();
                plus.store.get_mut(id).data[i] += h;
                let mut minus = model.clone();
                minus.store.get_mut(id).data[i] -= h;
                let fd = (plus.elbo(&data).unwrap().elbo - minus.elbo(&data).unwrap().elbo) / (2.0 * h);
                let ad = grads[id.0][i];
                assert!(
                    (fd - ad).abs() <= 1e-4 * fd.abs().max(ad.abs()) + 1e-6,
                    "{}[{i}] fd={fd} ad={ad}",
                    model.store.get(id).name
                );
            }
        }
    }

    #[test]
    fn construction_contract() {
        let mut cfg = tiny_cfg(0);
        cfg.modes = 1;
        assert!(CatteModel::new(cfg).is_err());
        let m = CatteModel::new(tiny_cfg(0)).unwrap();
        let vs = m.variational();
        assert!((vs.alpha[0] - 1e-6).abs() < 1e-18);
        assert!((vs.lambda_mean()[0] - 1.0).abs() < 1e-12);
        assert!(m.fitted().is_err());
        assert!(PriorHyper::uniform(2, 0.0, 1.0, 1.0, 1.0).is_err());
    }
}
