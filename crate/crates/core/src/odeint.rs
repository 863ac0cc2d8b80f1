//! Fixed-step integration of the latent dynamics, on tape.
//!
//! All rows of a state table share one solver sweep; gradients flow through
//! the unrolled steps (discretize-then-optimize). Modes are uncoupled, so
//! [`roll_trajectories`] simply loops over modes inside the same tape.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nets::ModeNetwork;
use crate::params::Bound;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    Euler,
    #[default]
    Rk4,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            other => Err(Error::Config(format!("unknown solver '{other}'"))),
        }
    }
}

/// A right-hand side `dz/dt = f(z, t)` evaluated row-wise on a tape.
pub trait VectorField {
    fn eval(&self, tape: &mut Tape, state: Var, time: f64) -> Result<Var>;
}

/// The dynamics network of one mode bound to a set of tape leaves.
pub struct ModeField<'a> {
    pub net: &'a ModeNetwork,
    pub bound: &'a Bound,
}

impl VectorField for ModeField<'_> {
    fn eval(&self, tape: &mut Tape, state: Var, time: f64) -> Result<Var> {
        self.net.dynamics_step(tape, self.bound, state, time)
    }
}

fn axpy(tape: &mut Tape, z: Var, k: Var, a: f64) -> Result<Var> {
    let step = tape.scale(k, a);
    Ok(tape.add(z, step)?)
}

/// Advances every row of `table` from `from` to `to` using
/// `⌈(to − from)/h⌉` equal steps.
pub fn ode_solve(
    tape: &mut Tape,
    field: &dyn VectorField,
    table: Var,
    from: f64,
    to: f64,
    method: Method,
    h: f64,
) -> Result<Var> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!("ode_solve: step must be > 0, got {h}")));
    }
    if !(from.is_finite() && to.is_finite()) || to < from {
        return Err(Error::Domain(format!("ode_solve: invalid interval [{from}, {to}]")));
    }
    if to == from {
        return Ok(table);
    }
    let steps = ((to - from) / h).ceil().max(1.0) as usize;
    let dt = (to - from) / steps as f64;
    let mut z = table;
    for s in 0..steps {
        let t = from + s as f64 * dt;
        z = match method {
            Method::Euler => {
                let k = field.eval(tape, z, t)?;
                axpy(tape, z, k, dt)?
            }
            Method::Rk4 => {
                let k1 = field.eval(tape, z, t)?;
                let z2 = axpy(tape, z, k1, 0.5 * dt)?;
                let k2 = field.eval(tape, z2, t + 0.5 * dt)?;
                let z3 = axpy(tape, z, k2, 0.5 * dt)?;
                let k3 = field.eval(tape, z3, t + 0.5 * dt)?;
                let z4 = axpy(tape, z, k3, dt)?;
                let k4 = field.eval(tape, z4, t + dt)?;
                let k23 = tape.add(k2, k3)?;
                let k14 = tape.add(k1, k4)?;
                let k23 = tape.scale(k23, 2.0);
                let sum = tape.add(k14, k23)?;
                axpy(tape, z, sum, dt / 6.0)?
            }
        };
        if tape.value(z).iter().any(|x| !x.is_finite()) {
            return Err(Error::Integration {
                time: from + (s + 1) as f64 * dt,
            });
        }
    }
    Ok(z)
}

/// Strictly increasing timestamps plus the solver step used between them.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    step: f64,
}

impl TimeGrid {
    /// Sorts and deduplicates `times`. All must be finite and ≥ 0 because
    /// integration starts at t = 0.
    pub fn new(times: &[f64], step: f64) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Domain("time grid needs at least one timestamp".into()));
        }
        if let Some(bad) = times.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(Error::Domain(format!("timestamp {bad} must be finite and >= 0")));
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Domain(format!("solver step must be > 0, got {step}")));
        }
        Ok(Self {
            times: sorted_unique(times),
            step,
        })
    }

    /// Grid with the default step `(t_max − t_min)/(4T)`.
    pub fn with_default_step(times: &[f64]) -> Result<Self> {
        let unique = sorted_unique(times);
        let step = default_step(&unique);
        Self::new(&unique, step)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Position of an exact timestamp.
    pub fn position(&self, t: f64) -> Option<usize> {
        self.times.binary_search_by(|x| x.total_cmp(&t)).ok()
    }

    /// Union with extra timestamps, keeping this grid's step.
    pub fn merged(&self, extra: &[f64]) -> Result<Self> {
        let mut all = self.times.clone();
        all.extend_from_slice(extra);
        Self::new(&all, self.step)
    }
}

/// `(t_max − t_min) / (4T)` over the unique timestamps; a single timestamp
/// falls back to `max(t, 1) / 4`.
pub fn default_step(unique_times: &[f64]) -> f64 {
    let t = unique_times.len().max(1) as f64;
    let (lo, hi) = unique_times
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = hi - lo;
    if span > 0.0 {
        span / (4.0 * t)
    } else {
        hi.max(1.0) / 4.0
    }
}

pub fn sorted_unique(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    v
}

/// Latent state tables per mode per grid timestamp: `states[k][i]` is the
/// U_k×J table at `grid.times()[i]`.
#[derive(Debug, Clone)]
pub struct RolledStates {
    pub states: Vec<Vec<Var>>,
}

/// Encodes each mode's unique indexes at t = 0 and integrates sequentially
/// across the grid (0 → t_1 → … → t_T).
pub fn roll_trajectories(
    tape: &mut Tape,
    bound: &Bound,
    modes: &[ModeNetwork],
    index_tables: &[Vec<f64>],
    grid: &TimeGrid,
    method: Method,
) -> Result<RolledStates> {
    roll_branched(tape, bound, modes, index_tables, grid, grid.times(), method)
}

/// Like [`roll_trajectories`], but only the `spine` timestamps are chained;
/// every other grid time branches off the latest spine state before it.
/// States on the spine are therefore identical whatever else is queried.
pub fn roll_branched(
    tape: &mut Tape,
    bound: &Bound,
    modes: &[ModeNetwork],
    index_tables: &[Vec<f64>],
    grid: &TimeGrid,
    spine: &[f64],
    method: Method,
) -> Result<RolledStates> {
    if modes.len() != index_tables.len() {
        return Err(Error::Lookup(format!(
            "{} mode networks but {} index tables",
            modes.len(),
            index_tables.len()
        )));
    }
    let on_spine: Vec<bool> = grid
        .times()
        .iter()
        .map(|t| spine.binary_search_by(|x| x.total_cmp(t)).is_ok())
        .collect();
    let mut states = Vec::with_capacity(modes.len());
    for (net, table) in modes.iter().zip(index_tables) {
        let field = ModeField { net, bound };
        let mut z = net.encode_initial_state(tape, bound, table)?;
        let mut t_prev = 0.0;
        let mut per_time = Vec::with_capacity(grid.len());
        for (&t, &chained) in grid.times().iter().zip(&on_spine) {
            let next = ode_solve(tape, &field, z, t_prev, t, method, grid.step())?;
            if chained {
                z = next;
                t_prev = t;
            }
            per_time.push(next);
        }
        states.push(per_time);
    }
    Ok(RolledStates { states })
}

/// Where each (index, timestamp) pair lives inside a decoded trajectory
/// table: row `time_pos · U_k + index_pos`.
#[derive(Debug, Clone, PartialEq)]
pub struct TableLayout {
    pub index_tables: Vec<Vec<f64>>,
    pub grid: TimeGrid,
    /// Sorted timestamps integrated in sequence; see [`roll_branched`].
    pub spine: Vec<f64>,
}

impl TableLayout {
    /// Every grid time is on the spine.
    pub fn new(index_tables: Vec<Vec<f64>>, grid: TimeGrid) -> Self {
        let spine = grid.times().to_vec();
        Self::with_spine(index_tables, grid, &spine)
    }

    pub fn with_spine(index_tables: Vec<Vec<f64>>, grid: TimeGrid, spine: &[f64]) -> Self {
        let index_tables = index_tables.iter().map(|t| sorted_unique(t)).collect();
        Self {
            index_tables,
            grid,
            spine: sorted_unique(spine),
        }
    }

    pub fn modes(&self) -> usize {
        self.index_tables.len()
    }

    /// Exact lookup; no interpolation.
    pub fn row(&self, mode: usize, index: f64, time: f64) -> Result<usize> {
        let table = self
            .index_tables
            .get(mode)
            .ok_or_else(|| Error::Lookup(format!("no mode {mode}")))?;
        let u = table
            .binary_search_by(|x| x.total_cmp(&index))
            .map_err(|_| Error::Lookup(format!("index {index} not in mode {mode} table")))?;
        let t = self
            .grid
            .position(time)
            .ok_or_else(|| Error::Lookup(format!("timestamp {time} not on the grid")))?;
        Ok(t * table.len() + u)
    }

    /// Row positions per mode for a column-oriented set of coordinates.
    pub fn rows_for(&self, indexes: &[Vec<f64>], times: &[f64]) -> Result<Vec<Vec<usize>>> {
        if indexes.len() != self.modes() {
            return Err(Error::Lookup(format!(
                "coordinates have {} modes, layout has {}",
                indexes.len(),
                self.modes()
            )));
        }
        indexes
            .iter()
            .enumerate()
            .map(|(k, col)| {
                col.iter()
                    .zip(times)
                    .map(|(&i, &t)| self.row(k, i, t))
                    .collect()
            })
            .collect()
    }
}

/// Decodes every rolled state, giving per mode a (T·U_k)×R table laid out
/// as described by [`TableLayout`].
pub fn decode_tables(
    tape: &mut Tape,
    bound: &Bound,
    modes: &[ModeNetwork],
    rolled: &RolledStates,
) -> Result<Vec<Var>> {
    modes
        .iter()
        .zip(&rolled.states)
        .map(|(net, per_time)| {
            let stacked = tape.concat_rows(per_time)?;
            net.decode(tape, bound, stacked)
        })
        .collect()
}

/// Per-observation factor vectors: for each mode an N×R matrix whose row n
/// is g^k(i_k^n, t_n).
pub fn gather_g(tape: &mut Tape, tables: &[Var], rows: &[Vec<usize>]) -> Result<Vec<Var>> {
    tables
        .iter()
        .zip(rows)
        .map(|(&table, r)| Ok(tape.gather_rows(table, r)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetConfig;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Linear {
        // row-major Aᵀ so that rows evolve as z ← z·Aᵀ
        a_t: Vec<f64>,
        n: usize,
    }

    impl VectorField for Linear {
        fn eval(&self, tape: &mut Tape, state: Var, _time: f64) -> Result<Var> {
            let a = tape.leaf(self.n, self.n, self.a_t.clone())?;
            Ok(tape.matmul(state, a)?)
        }
    }

    /// Rotation-with-decay system; exp(At) is known in closed form.
    fn rotation(decay: f64, omega: f64) -> Linear {
        // A = [[-d, -w], [w, -d]]; Aᵀ = [[-d, w], [-w, -d]]
        Linear {
            a_t: vec![-decay, omega, -omega, -decay],
            n: 2,
        }
    }

    fn exact(z0: [f64; 2], decay: f64, omega: f64, t: f64) -> [f64; 2] {
        let e = (-decay * t).exp();
        let (c, s) = ((omega * t).cos(), (omega * t).sin());
        [e * (c * z0[0] - s * z0[1]), e * (s * z0[0] + c * z0[1])]
    }

    fn solve_err(method: Method, h: f64) -> f64 {
        let (d, w) = (0.3, 2.0);
        let z0 = [1.0, 0.5];
        let mut tape = Tape::new();
        let z = tape.leaf(1, 2, z0.to_vec()).unwrap();
        let out = ode_solve(&mut tape, &rotation(d, w), z, 0.0, 1.0, method, h).unwrap();
        let got = tape.value(out);
        let want = exact(z0, d, w, 1.0);
        ((got[0] - want[0]).powi(2) + (got[1] - want[1]).powi(2)).sqrt()
    }

    pub(crate) fn convergence_slope(method: Method) -> f64 {
        let hs: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];
        let pts: Vec<(f64, f64)> = hs.iter().map(|&h| (h.ln(), solve_err(method, h).ln())).collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    }

    #[test]
    fn solver_orders() {
        let euler = convergence_slope(Method::Euler);
        let rk4 = convergence_slope(Method::Rk4);
        assert!((euler - 1.0).abs() <= 0.3, "euler slope {euler}");
        assert!((rk4 - 4.0).abs() <= 0.3, "rk4 slope {rk4}");
    }

    #[test]
    fn zero_interval_is_identity() {
        let mut tape = Tape::new();
        let z = tape.leaf(1, 2, vec![1.0, 2.0]).unwrap();
        let out = ode_solve(&mut tape, &rotation(0.1, 1.0), z, 0.4, 0.4, Method::Rk4, 0.1).unwrap();
        assert_eq!(out, z);
        assert!(ode_solve(&mut tape, &rotation(0.1, 1.0), z, 0.5, 0.4, Method::Rk4, 0.1).is_err());
        assert!(ode_solve(&mut tape, &rotation(0.1, 1.0), z, 0.0, 0.4, Method::Rk4, 0.0).is_err());
    }

    #[test]
    fn blow_up_reports_time() {
        let mut tape = Tape::new();
        let z = tape.leaf(1, 1, vec![1.0]).unwrap();
        let field = Linear { a_t: vec![1e300], n: 1 };
        let err = ode_solve(&mut tape, &field, z, 0.0, 1.0, Method::Euler, 0.25).unwrap_err();
        assert!(matches!(err, Error::Integration { time } if time > 0.0 && time <= 1.0));
    }

    fn tiny_modes(seed: u64) -> (ParamStore, Vec<ModeNetwork>) {
        let cfg = NetConfig {
            fourier_dim: 3,
            latent_dim: 3,
            rank: 2,
            encoder_hidden: vec![4],
            dynamics_hidden: vec![4, 4],
            decoder_hidden: vec![4],
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes = (0..2).map(|k| ModeNetwork::new(&mut store, k, &cfg, &mut rng)).collect();
        (store, modes)
    }

    #[test]
    fn zero_dynamics_keeps_states() {
        let (mut store, modes) = tiny_modes(1);
        for layer in &modes[0].dynamics.layers {
            store.get_mut(layer.weight).data.iter_mut().for_each(|x| *x = 0.0);
            store.get_mut(layer.bias).data.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let z0 = modes[0].encode_initial_state(&mut tape, &b, &[0.2, 0.8]).unwrap();
        let field = ModeField { net: &modes[0], bound: &b };
        let z1 = ode_solve(&mut tape, &field, z0, 0.0, 0.7, Method::Rk4, 0.05).unwrap();
        assert_eq!(tape.value(z0), tape.value(z1));
    }

    #[test]
    fn later_timestamps_do_not_change_earlier_states() {
        let (store, modes) = tiny_modes(2);
        let tables = vec![vec![0.1, 0.5], vec![0.3]];
        let short = TimeGrid::new(&[0.2, 0.5], 0.05).unwrap();
        let long = TimeGrid::new(&[0.2, 0.5, 0.9, 1.0], 0.05).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let a = roll_trajectories(&mut tape, &b, &modes, &tables, &short, Method::Rk4).unwrap();
        let c = roll_trajectories(&mut tape, &b, &modes, &tables, &long, Method::Rk4).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                assert_eq!(tape.value(a.states[k][i]), tape.value(c.states[k][i]));
            }
        }
    }

    #[test]
    fn branches_leave_the_spine_untouched() {
        let (store, modes) = tiny_modes(6);
        let tables = vec![vec![0.1, 0.5], vec![0.3]];
        let spine = TimeGrid::new(&[0.2, 0.5], 0.07).unwrap();
        let union = spine.merged(&[0.3, 0.9]).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let a = roll_trajectories(&mut tape, &b, &modes, &tables, &spine, Method::Rk4).unwrap();
        let c = roll_branched(&mut tape, &b, &modes, &tables, &union, spine.times(), Method::Rk4).unwrap();
        for k in 0..2 {
            assert_eq!(tape.value(a.states[k][0]), tape.value(c.states[k][0]));
            assert_eq!(tape.value(a.states[k][1]), tape.value(c.states[k][2]));
        }
        // the branch at 0.3 starts from the spine state at 0.2
        let field = ModeField { net: &modes[0], bound: &b };
        let z = ode_solve(&mut tape, &field, a.states[0][0], 0.2, 0.3, Method::Rk4, 0.07).unwrap();
        assert_eq!(tape.value(z), tape.value(c.states[0][1]));
    }

    #[test]
    fn single_timestamp_is_encode_then_solve() {
        let (store, modes) = tiny_modes(3);
        let grid = TimeGrid::new(&[0.6], 0.1).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let rolled = roll_trajectories(&mut tape, &b, &modes, &[vec![0.4], vec![0.9]], &grid, Method::Euler).unwrap();
        let z0 = modes[1].encode_initial_state(&mut tape, &b, &[0.9]).unwrap();
        let field = ModeField { net: &modes[1], bound: &b };
        let z = ode_solve(&mut tape, &field, z0, 0.0, 0.6, Method::Euler, 0.1).unwrap();
        assert_eq!(tape.value(rolled.states[1][0]), tape.value(z));
    }

    #[test]
    fn gather_is_exact_lookup() {
        let (store, modes) = tiny_modes(4);
        let layout = TableLayout::new(vec![vec![0.7, 0.1], vec![0.5]], TimeGrid::new(&[0.3, 0.6], 0.1).unwrap());
        assert!(layout.row(0, 0.7, 0.45).is_err());
        assert!(layout.row(0, 0.2, 0.3).is_err());
        let idx = vec![vec![0.1, 0.7, 0.1], vec![0.5, 0.5, 0.5]];
        let times = vec![0.6, 0.3, 0.6];
        let rows = layout.rows_for(&idx, &times).unwrap();
        assert_eq!(rows[0], vec![2, 1, 2]);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let rolled = roll_trajectories(&mut tape, &b, &modes, &layout.index_tables, &layout.grid, Method::Rk4).unwrap();
        let tables = decode_tables(&mut tape, &b, &modes, &rolled).unwrap();
        let g = gather_g(&mut tape, &tables, &rows).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].shape(), (3, 2));
        let v = tape.value(g[0]);
        assert_eq!(&v[0..2], &v[4..6]);
    }

    #[test]
    fn rolled_gradients_match_finite_differences() {
        let (store, modes) = tiny_modes(5);
        let tables = vec![vec![0.15, 0.6], vec![0.35, 0.8]];
        let grid = TimeGrid::new(&[0.25, 0.5], 0.1).unwrap();
        let f = |s: &ParamStore, tape: &mut Tape| {
            let b = s.bind(tape);
            let rolled = roll_trajectories(tape, &b, &modes, &tables, &grid, Method::Rk4).unwrap();
            let dec = decode_tables(tape, &b, &modes, &rolled).unwrap();
            let both = tape.concat_cols(&dec).unwrap();
            let sq = tape.sin(both);
            let loss = tape.sum(sq);
            (b, loss)
        };
        let mut tape = Tape::new();
        let (b, loss) = f(&store, &mut tape);
        let grads = b.collect(&tape.backward(loss).unwrap());
        let h = 1e-5;
        for (id, p) in store.iter() {
            for i in 0..p.data.len() {
                let mut plus = store.clone();
                plus.get_mut(id).data[i] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data[i] -= h;
                let mut t1 = Tape::new();
                let (_, lp) = f(&plus, &mut t1);
                let mut t2 = Tape::new();
                let (_, lm) = f(&minus, &mut t2);
                let fd = (t1.item(lp) - t2.item(lm)) / (2.0 * h);
                let ad = grads[id.0][i];
                assert!((fd - ad).abs() <= 1e-4 * fd.abs().max(ad.abs()) + 1e-7, "{}[{i}] fd={fd} ad={ad}", p.name);
            }
        }
    }

    #[test]
    fn grid_construction() {
        let g = TimeGrid::with_default_step(&[0.5, 0.1, 0.5, 0.9]).unwrap();
        assert_eq!(g.times(), &[0.1, 0.5, 0.9]);
        assert!((g.step() - 0.8 / 12.0).abs() < 1e-15);
        assert!(TimeGrid::new(&[-0.1], 0.1).is_err());
        assert!(TimeGrid::new(&[], 0.1).is_err());
        let m = g.merged(&[0.3, 0.9]).unwrap();
        assert_eq!(m.times(), &[0.1, 0.3, 0.5, 0.9]);
        assert_eq!(m.step(), g.step());
        assert_eq!("euler".parse::<Method>().unwrap(), Method::Euler);
        assert!("midpoint".parse::<Method>().is_err());
    }
}
