//! Per-mode networks: learnable Fourier features, the encoder producing the
//! initial latent state, the dynamics field, and the decoder to factor space.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

/// Layer widths for the three networks of one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Number of Fourier frequencies M (feature dimension 2M).
    pub fourier_dim: usize,
    /// Latent ODE state dimension J.
    pub latent_dim: usize,
    /// Number of factor components R.
    pub rank: usize,
    pub encoder_hidden: Vec<usize>,
    pub dynamics_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            fourier_dim: 32,
            latent_dim: 5,
            rank: 5,
            encoder_hidden: vec![100],
            dynamics_hidden: vec![100, 100],
            decoder_hidden: vec![100, 100],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Fully connected network, tanh on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub dims: Vec<usize>,
}

impl Mlp {
    /// Registers an MLP with widths `input, hidden..., output`; weights and
    /// biases are uniform in ±1/√fan_in.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let wdata = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-bound..=bound))
                    .collect();
                let bdata = (0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
                Layer {
                    weight: store.add(format!("{prefix}.{l}.w"), fan_in, fan_out, wdata),
                    bias: store.add(format!("{prefix}.{l}.b"), 1, fan_out, bdata),
                }
            })
            .collect();
        Self { layers, dims }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("an MLP has at least one layer")
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = tape.linear(h, bound.var(layer.weight), bound.var(layer.bias))?;
            if l != last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    pub fn output_layer(&self) -> Layer {
        *self.layers.last().expect("an MLP has at least one layer")
    }
}

/// `i ↦ [cos(2π b i); sin(2π b i)]` with learnable frequencies `b ∈ R^M`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierFeatureMap {
    pub freqs: ParamId,
    pub dim: usize,
}

impl FourierFeatureMap {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) -> Self {
        let data = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            freqs: store.add(format!("{prefix}.fourier.b"), 1, dim, data),
            dim,
        }
    }

    /// Features for a U×1 column of indexes, U×2M.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, index: Var) -> Result<Var> {
        let phase = tape.matmul(index, bound.var(self.freqs))?;
        let phase = tape.scale(phase, 2.0 * PI);
        let c = tape.cos(phase);
        let s = tape.sin(phase);
        Ok(tape.concat_cols(&[c, s])?)
    }
}

/// Everything learnable for one tensor mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeNetwork {
    pub mode: usize,
    pub fourier: FourierFeatureMap,
    pub encoder: Mlp,
    pub dynamics: Mlp,
    pub decoder: Mlp,
}

fn check_finite(what: &str, xs: &[f64]) -> Result<()> {
    match xs.iter().find(|x| !x.is_finite()) {
        Some(bad) => Err(Error::Domain(format!("{what}: non-finite input {bad}"))),
        None => Ok(()),
    }
}

impl ModeNetwork {
    pub fn new<R: Rng>(store: &mut ParamStore, mode: usize, cfg: &NetConfig, rng: &mut R) -> Self {
        let prefix = format!("mode{mode}");
        let fourier = FourierFeatureMap::new(store, &prefix, cfg.fourier_dim, rng);
        let encoder = Mlp::new(
            store,
            &format!("{prefix}.encoder"),
            2 * cfg.fourier_dim,
            &cfg.encoder_hidden,
            cfg.latent_dim,
            rng,
        );
        let dynamics = Mlp::new(
            store,
            &format!("{prefix}.dynamics"),
            cfg.latent_dim + 1,
            &cfg.dynamics_hidden,
            cfg.latent_dim,
            rng,
        );
        let decoder = Mlp::new(
            store,
            &format!("{prefix}.decoder"),
            cfg.latent_dim,
            &cfg.decoder_hidden,
            cfg.rank,
            rng,
        );
        Self {
            mode,
            fourier,
            encoder,
            dynamics,
            decoder,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn rank(&self) -> usize {
        self.decoder.output_dim()
    }

    /// Initial states z(i, 0) for a batch of indexes, U×J.
    pub fn encode_initial_state(&self, tape: &mut Tape, bound: &Bound, indexes: &[f64]) -> Result<Var> {
        check_finite("encode_initial_state", indexes)?;
        let col = tape.leaf_col(indexes);
        let feats = self.fourier.forward(tape, bound, col)?;
        self.encoder.forward(tape, bound, feats)
    }

    /// dz/dt = h_θ(z, t) for every row of `state`; `t` enters as an extra
    /// input column.
    pub fn dynamics_step(&self, tape: &mut Tape, bound: &Bound, state: Var, time: f64) -> Result<Var> {
        if !time.is_finite() {
            return Err(Error::Domain(format!("dynamics_step: non-finite time {time}")));
        }
        let tcol = tape.leaf_col(&vec![time; state.rows()]);
        let input = tape.concat_cols(&[state, tcol])?;
        self.dynamics.forward(tape, bound, input)
    }

    /// Row-wise decoder, U×J → U×R.
    pub fn decode(&self, tape: &mut Tape, bound: &Bound, state: Var) -> Result<Var> {
        self.decoder.forward(tape, bound, state)
    }
}
