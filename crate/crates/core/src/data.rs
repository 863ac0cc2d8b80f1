//! Observations, the synthetic benchmark, CSV ingestion, splits and noise.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};

use crate::error::{Error, Result};
use crate::odeint::sorted_unique;

/// Affine map from original units to [0, 1], per mode and for time.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub index_min: Vec<f64>,
    pub index_max: Vec<f64>,
    pub time_min: f64,
    pub time_max: f64,
}

impl Normalization {
    pub fn identity(modes: usize) -> Self {
        Self {
            index_min: vec![0.0; modes],
            index_max: vec![1.0; modes],
            time_min: 0.0,
            time_max: 1.0,
        }
    }

    pub fn modes(&self) -> usize {
        self.index_min.len()
    }

    pub fn normalize_index(&self, mode: usize, x: f64) -> f64 {
        (x - self.index_min[mode]) / (self.index_max[mode] - self.index_min[mode])
    }

    pub fn denormalize_index(&self, mode: usize, x: f64) -> f64 {
        self.index_min[mode] + x * (self.index_max[mode] - self.index_min[mode])
    }

    pub fn normalize_time(&self, t: f64) -> f64 {
        (t - self.time_min) / (self.time_max - self.time_min)
    }

    pub fn denormalize_time(&self, t: f64) -> f64 {
        self.time_min + t * (self.time_max - self.time_min)
    }
}

/// Observed entries `{y_n, i_n, t_n}` in column layout, with normalized
/// coordinates and sorted unique tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    indexes: Vec<Vec<f64>>,
    times: Vec<f64>,
    values: Vec<f64>,
    unique_indexes: Vec<Vec<f64>>,
    unique_times: Vec<f64>,
    norm: Normalization,
}

impl ObservationSet {
    /// `indexes[k][n]` is the (normalized) mode-k index of observation n.
    pub fn new(indexes: Vec<Vec<f64>>, times: Vec<f64>, values: Vec<f64>, norm: Normalization) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::Domain("observation set is empty".into()));
        }
        if indexes.is_empty() {
            return Err(Error::Domain("observations need at least one mode".into()));
        }
        if times.len() != n || indexes.iter().any(|c| c.len() != n) {
            return Err(Error::Domain("observation columns have different lengths".into()));
        }
        if norm.modes() != indexes.len() {
            return Err(Error::Domain("normalization metadata has the wrong number of modes".into()));
        }
        let all_finite = values.iter().chain(&times).chain(indexes.iter().flatten()).all(|x| x.is_finite());
        if !all_finite {
            return Err(Error::Domain("observations must be finite".into()));
        }
        if let Some(t) = times.iter().find(|t| **t < 0.0) {
            return Err(Error::Domain(format!("normalized timestamp {t} is negative")));
        }
        let unique_indexes = indexes.iter().map(|c| sorted_unique(c)).collect();
        let unique_times = sorted_unique(&times);
        Ok(Self {
            indexes,
            times,
            values,
            unique_indexes,
            unique_times,
            norm,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn modes(&self) -> usize {
        self.indexes.len()
    }

    pub fn indexes(&self) -> &[Vec<f64>] {
        &self.indexes
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn unique_indexes(&self) -> &[Vec<f64>] {
        &self.unique_indexes
    }

    pub fn unique_times(&self) -> &[f64] {
        &self.unique_times
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    /// Index tuple and timestamp of observation `n`.
    pub fn coordinate(&self, n: usize) -> (Vec<f64>, f64) {
        (self.indexes.iter().map(|c| c[n]).collect(), self.times[n])
    }

    /// The observations at `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let pick = |col: &[f64]| rows.iter().map(|&r| col[r]).collect::<Vec<_>>();
        Self::new(
            self.indexes.iter().map(|c| pick(c)).collect(),
            pick(&self.times),
            pick(&self.values),
            self.norm.clone(),
        )
    }

    /// Same coordinates with different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.indexes.clone(), self.times.clone(), values, self.norm.clone())
    }

    /// Duplicates every observation `times` times (repeated measurements).
    pub fn repeated(&self, times: usize) -> Result<Self> {
        let rows: Vec<usize> = (0..times).flat_map(|_| 0..self.len()).collect();
        self.subset(&rows)
    }
}

/// How the synthetic coordinates are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleLayout {
    /// `n1` random mode-1 indexes × `n2` random mode-2 indexes × `nt` random
    /// timestamps, all uniform on [0, 1], fully crossed.
    #[default]
    Lattice,
    /// `n1·n2·nt` independent uniform draws of every coordinate.
    Scattered,
}

impl FromStr for SampleLayout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lattice" => Ok(Self::Lattice),
            "scattered" => Ok(Self::Scattered),
            other => Err(Error::Config(format!("unknown sample layout '{other}'"))),
        }
    }
}

impl fmt::Display for SampleLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lattice => "lattice",
            Self::Scattered => "scattered",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n1: usize,
    pub n2: usize,
    pub nt: usize,
    pub noise_variance: f64,
    pub seed: u64,
    pub layout: SampleLayout,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n1: 25,
            n2: 25,
            nt: 50,
            noise_variance: 0.05,
            seed: 0,
            layout: SampleLayout::Lattice,
        }
    }
}

/// Noisy observations plus the clean signal at the same coordinates.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub noisy: ObservationSet,
    pub clean: ObservationSet,
}

impl Synthetic {
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            noisy: self.noisy.subset(rows)?,
            clean: self.clean.subset(rows)?,
        })
    }
}

/// Rank-one ground truth `−cos³(2πt + 2.5πi₁) · sin(3πt + 3.5πi₂)`.
pub fn ground_truth(i1: f64, i2: f64, t: f64) -> f64 {
    let u1 = -(2.0 * PI * t + 2.5 * PI * i1).cos().powi(3);
    let u2 = (3.0 * PI * t + 3.5 * PI * i2).sin();
    u1 * u2
}

pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Synthetic> {
    if cfg.n1 == 0 || cfg.n2 == 0 || cfg.nt == 0 {
        return Err(Error::Config("synthetic dimensions must be >= 1".into()));
    }
    if !(cfg.noise_variance >= 0.0 && cfg.noise_variance.is_finite()) {
        return Err(Error::Config("noise variance must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n1 * cfg.n2 * cfg.nt;
    let (mut i1, mut i2, mut t) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    match cfg.layout {
        SampleLayout::Lattice => {
            let a: Vec<f64> = (0..cfg.n1).map(|_| rng.gen()).collect();
            let b: Vec<f64> = (0..cfg.n2).map(|_| rng.gen()).collect();
            let c: Vec<f64> = (0..cfg.nt).map(|_| rng.gen()).collect();
            for &tt in &c {
                for &x in &a {
                    for &y in &b {
                        i1.push(x);
                        i2.push(y);
                        t.push(tt);
                    }
                }
            }
        }
        SampleLayout::Scattered => {
            for _ in 0..n {
                i1.push(rng.gen());
                i2.push(rng.gen());
                t.push(rng.gen());
            }
        }
    }
    let clean: Vec<f64> = (0..n).map(|j| ground_truth(i1[j], i2[j], t[j])).collect();
    let clean = ObservationSet::new(vec![i1, i2], t, clean, Normalization::identity(2))?;
    let noisy = add_noise(&clean, NoiseLaw::Gaussian, cfg.noise_variance, rng.gen())?;
    Ok(Synthetic { noisy, clean })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseLaw {
    Gaussian,
    Laplacian,
    Poisson,
}

impl FromStr for NoiseLaw {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "laplacian" | "laplace" => Ok(Self::Laplacian),
            "poisson" => Ok(Self::Poisson),
            other => Err(Error::Config(format!("unknown noise law '{other}'"))),
        }
    }
}

/// Rate of the shot-noise counts; the perturbation is `√(v/λ)·(P − λ)`.
const SHOT_RATE: f64 = 10.0;

/// Adds zero-mean noise of the given variance to every value.
pub fn add_noise(set: &ObservationSet, law: NoiseLaw, variance: f64, seed: u64) -> Result<ObservationSet> {
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(Error::Domain(format!("noise variance must be >= 0, got {variance}")));
    }
    if variance == 0.0 {
        return Ok(set.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = match law {
        NoiseLaw::Gaussian => {
            let d = Normal::new(0.0, variance.sqrt()).expect("positive std");
            set.values().iter().map(|y| y + d.sample(&mut rng)).collect()
        }
        NoiseLaw::Laplacian => {
            // difference of two exponentials with mean b is Laplace(0, b)
            let b = (variance / 2.0).sqrt();
            let d = Exp::new(1.0 / b).expect("positive rate");
            set.values()
                .iter()
                .map(|y| y + d.sample(&mut rng) - d.sample(&mut rng))
                .collect()
        }
        NoiseLaw::Poisson => {
            let d = Poisson::new(SHOT_RATE).expect("positive rate");
            let c = (variance / SHOT_RATE).sqrt();
            set.values()
                .iter()
                .map(|y| {
                    let p: f64 = d.sample(&mut rng);
                    y + c * (p - SHOT_RATE)
                })
                .collect()
        }
    };
    set.with_values(values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    /// Temporal holdout: train on `t ≤ cutoff`, test on the rest.
    pub cutoff: Option<f64>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
            cutoff: None,
        }
    }
}

/// Row positions of the train and test parts, each sorted ascending.
pub fn split_rows(set: &ObservationSet, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = set.len();
    if n < 2 {
        return Err(Error::Split(format!("need at least 2 observations, have {n}")));
    }
    let (train, test): (Vec<usize>, Vec<usize>) = match spec.cutoff {
        Some(cut) => (0..n).partition(|&r| set.times()[r] <= cut),
        None => {
            if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
                return Err(Error::Split(format!(
                    "train fraction must be in (0, 1), got {}",
                    spec.train_fraction
                )));
            }
            let mut rows: Vec<usize> = (0..n).collect();
            rows.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
            let n_train = (spec.train_fraction * n as f64).round() as usize;
            let mut train = rows[..n_train].to_vec();
            let mut test = rows[n_train..].to_vec();
            train.sort_unstable();
            test.sort_unstable();
            (train, test)
        }
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::Split(format!("split gives {} train / {} test", train.len(), test.len())));
    }
    Ok((train, test))
}

pub fn split(set: &ObservationSet, spec: &SplitSpec) -> Result<(ObservationSet, ObservationSet)> {
    let (a, b) = split_rows(set, spec)?;
    Ok((set.subset(&a)?, set.subset(&b)?))
}

/// Raw rows from a CSV with header `i_1,…,i_K,t,y`.
struct RawCsv {
    indexes: Vec<Vec<f64>>,
    times: Vec<f64>,
    values: Vec<f64>,
}

fn read_raw(path: &Path) -> Result<RawCsv> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let k = cols.len().saturating_sub(2);
    let header_ok = k >= 1
        && cols[k] == "t"
        && cols[k + 1] == "y"
        && cols[..k].iter().enumerate().all(|(j, c)| *c == format!("i_{}", j + 1));
    if !header_ok {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header i_1,…,i_K,t,y, got '{}'", cols.join(",")),
        });
    }
    let mut raw = RawCsv {
        indexes: vec![Vec::new(); k],
        times: Vec::new(),
        values: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if rec.len() != k + 2 {
            return Err(bad(format!("expected {} fields, got {}", k + 2, rec.len())));
        }
        let mut row = Vec::with_capacity(k + 2);
        for field in rec.iter() {
            let x: f64 = field.parse().map_err(|_| bad(format!("'{field}' is not a number")))?;
            if !x.is_finite() {
                return Err(bad(format!("'{field}' is not finite")));
            }
            row.push(x);
        }
        for j in 0..k {
            raw.indexes[j].push(row[j]);
        }
        raw.times.push(row[k]);
        raw.values.push(row[k + 1]);
    }
    if raw.values.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 2,
            msg: "no data rows".into(),
        });
    }
    Ok(raw)
}

fn min_max(column: &str, xs: &[f64]) -> Result<(f64, f64)> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(Error::Normalization {
            column: column.to_string(),
            value: lo,
        });
    }
    Ok((lo, hi))
}

fn apply(raw: RawCsv, norm: Normalization) -> Result<ObservationSet> {
    if norm.modes() != raw.indexes.len() {
        return Err(Error::Config(format!(
            "file has {} modes, expected {}",
            raw.indexes.len(),
            norm.modes()
        )));
    }
    let indexes = raw
        .indexes
        .iter()
        .enumerate()
        .map(|(k, c)| c.iter().map(|&x| norm.normalize_index(k, x)).collect())
        .collect();
    let times = raw.times.iter().map(|&t| norm.normalize_time(t)).collect();
    ObservationSet::new(indexes, times, raw.values, norm)
}

/// Loads and min-max normalizes every coordinate column to [0, 1].
pub fn load_csv(path: impl AsRef<Path>) -> Result<ObservationSet> {
    let raw = read_raw(path.as_ref())?;
    let mut norm = Normalization::identity(raw.indexes.len());
    for (k, c) in raw.indexes.iter().enumerate() {
        let (lo, hi) = min_max(&format!("i_{}", k + 1), c)?;
        norm.index_min[k] = lo;
        norm.index_max[k] = hi;
    }
    let (lo, hi) = min_max("t", &raw.times)?;
    norm.time_min = lo;
    norm.time_max = hi;
    apply(raw, norm)
}

/// Loads coordinates using existing metadata (e.g. a test file mapped with
/// the training set's ranges).
pub fn load_csv_with(path: impl AsRef<Path>, norm: &Normalization) -> Result<ObservationSet> {
    apply(read_raw(path.as_ref())?, norm.clone())
}

/// Writes coordinates in original units.
pub fn save_csv(set: &ObservationSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let k = set.modes();
    let mut header: Vec<String> = (1..=k).map(|j| format!("i_{j}")).collect();
    header.push("t".into());
    header.push("y".into());
    w.write_record(&header)?;
    let norm = set.normalization();
    for n in 0..set.len() {
        let mut row: Vec<String> = (0..k)
            .map(|j| norm.denormalize_index(j, set.indexes()[j][n]).to_string())
            .collect();
        row.push(norm.denormalize_time(set.times()[n]).to_string());
        row.push(set.values()[n].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
