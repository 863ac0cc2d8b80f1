//! Student-t predictive distribution at arbitrary coordinates.

use std::path::Path;

use crate::data::{Normalization, ObservationSet};
use crate::error::{Error, Result};
use crate::model::{reconstruct, CatteModel, VariationalState};
use crate::specialmath::{student_t_cdf, student_t_logpdf, student_t_quantile};

/// Student-t with location `mean`, precision-style `scale` (the density
/// uses `scale·(y − mean)²`) and `dof` degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveLaw {
    pub mean: f64,
    pub scale: f64,
    pub dof: f64,
}

impl PredictiveLaw {
    /// `dof/(dof − 2) / scale`; infinite for `dof ≤ 2`.
    pub fn variance(&self) -> f64 {
        if self.dof > 2.0 {
            self.dof / (self.dof - 2.0) / self.scale
        } else {
            f64::INFINITY
        }
    }

    pub fn ln_pdf(&self, y: f64) -> Result<f64> {
        Ok(student_t_logpdf(y, self.mean, self.scale, self.dof)?)
    }

    pub fn cdf(&self, y: f64) -> Result<f64> {
        Ok(student_t_cdf(y, self.mean, self.scale, self.dof)?)
    }
}

/// μ = Σ_r Π_k g, s = {ι/ρ + σ² Σ_j Σ_r Π_{k≠j} (g_r^k)²}⁻¹, ν = 2ρ.
pub fn law_from_factors(g: &[Vec<f64>], vs: &VariationalState) -> Result<PredictiveLaw> {
    let mean = reconstruct(g)?;
    let r = g[0].len();
    let mut spread = 0.0;
    for j in 0..g.len() {
        for c in 0..r {
            spread += g
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != j)
                .map(|(_, v)| v[c] * v[c])
                .product::<f64>();
        }
    }
    let scale = 1.0 / (vs.iota / vs.rho + vs.sigma2 * spread);
    if !(mean.is_finite() && scale.is_finite() && scale > 0.0) {
        return Err(Error::Degenerate(format!("predictive law not finite (mean {mean}, scale {scale})")));
    }
    Ok(PredictiveLaw {
        mean,
        scale,
        dof: 2.0 * vs.rho,
    })
}

/// Predictive laws at normalized coordinates; all queries share one
/// trajectory roll over the union of the training grid and query times.
pub fn predict(model: &CatteModel, indexes: &[Vec<f64>], times: &[f64]) -> Result<Vec<PredictiveLaw>> {
    let vs = model.variational();
    model
        .factors_at(indexes, times)?
        .iter()
        .map(|g| law_from_factors(g, &vs))
        .collect()
}

pub fn predict_set(model: &CatteModel, data: &ObservationSet) -> Result<Vec<PredictiveLaw>> {
    predict(model, data.indexes(), data.times())
}

/// Central interval holding `level` of the predictive mass.
pub fn predict_interval(law: &PredictiveLaw, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("interval level must be in (0, 1), got {level}")));
    }
    let hi = student_t_quantile(0.5 + 0.5 * level, law.mean, law.scale, law.dof)?;
    // symmetric by construction
    Ok((2.0 * law.mean - hi, hi))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
}

pub fn metrics(predicted: &[f64], truth: &[f64]) -> Result<Metrics> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(Error::Domain("metrics need equal-length, non-empty inputs".into()));
    }
    let n = predicted.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in predicted.iter().zip(truth) {
        se += (p - t) * (p - t);
        ae += (p - t).abs();
    }
    Ok(Metrics {
        rmse: (se / n).sqrt(),
        mae: ae / n,
    })
}

/// RMSE/MAE of predictive means against the values in `test`.
pub fn evaluate(model: &CatteModel, test: &ObservationSet) -> Result<Metrics> {
    let means: Vec<f64> = predict_set(model, test)?.iter().map(|l| l.mean).collect();
    metrics(&means, test.values())
}

/// Columns i_1..i_K, t, mean, scale, dof, lo, hi; coordinates in original
/// units.
pub fn write_predictions(
    path: impl AsRef<Path>,
    norm: &Normalization,
    indexes: &[Vec<f64>],
    times: &[f64],
    laws: &[PredictiveLaw],
    level: f64,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let k = indexes.len();
    let mut header: Vec<String> = (1..=k).map(|j| format!("i_{j}")).collect();
    header.extend(["t", "mean", "scale", "dof", "lo", "hi"].map(String::from));
    w.write_record(&header)?;
    for (n, law) in laws.iter().enumerate() {
        let (lo, hi) = predict_interval(law, level)?;
        let mut row: Vec<String> = (0..k).map(|j| norm.denormalize_index(j, indexes[j][n]).to_string()).collect();
        row.push(norm.denormalize_time(times[n]).to_string());
        for x in [law.mean, law.scale, law.dof, lo, hi] {
            row.push(x.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};
    use crate::model::ModelConfig;
    use crate::nets::NetConfig;
    use crate::odeint::Method;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vs(sigma2: f64) -> VariationalState {
        VariationalState {
            alpha: vec![1.0; 2],
            beta: vec![1.0; 2],
            sigma2,
            rho: 3.0,
            iota: 1.5,
        }
    }

    #[test]
    fn law_formula() {
        let g = vec![vec![1.0, 2.0], vec![3.0, -1.0]];
        let zero = law_from_factors(&g, &vs(0.0)).unwrap();
        assert_eq!(zero.mean, 1.0);
        assert_eq!(zero.scale, 2.0);
        assert_eq!(zero.dof, 6.0);
        let some = law_from_factors(&g, &vs(0.1)).unwrap();
        // Σ_j Σ_r Π_{k≠j} g² = (9 + 1) + (1 + 4)
        assert!((1.0 / some.scale - (0.5 + 0.1 * 15.0)).abs() < 1e-14);
        let more = law_from_factors(&g, &vs(0.2)).unwrap();
        assert!(more.scale < some.scale && some.scale < zero.scale);
        assert!((zero.variance() - 6.0 / 4.0 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn intervals() {
        let law = PredictiveLaw {
            mean: 0.7,
            scale: 4.0,
            dof: 5.0,
        };
        let (lo, hi) = predict_interval(&law, 0.95).unwrap();
        assert!(((law.mean - lo) - (hi - law.mean)).abs() < 1e-12);
        assert!((law.cdf(hi).unwrap() - 0.975).abs() < 1e-9);
        let (lo, hi) = predict_interval(&law, 1e-9).unwrap();
        assert!((hi - lo).abs() < 1e-8 && (hi - 0.7).abs() < 1e-8);
        assert!(predict_interval(&law, 0.0).is_err());
        assert!(predict_interval(&law, 1.0).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((m.rmse, m.mae), (0.0, 0.0));
        let m = metrics(&[1.5, 2.5, -0.5], &[1.0, 2.0, -1.0]).unwrap();
        assert!((m.rmse - 0.5).abs() < 1e-15 && (m.mae - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut se = 0.0;
        let mut ae = 0.0;
        for i in 0..50 {
            se += (p[i] - t[i]).powi(2);
            ae += (p[i] - t[i]).abs();
        }
        let m = metrics(&p, &t).unwrap();
        assert!((m.rmse - (se / 50.0).sqrt()).abs() < 1e-14);
        assert!((m.mae - ae / 50.0).abs() < 1e-14);
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn training_coordinates_reproduce_reconstruction() {
        let net = NetConfig {
            fourier_dim: 3,
            latent_dim: 3,
            rank: 2,
            encoder_hidden: vec![4],
            dynamics_hidden: vec![4],
            decoder_hidden: vec![4],
        };
        let s = gen_synthetic(&SynthConfig {
            n1: 3,
            n2: 3,
            nt: 4,
            noise_variance: 0.0,
            seed: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut m = CatteModel::new(ModelConfig::new(2, net)).unwrap();
        m.fit_layout(&s.noisy, Method::Rk4, None).unwrap();
        let train_g = m.factors(&s.noisy).unwrap();
        // add off-grid query times, forcing a finer union grid
        let extra = [vec![0.123, s.noisy.indexes()[0][5]], vec![0.9, s.noisy.indexes()[1][5]]];
        let mut idx = s.noisy.indexes().to_vec();
        idx[0].extend(&extra[0]);
        idx[1].extend(&extra[1]);
        let mut times = s.noisy.times().to_vec();
        times.extend([0.05, 1.3]);
        let laws = predict(&m, &idx, &times).unwrap();
        assert_eq!(laws.len(), s.noisy.len() + 2);
        for (law, g) in laws.iter().zip(&train_g) {
            assert_eq!(law.mean, reconstruct(g).unwrap());
            assert_eq!(law.dof, 2.0 * m.variational().rho);
        }
        let ev = evaluate(&m, &s.clean).unwrap();
        assert!(ev.rmse.is_finite() && ev.mae <= ev.rmse);
    }
}
