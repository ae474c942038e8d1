//! Channel-wise fit metrics. Signals are row-major `N × n_channels` buffers.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub channels: Vec<String>,
    pub r2: Vec<f64>,
    pub rmse: Vec<f64>,
    pub n: usize,
}

impl MetricReport {
    pub fn compute(channels: &[String], y_meas: &[f64], y_sim: &[f64]) -> Result<Self> {
        let n_ch = channels.len();
        Ok(Self {
            channels: channels.to_vec(),
            r2: r2(y_meas, y_sim, n_ch)?,
            rmse: rmse(y_meas, y_sim, n_ch)?,
            n: y_meas.len() / n_ch.max(1),
        })
    }
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, name) in self.channels.iter().enumerate() {
            writeln!(
                f,
                "{name:>10}  R2 = {:.4}  RMSE = {:.6}",
                self.r2[i], self.rmse[i]
            )?;
        }
        Ok(())
    }
}

fn check_shapes(y_meas: &[f64], y_sim: &[f64], n_ch: usize) -> Result<usize> {
    if n_ch == 0 {
        return Err(Error::Config("at least one channel is required".into()));
    }
    check_len("simulated signal", y_meas.len(), y_sim.len())?;
    if !y_meas.len().is_multiple_of(n_ch) {
        return Err(Error::Dimension {
            context: "signal rows",
            expected: n_ch,
            actual: y_meas.len() % n_ch,
        });
    }
    Ok(y_meas.len() / n_ch)
}

/// `1 − Σ(y − ŷ)² / Σ(y − ȳ)²` per channel.
pub fn r2(y_meas: &[f64], y_sim: &[f64], n_ch: usize) -> Result<Vec<f64>> {
    let n = check_shapes(y_meas, y_sim, n_ch)?;
    if n < 2 {
        return Err(Error::Config("R2 needs at least two samples".into()));
    }
    (0..n_ch)
        .map(|c| {
            let col = |v: &[f64], k: usize| v[k * n_ch + c];
            let mean = (0..n).map(|k| col(y_meas, k)).sum::<f64>() / n as f64;
            let ss_tot: f64 = (0..n).map(|k| (col(y_meas, k) - mean).powi(2)).sum();
            let ss_res: f64 = (0..n)
                .map(|k| (col(y_meas, k) - col(y_sim, k)).powi(2))
                .sum();
            if ss_tot == 0.0 {
                return Err(Error::ConstantChannel(format!("#{c}")));
            }
            Ok(1.0 - ss_res / ss_tot)
        })
        .collect()
}

/// `sqrt(mean((y − ŷ)²))` per channel.
pub fn rmse(y_meas: &[f64], y_sim: &[f64], n_ch: usize) -> Result<Vec<f64>> {
    let n = check_shapes(y_meas, y_sim, n_ch)?;
    if n == 0 {
        return Err(Error::Config("RMSE needs at least one sample".into()));
    }
    Ok((0..n_ch)
        .map(|c| {
            let ss: f64 = (0..n)
                .map(|k| (y_meas[k * n_ch + c] - y_sim[k * n_ch + c]).powi(2))
                .sum();
            (ss / n as f64).sqrt()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_and_mean_predictions() {
        let y = [1.0, 10.0, 2.0, 20.0, 4.0, 25.0];
        assert_eq!(r2(&y, &y, 2).unwrap(), vec![1.0, 1.0]);
        let mean = [7.0 / 3.0, 55.0 / 3.0];
        let sim: Vec<f64> = (0..3).flat_map(|_| mean).collect();
        for v in r2(&y, &sim, 2).unwrap() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_values() {
        let r = r2(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 5.0], 1).unwrap();
        assert!((r[0] - 0.2).abs() < 1e-12);
        let e = rmse(&[0.0, 0.0], &[3.0, 4.0], 1).unwrap();
        assert!((e[0] - (12.5f64).sqrt()).abs() < 1e-12);
        assert!((e[0] - 3.5355).abs() < 1e-4);
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0], 1).unwrap(), vec![0.0]);
        let e = rmse(&[1.0, 2.0, 3.0], &[1.5, 2.5, 3.5], 1).unwrap();
        assert!((e[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            r2(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], 1),
            Err(Error::ConstantChannel(_))
        ));
        assert!(rmse(&[1.0, 2.0], &[1.0], 1).is_err());
        assert!(r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 2).is_err());
    }

    proptest! {
        #[test]
        fn affine_invariance_and_scaling(
            ys in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let meas: Vec<f64> = ys.iter().map(|p| p.0).collect();
            let sim: Vec<f64> = ys.iter().map(|p| p.1).collect();
            let mean = meas.iter().sum::<f64>() / meas.len() as f64;
            let ss_tot: f64 = meas.iter().map(|v| (v - mean).powi(2)).sum();
            prop_assume!(ss_tot > 1e-6);
            let r = r2(&meas, &sim, 1).unwrap()[0];
            let e = rmse(&meas, &sim, 1).unwrap()[0];
            prop_assert!(e >= 0.0);
            prop_assert!(r <= 1.0);

            let am: Vec<f64> = meas.iter().map(|v| scale * v + shift).collect();
            let asim: Vec<f64> = sim.iter().map(|v| scale * v + shift).collect();
            let r_aff = r2(&am, &asim, 1).unwrap()[0];
            prop_assert!((r - r_aff).abs() <= 1e-9 * (1.0 + r.abs()));

            let sm: Vec<f64> = meas.iter().map(|v| scale * v).collect();
            let ss: Vec<f64> = sim.iter().map(|v| scale * v).collect();
            let e_s = rmse(&sm, &ss, 1).unwrap()[0];
            prop_assert!((e_s - scale * e).abs() <= 1e-9 * (1.0 + e_s));

            let identity = 1.0 - e * e * meas.len() as f64 / ss_tot;
            prop_assert!((identity - r).abs() <= 1e-12 * (1.0 + r.abs()));
        }
    }
}
