//! Finite-difference oracle and small fixtures shared by the integration
//! tests.

#![allow(dead_code)]

pub mod bench;

use contsysid::data::Dataset;
use contsysid::models::{ModelConfig, ModelStructure, StructureConfig, Workspace};
use contsysid::nn::Activation;
use contsysid::ode::{self, Dynamics, Scheme, SimOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_RTOL: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = x[i];
            let h = FD_STEP * x0.abs().max(1.0);
            x[i] = x0 + h;
            let fp = f(&x);
            x[i] = x0 - h;
            let fm = f(&x);
            x[i] = x0;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Relative error `‖a − b‖ / ‖b‖` (absolute when `b` vanishes).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm > 1e-12 {
        diff / norm
    } else {
        diff
    }
}

#[track_caller]
pub fn assert_grad(what: &str, analytic: &[f64], numeric: &[f64]) {
    let e = rel_err(analytic, numeric);
    assert!(
        e <= FD_RTOL,
        "{what}: relative error {e:.3e}\n analytic {analytic:?}\n numeric  {numeric:?}"
    );
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.random_range(-1.0..1.0))
        .collect()
}

pub fn structure(cfg: StructureConfig) -> ModelStructure {
    ModelStructure::from_config(&ModelConfig {
        structure: cfg,
        time_unit: 1.0,
    })
    .unwrap()
}

/// One instance of every structure variant, with tanh activations.
pub fn all_structures() -> Vec<(&'static str, ModelStructure)> {
    let a = Activation::Tanh;
    vec![
        (
            "general",
            structure(StructureConfig::GeneralSs {
                n_x: 3,
                n_u: 2,
                n_y: 2,
                hidden_f: 5,
                hidden_g: 4,
                activation: a,
            }),
        ),
        (
            "incremental",
            structure(StructureConfig::Incremental {
                n_x: 2,
                n_u: 1,
                n_y: 1,
                hidden_f: 4,
                hidden_g: 3,
                activation: a,
                a_l: vec![-0.5, 0.2, 0.1, -0.3],
                b_l: vec![1.0, 0.5],
                c_l: vec![0.7, -0.4],
            }),
        ),
        (
            "fully_observed",
            structure(StructureConfig::FullyObserved {
                n_x: 2,
                n_u: 1,
                hidden_f: 5,
                activation: a,
            }),
        ),
        (
            "cts",
            structure(StructureConfig::CtsPhysics {
                hidden: 4,
                activation: a,
                overflow: true,
            }),
        ),
        (
            "cts_no_overflow",
            structure(StructureConfig::CtsPhysics {
                hidden: 4,
                activation: a,
                overflow: false,
            }),
        ),
        (
            "emps",
            structure(StructureConfig::EmpsPhysics {
                hidden: 4,
                activation: a,
            }),
        ),
    ]
}

/// A random smooth input record with outputs of the right width.
pub fn random_dataset(st: &ModelStructure, n: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let t: Vec<f64> = (0..n)
        .map(|k| 0.1 * k as f64 + 0.02 * (k as f64).sin())
        .collect();
    let u: Vec<f64> = (0..n * st.n_u())
        .map(|i| (0.7 * i as f64).sin() + 0.3 * r.random_range(-1.0..1.0))
        .collect();
    let y = uniform(&mut r, n * st.n_y(), 1.0);
    Dataset::new(t, u, y, st.n_u(), st.n_y()).unwrap()
}

/// `ẋ = −x`.
pub struct Decay;

impl Dynamics for Decay {
    fn n_x(&self) -> usize {
        1
    }
    fn n_u(&self) -> usize {
        1
    }
    fn n_params(&self) -> usize {
        0
    }
    fn f_into(&self, _: &[f64], x: &[f64], _: &[f64], out: &mut [f64], _: &mut Workspace) {
        out[0] = -x[0];
    }
    fn vjp_f_acc(
        &self,
        _: &[f64],
        _: &[f64],
        _: &[f64],
        cot: &[f64],
        _: &mut [f64],
        g_x: &mut [f64],
        _: &mut [f64],
        _: &mut Workspace,
    ) {
        g_x[0] -= cot[0];
    }
}

pub fn observed_order(scheme: Scheme) -> f64 {
    let steps = [10usize, 20, 40, 80];
    let errors: Vec<f64> = steps
        .iter()
        .map(|&n| {
            let grid: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
            let u = vec![0.0; n + 1];
            let traj =
                ode::simulate(&Decay, &[], &[1.0], &u, &grid, &SimOptions::new(scheme)).unwrap();
            (traj.state(n)[0] - (-1.0f64).exp()).abs()
        })
        .collect();
    // Least-squares slope of log(error) against log(h).
    let xs: Vec<f64> = steps.iter().map(|&n| (1.0 / n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}
