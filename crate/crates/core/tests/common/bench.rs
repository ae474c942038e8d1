//! Training pipelines for the RLC, cascaded-tanks and EMPS experiments.

use std::f64::consts::PI;

use contsysid::data::{decimate, generate_rlc, normalize_channel, Channel, Dataset, RlcConfig};
use contsysid::metrics::{r2, rmse};
use contsysid::models::{ModelConfig, ModelStructure, StructureConfig};
use contsysid::nn::Activation;
use contsysid::ode::Scheme;
use contsysid::train::{
    fit, init_hidden, simulate_outputs, Algorithm, FitReport, HiddenInit, TrainConfig,
};
use contsysid::Result;

/// Seconds per model time unit for the RLC runs (ten units per sample).
pub const RLC_TIME_UNIT: f64 = 5e-8;

/// Normalized RLC records: noisy and clean training data plus a clean,
/// independently generated test record.
pub struct RlcData {
    pub train: Dataset,
    pub train_clean: Dataset,
    pub test: Dataset,
}

pub fn rlc_data(noise_multiplier: f64) -> RlcData {
    let cfg = RlcConfig {
        noise_std: [10.0 * noise_multiplier, 1.0 * noise_multiplier],
        ..RlcConfig::default()
    };
    let (mut train_clean, mut train) = generate_rlc(&cfg).unwrap();
    let test_cfg = RlcConfig {
        seed: 100,
        bandwidth_hz: 200e3 / (2.0 * PI),
        input_std: 60.0,
        noise_std: [0.0, 0.0],
        ..RlcConfig::default()
    };
    let (mut test, _) = generate_rlc(&test_cfg).unwrap();
    for ch in [Channel::Output(0), Channel::Output(1), Channel::Input(0)] {
        let (normalized, tr) = normalize_channel(&train, ch, (-1.0, 1.0)).unwrap();
        train = normalized;
        train_clean = tr.apply(&train_clean).unwrap();
        test = tr.apply(&test).unwrap();
    }
    RlcData {
        train,
        train_clean,
        test,
    }
}

pub fn rlc_structure() -> ModelStructure {
    ModelStructure::from_config(&ModelConfig {
        structure: StructureConfig::FullyObserved {
            n_x: 2,
            n_u: 1,
            hidden_f: 64,
            activation: Activation::Relu,
        },
        time_unit: RLC_TIME_UNIT,
    })
    .unwrap()
}

pub fn rlc_tsem(m: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(Algorithm::Tsem, 10_000);
    cfg.q = Some(64);
    cfg.m = Some(m);
    cfg.lr = 1e-3;
    cfg.alpha = 1.0;
    cfg.scheme = Scheme::ForwardEuler;
    cfg
}

pub fn rlc_sci() -> TrainConfig {
    let mut cfg = TrainConfig::new(Algorithm::Sci, 20_000);
    cfg.q = Some(1);
    cfg.m = None;
    cfg.lr = 1e-3;
    cfg.alpha = 100.0;
    cfg.scheme = Scheme::ForwardEuler;
    cfg
}

pub fn rlc_one_step() -> TrainConfig {
    let mut cfg = TrainConfig::new(Algorithm::OneStepPred, 10_000);
    cfg.lr = 1e-3;
    cfg
}

/// Simulates `report`'s model on `dataset` from the initial state given by
/// `policy` and returns the simulated outputs.
pub fn simulate_from_policy(
    st: &ModelStructure,
    report: &FitReport,
    dataset: &Dataset,
    policy: HiddenInit,
) -> Result<Vec<f64>> {
    let x0 = init_hidden(st, dataset, policy)?.row(0).to_vec();
    simulate_outputs(
        st,
        &report.theta,
        &x0,
        dataset,
        &report.config.eval_options(),
    )
}

pub struct RunResult {
    pub report: FitReport,
    pub train_r2: Vec<f64>,
    pub test_r2: Vec<f64>,
    pub test_rmse: Vec<f64>,
}

/// Trains on `train` and scores simulation from the policy's initial state
/// on both records.
pub fn train_and_score(
    st: &ModelStructure,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    policy: HiddenInit,
) -> Result<RunResult> {
    let report = fit(cfg, train, st)?;
    let n_y = st.n_y();
    let y_train = simulate_from_policy(st, &report, train, policy)?;
    let y_test = simulate_from_policy(st, &report, test, policy)?;
    Ok(RunResult {
        train_r2: r2(train.y(), &y_train, n_y)?,
        test_r2: r2(test.y(), &y_test, n_y)?,
        test_rmse: rmse(test.y(), &y_test, n_y)?,
        report,
    })
}

pub struct Iterations {
    pub tsem: usize,
    pub sci: usize,
}

/// Cascaded tanks: TSEM and SCI runs, returning `(tsem, sci)`.
pub fn cts_runs(
    train: &Dataset,
    test: &Dataset,
    iters: Iterations,
) -> Result<(RunResult, RunResult)> {
    let dt = train.uniform_step().unwrap_or(1.0);
    let st = ModelStructure::from_config(&ModelConfig {
        structure: StructureConfig::CtsPhysics {
            hidden: 100,
            activation: Activation::Relu,
            overflow: true,
        },
        time_unit: dt,
    })?;
    let m = 128.min(train.len());
    let mut tsem = TrainConfig::new(Algorithm::Tsem, iters.tsem);
    tsem.q = Some(64);
    tsem.m = Some(m);
    tsem.lr = 1e-3;
    tsem.scheme = Scheme::ForwardEuler;
    let mut sci = TrainConfig::new(Algorithm::Sci, iters.sci);
    sci.alpha = 50_000.0;
    sci.lr = 1e-5;
    sci.scheme = Scheme::CrankNicolson;
    let policy = HiddenInit::MeasuredOutput;
    Ok((
        train_and_score(&st, &tsem, train, test, policy)?,
        train_and_score(&st, &sci, train, test, policy)?,
    ))
}

/// EMPS: decimation by 5, position normalized to [−1, 1], velocity from
/// forward differences. Returns `(tsem, sci)`.
pub fn emps_runs(
    train: &Dataset,
    test: &Dataset,
    iters: Iterations,
) -> Result<(RunResult, RunResult)> {
    let train = decimate(train, 5)?;
    let test = decimate(test, 5)?;
    let (train, tr) = normalize_channel(&train, Channel::Output(0), (-1.0, 1.0))?;
    let test = tr.apply(&test)?;
    let dt = train.uniform_step().unwrap_or(1.0);
    let st = ModelStructure::from_config(&ModelConfig {
        structure: StructureConfig::EmpsPhysics {
            hidden: 64,
            activation: Activation::Relu,
        },
        time_unit: dt,
    })?;
    let mut tsem = TrainConfig::new(Algorithm::Tsem, iters.tsem);
    tsem.q = Some(32);
    tsem.m = Some(64.min(train.len()));
    tsem.lr = 1e-4;
    tsem.scheme = Scheme::Rk44;
    tsem.hidden_init = HiddenInit::FiniteDifferenceVelocity;
    let mut sci = TrainConfig::new(Algorithm::Sci, iters.sci);
    sci.alpha = 1000.0;
    sci.lr = 1e-5;
    sci.scheme = Scheme::BackwardEuler;
    sci.hidden_init = HiddenInit::FiniteDifferenceVelocity;
    let policy = HiddenInit::FiniteDifferenceVelocity;
    Ok((
        train_and_score(&st, &tsem, &train, &test, policy)?,
        train_and_score(&st, &sci, &train, &test, policy)?,
    ))
}
