//! Fitting criteria and the optimization loop.
//!
//! Four criteria are available:
//!
//! - truncated simulation error minimization (TSEM): short simulations from
//!   free initial states, tied to a hidden state sequence by a consistency
//!   penalty;
//! - scheme-consistency identification (SCI): outputs of the hidden states fit
//!   the data and the hidden states are pulled onto a one-step scheme, with no
//!   simulation at all;
//! - full simulation error over the whole record;
//! - one-step prediction error, using measured outputs as states.
//!
//! Per-subsequence (TSEM) and per-chunk (SCI) work runs on the rayon pool.
//! Partial results are always reduced in a fixed index order, so losses and
//! gradients do not depend on the number of workers.

use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::{finite_diff_estimate, Dataset};
use crate::error::{check_len, Error, Result};
use crate::models::{ModelStructure, Variant};
use crate::ode::{backprop_with, residual_into, residual_vjp_acc, simulate, simulate_with};
use crate::ode::{InputInterp, Scheme, SimOptions, SolverBuffers, Trajectory};

/// Points handled by one SCI work item.
const SCI_CHUNK: usize = 256;

// ---------------------------------------------------------------------------
// Hidden states and batches

/// Free state estimates `X̃`, one row of `n_x` values per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenStates {
    n_x: usize,
    values: Vec<f64>,
}

impl HiddenStates {
    pub fn new(n_x: usize, values: Vec<f64>) -> Result<Self> {
        if n_x == 0 || !values.len().is_multiple_of(n_x) {
            return Err(Error::Dimension {
                context: "hidden state rows",
                expected: n_x,
                actual: values.len() % n_x.max(1),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("hidden states must be finite".into()));
        }
        Ok(Self { n_x, values })
    }

    pub fn zeros(n: usize, n_x: usize) -> Self {
        Self {
            n_x,
            values: vec![0.0; n * n_x],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.n_x
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_x..(k + 1) * self.n_x]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.n_x..(k + 1) * self.n_x]
    }
}

/// Subsequence start indices and a common length `m`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    starts: Vec<usize>,
    m: usize,
}

impl Batch {
    /// Every subsequence must fit in a record of length `n`.
    pub fn new(starts: Vec<usize>, m: usize, n: usize) -> Result<Self> {
        if starts.is_empty() || m == 0 {
            return Err(Error::Config(
                "a batch needs q ≥ 1 subsequences of length m ≥ 1".into(),
            ));
        }
        if let Some(&s) = starts.iter().find(|&&s| s + m > n) {
            return Err(Error::Config(format!(
                "subsequence starting at {s} with length {m} exceeds the record length {n}"
            )));
        }
        Ok(Self { starts, m })
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn q(&self) -> usize {
        self.starts.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Sample indices covered by subsequence `j`.
    pub fn rows(&self, j: usize) -> Range<usize> {
        self.starts[j]..self.starts[j] + self.m
    }
}

/// Draws start indices without replacement from a reshuffled permutation of
/// all admissible starts, refilling it when exhausted.
///
/// Admissible starts are `0..=N−m−1`; when `m = N` the single start `0` is
/// used.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    m: usize,
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, m: usize, seed: u64) -> Result<Self> {
        if m == 0 || m > n {
            return Err(Error::Config(format!(
                "subsequence length m = {m} must lie in 1..={n}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 << 20);
        let count = (n - m).max(1);
        Ok(Self {
            n,
            m,
            rng,
            perm: (0..count).collect(),
            pos: count,
        })
    }

    pub fn n_admissible(&self) -> usize {
        self.perm.len()
    }

    pub fn next_starts(&mut self, q: usize) -> Vec<usize> {
        (0..q)
            .map(|_| {
                if self.pos == self.perm.len() {
                    self.perm.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.perm[self.pos - 1]
            })
            .collect()
    }

    pub fn next_batch(&mut self, q: usize) -> Result<Batch> {
        Batch::new(self.next_starts(q), self.m, self.n)
    }
}

/// Convenience wrapper over [`BatchSampler::next_starts`].
pub fn sample_batch_starts(sampler: &mut BatchSampler, q: usize) -> Vec<usize> {
    sampler.next_starts(q)
}

// ---------------------------------------------------------------------------
// Optimizers

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize, params: AdamParams) -> Self {
        Self {
            params,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    fn corrections(&mut self) -> (f64, f64) {
        self.t += 1;
        let t = self.t as i32;
        (
            1.0 - self.params.beta1.powi(t),
            1.0 - self.params.beta2.powi(t),
        )
    }

    #[inline]
    fn update(&mut self, i: usize, x: &mut f64, g: f64, lr: f64, bc1: f64, bc2: f64) {
        let AdamParams { beta1, beta2, eps } = self.params;
        self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
        self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
        let m_hat = self.m[i] / bc1;
        let v_hat = self.v[i] / bc2;
        *x -= lr * m_hat / (v_hat.sqrt() + eps);
    }

    /// Adam update of every coordinate with bias correction.
    pub fn step(&mut self, vars: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        check_len("Adam variables", self.len(), vars.len())?;
        check_len("Adam gradients", self.len(), grads.len())?;
        let (bc1, bc2) = self.corrections();
        for (i, (x, &g)) in vars.iter_mut().zip(grads).enumerate() {
            self.update(i, x, g, lr, bc1, bc2);
        }
        Ok(())
    }

    /// Updates only the rows (of width `cols`) flagged in `rows`. Other
    /// variables and their moments are left untouched.
    pub fn step_rows(
        &mut self,
        vars: &mut [f64],
        grads: &[f64],
        lr: f64,
        cols: usize,
        rows: &[bool],
    ) -> Result<()> {
        check_len("Adam variables", self.len(), vars.len())?;
        check_len("Adam gradients", self.len(), grads.len())?;
        check_len("Adam row mask", self.len(), rows.len() * cols)?;
        let (bc1, bc2) = self.corrections();
        for (r, _) in rows.iter().enumerate().filter(|(_, &on)| on) {
            for i in r * cols..(r + 1) * cols {
                self.update(i, &mut vars[i], grads[i], lr, bc1, bc2);
            }
        }
        Ok(())
    }
}

/// Single Adam step on `vars`.
pub fn adam_step(state: &mut AdamState, vars: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    state.step(vars, grads, lr)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    /// Plain gradient descent `v ← v − λ·g`.
    Sgd,
}

enum Stepper {
    Adam(AdamState),
    Sgd,
}

impl Stepper {
    fn new(kind: Optimizer, len: usize, params: AdamParams) -> Self {
        match kind {
            Optimizer::Adam => Stepper::Adam(AdamState::new(len, params)),
            Optimizer::Sgd => Stepper::Sgd,
        }
    }

    fn step(&mut self, vars: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        match self {
            Stepper::Adam(s) => s.step(vars, grads, lr),
            Stepper::Sgd => {
                for (x, g) in vars.iter_mut().zip(grads) {
                    *x -= lr * g;
                }
                Ok(())
            }
        }
    }

    fn step_rows(
        &mut self,
        vars: &mut [f64],
        grads: &[f64],
        lr: f64,
        cols: usize,
        rows: &[bool],
    ) -> Result<()> {
        match self {
            Stepper::Adam(s) => s.step_rows(vars, grads, lr, cols, rows),
            Stepper::Sgd => {
                for (r, _) in rows.iter().enumerate().filter(|(_, &on)| on) {
                    for i in r * cols..(r + 1) * cols {
                        vars[i] -= lr * grads[i];
                    }
                }
                Ok(())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Tsem,
    Sci,
    FullSim,
    OneStepPred,
}

/// How `X̃` is initialized before training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum HiddenInit {
    /// Measured outputs copied into the state channels they observe; zeros
    /// elsewhere.
    #[default]
    MeasuredOutput,
    /// Position from the measurements, velocity from forward differences
    /// (position/velocity structures only).
    FiniteDifferenceVelocity,
    Zeros,
}

fn d_lr() -> f64 {
    1e-3
}
fn d_alpha() -> f64 {
    1.0
}
fn d_one() -> usize {
    1
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Number of iterations.
    pub n: usize,
    /// Subsequences per batch; defaults to 1.
    #[serde(default)]
    pub q: Option<usize>,
    /// Subsequence length; defaults to the record length.
    #[serde(default)]
    pub m: Option<usize>,
    /// Learning rate λ.
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// Weight α of the consistency term.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Integration scheme (TSEM, full simulation) or residual scheme (SCI).
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub interp: InputInterp,
    #[serde(default = "d_one")]
    pub substeps: usize,
    /// Scheme for simulating the trained model. Defaults to `scheme` when it
    /// is explicit and to RK44 otherwise.
    #[serde(default)]
    pub eval_scheme: Option<Scheme>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub hidden_init: HiddenInit,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub adam: AdamParams,
    /// Also optimize the initial state in full-simulation fits.
    #[serde(default = "d_true")]
    pub optimize_x0: bool,
    /// Log progress every this many iterations; 0 disables.
    #[serde(default)]
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(algorithm: Algorithm, n: usize) -> Self {
        Self {
            algorithm,
            n,
            q: None,
            m: None,
            lr: d_lr(),
            alpha: d_alpha(),
            scheme: Scheme::default(),
            interp: InputInterp::default(),
            substeps: 1,
            eval_scheme: None,
            seed: 0,
            hidden_init: HiddenInit::default(),
            optimizer: Optimizer::default(),
            adam: AdamParams::default(),
            optimize_x0: true,
            log_every: 0,
        }
    }

    /// Checks the settings against a record of `n_data` samples and returns
    /// the effective `(q, m)`.
    pub fn validate(&self, n_data: usize) -> Result<(usize, usize)> {
        let q = self.q.unwrap_or(1);
        let m = self.m.unwrap_or(n_data);
        if q == 0 {
            return Err(Error::Config("q must be at least 1".into()));
        }
        if m == 0 || m > n_data {
            return Err(Error::Config(format!("m = {m} must lie in 1..={n_data}")));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        let AdamParams { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return Err(Error::Config(
                "Adam needs β₁, β₂ in [0, 1) and ε > 0".into(),
            ));
        }
        if matches!(self.algorithm, Algorithm::Tsem | Algorithm::FullSim)
            && !self.scheme.is_explicit()
        {
            return Err(Error::Config(format!(
                "{:?} is residual-only; TSEM and full simulation need an explicit scheme",
                self.scheme
            )));
        }
        if let Some(s) = self.eval_scheme {
            if !s.is_explicit() {
                return Err(Error::Config(format!("eval_scheme {s:?} is not explicit")));
            }
        }
        Ok((q, m))
    }

    /// Simulation options used during training.
    pub fn train_options(&self) -> SimOptions {
        SimOptions {
            scheme: self.scheme,
            interp: self.interp,
            substeps: self.substeps,
        }
    }

    /// Simulation options for evaluating the trained model.
    pub fn eval_options(&self) -> SimOptions {
        let scheme = self.eval_scheme.unwrap_or(if self.scheme.is_explicit() {
            self.scheme
        } else {
            Scheme::Rk44
        });
        SimOptions {
            scheme,
            interp: self.interp,
            substeps: self.substeps,
        }
    }
}

// ---------------------------------------------------------------------------
// Shared helpers

/// Sample times in model units, starting at zero.
pub fn model_grid(structure: &ModelStructure, dataset: &Dataset) -> Vec<f64> {
    let t0 = dataset.t().first().copied().unwrap_or(0.0);
    dataset
        .t()
        .iter()
        .map(|t| (t - t0) / structure.time_unit())
        .collect()
}

/// State index observed by each output channel, where one exists.
pub fn observed_states(structure: &ModelStructure) -> Vec<Option<usize>> {
    let n_y = structure.n_y();
    match structure.variant() {
        Variant::FullyObserved => (0..n_y).map(Some).collect(),
        Variant::CtsPhysics => vec![Some(1)],
        Variant::EmpsPhysics => vec![Some(0)],
        Variant::GeneralSs | Variant::Incremental => (0..n_y)
            .map(|i| (i < structure.n_x()).then_some(i))
            .collect(),
    }
}

fn check_dataset(structure: &ModelStructure, dataset: &Dataset) -> Result<()> {
    check_len("dataset inputs", structure.n_u(), dataset.n_u())?;
    check_len("dataset outputs", structure.n_y(), dataset.n_y())?;
    if dataset.len() < 2 {
        return Err(Error::Config("training needs at least two samples".into()));
    }
    Ok(())
}

pub fn init_hidden(
    structure: &ModelStructure,
    dataset: &Dataset,
    policy: HiddenInit,
) -> Result<HiddenStates> {
    check_dataset(structure, dataset)?;
    let n = dataset.len();
    let n_x = structure.n_x();
    let mut hidden = HiddenStates::zeros(n, n_x);
    match policy {
        HiddenInit::Zeros => {}
        HiddenInit::MeasuredOutput => {
            for (c, state) in observed_states(structure).into_iter().enumerate() {
                if let Some(i) = state {
                    for k in 0..n {
                        hidden.row_mut(k)[i] = dataset.y_row(k)[c];
                    }
                }
            }
        }
        HiddenInit::FiniteDifferenceVelocity => {
            if structure.variant() != Variant::EmpsPhysics {
                return Err(Error::UnsupportedStructure(structure.variant().name()));
            }
            let pos = dataset.y_channel(0);
            let vel = finite_diff_estimate(&pos, &model_grid(structure, dataset))?;
            for k in 0..n {
                hidden.row_mut(k).copy_from_slice(&[pos[k], vel[k]]);
            }
        }
    }
    Ok(hidden)
}

/// Loss values and gradients of one criterion evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrads {
    pub j_tot: f64,
    pub j_fit: f64,
    pub j_reg: f64,
    pub grad_theta: Vec<f64>,
    /// Gradient with respect to `X̃`, row-major like [`HiddenStates`].
    pub grad_hidden: Vec<f64>,
}

fn check_common(
    structure: &ModelStructure,
    theta: &[f64],
    hidden: &HiddenStates,
    dataset: &Dataset,
) -> Result<()> {
    check_dataset(structure, dataset)?;
    check_len("parameter vector", structure.n_params(), theta.len())?;
    check_len("hidden state width", structure.n_x(), hidden.n_x())?;
    check_len("hidden state rows", dataset.len(), hidden.len())
}

fn check_batch(batch: &Batch, n: usize) -> Result<()> {
    Batch::new(batch.starts.clone(), batch.m, n).map(|_| ())
}

/// Partial result of one subsequence or chunk; `g_hidden` starts at row
/// `row0`.
struct Partial {
    fit: f64,
    reg: f64,
    g_theta: Vec<f64>,
    row0: usize,
    g_hidden: Vec<f64>,
}

fn reduce(
    parts: Vec<Result<Partial>>,
    n_params: usize,
    hidden_len: usize,
    n_x: usize,
) -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
    let mut fit = 0.0;
    let mut reg = 0.0;
    let mut g_theta = vec![0.0; n_params];
    let mut g_hidden = vec![0.0; hidden_len];
    for p in parts {
        let p = p?;
        fit += p.fit;
        reg += p.reg;
        for (a, b) in g_theta.iter_mut().zip(&p.g_theta) {
            *a += b;
        }
        let off = p.row0 * n_x;
        for (a, b) in g_hidden[off..off + p.g_hidden.len()]
            .iter_mut()
            .zip(&p.g_hidden)
        {
            *a += b;
        }
    }
    Ok((fit, reg, g_theta, g_hidden))
}

// ---------------------------------------------------------------------------
// Simulation-based criteria

/// Simulates rows `s..s+m` from `x0` and accumulates the output fit and, when
/// `hidden` (rows `s..s+m`) is given, the state-consistency penalty. Sums are
/// multiplied by `scale`.
#[allow(clippy::too_many_arguments)]
fn sim_segment(
    structure: &ModelStructure,
    theta: &[f64],
    x0: &[f64],
    hidden: Option<&[f64]>,
    dataset: &Dataset,
    tau: &[f64],
    s: usize,
    m: usize,
    scale: f64,
    alpha: f64,
    opts: &SimOptions,
    buf: &mut SolverBuffers,
) -> Result<Partial> {
    let n_x = structure.n_x();
    let n_u = structure.n_u();
    let n_y = structure.n_y();
    let u = &dataset.u()[s * n_u..(s + m) * n_u];
    let traj: Trajectory = simulate_with(structure, theta, x0, u, &tau[s..s + m], opts, buf)
        .map_err(|e| match e {
            Error::NonFinite { step } => Error::NonFinite {
                step: s * opts.substeps + step,
            },
            e => e,
        })?;
    let mut state_cot = vec![0.0; m * n_x];
    let mut g_theta = vec![0.0; theta.len()];
    let mut g_hidden = vec![0.0; m * n_x];
    let mut y_hat = vec![0.0; n_y];
    let mut y_cot = vec![0.0; n_y];
    let (mut fit, mut reg) = (0.0, 0.0);
    for h in 0..m {
        let x = traj.state(h);
        structure.g_into(theta, x, &mut y_hat, buf.workspace());
        for ((c, yh), y) in y_cot.iter_mut().zip(&y_hat).zip(dataset.y_row(s + h)) {
            let e = yh - y;
            fit += e * e;
            *c = 2.0 * scale * e;
        }
        let cot = &mut state_cot[h * n_x..(h + 1) * n_x];
        structure.vjp_g_acc(theta, x, &y_cot, &mut g_theta, cot, buf.workspace());
        if let Some(hid) = hidden {
            let xt = &hid[h * n_x..(h + 1) * n_x];
            for i in 0..n_x {
                let d = x[i] - xt[i];
                reg += d * d;
                let c = 2.0 * alpha * scale * d;
                cot[i] += c;
                g_hidden[h * n_x + i] -= c;
            }
        }
    }
    let mut x0_cot = vec![0.0; n_x];
    backprop_with(
        structure,
        theta,
        &traj,
        u,
        opts,
        &state_cot,
        &mut g_theta,
        &mut x0_cot,
        buf,
    );
    for (g, c) in g_hidden.iter_mut().zip(&x0_cot) {
        *g += c;
    }
    Ok(Partial {
        fit: fit * scale,
        reg: reg * scale,
        g_theta,
        row0: s,
        g_hidden,
    })
}

#[allow(clippy::too_many_arguments)]
fn tsem_with_grid(
    structure: &ModelStructure,
    theta: &[f64],
    hidden: &HiddenStates,
    dataset: &Dataset,
    tau: &[f64],
    batch: &Batch,
    alpha: f64,
    opts: &SimOptions,
) -> Result<LossGrads> {
    let n_x = structure.n_x();
    let m = batch.m;
    let scale = 1.0 / (batch.q() * m) as f64;
    let parts: Vec<Result<Partial>> = batch
        .starts
        .par_iter()
        .map_init(
            || SolverBuffers::new(n_x, structure.n_u()),
            |buf, &s| {
                let rows = &hidden.values[s * n_x..(s + m) * n_x];
                sim_segment(
                    structure,
                    theta,
                    hidden.row(s),
                    Some(rows),
                    dataset,
                    tau,
                    s,
                    m,
                    scale,
                    alpha,
                    opts,
                    buf,
                )
            },
        )
        .collect();
    let (j_fit, j_reg, grad_theta, grad_hidden) =
        reduce(parts, theta.len(), hidden.values.len(), n_x)?;
    Ok(LossGrads {
        j_tot: j_fit + alpha * j_reg,
        j_fit,
        j_reg,
        grad_theta,
        grad_hidden,
    })
}

/// TSEM cost of one batch: each subsequence is simulated from its hidden
/// initial state, `J_fit` and `J_reg` are averaged over `q·m` samples, and
/// `J_tot = J_fit + α·J_reg`.
#[allow(clippy::too_many_arguments)]
pub fn tsem_loss_and_grads(
    structure: &ModelStructure,
    theta: &[f64],
    hidden: &HiddenStates,
    dataset: &Dataset,
    batch: &Batch,
    alpha: f64,
    opts: &SimOptions,
) -> Result<LossGrads> {
    check_common(structure, theta, hidden, dataset)?;
    check_batch(batch, dataset.len())?;
    let tau = model_grid(structure, dataset);
    tsem_with_grid(structure, theta, hidden, dataset, &tau, batch, alpha, opts)
}

/// Mean squared output error of one simulation over the whole record.
/// Returns `(J, grad_theta, grad_x0)`.
pub fn full_sim_loss_and_grads(
    structure: &ModelStructure,
    theta: &[f64],
    x0: &[f64],
    dataset: &Dataset,
    opts: &SimOptions,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_dataset(structure, dataset)?;
    check_len("parameter vector", structure.n_params(), theta.len())?;
    check_len("initial state", structure.n_x(), x0.len())?;
    let tau = model_grid(structure, dataset);
    full_sim_with_grid(structure, theta, x0, dataset, &tau, opts)
}

fn full_sim_with_grid(
    structure: &ModelStructure,
    theta: &[f64],
    x0: &[f64],
    dataset: &Dataset,
    tau: &[f64],
    opts: &SimOptions,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = dataset.len();
    let mut buf = SolverBuffers::new(structure.n_x(), structure.n_u());
    let p = sim_segment(
        structure,
        theta,
        x0,
        None,
        dataset,
        tau,
        0,
        n,
        1.0 / n as f64,
        0.0,
        opts,
        &mut buf,
    )?;
    let g_x0 = p.g_hidden[..structure.n_x()].to_vec();
    Ok((p.fit, p.g_theta, g_x0))
}

// ---------------------------------------------------------------------------
// Residual-based criteria

#[derive(Clone, Copy)]
struct ResidualTerms {
    scheme: Scheme,
    interp: InputInterp,
    fit_scale: f64,
    reg_scale: f64,
    alpha: f64,
    with_fit: bool,
}

/// Weights of `f` at the previous and next point for the single-stage schemes.
fn stage_weights(scheme: Scheme) -> (f64, f64) {
    match scheme {
        Scheme::ForwardEuler => (1.0, 0.0),
        Scheme::BackwardEuler => (0.0, 1.0),
        _ => (0.5, 0.5),
    }
}

/// Fit and residual terms for points `lo..hi` of the subsequence starting at
/// `s`. Residual `h` couples points `h−1` and `h` and belongs to the chunk
/// that owns point `h`.
#[allow(clippy::too_many_arguments)]
fn residual_chunk(
    structure: &ModelStructure,
    theta: &[f64],
    hidden: &[f64],
    dataset: &Dataset,
    tau: &[f64],
    s: usize,
    m: usize,
    lo: usize,
    hi: usize,
    terms: ResidualTerms,
    buf: &mut SolverBuffers,
) -> Partial {
    let n_x = structure.n_x();
    let n_u = structure.n_u();
    let n_y = structure.n_y();
    let x_at = |h: usize| &hidden[(s + h) * n_x..(s + h + 1) * n_x];
    let u_at = |h: usize| dataset.u_row(s + h);
    let dt_at = |h: usize| tau[s + h] - tau[s + h - 1];

    let p_lo = lo.saturating_sub(1);
    let mut g_theta = vec![0.0; theta.len()];
    let mut g_hidden = vec![0.0; (hi - p_lo) * n_x];
    let row = |h: usize| (h - p_lo) * n_x;
    let (mut fit, mut reg) = (0.0, 0.0);
    let mut r = vec![0.0; n_x];

    if terms.alpha > 0.0 {
        match terms.scheme {
            Scheme::Rk44 => {
                for h in lo.max(1)..hi {
                    residual_into(
                        structure,
                        theta,
                        Scheme::Rk44,
                        terms.interp,
                        x_at(h - 1),
                        x_at(h),
                        u_at(h - 1),
                        u_at(h),
                        dt_at(h),
                        &mut r,
                        buf,
                    );
                    for v in r.iter_mut() {
                        reg += *v * *v;
                        *v *= 2.0 * terms.alpha * terms.reg_scale;
                    }
                    let (before, after) = g_hidden.split_at_mut(row(h));
                    residual_vjp_acc(
                        structure,
                        theta,
                        Scheme::Rk44,
                        terms.interp,
                        x_at(h - 1),
                        x_at(h),
                        u_at(h - 1),
                        u_at(h),
                        dt_at(h),
                        &r,
                        &mut g_theta,
                        &mut before[row(h - 1)..],
                        &mut after[..n_x],
                        buf,
                    );
                }
            }
            scheme => {
                // Each f(x̃_h, u_h) is evaluated once; its cotangent collects
                // the contributions of both residuals that use it.
                let (a, b) = stage_weights(scheme);
                let f_hi = (hi + 1).min(m);
                let mut f = vec![0.0; (f_hi - p_lo) * n_x];
                for h in p_lo..f_hi {
                    let out = &mut f[(h - p_lo) * n_x..(h - p_lo + 1) * n_x];
                    structure.f_into(theta, x_at(h), u_at(h), out, buf.workspace());
                }
                let f_row = |h: usize| (h - p_lo) * n_x..(h - p_lo + 1) * n_x;
                // Scaled residual cotangents for residuals lo.max(1)..f_hi.
                let c_lo = lo.max(1);
                let mut c = vec![0.0; f_hi.saturating_sub(c_lo) * n_x];
                for h in c_lo..f_hi {
                    let dt = dt_at(h);
                    let (fp, fn_) = (&f[f_row(h - 1)], &f[f_row(h)]);
                    let (xp, xn) = (x_at(h - 1), x_at(h));
                    let ch = &mut c[(h - c_lo) * n_x..(h - c_lo + 1) * n_x];
                    for i in 0..n_x {
                        let ri = xn[i] - xp[i] - dt * (a * fp[i] + b * fn_[i]);
                        ch[i] = 2.0 * terms.alpha * terms.reg_scale * ri;
                        if h < hi {
                            reg += ri * ri;
                        }
                    }
                    if h < hi {
                        for i in 0..n_x {
                            g_hidden[row(h) + i] += ch[i];
                            g_hidden[row(h - 1) + i] -= ch[i];
                        }
                    }
                }
                let mut f_cot = vec![0.0; n_x];
                let mut g_u = vec![0.0; n_u];
                for h in lo..hi {
                    f_cot.iter_mut().for_each(|v| *v = 0.0);
                    if a != 0.0 && h + 1 < m {
                        let w = a * dt_at(h + 1);
                        let ch = &c[(h + 1 - c_lo) * n_x..(h + 2 - c_lo) * n_x];
                        f_cot.iter_mut().zip(ch).for_each(|(v, c)| *v -= w * c);
                    }
                    if b != 0.0 && h >= 1 {
                        let w = b * dt_at(h);
                        let ch = &c[(h - c_lo) * n_x..(h + 1 - c_lo) * n_x];
                        f_cot.iter_mut().zip(ch).for_each(|(v, c)| *v -= w * c);
                    }
                    let gx = &mut g_hidden[row(h)..row(h) + n_x];
                    structure.vjp_f_acc(
                        theta,
                        x_at(h),
                        u_at(h),
                        &f_cot,
                        &mut g_theta,
                        gx,
                        &mut g_u,
                        buf.workspace(),
                    );
                }
            }
        }
    }

    if terms.with_fit {
        let mut y_hat = vec![0.0; n_y];
        let mut y_cot = vec![0.0; n_y];
        for h in lo..hi {
            structure.g_into(theta, x_at(h), &mut y_hat, buf.workspace());
            for ((c, yh), y) in y_cot.iter_mut().zip(&y_hat).zip(dataset.y_row(s + h)) {
                let e = yh - y;
                fit += e * e;
                *c = 2.0 * terms.fit_scale * e;
            }
            let gx = &mut g_hidden[row(h)..row(h) + n_x];
            structure.vjp_g_acc(theta, x_at(h), &y_cot, &mut g_theta, gx, buf.workspace());
        }
    }

    Partial {
        fit: fit * terms.fit_scale,
        reg: reg * terms.reg_scale,
        g_theta,
        row0: s + p_lo,
        g_hidden,
    }
}

fn residual_pass(
    structure: &ModelStructure,
    theta: &[f64],
    hidden: &[f64],
    dataset: &Dataset,
    tau: &[f64],
    batch: &Batch,
    terms: ResidualTerms,
) -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
    let m = batch.m;
    let tasks: Vec<(usize, usize, usize)> = batch
        .starts
        .iter()
        .flat_map(|&s| {
            (0..m)
                .step_by(SCI_CHUNK)
                .map(move |lo| (s, lo, (lo + SCI_CHUNK).min(m)))
        })
        .collect();
    let parts: Vec<Result<Partial>> = tasks
        .par_iter()
        .map_init(
            || SolverBuffers::new(structure.n_x(), structure.n_u()),
            |buf, &(s, lo, hi)| {
                Ok(residual_chunk(
                    structure, theta, hidden, dataset, tau, s, m, lo, hi, terms, buf,
                ))
            },
        )
        .collect();
    reduce(parts, theta.len(), hidden.len(), structure.n_x())
}

#[allow(clippy::too_many_arguments)]
fn sci_with_grid(
    structure: &ModelStructure,
    theta: &[f64],
    hidden: &HiddenStates,
    dataset: &Dataset,
    tau: &[f64],
    batch: &Batch,
    alpha: f64,
    scheme: Scheme,
    interp: InputInterp,
) -> Result<LossGrads> {
    let scale = 1.0 / (batch.q() * batch.m) as f64;
    let terms = ResidualTerms {
        scheme,
        interp,
        fit_scale: scale,
        reg_scale: scale,
        alpha,
        with_fit: true,
    };
    let (j_fit, j_reg, grad_theta, grad_hidden) =
        residual_pass(structure, theta, &hidden.values, dataset, tau, batch, terms)?;
    Ok(LossGrads {
        j_tot: j_fit + alpha * j_reg,
        j_fit,
        j_reg,
        grad_theta,
        grad_hidden,
    })
}

/// SCI cost of one batch: `J_fit` compares `g(x̃)` with the data, `J_reg`
/// sums squared one-step residuals of `scheme` along each subsequence. Both
/// are divided by `q·m`. When `alpha` is zero the residuals are skipped and
/// `J_reg` is reported as zero.
#[allow(clippy::too_many_arguments)]
pub fn sci_loss_and_grads(
    structure: &ModelStructure,
    theta: &[f64],
    hidden: &HiddenStates,
    dataset: &Dataset,
    batch: &Batch,
    alpha: f64,
    scheme: Scheme,
    interp: InputInterp,
) -> Result<LossGrads> {
    check_common(structure, theta, hidden, dataset)?;
    check_batch(batch, dataset.len())?;
    let tau = model_grid(structure, dataset);
    sci_with_grid(
        structure, theta, hidden, dataset, &tau, batch, alpha, scheme, interp,
    )
}

/// Unnormalized sum of squared forward-Euler one-step prediction errors,
/// with the measured outputs used as states. Returns `(J_pred, grad_theta)`.
pub fn one_step_pred_loss_and_grads(
    structure: &ModelStructure,
    theta: &[f64],
    dataset: &Dataset,
) -> Result<(f64, Vec<f64>)> {
    if structure.variant() != Variant::FullyObserved {
        return Err(Error::UnsupportedStructure(structure.variant().name()));
    }
    check_dataset(structure, dataset)?;
    check_len("parameter vector", structure.n_params(), theta.len())?;
    let tau = model_grid(structure, dataset);
    one_step_with_grid(structure, theta, dataset, &tau)
}

fn one_step_with_grid(
    structure: &ModelStructure,
    theta: &[f64],
    dataset: &Dataset,
    tau: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let batch = Batch::new(vec![0], dataset.len(), dataset.len())?;
    let terms = ResidualTerms {
        scheme: Scheme::ForwardEuler,
        interp: InputInterp::ZeroOrderHold,
        fit_scale: 0.0,
        reg_scale: 1.0,
        alpha: 1.0,
        with_fit: false,
    };
    let (_, j, g_theta, _) =
        residual_pass(structure, theta, dataset.y(), dataset, tau, &batch, terms)?;
    Ok((j, g_theta))
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub theta: Vec<f64>,
    pub hidden: HiddenStates,
    pub j_tot: Vec<f64>,
    pub j_fit: Vec<f64>,
    pub j_reg: Vec<f64>,
    pub wall_seconds: f64,
    pub config: TrainConfig,
}

impl FitReport {
    /// Initial state for simulating the training record.
    pub fn x0(&self) -> &[f64] {
        self.hidden.row(0)
    }
}

pub fn fit(
    config: &TrainConfig,
    dataset: &Dataset,
    structure: &ModelStructure,
) -> Result<FitReport> {
    fit_from(config, dataset, structure, None, None)
}

/// [`fit`] starting from the given parameters and/or hidden states instead
/// of the configured initialization.
pub fn fit_from(
    config: &TrainConfig,
    dataset: &Dataset,
    structure: &ModelStructure,
    theta0: Option<Vec<f64>>,
    hidden0: Option<HiddenStates>,
) -> Result<FitReport> {
    check_dataset(structure, dataset)?;
    let (q, m) = config.validate(dataset.len())?;
    let started = Instant::now();
    let n_x = structure.n_x();

    let mut theta = match theta0 {
        Some(t) => {
            check_len("initial parameters", structure.n_params(), t.len())?;
            t
        }
        None => structure.init_params(config.seed).into_values(),
    };
    let mut hidden = match hidden0 {
        Some(h) => {
            check_len("hidden state width", n_x, h.n_x())?;
            check_len("hidden state rows", dataset.len(), h.len())?;
            h
        }
        None if config.algorithm == Algorithm::OneStepPred => {
            init_hidden(structure, dataset, HiddenInit::MeasuredOutput)?
        }
        None => init_hidden(structure, dataset, config.hidden_init)?,
    };
    if config.algorithm == Algorithm::OneStepPred && structure.variant() != Variant::FullyObserved {
        return Err(Error::UnsupportedStructure(structure.variant().name()));
    }

    let tau = model_grid(structure, dataset);
    let opts = config.train_options();
    let mut sampler = BatchSampler::new(dataset.len(), m, config.seed)?;
    let mut theta_opt = Stepper::new(config.optimizer, theta.len(), config.adam);
    let mut hidden_opt = Stepper::new(config.optimizer, hidden.values.len(), config.adam);
    let mut touched = vec![false; dataset.len()];

    let mut j_tot = Vec::with_capacity(config.n);
    let mut j_fit = Vec::with_capacity(config.n);
    let mut j_reg = Vec::with_capacity(config.n);

    for it in 0..config.n {
        let diverged = |source: Error| Error::Diverged {
            iteration: it,
            source: Box::new(source),
        };
        touched.iter_mut().for_each(|t| *t = false);
        let lg = match config.algorithm {
            Algorithm::Tsem | Algorithm::Sci => {
                let batch = sampler.next_batch(q)?;
                for j in 0..batch.q() {
                    touched[batch.rows(j)].iter_mut().for_each(|t| *t = true);
                }
                if config.algorithm == Algorithm::Tsem {
                    tsem_with_grid(
                        structure,
                        &theta,
                        &hidden,
                        dataset,
                        &tau,
                        &batch,
                        config.alpha,
                        &opts,
                    )
                } else {
                    sci_with_grid(
                        structure,
                        &theta,
                        &hidden,
                        dataset,
                        &tau,
                        &batch,
                        config.alpha,
                        config.scheme,
                        config.interp,
                    )
                }
            }
            Algorithm::FullSim => {
                touched[0] = config.optimize_x0;
                full_sim_with_grid(structure, &theta, hidden.row(0), dataset, &tau, &opts).map(
                    |(j, gt, gx)| {
                        let mut grad_hidden = vec![0.0; hidden.values.len()];
                        grad_hidden[..n_x].copy_from_slice(&gx);
                        LossGrads {
                            j_tot: j,
                            j_fit: j,
                            j_reg: 0.0,
                            grad_theta: gt,
                            grad_hidden,
                        }
                    },
                )
            }
            Algorithm::OneStepPred => {
                one_step_with_grid(structure, &theta, dataset, &tau).map(|(j, gt)| LossGrads {
                    j_tot: j,
                    j_fit: j,
                    j_reg: 0.0,
                    grad_theta: gt,
                    grad_hidden: Vec::new(),
                })
            }
        }
        .map_err(diverged)?;

        if !lg.j_tot.is_finite() || lg.grad_theta.iter().any(|g| !g.is_finite()) {
            return Err(diverged(Error::NonFiniteLoss { iteration: it }));
        }
        j_tot.push(lg.j_tot);
        j_fit.push(lg.j_fit);
        j_reg.push(lg.j_reg);
        if config.log_every > 0 && it % config.log_every == 0 {
            log::info!(
                "iter {it:>6}  J_tot {:.6e}  J_fit {:.6e}  J_reg {:.6e}",
                lg.j_tot,
                lg.j_fit,
                lg.j_reg
            );
        }

        theta_opt.step(&mut theta, &lg.grad_theta, config.lr)?;
        if touched.iter().any(|&t| t) {
            hidden_opt.step_rows(
                &mut hidden.values,
                &lg.grad_hidden,
                config.lr,
                n_x,
                &touched,
            )?;
        }
    }

    Ok(FitReport {
        theta,
        hidden,
        j_tot,
        j_fit,
        j_reg,
        wall_seconds: started.elapsed().as_secs_f64(),
        config: config.clone(),
    })
}

/// Simulated outputs over the whole record (row-major `N × n_y`).
pub fn simulate_outputs(
    structure: &ModelStructure,
    theta: &[f64],
    x0: &[f64],
    dataset: &Dataset,
    opts: &SimOptions,
) -> Result<Vec<f64>> {
    check_dataset(structure, dataset)?;
    let tau = model_grid(structure, dataset);
    let traj = simulate(structure, theta, x0, dataset.u(), &tau, opts)?;
    let n_y = structure.n_y();
    let mut y = vec![0.0; dataset.len() * n_y];
    let mut buf = SolverBuffers::new(structure.n_x(), structure.n_u());
    for (h, out) in y.chunks_exact_mut(n_y).enumerate() {
        structure.g_into(theta, traj.state(h), out, buf.workspace());
    }
    Ok(y)
}
