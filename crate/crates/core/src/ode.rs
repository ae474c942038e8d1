//! Fixed-step integration of neural state equations with reverse-mode
//! differentiation through the solver steps, and one-step scheme residuals.
//!
//! Grids are expressed in model time units. Each grid interval is covered by
//! `substeps` solver steps. Between samples the input is reconstructed either
//! by zero-order hold or by linear interpolation.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::models::{ModelStructure, Workspace};

/// A state equation `ẋ = f(x, u; θ)` with its VJP.
pub trait Dynamics: Sync {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn n_params(&self) -> usize;

    fn f_into(&self, theta: &[f64], x: &[f64], u: &[f64], out: &mut [f64], ws: &mut Workspace);

    #[allow(clippy::too_many_arguments)]
    fn vjp_f_acc(
        &self,
        theta: &[f64],
        x: &[f64],
        u: &[f64],
        cot: &[f64],
        g_theta: &mut [f64],
        g_x: &mut [f64],
        g_u: &mut [f64],
        ws: &mut Workspace,
    );
}

impl Dynamics for ModelStructure {
    fn n_x(&self) -> usize {
        ModelStructure::n_x(self)
    }

    fn n_u(&self) -> usize {
        ModelStructure::n_u(self)
    }

    fn n_params(&self) -> usize {
        ModelStructure::n_params(self)
    }

    fn f_into(&self, theta: &[f64], x: &[f64], u: &[f64], out: &mut [f64], ws: &mut Workspace) {
        ModelStructure::f_into(self, theta, x, u, out, ws)
    }

    fn vjp_f_acc(
        &self,
        theta: &[f64],
        x: &[f64],
        u: &[f64],
        cot: &[f64],
        g_theta: &mut [f64],
        g_x: &mut [f64],
        g_u: &mut [f64],
        ws: &mut Workspace,
    ) {
        ModelStructure::vjp_f_acc(self, theta, x, u, cot, g_theta, g_x, g_u, ws)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    ForwardEuler,
    Rk44,
    /// Residual-only: `x⁺ − x − Δt·f(x⁺, u⁺)`.
    BackwardEuler,
    /// Residual-only: `x⁺ − x − Δt/2·(f(x⁺, u⁺) + f(x, u))`.
    CrankNicolson,
}

impl Scheme {
    /// Whether the scheme can drive a forward simulation.
    pub fn is_explicit(self) -> bool {
        matches!(self, Scheme::ForwardEuler | Scheme::Rk44)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputInterp {
    #[default]
    ZeroOrderHold,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimOptions {
    pub scheme: Scheme,
    pub interp: InputInterp,
    pub substeps: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::ForwardEuler,
            interp: InputInterp::ZeroOrderHold,
            substeps: 1,
        }
    }
}

impl SimOptions {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.scheme.is_explicit() {
            return Err(Error::Config(format!(
                "{:?} can only be used as a residual, not for simulation",
                self.scheme
            )));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Simulated states on a grid. Every solver state is kept so the reverse
/// sweep can recompute stage values.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    tau: Vec<f64>,
    n_x: usize,
    substeps: usize,
    solver_states: Vec<f64>,
}

impl Trajectory {
    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    /// State at grid point `h`.
    pub fn state(&self, h: usize) -> &[f64] {
        let i = h * self.substeps * self.n_x;
        &self.solver_states[i..i + self.n_x]
    }

    /// States at the grid points, flattened row-major.
    pub fn states(&self) -> Vec<f64> {
        (0..self.len())
            .flat_map(|h| self.state(h).iter().copied())
            .collect()
    }
}

/// Per-worker buffers for stepping and reverse sweeps.
#[derive(Clone, Debug, Default)]
pub struct SolverBuffers {
    ws: Workspace,
    k: [Vec<f64>; 4],
    z: [Vec<f64>; 3],
    u: [Vec<f64>; 3],
    c: [Vec<f64>; 4],
    g_u: Vec<f64>,
}

impl SolverBuffers {
    pub fn new(n_x: usize, n_u: usize) -> Self {
        let v = |n| vec![0.0; n];
        Self {
            ws: Workspace::default(),
            k: [v(n_x), v(n_x), v(n_x), v(n_x)],
            z: [v(n_x), v(n_x), v(n_x)],
            u: [v(n_u), v(n_u), v(n_u)],
            c: [v(n_x), v(n_x), v(n_x), v(n_x)],
            g_u: v(n_u),
        }
    }

    pub fn workspace(&mut self) -> &mut Workspace {
        &mut self.ws
    }
}

/// Input at fraction `phi ∈ [0, 1]` of the interval `[u_lo, u_hi]`.
#[inline]
fn input_at(interp: InputInterp, u_lo: &[f64], u_hi: &[f64], phi: f64, out: &mut [f64]) {
    match interp {
        InputInterp::ZeroOrderHold => out.copy_from_slice(u_lo),
        InputInterp::Linear => {
            for ((o, a), b) in out.iter_mut().zip(u_lo).zip(u_hi) {
                *o = a + phi * (b - a);
            }
        }
    }
}

/// One explicit step of length `dt` starting at interval fraction `phi0` and
/// ending at `phi1`. `x` is updated in place.
#[allow(clippy::too_many_arguments)]
fn step<D: Dynamics + ?Sized>(
    d: &D,
    theta: &[f64],
    scheme: Scheme,
    interp: InputInterp,
    x: &mut [f64],
    u_lo: &[f64],
    u_hi: &[f64],
    phi0: f64,
    phi1: f64,
    dt: f64,
    b: &mut SolverBuffers,
) {
    let SolverBuffers { ws, k, z, u, .. } = b;
    match scheme {
        Scheme::ForwardEuler => {
            input_at(interp, u_lo, u_hi, phi0, &mut u[0]);
            d.f_into(theta, x, &u[0], &mut k[0], ws);
            for (xi, ki) in x.iter_mut().zip(&k[0]) {
                *xi += dt * ki;
            }
        }
        Scheme::Rk44 => {
            let phim = 0.5 * (phi0 + phi1);
            input_at(interp, u_lo, u_hi, phi0, &mut u[0]);
            input_at(interp, u_lo, u_hi, phim, &mut u[1]);
            input_at(interp, u_lo, u_hi, phi1, &mut u[2]);
            let [k1, k2, k3, k4] = k;
            let [z2, z3, z4] = z;
            d.f_into(theta, x, &u[0], k1, ws);
            axpy_into(z2, x, 0.5 * dt, k1);
            d.f_into(theta, z2, &u[1], k2, ws);
            axpy_into(z3, x, 0.5 * dt, k2);
            d.f_into(theta, z3, &u[1], k3, ws);
            axpy_into(z4, x, dt, k3);
            d.f_into(theta, z4, &u[2], k4, ws);
            for i in 0..x.len() {
                x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        Scheme::BackwardEuler | Scheme::CrankNicolson => unreachable!("validated as explicit"),
    }
}

/// Reverse of [`step`]: on entry `adj` is the cotangent of the step output;
/// on exit it is the cotangent of the step input. Parameter cotangents are
/// accumulated into `g_theta`.
#[allow(clippy::too_many_arguments)]
fn step_vjp<D: Dynamics + ?Sized>(
    d: &D,
    theta: &[f64],
    scheme: Scheme,
    interp: InputInterp,
    x: &[f64],
    u_lo: &[f64],
    u_hi: &[f64],
    phi0: f64,
    phi1: f64,
    dt: f64,
    adj: &mut [f64],
    g_theta: &mut [f64],
    b: &mut SolverBuffers,
) {
    let SolverBuffers {
        ws,
        k,
        z,
        u,
        c,
        g_u,
        ..
    } = b;
    match scheme {
        Scheme::ForwardEuler => {
            input_at(interp, u_lo, u_hi, phi0, &mut u[0]);
            let c0 = &mut c[0];
            for (ci, ai) in c0.iter_mut().zip(adj.iter()) {
                *ci = dt * ai;
            }
            d.vjp_f_acc(theta, x, &u[0], c0, g_theta, adj, g_u, ws);
        }
        Scheme::Rk44 => {
            let phim = 0.5 * (phi0 + phi1);
            input_at(interp, u_lo, u_hi, phi0, &mut u[0]);
            input_at(interp, u_lo, u_hi, phim, &mut u[1]);
            input_at(interp, u_lo, u_hi, phi1, &mut u[2]);
            let [k1, k2, k3, ck4] = k;
            let [z2, z3, z4] = z;
            // Recompute stages.
            d.f_into(theta, x, &u[0], k1, ws);
            axpy_into(z2, x, 0.5 * dt, k1);
            d.f_into(theta, z2, &u[1], k2, ws);
            axpy_into(z3, x, 0.5 * dt, k2);
            d.f_into(theta, z3, &u[1], k3, ws);
            axpy_into(z4, x, dt, k3);

            let [ck1, ck2, ck3, gz] = c;
            let n = x.len();
            for i in 0..n {
                ck1[i] = dt / 6.0 * adj[i];
                ck2[i] = dt / 3.0 * adj[i];
                ck3[i] = dt / 3.0 * adj[i];
                ck4[i] = dt / 6.0 * adj[i];
                gz[i] = 0.0;
            }
            d.vjp_f_acc(theta, z4, &u[2], ck4, g_theta, gz, g_u, ws);
            for i in 0..n {
                adj[i] += gz[i];
                ck3[i] += dt * gz[i];
            }
            gz.fill(0.0);
            d.vjp_f_acc(theta, z3, &u[1], ck3, g_theta, gz, g_u, ws);
            for i in 0..n {
                adj[i] += gz[i];
                ck2[i] += 0.5 * dt * gz[i];
            }
            gz.fill(0.0);
            d.vjp_f_acc(theta, z2, &u[1], ck2, g_theta, gz, g_u, ws);
            for i in 0..n {
                adj[i] += gz[i];
                ck1[i] += 0.5 * dt * gz[i];
            }
            d.vjp_f_acc(theta, x, &u[0], ck1, g_theta, adj, g_u, ws);
        }
        Scheme::BackwardEuler | Scheme::CrankNicolson => unreachable!("validated as explicit"),
    }
}

#[inline]
fn axpy_into(out: &mut [f64], x: &[f64], a: f64, y: &[f64]) {
    for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
        *o = xi + a * yi;
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if let Some(i) = grid.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonMonotoneGrid { index: i });
    }
    for (i, w) in grid.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(Error::NonMonotoneGrid { index: i + 1 });
        }
    }
    Ok(())
}

/// Integrates from `x0` over `grid` with one input sample per grid point
/// (`u` is row-major, `grid.len() × n_u`).
pub fn simulate<D: Dynamics + ?Sized>(
    d: &D,
    theta: &[f64],
    x0: &[f64],
    u: &[f64],
    grid: &[f64],
    opts: &SimOptions,
) -> Result<Trajectory> {
    opts.validate()?;
    check_len("parameter vector", d.n_params(), theta.len())?;
    check_len("initial state", d.n_x(), x0.len())?;
    check_len("input samples", grid.len() * d.n_u(), u.len())?;
    check_grid(grid)?;
    let mut buffers = SolverBuffers::new(d.n_x(), d.n_u());
    simulate_with(d, theta, x0, u, grid, opts, &mut buffers)
}

/// [`simulate`] without argument validation, reusing `buffers`.
pub(crate) fn simulate_with<D: Dynamics + ?Sized>(
    d: &D,
    theta: &[f64],
    x0: &[f64],
    u: &[f64],
    grid: &[f64],
    opts: &SimOptions,
    buffers: &mut SolverBuffers,
) -> Result<Trajectory> {
    let n_x = d.n_x();
    let n_u = d.n_u();
    let s = opts.substeps;
    let steps = grid.len().saturating_sub(1) * s;
    let mut states = Vec::with_capacity((steps + 1) * n_x);
    states.extend_from_slice(x0);
    let mut x = x0.to_vec();
    for h in 0..grid.len().saturating_sub(1) {
        let dt = (grid[h + 1] - grid[h]) / s as f64;
        let u_lo = &u[h * n_u..(h + 1) * n_u];
        let u_hi = &u[(h + 1) * n_u..(h + 2) * n_u];
        for j in 0..s {
            let phi0 = j as f64 / s as f64;
            let phi1 = (j + 1) as f64 / s as f64;
            step(
                d,
                theta,
                opts.scheme,
                opts.interp,
                &mut x,
                u_lo,
                u_hi,
                phi0,
                phi1,
                dt,
                buffers,
            );
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    step: h * s + j + 1,
                });
            }
            states.extend_from_slice(&x);
        }
    }
    Ok(Trajectory {
        tau: grid.to_vec(),
        n_x,
        substeps: s,
        solver_states: states,
    })
}

/// Reverse sweep through a simulated trajectory.
///
/// `state_cot` holds one cotangent per grid point (row-major). Returns the
/// cotangents of the parameters and of the initial state.
pub fn backprop_simulate<D: Dynamics + ?Sized>(
    d: &D,
    theta: &[f64],
    traj: &Trajectory,
    u: &[f64],
    opts: &SimOptions,
    state_cot: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    opts.validate()?;
    check_len("parameter vector", d.n_params(), theta.len())?;
    check_len("trajectory state dimension", d.n_x(), traj.n_x)?;
    check_len("input samples", traj.len() * d.n_u(), u.len())?;
    check_len("state cotangents", traj.len() * d.n_x(), state_cot.len())?;
    if traj.substeps != opts.substeps {
        return Err(Error::Config(
            "substep count differs from the simulated trajectory".into(),
        ));
    }
    let mut g_theta = vec![0.0; theta.len()];
    let mut x0_cot = vec![0.0; d.n_x()];
    let mut buffers = SolverBuffers::new(d.n_x(), d.n_u());
    backprop_with(
        d,
        theta,
        traj,
        u,
        opts,
        state_cot,
        &mut g_theta,
        &mut x0_cot,
        &mut buffers,
    );
    Ok((g_theta, x0_cot))
}

/// Accumulating reverse sweep; `x0_cot` is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backprop_with<D: Dynamics + ?Sized>(
    d: &D,
    theta: &[f64],
    traj: &Trajectory,
    u: &[f64],
    opts: &SimOptions,
    state_cot: &[f64],
    g_theta: &mut [f64],
    x0_cot: &mut [f64],
    buffers: &mut SolverBuffers,
) {
    let n_x = d.n_x();
    let n_u = d.n_u();
    let s = opts.substeps;
    let len = traj.len();
    let grid = &traj.tau;
    let adj = x0_cot;
    adj.copy_from_slice(&state_cot[(len - 1) * n_x..len * n_x]);
    for h in (0..len - 1).rev() {
        let dt = (grid[h + 1] - grid[h]) / s as f64;
        let u_lo = &u[h * n_u..(h + 1) * n_u];
        let u_hi = &u[(h + 1) * n_u..(h + 2) * n_u];
        for j in (0..s).rev() {
            let idx = (h * s + j) * n_x;
            let x = &traj.solver_states[idx..idx + n_x];
            let phi0 = j as f64 / s as f64;
            let phi1 = (j + 1) as f64 / s as f64;
            step_vjp(
                d,
                theta,
                opts.scheme,
                opts.interp,
                x,
                u_lo,
                u_hi,
                phi0,
                phi1,
                dt,
                adj,
                g_theta,
                buffers,
            );
        }
        for (a, c) in adj.iter_mut().zip(&state_cot[h * n_x..(h + 1) * n_x]) {
            *a += c;
        }
    }
}

/// One-step defect of `scheme` between two consecutive states, with a
/// zero-order-hold input for the RK44 stages.
#[allow(clippy::too_many_arguments)]
pub fn scheme_residual<D: Dynamics + ?Sized>(
    d: &D,
    theta: &[f64],
    scheme: Scheme,
    x_prev: &[f64],
    x_next: &[f64],
    u_prev: &[f64],
    u_next: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    check_residual_args(d, theta, x_prev, x_next, u_prev, u_next, dt)?;
    let mut out = vec![0.0; d.n_x()];
    let mut b = SolverBuffers::new(d.n_x(), d.n_u());
    residual_into(
        d,
        theta,
        scheme,
        InputInterp::ZeroOrderHold,
        x_prev,
        x_next,
        u_prev,
        u_next,
        dt,
        &mut out,
        &mut b,
    );
    Ok(out)
}

/// Returns `(param_cot, x_prev_cot, x_next_cot)` for the residual of
/// [`scheme_residual`].
#[allow(clippy::too_many_arguments)]
pub fn vjp_scheme_residual<D: Dynamics + ?Sized>(
    d: &D,
    theta: &[f64],
    scheme: Scheme,
    x_prev: &[f64],
    x_next: &[f64],
    u_prev: &[f64],
    u_next: &[f64],
    dt: f64,
    cotangent: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    check_residual_args(d, theta, x_prev, x_next, u_prev, u_next, dt)?;
    check_len("residual cotangent", d.n_x(), cotangent.len())?;
    let mut g_theta = vec![0.0; theta.len()];
    let mut g_prev = vec![0.0; d.n_x()];
    let mut g_next = vec![0.0; d.n_x()];
    let mut b = SolverBuffers::new(d.n_x(), d.n_u());
    residual_vjp_acc(
        d,
        theta,
        scheme,
        InputInterp::ZeroOrderHold,
        x_prev,
        x_next,
        u_prev,
        u_next,
        dt,
        cotangent,
        &mut g_theta,
        &mut g_prev,
        &mut g_next,
        &mut b,
    );
    Ok((g_theta, g_prev, g_next))
}

#[allow(clippy::too_many_arguments)]
fn check_residual_args<D: Dynamics + ?Sized>(
    d: &D,
    theta: &[f64],
    x_prev: &[f64],
    x_next: &[f64],
    u_prev: &[f64],
    u_next: &[f64],
    dt: f64,
) -> Result<()> {
    check_len("parameter vector", d.n_params(), theta.len())?;
    check_len("previous state", d.n_x(), x_prev.len())?;
    check_len("next state", d.n_x(), x_next.len())?;
    check_len("previous input", d.n_u(), u_prev.len())?;
    check_len("next input", d.n_u(), u_next.len())?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!(
            "step size must be positive, got {dt}"
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn residual_into<D: Dynamics + ?Sized>(
    d: &D,
    theta: &[f64],
    scheme: Scheme,
    interp: InputInterp,
    x_prev: &[f64],
    x_next: &[f64],
    u_prev: &[f64],
    u_next: &[f64],
    dt: f64,
    out: &mut [f64],
    b: &mut SolverBuffers,
) {
    match scheme {
        Scheme::ForwardEuler | Scheme::BackwardEuler | Scheme::CrankNicolson => {
            let SolverBuffers { ws, k, .. } = b;
            let [fp, fn_, ..] = k;
            for i in 0..out.len() {
                out[i] = x_next[i] - x_prev[i];
            }
            if scheme != Scheme::BackwardEuler {
                d.f_into(theta, x_prev, u_prev, fp, ws);
            }
            if scheme != Scheme::ForwardEuler {
                d.f_into(theta, x_next, u_next, fn_, ws);
            }
            for i in 0..out.len() {
                out[i] -= match scheme {
                    Scheme::ForwardEuler => dt * fp[i],
                    Scheme::BackwardEuler => dt * fn_[i],
                    _ => 0.5 * dt * (fp[i] + fn_[i]),
                };
            }
        }
        Scheme::Rk44 => {
            out.copy_from_slice(x_prev);
            step(
                d, theta, scheme, interp, out, u_prev, u_next, 0.0, 1.0, dt, b,
            );
            for (o, xn) in out.iter_mut().zip(x_next) {
                *o = xn - *o;
            }
        }
    }
}

/// Accumulates the residual VJP into the three gradient buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn residual_vjp_acc<D: Dynamics + ?Sized>(
    d: &D,
    theta: &[f64],
    scheme: Scheme,
    interp: InputInterp,
    x_prev: &[f64],
    x_next: &[f64],
    u_prev: &[f64],
    u_next: &[f64],
    dt: f64,
    cot: &[f64],
    g_theta: &mut [f64],
    g_prev: &mut [f64],
    g_next: &mut [f64],
    b: &mut SolverBuffers,
) {
    for (g, c) in g_next.iter_mut().zip(cot) {
        *g += c;
    }
    match scheme {
        Scheme::ForwardEuler | Scheme::BackwardEuler | Scheme::CrankNicolson => {
            for (g, c) in g_prev.iter_mut().zip(cot) {
                *g -= c;
            }
            let w = if scheme == Scheme::CrankNicolson {
                0.5 * dt
            } else {
                dt
            };
            let SolverBuffers { ws, c: cb, g_u, .. } = b;
            let scaled = &mut cb[0];
            for (s, c) in scaled.iter_mut().zip(cot) {
                *s = -w * c;
            }
            if scheme != Scheme::BackwardEuler {
                d.vjp_f_acc(theta, x_prev, u_prev, scaled, g_theta, g_prev, g_u, ws);
            }
            if scheme != Scheme::ForwardEuler {
                d.vjp_f_acc(theta, x_next, u_next, scaled, g_theta, g_next, g_u, ws);
            }
        }
        Scheme::Rk44 => {
            let mut adj: Vec<f64> = cot.iter().map(|c| -c).collect();
            step_vjp(
                d, theta, scheme, interp, x_prev, u_prev, u_next, 0.0, 1.0, dt, &mut adj, g_theta,
                b,
            );
            for (g, a) in g_prev.iter_mut().zip(&adj) {
                *g += a;
            }
        }
    }
}
