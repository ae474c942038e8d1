//! Neural state-space model structures.
//!
//! Each structure maps `(x, u, θ) → ẋ` and `(x, θ) → y`, with exact VJPs for
//! both maps. Available wirings:
//!
//! | variant          | state map                             | output map        |
//! |------------------|---------------------------------------|-------------------|
//! | `general_ss`     | `N_f(x, u)`                           | `N_g(x)`          |
//! | `incremental`    | `A x + B u + N_f(x, u)`               | `C x + N_g(x)`    |
//! | `fully_observed` | `N_f(x, u)`                           | `x`               |
//! | `cts_physics`    | `(N_f1(x1, u), N_f2(x1, x2, u))`      | `x2`              |
//! | `emps_physics`   | `(x2, N_f(x2, u))`                    | `x1`              |
//!
//! For `cts_physics` with `overflow = false` the second network only sees
//! `(x1, x2)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{Activation, Mlp, MlpLayout, ParameterLayout, ParameterVector, Scratch};

fn default_true() -> bool {
    true
}

fn default_time_unit() -> f64 {
    1.0
}

/// Structure block of the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum StructureConfig {
    GeneralSs {
        n_x: usize,
        n_u: usize,
        n_y: usize,
        hidden_f: usize,
        hidden_g: usize,
        #[serde(default)]
        activation: Activation,
    },
    Incremental {
        n_x: usize,
        n_u: usize,
        n_y: usize,
        hidden_f: usize,
        hidden_g: usize,
        #[serde(default)]
        activation: Activation,
        /// `n_x × n_x`, row-major.
        a_l: Vec<f64>,
        /// `n_x × n_u`, row-major.
        b_l: Vec<f64>,
        /// `n_y × n_x`, row-major.
        c_l: Vec<f64>,
    },
    FullyObserved {
        n_x: usize,
        n_u: usize,
        hidden_f: usize,
        #[serde(default)]
        activation: Activation,
    },
    CtsPhysics {
        hidden: usize,
        #[serde(default)]
        activation: Activation,
        /// Feed `u` to the lower-tank network as well.
        #[serde(default = "default_true")]
        overflow: bool,
    },
    EmpsPhysics {
        hidden: usize,
        #[serde(default)]
        activation: Activation,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub structure: StructureConfig,
    /// Seconds per model time unit. The learned state map returns derivatives
    /// with respect to this unit, so setting it to the sampling period makes
    /// every solver step have unit length.
    #[serde(default = "default_time_unit")]
    pub time_unit: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    GeneralSs,
    Incremental,
    FullyObserved,
    CtsPhysics,
    EmpsPhysics,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::GeneralSs => "general_ss",
            Variant::Incremental => "incremental",
            Variant::FullyObserved => "fully_observed",
            Variant::CtsPhysics => "cts_physics",
            Variant::EmpsPhysics => "emps_physics",
        }
    }
}

#[derive(Clone, Debug)]
enum Wiring {
    General {
        f: Mlp,
        g: Mlp,
    },
    Incremental {
        f: Mlp,
        g: Mlp,
        a: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
    },
    FullyObserved {
        f: Mlp,
    },
    Cts {
        f1: Mlp,
        f2: Mlp,
        overflow: bool,
    },
    Emps {
        f: Mlp,
    },
}

/// Buffers reused across model evaluations. One per worker.
#[derive(Clone, Debug, Default)]
pub struct Workspace {
    nn: Scratch,
    input: Vec<f64>,
    grad_input: Vec<f64>,
}

impl Workspace {
    fn input(&mut self, parts: &[&[f64]]) {
        self.input.clear();
        for p in parts {
            self.input.extend_from_slice(p);
        }
        self.grad_input.clear();
        self.grad_input.resize(self.input.len(), 0.0);
    }
}

#[derive(Clone, Debug)]
pub struct ModelStructure {
    wiring: Wiring,
    n_x: usize,
    n_u: usize,
    n_y: usize,
    layout: ParameterLayout,
    time_unit: f64,
    config: ModelConfig,
}

fn check_matrix(name: &str, m: &[f64], rows: usize, cols: usize) -> Result<()> {
    if m.len() != rows * cols {
        return Err(Error::Config(format!(
            "{name} must have {rows}x{cols} = {} entries, got {}",
            rows * cols,
            m.len()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("{name} has non-finite entries")));
    }
    Ok(())
}

impl ModelStructure {
    pub fn from_config(config: &ModelConfig) -> Result<Self> {
        if !(config.time_unit.is_finite() && config.time_unit > 0.0) {
            return Err(Error::Config("time_unit must be positive".into()));
        }
        let mut layout = ParameterLayout::new();
        let (wiring, n_x, n_u, n_y) = match &config.structure {
            StructureConfig::GeneralSs {
                n_x,
                n_u,
                n_y,
                hidden_f,
                hidden_g,
                activation,
            } => {
                let f = Mlp::register(
                    &mut layout,
                    "f",
                    MlpLayout::new(n_x + n_u, *hidden_f, *n_x, *activation)?,
                )?;
                let g = Mlp::register(
                    &mut layout,
                    "g",
                    MlpLayout::new(*n_x, *hidden_g, *n_y, *activation)?,
                )?;
                (Wiring::General { f, g }, *n_x, *n_u, *n_y)
            }
            StructureConfig::Incremental {
                n_x,
                n_u,
                n_y,
                hidden_f,
                hidden_g,
                activation,
                a_l,
                b_l,
                c_l,
            } => {
                check_matrix("a_l", a_l, *n_x, *n_x)?;
                check_matrix("b_l", b_l, *n_x, *n_u)?;
                check_matrix("c_l", c_l, *n_y, *n_x)?;
                let f = Mlp::register(
                    &mut layout,
                    "f",
                    MlpLayout::new(n_x + n_u, *hidden_f, *n_x, *activation)?,
                )?;
                let g = Mlp::register(
                    &mut layout,
                    "g",
                    MlpLayout::new(*n_x, *hidden_g, *n_y, *activation)?,
                )?;
                (
                    Wiring::Incremental {
                        f,
                        g,
                        a: a_l.clone(),
                        b: b_l.clone(),
                        c: c_l.clone(),
                    },
                    *n_x,
                    *n_u,
                    *n_y,
                )
            }
            StructureConfig::FullyObserved {
                n_x,
                n_u,
                hidden_f,
                activation,
            } => {
                let f = Mlp::register(
                    &mut layout,
                    "f",
                    MlpLayout::new(n_x + n_u, *hidden_f, *n_x, *activation)?,
                )?;
                (Wiring::FullyObserved { f }, *n_x, *n_u, *n_x)
            }
            StructureConfig::CtsPhysics {
                hidden,
                activation,
                overflow,
            } => {
                let f1 = Mlp::register(
                    &mut layout,
                    "f1",
                    MlpLayout::new(2, *hidden, 1, *activation)?,
                )?;
                let n_in2 = if *overflow { 3 } else { 2 };
                let f2 = Mlp::register(
                    &mut layout,
                    "f2",
                    MlpLayout::new(n_in2, *hidden, 1, *activation)?,
                )?;
                (
                    Wiring::Cts {
                        f1,
                        f2,
                        overflow: *overflow,
                    },
                    2,
                    1,
                    1,
                )
            }
            StructureConfig::EmpsPhysics { hidden, activation } => {
                let f = Mlp::register(
                    &mut layout,
                    "f",
                    MlpLayout::new(2, *hidden, 1, *activation)?,
                )?;
                (Wiring::Emps { f }, 2, 1, 1)
            }
        };
        if n_x == 0 || n_u == 0 || n_y == 0 {
            return Err(Error::Config("n_x, n_u and n_y must be positive".into()));
        }
        Ok(Self {
            wiring,
            n_x,
            n_u,
            n_y,
            layout,
            time_unit: config.time_unit,
            config: config.clone(),
        })
    }

    pub fn variant(&self) -> Variant {
        match self.wiring {
            Wiring::General { .. } => Variant::GeneralSs,
            Wiring::Incremental { .. } => Variant::Incremental,
            Wiring::FullyObserved { .. } => Variant::FullyObserved,
            Wiring::Cts { .. } => Variant::CtsPhysics,
            Wiring::Emps { .. } => Variant::EmpsPhysics,
        }
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn n_params(&self) -> usize {
        self.layout.len()
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn time_unit(&self) -> f64 {
        self.time_unit
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn networks(&self) -> Vec<&Mlp> {
        match &self.wiring {
            Wiring::General { f, g } | Wiring::Incremental { f, g, .. } => vec![f, g],
            Wiring::FullyObserved { f } | Wiring::Emps { f } => vec![f],
            Wiring::Cts { f1, f2, .. } => vec![f1, f2],
        }
    }

    /// Initial parameters: each network draws from its own stream of the seed.
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        let mut params = ParameterVector::zeros(self.layout.clone());
        for (i, net) in self.networks().into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            net.init_into(params.values_mut(), &mut rng);
        }
        params
    }

    /// State derivative. Hot path: dimensions are only debug-checked.
    pub fn f_into(&self, theta: &[f64], x: &[f64], u: &[f64], out: &mut [f64], ws: &mut Workspace) {
        debug_assert_eq!(x.len(), self.n_x);
        debug_assert_eq!(u.len(), self.n_u);
        match &self.wiring {
            Wiring::General { f, .. } | Wiring::FullyObserved { f } => {
                ws.input(&[x, u]);
                f.forward(theta, &ws.input, out, &mut ws.nn);
            }
            Wiring::Incremental { f, a, b, .. } => {
                ws.input(&[x, u]);
                f.forward(theta, &ws.input, out, &mut ws.nn);
                affine_acc(out, a, x);
                affine_acc(out, b, u);
            }
            Wiring::Cts { f1, f2, overflow } => {
                ws.input(&[&x[..1], u]);
                f1.forward(theta, &ws.input, &mut out[..1], &mut ws.nn);
                if *overflow {
                    ws.input(&[x, u]);
                } else {
                    ws.input(&[x]);
                }
                f2.forward(theta, &ws.input, &mut out[1..2], &mut ws.nn);
            }
            Wiring::Emps { f } => {
                out[0] = x[1];
                ws.input(&[&x[1..2], u]);
                f.forward(theta, &ws.input, &mut out[1..2], &mut ws.nn);
            }
        }
    }

    /// Accumulates the VJP of the state map into `g_theta`, `g_x` and `g_u`.
    #[allow(clippy::too_many_arguments)]
    pub fn vjp_f_acc(
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
        let nx = self.n_x;
        match &self.wiring {
            Wiring::General { f, .. } | Wiring::FullyObserved { f } => {
                ws.input(&[x, u]);
                f.vjp_acc(
                    theta,
                    &ws.input,
                    cot,
                    g_theta,
                    &mut ws.grad_input,
                    &mut ws.nn,
                );
                add_into(g_x, &ws.grad_input[..nx]);
                add_into(g_u, &ws.grad_input[nx..]);
            }
            Wiring::Incremental { f, a, b, .. } => {
                ws.input(&[x, u]);
                f.vjp_acc(
                    theta,
                    &ws.input,
                    cot,
                    g_theta,
                    &mut ws.grad_input,
                    &mut ws.nn,
                );
                add_into(g_x, &ws.grad_input[..nx]);
                add_into(g_u, &ws.grad_input[nx..]);
                transpose_acc(g_x, a, cot);
                transpose_acc(g_u, b, cot);
            }
            Wiring::Cts { f1, f2, overflow } => {
                ws.input(&[&x[..1], u]);
                f1.vjp_acc(
                    theta,
                    &ws.input,
                    &cot[..1],
                    g_theta,
                    &mut ws.grad_input,
                    &mut ws.nn,
                );
                g_x[0] += ws.grad_input[0];
                g_u[0] += ws.grad_input[1];
                if *overflow {
                    ws.input(&[x, u]);
                } else {
                    ws.input(&[x]);
                }
                f2.vjp_acc(
                    theta,
                    &ws.input,
                    &cot[1..2],
                    g_theta,
                    &mut ws.grad_input,
                    &mut ws.nn,
                );
                g_x[0] += ws.grad_input[0];
                g_x[1] += ws.grad_input[1];
                if *overflow {
                    g_u[0] += ws.grad_input[2];
                }
            }
            Wiring::Emps { f } => {
                g_x[1] += cot[0];
                ws.input(&[&x[1..2], u]);
                f.vjp_acc(
                    theta,
                    &ws.input,
                    &cot[1..2],
                    g_theta,
                    &mut ws.grad_input,
                    &mut ws.nn,
                );
                g_x[1] += ws.grad_input[0];
                g_u[0] += ws.grad_input[1];
            }
        }
    }

    /// Output map. Hot path.
    pub fn g_into(&self, theta: &[f64], x: &[f64], out: &mut [f64], ws: &mut Workspace) {
        debug_assert_eq!(x.len(), self.n_x);
        match &self.wiring {
            Wiring::General { g, .. } => g.forward(theta, x, out, &mut ws.nn),
            Wiring::Incremental { g, c, .. } => {
                g.forward(theta, x, out, &mut ws.nn);
                affine_acc(out, c, x);
            }
            Wiring::FullyObserved { .. } => out.copy_from_slice(x),
            Wiring::Cts { .. } => out[0] = x[1],
            Wiring::Emps { .. } => out[0] = x[0],
        }
    }

    pub fn vjp_g_acc(
        &self,
        theta: &[f64],
        x: &[f64],
        cot: &[f64],
        g_theta: &mut [f64],
        g_x: &mut [f64],
        ws: &mut Workspace,
    ) {
        match &self.wiring {
            Wiring::General { g, .. } => g.vjp_acc(theta, x, cot, g_theta, g_x, &mut ws.nn),
            Wiring::Incremental { g, c, .. } => {
                g.vjp_acc(theta, x, cot, g_theta, g_x, &mut ws.nn);
                transpose_acc(g_x, c, cot);
            }
            Wiring::FullyObserved { .. } => add_into(g_x, cot),
            Wiring::Cts { .. } => g_x[1] += cot[0],
            Wiring::Emps { .. } => g_x[0] += cot[0],
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        check_len("parameter vector", self.n_params(), theta.len())
    }

    pub fn eval_f(&self, theta: &[f64], x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        check_len("state", self.n_x, x.len())?;
        check_len("input", self.n_u, u.len())?;
        let mut ws = Workspace::default();
        let mut out = vec![0.0; self.n_x];
        self.f_into(theta, x, u, &mut out, &mut ws);
        Ok(out)
    }

    pub fn eval_g(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        check_len("state", self.n_x, x.len())?;
        let mut ws = Workspace::default();
        let mut out = vec![0.0; self.n_y];
        self.g_into(theta, x, &mut out, &mut ws);
        Ok(out)
    }

    /// Returns `(param_cot, x_cot, u_cot)`.
    pub fn vjp_f(
        &self,
        theta: &[f64],
        x: &[f64],
        u: &[f64],
        cotangent: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        self.check_theta(theta)?;
        check_len("state", self.n_x, x.len())?;
        check_len("input", self.n_u, u.len())?;
        check_len("state cotangent", self.n_x, cotangent.len())?;
        let mut ws = Workspace::default();
        let mut gt = vec![0.0; theta.len()];
        let mut gx = vec![0.0; self.n_x];
        let mut gu = vec![0.0; self.n_u];
        self.vjp_f_acc(theta, x, u, cotangent, &mut gt, &mut gx, &mut gu, &mut ws);
        Ok((gt, gx, gu))
    }

    /// Returns `(param_cot, x_cot)`.
    pub fn vjp_g(
        &self,
        theta: &[f64],
        x: &[f64],
        cotangent: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_theta(theta)?;
        check_len("state", self.n_x, x.len())?;
        check_len("output cotangent", self.n_y, cotangent.len())?;
        let mut ws = Workspace::default();
        let mut gt = vec![0.0; theta.len()];
        let mut gx = vec![0.0; self.n_x];
        self.vjp_g_acc(theta, x, cotangent, &mut gt, &mut gx, &mut ws);
        Ok((gt, gx))
    }
}

/// `out += M · v` for row-major `M`.
fn affine_acc(out: &mut [f64], m: &[f64], v: &[f64]) {
    for (o, row) in out.iter_mut().zip(m.chunks_exact(v.len())) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `g += Mᵀ · c` for row-major `M` with `c.len()` rows.
fn transpose_acc(g: &mut [f64], m: &[f64], c: &[f64]) {
    let cols = g.len();
    for (row, ci) in m.chunks_exact(cols).zip(c) {
        for (gj, mij) in g.iter_mut().zip(row) {
            *gj += mij * ci;
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
