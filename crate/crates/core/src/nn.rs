//! Single-hidden-layer feedforward networks stored in a flat parameter vector.
//!
//! A network computes `W2 · act(W1 · input + b1) + b2`. Its four blocks are laid
//! out contiguously as `w1` (row-major `n_hidden × n_in`), `b1`, `w2` (row-major
//! `n_out × n_hidden`), `b2`. Every structure in [`crate::models`] keeps all of its
//! networks in one [`ParameterVector`], so the optimizer sees a single flat slice.
//!
//! Gradients are reverse-mode vector-Jacobian products. The ReLU derivative at
//! exactly zero is taken to be zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Standard deviation of the Gaussian used for initial weights.
pub const INIT_WEIGHT_STD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and activation `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpLayout {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    pub activation: Activation,
}

impl MlpLayout {
    pub fn new(n_in: usize, n_hidden: usize, n_out: usize, activation: Activation) -> Result<Self> {
        if n_in == 0 || n_hidden == 0 || n_out == 0 {
            return Err(Error::Config(format!(
                "network dimensions must be positive, got {n_in}x{n_hidden}x{n_out}"
            )));
        }
        Ok(Self {
            n_in,
            n_hidden,
            n_out,
            activation,
        })
    }

    pub fn num_params(&self) -> usize {
        self.n_hidden * self.n_in + self.n_hidden + self.n_out * self.n_hidden + self.n_out
    }

    fn w1_len(&self) -> usize {
        self.n_hidden * self.n_in
    }

    fn b1_off(&self) -> usize {
        self.w1_len()
    }

    fn w2_off(&self) -> usize {
        self.b1_off() + self.n_hidden
    }

    fn b2_off(&self) -> usize {
        self.w2_off() + self.n_out * self.n_hidden
    }
}

/// One named block inside a [`ParameterLayout`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BlockInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Registry of named blocks in a flat parameter vector.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterLayout {
    blocks: Vec<BlockInfo>,
    len: usize,
}

impl ParameterLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block and returns its offset.
    pub fn register(&mut self, name: &str, rows: usize, cols: usize) -> Result<usize> {
        if self.blocks.iter().any(|b| b.name == name) {
            return Err(Error::Layout(format!("block {name} registered twice")));
        }
        let offset = self.len;
        self.blocks.push(BlockInfo {
            name: name.to_string(),
            offset,
            rows,
            cols,
        });
        self.len += rows * cols;
        Ok(offset)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&BlockInfo> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// The flat vector of all tunable model parameters together with its layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    layout: ParameterLayout,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn new(layout: ParameterLayout, values: Vec<f64>) -> Result<Self> {
        check_len("parameter vector", layout.len(), values.len())?;
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: ParameterLayout) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.block(name).map(|b| &self.values[b.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.block(name)?.range();
        Some(&mut self.values[range])
    }
}

/// Reusable buffers for network evaluation.
#[derive(Clone, Debug, Default)]
pub struct Scratch {
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl Scratch {
    fn ensure(&mut self, n_hidden: usize) {
        if self.pre.len() < n_hidden {
            self.pre.resize(n_hidden, 0.0);
            self.act.resize(n_hidden, 0.0);
        }
    }
}

/// A network living at `offset` inside a larger parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    layout: MlpLayout,
    offset: usize,
}

impl Mlp {
    /// Registers the blocks `{name}.w1`, `{name}.b1`, `{name}.w2`, `{name}.b2`.
    pub fn register(params: &mut ParameterLayout, name: &str, layout: MlpLayout) -> Result<Self> {
        let offset = params.register(&format!("{name}.w1"), layout.n_hidden, layout.n_in)?;
        params.register(&format!("{name}.b1"), layout.n_hidden, 1)?;
        params.register(&format!("{name}.w2"), layout.n_out, layout.n_hidden)?;
        params.register(&format!("{name}.b2"), layout.n_out, 1)?;
        Ok(Self { layout, offset })
    }

    /// A network occupying a standalone block starting at offset 0.
    pub fn standalone(layout: MlpLayout) -> Self {
        Self { layout, offset: 0 }
    }

    pub fn layout(&self) -> &MlpLayout {
        &self.layout
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.layout.num_params()
    }

    /// Fills this network's block of `theta`: Gaussian weights, zero biases.
    pub fn init_into(&self, theta: &mut [f64], rng: &mut ChaCha8Rng) {
        let normal = Normal::new(0.0, INIT_WEIGHT_STD).expect("positive std");
        let l = &self.layout;
        let block = &mut theta[self.param_range()];
        for w in &mut block[..l.w1_len()] {
            *w = normal.sample(rng);
        }
        block[l.b1_off()..l.w2_off()].fill(0.0);
        for w in &mut block[l.w2_off()..l.b2_off()] {
            *w = normal.sample(rng);
        }
        block[l.b2_off()..].fill(0.0);
    }

    /// Evaluates the network, writing `n_out` values into `out`.
    #[inline]
    pub fn forward(&self, theta: &[f64], input: &[f64], out: &mut [f64], scratch: &mut Scratch) {
        let l = &self.layout;
        debug_assert_eq!(input.len(), l.n_in);
        debug_assert_eq!(out.len(), l.n_out);
        let p = &theta[self.param_range()];
        let (w1, rest) = p.split_at(l.w1_len());
        let (b1, rest) = rest.split_at(l.n_hidden);
        let (w2, b2) = rest.split_at(l.n_out * l.n_hidden);
        scratch.ensure(l.n_hidden);
        let act = &mut scratch.act[..l.n_hidden];
        for ((a, row), b) in act.iter_mut().zip(w1.chunks_exact(l.n_in)).zip(b1) {
            let z = b + dot(row, input);
            *a = l.activation.apply(z);
        }
        for ((o, row), b) in out.iter_mut().zip(w2.chunks_exact(l.n_hidden)).zip(b2) {
            *o = b + dot(row, act);
        }
    }

    /// Accumulates `cotᵀ·∂out/∂θ` into `grad_theta` (indexed like `theta`) and
    /// `cotᵀ·∂out/∂input` into `grad_input`.
    pub fn vjp_acc(
        &self,
        theta: &[f64],
        input: &[f64],
        cot: &[f64],
        grad_theta: &mut [f64],
        grad_input: &mut [f64],
        scratch: &mut Scratch,
    ) {
        let l = &self.layout;
        debug_assert_eq!(input.len(), l.n_in);
        debug_assert_eq!(cot.len(), l.n_out);
        debug_assert_eq!(grad_input.len(), l.n_in);
        let range = self.param_range();
        let p = &theta[range.clone()];
        let (w1, rest) = p.split_at(l.w1_len());
        let (b1, rest) = rest.split_at(l.n_hidden);
        let (w2, _) = rest.split_at(l.n_out * l.n_hidden);

        scratch.ensure(l.n_hidden);
        let Scratch { pre, act } = scratch;
        let pre = &mut pre[..l.n_hidden];
        let act = &mut act[..l.n_hidden];
        for (((z, a), row), b) in pre
            .iter_mut()
            .zip(act.iter_mut())
            .zip(w1.chunks_exact(l.n_in))
            .zip(b1)
        {
            *z = b + dot(row, input);
            *a = l.activation.apply(*z);
        }

        let g = &mut grad_theta[range];
        let (gw1, rest) = g.split_at_mut(l.w1_len());
        let (gb1, rest) = rest.split_at_mut(l.n_hidden);
        let (gw2, gb2) = rest.split_at_mut(l.n_out * l.n_hidden);

        for (gb, c) in gb2.iter_mut().zip(cot) {
            *gb += c;
        }
        for (grow, c) in gw2.chunks_exact_mut(l.n_hidden).zip(cot) {
            if *c == 0.0 {
                continue;
            }
            for (gw, a) in grow.iter_mut().zip(act.iter()) {
                *gw += c * a;
            }
        }
        // Reuse `pre` to hold the hidden-layer cotangent.
        for (i, z) in pre.iter_mut().enumerate() {
            let mut da = 0.0;
            for (k, c) in cot.iter().enumerate() {
                da += c * w2[k * l.n_hidden + i];
            }
            *z = da * l.activation.derivative(*z, act[i]);
        }
        for (gb, d) in gb1.iter_mut().zip(pre.iter()) {
            *gb += d;
        }
        for ((grow, row), d) in gw1
            .chunks_exact_mut(l.n_in)
            .zip(w1.chunks_exact(l.n_in))
            .zip(pre.iter())
        {
            if *d == 0.0 {
                continue;
            }
            for ((gw, x), (gi, w)) in grow
                .iter_mut()
                .zip(input)
                .zip(grad_input.iter_mut().zip(row))
            {
                *gw += d * x;
                *gi += d * w;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Freshly initialized parameter block for one network.
pub fn init_mlp(layout: &MlpLayout, seed: u64) -> Vec<f64> {
    let mut block = vec![0.0; layout.num_params()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mlp::standalone(*layout).init_into(&mut block, &mut rng);
    block
}

pub fn mlp_forward(layout: &MlpLayout, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    check_len("mlp parameters", layout.num_params(), params.len())?;
    check_len("mlp input", layout.n_in, input.len())?;
    let mut out = vec![0.0; layout.n_out];
    Mlp::standalone(*layout).forward(params, input, &mut out, &mut Scratch::default());
    Ok(out)
}

/// Returns `(cotᵀ·∂out/∂params, cotᵀ·∂out/∂input)`.
pub fn mlp_vjp(
    layout: &MlpLayout,
    params: &[f64],
    input: &[f64],
    cotangent: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("mlp parameters", layout.num_params(), params.len())?;
    check_len("mlp input", layout.n_in, input.len())?;
    check_len("mlp cotangent", layout.n_out, cotangent.len())?;
    let mut g_params = vec![0.0; params.len()];
    let mut g_input = vec![0.0; input.len()];
    Mlp::standalone(*layout).vjp_acc(
        params,
        input,
        cotangent,
        &mut g_params,
        &mut g_input,
        &mut Scratch::default(),
    );
    Ok((g_params, g_input))
}
