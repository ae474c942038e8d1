//! Sampled input/output datasets, the nonlinear RLC circuit generator, CSV
//! I/O and preprocessing.

use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::models::Workspace;
use crate::ode::{self, Dynamics, InputInterp, Scheme, SimOptions};

/// One experiment: time stamps (seconds), inputs and outputs, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    t: Vec<f64>,
    u: Vec<f64>,
    y: Vec<f64>,
    n_u: usize,
    n_y: usize,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
}

impl Dataset {
    pub fn new(t: Vec<f64>, u: Vec<f64>, y: Vec<f64>, n_u: usize, n_y: usize) -> Result<Self> {
        if n_u == 0 || n_y == 0 {
            return Err(Error::Config(
                "datasets need at least one input and one output".into(),
            ));
        }
        let n = t.len();
        check_len("input samples", n * n_u, u.len())?;
        check_len("output samples", n * n_y, y.len())?;
        if let Some(i) = t.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::NonMonotoneGrid { index: i + 1 });
        }
        if t.iter().chain(&u).chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::Config("dataset contains non-finite values".into()));
        }
        Ok(Self {
            t,
            u,
            y,
            n_u,
            n_y,
            input_names: (1..=n_u).map(|i| format!("u{i}")).collect(),
            output_names: (1..=n_y).map(|i| format!("y{i}")).collect(),
        })
    }

    pub fn with_names(mut self, inputs: &[&str], outputs: &[&str]) -> Self {
        if inputs.len() == self.n_u {
            self.input_names = inputs.iter().map(|s| s.to_string()).collect();
        }
        if outputs.len() == self.n_y {
            self.output_names = outputs.iter().map(|s| s.to_string()).collect();
        }
        self
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn u_row(&self, k: usize) -> &[f64] {
        &self.u[k * self.n_u..(k + 1) * self.n_u]
    }

    pub fn y_row(&self, k: usize) -> &[f64] {
        &self.y[k * self.n_y..(k + 1) * self.n_y]
    }

    /// Column `c` of the outputs.
    pub fn y_channel(&self, c: usize) -> Vec<f64> {
        self.y.iter().skip(c).step_by(self.n_y).copied().collect()
    }

    pub fn u_channel(&self, c: usize) -> Vec<f64> {
        self.u.iter().skip(c).step_by(self.n_u).copied().collect()
    }

    /// The sampling period if the grid is uniform to 1e-9 relative.
    pub fn uniform_step(&self) -> Option<f64> {
        if self.t.len() < 2 {
            return None;
        }
        let dt = (self.t[self.t.len() - 1] - self.t[0]) / (self.t.len() - 1) as f64;
        self.t
            .windows(2)
            .all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt.abs())
            .then_some(dt)
    }

    pub(crate) fn replace_y(&mut self, y: Vec<f64>) {
        debug_assert_eq!(y.len(), self.y.len());
        self.y = y;
    }

    pub(crate) fn replace_u(&mut self, u: Vec<f64>) {
        debug_assert_eq!(u.len(), self.u.len());
        self.u = u;
    }
}

// ---------------------------------------------------------------------------
// RLC circuit

fn d_r() -> f64 {
    3.0
}
fn d_c() -> f64 {
    270e-9
}
fn d_l0() -> f64 {
    50e-6
}
fn d_n() -> usize {
    4000
}
fn d_dt() -> f64 {
    0.5e-6
}
/// 150·10³ rad/s expressed in Hz.
pub const RLC_DEFAULT_BANDWIDTH_HZ: f64 = 150e3 / (2.0 * PI);

fn d_bw() -> f64 {
    RLC_DEFAULT_BANDWIDTH_HZ
}
fn d_std() -> f64 {
    80.0
}
fn d_noise() -> [f64; 2] {
    [10.0, 1.0]
}
fn d_substeps() -> usize {
    10
}

/// Generator settings for the series RLC circuit with a saturating inductor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RlcConfig {
    /// Resistance (Ω).
    #[serde(default = "d_r")]
    pub r: f64,
    /// Capacitance (F).
    #[serde(default = "d_c")]
    pub c: f64,
    /// Nominal inductance (H).
    #[serde(default = "d_l0")]
    pub l0: f64,
    #[serde(default = "d_n")]
    pub n: usize,
    /// Sampling period (s).
    #[serde(default = "d_dt")]
    pub dt: f64,
    /// Cutoff of the input low-pass filter (Hz).
    #[serde(default = "d_bw")]
    pub bandwidth_hz: f64,
    /// Standard deviation of the input voltage (V).
    #[serde(default = "d_std")]
    pub input_std: f64,
    /// Measurement noise standard deviations for (v_C [V], i_L [A]).
    #[serde(default = "d_noise")]
    pub noise_std: [f64; 2],
    #[serde(default)]
    pub seed: u64,
    /// RK44 steps per sampling interval.
    #[serde(default = "d_substeps")]
    pub substeps: usize,
}

impl Default for RlcConfig {
    fn default() -> Self {
        Self {
            r: d_r(),
            c: d_c(),
            l0: d_l0(),
            n: d_n(),
            dt: d_dt(),
            bandwidth_hz: d_bw(),
            input_std: d_std(),
            noise_std: d_noise(),
            seed: 0,
            substeps: d_substeps(),
        }
    }
}

impl RlcConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("r", self.r),
            ("c", self.c),
            ("l0", self.l0),
            ("dt", self.dt),
            ("bandwidth_hz", self.bandwidth_hz),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "rlc.{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.input_std.is_finite() && self.input_std >= 0.0) {
            return Err(Error::Config("rlc.input_std must be non-negative".into()));
        }
        if self.noise_std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config(
                "rlc.noise_std entries must be non-negative".into(),
            ));
        }
        if self.n < 2 || self.substeps == 0 {
            return Err(Error::Config(
                "rlc.n must be ≥ 2 and rlc.substeps ≥ 1".into(),
            ));
        }
        if self.bandwidth_hz >= 0.5 / self.dt {
            return Err(Error::Config(
                "rlc.bandwidth_hz must be below the Nyquist frequency".into(),
            ));
        }
        Ok(())
    }
}

/// Current-dependent inductance of a ferrite inductor in partial saturation.
pub fn rlc_inductance(i_l: f64, l0: f64) -> f64 {
    l0 * (0.9 * ((-5.0 * (i_l.abs() - 5.0)).atan() / PI + 0.5) + 0.1)
}

/// The true circuit as a parameter-free [`Dynamics`], state `(v_C, i_L)`.
struct RlcCircuit {
    r: f64,
    c: f64,
    l0: f64,
}

impl Dynamics for RlcCircuit {
    fn n_x(&self) -> usize {
        2
    }

    fn n_u(&self) -> usize {
        1
    }

    fn n_params(&self) -> usize {
        0
    }

    fn f_into(&self, _theta: &[f64], x: &[f64], u: &[f64], out: &mut [f64], _ws: &mut Workspace) {
        let (v_c, i_l) = (x[0], x[1]);
        let l = rlc_inductance(i_l, self.l0);
        out[0] = i_l / self.c;
        out[1] = (-v_c - self.r * i_l + u[0]) / l;
    }

    fn vjp_f_acc(
        &self,
        _theta: &[f64],
        _x: &[f64],
        _u: &[f64],
        _cot: &[f64],
        _g_theta: &mut [f64],
        _g_x: &mut [f64],
        _g_u: &mut [f64],
        _ws: &mut Workspace,
    ) {
        unimplemented!("the reference circuit is only simulated, never differentiated")
    }
}

/// Second-order Butterworth low-pass (bilinear transform with prewarping).
fn butterworth_lowpass(x: &[f64], cutoff_hz: f64, fs: f64) -> Vec<f64> {
    let k = (PI * cutoff_hz / fs).tan();
    let norm = 1.0 / (1.0 + SQRT_2 * k + k * k);
    let b0 = k * k * norm;
    let b1 = 2.0 * b0;
    let a1 = 2.0 * (k * k - 1.0) * norm;
    let a2 = (1.0 - SQRT_2 * k + k * k) * norm;
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&xi| {
            let yi = b0 * xi + b1 * x1 + b0 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = xi;
            y2 = y1;
            y1 = yi;
            yi
        })
        .collect()
}

/// Filtered white-noise input voltage: Gaussian noise through the low-pass,
/// shifted to zero mean and rescaled to `input_std`.
fn rlc_input(cfg: &RlcConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Extra leading samples let the filter forget its zero initial state.
    const WARMUP: usize = 256;
    let white: Vec<f64> = (0..cfg.n + WARMUP)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let filtered = butterworth_lowpass(&white, cfg.bandwidth_hz, 1.0 / cfg.dt);
    let v = &filtered[WARMUP..];
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    let gain = if std > 0.0 { cfg.input_std / std } else { 0.0 };
    v.iter().map(|x| (x - mean) * gain).collect()
}

/// Simulates the circuit from rest. Returns `(clean, noisy)` datasets with
/// input `v_in` and outputs `(v_C, i_L)`.
pub fn generate_rlc(cfg: &RlcConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let u = rlc_input(cfg, &mut rng);
    let t: Vec<f64> = (0..cfg.n).map(|k| k as f64 * cfg.dt).collect();
    let circuit = RlcCircuit {
        r: cfg.r,
        c: cfg.c,
        l0: cfg.l0,
    };
    let opts = SimOptions {
        scheme: Scheme::Rk44,
        interp: InputInterp::ZeroOrderHold,
        substeps: cfg.substeps,
    };
    let traj = ode::simulate(&circuit, &[], &[0.0, 0.0], &u, &t, &opts)?;
    let y = traj.states();
    let clean = Dataset::new(t, u, y, 1, 2)?.with_names(&["v_in"], &["v_C", "i_L"]);

    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let mut noisy = clean.clone();
    if cfg.noise_std.iter().any(|&s| s > 0.0) {
        let y_noisy = clean
            .y()
            .chunks_exact(2)
            .flat_map(|row| {
                let e0: f64 = StandardNormal.sample(&mut noise_rng);
                let e1: f64 = StandardNormal.sample(&mut noise_rng);
                [
                    row[0] + cfg.noise_std[0] * e0,
                    row[1] + cfg.noise_std[1] * e1,
                ]
            })
            .collect();
        noisy.replace_y(y_noisy);
    }
    Ok((clean, noisy))
}

/// Signal-to-noise ratio in dB per output channel, using mean-square power.
pub fn snr_db(clean: &Dataset, noisy: &Dataset) -> Result<Vec<f64>> {
    check_len("noisy outputs", clean.y().len(), noisy.y().len())?;
    Ok((0..clean.n_y())
        .map(|c| {
            let s = clean.y_channel(c);
            let n = noisy.y_channel(c);
            let p_sig: f64 = s.iter().map(|v| v * v).sum();
            let p_noise: f64 = s.iter().zip(&n).map(|(a, b)| (a - b).powi(2)).sum();
            10.0 * (p_sig / p_noise).log10()
        })
        .collect())
}

// ---------------------------------------------------------------------------
// CSV

/// Maps CSV columns to dataset channels. Without explicit lists, columns
/// named `u1, u2, …` are inputs and `y1, y2, …` outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    /// Time column; defaults to `t`.
    #[serde(default)]
    pub time: Option<String>,
    /// Build the time grid as `k·sample_time` instead of reading a column.
    #[serde(default)]
    pub sample_time: Option<f64>,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
    /// Channel names assigned to the loaded inputs/outputs.
    #[serde(default)]
    pub input_names: Vec<String>,
    #[serde(default)]
    pub output_names: Vec<String>,
}

fn numbered_columns(headers: &[String], prefix: char) -> Vec<String> {
    let mut cols: Vec<(usize, String)> = headers
        .iter()
        .filter_map(|h| {
            let rest = h.strip_prefix(prefix)?;
            let idx: usize = rest.parse().ok()?;
            Some((idx, h.clone()))
        })
        .collect();
    cols.sort();
    cols.into_iter().map(|(_, h)| h).collect()
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let csv_err = |message: String| Error::Csv {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let index: HashMap<&str, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();
    let lookup = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| csv_err(format!("missing column {name:?}")))
    };

    let inputs = if schema.inputs.is_empty() {
        numbered_columns(&headers, 'u')
    } else {
        schema.inputs.clone()
    };
    let outputs = if schema.outputs.is_empty() {
        numbered_columns(&headers, 'y')
    } else {
        schema.outputs.clone()
    };
    if inputs.is_empty() || outputs.is_empty() {
        return Err(csv_err("no input or output columns found".into()));
    }
    let time_col = match (schema.sample_time, &schema.time) {
        (Some(_), None) => None,
        (_, Some(name)) => Some(lookup(name)?),
        (None, None) => Some(lookup("t")?),
    };
    let in_cols = inputs
        .iter()
        .map(|c| lookup(c))
        .collect::<Result<Vec<_>>>()?;
    let out_cols = outputs
        .iter()
        .map(|c| lookup(c))
        .collect::<Result<Vec<_>>>()?;

    let (mut t, mut u, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(e.to_string()))?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(row_idx as u64 + 2);
        let cell = |col: usize| -> Result<f64> {
            let raw = record.get(col).ok_or_else(|| {
                csv_err(format!(
                    "line {line}: missing cell in column {}",
                    headers[col]
                ))
            })?;
            raw.parse::<f64>().map_err(|_| {
                csv_err(format!(
                    "line {line}: non-numeric value {raw:?} in column {}",
                    headers[col]
                ))
            })
        };
        let tk = match time_col {
            Some(c) => cell(c)?,
            None => row_idx as f64 * schema.sample_time.unwrap_or(1.0),
        };
        if let Some(&prev) = t.last() {
            if tk <= prev {
                return Err(csv_err(format!(
                    "line {line}: time {tk} is not greater than the previous time {prev}"
                )));
            }
        }
        t.push(tk);
        for &c in &in_cols {
            u.push(cell(c)?);
        }
        for &c in &out_cols {
            y.push(cell(c)?);
        }
    }
    let mut ds =
        Dataset::new(t, u, y, in_cols.len(), out_cols.len()).map_err(|e| csv_err(e.to_string()))?;
    if schema.input_names.len() == ds.n_u {
        ds.input_names = schema.input_names.clone();
    }
    if schema.output_names.len() == ds.n_y {
        ds.output_names = schema.output_names.clone();
    }
    if ds.uniform_step().is_none() && ds.len() > 1 {
        log::warn!("{}: time grid is not uniform", path.display());
    }
    Ok(ds)
}

/// Writes `t,u1..,y1..` with one row per sample.
pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    save_csv_with_comments(dataset, path, &[])
}

/// Like [`save_csv`], preceded by `# `-prefixed comment lines.
pub fn save_csv_with_comments(
    dataset: &Dataset,
    path: impl AsRef<Path>,
    comments: &[String],
) -> Result<()> {
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=dataset.n_u).map(|i| format!("u{i}")))
        .chain((1..=dataset.n_y).map(|i| format!("y{i}")))
        .collect();
    let rows = (0..dataset.len()).map(|k| {
        std::iter::once(dataset.t[k])
            .chain(dataset.u_row(k).iter().copied())
            .chain(dataset.y_row(k).iter().copied())
            .collect::<Vec<f64>>()
    });
    write_table(path.as_ref(), comments, &header, rows)
}

/// Writes a numeric table with optional comment lines.
pub fn write_table<I>(path: &Path, comments: &[String], header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    use std::io::Write;
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut out = std::io::BufWriter::new(file);
    for c in comments {
        writeln!(out, "# {c}").map_err(io_err)?;
    }
    let mut writer = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    writer.write_record(header).map_err(csv_err)?;
    for row in rows {
        // `{}` on f64 prints the shortest representation that round-trips.
        writer
            .write_record(row.iter().map(|v| v.to_string()))
            .map_err(csv_err)?;
    }
    writer.flush().map_err(io_err)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Keeps every `factor`-th sample starting at index 0.
pub fn decimate(dataset: &Dataset, factor: usize) -> Result<Dataset> {
    if factor == 0 {
        return Err(Error::Config("decimation factor must be at least 1".into()));
    }
    let keep: Vec<usize> = (0..dataset.len()).step_by(factor).collect();
    let pick = |v: &[f64], width: usize| -> Vec<f64> {
        keep.iter()
            .flat_map(|&k| v[k * width..(k + 1) * width].iter().copied())
            .collect()
    };
    let mut out = Dataset::new(
        keep.iter().map(|&k| dataset.t[k]).collect(),
        pick(&dataset.u, dataset.n_u),
        pick(&dataset.y, dataset.n_y),
        dataset.n_u,
        dataset.n_y,
    )?;
    out.input_names = dataset.input_names.clone();
    out.output_names = dataset.output_names.clone();
    Ok(out)
}

/// Decimation preceded by a causal moving average over `factor` samples.
pub fn decimate_filtered(dataset: &Dataset, factor: usize) -> Result<Dataset> {
    if factor == 0 {
        return Err(Error::Config("decimation factor must be at least 1".into()));
    }
    let smooth = |v: &[f64], width: usize| -> Vec<f64> {
        let n = v.len() / width;
        let mut out = vec![0.0; v.len()];
        for k in 0..n {
            let lo = k.saturating_sub(factor - 1);
            for c in 0..width {
                let s: f64 = (lo..=k).map(|j| v[j * width + c]).sum();
                out[k * width + c] = s / (k - lo + 1) as f64;
            }
        }
        out
    };
    let mut filtered = dataset.clone();
    filtered.replace_u(smooth(&dataset.u, dataset.n_u));
    filtered.replace_y(smooth(&dataset.y, dataset.n_y));
    decimate(&filtered, factor)
}

/// A dataset channel reference, written `u<k>` or `y<k>` (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Input(usize),
    Output(usize),
}

impl Channel {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("channel {s:?} must look like u1 or y2"));
        let (kind, idx) = s.split_at(1.min(s.len()));
        let idx: usize = idx.parse().map_err(|_| bad())?;
        if idx == 0 {
            return Err(bad());
        }
        match kind {
            "u" => Ok(Channel::Input(idx - 1)),
            "y" => Ok(Channel::Output(idx - 1)),
            _ => Err(bad()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Channel::Input(i) => format!("u{}", i + 1),
            Channel::Output(i) => format!("y{}", i + 1),
        }
    }
}

/// `v ↦ scale·v + offset` applied to one channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub channel: String,
    pub scale: f64,
    pub offset: f64,
}

impl AffineTransform {
    pub fn forward(&self, v: f64) -> f64 {
        self.scale * v + self.offset
    }

    pub fn inverse(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }

    fn map_channel(&self, dataset: &Dataset, f: impl Fn(f64) -> f64) -> Result<Dataset> {
        let mut out = dataset.clone();
        match Channel::parse(&self.channel)? {
            Channel::Input(c) if c < dataset.n_u => {
                let mut u = dataset.u.clone();
                u.iter_mut()
                    .skip(c)
                    .step_by(dataset.n_u)
                    .for_each(|v| *v = f(*v));
                out.replace_u(u);
            }
            Channel::Output(c) if c < dataset.n_y => {
                let mut y = dataset.y.clone();
                y.iter_mut()
                    .skip(c)
                    .step_by(dataset.n_y)
                    .for_each(|v| *v = f(*v));
                out.replace_y(y);
            }
            _ => {
                return Err(Error::Config(format!(
                    "dataset has no channel {}",
                    self.channel
                )))
            }
        }
        Ok(out)
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        self.map_channel(dataset, |v| self.forward(v))
    }

    pub fn invert(&self, dataset: &Dataset) -> Result<Dataset> {
        self.map_channel(dataset, |v| self.inverse(v))
    }
}

/// Maps `channel` affinely onto `target = (lo, hi)` using its range in
/// `dataset`; the returned transform can be replayed on other data.
pub fn normalize_channel(
    dataset: &Dataset,
    channel: Channel,
    target: (f64, f64),
) -> Result<(Dataset, AffineTransform)> {
    let values = match channel {
        Channel::Input(c) if c < dataset.n_u => dataset.u_channel(c),
        Channel::Output(c) if c < dataset.n_y => dataset.y_channel(c),
        _ => {
            return Err(Error::Config(format!(
                "dataset has no channel {}",
                channel.label()
            )))
        }
    };
    let (lo, hi) = target;
    if !(hi > lo) {
        return Err(Error::Config(
            "normalization range must be increasing".into(),
        ));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(Error::ConstantChannel(channel.label()));
    }
    let scale = (hi - lo) / (max - min);
    let transform = AffineTransform {
        channel: channel.label(),
        scale,
        offset: lo - min * scale,
    };
    Ok((transform.apply(dataset)?, transform))
}

/// Forward-difference derivative estimate; the last entry repeats the one
/// before it.
pub fn finite_diff_estimate(y: &[f64], t: &[f64]) -> Result<Vec<f64>> {
    check_len("time stamps", y.len(), t.len())?;
    if y.len() < 2 {
        return Err(Error::Config(
            "finite differences need at least two samples".into(),
        ));
    }
    let mut v: Vec<f64> = y
        .windows(2)
        .zip(t.windows(2))
        .map(|(yw, tw)| (yw[1] - yw[0]) / (tw[1] - tw[0]))
        .collect();
    v.push(v[v.len() - 1]);
    Ok(v)
}
