//! Subcommand implementations. Every artifact records the config hash.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use contsysid::data::{
    decimate, decimate_filtered, generate_rlc, load_csv, normalize_channel, save_csv_with_comments,
    write_table, AffineTransform, Channel, Dataset,
};
use contsysid::metrics::MetricReport;
use contsysid::models::{ModelConfig, ModelStructure};
use contsysid::nn::BlockInfo;
use contsysid::train::{fit, init_hidden, simulate_outputs, FitReport};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, InitialState, PreprocessStep, RunConfig};

pub const REPORT_FILE: &str = "report.json";
pub const PARAMS_FILE: &str = "params.csv";
pub const LAYOUT_FILE: &str = "params.layout.json";
pub const HIDDEN_FILE: &str = "hidden.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const EVAL_TRAJECTORY_FILE: &str = "eval_trajectory.csv";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.json";
pub const EXPORT_FILE: &str = "export.csv";

fn provenance(hash: &str) -> Vec<String> {
    vec![format!("config_sha256: {hash}")]
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn output_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    Ok(&cfg.output_dir)
}

pub fn load_source(source: &DatasetSource) -> Result<Dataset> {
    Ok(match source {
        DatasetSource::Csv { path, schema } => load_csv(path, schema)?,
        DatasetSource::Rlc { generator, clean } => {
            let (c, noisy) = generate_rlc(generator)?;
            if *clean {
                c
            } else {
                noisy
            }
        }
    })
}

/// Runs the preprocessing steps, fitting normalizations on `dataset`.
pub fn preprocess(
    dataset: &Dataset,
    steps: &[PreprocessStep],
) -> Result<(Dataset, Vec<AffineTransform>)> {
    let mut ds = dataset.clone();
    let mut transforms = Vec::new();
    for step in steps {
        ds = match step {
            PreprocessStep::Decimate {
                factor,
                filtered: false,
            } => decimate(&ds, *factor)?,
            PreprocessStep::Decimate {
                factor,
                filtered: true,
            } => decimate_filtered(&ds, *factor)?,
            PreprocessStep::Normalize { channel, range } => {
                let (out, tr) =
                    normalize_channel(&ds, Channel::parse(channel)?, (range[0], range[1]))?;
                transforms.push(tr);
                out
            }
        };
    }
    Ok((ds, transforms))
}

/// Replays the steps on another record with previously fitted transforms.
pub fn replay(
    dataset: &Dataset,
    steps: &[PreprocessStep],
    transforms: &[AffineTransform],
) -> Result<Dataset> {
    let mut ds = dataset.clone();
    let mut fitted = transforms.iter();
    for step in steps {
        ds = match step {
            PreprocessStep::Decimate {
                factor,
                filtered: false,
            } => decimate(&ds, *factor)?,
            PreprocessStep::Decimate {
                factor,
                filtered: true,
            } => decimate_filtered(&ds, *factor)?,
            PreprocessStep::Normalize { .. } => fitted
                .next()
                .context("missing fitted normalization")?
                .apply(&ds)?,
        };
    }
    Ok(ds)
}

/// Undoes the normalizations, returning the record in original units.
fn to_raw(dataset: &Dataset, transforms: &[AffineTransform]) -> Result<Dataset> {
    let mut ds = dataset.clone();
    for tr in transforms.iter().rev() {
        ds = tr.invert(&ds)?;
    }
    Ok(ds)
}

/// Measured and simulated outputs in original units, row-major `N × n_y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub time: Vec<f64>,
    pub channels: Vec<String>,
    pub measured: Vec<f64>,
    pub simulated: Vec<f64>,
}

impl Trajectory {
    fn build(
        dataset: &Dataset,
        y_sim: Vec<f64>,
        transforms: &[AffineTransform],
    ) -> Result<(Self, Dataset)> {
        let raw = to_raw(dataset, transforms)?;
        let sim = Dataset::new(
            dataset.t().to_vec(),
            dataset.u().to_vec(),
            y_sim,
            dataset.n_u(),
            dataset.n_y(),
        )?;
        let sim = to_raw(&sim, transforms)?;
        let traj = Self {
            time: raw.t().to_vec(),
            channels: raw.output_names.clone(),
            measured: raw.y().to_vec(),
            simulated: sim.y().to_vec(),
        };
        Ok((traj, raw))
    }

    fn metrics(&self) -> Result<MetricReport> {
        Ok(MetricReport::compute(
            &self.channels,
            &self.measured,
            &self.simulated,
        )?)
    }

    /// Writes `t, u…, y…, sim_y…`; loadable with the default CSV schema.
    fn write_csv(&self, raw: &Dataset, path: &Path, hash: &str) -> Result<()> {
        let n_y = raw.n_y();
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=raw.n_u()).map(|i| format!("u{i}")))
            .chain((1..=n_y).map(|i| format!("y{i}")))
            .chain((1..=n_y).map(|i| format!("sim_y{i}")))
            .collect();
        let mut comments = provenance(hash);
        comments.push(format!("outputs: {}", self.channels.join(", ")));
        let rows = (0..raw.len()).map(|k| {
            std::iter::once(raw.t()[k])
                .chain(raw.u_row(k).iter().copied())
                .chain(raw.y_row(k).iter().copied())
                .chain(self.simulated[k * n_y..(k + 1) * n_y].iter().copied())
                .collect()
        });
        Ok(write_table(path, &comments, &header, rows)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_sha256: String,
    pub config: RunConfig,
    pub transforms: Vec<AffineTransform>,
    /// Training-record metrics in original units.
    pub metrics: MetricReport,
    pub fit: FitReport,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsLayout {
    pub config_sha256: String,
    pub model: ModelConfig,
    pub n_params: usize,
    pub blocks: Vec<BlockInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSidecar {
    pub config_sha256: String,
    pub seed: u64,
    pub generator: contsysid::data::RlcConfig,
    pub clean: PathBuf,
    pub noisy: PathBuf,
    pub snr_db: Vec<f64>,
}

/// Writes the clean and noisy RLC records plus a JSON sidecar.
pub fn generate(cfg: &RunConfig) -> Result<GenerateSidecar> {
    let DatasetSource::Rlc { generator, .. } = &cfg.dataset else {
        bail!("`generate` needs an `rlc` dataset block");
    };
    let dir = output_dir(cfg)?;
    let hash = cfg.hash();
    let (clean, noisy) = generate_rlc(generator)?;
    let mut comments = provenance(&hash);
    comments.push(format!("seed: {}", generator.seed));
    comments.push(format!(
        "channels: {} | {}",
        clean.input_names.join(", "),
        clean.output_names.join(", ")
    ));
    let sidecar = GenerateSidecar {
        config_sha256: hash,
        seed: generator.seed,
        generator: generator.clone(),
        clean: dir.join("clean.csv"),
        noisy: dir.join("noisy.csv"),
        snr_db: contsysid::data::snr_db(&clean, &noisy)?,
    };
    save_csv_with_comments(&clean, &sidecar.clean, &comments)?;
    save_csv_with_comments(&noisy, &sidecar.noisy, &comments)?;
    write_json(&dir.join("generate.json"), &sidecar)?;
    Ok(sidecar)
}

fn write_params(path: &Path, theta: &[f64], hash: &str) -> Result<()> {
    let header = ["index".to_string(), "value".to_string()];
    let rows = theta.iter().enumerate().map(|(i, &v)| vec![i as f64, v]);
    Ok(write_table(path, &provenance(hash), &header, rows)?)
}

/// Reads a parameter file written by `train`.
pub fn read_params(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        let index: usize = record
            .get(0)
            .unwrap_or_default()
            .parse()
            .with_context(|| format!("row {}", i + 1))?;
        if index != i {
            bail!("{}: expected index {i}, found {index}", path.display());
        }
        values.push(
            record
                .get(1)
                .unwrap_or_default()
                .parse()
                .with_context(|| format!("row {}", i + 1))?,
        );
    }
    Ok(values)
}

fn prepare_training(cfg: &RunConfig) -> Result<(Dataset, Vec<AffineTransform>)> {
    let raw = load_source(&cfg.dataset)?;
    preprocess(&raw, &cfg.preprocessing)
}

/// Fits the configured model and writes the report and parameter files.
pub fn train(cfg: &RunConfig) -> Result<RunReport> {
    let model = cfg.model()?;
    let tc = cfg.training()?;
    let st = ModelStructure::from_config(model)?;
    let (ds, transforms) = prepare_training(cfg)?;
    tc.validate(ds.len())?;
    let dir = output_dir(cfg)?;
    let hash = cfg.hash();

    log::info!(
        "fitting {} samples with {:?}, n = {}",
        ds.len(),
        tc.algorithm,
        tc.n
    );
    let report = fit(tc, &ds, &st).context("training failed")?;
    let y_sim = simulate_outputs(&st, &report.theta, report.x0(), &ds, &tc.eval_options())
        .context("simulating the fitted model")?;
    let (trajectory, raw) = Trajectory::build(&ds, y_sim, &transforms)?;
    let metrics = trajectory.metrics()?;

    write_params(&dir.join(PARAMS_FILE), &report.theta, &hash)?;
    write_json(
        &dir.join(LAYOUT_FILE),
        &ParamsLayout {
            config_sha256: hash.clone(),
            model: model.clone(),
            n_params: st.n_params(),
            blocks: st.layout().blocks().to_vec(),
        },
    )?;
    let n_x = st.n_x();
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=n_x).map(|i| format!("x{i}")))
        .collect();
    let rows = (0..ds.len()).map(|k| {
        std::iter::once(ds.t()[k])
            .chain(report.hidden.row(k).iter().copied())
            .collect()
    });
    write_table(&dir.join(HIDDEN_FILE), &provenance(&hash), &header, rows)?;
    trajectory.write_csv(&raw, &dir.join(TRAJECTORY_FILE), &hash)?;

    let run = RunReport {
        config_sha256: hash,
        config: cfg.clone(),
        transforms,
        metrics,
        fit: report,
        trajectory,
    };
    write_json(&dir.join(REPORT_FILE), &run)?;
    Ok(run)
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    read_json(path)
}

#[derive(Clone, Debug, Default)]
pub struct EvalInputs {
    pub params: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_sha256: String,
    pub dataset: String,
    pub x0: Vec<f64>,
    pub metrics: MetricReport,
}

/// Simulates saved parameters on a record and scores the result.
pub fn eval(cfg: &RunConfig, inputs: &EvalInputs) -> Result<EvalReport> {
    let model = cfg.model()?;
    let tc = cfg.training()?;
    let st = ModelStructure::from_config(model)?;
    let dir = output_dir(cfg)?;
    let params_path = inputs
        .params
        .clone()
        .unwrap_or_else(|| dir.join(PARAMS_FILE));
    let theta = read_params(&params_path)?;
    if theta.len() != st.n_params() {
        bail!(
            "parameter layout mismatch: {} holds {} values, the model has {}",
            params_path.display(),
            theta.len(),
            st.n_params()
        );
    }
    let layout_path = params_path.with_file_name(LAYOUT_FILE);
    if layout_path.is_file() {
        let saved: ParamsLayout = read_json(&layout_path)?;
        if saved.blocks != st.layout().blocks() {
            bail!(
                "parameter layout mismatch: {} describes other blocks",
                layout_path.display()
            );
        }
    }

    let (_, transforms) = prepare_training(cfg)?;
    let (source, label) = match (&inputs.dataset, &cfg.evaluation.dataset) {
        (Some(path), _) => {
            let schema = match &cfg.dataset {
                DatasetSource::Csv { schema, .. } => schema.clone(),
                DatasetSource::Rlc { .. } => Default::default(),
            };
            let label = path.display().to_string();
            (
                DatasetSource::Csv {
                    path: path.clone(),
                    schema,
                },
                label,
            )
        }
        (None, Some(src)) => (src.clone(), "evaluation".to_string()),
        (None, None) => (cfg.dataset.clone(), "training".to_string()),
    };
    let ds = replay(&load_source(&source)?, &cfg.preprocessing, &transforms)?;

    let x0 = match &cfg.evaluation.x0 {
        InitialState::Zeros => vec![0.0; st.n_x()],
        InitialState::Fitted => {
            let path = inputs
                .report
                .clone()
                .unwrap_or_else(|| dir.join(REPORT_FILE));
            load_report(&path)
                .context("the `fitted` initial state needs the training report")?
                .fit
                .x0()
                .to_vec()
        }
        InitialState::Estimated => init_hidden(&st, &ds, tc.hidden_init)?.row(0).to_vec(),
        InitialState::Explicit(v) => v.clone(),
    };
    if x0.len() != st.n_x() {
        bail!(
            "initial state has {} entries, the model has {} states",
            x0.len(),
            st.n_x()
        );
    }

    let y_sim = simulate_outputs(&st, &theta, &x0, &ds, &tc.eval_options())?;
    let (trajectory, raw) = Trajectory::build(&ds, y_sim, &transforms)?;
    let hash = cfg.hash();
    trajectory.write_csv(&raw, &dir.join(EVAL_TRAJECTORY_FILE), &hash)?;
    let report = EvalReport {
        config_sha256: hash,
        dataset: label,
        x0,
        metrics: trajectory.metrics()?,
    };
    write_json(&dir.join(EVAL_METRICS_FILE), &report)?;
    Ok(report)
}

/// One row of the long-format export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportRow {
    pub series: String,
    pub time: f64,
    pub value: f64,
}

/// Flattens loss traces (time = iteration) and the measured/simulated
/// training outputs into `series,time,value` rows.
pub fn export_rows(report: &RunReport) -> Vec<ExportRow> {
    let mut rows = Vec::new();
    for (name, trace) in [
        ("loss/j_tot", &report.fit.j_tot),
        ("loss/j_fit", &report.fit.j_fit),
        ("loss/j_reg", &report.fit.j_reg),
    ] {
        rows.extend(trace.iter().enumerate().map(|(k, &value)| ExportRow {
            series: name.to_string(),
            time: k as f64,
            value,
        }));
    }
    let tr = &report.trajectory;
    let n_y = tr.channels.len();
    for (kind, data) in [("measured", &tr.measured), ("simulated", &tr.simulated)] {
        for (c, name) in tr.channels.iter().enumerate() {
            rows.extend(tr.time.iter().enumerate().map(|(k, &time)| ExportRow {
                series: format!("{kind}/{name}"),
                time,
                value: data[k * n_y + c],
            }));
        }
    }
    rows
}

pub fn export(report_path: &Path, out: &Path) -> Result<PathBuf> {
    let report = load_report(report_path)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(EXPORT_FILE);
    let mut text = format!("# {}\n", provenance(&report.config_sha256)[0]);
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in export_rows(&report) {
        writer.serialize(row)?;
    }
    text.push_str(std::str::from_utf8(&writer.into_inner()?)?);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn read_export(path: &Path) -> Result<Vec<ExportRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    reader
        .deserialize()
        .map(|r| r.with_context(|| format!("reading {}", path.display())))
        .collect()
}
