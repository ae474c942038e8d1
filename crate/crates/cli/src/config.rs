//! Run configuration: JSON file, environment overrides, flags and hashing.
//!
//! Precedence, lowest first: config file, `CONTSYSID_*` environment
//! variables, command-line flags. An environment variable names a config
//! key path with `__` between levels, e.g. `CONTSYSID_TRAINING__LR=1e-3`.
//! Values are parsed as JSON and fall back to plain strings.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use contsysid::data::Channel;
use contsysid::data::{CsvSchema, RlcConfig};
use contsysid::models::{ModelConfig, ModelStructure};
use contsysid::train::TrainConfig;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub const ENV_PREFIX: &str = "CONTSYSID_";

/// Where a record comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
    /// Simulated RLC circuit; the noisy record unless `clean` is set.
    Rlc {
        #[serde(default)]
        generator: RlcConfig,
        #[serde(default)]
        clean: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PreprocessStep {
    /// Keep every `factor`-th sample, optionally after a moving average.
    Decimate {
        factor: usize,
        #[serde(default)]
        filtered: bool,
    },
    /// Map a channel (`u1`, `y2`, …) onto `range` using its training range.
    Normalize {
        channel: String,
        #[serde(default = "unit_range")]
        range: [f64; 2],
    },
}

fn unit_range() -> [f64; 2] {
    [-1.0, 1.0]
}

/// Initial state for simulating the evaluation record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    Zeros,
    /// First hidden state of the training report.
    #[default]
    Fitted,
    /// The training hidden-state policy applied to the evaluation record.
    Estimated,
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluation record; the training record when absent.
    #[serde(default)]
    pub dataset: Option<DatasetSource>,
    #[serde(default)]
    pub x0: InitialState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub preprocessing: Vec<PreprocessStep>,
    /// Required by `train` and `eval`.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Required by `train` and `eval`.
    #[serde(default)]
    pub training: Option<TrainConfig>,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Overrides the training seed and the training-record generator seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Values given on the command line.
#[derive(Clone, Debug, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Reads, merges and validates a configuration.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: &FlagOverrides,
    ) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Value::Object(Map::new()),
        };
        apply_env(&mut doc, env)?;
        let root = doc
            .as_object_mut()
            .context("config must be a JSON object")?;
        if let Some(seed) = flags.seed {
            root.insert("seed".into(), seed.into());
        }
        if let Some(workers) = flags.workers {
            root.insert("workers".into(), workers.into());
        }
        if let Some(out) = &flags.out {
            root.insert(
                "output_dir".into(),
                out.to_string_lossy().into_owned().into(),
            );
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).context("invalid configuration")?;
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_seed(&mut self) {
        let Some(seed) = self.seed else { return };
        if let Some(t) = self.training.as_mut() {
            t.seed = seed;
        }
        if let DatasetSource::Rlc { generator, .. } = &mut self.dataset {
            generator.seed = seed;
        }
    }

    /// Checks everything that can be checked without touching the data.
    pub fn validate(&self) -> Result<()> {
        for source in std::iter::once(&self.dataset).chain(self.evaluation.dataset.as_ref()) {
            match source {
                DatasetSource::Csv { path, .. } => {
                    if !path.is_file() {
                        bail!("dataset {} does not exist", path.display());
                    }
                }
                DatasetSource::Rlc { generator, .. } => generator.validate()?,
            }
        }
        for step in &self.preprocessing {
            match step {
                PreprocessStep::Decimate { factor, .. } if *factor == 0 => {
                    bail!("decimation factor must be at least 1")
                }
                PreprocessStep::Normalize { channel, range } => {
                    Channel::parse(channel)?;
                    if !(range[1] > range[0]) {
                        bail!("normalization range for {channel} must be increasing");
                    }
                }
                _ => {}
            }
        }
        if let Some(model) = &self.model {
            ModelStructure::from_config(model)?;
        }
        if self.workers == Some(0) {
            bail!("workers must be at least 1");
        }
        Ok(())
    }

    pub fn model(&self) -> Result<&ModelConfig> {
        self.model.as_ref().context("config has no `model` block")
    }

    pub fn training(&self) -> Result<&TrainConfig> {
        self.training
            .as_ref()
            .context("config has no `training` block")
    }

    /// SHA-256 of the canonical JSON of every field that affects results
    /// (`output_dir` and `workers` are excluded).
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(root) = value.as_object_mut() {
            root.remove("output_dir");
            root.remove("workers");
        }
        let canonical = canonical_json(&value);
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(value: &Value) -> String {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => {
            let body: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", body.join(","))
        }
        other => other.to_string(),
    }
}

/// Applies `CONTSYSID_A__B=v` style overrides to `doc`.
pub fn apply_env(doc: &mut Value, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut vars: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.len() > ENV_PREFIX.len())
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(str::to_lowercase)
            .collect();
        if path.iter().any(String::is_empty) {
            bail!("malformed override variable {key}");
        }
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        let mut node = &mut *doc;
        for (i, part) in path.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .with_context(|| format!("{key}: `{}` is not an object", path[..i].join(".")))?;
            if i + 1 == path.len() {
                obj.insert(part.clone(), value.clone());
                break;
            }
            node = obj
                .entry(part.clone())
                .or_insert_with(|| Value::Object(Map::new()));
        }
    }
    Ok(())
}

/// JSON schema of [`RunConfig`].
pub fn schema() -> Value {
    serde_json::to_value(schemars::schema_for!(RunConfig)).expect("schema serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn rlc_doc() -> Value {
        json!({
            "dataset": {"rlc": {}},
            "model": {"structure": {"variant": "fully_observed", "n_x": 2, "n_u": 1, "hidden_f": 8}},
            "training": {"algorithm": "tsem", "n": 5}
        })
    }

    #[test]
    fn env_overrides_nest_and_parse_json() {
        let mut doc = rlc_doc();
        apply_env(
            &mut doc,
            env(&[
                ("CONTSYSID_TRAINING__LR", "0.01"),
                ("CONTSYSID_TRAINING__ALGORITHM", "sci"),
                ("CONTSYSID_OUTPUT_DIR", "runs/a"),
                ("HOME", "/root"),
            ]),
        )
        .unwrap();
        assert_eq!(doc["training"]["lr"], json!(0.01));
        assert_eq!(doc["training"]["algorithm"], json!("sci"));
        assert_eq!(doc["output_dir"], json!("runs/a"));
    }

    #[test]
    fn flags_beat_env_which_beats_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let mut doc = rlc_doc();
        doc["seed"] = json!(1);
        std::fs::write(&path, doc.to_string()).unwrap();

        let cfg = RunConfig::load(
            Some(&path),
            env(&[("CONTSYSID_SEED", "2")]),
            &FlagOverrides::default(),
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(2));
        assert_eq!(cfg.training().unwrap().seed, 2);

        let flags = FlagOverrides {
            seed: Some(3),
            ..Default::default()
        };
        let cfg = RunConfig::load(Some(&path), env(&[("CONTSYSID_SEED", "2")]), &flags).unwrap();
        assert_eq!(cfg.training().unwrap().seed, 3);
        let DatasetSource::Rlc { generator, .. } = &cfg.dataset else {
            panic!()
        };
        assert_eq!(generator.seed, 3);
    }

    #[test]
    fn unknown_keys_and_missing_files_fail_before_compute() {
        let mut doc = rlc_doc();
        doc["trainig"] = json!({});
        assert!(serde_json::from_value::<RunConfig>(doc).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let doc = json!({"dataset": {"csv": {"path": dir.path().join("missing.csv")}}});
        std::fs::write(&path, doc.to_string()).unwrap();
        let err = RunConfig::load(Some(&path), vec![], &FlagOverrides::default()).unwrap_err();
        assert!(format!("{err:#}").contains("does not exist"));
    }

    #[test]
    fn hash_ignores_key_order_output_dir_and_workers() {
        let a: RunConfig = serde_json::from_value(rlc_doc()).unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        b.workers = Some(4);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let mut c = a.clone();
        c.training.as_mut().unwrap().lr = 0.5;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(
            canonical_json(&json!({"b": 1, "a": [2, {"d": 3, "c": 4}]})),
            r#"{"a":[2,{"c":4,"d":3}],"b":1}"#
        );
    }

    #[test]
    fn schema_lists_the_top_level_blocks() {
        let s = schema();
        let props = s["properties"].as_object().unwrap();
        for key in [
            "dataset",
            "preprocessing",
            "model",
            "training",
            "evaluation",
            "output_dir",
            "seed",
        ] {
            assert!(props.contains_key(key), "{key}");
        }
    }
}
