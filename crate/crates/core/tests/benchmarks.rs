//! Smoke runs of the benchmark pipelines on small synthetic CSV records.

mod common;

use common::bench::*;
use contsysid::data::{load_csv, save_csv, CsvSchema, Dataset};

fn write_record(
    dir: &std::path::Path,
    name: &str,
    n: usize,
    phase: f64,
    f: impl Fn(f64, f64) -> f64,
) -> Dataset {
    let t: Vec<f64> = (0..n).map(|k| 0.1 * k as f64).collect();
    let u: Vec<f64> = t.iter().map(|t| 1.0 + (0.7 * t + phase).sin()).collect();
    let y: Vec<f64> = t.iter().zip(&u).map(|(&t, &u)| f(t, u)).collect();
    let path = dir.join(name);
    save_csv(&Dataset::new(t, u, y, 1, 1).unwrap(), &path).unwrap();
    load_csv(&path, &CsvSchema::default()).unwrap()
}

#[test]
fn cascaded_tanks_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let level = |t: f64, u: f64| 2.0 + 0.5 * u + 0.1 * (0.3 * t).cos();
    let train = write_record(dir.path(), "train.csv", 80, 0.0, level);
    let test = write_record(dir.path(), "test.csv", 80, 1.0, level);
    let (tsem, sci) = cts_runs(&train, &test, Iterations { tsem: 3, sci: 3 }).unwrap();
    for run in [&tsem, &sci] {
        assert!(run.test_rmse[0].is_finite());
        assert!(run.train_r2[0].is_finite());
    }
}

#[test]
fn emps_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let position = |t: f64, _: f64| 0.02 + 0.1 * (0.4 * t).sin();
    let train = write_record(dir.path(), "train.csv", 300, 0.0, position);
    let test = write_record(dir.path(), "test.csv", 300, 0.5, position);
    let (tsem, sci) = emps_runs(&train, &test, Iterations { tsem: 3, sci: 3 }).unwrap();
    for run in [&tsem, &sci] {
        assert!(run.test_r2[0].is_finite());
        assert!(run.train_r2[0].is_finite());
    }
}
