//! File-backed pipeline stages shared by the CLI and the test suites.

use std::fs;
use std::path::{Path as FsPath, PathBuf};

use anyhow::{Context, Result};
use quee_core::dataset::{generate_synthetic, SplitDataset};
use quee_core::harness::{prepare_path_set, sweep_all, train_models, OperatingPoint, PipelineConfig};
use quee_core::path_space::PathSet;

use crate::config::ExperimentConfig;
use crate::model_file::ModelBundle;
use crate::{output, records};

/// Runs `f` and labels any failure with the stage name.
pub fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().with_context(|| format!("stage `{name}` failed"))
}

/// Topology-derived inputs plus the dataset.
pub struct Inputs {
    pub pipeline: PipelineConfig,
    pub path_set: PathSet,
    pub dataset: SplitDataset,
}

/// Config to pipeline settings and active paths, without any data.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(PipelineConfig, PathSet)> {
    stage("config", || {
        let pipeline = cfg.pipeline()?;
        let path_set = prepare_path_set(&pipeline.topology, pipeline.path_cap, cfg.path_seed())?;
        Ok((pipeline, path_set))
    })
}

/// Loads `records` when given (or configured), otherwise generates the
/// synthetic dataset.
pub fn load_inputs(cfg: &ExperimentConfig, records: Option<&FsPath>) -> Result<Inputs> {
    let (pipeline, path_set) = prepare(cfg)?;
    let source = records.map(FsPath::to_path_buf).or_else(|| cfg.data.records.clone());
    let dataset = match source {
        Some(path) => stage("load", || records::load_dataset(&path, &pipeline.topology, &path_set))?,
        None => stage("gen", || {
            Ok(generate_synthetic(&cfg.data.synthetic(cfg.seed), &pipeline.topology, &path_set)?)
        })?,
    };
    Ok(Inputs {
        pipeline,
        path_set,
        dataset,
    })
}

/// Files written by [`run`].
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub records: PathBuf,
    pub model: PathBuf,
    pub curves: PathBuf,
    pub plot: PathBuf,
    pub points: Vec<OperatingPoint>,
}

/// gen, cluster, train and sweep, writing every artifact under `out_dir`.
pub fn run(cfg: &ExperimentConfig, out_dir: &FsPath) -> Result<RunOutputs> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let inputs = load_inputs(cfg, None)?;
    let records = out_dir.join("records.ndjson");
    stage("gen", || records::save_dataset(&inputs.dataset, &inputs.path_set, &records))?;
    let models = stage("train", || Ok(train_models(&inputs.dataset, &inputs.path_set, &inputs.pipeline)?))?;
    let bundle = ModelBundle {
        path_set: inputs.path_set.clone(),
        models,
    };
    let model = out_dir.join("model.json");
    bundle.save(&inputs.pipeline.topology, &model)?;
    let points = stage("sweep", || {
        Ok(sweep_all(&inputs.dataset, &bundle.path_set, &bundle.models, &inputs.pipeline)?)
    })?;
    let curves = out_dir.join("curves.csv");
    write_file(&curves, |f| output::write_curves(&points, f))?;
    let plot = out_dir.join("curves.gp");
    let script = output::plot_script("curves.csv", &["quee", "oracle", "threshold-exit", "fixed-path"]);
    fs::write(&plot, script).with_context(|| format!("writing {}", plot.display()))?;
    Ok(RunOutputs {
        records,
        model,
        curves,
        plot,
        points,
    })
}

pub fn write_file(path: &FsPath, f: impl FnOnce(fs::File) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f(file).with_context(|| format!("writing {}", path.display()))
}
