//! Command-line interface.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use quee_core::harness::{
    degradation_study, ece_study, fit_discretizer, route_all, summarize, sweep_all, train_gates,
    train_next_best_step, training_rows, OperatingPoint, SweepContext, TrainedModels,
};
use quee_core::path_space::Path;
use quee_core::predictor::GateModels;
use quee_core::router::{NextBestStepModels, Router, RoutingPolicy};

use crate::config::ExperimentConfig;
use crate::model_file::ModelBundle;
use crate::output;
use crate::pipeline::{self, stage, write_file, Inputs};
use crate::records;

#[derive(Debug, Parser)]
#[command(name = "quee", version, about = "Budgeted routing over quantization and early-exit paths")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and write it as a record file.
    Gen(Common),
    /// Fit per-path clusters; writes a model file without gate predictors.
    Cluster(Common),
    /// Fit clusters (or reuse them from --model) and train the gate predictors.
    Train(Common),
    /// Route the test split under one policy and write decision traces.
    Route(Common),
    /// Route the test split under one policy and report its operating point.
    Eval(Common),
    /// Sweep every policy (or only --mode) and write the curve table.
    Sweep(Common),
    /// Calibration error of the clustered targets for each K.
    EceStudy(Common),
    /// Retrain on noise-perturbed targets and report RMSE and curves.
    Degrade(Common),
    /// gen, cluster, train and sweep in one go.
    Run(Common),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Quee,
    NextBestStep,
    Oracle,
    ThresholdExit,
    FixedPath,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Record file to use instead of the configured source.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model file produced by `cluster` or `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// One value, or a comma-separated sweep list.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Vec<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Cluster count, or a comma-separated list for `ece-study`.
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long)]
    pub path_cap: Option<usize>,
    /// One value, or a comma-separated sweep list.
    #[arg(long, value_delimiter = ',')]
    pub threshold: Vec<f64>,
    /// Path key for `fixed-path` mode, e.g. 8-4-4.
    #[arg(long)]
    pub path: Option<String>,
    /// Noise levels for `degrade`, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub noise: Vec<f64>,
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => stage("config", || ExperimentConfig::load(p))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(c) = self.path_cap {
            cfg.topology.path_cap = c;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if !self.lambda.is_empty() {
            cfg.sweep.lambdas = self.lambda.clone();
        }
        if !self.threshold.is_empty() {
            cfg.sweep.thresholds = self.threshold.clone();
        }
        match self.k.as_slice() {
            [] => {}
            [k] => {
                cfg.model.k = *k;
                cfg.studies.ece_ks = vec![*k];
            }
            ks => cfg.studies.ece_ks = ks.to_vec(),
        }
        if !self.noise.is_empty() {
            cfg.studies.noise_levels = self.noise.clone();
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        cfg.out.clone().unwrap_or_else(|| PathBuf::from("quee-out"))
    }

    /// `--out` when set, else `<output dir>/<name>`.
    fn out_file(&self, cfg: &ExperimentConfig, name: &str) -> PathBuf {
        match &self.out {
            Some(p) if p.extension().is_some() => p.clone(),
            _ => self.out_dir(cfg).join(name),
        }
    }

    fn single(values: &[f64], what: &str) -> Result<Option<f64>> {
        match values {
            [] => Ok(None),
            [v] => Ok(Some(*v)),
            _ => bail!("give a single --{what} for this command"),
        }
    }

    fn policy(&self, cfg: &ExperimentConfig) -> Result<RoutingPolicy> {
        let first_gate = cfg.sweep.first_gate.into();
        let lambda = || Self::single(&self.lambda, "lambda")?.context("--lambda is required for this mode");
        Ok(match self.mode.unwrap_or(Mode::Quee) {
            Mode::Quee => RoutingPolicy::Quee {
                lambda: lambda()?,
                first_gate,
            },
            Mode::NextBestStep => RoutingPolicy::NextBestStep { first_gate },
            Mode::Oracle => RoutingPolicy::Oracle { lambda: lambda()? },
            Mode::ThresholdExit => RoutingPolicy::Threshold {
                threshold: Self::single(&self.threshold, "threshold")?.context("--threshold is required for threshold-exit")?,
            },
            Mode::FixedPath => RoutingPolicy::FixedPath {
                path: self
                    .path
                    .as_deref()
                    .context("--path is required for fixed-path")?
                    .parse::<Path>()?,
            },
        })
    }

    fn bundle(&self, inputs: &Inputs) -> Result<ModelBundle> {
        let path = self.model.as_ref().context("--model is required for this command")?;
        let bundle = stage("model", || ModelBundle::load(path, &inputs.pipeline.topology))?;
        if bundle.path_set != inputs.path_set {
            bail!(
                "model file {} was built for a different active path set ({} paths, current {})",
                path.display(),
                bundle.path_set.len(),
                inputs.path_set.len()
            );
        }
        Ok(bundle)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(c) => gen(&c),
        Command::Cluster(c) => cluster(&c),
        Command::Train(c) => train(&c),
        Command::Route(c) => route(&c, true),
        Command::Eval(c) => route(&c, false),
        Command::Sweep(c) => sweep(&c),
        Command::EceStudy(c) => ece(&c),
        Command::Degrade(c) => degrade(&c),
        Command::Run(c) => {
            let cfg = c.experiment()?;
            let dir = c.out_dir(&cfg);
            let out = pipeline::run(&cfg, &dir)?;
            println!("wrote {}, {}, {}", out.records.display(), out.model.display(), out.curves.display());
            Ok(())
        }
    }
}

fn gen(c: &Common) -> Result<()> {
    let cfg = c.experiment()?;
    let inputs = pipeline::load_inputs(&cfg, c.data.as_deref())?;
    let out = c.out_file(&cfg, "records.ndjson");
    stage("gen", || write_file(&out, |f| records::write_dataset(&inputs.dataset, &inputs.path_set, f)))?;
    println!("wrote {} records to {}", inputs.dataset.len(), out.display());
    Ok(())
}

fn cluster(c: &Common) -> Result<()> {
    let cfg = c.experiment()?;
    let inputs = pipeline::load_inputs(&cfg, c.data.as_deref())?;
    let discretizer = stage("cluster", || {
        Ok(fit_discretizer(&inputs.dataset, &inputs.path_set, &inputs.pipeline, cfg.model.k)?)
    })?;
    let bundle = ModelBundle {
        path_set: inputs.path_set.clone(),
        models: TrainedModels {
            discretizer,
            gates: GateModels::default(),
        },
    };
    let out = c.out_file(&cfg, "clusters.json");
    write_file(&out, |f| bundle.write(&inputs.pipeline.topology, f))?;
    println!("wrote {} cluster models (K={}) to {}", inputs.path_set.len(), cfg.model.k, out.display());
    Ok(())
}

fn train(c: &Common) -> Result<()> {
    let cfg = c.experiment()?;
    let inputs = pipeline::load_inputs(&cfg, c.data.as_deref())?;
    let discretizer = match &c.model {
        Some(_) => c.bundle(&inputs)?.models.discretizer,
        None => stage("cluster", || {
            Ok(fit_discretizer(&inputs.dataset, &inputs.path_set, &inputs.pipeline, cfg.model.k)?)
        })?,
    };
    let gates = stage("train", || {
        let (rows, holdout) = training_rows(&inputs.dataset, &inputs.path_set, &discretizer, &inputs.pipeline)?;
        Ok(train_gates(&rows, &holdout, &inputs.pipeline)?)
    })?;
    let bundle = ModelBundle {
        path_set: inputs.path_set.clone(),
        models: TrainedModels { discretizer, gates },
    };
    let out = c.out_file(&cfg, "model.json");
    write_file(&out, |f| bundle.write(&inputs.pipeline.topology, f))?;
    println!("wrote model with {} gate predictors to {}", bundle.models.gates.gates.len(), out.display());
    Ok(())
}

fn print_point(p: &OperatingPoint) {
    println!(
        "{} {}: accuracy {:.4} +/- {:.4}, cost {:.4} +/- {:.4}, {:.2} evaluations/sample",
        p.mode, p.label, p.accuracy, p.accuracy_ci, p.cost, p.cost_ci, p.evaluations
    );
}

fn route(c: &Common, write_traces: bool) -> Result<()> {
    let cfg = c.experiment()?;
    let policy = stage("config", || c.policy(&cfg))?;
    let inputs = pipeline::load_inputs(&cfg, c.data.as_deref())?;
    let needs_model = matches!(policy, RoutingPolicy::Quee { .. } | RoutingPolicy::NextBestStep { .. });
    let bundle = if needs_model { Some(c.bundle(&inputs)?) } else { None };
    let p = &inputs.pipeline;
    let nbs = match (&policy, &bundle) {
        (RoutingPolicy::NextBestStep { .. }, Some(b)) => {
            let lambda = Common::single(&c.lambda, "lambda")?.context("--lambda is required for next-best-step")?;
            Some(stage("train", || {
                Ok(train_next_best_step(&inputs.dataset, &inputs.path_set, &b.models.discretizer, p, lambda)?)
            })?)
        }
        _ => None,
    };
    let router = Router {
        estimator: bundle.as_ref().map(|b| &b.models.gates as _),
        next_best_step: nbs.as_ref(),
    };
    let traces = stage("route", || Ok(route_all(&inputs.dataset.test, &router, &policy, &inputs.path_set, &p.topology)?))?;
    let (label, parameter) = match &policy {
        RoutingPolicy::Quee { lambda, .. } | RoutingPolicy::Oracle { lambda } => (lambda.to_string(), *lambda),
        RoutingPolicy::NextBestStep { .. } => {
            let l = nbs.as_ref().map_or(0.0, |m| m.lambda);
            (l.to_string(), l)
        }
        RoutingPolicy::Threshold { threshold } => (threshold.to_string(), *threshold),
        RoutingPolicy::FixedPath { path } => (path.key(), p.topology.path_cost(path)),
    };
    let point = stage("eval", || {
        Ok(summarize(policy.mode_name(), label, parameter, &traces, &p.topology, p.bootstrap_splits, p.seed)?)
    })?;
    if write_traces {
        let out = c.out_file(&cfg, "traces.ndjson");
        write_file(&out, |f| output::write_traces(&traces, std::io::BufWriter::new(f)))?;
        println!("wrote {} traces to {}", traces.len(), out.display());
    } else {
        let out = c.out_file(&cfg, "eval.csv");
        write_file(&out, |f| output::write_curves(std::slice::from_ref(&point), f))?;
    }
    print_point(&point);
    Ok(())
}

fn sweep(c: &Common) -> Result<()> {
    let cfg = c.experiment()?;
    let inputs = pipeline::load_inputs(&cfg, c.data.as_deref())?;
    let p = &inputs.pipeline;
    let ctx = SweepContext {
        records: &inputs.dataset.test,
        path_set: &inputs.path_set,
        topology: &p.topology,
        num_splits: p.bootstrap_splits,
        seed: p.seed,
    };
    let points = stage("sweep", || {
        Ok(match c.mode {
            None => sweep_all(&inputs.dataset, &inputs.path_set, &c.bundle(&inputs)?.models, p)?,
            Some(Mode::Quee) => ctx.quee(&c.bundle(&inputs)?.models.gates, &p.lambdas, p.first_gate)?,
            Some(Mode::Oracle) => ctx.oracle(&p.lambdas)?.into_iter().map(|(pt, _)| pt).collect(),
            Some(Mode::ThresholdExit) => ctx.threshold(&p.thresholds)?,
            Some(Mode::FixedPath) => ctx.fixed_paths()?.into_iter().map(|(pt, _)| pt).collect(),
            Some(Mode::NextBestStep) => {
                let bundle = c.bundle(&inputs)?;
                let models = p
                    .lambdas
                    .iter()
                    .map(|&l| train_next_best_step(&inputs.dataset, &inputs.path_set, &bundle.models.discretizer, p, l))
                    .collect::<Result<Vec<NextBestStepModels>, _>>()?;
                ctx.next_best_step(&models, p.first_gate)?
            }
        })
    })?;
    let out = c.out_file(&cfg, "curves.csv");
    write_file(&out, |f| output::write_curves(&points, f))?;
    for pt in &points {
        print_point(pt);
    }
    println!("wrote {} operating points to {}", points.len(), out.display());
    Ok(())
}

fn ece(c: &Common) -> Result<()> {
    let cfg = c.experiment()?;
    let inputs = pipeline::load_inputs(&cfg, c.data.as_deref())?;
    let rows = stage("ece-study", || {
        Ok(ece_study(
            &inputs.dataset,
            &inputs.path_set,
            &inputs.pipeline,
            &cfg.studies.ece_ks,
            cfg.studies.ece_curves,
        )?)
    })?;
    let out = c.out_file(&cfg, "ece.csv");
    write_file(&out, |f| output::write_ece_study(&rows, f))?;
    if cfg.studies.ece_curves {
        let curves = out.with_file_name("ece_curves.csv");
        write_file(&curves, |f| output::write_ece_curves(&rows, f))?;
    }
    for r in &rows {
        println!("K={:<4} ECE {:.5}", r.k, r.ece.overall);
    }
    Ok(())
}

fn degrade(c: &Common) -> Result<()> {
    let cfg = c.experiment()?;
    let inputs = pipeline::load_inputs(&cfg, c.data.as_deref())?;
    let rows = stage("degrade", || {
        Ok(degradation_study(
            &inputs.dataset,
            &inputs.path_set,
            &inputs.pipeline,
            &cfg.studies.noise_levels,
        )?)
    })?;
    let dir = c.out_dir(&cfg);
    write_file(&dir.join("degradation_rmse.csv"), |f| output::write_degradation_rmse(&rows, f))?;
    write_file(&dir.join("degradation_curves.csv"), |f| output::write_degradation_curves(&rows, f))?;
    for r in &rows {
        println!("sigma {:<5} RMSE {:.5}", r.sigma, r.rmse.overall);
    }
    Ok(())
}
