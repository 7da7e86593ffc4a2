//! `sbdm`: generate cohorts, train, forecast and evaluate from the command
//! line.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use sbdm_core::cohort::{Diagnosis, Sex, MANIFEST_VERSION, SBDF_VERSION};
use sbdm_core::evalx::{GroupBy, REPORT_VERSION};
use sbdm_core::sampler::SampleConfig;
use sbdm_core::trainer::CHECKPOINT_VERSION;

use config::{RunConfig, RESOLVED_NAME};

#[derive(Parser)]
#[command(
    name = "sbdm",
    about = "Spherical Brownian bridge forecasting of cortical thickness",
    disable_version_flag = true
)]
struct Cli {
    /// Print the tool and file format versions.
    #[arg(short = 'V', long)]
    version: bool,
    /// Seed for every random stream (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for training.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Icosphere meshes.
    Mesh {
        #[command(subcommand)]
        cmd: MeshCmd,
    },
    /// Cohort generation, splitting and inspection.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Condition on the follow-up diagnosis (needed for counterfactuals).
        #[arg(long)]
        with_dxt: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Forecast one follow-up field from a baseline field.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Baseline thickness field (SBDF).
        #[arg(long)]
        baseline: PathBuf,
        /// Months after baseline.
        #[arg(long)]
        t: f64,
        #[arg(long)]
        age: f64,
        #[arg(long)]
        sex: Sex,
        #[arg(long)]
        dx0: Diagnosis,
        #[arg(long)]
        dxt: Option<Diagnosis>,
        /// Write the predicted field here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingFlags,
    },
    /// Forecast several time points per subject, optionally counterfactual.
    Trajectory {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Subject ids (all subjects when omitted).
        #[arg(long, value_delimiter = ',')]
        subject: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "12,24,36")]
        times: Vec<f64>,
        #[arg(long)]
        target_dx: Option<Diagnosis>,
        /// Directory for the predicted fields.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingFlags,
    },
    /// Score a checkpoint on a split against baselines.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run configuration (defaults to the one saved next to the checkpoint).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_delimiter = ',')]
        baselines: Option<Vec<String>>,
        /// Group subgroup statistics by baseline instead of follow-up diagnosis.
        #[arg(long)]
        group_by_baseline: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingFlags,
    },
    /// Run the built-in verification suite.
    Selfcheck,
}

#[derive(Subcommand)]
enum MeshCmd {
    Info {
        #[arg(long)]
        level: u32,
    },
    /// Write the mesh as Wavefront OBJ.
    Export {
        #[arg(long)]
        level: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Generate a synthetic cohort and write it as manifest plus fields.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Stratified subject-level split.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.7,0.1,0.2")]
        fractions: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    Inspect {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Args)]
struct SamplingFlags {
    /// Number of grid points including both ends.
    #[arg(long)]
    stages: Option<usize>,
    /// Switch off the injected sampling noise.
    #[arg(long)]
    deterministic: bool,
    /// Average this many samples.
    #[arg(long)]
    repeats: Option<usize>,
}

impl SamplingFlags {
    fn apply(&self, base: &SampleConfig, seed: Option<u64>) -> Result<SampleConfig> {
        let mut s = base.clone();
        if let Some(k) = self.stages {
            s.stages = k;
        }
        if self.deterministic {
            s.stochastic = false;
        }
        if let Some(r) = self.repeats {
            s.repeats = r;
        }
        if let Some(seed) = seed {
            s.seed = seed;
        }
        s.validate()?;
        Ok(s)
    }
}

fn version_text() -> String {
    format!(
        "sbdm {} (sbdf v{SBDF_VERSION}, manifest v{MANIFEST_VERSION}, checkpoint v{CHECKPOINT_VERSION}, report v{REPORT_VERSION})",
        env!("CARGO_PKG_VERSION")
    )
}

fn load_config(path: Option<&Path>, cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

/// The run config saved next to a checkpoint, if any.
fn saved_config(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint
        .parent()
        .map(|d| d.join(RESOLVED_NAME))
        .filter(|p| p.exists())
}

/// Sampling settings saved with the checkpoint, or the defaults.
fn saved_sampling(checkpoint: &Path) -> Result<SampleConfig> {
    Ok(match saved_config(checkpoint) {
        Some(p) => RunConfig::load(&p)?.sample,
        None => SampleConfig::default(),
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let Some(command) = &cli.command else {
        unreachable!("checked in main");
    };
    match command {
        Command::Mesh { cmd } => match cmd {
            MeshCmd::Info { level } => commands::mesh_info(*level)?,
            MeshCmd::Export { level, out } => commands::mesh_export(*level, out)?,
        },
        Command::Data { cmd } => match cmd {
            DataCmd::Gen { config, out, subjects } => {
                let mut cfg = load_config(config.as_deref(), &cli)?;
                if let Some(n) = subjects {
                    cfg.synthetic.n_subjects = *n;
                }
                commands::data_gen(&cfg.resolve()?, out)?;
            }
            DataCmd::Split {
                manifest,
                fractions,
                out,
            } => {
                let f: [f64; 3] = fractions.as_slice().try_into().map_err(|_| {
                    sbdm_core::Error::range("fractions", format!("{fractions:?}"), "three comma-separated values")
                })?;
                commands::data_split(manifest, f, cli.seed.unwrap_or(0), out)?;
            }
            DataCmd::Inspect { manifest } => commands::data_inspect(manifest)?,
        },
        Command::Train {
            config,
            out,
            epochs,
            with_dxt,
            resume,
        } => {
            let mut cfg = load_config(config.as_deref(), &cli)?;
            if let Some(o) = out {
                cfg.out_dir = o.clone();
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if *with_dxt {
                cfg.train.with_dxt = true;
            }
            commands::train(&cfg.resolve()?, commands::TrainArgs { resume: resume.clone() })?;
        }
        Command::Predict {
            checkpoint,
            baseline,
            t,
            age,
            sex,
            dx0,
            dxt,
            out,
            sampling,
        } => {
            let sample = sampling.apply(&saved_sampling(checkpoint)?, cli.seed)?;
            commands::predict(
                &sample,
                commands::PredictArgs {
                    checkpoint: checkpoint.clone(),
                    baseline: baseline.clone(),
                    t_months: *t,
                    age: *age,
                    sex: *sex,
                    dx0: *dx0,
                    dxt: *dxt,
                    out: out.clone(),
                },
            )?;
        }
        Command::Trajectory {
            checkpoint,
            manifest,
            subject,
            times,
            target_dx,
            out,
            sampling,
        } => {
            let sample = sampling.apply(&saved_sampling(checkpoint)?, cli.seed)?;
            commands::trajectories(
                &sample,
                commands::TrajectoryArgs {
                    checkpoint: checkpoint.clone(),
                    manifest: manifest.clone(),
                    subjects: subject.clone(),
                    times: times.clone(),
                    target_dx: *target_dx,
                    out: out.clone(),
                },
            )?;
        }
        Command::Eval {
            checkpoint,
            config,
            split,
            baselines,
            group_by_baseline,
            out,
            sampling,
        } => {
            let path = config.clone().or_else(|| saved_config(checkpoint));
            let mut cfg = load_config(path.as_deref(), &cli)?;
            cfg.sample = sampling.apply(&cfg.sample, cli.seed)?;
            if let Some(b) = baselines {
                cfg.eval.baselines = b.clone();
            }
            if *group_by_baseline {
                cfg.eval.group_by = GroupBy::Baseline;
            }
            let cfg = cfg.resolve()?;
            commands::eval(
                &cfg,
                commands::EvalArgs {
                    checkpoint: checkpoint.clone(),
                    split: split.clone(),
                    baselines: cfg.eval.baselines.clone(),
                    group_by: cfg.eval.group_by,
                    out: out.clone(),
                },
            )?;
        }
        Command::Selfcheck => {
            if !commands::selfcheck(cli.seed.unwrap_or(0))? {
                eprintln!("[sbdm] selfcheck failed");
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// 1 for invalid input, 2 for failures while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<sbdm_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
        if cause.is::<serde_json::Error>() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if cli.version {
        println!("{}", version_text());
        return ExitCode::SUCCESS;
    }
    if cli.command.is_none() {
        let _ = <Cli as clap::CommandFactory>::command().print_help();
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
