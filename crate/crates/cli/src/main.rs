//! `malaria`: train, evaluate and compare red-blood-cell classifiers.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use malaria_core::data::SynthTask;
use malaria_core::harness::ModelPreset;
use toml::Value;

use config::{override_value, RunConfig, KEYS};

#[derive(Parser)]
#[command(name = "malaria", version, about = "Red-blood-cell malaria classification pipeline")]
struct Cli {
    /// TOML file of `key = value` settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `runs/<unix-time>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override any configuration key, e.g. `--set epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct ModelArgs {
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, visible_alias = "batch")]
    batch_size: Option<usize>,
    /// Adadelta learning-rate multiplier.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    freeze: Option<String>,
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    normalization: Option<String>,
    #[arg(long)]
    augment: Option<String>,
    /// Apply stain normalization.
    #[arg(long)]
    stain_normalize: bool,
    /// Split by patient instead of by cell.
    #[arg(long)]
    patient_disjoint: bool,
}

impl ModelArgs {
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut o = Vec::new();
        let mut s = |k: &str, v: &Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), Value::String(v.clone())));
            }
        };
        s("model", &self.model);
        s("freeze", &self.freeze);
        s("head", &self.head);
        s("normalization", &self.normalization);
        s("augment", &self.augment);
        for (k, v) in [("input_size", self.input_size), ("epochs", self.epochs), ("batch_size", self.batch_size)] {
            if let Some(v) = v {
                o.push((k.to_string(), Value::Integer(v as i64)));
            }
        }
        if let Some(lr) = self.lr {
            o.push(("lr".into(), Value::Float(lr)));
        }
        if self.stain_normalize {
            o.push(("stain_normalize".into(), Value::Boolean(true)));
        }
        if self.patient_disjoint {
            o.push(("patient_disjoint".into(), Value::Boolean(true)));
        }
        o
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    A,
    B,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled cell corpus with a manifest.
    Synth {
        #[arg(long, value_enum, default_value = "a")]
        task: Task,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Resample a `parasitized/` + `uninfected/` image folder and write a manifest.
    Prepare {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        input_size: Option<usize>,
    },
    /// Train on an 80:10:10 split and report test metrics.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint whose frozen layers initialise the network.
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Score a checkpoint on a manifest subset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// all | train | val | test (split recomputed from the seed).
        #[arg(long, default_value = "test")]
        subset: String,
        /// Export misclassified images.
        #[arg(long)]
        false_cases: bool,
        #[arg(long)]
        patient_disjoint: bool,
    },
    /// k-fold cross-validation.
    Cv {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        cv_mode: Option<String>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Repeated seeded holdout.
    Holdout {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        repeats: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train an ablation grid on one split.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        /// freeze | stain | normalization
        #[arg(long)]
        grid: String,
        /// Comma-separated presets for the stain and normalization grids.
        #[arg(long, value_delimiter = ',', default_value = "custom,vgg-baseline,vgg-scaled")]
        models: Vec<String>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Weighted average of several checkpoints.
    Ensemble {
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        subset: String,
        /// equal | accuracy | comma-separated numbers
        #[arg(long)]
        weights: Option<String>,
    },
    /// Test-time augmentation.
    Tta {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        subset: String,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Patient-level diagnosis from cell predictions.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "all")]
        subset: String,
        /// CSV of `path,patient_id` overriding the manifest.
        #[arg(long)]
        patients: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// List configuration keys.
    Keys,
}

fn parse_set(raw: &str) -> Result<(String, Value)> {
    let (k, v) = raw.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{raw}`"))?;
    Ok((k.trim().to_string(), override_value(v.trim())))
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = match &cli.out {
        Some(d) => d.clone(),
        None => {
            let t = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            PathBuf::from("runs").join(t.to_string())
        }
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn models(names: &[String]) -> Result<Vec<ModelPreset>> {
    names.iter().map(|n| n.trim().parse::<ModelPreset>().map_err(Into::into)).collect()
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut overrides: Vec<(String, Value)> = Vec::new();
    let push = |o: &mut Vec<(String, Value)>, k: &str, v: Value| o.push((k.to_string(), v));
    match &cli.command {
        Command::Prepare { input_size: Some(s), .. } => push(&mut overrides, "input_size", Value::Integer(*s as i64)),
        Command::Train { model, .. } | Command::Holdout { model, .. } | Command::Ablate { model, .. } => {
            overrides.extend(model.overrides())
        }
        Command::Cv { model, k, cv_mode, .. } => {
            overrides.extend(model.overrides());
            if let Some(k) = k {
                push(&mut overrides, "k", Value::Integer(*k as i64));
            }
            if let Some(m) = cv_mode {
                push(&mut overrides, "cv_mode", Value::String(m.clone()));
            }
        }
        Command::Eval { patient_disjoint: true, .. } => push(&mut overrides, "patient_disjoint", Value::Boolean(true)),
        Command::Ensemble { weights: Some(w), .. } => push(&mut overrides, "ensemble_weights", Value::String(w.clone())),
        Command::Tta { k: Some(k), .. } => push(&mut overrides, "tta_k", Value::Integer(*k as i64)),
        _ => {}
    }
    if let Command::Holdout { repeats: Some(r), .. } = &cli.command {
        push(&mut overrides, "repeats", Value::Integer(*r as i64));
    }
    for raw in &cli.set {
        overrides.push(parse_set(raw)?);
    }
    if let Some(seed) = cli.seed {
        let v = i64::try_from(seed).map_or_else(|_| Value::String(seed.to_string()), Value::Integer);
        overrides.push(("seed".into(), v));
    }

    if let Command::Keys = cli.command {
        for (k, d) in KEYS {
            println!("{k:<18} {d}");
        }
        return Ok(true);
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if let Command::Gradcheck { instances } = cli.command {
        let (text, ok) = commands::gradcheck(instances, cfg.experiment.seed);
        print!("{text}");
        if let Some(out) = &cli.out {
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("gradcheck.txt"), &text)?;
        }
        return Ok(ok);
    }
    let out = out_dir(&cli)?;
    let show = |name: &str, p: &Path| println!("{name} written to {}", p.display());
    match &cli.command {
        Command::Synth { task, count, size } => {
            let task = match task {
                Task::A => SynthTask::A,
                Task::B => SynthTask::B,
            };
            let m = commands::synth(&out, &cfg, task, *count, *size)?;
            println!("{} cells", m.len());
            show("manifest", &out.join("manifest.csv"));
        }
        Command::Prepare { images, .. } => {
            let m = commands::prepare(&out, &cfg, images)?;
            println!("{} cells", m.len());
            show("manifest", &out.join("manifest.csv"));
        }
        Command::Train { manifest, init_from, .. } => {
            let r = commands::train(&out, &cfg, manifest, init_from.as_deref())?;
            print!("{}", r.to_text());
            show("checkpoint", &out.join("checkpoint.psgt"));
        }
        Command::Eval { checkpoint, manifest, subset, false_cases, .. } => {
            let r = commands::eval(&out, &cfg, checkpoint, manifest, subset, *false_cases)?;
            print!("{}", r.to_text());
        }
        Command::Cv { manifest, .. } => commands::cv(&out, &cfg, manifest)?,
        Command::Holdout { manifest, .. } => commands::holdout(&out, &cfg, manifest)?,
        Command::Ablate { manifest, grid, models: names, .. } => {
            let t = commands::ablate(&out, &cfg, manifest, grid, &models(names)?)?;
            print!("{}", t.to_csv()?);
        }
        Command::Ensemble { checkpoints, manifest, subset, .. } => {
            let r = commands::ensemble(&out, &cfg, checkpoints, manifest, subset)?;
            print!("{}", r.to_text());
        }
        Command::Tta { checkpoint, manifest, subset, .. } => {
            let r = commands::tta(&out, &cfg, checkpoint, manifest, subset)?;
            print!("{}", r.to_text());
        }
        Command::Diagnose { checkpoint, manifest, subset, patients } => {
            commands::diagnose(&out, &cfg, checkpoint, manifest, subset, patients.as_deref())?
        }
        Command::Gradcheck { .. } | Command::Keys => unreachable!(),
    }
    Ok(true)
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(c) = e.downcast_ref::<malaria_core::Error>() {
        return c.kind();
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    let msg = e.to_string();
    if msg.starts_with("invalid configuration") || msg.starts_with("config ") || msg.starts_with("--set") {
        "config"
    } else if msg.starts_with("preparation error") {
        "preparation"
    } else {
        "cli"
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", error_kind(&e));
            ExitCode::FAILURE
        }
    }
}
