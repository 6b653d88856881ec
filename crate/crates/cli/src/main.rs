//! `lacim`: simulate data, train and evaluate latent causal invariance
//! models, and run the experiment suites from a JSON config.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lacim_core::evaluation::{evaluate_identifiability, export_latent_scatter};
use lacim_core::experiment::{
    run_simulation_suite, run_theory_checks, run_toy_ood, write_config, ExperimentConfig,
};
use lacim_core::inference::predict_batch;
use lacim_core::model::{
    dims_for, load_checkpoint, save_checkpoint, train, train_erm_baseline, LacimModel, TrainConfig, TrainMode,
};
use lacim_core::scm::{build_scm_with, export_dataset, format_f64, import_dataset, EnvDataset, Targets};
use lacim_core::{LacimError, Result};

#[derive(Parser)]
#[command(name = "lacim", version, about = "Latent causal invariance experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`, default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Lacim,
    Pooled,
    Erm,
}

#[derive(Subcommand)]
enum Command {
    /// Sample one CSV per environment from the ground-truth model.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Train on `env_*.csv` files and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding `env_<e>.csv`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "lacim")]
        mode: Mode,
    },
    /// Latent inference and prediction for every row of a CSV.
    Infer {
        #[command(flatten)]
        common: Common,
        /// `model.json` written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV in the layout written by `simulate`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Identifiability scores of a checkpoint on simulated data.
    Mcc {
        #[command(flatten)]
        common: Common,
        /// `model.json` written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by `simulate`, including `scm.json`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Rank, Stein, bound and open-set checks on the configured simulator.
    Theory {
        #[command(flatten)]
        common: Common,
    },
    /// Repeated identifiability study over all configured modes.
    Suite {
        #[command(flatten)]
        common: Common,
        /// Overrides `n_repeats`.
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// LaCIM against ERM on the spurious-correlation preset.
    ToyOod {
        #[command(flatten)]
        common: Common,
        /// Overrides `n_repeats`.
        #[arg(long)]
        repeats: Option<usize>,
    },
}

fn resolve(common: &Common, repeats: Option<usize>) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(r) = repeats {
        cfg.n_repeats = r;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    cfg.out_dir = Some(out.to_string_lossy().into_owned());
    cfg.validate()?;
    fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// `env_<e>.csv` files of a directory, ordered by environment.
fn load_envs(dir: &Path) -> Result<Vec<EnvDataset>> {
    let mut sets = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("env_") && name.ends_with(".csv") {
            sets.push(import_dataset(&path)?);
        }
    }
    if sets.is_empty() {
        return Err(LacimError::InvalidArgument(format!("no env_*.csv files in {}", dir.display())));
    }
    sets.sort_by_key(|d| d.env);
    Ok(sets)
}

fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let scm = build_scm_with(cfg.seed, cfg.scm.dims, cfg.scm.m, cfg.scm.options)?;
    let data = scm.sample_all(cfg.scm.samples_per_env, cfg.seed)?;
    for d in &data {
        export_dataset(d, &out.join(format!("env_{}.csv", d.env)))?;
    }
    write_config(cfg, out)?;
    write_json(&out.join("scm.json"), &json!({ "config": cfg, "seed": cfg.seed, "scm": scm }))?;
    println!("wrote {} environments to {}", data.len(), out.display());
    Ok(())
}

fn train_cmd(cfg: &ExperimentConfig, out: &Path, data: &Path, mode: Mode) -> Result<()> {
    let sets = load_envs(data)?;
    let tcfg = TrainConfig {
        seed: cfg.seed,
        mode: match mode {
            Mode::Lacim => TrainMode::Lacim,
            Mode::Pooled => TrainMode::Pooled,
            Mode::Erm => TrainMode::Erm,
        },
        ..cfg.train.clone()
    };
    if let Mode::Erm = mode {
        let (model, rep) = train_erm_baseline(&sets, &tcfg, cfg.toy.erm_hidden)?;
        write_json(
            &out.join("erm.json"),
            &json!({ "config": cfg, "seed": cfg.seed, "model": model, "losses": rep.losses }),
        )?;
        println!("final loss {:.6}", rep.losses.last().copied().unwrap_or(f64::NAN));
        return Ok(());
    }
    let m = if let Mode::Pooled = mode { 1 } else { sets.len() };
    let dims = dims_for(&sets, cfg.scm.dims.q_s, cfg.scm.dims.q_z, m)?;
    let mut model = LacimModel::new(dims, cfg.arch, cfg.seed)?;
    let rep = train(&mut model, &sets, &tcfg)?;
    save_checkpoint(&model, &out.join("model.json"))?;
    write_json(
        &out.join("train.json"),
        &json!({ "config": cfg, "seed": cfg.seed, "mode": tcfg.mode, "losses": rep.losses }),
    )?;
    println!("final loss {:.6}", rep.losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn infer(cfg: &ExperimentConfig, out: &Path, checkpoint: &Path, data: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let ds = import_dataset(data)?;
    let icfg = lacim_core::inference::InferConfig {
        seed: cfg.seed,
        ..cfg.infer.clone()
    };
    let pred = predict_batch(&model, &ds.x, &icfg)?;
    let mut w = csv::Writer::from_path(out.join("predictions.csv"))?;
    let q_s = model.dims.q_s;
    let q_z = model.dims.q_z;
    let mut header = vec!["row".to_string()];
    match &pred.predictions {
        Targets::Labels(_) => header.push("label".into()),
        Targets::Continuous(m) => header.extend((0..m.cols()).map(|j| format!("y{j}"))),
    }
    header.extend((0..q_s).map(|j| format!("s{j}")));
    header.extend((0..q_z).map(|j| format!("z{j}")));
    w.write_record(&header)?;
    for (i, lat) in pred.latents.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        match &pred.predictions {
            Targets::Labels(l) => rec.push(l[i].to_string()),
            Targets::Continuous(m) => rec.extend(m.row(i).iter().map(|&v| format_f64(v))),
        }
        rec.extend(lat.s.iter().chain(&lat.z).map(|&v| format_f64(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let objectives: Vec<f64> = pred.latents.iter().map(|l| l.objective).collect();
    write_json(
        &out.join("infer.json"),
        &json!({ "config": cfg, "seed": cfg.seed, "rows": ds.len(), "objectives": objectives }),
    )?;
    println!("{} rows, {:.1} samples/s", ds.len(), pred.samples_per_second);
    Ok(())
}

fn mcc_cmd(cfg: &ExperimentConfig, out: &Path, checkpoint: &Path, data: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let sets = load_envs(data)?;
    let report = evaluate_identifiability(&model, &sets)?;
    let p = &report.pooled;
    write_json(
        &out.join("mcc.json"),
        &json!({
            "config": cfg,
            "seed": cfg.seed,
            "mcc_s": p.mcc_s,
            "mcc_z": p.mcc_z,
            "assignment": { "s": p.s.assignment, "z": p.z.assignment },
            "matrix": { "s": p.s.abs_corr, "z": p.z.abs_corr },
            "per_env": report.per_env,
        }),
    )?;
    for d in &sets {
        export_latent_scatter(&model, d, &out.join(format!("latent_scatter_env_{}.csv", d.env)))?;
    }
    println!("MCC_S {:.4}  MCC_Z {:.4}", p.mcc_s, p.mcc_z);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { common } => {
            let (cfg, out) = resolve(&common, None)?;
            simulate(&cfg, &out)?;
        }
        Command::Train { common, data, mode } => {
            let (cfg, out) = resolve(&common, None)?;
            train_cmd(&cfg, &out, &data, mode)?;
        }
        Command::Infer { common, checkpoint, data } => {
            let (cfg, out) = resolve(&common, None)?;
            infer(&cfg, &out, &checkpoint, &data)?;
        }
        Command::Mcc { common, checkpoint, data } => {
            let (cfg, out) = resolve(&common, None)?;
            mcc_cmd(&cfg, &out, &checkpoint, &data)?;
        }
        Command::Theory { common } => {
            let (cfg, out) = resolve(&common, None)?;
            for r in run_theory_checks(&cfg, Some(&out))? {
                println!("{:<18} {} (margin {:.3e})", r.check, if r.pass { "PASS" } else { "FAIL" }, r.margin);
            }
        }
        Command::Suite { common, repeats } => {
            let (cfg, out) = resolve(&common, repeats)?;
            let res = run_simulation_suite(&cfg, Some(&out))?;
            for row in &res.aggregate {
                println!("{:<10} {} {:.4} ± {:.4} (n={})", row.mode, row.metric, row.mean, row.std, row.n);
            }
            let failed: Vec<_> = res.records.iter().filter(|r| r.error.is_some()).collect();
            for r in &failed {
                eprintln!("run {} r{} failed: {}", r.mode, r.repeat, r.error.as_deref().unwrap_or(""));
            }
            return Ok(failed.is_empty());
        }
        Command::ToyOod { common, repeats } => {
            let (cfg, out) = resolve(&common, repeats)?;
            let res = run_toy_ood(&cfg, Some(&out))?;
            for row in &res.aggregate {
                println!("{:<6} {} {:.4} ± {:.4} (n={})", row.mode, row.metric, row.mean, row.std, row.n);
            }
            let failed: Vec<_> = res.records.iter().filter(|r| !r.errors.is_empty()).collect();
            for r in &failed {
                eprintln!("repeat {} failed: {}", r.repeat, r.errors.join("; "));
            }
            return Ok(failed.is_empty());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
