//! Command-line entry point: data generation, training regimes, evaluation,
//! report emission, and the gradient verification suite.
//!
//! Exit codes: 0 success, 2 configuration/validation, 3 IO/format,
//! 4 numeric failure.

use clap::{Parser, Subcommand};
use dld::artifacts::{build_report, prepare_out_dir, selections_csv, MetricsJson};
use dld::error::{Error, Result};
use dld::params::ParamStore;
use dld::synthtext::{generate_split, read_dataset, write_dataset, GenConfig, SpottingSample};
use dld::trainer::eval::{evaluate, Policy};
use dld::trainer::{train_student, train_teacher, Regime, TrainConfig, TrainOutput};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "dld", version, about = "Dynamic low-resolution distillation on a synthetic text-spotting corpus")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train/eval dataset splits from a GenConfig JSON file.
    GenData {
        /// GenConfig JSON path; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the high-resolution teacher (multi-scale vanilla training).
    TrainTeacher {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<u32>,
        #[arg(long)]
        force: bool,
    },
    /// Train a student under one of the experimental regimes.
    Train {
        #[arg(long)]
        regime: String,
        #[arg(long)]
        dataset: PathBuf,
        /// Teacher checkpoint; required by every regime except vanilla.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long = "fixed-scale")]
        fixed_scale: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<u32>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on the eval split under a policy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Selector checkpoint, required by the dynamic policy.
        #[arg(long)]
        selector: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// "fixed:<scale>" or "dynamic".
        #[arg(long)]
        policy: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Consolidate completed runs into summary.csv and plot data.
    Report {
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run the finite-difference verification suite.
    Gradcheck {
        /// Seeded inputs per case.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out, seed, force } => gen_data(config.as_deref(), &out, seed, force),
        Cmd::TrainTeacher { dataset, config, out, seed, epochs, force } => {
            let mut cfg = load_train_config(config.as_deref())?;
            cfg.regime = Regime::VanillaMultiscale;
            apply_overrides(&mut cfg, seed, None, None, epochs);
            train_cmd(&dataset, None, cfg, &out, force, true)
        }
        Cmd::Train { regime, dataset, teacher, config, out, gamma, fixed_scale, seed, epochs, force } => {
            let mut cfg = load_train_config(config.as_deref())?;
            cfg.regime = parse_regime(&regime)?;
            apply_overrides(&mut cfg, seed, gamma, fixed_scale, epochs);
            if cfg.regime.needs_teacher() && teacher.is_none() {
                return Err(Error::Config(format!("--teacher is required for regime {regime}")));
            }
            train_cmd(&dataset, teacher.as_deref(), cfg, &out, force, false)
        }
        Cmd::Eval { checkpoint, selector, dataset, policy, out, force } => {
            eval_cmd(&checkpoint, selector.as_deref(), &dataset, &policy, &out, force)
        }
        Cmd::Report { run_dirs, out, force } => {
            prepare_out_dir(&out, force)?;
            let (summary, plot) = build_report(&run_dirs)?;
            std::fs::write(out.join("summary.csv"), &summary)?;
            std::fs::write(out.join("accuracy_vs_flops.dat"), &plot)?;
            println!("wrote {} and {}", out.join("summary.csv").display(), out.join("accuracy_vs_flops.dat").display());
            Ok(())
        }
        Cmd::Gradcheck { seeds } => {
            let t0 = Instant::now();
            let results = dld::verification::gradcheck_suite(seeds)?;
            let mut failed = 0;
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                if !r.passed() {
                    failed += 1;
                }
                println!("{status:4} {:28} seed {} max rel err {:.3e}", r.name, r.seed, r.report.max_rel_err);
            }
            println!("{} checks, {} failed, {:.1}s", results.len(), failed, t0.elapsed().as_secs_f64());
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} gradcheck cases failed")));
            }
            Ok(())
        }
    }
}

fn parse_regime(s: &str) -> Result<Regime> {
    match s {
        "vanilla_multiscale" | "vanilla" => Ok(Regime::VanillaMultiscale),
        "skd_only" | "skd" => Ok(Regime::SkdOnly),
        "drs_only" | "drs" => Ok(Regime::DrsOnly),
        "dld" => Ok(Regime::Dld),
        other => Err(Error::Config(format!(
            "unknown regime {other}; expected vanilla_multiscale, skd_only, drs_only, or dld"
        ))),
    }
}

fn regime_name(r: Regime) -> &'static str {
    match r {
        Regime::VanillaMultiscale => "vanilla_multiscale",
        Regime::SkdOnly => "skd_only",
        Regime::DrsOnly => "drs_only",
        Regime::Dld => "dld",
    }
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let json = std::fs::read_to_string(p)?;
            serde_json::from_str(&json).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn apply_overrides(
    cfg: &mut TrainConfig,
    seed: Option<u64>,
    gamma: Option<f64>,
    fixed_scale: Option<f64>,
    epochs: Option<u32>,
) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(g) = gamma {
        cfg.gamma = g;
    }
    if let Some(f) = fixed_scale {
        cfg.fixed_student_scale = f;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
}

fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>, force: bool) -> Result<()> {
    let mut cfg: GenConfig = match config {
        None => GenConfig::default(),
        Some(p) => {
            let json = std::fs::read_to_string(p)?;
            serde_json::from_str(&json).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    prepare_out_dir(out, force)?;

    let t0 = Instant::now();
    let train = generate_split(&cfg, "train", cfg.num_samples)?;
    let eval_set = generate_split(&cfg, "eval", cfg.eval_samples())?;
    let train_manifest = write_dataset(&train, &cfg, &out.join("train"))?;
    let eval_manifest = write_dataset(&eval_set, &cfg, &out.join("eval"))?;
    std::fs::write(out.join("gen_config.json"), serde_json::to_string_pretty(&cfg).expect("config serializes"))?;
    println!("train: {} samples, manifest hash {}", train.len(), train_manifest.hash());
    println!("eval:  {} samples, manifest hash {}", eval_set.len(), eval_manifest.hash());
    println!("generated in {:.1}s -> {}", t0.elapsed().as_secs_f64(), out.display());
    Ok(())
}

fn load_splits(dataset: &Path) -> Result<(Vec<SpottingSample>, Vec<SpottingSample>, Vec<f64>)> {
    let (train_manifest, train) = read_dataset(&dataset.join("train"))?;
    let (eval_manifest, eval_set) = read_dataset(&dataset.join("eval"))?;
    if train_manifest.scales != eval_manifest.scales {
        return Err(Error::Format("train and eval splits disagree on candidate scales".into()));
    }
    Ok((train, eval_set, train_manifest.scales))
}

fn train_cmd(
    dataset: &Path,
    teacher_path: Option<&Path>,
    mut cfg: TrainConfig,
    out: &Path,
    force: bool,
    is_teacher: bool,
) -> Result<()> {
    let (train, eval_set, scales) = load_splits(dataset)?;
    cfg.scales = dld::selector::ScaleSet(scales.clone());
    cfg.validate()?;
    prepare_out_dir(out, force)?;

    let teacher = teacher_path.map(dld::checkpoint::load).transpose()?;
    let t0 = Instant::now();
    let output: TrainOutput = if is_teacher {
        train_teacher(&cfg, &train, &eval_set)?
    } else {
        train_student(&cfg, &train, &eval_set, teacher.as_ref())?
    };
    let elapsed = t0.elapsed().as_secs_f64();

    dld::checkpoint::save(&output.student, &out.join("checkpoint.ckpt"))?;
    if let Some(sel) = &output.selector {
        dld::checkpoint::save(sel, &out.join("selector.ckpt"))?;
    }
    if let Some(table) = &output.table {
        std::fs::write(out.join("flops_table.json"), serde_json::to_string_pretty(table).expect("table serializes"))?;
    }
    std::fs::write(out.join("log.csv"), output.log.to_csv())?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg).expect("config serializes"))?;
    std::fs::write(out.join("token_map.json"), dld::synthtext::font::token_map_json())?;

    // Final evaluation under the regime's operating policy.
    let name = if is_teacher { "teacher" } else { regime_name(cfg.regime) };
    let (policy, policy_name) = match &output.selector {
        Some(sel) => (Policy::Dynamic(sel), "dynamic".to_string()),
        None if is_teacher => (Policy::Fixed(1.0), "fixed:1".to_string()),
        None => (Policy::Fixed(cfg.fixed_student_scale), format!("fixed:{}", cfg.fixed_student_scale)),
    };
    let metrics = evaluate(&output.student, &eval_set, &scales, &policy)?;
    let mj = MetricsJson::from_metrics(
        &metrics,
        &scales,
        &policy_name,
        Some(name.to_string()),
        output.selector.is_some().then_some(cfg.gamma),
    );
    mj.write(&out.join("metrics.json"))?;
    if let Some(rows) = &metrics.selections {
        std::fs::write(out.join("selections.csv"), selections_csv(rows, &scales))?;
    }

    println!(
        "{name}: accuracy {:.4}, mean flops {:.3e}, mean scale {:.3}, final train acc {:.4}, {elapsed:.0}s",
        metrics.accuracy, metrics.mean_flops, metrics.mean_scale, output.final_train_accuracy
    );
    println!("run dir: {}", out.display());
    Ok(())
}

fn eval_cmd(
    checkpoint: &Path,
    selector: Option<&Path>,
    dataset: &Path,
    policy_str: &str,
    out: &Path,
    force: bool,
) -> Result<()> {
    let (_, eval_set, scales) = load_splits(dataset)?;
    let student = dld::checkpoint::load(checkpoint)?;
    let selector_store: Option<ParamStore<f32>> = selector.map(dld::checkpoint::load).transpose()?;

    let policy = if policy_str == "dynamic" {
        match &selector_store {
            Some(sel) => Policy::Dynamic(sel),
            None => return Err(Error::Config("dynamic policy requires --selector".into())),
        }
    } else if let Some(s) = policy_str.strip_prefix("fixed:") {
        let scale: f64 = s.parse().map_err(|_| Error::Config(format!("bad fixed scale {s}")))?;
        if !(0.0 < scale && scale <= 1.0) {
            return Err(Error::Config(format!("fixed scale {scale} outside (0, 1]")));
        }
        Policy::Fixed(scale)
    } else {
        return Err(Error::Config(format!("unknown policy {policy_str}; expected fixed:<scale> or dynamic")));
    };

    prepare_out_dir(out, force)?;
    let metrics = evaluate(&student, &eval_set, &scales, &policy)?;
    let mj = MetricsJson::from_metrics(&metrics, &scales, policy_str, None, None);
    mj.write(&out.join("metrics.json"))?;
    if let Some(rows) = &metrics.selections {
        std::fs::write(out.join("selections.csv"), selections_csv(rows, &scales))?;
    }
    println!(
        "accuracy {:.4} (sub-legible {}), mean flops {:.3e}, mean scale {:.3}",
        metrics.accuracy,
        metrics.accuracy_sub_legible.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()),
        metrics.mean_flops,
        metrics.mean_scale
    );
    Ok(())
}
