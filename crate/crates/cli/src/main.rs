//! `cmsc`: train, run and evaluate the cascaded multi-scale cross network.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cmsc_core::gradcheck::{run_suite, DEFAULT_SEEDS};
use cmsc_core::imaging::{load_png, save_gray_png, save_png};
use cmsc_core::metrics::{evaluate, evaluate_with_baseline, reports_to_csv, reports_to_table, upscale_image};
use cmsc_core::trainer::{apply_setting, log_to_csv, parse_config_text, render_config, train_with};
use cmsc_core::{load_model, save_model, write_atomic, CmscModel, ModelConfig, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "cmsc", version, about = "Cascaded multi-scale cross network for image super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a directory of PNG images.
    Train(TrainArgs),
    /// Super-resolve one PNG image.
    Sr(SrArgs),
    /// Score a model on a directory of PNG images.
    Eval(EvalArgs),
    /// Check every backward pass against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print a model's configuration, depth and parameter count.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "MODEL")]
    out: PathBuf,
    /// Plain-text key=value settings; flags take precedence.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Per-epoch loss log.
    #[arg(long, value_name = "CSV")]
    log: Option<PathBuf>,
    /// Comma-separated upscaling factors, e.g. 2,3,4.
    #[arg(long)]
    scales: Option<String>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    modules: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_rfl: bool,
    #[arg(long)]
    no_cascaded_supervision: bool,
    #[arg(long)]
    share_reconstruction: bool,
    /// Extra key=value settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct SrArgs {
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[arg(long, value_name = "PNG")]
    input: PathBuf,
    #[arg(long)]
    scale: usize,
    #[arg(long, value_name = "PNG")]
    output: PathBuf,
    /// Write every stage prediction as a grayscale PNG into this directory.
    #[arg(long, value_name = "DIR")]
    dump_stages: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    #[arg(long)]
    scale: usize,
    #[arg(long, value_name = "CSV")]
    report: Option<PathBuf>,
    /// Also score plain bicubic interpolation.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per check.
    #[arg(long, default_value_t = DEFAULT_SEEDS)]
    seeds: usize,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
}

/// Failures that should exit with the usage code rather than the runtime one.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sr(a) => cmd_sr(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

/// Config file first, then `--set` pairs, then dedicated flags.
fn resolve_train_config(a: &TrainArgs) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        parse_config_text(&text, &mut model, &mut train).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        apply_setting(k.trim(), v.trim(), &mut model, &mut train).map_err(|e| usage(e.to_string()))?;
    }
    let mut flag = |key: &str, value: Option<String>| -> Result<()> {
        if let Some(v) = value {
            apply_setting(key, &v, &mut model, &mut train).map_err(|e| usage(format!("--{key}: {e}")))?;
        }
        Ok(())
    };
    flag("scales", a.scales.clone())?;
    flag("stages", a.stages.map(|v| v.to_string()))?;
    flag("modules", a.modules.map(|v| v.to_string()))?;
    flag("channels", a.channels.map(|v| v.to_string()))?;
    flag("k1", a.k1.map(|v| v.to_string()))?;
    flag("k2", a.k2.map(|v| v.to_string()))?;
    flag("epochs", a.epochs.map(|v| v.to_string()))?;
    flag("seed", a.seed.map(|v| v.to_string()))?;
    flag("rfl", a.no_rfl.then(|| "false".into()))?;
    flag("cascaded_supervision", a.no_cascaded_supervision.then(|| "false".into()))?;
    flag("share_reconstruction", a.share_reconstruction.then(|| "true".into()))?;
    model.validate().map_err(|e| usage(e.to_string()))?;
    train.validate(&model).map_err(|e| usage(e.to_string()))?;
    Ok((model, train))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (model_cfg, train_cfg) = resolve_train_config(&a)?;
    if !a.data.is_dir() {
        bail!("data directory {} does not exist", a.data.display());
    }
    println!("# resolved configuration");
    print!("{}", render_config(&model_cfg, &train_cfg));
    println!("# seed {}", train_cfg.seed);

    let mut model = CmscModel::initialized(model_cfg, train_cfg.seed)?;
    println!("# depth {}, {} learnable parameters", model.depth(), model.param_count());
    let log = train_with(&mut model, &a.data, &train_cfg, |r| {
        let stages: Vec<String> = r.loss_stages.iter().map(|v| format!("{v:.6}")).collect();
        println!(
            "epoch {:>4}  lr {:.1e}  loss {:.6}  final {:.6}  stages [{}]  {:.1}s",
            r.epoch + 1,
            r.lr,
            r.loss_total,
            r.loss_final,
            stages.join(", "),
            r.seconds
        );
    })?;
    save_model(&model, &a.out)?;
    println!("wrote {}", a.out.display());
    if let Some(path) = &a.log {
        write_atomic(path, log_to_csv(&log).as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_sr(a: SrArgs) -> Result<()> {
    if a.scale == 0 {
        return Err(usage("--scale must be positive"));
    }
    let model = load_model(&a.model)?;
    let input = load_png(&a.input)?;
    println!("# model {} ({} stages), scale {}, seed n/a", a.model.display(), model.config.stages, a.scale);
    let up = upscale_image(Some(&model), &input, a.scale)?;
    save_png(&up.image, &a.output)?;
    println!("wrote {} ({}x{})", a.output.display(), up.image.width(), up.image.height());
    if let Some(dir) = &a.dump_stages {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (q, plane) in up.stages.iter().enumerate() {
            let path = dir.join(format!("stage{}.png", q + 1));
            save_gray_png(plane, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if a.scale == 0 {
        return Err(usage("--scale must be positive"));
    }
    let model = load_model(&a.model)?;
    println!(
        "# model {} ({} stages), dataset {}, scale {}, seed n/a",
        a.model.display(),
        model.config.stages,
        a.dataset.display(),
        a.scale
    );
    let (ours, bicubic) = if a.baseline {
        let (m, b) = evaluate_with_baseline(&model, &a.dataset, a.scale)?;
        (m, Some(b))
    } else {
        (evaluate(&model, &a.dataset, a.scale)?, None)
    };
    let mut reports = vec![&ours];
    reports.extend(bicubic.as_ref());
    print!("{}", reports_to_table(&reports));
    if let Some(path) = &a.report {
        write_atomic(path, reports_to_csv(&reports).as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    println!("# finite-difference suite, base seed {}, {} seeds per check", a.seed, a.seeds);
    let results = run_suite(a.seed, a.seeds)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!("{failed} gradient check(s) exceeded tolerance");
    }
    println!("all checks passed");
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let c = &model.config;
    println!("stages={}", c.stages);
    println!("modules={}", c.modules_per_stage);
    println!("channels={}", c.channels);
    println!("k1={}", c.k1);
    println!("k2={}", c.k2);
    println!("leaky_slope={}", c.leaky_slope);
    println!("rfl={}", c.use_rfl);
    println!("cascaded_supervision={}", c.use_cascaded_supervision);
    println!("share_reconstruction={}", c.share_reconstruction);
    println!("depth={}", model.depth());
    println!("param_count={}", model.param_count());
    let w: Vec<String> = model.ensemble_weights.iter().map(|v| v.to_string()).collect();
    println!("ensemble_weights={}", w.join(","));
    Ok(())
}
