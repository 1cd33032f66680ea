//! `gradweave` command-line runner.
//!
//! Exit codes: 0 success, 1 runtime failure (including a failed gradient
//! check), 2 invalid configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gradweave::checkpoint::{load_checkpoint, save_checkpoint};
use gradweave::datakit::diagnostics::{format_float, write_diagnostics_csv};
use gradweave::datakit::manifest::read_manifest;
use gradweave::datakit::pgm::write_pgm;
use gradweave::datakit::synth::generate_dataset;
use gradweave::experiment::{ablate, evaluate, run, RunConfig, EVAL_SPLIT, TRAIN_SPLIT};
use gradweave::gradcheck::{run_gradcheck, GradcheckConfig};
use gradweave::Error;

#[derive(Parser)]
#[command(name = "gradweave", version, about = "Train, evaluate and check two-modality saliency models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write diagnostics, a checkpoint and a summary.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest or a synthetic split.
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the four ablation arms over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Clone, Debug, Default)]
struct RunArgs {
    /// baseline, +unimodal, +deconflict, +decoupled or full.
    #[arg(long, allow_hyphen_values = true)]
    mode: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    eta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Signal advantage of the R modality over T, in [0, 1].
    #[arg(long, allow_negative_numbers = true)]
    dominance: Option<f64>,
    /// How strongly background texture hints at object location, in [0, 1].
    #[arg(long, allow_negative_numbers = true)]
    bg_cue: Option<f64>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Visit the other gradients in a random order when deconflicting.
    #[arg(long)]
    shuffle_projections: bool,
    /// `key = value` file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest; without it a synthetic split is generated.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "eval")]
    split: Split,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5, allow_negative_numbers = true)]
    eps: f64,
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<ExitCode, Failure>;

fn config_error(e: Error) -> Failure {
    Failure::Config(e.to_string())
}

fn resolve(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("--config {}: {e}", path.display())))?;
        cfg.apply_config_text(&text)
            .map_err(|e| Failure::Config(format!("--config {}: {e}", path.display())))?;
    }
    if let Some(mode) = &args.mode {
        cfg.mode = mode
            .parse()
            .map_err(|e: Error| Failure::Config(format!("--mode: {e}")))?;
    }
    if let Some(v) = args.eta {
        cfg.eta = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.dominance {
        cfg.synth.dominance = v;
    }
    if let Some(v) = args.bg_cue {
        cfg.synth.background_cue_strength = v;
    }
    if let Some(v) = args.train_samples {
        cfg.train_samples = v;
    }
    if let Some(v) = args.eval_samples {
        cfg.eval_samples = v;
    }
    cfg.shuffle_projections |= args.shuffle_projections;
    cfg.validate().map_err(config_error)?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_train(args: &TrainArgs) -> Outcome {
    let cfg = resolve(&args.run)?;
    create_dir(&args.out)?;
    write_text(&args.out.join("config.txt"), &cfg.to_config_text())?;
    let outcome = run(&cfg)?;
    write_diagnostics_csv(&outcome.records, &args.out.join("diag.csv"))?;
    save_checkpoint(&outcome.model, &args.out.join("model.ckpt"))?;
    let last = outcome.records.last().expect("at least one step");
    let summary = format!(
        "mode = {}\nseed = {}\nsteps = {}\nfinal_loss = {}\nlate_grad_ratio = {}\nmae = {}\nmax_f = {}\n",
        cfg.mode,
        cfg.seed,
        outcome.records.len(),
        format_float(last.loss),
        format_float(outcome.late_grad_ratio()),
        format_float(outcome.eval.mae),
        format_float(outcome.eval.max_f),
    );
    write_text(&args.out.join("summary.txt"), &summary)?;
    println!("mae={} max_f={}", format_float(outcome.eval.mae), format_float(outcome.eval.max_f));
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: &EvalArgs) -> Outcome {
    let model = load_checkpoint(&args.checkpoint)?;
    let samples = match &args.manifest {
        Some(path) => read_manifest(path)?,
        None => {
            let cfg = resolve(&args.run)?;
            let mut synth = cfg.synth_config();
            synth.height = model.config.height;
            synth.width = model.config.width;
            let (n, split) = match args.split {
                Split::Train => (cfg.train_samples, TRAIN_SPLIT),
                Split::Eval => (cfg.eval_samples, EVAL_SPLIT),
            };
            generate_dataset(&synth, n, split)?
        }
    };
    let result = evaluate(&model, &samples)?;
    create_dir(&args.out)?;
    let mut csv = String::from("index,mae,max_f\n");
    for (i, ((m, f), pred)) in result.per_sample.iter().zip(&result.predictions).enumerate() {
        write_pgm(pred, &args.out.join(format!("pred_{i:05}.pgm")))?;
        csv.push_str(&format!("{i},{},{}\n", format_float(*m), format_float(*f)));
    }
    write_text(&args.out.join("metrics.csv"), &csv)?;
    println!("mae={} max_f={}", format_float(result.mae), format_float(result.max_f));
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Outcome {
    let cfg = GradcheckConfig {
        points: args.points,
        eps: args.eps,
        seed: args.seed,
        inject_fault: args.inject_fault,
        ..GradcheckConfig::default()
    };
    if !(cfg.eps > 0.0 && cfg.eps.is_finite()) {
        return Err(Failure::Config(format!("--eps must be positive, got {}", cfg.eps)));
    }
    if cfg.points == 0 {
        return Err(Failure::Config("--points must be at least 1".into()));
    }
    println!(
        "gradcheck eps={:e} points={} tolerance={:e} seed={}",
        cfg.eps, cfg.points, cfg.tolerance, cfg.seed
    );
    let report = run_gradcheck(&cfg)?;
    for point in 0..cfg.points {
        let worst = report
            .entries
            .iter()
            .filter(|e| e.point == point)
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .expect("entries for every point");
        println!(
            "point {point:2} {:?} worst rel_error={:.3e} at {}",
            worst.kind, worst.rel_error, worst.worst_path
        );
    }
    let worst = report.worst().expect("entries");
    let line = format!(
        "worst rel_error={:.3e} path={} stream={:?} group={:?} point={}",
        worst.rel_error, worst.worst_path, worst.stream, worst.group, worst.point
    );
    if report.passed() {
        println!("{line}");
        println!("gradcheck passed");
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradcheck failed: {line}");
        Ok(ExitCode::from(1))
    }
}

fn cmd_ablate(args: &AblateArgs) -> Outcome {
    let cfg = resolve(&args.run)?;
    if args.seeds == 0 {
        return Err(Failure::Config("--seeds must be at least 1".into()));
    }
    create_dir(&args.out)?;
    write_text(&args.out.join("config.txt"), &cfg.to_config_text())?;
    let ab = ablate(&cfg, args.seeds)?;
    for runs in &ab.runs {
        for r in runs {
            let dir = args
                .out
                .join(r.config.mode.name().trim_start_matches('+'))
                .join(format!("seed{}", r.config.seed));
            create_dir(&dir)?;
            write_diagnostics_csv(&r.records, &dir.join("diag.csv"))?;
        }
    }
    let csv = ab.to_csv();
    write_text(&args.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gradweave::experiment::Mode;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "eta = 0.5\nepochs = 3\n# comment\nmode = baseline\n").unwrap();
        let args = RunArgs {
            config: Some(path),
            eta: Some(0.25),
            ..RunArgs::default()
        };
        let cfg = resolve(&args).unwrap();
        assert_eq!(cfg.eta, 0.25);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.mode, Mode::Baseline);
    }
}
