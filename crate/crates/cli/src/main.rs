mod plot;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use diprl_core::envs::{make_env, make_eval_env, EnvOptions, Environment};
use diprl_core::extract::{discretize, ExtractionReport};
use diprl_core::program::ProgramContext;
use diprl_core::program::DiscreteProgram;
use diprl_core::trainer::metrics::{self, MetricsRow};
use diprl_core::trainer::{
    self, evaluate_program, evaluate_relaxed, BaselineExtraction, Checkpoint, EvalMode, Mode, RegularizerMode,
    TrainConfig, TrainObserver,
};
use diprl_core::{gradcheck, theory, Error, Execution};

const DEFAULT_EVAL_SEED: u64 = 10_000;
const PARSE_DEPTH_LIMIT: usize = 64;
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "diprl", version, about = "Train, extract and verify differentiable program policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a relaxed policy and extract its program.
    Train(TrainArgs),
    /// Evaluate a program file or a checkpoint.
    Eval(EvalArgs),
    /// Discretize a checkpoint into a program.
    Extract(ExtractArgs),
    /// Summarize a checkpoint.
    Inspect(InspectArgs),
    /// Check the gap identities and bounds on random tabular instances.
    VerifyTheory(VerifyArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Draw return and entropy curves from a run's metrics.
    Plot(PlotArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// diprl, piprl-baseline or ppo-off.
    #[arg(long)]
    mode: Option<Mode>,
    /// Fixed regularization weight; switches the regularizer to fixed mode.
    #[arg(long)]
    alpha_fixed: Option<f64>,
    /// Target entropy as a fraction of ln(max depth).
    #[arg(long)]
    target_frac: Option<f64>,
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    extract_fraction: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
    /// Output directory; defaults to `$DIPRL_RUN_DIR/<name>` or `runs/<name>`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Program text file; needs --env.
    #[arg(long, conflicts_with = "checkpoint")]
    program: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long, default_value_t = 30)]
    episodes: usize,
    #[arg(long, default_value_t = DEFAULT_EVAL_SEED)]
    seed: u64,
    /// Where to write eval.json; defaults to the artifact's run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the checkpoint's run directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    n_instances: usize,
    /// Write the report array here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    cases: usize,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    run_dir: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::Numerical(_)) => 3,
        Some(Error::Verification(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::VerifyTheory(a) => cmd_verify_theory(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(env) = &a.env {
        cfg.env = env.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.apply_mode(m);
    }
    if let Some(v) = a.alpha_fixed {
        cfg.set_alpha_fixed(v);
    }
    if let Some(v) = a.target_frac {
        cfg.regularizer.target_fraction = v;
    }
    if let Some(v) = a.total_steps {
        cfg.total_steps = v;
    }
    if let Some(v) = a.max_depth {
        cfg.policy.max_depth = v;
    }
    if let Some(v) = a.extract_fraction {
        cfg.baseline.extract_fraction = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if a.sequential {
        cfg.execution = Execution::Sequential;
    }
    cfg.validate()?;
    cfg.resolve()?;
    Ok(cfg)
}

fn mode_label(cfg: &TrainConfig) -> String {
    if cfg.baseline.enabled {
        return "piprl-baseline".into();
    }
    match cfg.regularizer.mode {
        RegularizerMode::Auto => "diprl".into(),
        RegularizerMode::Fixed => format!("alpha{}", cfg.regularizer.alpha_fixed),
        RegularizerMode::Off => "ppo-off".into(),
    }
}

fn run_root() -> PathBuf {
    std::env::var_os("DIPRL_RUN_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Writes metrics, checkpoints and the baseline extraction as they arrive.
struct RunWriter {
    dir: PathBuf,
    metrics: fs::File,
}

impl TrainObserver for RunWriter {
    fn on_metrics(&mut self, row: &MetricsRow) -> diprl_core::Result<()> {
        writeln!(self.metrics, "{}", row.to_csv())?;
        self.metrics.flush()?;
        Ok(())
    }

    fn on_checkpoint(&mut self, ck: &Checkpoint) -> diprl_core::Result<()> {
        ck.save(&self.dir.join("checkpoints").join(format!("step_{}.json", ck.step)))
    }

    fn on_baseline_extraction(&mut self, event: &BaselineExtraction) -> diprl_core::Result<()> {
        let text = serde_json::to_string_pretty(event)?;
        std::fs::write(self.dir.join("baseline_extraction.json"), text + "\n")?;
        Ok(())
    }
}

fn program_text(program: &DiscreteProgram, env: &dyn Environment, max_depth: usize) -> String {
    program.to_text(&ProgramContext::for_env(env, max_depth))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    let dir = match &a.run_dir {
        Some(d) => d.clone(),
        None => {
            let name = a
                .name
                .clone()
                .unwrap_or_else(|| format!("{}-{}-seed{}", cfg.env, mode_label(&cfg), cfg.seed));
            run_root().join(name)
        }
    };
    fs::create_dir_all(dir.join("checkpoints")).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.json"), cfg.to_json()).context("writing config echo")?;
    let mut metrics_file = fs::File::create(dir.join("metrics.csv")).context("creating metrics.csv")?;
    writeln!(metrics_file, "{}", metrics::HEADER)?;
    let mut writer = RunWriter {
        dir: dir.clone(),
        metrics: metrics_file,
    };
    log::info!("training {} ({}) into {}", cfg.env, mode_label(&cfg), dir.display());
    let out = trainer::train_with(&cfg, &mut writer)?;
    trainer::check_outcome(&out, &cfg)?;

    let env = make_env(&cfg.env, &cfg.env_options)?;
    let text = program_text(&out.program, env.as_ref(), cfg.policy.max_depth);
    fs::write(dir.join("final.prog"), &text)?;
    write_json(
        &dir.join("extraction_report.json"),
        &json!({
            "steps": out.steps,
            "extraction": out.report,
            "final_gap": out.final_gap,
            "baseline_extraction": out.baseline_extraction,
            "aborted_epochs": out.aborted_epochs,
        }),
    )?;
    print!("{text}");
    println!(
        "relaxed {:.2}, program {:.2} (gap {:.2}); depth {}, normalized entropy {:.4}",
        out.final_gap.relaxed.mean,
        out.final_gap.extracted.mean,
        out.final_gap.gap,
        out.report.chosen_depth,
        out.report.normalized_entropy
    );
    Ok(())
}

/// Feature count implied by the `f<i>` names in a program text.
fn referenced_features(text: &str) -> usize {
    let mut max = 0;
    let bytes = text.as_bytes();
    for (i, _) in text.match_indices('f') {
        let boundary = i == 0 || !(bytes[i - 1].is_ascii_alphanumeric() || bytes[i - 1] == b'_');
        let digits: String = text[i + 1..].chars().take_while(|c| c.is_ascii_digit()).collect();
        if boundary && !digits.is_empty() {
            if let Ok(k) = digits.parse::<usize>() {
                max = max.max(k + 1);
            }
        }
    }
    max
}

fn run_dir_of(artifact: &Path) -> PathBuf {
    let parent = artifact.parent().unwrap_or(Path::new("."));
    if parent.file_name().is_some_and(|n| n == "checkpoints") {
        parent.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        parent.to_path_buf()
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let exec = if a.sequential { Execution::Sequential } else { Execution::Parallel };
    let (artifact, report) = if let Some(path) = &a.program {
        let Some(env_name) = &a.env else {
            bail!(Error::Config("--program needs --env".into()));
        };
        let env = make_eval_env(env_name, &EnvOptions::default())?;
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let dim = referenced_features(&text).max(env.feature_dim());
        let mut ctx = ProgramContext::new(dim, env.action_space(), PARSE_DEPTH_LIMIT);
        ctx.action_names = env.action_names();
        let program = DiscreteProgram::parse(&text, &ctx).with_context(|| format!("parsing {}", path.display()))?;
        let stats = evaluate_program(&program, env.as_ref(), a.episodes, a.seed, exec)?;
        println!("program: {:.2} ± {:.2} over {} episodes", stats.mean, stats.std, a.episodes);
        let report = json!({
            "artifact": path,
            "env": env_name,
            "episodes": a.episodes,
            "seed": a.seed,
            "program": stats,
        });
        (path.clone(), report)
    } else if let Some(path) = &a.checkpoint {
        let ck = load_checkpoint(path)?;
        let env_name = a.env.clone().unwrap_or_else(|| ck.config.env.clone());
        let env = make_eval_env(&env_name, &ck.config.env_options)?;
        let greedy = evaluate_relaxed(&ck.policy, env.as_ref(), a.episodes, a.seed, EvalMode::Greedy, exec)?;
        let sampled = evaluate_relaxed(&ck.policy, env.as_ref(), a.episodes, a.seed, EvalMode::Sampled, exec)?;
        let (program, _) = discretize(&ck.policy)?;
        let extracted = evaluate_program(&program, env.as_ref(), a.episodes, a.seed, exec)?;
        println!("relaxed greedy: {:.2} ± {:.2}", greedy.mean, greedy.std);
        println!("relaxed sampled: {:.2} ± {:.2}", sampled.mean, sampled.std);
        println!("extracted program: {:.2} ± {:.2}", extracted.mean, extracted.std);
        let report = json!({
            "artifact": path,
            "env": env_name,
            "episodes": a.episodes,
            "seed": a.seed,
            "greedy": greedy,
            "sampled": sampled,
            "program": extracted,
        });
        (path.clone(), report)
    } else {
        bail!(Error::Config("give --program or --checkpoint".into()));
    };
    let out = a.out.unwrap_or_else(|| run_dir_of(&artifact).join("eval.json"));
    write_json(&out, &report)
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (program, report) = discretize(&ck.policy)?;
    let env = make_env(&ck.config.env, &ck.config.env_options)?;
    let text = program_text(&program, env.as_ref(), ck.policy.max_depth());
    let dir = a.out_dir.unwrap_or_else(|| run_dir_of(&a.checkpoint));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("final.prog"), &text)?;
    write_json(&dir.join("extraction_report.json"), &json!({ "extraction": report }))?;
    print!("{text}");
    summarize_extraction(&report);
    Ok(())
}

fn summarize_extraction(r: &ExtractionReport) {
    println!(
        "depth {} (p_max {:.4}, deleted mass {:.4}, entropy {:.4}, bound chain {})",
        r.chosen_depth,
        r.p_max,
        r.mass_deleted,
        r.entropy,
        if r.bound_chain_holds(1e-12) { "holds" } else { "VIOLATED" }
    );
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let arch = ck.policy.depth_distribution();
    let probs: Vec<String> = arch.p.iter().map(|p| format!("{p:.4}")).collect();
    println!("env: {}  seed: {}  step: {}", ck.config.env, ck.config.seed, ck.step);
    println!("p_d: [{}]", probs.join(", "));
    println!("H: {:.6} (normalized {:.6})", arch.entropy, arch.normalized_entropy);
    println!("alpha: {:.6e}  target H: {:.6}", ck.dual.alpha(), ck.dual.target);
    println!("argmax depth: {}", arch.argmax_depth);
    if let Some(d) = ck.policy.frozen_depth() {
        println!("frozen depth: {d}");
    }
    Ok(())
}

fn cmd_verify_theory(a: VerifyArgs) -> Result<()> {
    if a.n_instances == 0 {
        eprintln!("warning: --n-instances 0 checks nothing; passing vacuously");
    }
    let suite = theory::run_suite(a.seed, a.n_instances)?;
    let text = serde_json::to_string_pretty(&suite.reports)? + "\n";
    match &a.out {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    eprintln!(
        "{} instances: max identity residual {:.3e}, max keep/del residual {:.3e}; {} simplexes, {} violations",
        a.n_instances,
        suite.max_identity_residual,
        suite.max_keep_del_residual,
        suite.simplex_checks,
        suite.simplex_violations
    );
    if suite.passed() {
        eprintln!("PASS");
        Ok(())
    } else {
        for f in &suite.failures {
            eprintln!("  {f}");
        }
        eprintln!("FAIL");
        Err(Error::Verification(format!("{} checks failed", suite.failures.len())).into())
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let checks = gradcheck::check_all(a.seed, a.cases)?;
    let mut ok = true;
    for c in &checks {
        let pass = c.max_rel_error < GRADCHECK_TOL;
        ok &= pass;
        println!(
            "{}: max relative error {:.3e} over {} cases ({} coordinates) {}",
            c.name,
            c.max_rel_error,
            c.cases,
            c.coordinates,
            if pass { "ok" } else { "FAIL" }
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Error::Verification(format!("gradient error above {GRADCHECK_TOL:e}")).into())
    }
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let path = a.run_dir.join("metrics.csv");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let rows = metrics::parse_csv(&text).with_context(|| format!("{} is not a metrics file", path.display()))?;
    if rows.is_empty() {
        bail!("{} has no data rows", path.display());
    }
    let cfg = fs::read_to_string(a.run_dir.join("config.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<TrainConfig>(&t).ok());
    let col = |f: fn(&MetricsRow) -> f64| rows.iter().map(|r| (r.step as f64, f(r))).collect::<Vec<_>>();
    let dir = a.run_dir.join("plots");
    fs::create_dir_all(&dir)?;

    let returns = plot::line_chart(
        "Evaluation return",
        "environment steps",
        "mean return",
        &[
            plot::Series {
                label: "relaxed (sampled)",
                color: "#1f77b4",
                points: col(|r| r.mean_return),
            },
            plot::Series {
                label: "extracted program",
                color: "#d62728",
                points: col(|r| r.eval_return_greedy),
            },
        ],
        &[],
    );
    fs::write(dir.join("return.svg"), returns)?;

    let entropy = plot::line_chart(
        "Architecture entropy",
        "environment steps",
        "H (nats)",
        &[plot::Series {
            label: "H",
            color: "#2ca02c",
            points: col(|r| r.arch_entropy),
        }],
        &[],
    );
    fs::write(dir.join("arch_entropy.svg"), entropy)?;

    let target = cfg.as_ref().map(|c| c.regularizer.target_fraction);
    let refs: Vec<plot::Reference<'_>> = target
        .iter()
        .map(|&y| plot::Reference { label: "target", y })
        .collect();
    let norm = plot::line_chart(
        "Normalized architecture entropy",
        "environment steps",
        "H / ln D",
        &[plot::Series {
            label: "H / ln D",
            color: "#9467bd",
            points: col(|r| r.norm_entropy),
        }],
        &refs,
    );
    fs::write(dir.join("norm_entropy.svg"), norm)?;
    println!("wrote 3 plots to {}", dir.display());
    Ok(())
}
