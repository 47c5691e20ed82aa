//! `lqpsf`: train, evaluate, certify and cost learnable QP safety filters.
//!
//! Exit codes: 0 success, 1 verification FAIL or runtime error, 2 bad
//! arguments or configuration, 3 verification inconclusive.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use lqpsf::certify::{self, FalsifyConfig, InnerSolver, Verdict};
use lqpsf::envs::Task;
use lqpsf::filters::{Checkpoint, FilterConfig, LqpFilter, LqpMode, MlpFilter, Passthrough, PsfFilter};
use lqpsf::harness::{self, count_flops, FlopsDescriptor};
use lqpsf::model::{resolve_system, BenchmarkSystem, Bound, SafeSet};
use lqpsf::qp::ridge_diag;
use lqpsf::rl::{self, FilterKind, Policy, TrainConfig};
use lqpsf::SafetyFilter;

const GIT_REV: &str = match option_env!("LQPSF_GIT_REV") {
    Some(r) => r,
    None => "unknown",
};

#[derive(Parser, Debug)]
#[command(name = "lqpsf", version, about = "Learnable QP safety filters")]
struct Cli {
    /// JSON document overriding defaults; see `RunConfig` for its sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Train a filter with PPO and write its checkpoint.
    Train(TrainArgs),
    /// Evaluate a filter over a sweep of noise levels.
    Eval(EvalArgs),
    /// Search for one-step safety counterexamples of a learned filter.
    Verify(VerifyArgs),
    /// Write the semidefinite relaxation of the safety certificate.
    ExportSdp(ExportArgs),
    /// Count floating-point operations per control step.
    Flops(FlopsArgs),
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long, default_value = "double_integrator")]
    system: String,
    #[arg(long, value_enum, default_value_t = KindArg::Lqp)]
    filter: KindArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "train_out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long, default_value = "double_integrator")]
    system: String,
    /// passthrough, psf, or a checkpoint path.
    #[arg(long, default_value = "passthrough")]
    filter: String,
    /// Comma-separated noise levels; defaults to the system's sweep.
    #[arg(long, value_delimiter = ',')]
    noise: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run a learned QP filter to convergence instead of its fixed depth.
    #[arg(long)]
    converged: bool,
    /// Also write one CSV per episode under `trajectories/`.
    #[arg(long)]
    trajectories: bool,
    #[arg(long, default_value = "eval_out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct VerifyArgs {
    #[arg(long, default_value = "double_integrator")]
    system: String,
    #[arg(long)]
    checkpoint: PathBuf,
    /// `{"G": rows, "c": vector}`; defaults to the system's state box.
    #[arg(long)]
    safe_set: Option<PathBuf>,
    /// JSON list of `[lo, hi]` reference bounds; defaults to the input box.
    #[arg(long)]
    u_box: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    /// Also sweep a regular grid with this spacing.
    #[arg(long)]
    grid: Option<f64>,
    #[arg(long, default_value = "verify_out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ExportArgs {
    #[arg(long, default_value = "double_integrator")]
    system: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    safe_set: Option<PathBuf>,
    #[arg(long)]
    u_box: Option<PathBuf>,
    #[arg(long, default_value = "certificate.dat-s")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct FlopsArgs {
    #[arg(long, default_value = "double_integrator")]
    system: String,
    /// Checkpoint to cost; without it the default LQP, MLP and baseline
    /// filters are listed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "flops_out")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum KindArg {
    Lqp,
    Mlp,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum TaskArg {
    Stabilization,
    Tracking,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum SolverArg {
    ActiveSet,
    Pdhg,
}

/// Defaults for every subcommand; `--config` replaces any subset.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    train: TrainConfig,
    eval: EvalConfig,
    verify: FalsifyConfig,
    /// Filter settings for the baseline and for certifying checkpoints.
    filter: FilterConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    task: Task,
    episodes: usize,
    base_seed: u64,
    noise_levels: Option<Vec<f64>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            task: Task::Stabilization,
            episodes: harness::DEFAULT_EPISODES,
            base_seed: 0,
            noise_levels: None,
        }
    }
}

/// Configuration problems, reported with exit code 2.
#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err<T, E: Into<anyhow::Error>>(r: Result<T, E>) -> anyhow::Result<T> {
    r.map_err(|e| ConfigError(e.into()).into())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a Command,
    config: &'a RunConfig,
    version: &'static str,
    git_rev: &'static str,
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_manifest(dir: &Path, command: &Command, config: &RunConfig) -> anyhow::Result<()> {
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            command,
            config,
            version: env!("CARGO_PKG_VERSION"),
            git_rev: GIT_REV,
        },
    )
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    cfg.train.validate()?;
    cfg.filter.validate()?;
    Ok(cfg)
}

fn load_system(name: &str) -> anyhow::Result<BenchmarkSystem> {
    config_err(resolve_system(name).with_context(|| format!("loading system '{name}'")))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    config_err(Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display())))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> anyhow::Result<T> {
    config_err(
        (|| -> anyhow::Result<T> {
            let text = fs::read_to_string(path)?;
            Ok(serde_json::from_str(&text)?)
        })()
        .with_context(|| format!("loading {what} {}", path.display())),
    )
}

fn mkdir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn train_cmd(args: &TrainArgs, mut cfg: RunConfig, cmd: &Command) -> anyhow::Result<ExitCode> {
    let system = load_system(&args.system)?;
    cfg.train.kind = match args.filter {
        KindArg::Lqp => FilterKind::Lqp,
        KindArg::Mlp => FilterKind::Mlp,
    };
    config_err(cfg.train.validate())?;
    mkdir(&args.out_dir)?;
    let log_path = args.out_dir.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let outcome = rl::train(
        &system,
        &cfg.train,
        args.seed,
        Some(&mut log as &mut dyn std::io::Write),
    )?;
    let ck = outcome.checkpoint(&system, args.seed, &cfg.train, GIT_REV)?;
    ck.save(args.out_dir.join("checkpoint.json"))?;
    write_manifest(&args.out_dir, cmd, &cfg)?;
    println!(
        "best update {} (score {:.4}); checkpoint written to {}",
        outcome.best_update,
        outcome.best_score,
        args.out_dir.join("checkpoint.json").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval_filter(
    which: &str,
    system: &BenchmarkSystem,
    cfg: &RunConfig,
    converged: bool,
) -> anyhow::Result<Box<dyn SafetyFilter>> {
    Ok(match which {
        "passthrough" => Box::new(Passthrough),
        "psf" => Box::new(PsfFilter {
            model: system.model.clone(),
            spec: system.spec.clone(),
            cfg: cfg.filter,
        }),
        path => match Policy::from_checkpoint(&load_checkpoint(Path::new(path))?)? {
            Policy::Lqp { params, cfg: fc } => {
                let mode = if converged {
                    LqpMode::Converged {
                        tol: cfg.filter.deploy_tol,
                        max_iter: cfg.filter.deploy_max_iter,
                    }
                } else {
                    LqpMode::Unrolled
                };
                Box::new(LqpFilter::new(params, &fc, mode)?)
            }
            Policy::Mlp(m) => Box::new(MlpFilter(m)),
        },
    })
}

fn eval_cmd(args: &EvalArgs, mut cfg: RunConfig, cmd: &Command) -> anyhow::Result<ExitCode> {
    let system = load_system(&args.system)?;
    if let Some(t) = args.task {
        cfg.eval.task = match t {
            TaskArg::Stabilization => Task::Stabilization,
            TaskArg::Tracking => Task::Tracking,
        };
    }
    if let Some(e) = args.episodes {
        cfg.eval.episodes = e;
    }
    if let Some(s) = args.seed {
        cfg.eval.base_seed = s;
    }
    if args.noise.is_some() {
        cfg.eval.noise_levels.clone_from(&args.noise);
    }
    let levels = cfg
        .eval
        .noise_levels
        .clone()
        .unwrap_or_else(|| harness::default_noise_grid(&system).to_vec());
    let filter = eval_filter(&args.filter, &system, &cfg, args.converged)?;
    mkdir(&args.out_dir)?;
    if args.trajectories {
        mkdir(&args.out_dir.join("trajectories"))?;
    }
    let mut reports = Vec::with_capacity(levels.len());
    for &n in &levels {
        info!("evaluating {} at n = {n}", filter.name());
        let ctrl = cfg.eval.task.controller(&system, n)?;
        let trajs = harness::run_episodes(&system, &ctrl, filter.as_ref(), cfg.eval.episodes, cfg.eval.base_seed)?;
        if args.trajectories {
            for (i, t) in trajs.iter().enumerate() {
                fs::write(
                    args.out_dir.join("trajectories").join(format!("n{n}_ep{i:03}.csv")),
                    t.to_csv(),
                )?;
            }
        }
        reports.push(harness::summarize(
            &system,
            cfg.eval.task,
            &ctrl,
            n,
            filter.name(),
            &trajs,
            cfg.eval.base_seed,
        ));
    }
    let (csv, text) = harness::emit_table(&reports);
    fs::write(args.out_dir.join("eval.csv"), &csv)?;
    fs::write(args.out_dir.join("eval.txt"), &text)?;
    write_json(&args.out_dir.join("eval.json"), &reports)?;
    write_manifest(&args.out_dir, cmd, &cfg)?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

struct CertifyInputs {
    system: BenchmarkSystem,
    params: lqpsf::LqpParams,
    filter: FilterConfig,
    safe_set: SafeSet,
    u_box: Vec<Bound>,
}

fn certify_inputs(
    system: &str,
    checkpoint: &Path,
    safe_set: Option<&Path>,
    u_box: Option<&Path>,
) -> anyhow::Result<CertifyInputs> {
    let system = load_system(system)?;
    let Checkpoint::Lqp(ck) = load_checkpoint(checkpoint)? else {
        return Err(ConfigError(anyhow::anyhow!("only learned QP filters can be certified")).into());
    };
    let params = config_err(ck.params())?;
    let safe_set = match safe_set {
        Some(p) => load_json(p, "safe set")?,
        None => config_err(system.state_box_set())?,
    };
    let u_box = match u_box {
        Some(p) => load_json(p, "reference box")?,
        None => system.input_bounds.clone(),
    };
    Ok(CertifyInputs {
        filter: ck.filter_config(),
        system,
        params,
        safe_set,
        u_box,
    })
}

#[derive(Serialize)]
struct VerifyOutput {
    samples: certify::FalsificationResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<certify::FalsificationResult>,
}

fn verify_cmd(args: &VerifyArgs, mut cfg: RunConfig, cmd: &Command) -> anyhow::Result<ExitCode> {
    let inp = certify_inputs(
        &args.system,
        &args.checkpoint,
        args.safe_set.as_deref(),
        args.u_box.as_deref(),
    )?;
    if let Some(n) = args.samples {
        cfg.verify.n_samples = n;
    }
    if let Some(s) = args.seed {
        cfg.verify.seed = s;
    }
    if let Some(s) = args.solver {
        cfg.verify.solver = match s {
            SolverArg::ActiveSet => InnerSolver::ActiveSet,
            SolverArg::Pdhg => InnerSolver::Pdhg,
        };
    }
    // the stored iteration settings govern the filter being certified
    cfg.verify.filter = FilterConfig {
        deploy_tol: cfg.verify.filter.deploy_tol,
        deploy_max_iter: cfg.verify.filter.deploy_max_iter,
        ..inp.filter
    };
    let samples = config_err(certify::sample_falsify(
        &inp.system.model,
        &inp.safe_set,
        &inp.params,
        &inp.u_box,
        &cfg.verify,
    ))?;
    let grid = args
        .grid
        .map(|step| {
            certify::grid_falsify(
                &inp.system.model,
                &inp.safe_set,
                &inp.params,
                &inp.u_box,
                step,
                &cfg.verify,
            )
        })
        .transpose()?;
    mkdir(&args.out_dir)?;
    let out = VerifyOutput { samples, grid };
    write_json(&args.out_dir.join("verify.json"), &out)?;
    write_manifest(&args.out_dir, cmd, &cfg)?;

    let results: Vec<&certify::FalsificationResult> = std::iter::once(&out.samples).chain(out.grid.as_ref()).collect();
    let verdict = if results.iter().any(|r| r.verdict == Verdict::Fail) {
        Verdict::Fail
    } else if results.iter().all(|r| r.verdict == Verdict::Pass) {
        Verdict::Pass
    } else {
        Verdict::Inconclusive
    };
    let evaluated: usize = results.iter().map(|r| r.samples_evaluated).sum();
    let kkt = results.iter().map(|r| r.kkt_max_residual).fold(0.0, f64::max);
    match verdict {
        Verdict::Pass => {
            println!("PASS: no counterexample over {evaluated} samples, max KKT residual {kkt:.3e}");
            Ok(ExitCode::SUCCESS)
        }
        Verdict::Fail => {
            let worst = results
                .iter()
                .filter(|r| r.verdict == Verdict::Fail)
                .max_by(|a, b| a.worst_violation.total_cmp(&b.worst_violation))
                .expect("a failing result");
            println!("FAIL: worst one-step violation {:.6e}", worst.worst_violation);
            println!("{}", serde_json::to_string(&worst.witness)?);
            Ok(ExitCode::from(1))
        }
        Verdict::Inconclusive => {
            let invalid: usize = results.iter().map(|r| r.invalid_samples).sum();
            println!("INCONCLUSIVE: {invalid} of {evaluated} samples failed the KKT check");
            Ok(ExitCode::from(3))
        }
    }
}

fn export_cmd(args: &ExportArgs) -> anyhow::Result<ExitCode> {
    let inp = certify_inputs(
        &args.system,
        &args.checkpoint,
        args.safe_set.as_deref(),
        args.u_box.as_deref(),
    )?;
    let p_diag = ridge_diag(inp.params.m_sys(), inp.params.n_qp(), inp.filter.eps);
    let problem = config_err(certify::assemble_qcqp(
        &inp.system.model,
        &inp.safe_set,
        &inp.params,
        &p_diag,
        &inp.u_box,
    ))?;
    let sdp = certify::shor_relaxation(&problem);
    certify::export_sdpa(&sdp, &args.out)?;
    println!(
        "wrote {} ({} constraints, moment matrix {}x{})",
        args.out.display(),
        sdp.num_constraints(),
        sdp.moment_dim,
        sdp.moment_dim
    );
    Ok(ExitCode::SUCCESS)
}

fn flops_cmd(args: &FlopsArgs, cfg: RunConfig, cmd: &Command) -> anyhow::Result<ExitCode> {
    let system = load_system(&args.system)?;
    let descriptors = match &args.checkpoint {
        Some(p) => vec![match load_checkpoint(p)? {
            Checkpoint::Lqp(c) => FlopsDescriptor::lqp(&config_err(c.params())?, &c.filter_config()),
            Checkpoint::Mlp(c) => FlopsDescriptor::mlp(&config_err(c.policy())?),
        }],
        None => vec![
            FlopsDescriptor::default_lqp(&system),
            FlopsDescriptor::default_mlp(&system),
            FlopsDescriptor::psf(&system, cfg.filter.horizon),
        ],
    };
    let reports: Vec<_> = descriptors.iter().map(count_flops).collect();
    mkdir(&args.out_dir)?;
    write_json(&args.out_dir.join("flops.json"), &reports)?;
    write_manifest(&args.out_dir, cmd, &cfg)?;
    for r in &reports {
        let phases: Vec<String> = r.phases.iter().map(|p| format!("{} {}", p.name, p.flops)).collect();
        println!("{:<6} {:>12}  ({})", r.filter, r.total, phases.join(", "));
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    let cfg = config_err(load_config(cli.config.as_deref()))?;
    match &cli.command {
        Command::Train(a) => train_cmd(a, cfg, &cli.command),
        Command::Eval(a) => eval_cmd(a, cfg, &cli.command),
        Command::Verify(a) => verify_cmd(a, cfg, &cli.command),
        Command::ExportSdp(a) => export_cmd(a),
        Command::Flops(a) => flops_cmd(a, cfg, &cli.command),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) if e.is::<ConfigError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
