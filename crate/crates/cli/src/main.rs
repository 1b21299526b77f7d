//! `j6`: generate instances, run strategies, check gradients, compare and sweep.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
//! 3 numeric abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use j6::check::{check_gradient_set, GradCheck, BLOCKS, GRADCHECK_TOL};
use j6::generate::VStarRule;
use j6::io::{self, InstanceMeta, RunSummary, SweepRow};
use j6::model::DEFAULT_FD_EPS;
use j6::optimizer::init_perturbations;
use j6::strategy::PreNorm;
use j6::{
    compute_gradient_set, generate, Alignment, AlignmentMode, Family, GeneratorSpec, ModelError,
    ProblemInstance, RunConfig, RunError, RunResult, Scale, StrategyConfig, StrategyKind, WMode,
};

#[derive(Debug)]
enum Failure {
    Check(String),
    Usage(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Usage(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::NonFinite { .. } | RunError::Model(ModelError::NonFinite(_)) => {
                Failure::Numeric(e.to_string())
            }
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<io::IoError> for Failure {
    fn from(e: io::IoError) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(
    name = "j6",
    version,
    about = "Attribution-routed two-objective optimizer for a bilinear logit model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded problem instance.
    Gen(GenArgs),
    /// Optimize one instance with one strategy.
    Run(RunCmd),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Run several strategies from the same initialization.
    Compare(CompareArgs),
    /// Run one strategy over a list of values of one parameter.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value = "gaussian")]
    family: Family,
    /// Vocabulary size.
    #[arg(long = "V", default_value_t = 6)]
    vocab: usize,
    /// Hidden dimension.
    #[arg(long = "d", default_value_t = 4)]
    dim: usize,
    /// Number of positions.
    #[arg(long = "T", default_value_t = 1)]
    positions: usize,
    #[arg(long, env = "J6_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "full-matrix")]
    w_mode: WMode,
    /// Row perturbed in single-row mode; defaults to the last target.
    #[arg(long)]
    v_star: Option<usize>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct StrategyArgs {
    /// Softmax temperature.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Contrast exponent.
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.05)]
    eta_h: f64,
    #[arg(long, default_value_t = 0.05)]
    eta_w: f64,
    /// Auxiliary-group scale for the J+ prioritize actions.
    #[arg(long, default_value_t = 0.5)]
    beta_aux: f64,
    /// Scalarization weights `a,b` for (Heat, Confidence).
    #[arg(long, default_value = "0.5,0.5")]
    lambda: String,
    /// Score pre-normalization before the soft weighting: none or max-abs.
    #[arg(long, default_value = "none")]
    pre_norm: String,
}

impl StrategyArgs {
    fn config(&self, kind: StrategyKind) -> Result<StrategyConfig, Failure> {
        let lambda = parse_list(&self.lambda, "lambda")?;
        let [l1, l2] = lambda[..] else {
            return Err(Failure::Usage(format!(
                "lambda needs exactly two values, got {}",
                lambda.len()
            )));
        };
        let pre_norm: PreNorm = self
            .pre_norm
            .parse()
            .map_err(|e: j6::strategy::ConfigError| Failure::Usage(e.to_string()))?;
        let cfg = StrategyConfig {
            kind,
            tau: self.tau,
            gamma: self.gamma,
            eta_h: self.eta_h,
            eta_w: self.eta_w,
            beta_aux: self.beta_aux,
            lambda: (l1, l2),
            pre_norm,
        };
        cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AlignmentArg {
    Direct,
    Pushforward,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScaleArg {
    Raw,
    Cosine,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 1e-8)]
    grad_tol: f64,
    /// Zero disables the loss-change stop.
    #[arg(long, default_value_t = 0.0)]
    loss_tol: f64,
    #[arg(long, env = "J6_SEED", default_value_t = 0)]
    seed: u64,
    /// Perturbations start uniform in [-s, s].
    #[arg(long, default_value_t = 0.0)]
    init_scale: f64,
    /// Defaults to pushforward for full-matrix instances, direct otherwise.
    #[arg(long, value_enum)]
    alignment: Option<AlignmentArg>,
    /// Defaults to raw.
    #[arg(long, value_enum)]
    scale: Option<ScaleArg>,
}

impl RunArgs {
    fn config(&self, instance: &ProblemInstance) -> Result<RunConfig, Failure> {
        if !(self.grad_tol >= 0.0 && self.loss_tol >= 0.0 && self.init_scale >= 0.0) {
            return Err(Failure::Usage(
                "grad-tol, loss-tol and init-scale must be non-negative".into(),
            ));
        }
        let base = AlignmentMode::default_for(instance.w_mode());
        let alignment = match (self.alignment, self.scale) {
            (None, None) => None,
            (a, s) => Some(AlignmentMode::new(
                a.map_or(base.alignment, |a| match a {
                    AlignmentArg::Direct => Alignment::Direct,
                    AlignmentArg::Pushforward => Alignment::Pushforward,
                }),
                s.map_or(base.scale, |s| match s {
                    ScaleArg::Raw => Scale::Raw,
                    ScaleArg::Cosine => Scale::Cosine,
                }),
            )),
        };
        let rcfg = RunConfig {
            max_steps: self.steps,
            grad_tol: self.grad_tol,
            loss_tol: self.loss_tol,
            seed: self.seed,
            init_scale: self.init_scale,
            alignment,
        };
        j6::optimizer::resolve_alignment(instance, &rcfg)?;
        Ok(rcfg)
    }
}

#[derive(Args, Debug)]
struct RunCmd {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long, default_value = "hard-j6")]
    strategy: String,
    #[command(flatten)]
    strategy_args: StrategyArgs,
    #[command(flatten)]
    run_args: RunArgs,
    /// Per-step trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Instance to check; without it a built-in seeded set is used.
    #[arg(short, long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_FD_EPS)]
    eps: f64,
    #[arg(long, env = "J6_SEED", default_value_t = 0)]
    seed: u64,
    /// Perturbations are drawn uniform in [-s, s] before checking.
    #[arg(long, default_value_t = 0.25)]
    init_scale: f64,
    /// Adds an error to one analytic coordinate; negative control for tests.
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(short, long)]
    input: PathBuf,
    /// Comma-separated strategy names.
    #[arg(
        long,
        default_value = "hard-j6,hard-jplus,soft,static,scalarized,grad-surgery"
    )]
    strategies: String,
    #[command(flatten)]
    strategy_args: StrategyArgs,
    #[command(flatten)]
    run_args: RunArgs,
    /// Summary JSON.
    #[arg(short, long)]
    output: PathBuf,
    /// Run strategies on the rayon thread pool.
    #[arg(long)]
    parallel: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepParam {
    Tau,
    Gamma,
    #[value(name = "eta_h")]
    EtaH,
    #[value(name = "eta_w")]
    EtaW,
    #[value(name = "beta_aux")]
    BetaAux,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::Gamma => "gamma",
            SweepParam::EtaH => "eta_h",
            SweepParam::EtaW => "eta_w",
            SweepParam::BetaAux => "beta_aux",
        }
    }

    fn apply(self, cfg: &mut StrategyConfig, value: f64) {
        match self {
            SweepParam::Tau => cfg.tau = value,
            SweepParam::Gamma => cfg.gamma = value,
            SweepParam::EtaH => cfg.eta_h = value,
            SweepParam::EtaW => cfg.eta_w = value,
            SweepParam::BetaAux => cfg.beta_aux = value,
        }
    }
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long, default_value = "soft")]
    strategy: String,
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Comma-separated numeric values.
    #[arg(long)]
    values: String,
    #[command(flatten)]
    strategy_args: StrategyArgs,
    #[command(flatten)]
    run_args: RunArgs,
    /// Sweep table CSV.
    #[arg(short, long)]
    output: PathBuf,
    /// Run values on the rayon thread pool.
    #[arg(long)]
    parallel: bool,
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>, Failure> {
    let items: Vec<&str> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err(Failure::Usage(format!("{what} list is empty")));
    }
    items
        .iter()
        .map(|s| match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Failure::Usage(format!(
                "{what}: `{s}` is not a finite number"
            ))),
        })
        .collect()
}

fn parse_strategy(name: &str) -> Result<StrategyKind, Failure> {
    name.trim()
        .parse()
        .map_err(|e: j6::strategy::ConfigError| Failure::Usage(e.to_string()))
}

fn load(path: &Path) -> Result<ProblemInstance, Failure> {
    Ok(io::load_instance(path)?.0)
}

/// Maps over `items` serially or on the rayon pool; output order is input order.
fn map_runs<T: Sync, R: Send>(
    items: &[T],
    parallel: bool,
    f: impl Fn(&T) -> Result<R, RunError> + Sync + Send,
) -> Result<Vec<R>, Failure> {
    let out: Result<Vec<R>, RunError> = if parallel {
        items.par_iter().map(&f).collect()
    } else {
        items.iter().map(&f).collect()
    };
    Ok(out?)
}

fn print_result(label: &str, r: &RunResult) {
    println!(
        "{label}: ob1 = {:?}, ob2 = {:?}, stop_reason = {}, steps = {}",
        r.objectives.ob1,
        r.objectives.ob2,
        r.stop_reason.as_str(),
        r.trace.len()
    );
}

fn cmd_gen(a: &GenArgs) -> Outcome {
    let mut spec =
        GeneratorSpec::new(a.family, a.vocab, a.dim, a.positions, a.seed).with_w_mode(a.w_mode);
    if let Some(v) = a.v_star {
        spec.v_star = VStarRule::Fixed(v);
    }
    let g = generate(&spec).map_err(|e| match e {
        j6::generate::GenError::Exhausted { .. } => Failure::Check(e.to_string()),
        _ => Failure::Usage(e.to_string()),
    })?;
    io::save_instance(&g.instance, &InstanceMeta::from(&g), &a.output)?;
    println!("wrote {}", a.output.display());
    match g.certificate {
        Some(c) => println!("certificate: {c} after {} attempts", g.attempts),
        None => println!("certificate: none ({} family)", a.family),
    }
    Ok(())
}

fn cmd_run(a: &RunCmd) -> Outcome {
    let instance = load(&a.input)?;
    let cfg = a.strategy_args.config(parse_strategy(&a.strategy)?)?;
    let rcfg = a.run_args.config(&instance)?;
    let result = j6::run(&instance, &cfg, &rcfg)?;
    if let Some(path) = &a.trace {
        io::write_trace(&result, path)?;
    }
    println!("final ob1 = {:?}", result.objectives.ob1);
    println!("final ob2 = {:?}", result.objectives.ob2);
    println!("stop_reason = {}", result.stop_reason.as_str());
    println!("steps = {}", result.trace.len());
    Ok(())
}

fn default_check_set() -> Vec<ProblemInstance> {
    (0..20u64)
        .map(|seed| {
            let mode = if seed % 2 == 0 {
                WMode::SingleRow
            } else {
                WMode::FullMatrix
            };
            let spec = GeneratorSpec::new(Family::Gaussian, 6, 4, 2, seed).with_w_mode(mode);
            generate(&spec).expect("valid built-in spec").instance
        })
        .collect()
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Outcome {
    if !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(Failure::Usage(format!(
            "eps must be positive, got {}",
            a.eps
        )));
    }
    if a.init_scale.is_nan() || a.init_scale < 0.0 {
        return Err(Failure::Usage("init-scale must be non-negative".into()));
    }
    let instances = match &a.input {
        Some(path) => vec![load(path)?],
        None => default_check_set(),
    };
    let mut per_block = [0.0f64; 4];
    let mut worst: Option<(usize, GradCheck)> = None;
    for (i, inst) in instances.iter().enumerate() {
        let pert = init_perturbations(inst, a.init_scale, a.seed.wrapping_add(i as u64));
        let numeric = |e: ModelError| Failure::Numeric(e.to_string());
        let mut gs = compute_gradient_set(inst, &pert).map_err(numeric)?;
        if a.corrupt {
            gs.j11[0] += 1.0;
        }
        let report = check_gradient_set(&gs, inst, &pert, a.eps).map_err(numeric)?;
        for (acc, b) in per_block.iter_mut().zip(&report.blocks) {
            *acc = acc.max(b.rel_err);
        }
        if worst
            .as_ref()
            .is_none_or(|(_, w)| report.max_rel_err() > w.max_rel_err())
        {
            worst = Some((i, report));
        }
    }
    println!("instances = {}, eps = {:e}", instances.len(), a.eps);
    for ((_, _, label), err) in BLOCKS.iter().zip(per_block) {
        println!("{label} max_rel_err = {err:e}");
    }
    let overall = per_block.iter().copied().fold(0.0, f64::max);
    println!("max_rel_err = {overall:e}");
    if overall < GRADCHECK_TOL {
        println!("PASS (tolerance {GRADCHECK_TOL:e})");
        return Ok(());
    }
    let (i, report) = worst.expect("at least one instance");
    let b = report.worst_block();
    let detail = match b.worst {
        Some(k) => format!(
            "instance {i}, block {}, coordinate {k}: analytic {:?}, finite difference {:?}",
            b.label, b.analytic[k], b.fd[k]
        ),
        None => format!("instance {i}, block {} is empty", b.label),
    };
    Err(Failure::Check(format!(
        "gradient check failed (tolerance {GRADCHECK_TOL:e}); worst at {detail}"
    )))
}

fn cmd_compare(a: &CompareArgs) -> Outcome {
    let kinds = a
        .strategies
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(parse_strategy)
        .collect::<Result<Vec<_>, _>>()?;
    if kinds.is_empty() {
        return Err(Failure::Usage("strategies list is empty".into()));
    }
    let instance = load(&a.input)?;
    let configs = kinds
        .iter()
        .map(|&k| a.strategy_args.config(k))
        .collect::<Result<Vec<_>, _>>()?;
    let rcfg = a.run_args.config(&instance)?;
    let results = map_runs(&configs, a.parallel, |cfg| j6::run(&instance, cfg, &rcfg))?;
    for r in &results {
        print_result(r.strategy.name(), r);
    }
    let runs = results
        .iter()
        .map(|r| RunSummary::new(r.strategy.name(), r))
        .collect();
    io::write_summary(runs, &a.output)?;
    println!("wrote {}", a.output.display());
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Outcome {
    let values = parse_list(&a.values, "values")?;
    let kind = parse_strategy(&a.strategy)?;
    let instance = load(&a.input)?;
    let base = a.strategy_args.config(kind)?;
    let configs = values
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            a.param.apply(&mut cfg, v);
            cfg.validate()
                .map(|()| cfg)
                .map_err(|e| Failure::Usage(format!("{} = {v}: {e}", a.param.name())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let rcfg = a.run_args.config(&instance)?;
    let results = map_runs(&configs, a.parallel, |cfg| j6::run(&instance, cfg, &rcfg))?;
    let rows: Vec<SweepRow> = values
        .iter()
        .zip(&results)
        .map(|(&v, r)| {
            print_result(&format!("{} = {v:?}", a.param.name()), r);
            SweepRow::new(v, r)
        })
        .collect();
    io::write_sweep(a.param.name(), &rows, &a.output)?;
    println!("wrote {}", a.output.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
