use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use softnewton::harness::{
    bounds_report, generate, run_experiment, save_vector, verify, Emit, ExperimentSpec, GenOptions, ReferenceSpec,
    X0Spec,
};
use softnewton::newton::{NewtonConfig, SolveMode};
use softnewton::{ActivationKind, Error, ProblemInstance};

/// Two-layer softmax regression: instance generation, Newton solves and
/// verification of the derivative and bound machinery.
#[derive(Parser)]
#[command(name = "softnewton", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random instance with a planted point.
    Gen(GenArgs),
    /// Run the Newton solver on an instance.
    Run(RunArgs),
    /// Run the verification suites; exit 1 if any fails.
    Verify(VerifyArgs),
    /// Print analytic bounds and their measured counterparts.
    Bounds(BoundsArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value = "tanh")]
    activation: ActivationKind,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1.5)]
    r_target: f64,
    /// Condition number of A1 (plain Gaussian when omitted).
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    plant_norm: f64,
    #[arg(long, default_value_t = 1.0)]
    l_target: f64,
    #[arg(long, default_value_t = 0.05)]
    beta: f64,
    /// Comma-separated weights replacing the default recipe.
    #[arg(long, value_delimiter = ',')]
    w: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the planted point as a JSON array.
    #[arg(long)]
    plant_out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment spec (JSON). The flags below are ignored when given.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, required_unless_present = "spec")]
    instance: Option<PathBuf>,
    #[arg(long, required_unless_present = "spec")]
    output_dir: Option<PathBuf>,
    /// `zero`, `gaussian:<scale>`, or a path to a JSON array.
    #[arg(long, default_value = "zero")]
    x0: String,
    /// `auto`, `none`, or a path to a JSON array.
    #[arg(long, default_value = "auto")]
    reference: String,
    #[arg(long, default_value = "exact")]
    mode: String,
    #[arg(long, default_value_t = 1e-10)]
    eps: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 0.01)]
    eps0: f64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-10)]
    grad_tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    strict: bool,
    /// Any of `report_json`, `trace_csv`, `bounds_json`.
    #[arg(long, value_delimiter = ',', default_value = "report_json")]
    emit: Vec<String>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print a plain-text table instead of JSON.
    #[arg(long)]
    table: bool,
}

fn error_json(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{text}") {
                // a closed pipe (e.g. `| head`) is not an error
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Config(format!("stdout: {e}"))),
                _ => Ok(()),
            }
        }
    }
}

fn parse_vector_rule(value: &str) -> Result<X0Spec, Error> {
    if value == "zero" {
        return Ok(X0Spec::Zero);
    }
    if let Some(scale) = value.strip_prefix("gaussian:") {
        let scale = scale
            .parse()
            .map_err(|_| Error::Config(format!("bad gaussian scale in `{value}`")))?;
        return Ok(X0Spec::Gaussian { scale });
    }
    Ok(X0Spec::Stored { path: value.into() })
}

fn spec_from_flags(a: &RunArgs) -> Result<ExperimentSpec, Error> {
    let mode = match a.mode.as_str() {
        "exact" => SolveMode::Exact,
        "sketched" => SolveMode::Sketched,
        other => return Err(Error::Config(format!("unknown mode `{other}`"))),
    };
    let emit = a
        .emit
        .iter()
        .map(|e| match e.as_str() {
            "report_json" => Ok(Emit::ReportJson),
            "trace_csv" => Ok(Emit::TraceCsv),
            "bounds_json" => Ok(Emit::BoundsJson),
            other => Err(Error::Config(format!("unknown artifact `{other}`"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let reference = match a.reference.as_str() {
        "auto" => ReferenceSpec::Auto,
        "none" => ReferenceSpec::None,
        path => ReferenceSpec::Stored { path: path.into() },
    };
    Ok(ExperimentSpec {
        instance_path: a.instance.clone().expect("required by clap"),
        x0: parse_vector_rule(&a.x0)?,
        config: NewtonConfig {
            mode,
            eps: a.eps,
            delta: a.delta,
            eps0: a.eps0,
            max_iters: a.max_iters,
            grad_tol: a.grad_tol,
            seed: a.seed,
            strict: a.strict,
            ..NewtonConfig::default()
        },
        output_dir: a.output_dir.clone().expect("required by clap"),
        emit,
        reference,
        lipschitz_pairs: 20,
    })
}

fn cmd_gen(a: GenArgs) -> Result<u8, Error> {
    let opts = GenOptions {
        r_target: a.r_target,
        kappa: a.kappa,
        noise: a.noise,
        plant_norm: a.plant_norm,
        l_target: a.l_target,
        w: a.w,
        beta: a.beta,
        ..GenOptions::new(a.n, a.m, a.d, a.activation, a.seed)
    };
    let g = generate(&opts)?;
    g.instance.save(&a.out)?;
    if let Some(p) = &a.plant_out {
        save_vector(p, &g.x_plant)?;
    }
    eprintln!("wrote {} (seed {})", a.out.display(), a.seed);
    Ok(0)
}

fn cmd_run(a: RunArgs) -> Result<u8, Error> {
    let spec = match &a.spec {
        Some(p) => ExperimentSpec::load(p)?,
        None => spec_from_flags(&a)?,
    };
    let outcome = run_experiment(&spec)?;
    let g = &outcome.report.golden;
    let summary = serde_json::json!({
        "status": g.status,
        "iterations": g.iterations,
        "seed": g.seed,
        "final_grad_norm": outcome.report.final_grad_norm(),
        "written": outcome.written,
    });
    println!("{summary}");
    Ok(outcome.exit_code as u8)
}

fn cmd_verify(a: VerifyArgs) -> Result<u8, Error> {
    let inst = ProblemInstance::load(&a.instance)?;
    let report = verify(&inst, a.seed, a.trials, None)?;
    write_or_print(a.out.as_deref(), &serde_json::to_string_pretty(&report)?)?;
    if !report.passed {
        eprintln!("failed: {}", report.failed_suites.join(", "));
    }
    Ok(if report.passed { 0 } else { 1 })
}

fn cmd_bounds(a: BoundsArgs) -> Result<u8, Error> {
    let inst = ProblemInstance::load(&a.instance)?;
    let report = bounds_report(&inst, a.points, a.seed)?;
    let text = if a.table {
        report.table()
    } else {
        serde_json::to_string_pretty(&report)?
    };
    write_or_print(a.out.as_deref(), &text)?;
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bounds(a) => cmd_bounds(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            println!("{}", error_json(&e));
            ExitCode::from(3)
        }
    }
}
