//! Instance generation, experiment runs and the verification suite behind
//! the `softnewton` command-line tool.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{Activation, ActivationKind};
use crate::bounds::{probe_empirical, BoundReport};
use crate::derivatives::grad_tot;
use crate::error::{Error, Result};
use crate::hessian::{curvature_kernel, entry_terms, factored_hessian, hess_tot};
use crate::linalg::{relative_frobenius, relative_l2, sigma_min, spectral_norm};
use crate::model::{eval_forward, ProblemInstance, DEFAULT_BETA, SCHEMA_VERSION};
use crate::newton::{
    ball_point, basin_certificate, empirical_hessian_lipschitz, reference_optimum, solve, strong_convexity_at,
    NewtonConfig, RunReport, RunStatus,
};
use crate::oracle::{fd_gradient, fd_hessian, FdConfig};
use crate::sketch::{subsample, verify_sandwich};

/// Environment variable holding the worker count for `verify`.
pub const THREADS_ENV: &str = "SOFTNEWTON_THREADS";

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| StandardNormal.sample(rng))
}

fn rescale(a: DMatrix<f64>, target: f64) -> DMatrix<f64> {
    let norm = spectral_norm(&a);
    if norm == 0.0 {
        a
    } else {
        a * (target / norm)
    }
}

fn orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    gaussian_matrix(rng, rows, cols).qr().q().columns(0, cols).into_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub activation: ActivationKind,
    pub seed: u64,
    /// Spectral norm given to both `A1` and `A2`.
    pub r_target: f64,
    /// Condition number of `A1`; a plain Gaussian matrix when absent.
    pub kappa: Option<f64>,
    /// Standard deviation of the Gaussian noise added to `b`.
    pub noise: f64,
    /// Norm of the planted point.
    pub plant_norm: f64,
    /// Strong-convexity target used by the weight recipe.
    pub l_target: f64,
    /// Explicit weights; replaces the recipe.
    pub w: Option<Vec<f64>>,
    pub beta: f64,
}

impl GenOptions {
    pub fn new(n: usize, m: usize, d: usize, activation: ActivationKind, seed: u64) -> Self {
        GenOptions {
            n,
            m,
            d,
            activation,
            seed,
            r_target: 1.5,
            kappa: None,
            noise: 0.0,
            plant_norm: 1.0,
            l_target: 1.0,
            w: None,
            beta: DEFAULT_BETA,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub instance: ProblemInstance,
    pub x_plant: DVector<f64>,
}

/// Weight for every row: `w^2 = 100 + 12 R_h L_h R (R + R_h) + l / sigma_min(A1)^2`
/// with `R = max(||A1||, ||A2||, ||b||)`. The last term is dropped when
/// `A1` has fewer rows than columns.
pub fn recipe_weight(a1: &DMatrix<f64>, a2: &DMatrix<f64>, b: &DVector<f64>, act: &Activation, l: f64) -> f64 {
    let r = spectral_norm(a1).max(spectral_norm(a2)).max(b.norm());
    let mut w2 = 100.0 + 12.0 * act.r_h * act.l_h * r * (r + act.r_h);
    let smin = sigma_min(a1);
    if smin > 0.0 {
        w2 += l / (smin * smin);
    }
    w2.min(f64::MAX).sqrt()
}

pub fn generate(opts: &GenOptions) -> Result<Generated> {
    let (n, m, d) = (opts.n, opts.m, opts.d);
    if n == 0 || m == 0 || d == 0 {
        return Err(Error::Config(format!(
            "dimensions must be at least 1 (n={n}, m={m}, d={d})"
        )));
    }
    if !(opts.r_target > 0.0 && opts.r_target.is_finite()) {
        return Err(Error::Config(format!("r_target = {} must be positive", opts.r_target)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let a1 = match opts.kappa {
        None => gaussian_matrix(&mut rng, n, d),
        Some(kappa) => {
            if !(kappa >= 1.0 && kappa.is_finite()) {
                return Err(Error::Config(format!("kappa = {kappa} must be at least 1")));
            }
            let k = n.min(d);
            let u = orthonormal_columns(&mut rng, n, k);
            let v = orthonormal_columns(&mut rng, d, k);
            let sigma = DVector::from_fn(k, |i, _| {
                if k == 1 {
                    1.0
                } else {
                    kappa.powf(-(i as f64) / (k - 1) as f64)
                }
            });
            u * DMatrix::from_diagonal(&sigma) * v.transpose()
        }
    };
    let a1 = rescale(a1, opts.r_target);
    let a2 = rescale(gaussian_matrix(&mut rng, m, n), opts.r_target);
    let x_plant = {
        let g = gaussian_vector(&mut rng, d);
        let norm = g.norm();
        if norm == 0.0 {
            g
        } else {
            g * (opts.plant_norm / norm)
        }
    };
    let act = Activation::for_instance(opts.activation, m, spectral_norm(&a2));
    let f = {
        let z = &a1 * &x_plant;
        let shifted = z.map(|v| (v - z.max()).exp());
        let s = shifted.sum();
        shifted / s
    };
    let mut b = act.eval(&(&a2 * f)).h;
    if opts.noise > 0.0 {
        b += gaussian_vector(&mut rng, m) * opts.noise;
    }
    let w = match &opts.w {
        Some(w) => DVector::from_vec(w.clone()),
        None => DVector::from_element(n, recipe_weight(&a1, &a2, &b, &act, opts.l_target)),
    };
    let r = opts.r_target.max(b.norm()).max(opts.plant_norm);
    let instance = ProblemInstance::new(a1, a2, b, w, opts.activation, r, opts.beta)?;
    Ok(Generated { instance, x_plant })
}

pub fn load_vector(path: impl AsRef<Path>) -> Result<DVector<f64>> {
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let v: Vec<f64> = serde_json::from_str(&text)?;
    Ok(DVector::from_vec(v))
}

pub fn save_vector(path: impl AsRef<Path>, v: &DVector<f64>) -> Result<()> {
    let text = serde_json::to_string(&v.iter().cloned().collect::<Vec<_>>())?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum X0Spec {
    Zero,
    /// Gaussian with the given per-coordinate scale, seeded by the config seed.
    Gaussian {
        scale: f64,
    },
    /// A JSON array of numbers on disk.
    Stored {
        path: PathBuf,
    },
    Vector {
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSpec {
    /// Computed by a preliminary exact solve from `x0`.
    #[default]
    Auto,
    None,
    Stored {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emit {
    TraceCsv,
    ReportJson,
    BoundsJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub instance_path: PathBuf,
    pub x0: X0Spec,
    #[serde(default)]
    pub config: NewtonConfig,
    pub output_dir: PathBuf,
    #[serde(default = "default_emit")]
    pub emit: Vec<Emit>,
    #[serde(default)]
    pub reference: ReferenceSpec,
    /// Random pairs used to measure the Hessian-Lipschitz constant for the
    /// empirical basin certificate.
    #[serde(default = "default_lipschitz_pairs")]
    pub lipschitz_pairs: usize,
}

fn default_emit() -> Vec<Emit> {
    vec![Emit::ReportJson]
}

fn default_lipschitz_pairs() -> usize {
    20
}

impl ExperimentSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub exit_code: i32,
    pub written: Vec<PathBuf>,
}

/// Exit status for a finished run: 0 when converged, 2 otherwise.
pub fn exit_code_for(status: RunStatus) -> i32 {
    match status {
        RunStatus::Converged => 0,
        _ => 2,
    }
}

/// Loads everything `spec` refers to, solves, and writes the requested
/// artifacts. Errors here are configuration problems (exit 3 in the CLI).
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunOutcome> {
    spec.config.validate()?;
    let inst = ProblemInstance::load(&spec.instance_path)?;
    let x0 = match &spec.x0 {
        X0Spec::Zero => DVector::zeros(inst.d()),
        X0Spec::Gaussian { scale } => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.config.seed);
            gaussian_vector(&mut rng, inst.d()) * *scale
        }
        X0Spec::Stored { path } => load_vector(path)?,
        X0Spec::Vector { values } => DVector::from_vec(values.clone()),
    };
    if x0.len() != inst.d() {
        return Err(Error::Dimension {
            what: "x0",
            expected: inst.d(),
            got: x0.len(),
        });
    }
    let x_ref = match &spec.reference {
        ReferenceSpec::Auto => Some(reference_optimum(&inst, &x0)?),
        ReferenceSpec::None => None,
        ReferenceSpec::Stored { path } => Some(load_vector(path)?),
    };
    fs::create_dir_all(&spec.output_dir).map_err(|e| Error::io(&spec.output_dir, e))?;

    let mut report = solve(&inst, &x0, &spec.config, x_ref.as_ref())?;
    if let Some(xr) = &x_ref {
        let l = match spec.config.l_estimate {
            Some(l) => l,
            None => strong_convexity_at(&inst, xr)?,
        };
        let r0 = (&x0 - xr).norm();
        let m_emp = if spec.lipschitz_pairs > 0 {
            Some(empirical_hessian_lipschitz(
                &inst,
                xr,
                r0.max(1e-6),
                spec.lipschitz_pairs,
                spec.config.seed,
            )?)
        } else {
            None
        };
        report.golden.basin = Some(basin_certificate(&inst, &x0, xr, l, m_emp));
    }

    let mut written = Vec::new();
    let out = |name: &str| spec.output_dir.join(name);
    for emit in &spec.emit {
        match emit {
            Emit::ReportJson => {
                let p = out("report.json");
                fs::write(&p, report.to_json()?).map_err(|e| Error::io(&p, e))?;
                written.push(p);
            }
            Emit::TraceCsv => {
                let p = out("trace.csv");
                fs::write(&p, report.csv()).map_err(|e| Error::io(&p, e))?;
                written.push(p);
            }
            Emit::BoundsJson => {
                let points: Vec<DVector<f64>> = report
                    .golden
                    .iterates
                    .iter()
                    .map(|v| DVector::from_vec(v.clone()))
                    .collect();
                match probe_empirical(&inst, &points) {
                    Ok(b) => {
                        let p = out("bounds.json");
                        fs::write(&p, serde_json::to_string_pretty(&b)?).map_err(|e| Error::io(&p, e))?;
                        written.push(p);
                    }
                    Err(e) => log::warn!("bounds report skipped: {e}"),
                }
            }
        }
    }
    let exit_code = exit_code_for(report.golden.status);
    Ok(RunOutcome {
        report,
        exit_code,
        written,
    })
}

/// `count` seeded points uniformly in the ball of radius `radius`.
pub fn sample_points(d: usize, count: usize, radius: f64, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| ball_point(&mut rng, d, radius)).collect()
}

/// Bounds report over `count` random points in the ball of radius `R`.
pub fn bounds_report(inst: &ProblemInstance, count: usize, seed: u64) -> Result<BoundReport> {
    probe_empirical(inst, &sample_points(inst.d(), count, inst.r(), seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub trials: usize,
    pub failures: usize,
    /// Largest measured value of the suite's statistic.
    pub worst: f64,
    pub threshold: f64,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub seed: u64,
    pub trials: usize,
    pub passed: bool,
    pub failed_suites: Vec<String>,
    pub suites: Vec<SuiteResult>,
}

pub const GRADIENT_TOL: f64 = 1e-6;
pub const HESSIAN_FD_TOL: f64 = 1e-5;
pub const HESSIAN_ROUTE_TOL: f64 = 1e-10;
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Worker count from `SOFTNEWTON_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

struct PointCheck {
    normalization: f64,
    gradient: f64,
    hessian_fd: f64,
    hessian_route: f64,
}

/// Derivative checks at one point. Gradients are compared against central
/// differences of `L_tot`, Hessians against central differences of the
/// closed-form gradient and against the factored `A1^T B A1` route.
pub fn check_point(inst: &ProblemInstance, x: &DVector<f64>) -> Result<(f64, f64, f64, f64)> {
    let st = eval_forward(inst, x)?;
    let normalization = (st.f.iter().map(|v| v.abs()).sum::<f64>() - 1.0).abs();
    let cfg = FdConfig::default();
    let g = grad_tot(&st, inst);
    let g_fd = fd_gradient(|y| Ok(eval_forward(inst, y)?.loss_tot), x, &cfg)?;
    let h = hess_tot(&st, inst);
    let h_fd = fd_hessian(|y| Ok(grad_tot(&eval_forward(inst, y)?, inst)), x, &cfg)?;
    let terms = entry_terms(&st, inst);
    let h_l = terms.sum();
    let h_fact = factored_hessian(inst, &curvature_kernel(&st, inst));
    Ok((
        normalization,
        relative_l2(&g, &g_fd),
        relative_frobenius(&h, &h_fd.matrix),
        route_error(&h_fact, &h_l, terms.magnitude()),
    ))
}

/// `||a - b||_F` relative to the larger of `||b||_F` and the summand scale
/// `terms`; with `n = 1` the Hessian cancels to exactly zero while the
/// per-entry sum leaves rounding residue of order `1e-16 * terms`.
pub fn route_error(a: &DMatrix<f64>, b: &DMatrix<f64>, terms: f64) -> f64 {
    let scale = b.norm().max(terms);
    let diff = (a - b).norm();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Runs every invariant suite on `trials` random points (and sketch seeds).
pub fn verify(inst: &ProblemInstance, seed: u64, trials: usize, threads: Option<usize>) -> Result<VerifyReport> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads.or_else(threads_from_env) {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let points = sample_points(inst.d(), trials.max(2), inst.r(), seed);

    let checks: Vec<Result<PointCheck>> = pool.install(|| {
        points
            .par_iter()
            .map(|x| {
                let (normalization, gradient, hessian_fd, hessian_route) = check_point(inst, x)?;
                Ok(PointCheck {
                    normalization,
                    gradient,
                    hessian_fd,
                    hessian_route,
                })
            })
            .collect()
    });
    let checks: Vec<PointCheck> = checks.into_iter().collect::<Result<_>>()?;

    let mut suites = Vec::new();
    let mut add = |name: &str, values: Vec<f64>, threshold: f64| {
        let failures = values.iter().filter(|&&v| !(v <= threshold)).count();
        suites.push(SuiteResult {
            name: name.to_string(),
            passed: failures == 0,
            trials: values.len(),
            failures,
            worst: values.iter().cloned().fold(0.0, f64::max),
            threshold,
            detail: None,
        });
    };
    add(
        "normalization",
        checks.iter().map(|c| c.normalization).collect(),
        NORMALIZATION_TOL,
    );
    add("gradient_fd", checks.iter().map(|c| c.gradient).collect(), GRADIENT_TOL);
    add(
        "hessian_fd",
        checks.iter().map(|c| c.hessian_fd).collect(),
        HESSIAN_FD_TOL,
    );
    add(
        "hessian_routes",
        checks.iter().map(|c| c.hessian_route).collect(),
        HESSIAN_ROUTE_TOL,
    );

    // bound soundness over the same points
    let bounds = probe_empirical(inst, &points)?;
    let violations: Vec<String> = bounds.violations().iter().map(|c| c.name.clone()).collect();
    suites.push(SuiteResult {
        name: "bounds".to_string(),
        passed: violations.is_empty(),
        trials: bounds.points_used,
        failures: violations.len(),
        worst: bounds
            .checks
            .iter()
            .filter(|c| c.enforced)
            .map(|c| c.tightness)
            .fold(0.0, f64::max),
        threshold: 1.0,
        detail: (!violations.is_empty()).then(|| violations.join(", ")),
    });

    // sketch sandwich at the origin's diagonal surrogate
    let dweights = inst.w2();
    let sketch_eps: Vec<Result<f64>> = pool.install(|| {
        (0..trials as u64)
            .into_par_iter()
            .map(|k| {
                let mut r = subsample(inst.a1(), &dweights, 0.3, 0.1, seed.wrapping_add(k))?;
                verify_sandwich(inst.a1(), &dweights, &mut r, true)
            })
            .collect()
    });
    match sketch_eps.into_iter().collect::<Result<Vec<f64>>>() {
        Ok(eps) => {
            let failures = eps.iter().filter(|&&e| e > 0.3).count();
            let rate = if eps.is_empty() {
                1.0
            } else {
                1.0 - failures as f64 / eps.len() as f64
            };
            suites.push(SuiteResult {
                name: "sketch_sandwich".to_string(),
                passed: rate >= 0.9,
                trials: eps.len(),
                failures,
                worst: eps.iter().cloned().fold(0.0, f64::max),
                threshold: 0.3,
                detail: Some(format!("success rate {rate}")),
            });
        }
        Err(e) => suites.push(SuiteResult {
            name: "sketch_sandwich".to_string(),
            passed: false,
            trials,
            failures: trials,
            worst: f64::MAX,
            threshold: 0.3,
            detail: Some(e.to_string()),
        }),
    }

    let failed_suites: Vec<String> = suites.iter().filter(|s| !s.passed).map(|s| s.name.clone()).collect();
    Ok(VerifyReport {
        schema_version: SCHEMA_VERSION,
        seed,
        trials,
        passed: failed_suites.is_empty(),
        failed_suites,
        suites,
    })
}
