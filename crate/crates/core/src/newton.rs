//! Newton iteration `x <- x - H^-1 grad L_tot`, with the exact Hessian or a
//! row-sampled approximation, plus basin and contraction diagnostics.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::bounds::{compute_constants, Magnitude};
use crate::derivatives::grad_tot;
use crate::error::{Error, Result};
use crate::hessian::{b_diagonal, entry_terms, hess_tot};
use crate::linalg::weighted_gram;
use crate::model::{eval_forward, ModelState, ProblemInstance, SCHEMA_VERSION};
use crate::oracle::spectral;
use crate::sketch::{sandwich_deviation, subsample_with, DEFAULT_SAMPLING_CONSTANT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveMode {
    Exact,
    Sketched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonConfig {
    pub mode: SolveMode,
    /// Target distance to the reference optimum.
    pub eps: f64,
    /// Failure budget over the whole run; each sketch gets `delta / max_iters`.
    pub delta: f64,
    pub eps0: f64,
    pub max_iters: usize,
    pub l_estimate: Option<f64>,
    pub seed: u64,
    /// Stationarity tolerance on `||grad L_tot||_2`.
    pub grad_tol: f64,
    /// Halve the step (up to 30 times) when `L_tot` would increase.
    pub damping: bool,
    /// Enforce `eps, delta in (0, 0.1)` and disable damping.
    pub strict: bool,
    pub sampling_constant: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            mode: SolveMode::Exact,
            eps: 1e-10,
            delta: 0.05,
            eps0: 0.01,
            max_iters: 200,
            l_estimate: None,
            seed: 0,
            grad_tol: 1e-10,
            damping: true,
            strict: false,
            sampling_constant: DEFAULT_SAMPLING_CONSTANT,
        }
    }
}

pub const MAX_HALVINGS: u32 = 30;

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps = {} must be positive", self.eps));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta = {} outside (0, 1)", self.delta));
        }
        if self.strict && !(self.eps < 0.1 && self.delta < 0.1) {
            return bad(format!(
                "strict mode needs eps and delta in (0, 0.1), got eps = {}, delta = {}",
                self.eps, self.delta
            ));
        }
        if !(self.eps0 > 0.0 && self.eps0 < 0.5) {
            return bad(format!("eps0 = {} outside (0, 0.5)", self.eps0));
        }
        if !(self.grad_tol > 0.0 && self.grad_tol.is_finite()) {
            return bad(format!("grad_tol = {} must be positive", self.grad_tol));
        }
        if let Some(l) = self.l_estimate {
            if !(l > 0.0 && l.is_finite()) {
                return bad(format!("l_estimate = {l} must be positive"));
            }
        }
        if !(self.sampling_constant > 0.0 && self.sampling_constant.is_finite()) {
            return bad(format!(
                "sampling_constant = {} must be positive",
                self.sampling_constant
            ));
        }
        Ok(())
    }

    fn damping_enabled(&self) -> bool {
        self.damping && !self.strict
    }

    /// Seed of the sketch drawn at iteration `t`.
    pub fn iteration_seed(&self, t: usize) -> u64 {
        self.seed ^ (t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub grad_norm: f64,
    pub loss: f64,
    /// `||H~^-1 grad||` before damping.
    pub step_norm: f64,
    /// Sandwich deviation of `H~` against `H_tot` (zero in exact mode).
    pub eps_sketch: f64,
    pub sketch_exact: Option<bool>,
    pub sketch_rows: Option<usize>,
}

fn cholesky_or_error(h: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    match Cholesky::new(h.clone()) {
        Some(c) => Ok(c),
        None => Err(Error::NotPositiveDefinite {
            lambda_min: spectral(&h).min,
        }),
    }
}

/// One undamped step from `x` (iteration index `t` picks the sketch seed).
pub fn newton_step(
    inst: &ProblemInstance,
    x: &DVector<f64>,
    cfg: &NewtonConfig,
    t: usize,
) -> Result<(DVector<f64>, StepDiagnostics)> {
    let state = eval_forward(inst, x)?;
    newton_step_at(inst, &state, cfg, t)
}

fn newton_step_at(
    inst: &ProblemInstance,
    state: &ModelState,
    cfg: &NewtonConfig,
    t: usize,
) -> Result<(DVector<f64>, StepDiagnostics)> {
    let g = grad_tot(state, inst);
    let h_tot = hess_tot(state, inst);
    let (h, eps_sketch, exact, rows) = match cfg.mode {
        SolveMode::Exact => (h_tot, 0.0, None, None),
        SolveMode::Sketched => {
            // positive diagonal surrogate for the dense kernel
            let dprime = b_diagonal(state, inst) + inst.w2();
            let lam = dprime.min();
            if !(lam > 0.0) {
                return Err(Error::NotPositiveDefinite { lambda_min: lam });
            }
            let delta1 = cfg.delta / cfg.max_iters.max(1) as f64;
            let sk = subsample_with(
                inst.a1(),
                &dprime,
                cfg.eps0,
                delta1,
                cfg.iteration_seed(t),
                cfg.sampling_constant,
            )?;
            let h_tilde = weighted_gram(inst.a1(), sk.dtilde().as_slice());
            // f64::MAX when H_tot itself is not positive definite
            let dev = sandwich_deviation(&h_tot, &h_tilde, false).unwrap_or(f64::MAX);
            (h_tilde, dev, Some(sk.exact), Some(sk.distinct_rows()))
        }
    };
    let chol = cholesky_or_error(h)?;
    let delta = chol.solve(&g);
    let diag = StepDiagnostics {
        grad_norm: g.norm(),
        loss: state.loss_tot,
        step_norm: delta.norm(),
        eps_sketch,
        sketch_exact: exact,
        sketch_rows: rows,
    };
    Ok((&state.x - delta, diag))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxIters,
    Diverged,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinCertificate {
    pub l: f64,
    pub r0: f64,
    #[serde(rename = "M_analytic_log10")]
    pub m_analytic_log10: Option<f64>,
    pub analytic: bool,
    #[serde(rename = "M_empirical")]
    pub m_empirical: Option<f64>,
    pub empirical: Option<bool>,
}

/// Deterministic part of a run: everything except wall-clock timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunGolden {
    pub status: RunStatus,
    pub mode: SolveMode,
    pub seed: u64,
    pub config: NewtonConfig,
    pub iterations: usize,
    pub iterates: Vec<Vec<f64>>,
    /// Distances to the reference optimum; empty without one.
    pub r: Vec<f64>,
    pub ratios: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub losses: Vec<f64>,
    pub sketch_eps: Vec<f64>,
    pub sketch_exact: Vec<bool>,
    pub halvings: Vec<u32>,
    pub x_ref: Option<Vec<f64>>,
    pub basin: Option<BasinCertificate>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    /// Milliseconds since the start of the solve, per recorded iterate.
    pub millis: Vec<f64>,
    pub total_millis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub golden: RunGolden,
    pub timing: RunTiming,
}

impl RunReport {
    pub fn final_x(&self) -> DVector<f64> {
        DVector::from_vec(self.golden.iterates.last().cloned().unwrap_or_default())
    }

    pub fn final_grad_norm(&self) -> f64 {
        self.golden.grad_norms.last().cloned().unwrap_or(f64::NAN)
    }

    /// The golden block as JSON; byte-identical across repeated runs.
    pub fn golden_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.golden)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv(&self) -> String {
        let g = &self.golden;
        let opt = |v: Option<&f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut out = String::from("t,r_t,ratio,grad_norm,eps_sketch,millis\n");
        for t in 0..g.grad_norms.len() {
            let ratio = if t == 0 { None } else { g.ratios.get(t - 1) };
            let eps = if t == 0 { None } else { g.sketch_eps.get(t - 1) };
            out.push_str(&format!(
                "{},{},{},{:?},{},{}\n",
                t,
                opt(g.r.get(t)),
                opt(ratio),
                g.grad_norms[t],
                opt(eps),
                opt(self.timing.millis.get(t)),
            ));
        }
        out
    }
}

fn loss_slack(loss: f64) -> f64 {
    1e-13 * (1.0 + loss.abs())
}

/// Runs the iteration from `x0`. Stops once `||x_t - x_ref|| <= eps` (when a
/// reference is given) and `||grad|| <= grad_tol`; after `max_iters` steps;
/// or when the distance (gradient norm without a reference) doubles three
/// times in a row. Step failures end the run with status `error`.
pub fn solve(
    inst: &ProblemInstance,
    x0: &DVector<f64>,
    cfg: &NewtonConfig,
    x_ref: Option<&DVector<f64>>,
) -> Result<RunReport> {
    cfg.validate()?;
    if x0.len() != inst.d() {
        return Err(Error::Dimension {
            what: "x0",
            expected: inst.d(),
            got: x0.len(),
        });
    }
    if let Some(xr) = x_ref {
        if xr.len() != inst.d() {
            return Err(Error::Dimension {
                what: "x_ref",
                expected: inst.d(),
                got: xr.len(),
            });
        }
    }
    if x0.norm() > inst.r() {
        log::warn!("||x0|| = {} exceeds R = {}", x0.norm(), inst.r());
    }
    let start = Instant::now();
    let mut g = RunGolden {
        status: RunStatus::MaxIters,
        mode: cfg.mode,
        seed: cfg.seed,
        config: cfg.clone(),
        iterations: 0,
        iterates: Vec::new(),
        r: Vec::new(),
        ratios: Vec::new(),
        grad_norms: Vec::new(),
        losses: Vec::new(),
        sketch_eps: Vec::new(),
        sketch_exact: Vec::new(),
        halvings: Vec::new(),
        x_ref: x_ref.map(|v| v.iter().cloned().collect()),
        basin: None,
        error: None,
    };
    let mut millis = Vec::new();

    let mut state = eval_forward(inst, x0)?;
    let mut grad_norm = grad_tot(&state, inst).norm();
    let record = |g: &mut RunGolden, millis: &mut Vec<f64>, st: &ModelState, gn: f64| {
        g.iterates.push(st.x.iter().cloned().collect());
        g.grad_norms.push(gn);
        g.losses.push(st.loss_tot);
        if let Some(xr) = x_ref {
            let r = (&st.x - xr).norm();
            if let Some(&prev) = g.r.last() {
                // kept finite so the report survives a JSON round trip
                g.ratios.push(if prev > 0.0 {
                    r / prev
                } else if r == 0.0 {
                    0.0
                } else {
                    f64::MAX
                });
            }
            g.r.push(r);
        }
        millis.push(start.elapsed().as_secs_f64() * 1e3);
    };
    record(&mut g, &mut millis, &state, grad_norm);

    let mut growth_streak = 0;
    let mut t = 0;
    loop {
        let near = g.r.last().is_none_or(|&r| r <= cfg.eps);
        if near && grad_norm <= cfg.grad_tol {
            g.status = RunStatus::Converged;
            break;
        }
        if t >= cfg.max_iters {
            g.status = RunStatus::MaxIters;
            break;
        }

        let (x_new, diag) = match newton_step_at(inst, &state, cfg, t) {
            Ok(v) => v,
            Err(e) => {
                g.status = RunStatus::Error;
                g.error = Some(e.to_string());
                break;
            }
        };
        t += 1;

        // accept, or halve toward the current point while L_tot increases
        let full = &x_new - &state.x;
        let mut halvings = 0;
        let mut next = eval_forward(inst, &x_new);
        let increased = |n: &Result<ModelState>| match n {
            Ok(s) => s.loss_tot > state.loss_tot + loss_slack(state.loss_tot),
            Err(_) => true,
        };
        if cfg.damping_enabled() {
            while increased(&next) && halvings < MAX_HALVINGS {
                halvings += 1;
                let scale = 0.5f64.powi(halvings as i32);
                next = eval_forward(inst, &(&state.x + &full * scale));
            }
        }
        if cfg.mode == SolveMode::Exact && increased(&next) {
            g.status = RunStatus::Error;
            g.error = Some(match &next {
                Ok(s) => format!("loss increased at iteration {t}: {} -> {}", state.loss_tot, s.loss_tot),
                Err(e) => format!("step {t} left the domain: {e}"),
            });
            break;
        }
        let next = match next {
            Ok(s) => s,
            Err(e) => {
                g.status = RunStatus::Error;
                g.error = Some(format!("step {t} left the domain: {e}"));
                break;
            }
        };

        let prev_measure = g.r.last().cloned().unwrap_or(grad_norm);
        state = next;
        grad_norm = grad_tot(&state, inst).norm();
        g.sketch_eps.push(diag.eps_sketch);
        if let Some(ex) = diag.sketch_exact {
            g.sketch_exact.push(ex);
        }
        g.halvings.push(halvings);
        record(&mut g, &mut millis, &state, grad_norm);
        g.iterations = t;

        let measure = g.r.last().cloned().unwrap_or(grad_norm);
        if measure > 2.0 * prev_measure {
            growth_streak += 1;
        } else {
            growth_streak = 0;
        }
        if growth_streak >= 3 || !measure.is_finite() {
            g.status = RunStatus::Diverged;
            break;
        }
    }
    g.iterations = t;

    let total = start.elapsed().as_secs_f64() * 1e3;
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        golden: g,
        timing: RunTiming {
            millis,
            total_millis: total,
        },
    })
}

/// A stationary point of `L_tot` found by damped exact Newton from `x0`.
///
/// Iterates until `||grad|| <= 1e-13` or the gradient stops decreasing for
/// three steps, and returns the iterate with the smallest gradient. Fails if
/// that gradient is still above `1e-9`.
pub fn reference_optimum(inst: &ProblemInstance, x0: &DVector<f64>) -> Result<DVector<f64>> {
    const TARGET: f64 = 1e-13;
    const ACCEPT: f64 = 1e-9;
    let cfg = NewtonConfig::default();
    let mut state = eval_forward(inst, x0)?;
    let mut best = (grad_tot(&state, inst).norm(), state.x.clone());
    let mut stalls = 0;
    for t in 0..200 {
        if best.0 <= TARGET || stalls >= 3 {
            break;
        }
        let (x_new, _) = newton_step_at(inst, &state, &cfg, t)?;
        let full = &x_new - &state.x;
        let mut cand = eval_forward(inst, &x_new);
        let mut halvings = 0i32;
        while halvings < MAX_HALVINGS as i32
            && cand
                .as_ref()
                .map_or(true, |s| s.loss_tot > state.loss_tot + loss_slack(state.loss_tot))
        {
            halvings += 1;
            cand = eval_forward(inst, &(&state.x + &full * 0.5f64.powi(halvings)));
        }
        state = cand?;
        let gn = grad_tot(&state, inst).norm();
        if gn < best.0 {
            best = (gn, state.x.clone());
            stalls = 0;
        } else {
            stalls += 1;
        }
    }
    if best.0 > ACCEPT {
        return Err(Error::Config(format!(
            "reference solve stalled at gradient norm {:e}",
            best.0
        )));
    }
    Ok(best.1)
}

/// `lambda_min(H_tot(x))`.
pub fn strong_convexity_at(inst: &ProblemInstance, x: &DVector<f64>) -> Result<f64> {
    let st = eval_forward(inst, x)?;
    Ok(spectral(&hess_tot(&st, inst)).min)
}

/// Measured Hessian-Lipschitz constant on the ball of `radius` around
/// `center`: the largest `||H(x) - H(y)|| / ||x - y||` over `pairs` random
/// pairs, half of them far apart and half at a tenth of the radius.
pub fn empirical_hessian_lipschitz(
    inst: &ProblemInstance,
    center: &DVector<f64>,
    radius: f64,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hess = |x: &DVector<f64>| -> Result<DMatrix<f64>> { Ok(entry_terms(&eval_forward(inst, x)?, inst).sum()) };
    let mut worst = 0.0f64;
    for k in 0..pairs {
        let x = center + ball_point(&mut rng, inst.d(), radius);
        let spread = if k % 2 == 0 { radius } else { 0.1 * radius };
        let y = &x + ball_point(&mut rng, inst.d(), spread);
        let dist = (&x - &y).norm();
        if dist == 0.0 {
            continue;
        }
        worst = worst.max(spectral(&(hess(&x)? - hess(&y)?)).abs_max() / dist);
    }
    Ok(worst)
}

/// Uniform sample from the `d`-ball of the given radius.
pub fn ball_point(rng: &mut ChaCha8Rng, d: usize, radius: f64) -> DVector<f64> {
    let dir: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
    let norm = dir.norm();
    if norm == 0.0 {
        return DVector::zeros(d);
    }
    let u: f64 = Uniform::new(0.0, 1.0).unwrap().sample(rng);
    dir * (radius * u.powf(1.0 / d as f64) / norm)
}

/// `M * ||x0 - x_ref|| <= 0.1 l`, evaluated in log space.
pub fn basin_check(x0: &DVector<f64>, x_ref: &DVector<f64>, m: Magnitude, l: f64) -> bool {
    let r0 = (x0 - x_ref).norm();
    if r0 == 0.0 || m.is_zero() {
        return true;
    }
    l > 0.0 && m.ln() + r0.ln() <= (0.1 * l).ln()
}

/// Both basin certificates: with the analytic `M` of the instance and, when
/// given, the measured one.
pub fn basin_certificate(
    inst: &ProblemInstance,
    x0: &DVector<f64>,
    x_ref: &DVector<f64>,
    l: f64,
    m_empirical: Option<f64>,
) -> BasinCertificate {
    let m = compute_constants(inst).m;
    BasinCertificate {
        l,
        r0: (x0 - x_ref).norm(),
        m_analytic_log10: (!m.is_zero()).then(|| m.log10()),
        analytic: basin_check(x0, x_ref, m, l),
        m_empirical,
        empirical: m_empirical.map(|me| basin_check(x0, x_ref, Magnitude::new(me), l)),
    }
}

/// Steps violating `r_{t+1} <= 2 (eps_t + rbar/(l - rbar)) r_t` with
/// `rbar = M r_t`; steps with `rbar >= l` are not covered and skipped.
/// `slack` absorbs rounding at the noise floor.
pub fn shrinking_bound_violations(report: &RunReport, m: f64, l: f64, slack: f64) -> Vec<usize> {
    let g = &report.golden;
    let mut out = Vec::new();
    for t in 0..g.r.len().saturating_sub(1) {
        let r = g.r[t];
        let rbar = m * r;
        if rbar >= l {
            continue;
        }
        let eps = g.sketch_eps.get(t).cloned().unwrap_or(0.0);
        let bound = 2.0 * (eps + rbar / (l - rbar)) * r;
        if g.r[t + 1] > bound + slack {
            out.push(t);
        }
    }
    out
}
