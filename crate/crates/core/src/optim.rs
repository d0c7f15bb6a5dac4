//! Newton-MR with inexact Hessians, its line search on `‖g‖²`, and the baselines it is
//! compared against: Newton-CG, Gauss-Newton, L-BFGS and six first-order methods.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::krylov::{cg, minres_qlp, KrylovConfig, SeedMode};
use crate::linalg::{densify, eigh, LinearOperator, SymMatrix, Vector};
use crate::objectives::{Problem, SampleSelector};
use crate::perturb::{measure_diagnostics, PerturbationSpec, SpectralDiagnostics};

/// Largest dimension for which exact updates densify the Hessian.
pub const MAX_DENSE_DIM: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// `p = −H̃†g` through a dense eigendecomposition.
    #[serde(alias = "exact_pinv")]
    Exact,
    /// MINRES-QLP on `H̃p = −g` to tolerance θ.
    #[serde(alias = "minres_qlp")]
    Inexact,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HessianSource {
    Full,
    /// Sub-sampled Hessian, resampled every outer iteration.
    Subsample(SampleSelector),
    /// `H + E` with `E` drawn from the perturbation model every outer iteration.
    Additive(PerturbationSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub rho: f64,
    pub tau: f64,
    pub theta: f64,
    pub inner_max: usize,
    pub ls_max_backtracks: usize,
    pub ls_shrink: f64,
    pub alpha0: f64,
    pub max_outer: usize,
    pub update_mode: UpdateMode,
    pub hessian_source: HessianSource,
    /// Rank tolerance for exact updates and diagnostics; `None` uses `d·eps·|λ₁|`.
    pub rank_tol: Option<f64>,
    /// Take `α = 1` without a line search.
    pub unit_step: bool,
    /// Measure dense spectral diagnostics every iteration (not charged as oracle calls).
    pub record_diagnostics: bool,
    /// Recompute `⟨p, H̃g⟩` with an extra product instead of the solver's residual identity.
    pub direct_descent_check: bool,
    pub lbfgs_history: usize,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            rho: 1e-4,
            tau: 1e-10,
            theta: 1e-2,
            inner_max: 200,
            ls_max_backtracks: 50,
            ls_shrink: 0.5,
            alpha0: 1.0,
            max_outer: 100,
            update_mode: UpdateMode::Inexact,
            hessian_source: HessianSource::Full,
            rank_tol: None,
            unit_step: false,
            record_diagnostics: false,
            direct_descent_check: false,
            lbfgs_history: 20,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(0.0..1.0).contains(&self.theta) {
            return bad("theta must lie in [0, 1)");
        }
        if !(self.ls_shrink > 0.0 && self.ls_shrink < 1.0) {
            return bad("ls_shrink must lie in (0, 1)");
        }
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return bad("alpha0 must be positive");
        }
        if self.inner_max == 0 || self.ls_max_backtracks == 0 {
            return bad("inner_max and ls_max_backtracks must be at least 1");
        }
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return bad("Wolfe constants need 0 < c1 < c2 < 1");
        }
        if self.lbfgs_history == 0 {
            return bad("lbfgs_history must be at least 1");
        }
        Ok(())
    }

    fn krylov(&self) -> KrylovConfig {
        KrylovConfig::default()
            .with_theta(self.theta)
            .with_max_iters(self.inner_max)
            .with_seed_mode(SeedMode::Auto)
    }
}

/// Optimizers known to the cost model and the bench.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    NewtonMr,
    SsNewtonMr,
    NewtonCg,
    SsNewtonCg,
    GaussNewton,
    #[serde(alias = "l-bfgs")]
    Lbfgs,
    Sgd,
    Momentum,
    Adagrad,
    Adadelta,
    Rmsprop,
    Adam,
}

impl Method {
    pub const ALL: [Method; 12] = [
        Method::NewtonMr,
        Method::SsNewtonMr,
        Method::NewtonCg,
        Method::SsNewtonCg,
        Method::GaussNewton,
        Method::Lbfgs,
        Method::Sgd,
        Method::Momentum,
        Method::Adagrad,
        Method::Adadelta,
        Method::Rmsprop,
        Method::Adam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::NewtonMr => "newton-mr",
            Method::SsNewtonMr => "ss-newton-mr",
            Method::NewtonCg => "newton-cg",
            Method::SsNewtonCg => "ss-newton-cg",
            Method::GaussNewton => "gauss-newton",
            Method::Lbfgs => "lbfgs",
            Method::Sgd => "sgd",
            Method::Momentum => "momentum",
            Method::Adagrad => "adagrad",
            Method::Adadelta => "adadelta",
            Method::Rmsprop => "rmsprop",
            Method::Adam => "adam",
        }
    }

    pub fn first_order(self) -> Option<FirstOrderMethod> {
        Some(match self {
            Method::Sgd => FirstOrderMethod::Sgd,
            Method::Momentum => FirstOrderMethod::Momentum,
            Method::Adagrad => FirstOrderMethod::Adagrad,
            Method::Adadelta => FirstOrderMethod::Adadelta,
            Method::Rmsprop => FirstOrderMethod::Rmsprop,
            Method::Adam => FirstOrderMethod::Adam,
            _ => return None,
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        let key = match key.as_str() {
            "ssnewton-mr" => "ss-newton-mr",
            "ssnewton-cg" => "ss-newton-cg",
            "l-bfgs" => "lbfgs",
            other => other,
        };
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method {s:?}")))
    }
}

/// Per-iteration oracle calls: one unit per component function, two per gradient or
/// Hessian-vector product. `t` inner products, `ls` line-search evaluations, `s/n` the
/// Hessian sample fraction and `b/n` the mini-batch fraction.
pub fn oracle_cost(method: Method, t: usize, ls: usize, s_over_n: f64, b_over_n: f64) -> Result<f64> {
    for (name, v) in [("s/n", s_over_n), ("b/n", b_over_n)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidInput(format!("{name} must be a nonnegative number, got {v}")));
        }
    }
    let (t, ls) = (t as f64, ls as f64);
    Ok(match method {
        Method::NewtonMr => 2.0 * (t + ls + 1.0),
        Method::NewtonCg | Method::GaussNewton => 2.0 * t + ls + 2.0,
        Method::SsNewtonMr => 2.0 * t * s_over_n + 2.0 * (ls + 1.0),
        Method::SsNewtonCg => 2.0 * t * s_over_n + ls + 2.0,
        Method::Lbfgs => 2.0 * (ls + 1.0),
        Method::Sgd
        | Method::Momentum
        | Method::Adagrad
        | Method::Adadelta
        | Method::Rmsprop
        | Method::Adam => 2.0 * b_over_n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub f: f64,
    pub grad_norm: f64,
    pub alpha: f64,
    pub inner_iters: usize,
    pub ls_evals: usize,
    /// `s/n` for Hessian sub-sampling or `b/n` for mini-batches.
    pub sample_fraction: f64,
    /// Cumulative oracle calls.
    pub oracle_calls: f64,
    pub wall_seconds: f64,
    /// Diagnostics of the `(H, H̃, g)` triple that produced this step.
    pub diagnostics: Option<SpectralDiagnostics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradTol,
    MaxOuter,
    LineSearchFailure,
    DomainError,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: Method,
    pub final_x: Vector,
    /// Record 0 is the starting point.
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
    /// `iterates[k]` is the point of `records[k]`.
    pub iterates: Vec<Vector>,
    /// L-BFGS curvature pairs dropped because `⟨s, y⟩ ≤ 0`.
    pub skipped_pairs: usize,
}

impl RunResult {
    pub fn last(&self) -> &IterationRecord {
        self.records.last().expect("runs always record the starting point")
    }

    pub fn iterations(&self) -> usize {
        self.records.len() - 1
    }
}

struct Recorder {
    method: Method,
    start: Instant,
    records: Vec<IterationRecord>,
    iterates: Vec<Vector>,
}

impl Recorder {
    fn new(method: Method, x: &Vector, f: f64, grad_norm: f64) -> Self {
        let start = Instant::now();
        let first = IterationRecord {
            k: 0,
            f,
            grad_norm,
            alpha: 0.0,
            inner_iters: 0,
            ls_evals: 0,
            sample_fraction: 1.0,
            oracle_calls: 0.0,
            wall_seconds: 0.0,
            diagnostics: None,
        };
        Self { method, start, records: vec![first], iterates: vec![x.clone()] }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        x: &Vector,
        f: f64,
        grad_norm: f64,
        alpha: f64,
        t: usize,
        ls: usize,
        fraction: f64,
        diagnostics: Option<SpectralDiagnostics>,
    ) -> Result<()> {
        let (s, b) = if self.method.first_order().is_some() { (0.0, fraction) } else { (fraction, 0.0) };
        let cost = oracle_cost(self.method, t, ls, s, b)?;
        let prev = self.records.last().map_or(0.0, |r| r.oracle_calls);
        self.records.push(IterationRecord {
            k: self.records.len(),
            f,
            grad_norm,
            alpha,
            inner_iters: t,
            ls_evals: ls,
            sample_fraction: fraction,
            oracle_calls: prev + cost,
            wall_seconds: self.start.elapsed().as_secs_f64(),
            diagnostics,
        });
        self.iterates.push(x.clone());
        Ok(())
    }

    fn finish(self, final_x: Vector, termination: Termination, skipped_pairs: usize) -> RunResult {
        RunResult { method: self.method, final_x, records: self.records, iterates: self.iterates, termination, skipped_pairs }
    }
}

// ---------------------------------------------------------------------------------------
// Hessian assembly

struct Additive<'a> {
    base: Box<dyn LinearOperator + 'a>,
    e: SymMatrix,
}

impl LinearOperator for Additive<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn apply(&self, v: &Vector) -> Vector {
        self.base.apply(v) + self.e.matvec(v)
    }
}

/// The curvature operator `H̃_k` used at outer iteration `k`, with its sample fraction.
fn curvature<'a>(
    problem: &'a dyn Problem,
    x: &Vector,
    source: &HessianSource,
    k: usize,
    gauss_newton: bool,
) -> Result<(Box<dyn LinearOperator + 'a>, f64)> {
    let at = |subset: Option<&[usize]>| {
        if gauss_newton {
            problem.gauss_newton_at(x, subset)
        } else {
            problem.hessian_at(x, subset)
        }
    };
    match source {
        HessianSource::Full => Ok((at(None)?, 1.0)),
        HessianSource::Subsample(sel) => {
            let n = problem.n_components();
            if sel.fraction >= 1.0 || n <= 1 {
                return Ok((at(None)?, 1.0));
            }
            let idx = sel.select(n, k as u64);
            let fraction = idx.len() as f64 / n as f64;
            Ok((at(Some(&idx))?, fraction))
        }
        HessianSource::Additive(spec) => {
            let base = at(None)?;
            match spec.sample(problem.dim(), k as u64)? {
                None => Ok((base, 1.0)),
                Some(e) => Ok((Box::new(Additive { base, e }), 1.0)),
            }
        }
    }
}

fn dense_guard(d: usize) -> Result<()> {
    if d > MAX_DENSE_DIM {
        return Err(Error::InvalidInput(format!(
            "exact updates densify the Hessian; dimension {d} exceeds {MAX_DENSE_DIM}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------------------
// Line searches

/// Outcome of a backtracking search; when `accepted` is false the fields describe the
/// last trial and `x`, `grad` are the unchanged inputs.
#[derive(Debug, Clone)]
pub struct LineSearch {
    pub alpha: f64,
    pub evals: usize,
    pub accepted: bool,
    pub x: Vector,
    pub grad: Vector,
}

/// Backtracking until `‖g(x+αp)‖² ≤ ‖g(x)‖² + 2ραΔ`, with `Δ = ⟨p, H̃g⟩ ≤ 0`. Trial
/// points outside the domain count as evaluations and shrink the step.
pub fn armijo_gradnorm(
    problem: &dyn Problem,
    x: &Vector,
    g: &Vector,
    p: &Vector,
    delta: f64,
    cfg: &OptimizerConfig,
) -> Result<LineSearch> {
    if !(delta <= 0.0) {
        return Err(Error::InvalidInput(format!("line search needs Δ ≤ 0, got {delta}")));
    }
    let gg = g.norm_squared();
    let mut alpha = cfg.alpha0;
    for j in 0..cfg.ls_max_backtracks {
        let xt = x + p * alpha;
        if problem.in_domain(&xt) {
            match problem.gradient(&xt) {
                Ok(gt) => {
                    if gt.norm_squared() <= gg + 2.0 * cfg.rho * alpha * delta {
                        return Ok(LineSearch { alpha, evals: j + 1, accepted: true, x: xt, grad: gt });
                    }
                }
                Err(Error::Domain(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if j + 1 < cfg.ls_max_backtracks {
            alpha *= cfg.ls_shrink;
        }
    }
    Ok(LineSearch { alpha, evals: cfg.ls_max_backtracks, accepted: false, x: x.clone(), grad: g.clone() })
}

/// Backtracking on `f` until `f(x+αp) ≤ f(x) + ραg ᵀp`; returns `(α, evals, f_new)`.
fn armijo_value(
    problem: &dyn Problem,
    x: &Vector,
    f: f64,
    slope: f64,
    p: &Vector,
    cfg: &OptimizerConfig,
) -> Result<(f64, usize, Option<f64>)> {
    let mut alpha = cfg.alpha0;
    for j in 0..cfg.ls_max_backtracks {
        let xt = x + p * alpha;
        if problem.in_domain(&xt) {
            match problem.value(&xt) {
                Ok(ft) if ft <= f + cfg.rho * alpha * slope => return Ok((alpha, j + 1, Some(ft))),
                Ok(_) | Err(Error::Domain(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if j + 1 < cfg.ls_max_backtracks {
            alpha *= cfg.ls_shrink;
        }
    }
    Ok((alpha, cfg.ls_max_backtracks, None))
}

// ---------------------------------------------------------------------------------------
// Newton-MR

fn diagnostics_for(
    problem: &dyn Problem,
    x: &Vector,
    h_tilde: &SymMatrix,
    g: &Vector,
    cfg: &OptimizerConfig,
) -> Result<SpectralDiagnostics> {
    let h = match &cfg.hessian_source {
        HessianSource::Full => h_tilde.clone(),
        _ => problem.hessian_dense(x, None)?,
    };
    measure_diagnostics(&h, h_tilde, g, cfg.rank_tol)
}

/// Newton-MR: `p ≈ −H̃†g` and a line search on `‖g‖²`.
pub fn newton_mr_run(problem: &dyn Problem, x0: &Vector, cfg: &OptimizerConfig) -> Result<RunResult> {
    cfg.validate()?;
    problem.check_point(x0)?;
    let method = match cfg.hessian_source {
        HessianSource::Subsample(sel) if sel.fraction < 1.0 && problem.n_components() > 1 => Method::SsNewtonMr,
        _ => Method::NewtonMr,
    };
    let d = problem.dim();
    if cfg.update_mode == UpdateMode::Exact || cfg.record_diagnostics {
        dense_guard(d)?;
    }
    let mut x = x0.clone();
    let mut g = problem.gradient(&x)?;
    let mut rec = Recorder::new(method, &x, problem.value(&x)?, g.norm());
    let mut termination = Termination::MaxOuter;
    for k in 0..cfg.max_outer {
        if g.norm() <= cfg.tau {
            termination = Termination::GradTol;
            break;
        }
        let gg = g.norm_squared();
        let (op, fraction) = curvature(problem, &x, &cfg.hessian_source, k, false)?;
        let dense = (cfg.update_mode == UpdateMode::Exact || cfg.record_diagnostics).then(|| densify(op.as_ref()));
        let (p, t, delta) = match cfg.update_mode {
            UpdateMode::Exact => {
                let h_tilde = dense.as_ref().expect("densified for exact updates");
                let dec = eigh(h_tilde)?;
                let p = -dec.pinv_apply(&g, cfg.rank_tol);
                let delta = p.dot(&h_tilde.matvec(&g));
                (p, d, delta)
            }
            UpdateMode::Inexact => {
                let res = minres_qlp(op.as_ref(), &-&g, &cfg.krylov());
                let residual = res.residual_norm();
                let delta = if cfg.direct_descent_check {
                    res.solution.dot(&op.apply(&g))
                } else {
                    // ⟨p, H̃g⟩ = −‖H̃p‖² = −(‖g‖² − ‖H̃p + g‖²).
                    -(gg - residual * residual)
                };
                if delta > -(1.0 - cfg.theta) * gg + 1e-10 * gg {
                    log::debug!("iteration {k}: inexact direction misses the θ condition (Δ = {delta:e})");
                }
                (res.solution, res.oracle_applies, delta)
            }
        };
        let diagnostics = match (&dense, cfg.record_diagnostics) {
            (Some(h_tilde), true) => Some(diagnostics_for(problem, &x, h_tilde, &g, cfg)?),
            _ => None,
        };
        if !(delta <= 0.0) {
            log::warn!("iteration {k}: direction is not a descent direction for ‖g‖² (Δ = {delta:e})");
            let f = rec.records.last().map_or(f64::NAN, |r| r.f);
            rec.push(&x, f, g.norm(), 0.0, t, 0, fraction, diagnostics)?;
            termination = Termination::LineSearchFailure;
            break;
        }
        let (alpha, ls, x_new, g_new) = if cfg.unit_step {
            let xt = &x + &p;
            if !problem.in_domain(&xt) {
                termination = Termination::DomainError;
                break;
            }
            let gt = problem.gradient(&xt)?;
            (1.0, 1, xt, gt)
        } else {
            let ls = armijo_gradnorm(problem, &x, &g, &p, delta, cfg)?;
            if !ls.accepted {
                let f = rec.records.last().map_or(f64::NAN, |r| r.f);
                rec.push(&x, f, g.norm(), ls.alpha, t, ls.evals, fraction, diagnostics)?;
                termination = Termination::LineSearchFailure;
                break;
            }
            (ls.alpha, ls.evals, ls.x, ls.grad)
        };
        x = x_new;
        g = g_new;
        rec.push(&x, problem.value(&x)?, g.norm(), alpha, t, ls, fraction, diagnostics)?;
    }
    if termination == Termination::MaxOuter && g.norm() <= cfg.tau {
        termination = Termination::GradTol;
    }
    Ok(rec.finish(x, termination, 0))
}

// ---------------------------------------------------------------------------------------
// Newton-CG and Gauss-Newton

/// Newton-CG: CG on `H̃p = −g` with the steepest-descent fallback and Armijo on `f`.
pub fn newton_cg_run(problem: &dyn Problem, x0: &Vector, cfg: &OptimizerConfig) -> Result<RunResult> {
    let method = match cfg.hessian_source {
        HessianSource::Subsample(sel) if sel.fraction < 1.0 && problem.n_components() > 1 => Method::SsNewtonCg,
        _ => Method::NewtonCg,
    };
    cg_family(problem, x0, cfg, method, false)
}

/// Gauss-Newton: CG on the Gauss-Newton model of the curvature, Armijo on `f`.
pub fn gauss_newton_run(problem: &dyn Problem, x0: &Vector, cfg: &OptimizerConfig) -> Result<RunResult> {
    cg_family(problem, x0, cfg, Method::GaussNewton, true)
}

fn cg_family(
    problem: &dyn Problem,
    x0: &Vector,
    cfg: &OptimizerConfig,
    method: Method,
    gauss_newton: bool,
) -> Result<RunResult> {
    cfg.validate()?;
    problem.check_point(x0)?;
    let mut x = x0.clone();
    let mut f = problem.value(&x)?;
    let mut g = problem.gradient(&x)?;
    let mut rec = Recorder::new(method, &x, f, g.norm());
    let mut termination = Termination::MaxOuter;
    for k in 0..cfg.max_outer {
        if g.norm() <= cfg.tau {
            termination = Termination::GradTol;
            break;
        }
        let (op, fraction) = curvature(problem, &x, &cfg.hessian_source, k, gauss_newton)?;
        let res = cg(op.as_ref(), &-&g, &cfg.krylov());
        let t = res.oracle_applies;
        let mut p = res.solution;
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            p = -&g;
            slope = -g.norm_squared();
        }
        let (alpha, ls, f_new) = armijo_value(problem, &x, f, slope, &p, cfg)?;
        let Some(f_new) = f_new else {
            rec.push(&x, f, g.norm(), alpha, t, ls, fraction, None)?;
            termination = Termination::LineSearchFailure;
            break;
        };
        x += p * alpha;
        f = f_new;
        g = problem.gradient(&x)?;
        rec.push(&x, f, g.norm(), alpha, t, ls, fraction, None)?;
    }
    if termination == Termination::MaxOuter && g.norm() <= cfg.tau {
        termination = Termination::GradTol;
    }
    Ok(rec.finish(x, termination, 0))
}

// ---------------------------------------------------------------------------------------
// L-BFGS

struct Trial {
    alpha: f64,
    f: f64,
    slope: f64,
    x: Vector,
    g: Vector,
}

/// Strong-Wolfe line search (bracketing then zoom with safeguarded quadratic steps).
/// Returns the accepted trial, if any, and the evaluation count.
fn strong_wolfe(
    problem: &dyn Problem,
    x: &Vector,
    f0: f64,
    slope0: f64,
    p: &Vector,
    cfg: &OptimizerConfig,
) -> Result<(Option<Trial>, usize)> {
    let budget = cfg.ls_max_backtracks;
    let mut evals = 0;
    let eval = |alpha: f64, evals: &mut usize| -> Result<Trial> {
        *evals += 1;
        let xt = x + p * alpha;
        if !problem.in_domain(&xt) {
            return Ok(Trial { alpha, f: f64::INFINITY, slope: f64::NAN, x: xt, g: Vector::zeros(0) });
        }
        match (problem.value(&xt), problem.gradient(&xt)) {
            (Ok(f), Ok(g)) => Ok(Trial { alpha, f, slope: g.dot(p), x: xt, g }),
            (Err(Error::Domain(_)), _) | (_, Err(Error::Domain(_))) => {
                Ok(Trial { alpha, f: f64::INFINITY, slope: f64::NAN, x: xt, g: Vector::zeros(0) })
            }
            (Err(e), _) | (_, Err(e)) => Err(e),
        }
    };
    let sufficient = |t: &Trial| t.f <= f0 + cfg.wolfe_c1 * t.alpha * slope0;
    let curvature_ok = |t: &Trial| t.slope.abs() <= -cfg.wolfe_c2 * slope0;

    let mut prev = Trial { alpha: 0.0, f: f0, slope: slope0, x: x.clone(), g: Vector::zeros(0) };
    let mut alpha = cfg.alpha0;
    let (mut lo, mut hi);
    loop {
        if evals >= budget {
            return Ok((None, evals));
        }
        let cur = eval(alpha, &mut evals)?;
        if !sufficient(&cur) || (prev.alpha > 0.0 && cur.f >= prev.f) {
            lo = prev;
            hi = cur;
            break;
        }
        if curvature_ok(&cur) {
            return Ok((Some(cur), evals));
        }
        if cur.slope >= 0.0 {
            lo = cur;
            hi = prev;
            break;
        }
        alpha = cur.alpha * 2.0;
        prev = cur;
    }
    // Zoom: `lo` satisfies sufficient decrease with the lowest f seen in the bracket.
    while evals < budget {
        let width = hi.alpha - lo.alpha;
        let mut a = lo.alpha + 0.5 * width;
        if hi.f.is_finite() {
            let denom = 2.0 * (hi.f - lo.f - lo.slope * width);
            if denom > 0.0 {
                let q = lo.alpha - lo.slope * width * width / denom;
                let (a_min, a_max) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
                let margin = 0.1 * width.abs();
                if q > a_min + margin && q < a_max - margin {
                    a = q;
                }
            }
        }
        let cur = eval(a, &mut evals)?;
        if !sufficient(&cur) || cur.f >= lo.f {
            hi = cur;
        } else {
            if curvature_ok(&cur) {
                return Ok((Some(cur), evals));
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
        if (hi.alpha - lo.alpha).abs() <= f64::EPSILON * lo.alpha.abs().max(1.0) {
            break;
        }
    }
    Ok((None, evals))
}

/// L-BFGS with the two-loop recursion and a strong-Wolfe line search.
pub fn lbfgs_run(problem: &dyn Problem, x0: &Vector, cfg: &OptimizerConfig) -> Result<RunResult> {
    cfg.validate()?;
    problem.check_point(x0)?;
    let mut x = x0.clone();
    let mut f = problem.value(&x)?;
    let mut g = problem.gradient(&x)?;
    let mut rec = Recorder::new(Method::Lbfgs, &x, f, g.norm());
    let mut pairs = CurvaturePairs::new(cfg.lbfgs_history);
    let mut skipped = 0;
    let mut termination = Termination::MaxOuter;
    for _ in 0..cfg.max_outer {
        if g.norm() <= cfg.tau {
            termination = Termination::GradTol;
            break;
        }
        let mut p = pairs.two_loop(&g);
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            p = -&g;
            slope = -g.norm_squared();
        }
        let (trial, ls) = strong_wolfe(problem, &x, f, slope, &p, cfg)?;
        let Some(trial) = trial else {
            rec.push(&x, f, g.norm(), 0.0, 0, ls, 1.0, None)?;
            termination = Termination::LineSearchFailure;
            break;
        };
        if !pairs.push(&trial.x - &x, &trial.g - &g) {
            skipped += 1;
        }
        x = trial.x;
        f = trial.f;
        g = trial.g;
        rec.push(&x, f, g.norm(), trial.alpha, 0, ls, 1.0, None)?;
    }
    if termination == Termination::MaxOuter && g.norm() <= cfg.tau {
        termination = Termination::GradTol;
    }
    Ok(rec.finish(x, termination, skipped))
}

/// Limited memory of `(s, y, 1/⟨s,y⟩)` triples.
#[derive(Debug, Clone)]
pub struct CurvaturePairs {
    history: usize,
    pairs: std::collections::VecDeque<(Vector, Vector, f64)>,
}

impl CurvaturePairs {
    pub fn new(history: usize) -> Self {
        Self { history, pairs: Default::default() }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stores the pair unless `⟨s, y⟩ ≤ 0`; returns whether it was kept.
    pub fn push(&mut self, s: Vector, y: Vector) -> bool {
        let sy = s.dot(&y);
        if !(sy > 0.0) {
            return false;
        }
        if self.pairs.len() == self.history {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
        true
    }

    /// `−H_k g` by the two-loop recursion, with initial scaling `⟨s,y⟩/⟨y,y⟩` of the newest
    /// pair (identity when empty).
    pub fn two_loop(&self, g: &Vector) -> Vector {
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * s.dot(&q);
            q -= y * a;
            alphas.push(a);
        }
        if let Some((_, y, rho)) = self.pairs.back() {
            q *= 1.0 / (rho * y.norm_squared());
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * y.dot(&q);
            q += s * (a - b);
        }
        -q
    }
}

// ---------------------------------------------------------------------------------------
// First-order methods

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstOrderMethod {
    Sgd,
    Momentum,
    Adagrad,
    Adadelta,
    Rmsprop,
    Adam,
}

impl FirstOrderMethod {
    pub fn method(self) -> Method {
        match self {
            FirstOrderMethod::Sgd => Method::Sgd,
            FirstOrderMethod::Momentum => Method::Momentum,
            FirstOrderMethod::Adagrad => Method::Adagrad,
            FirstOrderMethod::Adadelta => Method::Adadelta,
            FirstOrderMethod::Rmsprop => Method::Rmsprop,
            FirstOrderMethod::Adam => Method::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FirstOrderConfig {
    pub method: FirstOrderMethod,
    pub step: f64,
    /// Mini-batch fraction `b/n`; 1 means full gradients.
    pub batch_fraction: f64,
    pub rng_seed: u64,
    pub max_iters: usize,
    pub tau: f64,
    /// Momentum coefficient.
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Decay of the squared-gradient average (RMSProp, Adadelta).
    pub decay: f64,
    pub eps: f64,
}

impl Default for FirstOrderConfig {
    fn default() -> Self {
        Self {
            method: FirstOrderMethod::Sgd,
            step: 1e-2,
            batch_fraction: 1.0,
            rng_seed: 0,
            max_iters: 1000,
            tau: 1e-10,
            beta: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            decay: 0.9,
            eps: 1e-8,
        }
    }
}

/// Mini-batch first-order method with a constant step. Records carry full `f` and `‖g‖`
/// for monitoring; only the mini-batch gradients are charged.
pub fn first_order_run(problem: &dyn Problem, x0: &Vector, cfg: &FirstOrderConfig) -> Result<RunResult> {
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(Error::Config(format!("step must be positive, got {}", cfg.step)));
    }
    problem.check_point(x0)?;
    let n = problem.n_components();
    let selector = SampleSelector::new(cfg.batch_fraction, cfg.rng_seed)?;
    let d = problem.dim();
    let mut x = x0.clone();
    let mut g_full = problem.gradient(&x)?;
    let mut rec = Recorder::new(cfg.method.method(), &x, problem.value(&x)?, g_full.norm());
    let (mut m, mut v, mut acc) = (Vector::zeros(d), Vector::zeros(d), Vector::zeros(d));
    let mut termination = Termination::MaxOuter;
    for k in 0..cfg.max_iters {
        if g_full.norm() <= cfg.tau {
            termination = Termination::GradTol;
            break;
        }
        let (g, fraction) = if cfg.batch_fraction >= 1.0 || n <= 1 {
            (g_full.clone(), 1.0)
        } else {
            let idx = selector.select(n, k as u64);
            (problem.gradient_subset(&x, Some(&idx))?, idx.len() as f64 / n as f64)
        };
        let step = match cfg.method {
            FirstOrderMethod::Sgd => &g * cfg.step,
            FirstOrderMethod::Momentum => {
                m = &m * cfg.beta + &g;
                &m * cfg.step
            }
            FirstOrderMethod::Adagrad => {
                v += g.component_mul(&g);
                g.zip_map(&v, |gi, vi| cfg.step * gi / (vi.sqrt() + cfg.eps))
            }
            FirstOrderMethod::Rmsprop => {
                v = &v * cfg.decay + g.component_mul(&g) * (1.0 - cfg.decay);
                g.zip_map(&v, |gi, vi| cfg.step * gi / (vi.sqrt() + cfg.eps))
            }
            FirstOrderMethod::Adadelta => {
                v = &v * cfg.decay + g.component_mul(&g) * (1.0 - cfg.decay);
                let update = Vector::from_fn(d, |i, _| (acc[i] + cfg.eps).sqrt() / (v[i] + cfg.eps).sqrt() * g[i]);
                acc = &acc * cfg.decay + update.component_mul(&update) * (1.0 - cfg.decay);
                update * cfg.step
            }
            FirstOrderMethod::Adam => {
                m = &m * cfg.beta1 + &g * (1.0 - cfg.beta1);
                v = &v * cfg.beta2 + g.component_mul(&g) * (1.0 - cfg.beta2);
                let c1 = 1.0 - cfg.beta1.powi(k as i32 + 1);
                let c2 = 1.0 - cfg.beta2.powi(k as i32 + 1);
                m.zip_map(&v, |mi, vi| cfg.step * (mi / c1) / ((vi / c2).sqrt() + cfg.eps))
            }
        };
        let xt = &x - step;
        if !problem.in_domain(&xt) {
            termination = Termination::DomainError;
            break;
        }
        x = xt;
        g_full = problem.gradient(&x)?;
        rec.push(&x, problem.value(&x)?, g_full.norm(), cfg.step, 0, 0, fraction, None)?;
    }
    if termination == Termination::MaxOuter && g_full.norm() <= cfg.tau {
        termination = Termination::GradTol;
    }
    Ok(rec.finish(x, termination, 0))
}

// ---------------------------------------------------------------------------------------
// Traces

const DIAGNOSTIC_COLUMNS: [&str; 10] =
    ["gamma", "nu", "epsilon", "C", "r", "r_tilde", "acute", "teps", "nu_tilde", "gamma_tilde"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the trace CSV. Diagnostic columns appear when any record carries diagnostics;
/// with `timing = false` the wall-clock column is written as 0 so traces are reproducible.
pub fn write_trace_csv<W: Write>(records: &[IterationRecord], out: W, timing: bool) -> Result<()> {
    write_trace_csv_with(records, &[], out, timing)
}

/// [`write_trace_csv`] with extra per-record columns appended after the standard ones.
pub fn write_trace_csv_with<W: Write>(
    records: &[IterationRecord],
    extra: &[(&str, &[f64])],
    out: W,
    timing: bool,
) -> Result<()> {
    if let Some((name, _)) = extra.iter().find(|(_, v)| v.len() != records.len()) {
        return Err(Error::InvalidInput(format!("column {name} does not match the record count")));
    }
    let with_diag = records.iter().any(|r| r.diagnostics.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> =
        vec!["k", "f", "grad_norm", "alpha", "inner_iters", "ls_evals", "oracle_calls", "wall_seconds"];
    if with_diag {
        header.extend(DIAGNOSTIC_COLUMNS);
    }
    header.extend(extra.iter().map(|(name, _)| *name));
    let csv_err = |e: csv::Error| Error::Config(format!("writing trace: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for (i, r) in records.iter().enumerate() {
        let mut row = vec![
            r.k.to_string(),
            r.f.to_string(),
            r.grad_norm.to_string(),
            r.alpha.to_string(),
            r.inner_iters.to_string(),
            r.ls_evals.to_string(),
            r.oracle_calls.to_string(),
            if timing { r.wall_seconds.to_string() } else { "0".into() },
        ];
        if with_diag {
            match &r.diagnostics {
                Some(d) => row.extend([
                    opt(d.gamma),
                    d.nu.to_string(),
                    d.epsilon.to_string(),
                    d.c_const.to_string(),
                    d.r.to_string(),
                    d.r_tilde.to_string(),
                    d.acute.to_string(),
                    opt(d.teps),
                    opt(d.nu_tilde),
                    opt(d.gamma_tilde),
                ]),
                None => row.extend(std::iter::repeat_n(String::new(), DIAGNOSTIC_COLUMNS.len())),
            }
        }
        row.extend(extra.iter().map(|(_, v)| v[i].to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Config(format!("writing trace: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_normal_vector;
    use crate::objectives::{gen_softmax_data, make_fraction, make_quadratic, make_softmax, Softmax};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> Vector {
        Vector::from_column_slice(x)
    }

    fn softmax_desk() -> Softmax {
        make_softmax(gen_softmax_data(200, 10, 3, 1).unwrap(), 3).unwrap()
    }

    fn identity_quadratic(d: usize) -> crate::objectives::CubicQuadratic {
        make_quadratic(SymMatrix::identity(d), Vector::zeros(d)).unwrap()
    }

    #[test]
    fn oracle_cost_examples() {
        assert_eq!(oracle_cost(Method::NewtonMr, 10, 1, 1.0, 0.0).unwrap(), 24.0);
        assert_eq!(oracle_cost(Method::SsNewtonMr, 10, 1, 0.05, 0.0).unwrap(), 5.0);
        assert_eq!(oracle_cost(Method::Sgd, 0, 0, 0.0, 0.05).unwrap(), 0.1);
        assert!(oracle_cost(Method::NewtonMr, 1, 1, -1.0, 0.0).is_err());
        assert!("bfgs".parse::<Method>().is_err());
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("ssNewton-MR".parse::<Method>().unwrap(), Method::SsNewtonMr);
    }

    #[test]
    fn armijo_examples() {
        let q = identity_quadratic(3);
        let x = v(&[1.0, -2.0, 0.5]);
        let g = q.gradient(&x).unwrap();
        let p = -&x;
        let cfg = OptimizerConfig::default();
        let ls = armijo_gradnorm(&q, &x, &g, &p, -x.norm_squared(), &cfg).unwrap();
        assert!(ls.accepted);
        assert_eq!((ls.alpha, ls.evals), (1.0, 1));

        // Δ = 0 and a direction that leaves g unchanged: equality case is accepted.
        let f = make_fraction(100.0, 1.0);
        let x = v(&[0.0, 0.0]);
        let g = f.gradient(&x).unwrap();
        let ls = armijo_gradnorm(&f, &x, &g, &v(&[0.0, 0.3]), 0.0, &cfg).unwrap();
        assert!(ls.accepted && ls.alpha == 1.0);

        assert!(armijo_gradnorm(&q, &v(&[1.0, 0.0, 0.0]), &v(&[1.0, 0.0, 0.0]), &v(&[1.0, 0.0, 0.0]), 1.0, &cfg)
            .is_err());
    }

    #[test]
    fn armijo_shrinks_past_the_domain_boundary() {
        let f = make_fraction(1.0, 1.0);
        let x = v(&[1.0, 0.0]);
        let g = f.gradient(&x).unwrap();
        // Unit step lands on x₂ = b.
        let p = v(&[-1.0, 1.0]);
        let cfg = OptimizerConfig::default();
        let ls = armijo_gradnorm(&f, &x, &g, &p, -g.norm_squared(), &cfg).unwrap();
        assert!(ls.accepted && ls.alpha < 1.0 && ls.evals >= 2);
        // α = 1 hits x₂ = b, α = ½ and ¼ increase ‖g‖.
        let budget = OptimizerConfig { ls_max_backtracks: 3, ..cfg };
        let ls = armijo_gradnorm(&f, &x, &g, &v(&[0.0, 1.0]), -1e-300, &budget).unwrap();
        assert!(!ls.accepted);
        assert_eq!(ls.evals, 3);
        assert_eq!(ls.alpha, 0.25);
    }

    #[test]
    fn newton_mr_quadratic_one_step() {
        let q = make_quadratic(SymMatrix::from_diagonal(&[4.0, 1.0, 2.5]), v(&[1.0, 2.0, 3.0])).unwrap();
        for mode in [UpdateMode::Exact, UpdateMode::Inexact] {
            let cfg = OptimizerConfig { update_mode: mode, theta: 0.0, ..Default::default() };
            let run = newton_mr_run(&q, &Vector::zeros(3), &cfg).unwrap();
            assert_eq!(run.termination, Termination::GradTol);
            assert_eq!(run.iterations(), 1, "{mode:?}");
            assert!(run.last().grad_norm <= 1e-12);
        }
    }

    #[test]
    fn newton_mr_softmax_converges_monotonically() {
        let s = softmax_desk();
        let cfg = OptimizerConfig { tau: 1e-8, ..Default::default() };
        let run = newton_mr_run(&s, &Vector::zeros(s.dim()), &cfg).unwrap();
        assert_eq!(run.termination, Termination::GradTol);
        assert!(run.iterations() <= 100);
        for w in run.records.windows(2) {
            assert!(w[1].grad_norm <= w[0].grad_norm * (1.0 + 1e-12));
        }
    }

    #[test]
    fn newton_mr_steps_satisfy_armijo_and_theta_condition() {
        let s = softmax_desk();
        let cfg = OptimizerConfig { tau: 1e-8, direct_descent_check: true, ..Default::default() };
        let run = newton_mr_run(&s, &Vector::zeros(s.dim()), &cfg).unwrap();
        let plain = newton_mr_run(&s, &Vector::zeros(s.dim()), &OptimizerConfig { tau: 1e-8, ..Default::default() })
            .unwrap();
        assert_eq!(run.termination, Termination::GradTol);
        assert!(plain.iterations().abs_diff(run.iterations()) <= 1);
        // Replay each iteration: recompute the direction and check the accepted step.
        let mut x = Vector::zeros(s.dim());
        for rec in &run.records[1..] {
            let g = s.gradient(&x).unwrap();
            let gg = g.norm_squared();
            let op = s.hessian_at(&x, None).unwrap();
            let res = minres_qlp(op.as_ref(), &-&g, &cfg.krylov());
            let p = res.solution;
            let delta = p.dot(&op.apply(&g));
            assert!(delta <= -(1.0 - cfg.theta) * gg + 1e-10 * gg);
            let xn = &x + &p * rec.alpha;
            let gn = s.gradient(&xn).unwrap().norm_squared();
            assert!(gn <= (gg + 2.0 * cfg.rho * rec.alpha * delta) * (1.0 + 1e-12));
            assert_eq!(gn.sqrt(), rec.grad_norm);
            x = xn;
        }
    }

    #[test]
    fn newton_mr_rejects_points_outside_the_domain() {
        let f = make_fraction(1.0, 1.0);
        assert!(matches!(newton_mr_run(&f, &v(&[1.0, 1.0]), &OptimizerConfig::default()), Err(Error::Domain(_))));
    }

    #[test]
    fn additive_perturbation_contracts_at_predicted_rate() {
        let h = SymMatrix::from_diagonal(&[4.0, 1.0]);
        let q = make_quadratic(h.clone(), v(&[1.0, -1.0])).unwrap();
        let spec = PerturbationSpec::goe(0.1, 3).unwrap();
        let cfg = OptimizerConfig {
            update_mode: UpdateMode::Exact,
            hessian_source: HessianSource::Additive(spec),
            record_diagnostics: true,
            tau: 1e-12,
            ..Default::default()
        };
        let run = newton_mr_run(&q, &v(&[5.0, 5.0]), &cfg).unwrap();
        assert_eq!(run.termination, Termination::GradTol);
        let tc = crate::perturb::TheoryConstants { l_x0: 16.0, l_h: 0.0, rho: cfg.rho, theta: cfg.theta };
        for w in run.records.windows(2) {
            let d = w[1].diagnostics.as_ref().unwrap();
            assert!(d.acute);
            assert!((d.epsilon - 0.1).abs() <= 1e-12);
            let eta = crate::perturb::predicted_eta(&tc, d, UpdateMode::Exact);
            assert!(eta > 0.0);
            let ratio = (w[1].grad_norm / w[0].grad_norm).powi(2);
            assert!(ratio <= 1.0 - eta + 1e-6);
        }
    }

    #[test]
    fn newton_cg_examples() {
        let q = make_quadratic(SymMatrix::from_diagonal(&[3.0, 1.0]), v(&[1.0, 1.0])).unwrap();
        let cfg = OptimizerConfig { theta: 0.0, ..Default::default() };
        let run = newton_cg_run(&q, &Vector::zeros(2), &cfg).unwrap();
        assert_eq!((run.termination, run.iterations()), (Termination::GradTol, 1));

        let s = softmax_desk();
        let cfg = OptimizerConfig { tau: 1e-6, ..Default::default() };
        let run = newton_cg_run(&s, &Vector::zeros(s.dim()), &cfg).unwrap();
        assert_eq!(run.termination, Termination::GradTol);
        assert_eq!(run.method, Method::NewtonCg);
    }

    #[test]
    fn newton_cg_negative_curvature_fallback_descends() {
        // Indefinite Hessian diag(1, −1): CG meets negative curvature on the first direction.
        let h = SymMatrix::from_diagonal(&[1.0, -1.0]);
        let x = v(&[1.0, 1.0]);
        let g = h.matvec(&x);
        let res = cg(&h, &-&g, &KrylovConfig::default());
        let p = res.solution;
        assert!(g.dot(&p) < 0.0);
    }

    #[test]
    fn lbfgs_examples() {
        let q = identity_quadratic(4);
        let x0 = v(&[1.0, -2.0, 3.0, 0.5]);
        let run = lbfgs_run(&q, &x0, &OptimizerConfig::default()).unwrap();
        assert_eq!(run.records[1].alpha, 1.0);
        assert_eq!(run.records[1].grad_norm, 0.0);
        assert_eq!(run.iterations(), 1);

        let s = softmax_desk();
        let cfg = OptimizerConfig { tau: 1e-6, max_outer: 500, ..Default::default() };
        let run = lbfgs_run(&s, &Vector::zeros(s.dim()), &cfg).unwrap();
        assert_eq!(run.termination, Termination::GradTol);
        assert_eq!(run.skipped_pairs, 0);
    }

    #[test]
    fn two_loop_matches_bfgs_on_one_pair() {
        let mut pairs = CurvaturePairs::new(2);
        assert!(pairs.push(v(&[1.0, 0.0]), v(&[2.0, 0.0])));
        // Along s the inverse curvature is 1/2.
        let p = pairs.two_loop(&v(&[2.0, 0.0]));
        assert!((p - v(&[-1.0, 0.0])).norm() <= 1e-15);
    }

    #[test]
    fn curvature_pairs_skip_nonpositive_products_and_keep_history() {
        let mut pairs = CurvaturePairs::new(2);
        assert!(!pairs.push(v(&[1.0, 0.0]), v(&[-1.0, 0.0])));
        assert!(!pairs.push(v(&[1.0, 0.0]), v(&[0.0, 1.0])));
        assert!(pairs.is_empty());
        for k in 1..=3 {
            assert!(pairs.push(v(&[k as f64, 0.0]), v(&[1.0, 1.0])));
        }
        assert_eq!(pairs.len(), 2);
        // Strong Wolfe steps always produce ⟨s, y⟩ > 0, so runs record no skips.
        let s = softmax_desk();
        let run = lbfgs_run(&s, &Vector::zeros(s.dim()), &OptimizerConfig { max_outer: 30, ..Default::default() }).unwrap();
        assert_eq!(run.skipped_pairs, 0);
    }

    #[test]
    fn first_order_examples() {
        let q = identity_quadratic(2);
        let x0 = v(&[1.0, -4.0]);
        let cfg = FirstOrderConfig { step: 0.5, max_iters: 5, ..Default::default() };
        let run = first_order_run(&q, &x0, &cfg).unwrap();
        for (k, r) in run.records.iter().enumerate() {
            assert_eq!(r.grad_norm, x0.norm() * 0.5f64.powi(k as i32));
        }
        let momentum = FirstOrderConfig { method: FirstOrderMethod::Momentum, beta: 0.0, ..cfg.clone() };
        let a = first_order_run(&q, &x0, &cfg).unwrap();
        let b = first_order_run(&q, &x0, &momentum).unwrap();
        assert_eq!(a.final_x, b.final_x);
        assert_eq!(a.records.iter().map(|r| r.f).collect::<Vec<_>>(), b.records.iter().map(|r| r.f).collect::<Vec<_>>());
    }

    #[test]
    fn adam_decreases_softmax_loss() {
        let s = softmax_desk();
        let cfg = FirstOrderConfig {
            method: FirstOrderMethod::Adam,
            step: 0.05,
            batch_fraction: 0.1,
            max_iters: 200,
            rng_seed: 4,
            ..Default::default()
        };
        let run = first_order_run(&s, &Vector::zeros(s.dim()), &cfg).unwrap();
        assert!(run.last().f < 0.9 * run.records[0].f);
        let again = first_order_run(&s, &Vector::zeros(s.dim()), &cfg).unwrap();
        assert_eq!(run.final_x, again.final_x);
        assert!((run.records[1].oracle_calls - 0.2).abs() <= 1e-15);
    }

    #[test]
    fn every_first_order_method_runs() {
        let s = softmax_desk();
        for method in [
            FirstOrderMethod::Sgd,
            FirstOrderMethod::Momentum,
            FirstOrderMethod::Adagrad,
            FirstOrderMethod::Adadelta,
            FirstOrderMethod::Rmsprop,
            FirstOrderMethod::Adam,
        ] {
            let step = if method == FirstOrderMethod::Adadelta { 1.0 } else { 1e-3 };
            let cfg = FirstOrderConfig { method, step, batch_fraction: 0.2, max_iters: 50, ..Default::default() };
            let run = first_order_run(&s, &Vector::zeros(s.dim()), &cfg).unwrap();
            assert!(run.last().f < run.records[0].f, "{method:?}");
        }
    }

    #[test]
    fn gauss_newton_and_subsampled_runs() {
        let s = softmax_desk();
        let cfg = OptimizerConfig { tau: 1e-6, ..Default::default() };
        let run = gauss_newton_run(&s, &Vector::zeros(s.dim()), &cfg).unwrap();
        assert_eq!(run.termination, Termination::GradTol);
        let sel = SampleSelector::new(0.1, 2).unwrap();
        let cfg = OptimizerConfig { tau: 1e-6, hessian_source: HessianSource::Subsample(sel), ..Default::default() };
        let run = newton_mr_run(&s, &Vector::zeros(s.dim()), &cfg).unwrap();
        assert_eq!(run.method, Method::SsNewtonMr);
        assert_eq!(run.termination, Termination::GradTol);
        let again = newton_mr_run(&s, &Vector::zeros(s.dim()), &cfg).unwrap();
        assert_eq!(run.records.iter().map(|r| r.grad_norm).collect::<Vec<_>>(),
                   again.records.iter().map(|r| r.grad_norm).collect::<Vec<_>>());
    }

    #[test]
    fn cumulative_oracle_calls_match_records() {
        let s = softmax_desk();
        let sel = SampleSelector::new(0.05, 1).unwrap();
        let cfg = OptimizerConfig { tau: 1e-6, hessian_source: HessianSource::Subsample(sel), ..Default::default() };
        for run in [
            newton_mr_run(&s, &Vector::zeros(s.dim()), &cfg).unwrap(),
            newton_cg_run(&s, &Vector::zeros(s.dim()), &cfg).unwrap(),
            lbfgs_run(&s, &Vector::zeros(s.dim()), &OptimizerConfig::default()).unwrap(),
        ] {
            let mut total = 0.0;
            for r in &run.records[1..] {
                let (sn, bn) = (r.sample_fraction, 0.0);
                total += oracle_cost(run.method, r.inner_iters, r.ls_evals, sn, bn).unwrap();
                assert_eq!(total, r.oracle_calls);
            }
        }
    }

    #[test]
    fn trace_csv_layout() {
        let q = identity_quadratic(2);
        let run = newton_mr_run(&q, &v(&[1.0, 1.0]), &OptimizerConfig { record_diagnostics: true, ..Default::default() })
            .unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&run.records, &mut buf, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "k,f,grad_norm,alpha,inner_iters,ls_evals,oracle_calls,wall_seconds,gamma,nu,epsilon,C,r,r_tilde,acute,teps,nu_tilde,gamma_tilde"
        );
        assert_eq!(lines.count(), run.records.len());

        let plain = newton_mr_run(&q, &v(&[1.0, 1.0]), &OptimizerConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&plain.records, &mut buf, false).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("k,f,grad_norm,alpha,inner_iters,ls_evals,oracle_calls,wall_seconds\n"));
    }

    #[test]
    fn extra_trace_columns_follow_the_standard_ones() {
        let q = identity_quadratic(2);
        let run = newton_mr_run(&q, &v(&[1.0, 1.0]), &OptimizerConfig::default()).unwrap();
        assert_eq!(run.iterates.len(), run.records.len());
        assert_eq!(run.iterates.last().unwrap(), &run.final_x);
        let dist: Vec<f64> = run.iterates.iter().map(|x| x.norm()).collect();
        let mut buf = Vec::new();
        write_trace_csv_with(&run.records, &[("dist", &dist)], &mut buf, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("k,f,grad_norm,alpha,inner_iters,ls_evals,oracle_calls,wall_seconds,dist\n"));
        assert!(text.lines().nth(1).unwrap().ends_with(&format!(",{}", 2f64.sqrt())));
        assert!(write_trace_csv_with(&run.records, &[("dist", &dist[1..])], Vec::new(), false).is_err());
    }

    #[test]
    fn unit_step_mode_skips_the_line_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = crate::linalg::random_with_spectrum(&[3.0, 2.0, 1.0], &mut rng);
        let c = random_normal_vector(3, &mut rng);
        let q = crate::objectives::make_cubic_regularized(a, c, 0.5).unwrap();
        let cfg = OptimizerConfig { unit_step: true, update_mode: UpdateMode::Exact, max_outer: 10, ..Default::default() };
        let run = newton_mr_run(&q, &Vector::zeros(3), &cfg).unwrap();
        assert!(run.records[1..].iter().all(|r| r.alpha == 1.0 && r.ls_evals == 1));
        assert_eq!(run.termination, Termination::GradTol);
    }
}
