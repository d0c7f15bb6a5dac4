//! Configuration-driven experiments: grids of optimizer runs written as trace CSVs with a
//! manifest, performance profiles over final metrics, and SVG plots of traces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{random_normal_vector, random_with_spectrum, Vector};
use crate::objectives::{
    estimation_error, gen_gmm_data, gen_softmax_data, load_csv, make_fraction, make_gmm, make_quadratic,
    make_softmax, CsvOptions, GmmGroundTruth, Problem, SampleSelector,
};
use crate::optim::{
    first_order_run, gauss_newton_run, lbfgs_run, newton_cg_run, newton_mr_run, write_trace_csv_with,
    FirstOrderConfig, HessianSource, Method, OptimizerConfig, RunResult, Termination, UpdateMode,
};
use crate::perturb::{sample_goe, PerturbationSpec};

/// Environment variable naming the default parent directory for experiment output.
pub const OUTPUT_ENV: &str = "NEWTON_MR_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Newton-MR with exact updates under additive GOE noise of several sizes.
    Unstable,
    /// Newton-type methods on softmax regression across Hessian sample fractions.
    SoftmaxCompare,
    /// Perturbation and sampling sweeps with spectral diagnostics recorded.
    StabilitySweep,
    /// Independent GMM instances per seed, summarized by performance profiles.
    GmmProfile,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Fraction {
        #[serde(default = "default_fraction_a")]
        a: f64,
        #[serde(default = "default_fraction_b")]
        b: f64,
    },
    Softmax {
        #[serde(default = "default_softmax_n")]
        n: usize,
        #[serde(default = "default_softmax_p")]
        p: usize,
        #[serde(default = "default_softmax_classes")]
        classes: usize,
        #[serde(default)]
        data_seed: u64,
        /// CSV with features followed by an integer label column; replaces synthesis.
        #[serde(default)]
        path: Option<PathBuf>,
        #[serde(default)]
        header: bool,
        #[serde(default)]
        scale: bool,
    },
    Gmm {
        #[serde(default = "default_gmm_p")]
        p: usize,
        #[serde(default = "default_gmm_n")]
        n: usize,
        #[serde(default = "default_gmm_cond")]
        cond: f64,
        /// Fixed data seed; when absent every run seed draws its own instance.
        #[serde(default)]
        data_seed: Option<u64>,
    },
    /// `½xᵀAx + cᵀx` with `A = Q diag(spectrum) Qᵀ` and `c ~ N(0, I)`.
    Quadratic {
        spectrum: Vec<f64>,
        #[serde(default)]
        data_seed: u64,
    },
}

fn default_fraction_a() -> f64 {
    100.0
}
fn default_fraction_b() -> f64 {
    1.0
}
fn default_softmax_n() -> usize {
    1000
}
fn default_softmax_p() -> usize {
    20
}
fn default_softmax_classes() -> usize {
    5
}
fn default_gmm_p() -> usize {
    10
}
fn default_gmm_n() -> usize {
    1000
}
fn default_gmm_cond() -> f64 {
    1e4
}

/// A built problem instance and, for mixtures, its ground truth.
pub struct Instance {
    pub problem: Box<dyn Problem>,
    pub truth: Option<GmmGroundTruth>,
}

impl ProblemSpec {
    pub fn build(&self, run_seed: u64) -> Result<Instance> {
        Ok(match self {
            ProblemSpec::Fraction { a, b } => Instance { problem: Box::new(make_fraction(*a, *b)), truth: None },
            ProblemSpec::Softmax { n, p, classes, data_seed, path, header, scale } => {
                let data = match path {
                    Some(path) => load_csv(path, CsvOptions { has_labels: true, header: *header, scale: *scale })?,
                    None => gen_softmax_data(*n, *p, *classes, *data_seed)?,
                };
                Instance { problem: Box::new(make_softmax(data, *classes)?), truth: None }
            }
            ProblemSpec::Gmm { p, n, cond, data_seed } => {
                let (data, truth) = gen_gmm_data(*p, *n, *cond, data_seed.unwrap_or(run_seed))?;
                let problem = make_gmm(data, &truth.sigma1, &truth.sigma2)?;
                Instance { problem: Box::new(problem), truth: Some(truth) }
            }
            ProblemSpec::Quadratic { spectrum, data_seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*data_seed);
                let a = random_with_spectrum(spectrum, &mut rng);
                let c = random_normal_vector(spectrum.len(), &mut rng);
                Instance { problem: Box::new(make_quadratic(a, c)?), truth: None }
            }
        })
    }

    fn validate(&self) -> Result<()> {
        match self {
            ProblemSpec::Softmax { path: Some(path), .. } if !path.exists() => {
                Err(Error::Config(format!("dataset {} does not exist", path.display())))
            }
            ProblemSpec::Quadratic { spectrum, .. } if spectrum.is_empty() => {
                Err(Error::Config("quadratic spectrum must not be empty".into()))
            }
            _ => Ok(()),
        }
    }
}

/// One optimizer entry of an experiment. Second-order fields mirror [`OptimizerConfig`],
/// first-order fields mirror [`FirstOrderConfig`]; each method reads the ones it uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSpec {
    pub method: Method,
    /// Name used in trace files and profiles; defaults to the method name.
    pub label: Option<String>,
    pub rho: f64,
    pub tau: f64,
    pub theta: f64,
    pub inner_max: usize,
    pub ls_max_backtracks: usize,
    pub ls_shrink: f64,
    pub alpha0: f64,
    pub max_outer: usize,
    pub update_mode: UpdateMode,
    pub rank_tol: Option<f64>,
    pub unit_step: bool,
    pub record_diagnostics: bool,
    pub direct_descent_check: bool,
    pub lbfgs_history: usize,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    /// Hessian sample fraction for this method only, instead of the experiment's list.
    pub sample_fraction: Option<f64>,
    pub step: f64,
    /// Candidate steps; when non-empty the best one on the first seed replaces `step`.
    pub step_grid: Vec<f64>,
    pub batch_fraction: f64,
    pub max_iters: usize,
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub decay: f64,
    pub eps: f64,
}

impl Default for MethodSpec {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        let f = FirstOrderConfig::default();
        Self {
            method: Method::NewtonMr,
            label: None,
            rho: o.rho,
            tau: o.tau,
            theta: o.theta,
            inner_max: o.inner_max,
            ls_max_backtracks: o.ls_max_backtracks,
            ls_shrink: o.ls_shrink,
            alpha0: o.alpha0,
            max_outer: o.max_outer,
            update_mode: o.update_mode,
            rank_tol: o.rank_tol,
            unit_step: o.unit_step,
            record_diagnostics: o.record_diagnostics,
            direct_descent_check: o.direct_descent_check,
            lbfgs_history: o.lbfgs_history,
            wolfe_c1: o.wolfe_c1,
            wolfe_c2: o.wolfe_c2,
            sample_fraction: None,
            step: f.step,
            step_grid: Vec::new(),
            batch_fraction: f.batch_fraction,
            max_iters: f.max_iters,
            beta: f.beta,
            beta1: f.beta1,
            beta2: f.beta2,
            decay: f.decay,
            eps: f.eps,
        }
    }
}

impl MethodSpec {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    fn sampled(&self) -> bool {
        matches!(self.method, Method::SsNewtonMr | Method::SsNewtonCg)
    }

    fn perturbable(&self) -> bool {
        matches!(self.method, Method::NewtonMr | Method::NewtonCg)
    }

    pub fn optimizer_config(&self, hessian_source: HessianSource) -> OptimizerConfig {
        OptimizerConfig {
            rho: self.rho,
            tau: self.tau,
            theta: self.theta,
            inner_max: self.inner_max,
            ls_max_backtracks: self.ls_max_backtracks,
            ls_shrink: self.ls_shrink,
            alpha0: self.alpha0,
            max_outer: self.max_outer,
            update_mode: self.update_mode,
            hessian_source,
            rank_tol: self.rank_tol,
            unit_step: self.unit_step,
            record_diagnostics: self.record_diagnostics,
            direct_descent_check: self.direct_descent_check,
            lbfgs_history: self.lbfgs_history,
            wolfe_c1: self.wolfe_c1,
            wolfe_c2: self.wolfe_c2,
        }
    }

    pub fn first_order_config(&self, rng_seed: u64) -> Option<FirstOrderConfig> {
        Some(FirstOrderConfig {
            method: self.method.first_order()?,
            step: self.step,
            batch_fraction: self.batch_fraction,
            rng_seed,
            max_iters: self.max_iters,
            tau: self.tau,
            beta: self.beta,
            beta1: self.beta1,
            beta2: self.beta2,
            decay: self.decay,
            eps: self.eps,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    /// One GOE direction per run, rescaled to each `ε`.
    Fixed,
    /// A fresh GOE draw every outer iteration.
    Resample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartPoint {
    Zeros,
    /// `x₀ ~ N(0, I)` drawn from the run seed.
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub experiment: ExperimentKind,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Hessian sample fractions for the sub-sampled methods.
    #[serde(default)]
    pub fractions: Vec<f64>,
    /// Additive perturbation sizes for Newton-MR and Newton-CG.
    #[serde(default)]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub perturbation: Option<PerturbationMode>,
    /// Also run the perturbable methods without noise when `epsilons` is set. The
    /// unperturbed run uses the default rank tolerance since its Hessian is exactly singular.
    #[serde(default)]
    pub include_unperturbed: Option<bool>,
    #[serde(default)]
    pub start: Option<StartPoint>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Write measured wall-clock seconds instead of 0 (traces then differ between reruns).
    #[serde(default)]
    pub timing: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Fills the per-experiment defaults and checks the configuration.
    pub fn resolve(mut self) -> Result<Self> {
        let kind = self.experiment;
        self.perturbation.get_or_insert(match kind {
            ExperimentKind::Unstable => PerturbationMode::Fixed,
            _ => PerturbationMode::Resample,
        });
        self.include_unperturbed.get_or_insert(kind == ExperimentKind::Unstable);
        self.start.get_or_insert(match kind {
            ExperimentKind::Unstable => StartPoint::Normal,
            _ => StartPoint::Zeros,
        });
        if kind == ExperimentKind::StabilitySweep {
            for m in self.methods.iter_mut().filter(|m| m.method.first_order().is_none()) {
                m.record_diagnostics = true;
            }
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("experiment name {:?} must be a non-empty file name", self.name));
        }
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        self.problem.validate()?;
        match (self.experiment, &self.problem) {
            (ExperimentKind::SoftmaxCompare, ProblemSpec::Softmax { .. })
            | (ExperimentKind::GmmProfile, ProblemSpec::Gmm { .. }) => {}
            (ExperimentKind::SoftmaxCompare, _) => return bad("softmax_compare needs a softmax problem".into()),
            (ExperimentKind::GmmProfile, _) => return bad("gmm_profile needs a gmm problem".into()),
            _ => {}
        }
        if self.experiment == ExperimentKind::Unstable && self.epsilons.is_empty() {
            return bad("unstable needs at least one epsilon".into());
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return bad(format!("sample fraction {f} outside (0, 1]"));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return bad(format!("epsilon {e} must be positive"));
        }
        let mut labels = BTreeSet::new();
        for m in &self.methods {
            let label = m.label();
            if !labels.insert(label.clone()) {
                return bad(format!("duplicate method label {label}; set distinct labels"));
            }
            if label.is_empty() || label.contains("__") || label.contains(['/', '\\']) {
                return bad(format!("method label {label:?} must be a plain name without \"__\""));
            }
            if m.sampled() && m.sample_fraction.is_none() && self.fractions.is_empty() {
                return bad(format!("{label} needs sample fractions"));
            }
            if let Some(f) = m.sample_fraction {
                SampleSelector::new(f, 0)?;
            }
            match m.first_order_config(0) {
                Some(fo) => {
                    if !(fo.batch_fraction > 0.0 && fo.batch_fraction <= 1.0) {
                        return bad(format!("{label}: batch_fraction outside (0, 1]"));
                    }
                    if let Some(s) = std::iter::once(&m.step).chain(&m.step_grid).find(|s| !(**s > 0.0 && s.is_finite())) {
                        return bad(format!("{label}: step {s} must be positive"));
                    }
                }
                None => m.optimizer_config(HessianSource::Full).validate()?,
            }
        }
        Ok(())
    }

    /// Output directory: the configured one, else `$NEWTON_MR_OUT/<name>`, else `runs/<name>`.
    pub fn output_dir(&self) -> PathBuf {
        if let Some(dir) = &self.output_dir {
            return dir.clone();
        }
        match std::env::var_os(OUTPUT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root).join(&self.name),
            _ => PathBuf::from("runs").join(&self.name),
        }
    }

    /// The grid of runs, in a fixed order.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for (mi, m) in self.methods.iter().enumerate() {
            let variants: Vec<Variant> = if m.sampled() {
                match m.sample_fraction {
                    Some(f) => vec![Variant::Fraction(f)],
                    None => self.fractions.iter().map(|f| Variant::Fraction(*f)).collect(),
                }
            } else if m.perturbable() && !self.epsilons.is_empty() {
                let base = self.include_unperturbed.unwrap_or(false).then_some(Variant::Unperturbed);
                base.into_iter().chain(self.epsilons.iter().map(|e| Variant::Epsilon(*e))).collect()
            } else {
                vec![Variant::Plain]
            };
            for variant in variants {
                for &seed in &self.seeds {
                    out.push(RunSpec { method_index: mi, key: variant.key(&m.label()), seed, variant });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Plain,
    Fraction(f64),
    Epsilon(f64),
    Unperturbed,
}

impl Variant {
    fn key(self, label: &str) -> String {
        match self {
            Variant::Plain => label.to_string(),
            Variant::Fraction(f) => format!("{label}@s{f}"),
            Variant::Epsilon(e) => format!("{label}@eps{e:e}"),
            Variant::Unperturbed => format!("{label}@unperturbed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSpec {
    pub method_index: usize,
    /// Method label plus variant, e.g. `ss-newton-mr@s0.05`.
    pub key: String,
    pub seed: u64,
    pub variant: Variant,
}

impl RunSpec {
    pub fn file_name(&self) -> String {
        format!("{}__seed{}.csv", self.key, self.seed)
    }
}

/// Starting point and perturbation seed derived from a run seed.
fn start_for(start: StartPoint, dim: usize, seed: u64) -> (Vector, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = match start {
        StartPoint::Zeros => Vector::zeros(dim),
        StartPoint::Normal => random_normal_vector(dim, &mut rng),
    };
    (x0, rng.next_u64())
}

/// Runs a first-order method for every step in `grid` and returns the step with the
/// smallest finite final `f`, together with all `(step, final f)` pairs.
pub fn grid_search_step(
    problem: &dyn Problem,
    x0: &Vector,
    base: &FirstOrderConfig,
    grid: &[f64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty step grid".into()));
    }
    let scores: Vec<(f64, f64)> = grid
        .iter()
        .map(|&step| {
            let f = match first_order_run(problem, x0, &FirstOrderConfig { step, ..base.clone() }) {
                Ok(run) if run.last().f.is_finite() => run.last().f,
                _ => f64::INFINITY,
            };
            (step, f)
        })
        .collect();
    let best = scores
        .iter()
        .filter(|(_, f)| f.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(s, _)| *s)
        .ok_or_else(|| Error::InvalidInput("no step in the grid produced a finite objective".into()))?;
    Ok((best, scores))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub method: String,
    pub algorithm: Method,
    pub seed: u64,
    pub variant: Variant,
    /// Trace path relative to the output directory.
    pub trace: Option<String>,
    pub termination: Option<Termination>,
    pub iterations: Option<usize>,
    pub final_f: Option<f64>,
    pub final_grad_norm: Option<f64>,
    pub final_estimation_error: Option<f64>,
    pub oracle_calls: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub result: Option<RunResult>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub created_unix_seconds: u64,
    pub config: ExperimentConfig,
    pub output_dir: PathBuf,
    /// Steps picked by grid search, by method label.
    pub selected_steps: BTreeMap<String, f64>,
    pub runs: Vec<RunOutcome>,
    pub profile_notes: Vec<String>,
    pub files: Vec<FileHash>,
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub dir: PathBuf,
    pub manifest_path: PathBuf,
    pub runs: Vec<RunOutcome>,
    pub profiles: Vec<ProfileTable>,
    pub selected_steps: BTreeMap<String, f64>,
}

impl ExperimentReport {
    pub fn errors(&self) -> impl Iterator<Item = &RunOutcome> {
        self.runs.iter().filter(|r| r.error.is_some())
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn create_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn execute(
    cfg: &ExperimentConfig,
    spec: &RunSpec,
    steps: &BTreeMap<String, f64>,
    dir: &Path,
) -> Result<(RunResult, Option<Vec<f64>>, String)> {
    let m = &cfg.methods[spec.method_index];
    let inst = cfg.problem.build(spec.seed)?;
    let problem = inst.problem.as_ref();
    let (x0, noise_seed) = start_for(cfg.start.unwrap_or(StartPoint::Zeros), problem.dim(), spec.seed);
    let result = match m.first_order_config(spec.seed) {
        Some(mut fo) => {
            if let Some(step) = steps.get(&m.label()) {
                fo.step = *step;
            }
            first_order_run(problem, &x0, &fo)?
        }
        None => {
            let source = match spec.variant {
                Variant::Fraction(f) => HessianSource::Subsample(SampleSelector::new(f, spec.seed)?),
                Variant::Epsilon(e) => HessianSource::Additive(match cfg.perturbation {
                    Some(PerturbationMode::Fixed) => PerturbationSpec::fixed(sample_goe(problem.dim(), 1.0, noise_seed), e)?,
                    _ => PerturbationSpec::goe(e, noise_seed)?,
                }),
                Variant::Plain | Variant::Unperturbed => HessianSource::Full,
            };
            let mut oc = m.optimizer_config(source);
            if spec.variant == Variant::Unperturbed {
                oc.rank_tol = None;
            }
            match m.method {
                Method::NewtonMr | Method::SsNewtonMr => newton_mr_run(problem, &x0, &oc)?,
                Method::NewtonCg | Method::SsNewtonCg => newton_cg_run(problem, &x0, &oc)?,
                Method::GaussNewton => gauss_newton_run(problem, &x0, &oc)?,
                Method::Lbfgs => lbfgs_run(problem, &x0, &oc)?,
                other => unreachable!("{other} is first-order"),
            }
        }
    };
    let errors = match &inst.truth {
        Some(truth) => Some(result.iterates.iter().map(|x| estimation_error(x, truth)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let rel = format!("traces/{}", spec.file_name());
    let extra: Vec<(&str, &[f64])> = errors.as_deref().map(|e| ("estimation_error", e)).into_iter().collect();
    let file = create_file(&dir.join(&rel))?;
    write_trace_csv_with(&result.records, &extra, std::io::BufWriter::new(file), cfg.timing)?;
    Ok((result, errors, rel))
}

/// Runs every (method, variant, seed) of the experiment, writes one trace per run,
/// profile tables for `gmm_profile`, and finally `manifest.json`. Run failures are
/// recorded in the manifest and do not stop the experiment.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<ExperimentReport> {
    let cfg = cfg.resolve()?;
    let dir = cfg.output_dir();
    let traces = dir.join("traces");
    fs::create_dir_all(&traces).map_err(|e| Error::io(&traces, e))?;

    let mut selected_steps = BTreeMap::new();
    let first_seed = cfg.seeds[0];
    for m in cfg.methods.iter().filter(|m| !m.step_grid.is_empty()) {
        let Some(fo) = m.first_order_config(first_seed) else { continue };
        let inst = cfg.problem.build(first_seed)?;
        let (x0, _) = start_for(cfg.start.unwrap_or(StartPoint::Zeros), inst.problem.dim(), first_seed);
        let (step, scores) = grid_search_step(inst.problem.as_ref(), &x0, &fo, &m.step_grid)?;
        log::info!("{}: grid search picked step {step} from {scores:?}", m.label());
        selected_steps.insert(m.label(), step);
    }

    let specs = cfg.runs();
    let runs: Vec<RunOutcome> = specs
        .par_iter()
        .map(|spec| {
            let m = &cfg.methods[spec.method_index];
            let mut out = RunOutcome {
                method: spec.key.clone(),
                algorithm: m.method,
                seed: spec.seed,
                variant: spec.variant,
                trace: None,
                termination: None,
                iterations: None,
                final_f: None,
                final_grad_norm: None,
                final_estimation_error: None,
                oracle_calls: None,
                error: None,
                result: None,
            };
            match execute(&cfg, spec, &selected_steps, &dir) {
                Ok((result, errors, rel)) => {
                    let last = result.last();
                    out.algorithm = result.method;
                    out.trace = Some(rel);
                    out.termination = Some(result.termination);
                    out.iterations = Some(result.iterations());
                    out.final_f = Some(last.f);
                    out.final_grad_norm = Some(last.grad_norm);
                    out.oracle_calls = Some(last.oracle_calls);
                    out.final_estimation_error = errors.and_then(|e| e.last().copied());
                    out.result = Some(result);
                }
                Err(e) => {
                    log::warn!("{} seed {}: {e}", spec.key, spec.seed);
                    out.error = Some(e.to_string());
                }
            }
            out
        })
        .collect();

    let mut produced: Vec<String> = runs.iter().filter_map(|r| r.trace.clone()).collect();
    let mut profiles = Vec::new();
    let mut profile_notes = Vec::new();
    if cfg.experiment == ExperimentKind::GmmProfile {
        let summaries: Vec<RunSummary> = runs.iter().map(RunSummary::from_outcome).collect();
        for metric in Metric::ALL {
            let table = performance_profile(&summaries, metric)?;
            profile_notes.extend(table.excluded.iter().map(|run| format!("{}: run {run} excluded, no method finished", metric.name())));
            for (rel, ratios) in [(format!("profile_{}.csv", metric.name()), false), (format!("ratios_{}.csv", metric.name()), true)] {
                let file = create_file(&dir.join(&rel))?;
                if ratios {
                    table.write_ratios_csv(file)?;
                } else {
                    table.write_csv(file)?;
                }
                produced.push(rel);
            }
            profiles.push(table);
        }
    }

    let files = produced
        .iter()
        .map(|rel| Ok(FileHash { path: rel.clone(), sha256: sha256_file(&dir.join(rel))? }))
        .collect::<Result<Vec<_>>>()?;
    let created_unix_seconds =
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let manifest = Manifest {
        created_unix_seconds,
        config: cfg.clone(),
        output_dir: dir.clone(),
        selected_steps: selected_steps.clone(),
        runs,
        profile_notes,
        files,
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(format!("manifest: {e}")))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(ExperimentReport { dir, manifest_path, runs: manifest.runs, profiles, selected_steps })
}

// ---------------------------------------------------------------------------------------
// Performance profiles

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    F,
    GradNorm,
    EstimationError,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::F, Metric::GradNorm, Metric::EstimationError];

    /// Also the trace column the metric is read from.
    pub fn name(self) -> &'static str {
        match self {
            Metric::F => "f",
            Metric::GradNorm => "grad_norm",
            Metric::EstimationError => "estimation_error",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.replace('-', "_");
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::InvalidInput(format!("unknown metric {s:?} (f, grad_norm, estimation_error)")))
    }
}

/// Final metrics of one run of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run: String,
    pub method: String,
    pub f: Option<f64>,
    pub grad_norm: Option<f64>,
    pub estimation_error: Option<f64>,
}

impl RunSummary {
    pub fn from_outcome(o: &RunOutcome) -> Self {
        Self {
            run: format!("seed{}", o.seed),
            method: o.method.clone(),
            f: o.final_f,
            grad_norm: o.final_grad_norm,
            estimation_error: o.final_estimation_error,
        }
    }

    pub fn metric(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::F => self.f,
            Metric::GradNorm => self.grad_norm,
            Metric::EstimationError => self.estimation_error,
        }
        .filter(|v| v.is_finite())
    }
}

/// Performance ratio of `value` against the best value of its run. For positive `best`
/// this is `value / best`; the shifted form keeps ratios ≥ 1 when objectives are negative.
pub fn profile_ratio(value: f64, best: f64) -> f64 {
    if value == best {
        1.0
    } else {
        1.0 + (value - best) / best.abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTable {
    pub metric: Metric,
    /// Sorted method keys.
    pub methods: Vec<String>,
    /// Sorted run keys that entered the profile.
    pub runs: Vec<String>,
    /// `values[r][m]`; `None` when the method has no finite value on the run.
    pub values: Vec<Vec<Option<f64>>>,
    /// `ratios[r][m]`, infinite for missing values.
    pub ratios: Vec<Vec<f64>>,
    /// Runs where no method produced a finite value.
    pub excluded: Vec<String>,
    /// Breakpoints of the curves: 1 and every finite ratio, ascending.
    pub lambdas: Vec<f64>,
    /// `curves[m][j]`: fraction of runs with ratio ≤ `lambdas[j]`.
    pub curves: Vec<Vec<f64>>,
}

impl ProfileTable {
    /// Curve value of method index `m` at an arbitrary `λ`.
    pub fn curve_at(&self, m: usize, lambda: f64) -> f64 {
        let hits = self.ratios.iter().filter(|row| row[m] <= lambda).count();
        hits as f64 / self.runs.len() as f64
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Config(format!("writing profile: {e}"));
        let mut header = vec!["lambda".to_string()];
        header.extend(self.methods.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (j, lambda) in self.lambdas.iter().enumerate() {
            let mut row = vec![lambda.to_string()];
            row.extend(self.curves.iter().map(|c| c[j].to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Config(format!("writing profile: {e}")))
    }

    pub fn write_ratios_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Config(format!("writing ratios: {e}"));
        let mut header = vec!["run".to_string()];
        header.extend(self.methods.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (run, row) in self.runs.iter().zip(&self.ratios) {
            let mut fields = vec![run.clone()];
            fields.extend(row.iter().map(|r| r.to_string()));
            w.write_record(&fields).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Config(format!("writing ratios: {e}")))
    }
}

/// Performance profile over the final `metric` (smaller is better) of every run.
pub fn performance_profile(summaries: &[RunSummary], metric: Metric) -> Result<ProfileTable> {
    let methods: Vec<String> = summaries.iter().map(|s| s.method.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if methods.len() < 2 {
        return Err(Error::InvalidInput(format!("a performance profile needs at least 2 methods, got {}", methods.len())));
    }
    let mut by_run: BTreeMap<&str, Vec<Option<f64>>> = BTreeMap::new();
    for s in summaries {
        let m = methods.binary_search(&s.method).expect("method collected above");
        let row = by_run.entry(&s.run).or_insert_with(|| vec![None; methods.len()]);
        if let Some(v) = s.metric(metric) {
            row[m] = Some(row[m].map_or(v, |old: f64| old.min(v)));
        }
    }
    let (mut runs, mut values, mut ratios, mut excluded) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (run, row) in by_run {
        let Some(best) = row.iter().flatten().copied().min_by(f64::total_cmp) else {
            excluded.push(run.to_string());
            continue;
        };
        ratios.push(row.iter().map(|v| v.map_or(f64::INFINITY, |v| profile_ratio(v, best))).collect::<Vec<_>>());
        values.push(row);
        runs.push(run.to_string());
    }
    if runs.is_empty() {
        return Err(Error::InvalidInput(format!("no run has a finite {} for any method", metric.name())));
    }
    let mut lambdas: Vec<f64> = ratios.iter().flatten().copied().filter(|r| r.is_finite()).chain([1.0]).collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let mut table =
        ProfileTable { metric, methods, runs, values, ratios, excluded, lambdas, curves: Vec::new() };
    table.curves =
        (0..table.methods.len()).map(|m| table.lambdas.iter().map(|l| table.curve_at(m, *l)).collect()).collect();
    Ok(table)
}

/// Reads final metrics from a directory of `<method>__<run>.csv` traces (or an
/// experiment directory containing `traces/`).
pub fn summaries_from_dir(dir: &Path) -> Result<Vec<RunSummary>> {
    let dir = if dir.join("traces").is_dir() { dir.join("traces") } else { dir.to_path_buf() };
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for path in paths {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let Some((method, run)) = stem.split_once("__") else {
            log::warn!("skipping {}: name is not <method>__<run>.csv", path.display());
            continue;
        };
        let trace = Trace::read_csv(&path)?;
        out.push(RunSummary {
            run: run.to_string(),
            method: method.to_string(),
            f: trace.last("f"),
            grad_norm: trace.last("grad_norm"),
            estimation_error: trace.last("estimation_error"),
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!("no traces found in {}", dir.display())));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------------------
// Traces and plots

/// A trace CSV read back as named numeric columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub label: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Trace {
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let parse_err = |row: usize, column: usize, message: String| Error::Parse { row, column, message };
        let columns: Vec<String> =
            reader.headers().map_err(|e| parse_err(0, 0, e.to_string()))?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| parse_err(i + 1, 0, e.to_string()))?;
            let row = rec
                .iter()
                .enumerate()
                .map(|(j, field)| match field {
                    "" => Ok(f64::NAN),
                    "true" => Ok(1.0),
                    "false" => Ok(0.0),
                    other => other.parse::<f64>().map_err(|e| parse_err(i + 1, j, format!("{other:?}: {e}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace").to_string();
        Ok(Self { label, columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r.get(j).copied().unwrap_or(f64::NAN)).collect())
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.column(name)?.last().copied().filter(|v| !v.is_nan())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XAxis {
    Iteration,
    OracleCalls,
    WallSeconds,
}

impl XAxis {
    pub fn column(self) -> &'static str {
        match self {
            XAxis::Iteration => "k",
            XAxis::OracleCalls => "oracle_calls",
            XAxis::WallSeconds => "wall_seconds",
        }
    }
}

impl FromStr for XAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "iteration" | "k" => Ok(XAxis::Iteration),
            "oracle_calls" => Ok(XAxis::OracleCalls),
            "wall_seconds" => Ok(XAxis::WallSeconds),
            _ => Err(Error::InvalidInput(format!("unknown x axis {s:?} (iteration, oracle_calls, wall_seconds)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YAxis {
    F,
    GradNorm,
    Alpha,
    EstimationError,
}

impl YAxis {
    pub fn column(self) -> &'static str {
        match self {
            YAxis::F => "f",
            YAxis::GradNorm => "grad_norm",
            YAxis::Alpha => "alpha",
            YAxis::EstimationError => "estimation_error",
        }
    }
}

impl FromStr for YAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "f" => Ok(YAxis::F),
            "grad_norm" => Ok(YAxis::GradNorm),
            "alpha" => Ok(YAxis::Alpha),
            "estimation_error" => Ok(YAxis::EstimationError),
            _ => Err(Error::InvalidInput(format!("unknown y axis {s:?} (f, grad_norm, alpha, estimation_error)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub svg: String,
    pub warnings: Vec<String>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One polyline per trace with a legend. With `log_y`, non-positive values are clamped
/// to the smallest positive value of their trace and a warning is returned.
pub fn plot_traces(traces: &[Trace], x: XAxis, y: YAxis, log_y: bool) -> Result<Plot> {
    if traces.is_empty() {
        return Err(Error::InvalidInput("no traces to plot".into()));
    }
    let mut warnings = Vec::new();
    let mut series = Vec::new();
    for t in traces {
        let missing = |c: &str| Error::InvalidInput(format!("trace {} has no {c} column", t.label));
        let xs = t.column(x.column()).ok_or_else(|| missing(x.column()))?;
        let mut ys = t.column(y.column()).ok_or_else(|| missing(y.column()))?;
        if xs.is_empty() {
            return Err(Error::InvalidInput(format!("trace {} is empty", t.label)));
        }
        if log_y {
            let floor = ys.iter().copied().filter(|v| *v > 0.0 && v.is_finite()).min_by(f64::total_cmp);
            let Some(floor) = floor else {
                return Err(Error::InvalidInput(format!("trace {} has no positive {} for a log axis", t.label, y.column())));
            };
            let clamped = ys.iter().filter(|v| **v <= 0.0).count();
            if clamped > 0 {
                let msg = format!("{}: {clamped} non-positive {} values clamped to {floor:e}", t.label, y.column());
                log::warn!("{msg}");
                warnings.push(msg);
                ys.iter_mut().filter(|v| **v <= 0.0).for_each(|v| *v = floor);
            }
            ys.iter_mut().for_each(|v| *v = v.log10());
        }
        let pts: Vec<(f64, f64)> = xs.into_iter().zip(ys).filter(|(a, b)| a.is_finite() && b.is_finite()).collect();
        series.push((t.label.as_str(), pts));
    }

    let range = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        match (lo.is_finite(), lo < hi) {
            (false, _) => (0.0, 1.0),
            (true, false) => (lo - 0.5, hi + 0.5),
            (true, true) => (lo, hi),
        }
    };
    let (x0, x1) = range(&mut series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y0, y1) = range(&mut series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let (w, h, left, right, top, bottom) = (720.0, 440.0, 80.0, 200.0, 20.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let sx = |v: f64| left + (v - x0) / (x1 - x0) * pw;
    let sy = |v: f64| top + (1.0 - (v - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let ylabel = if log_y { format!("1e{yv:.1}") } else { format!("{yv:.3e}") };
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{:.3e}</text>"#,
            sx(xv),
            top + ph + 16.0,
            xv
        );
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{ylabel}</text>"#, left - 6.0, sy(yv) + 4.0);
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10.0,
        x.column()
    );
    let ytitle = if log_y { format!("log10 {}", y.column()) } else { y.column().to_string() };
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 14 {:.2})">{ytitle}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = pts.iter().map(|(a, b)| format!("{:.2},{:.2}", sx(*a), sy(*b))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, points.join(" "));
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(svg, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11">{}</text>"#, lx + 26.0, ly + 4.0, xml_escape(label));
    }
    svg.push_str("</svg>\n");
    Ok(Plot { svg, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn summary(run: &str, method: &str, f: f64) -> RunSummary {
        RunSummary { run: run.into(), method: method.into(), f: Some(f), grad_norm: Some(f), estimation_error: None }
    }

    #[test]
    fn better_method_profile_is_one_at_unit_ratio() {
        let t = performance_profile(&[summary("r", "a", 2.0), summary("r", "b", 5.0)], Metric::F).unwrap();
        assert_eq!(t.methods, ["a", "b"]);
        assert_eq!(t.curve_at(0, 1.0), 1.0);
        assert_eq!(t.curve_at(1, 1.0), 0.0);
        assert_eq!(t.curve_at(1, 2.4999), 0.0);
        assert_eq!(t.curve_at(1, 2.5), 1.0);
        assert_eq!(t.lambdas, [1.0, 2.5]);
    }

    #[test]
    fn tied_methods_both_reach_one_at_unit_ratio() {
        let t = performance_profile(&[summary("r", "a", 3.0), summary("r", "b", 3.0)], Metric::F).unwrap();
        assert_eq!(t.curves, vec![vec![1.0], vec![1.0]]);
    }

    #[test]
    fn ratios_match_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rows = Vec::new();
        let mut summaries = Vec::new();
        for r in 0..10 {
            let vals: Vec<f64> = (0..3).map(|_| 0.1 + (rng.next_u32() % 1000) as f64 / 100.0).collect();
            for (m, v) in vals.iter().enumerate() {
                summaries.push(summary(&format!("run{r:02}"), &format!("m{m}"), *v));
            }
            rows.push(vals);
        }
        let t = performance_profile(&summaries, Metric::F).unwrap();
        for (r, vals) in rows.iter().enumerate() {
            let best = vals.iter().copied().fold(f64::INFINITY, f64::min);
            for m in 0..3 {
                assert!((t.ratios[r][m] - vals[m] / best).abs() <= 1e-12 * vals[m] / best);
            }
        }
        for m in 0..3 {
            for lambda in [1.0, 1.5, 3.0, 200.0] {
                let expect = rows.iter().filter(|v| v[m] / v.iter().copied().fold(f64::INFINITY, f64::min) <= lambda * (1.0 + 1e-12)).count();
                assert!((t.curve_at(m, lambda * (1.0 + 1e-12)) - expect as f64 / 10.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn negative_objectives_keep_ratios_at_least_one() {
        let t = performance_profile(&[summary("r", "a", -10.0), summary("r", "b", -9.0)], Metric::F).unwrap();
        assert_eq!(t.ratios[0][0], 1.0);
        assert!((t.ratios[0][1] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn failed_runs_are_excluded_and_missing_values_never_count() {
        let mut s = vec![summary("good", "a", 1.0), summary("good", "b", 2.0)];
        s.push(RunSummary { run: "bad".into(), method: "a".into(), f: None, grad_norm: None, estimation_error: None });
        s.push(RunSummary { run: "bad".into(), method: "b".into(), f: Some(f64::NAN), grad_norm: None, estimation_error: None });
        s.push(RunSummary { run: "half".into(), method: "a".into(), f: Some(1.0), grad_norm: None, estimation_error: None });
        let t = performance_profile(&s, Metric::F).unwrap();
        assert_eq!(t.excluded, ["bad"]);
        assert_eq!(t.runs, ["good", "half"]);
        assert_eq!(t.ratios[1][1], f64::INFINITY);
        assert_eq!(t.curve_at(1, 1e300), 0.5);
        assert!(performance_profile(&s[..2], Metric::EstimationError).is_err());
        assert!(performance_profile(&s[..1], Metric::F).is_err());
    }

    proptest! {
        #[test]
        fn profile_curves_are_monotone_and_bounded(
            vals in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 3), 1..12)
        ) {
            let summaries: Vec<RunSummary> = vals.iter().enumerate().flat_map(|(r, row)| {
                row.iter().enumerate().map(move |(m, v)| summary(&format!("r{r}"), &format!("m{m}"), *v))
            }).collect();
            let t = performance_profile(&summaries, Metric::F).unwrap();
            for c in &t.curves {
                prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            prop_assert!(t.curves.iter().any(|c| c[0] > 0.0));
            prop_assert!(t.ratios.iter().flatten().all(|r| *r >= 1.0));
        }
    }

    fn trace(label: &str, columns: &[&str], rows: Vec<Vec<f64>>) -> Trace {
        Trace { label: label.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows }
    }

    #[test]
    fn single_trace_plots_one_three_vertex_polyline() {
        let t = trace("run", &["k", "f"], vec![vec![0.0, 3.0], vec![1.0, 2.0], vec![2.0, 1.0]]);
        let plot = plot_traces(&[t], XAxis::Iteration, YAxis::F, false).unwrap();
        let lines: Vec<&str> = plot.svg.lines().filter(|l| l.starts_with("<polyline")).collect();
        assert_eq!(lines.len(), 1);
        let points = lines[0].split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
        assert_eq!(points.split(' ').count(), 3);
        assert!(plot.svg.contains(">run</text>"));
        assert!(plot.warnings.is_empty());
    }

    #[test]
    fn log_axis_clamps_zeros_with_a_warning() {
        let t = trace("run", &["k", "grad_norm"], vec![vec![0.0, 1.0], vec![1.0, 1e-3], vec![2.0, 0.0]]);
        let plot = plot_traces(&[t.clone()], XAxis::Iteration, YAxis::GradNorm, true).unwrap();
        assert_eq!(plot.warnings.len(), 1);
        assert!(plot.warnings[0].contains("clamped to 1e-3"));
        let again = plot_traces(&[t], XAxis::Iteration, YAxis::GradNorm, true).unwrap();
        assert_eq!(plot, again);
    }

    #[test]
    fn plot_rejects_empty_input_and_missing_columns() {
        assert!(plot_traces(&[], XAxis::Iteration, YAxis::F, false).is_err());
        let empty = trace("e", &["k", "f"], vec![]);
        assert!(plot_traces(&[empty], XAxis::Iteration, YAxis::F, false).is_err());
        let t = trace("t", &["k", "f"], vec![vec![0.0, 1.0]]);
        assert!(plot_traces(&[t], XAxis::OracleCalls, YAxis::F, false).is_err());
    }

    #[test]
    fn axis_and_metric_names_parse() {
        assert_eq!("oracle-calls".parse::<XAxis>().unwrap(), XAxis::OracleCalls);
        assert_eq!("grad_norm".parse::<YAxis>().unwrap(), YAxis::GradNorm);
        assert_eq!("estimation-error".parse::<Metric>().unwrap(), Metric::EstimationError);
        assert!("loss".parse::<YAxis>().is_err());
    }

    const SMALL: &str = r#"
        name = "small"
        experiment = "custom"
        seeds = [0, 1]
        fractions = [0.5]
        [problem]
        kind = "softmax"
        n = 60
        p = 4
        classes = 3
        [[methods]]
        method = "newton-mr"
        tau = 1e-8
        max_outer = 20
        [[methods]]
        method = "ss-newton-mr"
        tau = 1e-8
        max_outer = 20
        [[methods]]
        method = "sgd"
        max_iters = 20
        step_grid = [1e-3, 1e-2]
    "#;

    #[test]
    fn config_parses_and_expands_the_run_grid() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap().resolve().unwrap();
        let keys: Vec<String> = cfg.runs().iter().map(|r| format!("{}:{}", r.key, r.seed)).collect();
        assert_eq!(keys, ["newton-mr:0", "newton-mr:1", "ss-newton-mr@s0.5:0", "ss-newton-mr@s0.5:1", "sgd:0", "sgd:1"]);
        assert_eq!(cfg.start, Some(StartPoint::Zeros));
        assert_eq!(cfg.methods[0].theta, 1e-2);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let no_methods = SMALL.split("[[methods]]").next().unwrap();
        assert!(matches!(ExperimentConfig::from_toml(no_methods).unwrap().resolve(), Err(Error::Config(_))));
        let no_seeds = SMALL.replace("seeds = [0, 1]", "seeds = []");
        assert!(ExperimentConfig::from_toml(&no_seeds).unwrap().resolve().is_err());
        let missing = SMALL.replace("classes = 3", "classes = 3\npath = \"/nonexistent/data.csv\"");
        assert!(ExperimentConfig::from_toml(&missing).unwrap().resolve().is_err());
        let no_fractions = SMALL.replace("fractions = [0.5]", "");
        assert!(ExperimentConfig::from_toml(&no_fractions).unwrap().resolve().is_err());
        assert!(ExperimentConfig::from_toml(&SMALL.replace("tau = 1e-8", "tau = 1e-8\nbogus = 1")).is_err());
        let wrong_problem = SMALL.replace("\"custom\"", "\"gmm_profile\"");
        assert!(ExperimentConfig::from_toml(&wrong_problem).unwrap().resolve().is_err());
    }

    #[test]
    fn unstable_runs_include_the_unperturbed_baseline() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            name = "u"
            experiment = "unstable"
            seeds = [3]
            epsilons = [1e-2, 1e-13]
            [problem]
            kind = "fraction"
            [[methods]]
            method = "newton-mr"
            update_mode = "exact"
            "#,
        )
        .unwrap()
        .resolve()
        .unwrap();
        let keys: Vec<String> = cfg.runs().into_iter().map(|r| r.file_name()).collect();
        assert_eq!(keys, ["newton-mr@unperturbed__seed3.csv", "newton-mr@eps1e-2__seed3.csv", "newton-mr@eps1e-13__seed3.csv"]);
        assert_eq!(cfg.perturbation, Some(PerturbationMode::Fixed));
        assert_eq!(cfg.start, Some(StartPoint::Normal));
    }

    #[test]
    fn grid_search_prefers_the_lowest_final_objective() {
        let inst = ProblemSpec::Quadratic { spectrum: vec![1.0, 2.0], data_seed: 0 }.build(0).unwrap();
        let base = FirstOrderConfig { max_iters: 10, ..Default::default() };
        let x0 = Vector::zeros(2);
        let (best, scores) = grid_search_step(inst.problem.as_ref(), &x0, &base, &[1e-3, 0.4, 5.0]).unwrap();
        assert_eq!(best, 0.4);
        assert_eq!(scores.len(), 3);
        assert!(grid_search_step(inst.problem.as_ref(), &x0, &base, &[]).is_err());
    }

    #[test]
    fn experiment_writes_hashed_reproducible_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for sub in ["a", "b"] {
            let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
            cfg.output_dir = Some(tmp.path().join(sub));
            let report = run_experiment(cfg).unwrap();
            assert_eq!(report.errors().count(), 0);
            assert_eq!(report.runs.len(), 6);
            assert!(report.selected_steps.contains_key("sgd"));
            let manifest: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(&report.manifest_path).unwrap()).unwrap();
            let files = manifest["files"].as_array().unwrap();
            assert_eq!(files.len(), 6);
            for f in files {
                let path = report.dir.join(f["path"].as_str().unwrap());
                assert_eq!(f["sha256"].as_str().unwrap(), sha256_file(&path).unwrap());
            }
            assert_eq!(manifest["config"]["methods"][0]["rho"], 1e-4);
            let mut all: Vec<(String, Vec<u8>)> = files
                .iter()
                .map(|f| {
                    let rel = f["path"].as_str().unwrap().to_string();
                    let data = fs::read(report.dir.join(&rel)).unwrap();
                    (rel, data)
                })
                .collect();
            all.sort();
            bytes.push(all);
        }
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn run_errors_are_recorded_and_the_experiment_continues() {
        let tmp = tempfile::tempdir().unwrap();
        // x₀ = 0 sits on the pole x₂ = b of the fraction function.
        let mut cfg = ExperimentConfig::from_toml(
            r#"
            name = "e"
            experiment = "custom"
            seeds = [0]
            start = "zeros"
            [problem]
            kind = "fraction"
            a = 1.0
            b = 0.0
            [[methods]]
            method = "newton-mr"
            [[methods]]
            method = "lbfgs"
            "#,
        )
        .unwrap();
        cfg.output_dir = Some(tmp.path().to_path_buf());
        let report = run_experiment(cfg).unwrap();
        assert_eq!(report.runs.len(), 2);
        assert!(report.runs.iter().all(|r| r.error.is_some() && r.trace.is_none()));
        let manifest = fs::read_to_string(&report.manifest_path).unwrap();
        assert!(manifest.contains("outside the problem domain"));
    }

    #[test]
    fn gmm_profile_writes_profile_tables() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::from_toml(
            r#"
            name = "g"
            experiment = "gmm_profile"
            seeds = [0, 1]
            [problem]
            kind = "gmm"
            p = 3
            n = 200
            cond = 10.0
            [[methods]]
            method = "newton-mr"
            max_outer = 10
            [[methods]]
            method = "lbfgs"
            max_outer = 10
            "#,
        )
        .unwrap();
        cfg.output_dir = Some(tmp.path().to_path_buf());
        let report = run_experiment(cfg).unwrap();
        assert_eq!(report.profiles.len(), 3);
        for m in Metric::ALL {
            assert!(tmp.path().join(format!("profile_{}.csv", m.name())).exists());
        }
        let trace = Trace::read_csv(&tmp.path().join("traces/lbfgs__seed1.csv")).unwrap();
        let err = trace.column("estimation_error").unwrap();
        assert_eq!(err.len(), trace.rows.len());
        assert_eq!(trace.last("estimation_error"), report.runs[3].final_estimation_error);
        let from_dir = summaries_from_dir(tmp.path()).unwrap();
        let table = performance_profile(&from_dir, Metric::EstimationError).unwrap();
        assert_eq!(table, report.profiles[2]);
    }
}
