//! Test objectives: softmax cross-entropy, a two-component Gaussian mixture, the
//! two-dimensional fraction function and a quadratic with optional cubic regularizer.
//!
//! Finite-sum objectives are plain sums over samples. A sampled Hessian over an index set
//! `S` is rescaled by `n/|S|`, so sampled and full operators estimate the same matrix.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::linalg::{densify, orthonormalize, LinearOperator, SymMatrix, Vector};

/// Samples as rows of `features`, with optional integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::InvalidInput("dataset has no samples".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != features.nrows() {
                return Err(Error::DimensionMismatch { expected: features.nrows(), got: labels.len() });
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "dataset features" });
        }
        Ok(Self { features, labels })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn p(&self) -> usize {
        self.features.ncols()
    }

    /// `1 + max label`, or 0 without labels.
    pub fn num_classes(&self) -> usize {
        self.labels.as_ref().and_then(|l| l.iter().max()).map_or(0, |m| m + 1)
    }

    /// Rescales every feature column to `[0, 1]`; constant columns become 0.
    pub fn scale_unit_interval(&mut self) {
        for mut col in self.features.column_iter_mut() {
            let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(*v), hi.max(*v))
            });
            let span = hi - lo;
            for v in col.iter_mut() {
                *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
            }
        }
    }

    fn rows(&self, subset: Option<&[usize]>) -> DMatrix<f64> {
        match subset {
            None => self.features.clone(),
            Some(idx) => self.features.select_rows(idx.iter()),
        }
    }
}

/// A smooth objective with gradients and Hessian-vector products.
///
/// `subset` restricts a finite sum to the given sample indices (scaled by `n/|S|`);
/// problems with a single component ignore it.
pub trait Problem: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Number of summands `n` (1 for closed-form objectives).
    fn n_components(&self) -> usize {
        1
    }
    fn in_domain(&self, x: &Vector) -> bool {
        x.iter().all(|v| v.is_finite())
    }
    fn value(&self, x: &Vector) -> Result<f64>;
    fn gradient(&self, x: &Vector) -> Result<Vector>;
    /// Sub-sampled gradient `(n/|S|) Σ_S ∇f_i`.
    fn gradient_subset(&self, x: &Vector, subset: Option<&[usize]>) -> Result<Vector> {
        let _ = subset;
        self.gradient(x)
    }
    /// Hessian at `x` (sampled over `subset`) as an operator; state is computed once.
    fn hessian_at<'a>(&'a self, x: &Vector, subset: Option<&[usize]>)
        -> Result<Box<dyn LinearOperator + 'a>>;
    /// Curvature model for Gauss-Newton. Defaults to the Hessian, which is the generalized
    /// Gauss-Newton matrix whenever the model is linear in `x`.
    fn gauss_newton_at<'a>(
        &'a self,
        x: &Vector,
        subset: Option<&[usize]>,
    ) -> Result<Box<dyn LinearOperator + 'a>> {
        self.hessian_at(x, subset)
    }

    fn hvp(&self, x: &Vector, v: &Vector, subset: Option<&[usize]>) -> Result<Vector> {
        Ok(self.hessian_at(x, subset)?.apply(v))
    }

    fn hessian_dense(&self, x: &Vector, subset: Option<&[usize]>) -> Result<SymMatrix> {
        Ok(densify(self.hessian_at(x, subset)?.as_ref()))
    }

    fn check_point(&self, x: &Vector) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        if !self.in_domain(x) {
            return Err(Error::Domain(format!("{}: point outside the domain", self.name())));
        }
        Ok(())
    }
}

fn subset_scale(n: usize, subset: Option<&[usize]>) -> Result<f64> {
    match subset {
        None => Ok(1.0),
        Some([]) => Err(Error::InvalidInput("empty sample set".into())),
        Some(idx) => {
            if let Some(bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidInput(format!("sample index {bad} out of range for n={n}")));
            }
            Ok(n as f64 / idx.len() as f64)
        }
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------------------
// Softmax cross-entropy

/// Multinomial logistic loss without regularization; class 0 is the reference class with a
/// zero logit, so `x` stacks `C − 1` weight blocks of length `p`.
#[derive(Debug, Clone)]
pub struct Softmax {
    data: Dataset,
    labels: Vec<usize>,
    classes: usize,
}

pub fn make_softmax(data: Dataset, classes: usize) -> Result<Softmax> {
    if classes < 2 {
        return Err(Error::InvalidInput(format!("softmax needs at least 2 classes, got {classes}")));
    }
    let labels = data
        .labels
        .clone()
        .ok_or_else(|| Error::InvalidInput("softmax needs labels".into()))?;
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, l)| **l >= classes) {
        return Err(Error::InvalidInput(format!("label {l} of sample {i} outside [0, {classes})")));
    }
    Ok(Softmax { data, labels, classes })
}

impl Softmax {
    fn weights(&self, x: &Vector) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.data.p(), self.classes - 1, x.as_slice())
    }

    /// Logits `A X` and class probabilities (excluding the reference class) for the
    /// selected rows, plus the per-row log-partition.
    fn probabilities(&self, a: &DMatrix<f64>, x: &Vector) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
        let z = a * self.weights(x);
        let mut probs = z.clone();
        let mut lse = Vec::with_capacity(z.nrows());
        for i in 0..z.nrows() {
            let m = z.row(i).iter().fold(0.0_f64, |m, v| m.max(*v));
            let denom = (-m).exp() + z.row(i).iter().map(|v| (v - m).exp()).sum::<f64>();
            for c in 0..z.ncols() {
                probs[(i, c)] = (z[(i, c)] - m).exp() / denom;
            }
            lse.push(m + denom.ln());
        }
        (z, probs, lse)
    }

    fn label_rows(&self, subset: Option<&[usize]>) -> Vec<usize> {
        match subset {
            None => self.labels.clone(),
            Some(idx) => idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn grad_rows(&self, x: &Vector, subset: Option<&[usize]>) -> Result<Vector> {
        self.check_point(x)?;
        let scale = subset_scale(self.data.n(), subset)?;
        let a = self.data.rows(subset);
        let labels = self.label_rows(subset);
        let (_, mut resid, _) = self.probabilities(&a, x);
        for (i, &b) in labels.iter().enumerate() {
            if b >= 1 {
                resid[(i, b - 1)] -= 1.0;
            }
        }
        let g = a.tr_mul(&resid) * scale;
        Ok(Vector::from_column_slice(g.as_slice()))
    }
}

struct SoftmaxHessian {
    a: DMatrix<f64>,
    probs: DMatrix<f64>,
    p: usize,
    blocks: usize,
    scale: f64,
}

impl LinearOperator for SoftmaxHessian {
    fn dim(&self) -> usize {
        self.p * self.blocks
    }

    fn apply(&self, v: &Vector) -> Vector {
        let vm = DMatrix::from_column_slice(self.p, self.blocks, v.as_slice());
        let u = &self.a * vm;
        let mut w = self.probs.component_mul(&u);
        for i in 0..w.nrows() {
            let s: f64 = w.row(i).sum();
            for c in 0..w.ncols() {
                w[(i, c)] -= self.probs[(i, c)] * s;
            }
        }
        let out = self.a.tr_mul(&w) * self.scale;
        Vector::from_column_slice(out.as_slice())
    }
}

impl Problem for Softmax {
    fn name(&self) -> &str {
        "softmax"
    }

    fn dim(&self) -> usize {
        (self.classes - 1) * self.data.p()
    }

    fn n_components(&self) -> usize {
        self.data.n()
    }

    fn value(&self, x: &Vector) -> Result<f64> {
        self.check_point(x)?;
        let (z, _, lse) = self.probabilities(&self.data.features, x);
        Ok(self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &b)| lse[i] - if b >= 1 { z[(i, b - 1)] } else { 0.0 })
            .sum())
    }

    fn gradient(&self, x: &Vector) -> Result<Vector> {
        self.grad_rows(x, None)
    }

    fn gradient_subset(&self, x: &Vector, subset: Option<&[usize]>) -> Result<Vector> {
        self.grad_rows(x, subset)
    }

    fn hessian_at<'a>(&'a self, x: &Vector, subset: Option<&[usize]>) -> Result<Box<dyn LinearOperator + 'a>> {
        self.check_point(x)?;
        let scale = subset_scale(self.data.n(), subset)?;
        let a = self.data.rows(subset);
        let (_, probs, _) = self.probabilities(&a, x);
        Ok(Box::new(SoftmaxHessian { a, probs, p: self.data.p(), blocks: self.classes - 1, scale }))
    }
}

/// Features `N(0, 1)`, labels drawn from a softmax model with weights `N(0, 1/p)`, so the
/// classes overlap and the unregularized loss has a finite minimizer.
pub fn gen_softmax_data(n: usize, p: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || p == 0 || classes < 2 {
        return Err(Error::InvalidInput("softmax data needs n, p ≥ 1 and at least 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w = DMatrix::from_fn(p, classes, |_, _| rng.sample::<f64, _>(StandardNormal) / (p as f64).sqrt());
    let logits = &features * w;
    let labels = (0..n)
        .map(|i| {
            let row = logits.row(i);
            let m = row.max();
            let weights: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (c, w) in weights.iter().enumerate() {
                if u < *w {
                    return c;
                }
                u -= w;
            }
            classes - 1
        })
        .collect();
    Dataset::new(features, Some(labels))
}

// ---------------------------------------------------------------------------------------
// Gaussian mixture

/// Negative log-likelihood of a two-component mixture with known covariances; the
/// parameters are `x = [w; u; v]` with mixing weight `sigmoid(w)` and means `u`, `v`.
#[derive(Debug, Clone)]
pub struct Gmm {
    data: Dataset,
    chol: [Cholesky<f64, Dyn>; 2],
    /// `−½ log det(2π Σ_k)`.
    log_norm: [f64; 2],
}

pub fn make_gmm(data: Dataset, sigma1: &SymMatrix, sigma2: &SymMatrix) -> Result<Gmm> {
    let p = data.p();
    let mut chol = Vec::with_capacity(2);
    let mut log_norm = [0.0; 2];
    for (k, s) in [sigma1, sigma2].into_iter().enumerate() {
        if s.dim() != p {
            return Err(Error::DimensionMismatch { expected: p, got: s.dim() });
        }
        let c = Cholesky::new(s.as_matrix().clone())
            .ok_or_else(|| Error::InvalidInput(format!("covariance {} is not positive definite", k + 1)))?;
        let log_det: f64 = c.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        log_norm[k] = -0.5 * (p as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        chol.push(c);
    }
    let c2 = chol.pop().expect("two factors");
    let c1 = chol.pop().expect("two factors");
    Ok(Gmm { data, chol: [c1, c2], log_norm })
}

/// Per-sample quantities of the mixture at a parameter point.
struct GmmState {
    zeta: f64,
    /// Responsibility of component 1.
    r: Vec<f64>,
    /// `Σ₁⁻¹(a_i − u)` and `Σ₂⁻¹(a_i − v)` as rows.
    s1: DMatrix<f64>,
    s2: DMatrix<f64>,
    /// `−log(mixture density)` per sample.
    nll: Vec<f64>,
}

impl Gmm {
    fn p(&self) -> usize {
        self.data.p()
    }

    fn split<'x>(&self, x: &'x Vector) -> (f64, nalgebra::DVectorView<'x, f64>, nalgebra::DVectorView<'x, f64>) {
        let p = self.p();
        (x[0], x.rows(1, p), x.rows(1 + p, p))
    }

    fn state(&self, x: &Vector, subset: Option<&[usize]>) -> GmmState {
        let (w, u, v) = self.split(x);
        let a = self.data.rows(subset);
        let diff = |mu: nalgebra::DVectorView<f64>| {
            let mut d = a.transpose();
            for mut col in d.column_iter_mut() {
                col -= &mu;
            }
            d
        };
        let d1 = diff(u);
        let d2 = diff(v);
        let s1 = self.chol[0].solve(&d1);
        let s2 = self.chol[1].solve(&d2);
        let log_zeta = -softplus(-w);
        let log_one_minus = -softplus(w);
        let m = a.nrows();
        let mut r = Vec::with_capacity(m);
        let mut nll = Vec::with_capacity(m);
        for i in 0..m {
            let q1 = d1.column(i).dot(&s1.column(i));
            let q2 = d2.column(i).dot(&s2.column(i));
            let l1 = log_zeta + self.log_norm[0] - 0.5 * q1;
            let l2 = log_one_minus + self.log_norm[1] - 0.5 * q2;
            let hi = l1.max(l2);
            let lse = hi + ((l1 - hi).exp() + (l2 - hi).exp()).ln();
            r.push((l1 - lse).exp());
            nll.push(-lse);
        }
        GmmState { zeta: sigmoid(w), r, s1: s1.transpose(), s2: s2.transpose(), nll }
    }

    fn gradient_from(&self, st: &GmmState, scale: f64) -> Vector {
        let p = self.p();
        let mut g = Vector::zeros(2 * p + 1);
        for (i, &r) in st.r.iter().enumerate() {
            g[0] += st.zeta - r;
            for j in 0..p {
                g[1 + j] -= r * st.s1[(i, j)];
                g[1 + p + j] -= (1.0 - r) * st.s2[(i, j)];
            }
        }
        g * scale
    }

    /// `∇f_i` for every selected sample, as columns.
    fn sample_gradients(&self, st: &GmmState) -> DMatrix<f64> {
        let p = self.p();
        let m = st.r.len();
        let mut out = DMatrix::zeros(2 * p + 1, m);
        for i in 0..m {
            let r = st.r[i];
            out[(0, i)] = st.zeta - r;
            for j in 0..p {
                out[(1 + j, i)] = -r * st.s1[(i, j)];
                out[(1 + p + j, i)] = -(1.0 - r) * st.s2[(i, j)];
            }
        }
        out
    }
}

struct GmmHessian<'a> {
    gmm: &'a Gmm,
    st: GmmState,
    scale: f64,
    sum_r: f64,
}

impl LinearOperator for GmmHessian<'_> {
    fn dim(&self) -> usize {
        2 * self.gmm.p() + 1
    }

    fn apply(&self, v: &Vector) -> Vector {
        // ∇²f_i = ζ(1−ζ) e_w e_wᵀ + r Σ₁⁻¹ ⊕ (1−r) Σ₂⁻¹ − r(1−r) δ_i δ_iᵀ,
        // with δ_i = (1, Σ₁⁻¹(a_i−u), −Σ₂⁻¹(a_i−v)).
        let p = self.gmm.p();
        let st = &self.st;
        let m = st.r.len() as f64;
        let vw = v[0];
        let vu = v.rows(1, p).into_owned();
        let vv = v.rows(1 + p, p).into_owned();
        let proj_u = &st.s1 * &vu;
        let proj_v = &st.s2 * &vv;
        let mut coeff = Vector::zeros(st.r.len());
        for i in 0..st.r.len() {
            let r = st.r[i];
            coeff[i] = r * (1.0 - r) * (vw + proj_u[i] - proj_v[i]);
        }
        let mut out = Vector::zeros(2 * p + 1);
        out[0] = m * st.zeta * (1.0 - st.zeta) * vw - coeff.sum();
        let su = self.gmm.chol[0].solve(&vu) * self.sum_r - st.s1.tr_mul(&coeff);
        let sv = self.gmm.chol[1].solve(&vv) * (m - self.sum_r) + st.s2.tr_mul(&coeff);
        out.rows_mut(1, p).copy_from(&su);
        out.rows_mut(1 + p, p).copy_from(&sv);
        out * self.scale
    }
}

struct OuterProductSum {
    columns: DMatrix<f64>,
    scale: f64,
}

impl LinearOperator for OuterProductSum {
    fn dim(&self) -> usize {
        self.columns.nrows()
    }

    fn apply(&self, v: &Vector) -> Vector {
        &self.columns * self.columns.tr_mul(v) * self.scale
    }
}

impl Problem for Gmm {
    fn name(&self) -> &str {
        "gmm"
    }

    fn dim(&self) -> usize {
        2 * self.p() + 1
    }

    fn n_components(&self) -> usize {
        self.data.n()
    }

    fn value(&self, x: &Vector) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.state(x, None).nll.iter().sum())
    }

    fn gradient(&self, x: &Vector) -> Result<Vector> {
        self.gradient_subset(x, None)
    }

    fn gradient_subset(&self, x: &Vector, subset: Option<&[usize]>) -> Result<Vector> {
        self.check_point(x)?;
        let scale = subset_scale(self.data.n(), subset)?;
        Ok(self.gradient_from(&self.state(x, subset), scale))
    }

    fn hessian_at<'a>(&'a self, x: &Vector, subset: Option<&[usize]>) -> Result<Box<dyn LinearOperator + 'a>> {
        self.check_point(x)?;
        let scale = subset_scale(self.data.n(), subset)?;
        let st = self.state(x, subset);
        let sum_r = st.r.iter().sum();
        Ok(Box::new(GmmHessian { gmm: self, st, scale, sum_r }))
    }

    /// Empirical Fisher `Σ ∇f_i ∇f_iᵀ`: the mixture has no least-squares structure.
    fn gauss_newton_at<'a>(&'a self, x: &Vector, subset: Option<&[usize]>) -> Result<Box<dyn LinearOperator + 'a>> {
        self.check_point(x)?;
        let scale = subset_scale(self.data.n(), subset)?;
        let st = self.state(x, subset);
        Ok(Box::new(OuterProductSum { columns: self.sample_gradients(&st), scale }))
    }
}

/// Parameters the synthetic mixture data were drawn from.
#[derive(Debug, Clone)]
pub struct GmmGroundTruth {
    pub w_star: f64,
    pub u_star: Vector,
    pub v_star: Vector,
    pub sigma1: SymMatrix,
    pub sigma2: SymMatrix,
}

impl GmmGroundTruth {
    /// `[w*; u*; v*]`.
    pub fn parameters(&self) -> Vector {
        let p = self.u_star.len();
        let mut x = Vector::zeros(2 * p + 1);
        x[0] = self.w_star;
        x.rows_mut(1, p).copy_from(&self.u_star);
        x.rows_mut(1 + p, p).copy_from(&self.v_star);
        x
    }
}

/// Mixture data with `w* ~ N(0,1)`, `u* ~ U[−1,1]^p`, `v* ~ U[3,4]^p` and covariances
/// `Σ_k = Q_kᵀ D⁻¹ Q_k`, `D` equidistant on `[1, cond]` (so `cond(Σ_k) = cond`). `Q₁`
/// orthonormalizes a Gaussian matrix, `Q₂` a uniform one.
pub fn gen_gmm_data(p: usize, n: usize, cond_number: f64, seed: u64) -> Result<(Dataset, GmmGroundTruth)> {
    if p == 0 || n < 2 {
        return Err(Error::InvalidInput("gmm data needs p ≥ 1 and n ≥ 2".into()));
    }
    if !(cond_number >= 1.0 && cond_number.is_finite()) {
        return Err(Error::InvalidInput(format!("condition number must be ≥ 1, got {cond_number}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_star: f64 = rng.sample(StandardNormal);
    let unit = Uniform::new(-1.0, 1.0).expect("valid range");
    let upper = Uniform::new(3.0, 4.0).expect("valid range");
    let u_star = Vector::from_iterator(p, (0..p).map(|_| unit.sample(&mut rng)));
    let v_star = Vector::from_iterator(p, (0..p).map(|_| upper.sample(&mut rng)));
    let d: Vec<f64> = (0..p)
        .map(|i| if p == 1 { 1.0 } else { 1.0 + (cond_number - 1.0) * i as f64 / (p - 1) as f64 })
        .collect();
    let inv_d: Vec<f64> = d.iter().map(|x| 1.0 / x).collect();
    let q1 = orthonormalize(DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal)));
    let q2 = orthonormalize(DMatrix::from_fn(p, p, |_, _| unit.sample(&mut rng)));
    // Qᵀ D⁻¹ Q: eigenvectors are the rows of Q.
    let sigma1 = SymMatrix::from_spectrum(&q1.transpose(), &inv_d);
    let sigma2 = SymMatrix::from_spectrum(&q2.transpose(), &inv_d);

    let l1 = Cholesky::new(sigma1.as_matrix().clone())
        .ok_or_else(|| Error::InvalidInput("generated covariance not positive definite".into()))?
        .unpack();
    let l2 = Cholesky::new(sigma2.as_matrix().clone())
        .ok_or_else(|| Error::InvalidInput("generated covariance not positive definite".into()))?
        .unpack();
    let zeta = sigmoid(w_star);
    let mut features = DMatrix::zeros(n, p);
    for i in 0..n {
        let z = Vector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let sample = if rng.random::<f64>() < zeta { &u_star + &l1 * z } else { &v_star + &l2 * z };
        features.row_mut(i).copy_from(&sample.transpose());
    }
    let data = Dataset::new(features, None)?;
    Ok((data, GmmGroundTruth { w_star, u_star, v_star, sigma1, sigma2 }))
}

/// `½(|w − w*|/|w*| + ‖[u; v] − [u*; v*]‖/‖[u*; v*]‖)`.
pub fn estimation_error(x: &Vector, truth: &GmmGroundTruth) -> Result<f64> {
    let p = truth.u_star.len();
    if x.len() != 2 * p + 1 {
        return Err(Error::DimensionMismatch { expected: 2 * p + 1, got: x.len() });
    }
    if truth.w_star == 0.0 {
        return Err(Error::InvalidInput("estimation error undefined for w* = 0".into()));
    }
    let star = truth.parameters();
    let means = x.rows(1, 2 * p);
    let means_star = star.rows(1, 2 * p);
    let mean_err = (means - means_star).norm() / means_star.norm();
    Ok(0.5 * ((x[0] - truth.w_star).abs() / truth.w_star.abs() + mean_err))
}

// ---------------------------------------------------------------------------------------
// Fraction function

/// `f(x₁, x₂) = a x₁² / (b − x₂)`, defined for `x₂ ≠ b`; its Hessian has rank one.
#[derive(Debug, Clone, Copy)]
pub struct Fraction {
    pub a: f64,
    pub b: f64,
}

pub fn make_fraction(a: f64, b: f64) -> Fraction {
    Fraction { a, b }
}

impl Fraction {
    fn denom(&self, x: &Vector) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.b - x[1])
    }

    /// Dense Hessian `(2a/D) [1, s; s, s²]` with `D = b − x₂`, `s = x₁/D`.
    pub fn hessian_matrix(&self, x: &Vector) -> Result<SymMatrix> {
        let d = self.denom(x)?;
        let s = x[0] / d;
        let k = 2.0 * self.a / d;
        Ok(SymMatrix::from_upper_fn(2, |i, j| match (i, j) {
            (0, 0) => k,
            (1, 1) => k * s * s,
            _ => k * s,
        }))
    }
}

impl Problem for Fraction {
    fn name(&self) -> &str {
        "fraction"
    }

    fn dim(&self) -> usize {
        2
    }

    fn in_domain(&self, x: &Vector) -> bool {
        x.len() == 2 && x.iter().all(|v| v.is_finite()) && x[1] != self.b
    }

    fn value(&self, x: &Vector) -> Result<f64> {
        let d = self.denom(x)?;
        Ok(self.a * x[0] * x[0] / d)
    }

    fn gradient(&self, x: &Vector) -> Result<Vector> {
        let d = self.denom(x)?;
        Ok(Vector::from_vec(vec![2.0 * self.a * x[0] / d, self.a * x[0] * x[0] / (d * d)]))
    }

    fn hessian_at<'a>(&'a self, x: &Vector, _subset: Option<&[usize]>) -> Result<Box<dyn LinearOperator + 'a>> {
        Ok(Box::new(self.hessian_matrix(x)?))
    }

    fn hessian_dense(&self, x: &Vector, _subset: Option<&[usize]>) -> Result<SymMatrix> {
        self.hessian_matrix(x)
    }
}

// ---------------------------------------------------------------------------------------
// Quadratic with optional cubic term

/// `f(x) = ½ xᵀAx − cᵀx + (σ/6) Σ |x_i|³`. The Hessian `A + σ diag(|x_i|)` is
/// `σ`-Lipschitz; `σ = 0` gives a plain quadratic.
#[derive(Debug, Clone)]
pub struct CubicQuadratic {
    pub a: SymMatrix,
    pub c: Vector,
    pub sigma: f64,
}

/// Quadratic with a positive definite `A`.
pub fn make_quadratic(a: SymMatrix, c: Vector) -> Result<CubicQuadratic> {
    make_cubic_regularized(a, c, 0.0)
}

pub fn make_cubic_regularized(a: SymMatrix, c: Vector, sigma: f64) -> Result<CubicQuadratic> {
    if a.dim() != c.len() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: c.len() });
    }
    if Cholesky::new(a.as_matrix().clone()).is_none() {
        return Err(Error::InvalidInput("quadratic term must be positive definite".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("cubic weight must be ≥ 0, got {sigma}")));
    }
    Ok(CubicQuadratic { a, c, sigma })
}

impl CubicQuadratic {
    /// Lipschitz constant of the Hessian.
    pub fn hessian_lipschitz(&self) -> f64 {
        self.sigma
    }

    pub fn hessian_matrix(&self, x: &Vector) -> SymMatrix {
        let mut h = self.a.as_matrix().clone();
        for i in 0..x.len() {
            h[(i, i)] += self.sigma * x[i].abs();
        }
        SymMatrix::symmetrize(h)
    }
}

impl Problem for CubicQuadratic {
    fn name(&self) -> &str {
        if self.sigma == 0.0 {
            "quadratic"
        } else {
            "cubic"
        }
    }

    fn dim(&self) -> usize {
        self.c.len()
    }

    fn value(&self, x: &Vector) -> Result<f64> {
        self.check_point(x)?;
        let cubic: f64 = x.iter().map(|v| v.abs().powi(3)).sum();
        Ok(0.5 * x.dot(&self.a.matvec(x)) - self.c.dot(x) + self.sigma / 6.0 * cubic)
    }

    fn gradient(&self, x: &Vector) -> Result<Vector> {
        self.check_point(x)?;
        let cubic = x.map(|v| 0.5 * self.sigma * v * v.abs());
        Ok(self.a.matvec(x) - &self.c + cubic)
    }

    fn hessian_at<'a>(&'a self, x: &Vector, _subset: Option<&[usize]>) -> Result<Box<dyn LinearOperator + 'a>> {
        self.check_point(x)?;
        Ok(Box::new(self.hessian_matrix(x)))
    }
}

// ---------------------------------------------------------------------------------------
// Sub-sampling

/// Uniform sampling without replacement of `max(1, round(fraction · n))` indices.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SampleSelector {
    pub fraction: f64,
    pub rng_seed: u64,
}

impl SampleSelector {
    pub fn new(fraction: f64, rng_seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidInput(format!("sample fraction must lie in (0, 1], got {fraction}")));
        }
        Ok(Self { fraction, rng_seed })
    }

    pub fn sample_size(&self, n: usize) -> usize {
        let raw = (self.fraction * n as f64).round() as usize;
        if raw < 1 {
            log::warn!("sample fraction {} of n={n} rounds to zero; using one sample", self.fraction);
        }
        raw.clamp(1, n)
    }

    /// Sorted sample for outer iteration `iteration`; reproducible per `(rng_seed, iteration)`.
    pub fn select(&self, n: usize, iteration: u64) -> Vec<usize> {
        let m = self.sample_size(n);
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(iteration);
        let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Sampled Hessian operator at `x` for outer iteration `iteration`, frozen for its lifetime.
pub fn subsampled_operator<'a>(
    problem: &'a dyn Problem,
    x: &Vector,
    sel: &SampleSelector,
    iteration: u64,
) -> Result<Box<dyn LinearOperator + 'a>> {
    let n = problem.n_components();
    if sel.fraction >= 1.0 || n <= 1 {
        return problem.hessian_at(x, None);
    }
    let idx = sel.select(n, iteration);
    problem.hessian_at(x, Some(&idx))
}

// ---------------------------------------------------------------------------------------
// CSV ingestion

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CsvOptions {
    /// The last column holds integer class labels.
    pub has_labels: bool,
    /// Skip the first row.
    pub header: bool,
    /// Rescale each feature column to `[0, 1]`.
    pub scale: bool,
}

pub fn load_csv(path: &Path, opts: CsvOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    let first_row = usize::from(opts.header) + 1;
    for (i, record) in reader.records().enumerate() {
        let row = first_row + i;
        let record = record.map_err(|e| Error::Parse { row, column: 0, message: e.to_string() })?;
        let ncols = record.len();
        match width {
            None => width = Some(ncols),
            Some(w) if w != ncols => {
                return Err(Error::Parse {
                    row,
                    column: ncols.min(w) + 1,
                    message: format!("expected {w} columns, found {ncols}"),
                })
            }
            _ => {}
        }
        let n_features = if opts.has_labels { ncols.saturating_sub(1) } else { ncols };
        if n_features == 0 {
            return Err(Error::Parse { row, column: 1, message: "no feature columns".into() });
        }
        let mut values = Vec::with_capacity(n_features);
        for (j, cell) in record.iter().take(n_features).enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: j + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, column: j + 1, message: format!("non-finite value {cell:?}") });
            }
            values.push(v);
        }
        if opts.has_labels {
            let cell = &record[ncols - 1];
            let label: usize = cell.parse().map_err(|_| Error::Parse {
                row,
                column: ncols,
                message: format!("label is not a non-negative integer: {cell:?}"),
            })?;
            labels.push(label);
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::Parse { row: first_row, column: 0, message: "no data rows".into() });
    }
    let p = rows[0].len();
    let features = DMatrix::from_row_iterator(rows.len(), p, rows.into_iter().flatten());
    let mut data = Dataset::new(features, opts.has_labels.then_some(labels))?;
    if opts.scale {
        data.scale_unit_interval();
    }
    Ok(data)
}
