//! Dense symmetric linear algebra and the matrix-free operator abstraction.
//!
//! Every Hessian access made by the solvers goes through [`LinearOperator`]. Dense
//! matrices ([`SymMatrix`]) and their spectral factorizations ([`EigenDecomposition`])
//! back the exact pseudo-inverse updates and serve as the oracle for the Krylov solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Column vector of `f64` entries.
pub type Vector = DVector<f64>;

/// Builds a [`Vector`] after checking that every entry is finite.
pub fn vector(entries: Vec<f64>) -> Result<Vector> {
    if entries.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "vector" });
    }
    Ok(Vector::from_vec(entries))
}

/// Dense symmetric matrix. Construction symmetrizes the storage exactly, so
/// `a[(i, j)] == a[(j, i)]` bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Accepts a square finite matrix whose asymmetry is within `1e-10 * max(1, |A|_max)`
    /// and stores its symmetric part.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "matrix" });
        }
        let scale = m.amax().max(1.0);
        let asymmetry = (&m - m.transpose()).amax();
        if asymmetry > 1e-10 * scale {
            return Err(Error::NotSymmetric { asymmetry });
        }
        Ok(Self::symmetrize(m))
    }

    /// Stores `(m + mᵀ)/2` without any tolerance check.
    pub fn symmetrize(m: DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut s = m;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (s[(i, j)] + s[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        SymMatrix(s)
    }

    /// Builds the matrix from its upper triangle: `f(i, j)` is called for `i <= j`.
    pub fn from_upper_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMatrix(m)
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix(DMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(DMatrix::identity(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// `V diag(λ) Vᵀ` for an arbitrary (not necessarily orthonormal) `V`.
    pub fn from_spectrum(eigenvectors: &DMatrix<f64>, eigenvalues: &[f64]) -> Self {
        let lam = DMatrix::from_diagonal(&DVector::from_column_slice(eigenvalues));
        Self::symmetrize(eigenvectors * lam * eigenvectors.transpose())
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn matvec(&self, v: &Vector) -> Vector {
        &self.0 * v
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 - &other.0)
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix(&self.0 * s)
    }

    /// Frobenius norm.
    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Symmetric linear map `v ↦ Hv` on `R^dim`.
pub trait LinearOperator {
    fn dim(&self) -> usize;

    fn apply(&self, v: &Vector) -> Vector;

    /// Oracle-call units charged per application.
    fn cost_per_apply(&self) -> f64 {
        1.0
    }
}

impl LinearOperator for SymMatrix {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn apply(&self, v: &Vector) -> Vector {
        self.matvec(v)
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn apply(&self, v: &Vector) -> Vector {
        (**self).apply(v)
    }

    fn cost_per_apply(&self) -> f64 {
        (**self).cost_per_apply()
    }
}

/// Operator backed by a closure.
pub struct FnOperator<F> {
    dim: usize,
    cost: f64,
    f: F,
}

impl<F: Fn(&Vector) -> Vector> FnOperator<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, cost: 1.0, f }
    }

    pub fn with_cost(mut self, cost: f64) -> Self {
        self.cost = cost;
        self
    }
}

impl<F: Fn(&Vector) -> Vector> LinearOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &Vector) -> Vector {
        (self.f)(v)
    }

    fn cost_per_apply(&self) -> f64 {
        self.cost
    }
}

/// Materializes an operator column by column. Costs `dim` applications.
pub fn densify(op: &dyn LinearOperator) -> SymMatrix {
    let d = op.dim();
    let mut m = DMatrix::zeros(d, d);
    let mut e = Vector::zeros(d);
    for j in 0..d {
        e[j] = 1.0;
        m.set_column(j, &op.apply(&e));
        e[j] = 0.0;
    }
    SymMatrix::symmetrize(m)
}

/// Worst relative deviations found by [`check_operator`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorCheck {
    pub linearity: f64,
    pub symmetry: f64,
}

/// Probes linearity and symmetry with `probes` random pairs of standard normal vectors.
pub fn check_operator(op: &dyn LinearOperator, probes: usize, rng: &mut impl Rng) -> OperatorCheck {
    let d = op.dim();
    let mut worst = OperatorCheck {
        linearity: 0.0,
        symmetry: 0.0,
    };
    for _ in 0..probes {
        let u = random_normal_vector(d, rng);
        let v = random_normal_vector(d, rng);
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        let hu = op.apply(&u);
        let hv = op.apply(&v);
        let combined = op.apply(&(&u * a + &v * b));
        let expected = &hu * a + &hv * b;
        let scale = expected.norm().max(combined.norm()).max(f64::MIN_POSITIVE);
        worst.linearity = worst.linearity.max((combined - expected).norm() / scale);

        let lhs = u.dot(&hv);
        let rhs = v.dot(&hu);
        let scale = (u.norm() * hv.norm()).max(v.norm() * hu.norm()).max(f64::MIN_POSITIVE);
        worst.symmetry = worst.symmetry.max((lhs - rhs).abs() / scale);
    }
    worst
}

/// Spectral factorization `A = V diag(λ) Vᵀ` with eigenvalues ordered by descending
/// magnitude. The signed eigenvalues are retained.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vector,
    pub eigenvectors: DMatrix<f64>,
    /// Default rank threshold `d · ε_mach · |λ₁|`.
    pub rank_tol: f64,
}

/// Dense symmetric eigendecomposition.
pub fn eigh(a: &SymMatrix) -> Result<EigenDecomposition> {
    let d = a.dim();
    if d == 0 {
        return Err(Error::InvalidInput("eigh of an empty matrix".into()));
    }
    let max_iter = 10_000 + 100 * d;
    let eig = SymmetricEigen::try_new(a.as_matrix().clone(), f64::EPSILON, max_iter)
        .ok_or(Error::EigenNonConvergence { dim: d })?;

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .abs()
            .total_cmp(&eig.eigenvalues[i].abs())
            .then(eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]))
    });
    let eigenvalues = Vector::from_iterator(d, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = DMatrix::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    let rank_tol = d as f64 * f64::EPSILON * eigenvalues[0].abs();
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
        rank_tol,
    })
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    fn tol(&self, tol: Option<f64>) -> f64 {
        tol.unwrap_or(self.rank_tol)
    }

    /// Number of eigenvalues with `|λ| > tol` (default tolerance when `None`).
    pub fn numerical_rank(&self, tol: Option<f64>) -> usize {
        let tol = self.tol(tol);
        // Sorted by magnitude, so the kept eigenpairs form a prefix.
        self.eigenvalues.iter().take_while(|l| l.abs() > tol).count()
    }

    /// Orthonormal basis of the numerical range (the leading `rank` eigenvectors).
    pub fn range_basis(&self, tol: Option<f64>) -> DMatrix<f64> {
        let r = self.numerical_rank(tol);
        self.eigenvectors.columns(0, r).into_owned()
    }

    /// Orthonormal basis of the numerical null space.
    pub fn null_basis(&self, tol: Option<f64>) -> DMatrix<f64> {
        let r = self.numerical_rank(tol);
        self.eigenvectors.columns(r, self.dim() - r).into_owned()
    }

    /// `A† v`: the least-norm solution of `min ‖A x − v‖`.
    pub fn pinv_apply(&self, v: &Vector, tol: Option<f64>) -> Vector {
        let r = self.numerical_rank(tol);
        let basis = self.eigenvectors.columns(0, r);
        let mut coeffs = basis.tr_mul(v);
        for (c, lam) in coeffs.iter_mut().zip(self.eigenvalues.iter()) {
            *c /= lam;
        }
        basis * coeffs
    }

    /// `U Uᵀ v` for the numerical range basis `U`.
    pub fn range_project(&self, v: &Vector, tol: Option<f64>) -> Vector {
        let r = self.numerical_rank(tol);
        let basis = self.eigenvectors.columns(0, r);
        basis * basis.tr_mul(v)
    }

    /// Dense `A†`.
    pub fn pinv_matrix(&self, tol: Option<f64>) -> SymMatrix {
        let r = self.numerical_rank(tol);
        let basis = self.eigenvectors.columns(0, r).into_owned();
        let inv: Vec<f64> = self.eigenvalues.iter().take(r).map(|l| 1.0 / l).collect();
        SymMatrix::from_spectrum(&basis, &inv)
    }

    /// `‖A†‖ = 1/min nonzero |λ|`, or 0 when the numerical rank is zero.
    pub fn pinv_norm(&self, tol: Option<f64>) -> f64 {
        match self.numerical_rank(tol) {
            0 => 0.0,
            r => 1.0 / self.eigenvalues[r - 1].abs(),
        }
    }

    /// `V diag(λ) Vᵀ`.
    pub fn reconstruct(&self) -> SymMatrix {
        SymMatrix::from_spectrum(&self.eigenvectors, self.eigenvalues.as_slice())
    }
}

/// `max |λᵢ(A)|`.
pub fn spectral_norm(a: &SymMatrix) -> f64 {
    if a.dim() == 0 {
        return 0.0;
    }
    a.as_matrix()
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0_f64, |m, l| m.max(l.abs()))
}

/// Truncated singular value decomposition `M ≈ U diag(s) Vᵀ` keeping `s > rel_tol · s_max`.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v: DMatrix<f64>,
}

/// Thin SVD of a rectangular matrix through the symmetric eigenproblem of
/// `[[0, M], [Mᵀ, 0]]`, whose positive eigenpairs are `(σ, (u; v)/√2)`.
pub fn thin_svd(m: &DMatrix<f64>, rel_tol: f64) -> Result<ThinSvd> {
    let (rows, cols) = m.shape();
    let empty = || ThinSvd {
        u: DMatrix::zeros(rows, 0),
        singular_values: Vec::new(),
        v: DMatrix::zeros(cols, 0),
    };
    if rows == 0 || cols == 0 {
        return Ok(empty());
    }
    let mut aug = DMatrix::zeros(rows + cols, rows + cols);
    aug.view_mut((0, rows), (rows, cols)).copy_from(m);
    aug.view_mut((rows, 0), (cols, rows)).copy_from(&m.transpose());
    let dec = eigh(&SymMatrix(aug))?;
    let smax = dec.eigenvalues.iter().fold(0.0_f64, |a, l| a.max(*l));
    if smax == 0.0 {
        return Ok(empty());
    }
    let keep: Vec<usize> = (0..rows + cols)
        .filter(|&i| dec.eigenvalues[i] > rel_tol * smax)
        .collect();
    let mut u = DMatrix::zeros(rows, keep.len());
    let mut v = DMatrix::zeros(cols, keep.len());
    for (dst, &src) in keep.iter().enumerate() {
        let w = dec.eigenvectors.column(src);
        u.set_column(dst, &(w.rows(0, rows) * std::f64::consts::SQRT_2));
        v.set_column(dst, &(w.rows(rows, cols) * std::f64::consts::SQRT_2));
    }
    Ok(ThinSvd {
        u,
        singular_values: keep.iter().map(|&i| dec.eigenvalues[i]).collect(),
        v,
    })
}

impl ThinSvd {
    /// `M† c` restricted to the retained singular triplets.
    pub fn solve(&self, c: &Vector) -> Vector {
        let mut coeffs = self.u.tr_mul(c);
        for (x, s) in coeffs.iter_mut().zip(&self.singular_values) {
            *x /= s;
        }
        &self.v * coeffs
    }
}

pub fn random_normal_vector(d: usize, rng: &mut impl Rng) -> Vector {
    Vector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Haar-distributed orthogonal matrix from the QR factorization of a Gaussian matrix
/// (with the sign of `diag(R)` folded into `Q`).
pub fn random_orthogonal(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    orthonormalize(g)
}

/// Orthonormal factor of the QR decomposition with a positive `R` diagonal.
pub fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..q.ncols().min(r.nrows()) {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Random symmetric matrix `Q diag(spectrum) Qᵀ` with Haar-random `Q`.
pub fn random_with_spectrum(spectrum: &[f64], rng: &mut impl Rng) -> SymMatrix {
    let q = random_orthogonal(spectrum.len(), rng);
    SymMatrix::from_spectrum(&q, spectrum)
}
