//! Krylov solvers for symmetric systems `A p = b`.
//!
//! [`minres_qlp`] returns, at every iteration `t`, the minimum-norm element among the
//! minimizers of `‖A p − b‖` over the current Krylov subspace. The Lanczos basis is stored
//! (and by default fully reorthogonalized), the projected `(t+1) × t` tridiagonal
//! least-squares problem is solved by an incrementally updated Givens QR, and a truncated
//! SVD of the projected matrix takes over once it becomes numerically singular. That pair
//! of properties (minimum residual, then minimum norm) is what the optimizer relies on;
//! no explicit QLP factorization is exposed.
//!
//! [`cg`] is plain conjugate gradient with a negative-curvature exit, used by Newton-CG.

use nalgebra::DMatrix;

use crate::linalg::{thin_svd, EigenDecomposition, LinearOperator, Vector};

/// Relative threshold (against the running Frobenius norm of the projected matrix) below
/// which a Lanczos coefficient counts as a breakdown and a singular value as zero.
const PROJECTED_RANK_TOL: f64 = 1e-12;

/// Which Krylov subspace the minimum-residual solver searches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedMode {
    /// Range membership test when a decomposition is at hand, otherwise range-invariant.
    Auto,
    /// `K_t(A, b)`.
    Plain,
    /// `K_t(A, A b)`: every iterate stays in `Range(A)`.
    RangeInvariant,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct KrylovConfig {
    pub max_iters: usize,
    /// Inexactness tolerance; the solve stops once `‖A p − b‖ ≤ √θ ‖b‖`.
    pub theta: f64,
    pub seed_mode: SeedMode,
    pub reorthogonalize: bool,
    /// Keep every iterate `p_t` in the result (tests and diagnostics).
    #[serde(default)]
    pub record_iterates: bool,
}

impl Default for KrylovConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            theta: 1e-2,
            seed_mode: SeedMode::Auto,
            reorthogonalize: true,
            record_iterates: false,
        }
    }
}

impl KrylovConfig {
    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_seed_mode(mut self, seed_mode: SeedMode) -> Self {
        self.seed_mode = seed_mode;
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_iterates = true;
        self
    }

    fn validate(&self) {
        assert!(self.max_iters >= 1, "max_iters must be at least 1");
        assert!(
            (0.0..1.0).contains(&self.theta),
            "theta must lie in [0, 1), got {}",
            self.theta
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ToleranceMet,
    MaxIters,
    Breakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedKind {
    Plain,
    RangeInvariant,
}

/// One inner iteration: `(t, ‖A p_t − b‖, ‖A p_t‖, ‖p_t‖)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub t: usize,
    pub residual_norm: f64,
    pub image_norm: f64,
    pub solution_norm: f64,
}

#[derive(Debug, Clone)]
pub struct SolveTrace {
    pub entries: Vec<TraceEntry>,
    pub iterations_used: usize,
    pub termination: Termination,
    pub seed: SeedKind,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub solution: Vector,
    pub trace: SolveTrace,
    /// Operator applications, including the extra one for a range-invariant seed.
    pub oracle_applies: usize,
    /// `p_1, p_2, …` when [`KrylovConfig::record_iterates`] is set.
    pub iterates: Vec<Vector>,
}

impl SolveResult {
    /// Final `‖A p − b‖` as tracked by the solver.
    pub fn residual_norm(&self) -> f64 {
        self.trace.entries.last().map_or(0.0, |e| e.residual_norm)
    }

    pub fn termination(&self) -> Termination {
        self.trace.termination
    }
}

/// Starting vector of the Krylov subspace.
#[derive(Debug, Clone)]
pub enum Seed {
    Plain(Vector),
    RangeInvariant(Vector),
}

impl Seed {
    pub fn kind(&self) -> SeedKind {
        match self {
            Seed::Plain(_) => SeedKind::Plain,
            Seed::RangeInvariant(_) => SeedKind::RangeInvariant,
        }
    }

    pub fn vector(&self) -> &Vector {
        match self {
            Seed::Plain(v) | Seed::RangeInvariant(v) => v,
        }
    }
}

/// Picks `b` when it lies in `Range(A)` and `A b` otherwise.
///
/// In `Auto` mode the membership test `‖b − UUᵀb‖ ≤ 1e-8 ‖b‖` needs a decomposition; without
/// one the range-invariant seed is used, which is always admissible.
pub fn choose_seed(
    op: &dyn LinearOperator,
    rhs: &Vector,
    mode: SeedMode,
    dec: Option<&EigenDecomposition>,
) -> Seed {
    let plain = match (mode, dec) {
        (SeedMode::Plain, _) => true,
        (SeedMode::RangeInvariant, _) => false,
        (SeedMode::Auto, Some(dec)) => {
            (rhs - dec.range_project(rhs, None)).norm() <= 1e-8 * rhs.norm()
        }
        (SeedMode::Auto, None) => false,
    };
    if plain {
        Seed::Plain(rhs.clone())
    } else {
        Seed::RangeInvariant(op.apply(rhs))
    }
}

/// Minimum-residual, minimum-norm solve of `A p = rhs` for symmetric `A`.
pub fn minres_qlp(op: &dyn LinearOperator, rhs: &Vector, cfg: &KrylovConfig) -> SolveResult {
    minres_qlp_with(op, rhs, cfg, None)
}

/// [`minres_qlp`] with an optional decomposition of `A` for the `Auto` seed decision.
pub fn minres_qlp_with(
    op: &dyn LinearOperator,
    rhs: &Vector,
    cfg: &KrylovConfig,
    dec: Option<&EigenDecomposition>,
) -> SolveResult {
    cfg.validate();
    let seed = choose_seed(op, rhs, cfg.seed_mode, dec);
    let seed_applies = usize::from(seed.kind() == SeedKind::RangeInvariant);
    let mut solver = MinresState::new(op, rhs, seed, cfg);
    solver.run();
    let mut result = solver.finish();
    result.oracle_applies += seed_applies;
    result
}

struct MinresState<'a> {
    op: &'a dyn LinearOperator,
    rhs: &'a Vector,
    cfg: &'a KrylovConfig,
    seed_kind: SeedKind,
    rhs_norm: f64,
    /// Lanczos basis `q_0, q_1, …`.
    basis: Vec<Vector>,
    alphas: Vec<f64>,
    /// `betas[k]` couples `q_k` and `q_{k+1}`.
    betas: Vec<f64>,
    /// `Qᵀ rhs`, one entry per basis vector.
    rhs_coords: Vec<f64>,
    /// `rhs − Q Qᵀ rhs`.
    rhs_perp: Vector,
    t_frob_sq: f64,
    // Givens QR of the projected matrix: R[k,k], R[k-1,k], R[k-2,k] and rotation k.
    r_diag: Vec<f64>,
    r_super1: Vec<f64>,
    r_super2: Vec<f64>,
    rot: Vec<(f64, f64)>,
    /// Rotated right-hand side; `z.len() == columns + 1`.
    z: Vec<f64>,
    singular: bool,
    y: Vec<f64>,
    entries: Vec<TraceEntry>,
    iterates: Vec<Vector>,
    applies: usize,
    termination: Termination,
}

impl<'a> MinresState<'a> {
    fn new(op: &'a dyn LinearOperator, rhs: &'a Vector, seed: Seed, cfg: &'a KrylovConfig) -> Self {
        let seed_kind = seed.kind();
        let mut state = Self {
            op,
            rhs,
            cfg,
            seed_kind,
            rhs_norm: rhs.norm(),
            basis: Vec::new(),
            alphas: Vec::new(),
            betas: Vec::new(),
            rhs_coords: Vec::new(),
            rhs_perp: rhs.clone(),
            t_frob_sq: 0.0,
            r_diag: Vec::new(),
            r_super1: Vec::new(),
            r_super2: Vec::new(),
            rot: Vec::new(),
            z: Vec::new(),
            singular: false,
            y: Vec::new(),
            entries: Vec::new(),
            iterates: Vec::new(),
            applies: 0,
            termination: Termination::Breakdown,
        };
        let beta0 = seed.vector().norm();
        if beta0 > 0.0 && state.rhs_norm > 0.0 {
            let q0 = seed.vector() / beta0;
            state.push_basis(q0);
        }
        state
    }

    fn push_basis(&mut self, q: Vector) {
        let c = match (self.seed_kind, self.basis.is_empty()) {
            (SeedKind::Plain, true) => self.rhs_norm,
            (SeedKind::Plain, false) => 0.0,
            (SeedKind::RangeInvariant, _) => q.dot(self.rhs),
        };
        if self.seed_kind == SeedKind::Plain && self.basis.is_empty() {
            self.rhs_perp.fill(0.0);
        } else {
            self.rhs_perp.axpy(-c, &q, 1.0);
        }
        self.rhs_coords.push(c);
        self.z.push(c);
        self.basis.push(q);
    }

    fn run(&mut self) {
        if self.rhs_norm == 0.0 {
            self.termination = Termination::ToleranceMet;
            return;
        }
        if self.basis.is_empty() {
            // Range-invariant seed A·b vanished: b ⟂ Range(A), so p = 0 is the answer.
            self.termination = Termination::Breakdown;
            return;
        }
        let dim = self.op.dim();
        let target = self.cfg.theta.sqrt() * self.rhs_norm;
        loop {
            let k = self.alphas.len();
            let breakdown = self.lanczos_step();
            self.update_qr(k);
            self.solve_projected(k);
            let entry = self.trace_entry(k);
            self.entries.push(entry);
            if self.cfg.record_iterates {
                self.iterates.push(self.assemble_solution());
            }
            if entry.residual_norm <= target {
                self.termination = Termination::ToleranceMet;
                return;
            }
            if breakdown || k + 1 >= dim {
                self.termination = Termination::Breakdown;
                return;
            }
            if k + 1 >= self.cfg.max_iters {
                self.termination = Termination::MaxIters;
                return;
            }
        }
    }

    /// Extends the Lanczos relation by one column. Returns `true` on breakdown.
    fn lanczos_step(&mut self) -> bool {
        let k = self.alphas.len();
        let mut w = self.op.apply(&self.basis[k]);
        self.applies += 1;
        let alpha = self.basis[k].dot(&w);
        w.axpy(-alpha, &self.basis[k], 1.0);
        if k > 0 {
            w.axpy(-self.betas[k - 1], &self.basis[k - 1], 1.0);
        }
        if self.cfg.reorthogonalize {
            for _ in 0..2 {
                for q in &self.basis {
                    let h = q.dot(&w);
                    w.axpy(-h, q, 1.0);
                }
            }
        }
        let mut beta = w.norm();
        self.t_frob_sq += alpha * alpha + 2.0 * beta * beta;
        let breakdown = beta <= PROJECTED_RANK_TOL * self.t_frob_sq.sqrt();
        self.alphas.push(alpha);
        if breakdown {
            beta = 0.0;
        }
        self.betas.push(beta);
        if !breakdown {
            self.push_basis(w / beta);
        } else {
            self.z.push(0.0);
        }
        breakdown
    }

    fn update_qr(&mut self, k: usize) {
        // Column k of the projected matrix: rows k-1, k, k+1.
        let mut top2 = 0.0; // row k-2
        let mut top1 = if k > 0 { self.betas[k - 1] } else { 0.0 }; // row k-1
        let mut diag = self.alphas[k]; // row k
        let below = self.betas[k]; // row k+1
        if k >= 2 {
            let (c, s) = self.rot[k - 2];
            top2 = s * top1;
            top1 *= c;
        }
        if k >= 1 {
            let (c, s) = self.rot[k - 1];
            let (a, b) = (top1, diag);
            top1 = c * a + s * b;
            diag = -s * a + c * b;
        }
        let rho = diag.hypot(below);
        let (c, s) = if rho == 0.0 { (1.0, 0.0) } else { (diag / rho, below / rho) };
        self.rot.push((c, s));
        self.r_diag.push(rho);
        self.r_super1.push(top1);
        self.r_super2.push(top2);
        // Rotate the right-hand side entries k and k+1.
        let (a, b) = (self.z[k], self.z[k + 1]);
        self.z[k] = c * a + s * b;
        self.z[k + 1] = -s * a + c * b;

        let tol = PROJECTED_RANK_TOL * self.t_frob_sq.sqrt();
        if rho <= tol {
            self.singular = true;
        }
    }

    fn solve_projected(&mut self, k: usize) {
        let n = k + 1;
        if !self.singular {
            let mut y = vec![0.0; n];
            for i in (0..n).rev() {
                let mut acc = self.z[i];
                if i + 1 < n {
                    acc -= self.r_super1[i + 1] * y[i + 1];
                }
                if i + 2 < n {
                    acc -= self.r_super2[i + 2] * y[i + 2];
                }
                y[i] = acc / self.r_diag[i];
            }
            self.y = y;
            return;
        }
        // Pseudo-inverse of the (n+1) × n projected matrix.
        let t = self.projected_matrix(n);
        let c = Vector::from_iterator(
            n + 1,
            (0..=n).map(|i| self.rhs_coords.get(i).copied().unwrap_or(0.0)),
        );
        let y = match thin_svd(&t, PROJECTED_RANK_TOL) {
            Ok(svd) => svd.solve(&c),
            // Only a non-converging eigensolver lands here; keep the previous iterate.
            Err(_) => {
                let mut y = Vector::zeros(n);
                y.rows_mut(0, self.y.len().min(n))
                    .copy_from(&Vector::from_column_slice(&self.y[..self.y.len().min(n)]));
                y
            }
        };
        self.y = y.iter().copied().collect();
    }

    fn projected_matrix(&self, n: usize) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(n + 1, n);
        for j in 0..n {
            t[(j, j)] = self.alphas[j];
            t[(j + 1, j)] = self.betas[j];
            if j + 1 < n {
                t[(j, j + 1)] = self.betas[j];
            }
        }
        t
    }

    fn trace_entry(&self, k: usize) -> TraceEntry {
        let n = k + 1;
        // T̄ y, (n+1) entries.
        let mut ty = vec![0.0; n + 1];
        for j in 0..n {
            ty[j] += self.alphas[j] * self.y[j];
            ty[j + 1] += self.betas[j] * self.y[j];
            if j > 0 {
                ty[j - 1] += self.betas[j - 1] * self.y[j];
            }
        }
        let image_sq: f64 = ty.iter().map(|v| v * v).sum();
        let mut resid_sq = self.rhs_perp.norm_squared();
        for (i, tyi) in ty.iter().enumerate() {
            let c = self.rhs_coords.get(i).copied().unwrap_or(0.0);
            resid_sq += (tyi - c) * (tyi - c);
        }
        TraceEntry {
            t: n,
            residual_norm: resid_sq.sqrt(),
            image_norm: image_sq.sqrt(),
            solution_norm: self.y.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    fn assemble_solution(&self) -> Vector {
        let mut p = Vector::zeros(self.op.dim());
        for (q, yi) in self.basis.iter().zip(&self.y) {
            p.axpy(*yi, q, 1.0);
        }
        p
    }

    fn finish(self) -> SolveResult {
        let solution = self.assemble_solution();
        SolveResult {
            solution,
            trace: SolveTrace {
                iterations_used: self.entries.len(),
                entries: self.entries,
                termination: self.termination,
                seed: self.seed_kind,
            },
            oracle_applies: self.applies,
            iterates: self.iterates,
        }
    }
}

/// Conjugate gradient on `A p = rhs` with a curvature test on every search direction.
///
/// On `⟨d, A d⟩ ≤ 0` the current iterate is returned with [`Termination::Breakdown`]; when
/// that happens on the very first direction the returned vector is `rhs` itself, which for
/// the Newton system `rhs = −g` is the steepest-descent direction.
pub fn cg(op: &dyn LinearOperator, rhs: &Vector, cfg: &KrylovConfig) -> SolveResult {
    cfg.validate();
    let d = op.dim();
    let rhs_norm = rhs.norm();
    let target = cfg.theta.sqrt() * rhs_norm;
    let mut x = Vector::zeros(d);
    let mut r = rhs.clone();
    let mut dir = r.clone();
    let mut rr = r.norm_squared();
    let mut entries = Vec::new();
    let mut iterates = Vec::new();
    let mut applies = 0;

    let termination = loop {
        if rr.sqrt() <= target {
            break Termination::ToleranceMet;
        }
        if entries.len() >= cfg.max_iters {
            break Termination::MaxIters;
        }
        let ad = op.apply(&dir);
        applies += 1;
        let curvature = dir.dot(&ad);
        if curvature <= 0.0 {
            if entries.is_empty() {
                x = rhs.clone();
            }
            break Termination::Breakdown;
        }
        let step = rr / curvature;
        x.axpy(step, &dir, 1.0);
        r.axpy(-step, &ad, 1.0);
        let rr_next = r.norm_squared();
        let t = entries.len() + 1;
        entries.push(TraceEntry {
            t,
            residual_norm: rr_next.sqrt(),
            image_norm: (rhs - &r).norm(),
            solution_norm: x.norm(),
        });
        if cfg.record_iterates {
            iterates.push(x.clone());
        }
        let beta = rr_next / rr;
        rr = rr_next;
        dir = &r + &dir * beta;
    };
    SolveResult {
        solution: x,
        trace: SolveTrace {
            iterations_used: entries.len(),
            entries,
            termination,
            seed: SeedKind::Plain,
        },
        oracle_applies: applies,
        iterates,
    }
}

/// Spectral band of a symmetric operator, split at `threshold` on `|λ|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Band {
    /// Eigenvalues with `|λ| ≥ threshold`.
    Head { threshold: f64 },
    /// Nonzero eigenvalues with `|λ| < threshold`.
    Tail { threshold: f64 },
}

/// Solves `min ‖A x − P b‖` over `P · K_t` for the orthogonal projector `P` onto one
/// spectral band of `A`, returning the minimum-norm solution.
///
/// `K_t` is the Krylov subspace [`minres_qlp`] would build with the same configuration,
/// with `t = cfg.max_iters` (capped at breakdown). Once `K_t` spans the range, the head and
/// tail solutions add up to the minimum-norm solution. `dec` must be the decomposition of `op`.
pub fn decoupled_subspace_solve(
    op: &dyn LinearOperator,
    rhs: &Vector,
    dec: &EigenDecomposition,
    band: Band,
    cfg: &KrylovConfig,
) -> SolveResult {
    cfg.validate();
    let d = op.dim();
    let rank = dec.numerical_rank(None);
    let in_band: Vec<usize> = (0..rank)
        .filter(|&i| {
            let mag = dec.eigenvalues[i].abs();
            match band {
                Band::Head { threshold } => mag >= threshold,
                Band::Tail { threshold } => mag < threshold,
            }
        })
        .collect();
    let empty = |applies| SolveResult {
        solution: Vector::zeros(d),
        trace: SolveTrace {
            entries: Vec::new(),
            iterations_used: 0,
            termination: Termination::Breakdown,
            seed: SeedKind::Plain,
        },
        oracle_applies: applies,
        iterates: Vec::new(),
    };
    if in_band.is_empty() {
        return empty(0);
    }
    let mut u = DMatrix::zeros(d, in_band.len());
    for (dst, &src) in in_band.iter().enumerate() {
        u.set_column(dst, &dec.eigenvectors.column(src));
    }
    let project = |v: &Vector| -> Vector { &u * u.tr_mul(v) };

    let seed = choose_seed(op, rhs, cfg.seed_mode, Some(dec));
    let mut applies = usize::from(seed.kind() == SeedKind::RangeInvariant);
    let basis = krylov_basis(op, seed.vector(), cfg.max_iters, &mut applies);
    if basis.is_empty() {
        return empty(applies);
    }

    // Orthonormal basis of P · K_t.
    let mut pk = DMatrix::zeros(d, basis.len());
    for (j, q) in basis.iter().enumerate() {
        pk.set_column(j, &project(q));
    }
    let w = match thin_svd(&pk, 1e-10) {
        Ok(svd) => svd.u,
        Err(_) => return empty(applies),
    };

    let mut aw = DMatrix::zeros(d, w.ncols());
    for j in 0..w.ncols() {
        aw.set_column(j, &op.apply(&w.column(j).into_owned()));
        applies += 1;
    }
    let target = project(rhs);
    let coeffs = match thin_svd(&aw, 1e-12) {
        Ok(svd) => svd.solve(&target),
        Err(_) => return empty(applies),
    };
    let solution = &w * coeffs;
    let image = op.apply(&solution);
    applies += 1;
    let residual = (&image - &target).norm();
    SolveResult {
        trace: SolveTrace {
            entries: vec![TraceEntry {
                t: basis.len(),
                residual_norm: residual,
                image_norm: image.norm(),
                solution_norm: solution.norm(),
            }],
            iterations_used: basis.len(),
            termination: Termination::MaxIters,
            seed: seed.kind(),
        },
        solution,
        oracle_applies: applies,
        iterates: Vec::new(),
    }
}

/// Orthonormal Lanczos basis of `K_t(A, seed)` with full reorthogonalization.
fn krylov_basis(
    op: &dyn LinearOperator,
    seed: &Vector,
    t: usize,
    applies: &mut usize,
) -> Vec<Vector> {
    let mut basis: Vec<Vector> = Vec::new();
    let norm = seed.norm();
    if norm == 0.0 {
        return basis;
    }
    basis.push(seed / norm);
    let mut frob_sq = 0.0;
    while basis.len() < t.min(op.dim()) {
        let mut w = op.apply(basis.last().expect("non-empty basis"));
        *applies += 1;
        let alpha = basis.last().expect("non-empty basis").dot(&w);
        for _ in 0..2 {
            for q in &basis {
                let h = q.dot(&w);
                w.axpy(-h, q, 1.0);
            }
        }
        let beta = w.norm();
        frob_sq += alpha * alpha + 2.0 * beta * beta;
        if beta <= PROJECTED_RANK_TOL * frob_sq.sqrt() {
            break;
        }
        basis.push(w / beta);
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{eigh, random_normal_vector, random_with_spectrum, SymMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> Vector {
        Vector::from_column_slice(x)
    }

    fn exact() -> KrylovConfig {
        KrylovConfig::default().with_theta(0.0)
    }

    fn singular_instance(d: usize, r: usize, rng: &mut ChaCha8Rng) -> SymMatrix {
        let spectrum: Vec<f64> = (0..d)
            .map(|i| {
                if i < r {
                    let m = rng.random_range(0.5..4.0);
                    if rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                } else {
                    0.0
                }
            })
            .collect();
        random_with_spectrum(&spectrum, rng)
    }

    #[test]
    fn identity_solves_in_one_iteration() {
        let a = SymMatrix::identity(3);
        let res = minres_qlp(&a, &v(&[1.0, 0.0, 0.0]), &exact().with_seed_mode(SeedMode::Plain));
        assert_eq!(res.solution.as_slice(), &[1.0, 0.0, 0.0]);
        assert_eq!(res.trace.iterations_used, 1);
        assert_eq!(res.termination(), Termination::ToleranceMet);
        assert_eq!(res.oracle_applies, 1);
    }

    #[test]
    fn singular_consistent_returns_min_norm() {
        let a = SymMatrix::from_diagonal(&[2.0, 0.0]);
        for mode in [SeedMode::Plain, SeedMode::RangeInvariant, SeedMode::Auto] {
            let res = minres_qlp(&a, &v(&[-4.0, 0.0]), &exact().with_seed_mode(mode));
            assert!((res.solution - v(&[-2.0, 0.0])).norm() <= 1e-15, "{mode:?}");
        }
    }

    #[test]
    fn seed_choice_follows_range_membership() {
        let a = SymMatrix::from_diagonal(&[1.0, 0.0]);
        let dec = eigh(&a).unwrap();
        let s = choose_seed(&a, &v(&[1.0, 0.0]), SeedMode::Auto, Some(&dec));
        assert_eq!(s.kind(), SeedKind::Plain);
        let s = choose_seed(&a, &v(&[1.0, 1.0]), SeedMode::Auto, Some(&dec));
        assert_eq!(s.kind(), SeedKind::RangeInvariant);
        assert_eq!(s.vector().as_slice(), &[1.0, 0.0]);
        let s = choose_seed(&a, &v(&[1.0, 0.0]), SeedMode::Auto, None);
        assert_eq!(s.kind(), SeedKind::RangeInvariant);
    }

    #[test]
    fn range_invariant_solve_of_inconsistent_system() {
        let a = SymMatrix::from_diagonal(&[1.0, 0.0]);
        let rhs = v(&[-1.0, -1.0]);
        let res = minres_qlp(&a, &rhs, &exact().with_seed_mode(SeedMode::RangeInvariant));
        assert!((res.solution - v(&[-1.0, 0.0])).norm() <= 1e-15);
        // The plain subspace contains the null direction but the min-norm rule drops it.
        let res = minres_qlp(&a, &rhs, &exact().with_seed_mode(SeedMode::Plain));
        assert!((res.solution - v(&[-1.0, 0.0])).norm() <= 1e-12);
    }

    #[test]
    fn full_run_matches_pseudo_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..10 {
            let a = singular_instance(20, 12, &mut rng);
            let dec = eigh(&a).unwrap();
            let rhs = dec.range_project(&random_normal_vector(20, &mut rng), Some(1e-10));
            let res = minres_qlp_with(&a, &rhs, &exact(), Some(&dec));
            let oracle = dec.pinv_apply(&rhs, Some(1e-10));
            let err = (&res.solution - &oracle).norm() / oracle.norm();
            assert!(err <= 1e-8, "trial {trial}: err {err:e}");
            // Inconsistent right-hand side, range-invariant seed.
            let rhs = random_normal_vector(20, &mut rng);
            let res = minres_qlp(&a, &rhs, &exact());
            let oracle = dec.pinv_apply(&rhs, Some(1e-10));
            let err = (&res.solution - &oracle).norm() / oracle.norm();
            assert!(err <= 1e-8, "trial {trial}: inconsistent err {err:e}");
        }
    }

    #[test]
    fn trace_matches_recomputed_quantities_and_identities_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mode in [SeedMode::Plain, SeedMode::RangeInvariant] {
            let a = singular_instance(15, 9, &mut rng);
            let b = random_normal_vector(15, &mut rng);
            let res = minres_qlp(&a, &b, &exact().with_seed_mode(mode).recording());
            let bb = b.norm_squared();
            let mut prev: Option<TraceEntry> = None;
            for (entry, p) in res.trace.entries.iter().zip(&res.iterates) {
                let ap = a.matvec(p);
                let r = &ap - &b;
                assert!((r.norm() - entry.residual_norm).abs() <= 1e-10 * b.norm());
                assert!((ap.norm() - entry.image_norm).abs() <= 1e-10 * b.norm());
                assert!((p.norm() - entry.solution_norm).abs() <= 1e-10 * p.norm().max(1.0));
                assert!(p.dot(&a.matvec(&r)).abs() <= 1e-8 * bb);
                assert!(ap.dot(&r).abs() <= 1e-8 * bb);
                if let Some(prev) = prev {
                    assert!(entry.residual_norm <= prev.residual_norm + 1e-12 * b.norm());
                    assert!(entry.image_norm >= prev.image_norm - 1e-12 * b.norm());
                }
                prev = Some(*entry);
            }
        }
    }

    #[test]
    fn stops_at_inexact_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spectrum: Vec<f64> = (1..=40).map(|i| i as f64).collect();
        let a = random_with_spectrum(&spectrum, &mut rng);
        let b = random_normal_vector(40, &mut rng);
        let theta = 1e-2;
        let res = minres_qlp(&a, &b, &KrylovConfig::default().with_theta(theta));
        assert_eq!(res.termination(), Termination::ToleranceMet);
        let true_resid = (a.matvec(&res.solution) - &b).norm();
        assert!(true_resid <= theta.sqrt() * b.norm() * (1.0 + 1e-10));
        assert!(res.trace.iterations_used < 40);
        // Range-invariant seed pays one extra application.
        assert_eq!(res.oracle_applies, res.trace.iterations_used + 1);
    }

    #[test]
    fn max_iters_flagged() {
        let spectrum: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let a = SymMatrix::from_diagonal(&spectrum);
        let b = Vector::from_element(30, 1.0);
        let res = minres_qlp(&a, &b, &exact().with_max_iters(3));
        assert_eq!(res.termination(), Termination::MaxIters);
        assert_eq!(res.trace.iterations_used, 3);
    }

    #[test]
    fn solution_lies_in_the_krylov_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = singular_instance(12, 8, &mut rng);
        let b = random_normal_vector(12, &mut rng);
        for t in 1..=4 {
            let cfg = exact().with_seed_mode(SeedMode::Plain).with_max_iters(t);
            let res = minres_qlp(&a, &b, &cfg);
            // Independent basis: b, Ab, A²b, … orthonormalized by QR.
            let mut k = DMatrix::zeros(12, t);
            let mut col = b.clone();
            for j in 0..t {
                k.set_column(j, &col);
                col = a.matvec(&col);
            }
            let q = crate::linalg::orthonormalize(k);
            let p = &res.solution;
            let inside = &q * q.tr_mul(p);
            assert!((inside - p).norm() <= 1e-8 * p.norm(), "t={t}");
        }
    }

    #[test]
    fn zero_rhs_and_zero_operator() {
        let a = SymMatrix::from_diagonal(&[1.0, 2.0]);
        let res = minres_qlp(&a, &Vector::zeros(2), &exact());
        assert_eq!(res.solution.as_slice(), &[0.0, 0.0]);
        assert_eq!(res.termination(), Termination::ToleranceMet);
        let z = SymMatrix::zeros(2);
        let res = minres_qlp(&z, &v(&[1.0, 1.0]), &exact());
        assert_eq!(res.solution.as_slice(), &[0.0, 0.0]);
        assert_eq!(res.termination(), Termination::Breakdown);
    }

    #[test]
    fn cg_examples() {
        let res = cg(&SymMatrix::identity(2), &v(&[3.0, 4.0]), &exact());
        assert_eq!(res.solution.as_slice(), &[3.0, 4.0]);

        let res = cg(&SymMatrix::from_diagonal(&[4.0, 1.0]), &v(&[4.0, 1.0]), &exact());
        assert!((res.solution - v(&[1.0, 1.0])).norm() <= 1e-10);
    }

    #[test]
    fn cg_negative_curvature_exits() {
        let a = SymMatrix::from_diagonal(&[1.0, -1.0]);
        // dᵀAd = 0 on the first direction: steepest-descent fallback.
        let res = cg(&a, &v(&[1.0, 1.0]), &exact());
        assert_eq!(res.termination(), Termination::Breakdown);
        assert_eq!(res.trace.iterations_used, 0);
        assert_eq!(res.solution.as_slice(), &[1.0, 1.0]);
        // Positive curvature first, negative on the second direction.
        let res = cg(&a, &v(&[2.0, 1.0]), &exact());
        assert_eq!(res.termination(), Termination::Breakdown);
        assert_eq!(res.trace.iterations_used, 1);
        assert!((res.solution - v(&[10.0 / 3.0, 5.0 / 3.0])).norm() <= 1e-14);
    }

    #[test]
    fn decoupled_solves_on_two_band_diagonal() {
        let a = SymMatrix::from_diagonal(&[2.0, 0.1]);
        let dec = eigh(&a).unwrap();
        let rhs = v(&[2.0, 0.1]);
        let cfg = exact().with_max_iters(2);
        let head = decoupled_subspace_solve(&a, &rhs, &dec, Band::Head { threshold: 1.0 }, &cfg);
        let tail = decoupled_subspace_solve(&a, &rhs, &dec, Band::Tail { threshold: 1.0 }, &cfg);
        assert!((head.solution - v(&[1.0, 0.0])).norm() <= 1e-12);
        assert!((tail.solution - v(&[0.0, 1.0])).norm() <= 1e-12);
        let none = decoupled_subspace_solve(&a, &rhs, &dec, Band::Head { threshold: 5.0 }, &cfg);
        assert_eq!(none.solution.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn decoupled_solutions_bounded_and_sum_to_full_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            // Head band in [2, 5], tail band in [0.05, 0.2], plus a null space.
            let spectrum: Vec<f64> = (0..20)
                .map(|i| match i {
                    0..=7 => rng.random_range(2.0..5.0),
                    8..=13 => -rng.random_range(0.05..0.2),
                    _ => 0.0,
                })
                .collect();
            let a = random_with_spectrum(&spectrum, &mut rng);
            let dec = eigh(&a).unwrap();
            let b = random_normal_vector(20, &mut rng);
            for t in [3, 7, 20] {
                let cfg = exact().with_seed_mode(SeedMode::RangeInvariant).with_max_iters(t);
                let head = decoupled_subspace_solve(&a, &b, &dec, Band::Head { threshold: 1.0 }, &cfg);
                let tail = decoupled_subspace_solve(&a, &b, &dec, Band::Tail { threshold: 1.0 }, &cfg);
                if t == 20 {
                    let joint = minres_qlp(&a, &b, &cfg);
                    let sum = &head.solution + &tail.solution;
                    let err = (&sum - &joint.solution).norm() / joint.solution.norm();
                    assert!(err <= 1e-7, "err={err:e}");
                }
                // Per-band norm bounds: ‖x_i‖ ≤ ‖P_i b‖ ‖[A P_i]†‖.
                let head_proj = dec.eigenvectors.columns(0, 8).into_owned();
                let tail_proj = dec.eigenvectors.columns(8, 6).into_owned();
                let pb_head = (&head_proj * head_proj.tr_mul(&b)).norm();
                let pb_tail = (&tail_proj * tail_proj.tr_mul(&b)).norm();
                let inv_head = 1.0 / dec.eigenvalues[7].abs();
                let inv_tail = 1.0 / dec.eigenvalues[13].abs();
                assert!(head.solution.norm() <= pb_head * inv_head * (1.0 + 1e-10));
                assert!(tail.solution.norm() <= pb_tail * inv_tail * (1.0 + 1e-10));
            }
        }
    }
}
