//! Hessian perturbations, measured spectral diagnostics and the predicted stability
//! constants of the perturbed Newton-MR analysis.
//!
//! Sub-sampled Hessians are built in [`crate::objectives`]; this module covers additive
//! noise and everything that compares a perturbed matrix `H̃ = H + E` against `H`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{eigh, spectral_norm, SymMatrix, Vector};
use crate::optim::UpdateMode;

/// Additive perturbation model.
#[derive(Debug, Clone, PartialEq)]
pub enum PerturbationKind {
    /// Fresh GOE draw, rescaled to spectral norm `ε`, for every outer iteration.
    Goe,
    /// The given matrix rescaled to spectral norm `ε`.
    FixedMatrix(SymMatrix),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub epsilon: f64,
    pub rng_seed: u64,
}

impl PerturbationSpec {
    pub fn none() -> Self {
        Self { kind: PerturbationKind::None, epsilon: 0.0, rng_seed: 0 }
    }

    pub fn goe(epsilon: f64, rng_seed: u64) -> Result<Self> {
        Self::checked(PerturbationKind::Goe, epsilon, rng_seed)
    }

    pub fn fixed(matrix: SymMatrix, epsilon: f64) -> Result<Self> {
        Self::checked(PerturbationKind::FixedMatrix(matrix), epsilon, 0)
    }

    fn checked(kind: PerturbationKind, epsilon: f64, rng_seed: u64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!("epsilon must be finite and ≥ 0, got {epsilon}")));
        }
        Ok(Self { kind, epsilon, rng_seed })
    }

    pub fn is_none(&self) -> bool {
        matches!(self.kind, PerturbationKind::None) || self.epsilon == 0.0
    }

    /// The perturbation `E` used at outer iteration `iteration`, or `None` for no noise.
    pub fn sample(&self, dim: usize, iteration: u64) -> Result<Option<SymMatrix>> {
        if self.is_none() {
            return Ok(None);
        }
        match &self.kind {
            PerturbationKind::None => Ok(None),
            PerturbationKind::Goe => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
                rng.set_stream(iteration);
                Ok(Some(goe_with(dim, self.epsilon, &mut rng)))
            }
            PerturbationKind::FixedMatrix(m) => {
                if m.dim() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: m.dim() });
                }
                let norm = spectral_norm(m);
                if norm == 0.0 {
                    return Ok(None);
                }
                Ok(Some(m.scale(self.epsilon / norm)))
            }
        }
    }
}

/// A GOE draw rescaled so that its spectral norm is exactly `epsilon`.
pub fn sample_goe(d: usize, epsilon: f64, seed: u64) -> SymMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    goe_with(d, epsilon, &mut rng)
}

fn goe_with(d: usize, epsilon: f64, rng: &mut ChaCha8Rng) -> SymMatrix {
    assert!(d >= 1, "dimension must be positive");
    if epsilon == 0.0 {
        return SymMatrix::zeros(d);
    }
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let e = SymMatrix::symmetrize(&(&g + g.transpose()) * std::f64::consts::FRAC_1_SQRT_2);
    let norm = spectral_norm(&e);
    e.scale(epsilon / norm)
}

/// Measured spectral quantities of an (H, H̃, g) triple, plus the predictions they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDiagnostics {
    /// Smallest nonzero `|λ(H)|`; `None` when `H` is numerically zero.
    pub gamma: Option<f64>,
    /// `‖U Uᵀ g‖² / ‖g‖²` for the range basis `U` of `H`; 1 when `g = 0`.
    pub nu: f64,
    /// `‖H̃ − H‖`.
    pub epsilon: f64,
    /// `ε ‖H̃†‖`; 0 when `ε = 0`.
    pub c_const: f64,
    pub r: usize,
    pub r_tilde: usize,
    pub acute: bool,
    pub teps: Option<f64>,
    pub nu_tilde: Option<f64>,
    pub gamma_tilde: Option<f64>,
}

impl SpectralDiagnostics {
    /// Diagnostics from given constants, with the predictions filled in where defined.
    pub fn from_constants(gamma: f64, nu: f64, epsilon: f64, c_const: f64, acute: bool) -> Self {
        let mut diag = Self {
            gamma: Some(gamma),
            nu,
            epsilon,
            c_const,
            r: 0,
            r_tilde: 0,
            acute,
            teps: None,
            nu_tilde: None,
            gamma_tilde: None,
        };
        diag.fill_predictions();
        diag
    }

    fn fill_predictions(&mut self) {
        self.teps = predicted_teps(self).ok();
        self.nu_tilde = predicted_nu_tilde(self).ok();
        self.gamma_tilde = predicted_gamma_tilde(self).ok();
    }

    fn gamma_checked(&self) -> Result<f64> {
        self.gamma
            .ok_or_else(|| Error::OutOfRegime { inequality: "gamma undefined (H = 0)".into() })
    }

    /// Flattened record for CSV output.
    pub fn row(&self, theory: Option<(f64, f64, f64)>) -> DiagnosticsRow {
        DiagnosticsRow {
            gamma: self.gamma,
            nu: self.nu,
            epsilon: self.epsilon,
            c: self.c_const,
            r: self.r,
            r_tilde: self.r_tilde,
            acute: self.acute,
            teps: self.teps,
            nu_tilde: self.nu_tilde,
            gamma_tilde: self.gamma_tilde,
            eta: theory.map(|t| t.0),
            c1: theory.map(|t| t.1),
            c2: theory.map(|t| t.2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiagnosticsRow {
    pub gamma: Option<f64>,
    pub nu: f64,
    pub epsilon: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub r: usize,
    pub r_tilde: usize,
    pub acute: bool,
    pub teps: Option<f64>,
    pub nu_tilde: Option<f64>,
    pub gamma_tilde: Option<f64>,
    pub eta: Option<f64>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
}

/// Measures γ, ν, ε, C and the ranks of `H` and `H̃`. `tol` overrides the rank tolerance
/// of both decompositions.
pub fn measure_diagnostics(
    h: &SymMatrix,
    h_tilde: &SymMatrix,
    g: &Vector,
    tol: Option<f64>,
) -> Result<SpectralDiagnostics> {
    let d = h.dim();
    if h_tilde.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: h_tilde.dim() });
    }
    if g.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: g.len() });
    }
    let dec = eigh(h)?;
    let dec_tilde = eigh(h_tilde)?;
    let r = dec.numerical_rank(tol);
    let r_tilde = dec_tilde.numerical_rank(tol);
    let gamma = (r >= 1).then(|| dec.eigenvalues[r - 1].abs());
    let gg = g.norm_squared();
    let nu = if gg == 0.0 { 1.0 } else { dec.range_project(g, tol).norm_squared() / gg };
    let epsilon = spectral_norm(&h_tilde.sub(h));
    let c_const = if epsilon == 0.0 { 0.0 } else { epsilon * dec_tilde.pinv_norm(tol) };
    let mut diag = SpectralDiagnostics {
        gamma,
        nu: nu.min(1.0),
        epsilon,
        c_const,
        r,
        r_tilde,
        acute: r == r_tilde,
        teps: None,
        nu_tilde: None,
        gamma_tilde: None,
    };
    diag.fill_predictions();
    Ok(diag)
}

fn out_of_regime(inequality: impl Into<String>) -> Error {
    Error::OutOfRegime { inequality: inequality.into() }
}

/// Bound on `‖(HH† − H̃H̃†) g‖ / ‖g‖`: `4ε/γ + √(1−ν)`, or `2ε/γ` for acute perturbations.
pub fn predicted_teps(diag: &SpectralDiagnostics) -> Result<f64> {
    let gamma = diag.gamma_checked()?;
    let eps = diag.epsilon;
    if eps >= gamma {
        return Err(out_of_regime(format!("epsilon < gamma ({eps} ≥ {gamma})")));
    }
    Ok(if diag.acute {
        2.0 * eps / gamma
    } else {
        4.0 * eps / gamma + (1.0 - diag.nu).max(0.0).sqrt()
    })
}

/// Lower bound on `‖Ũᵀg‖²/‖g‖²` for the range basis `Ũ` of `H̃`.
pub fn predicted_nu_tilde(diag: &SpectralDiagnostics) -> Result<f64> {
    let gamma = diag.gamma_checked()?;
    let (nu, eps) = (diag.nu, diag.epsilon);
    let value = if diag.acute {
        if eps >= gamma * nu / 2.0 {
            return Err(out_of_regime(format!(
                "epsilon < gamma*nu/2 ({eps} ≥ {})",
                gamma * nu / 2.0
            )));
        }
        nu - 2.0 * eps / gamma
    } else {
        if nu <= 0.5 {
            return Err(out_of_regime(format!("nu > 1/2 ({nu} ≤ 0.5)")));
        }
        let bound = gamma * (2.0 * nu - 1.0) / 4.0;
        if eps >= bound {
            return Err(out_of_regime(format!("epsilon < gamma*(2nu-1)/4 ({eps} ≥ {bound})")));
        }
        2.0 * nu - 1.0 - 4.0 * eps / gamma
    };
    Ok(value.min(1.0))
}

/// Lower bound `γ̃` with `‖H̃†g‖ ≤ ‖g‖/γ̃`.
pub fn predicted_gamma_tilde(diag: &SpectralDiagnostics) -> Result<f64> {
    let gamma = diag.gamma_checked()?;
    let eps = diag.epsilon;
    if eps >= gamma {
        return Err(out_of_regime(format!("epsilon < gamma ({eps} ≥ {gamma})")));
    }
    if diag.acute {
        return Ok(gamma - eps);
    }
    if eps <= 0.0 {
        return Err(out_of_regime("epsilon > 0 for a non-acute perturbation"));
    }
    let inv = 1.0 / (gamma - eps)
        + diag.c_const * (2.0 / gamma + (1.0 - diag.nu).max(0.0).sqrt() / eps);
    Ok(1.0 / inv)
}

/// Smoothness and line-search constants entering the predicted rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryConstants {
    /// Lipschitz constant of `∇(‖g‖²/2)` on the sublevel set of `x₀`.
    pub l_x0: f64,
    /// Hessian Lipschitz constant.
    pub l_h: f64,
    pub rho: f64,
    pub theta: f64,
}

/// `max{0, 4ρ ν̃ γ̃²/L · ((1−ρ)ν̃ − ε/γ̃)}`.
pub fn eta_formula(rho: f64, nu_tilde: f64, gamma_tilde: f64, epsilon: f64, l: f64) -> f64 {
    let value =
        4.0 * rho * nu_tilde * gamma_tilde * gamma_tilde / l * ((1.0 - rho) * nu_tilde - epsilon / gamma_tilde);
    value.max(0.0)
}

/// Predicted linear rate. Exact updates use `ν̃`, inexact updates `1 − θ`. Outside the
/// regime where the predictions are defined no descent can be promised and 0 is returned.
pub fn predicted_eta(tc: &TheoryConstants, diag: &SpectralDiagnostics, mode: UpdateMode) -> f64 {
    let Ok(gamma_tilde) = predicted_gamma_tilde(diag) else { return 0.0 };
    let nu_tilde = match mode {
        UpdateMode::Exact => match predicted_nu_tilde(diag) {
            Ok(v) => v,
            Err(_) => return 0.0,
        },
        UpdateMode::Inexact => 1.0 - tc.theta,
    };
    eta_formula(tc.rho, nu_tilde, gamma_tilde, diag.epsilon, tc.l_x0).min(1.0)
}

/// `(c₁, c₂) = (L_H/(2γ̃²), ε/γ̃ + √(1−ν̃))`.
pub fn local_constants_formula(l_h: f64, gamma_tilde: f64, epsilon: f64, one_minus_nu: f64) -> (f64, f64) {
    let c1 = l_h / (2.0 * gamma_tilde * gamma_tilde);
    let c2 = epsilon / gamma_tilde + one_minus_nu.max(0.0).sqrt();
    (c1, c2)
}

/// Local recursion constants; inexact updates replace `1 − ν̃` by `θ`.
pub fn predicted_local_constants(
    tc: &TheoryConstants,
    diag: &SpectralDiagnostics,
    mode: UpdateMode,
) -> Result<(f64, f64)> {
    let gamma_tilde = predicted_gamma_tilde(diag)?;
    let one_minus = match mode {
        UpdateMode::Exact => 1.0 - predicted_nu_tilde(diag)?,
        UpdateMode::Inexact => tc.theta,
    };
    Ok(local_constants_formula(tc.l_h, gamma_tilde, diag.epsilon, one_minus))
}

/// Admissible perturbation sizes implied by the convergence corollaries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonThresholds {
    /// Largest ε with `η > 0` under general perturbations (0 when none exists).
    pub general_bound: f64,
    /// Acute perturbations: sup ε with `ε < (1−ρ)(γ−ε)(νγ−2ε)/γ`.
    pub acute_eta_bound: f64,
    /// `ν = 1`: sup ε with `ε < (1−ρ)(γ−ε)(γ−4ε)/((1+2C)γ − 2Cε)`.
    pub nu1_eta_bound: f64,
    /// Acute local rate: sup ε with `ε < (γ−ε)(1 − √(1 − (ν − 2ε/γ)))`.
    pub acute_local_bound: f64,
    /// `ν = 1` local rate: sup ε with `ε < (γ−ε)(1 − 2√(ε/γ))/(1+2C)`.
    pub nu1_local_bound: f64,
    /// `δ(C)`; the general bound also needs `ν > δ(C)`.
    pub delta_c: f64,
}

/// `δ(t) = [√((t² + 4(1−ρ)²)² − 16(1−ρ)⁴) − (t² − 4(1−ρ)²)] / (8(1−ρ)²)`.
pub fn delta(t: f64, rho: f64) -> f64 {
    let s = (1.0 - rho) * (1.0 - rho);
    let t2 = t * t;
    (((t2 + 4.0 * s).powi(2) - 16.0 * s * s).sqrt() - (t2 - 4.0 * s)) / (8.0 * s)
}

/// Closed-form ε-bound under general perturbations, 0 when `b ≤ 0`.
pub fn general_epsilon_bound(gamma: f64, nu: f64, c: f64, rho: f64) -> f64 {
    let a = c + 2.0 * (1.0 - rho);
    let b = (1.0 - rho) * (2.0 * nu - 1.0) - c * (1.0 - nu).max(0.0).sqrt();
    if b <= 0.0 {
        return 0.0;
    }
    let s = 2.0 * a + b + 1.0;
    gamma * (s - (s * s - 8.0 * a * b).sqrt()) / (4.0 * a)
}

/// Supremum of `{ε ∈ [0, γ) : ε < rhs(ε)}` for `rhs` decreasing in ε, by bisection.
fn implicit_bound(gamma: f64, rhs: impl Fn(f64) -> f64) -> f64 {
    let holds = |eps: f64| eps < rhs(eps);
    if !holds(0.0) {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, gamma);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if holds(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

pub fn epsilon_thresholds(diag: &SpectralDiagnostics, rho: f64) -> Result<EpsilonThresholds> {
    let gamma = diag.gamma_checked()?;
    let (nu, c) = (diag.nu, diag.c_const);
    let one_rho = 1.0 - rho;
    Ok(EpsilonThresholds {
        general_bound: general_epsilon_bound(gamma, nu, c, rho),
        acute_eta_bound: implicit_bound(gamma, |e| one_rho * (gamma - e) * (nu * gamma - 2.0 * e) / gamma),
        nu1_eta_bound: implicit_bound(gamma, |e| {
            one_rho * (gamma - e) * (gamma - 4.0 * e) / ((1.0 + 2.0 * c) * gamma - 2.0 * c * e)
        }),
        acute_local_bound: implicit_bound(gamma, |e| {
            let inner = 1.0 - (nu - 2.0 * e / gamma);
            if inner < 0.0 {
                return f64::NEG_INFINITY;
            }
            (gamma - e) * (1.0 - inner.sqrt())
        }),
        nu1_local_bound: implicit_bound(gamma, |e| {
            (gamma - e) * (1.0 - 2.0 * (e / gamma).sqrt()) / (1.0 + 2.0 * c)
        }),
        delta_c: delta(c, rho),
    })
}

/// `‖U Uᵀ − Ũ Ũᵀ‖` for orthonormal bases with the same number of columns.
pub fn subspace_sin(u: &DMatrix<f64>, u_tilde: &DMatrix<f64>) -> Result<f64> {
    if u.nrows() != u_tilde.nrows() {
        return Err(Error::DimensionMismatch { expected: u.nrows(), got: u_tilde.nrows() });
    }
    if u.ncols() != u_tilde.ncols() {
        return Err(Error::DimensionMismatch { expected: u.ncols(), got: u_tilde.ncols() });
    }
    if u.ncols() == 0 {
        return Ok(0.0);
    }
    // For equal dimensions the projector gap is the largest sine of the principal angles,
    // i.e. ‖(I − UUᵀ) Ũ‖.
    let residual = u_tilde - u * u.tr_mul(u_tilde);
    let gram = SymMatrix::symmetrize(residual.tr_mul(&residual));
    Ok(spectral_norm(&gram).sqrt().min(1.0))
}

/// `‖(HH† − H̃H̃†) g‖ / ‖g‖`.
pub fn projected_gradient_gap(
    h: &SymMatrix,
    h_tilde: &SymMatrix,
    g: &Vector,
    tol: Option<f64>,
) -> Result<f64> {
    let norm = g.norm();
    if norm == 0.0 {
        return Err(Error::InvalidInput("gradient must be nonzero".into()));
    }
    let p = eigh(h)?.range_project(g, tol);
    let p_tilde = eigh(h_tilde)?.range_project(g, tol);
    Ok((p - p_tilde).norm() / norm)
}
