//! Covariance-weighted gradient geometry in action space.
//!
//! All inner products here are taken under the diagonal policy covariance,
//! `<a, b>_Σ = Σ_i a_i σ²_i b_i`. The exploration cone is
//! `K = { u : <g_r, u>_Σ >= 0, <-g_c, u>_Σ >= 0 }`: directions that raise the
//! optimistic return estimate and do not raise the optimistic cost estimate to
//! first order. [`project_mgda`] returns the Σ-closest point of `K` to the
//! Lagrangian ascent direction `g_r - λ g_c`.
//!
//! Internally the two cone normals are `g1 = g_r` and `g2 = -g_c`, and the
//! projection is written as `u = g_raw + μ1 g1 + μ2 g2` with `μ >= 0`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, CoxqError, Result};

/// Pairs whose Gram determinant falls below this fraction of `s11 * s22` are
/// treated as co-linear.
pub const COLINEAR_REL_TOL: f64 = 1e-10;
/// Normals with Σ-norm below this constrain nothing and are dropped.
pub const ZERO_NORM_TOL: f64 = 1e-12;
/// Multipliers more negative than this trigger active-set enumeration.
pub const MULTIPLIER_TOL: f64 = 1e-9;

/// Gradient of a scalar critic bound with respect to the action input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionGradient(Vec<f64>);

impl ActionGradient {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CoxqError::invalid(format!(
                "action gradient entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, t: f64) -> Self {
        Self(self.0.iter().map(|v| v * t).collect())
    }

    /// `a * x + b * y`, elementwise.
    fn lin_comb(a: f64, x: &[f64], b: f64, y: &[f64]) -> Self {
        Self(x.iter().zip(y).map(|(xi, yi)| a * xi + b * yi).collect())
    }
}

/// Diagonal of the target policy covariance (per-dimension variances).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagCovariance(Vec<f64>);

impl DiagCovariance {
    pub fn new(diag: Vec<f64>) -> Result<Self> {
        if let Some(i) = diag.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(CoxqError::invalid(format!(
                "covariance entry {i} must be finite and strictly positive, got {}",
                diag[i]
            )));
        }
        Ok(Self(diag))
    }

    pub fn identity(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    /// Builds `Σ = diag(exp(2 * log_std))`.
    pub fn from_log_std(log_std: &[f64]) -> Result<Self> {
        Self::new(log_std.iter().map(|l| (2.0 * l).exp()).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn inner_raw(a: &[f64], b: &[f64], sigma: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(sigma)
        .map(|((ai, bi), si)| ai * si * bi)
        .sum()
}

pub fn sigma_inner(a: &ActionGradient, b: &ActionGradient, sigma: &DiagCovariance) -> Result<f64> {
    check_len(sigma.len(), a.len())?;
    check_len(sigma.len(), b.len())?;
    Ok(inner_raw(a.as_slice(), b.as_slice(), sigma.as_slice()))
}

pub fn sigma_norm_sq(a: &ActionGradient, sigma: &DiagCovariance) -> Result<f64> {
    sigma_inner(a, a, sigma)
}

/// Gram entries and target correlations for the normals `g1 = g_r`, `g2 = -g_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GramScalars {
    /// `<g_r, g_r>_Σ`
    pub s_rr: f64,
    /// `<g_r, -g_c>_Σ`
    pub s_rc: f64,
    /// `<g_c, g_c>_Σ`
    pub s_cc: f64,
    /// `<g_r, g_raw>_Σ`
    pub v_r: f64,
    /// `<-g_c, g_raw>_Σ`
    pub v_c: f64,
    pub det: f64,
}

impl GramScalars {
    /// Largest magnitude among the Gram entries and correlations.
    pub fn scale(&self) -> f64 {
        [self.s_rr, self.s_rc, self.s_cc, self.v_r, self.v_c]
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_colinear(&self) -> bool {
        self.det <= COLINEAR_REL_TOL * self.s_rr * self.s_cc
    }
}

pub fn gram_scalars(
    g_r: &ActionGradient,
    g_c: &ActionGradient,
    g_raw: &ActionGradient,
    sigma: &DiagCovariance,
) -> Result<GramScalars> {
    let n = sigma.len();
    check_len(n, g_r.len())?;
    check_len(n, g_c.len())?;
    check_len(n, g_raw.len())?;
    let (r, c, t, s) = (g_r.as_slice(), g_c.as_slice(), g_raw.as_slice(), sigma.as_slice());
    let s_rr = inner_raw(r, r, s);
    let s_cc = inner_raw(c, c, s);
    let s_rc = -inner_raw(r, c, s);
    let v_r = inner_raw(r, t, s);
    let v_c = -inner_raw(c, t, s);
    Ok(GramScalars {
        s_rr,
        s_rc,
        s_cc,
        v_r,
        v_c,
        det: s_rr * s_cc - s_rc * s_rc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub v_r: f64,
    pub v_c: f64,
    pub conflicting: bool,
}

/// Flags a conflict when `g_raw` would lower the return bound or raise the
/// cost bound to first order.
pub fn detect_conflict(
    g_r: &ActionGradient,
    g_c: &ActionGradient,
    g_raw: &ActionGradient,
    sigma: &DiagCovariance,
) -> Result<ConflictReport> {
    let gram = gram_scalars(g_r, g_c, g_raw, sigma)?;
    Ok(ConflictReport {
        v_r: gram.v_r,
        v_c: gram.v_c,
        conflicting: gram.v_r < 0.0 || gram.v_c < 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProjectionCase {
    InCone,
    OnlyReturnActive,
    OnlyCostActive,
    BothActive,
    ColinearHalfSpace,
    ColinearHyperplane,
    DegenerateZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeProjection {
    pub g_star: ActionGradient,
    pub case_id: ProjectionCase,
    /// Multiplier on the return constraint `<g_r, u>_Σ >= 0`.
    pub mu_r: f64,
    /// Multiplier on the cost constraint `<-g_c, u>_Σ >= 0`.
    pub mu_c: f64,
}

/// Σ-metric projection of `g_r - λ g_c` onto the cone `K`.
pub fn project_mgda(
    g_r: &ActionGradient,
    g_c: &ActionGradient,
    lambda: f64,
    sigma: &DiagCovariance,
) -> Result<ConeProjection> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(CoxqError::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    check_len(g_r.len(), g_c.len())?;
    let g_raw = ActionGradient::lin_comb(1.0, g_r.as_slice(), -lambda, g_c.as_slice());
    project_onto_cone(g_r, g_c, &g_raw, sigma)
}

/// Σ-metric projection of an arbitrary direction `g_raw` onto the cone `K` of
/// the constraints of `g_r` and `g_c`.
///
/// For `g_raw = g_r - λ g_c` with `λ >= 0` at most one constraint is ever
/// active, but the general solver also handles targets in the polar cone.
pub fn project_onto_cone(
    g_r: &ActionGradient,
    g_c: &ActionGradient,
    g_raw: &ActionGradient,
    sigma: &DiagCovariance,
) -> Result<ConeProjection> {
    let n = sigma.len();
    let gram = gram_scalars(g_r, g_c, g_raw, sigma)?;

    if inner_raw(g_raw.as_slice(), g_raw.as_slice(), sigma.as_slice()).sqrt() < ZERO_NORM_TOL {
        return Ok(ConeProjection {
            g_star: ActionGradient::zeros(n),
            case_id: ProjectionCase::DegenerateZero,
            mu_r: 0.0,
            mu_c: 0.0,
        });
    }

    let solver = ActiveSetSolver {
        g_r: g_r.as_slice(),
        g_c: g_c.as_slice(),
        g_raw,
        gram,
    };
    let keep_r = gram.s_rr.sqrt() >= ZERO_NORM_TOL;
    let keep_c = gram.s_cc.sqrt() >= ZERO_NORM_TOL;
    Ok(match (keep_r, keep_c) {
        (false, false) => solver.unchanged(),
        (true, false) => solver.single(Normal::Return).unwrap_or_else(|| solver.unchanged()),
        (false, true) => solver.single(Normal::Cost).unwrap_or_else(|| solver.unchanged()),
        (true, true) if gram.is_colinear() => solver.colinear(),
        (true, true) => solver.general(),
    })
}

#[derive(Clone, Copy)]
enum Normal {
    Return,
    Cost,
}

struct ActiveSetSolver<'a> {
    g_r: &'a [f64],
    g_c: &'a [f64],
    g_raw: &'a ActionGradient,
    gram: GramScalars,
}

impl ActiveSetSolver<'_> {
    fn unchanged(&self) -> ConeProjection {
        ConeProjection {
            g_star: self.g_raw.clone(),
            case_id: ProjectionCase::InCone,
            mu_r: 0.0,
            mu_c: 0.0,
        }
    }

    /// `g_raw + μ1 g_r - μ2 g_c`
    fn assemble(&self, mu_r: f64, mu_c: f64, case_id: ProjectionCase) -> ConeProjection {
        let g_star = self
            .g_raw
            .as_slice()
            .iter()
            .zip(self.g_r.iter().zip(self.g_c))
            .map(|(t, (r, c))| t + mu_r * r - mu_c * c)
            .collect();
        ConeProjection {
            g_star: ActionGradient(g_star),
            case_id,
            mu_r,
            mu_c,
        }
    }

    fn feas_tol(&self) -> f64 {
        1e-12 * self.gram.scale()
    }

    /// Projection onto a single half-space; `None` when `g_raw` already satisfies it.
    fn single(&self, which: Normal) -> Option<ConeProjection> {
        let g = self.gram;
        match which {
            Normal::Return if g.v_r < 0.0 => {
                Some(self.assemble(-g.v_r / g.s_rr, 0.0, ProjectionCase::OnlyReturnActive))
            }
            Normal::Cost if g.v_c < 0.0 => {
                Some(self.assemble(0.0, -g.v_c / g.s_cc, ProjectionCase::OnlyCostActive))
            }
            _ => None,
        }
    }

    fn colinear(&self) -> ConeProjection {
        let g = self.gram;
        if g.s_rc > 0.0 {
            // Same orientation: K is the half-space <g_r, u> >= 0.
            if g.v_r >= 0.0 {
                ConeProjection {
                    case_id: ProjectionCase::ColinearHalfSpace,
                    ..self.unchanged()
                }
            } else {
                self.assemble(-g.v_r / g.s_rr, 0.0, ProjectionCase::ColinearHalfSpace)
            }
        } else {
            // Opposite orientation: K collapses to the hyperplane <g_r, u> = 0.
            // With g2 = -k g1 the combined shift -v_r/s_rr splits onto whichever
            // multiplier keeps both non-negative.
            let shift = -g.v_r / g.s_rr;
            if shift >= 0.0 {
                self.assemble(shift, 0.0, ProjectionCase::ColinearHyperplane)
            } else {
                let k = (g.s_cc / g.s_rr).sqrt();
                // g_star = g_raw + shift * g_r; express via μ2 on g2 = -g_c ≈ -k g_r.
                let mut out = self.assemble(shift, 0.0, ProjectionCase::ColinearHyperplane);
                out.mu_r = 0.0;
                out.mu_c = -shift / k;
                out
            }
        }
    }

    fn general(&self) -> ConeProjection {
        let g = self.gram;
        if g.v_r >= 0.0 && g.v_c >= 0.0 {
            return self.unchanged();
        }
        let tol = self.feas_tol();
        if g.v_r < 0.0 {
            let mu = -g.v_r / g.s_rr;
            if g.v_c + mu * g.s_rc >= -tol {
                return self.assemble(mu, 0.0, ProjectionCase::OnlyReturnActive);
            }
        }
        if g.v_c < 0.0 {
            let mu = -g.v_c / g.s_cc;
            if g.v_r + mu * g.s_rc >= -tol {
                return self.assemble(0.0, mu, ProjectionCase::OnlyCostActive);
            }
        }
        let (mu_r, mu_c) = self.both_active_multipliers();
        if mu_r >= -MULTIPLIER_TOL && mu_c >= -MULTIPLIER_TOL {
            return self.assemble(mu_r.max(0.0), mu_c.max(0.0), ProjectionCase::BothActive);
        }
        self.enumerate()
    }

    /// Solves `G μ = -v` for both constraints active.
    fn both_active_multipliers(&self) -> (f64, f64) {
        let g = self.gram;
        let mu_r = (-g.s_cc * g.v_r + g.s_rc * g.v_c) / g.det;
        let mu_c = (g.s_rc * g.v_r - g.s_rr * g.v_c) / g.det;
        (mu_r, mu_c)
    }

    /// Exhaustive search over the four active sets; keeps the feasible
    /// candidate closest to `g_raw`.
    fn enumerate(&self) -> ConeProjection {
        let g = self.gram;
        let (br, bc) = self.both_active_multipliers();
        let candidates = [
            (0.0, 0.0, ProjectionCase::InCone),
            (-g.v_r / g.s_rr, 0.0, ProjectionCase::OnlyReturnActive),
            (0.0, -g.v_c / g.s_cc, ProjectionCase::OnlyCostActive),
            (br, bc, ProjectionCase::BothActive),
        ];
        let tol = 1e-9 * g.scale();
        candidates
            .iter()
            .filter_map(|&(mr, mc, case)| {
                let ar = g.v_r + mr * g.s_rr + mc * g.s_rc;
                let ac = g.v_c + mr * g.s_rc + mc * g.s_cc;
                if ar < -tol || ac < -tol {
                    return None;
                }
                let obj = mr * mr * g.s_rr + 2.0 * mr * mc * g.s_rc + mc * mc * g.s_cc;
                Some((obj, mr, mc, case))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, mr, mc, case)| self.assemble(mr.max(0.0), mc.max(0.0), case))
            .unwrap_or_else(|| {
                // Only reachable under severe ill-conditioning; the both-active
                // point is orthogonal to both normals and hence always feasible.
                self.assemble(br.max(0.0), bc.max(0.0), ProjectionCase::BothActive)
            })
    }
}
