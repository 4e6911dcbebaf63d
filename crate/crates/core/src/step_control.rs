//! Exploration step length: the KL trust region, the cost hinge and its
//! bi-level step solver, the adaptive trust-region radius, and the assembled
//! exploration mean `μ_E = μ_T + η* Σ_T g*`.

use serde::{Deserialize, Serialize};

use crate::approximator::{ActionBox, GaussianPolicyOutput, GradientTriple};
use crate::error::{CoxqError, Result};
use crate::sigma_geometry::{
    detect_conflict, project_mgda, sigma_inner, sigma_norm_sq, ActionGradient, DiagCovariance, ProjectionCase,
};

/// Below this `gᵀΣg` the direction is treated as zero and no step is taken.
pub const DEGENERATE_QUAD: f64 = 1e-12;

/// Largest step whose mean shift keeps `KL(N(μ + ηΣg, Σ) ‖ N(μ, Σ)) <= δ`.
pub fn eta_from_delta(delta: f64, g: &ActionGradient, sigma: &DiagCovariance) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(CoxqError::invalid(format!("trust region delta must be > 0, got {delta}")));
    }
    let quad = sigma_norm_sq(g, sigma)?;
    if quad <= DEGENERATE_QUAD {
        return Ok(0.0);
    }
    Ok((2.0 * delta / quad).sqrt())
}

/// Predicted first-order overshoot of the remaining cost budget.
pub fn hinge(eta: f64, s: f64, r: f64) -> f64 {
    (eta * s - r).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepCase {
    /// Moving along the direction lowers the mean cost.
    FullStep,
    /// Any step would add violation, or the direction is cost-neutral.
    ZeroStep,
    /// Step up to the edge of the zero-violation set.
    Clipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSolution {
    pub eta_star: f64,
    /// `<g_m, g*>_Σ`
    pub s: f64,
    /// `d - Q_c^mean`
    pub r: f64,
    pub case_id: StepCase,
}

/// Largest `η` in `[0, eta_max]` among the minimizers of `hinge(η, s, r)`.
///
/// At `s = 0` the step is zero by rule, even when the budget has slack.
pub fn solve_step(s: f64, r: f64, eta_max: f64) -> StepSolution {
    let eta_max = eta_max.max(0.0);
    let (eta_star, case_id) = if s < 0.0 {
        (eta_max, StepCase::FullStep)
    } else if s == 0.0 || r < 0.0 {
        (0.0, StepCase::ZeroStep)
    } else {
        (eta_max.min(r / s), StepCase::Clipped)
    };
    StepSolution { eta_star, s, r, case_id }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustRegion {
    pub delta: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub lr_delta: f64,
}

impl TrustRegion {
    pub fn new(delta: f64, delta_min: f64, delta_max: f64, lr_delta: f64) -> Result<Self> {
        if !(0.0 < delta_min && delta_min <= delta && delta <= delta_max && delta_max.is_finite()) {
            return Err(CoxqError::invalid(format!(
                "trust region needs 0 < delta_min <= delta <= delta_max, got {delta_min} / {delta} / {delta_max}"
            )));
        }
        if !(lr_delta >= 0.0 && lr_delta.is_finite()) {
            return Err(CoxqError::invalid("lr_delta must be finite and >= 0"));
        }
        Ok(Self {
            delta,
            delta_min,
            delta_max,
            lr_delta,
        })
    }

    /// Projected step `δ + lr (d - c̄)`: grows under budget, shrinks over it.
    pub fn update_delta(&self, recent_mean_cost: f64, d: f64) -> TrustRegion {
        let stepped = self.delta + self.lr_delta * (d - recent_mean_cost);
        let delta = if stepped.is_finite() {
            stepped.clamp(self.delta_min, self.delta_max)
        } else {
            self.delta
        };
        TrustRegion { delta, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationDecision {
    pub mu_e: Vec<f64>,
    pub eta_star: f64,
    pub eta_max: f64,
    pub g_star: ActionGradient,
    pub conflicted: bool,
    pub in_safe_region: bool,
    pub clipped_dims: usize,
    pub projection: Option<ProjectionCase>,
    pub step: Option<StepSolution>,
    /// Set when the gradients were unusable and the target mean was kept.
    pub fallback: bool,
}

impl ExplorationDecision {
    /// `½ η*² g*ᵀ Σ g*`, the KL between the shifted and target Gaussians.
    pub fn kl(&self, sigma: &DiagCovariance) -> f64 {
        let quad = sigma_norm_sq(&self.g_star, sigma).unwrap_or(0.0);
        0.5 * self.eta_star * self.eta_star * quad
    }

    fn unshifted(policy_out: &GaussianPolicyOutput, action_box: &ActionBox) -> Self {
        let mut mu_e = policy_out.mu.clone();
        let clipped_dims = action_box.clip(&mut mu_e);
        Self {
            mu_e,
            eta_star: 0.0,
            eta_max: 0.0,
            g_star: ActionGradient::zeros(policy_out.mu.len()),
            conflicted: false,
            in_safe_region: true,
            clipped_dims,
            projection: None,
            step: None,
            fallback: true,
        }
    }
}

/// Shifts the target policy mean along the cost-aware optimistic direction.
///
/// In the safe region (`q_c_mean <= d`) the direction is `g_r - λ g_c` with the
/// full trust-region step. Otherwise the direction is projected onto the
/// non-conflicting cone and the step is limited by the cost hinge.
#[allow(clippy::too_many_arguments)]
pub fn explore(
    policy_out: &GaussianPolicyOutput,
    grads: &GradientTriple,
    lambda: f64,
    d: f64,
    q_c_mean: f64,
    tr: &TrustRegion,
    action_box: &ActionBox,
) -> ExplorationDecision {
    match try_explore(policy_out, grads, lambda, d, q_c_mean, tr, action_box) {
        Ok(decision) => decision,
        Err(e) => {
            log::warn!("exploration shift disabled for this step: {e}");
            ExplorationDecision::unshifted(policy_out, action_box)
        }
    }
}

fn try_explore(
    policy_out: &GaussianPolicyOutput,
    grads: &GradientTriple,
    lambda: f64,
    d: f64,
    q_c_mean: f64,
    tr: &TrustRegion,
    action_box: &ActionBox,
) -> Result<ExplorationDecision> {
    if !(lambda.is_finite() && d.is_finite() && q_c_mean.is_finite()) {
        return Err(CoxqError::invalid("non-finite multiplier, limit or cost estimate"));
    }
    let sigma = policy_out.covariance()?;
    let g_r = ActionGradient::new(grads.g_r.clone())?;
    let g_c = ActionGradient::new(grads.g_c.clone())?;
    let g_m = ActionGradient::new(grads.g_m.clone())?;
    let lambda = lambda.max(0.0);
    let g_raw = ActionGradient::new(
        g_r.as_slice()
            .iter()
            .zip(g_c.as_slice())
            .map(|(r, c)| r - lambda * c)
            .collect(),
    )?;
    let conflict = detect_conflict(&g_r, &g_c, &g_raw, &sigma)?;
    let in_safe_region = q_c_mean <= d;

    let (g_star, projection, eta_max, eta_star, step) = if in_safe_region {
        let eta_max = eta_from_delta(tr.delta, &g_raw, &sigma)?;
        (g_raw, None, eta_max, eta_max, None)
    } else {
        let proj = project_mgda(&g_r, &g_c, lambda, &sigma)?;
        let eta_max = eta_from_delta(tr.delta, &proj.g_star, &sigma)?;
        let s = sigma_inner(&g_m, &proj.g_star, &sigma)?;
        let sol = solve_step(s, d - q_c_mean, eta_max);
        (proj.g_star, Some(proj.case_id), eta_max, sol.eta_star, Some(sol))
    };

    let mut mu_e: Vec<f64> = policy_out
        .mu
        .iter()
        .zip(sigma.as_slice())
        .zip(g_star.as_slice())
        .map(|((m, s), g)| m + eta_star * s * g)
        .collect();
    let clipped_dims = action_box.clip(&mut mu_e);
    Ok(ExplorationDecision {
        mu_e,
        eta_star,
        eta_max,
        g_star,
        conflicted: conflict.conflicting,
        in_safe_region,
        clipped_dims,
        projection,
        step,
        fallback: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ag(v: &[f64]) -> ActionGradient {
        ActionGradient::new(v.to_vec()).unwrap()
    }

    #[test]
    fn eta_examples() {
        let i2 = DiagCovariance::identity(2);
        assert_eq!(eta_from_delta(2.0, &ag(&[1.0, 0.0]), &i2).unwrap(), 2.0);
        assert_eq!(eta_from_delta(0.5, &ag(&[0.0, 0.0]), &i2).unwrap(), 0.0);
        let s = DiagCovariance::new(vec![2.0, 0.5]).unwrap();
        let eta = eta_from_delta(6.0, &ag(&[1.0, 2.0]), &s).unwrap();
        assert!((eta - 3f64.sqrt()).abs() < 1e-15);
        assert!(eta_from_delta(0.0, &ag(&[1.0, 0.0]), &i2).is_err());
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge(0.0, 3.0, 1.0), 0.0);
        assert_eq!(hinge(3.0, 2.0, 1.0), 5.0);
    }

    #[test]
    fn step_examples() {
        let a = solve_step(-1.0, -5.0, 6.0);
        assert_eq!((a.eta_star, a.case_id), (6.0, StepCase::FullStep));
        let b = solve_step(2.0, -0.5, 6.0);
        assert_eq!((b.eta_star, b.case_id), (0.0, StepCase::ZeroStep));
        let c = solve_step(2.0, 1.0, 6.0);
        assert_eq!((c.eta_star, c.case_id), (0.5, StepCase::Clipped));
        let z = solve_step(0.0, 3.0, 6.0);
        assert_eq!((z.eta_star, z.case_id), (0.0, StepCase::ZeroStep));
        assert_eq!(solve_step(1.0, 100.0, 6.0).eta_star, 6.0);
    }

    #[test]
    fn delta_update_examples() {
        let tr = TrustRegion::new(1.0, 1e-4, 6.0, 0.1).unwrap();
        assert_eq!(tr.update_delta(2.5, 2.5).delta, 1.0);
        assert!((tr.update_delta(3.5, 2.5).delta - 0.9).abs() < 1e-15);
        let top = TrustRegion::new(6.0, 1e-4, 6.0, 0.1).unwrap();
        assert_eq!(top.update_delta(0.0, 2.5).delta, 6.0);
        let bottom = TrustRegion::new(1e-4, 1e-4, 6.0, 0.1).unwrap();
        assert_eq!(bottom.update_delta(100.0, 2.5).delta, 1e-4);
        assert!(TrustRegion::new(7.0, 1e-4, 6.0, 0.1).is_err());
        assert!(TrustRegion::new(1.0, 0.0, 6.0, 0.1).is_err());
    }

    fn target(mu: &[f64], log_std: &[f64]) -> GaussianPolicyOutput {
        GaussianPolicyOutput {
            mu: mu.to_vec(),
            log_std: log_std.to_vec(),
        }
    }

    #[test]
    fn zero_gradients_keep_target_mean() {
        let g = GradientTriple {
            g_r: vec![0.0, 0.0],
            g_c: vec![0.0, 0.0],
            g_m: vec![0.0, 0.0],
        };
        let tr = TrustRegion::new(2.0, 1e-4, 6.0, 0.0).unwrap();
        let dec = explore(&target(&[0.2, -0.1], &[0.0, 0.0]), &g, 1.0, 1.0, 5.0, &tr, &ActionBox::symmetric(2, 1.0));
        assert_eq!(dec.mu_e, vec![0.2, -0.1]);
        assert_eq!(dec.eta_star, 0.0);
    }

    #[test]
    fn safe_region_reproduces_oac_shift() {
        let g = GradientTriple {
            g_r: vec![1.0, 0.0],
            g_c: vec![0.3, 0.7],
            g_m: vec![0.0, 1.0],
        };
        let tr = TrustRegion::new(2.0, 1e-4, 6.0, 0.0).unwrap();
        let dec = explore(&target(&[0.0, 0.0], &[0.0, 0.0]), &g, 0.0, 1.0, 0.5, &tr, &ActionBox::symmetric(2, 10.0));
        assert!(dec.in_safe_region);
        assert_eq!(dec.mu_e, vec![2.0, 0.0]);
        assert_eq!(dec.clipped_dims, 0);
    }

    #[test]
    fn non_finite_gradient_falls_back() {
        let g = GradientTriple {
            g_r: vec![f64::NAN],
            g_c: vec![0.0],
            g_m: vec![0.0],
        };
        let tr = TrustRegion::new(2.0, 1e-4, 6.0, 0.0).unwrap();
        let dec = explore(&target(&[3.0], &[0.0]), &g, 1.0, 1.0, 0.0, &tr, &ActionBox::symmetric(1, 1.0));
        assert!(dec.fallback);
        assert_eq!(dec.mu_e, vec![1.0]);
        assert_eq!(dec.clipped_dims, 1);
    }

    #[test]
    fn unsafe_region_respects_kl_and_hinge() {
        let g = GradientTriple {
            g_r: vec![1.0, 0.5, -0.2],
            g_c: vec![0.8, -0.3, 0.4],
            g_m: vec![0.6, -0.1, 0.5],
        };
        let out = target(&[0.1, 0.0, -0.3], &[-0.5, 0.1, -1.0]);
        let sigma = out.covariance().unwrap();
        let tr = TrustRegion::new(1.5, 1e-4, 6.0, 0.0).unwrap();
        for (lambda, q) in [(0.0, 1.2), (0.5, 1.05), (2.0, 3.0), (4.0, 1.01)] {
            let dec = explore(&out, &g, lambda, 1.0, q, &tr, &ActionBox::symmetric(3, 100.0));
            assert!(!dec.in_safe_region);
            assert!(dec.kl(&sigma) <= tr.delta + 1e-9);
            let step = dec.step.unwrap();
            assert!(dec.eta_star * step.s <= step.r.max(0.0) + 1e-9);
        }
    }
}
