//! Quantile-ensemble algebra: per-quantile statistics, CVaR-aggregated
//! epistemic bounds, truncated target pools and the quantile Huber loss.
//!
//! Atoms are laid out critic-major: row `n` holds the `M` quantile heads of
//! critic `n`, at levels `τ_m = (m + 0.5) / M` for zero-based `m`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CoxqError, Result};

/// Quantile midpoints `(m - 0.5) / M` for `m = 1..=M`.
pub fn tau_levels(m: usize) -> Vec<f64> {
    (0..m).map(|i| (i as f64 + 0.5) / m as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileAtoms {
    atoms: Array2<f64>,
    tau: Vec<f64>,
}

impl QuantileAtoms {
    pub fn new(atoms: Array2<f64>) -> Result<Self> {
        if atoms.nrows() == 0 || atoms.ncols() == 0 {
            return Err(CoxqError::invalid("quantile atoms must be non-empty"));
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(CoxqError::NumericDivergence("non-finite quantile atom".into()));
        }
        let tau = tau_levels(atoms.ncols());
        Ok(Self { atoms, tau })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(CoxqError::invalid("ragged atom rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let atoms = Array2::from_shape_vec((rows.len(), m), flat)
            .map_err(|e| CoxqError::invalid(e.to_string()))?;
        Self::new(atoms)
    }

    pub fn n_critics(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn n_quantiles(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn atoms(&self) -> ArrayView2<'_, f64> {
        self.atoms.view()
    }

    pub fn tau_levels(&self) -> &[f64] {
        &self.tau
    }

    pub fn mean(&self) -> f64 {
        self.atoms.mean().unwrap_or(0.0)
    }
}

/// Per-quantile mean and population standard deviation across critics.
pub fn quantile_stats(atoms: &QuantileAtoms) -> Vec<(f64, f64)> {
    let a = atoms.atoms();
    let n = a.nrows() as f64;
    a.columns()
        .into_iter()
        .map(|col| {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

/// Epistemic band aggregated over a contiguous block of the highest quantile
/// heads: `(1/H) Σ_{m in head} (μ̂_m + κ σ̂_m)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandSpec {
    /// Signed multiple of the ensemble std; negative for lower bounds.
    pub kappa: f64,
    /// Number of highest quantile heads averaged; `M` means the full distribution.
    pub head: usize,
}

impl BandSpec {
    pub fn mean() -> Self {
        Self {
            kappa: 0.0,
            head: usize::MAX,
        }
    }
}

/// Evaluates a band for every sample of a batch and returns its gradient with
/// respect to every atom. `outputs[n]` is the `B x M` output of critic `n`.
pub fn band_batch(outputs: &[Array2<f64>], spec: BandSpec) -> (Vec<f64>, Vec<Array2<f64>>) {
    let n_crit = outputs.len();
    let (batch, m) = outputs[0].dim();
    let head = spec.head.min(m);
    let start = m - head;
    let nf = n_crit as f64;
    let mut values = vec![0.0; batch];
    let mut grads: Vec<Array2<f64>> = (0..n_crit).map(|_| Array2::zeros((batch, m))).collect();
    for b in 0..batch {
        let mut acc = 0.0;
        for q in start..m {
            let mean = outputs.iter().map(|o| o[[b, q]]).sum::<f64>() / nf;
            let var = outputs.iter().map(|o| (o[[b, q]] - mean).powi(2)).sum::<f64>() / nf;
            let std = var.sqrt();
            acc += mean + spec.kappa * std;
            for (g, o) in grads.iter_mut().zip(outputs) {
                // d std / d q_n = (q_n - mean) / (N std); zero at std = 0.
                let dstd = if std > 0.0 { (o[[b, q]] - mean) / (nf * std) } else { 0.0 };
                g[[b, q]] = (1.0 / nf + spec.kappa * dstd) / head as f64;
            }
        }
        values[b] = acc / head as f64;
    }
    (values, grads)
}

fn band_single(atoms: &QuantileAtoms, spec: BandSpec) -> f64 {
    let outputs: Vec<Array2<f64>> = atoms
        .atoms()
        .rows()
        .into_iter()
        .map(|r| r.to_owned().insert_axis(ndarray::Axis(0)))
        .collect();
    band_batch(&outputs, spec).0[0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub beta_r: f64,
    pub beta_c: f64,
    /// Number of highest cost quantiles in the CVaR average.
    pub alpha: usize,
}

impl BoundConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        if !(self.beta_r >= 0.0 && self.beta_c >= 0.0) {
            return Err(CoxqError::invalid("optimism coefficients must be >= 0"));
        }
        if self.alpha == 0 || self.alpha > m {
            return Err(CoxqError::invalid(format!(
                "CVaR alpha must lie in [1, {m}], got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn reward_ub(&self) -> BandSpec {
        BandSpec {
            kappa: self.beta_r,
            head: usize::MAX,
        }
    }

    pub fn cost_lb(&self) -> BandSpec {
        BandSpec {
            kappa: -self.beta_c,
            head: self.alpha,
        }
    }

    pub fn cost_ub(&self) -> BandSpec {
        BandSpec {
            kappa: self.beta_c,
            head: self.alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticBounds {
    pub q_c_lb: f64,
    pub q_c_ub: f64,
    pub q_c_mean: f64,
    pub q_r_ub: f64,
    pub q_r_mean: f64,
    pub beta_r: f64,
    pub beta_c: f64,
    pub alpha: usize,
}

/// CVaR lower/upper bounds over the `alpha` highest cost quantiles, and the
/// mean over all atoms.
pub fn cost_bounds(atoms: &QuantileAtoms, beta_c: f64, alpha: usize) -> Result<(f64, f64, f64)> {
    let m = atoms.n_quantiles();
    if alpha == 0 || alpha > m {
        return Err(CoxqError::invalid(format!("alpha must lie in [1, {m}], got {alpha}")));
    }
    if !(beta_c >= 0.0) {
        return Err(CoxqError::invalid("beta_c must be >= 0"));
    }
    let lb = band_single(atoms, BandSpec { kappa: -beta_c, head: alpha });
    let ub = band_single(atoms, BandSpec { kappa: beta_c, head: alpha });
    Ok((lb, ub, atoms.mean()))
}

/// Optimistic return bound over the full distribution, and the atom mean.
pub fn reward_upper_bound(atoms: &QuantileAtoms, beta_r: f64) -> (f64, f64) {
    let ub = band_single(atoms, BandSpec { kappa: beta_r, head: usize::MAX });
    (ub, atoms.mean())
}

pub fn critic_bounds(reward: &QuantileAtoms, cost: &QuantileAtoms, cfg: &BoundConfig) -> Result<CriticBounds> {
    let (q_c_lb, q_c_ub, q_c_mean) = cost_bounds(cost, cfg.beta_c, cfg.alpha)?;
    let (q_r_ub, q_r_mean) = reward_upper_bound(reward, cfg.beta_r);
    Ok(CriticBounds {
        q_c_lb,
        q_c_ub,
        q_c_mean,
        q_r_ub,
        q_r_mean,
        beta_r: cfg.beta_r,
        beta_c: cfg.beta_c,
        alpha: cfg.alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Reward,
    Cost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationSpec {
    /// Largest reward atoms dropped from the pooled target.
    pub k_r: usize,
    /// Smallest cost atoms dropped from the pooled target.
    pub k_c: usize,
}

impl TruncationSpec {
    pub fn validate(&self, pool: usize) -> Result<()> {
        if self.k_r >= pool || self.k_c >= pool {
            return Err(CoxqError::invalid(format!(
                "truncation ({}, {}) must leave at least one of {pool} atoms",
                self.k_r, self.k_c
            )));
        }
        Ok(())
    }
}

/// Pools and sorts a slice of atoms, then drops the extreme tail for the objective.
pub fn truncate_pool(mut pool: Vec<f64>, spec: TruncationSpec, objective: Objective) -> Vec<f64> {
    pool.sort_unstable_by(f64::total_cmp);
    match objective {
        Objective::Reward => {
            pool.truncate(pool.len().saturating_sub(spec.k_r));
            pool
        }
        Objective::Cost => pool.split_off(spec.k_c.min(pool.len())),
    }
}

pub fn truncate_mix(next_atoms: &QuantileAtoms, spec: TruncationSpec, objective: Objective) -> Result<Vec<f64>> {
    let pool: Vec<f64> = next_atoms.atoms().iter().copied().collect();
    spec.validate(pool.len())?;
    Ok(truncate_pool(pool, spec, objective))
}

/// `signal + (1 - done) * gamma * z` for every surviving next-state atom `z`.
pub fn bellman_target(signal: f64, done: bool, gamma: f64, truncated_next: &[f64]) -> Vec<f64> {
    let bootstrap = if done { 0.0 } else { gamma };
    truncated_next.iter().map(|z| signal + bootstrap * z).collect()
}

/// Huber function scaled by `1/κ`: quadratic inside `|u| <= κ`, linear outside.
#[inline]
fn huber_over_kappa(u: f64, kappa: f64) -> (f64, f64) {
    let a = u.abs();
    if a <= kappa {
        (0.5 * u * u / kappa, u / kappa)
    } else {
        (a - 0.5 * kappa, u.signum())
    }
}

/// Asymmetric quantile Huber loss of one critic row against a target list.
/// Returns the loss summed over pairs and accumulates `d loss / d pred` into `grad`.
#[inline]
pub(crate) fn quantile_huber_row(pred: &[f64], tau: &[f64], targets: &[f64], kappa: f64, grad: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    for ((p, t), g) in pred.iter().zip(tau).zip(grad.iter_mut()) {
        let mut dg = 0.0;
        for z in targets {
            let u = z - p;
            let weight = if u < 0.0 { 1.0 - t } else { *t };
            let (h, dh) = huber_over_kappa(u, kappa);
            loss += weight * h;
            // d/dpred = -d/du
            dg -= weight * dh;
        }
        *g += dg;
    }
    loss
}

/// Mean quantile Huber loss over all `(critic atom, target)` pairs and its
/// gradient with respect to each predicted atom.
pub fn quantile_huber_loss(pred: &QuantileAtoms, targets: &[f64], kappa: f64) -> Result<(f64, Array2<f64>)> {
    if !(kappa > 0.0) {
        return Err(CoxqError::invalid("kappa must be > 0"));
    }
    if targets.is_empty() {
        return Err(CoxqError::invalid("empty target list"));
    }
    let (n, m) = pred.atoms().dim();
    let pairs = (n * m * targets.len()) as f64;
    let mut grad = Array2::zeros((n, m));
    let mut loss = 0.0;
    for (row, mut grow) in pred.atoms().rows().into_iter().zip(grad.rows_mut()) {
        let row = row.to_vec();
        let gslice = grow.as_slice_mut().expect("standard layout");
        loss += quantile_huber_row(&row, pred.tau_levels(), targets, kappa, gslice);
    }
    grad /= pairs;
    Ok((loss / pairs, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn atoms(rows: &[&[f64]]) -> QuantileAtoms {
        QuantileAtoms::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Scalar-loop reference: CVaR over head quantiles of the band μ ± βσ.
    fn oracle_band(rows: &[Vec<f64>], kappa: f64, head: usize) -> f64 {
        let n = rows.len();
        let m = rows[0].len();
        let mut total = 0.0;
        for q in (m - head)..m {
            let mut s = 0.0;
            for r in rows {
                s += r[q];
            }
            let mu = s / n as f64;
            let mut v = 0.0;
            for r in rows {
                v += (r[q] - mu) * (r[q] - mu);
            }
            total += mu + kappa * (v / n as f64).sqrt();
        }
        total / head as f64
    }

    #[test]
    fn tau_levels_are_midpoints() {
        assert_eq!(tau_levels(4), vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn stats_examples() {
        let s = quantile_stats(&atoms(&[&[1.0, 5.0, -2.0]]));
        assert!(s.iter().all(|(_, sd)| *sd == 0.0));
        let s = quantile_stats(&atoms(&[&[2.0], &[4.0]]));
        assert_eq!(s, vec![(3.0, 1.0)]);
    }

    #[test]
    fn cost_bounds_worked_example() {
        let a = atoms(&[&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 5.0]]);
        let (lb, ub, mean) = cost_bounds(&a, 1.0, 2).unwrap();
        assert_eq!((lb, ub, mean), (2.5, 3.5, 1.75));
        assert!(cost_bounds(&a, 1.0, 0).is_err());
        assert!(cost_bounds(&a, 1.0, 5).is_err());
    }

    #[test]
    fn degenerate_bounds() {
        let a = atoms(&[&[0.0, 1.0, 4.0, 9.0]]);
        let (lb, ub, _) = cost_bounds(&a, 0.0, 2).unwrap();
        assert_eq!((lb, ub), (6.5, 6.5));
        let a = atoms(&[&[0.0, 1.0, 4.0, 9.0], &[1.0, 1.0, 2.0, 3.0]]);
        let (lb, _, mean) = cost_bounds(&a, 0.0, 4).unwrap();
        assert!((lb - mean).abs() < 1e-15);
        let (ub, mean) = reward_upper_bound(&a, 0.0);
        assert!((ub - mean).abs() < 1e-15);
        let (ub, _) = reward_upper_bound(&atoms(&[&[2.0], &[4.0]]), 2.0);
        assert_eq!(ub, 5.0);
    }

    #[test]
    fn truncation_examples() {
        let a = atoms(&[&[1.0, 3.0, 5.0], &[2.0, 4.0, 6.0]]);
        let reward = TruncationSpec { k_r: 2, k_c: 2 };
        assert_eq!(truncate_mix(&a, reward, Objective::Reward).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(truncate_mix(&a, reward, Objective::Cost).unwrap(), vec![3.0, 4.0, 5.0, 6.0]);
        let none = TruncationSpec { k_r: 0, k_c: 0 };
        assert_eq!(truncate_mix(&a, none, Objective::Reward).unwrap().len(), 6);
        assert!(truncate_mix(&a, TruncationSpec { k_r: 6, k_c: 0 }, Objective::Reward).is_err());
    }

    #[test]
    fn bellman_examples() {
        assert_eq!(bellman_target(2.0, true, 0.9, &[10.0, 20.0]), vec![2.0, 2.0]);
        assert_eq!(bellman_target(1.0, false, 0.5, &[2.0, 4.0]), vec![2.0, 3.0]);
    }

    #[test]
    fn huber_examples() {
        let p = atoms(&[&[0.0]]);
        let (loss, _) = quantile_huber_loss(&p, &[2.0], 1.0).unwrap();
        assert!((loss - 0.75).abs() < 1e-15);
        let p = atoms(&[&[1.0, 2.0], &[3.0, -1.0]]);
        let (loss, grad) = quantile_huber_loss(&p, &[1.0, 2.0, 3.0, -1.0], 1.0).unwrap();
        assert!(loss > 0.0);
        assert!(grad.iter().all(|g| g.is_finite()));
        let p = atoms(&[&[1.5]]);
        let (loss, grad) = quantile_huber_loss(&p, &[1.5], 1.0).unwrap();
        assert_eq!((loss, grad[[0, 0]]), (0.0, 0.0));
        assert!(quantile_huber_loss(&p, &[1.0], 0.0).is_err());
    }

    #[test]
    fn huber_gradient_matches_finite_differences() {
        let rows = vec![vec![0.3, -0.7, 1.9, 2.2], vec![-1.1, 0.4, 0.45, 3.0]];
        let targets = [0.1, 0.5, -2.0, 1.2, 2.5, 4.0];
        let base = QuantileAtoms::from_rows(&rows).unwrap();
        let (_, grad) = quantile_huber_loss(&base, &targets, 1.0).unwrap();
        let h = 1e-6;
        for n in 0..2 {
            for m in 0..4 {
                let mut plus = rows.clone();
                plus[n][m] += h;
                let mut minus = rows.clone();
                minus[n][m] -= h;
                let lp = quantile_huber_loss(&QuantileAtoms::from_rows(&plus).unwrap(), &targets, 1.0).unwrap().0;
                let lm = quantile_huber_loss(&QuantileAtoms::from_rows(&minus).unwrap(), &targets, 1.0).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - grad[[n, m]]).abs() <= 1e-4 * fd.abs().max(1e-3), "{fd} vs {}", grad[[n, m]]);
            }
        }
    }

    #[test]
    fn band_gradient_matches_finite_differences() {
        let rows = vec![vec![0.3, -0.7, 1.9], vec![-1.1, 0.4, 0.45], vec![0.2, 0.9, 1.0]];
        let outputs: Vec<Array2<f64>> = rows
            .iter()
            .map(|r| Array2::from_shape_vec((1, 3), r.clone()).unwrap())
            .collect();
        let spec = BandSpec { kappa: -1.7, head: 2 };
        let (_, grads) = band_batch(&outputs, spec);
        let h = 1e-6;
        for n in 0..3 {
            for m in 0..3 {
                let mut plus = rows.clone();
                plus[n][m] += h;
                let mut minus = rows.clone();
                minus[n][m] -= h;
                let fd = (oracle_band(&plus, spec.kappa, 2) - oracle_band(&minus, spec.kappa, 2)) / (2.0 * h);
                assert!((fd - grads[n][[0, m]]).abs() < 1e-7);
            }
        }
    }

    fn ensemble() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..5, 1usize..9).prop_flat_map(|(n, m)| {
            prop::collection::vec(prop::collection::vec(-10.0f64..10.0, m), n)
        })
    }

    proptest! {
        #[test]
        fn bounds_match_scalar_oracle(rows in ensemble(), beta in 0.0f64..5.0, frac in 0.0f64..1.0) {
            let m = rows[0].len();
            let alpha = 1 + ((m - 1) as f64 * frac) as usize;
            let a = QuantileAtoms::from_rows(&rows).unwrap();
            let (lb, ub, mean) = cost_bounds(&a, beta, alpha).unwrap();
            prop_assert!((lb - oracle_band(&rows, -beta, alpha)).abs() < 1e-10);
            prop_assert!((ub - oracle_band(&rows, beta, alpha)).abs() < 1e-10);
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            prop_assert!((mean - flat.iter().sum::<f64>() / flat.len() as f64).abs() < 1e-10);
            let head_mean = oracle_band(&rows, 0.0, alpha);
            prop_assert!(lb <= head_mean + 1e-12 && head_mean <= ub + 1e-12);
            let (rub, _) = reward_upper_bound(&a, beta);
            prop_assert!((rub - oracle_band(&rows, beta, m)).abs() < 1e-10);
        }

        #[test]
        fn cvar_non_increasing_in_alpha(
            mut base in prop::collection::vec(-10.0f64..10.0, 1..12),
            offsets in prop::collection::vec(-2.0f64..2.0, 1..6),
            beta in 0.0f64..5.0,
        ) {
            // Monotone quantile functions with a quantile-independent ensemble
            // spread, so every per-quantile band is ordered in the level.
            base.sort_by(f64::total_cmp);
            let rows: Vec<Vec<f64>> = offsets.iter().map(|o| base.iter().map(|b| b + o).collect()).collect();
            let a = QuantileAtoms::from_rows(&rows).unwrap();
            let mut prev = (f64::INFINITY, f64::INFINITY);
            for alpha in 1..=base.len() {
                let (lb, ub, _) = cost_bounds(&a, beta, alpha).unwrap();
                prop_assert!(lb <= prev.0 + 1e-9 && ub <= prev.1 + 1e-9);
                prev = (lb, ub);
            }
        }

        #[test]
        fn truncation_bias_direction(pool in prop::collection::vec(-100.0f64..100.0, 2..60), k in 1usize..10) {
            let k = k.min(pool.len() - 1);
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let full = mean(&pool);
            let spec = TruncationSpec { k_r: k, k_c: k };
            let r = truncate_pool(pool.clone(), spec, Objective::Reward);
            let c = truncate_pool(pool.clone(), spec, Objective::Cost);
            prop_assert!(mean(&r) <= full + 1e-9);
            prop_assert!(mean(&c) >= full - 1e-9);
            prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(r.len(), pool.len() - k);
        }
    }
}
