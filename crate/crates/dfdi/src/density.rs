//! Distribution distances over trajectory ensembles and contraction-bound
//! calculators.
//!
//! An ensemble of trajectories is flattened into an empirical measure (one
//! row per trajectory: selected coordinates at selected timepoints). The
//! 2-Wasserstein distance between two equal-size empirical measures is the
//! square root of the optimal assignment cost on the squared-distance
//! matrix, solved exactly; an entropic (Sinkhorn) approximation is offered
//! for sample counts beyond the exact-mode limit. KL divergence is estimated
//! by Gaussian moment matching with a trace-scaled ridge.
//!
//! The bound calculators evaluate the closed-form contraction inequalities
//! for stochastically contracting systems: the baseline two-noise form and
//! the fault-detection form with an additive input-mismatch term. Both
//! return the right-hand side of
//! `W2^2(mu_t, nu_t) <= C/(2 gamma) [+ C_d/(2 gamma m_lo)] +
//! (m_hi/m_lo) W2^2(0) exp(-2 gamma t)`
//! and reject parameter sets whose effective rate `gamma` is nonpositive.

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    default_initial_state, simulate_trajectory, FaultProfile, SpacecraftParams, Trajectory,
};
use crate::{derive_seed, derived_rng, stream, Error, Result};

/// Largest sample count solved by the exact assignment path.
pub const W2_EXACT_MAX_N: usize = 2048;

/// Ensemble snapshot: row i is trajectory i restricted to the selected
/// timepoints and state coordinates, concatenated in time-major order.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    pub samples: Array2<f64>,
    pub timepoint_indices: Vec<usize>,
    pub coordinate_indices: Vec<usize>,
}

impl EmpiricalMeasure {
    pub fn n(&self) -> usize {
        self.samples.nrows()
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }
}

/// `count` timepoint indices uniformly spaced over `0..n_points`, endpoints
/// included, rounded to the nearest grid index.
pub fn uniform_timepoints(n_points: usize, count: usize) -> Vec<usize> {
    assert!(n_points >= 1 && count >= 1);
    if count == 1 {
        return vec![0];
    }
    let last = (n_points - 1) as f64;
    (0..count)
        .map(|i| (last * i as f64 / (count - 1) as f64).round() as usize)
        .collect()
}

/// Restricts every trajectory to `timepoints` x `coords` and stacks the
/// results into an empirical measure of dimension
/// `timepoints.len() * coords.len()`.
pub fn flatten(
    ensemble: &[Trajectory],
    timepoints: &[usize],
    coords: &[usize],
) -> Result<EmpiricalMeasure> {
    if ensemble.is_empty() {
        return Err(Error::Config("cannot flatten an empty ensemble".into()));
    }
    if timepoints.is_empty() || coords.is_empty() {
        return Err(Error::Config("timepoint and coordinate selections must be nonempty".into()));
    }
    let n_points = ensemble[0].len();
    if let Some(&bad) = timepoints.iter().find(|&&k| k >= n_points) {
        return Err(Error::Config(format!(
            "timepoint index {bad} out of range (trajectory has {n_points} points)"
        )));
    }
    if let Some(&bad) = coords.iter().find(|&&j| j >= 10) {
        return Err(Error::Config(format!("coordinate index {bad} out of range")));
    }
    let d = timepoints.len() * coords.len();
    let mut samples = Array2::zeros((ensemble.len(), d));
    for (i, traj) in ensemble.iter().enumerate() {
        if traj.len() != n_points {
            return Err(Error::Config(format!(
                "ragged ensemble: trajectory {i} has {} points, expected {n_points}",
                traj.len()
            )));
        }
        let mut col = 0;
        for &k in timepoints {
            for &j in coords {
                samples[(i, col)] = traj.states[k][j];
                col += 1;
            }
        }
        if samples.row(i).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite sample in trajectory {i}")));
        }
    }
    Ok(EmpiricalMeasure {
        samples,
        timepoint_indices: timepoints.to_vec(),
        coordinate_indices: coords.to_vec(),
    })
}

fn check_comparable(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if mu.dim() != nu.dim() {
        return Err(Error::Config(format!(
            "measure dimensions differ: {} vs {}",
            mu.dim(),
            nu.dim()
        )));
    }
    if mu.n() != nu.n() {
        return Err(Error::Config(format!(
            "sample counts differ: {} vs {} (no implicit sub-sampling)",
            mu.n(),
            nu.n()
        )));
    }
    Ok(())
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn squared_cost_matrix(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Array2<f64> {
    let n = mu.n();
    let mut cost = Array2::zeros((n, n));
    cost.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let a = mu.samples.row(i);
            for j in 0..n {
                row[j] = sq_dist(a, nu.samples.row(j));
            }
        });
    cost
}

/// Exact rectangular linear sum assignment (Jonker-Volgenant with dual
/// updates and Dijkstra-style augmenting paths). Returns `col4row`:
/// `col4row[i]` is the column matched to row i of the minimum-cost matching.
pub fn solve_assignment(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let (nr, nc) = cost.dim();
    if nr == 0 || nr > nc {
        return Err(Error::Config(format!(
            "assignment needs 1 <= rows <= cols, got {nr}x{nc}"
        )));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite assignment cost".into()));
    }
    let mut u = vec![0.0f64; nr];
    let mut v = vec![0.0f64; nc];
    let mut shortest = vec![f64::INFINITY; nc];
    let mut path = vec![usize::MAX; nc];
    let mut col4row = vec![usize::MAX; nr];
    let mut row4col = vec![usize::MAX; nc];
    let mut sr = vec![false; nr];
    let mut sc = vec![false; nc];
    let mut remaining = vec![0usize; nc];

    for cur_row in 0..nr {
        let mut min_val = 0.0f64;
        let mut num_remaining = nc;
        for jp in 0..nc {
            remaining[jp] = nc - jp - 1;
        }
        sr.iter_mut().for_each(|b| *b = false);
        sc.iter_mut().for_each(|b| *b = false);
        shortest.iter_mut().for_each(|c| *c = f64::INFINITY);

        // Dijkstra over reduced costs until an unmatched column is reached
        let mut sink = usize::MAX;
        let mut i = cur_row;
        while sink == usize::MAX {
            let mut index = usize::MAX;
            let mut lowest = f64::INFINITY;
            sr[i] = true;
            for it in 0..num_remaining {
                let j = remaining[it];
                let r = min_val + cost[(i, j)] - u[i] - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                if shortest[j] < lowest
                    || (shortest[j] == lowest && row4col[j] == usize::MAX)
                {
                    lowest = shortest[j];
                    index = it;
                }
            }
            min_val = lowest;
            if !min_val.is_finite() {
                return Err(Error::Numerical("assignment problem infeasible".into()));
            }
            let j = remaining[index];
            if row4col[j] == usize::MAX {
                sink = j;
            } else {
                i = row4col[j];
            }
            sc[j] = true;
            remaining[index] = remaining[num_remaining - 1];
            num_remaining -= 1;
        }

        u[cur_row] += min_val;
        for ip in 0..nr {
            if sr[ip] && ip != cur_row {
                u[ip] += min_val - shortest[col4row[ip]];
            }
        }
        for jp in 0..nc {
            if sc[jp] {
                v[jp] -= min_val - shortest[jp];
            }
        }

        // augment along the alternating path back from the sink
        let mut j = sink;
        loop {
            let ip = path[j];
            row4col[j] = ip;
            std::mem::swap(&mut col4row[ip], &mut j);
            if ip == cur_row {
                break;
            }
        }
    }
    Ok(col4row)
}

/// Exact empirical 2-Wasserstein distance between equal-size sample sets:
/// `sqrt(min_pi (1/n) sum_i ||x_i - y_pi(i)||^2)` over permutations `pi`.
pub fn w2_empirical(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    check_comparable(mu, nu)?;
    if mu.n() > W2_EXACT_MAX_N {
        return Err(Error::Config(format!(
            "n = {} exceeds the exact-mode limit {W2_EXACT_MAX_N}; use w2_sinkhorn",
            mu.n()
        )));
    }
    let cost = squared_cost_matrix(mu, nu);
    let col4row = solve_assignment(&cost)?;
    let total: f64 = col4row.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok((total / mu.n() as f64).sqrt())
}

/// Entropic approximation of the empirical 2-Wasserstein distance
/// (log-domain Sinkhorn with epsilon-scaling, uniform weights). The
/// converged plan is rounded to exact marginal feasibility before costing,
/// so the result is an upper bound on the exact distance (up to float
/// roundoff), tightening as `epsilon` shrinks. Use for sample counts
/// beyond the exact-mode limit.
pub fn w2_sinkhorn(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, epsilon: f64) -> Result<f64> {
    check_comparable(mu, nu)?;
    if epsilon <= 0.0 {
        return Err(Error::Config("sinkhorn epsilon must be positive".into()));
    }
    let n = mu.n();
    let cost = squared_cost_matrix(mu, nu);
    let cost_max = cost.iter().cloned().fold(0.0f64, f64::max);
    let log_w = -(n as f64).ln();
    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; n];
    // epsilon-scaling: start coarse, halve down to the requested epsilon
    let mut eps = (cost_max / 10.0).max(epsilon);
    loop {
        for _ in 0..200 {
            // f-update: f_i = -eps * LSE_j((g_j - C_ij)/eps + log w)
            for i in 0..n {
                let mut hi = f64::NEG_INFINITY;
                for j in 0..n {
                    hi = hi.max((g[j] - cost[(i, j)]) / eps + log_w);
                }
                let mut s = 0.0;
                for j in 0..n {
                    s += ((g[j] - cost[(i, j)]) / eps + log_w - hi).exp();
                }
                f[i] = -eps * (hi + s.ln());
            }
            let mut err = 0.0f64;
            for j in 0..n {
                let mut hi = f64::NEG_INFINITY;
                for i in 0..n {
                    hi = hi.max((f[i] - cost[(i, j)]) / eps + log_w);
                }
                let mut s = 0.0;
                for i in 0..n {
                    s += ((f[i] - cost[(i, j)]) / eps + log_w - hi).exp();
                }
                let new_g = -eps * (hi + s.ln());
                err = err.max((new_g - g[j]).abs());
                g[j] = new_g;
            }
            if err < 1e-9 * eps.max(1.0) {
                break;
            }
        }
        if eps <= epsilon {
            break;
        }
        eps = (eps / 2.0).max(epsilon);
    }
    // Round the plan to exact marginal feasibility (scale rows, then
    // columns, then patch the residual with a rank-one correction) before
    // evaluating the transport cost, so the result never falls below the
    // unregularized optimum. All passes stream over the implicit plan.
    let w = 1.0 / n as f64;
    let plan = |i: usize, j: usize| ((f[i] + g[j] - cost[(i, j)]) / eps + 2.0 * log_w).exp();
    let mut alpha = vec![1.0f64; n];
    for i in 0..n {
        let r: f64 = (0..n).map(|j| plan(i, j)).sum();
        if r > w {
            alpha[i] = w / r;
        }
    }
    let mut beta = vec![1.0f64; n];
    let mut col = vec![0.0f64; n];
    for j in 0..n {
        let c: f64 = (0..n).map(|i| alpha[i] * plan(i, j)).sum();
        col[j] = c;
        if c > w {
            beta[j] = w / c;
        }
    }
    let mut err_r = vec![0.0f64; n];
    let mut total = 0.0;
    for i in 0..n {
        let mut r = 0.0;
        for j in 0..n {
            let p = alpha[i] * beta[j] * plan(i, j);
            r += p;
            total += p * cost[(i, j)];
        }
        err_r[i] = (w - r).max(0.0);
    }
    let err_c: Vec<f64> = (0..n).map(|j| (w - beta[j] * col[j]).max(0.0)).collect();
    let deficit: f64 = err_r.iter().sum();
    if deficit > 0.0 {
        let mut cross = 0.0;
        for i in 0..n {
            if err_r[i] > 0.0 {
                let row: f64 = (0..n).map(|j| err_c[j] * cost[(i, j)]).sum();
                cross += err_r[i] * row;
            }
        }
        total += cross / deficit;
    }
    if !total.is_finite() || total < 0.0 {
        return Err(Error::Numerical("sinkhorn transport cost not finite".into()));
    }
    Ok(total.sqrt())
}

fn mean_and_cov(points: &Array2<f64>) -> (Vec<f64>, nalgebra::DMatrix<f64>) {
    let (n, d) = points.dim();
    let mut mean = vec![0.0f64; d];
    for row in points.rows() {
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = nalgebra::DMatrix::zeros(d, d);
    for row in points.rows() {
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for a in 0..d {
        for b in a..d {
            cov[(a, b)] /= denom;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    (mean, cov)
}

/// Gaussian moment-matched KL divergence `KL(N(mu) || N(nu))`. Each sample
/// covariance gets a ridge `1e-6 * trace/d` on the diagonal before the
/// closed-form Gaussian KL is evaluated.
pub fn kl_gaussian(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim() != nu.dim() {
        return Err(Error::Config(format!(
            "measure dimensions differ: {} vs {}",
            mu.dim(),
            nu.dim()
        )));
    }
    let d = mu.dim();
    let (m0, mut s0) = mean_and_cov(&mu.samples);
    let (m1, mut s1) = mean_and_cov(&nu.samples);
    for s in [&mut s0, &mut s1] {
        let ridge = (1e-6 * s.trace() / d as f64).max(1e-300);
        for a in 0..d {
            s[(a, a)] += ridge;
        }
    }
    let chol1 = s1.clone().cholesky().ok_or_else(|| {
        Error::Numerical("second-measure covariance singular after ridge".into())
    })?;
    let chol0 = s0.clone().cholesky().ok_or_else(|| {
        Error::Numerical("first-measure covariance singular after ridge".into())
    })?;
    let tr = chol1.solve(&s0).trace();
    let dm = nalgebra::DVector::from_iterator(d, m1.iter().zip(&m0).map(|(a, b)| a - b));
    let maha = dm.dot(&chol1.solve(&dm));
    let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    };
    let kl = 0.5 * (tr + maha - d as f64 + logdet(&chol1) - logdet(&chol0));
    if !kl.is_finite() {
        return Err(Error::Numerical("KL evaluation produced a non-finite value".into()));
    }
    // clip tiny negative round-off for identical inputs
    Ok(kl.max(0.0))
}

/// Rescales both measures by the per-coordinate standard deviation of the
/// pooled sample set. Optional preprocessing; distances default to raw
/// coordinates.
pub fn zscore_pooled(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<(EmpiricalMeasure, EmpiricalMeasure)> {
    if mu.dim() != nu.dim() {
        return Err(Error::Config("measure dimensions differ".into()));
    }
    let d = mu.dim();
    let n_tot = (mu.n() + nu.n()) as f64;
    let mut mean = vec![0.0f64; d];
    for row in mu.samples.rows().into_iter().chain(nu.samples.rows()) {
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += v / n_tot;
        }
    }
    let mut var = vec![0.0f64; d];
    for row in mu.samples.rows().into_iter().chain(nu.samples.rows()) {
        for (s, (v, m)) in var.iter_mut().zip(row.iter().zip(&mean)) {
            *s += (v - m) * (v - m) / n_tot;
        }
    }
    let scale: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-12)).collect();
    let rescale = |m: &EmpiricalMeasure| {
        let mut s = m.samples.clone();
        for mut row in s.rows_mut() {
            for (v, sc) in row.iter_mut().zip(&scale) {
                *v /= sc;
            }
        }
        EmpiricalMeasure {
            samples: s,
            timepoint_indices: m.timepoint_indices.clone(),
            coordinate_indices: m.coordinate_indices.clone(),
        }
    };
    Ok((rescale(mu), rescale(nu)))
}

/// Constants entering the contraction bounds. `m_lo`/`m_hi` bound the
/// contraction metric, `m_x`/`m_xx` its state derivatives, `g1`/`g2` the two
/// noise intensities, `g_bar` the input-matrix norm, `u_bar` the largest
/// commanded input norm, `delta_bar` the largest effectiveness deviation,
/// `alpha` the contraction rate, and `eps_c`/`eps_f` the Young-inequality
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub m_lo: f64,
    pub m_hi: f64,
    pub m_x: f64,
    pub m_xx: f64,
    pub g1: f64,
    pub g2: f64,
    pub g_bar: f64,
    pub u_bar: f64,
    pub delta_bar: f64,
    pub alpha: f64,
    pub eps_c: f64,
    pub eps_f: f64,
}

impl BoundConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.m_lo > 0.0 && self.m_hi >= self.m_lo) {
            return Err(Error::Config("need 0 < m_lo <= m_hi".into()));
        }
        let nonneg = [
            self.m_x, self.m_xx, self.g1, self.g2, self.g_bar, self.u_bar, self.delta_bar,
        ];
        if nonneg.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("bound constants must be nonnegative".into()));
        }
        if self.eps_c <= 0.0 || self.eps_f <= 0.0 {
            return Err(Error::Config("eps_c and eps_f must be positive".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config("contraction rate alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Baseline two-noise contraction bound:
/// `C_c/(2 gamma_1) + (m_hi/m_lo) W2^2(0) e^{-2 gamma_1 t}` with
/// `gamma_1 = alpha - ((g1^2+g2^2)/2 m_lo)(eps_c m_x + m_xx/2)` and
/// `C_c = (m_hi/m_lo + m_x/(eps_c m_lo))(g1^2+g2^2)`. Squared distance.
pub fn wasserstein_contraction_bound(
    c: &BoundConstants,
    w2_init_sq: f64,
    t: f64,
) -> Result<f64> {
    c.validate()?;
    if w2_init_sq < 0.0 || t < 0.0 {
        return Err(Error::Config("w2_init_sq and t must be nonnegative".into()));
    }
    let gsq = c.g1 * c.g1 + c.g2 * c.g2;
    let gamma1 = c.alpha - (gsq / (2.0 * c.m_lo)) * (c.eps_c * c.m_x + c.m_xx / 2.0);
    if gamma1 <= 0.0 {
        return Err(Error::Numerical(format!(
            "bound inapplicable: effective rate gamma_1 = {gamma1} <= 0"
        )));
    }
    let c_c = (c.m_hi / c.m_lo + c.m_x / (c.eps_c * c.m_lo)) * gsq;
    Ok(c_c / (2.0 * gamma1) + (c.m_hi / c.m_lo) * w2_init_sq * (-2.0 * gamma1 * t).exp())
}

/// Fault-detection bound output: the squared-distance bound and its root.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdiBound {
    pub squared: f64,
    pub root: f64,
}

/// Fault-detection contraction bound with the input-mismatch term:
/// `C~_c/(2 gamma~_1) + C~_d/(2 gamma~_1 m_lo) + (m_hi/m_lo) W2^2(0)
/// e^{-2 gamma~_1 t}` with
/// `gamma~_1 = alpha - eps_f/4 - (g2^2/2 m_lo)(eps_c m_x + m_xx/2)`,
/// `C~_c = (m_hi/m_lo + m_x/(eps_c m_lo)) g2^2`, and
/// `C~_d = 2 m_hi^2 G_bar^2 delta_bar^2 u_bar^2/(eps_f m_lo)`.
pub fn wasserstein_fdi_bound(c: &BoundConstants, w2_init_sq: f64, t: f64) -> Result<FdiBound> {
    c.validate()?;
    if w2_init_sq < 0.0 || t < 0.0 {
        return Err(Error::Config("w2_init_sq and t must be nonnegative".into()));
    }
    let g2sq = c.g2 * c.g2;
    let gamma1 = c.alpha - c.eps_f / 4.0 - (g2sq / (2.0 * c.m_lo)) * (c.eps_c * c.m_x + c.m_xx / 2.0);
    if gamma1 <= 0.0 {
        return Err(Error::Numerical(format!(
            "bound inapplicable: effective rate gamma~_1 = {gamma1} <= 0"
        )));
    }
    let c_c = (c.m_hi / c.m_lo + c.m_x / (c.eps_c * c.m_lo)) * g2sq;
    let c_d = 2.0 * c.m_hi * c.m_hi * c.g_bar * c.g_bar * c.delta_bar * c.delta_bar * c.u_bar
        * c.u_bar
        / (c.eps_f * c.m_lo);
    let squared = c_c / (2.0 * gamma1)
        + c_d / (2.0 * gamma1 * c.m_lo)
        + (c.m_hi / c.m_lo) * w2_init_sq * (-2.0 * gamma1 * t).exp();
    Ok(FdiBound {
        squared,
        root: squared.sqrt(),
    })
}

/// Least-squares decay rate of `values` against `times` on a log scale:
/// returns `-slope` of the best-fit line to `ln(values)`. Positive result
/// means exponential decay.
pub fn fit_decay_rate(times: &[f64], values: &[f64]) -> f64 {
    assert!(times.len() == values.len() && times.len() >= 2);
    let n = times.len() as f64;
    let logs: Vec<f64> = values.iter().map(|v| v.max(1e-300).ln()).collect();
    let tm = times.iter().sum::<f64>() / n;
    let lm = logs.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, l) in times.iter().zip(&logs) {
        num += (t - tm) * (l - lm);
        den += (t - tm) * (t - tm);
    }
    -(num / den)
}

/// Contraction-rate estimate over perturbed deterministic pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContractionEstimate {
    /// Median fitted rate over pairs.
    pub alpha: f64,
    pub per_pair: Vec<f64>,
    /// Set when the median rate is nonpositive (separation did not decay).
    pub non_decaying: bool,
}

/// Estimates the closed-loop contraction rate: simulate nominal,
/// noise-free trajectory pairs whose initial attitudes differ by a random
/// perturbation of size `perturb_scale`, then fit the decay rate of the
/// attitude/rate separation over the window before it reaches the numerical
/// floor. Wheel speeds integrate torque history and retain a persistent
/// offset, so the separation is measured on the attitude and rate
/// coordinates, matching the tracking part of the state.
pub fn estimate_contraction_rate(
    params: &SpacecraftParams,
    n_pairs: usize,
    perturb_scale: f64,
    base_seed: u64,
) -> Result<ContractionEstimate> {
    if n_pairs == 0 {
        return Err(Error::Config("need at least one pair".into()));
    }
    if perturb_scale <= 0.0 {
        return Err(Error::Config("perturb_scale must be positive".into()));
    }
    params.validate()?;
    let profile = FaultProfile::nominal();
    let x0 = default_initial_state();
    let rates: Result<Vec<f64>> = (0..n_pairs)
        .into_par_iter()
        .map(|pair| {
            let mut rng = derived_rng(base_seed, stream::PAIR, pair as u64);
            let mut xb = x0;
            for j in 0..3 {
                xb[j] += perturb_scale * rng.sample::<f64, _>(StandardNormal);
            }
            let seed = derive_seed(base_seed, stream::PAIR, pair as u64);
            let ta = simulate_trajectory(&x0, &profile, params, 0.0, seed)?;
            let tb = simulate_trajectory(&xb, &profile, params, 0.0, seed)?;
            let n = ta.len();
            let sep: Vec<f64> = (0..n)
                .map(|k| {
                    let d = tb.states[k] - ta.states[k];
                    (0..6).map(|j| d[j] * d[j]).sum::<f64>().sqrt()
                })
                .collect();
            // floor: largest separation over the last tenth of the horizon
            let tail_start = (n as f64 * 0.9) as usize;
            let floor = sep[tail_start..].iter().cloned().fold(0.0f64, f64::max);
            let thresh = (10.0 * floor).max(1e-14);
            let cut = sep
                .iter()
                .position(|&s| s < thresh)
                .unwrap_or(n)
                .max(10)
                .min(n);
            Ok(fit_decay_rate(&ta.times[..cut], &sep[..cut]))
        })
        .collect();
    let per_pair = rates?;
    let mut sorted = per_pair.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    let alpha = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    Ok(ContractionEstimate {
        alpha,
        per_pair,
        non_decaying: alpha <= 0.0,
    })
}
