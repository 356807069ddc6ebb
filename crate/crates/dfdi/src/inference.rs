//! Fault classification and magnitude estimation on observed trajectories.
//!
//! A trajectory is scored against a conditioning vector by the sum of
//! per-transition Gaussian NLLs with the bridge coordinate fixed at zero
//! (`x_tau = x_k`), so the score is deterministic given the model, the
//! trajectory, and the conditioning. Classification picks the candidate
//! with the lowest score. Estimation runs Adam directly on the conditioning
//! entries against the score plus a pull-to-nominal regularizer
//! `reg_weight * sum (1 - v)^2` over the effectiveness entries (actuator
//! effectiveness, and sensor effectiveness for persistent-fault models;
//! normalized onset times carry no regularizer), projecting every entry
//! onto [0,1] after each step.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::faultgen::Scenario;
use crate::flowmatch::{build_features, loss_and_gradients, nll_loss, Adam, FlowModel};
use crate::{Error, Result};

/// Estimation hyperparameters. Iteration counts are per scenario; the
/// initializations sit near nominal so the regularizer and the data pull in
/// consistent directions on healthy channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub iters_type1: usize,
    pub iters_type2: usize,
    /// Adam step size on the conditioning entries.
    pub lr: f64,
    /// Weight of the pull-to-nominal term on effectiveness entries.
    pub reg_weight: f64,
    pub init_eta_type1: [f64; 4],
    pub init_eta_type2: [f64; 4],
    pub init_gamma: [f64; 7],
    /// Initial normalized onset time for every wheel.
    pub init_onset: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            iters_type1: 300,
            iters_type2: 350,
            lr: 1e-2,
            reg_weight: 0.01,
            init_eta_type1: [0.95; 4],
            init_eta_type2: [0.9; 4],
            init_gamma: [0.9; 7],
            init_onset: 0.5,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters_type1 == 0 || self.iters_type2 == 0 {
            return Err(Error::Config("iteration counts must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.reg_weight < 0.0 {
            return Err(Error::Config("reg_weight must be nonnegative".into()));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.init_eta_type1.iter().copied().all(unit)
            || !self.init_eta_type2.iter().copied().all(unit)
            || !self.init_gamma.iter().copied().all(unit)
            || !unit(self.init_onset)
        {
            return Err(Error::Config("initializations must lie in [0,1]".into()));
        }
        Ok(())
    }
}

fn check_trajectory(model: &FlowModel, traj: &Trajectory) -> Result<usize> {
    if traj.len() < 2 {
        return Err(Error::Config("trajectory needs at least one transition".into()));
    }
    if traj.len() > model.n_steps() + 1 {
        return Err(Error::Config(format!(
            "trajectory has {} points but the model covers at most {}",
            traj.len(),
            model.n_steps() + 1
        )));
    }
    if (traj.dt() - model.dt).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "trajectory step {} does not match the model grid {}",
            traj.dt(),
            model.dt
        )));
    }
    Ok(traj.len() - 1)
}

/// Feature/target batch for scoring: one row per transition, bridge
/// coordinate fixed at zero. The conditioning is embedded both in the
/// feature tail and in the FiLM batch.
fn scoring_batch(
    model: &FlowModel,
    traj: &Trajectory,
    c: &[f64],
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    if c.len() != model.cond_dim {
        return Err(Error::Config(format!(
            "conditioning has {} entries, model expects {}",
            c.len(),
            model.cond_dim
        )));
    }
    let k_total = check_trajectory(model, traj)?;
    let mut x = Array2::zeros((k_total, model.input_dim));
    let mut cm = Array2::zeros((k_total, model.cond_dim));
    let mut y = Array2::zeros((k_total, 10));
    for k in 0..k_total {
        let f = build_features(
            &traj.states,
            k,
            &traj.states[k],
            0.0,
            c,
            model.horizon,
            model.dt,
            model.memory,
        );
        for (j, v) in f.iter().enumerate() {
            x[(k, j)] = *v;
        }
        for (j, v) in c.iter().enumerate() {
            cm[(k, j)] = *v;
        }
        for j in 0..10 {
            y[(k, j)] = traj.states[k + 1][j];
        }
    }
    Ok((x, cm, y))
}

/// Per-transition negative log-likelihoods of the observed next states.
pub fn transition_nlls(model: &FlowModel, traj: &Trajectory, c: &[f64]) -> Result<Vec<f64>> {
    let (x, cm, y) = scoring_batch(model, traj, c)?;
    let (mu, sg) = model.forward_batch(&x, &cm)?;
    let mut out = Vec::with_capacity(x.nrows());
    for k in 0..x.nrows() {
        out.push(nll_loss(
            mu.row(k).as_slice().unwrap(),
            sg.row(k).as_slice().unwrap(),
            y.row(k).as_slice().unwrap(),
        ));
    }
    Ok(out)
}

/// Midpoint-recursive sum. By construction the total equals the sum of the
/// two halves of the input exactly, so trajectory scores are additive over
/// a half/half segment split without floating-point slack.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => pairwise_sum(&values[..n / 2]) + pairwise_sum(&values[n / 2..]),
    }
}

/// Total trajectory NLL under a conditioning vector (pairwise-summed
/// transition scores).
pub fn trajectory_nll(model: &FlowModel, traj: &Trajectory, c: &[f64]) -> Result<f64> {
    Ok(pairwise_sum(&transition_nlls(model, traj, c)?))
}

/// Outcome of scoring a trajectory against a candidate set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Classification {
    /// Index of the lowest-scoring candidate (lowest index on ties).
    pub argmin: usize,
    pub nlls: Vec<f64>,
    /// Whether another candidate achieved exactly the minimal score.
    pub tie: bool,
}

/// Scores every candidate conditioning vector (in parallel; the model is
/// read-only) and returns the argmin with the full score vector.
pub fn classify_fault(
    model: &FlowModel,
    traj: &Trajectory,
    candidates: &[Vec<f64>],
) -> Result<Classification> {
    if candidates.is_empty() {
        return Err(Error::Config("classification needs at least one candidate".into()));
    }
    let nlls = candidates
        .par_iter()
        .map(|c| trajectory_nll(model, traj, c))
        .collect::<Result<Vec<f64>>>()?;
    let mut argmin = 0;
    for (i, &v) in nlls.iter().enumerate() {
        if v < nlls[argmin] {
            argmin = i;
        }
    }
    let tie = nlls
        .iter()
        .enumerate()
        .any(|(i, &v)| i != argmin && v == nlls[argmin]);
    Ok(Classification { argmin, nlls, tie })
}

/// Continuous fault estimate with its optimization trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaultEstimate {
    /// Final conditioning vector (all entries in [0,1]).
    pub conditioning: Vec<f64>,
    pub eta: [f64; 4],
    /// Estimated onset times in seconds (actuator-fault models only).
    pub onset_times: Option<[f64; 4]>,
    /// Estimated sensor effectiveness (persistent-fault models only).
    pub gamma: Option<[f64; 7]>,
    /// Regularized objective value at the start of each iteration.
    pub loss_trace: Vec<f64>,
}

/// Gradient-based magnitude estimation: Adam on the conditioning entries of
/// the trajectory NLL plus the pull-to-nominal regularizer, with projection
/// onto [0,1] after every step. The number of regularized leading entries is
/// 4 for actuator-fault models (eta; onsets free) and the full vector for
/// persistent-fault models (eta and gamma).
pub fn estimate_fault(
    model: &FlowModel,
    traj: &Trajectory,
    config: &InferenceConfig,
) -> Result<FaultEstimate> {
    config.validate()?;
    let (mut c, iters, n_reg): (Vec<f64>, usize, usize) = match model.scenario {
        Scenario::Type1 => {
            let mut c = config.init_eta_type1.to_vec();
            c.extend(std::iter::repeat_n(config.init_onset, 4));
            (c, config.iters_type1, 4)
        }
        Scenario::Type2 => {
            let mut c = config.init_eta_type2.to_vec();
            c.extend_from_slice(&config.init_gamma);
            (c, config.iters_type2, 11)
        }
    };
    let (mut x, mut cm, y) = scoring_batch(model, traj, &c)?;
    let k_total = x.nrows();
    let tail = model.input_dim - model.cond_dim;
    let mut adam = Adam::new(c.len(), 0.9, 0.999, 1e-8);
    let mut trace = Vec::with_capacity(iters);
    for it in 0..iters {
        for k in 0..k_total {
            for (j, v) in c.iter().enumerate() {
                x[(k, tail + j)] = *v;
                cm[(k, j)] = *v;
            }
        }
        let (nll, grads) = loss_and_gradients(model, &x, &cm, &y, 0.0, false)?;
        let mut g = grads.cond.sum_axis(Axis(0)).to_vec();
        let mut reg = 0.0;
        for j in 0..n_reg {
            reg += config.reg_weight * (1.0 - c[j]) * (1.0 - c[j]);
            g[j] -= 2.0 * config.reg_weight * (1.0 - c[j]);
        }
        let objective = nll + reg;
        if !objective.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite estimation objective at iteration {it} (trace length {})",
                trace.len()
            )));
        }
        trace.push(objective);
        adam.step(&mut c, &g, config.lr);
        for v in &mut c {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let eta = [c[0], c[1], c[2], c[3]];
    let (onset_times, gamma) = match model.scenario {
        Scenario::Type1 => {
            let o = [
                c[4] * model.horizon,
                c[5] * model.horizon,
                c[6] * model.horizon,
                c[7] * model.horizon,
            ];
            (Some(o), None)
        }
        Scenario::Type2 => {
            let mut gm = [0.0; 7];
            gm.copy_from_slice(&c[4..11]);
            (None, Some(gm))
        }
    };
    Ok(FaultEstimate {
        conditioning: c,
        eta,
        onset_times,
        gamma,
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{FaultProfile, State};

    fn toy_trajectory(n_points: usize, dt: f64) -> Trajectory {
        let states: Vec<State> = (0..n_points)
            .map(|k| State::from_fn(|i, _| ((k * 10 + i) as f64 * 0.37).sin() * 0.01))
            .collect();
        Trajectory {
            times: (0..n_points).map(|k| k as f64 * dt).collect(),
            states,
            profile: FaultProfile::nominal(),
            seed: 0,
        }
    }

    #[test]
    fn pairwise_sum_splits_exactly_at_midpoint() {
        let v: Vec<f64> = (0..601).map(|i| ((i * 37 % 101) as f64).ln_1p() * 0.3 - 1.0).collect();
        let total = pairwise_sum(&v);
        let m = v.len() / 2;
        assert_eq!(total, pairwise_sum(&v[..m]) + pairwise_sum(&v[m..]));
        let naive: f64 = v.iter().sum();
        assert!((total - naive).abs() <= 1e-9 * naive.abs().max(1.0));
    }

    #[test]
    fn trajectory_score_is_deterministic_and_additive() {
        let model = FlowModel::new(Scenario::Type1, 30.0, 0.05, 5);
        let traj = toy_trajectory(9, 0.05);
        let c = vec![0.5; 8];
        let a = trajectory_nll(&model, &traj, &c).unwrap();
        let b = trajectory_nll(&model, &traj, &c).unwrap();
        assert_eq!(a, b);
        let per = transition_nlls(&model, &traj, &c).unwrap();
        assert_eq!(per.len(), 8);
        assert_eq!(a, pairwise_sum(&per[..4]) + pairwise_sum(&per[4..]));
        // a two-point trajectory scores exactly its single transition
        let short = toy_trajectory(2, 0.05);
        let s = trajectory_nll(&model, &short, &c).unwrap();
        assert_eq!(s, transition_nlls(&model, &short, &c).unwrap()[0]);
    }

    #[test]
    fn classification_tie_breaks_to_lowest_index() {
        let model = FlowModel::new(Scenario::Type1, 30.0, 0.05, 5);
        let traj = toy_trajectory(6, 0.05);
        let single = classify_fault(&model, &traj, &[vec![0.3; 8]]).unwrap();
        assert_eq!(single.argmin, 0);
        assert!(!single.tie);
        // duplicated candidates: identical scores, first index wins
        let dup = classify_fault(&model, &traj, &[vec![0.3; 8], vec![0.3; 8]]).unwrap();
        assert_eq!(dup.argmin, 0);
        assert!(dup.tie);
        assert_eq!(dup.nlls[0], dup.nlls[1]);
        assert!(classify_fault(&model, &traj, &[]).is_err());
    }

    #[test]
    fn estimates_stay_in_unit_interval() {
        let model = FlowModel::new(Scenario::Type1, 30.0, 0.05, 5);
        let traj = toy_trajectory(8, 0.05);
        let config = InferenceConfig {
            iters_type1: 3,
            lr: 0.5, // oversized step to slam into the projection bounds
            ..InferenceConfig::default()
        };
        let est = estimate_fault(&model, &traj, &config).unwrap();
        assert_eq!(est.loss_trace.len(), 3);
        assert!(est.conditioning.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let onsets = est.onset_times.unwrap();
        assert!(onsets.iter().all(|&t| (0.0..=30.0).contains(&t)));
        assert!(est.gamma.is_none());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = InferenceConfig::default();
        cfg.validate().unwrap();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        cfg = InferenceConfig {
            init_gamma: [1.2; 7],
            ..InferenceConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg = InferenceConfig {
            iters_type2: 0,
            ..InferenceConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let model = FlowModel::new(Scenario::Type1, 30.0, 0.05, 5);
        let wrong_dt = toy_trajectory(6, 0.02);
        assert!(trajectory_nll(&model, &wrong_dt, &vec![0.5; 8]).is_err());
        let too_long = toy_trajectory(800, 0.05);
        assert!(trajectory_nll(&model, &too_long, &vec![0.5; 8]).is_err());
        let wrong_dim = toy_trajectory(6, 0.05);
        assert!(trajectory_nll(&model, &wrong_dim, &vec![0.5; 11]).is_err());
    }
}
