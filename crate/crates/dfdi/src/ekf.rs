//! Augmented extended Kalman filter baseline for joint state and fault
//! estimation.
//!
//! The filter appends the fault parameters to the state vector (actuator
//! effectiveness for switching-fault scenarios, q = 4; actuator plus sensor
//! effectiveness for persistent scenarios, q = 11) and models them as a
//! random walk. Prediction propagates the mean through one Euler step of the
//! closed loop evaluated at the current fault estimates, with the transition
//! Jacobian taken by central finite differences on the augmented one-step
//! map; the update uses the (bilinear) sensor model in Joseph form, keeping
//! the covariance exactly symmetric, and clamps the fault entries to [0,1].
//!
//! The predict/update core is generic over the one-step map and the
//! linearized measurement, so the same code path can be driven by a linear
//! system and compared against a plain Kalman filter.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{closed_loop_drift, default_initial_state, SpacecraftParams, State, Trajectory};
use crate::faultgen::Scenario;
use crate::{Error, Result};

/// Filter state: augmented mean and covariance plus the (constant) noise
/// matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub process_noise: DMatrix<f64>,
    pub measurement_noise: DMatrix<f64>,
}

impl EkfState {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(P + P^T) / 2`; exact bitwise symmetry since IEEE addition commutes.
    fn symmetrize(&mut self) {
        let t = self.covariance.transpose();
        self.covariance = (&self.covariance + t) * 0.5;
    }

    fn require_pd(&self, stage: &str) -> Result<()> {
        Cholesky::new(self.covariance.clone())
            .map(|_| ())
            .ok_or_else(|| {
                Error::Numerical(format!(
                    "covariance lost positive definiteness after {stage}"
                ))
            })
    }

    /// Prediction through an arbitrary one-step map: the mean is propagated
    /// exactly, the covariance as `F P F^T + Q` with `F` the central
    /// finite-difference Jacobian of the map.
    pub fn predict_map<F>(&mut self, map: F, fd_step: f64) -> Result<()>
    where
        F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
    {
        let n = self.dim();
        let mean_next = map(&self.mean)?;
        if mean_next.len() != n {
            return Err(Error::Config("one-step map changed the state dimension".into()));
        }
        let mut f = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut plus = self.mean.clone();
            plus[j] += fd_step;
            let mut minus = self.mean.clone();
            minus[j] -= fd_step;
            let fp = map(&plus)?;
            let fm = map(&minus)?;
            for i in 0..n {
                f[(i, j)] = (fp[i] - fm[i]) / (2.0 * fd_step);
            }
        }
        self.covariance = &f * &self.covariance * f.transpose() + &self.process_noise;
        self.symmetrize();
        self.require_pd("prediction")?;
        self.mean = mean_next;
        Ok(())
    }

    /// Joseph-form update against a linearized measurement: `predicted` and
    /// `jac` are the measurement model and its Jacobian at the current mean.
    pub fn update_linearized(
        &mut self,
        y: &DVector<f64>,
        predicted: &DVector<f64>,
        jac: &DMatrix<f64>,
    ) -> Result<()> {
        let s = jac * &self.covariance * jac.transpose() + &self.measurement_noise;
        let chol = Cholesky::new(s)
            .ok_or_else(|| Error::Numerical("singular innovation covariance".into()))?;
        // K = P H^T S^-1, via S K^T = H P (S and P symmetric)
        let k = chol.solve(&(jac * &self.covariance)).transpose();
        self.mean += &k * (y - predicted);
        let n = self.dim();
        let ikh = DMatrix::identity(n, n) - &k * jac;
        self.covariance = &ikh * &self.covariance * ikh.transpose()
            + &k * &self.measurement_noise * k.transpose();
        self.symmetrize();
        self.require_pd("update")
    }
}

/// Baseline tuning. The noise and initialization values are deliberate,
/// documented choices exposed here rather than hidden constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EkfConfig {
    pub scenario: Scenario,
    pub params: SpacecraftParams,
    /// Measurement noise std defining `R = sigma^2 I_7`.
    pub sigma_meas: f64,
    /// Process-noise variance on each dynamic state.
    pub q_state: f64,
    /// Random-walk variance on each fault parameter.
    pub q_fault: f64,
    /// Initial variance on each dynamic state.
    pub p0_state: f64,
    /// Initial variance on each fault parameter.
    pub p0_fault: f64,
    /// Initial fault-parameter mean (healthy prior).
    pub init_fault: f64,
    /// Central-difference step for the transition Jacobian.
    pub fd_step: f64,
    /// Trailing window [s] whose mean is reported as the estimate.
    pub final_window: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        EkfConfig {
            scenario: Scenario::Type1,
            params: SpacecraftParams::default(),
            sigma_meas: 0.0015,
            q_state: 1e-6,
            q_fault: 1e-5,
            p0_state: 1e-2,
            p0_fault: 0.25,
            init_fault: 1.0,
            fd_step: 1e-6,
            final_window: 5.0,
        }
    }
}

impl EkfConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.sigma_meas <= 0.0 {
            return Err(Error::Config("sigma_meas must be positive".into()));
        }
        if self.q_state < 0.0 || self.q_fault < 0.0 {
            return Err(Error::Config("noise intensities must be nonnegative".into()));
        }
        if self.p0_state <= 0.0 || self.p0_fault <= 0.0 {
            return Err(Error::Config("initial variances must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.init_fault) {
            return Err(Error::Config("init_fault must lie in [0,1]".into()));
        }
        if self.fd_step <= 0.0 {
            return Err(Error::Config("fd_step must be positive".into()));
        }
        if self.final_window <= 0.0 {
            return Err(Error::Config("final_window must be positive".into()));
        }
        Ok(())
    }

    /// Number of appended fault parameters.
    pub fn fault_dim(&self) -> usize {
        match self.scenario {
            Scenario::Type1 => 4,
            Scenario::Type2 => 11,
        }
    }
}

/// Fresh filter state: dynamic states at the reference start, fault
/// parameters at the healthy prior, diagonal covariance and noise matrices.
pub fn init_ekf(config: &EkfConfig) -> Result<EkfState> {
    config.validate()?;
    let q = config.fault_dim();
    let n = 10 + q;
    let x0 = default_initial_state();
    let mut mean = DVector::zeros(n);
    for i in 0..10 {
        mean[i] = x0[i];
    }
    for i in 10..n {
        mean[i] = config.init_fault;
    }
    let mut covariance = DMatrix::zeros(n, n);
    let mut process_noise = DMatrix::zeros(n, n);
    for i in 0..n {
        covariance[(i, i)] = if i < 10 { config.p0_state } else { config.p0_fault };
        process_noise[(i, i)] = if i < 10 { config.q_state } else { config.q_fault };
    }
    let measurement_noise =
        DMatrix::identity(7, 7) * (config.sigma_meas * config.sigma_meas);
    Ok(EkfState {
        mean,
        covariance,
        process_noise,
        measurement_noise,
    })
}

/// Augmented one-step map: one Euler step of the closed loop at the fault
/// estimates carried in the tail, which itself is left unchanged (random
/// walk). For persistent scenarios the modeled controller consumes the
/// sensor-faulted angles `gamma_theta . theta`.
fn augmented_step(aug: &DVector<f64>, t: f64, config: &EkfConfig) -> Result<DVector<f64>> {
    let mut x = State::zeros();
    for i in 0..10 {
        x[i] = aug[i];
    }
    let eta = [aug[10], aug[11], aug[12], aug[13]];
    let gamma_theta = match config.scenario {
        Scenario::Type1 => [1.0; 3],
        Scenario::Type2 => [aug[14], aug[15], aug[16]],
    };
    let (dx, _) = closed_loop_drift(&x, t, &eta, &gamma_theta, &config.params)?;
    let mut next = aug.clone();
    for i in 0..10 {
        next[i] = x[i] + dx[i] * config.params.dt;
    }
    Ok(next)
}

/// One prediction step at time `t`. Fault-parameter means are unchanged.
pub fn ekf_predict(state: &mut EkfState, t: f64, config: &EkfConfig) -> Result<()> {
    state.predict_map(|aug| augmented_step(aug, t, config), config.fd_step)
}

/// Measurement model `[y_theta, y_wheels]` and its analytic Jacobian at the
/// current mean. Healthy scenarios observe the states directly; persistent
/// scenarios scale them by the estimated sensor effectiveness, making the
/// model bilinear in the state and the fault parameters.
fn measurement_model(aug: &DVector<f64>, scenario: Scenario) -> (DVector<f64>, DMatrix<f64>) {
    let n = aug.len();
    let mut pred = DVector::zeros(7);
    let mut h = DMatrix::zeros(7, n);
    match scenario {
        Scenario::Type1 => {
            for i in 0..3 {
                pred[i] = aug[i];
                h[(i, i)] = 1.0;
            }
            for i in 0..4 {
                pred[3 + i] = aug[6 + i];
                h[(3 + i, 6 + i)] = 1.0;
            }
        }
        Scenario::Type2 => {
            for i in 0..3 {
                let g = aug[14 + i];
                pred[i] = g * aug[i];
                h[(i, i)] = g;
                h[(i, 14 + i)] = aug[i];
            }
            for i in 0..4 {
                let g = aug[17 + i];
                pred[3 + i] = g * aug[6 + i];
                h[(3 + i, 6 + i)] = g;
                h[(3 + i, 17 + i)] = aug[6 + i];
            }
        }
    }
    (pred, h)
}

/// One measurement update with `y = [y_theta(3), y_wheels(4)]`; fault
/// entries of the mean are clamped to [0,1] afterwards.
pub fn ekf_update(state: &mut EkfState, y: &[f64; 7], config: &EkfConfig) -> Result<()> {
    let (pred, jac) = measurement_model(&state.mean, config.scenario);
    let y_vec = DVector::from_row_slice(y);
    state.update_linearized(&y_vec, &pred, &jac)?;
    for i in 10..state.dim() {
        state.mean[i] = state.mean[i].clamp(0.0, 1.0);
    }
    Ok(())
}

/// Filtered fault estimates over a measured trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EkfRun {
    /// Post-update fault-parameter means, one row per grid point.
    pub fault_estimates: Vec<Vec<f64>>,
    /// Matching fault-parameter variances (covariance diagonal).
    pub fault_variances: Vec<Vec<f64>>,
    /// Mean of the estimates over the trailing window.
    pub final_estimate: Vec<f64>,
}

/// Runs the filter over a measured trajectory: at each grid point the angle
/// and wheel-speed rows `[m_0..m_2, m_6..m_9]` of the record feed an update,
/// followed by a prediction to the next point. Reports per-step estimates
/// and the trailing-window mean.
pub fn run_ekf(traj: &Trajectory, config: &EkfConfig) -> Result<EkfRun> {
    config.validate()?;
    if traj.is_empty() {
        return Err(Error::Config("measurement sequence is empty".into()));
    }
    if traj.len() >= 2 && (traj.dt() - config.params.dt).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "measurement grid step {} does not match params.dt {}",
            traj.dt(),
            config.params.dt
        )));
    }
    let q = config.fault_dim();
    let mut state = init_ekf(config)?;
    let mut fault_estimates: Vec<Vec<f64>> = Vec::with_capacity(traj.len());
    let mut fault_variances: Vec<Vec<f64>> = Vec::with_capacity(traj.len());
    for (k, x) in traj.states.iter().enumerate() {
        let y = [x[0], x[1], x[2], x[6], x[7], x[8], x[9]];
        ekf_update(&mut state, &y, config)
            .map_err(|e| Error::Numerical(format!("step {k}: {e}")))?;
        fault_estimates.push((0..q).map(|i| state.mean[10 + i]).collect());
        fault_variances.push((0..q).map(|i| state.covariance[(10 + i, 10 + i)]).collect());
        if k + 1 < traj.len() {
            ekf_predict(&mut state, traj.times[k], config)
                .map_err(|e| Error::Numerical(format!("step {k}: {e}")))?;
        }
    }
    let t_end = *traj.times.last().unwrap();
    let cutoff = t_end - config.final_window;
    let tail: Vec<usize> = (0..traj.len())
        .filter(|&k| traj.times[k] >= cutoff - 1e-9)
        .collect();
    let mut final_estimate = vec![0.0; q];
    for &k in &tail {
        for i in 0..q {
            final_estimate[i] += fault_estimates[k][i];
        }
    }
    for v in &mut final_estimate {
        *v /= tail.len() as f64;
    }
    Ok(EkfRun {
        fault_estimates,
        fault_variances,
        final_estimate,
    })
}
