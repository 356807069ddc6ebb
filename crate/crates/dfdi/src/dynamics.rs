//! Closed-loop spacecraft attitude dynamics with reaction-wheel faults.
//!
//! State is `x = [theta, omega, omega_w] in R^10`: Euler angles [rad], body
//! angular velocity [rad/s], and four wheel speeds [rad/s]. A PD controller
//! tracks a reference attitude from faulted angle measurements, commands are
//! allocated to the wheels through the pseudoinverse of the wheel
//! configuration matrix and saturated, and multiplicative actuator
//! effectiveness scales the torques actually delivered. Integration is
//! Euler-Maruyama with additive process noise.
//!
//! Sign convention: the wheel reaction torque enters the body as
//! `+A * tau_eff` while wheels accelerate as `omega_w_dot = tau_eff / J_w`,
//! so that the allocation identity `A * pinv(A) * u = u` produces the
//! commanded body torque with negative feedback. Gyroscopic coupling uses the
//! full momentum `I*omega + J_w*A*omega_w`.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{derive_seed, derived_rng, stream, Error, Result};

/// Full state vector `[theta(3), omega(3), omega_w(4)]`.
pub type State = SVector<f64, 10>;

/// Norm threshold beyond which integration aborts as divergent.
pub const DIVERGENCE_GUARD: f64 = 1e6;

/// Physical and controller parameters of the closed loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpacecraftParams {
    /// Diagonal of the inertia matrix [kg m^2].
    pub inertia: [f64; 3],
    /// Wheel inertia about its spin axis [kg m^2].
    pub wheel_inertia: f64,
    /// Diagonal PD position gains.
    pub kp: [f64; 3],
    /// Diagonal PD rate gains.
    pub kd: [f64; 3],
    /// Per-wheel torque saturation [N m].
    pub torque_limit: f64,
    /// 3x4 wheel torque-distribution matrix, unit columns (row-major rows).
    pub wheel_config: [[f64; 4]; 3],
    /// Integration/sampling step [s].
    pub dt: f64,
    /// Final time [s].
    pub horizon: f64,
}

impl Default for SpacecraftParams {
    fn default() -> Self {
        let s = 1.0 / 3f64.sqrt();
        SpacecraftParams {
            inertia: [1.0, 1.0, 0.8],
            wheel_inertia: 0.01,
            kp: [22.5, 18.0, 15.0],
            kd: [12.0, 9.0, 7.5],
            torque_limit: 0.14,
            wheel_config: [
                [s, s, -s, -s],
                [s, -s, s, -s],
                [s, -s, -s, s],
            ],
            dt: 0.02,
            horizon: 60.0,
        }
    }
}

impl SpacecraftParams {
    pub fn validate(&self) -> Result<()> {
        if self.inertia.iter().any(|&v| v <= 0.0) {
            return Err(Error::Config("inertia diagonal must be positive".into()));
        }
        if self.wheel_inertia <= 0.0 {
            return Err(Error::Config("wheel inertia must be positive".into()));
        }
        if self.torque_limit <= 0.0 {
            return Err(Error::Config("torque limit must be positive".into()));
        }
        if self.dt <= 0.0 {
            return Err(Error::Config("dt must be positive".into()));
        }
        if self.horizon <= 0.0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        let a = self.wheel_matrix();
        for j in 0..4 {
            let norm = a.column(j).norm();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "wheel_config column {j} has norm {norm}, expected unit"
                )));
            }
        }
        self.wheel_pinv()?;
        let steps = self.horizon / self.dt;
        if (steps - steps.round()).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "horizon/dt = {steps} is not an integer step count"
            )));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.inertia))
    }

    fn inertia_inv(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(
            1.0 / self.inertia[0],
            1.0 / self.inertia[1],
            1.0 / self.inertia[2],
        ))
    }

    pub fn wheel_matrix(&self) -> SMatrix<f64, 3, 4> {
        SMatrix::<f64, 3, 4>::from_fn(|i, j| self.wheel_config[i][j])
    }

    /// Moore-Penrose pseudoinverse `A^T (A A^T)^-1` of the wheel matrix.
    /// Errors if the configuration does not have full row rank.
    pub fn wheel_pinv(&self) -> Result<SMatrix<f64, 4, 3>> {
        let a = self.wheel_matrix();
        let gram = a * a.transpose();
        let inv = gram.try_inverse().ok_or_else(|| {
            Error::Config("wheel_config is rank deficient (no pseudoinverse)".into())
        })?;
        Ok(a.transpose() * inv)
    }
}

/// Fault class of a [`FaultProfile`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultKind {
    /// All channels at effectiveness 1.
    Nominal,
    /// Actuator-only faults switching on at per-wheel onset times.
    Type1,
    /// Persistent actuator and sensor faults active from t = 0.
    Type2,
}

/// Multiplicative fault profile: actuator effectiveness `eta in [0,1]^4`,
/// sensor effectiveness `gamma in [0,1]^7` (3 angle channels, 4 wheel-speed
/// channels; rate gyros are fault-free), and optional per-wheel onset times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultProfile {
    pub kind: FaultKind,
    pub eta: [f64; 4],
    pub gamma: [f64; 7],
    pub onset_times: Option<[f64; 4]>,
}

impl FaultProfile {
    pub fn nominal() -> Self {
        FaultProfile {
            kind: FaultKind::Nominal,
            eta: [1.0; 4],
            gamma: [1.0; 7],
            onset_times: None,
        }
    }

    pub fn type1(eta: [f64; 4], onset_times: [f64; 4]) -> Self {
        FaultProfile {
            kind: FaultKind::Type1,
            eta,
            gamma: [1.0; 7],
            onset_times: Some(onset_times),
        }
    }

    pub fn type2(eta: [f64; 4], gamma: [f64; 7]) -> Self {
        FaultProfile {
            kind: FaultKind::Type2,
            eta,
            gamma,
            onset_times: None,
        }
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.eta.iter().copied().all(in_unit) {
            return Err(Error::Config("eta entries must lie in [0,1]".into()));
        }
        if !self.gamma.iter().copied().all(in_unit) {
            return Err(Error::Config("gamma entries must lie in [0,1]".into()));
        }
        match self.kind {
            FaultKind::Nominal => {
                if self.eta != [1.0; 4] || self.gamma != [1.0; 7] {
                    return Err(Error::Config(
                        "nominal profile requires eta = 1 and gamma = 1".into(),
                    ));
                }
            }
            FaultKind::Type1 => {
                if self.gamma != [1.0; 7] {
                    return Err(Error::Config("type 1 profile requires gamma = 1".into()));
                }
                let onsets = self.onset_times.ok_or_else(|| {
                    Error::Config("type 1 profile requires onset times".into())
                })?;
                if onsets.iter().any(|&t| !(0.0..=horizon).contains(&t)) {
                    return Err(Error::Config(format!(
                        "onset times must lie in [0, {horizon}]"
                    )));
                }
            }
            FaultKind::Type2 => {}
        }
        Ok(())
    }

    /// Actuator effectiveness active at time `t`: before a wheel's onset the
    /// channel is nominal, afterwards (or without onsets) it is `eta`.
    pub fn effectiveness_at(&self, t: f64) -> [f64; 4] {
        match self.onset_times {
            Some(onsets) => {
                let mut out = [1.0; 4];
                for i in 0..4 {
                    if t >= onsets[i] {
                        out[i] = self.eta[i];
                    }
                }
                out
            }
            None => self.eta,
        }
    }
}

/// One simulated trajectory on the uniform grid, with provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub profile: FaultProfile,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() >= 2 {
            self.times[1] - self.times[0]
        } else {
            0.0
        }
    }
}

/// Reference attitude `theta_d(t)`: sinusoidal roll/pitch plus a yaw ramp.
pub fn reference_attitude(t: f64) -> Vector3<f64> {
    Vector3::new(
        0.05 * (0.2 * std::f64::consts::PI * t).sin(),
        0.05 * (0.2 * std::f64::consts::PI * t).cos(),
        std::f64::consts::PI / 250.0 * t,
    )
}

/// Time derivative of the reference, used to start ensembles on-track.
pub fn reference_rate(t: f64) -> Vector3<f64> {
    let w = 0.2 * std::f64::consts::PI;
    Vector3::new(
        0.05 * w * (w * t).cos(),
        -0.05 * w * (w * t).sin(),
        std::f64::consts::PI / 250.0,
    )
}

/// Mean initial state for ensemble generation: on-reference attitude and
/// rate, wheels at rest.
pub fn default_initial_state() -> State {
    let th = reference_attitude(0.0);
    let om = reference_rate(0.0);
    State::from_column_slice(&[th[0], th[1], th[2], om[0], om[1], om[2], 0.0, 0.0, 0.0, 0.0])
}

fn pd_control(
    y_theta: &Vector3<f64>,
    omega: &Vector3<f64>,
    t: f64,
    params: &SpacecraftParams,
) -> Vector3<f64> {
    let err = y_theta - reference_attitude(t);
    Vector3::new(
        -params.kp[0] * err[0] - params.kd[0] * omega[0],
        -params.kp[1] * err[1] - params.kd[1] * omega[1],
        -params.kp[2] * err[2] - params.kd[2] * omega[2],
    )
}

/// Unsaturated PD torque command `-Kp (theta - theta_d) - Kd omega` from the
/// true state.
pub fn nominal_control(x: &State, t: f64, params: &SpacecraftParams) -> Vector3<f64> {
    let y_theta = Vector3::new(x[0], x[1], x[2]);
    let omega = Vector3::new(x[3], x[4], x[5]);
    pd_control(&y_theta, &omega, t, params)
}

fn saturate(u: Vector4<f64>, limit: f64) -> Vector4<f64> {
    u.map(|v| v.clamp(-limit, limit))
}

/// Wheel torque allocation: `clamp(pinv(A) u_nom, +-torque_limit)`.
pub fn allocate_wheel_torques(
    u_nom: &Vector3<f64>,
    params: &SpacecraftParams,
) -> Result<Vector4<f64>> {
    let pinv = params.wheel_pinv()?;
    Ok(saturate(pinv * u_nom, params.torque_limit))
}

/// Faulted, noisy sensor model: returns measured Euler angles
/// `gamma_{1..3} . theta + noise` and measured wheel speeds
/// `gamma_{4..7} . omega_w + noise`. With `sigma_meas = 0` no random draws
/// are consumed and the measurement is exact.
pub fn apply_sensor_fault<R: Rng>(
    x: &State,
    profile: &FaultProfile,
    sigma_meas: f64,
    rng: &mut R,
) -> (Vector3<f64>, Vector4<f64>) {
    let mut y_theta = Vector3::zeros();
    let mut y_wheels = Vector4::zeros();
    for i in 0..3 {
        let noise: f64 = if sigma_meas > 0.0 {
            sigma_meas * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        y_theta[i] = profile.gamma[i] * x[i] + noise;
    }
    for i in 0..4 {
        let noise: f64 = if sigma_meas > 0.0 {
            sigma_meas * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        y_wheels[i] = profile.gamma[3 + i] * x[6 + i] + noise;
    }
    (y_theta, y_wheels)
}

/// Full 10-channel measurement `[y_theta, omega + noise, y_wheels]`. The rate
/// gyros are fault-free but still noisy. Draw order is fixed (3 angle, 3
/// rate, 4 wheel draws) and independent of the profile.
fn measure_full<R: Rng>(
    x: &State,
    profile: &FaultProfile,
    sigma_meas: f64,
    rng: &mut R,
) -> State {
    let mut m = State::zeros();
    for i in 0..3 {
        let noise: f64 = if sigma_meas > 0.0 {
            sigma_meas * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        m[i] = profile.gamma[i] * x[i] + noise;
    }
    for i in 3..6 {
        let noise: f64 = if sigma_meas > 0.0 {
            sigma_meas * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        m[i] = x[i] + noise;
    }
    for i in 0..4 {
        let noise: f64 = if sigma_meas > 0.0 {
            sigma_meas * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        m[6 + i] = profile.gamma[3 + i] * x[6 + i] + noise;
    }
    m
}

/// Closed-loop vector field given an angle measurement already in hand.
/// Returns the state derivative and the commanded (pre-fault) wheel torques.
fn rhs(
    x: &State,
    y_theta: &Vector3<f64>,
    t: f64,
    eta_t: &[f64; 4],
    params: &SpacecraftParams,
    pinv: &SMatrix<f64, 4, 3>,
) -> (State, Vector4<f64>) {
    let omega = Vector3::new(x[3], x[4], x[5]);
    let omega_w = Vector4::new(x[6], x[7], x[8], x[9]);
    let u_nom = pd_control(y_theta, &omega, t, params);
    let u_w = saturate(pinv * u_nom, params.torque_limit);
    let tau_eff = Vector4::new(
        eta_t[0] * u_w[0],
        eta_t[1] * u_w[1],
        eta_t[2] * u_w[2],
        eta_t[3] * u_w[3],
    );
    let a = params.wheel_matrix();
    let momentum = params.inertia_matrix() * omega + params.wheel_inertia * (a * omega_w);
    let omega_dot = params.inertia_inv() * (-omega.cross(&momentum) + a * tau_eff);
    let wheel_dot = tau_eff / params.wheel_inertia;
    let mut dx = State::zeros();
    for i in 0..3 {
        dx[i] = omega[i];
        dx[3 + i] = omega_dot[i];
    }
    for i in 0..4 {
        dx[6 + i] = wheel_dot[i];
    }
    (dx, u_w)
}

/// Closed-loop drift: applies the sensor fault model to the angle
/// measurement, computes the PD command from it (true rates, per the
/// fault-free gyro assumption), allocates and saturates wheel torques, and
/// applies the actuator effectiveness active at `t`. Returns the state
/// derivative and the commanded wheel torques.
pub fn drift<R: Rng>(
    x: &State,
    t: f64,
    profile: &FaultProfile,
    params: &SpacecraftParams,
    sigma_meas: f64,
    rng: &mut R,
) -> Result<(State, Vector4<f64>)> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite state at t = {t}")));
    }
    let (y_theta, _) = apply_sensor_fault(x, profile, sigma_meas, rng);
    let pinv = params.wheel_pinv()?;
    let eta_t = profile.effectiveness_at(t);
    Ok(rhs(x, &y_theta, t, &eta_t, params, &pinv))
}

/// Deterministic closed-loop vector field with explicit actuator
/// effectiveness and angle-sensor gains: the controller consumes
/// `y_theta = gamma_theta . theta` exactly, with no noise. Used by
/// model-based estimators that roll the loop forward at their current fault
/// estimates. Returns the state derivative and the commanded wheel torques.
pub fn closed_loop_drift(
    x: &State,
    t: f64,
    eta: &[f64; 4],
    gamma_theta: &[f64; 3],
    params: &SpacecraftParams,
) -> Result<(State, Vector4<f64>)> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite state at t = {t}")));
    }
    let y_theta = Vector3::new(
        gamma_theta[0] * x[0],
        gamma_theta[1] * x[1],
        gamma_theta[2] * x[2],
    );
    let pinv = params.wheel_pinv()?;
    Ok(rhs(x, &y_theta, t, eta, params, &pinv))
}

/// One Euler-Maruyama step `x + drift dt + sigma sqrt(dt) xi`,
/// `xi ~ N(0, I_10)`. With `sigma_process = 0` the diffusion draw is skipped
/// and the step is plain forward Euler.
pub fn step_em<R: Rng>(
    x: &State,
    t: f64,
    profile: &FaultProfile,
    params: &SpacecraftParams,
    sigma_process: f64,
    sigma_meas: f64,
    rng: &mut R,
) -> Result<State> {
    let (dx, _) = drift(x, t, profile, params, sigma_meas, rng)?;
    let mut next = x + dx * params.dt;
    if sigma_process > 0.0 {
        let scale = sigma_process * params.dt.sqrt();
        for i in 0..10 {
            next[i] += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    if next.norm() > DIVERGENCE_GUARD {
        return Err(Error::Numerical(format!(
            "state norm exceeded divergence guard at t = {t}"
        )));
    }
    Ok(next)
}

/// Result of one closed-loop run: the true state sequence, the measured
/// sequence the controller and any downstream estimator observe, and the
/// largest commanded wheel-torque norm (used for bound constants).
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub truth: Trajectory,
    pub measured: Trajectory,
    pub max_control_norm: f64,
}

/// Simulates the closed loop, recording both true and measured states. One
/// measurement is drawn per step and shared by the controller and the
/// record; `sigma` is used for both process and measurement noise.
pub fn simulate_full(
    x0: &State,
    profile: &FaultProfile,
    params: &SpacecraftParams,
    sigma: f64,
    seed: u64,
) -> Result<SimOutput> {
    params.validate()?;
    profile.validate(params.horizon)?;
    let pinv = params.wheel_pinv()?;
    let n = params.n_steps();
    let mut rng = derived_rng(seed, stream::TRAJECTORY, 0);
    let mut truth = Vec::with_capacity(n + 1);
    let mut measured = Vec::with_capacity(n + 1);
    let mut times = Vec::with_capacity(n + 1);
    let mut max_u = 0.0f64;
    let mut x = *x0;
    for k in 0..=n {
        let t = k as f64 * params.dt;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite state at step {k} (seed {seed})"
            )));
        }
        let m = measure_full(&x, profile, sigma, &mut rng);
        truth.push(x);
        measured.push(m);
        times.push(t);
        if k == n {
            break;
        }
        let y_theta = Vector3::new(m[0], m[1], m[2]);
        let eta_t = profile.effectiveness_at(t);
        let (dx, u_w) = rhs(&x, &y_theta, t, &eta_t, params, &pinv);
        max_u = max_u.max(u_w.norm());
        x += dx * params.dt;
        if sigma > 0.0 {
            let scale = sigma * params.dt.sqrt();
            for i in 0..10 {
                x[i] += scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if x.norm() > DIVERGENCE_GUARD {
            return Err(Error::Numerical(format!(
                "divergence guard tripped at step {k} (seed {seed})"
            )));
        }
    }
    Ok(SimOutput {
        truth: Trajectory {
            times: times.clone(),
            states: truth,
            profile: profile.clone(),
            seed,
        },
        measured: Trajectory {
            times,
            states: measured,
            profile: profile.clone(),
            seed,
        },
        max_control_norm: max_u,
    })
}

/// True-state trajectory of one closed-loop run.
pub fn simulate_trajectory(
    x0: &State,
    profile: &FaultProfile,
    params: &SpacecraftParams,
    sigma: f64,
    seed: u64,
) -> Result<Trajectory> {
    simulate_full(x0, profile, params, sigma, seed).map(|o| o.truth)
}

/// Ensemble of independent runs. Initial states are drawn
/// `x0 = x0_mean + init_std * xi` from a per-trajectory stream, and each run
/// gets its own derived simulation seed, so results are independent of
/// scheduling and of ensemble size.
pub fn simulate_ensemble(
    x0_mean: &State,
    init_std: f64,
    profile: &FaultProfile,
    params: &SpacecraftParams,
    sigma: f64,
    n: usize,
    base_seed: u64,
) -> Result<Vec<SimOutput>> {
    if n == 0 {
        return Err(Error::Config("ensemble size must be at least 1".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut init_rng = derived_rng(base_seed, stream::INIT_STATE, i as u64);
            let mut x0 = *x0_mean;
            if init_std > 0.0 {
                for j in 0..10 {
                    x0[j] += init_std * init_rng.sample::<f64, _>(StandardNormal);
                }
            }
            let seed = derive_seed(base_seed, stream::TRAJECTORY, i as u64);
            simulate_full(&x0, profile, params, sigma, seed)
        })
        .collect()
}

/// Spectral norm of the constant input matrix
/// `G = [0; I^-1 A; I_4 / J_w]` mapping wheel torques into the state
/// derivative. Supplies the input-gain constant for the contraction bounds.
pub fn input_matrix_norm(params: &SpacecraftParams) -> f64 {
    let a = params.wheel_matrix();
    let body = params.inertia_inv() * a;
    let mut g = SMatrix::<f64, 10, 4>::zeros();
    for i in 0..3 {
        for j in 0..4 {
            g[(3 + i, j)] = body[(i, j)];
        }
    }
    for j in 0..4 {
        g[(6 + j, j)] = 1.0 / params.wheel_inertia;
    }
    g.svd(false, false).singular_values[0]
}
