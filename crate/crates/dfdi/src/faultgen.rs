//! Fault-profile sampling and dataset generation/serialization.
//!
//! A dataset is a collection of measured closed-loop trajectories, each
//! simulated under an independently sampled fault profile, paired with the
//! conditioning vector that a conditional density model trains on:
//! `[eta, onset/horizon]` for actuator-fault scenarios (dim 8) and
//! `[eta, gamma]` for persistent actuator+sensor scenarios (dim 11).
//!
//! Sampling law, per channel: with probability `nominal_prob` the channel is
//! healthy (effectiveness 1), otherwise effectiveness is drawn from a Beta
//! law. Onset times are uniform over `onset_range`. Each trajectory draws
//! its own noise level uniformly from `noise_std_range` (used as both
//! process and measurement noise std) and its own initial state.
//!
//! Files are a fixed 8-byte magic, a little-endian u64 header length, a JSON
//! header (config snapshot, scenario, dimensions, per-trajectory profiles
//! and noise levels), then the payload: for each trajectory the conditioning
//! vector followed by the state sequence, row-major little-endian f64.
//! Round-trips are bit-exact.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dynamics::{
    default_initial_state, simulate_full, FaultProfile, SpacecraftParams, State, Trajectory,
};
use crate::{derive_seed, derived_rng, stream, Error, Result};

/// Magic bytes opening every dataset file.
pub const DATASET_MAGIC: &[u8; 8] = b"DFDIDS01";

/// Which fault class a dataset (or trained model) covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Type1,
    Type2,
}

impl Scenario {
    /// Conditioning-vector length: `[eta, onsets/horizon]` or `[eta, gamma]`.
    pub fn cond_dim(self) -> usize {
        match self {
            Scenario::Type1 => 8,
            Scenario::Type2 => 11,
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scenario::Type1 => write!(f, "type1"),
            Scenario::Type2 => write!(f, "type2"),
        }
    }
}

/// Recipe for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub scenario: Scenario,
    pub n_train: usize,
    pub n_val: usize,
    /// Per-trajectory noise std drawn uniformly from this interval.
    pub noise_std_range: [f64; 2],
    /// Initial-state spread around the reference start.
    pub init_std: f64,
    /// Per-channel probability of healthy (effectiveness 1).
    pub nominal_prob: f64,
    /// Beta shape pair for actuator effectiveness draws.
    pub beta_eta: [f64; 2],
    /// Beta shape pair for sensor effectiveness draws.
    pub beta_gamma: [f64; 2],
    /// Uniform onset-time window [s] for actuator faults.
    pub onset_range: [f64; 2],
    pub base_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scenario: Scenario::Type1,
            n_train: 1000,
            n_val: 200,
            noise_std_range: [0.001, 0.002],
            init_std: 0.01,
            nominal_prob: 0.325,
            beta_eta: [0.7, 0.7],
            beta_gamma: [1.0, 1.0],
            onset_range: [8.0, 42.0],
            base_seed: 1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self, horizon: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&self.nominal_prob) {
            return Err(Error::Config("nominal_prob must lie in [0,1]".into()));
        }
        if self.beta_eta.iter().chain(&self.beta_gamma).any(|&v| v <= 0.0) {
            return Err(Error::Config("Beta shape parameters must be positive".into()));
        }
        let [lo, hi] = self.noise_std_range;
        if lo < 0.0 || hi < lo {
            return Err(Error::Config("noise_std_range must satisfy 0 <= lo <= hi".into()));
        }
        if self.init_std < 0.0 {
            return Err(Error::Config("init_std must be nonnegative".into()));
        }
        let [t_lo, t_hi] = self.onset_range;
        if self.scenario == Scenario::Type1 && !(0.0 <= t_lo && t_lo < t_hi && t_hi <= horizon) {
            return Err(Error::Config(format!(
                "onset_range [{t_lo}, {t_hi}] must satisfy 0 <= lo < hi <= horizon {horizon}"
            )));
        }
        Ok(())
    }

    pub fn n_total(&self) -> usize {
        self.n_train + self.n_val
    }
}

/// Draws one fault profile. Per channel a gate draw decides healthy vs
/// faulted; faulted channels then consume one Beta draw. For actuator-fault
/// profiles all four onset draws follow (healthy channels keep their onset
/// in the conditioning; it has no dynamical effect). Draw order is fixed:
/// eta gates/values channel by channel, then onsets or gamma.
pub fn sample_profile(
    config: &DatasetConfig,
    horizon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<FaultProfile> {
    config.validate(horizon)?;
    let beta_eta = Beta::new(config.beta_eta[0], config.beta_eta[1])
        .map_err(|e| Error::Config(format!("beta_eta: {e}")))?;
    let mut eta = [1.0f64; 4];
    for v in &mut eta {
        if rng.random::<f64>() >= config.nominal_prob {
            *v = beta_eta.sample(rng);
        }
    }
    match config.scenario {
        Scenario::Type1 => {
            let mut onsets = [0.0f64; 4];
            for v in &mut onsets {
                *v = rng.random_range(config.onset_range[0]..config.onset_range[1]);
            }
            Ok(FaultProfile::type1(eta, onsets))
        }
        Scenario::Type2 => {
            let beta_gamma = Beta::new(config.beta_gamma[0], config.beta_gamma[1])
                .map_err(|e| Error::Config(format!("beta_gamma: {e}")))?;
            let mut gamma = [1.0f64; 7];
            for v in &mut gamma {
                if rng.random::<f64>() >= config.nominal_prob {
                    *v = beta_gamma.sample(rng);
                }
            }
            Ok(FaultProfile::type2(eta, gamma))
        }
    }
}

/// Conditioning vector for a profile: `[eta, onset/horizon]` (dim 8) for
/// actuator-fault scenarios, `[eta, gamma]` (dim 11) for persistent ones.
pub fn conditioning(profile: &FaultProfile, scenario: Scenario, horizon: f64) -> Vec<f64> {
    let mut c: Vec<f64> = profile.eta.to_vec();
    match scenario {
        Scenario::Type1 => {
            let onsets = profile.onset_times.unwrap_or([0.0; 4]);
            c.extend(onsets.iter().map(|&t| t / horizon));
        }
        Scenario::Type2 => c.extend_from_slice(&profile.gamma),
    }
    c
}

/// Trajectory collection with per-trajectory conditioning vectors.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenario: Scenario,
    pub config: DatasetConfig,
    pub params: SpacecraftParams,
    /// Measured state sequences (what an estimator observes).
    pub trajectories: Vec<Trajectory>,
    pub conditioning: Vec<Vec<f64>>,
    /// Noise std used per trajectory (process and measurement).
    pub noise_stds: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn cond_dim(&self) -> usize {
        self.scenario.cond_dim()
    }

    /// Training-partition indices (the leading `n_train` trajectories).
    pub fn train_range(&self) -> std::ops::Range<usize> {
        0..self.config.n_train.min(self.len())
    }

    /// Validation-partition indices (the trailing `n_val` trajectories).
    pub fn val_range(&self) -> std::ops::Range<usize> {
        self.config.n_train.min(self.len())..self.len()
    }
}

/// Errors unless the dataset covers the expected scenario.
pub fn require_scenario(ds: &Dataset, expected: Scenario) -> Result<()> {
    if ds.scenario != expected {
        return Err(Error::Format(format!(
            "dataset covers scenario {} but {} was expected",
            ds.scenario, expected
        )));
    }
    Ok(())
}

/// Generates `n_train + n_val` trajectories. Each index draws its profile
/// and noise level from one derived stream, its initial state from another,
/// and simulates under a third, so any subset of indices can be regenerated
/// independently and the result does not depend on thread scheduling.
pub fn generate_dataset(config: &DatasetConfig, params: &SpacecraftParams) -> Result<Dataset> {
    params.validate()?;
    config.validate(params.horizon)?;
    let n = config.n_total();
    let results: Result<Vec<_>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut prof_rng = derived_rng(config.base_seed, stream::PROFILE, i as u64);
            let profile = sample_profile(config, params.horizon, &mut prof_rng)?;
            let sigma = if config.noise_std_range[0] == config.noise_std_range[1] {
                config.noise_std_range[0]
            } else {
                prof_rng.random_range(config.noise_std_range[0]..config.noise_std_range[1])
            };
            let mut init_rng = derived_rng(config.base_seed, stream::INIT_STATE, i as u64);
            let mut x0 = default_initial_state();
            if config.init_std > 0.0 {
                for j in 0..10 {
                    x0[j] += config.init_std * init_rng.sample::<f64, _>(StandardNormal);
                }
            }
            let seed = derive_seed(config.base_seed, stream::TRAJECTORY, i as u64);
            let out = simulate_full(&x0, &profile, params, sigma, seed).map_err(|e| {
                Error::Numerical(format!("trajectory {i} (seed {seed}): {e}"))
            })?;
            let c = conditioning(&profile, config.scenario, params.horizon);
            Ok((out.measured, c, sigma))
        })
        .collect();
    let mut trajectories = Vec::with_capacity(n);
    let mut conds = Vec::with_capacity(n);
    let mut noise_stds = Vec::with_capacity(n);
    for (traj, c, sigma) in results? {
        trajectories.push(traj);
        conds.push(c);
        noise_stds.push(sigma);
    }
    Ok(Dataset {
        scenario: config.scenario,
        config: config.clone(),
        params: params.clone(),
        trajectories,
        conditioning: conds,
        noise_stds,
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    scenario: Scenario,
    n_trajectories: usize,
    n_points: usize,
    state_dim: usize,
    cond_dim: usize,
    config: DatasetConfig,
    params: SpacecraftParams,
    profiles: Vec<FaultProfile>,
    seeds: Vec<u64>,
    noise_stds: Vec<f64>,
}

fn push_f64s(buf: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a dataset. Layout: magic, u64 LE header length, JSON header,
/// then per trajectory `[conditioning | states]` as little-endian f64.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let n_points = ds.trajectories.first().map_or(ds.params.n_steps() + 1, |t| t.len());
    let header = DatasetHeader {
        scenario: ds.scenario,
        n_trajectories: ds.len(),
        n_points,
        state_dim: 10,
        cond_dim: ds.cond_dim(),
        config: ds.config.clone(),
        params: ds.params.clone(),
        profiles: ds.trajectories.iter().map(|t| t.profile.clone()).collect(),
        seeds: ds.trajectories.iter().map(|t| t.seed).collect(),
        noise_stds: ds.noise_stds.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let payload_len = ds.len() * (ds.cond_dim() + n_points * 10) * 8;
    let mut buf = Vec::with_capacity(16 + header_bytes.len() + payload_len);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (traj, c) in ds.trajectories.iter().zip(&ds.conditioning) {
        if traj.len() != n_points {
            return Err(Error::Format(format!(
                "ragged dataset: trajectory has {} points, expected {n_points}",
                traj.len()
            )));
        }
        push_f64s(&mut buf, c.iter().copied());
        for x in &traj.states {
            push_f64s(&mut buf, x.iter().copied());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_f64(bytes: &[u8], pos: &mut usize) -> f64 {
    let v = f64::from_le_bytes(bytes[*pos..*pos + 8].try_into().unwrap());
    *pos += 8;
    v
}

/// Reads a dataset file written by [`save_dataset`]. Verifies magic, header
/// integrity, and exact payload length.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a dataset file (bad magic)",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::Format(format!(
            "{}: truncated header ({} bytes, need {header_len})",
            path.display(),
            bytes.len() - 16
        )));
    }
    let header: DatasetHeader = serde_json::from_slice(&bytes[16..16 + header_len])?;
    let n = header.n_trajectories;
    let per_traj = header.cond_dim + header.n_points * header.state_dim;
    let expect = 16 + header_len + n * per_traj * 8;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "{}: payload length {} does not match header ({expect} expected)",
            path.display(),
            bytes.len()
        )));
    }
    if header.state_dim != 10 {
        return Err(Error::Format(format!(
            "unsupported state dimension {}",
            header.state_dim
        )));
    }
    if header.cond_dim != header.scenario.cond_dim() {
        return Err(Error::Format(format!(
            "conditioning dimension {} inconsistent with scenario {}",
            header.cond_dim, header.scenario
        )));
    }
    if header.profiles.len() != n || header.seeds.len() != n || header.noise_stds.len() != n {
        return Err(Error::Format("per-trajectory metadata length mismatch".into()));
    }
    let dt = header.params.dt;
    let mut pos = 16 + header_len;
    let mut trajectories = Vec::with_capacity(n);
    let mut conds = Vec::with_capacity(n);
    for i in 0..n {
        let mut c = Vec::with_capacity(header.cond_dim);
        for _ in 0..header.cond_dim {
            c.push(read_f64(&bytes, &mut pos));
        }
        let mut states = Vec::with_capacity(header.n_points);
        let mut times = Vec::with_capacity(header.n_points);
        for k in 0..header.n_points {
            let mut x = State::zeros();
            for j in 0..10 {
                x[j] = read_f64(&bytes, &mut pos);
            }
            states.push(x);
            times.push(k as f64 * dt);
        }
        trajectories.push(Trajectory {
            times,
            states,
            profile: header.profiles[i].clone(),
            seed: header.seeds[i],
        });
        conds.push(c);
    }
    Ok(Dataset {
        scenario: header.scenario,
        config: header.config,
        params: header.params,
        trajectories,
        conditioning: conds,
        noise_stds: header.noise_stds,
    })
}
