//! Conditional flow-matching density model over state transitions.
//!
//! The model is a two-hidden-layer MLP with FiLM conditioning: each hidden
//! activation is modulated as `h * (1 + gamma(c)) + beta(c)` where `gamma`
//! and `beta` are learned affine maps of the conditioning vector `c`. Inputs
//! are the features
//! `[t_k/t_N, tau, x_tau, x_{k-1}, ..., x_{k-M}, c]`
//! where `x_tau` is a Gaussian-bridge interpolant between `x_k` and
//! `x_{k+1}`; the outputs parameterize a diagonal Gaussian
//! `(mu, log sigma)` over the next state `x_{k+1}`. Training minimizes the
//! Gaussian negative log-likelihood plus an MSE regularizer with Adam.
//!
//! Inputs are standardized per feature by statistics gathered over the
//! training set (one bridge draw per transition) and stored in the model;
//! the same statistics normalize the conditioning entries fed to the FiLM
//! generators, and gradients w.r.t. the raw conditioning chain through
//! them. Without this the wheel-speed features (order 1-10 rad/s) drown the
//! attitude-error signals (order 1e-3 rad) that carry most of the fault
//! information.
//!
//! All gradients are exact reverse-mode derivatives written out by hand and
//! checked against central finite differences in the test suite. Batches
//! are processed with ordered, sequential reductions, so training is
//! bit-reproducible for a fixed seed.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dynamics::State;
use crate::faultgen::{Dataset, Scenario};
use crate::{derived_rng, stream, Error, Result};

/// Clamp bounds on the predicted log standard deviation.
pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

/// Magic bytes opening every model checkpoint.
pub const MODEL_MAGIC: &[u8; 8] = b"DFDIFM01";

const STATE_DIM: usize = 10;
const OUT_DIM: usize = 2 * STATE_DIM;
const HIDDEN: [usize; 2] = [256, 256];
const MEMORY: usize = 4;

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

/// Smooth Gaussian-error-style activation (tanh form).
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn dgelu(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub sigma_bridge: f64,
    pub lambda_mse: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch: 256,
            epochs: 15,
            sigma_bridge: 0.03,
            lambda_mse: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 123,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("lr, batch, and epochs must be positive".into()));
        }
        if self.sigma_bridge < 0.0 || self.lambda_mse < 0.0 {
            return Err(Error::Config("sigma_bridge and lambda_mse must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// Bridge interpolant between two consecutive states.
#[derive(Debug, Clone)]
pub struct BridgeSample {
    pub x_tau: State,
    pub tau: f64,
    pub k: usize,
}

/// Draws `x_tau = (1-tau) x_k + tau x_k1 + sigma_bridge sqrt(tau(1-tau)) xi`
/// with `xi ~ N(0, I)`. The noise draw is always consumed so RNG accounting
/// does not depend on `tau`; at the endpoints the noise coefficient is
/// exactly zero and the interpolant equals the endpoint bitwise.
pub fn sample_bridge<R: Rng>(
    x_k: &State,
    x_k1: &State,
    tau: f64,
    sigma_bridge: f64,
    k: usize,
    rng: &mut R,
) -> BridgeSample {
    let noise_scale = sigma_bridge * (tau * (1.0 - tau)).sqrt();
    let mut x_tau = x_k * (1.0 - tau) + x_k1 * tau;
    for i in 0..STATE_DIM {
        let xi: f64 = rng.sample(StandardNormal);
        x_tau[i] += noise_scale * xi;
    }
    BridgeSample { x_tau, tau, k }
}

/// Parameter-block offsets into the flat parameter vector. Order: trunk
/// weights/bias, FiLM scale/shift generators per hidden layer, output head.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    d: usize,
    cd: usize,
    w1: usize,
    b1: usize,
    wg1: usize,
    bg1: usize,
    wb1: usize,
    bb1: usize,
    w2: usize,
    b2: usize,
    wg2: usize,
    bg2: usize,
    wb2: usize,
    bb2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

impl Layout {
    fn new(d: usize, cd: usize, hidden: [usize; 2]) -> Layout {
        let [h1, h2] = hidden;
        let mut off = 0;
        let mut take = |n: usize| {
            let at = off;
            off += n;
            at
        };
        Layout {
            d,
            cd,
            w1: take(d * h1),
            b1: take(h1),
            wg1: take(cd * h1),
            bg1: take(h1),
            wb1: take(cd * h1),
            bb1: take(h1),
            w2: take(h1 * h2),
            b2: take(h2),
            wg2: take(cd * h2),
            bg2: take(h2),
            wb2: take(cd * h2),
            bb2: take(h2),
            w3: take(h2 * OUT_DIM),
            b3: take(OUT_DIM),
            len: off,
        }
    }
}

fn mat(params: &[f64], off: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), &params[off..off + rows * cols]).unwrap()
}

fn vec1(params: &[f64], off: usize, len: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from_shape(len, &params[off..off + len]).unwrap()
}

/// FiLM-conditioned transition density model.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub scenario: Scenario,
    pub input_dim: usize,
    pub cond_dim: usize,
    pub hidden_dims: [usize; 2],
    pub memory: usize,
    pub horizon: f64,
    pub dt: f64,
    /// Flat parameter vector in the documented block order.
    pub params: Vec<f64>,
    /// Per-feature standardization statistics (identity until trained).
    pub feat_mean: Vec<f64>,
    pub feat_std: Vec<f64>,
    /// Config snapshot recorded by the last training run.
    pub train_config: Option<TrainConfig>,
}

impl FlowModel {
    /// Fresh model: trunk weights uniform on `[-1/sqrt(fan_in),
    /// 1/sqrt(fan_in)]`, FiLM generators zero (so the untrained forward pass
    /// ignores the conditioning path), `log sigma` bias -2.
    pub fn new(scenario: Scenario, horizon: f64, dt: f64, seed: u64) -> FlowModel {
        Self::with_hidden(scenario, horizon, dt, HIDDEN, seed)
    }

    /// Same initialization with custom trunk widths. The default widths suit
    /// the full pipeline; tiny ones keep derivative checks affordable.
    pub fn with_hidden(
        scenario: Scenario,
        horizon: f64,
        dt: f64,
        hidden: [usize; 2],
        seed: u64,
    ) -> FlowModel {
        let cd = scenario.cond_dim();
        let d = 2 + STATE_DIM + STATE_DIM * MEMORY + cd;
        let layout = Layout::new(d, cd, hidden);
        let mut params = vec![0.0f64; layout.len];
        let mut rng = derived_rng(seed, stream::MODEL_INIT, 0);
        let [h1, h2] = hidden;
        let mut fill = |lo: usize, n: usize, fan_in: usize, rng: &mut ChaCha8Rng| {
            let lim = 1.0 / (fan_in as f64).sqrt();
            for v in &mut params[lo..lo + n] {
                *v = rng.random_range(-lim..lim);
            }
        };
        fill(layout.w1, d * h1, d, &mut rng);
        fill(layout.b1, h1, d, &mut rng);
        fill(layout.w2, h1 * h2, h1, &mut rng);
        fill(layout.b2, h2, h1, &mut rng);
        fill(layout.w3, h2 * OUT_DIM, h2, &mut rng);
        for v in &mut params[layout.b3 + STATE_DIM..layout.b3 + OUT_DIM] {
            *v = -2.0;
        }
        FlowModel {
            scenario,
            input_dim: d,
            cond_dim: cd,
            hidden_dims: hidden,
            memory: MEMORY,
            horizon,
            dt,
            params,
            feat_mean: vec![0.0; d],
            feat_std: vec![1.0; d],
            train_config: None,
        }
    }

    fn layout(&self) -> Layout {
        Layout::new(self.input_dim, self.cond_dim, self.hidden_dims)
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// Normalized copies of a raw feature batch and conditioning batch.
    fn normalize(&self, x: &Array2<f64>, c: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let d = self.input_dim;
        let cd = self.cond_dim;
        let mut xn = x.clone();
        for mut row in xn.rows_mut() {
            for j in 0..d {
                row[j] = (row[j] - self.feat_mean[j]) / self.feat_std[j];
            }
        }
        let mut cn = c.clone();
        for mut row in cn.rows_mut() {
            for j in 0..cd {
                let f = d - cd + j;
                row[j] = (row[j] - self.feat_mean[f]) / self.feat_std[f];
            }
        }
        (xn, cn)
    }

    /// Batched forward pass on raw features: returns `(mu, log_sigma)` with
    /// `log_sigma` clamped to `[-7, 2]`, one row per sample.
    pub fn forward_batch(&self, x: &Array2<f64>, c: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let cache = self.forward_cache(x, c)?;
        Ok((cache.mu, cache.s))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, features: &[f64], c: &[f64]) -> Result<([f64; STATE_DIM], [f64; STATE_DIM])> {
        let x = Array2::from_shape_vec((1, features.len()), features.to_vec())
            .map_err(|e| Error::Config(e.to_string()))?;
        let cm = Array2::from_shape_vec((1, c.len()), c.to_vec())
            .map_err(|e| Error::Config(e.to_string()))?;
        let (mu, sg) = self.forward_batch(&x, &cm)?;
        let mut m = [0.0; STATE_DIM];
        let mut s = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            m[i] = mu[(0, i)];
            s[i] = sg[(0, i)];
        }
        Ok((m, s))
    }

    fn forward_cache(&self, x: &Array2<f64>, c: &Array2<f64>) -> Result<Cache> {
        if x.ncols() != self.input_dim {
            return Err(Error::Config(format!(
                "feature dimension {} does not match input_dim {}",
                x.ncols(),
                self.input_dim
            )));
        }
        if c.ncols() != self.cond_dim || c.nrows() != x.nrows() {
            return Err(Error::Config(format!(
                "conditioning batch {}x{} does not match features ({} rows, cond_dim {})",
                c.nrows(),
                c.ncols(),
                x.nrows(),
                self.cond_dim
            )));
        }
        let l = self.layout();
        let p = &self.params;
        let [h1, h2] = self.hidden_dims;
        let (xn, cn) = self.normalize(x, c);
        let z1 = xn.dot(&mat(p, l.w1, l.d, h1)) + vec1(p, l.b1, h1);
        let g1 = cn.dot(&mat(p, l.wg1, l.cd, h1)) + vec1(p, l.bg1, h1);
        let e1 = cn.dot(&mat(p, l.wb1, l.cd, h1)) + vec1(p, l.bb1, h1);
        let m1 = &z1 * &(1.0 + &g1) + &e1;
        let a1 = m1.mapv(gelu);
        let z2 = a1.dot(&mat(p, l.w2, h1, h2)) + vec1(p, l.b2, h2);
        let g2 = cn.dot(&mat(p, l.wg2, l.cd, h2)) + vec1(p, l.bg2, h2);
        let e2 = cn.dot(&mat(p, l.wb2, l.cd, h2)) + vec1(p, l.bb2, h2);
        let m2 = &z2 * &(1.0 + &g2) + &e2;
        let a2 = m2.mapv(gelu);
        let o = a2.dot(&mat(p, l.w3, h2, OUT_DIM)) + vec1(p, l.b3, OUT_DIM);
        let mu = o.slice(s![.., ..STATE_DIM]).to_owned();
        let s_raw = o.slice(s![.., STATE_DIM..]).to_owned();
        let sc = s_raw.mapv(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX));
        if mu.iter().any(|v| !v.is_finite()) || sc.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite activations in forward pass".into()));
        }
        Ok(Cache {
            xn,
            cn,
            z1,
            g1,
            m1,
            a1,
            z2,
            g2,
            m2,
            a2,
            s_raw,
            s: sc,
            mu,
        })
    }
}

struct Cache {
    xn: Array2<f64>,
    cn: Array2<f64>,
    z1: Array2<f64>,
    g1: Array2<f64>,
    m1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    g2: Array2<f64>,
    m2: Array2<f64>,
    a2: Array2<f64>,
    s_raw: Array2<f64>,
    s: Array2<f64>,
    mu: Array2<f64>,
}

/// Feature vector `[t_k/t_N, tau, x_tau, x_{k-1..k-M}, c]`; history indices
/// below zero are left-padded with the first state.
pub fn build_features(
    states: &[State],
    k: usize,
    x_tau: &State,
    tau: f64,
    c: &[f64],
    horizon: f64,
    dt: f64,
    memory: usize,
) -> Vec<f64> {
    let d = 2 + STATE_DIM + STATE_DIM * memory + c.len();
    let mut f = Vec::with_capacity(d);
    f.push(k as f64 * dt / horizon);
    f.push(tau);
    f.extend(x_tau.iter());
    for j in 1..=memory {
        let idx = k.saturating_sub(j);
        f.extend(states[idx].iter());
    }
    f.extend_from_slice(c);
    f
}

/// Diagonal-Gaussian negative log-likelihood up to the additive constant
/// `(n/2) log 2 pi`: `0.5 sum_l [(x_l - mu_l)^2 e^{-2 log sigma_l} +
/// 2 log sigma_l]`.
pub fn nll_loss(mu: &[f64], log_sigma: &[f64], x_next: &[f64]) -> f64 {
    assert!(mu.len() == log_sigma.len() && mu.len() == x_next.len());
    let mut total = 0.0;
    for i in 0..mu.len() {
        let r = x_next[i] - mu[i];
        total += 0.5 * (r * r * (-2.0 * log_sigma[i]).exp() + 2.0 * log_sigma[i]);
    }
    total
}

/// Gradient bundle: flat parameter gradient plus per-sample gradient w.r.t.
/// the raw conditioning entries.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub cond: Array2<f64>,
}

/// Loss and exact reverse-mode gradients of
/// `nll + lambda_mse * ||x_next - mu||^2` over a batch. With `mean_reduce`
/// the batch mean is taken (training); otherwise the sum (trajectory
/// scoring). The conditioning gradient combines the FiLM path and the
/// direct feature-tail path and is expressed w.r.t. the raw (unnormalized)
/// conditioning values.
pub fn loss_and_gradients(
    model: &FlowModel,
    x: &Array2<f64>,
    c: &Array2<f64>,
    y: &Array2<f64>,
    lambda_mse: f64,
    mean_reduce: bool,
) -> Result<(f64, Gradients)> {
    let cache = model.forward_cache(x, c)?;
    let b = x.nrows();
    let l = model.layout();
    let p = &model.params;
    let [h1, h2] = model.hidden_dims;

    let r = y - &cache.mu;
    let es = cache.s.mapv(|v| (-2.0 * v).exp());
    let nll_terms = 0.5 * (&(&r * &r) * &es + 2.0 * &cache.s);
    let loss_vec = nll_terms.sum_axis(Axis(1)) + lambda_mse * (&r * &r).sum_axis(Axis(1));
    let scale = if mean_reduce { 1.0 / b as f64 } else { 1.0 };
    let loss = loss_vec.sum() * scale;
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite training loss".into()));
    }

    let dmu = (-&r * &es - 2.0 * lambda_mse * &r) * scale;
    let interior = cache
        .s_raw
        .mapv(|v| if v > LOG_SIGMA_MIN && v < LOG_SIGMA_MAX { 1.0 } else { 0.0 });
    let ds = (1.0 - &(&r * &r) * &es) * scale * &interior;
    let mut dout = Array2::zeros((b, OUT_DIM));
    dout.slice_mut(s![.., ..STATE_DIM]).assign(&dmu);
    dout.slice_mut(s![.., STATE_DIM..]).assign(&ds);

    let mut grads = vec![0.0f64; l.len];
    let mut write = |off: usize, values: &[f64]| {
        grads[off..off + values.len()].copy_from_slice(values);
    };

    let g_w3 = cache.a2.t().dot(&dout);
    write(l.w3, g_w3.as_slice().unwrap());
    write(l.b3, dout.sum_axis(Axis(0)).as_slice().unwrap());

    let da2 = dout.dot(&mat(p, l.w3, h2, OUT_DIM).t());
    let dm2 = &da2 * &cache.m2.mapv(dgelu);
    let dz2 = &dm2 * &(1.0 + &cache.g2);
    let dm2z2 = &dm2 * &cache.z2;
    write(l.w2, cache.a1.t().dot(&dz2).as_slice().unwrap());
    write(l.b2, dz2.sum_axis(Axis(0)).as_slice().unwrap());
    write(l.wg2, cache.cn.t().dot(&dm2z2).as_slice().unwrap());
    write(l.bg2, dm2z2.sum_axis(Axis(0)).as_slice().unwrap());
    write(l.wb2, cache.cn.t().dot(&dm2).as_slice().unwrap());
    write(l.bb2, dm2.sum_axis(Axis(0)).as_slice().unwrap());
    let mut dc = dm2z2.dot(&mat(p, l.wg2, l.cd, h2).t()) + dm2.dot(&mat(p, l.wb2, l.cd, h2).t());

    let da1 = dz2.dot(&mat(p, l.w2, h1, h2).t());
    let dm1 = &da1 * &cache.m1.mapv(dgelu);
    let dz1 = &dm1 * &(1.0 + &cache.g1);
    let dm1z1 = &dm1 * &cache.z1;
    write(l.w1, cache.xn.t().dot(&dz1).as_slice().unwrap());
    write(l.b1, dz1.sum_axis(Axis(0)).as_slice().unwrap());
    write(l.wg1, cache.cn.t().dot(&dm1z1).as_slice().unwrap());
    write(l.bg1, dm1z1.sum_axis(Axis(0)).as_slice().unwrap());
    write(l.wb1, cache.cn.t().dot(&dm1).as_slice().unwrap());
    write(l.bb1, dm1.sum_axis(Axis(0)).as_slice().unwrap());
    dc = dc + dm1z1.dot(&mat(p, l.wg1, l.cd, h1).t()) + dm1.dot(&mat(p, l.wb1, l.cd, h1).t());

    let dxn = dz1.dot(&mat(p, l.w1, l.d, h1).t());
    let mut cond = dc + dxn.slice(s![.., l.d - l.cd..]);
    // chain through the standardization of the conditioning entries
    for mut row in cond.rows_mut() {
        for j in 0..l.cd {
            row[j] /= model.feat_std[l.d - l.cd + j];
        }
    }
    Ok((loss, Gradients { params: grads, cond }))
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Adam {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One bias-corrected update step in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert!(params.len() == self.m.len() && grads.len() == self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Per-epoch loss history. `val_loss` is empty when the dataset has no
/// validation partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

fn check_dataset_model(ds: &Dataset, model: &FlowModel) -> Result<usize> {
    if ds.scenario != model.scenario {
        return Err(Error::Config(format!(
            "dataset scenario {} does not match model scenario {}",
            ds.scenario, model.scenario
        )));
    }
    if (ds.params.dt - model.dt).abs() > 1e-12 || (ds.params.horizon - model.horizon).abs() > 1e-9 {
        return Err(Error::Config(
            "dataset grid (dt, horizon) does not match the model".into(),
        ));
    }
    let n_points = ds
        .trajectories
        .first()
        .map(|t| t.len())
        .ok_or_else(|| Error::Config("dataset is empty".into()))?;
    if n_points < 2 {
        return Err(Error::Config("trajectories need at least one transition".into()));
    }
    Ok(n_points - 1)
}

/// One pass over the training partition: per-feature mean/std with one
/// bridge draw per transition, from a dedicated stream. The resulting
/// statistics are stored in the model and applied by every later forward
/// pass.
fn compute_feature_stats(
    model: &mut FlowModel,
    ds: &Dataset,
    n_trans: usize,
    cfg: &TrainConfig,
) -> Result<()> {
    let d = model.input_dim;
    let mut s1 = vec![0.0f64; d];
    let mut s2 = vec![0.0f64; d];
    let mut count = 0usize;
    let mut rng = derived_rng(cfg.seed, stream::FEATURE_STATS, 0);
    for ti in ds.train_range() {
        let states = &ds.trajectories[ti].states;
        let c = &ds.conditioning[ti];
        for k in 0..n_trans {
            let tau: f64 = rng.random();
            let bridge = sample_bridge(&states[k], &states[k + 1], tau, cfg.sigma_bridge, k, &mut rng);
            let f = build_features(
                states,
                k,
                &bridge.x_tau,
                tau,
                c,
                model.horizon,
                model.dt,
                model.memory,
            );
            for (j, v) in f.iter().enumerate() {
                s1[j] += v;
                s2[j] += v * v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config("training partition is empty".into()));
    }
    let n = count as f64;
    for j in 0..d {
        let mean = s1[j] / n;
        let var = (s2[j] / n - mean * mean).max(0.0);
        model.feat_mean[j] = mean;
        model.feat_std[j] = var.sqrt().max(1e-8);
    }
    Ok(())
}

fn assemble_batch(
    ds: &Dataset,
    ids: &[(u32, u32)],
    model: &FlowModel,
    sigma_bridge: f64,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let b = ids.len();
    let mut x = Array2::zeros((b, model.input_dim));
    let mut c = Array2::zeros((b, model.cond_dim));
    let mut y = Array2::zeros((b, STATE_DIM));
    for (row, &(ti, k)) in ids.iter().enumerate() {
        let (ti, k) = (ti as usize, k as usize);
        let states = &ds.trajectories[ti].states;
        let cond = &ds.conditioning[ti];
        let tau: f64 = rng.random();
        let bridge = sample_bridge(&states[k], &states[k + 1], tau, sigma_bridge, k, rng);
        let f = build_features(
            states,
            k,
            &bridge.x_tau,
            tau,
            cond,
            model.horizon,
            model.dt,
            model.memory,
        );
        for (j, v) in f.iter().enumerate() {
            x[(row, j)] = *v;
        }
        for (j, v) in cond.iter().enumerate() {
            c[(row, j)] = *v;
        }
        for j in 0..STATE_DIM {
            y[(row, j)] = states[k + 1][j];
        }
    }
    (x, c, y)
}

/// Trains the model in place with Adam. Each epoch shuffles all
/// (trajectory, transition) pairs with a per-epoch derived stream, draws one
/// `tau` and one bridge noise vector per sample from another, and performs
/// one update per batch (final partial batch included). Feature statistics
/// are computed once before the first epoch. Validation loss (when a
/// validation partition exists) uses its own per-epoch stream.
pub fn train(model: &mut FlowModel, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    let n_trans = check_dataset_model(ds, model)?;
    compute_feature_stats(model, ds, n_trans, cfg)?;
    let canonical: Vec<(u32, u32)> = ds
        .train_range()
        .flat_map(|ti| (0..n_trans).map(move |k| (ti as u32, k as u32)))
        .collect();
    if canonical.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let layout_len = model.params.len();
    let mut adam = Adam::new(layout_len, cfg.beta1, cfg.beta2, cfg.eps);
    let mut history = TrainHistory {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_loss: Vec::new(),
    };
    let val_ids: Vec<(u32, u32)> = ds
        .val_range()
        .flat_map(|ti| (0..n_trans).map(move |k| (ti as u32, k as u32)))
        .collect();
    for epoch in 0..cfg.epochs {
        let mut ids = canonical.clone();
        let mut shuffle_rng = derived_rng(cfg.seed, stream::EPOCH_SHUFFLE, epoch as u64);
        ids.shuffle(&mut shuffle_rng);
        let mut bridge_rng = derived_rng(cfg.seed, stream::EPOCH_BRIDGE, epoch as u64);
        let mut total = 0.0;
        let mut n_batches = 0usize;
        for (bi, chunk) in ids.chunks(cfg.batch).enumerate() {
            let (x, c, y) = assemble_batch(ds, chunk, model, cfg.sigma_bridge, &mut bridge_rng);
            let (loss, grads) =
                loss_and_gradients(model, &x, &c, &y, cfg.lambda_mse, true).map_err(|e| {
                    Error::Numerical(format!(
                        "epoch {epoch}, batch {bi} (first trajectory seed {}): {e}",
                        ds.trajectories[chunk[0].0 as usize].seed
                    ))
                })?;
            adam.step(&mut model.params, &grads.params, cfg.lr);
            total += loss;
            n_batches += 1;
        }
        history.train_loss.push(total / n_batches as f64);
        if !val_ids.is_empty() {
            let mut val_rng = derived_rng(cfg.seed, stream::VALIDATION, epoch as u64);
            let mut vtotal = 0.0;
            for chunk in val_ids.chunks(cfg.batch) {
                let (x, c, y) = assemble_batch(ds, chunk, model, cfg.sigma_bridge, &mut val_rng);
                let (loss, _) = loss_and_gradients(model, &x, &c, &y, cfg.lambda_mse, false)?;
                vtotal += loss;
            }
            history.val_loss.push(vtotal / val_ids.len() as f64);
        }
    }
    model.train_config = Some(cfg.clone());
    Ok(history)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    scenario: Scenario,
    input_dim: usize,
    cond_dim: usize,
    hidden_dims: [usize; 2],
    memory: usize,
    horizon: f64,
    dt: f64,
    n_params: usize,
    train_config: Option<TrainConfig>,
}

/// Writes a checkpoint: magic, u64 LE header length, JSON header, then the
/// parameter vector, feature means, and feature stds as little-endian f64.
pub fn save_model(model: &FlowModel, path: &Path) -> Result<()> {
    let header = ModelHeader {
        scenario: model.scenario,
        input_dim: model.input_dim,
        cond_dim: model.cond_dim,
        hidden_dims: model.hidden_dims,
        memory: model.memory,
        horizon: model.horizon,
        dt: model.dt,
        n_params: model.params.len(),
        train_config: model.train_config.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut buf =
        Vec::with_capacity(16 + header_bytes.len() + (model.params.len() + 2 * model.input_dim) * 8);
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for v in model.params.iter().chain(&model.feat_mean).chain(&model.feat_std) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_model`]; round-trip is bit-exact.
pub fn load_model(path: &Path) -> Result<FlowModel> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::Format(format!("{}: truncated header", path.display())));
    }
    let header: ModelHeader = serde_json::from_slice(&bytes[16..16 + header_len])?;
    if header.memory != MEMORY || header.hidden_dims.iter().any(|&h| h == 0) {
        return Err(Error::Format("unsupported model architecture in header".into()));
    }
    let expect_layout = Layout::new(header.input_dim, header.cond_dim, header.hidden_dims);
    if header.n_params != expect_layout.len {
        return Err(Error::Format(format!(
            "parameter count {} does not match architecture ({} expected)",
            header.n_params, expect_layout.len
        )));
    }
    if header.cond_dim != header.scenario.cond_dim()
        || header.input_dim != 2 + STATE_DIM + STATE_DIM * header.memory + header.cond_dim
    {
        return Err(Error::Format("inconsistent model dimensions in header".into()));
    }
    let n_floats = header.n_params + 2 * header.input_dim;
    let expect_len = 16 + header_len + n_floats * 8;
    if bytes.len() != expect_len {
        return Err(Error::Format(format!(
            "{}: payload length {} does not match header ({expect_len} expected)",
            path.display(),
            bytes.len()
        )));
    }
    let mut floats = Vec::with_capacity(n_floats);
    let mut pos = 16 + header_len;
    for _ in 0..n_floats {
        floats.push(f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()));
        pos += 8;
    }
    let params = floats[..header.n_params].to_vec();
    let feat_mean = floats[header.n_params..header.n_params + header.input_dim].to_vec();
    let feat_std = floats[header.n_params + header.input_dim..].to_vec();
    Ok(FlowModel {
        scenario: header.scenario,
        input_dim: header.input_dim,
        cond_dim: header.cond_dim,
        hidden_dims: header.hidden_dims,
        memory: header.memory,
        horizon: header.horizon,
        dt: header.dt,
        params,
        feat_mean,
        feat_std,
        train_config: header.train_config,
    })
}
