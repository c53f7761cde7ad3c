//! Obstruction identification by delayed-rejection adaptive Metropolis
//! sampling of `exp(−J₂(θ) / 2σ²)` on a uniform prior box.
//!
//! `J₂` compares the model's normal stress on the upper wall against the
//! recovered wave datum on `(0, T − t_c)` and, when present, the model's
//! tangential wall velocity against its measurements on `Γ_m × (0, T)`.

use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::InversionError;
use crate::geometry::{DuctConfig, FluidDomain, Obstruction, ObstructionParams};
use crate::series::{trapezoid_weights, window_weights, TimeSeriesField};
use crate::stokes::{simulate, FlowSolverConfig};

type Result<T> = std::result::Result<T, InversionError>;

/// Returned by [`ObstacleInverseProblem::eval_j2`] when the forward model fails.
pub const FAILURE_PENALTY: f64 = 1e100;

/// Axis-aligned box `Θ = Π [lower_i, upper_i]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
}

impl PriorBox {
    pub fn new(lower: [f64; 3], upper: [f64; 3]) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    /// `[1,6]×[0.5,1.5]×[0.1,0.9]`.
    pub fn standard() -> Self {
        Self {
            lower: [1.0, 0.5, 0.1],
            upper: [6.0, 1.5, 0.9],
        }
    }

    /// `[1,6]×[0.5,2.5]×[0.1,0.9]`, for searches against a spline truth.
    pub fn wide() -> Self {
        Self {
            lower: [1.0, 0.5, 0.1],
            upper: [6.0, 2.5, 0.9],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            let (a, b) = (self.lower[i], self.upper[i]);
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(InversionError::Problem(format!("prior bounds [{a}, {b}] for θ{} are not a finite interval", i + 1)));
            }
        }
        Ok(())
    }

    pub fn contains(&self, theta: [f64; 3]) -> bool {
        (0..3).all(|i| theta[i] >= self.lower[i] && theta[i] <= self.upper[i])
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 * (self.lower[i] + self.upper[i]))
    }
}

/// The two terms of `J₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct J2Terms {
    pub stress: f64,
    pub velocity: f64,
}

impl J2Terms {
    pub fn total(&self) -> f64 {
        self.stress + self.velocity
    }
}

#[derive(Debug)]
pub struct ObstacleInverseProblem {
    pub duct: DuctConfig,
    /// Recovered datum on the wave bottom-edge abscissae and wave times.
    pub datum: TimeSeriesField,
    /// End of the stress window, `T − t_c`.
    pub t_keep: f64,
    /// Tangential wall velocity on `Γ_m × (0, T)`; `None` drops the term.
    pub velocity: Option<TimeSeriesField>,
    pub prior: PriorBox,
    pub sigma_lik: f64,
    pub flow: FlowSolverConfig,
    stress_w: (Vec<f64>, Vec<f64>),
    velocity_w: (Vec<f64>, Vec<f64>),
    cache: Mutex<HashMap<[i64; 3], J2Terms>>,
}

impl ObstacleInverseProblem {
    pub fn new(
        duct: DuctConfig,
        datum: TimeSeriesField,
        t_keep: f64,
        velocity: Option<TimeSeriesField>,
        prior: PriorBox,
        sigma_lik: f64,
        flow: FlowSolverConfig,
    ) -> Result<Self> {
        prior.validate()?;
        if !(sigma_lik > 0.0 && sigma_lik.is_finite()) {
            return Err(InversionError::Problem(format!("likelihood scale must be positive, got {sigma_lik}")));
        }
        let t_end = flow.t_end;
        let span_ok = |f: &TimeSeriesField| {
            let tol = 1e-9 * t_end.max(1.0);
            let xs_ok = f.positions.iter().all(|&x| x >= -tol && x <= duct.length + tol);
            let ts_ok = f.times.iter().all(|&t| t >= -tol && t <= t_end + tol);
            xs_ok && ts_ok && f.n_positions() >= 2 && f.n_times() >= 2
        };
        if !span_ok(&datum) {
            return Err(InversionError::Problem("datum grid outside the upper wall × (0, T)".into()));
        }
        if !(t_keep > 0.0) {
            return Err(InversionError::Problem(format!("empty stress window (0, {t_keep})")));
        }
        let stress_w = (trapezoid_weights(&datum.positions), window_weights(&datum.times, t_keep));
        let velocity_w = match &velocity {
            Some(v) if !span_ok(v) => {
                return Err(InversionError::Problem("velocity grid outside the upper wall × (0, T)".into()))
            }
            Some(v) => (trapezoid_weights(&v.positions), trapezoid_weights(&v.times)),
            None => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            duct,
            datum,
            t_keep,
            velocity,
            prior,
            sigma_lik,
            flow,
            stress_w,
            velocity_w,
            cache: Mutex::new(HashMap::new()),
        })
    }

    /// `∫ f̂²` over the stress window plus `∫ v_{m,τ}²`.
    pub fn data_energy(&self) -> f64 {
        self.data_energy_terms().total()
    }

    /// The two terms of [`data_energy`](Self::data_energy), i.e. `J₂` of a zero model.
    pub fn data_energy_terms(&self) -> J2Terms {
        J2Terms {
            stress: weighted_misfit(&self.datum, None, &self.stress_w),
            velocity: self.velocity.as_ref().map_or(0.0, |v| weighted_misfit(v, None, &self.velocity_w)),
        }
    }

    /// Both misfit terms for an arbitrary obstruction, with no caching.
    pub fn misfit_terms(&self, obstruction: Obstruction) -> crate::Result<J2Terms> {
        let domain = FluidDomain::new(self.duct, obstruction)?;
        let (sys, traj) = simulate(&domain, &self.flow)?;
        let model = sys.normal_stress_trace(&traj, &self.datum.positions, &self.datum.times)?;
        let stress = weighted_misfit(&self.datum, Some(&model), &self.stress_w);
        let velocity = match &self.velocity {
            Some(v) => {
                let model = sys.tangential_velocity_trace(&traj, &v.positions, &v.times)?;
                weighted_misfit(v, Some(&model), &self.velocity_w)
            }
            None => 0.0,
        };
        Ok(J2Terms { stress, velocity })
    }

    /// `J₂(θ)` with both terms, cached on `θ` rounded to `10⁻⁶`.
    pub fn j2_terms(&self, theta: [f64; 3]) -> crate::Result<J2Terms> {
        let key = theta.map(|v| (v * 1e6).round() as i64);
        if let Some(t) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(*t);
        }
        let terms = self.misfit_terms(Obstruction::Cosine(ObstructionParams::from_array(theta)))?;
        self.cache.lock().expect("cache poisoned").insert(key, terms);
        Ok(terms)
    }

    /// `J₂(θ)`, or [`FAILURE_PENALTY`] with a logged diagnostic when the
    /// geometry is infeasible or the forward solve fails.
    pub fn eval_j2(&self, theta: [f64; 3]) -> f64 {
        match self.j2_terms(theta) {
            Ok(t) => t.total(),
            Err(e) => {
                log::warn!("forward model failed at θ = {theta:?}: {e}");
                FAILURE_PENALTY
            }
        }
    }

    pub fn log_posterior(&self, theta: [f64; 3]) -> f64 {
        if !self.prior.contains(theta) {
            return f64::NEG_INFINITY;
        }
        -self.eval_j2(theta) / (2.0 * self.sigma_lik * self.sigma_lik)
    }

    pub fn cached_evaluations(&self) -> usize {
        self.cache.lock().expect("cache poisoned").len()
    }
}

/// `∫∫ |data − model|²` with separable trapezoid weights (`model = 0` if absent).
fn weighted_misfit(data: &TimeSeriesField, model: Option<&TimeSeriesField>, w: &(Vec<f64>, Vec<f64>)) -> f64 {
    let (wx, wt) = w;
    let mut s = 0.0;
    for (it, &a) in wt.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let d = data.row(it);
        let row: f64 = match model {
            Some(m) => d.iter().zip(m.row(it)).zip(wx).map(|((u, v), b)| b * (u - v) * (u - v)).sum(),
            None => d.iter().zip(wx).map(|(u, b)| b * u * u).sum(),
        };
        s += a * row;
    }
    s
}

/// Chain section of the run-config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainOptions {
    /// Stored samples, including `θ₀`.
    pub length: usize,
    pub burn_in: f64,
    /// Iterations between covariance updates.
    pub adapt_interval: usize,
    /// Standard-deviation ratio of the second-stage proposal to the first.
    pub dr_scale: f64,
    /// Initial proposal standard deviations (diagonal covariance).
    pub initial_sd: [f64; 3],
    pub seed: u64,
    /// A run of this many consecutive rejections triggers a warning.
    pub stall_window: usize,
}

impl Default for ChainOptions {
    fn default() -> Self {
        Self {
            length: 5000,
            burn_in: 0.2,
            adapt_interval: 100,
            dr_scale: 0.2,
            initial_sd: [0.1, 0.05, 0.02],
            seed: 0,
            stall_window: 500,
        }
    }
}

impl ChainOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(InversionError::Chain(m.to_string()));
        if self.length < 2 {
            return bad("chain length must be at least 2");
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return bad("burn-in fraction must lie in [0, 1)");
        }
        if self.adapt_interval == 0 {
            return bad("adaptation interval must be positive");
        }
        if !(self.dr_scale > 0.0 && self.dr_scale < 1.0) {
            return bad("delayed-rejection scale must lie in (0, 1)");
        }
        if self.initial_sd.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("initial proposal deviations must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorChain {
    pub samples: Vec<[f64; 3]>,
    pub log_posterior: Vec<f64>,
    /// Whether the move into sample `i` was accepted (false for `θ₀`).
    pub accepted: Vec<bool>,
    /// `(iteration, proposal covariance)` at start and after every update.
    pub covariances: Vec<(usize, [[f64; 3]; 3])>,
    pub warnings: Vec<String>,
}

const CHAIN_HEADER: &str = "# iteration theta1 theta2 theta3 log_posterior accepted";

impl PosteriorChain {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn acceptance_rate(&self) -> f64 {
        let moves = self.accepted.len().saturating_sub(1).max(1);
        self.accepted.iter().skip(1).filter(|a| **a).count() as f64 / moves as f64
    }

    /// Columnar text; floats use shortest round-trip formatting.
    pub fn to_columnar(&self) -> String {
        let mut s = String::with_capacity(64 * self.len() + 64);
        s.push_str(CHAIN_HEADER);
        s.push('\n');
        for (i, ((t, lp), a)) in self.samples.iter().zip(&self.log_posterior).zip(&self.accepted).enumerate() {
            s.push_str(&format!("{i} {:?} {:?} {:?} {:?} {}\n", t[0], t[1], t[2], lp, u8::from(*a)));
        }
        s
    }

    /// Inverse of [`to_columnar`](Self::to_columnar); covariances and warnings are not persisted.
    pub fn parse_columnar(text: &str) -> std::result::Result<Self, String> {
        let mut chain = Self {
            samples: Vec::new(),
            log_posterior: Vec::new(),
            accepted: Vec::new(),
            covariances: Vec::new(),
            warnings: Vec::new(),
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 6 {
                return Err(format!("line {}: expected 6 columns, found {}", n + 1, cols.len()));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("line {}: {e}", n + 1));
            chain.samples.push([num(cols[1])?, num(cols[2])?, num(cols[3])?]);
            chain.log_posterior.push(num(cols[4])?);
            chain.accepted.push(match cols[5] {
                "0" => false,
                "1" => true,
                other => return Err(format!("line {}: accept flag {other:?}", n + 1)),
            });
        }
        Ok(chain)
    }
}

/// Runs DRAM on `problem.log_posterior`.
pub fn dram_sample(problem: &ObstacleInverseProblem, theta0: [f64; 3], opts: &ChainOptions) -> Result<PosteriorChain> {
    if !problem.prior.contains(theta0) {
        return Err(InversionError::Chain(format!("initial point {theta0:?} lies outside the prior box")));
    }
    dram_sample_with(|t| problem.log_posterior(t), theta0, opts)
}

/// Delayed-rejection adaptive Metropolis for an arbitrary log-density.
///
/// Stage one proposes from `N(θ, C)`; after a rejection, stage two proposes
/// from `N(θ, s²C)` with `s = dr_scale` and the acceptance probability that
/// keeps the two-stage kernel reversible. Every `adapt_interval` iterations
/// `C` is reset to `2.4²/3 · (Cov(θ⁽⁰⁾..θ⁽ⁱ⁾) + εI)`.
pub fn dram_sample_with(
    mut log_target: impl FnMut([f64; 3]) -> f64,
    theta0: [f64; 3],
    opts: &ChainOptions,
) -> Result<PosteriorChain> {
    opts.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let lp0 = log_target(theta0);
    if !lp0.is_finite() {
        return Err(InversionError::Chain(format!("log-target at the initial point is {lp0}")));
    }
    let sd = 2.4f64.powi(2) / 3.0;
    let mut cov = Matrix3::from_diagonal(&Vector3::from(opts.initial_sd.map(|s| s * s)));
    let mut chol = cov.cholesky().expect("diagonal covariance is positive definite").l();
    let mut chain = PosteriorChain {
        samples: Vec::with_capacity(opts.length),
        log_posterior: Vec::with_capacity(opts.length),
        accepted: Vec::with_capacity(opts.length),
        covariances: vec![(0, to_array(&cov))],
        warnings: Vec::new(),
    };
    let mut x = Vector3::from(theta0);
    let mut lpx = lp0;
    chain.samples.push(theta0);
    chain.log_posterior.push(lp0);
    chain.accepted.push(false);

    // Running sums for the empirical covariance.
    let mut sum = x;
    let mut sum2 = x * x.transpose();
    let mut n_accept = 0usize;
    let mut rejected_run = 0usize;
    let mut warned = false;

    for i in 1..opts.length {
        let z1 = gaussian3(&mut rng);
        let y1 = x + chol * z1;
        let lp1 = log_target(y1.into());
        let a1 = accept_prob(lpx, lp1);
        let mut moved = false;
        if rng.random::<f64>() < a1 {
            x = y1;
            lpx = lp1;
            moved = true;
        } else {
            let z2 = gaussian3(&mut rng);
            let y2 = x + opts.dr_scale * (chol * z2);
            let lp2 = log_target(y2.into());
            if lp2.is_finite() {
                // q₁(y₁ | ·) under the stage-one proposal, up to a shared constant.
                let cov_inv = cov.try_inverse().unwrap_or_else(Matrix3::identity);
                let logq = |from: &Vector3<f64>| {
                    let d = y1 - from;
                    -0.5 * (d.transpose() * cov_inv * d)[(0, 0)]
                };
                let num = lp2 + logq(&y2) + (1.0 - accept_prob(lp2, lp1)).ln();
                let den = lpx + logq(&x) + (1.0 - a1).ln();
                let a2 = if num == f64::NEG_INFINITY { 0.0 } else { (num - den).exp().min(1.0) };
                if rng.random::<f64>() < a2 {
                    x = y2;
                    lpx = lp2;
                    moved = true;
                }
            }
        }
        if moved {
            n_accept += 1;
            rejected_run = 0;
        } else {
            rejected_run += 1;
            if rejected_run >= opts.stall_window && !warned {
                chain.warnings.push(format!(
                    "no move accepted in {} consecutive iterations ending at {i}",
                    opts.stall_window
                ));
                warned = true;
            }
        }
        chain.samples.push(x.into());
        chain.log_posterior.push(lpx);
        chain.accepted.push(moved);
        sum += x;
        sum2 += x * x.transpose();

        if i % opts.adapt_interval == 0 && n_accept > 3 {
            let n = (i + 1) as f64;
            let mean = sum / n;
            let emp = (sum2 - n * mean * mean.transpose()) / (n - 1.0);
            let eps = 1e-10 * cov.diagonal().max().max(f64::MIN_POSITIVE);
            let next = sd * (emp + Matrix3::identity() * eps);
            if let Some(c) = next.cholesky() {
                cov = next;
                chol = c.l();
                chain.covariances.push((i, to_array(&cov)));
            }
        }
    }
    Ok(chain)
}

fn accept_prob(lp_from: f64, lp_to: f64) -> f64 {
    if lp_to == f64::NEG_INFINITY || lp_to.is_nan() {
        0.0
    } else {
        (lp_to - lp_from).exp().min(1.0)
    }
}

fn gaussian3(rng: &mut ChaCha20Rng) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.sample(StandardNormal))
}

fn to_array(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

/// Per-parameter posterior summary after burn-in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub n_used: usize,
    pub burn_in: usize,
    pub mean: [f64; 3],
    pub sd: [f64; 3],
    pub acceptance_rate: f64,
    /// Gaussian kernel-density estimate `(θ_i, density)` per parameter.
    pub density: [Vec<[f64; 2]>; 3],
    /// `‖θ̄ − θ*‖₂` when the truth is known.
    pub distance: Option<f64>,
    pub truth: Option<[f64; 3]>,
}

const KDE_POINTS: usize = 101;

pub fn summarize_chain(chain: &PosteriorChain, burn_in: f64, truth: Option<[f64; 3]>) -> Result<ChainSummary> {
    if !(0.0..1.0).contains(&burn_in) {
        return Err(InversionError::Chain("burn-in fraction must lie in [0, 1)".into()));
    }
    let skip = (burn_in * chain.len() as f64).floor() as usize;
    if chain.len() <= skip {
        return Err(InversionError::Chain(format!("chain of {} samples is not longer than its burn-in", chain.len())));
    }
    let used = &chain.samples[skip..];
    let n = used.len() as f64;
    // Offsets from the first sample keep a constant chain exact.
    let mean: [f64; 3] = std::array::from_fn(|i| used[0][i] + used.iter().map(|s| s[i] - used[0][i]).sum::<f64>() / n);
    let sd: [f64; 3] = std::array::from_fn(|i| {
        if used.len() < 2 {
            return 0.0;
        }
        (used.iter().map(|s| (s[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    let density = std::array::from_fn(|i| kde(&used.iter().map(|s| s[i]).collect::<Vec<_>>(), sd[i]));
    let distance = truth.map(|t| (0..3).map(|i| (mean[i] - t[i]).powi(2)).sum::<f64>().sqrt());
    Ok(ChainSummary {
        n_used: used.len(),
        burn_in: skip,
        mean,
        sd,
        acceptance_rate: chain.acceptance_rate(),
        density,
        distance,
        truth,
    })
}

/// Silverman-bandwidth Gaussian KDE on an evenly spaced grid covering the samples.
fn kde(xs: &[f64], sd: f64) -> Vec<[f64; 2]> {
    let n = xs.len() as f64;
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let h = (1.06 * sd * n.powf(-0.2)).max(1e-9 * (1.0 + lo.abs().max(hi.abs())));
    let (a, b) = (lo - 3.0 * h, hi + 3.0 * h);
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    (0..KDE_POINTS)
        .map(|k| {
            let x = a + (b - a) * k as f64 / (KDE_POINTS - 1) as f64;
            let d = xs.iter().map(|&s| (-0.5 * ((x - s) / h).powi(2)).exp()).sum::<f64>() * norm;
            [x, d]
        })
        .collect()
}

/// Batch-means standard error of the chain mean of each parameter.
pub fn batch_means_error(samples: &[[f64; 3]], n_batches: usize) -> [f64; 3] {
    let b = n_batches.max(2);
    let len = samples.len() / b;
    std::array::from_fn(|i| {
        if len == 0 {
            return f64::INFINITY;
        }
        let means: Vec<f64> =
            (0..b).map(|k| samples[k * len..(k + 1) * len].iter().map(|s| s[i]).sum::<f64>() / len as f64).collect();
        let m = means.iter().sum::<f64>() / b as f64;
        let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (b - 1) as f64;
        (var / b as f64).sqrt()
    })
}
