//! Event-driven simulation of the immigration branching system and its
//! level-`n` superprocess approximations.
//!
//! Families are independent given the immigration points, so each immigrant's
//! family tree is processed depth first and its occupation added to a shared
//! grid accumulator. Only the pending stack is held in memory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{domain, Error, Result};
use crate::model::{approx_level_params, BranchingParams, PathSample, TestFunction};
use crate::motion::MotionModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SimModel {
    Branching,
    SuperApprox { level: u32 },
}

/// Choice of `F_T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Normalization {
    /// `F_T = T`.
    Linear,
    /// `F_T = T^{1/2}`.
    Sqrt,
    /// `F_T = T^{(1+alpha)/2}`.
    Moderate { alpha: f64 },
}

impl Normalization {
    pub fn factor(&self, horizon: f64) -> f64 {
        match *self {
            Normalization::Linear => horizon,
            Normalization::Sqrt => horizon.sqrt(),
            Normalization::Moderate { alpha } => horizon.powf(0.5 * (1.0 + alpha)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon: f64,
    /// Largest quadrature step; the grid uses `T / steps` with `steps` a multiple of `record`.
    pub dt: f64,
    pub box_radius: f64,
    pub model: SimModel,
    pub norm: Normalization,
    pub seed: u64,
    /// Number of unit-interval cells kept in rescaled paths.
    pub record: usize,
    /// Abort a replicate after this many particles.
    pub explosion_cap: u64,
}

impl SimConfig {
    pub fn new(horizon: f64, dt: f64, box_radius: f64, model: SimModel, norm: Normalization, seed: u64) -> Result<Self> {
        let c = Self { horizon, dt, box_radius, model, norm, seed, record: 0, explosion_cap: 10_000_000 };
        c.validate()?;
        Ok(c)
    }

    pub fn with_record(mut self, record: usize) -> Result<Self> {
        self.record = record;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            errs.push(format!("horizon T must be positive, got {}", self.horizon));
        }
        if !(self.dt > 0.0) || !(self.dt <= self.horizon / 10.0) {
            errs.push(format!("dt must lie in (0, T/10], got {}", self.dt));
        }
        if !(self.box_radius > 0.0 && self.box_radius.is_finite()) {
            errs.push(format!("box radius R must be positive, got {}", self.box_radius));
        }
        if let Normalization::Moderate { alpha } = self.norm {
            if !(alpha > 0.0 && alpha < 1.0) {
                errs.push(format!("alpha must lie in (0, 1), got {alpha}"));
            }
        }
        if let SimModel::SuperApprox { level } = self.model {
            if level == 0 {
                errs.push("approximation level must be at least 1".into());
            }
        }
        if self.explosion_cap == 0 {
            errs.push("explosion cap must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Number of quadrature steps on `[0, T]`.
    pub fn steps(&self) -> usize {
        let raw = (self.horizon / self.dt - 1e-9).ceil().max(1.0) as usize;
        let m = self.record.max(1);
        raw.div_ceil(m) * m
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    /// Cells of the rescaled paths; the full grid when `record` is 0.
    pub fn record_cells(&self) -> usize {
        if self.record == 0 {
            self.steps()
        } else {
            self.record
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        let n = self.steps();
        let h = self.step();
        (0..=n).map(|j| j as f64 * h).collect()
    }

    pub fn norm_factor(&self) -> f64 {
        self.norm.factor(self.horizon)
    }
}

/// Per-particle law for the chosen model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dynamics {
    pub lifetime_rate: f64,
    pub branch_prob: f64,
    pub mass: f64,
    pub immigration: f64,
}

impl Dynamics {
    pub fn new(model: SimModel, params: &BranchingParams) -> Result<Self> {
        Ok(match model {
            SimModel::Branching => Self { lifetime_rate: params.v(), branch_prob: params.q(), mass: 1.0, immigration: params.h() },
            SimModel::SuperApprox { level } => {
                let a = approx_level_params(params, level)?;
                Self { lifetime_rate: a.lifetime_rate, branch_prob: a.branch_prob, mass: a.mass, immigration: a.immigration }
            }
        })
    }
}

#[derive(Debug, Clone)]
struct Particle {
    birth: f64,
    position: SmallVec<[f64; 4]>,
    /// `phi` at the position, reused while the motion is degenerate.
    phi: f64,
}

/// One replicate: grid samples of `<N_s, phi>` and their cumulative integral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationPath {
    pub replicate: u64,
    pub seed: u64,
    pub step: f64,
    /// `a_j = <N_{s_j}, phi>`, mass weighted.
    pub samples: Vec<f64>,
    /// `I(s_j)` by the trapezoid rule.
    pub integral: Vec<f64>,
    pub particles: u64,
}

impl OccupationPath {
    pub fn times(&self) -> Vec<f64> {
        (0..self.samples.len()).map(|j| j as f64 * self.step).collect()
    }
}

/// Independent stream for replicate `index` of master seed `seed`.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// The immigration box `[-R, R]^d` must contain the support of `phi` up to `1e-12` relative.
pub fn check_box(phi: &TestFunction, motion: &MotionModel, r: f64) -> Result<()> {
    motion.check_dim(phi.dim())?;
    if let Some(g) = phi.gaussian() {
        for (c, reach) in g.center.iter().zip(g.reach(1e-12)) {
            if c.abs() + reach > r * (1.0 + 1e-9) {
                return Err(domain(format!(
                    "immigration box [-{r}, {r}] does not cover the test function (needs {:.4})",
                    c.abs() + reach
                )));
            }
        }
    }
    Ok(())
}

/// Simulates one replicate up to the horizon.
pub fn simulate(
    config: &SimConfig,
    params: &BranchingParams,
    motion: &MotionModel,
    phi: &TestFunction,
    replicate: u64,
) -> Result<OccupationPath> {
    config.validate()?;
    check_box(phi, motion, config.box_radius)?;
    let dyn_ = Dynamics::new(config.model, params)?;
    let mut rng = replicate_rng(config.seed, replicate);
    let d = motion.dim();
    let n = config.steps();
    let h = config.step();
    let horizon = config.horizon;
    let r = config.box_radius;
    let lifetime = Exp::new(dyn_.lifetime_rate).map_err(|e| domain(e.to_string()))?;
    let rate = dyn_.immigration * (2.0 * r).powi(d as i32) * horizon;
    let count = if rate > 0.0 { Poisson::new(rate).map_err(|e| domain(e.to_string()))?.sample(&mut rng) as u64 } else { 0 };

    let degenerate = motion.is_degenerate();
    // Degenerate motion: difference array of constant contributions.
    let mut diff = vec![0.0; n + 2];
    let mut samples = vec![0.0; n + 1];
    let mut stack: Vec<Particle> = Vec::new();
    let mut total: u64 = 0;
    for _ in 0..count {
        let birth = rng.random::<f64>() * horizon;
        let position: SmallVec<[f64; 4]> = (0..d).map(|_| (2.0 * rng.random::<f64>() - 1.0) * r).collect();
        let value = phi.eval(&position);
        stack.push(Particle { birth, position, phi: value });
        while let Some(mut p) = stack.pop() {
            total += 1;
            if total > config.explosion_cap {
                return Err(Error::Explosion { count: total, cap: config.explosion_cap });
            }
            let death = p.birth + lifetime.sample(&mut rng);
            let end = death.min(horizon);
            let first = (p.birth / h).ceil() as usize;
            let last = ((end / h).floor() as usize).min(n);
            let mut t = p.birth;
            if degenerate {
                if first <= last && p.phi != 0.0 {
                    let w = dyn_.mass * p.phi;
                    diff[first] += w;
                    diff[last + 1] -= w;
                }
            } else {
                for (j, slot) in samples.iter_mut().enumerate().take(last + 1).skip(first) {
                    let tj = j as f64 * h;
                    motion.advance(&mut p.position, tj - t, &mut rng);
                    t = tj;
                    *slot += dyn_.mass * phi.eval(&p.position);
                }
            }
            if death < horizon && rng.random::<f64>() < dyn_.branch_prob {
                if !degenerate {
                    motion.advance(&mut p.position, death - t, &mut rng);
                }
                let child = Particle { birth: death, position: p.position, phi: p.phi };
                stack.push(child.clone());
                stack.push(child);
            }
        }
    }
    if degenerate {
        let mut acc = 0.0;
        for (slot, dv) in samples.iter_mut().zip(&diff) {
            acc += dv;
            *slot = acc;
        }
    }
    let mut integral = vec![0.0; n + 1];
    for j in 0..n {
        integral[j + 1] = integral[j] + 0.5 * h * (samples[j] + samples[j + 1]);
    }
    Ok(OccupationPath { replicate, seed: config.seed, step: h, samples, integral, particles: total })
}

/// `E <N_t, phi>` on `grid`: `H <lambda, phi> (1 - e^{-rt}) / r` with `r = Q - d theta`
/// for OU and `r = Q` otherwise.
pub fn mean_curve(params: &BranchingParams, motion: &MotionModel, phi: &TestFunction, grid: &[f64]) -> Result<Vec<f64>> {
    let r = decay(params, motion)?;
    let c = params.h() * phi.integral();
    Ok(grid.iter().map(|t| c * -(-r * t).exp_m1() / r).collect())
}

/// `M(t) = int_0^t E <N_s, phi> ds` on `grid`.
pub fn mean_occupation(params: &BranchingParams, motion: &MotionModel, phi: &TestFunction, grid: &[f64]) -> Result<Vec<f64>> {
    let r = decay(params, motion)?;
    let c = params.h() * phi.integral();
    Ok(grid.iter().map(|t| c * (t + (-r * t).exp_m1() / r) / r).collect())
}

fn decay(params: &BranchingParams, motion: &MotionModel) -> Result<f64> {
    let r = motion.mass_decay_rate(params.death_rate());
    if !(r > 0.0) {
        return Err(domain(format!("mean occupation diverges: decay rate {r:.6} is not positive")));
    }
    Ok(r)
}

/// `(Y, X)` on the unit grid with `record_cells` cells:
/// `Y(t) = I(Tt)/F_T`, `X(t) = (I(Tt) - M(Tt))/F_T`.
pub fn rescale(occ: &OccupationPath, config: &SimConfig, mean_occ: &[f64]) -> Result<(PathSample, PathSample)> {
    let n = config.steps();
    if occ.integral.len() != n + 1 || mean_occ.len() != n + 1 {
        return Err(Error::GridMismatch(format!(
            "expected {} grid values, got {} (path) and {} (mean)",
            n + 1,
            occ.integral.len(),
            mean_occ.len()
        )));
    }
    let cells = config.record_cells();
    if n % cells != 0 {
        return Err(Error::GridMismatch(format!("{cells} recorded cells do not divide {n} steps")));
    }
    let stride = n / cells;
    let f = config.norm_factor();
    let y: Vec<f64> = occ.integral.iter().step_by(stride).map(|v| v / f).collect();
    let x: Vec<f64> = occ.integral.iter().zip(mean_occ).step_by(stride).map(|(v, m)| (v - m) / f).collect();
    Ok((PathSample::new(y)?, PathSample::new(x)?))
}

/// Runs `replicates` independent replicates on a pool of `workers` threads and
/// returns rescaled paths in replicate order.
pub fn simulate_ensemble(
    config: &SimConfig,
    params: &BranchingParams,
    motion: &MotionModel,
    phi: &TestFunction,
    replicates: u64,
    workers: usize,
) -> Result<Vec<(PathSample, PathSample)>> {
    if replicates == 0 {
        return Err(domain("need at least one replicate"));
    }
    let mean = mean_occupation(params, motion, phi, &config.grid())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| domain(e.to_string()))?;
    pool.install(|| {
        (0..replicates)
            .into_par_iter()
            .map(|i| {
                let occ = simulate(config, params, motion, phi, i).map_err(|e| e.context(format!("replicate {i}")))?;
                rescale(&occ, config, &mean)
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub level: u32,
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
}

fn moments(v: &[f64]) -> (f64, f64, f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    let var_se = ((m4 - var * var * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt();
    (m, (var / n).sqrt(), var, var_se)
}

/// Mean and variance of `Y(1)` for each approximation level.
pub fn superprocess_sequence(
    base: &SimConfig,
    params: &BranchingParams,
    motion: &MotionModel,
    phi: &TestFunction,
    levels: &[u32],
    replicates: u64,
    workers: usize,
) -> Result<Vec<LevelRow>> {
    if levels.is_empty() || levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(domain("levels must be a nonempty increasing list"));
    }
    if replicates < 2 {
        return Err(domain("need at least two replicates per level"));
    }
    levels
        .iter()
        .map(|&level| {
            let cfg = SimConfig { model: SimModel::SuperApprox { level }, ..base.clone() };
            let paths = simulate_ensemble(&cfg, params, motion, phi, replicates, workers)?;
            let y1: Vec<f64> = paths.iter().map(|p| p.0.last()).collect();
            let (mean, mean_se, variance, variance_se) = moments(&y1);
            Ok(LevelRow { level, mean, mean_se, variance, variance_se })
        })
        .collect()
}

/// Number of living descendants of a single particle (itself included) at each
/// of the increasing `times`, without immigration.
pub fn family_sizes<R: Rng + ?Sized>(dynamics: &Dynamics, times: &[f64], cap: u64, rng: &mut R) -> Result<Vec<u64>> {
    if times.windows(2).any(|w| w[1] < w[0]) || times.iter().any(|t| *t < 0.0) {
        return Err(domain("times must be nonnegative and increasing"));
    }
    let lifetime = Exp::new(dynamics.lifetime_rate).map_err(|e| domain(e.to_string()))?;
    let horizon = times.last().copied().unwrap_or(0.0);
    let mut alive = vec![0u64; times.len()];
    let mut stack = vec![0.0f64];
    let mut total = 0u64;
    while let Some(birth) = stack.pop() {
        total += 1;
        if total > cap {
            return Err(Error::Explosion { count: total, cap });
        }
        let death = birth + lifetime.sample(rng);
        for (slot, t) in alive.iter_mut().zip(times) {
            if birth <= *t && *t < death {
                *slot += 1;
            }
        }
        if death <= horizon && rng.random::<f64>() < dynamics.branch_prob {
            stack.push(death);
            stack.push(death);
        }
    }
    Ok(alive)
}

/// Heuristic relative bias of truncating immigration to the box: the chance
/// that a family started `margin` outside the support of `phi` reaches it,
/// `2d exp(-margin sqrt(2Q) / s)` with `s` the motion's spread.
pub fn truncation_bound(params: &BranchingParams, motion: &MotionModel, phi: &TestFunction, box_radius: f64) -> f64 {
    let spread = motion.spread();
    if spread == 0.0 {
        return 0.0;
    }
    let reach = phi
        .gaussian()
        .map(|g| g.center.iter().zip(g.reach(1e-12)).map(|(c, r)| c.abs() + r).fold(0.0, f64::max))
        .unwrap_or(0.0);
    let margin = (box_radius - reach).max(0.0);
    let d = motion.dim() as f64;
    (2.0 * d * (-margin * (2.0 * params.death_rate()).sqrt() / spread).exp()).min(1.0)
}
