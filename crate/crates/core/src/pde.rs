//! Solvers for the one-particle equations.
//!
//! All time-dependent solvers work with the reduced unknown
//! `w(x, tau) = v(x, t0 - tau, t0)`: the value after `tau` units of remaining
//! horizon, which satisfies
//!
//! ```text
//! w(tau) = int_0^tau T^Q_{tau-s} [ g(w(s), Psi(., t0 - s)) ] ds
//! ```
//!
//! with `g = Psi (1 + w) + Vq w^2` (branching), `Psi + Vq w^2` (super) or
//! `Psi - Vq w^2` (the minus equation). Time integrals use an exponentially
//! fitted trapezoid rule, so the discrete operator `K` is positive and
//! satisfies `||K f||_inf <= ||f||_inf / Q` exactly, like its continuous
//! counterpart.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::{derive_constants, BranchingParams, MeasureOnUnit, Model, TestFunction};
use crate::motion::{check_threshold, poisson_weights, MotionKind, MotionModel};
use crate::quad;

/// Uniform grid on a line, or the single point used by the degenerate oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    nodes: Vec<f64>,
    /// Lebesgue weight of one node: `dx` on a line, `1` on the point.
    weight: f64,
    point: bool,
}

impl SpatialGrid {
    pub fn point() -> Self {
        Self { nodes: vec![0.0], weight: 1.0, point: true }
    }

    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) || n < 3 {
            return Err(domain(format!("grid needs lo < hi and at least 3 nodes, got [{lo}, {hi}] with {n}")));
        }
        let dx = (hi - lo) / (n - 1) as f64;
        Ok(Self { nodes: (0..n).map(|i| lo + i as f64 * dx).collect(), weight: dx, point: false })
    }

    /// Grid centred on a 1-d test function, wide enough that the potential of
    /// the motion has decayed by about `exp(-reach)` at the edges.
    pub fn around(phi: &TestFunction, motion: &MotionModel, q: f64, dx: f64, reach: f64) -> Result<Self> {
        let g = phi
            .gaussian()
            .ok_or_else(|| Error::Unsupported("automatic grid needs a Gaussian test function".into()))?;
        if g.dim() != 1 {
            return Err(Error::Unsupported("field solvers work on one-dimensional grids".into()));
        }
        let core = g.reach(1e-13)[0];
        let spread = motion.spread();
        let margin = if spread > 0.0 { reach * spread / (2.0 * q).sqrt() } else { 0.0 };
        let half = core + margin;
        let n = (2.0 * half / dx).ceil() as usize + 1;
        let c = g.center[0];
        Self::uniform(c - half, c + half, n.max(3))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn is_point(&self) -> bool {
        self.point
    }

    /// `<lambda, f>` by the node rule.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        self.weight * f.iter().sum::<f64>()
    }
}

/// Substochastic transition matrix stored as contiguous row bands.
#[derive(Debug, Clone)]
enum Kernel {
    Identity,
    Banded { starts: Vec<usize>, rows: Vec<Vec<f64>> },
}

impl Kernel {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Kernel::Identity => out.copy_from_slice(x),
            Kernel::Banded { starts, rows } => {
                for (i, (s, row)) in starts.iter().zip(rows).enumerate() {
                    out[i] = row.iter().zip(&x[*s..]).map(|(a, b)| a * b).sum();
                }
            }
        }
    }

    fn dense(&self, n: usize) -> DMatrix<f64> {
        match self {
            Kernel::Identity => DMatrix::identity(n, n),
            Kernel::Banded { starts, rows } => {
                let mut m = DMatrix::zeros(n, n);
                for (i, (s, row)) in starts.iter().zip(rows).enumerate() {
                    for (k, v) in row.iter().enumerate() {
                        m[(i, s + k)] = *v;
                    }
                }
                m
            }
        }
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Adds `weight` times the law `N(mean, std^2)` discretised onto the grid: the
/// mean is split linearly between neighbouring nodes and each part is spread by
/// cell-integrated Gaussian masses. Mass beyond the ends stays in the edge cells.
fn deposit(row: &mut [f64], x0: f64, dx: f64, mean: f64, std: f64, weight: f64) {
    let n = row.len();
    let pos = ((mean - x0) / dx).clamp(0.0, (n - 1) as f64);
    let a = (pos.floor() as usize).min(n - 1);
    let frac = pos - a as f64;
    let parts = [(a, 1.0 - frac), ((a + 1).min(n - 1), frac)];
    for (node, w) in parts {
        if w <= 0.0 {
            continue;
        }
        let w = w * weight;
        if std <= 1e-3 * dx {
            row[node] += w;
            continue;
        }
        let r = dx / std;
        let span = ((40.0 / r).ceil() as usize).max(1);
        let lo = node.saturating_sub(span);
        let hi = (node + span).min(n - 1);
        // cdf at the upper edge of cell j, relative to the node.
        let upper = |j: usize| normal_cdf(((j as f64 - node as f64) + 0.5) * r);
        let mut prev = if lo == 0 { 0.0 } else { upper(lo - 1) };
        for (j, cell) in row.iter_mut().enumerate().take(hi + 1).skip(lo) {
            let cur = if j == n - 1 { 1.0 } else { upper(j) };
            *cell += w * (cur - prev);
            prev = cur;
        }
    }
}

fn build_kernel(motion: &MotionModel, grid: &SpatialGrid, t: f64) -> Kernel {
    if motion.is_degenerate() || t == 0.0 {
        return Kernel::Identity;
    }
    let nodes = grid.nodes();
    let (n, x0, dx) = (nodes.len(), nodes[0], grid.weight());
    let components: Vec<(f64, f64, f64)> = match motion.kind() {
        MotionKind::Degenerate => unreachable!(),
        MotionKind::Brownian { sigma } => vec![(1.0, 1.0, sigma * t.sqrt())],
        MotionKind::OrnsteinUhlenbeck { theta, sigma } => {
            let s = sigma * (-(-2.0 * theta * t).exp_m1() / (2.0 * theta)).sqrt();
            vec![(1.0, (-theta * t).exp(), s)]
        }
        MotionKind::CompoundPoisson { rate, jump_std } => poisson_weights(rate * t)
            .into_iter()
            .filter(|e| e.1 > 1e-18)
            .map(|(k, w)| (w, 1.0, jump_std * (k as f64).sqrt()))
            .collect(),
    };
    let mut starts = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    let mut row = vec![0.0; n];
    for &xi in nodes {
        row.iter_mut().for_each(|v| *v = 0.0);
        for &(w, scale, std) in &components {
            deposit(&mut row, x0, dx, xi * scale, std, w);
        }
        let first = row.iter().position(|v| *v > 1e-18).unwrap_or(0);
        let last = row.iter().rposition(|v| *v > 1e-18).unwrap_or(0);
        starts.push(first);
        rows.push(row[first..=last.max(first)].to_vec());
    }
    Kernel::Banded { starts, rows }
}

#[derive(Debug, Clone)]
enum Potential {
    Scalar(f64),
    Dense(DMatrix<f64>),
}

impl Potential {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Potential::Scalar(c) => x.iter().map(|v| c * v).collect(),
            Potential::Dense(m) => (m * DVector::from_column_slice(x)).as_slice().to_vec(),
        }
    }

    fn matrix(&self, n: usize) -> DMatrix<f64> {
        match self {
            Potential::Scalar(c) => DMatrix::identity(n, n) * *c,
            Potential::Dense(m) => m.clone(),
        }
    }
}

/// Everything the solvers need about one setting: model, constants, motion,
/// grid and the sampled test function. Transition matrices are cached and
/// shared between clones.
#[derive(Debug, Clone)]
pub struct Problem {
    model: Model,
    params: BranchingParams,
    motion: MotionModel,
    grid: SpatialGrid,
    phi: Vec<f64>,
    phi_sup: f64,
    kernels: Arc<Mutex<HashMap<u64, Arc<Kernel>>>>,
    potential: Arc<OnceLock<Arc<Potential>>>,
}

impl Problem {
    pub fn new(model: Model, params: BranchingParams, motion: MotionModel, grid: SpatialGrid, phi: &TestFunction) -> Result<Self> {
        let samples = if grid.is_point() {
            vec![phi.sup_norm()]
        } else {
            if phi.dim() != 1 {
                return Err(Error::Unsupported("field solvers work on one-dimensional grids".into()));
            }
            grid.nodes().iter().map(|x| phi.eval(&[*x])).collect()
        };
        Self::from_samples(model, params, motion, grid, samples, phi.sup_norm())
    }

    /// The 0-d oracle: degenerate motion, one point, `phi = 1`.
    pub fn point(model: Model, params: BranchingParams) -> Self {
        Self::from_samples(model, params, MotionModel::degenerate(1), SpatialGrid::point(), vec![1.0], 1.0)
            .expect("point problem is always valid")
    }

    pub fn from_samples(
        model: Model,
        params: BranchingParams,
        motion: MotionModel,
        grid: SpatialGrid,
        phi: Vec<f64>,
        phi_sup: f64,
    ) -> Result<Self> {
        if grid.is_point() && !motion.is_degenerate() {
            return Err(Error::Unsupported("the point grid only supports degenerate motion".into()));
        }
        if !grid.is_point() && motion.dim() != 1 {
            return Err(Error::Unsupported("field solvers work on one-dimensional grids".into()));
        }
        if phi.len() != grid.len() {
            return Err(Error::GridMismatch(format!("{} samples for {} nodes", phi.len(), grid.len())));
        }
        if phi.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(domain("test function samples must be finite and nonnegative"));
        }
        Ok(Self {
            model,
            params,
            motion,
            grid,
            phi,
            phi_sup,
            kernels: Arc::new(Mutex::new(HashMap::new())),
            potential: Arc::new(OnceLock::new()),
        })
    }

    /// Same setting for the other equation; caches are shared.
    pub fn with_model(&self, model: Model) -> Self {
        Self { model, ..self.clone() }
    }

    pub fn model(&self) -> Model {
        self.model
    }

    pub fn params(&self) -> &BranchingParams {
        &self.params
    }

    pub fn motion(&self) -> &MotionModel {
        &self.motion
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn phi_sup(&self) -> f64 {
        self.phi_sup
    }

    pub fn q0(&self) -> f64 {
        self.model.threshold(&self.params)
    }

    /// Largest admissible tilt `Q0 / ||phi||_inf`.
    pub fn theta_max(&self) -> f64 {
        self.q0() / self.phi_sup
    }

    fn death_rate(&self) -> f64 {
        self.params.death_rate()
    }

    /// Norm guard: no iterate below threshold can exceed `Q/(Vq)`.
    fn guard(&self) -> f64 {
        let vq = self.params.vq();
        if vq > 0.0 {
            self.death_rate() / vq
        } else {
            1e12
        }
    }

    fn kernel(&self, t: f64) -> Arc<Kernel> {
        let key = t.to_bits();
        let mut cache = self.kernels.lock().expect("kernel cache poisoned");
        cache.entry(key).or_insert_with(|| Arc::new(build_kernel(&self.motion, &self.grid, t))).clone()
    }

    fn potential(&self) -> Arc<Potential> {
        self.potential.get_or_init(|| Arc::new(self.build_potential())).clone()
    }

    fn build_potential(&self) -> Potential {
        let q = self.death_rate();
        if self.motion.is_degenerate() {
            return Potential::Scalar(1.0 / q);
        }
        let n = self.grid.len();
        let dx = self.grid.weight();
        // Start panels at the time the motion needs to cross a cell.
        let first = (dx / self.motion.spread().max(1e-12)).powi(2).clamp(1e-8, 0.5 / q);
        let t_max = 40.0 / q;
        let cuts = quad::geometric_panels(first, t_max);
        let mut u = DMatrix::zeros(n, n);
        for w in cuts.windows(2) {
            for (t, wt) in quad::gl15().mapped(w[0], w[1]) {
                let k = build_kernel(&self.motion, &self.grid, t);
                u += k.dense(n) * (wt * (-q * t).exp());
            }
        }
        Potential::Dense(u)
    }

    /// `U^Q f` on the grid.
    pub fn apply_potential(&self, f: &[f64]) -> Vec<f64> {
        self.potential().apply(f)
    }

    pub fn integrate(&self, f: &[f64]) -> f64 {
        self.grid.integrate(f)
    }

    fn nonlinearity(&self) -> Nonlinearity {
        match self.model {
            Model::Branching => Nonlinearity::Branching,
            Model::Super => Nonlinearity::Super,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Nonlinearity {
    Branching,
    Super,
    Minus,
}

impl Nonlinearity {
    #[inline]
    fn eval(self, w: f64, psi: f64, vq: f64) -> f64 {
        match self {
            Nonlinearity::Branching => psi * (1.0 + w) + vq * w * w,
            Nonlinearity::Super => psi + vq * w * w,
            Nonlinearity::Minus => psi - vq * w * w,
        }
    }

    /// Solves `m = a + c g(m, psi)` for the root continuous in `c -> 0`.
    fn implicit(self, a: f64, c: f64, psi: f64, vq: f64) -> Option<f64> {
        let (qa, qb, qc) = match self {
            Nonlinearity::Branching => (c * vq, c * psi - 1.0, a + c * psi),
            Nonlinearity::Super => (c * vq, -1.0, a + c * psi),
            Nonlinearity::Minus => (-c * vq, -1.0, a + c * psi),
        };
        small_root(qa, qb, qc)
    }
}

/// Root of `a m^2 + b m + c = 0` that tends to `-c/b` as `a -> 0`.
fn small_root(a: f64, b: f64, c: f64) -> Option<f64> {
    if a == 0.0 {
        return Some(-c / b);
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let denom = if b <= 0.0 { -b + s } else { -b - s };
    Some(2.0 * c / denom)
}

/// Right-continuous step function `chi` on `[0, t0)` in real time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chi {
    breaks: Vec<f64>,
    values: Vec<f64>,
}

impl Chi {
    pub fn new(breaks: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breaks.len() != values.len() + 1 || values.is_empty() {
            return Err(domain("step function needs one more break than values"));
        }
        if breaks[0] != 0.0 || breaks.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(domain("step function breaks must start at 0 and increase strictly"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(domain("step function values must be finite"));
        }
        Ok(Self { breaks, values })
    }

    pub fn constant(theta: f64, t0: f64) -> Result<Self> {
        Self::new(vec![0.0, t0], vec![theta])
    }

    /// `scale * chi_nu(s / horizon)` for `s` in `[0, horizon)`.
    pub fn from_measure(nu: &MeasureOnUnit, horizon: f64, scale: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(domain("horizon must be positive"));
        }
        let pieces = nu.pieces();
        let mut breaks = vec![0.0];
        let mut values = Vec::new();
        for (a, b, v) in pieces {
            let _ = a;
            breaks.push(b * horizon);
            values.push(scale * v);
        }
        Self::new(breaks, values)
    }

    pub fn horizon(&self) -> f64 {
        *self.breaks.last().unwrap()
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn value_at(&self, s: f64) -> f64 {
        let k = self.breaks.partition_point(|b| *b <= s).saturating_sub(1);
        self.values[k.min(self.values.len() - 1)]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { breaks: self.breaks.clone(), values: self.values.iter().map(|v| c * v).collect() }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// Reduced-time grid with every jump of `chi` on a node.
#[derive(Debug, Clone)]
struct TimeGrid {
    times: Vec<f64>,
    /// `chi` on each interval (constant there).
    chi: Vec<f64>,
}

impl TimeGrid {
    fn new(chi: &Chi, max_step: f64) -> Result<Self> {
        if !(max_step > 0.0) {
            return Err(domain("time step must be positive"));
        }
        let t0 = chi.horizon();
        let mut cuts: Vec<f64> = chi.breaks.iter().map(|b| t0 - b).collect();
        cuts.reverse();
        cuts[0] = 0.0;
        let mut times = vec![0.0];
        for w in cuts.windows(2) {
            let k = ((w[1] - w[0]) / max_step - 1e-9).ceil().max(1.0) as usize;
            for j in 1..=k {
                times.push(if j == k { w[1] } else { w[0] + (w[1] - w[0]) * j as f64 / k as f64 });
            }
        }
        let chi_vals = times.windows(2).map(|w| chi.value_at(t0 - 0.5 * (w[0] + w[1]))).collect();
        Ok(Self { times, chi: chi_vals })
    }

    fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Each interval split in two, preserving `chi`.
    fn halved(&self) -> Self {
        let mut times = vec![0.0];
        let mut chi = Vec::new();
        for (k, w) in self.times.windows(2).enumerate() {
            times.push(0.5 * (w[0] + w[1]));
            times.push(w[1]);
            chi.push(self.chi[k]);
            chi.push(self.chi[k]);
        }
        Self { times, chi }
    }
}

/// Exponentially fitted trapezoid data for one step length.
#[derive(Debug, Clone)]
struct StepRule {
    decay: f64,
    left: f64,
    right: f64,
    kernel: Arc<Kernel>,
}

/// `(1 - e^{-z})/z` and `(1 - (1+z)e^{-z})/z^2`, stable near 0.
fn phi_functions(z: f64) -> (f64, f64) {
    if z < 1e-3 {
        let p1 = 1.0 - z / 2.0 + z * z / 6.0 - z * z * z / 24.0;
        let p2 = 0.5 - z / 3.0 + z * z / 8.0 - z * z * z / 30.0;
        (p1, p2)
    } else {
        let e = (-z).exp();
        ((-(-z).exp_m1()) / z, (1.0 - (1.0 + z) * e) / (z * z))
    }
}

struct Volterra<'a> {
    problem: &'a Problem,
    grid: TimeGrid,
    rules: Vec<StepRule>,
}

impl<'a> Volterra<'a> {
    fn new(problem: &'a Problem, grid: TimeGrid) -> Self {
        let q = problem.death_rate();
        let mut by_len: HashMap<u64, StepRule> = HashMap::new();
        let rules = grid
            .times
            .windows(2)
            .map(|w| {
                let dt = w[1] - w[0];
                by_len
                    .entry(dt.to_bits())
                    .or_insert_with(|| {
                        let (p1, p2) = phi_functions(q * dt);
                        let total = dt * p1;
                        let left = dt * p2;
                        StepRule { decay: (-q * dt).exp(), left, right: total - left, kernel: problem.kernel(dt) }
                    })
                    .clone()
            })
            .collect();
        Self { problem, grid, rules }
    }

    fn nx(&self) -> usize {
        self.problem.grid.len()
    }

    /// `K[f]` where `f(node, interval)` fills the integrand at `node` using the
    /// source of `interval`.
    fn apply(&self, mut integrand: impl FnMut(usize, usize, &mut [f64])) -> Vec<f64> {
        let nx = self.nx();
        let steps = self.grid.steps();
        let mut out = vec![0.0; (steps + 1) * nx];
        let mut tmp = vec![0.0; nx];
        let mut g = vec![0.0; nx];
        for k in 0..steps {
            let rule = &self.rules[k];
            integrand(k, k, &mut g);
            let (done, rest) = out.split_at_mut((k + 1) * nx);
            let cur = &done[k * nx..];
            for i in 0..nx {
                tmp[i] = rule.decay * cur[i] + rule.left * g[i];
            }
            let next = &mut rest[..nx];
            rule.kernel.apply(&tmp, next);
            integrand(k + 1, k, &mut g);
            for i in 0..nx {
                next[i] += rule.right * g[i];
            }
        }
        out
    }

    fn sweep(&self, w: &[f64], nl: Nonlinearity) -> Vec<f64> {
        let nx = self.nx();
        let vq = self.problem.params.vq();
        let phi = &self.problem.phi;
        let chi = &self.grid.chi;
        self.apply(|node, interval, g| {
            let c = chi[interval];
            let wn = &w[node * nx..(node + 1) * nx];
            for i in 0..nx {
                g[i] = nl.eval(wn[i], phi[i] * c, vq);
            }
        })
    }

    /// Solves the discrete equation node by node with a pointwise quadratic.
    fn march(&self, nl: Nonlinearity) -> Result<Vec<f64>> {
        let nx = self.nx();
        let steps = self.grid.steps();
        let vq = self.problem.params.vq();
        let phi = &self.problem.phi;
        let mut out = vec![0.0; (steps + 1) * nx];
        let mut tmp = vec![0.0; nx];
        for k in 0..steps {
            let rule = &self.rules[k];
            let c = self.grid.chi[k];
            let (done, rest) = out.split_at_mut((k + 1) * nx);
            let cur = &done[k * nx..];
            for i in 0..nx {
                tmp[i] = rule.decay * cur[i] + rule.left * nl.eval(cur[i], phi[i] * c, vq);
            }
            let next = &mut rest[..nx];
            rule.kernel.apply(&tmp, next);
            for i in 0..nx {
                next[i] = nl.implicit(next[i], rule.right, phi[i] * c, vq).ok_or(Error::Diverged {
                    iteration: k,
                    guard: self.problem.guard(),
                    value: next[i],
                })?;
            }
        }
        Ok(out)
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn sup_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Values of a reduced field `w(x_i, tau_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeField {
    grid: SpatialGrid,
    times: Vec<f64>,
    values: Vec<f64>,
}

impl SpaceTimeField {
    fn new(grid: &SpatialGrid, times: &[f64], values: Vec<f64>) -> Self {
        Self { grid: grid.clone(), times: times.to_vec(), values }
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    /// Remaining-horizon times `tau_j`, increasing from 0 to `t0`.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slice(&self, j: usize) -> &[f64] {
        let nx = self.grid.len();
        &self.values[j * nx..(j + 1) * nx]
    }

    /// Values at the full horizon.
    pub fn last(&self) -> &[f64] {
        self.slice(self.times.len() - 1)
    }

    pub fn sup_norm(&self) -> f64 {
        sup_abs(&self.values)
    }

    /// `int_0^t0 <lambda, w(tau)> dtau`, trapezoid in time.
    pub fn space_time_integral(&self) -> f64 {
        let mass: Vec<f64> = (0..self.times.len()).map(|j| self.grid.integrate(self.slice(j))).collect();
        self.times.windows(2).zip(mass.windows(2)).map(|(t, m)| 0.5 * (t[1] - t[0]) * (m[0] + m[1])).sum()
    }

    pub fn max_diff(&self, other: &SpaceTimeField) -> Result<f64> {
        if self.values.len() != other.values.len() || self.times != other.times {
            return Err(Error::GridMismatch("fields live on different grids".into()));
        }
        Ok(sup_diff(&self.values, &other.values))
    }

    /// `self <= other + slack` at every node.
    pub fn dominated_by(&self, other: &SpaceTimeField, slack: f64) -> Result<usize> {
        self.max_diff(other)?;
        Ok(self.values.iter().zip(&other.values).filter(|(a, b)| **a > **b + slack).count())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Picard,
    TimeStepping,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub scheme: Scheme,
    pub tol: f64,
    pub max_sweeps: usize,
    /// Largest time step.
    pub dt: f64,
    /// Admissible `||Psi||_inf / Q0`; `None` skips the check.
    pub threshold_limit: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { scheme: Scheme::Picard, tol: 1e-10, max_sweeps: 10_000, dt: 0.05, threshold_limit: Some(0.99) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub field: SpaceTimeField,
    pub iterations: usize,
    /// Sup-norm mismatch of the returned field against its discrete equation.
    pub residual: f64,
}

fn source_sup(problem: &Problem, chi: &Chi) -> f64 {
    problem.phi_sup * chi.sup()
}

/// Solves the branching or super equation (per `problem.model()`) for `Psi = phi chi`.
pub fn solve_v(problem: &Problem, chi: &Chi, opts: &SolveOptions) -> Result<Solution> {
    if let Some(limit) = opts.threshold_limit {
        check_threshold(problem.model, &problem.params, source_sup(problem, chi), limit)?;
    }
    let tg = TimeGrid::new(chi, opts.dt)?;
    let vol = Volterra::new(problem, tg);
    let nl = problem.nonlinearity();
    match opts.scheme {
        Scheme::Picard => picard(&vol, nl, chi.values.iter().all(|v| *v >= 0.0), opts),
        Scheme::TimeStepping => time_stepping(&vol, nl, opts),
    }
}

fn picard(vol: &Volterra, nl: Nonlinearity, monotone: bool, opts: &SolveOptions) -> Result<Solution> {
    let guard = vol.problem.guard();
    let nx = vol.nx();
    let mut w = vec![0.0; (vol.grid.steps() + 1) * nx];
    for sweep in 1..=opts.max_sweeps {
        let next = vol.sweep(&w, nl);
        let top = sup_abs(&next);
        if !(top <= guard) {
            return Err(Error::Diverged { iteration: sweep, guard, value: top });
        }
        if monotone {
            // Iterates from zero are nondecreasing for a nonnegative source.
            let drop = w.iter().zip(&next).fold(0.0f64, |m, (a, b)| m.max(a - b));
            if drop > 1e-12 * (1.0 + top) {
                return Err(Error::BoundViolation(format!("Picard iterate decreased by {drop:.3e} at sweep {sweep}")));
            }
        }
        let change = sup_diff(&w, &next);
        w = next;
        if change < opts.tol {
            let check = vol.sweep(&w, nl);
            let residual = sup_diff(&w, &check);
            if residual < opts.tol {
                return Ok(Solution { field: SpaceTimeField::new(&vol.problem.grid, &vol.grid.times, w), iterations: sweep, residual });
            }
        }
    }
    let residual = sup_diff(&w, &vol.sweep(&w, nl));
    Err(Error::NoConvergence { iterations: opts.max_sweeps, residual })
}

/// Exponential midpoint rule with an implicit half step:
/// `m = T_{D/2} w_k + (D/2) phi1 g(m)`, `w_{k+1} = T_D w_k + D phi1 P_{D/2} g(m)`.
fn time_stepping(vol: &Volterra, nl: Nonlinearity, _opts: &SolveOptions) -> Result<Solution> {
    let p = vol.problem;
    let q = p.death_rate();
    let vq = p.params.vq();
    let nx = vol.nx();
    let guard = p.guard();
    let steps = vol.grid.steps();
    let mut out = vec![0.0; (steps + 1) * nx];
    let mut half = vec![0.0; nx];
    let mut g = vec![0.0; nx];
    let mut tmp = vec![0.0; nx];
    let mut residual: f64 = 0.0;
    for k in 0..steps {
        let dt = vol.grid.times[k + 1] - vol.grid.times[k];
        let c = vol.grid.chi[k];
        let half_kernel = p.kernel(0.5 * dt);
        let full = &vol.rules[k];
        let (p1_half, _) = phi_functions(0.5 * q * dt);
        let (p1_full, _) = phi_functions(q * dt);
        let (done, rest) = out.split_at_mut((k + 1) * nx);
        let cur = &done[k * nx..];
        half_kernel.apply(cur, &mut half);
        let ch = 0.5 * dt * p1_half;
        let hd = (-0.5 * q * dt).exp();
        for i in 0..nx {
            let a = hd * half[i];
            let psi = p.phi[i] * c;
            let m = nl
                .implicit(a, ch, psi, vq)
                .ok_or(Error::Diverged { iteration: k, guard, value: a })?;
            g[i] = nl.eval(m, psi, vq);
            residual = residual.max((m - a - ch * g[i]).abs());
        }
        half_kernel.apply(&g, &mut tmp);
        let next = &mut rest[..nx];
        full.kernel.apply(cur, next);
        for i in 0..nx {
            next[i] = full.decay * next[i] + dt * p1_full * tmp[i];
            if !(next[i].abs() <= guard) {
                return Err(Error::Diverged { iteration: k, guard, value: next[i] });
            }
        }
    }
    Ok(Solution { field: SpaceTimeField::new(&p.grid, &vol.grid.times, out), iterations: steps, residual })
}

/// Mismatch of a Picard field against the same equation discretised with
/// every time step halved (the field is interpolated linearly in time).
pub fn refined_residual(problem: &Problem, chi: &Chi, field: &SpaceTimeField, dt: f64) -> Result<f64> {
    let coarse = TimeGrid::new(chi, dt)?;
    if coarse.times != field.times {
        return Err(Error::GridMismatch("field was not computed with this step".into()));
    }
    let fine = coarse.halved();
    let nx = problem.grid.len();
    let mut w = Vec::with_capacity((fine.times.len()) * nx);
    w.extend_from_slice(field.slice(0));
    for j in 0..coarse.steps() {
        let (a, b) = (field.slice(j), field.slice(j + 1));
        w.extend(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)));
        w.extend_from_slice(b);
    }
    let vol = Volterra::new(problem, fine);
    let next = vol.sweep(&w, problem.nonlinearity());
    let mut r: f64 = 0.0;
    for j in 0..=coarse.steps() {
        let (a, b) = (&w[2 * j * nx..(2 * j + 1) * nx], &next[2 * j * nx..(2 * j + 1) * nx]);
        r = r.max(sup_diff(a, b));
    }
    Ok(r)
}

/// Solution of the minus equation `w = K[Psi - Vq w^2]`, solved exactly node by node.
pub fn solve_vbar_super(problem: &Problem, chi: &Chi, dt: f64) -> Result<Solution> {
    if chi.values.iter().any(|v| *v < 0.0) {
        return Err(domain("the minus equation needs a nonnegative source"));
    }
    let vol = Volterra::new(problem, TimeGrid::new(chi, dt)?);
    let w = vol.march(Nonlinearity::Minus)?;
    let residual = sup_diff(&w, &vol.sweep(&w, Nonlinearity::Minus));
    Ok(Solution { field: SpaceTimeField::new(&problem.grid, &vol.grid.times, w), iterations: 1, residual })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    /// `K[Psi]`, the linear part.
    pub tilde_v: SpaceTimeField,
    /// `v - tilde_v`.
    pub u: SpaceTimeField,
    /// Mismatch of `u` against its own equation.
    pub residual: f64,
}

/// `tilde_v = int T^Q Psi` and `u = v - tilde_v` for a solved `v`.
pub fn tilde_v_and_split(problem: &Problem, chi: &Chi, v: &SpaceTimeField, dt: f64) -> Result<Split> {
    let vol = Volterra::new(problem, TimeGrid::new(chi, dt)?);
    if vol.grid.times != v.times {
        return Err(Error::GridMismatch("solved field was computed on another time grid".into()));
    }
    let nx = vol.nx();
    let phi = &problem.phi;
    let chis = &vol.grid.chi;
    let tv = vol.apply(|_, interval, g| {
        for i in 0..nx {
            g[i] = phi[i] * chis[interval];
        }
    });
    let u: Vec<f64> = v.values.iter().zip(&tv).map(|(a, b)| a - b).collect();
    let vq = problem.params.vq();
    let model = problem.model;
    let again = vol.apply(|node, interval, g| {
        let c = chis[interval];
        for i in 0..nx {
            let (ui, ti) = (u[node * nx + i], tv[node * nx + i]);
            let full = ui + ti;
            g[i] = match model {
                Model::Branching => phi[i] * c * full + vq * full * full,
                Model::Super => vq * full * full,
            };
        }
    });
    let residual = sup_diff(&u, &again);
    Ok(Split {
        tilde_v: SpaceTimeField::new(&problem.grid, &vol.grid.times, tv),
        u: SpaceTimeField::new(&problem.grid, &vol.grid.times, u),
        residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesTerms {
    pub terms: Vec<SpaceTimeField>,
    pub term_norms: Vec<f64>,
    pub b: Vec<f64>,
    pub d: Vec<f64>,
    /// `(Vq)^{-1} sum_n F_n`.
    pub partial_sum: SpaceTimeField,
    /// Whether the `D` bound was checked; it is only guaranteed for `Q <= 1`.
    pub d_bound_checked: bool,
}

/// `B_1 = B_2 = 1`, `B_n = sum_{k=1}^{n-1} B_k B_{n-k}`; same recursion for `D` from `D_1, D_2`.
pub fn bound_sequence(first: f64, second: f64, n: usize) -> Vec<f64> {
    let mut s = Vec::with_capacity(n);
    for k in 0..n {
        let v = match k {
            0 => first,
            1 => second,
            _ => (0..k).map(|j| s[j] * s[k - 1 - j]).sum(),
        };
        s.push(v);
    }
    s
}

/// Convolution series for the super equation: `F_1 = Vq K[Psi]`,
/// `F_n = K[sum_{l<n} F_l F_{n-l}]`, stopping early once a term is below `tol`.
pub fn series_solution_super(problem: &Problem, chi: &Chi, n_max: usize, dt: f64, tol: f64) -> Result<SeriesTerms> {
    let params = problem.params;
    check_threshold(Model::Super, &params, source_sup(problem, chi), 0.99)?;
    let vq = params.vq();
    let q = params.death_rate();
    let vol = Volterra::new(problem, TimeGrid::new(chi, dt)?);
    let nx = vol.nx();
    let phi = &problem.phi;
    let chis = &vol.grid.chi;
    let n_max = n_max.max(1);
    let b = bound_sequence(1.0, 1.0, n_max);
    let d = bound_sequence(q, q.powi(-2), n_max);
    let psi_norm = vq * source_sup(problem, chi);
    let d_checked = q <= 1.0;
    let mut terms: Vec<Vec<f64>> = Vec::new();
    let mut norms = Vec::new();
    let mut f1_norm = 0.0;
    for n in 1..=n_max {
        let term = if n == 1 {
            vol.apply(|_, interval, g| {
                for i in 0..nx {
                    g[i] = vq * phi[i] * chis[interval];
                }
            })
        } else {
            let len = terms[0].len();
            let mut s = vec![0.0; len];
            for l in 1..n {
                let (a, c) = (&terms[l - 1], &terms[n - l - 1]);
                for j in 0..len {
                    s[j] += a[j] * c[j];
                }
            }
            vol.apply(|node, _, g| g.copy_from_slice(&s[node * nx..(node + 1) * nx]))
        };
        let norm = sup_abs(&term);
        if n == 1 {
            f1_norm = norm;
        }
        let slack = 1.0 + 1e-10;
        let bb = b[n - 1] * q.powi(1 - 2 * n as i32) * psi_norm.powi(n as i32);
        if norm > bb * slack {
            return Err(Error::BoundViolation(format!("term {n}: norm {norm:.6e} exceeds B-bound {bb:.6e}")));
        }
        if d_checked {
            let db = d[n - 1] * q.powi(1 - 2 * n as i32) * f1_norm.powi(n as i32);
            if norm > db * slack {
                return Err(Error::BoundViolation(format!("term {n}: norm {norm:.6e} exceeds D-bound {db:.6e}")));
            }
        }
        terms.push(term);
        norms.push(norm);
        if norm < tol {
            break;
        }
    }
    let len = terms[0].len();
    let mut sum = vec![0.0; len];
    for t in &terms {
        for j in 0..len {
            sum[j] += t[j];
        }
    }
    sum.iter_mut().for_each(|v| *v /= vq);
    let times = &vol.grid.times;
    Ok(SeriesTerms {
        terms: terms.into_iter().map(|t| SpaceTimeField::new(&problem.grid, times, t)).collect(),
        term_norms: norms,
        b,
        d,
        partial_sum: SpaceTimeField::new(&problem.grid, times, sum),
        d_bound_checked: d_checked,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyOptions {
    pub tol: f64,
    pub max_sweeps: usize,
    /// Admissible `theta ||phi||_inf / Q0`; `None` skips the check.
    pub threshold_limit: Option<f64>,
}

impl Default for SteadyOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_sweeps: 100_000, threshold_limit: Some(1.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub theta: f64,
    pub values: Vec<f64>,
    pub iterations: usize,
    pub change: f64,
}

impl SteadyState {
    pub fn sup(&self) -> f64 {
        sup_abs(&self.values)
    }
}

fn steady_rhs(problem: &Problem, theta: f64, v: &[f64]) -> Vec<f64> {
    let vq = problem.params.vq();
    let g: Vec<f64> = match problem.model {
        Model::Branching => v.iter().zip(&problem.phi).map(|(vi, p)| theta * p * (1.0 + vi) + vq * vi * vi).collect(),
        Model::Super => v.iter().zip(&problem.phi).map(|(vi, p)| theta * p + vq * vi * vi).collect(),
    };
    problem.apply_potential(&g)
}

/// `v_phi(., theta)`, the fixed point of `v = U^Q[g(v)]`.
///
/// Monotone Picard from zero for `theta >= 0`; Newton for `theta < 0`, where the
/// iteration is no longer monotone.
pub fn steady_state(problem: &Problem, theta: f64, opts: &SteadyOptions) -> Result<SteadyState> {
    if !theta.is_finite() {
        return Err(domain("theta must be finite"));
    }
    if let Some(limit) = opts.threshold_limit {
        if theta >= 0.0 {
            let ratio = theta * problem.phi_sup / problem.q0();
            if ratio >= limit {
                return Err(Error::AboveThreshold { ratio, limit });
            }
        }
    }
    if theta < 0.0 {
        return newton(problem, theta, opts);
    }
    let guard = problem.guard();
    let n = problem.grid.len();
    let mut v = vec![0.0; n];
    for it in 1..=opts.max_sweeps {
        let next = steady_rhs(problem, theta, &v);
        let top = sup_abs(&next);
        if !(top <= guard) {
            return Err(Error::Diverged { iteration: it, guard, value: top });
        }
        let drop = v.iter().zip(&next).fold(0.0f64, |m, (a, b)| m.max(a - b));
        if drop > 1e-12 * (1.0 + top) {
            return Err(Error::BoundViolation(format!("steady iterate decreased by {drop:.3e}")));
        }
        let change = sup_diff(&v, &next);
        v = next;
        if change < opts.tol {
            return Ok(SteadyState { theta, values: v, iterations: it, change });
        }
    }
    let change = sup_diff(&v, &steady_rhs(problem, theta, &v));
    Err(Error::NoConvergence { iterations: opts.max_sweeps, residual: change })
}

fn jacobian(problem: &Problem, theta: f64, v: &[f64]) -> DMatrix<f64> {
    let n = v.len();
    let vq = problem.params.vq();
    let u = problem.potential().matrix(n);
    let gp: Vec<f64> = match problem.model {
        Model::Branching => v.iter().zip(&problem.phi).map(|(vi, p)| theta * p + 2.0 * vq * vi).collect(),
        Model::Super => v.iter().map(|vi| 2.0 * vq * vi).collect(),
    };
    let mut j = DMatrix::identity(n, n);
    for c in 0..n {
        for r in 0..n {
            j[(r, c)] -= u[(r, c)] * gp[c];
        }
    }
    j
}

fn newton(problem: &Problem, theta: f64, opts: &SteadyOptions) -> Result<SteadyState> {
    let n = problem.grid.len();
    let floor = match problem.model {
        Model::Branching => -1.0,
        Model::Super => f64::NEG_INFINITY,
    };
    // Branching solutions stay in (-1, 0]: one minus an extinction-type probability.
    let mut v: Vec<f64> =
        problem.apply_potential(&problem.phi.iter().map(|p| theta * p).collect::<Vec<_>>()).into_iter().map(|x| x.max(0.5 * floor)).collect();
    for it in 1..=200 {
        let f: Vec<f64> = v.iter().zip(steady_rhs(problem, theta, &v)).map(|(a, b)| a - b).collect();
        let j = jacobian(problem, theta, &v);
        let step = j
            .lu()
            .solve(&DVector::from_vec(f))
            .ok_or_else(|| Error::NoConvergence { iterations: it, residual: f64::NAN })?;
        let mut change: f64 = 0.0;
        for i in 0..n {
            let trial = v[i] - step[i];
            let nv = if trial > floor { trial } else { 0.5 * (v[i] + floor) };
            change = change.max((nv - v[i]).abs());
            v[i] = nv;
        }
        if change < opts.tol {
            return Ok(SteadyState { theta, values: v, iterations: it, change });
        }
    }
    let change = sup_diff(&v, &steady_rhs(problem, theta, &v));
    Err(Error::NoConvergence { iterations: 200, residual: change })
}

/// `d v_phi / d theta` from the linearised equation.
pub fn steady_derivative(problem: &Problem, state: &SteadyState) -> Result<Vec<f64>> {
    let v = &state.values;
    let rhs: Vec<f64> = match problem.model {
        Model::Branching => v.iter().zip(&problem.phi).map(|(vi, p)| p * (1.0 + vi)).collect(),
        Model::Super => problem.phi.clone(),
    };
    let b = problem.apply_potential(&rhs);
    let j = jacobian(problem, state.theta, v);
    let x = j
        .lu()
        .solve(&DVector::from_vec(b))
        .ok_or_else(|| Error::Domain("singular linearisation at the steady state".into()))?;
    Ok(x.as_slice().to_vec())
}

/// `V_phi(theta) = <lambda, v_phi(., theta)>` and its derivative.
pub fn steady_mass(problem: &Problem, theta: f64, opts: &SteadyOptions) -> Result<(f64, f64)> {
    let s = steady_state(problem, theta, opts)?;
    let d = steady_derivative(problem, &s)?;
    Ok((problem.integrate(&s.values), problem.integrate(&d)))
}

/// Runs the steady iteration without the threshold check: `Ok(true)` when it
/// converges, `Ok(false)` when it crosses the norm guard.
pub fn converges(problem: &Problem, theta: f64, max_sweeps: usize) -> Result<bool> {
    let opts = SteadyOptions { tol: 1e-14, max_sweeps, threshold_limit: None };
    match steady_state(problem, theta, &opts) {
        Ok(_) => Ok(true),
        Err(Error::Diverged { .. }) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Bisection for the blow-up threshold of `theta` in `[lo, hi]`.
pub fn locate_threshold(problem: &Problem, lo: f64, hi: f64, tol: f64, max_sweeps: usize) -> Result<f64> {
    let (mut lo, mut hi) = (lo, hi);
    if !converges(problem, lo, max_sweeps)? || converges(problem, hi, max_sweeps)? {
        return Err(domain(format!("[{lo}, {hi}] does not bracket the threshold")));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if converges(problem, mid, max_sweeps)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlopeVerdict {
    Finite,
    /// Derivative grows like `gap^exponent`.
    Divergent { exponent: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSlope {
    pub theta_max: f64,
    /// `(theta_k, d/dtheta <lambda, v_phi(., theta_k)>)`.
    pub ladder: Vec<(f64, f64)>,
    pub verdict: SlopeVerdict,
    /// Extrapolated limit; infinite for a divergent verdict.
    pub estimate: f64,
    pub error: f64,
}

/// Central finite difference of `V_phi` at `theta` with step `h`.
pub fn finite_difference_slope(problem: &Problem, theta: f64, h: f64, opts: &SteadyOptions) -> Result<f64> {
    let up = steady_state(problem, theta + h, opts)?;
    let down = steady_state(problem, theta - h, opts)?;
    Ok((problem.integrate(&up.values) - problem.integrate(&down.values)) / (2.0 * h))
}

/// Slope of `V_phi` on `theta_k = theta_max (1 - gaps_k)` with extrapolation to the threshold.
pub fn threshold_slope(problem: &Problem, gaps: &[f64]) -> Result<ThresholdSlope> {
    if gaps.len() < 3 || gaps.windows(2).any(|w| !(w[1] < w[0])) || gaps.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
        return Err(domain("ladder needs at least three decreasing gaps in (0, 1)"));
    }
    let theta_max = problem.theta_max();
    let opts = SteadyOptions { tol: 1e-13, max_sweeps: 10_000_000, threshold_limit: None };
    let mut ladder = Vec::new();
    for g in gaps {
        let theta = theta_max * (1.0 - g);
        let h = 1e-2 * g * theta_max;
        ladder.push((theta, finite_difference_slope(problem, theta, h, &opts)?));
    }
    let k = ladder.len();
    let (g1, g2) = (gaps[k - 2], gaps[k - 1]);
    let (d1, d2) = (ladder[k - 2].1, ladder[k - 1].1);
    let exponent = (d2 / d1).ln() / (g2 / g1).ln();
    if exponent < -0.25 {
        return Ok(ThresholdSlope {
            theta_max,
            ladder,
            verdict: SlopeVerdict::Divergent { exponent },
            estimate: f64::INFINITY,
            error: f64::INFINITY,
        });
    }
    // Richardson with the rate read off the last three differences.
    let d0 = ladder[k - 3].1;
    let (e1, e2) = (d1 - d0, d2 - d1);
    let r = if e1 != 0.0 && e2 != 0.0 && (e2 / e1) > 0.0 && (e2 / e1) < 1.0 { e2 / e1 } else { 0.5 };
    let estimate = d2 + e2 * r / (1.0 - r);
    let error = (estimate - d2).abs().max(1e-12);
    Ok(ThresholdSlope { theta_max, ladder, verdict: SlopeVerdict::Finite, estimate, error })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// Nodes where `v^S > v^B` (must be zero).
    pub violations: usize,
    /// Largest `C` with `v^B_{C Psi} <= v^S_Psi` found by bisection.
    pub constant: f64,
    pub nodes: usize,
}

/// Checks `v^S_Psi <= v^B_Psi` and finds the largest `C <= 1` with `v^B_{C Psi} <= v^S_Psi`.
pub fn comparison_check(problem: &Problem, chi: &Chi, opts: &SolveOptions) -> Result<ComparisonReport> {
    let sup = source_sup(problem, chi);
    let q0 = derive_constants(&problem.params);
    if sup >= 0.99 * q0.q0_branching.min(q0.q0_super) * (1.0 + 1e-12) {
        return Err(Error::AboveThreshold { ratio: sup / q0.q0_branching.min(q0.q0_super), limit: 0.99 });
    }
    let bps = problem.with_model(Model::Branching);
    let sup_p = problem.with_model(Model::Super);
    let vs = solve_v(&sup_p, chi, opts)?.field;
    let vb = solve_v(&bps, chi, opts)?.field;
    let slack = 10.0 * opts.tol;
    let violations = vs.dominated_by(&vb, slack).map(|_| vs.values.iter().zip(&vb.values).filter(|(s, b)| **s > **b + slack).count())?;
    if violations > 0 {
        return Err(Error::BoundViolation(format!("v^S exceeds v^B at {violations} nodes")));
    }
    let nodes = vs.values.len();
    if chi.is_zero() {
        return Ok(ComparisonReport { violations, constant: 1.0, nodes });
    }
    let below = |c: f64| -> Result<bool> {
        let vbc = solve_v(&bps, &chi.scaled(c), opts)?.field;
        Ok(vbc.dominated_by(&vs, slack)? == 0)
    };
    if below(1.0)? {
        return Ok(ComparisonReport { violations, constant: 1.0, nodes });
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if below(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(ComparisonReport { violations, constant: lo, nodes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    /// The occupation time itself.
    Y,
    /// Its centred fluctuation.
    X,
}

/// `log E exp <target, phi chi_nu>` for the process run up to `horizon` and
/// divided by `norm`: `H int_0^T <lambda, w(tau)> dtau`, with `u` in place of
/// `v` for the centred target.
pub fn predicted_log_laplace(
    problem: &Problem,
    nu: &MeasureOnUnit,
    horizon: f64,
    norm: f64,
    target: Target,
    opts: &SolveOptions,
) -> Result<f64> {
    if !(norm > 0.0) {
        return Err(domain("normalisation must be positive"));
    }
    let chi = Chi::from_measure(nu, horizon, 1.0 / norm)?;
    if chi.is_zero() {
        return Ok(0.0);
    }
    let sol = solve_v(problem, &chi, opts)?;
    let h = problem.params.h();
    Ok(match target {
        Target::Y => h * sol.field.space_time_integral(),
        Target::X => h * tilde_v_and_split(problem, &chi, &sol.field, opts.dt)?.u.space_time_integral(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preset() -> BranchingParams {
        BranchingParams::new(1.0, 0.25, 1.0).unwrap()
    }

    fn super_root(theta: f64) -> f64 {
        (0.5 - (0.25 - theta).sqrt()) / 0.5
    }

    fn bps_root(theta: f64) -> f64 {
        let b = theta - 0.5;
        (-b - (b * b - 4.0 * 0.25 * theta).sqrt()) / 0.5
    }

    #[test]
    fn riccati_fixed_points() {
        let p = Problem::point(Model::Super, preset());
        let s = steady_state(&p, 0.16, &SteadyOptions::default()).unwrap();
        assert!((s.values[0] - 0.4).abs() < 1e-10);
        let b = Problem::point(Model::Branching, preset());
        let s = steady_state(&b, 0.1, &SteadyOptions::default()).unwrap();
        assert!((s.values[0] - 0.3101020514433644).abs() < 1e-10);
        assert!((bps_root(0.1) - 0.3101020514433644).abs() < 1e-15);
    }

    #[test]
    fn time_dependent_picard_reaches_root() {
        let p = Problem::point(Model::Super, preset());
        let chi = Chi::constant(0.16, 120.0).unwrap();
        let sol = solve_v(&p, &chi, &SolveOptions { dt: 0.1, tol: 1e-12, ..Default::default() }).unwrap();
        assert!((sol.field.last()[0] - super_root(0.16)).abs() < 1e-9);
        let ts = solve_v(&p, &chi, &SolveOptions { scheme: Scheme::TimeStepping, dt: 0.1, ..Default::default() }).unwrap();
        assert!((ts.field.last()[0] - 0.4).abs() < 1e-9);
    }

    #[test]
    fn zero_source_gives_zero() {
        let p = Problem::point(Model::Branching, preset());
        let chi = Chi::constant(0.0, 5.0).unwrap();
        let sol = solve_v(&p, &chi, &SolveOptions::default()).unwrap();
        assert_eq!(sol.field.sup_norm(), 0.0);
    }

    #[test]
    fn tilde_v_closed_form() {
        let p = Problem::point(Model::Super, preset());
        let chi = Chi::constant(0.1, 10.0).unwrap();
        let opts = SolveOptions { dt: 0.01, ..Default::default() };
        let sol = solve_v(&p, &chi, &opts).unwrap();
        let split = tilde_v_and_split(&p, &chi, &sol.field, 0.01).unwrap();
        for (j, t) in split.tilde_v.times().iter().enumerate() {
            let exact = 0.1 / 0.5 * (1.0 - (-0.5 * t).exp());
            assert!((split.tilde_v.slice(j)[0] - exact).abs() < 1e-12);
        }
        assert!(split.residual < 10.0 * opts.tol);
    }

    #[test]
    fn bound_sequences() {
        assert_eq!(bound_sequence(1.0, 1.0, 5), vec![1.0, 1.0, 2.0, 5.0, 14.0]);
    }

    #[test]
    fn small_root_is_stable() {
        let r = small_root(1e-20, -1.0, 2.0).unwrap();
        assert!((r - 2.0).abs() < 1e-15);
        assert!(small_root(1.0, 0.0, 1.0).is_none());
    }

    #[test]
    fn kernel_rows_are_stochastic() {
        let grid = SpatialGrid::uniform(-5.0, 5.0, 51).unwrap();
        for motion in [
            MotionModel::brownian(1.0, 1).unwrap(),
            MotionModel::ornstein_uhlenbeck(0.3, 0.8, 1).unwrap(),
            MotionModel::compound_poisson(2.0, 0.5, 1).unwrap(),
        ] {
            for t in [0.001, 0.05, 1.0, 9.0] {
                let k = build_kernel(&motion, &grid, t);
                let ones = vec![1.0; 51];
                let mut out = vec![0.0; 51];
                k.apply(&ones, &mut out);
                for v in out {
                    assert!((v - 1.0).abs() < 1e-12, "{motion:?} t={t}: {v}");
                }
            }
        }
    }

    #[test]
    fn chi_time_grid_contains_jumps() {
        let nu = MeasureOnUnit::new(vec![(1.0, 0.1), (0.3, 0.05)]).unwrap();
        let chi = Chi::from_measure(&nu, 10.0, 1.0).unwrap();
        assert!((chi.value_at(1.0) - 0.15).abs() < 1e-15);
        assert_eq!(chi.value_at(3.0), 0.1);
        let tg = TimeGrid::new(&chi, 0.4).unwrap();
        assert!(tg.times.iter().any(|t| (t - 7.0).abs() < 1e-12));
        assert_eq!(*tg.chi.first().unwrap(), 0.1);
        assert!((*tg.chi.last().unwrap() - 0.15).abs() < 1e-15);
    }
}
