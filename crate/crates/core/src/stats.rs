//! Ensembles and the empirical side of the limit theorems.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bps::{simulate_ensemble, Normalization, SimConfig};
use crate::error::{domain, Error, Result};
use crate::limits::{clt_covariance, QuadraticForms};
use crate::model::{BranchingParams, Model, PathSample, TestFunction};
use crate::motion::MotionModel;

/// Rescaled paths of an ensemble, all on one grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSet {
    pub fingerprint: String,
    pub seed: u64,
    pub horizon: f64,
    pub norm: Normalization,
    /// `(Y, X)` per replicate, in replicate order.
    pub paths: Vec<(PathSample, PathSample)>,
}

impl ReplicateSet {
    pub fn new(fingerprint: String, seed: u64, horizon: f64, norm: Normalization, paths: Vec<(PathSample, PathSample)>) -> Result<Self> {
        if paths.is_empty() {
            return Err(domain("empty replicate set"));
        }
        let m = paths[0].0.m();
        if paths.iter().any(|p| p.0.m() != m || p.1.m() != m) {
            return Err(Error::GridMismatch("replicates live on different grids".into()));
        }
        Ok(Self { fingerprint, seed, horizon, norm, paths })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn m(&self) -> usize {
        self.paths[0].0.m()
    }

    /// `X(t)` for every replicate; `t` must be a grid point.
    pub fn x_at(&self, t: f64) -> Result<Vec<f64>> {
        let j = self.grid_index(t)?;
        Ok(self.paths.iter().map(|p| p.1.values()[j]).collect())
    }

    pub fn y_at(&self, t: f64) -> Result<Vec<f64>> {
        let j = self.grid_index(t)?;
        Ok(self.paths.iter().map(|p| p.0.values()[j]).collect())
    }

    fn grid_index(&self, t: f64) -> Result<usize> {
        let m = self.m() as f64;
        let j = (t * m).round();
        if !(0.0..=1.0).contains(&t) || (t * m - j).abs() > 1e-9 {
            return Err(Error::GridMismatch(format!("time {t} is not on the {}-cell grid", self.m())));
        }
        Ok(j as usize)
    }

    /// First `n` replicates.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        Self::new(self.fingerprint.clone(), self.seed, self.horizon, self.norm, self.paths[..n.min(self.len())].to_vec())
    }
}

/// Hash of everything that determines an ensemble.
pub fn fingerprint(config: &SimConfig, params: &BranchingParams, motion: &MotionModel, phi: &TestFunction, replicates: u64) -> String {
    let text = format!(
        "{}|{}|{}|{:?}|{replicates}",
        serde_json::to_string(config).unwrap_or_default(),
        serde_json::to_string(params).unwrap_or_default(),
        serde_json::to_string(motion).unwrap_or_default(),
        phi
    );
    Sha256::digest(text.as_bytes()).iter().take(16).map(|b| format!("{b:02x}")).collect()
}

/// Simulates and rescales `replicates` paths; the result does not depend on `workers`.
pub fn run_ensemble(
    config: &SimConfig,
    params: &BranchingParams,
    motion: &MotionModel,
    phi: &TestFunction,
    replicates: u64,
    workers: usize,
) -> Result<ReplicateSet> {
    let paths = simulate_ensemble(config, params, motion, phi, replicates, workers)?;
    ReplicateSet::new(fingerprint(config, params, motion, phi, replicates), config.seed, config.horizon, config.norm, paths)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

pub fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() as f64 - 1.0)
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    covariance(a, b) / (variance(a) * variance(b)).sqrt()
}

/// Delete-a-group jackknife: `(estimate on all data, standard error)`.
pub fn jackknife(n: usize, groups: usize, stat: &dyn Fn(&[usize]) -> f64) -> (f64, f64) {
    let all: Vec<usize> = (0..n).collect();
    let full = stat(&all);
    let g = groups.clamp(2, n.max(2));
    let reps: Vec<f64> = (0..g)
        .map(|k| {
            let keep: Vec<usize> = all.iter().cloned().filter(|i| i % g != k).collect();
            stat(&keep)
        })
        .collect();
    let m = mean(&reps);
    let gf = g as f64;
    let var = (gf - 1.0) / gf * reps.iter().map(|r| (r - m).powi(2)).sum::<f64>();
    (full, var.sqrt())
}

fn pick(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|i| v[*i]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub quantity: String,
    pub estimate: f64,
    pub stderr: f64,
    pub predicted: f64,
}

impl Comparison {
    /// `|estimate - predicted| <= k * stderr`.
    pub fn within_se(&self, k: f64) -> bool {
        (self.estimate - self.predicted).abs() <= k * self.stderr
    }

    pub fn relative_error(&self) -> f64 {
        (self.estimate - self.predicted).abs() / self.predicted.abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub covariances: Vec<Comparison>,
    /// `Corr(X(1) - X(1/2), X(1/2))` against 0.
    pub increment_correlation: Comparison,
    pub skewness: Comparison,
    pub excess_kurtosis: Comparison,
}

/// Empirical covariances of `X` against the Wiener-limit prediction, plus
/// independence of increments and Gaussianity of `X(1)`.
pub fn clt_verify(
    set: &ReplicateSet,
    model: Model,
    params: &BranchingParams,
    forms: &QuadraticForms,
    pairs: &[(f64, f64)],
) -> Result<CltReport> {
    if set.norm != Normalization::Sqrt {
        return Err(domain("CLT checks need F_T = T^(1/2)"));
    }
    if set.len() < 4 {
        return Err(domain("need at least four replicates"));
    }
    let n = set.len();
    let groups = 100.min(n);
    let mut covariances = Vec::new();
    for &(s, t) in pairs {
        let (a, b) = (set.x_at(s)?, set.x_at(t)?);
        let (estimate, stderr) = jackknife(n, groups, &|idx| covariance(&pick(&a, idx), &pick(&b, idx)));
        covariances.push(Comparison {
            quantity: format!("cov(X({s}),X({t}))"),
            estimate,
            stderr,
            predicted: clt_covariance(model, params, s, t, forms)?,
        });
    }
    let half = set.x_at(0.5)?;
    let one = set.x_at(1.0)?;
    let inc: Vec<f64> = one.iter().zip(&half).map(|(a, b)| a - b).collect();
    let (estimate, stderr) = jackknife(n, groups, &|idx| correlation(&pick(&inc, idx), &pick(&half, idx)));
    let increment_correlation = Comparison { quantity: "corr(X(1)-X(1/2),X(1/2))".into(), estimate, stderr, predicted: 0.0 };
    let (estimate, stderr) = jackknife(n, groups, &|idx| skewness(&pick(&one, idx)));
    let skew = Comparison { quantity: "skewness(X(1))".into(), estimate, stderr, predicted: 0.0 };
    let (estimate, stderr) = jackknife(n, groups, &|idx| excess_kurtosis(&pick(&one, idx)));
    let kurt = Comparison { quantity: "excess_kurtosis(X(1))".into(), estimate, stderr, predicted: 0.0 };
    Ok(CltReport { covariances, increment_correlation, skewness: skew, excess_kurtosis: kurt })
}

pub fn skewness(v: &[f64]) -> f64 {
    let m = mean(v);
    let n = v.len() as f64;
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = v.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

pub fn excess_kurtosis(v: &[f64]) -> f64 {
    let m = mean(v);
    let n = v.len() as f64;
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

/// `log mean exp(z)` with the max shift, and the effective sample size of the weights.
pub fn log_mean_exp(z: &[f64]) -> (f64, f64) {
    let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    (top + (s / z.len() as f64).ln(), s * s / s2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmeEstimate {
    pub value: f64,
    pub ess: f64,
    pub stderr: f64,
    /// Percentile bootstrap 95% interval.
    pub interval: (f64, f64),
}

/// `log mean exp(z)` with a seeded bootstrap.
pub fn log_mean_exp_bootstrap(z: &[f64], resamples: usize, seed: u64) -> Result<LmeEstimate> {
    if z.len() < 2 || z.iter().any(|v| !v.is_finite()) {
        return Err(domain("need at least two finite values"));
    }
    let (value, ess) = log_mean_exp(z);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boot: Vec<f64> = (0..resamples.max(2))
        .map(|_| {
            let sample: Vec<f64> = (0..z.len()).map(|_| z[rng.random_range(0..z.len())]).collect();
            log_mean_exp(&sample).0
        })
        .collect();
    let stderr = variance(&boot).sqrt();
    boot.sort_by(f64::total_cmp);
    let q = |p: f64| boot[((p * (boot.len() - 1) as f64).round() as usize).min(boot.len() - 1)];
    let interval = (q(0.025).min(value), q(0.975).max(value));
    Ok(LmeEstimate { value, ess, stderr, interval })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgfEstimate {
    pub theta: f64,
    pub alpha: f64,
    /// `T^{-alpha} log mean exp(theta T^alpha X(1))`; NaN when unreliable.
    pub estimate: f64,
    pub raw_estimate: f64,
    pub stderr: f64,
    pub ess: f64,
    pub interval: (f64, f64),
    pub reliable: bool,
}

/// Empirical scaled cumulant of `X(1)`.
pub fn empirical_cgf(set: &ReplicateSet, theta: f64, alpha: f64, ess_floor: f64, resamples: usize, seed: u64) -> Result<CgfEstimate> {
    if theta == 0.0 {
        return Ok(CgfEstimate {
            theta,
            alpha,
            estimate: 0.0,
            raw_estimate: 0.0,
            stderr: 0.0,
            ess: set.len() as f64,
            interval: (0.0, 0.0),
            reliable: true,
        });
    }
    let scale = set.horizon.powf(alpha);
    let z: Vec<f64> = set.x_at(1.0)?.iter().map(|x| theta * scale * x).collect();
    let est = log_mean_exp_bootstrap(&z, resamples, seed)?;
    let reliable = est.ess >= ess_floor;
    let raw = est.value / scale;
    Ok(CgfEstimate {
        theta,
        alpha,
        estimate: if reliable { raw } else { f64::NAN },
        raw_estimate: raw,
        stderr: est.stderr / scale,
        ess: est.ess,
        interval: (est.interval.0 / scale, est.interval.1 / scale),
        reliable,
    })
}

/// `L_k(x) = max m_{rst}(x)` over consecutive dyadic triples at level `k`,
/// with `m_{rst} = |x(s)-x(r)| ^ |x(t)-x(s)|`; `values` on `2^K + 1` points.
pub fn dyadic_l(values: &[f64], k: u32) -> f64 {
    let m = values.len() - 1;
    let stride = m >> k;
    let mut best: f64 = 0.0;
    let mut j = 0;
    while j + 2 * stride <= m {
        let (r, s, t) = (values[j], values[j + stride], values[j + 2 * stride]);
        best = best.max((s - r).abs().min((t - s).abs()));
        j += stride;
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub theta: f64,
    pub s: f64,
    pub t: f64,
    pub log_mgf: f64,
    pub ess: f64,
    /// `log E exp(theta (x(t)-x(s))) / ((t-s) theta^2)`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathBoundReport {
    pub replicates: usize,
    pub levels: u32,
    /// Replicates where `sup |x| > 2 sum L_k + |x(1)|` on the grid.
    pub violations: usize,
    /// Largest `sup |x| / (2 sum L_k + |x(1)|)`.
    pub max_ratio: f64,
    /// Smallest admissible `c` over the design, if any design point qualified.
    pub c_fit: Option<f64>,
    pub design: Vec<DesignPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XyzDesign {
    /// The bound is fitted for `theta' <= T^{-epsilon}`.
    pub epsilon: f64,
    /// Halvings of `T^{-epsilon}` tried.
    pub thetas: usize,
    /// `(s, t)` pairs as fractions of `T`.
    pub pairs: Vec<(f64, f64)>,
    pub ess_floor: f64,
    /// Keep design points with `theta'^2 Var <= spread_cap`.
    pub spread_cap: f64,
}

impl Default for XyzDesign {
    fn default() -> Self {
        Self {
            epsilon: 0.25,
            thetas: 12,
            pairs: vec![(0.0, 0.125), (0.0, 0.25), (0.0, 0.5), (0.0, 1.0), (0.5, 1.0), (0.25, 0.75)],
            ess_floor: 30.0,
            spread_cap: 1.0,
        }
    }
}

/// Suprema inequality on every replicate and a fit of the Gaussian-type bound
/// `E exp(theta'(x(t)-x(s))) <= exp(c (t-s) theta'^2)` for the unnormalised
/// fluctuation `x(u) = F_T X(u/T)`.
pub fn path_bound_checks(set: &ReplicateSet, design: &XyzDesign) -> Result<PathBoundReport> {
    let m = set.m();
    if !m.is_power_of_two() {
        return Err(domain(format!("dyadic checks need a power-of-two grid, got {m} cells")));
    }
    let levels = m.trailing_zeros();
    let mut violations = 0;
    let mut max_ratio: f64 = 0.0;
    for (_, x) in &set.paths {
        let v = x.values();
        let sup = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let rhs = 2.0 * (1..=levels).map(|k| dyadic_l(v, k)).sum::<f64>() + v[m].abs();
        if sup > rhs * (1.0 + 1e-12) + 1e-300 {
            violations += 1;
        }
        if rhs > 0.0 {
            max_ratio = max_ratio.max(sup / rhs);
        }
    }
    let f = set.norm.factor(set.horizon);
    let top = set.horizon.powf(-design.epsilon);
    let mut points = Vec::new();
    for &(a, b) in &design.pairs {
        let (xa, xb) = (set.x_at(a)?, set.x_at(b)?);
        let d: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| f * (q - p)).collect();
        let var = variance(&d);
        let span = (b - a) * set.horizon;
        for k in 0..design.thetas {
            let theta = top / 2f64.powi(k as i32);
            if theta * theta * var > design.spread_cap {
                continue;
            }
            let z: Vec<f64> = d.iter().map(|v| theta * v).collect();
            let (log_mgf, ess) = log_mean_exp(&z);
            if ess < design.ess_floor {
                continue;
            }
            points.push(DesignPoint { theta, s: a * set.horizon, t: b * set.horizon, log_mgf, ess, ratio: log_mgf / (span * theta * theta) });
            break;
        }
    }
    let c_fit = points.iter().map(|p| p.ratio).fold(None, |m: Option<f64>, r| Some(m.map_or(r, |v| v.max(r))));
    Ok(PathBoundReport { replicates: set.len(), levels, violations, max_ratio, c_fit, design: points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dyadic_examples() {
        let line: Vec<f64> = (0..=16).map(|j| j as f64 / 16.0).collect();
        for k in 1..=4 {
            assert!((dyadic_l(&line, k) - 0.5f64.powi(k as i32)).abs() < 1e-15);
        }
        let flat = vec![0.0; 17];
        assert_eq!(dyadic_l(&flat, 3), 0.0);
    }

    #[test]
    fn lme_and_ess() {
        let (v, ess) = log_mean_exp(&[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(v, 0.0);
        assert_eq!(ess, 4.0);
        let (v, _) = log_mean_exp(&[1000.0, 1000.0]);
        assert!((v - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn jackknife_of_mean_matches_classical() {
        let v: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64).collect();
        let (m, se) = jackknife(v.len(), 200, &|idx| mean(&pick(&v, idx)));
        assert!((m - mean(&v)).abs() < 1e-12);
        assert!((se - (variance(&v) / 200.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn bootstrap_interval_contains_estimate() {
        let z: Vec<f64> = (0..300).map(|i| (i as f64 * 0.7).sin()).collect();
        let e = log_mean_exp_bootstrap(&z, 200, 3).unwrap();
        assert!(e.interval.0 <= e.value && e.value <= e.interval.1);
        assert!(e.stderr > 0.0);
    }
}
