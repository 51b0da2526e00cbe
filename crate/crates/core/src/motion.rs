//! Markov motions of single particles: exact transition sampling, the damped
//! semigroup `T_t^Q = e^{-Qt} T_t`, its potential `U^Q`, and numeric checks of
//! the decay assumptions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::{BranchingParams, Gaussian, Model, TestFunction};
use crate::quad;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MotionKind {
    /// Particles never move.
    Degenerate,
    Brownian { sigma: f64 },
    /// `d eta = -theta eta dt + sigma dW`.
    OrnsteinUhlenbeck { theta: f64, sigma: f64 },
    /// Jumps at rate `rate`, each an independent `N(0, jump_std^2 I)` displacement.
    CompoundPoisson { rate: f64, jump_std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionModel {
    kind: MotionKind,
    dim: usize,
}

impl MotionModel {
    pub fn new(kind: MotionKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(domain("motion dimension must be at least 1"));
        }
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(domain(format!("{name} must be positive and finite, got {v}")))
            }
        };
        match kind {
            MotionKind::Degenerate => {}
            MotionKind::Brownian { sigma } => positive("sigma", sigma)?,
            MotionKind::OrnsteinUhlenbeck { theta, sigma } => {
                positive("theta", theta)?;
                // sigma = 0 is the deterministic flow, useful as an oracle.
                if !(sigma.is_finite() && sigma >= 0.0) {
                    return Err(domain(format!("sigma must be nonnegative and finite, got {sigma}")));
                }
            }
            MotionKind::CompoundPoisson { rate, jump_std } => {
                positive("jump rate", rate)?;
                positive("jump std", jump_std)?;
            }
        }
        Ok(Self { kind, dim })
    }

    pub fn degenerate(dim: usize) -> Self {
        Self { kind: MotionKind::Degenerate, dim: dim.max(1) }
    }

    pub fn brownian(sigma: f64, dim: usize) -> Result<Self> {
        Self::new(MotionKind::Brownian { sigma }, dim)
    }

    pub fn ornstein_uhlenbeck(theta: f64, sigma: f64, dim: usize) -> Result<Self> {
        Self::new(MotionKind::OrnsteinUhlenbeck { theta, sigma }, dim)
    }

    pub fn compound_poisson(rate: f64, jump_std: f64, dim: usize) -> Result<Self> {
        Self::new(MotionKind::CompoundPoisson { rate, jump_std }, dim)
    }

    pub fn kind(&self) -> MotionKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self.kind, MotionKind::Degenerate)
    }

    pub fn is_translation_invariant(&self) -> bool {
        !matches!(self.kind, MotionKind::OrnsteinUhlenbeck { .. })
    }

    /// Rate at which `<lambda, T_t^Q f>` decays: `Q - d theta` for OU, `Q` otherwise.
    pub fn mass_decay_rate(&self, q: f64) -> f64 {
        match self.kind {
            MotionKind::OrnsteinUhlenbeck { theta, .. } => q - self.dim as f64 * theta,
            _ => q,
        }
    }

    /// `<lambda, T_t f> / <lambda, f>`.
    pub fn lebesgue_factor(&self, t: f64) -> f64 {
        match self.kind {
            MotionKind::OrnsteinUhlenbeck { theta, .. } => (self.dim as f64 * theta * t).exp(),
            _ => 1.0,
        }
    }

    /// Per-axis diffusivity scale, `sqrt(Var eta_t / t)` for small `t`.
    pub fn spread(&self) -> f64 {
        match self.kind {
            MotionKind::Degenerate => 0.0,
            MotionKind::Brownian { sigma } | MotionKind::OrnsteinUhlenbeck { sigma, .. } => sigma,
            MotionKind::CompoundPoisson { rate, jump_std } => rate.sqrt() * jump_std,
        }
    }

    /// Moves `x` forward by `dt` in place, sampling the exact transition law.
    #[inline]
    pub fn advance<R: Rng + ?Sized>(&self, x: &mut [f64], dt: f64, rng: &mut R) {
        match self.kind {
            MotionKind::Degenerate => {}
            MotionKind::Brownian { sigma } => {
                let s = sigma * dt.sqrt();
                for xi in x.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *xi += s * z;
                }
            }
            MotionKind::OrnsteinUhlenbeck { theta, sigma } => {
                let decay = (-theta * dt).exp();
                let s = sigma * (-(-2.0 * theta * dt).exp_m1() / (2.0 * theta)).sqrt();
                for xi in x.iter_mut() {
                    let z: f64 = if s > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                    *xi = *xi * decay + s * z;
                }
            }
            MotionKind::CompoundPoisson { rate, jump_std } => {
                let k = poisson(rate * dt, rng);
                if k > 0 {
                    let s = jump_std * (k as f64).sqrt();
                    for xi in x.iter_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *xi += s * z;
                    }
                }
            }
        }
    }

    /// A sample of `eta_dt` given `eta_0 = x`.
    pub fn step<R: Rng + ?Sized>(&self, x: &[f64], dt: f64, rng: &mut R) -> Result<Vec<f64>> {
        if !(dt > 0.0) {
            return Err(domain(format!("time step must be positive, got {dt}")));
        }
        self.check_dim(x.len())?;
        let mut y = x.to_vec();
        self.advance(&mut y, dt, rng);
        Ok(y)
    }

    pub(crate) fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim {
            return Err(domain(format!("position has dimension {d}, motion has dimension {}", self.dim)));
        }
        Ok(())
    }

    /// `T_t g` as a nonnegative Gaussian mixture (no damping).
    pub fn evolve_gaussian(&self, g: &Gaussian, t: f64) -> Vec<Gaussian> {
        match self.kind {
            MotionKind::Degenerate => vec![g.clone()],
            MotionKind::Brownian { sigma } => vec![convolve(g, sigma * sigma * t)],
            MotionKind::OrnsteinUhlenbeck { theta, sigma } => {
                let tau2 = sigma * sigma * -(-2.0 * theta * t).exp_m1() / (2.0 * theta);
                let grow = (theta * t).exp();
                let mut amplitude = g.amplitude;
                let mut center = Vec::with_capacity(g.dim());
                let mut std = Vec::with_capacity(g.dim());
                for (c, s) in g.center.iter().zip(&g.std) {
                    let v = s * s + tau2;
                    amplitude *= s / v.sqrt();
                    center.push(c * grow);
                    std.push(v.sqrt() * grow);
                }
                vec![Gaussian { amplitude, center, std }]
            }
            MotionKind::CompoundPoisson { rate, jump_std } => poisson_weights(rate * t)
                .into_iter()
                .map(|(k, w)| {
                    let mut h = convolve(g, k as f64 * jump_std * jump_std);
                    h.amplitude *= w;
                    h
                })
                .collect(),
        }
    }

    /// `T_t^Q phi` as a Gaussian mixture, when available in closed form.
    pub fn damped_mixture(&self, q: f64, phi: &TestFunction, t: f64) -> Option<Vec<Gaussian>> {
        let g = phi.gaussian()?;
        let damp = (-q * t).exp();
        Some(
            self.evolve_gaussian(g, t)
                .into_iter()
                .map(|mut h| {
                    h.amplitude *= damp;
                    h
                })
                .collect(),
        )
    }

    fn antithetic_center(&self, x: &[f64], t: f64) -> Vec<f64> {
        match self.kind {
            MotionKind::OrnsteinUhlenbeck { theta, .. } => x.iter().map(|xi| xi * (-theta * t).exp()).collect(),
            _ => x.to_vec(),
        }
    }
}

fn convolve(g: &Gaussian, var: f64) -> Gaussian {
    let mut amplitude = g.amplitude;
    let mut std = Vec::with_capacity(g.dim());
    for s in &g.std {
        let v = s * s + var;
        amplitude *= s / v.sqrt();
        std.push(v.sqrt());
    }
    Gaussian { amplitude, center: g.center.clone(), std }
}

/// `(k, P(N = k))` for `N ~ Poisson(mean)` over `mean +- 12 sd`; the dropped mass is below 1e-30.
pub(crate) fn poisson_weights(mean: f64) -> Vec<(u32, f64)> {
    if mean <= 0.0 {
        return vec![(0, 1.0)];
    }
    let sd = mean.sqrt();
    let lo = (mean - 12.0 * sd).floor().max(0.0) as u32;
    let hi = (mean + 12.0 * sd + 25.0).ceil() as u32;
    (lo..=hi)
        .map(|k| (k, (-mean + k as f64 * mean.ln() - libm::lgamma(k as f64 + 1.0)).exp()))
        .filter(|e| e.1 > 0.0)
        .collect()
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean < 30.0 {
        // Inversion by sequential search; mean is small for per-step jump counts.
        let u: f64 = rng.random();
        let mut p = (-mean).exp();
        let mut cdf = p;
        let mut k = 0u64;
        while u > cdf && k < 1000 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
        }
        k
    } else {
        Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SemigroupMethod {
    Analytic,
    /// Antithetic Monte Carlo with `samples` pairs drawn from a stream seeded by `seed`.
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    /// Zero for closed-form evaluations.
    pub std_error: f64,
}

/// `T_t^Q phi(x) = e^{-Qt} E_x phi(eta_t)`.
pub fn semigroup_apply(
    motion: &MotionModel,
    q: f64,
    phi: &TestFunction,
    t: f64,
    x: &[f64],
    method: SemigroupMethod,
) -> Result<Estimate> {
    if !(t >= 0.0) {
        return Err(domain(format!("time must be nonnegative, got {t}")));
    }
    motion.check_dim(x.len())?;
    if phi.dim() != motion.dim() {
        return Err(domain("test function and motion dimensions differ"));
    }
    let damp = (-q * t).exp();
    if t == 0.0 || motion.is_degenerate() {
        return Ok(Estimate { value: damp * phi.eval(x), std_error: 0.0 });
    }
    match method {
        SemigroupMethod::Analytic => {
            let mix = motion.damped_mixture(q, phi, t).ok_or_else(|| {
                Error::Unsupported(format!(
                    "closed-form semigroup for {:?} motion and a {:?} test function",
                    motion.kind(),
                    phi.shape()
                ))
            })?;
            Ok(Estimate { value: mix.iter().map(|g| g.eval(x)).sum(), std_error: 0.0 })
        }
        SemigroupMethod::MonteCarlo { samples, seed } => {
            if samples < 2 {
                return Err(domain("Monte Carlo needs at least two antithetic pairs"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let center = motion.antithetic_center(x, t);
            let mut y = vec![0.0; x.len()];
            let mut mirror = vec![0.0; x.len()];
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..samples {
                y.copy_from_slice(x);
                motion.advance(&mut y, t, &mut rng);
                for i in 0..x.len() {
                    mirror[i] = 2.0 * center[i] - y[i];
                }
                let v = 0.5 * (phi.eval(&y) + phi.eval(&mirror));
                sum += v;
                sum_sq += v * v;
            }
            let n = samples as f64;
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
            Ok(Estimate { value: damp * mean, std_error: damp * (var / n).sqrt() })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialValue {
    pub value: f64,
    /// `||phi||_inf e^{-Q t_max} / Q`, the bound on the neglected tail.
    pub tail_bound: f64,
    pub quadrature_error: f64,
}

/// `U^Q phi(x) = int_0^inf T_t^Q phi(x) dt`, truncated at `t_max`.
pub fn potential_apply(
    motion: &MotionModel,
    q: f64,
    phi: &TestFunction,
    x: &[f64],
    t_max: f64,
    tol: f64,
) -> Result<PotentialValue> {
    if !(q > 0.0) {
        return Err(domain(format!("potential needs Q > 0, got {q}")));
    }
    motion.check_dim(x.len())?;
    let sup = phi.sup_norm();
    let tail_bound = sup * (-q * t_max).exp() / q;
    if tail_bound > tol {
        let needed = (sup / (q * tol)).ln() / q;
        return Err(domain(format!(
            "tail bound {tail_bound:.3e} exceeds tolerance {tol:.1e}; t_max must be at least {needed:.6}"
        )));
    }
    if motion.is_degenerate() {
        let value = phi.eval(x) * -(-q * t_max).exp_m1() / q;
        return Ok(PotentialValue { value, tail_bound, quadrature_error: 0.0 });
    }
    // Probe the closed form once so unsupported pairs fail before integrating.
    semigroup_apply(motion, q, phi, 0.5 * t_max, x, SemigroupMethod::Analytic)?;
    let mut f = |t: f64| semigroup_apply(motion, q, phi, t, x, SemigroupMethod::Analytic).map(|e| e.value).unwrap_or(f64::NAN);
    let cuts = quad::geometric_panels((1.0 / q).min(t_max) * 0.05, t_max);
    let mut value = 0.0;
    let mut quadrature_error = 0.0;
    let per_panel = 0.5 * tol / cuts.len() as f64;
    for w in cuts.windows(2) {
        let (v, e) = quad::adaptive(&mut f, w[0], w[1], per_panel);
        value += v;
        quadrature_error += e;
    }
    if !value.is_finite() {
        return Err(domain("potential quadrature produced a non-finite value"));
    }
    Ok(PotentialValue { value, tail_bound, quadrature_error })
}

/// `<lambda, T_t^Q phi>`.
pub fn lebesgue_semigroup_mass(motion: &MotionModel, q: f64, phi: &TestFunction, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(domain(format!("time must be nonnegative, got {t}")));
    }
    Ok((-q * t).exp() * motion.lebesgue_factor(t) * phi.integral())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Witness {
    Scalar(f64),
    Curve(Vec<(f64, f64)>),
    /// Offending time and value.
    At { t: f64, value: f64 },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionEntry {
    pub name: String,
    pub status: Status,
    pub witness: Witness,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub entries: Vec<AssumptionEntry>,
    /// `theta < Q` for OU motion.
    pub ou_condition: Option<bool>,
    /// Fitted exponential decay rate of `||T_t^Q phi||_1`.
    pub l1_decay_rate: f64,
    /// Fitted exponential decay rate of `||T_t^Q phi||_2`, when computable.
    pub l2_decay_rate: Option<f64>,
}

impl AssumptionReport {
    pub fn entry(&self, name: &str) -> Option<&AssumptionEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn any_failed(&self) -> bool {
        self.entries.iter().any(|e| e.status == Status::Fail)
    }
}

/// Least-squares slope of `ln y` against `t`, negated.
fn decay_rate(curve: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = curve.iter().filter(|p| p.1 > 0.0).map(|&(t, y)| (t, y.ln())).collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
    -sxy / sxx
}

pub fn check_assumptions(
    motion: &MotionModel,
    params: &BranchingParams,
    phi: &TestFunction,
    time_grid: &[f64],
) -> Result<AssumptionReport> {
    if time_grid.len() < 2 || time_grid.windows(2).any(|w| !(w[1] > w[0])) || time_grid[0] <= 0.0 {
        return Err(domain("time grid must be positive and strictly increasing with at least two points"));
    }
    let q = params.death_rate();
    let l1: Vec<(f64, f64)> =
        time_grid.iter().map(|&t| Ok((t, lebesgue_semigroup_mass(motion, q, phi, t)?))).collect::<Result<_>>()?;
    let l2: Option<Vec<(f64, f64)>> = if let Some(g) = phi.gaussian() {
        Some(
            time_grid
                .iter()
                .map(|&t| {
                    let mix = motion.evolve_gaussian(g, t);
                    let sq: f64 = mix.iter().flat_map(|a| mix.iter().map(move |b| a.overlap(b))).sum();
                    (t, (-q * t).exp() * sq.sqrt())
                })
                .collect(),
        )
    } else if motion.is_degenerate() {
        Some(time_grid.iter().map(|&t| (t, (-q * t).exp() * phi.square_integral().sqrt())).collect())
    } else {
        None
    };
    let weighted: Vec<(f64, f64)> = l1.iter().map(|&(t, v)| (t, t.powf(1.5) * v)).collect();
    let l1_rate = decay_rate(&l1);
    let l2_rate = l2.as_deref().map(decay_rate);
    let mut entries = Vec::new();

    entries.push(match crate::limits::quadratic_forms(motion, q, phi, None) {
        Ok(f) if f.t1.is_finite() && f.t2.is_finite() => AssumptionEntry {
            name: "A4".into(),
            status: Status::Pass,
            witness: Witness::Curve(vec![(1.0, f.t1), (2.0, f.t2)]),
            note: "quadratic forms T1, T2 finite".into(),
        },
        Ok(f) => AssumptionEntry {
            name: "A4".into(),
            status: Status::Fail,
            witness: Witness::Curve(vec![(1.0, f.t1), (2.0, f.t2)]),
            note: "quadratic form diverges".into(),
        },
        Err(e) => AssumptionEntry {
            name: "A4".into(),
            status: if matches!(e.root(), Error::Unsupported(_)) { Status::Inconclusive } else { Status::Fail },
            witness: Witness::None,
            note: e.to_string(),
        },
    });

    // A5: t^{3/2} ||T_t^Q phi||_1 -> 0.
    let last = *weighted.last().unwrap();
    let peak = weighted.iter().fold(0.0f64, |m, p| m.max(p.1));
    let tail_growing = weighted[weighted.len() / 2..].windows(2).all(|w| w[1].1 >= w[0].1);
    entries.push(if l1_rate > 0.0 && last.1 < peak {
        AssumptionEntry {
            name: "A5".into(),
            status: Status::Pass,
            witness: Witness::Curve(weighted.clone()),
            note: format!("exponential decay at rate {l1_rate:.6} dominates t^(3/2)"),
        }
    } else if tail_growing {
        AssumptionEntry {
            name: "A5".into(),
            status: Status::Fail,
            witness: Witness::At { t: last.0, value: last.1 },
            note: "t^(3/2) ||T_t^Q phi||_1 is nondecreasing on the tail of the grid".into(),
        }
    } else {
        AssumptionEntry {
            name: "A5".into(),
            status: Status::Inconclusive,
            witness: Witness::Curve(weighted.clone()),
            note: "no clear trend on the sampled grid".into(),
        }
    });

    entries.push(match (&l2, l2_rate) {
        (Some(curve), Some(r)) if r > 0.0 => AssumptionEntry {
            name: "A6".into(),
            status: Status::Pass,
            witness: Witness::Curve(curve.clone()),
            note: format!("fitted L2 decay rate {r:.6}"),
        },
        (Some(curve), Some(r)) => {
            let last = *curve.last().unwrap();
            AssumptionEntry {
                name: "A6".into(),
                status: Status::Fail,
                witness: Witness::At { t: last.0, value: last.1 },
                note: format!("fitted L2 decay rate {r:.6} is not positive"),
            }
        }
        _ => AssumptionEntry {
            name: "A6".into(),
            status: Status::Inconclusive,
            witness: Witness::None,
            note: "L2 norm not available in closed form".into(),
        },
    });

    entries.push(if l1_rate > 0.0 {
        AssumptionEntry {
            name: "A7".into(),
            status: Status::Pass,
            witness: Witness::Scalar(l1_rate),
            note: "L1 mass decays exponentially".into(),
        }
    } else {
        let last = *l1.last().unwrap();
        AssumptionEntry {
            name: "A7".into(),
            status: Status::Fail,
            witness: Witness::At { t: last.0, value: last.1 },
            note: format!("fitted L1 decay rate {l1_rate:.6} is not positive"),
        }
    });

    let ou_condition = match motion.kind() {
        MotionKind::OrnsteinUhlenbeck { theta, .. } => Some(theta < q),
        _ => None,
    };
    for name in ["A8", "A9"] {
        entries.push(match ou_condition {
            Some(true) => AssumptionEntry {
                name: name.into(),
                status: Status::Pass,
                witness: Witness::Curve(l1.clone()),
                note: "OU with theta < Q".into(),
            },
            Some(false) => {
                let last = *l1.last().unwrap();
                AssumptionEntry {
                    name: name.into(),
                    status: Status::Fail,
                    witness: Witness::At { t: last.0, value: last.1 },
                    note: "OU with theta >= Q".into(),
                }
            }
            None => AssumptionEntry {
                name: name.into(),
                status: Status::Inconclusive,
                witness: Witness::Curve(l1.clone()),
                note: "not decided for this motion; curve reported".into(),
            },
        });
    }
    if ou_condition == Some(false) {
        for e in entries.iter_mut().filter(|e| e.status == Status::Pass && e.name != "A4") {
            e.status = Status::Fail;
            e.note = format!("OU with theta >= Q; {}", e.note);
        }
    }
    Ok(AssumptionReport { entries, ou_condition, l1_decay_rate: l1_rate, l2_decay_rate: l2_rate })
}

/// Model-independent threshold check shared by the solvers: `sup / Q0` must not exceed `limit`.
pub(crate) fn check_threshold(model: Model, params: &BranchingParams, sup: f64, limit: f64) -> Result<()> {
    let q0 = model.threshold(params);
    let ratio = sup / q0;
    if ratio > limit * (1.0 + 1e-12) {
        return Err(Error::AboveThreshold { ratio, limit });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn bump() -> TestFunction {
        TestFunction::gaussian_bump(vec![0.0], 1.0, 1.0).unwrap()
    }

    #[test]
    fn degenerate_semigroup_is_damping() {
        let m = MotionModel::degenerate(1);
        let v = semigroup_apply(&m, 0.5, &bump(), 2.0, &[0.0], SemigroupMethod::Analytic).unwrap();
        assert!((v.value - (-1f64).exp()).abs() < 1e-16);
    }

    #[test]
    fn heat_kernel_on_gaussian() {
        let m = MotionModel::brownian(1.0, 1).unwrap();
        for (t, x) in [(0.3, 0.0), (1.0, 0.7), (4.0, -2.0)] {
            let v = semigroup_apply(&m, 0.0, &bump(), t, &[x], SemigroupMethod::Analytic).unwrap().value;
            let expect = (1.0 + 2.0 * t).powf(-0.5) * (-x * x / (1.0 + 2.0 * t)).exp();
            assert!((v - expect).abs() < 1e-14, "{v} vs {expect}");
        }
    }

    #[test]
    fn ou_deterministic_flow() {
        let m = MotionModel::ornstein_uhlenbeck(1.0, 0.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = m.step(&[2.0], 2f64.ln(), &mut rng).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn potential_of_degenerate() {
        let m = MotionModel::degenerate(1);
        let v = potential_apply(&m, 0.5, &bump(), &[0.0], 80.0, 1e-12).unwrap();
        assert!((v.value - 2.0).abs() < 1e-15);
        let err = potential_apply(&m, 0.5, &bump(), &[0.0], 10.0, 1e-12).unwrap_err();
        assert!(err.to_string().contains("t_max must be at least"));
    }

    #[test]
    fn lebesgue_mass_ou() {
        let m = MotionModel::ornstein_uhlenbeck(0.2, 1.0, 1).unwrap();
        let v = lebesgue_semigroup_mass(&m, 0.5, &bump(), 1.0).unwrap();
        assert!((v - (-0.3f64).exp() * PI.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn poisson_weights_sum_to_one() {
        for mean in [0.01, 1.0, 7.5, 200.0] {
            let w = poisson_weights(mean);
            let s: f64 = w.iter().map(|e| e.1).sum();
            let m: f64 = w.iter().map(|e| e.0 as f64 * e.1).sum();
            assert!((s - 1.0).abs() < 1e-13, "{mean}: {s}");
            assert!((m - mean).abs() < 1e-10 * (1.0 + mean));
        }
    }

    #[test]
    fn ou_verdicts() {
        let p = BranchingParams::new(1.0, 0.25, 1.0).unwrap();
        let grid: Vec<f64> = (1..=40).map(|i| i as f64 * 0.5).collect();
        let ok = check_assumptions(&MotionModel::ornstein_uhlenbeck(0.2, 1.0, 1).unwrap(), &p, &bump(), &grid).unwrap();
        assert_eq!(ok.ou_condition, Some(true));
        assert!(!ok.any_failed());
        let bad = check_assumptions(&MotionModel::ornstein_uhlenbeck(0.7, 1.0, 1).unwrap(), &p, &bump(), &grid).unwrap();
        assert_eq!(bad.ou_condition, Some(false));
        let a5 = bad.entry("A5").unwrap();
        assert_eq!(a5.status, Status::Fail);
        assert!(matches!(a5.witness, Witness::At { .. }));
    }

    #[test]
    fn brownian_l1_decay_rate_is_q() {
        let p = BranchingParams::new(1.0, 0.25, 1.0).unwrap();
        let grid: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let r = check_assumptions(&MotionModel::brownian(1.0, 1).unwrap(), &p, &bump(), &grid).unwrap();
        assert!((r.l1_decay_rate - 0.5).abs() < 0.025);
        assert_eq!(r.entry("A8").unwrap().status, Status::Inconclusive);
    }
}
