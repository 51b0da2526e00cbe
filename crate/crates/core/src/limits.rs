//! Limit objects: the quadratic forms `T1`, `T2`, limit covariances, the LLN
//! slope, `Lambda(nu)` and the large and moderate deviation rate functions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::{BranchingParams, Gaussian, MeasureOnUnit, Model, PathSample, TestFunction};
use crate::motion::{MotionKind, MotionModel};
use crate::pde::{steady_derivative, steady_state, Problem, SteadyOptions};
use crate::quad;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticForms {
    pub t1: f64,
    pub t2: f64,
    pub t1_error: f64,
    pub t2_error: f64,
}

/// `<lambda, U^Q f> / <lambda, f>` for `f >= 0`; errors when the pairing diverges.
fn lebesgue_potential_factor(motion: &MotionModel, q: f64) -> Result<f64> {
    let rate = motion.mass_decay_rate(q);
    if !(rate > 0.0) {
        return Err(domain(format!(
            "Lebesgue pairing of U^Q diverges: d*theta = {:.6} >= Q = {q:.6}",
            q - rate
        )));
    }
    Ok(1.0 / rate)
}

fn mixture_overlap(a: &[Gaussian], b: &[Gaussian]) -> f64 {
    a.iter().map(|x| b.iter().map(|y| x.overlap(y)).sum::<f64>()).sum()
}

/// `int_0^inf e^{-Qt} f(t) dt` on geometric panels, with 15- and 30-point rules
/// compared for the error estimate.
fn laplace_integral(q: f64, first: f64, f: &dyn Fn(f64) -> f64) -> (f64, f64) {
    let cuts = quad::geometric_panels(first, 60.0 / q);
    let mut lo = 0.0;
    let mut hi = 0.0;
    for w in cuts.windows(2) {
        lo += quad::gl15().integrate(w[0], w[1], |t| (-q * t).exp() * f(t));
        hi += quad::gl30().integrate(w[0], w[1], |t| (-q * t).exp() * f(t));
    }
    (hi, (hi - lo).abs())
}

fn first_panel(motion: &MotionModel, g: &Gaussian, q: f64) -> f64 {
    let s = g.std.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread = motion.spread();
    let cross = if spread > 0.0 { (s / spread).powi(2) } else { 1.0 / q };
    match motion.kind() {
        MotionKind::CompoundPoisson { rate, .. } => cross.min(0.1 / rate),
        _ => cross,
    }
    .clamp(1e-6, 0.25 / q)
}

/// `T1 = ||U^Q(phi1 U^Q phi2)||_1` (symmetrised) and `T2 = ||U^Q(U^Q phi1 U^Q phi2)||_1`.
///
/// Degenerate motion uses the closed forms `<phi1 phi2>/Q^2` and `<phi1 phi2>/Q^3`;
/// other kinds need Gaussian test functions and use time quadrature of exact
/// Gaussian overlaps.
pub fn quadratic_forms(motion: &MotionModel, q: f64, phi1: &TestFunction, phi2: Option<&TestFunction>) -> Result<QuadraticForms> {
    if !(q > 0.0) {
        return Err(domain("Q must be positive"));
    }
    let phi2 = phi2.unwrap_or(phi1);
    if phi1.dim() != motion.dim() || phi2.dim() != motion.dim() {
        return Err(domain("test function and motion dimensions differ"));
    }
    if motion.is_degenerate() {
        let prod = match (phi1.gaussian(), phi2.gaussian()) {
            (Some(a), Some(b)) => a.overlap(b),
            _ if std::ptr::eq(phi1, phi2) => phi1.square_integral(),
            _ => return Err(Error::Unsupported("product integral of two custom test functions".into())),
        };
        return Ok(QuadraticForms { t1: prod / (q * q), t2: prod / (q * q * q), t1_error: 0.0, t2_error: 0.0 });
    }
    let (g1, g2) = match (phi1.gaussian(), phi2.gaussian()) {
        (Some(a), Some(b)) => (a.clone(), b.clone()),
        _ => return Err(Error::Unsupported("quadratic forms for non-Gaussian test functions under spatial motion".into())),
    };
    let kappa = lebesgue_potential_factor(motion, q)?;
    let first = first_panel(motion, &g1, q).min(first_panel(motion, &g2, q));
    let cross = |a: &Gaussian, b: &Gaussian, t: f64| mixture_overlap(std::slice::from_ref(a), &motion.evolve_gaussian(b, t));
    let (i12, e12) = laplace_integral(q, first, &|t| cross(&g1, &g2, t));
    let (i21, e21) = laplace_integral(q, first, &|t| cross(&g2, &g1, t));
    let t1 = 0.5 * kappa * (i12 + i21);
    let t1_error = 0.5 * kappa * (e12 + e21);
    let (t2, t2_error) = if motion.is_translation_invariant() {
        // Symmetric semigroups: <T_t f, T_u g> = <f, T_{t+u} g>.
        let (v, e) = laplace_integral(q, first, &|s| s * cross(&g1, &g2, s));
        (kappa * v, kappa * e)
    } else {
        let cuts = quad::geometric_panels(first, 60.0 / q);
        let nodes = |rule: &quad::GaussLegendre| -> Vec<(f64, f64)> {
            cuts.windows(2).flat_map(|w| rule.mapped(w[0], w[1]).collect::<Vec<_>>()).collect()
        };
        let double = |rule: &quad::GaussLegendre| -> f64 {
            let pts = nodes(rule);
            let a: Vec<Vec<Gaussian>> = pts.iter().map(|(t, _)| motion.evolve_gaussian(&g1, *t)).collect();
            let b: Vec<Vec<Gaussian>> = pts.iter().map(|(t, _)| motion.evolve_gaussian(&g2, *t)).collect();
            let mut acc = 0.0;
            for (i, (t, wt)) in pts.iter().enumerate() {
                for (j, (u, wu)) in pts.iter().enumerate() {
                    acc += wt * wu * (-q * (t + u)).exp() * mixture_overlap(&a[i], &b[j]);
                }
            }
            acc
        };
        let hi = double(quad::gl30());
        let lo = double(quad::gl15());
        (kappa * hi, kappa * (hi - lo).abs())
    };
    if !(t1.is_finite() && t2.is_finite()) {
        return Err(domain("quadratic form quadrature diverged"));
    }
    Ok(QuadraticForms { t1, t2, t1_error, t2_error })
}

/// `Cov(X(s), X(t))` of the Wiener limit: `H (s^t)(T1 + Vq T2)` for the
/// branching system, `V H q (s^t) T2` for the superprocess.
pub fn clt_covariance(model: Model, params: &BranchingParams, s: f64, t: f64, forms: &QuadraticForms) -> Result<f64> {
    if !((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&t)) {
        return Err(domain("covariance times must lie in [0, 1]"));
    }
    Ok(params.h() * s.min(t) * clt_rate(model, params, forms))
}

/// Covariance per unit time of the Wiener limit.
pub fn clt_rate(model: Model, params: &BranchingParams, forms: &QuadraticForms) -> f64 {
    match model {
        Model::Branching => forms.t1 + params.vq() * forms.t2,
        Model::Super => params.vq() * forms.t2,
    }
}

/// `H <lambda, U^Q phi>`, the slope of the LLN line.
pub fn lln_slope(params: &BranchingParams, motion: &MotionModel, phi: &TestFunction) -> Result<f64> {
    Ok(params.h() * phi.integral() * lebesgue_potential_factor(motion, params.death_rate())?)
}

/// `H int_0^1 <lambda, v_phi(., chi_nu(t))> dt`, one steady state per level of `chi_nu`.
pub fn lambda_measure(problem: &Problem, nu: &MeasureOnUnit) -> Result<f64> {
    let h = problem.params().h();
    let opts = SteadyOptions::default();
    let mut total = 0.0;
    for (a, b, level) in nu.pieces() {
        if level == 0.0 {
            continue;
        }
        let s = steady_state(problem, level, &opts).map_err(|e| e.context(format!("chi level {level} on [{a}, {b})")))?;
        total += (b - a) * problem.integrate(&s.values);
    }
    Ok(h * total)
}

/// Scalar cumulant `c(s)` of a Legendre transform.
pub trait Cumulant: Sync {
    fn value(&self, s: f64) -> Result<f64>;
    fn derivative(&self, s: f64) -> Result<f64>;
    /// Supremum of the admissible `s` (may be infinite).
    fn upper(&self) -> f64;
}

/// `c(s) = H <lambda, v_phi(., s)>` from the steady-state solver.
#[derive(Debug, Clone)]
pub struct SteadyCumulant {
    problem: Problem,
    opts: SteadyOptions,
}

impl SteadyCumulant {
    pub fn new(problem: Problem) -> Self {
        Self { problem, opts: SteadyOptions { tol: 1e-13, max_sweeps: 10_000_000, threshold_limit: Some(1.0) } }
    }
}

impl Cumulant for SteadyCumulant {
    fn value(&self, s: f64) -> Result<f64> {
        let st = steady_state(&self.problem, s, &self.opts)?;
        Ok(self.problem.params().h() * self.problem.integrate(&st.values))
    }

    fn derivative(&self, s: f64) -> Result<f64> {
        let st = steady_state(&self.problem, s, &self.opts)?;
        let d = steady_derivative(&self.problem, &st)?;
        Ok(self.problem.params().h() * self.problem.integrate(&d))
    }

    fn upper(&self) -> f64 {
        self.problem.theta_max()
    }
}

/// `c(s) = a s^2`, the second-order model of the cumulant.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticCumulant {
    pub a: f64,
}

impl QuadraticCumulant {
    /// `a = H (T1 + Vq T2)` or `V H q T2`.
    pub fn from_forms(model: Model, params: &BranchingParams, forms: &QuadraticForms) -> Self {
        Self { a: params.h() * clt_rate(model, params, forms) }
    }
}

impl Cumulant for QuadraticCumulant {
    fn value(&self, s: f64) -> Result<f64> {
        Ok(self.a * s * s)
    }

    fn derivative(&self, s: f64) -> Result<f64> {
        Ok(2.0 * self.a * s)
    }

    fn upper(&self) -> f64 {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Active {
    Interior,
    /// Supremum taken at `upper * (1 - margin)`.
    Upper,
    /// Supremum approached as `s -> -inf`.
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateResult {
    pub value: f64,
    /// Maximising dual variable per increment (one entry for scalars).
    pub maximizers: Vec<f64>,
    pub active: Vec<Active>,
}

impl RateResult {
    pub fn boundary_active(&self) -> bool {
        self.active.iter().any(|a| *a != Active::Interior)
    }
}

const UPPER_MARGIN: f64 = 1e-9;
const LOWER_LIMIT: f64 = -1e6;

/// `sup_s [x s - c(s)]` by bisection on the decreasing derivative `x - c'(s)`.
fn conjugate(c: &dyn Cumulant, x: f64) -> Result<(f64, f64, Active)> {
    let d0 = c.derivative(0.0)?;
    if x == d0 {
        return Ok((0.0, 0.0, Active::Interior));
    }
    let (mut lo, mut hi);
    if x > d0 {
        lo = 0.0;
        let top = c.upper();
        if top.is_finite() {
            let sb = top * (1.0 - UPPER_MARGIN);
            if c.derivative(sb)? <= x {
                return Ok((x * sb - c.value(sb)?, sb, Active::Upper));
            }
            hi = sb;
        } else {
            hi = 1.0;
            while c.derivative(hi)? < x {
                hi *= 2.0;
                if hi > 1e12 {
                    return Err(domain("conjugate maximiser escaped to infinity"));
                }
            }
        }
    } else {
        hi = 0.0;
        lo = -1.0;
        while c.derivative(lo)? > x {
            if lo < LOWER_LIMIT {
                // Not attained: report the limit along s -> -inf, or +inf if it keeps growing.
                let a = x * lo - c.value(lo)?;
                let b = x * 2.0 * lo - c.value(2.0 * lo)?;
                let value = if (b - a).abs() > 1e-6 * (1.0 + a.abs()) { f64::INFINITY } else { b };
                return Ok((value, 2.0 * lo, Active::Lower));
            }
            hi = lo;
            lo *= 2.0;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-14 * (1.0 + mid.abs()) {
            break;
        }
        if c.derivative(mid)? < x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = 0.5 * (lo + hi);
    Ok(((x * s - c.value(s)?).max(0.0), s, Active::Interior))
}

/// `Lambda*(x) = sup_s [x s - c(s)]`.
pub fn ldp_rate_scalar(c: &dyn Cumulant, x: f64) -> Result<RateResult> {
    if !(x >= 0.0) {
        return Err(domain(format!("scalar rate needs x >= 0, got {x}")));
    }
    let (value, s, active) = conjugate(c, x)?;
    Ok(RateResult { value, maximizers: vec![s], active: vec![active] })
}

/// Path values on `n` uniform increments, by linear interpolation.
fn resample(f: &PathSample, n: usize) -> Vec<f64> {
    let m = f.m();
    if m % n == 0 {
        return f.values().iter().step_by(m / n).cloned().collect();
    }
    let v = f.values();
    (0..=n)
        .map(|j| {
            let x = j as f64 / n as f64 * m as f64;
            let k = (x.floor() as usize).min(m - 1);
            let w = x - k as f64;
            v[k] * (1.0 - w) + v[k + 1] * w
        })
        .collect()
}

/// `Lambda*(f) = sum_j sup_s [s df_j - c(s)/n]` over `n` increments.
///
/// In the variables `s_j = theta_j + ... + theta_n` the supremum over the
/// tilt vector separates into `n` scalar conjugates, evaluated in parallel.
pub fn ldp_rate_path(c: &dyn Cumulant, f: &PathSample, n: usize) -> Result<RateResult> {
    if n == 0 {
        return Err(domain("need at least one increment"));
    }
    if f.values()[0].abs() > 1e-12 {
        return Err(domain("path must start at 0"));
    }
    let v = resample(f, n);
    let incs: Vec<f64> = v.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(j) = incs.iter().position(|d| *d < -1e-12) {
        return Err(domain(format!("path decreases on increment {j}")));
    }
    let nf = n as f64;
    let parts: Vec<(f64, f64, Active)> =
        incs.par_iter().map(|d| conjugate(c, nf * d.max(0.0))).collect::<Result<_>>()?;
    Ok(RateResult {
        value: parts.iter().map(|p| p.0).sum::<f64>() / nf,
        maximizers: parts.iter().map(|p| p.1).collect(),
        active: parts.iter().map(|p| p.2).collect(),
    })
}

/// `||f||^2_{H1} / (4 a)` with `a = H(T1 + Vq T2)` or `V H q T2`.
///
/// Infinite when halving the grid keeps inflating the discrete seminorm
/// (ratio above 1.5 on the last two refinements), which flags non-H1 input.
pub fn mdp_rate_path(model: Model, params: &BranchingParams, forms: &QuadraticForms, f: &PathSample) -> Result<RateResult> {
    if f.values()[0].abs() > 1e-12 {
        return Err(domain("path must start at 0"));
    }
    let denom = 4.0 * params.h() * clt_rate(model, params, forms);
    let mut ladder = vec![f.h1_seminorm_sq()];
    let mut cur = f.clone();
    while ladder.len() < 3 {
        match cur.coarsen(2) {
            Some(c) => {
                ladder.push(c.h1_seminorm_sq());
                cur = c;
            }
            None => break,
        }
    }
    let rough = ladder.len() == 3 && ladder[1] > 0.0 && ladder[2] > 0.0 && ladder[0] / ladder[1] > 1.5 && ladder[1] / ladder[2] > 1.5;
    let value = if rough { f64::INFINITY } else { ladder[0] / denom };
    Ok(RateResult { value, maximizers: vec![], active: vec![] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::derive_constants;
    use std::f64::consts::PI;

    fn preset() -> BranchingParams {
        BranchingParams::new(1.0, 0.25, 1.0).unwrap()
    }

    fn e_minus_x2() -> TestFunction {
        TestFunction::gaussian_bump(vec![0.0], 1.0, 1.0).unwrap()
    }

    #[test]
    fn degenerate_forms() {
        let f = quadratic_forms(&MotionModel::degenerate(1), 0.5, &e_minus_x2(), None).unwrap();
        let sq = (PI / 2.0).sqrt();
        assert!((f.t1 - sq / 0.25).abs() < 1e-12);
        assert!((f.t2 - sq / 0.125).abs() < 1e-12);
        let c = clt_covariance(Model::Branching, &preset(), 1.0, 1.0, &f).unwrap();
        assert!((c - 7.519884823).abs() < 1e-6);
        let c = clt_covariance(Model::Super, &preset(), 1.0, 1.0, &f).unwrap();
        assert!((c - 2.506628274).abs() < 1e-6);
        assert_eq!(clt_covariance(Model::Super, &preset(), 0.0, 1.0, &f).unwrap(), 0.0);
    }

    #[test]
    fn brownian_forms_shrink_toward_zero_diffusion() {
        let phi = e_minus_x2();
        let slow = quadratic_forms(&MotionModel::brownian(1e-4, 1).unwrap(), 0.5, &phi, None).unwrap();
        let deg = quadratic_forms(&MotionModel::degenerate(1), 0.5, &phi, None).unwrap();
        assert!((slow.t1 / deg.t1 - 1.0).abs() < 1e-3);
        assert!((slow.t2 / deg.t2 - 1.0).abs() < 1e-3);
        let fast = quadratic_forms(&MotionModel::brownian(1.0, 1).unwrap(), 0.5, &phi, None).unwrap();
        assert!(fast.t1 < deg.t1 && fast.t2 < deg.t2);
        assert!(fast.t1_error < 1e-8 * fast.t1);
    }

    #[test]
    fn lln_slope_preset() {
        let s = lln_slope(&preset(), &MotionModel::brownian(1.0, 1).unwrap(), &e_minus_x2()).unwrap();
        assert!((s - 2.0 * PI.sqrt()).abs() < 1e-12);
        let ou = MotionModel::ornstein_uhlenbeck(0.6, 1.0, 1).unwrap();
        assert!(lln_slope(&preset(), &ou, &e_minus_x2()).is_err());
    }

    #[test]
    fn lambda_of_dirac() {
        let p = Problem::point(Model::Super, preset());
        let one = lambda_measure(&p, &MeasureOnUnit::dirac(1.0, 0.16).unwrap()).unwrap();
        assert!((one - 0.4).abs() < 1e-10);
        let half = lambda_measure(&p, &MeasureOnUnit::dirac(0.5, 0.16).unwrap()).unwrap();
        assert!((half - 0.2).abs() < 1e-10);
        assert_eq!(lambda_measure(&p, &MeasureOnUnit::zero()).unwrap(), 0.0);
    }

    #[test]
    fn scalar_rate_closed_form() {
        // Degenerate super on the point: c'(s) = H / sqrt(Q^2 - 4 Vq s).
        let p = Problem::point(Model::Super, preset());
        let c = SteadyCumulant::new(p);
        let d = derive_constants(&preset());
        for x in [2.5, 3.0, 5.0] {
            let r = ldp_rate_scalar(&c, x).unwrap();
            let theta = (0.25 - 1.0 / (x * x)) / 1.0;
            let v = (0.5 - (0.25 - theta).sqrt()) / 0.5;
            assert!((r.maximizers[0] - theta).abs() < 1e-8, "{x}");
            assert!((r.value - (x * theta - v)).abs() < 1e-8);
        }
        let zero = ldp_rate_scalar(&c, 2.0).unwrap();
        assert!(zero.value.abs() < 1e-12);
        assert!(ldp_rate_scalar(&c, 0.0).unwrap().value.is_infinite());
        assert!(d.q0_super > 0.0);
    }

    #[test]
    fn branching_rate_at_zero_is_h() {
        let c = SteadyCumulant::new(Problem::point(Model::Branching, preset()));
        let r = ldp_rate_scalar(&c, 0.0).unwrap();
        assert!((r.value - 1.0).abs() < 1e-5, "{}", r.value);
        assert_eq!(r.active[0], Active::Lower);
    }

    #[test]
    fn quadratic_legendre_is_mdp() {
        let f = quadratic_forms(&MotionModel::degenerate(1), 0.5, &e_minus_x2(), None).unwrap();
        let path = PathSample::from_fn(64, |t| 0.3 * t + 0.2 * t * t).unwrap();
        let q = QuadraticCumulant::from_forms(Model::Branching, &preset(), &f);
        let l = ldp_rate_path(&q, &path, 64).unwrap();
        let m = mdp_rate_path(Model::Branching, &preset(), &f, &path).unwrap();
        assert!((l.value - m.value).abs() < 1e-9 * m.value.max(1.0));
        let line = PathSample::from_fn(16, |t| t).unwrap();
        let r = mdp_rate_path(Model::Branching, &preset(), &f, &line).unwrap();
        assert!((r.value - 0.033245).abs() < 1e-6);
    }
}
