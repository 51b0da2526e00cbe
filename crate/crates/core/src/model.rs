//! Model constants, test functions, measures on the unit interval and sampled paths.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Lifetime rate `V`, branching probability `q` and immigration intensity `H`.
///
/// Each particle lives an `Exp(V)` time and is then replaced by two children
/// with probability `q` or by nothing. `q = 0` is the pure-death system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchingParams {
    v: f64,
    q: f64,
    h: f64,
}

impl BranchingParams {
    pub fn new(v: f64, q: f64, h: f64) -> Result<Self> {
        if !(v.is_finite() && v > 0.0) {
            return Err(domain(format!("lifetime rate V must be positive and finite, got {v}")));
        }
        if !(q.is_finite() && (0.0..0.5).contains(&q)) {
            return Err(domain(format!("branching probability q must lie in [0, 1/2), got {q}")));
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(domain(format!("immigration intensity H must be positive and finite, got {h}")));
        }
        Ok(Self { v, q, h })
    }

    pub fn v(&self) -> f64 {
        self.v
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// `Vq`, the coefficient of the quadratic term in the one-particle equations.
    pub fn vq(&self) -> f64 {
        self.v * self.q
    }

    /// Intensity of dying `Q = V(1-2q)`.
    pub fn death_rate(&self) -> f64 {
        self.v * (1.0 - 2.0 * self.q)
    }

    /// Same constants with a different immigration intensity.
    pub fn with_immigration(&self, h: f64) -> Result<Self> {
        Self::new(self.v, self.q, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedRates {
    /// `Q = V(1-2q)`.
    pub death_rate: f64,
    /// Threshold of the branching system, `V(1 - 2 sqrt(q(1-q)))`.
    pub q0_branching: f64,
    /// Threshold of the superprocess, `Q^2/(4Vq)`; infinite for `q = 0`.
    pub q0_super: f64,
}

pub fn derive_constants(params: &BranchingParams) -> DerivedRates {
    let (v, q) = (params.v, params.q);
    let death_rate = params.death_rate();
    let q0_branching = v * (1.0 - 2.0 * (q * (1.0 - q)).sqrt());
    let q0_super = if q == 0.0 { f64::INFINITY } else { death_rate * death_rate / (4.0 * v * q) };
    debug_assert!(q0_branching > 0.0 && q0_branching <= death_rate);
    DerivedRates { death_rate, q0_branching, q0_super }
}

/// Which one-particle equation a computation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Model {
    Branching,
    Super,
}

impl Model {
    /// Admissible sup-norm of the source term for this model.
    pub fn threshold(self, params: &BranchingParams) -> f64 {
        let d = derive_constants(params);
        match self {
            Model::Branching => d.q0_branching,
            Model::Super => d.q0_super,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Model::Branching => "bps",
            Model::Super => "super",
        }
    }
}

/// Parameters of the level-`n` particle approximation of the superprocess.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxParams {
    pub level: u32,
    /// `V_n = 2nVq`.
    pub lifetime_rate: f64,
    /// `q_n = (2nq + 2q - 1)/(4nq)`.
    pub branch_prob: f64,
    /// Mass `1/n` carried by each particle.
    pub mass: f64,
    /// Immigration intensity `nH`.
    pub immigration: f64,
    /// `V_n(1 - 2q_n)`, held equal to the base `Q`.
    pub death_rate: f64,
}

pub fn approx_level_params(params: &BranchingParams, n: u32) -> Result<ApproxParams> {
    if n == 0 {
        return Err(domain("approximation level must be at least 1"));
    }
    let (v, q, h) = (params.v, params.q, params.h);
    if q == 0.0 {
        return Err(domain("superprocess approximation needs q > 0"));
    }
    let nf = n as f64;
    let lifetime_rate = 2.0 * nf * v * q;
    let branch_prob = (2.0 * nf * q + 2.0 * q - 1.0) / (4.0 * nf * q);
    if branch_prob < 0.0 {
        return Err(domain(format!(
            "level {n} gives negative branching probability {branch_prob:.6}; need n >= (1-2q)/(2q) = {:.4}",
            (1.0 - 2.0 * q) / (2.0 * q)
        )));
    }
    Ok(ApproxParams {
        level: n,
        lifetime_rate,
        branch_prob,
        mass: 1.0 / nf,
        immigration: nf * h,
        death_rate: params.death_rate(),
    })
}

/// Axis-aligned Gaussian `A * prod_i exp(-(x_i - c_i)^2 / (2 s_i^2))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub amplitude: f64,
    pub center: Vec<f64>,
    pub std: Vec<f64>,
}

impl Gaussian {
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut e = 0.0;
        for ((xi, ci), si) in x.iter().zip(&self.center).zip(&self.std) {
            let z = (xi - ci) / si;
            e += z * z;
        }
        self.amplitude * (-0.5 * e).exp()
    }

    pub fn integral(&self) -> f64 {
        self.amplitude * self.std.iter().map(|s| (2.0 * PI).sqrt() * s).product::<f64>()
    }

    pub fn square_integral(&self) -> f64 {
        self.amplitude * self.amplitude * self.std.iter().map(|s| PI.sqrt() * s).product::<f64>()
    }

    /// `int G_a G_b dx`.
    pub fn overlap(&self, other: &Gaussian) -> f64 {
        let mut acc = self.amplitude * other.amplitude;
        for i in 0..self.dim() {
            let (sa, sb) = (self.std[i], other.std[i]);
            let v = sa * sa + sb * sb;
            let dc = self.center[i] - other.center[i];
            acc *= (2.0 * PI).sqrt() * sa * sb / v.sqrt() * (-0.5 * dc * dc / v).exp();
        }
        acc
    }

    /// Distance from the center beyond which the profile is below `rel * amplitude` on every axis.
    pub fn reach(&self, rel: f64) -> Vec<f64> {
        let k = (-2.0 * rel.ln()).sqrt();
        self.std.iter().map(|s| k * s).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    GaussianBump,
    ScaledGaussian,
    Product,
    Custom,
}

type Callable = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Profile {
    Gaussian(Gaussian),
    Custom { dim: usize, f: Callable },
}

/// Nonnegative rapidly decreasing test function with cached norms.
#[derive(Clone)]
pub struct TestFunction {
    shape: Shape,
    profile: Profile,
    sup_norm: f64,
    integral: f64,
    square_integral: f64,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("TestFunction");
        s.field("shape", &self.shape);
        if let Profile::Gaussian(g) = &self.profile {
            s.field("gaussian", g);
        }
        s.field("sup_norm", &self.sup_norm)
            .field("integral", &self.integral)
            .field("square_integral", &self.square_integral)
            .finish()
    }
}

impl TestFunction {
    /// `a * exp(-|x - c|^2 / w^2)`.
    pub fn gaussian_bump(center: Vec<f64>, width: f64, amplitude: f64) -> Result<Self> {
        let d = center.len();
        Self::from_gaussian(Shape::GaussianBump, center, vec![width / 2f64.sqrt(); d], amplitude, width)
    }

    /// `mass` times the density of `N(c, w^2 I)`.
    pub fn scaled_gaussian(center: Vec<f64>, width: f64, mass: f64) -> Result<Self> {
        let d = center.len() as i32;
        let amplitude = mass / ((2.0 * PI).sqrt() * width).powi(d);
        Self::from_gaussian(Shape::ScaledGaussian, center.clone(), vec![width; center.len()], amplitude, width)
    }

    /// `a * prod_i exp(-(x_i - c_i)^2 / w_i^2)`.
    pub fn product(center: Vec<f64>, widths: Vec<f64>, amplitude: f64) -> Result<Self> {
        if widths.len() != center.len() {
            return Err(domain(format!(
                "product test function: {} widths for {} coordinates",
                widths.len(),
                center.len()
            )));
        }
        for &w in &widths {
            check_width(w)?;
        }
        let std = widths.iter().map(|w| w / 2f64.sqrt()).collect();
        Self::from_gaussian(Shape::Product, center, std, amplitude, 1.0)
    }

    /// Arbitrary nonnegative function with user-supplied norms.
    ///
    /// Only the degenerate motion can evaluate semigroups of such functions exactly.
    pub fn custom(
        dim: usize,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        sup_norm: f64,
        integral: f64,
        square_integral: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(domain("test function dimension must be at least 1"));
        }
        for (name, v) in [("sup-norm", sup_norm), ("integral", integral), ("square integral", square_integral)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(domain(format!("custom test function {name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(Self {
            shape: Shape::Custom,
            profile: Profile::Custom { dim, f: Arc::new(f) },
            sup_norm,
            integral,
            square_integral,
        })
    }

    fn from_gaussian(shape: Shape, center: Vec<f64>, std: Vec<f64>, amplitude: f64, width: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(domain("test function dimension must be at least 1"));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(domain("test function center must be finite"));
        }
        check_width(width)?;
        if !(amplitude.is_finite() && amplitude >= 0.0) {
            return Err(domain(format!("amplitude must be finite and nonnegative, got {amplitude}")));
        }
        let g = Gaussian { amplitude, center, std };
        let (integral, square_integral) = (g.integral(), g.square_integral());
        Ok(Self { shape, sup_norm: amplitude, integral, square_integral, profile: Profile::Gaussian(g) })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        match &self.profile {
            Profile::Gaussian(g) => g.dim(),
            Profile::Custom { dim, .. } => *dim,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.profile {
            Profile::Gaussian(g) => g.eval(x),
            Profile::Custom { f, .. } => f(x),
        }
    }

    pub fn gaussian(&self) -> Option<&Gaussian> {
        match &self.profile {
            Profile::Gaussian(g) => Some(g),
            Profile::Custom { .. } => None,
        }
    }

    /// `||phi||_inf`.
    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    /// `<lambda, phi>`.
    pub fn integral(&self) -> f64 {
        self.integral
    }

    /// `||phi^2||_1`.
    pub fn square_integral(&self) -> f64 {
        self.square_integral
    }

    /// Same function multiplied by `c >= 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c.is_finite() && c >= 0.0) {
            return Err(domain(format!("scale factor must be finite and nonnegative, got {c}")));
        }
        let profile = match &self.profile {
            Profile::Gaussian(g) => Profile::Gaussian(Gaussian { amplitude: g.amplitude * c, ..g.clone() }),
            Profile::Custom { dim, f } => {
                let f = f.clone();
                Profile::Custom { dim: *dim, f: Arc::new(move |x: &[f64]| c * f(x)) }
            }
        };
        Ok(Self {
            shape: self.shape,
            profile,
            sup_norm: self.sup_norm * c,
            integral: self.integral * c,
            square_integral: self.square_integral * c * c,
        })
    }
}

fn check_width(w: f64) -> Result<()> {
    if !(w.is_finite() && w > 0.0) {
        return Err(domain(format!("width must be positive and finite, got {w}")));
    }
    Ok(())
}

/// Finite signed atomic measure on `[0, 1]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasureOnUnit {
    atoms: Vec<(f64, f64)>,
}

impl MeasureOnUnit {
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self> {
        for &(t, w) in &atoms {
            if !(0.0..=1.0).contains(&t) {
                return Err(domain(format!("atom location {t} outside [0, 1]")));
            }
            if !w.is_finite() {
                return Err(domain(format!("atom weight {w} is not finite")));
            }
        }
        let mut atoms = atoms;
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self { atoms })
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// `theta * delta_t`.
    pub fn dirac(t: f64, theta: f64) -> Result<Self> {
        Self::new(vec![(t, theta)])
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn chi(&self, s: f64) -> f64 {
        chi_of_measure(self, s)
    }

    /// `chi` as consecutive pieces `(start, end, value)` covering `[0, 1)`.
    pub fn pieces(&self) -> Vec<(f64, f64, f64)> {
        let mut cuts: Vec<f64> = vec![0.0];
        for &(t, _) in &self.atoms {
            if t > 0.0 && t < 1.0 && *cuts.last().unwrap() != t {
                cuts.push(t);
            }
        }
        cuts.push(1.0);
        cuts.windows(2).map(|w| (w[0], w[1], self.chi(w[0]))).collect()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { atoms: self.atoms.iter().map(|&(t, w)| (t, c * w)).collect() }
    }

    /// `sup_s |chi(s)|`.
    pub fn chi_sup(&self) -> f64 {
        self.pieces().iter().fold(0.0, |m, p| m.max(p.2.abs()))
    }
}

/// `nu((s, 1])`.
pub fn chi_of_measure(nu: &MeasureOnUnit, s: f64) -> f64 {
    nu.atoms.iter().filter(|a| a.0 > s).map(|a| a.1).sum()
}

/// Values of a path on the uniform grid `t_j = j/m`, `j = 0..=m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    values: Vec<f64>,
}

impl PathSample {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(domain("a path needs at least two grid points"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(domain("path values must be finite"));
        }
        Ok(Self { values })
    }

    pub fn from_fn(m: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new((0..=m).map(|j| f(j as f64 / m as f64)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of intervals.
    pub fn m(&self) -> usize {
        self.values.len() - 1
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.m() as f64
    }

    pub fn times(&self) -> Vec<f64> {
        let m = self.m() as f64;
        (0..self.values.len()).map(|j| j as f64 / m).collect()
    }

    pub fn last(&self) -> f64 {
        self.values[self.m()]
    }

    pub fn increments(&self) -> Vec<f64> {
        self.values.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// `sum_j (f_{j+1} - f_j)^2 / dt`.
    pub fn h1_seminorm_sq(&self) -> f64 {
        let dt = self.dt();
        self.values.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0]) / dt).sum()
    }

    pub fn h1_seminorm(&self) -> f64 {
        self.h1_seminorm_sq().sqrt()
    }

    /// `sup |f(t) - f(s)|` over grid points with `|t - s| <= delta`.
    pub fn modulus(&self, delta: f64) -> f64 {
        let k = ((delta * self.m() as f64) + 1e-12).floor() as usize;
        let mut w: f64 = 0.0;
        for i in 0..self.values.len() {
            for j in i + 1..=(i + k).min(self.m()) {
                w = w.max((self.values[j] - self.values[i]).abs());
            }
        }
        w
    }

    /// Every `stride`-th value; `stride` must divide `m`.
    pub fn coarsen(&self, stride: usize) -> Option<Self> {
        if stride == 0 || self.m() % stride != 0 {
            return None;
        }
        Some(Self { values: self.values.iter().step_by(stride).copied().collect() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn constants_for_quarter_branching() {
        let p = BranchingParams::new(1.0, 0.25, 1.0).unwrap();
        let d = derive_constants(&p);
        assert_eq!(d.death_rate, 0.5);
        assert_eq!(d.q0_super, 0.25);
        assert!(approx(d.q0_branching, 0.1339745962155614, 1e-15));
        // Second route: smaller root of (Q - t)^2 = 4Vq t.
        let (qq, vq) = (0.5f64, 0.25f64);
        let b = 2.0 * qq + 4.0 * vq;
        let root = (b - (b * b - 4.0 * qq * qq).sqrt()) / 2.0;
        assert!(approx(d.q0_branching, root, 1e-14));
    }

    #[test]
    fn pure_death_has_infinite_super_threshold() {
        let d = derive_constants(&BranchingParams::new(1.0, 0.0, 1.0).unwrap());
        assert_eq!(d.death_rate, 1.0);
        assert!(d.q0_super.is_infinite());
        assert_eq!(d.q0_branching, 1.0);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(BranchingParams::new(1.0, 0.5, 1.0).is_err());
        assert!(BranchingParams::new(0.0, 0.2, 1.0).is_err());
        assert!(BranchingParams::new(1.0, -0.1, 1.0).is_err());
        assert!(BranchingParams::new(1.0, 0.2, 0.0).is_err());
    }

    #[test]
    fn approximation_levels() {
        let p = BranchingParams::new(1.0, 0.25, 1.0).unwrap();
        let a1 = approx_level_params(&p, 1).unwrap();
        assert_eq!((a1.lifetime_rate, a1.branch_prob), (0.5, 0.0));
        let a2 = approx_level_params(&p, 2).unwrap();
        assert_eq!((a2.lifetime_rate, a2.branch_prob, a2.mass, a2.immigration), (1.0, 0.25, 0.5, 2.0));
        for n in 1..50 {
            let a = approx_level_params(&p, n).unwrap();
            assert!(approx(a.lifetime_rate * (1.0 - 2.0 * a.branch_prob), 0.5, 1e-14));
            assert_eq!(a.death_rate, 0.5);
        }
        let p0 = BranchingParams::new(1.0, 0.0, 1.0).unwrap();
        assert!(approx_level_params(&p0, 3).is_err());
        let small_q = BranchingParams::new(1.0, 0.1, 1.0).unwrap();
        assert!(approx_level_params(&small_q, 1).is_err());
        assert!(approx_level_params(&small_q, 4).is_ok());
    }

    #[test]
    fn chi_examples() {
        let d1 = MeasureOnUnit::dirac(1.0, 1.0).unwrap();
        assert_eq!(d1.chi(0.3), 1.0);
        assert_eq!(d1.chi(1.0), 0.0);
        let half = MeasureOnUnit::dirac(0.5, 1.0).unwrap();
        assert_eq!(half.chi(0.5), 0.0);
        let signed = MeasureOnUnit::new(vec![(1.0, 1.0), (0.5, -1.0)]).unwrap();
        assert_eq!(signed.chi(0.25), 0.0);
        assert_eq!(signed.chi(0.75), 1.0);
        assert_eq!(signed.pieces(), vec![(0.0, 0.5, 0.0), (0.5, 1.0, 1.0)]);
    }

    #[test]
    fn h1_of_linear_path() {
        for m in [1, 3, 16, 100] {
            let f = PathSample::from_fn(m, |t| -2.5 * t).unwrap();
            assert!(approx(f.h1_seminorm(), 2.5, 1e-13));
        }
        let c = PathSample::new(vec![1.0; 9]).unwrap();
        assert_eq!(c.h1_seminorm_sq(), 0.0);
    }

    #[test]
    fn gaussian_norms() {
        let phi = TestFunction::gaussian_bump(vec![0.0], 1.0, 1.0).unwrap();
        assert!(approx(phi.integral(), PI.sqrt(), 1e-15));
        assert!(approx(phi.square_integral(), (PI / 2.0).sqrt(), 1e-15));
        assert_eq!(phi.sup_norm(), 1.0);
        assert!(approx(phi.eval(&[1.0]), (-1f64).exp(), 1e-15));
        let dens = TestFunction::scaled_gaussian(vec![0.0, 1.0], 0.7, 3.0).unwrap();
        assert!(approx(dens.integral(), 3.0, 1e-14));
    }
}
