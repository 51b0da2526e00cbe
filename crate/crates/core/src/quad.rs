//! Gauss-Legendre rules and adaptive panel integration.

use std::f64::consts::PI;
use std::sync::OnceLock;

#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// `n`-point rule on `[-1, 1]`, nodes found by Newton iteration on `P_n`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..(n + 1) / 2 {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let (h, m) = (0.5 * (b - a), 0.5 * (a + b));
        self.nodes.iter().zip(&self.weights).map(move |(x, w)| (m + h * x, h * w))
    }

    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

pub(crate) fn gl15() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(15))
}

pub(crate) fn gl30() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(30))
}

/// Adaptive bisection with 15-point panels; returns `(value, error estimate)`.
pub fn adaptive(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> (f64, f64) {
    let rule = gl15();
    let whole = rule.integrate(a, b, &mut *f);
    refine(f, rule, a, b, whole, tol, 0)
}

fn refine(
    f: &mut dyn FnMut(f64) -> f64,
    rule: &GaussLegendre,
    a: f64,
    b: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> (f64, f64) {
    let m = 0.5 * (a + b);
    let left = rule.integrate(a, m, &mut *f);
    let right = rule.integrate(m, b, &mut *f);
    let err = (left + right - whole).abs();
    if err <= tol || depth >= 40 {
        return (left + right, err);
    }
    let (l, el) = refine(f, rule, a, m, left, 0.5 * tol, depth + 1);
    let (r, er) = refine(f, rule, m, b, right, 0.5 * tol, depth + 1);
    (l + r, el + er)
}

/// Panel breakpoints `0 = t_0 < ... < t_k = t_max` growing geometrically from `first`.
pub fn geometric_panels(first: f64, t_max: f64) -> Vec<f64> {
    let mut cuts = vec![0.0];
    let mut width = first.min(t_max);
    let mut t = 0.0;
    while t < t_max {
        t = (t + width).min(t_max);
        cuts.push(t);
        width *= 1.5;
    }
    cuts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_is_exact_for_polynomials() {
        let r = GaussLegendre::new(8);
        let w: f64 = r.mapped(-1.0, 1.0).map(|p| p.1).sum();
        assert!((w - 2.0).abs() < 1e-14);
        let v = r.integrate(0.0, 2.0, |x| x.powi(15));
        assert!((v - 2f64.powi(16) / 16.0).abs() < 1e-9);
    }

    #[test]
    fn adaptive_handles_peaks() {
        let (v, _) = adaptive(&mut |x: f64| (-x * x * 400.0).exp(), -3.0, 5.0, 1e-13);
        assert!((v - (PI / 400.0).sqrt()).abs() < 1e-12);
    }
}
