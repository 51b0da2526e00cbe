//! Experiment runner: config parsing, suites and artifacts.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::bps::{check_box, mean_occupation, superprocess_sequence, Normalization, SimConfig, SimModel};
use crate::error::{Error, Result};
use crate::limits::{
    clt_rate, ldp_rate_path, ldp_rate_scalar, lln_slope, mdp_rate_path, quadratic_forms, QuadraticCumulant,
    SteadyCumulant,
};
use crate::model::{approx_level_params, derive_constants, BranchingParams, MeasureOnUnit, Model, PathSample, TestFunction};
use crate::motion::{check_assumptions, MotionModel, Status};
use crate::pde::{
    comparison_check, predicted_log_laplace, solve_v, steady_state, Chi, Problem, SolveOptions, SpatialGrid,
    SteadyOptions, Target,
};
use crate::stats::{
    clt_verify, empirical_cgf, log_mean_exp_bootstrap, mean, run_ensemble, variance, ReplicateSet,
};

pub const SUITES: [&str; 10] = [
    "simulate",
    "solve",
    "rates",
    "verify-lln",
    "verify-clt",
    "verify-mdp",
    "verify-laplace",
    "verify-comparison",
    "assumptions",
    "superproc-converge",
];

pub const SEED_ENV: &str = "SUBCRIT_SEED";

/// Optional knobs of the suites.
#[derive(Debug, Clone, PartialEq)]
pub struct Tuning {
    /// Tilt for `solve`, `verify-laplace` and `verify-comparison`; defaults to `0.2 Q0 / ||phi||`.
    pub theta: Option<f64>,
    pub mdp_theta: f64,
    pub dx: f64,
    pub reach: f64,
    pub pde_dt: f64,
    pub solve_horizon: f64,
    pub levels: Vec<u32>,
    pub ess_floor: f64,
    pub bootstrap: usize,
    pub r_doubling: bool,
}

impl Default for Tuning {
    fn default() -> Self {
        Self {
            theta: None,
            mdp_theta: 0.05,
            dx: 0.1,
            reach: 10.0,
            pde_dt: 0.05,
            solve_horizon: 50.0,
            levels: vec![1, 2, 4, 8, 16],
            ess_floor: 30.0,
            bootstrap: 400,
            r_doubling: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: SimModel,
    pub params: BranchingParams,
    pub motion: MotionModel,
    pub phi: TestFunction,
    pub horizon: f64,
    pub dt: f64,
    pub box_radius: f64,
    pub replicates: u64,
    pub seed: u64,
    pub record: usize,
    pub explosion_cap: u64,
    pub norm: Normalization,
    pub suites: Vec<String>,
    pub out: Option<PathBuf>,
    pub tuning: Tuning,
}

fn qualify(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

/// Collects every violation instead of stopping at the first.
struct Reader {
    errs: Vec<String>,
}

impl Reader {
    fn keys(&mut self, t: &Table, section: &str, allowed: &[&str]) {
        for k in t.keys() {
            if !allowed.contains(&k.as_str()) {
                self.errs.push(format!("unknown key `{}`", qualify(section, k)));
            }
        }
    }

    fn section<'a>(&mut self, root: &'a Table, name: &str, required: bool) -> Option<&'a Table> {
        match root.get(name) {
            Some(Value::Table(t)) => Some(t),
            Some(v) => {
                self.errs.push(format!("`{name}` must be a section, got {}", v.type_str()));
                None
            }
            None => {
                if required {
                    self.errs.push(format!("missing required section `[{name}]`"));
                }
                None
            }
        }
    }

    fn missing(&mut self, section: &str, key: &str, required: bool) {
        if required {
            self.errs.push(format!("missing required key `{}`", qualify(section, key)));
        }
    }

    fn num(&mut self, t: &Table, section: &str, key: &str, required: bool) -> Option<f64> {
        match t.get(key) {
            Some(Value::Float(f)) => Some(*f),
            Some(Value::Integer(i)) => Some(*i as f64),
            Some(v) => {
                self.errs.push(format!("`{}` must be a number, got {}", qualify(section, key), v.type_str()));
                None
            }
            None => {
                self.missing(section, key, required);
                None
            }
        }
    }

    fn uint(&mut self, t: &Table, section: &str, key: &str, required: bool) -> Option<u64> {
        match t.get(key) {
            Some(Value::Integer(i)) if *i >= 0 => Some(*i as u64),
            Some(v) => {
                self.errs.push(format!("`{}` must be a nonnegative integer, got {v}", qualify(section, key)));
                None
            }
            None => {
                self.missing(section, key, required);
                None
            }
        }
    }

    fn string(&mut self, t: &Table, section: &str, key: &str, required: bool) -> Option<String> {
        match t.get(key) {
            Some(Value::String(s)) => Some(s.clone()),
            Some(v) => {
                self.errs.push(format!("`{}` must be a string, got {}", qualify(section, key), v.type_str()));
                None
            }
            None => {
                self.missing(section, key, required);
                None
            }
        }
    }

    fn boolean(&mut self, t: &Table, section: &str, key: &str) -> Option<bool> {
        match t.get(key) {
            Some(Value::Boolean(b)) => Some(*b),
            Some(v) => {
                self.errs.push(format!("`{}` must be a boolean, got {}", qualify(section, key), v.type_str()));
                None
            }
            None => None,
        }
    }

    fn list<T>(&mut self, t: &Table, section: &str, key: &str, item: impl Fn(&Value) -> Option<T>) -> Option<Vec<T>> {
        match t.get(key) {
            Some(Value::Array(a)) => {
                let out: Option<Vec<T>> = a.iter().map(item).collect();
                if out.is_none() {
                    self.errs.push(format!("`{}` has an element of the wrong type", qualify(section, key)));
                }
                out
            }
            Some(v) => {
                self.errs.push(format!("`{}` must be an array, got {}", qualify(section, key), v.type_str()));
                None
            }
            None => None,
        }
    }

    fn nums(&mut self, t: &Table, section: &str, key: &str) -> Option<Vec<f64>> {
        self.list(t, section, key, |v| match v {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => None,
        })
    }

    fn from_module<T>(&mut self, what: &str, r: Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(Error::Config(list)) => {
                self.errs.extend(list.into_iter().map(|e| format!("{what}: {e}")));
                None
            }
            Err(e) => {
                self.errs.push(format!("{what}: {e}"));
                None
            }
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let root: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        let mut r = Reader { errs: Vec::new() };
        r.keys(&root, "", &["model", "params", "motion", "phi", "sim", "norm", "tuning", "suites", "out"]);

        let model = r.section(&root, "model", true).and_then(|t| {
            let kind = r.string(t, "model", "kind", true)?;
            match kind.as_str() {
                "bps" => {
                    r.keys(t, "model", &["kind"]);
                    Some(SimModel::Branching)
                }
                "super-approx" => {
                    r.keys(t, "model", &["kind", "level"]);
                    let level = r.uint(t, "model", "level", true)?;
                    Some(SimModel::SuperApprox { level: level.min(u32::MAX as u64) as u32 })
                }
                other => {
                    r.errs.push(format!("`model.kind` must be \"bps\" or \"super-approx\", got \"{other}\""));
                    None
                }
            }
        });

        let params = r.section(&root, "params", true).and_then(|t| {
            r.keys(t, "params", &["V", "q", "H"]);
            let v = r.num(t, "params", "V", true);
            let q = r.num(t, "params", "q", true);
            let h = r.num(t, "params", "H", true);
            let p = r.from_module("params", BranchingParams::new(v?, q?, h?))?;
            Some(p)
        });
        if let (Some(SimModel::SuperApprox { level }), Some(p)) = (model, params.as_ref()) {
            r.from_module("model", approx_level_params(p, level.max(1)));
        }

        let motion = r.section(&root, "motion", true).and_then(|t| {
            let kind = r.string(t, "motion", "kind", true)?;
            let dim = r.uint(t, "motion", "dim", false).unwrap_or(1) as usize;
            let built = match kind.as_str() {
                "degenerate" => {
                    r.keys(t, "motion", &["kind", "dim"]);
                    MotionModel::new(crate::motion::MotionKind::Degenerate, dim)
                }
                "brownian" => {
                    r.keys(t, "motion", &["kind", "dim", "sigma"]);
                    let sigma = r.num(t, "motion", "sigma", false).unwrap_or(1.0);
                    MotionModel::brownian(sigma, dim)
                }
                "ou" => {
                    r.keys(t, "motion", &["kind", "dim", "theta", "sigma"]);
                    let theta = r.num(t, "motion", "theta", true);
                    let sigma = r.num(t, "motion", "sigma", false).unwrap_or(1.0);
                    MotionModel::ornstein_uhlenbeck(theta?, sigma, dim)
                }
                "compound-poisson" => {
                    r.keys(t, "motion", &["kind", "dim", "rate", "jump_std"]);
                    let rate = r.num(t, "motion", "rate", true);
                    let jump = r.num(t, "motion", "jump_std", true);
                    MotionModel::compound_poisson(rate?, jump?, dim)
                }
                other => {
                    r.errs.push(format!(
                        "`motion.kind` must be one of degenerate, brownian, ou, compound-poisson; got \"{other}\""
                    ));
                    return None;
                }
            };
            r.from_module("motion", built)
        });

        let dim = motion.as_ref().map_or(1, |m| m.dim());
        let phi = r.section(&root, "phi", true).and_then(|t| {
            let kind = r.string(t, "phi", "kind", true)?;
            let center = r.nums(t, "phi", "center").unwrap_or_else(|| vec![0.0; dim]);
            let built = match kind.as_str() {
                "gaussian-bump" => {
                    r.keys(t, "phi", &["kind", "center", "width", "amplitude"]);
                    let width = r.num(t, "phi", "width", false).unwrap_or(1.0);
                    let amp = r.num(t, "phi", "amplitude", false).unwrap_or(1.0);
                    TestFunction::gaussian_bump(center, width, amp)
                }
                "scaled-gaussian" => {
                    r.keys(t, "phi", &["kind", "center", "width", "mass"]);
                    let width = r.num(t, "phi", "width", false).unwrap_or(1.0);
                    let mass = r.num(t, "phi", "mass", false).unwrap_or(1.0);
                    TestFunction::scaled_gaussian(center, width, mass)
                }
                "product" => {
                    r.keys(t, "phi", &["kind", "center", "widths", "amplitude"]);
                    let widths = r.nums(t, "phi", "widths");
                    if widths.is_none() {
                        r.missing("phi", "widths", true);
                    }
                    let amp = r.num(t, "phi", "amplitude", false).unwrap_or(1.0);
                    TestFunction::product(center, widths?, amp)
                }
                other => {
                    r.errs.push(format!(
                        "`phi.kind` must be one of gaussian-bump, scaled-gaussian, product; got \"{other}\""
                    ));
                    return None;
                }
            };
            r.from_module("phi", built)
        });
        if let (Some(m), Some(p)) = (motion.as_ref(), phi.as_ref()) {
            if m.dim() != p.dim() {
                r.errs.push(format!("phi has dimension {} but motion has dimension {}", p.dim(), m.dim()));
            }
        }

        let norm = r.section(&root, "norm", true).and_then(|t| {
            let kind = r.string(t, "norm", "kind", true)?;
            match kind.as_str() {
                "linear" | "sqrt" => {
                    r.keys(t, "norm", &["kind"]);
                    Some(if kind == "linear" { Normalization::Linear } else { Normalization::Sqrt })
                }
                "moderate" => {
                    r.keys(t, "norm", &["kind", "alpha"]);
                    Some(Normalization::Moderate { alpha: r.num(t, "norm", "alpha", true)? })
                }
                other => {
                    r.errs.push(format!("`norm.kind` must be linear, sqrt or moderate; got \"{other}\""));
                    None
                }
            }
        });

        let mut sim = (None, None, None, None, None, 64usize, 10_000_000u64);
        if let Some(t) = r.section(&root, "sim", true) {
            r.keys(t, "sim", &["T", "dt", "R", "replicates", "seed", "record", "explosion_cap"]);
            sim.0 = r.num(t, "sim", "T", true);
            sim.1 = r.num(t, "sim", "dt", true);
            sim.2 = r.num(t, "sim", "R", true);
            sim.3 = r.uint(t, "sim", "replicates", true);
            sim.4 = r.uint(t, "sim", "seed", true);
            if let Some(m) = r.uint(t, "sim", "record", false) {
                sim.5 = m as usize;
            }
            if let Some(c) = r.uint(t, "sim", "explosion_cap", false) {
                sim.6 = c;
            }
            if sim.3 == Some(0) {
                r.errs.push("`sim.replicates` must be at least 1".into());
            }
            if sim.5 == 0 {
                r.errs.push("`sim.record` must be at least 1".into());
            }
        }
        if let (Some(h), Some(dt), Some(rad), Some(m), Some(n)) = (sim.0, sim.1, sim.2, model, norm) {
            let cfg = SimConfig { horizon: h, dt, box_radius: rad, model: m, norm: n, seed: 0, record: sim.5, explosion_cap: sim.6 };
            r.from_module("sim", cfg.validate());
            if let (Some(m), Some(p)) = (motion.as_ref(), phi.as_ref()) {
                if m.dim() == p.dim() {
                    r.from_module("sim.R", check_box(p, m, rad));
                }
            }
        }

        let suites = match root.get("suites") {
            None => Vec::new(),
            Some(_) => r
                .list(&root, "", "suites", |v| v.as_str().map(str::to_string))
                .unwrap_or_default()
                .into_iter()
                .filter(|s| {
                    let ok = SUITES.contains(&s.as_str());
                    if !ok {
                        r.errs.push(format!("unknown suite \"{s}\" (run `subcrit-lab suites` for the list)"));
                    }
                    ok
                })
                .collect(),
        };
        let out = r.string(&root, "", "out", false).map(PathBuf::from);

        let mut tuning = Tuning::default();
        if let Some(t) = r.section(&root, "tuning", false) {
            r.keys(
                t,
                "tuning",
                &[
                    "theta", "mdp_theta", "dx", "reach", "pde_dt", "solve_horizon", "levels", "ess_floor", "bootstrap",
                    "r_doubling",
                ],
            );
            tuning.theta = r.num(t, "tuning", "theta", false);
            let set = |key: &str, slot: &mut f64, r: &mut Reader| {
                if let Some(v) = r.num(t, "tuning", key, false) {
                    if v > 0.0 && v.is_finite() {
                        *slot = v;
                    } else {
                        r.errs.push(format!("`tuning.{key}` must be positive, got {v}"));
                    }
                }
            };
            set("mdp_theta", &mut tuning.mdp_theta, &mut r);
            set("dx", &mut tuning.dx, &mut r);
            set("reach", &mut tuning.reach, &mut r);
            set("pde_dt", &mut tuning.pde_dt, &mut r);
            set("solve_horizon", &mut tuning.solve_horizon, &mut r);
            set("ess_floor", &mut tuning.ess_floor, &mut r);
            if let Some(b) = r.uint(t, "tuning", "bootstrap", false) {
                tuning.bootstrap = b as usize;
            }
            if let Some(l) = r.list(t, "tuning", "levels", |v| v.as_integer().filter(|i| *i >= 1).map(|i| i as u32)) {
                tuning.levels = l;
            }
            if let Some(b) = r.boolean(t, "tuning", "r_doubling") {
                tuning.r_doubling = b;
            }
        }

        if !r.errs.is_empty() {
            return Err(Error::Config(r.errs));
        }
        let (Some(model), Some(params), Some(motion), Some(phi), Some(norm)) = (model, params, motion, phi, norm) else {
            return Err(Error::Config(vec!["incomplete configuration".into()]));
        };
        Ok(Self {
            model,
            params,
            motion,
            phi,
            horizon: sim.0.unwrap_or_default(),
            dt: sim.1.unwrap_or_default(),
            box_radius: sim.2.unwrap_or_default(),
            replicates: sim.3.unwrap_or(1),
            seed: sim.4.unwrap_or_default(),
            record: sim.5,
            explosion_cap: sim.6,
            norm,
            suites,
            out,
            tuning,
        })
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            horizon: self.horizon,
            dt: self.dt,
            box_radius: self.box_radius,
            model: self.model,
            norm: self.norm,
            seed: self.seed,
            record: self.record,
            explosion_cap: self.explosion_cap,
        }
    }

    /// Limit equation matching the simulated model.
    pub fn limit_model(&self) -> Model {
        match self.model {
            SimModel::Branching => Model::Branching,
            SimModel::SuperApprox { .. } => Model::Super,
        }
    }

    /// Hash of every parameter except the output directory.
    pub fn fingerprint(&self) -> String {
        let text = format!(
            "{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}",
            self.model,
            self.params,
            self.motion,
            self.phi,
            self.horizon,
            self.dt,
            self.box_radius,
            self.replicates,
            self.seed,
            self.record,
            self.explosion_cap,
            self.norm,
            self.suites,
            self.tuning
        );
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Seed precedence: flag, then `SUBCRIT_SEED`, then the file.
pub fn resolve_seed(file: u64, flag: Option<u64>, env: Option<&str>) -> Result<(u64, &'static str)> {
    if let Some(s) = flag {
        return Ok((s, "flag"));
    }
    if let Some(v) = env {
        let s = v
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::Config(vec![format!("{SEED_ENV} must be a nonnegative integer, got \"{v}\"")]))?;
        return Ok((s, "env"));
    }
    Ok((file, "file"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Info,
}

impl Verdict {
    fn of(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Info => "info",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub suite: String,
    pub quantity: String,
    pub estimate: f64,
    pub stderr: f64,
    pub predicted: f64,
    pub verdict: Verdict,
}

/// Seventeen significant digits.
pub fn fmt_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub workers: usize,
    pub seed_override: Option<u64>,
    pub out: Option<PathBuf>,
    /// Value of `SUBCRIT_SEED`, if set.
    pub seed_env: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<Row>,
    pub suite_verdicts: Vec<(String, bool)>,
    pub out_dir: PathBuf,
    pub passed: bool,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    workers: usize,
    ensemble: Option<ReplicateSet>,
    rows: Vec<Row>,
    suite: String,
}

impl Runner<'_> {
    fn row(&mut self, quantity: impl Into<String>, estimate: f64, stderr: f64, predicted: f64, verdict: Verdict) -> bool {
        self.rows.push(Row { suite: self.suite.clone(), quantity: quantity.into(), estimate, stderr, predicted, verdict });
        verdict != Verdict::Fail
    }

    fn ensemble(&mut self) -> Result<&ReplicateSet> {
        if self.ensemble.is_none() {
            let set = run_ensemble(
                &self.cfg.sim_config(),
                &self.cfg.params,
                &self.cfg.motion,
                &self.cfg.phi,
                self.cfg.replicates,
                self.workers,
            )
            .map_err(|e| e.context("bps"))?;
            self.ensemble = Some(set);
        }
        Ok(self.ensemble.as_ref().unwrap())
    }

    fn problem(&self, model: Model, params: BranchingParams) -> Result<Problem> {
        let q = params.death_rate();
        let grid = SpatialGrid::around(&self.cfg.phi, &self.cfg.motion, q, self.cfg.tuning.dx, self.cfg.tuning.reach)?;
        Problem::new(model, params, self.cfg.motion, grid, &self.cfg.phi).map_err(|e| e.context("pde"))
    }

    fn theta(&self, problem: &Problem) -> f64 {
        self.cfg.tuning.theta.unwrap_or(0.2 * problem.theta_max())
    }

    fn solve_opts(&self) -> SolveOptions {
        SolveOptions { dt: self.cfg.tuning.pde_dt, ..Default::default() }
    }

    /// Exact `E Y(1)` of the simulated model.
    fn mean_y1(&self) -> Result<f64> {
        let cfg = self.cfg.sim_config();
        let m = mean_occupation(&self.cfg.params, &self.cfg.motion, &self.cfg.phi, &[0.0, self.cfg.horizon])?;
        Ok(m[1] / cfg.norm_factor())
    }

    fn run(&mut self, suite: &str) -> Result<bool> {
        self.suite = suite.to_string();
        match suite {
            "simulate" => self.simulate(),
            "solve" => self.solve(),
            "rates" => self.rates(),
            "verify-lln" => self.verify_lln(),
            "verify-clt" => self.verify_clt(),
            "verify-mdp" => self.verify_mdp(),
            "verify-laplace" => self.verify_laplace(),
            "verify-comparison" => self.verify_comparison(),
            "assumptions" => self.assumptions(),
            "superproc-converge" => self.superproc_converge(),
            other => Err(Error::Config(vec![format!("unknown suite \"{other}\"")])),
        }
    }

    fn simulate(&mut self) -> Result<bool> {
        let predicted = self.mean_y1()?;
        let y1 = self.ensemble()?.y_at(1.0)?;
        let se = if y1.len() > 1 { (variance(&y1) / y1.len() as f64).sqrt() } else { f64::NAN };
        let (m, n) = (mean(&y1), y1.len() as f64);
        self.row("mean Y(1)", m, se, predicted, Verdict::Info);
        self.row("replicates", n, f64::NAN, f64::NAN, Verdict::Info);
        Ok(true)
    }

    fn solve(&mut self) -> Result<bool> {
        let problem = self.problem(self.cfg.limit_model(), self.cfg.params)?;
        let theta = self.theta(&problem);
        let steady = steady_state(&problem, theta, &SteadyOptions::default())?;
        self.row(format!("steady sup v(theta={theta})"), steady.sup(), steady.change, f64::NAN, Verdict::Info);
        let chi = Chi::constant(theta, self.cfg.tuning.solve_horizon)?;
        let sol = solve_v(&problem, &chi, &self.solve_opts())?;
        let gap = sol.field.last().iter().zip(&steady.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let mut ok = self.row("picard sweeps", sol.iterations as f64, sol.residual, f64::NAN, Verdict::Info);
        // After many lifetimes the time-dependent solution sits on the steady state.
        let settled = (-derive_constants(&self.cfg.params).death_rate * self.cfg.tuning.solve_horizon).exp() < 1e-6;
        let v = if settled { Verdict::of(gap < 1e-6) } else { Verdict::Info };
        ok &= self.row("sup |v(t0) - steady|", gap, f64::NAN, 0.0, v);
        Ok(ok)
    }

    fn rates(&mut self) -> Result<bool> {
        let model = self.cfg.limit_model();
        let params = self.cfg.params;
        let problem = self.problem(model, params)?;
        let mu = params.h() * problem.integrate(&problem.apply_potential(problem.phi()));
        let exact_mu = lln_slope(&params, &self.cfg.motion, &self.cfg.phi)?;
        let mut ok = self.row("grid LLN slope", mu, f64::NAN, exact_mu, Verdict::Info);
        let c = SteadyCumulant::new(problem);
        let at_mu = ldp_rate_scalar(&c, mu)?;
        ok &= self.row("ldp rate at LLN value", at_mu.value, f64::NAN, 0.0, Verdict::of(at_mu.value.abs() < 1e-6));

        let xs: Vec<f64> = (0..20).map(|i| mu * (0.25 + 1.75 * i as f64 / 19.0)).collect();
        let vals: Vec<f64> = xs.iter().map(|x| ldp_rate_scalar(&c, *x).map(|r| r.value)).collect::<Result<_>>()?;
        let worst = vals.windows(3).map(|w| 0.5 * (w[0] + w[2]) - w[1]).fold(f64::INFINITY, f64::min);
        ok &= self.row("min midpoint gap on 20-point grid", worst, f64::NAN, 0.0, Verdict::of(worst >= -1e-9));

        let x = 1.2 * mu;
        let scalar = ldp_rate_scalar(&c, x)?;
        let line = PathSample::from_fn(8, |t| x * t)?;
        let path = ldp_rate_path(&c, &line, 8)?;
        ok &= self.row(
            "path rate of x*t vs scalar rate",
            path.value,
            f64::NAN,
            scalar.value,
            Verdict::of((path.value - scalar.value).abs() < 1e-6),
        );

        let forms = quadratic_forms(&self.cfg.motion, params.death_rate(), &self.cfg.phi, None)?;
        let unit = PathSample::from_fn(16, |t| t)?;
        let mdp = mdp_rate_path(model, &params, &forms, &unit)?;
        let plug_in = 1.0 / (4.0 * params.h() * clt_rate(model, &params, &forms));
        ok &= self.row("mdp rate of f(t)=t", mdp.value, f64::NAN, plug_in, Verdict::of((mdp.value - plug_in).abs() < 1e-9));
        let quad = ldp_rate_path(&QuadraticCumulant::from_forms(model, &params, &forms), &unit, 16)?;
        ok &= self.row(
            "quadratic Legendre vs mdp rate",
            quad.value,
            f64::NAN,
            mdp.value,
            Verdict::of((quad.value - mdp.value).abs() < 1e-6),
        );
        Ok(ok)
    }

    fn verify_lln(&mut self) -> Result<bool> {
        let slope = lln_slope(&self.cfg.params, &self.cfg.motion, &self.cfg.phi)?;
        let to_linear = self.cfg.norm.factor(self.cfg.horizon) / self.cfg.horizon;
        let exact = self.mean_y1()? * to_linear;
        let y1: Vec<f64> = self.ensemble()?.y_at(1.0)?.iter().map(|y| y * to_linear).collect();
        let (m, se) = (mean(&y1), (variance(&y1) / y1.len() as f64).sqrt());
        let mut ok = self.row("Y(1) vs finite-T mean (3 se)", m, se, exact, Verdict::of((m - exact).abs() <= 3.0 * se));
        ok &= self.row("Y(1) vs LLN slope (2%)", m, se, slope, Verdict::of((m - slope).abs() <= 0.02 * slope));
        if self.cfg.tuning.r_doubling && !self.cfg.motion.is_degenerate() {
            let mut wide = self.cfg.sim_config();
            wide.box_radius *= 2.0;
            let set = run_ensemble(&wide, &self.cfg.params, &self.cfg.motion, &self.cfg.phi, self.cfg.replicates, self.workers)?;
            let y2: Vec<f64> = set.y_at(1.0)?.iter().map(|y| y * to_linear).collect();
            let (m2, se2) = (mean(&y2), (variance(&y2) / y2.len() as f64).sqrt());
            let joint = (se * se + se2 * se2).sqrt();
            ok &= self.row("Y(1) at 2R vs R (3 se)", m2, joint, m, Verdict::of((m2 - m).abs() <= 3.0 * joint));
            ok &= self.row("Y(1) at 2R vs LLN slope (2%)", m2, se2, slope, Verdict::of((m2 - slope).abs() <= 0.02 * slope));
        }
        Ok(ok)
    }

    fn verify_clt(&mut self) -> Result<bool> {
        let (model, params) = (self.cfg.limit_model(), self.cfg.params);
        let forms = quadratic_forms(&self.cfg.motion, params.death_rate(), &self.cfg.phi, None)?;
        let report = clt_verify(self.ensemble()?, model, &params, &forms, &[(0.5, 0.5), (0.5, 1.0), (1.0, 1.0)])?;
        let mut ok = true;
        for c in &report.covariances {
            let v = Verdict::of(c.relative_error() <= 0.10);
            ok &= self.row(format!("{} (10%)", c.quantity), c.estimate, c.stderr, c.predicted, v);
        }
        for c in [&report.increment_correlation, &report.excess_kurtosis] {
            ok &= self.row(format!("{} (3 se)", c.quantity), c.estimate, c.stderr, c.predicted, Verdict::of(c.within_se(3.0)));
        }
        let s = &report.skewness;
        self.row(s.quantity.clone(), s.estimate, s.stderr, s.predicted, Verdict::Info);
        Ok(ok)
    }

    fn verify_mdp(&mut self) -> Result<bool> {
        let Normalization::Moderate { alpha } = self.cfg.norm else {
            return Err(Error::Config(vec!["verify-mdp needs norm.kind = \"moderate\"".into()]));
        };
        let (model, params) = (self.cfg.limit_model(), self.cfg.params);
        let forms = quadratic_forms(&self.cfg.motion, params.death_rate(), &self.cfg.phi, None)?;
        let theta = self.cfg.tuning.mdp_theta;
        let predicted = theta * theta * params.h() * clt_rate(model, &params, &forms);
        let (floor, boot, seed) = (self.cfg.tuning.ess_floor, self.cfg.tuning.bootstrap, self.cfg.seed);
        let set = self.ensemble()?;
        let plus = empirical_cgf(set, theta, alpha, floor, boot, seed)?;
        let minus = empirical_cgf(set, -theta, alpha, floor, boot, seed.wrapping_add(1))?;
        let mut ok = true;
        for e in [plus, minus] {
            let v = Verdict::of(e.reliable && (e.estimate - predicted).abs() <= 0.15 * predicted);
            ok &= self.row(format!("cgf(theta={}) (15%)", e.theta), e.raw_estimate, e.stderr, predicted, v);
            ok &= self.row(format!("ess(theta={})", e.theta), e.ess, f64::NAN, floor, Verdict::of(e.reliable));
        }
        Ok(ok)
    }

    fn verify_laplace(&mut self) -> Result<bool> {
        // A level-n approximation is a branching system with mass 1/n per particle.
        let (params, weight) = match self.cfg.model {
            SimModel::Branching => (self.cfg.params, 1.0),
            SimModel::SuperApprox { level } => {
                let a = approx_level_params(&self.cfg.params, level)?;
                (BranchingParams::new(a.lifetime_rate, a.branch_prob, a.immigration)?, a.mass)
            }
        };
        let problem = self.problem(Model::Branching, params)?;
        let theta = self.cfg.tuning.theta.unwrap_or(0.2 * self.problem(self.cfg.limit_model(), self.cfg.params)?.theta_max());
        let nu = MeasureOnUnit::dirac(1.0, theta * weight)?;
        let predicted = predicted_log_laplace(&problem, &nu, self.cfg.horizon, 1.0, Target::Y, &self.solve_opts())?;
        let f = self.cfg.norm.factor(self.cfg.horizon);
        let (boot, seed) = (self.cfg.tuning.bootstrap, self.cfg.seed);
        let z: Vec<f64> = self.ensemble()?.y_at(1.0)?.iter().map(|y| theta * y * f).collect();
        let est = log_mean_exp_bootstrap(&z, boot, seed)?;
        let mut ok = self.row(
            format!("log E exp(theta occupation), theta={theta} (3 se)"),
            est.value,
            est.stderr,
            predicted,
            Verdict::of((est.value - predicted).abs() <= 3.0 * est.stderr),
        );
        ok &= self.row("ess", est.ess, f64::NAN, self.cfg.tuning.ess_floor, Verdict::of(est.ess >= self.cfg.tuning.ess_floor));
        Ok(ok)
    }

    fn verify_comparison(&mut self) -> Result<bool> {
        let problem = self.problem(Model::Branching, self.cfg.params)?;
        let q0 = derive_constants(&self.cfg.params);
        let theta = self.cfg.tuning.theta.unwrap_or(0.5 * q0.q0_branching.min(q0.q0_super) / self.cfg.phi.sup_norm());
        let chi = Chi::constant(theta, self.cfg.tuning.solve_horizon)?;
        let report = comparison_check(&problem, &chi, &self.solve_opts())?;
        let mut ok = self.row("violations of v^S <= v^B", report.violations as f64, f64::NAN, 0.0, Verdict::of(report.violations == 0));
        ok &= self.row(
            "constant C with v^B(C Psi) <= v^S(Psi)",
            report.constant,
            f64::NAN,
            f64::NAN,
            Verdict::of(report.constant > 0.0 && report.constant <= 1.0),
        );
        Ok(ok)
    }

    fn assumptions(&mut self) -> Result<bool> {
        let grid: Vec<f64> = (0..=40).map(|i| 0.5 * 1.1f64.powi(i)).collect();
        let report = check_assumptions(&self.cfg.motion, &self.cfg.params, &self.cfg.phi, &grid)?;
        let mut ok = true;
        for e in &report.entries {
            let v = match e.status {
                Status::Pass => Verdict::Pass,
                Status::Fail => Verdict::Fail,
                Status::Inconclusive => Verdict::Info,
            };
            ok &= self.row(format!("{}: {}", e.name, e.note), f64::NAN, f64::NAN, f64::NAN, v);
        }
        self.row("l1 decay rate", report.l1_decay_rate, f64::NAN, self.cfg.params.death_rate(), Verdict::Info);
        if let Some(ou) = report.ou_condition {
            ok &= self.row("ou condition theta < Q", f64::from(u8::from(ou)), f64::NAN, 1.0, Verdict::of(ou));
        }
        Ok(ok)
    }

    fn superproc_converge(&mut self) -> Result<bool> {
        let base = SimConfig { model: SimModel::SuperApprox { level: 1 }, ..self.cfg.sim_config() };
        let levels = self.cfg.tuning.levels.clone();
        let rows = superprocess_sequence(&base, &self.cfg.params, &self.cfg.motion, &self.cfg.phi, &levels, self.cfg.replicates, self.workers)?;
        let exact = self.mean_y1()?;
        let mut ok = true;
        for r in rows {
            let v = Verdict::of((r.mean - exact).abs() <= 3.0 * r.mean_se);
            ok &= self.row(format!("mean Y(1), level {}", r.level), r.mean, r.mean_se, exact, v);
            self.row(format!("var Y(1), level {}", r.level), r.variance, r.variance_se, f64::NAN, Verdict::Info);
        }
        Ok(ok)
    }
}

fn write_replicates(path: &Path, set: &ReplicateSet) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let join = |v: &[f64]| v.iter().map(|x| fmt_float(*x)).collect::<Vec<_>>().join(",");
    let grid = join(&set.paths[0].0.times());
    for (i, (y, x)) in set.paths.iter().enumerate() {
        writeln!(
            f,
            "{{\"replicate\":{i},\"seed\":{},\"t_grid\":[{grid}],\"y\":[{}],\"x\":[{}]}}",
            set.seed,
            join(y.values()),
            join(x.values())
        )?;
    }
    f.flush()?;
    Ok(())
}

fn write_summary(path: &Path, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(["suite", "quantity", "estimate", "stderr", "predicted", "verdict"]).map_err(io)?;
    for r in rows {
        w.write_record([
            r.suite.as_str(),
            r.quantity.as_str(),
            &fmt_float(r.estimate),
            &fmt_float(r.stderr),
            &fmt_float(r.predicted),
            r.verdict.as_str(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every requested suite and writes `replicates.jsonl`, `summary.csv`
/// and `manifest.json`.
pub fn execute(mut cfg: ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let started = Instant::now();
    let (seed, seed_source) = resolve_seed(cfg.seed, opts.seed_override, opts.seed_env.as_deref())?;
    cfg.seed = seed;
    let out_dir = opts.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("subcrit-out"));
    fs::create_dir_all(&out_dir).map_err(|e| Error::from(e).context(format!("creating {}", out_dir.display())))?;

    let mut runner = Runner { cfg: &cfg, workers: opts.workers.max(1), ensemble: None, rows: Vec::new(), suite: String::new() };
    let mut suite_verdicts = Vec::new();
    for suite in &cfg.suites {
        let ok = match runner.run(suite) {
            Ok(ok) => ok,
            Err(e) => {
                runner.suite = suite.clone();
                runner.row(format!("error: {e}"), f64::NAN, f64::NAN, f64::NAN, Verdict::Fail);
                false
            }
        };
        suite_verdicts.push((suite.clone(), ok));
    }
    if let Some(set) = &runner.ensemble {
        write_replicates(&out_dir.join("replicates.jsonl"), set)?;
    }
    let rows = runner.rows;
    if !cfg.suites.is_empty() {
        write_summary(&out_dir.join("summary.csv"), &rows)?;
    }

    let passed = suite_verdicts.iter().all(|(_, ok)| *ok);
    let started_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let suites_json: Vec<String> = suite_verdicts
        .iter()
        .map(|(s, ok)| format!("{{\"suite\":{},\"passed\":{ok}}}", serde_json::Value::from(s.as_str())))
        .collect();
    let manifest = format!(
        "{{\n  \"fingerprint\": \"{}\",\n  \"tool\": \"subcrit-lab\",\n  \"version\": \"{}\",\n  \"seed\": {seed},\n  \"seed_source\": \"{seed_source}\",\n  \"replicates\": {},\n  \"workers\": {},\n  \"suites\": [{}],\n  \"passed\": {passed},\n  \"finished_unix\": {started_at},\n  \"wall_clock_seconds\": {}\n}}\n",
        cfg.fingerprint(),
        env!("CARGO_PKG_VERSION"),
        cfg.replicates,
        opts.workers.max(1),
        suites_json.join(","),
        fmt_float(started.elapsed().as_secs_f64())
    );
    fs::write(out_dir.join("manifest.json"), manifest)?;
    Ok(RunOutcome { rows, suite_verdicts, out_dir, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
        [model]
        kind = "bps"
        [params]
        V = 1.0
        q = 0.25
        H = 1.0
        [motion]
        kind = "degenerate"
        [phi]
        kind = "gaussian-bump"
        center = [0.0]
        width = 1.0
        [sim]
        T = 20.0
        dt = 0.1
        R = 8.0
        replicates = 8
        seed = 7
        [norm]
        kind = "sqrt"
    "#;

    #[test]
    fn parses_minimal_config() {
        let c = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(c.seed, 7);
        assert!(c.suites.is_empty());
        assert_eq!(c.norm, Normalization::Sqrt);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = BASE.replace("H = 1.0", "H = 1.0\nimigration = 2.0");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("params.imigration"), "{err}");
    }

    #[test]
    fn every_violation_is_listed() {
        let text = BASE.replace("q = 0.25", "q = 0.75").replace("kind = \"sqrt\"", "kind = \"cube\"").replace("seed = 7", "");
        let Error::Config(list) = ExperimentConfig::parse(&text).unwrap_err() else { panic!() };
        assert!(list.len() >= 3, "{list:?}");
        assert!(list.iter().any(|e| e.contains("sim.seed")));
        assert!(list.iter().any(|e| e.contains("norm.kind")));
        assert!(list.iter().any(|e| e.starts_with("params")));
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(1, Some(3), Some("2")).unwrap(), (3, "flag"));
        assert_eq!(resolve_seed(1, None, Some("2")).unwrap(), (2, "env"));
        assert_eq!(resolve_seed(1, None, None).unwrap(), (1, "file"));
        assert!(resolve_seed(1, None, Some("x")).is_err());
    }

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 7.52] {
            assert_eq!(fmt_float(x).parse::<f64>().unwrap(), x);
        }
    }
}
