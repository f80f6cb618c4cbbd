//! Brownian paths absorbed at the unit sphere: stopping rules, Algorithm 1
//! over branched majorants, and Monte Carlo payoff checks.
//!
//! Every path draws from its own ChaCha8 stream keyed by (seed, path index),
//! so estimates do not depend on thread count or scheduling.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envelope::{ContactSet, Grid};
use crate::error::{input, Error, Result};
use crate::gain::GainField;
use crate::geometry::{DomainDescriptor, GridRegion, Point, SignedDistance};
use crate::harmonic::random_direction;
use crate::majorant::BranchedMajorant;

/// Relative tolerance of the `g*` termination test in Algorithm 1.
pub const GSTAR_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Gaussian increments of variance `dt` per coordinate.
    Euler,
    /// Walk-on-spheres jumps; exact exit positions, only for spatial rules.
    WosJump,
    /// Walk-on-spheres when the rule is purely spatial, Euler otherwise.
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_time")]
    pub max_time: f64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// Walk-on-spheres stopping shell.
    #[serde(default = "default_shell")]
    pub shell: f64,
    /// Jump budget per walk-on-spheres path.
    #[serde(default = "default_max_jumps")]
    pub max_jumps: usize,
}

fn default_dt() -> f64 {
    1e-5
}

fn default_max_time() -> f64 {
    10.0
}

fn default_scheme() -> Scheme {
    Scheme::Auto
}

fn default_shell() -> f64 {
    1e-7
}

fn default_max_jumps() -> usize {
    100_000
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            dt: default_dt(),
            seed: 0,
            max_time: default_max_time(),
            scheme: default_scheme(),
            shell: default_shell(),
            max_jumps: default_max_jumps(),
        }
    }
}

impl PathConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return input(format!("time step must be positive, got {}", self.dt));
        }
        if !(self.max_time > 0.0) {
            return input("max_time must be positive");
        }
        if !(self.shell > 0.0 && self.shell < 0.1) {
            return input("walk-on-spheres shell must lie in (0, 0.1)");
        }
        Ok(())
    }

    /// Generator for path `index`.
    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Algorithm 1 reached a patch boundary point with value `g*`.
    HitGstar,
    /// Absorbed on the unit sphere.
    HitBoundary,
    /// The stopping rule fired.
    Stopped,
    /// Time, jump or depth budget exhausted.
    Exhausted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PathState {
    pub t: f64,
    pub x: Point,
    /// Index of the active patch in `patch_trace` (0 outside Algorithm 1).
    pub patch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PatchEvent {
    pub patch: usize,
    pub depth: usize,
    /// Activation time.
    pub time: f64,
    /// Activation point (exit point of the previous patch).
    pub at: Point,
}

#[derive(Clone, Debug, Serialize)]
pub struct PathRecord {
    pub states: Vec<PathState>,
    pub absorbed: bool,
    pub patch_trace: Vec<PatchEvent>,
    pub termination: Termination,
}

impl PathRecord {
    pub fn final_point(&self) -> Point {
        self.states.last().expect("paths record their start").x
    }

    pub fn final_time(&self) -> f64 {
        self.states.last().expect("paths record their start").t
    }

    /// `t,x,y,patch_id` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# units: t in Brownian time; x, y in unit-ball coordinates\nt,x,y,patch_id\n");
        for s in &self.states {
            out.push_str(&format!("{},{},{},{}\n", s.t, s.x.x(), s.x.y(), s.patch));
        }
        out
    }
}

/// Contact set as a stopping region, built from grid output.
#[derive(Clone, Debug)]
pub struct ContactRegion {
    kind: ContactKind,
}

#[derive(Clone, Debug)]
enum ContactKind {
    /// Open continuation intervals in `|x|`; `lo = 0` contains the origin.
    Radial { intervals: Vec<(f64, f64)> },
    Cartesian {
        grid: Arc<Grid>,
        indicator: Vec<f64>,
        continuation: Option<DomainDescriptor>,
    },
}

impl ContactRegion {
    pub fn new(grid: &Arc<Grid>, c: &ContactSet) -> Result<Self> {
        if c.contact.len() != grid.len() {
            return input("contact set does not match the grid");
        }
        let kind = match &**grid {
            Grid::Radial(g) => {
                let r = g.radii();
                let mut intervals = Vec::new();
                let mut k = 0;
                while k < r.len() {
                    if c.contact[k] {
                        k += 1;
                        continue;
                    }
                    let p = k;
                    while k < r.len() && !c.contact[k] {
                        k += 1;
                    }
                    let lo = if p == 0 { 0.0 } else { r[p - 1] };
                    let hi = if k < r.len() { r[k] } else { 1.0 };
                    intervals.push((lo, hi));
                }
                ContactKind::Radial { intervals }
            }
            Grid::Cartesian(g) => {
                let indicator: Vec<f64> = c.contact.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                let free: Vec<bool> = (0..grid.len()).map(|k| g.inside()[k] && !c.contact[k]).collect();
                let continuation = if free.iter().any(|&b| b) {
                    Some(DomainDescriptor::GridRegion(GridRegion::from_mask(g.n(), g.n(), g.spacing(), free)?))
                } else {
                    None
                };
                ContactKind::Cartesian { grid: grid.clone(), indicator, continuation }
            }
        };
        Ok(Self { kind })
    }

    /// Whether `x` lies in the contact (stopping) set.
    pub fn is_contact(&self, x: &Point) -> bool {
        match &self.kind {
            ContactKind::Radial { intervals } => {
                let r = x.norm();
                !intervals.iter().any(|&(lo, hi)| (lo == 0.0 || r > lo) && r < hi)
            }
            ContactKind::Cartesian { grid, indicator, .. } => x.norm() >= 1.0 || grid.interpolate(indicator, x) >= 0.5,
        }
    }

    /// Distance to the contact set from a continuation point.
    fn distance(&self, x: &Point) -> f64 {
        match &self.kind {
            ContactKind::Radial { intervals } => {
                let r = x.norm();
                intervals
                    .iter()
                    .find(|&&(lo, hi)| (lo == 0.0 || r > lo) && r < hi)
                    .map(|&(lo, hi)| {
                        let inner = if lo == 0.0 { f64::INFINITY } else { r - lo };
                        inner.min(hi - r)
                    })
                    .unwrap_or(0.0)
            }
            ContactKind::Cartesian { continuation, .. } => match continuation {
                Some(d) => (-d.signed_distance(x)).max(0.0),
                None => 0.0,
            },
        }
    }

    fn project(&self, x: &Point) -> Point {
        match &self.kind {
            ContactKind::Radial { intervals } => {
                let r = x.norm();
                let target = intervals
                    .iter()
                    .find(|&&(lo, hi)| (lo == 0.0 || r > lo) && r < hi)
                    .map(|&(lo, hi)| if lo > 0.0 && r - lo < hi - r { lo } else { hi })
                    .unwrap_or(r);
                if r > 0.0 {
                    *x * (target / r)
                } else {
                    *x
                }
            }
            ContactKind::Cartesian { continuation, .. } => match continuation {
                Some(d) => d.closest_boundary_point(x),
                None => *x,
            },
        }
    }
}

/// Stopping rules; `Min` stops at the first of its members.
#[derive(Clone, Debug)]
pub enum StoppingRule {
    FirstExit(DomainDescriptor),
    FixedTime(f64),
    ContactHit(Arc<ContactRegion>),
    Min(Vec<StoppingRule>),
}

impl StoppingRule {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::FixedTime(t) if !(*t >= 0.0 && t.is_finite()) => input(format!("fixed time must be finite and >= 0, got {t}")),
            Self::Min(v) if v.is_empty() => input("empty minimum of stopping rules"),
            Self::Min(v) => v.iter().try_for_each(|r| r.validate()),
            _ => Ok(()),
        }
    }

    /// Earliest deterministic stopping time.
    fn time_limit(&self) -> f64 {
        match self {
            Self::FixedTime(t) => *t,
            Self::Min(v) => v.iter().map(|r| r.time_limit()).fold(f64::INFINITY, f64::min),
            _ => f64::INFINITY,
        }
    }

    fn has_time(&self) -> bool {
        self.time_limit().is_finite()
    }

    /// Whether a spatial member has fired at `x`.
    fn spatial_stop(&self, x: &Point) -> bool {
        match self {
            Self::FirstExit(d) => d.signed_distance(x) >= 0.0,
            Self::FixedTime(_) => false,
            Self::ContactHit(c) => c.is_contact(x),
            Self::Min(v) => v.iter().any(|r| r.spatial_stop(x)),
        }
    }

    /// Distance to the nearest spatial stopping boundary and the projection
    /// of `x` onto it.
    fn spatial_distance(&self, x: &Point) -> (f64, Point) {
        match self {
            Self::FirstExit(d) => ((-d.signed_distance(x)).max(0.0), *x),
            Self::FixedTime(_) => (f64::INFINITY, *x),
            Self::ContactHit(c) => (c.distance(x), *x),
            Self::Min(v) => v
                .iter()
                .map(|r| r.spatial_distance(x))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap_or((f64::INFINITY, *x)),
        }
    }

    fn project(&self, x: &Point) -> Point {
        match self {
            Self::FirstExit(d) => d.closest_boundary_point(x),
            Self::FixedTime(_) => *x,
            Self::ContactHit(c) => c.project(x),
            Self::Min(v) => {
                let best = v
                    .iter()
                    .filter(|r| !matches!(r, Self::FixedTime(_)))
                    .min_by(|a, b| a.spatial_distance(x).0.total_cmp(&b.spatial_distance(x).0));
                best.map_or(*x, |r| r.project(x))
            }
        }
    }
}

struct Walker<'a> {
    cfg: &'a PathConfig,
    rng: ChaCha8Rng,
    record: bool,
    states: Vec<PathState>,
    t: f64,
    x: Point,
    patch: usize,
}

impl Walker<'_> {
    fn push(&mut self) {
        if self.record {
            self.states.push(PathState { t: self.t, x: self.x, patch: self.patch });
        }
    }

    fn gaussian_step(&mut self, h: f64) -> Point {
        let s = h.sqrt();
        let mut c = [0.0; 3];
        for v in c.iter_mut().take(self.x.dim()) {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *v = s * z;
        }
        Point::new(&c[..self.x.dim()]).expect("dimension checked at the start")
    }

    /// Runs until the region stops the path, the sphere absorbs it, or a
    /// budget runs out.
    fn run(&mut self, rule: &dyn Region, wos: bool) -> Termination {
        if self.x.norm() >= 1.0 - 1e-12 {
            self.x = self.x.normalized();
            return Termination::HitBoundary;
        }
        if rule.fires(&self.x) || rule.deadline() <= self.t {
            return Termination::Stopped;
        }
        if wos {
            for _ in 0..self.cfg.max_jumps {
                let ds = 1.0 - self.x.norm();
                let (dr, _) = rule.distance(&self.x);
                if ds <= self.cfg.shell && ds <= dr {
                    self.x = self.x.normalized();
                    self.push();
                    return Termination::HitBoundary;
                }
                if dr <= self.cfg.shell {
                    self.x = rule.project(&self.x);
                    self.push();
                    return Termination::Stopped;
                }
                let r = ds.min(dr);
                let dir = random_direction(self.x.dim(), &mut self.rng);
                self.x = self.x + dir * r;
                // mean exit time of a ball of radius r
                self.t += r * r / self.x.dim() as f64;
                self.push();
            }
            return Termination::Exhausted;
        }
        let deadline = rule.deadline();
        while self.t < self.cfg.max_time {
            let h = self.cfg.dt.min(deadline - self.t);
            let dx = self.gaussian_step(h);
            let mut y = self.x + dx;
            let mut frac = 1.0;
            let absorbed = y.norm() >= 1.0;
            if absorbed {
                frac = sphere_fraction(&self.x, &dx);
                y = (self.x + dx * frac).normalized();
            }
            if rule.fires(&y) {
                // first crossing on the segment, by bisection
                let (mut lo, mut hi) = (0.0, frac);
                for _ in 0..48 {
                    let mid = 0.5 * (lo + hi);
                    if rule.fires(&(self.x + dx * mid)) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                self.x = self.x + dx * hi;
                self.t += h * hi;
                self.push();
                return Termination::Stopped;
            }
            self.x = y;
            self.t += h * frac;
            self.push();
            if absorbed {
                return Termination::HitBoundary;
            }
            if self.t >= deadline {
                return Termination::Stopped;
            }
        }
        Termination::Exhausted
    }
}

/// Fraction `s` in (0, 1] with `|x + s dx| = 1`.
fn sphere_fraction(x: &Point, dx: &Point) -> f64 {
    let a = dx.dot(dx);
    let b = 2.0 * x.dot(dx);
    let c = x.dot(x) - 1.0;
    let disc = (b * b - 4.0 * a * c).max(0.0);
    ((-b + disc.sqrt()) / (2.0 * a)).clamp(0.0, 1.0)
}

/// Spatial stopping region plus an optional deadline.
trait Region {
    fn fires(&self, x: &Point) -> bool;
    fn distance(&self, x: &Point) -> (f64, Point);
    fn project(&self, x: &Point) -> Point;
    fn deadline(&self) -> f64;
}

impl Region for StoppingRule {
    fn fires(&self, x: &Point) -> bool {
        self.spatial_stop(x)
    }

    fn distance(&self, x: &Point) -> (f64, Point) {
        self.spatial_distance(x)
    }

    fn project(&self, x: &Point) -> Point {
        StoppingRule::project(self, x)
    }

    fn deadline(&self) -> f64 {
        self.time_limit()
    }
}

/// Exit from a patch domain.
struct PatchExit<'a>(&'a DomainDescriptor);

impl Region for PatchExit<'_> {
    fn fires(&self, x: &Point) -> bool {
        self.0.signed_distance(x) >= 0.0
    }

    fn distance(&self, x: &Point) -> (f64, Point) {
        ((-self.0.signed_distance(x)).max(0.0), *x)
    }

    fn project(&self, x: &Point) -> Point {
        self.0.closest_boundary_point(x)
    }

    fn deadline(&self) -> f64 {
        f64::INFINITY
    }
}

fn use_wos(cfg: &PathConfig, rule: &StoppingRule) -> Result<bool> {
    match cfg.scheme {
        Scheme::Euler => Ok(false),
        Scheme::WosJump if rule.has_time() => input("walk-on-spheres paths cannot stop at fixed times"),
        Scheme::WosJump => Ok(true),
        Scheme::Auto => Ok(!rule.has_time()),
    }
}

fn check_start(x: &Point) -> Result<()> {
    if x.norm() > 1.0 + 1e-12 {
        return input(format!("start point {x:?} lies outside the closed unit ball"));
    }
    Ok(())
}

fn walk(x: Point, cfg: &PathConfig, rule: &StoppingRule, index: u64, record: bool) -> Result<PathRecord> {
    cfg.validate()?;
    rule.validate()?;
    check_start(&x)?;
    let wos = use_wos(cfg, rule)?;
    let mut w = Walker { cfg, rng: cfg.rng(index), record, states: Vec::new(), t: 0.0, x, patch: 0 };
    w.states.push(PathState { t: 0.0, x, patch: 0 });
    let termination = w.run(rule, wos);
    if !record {
        w.states.push(PathState { t: w.t, x: w.x, patch: 0 });
    } else if w.states.last().map(|s| s.x) != Some(w.x) {
        w.push();
    }
    Ok(PathRecord {
        states: w.states,
        absorbed: termination == Termination::HitBoundary,
        patch_trace: Vec::new(),
        termination,
    })
}

/// One Brownian path from `x` stopped by `rule` or absorbed at the sphere.
pub fn simulate_path(x: Point, cfg: &PathConfig, rule: &StoppingRule) -> Result<PathRecord> {
    walk(x, cfg, rule, 0, true)
}

/// Algorithm 1: follow the path through successive patches. At each exit
/// it stops if the patch value there is `g*` or the exit is on the sphere,
/// and otherwise switches to the extension's successor patch.
pub fn run_algorithm1(h: &BranchedMajorant, x: Point, cfg: &PathConfig) -> Result<PathRecord> {
    run_algorithm1_indexed(h, x, cfg, 0, true)
}

/// Algorithm 1 on the random stream of path `index`, fully recorded.
pub fn run_algorithm1_path(h: &BranchedMajorant, x: Point, cfg: &PathConfig, index: u64) -> Result<PathRecord> {
    run_algorithm1_indexed(h, x, cfg, index, true)
}

fn run_algorithm1_indexed(h: &BranchedMajorant, x: Point, cfg: &PathConfig, index: u64, record: bool) -> Result<PathRecord> {
    cfg.validate()?;
    check_start(&x)?;
    if !h.base().contains(&x) {
        return input(format!("start point {x:?} is not in the base patch domain"));
    }
    let wos = cfg.scheme != Scheme::Euler;
    let mut w = Walker { cfg, rng: cfg.rng(index), record, states: Vec::new(), t: 0.0, x, patch: 0 };
    w.states.push(PathState { t: 0.0, x, patch: 0 });
    let mut trace = vec![PatchEvent { patch: 0, depth: h.depth(), time: 0.0, at: x }];
    let mut cur = h.clone();
    let gstar = h.base().gstar();
    let termination = loop {
        let term = w.run(&PatchExit(cur.base().domain()), wos);
        match term {
            Termination::HitBoundary | Termination::Exhausted => break term,
            _ => {}
        }
        let v = w.x;
        if v.norm() >= 1.0 - cfg.shell {
            break Termination::HitBoundary;
        }
        if cur.base().value(&v) >= gstar * (1.0 - GSTAR_TOL) {
            break Termination::HitGstar;
        }
        if cur.depth() == 1 {
            break Termination::Exhausted;
        }
        let next = cur.child(&v)?;
        if next.depth() >= cur.depth() {
            return Err(Error::Structural("successor is not shallower than its parent".into()));
        }
        w.patch += 1;
        trace.push(PatchEvent { patch: w.patch, depth: next.depth(), time: w.t, at: v });
        cur = next;
    };
    if !record {
        w.states.push(PathState { t: w.t, x: w.x, patch: w.patch });
    }
    Ok(PathRecord {
        states: w.states,
        absorbed: termination == Termination::HitBoundary,
        patch_trace: trace,
        termination,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub paths: usize,
    /// Paths that ran out of budget (scored at their last position).
    pub exhausted: usize,
}

impl Estimate {
    fn from_samples(samples: &[(f64, bool)]) -> Self {
        let n = samples.len();
        let lo = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
        let hi = samples.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
        // constant payoffs are exact; avoids summation round-off
        let mean = if lo == hi { lo } else { samples.iter().map(|s| s.0).sum::<f64>() / n as f64 };
        let var = samples.iter().map(|s| (s.0 - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
        Self {
            mean,
            std_error: (var / n as f64).sqrt(),
            paths: n,
            exhausted: samples.iter().filter(|s| s.1).count(),
        }
    }
}

/// Monte Carlo estimate of `E[g(X_tau)]`.
pub fn payoff_estimate(x: Point, rule: &StoppingRule, g: &GainField, n_paths: usize, cfg: &PathConfig) -> Result<Estimate> {
    if n_paths < 100 {
        return input(format!("payoff estimates need at least 100 paths, got {n_paths}"));
    }
    let samples: Vec<(f64, bool)> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let p = walk(x, cfg, rule, i, false)?;
            Ok((g.value(&p.final_point()), p.termination == Termination::Exhausted))
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&samples))
}

/// Payoff of the Algorithm 1 stopping time of `h` from `x`.
pub fn algorithm1_payoff(h: &BranchedMajorant, x: Point, g: &GainField, n_paths: usize, cfg: &PathConfig) -> Result<Estimate> {
    if n_paths < 100 {
        return input(format!("payoff estimates need at least 100 paths, got {n_paths}"));
    }
    let samples: Vec<(f64, bool)> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let p = run_algorithm1_indexed(h, x, cfg, i, false)?;
            Ok((g.value(&p.final_point()), p.termination == Termination::Exhausted))
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&samples))
}

#[derive(Clone, Debug, Serialize)]
pub struct ExcessivityReport {
    pub value: f64,
    pub norm: f64,
    pub payoff: Estimate,
    /// `payoff.mean - (value + norm) - 3 std_error`; nonpositive passes.
    pub excess: f64,
    pub holds: bool,
}

/// Statistical check of `h(x) >= E[g(X_tau)] - ||h||`.
pub fn excessivity_check(
    h: &BranchedMajorant,
    x: Point,
    rule: &StoppingRule,
    g: &GainField,
    n_paths: usize,
    cfg: &PathConfig,
) -> Result<ExcessivityReport> {
    let payoff = payoff_estimate(x, rule, g, n_paths, cfg)?;
    let value = h.value(&x);
    let norm = h.error_bound();
    let excess = payoff.mean - (value + norm) - 3.0 * payoff.std_error;
    Ok(ExcessivityReport { value, norm, payoff, excess, holds: excess <= 0.0 })
}

#[derive(Clone, Debug, Serialize)]
pub struct RivalResult {
    pub name: String,
    pub payoff: Estimate,
    /// The rival stopped no later than the contact hitting time.
    pub truncated: Estimate,
    /// `tau_inf` payoff >= rival payoff - 3 sigma (combined).
    pub dominated: bool,
    /// Truncated payoff >= untruncated payoff - 3 sigma (combined).
    pub truncation_ok: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimalityReport {
    pub x: Point,
    pub tau_inf: Estimate,
    pub rivals: Vec<RivalResult>,
}

impl OptimalityReport {
    pub fn passed(&self) -> bool {
        self.rivals.iter().all(|r| r.dominated && r.truncation_ok)
    }
}

fn within(a: &Estimate, b: &Estimate) -> f64 {
    3.0 * (a.std_error.powi(2) + b.std_error.powi(2)).sqrt()
}

/// Compares the contact hitting time against rival rules, and each rival
/// against its truncation at the contact hitting time.
pub fn optimality_test(
    x: Point,
    contact: &Arc<ContactRegion>,
    rivals: &[(String, StoppingRule)],
    g: &GainField,
    n_paths: usize,
    cfg: &PathConfig,
) -> Result<OptimalityReport> {
    let tau = StoppingRule::ContactHit(contact.clone());
    let tau_inf = payoff_estimate(x, &tau, g, n_paths, cfg)?;
    let mut out = Vec::with_capacity(rivals.len());
    for (name, rule) in rivals {
        let payoff = payoff_estimate(x, rule, g, n_paths, cfg)?;
        let trunc_rule = StoppingRule::Min(vec![rule.clone(), tau.clone()]);
        let truncated = payoff_estimate(x, &trunc_rule, g, n_paths, cfg)?;
        out.push(RivalResult {
            name: name.clone(),
            dominated: tau_inf.mean >= payoff.mean - within(&tau_inf, &payoff),
            truncation_ok: truncated.mean >= payoff.mean - within(&truncated, &payoff),
            payoff,
            truncated,
        });
    }
    Ok(OptimalityReport { x, tau_inf, rivals: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::{contact_set, iterate_envelopes, unbranched_envelope, DictionarySpec, GridSpec, IterationSpec};
    use crate::gain::{derive_constants, dome_gain, mollify, spiked_gain};
    use crate::majorant::HarmonicPatch;

    fn euler(dt: f64) -> PathConfig {
        PathConfig { dt, scheme: Scheme::Euler, ..Default::default() }
    }

    #[test]
    fn boundary_start_is_absorbed_at_once() {
        let p = simulate_path(Point::xy(1.0, 0.0), &euler(1e-4), &StoppingRule::FixedTime(1.0)).unwrap();
        assert!(p.absorbed);
        assert_eq!(p.final_time(), 0.0);
    }

    #[test]
    fn fixed_time_zero_stops_at_start() {
        let x = Point::xy(0.3, 0.1);
        let p = simulate_path(x, &euler(1e-4), &StoppingRule::FixedTime(0.0)).unwrap();
        assert_eq!(p.final_point(), x);
        assert_eq!(p.termination, Termination::Stopped);
        let g = dome_gain(1.0, 0.5, Point::origin(2)).unwrap();
        let e = payoff_estimate(x, &StoppingRule::FixedTime(0.0), &g, 100, &euler(1e-4)).unwrap();
        assert_eq!(e.mean, g.value(&x));
        assert_eq!(e.std_error, 0.0);
    }

    #[test]
    fn increments_have_variance_dt() {
        let dt = 1e-4;
        let cfg = euler(dt);
        let mut incs = Vec::new();
        for i in 0..20 {
            let p = walk(Point::origin(2), &cfg, &StoppingRule::FixedTime(0.05), i, true).unwrap();
            for w in p.states.windows(2) {
                if (w[1].t - w[0].t - dt).abs() < 1e-12 && w[1].x.norm() < 1.0 {
                    incs.push(w[1].x.x() - w[0].x.x());
                }
            }
        }
        let n = incs.len() as f64;
        let mean = incs.iter().sum::<f64>() / n;
        let var = incs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // chi-squared with n-1 dof: relative sd of the sample variance is sqrt(2/n)
        assert!(((var / dt) - 1.0).abs() < 2.576 * (2.0 / n).sqrt(), "var {var}");
        assert!(mean.abs() < 2.576 * (dt / n).sqrt());
    }

    fn ks_uniform(mut u: Vec<f64>) -> f64 {
        u.sort_by(f64::total_cmp);
        let n = u.len() as f64;
        u.iter()
            .enumerate()
            .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn exit_from_centred_ball_is_uniform() {
        let rule = StoppingRule::FirstExit(DomainDescriptor::ball(Point::origin(2), 0.5).unwrap());
        for scheme in [Scheme::Euler, Scheme::WosJump] {
            // seed 0 sits in the 1% tail of this KS statistic (D = 0.0169)
            let cfg = PathConfig { dt: 1e-4, scheme, seed: 1, ..Default::default() };
            let n = if scheme == Scheme::Euler { 2000 } else { 10_000 };
            let angles: Vec<f64> = (0..n as u64)
                .into_par_iter()
                .map(|i| {
                    let p = walk(Point::origin(2), &cfg, &rule, i, false).unwrap();
                    let v = p.final_point();
                    assert!((v.norm() - 0.5).abs() < 1e-6, "exit radius {}", v.norm());
                    (v.y().atan2(v.x()) / (2.0 * std::f64::consts::PI)).rem_euclid(1.0)
                })
                .collect();
            let d = ks_uniform(angles);
            assert!(d < 1.628 / (n as f64).sqrt(), "{scheme:?}: KS {d}");
        }
    }

    #[test]
    fn absorbed_paths_end_on_the_sphere() {
        for scheme in [Scheme::Euler, Scheme::WosJump] {
            let cfg = PathConfig { dt: 1e-4, scheme, ..Default::default() };
            let rule = StoppingRule::FirstExit(DomainDescriptor::full_ball(2).unwrap());
            for i in 0..50 {
                let p = walk(Point::xy(0.5, 0.2), &cfg, &rule, i, false).unwrap();
                assert!(p.absorbed || p.termination == Termination::Stopped);
                assert!((p.final_point().norm() - 1.0).abs() <= cfg.shell.max(cfg.dt.sqrt()));
            }
        }
    }

    #[test]
    fn wos_refuses_fixed_times() {
        let cfg = PathConfig { scheme: Scheme::WosJump, ..Default::default() };
        assert!(simulate_path(Point::origin(2), &cfg, &StoppingRule::FixedTime(0.1)).is_err());
        assert!(simulate_path(Point::origin(2), &euler(0.0), &StoppingRule::FixedTime(0.1)).is_err());
        assert!(payoff_estimate(Point::origin(2), &StoppingRule::FixedTime(0.0), &GainField::zero(2).unwrap(), 10, &euler(1e-3)).is_err());
    }

    #[test]
    fn harmonic_payoff_matches_annulus_formula() {
        // exit from the annulus 0.2 < r < 0.8 with payoff 1 on the inner circle
        let g = GainField::radial(2, |r: f64| if r <= 0.25 { 1.0 } else { 0.0 }, 0.5, 1e9, false).unwrap();
        let rule = StoppingRule::FirstExit(DomainDescriptor::annulus(Point::origin(2), 0.2, 0.8).unwrap());
        let x = Point::xy(0.4, 0.0);
        let e = payoff_estimate(x, &rule, &g, 20_000, &PathConfig::default()).unwrap();
        let exact = (0.8f64.ln() - 0.4f64.ln()) / (0.8f64.ln() - 0.2f64.ln());
        assert!((e.mean - exact).abs() < 3.0 * e.std_error + 1e-3, "{} vs {exact}", e.mean);
    }

    #[test]
    fn estimates_are_reproducible() {
        let g = dome_gain(1.0, 0.5, Point::origin(2)).unwrap();
        let rule = StoppingRule::FirstExit(DomainDescriptor::ball(Point::origin(2), 0.6).unwrap());
        let cfg = PathConfig { seed: 7, ..Default::default() };
        let a = payoff_estimate(Point::xy(0.1, 0.0), &rule, &g, 500, &cfg).unwrap();
        let b = payoff_estimate(Point::xy(0.1, 0.0), &rule, &g, 500, &cfg).unwrap();
        assert_eq!(a, b);
    }

    fn spiked_sequence() -> (GainField, Arc<crate::envelope::EnvelopeSequence>) {
        let g = mollify(&spiked_gain(0.05, 2).unwrap(), 0.01).unwrap();
        let c = derive_constants(&g, 0.25).unwrap();
        let grid = Arc::new(GridSpec::Radial { nodes: 1024, r_min: 1e-4 }.build(2).unwrap());
        let w = unbranched_envelope(&g, &c, grid, &DictionarySpec::default()).unwrap();
        (g.clone(), Arc::new(iterate_envelopes(&g, w, &IterationSpec::default()).unwrap()))
    }

    #[test]
    fn contact_hit_from_contact_point_is_immediate() {
        let (g, seq) = spiked_sequence();
        let last = seq.last();
        let region = Arc::new(ContactRegion::new(seq.grid(), &last.contact).unwrap());
        let x = Point::xy(0.01, 0.0);
        assert!(region.is_contact(&x));
        let e = payoff_estimate(x, &StoppingRule::ContactHit(region.clone()), &g, 100, &PathConfig::default()).unwrap();
        assert_eq!(e.mean, g.value(&x));
        let cs = contact_set(&last.field, &g, 1e-9).unwrap();
        assert_eq!(cs.components, last.contact.components);
    }

    #[test]
    fn algorithm1_on_a_leaf_stops_at_gstar_or_the_sphere() {
        let p = HarmonicPatch::radial_annulus(2, 0.1, 1.0, 1.25, 0.0, 1.25, 10.0).unwrap();
        let h = BranchedMajorant::leaf(p).unwrap();
        for i in 0..20 {
            let r = run_algorithm1_indexed(&h, Point::xy(0.5, 0.0), &PathConfig::default(), i, true).unwrap();
            assert_eq!(r.patch_trace.len(), 1);
            match r.termination {
                Termination::HitGstar => assert!((r.final_point().norm() - 0.1).abs() < 1e-6),
                Termination::HitBoundary => assert!((r.final_point().norm() - 1.0).abs() < 1e-6),
                t => panic!("unexpected {t:?}"),
            }
        }
    }

    #[test]
    fn algorithm1_traces_are_contiguous() {
        let (g, seq) = spiked_sequence();
        let x = Point::xy(0.15, 0.0);
        let h = crate::envelope::build_branched_witness(&seq, 1, x).unwrap();
        for i in 0..50 {
            let r = run_algorithm1_indexed(&h, x, &PathConfig::default(), i, true).unwrap();
            for w in r.patch_trace.windows(2) {
                assert!(w[1].depth < w[0].depth);
            }
            assert!(r.states.iter().all(|s| s.x.norm() <= 1.0 + 1e-12));
        }
        let e = algorithm1_payoff(&h, x, &g, 2000, &PathConfig::default()).unwrap();
        assert!(e.mean <= h.value(&x) + h.error_bound() + 3.0 * e.std_error);
        let csv = run_algorithm1(&h, x, &PathConfig::default()).unwrap().to_csv();
        assert_eq!(csv.lines().nth(1), Some("t,x,y,patch_id"));
    }
}
