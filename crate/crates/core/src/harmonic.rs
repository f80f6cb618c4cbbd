//! Harmonic functions on subdomains of the unit ball: Poisson-kernel
//! quadrature on balls, radial and affine closed forms, and walk-on-spheres
//! for everything else. Off-domain evaluation returns `f64::INFINITY`.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::geometry::{Point, SignedDistance};
use crate::quadrature::gauss_legendre;

type BoundaryFn = dyn Fn(&Point) -> f64 + Send + Sync;

/// Boundary data for a harmonic patch.
///
/// When `interior_value` is set, boundary points strictly inside the unit
/// ball read that constant and only points on the unit sphere use the
/// evaluator.
#[derive(Clone)]
pub struct BoundaryData {
    eval: Arc<BoundaryFn>,
    interior_value: Option<f64>,
}

impl fmt::Debug for BoundaryData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BoundaryData")
            .field("interior_value", &self.interior_value)
            .finish_non_exhaustive()
    }
}

/// Points closer than this to the unit sphere count as lying on it.
pub const SPHERE_TOL: f64 = 1e-9;

impl BoundaryData {
    pub fn new(f: impl Fn(&Point) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            eval: Arc::new(f),
            interior_value: None,
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_| c)
    }

    /// Data equal to `gstar` inside the unit ball and `f` on the unit sphere.
    pub fn with_interior_value(mut self, gstar: f64) -> Self {
        self.interior_value = Some(gstar);
        self
    }

    pub fn interior_value(&self) -> Option<f64> {
        self.interior_value
    }

    #[inline]
    pub fn value(&self, p: &Point) -> f64 {
        match self.interior_value {
            Some(c) if p.norm() < 1.0 - SPHERE_TOL => c,
            _ => (self.eval)(p),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WosConfig {
    pub shell: f64,
    pub max_steps: usize,
    pub walks: usize,
    pub seed: u64,
}

impl Default for WosConfig {
    fn default() -> Self {
        Self {
            shell: 1e-4,
            max_steps: 100_000,
            walks: 100_000,
            seed: 0,
        }
    }
}

impl WosConfig {
    fn validate(&self) -> Result<()> {
        if !(self.shell > 0.0) {
            return input(format!("walk-on-spheres shell must be positive, got {}", self.shell));
        }
        if self.walks == 0 {
            return input("walk-on-spheres needs at least one walk");
        }
        Ok(())
    }
}

/// Harmonic extension of `f` from the sphere `|x - center| = radius`.
///
/// d=2 uses composite Gauss-Legendre panels graded towards the angle of
/// `x`; d=3 a product rule in (cos psi, phi) graded towards the pole.
/// The rule is normalised by the quadrature of the kernel itself so that
/// constants are reproduced exactly.
pub fn poisson_ball_eval(center: Point, radius: f64, f: &BoundaryData, x: Point) -> f64 {
    let y = x - center;
    let rho = y.norm();
    if rho > radius * (1.0 + 1e-12) {
        return f64::INFINITY;
    }
    if rho >= radius * (1.0 - 1e-12) {
        return f.value(&x);
    }
    match center.dim() {
        2 => poisson_2d(center, radius, f, y, rho),
        _ => poisson_3d(center, radius, f, y, rho),
    }
}

/// Angular panel breakpoints graded geometrically from `eta` up to `pi`.
fn graded_breaks(eta: f64) -> Vec<f64> {
    let pi = std::f64::consts::PI;
    let mut b = vec![0.0];
    let mut s = eta.min(pi / 8.0);
    while s < pi / 4.0 {
        b.push(s);
        s *= 2.0;
    }
    let last = *b.last().unwrap();
    let n = 6;
    for k in 1..=n {
        b.push(last + (pi - last) * k as f64 / n as f64);
    }
    b
}

fn poisson_2d(center: Point, radius: f64, f: &BoundaryData, y: Point, rho: f64) -> f64 {
    if rho == 0.0 {
        let n = 512;
        let s: f64 = (0..n)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                f.value(&(center + Point::xy(th.cos(), th.sin()) * radius))
            })
            .sum();
        return s / n as f64;
    }
    let th0 = y.y().atan2(y.x());
    let eta = (radius - rho) / radius;
    let breaks = graded_breaks(eta);
    let (gx, gw) = gauss_legendre(16, 0.0, 1.0);
    let mut num = 0.0;
    let mut den = 0.0;
    let r2 = radius * radius - rho * rho;
    for w in breaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        for (u, wu) in gx.iter().zip(&gw) {
            let psi = lo + (hi - lo) * u;
            let wt = (hi - lo) * wu;
            for sign in [1.0, -1.0] {
                let th = th0 + sign * psi;
                let xi = Point::xy(th.cos(), th.sin()) * radius;
                let k = r2 / (y - xi).norm().powi(2);
                num += wt * k * f.value(&(center + xi));
                den += wt * k;
            }
        }
    }
    num / den
}

fn poisson_3d(center: Point, radius: f64, f: &BoundaryData, y: Point, rho: f64) -> f64 {
    let pole = if rho > 0.0 { y * (1.0 / rho) } else { Point::xyz(0.0, 0.0, 1.0) };
    // orthonormal frame around the pole
    let helper = if pole.x().abs() < 0.9 { Point::xyz(1.0, 0.0, 0.0) } else { Point::xyz(0.0, 1.0, 0.0) };
    let e1 = (helper - pole * helper.dot(&pole)).normalized();
    let c = pole.coords();
    let a = e1.coords();
    let e2 = Point::xyz(
        c[1] * a[2] - c[2] * a[1],
        c[2] * a[0] - c[0] * a[2],
        c[0] * a[1] - c[1] * a[0],
    );
    let eta = ((radius - rho) / radius).max(1e-12);
    let breaks = graded_breaks(eta.sqrt() * 2.0);
    let (gx, gw) = gauss_legendre(16, 0.0, 1.0);
    let nphi = 48;
    let r2 = radius * radius - rho * rho;
    let mut num = 0.0;
    let mut den = 0.0;
    for w in breaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        for (u, wu) in gx.iter().zip(&gw) {
            let psi = lo + (hi - lo) * u;
            let wt = (hi - lo) * wu * psi.sin();
            for j in 0..nphi {
                let phi = 2.0 * std::f64::consts::PI * j as f64 / nphi as f64;
                let dir = pole * psi.cos() + (e1 * phi.cos() + e2 * phi.sin()) * psi.sin();
                let xi = dir * radius;
                let k = radius * r2 / (y - xi).norm().powi(3);
                num += wt * k * f.value(&(center + xi));
                den += wt * k;
            }
        }
    }
    num / den
}

/// Increasing scale coordinate in which radial harmonic functions are
/// affine: `ln r` for d=2, `(1 - r^(2-d)) / (d-2)` for d >= 3. Zero at r=1.
#[inline]
pub fn scale_coordinate(r: f64, d: usize) -> f64 {
    if d == 2 {
        r.ln()
    } else {
        let k = d as f64 - 2.0;
        (1.0 - r.powf(-k)) / k
    }
}

/// Inverse of [`scale_coordinate`].
#[inline]
pub fn scale_inverse(t: f64, d: usize) -> f64 {
    if d == 2 {
        t.exp()
    } else {
        let k = d as f64 - 2.0;
        (1.0 - k * t).powf(-1.0 / k)
    }
}

/// Radial harmonic on the annulus `a < r < b` with values `va`, `vb`.
pub fn radial_annulus_harmonic(a: f64, b: f64, va: f64, vb: f64, r: f64, d: usize) -> Result<f64> {
    if !(a > 0.0 && a < b && b <= 1.0) {
        return input(format!("annulus needs 0 < a < b <= 1, got a={a}, b={b}"));
    }
    if d < 2 {
        return input(format!("unsupported dimension {d}"));
    }
    if !(a..=b).contains(&r) {
        return Ok(f64::INFINITY);
    }
    let (ta, tb, tr) = (scale_coordinate(a, d), scale_coordinate(b, d), scale_coordinate(r, d));
    Ok(va + (vb - va) * (tr - ta) / (tb - ta))
}

/// Truncated affine harmonic `(c - u.v) / z` on the unit ball.
pub fn affine_harmonic(v: Point, z: f64, c: f64, u: Point, gstar: f64) -> Result<f64> {
    if !(z > 0.0) {
        return input(format!("affine slope parameter must be positive, got {z}"));
    }
    if (v.norm() - 1.0).abs() > 1e-12 {
        return input("affine direction must be a unit vector");
    }
    v.same_dim(&u)?;
    if u.norm() > 1.0 + 1e-12 {
        return Ok(f64::INFINITY);
    }
    let h = (c - u.dot(&v)) / z;
    Ok(if h <= gstar { h } else { f64::INFINITY })
}

/// Uniform direction on the unit sphere via a normalised Gaussian vector.
pub fn random_direction<R: rand::Rng>(dim: usize, rng: &mut R) -> Point {
    loop {
        let mut c = [0.0; 3];
        for v in c.iter_mut().take(dim) {
            *v = StandardNormal.sample(rng);
        }
        let p = Point::new(&c[..dim]).expect("dim checked by caller");
        let n = p.norm();
        if n > 1e-300 {
            return p * (1.0 / n);
        }
    }
}

/// One walk-on-spheres walk; returns the exit point and the step count.
pub fn wos_walk<D, R>(dom: &D, x: Point, shell: f64, max_steps: usize, rng: &mut R) -> Result<(Point, usize)>
where
    D: SignedDistance + ?Sized,
    R: rand::Rng,
{
    let mut p = x;
    for step in 0..=max_steps {
        let phi = dom.signed_distance(&p);
        if phi > -shell {
            return Ok((dom.closest_boundary_point(&p), step));
        }
        if step == max_steps {
            break;
        }
        p = p + random_direction(p.dim(), rng) * (-phi);
    }
    Err(Error::NonTermination { steps: max_steps })
}

fn check_start<D: SignedDistance + ?Sized>(dom: &D, x: &Point) -> Result<()> {
    if dom.dim() != x.dim() {
        return input(format!(
            "dimension mismatch: domain is {}-dimensional, point is {}-dimensional",
            dom.dim(),
            x.dim()
        ));
    }
    if !(dom.signed_distance(x) < 0.0) {
        return Err(Error::Precondition("walk start lies outside the domain".into()));
    }
    Ok(())
}

/// A single exit sample, seeded from `cfg.seed`.
pub fn wos_exit_sample<D: SignedDistance + ?Sized>(dom: &D, x: Point, cfg: &WosConfig) -> Result<Point> {
    cfg.validate()?;
    check_start(dom, &x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    wos_walk(dom, x, cfg.shell, cfg.max_steps, &mut rng).map(|(p, _)| p)
}

/// Monte Carlo estimate with its standard error and step diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WosEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub walks: usize,
    /// `steps_histogram[k]` counts walks with step count in `[2^k, 2^(k+1))`;
    /// bin 0 also holds zero-step walks.
    pub steps_histogram: Vec<u64>,
}

const WALKS_PER_STREAM: usize = 1024;

/// Walks are split into blocks of 1024; block `k` draws from stream `k` of
/// a ChaCha8 generator seeded with `cfg.seed`, and block sums are reduced in
/// index order, so results do not depend on the thread count.
pub fn wos_harmonic_eval<D: SignedDistance + ?Sized>(
    dom: &D,
    f: &BoundaryData,
    x: Point,
    cfg: &WosConfig,
) -> Result<WosEstimate> {
    cfg.validate()?;
    check_start(dom, &x)?;
    let blocks = cfg.walks.div_ceil(WALKS_PER_STREAM);
    type Block = (f64, f64, f64, f64, Vec<u64>);
    let partial: Vec<Result<Block>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(b as u64);
            let n = WALKS_PER_STREAM.min(cfg.walks - b * WALKS_PER_STREAM);
            let mut s = 0.0;
            let mut s2 = 0.0;
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            let mut hist = vec![0u64; 1];
            for _ in 0..n {
                let (p, steps) = wos_walk(dom, x, cfg.shell, cfg.max_steps, &mut rng)?;
                let v = f.value(&p);
                s += v;
                s2 += v * v;
                lo = lo.min(v);
                hi = hi.max(v);
                let bin = if steps == 0 { 0 } else { steps.ilog2() as usize };
                if hist.len() <= bin {
                    hist.resize(bin + 1, 0);
                }
                hist[bin] += 1;
            }
            Ok((s, s2, lo, hi, hist))
        })
        .collect();
    let mut s = 0.0;
    let mut s2 = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut hist: Vec<u64> = Vec::new();
    for r in partial {
        let (a, b, l, u, h) = r?;
        s += a;
        s2 += b;
        lo = lo.min(l);
        hi = hi.max(u);
        if hist.len() < h.len() {
            hist.resize(h.len(), 0);
        }
        for (t, v) in hist.iter_mut().zip(h) {
            *t += v;
        }
    }
    let n = cfg.walks as f64;
    if lo == hi {
        // every walk read the same datum
        return Ok(WosEstimate {
            mean: lo,
            std_error: 0.0,
            walks: cfg.walks,
            steps_histogram: hist,
        });
    }
    let mean = s / n;
    let var = if cfg.walks > 1 {
        ((s2 - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(WosEstimate {
        mean,
        std_error: (var / n).sqrt(),
        walks: cfg.walks,
        steps_histogram: hist,
    })
}

/// CSV dump of a steps histogram.
pub fn steps_histogram_csv(hist: &[u64]) -> String {
    let mut out = String::from("# units: walk-on-spheres steps per walk (bin lower bound), walk count\nsteps_from,count\n");
    for (k, c) in hist.iter().enumerate() {
        let lo = if k == 0 { 0 } else { 1usize << k };
        out.push_str(&format!("{lo},{c}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DomainDescriptor;

    fn cos_data() -> BoundaryData {
        BoundaryData::new(|p: &Point| p.x() / p.norm())
    }

    #[test]
    fn poisson_reproduces_linear_data() {
        let v = poisson_ball_eval(Point::origin(2), 1.0, &cos_data(), Point::xy(0.3, 0.0));
        assert!((v - 0.3).abs() < 1e-10, "{v}");
        let v = poisson_ball_eval(Point::origin(2), 1.0, &cos_data(), Point::xy(0.999, 0.01));
        assert!((v - 0.999).abs() < 1e-8, "{v}");
        let d3 = BoundaryData::new(|p: &Point| p.coords()[2]);
        let v = poisson_ball_eval(Point::origin(3), 1.0, &d3, Point::xyz(0.1, 0.2, 0.5));
        assert!((v - 0.5).abs() < 1e-8, "{v}");
    }

    #[test]
    fn poisson_constants_and_centre() {
        let c = BoundaryData::constant(0.7);
        let v = poisson_ball_eval(Point::xy(0.1, 0.1), 0.3, &c, Point::xy(0.2, 0.15));
        assert!((v - 0.7).abs() < 1e-14);
        let f = BoundaryData::new(|p: &Point| (3.0 * p.y().atan2(p.x())).sin().powi(2));
        let v = poisson_ball_eval(Point::origin(2), 1.0, &f, Point::origin(2));
        assert!((v - 0.5).abs() < 1e-10);
        assert_eq!(
            poisson_ball_eval(Point::origin(2), 0.5, &c, Point::xy(0.6, 0.0)),
            f64::INFINITY
        );
    }

    #[test]
    fn poisson_quadratic_data() {
        // x^2 - y^2 is harmonic
        let f = BoundaryData::new(|p: &Point| p.x() * p.x() - p.y() * p.y());
        let x = Point::xy(0.5, -0.4);
        let v = poisson_ball_eval(Point::origin(2), 1.0, &f, x);
        assert!((v - (0.25 - 0.16)).abs() < 1e-10);
    }

    #[test]
    fn radial_closed_forms() {
        let v = radial_annulus_harmonic(0.5, 1.0, 1.25, 0.0, 0.75, 2).unwrap();
        assert!((v - 1.25 * 0.75f64.ln() / 0.5f64.ln()).abs() < 1e-12);
        assert!((v - 0.51880).abs() < 1e-5);
        assert_eq!(radial_annulus_harmonic(0.5, 1.0, 1.25, 0.0, 0.5, 2).unwrap(), 1.25);
        assert_eq!(radial_annulus_harmonic(0.5, 1.0, 1.25, 0.0, 1.0, 2).unwrap(), 0.0);
        let v = radial_annulus_harmonic(0.25, 1.0, 1.0, 0.0, 0.5, 3).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            radial_annulus_harmonic(0.25, 1.0, 1.0, 0.0, 0.1, 3).unwrap(),
            f64::INFINITY
        );
        assert!(radial_annulus_harmonic(0.5, 0.4, 1.0, 0.0, 0.45, 2).is_err());
        for d in [2, 3, 5] {
            for r in [0.01, 0.3, 0.9] {
                assert!((scale_inverse(scale_coordinate(r, d), d) - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_closed_form() {
        let x = Point::xy(0.6, 0.8);
        let gstar = 1.25;
        let z = 0.49 / gstar;
        assert!(affine_harmonic(x, z, 1.0, x, gstar).unwrap().abs() < 1e-14);
        // far side: value above g*
        assert_eq!(
            affine_harmonic(x, z, 1.0, Point::origin(2), gstar).unwrap(),
            f64::INFINITY
        );
        let u = x * (1.0 - 0.1);
        let g = affine_harmonic(x, z, 1.0, u, gstar).unwrap() / 0.1;
        assert!((g - gstar / 0.49).abs() < 1e-9);
        assert!(affine_harmonic(x, 0.0, 1.0, u, gstar).is_err());
    }

    #[test]
    fn wos_shell_projection() {
        let dom = DomainDescriptor::ball(Point::origin(2), 1.0).unwrap();
        let cfg = WosConfig::default();
        let x = Point::xy(1.0 - 5e-5, 0.0);
        let p = wos_exit_sample(&dom, x, &cfg).unwrap();
        assert!((p.x() - 1.0).abs() < 1e-12 && p.y().abs() < 1e-12);
        assert!(wos_exit_sample(&dom, Point::xy(1.5, 0.0), &cfg).is_err());
    }

    #[test]
    fn wos_constant_data_is_exact() {
        let dom = DomainDescriptor::ball(Point::origin(2), 1.0).unwrap();
        let cfg = WosConfig { walks: 2000, ..Default::default() };
        let e = wos_harmonic_eval(&dom, &BoundaryData::constant(0.4), Point::xy(0.2, 0.1), &cfg).unwrap();
        assert_eq!(e.mean, 0.4);
        assert_eq!(e.std_error, 0.0);
        assert_eq!(e.steps_histogram.iter().sum::<u64>(), 2000);
    }

    #[test]
    fn wos_matches_poisson_and_is_reproducible() {
        let dom = DomainDescriptor::ball(Point::origin(2), 1.0).unwrap();
        let cfg = WosConfig { walks: 100_000, seed: 7, ..Default::default() };
        let x = Point::xy(0.3, 0.0);
        let e = wos_harmonic_eval(&dom, &cos_data(), x, &cfg).unwrap();
        assert!((e.mean - 0.3).abs() <= 3.0 * e.std_error, "{e:?}");
        let again = wos_harmonic_eval(&dom, &cos_data(), x, &cfg).unwrap();
        assert_eq!(e, again);
    }

    #[test]
    fn wos_budget_exhaustion_is_reported() {
        let dom = DomainDescriptor::ball(Point::origin(2), 1.0).unwrap();
        let cfg = WosConfig { max_steps: 0, ..Default::default() };
        assert!(matches!(
            wos_exit_sample(&dom, Point::xy(0.5, 0.0), &cfg),
            Err(Error::NonTermination { .. })
        ));
    }

    #[test]
    fn histogram_csv_has_header() {
        let csv = steps_histogram_csv(&[3, 4, 5]);
        let lines: Vec<_> = csv.lines().collect();
        assert!(lines[0].starts_with('#'));
        assert_eq!(lines[1], "steps_from,count");
        assert_eq!(lines[4], "4,5");
    }
}
