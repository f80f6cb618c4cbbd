//! Gain functions: continuous, nonnegative, compactly supported in the open
//! unit ball, together with the constants the majorant classes are built on.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::geometry::Point;
use crate::quadrature::gauss_legendre;

type PointFn = dyn Fn(&Point) -> f64 + Send + Sync;
type RadialFn = dyn Fn(f64) -> f64 + Send + Sync;

/// Number of radial samples used to tabulate mollified radial gains.
const RADIAL_TABLE_SIZE: usize = 8192;
/// Probe count for the maximum and Lipschitz estimates.
pub const PROBE_COUNT: usize = 4096;

/// Declarative description of a gain, as it appears in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GainSpec {
    /// Central spike of height 1 and radius `epsilon` on a half-disc dome.
    Spiked {
        epsilon: f64,
        #[serde(default)]
        mollify: Option<f64>,
        #[serde(default = "default_margin")]
        gstar_margin: f64,
    },
    /// `height * max(0, 1 - |x - center|^2 / radius^2)`.
    Dome {
        #[serde(default = "one")]
        height: f64,
        radius: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
        #[serde(default)]
        mollify: Option<f64>,
        #[serde(default = "default_margin")]
        gstar_margin: f64,
    },
    /// `height * max(0, 1 - ((|x| - radius) / width)^2)`.
    Ring {
        #[serde(default = "one")]
        height: f64,
        radius: f64,
        width: f64,
        #[serde(default)]
        mollify: Option<f64>,
        #[serde(default = "default_margin")]
        gstar_margin: f64,
    },
    Zero {
        #[serde(default = "default_margin")]
        gstar_margin: f64,
    },
}

fn default_margin() -> f64 {
    0.25
}

fn one() -> f64 {
    1.0
}

impl GainSpec {
    pub fn gstar_margin(&self) -> f64 {
        match self {
            Self::Spiked { gstar_margin, .. }
            | Self::Dome { gstar_margin, .. }
            | Self::Ring { gstar_margin, .. }
            | Self::Zero { gstar_margin } => *gstar_margin,
        }
    }

    fn mollify_width(&self) -> Option<f64> {
        match self {
            Self::Spiked { mollify, .. } | Self::Dome { mollify, .. } | Self::Ring { mollify, .. } => {
                *mollify
            }
            Self::Zero { .. } => None,
        }
    }

    pub fn build(&self, dim: usize) -> Result<GainField> {
        let raw = match self {
            Self::Spiked { epsilon, .. } => spiked_gain(*epsilon, dim)?,
            Self::Dome {
                height,
                radius,
                center,
                ..
            } => {
                let c = match center {
                    Some(v) => Point::new(v)?,
                    None => Point::origin(dim),
                };
                dome_gain(*height, *radius, c)?
            }
            Self::Ring {
                height,
                radius,
                width,
                ..
            } => ring_gain(*height, *radius, *width, dim)?,
            Self::Zero { .. } => GainField::zero(dim)?,
        };
        match self.mollify_width() {
            Some(w) if w > 0.0 => mollify(&raw, w),
            Some(w) => input(format!("mollification width must be positive, got {w}")),
            None => Ok(raw),
        }
    }
}

/// A gain field with its support radius, maximum and Lipschitz estimate.
#[derive(Clone)]
pub struct GainField {
    dim: usize,
    eval: Arc<PointFn>,
    profile: Option<Arc<RadialFn>>,
    support_radius: f64,
    max_gain: f64,
    lipschitz: f64,
    continuous: bool,
}

impl fmt::Debug for GainField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GainField")
            .field("dim", &self.dim)
            .field("radial", &self.is_radial())
            .field("support_radius", &self.support_radius)
            .field("max_gain", &self.max_gain)
            .field("lipschitz", &self.lipschitz)
            .field("continuous", &self.continuous)
            .finish()
    }
}

impl GainField {
    /// Radially symmetric gain from its profile `r -> g(r)`.
    pub fn radial(
        dim: usize,
        profile: impl Fn(f64) -> f64 + Send + Sync + 'static,
        support_radius: f64,
        lipschitz: f64,
        continuous: bool,
    ) -> Result<Self> {
        check_dim(dim)?;
        check_support(support_radius)?;
        let profile: Arc<RadialFn> = Arc::new(profile);
        let p = profile.clone();
        let mut g = Self {
            dim,
            eval: Arc::new(move |x: &Point| p(x.norm())),
            profile: Some(profile),
            support_radius,
            max_gain: 0.0,
            lipschitz,
            continuous,
        };
        g.max_gain = g.probe_max();
        Ok(g)
    }

    /// General gain from a point evaluator.
    pub fn general(
        dim: usize,
        eval: impl Fn(&Point) -> f64 + Send + Sync + 'static,
        support_radius: f64,
        lipschitz: f64,
        continuous: bool,
    ) -> Result<Self> {
        check_dim(dim)?;
        check_support(support_radius)?;
        let mut g = Self {
            dim,
            eval: Arc::new(eval),
            profile: None,
            support_radius,
            max_gain: 0.0,
            lipschitz,
            continuous,
        };
        g.max_gain = g.probe_max();
        Ok(g)
    }

    pub fn zero(dim: usize) -> Result<Self> {
        Self::radial(dim, |_| 0.0, 0.0, 0.0, true)
    }

    #[inline]
    pub fn value(&self, x: &Point) -> f64 {
        if x.norm() >= self.support_radius {
            return 0.0;
        }
        (self.eval)(x)
    }

    /// Radial profile value; `None` for non-radial gains.
    #[inline]
    pub fn profile(&self, r: f64) -> Option<f64> {
        self.profile.as_ref().map(|p| {
            if r >= self.support_radius {
                0.0
            } else {
                p(r)
            }
        })
    }

    pub fn is_radial(&self) -> bool {
        self.profile.is_some()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    pub fn max_gain(&self) -> f64 {
        self.max_gain
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn is_continuous(&self) -> bool {
        self.continuous
    }

    /// Probe points used for the maximum: radii for radial gains, a square
    /// grid over the support otherwise (both `PROBE_COUNT` points).
    pub fn probe_points(&self) -> Vec<Point> {
        let s = self.support_radius;
        if self.is_radial() {
            (0..PROBE_COUNT)
                .map(|k| Point::on_axis(self.dim, s * k as f64 / (PROBE_COUNT - 1) as f64))
                .collect()
        } else {
            let n = (PROBE_COUNT as f64).sqrt() as usize;
            let mut pts = Vec::with_capacity(n * n);
            for j in 0..n {
                for i in 0..n {
                    let x = -s + 2.0 * s * i as f64 / (n - 1) as f64;
                    let y = -s + 2.0 * s * j as f64 / (n - 1) as f64;
                    let mut p = Point::origin(self.dim);
                    p = p + Point::on_axis(self.dim, x);
                    let mut q = Point::origin(self.dim);
                    if self.dim >= 2 {
                        q = Point::new(&{
                            let mut c = vec![0.0; self.dim];
                            c[1] = y;
                            c
                        })
                        .expect("dim checked");
                    }
                    pts.push(p + q);
                }
            }
            pts
        }
    }

    fn probe_max(&self) -> f64 {
        self.probe_points()
            .iter()
            .map(|p| self.value(p))
            .fold(0.0, f64::max)
    }

    /// Lipschitz estimate by finite differences over the probe set.
    pub fn probe_lipschitz(&self) -> f64 {
        if let Some(p) = &self.profile {
            let n = RADIAL_TABLE_SIZE;
            let s = self.support_radius;
            let h = s / (n - 1) as f64;
            (0..n - 1)
                .map(|k| (p((k + 1) as f64 * h) - p(k as f64 * h)).abs() / h)
                .fold(0.0, f64::max)
        } else {
            let pts = self.probe_points();
            let n = (pts.len() as f64).sqrt() as usize;
            let h = 2.0 * self.support_radius / (n - 1) as f64;
            let mut l = 0.0f64;
            for j in 0..n {
                for i in 0..n {
                    let v = self.value(&pts[j * n + i]);
                    if i + 1 < n {
                        l = l.max((self.value(&pts[j * n + i + 1]) - v).abs() / h);
                    }
                    if j + 1 < n {
                        l = l.max((self.value(&pts[(j + 1) * n + i]) - v).abs() / h);
                    }
                }
            }
            l
        }
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if !(2..=crate::geometry::MAX_DIM).contains(&dim) {
        return input(format!("unsupported dimension {dim}"));
    }
    Ok(())
}

fn check_support(r: f64) -> Result<()> {
    if !(0.0..1.0).contains(&r) {
        return input(format!("support radius must lie in [0, 1), got {r}"));
    }
    Ok(())
}

/// The spiked gain `g^eps`: 1 on the ball of radius `eps`, the half-disc
/// profile `sqrt(1/4 - r^2)` out to radius 1/2, and 0 beyond.
/// Discontinuous for `eps > 0`; mollify before using it as a gain.
pub fn spiked_gain(epsilon: f64, dim: usize) -> Result<GainField> {
    if !(0.0..0.5).contains(&epsilon) {
        return input(format!("spike radius must lie in [0, 1/2), got {epsilon}"));
    }
    let profile = move |r: f64| {
        if r <= epsilon {
            1.0
        } else if r < 0.5 {
            (0.25 - r * r).sqrt()
        } else {
            0.0
        }
    };
    GainField::radial(dim, profile, 0.5, f64::INFINITY, false)
}

pub fn dome_gain(height: f64, radius: f64, center: Point) -> Result<GainField> {
    if !(height > 0.0 && radius > 0.0) {
        return input("dome needs positive height and radius");
    }
    let support = center.norm() + radius;
    if support >= 1.0 {
        return input("dome support must lie inside the unit ball");
    }
    let l = 2.0 * height / radius;
    if center.norm() == 0.0 {
        GainField::radial(
            center.dim(),
            move |r| height * (1.0 - (r / radius).powi(2)).max(0.0),
            radius,
            l,
            true,
        )
    } else {
        GainField::general(
            center.dim(),
            move |x| height * (1.0 - (x.dist(&center) / radius).powi(2)).max(0.0),
            support,
            l,
            true,
        )
    }
}

pub fn ring_gain(height: f64, radius: f64, width: f64, dim: usize) -> Result<GainField> {
    if !(height > 0.0 && width > 0.0 && radius > width) {
        return input("ring needs positive height, width < radius");
    }
    if radius + width >= 1.0 {
        return input("ring support must lie inside the unit ball");
    }
    GainField::radial(
        dim,
        move |r| height * (1.0 - ((r - radius) / width).powi(2)).max(0.0),
        radius + width,
        2.0 * height / width,
        true,
    )
}

/// Constants derived from a gain: maximum, cap, distance of the support to
/// the unit sphere, and the Lipschitz bound on admissible patches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GainConstants {
    pub gbar: f64,
    pub gstar: f64,
    pub delta_supp: f64,
    pub lipschitz_m: f64,
}

pub fn derive_constants(g: &GainField, gstar_margin: f64) -> Result<GainConstants> {
    if !(gstar_margin > 0.0) {
        return input(format!("g* margin must be positive, got {gstar_margin}"));
    }
    let gbar = g.max_gain();
    let gstar = gbar * (1.0 + gstar_margin);
    if !(gstar > gbar) {
        return Err(Error::Degenerate(format!(
            "maximum gain {gbar} leaves no room for a cap g* > max g"
        )));
    }
    let delta_supp = 1.0 - g.support_radius();
    Ok(GainConstants {
        gbar,
        gstar,
        delta_supp,
        lipschitz_m: g.lipschitz().max(gstar / delta_supp),
    })
}

fn bump(t: f64) -> f64 {
    if t >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - t * t)).exp()
    }
}

/// Convolution with the normalized radial bump of radius `width`.
///
/// Radial gains are tabulated: the d-dimensional kernel is integrated in
/// polar (d=2) or spherical (d=3) coordinates around each table radius.
pub fn mollify(g: &GainField, width: f64) -> Result<GainField> {
    if !(width > 0.0) {
        return input(format!("mollification width must be positive, got {width}"));
    }
    if width >= (1.0 - g.support_radius()) / 2.0 {
        return input(format!(
            "mollification width {width} would push the support out of the unit ball"
        ));
    }
    let support = if g.max_gain() == 0.0 {
        g.support_radius()
    } else {
        g.support_radius() + width
    };
    let dim = g.dim();
    let (rho_nodes, rho_weights) = gauss_legendre(64, 0.0, width);
    if let Some(profile) = g.profile.clone() {
        let (ang_nodes, ang_weights) = if dim == 2 {
            // theta in [0, pi], symmetric integrand
            gauss_legendre(192, 0.0, std::f64::consts::PI)
        } else {
            gauss_legendre(192, -1.0, 1.0)
        };
        let prof = |r: f64| if r >= g.support_radius() { 0.0 } else { profile(r) };
        let conv = |r: f64| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (rho, wr) in rho_nodes.iter().zip(&rho_weights) {
                let kw = bump(rho / width) * rho.powi(dim as i32 - 1) * wr;
                for (a, wa) in ang_nodes.iter().zip(&ang_weights) {
                    let c = if dim == 2 { a.cos() } else { *a };
                    let dist = (r * r + rho * rho - 2.0 * r * rho * c).max(0.0).sqrt();
                    num += kw * wa * prof(dist);
                    den += kw * wa;
                }
            }
            num / den
        };
        let n = RADIAL_TABLE_SIZE;
        let step = support / (n - 1) as f64;
        let table: Vec<f64> = (0..n).map(|k| conv(k as f64 * step)).collect();
        let table = Arc::new(table);
        let t = table.clone();
        let interp = move |r: f64| {
            let f = r / step;
            if f >= (n - 1) as f64 {
                return 0.0;
            }
            let k = f.floor() as usize;
            let s = f - k as f64;
            t[k] * (1.0 - s) + t[k + 1] * s
        };
        let mut out = GainField::radial(dim, interp, support, 0.0, true)?;
        out.lipschitz = out.probe_lipschitz();
        Ok(out)
    } else {
        if dim != 2 {
            return input("non-radial mollification is implemented for d=2 only");
        }
        let (th_nodes, th_weights) = gauss_legendre(64, 0.0, 2.0 * std::f64::consts::PI);
        let inner = g.eval.clone();
        let src_support = g.support_radius();
        let conv = move |x: &Point| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (rho, wr) in rho_nodes.iter().zip(&rho_weights) {
                let kw = bump(rho / width) * rho * wr;
                for (th, wt) in th_nodes.iter().zip(&th_weights) {
                    let y = *x - Point::xy(rho * th.cos(), rho * th.sin());
                    let v = if y.norm() >= src_support { 0.0 } else { inner(&y) };
                    num += kw * wt * v;
                    den += kw * wt;
                }
            }
            num / den
        };
        let mut out = GainField::general(dim, conv, support, 0.0, true)?;
        out.lipschitz = out.probe_lipschitz();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spiked_gain_values() {
        let g = spiked_gain(0.05, 2).unwrap();
        assert_eq!(g.value(&Point::origin(2)), 1.0);
        assert!((g.value(&Point::xy(0.3, 0.0)) - 0.4).abs() < 1e-15);
        assert_eq!(g.value(&Point::xy(0.6, 0.0)), 0.0);
        assert_eq!(g.max_gain(), 1.0);
        assert!(!g.is_continuous());
        assert!(spiked_gain(0.5, 2).is_err());
        assert!(spiked_gain(0.7, 2).is_err());
    }

    #[test]
    fn spike_dominates_unspiked() {
        let g0 = spiked_gain(0.0, 2).unwrap();
        for eps in [0.01, 0.05, 0.2] {
            let ge = spiked_gain(eps, 2).unwrap();
            for k in 0..500 {
                let p = Point::xy(k as f64 / 500.0, 0.0);
                assert!(ge.value(&p) >= g0.value(&p));
            }
        }
    }

    #[test]
    fn constants_for_spiked_gain() {
        let g = spiked_gain(0.05, 2).unwrap();
        let m = mollify(&g, 0.01).unwrap();
        let c = derive_constants(&m, 0.25).unwrap();
        assert!((c.gbar - 1.0).abs() < 1e-9);
        assert!((c.gstar - 1.25).abs() < 1e-9);
        assert!((c.delta_supp - 0.49).abs() < 1e-12);
        assert!(c.lipschitz_m >= c.gstar / c.delta_supp);
        assert_eq!(c.lipschitz_m, m.lipschitz().max(c.gstar / c.delta_supp));
        let c2 = derive_constants(&m, 1.0).unwrap();
        assert!((c2.gstar - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_gain_is_degenerate() {
        let z = GainField::zero(2).unwrap();
        assert!(matches!(derive_constants(&z, 0.25), Err(Error::Degenerate(_))));
        let mz = mollify(&z, 0.01).unwrap();
        assert_eq!(mz.value(&Point::xy(0.1, 0.2)), 0.0);
    }

    #[test]
    fn mollified_spike_at_origin() {
        let m = mollify(&spiked_gain(0.05, 2).unwrap(), 0.01).unwrap();
        let v = m.value(&Point::origin(2));
        assert!(v >= (0.25f64 - 0.0036).sqrt() && v <= 1.0, "{v}");
        assert!(m.max_gain() <= 1.0 + 1e-12);
        assert!(m.support_radius() <= 0.5 + 0.01 + 1e-12);
    }

    #[test]
    fn mollify_rejects_wide_kernels() {
        let g = dome_gain(1.0, 0.5, Point::origin(2)).unwrap();
        assert!(mollify(&g, 0.3).is_err());
        assert!(mollify(&g, 0.0).is_err());
    }

    #[test]
    fn mollified_dome_close_to_dome() {
        let g = dome_gain(1.0, 0.5, Point::origin(2)).unwrap();
        let w = 0.02;
        let m = mollify(&g, w).unwrap();
        for k in 0..1000 {
            let p = Point::xy(0.6 * k as f64 / 1000.0, 0.0);
            assert!((m.value(&p) - g.value(&p)).abs() <= g.lipschitz() * w + 1e-9);
        }
    }

    #[test]
    fn off_centre_mollification_in_2d() {
        let g = dome_gain(1.0, 0.3, Point::xy(0.2, 0.1)).unwrap();
        let m = mollify(&g, 0.02).unwrap();
        let p = Point::xy(0.25, 0.05);
        assert!((m.value(&p) - g.value(&p)).abs() <= g.lipschitz() * 0.02);
    }

    #[test]
    fn spec_block_parses() {
        let spec: GainSpec = serde_json::from_str(
            r#"{"kind":"spiked","epsilon":0.05,"mollify":0.01,"gstar_margin":0.25}"#,
        )
        .unwrap();
        let g = spec.build(2).unwrap();
        assert!(g.is_continuous() && g.is_radial());
        let bad: GainSpec =
            serde_json::from_str(r#"{"kind":"spiked","epsilon":0.7}"#).unwrap();
        assert!(bad.build(2).is_err());
    }
}
