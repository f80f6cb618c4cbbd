//! Domains inside the closed unit ball and the distance queries built on them.
//!
//! Every domain answers a signed distance query (negative inside). Closed-form
//! domains (balls, annuli, caps) are exact; `GridRegion` masks carry a
//! precomputed Euclidean distance transform that is bilinearly interpolated.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::ser::{SerializeSeq, SerializeStruct};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{input, Error, Result};

/// Largest dimension a `Point` can carry.
pub const MAX_DIM: usize = 3;

/// A point of R^d, 2 <= d <= 3.
#[derive(Clone, Copy, PartialEq)]
pub struct Point {
    coords: [f64; MAX_DIM],
    dim: usize,
}

impl Point {
    pub fn new(coords: &[f64]) -> Result<Self> {
        if coords.len() < 2 || coords.len() > MAX_DIM {
            return input(format!(
                "point dimension must lie in [2, {MAX_DIM}], got {}",
                coords.len()
            ));
        }
        let mut c = [0.0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Ok(Self {
            coords: c,
            dim: coords.len(),
        })
    }

    pub fn xy(x: f64, y: f64) -> Self {
        Self {
            coords: [x, y, 0.0],
            dim: 2,
        }
    }

    pub fn xyz(x: f64, y: f64, z: f64) -> Self {
        Self {
            coords: [x, y, z],
            dim: 3,
        }
    }

    pub fn origin(dim: usize) -> Self {
        assert!((2..=MAX_DIM).contains(&dim), "unsupported dimension {dim}");
        Self {
            coords: [0.0; MAX_DIM],
            dim,
        }
    }

    /// `r` times the first basis vector.
    pub fn on_axis(dim: usize, r: f64) -> Self {
        let mut p = Self::origin(dim);
        p.coords[0] = r;
        p
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn coords(&self) -> &[f64] {
        &self.coords[..self.dim]
    }

    #[inline]
    pub fn x(&self) -> f64 {
        self.coords[0]
    }

    #[inline]
    pub fn y(&self) -> f64 {
        self.coords[1]
    }

    #[inline]
    pub fn dot(&self, other: &Point) -> f64 {
        debug_assert_eq!(self.dim, other.dim);
        self.coords
            .iter()
            .zip(other.coords.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    #[inline]
    pub fn dist(&self, other: &Point) -> f64 {
        (*self - *other).norm()
    }

    /// Unit vector in the direction of `self`; the first axis for the zero vector.
    pub fn normalized(&self) -> Point {
        let n = self.norm();
        if n > 0.0 {
            *self * (1.0 / n)
        } else {
            Point::on_axis(self.dim, 1.0)
        }
    }

    pub fn same_dim(&self, other: &Point) -> Result<()> {
        if self.dim != other.dim {
            return input(format!(
                "dimension mismatch: {} vs {}",
                self.dim, other.dim
            ));
        }
        Ok(())
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    #[inline]
    fn add(mut self, rhs: Point) -> Point {
        for k in 0..MAX_DIM {
            self.coords[k] += rhs.coords[k];
        }
        self
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    #[inline]
    fn sub(mut self, rhs: Point) -> Point {
        for k in 0..MAX_DIM {
            self.coords[k] -= rhs.coords[k];
        }
        self
    }
}

impl std::ops::Mul<f64> for Point {
    type Output = Point;
    #[inline]
    fn mul(mut self, s: f64) -> Point {
        for c in self.coords.iter_mut() {
            *c *= s;
        }
        self
    }
}

impl fmt::Debug for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.coords())
    }
}

impl Serialize for Point {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.dim))?;
        for c in self.coords() {
            seq.serialize_element(c)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Point {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Point::new(&v).map_err(serde::de::Error::custom)
    }
}

/// Anything that can answer signed distance queries (negative inside).
pub trait SignedDistance: Send + Sync {
    fn dim(&self) -> usize;

    fn signed_distance(&self, x: &Point) -> f64;

    /// Nearest boundary point. The default follows the distance gradient.
    fn closest_boundary_point(&self, x: &Point) -> Point {
        let phi = self.signed_distance(x);
        let h = 1e-6;
        let mut grad = Point::origin(self.dim());
        for k in 0..self.dim() {
            let mut xp = *x;
            let mut xm = *x;
            xp.coords[k] += h;
            xm.coords[k] -= h;
            grad.coords[k] = (self.signed_distance(&xp) - self.signed_distance(&xm)) / (2.0 * h);
        }
        let g = grad.norm();
        if g < 1e-12 {
            return *x;
        }
        *x - grad * (phi / (g * g))
    }
}

/// An open subset of the unit ball.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainDescriptor {
    Ball { center: Point, radius: f64 },
    Annulus { center: Point, inner: f64, outer: f64 },
    /// `{u in the unit ball : u . direction > threshold}`.
    Cap { direction: Point, threshold: f64 },
    FullBall { dim: usize },
    GridRegion(GridRegion),
}

impl DomainDescriptor {
    pub fn ball(center: Point, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return input(format!("ball radius must be positive, got {radius}"));
        }
        if center.norm() + radius > 1.0 + 1e-12 {
            return input("ball must lie in the closed unit ball");
        }
        Ok(Self::Ball { center, radius })
    }

    pub fn annulus(center: Point, inner: f64, outer: f64) -> Result<Self> {
        if !(inner > 0.0 && inner < outer) {
            return input(format!("annulus needs 0 < inner < outer, got {inner}, {outer}"));
        }
        if center.norm() + outer > 1.0 + 1e-12 {
            return input("annulus must lie in the closed unit ball");
        }
        Ok(Self::Annulus {
            center,
            inner,
            outer,
        })
    }

    pub fn cap(direction: Point, threshold: f64) -> Result<Self> {
        if (direction.norm() - 1.0).abs() > 1e-12 {
            return input("cap direction must be a unit vector");
        }
        if !(threshold > -1.0 && threshold < 1.0) {
            return input(format!("cap threshold must lie in (-1, 1), got {threshold}"));
        }
        Ok(Self::Cap {
            direction,
            threshold,
        })
    }

    pub fn full_ball(dim: usize) -> Result<Self> {
        if !(2..=MAX_DIM).contains(&dim) {
            return input(format!("unsupported dimension {dim}"));
        }
        Ok(Self::FullBall { dim })
    }

    pub fn contains(&self, x: &Point) -> bool {
        SignedDistance::signed_distance(self, x) < 0.0
    }

    /// `count` points spread over the boundary.
    pub fn boundary_samples(&self, count: usize) -> Vec<Point> {
        match self {
            Self::Ball { center, radius } => sphere_points(*center, *radius, count),
            Self::FullBall { dim } => sphere_points(Point::origin(*dim), 1.0, count),
            Self::Annulus {
                center,
                inner,
                outer,
            } => {
                let d = center.dim() as i32;
                let wi = inner.powi(d - 1);
                let wo = outer.powi(d - 1);
                let ni = ((count as f64) * wi / (wi + wo)).round().max(1.0) as usize;
                let no = count.saturating_sub(ni).max(1);
                let mut pts = sphere_points(*center, *inner, ni);
                pts.extend(sphere_points(*center, *outer, no));
                pts
            }
            Self::Cap {
                direction,
                threshold,
            } => cap_boundary(*direction, *threshold, count),
            Self::GridRegion(g) => {
                let all = g.boundary_samples();
                if all.len() <= count || count == 0 {
                    all
                } else {
                    let stride = all.len() as f64 / count as f64;
                    (0..count)
                        .map(|k| all[(k as f64 * stride) as usize])
                        .collect()
                }
            }
        }
    }
}

impl SignedDistance for DomainDescriptor {
    fn dim(&self) -> usize {
        match self {
            Self::Ball { center, .. } | Self::Annulus { center, .. } => center.dim(),
            Self::Cap { direction, .. } => direction.dim(),
            Self::FullBall { dim } => *dim,
            Self::GridRegion(_) => 2,
        }
    }

    fn signed_distance(&self, x: &Point) -> f64 {
        match self {
            Self::Ball { center, radius } => x.dist(center) - radius,
            Self::FullBall { .. } => x.norm() - 1.0,
            Self::Annulus {
                center,
                inner,
                outer,
            } => {
                let rho = x.dist(center);
                (inner - rho).max(rho - outer)
            }
            Self::Cap {
                direction,
                threshold,
            } => cap_signed_distance(*direction, *threshold, x),
            Self::GridRegion(g) => g.signed_distance(x),
        }
    }

    fn closest_boundary_point(&self, x: &Point) -> Point {
        match self {
            Self::Ball { center, radius } => *center + (*x - *center).normalized() * *radius,
            Self::FullBall { .. } => x.normalized(),
            Self::Annulus {
                center,
                inner,
                outer,
            } => {
                let rel = *x - *center;
                let rho = rel.norm();
                let r = if (rho - inner).abs() < (outer - rho).abs() {
                    *inner
                } else {
                    *outer
                };
                *center + rel.normalized() * r
            }
            Self::Cap {
                direction,
                threshold,
            } => cap_closest(*direction, *threshold, x),
            Self::GridRegion(_) => {
                // gradient descent on the interpolated distance field
                let phi = self.signed_distance(x);
                let mut p = *x;
                for _ in 0..4 {
                    let h = 1e-4;
                    let gx = (self.signed_distance(&(p + Point::xy(h, 0.0)))
                        - self.signed_distance(&(p - Point::xy(h, 0.0))))
                        / (2.0 * h);
                    let gy = (self.signed_distance(&(p + Point::xy(0.0, h)))
                        - self.signed_distance(&(p - Point::xy(0.0, h))))
                        / (2.0 * h);
                    let g2 = gx * gx + gy * gy;
                    if g2 < 1e-12 {
                        break;
                    }
                    let f = self.signed_distance(&p);
                    p = p - Point::xy(gx, gy) * (f / g2);
                    if f.abs() < 1e-3 * phi.abs().max(1e-9) {
                        break;
                    }
                }
                p
            }
        }
    }
}

/// Signed distance with a dimension check.
pub fn signed_distance(dom: &DomainDescriptor, x: &Point) -> Result<f64> {
    if SignedDistance::dim(dom) != x.dim() {
        return input(format!(
            "dimension mismatch: domain is {}-dimensional, point is {}-dimensional",
            SignedDistance::dim(dom),
            x.dim()
        ));
    }
    Ok(SignedDistance::signed_distance(dom, x))
}

fn cap_signed_distance(v: Point, t: f64, x: &Point) -> f64 {
    let ball = x.norm() - 1.0;
    let plane = t - x.dot(&v);
    if ball <= 0.0 && plane <= 0.0 {
        return ball.max(plane);
    }
    let mut best = rim_distance(v, t, x);
    let proj = *x - v * (x.dot(&v) - t);
    if plane > 0.0 && proj.norm() <= 1.0 {
        best = best.min(plane);
    }
    let r = x.norm();
    if ball > 0.0 && x.dot(&v) / r >= t {
        best = best.min(ball);
    }
    best
}

fn rim_point(v: Point, t: f64, x: &Point) -> Point {
    let par = x.dot(&v);
    let perp = *x - v * par;
    let q = perp.norm();
    let dir = if q > 1e-15 {
        perp * (1.0 / q)
    } else {
        // any unit vector orthogonal to v
        let mut e = Point::on_axis(v.dim(), 1.0);
        if (e.dot(&v)).abs() > 0.9 {
            e = Point::origin(v.dim());
            e.coords[1] = 1.0;
        }
        (e - v * e.dot(&v)).normalized()
    };
    v * t + dir * (1.0 - t * t).max(0.0).sqrt()
}

fn rim_distance(v: Point, t: f64, x: &Point) -> f64 {
    x.dist(&rim_point(v, t, x))
}

fn cap_closest(v: Point, t: f64, x: &Point) -> Point {
    let mut cands = vec![rim_point(v, t, x)];
    let proj = *x - v * (x.dot(&v) - t);
    if proj.norm() <= 1.0 {
        cands.push(proj);
    }
    let s = x.normalized();
    if s.dot(&v) >= t {
        cands.push(s);
    }
    cands
        .into_iter()
        .min_by(|a, b| a.dist(x).total_cmp(&b.dist(x)))
        .expect("rim candidate always present")
}

/// Roughly uniform points on a sphere: equally spaced angles in d=2, a
/// Fibonacci lattice in d=3.
pub fn sphere_points(center: Point, radius: f64, count: usize) -> Vec<Point> {
    let count = count.max(1);
    match center.dim() {
        2 => (0..count)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / count as f64;
                center + Point::xy(th.cos(), th.sin()) * radius
            })
            .collect(),
        _ => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / count as f64;
                    let rho = (1.0 - z * z).sqrt();
                    let phi = golden * k as f64;
                    center + Point::xyz(rho * phi.cos(), rho * phi.sin(), z) * radius
                })
                .collect()
        }
    }
}

fn cap_boundary(v: Point, t: f64, count: usize) -> Vec<Point> {
    // Uniform in arc length over the spherical part and the flat part.
    let pts = sphere_points(Point::origin(v.dim()), 1.0, 4 * count.max(1));
    let mut out: Vec<Point> = pts.into_iter().filter(|p| p.dot(&v) >= t).collect();
    let rim = (1.0 - t * t).sqrt();
    let flat = sphere_points(Point::origin(v.dim()), rim, 2 * count.max(1));
    // rotate the flat disc into the plane orthogonal to v (d=2: a segment)
    let e = rim_point(v, t, &Point::origin(v.dim()));
    let e_dir = (e - v * t).normalized();
    match v.dim() {
        2 => {
            let n = count.max(2);
            for k in 0..n {
                let s = -rim + 2.0 * rim * (k as f64 + 0.5) / n as f64;
                out.push(v * t + e_dir * s);
            }
        }
        _ => {
            for p in flat {
                let frac = p.norm() / rim;
                // fill the flat disc with concentric rings
                let ring = (frac * 4.0).ceil() / 4.0;
                let q = p.normalized();
                let q = (q - v * q.dot(&v)).normalized();
                out.push(v * t + q * (rim * ring));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Grid regions
// ---------------------------------------------------------------------------

/// Boolean cell mask on a uniform Cartesian grid centred on the origin.
///
/// Node `(i, j)` sits at `((i - (nx-1)/2) h, (j - (ny-1)/2) h)`; storage is
/// row-major with `j` the row.
#[derive(Clone)]
pub struct GridRegion {
    nx: usize,
    ny: usize,
    spacing: f64,
    mask: Arc<Vec<bool>>,
    phi: Arc<Vec<f64>>,
}

impl fmt::Debug for GridRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GridRegion")
            .field("nx", &self.nx)
            .field("ny", &self.ny)
            .field("spacing", &self.spacing)
            .field("inside", &self.inside_count())
            .finish()
    }
}

impl Serialize for GridRegion {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("GridRegion", 4)?;
        st.serialize_field("nx", &self.nx)?;
        st.serialize_field("ny", &self.ny)?;
        st.serialize_field("spacing", &self.spacing)?;
        st.serialize_field("inside_cells", &self.inside_count())?;
        st.end()
    }
}

impl GridRegion {
    pub fn from_mask(nx: usize, ny: usize, spacing: f64, mask: Vec<bool>) -> Result<Self> {
        if nx < 2 || ny < 2 || mask.len() != nx * ny {
            return input(format!(
                "mask of length {} does not match a {nx}x{ny} grid",
                mask.len()
            ));
        }
        if !(spacing > 0.0) {
            return input("grid spacing must be positive");
        }
        let mut region = Self {
            nx,
            ny,
            spacing,
            mask: Arc::new(mask),
            phi: Arc::new(Vec::new()),
        };
        for j in 0..ny {
            for i in 0..nx {
                if region.mask[j * nx + i] && region.node(i, j).norm() >= 1.0 {
                    return input(format!("mask cell ({i}, {j}) is not strictly inside the unit ball"));
                }
            }
        }
        region.phi = Arc::new(signed_distance_transform(&region.mask, nx, ny, spacing));
        Ok(region)
    }

    /// Rasterise any domain onto an `n x n` grid covering `[-1, 1]^2`.
    pub fn rasterize(dom: &DomainDescriptor, n: usize) -> Result<Self> {
        if SignedDistance::dim(dom) != 2 {
            return input("grid regions are two-dimensional");
        }
        let spacing = 2.0 / (n - 1) as f64;
        let mut mask = vec![false; n * n];
        for j in 0..n {
            for i in 0..n {
                let p = node_position(i, j, n, n, spacing);
                mask[j * n + i] = p.norm() < 1.0 && SignedDistance::signed_distance(dom, &p) < 0.0;
            }
        }
        Self::from_mask(n, n, spacing, mask)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn inside(&self, i: usize, j: usize) -> bool {
        self.mask[j * self.nx + i]
    }

    pub fn inside_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn node(&self, i: usize, j: usize) -> Point {
        node_position(i, j, self.nx, self.ny, self.spacing)
    }

    /// Node values of the signed distance transform.
    pub fn distance_field(&self) -> &[f64] {
        &self.phi
    }

    /// Largest distance from an inside node to the boundary.
    pub fn inradius(&self) -> f64 {
        self.phi.iter().fold(0.0f64, |m, &p| m.max(-p))
    }

    pub fn signed_distance(&self, x: &Point) -> f64 {
        bilinear(&self.phi, self.nx, self.ny, self.spacing, x)
    }

    /// Midpoints of cell edges separating inside from outside cells.
    pub fn boundary_samples(&self) -> Vec<Point> {
        let mut out = Vec::new();
        let h = self.spacing;
        for j in 0..self.ny {
            for i in 0..self.nx {
                let here = self.inside(i, j);
                let p = self.node(i, j);
                // right and up neighbours; grid edges count as outside
                let right = if i + 1 < self.nx { self.inside(i + 1, j) } else { false };
                let up = if j + 1 < self.ny { self.inside(i, j + 1) } else { false };
                if here != right {
                    out.push(p + Point::xy(0.5 * h, 0.0));
                }
                if here != up {
                    out.push(p + Point::xy(0.0, 0.5 * h));
                }
                if here && i == 0 {
                    out.push(p - Point::xy(0.5 * h, 0.0));
                }
                if here && j == 0 {
                    out.push(p - Point::xy(0.0, 0.5 * h));
                }
            }
        }
        out
    }

    /// Row-major 0/1 CSV with a first line `d,nx,ny,spacing`.
    pub fn to_csv(&self) -> String {
        let mut s = format!("2,{},{},{}\n", self.nx, self.ny, self.spacing);
        for j in 0..self.ny {
            let row: Vec<&str> = (0..self.nx)
                .map(|i| if self.inside(i, j) { "1" } else { "0" })
                .collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Input("empty mask CSV".into()))?;
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return input(format!("mask header must be d,nx,ny,spacing; got {header:?}"));
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Input(format!("bad integer {s:?}: {e}")))
        };
        let d = parse_usize(fields[0])?;
        if d != 2 {
            return input(format!("only d=2 masks are supported, got d={d}"));
        }
        let nx = parse_usize(fields[1])?;
        let ny = parse_usize(fields[2])?;
        let spacing: f64 = fields[3]
            .parse()
            .map_err(|e| Error::Input(format!("bad spacing {:?}: {e}", fields[3])))?;
        let mut mask = Vec::with_capacity(nx * ny);
        for line in lines {
            for cell in line.split(',') {
                match cell.trim() {
                    "0" => mask.push(false),
                    "1" => mask.push(true),
                    other => return input(format!("mask cells must be 0 or 1, got {other:?}")),
                }
            }
        }
        Self::from_mask(nx, ny, spacing, mask)
    }
}

fn node_position(i: usize, j: usize, nx: usize, ny: usize, h: f64) -> Point {
    Point::xy(
        (i as f64 - (nx - 1) as f64 / 2.0) * h,
        (j as f64 - (ny - 1) as f64 / 2.0) * h,
    )
}

fn bilinear(field: &[f64], nx: usize, ny: usize, h: f64, x: &Point) -> f64 {
    let fx = x.x() / h + (nx - 1) as f64 / 2.0;
    let fy = x.y() / h + (ny - 1) as f64 / 2.0;
    let cx = fx.clamp(0.0, (nx - 1) as f64);
    let cy = fy.clamp(0.0, (ny - 1) as f64);
    // distance to the grid box, added outside it
    let excess = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() * h;
    let i0 = (cx.floor() as usize).min(nx - 2);
    let j0 = (cy.floor() as usize).min(ny - 2);
    let tx = cx - i0 as f64;
    let ty = cy - j0 as f64;
    let f = |i: usize, j: usize| field[j * nx + i];
    let v = (1.0 - tx) * (1.0 - ty) * f(i0, j0)
        + tx * (1.0 - ty) * f(i0 + 1, j0)
        + (1.0 - tx) * ty * f(i0, j0 + 1)
        + tx * ty * f(i0 + 1, j0 + 1);
    v + excess
}

/// Exact squared Euclidean distance transform along one line (lower envelope
/// of parabolas). `f` is 0 at sites and +inf elsewhere.
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![f64::INFINITY; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(p) => p,
        None => return d,
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0usize;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *dq = (q as f64 - p as f64).powi(2) + f[p];
    }
    d
}

/// Squared distance (in cells) from every node to the nearest `site` node.
fn squared_edt(sites: &[bool], nx: usize, ny: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; nx * ny];
    for j in 0..ny {
        let row: Vec<f64> = (0..nx)
            .map(|i| if sites[j * nx + i] { 0.0 } else { f64::INFINITY })
            .collect();
        let d = edt_1d(&row);
        tmp[j * nx..(j + 1) * nx].copy_from_slice(&d);
    }
    let mut out = vec![0.0; nx * ny];
    for i in 0..nx {
        let col: Vec<f64> = (0..ny).map(|j| tmp[j * nx + i]).collect();
        let d = edt_1d(&col);
        for j in 0..ny {
            out[j * nx + i] = d[j];
        }
    }
    out
}

/// Signed distance at nodes; the boundary sits half a cell between inside
/// and outside nodes. The grid is padded by one outside layer.
fn signed_distance_transform(mask: &[bool], nx: usize, ny: usize, h: f64) -> Vec<f64> {
    let px = nx + 2;
    let py = ny + 2;
    let mut inside = vec![false; px * py];
    for j in 0..ny {
        for i in 0..nx {
            inside[(j + 1) * px + i + 1] = mask[j * nx + i];
        }
    }
    let outside: Vec<bool> = inside.iter().map(|b| !b).collect();
    let to_out = squared_edt(&outside, px, py);
    let to_in = squared_edt(&inside, px, py);
    let mut phi = vec![0.0; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let k = (j + 1) * px + i + 1;
            phi[j * nx + i] = if inside[k] {
                -(to_out[k].sqrt() - 0.5) * h
            } else if to_in[k].is_finite() {
                (to_in[k].sqrt() - 0.5) * h
            } else {
                // empty region: distance to nowhere, keep it large and positive
                2.0 * (nx.max(ny)) as f64 * h
            };
        }
    }
    phi
}

/// Connected components (4-neighbour) of the cells where `mask` is true.
/// Returns labels (-1 where false) and the component count.
pub fn label_components(mask: &[bool], nx: usize, ny: usize) -> (Vec<i32>, usize) {
    let mut labels = vec![-1i32; nx * ny];
    let mut count = 0usize;
    let mut stack = Vec::new();
    for start in 0..nx * ny {
        if !mask[start] || labels[start] >= 0 {
            continue;
        }
        labels[start] = count as i32;
        stack.push(start);
        while let Some(k) = stack.pop() {
            let (i, j) = (k % nx, k / nx);
            let mut visit = |ii: usize, jj: usize| {
                let kk = jj * nx + ii;
                if mask[kk] && labels[kk] < 0 {
                    labels[kk] = count as i32;
                    stack.push(kk);
                }
            };
            if i > 0 {
                visit(i - 1, j);
            }
            if i + 1 < nx {
                visit(i + 1, j);
            }
            if j > 0 {
                visit(i, j - 1);
            }
            if j + 1 < ny {
                visit(i, j + 1);
            }
        }
        count += 1;
    }
    (labels, count)
}

/// Symmetric Hausdorff distance between two finite samplings.
pub fn hausdorff_distance(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return input("Hausdorff distance needs two nonempty point sets");
    }
    let directed = |p: &[Point], q: &[Point]| {
        p.par_iter()
            .map(|x| q.iter().map(|y| x.dist(y)).fold(f64::INFINITY, f64::min))
            .reduce(|| 0.0, f64::max)
    };
    Ok(directed(a, b).max(directed(b, a)))
}

/// Smooth inner approximation of a grid region at scale `delta`: the
/// sublevel set `{phi_smooth < -delta/2}` of the Gaussian-mollified
/// (std `delta/4`) signed distance.
pub fn smooth_inner_approximation(region: &GridRegion, delta: f64) -> Result<DomainDescriptor> {
    let delta0 = 0.5 * region.inradius();
    if !(delta > 0.0) {
        return input(format!("delta must be positive, got {delta}"));
    }
    if delta >= delta0 {
        return Err(Error::Degenerate(format!(
            "delta {delta} is not below half the inradius ({delta0})"
        )));
    }
    let (nx, ny, h) = (region.nx, region.ny, region.spacing);
    let sigma = delta / 4.0 / h;
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();
    let phi = &region.phi;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let mut s = 0.0;
            for (o, w) in kernel.iter().enumerate() {
                let ii = clampi(i as isize + o as isize - radius, nx);
                s += w * phi[j * nx + ii];
            }
            tmp[j * nx + i] = s;
        }
    }
    let mut mask = vec![false; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let mut s = 0.0;
            for (o, w) in kernel.iter().enumerate() {
                let jj = clampi(j as isize + o as isize - radius, ny);
                s += w * tmp[jj * nx + i];
            }
            mask[j * nx + i] = s < -delta / 2.0 && region.inside(i, j);
        }
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::Degenerate("inner approximation is empty".into()));
    }
    Ok(DomainDescriptor::GridRegion(GridRegion::from_mask(
        nx, ny, h, mask,
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_distances() {
        let ball = DomainDescriptor::ball(Point::origin(2), 0.5).unwrap();
        assert!((signed_distance(&ball, &Point::xy(0.3, 0.0)).unwrap() + 0.2).abs() < 1e-15);
        let full = DomainDescriptor::full_ball(2).unwrap();
        assert_eq!(signed_distance(&full, &Point::xy(1.0, 0.0)).unwrap(), 0.0);
        let ann = DomainDescriptor::annulus(Point::origin(2), 0.2, 0.8).unwrap();
        assert!((signed_distance(&ann, &Point::xy(0.5, 0.0)).unwrap() + 0.3).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_input_error() {
        let ball = DomainDescriptor::ball(Point::origin(3), 0.5).unwrap();
        assert!(matches!(
            signed_distance(&ball, &Point::xy(0.0, 0.0)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn cap_distance_inside_and_outside() {
        let cap = DomainDescriptor::cap(Point::xy(1.0, 0.0), 0.5).unwrap();
        // inside, nearer the flat face
        assert!((cap.signed_distance(&Point::xy(0.6, 0.0)) + 0.1).abs() < 1e-12);
        // straight out through the flat face
        assert!((cap.signed_distance(&Point::xy(0.3, 0.0)) - 0.2).abs() < 1e-12);
        // beyond the rim: nearest point is the rim corner (0.5, sqrt(3)/2)
        let x = Point::xy(0.2, 1.2);
        let rim = Point::xy(0.5, 0.75f64.sqrt());
        assert!((cap.signed_distance(&x) - x.dist(&rim)).abs() < 1e-12);
    }

    #[test]
    fn hausdorff_examples() {
        let o = [Point::xy(0.0, 0.0)];
        assert_eq!(hausdorff_distance(&o, &o).unwrap(), 0.0);
        assert_eq!(hausdorff_distance(&o, &[Point::xy(1.0, 0.0)]).unwrap(), 1.0);
        let a = sphere_points(Point::origin(2), 1.0, 360);
        let b = sphere_points(Point::origin(2), 0.9, 360);
        // same angles: the brute-force value is exactly the radial gap
        assert!((hausdorff_distance(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        assert!(hausdorff_distance(&[], &a).is_err());
    }

    #[test]
    fn grid_region_distance_matches_disc() {
        let disc = DomainDescriptor::ball(Point::origin(2), 0.5).unwrap();
        let g = GridRegion::rasterize(&disc, 257).unwrap();
        for p in [Point::xy(0.0, 0.0), Point::xy(0.3, 0.1), Point::xy(0.7, -0.2)] {
            let exact = disc.signed_distance(&p);
            assert!((g.signed_distance(&p) - exact).abs() < 2.0 * g.spacing(), "{p:?}");
        }
    }

    #[test]
    fn mask_csv_round_trip() {
        let disc = DomainDescriptor::ball(Point::xy(0.1, 0.0), 0.4).unwrap();
        let g = GridRegion::rasterize(&disc, 33).unwrap();
        let text = g.to_csv();
        assert!(text.starts_with("2,33,33,0.0625\n"));
        let back = GridRegion::from_csv(&text).unwrap();
        assert_eq!(back.mask(), g.mask());
    }

    #[test]
    fn mask_outside_unit_ball_rejected() {
        let mut mask = vec![false; 9];
        mask[0] = true; // corner (-1, -1)
        assert!(GridRegion::from_mask(3, 3, 1.0, mask).is_err());
    }

    #[test]
    fn inner_approximation_of_disc() {
        let disc = DomainDescriptor::ball(Point::origin(2), 0.5).unwrap();
        let g = GridRegion::rasterize(&disc, 257).unwrap();
        let delta = 0.05;
        let inner = smooth_inner_approximation(&g, delta).unwrap();
        let samples = inner.boundary_samples(100_000);
        let exact_inner = sphere_points(Point::origin(2), 0.5 - delta / 2.0, 512);
        let dh = hausdorff_distance(&samples, &exact_inner).unwrap();
        assert!(dh < delta, "d_H to the shrunken disc = {dh}");
        for p in &samples {
            assert!(g.signed_distance(p) <= -delta / 4.0);
        }
    }

    #[test]
    fn inner_approximation_keeps_annulus_topology() {
        let ann = DomainDescriptor::annulus(Point::origin(2), 0.1, 0.6).unwrap();
        let g = GridRegion::rasterize(&ann, 257).unwrap();
        let inner = smooth_inner_approximation(&g, 0.02).unwrap();
        let DomainDescriptor::GridRegion(r) = inner else {
            panic!("expected a grid region")
        };
        let outside: Vec<bool> = r.mask().iter().map(|b| !b).collect();
        let (_, holes) = label_components(&outside, r.nx(), r.ny());
        let (_, pieces) = label_components(r.mask(), r.nx(), r.ny());
        assert_eq!(pieces, 1);
        assert_eq!(holes, 2, "hole plus exterior");
    }

    #[test]
    fn inner_approximation_rejects_large_delta() {
        let disc = DomainDescriptor::ball(Point::origin(2), 0.2).unwrap();
        let g = GridRegion::rasterize(&disc, 129).unwrap();
        assert!(matches!(
            smooth_inner_approximation(&g, g.inradius()),
            Err(Error::Degenerate(_))
        ));
    }
}
