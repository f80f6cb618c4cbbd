//! Harmonic patches and branched harmonic majorants.
//!
//! A patch is a harmonic function on a subdomain of the unit ball, capped at
//! `g*` and equal to `+inf` off its closed domain. A branched majorant pairs
//! a base patch with a lazy extension map that attaches a successor majorant
//! at each point of the interior boundary.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{input, Error, Result};
use crate::gain::GainField;
use crate::geometry::{DomainDescriptor, Point, SignedDistance};
use crate::harmonic::{
    affine_harmonic, poisson_ball_eval, radial_annulus_harmonic, wos_harmonic_eval, BoundaryData,
    WosConfig, SPHERE_TOL,
};

/// Points within this signed distance count as lying in the closed domain.
pub const CLOSED_TOL: f64 = 1e-9;
/// Default cap on tree depth.
pub const DEFAULT_MAX_DEPTH: usize = 16;
/// Matching tolerance reported by regularised trees.
pub const MATCH_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PatchClass {
    H0,
    H1,
}

/// How the harmonic function on the patch domain is evaluated.
#[derive(Clone, Debug)]
pub enum PatchKind {
    Constant(f64),
    /// `(c - u.v) / z`.
    Affine { v: Point, z: f64, c: f64 },
    /// Radial harmonic on `a < |x| < b` with boundary values `va`, `vb`.
    RadialAnnulus { a: f64, b: f64, va: f64, vb: f64 },
    /// Poisson integral of the boundary data over a ball domain.
    PoissonBall,
    /// Walk-on-spheres mean of the boundary data over a general domain.
    Wos(WosConfig),
}

#[derive(Clone)]
pub struct HarmonicPatch {
    domain: DomainDescriptor,
    kind: PatchKind,
    data: BoundaryData,
    gstar: f64,
    class: PatchClass,
    lipschitz_m: f64,
    shift: f64,
}

impl fmt::Debug for HarmonicPatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HarmonicPatch")
            .field("domain", &self.domain)
            .field("kind", &self.kind)
            .field("class", &self.class)
            .field("gstar", &self.gstar)
            .field("shift", &self.shift)
            .finish()
    }
}

impl HarmonicPatch {
    fn build(
        domain: DomainDescriptor,
        kind: PatchKind,
        data: BoundaryData,
        gstar: f64,
        lipschitz_m: f64,
    ) -> Result<Self> {
        if !(gstar > 0.0) {
            return input(format!("cap g* must be positive, got {gstar}"));
        }
        let mut p = Self {
            domain,
            kind,
            data,
            gstar,
            class: PatchClass::H0,
            lipschitz_m,
            shift: 0.0,
        };
        for b in p.domain.boundary_samples(256) {
            let v = p.data.value(&b);
            if !(-1e-12..=gstar + 1e-12).contains(&v) {
                return input(format!("boundary datum {v} outside [0, g*] at {b:?}"));
            }
        }
        if p.interior_boundary_samples(256).is_empty() {
            p.class = PatchClass::H1;
        }
        Ok(p)
    }

    pub fn constant(domain: DomainDescriptor, value: f64, gstar: f64, lipschitz_m: f64) -> Result<Self> {
        Self::build(
            domain,
            PatchKind::Constant(value),
            BoundaryData::constant(value),
            gstar,
            lipschitz_m,
        )
    }

    /// The affine harmonic `(c - u.v)/z` on `{u : (c - u.v)/z < g*}`.
    pub fn affine(v: Point, z: f64, c: f64, gstar: f64, lipschitz_m: f64) -> Result<Self> {
        affine_harmonic(v, z, c, v, gstar)?;
        let threshold = c - z * gstar;
        let domain = if threshold <= -1.0 {
            DomainDescriptor::full_ball(v.dim())?
        } else if threshold >= 1.0 {
            return Err(Error::Degenerate("affine patch has empty domain".into()));
        } else {
            DomainDescriptor::cap(v, threshold)?
        };
        let data = BoundaryData::new(move |u: &Point| ((c - u.dot(&v)) / z).min(gstar));
        Self::build(domain, PatchKind::Affine { v, z, c }, data, gstar, lipschitz_m)
    }

    pub fn radial_annulus(
        dim: usize,
        a: f64,
        b: f64,
        va: f64,
        vb: f64,
        gstar: f64,
        lipschitz_m: f64,
    ) -> Result<Self> {
        let domain = DomainDescriptor::annulus(Point::origin(dim), a, b)?;
        let mid = 0.5 * (a + b);
        let data = BoundaryData::new(move |u: &Point| if u.norm() < mid { va } else { vb });
        Self::build(
            domain,
            PatchKind::RadialAnnulus { a, b, va, vb },
            data,
            gstar,
            lipschitz_m,
        )
    }

    pub fn poisson_ball(
        center: Point,
        radius: f64,
        data: BoundaryData,
        gstar: f64,
        lipschitz_m: f64,
    ) -> Result<Self> {
        let domain = DomainDescriptor::ball(center, radius)?;
        Self::build(domain, PatchKind::PoissonBall, data, gstar, lipschitz_m)
    }

    pub fn wos(
        domain: DomainDescriptor,
        data: BoundaryData,
        cfg: WosConfig,
        gstar: f64,
        lipschitz_m: f64,
    ) -> Result<Self> {
        Self::build(domain, PatchKind::Wos(cfg), data, gstar, lipschitz_m)
    }

    pub fn domain(&self) -> &DomainDescriptor {
        &self.domain
    }

    pub fn kind(&self) -> &PatchKind {
        &self.kind
    }

    pub fn class(&self) -> PatchClass {
        self.class
    }

    pub fn gstar(&self) -> f64 {
        self.gstar
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz_m
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn dim(&self) -> usize {
        SignedDistance::dim(&self.domain)
    }

    /// Copy with every value raised by `c` (then capped at `g*`).
    pub fn shifted(&self, c: f64) -> Self {
        let mut p = self.clone();
        p.shift += c;
        p
    }

    fn raw(&self, x: &Point) -> f64 {
        match &self.kind {
            PatchKind::Constant(c) => *c,
            PatchKind::Affine { v, z, c } => (c - x.dot(v)) / z,
            PatchKind::RadialAnnulus { a, b, va, vb } => {
                let r = x.norm().clamp(*a, *b);
                radial_annulus_harmonic(*a, *b, *va, *vb, r, self.dim()).unwrap_or(f64::INFINITY)
            }
            PatchKind::PoissonBall => match &self.domain {
                DomainDescriptor::Ball { center, radius } => {
                    let rel = *x - *center;
                    let y = if rel.norm() > *radius {
                        *center + rel * (*radius / rel.norm())
                    } else {
                        *x
                    };
                    poisson_ball_eval(*center, *radius, &self.data, y)
                }
                _ => f64::INFINITY,
            },
            PatchKind::Wos(cfg) => {
                if self.domain.signed_distance(x) > -cfg.shell {
                    self.data.value(&self.domain.closest_boundary_point(x))
                } else {
                    wos_harmonic_eval(&self.domain, &self.data, *x, cfg)
                        .map(|e| e.mean)
                        .unwrap_or(f64::INFINITY)
                }
            }
        }
    }

    /// Patch value: harmonic on the closed domain, capped at `g*`, `+inf`
    /// elsewhere (including outside the closed unit ball).
    pub fn value(&self, x: &Point) -> f64 {
        if x.dim() != self.dim() || x.norm() > 1.0 + CLOSED_TOL {
            return f64::INFINITY;
        }
        if self.domain.signed_distance(x) > CLOSED_TOL {
            return f64::INFINITY;
        }
        let v = self.raw(x);
        if !v.is_finite() {
            return f64::INFINITY;
        }
        (v + self.shift).min(self.gstar)
    }

    pub fn contains(&self, x: &Point) -> bool {
        x.dim() == self.dim() && self.domain.signed_distance(x) <= CLOSED_TOL
    }

    /// Boundary points inside the open unit ball where the value is below
    /// `g*`; evenly thinned to at most `count`.
    pub fn interior_boundary_samples(&self, count: usize) -> Vec<Point> {
        if count == 0 {
            return Vec::new();
        }
        let cand: Vec<Point> = self
            .domain
            .boundary_samples(4 * count)
            .into_iter()
            .filter(|p| p.norm() < 1.0 - SPHERE_TOL)
            .filter(|p| self.value(p) < self.gstar - 1e-12)
            .collect();
        thin(cand, count)
    }

    /// Deterministic probe points in the closed domain.
    pub fn domain_probes(&self, count: usize) -> Vec<Point> {
        domain_probes(&self.domain, count)
    }

    /// Largest central-difference gradient over `count` interior probes.
    pub fn max_gradient(&self, count: usize) -> f64 {
        let h = 1e-6;
        let dim = self.dim();
        let mut worst = 0.0f64;
        for p in self.domain_probes(count) {
            if self.domain.signed_distance(&p) > -4.0 * h {
                continue;
            }
            let mut g2 = 0.0;
            for k in 0..dim {
                let mut e = [0.0; 3];
                e[k] = h;
                let e = Point::new(&e[..dim]).expect("same dim");
                let d = (self.value(&(p + e)) - self.value(&(p - e))) / (2.0 * h);
                if d.is_finite() {
                    g2 += d * d;
                }
            }
            worst = worst.max(g2.sqrt());
        }
        worst
    }
}

fn thin(pts: Vec<Point>, count: usize) -> Vec<Point> {
    if pts.len() <= count {
        return pts;
    }
    let stride = pts.len() as f64 / count as f64;
    (0..count).map(|k| pts[(k as f64 * stride) as usize]).collect()
}

/// Halton point `k` in bases 2, 3, 5.
fn halton(k: usize, dim: usize) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (j, base) in [2usize, 3, 5].iter().take(dim).enumerate() {
        let mut f = 1.0;
        let mut r = 0.0;
        let mut i = k + 1;
        while i > 0 {
            f /= *base as f64;
            r += f * (i % base) as f64;
            i /= base;
        }
        out[j] = r;
    }
    out
}

/// Deterministic quasi-random points in the closed domain plus boundary points.
pub fn domain_probes(dom: &DomainDescriptor, count: usize) -> Vec<Point> {
    let dim = SignedDistance::dim(dom);
    let (lo, hi): (Point, Point) = match dom {
        DomainDescriptor::Ball { center, radius } => {
            let r = Point::new(&vec![*radius; dim]).expect("dim");
            (*center - r, *center + r)
        }
        DomainDescriptor::Annulus { center, outer, .. } => {
            let r = Point::new(&vec![*outer; dim]).expect("dim");
            (*center - r, *center + r)
        }
        _ => {
            let r = Point::new(&vec![1.0; dim]).expect("dim");
            (Point::origin(dim) - r, r)
        }
    };
    let n_bdry = count / 8;
    let n_int = count - n_bdry;
    let mut pts = Vec::with_capacity(count);
    // the origin is where radial gains peak
    let o = Point::origin(dim);
    if dom.signed_distance(&o) < 0.0 {
        pts.push(o);
    }
    if let DomainDescriptor::Ball { center, .. } = dom {
        if center.norm() > 0.0 {
            pts.push(*center);
        }
    }
    let mut k = 0;
    while pts.len() < n_int && k < 200 * count.max(1) {
        let h = halton(k, dim);
        k += 1;
        let mut c = [0.0; 3];
        for j in 0..dim {
            c[j] = lo.coords()[j] + (hi.coords()[j] - lo.coords()[j]) * h[j];
        }
        let p = Point::new(&c[..dim]).expect("dim");
        if p.norm() < 1.0 && dom.signed_distance(&p) < 0.0 {
            pts.push(p);
        }
    }
    pts.extend(
        dom.boundary_samples(n_bdry.max(1))
            .into_iter()
            .filter(|p| p.norm() <= 1.0 + 1e-12)
            .take(n_bdry),
    );
    pts
}

/// Lazy map from interior-boundary points to successor majorants.
pub trait ExtensionMap: Send + Sync {
    fn query(&self, u: &Point) -> Result<BranchedMajorant>;
    /// Largest depth of any majorant this map returns.
    fn max_depth(&self) -> usize;
}

struct FnExtension<F> {
    f: F,
    depth: usize,
}

impl<F> ExtensionMap for FnExtension<F>
where
    F: Fn(&Point) -> Result<BranchedMajorant> + Send + Sync,
{
    fn query(&self, u: &Point) -> Result<BranchedMajorant> {
        (self.f)(u)
    }

    fn max_depth(&self) -> usize {
        self.depth
    }
}

/// Extension map backed by a closure returning majorants of depth <= `depth`.
pub fn extension_fn<F>(depth: usize, f: F) -> Arc<dyn ExtensionMap>
where
    F: Fn(&Point) -> Result<BranchedMajorant> + Send + Sync + 'static,
{
    Arc::new(FnExtension { f, depth })
}

#[derive(Clone)]
pub struct BranchedMajorant {
    base: Arc<HarmonicPatch>,
    extension: Option<Arc<dyn ExtensionMap>>,
    depth: usize,
    error_bound: f64,
}

impl fmt::Debug for BranchedMajorant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BranchedMajorant")
            .field("base", &self.base)
            .field("depth", &self.depth)
            .field("error_bound", &self.error_bound)
            .finish_non_exhaustive()
    }
}

impl BranchedMajorant {
    /// Depth-1 majorant; the patch must have an empty interior boundary.
    pub fn leaf(patch: HarmonicPatch) -> Result<Self> {
        if patch.class != PatchClass::H1 {
            return Err(Error::Structural(
                "depth-1 majorant needs a patch with empty interior boundary".into(),
            ));
        }
        Ok(Self {
            base: Arc::new(patch),
            extension: None,
            depth: 1,
            error_bound: 0.0,
        })
    }

    pub fn branch(patch: HarmonicPatch, extension: Arc<dyn ExtensionMap>, error_bound: f64) -> Result<Self> {
        Self::branch_with_cap(patch, extension, error_bound, DEFAULT_MAX_DEPTH)
    }

    pub fn branch_with_cap(
        patch: HarmonicPatch,
        extension: Arc<dyn ExtensionMap>,
        error_bound: f64,
        max_depth: usize,
    ) -> Result<Self> {
        if !(error_bound >= 0.0) {
            return input(format!("error bound must be nonnegative, got {error_bound}"));
        }
        let depth = 1 + extension.max_depth();
        if extension.max_depth() == 0 {
            return Err(Error::Structural("extension map returns no majorants".into()));
        }
        if depth > max_depth {
            return Err(Error::Structural(format!(
                "tree depth {depth} exceeds the cap {max_depth}"
            )));
        }
        Ok(Self {
            base: Arc::new(patch),
            extension: Some(extension),
            depth,
            error_bound,
        })
    }

    pub fn base(&self) -> &HarmonicPatch {
        &self.base
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn error_bound(&self) -> f64 {
        self.error_bound
    }

    pub fn extension(&self) -> Option<&Arc<dyn ExtensionMap>> {
        self.extension.as_ref()
    }

    pub fn value(&self, x: &Point) -> f64 {
        self.base.value(x)
    }

    /// Successor at an interior-boundary point, checked for contiguity.
    pub fn child(&self, u: &Point) -> Result<BranchedMajorant> {
        let ext = self.extension.as_ref().ok_or_else(|| {
            Error::Structural(format!("no extension attached at {u:?}"))
        })?;
        let c = ext.query(u)?;
        if !c.base.contains(u) {
            return Err(Error::Structural(format!(
                "extension at {u:?} returned a majorant whose domain misses the query point"
            )));
        }
        Ok(c)
    }

    /// Checks the stored error bound against the sampled norm, and
    /// contiguity at every sampled attachment point.
    pub fn verify(&self, samples_per_level: usize) -> Result<MatchingError> {
        let m = matching_error(self, samples_per_level)?;
        if m.norm > self.error_bound + 1e-12 {
            return Err(Error::Structural(format!(
                "sampled norm {} exceeds stored bound {}",
                m.norm, self.error_bound
            )));
        }
        Ok(m)
    }
}

pub fn patch_value(h: &BranchedMajorant, x: &Point) -> f64 {
    h.value(x)
}

pub fn interior_boundary_samples(h: &BranchedMajorant, count: usize) -> Vec<Point> {
    h.base.interior_boundary_samples(count)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MatchingError {
    pub delta: f64,
    pub norm: f64,
    pub samples: usize,
}

/// Sampled matching error `delta` at the root and recursive norm.
pub fn matching_error(h: &BranchedMajorant, samples_per_level: usize) -> Result<MatchingError> {
    if h.extension.is_none() {
        return Ok(MatchingError { delta: 0.0, norm: 0.0, samples: 0 });
    }
    let pts = h.base.interior_boundary_samples(samples_per_level);
    let mut delta = 0.0f64;
    let mut child_norm = 0.0f64;
    let mut samples = pts.len();
    for v in &pts {
        let c = h.child(v)?;
        delta = delta.max((h.value(v) - c.value(v)).abs());
        let m = matching_error(&c, samples_per_level)?;
        child_norm = child_norm.max(m.norm);
        samples += m.samples;
    }
    Ok(MatchingError { delta, norm: delta + child_norm, samples })
}

/// Adds `c` to every patch in the tree, capping at `g*`.
pub fn upward_translate(h: &BranchedMajorant, c: f64) -> Result<BranchedMajorant> {
    if !(c >= 0.0) {
        return input(format!("translation must be nonnegative, got {c}"));
    }
    if c == 0.0 {
        return Ok(h.clone());
    }
    let extension = h.extension.as_ref().map(|ext| {
        let ext = ext.clone();
        extension_fn(ext.max_depth(), move |u| upward_translate(&ext.query(u)?, c))
    });
    Ok(BranchedMajorant {
        base: Arc::new(h.base.shifted(c)),
        extension,
        depth: h.depth,
        error_bound: h.error_bound,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MajorisationReport {
    pub holds: bool,
    /// Smallest sampled `h - g`; negative means a violation.
    pub worst_gap: f64,
    pub worst_at: Option<Point>,
}

/// Probes `h >= g` on the base domain and recursively on sampled children.
pub fn majorises_gain(h: &BranchedMajorant, g: &GainField, probes: usize) -> Result<MajorisationReport> {
    let mut worst = f64::INFINITY;
    let mut at = None;
    scan_majorisation(h, g, probes, &mut worst, &mut at)?;
    Ok(MajorisationReport {
        holds: worst >= -1e-9,
        worst_gap: worst,
        worst_at: at,
    })
}

fn scan_majorisation(
    h: &BranchedMajorant,
    g: &GainField,
    probes: usize,
    worst: &mut f64,
    at: &mut Option<Point>,
) -> Result<()> {
    for p in h.base.domain_probes(probes) {
        let gap = h.value(&p) - g.value(&p);
        if gap < *worst {
            *worst = gap;
            *at = Some(p);
        }
    }
    if h.extension.is_some() {
        for v in h.base.interior_boundary_samples(4) {
            let c = h.child(&v)?;
            scan_majorisation(&c, g, (probes / 4).max(16), worst, at)?;
        }
    }
    Ok(())
}

/// Regularised tree with zero matching error at every sampled attachment.
///
/// Children are regularised first; the base is raised by the sampled
/// mismatch `delta0` and each child at `v` by
/// `max(0, h(v) + delta0 - child0(v))`, so values agree at attachments.
pub fn continuous_regularisation(
    h: &BranchedMajorant,
    g: &GainField,
    samples_per_level: usize,
) -> Result<BranchedMajorant> {
    let rep = majorises_gain(h, g, 256)?;
    if !rep.holds {
        return Err(Error::Precondition(format!(
            "majorant dips below the gain by {:.3e}",
            -rep.worst_gap
        )));
    }
    regularise(h, samples_per_level)
}

fn regularise(h: &BranchedMajorant, samples: usize) -> Result<BranchedMajorant> {
    let Some(ext) = h.extension.clone() else {
        return Ok(h.clone());
    };
    let mut delta0 = 0.0f64;
    for v in h.base.interior_boundary_samples(samples) {
        let c = regularise(&h.child(&v)?, samples)?;
        delta0 = delta0.max((h.value(&v) - c.value(&v)).abs());
    }
    let base = h.base.clone();
    let depth = ext.max_depth();
    let new_ext = extension_fn(depth, move |u| {
        let c = ext.query(u)?;
        let c0 = regularise(&c, samples)?;
        let eps = (base.value(u) + delta0 - c0.value(u)).max(0.0);
        upward_translate(&c0, eps)
    });
    Ok(BranchedMajorant {
        base: Arc::new(h.base.shifted(delta0)),
        extension: Some(new_ext),
        depth: h.depth,
        error_bound: MATCH_TOL,
    })
}

/// First point on the segment `from -> to` where it leaves `dom`, found by
/// sphere tracing. `None` if `to` is in the closed domain.
fn segment_exit(dom: &DomainDescriptor, from: Point, to: Point) -> Option<Point> {
    if dom.signed_distance(&to) <= CLOSED_TOL {
        return None;
    }
    let len = from.dist(&to);
    let dir = (to - from) * (1.0 / len);
    let mut t = 0.0;
    for _ in 0..100_000 {
        let p = from + dir * t;
        let sd = dom.signed_distance(&p);
        if sd >= -1e-12 {
            return Some(p);
        }
        t = (t + (-sd).max(1e-10)).min(len);
    }
    Some(from + dir * t)
}

/// Extension of `h` on `Ball(x, eps1)` by following the half-line from `x`
/// through each query point across the tree.
pub fn lipschitz_extension(
    h: &BranchedMajorant,
    x: Point,
    eps: f64,
    eps1: f64,
    g: &GainField,
) -> Result<Arc<dyn ExtensionMap>> {
    let hx = h.value(&x);
    let gstar = h.base.gstar;
    let infeasible = |why: String| Err(Error::Precondition(format!("extension infeasible: {why}")));
    if !hx.is_finite() {
        return infeasible(format!("{x:?} is outside the base domain"));
    }
    if !(hx < gstar) {
        return infeasible("h(x) is already at the cap".into());
    }
    let norm = matching_error(h, 16)?.norm;
    if !(norm < eps) {
        return infeasible(format!("norm {norm:.3e} is not below eps {eps:.3e}"));
    }
    let m = h.base.lipschitz_m;
    let limit = (1.0 - x.norm()).min((gstar - hx - eps) / m);
    if !(eps1 > 0.0 && eps1 < limit) {
        return infeasible(format!("eps1 {eps1:.3e} must lie in (0, {limit:.3e})"));
    }
    if g.dim() != x.dim() {
        return input("gain and point dimensions differ");
    }
    let root = h.clone();
    Ok(extension_fn(h.depth, move |u| {
        if u.dist(&x) > eps1 {
            return input(format!("{u:?} lies outside the extension ball"));
        }
        if u.dist(&x) == 0.0 {
            return Ok(root.clone());
        }
        let mut cur = root.clone();
        let mut p = x;
        loop {
            match segment_exit(cur.base.domain(), p, *u) {
                None => return Ok(cur),
                Some(q) => {
                    if cur.value(&q) >= gstar * (1.0 - 1e-9) {
                        return Err(Error::Structural(format!(
                            "half-line reached the cap at {q:?}"
                        )));
                    }
                    cur = cur.child(&q)?;
                    p = q;
                }
            }
        }
    }))
}

/// Tree dump for plotting: nodes and edges labelled by attachment points.
#[derive(Clone, Debug, Serialize)]
pub struct TreeDump {
    pub nodes: Vec<TreeNode>,
    pub edges: Vec<TreeEdge>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TreeNode {
    pub id: usize,
    pub domain: DomainDescriptor,
    pub class: PatchClass,
    pub depth: usize,
    pub error_bound: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TreeEdge {
    pub parent: usize,
    pub child: usize,
    pub at: Point,
}

pub fn dump_tree(h: &BranchedMajorant, samples_per_level: usize) -> Result<TreeDump> {
    let mut dump = TreeDump { nodes: Vec::new(), edges: Vec::new() };
    dump_node(h, samples_per_level, &mut dump)?;
    Ok(dump)
}

fn dump_node(h: &BranchedMajorant, samples: usize, dump: &mut TreeDump) -> Result<usize> {
    let id = dump.nodes.len();
    dump.nodes.push(TreeNode {
        id,
        domain: h.base.domain.clone(),
        class: h.base.class,
        depth: h.depth,
        error_bound: h.error_bound,
    });
    if h.extension.is_some() {
        for v in h.base.interior_boundary_samples(samples) {
            let c = h.child(&v)?;
            let cid = dump_node(&c, samples, dump)?;
            dump.edges.push(TreeEdge { parent: id, child: cid, at: v });
        }
    }
    Ok(id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gain::{derive_constants, mollify, spiked_gain};

    const GSTAR: f64 = 1.25;

    fn ball(c: Point, r: f64) -> DomainDescriptor {
        DomainDescriptor::ball(c, r).unwrap()
    }

    /// Parent: constant 1.0 on Ball(0, 0.5). Child at v: constant 0.9 on the
    /// full ball (depth 1).
    fn two_level(child_value: f64) -> BranchedMajorant {
        let parent = HarmonicPatch::constant(ball(Point::origin(2), 0.5), 1.0, GSTAR, 1.0).unwrap();
        let child = BranchedMajorant::leaf(
            HarmonicPatch::constant(DomainDescriptor::full_ball(2).unwrap(), child_value, GSTAR, 1.0)
                .unwrap(),
        )
        .unwrap();
        let err = (1.0 - child_value).abs();
        BranchedMajorant::branch(parent, extension_fn(1, move |_| Ok(child.clone())), err).unwrap()
    }

    #[test]
    fn affine_cap_patch_vanishes_at_tangency() {
        let x = Point::xy(0.6, 0.8);
        let p = HarmonicPatch::affine(x, 0.49 / GSTAR, 1.0, GSTAR, GSTAR / 0.49).unwrap();
        assert_eq!(p.class(), PatchClass::H1);
        assert!(p.value(&x).abs() < 1e-14);
        assert_eq!(p.value(&Point::origin(2)), f64::INFINITY);
        assert!(p.interior_boundary_samples(64).is_empty());
        let grad = p.max_gradient(100);
        assert!(grad <= p.lipschitz_bound() * 1.01, "{grad}");
        let h = BranchedMajorant::leaf(p).unwrap();
        assert_eq!(matching_error(&h, 16).unwrap().norm, 0.0);
    }

    #[test]
    fn class_flags_from_boundary_data() {
        let h1 = HarmonicPatch::radial_annulus(2, 0.5, 1.0, GSTAR, 0.0, GSTAR, 10.0).unwrap();
        assert_eq!(h1.class(), PatchClass::H1);
        assert!(h1.interior_boundary_samples(32).is_empty());
        let h0 = HarmonicPatch::constant(ball(Point::xy(0.1, 0.0), 0.3), 0.3 * GSTAR, GSTAR, 1.0).unwrap();
        assert_eq!(h0.class(), PatchClass::H0);
        let s = h0.interior_boundary_samples(32);
        assert_eq!(s.len(), 32);
        assert!(s.iter().all(|p| (p.dist(&Point::xy(0.1, 0.0)) - 0.3).abs() < 1e-12));
        assert!(BranchedMajorant::leaf(h0).is_err());
        assert!(HarmonicPatch::constant(ball(Point::origin(2), 0.3), 2.0, GSTAR, 1.0).is_err());
    }

    #[test]
    fn off_domain_sentinel_and_constant() {
        let p = HarmonicPatch::constant(ball(Point::origin(2), 0.4), 0.7, GSTAR, 1.0).unwrap();
        assert_eq!(p.value(&Point::xy(0.1, 0.1)), 0.7);
        assert_eq!(p.value(&Point::xy(0.5, 0.1)), f64::INFINITY);
    }

    #[test]
    fn matching_error_arithmetic() {
        let m = matching_error(&two_level(0.9), 32).unwrap();
        assert!((m.delta - 0.1).abs() < 1e-12 && (m.norm - 0.1).abs() < 1e-12);
        let m = matching_error(&two_level(1.0), 32).unwrap();
        assert_eq!((m.delta, m.norm), (0.0, 0.0));
        two_level(0.9).verify(16).unwrap();
    }

    #[test]
    fn translation_caps_and_does_not_grow_norm() {
        let h = two_level(0.9);
        let t = upward_translate(&h, 0.0).unwrap();
        assert_eq!(t.value(&Point::xy(0.1, 0.0)), 1.0);
        let t = upward_translate(&h, 0.3).unwrap();
        assert_eq!(t.value(&Point::xy(0.1, 0.0)), GSTAR);
        let before = matching_error(&h, 16).unwrap().norm;
        let after = matching_error(&t, 16).unwrap().norm;
        assert!(after <= before + 1e-12);
        assert!(upward_translate(&h, -0.1).is_err());
    }

    #[test]
    fn regularisation_closes_the_gap() {
        let g = GainField::zero(2).unwrap();
        let h = two_level(0.9);
        let h0 = continuous_regularisation(&h, &g, 16).unwrap();
        assert!((h0.value(&Point::xy(0.1, 0.0)) - 1.1).abs() < 1e-12);
        let v = Point::xy(0.5, 0.0);
        assert!((h0.child(&v).unwrap().value(&v) - 1.1).abs() < 1e-12);
        assert!(matching_error(&h0, 16).unwrap().norm <= 1e-12);
        let same = continuous_regularisation(&two_level(1.0), &g, 16).unwrap();
        assert_eq!(same.value(&Point::xy(0.1, 0.0)), 1.0);
    }

    #[test]
    fn regularisation_requires_majorisation() {
        let g = mollify(&spiked_gain(0.05, 2).unwrap(), 0.01).unwrap();
        let zero = BranchedMajorant::leaf(
            HarmonicPatch::constant(DomainDescriptor::full_ball(2).unwrap(), 0.0, GSTAR, 1.0).unwrap(),
        )
        .unwrap();
        let rep = majorises_gain(&zero, &g, 400).unwrap();
        assert!(!rep.holds && rep.worst_gap < -0.9);
        assert!(matches!(
            continuous_regularisation(&zero, &g, 8),
            Err(Error::Precondition(_))
        ));
        let c = derive_constants(&g, 0.25).unwrap();
        let top = BranchedMajorant::leaf(
            HarmonicPatch::constant(DomainDescriptor::full_ball(2).unwrap(), c.gstar, c.gstar, 1.0).unwrap(),
        )
        .unwrap();
        assert!(majorises_gain(&top, &g, 400).unwrap().holds);
    }

    #[test]
    fn extension_follows_the_half_line() {
        let g = GainField::zero(2).unwrap();
        let h = two_level(1.0);
        let x = Point::xy(0.45, 0.0);
        let ext = lipschitz_extension(&h, x, 0.01, 0.1, &g).unwrap();
        let same = ext.query(&x).unwrap();
        assert_eq!(same.depth(), 2);
        // inside the base: the base itself
        assert_eq!(ext.query(&Point::xy(0.4, 0.0)).unwrap().depth(), 2);
        // beyond the base: the child
        let u = Point::xy(0.53, 0.0);
        let k = ext.query(&u).unwrap();
        assert_eq!(k.depth(), 1);
        assert!(k.base().contains(&u));
        assert!(ext.query(&Point::xy(0.7, 0.0)).is_err());
        assert!(lipschitz_extension(&h, x, 0.01, 0.5, &g).is_err());
        assert!(lipschitz_extension(&h, Point::xy(0.9, 0.0), 0.01, 0.05, &g).is_err());
    }

    #[test]
    fn dump_lists_nodes_and_edges() {
        let d = dump_tree(&two_level(0.9), 4).unwrap();
        assert_eq!(d.nodes.len(), 5);
        assert_eq!(d.edges.len(), 4);
        let js = serde_json::to_string(&d).unwrap();
        assert!(js.contains("\"class\":\"H0\""));
    }

    #[test]
    fn depth_cap_enforced() {
        let leaf = BranchedMajorant::leaf(
            HarmonicPatch::constant(DomainDescriptor::full_ball(2).unwrap(), 1.0, GSTAR, 1.0).unwrap(),
        )
        .unwrap();
        let parent = HarmonicPatch::constant(ball(Point::origin(2), 0.5), 1.0, GSTAR, 1.0).unwrap();
        let l = leaf.clone();
        let r = BranchedMajorant::branch_with_cap(parent, extension_fn(1, move |_| Ok(l.clone())), 0.0, 1);
        assert!(matches!(r, Err(Error::Structural(_))));
    }
}
