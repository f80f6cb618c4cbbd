//! Unbranched envelope over a parametric patch dictionary, the iterated
//! constrained harmonic replacement on shrinking non-contact sets, the
//! plain balayage, and branched witnesses for grid values.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::gain::{GainConstants, GainField};
use crate::geometry::{label_components, smooth_inner_approximation, DomainDescriptor, GridRegion, Point};
use crate::harmonic::{scale_coordinate, BoundaryData, WosConfig};
use crate::hull::{hull_values, upper_hull};
use crate::majorant::{extension_fn, BranchedMajorant, HarmonicPatch};

/// Default solver tolerance (largest SOR update in a sweep).
pub const SOLVER_TOL: f64 = 1e-11;
/// Default contact tolerance: ten times the solver tolerance.
pub const CONTACT_TOL: f64 = 10.0 * SOLVER_TOL;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridSpec {
    /// Log-uniform radii from `r_min` to 1.
    Radial {
        nodes: usize,
        #[serde(default = "default_rmin")]
        r_min: f64,
    },
    /// `n x n` nodes over `[-1, 1]^2`, masked to the open unit disc.
    Cartesian { n: usize },
}

fn default_rmin() -> f64 {
    1e-4
}

impl GridSpec {
    pub fn build(&self, dim: usize) -> Result<Grid> {
        match self {
            Self::Radial { nodes, r_min } => Ok(Grid::Radial(RadialGrid::log_uniform(dim, *nodes, *r_min)?)),
            Self::Cartesian { n } => {
                if dim != 2 {
                    return input("Cartesian grids are two-dimensional");
                }
                Ok(Grid::Cartesian(CartesianGrid::disc(*n)?))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct RadialGrid {
    dim: usize,
    r: Vec<f64>,
    t: Vec<f64>,
}

impl RadialGrid {
    pub fn log_uniform(dim: usize, nodes: usize, r_min: f64) -> Result<Self> {
        if nodes < 3 {
            return input(format!("radial grid needs at least 3 nodes, got {nodes}"));
        }
        if !(r_min > 0.0 && r_min < 1.0) {
            return input(format!("r_min must lie in (0, 1), got {r_min}"));
        }
        if dim < 2 {
            return input(format!("unsupported dimension {dim}"));
        }
        let l = r_min.ln();
        let mut r: Vec<f64> = (0..nodes)
            .map(|k| (l * (1.0 - k as f64 / (nodes - 1) as f64)).exp())
            .collect();
        r[nodes - 1] = 1.0;
        Self::from_radii(dim, r)
    }

    pub fn from_radii(dim: usize, r: Vec<f64>) -> Result<Self> {
        if r.windows(2).any(|w| !(w[0] < w[1])) || r[0] <= 0.0 || *r.last().unwrap() != 1.0 {
            return input("radii must increase strictly from a positive value to 1");
        }
        let t = r.iter().map(|&x| scale_coordinate(x, dim)).collect();
        Ok(Self { dim, r, t })
    }

    pub fn radii(&self) -> &[f64] {
        &self.r
    }

    pub fn scale(&self) -> &[f64] {
        &self.t
    }

    /// Index of the node nearest to radius `r` in the scale coordinate.
    pub fn nearest(&self, r: f64) -> usize {
        if r <= self.r[0] {
            return 0;
        }
        let k = self.r.partition_point(|&x| x < r);
        if k >= self.r.len() {
            return self.r.len() - 1;
        }
        let tr = scale_coordinate(r, self.dim);
        if (self.t[k] - tr).abs() < (tr - self.t[k - 1]).abs() {
            k
        } else {
            k - 1
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Stencil {
    nb: [u32; 4],
    c: [f64; 4],
    diag: f64,
}

const NO_NODE: u32 = u32::MAX;

/// Square grid over `[-1,1]^2` with Shortley-Weller stencils at the circle.
#[derive(Clone, Debug)]
pub struct CartesianGrid {
    n: usize,
    h: f64,
    inside: Vec<bool>,
    stencil: Vec<Stencil>,
}

impl CartesianGrid {
    pub fn disc(n: usize) -> Result<Self> {
        if n < 5 {
            return input(format!("Cartesian grid needs at least 5 nodes per side, got {n}"));
        }
        let h = 2.0 / (n - 1) as f64;
        let mut g = Self {
            n,
            h,
            inside: vec![false; n * n],
            stencil: Vec::new(),
        };
        for k in 0..n * n {
            g.inside[k] = g.node(k).norm() < 1.0 - 1e-12;
        }
        let dirs = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)];
        g.stencil = (0..n * n)
            .map(|k| {
                let mut st = Stencil { nb: [NO_NODE; 4], c: [0.0; 4], diag: 0.0 };
                if !g.inside[k] {
                    return st;
                }
                let p = g.node(k);
                let (i, j) = ((k % n) as i64, (k / n) as i64);
                let mut arm = [h; 4];
                for (d, (dx, dy)) in dirs.iter().enumerate() {
                    let (ii, jj) = (i + dx, j + dy);
                    let kk = (jj * n as i64 + ii) as usize;
                    if ii >= 0 && jj >= 0 && ii < n as i64 && jj < n as i64 && g.inside[kk] {
                        st.nb[d] = kk as u32;
                    } else {
                        let e = Point::xy(*dx as f64, *dy as f64);
                        let pe = p.dot(&e);
                        let s = -pe + (pe * pe - (p.dot(&p) - 1.0)).sqrt();
                        arm[d] = s.clamp(1e-6 * h, h);
                    }
                }
                for (d, a) in arm.iter().enumerate() {
                    let opp = arm[d ^ 1];
                    st.c[d] = 2.0 / (a * (a + opp));
                }
                st.diag = st.c.iter().sum();
                st
            })
            .collect();
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn inside(&self) -> &[bool] {
        &self.inside
    }

    pub fn node(&self, k: usize) -> Point {
        let c = (self.n - 1) as f64 / 2.0;
        Point::xy(((k % self.n) as f64 - c) * self.h, ((k / self.n) as f64 - c) * self.h)
    }

    /// Discrete Laplacian at an inside node (boundary values 0).
    pub fn laplacian(&self, u: &[f64], k: usize) -> f64 {
        let st = &self.stencil[k];
        let mut s = -st.diag * u[k];
        for d in 0..4 {
            if st.nb[d] != NO_NODE {
                s += st.c[d] * u[st.nb[d] as usize];
            }
        }
        s
    }

    /// Bilinear interpolation of a node field.
    pub fn interpolate(&self, u: &[f64], x: &Point) -> f64 {
        let c = (self.n - 1) as f64 / 2.0;
        let fx = (x.x() / self.h + c).clamp(0.0, (self.n - 1) as f64);
        let fy = (x.y() / self.h + c).clamp(0.0, (self.n - 1) as f64);
        let i = (fx.floor() as usize).min(self.n - 2);
        let j = (fy.floor() as usize).min(self.n - 2);
        let (sx, sy) = (fx - i as f64, fy - j as f64);
        let at = |ii: usize, jj: usize| u[jj * self.n + ii];
        (1.0 - sx) * (1.0 - sy) * at(i, j)
            + sx * (1.0 - sy) * at(i + 1, j)
            + (1.0 - sx) * sy * at(i, j + 1)
            + sx * sy * at(i + 1, j + 1)
    }

    /// Red-black SOR on `free` nodes; other nodes and the circle act as
    /// Dirichlet data. Updates are clamped to `[lo, hi]` when given.
    pub fn sor(
        &self,
        u: &mut [f64],
        free: &[bool],
        lo: Option<&[f64]>,
        hi: Option<&[f64]>,
        omega: f64,
        tol: f64,
        max_sweeps: usize,
    ) -> Result<usize> {
        let n = self.n;
        let colour: [Vec<usize>; 2] = [0, 1].map(|c| {
            (0..n * n)
                .filter(|&k| free[k] && self.inside[k] && ((k % n) + (k / n)) % 2 == c)
                .collect()
        });
        let mut buf = vec![0.0; colour[0].len().max(colour[1].len())];
        let mut change = f64::INFINITY;
        for sweep in 1..=max_sweeps {
            change = 0.0;
            for idx in &colour {
                let view: &[f64] = u;
                let c = buf[..idx.len()]
                    .par_iter_mut()
                    .with_min_len(512)
                    .zip(idx.par_iter())
                    .map(|(b, &k)| {
                        let st = &self.stencil[k];
                        let mut s = 0.0;
                        for d in 0..4 {
                            if st.nb[d] != NO_NODE {
                                s += st.c[d] * view[st.nb[d] as usize];
                            }
                        }
                        let old = view[k];
                        let mut v = old + omega * (s / st.diag - old);
                        if let Some(l) = lo {
                            v = v.max(l[k]);
                        }
                        if let Some(h) = hi {
                            v = v.min(h[k]);
                        }
                        *b = v;
                        (v - old).abs()
                    })
                    .reduce(|| 0.0, f64::max);
                change = change.max(c);
                for (b, &k) in buf.iter().zip(idx) {
                    u[k] = *b;
                }
            }
            if change < tol {
                return Ok(sweep);
            }
        }
        Err(Error::NonConvergence {
            iterations: max_sweeps,
            residual: change,
        })
    }
}

#[derive(Clone, Debug)]
pub enum Grid {
    Radial(RadialGrid),
    Cartesian(CartesianGrid),
}

impl Grid {
    pub fn len(&self) -> usize {
        match self {
            Self::Radial(g) => g.r.len(),
            Self::Cartesian(g) => g.n * g.n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Radial(g) => g.dim,
            Self::Cartesian(_) => 2,
        }
    }

    /// Node position (radial nodes sit on the first axis).
    pub fn point(&self, k: usize) -> Point {
        match self {
            Self::Radial(g) => Point::on_axis(g.dim.min(3), g.r[k]),
            Self::Cartesian(g) => g.node(k),
        }
    }

    pub fn radius(&self, k: usize) -> f64 {
        match self {
            Self::Radial(g) => g.r[k],
            Self::Cartesian(g) => g.node(k).norm(),
        }
    }

    /// Whether node `k` is an unknown (radial nodes always are).
    pub fn active(&self, k: usize) -> bool {
        match self {
            Self::Radial(_) => true,
            Self::Cartesian(g) => g.inside[k],
        }
    }

    /// Gain sampled at the nodes; zero outside the disc.
    pub fn sample(&self, g: &GainField) -> Result<Vec<f64>> {
        match self {
            Self::Radial(rg) => {
                if !g.is_radial() {
                    return input("radial grids need a radial gain");
                }
                Ok(rg.r.iter().map(|&r| g.profile(r).unwrap_or(0.0)).collect())
            }
            Self::Cartesian(cg) => {
                if g.dim() != 2 {
                    return input("Cartesian grids need a two-dimensional gain");
                }
                Ok((0..self.len())
                    .into_par_iter()
                    .map(|k| if cg.inside[k] { g.value(&cg.node(k)) } else { 0.0 })
                    .collect())
            }
        }
    }

    /// Field value at an arbitrary point (linear in the scale coordinate
    /// for radial grids, bilinear for Cartesian grids).
    pub fn interpolate(&self, u: &[f64], x: &Point) -> f64 {
        match self {
            Self::Radial(g) => {
                let r = x.norm();
                if r <= g.r[0] {
                    return u[0];
                }
                if r >= 1.0 {
                    return u[u.len() - 1];
                }
                let k = g.r.partition_point(|&v| v < r).max(1);
                let t = scale_coordinate(r, g.dim);
                let s = (t - g.t[k - 1]) / (g.t[k] - g.t[k - 1]);
                u[k - 1] * (1.0 - s) + u[k] * s
            }
            Self::Cartesian(g) => g.interpolate(u, x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum FieldTag {
    Gain,
    UnbranchedEnvelope,
    Envelope(usize),
    Balayage(usize),
    Limit,
    Oracle,
}

/// Scalar field on a grid.
#[derive(Clone, Debug)]
pub struct GridField {
    pub grid: Arc<Grid>,
    pub values: Vec<f64>,
    pub tag: FieldTag,
}

impl GridField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>, tag: FieldTag) -> Result<Self> {
        if values.len() != grid.len() {
            return input("field length does not match the grid");
        }
        Ok(Self { grid, values, tag })
    }

    pub fn at(&self, x: &Point) -> f64 {
        self.grid.interpolate(&self.values, x)
    }

    /// Largest `|self - other|` over active nodes.
    pub fn sup_distance(&self, other: &GridField) -> Result<f64> {
        if !Arc::ptr_eq(&self.grid, &other.grid) && self.grid.len() != other.grid.len() {
            return input("fields live on different grids");
        }
        Ok((0..self.values.len())
            .filter(|&k| self.grid.active(k))
            .map(|k| (self.values[k] - other.values[k]).abs())
            .fold(0.0, f64::max))
    }

    /// CSV with a units comment and header: `r,value` or `x,y,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match &*self.grid {
            Grid::Radial(g) => {
                out.push_str("# units: r in unit-ball radii; value in gain units\nr,value\n");
                for (r, v) in g.r.iter().zip(&self.values) {
                    out.push_str(&format!("{r},{v}\n"));
                }
            }
            Grid::Cartesian(g) => {
                out.push_str("# units: x, y in unit-ball coordinates; value in gain units\nx,y,value\n");
                for k in 0..g.n * g.n {
                    if g.inside[k] {
                        let p = g.node(k);
                        out.push_str(&format!("{},{},{}\n", p.x(), p.y(), self.values[k]));
                    }
                }
            }
        }
        out
    }
}

/// Contact set of a field: `contact[k]` is true where `w - g <= tol`.
#[derive(Clone, Debug)]
pub struct ContactSet {
    pub contact: Vec<bool>,
    /// Component label of each non-contact node, -1 on contact.
    pub labels: Vec<i32>,
    pub components: usize,
    pub tol: f64,
}

impl ContactSet {
    pub fn noncontact_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l >= 0).count()
    }

    /// Whether `x` lies in the non-contact set (nearest-node lookup).
    pub fn is_noncontact(&self, grid: &Grid, x: &Point) -> bool {
        self.labels[nearest_node(grid, x)] >= 0
    }

    /// 0/1 CSV, 1 = contact.
    pub fn to_csv(&self, grid: &Grid) -> String {
        let mut out = String::new();
        match grid {
            Grid::Radial(g) => {
                out.push_str("# units: r in unit-ball radii; contact 1 = stop, 0 = continue\nr,contact\n");
                for (r, c) in g.r.iter().zip(&self.contact) {
                    out.push_str(&format!("{r},{}\n", u8::from(*c)));
                }
            }
            Grid::Cartesian(g) => {
                out.push_str(
                    "# units: x, y in unit-ball coordinates; contact 1 = stop, 0 = continue\nx,y,contact\n",
                );
                for k in 0..g.n * g.n {
                    if g.inside[k] {
                        let p = g.node(k);
                        out.push_str(&format!("{},{},{}\n", p.x(), p.y(), u8::from(self.contact[k])));
                    }
                }
            }
        }
        out
    }
}

pub fn nearest_node(grid: &Grid, x: &Point) -> usize {
    match grid {
        Grid::Radial(g) => g.nearest(x.norm()),
        Grid::Cartesian(g) => {
            let c = (g.n - 1) as f64 / 2.0;
            let i = (x.x() / g.h + c).round().clamp(0.0, (g.n - 1) as f64) as usize;
            let j = (x.y() / g.h + c).round().clamp(0.0, (g.n - 1) as f64) as usize;
            j * g.n + i
        }
    }
}

fn contact_from_values(grid: &Grid, w: &[f64], gv: &[f64], tol: f64) -> Result<ContactSet> {
    let n = grid.len();
    let mut contact = vec![true; n];
    for k in 0..n {
        if !grid.active(k) {
            continue;
        }
        let gap = w[k] - gv[k];
        if gap < -tol {
            return Err(Error::Precondition(format!(
                "field lies {:.3e} below the gain at node {k}",
                -gap
            )));
        }
        contact[k] = gap <= tol;
    }
    let (labels, components) = match grid {
        Grid::Radial(_) => {
            let mut labels = vec![-1i32; n];
            let mut count = 0usize;
            for k in 0..n {
                if !contact[k] {
                    if k == 0 || contact[k - 1] {
                        count += 1;
                    }
                    labels[k] = count as i32 - 1;
                }
            }
            (labels, count)
        }
        Grid::Cartesian(g) => {
            let free: Vec<bool> = contact.iter().map(|c| !c).collect();
            label_components(&free, g.n, g.n)
        }
    };
    Ok(ContactSet { contact, labels, components, tol })
}

/// Contact set with component labels (intervals on radial grids, 4-neighbour
/// flood fill on Cartesian grids). Ties `w - g = tol` count as contact.
pub fn contact_set(w: &GridField, g: &GainField, tol: f64) -> Result<ContactSet> {
    let gv = w.grid.sample(g)?;
    contact_from_values(&w.grid, &w.values, &gv, tol)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictionarySpec {
    /// Directions for the affine family on non-radial gains.
    #[serde(default = "default_directions")]
    pub directions: usize,
    /// Include the radial annulus-to-boundary family.
    #[serde(default = "yes")]
    pub annuli: bool,
}

fn default_directions() -> usize {
    128
}

fn yes() -> bool {
    true
}

impl Default for DictionarySpec {
    fn default() -> Self {
        Self { directions: default_directions(), annuli: true }
    }
}

/// The dictionary patch achieving the unbranched envelope at a node.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum PatchChoice {
    /// The constant `max g` on the whole ball.
    Constant,
    /// `(c - u.v)/z`; `v` is the node direction for radial gains.
    Affine { v: Option<Point>, z: f64, c: f64 },
    /// Annulus `a < |u| < 1` with data `g*` inside and 0 on the sphere.
    Annulus { a: f64 },
}

#[derive(Clone, Debug)]
pub struct UnbranchedEnvelope {
    pub field: GridField,
    pub choices: Vec<PatchChoice>,
    pub constants: GainConstants,
}

/// Envelope of the radial dictionary on sorted radii `r` (may start at 0).
fn radial_dictionary(
    r: &[f64],
    gv: &[f64],
    dim: usize,
    c: &GainConstants,
    spec: &DictionarySpec,
) -> (Vec<f64>, Vec<PatchChoice>) {
    let n = r.len();
    let mut best = vec![c.gbar; n];
    let mut choice = vec![PatchChoice::Constant; n];
    // affine family: concave hull in r of the symmetric profile, ends pinned at 0
    let mut xs = Vec::with_capacity(2 * n + 2);
    let mut ys = Vec::with_capacity(2 * n + 2);
    xs.push(-1.0);
    ys.push(0.0);
    for k in (0..n).rev() {
        if r[k] > 0.0 && r[k] < 1.0 {
            xs.push(-r[k]);
            ys.push(gv[k]);
        }
    }
    let first_pos = xs.len();
    for k in 0..n {
        if r[k] < 1.0 {
            xs.push(r[k]);
            ys.push(gv[k]);
        }
    }
    xs.push(1.0);
    ys.push(0.0);
    let verts = upper_hull(&xs, &ys);
    let hv = hull_values(&xs, &ys, &verts);
    let mut node_of = vec![usize::MAX; xs.len()];
    let mut p = first_pos;
    for k in 0..n {
        if r[k] < 1.0 {
            node_of[p] = k;
            p += 1;
        } else {
            node_of[xs.len() - 1] = k;
        }
    }
    for (pos, &k) in node_of.iter().enumerate() {
        if k == usize::MAX {
            continue;
        }
        let (s, v) = hv[pos];
        if v < best[k] && v < c.gstar {
            let (a, b) = (verts[s], verts[(s + 1).min(verts.len() - 1)]);
            let slope = if b != a { (ys[b] - ys[a]) / (xs[b] - xs[a]) } else { 0.0 };
            if slope < 0.0 {
                let beta = -slope;
                let alpha = v + beta * xs[pos];
                best[k] = v;
                choice[k] = PatchChoice::Affine { v: None, z: 1.0 / beta, c: alpha / beta };
            }
        }
    }
    if spec.annuli {
        // smallest feasible inner radius a: g*/|t_a| >= max_{r_i > a} g_i/|t_i|
        let t: Vec<f64> = r.iter().map(|&x| if x > 0.0 { scale_coordinate(x, dim) } else { f64::NEG_INFINITY }).collect();
        let mut suffix = vec![0.0f64; n + 1];
        for k in (0..n).rev() {
            let q = if t[k] < 0.0 && t[k].is_finite() { gv[k] / -t[k] } else { 0.0 };
            suffix[k] = suffix[k + 1].max(q);
        }
        if let Some(k0) = (0..n).find(|&k| t[k].is_finite() && t[k] < 0.0 && c.gstar / -t[k] >= suffix[k + 1]) {
            for k in k0 + 1..n {
                let v = c.gstar * t[k] / t[k0];
                if v < best[k] {
                    best[k] = v;
                    choice[k] = PatchChoice::Annulus { a: r[k0] };
                }
            }
        }
    }
    (best, choice)
}

/// Unbranched envelope `w1` over constants, affine harmonics and (radial
/// gains) annulus-to-boundary patches, each checked for `h >= g` on the
/// evaluation grid.
pub fn unbranched_envelope(
    g: &GainField,
    constants: &GainConstants,
    grid: Arc<Grid>,
    spec: &DictionarySpec,
) -> Result<UnbranchedEnvelope> {
    let gv = grid.sample(g)?;
    let n = grid.len();
    // the constant patch must clear g at every node, not only at the probes
    let mut c = *constants;
    c.gbar = gv.iter().fold(c.gbar, |m, &v| m.max(v));
    if c.gbar >= c.gstar {
        return Err(Error::Precondition(format!("gain reaches g* = {} on the grid", c.gstar)));
    }
    let constants = &c;
    let (values, choices) = match &*grid {
        Grid::Radial(rg) => radial_dictionary(&rg.r, &gv, rg.dim, constants, spec),
        Grid::Cartesian(cg) if g.is_radial() => {
            let mut order: Vec<usize> = (0..n).filter(|&k| cg.inside[k]).collect();
            let rad: Vec<f64> = (0..n).map(|k| cg.node(k).norm()).collect();
            order.sort_by(|&a, &b| rad[a].total_cmp(&rad[b]));
            let mut r: Vec<f64> = Vec::new();
            let mut gr: Vec<f64> = Vec::new();
            let mut slot = vec![0usize; n];
            for &k in &order {
                if r.last().is_none_or(|&l| rad[k] > l) {
                    r.push(rad[k]);
                    gr.push(gv[k]);
                } else {
                    let last = gr.len() - 1;
                    gr[last] = gr[last].max(gv[k]);
                }
                slot[k] = r.len() - 1;
            }
            r.push(1.0);
            gr.push(0.0);
            let (bv, bc) = radial_dictionary(&r, &gr, 2, constants, spec);
            let mut values = vec![0.0; n];
            let mut choices = vec![PatchChoice::Constant; n];
            for &k in &order {
                values[k] = bv[slot[k]];
                choices[k] = bc[slot[k]];
            }
            (values, choices)
        }
        Grid::Cartesian(cg) => directional_dictionary(cg, &gv, constants, spec)?,
    };
    Ok(UnbranchedEnvelope {
        field: GridField::new(grid, values, FieldTag::UnbranchedEnvelope)?,
        choices,
        constants: *constants,
    })
}

fn directional_dictionary(
    cg: &CartesianGrid,
    gv: &[f64],
    c: &GainConstants,
    spec: &DictionarySpec,
) -> Result<(Vec<f64>, Vec<PatchChoice>)> {
    if spec.directions < 4 {
        return input("the affine family needs at least 4 directions");
    }
    let n = cg.n * cg.n;
    let support: Vec<usize> = (0..n).filter(|&k| cg.inside[k] && gv[k] > 0.0).collect();
    let per_dir: Vec<(Vec<f64>, Vec<PatchChoice>)> = (0..spec.directions)
        .into_par_iter()
        .map(|d| {
            let th = 2.0 * std::f64::consts::PI * d as f64 / spec.directions as f64;
            let v = Point::xy(th.cos(), th.sin());
            let mut pts: Vec<(f64, f64)> = support.iter().map(|&k| (cg.node(k).dot(&v), gv[k])).collect();
            pts.push((-1.0, 0.0));
            pts.push((1.0, 0.0));
            pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
            pts.dedup_by(|a, b| a.0 == b.0);
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let verts = upper_hull(&xs, &ys);
            let mut vals = vec![f64::INFINITY; n];
            let mut ch = vec![PatchChoice::Constant; n];
            for k in 0..n {
                if !cg.inside[k] {
                    continue;
                }
                let s = cg.node(k).dot(&v);
                let i = verts.partition_point(|&vi| xs[vi] < s).clamp(1, verts.len() - 1);
                let (a, b) = (verts[i - 1], verts[i]);
                let slope = (ys[b] - ys[a]) / (xs[b] - xs[a]);
                let val = ys[a] + slope * (s - xs[a]);
                // only supporting lines falling along v are affine patches of the form (c - u.v)/z
                if slope < 0.0 && val < c.gstar {
                    let beta = -slope;
                    vals[k] = val;
                    ch[k] = PatchChoice::Affine { v: Some(v), z: 1.0 / beta, c: (val + beta * s) / beta };
                }
            }
            (vals, ch)
        })
        .collect();
    let mut values = vec![0.0; n];
    let mut choices = vec![PatchChoice::Constant; n];
    for k in 0..n {
        if !cg.inside[k] {
            continue;
        }
        values[k] = c.gbar;
        for (vals, ch) in &per_dir {
            if vals[k] < values[k] {
                values[k] = vals[k];
                choices[k] = ch[k];
            }
        }
    }
    Ok((values, choices))
}

/// How a refined node value was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum NodeWitness {
    /// Unchanged from the previous level.
    Kept,
    /// Harmonic (affine in the scale coordinate) between nodes `a` and `b`;
    /// `a = None` is the constant on the ball of radius `r_b`.
    Segment { a: Option<usize>, b: usize },
}

/// Plain balayage: harmonic replacement of `w` on each non-contact
/// component with boundary values `w` (0 on the unit sphere), clipped above
/// by `w`.
pub fn balayage_step(w: &GridField, c: &ContactSet, level: usize) -> Result<GridField> {
    let mut u = w.values.clone();
    match &*w.grid {
        Grid::Radial(g) => {
            for (p, q) in runs(&c.labels) {
                let right = q + 1;
                for i in p..=q {
                    let v = if p == 0 {
                        w.values[right]
                    } else {
                        let left = p - 1;
                        let s = (g.t[i] - g.t[left]) / (g.t[right] - g.t[left]);
                        w.values[left] * (1.0 - s) + w.values[right] * s
                    };
                    u[i] = v.min(w.values[i]);
                }
            }
        }
        Grid::Cartesian(g) => {
            let free: Vec<bool> = c.labels.iter().map(|&l| l >= 0).collect();
            g.sor(&mut u, &free, None, None, 1.9, SOLVER_TOL, 400_000)?;
            for (x, &wk) in u.iter_mut().zip(&w.values) {
                *x = x.min(wk);
            }
        }
    }
    GridField::new(w.grid.clone(), u, FieldTag::Balayage(level))
}

/// Maximal runs `(first, last)` of non-contact nodes on a radial grid.
fn runs(labels: &[i32]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut k = 0;
    while k < labels.len() {
        if labels[k] >= 0 {
            let p = k;
            while k + 1 < labels.len() && labels[k + 1] == labels[p] {
                k += 1;
            }
            out.push((p, k));
        }
        k += 1;
    }
    out
}

/// Constrained harmonic replacement on the non-contact set of `w`: on each
/// component, the least function that is superharmonic there, dominates
/// `g` and matches `w` on the component boundary; then the minimum with
/// `w`. Radial grids solve it exactly as a concave hull in the scale
/// coordinate; Cartesian grids by projected SOR with `g <= u <= w`.
pub fn refine_step(
    w: &GridField,
    c: &ContactSet,
    gv: &[f64],
    level: usize,
) -> Result<(GridField, Vec<NodeWitness>)> {
    let mut u = w.values.clone();
    let mut wit = vec![NodeWitness::Kept; u.len()];
    match &*w.grid {
        Grid::Radial(g) => {
            for (p, q) in runs(&c.labels) {
                let right = q + 1;
                let mut idx: Vec<usize> = Vec::with_capacity(q - p + 3);
                if p > 0 {
                    idx.push(p - 1);
                }
                idx.extend(p..=right);
                let xs: Vec<f64> = idx.iter().map(|&i| g.t[i]).collect();
                let ys: Vec<f64> = idx
                    .iter()
                    .map(|&i| if i < p || i == right { w.values[i] } else { gv[i] })
                    .collect();
                let verts = upper_hull(&xs, &ys);
                let hv = hull_values(&xs, &ys, &verts);
                // disk components: bounded superharmonic near the polar origin is
                // nonincreasing in r, so flatten left of the last maximum
                let peak = if p == 0 {
                    let m = verts.iter().map(|&v| ys[v]).fold(f64::NEG_INFINITY, f64::max);
                    verts.iter().rposition(|&v| ys[v] == m)
                } else {
                    None
                };
                for (pos, &i) in idx.iter().enumerate() {
                    if i < p || i == right {
                        continue;
                    }
                    let (s, mut v) = hv[pos];
                    let mut seg = if verts.len() > 1 {
                        NodeWitness::Segment { a: Some(idx[verts[s]]), b: idx[verts[s + 1]] }
                    } else {
                        NodeWitness::Kept
                    };
                    if let Some(pk) = peak {
                        if pos <= verts[pk] {
                            v = ys[verts[pk]];
                            seg = NodeWitness::Segment { a: None, b: idx[verts[pk]] };
                        }
                    }
                    if v < u[i] {
                        u[i] = v;
                        wit[i] = seg;
                    }
                }
            }
        }
        Grid::Cartesian(g) => {
            let free: Vec<bool> = c.labels.iter().map(|&l| l >= 0).collect();
            g.sor(&mut u, &free, Some(gv), Some(&w.values), 1.9, SOLVER_TOL, 400_000)?;
        }
    }
    Ok((GridField::new(w.grid.clone(), u, FieldTag::Envelope(level))?, wit))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSpec {
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Stop when the sup change between levels drops below this.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_contact_tol")]
    pub contact_tol: f64,
}

fn default_max_iter() -> usize {
    50
}

fn default_tol() -> f64 {
    1e-10
}

fn default_contact_tol() -> f64 {
    CONTACT_TOL
}

impl Default for IterationSpec {
    fn default() -> Self {
        Self {
            max_iter: default_max_iter(),
            tol: default_tol(),
            contact_tol: default_contact_tol(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Level {
    pub field: GridField,
    pub contact: ContactSet,
    /// Sup change from the previous level (`None` for `w1`).
    pub sup_change: Option<f64>,
    /// How each node of `field` was obtained from the previous level.
    pub witness: Vec<NodeWitness>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LevelSummary {
    pub level: usize,
    pub sup_change: Option<f64>,
    pub noncontact_cells: usize,
    pub components: usize,
}

#[derive(Clone, Debug)]
pub struct EnvelopeSequence {
    pub gain: Vec<f64>,
    pub w1: UnbranchedEnvelope,
    pub levels: Vec<Level>,
    pub converged: bool,
    /// Balayage of the last level onto its non-contact set.
    pub limit: GridField,
}

impl EnvelopeSequence {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.w1.field.grid
    }

    pub fn last(&self) -> &Level {
        self.levels.last().expect("at least one level")
    }

    pub fn summary(&self) -> Vec<LevelSummary> {
        self.levels
            .iter()
            .enumerate()
            .map(|(k, l)| LevelSummary {
                level: k + 1,
                sup_change: l.sup_change,
                noncontact_cells: l.contact.noncontact_count(),
                components: l.contact.components,
            })
            .collect()
    }
}

/// Iterates constrained harmonic replacement from `w1` until the sup change
/// is below `spec.tol` or `spec.max_iter` refinements have run.
pub fn iterate_envelopes(g: &GainField, w1: UnbranchedEnvelope, spec: &IterationSpec) -> Result<EnvelopeSequence> {
    let grid = w1.field.grid.clone();
    let gv = grid.sample(g)?;
    let c1 = contact_from_values(&grid, &w1.field.values, &gv, spec.contact_tol)?;
    let mut levels = vec![Level {
        field: w1.field.clone(),
        contact: c1,
        sup_change: None,
        witness: vec![NodeWitness::Kept; grid.len()],
    }];
    let mut converged = false;
    for n in 1..=spec.max_iter {
        let prev = levels.last().unwrap();
        let (u, wit) = refine_step(&prev.field, &prev.contact, &gv, n + 1)?;
        let change = u.sup_distance(&prev.field)?;
        let c = contact_from_values(&grid, &u.values, &gv, spec.contact_tol)?;
        levels.push(Level { field: u, contact: c, sup_change: Some(change), witness: wit });
        if change < spec.tol {
            converged = true;
            break;
        }
    }
    let last = levels.last().unwrap();
    let mut limit = balayage_step(&last.field, &last.contact, levels.len())?;
    limit.tag = FieldTag::Limit;
    Ok(EnvelopeSequence { gain: gv, w1, levels, converged, limit })
}

/// Depth-1 dictionary patch achieving `w1` at node `k`, placed for `x`.
fn dictionary_leaf(seq: &EnvelopeSequence, k: usize, x: &Point) -> Result<BranchedMajorant> {
    let c = &seq.w1.constants;
    let dim = x.dim();
    let patch = match seq.w1.choices[k] {
        PatchChoice::Constant => HarmonicPatch::constant(DomainDescriptor::full_ball(dim)?, c.gbar, c.gstar, c.lipschitz_m)?,
        PatchChoice::Affine { v, z, c: cc } => {
            let dir = match v {
                Some(v) => v,
                None if x.norm() > 0.0 => x.normalized(),
                None => Point::on_axis(dim, 1.0),
            };
            HarmonicPatch::affine(dir, z, cc, c.gstar, c.lipschitz_m)?
        }
        PatchChoice::Annulus { a } => HarmonicPatch::radial_annulus(dim, a, 1.0, c.gstar, 0.0, c.gstar, c.lipschitz_m)?,
    };
    BranchedMajorant::leaf(patch)
}

/// Branched majorant of depth `n + 1` realising `u_{n+1}` near `x`, for
/// `x` in the non-contact set of level `n` (levels count from 1 = `w1`).
///
/// Radial grids: the base patch is the harmonic piece (annulus or ball)
/// that produced the node value, with successors at its boundary spheres
/// given by the previous level's witness there. Cartesian grids: a
/// walk-on-spheres patch on a smooth inner approximation of the
/// non-contact component, with successors from the previous level.
pub fn build_branched_witness(seq: &Arc<EnvelopeSequence>, n: usize, x: Point) -> Result<BranchedMajorant> {
    if n == 0 || n >= seq.levels.len() {
        return input(format!("level {n} outside 1..{}", seq.levels.len()));
    }
    let k = nearest_node(seq.grid(), &x);
    if seq.levels[n - 1].contact.labels[k] < 0 {
        return Err(Error::NoWitness(format!("point lies in the contact set of level {n}")));
    }
    level_witness(seq, n + 1, x)
}

/// Depth-1 dictionary patch achieving `w1` near `x`.
pub fn dictionary_witness(seq: &EnvelopeSequence, x: Point) -> Result<BranchedMajorant> {
    dictionary_leaf(seq, nearest_node(seq.grid(), &x), &x)
}

/// Branched majorant whose value near `x` reproduces level `level`.
fn level_witness(seq: &Arc<EnvelopeSequence>, level: usize, x: Point) -> Result<BranchedMajorant> {
    if x.norm() > 1.0 {
        return input("witness point outside the unit ball");
    }
    if level == 1 {
        return dictionary_witness(seq, x);
    }
    match &**seq.grid() {
        Grid::Radial(g) => radial_witness(seq, g, level, x),
        Grid::Cartesian(g) => cartesian_witness(seq, g, level, x),
    }
}

fn radial_witness(seq: &Arc<EnvelopeSequence>, g: &RadialGrid, level: usize, x: Point) -> Result<BranchedMajorant> {
    let k = g.nearest(x.norm());
    let lv = &seq.levels[level - 1];
    let seg = match lv.witness[k] {
        NodeWitness::Kept => return level_witness(seq, level - 1, x),
        NodeWitness::Segment { a, b } => (a, b),
    };
    let c = &seq.w1.constants;
    let dim = x.dim();
    let u = &lv.field.values;
    let prev = &seq.levels[level - 2].field.values;
    let (patch, ends) = match seg {
        (Some(a), b) => (
            HarmonicPatch::radial_annulus(dim, g.r[a], g.r[b], u[a].min(c.gstar), u[b].min(c.gstar), c.gstar, c.lipschitz_m)?,
            vec![a, b],
        ),
        (None, b) => (
            HarmonicPatch::constant(DomainDescriptor::ball(Point::origin(dim), g.r[b])?, u[b], c.gstar, c.lipschitz_m)?,
            vec![b],
        ),
    };
    // mismatch at the attachment spheres plus the successors' own bounds
    let mut bound = 0.0f64;
    let mut child_bound = 0.0f64;
    for &e in &ends {
        if g.r[e] >= 1.0 {
            continue;
        }
        bound = bound.max((u[e] - prev[e]).abs());
        let child = level_witness(seq, level - 1, Point::on_axis(dim, g.r[e]))?;
        child_bound = child_bound.max(child.error_bound());
    }
    if ends.iter().all(|&e| g.r[e] >= 1.0) {
        return BranchedMajorant::leaf(patch);
    }
    let s = seq.clone();
    let ext = extension_fn(level - 1, move |v: &Point| level_witness(&s, level - 1, *v));
    BranchedMajorant::branch(patch, ext, bound + child_bound)
}

fn cartesian_witness(seq: &Arc<EnvelopeSequence>, g: &CartesianGrid, level: usize, x: Point) -> Result<BranchedMajorant> {
    let lv = &seq.levels[level - 1];
    let k = nearest_node(seq.grid(), &x);
    if lv.contact.labels[k] < 0 {
        return level_witness(seq, level - 1, x);
    }
    let label = lv.contact.labels[k];
    let mask: Vec<bool> = lv.contact.labels.iter().map(|&l| l == label).collect();
    let region = GridRegion::from_mask(g.n, g.n, g.h, mask)?;
    let delta = (2.0 * g.h).min(0.45 * region.inradius());
    let domain = smooth_inner_approximation(&region, delta)?;
    let c = &seq.w1.constants;
    let vals = Arc::new(lv.field.values.clone());
    let gs = seq.clone();
    let data = BoundaryData::new(move |p: &Point| gs.grid().interpolate(&vals, p).clamp(0.0, gs.w1.constants.gstar));
    let cfg = WosConfig { walks: 4096, ..WosConfig::default() };
    let patch = HarmonicPatch::wos(domain, data, cfg, c.gstar, c.lipschitz_m)?;
    let s = seq.clone();
    let ext = extension_fn(level - 1, move |v: &Point| level_witness(&s, level - 1, *v));
    // measured bound: sampled mismatch at the attachment boundary
    let mut bound = 0.0f64;
    let probe = BranchedMajorant::branch(patch.clone(), ext.clone(), 0.0)?;
    for v in patch.interior_boundary_samples(32) {
        let child = probe.child(&v)?;
        bound = bound.max((patch.value(&v) - child.value(&v)).abs() + child.error_bound());
    }
    BranchedMajorant::branch(patch, ext, bound)
}
