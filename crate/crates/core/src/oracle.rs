//! Ground-truth value functions: the smallest concave majorant of a radial
//! gain in the scale coordinate, and projected SOR for the discrete
//! obstacle problem on the disc.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::envelope::{CartesianGrid, FieldTag, Grid, GridField, RadialGrid};
use crate::error::{input, Result};
use crate::gain::GainField;
use crate::hull::{hull_values, upper_hull};

/// Radial profile on radii `r_0 < ... < r_K = 1` with its scale coordinate.
#[derive(Clone, Debug, Serialize)]
pub struct RadialProfile {
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    pub scale: Vec<f64>,
    /// Value reported at the (polar) origin.
    pub at_origin: f64,
}

/// Value function of the radial problem: the least concave majorant of
/// `g` in the scale coordinate on `(-inf, 0]` pinned to 0 at `r = 1`.
///
/// A concave function bounded below on a left half-line is nonincreasing,
/// so left of the rightmost global maximum the majorant is flat at that
/// maximum. This subsumes a far-left anchor at the plateau level.
pub fn radial_value_oracle(g: &GainField, grid: &RadialGrid) -> Result<RadialProfile> {
    if !g.is_radial() {
        return input("the radial oracle needs a radial gain");
    }
    let r = grid.radii().to_vec();
    let t = grid.scale().to_vec();
    let n = r.len();
    let mut ys: Vec<f64> = r.iter().map(|&x| g.profile(x).unwrap_or(0.0)).collect();
    ys[n - 1] = 0.0;
    let values = concave_majorant_halfline(&t, &ys);
    let top = values[0];
    let g0 = g.profile(0.0).unwrap_or(0.0);
    Ok(RadialProfile { radii: r, values, scale: t, at_origin: g0.max(top) })
}

/// Least concave majorant of `(t_i, y_i)` on the half-line left of the last
/// abscissa, nonincreasing, hence flat left of the rightmost maximum.
pub fn concave_majorant_halfline(t: &[f64], ys: &[f64]) -> Vec<f64> {
    let verts = upper_hull(t, ys);
    let hv = hull_values(t, ys, &verts);
    let top = verts.iter().map(|&v| ys[v]).fold(f64::NEG_INFINITY, f64::max);
    let peak = verts.iter().rposition(|&v| ys[v] == top).unwrap_or(0);
    (0..t.len())
        .map(|i| if i <= verts[peak] { top } else { hv[i].1.max(ys[i]) })
        .collect()
}

impl RadialProfile {
    pub fn into_field(self, grid: Arc<Grid>) -> Result<GridField> {
        GridField::new(grid, self.values, FieldTag::Oracle)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsorSpec {
    pub spacing: f64,
    pub omega: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PsorSpec {
    fn default() -> Self {
        Self { spacing: 2.0 / 256.0, omega: 1.7, tol: 1e-12, max_iter: 200_000 }
    }
}

#[derive(Clone, Debug)]
pub struct PsorSolution {
    pub field: GridField,
    pub sweeps: usize,
    /// Largest `|min(-L u / diag, u - g)|` over inside nodes, where `L` is
    /// the discrete Laplacian and `diag` its diagonal (value units).
    pub residual: f64,
}

/// Projected SOR for `min(-L u, u - g) = 0` on the disc with `u = 0` on the
/// circle (Shortley-Weller cut cells).
pub fn psor_obstacle_solve(g: &GainField, spec: &PsorSpec) -> Result<PsorSolution> {
    if g.dim() != 2 {
        return input("the obstacle solver is two-dimensional");
    }
    if !(spec.spacing > 0.0 && spec.spacing <= 1.0 / 64.0) {
        return input(format!("spacing {} must lie in (0, 1/64]", spec.spacing));
    }
    if !(spec.omega > 0.0 && spec.omega < 2.0) {
        return input(format!("relaxation factor {} must lie in (0, 2)", spec.omega));
    }
    let steps = 2.0 / spec.spacing;
    if (steps - steps.round()).abs() > 1e-9 {
        return input("2 / spacing must be an integer");
    }
    let cg = CartesianGrid::disc(steps.round() as usize + 1)?;
    let grid = Arc::new(Grid::Cartesian(cg));
    let Grid::Cartesian(cg) = &*grid else { unreachable!() };
    let gv = grid.sample(g)?;
    let mut u = gv.clone();
    let free = cg.inside().to_vec();
    let sweeps = cg.sor(&mut u, &free, Some(&gv), None, spec.omega, spec.tol, spec.max_iter)?;
    let residual = complementarity_residual(cg, &u, &gv);
    Ok(PsorSolution { field: GridField::new(grid, u, FieldTag::Oracle)?, sweeps, residual })
}

/// Largest complementarity defect in value units.
pub fn complementarity_residual(cg: &CartesianGrid, u: &[f64], gv: &[f64]) -> f64 {
    let diag = 4.0 / (cg.spacing() * cg.spacing());
    (0..u.len())
        .filter(|&k| cg.inside()[k])
        .map(|k| (-cg.laplacian(u, k) / diag).min(u[k] - gv[k]).abs())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleDistance {
    pub oracle: String,
    pub sup: f64,
    /// Root mean square over compared nodes.
    pub l2: f64,
    pub nodes: usize,
    /// Interpolation error estimate when grids differ (0 on a common grid).
    pub resampling_error: f64,
}

/// Sup and RMS distances between `limit` and `oracle` at the nodes of
/// `limit`. Fields on different grids are compared by interpolating the
/// oracle; the reported resampling error is the largest jump of the oracle
/// between neighbouring nodes.
pub fn cross_validate(limit: &GridField, oracle: &GridField, name: &str) -> Result<OracleDistance> {
    let same = Arc::ptr_eq(&limit.grid, &oracle.grid)
        || (limit.grid.len() == oracle.grid.len()
            && (0..limit.grid.len()).all(|k| limit.grid.point(k) == oracle.grid.point(k)));
    let idx: Vec<usize> = (0..limit.grid.len()).filter(|&k| limit.grid.active(k)).collect();
    if idx.is_empty() {
        return input("no nodes to compare");
    }
    let mut sup = 0.0f64;
    let mut sq = 0.0;
    for &k in &idx {
        let o = if same { oracle.values[k] } else { oracle.at(&limit.grid.point(k)) };
        let d = (limit.values[k] - o).abs();
        sup = sup.max(d);
        sq += d * d;
    }
    let resampling_error = if same { 0.0 } else { neighbour_jump(oracle) };
    Ok(OracleDistance {
        oracle: name.to_string(),
        sup,
        l2: (sq / idx.len() as f64).sqrt(),
        nodes: idx.len(),
        resampling_error,
    })
}

fn neighbour_jump(f: &GridField) -> f64 {
    match &*f.grid {
        Grid::Radial(_) => f.values.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max),
        Grid::Cartesian(cg) => {
            let n = cg.n();
            let mut m = 0.0f64;
            for k in 0..n * n {
                if !cg.inside()[k] {
                    continue;
                }
                for kk in [k + 1, k + n] {
                    if kk < n * n && cg.inside()[kk] {
                        m = m.max((f.values[kk] - f.values[k]).abs());
                    }
                }
            }
            m
        }
    }
}

/// Radial profile sampled onto a Cartesian grid (linear in the scale
/// coordinate between radii).
pub fn radial_on_cartesian(profile: &RadialProfile, dim: usize, target: Arc<Grid>) -> Result<GridField> {
    let rg = RadialGrid::from_radii(dim, profile.radii.clone())?;
    let radial = GridField::new(Arc::new(Grid::Radial(rg)), profile.values.clone(), FieldTag::Oracle)?;
    let values = (0..target.len())
        .map(|k| if target.active(k) { radial.at(&target.point(k)) } else { 0.0 })
        .collect();
    GridField::new(target, values, FieldTag::Oracle)
}
