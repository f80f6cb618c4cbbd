//! Run configuration: one JSON document describing gain, grid, envelope
//! iteration, path simulation and oracle toggles.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::envelope::{DictionarySpec, Grid, GridSpec, IterationSpec, CONTACT_TOL};
use crate::error::{input, Error, Result};
use crate::gain::{derive_constants, GainConstants, GainField, GainSpec};
use crate::geometry::Point;
use crate::oracle::PsorSpec;
use crate::pathsim::{PathConfig, Scheme};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub gain: GainSpec,
    #[serde(default = "two")]
    pub dim: usize,
    pub grid: GridSpec,
    #[serde(default)]
    pub envelope: EnvelopeConfig,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub reproduce: ReproduceConfig,
    /// Output directory (overridable on the command line).
    #[serde(default)]
    pub output: Option<String>,
}

fn default_name() -> String {
    "run".into()
}

fn two() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeConfig {
    #[serde(default)]
    pub dictionary: DictionarySpec,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_contact_tol")]
    pub contact_tol: f64,
}

fn default_max_iter() -> usize {
    IterationSpec::default().max_iter
}

fn default_tol() -> f64 {
    IterationSpec::default().tol
}

fn default_contact_tol() -> f64 {
    CONTACT_TOL
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        Self {
            dictionary: DictionarySpec::default(),
            max_iter: default_max_iter(),
            tol: default_tol(),
            contact_tol: default_contact_tol(),
        }
    }
}

impl EnvelopeConfig {
    pub fn iteration(&self) -> IterationSpec {
        IterationSpec { max_iter: self.max_iter, tol: self.tol, contact_tol: self.contact_tol }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_time")]
    pub max_time: f64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    /// Start points for witnesses and Algorithm 1 runs.
    #[serde(default = "default_probes")]
    pub probes: Vec<Vec<f64>>,
    /// Number of full path traces written per probe.
    #[serde(default = "two")]
    pub traces: usize,
}

fn default_dt() -> f64 {
    PathConfig::default().dt
}

fn default_max_time() -> f64 {
    PathConfig::default().max_time
}

fn default_scheme() -> Scheme {
    Scheme::Auto
}

fn default_n_paths() -> usize {
    1000
}

fn default_probes() -> Vec<Vec<f64>> {
    vec![vec![0.1, 0.0]]
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dt: default_dt(),
            seed: 0,
            max_time: default_max_time(),
            scheme: default_scheme(),
            n_paths: default_n_paths(),
            probes: default_probes(),
            traces: 2,
        }
    }
}

impl PathsConfig {
    pub fn path_config(&self) -> PathConfig {
        PathConfig { dt: self.dt, seed: self.seed, max_time: self.max_time, scheme: self.scheme, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "yes")]
    pub radial: bool,
    #[serde(default)]
    pub psor: bool,
    #[serde(default = "default_spacing")]
    pub psor_spacing: f64,
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default = "default_psor_tol")]
    pub psor_tol: f64,
    #[serde(default = "default_psor_iter")]
    pub psor_max_iter: usize,
}

fn yes() -> bool {
    true
}

fn default_spacing() -> f64 {
    PsorSpec::default().spacing
}

fn default_omega() -> f64 {
    PsorSpec::default().omega
}

fn default_psor_tol() -> f64 {
    PsorSpec::default().tol
}

fn default_psor_iter() -> usize {
    PsorSpec::default().max_iter
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            radial: true,
            psor: false,
            psor_spacing: default_spacing(),
            omega: default_omega(),
            psor_tol: default_psor_tol(),
            psor_max_iter: default_psor_iter(),
        }
    }
}

impl OracleConfig {
    pub fn psor_spec(&self) -> PsorSpec {
        PsorSpec { spacing: self.psor_spacing, omega: self.omega, tol: self.psor_tol, max_iter: self.psor_max_iter }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReproduceConfig {
    /// Least gap `w1 - balayage` that counts as a failure of `w1`.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Largest admissible sup distance between the limit and the oracle.
    #[serde(default = "default_oracle_tol")]
    pub oracle_tol: f64,
}

fn default_margin() -> f64 {
    1e-3
}

fn default_oracle_tol() -> f64 {
    1e-3
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        Self { margin: default_margin(), oracle_tol: default_oracle_tol() }
    }
}

/// Built objects shared by every command.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub gain: GainField,
    pub constants: GainConstants,
    pub grid: Arc<Grid>,
    pub probes: Vec<Point>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Input(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks every numeric field against the preconditions of the
    /// operations it feeds, and builds gain, constants and grid.
    pub fn prepare(&self) -> Result<Prepared> {
        if !(2..=3).contains(&self.dim) {
            return input(format!("dimension must be 2 or 3, got {}", self.dim));
        }
        let e = &self.envelope;
        if !(e.tol > 0.0) || !(e.contact_tol > 0.0) {
            return input("envelope tolerances must be positive");
        }
        let p = &self.paths;
        self.paths.path_config().validate()?;
        if p.n_paths > 0 && p.n_paths < 100 {
            return input(format!("n_paths must be 0 or at least 100, got {}", p.n_paths));
        }
        if !(self.reproduce.margin > 0.0 && self.reproduce.oracle_tol > 0.0) {
            return input("reproduce margin and oracle tolerance must be positive");
        }
        let probes = p
            .probes
            .iter()
            .map(|v| {
                let x = Point::new(v)?;
                if x.dim() != self.dim {
                    return input(format!("probe {v:?} has the wrong dimension"));
                }
                if x.norm() >= 1.0 {
                    return input(format!("probe {v:?} is not inside the unit ball"));
                }
                Ok(x)
            })
            .collect::<Result<Vec<_>>>()?;
        let gain = self.gain.build(self.dim)?;
        let constants = derive_constants(&gain, self.gain.gstar_margin())?;
        let grid = Arc::new(self.grid.build(self.dim)?);
        Ok(Prepared { gain, constants, grid, probes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPIKED: &str = r#"{
        "name": "spiked-ball",
        "gain": {"kind": "spiked", "epsilon": 0.05, "mollify": 0.01},
        "grid": {"kind": "radial", "nodes": 256}
    }"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::from_json(SPIKED).unwrap();
        assert_eq!(c.dim, 2);
        assert_eq!(c.envelope.max_iter, 50);
        assert!(c.oracle.radial && !c.oracle.psor);
        let p = c.prepare().unwrap();
        assert_eq!(p.grid.len(), 256);
        assert!((p.constants.gstar - 1.25).abs() < 1e-12);
    }

    #[test]
    fn invalid_fields_are_rejected() {
        let bad_eps = SPIKED.replace("0.05", "0.7");
        let e = RunConfig::from_json(&bad_eps).unwrap().prepare().unwrap_err();
        assert!(e.to_string().contains("spike radius"), "{e}");
        assert!(RunConfig::from_json(&SPIKED.replace("\"name\"", "\"nmae\"")).is_err());
        let mut c = RunConfig::from_json(SPIKED).unwrap();
        c.paths.n_paths = 10;
        assert!(c.prepare().is_err());
        c.paths.n_paths = 0;
        c.dim = 4;
        assert!(c.prepare().is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::from_json(SPIKED).unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
    }
}
