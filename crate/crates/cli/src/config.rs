//! Run configuration read from a TOML file.
//!
//! Every field has a default, and the effective configuration (file, then
//! command-line overrides, then defaults) is what gets hashed and echoed in
//! the outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spn_bloch::assembly::AssemblyOptions;
use spn_bloch::density::{DensityKind, IonDensity, TabulatedDensity};
use spn_bloch::dynamics::InitialData;
use spn_bloch::fiber::{FiberOptions, FiberProblem};
use spn_bloch::spectral::TOL_PSD;
use spn_bloch::sweep::{DEFAULT_FLAT_TOL, DEFAULT_GRAD_TOL, DEFAULT_HESS_TOL};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub density: DensityConfig,
    pub basis: BasisConfig,
    pub grid: GridConfig,
    pub lattice: AssemblyOptions,
    pub tolerances: Tolerances,
    pub growth: GrowthConfig,
    pub dynamics: DynamicsConfig,
    pub resolvent: ResolventConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            density: DensityConfig::default(),
            basis: BasisConfig::default(),
            grid: GridConfig::default(),
            lattice: AssemblyOptions::default(),
            tolerances: Tolerances::default(),
            growth: GrowthConfig::default(),
            dynamics: DynamicsConfig::default(),
            resolvent: ResolventConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityShape {
    /// `sin(xi/2)/xi exp(-gauss xi^2)` in every direction.
    SincGauss,
    /// Isotropic Gaussian; fails the Jellium condition.
    Gaussian,
    /// Samples on a cubic frequency grid read from `path`.
    Tabulated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityConfig {
    pub kind: DensityShape,
    pub gauss: f64,
    pub width: f64,
    pub amplitude: f64,
    pub path: Option<PathBuf>,
    pub e: f64,
    pub m_ion: f64,
    /// `false` switches the ion-field coupling off.
    pub coupled: bool,
    /// Carried into the metadata; the spectra do not depend on it.
    pub decay_rate: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            kind: DensityShape::SincGauss,
            gauss: 1.0,
            width: 1.0,
            amplitude: 1.0,
            path: None,
            e: 1.0,
            m_ion: 1.0,
            coupled: true,
            decay_rate: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    pub cutoff: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self { cutoff: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub l: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { l: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub flat_tol: f64,
    pub grad_tol: f64,
    pub hess_tol: f64,
    pub tol_psd: f64,
    pub jellium_tol: f64,
    pub jellium_radius: usize,
    /// Smallest admissible eigenvalue of the Wiener matrix.
    pub wiener_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            flat_tol: DEFAULT_FLAT_TOL,
            grad_tol: DEFAULT_GRAD_TOL,
            hess_tol: DEFAULT_HESS_TOL,
            tol_psd: TOL_PSD,
            jellium_tol: 1e-12,
            jellium_radius: 5,
            wiener_tol: 0.0,
        }
    }
}

/// Fit range of the growth law, 1-based in the `|omega|` order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrowthConfig {
    pub k_lo: usize,
    pub k_hi: usize,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        Self { k_lo: 20, k_hi: 120 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    pub band: usize,
    pub center: [f64; 3],
    pub width: f64,
    pub amplitude: f64,
    pub times: Vec<f64>,
    pub alpha: f64,
    /// Cell box radius; `None` means `L/4`.
    pub radius: Option<usize>,
    pub c_horizon: f64,
    /// Only eigencomponents with `|omega| <= nu` are kept in the initial data.
    pub nu: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        let init = InitialData::default();
        Self {
            band: init.band,
            center: init.center,
            width: init.width,
            amplitude: init.amplitude,
            times: vec![0.0, 0.25, 0.5, 1.0],
            alpha: -2.0,
            radius: None,
            c_horizon: spn_bloch::dynamics::C_HORIZON,
            nu: f64::INFINITY,
        }
    }
}

impl DynamicsConfig {
    pub fn initial_data(&self) -> InitialData {
        InitialData {
            band: self.band,
            center: self.center,
            width: self.width,
            amplitude: self.amplitude,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Band-localized data as for the dynamics.
    Band,
    /// Independent uniform entries at every point, drawn from the seed.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResolventConfig {
    pub probe: ProbeKind,
    pub band: usize,
    pub center: [f64; 3],
    pub width: f64,
    pub amplitude: f64,
    /// `None` means the range of the band values the probe lives on.
    pub omega_window: Option<[f64; 2]>,
    pub omega_samples: usize,
    /// Strictly decreasing.
    pub epsilons: Vec<f64>,
    pub alpha: f64,
    pub radius: Option<usize>,
}

impl Default for ResolventConfig {
    fn default() -> Self {
        let init = InitialData::default();
        Self {
            probe: ProbeKind::Band,
            band: init.band,
            center: init.center,
            width: init.width,
            amplitude: init.amplitude,
            omega_window: None,
            omega_samples: 200,
            epsilons: (0..16).map(|i| 10.0 * 0.8f64.powi(i)).collect(),
            alpha: -4.0,
            radius: None,
        }
    }
}

impl ResolventConfig {
    pub fn initial_data(&self) -> InitialData {
        InitialData {
            band: self.band,
            center: self.center,
            width: self.width,
            amplitude: self.amplitude,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::Usage(m));
        if self.basis.cutoff < 1 {
            return fail(format!("basis.cutoff = {} must be at least 1", self.basis.cutoff));
        }
        if self.grid.l < 2 {
            return fail(format!("grid.l = {} must be at least 2", self.grid.l));
        }
        for (name, alpha) in [("dynamics", self.dynamics.alpha), ("resolvent", self.resolvent.alpha)] {
            if !(alpha < 0.0) {
                return fail(format!("{name}.alpha = {alpha} must be negative"));
            }
        }
        if self.growth.k_lo < 1 || self.growth.k_hi < self.growth.k_lo {
            return fail(format!(
                "growth range [{}, {}] is empty",
                self.growth.k_lo, self.growth.k_hi
            ));
        }
        if self.density.kind == DensityShape::Tabulated && self.density.path.is_none() {
            return fail("density.path is required for a tabulated density".into());
        }
        if let Some(w) = self.resolvent.omega_window {
            if !(w[0] <= w[1]) {
                return fail(format!("resolvent.omega_window {w:?} is empty"));
            }
        }
        if self.resolvent.omega_samples < 1 {
            return fail("resolvent.omega_samples must be at least 1".into());
        }
        if self.dynamics.times.iter().any(|t| !t.is_finite()) {
            return fail("dynamics.times must be finite".into());
        }
        if self.dynamics.nu.is_nan() {
            return fail("dynamics.nu must not be NaN".into());
        }
        Ok(())
    }

    /// The effective configuration as TOML; infinite values are written as
    /// `inf`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of [`Self::to_toml`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn density(&self) -> Result<IonDensity, CliError> {
        let d = &self.density;
        let density = match d.kind {
            DensityShape::SincGauss => IonDensity::sinc_gauss(d.gauss, d.e, d.m_ion),
            DensityShape::Gaussian => IonDensity::gaussian(d.width, d.amplitude, d.e, d.m_ion),
            DensityShape::Tabulated => {
                let path = d.path.as_deref().expect("validated");
                TabulatedDensity::from_csv(path)
                    .and_then(|t| IonDensity::normalized(DensityKind::Tabulated(t), d.e, d.m_ion))
            }
        }
        .map_err(|e| CliError::Usage(format!("density: {e}")))?
        .with_decay_rate(d.decay_rate);
        Ok(if d.coupled { density } else { density.with_coupling_disabled() })
    }

    pub fn problem(&self) -> Result<FiberProblem, CliError> {
        let mut problem = FiberProblem::new(self.density()?, self.basis.cutoff)?;
        problem.assembly = self.lattice;
        problem.fiber = FiberOptions {
            tol_psd: self.tolerances.tol_psd,
        };
        Ok(problem)
    }

    pub fn dynamics_radius(&self) -> usize {
        self.dynamics.radius.unwrap_or(self.grid.l / 4)
    }

    pub fn resolvent_radius(&self) -> usize {
        self.resolvent.radius.unwrap_or(self.grid.l / 4)
    }
}

pub fn default_epsilon_ladder() -> Vec<f64> {
    ResolventConfig::default().epsilons
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn effective_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.resolvent.omega_window = Some([0.5, 1.5]);
        cfg.density.path = Some("x.csv".into());
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert!(back.dynamics.nu.is_infinite());
    }

    #[test]
    fn hash_sees_every_field() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.tolerances.flat_tol *= 2.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn rejects_invalid_values() {
        for text in [
            "[basis]\ncutoff = 0",
            "[grid]\nl = 1",
            "[dynamics]\nalpha = 0.0",
            "[resolvent]\nalpha = 1.0",
            "[density]\nkind = \"tabulated\"",
            "[growth]\nk_lo = 30\nk_hi = 20",
            "[grid]\nsize = 4",
            "[basis]\ncutoff = \"two\"",
            "grid = [",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(CliError::Usage(_))), "{text}");
        }
    }

    #[test]
    fn example_density_is_the_default() {
        let d = RunConfig::default().density().unwrap();
        assert_eq!(d, IonDensity::example());
    }

    #[test]
    fn uncoupled_density() {
        let cfg = RunConfig::from_toml("[density]\ncoupled = false").unwrap();
        assert!(!cfg.density().unwrap().is_coupled());
    }

    #[test]
    fn default_radius_is_a_quarter_of_the_grid() {
        let cfg = RunConfig::from_toml("[grid]\nl = 16").unwrap();
        assert_eq!(cfg.dynamics_radius(), 4);
        assert_eq!(cfg.resolvent_radius(), 4);
    }
}
