//! Experiment configuration: one TOML file per run, with per-kind tables.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::coherent::WindowLaw;
use crate::damping::{DampingProfile, ProfileFamily};
use crate::error::{Error, Result};
use crate::estimates::{DyadicPair, WeightKind};
use crate::evolution::ComponentRule;
use crate::geometry::{ManifoldKind, ManifoldModel};
use crate::operators::Formulation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Spectrum,
    Scan,
    Evolve,
    AvgEstimate,
    Theorem31,
    Ehrenfest,
    Mollify,
    Gcc,
    MixScan,
    DiagSuite,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 10] = [
        ExperimentKind::Spectrum,
        ExperimentKind::Scan,
        ExperimentKind::Evolve,
        ExperimentKind::AvgEstimate,
        ExperimentKind::Theorem31,
        ExperimentKind::Ehrenfest,
        ExperimentKind::Mollify,
        ExperimentKind::Gcc,
        ExperimentKind::MixScan,
        ExperimentKind::DiagSuite,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ExperimentKind::Spectrum => "spectrum",
            ExperimentKind::Scan => "scan",
            ExperimentKind::Evolve => "evolve",
            ExperimentKind::AvgEstimate => "avg-estimate",
            ExperimentKind::Theorem31 => "theorem31",
            ExperimentKind::Ehrenfest => "ehrenfest",
            ExperimentKind::Mollify => "mollify",
            ExperimentKind::Gcc => "gcc",
            ExperimentKind::MixScan => "mix-scan",
            ExperimentKind::DiagSuite => "diag-suite",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldSpec {
    pub kind: ManifoldKind,
    pub cutoff: usize,
}

impl Default for ManifoldSpec {
    fn default() -> Self {
        ManifoldSpec { kind: ManifoldKind::Circle, cutoff: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumParams {
    pub formulation: Formulation,
}

impl Default for SpectrumParams {
    fn default() -> Self {
        SpectrumParams { formulation: Formulation::AM }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanParams {
    pub formulation: Formulation,
    /// Grid is symmetric on `[-s_max, s_max]`; 1.2 times the largest
    /// frequency when absent.
    pub s_max: Option<f64>,
    pub points: usize,
    pub refine: bool,
}

impl Default for ScanParams {
    fn default() -> Self {
        ScanParams { formulation: Formulation::AM, s_max: None, points: 401, refine: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveParams {
    pub formulation: Formulation,
    pub t: f64,
    /// Number of random initial states.
    pub states: usize,
    /// Rows of the energy table per state.
    pub samples: usize,
}

impl Default for EvolveParams {
    fn default() -> Self {
        EvolveParams { formulation: Formulation::AM, t: 20.0, states: 10, samples: 201 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AvgEstimateParams {
    pub eps: f64,
    pub t: Vec<f64>,
    pub weight: WeightKind,
    /// Fitted from the modified resolvent scan when absent.
    pub c0: Option<f64>,
    pub horizon: Option<f64>,
    pub scan_points: usize,
}

impl Default for AvgEstimateParams {
    fn default() -> Self {
        AvgEstimateParams {
            eps: 0.25,
            t: vec![5.0, 10.0, 20.0],
            weight: WeightKind::PsiMin { l: 2.0 },
            c0: None,
            horizon: None,
            scan_points: 201,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantTag {
    Averaged,
    Pointwise,
    PointwiseOpt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Theorem31Config {
    pub hs: Vec<f64>,
    pub eps: f64,
    pub t_h: f64,
    pub variants: Vec<VariantTag>,
    pub theta: f64,
    pub delta: f64,
    pub weight: WeightKind,
    pub rule: ComponentRule,
    pub density: f64,
    /// Use `K = ceil(cutoff_scale / h)` per `h` instead of `manifold.cutoff`.
    pub cutoff_scale: Option<f64>,
    /// Largest allowed ratio of fitted constants across `h`.
    pub max_c0_ratio: f64,
}

impl Default for Theorem31Config {
    fn default() -> Self {
        Theorem31Config {
            hs: vec![0.125, 0.0625, 0.03125],
            eps: 0.25,
            t_h: 4.0,
            variants: vec![VariantTag::Averaged, VariantTag::PointwiseOpt],
            theta: 0.5,
            delta: 0.5,
            weight: WeightKind::PsiMin { l: 2.0 },
            rule: ComponentRule::FirstOnly,
            density: 8.0,
            cutoff_scale: None,
            max_c0_ratio: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EhrenfestConfig {
    pub x0: [f64; 2],
    pub xi0: [f64; 2],
    pub mu: f64,
    pub hs: Vec<f64>,
    pub window: WindowLaw,
    pub nu: Option<f64>,
    pub density: f64,
    pub delta: f64,
    pub c0: f64,
    pub mass_floor: f64,
    pub check_a_picture: bool,
}

impl Default for EhrenfestConfig {
    fn default() -> Self {
        EhrenfestConfig {
            x0: [0.0, 0.0],
            xi0: [1.0, 0.0],
            mu: 1.0,
            hs: vec![0.125, 0.0625],
            window: WindowLaw::Fixed { eps: 0.25 },
            nu: None,
            density: 8.0,
            delta: 0.5,
            c0: 0.0,
            mass_floor: 1e-20,
            check_a_picture: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MollifyParams {
    pub eps: Vec<f64>,
    /// Errors are normalized by `omega(kappa eps)`.
    pub kappa: f64,
    /// Largest allowed max/min ratio of the normalized errors.
    pub max_ratio: f64,
}

impl Default for MollifyParams {
    fn default() -> Self {
        MollifyParams { eps: (3..=8).map(|j| 0.5f64.powi(j)).collect(), kappa: 2.0, max_ratio: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GccParams {
    pub horizon: f64,
    /// Points with `b > threshold` count as controlled.
    pub threshold: f64,
    pub n_x: usize,
    pub n_theta: usize,
    pub step: f64,
}

impl Default for GccParams {
    fn default() -> Self {
        let s = crate::geometry::GccSampling::default();
        GccParams { horizon: 4.0 * std::f64::consts::TAU, threshold: 0.0, n_x: s.n_x, n_theta: s.n_theta, step: s.step }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixScanParams {
    pub levels: Vec<u32>,
    pub pair: DyadicPair,
}

impl Default for MixScanParams {
    fn default() -> Self {
        MixScanParams { levels: (2..=6).collect(), pair: DyadicPair::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagSuiteParams {
    pub hs: Vec<f64>,
    pub t: f64,
    pub nu: f64,
}

impl Default for DiagSuiteParams {
    fn default() -> Self {
        DiagSuiteParams { hs: vec![0.125, 0.0625, 0.03125], t: 1.0, nu: 0.0 }
    }
}

fn default_seed() -> u64 {
    7
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn default_workers() -> usize {
    1
}

fn default_mass() -> f64 {
    1.0
}

fn default_damping() -> ProfileFamily {
    ProfileFamily::Constant { value: 1.0 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_mass")]
    pub m: f64,
    #[serde(default)]
    pub manifold: ManifoldSpec,
    #[serde(default = "default_damping")]
    pub damping: ProfileFamily,
    #[serde(default)]
    pub spectrum: SpectrumParams,
    #[serde(default)]
    pub scan: ScanParams,
    #[serde(default)]
    pub evolve: EvolveParams,
    #[serde(default)]
    pub avg_estimate: AvgEstimateParams,
    #[serde(default)]
    pub theorem31: Theorem31Config,
    #[serde(default)]
    pub ehrenfest: EhrenfestConfig,
    #[serde(default)]
    pub mollify: MollifyParams,
    #[serde(default)]
    pub gcc: GccParams,
    #[serde(default)]
    pub mix_scan: MixScanParams,
    #[serde(default)]
    pub diag_suite: DiagSuiteParams,
}

fn bad(path: &str, msg: impl Into<String>) -> Error {
    Error::Config { path: path.to_string(), msg: msg.into() }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(path, format!("must be positive and finite, got {v}")))
    }
}

fn unit_open(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(bad(path, format!("must lie in (0,1), got {v}")))
    }
}

fn h_grid(path: &str, hs: &[f64]) -> Result<()> {
    if hs.is_empty() {
        return Err(bad(path, "must not be empty"));
    }
    for (i, h) in hs.iter().enumerate() {
        unit_open(&format!("{path}[{i}]"), *h)?;
    }
    Ok(())
}

fn weight(path: &str, w: &WeightKind) -> Result<()> {
    match w {
        WeightKind::Ramp => Ok(()),
        WeightKind::Bump { length } => positive(&format!("{path}.length"), *length),
        WeightKind::PsiMin { l } if *l > 1.0 => Ok(()),
        WeightKind::PsiMin { l } => Err(bad(&format!("{path}.l"), format!("must exceed 1, got {l}"))),
        WeightKind::Table { t, v } => {
            if t.len() != v.len() || t.len() < 2 {
                Err(bad(path, "table needs matching t and v with at least two knots"))
            } else {
                Ok(())
            }
        }
    }
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            kind,
            seed: default_seed(),
            output_dir: default_output(),
            workers: default_workers(),
            m: default_mass(),
            manifold: ManifoldSpec::default(),
            damping: default_damping(),
            spectrum: Default::default(),
            scan: Default::default(),
            evolve: Default::default(),
            avg_estimate: Default::default(),
            theorem31: Default::default(),
            ehrenfest: Default::default(),
            mollify: Default::default(),
            gcc: Default::default(),
            mix_scan: Default::default(),
            diag_suite: Default::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let path = e.span().map(|s| format!("bytes {}..{}", s.start, s.end)).unwrap_or_else(|| "<file>".into());
            bad(&path, e.message().to_string())
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| bad("<config>", e.to_string()))
    }

    pub fn model(&self) -> Result<ManifoldModel> {
        ManifoldModel::new(self.manifold.kind, self.manifold.cutoff).map_err(|e| bad("manifold.cutoff", e.to_string()))
    }

    pub fn profile(&self) -> Result<DampingProfile> {
        DampingProfile::new(self.manifold.kind, self.damping.clone()).map_err(|e| bad("damping", e.to_string()))
    }

    /// Range checks for the shared fields and the table of the selected kind.
    pub fn validate(&self) -> Result<()> {
        let k = self.manifold.cutoff;
        let limit = match self.manifold.kind {
            ManifoldKind::Circle => 4096,
            ManifoldKind::Torus2 => 256,
        };
        if k < 1 || k > limit {
            return Err(bad("manifold.cutoff", format!("must lie in [1, {limit}], got {k}")));
        }
        if !(self.m >= 0.0 && self.m.is_finite()) {
            return Err(bad("m", format!("must be nonnegative and finite, got {}", self.m)));
        }
        if self.workers == 0 || self.workers > 256 {
            return Err(bad("workers", format!("must lie in [1, 256], got {}", self.workers)));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(bad("output_dir", "must not be empty"));
        }
        self.profile()?;
        let dense_limit = 4000;
        let n_modes = match self.manifold.kind {
            ManifoldKind::Circle => 2 * k + 1,
            ManifoldKind::Torus2 => (2 * k + 1) * (2 * k + 1),
        };
        let needs_dense =
            !matches!(self.kind, ExperimentKind::Mollify | ExperimentKind::Gcc | ExperimentKind::Ehrenfest | ExperimentKind::MixScan);
        let blocked = self.manifold.kind == ManifoldKind::Torus2 && self.profile()?.x_only();
        if needs_dense && !blocked && n_modes > dense_limit {
            return Err(bad("manifold.cutoff", format!("{n_modes} modes exceed the dense limit {dense_limit} for this profile")));
        }
        match self.kind {
            ExperimentKind::Spectrum => self.mass_pairing("spectrum.formulation", self.spectrum.formulation),
            ExperimentKind::Scan => {
                self.mass_pairing("scan.formulation", self.scan.formulation)?;
                if let Some(s) = self.scan.s_max {
                    positive("scan.s_max", s)?;
                }
                if self.scan.points < 3 || self.scan.points > 100_000 {
                    return Err(bad("scan.points", "must lie in [3, 100000]"));
                }
                Ok(())
            }
            ExperimentKind::Evolve => {
                self.mass_pairing("evolve.formulation", self.evolve.formulation)?;
                positive("evolve.t", self.evolve.t)?;
                if self.evolve.states == 0 {
                    return Err(bad("evolve.states", "must be at least 1"));
                }
                if self.evolve.samples < 2 {
                    return Err(bad("evolve.samples", "must be at least 2"));
                }
                Ok(())
            }
            ExperimentKind::AvgEstimate => {
                let p = &self.avg_estimate;
                unit_open("avg_estimate.eps", p.eps)?;
                if p.t.is_empty() {
                    return Err(bad("avg_estimate.t", "must not be empty"));
                }
                for (i, t) in p.t.iter().enumerate() {
                    positive(&format!("avg_estimate.t[{i}]"), *t)?;
                }
                weight("avg_estimate.weight", &p.weight)?;
                if let Some(c) = p.c0 {
                    positive("avg_estimate.c0", c)?;
                }
                if let Some(hz) = p.horizon {
                    positive("avg_estimate.horizon", hz)?;
                }
                if p.weight == WeightKind::Ramp && p.horizon.is_none() {
                    return Err(bad("avg_estimate.horizon", "an unbounded weight needs a horizon"));
                }
                if p.scan_points < 3 {
                    return Err(bad("avg_estimate.scan_points", "must be at least 3"));
                }
                if !(self.m > 0.0) {
                    return Err(bad("m", "the averaged estimate runs on P_m and needs m > 0"));
                }
                Ok(())
            }
            ExperimentKind::Theorem31 => {
                let p = &self.theorem31;
                h_grid("theorem31.hs", &p.hs)?;
                unit_open("theorem31.eps", p.eps)?;
                if !(p.t_h >= 1.0) {
                    return Err(bad("theorem31.t_h", format!("must be at least 1, got {}", p.t_h)));
                }
                if p.variants.is_empty() {
                    return Err(bad("theorem31.variants", "must not be empty"));
                }
                positive("theorem31.theta", p.theta)?;
                positive("theorem31.delta", p.delta)?;
                positive("theorem31.density", p.density)?;
                weight("theorem31.weight", &p.weight)?;
                if p.weight == WeightKind::Ramp {
                    return Err(bad("theorem31.weight", "needs a compactly supported weight"));
                }
                if let Some(c) = p.cutoff_scale {
                    if !(c > 1.0 && c <= 8.0) {
                        return Err(bad("theorem31.cutoff_scale", format!("must lie in (1, 8], got {c}")));
                    }
                }
                if !(p.max_c0_ratio >= 1.0) {
                    return Err(bad("theorem31.max_c0_ratio", "must be at least 1"));
                }
                if !(self.m > 0.0) {
                    return Err(bad("m", "the resolvent-to-average check runs on P_m and needs m > 0"));
                }
                Ok(())
            }
            ExperimentKind::Ehrenfest => {
                let p = &self.ehrenfest;
                h_grid("ehrenfest.hs", &p.hs)?;
                positive("ehrenfest.mu", p.mu)?;
                positive("ehrenfest.density", p.density)?;
                positive("ehrenfest.delta", p.delta)?;
                if !(p.c0 >= 0.0) {
                    return Err(bad("ehrenfest.c0", "must be nonnegative"));
                }
                let n = match self.manifold.kind {
                    ManifoldKind::Circle => p.xi0[0].abs(),
                    ManifoldKind::Torus2 => p.xi0[0].hypot(p.xi0[1]),
                };
                if (n - 1.0).abs() > 1e-12 {
                    return Err(bad("ehrenfest.xi0", format!("must have unit length, got {n}")));
                }
                match p.window {
                    WindowLaw::Fixed { eps } => unit_open("ehrenfest.window.eps", eps)?,
                    WindowLaw::Power { rho } if rho > 0.0 && rho <= 0.4 => {}
                    WindowLaw::Power { rho } => return Err(bad("ehrenfest.window.rho", format!("must lie in (0, 0.4], got {rho}"))),
                }
                if let Some(nu) = p.nu {
                    positive("ehrenfest.nu", nu)?;
                }
                if !(self.m > 0.0) {
                    return Err(bad("m", "the energy experiment needs m > 0"));
                }
                let h_min = p.hs.iter().cloned().fold(1.0, f64::min);
                let needed = (2.0 / h_min).ceil() as usize;
                if k < needed {
                    return Err(Error::Infeasible(format!("ehrenfest.hs: smallest h = {h_min} needs manifold.cutoff >= {needed}")));
                }
                Ok(())
            }
            ExperimentKind::Mollify => {
                if self.mollify.eps.is_empty() {
                    return Err(bad("mollify.eps", "must not be empty"));
                }
                for (i, e) in self.mollify.eps.iter().enumerate() {
                    unit_open(&format!("mollify.eps[{i}]"), *e)?;
                }
                positive("mollify.kappa", self.mollify.kappa)?;
                if !(self.mollify.max_ratio >= 1.0) {
                    return Err(bad("mollify.max_ratio", "must be at least 1"));
                }
                Ok(())
            }
            ExperimentKind::Gcc => {
                let p = &self.gcc;
                positive("gcc.horizon", p.horizon)?;
                positive("gcc.step", p.step)?;
                if !(p.threshold >= 0.0) {
                    return Err(bad("gcc.threshold", "must be nonnegative"));
                }
                if p.n_x == 0 || p.n_theta == 0 {
                    return Err(bad("gcc.n_x", "sampling counts must be positive"));
                }
                Ok(())
            }
            ExperimentKind::MixScan => {
                if self.mix_scan.levels.is_empty() {
                    return Err(bad("mix_scan.levels", "must not be empty"));
                }
                self.mix_scan.pair.validate().map_err(|e| bad("mix_scan.pair", e.to_string()))?;
                if let Some(top) = self.mix_scan.levels.iter().max() {
                    if (1u64 << (top + 1)) as usize > k {
                        return Err(Error::Infeasible(format!(
                            "mix_scan.levels: level {top} needs manifold.cutoff >= {}",
                            1u64 << (top + 1)
                        )));
                    }
                }
                Ok(())
            }
            ExperimentKind::DiagSuite => {
                h_grid("diag_suite.hs", &self.diag_suite.hs)?;
                positive("diag_suite.t", self.diag_suite.t)?;
                if !(self.diag_suite.nu >= 0.0) {
                    return Err(bad("diag_suite.nu", "must be nonnegative"));
                }
                if !(self.m > 0.0) {
                    return Err(bad("m", "the diagonalization suite needs m > 0"));
                }
                Ok(())
            }
        }
    }

    fn mass_pairing(&self, path: &str, f: Formulation) -> Result<()> {
        use Formulation::*;
        match f {
            AM | AtildeM | PM if self.m > 0.0 => Ok(()),
            APlus | AtildePlus | PPlus | BoldA if self.m == 0.0 => Ok(()),
            PCut | PDiag => Err(bad(path, "cutoff operators are only built by the diagonalization suite")),
            _ => Err(bad(path, format!("{} does not match m = {}", f.tag(), self.m))),
        }
    }
}
