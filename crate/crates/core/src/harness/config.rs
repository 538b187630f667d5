use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::energy::{Audit, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::integrator::{GuardMode, StepControl};
use crate::model::ModelParams;

pub const SCHEMA_VERSION: u32 = 1;

/// Full description of one experiment. Files are TOML unless the extension
/// is `.json`; every key except `grid.dim`, `grid.n`, `ic.preset`,
/// `ic.amplitude` and `time.t_end` has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub grid: GridConfig,
    #[serde(default)]
    pub params: ModelParams,
    pub ic: IcConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub n: usize,
    #[serde(default = "two_pi")]
    pub length: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Every scalar unknown and `u¹` set to `c·sin(2πx₁/L)`.
    SingleMode,
    /// Random cosines on all modes with `0 < |k| ≤ kmax`.
    RandomBandlimited,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcConfig {
    pub preset: Preset,
    /// Target `H³` norm `δ₀` of the whole perturbation.
    pub amplitude: f64,
    /// Highest excited integer wavenumber; defaults to `min(4, n/3)`.
    #[serde(default)]
    pub kmax: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_end: f64,
    /// Fixed step; the stability bound is used when absent.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "safety")]
    pub safety: f64,
    #[serde(default = "max_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub guard_mode: GuardMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    #[serde(default = "alpha")]
    pub alpha: f64,
    #[serde(default = "stride")]
    pub stride: usize,
    #[serde(default = "all_audits")]
    pub audits: Vec<Audit>,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            alpha: alpha(),
            stride: stride(),
            audits: all_audits(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    /// `series.csv`
    Csv,
    /// `final.ckpt`
    Checkpoint,
}

/// The summary (`summary.json`) is always written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "out_dir")]
    pub dir: PathBuf,
    #[serde(default = "formats")]
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: out_dir(),
            formats: formats(),
        }
    }
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}
fn two_pi() -> f64 {
    2.0 * std::f64::consts::PI
}
fn safety() -> f64 {
    0.9
}
fn max_steps() -> usize {
    1_000_000
}
fn alpha() -> f64 {
    DEFAULT_ALPHA
}
fn stride() -> usize {
    10
}
fn all_audits() -> Vec<Audit> {
    Audit::ALL.to_vec()
}
fn out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn formats() -> Vec<OutputFormat> {
    vec![OutputFormat::Csv]
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check every invariant, including the ones enforced by the grid, the
    /// parameters and the step control.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        let grid = self.build_grid()?;
        self.params.validate()?;
        self.step_control().validate()?;
        let ic = &self.ic;
        if !(ic.amplitude >= 0.0 && ic.amplitude.is_finite()) {
            return Err(Error::Config(format!(
                "ic.amplitude must be >= 0, got {}",
                ic.amplitude
            )));
        }
        let kmax = self.kmax();
        if kmax == 0 || kmax > grid.dealias_cutoff() {
            return Err(Error::Config(format!(
                "ic.kmax must lie in 1..={} for n = {}, got {kmax}",
                grid.dealias_cutoff(),
                grid.n()
            )));
        }
        let m = &self.monitor;
        if !(m.alpha > 0.0 && m.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "monitor.alpha must be positive, got {}",
                m.alpha
            )));
        }
        if m.stride == 0 {
            return Err(Error::Config("monitor.stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn build_grid(&self) -> Result<Grid> {
        Grid::new(self.grid.dim, self.grid.n, self.grid.length).map_err(|e| Error::Config(format!("grid: {e}")))
    }

    /// Configured `ic.kmax`, or `min(4, n/3)`.
    pub fn kmax(&self) -> usize {
        self.ic.kmax.unwrap_or_else(|| 4.min(self.grid.n / 3))
    }

    pub fn step_control(&self) -> StepControl {
        StepControl {
            dt: self.time.dt,
            safety: self.time.safety,
            t_end: self.time.t_end,
            max_steps: self.time.max_steps,
            guard_mode: self.time.guard_mode,
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("RunConfig serialises to TOML")
    }
}

/// Read and validate a configuration file.
pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => RunConfig::from_json_str(&text),
        _ => RunConfig::from_toml_str(&text),
    };
    parsed.map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[grid]
dim = 1
n = 32

[ic]
preset = "single_mode"
amplitude = 1e-3

[time]
t_end = 1.0
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.schema_version, 1);
        assert_eq!(cfg.grid.length, 2.0 * std::f64::consts::PI);
        assert_eq!(cfg.params, ModelParams::default());
        assert_eq!(cfg.params.c1, 1.44);
        assert_eq!(cfg.params.c2, 1.92);
        assert_eq!(cfg.params.gamma, 1.4);
        assert_eq!(cfg.time.safety, 0.9);
        assert_eq!(cfg.time.dt, None);
        assert_eq!(cfg.time.guard_mode, GuardMode::Abort);
        assert_eq!(cfg.monitor.alpha, 0.01);
        assert_eq!(cfg.monitor.stride, 10);
        assert_eq!(cfg.monitor.audits.len(), 5);
        assert_eq!(cfg.kmax(), 4);
        assert_eq!(cfg.ic.seed, 0);
        assert_eq!(cfg.output.formats, vec![OutputFormat::Csv]);
    }

    #[test]
    fn json_and_toml_agree() {
        let json = r#"{"grid":{"dim":1,"n":32},"ic":{"preset":"single_mode","amplitude":1e-3},"time":{"t_end":1}}"#;
        assert_eq!(
            RunConfig::from_json_str(json).unwrap(),
            RunConfig::from_toml_str(MINIMAL).unwrap()
        );
    }

    #[test]
    fn round_trip_through_toml() {
        let mut cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        cfg.time.dt = Some(0.25);
        cfg.time.guard_mode = GuardMode::Report;
        cfg.monitor.audits = vec![Audit::SkewPressure, Audit::L2Dissipation];
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invariant_violations_are_rejected() {
        let bad = [
            MINIMAL.replace("amplitude = 1e-3", "amplitude = -1e-3"),
            MINIMAL.replace("amplitude = 1e-3", "amplitude = 1e-3\nkmax = 11"),
            MINIMAL.replace("n = 32", "n = 31"),
            MINIMAL.replace("n = 32", "n = 6"),
            MINIMAL.replace("t_end = 1.0", "t_end = -1.0"),
            format!("{MINIMAL}\n[monitor]\nstride = 0\n"),
            format!("schema_version = 2\n{MINIMAL}"),
            format!("{MINIMAL}\n[params]\nmu = -1.0\n"),
        ];
        for text in &bad {
            assert!(
                matches!(RunConfig::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
        assert!(RunConfig::from_toml_str(&MINIMAL.replace("amplitude = 1e-3", "amplitude = 1e-3\nkmax = 10")).is_ok());
    }

    #[test]
    fn schema_errors_name_the_field() {
        let err = RunConfig::from_toml_str(&MINIMAL.replace("n = 32", "n = 32\nsize = 3")).unwrap_err();
        assert!(err.to_string().contains("size"), "{err}");
        let err = RunConfig::from_toml_str(&format!("{MINIMAL}\n[monitor]\naudits = [\"nope\"]\n")).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
        let err = RunConfig::from_toml_str("[grid]\ndim = 1\nn = 32\n").unwrap_err();
        assert!(err.to_string().contains("ic"), "{err}");
    }

    #[test]
    fn files_are_read_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("run.toml");
        std::fs::write(&toml_path, MINIMAL).unwrap();
        assert!(parse_config(&toml_path).is_ok());
        let json_path = dir.path().join("run.json");
        std::fs::write(&json_path, MINIMAL).unwrap();
        assert!(matches!(parse_config(&json_path), Err(Error::Config(_))));
        assert!(matches!(
            parse_config(dir.path().join("missing.toml")),
            Err(Error::Io { .. })
        ));
    }
}
