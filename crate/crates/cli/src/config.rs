//! Run configuration: a TOML file, `--key=value` overrides (dotted keys
//! address tables, e.g. `--model.x0=0.5`), and the manifest written back out.

use std::path::{Path, PathBuf};

use qtraj_core::fitting::{FluctuationRanges, TauScan};
use qtraj_core::fokker_planck::FpConfig;
use qtraj_core::{Binning, CalibrationParams, ModelParams};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Generate,
    Simulate,
    SolveFp,
    Reconstruct,
    Fit,
    Calibrate,
    Report,
}

impl Mode {
    pub fn needs_seed(self) -> bool {
        matches!(self, Mode::Generate | Mode::Simulate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RecordFormat {
    #[default]
    Binary,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FitModel {
    /// Analytic density for infinite T1, Fokker-Planck otherwise.
    #[default]
    Auto,
    Analytic,
    FokkerPlanck,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub x0: f64,
    pub g_per_us: f64,
    pub t1_us: f64,
    pub dt_us: f64,
    pub n_steps: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            x0: 0.305,
            g_per_us: 0.03,
            t1_us: 45.0,
            dt_us: 0.5,
            n_steps: 80,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub i0: f64,
    pub i1: f64,
    pub sigma: f64,
    pub dts_us: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            i0: 128.443,
            i1: 127.856,
            sigma: 5.56,
            dts_us: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub n_traj: usize,
    /// Output times; empty means the final time only.
    pub slices_us: Vec<f64>,
    pub n_bins: usize,
    pub record_format: RecordFormat,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            n_traj: 100_000,
            slices_us: Vec::new(),
            n_bins: 100,
            record_format: RecordFormat::Binary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSection {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for ScanSection {
    fn default() -> Self {
        let s = TauScan::default();
        ScanSection {
            start: s.start,
            stop: s.stop,
            step: s.step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub model: FitModel,
    /// Trajectories per histogram of the Monte Carlo model.
    pub mc_traj: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            model: FitModel::Auto,
            mc_traj: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpSection {
    pub n_cells: usize,
    pub z_max: f64,
    pub cfl: f64,
    /// Relaxation sub-step as a fraction of T1.
    pub relax_step: f64,
}

impl Default for FpSection {
    fn default() -> Self {
        let c = FpConfig::default();
        FpSection {
            n_cells: c.n_cells,
            z_max: c.z_max,
            cfl: c.cfl,
            relax_step: c.relax_step,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystematicsSection {
    pub x0: f64,
    pub t1_us: f64,
    pub i0: f64,
    pub i1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateSection {
    /// Records of runs prepared in the excited state.
    pub excited_input: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Existing fit report; the fit is redone when absent.
    pub fit_report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub input: Option<PathBuf>,
    pub output: PathBuf,
    pub model: ModelSection,
    pub calibration: CalibrationSection,
    pub run: RunSection,
    pub scan: ScanSection,
    pub fit: FitSection,
    pub fp: FpSection,
    pub systematics: SystematicsSection,
    pub calibrate: CalibrateSection,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: None,
            seed: None,
            input: None,
            output: PathBuf::from("."),
            model: ModelSection::default(),
            calibration: CalibrationSection::default(),
            run: RunSection::default(),
            scan: ScanSection::default(),
            fit: FitSection::default(),
            fp: FpSection::default(),
            systematics: SystematicsSection::default(),
            calibrate: CalibrateSection::default(),
            report: ReportSection::default(),
        }
    }
}

/// Parses a command-line value as a TOML value, falling back to a plain
/// string so paths need no quoting.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| CliError::Usage(format!("empty key in --{key}")))?;
    let mut t = table;
    for p in parts {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("--{key}: '{p}' is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Loads `--config=FILE` (if given) and applies every other `--key=value`.
pub fn resolve(mode: Option<Mode>, args: &[String]) -> Result<RunConfig, CliError> {
    let mut overrides = Vec::new();
    let mut config_path = None;
    for arg in args {
        let body = arg
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("expected --key=value, got '{arg}'")))?;
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected --key=value, got '{arg}'")))?;
        if key == "config" {
            config_path = Some(PathBuf::from(value));
        } else {
            overrides.push((key.to_string(), value.to_string()));
        }
    }
    let mut table = match &config_path {
        Some(p) => read_table(p)?,
        None => toml::Table::new(),
    };
    for (k, v) in overrides {
        set_dotted(&mut table, &k, parse_value(&v))?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid configuration: {}", e.message())))?;
    match (mode, cfg.mode) {
        (Some(m), Some(c)) if m != c => {
            return Err(CliError::Usage(format!("config mode {c:?} conflicts with subcommand {m:?}")));
        }
        (Some(m), _) => cfg.mode = Some(m),
        (None, None) => return Err(CliError::Usage("`run` needs a mode in the configuration".into())),
        (None, Some(_)) => {}
    }
    let mode = cfg.mode.expect("mode resolved above");
    if mode.needs_seed() && cfg.seed.is_none() {
        return Err(CliError::Usage(format!("--seed is required for {mode:?}")));
    }
    Ok(cfg)
}

fn read_table(path: &Path) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.parse::<toml::Table>().map_err(|e| {
        let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
        CliError::Usage(format!(
            "{}{}: {}",
            path.display(),
            line.map(|l| format!(" line {l}")).unwrap_or_default(),
            e.message()
        ))
    })
}

impl RunConfig {
    pub fn mode(&self) -> Mode {
        self.mode.expect("resolved configs carry a mode")
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialise configuration: {e}")))
    }

    pub fn model_params(&self) -> ModelParams {
        ModelParams {
            g: self.model.g_per_us,
            t1: self.model.t1_us,
            dt: self.model.dt_us,
            x0: self.model.x0,
            n_steps: self.model.n_steps,
        }
    }

    pub fn calibration_params(&self) -> CalibrationParams {
        CalibrationParams {
            i0: self.calibration.i0,
            i1: self.calibration.i1,
            sigma: self.calibration.sigma,
            dt: self.model.dt_us,
            t1: self.model.t1_us,
            dts: self.calibration.dts_us,
        }
    }

    pub fn binning(&self) -> Result<Binning, CliError> {
        if self.run.n_bins == 0 {
            return Err(CliError::Usage("run.n_bins must be positive".into()));
        }
        Ok(Binning {
            n_bins: self.run.n_bins,
            bin_width: 1.0 / self.run.n_bins as f64,
        })
    }

    pub fn scan(&self) -> TauScan {
        TauScan {
            start: self.scan.start,
            stop: self.scan.stop,
            step: self.scan.step,
        }
    }

    pub fn fp_config(&self) -> FpConfig {
        FpConfig {
            n_cells: self.fp.n_cells,
            z_max: self.fp.z_max,
            cfl: self.fp.cfl,
            relax_step: self.fp.relax_step,
        }
    }

    pub fn ranges(&self) -> FluctuationRanges {
        FluctuationRanges {
            x0: self.systematics.x0,
            t1: self.systematics.t1_us,
            i0: self.systematics.i0,
            i1: self.systematics.i1,
        }
    }

    pub fn input(&self) -> Result<&Path, CliError> {
        self.input
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("--input is required for {:?}", self.mode())))
    }

    /// Step indices of the requested output times.
    pub fn slice_steps(&self, dt: f64, n_steps: usize) -> Result<Vec<usize>, CliError> {
        if self.run.slices_us.is_empty() {
            return Ok(vec![n_steps]);
        }
        self.run
            .slices_us
            .iter()
            .map(|&t| {
                let k = (t / dt).round();
                if t.is_nan() || t < 0.0 || (k * dt - t).abs() > 1e-9 * t.max(1.0) || k as usize > n_steps {
                    return Err(CliError::Usage(format!(
                        "slice t = {t} us is not a step time in [0, {}] with dt = {dt}",
                        n_steps as f64 * dt
                    )));
                }
                Ok(k as usize)
            })
            .collect()
    }
}
