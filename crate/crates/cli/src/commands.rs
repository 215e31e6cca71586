use std::path::{Path, PathBuf};

use qtraj_core::bayesian::{
    estimate_efficiency, estimate_t1, fit_exponential, fit_gaussian_current, generate_records, preprocess_calibration,
    reconstruct_ensemble, reconstruct_histograms, CalibrationSeries, RecordSet,
};
use qtraj_core::fitting::{fit_tau, systematic_errors, AnalyticModel, FitResult, FpModel, ModelGenerator, MonteCarloModel};
use qtraj_core::fokker_planck::{fp_snapshot_to_bins, solve_fp, InitialCondition};
use qtraj_core::io::{
    ensemble_to_binary, histogram_to_text, parse_records, records_to_binary, records_to_text, write_atomic, FitReport,
    SliceReport,
};
use qtraj_core::sde::simulate_ensemble;
use qtraj_core::state::histogram_from_values;
use qtraj_core::{Binning, CalibrationParams, DistributionSnapshot, SeedSpec};
use serde::Serialize;

use crate::config::{FitModel, Mode, RecordFormat, RunConfig};
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.toml";

struct Output<'a> {
    dir: &'a Path,
}

impl Output<'_> {
    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes).map_err(|e| CliError::input(&path, e))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    fn histogram(&self, name: &str, s: &DistributionSnapshot) -> Result<PathBuf, CliError> {
        self.write(name, histogram_to_text(s).as_bytes())
    }
}

fn slice_name(prefix: &str, step: usize) -> String {
    format!("{prefix}_slice_{step:05}.csv")
}

/// Writes the manifest, then runs the configured command.
pub fn execute(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.output).map_err(|e| CliError::io(&cfg.output, e))?;
    let out = Output { dir: &cfg.output };
    out.write(MANIFEST, cfg.to_toml()?.as_bytes())?;
    match cfg.mode() {
        Mode::Generate => generate(cfg, &out),
        Mode::Simulate => simulate(cfg, &out),
        Mode::SolveFp => solve(cfg, &out),
        Mode::Reconstruct => reconstruct(cfg, &out),
        Mode::Fit => fit(cfg, &out),
        Mode::Calibrate => calibrate(cfg, &out),
        Mode::Report => report(cfg, &out),
    }
}

fn seed(cfg: &RunConfig) -> Result<SeedSpec, CliError> {
    cfg.seed
        .map(SeedSpec::new)
        .ok_or_else(|| CliError::Usage(format!("--seed is required for {:?}", cfg.mode())))
}

fn read_records(path: &Path) -> Result<RecordSet, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_records(&bytes).map_err(|e| CliError::input(path, e))
}

fn generate(cfg: &RunConfig, out: &Output) -> Result<(), CliError> {
    let cal = cfg.calibration_params();
    cal.validate()?;
    let params = cal.model_params(cfg.model.x0, cfg.model.n_steps);
    log::info!("record-implied g = {} per us (model.g_per_us is not used)", params.g);
    let (records, latent) = generate_records(&params, &cal, cfg.run.n_traj, seed(cfg)?)?;
    match cfg.run.record_format {
        RecordFormat::Binary => out.write("records.qrec", &records_to_binary(&records))?,
        RecordFormat::Text => out.write("records.csv", records_to_text(&records).as_bytes())?,
    };
    out.write("latent.qens", &ensemble_to_binary(&latent))?;
    Ok(())
}

fn simulate(cfg: &RunConfig, out: &Output) -> Result<(), CliError> {
    let params = cfg.model_params();
    let binning = cfg.binning()?;
    let steps = cfg.slice_steps(params.dt, params.n_steps)?;
    let ens = simulate_ensemble(&params, cfg.run.n_traj, seed(cfg)?)?;
    out.write("ensemble.qens", &ensemble_to_binary(&ens))?;
    for k in steps {
        let h = histogram_from_values(&ens.slice(k)?, ens.time(k), binning)?;
        out.histogram(&slice_name("sim", k), &h)?;
    }
    Ok(())
}

fn solve(cfg: &RunConfig, out: &Output) -> Result<(), CliError> {
    let params = cfg.model_params();
    params.validate()?;
    let binning = cfg.binning()?;
    let steps = cfg.slice_steps(params.dt, params.n_steps)?;
    let times: Vec<f64> = steps.iter().map(|&k| k as f64 * params.dt).collect();
    let grids = solve_fp(InitialCondition::Delta(params.x0), params.g, params.t1, &times, &cfg.fp_config())?;
    for (k, grid) in steps.iter().zip(&grids) {
        out.histogram(&slice_name("fp", *k), &fp_snapshot_to_bins(grid, binning)?)?;
    }
    Ok(())
}

fn reconstruct(cfg: &RunConfig, out: &Output) -> Result<(), CliError> {
    let records = read_records(cfg.input()?)?;
    let h = records.header;
    let binning = cfg.binning()?;
    let steps = cfg.slice_steps(h.dt, h.n_steps)?;
    let ens = reconstruct_ensemble(&records, &h.calibration(), h.x0)?;
    out.write("reconstructed.qens", &ensemble_to_binary(&ens))?;
    for k in steps {
        let hist = histogram_from_values(&ens.slice(k)?, ens.time(k), binning)?;
        out.histogram(&slice_name("obs", k), &hist)?;
    }
    Ok(())
}

/// Reconstructed histograms at the configured slices, with systematic
/// errors folded in when any fluctuation range is non-zero.
fn observed(cfg: &RunConfig, records: &RecordSet, binning: Binning) -> Result<(Vec<usize>, Vec<DistributionSnapshot>), CliError> {
    let h = records.header;
    let cal = h.calibration();
    let steps = cfg.slice_steps(h.dt, h.n_steps)?;
    let mut obs = reconstruct_histograms(records, &cal, h.x0, &steps, binning)?;
    let ranges = cfg.ranges();
    if ranges != Default::default() {
        let budget = systematic_errors(records, &cal, h.x0, &ranges, &steps, binning)?;
        budget.apply(&mut obs)?;
    }
    Ok((steps, obs))
}

fn model(cfg: &RunConfig, x0: f64, cal: &CalibrationParams) -> Result<Box<dyn ModelGenerator>, CliError> {
    let kind = match cfg.fit.model {
        FitModel::Auto if cal.t1.is_infinite() => FitModel::Analytic,
        FitModel::Auto => FitModel::FokkerPlanck,
        k => k,
    };
    Ok(match kind {
        FitModel::Analytic => {
            if cal.t1.is_finite() {
                log::warn!("analytic model ignores T1 = {} us", cal.t1);
            }
            Box::new(AnalyticModel { x0 })
        }
        FitModel::FokkerPlanck => Box::new(FpModel {
            x0,
            t1: cal.t1,
            config: cfg.fp_config(),
        }),
        FitModel::MonteCarlo => Box::new(MonteCarloModel {
            x0,
            t1: cal.t1,
            dt: cal.dt,
            n_traj: cfg.fit.mc_traj,
            seeds: seed(cfg)?,
        }),
        FitModel::Auto => unreachable!("resolved above"),
    })
}

fn fit_records(cfg: &RunConfig, records: &RecordSet, obs: &[DistributionSnapshot], steps: &[usize]) -> Result<Vec<FitResult>, CliError> {
    let h = records.header;
    let cal = h.calibration();
    let results = fit_tau(obs, model(cfg, h.x0, &cal)?.as_ref(), &cfg.scan())?;
    for (r, &k) in results.iter().zip(steps) {
        if k > 0 && r.tau_best > 0.0 {
            let eff = estimate_efficiency(r.tau_best, &cal, k)?;
            log::info!("t = {} us: tau = {} (eta = {})", r.t, r.tau_best, eff.eta);
        }
    }
    Ok(results)
}

fn fit(cfg: &RunConfig, out: &Output) -> Result<(), CliError> {
    let records = read_records(cfg.input()?)?;
    let binning = cfg.binning()?;
    let (steps, obs) = observed(cfg, &records, binning)?;
    let results = fit_records(cfg, &records, &obs, &steps)?;
    out.write("fit_report.toml", FitReport::from_results(&results).to_toml()?.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct GroundCalibration {
    i0: f64,
    i0_err: f64,
    sigma: f64,
    sigma_err: f64,
    n_samples: usize,
}

#[derive(Serialize)]
struct ExcitedCalibration {
    i1: f64,
    t1_us: f64,
    t1_err_us: f64,
}

#[derive(Serialize)]
struct CalibrationReport {
    ground: GroundCalibration,
    #[serde(skip_serializing_if = "Option::is_none")]
    excited: Option<ExcitedCalibration>,
}

/// Per-step mean and standard deviation of the currents.
fn step_moments(records: &RecordSet) -> (Vec<f64>, Vec<f64>) {
    let (n, m) = (records.n_traj(), records.header.n_steps);
    let mut mean = vec![0.0; m];
    let mut sq = vec![0.0; m];
    for i in 0..n {
        for (k, c) in records.record(i).iter().enumerate() {
            mean[k] += c;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    for i in 0..n {
        for (k, c) in records.record(i).iter().enumerate() {
            sq[k] += (c - mean[k]) * (c - mean[k]);
        }
    }
    let sd = sq.iter().map(|s| (s / (n.max(2) - 1) as f64).sqrt()).collect();
    (mean, sd)
}

/// Ground-state runs give `I0` and `sigma`; optional excited-state runs give
/// `I1` and `T1` from the decay of the mean current.
fn calibrate(cfg: &RunConfig, out: &Output) -> Result<(), CliError> {
    let ground = read_records(cfg.input()?)?;
    let g = fit_gaussian_current(&ground.currents)?;
    let mut report = CalibrationReport {
        ground: GroundCalibration {
            i0: g.center,
            i0_err: g.center_err,
            sigma: g.sigma,
            sigma_err: g.sigma_err,
            n_samples: ground.currents.len(),
        },
        excited: None,
    };
    if let Some(path) = &cfg.calibrate.excited_input {
        let excited = read_records(path)?;
        let dt = excited.header.dt;
        let times: Vec<f64> = (0..excited.header.n_steps).map(|k| (k as f64 + 0.5) * dt).collect();
        let (mean1, _) = step_moments(&excited);
        let decay = fit_exponential(&times, &mean1)?;
        let cal = CalibrationParams {
            i0: g.center,
            i1: decay.a + decay.b,
            sigma: g.sigma,
            dt,
            t1: f64::INFINITY,
            dts: cfg.calibration.dts_us,
        };
        let t1 = estimate_t1(&times, &mean1, &cal)?;
        report.excited = Some(ExcitedCalibration {
            i1: cal.i1,
            t1_us: t1.t1,
            t1_err_us: t1.error,
        });
        if ground.header.n_steps == excited.header.n_steps && ground.header.dt == dt {
            let (mean0, sd0) = step_moments(&ground);
            let series = CalibrationSeries {
                t: times,
                i0: mean0,
                i1: mean1,
                sigma: sd0,
            };
            match preprocess_calibration(&series) {
                Ok(p) => {
                    let mut text = String::from("t_us,i0,i1,sigma\n");
                    for k in 0..p.t.len() {
                        text.push_str(&format!("{},{},{},{}\n", p.t[k], p.i0[k], p.i1[k], p.sigma[k]));
                    }
                    out.write("calibration_series.csv", text.as_bytes())?;
                }
                Err(e) => log::warn!("no calibration series written: {e}"),
            }
        } else {
            log::warn!("ground and excited records differ in timing; no calibration series written");
        }
    }
    let text = toml::to_string(&report).map_err(|e| CliError::Usage(format!("cannot serialise calibration: {e}")))?;
    out.write("calibration.toml", text.as_bytes())?;
    Ok(())
}

/// Observed, best-fit and infinite-T1 histograms for every slice.
fn report(cfg: &RunConfig, out: &Output) -> Result<(), CliError> {
    let records = read_records(cfg.input()?)?;
    let h = records.header;
    let binning = cfg.binning()?;
    let (steps, obs) = observed(cfg, &records, binning)?;
    let fits: Vec<SliceReport> = match &cfg.report.fit_report {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            FitReport::parse(&text).map_err(|e| CliError::input(path, e))?.slice
        }
        None => FitReport::from_results(&fit_records(cfg, &records, &obs, &steps)?).slice,
    };
    let best_model = model(cfg, h.x0, &h.calibration())?;
    let no_relaxation = AnalyticModel { x0: h.x0 };
    for (o, &k) in obs.iter().zip(&steps) {
        let fit = fits
            .iter()
            .find(|f| (f.t_us - o.t).abs() <= 1e-9 * o.t.max(1.0))
            .ok_or_else(|| CliError::Usage(format!("fit report has no slice at t = {} us", o.t)))?;
        out.histogram(&slice_name("observed", k), o)?;
        out.histogram(&slice_name("best_fit", k), &best_model.snapshot(o.t, fit.tau_best, binning)?)?;
        out.histogram(&slice_name("no_relaxation", k), &no_relaxation.snapshot(o.t, fit.tau_best, binning)?)?;
    }
    Ok(())
}
