//! WebAssembly bindings for the static page in `www/`.
//!
//! Histogram outputs are laid out as `[mass0, bin_0 .. bin_{n-1}, mass1]`,
//! each bin holding probability mass.

use qtraj_core::bayesian::{generate_records, reconstruct_trajectory, MeasurementRecord};
use qtraj_core::fokker_planck::analytic_distribution_rho;
use qtraj_core::sde::simulate_final;
use qtraj_core::state::histogram_from_values;
use qtraj_core::{Binning, CalibrationParams, DistributionSnapshot, ModelParams, SeedSpec};
use wasm_bindgen::prelude::*;

fn js_err(e: qtraj_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn binning(n_bins: usize) -> Result<Binning, JsError> {
    if n_bins == 0 || n_bins > 10_000 {
        return Err(JsError::new("n_bins must be in 1..=10000"));
    }
    Ok(Binning {
        n_bins,
        bin_width: 1.0 / n_bins as f64,
    })
}

fn flatten(s: &DistributionSnapshot) -> Vec<f64> {
    let mut out = Vec::with_capacity(s.n_bins() + 2);
    out.push(s.mass0);
    out.extend_from_slice(&s.density);
    out.push(s.mass1);
    out
}

/// Closed-form `rho00` distribution for infinite `T1`.
#[wasm_bindgen]
pub fn analytic_histogram(x0: f64, tau: f64, n_bins: usize) -> Result<Vec<f64>, JsError> {
    let d = analytic_distribution_rho(x0, tau).map_err(js_err)?;
    Ok(flatten(&d.snapshot(binning(n_bins)?, 0.0).map_err(js_err)?))
}

/// Monte Carlo histogram of `rho00` after `n_steps` steps of `dt_us`.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn simulate_histogram(
    x0: f64,
    g_per_us: f64,
    t1_us: f64,
    dt_us: f64,
    n_steps: usize,
    n_traj: usize,
    seed: u32,
    n_bins: usize,
) -> Result<Vec<f64>, JsError> {
    let t1 = if t1_us > 0.0 { t1_us } else { f64::INFINITY };
    let params = ModelParams {
        g: g_per_us,
        t1,
        dt: dt_us,
        x0,
        n_steps,
    };
    let values = simulate_final(&params, n_traj, SeedSpec::new(seed.into())).map_err(js_err)?;
    let t = params.duration();
    Ok(flatten(&histogram_from_values(&values, t, binning(n_bins)?).map_err(js_err)?))
}

/// One synthetic measurement record and the trajectory rebuilt from it,
/// concatenated: `n_steps` currents, then `n_steps + 1` values of `rho00`.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn record_and_trajectory(
    x0: f64,
    i0: f64,
    i1: f64,
    sigma: f64,
    t1_us: f64,
    dt_us: f64,
    n_steps: usize,
    seed: u32,
) -> Result<Vec<f64>, JsError> {
    let cal = CalibrationParams {
        i0,
        i1,
        sigma,
        dt: dt_us,
        t1: if t1_us > 0.0 { t1_us } else { f64::INFINITY },
        dts: 0.0,
    };
    cal.validate().map_err(js_err)?;
    let params = cal.model_params(x0, n_steps);
    let (records, _) = generate_records(&params, &cal, 1, SeedSpec::new(seed.into())).map_err(js_err)?;
    let record = MeasurementRecord::new(records.record(0).to_vec(), dt_us).map_err(js_err)?;
    let trajectory = reconstruct_trajectory(&record, &cal, x0).map_err(js_err)?;
    let mut out = record.currents;
    out.extend(trajectory);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts() {
        let a = analytic_histogram(0.3, 0.5, 50).unwrap();
        assert_eq!(a.len(), 52);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let s = simulate_histogram(0.3, 0.05, 0.0, 0.5, 20, 2000, 1, 50).unwrap();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let r = record_and_trajectory(0.5, 1.0, -1.0, 2.0, 45.0, 0.5, 10, 3).unwrap();
        assert_eq!(r.len(), 21);
        assert_eq!(r[10], 0.5);
    }
}
