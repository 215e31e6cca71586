//! Measurement records and trajectory reconstruction.
//!
//! A record is the per-step time-averaged current `I_m`. Given the state's
//! eigenstate currents `I0`, `I1` and spread `sigma`, Bayes' rule multiplies
//! the odds `rho00 / rho11` by the Gaussian likelihood ratio, which in the
//! log-odds coordinate is the additive update
//! `z += (I0 - I1)(2 I_m - I0 - I1) / (4 sigma^2)`.

use crate::error::{Error, Result};
use crate::par;
use crate::rng::SeedSpec;
use crate::sde;
use crate::state::{Binning, CalibrationParams, Counts, DistributionSnapshot, ModelParams, QubitState, TrajectoryEnsemble};

/// Bayesian update of the state by one measured current.
pub fn update_measurement(state: QubitState, im: f64, cal: &CalibrationParams) -> QubitState {
    if state.is_absorbed() {
        return state;
    }
    let dz = (cal.i0 - cal.i1) * (2.0 * im - cal.i0 - cal.i1) / (4.0 * cal.sigma * cal.sigma);
    QubitState::from_z(state.z() + dz)
}

/// Relaxation over `dt`; the same map as [`sde::step_relaxation_exact`] with
/// `delta = dt / T1`.
pub fn update_relaxation(state: QubitState, dt: f64, t1: f64) -> Result<QubitState> {
    if !(t1 > 0.0) {
        return Err(Error::domain("T1", t1, "> 0"));
    }
    if !(dt >= 0.0) {
        return Err(Error::domain("dt", dt, ">= 0"));
    }
    sde::step_relaxation_exact(state, dt / t1)
}

/// Currents of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRecord {
    pub currents: Vec<f64>,
    pub dt: f64,
}

impl MeasurementRecord {
    pub fn new(currents: Vec<f64>, dt: f64) -> Result<Self> {
        if let Some(bad) = currents.iter().find(|c| !c.is_finite()) {
            return Err(Error::domain("current", *bad, "finite"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::domain("dt", dt, "> 0 and finite"));
        }
        Ok(MeasurementRecord { currents, dt })
    }
}

/// Everything a record file states about how its currents were produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordHeader {
    pub n_traj: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub i0: f64,
    pub i1: f64,
    pub sigma: f64,
    pub t1: f64,
    pub x0: f64,
    pub master_seed: u64,
}

impl RecordHeader {
    /// Calibration implied by the header (no heralding interval).
    pub fn calibration(&self) -> CalibrationParams {
        CalibrationParams {
            i0: self.i0,
            i1: self.i1,
            sigma: self.sigma,
            dt: self.dt,
            t1: self.t1,
            dts: 0.0,
        }
    }
}

/// Records of many runs, row-major by trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSet {
    pub header: RecordHeader,
    pub currents: Vec<f64>,
}

impl RecordSet {
    pub fn new(header: RecordHeader, currents: Vec<f64>) -> Result<Self> {
        let expected = header
            .n_traj
            .checked_mul(header.n_steps)
            .ok_or(Error::Resource(usize::MAX))?;
        if currents.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: currents.len(),
            });
        }
        if let Some(bad) = currents.iter().find(|c| !c.is_finite()) {
            return Err(Error::domain("current", *bad, "finite"));
        }
        header.calibration().validate()?;
        if !(0.0..=1.0).contains(&header.x0) {
            return Err(Error::domain("x0", header.x0, "[0, 1]"));
        }
        Ok(RecordSet { header, currents })
    }

    pub fn record(&self, i: usize) -> &[f64] {
        let n = self.header.n_steps;
        &self.currents[i * n..(i + 1) * n]
    }

    pub fn n_traj(&self) -> usize {
        self.header.n_traj
    }
}

#[inline]
fn trotter_update(s: QubitState, im: f64, cal: &CalibrationParams, half_delta: f64) -> QubitState {
    let s = sde::relax(s, half_delta);
    let s = update_measurement(s, im, cal);
    sde::relax(s, half_delta)
}

fn check_dt(record_dt: f64, cal: &CalibrationParams) -> Result<()> {
    if (record_dt - cal.dt).abs() > 1e-12 * cal.dt.abs() {
        return Err(Error::Inconsistent(format!(
            "record dt {record_dt} differs from calibration dt {}",
            cal.dt
        )));
    }
    Ok(())
}

/// `rho00` after each step of a record (plus the initial value), each step
/// being relax(dt/2), measure, relax(dt/2).
pub fn reconstruct_trajectory(record: &MeasurementRecord, cal: &CalibrationParams, x0: f64) -> Result<Vec<f64>> {
    cal.validate()?;
    check_dt(record.dt, cal)?;
    let half = 0.5 * cal.dt / cal.t1;
    let mut s = QubitState::from_rho00(x0)?;
    let mut out = Vec::with_capacity(record.currents.len() + 1);
    out.push(s.rho00());
    for &im in &record.currents {
        s = trotter_update(s, im, cal, half);
        out.push(s.rho00());
    }
    Ok(out)
}

const TRAJ_PER_TASK: usize = 256;

/// Reconstructs every record of a set.
pub fn reconstruct_ensemble(records: &RecordSet, cal: &CalibrationParams, x0: f64) -> Result<TrajectoryEnsemble> {
    cal.validate()?;
    let h = &records.header;
    check_dt(h.dt, cal)?;
    if records.currents.len() != h.n_traj * h.n_steps {
        return Err(Error::LengthMismatch {
            expected: h.n_traj * h.n_steps,
            actual: records.currents.len(),
        });
    }
    if h.n_traj == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let start = QubitState::from_rho00(x0)?;
    let half = 0.5 * cal.dt / cal.t1;
    let mut ens = TrajectoryEnsemble::zeroed(h.n_traj, h.n_steps, h.dt)?;
    let n_slices = ens.n_slices();
    par::for_each_chunk_mut(&mut ens.values, n_slices * TRAJ_PER_TASK, |task, chunk| {
        for (j, row) in chunk.chunks_mut(n_slices).enumerate() {
            let record = records.record(task * TRAJ_PER_TASK + j);
            let mut s = start;
            row[0] = s.rho00();
            for (slot, &im) in row[1..].iter_mut().zip(record) {
                s = trotter_update(s, im, cal, half);
                *slot = s.rho00();
            }
        }
    });
    Ok(ens)
}

/// Histograms of the reconstructed trajectories at the given slices, without
/// storing the trajectories.
pub fn reconstruct_histograms(
    records: &RecordSet,
    cal: &CalibrationParams,
    x0: f64,
    slices: &[usize],
    binning: Binning,
) -> Result<Vec<DistributionSnapshot>> {
    cal.validate()?;
    binning.validate()?;
    let h = &records.header;
    check_dt(h.dt, cal)?;
    if h.n_traj == 0 {
        return Err(Error::EmptyEnsemble);
    }
    if let Some(&bad) = slices.iter().find(|&&s| s > h.n_steps) {
        return Err(Error::SliceOutOfRange {
            slice: bad,
            n_slices: h.n_steps + 1,
        });
    }
    let start = QubitState::from_rho00(x0)?;
    let half = 0.5 * cal.dt / cal.t1;
    let last = slices.iter().copied().max().unwrap_or(0);
    let n_tasks = h.n_traj.div_ceil(TRAJ_PER_TASK);
    let partial = par::map_range(n_tasks, |task| {
        let mut counts = vec![Counts::new(binning.n_bins); slices.len()];
        let mut row = vec![0.0; last + 1];
        for i in task * TRAJ_PER_TASK..((task + 1) * TRAJ_PER_TASK).min(h.n_traj) {
            let record = records.record(i);
            let mut s = start;
            row[0] = s.rho00();
            for k in 0..last {
                s = trotter_update(s, record[k], cal, half);
                row[k + 1] = s.rho00();
            }
            for (c, &slice) in counts.iter_mut().zip(slices) {
                c.add(row[slice], &binning);
            }
        }
        counts
    });
    let mut total = vec![Counts::new(binning.n_bins); slices.len()];
    for counts in &partial {
        for (t, c) in total.iter_mut().zip(counts) {
            t.merge(c);
        }
    }
    Ok(total
        .iter()
        .zip(slices)
        .map(|(c, &slice)| c.snapshot(slice as f64 * h.dt, binning))
        .collect())
}

/// Synthetic records and the latent trajectories that produced them.
///
/// Each step relaxes the latent state by half a step, draws `I_m` from
/// `rho00 N(I0, sigma^2) + rho11 N(I1, sigma^2)` using that state, applies
/// the Bayesian update and relaxes by the other half. Reconstructing the
/// records with the same calibration reproduces the latent trajectories bit
/// for bit.
pub fn generate_records(
    params: &ModelParams,
    cal: &CalibrationParams,
    n_traj: usize,
    seeds: SeedSpec,
) -> Result<(RecordSet, TrajectoryEnsemble)> {
    params.validate()?;
    cal.validate()?;
    check_dt(params.dt, cal)?;
    let k_model = params.kappa();
    let k_cal = cal.kappa();
    if (k_model - k_cal).abs() > 1e-9 * k_cal.max(k_model) {
        return Err(Error::Inconsistent(format!(
            "g dt = {k_model} but the calibration implies {k_cal}"
        )));
    }
    if params.t1 != cal.t1 {
        return Err(Error::Inconsistent(format!(
            "model T1 {} differs from calibration T1 {}",
            params.t1, cal.t1
        )));
    }
    if n_traj == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let n_steps = params.n_steps;
    if n_steps > u32::MAX as usize {
        return Err(Error::domain("n_steps", n_steps as f64, "< 2^32"));
    }
    let start = QubitState::from_rho00(params.x0)?;
    let half = 0.5 * params.delta();
    let len = n_traj.checked_mul(n_steps).ok_or(Error::Resource(usize::MAX))?;
    let mut currents = Vec::new();
    currents.try_reserve_exact(len).map_err(|_| Error::Resource(len))?;
    currents.resize(len, 0.0);
    let mut ens = TrajectoryEnsemble::zeroed(n_traj, n_steps, params.dt)?;
    let n_slices = ens.n_slices();

    if n_steps == 0 {
        ens.values.iter_mut().for_each(|v| *v = start.rho00());
    } else {
        // both buffers are split on the same trajectory boundaries
        let mut tasks: Vec<(&mut [f64], &mut [f64])> = currents
            .chunks_mut(n_steps * TRAJ_PER_TASK)
            .zip(ens.values.chunks_mut(n_slices * TRAJ_PER_TASK))
            .collect();
        par::for_each_chunk_mut(&mut tasks, 1, |task, slot| {
            let (cur, vals) = &mut slot[0];
            for (j, (rec, row)) in cur.chunks_mut(n_steps).zip(vals.chunks_mut(n_slices)).enumerate() {
                let traj = (task * TRAJ_PER_TASK + j) as u64;
                let mut s = start;
                row[0] = s.rho00();
                for k in 0..n_steps {
                    let d = seeds.draw(traj, k as u32);
                    let s1 = sde::relax(s, half);
                    let centre = if d.uniform < s1.rho00() { cal.i0 } else { cal.i1 };
                    let im = centre + cal.sigma * d.normal;
                    rec[k] = im;
                    s = sde::relax(update_measurement(s1, im, cal), half);
                    row[k + 1] = s.rho00();
                }
            }
        });
    }
    let header = RecordHeader {
        n_traj,
        n_steps,
        dt: params.dt,
        i0: cal.i0,
        i1: cal.i1,
        sigma: cal.sigma,
        t1: params.t1,
        x0: params.x0,
        master_seed: seeds.master_seed,
    };
    Ok((RecordSet { header, currents }, ens))
}

/// Outcome of a heralding strong measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Herald {
    /// `true` if the ground state was found.
    pub ground: bool,
    /// Initial `rho00` assigned to the run.
    pub x0: f64,
}

/// Heralds run `trajectory` from a state with ground population `rho00`.
///
/// The outcome follows the Born weights. A ground outcome prepares
/// `rho00 = 1`; an excited outcome prepares `rho00 = 1 - exp(-dts / T1)`,
/// the probability of having decayed during the strong measurement.
pub fn herald(rho00: f64, cal: &CalibrationParams, seeds: SeedSpec, trajectory: u64) -> Result<Herald> {
    cal.validate()?;
    if !(0.0..=1.0).contains(&rho00) {
        return Err(Error::domain("rho00", rho00, "[0, 1]"));
    }
    let ground = seeds.herald_uniform(trajectory) < rho00;
    let x0 = if ground { 1.0 } else { cal.preparation_uncertainty() };
    Ok(Herald { ground, x0 })
}

/// Maximum-likelihood Gaussian parameters of a current distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianFit {
    pub center: f64,
    pub sigma: f64,
    pub center_err: f64,
    pub sigma_err: f64,
}

/// Sample mean and unbiased standard deviation, with standard errors
/// `sigma / sqrt(n)` and `sigma / sqrt(2 n)`.
pub fn fit_gaussian_current(samples: &[f64]) -> Result<GaussianFit> {
    if samples.len() < 100 {
        return Err(Error::domain("sample count", samples.len() as f64, ">= 100"));
    }
    if let Some(bad) = samples.iter().find(|c| !c.is_finite()) {
        return Err(Error::domain("current", *bad, "finite"));
    }
    let n = samples.len() as f64;
    let center = samples.iter().sum::<f64>() / n;
    let ss: f64 = samples.iter().map(|x| (x - center) * (x - center)).sum();
    let sigma = (ss / (n - 1.0)).sqrt();
    if !(sigma > 0.0) {
        return Err(Error::FitFailed("samples have zero variance".into()));
    }
    Ok(GaussianFit {
        center,
        sigma,
        center_err: sigma / n.sqrt(),
        sigma_err: sigma / (2.0 * n).sqrt(),
    })
}

/// Fitted relaxation time and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct T1Estimate {
    pub t1: f64,
    pub error: f64,
}

/// Least-squares fit of `<I>(t) = I0 + (I1 - I0) exp(-t / T1)` to the mean
/// current of an ensemble prepared in the excited state; `I0` and `I1` come
/// from the calibration.
pub fn estimate_t1(times: &[f64], mean_current: &[f64], cal: &CalibrationParams) -> Result<T1Estimate> {
    if times.len() != mean_current.len() {
        return Err(Error::LengthMismatch {
            expected: times.len(),
            actual: mean_current.len(),
        });
    }
    let di = cal.i1 - cal.i0;
    if di == 0.0 {
        return Err(Error::Inconsistent("I0 must differ from I1".into()));
    }
    // excited fraction, which should decay as exp(-t / T1)
    let frac: Vec<f64> = mean_current.iter().map(|i| (i - cal.i0) / di).collect();
    let usable: Vec<(f64, f64)> = times
        .iter()
        .zip(&frac)
        .filter(|(_, f)| **f > 0.0 && **f < 1.0 + 1e-12)
        .map(|(t, f)| (*t, f.ln()))
        .collect();
    if usable.len() < 2 {
        return Err(Error::FitFailed("series does not decay towards I0".into()));
    }
    let (ts, ls): (Vec<f64>, Vec<f64>) = usable.into_iter().unzip();
    let slope = crate::stats::linear_fit(&ts, &ls).slope;
    if !(slope < 0.0) || !slope.is_finite() {
        return Err(Error::FitFailed("series does not decay towards I0".into()));
    }
    // Gauss-Newton on the rate
    let mut rate = -slope;
    for _ in 0..50 {
        let (mut jtj, mut jtr) = (0.0, 0.0);
        for (&t, &f) in times.iter().zip(&frac) {
            let e = (-rate * t).exp();
            let r = f - e;
            let j = -t * e;
            jtj += j * j;
            jtr += j * r;
        }
        if jtj == 0.0 {
            return Err(Error::FitFailed("degenerate decay fit".into()));
        }
        let step = -jtr / jtj;
        rate -= step;
        if !(rate > 0.0) {
            return Err(Error::FitFailed("decay rate left the positive axis".into()));
        }
        if step.abs() <= 1e-15 * rate {
            break;
        }
    }
    let n = times.len();
    let (mut sse, mut jtj) = (0.0, 0.0);
    for (&t, &f) in times.iter().zip(&frac) {
        let e = (-rate * t).exp();
        sse += (f - e) * (f - e);
        jtj += t * t * e * e;
    }
    let rate_err = if n > 1 { (sse / (n - 1) as f64 / jtj).sqrt() } else { 0.0 };
    Ok(T1Estimate {
        t1: 1.0 / rate,
        error: rate_err / (rate * rate),
    })
}

/// Least-squares fit of `a + b exp(-rate t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpFit {
    pub a: f64,
    pub b: f64,
    pub rate: f64,
    /// Standard error of the asymptote `a` at the fitted rate.
    pub a_err: f64,
    pub sse: f64,
}

impl ExpFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.a + self.b * (-self.rate * t).exp()
    }
}

fn linear_for_rate(t: &[f64], y: &[f64], rate: f64) -> Option<(f64, f64, f64, f64)> {
    let n = t.len() as f64;
    let (mut se, mut see, mut sy, mut sey) = (0.0, 0.0, 0.0, 0.0);
    for (&ti, &yi) in t.iter().zip(y) {
        let e = (-rate * ti).exp();
        se += e;
        see += e * e;
        sy += yi;
        sey += e * yi;
    }
    let det = n * see - se * se;
    if !(det.abs() > 1e-14 * n * see) {
        return None;
    }
    let a = (see * sy - se * sey) / det;
    let b = (n * sey - se * sy) / det;
    let sse: f64 = t
        .iter()
        .zip(y)
        .map(|(&ti, &yi)| {
            let r = yi - a - b * (-rate * ti).exp();
            r * r
        })
        .sum();
    let var_a = if t.len() > 3 { sse / (n - 3.0) * see / det } else { f64::NAN };
    Some((a, b, sse, var_a.sqrt()))
}

/// Fits `a + b exp(-rate t)` by a one-dimensional search over the rate
/// (1e-3 to 1e2 per unit time) with `a`, `b` solved linearly.
pub fn fit_exponential(t: &[f64], y: &[f64]) -> Result<ExpFit> {
    if t.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: t.len(),
            actual: y.len(),
        });
    }
    if t.len() < 4 {
        return Err(Error::FitFailed("need at least four points".into()));
    }
    if t.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::FitFailed("non-finite input".into()));
    }
    let sse_at = |lr: f64| linear_for_rate(t, y, lr.exp()).map_or(f64::INFINITY, |r| r.2);
    let (lo, hi) = ((1e-3f64).ln(), (1e2f64).ln());
    let n_grid = 200;
    let grid: Vec<f64> = (0..=n_grid).map(|i| lo + (hi - lo) * i as f64 / n_grid as f64).collect();
    let best = (0..=n_grid)
        .min_by(|&i, &j| sse_at(grid[i]).total_cmp(&sse_at(grid[j])))
        .unwrap();
    if !sse_at(grid[best]).is_finite() {
        return Err(Error::FitFailed("no usable decay rate".into()));
    }
    // golden-section refinement
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(n_grid)]);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    for _ in 0..100 {
        if sse_at(c) < sse_at(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - phi * (b - a);
        d = a + phi * (b - a);
    }
    let rate = (0.5 * (a + b)).exp();
    let (fa, fb, sse, a_err) =
        linear_for_rate(t, y, rate).ok_or_else(|| Error::FitFailed("degenerate design".into()))?;
    Ok(ExpFit {
        a: fa,
        b: fb,
        rate,
        a_err,
        sse,
    })
}

/// Time-resolved calibration measured alongside the records.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSeries {
    pub t: Vec<f64>,
    pub i0: Vec<f64>,
    pub i1: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Effective currents for reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedCalibration {
    pub t: Vec<f64>,
    pub i0: Vec<f64>,
    pub i1: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Set when the transient fit failed and the raw series was kept.
    pub warning: Option<String>,
}

/// Observed values up to 2 us; afterwards the fitted `I0` plateau and the
/// fitted `I1` evaluated at 2.5 us. A constant tail is used as is.
pub fn preprocess_calibration(series: &CalibrationSeries) -> Result<PreprocessedCalibration> {
    let n = series.t.len();
    for (name, len) in [("I0", series.i0.len()), ("I1", series.i1.len()), ("sigma", series.sigma.len())] {
        if len != n {
            return Err(Error::Inconsistent(format!("{name} series has {len} samples, time base has {n}")));
        }
    }
    let span = series.t.last().copied().unwrap_or(0.0);
    if n == 0 || !(span >= 2.5) {
        return Err(Error::domain("calibration span (us)", span, ">= 2.5"));
    }
    let late: Vec<usize> = (0..n).filter(|&k| series.t[k] > 2.0).collect();
    let tail = |v: &[f64]| -> Vec<f64> { late.iter().map(|&k| v[k]).collect() };
    let t_late = tail(&series.t);
    let replacement = |v: &[f64], at: Option<f64>| -> Result<Vec<f64>> {
        let y = tail(v);
        if y.iter().all(|x| *x == y[0]) {
            return Ok(y);
        }
        let fit = fit_exponential(&t_late, &y)?;
        let value = at.map_or(fit.a, |t| fit.eval(t));
        Ok(vec![value; y.len()])
    };
    let mut out = PreprocessedCalibration {
        t: series.t.clone(),
        i0: series.i0.clone(),
        i1: series.i1.clone(),
        sigma: series.sigma.clone(),
        warning: None,
    };
    match (replacement(&series.i0, None), replacement(&series.i1, Some(2.5))) {
        (Ok(new0), Ok(new1)) => {
            for (j, &k) in late.iter().enumerate() {
                out.i0[k] = new0[j];
                out.i1[k] = new1[j];
            }
        }
        (Err(e), _) | (_, Err(e)) => {
            let msg = format!("transient fit failed, using raw calibration: {e}");
            log::warn!("{msg}");
            out.warning = Some(msg);
        }
    }
    Ok(out)
}

/// Observed current spread split into the ideal (quantum-limited) part and
/// added amplifier noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfficiencyModel {
    pub sigma_obs: f64,
    pub sigma_ideal: f64,
    pub sigma_noise: f64,
    pub eta: f64,
}

impl EfficiencyModel {
    pub fn from_parts(sigma_ideal: f64, sigma_noise: f64) -> Result<Self> {
        if !(sigma_ideal > 0.0) {
            return Err(Error::domain("sigma_ideal", sigma_ideal, "> 0"));
        }
        if !(sigma_noise >= 0.0) {
            return Err(Error::domain("sigma_noise", sigma_noise, ">= 0"));
        }
        let obs2 = sigma_ideal * sigma_ideal + sigma_noise * sigma_noise;
        Ok(EfficiencyModel {
            sigma_obs: obs2.sqrt(),
            sigma_ideal,
            sigma_noise,
            eta: sigma_ideal * sigma_ideal / obs2,
        })
    }
}

/// Efficiency implied by a fitted `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfficiencyEstimate {
    pub eta: f64,
    /// `None` when `eta > 1`, which no noise split can explain.
    pub model: Option<EfficiencyModel>,
}

/// `eta = n_steps kappa_obs / tau_fitted` with
/// `kappa_obs = (I0 - I1)^2 / (4 sigma_obs^2)`.
pub fn estimate_efficiency(tau_fitted: f64, cal: &CalibrationParams, n_steps: usize) -> Result<EfficiencyEstimate> {
    if !(tau_fitted > 0.0 && tau_fitted.is_finite()) {
        return Err(Error::domain("tau", tau_fitted, "> 0"));
    }
    cal.validate()?;
    let eta = n_steps as f64 * cal.kappa() / tau_fitted;
    let model = if eta <= 1.0 {
        let ideal = cal.sigma * eta.sqrt();
        let noise = cal.sigma * (1.0 - eta).max(0.0).sqrt();
        Some(EfficiencyModel {
            sigma_obs: cal.sigma,
            sigma_ideal: ideal,
            sigma_noise: noise,
            eta,
        })
    } else {
        log::warn!("efficiency {eta} exceeds 1: model and data disagree");
        None
    };
    Ok(EfficiencyEstimate { eta, model })
}
