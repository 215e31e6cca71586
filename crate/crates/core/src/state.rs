//! Shared domain types: the qubit state in log-odds form, parameter sets,
//! trajectory ensembles and binned distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Absorption cap on `|z|`. `tanh(30)` is within 1e-26 of one, far below the
/// resolution of `rho00` in double precision.
pub const Z_CAP: f64 = 30.0;

/// Diagonal state of the measured qubit, stored as the log-odds coordinate
/// `z = atanh(rho00 - rho11) = 0.5 ln(rho00 / rho11)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct QubitState {
    z: f64,
}

impl QubitState {
    /// State at log-odds `z`, clamped to `[-Z_CAP, Z_CAP]`.
    #[inline]
    pub fn from_z(z: f64) -> Self {
        QubitState {
            z: z.clamp(-Z_CAP, Z_CAP),
        }
    }

    pub fn from_rho00(rho00: f64) -> Result<Self> {
        to_logodds(rho00).map(|z| QubitState { z })
    }

    pub const fn ground() -> Self {
        QubitState { z: Z_CAP }
    }

    pub const fn excited() -> Self {
        QubitState { z: -Z_CAP }
    }

    #[inline]
    pub fn z(&self) -> f64 {
        self.z
    }

    #[inline]
    pub fn rho00(&self) -> f64 {
        to_rho(self.z)
    }

    #[inline]
    pub fn rho11(&self) -> f64 {
        to_rho(-self.z)
    }

    /// True at the cap, where diffusion has no further effect.
    #[inline]
    pub fn is_absorbed(&self) -> bool {
        self.z.abs() >= Z_CAP
    }
}

/// `atanh(2 rho00 - 1)`, clamped to `±Z_CAP`.
pub fn to_logodds(rho00: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho00) {
        return Err(Error::domain("rho00", rho00, "[0, 1]"));
    }
    if rho00 == 0.0 {
        return Ok(-Z_CAP);
    }
    if rho00 == 1.0 {
        return Ok(Z_CAP);
    }
    // ln(rho00) - ln(1 - rho00) keeps full relative precision at both ends;
    // 1 - rho00 is exact for rho00 >= 0.5.
    let z = 0.5 * (rho00.ln() - (-rho00).ln_1p());
    Ok(z.clamp(-Z_CAP, Z_CAP))
}

/// `(1 + tanh z) / 2` in logistic form, exact 0 and 1 at the caps.
#[inline]
pub fn to_rho(z: f64) -> f64 {
    if z >= Z_CAP {
        1.0
    } else if z <= -Z_CAP {
        0.0
    } else {
        1.0 / (1.0 + (-2.0 * z).exp())
    }
}

fn check_positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && !v.is_nan() {
        Ok(())
    } else {
        Err(Error::domain(name, v, "> 0"))
    }
}

fn check_finite(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(name, v, "finite"))
    }
}

/// Theory-side parameters. Times are in microseconds, `g` in 1/us.
///
/// The noise spectral density is not a parameter: fixing `g S = 1` is what
/// makes the Born rule a constant of the evolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub g: f64,
    /// Relaxation time; `f64::INFINITY` disables relaxation.
    pub t1: f64,
    pub dt: f64,
    pub x0: f64,
    pub n_steps: usize,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.g >= 0.0 && self.g.is_finite()) {
            return Err(Error::domain("g", self.g, ">= 0 and finite"));
        }
        check_positive("T1", self.t1)?;
        check_positive("dt", self.dt)?;
        check_finite("dt", self.dt)?;
        if !(0.0..=1.0).contains(&self.x0) {
            return Err(Error::domain("x0", self.x0, "[0, 1]"));
        }
        Ok(())
    }

    /// Per-step measurement strength `g dt`.
    pub fn kappa(&self) -> f64 {
        self.g * self.dt
    }

    /// Per-step relaxation exponent `dt / T1`.
    pub fn delta(&self) -> f64 {
        self.dt / self.t1
    }

    /// Evolution parameter `tau = g t` after `step` steps.
    pub fn tau_at(&self, step: usize) -> f64 {
        self.kappa() * step as f64
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.n_steps as f64
    }
}

/// Experiment-side calibration: eigenstate current centres, per-step current
/// spread and timing. Times in microseconds, currents in arbitrary units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub i0: f64,
    pub i1: f64,
    pub sigma: f64,
    pub dt: f64,
    pub t1: f64,
    /// Duration of the heralding strong measurement.
    pub dts: f64,
}

impl CalibrationParams {
    pub fn validate(&self) -> Result<()> {
        check_finite("I0", self.i0)?;
        check_finite("I1", self.i1)?;
        check_positive("sigma", self.sigma)?;
        check_finite("sigma", self.sigma)?;
        if self.i0 == self.i1 {
            return Err(Error::Inconsistent("I0 must differ from I1".into()));
        }
        check_positive("dt", self.dt)?;
        check_positive("T1", self.t1)?;
        if !(self.dts >= 0.0) {
            return Err(Error::domain("dts", self.dts, ">= 0"));
        }
        Ok(())
    }

    /// Per-step measurement strength `(I0 - I1)^2 / (4 sigma^2)`.
    pub fn kappa(&self) -> f64 {
        let di = self.i0 - self.i1;
        di * di / (4.0 * self.sigma * self.sigma)
    }

    /// Uncertainty of a heralded initial state, `1 - exp(-dts / T1)`.
    pub fn preparation_uncertainty(&self) -> f64 {
        -(-self.dts / self.t1).exp_m1()
    }

    /// Model parameters whose `g dt` equals the record-implied strength.
    pub fn model_params(&self, x0: f64, n_steps: usize) -> ModelParams {
        ModelParams {
            g: self.kappa() / self.dt,
            t1: self.t1,
            dt: self.dt,
            x0,
            n_steps,
        }
    }
}

/// `rho00` of `n_traj` trajectories at `n_steps + 1` time slices (slice 0 is
/// the initial state), stored row-major by trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub n_traj: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub values: Vec<f64>,
}

impl TrajectoryEnsemble {
    pub fn new(n_traj: usize, n_steps: usize, dt: f64, values: Vec<f64>) -> Result<Self> {
        let expected = n_traj * (n_steps + 1);
        if values.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: values.len(),
            });
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain("rho00", *bad, "[0, 1]"));
        }
        Ok(TrajectoryEnsemble {
            n_traj,
            n_steps,
            dt,
            values,
        })
    }

    /// Allocates zeroed storage, reporting allocation failure as an error.
    pub(crate) fn zeroed(n_traj: usize, n_steps: usize, dt: f64) -> Result<Self> {
        let len = n_traj
            .checked_mul(n_steps + 1)
            .ok_or(Error::Resource(usize::MAX))?;
        let mut values = Vec::new();
        values
            .try_reserve_exact(len)
            .map_err(|_| Error::Resource(len))?;
        values.resize(len, 0.0);
        Ok(TrajectoryEnsemble {
            n_traj,
            n_steps,
            dt,
            values,
        })
    }

    pub fn n_slices(&self) -> usize {
        self.n_steps + 1
    }

    pub fn time(&self, slice: usize) -> f64 {
        self.dt * slice as f64
    }

    pub fn trajectory(&self, i: usize) -> &[f64] {
        let n = self.n_slices();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn trajectories(&self) -> std::slice::Chunks<'_, f64> {
        self.values.chunks(self.n_slices())
    }

    pub fn value(&self, traj: usize, slice: usize) -> f64 {
        self.values[traj * self.n_slices() + slice]
    }

    /// Values of all trajectories at one slice.
    pub fn slice(&self, slice: usize) -> Result<Vec<f64>> {
        self.check_slice(slice)?;
        Ok(self.trajectories().map(|t| t[slice]).collect())
    }

    fn check_slice(&self, slice: usize) -> Result<()> {
        if slice > self.n_steps {
            return Err(Error::SliceOutOfRange {
                slice,
                n_slices: self.n_slices(),
            });
        }
        if self.n_traj == 0 {
            return Err(Error::EmptyEnsemble);
        }
        Ok(())
    }

    /// Ensemble mean of `rho00` at one slice and its standard error.
    pub fn mean_at(&self, slice: usize) -> Result<(f64, f64)> {
        self.check_slice(slice)?;
        let n = self.n_traj;
        let ns = self.n_slices();
        // Shifted by the first value so a constant slice gives an exact mean and zero spread.
        let shift = self.values[slice];
        let mean = shift + par::stable_sum(n, |i| self.values[i * ns + slice] - shift) / n as f64;
        let var = par::stable_sum(n, |i| {
            let d = self.values[i * ns + slice] - mean;
            d * d
        }) / (n.max(2) - 1) as f64;
        Ok((mean, (var / n as f64).sqrt()))
    }

    /// Fraction of trajectories with `rho00` strictly above `threshold`.
    pub fn fraction_above(&self, slice: usize, threshold: f64) -> Result<f64> {
        self.check_slice(slice)?;
        let count = self
            .trajectories()
            .filter(|t| t[slice] > threshold)
            .count();
        Ok(count as f64 / self.n_traj as f64)
    }

    pub fn fraction_below(&self, slice: usize, threshold: f64) -> Result<f64> {
        self.check_slice(slice)?;
        let count = self
            .trajectories()
            .filter(|t| t[slice] < threshold)
            .count();
        Ok(count as f64 / self.n_traj as f64)
    }
}

/// Uniform bins `[k w, (k+1) w)` on `[0, 1]`; the point 1 is a boundary mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub n_bins: usize,
    pub bin_width: f64,
}

impl Default for Binning {
    fn default() -> Self {
        Binning {
            n_bins: 100,
            bin_width: 0.01,
        }
    }
}

impl Binning {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 {
            return Err(Error::BinningMismatch("n_bins must be positive".into()));
        }
        check_positive("bin_width", self.bin_width)?;
        if (self.n_bins as f64) * self.bin_width < 1.0 - 1e-12 {
            return Err(Error::BinningMismatch(format!(
                "{} bins of width {} do not cover [0, 1]",
                self.n_bins, self.bin_width
            )));
        }
        Ok(())
    }

    pub fn edge(&self, k: usize) -> f64 {
        k as f64 * self.bin_width
    }

    pub fn center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.bin_width
    }

    /// Bin holding `rho` in the open interval (0, 1).
    #[inline]
    pub fn index(&self, rho: f64) -> usize {
        let mut k = (rho / self.bin_width) as usize;
        // Division can land one bin off from the edges `k * w` used
        // everywhere else.
        if k > 0 && rho < self.edge(k) {
            k -= 1;
        } else if rho >= self.edge(k + 1) {
            k += 1;
        }
        k.min(self.n_bins - 1)
    }
}

/// Binned distribution of `rho00` at time `t` (us).
///
/// `density[k]` is the probability mass of bin `k`; `mass0` and `mass1` are
/// point masses at exactly 0 and 1. Errors are absolute, per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionSnapshot {
    pub binning: Binning,
    pub t: f64,
    pub density: Vec<f64>,
    pub errors: Vec<f64>,
    pub mass0: f64,
    pub mass1: f64,
    /// Uncertainties of `mass0` and `mass1`; `None` when the producer does not
    /// resolve the boundary masses.
    pub boundary_errors: Option<[f64; 2]>,
}

impl DistributionSnapshot {
    pub fn n_bins(&self) -> usize {
        self.binning.n_bins
    }

    pub fn total_mass(&self) -> f64 {
        self.mass0 + self.mass1 + self.density.iter().sum::<f64>()
    }

    pub fn centers(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.binning.n_bins).map(|k| self.binning.center(k))
    }

    /// Total-variation distance, counting boundary masses as two extra cells.
    pub fn total_variation(&self, other: &DistributionSnapshot) -> Result<f64> {
        check_same_binning(self, other)?;
        let interior: f64 = self
            .density
            .iter()
            .zip(&other.density)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(0.5 * (interior + (self.mass0 - other.mass0).abs() + (self.mass1 - other.mass1).abs()))
    }

    /// L1 distance (twice the total variation).
    pub fn l1_distance(&self, other: &DistributionSnapshot) -> Result<f64> {
        self.total_variation(other).map(|tv| 2.0 * tv)
    }

    /// First moment of `rho00`, with bin contents at their centres.
    pub fn mean(&self) -> f64 {
        self.mass1
            + self
                .density
                .iter()
                .enumerate()
                .map(|(k, d)| d * self.binning.center(k))
                .sum::<f64>()
    }
}

pub(crate) fn check_same_binning(a: &DistributionSnapshot, b: &DistributionSnapshot) -> Result<()> {
    if a.binning != b.binning || a.density.len() != b.density.len() {
        return Err(Error::BinningMismatch(format!(
            "{} bins of width {} vs {} bins of width {}",
            a.binning.n_bins, a.binning.bin_width, b.binning.n_bins, b.binning.bin_width
        )));
    }
    Ok(())
}

/// Bin counts of `rho00` values; values at or beyond 0 and 1 are counted as
/// boundary masses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Counts {
    pub bins: Vec<u64>,
    pub at0: u64,
    pub at1: u64,
}

impl Counts {
    pub fn new(n_bins: usize) -> Self {
        Counts {
            bins: vec![0; n_bins],
            at0: 0,
            at1: 0,
        }
    }

    #[inline]
    pub fn add(&mut self, v: f64, binning: &Binning) {
        if v <= 0.0 {
            self.at0 += 1;
        } else if v >= 1.0 {
            self.at1 += 1;
        } else {
            self.bins[binning.index(v)] += 1;
        }
    }

    pub fn merge(&mut self, other: &Counts) {
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
        self.at0 += other.at0;
        self.at1 += other.at1;
    }

    pub fn total(&self) -> u64 {
        self.at0 + self.at1 + self.bins.iter().sum::<u64>()
    }

    /// Normalised snapshot with errors `sqrt(max(count, 1)) / n`.
    pub fn snapshot(&self, t: f64, binning: Binning) -> DistributionSnapshot {
        let n = self.total() as f64;
        let err = |c: u64| (c.max(1) as f64).sqrt() / n;
        DistributionSnapshot {
            binning,
            t,
            density: self.bins.iter().map(|&c| c as f64 / n).collect(),
            errors: self.bins.iter().map(|&c| err(c)).collect(),
            mass0: self.at0 as f64 / n,
            mass1: self.at1 as f64 / n,
            boundary_errors: Some([err(self.at0), err(self.at1)]),
        }
    }
}

/// Histogram of `rho00` values with statistical errors `sqrt(max(count,1))/n`.
pub fn histogram_from_values(values: &[f64], t: f64, binning: Binning) -> Result<DistributionSnapshot> {
    binning.validate()?;
    if values.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let mut counts = Counts::new(binning.n_bins);
    for &v in values {
        counts.add(v, &binning);
    }
    Ok(counts.snapshot(t, binning))
}

/// Histogram of one time slice of an ensemble.
pub fn build_histogram(
    ensemble: &TrajectoryEnsemble,
    slice: usize,
    binning: Binning,
) -> Result<DistributionSnapshot> {
    let values = ensemble.slice(slice)?;
    histogram_from_values(&values, ensemble.time(slice), binning)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logodds_examples() {
        assert_eq!(to_logodds(0.5).unwrap(), 0.0);
        // 0.5 ln(0.305 / 0.695)
        assert!((to_logodds(0.305).unwrap() - (-0.411_800_034_478_690_2)).abs() < 1e-15);
        assert_eq!(to_logodds(1.0).unwrap(), Z_CAP);
        assert_eq!(to_logodds(0.0).unwrap(), -Z_CAP);
        assert!(to_logodds(1.0 + 1e-12).is_err());
        assert!(to_logodds(-0.1).is_err());
        assert!(to_logodds(f64::NAN).is_err());
    }

    #[test]
    fn capped_states_report_exact_boundaries() {
        assert_eq!(QubitState::ground().rho00(), 1.0);
        assert_eq!(QubitState::excited().rho00(), 0.0);
        assert_eq!(QubitState::from_z(1e9).rho00(), 1.0);
        assert!(QubitState::from_z(-31.0).is_absorbed());
        let s = QubitState::from_rho00(0.2).unwrap();
        assert!((s.rho00() + s.rho11() - 1.0).abs() < 1e-16);
    }

    #[test]
    fn bin_index_respects_edges() {
        let b = Binning::default();
        assert_eq!(b.index(0.0 + 1e-300), 0);
        assert_eq!(b.index(b.edge(30)), 30);
        assert_eq!(b.index(b.edge(30).next_down()), 29);
        assert_eq!(b.index(0.999_999), 99);
        for k in 0..100 {
            assert_eq!(b.index(b.edge(k).max(1e-300)), k);
        }
    }

    #[test]
    fn delta_ensemble_fills_one_bin() {
        let ens = TrajectoryEnsemble::new(5, 0, 0.5, vec![0.305; 5]).unwrap();
        let h = build_histogram(&ens, 0, Binning::default()).unwrap();
        assert_eq!(h.density[30], 1.0);
        assert_eq!(h.density.iter().filter(|d| **d > 0.0).count(), 1);
        assert_eq!(h.mass0 + h.mass1, 0.0);
        assert_eq!(h.errors[0], 1.0 / 5.0);
    }

    #[test]
    fn boundary_values_go_to_point_masses() {
        let ens = TrajectoryEnsemble::new(4, 0, 0.5, vec![0.0, 1.0, 1.0, 0.42]).unwrap();
        let h = build_histogram(&ens, 0, Binning::default()).unwrap();
        assert_eq!(h.mass0, 0.25);
        assert_eq!(h.mass1, 0.5);
        assert_eq!(h.density[42], 0.25);
    }

    #[test]
    fn histogram_errors() {
        let ens = TrajectoryEnsemble::new(0, 0, 0.5, vec![]).unwrap();
        assert!(matches!(
            build_histogram(&ens, 0, Binning::default()),
            Err(Error::EmptyEnsemble)
        ));
        let ens = TrajectoryEnsemble::new(1, 0, 0.5, vec![0.3]).unwrap();
        assert!(build_histogram(&ens, 1, Binning::default()).is_err());
        let narrow = Binning {
            n_bins: 50,
            bin_width: 0.01,
        };
        assert!(build_histogram(&ens, 0, narrow).is_err());
    }

    #[test]
    fn ensemble_rejects_bad_values() {
        assert!(TrajectoryEnsemble::new(1, 1, 0.5, vec![0.5]).is_err());
        assert!(TrajectoryEnsemble::new(1, 0, 0.5, vec![1.5]).is_err());
    }

    #[test]
    fn calibration_strength() {
        let cal = CalibrationParams {
            i0: 128.443,
            i1: 127.856,
            sigma: 5.56,
            dt: 0.5,
            t1: 45.0,
            dts: 0.5,
        };
        assert!((cal.kappa() - 0.002_786_548_638_786_979).abs() < 1e-15);
        assert!((cal.preparation_uncertainty() - (1.0 - (-0.5f64 / 45.0).exp())).abs() < 1e-15);
        let p = cal.model_params(0.3, 80);
        assert!((p.kappa() - cal.kappa()).abs() < 1e-15);
    }
}
