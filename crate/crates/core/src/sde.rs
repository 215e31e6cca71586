//! Monte Carlo quantum trajectories.
//!
//! In the log-odds coordinate the Ito equation
//! `d rho00 = 2 sqrt(g) rho00 rho11 dW + rho11 / T1 dt` splits into two pieces
//! with closed-form finite-step solutions:
//!
//! * measurement diffusion, `dz = g tanh z dt + sqrt(g) dW`, whose transition
//!   law over a step of strength `kappa = g dt` is the Gaussian mixture
//!   `rho00 N(+kappa, kappa) + rho11 N(-kappa, kappa)`;
//! * relaxation, `rho11 <- rho11 exp(-dt / T1)`.
//!
//! [`step_trotter`] composes them as relax(delta/2), diffuse(kappa),
//! relax(delta/2), which is second order in the step size.

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{SeedSpec, StepDraw};
use crate::state::{ModelParams, QubitState, TrajectoryEnsemble, Z_CAP};

/// Dimensionless per-step strengths: `kappa = g dt`, `delta = dt / T1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepBudget {
    kappa: f64,
    delta: f64,
}

impl StepBudget {
    pub fn new(kappa: f64, delta: f64) -> Result<Self> {
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(Error::domain("kappa", kappa, ">= 0 and finite"));
        }
        if !(delta >= 0.0) {
            return Err(Error::domain("delta", delta, ">= 0"));
        }
        Ok(StepBudget { kappa, delta })
    }

    pub fn from_params(params: &ModelParams) -> Result<Self> {
        params.validate()?;
        StepBudget::new(params.kappa(), params.delta())
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `tau` accumulated after `n` steps.
    pub fn tau_after(&self, n: usize) -> f64 {
        self.kappa * n as f64
    }
}

/// Exact finite-step solution of the measurement diffusion.
///
/// The draw's uniform picks the eigenstate branch `s = ±1` with Born weights
/// and its normal supplies the record noise; the dimensionless record is
/// `u = s + normal / sqrt(kappa)` and the update is `z <- z + kappa u`.
pub fn step_diffusion_exact(state: QubitState, kappa: f64, draw: StepDraw) -> Result<QubitState> {
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::domain("kappa", kappa, ">= 0 and finite"));
    }
    Ok(diffuse(state, kappa, draw))
}

#[inline]
pub(crate) fn diffuse(state: QubitState, kappa: f64, draw: StepDraw) -> QubitState {
    if kappa == 0.0 || state.is_absorbed() {
        return state;
    }
    let branch = if draw.uniform < state.rho00() { 1.0 } else { -1.0 };
    QubitState::from_z(state.z() + kappa * branch + kappa.sqrt() * draw.normal)
}

/// Exact relaxation over `delta = dt / T1`: `rho11 <- rho11 exp(-delta)`.
pub fn step_relaxation_exact(state: QubitState, delta: f64) -> Result<QubitState> {
    if !(delta >= 0.0) {
        return Err(Error::domain("delta", delta, ">= 0"));
    }
    Ok(relax(state, delta))
}

/// In log-odds form, `e^{2z'} = (1 + e^{2z}) e^delta - 1`, i.e.
/// `z' = z + delta/2 + ln(1 + (1 - e^-delta) e^{-2z}) / 2`.
#[inline]
pub(crate) fn relax(state: QubitState, delta: f64) -> QubitState {
    let z = state.z();
    if delta == 0.0 || z >= Z_CAP {
        return state;
    }
    if delta == f64::INFINITY {
        return QubitState::ground();
    }
    let growth = -(-delta).exp_m1();
    QubitState::from_z(z + 0.5 * delta + 0.5 * (growth * (-2.0 * z).exp()).ln_1p())
}

/// One symmetric Trotter step: relax(delta/2), diffuse(kappa), relax(delta/2).
#[inline]
pub fn step_trotter(state: QubitState, budget: &StepBudget, draw: StepDraw) -> QubitState {
    let half = 0.5 * budget.delta;
    let s = relax(state, half);
    let s = diffuse(s, budget.kappa, draw);
    relax(s, half)
}

/// Reference Euler-Maruyama step in `rho00`,
/// `rho00 += 2 sqrt(g) rho00 rho11 sqrt(dt) xi + rho11 dt / T1`, clamped to
/// `[0, 1]` (both ends absorb the diffusion).
///
/// Accurate only for `g dt` of order 1e-3 or smaller.
pub fn step_euler_maruyama(state: QubitState, g: f64, dt: f64, t1: f64, normal: f64) -> QubitState {
    let rho = state.rho00();
    let rho11 = 1.0 - rho;
    let next = rho + 2.0 * g.sqrt() * rho * rho11 * dt.sqrt() * normal + rho11 * dt / t1;
    let next = next.clamp(0.0, 1.0);
    // `to_logodds` only fails outside [0, 1] or on NaN.
    QubitState::from_rho00(next).unwrap_or(state)
}

const TRAJ_PER_TASK: usize = 256;

fn simulate_with<F>(params: &ModelParams, n_traj: usize, seeds: SeedSpec, step: F) -> Result<TrajectoryEnsemble>
where
    F: Fn(QubitState, StepDraw) -> QubitState + Sync + Send,
{
    params.validate()?;
    if n_traj == 0 {
        return Err(Error::EmptyEnsemble);
    }
    if params.n_steps > u32::MAX as usize {
        return Err(Error::domain("n_steps", params.n_steps as f64, "< 2^32"));
    }
    let start = QubitState::from_rho00(params.x0)?;
    let mut ens = TrajectoryEnsemble::zeroed(n_traj, params.n_steps, params.dt)?;
    let n_slices = ens.n_slices();
    par::for_each_chunk_mut(&mut ens.values, n_slices * TRAJ_PER_TASK, |task, chunk| {
        for (j, row) in chunk.chunks_mut(n_slices).enumerate() {
            let traj = (task * TRAJ_PER_TASK + j) as u64;
            let mut s = start;
            row[0] = s.rho00();
            for (k, slot) in row.iter_mut().enumerate().skip(1) {
                s = step(s, seeds.draw(traj, (k - 1) as u32));
                *slot = s.rho00();
            }
        }
    });
    Ok(ens)
}

/// `n_traj` independent trajectories of `params.n_steps` Trotter steps.
///
/// Trajectory `i`, step `k` consumes `seeds.draw(i, k)`, so the result is
/// bit-identical for any thread count.
pub fn simulate_ensemble(params: &ModelParams, n_traj: usize, seeds: SeedSpec) -> Result<TrajectoryEnsemble> {
    let budget = StepBudget::from_params(params)?;
    simulate_with(params, n_traj, seeds, |s, d| step_trotter(s, &budget, d))
}

/// Same as [`simulate_ensemble`] with the Euler-Maruyama reference stepper.
pub fn simulate_ensemble_euler_maruyama(
    params: &ModelParams,
    n_traj: usize,
    seeds: SeedSpec,
) -> Result<TrajectoryEnsemble> {
    let (g, dt, t1) = (params.g, params.dt, params.t1);
    simulate_with(params, n_traj, seeds, |s, d| step_euler_maruyama(s, g, dt, t1, d.normal))
}

/// Final-slice `rho00` values only, without storing whole trajectories.
pub fn simulate_final(params: &ModelParams, n_traj: usize, seeds: SeedSpec) -> Result<Vec<f64>> {
    let budget = StepBudget::from_params(params)?;
    if n_traj == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let start = QubitState::from_rho00(params.x0)?;
    let mut out = Vec::new();
    out.try_reserve_exact(n_traj)
        .map_err(|_| Error::Resource(n_traj))?;
    out.resize(n_traj, 0.0);
    let n_steps = params.n_steps;
    par::for_each_chunk_mut(&mut out, TRAJ_PER_TASK * 16, |task, chunk| {
        for (j, slot) in chunk.iter_mut().enumerate() {
            let traj = (task * TRAJ_PER_TASK * 16 + j) as u64;
            let mut s = start;
            for k in 0..n_steps {
                s = step_trotter(s, &budget, seeds.draw(traj, k as u32));
            }
            *slot = s.rho00();
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draw(uniform: f64, normal: f64) -> StepDraw {
        StepDraw { uniform, normal }
    }

    #[test]
    fn zero_kappa_is_identity() {
        let s = QubitState::from_rho00(0.37).unwrap();
        assert_eq!(step_diffusion_exact(s, 0.0, draw(0.1, 2.0)).unwrap(), s);
        assert!(step_diffusion_exact(s, -0.1, draw(0.1, 2.0)).is_err());
    }

    #[test]
    fn eigenstates_are_fixed_points_of_diffusion() {
        for d in [draw(0.999, -8.0), draw(1e-9, 8.0), draw(0.5, 0.0)] {
            let up = step_diffusion_exact(QubitState::ground(), 0.3, d).unwrap();
            assert_eq!(up.rho00(), 1.0);
            let down = step_diffusion_exact(QubitState::excited(), 0.3, d).unwrap();
            assert_eq!(down.rho00(), 0.0);
        }
    }

    #[test]
    fn diffusion_branch_follows_born_weight() {
        let s = QubitState::from_rho00(0.25).unwrap();
        let up = step_diffusion_exact(s, 0.04, draw(0.2, 0.0)).unwrap();
        let down = step_diffusion_exact(s, 0.04, draw(0.3, 0.0)).unwrap();
        assert!((up.z() - s.z() - 0.04).abs() < 1e-15);
        assert!((down.z() - s.z() + 0.04).abs() < 1e-15);
    }

    #[test]
    fn relaxation_examples() {
        let ground = QubitState::ground();
        assert_eq!(step_relaxation_exact(ground, 0.3).unwrap(), ground);

        let excited = QubitState::excited();
        let half = step_relaxation_exact(excited, std::f64::consts::LN_2).unwrap();
        assert!((half.rho11() - 0.5).abs() < 1e-12);

        let s = QubitState::from_rho00(1.0 - 0.695).unwrap();
        let r = step_relaxation_exact(s, 0.5 / 45.0).unwrap();
        // 0.695 exp(-1/90)
        assert!((r.rho11() - 0.687_320_520_559_276).abs() < 1e-12);

        assert!(step_relaxation_exact(s, -1e-3).is_err());
        assert_eq!(step_relaxation_exact(s, 0.0).unwrap(), s);
    }

    #[test]
    fn relaxation_half_steps_compose() {
        let s = QubitState::from_rho00(0.12).unwrap();
        let one = relax(s, 0.2);
        let two = relax(relax(s, 0.1), 0.1);
        assert!((one.rho11() - two.rho11()).abs() < 1e-15);
    }

    #[test]
    fn trotter_special_cases() {
        let s = QubitState::from_rho00(0.305).unwrap();
        let d = draw(0.4, -0.7);
        let no_relax = StepBudget::new(0.02, 0.0).unwrap();
        assert_eq!(step_trotter(s, &no_relax, d), step_diffusion_exact(s, 0.02, d).unwrap());

        let relax_only = StepBudget::new(0.0, 0.3).unwrap();
        let a = step_trotter(s, &relax_only, d);
        let b = step_relaxation_exact(s, 0.3).unwrap();
        assert!((a.rho11() - b.rho11()).abs() < 1e-15);

        assert!(StepBudget::new(-1.0, 0.0).is_err());
        assert!(StepBudget::new(1.0, -1.0).is_err());
        assert!((no_relax.tau_after(50) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn euler_maruyama_fixed_points() {
        let s = QubitState::from_rho00(0.42).unwrap();
        assert_eq!(step_euler_maruyama(s, 0.0, 0.01, f64::INFINITY, 1.3).rho00(), s.rho00());
        for xi in [-5.0, 0.0, 5.0] {
            assert_eq!(step_euler_maruyama(QubitState::ground(), 1.0, 1e-3, f64::INFINITY, xi).rho00(), 1.0);
            assert_eq!(step_euler_maruyama(QubitState::excited(), 1.0, 1e-3, f64::INFINITY, xi).rho00(), 0.0);
        }
    }

    #[test]
    fn frozen_single_trajectory() {
        let p = ModelParams {
            g: 0.0,
            t1: f64::INFINITY,
            dt: 0.5,
            x0: 0.305,
            n_steps: 10,
        };
        let ens = simulate_ensemble(&p, 1, SeedSpec::new(1)).unwrap();
        assert!(ens.values.iter().all(|v| *v == ens.values[0]));
        assert!((ens.values[0] - 0.305).abs() < 1e-15);
        assert!(matches!(simulate_ensemble(&p, 0, SeedSpec::new(1)), Err(Error::EmptyEnsemble)));
    }

    #[test]
    fn final_values_match_full_ensemble() {
        let p = ModelParams {
            g: 0.03,
            t1: 45.0,
            dt: 0.5,
            x0: 0.305,
            n_steps: 12,
        };
        let ens = simulate_ensemble(&p, 1000, SeedSpec::new(5)).unwrap();
        let fin = simulate_final(&p, 1000, SeedSpec::new(5)).unwrap();
        assert_eq!(ens.slice(12).unwrap(), fin);
    }
}
