//! Evolution of the trajectory density `p(rho00, t)`.
//!
//! Without relaxation the density is known in closed form: in the log-odds
//! coordinate it is a pair of Gaussians with centres `z0 ± g t`, common
//! variance `g t` and weights `x0`, `1 - x0` ([`analytic_distribution_z`]).
//!
//! With relaxation, [`solve_fp`] integrates
//!
//! ```text
//! dp/dt = -d/dz [ (g tanh z + 1 / (T1 (1 + tanh z))) p ] + (g / 2) d²p/dz²
//! ```
//!
//! on a uniform finite-volume grid in `z`. Each step is a Strang splitting
//! relax(Δ/2) · measure(Δ) · relax(Δ/2):
//!
//! * `measure`: the constant-coefficient diffusion plus the `g tanh z` drift,
//!   Crank-Nicolson in flux form. Substeps keep `D dt / h² <= cfl <= 1`, which
//!   makes both halves of the scheme positivity preserving.
//! * `relax`: the relaxation drift moved along its exact characteristics
//!   (`rho11 <- rho11 exp(-Δ/T1)`) by conservative remapping of the cumulative
//!   mass, interpolated with a monotone cubic. This is the upwind
//!   finite-volume update with exact fluxes, valid for any Courant number,
//!   which matters near `rho00 = 0` where the drift in `z` diverges.
//!
//! Mass leaving the grid is held in the boundary buckets `mass0`/`mass1`.
//! `rho00 = 1` absorbs; `rho00 = 0` only absorbs without relaxation, and is
//! otherwise re-injected by the next relaxation remap.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::state::{self, Binning, DistributionSnapshot};

#[inline]
fn normal_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        1.0
    } else if x == f64::NEG_INFINITY {
        0.0
    } else {
        0.5 * erfc(-x / std::f64::consts::SQRT_2)
    }
}

/// `ln cosh z` without overflow.
#[inline]
fn ln_cosh(z: f64) -> f64 {
    let a = z.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Closed-form density in `z` without relaxation: two Gaussians with common
/// variance `tau`, centred at `z0 + tau` (weight `x0`) and `z0 - tau`
/// (weight `1 - x0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZMixture {
    /// Centres of the branches heading to `rho00 = 1` and `rho00 = 0`.
    pub centers: [f64; 2],
    pub variance: f64,
    pub weights: [f64; 2],
}

impl ZMixture {
    /// `P(Z <= z)`.
    pub fn cdf(&self, z: f64) -> f64 {
        let s = self.variance.sqrt();
        let part = |c: f64| {
            if s == 0.0 || c.is_infinite() {
                if z >= c {
                    1.0
                } else {
                    0.0
                }
            } else {
                normal_cdf((z - c) / s)
            }
        };
        self.weights[0] * part(self.centers[0]) + self.weights[1] * part(self.centers[1])
    }

    /// Probability of `lo < Z <= hi`, summed from the tail nearer to each
    /// branch so that small masses keep their relative precision.
    pub fn interval_mass(&self, lo: f64, hi: f64) -> f64 {
        let s = self.variance.sqrt();
        let part = |c: f64| {
            if s == 0.0 || c.is_infinite() {
                return if lo < c && c <= hi { 1.0 } else { 0.0 };
            }
            let a = (lo - c) / s;
            let b = (hi - c) / s;
            if a > 0.0 {
                normal_cdf(-a) - normal_cdf(-b)
            } else {
                normal_cdf(b) - normal_cdf(a)
            }
        };
        self.weights[0] * part(self.centers[0]) + self.weights[1] * part(self.centers[1])
    }

    pub fn pdf(&self, z: f64) -> f64 {
        if self.variance == 0.0 {
            return 0.0;
        }
        let s = self.variance.sqrt();
        let g = |c: f64| {
            if c.is_infinite() {
                0.0
            } else {
                let u = (z - c) / s;
                (-0.5 * u * u).exp() / (s * (std::f64::consts::TAU).sqrt())
            }
        };
        self.weights[0] * g(self.centers[0]) + self.weights[1] * g(self.centers[1])
    }
}

/// Closed-form `T1 = ∞` solution in `z` for a delta start at `x0`.
///
/// For `x0` of exactly 0 or 1 both centres sit at the corresponding infinity:
/// the whole mass stays on the boundary.
pub fn analytic_distribution_z(x0: f64, tau: f64) -> Result<ZMixture> {
    if !(tau >= 0.0) || tau.is_infinite() {
        return Err(Error::domain("tau", tau, ">= 0 and finite"));
    }
    if !(0.0..=1.0).contains(&x0) {
        return Err(Error::domain("x0", x0, "[0, 1]"));
    }
    let z0 = if x0 == 0.0 {
        f64::NEG_INFINITY
    } else if x0 == 1.0 {
        f64::INFINITY
    } else {
        0.5 * (x0.ln() - (-x0).ln_1p())
    };
    Ok(ZMixture {
        centers: [z0 + tau, z0 - tau],
        variance: tau,
        weights: [x0, 1.0 - x0],
    })
}

/// Closed-form density of `rho00` without relaxation,
/// `p(rho) = p_z(z(rho)) / (2 rho (1 - rho))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoDensity {
    pub mixture: ZMixture,
}

/// See [`RhoDensity`].
pub fn analytic_distribution_rho(x0: f64, tau: f64) -> Result<RhoDensity> {
    Ok(RhoDensity {
        mixture: analytic_distribution_z(x0, tau)?,
    })
}

fn logit_or_inf(rho: f64) -> f64 {
    if rho <= 0.0 {
        f64::NEG_INFINITY
    } else if rho >= 1.0 {
        f64::INFINITY
    } else {
        0.5 * (rho.ln() - (-rho).ln_1p())
    }
}

impl RhoDensity {
    /// Density at `rho`; the limit 0 at the end points.
    pub fn pdf(&self, rho: f64) -> f64 {
        if rho <= 0.0 || rho >= 1.0 {
            return 0.0;
        }
        self.mixture.pdf(logit_or_inf(rho)) / (2.0 * rho * (1.0 - rho))
    }

    /// Point masses at `rho00 = 0` and `1` (non-zero only for `x0` in {0, 1}).
    pub fn boundary_masses(&self) -> [f64; 2] {
        let c = self.mixture.centers;
        let w = self.mixture.weights;
        let at = |target: f64| {
            c.iter()
                .zip(&w)
                .filter(|(ci, _)| **ci == target)
                .map(|(_, wi)| *wi)
                .sum::<f64>()
        };
        [at(f64::NEG_INFINITY), at(f64::INFINITY)]
    }

    /// Mass of the open interval `(a, b)` of `rho00`.
    pub fn interval_mass(&self, a: f64, b: f64) -> f64 {
        let [m0, m1] = self.boundary_masses();
        let interior = 1.0 - m0 - m1;
        if interior == 0.0 {
            return 0.0;
        }
        self.mixture.interval_mass(logit_or_inf(a), logit_or_inf(b))
    }

    /// Exact bin masses.
    pub fn snapshot(&self, binning: Binning, t: f64) -> Result<DistributionSnapshot> {
        binning.validate()?;
        let density: Vec<f64> = (0..binning.n_bins)
            .map(|k| {
                let lo = binning.edge(k).min(1.0);
                let hi = binning.edge(k + 1).min(1.0);
                if lo >= hi {
                    0.0
                } else {
                    self.interval_mass(lo, hi)
                }
            })
            .collect();
        let [mass0, mass1] = self.boundary_masses();
        Ok(DistributionSnapshot {
            binning,
            t,
            errors: vec![0.0; binning.n_bins],
            density,
            mass0,
            mass1,
            boundary_errors: Some([0.0, 0.0]),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinate {
    Rho,
    Z,
}

/// Cell masses of a finite-volume grid plus the boundary point masses.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub coordinate: Coordinate,
    /// Cell boundaries, increasing; `edges.len() == weights.len() + 1`.
    pub edges: Vec<f64>,
    pub weights: Vec<f64>,
    pub mass0: f64,
    pub mass1: f64,
    pub t: f64,
}

/// Grid geometry and stability settings of [`solve_fp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpConfig {
    pub n_cells: usize,
    /// Grid covers `z` in `[-z_max, z_max]`.
    pub z_max: f64,
    /// Upper bound on `D dt / h²` for the Crank-Nicolson substeps.
    pub cfl: f64,
    /// Splitting step as a fraction of `T1`.
    pub relax_step: f64,
}

impl Default for FpConfig {
    fn default() -> Self {
        FpConfig {
            n_cells: 4096,
            z_max: 12.0,
            cfl: 0.9,
            relax_step: 1e-3,
        }
    }
}

impl FpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cells < 16 {
            return Err(Error::domain("n_cells", self.n_cells as f64, ">= 16"));
        }
        if !(self.z_max > 0.0 && self.z_max < state::Z_CAP) {
            return Err(Error::domain("z_max", self.z_max, "(0, Z_CAP)"));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::domain("cfl", self.cfl, "(0, 1]"));
        }
        if !(self.relax_step > 0.0 && self.relax_step.is_finite()) {
            return Err(Error::domain("relax_step", self.relax_step, "> 0"));
        }
        Ok(())
    }

    pub fn cell_width(&self) -> f64 {
        2.0 * self.z_max / self.n_cells as f64
    }

    pub fn edges(&self) -> Vec<f64> {
        let h = self.cell_width();
        (0..=self.n_cells)
            .map(|k| -self.z_max + k as f64 * h)
            .collect()
    }
}

impl DensityGrid {
    pub fn n_cells(&self) -> usize {
        self.weights.len()
    }

    /// Cell centres.
    pub fn nodes(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass0 + self.mass1 + self.weights.iter().sum::<f64>()
    }

    /// Mean of `rho00`, taking the density uniform within each cell.
    pub fn mean_rho(&self) -> f64 {
        let interior: f64 = match self.coordinate {
            Coordinate::Rho => self
                .edges
                .windows(2)
                .zip(&self.weights)
                .map(|(e, w)| w * 0.5 * (e[0] + e[1]))
                .sum(),
            Coordinate::Z => self
                .edges
                .windows(2)
                .zip(&self.weights)
                .map(|(e, w)| {
                    // cell average of (1 + tanh z) / 2
                    let prim = |z: f64| z + ln_cosh(z);
                    w * (prim(e[1]) - prim(e[0])) / (2.0 * (e[1] - e[0]))
                })
                .sum(),
        };
        interior + self.mass1
    }

    /// All mass in the single cell containing `x0` (or on the boundary).
    pub fn point_mass(x0: f64, config: &FpConfig) -> Result<DensityGrid> {
        config.validate()?;
        let z = state::to_logodds(x0)?;
        let edges = config.edges();
        let mut weights = vec![0.0; config.n_cells];
        let (mut mass0, mut mass1) = (0.0, 0.0);
        if x0 == 0.0 || z < edges[0] {
            mass0 = 1.0;
        } else if x0 == 1.0 || z >= config.z_max {
            mass1 = 1.0;
        } else {
            let k = (((z + config.z_max) / config.cell_width()) as usize).min(config.n_cells - 1);
            weights[k] = 1.0;
        }
        Ok(DensityGrid {
            coordinate: Coordinate::Z,
            edges,
            weights,
            mass0,
            mass1,
            t: 0.0,
        })
    }

    /// Exact cell masses of a `z` mixture; tails beyond the grid go to the
    /// boundary buckets.
    pub fn from_mixture(mix: &ZMixture, config: &FpConfig, t: f64) -> Result<DensityGrid> {
        config.validate()?;
        let edges = config.edges();
        let weights = edges
            .windows(2)
            .map(|e| mix.interval_mass(e[0], e[1]))
            .collect();
        let mass0 = mix.cdf(edges[0]);
        let mass1 = mix.interval_mass(edges[config.n_cells], f64::INFINITY);
        Ok(DensityGrid {
            coordinate: Coordinate::Z,
            edges,
            weights,
            mass0,
            mass1,
            t,
        })
    }

    /// Narrow Gaussian of standard deviation two cells around `x0`, its centre
    /// nudged so that the mean of `rho00` equals `x0`.
    pub fn smoothed_delta(x0: f64, config: &FpConfig) -> Result<DensityGrid> {
        config.validate()?;
        if x0 == 0.0 || x0 == 1.0 {
            return DensityGrid::point_mass(x0, config);
        }
        let z0 = state::to_logodds(x0)?;
        let sd = 2.0 * config.cell_width();
        let mut center = z0;
        let mut grid = DensityGrid::point_mass(x0, config)?;
        for _ in 0..4 {
            let mix = ZMixture {
                centers: [center, center],
                variance: sd * sd,
                weights: [0.5, 0.5],
            };
            grid = DensityGrid::from_mixture(&mix, config, 0.0)?;
            let total = grid.total_mass();
            grid.weights.iter_mut().for_each(|w| *w /= total);
            grid.mass0 /= total;
            grid.mass1 /= total;
            let err = grid.mean_rho() - x0;
            let rho = state::to_rho(center);
            let slope = 2.0 * rho * (1.0 - rho);
            if slope <= 0.0 || err.abs() < 1e-15 {
                break;
            }
            center -= err / slope;
        }
        Ok(grid)
    }

    /// Conservative rebinning onto `rho00` bins. Within each cell the density
    /// is reconstructed linearly (slope limited to stay non-negative) and
    /// integrated exactly between bin edges.
    pub fn to_snapshot(&self, binning: Binning) -> Result<DistributionSnapshot> {
        binning.validate()?;
        let n = self.n_cells();
        // interior bin edges in the grid's coordinate
        let cuts: Vec<f64> = (1..binning.n_bins)
            .map(|k| {
                let rho = binning.edge(k);
                match self.coordinate {
                    Coordinate::Rho => rho,
                    Coordinate::Z => logit_or_inf(rho),
                }
            })
            .collect();
        let widths: Vec<f64> = self.edges.windows(2).map(|e| e[1] - e[0]).collect();
        let dens: Vec<f64> = self.weights.iter().zip(&widths).map(|(m, w)| m / w).collect();
        let mut density = vec![0.0; binning.n_bins];
        let mut bin = 0usize;
        for i in 0..n {
            let (lo, hi) = (self.edges[i], self.edges[i + 1]);
            let mid = 0.5 * (lo + hi);
            let d = dens[i];
            let slope = if i == 0 || i + 1 == n {
                0.0
            } else {
                let raw = (dens[i + 1] - dens[i - 1]) / (0.5 * (widths[i - 1] + widths[i + 1]) + widths[i]);
                let cap = 2.0 * d / widths[i];
                raw.clamp(-cap, cap)
            };
            while bin < cuts.len() && cuts[bin] <= lo {
                bin += 1;
            }
            let mut a = lo;
            let mut k = bin;
            loop {
                let b = if k < cuts.len() && cuts[k] < hi { cuts[k] } else { hi };
                let (ua, ub) = (a - mid, b - mid);
                density[k] += d * (ub - ua) + 0.5 * slope * (ub * ub - ua * ua);
                if b >= hi {
                    break;
                }
                a = b;
                k += 1;
            }
        }
        Ok(DistributionSnapshot {
            binning,
            t: self.t,
            errors: vec![0.0; binning.n_bins],
            density,
            mass0: self.mass0,
            mass1: self.mass1,
            boundary_errors: Some([0.0, 0.0]),
        })
    }
}

/// See [`DensityGrid::to_snapshot`].
pub fn fp_snapshot_to_bins(grid: &DensityGrid, binning: Binning) -> Result<DistributionSnapshot> {
    grid.to_snapshot(binning)
}

/// Starting density of [`solve_fp`].
#[derive(Debug, Clone)]
pub enum InitialCondition {
    /// Delta at `rho00 = x0`, realised as [`DensityGrid::smoothed_delta`].
    Delta(f64),
    /// A `z` grid with the solver's geometry.
    Grid(DensityGrid),
}

/// Tridiagonal Crank-Nicolson operator for the measurement part, in flux
/// form on cell masses.
struct MeasureOperator {
    n: usize,
    dt: f64,
    // flux through face f: F_f = left[f] m_{f-1} + right[f] m_f
    left: Vec<f64>,
    right: Vec<f64>,
    // Thomas factorisation of (I - dt/2 M)
    sub: Vec<f64>,
    c_prime: Vec<f64>,
    inv_denom: Vec<f64>,
    rhs: Vec<f64>,
}

impl MeasureOperator {
    fn new(g: f64, edges: &[f64]) -> Self {
        let n = edges.len() - 1;
        let h = edges[1] - edges[0];
        let diff = 0.5 * g / (h * h);
        let left = edges
            .iter()
            .map(|&e| g * e.tanh() / (2.0 * h) + diff)
            .collect();
        let right = edges
            .iter()
            .map(|&e| g * e.tanh() / (2.0 * h) - diff)
            .collect();
        MeasureOperator {
            n,
            dt: f64::NAN,
            left,
            right,
            sub: vec![0.0; n],
            c_prime: vec![0.0; n],
            inv_denom: vec![0.0; n],
            rhs: vec![0.0; n],
        }
    }

    fn factor(&mut self, dt: f64) {
        if dt == self.dt {
            return;
        }
        self.dt = dt;
        let n = self.n;
        let hdt = 0.5 * dt;
        let mut prev_c = 0.0;
        for i in 0..n {
            // dm_i/dt = L_i m_{i-1} + (R_i - L_{i+1}) m_i - R_{i+1} m_{i+1}
            let a = if i > 0 { -hdt * self.left[i] } else { 0.0 };
            let b = 1.0 - hdt * (self.right[i] - self.left[i + 1]);
            let c = if i + 1 < n { hdt * self.right[i + 1] } else { 0.0 };
            let denom = b - a * prev_c;
            self.sub[i] = a;
            self.inv_denom[i] = 1.0 / denom;
            self.c_prime[i] = c / denom;
            prev_c = self.c_prime[i];
        }
    }

    /// Advances `m` by `dt`, returning the outflow through the lower and upper
    /// grid ends.
    fn step(&mut self, m: &mut [f64], dt: f64) -> (f64, f64) {
        self.factor(dt);
        let n = self.n;
        let hdt = 0.5 * dt;
        for i in 0..n {
            let lower = if i > 0 { self.left[i] * m[i - 1] } else { 0.0 };
            let upper = if i + 1 < n { self.right[i + 1] * m[i + 1] } else { 0.0 };
            let dm = lower + (self.right[i] - self.left[i + 1]) * m[i] - upper;
            self.rhs[i] = m[i] + hdt * dm;
        }
        let out_lo_old = -self.right[0] * m[0];
        let out_hi_old = self.left[n] * m[n - 1];
        // forward sweep then back substitution
        let mut prev = 0.0;
        for i in 0..n {
            let v = (self.rhs[i] - self.sub[i] * prev) * self.inv_denom[i];
            self.rhs[i] = v;
            prev = v;
        }
        m[n - 1] = self.rhs[n - 1];
        for i in (0..n - 1).rev() {
            m[i] = self.rhs[i] - self.c_prime[i] * m[i + 1];
        }
        let out_lo_new = -self.right[0] * m[0];
        let out_hi_new = self.left[n] * m[n - 1];
        (hdt * (out_lo_old + out_lo_new), hdt * (out_hi_old + out_hi_new))
    }
}

/// Cumulative mass under a piecewise-linear density with MC-limited slopes,
/// used to remap along the relaxation characteristics. Each cell keeps its
/// mass and the reconstruction stays non-negative, so the CDF is monotone.
struct CumulativeMass<'a> {
    edges: &'a [f64],
    cum: Vec<f64>,
    dens: Vec<f64>,
    slopes: Vec<f64>,
    h: f64,
}

impl<'a> CumulativeMass<'a> {
    fn new(edges: &'a [f64], weights: &[f64], mass0: f64) -> Self {
        let n = weights.len();
        let h = edges[1] - edges[0];
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = mass0;
        cum.push(acc);
        for w in weights {
            acc += w;
            cum.push(acc);
        }
        let dens: Vec<f64> = weights.iter().map(|w| w / h).collect();
        let mut slopes = vec![0.0; n];
        for k in 1..n - 1 {
            let l = (dens[k] - dens[k - 1]) / h;
            let r = (dens[k + 1] - dens[k]) / h;
            if l * r > 0.0 {
                let c = 0.5 * (l + r);
                slopes[k] = c.signum() * c.abs().min(2.0 * l.abs()).min(2.0 * r.abs());
            }
        }
        CumulativeMass {
            edges,
            cum,
            dens,
            slopes,
            h,
        }
    }

    fn eval(&self, z: f64) -> f64 {
        let n = self.dens.len();
        if z <= self.edges[0] {
            return self.cum[0];
        }
        if z >= self.edges[n] {
            return self.cum[n];
        }
        let k = (((z - self.edges[0]) / self.h) as usize).min(n - 1);
        let u = (z - self.edges[k]).clamp(0.0, self.h);
        let v = self.cum[k] + self.dens[k] * u + 0.5 * self.slopes[k] * u * (u - self.h);
        v.clamp(self.cum[k], self.cum[k + 1])
    }
}

/// Exact relaxation over `delta = dt / T1` applied to a `z` grid.
fn relax_remap(grid: &mut DensityGrid, delta: f64) {
    if delta == 0.0 {
        return;
    }
    let growth = delta.exp_m1();
    let interior_plus0 = grid.mass0 + grid.weights.iter().sum::<f64>();
    let cm = CumulativeMass::new(&grid.edges, &grid.weights, grid.mass0);
    // C'(E) = mass that ends at or below E = C(preimage of E)
    let mut prev = 0.0;
    let mut new_cum: Vec<f64> = grid
        .edges
        .iter()
        .map(|&e| {
            let arg = -growth * (-2.0 * e).exp();
            let c = if arg <= -1.0 {
                // preimage below rho00 = 0: nothing ends here
                0.0
            } else {
                cm.eval(e - 0.5 * delta + 0.5 * arg.ln_1p())
            };
            prev = c.max(prev);
            prev
        })
        .collect();
    let n = grid.weights.len();
    grid.mass0 = new_cum[0];
    for i in 0..n {
        grid.weights[i] = new_cum[i + 1] - new_cum[i];
    }
    grid.mass1 += interior_plus0 - new_cum[n];
    new_cum.clear();
}

/// Evolves the density from `t = 0` and returns a grid at each requested
/// time (microseconds, non-decreasing).
pub fn solve_fp(
    initial: InitialCondition,
    g: f64,
    t1: f64,
    t_grid: &[f64],
    config: &FpConfig,
) -> Result<Vec<DensityGrid>> {
    config.validate()?;
    if !(g >= 0.0 && g.is_finite()) {
        return Err(Error::domain("g", g, ">= 0 and finite"));
    }
    if !(t1 > 0.0) {
        return Err(Error::domain("T1", t1, "> 0"));
    }
    if t_grid.windows(2).any(|w| w[1] < w[0]) || t_grid.iter().any(|t| !(*t >= 0.0) || t.is_infinite()) {
        return Err(Error::Inconsistent("output times must be finite, non-negative and sorted".into()));
    }
    let mut grid = match initial {
        InitialCondition::Delta(x0) => DensityGrid::smoothed_delta(x0, config)?,
        InitialCondition::Grid(g0) => {
            if g0.coordinate != Coordinate::Z || g0.edges != config.edges() {
                return Err(Error::Inconsistent("initial grid must use the solver's z geometry".into()));
            }
            g0
        }
    };
    let start_mass = grid.total_mass();
    if (start_mass - 1.0).abs() > 1e-10 {
        return Err(Error::Inconsistent(format!("initial mass {start_mass} is not 1")));
    }

    let h = config.cell_width();
    let diffusion = 0.5 * g;
    let cn_step = if g > 0.0 { config.cfl * h * h / diffusion } else { f64::INFINITY };
    // without measurement the relaxation flow composes exactly: no splitting
    let split_step = if t1.is_finite() && g > 0.0 { config.relax_step * t1 } else { f64::INFINITY };
    let mut op = (g > 0.0).then(|| MeasureOperator::new(g, &grid.edges));

    let mut out = Vec::with_capacity(t_grid.len());
    let mut t = grid.t;
    for &target in t_grid {
        while t < target {
            let outer = (target - t).min(split_step);
            let half_delta = if t1.is_finite() { 0.5 * outer / t1 } else { 0.0 };
            relax_remap(&mut grid, half_delta);
            if let Some(op) = op.as_mut() {
                let subs = (outer / cn_step).ceil().max(1.0) as usize;
                let dt = outer / subs as f64;
                for _ in 0..subs {
                    let (lo, hi) = op.step(&mut grid.weights, dt);
                    grid.mass0 += lo;
                    grid.mass1 += hi;
                }
            }
            relax_remap(&mut grid, half_delta);
            t = if outer == target - t { target } else { t + outer };
            check_grid(&grid, t)?;
        }
        grid.t = target;
        out.push(grid.clone());
    }
    Ok(out)
}

fn check_grid(grid: &DensityGrid, t: f64) -> Result<()> {
    let min = grid.weights.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-12 || grid.mass0 < -1e-12 || grid.mass1 < -1e-12 {
        return Err(Error::SchemeFailure {
            t,
            reason: format!("negative density {min}"),
        });
    }
    let drift = (grid.total_mass() - 1.0).abs();
    if drift > 1e-8 || drift.is_nan() {
        return Err(Error::SchemeFailure {
            t,
            reason: format!("mass drift {drift}"),
        });
    }
    Ok(())
}
