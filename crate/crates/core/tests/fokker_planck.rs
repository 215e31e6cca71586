use qtraj_core::fokker_planck::{
    analytic_distribution_rho, analytic_distribution_z, fp_snapshot_to_bins, solve_fp, DensityGrid,
    FpConfig, InitialCondition,
};
use qtraj_core::state::to_rho;
use qtraj_core::Binning;

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn rho_density_is_normalised() {
    let d = analytic_distribution_rho(0.305, 0.6).unwrap();
    let total = simpson(|r| d.pdf(r), 0.0, 1.0, 400_000);
    assert!((total - 1.0).abs() < 1e-8, "{total}");
}

#[test]
fn rho_density_mode_matches_mapped_z_mode() {
    let mix = analytic_distribution_z(0.305, 1.2).unwrap();
    let d = analytic_distribution_rho(0.305, 1.2).unwrap();
    for (lo, hi) in [(0.0, 3.0), (-4.0, -0.5)] {
        let n = 30_000;
        let argmax = |f: &dyn Fn(f64) -> f64, a: f64, b: f64| {
            (0..=n)
                .map(|i| a + (b - a) * i as f64 / n as f64)
                .max_by(|x, y| f(*x).total_cmp(&f(*y)))
                .unwrap()
        };
        let z_mode = argmax(&|z| mix.pdf(z), lo, hi);
        // same density, expressed per unit z but parametrised by rho
        let rho_mode = argmax(&|r| d.pdf(r) * 2.0 * r * (1.0 - r), to_rho(lo), to_rho(hi));
        assert!((to_rho(z_mode) - rho_mode).abs() < 0.01, "{z_mode} {rho_mode}");
    }
    // in rho itself the Jacobian pushes both maxima towards the boundaries
    let grid: Vec<f64> = (1..100_000).map(|i| i as f64 / 100_000.0).collect();
    let lower = grid[..50_000].iter().copied().max_by(|a, b| d.pdf(*a).total_cmp(&d.pdf(*b))).unwrap();
    let upper = grid[50_000..].iter().copied().max_by(|a, b| d.pdf(*a).total_cmp(&d.pdf(*b))).unwrap();
    assert!(lower < 0.01 && upper > 0.99);
}

#[test]
fn no_relaxation_matches_analytic() {
    let cfg = FpConfig::default();
    let g = 0.03;
    let taus = [0.1, 0.5, 1.0, 2.0];
    let times: Vec<f64> = taus.iter().map(|t| t / g).collect();
    for x0 in [0.305, 0.5, 0.7] {
        let grids = solve_fp(InitialCondition::Delta(x0), g, f64::INFINITY, &times, &cfg).unwrap();
        for (grid, &tau) in grids.iter().zip(&taus) {
            assert!((grid.total_mass() - 1.0).abs() <= 1e-10);
            let num = fp_snapshot_to_bins(grid, Binning::default()).unwrap();
            assert!((num.total_mass() - grid.total_mass()).abs() < 1e-12);
            let exact = analytic_distribution_rho(x0, tau)
                .unwrap()
                .snapshot(Binning::default(), grid.t)
                .unwrap();
            let l1 = num.l1_distance(&exact).unwrap();
            assert!(l1 < 1e-3, "x0={x0} tau={tau} L1={l1}");
        }
    }
}

#[test]
fn first_moment_is_conserved_without_relaxation() {
    let cfg = FpConfig::default();
    let start = DensityGrid::smoothed_delta(0.305, &cfg).unwrap().mean_rho();
    let grids = solve_fp(InitialCondition::Delta(0.305), 0.03, f64::INFINITY, &[5.0, 20.0, 40.0, 66.0], &cfg).unwrap();
    for g in &grids {
        assert!((g.mean_rho() - start).abs() < 1e-6, "{} vs {start}", g.mean_rho());
    }
}

fn rho_sd(grid: &DensityGrid) -> f64 {
    let (mut m1, mut m2) = (grid.mass1, grid.mass1);
    for (z, w) in grid.nodes().iter().zip(&grid.weights) {
        let r = to_rho(*z);
        m1 += w * r;
        m2 += w * r * r;
    }
    (m2 - m1 * m1).max(0.0).sqrt()
}

#[test]
fn relaxation_alone_moves_a_delta() {
    let cfg = FpConfig::default();
    let t1 = 45.0;
    let times = [5.0, 20.0, 40.0];
    let sd0 = rho_sd(&DensityGrid::smoothed_delta(0.305, &cfg).unwrap());
    let grids = solve_fp(InitialCondition::Delta(0.305), 0.0, t1, &times, &cfg).unwrap();
    for (grid, t) in grids.iter().zip(times) {
        let expected = 1.0 - 0.695 * (-t / t1).exp();
        let rel = (grid.mean_rho() - expected).abs() / expected;
        assert!(rel < 1e-4, "t={t} {} vs {expected}", grid.mean_rho());
        let sd = rho_sd(grid);
        assert!(sd < 0.01 && sd < 1.5 * sd0 * (-t / t1).exp(), "t={t} sd={sd} sd0={sd0}");
    }
}

#[test]
fn mean_follows_relaxation_law() {
    let cfg = FpConfig::default();
    let t1 = 45.0;
    let times = [5.0, 20.0, 40.0];
    let start = DensityGrid::smoothed_delta(0.305, &cfg).unwrap().mean_rho();
    let grids = solve_fp(InitialCondition::Delta(0.305), 0.03, t1, &times, &cfg).unwrap();
    for (grid, t) in grids.iter().zip(times) {
        assert!((grid.total_mass() - 1.0).abs() <= 1e-10);
        let expected = 1.0 - (1.0 - start) * (-t / t1).exp();
        let rel = (grid.mean_rho() - expected).abs() / expected;
        assert!(rel < 1e-4, "t={t} rel={rel}");
    }
}

#[test]
fn rebinning_matches_direct_integration() {
    let cfg = FpConfig::default();
    for (x0, tau) in [(0.305, 0.1), (0.305, 1.2), (0.5, 2.0)] {
        let mix = analytic_distribution_z(x0, tau).unwrap();
        let grid = DensityGrid::from_mixture(&mix, &cfg, 0.0).unwrap();
        let s = fp_snapshot_to_bins(&grid, Binning::default()).unwrap();
        assert!((s.total_mass() - grid.total_mass()).abs() < 1e-12);
        let exact = analytic_distribution_rho(x0, tau)
            .unwrap()
            .snapshot(Binning::default(), 0.0)
            .unwrap();
        for (a, b) in s.density.iter().zip(&exact.density) {
            assert!((a - b).abs() < 1e-6, "x0={x0} tau={tau}: {a} vs {b}");
        }
    }
}

#[test]
fn delta_start_fills_one_bin() {
    let cfg = FpConfig::default();
    let grid = DensityGrid::point_mass(0.305, &cfg).unwrap();
    let s = fp_snapshot_to_bins(&grid, Binning::default()).unwrap();
    assert_eq!(s.density.iter().filter(|d| **d > 1e-12).count(), 1);
}
