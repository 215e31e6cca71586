use proptest::prelude::*;
use qtraj_core::bayesian::{RecordHeader, RecordSet};
use qtraj_core::io::{
    ensemble_to_binary, histogram_to_text, parse_ensemble, parse_histogram, parse_records, records_to_binary,
    records_to_text, FitReport, SliceReport,
};
use qtraj_core::{Binning, DistributionSnapshot, TrajectoryEnsemble};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, any::<f64>().prop_filter("finite", |v| v.is_finite())]
}

fn record_set() -> impl Strategy<Value = RecordSet> {
    (0usize..6, 0usize..6, 1e-3..10.0f64, -1e6..1e6f64, 0.01..100.0f64, 0.0..=1.0f64, any::<u64>(), any::<bool>())
        .prop_flat_map(|(n_traj, n_steps, dt, i0, sigma, x0, seed, relax)| {
            prop::collection::vec(finite(), n_traj * n_steps).prop_map(move |currents| {
                let header = RecordHeader {
                    n_traj,
                    n_steps,
                    dt,
                    i0,
                    i1: i0 - 1.0,
                    sigma,
                    t1: if relax { 45.0 } else { f64::INFINITY },
                    x0,
                    master_seed: seed,
                };
                RecordSet::new(header, currents).unwrap()
            })
        })
}

fn snapshot() -> impl Strategy<Value = DistributionSnapshot> {
    (1usize..120, 1.0..1.5f64, 0.0..100.0f64, any::<bool>()).prop_flat_map(|(n, stretch, t, with_err)| {
        let w = stretch / n as f64;
        (
            prop::collection::vec(0.0..1.0f64, n),
            prop::collection::vec(0.0..1e-2f64, n),
            0.0..1.0f64,
            0.0..1.0f64,
        )
            .prop_map(move |(density, errors, mass0, mass1)| DistributionSnapshot {
                binning: Binning { n_bins: n, bin_width: w },
                t,
                density,
                errors,
                mass0,
                mass1,
                boundary_errors: with_err.then_some([mass0 / 7.0, mass1 / 3.0]),
            })
    })
}

proptest! {
    #[test]
    fn binary_records_round_trip(rs in record_set()) {
        let bytes = records_to_binary(&rs);
        let back = parse_records(&bytes).unwrap();
        prop_assert_eq!(records_to_binary(&back), bytes);
    }

    #[test]
    fn text_records_round_trip(rs in record_set()) {
        let text = records_to_text(&rs);
        let back = parse_records(text.as_bytes()).unwrap();
        prop_assert_eq!(records_to_text(&back), text.clone());
        prop_assert_eq!(records_to_binary(&back), records_to_binary(&rs));
    }

    #[test]
    fn ensemble_round_trip(n_traj in 0usize..5, n_steps in 0usize..5, dt in 1e-3..5.0f64, seed in any::<u64>()) {
        let values: Vec<f64> = (0..n_traj * (n_steps + 1))
            .map(|k| ((seed.wrapping_mul(k as u64 + 1) >> 11) as f64) / (1u64 << 53) as f64)
            .collect();
        let ens = TrajectoryEnsemble::new(n_traj, n_steps, dt, values).unwrap();
        let bytes = ensemble_to_binary(&ens);
        prop_assert_eq!(ensemble_to_binary(&parse_ensemble(&bytes).unwrap()), bytes);
    }

    #[test]
    fn histogram_round_trip(s in snapshot()) {
        let text = histogram_to_text(&s);
        let back = parse_histogram(&text).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(histogram_to_text(&back), text);
    }

    #[test]
    fn fit_report_round_trip(tau in 0.0..2.5f64, chi in 0.0..1e4f64, e in prop_oneof![Just(f64::NAN), 0.0..1.0f64], flags in any::<[bool; 3]>()) {
        let report = FitReport {
            slice: vec![SliceReport {
                t_us: 10.0,
                tau_best: tau,
                chi2_min: chi,
                tau_err_dchi2_100: e,
                tau_err_dchi2_1: e / 10.0,
                n_bins: 100,
                min_at_edge: flags[0],
                open_ended_100: flags[1],
                open_ended_1: flags[2],
            }; 2],
        };
        let text = report.to_toml().unwrap();
        prop_assert_eq!(FitReport::parse(&text).unwrap().to_toml().unwrap(), text);
    }
}

#[test]
fn wrong_magic_is_rejected() {
    let rs = RecordSet::new(
        RecordHeader {
            n_traj: 1,
            n_steps: 1,
            dt: 0.5,
            i0: 1.0,
            i1: -1.0,
            sigma: 1.0,
            t1: f64::INFINITY,
            x0: 0.5,
            master_seed: 1,
        },
        vec![0.25],
    )
    .unwrap();
    let mut bytes = records_to_binary(&rs);
    assert!(parse_ensemble(&bytes).is_err());
    bytes.push(0);
    let err = parse_records(&bytes).unwrap_err().to_string();
    assert!(err.contains("byte 92"), "{err}");
}

#[test]
fn off_grid_histogram_is_rejected() {
    let text = "# t_us=1\n# mass0=0\n# mass1=0\n0.005,0.5,0.01\n0.016,0.5,0.01\n";
    assert!(parse_histogram(text).is_err());
}

#[test]
fn atomic_write_replaces_without_leftovers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.csv");
    qtraj_core::io::write_atomic(&path, b"old").unwrap();
    qtraj_core::io::write_atomic(&path, b"new").unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), b"new");
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    assert!(qtraj_core::io::write_atomic(&dir.path().join("missing/h.csv"), b"x").is_err());
}
