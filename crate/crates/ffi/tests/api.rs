use std::ffi::{c_char, CString};
use std::ptr;

use nearfield_ffi::*;

fn small() -> NfSystemConfig {
    NfSystemConfig {
        n_antennas: 64,
        n_rf: 16,
        n_subcarriers: 32,
        n_symbols: 4,
        n_users: 3,
        carrier_hz: 100e9,
        bandwidth_hz: 1e8,
    }
}

fn last_error() -> String {
    let mut needed = 0usize;
    unsafe {
        assert_eq!(
            nf_last_error(ptr::null_mut(), 0, &mut needed),
            NfStatus::BufferTooSmall
        );
        let mut buf = vec![0u8; needed];
        assert_eq!(
            nf_last_error(buf.as_mut_ptr().cast::<c_char>(), buf.len(), &mut needed),
            NfStatus::Ok
        );
        buf.pop();
        String::from_utf8(buf).unwrap()
    }
}

fn new_scenario(cfg: &NfSystemConfig, seed: u64) -> *mut NfScenario {
    let mut sc = ptr::null_mut();
    assert_eq!(
        unsafe { nf_scenario_new_los(cfg, seed, &mut sc) },
        NfStatus::Ok
    );
    assert!(!sc.is_null());
    sc
}

#[test]
fn rayleigh_distance_of_preset_arrays() {
    let mut d = 0.0;
    let thz = NfSystemConfig {
        n_antennas: 256,
        n_rf: 32,
        n_subcarriers: 64,
        n_symbols: 4,
        n_users: 8,
        ..small()
    };
    assert_eq!(unsafe { nf_rayleigh_distance(&thz, &mut d) }, NfStatus::Ok);
    assert!((d - 97.5).abs() < 0.1, "{d}");
    let mmw = NfSystemConfig {
        n_antennas: 128,
        carrier_hz: 30e9,
        ..thz
    };
    assert_eq!(unsafe { nf_rayleigh_distance(&mmw, &mut d) }, NfStatus::Ok);
    assert!((d - 80.6).abs() < 0.1, "{d}");
}

#[test]
fn null_and_invalid_arguments_are_reported() {
    let mut d = 0.0;
    assert_eq!(
        unsafe { nf_rayleigh_distance(ptr::null(), &mut d) },
        NfStatus::NullPointer
    );
    assert!(last_error().contains("cfg"));

    let bad = NfSystemConfig { n_rf: 0, ..small() };
    assert_eq!(
        unsafe { nf_rayleigh_distance(&bad, &mut d) },
        NfStatus::InvalidArgument
    );
    assert!(!last_error().is_empty());

    let mut sc = ptr::null_mut();
    assert_eq!(
        unsafe { nf_scenario_new_los(&bad, 0, &mut sc) },
        NfStatus::InvalidArgument
    );
    assert!(sc.is_null());
    unsafe {
        nf_scenario_free(ptr::null_mut());
        nf_estimate_free(ptr::null_mut());
    }
}

#[test]
fn noiseless_round_trip_recovers_users() {
    let cfg = small();
    let sc = new_scenario(&cfg, 5);
    let (mut p, mut m, mut t) = (0, 0, 0);
    assert_eq!(
        unsafe { nf_scenario_dims(sc, &mut p, &mut m, &mut t) },
        NfStatus::Ok
    );
    assert_eq!((p, m, t), (32, 16, 4));

    let mut y = vec![NfComplex::default(); p * m * t];
    assert_eq!(
        unsafe { nf_scenario_observe(sc, 3.0, 1, y.as_mut_ptr(), y.len() - 1) },
        NfStatus::BufferTooSmall
    );
    assert_eq!(
        unsafe { nf_scenario_observe(sc, f64::INFINITY, 1, y.as_mut_ptr(), y.len()) },
        NfStatus::Ok
    );

    for delay_aided in [0, 1] {
        let mut est = ptr::null_mut();
        assert_eq!(
            unsafe { nf_estimate_los(sc, y.as_ptr(), y.len(), delay_aided, &mut est) },
            NfStatus::Ok,
            "{}",
            last_error()
        );
        let mut nmse = f64::NAN;
        assert_eq!(
            unsafe { nf_estimate_nmse(est, sc, &mut nmse) },
            NfStatus::Ok
        );
        assert!(nmse < 1e-6, "nmse {nmse}");
        for k in 0..cfg.n_users {
            let (mut got, mut truth) = (NfPath::default(), NfPath::default());
            let (mut x, mut yy) = (0.0, 0.0);
            unsafe {
                assert_eq!(
                    nf_estimate_user(est, k, &mut got, &mut x, &mut yy),
                    NfStatus::Ok
                );
                assert_eq!(nf_scenario_user(sc, k, &mut truth), NfStatus::Ok);
            }
            assert!((got.delay - truth.delay).abs() < 1e-11);
            assert!((got.angle - truth.angle).abs() < 1e-4);
            let (tx, ty) = (
                truth.range * truth.angle.cos(),
                truth.range * truth.angle.sin(),
            );
            assert!(((x - tx).powi(2) + (yy - ty).powi(2)).sqrt() < 0.01);
        }
        let mut path = NfPath::default();
        let (mut x, mut yy) = (0.0, 0.0);
        assert_eq!(
            unsafe { nf_estimate_user(est, cfg.n_users, &mut path, &mut x, &mut yy) },
            NfStatus::InvalidArgument
        );
        unsafe { nf_estimate_free(est) };
    }

    let mut est = ptr::null_mut();
    assert_eq!(
        unsafe { nf_estimate_los(sc, y.as_ptr(), y.len() - 1, 0, &mut est) },
        NfStatus::InvalidArgument
    );
    unsafe { nf_scenario_free(sc) };
}

#[test]
fn scenarios_are_seed_deterministic() {
    let cfg = small();
    let (a, b) = (new_scenario(&cfg, 9), new_scenario(&cfg, 9));
    let n = 32 * 16 * 4;
    let (mut ya, mut yb) = (vec![NfComplex::default(); n], vec![NfComplex::default(); n]);
    unsafe {
        assert_eq!(
            nf_scenario_observe(a, 10.0, 4, ya.as_mut_ptr(), n),
            NfStatus::Ok
        );
        assert_eq!(
            nf_scenario_observe(b, 10.0, 4, yb.as_mut_ptr(), n),
            NfStatus::Ok
        );
        nf_scenario_free(a);
        nf_scenario_free(b);
    }
    assert_eq!(ya, yb);
}

#[test]
fn position_bound_scales_with_noise() {
    let cfg = small();
    let sc = new_scenario(&cfg, 2);
    let (mut lo, mut hi) = (vec![0.0; 3], vec![0.0; 3]);
    unsafe {
        assert_eq!(nf_crb_position(sc, 20.0, lo.as_mut_ptr(), 3), NfStatus::Ok);
        assert_eq!(nf_crb_position(sc, 10.0, hi.as_mut_ptr(), 3), NfStatus::Ok);
        assert_eq!(
            nf_crb_position(sc, 10.0, hi.as_mut_ptr(), 2),
            NfStatus::BufferTooSmall
        );
        assert_eq!(
            nf_crb_position(sc, f64::INFINITY, hi.as_mut_ptr(), 3),
            NfStatus::InvalidArgument
        );
        nf_scenario_free(sc);
    }
    for (l, h) in lo.iter().zip(&hi) {
        assert!(*l > 0.0);
        assert!((h / l - 10.0).abs() < 1e-6, "{h} / {l}");
    }
}

#[test]
fn experiment_runs_from_toml() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = CString::new(
        r#"
preset = "los_thz"
sweep = "snr_db"
values = [20]
trials = 2
seed = 4
methods = ["cpd", "crb"]
n_antennas = 32
n_rf = 8
n_subcarriers = 16
n_users = 2
n_angle = 64
n_range = 8
"#,
    )
    .unwrap();
    let dir = CString::new(tmp.path().to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { nf_run_experiment(cfg.as_ptr(), dir.as_ptr(), 1) },
        NfStatus::Ok,
        "{}",
        last_error()
    );
    for f in ["results.csv", "timings.csv", "summary.csv"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }

    let broken = CString::new("trials = 0").unwrap();
    assert_eq!(
        unsafe { nf_run_experiment(broken.as_ptr(), dir.as_ptr(), 1) },
        NfStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { nf_run_experiment(ptr::null(), dir.as_ptr(), 1) },
        NfStatus::NullPointer
    );
}

#[test]
fn errors_are_per_thread() {
    let mut d = 0.0;
    assert_eq!(
        unsafe { nf_rayleigh_distance(ptr::null(), &mut d) },
        NfStatus::NullPointer
    );
    let other = std::thread::spawn(last_error).join().unwrap();
    assert!(other.is_empty());
    assert!(!last_error().is_empty());
}
