use forcebench_wasm::{energy_balance, regrid_tas, spectral_compare};

#[test]
fn energy_balance_approaches_equilibrium_after_abrupt_forcing() {
    let r = energy_balance("abrupt4x", 1.2, 8.0).unwrap();
    assert_eq!(r.years.len(), 150);
    assert_eq!(r.years[0], 1850.0);
    let last = *r.warming.last().unwrap();
    assert!((last / r.equilibrium - 1.0).abs() < 0.01, "{last} vs {}", r.equilibrium);
    assert!(energy_balance("nope", 1.2, 8.0).is_err());
}

#[test]
fn regridding_keeps_the_global_mean() {
    let r = regrid_tas((48, 96), (12, 24), 6, 1).unwrap();
    assert_eq!(r.target.values.len(), 12 * 24);
    assert!((r.source.global_mean - r.target.global_mean).abs() < 1e-10 * r.source.global_mean.abs());
}

#[test]
fn shifting_leaves_the_spectrum_unchanged() {
    let same = spectral_compare(7, 0.0, 3).unwrap();
    assert!(same.psd < 1e-20);
    let rough = spectral_compare(7, 0.5, 3).unwrap();
    assert!(rough.psd > 0.0 && rough.magnitude > 0.0);
}
