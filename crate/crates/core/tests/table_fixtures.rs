//! Published feature values at -1, 0 and +1 on the normalized scale.

use prosody_core::features::{denormalize, normalize_value};

// (feature, -1.0, 0.0, +1.0, decimals printed)
const ROWS: [(&str, f64, f64, f64, i32); 5] = [
    ("pitch", 144.2, 234.0, 323.7, 1),
    ("pitch_range", 50.9, 355.8, 660.8, 1),
    ("duration", 32.7, 117.6, 202.5, 1),
    ("energy", -26.2, -20.7, -15.2, 1),
    ("tilt", -0.997, -0.978, -0.958, 3),
];

fn stats(lo: f64, hi: f64) -> (f64, f64) {
    (0.5 * (lo + hi), (hi - lo) / 6.0)
}

#[test]
fn denormalize_reproduces_all_fifteen_values() {
    for (name, lo, mid, hi, decimals) in ROWS {
        let (m, sigma) = stats(lo, hi);
        let tol = 0.5 * 10f64.powi(-decimals) + 1e-9;
        for (b, printed) in [(-1.0, lo), (0.0, mid), (1.0, hi)] {
            let v = denormalize(b, m, sigma).unwrap();
            assert!((v - printed).abs() <= tol, "{name} at {b}: {v} vs {printed}");
        }
    }
}

#[test]
fn normalize_inverts_denormalize() {
    for (_, lo, _, hi, _) in ROWS {
        let (m, sigma) = stats(lo, hi);
        for i in 0..=40 {
            let b = -1.0 + 0.05 * i as f64;
            let back = normalize_value(denormalize(b, m, sigma).unwrap(), m, sigma);
            assert!((back - b).abs() <= 1e-12, "{b} -> {back}");
        }
    }
}

#[test]
fn values_beyond_three_sigma_clip() {
    for (_, lo, _, hi, _) in ROWS {
        let (m, sigma) = stats(lo, hi);
        assert_eq!(normalize_value(hi + 4.0 * sigma, m, sigma), 1.0);
        assert_eq!(normalize_value(lo - 4.0 * sigma, m, sigma), -1.0);
        assert!(denormalize(1.2, m, sigma).is_err());
        assert!(denormalize(-1.0001, m, sigma).is_err());
    }
}
