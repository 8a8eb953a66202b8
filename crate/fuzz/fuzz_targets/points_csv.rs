#![no_main]

use libfuzzer_sys::fuzz_target;
use w2core::io::{parse_points_csv, write_points_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(m) = parse_points_csv(data) else {
        return;
    };
    let total: f64 = m.weights().iter().sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert!(m.points_flat().iter().all(|v| v.is_finite()));

    // written files parse back to the same support
    let mut buf = Vec::new();
    write_points_csv(&mut buf, &m).unwrap();
    let back = parse_points_csv(buf.as_slice()).unwrap();
    assert_eq!(back.points_flat(), m.points_flat());
    for (a, b) in back.weights().iter().zip(m.weights()) {
        assert!((a - b).abs() <= 1e-12);
    }
});
