#![no_main]

use libfuzzer_sys::fuzz_target;
use w2core::measures::{sample_points, SamplableMeasure};
use w2core::SeedSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(m) = SamplableMeasure::from_json(text) else {
        return;
    };
    let pts = sample_points(&m, SeedSpec::new(1, 0), 0, 8);
    assert_eq!(pts.len(), 8 * m.dim());

    let again = serde_json::to_string(m.config()).unwrap();
    let back = SamplableMeasure::from_json(&again).unwrap();
    assert_eq!(sample_points(&back, SeedSpec::new(1, 0), 0, 8), pts);
});
