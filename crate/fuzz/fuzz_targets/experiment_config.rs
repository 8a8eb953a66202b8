#![no_main]

use libfuzzer_sys::fuzz_target;
use w2core::sim::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = ExperimentConfig::from_json(text) else {
        return;
    };
    let _ = cfg.p.build();
    let _ = cfg.q.build();
    let _ = cfg.m_schedule();

    let again = serde_json::to_string(&cfg).unwrap();
    let back = ExperimentConfig::from_json(&again).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
});
