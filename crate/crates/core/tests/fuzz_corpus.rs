//! Replays the checked-in fuzz corpus through the parsers. Seed files named
//! `valid_*` must parse and round-trip; `invalid_*` must be rejected.

use std::fs;
use std::path::PathBuf;

use w2core::io::{parse_points_csv, write_points_csv};
use w2core::measures::SamplableMeasure;
use w2core::sim::ExperimentConfig;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|entry| {
            let path = entry.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            (name, fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(out.iter().any(|(n, _)| n.starts_with("valid_")));
    assert!(out.iter().any(|(n, _)| n.starts_with("invalid_")));
    out
}

fn expect_valid(name: &str) -> bool {
    assert!(name.starts_with("valid_") || name.starts_with("invalid_"), "{name}");
    name.starts_with("valid_")
}

#[test]
fn points_csv_corpus() {
    for (name, data) in seeds("points_csv") {
        let parsed = parse_points_csv(data.as_slice());
        assert_eq!(parsed.is_ok(), expect_valid(&name), "{name}: {parsed:?}");
        if let Ok(m) = parsed {
            let mut buf = Vec::new();
            write_points_csv(&mut buf, &m).unwrap();
            let back = parse_points_csv(buf.as_slice()).unwrap();
            assert_eq!(back.points_flat(), m.points_flat(), "{name}");
        }
    }
}

#[test]
fn distribution_json_corpus() {
    for (name, data) in seeds("distribution_json") {
        let parsed = SamplableMeasure::from_json(std::str::from_utf8(&data).unwrap());
        assert_eq!(parsed.is_ok(), expect_valid(&name), "{name}: {parsed:?}");
    }
}

#[test]
fn experiment_config_corpus() {
    for (name, data) in seeds("experiment_config") {
        let parsed = ExperimentConfig::from_json(std::str::from_utf8(&data).unwrap());
        assert_eq!(parsed.is_ok(), expect_valid(&name), "{name}: {parsed:?}");
        if let Ok(cfg) = parsed {
            let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
            assert_eq!(back, cfg, "{name}");
            assert_eq!(back.hash(), cfg.hash());
        }
    }
}
