use std::path::Path;

use deirl::eirl::Injection;
use deirl::evalharness::{self, StudyConfig};

fn shipped(name: &str) -> StudyConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    StudyConfig::load(&path).unwrap()
}

#[test]
fn shipped_hsv_config_is_the_default() {
    let cfg = shipped("hsv.ini");
    let def = StudyConfig::hsv_default();
    assert_eq!(cfg.canonical(), def.canonical());
    assert_eq!(cfg.hash(), def.hash());
}

#[test]
fn file_plant_config_runs_the_oracle() {
    let cfg = shipped("lti.ini");
    assert_eq!(cfg.mode, Injection::Si);
    assert_eq!(cfg.loop_specs().unwrap().len(), 2);
    let report = evalharness::cmd_oracle(&cfg).unwrap();
    assert!(!report.acceptance_failed());
    assert!(report.files.contains_key("oracle_gains.csv"));
}

#[test]
fn unknown_keys_are_rejected() {
    let err = StudyConfig::parse("[study]\nplant = builtin\n[loop1]\ngain = 3\n", None).unwrap_err();
    assert!(err.to_string().contains("gain"), "{err}");
}

#[test]
fn every_row_carries_the_config_hash() {
    let cfg = StudyConfig::builtin_default();
    let report = evalharness::cmd_eval1(&cfg).unwrap();
    for (name, bytes) in &report.files {
        let mut rd = csv::Reader::from_reader(bytes.as_slice());
        let headers = rd.headers().unwrap().clone();
        let col = headers.iter().position(|h| h == "config_hash").unwrap_or_else(|| panic!("{name}: {headers:?}"));
        for row in rd.records() {
            assert_eq!(&row.unwrap()[col], report.config_hash, "{name}");
        }
    }
}
