use std::path::Path;

use conformer_core::config::RunConfig;
use conformer_core::rng::{standard_normal_vec, SeedSplitter};
use proptest::prelude::*;

proptest! {
    #[test]
    fn streams_are_reproducible_and_name_dependent(root in any::<u64>(), i in any::<u64>(), j in any::<u64>()) {
        let s = SeedSplitter::new(root);
        prop_assert_eq!(standard_normal_vec(&mut s.stream("a", &[i]), 4), standard_normal_vec(&mut s.stream("a", &[i]), 4));
        prop_assert_ne!(s.derive("a", &[i]), s.derive("b", &[i]));
        if i != j {
            prop_assert_ne!(s.derive("a", &[i]), s.derive("a", &[j]));
        }
        prop_assert_ne!(s.derive("a", &[i, j]), s.derive("a", &[i]));
        prop_assert_eq!(s.child("x", &[i]).derive("y", &[]), SeedSplitter::new(s.derive("x", &[i])).derive("y", &[]));
    }
}

fn shipped(name: &str) -> RunConfig {
    RunConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)).unwrap()
}

#[test]
fn shipped_configs_parse_and_validate() {
    for name in ["default.conf", "desk.conf"] {
        shipped(name).validate().unwrap();
    }
    let desk = shipped("desk.conf");
    assert_eq!(desk.model_config().hidden, 16);
}

#[test]
fn text_round_trip_preserves_every_key() {
    let mut cfg = shipped("desk.conf");
    cfg.set("lambda", "0.25").unwrap();
    cfg.set("mmd_bandwidth", "1.5").unwrap();
    let again = RunConfig::parse_str(&cfg.to_text()).unwrap();
    assert_eq!(again.to_text(), cfg.to_text());
}

#[test]
fn parse_errors_carry_line_numbers() {
    let err = RunConfig::parse_str("# comment\nhidden = 8\nlayers = three\n").unwrap_err();
    assert!(matches!(err, conformer_core::Error::Parse { line: 3, .. }), "{err}");
    let err = RunConfig::parse_str("hidden 8\n").unwrap_err();
    assert!(matches!(err, conformer_core::Error::Parse { line: 1, .. }), "{err}");
    assert!(RunConfig::parse_str("colour = blue\n").is_err());
}

#[test]
fn overrides_apply_on_top_of_files() {
    let mut cfg = shipped("default.conf");
    cfg.apply_overrides([("epochs", "3"), ("mode", "ablation_no_recon")]).unwrap();
    assert_eq!(cfg.train_config().epochs, 3);
    assert_eq!(cfg.train_config().mode.name(), "ablation_no_recon");
    assert!(cfg.apply_overrides([("mode", "partial")]).is_err());
}
