//! Kept apart from the other trainer tests: it mutates the process
//! environment.

use omdet::train::{TrainConfig, OUTPUT_DIR_ENV};

#[test]
fn environment_overrides_the_output_directory() {
    let cfg = TrainConfig { output_dir: Some("runs/a".into()), base_dir: Some("/cfg".into()), ..TrainConfig::default() };
    std::env::remove_var(OUTPUT_DIR_ENV);
    assert_eq!(cfg.output_dir().unwrap(), std::path::Path::new("/cfg/runs/a"));
    std::env::set_var(OUTPUT_DIR_ENV, "/elsewhere");
    assert_eq!(cfg.output_dir().unwrap(), std::path::Path::new("/elsewhere"));
    assert_eq!(TrainConfig::default().output_dir().unwrap(), std::path::Path::new("/elsewhere"));
    // an empty value counts as unset
    std::env::set_var(OUTPUT_DIR_ENV, "");
    assert_eq!(cfg.output_dir().unwrap(), std::path::Path::new("/cfg/runs/a"));
    std::env::remove_var(OUTPUT_DIR_ENV);
    assert!(TrainConfig::default().output_dir().is_none());
}
