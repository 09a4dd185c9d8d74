use pce_lab::limit::LimitSpec;
use pcelab::{classification, load_limit, load_scenario, BindingError};

fn config(name: &str) -> String {
    format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn default_scenario_is_the_two_signal_market() {
    let s = load_scenario(None).unwrap();
    assert_eq!(s, pce_lab::market::MarketScenario::two_signal_example());
    assert_eq!(load_scenario(Some(&config("two_signal.toml"))).unwrap(), s);
}

#[test]
fn config_errors_keep_their_kind() {
    match load_scenario(Some("/nonexistent.toml")) {
        Err(BindingError::Config(m)) => assert!(m.contains("parse error")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn limit_configs_load() {
    let (spec, cfg) = load_limit(Some(&config("limit_reference.toml"))).unwrap();
    assert_eq!(spec.id, "reference");
    assert_eq!(cfg.samples, 10_000);
    assert_eq!(spec.n_range, vec![4, 6, 8, 10, 12]);
}

#[test]
fn classification_matches_the_three_regimes() {
    assert_eq!(
        classification(&LimitSpec::power_law(1.2)).unwrap(),
        (Some(true), Some(f64::INFINITY))
    );
    let (reveals, q) = classification(&LimitSpec::power_law(0.4)).unwrap();
    assert_eq!(reveals, Some(false));
    assert!(q.unwrap().is_finite());
}
