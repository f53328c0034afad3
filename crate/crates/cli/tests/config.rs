use symflow::config::PipelineConfig;
use symflow::run_pipeline;
use symflow_core::Error;

#[test]
fn empty_toml_gives_defaults() {
    let c = PipelineConfig::from_toml("").unwrap();
    assert_eq!(c, PipelineConfig::default());
    assert_eq!(c.model.matrix, vec![vec![2, 1], vec![1, 1]]);
    assert_eq!(c.suites.enabled, (1..=9).collect::<Vec<u8>>());
}

#[test]
fn toml_round_trip() {
    let mut c = PipelineConfig { seed: 99, ..Default::default() };
    c.sampling.orbits = 13;
    c.hyperbolicity.rho = 0.08;
    let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn partial_tables_and_fixed_speed() {
    let text = r#"
        seed = 3
        [model]
        matrix = [[2, 1], [1, 1]]
        roof = 2.0
        speed = { fixed = 0.5 }
        beta = 1.0
        [profile]
        kind = "paper"
    "#;
    let c = PipelineConfig::from_toml(text).unwrap();
    assert_eq!(c.seed, 3);
    assert_eq!(c.model.roof, 2.0);
    assert_eq!(c.profile.0, symflow_core::charts::ScaleProfile::Paper);
    assert_eq!(c.sampling, Default::default());
}

#[test]
fn chi_at_least_one_is_rejected_before_any_stage() {
    for chi in [1.0, 1.5] {
        let text = format!("[hyperbolicity]\nrho = 0.1\nchi = {chi}\neps = 1e-3\nhorizon = 2.5\nintegral_horizon = 20.0\nsimpson_step = 5e-3\ntail_tolerance = 1e-8\n");
        assert!(matches!(PipelineConfig::from_toml(&text), Err(Error::Config(_))));
        let mut c = PipelineConfig::default();
        c.hyperbolicity.chi = chi;
        let err = run_pipeline(&c).unwrap_err();
        assert_eq!(err.stage, "config");
        assert!(matches!(err.source, Error::Config(_)));
    }
}

#[test]
fn other_ranges_are_validated() {
    let base = PipelineConfig::default();
    let cases: Vec<Box<dyn Fn(&mut PipelineConfig)>> = vec![
        Box::new(|c| c.hyperbolicity.rho = 0.3),
        Box::new(|c| c.hyperbolicity.eps = 0.05),
        Box::new(|c| c.hyperbolicity.chi = 0.0),
        Box::new(|c| c.model.beta = 1.5),
        Box::new(|c| c.sampling.window = 500),
        Box::new(|c| c.suites.enabled = vec![10]),
        Box::new(|c| c.suites.truncations = vec![100]),
        Box::new(|c| c.tolerances.markov = -1.0),
    ];
    for f in cases {
        let mut c = base.clone();
        f(&mut c);
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
    assert!(base.validate().is_ok());
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(PipelineConfig::from_toml("sede = 3").is_err());
    assert!(PipelineConfig::from_toml("[sampling]\norbitz = 3").is_err());
}
