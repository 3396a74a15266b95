use std::fs;
use std::path::Path;

use obsdesign::pipeline::{self, guidance_check, DesignConfig, MatcherSpec, PipelineError, EXIT_INVALID};
use obsdesign::propensity::{fit_logistic, FitOptions};
use obsdesign::simbench::{self, BenchDesign, CovariateSpec, OutcomeModel, Scenario};
use obsdesign::Estimand;
use serde_json::{json, Value};

fn scenario(n_treated: usize, n_control: usize, shift: f64, seed: u64) -> Scenario {
    Scenario {
        n_treated,
        n_control,
        covariates: vec![CovariateSpec::shifted("age", shift), CovariateSpec::shifted("income", shift)],
        true_propensity: None,
        true_tau: 1.5,
        outcome: OutcomeModel {
            intercept: 0.0,
            coefficients: vec![1.0, 0.5],
            noise_sd: 1.0,
        },
        seed,
    }
}

fn write_data(dir: &Path) -> String {
    let g = simbench::generate(&scenario(60, 240, 0.5, 21)).unwrap();
    let path = dir.join("data.csv");
    obsdesign::dataset::write_csv(&g.frame, "treat", "y", fs::File::create(&path).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn mapping_api_matches_written_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let golden = [
        json!({"matcher": {"method": "greedy", "caliper": 0.25}}),
        json!({"matcher": {"method": "subclass", "n_subclasses": 4}, "estimator": {"subclass_mode": "fixed_effects"}}),
        json!({"estimand": "ATE", "matcher": {"method": "iptw"}, "bootstrap": 10, "seed": 3}),
    ];
    for (i, mut cfg) in golden.into_iter().enumerate() {
        let out = dir.path().join(format!("out{i}"));
        cfg["data"] = json!(data);
        cfg["out"] = json!(out.to_str().unwrap());
        let value = pipeline::run_json(cfg).unwrap();
        let file: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        assert_eq!(value, file, "config {i}");
        assert!(value["effect"]["tau_hat"].is_number());
    }
}

#[test]
fn mapping_api_reports_validation_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    for cfg in [
        json!({"data": data, "estimand": "ATX"}),
        json!({"data": data, "estimand": "ATE", "matcher": {"method": "greedy"}}),
        json!({"data": data, "matcher": {"method": "subclass", "n_subclasses": 5, "bogus": 1}}),
        json!({"data": data, "bootstrap": 1}),
        json!({"data": dir.path().join("missing.csv")}),
        json!({"data": data, "columns": {"treatment": "nope", "outcome": "y"}}),
        json!({}),
    ] {
        let e = pipeline::run_json(cfg.clone()).unwrap_err();
        assert_eq!(e.code(), EXIT_INVALID, "{cfg}: {e}");
        assert_eq!(e.to_json()["error"]["code"], json!(2));
    }
}

#[test]
fn runtime_failures_are_not_validation_errors() {
    // Disjoint covariate ranges make the logistic fit separate.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sep.csv");
    fs::write(&path, "treat,y,x\n1,1,5\n1,2,6\n1,3,7\n0,1,0\n0,2,1\n0,3,2\n").unwrap();
    let e = pipeline::run_json(json!({"data": path, "matcher": {"method": "greedy"}})).unwrap_err();
    assert!(matches!(e, PipelineError::Propensity(_)), "{e}");
    assert_eq!(e.code(), 1);
}

fn codes(cfg: &DesignConfig, s: &Scenario) -> Vec<&'static str> {
    let g = simbench::generate(s).unwrap();
    let cols = g.frame.covariates.names();
    let m = fit_logistic(&g.frame, &cols, &FitOptions::default()).ok();
    guidance_check(cfg, &g.frame, m.as_ref()).into_iter().map(|a| a.code).collect()
}

#[test]
fn guidance_follows_the_decision_tree() {
    let plenty = scenario(50, 200, 0.3, 1);
    let full = DesignConfig {
        matcher: MatcherSpec::Full { min_ratio: None, max_ratio: None },
        ..DesignConfig::default()
    };
    assert!(codes(&full, &plenty).contains(&"suggest_knn"));

    let iptw = DesignConfig {
        estimand: Estimand::Ate,
        matcher: MatcherSpec::Iptw { trim: None, clamp: false },
        ..DesignConfig::default()
    };
    assert_eq!(codes(&iptw, &scenario(200, 200, 0.0, 2)), Vec::<&str>::new());

    let greedy = DesignConfig::default();
    assert!(codes(&greedy, &scenario(100, 150, 0.3, 3)).contains(&"suggest_full_or_odds"));
}

#[test]
fn disjoint_scores_raise_the_overlap_warning() {
    let mut t = vec![1u8; 10];
    t.extend(vec![0u8; 10]);
    let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
    let frame = obsdesign::dataset::StudyFrame::new(t, vec![("x".into(), x.clone())], None).unwrap();
    let scores: Vec<f64> = (0..20).map(|i| if i < 10 { 0.9 - 0.01 * i as f64 } else { 0.1 + 0.01 * (i - 10) as f64 }).collect();
    let model = obsdesign::propensity::PropensityModel {
        column_names: vec!["x".into()],
        coefficients: vec![0.0, 0.0],
        aliased: Vec::new(),
        added_terms: Vec::new(),
        converged: true,
        iterations: 1,
        deviance: 0.0,
        linear_scores: scores.iter().map(|&e: &f64| (e / (1.0 - e)).ln()).collect(),
        scores,
    };
    let advice = guidance_check(&DesignConfig::default(), &frame, Some(&model));
    assert!(advice.iter().any(|a| a.code == "no_overlap"));
}

#[test]
fn bias_reduction_is_equal_across_covariates() {
    let s = Scenario {
        covariates: vec![CovariateSpec::shifted("x1", 0.4), CovariateSpec::shifted("x2", 0.4)],
        ..scenario(1000, 4000, 0.0, 900)
    };
    let design = BenchDesign::Fitted {
        design: DesignConfig {
            matcher: MatcherSpec::Greedy {
                k: 1,
                with_replacement: false,
                caliper: None,
                order: Default::default(),
            },
            ..DesignConfig::default()
        },
    };
    let a = simbench::bias_reduction(&s, &design, "x1", 5).unwrap();
    let b = simbench::bias_reduction(&s, &design, "x2", 5).unwrap();
    assert!(
        (a.mean_percent - b.mean_percent).abs() <= 10.0,
        "x1 {:.2}% vs x2 {:.2}%",
        a.mean_percent,
        b.mean_percent
    );
    assert_eq!(simbench::bias_reduction(&s, &design, "x1", 5).unwrap(), a);
}

#[test]
fn generation_is_reproducible_per_seed() {
    let s = scenario(40, 60, 0.5, 17);
    let a = simbench::generate(&s).unwrap();
    let b = simbench::generate(&s).unwrap();
    assert_eq!(a.frame, b.frame);
    assert_eq!(a.true_scores, b.true_scores);
    let c = simbench::generate(&s.with_seed(18)).unwrap();
    assert_ne!(a.frame, c.frame);
}

#[test]
fn sizeable_tails_raise_the_poor_overlap_warning() {
    // Treated scores reach well above every control score.
    let mut t = vec![1u8; 20];
    t.extend(vec![0u8; 20]);
    let x: Vec<f64> = (0..40).map(|i| i as f64).collect();
    let frame = obsdesign::dataset::StudyFrame::new(t, vec![("x".into(), x)], None).unwrap();
    let scores: Vec<f64> = (0..40)
        .map(|i| if i < 20 { 0.3 + 0.03 * i as f64 } else { 0.2 + 0.015 * (i - 20) as f64 })
        .collect();
    let model = obsdesign::propensity::PropensityModel {
        column_names: vec!["x".into()],
        coefficients: vec![0.0, 0.0],
        aliased: Vec::new(),
        added_terms: Vec::new(),
        converged: true,
        iterations: 1,
        deviance: 0.0,
        linear_scores: scores.iter().map(|&e: &f64| (e / (1.0 - e)).ln()).collect(),
        scores,
    };
    let advice = guidance_check(&DesignConfig::default(), &frame, Some(&model));
    assert!(advice.iter().any(|a| a.code == "poor_overlap"), "{advice:?}");
}
