use std::path::Path;
use std::process::Command;

use stratgeo_cli::fixture::write_fixture;
use stratgeo_cli::pipeline::{cache_dir, SCHEMA_VERSION};
use stratgeo_cli::{run, CliError, RunConfig, Stage};

/// Fixture config with a short sweep and a cheap case 3.
fn quick_config(dir: &Path) -> RunConfig {
    let files = write_fixture(dir, 3).unwrap();
    let mut cfg = RunConfig::load(&files.config).unwrap();
    cfg.noise.levels = vec![0.0, 0.5, 2.0];
    cfg.case3.alphas = vec![1.0];
    cfg.case3.iterations = 2;
    cfg.case3.subsample = 32;
    cfg
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stratgeo"));
    c.env("RUST_LOG", "error");
    c
}

#[test]
fn case1_writes_one_row_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let report = run(&cfg, &[Stage::Case1]).unwrap();
    assert_eq!(report.case1.len(), 3);
    assert_eq!(report.case1.iter().map(|r| r.noise_std).collect::<Vec<_>>(), cfg.noise.levels);

    let csv = cfg.out_dir.join("case1.csv");
    assert_eq!(header(&csv), "concept,model,noise_std,r1,r2,r3,agd");
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
    assert!(!cfg.out_dir.join("case2.csv").exists());

    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(cfg.out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], SCHEMA_VERSION);
    assert_eq!(summary["stages_run"], serde_json::json!(["case1"]));
    assert!(summary["datasets"][0]["latent_sha256"].is_string());
}

#[test]
fn stages_chain_through_the_caches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let two = run(&cfg, &[Stage::Case2]).unwrap();
    assert_eq!(two.case2.len(), 1);
    assert_eq!(two.case2[0].clusters_latent, 3);
    assert_eq!(
        header(&cfg.out_dir.join("case2.csv")),
        "model,concept,clusters_resid,clusters_latent,avg_id_twonn_resid,avg_id_twonn_latent,\
         avg_id_pca_resid,avg_id_pca_latent,betti0_resid,betti0_latent,mstw_resid,mstw_latent,procrustes"
    );

    let three = run(&cfg, &[Stage::Case3]).unwrap();
    assert_eq!(three.case3.len(), cfg.case3.loss_kinds.len());
    assert_eq!(
        header(&cfg.out_dir.join("case3.csv")),
        "concept,model,loss_kind,alpha,d_gw,mse,aedp_orig,aedp_best,inv_aedp"
    );
}

#[test]
fn case3_without_labels_is_a_missing_dependency() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let err = run(&cfg, &[Stage::Case3]).unwrap_err();
    assert!(matches!(err, CliError::MissingDependency(_)), "{err}");
    assert_eq!(err.exit_code(), 2);

    // latents alone are not enough either
    run(&cfg, &[Stage::Case1]).unwrap();
    assert!(matches!(run(&cfg, &[Stage::Case3]), Err(CliError::MissingDependency(_))));
}

#[test]
fn tampered_cache_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    run(&cfg, &[Stage::Case2]).unwrap();
    let path = cache_dir(&cfg.out_dir, &cfg.datasets[0]).join("latents0.bundle");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    let err = run(&cfg, &[Stage::Case3]).unwrap_err();
    assert!(matches!(err, CliError::CacheMismatch { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn top_k_larger_than_d_model_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(dir.path());
    cfg.noise.top_k = 1000;
    assert!(matches!(run(&cfg, &[Stage::Case1]), Err(CliError::Config(_))));
}

#[test]
fn binary_reports_config_and_dependency_errors_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["fixture", "--seed", "1", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    for name in ["synthetic.bundle", "synthetic.truth.json", "config.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let config = dir.path().join("config.json");

    let out = bin().arg("case3").arg("--config").arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing dependency"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"datasets": [], "seed": 1}"#).unwrap();
    let out = bin().arg("case1").arg("--config").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin().arg("case1").arg("--config").arg(&config).args(["--noise", "0,-1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn command_line_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_fixture(dir.path(), 2).unwrap();
    let out_dir = dir.path().join("elsewhere");
    let out = bin()
        .arg("case1")
        .arg("--config")
        .arg(&files.config)
        .arg("--out")
        .arg(&out_dir)
        .args(["--noise", "0,1", "--seed", "9"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(out_dir.join("case1.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["seed"], 9);
}

#[test]
fn undeclared_nonlinearity_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(dir.path());
    let bundle = stratgeo::tensorio::load_bundle(&cfg.datasets[0].bundle).unwrap();
    let stripped = stratgeo::tensorio::TensorBundle::from_parts(
        bundle.arrays().to_vec(),
        bundle.payload().to_vec(),
        Default::default(),
    )
    .unwrap();
    let path = dir.path().join("bare.bundle");
    stratgeo::tensorio::save_bundle(&stripped, &path).unwrap();
    cfg.datasets[0].bundle = path;
    assert!(matches!(run(&cfg, &[Stage::Case1]), Err(CliError::Config(_))));

    cfg.datasets[0].nonlinearity = Some(stratgeo::saecore::Nonlinearity::Relu);
    run(&cfg, &[Stage::Case1]).unwrap();
}
