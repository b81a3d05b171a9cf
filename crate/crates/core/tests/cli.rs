use std::path::Path;
use std::process::{Command, Output};

use vdl_surrogate::pipeline::PipelineConfig;

fn vdls(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdls"))
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn smoke_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = dir.path().join("smoke.json");
    std::fs::write(&cfg, serde_json::to_string(&PipelineConfig::smoke()).unwrap()).unwrap();
    let cfg = cfg.to_str().unwrap();

    let s = ok(&vdls(&run, &["--config", cfg, "gen-ensemble"]));
    assert_eq!(s["stage"], "ensemble");
    assert!(run.join("config.json").exists());

    let missing = vdls(&run, &["train-predictor"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("encode-latents"));

    ok(&vdls(&run, &["train-rae"]));
    ok(&vdls(&run, &["encode-latents"]));
    ok(&vdls(&run, &["train-predictor"]));

    let png = dir.path().join("out.png");
    let r = ok(&vdls(&run, &["render", "--params", "1.2,-0.4,0.5,0.3", "--viewpoint", "0.2,-1,0.5", "-o", png.to_str().unwrap()]));
    assert_eq!(r["provenance"]["predictor_ids"].as_array().unwrap().len(), 3);
    assert_eq!(&std::fs::read(&png).unwrap()[1..4], b"PNG");

    let i = ok(&vdls(&run, &["infer", "--params", "1,0,0.5,0.5"]));
    assert!(run.join("infer").join(format!("{}.raw", i["handle"].as_str().unwrap())).exists());

    let e = ok(&vdls(&run, &["evaluate"]));
    assert!(e["mean_psnr"].as_array().unwrap().iter().any(|m| m[0] == "surrogate" && m[1].is_number()), "{e}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("evaluate/report.json")).unwrap()).unwrap();
    let members = report["members"].as_array().unwrap();
    assert!(!members.is_empty());
    let methods: Vec<&str> = members[0]["methods"].as_array().unwrap().iter().map(|m| m["method"].as_str().unwrap()).collect();
    for m in ["surrogate", "idw_g3", "rbf"] {
        assert!(methods.contains(&m), "{methods:?}");
    }

    let csv = dir.path().join("null.csv");
    let s = ok(&vdls(&run, &["sensitivity", "--index", "3", "--n", "4", "-o", csv.to_str().unwrap()]));
    assert!(s["mean"].as_f64().unwrap() >= 0.0);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 5);
}

#[test]
fn invalid_configuration_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = vdls(dir.path(), &["--set", "rae.k_r=0", "gen-ensemble"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("k_r"), "{}", String::from_utf8_lossy(&out.stderr));

    let out = vdls(dir.path(), &["--set", "predictor.nonsense=1", "gen-ensemble"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));
}
