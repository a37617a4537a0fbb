use std::path::Path;
use std::process::{Command, Output};

fn xpdnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xpdnet"))
        .current_dir(dir)
        .env_remove("XPD_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "dataset": dir.join("data"),
        "output_dir": dir.join("out"),
        "eval_scenes": 2,
        "epochs": 1,
        "batch_size": 2,
        "generate": {
            "num_scenes": 5,
            "corruption_radius": 2,
            "scene": { "height": 48, "width": 64 }
        },
        "net": {
            "backbone_channels": [4, 6, 8],
            "mask_channels": 4,
            "depth_channels": 4,
            "head_channels": 4
        }
    });
    let p = dir.join("run.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn generate_train_eval_visualize_round() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d);
    let g = xpdnet(d, &["generate", "--config", &cfg]);
    assert_eq!(code(&g), 0, "{}", String::from_utf8_lossy(&g.stderr));
    assert!(d.join("data/manifest.json").exists());

    let t = xpdnet(d, &["train", "--config", &cfg, "loss.boundary=vanilla"]);
    assert_eq!(code(&t), 0, "{}", String::from_utf8_lossy(&t.stderr));
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("out/config.json")).unwrap()).unwrap();
    assert_eq!(echoed["loss"]["boundary"], "vanilla");
    let ck = d.join("out/ckpt-epoch1.tar");
    assert!(ck.exists());

    let e = xpdnet(d, &["eval", "--config", &cfg, "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(code(&e), 0, "{}", String::from_utf8_lossy(&e.stderr));
    assert!(d.join("out/eval_report.json").exists());

    let v = xpdnet(
        d,
        &["visualize", "--config", &cfg, "--scenes", "0,1", "--checkpoint", ck.to_str().unwrap()],
    );
    assert_eq!(code(&v), 0, "{}", String::from_utf8_lossy(&v.stderr));
    assert!(d.join("out/viz/00001_pred_overlay.png").exists());

    // A checkpoint from another architecture is a validation error.
    let m = xpdnet(
        d,
        &["eval", "--config", &cfg, "--checkpoint", ck.to_str().unwrap(), "net.variant=none"],
    );
    assert_eq!(code(&m), 2);
    assert!(String::from_utf8_lossy(&m.stderr).contains("hash mismatch"));
}

#[test]
fn oracle_eval_prints_perfect_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d);
    assert_eq!(code(&xpdnet(d, &["generate", "--config", &cfg])), 0);
    let e = xpdnet(d, &["eval", "--config", &cfg, "--oracle"]);
    assert_eq!(code(&e), 0);
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("out/eval_report.json")).unwrap()).unwrap();
    assert_eq!(r["ap_m"], 1.0);
    assert_eq!(r["boundary_iou"], 1.0);
}

#[test]
fn invalid_input_exits_with_status_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d);
    for bad in ["epochs=0", "no_such_key=1", "net.variant=bogus", "generate.scene.height=50"] {
        let o = xpdnet(d, &["generate", "--config", &cfg, bad]);
        assert_eq!(code(&o), 2, "{bad}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(!d.join("data").exists(), "nothing written before validation");

    let o = Command::new(env!("CARGO_BIN_EXE_xpdnet"))
        .current_dir(d)
        .env("XPD_SEED", "not-a-number")
        .args(["generate", "--config", &cfg])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn seed_environment_variable_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d);
    let run = |seed: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_xpdnet"))
            .current_dir(d)
            .env("XPD_SEED", seed)
            .args(["generate", "--config", &cfg, &format!("dataset={out}")])
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
        std::fs::read(d.join(out).join("manifest.json")).unwrap()
    };
    let a = run("11", "a");
    let b = run("11", "b");
    let c = run("12", "c");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = xpdnet(d, &["gradcheck", &format!("output_dir={}", d.join("gc").display())]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    assert!(stdout.lines().filter(|l| l.ends_with("PASS")).count() >= 6);
    assert!(d.join("gc/gradcheck.json").exists());
}
