use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn groupnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_groupnet")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SMOKE: &str = "variant=B\nK=2\ndataset_kind=shapes\nimage_size=32\ntrain_images=24\ntest_images=8\n\
width=8\nepochs_stage1=1\nepochs_stage2=1\nbatch_size=8\nlr0=0.002\nseed=5\n";

#[test]
fn unknown_key_exits_with_config_code() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "run.cfg", "variant=B\nK=4\nmomentum=0.9\n");
    let o = groupnet(&["train", "--config", &cfg, "--out", d.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3") && stderr(&o).contains("momentum"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_exits_with_data_code() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "run.cfg", "dataset=/nonexistent/cifar\n");
    let o = groupnet(&["train", "--config", &cfg, "--out", d.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn divergent_training_exits_with_numeric_code() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "run.cfg", &SMOKE.replace("lr0=0.002", "lr0=1e300"));
    let o = groupnet(&["train", "--config", &cfg, "--out", d.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn train_eval_export_inspect_roundtrip() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "run.cfg", SMOKE);
    let run = |name: &str, cfg: &str| {
        let out = d.path().join(name);
        let o = groupnet(&["train", "--config", cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stderr(&o).contains("stage 2 epoch 0 done"), "{}", stderr(&o));
        out
    };
    let a = run("a", &cfg);
    for f in ["config.resolved", "metrics.csv", "stage1.gnck", "stage2.gnck", "model.gnck", "eval.csv"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,stage,loss,accuracy"));
    assert_eq!(metrics.lines().count(), 3);

    // the resolved config alone reproduces the run
    let b = run("b", a.join("config.resolved").to_str().unwrap());
    assert_eq!(metrics, fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("model.gnck")).unwrap(), fs::read(b.join("model.gnck")).unwrap());

    let model = a.join("model.gnck");
    let o = groupnet(&["eval", "--checkpoint", model.to_str().unwrap(), "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval_train = String::from_utf8(o.stdout).unwrap();
    assert_eq!(eval_train, fs::read_to_string(a.join("eval.csv")).unwrap());

    let exported = d.path().join("model.export.gnck");
    let o = groupnet(&["export", "--checkpoint", model.to_str().unwrap(), "--out", exported.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = groupnet(&["eval", "--checkpoint", exported.to_str().unwrap(), "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    // accuracy columns agree; the exported forward differs only in rounding
    let cols = |s: &str| s.lines().nth(1).unwrap().split(',').map(String::from).collect::<Vec<_>>();
    let (t, e) = (cols(&eval_train), cols(&String::from_utf8(o.stdout).unwrap()));
    assert_eq!((&t[2], &t[4]), (&e[2], &e[4]));

    let o = groupnet(&["inspect", "--checkpoint", exported.to_str().unwrap()]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(o.status.success());
    for key in ["[model]", "binary_ops=", "inference_activation_bytes=", "exported=true"] {
        assert!(text.contains(key), "{key} missing in\n{text}");
    }

    // a model built for 32x32 inputs refuses 64x64 data and names the layer
    let big = write_config(d.path(), "big.cfg", &SMOKE.replace("image_size=32", "image_size=64"));
    let o = groupnet(&["eval", "--checkpoint", model.to_str().unwrap(), "--config", &big]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stem.conv"), "{}", stderr(&o));
}

#[test]
fn bench_writes_fixed_columns() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("report.csv");
    let split = d.path().join("split.csv");
    let o = groupnet(&[
        "bench",
        "--case",
        "1",
        "--kernel",
        "binary,group:2,fixed:2,float",
        "--repeats",
        "5",
        "--out",
        out.to_str().unwrap(),
        "--split-out",
        split.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "case_id,kernel,mean_us,std_us,analytic_sigma,machine");
    assert_eq!(lines.len(), 5);
    assert!(lines[2].starts_with("1,group:2,"));
    assert!(fs::read_to_string(split).unwrap().starts_with("case_id,bconv_us,hadd_us,ratio\n1,"));

    let o = groupnet(&["bench", "--case", "12", "--out", d.path().join("x.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = groupnet(&["bench", "--case", "1", "--repeats", "3", "--out", d.path().join("x.csv").to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn inspect_config_reports_variant_c_selection() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.cfg", "variant=C\n");
    let o = groupnet(&["inspect", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("group_body_binary_ops="), "{text}");
}
