use std::path::Path;
use std::process::{Command, Output};

fn vilu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vilu")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = vilu(args);
    assert!(out.status.success(), "vilu {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_writes_pairs_and_is_repeatable() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--cases", "8", "--shape", "16,12", "--seed", "4", "--out", &s(d)]);
    }
    let manifest = vilu::dataset::read_manifest(&a.join("manifest.json")).unwrap();
    assert_eq!(manifest.len(), 8);
    assert_eq!(files(&a).len(), 17);
    assert_eq!(files(&a), files(&b));
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let out = s(&t.path().join("x"));
    assert_eq!(vilu(&["synth", "--classes", "1", "--out", &out]).status.code(), Some(2));
    assert_eq!(vilu(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(vilu(&["train", "--manifest", &out, "--out", &out, "train.nonsense=1"]).status.code(), Some(2));
    let missing = s(&t.path().join("none.json"));
    assert_eq!(vilu(&["preprocess", "--in", &missing, "--out", &out]).status.code(), Some(3));
    let bad = t.path().join("bad");
    std::fs::create_dir(&bad).unwrap();
    std::fs::write(bad.join("manifest.json"), r#"[{"case_id":"a","image_path":"a.nrrd","label_path":"b.nrrd","split":"train"}]"#).unwrap();
    std::fs::write(bad.join("a.nrrd"), b"NRRD0004\ntype: float\ndimension: 2\nsizes: 4 4\nencoding: raw\n\n\0\0").unwrap();
    assert_eq!(vilu(&["preprocess", "--in", &s(&bad), "--out", &out]).status.code(), Some(3));
}

#[test]
fn preprocess_is_normalised_respaced_and_idempotent() {
    let t = tempfile::tempdir().unwrap();
    let (raw, pre, again) = (t.path().join("raw"), t.path().join("pre"), t.path().join("again"));
    ok(&["synth", "--cases", "3", "--shape", "20,14", "--spacing", "0.5,2", "--out", &s(&raw)]);
    ok(&["preprocess", "--in", &s(&raw), "--out", &s(&pre), "--spacing", "1.0"]);
    ok(&["preprocess", "--in", &s(&pre), "--out", &s(&again), "--spacing", "1.0"]);
    let first = vilu::dataset::load_samples(&pre.join("manifest.json"), Some(2)).unwrap();
    let second = vilu::dataset::load_samples(&again.join("manifest.json"), Some(2)).unwrap();
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.image.spacing(), &[1.0, 1.0]);
        assert_eq!(a.image.shape(), &[10, 28]);
        assert!(a.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let dev = a.image.data.iter().zip(&b.image.data).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(dev <= 1e-6);
    }
    let header = std::fs::read(pre.join("case_0000_image.nrrd")).unwrap();
    assert!(String::from_utf8_lossy(&header).contains("space directions: (1,0) (0,1)\n"));
}

#[test]
fn train_eval_overlay_smoke() {
    let t = tempfile::tempdir().unwrap();
    let (data, run, ev, ov) = (t.path().join("d"), t.path().join("run"), t.path().join("ev"), t.path().join("ov"));
    ok(&["synth", "--cases", "2", "--shape", "16,16", "--out", &s(&data)]);
    ok(&["train", "--manifest", &s(&data), "--out", &s(&run), "--epochs", "1", "network.num_stages=2", "network.base_channels=4"]);
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,epoch,loss,val_dsc\n"));
    assert!(log.lines().count() >= 2);
    let ckpt = run.join("checkpoints/last.ckpt");
    assert!(ckpt.exists());

    ok(&["eval", "--ref", &s(&data), "--pred", &s(&data), "--out", &s(&ev)]);
    let agg: serde_json::Value = serde_json::from_slice(&std::fs::read(ev.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["mean"]["dsc"], 1.0);
    assert!(ev.join("metrics/case_0000.json").exists());
    ok(&["eval", "--ref", &s(&data), "--checkpoint", &s(&ckpt), "--out", &s(&ev)]);

    ok(&["overlay", "--manifest", &s(&data), "--out", &s(&ov)]);
    assert_eq!(files(&ov).len(), 2);
    assert!(files(&ov)[0].1.starts_with(b"\x89PNG"));
}

#[test]
fn resume_continues_identically() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    ok(&["synth", "--cases", "3", "--shape", "16,16", "--out", &s(&data)]);
    let common = ["network.num_stages=2", "network.base_channels=4", "train.precision=f64", "train.val_interval=1"];
    let full = t.path().join("full");
    let mut args = vec!["train", "--manifest", data.to_str().unwrap(), "--out", full.to_str().unwrap(), "--epochs", "3"];
    args.extend(common);
    ok(&args);
    let split = t.path().join("split");
    let mut args = vec!["train", "--manifest", data.to_str().unwrap(), "--out", split.to_str().unwrap(), "--epochs", "1"];
    args.extend(common);
    ok(&args);
    let ck = split.join("checkpoints/last.ckpt");
    ok(&["train", "--manifest", &s(&data), "--out", &s(&split), "--resume", &s(&ck), "--epochs", "3"]);
    assert_eq!(
        std::fs::read(full.join("train_log.csv")).unwrap(),
        std::fs::read(split.join("train_log.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(full.join("checkpoints/last.ckpt")).unwrap(),
        std::fs::read(split.join("checkpoints/last.ckpt")).unwrap()
    );
}

#[test]
fn gradcheck_default_tiny_config_passes() {
    let out = vilu(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("ok   parameters: 200 probes"));
}
