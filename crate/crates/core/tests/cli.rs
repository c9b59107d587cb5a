use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cvt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_data_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = cvt(&["generate-data", "--seed", "7", "--count", "10", "--out", s(dir)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.iter().filter(|(p, _)| p.ends_with("manifest.json")).count(), 10);
    assert_eq!(ta, tb);
}

#[test]
fn gradcheck_prints_a_passing_table() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cvt(&["gradcheck", "--out", s(tmp.path()), "--threads", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert!(rows.len() > 50);
    for row in &rows {
        let cols: Vec<&str> = row.split_whitespace().collect();
        let err: f64 = cols[cols.len() - 4].parse().unwrap();
        let tol: f64 = cols[cols.len() - 2].parse().unwrap();
        assert!(err < tol && tol <= 1e-5, "{row}");
        assert_eq!(*cols.last().unwrap(), "ok");
    }
    assert!(rows.last().unwrap().starts_with("micro model"));
    assert!(tmp.path().join("gradcheck.csv").exists());
}

#[test]
fn missing_checkpoint_exits_one_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let o = cvt(&["eval", "--checkpoint", s(&missing), "--out", s(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains(s(&missing)), "{err}");
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        &["bogus"][..],
        &["train"],
        &["gradcheck", "--out", "x", "--threads", "many"],
        &[],
    ] {
        let o = cvt(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stderr(&o).contains("Usage"), "{args:?}");
    }
    assert_eq!(cvt(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_keys_are_domain_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "preset = micro\ntrain.epochz = 2\n").unwrap();
    let o = cvt(&["generate-data", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.epochz"));
}

/// The whole micro pipeline through the binary, checking that every file
/// lands under its `--out` and that `run.json` reproduces a run.
#[test]
fn micro_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("micro.cfg");
    fs::write(
        &cfg,
        "preset = micro\ntrain.batch_size = 2\nablation.epochs = 1\nablation.scenes = 6\neval.dropout_trials = 2\n",
    )
    .unwrap();
    let run = |args: &[&str]| {
        let mut all = args.to_vec();
        all.extend(["--config", s(&cfg), "--threads", "1"]);
        let o = cvt(&all);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    let data = root.join("data");
    run(&["generate-data", "--count", "10", "--seed", "3", "--out", s(&data)]);

    let train = root.join("train");
    run(&[
        "train",
        "--data",
        s(&data),
        "--epochs",
        "2",
        "--seed",
        "1",
        "--out",
        s(&train),
    ]);
    let metrics = fs::read_to_string(train.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let ck = train.join("checkpoint");
    assert!(ck.join("params.json").exists());

    // rerun from the record alone
    let again = root.join("again");
    let o = cvt(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&train.join("run.json")),
        "--out",
        s(&again),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(again.join("metrics.csv")).unwrap(), metrics);
    assert_eq!(tree(&ck), tree(&again.join("checkpoint")));

    let ev = root.join("eval");
    let printed = run(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&ev)]);
    assert!(printed.contains("channel 0: IoU"));
    let csv = fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert!(csv.starts_with("curve,parameter,channel,iou,empty\n"));
    assert_eq!(csv.lines().filter(|l| l.starts_with("min_distance")).count(), 10);
    assert_eq!(csv.lines().filter(|l| l.starts_with("dropped_cameras")).count(), 4);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["samples"], 2);

    let dr = root.join("dropout");
    let printed = run(&[
        "dropout-test",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--trials",
        "3",
        "--out",
        s(&dr),
    ]);
    assert_eq!(printed.lines().count(), 2);
    assert_eq!(
        fs::read_to_string(dr.join("dropout.csv")).unwrap().lines().count(),
        1 + 2 * 3 * 2
    );

    let vis = root.join("vis");
    run(&[
        "visualize-attention",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--query",
        "1,2",
        "--query",
        "0,0",
        "--out",
        s(&vis),
    ]);
    let files: Vec<_> = tree(&vis)
        .into_iter()
        .map(|(p, _)| p)
        .filter(|p| p.starts_with("attention"))
        .collect();
    assert_eq!(files.len(), 2 * 3);

    let ab = root.join("ablate");
    let printed = run(&["ablate", "--seed", "4", "--out", s(&ab)]);
    assert_eq!(printed.lines().count(), 6);
    let table = fs::read_to_string(ab.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 6 * 3);
    assert!(table.lines().nth(1).unwrap().starts_with("full,4,"));

    let mut top: Vec<String> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    top.sort();
    assert_eq!(
        top,
        [
            "ablate",
            "again",
            "data",
            "dropout",
            "eval",
            "micro.cfg",
            "train",
            "vis"
        ]
    );
    for dir in ["ablate", "again", "data", "dropout", "eval", "train", "vis"] {
        let rec: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(root.join(dir).join("run.json")).unwrap()).unwrap();
        assert_eq!(rec["version"], env!("CARGO_PKG_VERSION"));
        assert_eq!(rec["config"]["preset"], "micro");
    }
}
