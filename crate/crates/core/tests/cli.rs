use std::fs;
use std::path::{Path, PathBuf};

use pneumoseg::cli::{run, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use pneumoseg::volume_io::{load_mask_any, Dataset};

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let code = run([
        "pneumoseg",
        "synth",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(dir),
    ]);
    assert_eq!(code, EXIT_OK);
    dir.join("manifest.tsv")
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

const TINY: [&str; 16] = [
    "--image-size",
    "16",
    "--set",
    "network.dense_layers=1",
    "--set",
    "network.dense_growth=2",
    "--set",
    "network.lstm_hidden=2",
    "--set",
    "network.head_channels=2",
    "--set",
    "train.max_epochs=1",
    "--set",
    "train.samples_per_epoch=4",
    "--set",
    "train.batch_size=4",
];

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, 10, 7);
    synth(&b, 10, 7);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 10 * 2 + 3);
    let data = |t: &[(String, Vec<u8>)]| {
        t.iter()
            .filter(|(n, _)| n != "run_meta.json")
            .cloned()
            .collect::<Vec<_>>()
    };
    assert_eq!(data(&ta), data(&tb));
    let meta: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "synth");
    assert_eq!(meta["resolved"]["seed"], 7);
    assert!(meta["code_version"]["package"].is_string());
    synth(&b, 10, 8);
    assert_ne!(data(&ta), data(&tree(&b)));
}

#[test]
fn evaluate_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    synth(&cohort, 4, 1);
    let before = tree(&cohort);
    let out = dir.path().join("eval");
    assert_eq!(
        run([
            "pneumoseg",
            "evaluate",
            "--pred",
            s(&cohort),
            "--gt",
            s(&cohort),
            "--out",
            s(&out)
        ]),
        EXIT_OK
    );
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_patients"], 4);
    assert_eq!(summary["dice_lesion"]["mean"], 1.0);
    for f in [
        "report.csv",
        "ba_points.csv",
        "scatter_points.csv",
        "run_meta.json",
        "scatter_ggo.svg",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    // inputs untouched
    assert_eq!(before, tree(&cohort));
}

#[test]
fn train_predict_quantify_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    let manifest = synth(&cohort, 8, 2);
    let run_dir = dir.path().join("train");
    let mut args = vec![
        "pneumoseg",
        "train",
        "--data",
        s(&manifest),
        "--out",
        s(&run_dir),
        "--fold",
        "1",
        "--set",
        "train.val_size=2",
    ];
    args.extend(TINY);
    assert_eq!(run(args.clone()), EXIT_OK);
    for f in [
        "model.weights",
        "history.csv",
        "split.json",
        "run_meta.json",
    ] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    let first = fs::read(run_dir.join("model.weights")).unwrap();
    assert_eq!(run(args), EXIT_OK);
    assert_eq!(
        first,
        fs::read(run_dir.join("model.weights")).unwrap(),
        "train is idempotent"
    );

    let ds = Dataset::load(&manifest).unwrap();
    let rec = &ds.records[0];
    let mask_out = dir.path().join("pred/p.mask");
    let code = run([
        "pneumoseg",
        "predict",
        "--weights",
        s(&run_dir.join("model.weights")),
        "--volume",
        s(&rec.volume_path),
        "--out",
        s(&mask_out),
    ]);
    assert_eq!(code, EXIT_OK);
    let pred = load_mask_any(&mask_out).unwrap();
    assert_eq!(pred.shape(), load_mask_any(&rec.mask_path).unwrap().shape());
    assert!(pred.spacing().is_some());

    let csv = dir.path().join("q.csv");
    let code = run([
        "pneumoseg",
        "quantify",
        "--mask",
        s(&rec.mask_path),
        "--out",
        s(&csv),
        "--id",
        "x",
    ]);
    assert_eq!(code, EXIT_OK);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("patient_id,ggo_ml"));
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "x");
    assert!(!row[5].is_empty(), "burden from the mask's lung field");
}

#[test]
fn exit_codes_distinguish_usage_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.tsv");
    let out = dir.path().join("o");
    assert_eq!(
        run([
            "pneumoseg",
            "train",
            "--data",
            s(&missing),
            "--out",
            s(&out)
        ]),
        EXIT_DATA
    );
    assert_eq!(
        run([
            "pneumoseg",
            "train",
            "--data",
            s(&missing),
            "--out",
            s(&out),
            "--set",
            "train.lr0=abc"
        ]),
        EXIT_USAGE
    );
    assert_eq!(
        run([
            "pneumoseg",
            "train",
            "--data",
            s(&missing),
            "--out",
            s(&out),
            "--config",
            s(&missing)
        ]),
        EXIT_USAGE
    );
    assert_eq!(
        run([
            "pneumoseg",
            "quantify",
            "--mask",
            s(&missing),
            "--out",
            s(&out)
        ]),
        EXIT_DATA
    );
    assert_eq!(
        run(["pneumoseg", "predict", "--weights", s(&missing)]),
        EXIT_USAGE
    );
    let junk = dir.path().join("junk.weights");
    fs::write(&junk, b"xx").unwrap();
    let vol = dir.path().join("v.vol");
    assert_eq!(
        run([
            "pneumoseg",
            "predict",
            "--weights",
            s(&junk),
            "--volume",
            s(&vol),
            "--out",
            s(&out)
        ]),
        EXIT_DATA
    );
}

#[test]
fn bench_writes_a_report_per_model_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let code = run([
        "pneumoseg",
        "bench",
        "--slices",
        "2,4",
        "--reps",
        "2",
        "--batch",
        "2",
        "--out",
        s(&out),
        "--image-size",
        "16",
        "--set",
        "network.dense_layers=1",
        "--set",
        "network.dense_growth=2",
        "--set",
        "network.lstm_hidden=2",
        "--set",
        "network.head_channels=2",
        "--set",
        "unet.chunk_depth=4",
    ]);
    assert_eq!(code, EXIT_OK);
    let suite: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("bench.json")).unwrap()).unwrap();
    let entries = suite["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 6);
    for e in entries {
        let r = &e["report"];
        assert!(r["wall_time_s"].as_f64().unwrap() > 0.0, "{e}");
        assert!(r["num_params"].as_u64().unwrap() > 0);
        assert!(r["note"].as_str().unwrap().contains("excluded"));
    }
    assert!(suite["machine"]["cpus"].as_u64().unwrap() >= 1);
}
