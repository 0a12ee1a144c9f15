use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sparsebyz::prune::read_mask;
use sparsebyz_cli::commands::parse_model_spec;
use sparsebyz_cli::metrics::HEADER;
use std::sync::Arc;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsebyz"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const SMALL: &str = "fl.k = 10
fl.k_m = 2
fl.batch_size = 8
data.train_per_class = 40
data.test_per_class = 10
data.classes = 4
data.dim = 16
model.hidden = 8
";

fn write_config(dir: &Path, name: &str, extra: &str) -> String {
    let p = dir.join(name);
    let epochs = if extra.contains("fl.epochs") {
        ""
    } else {
        "fl.epochs = 1\n"
    };
    fs::write(&p, format!("{SMALL}{epochs}{extra}")).unwrap();
    p.display().to_string()
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let o = bin(&[
        "run",
        "--config",
        missing.to_str().unwrap(),
        "--out",
        "x.csv",
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.cfg"));
}

#[test]
fn bad_config_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.cfg", "agg.kind = median\n");
    let out = dir.path().join("a.csv");
    assert_eq!(
        code(&bin(&[
            "run",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap()
        ])),
        2
    );
    // Bulyan with k = 10 and k_m = 2 is infeasible (needs k >= 11).
    let cfg = write_config(dir.path(), "b.cfg", "agg.kind = bulyan\n");
    assert_eq!(
        code(&bin(&[
            "run",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap()
        ])),
        2
    );
}

#[test]
fn one_epoch_run_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.cfg",
        "seed = 4\nagg.kind = cm\nattack.kind = alie\n",
    );
    let out = dir.path().join("res/run.csv");
    let o = bin(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let csv = fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(HEADER));
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.split(',').count() == 10));
    // The last row of the epoch carries the accuracy.
    assert!(!rows.last().unwrap().split(',').nth(3).unwrap().is_empty());

    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("res/run.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["config"]["seed"], "11");
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    let keys: Vec<&String> = manifest.as_object().unwrap().keys().collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn seed_changes_output_and_repeat_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "d.cfg", "agg.kind = tm\nattack.kind = ipm\n");
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["run", "--config", &cfg, "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        assert_eq!(code(&bin(&args)), 0);
        fs::read(out).unwrap()
    };
    let a = run("a.csv", &["--threads", "1"]);
    let b = run("b.csv", &["--threads", "3"]);
    let c = run("c.csv", &["--seed", "99"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn dataset_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.idx");
    fs::write(&junk, [0u8, 0, 8, 1, 0, 0, 0, 0]).unwrap();
    let cfg = dir.path().join("idx.cfg");
    fs::write(
        &cfg,
        "data.source = idx\ndata.train_images = junk.idx\ndata.train_labels = junk.idx\n\
         data.test_images = junk.idx\ndata.test_labels = junk.idx\n",
    )
    .unwrap();
    let out = dir.path().join("o.csv");
    let o = bin(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn divergence_exits_4_with_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "div.cfg",
        "fl.epochs = 2\nattack.kind = ipm\nattack.z = 1e308\n",
    );
    let out = dir.path().join("div.csv");
    assert_eq!(
        code(&bin(&[
            "run",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap()
        ])),
        4
    );
    let csv = fs::read_to_string(&out).unwrap();
    let last = csv.lines().last().unwrap();
    assert!(last.starts_with("3,1,,0.25,"), "{last}");
    let manifest = fs::read_to_string(dir.path().join("div.manifest.json")).unwrap();
    assert!(manifest.contains("diverged"));
}

#[test]
fn make_mask_examples() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).display().to_string();

    let o = bin(&[
        "make-mask",
        "--method",
        "random",
        "--delta",
        "0",
        "--model",
        "mlp2:6:4:3",
        "--out",
        &p("zero.sbmk"),
    ]);
    assert_eq!(code(&o), 0);
    let spec = parse_model_spec("mlp2:6:4:3").unwrap();
    let mask = read_mask(
        fs::File::open(p("zero.sbmk")).unwrap(),
        Arc::new(spec.layout()),
    )
    .unwrap();
    assert_eq!(mask.ones(), 0);
    let table = fs::read_to_string(p("zero.occupancy.txt")).unwrap();
    assert!(table.lines().skip(2).all(|l| l.ends_with("0.000000")));
    assert_eq!(String::from_utf8_lossy(&o.stdout), table);

    let force = |out: &str| {
        bin(&[
            "make-mask",
            "--method",
            "force",
            "--delta",
            "0.1",
            "--model",
            "mlp2:8:5:3",
            "--data",
            "blobs",
            "--steps",
            "1",
            "--seed",
            "7",
            "--out",
            out,
        ])
    };
    assert_eq!(code(&force(&p("f1.sbmk"))), 0);
    assert_eq!(code(&force(&p("f2.sbmk"))), 0);
    let spec = parse_model_spec("mlp2:8:5:3").unwrap();
    let d_w = spec.layout().weight_dim();
    let mask = read_mask(
        fs::File::open(p("f1.sbmk")).unwrap(),
        Arc::new(spec.layout()),
    )
    .unwrap();
    assert_eq!(mask.ones(), (0.1 * d_w as f64).round() as usize);
    assert_eq!(
        fs::read(p("f1.sbmk")).unwrap(),
        fs::read(p("f2.sbmk")).unwrap()
    );
}

#[test]
fn make_mask_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.sbmk").display().to_string();
    let run = |extra: &[&str]| {
        let mut args = vec!["make-mask", "--out", &out];
        args.extend_from_slice(extra);
        code(&bin(&args))
    };
    let infeasible = [
        "--method",
        "force",
        "--delta",
        "0.9",
        "--model",
        "mlp2:2:8:10",
        "--data",
        "blobs",
        "--steps",
        "2",
        "--fc-cap",
        "0.1",
    ];
    assert_eq!(run(&infeasible), 5);
    assert_eq!(
        run(&[
            "--method",
            "force",
            "--delta",
            "0.1",
            "--model",
            "mlp2:2:8:10"
        ]),
        2
    );
    assert_eq!(
        run(&["--method", "erk", "--delta", "0.1", "--model", "mlp2:2:8"]),
        2
    );
    assert_eq!(
        run(&[
            "--method",
            "erk",
            "--delta",
            "0.1",
            "--model",
            "mlp2:2:8:3",
            "--fc-cap",
            "0.2"
        ]),
        2
    );
    assert_eq!(
        run(&[
            "--method",
            "magic",
            "--delta",
            "0.1",
            "--model",
            "mlp2:2:8:3"
        ]),
        2
    );
    assert_eq!(
        run(&[
            "--method",
            "force",
            "--delta",
            "0.1",
            "--model",
            "mlp2:2:8:3",
            "--steps",
            "1",
            "--data",
            "/no/such/file",
            "--labels",
            "/no/such/labels"
        ]),
        3
    );
}

#[test]
fn plot_examples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "p.cfg", "fl.epochs = 2\n");
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        assert_eq!(
            code(&bin(&[
                "run",
                "--config",
                &cfg,
                "--out",
                out.to_str().unwrap()
            ])),
            0
        );
    }
    let svg = dir.path().join("p.svg");
    let svg_s = svg.to_str().unwrap();
    let plot = |inputs: &[&Path], metric: &str| {
        let mut args = vec!["plot".to_string()];
        for i in inputs {
            args.push("--in".into());
            args.push(i.display().to_string());
        }
        args.extend([
            "--metric".into(),
            metric.into(),
            "--out".into(),
            svg_s.into(),
        ]);
        code(
            &Command::new(env!("CARGO_BIN_EXE_sparsebyz"))
                .args(&args)
                .output()
                .unwrap(),
        )
    };

    assert_eq!(plot(&[&a], "test_acc"), 0);
    let one = fs::read_to_string(&svg).unwrap();
    assert_eq!(one.matches("<polyline").count(), 1);
    assert!(one.contains(">a<"));

    assert_eq!(plot(&[&a, &b], "test_acc"), 0);
    let two = fs::read(&svg).unwrap();
    assert_eq!(
        String::from_utf8_lossy(&two).matches("<polyline").count(),
        2
    );
    assert_eq!(plot(&[&a, &b], "test_acc"), 0);
    assert_eq!(fs::read(&svg).unwrap(), two);

    assert_eq!(plot(&[&a], "accuracy"), 2);
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, format!("{HEADER}\n")).unwrap();
    assert_eq!(plot(&[&empty], "test_acc"), 2);
}
