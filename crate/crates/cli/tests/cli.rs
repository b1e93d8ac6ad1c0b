//! End-to-end tests of the `broadwave` binary: exit codes, reproducibility,
//! and the file artifacts each subcommand promises.

use std::path::Path;
use std::process::{Command, Output};

use broadwave_core::dataset::{read_dataset, write_dataset};
use broadwave_core::DesignBox;
use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_broadwave"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn gen_args<'a>(n: &'a str, wl_step: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "gen",
        "--scene",
        "metalens",
        "--n",
        n,
        "--wl-start",
        "500e-9",
        "--wl-end",
        "600e-9",
        "--wl-step",
        wl_step,
        "--grid",
        "32x32",
        "--dl",
        "25e-9",
        "--seed",
        "7",
        "--out",
        out,
    ]
}

#[test]
fn gen_rejects_zero_samples_with_exit_2() {
    let dir = tempdir().unwrap();
    let out = run(&gen_args("0", "100e-9", "zero.wfd"), dir.path());
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn gen_rejects_unknown_scene_with_exit_2() {
    let dir = tempdir().unwrap();
    let mut args = gen_args("1", "100e-9", "x.wfd");
    args[2] = "hologram";
    let out = run(&args, dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_is_reproducible_and_resolved_config_reruns() {
    let dir = tempdir().unwrap();
    let out = run(&gen_args("3", "100e-9", "a.wfd"), dir.path());
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let out = run(&gen_args("3", "100e-9", "b.wfd"), dir.path());
    assert_eq!(out.status.code(), Some(0));
    let a = std::fs::read(dir.path().join("a.wfd")).unwrap();
    let b = std::fs::read(dir.path().join("b.wfd")).unwrap();
    assert_eq!(a, b, "same flags must produce identical files");

    // The resolved config alone reproduces the run.
    let resolved = dir.path().join("a.wfd.resolved.cfg");
    assert!(resolved.exists());
    let out = run(
        &[
            "gen",
            "--config",
            resolved.to_str().unwrap(),
            "--out",
            "c.wfd",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let c = std::fs::read(dir.path().join("c.wfd")).unwrap();
    assert_eq!(a, c, "resolved config must reproduce the dataset");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "banana=1\n").unwrap();
    let out = run(
        &["gen", "--config", "bad.cfg", "--out", "x.wfd"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("banana"), "{stderr}");
}

#[test]
fn train_missing_data_exits_2() {
    let dir = tempdir().unwrap();
    let out = run(
        &[
            "train",
            "--data",
            "nope.wfd",
            "--val",
            "nope.wfd",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

/// Shared fixture: tiny datasets, a smoke training run, and its checkpoint.
fn train_fixture(dir: &Path) {
    let out = run(&gen_args("6", "100e-9", "train.wfd"), dir);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    // Validation at an intermediate wavelength only.
    let out = run(
        &[
            "gen",
            "--scene",
            "metalens",
            "--n",
            "2",
            "--wl-start",
            "550e-9",
            "--wl-end",
            "551e-9",
            "--wl-step",
            "10e-9",
            "--grid",
            "32x32",
            "--dl",
            "25e-9",
            "--seed",
            "8",
            "--out",
            "val.wfd",
        ],
        dir,
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    std::fs::write(
        dir.join("model.cfg"),
        "channels=8\nlayers=1\nmodes_v=4\nmodes_h=4\ngroups=2\nepochs=1\nbatch_size=4\nlr=0\nlr_min=0\nweight_decay=0\n",
    )
    .unwrap();
    let out = run(
        &[
            "train",
            "--config",
            "model.cfg",
            "--data",
            "train.wfd",
            "--val",
            "val.wfd",
            "--out",
            "run",
        ],
        dir,
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
}

#[test]
fn train_eval_bench_pipeline() {
    let dir = tempdir().unwrap();
    train_fixture(dir.path());
    for artifact in ["best.wfc", "last.wfc", "history.csv", "resolved.cfg"] {
        assert!(
            dir.path().join("run").join(artifact).exists(),
            "missing {artifact}"
        );
    }
    // lr = 0 smoke run keeps the loss flat across the epoch history.
    let history = std::fs::read_to_string(dir.path().join("run/history.csv")).unwrap();
    assert!(history.starts_with("epoch,lr,train_nmse,val_nmse_untrained,wall_seconds"));

    // Region identity: with a design box covering the whole grid, the
    // design-region aggregates equal the whole-domain aggregates.
    let mut ds = read_dataset(&dir.path().join("val.wfd")).unwrap();
    for s in &mut ds.samples {
        s.eps.design_box = DesignBox::full(&ds.grid);
    }
    ds.manifest = None;
    write_dataset(&ds, &dir.path().join("fullbox.wfd")).unwrap();
    let eval_out = |region: &str, out: &str| -> String {
        let o = run(
            &[
                "eval",
                "--ckpt",
                "run/best.wfc",
                "--data",
                "fullbox.wfd",
                "--region",
                region,
                "--trained",
                "500e-9,600e-9",
                "--out",
                out,
            ],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{o:?}");
        String::from_utf8_lossy(&o.stdout).to_string()
    };
    let all = eval_out("all", "r_all.csv");
    let design = eval_out("design", "r_design.csv");
    assert_eq!(all, design, "full-grid design box must match whole domain");
    assert!(dir.path().join("r_all.csv").exists());

    // Incompatible checkpoint/dataset pairs exit 4: a dataset on another grid.
    let o = run(
        &[
            "gen", "--scene", "metalens", "--n", "1", "--wl-start", "500e-9", "--wl-end",
            "501e-9", "--wl-step", "10e-9", "--grid", "48x48", "--dl", "25e-9", "--seed", "9",
            "--out", "other.wfd",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let o = run(
        &[
            "eval",
            "--ckpt",
            "run/best.wfc",
            "--data",
            "other.wfd",
            "--trained",
            "500e-9",
            "--out",
            "bad.csv",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(4), "{o:?}");

    // Bench reports one model row per batch size plus the solver row.
    let o = run(
        &[
            "bench",
            "--ckpt",
            "run/best.wfc",
            "--batch",
            "1,2",
            "--trials",
            "3",
            "--scene",
            "metalens",
            "--out",
            "bench.txt",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let bench = std::fs::read_to_string(dir.path().join("bench.txt")).unwrap();
    assert!(bench.contains("model_seconds_per_sample_batch1="));
    assert!(bench.contains("model_seconds_per_sample_batch2="));
    assert!(bench.contains("solver_seconds_per_sample="));
    assert!(bench.contains("speedup_batch1="));
}

#[test]
fn sweep_requires_fixed_structures_exit_4() {
    let dir = tempdir().unwrap();
    train_fixture(dir.path());
    let o = run(
        &[
            "sweep",
            "--ckpt",
            "run/best.wfc",
            "--data",
            "train.wfd",
            "--trained",
            "500e-9,600e-9",
            "--out",
            "sweep.csv",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(4), "{o:?}");

    // With a fixed-structure dataset the sweep succeeds.
    let mut args = gen_args("2", "50e-9", "dense.wfd");
    args.push("--fixed-structures");
    let o = run(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let o = run(
        &[
            "sweep",
            "--ckpt",
            "run/best.wfc",
            "--data",
            "dense.wfd",
            "--trained",
            "500e-9,600e-9",
            "--out",
            "sweep.csv",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert!(csv.starts_with("wavelength_nm,count,mean_nmse,std_nmse,lo_2std,hi_2std,trained"));
    // 500..600 step 50: three wavelengths, two trained markers.
    assert_eq!(csv.lines().count(), 1 + 3);
    let trained_markers = csv
        .lines()
        .skip(1)
        .filter(|l| l.ends_with(",1"))
        .count();
    assert_eq!(trained_markers, 2);
}

#[test]
fn prior_emits_four_channel_images() {
    let dir = tempdir().unwrap();
    let o = run(
        &[
            "prior", "--lambda", "500e-9", "--grid", "64x64", "--dl", "25e-9", "--out", "p",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    for ch in ["wx_real", "wx_imag", "wz_real", "wz_imag"] {
        let pgm = dir.path().join("p").join(format!("prior_{ch}.pgm"));
        let raw = dir.path().join("p").join(format!("prior_{ch}.f32"));
        assert!(pgm.exists(), "missing {}", pgm.display());
        assert!(raw.exists(), "missing {}", raw.display());
        let bytes = std::fs::read(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n64 64\n255\n"));
        assert_eq!(std::fs::read(&raw).unwrap().len(), 64 * 64 * 4);
    }
    assert!(dir.path().join("p/resolved.cfg").exists());
}

#[test]
fn version_names_format_versions() {
    let o = bin().arg("--version").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("WFD1"), "{stdout}");
    assert!(stdout.contains("WFC1"), "{stdout}");
}
