//! End-to-end runs of the `pmcrnet` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmcrnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 48x48 synthetic dataset and a checkpoint trained on it for one step,
/// built once and shared by every test in this file.
struct Fixture {
    data: PathBuf,
    list: PathBuf,
    weights: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = fs::remove_dir_all(&root);
        let data = root.join("data");
        let o = run(&[
            "synth",
            "--out",
            s(&data),
            "--count",
            "2",
            "--size",
            "48x48",
            "--seed",
            "3",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let list = data.join("tri_trainlist.txt");
        let run_dir = root.join("run");
        let o = run(&[
            "train",
            "--data",
            s(&data),
            "--list",
            s(&list),
            "--out",
            s(&run_dir),
            "--crop",
            "32",
            "--batch",
            "1",
            "--max-steps",
            "1",
            "--quiet",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        Fixture {
            data,
            list,
            weights: run_dir.join("final.pmcr"),
        }
    })
}

fn frame(f: &Fixture, i: usize) -> PathBuf {
    f.data
        .join("sequences/00001/0001")
        .join(format!("im{i}.png"))
}

fn png_size(p: &Path) -> (u32, u32) {
    let bytes = fs::read(p).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    let be = |o: usize| u32::from_be_bytes(bytes[o..o + 4].try_into().unwrap());
    (be(16), be(20))
}

#[test]
fn help_succeeds_and_unknown_flags_fail_validation() {
    let o = run(&["--help"]);
    assert_eq!(code(&o), 0);
    for sub in [
        "interpolate",
        "train",
        "eval",
        "bench",
        "gradcheck",
        "selftest",
    ] {
        assert!(stdout(&o).contains(sub), "missing {sub}");
    }
    assert_eq!(code(&run(&["selftest", "--no-such-flag"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["bench", "--iters", "0"])), 1);
    assert_eq!(code(&run(&["bench", "--size", "640by480"])), 1);
}

#[test]
fn selftest_passes_and_detects_an_injected_fault() {
    let o = run(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let passes = stdout(&o).lines().filter(|l| l.contains("PASS")).count();
    assert!(passes >= 20, "{passes} passing checks");

    let o = run(&["selftest", "--inject-fault", "conv-backward"]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o)
        .lines()
        .any(|l| l.contains("FAIL") && l.contains("conv2d_gradient")));
}

#[test]
fn gradcheck_over_operators() {
    assert_eq!(code(&run(&["gradcheck", "--ops-only"])), 0);
    let o = run(&["gradcheck", "--ops-only", "--inject-fault", "conv-backward"]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn eval_rejects_unknown_metrics_with_the_valid_names() {
    let f = fixture();
    let o = run(&[
        "eval",
        "--data",
        s(&f.data),
        "--list",
        s(&f.list),
        "--predict-gt",
        "--metrics",
        "psnr,lpips",
    ]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(
        err.contains("lpips") && err.contains("psnr") && err.contains("ssim") && err.contains("ie"),
        "{err}"
    );
}

#[test]
fn eval_of_ground_truth_hits_the_caps() {
    let f = fixture();
    let report = f.data.join("../gt_report.txt");
    let o = run(&[
        "eval",
        "--data",
        s(&f.data),
        "--list",
        s(&f.list),
        "--predict-gt",
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(fs::read_to_string(&report).unwrap(), text);
    let mean = text.lines().find(|l| l.starts_with("mean ")).unwrap();
    assert!(
        mean.contains("psnr=99.000000")
            && mean.contains("ssim=1.000000")
            && mean.contains("ie=0.000000"),
        "{mean}"
    );
    assert_eq!(text.lines().filter(|l| l.starts_with("sample ")).count(), 2);

    let o = run(&[
        "eval",
        "--data",
        s(&f.data),
        "--list",
        s(&f.list),
        "--predict-gt",
        "--metrics",
        "psnr",
    ]);
    let text = stdout(&o);
    assert!(
        text.starts_with("metrics=psnr\n") && !text.contains("ssim="),
        "{text}"
    );
}

#[test]
fn eval_scores_a_checkpoint_and_the_blend() {
    let f = fixture();
    let o = run(&[
        "eval",
        "--data",
        s(&f.data),
        "--list",
        s(&f.list),
        "--weights",
        s(&f.weights),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o)
        .lines()
        .any(|l| l.starts_with("blend_mean samples=2 psnr=")));
}

#[test]
fn interpolate_writes_output_flows_and_levels() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mid.png");
    let (flows, levels) = (dir.path().join("flows"), dir.path().join("levels"));
    let o = run(&[
        "interpolate",
        "--frame0",
        s(&frame(f, 1)),
        "--frame1",
        s(&frame(f, 3)),
        "--weights",
        s(&f.weights),
        "--out",
        s(&out),
        "--dump-flow",
        s(&flows),
        "--dump-levels",
        s(&levels),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(png_size(&out), (48, 48));
    for name in ["flow_t0", "flow_t1"] {
        assert_eq!(png_size(&flows.join(format!("{name}.png"))), (48, 48));
        assert_eq!(
            fs::metadata(flows.join(format!("{name}.f32")))
                .unwrap()
                .len(),
            2 * 48 * 48 * 4
        );
    }
    let mut written: Vec<String> = fs::read_dir(&levels)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    written.sort();
    assert_eq!(
        written,
        ["level0.png", "level1.png", "level2.png", "level3.png"]
    );
}

#[test]
fn interpolate_error_paths() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let small = dir.path().join("small.png");
    let o = run(&[
        "synth",
        "--out",
        s(dir.path()),
        "--count",
        "1",
        "--size",
        "40x32",
    ]);
    assert_eq!(code(&o), 0);
    fs::copy(dir.path().join("sequences/00001/0001/im1.png"), &small).unwrap();
    let out = dir.path().join("o.png");

    let o = run(&[
        "interpolate",
        "--frame0",
        s(&frame(f, 1)),
        "--frame1",
        s(&small),
        "--weights",
        s(&f.weights),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("frame size mismatch"), "{}", stderr(&o));

    let missing = dir.path().join("nope.png");
    let o = run(&[
        "interpolate",
        "--frame0",
        s(&missing),
        "--frame1",
        s(&small),
        "--weights",
        s(&f.weights),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.png"));

    let junk = dir.path().join("junk.pmcr");
    fs::write(&junk, "not a checkpoint").unwrap();
    let o = run(&[
        "interpolate",
        "--frame0",
        s(&small),
        "--frame1",
        s(&small),
        "--weights",
        s(&junk),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 2);
}

fn train_log(extra: &[&str]) -> String {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "train",
        "--data",
        s(&f.data),
        "--list",
        s(&f.list),
        "--out",
        s(dir.path()),
        "--crop",
        "32",
        "--batch",
        "1",
        "--max-steps",
        "1",
        "--quiet",
    ];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fs::read_to_string(dir.path().join("train.log")).unwrap()
}

#[test]
fn train_flags_reach_the_log() {
    let fixed = train_log(&["--tau", "fixed"]);
    assert!(
        fixed.contains("tau=fixed") && fixed.contains(" tau=0.1 "),
        "{fixed}"
    );
    let off = train_log(&["--tau", "off"]);
    assert!(off.contains(" tau=0 "), "{off}");

    let header = |log: &str| log.lines().next().unwrap().to_owned();
    let full = header(&train_log(&[]));
    let no_csm = header(&train_log(&["--ablate", "csm"]));
    assert!(no_csm.contains("csm=off") && full.contains("csm=on"));
    assert_ne!(full, no_csm);
}

#[test]
fn seeded_training_is_reproducible_and_invalid_values_fail() {
    // Checkpoint lines name the per-run temp directory.
    let steps = |log: String| {
        log.lines()
            .filter(|l| !l.starts_with("checkpoint"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let first = steps(train_log(&["--seed", "7"]));
    assert!(first.contains("seed=7") && first.contains("step=0 "));
    assert_eq!(first, steps(train_log(&["--seed", "7"])));
    assert_eq!(
        code(&run(&[
            "train",
            "--data",
            "x",
            "--list",
            "y",
            "--out",
            "z",
            "--tau",
            "sometimes"
        ])),
        1
    );
    assert_eq!(
        code(&run(&[
            "train",
            "--data",
            "x",
            "--list",
            "y",
            "--out",
            "z",
            "--ablate",
            "everything"
        ])),
        1
    );
    assert_eq!(
        code(&run(&[
            "train",
            "--data",
            "/nonexistent",
            "--list",
            "/nonexistent/l.txt",
            "--out",
            "/tmp/x"
        ])),
        2
    );
}

#[test]
fn resume_rejects_a_different_configuration() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "train",
        "--data",
        s(&f.data),
        "--list",
        s(&f.list),
        "--out",
        s(dir.path()),
        "--crop",
        "32",
        "--max-steps",
        "1",
        "--quiet",
        "--ablate",
        "pmr",
        "--resume",
        s(&f.weights),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("configuration"));
}

#[test]
fn bench_reports_timing_and_the_reference_as_context() {
    let o = run(&["bench", "--size", "64x48", "--iters", "1", "--warmup", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("bench ")).unwrap();
    assert!(
        line.contains("size=64x48")
            && line.contains("std_ms=0.000")
            && line.contains("params=6756560"),
        "{line}"
    );
    assert!(text.contains("not a pass threshold"));
}
