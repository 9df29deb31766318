//! End-to-end checks of the command-line interface: determinism of every
//! command, exit codes, and bit-exact parity between CLI output and
//! in-process library calls.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dyad"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn dyad binary")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth_args(out: &str) -> Vec<String> {
    [
        "synth", "--classes", "2", "--modes", "2", "--demos", "3", "--T", "24", "--sigma",
        "0.01", "--seed", "5", "--out", out,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn train_args(data: &str, out: &str, log: &str) -> Vec<String> {
    [
        "train",
        "--data",
        data,
        "--window",
        "3",
        "--classes",
        "2",
        "--components",
        "3",
        "--latent-dim",
        "3",
        "--hidden",
        "16,8",
        "--epochs",
        "2",
        "--samples",
        "4",
        "--em-iters",
        "3",
        "--seed",
        "7",
        "--out",
        out,
        "--log",
        log,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
    fn read(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.path(name)).unwrap()
    }
}

fn synth_and_train(ws: &Workspace) {
    let args = synth_args("data.txt");
    let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    assert_ok(&run(&refs, ws.dir.path()));
    let args = train_args("data.txt", "model.ckpt", "log.csv");
    let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    assert_ok(&run(&refs, ws.dir.path()));
}

#[test]
fn synth_is_deterministic_and_counts_demos() {
    let ws = Workspace::new();
    for out in ["a.txt", "b.txt"] {
        let args = synth_args(out);
        let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        assert_ok(&run(&refs, ws.dir.path()));
    }
    assert_eq!(ws.read("a.txt"), ws.read("b.txt"));
    let text = String::from_utf8(ws.read("a.txt")).unwrap();
    let demos = text.lines().filter(|l| l.starts_with("demo ")).count();
    assert_eq!(demos, 6);
}

#[test]
fn train_missing_data_flag_is_usage_error() {
    let ws = Workspace::new();
    let out = run(&["train"], ws.dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_deterministic_checkpoint_and_log() {
    let ws = Workspace::new();
    let args = synth_args("data.txt");
    let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    assert_ok(&run(&refs, ws.dir.path()));
    for (ckpt, log) in [("m1.ckpt", "l1.csv"), ("m2.ckpt", "l2.csv")] {
        let args = train_args("data.txt", ckpt, log);
        let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        assert_ok(&run(&refs, ws.dir.path()));
    }
    assert_eq!(ws.read("m1.ckpt"), ws.read("m2.ckpt"));
    let log = String::from_utf8(ws.read("l1.csv")).unwrap();
    assert!(log.starts_with("epoch,class,recon,kl,hsmm_loglik,wall_secs,prior_sig"));
    // 2 epochs x 2 classes
    assert_eq!(log.lines().count(), 1 + 4);
}

#[test]
fn train_class_count_mismatch_is_data_error() {
    let ws = Workspace::new();
    let args = synth_args("data.txt");
    let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    assert_ok(&run(&refs, ws.dir.path()));
    let mut args = train_args("data.txt", "m.ckpt", "l.csv");
    let pos = args.iter().position(|a| a == "--classes").unwrap();
    args[pos + 1] = "5".into();
    let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let out = run(&refs, ws.dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn condition_matches_library_call() {
    let ws = Workspace::new();
    synth_and_train(&ws);

    // extract the first demo's agent-1 frames into a plain frame file
    let demos = dyad::dataio::load_dataset(ws.path("data.txt")).unwrap();
    let demo = &demos[0];
    let mut frames = String::new();
    for t in 0..demo.len() {
        let row: Vec<String> = demo.agent1.row(t).iter().map(|v| format!("{v}")).collect();
        frames.push_str(&row.join(" "));
        frames.push('\n');
    }
    std::fs::write(ws.path("frames.txt"), frames).unwrap();

    let out = run(
        &[
            "condition",
            "--checkpoint",
            "model.ckpt",
            "--class",
            &demo.class_label,
            "--input",
            "frames.txt",
            "--out",
            "pred.txt",
            "--out-windows",
            "pred_windows.txt",
        ],
        ws.dir.path(),
    );
    assert_ok(&out);

    // library reference
    let model = dyad::pipeline::load(ws.path("model.ckpt")).unwrap();
    let windowed = dyad::dataio::window_stack(demo, model.config.window).unwrap();
    let want = dyad::pipeline::condition(&model, &demo.class_label, &windowed.agent1).unwrap();

    let text = std::fs::read_to_string(ws.path("pred_windows.txt")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), windowed.agent1.rows(), "t windows in, t predictions out");
    for (t, line) in lines.iter().enumerate() {
        let got: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(got.len(), want.cols());
        for (j, v) in got.iter().enumerate() {
            assert_eq!(
                v.to_bits(),
                want[(t, j)].to_bits(),
                "window {t} coord {j} differs from library output"
            );
        }
    }
    // trajectory file carries the first frame of each predicted window
    let traj = std::fs::read_to_string(ws.path("pred.txt")).unwrap();
    let first: Vec<f64> = traj
        .lines()
        .next()
        .unwrap()
        .split_whitespace()
        .map(|v| v.parse().unwrap())
        .collect();
    let d2 = demo.agent2.cols();
    for (j, v) in first.iter().enumerate() {
        assert_eq!(v.to_bits(), want[(0, j)].to_bits());
        assert!(j < d2);
    }
}

#[test]
fn condition_unknown_class_lists_known() {
    let ws = Workspace::new();
    synth_and_train(&ws);
    std::fs::write(ws.path("frames.txt"), "0 0\n0 0\n0 0\n").unwrap();
    let out = run(
        &[
            "condition",
            "--checkpoint",
            "model.ckpt",
            "--class",
            "foo",
            "--input",
            "frames.txt",
            "--out",
            "pred.txt",
        ],
        ws.dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("class0") && err.contains("class1"), "{err}");
}

#[test]
fn streaming_stdin_matches_file_input() {
    use std::io::Write as _;
    let ws = Workspace::new();
    synth_and_train(&ws);
    let demos = dyad::dataio::load_dataset(ws.path("data.txt")).unwrap();
    let demo = &demos[1];
    let mut frames = String::new();
    for t in 0..demo.len() {
        let row: Vec<String> = demo.agent1.row(t).iter().map(|v| format!("{v}")).collect();
        frames.push_str(&row.join(" "));
        frames.push('\n');
    }
    std::fs::write(ws.path("frames.txt"), &frames).unwrap();
    let out = run(
        &[
            "condition",
            "--checkpoint",
            "model.ckpt",
            "--class",
            &demo.class_label,
            "--input",
            "frames.txt",
            "--out",
            "batch.txt",
        ],
        ws.dir.path(),
    );
    assert_ok(&out);

    let mut child = bin()
        .args([
            "condition",
            "--checkpoint",
            "model.ckpt",
            "--class",
            &demo.class_label,
            "--input",
            "-",
            "--out",
            "stream.txt",
        ])
        .current_dir(ws.dir.path())
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    child
        .stdin
        .as_mut()
        .unwrap()
        .write_all(frames.as_bytes())
        .unwrap();
    drop(child.stdin.take());
    assert!(child.wait().unwrap().success());

    assert_eq!(ws.read("batch.txt"), ws.read("stream.txt"));
}

#[test]
fn eval_writes_self_describing_csvs() {
    let ws = Workspace::new();
    synth_and_train(&ws);
    let out = run(
        &[
            "eval",
            "--checkpoint",
            "model.ckpt",
            "--data",
            "data.txt",
            "--out-prefix",
            "ev",
            "--coords-per-joint",
            "2",
        ],
        ws.dir.path(),
    );
    assert_ok(&out);
    let summary = String::from_utf8(ws.read("ev_summary.csv")).unwrap();
    assert!(summary.starts_with("class,demos,frames,mse_mean,mse_std,window_mse_mean"));
    assert!(summary.contains("raw_units^2"));
    let curve = String::from_utf8(ws.read("ev_curve.csv")).unwrap();
    assert!(curve.starts_with("class,t,mse,units"));
    let coords = String::from_utf8(ws.read("ev_coords.csv")).unwrap();
    assert_eq!(coords.lines().count(), 1 + 2 * 2); // 2 classes x 2 coords
    let joints = String::from_utf8(ws.read("ev_joints.csv")).unwrap();
    assert_eq!(joints.lines().count(), 1 + 2); // 2 classes x 1 joint
}

#[test]
fn inspect_prints_config_and_classes() {
    let ws = Workspace::new();
    synth_and_train(&ws);
    let out = run(&["inspect", "--checkpoint", "model.ckpt"], ws.dir.path());
    assert_ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("latent_dim=3"));
    assert!(text.contains("class class0"));
    assert!(text.contains("class class1"));
}
