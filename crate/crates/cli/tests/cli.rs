use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_gsfix");

fn gsfix(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("GSFIX_FIXER")
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "seed = 7\nframes = 8\nwidth = 32\nheight = 24\nfocal = 24.0\nbuilding_count = 2\nactor_count = 1\n";

/// A tiny synthetic dataset in `root/tiny`.
fn tiny_dataset(root: &Path) -> PathBuf {
    let spec = root.join("tiny.toml");
    std::fs::write(&spec, TINY).unwrap();
    let out = root.join("data");
    let o = gsfix(&["synth", "--out", p(&out), "--spec", p(&spec)]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    out.join("tiny")
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&gsfix(&["--help"])), 0);
    assert_eq!(code(&gsfix(&["synth", "--bogus"])), 2);
    assert_eq!(code(&gsfix(&["no-such-command"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let o = gsfix(&["reconstruct", "--data", p(&dir.path().join("missing")), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("gsfix synth --out"), "no remediation hint: {}", text(&o.stderr));
    let o = gsfix(&["synth", "--out", p(dir.path()), "--set", "pipeline.enhance.iterationz=3"]);
    assert_eq!(code(&o), 2);
    let o = gsfix(&["fixer-serve", "--backend", "diffusion"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn resolved_config_is_printed_with_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 5\n[pipeline.enhance]\niterations = 9\n[pipeline.reconstruct]\niterations = 11\n").unwrap();
    let o = gsfix(&[
        "synth",
        "--out",
        p(&dir.path().join("o")),
        "--scene",
        "1",
        "--config",
        p(&cfg),
        "--set",
        "pipeline.enhance.iterations=13",
    ]);
    assert_eq!(code(&o), 0);
    let err = text(&o.stderr);
    assert!(err.contains("seed = 5"));
    assert!(err.contains("iterations = 13"));
    assert!(err.contains("iterations = 11"));
    assert!(!err.contains("iterations = 9"));
    let m = manifest(&dir.path().join("o"));
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    assert!(m["outputs"].as_array().unwrap().iter().any(|f| f["path"] == "scene_01/scene.gscn"));
}

#[test]
fn evaluate_ground_truth_against_itself_is_capped() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let out = dir.path().join("eval");
    let o = gsfix(&["evaluate", "--scene", p(&data.join("scene.gscn")), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let psnr: Vec<&str> = csv.lines().filter(|l| l.contains(",psnr,")).collect();
    assert_eq!(psnr.len(), 6);
    assert!(psnr.iter().all(|l| l.ends_with(",99.000000")), "{csv}");
    assert!(text(&o.stdout).contains("| mean |"));
}

#[test]
fn reconstruct_is_byte_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let run = |workers: &str, out: &str| {
        let out = dir.path().join(out);
        let o = gsfix(&[
            "reconstruct",
            "--workers",
            workers,
            "--data",
            p(&data),
            "--out",
            p(&out),
            "--set",
            "pipeline.reconstruct.iterations=3",
        ]);
        assert_eq!(code(&o), 0, "{}", text(&o.stderr));
        manifest(&out)
    };
    let a = run("1", "r1");
    let b = run("3", "r3");
    assert_eq!(a["outputs"], b["outputs"]);
    assert_eq!(a["config_sha256"], b["config_sha256"]);
    assert_eq!(a["volatile"][0], "timing.json");
    assert_eq!(
        std::fs::read(dir.path().join("r1/chunk_0000-0008.gscn")).unwrap(),
        std::fs::read(dir.path().join("r3/chunk_0000-0008.gscn")).unwrap()
    );
}

#[test]
fn enhance_and_render_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let out = dir.path().join("enh");
    let o = gsfix(&[
        "enhance",
        "--scene",
        p(&data.join("scene.gscn")),
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--degrade",
        "--fixer",
        "median-denoise",
        "--dump-artifacts",
        "--set",
        "pipeline.enhance.iterations=2",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    for f in ["scene.gscn", "degraded.gscn", "trace.csv", "timing.json", "artifacts/index.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let timing: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("timing.json")).unwrap()).unwrap();
    assert_eq!(timing.as_object().unwrap().len(), 3);

    let r = dir.path().join("render");
    let o = gsfix(&[
        "render",
        "--scene",
        p(&out.join("scene.gscn")),
        "--data",
        p(&data),
        "--out",
        p(&r),
        "--shift",
        "-2",
        "--behavior",
        "lane-change",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let pngs = std::fs::read_dir(&r).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 8);
}

#[test]
fn oracle_needs_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    std::fs::remove_file(data.join("spec.toml")).unwrap();
    let o = gsfix(&[
        "genre-plus",
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("gp")),
        "--set",
        "pipeline.reconstruct.iterations=1",
    ]);
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("--fixer identity"));
}

#[test]
fn fixer_check_identity_passes_everything() {
    let o = gsfix(&["fixer-check", "--backend", "identity"]);
    let out = text(&o.stdout);
    assert_eq!(code(&o), 0, "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS ")).count(), 9, "{out}");
    assert!(!out.contains("FAIL"));
    assert_eq!(code(&gsfix(&["fixer-check", "--backend", "nope"])), 2);
    assert_eq!(code(&gsfix(&["fixer-check"])), 2);
}

#[test]
fn fixer_check_spawns_a_stdio_server() {
    let cmd = format!("{BIN} fixer-serve --backend identity --log warn");
    let o = gsfix(&["fixer-check", "--endpoint", &cmd, "--expect-identity"]);
    assert_eq!(code(&o), 0, "{}{}", text(&o.stdout), text(&o.stderr));
}

#[test]
fn fixer_check_over_tcp_via_environment() {
    let mut server = Command::new(BIN)
        .args(["fixer-serve", "--transport", "tcp", "--backend", "median-denoise"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("address line").to_string();
    let o = Command::new(BIN)
        .arg("fixer-check")
        .env("GSFIX_FIXER", format!("tcp://{addr}"))
        .output()
        .unwrap();
    server.kill().ok();
    server.wait().ok();
    assert_eq!(code(&o), 0, "{}", text(&o.stdout));
}

#[test]
fn unreachable_fixer_is_an_operational_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let o = Command::new(BIN)
        .args(["enhance", "--scene", p(&data.join("scene.gscn")), "--data", p(&data), "--out", p(&dir.path().join("e"))])
        .env("GSFIX_FIXER", "tcp://127.0.0.1:1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1, "{}", text(&o.stderr));
}

#[test]
fn genre_plus_on_bundled_scene_zero_with_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let o = gsfix(&["synth", "--out", p(dir.path()), "--scene", "0"]);
    assert_eq!(code(&o), 0);
    let t = Instant::now();
    let out = dir.path().join("gp");
    let o = gsfix(&["genre-plus", "--data", p(&dir.path().join("scene_00")), "--out", p(&out)]);
    let elapsed = t.elapsed();
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(out.join("chunk_0000-0020.gscn").exists());
    assert!(elapsed < Duration::from_secs(600), "{elapsed:?}");
}

#[test]
fn reference_page_is_current() {
    let o = gsfix(&["config-reference"]);
    assert_eq!(code(&o), 0);
    let page = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/cli-reference.md");
    let committed = std::fs::read_to_string(&page).unwrap_or_default();
    assert!(
        committed == text(&o.stdout),
        "docs/cli-reference.md is stale; regenerate with `gsfix config-reference > docs/cli-reference.md`"
    );
}
