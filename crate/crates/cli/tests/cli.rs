use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cgvar(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgvar"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const TINY_HARMONIC: &str = r#"
seed = 3
[potential]
kind = "harmonic"
dim = 2
stiffness = 1.0
[model]
width = 4
[train]
samples = 64
temper_samples = 200
checkpoint_every = 50
[train.adam]
lr = 0.01
[train.inner]
window = 10
rel_tol = 0.01
max_iters = 60
[train.temper]
beta0 = 0.2
delta_beta_max = 0.4
"#;

#[test]
fn gradcheck_passes_on_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = cgvar(&["gradcheck"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS"), "{}", stdout(&o));
}

#[test]
fn train_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", TINY_HARMONIC);
    let files = ["train_trace.csv", "tempering_trace.csv", "checkpoint.json", "checkpoint_stage0.json"];
    let read_all = |out: &str| -> Vec<Vec<u8>> { files.iter().map(|f| fs::read(dir.path().join(out).join(f)).unwrap()).collect() };
    for out in ["a", "b"] {
        let o = cgvar(&["train", "--config", &cfg, "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(read_all("a"), read_all("b"));
    let trace = fs::read_to_string(dir.path().join("a/tempering_trace.csv")).unwrap();
    assert!(trace.starts_with("stage,beta,c,f_s_final,log_Z,ess"));
    assert!(trace.lines().last().unwrap().split(',').nth(1).unwrap() == "1");
    assert!(dir.path().join("a/config.toml").exists());

    // Resuming a finished run leaves everything as it was.
    let o = cgvar(&["train", "--config", &cfg, "--out", "a", "--resume", "a/checkpoint.json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_all("a"), read_all("b"));

    // A different seed gives a different run.
    let o = cgvar(&["train", "--config", &cfg, "--out", "c", "--seed", "4"], dir.path());
    assert!(o.status.success());
    assert_ne!(fs::read(dir.path().join("c/train_trace.csv")).unwrap(), read_all("a")[0]);
}

#[test]
fn broken_width_chain_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        r#"
[model.architecture]
n_c = 1
n_f = 2
decoder = [
  { d_in = 1, d_out = 8, activation = { kind = "tanh" } },
  { d_in = 7, d_out = 2, activation = { kind = "identity" } },
]
encoder_trunk = [{ d_in = 2, d_out = 8, activation = { kind = "tanh" } }]
"#,
    );
    let o = cgvar(&["train", "--config", &cfg, "--out", "x"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("invalid configuration"), "{}", stderr(&o));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn sample_writes_requested_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", TINY_HARMONIC);
    assert!(cgvar(&["train", "--config", &cfg, "--out", "r"], dir.path()).status.success());
    let o = cgvar(&["sample", "--checkpoint", "r/checkpoint.json", "-n", "25", "--out", "s"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("s/samples.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "z1,x1,x2");
    assert_eq!(lines.len(), 26);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 3));
    let o = cgvar(&["sample", "--checkpoint", "r/checkpoint.json", "-n", "0"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn reference_on_harmonic_matches_moments() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "h.toml",
        "[potential]\nkind = \"harmonic\"\ndim = 1\nstiffness = 1.0\n[reference]\nsteps = 120000\nburnin = 20000\nthin = 10\n",
    );
    let o = cgvar(&["reference", "--config", &cfg, "--out", "ref"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("ref/reference_samples.csv")).unwrap();
    assert_eq!(text.lines().count(), 10_000 + 1);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ref/reference_summary.json")).unwrap()).unwrap();
    let mean = summary["mean"][0].as_f64().unwrap();
    let std = summary["std"][0].as_f64().unwrap();
    // 1e4 thinned draws with modest autocorrelation.
    assert!(mean.abs() < 0.06, "{mean}");
    assert!((std - 1.0).abs() < 0.05, "{std}");
    assert!(dir.path().join("ref/oracle.json").exists());
}

const SMALL_DIAGNOSE: &str = "[diagnose]\nsamples = 2000\nmarginal_samples = 500\nkl_samples = 300\n[reference]\nsteps = 40000\nburnin = 5000\n";

#[test]
fn diagnose_fails_on_untrained_model_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "d.toml", &format!("[model]\nwidth = 8\n{SMALL_DIAGNOSE}"));
    // An untrained checkpoint from a training run cut short before it starts.
    let ckdir = dir.path().join("ck");
    fs::create_dir_all(&ckdir).unwrap();
    let o = cgvar(&["sample", "--checkpoint", "nope.json", "-n", "1"], dir.path());
    assert!(!o.status.success());
    fs::copy(fixtures().join("oracle_double_well_beta1.json"), ckdir.join("oracle_double_well_beta1.json")).unwrap();
    let untrained = cgvar::RunConfig::parse("[model]\nwidth = 8", None).unwrap().initial_model().unwrap();
    cgvar::Checkpoint::from_model(&untrained, 0).save(ckdir.join("checkpoint.json")).unwrap();

    let run = |out: &str| cgvar(&["diagnose", "--checkpoint", "ck/checkpoint.json", "--config", &cfg, "--out", out], dir.path());
    let o = run("d1");
    assert_eq!(o.status.code(), Some(2), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("cv_correlation") && l.ends_with("FAIL")), "{}", stdout(&o));
    let files = ["hist2d_model.csv", "hist2d_reference.csv", "slice_potential.csv", "kl_trace.csv", "cv_field.csv", "moments.json"];
    for f in files {
        assert!(dir.path().join("d1").join(f).exists(), "{f}");
    }
    let cv = fs::read_to_string(dir.path().join("d1/cv_field.csv")).unwrap();
    assert!(cv.starts_with("x1,x2,z_mean1,z_sigma1"));
    let _ = run("d2");
    for f in files {
        assert_eq!(fs::read(dir.path().join("d1").join(f)).unwrap(), fs::read(dir.path().join("d2").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn diagnose_skips_oracle_checks_without_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "h.toml",
        &format!("[potential]\nkind = \"harmonic\"\ndim = 3\nstiffness = 1.0\n[model]\nwidth = 4\n{SMALL_DIAGNOSE}"),
    );
    let conf = cgvar::RunConfig::load(dir.path().join("h.toml"), None).unwrap();
    fs::create_dir_all(dir.path().join("ck")).unwrap();
    cgvar::Checkpoint::from_model(&conf.initial_model().unwrap(), 0).save(dir.path().join("ck/checkpoint.json")).unwrap();
    let o = cgvar(&["diagnose", "--checkpoint", "ck/checkpoint.json", "--config", &cfg, "--out", "d"], dir.path());
    assert!(stdout(&o).contains("mode_mass              skipped"), "{}", stdout(&o));
    assert!(stderr(&o).contains("no oracle fixture"), "{}", stderr(&o));
}

#[test]
fn bad_thread_count_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cgvar"))
        .args(["gradcheck"])
        .current_dir(dir.path())
        .env("CGVAR_THREADS", "many")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("CGVAR_THREADS"));
}

#[test]
fn unknown_preset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = cgvar(&["gradcheck", "--preset", "huge"], dir.path());
    assert!(!o.status.success());
}

fn trained() -> String {
    fixtures().join("desk_run/checkpoint.json").to_string_lossy().into_owned()
}

#[test]
fn diagnose_on_trained_fixture_reports_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let oracle = fixtures().join("oracle_double_well_beta1.json");
    let cfg = write(dir.path(), "d.toml", &format!("[diagnose]\nfixture = {:?}\n", oracle.to_string_lossy()));
    let o = cgvar(&["--preset", "desk", "diagnose", "--checkpoint", &trained(), "--config", &cfg, "--out", "d"], dir.path());
    let text = stdout(&o);
    let verdicts: Vec<(String, bool)> = text
        .lines()
        .filter(|l| l.ends_with("PASS") || l.ends_with("FAIL"))
        .map(|l| (l.split_whitespace().next().unwrap().to_string(), l.ends_with("PASS")))
        .collect();
    let names: Vec<&str> = verdicts.iter().map(|v| v.0.as_str()).collect();
    let expected = ["slice_has_both_wells", "cv_correlation", "forward_kl_decreases", "mode_mass", "mean_x1", "std_x1", "mean_x2", "std_x2"];
    assert_eq!(names, expected, "{text}{}", stderr(&o));
    let all = verdicts.iter().all(|v| v.1);
    assert_eq!(o.status.code(), Some(if all { 0 } else { 2 }), "{text}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("d/moments.json")).unwrap()).unwrap();
    let saved: Vec<(String, bool)> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| (c["name"].as_str().unwrap().to_string(), c["passed"].as_bool().unwrap()))
        .collect();
    assert_eq!(saved, verdicts);
    assert!(report["skipped"].as_array().unwrap().is_empty());
}

#[test]
fn sampled_rows_pair_each_x_with_its_z() {
    let dir = tempfile::tempdir().unwrap();
    let o = cgvar(&["sample", "--checkpoint", &trained(), "-n", "10000", "--out", "s"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("s/samples.csv")).unwrap();
    let rows: Vec<Vec<f64>> = text.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 10_000);
    let model = cgvar::Checkpoint::load(trained()).unwrap().to_model().unwrap();
    let sigma = model.decoder_sigma();
    let mut ws = model.workspace();
    // Residuals against the decoder mean at the written z are standard normal.
    for (j, s) in sigma.iter().enumerate() {
        let r: Vec<f64> = rows.iter().map(|row| (row[1 + j] - model.decoder_mean(&mut ws, &row[..1]).unwrap()[j]) / s).collect();
        let m = cgvar::stats::mean(&r);
        let v = cgvar::stats::variance(&r);
        assert!(m.abs() < 0.05 && (v - 1.0).abs() < 0.05, "x{}: mean {m}, var {v}", j + 1);
    }
}
