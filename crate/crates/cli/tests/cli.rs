use std::path::Path;
use std::process::{Command, Output};

fn arz(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arz")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\nstdout:\n{}\nstderr:\n{}", out.status, String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_preset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = arz(&["simulate", "--preset", "rush_hour", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));
}

#[test]
fn missing_model_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = arz(&["simulate", "--controller", "no_kernel", "--model", "/nonexistent/model.bin", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(4));
    let out = arz(&["simulate", "--controller", "no_kernel", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn open_loop_reports_persistent_oscillation() {
    let dir = tempfile::tempdir().unwrap();
    let out = arz(&["simulate", "--preset", "reference", "--controller", "open_loop", "--cells", "2000", "--svg", "--out", path(dir.path())]);
    ok(&out);
    let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("verdict: persistent oscillation"), "{summary}");
    for f in ["trajectory.csv", "report.csv", "config.toml", "rho.svg", "v.svg"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    // the echoed configuration reproduces the run
    let cfg = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert!(cfg.contains("controller = \"open_loop\"") && cfg.contains("cells = 2000"));
}

#[test]
fn calibration_snippet_feeds_back_into_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = arz(&["calibrate", "--synthetic", "400", "--out", path(dir.path())]);
    ok(&out);
    let fd = std::fs::read_to_string(dir.path().join("fd.toml")).unwrap();
    assert!(fd.contains("kind = \"three_param\""));
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, format!("preset = \"ngsim_calibrated\"\ncells = 200\n{fd}")).unwrap();
    let run = dir.path().join("run");
    let out = arz(&["simulate", "--config", path(&cfg), "--out", path(&run)]);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("rho* = 320.00 veh/km"), "{stdout}");
}

#[test]
fn bad_calibration_input_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("g.csv");
    std::fs::write(&csv, "x_index,t_index,density,flow\n0,0,100,1000\n1,0,900,100\n").unwrap();
    let out = arz(&["calibrate", "--input", path(&csv), "--rho-max", "800", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":3:"));
}

/// gen-data → train → compare at toy scale, run twice with one seed.
#[test]
fn pipeline_is_deterministic_and_compare_has_one_row_per_controller() {
    let run = |root: &Path| {
        let data = root.join("data");
        let models = root.join("models");
        ok(&arz(&["gen-data", "--samples", "12", "--grid-n", "21", "--seed", "5", "--jobs", "2", "--out", path(&data)]));
        ok(&arz(&["train", "--method", "no_kernel", "--data", path(&data), "--epochs", "20", "--seed", "5", "--out", path(&models)]));
        ok(&arz(&["train", "--method", "pinn_kernel", "--grid-n", "21", "--epochs", "5", "--seed", "5", "--out", path(&models)]));
        let cmp = root.join("cmp");
        ok(&arz(&["compare", "--model-dir", path(&models), "--cells", "100", "--jobs", "2", "--out", path(&cmp)]));
        (
            std::fs::read(data.join("manifest.jsonl")).unwrap(),
            std::fs::read(models.join("no_kernel.bin")).unwrap(),
            std::fs::read_to_string(cmp.join("compare.csv")).unwrap(),
        )
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, wa, ca) = run(a.path());
    let (mb, wb, _) = run(b.path());
    assert_eq!(ma, mb);
    assert_eq!(wa, wb);
    let lines: Vec<&str> = ca.lines().collect();
    assert!(lines[0].starts_with("controller,mse_rho,mse_v") && lines[0].contains("timing_ratio"));
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["backstepping", "pi", "no_kernel", "pinn_kernel"]);
}
