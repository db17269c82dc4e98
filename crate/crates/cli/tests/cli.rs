use std::process::Command;

fn nfmimo() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nfmimo"))
}

#[test]
fn crlb_run_writes_the_metrics_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bounds.csv");
    let status = nfmimo().args(["crlb", "--trials", "2", "--seed", "9", "--out"]).arg(&out).status().unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), nfmimo::harness::METRICS_HEADER.join(","));
    assert_eq!(lines.count(), 2);
}

#[test]
fn figure_emits_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let status = nfmimo().args(["figure", "fig8", "--out"]).arg(dir.path()).status().unwrap();
    assert!(status.success());
    assert!(dir.path().join("fig8_metrics.csv").exists());
    let plot = std::fs::read_to_string(dir.path().join("plotdata/fig8.csv")).unwrap();
    assert!(plot.starts_with("label,csi,init_mode,sweep_axis,sweep_value,iteration,metric,count,mean"));
}

#[test]
fn bad_config_reports_the_line_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\n  \"label\": \"x\",\n  \"trials\": -1\n}\n").unwrap();
    let out = nfmimo().arg("precode").arg("--config").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn unknown_figure_is_rejected() {
    let out = nfmimo().args(["figure", "fig99"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fig10"));
}
