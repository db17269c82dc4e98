use nfmimo::harness::plotdata::PLOT_HEADER;
use nfmimo::harness::{
    emit_plotdata, run_experiment, CsiSource, ExperimentConfig, ExperimentKind, PlotSpec, PoseDeg, RunOptions, Sweep,
    SweepAxis, METRICS_HEADER,
};
use nfmimo::Error;

fn small(kind: ExperimentKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.kind = kind;
    c.scenario.num_ues = 2;
    c.trials = 3;
    c.ota.iterations = 3;
    c
}

fn csv_without_runtime(cfg: &ExperimentConfig, opts: &RunOptions) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    run_experiment(cfg, opts, &mut out).unwrap();
    let runtime = METRICS_HEADER.iter().position(|h| *h == "runtime_s").unwrap();
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(out.as_slice());
    rdr.records()
        .map(|r| r.unwrap().iter().enumerate().filter(|(i, _)| *i != runtime).map(|(_, f)| f.to_string()).collect())
        .collect()
}

#[test]
fn same_seed_gives_the_same_csv_for_any_worker_count() {
    for kind in [ExperimentKind::Precode, ExperimentKind::Ota] {
        let cfg = small(kind);
        let a = csv_without_runtime(&cfg, &RunOptions::default());
        let b = csv_without_runtime(&cfg, &RunOptions { threads: Some(3), ..Default::default() });
        assert_eq!(a, b);
        assert_eq!(a[0], METRICS_HEADER.iter().filter(|h| **h != "runtime_s").map(|h| h.to_string()).collect::<Vec<_>>());
        let expected = if kind == ExperimentKind::Ota { 3 * 4 } else { 3 };
        assert_eq!(a.len(), 1 + expected);

        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(a, csv_without_runtime(&other, &RunOptions::default()));
    }
}

#[test]
fn rows_come_out_in_sweep_then_trial_order() {
    let mut cfg = small(ExperimentKind::Crlb);
    cfg.sweep = Some(Sweep { axis: SweepAxis::Pilots, values: vec![Some(2.0), Some(4.0)] });
    let rows = csv_without_runtime(&cfg, &RunOptions { threads: Some(2), ..Default::default() });
    let at = |name: &str| METRICS_HEADER.iter().position(|h| *h == name).unwrap();
    let order: Vec<(String, String)> = rows[1..].iter().map(|r| (r[at("sweep_value")].clone(), r[at("trial")].clone())).collect();
    let want: Vec<(String, String)> =
        ["2", "4"].iter().flat_map(|m| (0..3).map(move |t| (m.to_string(), t.to_string()))).collect();
    assert_eq!(order, want);
}

/// One fixed UE whose rotation leaves the search range at the second point.
fn half_broken() -> ExperimentConfig {
    let mut cfg = small(ExperimentKind::Crlb);
    cfg.scenario.num_ues = 1;
    cfg.scenario.placements = vec![PoseDeg { d_m: 5.5, beta_deg: 0.0, gamma_deg: 0.0 }];
    cfg.estimation.gamma_range_deg = (0.0, 45.0);
    cfg.sweep = Some(Sweep { axis: SweepAxis::GammaDeg, values: vec![Some(10.0), Some(90.0)] });
    cfg
}

#[test]
fn failed_trials_stop_the_run_unless_skipped() {
    let cfg = half_broken();
    let err = run_experiment(&cfg, &RunOptions::default(), Vec::new()).unwrap_err();
    assert!(matches!(err, Error::Trial { .. }), "{err}");

    let mut out = Vec::new();
    let summary = run_experiment(&cfg, &RunOptions { skip_failures: true, ..Default::default() }, &mut out).unwrap();
    assert_eq!(summary.rows, 3);
    assert_eq!(summary.failures.len(), 3);
    assert!(summary.failures.iter().all(|(_, point, _)| point == "90"));
    assert_eq!(String::from_utf8(out).unwrap().lines().count(), 1 + 3);
}

#[test]
fn plot_data_from_a_real_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(ExperimentKind::Precode);
    cfg.csi = CsiSource::Perfect;
    cfg.trials = 5;
    let raw = dir.path().join("raw.csv");
    run_experiment(&cfg, &RunOptions::default(), std::fs::File::create(&raw).unwrap()).unwrap();
    let target = emit_plotdata(&raw, &PlotSpec::new("rates", &["r_min", "r_mean"]), &dir.path().join("plot")).unwrap();
    let mut rdr = csv::Reader::from_path(&target).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), PLOT_HEADER);
    let records: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 2);
    for r in &records {
        assert_eq!(&r[7], "5");
        let v: Vec<f64> = (8..16).map(|i| r[i].parse().unwrap()).collect();
        let (mean, bands) = (v[0], &v[1..]);
        assert!(bands.windows(2).all(|w| w[0] <= w[1]));
        assert!(bands[0] <= mean && mean <= bands[6]);
    }
}

#[test]
fn config_errors_name_the_line() {
    let text = nfmimo::harness::DEFAULT_CONFIG_JSON.replacen("\"num_ues\": 8", "\"num_ues\": \"eight\"", 1);
    let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
    let line = text.lines().position(|l| l.contains("\"eight\"")).unwrap() + 1;
    assert!(err.contains(&format!("line {line}")), "{err}");

    let mut cfg = ExperimentConfig::default();
    cfg.scenario.num_ues = 0;
    assert!(cfg.validate().is_err());
}
