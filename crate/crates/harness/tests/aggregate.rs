use viraal_core::metrics::MetricsReport;
use viraal_harness::aggregate::{initial_set_mismatches, summarize, write_outputs};
use viraal_harness::experiment::{CellRecord, CellStatus};

fn record(series: &str, x: f64, seed: u64, acc: f64, f1: f64, ok: bool) -> CellRecord {
    CellRecord {
        key: format!("{series}_{x}_{seed}"),
        experiment: "regime".into(),
        dataset: "syn".into(),
        x,
        series: series.into(),
        seed,
        status: if ok { CellStatus::Ok } else { CellStatus::Failed { error: "x".into() } },
        report: ok.then(|| MetricsReport {
            intent_accuracy: acc,
            slot_f1: f1,
            slot_precision: f1,
            slot_recall: f1,
            examples: 10,
            loss_curve: vec![],
            seed: Some(seed),
        }),
        initial_hash: None,
        manifest: None,
        extra: Default::default(),
    }
}

/// Two-pass mean and population std, written independently of the crate.
fn brute(v: &[f64]) -> (f64, f64) {
    let mut sum = 0.0;
    for x in v {
        sum += x;
    }
    let m = sum / v.len() as f64;
    let mut ss = 0.0;
    for x in v {
        ss += (x - m) * (x - m);
    }
    (m, (ss / v.len() as f64).sqrt())
}

#[test]
fn summary_matches_brute_force() {
    let accs = [0.9, 0.8, 0.85, 0.7, 0.95, 0.6, 0.88, 0.91];
    let f1s = [80.0, 70.5, 91.25, 66.0, 73.0, 79.5, 85.0, 60.0];
    let mut records = Vec::new();
    for seed in 0..8u64 {
        records.push(record("ce-joint", 5.0, seed, accs[seed as usize], f1s[seed as usize], true));
        records.push(record("vat-joint", 5.0, seed, 0.5, 50.0, seed != 3));
    }
    let rows = summarize(&records);
    assert_eq!(rows.len(), 2);

    let ce = &rows[0];
    assert_eq!(ce.series, "ce-joint");
    let pct: Vec<f64> = accs.iter().map(|a| 100.0 * a).collect();
    let (m, s) = brute(&pct);
    assert!((ce.intent_accuracy_mean - m).abs() < 1e-9);
    assert!((ce.intent_accuracy_std - s).abs() < 1e-9);
    let (m, s) = brute(&f1s);
    assert!((ce.slot_f1_mean - m).abs() < 1e-9);
    assert!((ce.slot_f1_std - s).abs() < 1e-9);
    assert_eq!((ce.runs, ce.failed), (8, 0));

    let vat = &rows[1];
    assert_eq!((vat.runs, vat.failed), (7, 1));
    assert_eq!(vat.intent_accuracy_std, 0.0);
    assert_eq!(vat.slot_f1_mean, 50.0);
}

#[test]
fn panels_are_long_format_per_metric() {
    let records: Vec<CellRecord> = [1.0, 5.0]
        .into_iter()
        .flat_map(|x| (0..2).map(move |s| record("ce-int", x, s, 0.5 + 0.1 * s as f64, 40.0, true)))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let written = write_outputs(&summarize(&records), dir.path()).unwrap();
    assert_eq!(written.len(), 3);
    let panel = std::fs::read_to_string(dir.path().join("panel_regime_syn_intent.csv")).unwrap();
    let lines: Vec<&str> = panel.lines().collect();
    assert_eq!(lines[0], "x,series,mean,std,runs");
    assert_eq!(lines.len(), 3);
    let cols: Vec<f64> = lines[1].split(',').filter_map(|c| c.parse().ok()).collect();
    assert_eq!(cols[0], 1.0);
    assert!((cols[1] - 55.0).abs() < 1e-9);
    assert!((cols[2] - 5.0).abs() < 1e-9);
}

#[test]
fn mismatched_initial_sets_are_reported() {
    let mut a = record("joint/ce-random", 10.0, 0, 0.5, 50.0, true);
    a.experiment = "al".into();
    a.initial_hash = Some("h1".into());
    let mut b = a.clone();
    b.key = "other".into();
    assert!(initial_set_mismatches(&[a.clone(), b.clone()]).is_empty());
    b.initial_hash = Some("h2".into());
    assert_eq!(initial_set_mismatches(&[a.clone(), b.clone()]).len(), 1);
    b.seed = 1;
    assert!(initial_set_mismatches(&[a, b]).is_empty());
}
