use std::fs;
use std::path::Path;

use roicae_core::harness::{collect_runs, cross_check, delta_kind, emit_report, format_delta, metric_delta, write_json, DeltaKind};
use roicae_core::metrics::{write_metric_csv, MetricRecord};
use roicae_core::synth::SplitPlan;
use roicae_core::CoreError;

fn row(id: &str, site: &str, split: &str, v: [f64; 5]) -> MetricRecord {
    MetricRecord {
        id: id.into(),
        site: site.into(),
        split: split.into(),
        psnr: v[0],
        ms_ssim: v[1],
        roi_mae: v[2],
        roi_ms_ssim: v[3],
        roi_edge_mae: v[4],
    }
}

/// One protocol directory with a hand-written split and metric rows.
fn write_seed(runs: &Path, seed: u64, p1: [f64; 5], p2: [f64; 5]) {
    let dir = runs.join("toy").join(format!("seed-{seed}"));
    fs::create_dir_all(dir.join("p1")).unwrap();
    fs::create_dir_all(dir.join("p2")).unwrap();
    let split = SplitPlan {
        held_out: "C".into(),
        seed,
        train: vec!["A-0000".into(), "B-0000".into()],
        val: vec!["A-0001".into()],
        test: vec!["C-0000".into()],
    };
    write_json(&dir.join("split.json"), &split).unwrap();
    let rows = |v: [f64; 5]| vec![row("A-0001", "A", "val", v), row("C-0000", "C", "test", v)];
    write_metric_csv(&dir.join("p1").join("metrics.csv"), &rows(p1)).unwrap();
    write_metric_csv(&dir.join("p2").join("metrics.csv"), &rows(p2)).unwrap();
}

#[test]
fn delta_conventions() {
    let mae = delta_kind(2);
    assert_eq!(mae, DeltaKind::RelativePercent);
    assert_eq!(format_delta(mae, metric_delta(mae, 0.010, 0.009)), "-10.00%");
    let db = delta_kind(0);
    assert_eq!(format_delta(db, metric_delta(db, 35.0, 35.3)), "+0.30 dB");
    for k in 0..5 {
        let kind = delta_kind(k);
        assert_eq!(metric_delta(kind, 0.5, 0.5), Some(0.0));
    }
    assert_eq!(format_delta(mae, metric_delta(mae, 0.0, 0.1)), "n/a");
    assert_eq!(format_delta(DeltaKind::Absolute, Some(-0.0)), "+0.0000");
}

#[test]
fn single_seed_report_marks_std_missing() {
    let runs = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_seed(runs.path(), 1000, [35.0, 0.95, 0.010, 0.9, 0.20], [35.3, 0.951, 0.009, 0.91, 0.18]);
    let (protocols, ablations) = collect_runs(runs.path()).unwrap();
    emit_report(&protocols, &ablations, out.path()).unwrap();

    let table = fs::read_to_string(out.path().join("metrics_table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    // header plus P1/P2 for val and test
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0].split(',').count(), 5 + 10);
    for l in &lines[1..] {
        assert_eq!(l.matches("n/a").count(), 5, "{l}");
    }
    let deltas = fs::read_to_string(out.path().join("deltas.csv")).unwrap();
    assert!(deltas.lines().any(|l| l.starts_with("toy,val,roi_mae,") && l.ends_with(",-10.00%")));
    assert!(deltas.lines().any(|l| l.starts_with("toy,val,psnr,") && l.ends_with(",+0.30 dB")));
}

#[test]
fn two_seed_report_is_reproducible_and_self_consistent() {
    let runs = tempfile::tempdir().unwrap();
    write_seed(runs.path(), 1000, [30.0, 0.9, 0.02, 0.8, 0.3], [30.5, 0.9, 0.018, 0.8, 0.27]);
    write_seed(runs.path(), 1001, [31.0, 0.91, 0.03, 0.81, 0.2], [31.0, 0.91, 0.03, 0.81, 0.2]);
    let (protocols, ablations) = collect_runs(runs.path()).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_report(&protocols, &ablations, a.path()).unwrap();
    emit_report(&protocols, &ablations, b.path()).unwrap();
    for name in ["metrics_table.csv", "deltas.csv"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
    }
    let table = fs::read_to_string(a.path().join("metrics_table.csv")).unwrap();
    assert!(!table.contains("n/a"));

    // a tampered delta no longer matches the seed CSVs
    let path = a.path().join("deltas.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cols: Vec<String> = lines[1].split(',').map(String::from).collect();
    cols[5] = "12.5".into();
    lines[1] = cols.join(",");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert!(cross_check(&protocols, a.path()).is_err());
}

#[test]
fn held_out_rows_outside_test_are_rejected() {
    let runs = tempfile::tempdir().unwrap();
    write_seed(runs.path(), 1000, [30.0, 0.9, 0.02, 0.8, 0.3], [30.5, 0.9, 0.018, 0.8, 0.27]);
    let p1 = runs.path().join("toy/seed-1000/p1/metrics.csv");
    write_metric_csv(&p1, &[row("C-0000", "C", "val", [30.0, 0.9, 0.02, 0.8, 0.3])]).unwrap();
    let err = collect_runs(runs.path()).unwrap_err();
    let mut e = &err;
    while let CoreError::Context { source, .. } = e {
        e = source;
    }
    assert!(matches!(e, CoreError::Leakage(_)), "{err}");
}
