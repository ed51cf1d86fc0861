mod common;

use common::pipeline::{full_run, sgght, snapshot, TINY_GENERATOR, TINY_TRAINING};
use sgght_core::schedules::{branch_alpha, predicate_lambda};
use sgght_core::trainer::train_config_from_str;

#[test]
fn pipeline_outputs_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    full_run(a.path(), TINY_GENERATOR, TINY_TRAINING);
    full_run(b.path(), TINY_GENERATOR, TINY_TRAINING);
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert!(sa.iter().any(|(p, _)| p.ends_with("checkpoint.bin")));
    assert_eq!(sa, sb);
}

#[test]
fn eval_report_lists_every_metric_and_predicate() {
    let dir = tempfile::tempdir().unwrap();
    let run = full_run(dir.path(), TINY_GENERATOR, TINY_TRAINING);
    let text = std::fs::read_to_string(&run.eval).unwrap();
    for k in [20, 50, 100] {
        for metric in ["R@K", "mR@K", "M@K", "group_many@K", "group_medium@K", "group_few@K"] {
            let line = text
                .lines()
                .find(|l| l.starts_with(&format!("{metric}\t{k}\t")))
                .unwrap_or_else(|| panic!("{metric} at {k} missing"));
            let v: f64 = line.rsplit('\t').next().unwrap().parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let predicate_rows = text.lines().skip_while(|l| !l.starts_with("predicate\t")).skip(1);
    assert_eq!(predicate_rows.count(), 12);
}

#[test]
fn schedule_report_matches_the_schedules() {
    let dir = tempfile::tempdir().unwrap();
    let run = full_run(dir.path(), TINY_GENERATOR, TINY_TRAINING);
    let cfg = train_config_from_str(TINY_TRAINING).unwrap();
    let text = std::fs::read_to_string(&run.report).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(2)
        .take_while(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').map(|v| v.parse().unwrap()).collect())
        .collect();
    // Iteration 1, every fifth and the last one.
    assert_eq!(rows.len(), 1 + 80 / 5);
    for r in &rows {
        let k = r[0] as usize;
        assert_eq!(r[1], branch_alpha(k, &cfg.schedule));
        assert_eq!(r[2], r[1]);
        assert_eq!(r[3], predicate_lambda(k, true, &cfg.schedule));
        assert_eq!(r[4], r[3]);
    }
    assert!(text.contains("# per-predicate recall at iteration 80"));
}

#[test]
fn eval_with_missing_checkpoint_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval.tsv");
    let res = sgght(&[
        "eval",
        "--checkpoint",
        dir.path().join("absent.bin").to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!out.exists());
    assert!(String::from_utf8_lossy(&res.stderr).contains("error"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(sgght(&["fly"]).status.code(), Some(2));
    assert_eq!(sgght(&["generate"]).status.code(), Some(2));
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.cfg");
    std::fs::write(&cfg, "feature_dim=2\n").unwrap();
    let out = dir.path().join("data");
    let res = sgght(&["generate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!out.exists());
}
