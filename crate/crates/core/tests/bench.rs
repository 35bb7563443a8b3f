use alternet::attention::AttentionKind;
use alternet::bench::{check_scaling, estimated_score_bytes, run_sweep, to_csv, to_dat, Scope, Status, SweepSpec, CSV_HEADER};
use alternet::encoder::EncoderConfig;

fn tiny_spec(channels: Vec<usize>) -> SweepSpec {
    SweepSpec {
        mechanisms: AttentionKind::ALL.to_vec(),
        configs: vec![("tiny".into(), EncoderConfig::tiny())],
        n_patches: 6,
        channels,
        repetitions: 3,
        warmup: 1,
        check_load: false,
        ..SweepSpec::default()
    }
}

#[test]
fn single_channel_costs_agree_across_mechanisms() {
    let points = run_sweep::<f32>(&tiny_spec(vec![1]), |_| {}).unwrap();
    let elements = |k| points.iter().find(|p| p.report.mechanism == k).unwrap().report.score_elements;
    // one channel: every full-sequence mechanism attends over the Np patches
    assert_eq!(elements(AttentionKind::Standard), elements(AttentionKind::Intra));
    assert_eq!(elements(AttentionKind::Alternating), elements(AttentionKind::Intra));
    assert!(points.iter().all(|p| p.status == Status::Ok));
    let time = |k| points.iter().find(|p| p.report.mechanism == k).unwrap().report.measured_ns.unwrap() as f64;
    let ratio = time(AttentionKind::Standard) / time(AttentionKind::Intra);
    assert!((0.5..=2.0).contains(&ratio), "standard/intra at C=1: {ratio}");
}

#[test]
fn meter_agrees_with_closed_forms_over_a_sweep() {
    let points = run_sweep::<f32>(&tiny_spec(vec![1, 2, 4, 8, 16]), |_| {}).unwrap();
    for p in &points {
        assert_eq!(p.counted, Some(p.report.score_elements), "{}", p.csv_row());
    }
    let verdicts = check_scaling(&points).unwrap();
    for v in verdicts.iter().filter(|v| v.mechanism != AttentionKind::Bottleneck) {
        assert!(v.element_ok && v.formula_exact, "{v:?}");
    }
    let csv = to_csv(&points);
    assert!(csv.starts_with(CSV_HEADER));
    assert_eq!(csv.lines().count(), points.len() + 1);
    assert!(!to_dat(&points).is_empty());
}

#[test]
fn oversized_points_are_skipped_not_run() {
    let spec = SweepSpec {
        memory_budget: estimated_score_bytes::<f32>(AttentionKind::Standard, 8, 6, 2) - 1,
        mechanisms: vec![AttentionKind::Standard],
        ..tiny_spec(vec![8])
    };
    let points = run_sweep::<f32>(&spec, |_| {}).unwrap();
    assert_eq!(points[0].status, Status::Oom);
    assert_eq!(points[0].report.measured_ns, None);
}

#[test]
fn encoder_scope_runs_encoder_mechanisms_only() {
    let spec = SweepSpec {
        scope: Scope::Encoder,
        ..tiny_spec(vec![2])
    };
    assert!(spec.validate().is_err());
    let spec = SweepSpec {
        mechanisms: vec![AttentionKind::Standard, AttentionKind::Alternating],
        ..spec
    };
    let points = run_sweep::<f32>(&spec, |_| {}).unwrap();
    assert!(points.iter().all(|p| p.status == Status::Ok));
}
