use jdlan::lan::{
    aggregate_estimator_rows, aggregate_lan_rows, config_hash, estimator_asymptotics_experiment, lan_expansion_experiment, replay_lan_row, LanConfig,
};
use jdlan::model::builtin_ou_jump;

fn cfg() -> LanConfig {
    let mut c = LanConfig::new(builtin_ou_jump(1.0, 1.0, 1.0, 0.0, 0.5).unwrap(), 12);
    c.n_schedule = vec![250, 1000];
    c.master_seed = 77;
    c
}

#[test]
fn lan_aggregates_recompute_from_rows() {
    let c = cfg();
    let report = lan_expansion_experiment(&c, None).unwrap();
    assert_eq!(report.rows.len(), 24);
    for agg in &report.aggregates {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.n == agg.n).cloned().collect();
        let again = aggregate_lan_rows(agg.n, agg.step, &rows, &report.gamma, report.hgh);
        assert_eq!(&again, agg);
    }
}

#[test]
fn estimator_aggregates_recompute_from_rows() {
    let c = cfg();
    let report = estimator_asymptotics_experiment(&c, None).unwrap();
    for agg in &report.aggregates {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.n == agg.n).cloned().collect();
        let again = aggregate_estimator_rows(agg.n, &rows, &report.gamma).unwrap();
        assert_eq!(&again, agg);
    }
}

#[test]
fn any_row_replays_bit_exactly() {
    let c = cfg();
    let report = lan_expansion_experiment(&c, Some(2)).unwrap();
    for r in report.rows.iter().filter(|r| r.rep % 5 == 0) {
        let again = replay_lan_row(&c, r.n, r.rep).unwrap();
        assert_eq!(again.lambda.to_bits(), r.lambda.to_bits());
        assert!(again.v.iter().zip(&r.v).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(again.t.iter().zip(&r.t).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn rows_are_in_stream_order() {
    let report = lan_expansion_experiment(&cfg(), Some(3)).unwrap();
    for n in [250, 1000] {
        let reps: Vec<usize> = report.rows.iter().filter(|r| r.n == n).map(|r| r.rep).collect();
        assert_eq!(reps, (0..12).collect::<Vec<_>>());
        assert!(report.rows.iter().all(|r| r.stream_index == r.rep as u64));
    }
}

#[test]
fn config_json_round_trips_with_the_same_hash() {
    let c = cfg();
    let text = serde_json::to_string(&c).unwrap();
    let back = LanConfig::from_json(&text).unwrap();
    assert_eq!(back, c);
    assert_eq!(config_hash(&back).unwrap(), config_hash(&c).unwrap());
    let bad = text.replacen("\"beta\"", "\"betta\"", 1);
    assert!(LanConfig::from_json(&bad).is_err());
}
