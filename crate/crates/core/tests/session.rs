//! Engine behaviour seen from outside the crate: replay, snapshots, file
//! round trips and a few invariants checked on random inputs.

use proptest::prelude::*;

use stratrla::assorter::AssorterSpec;
use stratrla::engine::{AuditConfig, AuditSession, SessionSnapshot, StratumConfig};
use stratrla::ingest::{read_population_csv, read_sample_csv, write_population_csv, write_sample_csv, SampleCard};
use stratrla::martingale::Method;
use stratrla::population::Category;
use stratrla::AuditError;

fn comparison_config(method: Method, size: u64) -> AuditConfig {
    let spec = AssorterSpec::comparison(1.0, 0.55).unwrap();
    let mut cfg = AuditConfig::new(
        0.05,
        vec![StratumConfig::new(size, spec, method), StratumConfig::new(size, spec, method)],
    );
    cfg.grid_size = Some(80);
    cfg
}

fn feed(session: &mut AuditSession, cards: &[(usize, f64)]) -> usize {
    let mut used = 0;
    for &(k, mvr) in cards {
        match session.ingest_card(k, mvr, Some(1.0)) {
            Ok(_) => used += 1,
            Err(AuditError::Stopped) => break,
            Err(e) => panic!("{e}"),
        }
    }
    used
}

#[test]
fn snapshot_json_round_trip_restores_risk() {
    let mut session = AuditSession::new(comparison_config(Method::AlphaUb, 100)).unwrap();
    feed(&mut session, &[(0, 1.0), (1, 1.0), (1, 0.5), (0, 1.0), (1, 0.0), (0, 1.0)]);
    let json = serde_json::to_string(&session.snapshot()).unwrap();
    let snap: SessionSnapshot = serde_json::from_str(&json).unwrap();
    let restored = AuditSession::from_snapshot(&snap).unwrap();
    assert_eq!(restored.risk().p_fisher, session.risk().p_fisher);
    assert_eq!(restored.risk().p_intersection, session.risk().p_intersection);
    assert_eq!(restored.counts(), session.counts());
    assert_eq!(restored.trajectory(), session.trajectory());
}

#[test]
fn snapshot_strata_are_numbered_from_one() {
    let mut session = AuditSession::new(comparison_config(Method::Eb, 50)).unwrap();
    feed(&mut session, &[(1, 1.0)]);
    let v = serde_json::to_value(session.snapshot()).unwrap();
    assert_eq!(v["draws"][0]["stratum"], 2);
}

#[test]
fn exhausted_stratum_is_refused() {
    let mut session = AuditSession::new(comparison_config(Method::AlphaSt, 3)).unwrap();
    for _ in 0..3 {
        session.ingest_card(0, 0.5, Some(1.0)).unwrap();
    }
    let err = session.ingest_card(0, 1.0, Some(1.0)).unwrap_err();
    assert!(matches!(err, AuditError::Exhausted { stratum: 1 }), "{err:?}");
    assert_eq!(session.recommended_stratum().unwrap().stratum, 1);
}

#[test]
fn population_csv_round_trip() {
    let urns = vec![
        vec![Category { value: 0.0, count: 3 }, Category { value: 1.0, count: 7 }],
        vec![Category { value: 0.5, count: 2 }, Category { value: 2.0, count: 1 }],
    ];
    let mut buf = Vec::new();
    write_population_csv(&mut buf, &urns).unwrap();
    assert!(String::from_utf8_lossy(&buf).starts_with("stratum,value,count"));
    assert_eq!(read_population_csv(buf.as_slice()).unwrap(), urns);
}

#[test]
fn sample_csv_reports_line_numbers() {
    let bad = "stratum,mvr,cvr\n1,1,1\n2,banana,\n";
    let err = read_sample_csv(bad.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("line 3"), "{err}");
    assert!(err.contains("mvr"), "{err}");
    let zero = "stratum,mvr\n0,1\n";
    assert!(read_sample_csv(zero.as_bytes()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn replay_reproduces_live_session(
        method in prop_oneof![Just(Method::AlphaSt), Just(Method::AlphaUb), Just(Method::Eb)],
        cards in prop::collection::vec((0usize..2, prop_oneof![Just(0.0), Just(0.5), Just(1.0)]), 1..40),
    ) {
        let cfg = comparison_config(method, 60);
        let mut live = AuditSession::new(cfg.clone()).unwrap();
        feed(&mut live, &cards);
        let replayed = AuditSession::replay(cfg, live.draws()).unwrap();
        prop_assert_eq!(replayed.risk().p_fisher, live.risk().p_fisher);
        prop_assert_eq!(replayed.risk().p_intersection, live.risk().p_intersection);
        prop_assert_eq!(replayed.status(), live.status());
    }

    #[test]
    fn pvalues_are_probabilities_and_stop_is_consistent(
        cards in prop::collection::vec((0usize..2, prop_oneof![Just(0.0), Just(0.5), Just(1.0)]), 1..60),
    ) {
        let mut session = AuditSession::new(comparison_config(Method::AlphaUb, 60)).unwrap();
        let used = feed(&mut session, &cards);
        let r = session.risk();
        prop_assert!((0.0..=1.0).contains(&r.p_fisher));
        prop_assert!((0.0..=1.0).contains(&r.p_intersection));
        if used < cards.len() {
            prop_assert!(session.headline_p() <= 0.05);
        }
        prop_assert_eq!(session.num_draws() as usize, used);
    }

    #[test]
    fn sample_csv_round_trip(
        cards in prop::collection::vec((0usize..5, 0u32..9, prop::option::of(0u32..9)), 0..30),
    ) {
        let cards: Vec<SampleCard> = cards
            .into_iter()
            .map(|(k, m, c)| SampleCard { stratum: k, mvr: m as f64 / 4.0, cvr: c.map(|c| c as f64 / 4.0) })
            .collect();
        let mut buf = Vec::new();
        write_sample_csv(&mut buf, &cards).unwrap();
        prop_assert_eq!(read_sample_csv(buf.as_slice()).unwrap(), cards);
    }
}
