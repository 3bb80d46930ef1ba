use cmc_core::metrics::{aggregate, heq, normalize, token_f1, EvalReport, GroupBy};
use cmc_core::EvalRecord;
use proptest::prelude::*;

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop_oneof!["the", "a", "cat", "dog", "red", "Cat", "dog,", "an", "x!"], 0..6)
        .prop_map(|w| w.join(" "))
}

/// Dialogues of one common length, where HEQ-D <= HEQ-Q is guaranteed.
fn records() -> impl Strategy<Value = Vec<EvalRecord>> {
    (1usize..6, 1usize..8).prop_flat_map(|(dialogues, turns)| {
        prop::collection::vec((0u8..5, 0u8..5, 0u8..2), dialogues * turns).prop_map(move |scores| {
            scores
                .into_iter()
                .enumerate()
                .map(|(i, (f, h, dom))| EvalRecord {
                    dialogue_id: format!("d{}", i / turns),
                    turn: i % turns + 1,
                    prediction: String::new(),
                    references: vec![],
                    f1: f64::from(f) / 4.0,
                    human_f1: Some(f64::from(h) / 4.0),
                    domain: format!("dom{dom}"),
                })
                .collect()
        })
    })
}

fn record(dialogue: &str, turn: usize, f1: f64, human: f64) -> EvalRecord {
    EvalRecord {
        dialogue_id: dialogue.into(),
        turn,
        prediction: String::new(),
        references: vec![],
        f1,
        human_f1: Some(human),
        domain: "x".into(),
    }
}

#[test]
fn uneven_dialogues_can_put_heq_dialogue_above_heq_question() {
    let mut rs = vec![record("short", 1, 1.0, 0.5)];
    rs.extend((1..=9).map(|t| record("long", t, 0.0, 0.5)));
    assert_eq!(heq(&rs).unwrap(), (10.0, 50.0));
}

proptest! {
    #[test]
    fn f1_is_bounded_and_symmetric(a in text(), b in text()) {
        let f = token_f1(&a, &b);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!((f - token_f1(&b, &a)).abs() < 1e-15);
        prop_assert_eq!(token_f1(&a, &a), 1.0);
    }

    #[test]
    fn normalization_is_idempotent(a in text()) {
        let once = normalize(&a);
        prop_assert_eq!(normalize(&once.join(" ")), once);
    }

    #[test]
    fn heq_dialogue_never_exceeds_heq_question(rs in records()) {
        let (q, d) = heq(&rs).unwrap();
        prop_assert!(d <= q);
        prop_assert!((0.0..=100.0).contains(&q));
    }

    #[test]
    fn group_means_recombine_to_overall(rs in records()) {
        let overall = aggregate(&rs, GroupBy::Overall, false)[0].f1;
        for g in [GroupBy::Domain, GroupBy::Turn] {
            let rows = aggregate(&rs, g, false);
            let n: usize = rows.iter().map(|r| r.count).sum();
            prop_assert_eq!(n, rs.len());
            let weighted: f64 = rows.iter().map(|r| r.f1 * r.count as f64).sum::<f64>() / n as f64;
            prop_assert!((weighted - overall).abs() < 1e-12);
        }
        let report = EvalReport::build(&rs, false);
        prop_assert_eq!(report.questions, rs.len());
    }
}
