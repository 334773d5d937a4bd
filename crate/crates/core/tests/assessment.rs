use chrono::NaiveDate;
use proptest::prelude::*;
use telerehab_core::assessment::*;

fn questionnaire() -> impl Strategy<Value = (AutoTest, TestResponse)> {
    prop::collection::vec(prop::collection::vec(-5.0..10.0f64, 2..6), 1..8)
        .prop_flat_map(|qs| {
            let picks: Vec<_> = qs.iter().map(|a| 0..a.len()).collect();
            (Just(qs), picks)
        })
        .prop_map(|(qs, picks)| {
            let test = AutoTest {
                name: "t".into(),
                questions: qs
                    .into_iter()
                    .map(|scores| Question {
                        text: "q".into(),
                        answers: scores
                            .into_iter()
                            .map(|score| Answer {
                                text: "a".into(),
                                score,
                            })
                            .collect(),
                    })
                    .collect(),
                scoring: Scoring::Sum,
            };
            let resp = TestResponse {
                test: "t".into(),
                answers: picks.into_iter().map(Some).collect(),
                date: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
            };
            (test, resp)
        })
}

proptest! {
    #[test]
    fn sum_matches_fold((test, resp) in questionnaire()) {
        let mut expected = 0.0;
        for (q, a) in test.questions.iter().zip(&resp.answers) {
            expected += q.answers[a.unwrap()].score;
        }
        prop_assert_eq!(score_autotest(&test, &resp).unwrap(), expected);
    }

    #[test]
    fn percent_is_scaled_sum((test, resp) in questionnaire(), v in 0.1..100.0f64) {
        let sum = score_autotest(&test, &resp).unwrap();
        let pct = AutoTest { scoring: Scoring::PercentOf(v), ..test };
        prop_assert_eq!(score_autotest(&pct, &resp).unwrap(), 100.0 * sum / v);
    }

    #[test]
    fn vas_is_monotone(length in 0.1..500.0f64, a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let v_lo = vas_from_mark(lo * length, length).unwrap();
        let v_hi = vas_from_mark(hi * length, length).unwrap();
        prop_assert!(v_lo <= v_hi);
        prop_assert!((0.0..=10.0).contains(&v_lo) && (0.0..=10.0).contains(&v_hi));
        prop_assert_eq!(vas_from_mark(0.0, length).unwrap(), 0.0);
        prop_assert_eq!(vas_from_mark(length, length).unwrap(), 10.0);
    }
}
