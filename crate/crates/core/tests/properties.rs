mod common;

use std::collections::HashMap;

use cweguard_core::backend::mock::{MockResponse, MockScript, ScriptedBackend};
use cweguard_core::backend::{CompletionBackend, CompletionRequest};
use cweguard_core::bench::percentile;
use cweguard_core::dataset::{parse_label_strict, parse_jsonl, read_jsonl, render_label, to_jsonl_bytes, write_jsonl};
use cweguard_core::eval::{compute_metrics, parse_model_output, score, ConfusionMatrix, Prediction};
use cweguard_core::review::{replay, DecisionKind, ReviewChecks, ReviewStore};
use cweguard_core::{Catalog, CweId, LabeledInstance, Verdict};
use num_rational::Ratio;
use proptest::prelude::*;

fn verdict() -> impl Strategy<Value = Verdict> {
    prop_oneof![
        Just(Verdict::Secure),
        (1u32..2000).prop_map(|n| Verdict::Vulnerable(CweId::new(n).unwrap())),
    ]
}

fn instance() -> impl Strategy<Value = LabeledInstance> {
    ("\\PC{0,40}", "\\PC{1,200}(\n\\PC{0,40}){0,4}", verdict())
        .prop_filter("input must not be blank", |(_, input, _)| !input.trim().is_empty())
        .prop_map(|(instr, input, v)| LabeledInstance::new(instr, input, v))
}

#[test]
fn label_round_trip_over_catalog() {
    let catalog = Catalog::embedded();
    assert_eq!(catalog.ids().count(), 25);
    for id in catalog.ids() {
        let v = Verdict::Vulnerable(id);
        let label = render_label(&v);
        assert_eq!(label, format!("Vulnerable - CWE-{}", id.number()));
        assert_eq!(parse_label_strict(&label).unwrap(), v);
        assert_eq!(parse_model_output(&label).prediction, Prediction::Vulnerable { cwe: Some(id) });
    }
    assert_eq!(parse_label_strict(&render_label(&Verdict::Secure)).unwrap(), Verdict::Secure);
}

/// Oracle for nearest rank: integer arithmetic on the sorted copy.
fn oracle(values: &[f64], p: u32) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let rank = (p as usize * n).div_ceil(100).max(1);
    sorted[rank - 1]
}

type Q = Ratio<i128>;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn label_round_trip(v in verdict()) {
        prop_assert_eq!(parse_label_strict(&render_label(&v)).unwrap(), v);
        prop_assert_eq!(parse_label_strict(&format!("{}\n", render_label(&v))).unwrap(), v);
    }

    #[test]
    fn jsonl_identity(rows in prop::collection::vec(instance(), 0..40)) {
        let text = String::from_utf8(to_jsonl_bytes(&rows)).unwrap();
        prop_assert_eq!(text.lines().count(), rows.len());
        let back: Vec<LabeledInstance> = parse_jsonl(&text).unwrap();
        prop_assert_eq!(&back, &rows);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        write_jsonl(&path, &rows).unwrap();
        prop_assert_eq!(read_jsonl::<LabeledInstance>(&path).unwrap(), rows);
    }

    #[test]
    fn percentile_matches_sort_oracle(
        values in prop::collection::vec(0.0f64..10.0, 1..=1000),
        p in 1u32..=100,
    ) {
        for q in [50, 95, 99, p] {
            prop_assert_eq!(percentile(&values, q as f64).unwrap(), oracle(&values, q));
        }
    }

    #[test]
    fn percentile_is_monotone(values in prop::collection::vec(-5.0f64..5.0, 1..200), p in 0.01f64..=100.0, q in 0.01f64..=100.0) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(percentile(&values, lo).unwrap() <= percentile(&values, hi).unwrap());
    }

    #[test]
    fn metric_identities(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
        let m = ConfusionMatrix::new(tp, fp, fn_, tn);
        prop_assume!(m.total() > 0);
        let metrics = compute_metrics(&m).unwrap();
        let total = m.total() as i128;
        let acc = Q::new((tp + tn) as i128, total);
        prop_assert!((metrics.accuracy.unwrap() - to_f64(acc)).abs() <= 1e-12);
        if tp + fp > 0 && tp + fn_ > 0 && tp > 0 {
            let p = Q::new(tp as i128, (tp + fp) as i128);
            let r = Q::new(tp as i128, (tp + fn_) as i128);
            let f1 = Q::from_integer(2) * p * r / (p + r);
            prop_assert!((metrics.precision.unwrap() - to_f64(p)).abs() <= 1e-12);
            prop_assert!((metrics.recall.unwrap() - to_f64(r)).abs() <= 1e-12);
            prop_assert!((metrics.f1.unwrap() - to_f64(f1)).abs() <= 1e-12);
            let (pf, rf) = (metrics.precision.unwrap(), metrics.recall.unwrap());
            prop_assert!((metrics.f1.unwrap() - 2.0 * pf * rf / (pf + rf)).abs() <= 1e-12);
        } else {
            prop_assert_eq!(metrics.f1, None);
        }
    }

    #[test]
    fn scored_matrix_equals_direct_counting(
        pairs in prop::collection::vec((verdict(), prop_oneof![
            verdict().prop_map(|v| render_label(&v)),
            Just("def f(): pass".to_owned()),
            Just("vulnerable".to_owned()),
            "\\PC{0,30}",
        ]), 1..=50)
    ) {
        let mut m = ConfusionMatrix::default();
        for (gold, out) in &pairs {
            m.add(score(*gold, &parse_model_output(out).prediction).cell);
        }
        let positive = |o: &str| parse_model_output(o).prediction.is_positive();
        let count = |g: bool, p: bool| pairs.iter().filter(|(gold, o)| gold.is_vulnerable() == g && positive(o) == p).count() as u64;
        prop_assert_eq!(m, ConfusionMatrix::new(count(true, true), count(false, true), count(true, false), count(false, false)));
        let metrics = compute_metrics(&m).unwrap();
        let n = pairs.len() as f64;
        let correct = pairs.iter().filter(|(g, o)| g.is_vulnerable() == positive(o)).count() as f64;
        prop_assert!((metrics.accuracy.unwrap() - correct / n).abs() <= 1e-12);
    }

    #[test]
    fn output_parsing_is_total(text in "\\PC*(\n\\PC*){0,3}") {
        let parsed = parse_model_output(&text);
        prop_assert_eq!(parsed.raw, text);
    }
}

fn to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

#[derive(Debug, Clone)]
enum Action {
    Accept,
    Reject,
    Edit,
    Skip,
}

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![Just(Action::Accept), Just(Action::Reject), Just(Action::Edit), Just(Action::Skip)]
}

fn decision(action: &Action, i: usize) -> Option<DecisionKind> {
    match action {
        Action::Accept => Some(DecisionKind::Accept),
        Action::Reject => Some(DecisionKind::Reject {
            reason: format!("not realistic {i}"),
        }),
        Action::Edit => Some(DecisionKind::Edit {
            vulnerable: format!("import os\n\ndef f_{i}(p):\n    os.system('cat ' + p)\n"),
            fixed: format!("import subprocess\n\ndef f_{i}(p):\n    subprocess.run(['cat', p])\n"),
        }),
        Action::Skip => None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reject_all_exports_nothing(n in 1usize..30, seed_cwe in 0usize..25) {
        let catalog = Catalog::embedded();
        let ids: Vec<CweId> = catalog.ids().collect();
        let dir = tempfile::tempdir().unwrap();
        let mut store = ReviewStore::open(dir.path()).unwrap();
        let pairs: Vec<_> = (0..n).map(|i| common::pair(ids[(seed_cwe + i) % 25].number(), i)).collect();
        store.enqueue(&pairs).unwrap();
        let item_ids: Vec<_> = store.items().iter().map(|i| i.id.clone()).collect();
        for (i, id) in item_ids.iter().enumerate() {
            store.submit_decision(id, ReviewChecks::default(), DecisionKind::Reject { reason: format!("r{i}") }, "prop").unwrap();
        }
        prop_assert!(store.export_accepted("I", &catalog).is_empty());
        let reopened = ReviewStore::open(dir.path()).unwrap();
        prop_assert!(reopened.export_accepted("I", &catalog).is_empty());
    }

    #[test]
    fn audit_replay_reconstructs_states(actions in prop::collection::vec(action(), 1..25)) {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ReviewStore::open(dir.path()).unwrap();
        let pairs: Vec<_> = (0..actions.len()).map(|i| common::pair(79, i)).collect();
        store.enqueue(&pairs).unwrap();
        let fresh = store.items().to_vec();
        let mut expected = HashMap::new();
        for (i, (item, action)) in fresh.iter().zip(&actions).enumerate() {
            if let Some(kind) = decision(action, i) {
                let updated = store.submit_decision(&item.id, ReviewChecks::all_passed(), kind, "prop").unwrap();
                expected.insert(item.id.clone(), updated.pair.review_state.clone());
            }
        }
        let audit = store.audit_records().unwrap();
        prop_assert_eq!(audit.len(), expected.len());
        let replayed = replay(fresh, &audit).unwrap();
        prop_assert_eq!(&replayed, &store.items().to_vec());
        let reopened = ReviewStore::open(dir.path()).unwrap();
        prop_assert_eq!(reopened.items(), store.items());
        for item in reopened.items() {
            match expected.get(&item.id) {
                Some(state) => prop_assert_eq!(&item.pair.review_state, state),
                None => prop_assert!(item.pair.review_state.is_pending()),
            }
        }
    }

    #[test]
    fn scripted_traces_are_monotonic(
        first in 0.0f64..50.0,
        gaps in prop::collection::vec(0.0f64..20.0, 0..30),
        stream in any::<bool>(),
    ) {
        let tokens: Vec<String> = (0..=gaps.len()).map(|i| format!("t{i} ")).collect();
        let script = MockScript {
            default: MockResponse {
                tokens: Some(tokens.clone()),
                first_token_delay_ms: Some(first),
                token_delays_ms: Some(gaps),
                ..MockResponse::default()
            },
            ..MockScript::default()
        };
        let rt = tokio::runtime::Builder::new_current_thread().enable_time().start_paused(true).build().unwrap();
        let result = rt.block_on(async {
            let backend = ScriptedBackend::new(script);
            let mut request = CompletionRequest::new("p", 1000);
            request.stream = stream;
            backend.complete(&request).await.unwrap()
        });
        let t = &result.trace;
        prop_assert_eq!(t.token_count, t.token_arrivals.len());
        prop_assert_eq!(t.token_count, if stream { tokens.len() } else { 1 });
        prop_assert!(t.token_arrivals[0] >= t.request_sent_at);
        prop_assert!(t.token_arrivals.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(result.text, tokens.concat());
    }
}
