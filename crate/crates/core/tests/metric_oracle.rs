//! Confusion matrices consistent with the target metric table, checked two
//! ways: against the committed enumeration (produced by
//! `scripts/metric_matrices.py`) and by re-enumerating here with exact
//! rationals.

use cweguard_core::eval::{compute_metrics, ConfusionMatrix};
use num_rational::Ratio;
use serde::Deserialize;

type Q = Ratio<i64>;

#[derive(Debug, Deserialize)]
struct Fixture {
    total: i64,
    matrices: Vec<Cell>,
    unique: bool,
    matching_except_f1: Vec<Cell>,
    within_tolerance: Vec<Cell>,
}

#[derive(Debug, Deserialize, PartialEq, Eq, PartialOrd, Ord, Clone, Copy)]
struct Cell {
    tp: i64,
    fp: i64,
    #[serde(rename = "fn")]
    fn_: i64,
    tn: i64,
}

fn fixture() -> Fixture {
    serde_json::from_str(include_str!("fixtures/metric_matrices.json")).unwrap()
}

/// Metric as a percentage rounded half-up to `decimals`, scaled to an integer.
fn rounded(value: Q, decimals: u32) -> i64 {
    let scaled = value * Q::from_integer(100 * 10i64.pow(decimals));
    (scaled + Q::new(1, 2)).floor().to_integer()
}

struct Exact {
    accuracy: Q,
    precision: Option<Q>,
    recall: Option<Q>,
    f1: Option<Q>,
}

fn exact(c: Cell) -> Exact {
    let total = c.tp + c.fp + c.fn_ + c.tn;
    let precision = (c.tp + c.fp > 0).then(|| Q::new(c.tp, c.tp + c.fp));
    let recall = (c.tp + c.fn_ > 0).then(|| Q::new(c.tp, c.tp + c.fn_));
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r != Q::from_integer(0) => Some(Q::from_integer(2) * p * r / (p + r)),
        _ => None,
    };
    Exact {
        accuracy: Q::new(c.tp + c.tn, total),
        precision,
        recall,
        f1,
    }
}

fn all_matrices(total: i64) -> impl Iterator<Item = Cell> {
    (0..=total).flat_map(move |tp| {
        (0..=total - tp).flat_map(move |fp| {
            (0..=total - tp - fp).map(move |fn_| Cell {
                tp,
                fp,
                fn_,
                tn: total - tp - fp - fn_,
            })
        })
    })
}

// accuracy 99%, precision 98.08%, recall 100%, F1 99.04%
fn matches(c: Cell, with_f1: bool) -> bool {
    let m = exact(c);
    let ok = |v: Option<Q>, d, target| v.is_some_and(|v| rounded(v, d) == target);
    rounded(m.accuracy, 0) == 99
        && ok(m.precision, 2, 9808)
        && ok(m.recall, 0, 100)
        && (!with_f1 || ok(m.f1, 2, 9904))
}

fn within(c: Cell, tol: Q) -> bool {
    let m = exact(c);
    let near = |v: Option<Q>, target: Q| v.is_some_and(|v| v - target <= tol && target - v <= tol);
    near(Some(m.accuracy), Q::new(99, 100))
        && near(m.precision, Q::new(9808, 10000))
        && near(m.recall, Q::from_integer(1))
        && near(m.f1, Q::new(9904, 10000))
}

#[test]
fn enumeration_agrees_with_committed_fixture() {
    let f = fixture();
    assert_eq!(f.total, 100);
    let strict: Vec<Cell> = all_matrices(100).filter(|&c| matches(c, true)).collect();
    let except_f1: Vec<Cell> = all_matrices(100).filter(|&c| matches(c, false)).collect();
    let tol: Vec<Cell> = all_matrices(100).filter(|&c| within(c, Q::new(5, 10000))).collect();
    assert_eq!(strict, f.matrices);
    assert_eq!(f.unique, strict.len() == 1);
    assert_eq!(except_f1, f.matching_except_f1);
    assert_eq!(tol, f.within_tolerance);
}

#[test]
fn candidate_matrix_is_consistent() {
    let f = fixture();
    let candidate = Cell { tp: 51, fp: 1, fn_: 0, tn: 48 };
    assert!(f.within_tolerance.contains(&candidate));
    assert_eq!(f.matching_except_f1, [candidate]);
    // no matrix hits all four printed values
    assert!(f.matrices.is_empty());
}

#[test]
fn float_metrics_match_exact_values_on_every_candidate() {
    for c in fixture().within_tolerance {
        let m = compute_metrics(&ConfusionMatrix::new(c.tp as u64, c.fp as u64, c.fn_ as u64, c.tn as u64)).unwrap();
        let e = exact(c);
        let f = |q: Q| *q.numer() as f64 / *q.denom() as f64;
        assert!((m.accuracy.unwrap() - f(e.accuracy)).abs() < 1e-12);
        assert!((m.precision.unwrap() - f(e.precision.unwrap())).abs() < 1e-12);
        assert!((m.recall.unwrap() - f(e.recall.unwrap())).abs() < 1e-12);
        assert!((m.f1.unwrap() - f(e.f1.unwrap())).abs() < 1e-12);
    }
}
