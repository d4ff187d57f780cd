#!/usr/bin/env python3
"""Enumerate every confusion matrix with 100 instances whose metrics match
the target metric table (accuracy 99%, precision 98.08%, recall 100%,
F1 99.04%) at its printed precision.

Accuracy and recall are printed as whole percentages, precision and F1 with
two decimals. Exact rational arithmetic, rounding half-up. A second list
holds the matrices matching every printed value except F1 (the printed F1 is
not the harmonic mean of the printed precision and recall), and a third the
matrices whose metrics all lie within 5e-4 of the printed values. Writes JSON to
stdout; the committed copy lives in crates/core/tests/fixtures/.
"""
import json
from fractions import Fraction as F

TOTAL = 100


def round_half_up(x, places):
    scale = F(10) ** places
    return F(int(x * scale + F(1, 2)), 1) / scale


def matches(tp, fp, fn, tn, check_f1=True):
    if tp + fp == 0 or tp + fn == 0:
        return False
    acc = F(tp + tn, TOTAL)
    prec = F(tp, tp + fp)
    rec = F(tp, tp + fn)
    if prec + rec == 0:
        return False
    f1 = 2 * prec * rec / (prec + rec)
    return (
        round_half_up(acc * 100, 0) == 99
        and round_half_up(prec * 100, 2) == F(9808, 100)
        and round_half_up(rec * 100, 0) == 100
        and (not check_f1 or round_half_up(f1 * 100, 2) == F(9904, 100))
    )


TOLERANCE = F(5, 10000)
PRINTED = {"accuracy": F(99, 100), "precision": F(9808, 10000),
           "recall": F(1), "f1": F(9904, 10000)}


def metrics(tp, fp, fn, tn):
    if tp + fp == 0 or tp + fn == 0:
        return None
    prec = F(tp, tp + fp)
    rec = F(tp, tp + fn)
    if prec + rec == 0:
        return None
    return {"accuracy": F(tp + tn, TOTAL), "precision": prec, "recall": rec,
            "f1": 2 * prec * rec / (prec + rec)}


def within_tolerance(tp, fp, fn, tn):
    m = metrics(tp, fp, fn, tn)
    return m is not None and all(abs(m[k] - PRINTED[k]) <= TOLERANCE for k in PRINTED)


def main():
    found = []
    except_f1 = []
    near = []
    for tp in range(TOTAL + 1):
        for fp in range(TOTAL + 1 - tp):
            for fn in range(TOTAL + 1 - tp - fp):
                tn = TOTAL - tp - fp - fn
                row = {"tp": tp, "fp": fp, "fn": fn, "tn": tn,
                       "positives": tp + fn, "negatives": fp + tn}
                if matches(tp, fp, fn, tn):
                    found.append(row)
                if matches(tp, fp, fn, tn, check_f1=False):
                    except_f1.append(row)
                if within_tolerance(tp, fp, fn, tn):
                    m = metrics(tp, fp, fn, tn)
                    row = dict(row, f1=f"{m['f1'].numerator}/{m['f1'].denominator}")
                    near.append(row)
    print(json.dumps({
        "total": TOTAL,
        "rounding": {"accuracy": 0, "precision": 2, "recall": 0, "f1": 2},
        "targets_percent": {"accuracy": "99", "precision": "98.08",
                            "recall": "100", "f1": "99.04"},
        "matrices": found,
        "unique": len(found) == 1,
        "matching_except_f1": except_f1,
        "tolerance": "5e-4",
        "within_tolerance": near,
    }, indent=2))


if __name__ == "__main__":
    main()
