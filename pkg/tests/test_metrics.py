import json
from fractions import Fraction
from pathlib import Path

import pytest

from kedit_lab import metrics

FIX = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def fixture_ledger():
    return [json.loads(l) for l in (FIX / "metrics_ledger.jsonl").read_text().splitlines()]


@pytest.fixture(scope="module")
def expected():
    d = json.loads((FIX / "metrics_expected.json").read_text())
    return {k: Fraction(*v) for k, v in d.items() if not k.startswith("_")}


def test_fixture_outcomes_are_pred_equals_gold(fixture_ledger):
    assert all(r["outcome"] == int(r["pred"] == r["gold"]) for r in fixture_ledger)


def test_each_metric_matches_hand_scoring(fixture_ledger, expected):
    L = fixture_ledger
    assert metrics.reliability(L, "visual", 0) == float(expected["VisRel"])
    assert metrics.reliability(L, "textual", 0) == float(expected["TextRel"])
    assert metrics.generality(L, "text_gen", 0) == float(expected["TextGen"])
    assert metrics.generality(L, "image_gen", 0) == float(expected["ImageGen"])
    assert metrics.locality(L, "text_loc", 0) == float(expected["TextLoc"])
    assert metrics.locality(L, "image_loc", 0) == float(expected["ImageLoc"])
    assert metrics.comp_rel(L, 0) == float(expected["CompRel"])
    k = metrics.kur(metrics.comp_rel(L, 0), metrics.reliability(L, "visual", 0),
                    metrics.reliability(L, "textual", 0))
    assert abs(k - float(expected["KUR"])) < 1e-15


def test_exact_fractions(fixture_ledger, expected):
    assert metrics.exact_fraction(fixture_ledger, "image_gen", 0) == expected["ImageGen"]


def test_kur_arithmetic():
    assert metrics.kur(0.5, 1.0, 1.0) == 0.5
    assert metrics.kur(0.7, 0.6, 0.8) == pytest.approx(1.0)
    with pytest.raises(metrics.UndefinedMetric):
        metrics.kur(0.2, 0.0, 0.0)


def test_kur_published_consistency():
    # a reported CompRel of 84.02 with KUR 1.26 implies VisRel + TextRel of about 133.37
    implied = 2 * 84.02 / 1.26
    assert implied == pytest.approx(133.37, abs=0.01)
    assert metrics.kur(84.02, implied / 2, implied / 2) == pytest.approx(1.26, abs=0.01)


def test_zero_samples_are_errors(fixture_ledger):
    with pytest.raises(metrics.UndefinedMetric):
        metrics.reliability(fixture_ledger, "visual", 10)
    with pytest.raises(metrics.UndefinedMetric):
        metrics.comp_rel([], 0)


def test_locality_needs_a_baseline():
    row = {"strategy": "s", "edit_id": 0, "gap": 0, "probe_kind": "text_loc", "outcome": 0,
           "pred": "a", "gold": None}
    with pytest.raises(metrics.UndefinedMetric):
        metrics.locality([row], "text_loc", 0)


def test_report_counts_and_rows(fixture_ledger):
    rep = metrics.evaluate_run(fixture_ledger, (0,))
    row = rep.get("fixture", 0, "VisRel")
    assert row == 0.8
    assert [r["gap"] for r in rep.rows] == [0, "avg"]
    assert rep.rows[0]["n_CompRel"] == 10


def test_report_csv_is_reproducible(fixture_ledger):
    a = metrics.evaluate_run(fixture_ledger, (0,)).to_csv()
    b = metrics.evaluate_run(list(reversed(fixture_ledger)), (0,)).to_csv()
    assert a == b
    assert a.startswith("# kedit-report v1\n")


def test_gap_average_is_mean_of_gap_rows():
    L = []
    for gap, outs in ((0, [1, 1, 1, 1]), (10, [1, 0, 0])):
        for i, o in enumerate(outs):
            L.append({"strategy": "s", "edit_id": i, "gap": gap, "probe_kind": "vis_rel",
                      "outcome": o, "pred": "", "gold": ""})
    rep = metrics.evaluate_run(L, (0, 10))
    assert rep.get("s", "avg", "VisRel") == pytest.approx((1.0 + 1 / 3) / 2)
    assert rep.get("s", "avg", "TextRel") is None
