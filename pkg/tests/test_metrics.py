import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reference import pair_auroc, random_metric_instance, sweep_ap, sweep_aupro, sweep_f1
from zsad3d.metrics import (CategoryMetrics, MetricError, aggregate_seeds, aupro, auroc,
                            average_precision, build_report, evaluate_category, f1_max,
                            report_schema)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("tie_heavy", [False, True])
def test_metrics_match_brute_force(seed, tie_heavy):
    rng = np.random.default_rng(seed)
    s, y, r = random_metric_instance(rng, tie_heavy)
    assert abs(auroc(s, y) - pair_auroc(s, y)) < 1e-12
    assert abs(average_precision(s, y) - sweep_ap(s, y)) < 1e-12
    assert abs(f1_max(s, y) - sweep_f1(s, y)) < 1e-12
    assert abs(aupro(s, y, r) - sweep_aupro(s, y, r)) < 1e-9


def test_trivial_values():
    y = np.array([0, 0, 1, 1])
    assert auroc([0.1, 0.2, 0.8, 0.9], y) == 1.0
    assert auroc(np.full(4, 0.3), y) == 0.5
    assert average_precision([0.1, 0.2, 0.8, 0.9], y) == 1.0
    assert average_precision([0.4, 0.1, 0.3], [1, 1, 1]) == 1.0
    assert f1_max([0.1, 0.2, 0.8, 0.9], y) == 1.0
    # one positive ranked last of ten
    assert f1_max(np.arange(10, 0, -1), np.r_[np.zeros(9), 1]) == pytest.approx(2 * 0.1 / 1.1)


def test_aupro_closed_forms():
    y = np.array([0, 0, 0, 1, 1, 0, 1])
    reg = np.where(y == 1, [0, 0, 0, 1, 1, 0, 2], 0)
    assert aupro(y.astype(float), y, reg) == 1.0
    assert aupro(1.0 - y, y, reg) == 0.0


def test_aupro_limit_flag():
    rng = np.random.default_rng(3)
    s, y, r = random_metric_instance(rng)
    for limit in (0.05, 0.3, 1.0):
        assert abs(aupro(s, y, r, limit) - sweep_aupro(s, y, r, limit)) < 1e-9


def test_single_region_aupro_matches_oracle():
    rng = np.random.default_rng(4)
    s, y, _ = random_metric_instance(rng)
    r = y.astype(int)
    # one region: PRO equals TPR, so the full-range AUPRO equals AUROC
    assert abs(aupro(s, y, r, 1.0) - auroc(s, y)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.booleans())
def test_auroc_transform_and_flip(seed, tie_heavy):
    rng = np.random.default_rng(seed)
    s, y, r = random_metric_instance(rng, tie_heavy)
    a = auroc(s, y)
    assert auroc(np.exp(3 * s) + 7, y) == a
    assert abs(auroc(s, ~y) - (1 - a)) < 1e-12
    assert 0 <= aupro(s, y, r) <= 1


def test_metric_errors():
    with pytest.raises(MetricError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(MetricError):
        auroc([0.1, np.nan], [0, 1])
    with pytest.raises(MetricError):
        average_precision([0.1], [0])
    with pytest.raises(MetricError):
        aupro([0.1, 0.2], [0, 1], [0, 0])
    with pytest.raises(MetricError):
        aupro([0.1, 0.2], [0, 1], [0, 1], fpr_limit=0)
    with pytest.raises(MetricError):
        auroc([0.1, 0.2, 0.3], [0, 1])


def test_evaluate_category_offsets_regions():
    # two clouds each with region id 1: they must count as two regions
    scores = [np.array([0.9, 0.1, 0.2]), np.array([0.3, 0.8, 0.05])]
    labels = [np.array([1, 0, 0]), np.array([0, 1, 0])]
    regions = [np.array([1, 0, 0]), np.array([0, 1, 0])]
    m = evaluate_category("cube", [0.9, 0.8], [1, 0], scores, labels, regions)
    s, y = np.concatenate(scores), np.concatenate(labels)
    assert m.p_aupro == pytest.approx(sweep_aupro(s, y, np.array([1, 0, 0, 0, 2, 0])))
    assert m.n_clouds == 2 and m.o_auroc == 1.0


def test_report_json_schema_and_table():
    cats = [CategoryMetrics("sphere", 0.9, 0.8, 0.7, 0.95, 0.5, 0.6, 40),
            CategoryMetrics("cylinder", 0.7, 0.6, 0.5, 0.85, 0.3, 0.4, 40)]
    rep = build_report(cats, {"seed": 0, "config_hash": "abc"})
    assert rep.o_auroc == pytest.approx(0.8)
    jsonschema.validate(json.loads(rep.to_json()), report_schema())
    table = rep.table().splitlines()
    assert table[0].split()[1:] == ["O-AUROC", "O-AP", "O-F1", "P-AUPRO", "P-AUROC", "P-AP"]
    assert table[-1].split()[0] == "mean"
    bad = rep.to_dict()
    bad["p_auroc"] = 1.5
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, report_schema())
    with pytest.raises(MetricError):
        build_report([])


def test_aggregate_seeds():
    runs = [{"o_auroc": a, "o_ap": 0, "o_f1": 0, "p_auroc": 0, "p_ap": 0, "p_aupro": 0}
            for a in (0.6, 0.8)]
    agg = aggregate_seeds(runs)
    assert agg["o_auroc"]["mean"] == pytest.approx(0.7)
    assert agg["o_auroc"]["std"] == pytest.approx(0.1)
