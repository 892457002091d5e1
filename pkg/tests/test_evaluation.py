"""Metrics against enumeration oracles, aggregation, attention export."""

import numpy as np
import pytest

from lvqa.evaluation import (accuracy, aggregate_seeds, average_precision,
                             build_comparison, comparison_markdown, evaluate_records,
                             export_attention, mean_std, roc_auc)
from lvqa.netpbm import read_pgm, read_ppm


# -- oracles (independent of the implementations under test) -------------------------


def auc_pairwise_oracle(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = ties = 0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1
            elif p == n:
                ties += 1
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def ap_sweep_oracle(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    tp = 0
    total = 0.0
    n_pos = int(labels.sum())
    for k, idx in enumerate(order, start=1):
        if labels[idx] == 1:
            tp += 1
            total += tp / k
    return total / n_pos


# -- accuracy ---------------------------------------------------------------------------


def test_accuracy_trivials():
    assert accuracy([1, 0, 1], [1, 0, 1]) == 1.0
    assert accuracy([1, 0], [0, 0]) == 0.5
    assert accuracy([1, 1, 1, 0], [1, 1, 0, 1]) == 0.5
    assert accuracy([0, 1, 1, 1], [0, 1, 1, 0]) == 0.75


def test_accuracy_empty_rejected():
    with pytest.raises(ValueError):
        accuracy([], [])


def test_constant_predictor_on_balanced_split_is_half():
    labels = np.array([0, 1] * 50)
    assert accuracy(np.zeros(100, dtype=int), labels) == 0.5


# -- roc auc -----------------------------------------------------------------------------


def test_auc_perfect_separation():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_auc_hand_counted_example():
    # pairs: (0.9 vs 0.8) win, (0.9 vs 0.1) win, (0.4 vs 0.8) loss,
    # (0.4 vs 0.1) win -> 3/4
    assert roc_auc([0.9, 0.8, 0.4, 0.1], [1, 0, 1, 0]) == 0.75


def test_auc_constant_scores_is_half():
    assert roc_auc(np.ones(10), [1, 0] * 5) == 0.5


def test_auc_single_class_rejected():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.9], [1, 1])


def test_auc_matches_pairwise_oracle_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(150):
        n = int(rng.integers(4, 25))
        labels = rng.integers(0, 2, n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        scores = np.round(rng.random(n), 1)   # coarse grid forces ties
        np.testing.assert_allclose(roc_auc(scores, labels),
                                   auc_pairwise_oracle(scores, labels), atol=1e-9)


def test_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    scores = rng.random(40)
    labels = rng.integers(0, 2, 40)
    labels[0], labels[1] = 0, 1
    base = roc_auc(scores, labels)
    for transform in (lambda s: 3 * s + 2, np.exp, lambda s: np.tanh(4 * s)):
        np.testing.assert_allclose(roc_auc(transform(scores), labels), base, atol=1e-12)


def test_auc_symmetry_under_score_negation():
    rng = np.random.default_rng(2)
    scores = rng.permutation(30) / 30.0   # tie-free
    labels = np.array([1] * 10 + [0] * 20)
    np.testing.assert_allclose(roc_auc(scores, labels) + roc_auc(-scores, labels),
                               1.0, atol=1e-12)


# -- average precision ---------------------------------------------------------------------


def test_ap_perfect_ranking_is_one():
    assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_ap_worst_two_item_ranking():
    # negative ranked first: precision at the positive is 1/2
    assert average_precision([0.2, 0.9], [1, 0]) == 0.5


def test_ap_no_positives_rejected():
    with pytest.raises(ValueError):
        average_precision([0.5, 0.4], [0, 0])


def test_ap_matches_sweep_oracle_100_instances():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(3, 30))
        labels = rng.integers(0, 2, n)
        if labels.sum() == 0:
            labels[int(rng.integers(n))] = 1
        scores = np.round(rng.random(n), 1)
        np.testing.assert_allclose(average_precision(scores, labels),
                                   ap_sweep_oracle(scores, labels), atol=1e-9)


def test_ap_invariant_under_monotone_transform():
    rng = np.random.default_rng(4)
    scores = rng.random(25)
    labels = rng.integers(0, 2, 25)
    labels[3] = 1
    base = average_precision(scores, labels)
    np.testing.assert_allclose(average_precision(5 * scores - 1, labels), base, atol=1e-12)


# -- report building --------------------------------------------------------------------


def fake_records():
    recs = []
    for i in range(8):
        recs.append({"answer": "yes" if i % 2 == 0 else "no",
                     "object": "circle" if i < 4 else "square",
                     "ambiguous": i >= 6})
    return recs


def test_evaluate_records_structure():
    scores = np.array([0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.6, 0.4])
    report = evaluate_records(scores, fake_records())
    assert report["overall"]["auc"] == 1.0
    assert set(report["per_object"]) == {"circle", "square"}
    assert report["per_object"]["circle"]["n"] == 4
    assert report["strata"]["context_ambiguous"]["n"] == 2


def test_mean_std_formatting():
    cell = mean_std([0.8, 0.9])
    np.testing.assert_allclose(cell["mean"], 0.85)
    np.testing.assert_allclose(cell["std"], 0.05)
    assert cell["formatted"] == "0.850 ± 0.050"


def test_aggregate_identical_reports_zero_std():
    rep = {"overall": {"auc": 0.8, "n": 10}}
    agg = aggregate_seeds([rep, rep, rep])
    assert agg["overall"]["auc"]["std"] == 0.0
    assert agg["n_seeds"] == 3


def test_aggregate_matches_hand_mean_std():
    rng = np.random.default_rng(5)
    values = rng.random(5)
    reports = [{"overall": {"auc": float(v)}} for v in values]
    agg = aggregate_seeds(reports)
    np.testing.assert_allclose(agg["overall"]["auc"]["mean"], values.mean(), atol=1e-12)
    np.testing.assert_allclose(agg["overall"]["auc"]["std"], values.std(), atol=1e-12)


def test_aggregate_mismatched_strata_rejected():
    with pytest.raises(ValueError):
        aggregate_seeds([{"overall": {"auc": 0.5}},
                         {"overall": {"ap": 0.5}}])


def test_aggregate_insensitive_to_key_order():
    # a report re-loaded from sorted JSON must aggregate with a fresh one
    import json
    fresh = {"n": 4, "overall": {"auc": 0.7, "ap": 0.6},
             "per_object": {"circle": {"auc": 0.8}}}
    reloaded = json.loads(json.dumps(fresh, sort_keys=True))
    agg = aggregate_seeds([fresh, reloaded])
    np.testing.assert_allclose(agg["overall"]["auc"]["mean"], 0.7)


def test_comparison_row_order_and_markdown():
    reports = {v: [{"overall": {"auc": 0.5 + i / 10}}]
               for i, v in enumerate(("ours", "no_mask", "crop_region",
                                      "region_in_text", "draw_region"))}
    comparison = build_comparison(reports)
    assert list(comparison["variants"]) == ["no_mask", "region_in_text",
                                            "crop_region", "draw_region", "ours"]
    md = comparison_markdown(comparison)
    assert md.index("| no_mask") < md.index("| region_in_text") < \
        md.index("| crop_region") < md.index("| draw_region") < md.index("| ours")


# -- attention export --------------------------------------------------------------------


def test_export_uniform_map_renders_constant_zero(tmp_path):
    weights = np.full((2, 4, 4), 1 / 16.0)
    image = np.zeros((3, 16, 16))
    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[4:12, 4:12] = 1
    paths = export_attention(weights, image, mask, tmp_path / "rec")
    assert len(paths) == 4
    heat = read_pgm(tmp_path / "rec_g0.pgm")
    np.testing.assert_array_equal(heat, np.zeros((16, 16), dtype=np.uint8))


def test_export_one_hot_map_is_single_bright_block(tmp_path):
    weights = np.zeros((1, 4, 4))
    weights[0, 1, 2] = 1.0
    image = np.zeros((3, 16, 16))
    mask = np.ones((16, 16), dtype=np.uint8)
    export_attention(weights, image, mask, tmp_path / "rec")
    heat = read_pgm(tmp_path / "rec_g0.pgm")
    block = heat[4:8, 8:12]
    np.testing.assert_array_equal(block, 255)
    assert heat.sum() == 255 * 16   # exactly one (S/H) x (S/W) block lit


def test_export_round_trip_matches_normalized_map(tmp_path):
    rng = np.random.default_rng(6)
    weights = rng.random((1, 4, 4))
    image = rng.random((3, 16, 16))
    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[2:10, 3:11] = 1
    export_attention(weights, image, mask, tmp_path / "rec")
    heat = read_pgm(tmp_path / "rec_g0.pgm").astype(float) / 255.0
    up = np.repeat(np.repeat(weights[0], 4, axis=0), 4, axis=1)
    norm = (up - up.min()) / (up.max() - up.min())
    assert np.abs(heat - norm).max() <= 1.0 / 255 + 1e-9
    overlay = read_ppm(tmp_path / "rec_g0_overlay.ppm")
    assert overlay.shape == (3, 16, 16)
