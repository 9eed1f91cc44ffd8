import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glff.detector import ConstantDetector
from glff.errors import ConfigError
from glff.evaluation import (
    ALL,
    AVG,
    METRICS_HEADER,
    ScoreEntry,
    auc,
    oa,
    protocol_report,
    report_from_scores,
    roc,
    roc_area,
)
from glff.manifest import build_manifest, read_manifest

from oracles import pairwise_auc

# a grid keeps transformed values distinct whenever the originals are
scores = st.lists(st.integers(0, 1000).map(lambda i: i / 1000), min_size=1, max_size=30)


def test_auc_perfect():
    assert auc([0.9, 0.8], [0.1, 0.2]) == 1.0


def test_auc_worked_example():
    assert auc([0.8, 0.6], [0.7, 0.2]) == 0.75


def test_auc_single_tie():
    assert auc([0.5], [0.5]) == 0.5


def test_auc_empty():
    with pytest.raises(ValueError):
        auc([], [0.1])


def test_oa_examples():
    assert oa([0.9, 0.1], [1, 0]) == 1.0
    assert oa([0.9, 0.4], [1, 1]) == 0.5
    assert oa([0.1, 0.2, 0.3, 0.9], [1, 0, 0, 0], threshold=0) == 0.25
    assert oa([0.5], [1]) == 1.0  # the threshold itself counts as fake
    with pytest.raises(ValueError):
        oa([], [])


def test_roc_perfect_passes_through_corner():
    pts = roc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    assert (0.0, 1.0) in [(f, t) for f, t, _ in pts]
    assert pts[0] == (0.0, 0.0, float("inf"))
    assert pts[-1][:2] == (1.0, 1.0)


def test_roc_one_point_per_distinct_score():
    pts = roc([0.5, 0.5, 0.2, 0.9], [1, 0, 0, 1])
    assert [p[2] for p in pts] == [float("inf"), 0.9, 0.5, 0.2]


def test_roc_single_class():
    with pytest.raises(ValueError):
        roc([0.1, 0.2], [1, 1])


def test_roc_is_monotone_staircase():
    rng = np.random.default_rng(0)
    s = rng.integers(0, 10, 200) / 10
    y = rng.integers(0, 2, 200)
    pts = roc(s, y)
    f = [p[0] for p in pts]
    t = [p[1] for p in pts]
    assert f == sorted(f) and t == sorted(t)


def test_roc_area_matches_pairwise_on_100_sets():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n_pos, n_neg = rng.integers(1, 40, size=2)
        # coarse grid so that ties are common
        pos = rng.integers(0, 20, n_pos) / 20
        neg = rng.integers(0, 20, n_neg) / 20
        s = np.r_[pos, neg]
        y = np.r_[np.ones(n_pos, int), np.zeros(n_neg, int)]
        want = pairwise_auc(pos.tolist(), neg.tolist())
        assert abs(roc_area(roc(s, y)) - want) < 1e-9
        assert abs(auc(pos, neg) - want) < 1e-9


def test_random_scores_area_near_half():
    rng = np.random.default_rng(2)
    s = rng.random(10_000)
    y = rng.integers(0, 2, 10_000)
    assert abs(roc_area(roc(s, y)) - 0.5) < 0.05


@settings(max_examples=100, deadline=None)
@given(scores, scores)
def test_auc_monotone_invariance(pos, neg):
    pos, neg = np.array(pos), np.array(neg)
    base = auc(pos, neg)
    for f in (lambda v: v ** 3, lambda v: np.exp(5 * v), lambda v: 2 * v - 7):
        assert auc(f(pos), f(neg)) == pytest.approx(base, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=40, unique=True), st.data())
def test_auc_label_flip(values, data):
    k = data.draw(st.integers(1, len(values) - 1))
    pos, neg = values[:k], values[k:]
    assert auc(neg, pos) == pytest.approx(1 - auc(pos, neg), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(scores, scores)
def test_auc_matches_pairwise(pos, neg):
    assert auc(pos, neg) == pytest.approx(pairwise_auc(pos, neg), abs=1e-9)


def entry(i, p, label, gen="g", proto="unprocessed"):
    return ScoreEntry(f"s{i:03d}", p, label, gen, proto)


def test_report_averages():
    entries = [entry(0, 0.1, 0), entry(1, 0.2, 0), entry(2, 0.3, 0), entry(3, 0.4, 0), entry(4, 0.5, 0)]
    # protocol a: one fake above 3 of 5 reals -> 0.6; protocol b: above 4 of 5 -> 0.8
    entries += [entry(10, 0.35, 1, proto="common"), entry(11, 0.45, 1, proto="mixed")]
    rep = report_from_scores(entries)
    assert rep.cell("common", "g").auc == pytest.approx(0.6)
    assert rep.cell("mixed", "g").auc == pytest.approx(0.8)
    assert rep.grand_auc == pytest.approx(0.7)
    assert [r.generator for r in rep.averages] == [AVG, AVG, AVG]
    assert rep.averages[-1].protocol == ALL


def test_report_shares_negatives():
    entries = [entry(i, 0.1 * i, 0) for i in range(4)]
    entries += [entry(10, 0.9, 1, "a"), entry(11, 0.9, 1, "b", "common")]
    rep = report_from_scores(entries)
    assert all(r.n_neg == 4 for r in rep.rows)


def test_report_order_independent():
    rng = np.random.default_rng(3)
    entries = [entry(i, float(rng.random()), int(i % 3 == 0), f"g{i % 2}", ("common", "mixed")[i % 5 == 0])
               for i in range(60)]
    a = report_from_scores(entries).to_csv()
    b = report_from_scores(list(reversed(entries))).to_csv()
    assert a == b


def test_report_needs_reals():
    with pytest.raises(ConfigError):
        report_from_scores([entry(0, 0.5, 1)])


def test_constant_detector_gives_half(tmp_path):
    from glff.imaging import save_image

    for label in ("real", "fake"):
        for i in range(3):
            save_image(tmp_path / label / f"{i}.png", np.full((8, 8, 3), i * 40, np.uint8))
    build_manifest([(tmp_path / "real", 0, "real", "unprocessed"),
                    (tmp_path / "fake", 1, "gen", "unprocessed")], tmp_path / "m.jsonl")
    rep = protocol_report(read_manifest(tmp_path / "m.jsonl"), ConstantDetector(0.5))
    assert all(r.auc == 0.5 for r in rep.rows + rep.averages)
    rep.write(tmp_path / "out")
    with open(tmp_path / "out" / "metrics.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == METRICS_HEADER
    assert (tmp_path / "out" / "roc" / "unprocessed__gen.csv").read_text().startswith("fpr,tpr,threshold\n")
