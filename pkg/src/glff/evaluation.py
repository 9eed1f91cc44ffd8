"""OA / AUC / ROC metrics and per-(protocol, generator) reports."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .backbone import to_image_tensor
from .detector import input_size
from .errors import ConfigError
from .imaging import load_image

METRICS_HEADER = ("protocol", "generator", "n_pos", "n_neg", "oa", "auc")
AVG = "__avg__"
ALL = "__all__"


def auc(pos_scores, neg_scores) -> float:
    """P(pos > neg) + 0.5 P(pos == neg), via the Mann-Whitney rank sum."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]))  # average ranks for ties
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def oa(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise ValueError("oa of an empty set")
    return float(np.mean((scores >= threshold) == (labels == 1)))


def roc(scores, labels):
    """ROC staircase as a list of (fpr, tpr, threshold).

    Starts at (0, 0) with threshold +inf and adds one point per distinct score,
    predicting fake when score >= threshold; ends at (1, 1).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos, n_neg = int((labels == 1).sum()), int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc needs both classes")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == 0)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]  # last index of each distinct score
    points = [(0.0, 0.0, float("inf"))]
    points += [(fp[i] / n_neg, tp[i] / n_pos, float(s[i])) for i in last]
    return points


def roc_area(points) -> float:
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass
class ScoreEntry:
    sample_id: str
    fake_probability: float
    label: int
    generator: str
    protocol: str


@dataclass
class MetricsRow:
    protocol: str
    generator: str
    n_pos: int
    n_neg: int
    oa: float
    auc: float


@dataclass
class MetricsReport:
    rows: list  # per-cell rows
    averages: list = field(default_factory=list)  # per-protocol rows plus the grand row
    rocs: dict = field(default_factory=dict)  # (protocol, generator) -> roc points

    @property
    def grand_auc(self) -> float:
        return next(r.auc for r in self.averages if r.protocol == ALL)

    def cell(self, protocol, generator) -> MetricsRow:
        return next(r for r in self.rows if (r.protocol, r.generator) == (protocol, generator))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in self.rows + self.averages:
            w.writerow([r.protocol, r.generator, r.n_pos, r.n_neg, f"{r.oa:.6f}", f"{r.auc:.6f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'protocol':<16} {'generator':<16} {'n_pos':>6} {'n_neg':>6} {'OA':>7} {'AUC':>7}"]
        for r in self.rows + self.averages:
            lines.append(f"{r.protocol:<16} {r.generator:<16} {r.n_pos:>6} {r.n_neg:>6} {r.oa:>7.3f} {r.auc:>7.3f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir):
        out_dir = Path(out_dir)
        (out_dir / "roc").mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.csv").write_text(self.to_csv(), encoding="utf-8")
        (out_dir / "report.txt").write_text(self.to_table(), encoding="utf-8")
        for (protocol, generator), points in sorted(self.rocs.items()):
            name = f"{protocol}__{generator}".replace("/", "_").replace("(", "_").replace(")", "")
            with open(out_dir / "roc" / f"{name}.csv", "w", newline="", encoding="utf-8") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(("fpr", "tpr", "threshold"))
                for fpr, tpr, thr in points:
                    w.writerow((f"{fpr:.6f}", f"{tpr:.6f}", "inf" if np.isinf(thr) else f"{thr:.6f}"))


def report_from_scores(entries, threshold: float = 0.5) -> MetricsReport:
    """All reals form one shared negative pool; each (protocol, generator) cell of fakes is scored against it."""
    negs = sorted((e for e in entries if e.label == 0), key=lambda e: e.sample_id)
    if not negs:
        raise ConfigError("no real (label 0) samples to use as negatives")
    cells = defaultdict(list)
    for e in entries:
        if e.label == 1:
            cells[(e.protocol, e.generator)].append(e)
    if not cells:
        raise ConfigError("no fake (label 1) samples")
    neg_scores = np.array([e.fake_probability for e in negs])
    rows, rocs = [], {}
    for key in sorted(cells):
        pos_scores = np.array(sorted(e.fake_probability for e in cells[key]))
        scores = np.r_[pos_scores, neg_scores]
        labels = np.r_[np.ones(pos_scores.size, int), np.zeros(neg_scores.size, int)]
        rows.append(MetricsRow(*key, pos_scores.size, neg_scores.size,
                               oa(scores, labels, threshold), auc(pos_scores, neg_scores)))
        rocs[key] = roc(scores, labels)
    averages = []
    for protocol in sorted({r.protocol for r in rows}):
        sub = [r for r in rows if r.protocol == protocol]
        averages.append(MetricsRow(protocol, AVG, sum(r.n_pos for r in sub), len(negs),
                                   float(np.mean([r.oa for r in sub])), float(np.mean([r.auc for r in sub]))))
    averages.append(MetricsRow(ALL, AVG, sum(r.n_pos for r in rows), len(negs),
                               float(np.mean([r.oa for r in averages])), float(np.mean([r.auc for r in averages]))))
    return MetricsReport(rows, averages, rocs)


@torch.no_grad()
def score_images(detector, paths, batch_size: int = 8, size: int | None = None):
    """Fake probabilities for image files, in order."""
    size = size or input_size(detector) or 224
    out = []
    for start in range(0, len(paths), batch_size):
        batch = torch.stack([to_image_tensor(load_image(p), size) for p in paths[start:start + batch_size]])
        out.extend(float(v) for v in detector.fake_probability(batch))
    return out


def score_manifest(records, detector, batch_size: int = 8):
    probs = score_images(detector, [r.path for r in records], batch_size)
    return [ScoreEntry(r.path, p, r.label, r.generator, r.protocol) for r, p in zip(records, probs)]


def protocol_report(records, detector, batch_size: int = 8, threshold: float = 0.5) -> MetricsReport:
    if not any(r.label == 0 for r in records):
        raise ConfigError("manifest has no real (label 0) samples")
    if not any(r.label == 1 for r in records):
        raise ConfigError("manifest has no fake (label 1) samples")
    return report_from_scores(score_manifest(records, detector, batch_size), threshold)
