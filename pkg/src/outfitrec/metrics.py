"""Per-user ranking metrics and the user-averaged evaluation protocol."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .errors import MetricUndefinedError

log = logging.getLogger(__name__)

EXPORT_COLUMNS = ("user", "n_pos", "n_neg", "auc", "ndcg")


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must align")
    if not np.all(np.isfinite(scores)):
        raise MetricUndefinedError("non-finite score in ranked list")
    return scores, labels


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: share of (pos, neg) pairs ranked correctly, ties = 1/2."""
    scores, labels = _split(scores, labels)
    pos, neg = scores[labels], scores[~labels]
    if len(pos) == 0 or len(neg) == 0:
        raise MetricUndefinedError("AUC needs at least one positive and one negative")
    return _kernels.auc_count(pos, neg) / (len(pos) * len(neg))


def ndcg(scores, labels) -> float:
    """Full-list NDCG with binary gains; ties keep input order."""
    scores, labels = _split(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricUndefinedError("NDCG needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    discounts = 1.0 / np.log2(np.arange(2, len(scores) + 2))
    dcg = discounts[labels[order]].sum()
    return float(dcg / discounts[:n_pos].sum())


@dataclass
class EvalResult:
    mean_auc: float
    mean_ndcg: float
    rows: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"mean_auc": self.mean_auc, "mean_ndcg": self.mean_ndcg,
                "n_users": len(self.rows), "n_skipped": len(self.skipped)}

    def write_table(self, path, delimiter: str = "\t") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
            w.writerow(EXPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r["user"], r["n_pos"], r["n_neg"], f"{r['auc']:.6f}", f"{r['ndcg']:.6f}"])
            w.writerow(["mean", sum(r["n_pos"] for r in self.rows), sum(r["n_neg"] for r in self.rows),
                        f"{self.mean_auc:.6f}", f"{self.mean_ndcg:.6f}"])


def evaluate(score_fn: Callable, eval_sets: dict) -> EvalResult:
    """Average AUC/NDCG over users.

    ``score_fn(user, outfits) -> scores`` may be a trained model, a cold-start
    aggregator or an oracle. ``eval_sets`` maps user -> [(outfit, label), ...].
    Users whose list is degenerate are skipped with a warning.
    """
    rows, skipped = [], []
    for user in sorted(eval_sets):
        cands = eval_sets[user]
        outfits = [o for o, _ in cands]
        labels = np.array([lab for _, lab in cands], dtype=bool)
        scores = np.asarray(score_fn(user, outfits), dtype=np.float64)
        try:
            a, n = auc(scores, labels), ndcg(scores, labels)
        except MetricUndefinedError as exc:
            log.warning("user %s skipped: %s", user, exc)
            skipped.append(user)
            continue
        rows.append({"user": user, "n_pos": int(labels.sum()), "n_neg": int((~labels).sum()),
                     "auc": a, "ndcg": n})
    if not rows:
        return EvalResult(math.nan, math.nan, rows, skipped)
    return EvalResult(float(np.mean([r["auc"] for r in rows])),
                      float(np.mean([r["ndcg"] for r in rows])), rows, skipped)
