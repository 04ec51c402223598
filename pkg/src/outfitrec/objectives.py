"""Ranking, distillation and contrastive objectives.

Scores are cosine preferences in [-1, 1]. Every loss accepts Tensors (so the
result can be back-propagated into the encoder) or plain arrays.
"""
from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .encoder import ModelParams, encode_many, load_checkpoint
from .errors import ConfigError, DataError, DimensionError, UnknownUserError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    tau_fnd: float = 0.1
    tau_cl: float = 0.1
    alpha: float = 1.25
    lam: float = 0.2

    def __post_init__(self):
        if not (self.tau_fnd > 0 and self.tau_cl > 0):
            raise ConfigError("temperatures must be > 0")
        if not self.alpha > 0:
            raise ConfigError("alpha must be > 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")


def _check_tau(tau: float):
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")


def bpr_loss(pos_scores, neg_scores, tau: float) -> Tensor:
    """Mean of -log sigmoid((r_pos - r_neg) / tau)."""
    _check_tau(tau)
    pos, neg = dc.as_tensor(pos_scores), dc.as_tensor(neg_scores)
    if pos.shape != neg.shape:
        raise DimensionError("bpr_loss: positive and negative score vectors differ in length")
    return dc.mean(dc.softplus(dc.scale(neg - pos, 1.0 / tau)))


def _ranking_ce(pos: Tensor, neg_logits: Tensor, tau: float) -> Tensor:
    if pos.ndim != 1 or neg_logits.ndim != 2 or neg_logits.shape[0] != pos.shape[0]:
        raise DimensionError("expected pos (N,) and negatives (N, K)")
    logits = dc.scale(dc.concat([dc.reshape(pos, (pos.shape[0], 1)), neg_logits], axis=1), 1.0 / tau)
    first = np.zeros(pos.shape[0], dtype=np.intp)
    return -dc.mean(dc.pick(dc.log_softmax(logits), first))


def npair_loss(pos_scores, neg_scores, tau: float) -> Tensor:
    """N-pair cross-entropy of each positive against its own negatives."""
    _check_tau(tau)
    return _ranking_ce(dc.as_tensor(pos_scores), dc.as_tensor(neg_scores), tau)


def fnd_loss(pos_scores, neg_scores, signals, tau: float) -> Tensor:
    """N-pair loss with every negative logit scaled by its signed signal d."""
    _check_tau(tau)
    neg = dc.as_tensor(neg_scores)
    signals = np.asarray(signals, dtype=neg.dtype)
    if signals.shape != neg.shape:
        raise DimensionError(f"signals {signals.shape} do not align with negatives {neg.shape}")
    return _ranking_ce(dc.as_tensor(pos_scores), neg * Tensor(signals), tau)


def fnd_negative_gradient(pos_score: float, neg_scores, signals, tau: float) -> np.ndarray:
    """Closed form d loss / d r_k = (d_k / tau) * p_k for one pair."""
    neg = np.asarray(neg_scores, dtype=np.float64)
    d = np.asarray(signals, dtype=np.float64)
    logits = np.concatenate([[pos_score], d * neg]) / tau
    p = np.exp(logits - logits.max())
    p /= p.sum()
    return d / tau * p[1:]


def cl_loss(views, tau: float) -> Tensor:
    """Contrastive loss over 2N projected views; rows (2n, 2n+1) pair up.

    Each view is pulled toward its partner against the other 2N-2 views;
    self-similarity is excluded. Averaged over all 2N anchors.
    """
    _check_tau(tau)
    v = dc.as_tensor(views)
    m = v.shape[0]
    if v.ndim != 2 or m < 2 or m % 2:
        raise DimensionError("cl_loss expects an even number (>= 2) of view rows")
    z = dc.normalize_rows(v)
    sims = dc.scale(dc.matmul(z, dc.transpose(z, (1, 0))), 1.0 / tau)
    partner = np.arange(m) ^ 1
    lp = dc.log_softmax(sims, mask=~np.eye(m, dtype=bool))
    return -dc.mean(dc.pick(lp, partner))


def fnd_cl_loss(fnd, cl, lam: float) -> Tensor:
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    return dc.as_tensor(fnd) + dc.scale(dc.as_tensor(cl), lam)


# ---------------------------------------------------------------- teacher signals

def outfit_key(outfit: Sequence[int]) -> tuple:
    return tuple(sorted(int(i) for i in outfit))


class TeacherCache:
    """Frozen-teacher scores for distillation.

    Holds the mean teacher score of each user's training positives and
    memoizes teacher scores of sampled negatives keyed by
    ``(user, sorted item ids)``.
    """

    def __init__(self, teacher: ModelParams, features: np.ndarray, positive_mean: dict,
                 max_entries: int = 1_000_000):
        self.teacher = teacher
        self.features = features
        self.positive_mean = {int(k): float(v) for k, v in positive_mean.items()}
        self.max_entries = max_entries
        self._memo: dict = {}
        self._lock = threading.Lock()
        self._unit_users = teacher.tensors["user.emb"] / np.linalg.norm(
            teacher.tensors["user.emb"], axis=1, keepdims=True)
        self.fingerprint = teacher.fingerprint()

    @classmethod
    def build(cls, teacher: ModelParams, dataset, **kw) -> "TeacherCache":
        means = {}
        for u in range(dataset.n_users):
            ids = dataset.splits["train"][u]
            if not ids:
                log.warning("user %d has no training positives; excluded from the teacher cache", u)
                continue
            outfits = [dataset.outfits[j] for j in ids]
            O = encode_many(outfits, dataset.features, teacher)
            O = O / np.linalg.norm(O, axis=1, keepdims=True)
            u_vec = teacher.tensors["user.emb"][u]
            means[u] = float((O @ (u_vec / np.linalg.norm(u_vec))).mean())
        return cls(teacher, dataset.features, means, **kw)

    def mean_positive(self, user: int) -> float:
        try:
            return self.positive_mean[int(user)]
        except KeyError:
            raise UnknownUserError(f"user {user} is not in the teacher cache") from None

    def scores(self, users: Sequence[int], outfits: Sequence[Sequence[int]]) -> np.ndarray:
        """Teacher score for each aligned (user, outfit) pair."""
        keys = [(int(u), outfit_key(o)) for u, o in zip(users, outfits)]
        with self._lock:
            result = [self._memo.get(k) for k in keys]
        missing = [i for i, r in enumerate(result) if r is None]
        if missing:
            uniq: dict = {}
            for i in missing:
                uniq.setdefault(keys[i][1], len(uniq))
            O = encode_many(list(uniq), self.features, self.teacher)
            O = O / np.linalg.norm(O, axis=1, keepdims=True)
            fresh = {}
            for i in missing:
                u, ok = keys[i]
                result[i] = fresh[keys[i]] = float(O[uniq[ok]] @ self._unit_users[u])
            with self._lock:
                if len(self._memo) + len(fresh) > self.max_entries:
                    self._memo.clear()
                self._memo.update(fresh)
        return np.array(result, dtype=np.float64)

    def false_negativeness(self, user: int, outfit: Sequence[int], alpha: float) -> float:
        return alpha * (self.mean_positive(user) - float(self.scores([user], [outfit])[0]))

    def signals(self, users: Sequence[int], negatives: Sequence[Sequence[Sequence[int]]], alpha: float) -> np.ndarray:
        """``d[n, k] = alpha * (mean_pos(user_n) - teacher(user_n, neg_{n,k}))``."""
        if not alpha > 0:
            raise ConfigError("alpha must be > 0")
        k = len(negatives[0]) if len(negatives) else 0
        flat_u = [u for u, negs in zip(users, negatives) for _ in negs]
        flat_o = [o for negs in negatives for o in negs]
        t = self.scores(flat_u, flat_o).reshape(len(users), k)
        base = np.array([self.mean_positive(u) for u in users])[:, None]
        return alpha * (base - t)

    def save(self, path, teacher_path: str = "") -> None:
        with open(path, "w") as fh:
            json.dump({"format": "outfitrec-teacher-cache", "version": 1,
                       "teacher_checkpoint": str(teacher_path),
                       "teacher_fingerprint": self.fingerprint,
                       "positive_mean": {str(k): v for k, v in sorted(self.positive_mean.items())}},
                      fh, indent=1)

    @classmethod
    def load(cls, path, features: np.ndarray, teacher: ModelParams | None = None) -> "TeacherCache":
        with open(path) as fh:
            blob = json.load(fh)
        if blob.get("format") != "outfitrec-teacher-cache":
            raise DataError(f"{path}: not a teacher cache file")
        if teacher is None:
            teacher = load_checkpoint(blob["teacher_checkpoint"])
        if teacher.fingerprint() != blob["teacher_fingerprint"]:
            raise DataError(f"{path}: teacher checkpoint changed since the cache was built")
        return cls(teacher, features, {int(k): v for k, v in blob["positive_mean"].items()})
