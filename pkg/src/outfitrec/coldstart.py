"""Scoring for users that were not seen in training.

A cold user is profiled by the outfits they interacted with. Warm users
whose mean score over those outfits exceeds ``delta`` (plus the single most
similar one) form the neighborhood, and the cold score of an outfit
aggregates the neighbors' scores, either uniformly or with softmax weights on
similarity. Nothing is written back into the model.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .encoder import ModelParams, score_batch
from .errors import ConfigError, DataError

STRATEGIES = ("avg", "w-avg")


@dataclass(frozen=True)
class ColdStartConfig:
    delta: float = 0.0
    tau_wavg: float = 0.2
    strategy: str = "w-avg"

    def __post_init__(self):
        if not self.tau_wavg > 0:
            raise ConfigError("tau_wavg must be > 0")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")


@dataclass
class ColdProfile:
    user_id: int
    outfits: list

    def __post_init__(self):
        if not self.outfits:
            raise DataError(f"cold user {self.user_id} has an empty profile")


def all_similarities(profile: ColdProfile, model: ModelParams, features: np.ndarray) -> np.ndarray:
    """``s[i]`` = mean score of warm user i over the profile outfits, for every i."""
    users = np.arange(model.config.n_users)
    return score_batch(users, profile.outfits, features, model).mean(axis=1).astype(np.float64)


def user_similarity(profile: ColdProfile, user_id: int, model: ModelParams, features: np.ndarray) -> float:
    return float(score_batch([user_id], profile.outfits, features, model).mean())


def neighborhood(similarities, delta: float = 0.0) -> list:
    """Users with similarity above ``delta``, always including the argmax.

    ``similarities`` is a mapping user -> s or an array indexed by user id.
    Ties for the argmax go to the lowest user id.
    """
    if isinstance(similarities, Mapping):
        ids = sorted(similarities)
        vals = np.array([similarities[i] for i in ids], dtype=np.float64)
    else:
        vals = np.asarray(similarities, dtype=np.float64)
        ids = list(range(len(vals)))
    if len(vals) == 0:
        raise DataError("neighborhood needs a nonempty user population")
    best = ids[int(np.argmax(vals))]  # first maximum == lowest id
    chosen = {ids[k] for k in np.flatnonzero(vals > delta)}
    chosen.add(best)
    return sorted(chosen)


def aggregate_avg(neighbor_scores: np.ndarray) -> np.ndarray:
    """Mean over neighbors (axis 0) of a ``(|N|, J)`` score matrix."""
    neighbor_scores = np.asarray(neighbor_scores, dtype=np.float64)
    assert len(neighbor_scores), "a neighborhood is never empty"
    return neighbor_scores.mean(axis=0)


def _unnormalized(neighbor_sims: Sequence[float], tau: float) -> np.ndarray:
    if not tau > 0:
        raise ConfigError("tau_wavg must be > 0")
    s = np.asarray(neighbor_sims, dtype=np.float64) / tau
    return np.exp(s - s.max())


def wavg_weights(neighbor_sims: Sequence[float], tau: float) -> np.ndarray:
    w = _unnormalized(neighbor_sims, tau)
    return w / w.sum()


def aggregate_wavg(neighbor_sims: Sequence[float], neighbor_scores: np.ndarray, tau: float) -> np.ndarray:
    neighbor_scores = np.asarray(neighbor_scores, dtype=np.float64)
    assert len(neighbor_scores), "a neighborhood is never empty"
    # normalizing last keeps equal similarities bit-identical to the plain mean
    w = _unnormalized(neighbor_sims, tau)
    return (w[:, None] * neighbor_scores).sum(axis=0) / w.sum()


def cold_score_avg(neighbors: Sequence[int], outfit, model: ModelParams, features: np.ndarray) -> float:
    return float(aggregate_avg(score_batch(list(neighbors), [outfit], features, model))[0])


def cold_score_wavg(neighbor_sims: Mapping, outfit, model: ModelParams, features: np.ndarray,
                    tau: float) -> float:
    ids = sorted(neighbor_sims)
    scores = score_batch(ids, [outfit], features, model)
    return float(aggregate_wavg([neighbor_sims[i] for i in ids], scores, tau)[0])


class ColdStartScorer:
    """Adapts a frozen model into ``score_fn(cold_user, outfits)`` for evaluation."""

    def __init__(self, model: ModelParams, features: np.ndarray, profiles: Mapping,
                 config: ColdStartConfig = ColdStartConfig()):
        self.model = model
        self.features = features
        self.config = config
        self.profiles = dict(profiles)
        self._neigh: dict = {}
        self.neighborhood_sizes: dict = {}

    def _neighbors(self, user: int):
        if user not in self._neigh:
            profile = self.profiles[user]
            sims = all_similarities(profile, self.model, self.features)
            ids = neighborhood(sims, self.config.delta)
            if not ids:
                raise AssertionError("empty neighborhood")
            self._neigh[user] = (ids, sims[ids])
            self.neighborhood_sizes[user] = len(ids)
        return self._neigh[user]

    def __call__(self, user: int, outfits) -> np.ndarray:
        ids, sims = self._neighbors(user)
        scores = score_batch(ids, outfits, self.features, self.model)
        if self.config.strategy == "avg":
            return aggregate_avg(scores)
        return aggregate_wavg(sims, scores, self.config.tau_wavg)


def save_profiles(profiles: Mapping, path) -> None:
    """Cold-profile file: one JSON object per line."""
    with open(path, "w") as fh:
        for uid in sorted(profiles):
            p = profiles[uid]
            fh.write(json.dumps({"cold_user": int(uid), "outfits": [int(j) for j in p]}) + "\n")


def load_profiles(path) -> dict:
    """Read ``{cold user id: [outfit ids]}`` from a cold-profile file."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[int(rec["cold_user"])] = [int(j) for j in rec["outfits"]]
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{n}: malformed cold profile ({exc})") from None
    return out
