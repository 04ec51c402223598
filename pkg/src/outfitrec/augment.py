"""Outfit augmentations for contrastive training: erase and replace.

``replace`` swaps one item for a same-category neighbor in the latent space
of a small autoencoder trained on item features.
"""
from __future__ import annotations

import enum
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import (AugmentationInapplicableError, ConfigError, DataError,
                     TrainingDivergenceError, UnknownItemError)

log = logging.getLogger(__name__)


class AugmentationKind(str, enum.Enum):
    IDENTITY = "identity"
    ERASE = "erase"
    REPLACE = "replace"


_SHORT = {"i": "identity", "e": "erase", "r": "replace"}


def parse_pair(text) -> tuple:
    """Parse ``"erase,replace"`` / ``"ER"`` / a 2-tuple into a pair of kinds."""
    if isinstance(text, (tuple, list)):
        parts = list(text)
    elif "," in text:
        parts = [p.strip() for p in text.split(",")]
    elif len(text) == 2:
        parts = [_SHORT.get(c.lower(), c) for c in text]
    else:
        raise ConfigError(f"cannot parse augmentation pair {text!r}")
    try:
        pair = tuple(AugmentationKind(_SHORT.get(p, p) if isinstance(p, str) else p) for p in parts)
    except ValueError:
        raise ConfigError(f"unknown augmentation in {text!r}") from None
    if len(pair) != 2:
        raise ConfigError("an augmentation pair has exactly two entries")
    if pair == (AugmentationKind.IDENTITY, AugmentationKind.IDENTITY):
        raise ConfigError("(identity, identity) yields two identical views and is not allowed")
    return pair


def all_pairs() -> list:
    kinds = list(AugmentationKind)
    return [(a, b) for a in kinds for b in kinds
            if (a, b) != (AugmentationKind.IDENTITY, AugmentationKind.IDENTITY)]


# ---------------------------------------------------------------- autoencoder

@dataclass
class AutoencoderParams:
    tensors: dict
    mean: np.ndarray
    std: np.ndarray
    activation: str = "relu"
    train_losses: list = field(default_factory=list)
    holdout_mse_init: float = float("nan")
    holdout_mse: float = float("nan")

    @property
    def d_lat(self) -> int:
        return self.tensors["enc.w"].shape[1]

    def _forward(self, x, P):
        h = dc.matmul(x, P["enc.w"]) + P["enc.b"]
        if self.activation == "relu":
            h = dc.relu(h)
        return h, dc.matmul(h, P["dec.w"]) + P["dec.b"]

    def encode(self, items: np.ndarray) -> np.ndarray:
        x = (np.asarray(items, np.float64) - self.mean) / self.std
        with dc.no_grad():
            h, _ = self._forward(Tensor(x), {k: Tensor(v) for k, v in self.tensors.items()})
        return h.data

    def reconstruction_mse(self, items: np.ndarray) -> float:
        x = (np.asarray(items, np.float64) - self.mean) / self.std
        with dc.no_grad():
            _, r = self._forward(Tensor(x), {k: Tensor(v) for k, v in self.tensors.items()})
        return float(((r.data - x) ** 2).mean())


def init_autoencoder(items: np.ndarray, d_lat: int, rng: np.random.Generator,
                     activation: str = "relu") -> AutoencoderParams:
    items = np.asarray(items, np.float64)
    d_in = items.shape[1]
    mean = items.mean(axis=0)
    std = items.std(axis=0)
    std[std < 1e-8] = 1.0
    b_in, b_lat = 1 / np.sqrt(d_in), 1 / np.sqrt(d_lat)
    tensors = {"enc.w": rng.uniform(-b_in, b_in, (d_in, d_lat)), "enc.b": np.zeros(d_lat),
               "dec.w": rng.uniform(-b_lat, b_lat, (d_lat, d_in)), "dec.b": np.zeros(d_in)}
    return AutoencoderParams(tensors, mean, std, activation)


def train_autoencoder(items, epochs: int, lr: float, d_lat: int = 32, activation: str = "relu",
                      momentum: float = 0.9, batch_size: int = 64, holdout: float = 0.1,
                      seed: int = 0) -> AutoencoderParams:
    """Fit ``d_in -> d_lat -> d_in`` on standardized features with an MSE loss.

    ``holdout`` of the items are kept aside; the returned params record the
    held-out MSE at initialization and after training.
    """
    items = np.asarray(items, np.float64)
    if items.ndim != 2 or len(items) == 0:
        raise DataError("autoencoder needs a nonempty (n, d_in) item matrix")
    if activation not in ("relu", "linear"):
        raise ConfigError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(items))
    n_hold = int(round(len(items) * holdout)) if len(items) > 1 else 0
    hold, train = items[perm[:n_hold]], items[perm[n_hold:]]
    ae = init_autoencoder(train, d_lat, rng, activation)
    if n_hold:
        ae.holdout_mse_init = ae.reconstruction_mse(hold)
    x_all = (train - ae.mean) / ae.std
    opt = dc.SGD(lr, momentum)
    for _ in range(epochs):
        order = rng.permutation(len(x_all))
        total = 0.0
        for s in range(0, len(order), batch_size):
            x = Tensor(x_all[order[s:s + batch_size]])
            P = {k: Tensor(v, requires_grad=True) for k, v in ae.tensors.items()}
            _, r = ae._forward(x, P)
            diff = r - x
            loss = dc.mean(diff * diff)
            if not np.isfinite(loss.data):
                raise TrainingDivergenceError("autoencoder loss became non-finite")
            loss.backward()
            ae.tensors = opt.step(ae.tensors, {k: P[k].grad for k in P})
            total += float(loss.data) * x.shape[0]
        ae.train_losses.append(total / len(x_all))
    if n_hold:
        ae.holdout_mse = ae.reconstruction_mse(hold)
    return ae


# ---------------------------------------------------------------- similarity index

class SimilarityIndex:
    """Per-category cosine neighbors over autoencoder latents."""

    def __init__(self, latents: np.ndarray, item_category: np.ndarray):
        self.latents = np.asarray(latents, dtype=np.float32)
        self.item_category = np.asarray(item_category, dtype=np.intp)
        self._members = {}
        for c in np.unique(self.item_category):
            self._members[int(c)] = np.flatnonzero(self.item_category == c)
        norms = np.linalg.norm(self.latents.astype(np.float64), axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        self._unit = self.latents.astype(np.float64) / norms
        self._neighbors: dict = {}

    @classmethod
    def build(cls, ae: AutoencoderParams, features: np.ndarray, item_category) -> "SimilarityIndex":
        return cls(ae.encode(features), item_category)

    def __len__(self):
        return len(self.item_category)

    def _ranked(self, item: int) -> np.ndarray:
        if item not in self._neighbors:
            c = int(self.item_category[item])
            members = self._members[c]
            members = members[members != item]
            sims = self._unit[members] @ self._unit[item]
            # descending similarity, ties by item id
            order = np.lexsort((members, -sims))
            self._neighbors[item] = members[order]
        return self._neighbors[item]

    def similar_items(self, item_id: int, k: int) -> list:
        item_id = int(item_id)
        if not 0 <= item_id < len(self):
            raise UnknownItemError(f"item {item_id} is not in the similarity index")
        return [int(i) for i in self._ranked(item_id)[:k]]

    def save(self, path) -> None:
        """Dump ``(item id, category, latent floats)`` records, little-endian."""
        n, d = self.latents.shape
        header = json.dumps({"format": "outfitrec-index", "version": 1, "n_items": n, "d_lat": d}).encode()
        rec = np.zeros(n, dtype=[("id", "<i4"), ("category", "<i4"), ("latent", "<f4", (d,))])
        rec["id"] = np.arange(n)
        rec["category"] = self.item_category
        rec["latent"] = self.latents
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path) -> "SimilarityIndex":
        with open(path, "rb") as fh:
            (n,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(n))
            d = header["d_lat"]
            dt = np.dtype([("id", "<i4"), ("category", "<i4"), ("latent", "<f4", (d,))])
            rec = np.frombuffer(fh.read(), dtype=dt)
        if len(rec) != header["n_items"]:
            raise DataError(f"{path}: truncated index dump")
        return cls(rec["latent"].copy(), rec["category"].astype(np.intp))


def similar_items(index: SimilarityIndex, item_id: int, k: int) -> list:
    return index.similar_items(item_id, k)


# ---------------------------------------------------------------- augmentations

def _erase_at(outfit: Sequence[int], pos: int) -> tuple:
    return tuple(outfit[:pos]) + tuple(outfit[pos + 1:])


def _replace_at(outfit: Sequence[int], pos: int, index: SimilarityIndex, rng, k: int) -> tuple:
    cands = index.similar_items(outfit[pos], k)
    if not cands:
        raise AugmentationInapplicableError(f"item {outfit[pos]} has no other item in its category")
    out = list(outfit)
    out[pos] = cands[rng.integers(len(cands))]
    return tuple(out)


def erase(outfit: Sequence[int], rng: np.random.Generator) -> tuple:
    """Drop one uniformly chosen item."""
    if len(outfit) < 2:
        raise AugmentationInapplicableError("cannot erase from an outfit with fewer than two items")
    return _erase_at(outfit, int(rng.integers(len(outfit))))


def replace(outfit: Sequence[int], index: SimilarityIndex, rng: np.random.Generator, k: int = 5) -> tuple:
    """Swap one uniformly chosen item for one of its ``k`` nearest same-category items."""
    if len(outfit) < 1:
        raise AugmentationInapplicableError("empty outfit")
    return _replace_at(outfit, int(rng.integers(len(outfit))), index, rng, k)


def _apply(kind: AugmentationKind, outfit, pos, index, rng, k):
    if kind is AugmentationKind.IDENTITY:
        return tuple(outfit)
    if kind is AugmentationKind.ERASE:
        if len(outfit) < 2:
            raise AugmentationInapplicableError("cannot erase from a singleton outfit")
        return _erase_at(outfit, pos)
    return _replace_at(outfit, pos, index, rng, k)


def make_views(outfit: Sequence[int], pair, index: SimilarityIndex | None,
               rng: np.random.Generator, k: int = 5) -> tuple:
    """Two augmented views of ``outfit``.

    With two identical kinds the altered positions differ. Outfits too small
    for that fall back to ``(identity, kind)``.
    """
    a, b = parse_pair(pair)
    outfit = tuple(outfit)
    n = len(outfit)
    if AugmentationKind.REPLACE in (a, b) and index is None:
        raise ConfigError("replace augmentation needs a similarity index")
    if a == b and n < 2:
        log.warning("outfit of size %d cannot get two distinct %s views; using identity for the first", n, a.value)
        a = AugmentationKind.IDENTITY
    if a is AugmentationKind.ERASE and n < 2 or b is AugmentationKind.ERASE and n < 2:
        log.warning("singleton outfit: erase replaced by identity")
        a = AugmentationKind.IDENTITY if a is AugmentationKind.ERASE else a
        b = AugmentationKind.IDENTITY if b is AugmentationKind.ERASE else b
    p1 = int(rng.integers(n))
    p2 = int(rng.integers(n))
    if a == b and a is not AugmentationKind.IDENTITY:
        while p2 == p1:
            p2 = int(rng.integers(n))
    return _apply(a, outfit, p1, index, rng, k), _apply(b, outfit, p2, index, rng, k)
