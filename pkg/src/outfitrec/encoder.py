"""Outfit scorer: item encoder, Set Transformer, user table, cosine score.

Parameters live in a flat ``{name: ndarray}`` dict so that the optimizer,
checkpoint writer and gradient checks can treat them uniformly. Forward
functions take the same dict with every array wrapped in a :class:`Tensor`.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, DataError, DimensionError, UnknownUserError

TIER_WIDTHS = {"teacher": 512, "XS": 32, "S": 64, "M": 128}
CHECKPOINT_MAGIC = b"OUTFITREC-CKPT\n"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    d_in: int
    n_users: int
    d: int = 128
    heads: int = 8
    tier: str = "teacher"
    n_sab: int = 2
    d_ff: int = 0  # 0 -> 2*d
    d_proj: int = 0  # 0 -> d
    max_outfit_size: int = 8

    def __post_init__(self):
        if self.tier not in TIER_WIDTHS:
            raise ConfigError(f"unknown tier {self.tier!r}; choose from {sorted(TIER_WIDTHS)}")
        if self.d % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide d ({self.d})")
        if min(self.d_in, self.n_users, self.d, self.heads, self.n_sab) < 1:
            raise ConfigError("encoder dimensions must be positive")

    @property
    def width(self) -> int:
        return TIER_WIDTHS[self.tier]

    @property
    def ff_width(self) -> int:
        return self.d_ff or 2 * self.d

    @property
    def proj_width(self) -> int:
        return self.d_proj or self.d


@dataclass
class ModelParams:
    config: EncoderConfig
    tensors: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def wrap(self, requires_grad: bool = False) -> dict:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.tensors.items()}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k]).tobytes())
        return h.hexdigest()

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


# ---------------------------------------------------------------- initialization

def _attention_shapes(prefix: str, d: int) -> dict:
    return {f"{prefix}.wq": (d, d), f"{prefix}.wk": (d, d), f"{prefix}.wv": (d, d), f"{prefix}.wo": (d, d)}


def _ff_shapes(prefix: str, d: int, hidden: int) -> dict:
    return {f"{prefix}.l1.w": (d, hidden), f"{prefix}.l1.b": (hidden,),
            f"{prefix}.l2.w": (hidden, d), f"{prefix}.l2.b": (d,)}


def _ln_shapes(prefix: str, d: int) -> dict:
    return {f"{prefix}.gain": (d,), f"{prefix}.bias": (d,)}


def parameter_shapes(cfg: EncoderConfig) -> dict:
    d = cfg.d
    shapes = {"item.l1.w": (cfg.d_in, cfg.width), "item.l1.b": (cfg.width,),
              "item.l2.w": (cfg.width, d), "item.l2.b": (d,)}
    for i in range(cfg.n_sab):
        p = f"sab{i}"
        shapes.update(_attention_shapes(f"{p}.mha", d))
        shapes.update(_ln_shapes(f"{p}.ln1", d))
        shapes.update(_ff_shapes(f"{p}.ff", d, cfg.ff_width))
        shapes.update(_ln_shapes(f"{p}.ln2", d))
    shapes["pool.seed"] = (1, d)
    shapes.update(_attention_shapes("pool.mha", d))
    shapes.update(_ln_shapes("pool.ln1", d))
    shapes.update(_ff_shapes("pool.ff", d, cfg.ff_width))
    shapes.update(_ln_shapes("pool.ln2", d))
    shapes["user.emb"] = (cfg.n_users, d)
    shapes.update(_ff_shapes("proj", d, cfg.proj_width))
    return shapes


def init_model(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    tensors = {}
    for name, shape in parameter_shapes(cfg).items():
        if name == "user.emb":
            w = rng.uniform(-0.1, 0.1, size=shape)
        elif name.endswith(".gain"):
            w = np.ones(shape)
        elif name.endswith(".b") or name.endswith(".bias"):
            w = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0] if name != "pool.seed" else shape[1])
            w = rng.uniform(-bound, bound, size=shape)
        tensors[name] = w.astype(dtype)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------- forward pieces

def linear(x, P: dict, prefix: str) -> Tensor:
    return dc.matmul(x, P[f"{prefix}.w"]) + P[f"{prefix}.b"]


def feed_forward(x, P: dict, prefix: str) -> Tensor:
    return linear(dc.relu(linear(x, P, f"{prefix}.l1")), P, f"{prefix}.l2")


def _ln(x, P: dict, prefix: str) -> Tensor:
    return dc.layer_norm(x, P[f"{prefix}.gain"], P[f"{prefix}.bias"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return dc.transpose(dc.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def multi_head_attention(q, k, v, P: dict, prefix: str, heads: int, key_mask=None) -> Tensor:
    """Multi-head attention with per-head projections and an output map.

    ``q`` is ``(B, n_q, d_q)`` and ``k``/``v`` are ``(B, n_v, d)``; 2-D inputs
    are treated as a batch of one. The per-head matrices W_i are the column
    blocks of the stored ``d x d`` projections. Logits are divided by
    ``sqrt(d_q)``. ``key_mask`` is ``(B, n_v)``, True for real items.
    """
    q, k, v = dc.as_tensor(q), dc.as_tensor(k), dc.as_tensor(v)
    squeeze = q.ndim == 2 and k.ndim == 2
    if squeeze:
        q, k, v = (dc.reshape(t, (1,) + t.shape) for t in (q, k, v))
    elif q.ndim == 2:
        q = dc.reshape(q, (1,) + q.shape)
    d_q = q.shape[-1]
    if d_q % heads or v.shape[-1] % heads:
        raise ConfigError(f"heads ({heads}) must divide d_q ({d_q}) and d_v ({v.shape[-1]})")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError("keys and values need the same number of rows")
    Q = dc.matmul(q, P[f"{prefix}.wq"])
    K = dc.matmul(k, P[f"{prefix}.wk"])
    V = dc.matmul(v, P[f"{prefix}.wv"])
    if Q.shape[0] != K.shape[0]:
        Q = dc.broadcast_to(Q, (K.shape[0],) + Q.shape[1:])
    Qh, Kh, Vh = (_split_heads(t, heads) for t in (Q, K, V))
    logits = dc.scale(dc.matmul(Qh, dc.transpose(Kh, (0, 1, 3, 2))), 1.0 / math.sqrt(d_q))
    mask = None if key_mask is None else np.asarray(key_mask, bool)[:, None, None, :]
    A = dc.softmax_rows(logits, mask=mask)
    heads_out = dc.matmul(A, Vh)
    b, _, nq, _ = heads_out.shape
    merged = dc.reshape(dc.transpose(heads_out, (0, 2, 1, 3)), (b, nq, V.shape[-1]))
    out = dc.matmul(merged, P[f"{prefix}.wo"])
    return dc.reshape(out, out.shape[1:]) if squeeze else out


def sab(x, P: dict, prefix: str, heads: int, key_mask=None) -> Tensor:
    """Set attention block: LN(H + ff(H)) with H = LN(X + MHA(X, X, X))."""
    H = _ln(x + multi_head_attention(x, x, x, P, f"{prefix}.mha", heads, key_mask), P, f"{prefix}.ln1")
    return _ln(H + feed_forward(H, P, f"{prefix}.ff"), P, f"{prefix}.ln2")


def pool(F, P: dict, heads: int, key_mask=None) -> Tensor:
    """Seed-vector pooling: (B, n, d) -> (B, d)."""
    s = P["pool.seed"]
    z = _ln(s + multi_head_attention(s, F, F, P, "pool.mha", heads, key_mask), P, "pool.ln1")
    o = _ln(z + feed_forward(z, P, "pool.ff"), P, "pool.ln2")
    return dc.reshape(o, (o.shape[0], o.shape[-1]))


def encode_items(feats, P: dict) -> Tensor:
    return feed_forward(feats, P, "item")


def encode_batch(feats: np.ndarray, mask, P: dict, cfg: EncoderConfig) -> Tensor:
    """Encode a padded batch ``(B, n, d_in)`` of outfits into ``(B, d)``."""
    X = encode_items(Tensor(feats), P)
    for i in range(cfg.n_sab):
        X = sab(X, P, f"sab{i}", cfg.heads, mask)
    return pool(X, P, cfg.heads, mask)


def project(o, P: dict) -> Tensor:
    """Projection head used only by the contrastive objective."""
    return feed_forward(o, P, "proj")


def pack_outfits(outfits: Sequence[Sequence[int]], features: np.ndarray, max_size: int | None = None):
    """Gather item features for outfits given as item-id lists.

    Returns ``(feats, mask)``; ``mask`` is None when all outfits share a size.
    """
    if len(outfits) == 0:
        return np.zeros((0, 1, features.shape[1]), features.dtype), None
    sizes = np.fromiter((len(o) for o in outfits), dtype=np.intp, count=len(outfits))
    if sizes.min() < 1:
        raise DataError("empty outfit")
    n = int(sizes.max())
    if max_size is not None and n > max_size:
        raise DataError(f"outfit of size {n} exceeds max_outfit_size={max_size}")
    if sizes.min() == n:
        return features[np.asarray(outfits, dtype=np.intp)], None
    idx = np.zeros((len(outfits), n), dtype=np.intp)
    mask = np.arange(n)[None, :] < sizes[:, None]
    for r, o in enumerate(outfits):
        idx[r, : len(o)] = o
    feats = features[idx]
    feats[~mask] = 0
    return feats, mask


def encode_outfit(items, m: ModelParams, P: dict | None = None) -> Tensor:
    """Encode one outfit given as a list of raw item feature vectors."""
    items = np.asarray(items, dtype=m.dtype)
    if items.ndim != 2 or items.shape[0] < 1:
        raise DataError("an outfit needs at least one item feature vector")
    if items.shape[0] > m.config.max_outfit_size:
        raise DataError(f"outfit of size {items.shape[0]} exceeds max_outfit_size")
    if items.shape[1] != m.config.d_in:
        raise DimensionError(f"item features have width {items.shape[1]}, expected {m.config.d_in}")
    # The network is order-free in exact arithmetic, but float32 reductions
    # still drift by ~1e-6 with row order; a canonical order makes it exact.
    items = items[np.lexsort(items.T[::-1])]
    P = P if P is not None else m.wrap()
    return dc.reshape(encode_batch(items[None], None, P, m.config), (m.config.d,))


def _check_user(m: ModelParams, user_id: int):
    if not 0 <= int(user_id) < m.config.n_users:
        raise UnknownUserError(f"user {user_id} has no embedding (cold users go through coldstart)")


def preference_score(user_id: int, items, m: ModelParams) -> float:
    _check_user(m, user_id)
    with dc.no_grad():
        o = encode_outfit(items, m)
        return float(dc.cosine(m.tensors["user.emb"][int(user_id)], o).data)


def encode_many(outfits, features: np.ndarray, m: ModelParams, chunk: int = 2048) -> np.ndarray:
    """Forward-only outfit representations ``(len(outfits), d)``."""
    out = np.zeros((len(outfits), m.config.d), dtype=m.dtype)
    if not len(outfits):
        return out
    P = m.wrap()
    feats_all = features.astype(m.dtype, copy=False)
    with dc.no_grad():
        # equal-size groups avoid padding work in fixed-size worlds
        by_size: dict = {}
        for i, o in enumerate(outfits):
            by_size.setdefault(len(o), []).append(i)
        for idxs in by_size.values():
            for s in range(0, len(idxs), chunk):
                part = idxs[s:s + chunk]
                feats, mask = pack_outfits([outfits[i] for i in part], feats_all, m.config.max_outfit_size)
                out[part] = encode_batch(feats, mask, P, m.config).data
    return out


def _unit(x: np.ndarray) -> np.ndarray:
    return x / dc._norms(x)[..., None]


def score_batch(user_ids, outfits, features: np.ndarray, m: ModelParams) -> np.ndarray:
    """Score matrix ``S[i, j] = cos(u_{user_ids[i]}, o_j)``."""
    user_ids = np.asarray(user_ids, dtype=np.intp)
    for u in user_ids:
        _check_user(m, u)
    if len(outfits) == 0:
        return np.zeros((len(user_ids), 0), dtype=m.dtype)
    O = _unit(encode_many(outfits, features, m))
    U = _unit(m.tensors["user.emb"][user_ids])
    return U @ O.T


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(m: ModelParams, path) -> None:
    names = list(m.tensors)
    header = dict(format_version=CHECKPOINT_VERSION, **asdict(m.config),
                  params=[[k, list(m.tensors[k].shape)] for k in names])
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(m.tensors[k], dtype="<f4").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    raw = fh.read(4)
    if len(raw) != 4:
        raise DataError(f"{path}: truncated checkpoint header")
    (n,) = struct.unpack("<I", raw)
    header = json.loads(fh.read(n).decode())
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    return header


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        cfg_fields = {k: header[k] for k in EncoderConfig.__dataclass_fields__}
        cfg = EncoderConfig(**cfg_fields)
        tensors = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise DataError(f"{path}: truncated blob for {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    expected = parameter_shapes(cfg)
    if set(expected) != set(tensors):
        raise DataError(f"{path}: parameter set does not match the header configuration")
    return ModelParams(cfg, tensors)
