"""Synthetic outfit world with planted user preferences.

Every item has a hidden unit style vector; its observed features are a
category prototype plus a linear image of the style plus gaussian noise.
Every user has a hidden unit style vector and composes positive outfits by
picking, per category, items with probability proportional to
``exp(<user style, item style> / temperature)``.

Items are partitioned per user before composition, so a user's train
outfits and test outfits never share an item.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, DatasetFormatError

FORMAT_TAG = "#outfitrec-dataset"
FORMAT_VERSION = 1
SPLITS = ("train", "val_teacher", "val_student", "test")
COLD_SPLITS = ("profile", "cold_test")
FEATURE_MAPS = ("linear", "cosine")


@dataclass(frozen=True)
class WorldConfig:
    n_users: int = 50
    items_per_category: int = 200
    categories: tuple = ("top", "bottom", "shoes")
    d_in: int = 32
    style_dim: int = 8
    noise: float = 0.25
    style_scale: float = 2.0
    prototype_scale: float = 1.0
    positives_per_user: int = 60
    affinity_temperature: float = 0.1
    variable_size: bool = False
    extra_item_prob: float = 0.3
    feature_map: str = "linear"
    warp_features: int = 128
    warp_frequency: float = 3.0
    n_cold_users: int = 20
    cold_profile_size: int = 10
    cold_test_size: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        counts = (self.n_users, self.items_per_category, len(self.categories), self.d_in,
                  self.style_dim, self.positives_per_user)
        if min(counts) < 1:
            raise ConfigError("world counts must all be >= 1")
        if self.n_cold_users < 0 or (self.n_cold_users and min(self.cold_profile_size, self.cold_test_size) < 1):
            raise ConfigError("cold users need at least one profile and one test outfit")
        if not self.affinity_temperature > 0:
            raise ConfigError("affinity_temperature must be > 0")
        if self.feature_map not in FEATURE_MAPS:
            raise ConfigError(f"feature_map must be one of {FEATURE_MAPS}")
        if self.warp_features < 1:
            raise ConfigError("warp_features must be >= 1")
        if self.noise < 0 or not 0 <= self.extra_item_prob <= 1:
            raise ConfigError("noise must be >= 0 and extra_item_prob in [0, 1]")

    @property
    def max_outfit_size(self) -> int:
        return len(self.categories) * (2 if self.variable_size else 1)


@dataclass
class Oracle:
    """Hidden generative state. Models never read it; audits and oracles do."""
    user_style: np.ndarray
    item_style: np.ndarray
    cold_style: np.ndarray

    def style_of(self, user: int, n_users: int) -> np.ndarray:
        return self.user_style[user] if user < n_users else self.cold_style[user - n_users]


@dataclass
class Dataset:
    categories: list
    item_category: np.ndarray
    features: np.ndarray
    outfits: list
    n_users: int
    splits: dict
    cold: dict
    oracle: Oracle | None = None
    seed: int = 0
    config: dict = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return len(self.item_category)

    @property
    def cold_users(self) -> list:
        return sorted(self.cold)

    @property
    def fixed_size(self) -> bool:
        return not self.config.get("variable_size", False)

    @property
    def max_outfit_size(self) -> int:
        return max(len(o) for o in self.outfits)

    def positives(self, user: int, split: str) -> list:
        if split in SPLITS:
            if not 0 <= user < self.n_users:
                raise DataError(f"unknown user {user}")
            return [self.outfits[j] for j in self.splits[split][user]]
        if split in COLD_SPLITS:
            key = "profile" if split == "profile" else "test"
            return [self.outfits[j] for j in self.cold[user][key]]
        raise DataError(f"unknown split {split!r}")

    def split_users(self, split: str) -> list:
        return self.cold_users if split in COLD_SPLITS else list(range(self.n_users))

    def category_items(self) -> list:
        return [np.flatnonzero(self.item_category == c) for c in range(len(self.categories))]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        same_oracle = (self.oracle is None) == (other.oracle is None)
        if same_oracle and self.oracle is not None:
            same_oracle = all(np.array_equal(getattr(self.oracle, f), getattr(other.oracle, f))
                              for f in ("user_style", "item_style", "cold_style"))
        return (list(self.categories) == list(other.categories)
                and np.array_equal(self.item_category, other.item_category)
                and np.array_equal(self.features, other.features)
                and self.features.dtype == other.features.dtype
                and [tuple(o) for o in self.outfits] == [tuple(o) for o in other.outfits]
                and self.n_users == other.n_users and self.splits == other.splits
                and self.cold == other.cold and self.seed == other.seed
                and self.config == other.config and same_oracle)


# ---------------------------------------------------------------- generation

def _unit_rows(rng, n, dim) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _split_counts(p: int) -> tuple:
    test = round(p * 2 / 13)
    val = round(p * 2 / 13)
    return p - test - val, val, test


class _Composer:
    """Samples distinct positive outfits for one user from per-category pools."""

    def __init__(self, cfg: WorldConfig, item_style: np.ndarray, compositions, rng):
        self.cfg = cfg
        self.item_style = item_style
        self.compositions = compositions
        self.rng = rng

    def draw(self, style: np.ndarray, pools: list, count: int, seen: set) -> list:
        probs = []
        for pool in pools:
            logits = self.item_style[pool] @ style / self.cfg.affinity_temperature
            w = np.exp(logits - logits.max())
            probs.append(w / w.sum())
        out = []
        for _ in range(count * 200):
            if len(out) == count:
                break
            comp = self.compositions[self.rng.integers(len(self.compositions))]
            items = []
            for pool, p, k in zip(pools, probs, comp):
                if k:
                    items.extend(int(i) for i in self.rng.choice(pool, size=k, replace=False, p=p))
            key = tuple(sorted(items))
            if key not in seen:
                seen.add(key)
                out.append(tuple(items))
        if len(out) < count:
            raise ConfigError("could not draw enough distinct positive outfits; "
                              "lower positives_per_user or raise affinity_temperature")
        return out


def _compositions(cfg: WorldConfig, rng) -> list:
    c = len(cfg.categories)
    if not cfg.variable_size:
        return [tuple([1] * c)]
    comps = 1 + (rng.random((512, c)) < cfg.extra_item_prob).astype(int)
    return [tuple(int(v) for v in row) for row in comps]


def _check_feasible(cfg: WorldConfig, pool_sizes: Sequence[int], needed: int, what: str):
    per = 2 if cfg.variable_size else 1
    combos = 1
    for s in pool_sizes:
        if s < per:
            raise ConfigError(f"{what}: category pool of {s} items cannot fill an outfit")
        combos *= s
    if combos < needed:
        raise ConfigError(f"{what}: {needed} distinct positives requested but only {combos} "
                          "item combinations exist")


def _style_component(cfg: WorldConfig, item_style: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """How hidden item style shows up in the observed features.

    ``linear`` projects style into a subspace. ``cosine`` passes it through
    random Fourier features first, so recovering style needs a nonlinear
    (and wider) item encoder. The cosine map draws from its own stream,
    leaving every other draw of the world unchanged.
    """
    if cfg.feature_map == "linear":
        return item_style @ basis.T
    wr = np.random.default_rng([cfg.seed, 1])
    k = cfg.warp_features
    R = wr.standard_normal((cfg.style_dim, k))
    b = wr.uniform(-np.pi, np.pi, k)
    M = wr.standard_normal((k, cfg.d_in)) / np.sqrt(k)
    return cfg.style_scale * np.cos(cfg.warp_frequency * item_style @ R + b) @ M


def generate_world(cfg: WorldConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    n_cat, n_per = len(cfg.categories), cfg.items_per_category
    n_items = n_cat * n_per
    item_category = np.repeat(np.arange(n_cat), n_per)
    prototypes = rng.standard_normal((n_cat, cfg.d_in)) * cfg.prototype_scale
    basis, _ = np.linalg.qr(rng.standard_normal((cfg.d_in, cfg.style_dim)))
    basis = basis[:, : cfg.style_dim] * cfg.style_scale
    item_style = _unit_rows(rng, n_items, cfg.style_dim)
    features = (prototypes[item_category] + _style_component(cfg, item_style, basis)
                + cfg.noise * rng.standard_normal((n_items, cfg.d_in)))
    features = features.astype(np.float32)
    user_style = _unit_rows(rng, cfg.n_users, cfg.style_dim)
    cold_style = _unit_rows(rng, cfg.n_cold_users, cfg.style_dim)

    comps = _compositions(cfg, rng)
    composer = _Composer(cfg, item_style, comps, rng)
    by_cat = [np.flatnonzero(item_category == c) for c in range(n_cat)]
    n_train, n_val, n_test = _split_counts(cfg.positives_per_user)
    if n_train < 1:
        raise ConfigError("positives_per_user too small to leave a training split")
    held_frac = 2 / 13

    outfits: list = []
    splits = {s: [] for s in SPLITS}

    def partition(fraction):
        a, b = [], []
        for items in by_cat:
            perm = rng.permutation(items)
            cut = max(1, min(len(perm) - 1, round(len(perm) * fraction)))
            a.append(np.sort(perm[cut:]))
            b.append(np.sort(perm[:cut]))
        return a, b

    for u in range(cfg.n_users):
        train_pool, test_pool = partition(held_frac)
        _check_feasible(cfg, [len(p) for p in train_pool], n_train + n_val, f"user {u} train pool")
        _check_feasible(cfg, [len(p) for p in test_pool], n_test, f"user {u} test pool")
        seen: set = set()
        trainval = composer.draw(user_style[u], train_pool, n_train + n_val, seen)
        test = composer.draw(user_style[u], test_pool, n_test, seen)
        val_t = (n_val + 1) // 2
        groups = {"train": trainval[:n_train], "val_teacher": trainval[n_train:n_train + val_t],
                  "val_student": trainval[n_train + val_t:], "test": test}
        for s in SPLITS:
            ids = list(range(len(outfits), len(outfits) + len(groups[s])))
            outfits.extend(groups[s])
            splits[s].append(ids)

    cold = {}
    for c in range(cfg.n_cold_users):
        uid = cfg.n_users + c
        prof_pool, test_pool = partition(0.5)
        _check_feasible(cfg, [len(p) for p in prof_pool], cfg.cold_profile_size, f"cold user {uid}")
        _check_feasible(cfg, [len(p) for p in test_pool], cfg.cold_test_size, f"cold user {uid}")
        seen = set()
        groups = {"profile": composer.draw(cold_style[c], prof_pool, cfg.cold_profile_size, seen),
                  "test": composer.draw(cold_style[c], test_pool, cfg.cold_test_size, seen)}
        cold[uid] = {}
        for key in ("profile", "test"):
            cold[uid][key] = list(range(len(outfits), len(outfits) + len(groups[key])))
            outfits.extend(groups[key])

    conf = asdict(cfg)
    conf["categories"] = list(cfg.categories)
    return Dataset(categories=list(cfg.categories), item_category=item_category, features=features,
                   outfits=outfits, n_users=cfg.n_users, splits=splits, cold=cold,
                   oracle=Oracle(user_style.astype(np.float32), item_style.astype(np.float32),
                                 cold_style.astype(np.float32).reshape(cfg.n_cold_users, cfg.style_dim)),
                   seed=cfg.seed, config=conf)


# ---------------------------------------------------------------- sampling

class NegativeSampler:
    """Category-wise random negatives and other-user hard negatives."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.by_cat = dataset.category_items()
        if any(len(c) == 0 for c in self.by_cat):
            raise DataError("every category needs at least one item")
        freq: dict = {}
        n_cat = len(self.by_cat)
        for ids in dataset.splits["train"]:
            for j in ids:
                counts = np.bincount(dataset.item_category[list(dataset.outfits[j])], minlength=n_cat)
                key = tuple(int(c) for c in counts)
                freq[key] = freq.get(key, 0) + 1
        if not freq:
            freq = {tuple([1] * n_cat): 1}
        self.compositions = sorted(freq)
        total = sum(freq.values())
        self.comp_probs = np.array([freq[c] / total for c in self.compositions])
        self.fixed = self.compositions == [tuple([1] * n_cat)]
        owners, train_ids = [], []
        for u, ids in enumerate(dataset.splits["train"]):
            owners.extend([u] * len(ids))
            train_ids.extend(ids)
        self.train_owner = np.asarray(owners, dtype=np.intp)
        self.train_ids = np.asarray(train_ids, dtype=np.intp)

    def negative(self, rng: np.random.Generator) -> tuple:
        if self.fixed:
            return tuple(int(items[rng.integers(len(items))]) for items in self.by_cat)
        comp = self.compositions[rng.choice(len(self.compositions), p=self.comp_probs)]
        out = []
        for items, k in zip(self.by_cat, comp):
            if k:
                out.extend(int(i) for i in rng.choice(items, size=min(k, len(items)), replace=False))
        return tuple(out)

    def negatives(self, rng: np.random.Generator, count: int) -> list:
        if self.fixed:
            cols = [items[rng.integers(len(items), size=count)] for items in self.by_cat]
            return [tuple(int(c[r]) for c in cols) for r in range(count)]
        return [self.negative(rng) for _ in range(count)]

    def hard_negative(self, user: int, rng: np.random.Generator) -> tuple:
        if self.dataset.n_users < 2:
            raise DataError("hard negatives need at least two users")
        own = self.train_owner == user if 0 <= user < self.dataset.n_users else None
        if own is not None and own.all():
            raise DataError("no other user has training positives")
        while True:
            k = rng.integers(len(self.train_ids))
            if self.train_owner[k] != user:
                return self.dataset.outfits[self.train_ids[k]]

    def shared(self, users, rng: np.random.Generator, count: int, hard: bool) -> list:
        """One negative pool for a whole batch; hard draws avoid every batch user's positives."""
        n_hard = count // 2 if hard else 0
        out = []
        if n_hard:
            allowed = np.flatnonzero(~np.isin(self.train_owner, np.asarray(users)))
            if not len(allowed):
                raise DataError("every user with training positives is in the batch; no shared hard negatives")
            out = [self.dataset.outfits[self.train_ids[k]] for k in rng.choice(allowed, size=n_hard)]
        return out + self.negatives(rng, count - n_hard)

    def mixed(self, user: int, rng: np.random.Generator, count: int, hard: bool) -> list:
        """``count`` training negatives; with ``hard`` the first floor(count/2) are hard."""
        n_hard = count // 2 if hard else 0
        return [self.hard_negative(user, rng) for _ in range(n_hard)] + self.negatives(rng, count - n_hard)


def sample_negative(dataset: Dataset, rng: np.random.Generator, size_hint=None) -> tuple:
    return NegativeSampler(dataset).negative(rng)


def sample_hard_negative(dataset: Dataset, user_id: int, rng: np.random.Generator) -> tuple:
    return NegativeSampler(dataset).hard_negative(user_id, rng)


def build_eval_set(dataset: Dataset, split: str, rng: np.random.Generator, ratio: int = 10,
                   hard: bool = False, sampler: NegativeSampler | None = None) -> dict:
    """Per user: all split positives (label 1) plus ``ratio`` x as many negatives (label 0)."""
    sampler = sampler or NegativeSampler(dataset)
    out = {}
    for u in dataset.split_users(split):
        pos = dataset.positives(u, split)
        if not pos:
            continue
        n_neg = ratio * len(pos)
        negs = [sampler.hard_negative(u, rng) for _ in range(n_neg)] if hard else sampler.negatives(rng, n_neg)
        out[u] = [(tuple(o), 1) for o in pos] + [(tuple(o), 0) for o in negs]
    return out


def oracle_score(dataset: Dataset, user: int, outfit: Sequence[int]) -> float:
    """cos(hidden user style, mean hidden style of the outfit's items)."""
    if dataset.oracle is None:
        raise DataError("dataset has no oracle section")
    z = dataset.oracle.style_of(user, dataset.n_users)
    m = dataset.oracle.item_style[list(outfit)].mean(axis=0)
    return float(z @ m / (np.linalg.norm(z) * np.linalg.norm(m)))


# ---------------------------------------------------------------- audits

def audit_dataset(dataset: Dataset) -> list:
    """Protocol violations as readable strings; empty when the world conforms."""
    problems = []
    n_items = dataset.n_items
    for j, o in enumerate(dataset.outfits):
        if not o:
            problems.append(f"outfit {j} is empty")
        elif min(o) < 0 or max(o) >= n_items:
            problems.append(f"outfit {j} references an unknown item")
    for u in range(dataset.n_users):
        parts = {s: dataset.splits[s][u] for s in SPLITS}
        all_ids = [j for ids in parts.values() for j in ids]
        if len(set(all_ids)) != len(all_ids):
            problems.append(f"user {u}: splits overlap")
        if any(not 0 <= j < len(dataset.outfits) for j in all_ids):
            problems.append(f"user {u}: unresolvable outfit id")
            continue
        total = len(all_ids)
        exp_train, exp_val, exp_test = _split_counts(total)
        n_val = len(parts["val_teacher"]) + len(parts["val_student"])
        if (len(parts["train"]), n_val, len(parts["test"])) != (exp_train, exp_val, exp_test):
            problems.append(f"user {u}: split sizes {len(parts['train'])}/{n_val}/{len(parts['test'])} "
                            f"are not 9:2:2 of {total}")
        if abs(len(parts["val_teacher"]) - len(parts["val_student"])) > 1:
            problems.append(f"user {u}: validation halves differ by more than one")
        train_items = {i for j in parts["train"] for i in dataset.outfits[j]}
        test_items = {i for j in parts["test"] for i in dataset.outfits[j]}
        if train_items & test_items:
            problems.append(f"user {u}: {len(train_items & test_items)} items shared by train and test")
    return problems


# ---------------------------------------------------------------- file format

def _fmt(v) -> str:
    return " ".join(f"{float(x):.9g}" for x in v)


def save_dataset(dataset: Dataset, path) -> None:
    lines = [FORMAT_TAG, f"version {FORMAT_VERSION}", f"seed {dataset.seed}",
             f"config {json.dumps(dataset.config, sort_keys=True)}",
             f"categories {' '.join(dataset.categories)}"]
    lines.append(f"[items {dataset.n_items}]")
    for i in range(dataset.n_items):
        lines.append(f"{i} {int(dataset.item_category[i])} {_fmt(dataset.features[i])}")
    lines.append(f"[outfits {len(dataset.outfits)}]")
    for j, o in enumerate(dataset.outfits):
        lines.append(f"{j} {' '.join(str(int(i)) for i in o)}")
    users = [(u, "warm") for u in range(dataset.n_users)] + [(c, "cold") for c in dataset.cold_users]
    lines.append(f"[users {len(users)}]")
    lines.extend(f"{u} {kind}" for u, kind in users)
    split_rows = []
    for s in SPLITS:
        for u, ids in enumerate(dataset.splits[s]):
            split_rows.append(f"{u} {s} {','.join(map(str, ids))}")
    for c in dataset.cold_users:
        split_rows.append(f"{c} profile {','.join(map(str, dataset.cold[c]['profile']))}")
        split_rows.append(f"{c} cold_test {','.join(map(str, dataset.cold[c]['test']))}")
    lines.append(f"[splits {len(split_rows)}]")
    lines.extend(split_rows)
    if dataset.oracle is not None:
        o = dataset.oracle
        rows = ([f"user {u} {_fmt(o.user_style[u])}" for u in range(len(o.user_style))]
                + [f"cold {c} {_fmt(o.cold_style[c])}" for c in range(len(o.cold_style))]
                + [f"item {i} {_fmt(o.item_style[i])}" for i in range(len(o.item_style))])
        lines.append(f"[oracle {len(rows)}]")
        lines.extend(rows)
    lines.append("[end]")
    Path(path).write_text("\n".join(lines) + "\n")


def _section_header(line: str):
    if not (line.startswith("[") and line.endswith("]")):
        return None
    parts = line[1:-1].split()
    return parts[0], int(parts[1]) if len(parts) > 1 else 0


def load_dataset(path) -> Dataset:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0] != FORMAT_TAG:
        raise DatasetFormatError("header", "missing format tag")
    meta, i = {}, 1
    while i < len(lines) and not lines[i].startswith("["):
        key, _, value = lines[i].partition(" ")
        meta[key] = value
        i += 1
    if meta.get("version") != str(FORMAT_VERSION):
        raise DatasetFormatError("header", f"unsupported version {meta.get('version')!r}")
    try:
        seed = int(meta["seed"])
        config = json.loads(meta["config"])
        categories = meta["categories"].split()
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError("header", f"bad header field: {exc}") from None

    sections: dict = {}
    ended = False
    while i < len(lines):
        head = _section_header(lines[i])
        if head is None:
            raise DatasetFormatError("?", f"line {i + 1}: expected a section header, got {lines[i][:40]!r}")
        name, count = head
        if name == "end":
            ended = True
            break
        body = lines[i + 1: i + 1 + count]
        if len(body) < count or any(_section_header(b) for b in body):
            got = next((k for k, b in enumerate(body) if _section_header(b)), len(body))
            raise DatasetFormatError(name, f"expected {count} records, found {got} (truncated file?)")
        sections[name] = body
        i += 1 + count
    missing = [s for s in ("items", "outfits", "users", "splits") if s not in sections]
    if missing:
        raise DatasetFormatError(missing[0], "section missing (truncated file?)")
    if not ended:
        raise DatasetFormatError(list(sections)[-1], "file ends without [end] marker (truncated file?)")

    try:
        rows = [r.split() for r in sections["items"]]
        item_category = np.array([int(r[1]) for r in rows], dtype=np.intp)
        features = np.array([r[2:] for r in rows], dtype=np.float64).astype(np.float32)
    except (ValueError, IndexError) as exc:
        raise DatasetFormatError("items", str(exc)) from None
    try:
        outfits = [tuple(int(x) for x in r.split()[1:]) for r in sections["outfits"]]
    except ValueError as exc:
        raise DatasetFormatError("outfits", str(exc)) from None
    warm, cold_ids = [], []
    for r in sections["users"]:
        uid, kind = r.split()
        (warm if kind == "warm" else cold_ids).append(int(uid))
    n_users = len(warm)
    splits = {s: [[] for _ in range(n_users)] for s in SPLITS}
    cold = {c: {"profile": [], "test": []} for c in cold_ids}
    for r in sections["splits"]:
        parts = r.split(" ")
        try:
            uid, s = int(parts[0]), parts[1]
            ids = [int(x) for x in parts[2].split(",")] if len(parts) > 2 and parts[2] else []
        except (ValueError, IndexError) as exc:
            raise DatasetFormatError("splits", str(exc)) from None
        if s in SPLITS:
            splits[s][uid] = ids
        elif s in COLD_SPLITS:
            cold[uid]["profile" if s == "profile" else "test"] = ids
        else:
            raise DatasetFormatError("splits", f"unknown split {s!r}")
    oracle = None
    if "oracle" in sections:
        groups = {"user": [], "cold": [], "item": []}
        for r in sections["oracle"]:
            parts = r.split()
            groups[parts[0]].append([float(x) for x in parts[2:]])
        dim = config.get("style_dim", 0)
        oracle = Oracle(*(np.array(groups[k], dtype=np.float64).astype(np.float32).reshape(-1, dim)
                          for k in ("user", "item", "cold")))
    return Dataset(categories=categories, item_category=item_category, features=features,
                   outfits=outfits, n_users=n_users, splits=splits, cold=cold, oracle=oracle,
                   seed=seed, config=config)
