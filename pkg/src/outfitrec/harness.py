"""Experiment orchestration: training, teacher caches, evaluation, cold start,
embedding export and grid sweeps.

Every run draws from independent random streams spawned from one seed
(initialization, batch order, negatives, augmentation, evaluation), so two
runs that differ only in how a loss treats its inputs consume identical
randomness and can be compared step by step.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .augment import SimilarityIndex, make_views, parse_pair, train_autoencoder
from .coldstart import ColdProfile, ColdStartConfig, ColdStartScorer
from .datagen import Dataset, NegativeSampler, build_eval_set
from .diffcore import Tensor
from .encoder import (TIER_WIDTHS, EncoderConfig, ModelParams, encode_batch, encode_many,
                      init_model, load_checkpoint, pack_outfits, project, save_checkpoint)
from .errors import ConfigError, DataError, TrainingDivergenceError
from .metrics import EvalResult, evaluate
from .objectives import (LossConfig, TeacherCache, bpr_loss, cl_loss, fnd_cl_loss, fnd_loss,
                         npair_loss)

log = logging.getLogger(__name__)

LOSSES = ("bpr", "npair", "fnd", "fnd_cl")
MODES = ("teacher", "student")
ALPHA_GRID = (0.5, 1.0, 1.25, 1.5, 2.0)
REFERENCE_BATCH = 32

@dataclass
class RunConfig:
    dataset: str = ""
    mode: str = "student"
    loss: str = "npair"
    tau_fnd: float = 0.1
    tau_cl: float = 0.1
    alpha: float = 1.25
    lam: float = 0.2
    tier: str = "S"
    d: int = 128
    heads: int = 8
    pair: str = "erase,replace"
    batch_size: int = 32
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    hard: bool = False
    shared_negatives: bool = False
    teacher: str = ""
    cache: str = ""
    replace_k: int = 5
    ae_epochs: int = 30
    eval_ratio: int = 10
    signal_override: float | None = None
    out: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if self.tier not in TIER_WIDTHS:
            raise ConfigError(f"unknown tier {self.tier!r}")
        if self.mode == "teacher" and (self.loss != "npair" or self.tier != "teacher"):
            raise ConfigError("teacher runs use loss=npair and tier=teacher")
        if self.mode == "student" and self.tier == "teacher":
            raise ConfigError("student runs need a student tier (XS, S or M)")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_ratio < 1:
            raise ConfigError("batch_size and eval_ratio must be >= 1 and epochs >= 0")
        if self.loss == "fnd_cl":
            parse_pair(self.pair)
        self.loss_config  # validates temperatures, alpha, lambda

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(self.tau_fnd, self.tau_cl, self.alpha, self.lam)

    @property
    def uses_teacher(self) -> bool:
        return self.loss in ("fnd", "fnd_cl")

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ExperimentReport:
    config: dict
    seed: int
    epochs: list = field(default_factory=list)
    test: dict = field(default_factory=dict)
    best_epoch: int = 0
    wall_clock: float = 0.0
    step_losses: list = field(default_factory=list)
    fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def records(self) -> list:
        """Flat ``key=value`` pairs; the config appears with a ``config.`` prefix."""
        rows = [(f"config.{k}", v) for k, v in self.config.items()]
        rows += [("seed", self.seed), ("best_epoch", self.best_epoch),
                 ("wall_clock_s", round(self.wall_clock, 3)), ("fingerprint", self.fingerprint)]
        for e in self.epochs:
            rows.append((f"epoch.{e['epoch']}.train_loss", e["train_loss"]))
            rows.append((f"epoch.{e['epoch']}.val_auc", e["val_auc"]))
        rows += [(f"test.{k}", v) for k, v in self.test.items()]
        rows += [(k, v) for k, v in self.extra.items()]
        return rows

    def table(self) -> str:
        lines = [f"seed {self.seed}  best epoch {self.best_epoch}  wall {self.wall_clock:.1f}s"]
        if self.epochs:
            lines.append(f"{'epoch':>5}  {'train_loss':>12}  {'val_auc':>8}")
        for e in self.epochs:
            lines.append(f"{e['epoch']:>5}  {e['train_loss']:>12.6f}  {e['val_auc']:>8.4f}")
        for k, v in list(self.test.items()) + list(self.extra.items()):
            lines.append(f"{k:>18}: {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, name: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.txt").write_text(self.table())
        (out / f"{name}.kv").write_text("".join(f"{k}={_fmt(v)}\n" for k, v in self.records()))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def _streams(seed: int) -> list:
    """Independent generators: init, batch order, negatives, augmentation, evaluation."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)]


# ---------------------------------------------------------------- scoring helpers

def model_scorer(m: ModelParams, features: np.ndarray, eval_sets: dict):
    """Encode every outfit in ``eval_sets`` once and return ``score_fn(user, outfits)``."""
    uniq: dict = {}
    for cands in eval_sets.values():
        for o, _ in cands:
            uniq.setdefault(tuple(o), len(uniq))
    O = encode_many(list(uniq), features, m).astype(np.float64)
    O /= dc._norms(O)[:, None]
    U = m.tensors["user.emb"].astype(np.float64)
    U = U / dc._norms(U)[:, None]

    def score_fn(user, outfits):
        return O[[uniq[tuple(o)] for o in outfits]] @ U[user]

    return score_fn


def evaluate_model(m: ModelParams, dataset: Dataset, eval_sets: dict) -> EvalResult:
    return evaluate(model_scorer(m, dataset.features, eval_sets), eval_sets)


def random_scorer(seed: int):
    rng = np.random.default_rng(seed)
    return lambda user, outfits: rng.random(len(outfits))


# ---------------------------------------------------------------- training

def _pair_scores(P: dict, users: np.ndarray, outfits: list, cfg: EncoderConfig, features,
                 n_pos: int, k: int):
    """Positive scores ``(n,)`` and negative scores ``(n, k)`` from one encoder call."""
    feats, mask = pack_outfits(outfits, features, cfg.max_outfit_size)
    O = encode_batch(feats, mask, P, cfg)
    n = len(users)
    pos_o = dc.take_rows(O, np.arange(n_pos))
    neg_o = dc.take_rows(O, np.arange(n_pos, len(outfits)))
    pos = dc.cosine_rows(dc.take_rows(P["user.emb"], users), pos_o)
    neg = dc.cosine_rows(dc.take_rows(P["user.emb"], np.repeat(users, k)), neg_o)
    return pos, dc.reshape(neg, (n, k))


def _shared_scores(P: dict, users: np.ndarray, outfits: list, cfg: EncoderConfig, features, n_pos: int):
    """Like ``_pair_scores`` but every pair scores the same negative pool."""
    feats, mask = pack_outfits(outfits, features, cfg.max_outfit_size)
    O = encode_batch(feats, mask, P, cfg)
    pos_o = dc.take_rows(O, np.arange(n_pos))
    neg_o = dc.normalize_rows(dc.take_rows(O, np.arange(n_pos, len(outfits))))
    U = dc.take_rows(P["user.emb"], users)
    pos = dc.cosine_rows(U, pos_o)
    return pos, dc.matmul(dc.normalize_rows(U), dc.transpose(neg_o, (1, 0)))


def _view_embeddings(P: dict, views: list, cfg: EncoderConfig, features) -> Tensor:
    feats, mask = pack_outfits(views, features, cfg.max_outfit_size)
    return project(encode_batch(feats, mask, P, cfg), P)


def build_similarity_index(dataset: Dataset, epochs: int = 30, seed: int = 0) -> SimilarityIndex:
    ae = train_autoencoder(dataset.features, epochs=epochs, lr=0.01, seed=seed)
    return SimilarityIndex.build(ae, dataset.features, dataset.item_category)


def train(cfg: RunConfig, dataset: Dataset, cache: TeacherCache | None = None,
          index: SimilarityIndex | None = None, out_dir=None):
    """Train one model; returns ``(best params, report)``.

    Model selection keeps the parameters with the best validation AUC
    (val_teacher for teachers, val_student for students), the
    initialization included.
    """
    start = time.perf_counter()
    if cfg.uses_teacher and cache is None and cfg.signal_override is None:
        raise ConfigError(f"loss={cfg.loss} needs a teacher cache")
    if cache is not None and cache.teacher.config.tier != "teacher":
        raise ConfigError("the teacher cache must come from a teacher-tier checkpoint")
    teacher_fp = cache.teacher.fingerprint() if cache is not None else None
    rng_init, rng_batch, rng_neg, rng_aug, rng_eval = _streams(cfg.seed)
    pair = parse_pair(cfg.pair) if cfg.loss == "fnd_cl" else None
    if pair is not None and index is None and "replace" in {p.value for p in pair}:
        index = build_similarity_index(dataset, cfg.ae_epochs, cfg.seed)

    enc_cfg = EncoderConfig(d_in=dataset.features.shape[1], n_users=dataset.n_users, d=cfg.d,
                            heads=cfg.heads, tier=cfg.tier, max_outfit_size=dataset.max_outfit_size)
    params = init_model(enc_cfg, rng_init)
    features = dataset.features.astype(params.dtype, copy=False)
    sampler = NegativeSampler(dataset)
    val_split = "val_teacher" if cfg.mode == "teacher" else "val_student"
    val_sets = build_eval_set(dataset, val_split, rng_eval, cfg.eval_ratio, cfg.hard, sampler)
    test_seed = int(rng_eval.integers(2**63))

    pairs = np.array([(u, j) for u in range(dataset.n_users) for j in dataset.splits["train"][u]],
                     dtype=np.intp).reshape(-1, 2)
    if not len(pairs):
        raise DataError("the train split is empty")
    lcfg = cfg.loss_config
    k = cfg.batch_size
    opt = dc.SGD(cfg.lr, cfg.momentum)

    best = params.copy()
    best_auc = evaluate_model(params, dataset, val_sets).mean_auc
    report = ExperimentReport(cfg.as_dict(), cfg.seed)
    report.epochs.append({"epoch": 0, "train_loss": math.nan, "val_auc": best_auc})

    for epoch in range(1, cfg.epochs + 1):
        order = pairs[rng_batch.permutation(len(pairs))]
        total, count = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            chunk = order[s:s + cfg.batch_size]
            users = chunk[:, 0]
            positives = [dataset.outfits[j] for j in chunk[:, 1]]
            P = params.wrap(requires_grad=True)
            if cfg.shared_negatives:
                pool = sampler.shared(users, rng_neg, k, cfg.hard)
                negatives = [pool] * len(users)
                pos, neg = _shared_scores(P, users, positives + pool, enc_cfg, features, len(users))
            else:
                negatives = [sampler.mixed(int(u), rng_neg, k, cfg.hard) for u in users]
                pos, neg = _pair_scores(P, users, positives + [o for negs in negatives for o in negs],
                                        enc_cfg, features, len(users), k)
            if cfg.loss == "bpr":
                loss = bpr_loss(dc.broadcast_to(dc.reshape(pos, (len(users), 1)), neg.shape), neg, lcfg.tau_fnd)
            elif cfg.loss == "npair":
                loss = npair_loss(pos, neg, lcfg.tau_fnd)
            else:
                if cfg.signal_override is not None:
                    signals = np.full(neg.shape, cfg.signal_override)
                else:
                    signals = cache.signals(users, negatives, lcfg.alpha)
                loss = fnd_loss(pos, neg, signals.astype(neg.dtype), lcfg.tau_fnd)
                if cfg.loss == "fnd_cl":
                    views = []
                    for o in positives:
                        views.extend(make_views(o, pair, index, rng_aug, cfg.replace_k))
                    loss = fnd_cl_loss(loss, cl_loss(_view_embeddings(P, views, enc_cfg, features), lcfg.tau_cl),
                                       lcfg.lam)
            value = float(loss.data)
            if not math.isfinite(value):
                _abort(params, out_dir, f"non-finite loss at epoch {epoch}")
            loss.backward()
            try:
                params = ModelParams(enc_cfg, opt.step(params.tensors, {n: t.grad for n, t in P.items()}))
            except TrainingDivergenceError as exc:
                _abort(params, out_dir, str(exc))
            report.step_losses.append(value)
            total += value * len(users)
            count += len(users)
        val_auc = evaluate_model(params, dataset, val_sets).mean_auc
        report.epochs.append({"epoch": epoch, "train_loss": total / count, "val_auc": val_auc})
        log.info("epoch %d loss %.5f val_auc %.4f", epoch, total / count, val_auc)
        if val_auc > best_auc:
            best, best_auc, report.best_epoch = params.copy(), val_auc, epoch

    if teacher_fp is not None and cache.teacher.fingerprint() != teacher_fp:
        raise AssertionError("teacher parameters changed during a student run")
    report.test = test_metrics(best, dataset, test_seed, cfg.eval_ratio)
    report.fingerprint = best.fingerprint()
    report.extra["final_fingerprint"] = params.fingerprint()
    report.wall_clock = time.perf_counter() - start
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(best, out / "model.ckpt")
        report.write(out)
    return best, report


def _abort(params: ModelParams, out_dir, why: str):
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, Path(out_dir) / "last_finite.ckpt")
    raise TrainingDivergenceError(f"training diverged: {why}")


def test_metrics(m: ModelParams, dataset: Dataset, seed: int, ratio: int = 10) -> dict:
    """Standard and hard-negative test metrics on eval sets drawn from ``seed``."""
    out = {}
    sampler = NegativeSampler(dataset)
    for hard in (False, True):
        sets = build_eval_set(dataset, "test", np.random.default_rng(seed), ratio, hard, sampler)
        res = evaluate_model(m, dataset, sets)
        tag = "_hard" if hard else ""
        out[f"auc{tag}"], out[f"ndcg{tag}"] = res.mean_auc, res.mean_ndcg
    return out


test_metrics.__test__ = False  # not a pytest test despite the name


def train_teacher(cfg: RunConfig, dataset: Dataset, out_dir=None):
    if cfg.mode != "teacher":
        cfg = cfg.replace(mode="teacher", tier="teacher", loss="npair")
    return train(cfg, dataset, out_dir=out_dir)


def build_teacher_cache(teacher, dataset: Dataset) -> TeacherCache:
    """Positive-boundary cache for a frozen teacher (a checkpoint path or params)."""
    if not isinstance(teacher, ModelParams):
        teacher = load_checkpoint(teacher)
    if teacher.config.tier != "teacher":
        raise ConfigError("a teacher cache needs a teacher-tier checkpoint")
    return TeacherCache.build(teacher, dataset)


def train_student(cfg: RunConfig, dataset: Dataset, cache: TeacherCache | None = None,
                  index: SimilarityIndex | None = None, out_dir=None):
    if cfg.mode != "student":
        raise ConfigError("train_student needs mode=student")
    if cfg.uses_teacher and cache is None and cfg.signal_override is None:
        if not cfg.teacher:
            raise ConfigError(f"loss={cfg.loss} needs a teacher checkpoint")
        cache = (TeacherCache.load(cfg.cache, dataset.features) if cfg.cache
                 else build_teacher_cache(cfg.teacher, dataset))
    return train(cfg, dataset, cache, index, out_dir)


# ---------------------------------------------------------------- evaluation commands

def evaluate_cmd(m: ModelParams, dataset: Dataset, split: str = "test", mode: str = "standard",
                 seed: int = 0, ratio: int = 10, out_dir=None) -> ExperimentReport:
    if mode not in ("standard", "hard"):
        raise ConfigError("eval mode is standard or hard")
    start = time.perf_counter()
    sets = build_eval_set(dataset, split, np.random.default_rng(seed), ratio, mode == "hard")
    if not sets:
        raise DataError(f"split {split!r} has no positives to evaluate")
    res = evaluate_model(m, dataset, sets)
    report = ExperimentReport({"split": split, "mode": mode, "ratio": ratio}, seed,
                              test={"auc": res.mean_auc, "ndcg": res.mean_ndcg,
                                    "n_users": len(res.rows), "n_skipped": len(res.skipped)},
                              fingerprint=m.fingerprint())
    report.wall_clock = time.perf_counter() - start
    if out_dir is not None:
        report.write(out_dir)
        res.write_table(Path(out_dir) / "per_user.tsv")
    return report


def cold_eval_sets(dataset: Dataset, seed: int, ratio: int = 10) -> dict:
    return build_eval_set(dataset, "cold_test", np.random.default_rng(seed), ratio)


def coldstart_cmd(m: ModelParams, dataset: Dataset, k: int, strategy: str = "w-avg",
                  repetitions: int = 10, seed: int = 0, tau_wavg: float = 0.2, delta: float = 0.0,
                  profiles: dict | None = None, ratio: int = 10, out_dir=None) -> ExperimentReport:
    """Mean cold-user AUC over ``repetitions`` random k-outfit profile subsamples."""
    if k < 1 or repetitions < 1:
        raise ConfigError("k and repetitions must be >= 1")
    start = time.perf_counter()
    profiles = profiles if profiles is not None else {c: dataset.cold[c]["profile"] for c in dataset.cold_users}
    for c, ids in profiles.items():
        if any(not 0 <= j < len(dataset.outfits) for j in ids):
            raise DataError(f"cold user {c} references an unknown outfit")
    cfg = ColdStartConfig(delta=delta, tau_wavg=tau_wavg, strategy=strategy)
    rng_sub, rng_eval = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    sets = {c: v for c, v in cold_eval_sets(dataset, int(rng_eval.integers(2**63)), ratio).items()
            if c in profiles}
    aucs, ndcgs, min_neigh = [], [], math.inf
    for _ in range(repetitions):
        chosen = {}
        for c in sorted(profiles):
            ids = list(profiles[c])
            if len(ids) < k:
                log.warning("cold user %d has %d profile outfits (< k=%d); using all", c, len(ids), k)
                pick = ids
            else:
                pick = [ids[i] for i in sorted(rng_sub.choice(len(ids), size=k, replace=False))]
            chosen[c] = ColdProfile(c, [dataset.outfits[j] for j in pick])
        scorer = ColdStartScorer(m, dataset.features, chosen, cfg)
        res = evaluate(scorer, sets)
        aucs.append(res.mean_auc)
        ndcgs.append(res.mean_ndcg)
        min_neigh = min(min_neigh, *scorer.neighborhood_sizes.values())
    report = ExperimentReport({"k": k, "strategy": strategy, "repetitions": repetitions,
                               "tau_wavg": tau_wavg, "delta": delta}, seed,
                              test={"auc": float(np.mean(aucs)), "ndcg": float(np.mean(ndcgs))},
                              fingerprint=m.fingerprint())
    report.extra = {"auc_per_rep": ",".join(f"{a:.6f}" for a in aucs),
                    "min_neighborhood": int(min_neigh)}
    report.wall_clock = time.perf_counter() - start
    if out_dir is not None:
        report.write(out_dir)
    return report


def export_embeddings(m: ModelParams, dataset: Dataset, path, outfit_ids: Sequence[int] | None = None) -> int:
    """Write user and outfit vectors as TSV rows; returns the row count."""
    outfit_ids = list(range(len(dataset.outfits))) if outfit_ids is None else list(outfit_ids)
    owners: dict = {}
    for split in dataset.splits:
        for u, ids in enumerate(dataset.splits[split]):
            for j in ids:
                owners.setdefault(j, set()).add(u)
    O = encode_many([dataset.outfits[j] for j in outfit_ids], dataset.features, m)
    U = m.tensors["user.emb"]
    d = m.config.d
    rows = 0
    with open(path, "w") as fh:
        fh.write("\t".join(["kind", "id", "positive_of"] + [f"v{i}" for i in range(d)]) + "\n")
        for u in range(m.config.n_users):
            fh.write("\t".join(["user", str(u), ""] + [f"{x:.9g}" for x in U[u]]) + "\n")
            rows += 1
        for j, vec in zip(outfit_ids, O):
            who = ",".join(str(u) for u in sorted(owners.get(j, ())))
            fh.write("\t".join(["outfit", str(j), who] + [f"{x:.9g}" for x in vec]) + "\n")
            rows += 1
    return rows


# ---------------------------------------------------------------- sweeps

SWEEPS = ("alpha", "pair", "tier", "batch")


def sweep(kind: str, values: Sequence, base: RunConfig, dataset: Dataset,
          cache: TeacherCache | None = None, index: SimilarityIndex | None = None, out_dir=None) -> list:
    """Train one student per value; returns ``[(value, report), ...]``.

    The batch sweep scales the learning rate linearly with the batch size.
    """
    if kind not in SWEEPS:
        raise ConfigError(f"sweep kind must be one of {SWEEPS}")
    results = []
    for v in values:
        if kind == "alpha":
            cfg = base.replace(alpha=float(v))
        elif kind == "pair":
            a, b = parse_pair(v)
            cfg = base.replace(pair=f"{a.value},{b.value}")
        elif kind == "tier":
            cfg = base.replace(tier=str(v))
        else:
            cfg = base.replace(batch_size=int(v), lr=base.lr * int(v) / REFERENCE_BATCH)
        sub = None if out_dir is None else Path(out_dir) / f"{kind}={_slug(v)}"
        _, rep = train_student(cfg, dataset, cache, index, sub)
        results.append((v, rep))
    if out_dir is not None:
        write_sweep_summary(kind, results, out_dir)
    return results


def _slug(v) -> str:
    return str(v).replace(",", "+").replace(" ", "")


def write_sweep_summary(kind: str, results: list, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{kind:>16}  {'test_auc':>9}  {'test_ndcg':>9}  {'auc_hard':>9}  {'best_epoch':>10}"]
    kv = []
    for v, rep in results:
        t = rep.test
        lines.append(f"{_slug(v):>16}  {t['auc']:>9.4f}  {t['ndcg']:>9.4f}  {t['auc_hard']:>9.4f}  {rep.best_epoch:>10}")
        kv += [f"{kind}={_slug(v)}.test.{m}={val!r}\n" for m, val in t.items()]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    (out / "summary.kv").write_text("".join(kv))
