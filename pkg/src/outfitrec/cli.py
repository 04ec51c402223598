"""Command-line entry point.

Every subcommand accepts ``--config FILE`` with flat ``key = value`` lines
whose keys match the long flag names; flags given on the command line win.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import types
import typing
from pathlib import Path

from . import __version__
from .coldstart import load_profiles
from .datagen import WorldConfig, generate_world, load_dataset, save_dataset
from .encoder import load_checkpoint
from .errors import ConfigError, DataError, OutfitRecError
from .harness import (SWEEPS, RunConfig, build_teacher_cache, coldstart_cmd, evaluate_cmd,
                      export_embeddings, sweep, train_student, train_teacher)
from .objectives import TeacherCache

log = logging.getLogger("outfitrec")


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _optional_float(text):
    return None if str(text).lower() in ("", "none") else float(text)


def _csv_tuple(text):
    return tuple(p.strip() for p in str(text).split(",") if p.strip())


def _converter(tp):
    if tp is bool:
        return parse_bool
    if tp is tuple:
        return _csv_tuple
    if isinstance(tp, types.UnionType) or typing.get_origin(tp) is typing.Union:
        return _optional_float
    return tp


def add_dataclass_flags(parser: argparse.ArgumentParser, cls, skip=()) -> None:
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        conv = _converter(hints[f.name])
        flag = "--" + f.name.replace("_", "-")
        kw = dict(dest=f.name, type=conv, default=argparse.SUPPRESS, help=f"(default: {f.default})")
        if conv is parse_bool:
            kw.update(nargs="?", const=True)
        parser.add_argument(flag, **kw)


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _merge(cls, file_vals: dict, cli_vals: dict, skip=()):
    """Instantiate ``cls`` from config-file values overlaid with CLI values."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.name not in skip}
    kw = {}
    for k, v in file_vals.items():
        if k in names:
            kw[k] = _converter(hints[k])(v)
    kw.update({k: v for k, v in cli_vals.items() if k in names})
    return kw


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="outfitrec", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="flat key=value file; CLI flags override it")
        return sp

    g = cmd("gen", "generate a synthetic world")
    add_dataclass_flags(g, WorldConfig)
    g.add_argument("--out", default=argparse.SUPPRESS)

    for name in ("train-teacher", "train-student"):
        t = cmd(name, f"{name.split('-')[1]} training run")
        add_dataclass_flags(t, RunConfig, skip=("dataset",))
        t.add_argument("--data", "--dataset", dest="dataset", default=argparse.SUPPRESS)

    c = cmd("cache", "build the teacher cache of positive boundaries")
    c.add_argument("--teacher", default=argparse.SUPPRESS)
    c.add_argument("--data", dest="dataset", default=argparse.SUPPRESS)
    c.add_argument("--out", default=argparse.SUPPRESS)

    e = cmd("eval", "evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", default=argparse.SUPPRESS)
    e.add_argument("--data", dest="dataset", default=argparse.SUPPRESS)
    e.add_argument("--split", default=argparse.SUPPRESS)
    e.add_argument("--mode", choices=("standard", "hard"), default=argparse.SUPPRESS)
    e.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    e.add_argument("--ratio", type=int, default=argparse.SUPPRESS)
    e.add_argument("--out", default=argparse.SUPPRESS)

    cs = cmd("coldstart", "cold-start evaluation")
    cs.add_argument("--checkpoint", default=argparse.SUPPRESS)
    cs.add_argument("--data", dest="dataset", default=argparse.SUPPRESS)
    cs.add_argument("--profiles", default=argparse.SUPPRESS, help="cold-profile file (default: the dataset's)")
    cs.add_argument("--k", type=int, default=argparse.SUPPRESS)
    cs.add_argument("--strategy", choices=("avg", "w-avg"), default=argparse.SUPPRESS)
    cs.add_argument("--tau-wavg", dest="tau_wavg", type=float, default=argparse.SUPPRESS)
    cs.add_argument("--delta", type=float, default=argparse.SUPPRESS)
    cs.add_argument("--repetitions", type=int, default=argparse.SUPPRESS)
    cs.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    cs.add_argument("--out", default=argparse.SUPPRESS)

    x = cmd("export", "export user and outfit embeddings")
    x.add_argument("--checkpoint", default=argparse.SUPPRESS)
    x.add_argument("--data", dest="dataset", default=argparse.SUPPRESS)
    x.add_argument("--out", default=argparse.SUPPRESS)

    s = cmd("sweep", "grid sweep over one student setting")
    s.add_argument("--kind", choices=SWEEPS, default=argparse.SUPPRESS)
    s.add_argument("--values", type=lambda t: [v.strip() for v in t.split(";") if v.strip()],
                   default=argparse.SUPPRESS, help="';'-separated values, e.g. '0.5;1;2' or 'erase,replace;identity,erase'")
    add_dataclass_flags(s, RunConfig, skip=("dataset",))
    s.add_argument("--data", "--dataset", dest="dataset", default=argparse.SUPPRESS)
    return p


_DEFAULTS = {
    "eval": {"split": "test", "mode": "standard", "seed": 0, "ratio": 10},
    "coldstart": {"k": 1, "strategy": "w-avg", "tau_wavg": 0.2, "delta": 0.0, "repetitions": 10, "seed": 0},
}


def _settings(command: str, file_vals: dict, cli_vals: dict) -> dict:
    out = dict(_DEFAULTS.get(command, {}))
    for k, v in file_vals.items():
        if k in out and not isinstance(out[k], str):
            v = type(out[k])(v)
        out[k] = v
    out.update(cli_vals)
    return out


def _require(settings: dict, *names):
    for n in names:
        if not settings.get(n):
            raise ConfigError(f"--{n.replace('_', '-')} is required")


def run(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    file_vals = read_config_file(args.config) if args.config else {}
    cli_vals = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    cmd = args.command

    if cmd == "gen":
        cfg = WorldConfig(**_merge(WorldConfig, file_vals, cli_vals))
        out = cli_vals.get("out") or file_vals.get("out")
        if not out:
            raise ConfigError("--out is required")
        save_dataset(generate_world(cfg), out)
        print(f"wrote {out} (seed={cfg.seed})")
        return 0

    if cmd in ("train-teacher", "train-student", "sweep"):
        kw = _merge(RunConfig, file_vals, cli_vals)
        if cmd == "train-teacher":
            kw.update(mode="teacher", tier="teacher", loss="npair")
        cfg = RunConfig(**kw)
        _require(vars(cfg), "dataset", "out")
        ds = load_dataset(cfg.dataset)
        if cmd == "train-teacher":
            _, rep = train_teacher(cfg, ds, out_dir=cfg.out)
        elif cmd == "train-student":
            _, rep = train_student(cfg, ds, out_dir=cfg.out)
        else:
            st = _settings("sweep", file_vals, cli_vals)
            _require(st, "kind", "values")
            values = st["values"] if isinstance(st["values"], list) else [v for v in st["values"].split(";") if v]
            cache = None
            if cfg.uses_teacher and cfg.signal_override is None:
                _require(vars(cfg), "teacher")
                cache = (TeacherCache.load(cfg.cache, ds.features) if cfg.cache
                         else build_teacher_cache(cfg.teacher, ds))
            sweep(st["kind"], values, cfg, ds, cache, out_dir=cfg.out)
            print((Path(cfg.out) / "summary.txt").read_text(), end="")
            return 0
        print(rep.table(), end="")
        return 0

    st = _settings(cmd, file_vals, cli_vals)
    if cmd == "cache":
        _require(st, "teacher", "dataset", "out")
        ds = load_dataset(st["dataset"])
        cache = build_teacher_cache(st["teacher"], ds)
        cache.save(st["out"], st["teacher"])
        print(f"wrote {st['out']} ({len(cache.positive_mean)} users)")
        return 0

    _require(st, "checkpoint", "dataset")
    m = load_checkpoint(st["checkpoint"])
    ds = load_dataset(st["dataset"])
    if cmd == "eval":
        rep = evaluate_cmd(m, ds, st["split"], st["mode"], int(st["seed"]), int(st["ratio"]), st.get("out"))
    elif cmd == "coldstart":
        profiles = load_profiles(st["profiles"]) if st.get("profiles") else None
        rep = coldstart_cmd(m, ds, int(st["k"]), st["strategy"], int(st["repetitions"]), int(st["seed"]),
                            float(st["tau_wavg"]), float(st["delta"]), profiles, out_dir=st.get("out"))
    elif cmd == "export":
        _require(st, "out")
        rows = export_embeddings(m, ds, st["out"])
        print(f"wrote {rows} rows to {st['out']}")
        return 0
    else:  # pragma: no cover - argparse restricts the choices
        raise ConfigError(f"unknown command {cmd}")
    print(rep.table(), end="")
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except OutfitRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
