"""Compare the numba and numpy kernel paths.

    python benchmarks/bench_kernels.py            # per-kernel timings
    python benchmarks/bench_kernels.py --step     # plus one training step per backend

Kernel timings call both implementations directly. The training-step timing
runs a subprocess per backend because the binding is chosen at import time
from ``OUTFITREC_NUMBA``.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from outfitrec import _kernels as k

STEP_SCRIPT = """
import time, numpy as np
from outfitrec import _kernels
from outfitrec.datagen import WorldConfig, generate_world
from outfitrec.harness import RunConfig, train
ds = generate_world(WorldConfig(n_users=8, positives_per_user=26, n_cold_users=0))
cfg = RunConfig(tier="XS", d={d}, heads={heads}, epochs=1, seed=0)
train(cfg.replace(epochs=0), ds)  # warm-up and jit compilation
t = time.perf_counter()
_, rep = train(cfg, ds)
print(_kernels.backend(), (time.perf_counter() - t) / len(rep.step_losses) * 1e3)
"""


def _cases(rng, dtype):
    # shapes follow one batch of 32 pairs x 33 outfits of 3 items at d=128, h=8
    att = rng.standard_normal((1056 * 8 * 3, 3)).astype(dtype)
    mask = rng.random(att.shape) < 0.8
    mask[:, 0] = True
    ln = rng.standard_normal((1056 * 3, 128)).astype(dtype)
    gain, bias = np.ones(128, dtype), np.zeros(128, dtype)
    _, xhat, rstd = k.layer_norm_fwd_np(ln, gain, bias, 1e-5)
    pos, neg = rng.random(6), rng.random(60)
    y = k.softmax_rows_np(att)
    return {
        "softmax_rows": ((att,), k.softmax_rows_np, getattr(k, "softmax_rows_nb", None)),
        "masked_softmax_rows": ((att, mask), k.masked_softmax_rows_np, getattr(k, "masked_softmax_rows_nb", None)),
        "softmax_rows_bwd": ((y, att), k.softmax_rows_bwd_np, getattr(k, "softmax_rows_bwd_nb", None)),
        "layer_norm_fwd": ((ln, gain, bias, 1e-5), k.layer_norm_fwd_np, getattr(k, "layer_norm_fwd_nb", None)),
        "layer_norm_bwd": ((ln, xhat, rstd, gain), k.layer_norm_bwd_np, getattr(k, "layer_norm_bwd_nb", None)),
        "auc_count": ((pos, neg), k.auc_count_np, getattr(k, "auc_count_nb", None)),
    }


def _best_ms(fn, args, number):
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=5)) / number * 1e3


def bench_kernels(dtype, number):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}   ({np.dtype(dtype).name})")
    for name, (args, np_fn, nb_fn) in _cases(rng, dtype).items():
        t_np = _best_ms(np_fn, args, number)
        if nb_fn is None:
            print(f"{name:<22}{t_np:>10.3f}{'n/a':>10}")
            continue
        nb_fn(*args)  # compile
        t_nb = _best_ms(nb_fn, args, number)
        print(f"{name:<22}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.2f}x")


def bench_step(d, heads):
    script = STEP_SCRIPT.format(d=d, heads=heads)
    for flag in ("0", "1"):
        env = dict(os.environ, OUTFITREC_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", script], env=env, capture_output=True, text=True, check=True)
        backend, ms = out.stdout.split()
        print(f"training step, backend={backend:<6} {float(ms):8.1f} ms/step (d={d}, heads={heads})")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--number", type=int, default=20, help="calls per timing repeat")
    p.add_argument("--step", action="store_true", help="also time a full training step per backend")
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--heads", type=int, default=8)
    args = p.parse_args(argv)
    if not k.NUMBA_AVAILABLE:
        print("numba is not importable; only the numpy path is timed")
    for dtype in (np.float32, np.float64):
        bench_kernels(dtype, args.number)
        print()
    if args.step:
        bench_step(args.d, args.heads)


if __name__ == "__main__":
    main()
