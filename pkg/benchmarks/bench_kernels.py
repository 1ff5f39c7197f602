"""Compiled vs pure-Python kernel backends: per-kernel timings and one full training step.

    python benchmarks/bench_kernels.py [--repeat 20] [--dtype float32] [--json out.json]
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from maskclip import corpus
from maskclip.config import TrainConfig
from maskclip.numerics import kernels
from maskclip.trainer import Trainer


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(dtype):
    rng = np.random.default_rng(0)
    # sizes seen in a desk-config step: 32 images x 17 tokens, 32 captions x 32 tokens
    rows = rng.standard_normal((32 * 32, 64)).astype(dtype)
    gamma = rng.standard_normal(64).astype(dtype)
    beta = rng.standard_normal(64).astype(dtype)
    dy = rng.standard_normal(rows.shape).astype(dtype)
    scores = rng.standard_normal((32 * 4 * 32, 32)).astype(dtype)
    keep = np.tril(np.ones((32, 32), dtype=bool))
    hidden = rng.standard_normal(32 * 32 * 256).astype(dtype)
    dh = rng.standard_normal(hidden.shape).astype(dtype)
    a = rng.standard_normal(32 * 12 * 64).astype(dtype)
    b = rng.standard_normal(a.shape).astype(dtype)

    def ln_back():
        y, mu, rstd = kernels.layer_norm_forward(rows, gamma, beta, 1e-5)
        kernels.layer_norm_backward(dy, rows, gamma, mu, rstd)

    def sm():
        y = kernels.softmax_forward(scores, keep)
        kernels.softmax_backward(y, scores)

    def lsm():
        y = kernels.log_softmax_forward(scores)
        kernels.log_softmax_backward(y, scores)

    return {
        "layer_norm fwd+bwd": ln_back,
        "masked softmax fwd+bwd": sm,
        "log_softmax fwd+bwd": lsm,
        "gelu fwd+bwd": lambda: (kernels.gelu_forward(hidden), kernels.gelu_backward(hidden, dh)),
        "smooth_l1 fwd+bwd": lambda: (kernels.smooth_l1_forward(a, b, 2.0),
                                      kernels.smooth_l1_backward(a, b, 2.0, a)),
    }


def train_step_case(dtype, objective):
    cfg = TrainConfig(objective=objective, precision=np.dtype(dtype).name, epochs=1000)
    trainer = Trainer(cfg, corpus.build_corpus(32, 1))
    idx = np.arange(32)
    return lambda: trainer.train_step(idx)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--dtype", default="float64", choices=("float64", "float32"))
    p.add_argument("--json")
    args = p.parse_args(argv)
    backends = kernels.available_backends()
    results = {}
    for name in backends:
        with kernels.use_backend(name):
            for label, fn in kernel_cases(args.dtype).items():
                results.setdefault(label, {})[name] = best_of(fn, args.repeat)
            for objective in ("clip", "maskclip"):
                label = f"train step ({objective}, batch 32)"
                results.setdefault(label, {})[name] = best_of(train_step_case(args.dtype, objective),
                                                              max(3, args.repeat // 5))
    header = f"{'case':32s}" + "".join(f"{b:>14s}" for b in backends) + ("     speedup" if len(backends) > 1 else "")
    print(f"dtype={args.dtype}, best of {args.repeat}, milliseconds")
    print(header)
    for label, row in results.items():
        line = f"{label:32s}" + "".join(f"{row[b] * 1e3:14.3f}" for b in backends)
        if "compiled" in row and "python" in row:
            line += f"{row['python'] / row['compiled']:11.2f}x"
        print(line)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"dtype": args.dtype, "seconds": results}, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
