#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the numpy fallback.

Usage:
    python benchmarks/bench_backends.py [--repeats N]

Times the dispatched primitives at training-realistic shapes plus a full
training step (forward + loss + backward + optimizer) for the default and
small architectures at 64x64.
"""
import argparse
import time

import numpy as np

from metareg import backend
from metareg.data import DomainSpec, make_pair
from metareg.loss import LossConfig, local_cc, total_loss
from metareg.model import ArchSpec, backward, forward, init_params
from metareg.optim import adam_init
from metareg.train import train_step
from metareg import kernels as K


def timeit(fn, repeats):
    fn()  # warmup
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1e3


def build_cases(repeats):
    rng = np.random.default_rng(0)
    cases = []

    for ci, h, w, co, stride in [(16, 64, 64, 32, 1), (32, 32, 32, 32, 2),
                                 (48, 64, 64, 16, 1)]:
        x = rng.standard_normal((ci, h, w))
        wt = rng.standard_normal((co, ci, 3, 3))
        b = rng.standard_normal(co)
        gy = rng.standard_normal(K.conv2d(x, wt, b, stride).shape)
        label = f"conv {ci:2d}->{co:2d} s{stride} {h}x{w}"
        cases.append((f"{label} fwd", lambda x=x, wt=wt, b=b, s=stride:
                      K.conv2d(x, wt, b, s), repeats))
        cases.append((f"{label} bwd", lambda x=x, wt=wt, gy=gy, s=stride:
                      K.conv2d_backward(x, wt, gy, s), repeats))

    m = rng.random((256, 256))
    field = np.ascontiguousarray(rng.standard_normal((2, 256, 256)) * 4)
    go = rng.standard_normal((256, 256))
    cases.append(("warp 256x256 fwd", lambda: K.warp_bilinear(m, field), repeats))
    cases.append(("warp 256x256 bwd",
                  lambda: K.warp_bilinear_backward(m, field, go), repeats))

    f_img = rng.random((256, 256))
    w_img = rng.random((256, 256))
    cases.append(("local_cc 256x256 (win 9)",
                  lambda: local_cc(f_img, w_img, LossConfig()), repeats))
    return cases


def full_step_case(arch, label, repeats):
    sample = make_pair(DomainSpec(texture_kind="blobs"), 7)
    params = init_params(arch, 0)
    adam = adam_init(params, lr=1e-3)
    cfg = LossConfig()
    state = {"p": params, "a": adam}

    def step():
        state["p"], state["a"], _ = train_step(state["p"], state["a"], sample, cfg)

    return (f"train step 64x64 ({label})", step, max(repeats // 2, 5))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=30)
    args = ap.parse_args()

    names = backend.available_backends()
    if len(names) < 2:
        print("note: compiled core not built, timing the numpy fallback only")

    cases = build_cases(args.repeats)
    cases.append(full_step_case(ArchSpec.small(), "small arch", args.repeats))
    cases.append(full_step_case(ArchSpec(), "default arch", args.repeats))

    width = max(len(c[0]) for c in cases)
    header = f"{'kernel':<{width}}" + "".join(f"{n:>12}" for n in names)
    if len(names) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for label, fn, reps in cases:
        times = {}
        for name in names:
            prev = backend.set_backend(name)
            try:
                times[name] = timeit(fn, reps)
            finally:
                backend.set_backend(prev)
        row = f"{label:<{width}}" + "".join(f"{times[n]:>10.3f}ms" for n in names)
        if len(names) == 2:
            row += f"{times['numpy'] / times['cython']:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
