"""Adam for the inner/task-level updates and the interpolation-toward-
adapted-parameters outer update used by the meta stage.

Everything is value-semantic: steps return new parameter vectors and new
states, so concurrent tasks can each own an independent (params, state)
pair.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .model import ParamVector


@dataclass
class AdamState:
    m: ParamVector
    v: ParamVector
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-4


def adam_init(params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """Fresh state with zero moments, shaped like params.

    lr = 0 is allowed and makes every step an exact no-op, which the
    meta stage's fixed-point behavior relies on.
    """
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    zero = params.scale(0.0)
    return AdamState(m=zero, v=zero.copy(), t=0, beta1=beta1, beta2=beta2, eps=eps, lr=lr)


def adam_step(state, params, grad):
    """One bias-corrected Adam update; returns (new_params, new_state).

    A non-finite gradient refuses the step and leaves the state unchanged.
    """
    params._check_mate(grad)
    if not grad.allfinite():
        raise NumericError("gradient contains non-finite values; step refused")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_m, new_v, new_p = {}, {}, {}
    for k, g in grad.tensors.items():
        m = b1 * state.m.tensors[k] + (1.0 - b1) * g
        v = b2 * state.v.tensors[k] + (1.0 - b2) * (g * g)
        new_m[k] = m
        new_v[k] = v
        new_p[k] = params.tensors[k] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    arch = params.arch
    new_state = AdamState(m=ParamVector(arch, new_m), v=ParamVector(arch, new_v),
                          t=t, beta1=b1, beta2=b2, eps=state.eps, lr=state.lr)
    return ParamVector(arch, new_p), new_state


def reptile_outer(meta, adapted, alpha):
    """Move meta-parameters toward the mean of the task-adapted vectors:

        meta' = meta + alpha * (1/m) * sum_t (adapted_t - meta)

    Exact fixed point when every adapted vector equals meta; alpha=1 with
    a single vector returns it bit-exactly.
    """
    if not adapted:
        raise ConfigError("need at least one adapted parameter vector")
    for p in adapted:
        meta._check_mate(p)
    if alpha == 1.0 and len(adapted) == 1:
        return adapted[0].copy()
    m = float(len(adapted))
    arch = meta.arch
    out = {}
    for k, base in meta.tensors.items():
        delta = adapted[0].tensors[k] - base
        for p in adapted[1:]:
            delta = delta + (p.tensors[k] - base)
        out[k] = base + (alpha / m) * delta
    return ParamVector(arch, out)
