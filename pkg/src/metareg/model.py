"""The registration network: a small U-Net style encoder-decoder that maps
a channel-concatenated image pair to a dense displacement field, plus the
flat parameter-vector arithmetic the meta update needs.

The topology is fixed per ArchSpec, so the backward pass is an explicit,
hand-ordered composition of the kernel gradient contracts (no autodiff
tape).
"""
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, StateError
from . import kernels as K


@dataclass(frozen=True)
class ArchSpec:
    """Network topology.

    enc: (channels, stride) per encoder level, stride 1 or 2.
    dec: channels per decoder level; one level per stride-2 encoder level,
         each doing upsample -> concat skip -> conv -> leaky_relu. The
         skip is the activation entering the matching stride-2 encoder
         conv, concatenated after the upsampled channels.
    A final stride-1 conv maps dec[-1] (or the deepest encoder activation
    when there is no decoder) to the 2 displacement channels; it carries
    no activation and is zero-initialized when final_zero_init is set so
    a fresh network is the identity transform.
    """
    enc: tuple = ((16, 1), (32, 2), (32, 2), (32, 2))
    dec: tuple = (32, 32, 16)
    leaky_slope: float = 0.2
    final_zero_init: bool = True

    def __post_init__(self):
        if not self.enc:
            raise ConfigError("encoder must have at least one level")
        for ch, st in self.enc:
            if st not in (1, 2) or ch < 1:
                raise ConfigError(f"bad encoder level ({ch}, {st})")
        n_down = sum(1 for _, st in self.enc if st == 2)
        if len(self.dec) != n_down:
            raise ConfigError(
                f"decoder must mirror the {n_down} stride-2 encoder levels, "
                f"got {len(self.dec)} levels")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must be in (0,1), got {self.leaky_slope}")

    @property
    def downs(self):
        return sum(1 for _, st in self.enc if st == 2)

    def check_dims(self, h, w):
        d = 2 ** self.downs
        if h % d or w % d:
            raise ShapeError(f"input {h}x{w} not divisible by {d}")

    def layer_shapes(self):
        """Ordered (name, kernel shape, bias shape) for every conv."""
        shapes = []
        c_prev = 2
        skip_ch = []
        for i, (ch, st) in enumerate(self.enc):
            if st == 2:
                skip_ch.append(c_prev)
            shapes.append((f"enc{i}", (ch, c_prev, 3, 3), (ch,)))
            c_prev = ch
        for i, ch in enumerate(self.dec):
            c_in = c_prev + skip_ch[-(i + 1)]
            shapes.append((f"dec{i}", (ch, c_in, 3, 3), (ch,)))
            c_prev = ch
        shapes.append(("flow", (2, c_prev, 3, 3), (2,)))
        return shapes

    @classmethod
    def small(cls):
        return cls(enc=((8, 1), (16, 2), (16, 2)), dec=(16, 8))

    @classmethod
    def tiny(cls):
        return cls(enc=((8, 1), (16, 2)), dec=(16,))


class ParamVector:
    """Ordered named conv tensors with elementwise linear arithmetic.

    Two vectors built from the same ArchSpec share names, ordering, and
    shapes; arithmetic never mutates operands.
    """

    __slots__ = ("arch", "tensors")

    def __init__(self, arch, tensors):
        self.arch = arch
        self.tensors = tensors  # dict name -> array, insertion-ordered

    @property
    def names(self):
        return list(self.tensors)

    @property
    def total_len(self):
        return sum(t.size for t in self.tensors.values())

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def copy(self):
        return ParamVector(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def _check_mate(self, other):
        if self.arch != other.arch:
            raise ShapeError("parameter vectors come from different architectures")

    def add(self, other):
        self._check_mate(other)
        return ParamVector(self.arch, {k: v + other.tensors[k] for k, v in self.tensors.items()})

    def sub(self, other):
        self._check_mate(other)
        return ParamVector(self.arch, {k: v - other.tensors[k] for k, v in self.tensors.items()})

    def scale(self, a):
        return ParamVector(self.arch, {k: v * a for k, v in self.tensors.items()})

    def allfinite(self):
        return all(np.isfinite(t).all() for t in self.tensors.values())

    def allclose(self, other, rtol=0.0, atol=0.0):
        self._check_mate(other)
        return all(np.allclose(v, other.tensors[k], rtol=rtol, atol=atol)
                   for k, v in self.tensors.items())

    def equal(self, other):
        self._check_mate(other)
        return all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())

    def to_flat(self):
        return np.concatenate([t.ravel() for t in self.tensors.values()])

    def max_abs(self):
        return max(float(np.abs(t).max()) for t in self.tensors.values())


def param_axpy(a, b, alpha):
    """a + alpha * (b - a), elementwise; alpha 0/1 return exact copies."""
    a._check_mate(b)
    if alpha == 0.0:
        return a.copy()
    if alpha == 1.0:
        return b.copy()
    return ParamVector(a.arch, {
        k: v + alpha * (b.tensors[k] - v) for k, v in a.tensors.items()})


def init_params(arch, seed, dtype=np.float64):
    """Deterministic initialization.

    Hidden kernels are uniform in +-1/sqrt(fan_in), biases zero; the flow
    conv is all-zero under final_zero_init so the fresh network outputs a
    zero field.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, wshape, bshape in arch.layer_shapes():
        if name == "flow" and arch.final_zero_init:
            w = np.zeros(wshape, dtype=dtype)
        else:
            fan_in = wshape[1] * wshape[2] * wshape[3]
            limit = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-limit, limit, size=wshape).astype(dtype)
        tensors[f"{name}.w"] = w
        tensors[f"{name}.b"] = np.zeros(bshape, dtype=dtype)
    return ParamVector(arch, tensors)


@dataclass
class ForwardCache:
    """Per-layer activations retained for the backward pass; valid only
    for the (params, moving, fixed) triple that produced it."""
    params: ParamVector
    enc_in: list = dc_field(default_factory=list)   # conv input per encoder level
    enc_pre: list = dc_field(default_factory=list)  # pre-activation per encoder level
    dec_in: list = dc_field(default_factory=list)   # concatenated conv input per decoder level
    dec_pre: list = dc_field(default_factory=list)
    dec_split: list = dc_field(default_factory=list)  # upsampled-channel count per concat
    flow_in: np.ndarray = None
    field_shape: tuple = None


def forward(params, moving, fixed):
    """Run the network; returns (field, cache).

    field is (2, H, W): channel 0 displaces along x/columns, channel 1
    along y/rows, in output-grid pixels (backward map).
    """
    if moving.shape != fixed.shape:
        raise ShapeError(f"image shapes differ: {moving.shape} vs {fixed.shape}")
    arch = params.arch
    arch.check_dims(*moving.shape)
    dt = params.dtype
    slope = arch.leaky_slope

    x = np.stack([np.asarray(moving, dtype=dt), np.asarray(fixed, dtype=dt)])
    cache = ForwardCache(params=params)
    skips = []
    for i, (ch, st) in enumerate(arch.enc):
        if st == 2:
            skips.append(x)
        cache.enc_in.append(x)
        pre = K.conv2d(x, params.tensors[f"enc{i}.w"], params.tensors[f"enc{i}.b"], st)
        cache.enc_pre.append(pre)
        x = K.leaky_relu(pre, slope)

    for i in range(len(arch.dec)):
        up = K.upsample2x(x)
        cat = K.concat_channels(up, skips[-(i + 1)])
        cache.dec_in.append(cat)
        cache.dec_split.append(up.shape[0])
        pre = K.conv2d(cat, params.tensors[f"dec{i}.w"], params.tensors[f"dec{i}.b"], 1)
        cache.dec_pre.append(pre)
        x = K.leaky_relu(pre, slope)

    cache.flow_in = x
    field = K.conv2d(x, params.tensors["flow.w"], params.tensors["flow.b"], 1)
    if not np.isfinite(field).all():
        raise NumericError("forward produced a non-finite displacement field")
    cache.field_shape = field.shape
    return field, cache


def backward(cache, grad_field):
    """Reverse composition of the kernel gradient contracts.

    Returns dL/dtheta as a ParamVector shaped like cache.params.
    """
    if cache.flow_in is None or cache.field_shape is None:
        raise StateError("forward cache is incomplete")
    if grad_field.shape != cache.field_shape:
        raise StateError(
            f"gradient shape {grad_field.shape} does not match cache {cache.field_shape}")
    params = cache.params
    arch = params.arch
    slope = arch.leaky_slope
    grads = {}

    gx, gw, gb = K.conv2d_backward(cache.flow_in, params.tensors["flow.w"],
                                   np.asarray(grad_field, dtype=params.dtype), 1)
    grads["flow.w"] = gw
    grads["flow.b"] = gb

    skip_grads = [None] * len(arch.dec)
    for i in reversed(range(len(arch.dec))):
        g_pre = K.leaky_relu_backward(cache.dec_pre[i], gx, slope)
        g_cat, gw, gb = K.conv2d_backward(cache.dec_in[i], params.tensors[f"dec{i}.w"], g_pre, 1)
        grads[f"dec{i}.w"] = gw
        grads[f"dec{i}.b"] = gb
        g_up, g_skip = K.split_channels(g_cat, cache.dec_split[i])
        skip_grads[len(arch.dec) - 1 - i] = g_skip  # indexed by skip order
        gx = K.upsample2x_backward(g_up)

    # Walk the encoder backwards, folding in skip gradients where a skip
    # was taken (the skip source is the input of that stride-2 level).
    down_seen = sum(1 for _, st in arch.enc if st == 2)
    for i in reversed(range(len(arch.enc))):
        ch, st = arch.enc[i]
        g_pre = K.leaky_relu_backward(cache.enc_pre[i], gx, slope)
        g_in, gw, gb = K.conv2d_backward(cache.enc_in[i], params.tensors[f"enc{i}.w"], g_pre, st)
        grads[f"enc{i}.w"] = gw
        grads[f"enc{i}.b"] = gb
        gx = g_in
        if st == 2:
            down_seen -= 1
            extra = skip_grads[down_seen]
            if extra is not None:
                gx = gx + extra

    return ParamVector(arch, {name: grads[name] for name in params.tensors})
