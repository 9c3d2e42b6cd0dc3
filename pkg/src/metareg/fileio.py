"""Binary and CSV file formats.

All multi-byte integers and floats are little-endian; binary formats are
magic- and version-tagged so loaders can reject unknown data instead of
misreading it.

  images       8-bit binary PGM ("P5", maxval 255)
  fields       "MRF1": u32 H, W, C=2, then H*W*2 float32 in [y][x][c]
               order (c=0 is the x/column displacement, c=1 the y/row one)
  checkpoints  "MRCK": u32 version, length-prefixed architecture JSON,
               tensor table (float32), optional Adam moment section
  landmarks    CSV with header mx,my,fx,fy
"""
import io
import json
import struct

import numpy as np

from .data import LandmarkSet, PairSample
from .errors import ConfigError, FormatError
from .model import ArchSpec, ParamVector
from .optim import AdamState

FIELD_MAGIC = b"MRF1"
CKPT_MAGIC = b"MRCK"
CKPT_VERSION = 1


# ---------------------------------------------------------------- PGM

def write_pgm(path, img):
    """img is float in [0,1] or uint8; floats are scaled and rounded."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_pgm(path):
    """Returns the raw uint8 array."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (bad magic)", offset=0)
    # tokenize header: magic, width, height, maxval; '#' starts a comment
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header", offset=pos)
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"{path}: bad PGM header field", offset=pos)
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    if len(data) - pos < h * w:
        raise FormatError(f"{path}: truncated PGM pixel data", offset=len(data))
    return np.frombuffer(data[pos : pos + h * w], dtype=np.uint8).reshape(h, w).copy()


def to_unit(img8):
    return img8.astype(np.float64) / 255.0


# ---------------------------------------------------------------- fields

def write_field(path, field):
    field = np.asarray(field)
    if field.ndim != 3 or field.shape[0] != 2:
        raise ConfigError(f"field must be (2,H,W), got {field.shape}")
    _, h, w = field.shape
    with open(path, "wb") as f:
        f.write(FIELD_MAGIC)
        f.write(struct.pack("<III", h, w, 2))
        f.write(np.ascontiguousarray(
            field.transpose(1, 2, 0), dtype="<f4").tobytes())


def read_field(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != FIELD_MAGIC:
        raise FormatError(f"{path}: bad field magic {data[:4]!r}", offset=0)
    if len(data) < 16:
        raise FormatError(f"{path}: truncated field header", offset=len(data))
    h, w, c = struct.unpack_from("<III", data, 4)
    if c != 2:
        raise FormatError(f"{path}: expected 2 channels, got {c}", offset=12)
    need = 16 + h * w * c * 4
    if len(data) < need:
        raise FormatError(f"{path}: truncated field data", offset=len(data))
    flat = np.frombuffer(data, dtype="<f4", count=h * w * c, offset=16)
    return np.ascontiguousarray(flat.reshape(h, w, c).transpose(2, 0, 1),
                                dtype=np.float64)


# ---------------------------------------------------------------- landmarks

def write_landmarks(path, lm):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("mx,my,fx,fy\n")
        for mx, my, fx, fy in lm.points:
            # python float repr round-trips float64 exactly
            f.write(f"{float(mx)!r},{float(my)!r},{float(fx)!r},{float(fy)!r}\n")


def read_landmarks(path):
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "mx,my,fx,fy":
            raise FormatError(f"{path}: bad landmark header {header!r}")
        rows = []
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise FormatError(f"{path}: bad landmark row {line!r}")
            rows.append([float(p) for p in parts])
    return LandmarkSet(np.asarray(rows, dtype=np.float64).reshape(-1, 4))


# ---------------------------------------------------------------- checkpoints

def _arch_to_json(arch):
    doc = {"enc": [list(t) for t in arch.enc], "dec": list(arch.dec),
           "leaky_slope": arch.leaky_slope, "final_zero_init": arch.final_zero_init}
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def _arch_from_json(blob, offset):
    try:
        doc = json.loads(blob.decode("utf-8"))
        return ArchSpec(enc=tuple(tuple(t) for t in doc["enc"]), dec=tuple(doc["dec"]),
                        leaky_slope=doc["leaky_slope"], final_zero_init=doc["final_zero_init"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"bad architecture descriptor: {e}", offset=offset)


def _write_tensor_table(f, tensors):
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        f.write(struct.pack("<I", len(nb)))
        f.write(nb)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated {what}", offset=self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def _read_tensor_table(r, dtype):
    n = r.u32("tensor count")
    tensors = {}
    for _ in range(n):
        name_len = r.u32("tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        ndim = r.u32("tensor rank")
        if ndim > 8:
            raise FormatError(f"{r.path}: implausible tensor rank {ndim}", offset=r.pos - 4)
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "tensor dims"))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = r.take(4 * count, f"tensor {name!r} data")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(dtype)
    return tensors


def save_checkpoint(path, params, adam=None):
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    arch_blob = _arch_to_json(params.arch)
    buf.write(struct.pack("<I", len(arch_blob)))
    buf.write(arch_blob)
    _write_tensor_table(buf, params.tensors)
    if adam is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<I", adam.t))
        buf.write(struct.pack("<4d", adam.lr, adam.beta1, adam.beta2, adam.eps))
        both = {f"m.{k}": v for k, v in adam.m.tensors.items()}
        both.update({f"v.{k}": v for k, v in adam.v.tensors.items()})
        _write_tensor_table(buf, both)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path, dtype=np.float64):
    """Returns (params, adam_state_or_None)."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, path)
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}", offset=0)
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    arch_len = r.u32("architecture length")
    arch = _arch_from_json(r.take(arch_len, "architecture descriptor"), r.pos)
    tensors = _read_tensor_table(r, dtype)

    expected = {}
    for name, wshape, bshape in arch.layer_shapes():
        expected[f"{name}.w"] = wshape
        expected[f"{name}.b"] = bshape
    got = {k: v.shape for k, v in tensors.items()}
    if got != expected:
        raise FormatError(f"{path}: tensor table does not match the declared architecture")
    params = ParamVector(arch, {k: tensors[k] for k in expected})

    adam = None
    flag = r.take(1, "optimizer flag")[0]
    if flag == 1:
        t = r.u32("optimizer step")
        lr, b1, b2, eps = struct.unpack("<4d", r.take(32, "optimizer scalars"))
        both = _read_tensor_table(r, dtype)
        m = {k: both[f"m.{k}"] for k in expected}
        v = {k: both[f"v.{k}"] for k in expected}
        adam = AdamState(m=ParamVector(arch, m), v=ParamVector(arch, v),
                         t=t, beta1=b1, beta2=b2, eps=eps, lr=lr)
    elif flag != 0:
        raise FormatError(f"{path}: bad optimizer flag {flag}", offset=r.pos - 1)
    return params, adam


# ---------------------------------------------------------------- task dirs

def pair_paths(directory, index):
    stem = f"{directory}/pair_{index:04d}"
    return (f"{stem}.moving.pgm", f"{stem}.fixed.pgm",
            f"{stem}.field.mrf1", f"{stem}.landmarks.csv")


def write_pair(directory, index, sample):
    """Writes one sample; landmark moving points are recomputed from the
    float32-quantized field so the landmark identity re-verifies exactly
    after reload."""
    mp, fp, gp, lp = pair_paths(directory, index)
    write_pgm(mp, sample.moving)
    write_pgm(fp, sample.fixed)
    if sample.gt_field is not None:
        write_field(gp, sample.gt_field)
    if sample.landmarks is not None:
        pts = sample.landmarks.points.copy()
        if sample.gt_field is not None:
            f32 = sample.gt_field.astype(np.float32).astype(np.float64)
            fx = pts[:, 2].astype(np.int64)
            fy = pts[:, 3].astype(np.int64)
            on_grid = (pts[:, 2] == fx) & (pts[:, 3] == fy)
            if on_grid.all():
                pts[:, 0] = pts[:, 2] + f32[0, fy, fx]
                pts[:, 1] = pts[:, 3] + f32[1, fy, fx]
        write_landmarks(lp, LandmarkSet(pts))


def read_pair(directory, index):
    import os

    mp, fp, gp, lp = pair_paths(directory, index)
    moving = to_unit(read_pgm(mp))
    fixed = to_unit(read_pgm(fp))
    gt = read_field(gp) if os.path.exists(gp) else None
    lm = read_landmarks(lp) if os.path.exists(lp) else None
    return PairSample(moving=moving, fixed=fixed, gt_field=gt, landmarks=lm)


def count_pairs(directory):
    import os

    n = 0
    while os.path.exists(pair_paths(directory, n)[0]):
        n += 1
    return n
