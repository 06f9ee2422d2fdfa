"""Dense float64 tensors with a reverse-mode tape.

A Tape records every primitive application as a node with explicit
integer ids; node inputs are either earlier node ids or captured
constant arrays. backward() walks the node list in reverse and
accumulates gradients in a fixed order, so gradients for a given tape
are reproducible bit-for-bit, and Tape.replay() can recompute every
forward value from the leaves.

All public operations verify that their output is finite and raise
NumericalError otherwise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    ContractError,
    DegenerateVectorError,
    DimensionError,
    FormatError,
    NumericalError,
    TapeLookupError,
)

_NORM_EPS = 1e-12


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


@dataclass
class Tensor:
    """A float64 array, optionally bound to a node on a tape."""

    data: np.ndarray
    tape: "Tape | None" = None
    node_id: int | None = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])


def tensor(data) -> Tensor:
    """Wrap data as an unbound (constant) tensor."""
    arr = np.asarray(data, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NumericalError("tensor() given non-finite values")
    return Tensor(arr)


@dataclass
class _Node:
    op: str
    # parallel tuples: input_ids[i] is None when the input was a constant,
    # in which case inputs[i] holds the captured array
    input_ids: tuple
    inputs: tuple
    attrs: dict
    value: np.ndarray


@dataclass
class Tape:
    nodes: list = field(default_factory=list)

    def var(self, data) -> Tensor:
        """Record a leaf (parameter or input) and return its bound tensor."""
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericalError("tape leaf given non-finite values")
        nid = len(self.nodes)
        self.nodes.append(_Node("leaf", (), (), {}, arr))
        return Tensor(arr, self, nid)

    def value_of(self, node_id: int) -> np.ndarray:
        if not 0 <= node_id < len(self.nodes):
            raise TapeLookupError(f"node {node_id} not on tape")
        return self.nodes[node_id].value

    def replay(self) -> list:
        """Recompute every node value from the leaves; returns the values."""
        values: list = []
        for node in self.nodes:
            if node.op == "leaf":
                values.append(node.value)
                continue
            ins = [values[i] if i is not None else c
                   for i, c in zip(node.input_ids, node.inputs)]
            values.append(_OPS[node.op][0](ins, node.attrs))
        return values


def _apply(op: str, inputs, attrs: dict | None = None) -> Tensor:
    attrs = attrs or {}
    arrays = [_as_array(x) for x in inputs]
    tape = None
    for x in inputs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and tape is not x.tape:
                raise ContractError(f"{op}: inputs live on different tapes")
            tape = x.tape
    out = _OPS[op][0](arrays, attrs)
    if not np.isfinite(out).all():
        raise NumericalError(f"{op} produced non-finite values")
    if tape is None:
        return Tensor(out)
    ids = tuple(
        x.node_id if isinstance(x, Tensor) and x.tape is tape else None
        for x in inputs
    )
    consts = tuple(
        None if i is not None else a for i, a in zip(ids, arrays)
    )
    nid = len(tape.nodes)
    tape.nodes.append(_Node(op, ids, consts, attrs, out))
    return Tensor(out, tape, nid)


def backward(tape: Tape, output: Tensor) -> dict:
    """Gradients of a scalar output w.r.t. every reachable tape node.

    Returns a map node_id -> ndarray shaped like that node's value.
    """
    if output.tape is not tape or output.node_id is None:
        raise TapeLookupError("output tensor is not on this tape")
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {output.node_id: np.ones_like(output.data)}
    for nid in range(output.node_id, -1, -1):
        if nid not in grads:
            continue
        node = tape.nodes[nid]
        if node.op == "leaf":
            continue
        ins = [tape.nodes[i].value if i is not None else c
               for i, c in zip(node.input_ids, node.inputs)]
        in_grads = _OPS[node.op][1](grads[nid], ins, node.value, node.attrs)
        for iid, g in zip(node.input_ids, in_grads):
            if iid is None or g is None:
                continue
            if iid in grads:
                grads[iid] = grads[iid] + g
            else:
                grads[iid] = g
    return grads


# ---------------------------------------------------------------------------
# primitive forward/backward rules

def _fw_add(ins, attrs):
    return ins[0] + ins[1]


def _fw_sub(ins, attrs):
    return ins[0] - ins[1]


def _fw_mul(ins, attrs):
    return ins[0] * ins[1]


def _fw_scalar_mul(ins, attrs):
    return ins[0] * attrs["c"]


def _fw_matmul(ins, attrs):
    return ins[0] @ ins[1]


def _fw_transpose(ins, attrs):
    return np.ascontiguousarray(ins[0].T)


def _fw_reshape(ins, attrs):
    return np.ascontiguousarray(ins[0].reshape(attrs["shape"]))


def _fw_relu(ins, attrs):
    return np.maximum(ins[0], 0.0)


def _fw_conv2d(ins, attrs):
    return kernels.conv2d_forward(ins[0], ins[1], attrs["stride"], attrs["padding"])


def _bw_conv2d(g, ins, out, attrs):
    gx, gw = kernels.conv2d_backward(ins[0], ins[1], attrs["stride"], attrs["padding"], g)
    return [gx, gw]


def _fw_maxpool2(ins, attrs):
    y, idx = kernels.maxpool2_forward(ins[0])
    attrs["idx"] = idx
    return y


def _bw_maxpool2(g, ins, out, attrs):
    h, w = ins[0].shape[2], ins[0].shape[3]
    return [kernels.maxpool2_backward(attrs["idx"], np.ascontiguousarray(g), h, w)]


def _fw_gap(ins, attrs):
    return ins[0].mean(axis=(2, 3))


def _bw_gap(g, ins, out, attrs):
    b, c, h, w = ins[0].shape
    return [np.broadcast_to(g[:, :, None, None] / (h * w), ins[0].shape).copy()]


def _fw_add_row_bias(ins, attrs):
    return ins[0] + ins[1][None, :]


def _fw_add_channel_bias(ins, attrs):
    return ins[0] + ins[1][None, :, None, None]


def _fw_l2norm(ins, attrs):
    v = ins[0]
    return v / np.linalg.norm(v)


def _bw_l2norm(g, ins, out, attrs):
    n = np.linalg.norm(ins[0])
    return [(g - np.dot(g, out) * out) / n]


def _fw_l2norm_rows(ins, attrs):
    x = ins[0]
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _bw_l2norm_rows(g, ins, out, attrs):
    n = np.linalg.norm(ins[0], axis=1, keepdims=True)
    return [(g - (g * out).sum(axis=1, keepdims=True) * out) / n]


def _fw_masked_lse_rows(ins, attrs):
    s, mask = ins
    neg = np.where(mask > 0, s, -np.inf)
    mx = neg.max(axis=1, keepdims=True)
    e = np.exp(neg - mx)
    return (mx[:, 0] + np.log(e.sum(axis=1)))


def _bw_masked_lse_rows(g, ins, out, attrs):
    s, mask = ins
    neg = np.where(mask > 0, s, -np.inf)
    mx = neg.max(axis=1, keepdims=True)
    e = np.exp(neg - mx)
    p = e / e.sum(axis=1, keepdims=True)
    return [g[:, None] * p, None]


def _fw_gather_rows(ins, attrs):
    return ins[0][attrs["indices"]]


def _bw_gather_rows(g, ins, out, attrs):
    gx = np.zeros_like(ins[0])
    np.add.at(gx, attrs["indices"], g)
    return [gx]


def _fw_sum_all(ins, attrs):
    return np.asarray(ins[0].sum())


def _bw_sum_all(g, ins, out, attrs):
    return [np.broadcast_to(g, ins[0].shape).copy()]


def _fw_softmax_ce_mean(ins, attrs):
    logits = ins[0]
    y = attrs["labels"]
    mx = logits.max(axis=1, keepdims=True)
    shifted = logits - mx
    log_z = np.log(np.exp(shifted).sum(axis=1))
    ll = shifted[np.arange(len(y)), y] - log_z
    return np.asarray(-ll.mean())


def _bw_softmax_ce_mean(g, ins, out, attrs):
    logits = ins[0]
    y = attrs["labels"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    p[np.arange(len(y)), y] -= 1.0
    return [float(g) * p / len(y)]


_OPS = {
    "add": (_fw_add, lambda g, ins, out, a: [g, g]),
    "sub": (_fw_sub, lambda g, ins, out, a: [g, -g]),
    "mul": (_fw_mul, lambda g, ins, out, a: [g * ins[1], g * ins[0]]),
    "scalar_mul": (_fw_scalar_mul, lambda g, ins, out, a: [g * a["c"]]),
    "matmul": (_fw_matmul, lambda g, ins, out, a: [g @ ins[1].T, ins[0].T @ g]),
    "transpose": (_fw_transpose, lambda g, ins, out, a: [np.ascontiguousarray(g.T)]),
    "reshape": (_fw_reshape, lambda g, ins, out, a: [g.reshape(ins[0].shape)]),
    "relu": (_fw_relu, lambda g, ins, out, a: [g * (ins[0] > 0)]),
    "conv2d": (_fw_conv2d, _bw_conv2d),
    "maxpool2": (_fw_maxpool2, _bw_maxpool2),
    "global_avg_pool": (_fw_gap, _bw_gap),
    "add_row_bias": (_fw_add_row_bias, lambda g, ins, out, a: [g, g.sum(axis=0)]),
    "add_channel_bias": (_fw_add_channel_bias,
                         lambda g, ins, out, a: [g, g.sum(axis=(0, 2, 3))]),
    "l2_normalize": (_fw_l2norm, _bw_l2norm),
    "l2_normalize_rows": (_fw_l2norm_rows, _bw_l2norm_rows),
    "masked_lse_rows": (_fw_masked_lse_rows, _bw_masked_lse_rows),
    "gather_rows": (_fw_gather_rows, _bw_gather_rows),
    "sum_all": (_fw_sum_all, _bw_sum_all),
    "softmax_ce_mean": (_fw_softmax_ce_mean, _bw_softmax_ce_mean),
}


# ---------------------------------------------------------------------------
# public operations (validation lives here, not in the rules)

def add(a, b) -> Tensor:
    _check_same_shape("add", a, b)
    return _apply("add", [a, b])


def sub(a, b) -> Tensor:
    _check_same_shape("sub", a, b)
    return _apply("sub", [a, b])


def mul(a, b) -> Tensor:
    _check_same_shape("mul", a, b)
    return _apply("mul", [a, b])


def scalar_mul(a, c: float) -> Tensor:
    return _apply("scalar_mul", [a], {"c": float(c)})


def matmul(a, b) -> Tensor:
    sa, sb = _as_array(a).shape, _as_array(b).shape
    if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
        raise DimensionError(f"matmul: incompatible shapes {sa} x {sb}")
    return _apply("matmul", [a, b])


def transpose2d(a) -> Tensor:
    if _as_array(a).ndim != 2:
        raise DimensionError("transpose2d expects a matrix")
    return _apply("transpose", [a])


def reshape(a, shape) -> Tensor:
    arr = _as_array(a)
    if int(np.prod(shape)) != arr.size:
        raise DimensionError(f"reshape: cannot view {arr.shape} as {tuple(shape)}")
    return _apply("reshape", [a], {"shape": tuple(int(s) for s in shape)})


def relu(a) -> Tensor:
    return _apply("relu", [a])


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) with zero padding.

    x may be (C_in, H, W) or (B, C_in, H, W); w is (C_out, C_in, k, k).
    """
    xa, wa = _as_array(x), _as_array(w)
    if xa.ndim not in (3, 4) or wa.ndim != 4:
        raise DimensionError(f"conv2d: input rank {xa.ndim}, kernel rank {wa.ndim}")
    squeeze = xa.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + xa.shape)
        xa = _as_array(x)
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ContractError(f"conv2d: padding must be >= 0, got {padding}")
    if xa.shape[1] != wa.shape[1]:
        raise DimensionError(
            f"conv2d: input channels {xa.shape[1]} != kernel channels {wa.shape[1]}")
    k = wa.shape[2]
    if wa.shape[3] != k:
        raise DimensionError(f"conv2d: kernels must be square, got {wa.shape}")
    if k > xa.shape[2] + 2 * padding or k > xa.shape[3] + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {k}x{k} larger than padded input "
            f"{xa.shape[2] + 2 * padding}x{xa.shape[3] + 2 * padding}")
    y = _apply("conv2d", [x, w], {"stride": int(stride), "padding": int(padding)})
    if squeeze:
        y = reshape(y, y.shape[1:])
    return y


def maxpool2(x) -> Tensor:
    xa = _as_array(x)
    if xa.ndim != 4 or xa.shape[2] % 2 or xa.shape[3] % 2:
        raise DimensionError(f"maxpool2 expects (B,C,2h,2w), got {xa.shape}")
    return _apply("maxpool2", [x])


def global_avg_pool(x) -> Tensor:
    if _as_array(x).ndim != 4:
        raise DimensionError("global_avg_pool expects (B,C,H,W)")
    return _apply("global_avg_pool", [x])


def add_row_bias(x, b) -> Tensor:
    xa, ba = _as_array(x), _as_array(b)
    if xa.ndim != 2 or ba.ndim != 1 or xa.shape[1] != ba.shape[0]:
        raise DimensionError(f"add_row_bias: {xa.shape} + {ba.shape}")
    return _apply("add_row_bias", [x, b])


def add_channel_bias(x, b) -> Tensor:
    xa, ba = _as_array(x), _as_array(b)
    if xa.ndim != 4 or ba.ndim != 1 or xa.shape[1] != ba.shape[0]:
        raise DimensionError(f"add_channel_bias: {xa.shape} + {ba.shape}")
    return _apply("add_channel_bias", [x, b])


def l2_normalize(v) -> Tensor:
    va = _as_array(v)
    if va.ndim != 1:
        raise DimensionError("l2_normalize expects a 1-D vector")
    if np.linalg.norm(va) <= _NORM_EPS:
        raise DegenerateVectorError("cannot normalize a near-zero vector")
    return _apply("l2_normalize", [v])


def l2_normalize_rows(x) -> Tensor:
    xa = _as_array(x)
    if xa.ndim != 2:
        raise DimensionError("l2_normalize_rows expects a matrix")
    norms = np.linalg.norm(xa, axis=1)
    if (norms <= _NORM_EPS).any():
        bad = int(np.argmin(norms))
        raise DegenerateVectorError(f"row {bad} is near zero, cannot normalize")
    return _apply("l2_normalize_rows", [x])


def masked_logsumexp_rows(s, mask) -> Tensor:
    """Row-wise log-sum-exp over entries where mask != 0, max-shifted."""
    sa, ma = _as_array(s), _as_array(mask)
    if sa.shape != ma.shape or sa.ndim != 2:
        raise DimensionError(f"masked_logsumexp_rows: {sa.shape} vs mask {ma.shape}")
    if ((ma > 0).sum(axis=1) == 0).any():
        raise ContractError("masked_logsumexp_rows: a row has no active entries")
    return _apply("masked_lse_rows", [s, ma])


def gather_rows(x, indices) -> Tensor:
    xa = _as_array(x)
    idx = np.asarray(indices, dtype=np.intp)
    if xa.ndim != 2 or idx.ndim != 1:
        raise DimensionError("gather_rows expects a matrix and a 1-D index list")
    if idx.size and (idx.min() < 0 or idx.max() >= xa.shape[0]):
        raise ContractError(f"gather_rows: index out of range for {xa.shape[0]} rows")
    return _apply("gather_rows", [x], {"indices": idx})


def sum_all(x) -> Tensor:
    return _apply("sum_all", [x])


def softmax_cross_entropy_mean(logits, labels) -> Tensor:
    la = _as_array(logits)
    y = np.asarray(labels, dtype=np.intp)
    if la.ndim != 2 or y.ndim != 1 or la.shape[0] != y.shape[0]:
        raise DimensionError(f"cross entropy: logits {la.shape}, labels {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= la.shape[1]):
        raise ContractError(f"cross entropy: label out of range [0, {la.shape[1]})")
    return _apply("softmax_ce_mean", [logits], {"labels": y})


def _check_same_shape(op, a, b):
    sa, sb = _as_array(a).shape, _as_array(b).shape
    if sa != sb:
        raise DimensionError(f"{op}: shape mismatch {sa} vs {sb}")


# ---------------------------------------------------------------------------
# seeded randomness and initialization

def make_rng(*seed_parts) -> np.random.Generator:
    """PCG64 generator keyed by a tuple of integers; identical streams
    on every platform for a given numpy version."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed_parts)))


def uniform_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    """uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out))."""
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


# ---------------------------------------------------------------------------
# tensor chunk serialization ("KGNT")
#
# magic "KGNT", version u16; per tensor: name length u16 + UTF-8 name,
# rank u8, dims u32 each, row-major float64 data. All integers and
# floats little-endian. Tensors are read until end of buffer.

_TENSOR_MAGIC = b"KGNT"
_TENSOR_VERSION = 1


def dump_tensors(tensors: dict) -> bytes:
    out = [_TENSOR_MAGIC, struct.pack("<H", _TENSOR_VERSION)]
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        enc = name.encode("utf-8")
        out.append(struct.pack("<H", len(enc)))
        out.append(enc)
        out.append(struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b"")
        out.append(a.astype("<f8").tobytes())
    return b"".join(out)


def load_tensors(data: bytes) -> dict:
    if len(data) < 6 or data[:4] != _TENSOR_MAGIC:
        raise FormatError("bad tensor chunk magic")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != _TENSOR_VERSION:
        raise FormatError(f"unsupported tensor chunk version {version}")
    pos = 6
    tensors: dict[str, np.ndarray] = {}
    while pos < len(data):
        try:
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            if len(data[pos:pos + nlen]) != nlen:
                raise struct.error("truncated name")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos) if rank else ()
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            raw = data[pos:pos + 8 * count]
            if len(raw) != 8 * count:
                raise struct.error("truncated data")
            pos += 8 * count
        except struct.error as e:
            raise FormatError(f"truncated tensor chunk: {e}") from None
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    return tensors
