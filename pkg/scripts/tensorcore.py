"""
Small reverse-mode tensor engine in float64 numpy.

Tensors record the op that produced them (parents plus a backward closure);
`backward(loss)` walks that tape in reverse topological order. Only the
layers PRBPN needs are provided: conv2d / conv_transpose2d, PReLU, sigmoid
and elementwise arithmetic. Also home to Adam, the xoshiro256++ generator
used for every random draw and the PRBW1 array bundle format.
"""
from __future__ import annotations

import contextlib
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit
from threadpoolctl import threadpool_limits

from binfmt import ByteReader, DimensionOverflowError, FormatError, pack_json, read_file, write_atomic

# --- CONFIGURATION ---
ADAM_LR = 1e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
GRAD_CHECK_H = 1e-6
GRAD_CHECK_FLOOR = 1e-8

BUNDLE_MAGIC = b"PRBW0001"
BUNDLE_VERSION = 1
MAX_BUNDLE_ELEMENTS = 1 << 31
MAX_HEADER_BYTES = 16 << 20
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {"f32": 0, "f64": 1}


class NonFiniteTensorError(FloatingPointError):
    pass


# ==========================================
# TENSOR AND TAPE
# ==========================================
class Tensor:
    def __init__(self, data, parents=(), backward=None, op="leaf", name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __abs__(self):
        return absolute(self)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def make_op(data, parents, backward, op):
    """
    Wrap an op result. `backward(g)` returns one gradient (or None) per parent.
    Non-finite results raise immediately, naming the op.
    """
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteTensorError(f"{op} produced non-finite values")
    return Tensor(data, parents=parents, backward=backward, op=op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """
    Reverse-mode accumulation from a scalar loss. Every tensor on the tape gets
    a fresh .grad; tensors in `params` that the loss never touched get zeros.
    Returns the gradients of `params` (in order) when given.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)

    for node in reversed(order):
        if node._backward is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if g is not None:
                parent.grad = parent.grad + g

    if params is None:
        return None
    on_tape = {id(n) for n in order}
    for p in params:
        if id(p) not in on_tape:
            p.grad = np.zeros_like(p.data)
    return [p.grad for p in params]


# ==========================================
# ELEMENTWISE AND REDUCTIONS
# ==========================================
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
        "sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def absolute(x):
    return make_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def tensor_sum(x, axis=None, keepdims=False):
    def _back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(g if keepdims else np.expand_dims(g, axis), x.shape).copy(),)

    return make_op(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), _back, "sum")


def mean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
        lambda g: tuple(np.split(g, sizes, axis=axis)),
        "concat",
    )


def take(x, index):
    def _back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return make_op(x.data[index], (x,), _back, "getitem")


def prelu(x, a):
    """y = x for x >= 0, a*x otherwise; `a` is a learnable 0-d slope."""
    pos = x.data >= 0
    return make_op(
        np.where(pos, x.data, a.data * x.data), (x, a),
        lambda g: (g * np.where(pos, 1.0, a.data), np.sum(g * np.where(pos, 0.0, x.data))),
        "prelu",
    )


def sigmoid(x):
    y = expit(x.data)
    return make_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


# ==========================================
# CONVOLUTIONS
# ==========================================
@dataclass
class ConvParams:
    """weight is (out_c, in_c, kh, kw) for conv2d and (in_c, out_c, kh, kw) when transposed."""
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ValueError(f"Conv weight must be 4-D, got shape {self.weight.shape}")
        if min(self.weight.shape[2:]) < 1:
            raise ValueError(f"Kernel dims must be >= 1, got {self.weight.shape[2:]}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"Need stride >= 1 and padding >= 0, got {self.stride}, {self.padding}")

    def tensors(self):
        return [self.weight, self.bias]


def _windows(xp, kh, kw, stride, ho, wo):
    """(b, c, ho, wo, kh, kw) strided view of every kernel footprint."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def _scatter(cols, stride, out_shape):
    """Adjoint of _windows: sum (b, ho, wo, c, kh, kw) footprints back onto (b, c, H, W)."""
    _, ho, wo, _, kh, kw = cols.shape
    out = np.zeros(out_shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out


def conv_output_size(n, k, stride, padding):
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ValueError(
            f"Non-integral conv output: ({n} + 2*{padding} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def conv_transpose_output_size(n, k, stride, padding):
    size = (n - 1) * stride - 2 * padding + k
    if size < 1:
        raise ValueError(f"Transposed conv output size {size} < 1 for input {n}")
    return size


def conv2d(x, p):
    """Zero-padded cross-correlation, (b, c, H, W) -> (b, out_c, H', W')."""
    w, s, pad = p.weight, p.stride, p.padding
    out_c, in_c, kh, kw = w.shape
    if x.ndim != 4 or x.shape[1] != in_c:
        raise ValueError(f"conv2d expects (b, {in_c}, H, W) input, got {x.shape}")
    b, _, h, wd = x.shape
    ho, wo = conv_output_size(h, kh, s, pad), conv_output_size(wd, kw, s, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, kh, kw, s, ho, wo)
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + p.bias.data[None, :, None, None]

    def _back(g):
        dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        db = g.sum(axis=(0, 2, 3))
        # (b, ho, wo, in_c, kh, kw)
        cols = np.tensordot(g, w.data, axes=([1], [0]))
        dxp = _scatter(cols, s, xp.shape)
        dx = dxp[:, :, pad:pad + h, pad:pad + wd]
        return dx, dw, db

    return make_op(out, (x, w, p.bias), _back, "conv2d")


def conv_transpose2d(x, p):
    """Adjoint of conv2d in its input, (b, in_c, H, W) -> (b, out_c, (H-1)s - 2p + k, ...)."""
    w, s, pad = p.weight, p.stride, p.padding
    in_c, out_c, kh, kw = w.shape
    if x.ndim != 4 or x.shape[1] != in_c:
        raise ValueError(f"conv_transpose2d expects (b, {in_c}, H, W) input, got {x.shape}")
    b, _, h, wd = x.shape
    ho, wo = conv_transpose_output_size(h, kh, s, pad), conv_transpose_output_size(wd, kw, s, pad)

    # (b, h, wd, out_c, kh, kw)
    cols = np.tensordot(x.data, w.data, axes=([1], [0]))
    full_shape = (b, out_c, (h - 1) * s + kh, (wd - 1) * s + kw)
    full = _scatter(cols, s, full_shape)
    out = full[:, :, pad:pad + ho, pad:pad + wo] + p.bias.data[None, :, None, None]

    def _back(g):
        gp = np.zeros(full_shape)
        gp[:, :, pad:pad + ho, pad:pad + wo] = g
        win = _windows(gp, kh, kw, s, h, wd)
        dx = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        dw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    return make_op(out, (x, w, p.bias), _back, "conv_transpose2d")


# ==========================================
# GRADIENT CHECKING
# ==========================================
def grad_check(f, inputs, h=GRAD_CHECK_H, floor=GRAD_CHECK_FLOOR, max_elements=None, rng=None):
    """
    Worst relative error between reverse-mode and central-difference gradients
    of the scalar function f(*tensors) over every element of `inputs`
    (or `max_elements` sampled elements per input). Denominators are the
    numerical gradient, floored at `floor`.
    """
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(a.copy()) for a in arrays]
    loss = f(*tensors)
    analytic = backward(loss, tensors)

    worst = 0.0
    for k, base in enumerate(arrays):
        flat = np.arange(base.size)
        if max_elements is not None and base.size > max_elements:
            rng = rng or Xoshiro256(0)
            flat = sorted({rng.integers(base.size) for _ in range(max_elements)})
        for e in flat:
            idx = np.unravel_index(e, base.shape)
            probe = [a.copy() for a in arrays]
            probe[k][idx] = base[idx] + h
            fp = f(*[Tensor(a) for a in probe]).data.item()
            probe[k][idx] = base[idx] - h
            fm = f(*[Tensor(a) for a in probe]).data.item()
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic[k][idx] - numeric) / max(abs(numeric), floor)
            worst = max(worst, err)
    return worst


def grad_check_params(loss_fn, params, h=GRAD_CHECK_H, floor=GRAD_CHECK_FLOOR, max_elements=None, rng=None):
    """
    grad_check for a model: `loss_fn()` rebuilds the scalar loss from the
    parameter Tensors in `params` (name -> Tensor), which are probed in place
    and restored afterwards. Returns {name: worst relative error}.
    """
    names = list(params)
    analytic = dict(zip(names, backward(loss_fn(), [params[n] for n in names])))
    report = {}
    for name in names:
        p = params[name]
        base = p.data
        flat = np.arange(base.size)
        if max_elements is not None and base.size > max_elements:
            rng = rng or Xoshiro256(0)
            flat = sorted({rng.integers(base.size) for _ in range(max_elements)})
        worst = 0.0
        try:
            for e in flat:
                idx = np.unravel_index(e, base.shape)
                probe = base.copy()
                probe[idx] = base[idx] + h
                p.data = probe
                fp = loss_fn().data.item()
                probe = base.copy()
                probe[idx] = base[idx] - h
                p.data = probe
                fm = loss_fn().data.item()
                numeric = (fp - fm) / (2.0 * h)
                worst = max(worst, abs(analytic[name][idx] - numeric) / max(abs(numeric), floor))
        finally:
            p.data = base
        report[name] = worst
    return report


# ==========================================
# ADAM
# ==========================================
@dataclass
class AdamState:
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    m: dict = field(default_factory=OrderedDict)
    v: dict = field(default_factory=OrderedDict)

    def hyper(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}


def adam_step(params, grads, state):
    """
    One bias-corrected Adam update. `params` maps names to Tensors, `grads`
    names to arrays; parameter arrays are replaced, never written in place.
    """
    if set(params) != set(grads):
        raise ValueError(f"Parameter/gradient names differ: {sorted(set(params) ^ set(grads))}")
    t = state.step + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"Gradient for '{name}' has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = t
    return params, state


# ==========================================
# RANDOM NUMBERS
# ==========================================
_MASK64 = (1 << 64) - 1
_STREAM_MIX = 0xD1B54A32D192ED03


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK64


def splitmix64(x):
    """Returns (next_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


class Xoshiro256:
    """
    xoshiro256++ seeded by four splitmix64 outputs of seed ^ (stream * 0xD1B54A32D192ED03).
    Distinct streams of one seed are independent generators.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream)
        x = (self.seed ^ ((self.stream * _STREAM_MIX) & _MASK64)) & _MASK64
        state = []
        for _ in range(4):
            x, out = splitmix64(x)
            state.append(out)
        self.s = state

    def next_u64(self):
        s0, s1, s2, s3 = self.s
        result = (_rotl((s0 + s3) & _MASK64, 23) + s0) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def uniform(self):
        """Float in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform_array(self, shape, low=0.0, high=1.0):
        n = int(np.prod(shape))
        u = np.fromiter((self.uniform() for _ in range(n)), dtype=np.float64, count=n)
        return (low + (high - low) * u).reshape(shape)

    def integers(self, n):
        """Uniform int in [0, n)."""
        if n < 1:
            raise ValueError(f"integers() needs n >= 1, got {n}")
        return min(int(self.uniform() * n), n - 1)

    def split(self, stream):
        return Xoshiro256(self.seed, stream)

    def get_state(self):
        return {"seed": self.seed, "stream": self.stream, "s": list(self.s)}

    @classmethod
    def from_state(cls, state):
        rng = cls(state["seed"], state["stream"])
        rng.s = [int(v) for v in state["s"]]
        return rng


@contextlib.contextmanager
def deterministic_mode(enabled=True):
    """Pin BLAS/OpenMP pools to one thread so reductions keep a fixed order."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1):
        yield


# ==========================================
# PRBW1 BUNDLES
# ==========================================
def bundle_to_bytes(arrays, header, dtype="f32"):
    """
    Magic, u32 version, JSON header, u32 count, then per array:
    u32 name length, name, u8 dtype code, u32 ndim, ndim x u32 dims, data.
    """
    if dtype not in _DTYPE_CODES:
        raise ValueError(f"Unknown bundle dtype '{dtype}'")
    code = _DTYPE_CODES[dtype]
    parts = [BUNDLE_MAGIC, struct.pack("<I", BUNDLE_VERSION), pack_json(header), struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BI", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def bundle_from_bytes(blob, what="PRBW1 bundle"):
    reader = ByteReader(blob, what)
    reader.expect_magic(BUNDLE_MAGIC)
    reader.expect_version(BUNDLE_VERSION)
    header = reader.read_json(MAX_HEADER_BYTES)
    (count,) = reader.unpack("<I")
    arrays = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = bytes(reader.take(name_len)).decode("utf-8")
        code, ndim = reader.unpack("<BI")
        if code not in _DTYPES:
            raise FormatError(f"{what}: unknown dtype code {code} for '{name}'")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        n = math.prod(shape)
        if n > MAX_BUNDLE_ELEMENTS:
            raise DimensionOverflowError(f"{what}: array '{name}' of shape {shape} is too large")
        dt = _DTYPES[code]
        arrays[name] = np.frombuffer(reader.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    reader.expect_end()
    return header, arrays


def save_bundle(path, arrays, header, dtype="f32"):
    write_atomic(path, bundle_to_bytes(arrays, header, dtype))
    return path


def load_bundle(path):
    return bundle_from_bytes(read_file(path), what=f"PRBW1 bundle '{path}'")
