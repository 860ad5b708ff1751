"""Dense float64 tensors and the differentiable primitives built on them.

Every operation is a pure function: inputs are never mutated, outputs are
freshly allocated, and evaluation is safe from multiple threads. Reverse-mode
gradients are available per operation through :func:`vjp`, and whole
computations can be differentiated by recording them on a tape
(:func:`record` / :func:`backward`). FLOP accounting hooks into the same
dispatch layer (:func:`tally_flops`).

Accumulation orders are fixed so that results are reproducible and, for the
convolution primitives, bit-identical to a plain nested-loop evaluation in
row-major order. Large matrix products go through BLAS, which is deterministic
for fixed inputs but not loop-order exact; callers that need loop-exactness
get it from ``depthwise_conv_full`` and ``pointwise_conv`` only.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

from .errors import NumericError, ShapeError, UnsupportedOpError


class Tensor:
    """Immutable dense array of float64 values with an explicit shape.

    ``data`` is the flat row-major buffer; ``array`` exposes the same buffer
    as a read-only numpy view shaped to ``shape``. Rank 0 (a scalar) and
    zero-length extents are allowed.
    """

    __slots__ = ("_array",)

    def __init__(self, values, shape=None):
        arr = np.array(values, dtype=np.float64, order="C")
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if any(s < 0 for s in shape):
                raise ShapeError(f"negative extent in shape {shape}")
            if arr.size != _numel(shape):
                raise ShapeError(
                    f"data length {arr.size} does not match shape {shape}"
                )
            arr = arr.reshape(shape)
        arr.flags.writeable = False
        object.__setattr__(self, "_array", arr)

    @property
    def array(self) -> np.ndarray:
        return self._array

    @property
    def shape(self) -> tuple:
        return self._array.shape

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def data(self) -> list:
        """Flat row-major copy of the values."""
        return self._array.ravel().tolist()

    def tolist(self):
        return self._array.tolist()

    def item(self) -> float:
        if self._array.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self._array.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # identity-based hashing: tensors are values but graph bookkeeping is by node
    __hash__ = object.__hash__


def _numel(shape) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


def _wrap(arr: np.ndarray) -> Tensor:
    return Tensor(arr)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape))


# --------------------------------------------------------------------------
# Tape and FLOP tally plumbing
# --------------------------------------------------------------------------

_LOCAL = threading.local()


def _tapes():
    if not hasattr(_LOCAL, "tapes"):
        _LOCAL.tapes = []
    return _LOCAL.tapes


def _tallies():
    if not hasattr(_LOCAL, "tallies"):
        _LOCAL.tallies = []
    return _LOCAL.tallies


class Tape:
    """Ordered record of primitive applications, consumed by backward()."""

    def __init__(self):
        self.nodes = []  # (op, inputs tuple[Tensor], output Tensor, extras dict)

    def __len__(self):
        return len(self.nodes)


class FlopTally:
    """Mutable FLOP counter fed by every primitive executed under it."""

    def __init__(self):
        self.flops = 0


@contextmanager
def record():
    """Record primitive applications for reverse-mode differentiation."""
    tape = Tape()
    _tapes().append(tape)
    try:
        yield tape
    finally:
        _tapes().pop()


@contextmanager
def tally_flops():
    """Count FLOPs of every primitive executed in the block."""
    tally = FlopTally()
    _tallies().append(tally)
    try:
        yield tally
    finally:
        _tallies().pop()


def _emit(op, inputs, output, extras, flops):
    for tally in _tallies():
        tally.flops += flops
    for tape in _tapes():
        tape.nodes.append((op, inputs, output, extras))


# --------------------------------------------------------------------------
# FLOP cost model
#
# Conventions (documented here and in the README):
#   * one multiply-accumulate = 2 FLOPs
#   * bias additions of affine ops are not counted (MAC-only convention)
#   * exp, log, sigmoid count 4 FLOPs per element; swish 5 (sigmoid + mul)
#   * data movement (reshape, transpose, slice, concat, broadcast) is free
#   * a complex FFT of length L is modelled as 5*L*log2(L) real FLOPs
# --------------------------------------------------------------------------


def matmul_flops(m, k, p) -> int:
    return 2 * m * k * p


def softmax_flops(slices, length) -> int:
    # per slice: max (L-1), shift (L), exp (4L), sum (L-1), divide (L)
    if length == 0:
        return 0
    return slices * (7 * length - 2)


def layer_norm_flops(rows, dim) -> int:
    # per row: mean d, center d, variance 2d, rsqrt 2, normalize d, gamma d, beta d
    return rows * (7 * dim + 2)


def dft2_flops(n, d) -> int:
    """Modelled cost of the two-axis DFT on an n x d input."""
    cost = 0.0
    if n > 1:
        cost += 5.0 * n * d * math.log2(n)
    if d > 1:
        cost += 5.0 * n * d * math.log2(d)
    return int(round(cost))


def cross_entropy_flops(batch, classes) -> int:
    # per row: max, shift, exp, sum, log, dot with targets; plus the batch mean
    return batch * (8 * classes + 4) + batch


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.array.ndim != 2 or b.array.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = _wrap(a.array @ b.array)
    _emit("matmul", (a, b), out, {}, matmul_flops(a.shape[0], a.shape[1], b.shape[1]))
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` over the rows of a rank-2 input."""
    if x.array.ndim != 2 or w.array.ndim != 2 or b.array.ndim != 1:
        raise ShapeError(
            f"linear needs 2d x, 2d w, 1d b, got {x.shape}, {w.shape}, {b.shape}"
        )
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"linear shapes mismatch: {x.shape}, {w.shape}, {b.shape}")
    out = _wrap(x.array @ w.array + b.array)
    _emit("linear", (x, w, b), out, {}, matmul_flops(x.shape[0], x.shape[1], w.shape[1]))
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = _wrap(a.array + b.array)
    _emit("add", (a, b), out, {}, a.size)
    return out


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shapes differ: {a.shape} vs {b.shape}")
    out = _wrap(a.array * b.array)
    _emit("hadamard", (a, b), out, {}, a.size)
    return out


def scale(x: Tensor, alpha: float) -> Tensor:
    """Multiply every element by the python scalar ``alpha``."""
    out = _wrap(x.array * float(alpha))
    _emit("scale", (x,), out, {"alpha": float(alpha)}, x.size)
    return out


def softmax(x: Tensor, axis: int) -> Tensor:
    """Normalized exponential along ``axis``, max-shifted for stability."""
    rank = x.array.ndim
    if not -rank <= axis < rank:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    if not np.isfinite(x.array).all():
        raise NumericError("softmax input contains non-finite values")
    axis = axis % rank
    shifted = x.array - x.array.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = _wrap(e / e.sum(axis=axis, keepdims=True))
    length = x.shape[axis]
    slices = x.size // length if length else 0
    _emit("softmax", (x,), out, {"axis": axis}, softmax_flops(slices, length))
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Per-row standardization of a rank-2 input, then the affine (gamma, beta)."""
    if x.array.ndim != 2:
        raise ShapeError(f"layer_norm needs a rank-2 input, got {x.shape}")
    n, d = x.shape
    if d == 0:
        raise ShapeError(f"layer_norm feature dim is 0 in shape {x.shape}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match dim {d}"
        )
    if eps <= 0:
        raise NumericError(f"layer_norm eps must be positive, got {eps}")
    mu = x.array.mean(axis=1, keepdims=True)
    centered = x.array - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    xhat = centered / np.sqrt(var + eps)
    out = _wrap(xhat * gamma.array + beta.array)
    _emit("layer_norm", (x, gamma, beta), out, {"eps": float(eps)}, layer_norm_flops(n, d))
    return out


def relu(x: Tensor) -> Tensor:
    out = _wrap(np.maximum(x.array, 0.0))
    _emit("relu", (x,), out, {}, x.size)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _wrap(_sigmoid(x.array))
    _emit("sigmoid", (x,), out, {}, 4 * x.size)
    return out


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    out = _wrap(x.array * _sigmoid(x.array))
    _emit("swish", (x,), out, {}, 5 * x.size)
    return out


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # evaluated in the numerically safe branch on each side
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def depthwise_conv_full(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Per-channel full-extent convolution: one output position per channel.

    out[0, 0, c] = sum_{i,j} x[i,j,c] * kernel[i,j,c] + bias[c], accumulated
    over spatial positions in row-major order (bit-identical to the nested
    loop; the running sum is forced with a cumulative reduction).
    """
    if x.array.ndim != 3 or kernel.array.ndim != 3:
        raise ShapeError(
            f"depthwise_conv_full needs rank-3 operands, got {x.shape} and {kernel.shape}"
        )
    if x.shape != kernel.shape:
        raise ShapeError(
            f"depthwise kernel extent {kernel.shape} does not match input {x.shape}"
        )
    h, w, c = x.shape
    if bias.shape != (c,):
        raise ShapeError(f"depthwise bias shape {bias.shape} does not match channels {c}")
    prod = (x.array * kernel.array).reshape(-1, c)
    if prod.shape[0]:
        summed = prod.cumsum(axis=0)[-1]
    else:
        summed = np.zeros(c)
    out = _wrap((summed + bias.array).reshape(1, 1, c))
    _emit("depthwise_conv_full", (x, kernel, bias), out, {}, 2 * h * w * c)
    return out


def pointwise_conv(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Per-position channel map: out[i,j,:] = x[i,j,:] @ weights + bias.

    The channel contraction runs in ascending input-channel order so small
    cases agree bit-for-bit with a nested-loop evaluation.
    """
    if x.array.ndim != 3 or weights.array.ndim != 2:
        raise ShapeError(
            f"pointwise_conv needs rank-3 x and rank-2 weights, got {x.shape}, {weights.shape}"
        )
    h, w, c = x.shape
    if weights.shape[0] != c:
        raise ShapeError(
            f"pointwise weights {weights.shape} do not match input channels {c}"
        )
    cp = weights.shape[1]
    if bias.shape != (cp,):
        raise ShapeError(f"pointwise bias shape {bias.shape} does not match {cp} outputs")
    acc = np.zeros((h, w, cp))
    for ci in range(c):
        acc = acc + x.array[:, :, ci, None] * weights.array[ci]
    out = _wrap(acc + bias.array)
    _emit("pointwise_conv", (x, weights, bias), out, {}, 2 * h * w * c * cp)
    return out


def broadcast_vector(v: Tensor, target_spatial) -> Tensor:
    """Copy a channel vector (shape (d,) or (1,1,d)) to every position of an
    (H, W) grid."""
    h, w = (int(s) for s in target_spatial)
    if h <= 0 or w <= 0:
        raise ShapeError(f"broadcast target extents must be positive, got {(h, w)}")
    if v.array.ndim == 1:
        d = v.shape[0]
        vec = v.array
    elif v.array.ndim == 3 and v.shape[0] == 1 and v.shape[1] == 1:
        d = v.shape[2]
        vec = v.array[0, 0]
    else:
        raise ShapeError(f"broadcast_vector needs shape (d,) or (1,1,d), got {v.shape}")
    out = _wrap(np.broadcast_to(vec, (h, w, d)).copy())
    _emit("broadcast_vector", (v,), out, {"target": (h, w)}, 0)
    return out


def mean_pool_hw(x: Tensor) -> Tensor:
    """Mean over both spatial axes of an (H, W, C) map, kept as (1, 1, C)."""
    if x.array.ndim != 3:
        raise ShapeError(f"mean_pool_hw needs a rank-3 input, got {x.shape}")
    h, w, c = x.shape
    if h * w == 0:
        raise ShapeError(f"mean_pool_hw input has no spatial positions: {x.shape}")
    out = _wrap(x.array.reshape(-1, c).sum(axis=0).reshape(1, 1, c) / (h * w))
    _emit("mean_pool_hw", (x,), out, {}, h * w * c)
    return out


def dft2_real(x: Tensor) -> Tensor:
    """Real part of the unnormalized DFT applied along both axes of a rank-2
    input (sequence axis first, then feature axis)."""
    if x.array.ndim != 2:
        raise ShapeError(f"dft2_real needs a rank-2 input, got {x.shape}")
    out = _wrap(np.fft.fft(np.fft.fft(x.array, axis=0), axis=1).real.copy())
    n, d = x.shape
    _emit("dft2_real", (x,), out, {}, dft2_flops(n, d))
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if _numel(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    out = _wrap(x.array.reshape(shape).copy())
    _emit("reshape", (x,), out, {"from": x.shape}, 0)
    return out


def transpose2d(x: Tensor) -> Tensor:
    if x.array.ndim != 2:
        raise ShapeError(f"transpose2d needs a rank-2 input, got {x.shape}")
    out = _wrap(x.array.T.copy())
    _emit("transpose2d", (x,), out, {}, 0)
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the last axis of a rank-1 or rank-2 tensor."""
    if x.array.ndim not in (1, 2):
        raise ShapeError(f"slice_cols needs rank 1 or 2, got {x.shape}")
    width = x.shape[-1]
    if not 0 <= start <= stop <= width:
        raise ShapeError(f"slice_cols [{start}:{stop}] out of range for {x.shape}")
    out = _wrap(x.array[..., start:stop].copy())
    _emit("slice_cols", (x,), out, {"start": start, "stop": stop}, 0)
    return out


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the first axis of a rank-2 tensor."""
    if x.array.ndim != 2:
        raise ShapeError(f"slice_rows needs rank 2, got {x.shape}")
    if not 0 <= start <= stop <= x.shape[0]:
        raise ShapeError(f"slice_rows [{start}:{stop}] out of range for {x.shape}")
    out = _wrap(x.array[start:stop].copy())
    _emit("slice_rows", (x,), out, {"start": start, "stop": stop}, 0)
    return out


def concat_cols(parts) -> Tensor:
    parts = tuple(parts)
    if not parts or any(p.array.ndim != 2 for p in parts):
        raise ShapeError("concat_cols needs at least one rank-2 tensor")
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise ShapeError(f"concat_cols row counts differ: {[p.shape for p in parts]}")
    out = _wrap(np.concatenate([p.array for p in parts], axis=1))
    _emit("concat_cols", parts, out, {"widths": [p.shape[1] for p in parts]}, 0)
    return out


def concat_rows(parts) -> Tensor:
    parts = tuple(parts)
    if not parts or any(p.array.ndim != 2 for p in parts):
        raise ShapeError("concat_rows needs at least one rank-2 tensor")
    cols = parts[0].shape[1]
    if any(p.shape[1] != cols for p in parts):
        raise ShapeError(f"concat_rows column counts differ: {[p.shape for p in parts]}")
    out = _wrap(np.concatenate([p.array for p in parts], axis=0))
    _emit("concat_rows", parts, out, {"heights": [p.shape[0] for p in parts]}, 0)
    return out


def softmax_cross_entropy(logits: Tensor, onehot: Tensor) -> Tensor:
    """Mean cross-entropy between row-softmaxed logits and one-hot targets."""
    if logits.array.ndim != 2 or logits.shape != onehot.shape:
        raise ShapeError(
            f"softmax_cross_entropy needs matching rank-2 shapes, got {logits.shape}, {onehot.shape}"
        )
    if not np.isfinite(logits.array).all():
        raise NumericError("softmax_cross_entropy logits contain non-finite values")
    b, k = logits.shape
    m = logits.array.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits.array - m).sum(axis=1, keepdims=True)) + m
    per_row = lse[:, 0] - (onehot.array * logits.array).sum(axis=1)
    out = _wrap(np.array(per_row.mean()))
    _emit("softmax_cross_entropy", (logits, onehot), out, {}, cross_entropy_flops(b, k))
    return out


# --------------------------------------------------------------------------
# Vector-Jacobian products
# --------------------------------------------------------------------------


def _vjp_matmul(inputs, extras, g):
    a, b = inputs
    return g @ b.T, a.T @ g


def _vjp_linear(inputs, extras, g):
    x, w, b = inputs
    return g @ w.T, x.T @ g, g.sum(axis=0)


def _vjp_add(inputs, extras, g):
    return g, g


def _vjp_hadamard(inputs, extras, g):
    a, b = inputs
    return g * b, g * a


def _vjp_scale(inputs, extras, g):
    return (g * extras["alpha"],)


def _vjp_softmax(inputs, extras, g):
    (x,) = inputs
    axis = extras["axis"]
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


def _vjp_layer_norm(inputs, extras, g):
    x, gamma, beta = inputs
    eps = extras["eps"]
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gg = g * gamma
    dx = inv * (gg - gg.mean(axis=1, keepdims=True) - xhat * (gg * xhat).mean(axis=1, keepdims=True))
    return dx, dgamma, dbeta


def _vjp_relu(inputs, extras, g):
    (x,) = inputs
    return (g * (x > 0),)


def _vjp_sigmoid(inputs, extras, g):
    (x,) = inputs
    s = _sigmoid(x)
    return (g * s * (1.0 - s),)


def _vjp_swish(inputs, extras, g):
    (x,) = inputs
    s = _sigmoid(x)
    return (g * (s + x * s * (1.0 - s)),)


def _vjp_depthwise(inputs, extras, g):
    x, kernel, bias = inputs
    gc = g[0, 0]
    return kernel * gc, x * gc, gc.copy()


def _vjp_pointwise(inputs, extras, g):
    x, w, bias = inputs
    h, wd, c = x.shape
    cp = w.shape[1]
    g2 = g.reshape(-1, cp)
    x2 = x.reshape(-1, c)
    return (g2 @ w.T).reshape(h, wd, c), x2.T @ g2, g2.sum(axis=0)


def _vjp_broadcast_vector(inputs, extras, g):
    (v,) = inputs
    summed = g.sum(axis=(0, 1))
    return (summed.reshape(v.shape),)


def _vjp_mean_pool(inputs, extras, g):
    (x,) = inputs
    h, w, c = x.shape
    return (np.broadcast_to(g[0, 0] / (h * w), x.shape).copy(),)


def _vjp_dft2_real(inputs, extras, g):
    # the real-part double DFT is self-adjoint (symmetric transform matrices)
    return (np.fft.fft(np.fft.fft(g, axis=0), axis=1).real.copy(),)


def _vjp_reshape(inputs, extras, g):
    (x,) = inputs
    return (g.reshape(x.shape),)


def _vjp_transpose2d(inputs, extras, g):
    return (g.T.copy(),)


def _vjp_slice_cols(inputs, extras, g):
    (x,) = inputs
    dx = np.zeros_like(x)
    dx[..., extras["start"] : extras["stop"]] = g
    return (dx,)


def _vjp_slice_rows(inputs, extras, g):
    (x,) = inputs
    dx = np.zeros_like(x)
    dx[extras["start"] : extras["stop"]] = g
    return (dx,)


def _vjp_concat_cols(inputs, extras, g):
    outs = []
    at = 0
    for p in inputs:
        w = p.shape[1]
        outs.append(g[:, at : at + w].copy())
        at += w
    return tuple(outs)


def _vjp_concat_rows(inputs, extras, g):
    outs = []
    at = 0
    for p in inputs:
        h = p.shape[0]
        outs.append(g[at : at + h].copy())
        at += h
    return tuple(outs)


def _vjp_softmax_cross_entropy(inputs, extras, g):
    logits, onehot = inputs
    b = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e / e.sum(axis=1, keepdims=True)
    gs = float(g) / b
    return (s - onehot) * gs, -logits * gs


_VJP_RULES = {
    "matmul": _vjp_matmul,
    "linear": _vjp_linear,
    "add": _vjp_add,
    "hadamard": _vjp_hadamard,
    "scale": _vjp_scale,
    "softmax": _vjp_softmax,
    "layer_norm": _vjp_layer_norm,
    "relu": _vjp_relu,
    "sigmoid": _vjp_sigmoid,
    "swish": _vjp_swish,
    "depthwise_conv_full": _vjp_depthwise,
    "pointwise_conv": _vjp_pointwise,
    "broadcast_vector": _vjp_broadcast_vector,
    "mean_pool_hw": _vjp_mean_pool,
    "dft2_real": _vjp_dft2_real,
    "reshape": _vjp_reshape,
    "transpose2d": _vjp_transpose2d,
    "slice_cols": _vjp_slice_cols,
    "slice_rows": _vjp_slice_rows,
    "concat_cols": _vjp_concat_cols,
    "concat_rows": _vjp_concat_rows,
    "softmax_cross_entropy": _vjp_softmax_cross_entropy,
}


def vjp(op: str, inputs, cotangent: Tensor, **extras):
    """Vector-Jacobian product of a primitive.

    ``inputs`` are the primal inputs the op was evaluated on; ``cotangent``
    has the op's output shape. Returns one cotangent Tensor per input.
    Extras reproduce non-tensor arguments of the forward call (``axis`` for
    softmax, ``eps`` for layer_norm, slice bounds, ``alpha`` for scale).
    """
    rule = _VJP_RULES.get(op)
    if rule is None:
        raise UnsupportedOpError(f"no gradient rule for op '{op}'")
    arrays = tuple(t.array for t in inputs)
    grads = rule(arrays, extras, cotangent.array)
    return tuple(_wrap(np.ascontiguousarray(gr, dtype=np.float64)) for gr in grads)


def backward(tape: Tape, output: Tensor, cotangent: Tensor) -> "Grads":
    """Reverse sweep over a recorded tape, seeding ``output`` with ``cotangent``."""
    if output.shape != cotangent.shape:
        raise ShapeError(
            f"cotangent shape {cotangent.shape} does not match output {output.shape}"
        )
    adjoint = {id(output): cotangent.array.copy()}
    keep = {id(output): output}
    for op, inputs, out, extras in reversed(tape.nodes):
        g = adjoint.pop(id(out), None)
        if g is None:
            continue
        rule = _VJP_RULES.get(op)
        if rule is None:
            raise UnsupportedOpError(f"no gradient rule for op '{op}'")
        grads = rule(tuple(t.array for t in inputs), extras, g)
        for t, gr in zip(inputs, grads):
            key = id(t)
            keep[key] = t
            if key in adjoint:
                adjoint[key] = adjoint[key] + gr
            else:
                adjoint[key] = np.asarray(gr, dtype=np.float64)
    return Grads(adjoint, keep)


class Grads:
    """Gradient lookup produced by :func:`backward`, keyed by tensor identity."""

    def __init__(self, adjoint, keep):
        self._adjoint = adjoint
        self._keep = keep  # holds tensors alive so id() keys stay valid

    def wrt(self, t: Tensor) -> Tensor:
        """Gradient with respect to ``t``; zeros if ``t`` did not influence the
        output."""
        g = self._adjoint.get(id(t))
        if g is None:
            return zeros(t.shape)
        return _wrap(g.reshape(t.shape).copy())
