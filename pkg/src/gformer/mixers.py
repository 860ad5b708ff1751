"""Pluggable spatial mixers, channel mixers, and the pairwise interactions.

A spatial mixer consumes an (H, W, d) map. Map-reducing kinds (full-extent
depthwise convolution, global mean pooling) emit a (1, 1, d) summary; the
sequence kinds (attention, Fourier mixing, position MLP) emit a flattened
(H*W, d) map. The result is tagged so the assembler knows whether the value
must be broadcast before interacting with the input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

from . import tensor as T
from .errors import ConfigError

INTERACTION_NONE = "none"
INTERACTION_HADAMARD = "hadamard_broadcast"
INTERACTIONS = (INTERACTION_NONE, INTERACTION_HADAMARD)

ACTIVATIONS = {
    "relu": T.relu,
    "sigmoid": T.sigmoid,
    "swish": T.swish,
    "identity": lambda t: t,
}


# ---------------------------------------------------------------------------
# Mixer kinds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MultiHeadAttention:
    heads: int
    kind = "multi_head_attention"


@dataclass(frozen=True)
class DepthwiseFullConv:
    kind = "depthwise_full_conv"


@dataclass(frozen=True)
class GlobalMeanPool:
    kind = "global_mean_pool"


@dataclass(frozen=True)
class FourierMix:
    kind = "fourier_mix"


@dataclass(frozen=True)
class SpatialMlp:
    hidden: int
    kind = "spatial_mlp"


@dataclass(frozen=True)
class Mlp:
    hidden: int
    activation: str = "swish"
    kind = "mlp"


@dataclass(frozen=True)
class Pointwise:
    kind = "pointwise"


@dataclass(frozen=True)
class SeGate:
    reduction: int
    kind = "se_gate"


SUMMARY_KINDS = ("depthwise_full_conv", "global_mean_pool")


def validate_spatial(kind, d: int) -> None:
    if isinstance(kind, MultiHeadAttention):
        if kind.heads < 1 or d % kind.heads != 0:
            raise ConfigError(f"heads={kind.heads} does not divide feature dim d={d}")
    elif isinstance(kind, SpatialMlp):
        if kind.hidden < 1:
            raise ConfigError(f"spatial_mlp hidden={kind.hidden} must be positive")
    elif not isinstance(kind, (DepthwiseFullConv, GlobalMeanPool, FourierMix)):
        raise ConfigError(f"unknown spatial mixer {kind!r}")


def validate_channel(kind, d: int) -> None:
    if isinstance(kind, Mlp):
        if kind.hidden < 1:
            raise ConfigError(f"mlp hidden={kind.hidden} must be positive")
        if kind.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{kind.activation}'")
    elif isinstance(kind, SeGate):
        if kind.reduction < 1 or d % kind.reduction != 0 or d // kind.reduction < 1:
            raise ConfigError(
                f"se_gate reduction={kind.reduction} incompatible with d={d}"
            )
    elif not isinstance(kind, Pointwise):
        raise ConfigError(f"unknown channel mixer {kind!r}")


def is_summary_kind(kind) -> bool:
    return isinstance(kind, (DepthwiseFullConv, GlobalMeanPool))


# ---------------------------------------------------------------------------
# Parameter shape specs: (name, shape, fan_in), in enumeration order
# ---------------------------------------------------------------------------


def spatial_param_specs(kind, h: int, w: int, d: int):
    if isinstance(kind, MultiHeadAttention):
        # no key bias: a constant shift of every key moves each score row
        # uniformly and softmax is shift-invariant, so the parameter could
        # never influence the output
        return [
            ("wq", (d, d), d),
            ("bq", (d,), d),
            ("wk", (d, d), d),
            ("wv", (d, d), d),
            ("bv", (d,), d),
            ("wo", (d, d), d),
            ("bo", (d,), d),
        ]
    if isinstance(kind, DepthwiseFullConv):
        return [("kernel", (h, w, d), h * w), ("bias", (d,), h * w)]
    if isinstance(kind, SpatialMlp):
        n = h * w
        return [
            ("w1", (n, kind.hidden), n),
            ("b1", (kind.hidden,), n),
            ("w2", (kind.hidden, n), kind.hidden),
            ("b2", (n,), kind.hidden),
        ]
    return []  # pooling and Fourier mixing are parameter-free


def channel_param_specs(kind, d: int):
    if isinstance(kind, Mlp):
        return [
            ("w1", (d, kind.hidden), d),
            ("b1", (kind.hidden,), d),
            ("w2", (kind.hidden, d), kind.hidden),
            ("b2", (d,), kind.hidden),
        ]
    if isinstance(kind, Pointwise):
        return [("weight", (d, d), d), ("bias", (d,), d)]
    if isinstance(kind, SeGate):
        dr = d // kind.reduction
        return [
            ("w1", (d, dr), d),
            ("b1", (dr,), d),
            ("w2", (dr, d), dr),
            ("b2", (d,), dr),
        ]
    raise ConfigError(f"unknown channel mixer {kind!r}")


# ---------------------------------------------------------------------------
# Mixer evaluation
# ---------------------------------------------------------------------------


class MixResult(NamedTuple):
    value: T.Tensor  # (n, d) map or (1, 1, d) summary
    summary: bool


def multi_head_attention(x: T.Tensor, params, heads: int) -> T.Tensor:
    """Scaled dot-product self-attention over the rows of an (n, d) input."""
    n, d = x.shape
    if heads < 1 or d % heads != 0:
        raise ConfigError(f"heads={heads} does not divide feature dim d={d}")
    head_dim = d // heads
    q = T.linear(x, params["wq"], params["bq"])
    k = T.matmul(x, params["wk"])
    v = T.linear(x, params["wv"], params["bv"])
    inv_scale = 1.0 / math.sqrt(head_dim)
    outs = []
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = T.slice_cols(q, lo, hi)
        kh = T.slice_cols(k, lo, hi)
        vh = T.slice_cols(v, lo, hi)
        scores = T.scale(T.matmul(qh, T.transpose2d(kh)), inv_scale)
        attn = T.softmax(scores, axis=1)
        outs.append(T.matmul(attn, vh))
    merged = outs[0] if heads == 1 else T.concat_cols(outs)
    return T.linear(merged, params["wo"], params["bo"])


def spatial_mlp(x: T.Tensor, params) -> T.Tensor:
    """Dense mixing across the n positions, applied per channel."""
    xt = T.transpose2d(x)  # (d, n)
    hidden = ACTIVATIONS["swish"](T.linear(xt, params["w1"], params["b1"]))
    return T.transpose2d(T.linear(hidden, params["w2"], params["b2"]))


def spatial_summary(kind, x: T.Tensor, params) -> MixResult:
    """Apply the configured spatial mixer to an (H, W, d) map.

    Returns a (1, 1, d) summary for the map-reducing kinds and a flattened
    (H*W, d) map for the sequence kinds, tagged accordingly.
    """
    if x.array.ndim != 3:
        raise ConfigError(f"spatial mixer input must be an (H, W, d) map, got {x.shape}")
    h, w, d = x.shape
    validate_spatial(kind, d)
    if isinstance(kind, DepthwiseFullConv):
        return MixResult(T.depthwise_conv_full(x, params["kernel"], params["bias"]), True)
    if isinstance(kind, GlobalMeanPool):
        return MixResult(T.mean_pool_hw(x), True)
    flat = T.reshape(x, (h * w, d))
    if isinstance(kind, MultiHeadAttention):
        return MixResult(multi_head_attention(flat, params, kind.heads), False)
    if isinstance(kind, FourierMix):
        return MixResult(T.dft2_real(flat), False)
    if isinstance(kind, SpatialMlp):
        return MixResult(spatial_mlp(flat, params), False)
    raise ConfigError(f"unknown spatial mixer {kind!r}")


def channel_mix(kind, v: T.Tensor, params) -> T.Tensor:
    """Apply the configured per-position channel mixer to (rows, d) input."""
    if v.array.ndim != 2:
        raise ConfigError(f"channel mixer input must be rank 2, got {v.shape}")
    rows, d = v.shape
    validate_channel(kind, d)
    if isinstance(kind, Mlp):
        act = ACTIVATIONS[kind.activation]
        hidden = act(T.linear(v, params["w1"], params["b1"]))
        return T.linear(hidden, params["w2"], params["b2"])
    if isinstance(kind, Pointwise):
        mapped = T.pointwise_conv(
            T.reshape(v, (rows, 1, d)), params["weight"], params["bias"]
        )
        return T.reshape(mapped, (rows, d))
    if isinstance(kind, SeGate):
        squeezed = T.relu(T.linear(v, params["w1"], params["b1"]))
        return T.sigmoid(T.linear(squeezed, params["w2"], params["b2"]))
    raise ConfigError(f"unknown channel mixer {kind!r}")
