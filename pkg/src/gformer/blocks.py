"""Standalone reference blocks, coded straight-line as equivalence oracles.

Each function wires its block directly out of tensor primitives, without the
configurable dataflow in :mod:`gformer.core` or the mixer dispatch in
:mod:`gformer.mixers`. Parameter names match what ``assemble`` produces for
the corresponding preset so the two routes can share one parameter set.
"""

from __future__ import annotations

import math

from . import tensor as T
from .core import LAYER_NORM_EPS
from .errors import ConfigError, ShapeError


def cat_block(x: T.Tensor, params) -> T.Tensor:
    """Gate the input with its own global summary.

    A full-extent depthwise convolution reduces the (H, W, D) map to one
    vector per channel, a pointwise convolution mixes channels, and the
    result is broadcast back and multiplied elementwise into the input.
    """
    if x.array.ndim != 3:
        raise ShapeError(f"cat_block needs an (H, W, D) input, got {x.shape}")
    h, w, _ = x.shape
    summary = T.depthwise_conv_full(x, params["spatial.kernel"], params["spatial.bias"])
    mixed = T.pointwise_conv(summary, params["channel.weight"], params["channel.bias"])
    gate = T.broadcast_vector(mixed, (h, w))
    return T.hadamard(x, gate)


def transformer_encoder_layer(x: T.Tensor, params, heads: int, ffn_hidden: int) -> T.Tensor:
    """Pre-norm encoder layer: attention residual, then feed-forward residual."""
    if x.array.ndim != 2:
        raise ShapeError(f"encoder layer needs an (n, d) input, got {x.shape}")
    n, d = x.shape
    if heads < 1 or d % heads != 0:
        raise ConfigError(f"heads={heads} does not divide d={d}")
    if params["channel.w1"].shape != (d, ffn_hidden):
        raise ConfigError(
            f"ffn_hidden={ffn_hidden} does not match params {params['channel.w1'].shape}"
        )
    head_dim = d // heads

    normed = T.layer_norm(x, params["norm1.gamma"], params["norm1.beta"], LAYER_NORM_EPS)
    q = T.linear(normed, params["spatial.wq"], params["spatial.bq"])
    k = T.matmul(normed, params["spatial.wk"])  # key bias would be inert
    v = T.linear(normed, params["spatial.wv"], params["spatial.bv"])
    pieces = []
    for hd in range(heads):
        lo, hi = hd * head_dim, (hd + 1) * head_dim
        # scale the queries up front; equivalent to scaling the scores
        qh = T.scale(T.slice_cols(q, lo, hi), 1.0 / math.sqrt(head_dim))
        scores = T.matmul(qh, T.transpose2d(T.slice_cols(k, lo, hi)))
        attn = T.softmax(scores, axis=1)
        pieces.append(T.matmul(attn, T.slice_cols(v, lo, hi)))
    merged = pieces[0] if heads == 1 else T.concat_cols(pieces)
    attended = T.linear(merged, params["spatial.wo"], params["spatial.bo"])
    h1 = T.add(x, attended)

    normed2 = T.layer_norm(h1, params["norm2.gamma"], params["norm2.beta"], LAYER_NORM_EPS)
    hidden = T.swish(T.linear(normed2, params["channel.w1"], params["channel.b1"]))
    ffn = T.linear(hidden, params["channel.w2"], params["channel.b2"])
    return T.add(h1, ffn)


def squeeze_excite_block(x: T.Tensor, params, reduction: int) -> T.Tensor:
    """Rescale channels by a sigmoid gate computed from the pooled map."""
    if x.array.ndim != 3:
        raise ShapeError(f"squeeze_excite_block needs an (H, W, C) input, got {x.shape}")
    h, w, c = x.shape
    if reduction < 1 or c % reduction != 0:
        raise ShapeError(f"reduction={reduction} does not divide channels {c}")
    pooled = T.reshape(T.mean_pool_hw(x), (1, c))
    squeezed = T.relu(T.linear(pooled, params["channel.w1"], params["channel.b1"]))
    gate = T.sigmoid(T.linear(squeezed, params["channel.w2"], params["channel.b2"]))
    grid = T.broadcast_vector(T.reshape(gate, (c,)), (h, w))
    return T.hadamard(x, grid)


def mlp_mixer_block(x: T.Tensor, params) -> T.Tensor:
    """Token-mixing MLP residual followed by a channel-mixing MLP residual."""
    if x.array.ndim != 2:
        raise ShapeError(f"mlp_mixer_block needs an (n, d) input, got {x.shape}")
    normed = T.layer_norm(x, params["norm1.gamma"], params["norm1.beta"], LAYER_NORM_EPS)
    tokens = T.transpose2d(normed)
    tokens = T.swish(T.linear(tokens, params["spatial.w1"], params["spatial.b1"]))
    tokens = T.linear(tokens, params["spatial.w2"], params["spatial.b2"])
    h1 = T.add(x, T.transpose2d(tokens))

    normed2 = T.layer_norm(h1, params["norm2.gamma"], params["norm2.beta"], LAYER_NORM_EPS)
    hidden = T.swish(T.linear(normed2, params["channel.w1"], params["channel.b1"]))
    return T.add(h1, T.linear(hidden, params["channel.w2"], params["channel.b2"]))


def fnet_block(x: T.Tensor, params) -> T.Tensor:
    """Fourier token-mixing residual followed by a feed-forward residual."""
    if x.array.ndim != 2:
        raise ShapeError(f"fnet_block needs an (n, d) input, got {x.shape}")
    normed = T.layer_norm(x, params["norm1.gamma"], params["norm1.beta"], LAYER_NORM_EPS)
    h1 = T.add(x, T.dft2_real(normed))

    normed2 = T.layer_norm(h1, params["norm2.gamma"], params["norm2.beta"], LAYER_NORM_EPS)
    hidden = T.swish(T.linear(normed2, params["channel.w1"], params["channel.b1"]))
    return T.add(h1, T.linear(hidden, params["channel.w2"], params["channel.b2"]))


def reference_forward(config, params, x: T.Tensor) -> T.Tensor:
    """Dispatch a preset-shaped config to its standalone reference block."""
    from . import mixers  # kind classes only; no shared dataflow

    spatial, channel = config.spatial, config.channel
    if isinstance(spatial, mixers.MultiHeadAttention) and isinstance(channel, mixers.Mlp):
        return transformer_encoder_layer(x, params, spatial.heads, channel.hidden)
    if isinstance(spatial, mixers.DepthwiseFullConv) and isinstance(channel, mixers.Pointwise):
        return cat_block(x, params)
    if isinstance(spatial, mixers.GlobalMeanPool) and isinstance(channel, mixers.SeGate):
        return squeeze_excite_block(x, params, channel.reduction)
    if isinstance(spatial, mixers.SpatialMlp) and isinstance(channel, mixers.Mlp):
        return mlp_mixer_block(x, params)
    if isinstance(spatial, mixers.FourierMix) and isinstance(channel, mixers.Mlp):
        return fnet_block(x, params)
    raise ConfigError(
        f"no reference block for spatial={spatial!r}, channel={channel!r}"
    )
