"""Multi-resolution anchor-feature fusion through one encoder layer.

Feature maps from several pyramid levels are projected into a shared d-wide
domain (one projection matrix per level, one learned bias per anchor slot so
anchors at the same location stay distinguishable), flattened into a single
sequence, fused by a positional-encoding-free transformer encoder layer, and
scattered back to per-level grids. Row order is deterministic: level-major,
then row-major over locations, with the anchor index varying fastest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import blocks
from . import tensor as T
from .core import BlockParams
from .errors import ConfigError, IntegrityError, ShapeError


@dataclass(frozen=True)
class PyramidLevel:
    h: int
    w: int
    c: int
    map: T.Tensor

    def validate(self):
        if self.h < 1 or self.w < 1 or self.c < 1:
            raise ShapeError(f"pyramid level extents must be positive, got {(self.h, self.w, self.c)}")
        if self.map.shape != (self.h, self.w, self.c):
            raise ShapeError(
                f"pyramid level map shape {self.map.shape} does not match {(self.h, self.w, self.c)}"
            )


@dataclass(frozen=True)
class FeaturePyramid:
    levels: tuple
    anchors_per_location: int

    def validate(self):
        if not self.levels:
            raise ShapeError("feature pyramid needs at least one level")
        if self.anchors_per_location < 1:
            raise ShapeError(f"anchors_per_location must be positive, got {self.anchors_per_location}")
        for lvl in self.levels:
            lvl.validate()

    @property
    def total_rows(self) -> int:
        return self.anchors_per_location * sum(l.h * l.w for l in self.levels)


@dataclass(frozen=True)
class FusedSequence:
    seq: T.Tensor  # (n, d)
    index: tuple  # row -> (level, y, x, anchor)
    level_shapes: tuple  # (H_i, W_i) per level
    anchors: int


def pyramid_from_json(doc) -> FeaturePyramid:
    """Parse {"levels":[{"h","w","c","data"}], "anchors": A}; keys are strict."""
    if not isinstance(doc, dict) or set(doc) != {"levels", "anchors"}:
        raise ConfigError(f"pyramid document must have exactly 'levels' and 'anchors', got {sorted(doc) if isinstance(doc, dict) else doc!r}")
    levels = []
    for i, lv in enumerate(doc["levels"]):
        if not isinstance(lv, dict) or set(lv) != {"h", "w", "c", "data"}:
            raise ConfigError(f"pyramid level {i} must have exactly h, w, c, data")
        h, w, c = int(lv["h"]), int(lv["w"]), int(lv["c"])
        levels.append(PyramidLevel(h, w, c, T.Tensor(lv["data"], shape=(h, w, c))))
    pyr = FeaturePyramid(tuple(levels), int(doc["anchors"]))
    pyr.validate()
    return pyr


def pyramid_from_json_str(text: str) -> FeaturePyramid:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid pyramid JSON: {exc}") from exc
    return pyramid_from_json(doc)


def assemble_taff(level_channels, anchors: int, d: int, heads: int, ffn_hidden: int, seed: int):
    """Draw projection and encoder parameters for a fusion stack.

    Returns (proj_params, encoder_params). Projection entries are
    ``level{i}.weight`` (C_i x d) and ``level{i}.bias`` (anchors x d); encoder
    entries follow the transformer encoder layer naming.
    """
    if d < 1 or heads < 1 or d % heads != 0:
        raise ConfigError(f"heads={heads} does not divide d={d}")
    if ffn_hidden < 1:
        raise ConfigError(f"ffn_hidden must be positive, got {ffn_hidden}")
    if anchors < 1:
        raise ConfigError(f"anchors must be positive, got {anchors}")
    rng = np.random.default_rng(seed)

    def draw(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return T.Tensor(rng.uniform(-bound, bound, size=shape))

    proj_entries = []
    for i, c in enumerate(level_channels):
        if c < 1:
            raise ConfigError(f"level {i} channel count must be positive, got {c}")
        proj_entries.append((f"level{i}.weight", draw((c, d), c)))
        proj_entries.append((f"level{i}.bias", draw((anchors, d), c)))

    enc_entries = [
        ("norm1.gamma", T.ones((d,))),
        ("norm1.beta", T.zeros((d,))),
    ]
    for nm in ("wq", "wk", "wv", "wo"):
        enc_entries.append((f"spatial.{nm}", draw((d, d), d)))
        if nm != "wk":  # the key bias would be inert through softmax
            enc_entries.append((f"spatial.b{nm[1]}", draw((d,), d)))
    enc_entries.append(("norm2.gamma", T.ones((d,))))
    enc_entries.append(("norm2.beta", T.zeros((d,))))
    enc_entries.append(("channel.w1", draw((d, ffn_hidden), d)))
    enc_entries.append(("channel.b1", draw((ffn_hidden,), d)))
    enc_entries.append(("channel.w2", draw((ffn_hidden, d), ffn_hidden)))
    enc_entries.append(("channel.b2", draw((d,), ffn_hidden)))
    return BlockParams(proj_entries), BlockParams(enc_entries)


def gather(pyramid: FeaturePyramid, proj_params: BlockParams, d: int) -> FusedSequence:
    """Project every (location, anchor) slot of the pyramid to one d-row."""
    pyramid.validate()
    anchors = pyramid.anchors_per_location
    rows = []
    index = []
    for li, lvl in enumerate(pyramid.levels):
        wname, bname = f"level{li}.weight", f"level{li}.bias"
        if wname not in proj_params or bname not in proj_params:
            raise ConfigError(f"missing projection parameters for level {li}")
        weight = proj_params[wname]
        bias = proj_params[bname]
        if weight.shape != (lvl.c, d):
            raise ConfigError(
                f"level {li} projection shape {weight.shape} does not match ({lvl.c}, {d})"
            )
        if bias.shape != (anchors, d):
            raise ConfigError(
                f"level {li} anchor bias shape {bias.shape} does not match ({anchors}, {d})"
            )
        feats = T.reshape(lvl.map, (lvl.h * lvl.w, lvl.c))
        per_anchor = [
            T.linear(feats, weight, T.reshape(T.slice_rows(bias, a, a + 1), (d,)))
            for a in range(anchors)
        ]
        for y in range(lvl.h):
            for x in range(lvl.w):
                loc = y * lvl.w + x
                for a in range(anchors):
                    rows.append(T.slice_rows(per_anchor[a], loc, loc + 1))
                    index.append((li, y, x, a))
    seq = rows[0] if len(rows) == 1 else T.concat_rows(rows)
    return FusedSequence(
        seq=seq,
        index=tuple(index),
        level_shapes=tuple((l.h, l.w) for l in pyramid.levels),
        anchors=anchors,
    )


def fuse(fs: FusedSequence, encoder_params: BlockParams, heads: int) -> FusedSequence:
    """Run the encoder layer over the fused rows; the index is untouched."""
    ffn_hidden = encoder_params["channel.w1"].shape[1]
    seq = blocks.transformer_encoder_layer(fs.seq, encoder_params, heads, ffn_hidden)
    return FusedSequence(seq=seq, index=fs.index, level_shapes=fs.level_shapes, anchors=fs.anchors)


def scatter(fs: FusedSequence):
    """Relayout rows back to per-level (H, W, anchors*d) tensors."""
    n, d = fs.seq.shape
    if len(fs.index) != n:
        raise IntegrityError(f"index has {len(fs.index)} entries for {n} rows")
    seen = set()
    outs = [np.zeros((h, w, fs.anchors * d)) for h, w in fs.level_shapes]
    for row, entry in enumerate(fs.index):
        li, y, x, a = entry
        if not 0 <= li < len(fs.level_shapes):
            raise IntegrityError(f"row {row} references unknown level {li}")
        h, w = fs.level_shapes[li]
        if not (0 <= y < h and 0 <= x < w and 0 <= a < fs.anchors):
            raise IntegrityError(f"row {row} index {entry} is out of bounds")
        if entry in seen:
            raise IntegrityError(f"duplicate index entry {entry}")
        seen.add(entry)
        outs[li][y, x, a * d : (a + 1) * d] = fs.seq.array[row]
    expected = fs.anchors * sum(h * w for h, w in fs.level_shapes)
    if len(seen) != expected:
        raise IntegrityError(f"index covers {len(seen)} of {expected} slots")
    return [T.Tensor(o) for o in outs]


def permute_rows(fs: FusedSequence, perm) -> FusedSequence:
    """Reorder sequence rows (and their index entries) by ``perm``."""
    perm = list(perm)
    n = fs.seq.shape[0]
    if sorted(perm) != list(range(n)):
        raise IntegrityError(f"perm is not a permutation of {n} rows")
    seq = T.Tensor(fs.seq.array[perm].copy())
    index = tuple(fs.index[i] for i in perm)
    return FusedSequence(seq=seq, index=index, level_shapes=fs.level_shapes, anchors=fs.anchors)


def taff_param_count(d: int, heads: int, ffn_hidden: int, level_channels, anchors: int = 1) -> int:
    """Closed-form parameter count of the fusion stack.

    Per level: C_i*d projection weights plus anchors*d bias entries. Encoder:
    four d x d attention projections with query/value/output biases (the key
    bias is omitted as inert), the two feed-forward maps with biases, and two
    (gamma, beta) normalization pairs.
    """
    if d < 1 or heads < 1 or d % heads != 0:
        raise ConfigError(f"heads={heads} does not divide d={d}")
    if ffn_hidden < 1 or anchors < 1:
        raise ConfigError(f"invalid dims ffn_hidden={ffn_hidden}, anchors={anchors}")
    projections = sum(c * d + anchors * d for c in level_channels)
    attention = 4 * d * d + 3 * d
    ffn = (d * ffn_hidden + ffn_hidden) + (ffn_hidden * d + d)
    norms = 2 * (2 * d)
    return projections + attention + ffn + norms
