"""The generalized block dataflow and its named reductions.

One configurable graph covers all supported architectures:

    a = norm(x)
    s = spatial_mix(a)                      # (n, d) map or (1, 1, d) summary
    u = x + s          if residual1 else s
    b = norm(u)
    c = channel_mix(b)
    v = u + c          if residual2 else c
    w = x (*) broadcast(v)  if interaction else v
    out = x + w        if residual3 else w

Summary-producing spatial mixers force residual1 = residual2 = False and an
elementwise interaction stage, since their intermediate no longer matches the
input shape. Presets configure this graph to reproduce the classic blocks,
which module ``blocks`` re-implements independently as oracles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import mixers
from . import tensor as T
from .errors import ConfigError, ShapeError

LAYER_NORM_EPS = 1e-5

NORM_KINDS = ("layer_norm", "identity")

PRESET_NAMES = ("transformer", "metaformer", "cat", "squeeze_excite", "mlp_mixer", "fnet")


class BlockParams:
    """Ordered, uniquely named map of parameter tensors."""

    def __init__(self, entries=()):
        self._entries = {}
        items = entries.items() if hasattr(entries, "items") else entries
        for name, t in items:
            if name in self._entries:
                raise ConfigError(f"duplicate parameter name '{name}'")
            self._entries[name] = t

    def __getitem__(self, name) -> T.Tensor:
        return self._entries[name]

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def keys(self):
        return self._entries.keys()

    def items(self):
        return self._entries.items()

    def sub(self, prefix: str) -> "BlockParams":
        """View of the entries under ``prefix``, with the prefix stripped."""
        return BlockParams(
            (name[len(prefix):], t)
            for name, t in self._entries.items()
            if name.startswith(prefix)
        )

    def replace(self, updates) -> "BlockParams":
        """New BlockParams with some tensors swapped, order preserved."""
        unknown = set(updates) - set(self._entries)
        if unknown:
            raise ConfigError(f"unknown parameter names {sorted(unknown)}")
        return BlockParams(
            (name, updates.get(name, t)) for name, t in self._entries.items()
        )


@dataclass(frozen=True)
class GFormerConfig:
    d: int
    spatial: object  # one of the mixers spatial kinds
    channel: object  # one of the mixers channel kinds
    interaction: str
    residual1: bool
    residual2: bool
    residual3: bool
    norm: str
    spatial_shape: object  # flat int n, or (H, W)

    def validate(self) -> None:
        if self.d < 1:
            raise ConfigError(f"d must be positive, got {self.d}")
        _grid_of(self.spatial_shape)
        mixers.validate_spatial(self.spatial, self.d)
        mixers.validate_channel(self.channel, self.d)
        if self.interaction not in mixers.INTERACTIONS:
            raise ConfigError(f"unknown interaction '{self.interaction}'")
        if self.norm not in NORM_KINDS:
            raise ConfigError(f"unknown norm '{self.norm}'")
        if mixers.is_summary_kind(self.spatial):
            if self.residual1 or self.residual2:
                raise ConfigError(
                    f"spatial mixer '{self.spatial.kind}' produces a summary; "
                    "residual1 and residual2 require a map-shaped mixer output"
                )
            if self.interaction != mixers.INTERACTION_HADAMARD:
                raise ConfigError(
                    f"spatial mixer '{self.spatial.kind}' produces a summary; "
                    "interaction must be 'hadamard_broadcast' to restore the input shape"
                )


def _grid_of(spatial_shape):
    """Normalize a flat length or (H, W) pair to a grid, flagging flat input."""
    if isinstance(spatial_shape, bool):
        raise ConfigError(f"invalid spatial_shape {spatial_shape!r}")
    if isinstance(spatial_shape, int):
        if spatial_shape < 1:
            raise ConfigError(f"sequence length must be positive, got {spatial_shape}")
        return (spatial_shape, 1), True
    try:
        h, w = (int(s) for s in spatial_shape)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid spatial_shape {spatial_shape!r}") from None
    if h < 1 or w < 1:
        raise ConfigError(f"spatial extents must be positive, got {(h, w)}")
    return (h, w), False


@dataclass(frozen=True)
class Block:
    """A validated configuration bound to its input grid."""

    config: GFormerConfig
    grid: tuple
    flat_input: bool

    @property
    def n(self) -> int:
        return self.grid[0] * self.grid[1]


def assemble(config: GFormerConfig, seed: int):
    """Validate a config and draw its parameters.

    Weights are uniform on (-1/sqrt(fan_in), +1/sqrt(fan_in)); normalization
    scales start at one and shifts at zero. The same (config, seed) pair
    always produces bit-identical parameters.
    """
    config.validate()
    grid, flat = _grid_of(config.spatial_shape)
    h, w = grid
    rng = np.random.default_rng(seed)
    entries = []

    def draw(name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 0.0
        entries.append((name, T.Tensor(rng.uniform(-bound, bound, size=shape))))

    def norm_entries(prefix):
        if config.norm == "layer_norm":
            entries.append((prefix + ".gamma", T.ones((config.d,))))
            entries.append((prefix + ".beta", T.zeros((config.d,))))

    norm_entries("norm1")
    for name, shape, fan in mixers.spatial_param_specs(config.spatial, h, w, config.d):
        draw("spatial." + name, shape, fan)
    norm_entries("norm2")
    for name, shape, fan in mixers.channel_param_specs(config.channel, config.d):
        draw("channel." + name, shape, fan)
    return Block(config, grid, flat), BlockParams(entries)


def forward(block: Block, params: BlockParams, x: T.Tensor) -> T.Tensor:
    """Run the block dataflow on one input tensor."""
    cfg = block.config
    h, w = block.grid
    n, d = block.n, cfg.d
    expected = (n, d) if block.flat_input else (h, w, d)
    if x.shape != expected:
        raise ShapeError(f"input shape {x.shape} does not match block shape {expected}")

    xf = x if block.flat_input else T.reshape(x, (n, d))
    a = _normed(cfg, params, "norm1", xf)
    mix = mixers.spatial_summary(cfg.spatial, T.reshape(a, (h, w, d)), params.sub("spatial."))
    if mix.summary:
        u = T.reshape(mix.value, (1, d))
    elif cfg.residual1:
        u = T.add(xf, mix.value)
    else:
        u = mix.value
    b = _normed(cfg, params, "norm2", u)
    c = mixers.channel_mix(cfg.channel, b, params.sub("channel."))
    v = T.add(u, c) if cfg.residual2 else c

    if cfg.interaction == mixers.INTERACTION_HADAMARD:
        if mix.summary:
            grid_map = T.broadcast_vector(T.reshape(v, (d,)), (h, w))
            gate = T.reshape(grid_map, (n, d))
        else:
            gate = v
        y = T.hadamard(xf, gate)
    else:
        y = v

    out = T.add(xf, y) if cfg.residual3 else y
    return out if block.flat_input else T.reshape(out, (h, w, d))


def _normed(cfg, params, prefix, t):
    if cfg.norm == "identity":
        return t
    return T.layer_norm(t, params[prefix + ".gamma"], params[prefix + ".beta"], LAYER_NORM_EPS)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


def default_heads(d: int) -> int:
    return 2 if d % 2 == 0 else 1


def default_reduction(d: int) -> int:
    for r in (4, 2):
        if d % r == 0 and d // r >= 1:
            return r
    return 1


def preset(
    name: str,
    d: int,
    spatial_shape,
    heads: int | None = None,
    ffn_hidden: int | None = None,
    token_hidden: int | None = None,
    reduction: int | None = None,
    spatial=None,
) -> GFormerConfig:
    """Configuration table for the named block reductions.

    ``spatial`` lets the metaformer preset plug in any map-producing spatial
    mixer; it defaults to a position MLP. Unspecified dims fall back to
    documented defaults: heads=2 when d is even else 1, ffn_hidden=2*d,
    token_hidden=max(1, n//2), reduction=4 when it divides d (else 2, else 1).
    """
    grid, _ = _grid_of(spatial_shape)
    n = grid[0] * grid[1]
    heads = default_heads(d) if heads is None else heads
    ffn_hidden = 2 * d if ffn_hidden is None else ffn_hidden
    token_hidden = max(1, n // 2) if token_hidden is None else token_hidden
    reduction = default_reduction(d) if reduction is None else reduction

    pre_norm_pair = dict(
        interaction=mixers.INTERACTION_NONE,
        residual1=True,
        residual2=True,
        residual3=False,
        norm="layer_norm",
    )
    gated_pair = dict(
        interaction=mixers.INTERACTION_HADAMARD,
        residual1=False,
        residual2=False,
        residual3=False,
        norm="identity",
    )

    if name == "transformer":
        return GFormerConfig(
            d=d,
            spatial=mixers.MultiHeadAttention(heads),
            channel=mixers.Mlp(ffn_hidden),
            spatial_shape=spatial_shape,
            **pre_norm_pair,
        )
    if name == "metaformer":
        if spatial is None:
            spatial = mixers.SpatialMlp(token_hidden)
        return GFormerConfig(
            d=d,
            spatial=spatial,
            channel=mixers.Mlp(ffn_hidden),
            spatial_shape=spatial_shape,
            **pre_norm_pair,
        )
    if name == "cat":
        return GFormerConfig(
            d=d,
            spatial=mixers.DepthwiseFullConv(),
            channel=mixers.Pointwise(),
            spatial_shape=spatial_shape,
            **gated_pair,
        )
    if name == "squeeze_excite":
        return GFormerConfig(
            d=d,
            spatial=mixers.GlobalMeanPool(),
            channel=mixers.SeGate(reduction),
            spatial_shape=spatial_shape,
            **gated_pair,
        )
    if name == "mlp_mixer":
        return GFormerConfig(
            d=d,
            spatial=mixers.SpatialMlp(token_hidden),
            channel=mixers.Mlp(ffn_hidden),
            spatial_shape=spatial_shape,
            **pre_norm_pair,
        )
    if name == "fnet":
        return GFormerConfig(
            d=d,
            spatial=mixers.FourierMix(),
            channel=mixers.Mlp(ffn_hidden),
            spatial_shape=spatial_shape,
            **pre_norm_pair,
        )
    raise ConfigError(f"unknown preset '{name}' (expected one of {PRESET_NAMES})")


# ---------------------------------------------------------------------------
# JSON serialization (strict field set)
# ---------------------------------------------------------------------------

_CONFIG_FIELDS = (
    "d",
    "spatial",
    "channel",
    "interaction",
    "residual1",
    "residual2",
    "residual3",
    "norm",
    "spatial_shape",
)


def _kind_to_json(kind):
    doc = {"kind": kind.kind}
    if isinstance(kind, mixers.MultiHeadAttention):
        doc["heads"] = kind.heads
    elif isinstance(kind, mixers.SpatialMlp):
        doc["hidden"] = kind.hidden
    elif isinstance(kind, mixers.Mlp):
        doc["hidden"] = kind.hidden
        doc["activation"] = kind.activation
    elif isinstance(kind, mixers.SeGate):
        doc["reduction"] = kind.reduction
    return doc


_KIND_SCHEMAS = {
    "multi_head_attention": (mixers.MultiHeadAttention, ("heads",)),
    "depthwise_full_conv": (mixers.DepthwiseFullConv, ()),
    "global_mean_pool": (mixers.GlobalMeanPool, ()),
    "fourier_mix": (mixers.FourierMix, ()),
    "spatial_mlp": (mixers.SpatialMlp, ("hidden",)),
    "mlp": (mixers.Mlp, ("hidden", "activation")),
    "pointwise": (mixers.Pointwise, ()),
    "se_gate": (mixers.SeGate, ("reduction",)),
}


def _kind_from_json(doc, role):
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ConfigError(f"{role} mixer must be an object with a 'kind' field, got {doc!r}")
    name = doc["kind"]
    if name not in _KIND_SCHEMAS:
        raise ConfigError(f"unknown {role} mixer kind '{name}'")
    cls, fields = _KIND_SCHEMAS[name]
    extra = set(doc) - {"kind", *fields}
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)} in {role} mixer '{name}'")
    missing = [f for f in fields if f not in doc]
    if missing:
        raise ConfigError(f"{role} mixer '{name}' missing fields {missing}")
    return cls(**{f: doc[f] for f in fields})


def config_to_json(config: GFormerConfig) -> dict:
    shape = config.spatial_shape
    return {
        "d": config.d,
        "spatial": _kind_to_json(config.spatial),
        "channel": _kind_to_json(config.channel),
        "interaction": config.interaction,
        "residual1": config.residual1,
        "residual2": config.residual2,
        "residual3": config.residual3,
        "norm": config.norm,
        "spatial_shape": shape if isinstance(shape, int) else list(shape),
    }


def config_from_json(doc: dict) -> GFormerConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"config document must be an object, got {type(doc).__name__}")
    extra = set(doc) - set(_CONFIG_FIELDS)
    if extra:
        raise ConfigError(f"unknown config keys {sorted(extra)}")
    missing = [f for f in _CONFIG_FIELDS if f not in doc]
    if missing:
        raise ConfigError(f"config missing keys {missing}")
    shape = doc["spatial_shape"]
    if isinstance(shape, list):
        if len(shape) != 2:
            raise ConfigError(f"spatial_shape list must have two extents, got {shape}")
        shape = (int(shape[0]), int(shape[1]))
    config = GFormerConfig(
        d=int(doc["d"]),
        spatial=_kind_from_json(doc["spatial"], "spatial"),
        channel=_kind_from_json(doc["channel"], "channel"),
        interaction=doc["interaction"],
        residual1=bool(doc["residual1"]),
        residual2=bool(doc["residual2"]),
        residual3=bool(doc["residual3"]),
        norm=doc["norm"],
        spatial_shape=shape,
    )
    config.validate()
    return config


def config_to_json_str(config: GFormerConfig) -> str:
    return json.dumps(config_to_json(config), indent=2)


def config_from_json_str(text: str) -> GFormerConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid config JSON: {exc}") from exc
    return config_from_json(doc)
