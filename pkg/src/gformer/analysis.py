"""FLOP and parameter accounting, latency microbenchmarks, scaling fits,
gradient verification, and the overfit sanity trainer.

FLOP convention (shared with the runtime tally in :mod:`gformer.tensor`):
one multiply-accumulate is 2 FLOPs, affine bias additions are not counted,
exponentials cost 4 FLOPs per element, and pure data movement is free. The
closed forms below predict, stage by stage, exactly what the instrumented
counter observes during a forward pass.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import mixers
from . import tensor as T
from .core import Block, BlockParams, GFormerConfig, assemble, forward, preset
from .errors import ConfigError, InsufficientDataError, NumericError, TrainingDivergedError

# ---------------------------------------------------------------------------
# Parameter and FLOP accounting
# ---------------------------------------------------------------------------


def count_params(params) -> int:
    """Total number of scalar parameters across all entries."""
    total = 0
    for _, t in params.items():
        n = 1
        for s in t.shape:
            n *= s
        total += n
    return total


def _activation_flops(name: str, numel: int) -> int:
    return {"relu": numel, "sigmoid": 4 * numel, "swish": 5 * numel, "identity": 0}[name]


def _spatial_flops(kind, n: int, d: int) -> int:
    if isinstance(kind, mixers.MultiHeadAttention):
        h = kind.heads
        projections = 4 * T.matmul_flops(n, d, d)
        scores_apply = 2 * h * T.matmul_flops(n, d // h, n)
        scaling = h * n * n
        softmaxes = h * T.softmax_flops(n, n)
        return projections + scores_apply + scaling + softmaxes
    if isinstance(kind, mixers.DepthwiseFullConv):
        return 2 * n * d
    if isinstance(kind, mixers.GlobalMeanPool):
        return n * d
    if isinstance(kind, mixers.FourierMix):
        return T.dft2_flops(n, d)
    if isinstance(kind, mixers.SpatialMlp):
        dense = 2 * T.matmul_flops(d, n, kind.hidden)
        return dense + _activation_flops("swish", d * kind.hidden)
    raise ConfigError(f"unknown spatial mixer {kind!r}")


def _channel_flops(kind, rows: int, d: int) -> int:
    if isinstance(kind, mixers.Mlp):
        dense = T.matmul_flops(rows, d, kind.hidden) + T.matmul_flops(rows, kind.hidden, d)
        return dense + _activation_flops(kind.activation, rows * kind.hidden)
    if isinstance(kind, mixers.Pointwise):
        return 2 * rows * d * d
    if isinstance(kind, mixers.SeGate):
        dr = d // kind.reduction
        dense = T.matmul_flops(rows, d, dr) + T.matmul_flops(rows, dr, d)
        return dense + rows * dr + 4 * rows * d
    raise ConfigError(f"unknown channel mixer {kind!r}")


def count_flops(config: GFormerConfig, n: int) -> int:
    """Closed-form FLOPs of one forward pass at n spatial positions.

    Matches the instrumented execution counter exactly. ``n`` is taken as
    given so degenerate counts (n = 0) can be evaluated analytically.
    """
    d = config.d
    summary = mixers.is_summary_kind(config.spatial)
    total = 0
    if config.norm == "layer_norm":
        total += T.layer_norm_flops(n, d)
    total += _spatial_flops(config.spatial, n, d)
    if config.residual1:
        total += n * d
    rows = 1 if summary else n
    if config.norm == "layer_norm":
        total += T.layer_norm_flops(rows, d)
    total += _channel_flops(config.channel, rows, d)
    if config.residual2:
        total += rows * d
    if config.interaction == mixers.INTERACTION_HADAMARD:
        total += n * d
    if config.residual3:
        total += n * d
    return total


def measured_flops(block: Block, params: BlockParams, x: T.Tensor) -> int:
    """FLOPs observed by the runtime counter over one forward pass."""
    with T.tally_flops() as tally:
        forward(block, params, x)
    return tally.flops


# ---------------------------------------------------------------------------
# Scaling fits
# ---------------------------------------------------------------------------


def fit_scaling(points):
    """Least-squares slope of log(time) against log(n).

    Returns (slope, r_squared). Needs at least three distinct positive n
    values with positive times.
    """
    pts = [(float(n), float(t)) for n, t in points]
    if len({n for n, _ in pts}) < 3:
        raise InsufficientDataError(f"need >= 3 distinct n values, got {len(pts)} points")
    if any(n <= 0 or t <= 0 for n, t in pts):
        raise NumericError("fit_scaling needs positive n and positive times")
    x = np.log([n for n, _ in pts])
    y = np.log([t for _, t in pts])
    xbar, ybar = x.mean(), y.mean()
    sxx = ((x - xbar) ** 2).sum()
    slope = ((x - xbar) * (y - ybar)).sum() / sxx
    resid = y - (ybar + slope * (x - xbar))
    sst = ((y - ybar) ** 2).sum()
    r2 = 1.0 if sst == 0.0 else 1.0 - (resid**2).sum() / sst
    return float(slope), float(r2)


# ---------------------------------------------------------------------------
# Latency benchmark
# ---------------------------------------------------------------------------

MAP_INPUT_PRESETS = ("cat", "squeeze_excite")


@dataclass
class BenchPoint:
    n: int
    samples_ns: list
    median_ns: float
    mad_ns: float
    flops: int
    params: int


@dataclass
class BenchReport:
    preset: str
    d: int
    reps: int
    warmup: int
    seed: int
    points: list = field(default_factory=list)
    slope: float = 0.0
    r2: float = 0.0
    timer_resolution_ns: float = 0.0
    timer_warning: bool = False

    def to_json(self) -> dict:
        return {
            "preset": self.preset,
            "d": self.d,
            "reps": self.reps,
            "warmup": self.warmup,
            "seed": self.seed,
            "flop_convention": "1 MAC = 2 FLOPs; bias adds uncounted; exp = 4",
            "points": [
                {
                    "n": p.n,
                    "median_ns": p.median_ns,
                    "mad_ns": p.mad_ns,
                    "flops": p.flops,
                    "params": p.params,
                    "samples_ns": p.samples_ns,
                }
                for p in self.points
            ],
            "slope": self.slope,
            "r2": self.r2,
            "timer_resolution_ns": self.timer_resolution_ns,
            "timer_warning": self.timer_warning,
        }

    def to_tsv(self) -> str:
        lines = ["preset\tn\tmedian_ns\tmad_ns\tflops\tparams\tslope\tr2"]
        for p in self.points:
            lines.append(
                f"{self.preset}\t{p.n}\t{p.median_ns:.1f}\t{p.mad_ns:.1f}"
                f"\t{p.flops}\t{p.params}\t{self.slope:.4f}\t{self.r2:.6f}"
            )
        return "\n".join(lines) + "\n"


def report_from_json(doc: dict) -> BenchReport:
    report = BenchReport(
        preset=doc["preset"],
        d=doc["d"],
        reps=doc["reps"],
        warmup=doc["warmup"],
        seed=doc["seed"],
        slope=doc["slope"],
        r2=doc["r2"],
        timer_resolution_ns=doc.get("timer_resolution_ns", 0.0),
        timer_warning=doc.get("timer_warning", False),
    )
    for p in doc["points"]:
        report.points.append(
            BenchPoint(
                n=p["n"],
                samples_ns=list(p.get("samples_ns", [])),
                median_ns=p["median_ns"],
                mad_ns=p["mad_ns"],
                flops=p["flops"],
                params=p["params"],
            )
        )
    return report


def spatial_factor(n: int):
    """Factor n into the most square (H, W) grid available."""
    h = int(np.sqrt(n))
    while h > 1 and n % h:
        h -= 1
    return (h, n // h)


def preset_at(name: str, d: int, n: int, seed: int):
    """Assemble a preset sized for n positions, with its benchmark input."""
    shape = spatial_factor(n) if name in MAP_INPUT_PRESETS else n
    config = preset(name, d=d, spatial_shape=shape)
    block, params = assemble(config, seed)
    rng = np.random.default_rng([seed, n])  # fixed across presets for fairness
    x = T.Tensor(rng.standard_normal((n, d)))
    if not block.flat_input:
        x = T.Tensor(x.array.reshape(block.grid[0], block.grid[1], d))
    return block, params, x


def timer_resolution_ns(probes: int = 2000) -> float:
    ticks = [time.perf_counter_ns() for _ in range(probes)]
    deltas = [b - a for a, b in zip(ticks, ticks[1:]) if b > a]
    return float(min(deltas)) if deltas else float("inf")


def bench_latency(preset_name: str, d: int, n_values, reps: int, warmup: int, seed: int = 42) -> BenchReport:
    """Median/MAD wall-clock per n for one preset, plus the fitted slope.

    Runs strictly one evaluation at a time on a monotonic nanosecond clock;
    warmup iterations are discarded. Parameters and inputs are reassembled
    per n (kernel extents and position mixers are bound to n) from seeds
    shared across presets.
    """
    if reps < 30:
        raise ConfigError(f"reps must be >= 30, got {reps}")
    if warmup < 5:
        raise ConfigError(f"warmup must be >= 5, got {warmup}")
    report = BenchReport(preset=preset_name, d=d, reps=reps, warmup=warmup, seed=seed)
    report.timer_resolution_ns = timer_resolution_ns()
    for n in n_values:
        block, params, x = preset_at(preset_name, d, n, seed)
        for _ in range(warmup):
            forward(block, params, x)
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            forward(block, params, x)
            samples.append(time.perf_counter_ns() - t0)
        med = float(statistics.median(samples))
        mad = float(statistics.median([abs(s - med) for s in samples]))
        report.points.append(
            BenchPoint(
                n=n,
                samples_ns=samples,
                median_ns=med,
                mad_ns=mad,
                flops=count_flops(block.config, n),
                params=count_params(params),
            )
        )
    if len({p.n for p in report.points}) >= 3:
        report.slope, report.r2 = fit_scaling(
            [(p.n, p.median_ns * 1e-9) for p in report.points]
        )
    report.timer_warning = any(
        p.median_ns <= report.timer_resolution_ns for p in report.points
    )
    return report


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def finite_difference_check(fn, tensors, step=1e-5, floor=1e-8, rng=None, max_entries=None):
    """Compare tape gradients of ``fn`` against central finite differences.

    ``fn`` maps a dict of named tensors to one output tensor. Returns
    {name: max relative error}, where the error denominator is floored. When
    ``max_entries`` is given, at most that many coordinates per tensor are
    probed (sampled without replacement).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    with T.record() as tape:
        out = fn(tensors)
    u = rng.standard_normal(out.shape) if out.shape else np.array(rng.standard_normal())
    grads = T.backward(tape, out, T.Tensor(u))

    def phi(tset):
        return float((fn(tset).array * u).sum())

    worst = {}
    for name, t in tensors.items():
        analytic = grads.wrt(t).array.ravel()
        flat = t.array.ravel()
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = rng.choice(flat.size, size=max_entries, replace=False)
        err = 0.0
        for idx in coords:
            bumped = flat.copy()
            bumped[idx] += step
            plus = phi({**tensors, name: T.Tensor(bumped.reshape(t.shape))})
            bumped[idx] -= 2 * step
            minus = phi({**tensors, name: T.Tensor(bumped.reshape(t.shape))})
            numeric = (plus - minus) / (2 * step)
            denom = max(floor, abs(analytic[idx]), abs(numeric))
            err = max(err, abs(analytic[idx] - numeric) / denom)
        worst[name] = err
    return worst


# ---------------------------------------------------------------------------
# Overfit sanity trainer
# ---------------------------------------------------------------------------

OVERFIT_BATCH = 8
OVERFIT_GRID = (8, 8)
OVERFIT_DIM = 8
OVERFIT_CLASSES = 4

# documented learning rates under which each preset reaches <= 10% of its
# initial loss within 500 plain-SGD steps on the fixed synthetic batch
OVERFIT_LEARNING_RATES = {
    "transformer": 0.5,
    "cat": 2.0,
    "fnet": 0.5,
    "mlp_mixer": 0.5,
}


def overfit_sanity(preset_name: str, steps: int, lr: float, seed: int = 42):
    """Train block + mean-pool + dense classifier on a fixed synthetic batch.

    Returns the loss trace (length steps + 1, starting at the initial loss).
    Raises TrainingDivergedError with the step index if the loss goes
    non-finite.
    """
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    d = OVERFIT_DIM
    h, w = OVERFIT_GRID
    config = preset(preset_name, d=d, spatial_shape=(h, w))
    block, block_params = assemble(config, seed)

    rng = np.random.default_rng(seed)
    xs = [T.Tensor(rng.standard_normal((h, w, d))) for _ in range(OVERFIT_BATCH)]
    labels = rng.integers(0, OVERFIT_CLASSES, size=OVERFIT_BATCH)
    onehot = np.zeros((OVERFIT_BATCH, OVERFIT_CLASSES))
    onehot[np.arange(OVERFIT_BATCH), labels] = 1.0
    onehot_t = T.Tensor(onehot)

    bound = 1.0 / np.sqrt(d)
    clf = BlockParams(
        [
            ("clf.weight", T.Tensor(rng.uniform(-bound, bound, size=(d, OVERFIT_CLASSES)))),
            ("clf.bias", T.Tensor(rng.uniform(-bound, bound, size=(OVERFIT_CLASSES,)))),
        ]
    )

    def batch_loss(params, clf_params):
        pooled = []
        for x in xs:
            y = forward(block, params, x)
            y_map = y if not block.flat_input else T.reshape(y, (h, w, d))
            pooled.append(T.reshape(T.mean_pool_hw(y_map), (1, d)))
        feats = T.concat_rows(pooled)
        logits = T.linear(feats, clf_params["clf.weight"], clf_params["clf.bias"])
        return T.softmax_cross_entropy(logits, onehot_t)

    params = block_params
    trace = []
    for step in range(steps + 1):
        with T.record() as tape:
            loss = batch_loss(params, clf)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(step)
        trace.append(value)
        if step == steps:
            break
        grads = T.backward(tape, loss, T.ones(()))
        params = params.replace(
            {name: T.Tensor(t.array - lr * grads.wrt(t).array) for name, t in params.items()}
        )
        clf = clf.replace(
            {name: T.Tensor(t.array - lr * grads.wrt(t).array) for name, t in clf.items()}
        )
    return trace


def save_report_json(report: BenchReport, path):
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2)
