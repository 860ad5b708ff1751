"""Command-line front end: assembly, verification, benchmarking, fusion demo.

Exit codes: 0 success, 1 a verification check failed (equivalence, gradient,
scaling bounds, fusion properties, diverged training), 2 usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis, blocks, taff
from . import tensor as T
from .core import (
    PRESET_NAMES,
    assemble,
    config_from_json_str,
    config_to_json,
    forward,
    preset,
)
from .errors import GFormerError, TrainingDivergedError

GRAD_TOL = 1e-4
EQUIV_TOL = 1e-10
TAFF_TOL = 1e-10


def _default_seed() -> int:
    return int(os.environ.get("GFORMER_SEED", "42"))


def read_tensor_file(path) -> T.Tensor:
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or set(doc) != {"shape", "data"}:
        raise GFormerError(f"tensor file {path} must hold exactly 'shape' and 'data'")
    return T.Tensor(doc["data"], shape=doc["shape"])


def tensor_to_doc(t: T.Tensor) -> dict:
    return {"shape": list(t.shape), "data": t.data}


def _preset_config(name: str, d: int, n: int):
    shape = analysis.spatial_factor(n) if name in analysis.MAP_INPUT_PRESETS else n
    return preset(name, d=d, spatial_shape=shape)


def _random_instance(name: str, rng):
    """Small random dims valid for every preset (n <= 16, d <= 8)."""
    d = int(rng.choice([2, 4, 8]))
    if name in analysis.MAP_INPUT_PRESETS:
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        n = shape[0] * shape[1]
    else:
        shape = n = int(rng.integers(2, 17))
    return d, shape, n


def equivalence_report(name: str, trials: int, seed: int):
    """Max |preset forward - reference block| over random instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d, shape, n = _random_instance(name, rng)
        config = preset(name, d=d, spatial_shape=shape)
        block, params = assemble(config, int(rng.integers(0, 2**31)))
        x_shape = (n, d) if block.flat_input else (block.grid[0], block.grid[1], d)
        x = T.Tensor(rng.standard_normal(x_shape))
        got = forward(block, params, x)
        want = blocks.reference_forward(config, params, x)
        worst = max(worst, float(np.abs(got.array - want.array).max()))
    return worst


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_presets(args) -> int:
    out = {}
    for name in PRESET_NAMES:
        out[name] = config_to_json(_preset_config(name, args.d, args.n))
    print(json.dumps(out, indent=2))
    return 0


def cmd_forward(args) -> int:
    with open(args.config) as fh:
        config = config_from_json_str(fh.read())
    block, params = assemble(config, args.seed)
    x = read_tensor_file(args.input)
    print(json.dumps(tensor_to_doc(forward(block, params, x))))
    return 0


def cmd_equiv(args) -> int:
    worst = equivalence_report(args.preset, args.trials, args.seed)
    print(f"preset={args.preset} trials={args.trials} max_deviation={worst:.3e} tol={args.tol:.1e}")
    return 0 if worst <= args.tol else 1


def cmd_gradcheck(args) -> int:
    config = _preset_config(args.preset, args.d, args.n)
    block, params = assemble(config, args.seed)
    rng = np.random.default_rng(args.seed)
    x_shape = (block.n, args.d) if block.flat_input else (*block.grid, args.d)
    tensors = {name: t for name, t in params.items()}
    tensors["input"] = T.Tensor(rng.standard_normal(x_shape))

    def fn(ts):
        p = params.replace({k: v for k, v in ts.items() if k != "input"})
        return forward(block, p, ts["input"])

    worst = analysis.finite_difference_check(fn, tensors, rng=rng)
    failed = False
    for name, err in worst.items():
        status = "ok" if err <= GRAD_TOL else "FAIL"
        failed |= err > GRAD_TOL
        print(f"{name}\t{err:.3e}\t{status}")
    return 1 if failed else 0


def cmd_flops(args) -> int:
    print(analysis.count_flops(_preset_config(args.preset, args.d, args.n), args.n))
    return 0


def cmd_params(args) -> int:
    _, params = assemble(_preset_config(args.preset, args.d, args.n), args.seed)
    print(analysis.count_params(params))
    return 0


def cmd_bench(args) -> int:
    n_values = [int(s) for s in args.n_list.split(",") if s]
    report = analysis.bench_latency(
        args.preset, args.d, n_values, reps=args.reps, warmup=args.warmup, seed=args.seed
    )
    text = report.to_tsv() if args.format == "tsv" else json.dumps(report.to_json(), indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
    else:
        print(text)
    if report.timer_warning:
        print("warning: timer resolution is coarser than a measured median", file=sys.stderr)
    return 0


def cmd_scaling(args) -> int:
    with open(args.report) as fh:
        report = analysis.report_from_json(json.load(fh))
    slope, r2 = analysis.fit_scaling([(p.n, p.median_ns * 1e-9) for p in report.points])
    print(json.dumps({"preset": report.preset, "slope": slope, "r2": r2}))
    ok = True
    if args.slope_min is not None:
        ok &= slope >= args.slope_min
    if args.slope_max is not None:
        ok &= slope <= args.slope_max
    if args.r2_min is not None:
        ok &= r2 >= args.r2_min
    return 0 if ok else 1


def _parse_levels(spec: str):
    levels = []
    for part in spec.split(","):
        dims = part.lower().split("x")
        if len(dims) != 3:
            raise GFormerError(f"level spec '{part}' is not HxWxC")
        levels.append(tuple(int(v) for v in dims))
    return levels


def cmd_taff_demo(args) -> int:
    rng = np.random.default_rng(args.seed)
    dims = _parse_levels(args.levels)
    pyramid = taff.FeaturePyramid(
        tuple(
            taff.PyramidLevel(h, w, c, T.Tensor(rng.standard_normal((h, w, c))))
            for h, w, c in dims
        ),
        anchors_per_location=args.anchors,
    )
    proj, enc = taff.assemble_taff(
        [c for _, _, c in dims], args.anchors, args.d, args.heads, args.ffn_hidden, args.seed
    )
    fs = taff.gather(pyramid, proj, args.d)

    # permutation equivariance of the fusion layer
    fused = taff.fuse(fs, enc, args.heads)
    worst = 0.0
    for _ in range(args.permutations):
        perm = rng.permutation(fs.seq.shape[0])
        fused_perm = taff.fuse(taff.permute_rows(fs, perm), enc, args.heads)
        worst = max(worst, float(np.abs(fused_perm.seq.array - fused.seq.array[perm]).max()))

    # gather -> scatter with no fusion is a lossless relayout
    outs = taff.scatter(fs)
    roundtrip = True
    for row, (li, y, x, a) in enumerate(fs.index):
        got = outs[li].array[y, x, a * args.d : (a + 1) * args.d]
        roundtrip &= bool(np.array_equal(got, fs.seq.array[row]))

    count = taff.taff_param_count(
        args.d, args.heads, args.ffn_hidden, [c for _, _, c in dims], anchors=args.anchors
    )
    print(
        json.dumps(
            {
                "rows": fs.seq.shape[0],
                "param_count": count,
                "max_permutation_deviation": worst,
                "roundtrip_exact": roundtrip,
            }
        )
    )
    return 0 if worst <= TAFF_TOL and roundtrip else 1


def cmd_overfit(args) -> int:
    lr = args.lr if args.lr is not None else analysis.OVERFIT_LEARNING_RATES.get(args.preset)
    if lr is None:
        raise GFormerError(f"no documented learning rate for preset '{args.preset}'; pass --lr")
    try:
        trace = analysis.overfit_sanity(args.preset, args.steps, lr, seed=args.seed)
    except TrainingDivergedError as exc:
        print(f"training diverged at step {exc.step}", file=sys.stderr)
        return 1
    print(
        json.dumps(
            {
                "preset": args.preset,
                "lr": lr,
                "initial": trace[0],
                "final": trace[-1],
                "ratio": trace[-1] / trace[0],
                "trace": trace,
            }
        )
    )
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gformer",
        description="Assemble, verify, and benchmark generalized transformer blocks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    seed_kw = dict(type=int, default=_default_seed(), help="RNG seed (env GFORMER_SEED)")

    p = sub.add_parser("presets", help="print the preset configuration table as JSON")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--d", type=int, default=8)
    p.set_defaults(fn=cmd_presets)

    p = sub.add_parser("forward", help="run a block from a config file on a tensor file")
    p.add_argument("--config", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--seed", **seed_kw)
    p.set_defaults(fn=cmd_forward)

    p = sub.add_parser("equiv", help="compare a preset against its reference block")
    p.add_argument("--preset", required=True, choices=[n for n in PRESET_NAMES if n != "metaformer"])
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tol", type=float, default=EQUIV_TOL)
    p.add_argument("--seed", **seed_kw)
    p.set_defaults(fn=cmd_equiv)

    p = sub.add_parser("gradcheck", help="finite-difference report per parameter")
    p.add_argument("--preset", required=True, choices=PRESET_NAMES)
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--seed", **seed_kw)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("flops", help="closed-form FLOP count of a preset")
    p.add_argument("--preset", required=True, choices=PRESET_NAMES)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("params", help="parameter count of an assembled preset")
    p.add_argument("--preset", required=True, choices=PRESET_NAMES)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--seed", **seed_kw)
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("bench", help="latency microbenchmark over a list of n")
    p.add_argument("--preset", required=True, choices=PRESET_NAMES)
    p.add_argument("--n-list", required=True, help="comma-separated sequence lengths")
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--format", choices=("json", "tsv"), default="json")
    p.add_argument("--out", default=None, help="write the report here instead of stdout")
    p.add_argument("--seed", **seed_kw)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("scaling", help="fit a log-log slope from a saved report")
    p.add_argument("--report", required=True)
    p.add_argument("--slope-min", type=float, default=None)
    p.add_argument("--slope-max", type=float, default=None)
    p.add_argument("--r2-min", type=float, default=None)
    p.set_defaults(fn=cmd_scaling)

    p = sub.add_parser("taff-demo", help="gather/fuse/scatter a synthetic pyramid")
    p.add_argument("--levels", required=True, help="comma-separated HxWxC level specs")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--heads", type=int, required=True)
    p.add_argument("--anchors", type=int, default=2)
    p.add_argument("--ffn-hidden", type=int, default=None)
    p.add_argument("--permutations", type=int, default=5)
    p.add_argument("--seed", **seed_kw)
    p.set_defaults(fn=cmd_taff_demo)

    p = sub.add_parser("overfit", help="loss trace of the overfit sanity run")
    p.add_argument("--preset", required=True, choices=PRESET_NAMES)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", **seed_kw)
    p.set_defaults(fn=cmd_overfit)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "ffn_hidden", -1) is None:
        args.ffn_hidden = 2 * args.d
    try:
        return args.fn(args)
    except GFormerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
