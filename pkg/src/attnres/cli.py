"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage error. Outputs go to
``--out`` (relative paths resolve against ``$ATTNRES_OUTPUT_DIR`` when set)
or to stdout.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis, costmodel, mixmat, pipesim, toystack
from .block import block_forward, block_sizes
from .full import full_forward
from .numerics import SoftmaxStats
from .twophase import two_phase_block, two_phase_full_schedule

OUTPUT_DIR_ENV = "ATTNRES_OUTPUT_DIR"
EQUIV_TOL = 1e-10
GRAD_TOL = 1e-5

DEFAULTS = {
    "seed": 0,
    "d": 8,
    "L": 8,
    "N": 2,
    "S": None,
    "mode": "block",
    "format": "csv",
    "out": None,
}


class UsageError(Exception):
    pass


def _corrupted_merge(a: SoftmaxStats, b: SoftmaxStats) -> SoftmaxStats:
    # negative control: drops the max-rescaling of the online merge
    return SoftmaxStats(a.out + b.out, max(a.m, b.m), a.lse + b.lse)


def _config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            cfg.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["L"] < 1 or cfg["d"] < 1 or cfg["N"] < 1:
        raise UsageError("L, d and N must be positive")
    if cfg["S"] is None:
        cfg["S"] = max(cfg["L"] // cfg["N"], 1)
    elif cfg["S"] < 1:
        raise UsageError("S must be positive")
    return cfg


def _require_divisible(cfg: dict) -> None:
    if cfg["L"] % cfg["S"] and not cfg.get("ragged", False):
        raise UsageError(f"S={cfg['S']} does not divide L={cfg['L']} (set \"ragged\": true in --config to allow)")


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base and not path.is_absolute():
        path = Path(base) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _cfg_comment(kind: str, cfg: dict, keys: Sequence[str]) -> str:
    return f"{kind} " + " ".join(f"{k}={cfg[k]}" for k in keys)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def cmd_equiv(cfg: dict, corrupt: bool = False) -> tuple[dict, int]:
    rng = np.random.default_rng(cfg["seed"])
    stack = toystack.init_stack(cfg["d"], cfg["L"], cfg["seed"], random_queries=True)
    emb = rng.normal(size=cfg["d"])
    merge = _corrupted_merge if corrupt else None
    kw = {"merge": merge} if merge else {}
    sizes = block_sizes(cfg["L"], block_size=cfg["S"])

    naive_full = full_forward(stack.layers, emb, stack.queries)
    fast_full = two_phase_full_schedule(stack.layers, emb, stack.queries, cfg["S"], **kw)
    naive_block = block_forward(stack.layers, emb, stack.queries, sizes)
    fast_block = two_phase_block(stack.layers, emb, stack.queries, sizes, **kw)

    def dev(a, b) -> float:
        return float(max(np.abs(np.vstack(a.inputs) - np.vstack(b.inputs)).max(),
                         np.abs(a.final - b.final).max()))

    report = {
        "config": {k: cfg[k] for k in ("seed", "d", "L", "S")},
        "corrupted_merge": corrupt,
        "full_max_abs_dev": dev(naive_full, fast_full),
        "block_max_abs_dev": dev(naive_block, fast_block),
        "tolerance": EQUIV_TOL,
    }
    ok = report["full_max_abs_dev"] < EQUIV_TOL and report["block_max_abs_dev"] < EQUIV_TOL
    report["pass"] = ok
    return report, 0 if ok else 1


def cmd_gradcheck(cfg: dict) -> tuple[dict, int]:
    rng = np.random.default_rng(cfg["seed"] + 1000)
    stack = toystack.init_stack(cfg["d"], cfg["L"], cfg["seed"], random_queries=True)
    emb, target = rng.normal(size=cfg["d"]), rng.normal(size=cfg["d"])
    modes = [cfg["mode"]] if cfg["mode"] != "all" else list(toystack.MODES)
    results = {}
    for mode in modes:
        r = toystack.gradcheck(stack, emb, target, mode, cfg["S"] if mode == "block" else None)
        results[mode] = {"max_rel_error": r.max_rel_error, "worst_parameter": r.worst}
    ok = all(v["max_rel_error"] < GRAD_TOL for v in results.values())
    return {"config": {k: cfg[k] for k in ("seed", "d", "L", "S")}, "results": results,
            "tolerance": GRAD_TOL, "pass": ok}, 0 if ok else 1


def _parse_params(text: str | None) -> dict[str, int]:
    out: dict[str, int] = {}
    if not text:
        return out
    for item in text.split(","):
        key, sep, value = item.partition("=")
        if not sep or key.strip() not in {"L", "N", "m", "d"}:
            raise UsageError(f"bad --params entry {item!r}; expected L=..,N=..,m=..,d=..")
        try:
            out[key.strip()] = int(value)
        except ValueError as exc:
            raise UsageError(f"--params value for {key} must be an integer") from exc
    return out


def report_cost_table(args: argparse.Namespace) -> str:
    p = {"L": 128, "N": 8, "m": 4} | _parse_params(args.params)
    try:
        rows = costmodel.cost_table(p["L"], p["N"], p["m"], p.get("d"))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.format == "json":
        return _dump_json({"params": p, "rows": rows})
    return toystack.rows_to_csv("cost-table " + " ".join(f"{k}={v}" for k, v in sorted(p.items())), rows)


def report_pipeline(args: argparse.Namespace) -> tuple[str, int]:
    if args.pipeline_config:
        cfg = pipesim.PipelineConfig.from_json(Path(args.pipeline_config).read_text(encoding="utf-8"))
    else:
        cfg = pipesim.PipelineConfig(args.P, args.V, Fraction(args.Np), args.d or 1)
    log = pipesim.simulate(cfg, caching=args.caching == "on")
    closed = pipesim.comm_cached(cfg) if log.caching else pipesim.comm_naive(cfg)
    code = 0
    if cfg.Np.denominator == 1 and log.total_elements != closed:
        code = 1
    if args.format == "json":
        doc = json.loads(log.to_json())
        doc["closed_form_elements"] = str(closed)
        doc["backward_included_elements"] = log.total(include_backward=True)
        return _dump_json(doc), code
    return log.to_csv(), code


def report_scaling(args: argparse.Namespace) -> str:
    series: dict[str, list[tuple[float, float]]] = {}
    if args.input:
        import csv

        with open(args.input, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
        for row in rows:
            name = row.get("series", "default")
            if "compute" in row and row["compute"]:
                c = float(row["compute"])
            else:
                c = analysis.estimate_compute(float(row["params"]), float(row["tokens"]))
            series.setdefault(name, []).append((c, float(row["loss"])))
    else:
        compute = [analysis.estimate_compute(p, t)
                   for p, t in zip(analysis.REFERENCE_PARAMS, analysis.REFERENCE_TOKENS)]
        for name, losses in analysis.REFERENCE_LOSSES.items():
            series[name] = list(zip(compute, losses))
    fits = {}
    for name, pts in series.items():
        try:
            fit = analysis.fit_power_law(pts)
        except ValueError as exc:
            raise UsageError(f"series {name}: {exc}") from exc
        fits[name] = {"A": fit.A, "alpha": fit.alpha, "residual": fit.residual, "points": len(pts)}
    doc = {"fits": fits}
    if "baseline" in fits and args.compute_ref:
        ref = analysis.PowerLawFit(fits["baseline"]["A"], fits["baseline"]["alpha"])
        doc["compute_advantage"] = {
            name: analysis.compute_advantage(ref, analysis.PowerLawFit(f["A"], f["alpha"]), args.compute_ref)
            for name, f in fits.items() if name != "baseline"
        }
        doc["compute_ref"] = args.compute_ref
    return _dump_json(doc)


def report_mix_matrix(args: argparse.Namespace, cfg: dict) -> str:
    rng = np.random.default_rng(cfg["seed"])
    L, d = cfg["L"], cfg["d"]
    variant = args.variant
    if variant == "standard":
        M = mixmat.mix_standard(L)
    elif variant == "highway":
        M = mixmat.mix_highway(rng.uniform(0, 1, L - 1))
    elif variant == "mhc":
        M = mixmat.mix_mhc(mixmat.MhcParams.random(L, args.m, rng))
    else:
        stack = toystack.init_stack(d, L, cfg["seed"], random_queries=True)
        emb = rng.normal(size=d)
        if variant == "attnres_full":
            trace = toystack.forward(stack, emb, "full")
            M = mixmat.mix_attnres_full(stack.queries[:L], np.vstack([emb, *trace.outputs]))
        else:
            trace = toystack.forward(stack, emb, "block", cfg["S"])
            M = mixmat.mix_attnres_block(trace, block_sizes(L, block_size=cfg["S"]))
    if args.format == "json":
        return _dump_json({"variant": M.variant, "L": M.L, "seed": cfg["seed"],
                           "semiseparable_rank": mixmat.semiseparable_rank(M),
                           "entries": M.entries.tolist()})
    return M.to_csv()


def _token_traces(cfg: dict, tokens: int):
    stack = toystack.init_stack(cfg["d"], cfg["L"], cfg["seed"], random_queries=cfg.get("random_queries", False))
    rng = np.random.default_rng(cfg["seed"] + 1)
    mode = cfg["mode"]
    S = cfg["S"] if mode == "block" else None
    return [toystack.forward(stack, rng.normal(size=cfg["d"]), mode, S) for _ in range(tokens)]


def report_heatmap(args: argparse.Namespace, cfg: dict) -> str:
    if cfg["mode"] == "standard":
        raise UsageError("heatmaps need --mode full or block")
    matrix = toystack.weight_heatmap(_token_traces(cfg, args.tokens))
    if args.format == "json":
        return _dump_json({"config": cfg, "tokens": args.tokens, "weights": matrix.tolist()})
    comment = _cfg_comment("heatmap", cfg | {"tokens": args.tokens}, ("mode", "seed", "d", "L", "S", "tokens"))
    return toystack.heatmap_to_csv(comment, matrix)


def report_norm_profile(args: argparse.Namespace, cfg: dict) -> str:
    rows = toystack.norm_profile(_token_traces(cfg, 1)[0])
    if args.format == "json":
        return _dump_json({"config": cfg, "rows": rows})
    return toystack.rows_to_csv(_cfg_comment("norm-profile", cfg, ("mode", "seed", "d", "L", "S")), rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnres", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON file of defaults; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--d", type=int)
        p.add_argument("--L", type=int)
        p.add_argument("--N", type=int, help="number of blocks (sets S = L // N)")
        p.add_argument("--S", type=int, help="block / scheduling group size")
        p.add_argument("--mode", choices=[*toystack.MODES, "all"])
        p.add_argument("--format", choices=["csv", "json"])
        p.add_argument("--out")

    p = sub.add_parser("equiv-check", help="two-phase vs naive evaluation")
    common(p)
    p.add_argument("--corrupt-merge", action="store_true", help="negative control; must fail")

    common(sub.add_parser("gradcheck", help="reverse-mode vs finite differences"))

    p = sub.add_parser("cost-table", help="per-layer residual I/O table")
    common(p)
    p.add_argument("--params", help="overrides such as L=128,N=8,m=4,d=7168")

    p = sub.add_parser("pipeline-sim", help="block traffic under interleaved pipelining")
    common(p)
    p.add_argument("--pipeline-config", help="JSON with P, V, Np, d")
    p.add_argument("--P", type=int, default=4)
    p.add_argument("--V", type=int, default=2)
    p.add_argument("--Np", default="1")
    p.add_argument("--caching", choices=["on", "off"], default="on")

    p = sub.add_parser("scaling-fit", help="power-law fit of loss vs compute")
    common(p)
    p.add_argument("--input", help="CSV with series,params,tokens,loss or series,compute,loss")
    p.add_argument("--compute-ref", type=float, default=5.6)

    p = sub.add_parser("mix-matrix", help="depth mixing matrix of a residual variant")
    common(p)
    p.add_argument("--variant", default="attnres_block",
                   choices=["standard", "highway", "mhc", "attnres_full", "attnres_block"])
    p.add_argument("--m", type=int, default=2)

    p = sub.add_parser("heatmap", help="token-averaged depth attention weights")
    common(p)
    p.add_argument("--tokens", type=int, default=16)

    common(sub.add_parser("norm-profile", help="per-layer hidden/output norms"))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config(args)
        args.format = cfg["format"]
        blocky = cfg["mode"] in ("block", "all") or getattr(args, "variant", "") == "attnres_block"
        if args.command == "equiv-check" or (blocky and args.command in ("gradcheck", "mix-matrix", "heatmap", "norm-profile")):
            _require_divisible(cfg)
        code = 0
        if args.command == "equiv-check":
            report, code = cmd_equiv(cfg, args.corrupt_merge)
            text = _dump_json(report)
        elif args.command == "gradcheck":
            report, code = cmd_gradcheck(cfg)
            text = _dump_json(report)
        elif args.command == "cost-table":
            text = report_cost_table(args)
        elif args.command == "pipeline-sim":
            text, code = report_pipeline(args)
        elif args.command == "scaling-fit":
            text = report_scaling(args)
        elif args.command == "mix-matrix":
            text = report_mix_matrix(args, cfg)
        elif args.command == "heatmap":
            text = report_heatmap(args, cfg)
        else:
            text = report_norm_profile(args, cfg)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    _emit(text, cfg["out"])
    return code


if __name__ == "__main__":
    sys.exit(main())
