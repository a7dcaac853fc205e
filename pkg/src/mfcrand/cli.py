"""Command line entry point.

Subcommands: equivalence, bsde, dpp, example, girsanov, approx.  Each writes
``manifest.json`` plus ``results.csv`` (or ``results.json``) into ``--out``.
Exit status: 0 if every check passes, 1 on a tolerance failure, 2 on a
configuration or budget error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .bsde import export_csv, solve_constrained_limit
from .config import ConfigError, ExperimentConfig, load_config
from .controls import default_lambda_family, random_decomposed_control
from .dynamics import expand_mark_tree, stream
from .intro import intro_example
from .randomisation import (approximate_control_by_ppp, expected_weight_exact, girsanov_weights,
                            sample_ppp_batch)
from .scenario import BudgetExceeded
from .value import dpp_check, randomised_solution, value_direct, value_randomised_mc

SUBCOMMANDS = ("equivalence", "bsde", "dpp", "example", "girsanov", "approx")


def _fmt(v):
    if isinstance(v, bool) or v is None:
        return str(v).lower()
    if isinstance(v, (float, np.floating)):
        return "inf" if math.isinf(v) else f"{float(v):.17g}"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def rows_to_csv(columns: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# subcommands: each returns (columns, rows, summary, passed)
# ---------------------------------------------------------------------------


def run_equivalence(cfg: ExperimentConfig, threads: int):
    tol = cfg.tol["equivalence"]
    rows, ok = [], True
    levels = cfg.section("solver")["levels"]
    mc = cfg.section("mc")
    for idx, inst in enumerate(cfg.instances()):
        lam, alt = cfg.lambda_families(inst)
        args = (inst.tree, inst.coeffs, inst.reward, inst.xi, inst.actions)
        vd = value_direct(*args)
        vals = [randomised_solution(*args, a, lam, levels).y0 for a in range(lam.spaces[0].size)]
        v_alt = randomised_solution(*args, 0, alt, levels).y0
        est = value_randomised_mc(*args, 0, lam, cfg.intensities("mc", inst.tree.nb), mc["budget"],
                                  mc["N"], mc["replications"], cfg.seed + idx, threads)
        row = {"instance": inst.name, "V_direct": vd, "V_bsde": vals[0], "residual": abs(vd - vals[0]),
               "alpha_spread": max(vals) - min(vals), "lambda_spread": abs(v_alt - vals[0]),
               "V_mc": est["estimate"], "mc_se": est["se"],
               "mc_lower_bound_ok": est["estimate"] <= vd + cfg.tol["sigmas"] * est["se"]}
        row["pass"] = (row["residual"] <= tol and row["alpha_spread"] <= tol
                       and row["lambda_spread"] <= tol and row["mc_lower_bound_ok"])
        ok &= row["pass"]
        rows.append(row)
    cols = ["instance", "V_direct", "V_bsde", "residual", "alpha_spread", "lambda_spread", "V_mc",
            "mc_se", "mc_lower_bound_ok", "pass"]
    return cols, rows, {"instances": len(rows), "tolerance": tol}, ok


def run_bsde(cfg: ExperimentConfig, threads: int):
    inst = cfg.instance()
    lam, _ = cfg.lambda_families(inst)
    mt = expand_mark_tree(inst.tree, inst.coeffs, inst.reward, inst.xi.values, inst.actions)
    alpha = cfg.section("solver")["alpha"]
    try:
        sol = solve_constrained_limit(mt, lam, cfg.section("solver")["levels"], alpha,
                                      tol=cfg.tol["monotone"])
        monotone = True
    except ArithmeticError as exc:
        return ["error"], [{"error": str(exc)}], {"monotone": False}, False
    text = export_csv(sol.info["sweep"] + [sol])
    rows = list(csv.DictReader(io.StringIO(text)))
    summary = {"levels": sol.info["levels"], "root": sol.info["root"], "gap_to_limit": sol.info["gap"],
               "limit": sol.y0, "extrapolated_root": sol.info["extrapolated_root"],
               "max_monotone_violation": sol.info["max_monotone_violation"], "monotone": monotone,
               "bellman_gap_at_top_level": sol.info["gap"][-1],
               "bellman_tolerance": cfg.tol["bellman"]}
    return ["n", "step", "node", "mark", "Y", "K", "maxU+"], rows, summary, monotone


def run_dpp(cfg: ExperimentConfig, threads: int):
    rows, ok = [], True
    for inst in cfg.instances():
        lam, _ = cfg.lambda_families(inst)
        for s in range(inst.tree.M + 1):
            r = dpp_check(inst.tree, inst.coeffs, inst.reward, inst.xi, inst.actions, s,
                          cfg.section("solver")["alpha"], lam)
            r["instance"] = inst.name
            r["pass"] = r["residual"] <= cfg.tol["dpp"]
            ok &= r["pass"]
            rows.append(r)
    return ["instance", "s", "lhs", "rhs", "residual", "argmax", "pass"], rows, \
        {"tolerance": cfg.tol["dpp"]}, ok


def run_example(cfg: ExperimentConfig, threads: int):
    ex = cfg.section("example")
    rows, ok, reports = [], True, []
    for conv in ex["conventions"]:
        rep = intro_example(ex["M"], conv, ex["threshold"])
        reports.append(rep.to_json())
        ok &= rep.euler_check <= 1e-9
        for variant, (vm, vp) in rep.decoupled.items():
            rows.append({"convention": conv, "variant": variant, "V": rep.V, "V_minus": vm,
                         "V_plus": vp, "gap": rep.gaps[variant], "differs": rep.gaps[variant] > ex["threshold"],
                         "claimed_V": 0.5 * (math.e - 1), "claimed_V_minus": math.e - 2.5,
                         "claimed_V_plus": math.e - 1})
    cols = ["convention", "variant", "V", "V_minus", "V_plus", "gap", "differs", "claimed_V",
            "claimed_V_minus", "claimed_V_plus"]
    return cols, rows, {"reports": reports}, ok


def run_girsanov(cfg: ExperimentConfig, threads: int):
    inst = cfg.instance()
    g = cfg.section("girsanov")
    lam = default_lambda_family(inst.tree, inst.actions.size, g["mass"])
    batch = sample_ppp_batch(lam, inst.tree, g["paths"], stream(cfg.seed, 3))
    rows, ok = [], True
    for nu in cfg.intensities("girsanov", inst.tree.nb):
        L = girsanov_weights(nu, batch, lam, inst.tree)
        mean, se = float(L.mean()), float(L.std(ddof=1) / math.sqrt(L.size))
        exact = expected_weight_exact(nu, lam, inst.tree)
        r = {"nu": json.dumps(nu.describe(), sort_keys=True), "exact": exact, "mc_mean": mean, "se": se,
             "z": (mean - 1.0) / se if se > 0 else 0.0}
        r["pass"] = abs(r["z"]) <= cfg.tol["sigmas"] and abs(exact - 1.0) <= cfg.tol["exact_weight"]
        ok &= r["pass"]
        rows.append(r)
    return ["nu", "exact", "mc_mean", "se", "z", "pass"], rows, {"paths": g["paths"]}, ok


def run_approx(cfg: ExperimentConfig, threads: int):
    inst = cfg.instance()
    a = cfg.section("approx")
    lam, _ = cfg.lambda_families(inst)
    rng = stream(cfg.seed, 4)
    controls = [random_decomposed_control(inst.tree, inst.actions.size, rng) for _ in range(a["controls"])]
    jobs = [(i, d) for i in range(len(controls)) for d in a["deltas"]]

    def job(item):
        i, d = item
        ap = approximate_control_by_ppp(controls[i], d, lam, inst.tree, inst.actions, cfg.seed,
                                        a["eps"], a["nbar"])
        mean, se = ap.estimate(a["replications"], stream(cfg.seed, 5, i, int(round(d * 1e6))))
        upper = mean + 1.6448536269514722 * se
        return {"control": i, "delta": d, "mean": mean, "se": se, "upper95": upper,
                "rate": float(ap.rates[0]), "pass": upper < d}

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(job, jobs))
    else:
        rows = [job(j) for j in jobs]
    ok = all(r["pass"] for r in rows)
    return ["control", "delta", "mean", "se", "upper95", "rate", "pass"], rows, \
        {"replications": a["replications"]}, ok


RUNNERS = {"equivalence": run_equivalence, "bsde": run_bsde, "dpp": run_dpp, "example": run_example,
           "girsanov": run_girsanov, "approx": run_approx}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfcrand", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON configuration file")
        s.add_argument("--seed", type=int, default=None, help="override the configured seed")
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--out", default="out", help="output directory")
        s.add_argument("--format", choices=("csv", "json"), default="csv")
    return p


def run(command: str, config: str, seed: int | None = None, threads: int = 1, out: str = "out",
        fmt: str = "csv") -> int:
    try:
        cfg = load_config(config, seed)
        columns, rows, summary, passed = RUNNERS[command](cfg, max(1, int(threads)))
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc.message}", file=sys.stderr)
        return 2
    except BudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return 2
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    results_name = "results.csv" if fmt == "csv" else "results.json"
    if fmt == "csv":
        (outdir / results_name).write_text(rows_to_csv(columns, rows))
    else:
        (outdir / results_name).write_text(
            json.dumps(_clean({"columns": columns, "rows": rows}), indent=2, sort_keys=True) + "\n")
    manifest = {
        "command": command,
        "version": __version__,
        "numpy": np.__version__,
        "seed": cfg.seed,
        "config": cfg.data,
        "results_file": results_name,
        "summary": summary,
        "passed": bool(passed),
    }
    (outdir / "manifest.json").write_text(json.dumps(_clean(manifest), indent=2, sort_keys=True) + "\n")
    print(f"{command}: {'PASS' if passed else 'FAIL'} ({len(rows)} rows) -> {outdir}")
    return 0 if passed else 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.command, args.config, args.seed, args.threads, args.out, args.format)


if __name__ == "__main__":
    sys.exit(main())
