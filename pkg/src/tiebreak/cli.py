"""Command-line pipeline: validate, match, verify, score, oracle, sweep, balance, estimate, synth."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from . import io
from .da import run_da, run_serial_dictatorship, verify_stability
from .distributions import CdfFamily
from .econometrics import (attrition_report, balance_regression, build_frame, raw_difference,
                           two_stage_least_squares)
from .market import Market, validate_market
from .oracle import convergence_sweep, mc_score
from .scores import da_global_score, estimate_local_score, sector_score
from .synth import SynthConfig, generate, random_template, worked_template


class CliError(Exception):
    pass


def _load(args) -> Market:
    sectors = io.read_sectors(args.sectors) if getattr(args, "sectors", None) else None
    return io.read_market(args.market, scale=getattr(args, "scale", False), sectors=sectors)


def _outcome(args, market):
    if getattr(args, "match", None):
        return io.read_match(market, args.match)
    if getattr(args, "mechanism", "da") == "sd":
        return run_serial_dictatorship(market)
    return run_da(market)


def _manifest(args, command: str, **extra) -> io.RunManifest:
    paths = [Path(p) for p in (getattr(args, "market", None), getattr(args, "match", None),
                                getattr(args, "sectors", None), getattr(args, "config", None),
                                getattr(args, "cdfs", None), getattr(args, "against", None)) if p]
    bw = getattr(args, "bandwidths", None)
    params = {k: v for k, v in sorted(vars(args).items())
              if k not in ("func", "out", "market", "match", "sectors", "config", "cdfs", "against",
                           "bandwidths", "seed", "threads")}
    sectors = io.read_sectors(args.sectors) if getattr(args, "sectors", None) else None
    return io.RunManifest(command, io.input_digests(paths), getattr(args, "seed", None), bw, sectors,
                          {**params, **extra})


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


# -- subcommands ----------------------------------------------------------------------------

def cmd_validate(args) -> int:
    report = validate_market(_load(args))
    _emit(report.to_dict())
    return 0 if report.ok else 1


def cmd_match(args) -> int:
    market = _load(args)
    outcome = _outcome(args, market)
    with io.OutputDir(args.out) as tmp:
        io.write_match(market, outcome, tmp)
        (tmp / "manifest.json").write_text(_manifest(args, "match").to_json())
    _emit({"assigned": int((outcome.assigned >= 0).sum()), "applicants": len(market.applicants),
           "out": str(args.out)})
    return 0


def cmd_verify(args) -> int:
    market = _load(args)
    outcome = _outcome(args, market)
    v = verify_stability(market, outcome)
    _emit({"stability_violations": len(v), "details": [x.__dict__ for x in v[:20]]})
    return 0 if not v else 1


def _global_uniform(market, outcome, table) -> np.ndarray:
    cutoffs = outcome.cutoffs
    cache: dict[int, dict[int, float]] = {}
    psi = np.empty(len(table.psi))
    type_id = market.arrays.type_id
    for k in range(len(psi)):
        i = int(table.applicant_index[k])
        t = int(type_id[i])
        if t not in cache:
            cache[t] = da_global_score(market.applicants[i].type, cutoffs, market)
        psi[k] = cache[t][int(table.school_ids[k])]
    return psi


def _html_report(table, market, path: Path) -> None:
    import base64
    import io as _bio

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    df = table.to_frame()
    labels = sorted({t for s in market.schools for t in s.tags})
    parts = ["<!doctype html><html><head><meta charset='utf-8'><title>Score report</title>",
             "<style>body{font-family:sans-serif;margin:2em}table{border-collapse:collapse}"
             "td,th{border:1px solid #999;padding:2px 8px;text-align:right}</style></head><body>",
             "<h1>Local propensity scores</h1>",
             "<h2>Classification counts</h2>",
             df["t"].value_counts().sort_index().rename("rows").to_frame().to_html()]
    summary = []
    for label in labels:
        sec = sector_score(table, label)
        summary.append({"sector": label, "applicants": len(sec), "with_risk": int(sec["risk"].sum()),
                        "mean_psi": float(sec["psi"].mean())})
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.hist(sec.loc[sec["risk"], "psi"], bins=40, range=(0, 1), color="#4472c4")
        ax.set_xlabel(f"sector score ({label}), applicants with risk")
        ax.set_ylabel("applicants")
        fig.tight_layout()
        buf = _bio.BytesIO()
        fig.savefig(buf, format="png", metadata={"Software": None})
        plt.close(fig)
        parts.append(f"<h2>{label}</h2><img alt='{label}' src='data:image/png;base64,"
                     f"{base64.b64encode(buf.getvalue()).decode()}'>")
    if summary:
        parts.insert(5, "<h2>Sectors</h2>" + pd.DataFrame(summary).to_html(index=False))
    bw = pd.DataFrame({"school_id": list(table.deltas), "delta": list(table.deltas.values()),
                       "source": [table.bandwidth_source.get(s, "") for s in table.deltas]})
    parts.append("<h2>Bandwidths</h2>" + bw.to_html(index=False))
    if table.warnings:
        parts.append("<h2>Warnings</h2><ul>" + "".join(f"<li>{w}</li>" for w in table.warnings) + "</ul>")
    parts.append("</body></html>\n")
    path.write_text("\n".join(parts), encoding="utf-8")


def cmd_score(args) -> int:
    market = _load(args)
    outcome = _outcome(args, market)
    table = estimate_local_score(market, outcome, io.read_bandwidths(args.bandwidths))
    psi = _global_uniform(market, outcome, table) if args.global_uniform else None
    with io.OutputDir(args.out) as tmp:
        io.write_scores(market, outcome, table, tmp / "scores.csv", psi)
        io.write_csv(tmp / "bandwidths.csv", ["school_id", "delta", "source"],
                     ([s, d, table.bandwidth_source.get(s, "")] for s, d in table.deltas.items()))
        labels = sorted({t for s in market.schools for t in s.tags})
        if labels:
            sec = pd.DataFrame({"applicant_id": market.arrays.applicant_ids})
            for label in labels:
                s = sector_score(table, label) if psi is None else None
                if psi is not None:
                    tagged = np.isin(table.school_ids, market.schools_with_tag(label))
                    p = np.bincount(table.applicant_index[tagged], weights=psi[tagged],
                                    minlength=table.n_applicants)
                    s = pd.DataFrame({"psi": p, "risk": (p > 0) & (p < 1)})
                sec[f"psi_{label}"] = s["psi"].to_numpy()
                sec[f"risk_{label}"] = s["risk"].to_numpy()
            io.write_frame(tmp / "sector_scores.csv", sec)
        if table.warnings:
            (tmp / "warnings.json").write_text(json.dumps(table.warnings, indent=2) + "\n")
        if args.report == "html":
            _html_report(table, market, tmp / "report.html")
        (tmp / "manifest.json").write_text(_manifest(args, "score").to_json())
    _emit({"rows": len(table.psi), "warnings": table.warnings, "out": str(args.out)})
    return 0


def _read_cdfs(path, market: Market) -> CdfFamily:
    if not path:
        return CdfFamily(market.n_lottery, market.V)
    raw = json.loads(Path(path).read_text())
    return CdfFamily.from_dict(raw.get("cdfs", raw))


def cmd_oracle(args) -> int:
    market = _load(args)
    cdfs = _read_cdfs(args.cdfs, market)
    res = mc_score(market, cdfs, args.delta, args.draws, args.seed, workers=args.threads)
    report = {"draws": args.draws, "seed": args.seed, "delta": args.delta, "cells": len(res.cells),
              "occupied_min": args.min_occ}
    check = res.plugin_check(args.min_occ)
    report["plugin_cells"] = len(check)
    report["plugin_failures"] = int((~check["ok"]).sum())
    if args.against:
        table = io.table_from_scores(market, io.read_scores(args.against))
        sup, se, n = res.sup_deviation(table, market.arrays.type_id, args.min_occ)
        report.update({"sup_deviation": sup, "sup_se": se, "compared_cells": n})
    with io.OutputDir(args.out) as tmp:
        io.write_frame(tmp / "oracle_cells.csv", res.cells)
        (tmp / "oracle_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        (tmp / "manifest.json").write_text(_manifest(args, "oracle").to_json())
    _emit(report)
    return 0


def cmd_sweep(args) -> int:
    cfg = json.loads(Path(args.config).read_text())
    tpl = cfg.get("template", {"kind": "random"})
    kind = tpl.get("kind", "random")
    if kind == "worked":
        template = worked_template()
    elif kind == "random":
        template = random_template(**{k: v for k, v in tpl.items() if k != "kind"})
    else:
        raise CliError(f"unknown template kind {kind!r}")
    if "schedule" in cfg:
        schedule = [(int(n), float(d)) for n, d in cfg["schedule"]]
    else:
        schedule = [(int(n), float(n) ** (-1.0 / 3.0)) for n in cfg.get("sizes", [500, 2000, 8000])]
    seed = int(cfg.get("seed", args.seed or 0))
    res = convergence_sweep(template, schedule, int(cfg.get("draws", 2000)), seed,
                            int(cfg.get("min_occ", 100)), workers=args.threads)
    inv, within = res.inversions()
    report = {"steps": res.steps.to_dict(orient="records"), "inversions": inv, "within_2se": within,
              "trend_ok": res.trend_ok()}
    with io.OutputDir(args.out) as tmp:
        io.write_frame(tmp / "sweep.csv", res.steps)
        (tmp / "sweep_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        (tmp / "manifest.json").write_text(_manifest(args, "sweep", seed_used=seed).to_json())
    _emit(report)
    return 0


def _frame(args, market, families):
    outcome = _outcome(args, market)
    table = estimate_local_score(market, outcome, io.read_bandwidths(args.bandwidths))
    return build_frame(market, outcome, table, families, rounding=args.rounding)


def cmd_balance(args) -> int:
    market = _load(args)
    frame = _frame(args, market, args.family)
    fits = balance_regression(frame, args.covariates)
    rows, text = [], []
    for cov, fit in fits.items():
        for fam in args.family:
            raw = raw_difference(frame, cov, fam)
            d = frame.d_col(fam)
            rows.append([cov, fam, fit.coef_of(d), fit.se_of(d), fit.se_of(d, robust=False), fit.n,
                         raw.coef_of(d), raw.se_of(d), raw.n])
        text.append(f"[{cov}]\n{fit.text()}")
    header = ["covariate", "family", "estimate", "se", "se_homoskedastic", "n", "raw_estimate", "raw_se", "raw_n"]
    with io.OutputDir(args.out) as tmp:
        io.write_csv(tmp / "balance.csv", header, rows)
        (tmp / "balance.txt").write_text("\n\n".join(text) + "\n")
        (tmp / "manifest.json").write_text(_manifest(args, "balance").to_json())
    _emit([dict(zip(header, r)) for r in rows])
    return 0


def cmd_estimate(args) -> int:
    market = _load(args)
    frame = _frame(args, market, args.instrument)
    fit = two_stage_least_squares(frame, args.outcome, args.treatment, args.instrument, args.covariates)
    rows = []
    for model, f in [("2sls", fit), ("ols", fit.ols)] + [(f"first_stage:{k}", v) for k, v in fit.first_stage.items()]:
        for _, r in f.table().iterrows():
            rows.append([model, r["term"], r["estimate"], r["se"], r["se_homoskedastic"], int(r["n"])])
    header = ["model", "term", "estimate", "se", "se_homoskedastic", "n"]
    summary = {"n": fit.n, "first_stage_F": fit.first_stage_F, "dropped": fit.dropped}
    with io.OutputDir(args.out) as tmp:
        io.write_csv(tmp / "estimates.csv", header, rows)
        (tmp / "estimates.txt").write_text(fit.text() + "\n\n" + fit.ols.text() + "\n")
        io.write_frame(tmp / "attrition.csv", attrition_report(frame, args.outcome, args.instrument[0]))
        (tmp / "estimates.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        (tmp / "manifest.json").write_text(_manifest(args, "estimate").to_json())
    _emit({**summary, "estimates": [dict(zip(header, r)) for r in rows]})
    return 0


def cmd_synth(args) -> int:
    raw = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = SynthConfig.from_dict(raw)
    res = generate(cfg)
    with io.OutputDir(args.out) as tmp:
        io.write_market(res.market, tmp)
        (tmp / "truth.json").write_text(res.sidecar_json() + "\n")
        (tmp / "manifest.json").write_text(_manifest(args, "synth", seed_used=cfg.seed).to_json())
    _emit({"applicants": len(res.market.applicants), "schools": len(res.market.schools), "out": str(args.out)})
    return 0


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tiebreak", description="DA matching, local propensity scores and score-controlled IV")
    p.add_argument("--threads", type=int, default=1, help="worker processes for the oracle and sweep")
    sub = p.add_subparsers(dest="command", required=True)

    def market_cmd(name, func, help_, out=True, match=True):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("market", help="market directory")
        sp.add_argument("--sectors", help="sector label file (JSON or CSV)")
        sp.add_argument("--scale", action="store_true", help="tie-breaker values are raw integer ranks")
        if match:
            sp.add_argument("--match", help="match directory to reuse instead of rerunning DA")
        if out:
            sp.add_argument("--out", required=True, help="output directory (must not exist or be empty)")
        sp.set_defaults(func=func)
        return sp

    market_cmd("validate", cmd_validate, "check a market directory", out=False, match=False)
    sp = market_cmd("match", cmd_match, "run deferred acceptance", match=False)
    sp.add_argument("--mechanism", choices=["da", "sd"], default="da")
    market_cmd("verify", cmd_verify, "check the cutoff characterization of a match", out=False)
    sp = market_cmd("score", cmd_score, "local propensity scores")
    sp.add_argument("--bandwidths", default="default", help="'default', a number, or a CSV/JSON file")
    sp.add_argument("--global-uniform", action="store_true", help="write global scores with uniform CDFs")
    sp.add_argument("--report", choices=["html"], help="also emit a static report")
    sp = market_cmd("oracle", cmd_oracle, "Monte Carlo score frequencies", match=False)
    sp.add_argument("--draws", type=int, default=10_000)
    sp.add_argument("--delta", type=float, default=0.02)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--cdfs", help="CDF family JSON (a synth truth.json works)")
    sp.add_argument("--against", help="scores.csv to compare")
    sp.add_argument("--min-occ", type=int, default=100)
    sp = sub.add_parser("sweep", help="convergence sweep over market sizes")
    sp.add_argument("config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_sweep)
    for name, func, help_ in (("balance", cmd_balance, "covariate balance given the scores"),
                              ("estimate", cmd_estimate, "OLS, first stage and 2SLS with score controls")):
        sp = market_cmd(name, func, help_)
        sp.add_argument("--bandwidths", default="default")
        sp.add_argument("--rounding", type=float, help="round scores to this grid before building dummies")
    sub.choices["balance"].add_argument("--covariates", nargs="+", required=True)
    sub.choices["balance"].add_argument("--family", nargs="+", default=["GradeA"], help="sector labels")
    est = sub.choices["estimate"]
    est.add_argument("--outcome", required=True)
    est.add_argument("--treatment", nargs="+", required=True)
    est.add_argument("--instrument", nargs="+", required=True, help="sector labels whose assignment dummies instrument")
    est.add_argument("--covariates", nargs="*", default=[])
    sp = sub.add_parser("synth", help="generate a synthetic market")
    sp.add_argument("config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        # linear algebra stays single-threaded so results do not depend on the machine
        with threadpool_limits(limits=1):
            return args.func(args)
    except Exception as exc:                          # noqa: BLE001 - reported as JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command},
                         sort_keys=True), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
