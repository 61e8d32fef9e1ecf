"""Command-line interface: ingest datasets, run bias tests, drive experiments.

Exit codes: 0 success, 2 configuration problems, 3 ingestion failures,
4 computation failures.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from mvpb import dataio
from mvpb.data import MetaDataset, TestResult, UniSeries
from mvpb.errors import ConfigError, IngestError, MvpbError
from mvpb.pbtests import (
    begg_test,
    bonferroni_combine,
    combine_logdor,
    egger_test,
    total_se_series,
    trim_fill,
)
from mvpb.rst import rst_test
from mvpb.sim import SimScenario, TEST_NAMES, power_sweep, replicate_table1, run_cell

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INGEST = 3
EXIT_COMPUTE = 4

_METHODS = ("egger", "begg", "trimfill", "rst", "all")
_COMBINES = ("logdor", "bonferroni", "none")

TEST_RESULTS_SCHEMA = "mvpb-test-results-v1"


def _load_dataset(args) -> MetaDataset:
    spec = dataio.IngestSpec(path=args.input, default_rho_w=args.default_rho_w)
    report = dataio.ingest(spec)
    for issue in report.rejected:
        print(f"warning: row {issue.row} ({issue.study_id}): {issue.reason}", file=sys.stderr)
    return report.dataset


def _fmt_p(p: float | None) -> str:
    if p is None:
        return "--"
    if p < 0.001:
        return "<0.001"
    return f"{p:.3f}"


def cmd_test(args) -> int:
    dataset = _load_dataset(args)
    methods = ("egger", "begg", "trimfill") if args.method in ("all", "rst") else (args.method,)
    run_uni = args.method != "rst"
    run_rst = args.method in ("rst", "all")
    if args.combine == "logdor" and "logit" not in dataset.scales[0].lower() and dataset.scales[0] != "unspecified":
        print(
            f"warning: combined measure assumes logit-scale outcomes, dataset declares {dataset.scales}",
            file=sys.stderr,
        )

    rows: list[dict] = []
    notes: list[str] = []

    def record(method: str, variant: str, res: TestResult | None, err: str | None = None):
        rows.append({
            "method": method,
            "variant": variant,
            "statistic": res.statistic if res else None,
            "df_or_null": res.df_or_null if res else None,
            "p_value": res.p_value if res else None,
            "detail": json.dumps(res.detail, sort_keys=True, default=str) if res else (err or ""),
        })
        if err:
            notes.append(f"{method}/{variant}: {err}")

    fns = {"egger": egger_test, "begg": begg_test, "trimfill": trim_fill}
    any_ok = False
    if run_uni:
        combined = None
        combine_err = None
        if args.combine == "logdor":
            try:
                combined = total_se_series(combine_logdor(dataset))
            except (MvpbError, ValueError) as exc:
                combine_err = f"{exc} (drop --combine or supply complete studies)"
        per_series = []
        for j in (0, 1):
            try:
                y, se = dataset.outcome_series(j)
                per_series.append(total_se_series(UniSeries(y, se)))
            except (MvpbError, ValueError) as exc:
                per_series.append(exc)
        for method in methods:
            per = []
            for j in (0, 1):
                try:
                    if isinstance(per_series[j], Exception):
                        raise per_series[j]
                    res = fns[method](per_series[j])
                    per.append(res)
                    record(method, f"outcome{j + 1}", res)
                    any_ok = True
                except (MvpbError, ValueError) as exc:
                    per.append(None)
                    record(method, f"outcome{j + 1}", None, str(exc))
            if args.combine == "logdor":
                if combined is not None:
                    try:
                        res = fns[method](combined)
                        record(method, "combined", res)
                        any_ok = True
                    except (MvpbError, ValueError) as exc:
                        record(method, "combined", None, str(exc))
                else:
                    record(method, "combined", None, combine_err)
            elif args.combine == "bonferroni":
                if per[0] is not None and per[1] is not None:
                    res = bonferroni_combine(per[0], per[1])
                    record(method, "bonferroni", res)
                    any_ok = True
                else:
                    record(method, "bonferroni", None, "needs both per-outcome results")
    if run_rst:
        try:
            r = rst_test(dataset)
            res = TestResult(
                method="rst", statistic=r.statistic, df_or_null=float(r.df), p_value=r.p_value,
                detail={
                    "b_profiled": [float(v) for v in r.b_profiled],
                    "tau2": list(r.fit.params.tau2) if r.fit else None,
                    "rho_b": r.fit.params.rho_b if r.fit else None,
                },
            )
            record("rst", "joint", res)
            any_ok = True
        except (MvpbError, ValueError, np.linalg.LinAlgError) as exc:
            record("rst", "joint", None, str(exc))

    _print_test_table(rows, args.combine, args.alpha)
    for note in notes:
        print(f"note: {note}", file=sys.stderr)
    if args.out:
        dataio.write_rows_csv(
            args.out, TEST_RESULTS_SCHEMA,
            ["method", "variant", "statistic", "df_or_null", "p_value", "detail"],
            rows,
        )
        print(f"wrote {args.out}")
    return EXIT_OK if any_ok else EXIT_COMPUTE


def _print_test_table(rows: list[dict], combine: str, alpha: float) -> None:
    by_key = {(r["method"], r["variant"]): r for r in rows}
    combo_label = {"logdor": "combined", "bonferroni": "bonferroni", "none": None}[combine]
    header = ["test", "outcome1", "outcome2"] + ([combo_label] if combo_label else [])
    widths = [10, 10, 10, 12]
    print(f"p-values (alpha={alpha:g})")
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for method in ("egger", "begg", "trimfill"):
        cells = [method]
        present = False
        for variant in ["outcome1", "outcome2"] + ([combo_label] if combo_label else []):
            r = by_key.get((method, variant))
            if r is None:
                cells.append("--")
                continue
            present = True
            cells.append(_fmt_p(r["p_value"]) if r["p_value"] is not None else "NA")
        if present:
            print("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    r = by_key.get(("rst", "joint"))
    if r is not None:
        p = _fmt_p(r["p_value"]) if r["p_value"] is not None else "NA"
        print(f"rst         joint p={p}")


def cmd_simulate(args) -> int:
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            scenario = SimScenario.from_dict(json.load(fh))
    else:
        scenario = SimScenario(
            n_published=args.n,
            tau2=args.tau2,
            rho_w=args.rho_w,
            rho_b=args.rho_b,
            replicates=args.reps,
            seed=args.seed,
            selection={"none": "none", "complete": "complete", "partial": "partial"}[args.selection],
        )
    tests = _parse_tests(args.tests)
    res = run_cell(scenario, tests, alpha=args.alpha)
    rows = []
    for name in tests:
        rows.append({
            "tau2": scenario.tau2, "n": scenario.n_published,
            "rho_w": scenario.rho_w, "rho_b": scenario.rho_b,
            "selection": scenario.selection, "test": name, "alpha": args.alpha,
            "rejection_rate": res.rejection_rate[name], "mc_stderr": res.mc_stderr[name],
            "replicates": res.n_valid[name], "failures": res.failures[name],
        })
        print(f"{name:8s} rejection={res.rejection_rate[name]:.4f} "
              f"(se={res.mc_stderr[name]:.4f}, failures={res.failures[name]})")
    if args.out:
        from mvpb.sim import REJECTION_SCHEMA, _ROW_FIELDS
        dataio.write_rows_csv(args.out, REJECTION_SCHEMA, _ROW_FIELDS, rows)
        print(f"wrote {args.out}")
    return EXIT_OK


def _parse_tests(spec: str | None) -> tuple[str, ...]:
    if not spec or spec == "all":
        return TEST_NAMES
    names = tuple(t.strip() for t in spec.split(",") if t.strip())
    bad = [t for t in names if t not in TEST_NAMES]
    if bad:
        raise ConfigError(f"unknown test names {bad}; valid: {', '.join(TEST_NAMES)}")
    return names


def cmd_replicate(args) -> int:
    tests = _parse_tests(args.tests)
    if args.mode == "table1":
        rows = replicate_table1(
            args.out, budget=args.budget, seed=args.seed,
            rho_w=args.rho_w, rho_b=args.rho_b, alpha=args.alpha, tests=tests,
            replicates=args.reps,
        )
    else:
        rows = power_sweep(
            args.selection, args.out, budget=args.budget, seed=args.seed,
            rho_w=args.rho_w, rho_b=args.rho_b, alpha=args.alpha, tests=tests,
            replicates=args.reps,
        )
    print(f"wrote {args.out} ({len(rows)} rows)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvpb",
        description="Publication-bias tests for bivariate random-effects meta-analysis",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_test = sub.add_parser("test", help="run bias tests on an ingested dataset")
    p_test.add_argument("--input", required=True, help="dataset CSV")
    p_test.add_argument("--method", choices=_METHODS, default="all")
    p_test.add_argument("--combine", choices=_COMBINES, default="logdor")
    p_test.add_argument("--alpha", type=float, default=0.10)
    p_test.add_argument("--default-rho-w", type=float, default=None,
                        help="impute this within-study correlation on complete rows that lack one")
    p_test.add_argument("--out", default=None, help="write full results CSV here")
    p_test.set_defaults(func=cmd_test)

    p_sim = sub.add_parser("simulate", help="run one simulation cell")
    p_sim.add_argument("--config", default=None, help="JSON file with scenario fields")
    p_sim.add_argument("--tau2", type=float, default=0.5)
    p_sim.add_argument("--n", type=int, default=50)
    p_sim.add_argument("--rho-w", type=float, default=0.5)
    p_sim.add_argument("--rho-b", type=float, default=0.5)
    p_sim.add_argument("--selection", choices=("none", "complete", "partial"), default="none")
    p_sim.add_argument("--reps", type=int, default=500)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--alpha", type=float, default=0.10)
    p_sim.add_argument("--tests", default="all", help="comma-separated test names or 'all'")
    p_sim.add_argument("--out", default=None)
    p_sim.set_defaults(func=cmd_simulate)

    p_rep = sub.add_parser("replicate", help="run the calibration table or power sweep")
    p_rep.add_argument("mode", choices=("table1", "power"))
    p_rep.add_argument("--budget", choices=("desk", "full"), default="desk")
    p_rep.add_argument("--seed", type=int, default=0)
    p_rep.add_argument("--alpha", type=float, default=0.10)
    p_rep.add_argument("--rho-w", type=float, default=0.5)
    p_rep.add_argument("--rho-b", type=float, default=0.5)
    p_rep.add_argument("--selection", choices=("complete", "partial"), default="complete")
    p_rep.add_argument("--tests", default="all")
    p_rep.add_argument("--reps", type=int, default=None, help="override the budget's replicate count")
    p_rep.add_argument("--out", required=True)
    p_rep.set_defaults(func=cmd_replicate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        return args.func(args)
    except IngestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for issue in exc.rejected:
            print(f"  row {issue.row} ({issue.study_id}): {issue.reason}", file=sys.stderr)
        return EXIT_INGEST
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MvpbError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    raise SystemExit(main())
