"""Command-line surface: synthesize cohorts, run experiments, analyze run
logs, and compare configurations.

Exit codes are a stable contract: 0 success, 2 usage or input error,
3 backend failure (partial logs are preserved).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, analysis, reports
from .backend import make_backend
from .errors import BackendError, ConfigError, IcsmError
from .experiment import (
    ExperimentAborted,
    ExperimentConfig,
    cohort_path,
    load_config,
    log_content_digest,
    read_run_log,
    run_experiment,
)
from .population import (
    DEFAULT_VARIABLES,
    attribute_counts,
    load_marginals,
    read_cohort,
    synthesize_cohort,
    write_cohort,
)

PROG = "icsm"


def _fail(message: str) -> int:
    print(f"{PROG}: error: {message}", file=sys.stderr)
    return 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description=(
            "Synthesize census-faithful agent cohorts, run model-backed "
            "voting experiments, and validate the results."
        ),
    )
    parser.add_argument("--version", action="version", version=f"{PROG} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_syn = sub.add_parser("synthesize", help="build per-state cohort files")
    p_syn.add_argument("--config", required=True, help="experiment config (TOML)")
    p_syn.add_argument("--census", help="census CSV (overrides [synthesis].census)")
    p_syn.add_argument("--seed", type=int, help="override the config root_seed")
    p_syn.add_argument("--size", type=int, help="override [synthesis].cohort_size")
    p_syn.add_argument("--out", help="cohort output directory (overrides cohort_dir)")
    p_syn.set_defaults(func=cmd_synthesize)

    p_run = sub.add_parser("run", help="run the experiment, appending a JSONL log")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--rounds", type=int, help="override the config round count")
    p_run.add_argument("--resume", action="store_true", help="continue a partial log")
    p_run.add_argument("--out", help="run log path (default <experiment_id>.jsonl)")
    p_run.set_defaults(func=cmd_run)

    p_an = sub.add_parser("analyze", help="compute reports from a run log")
    p_an.add_argument(
        "what", choices=["shares", "reliability", "validity", "weight", "cramers"]
    )
    p_an.add_argument("--log", required=True, help="run log (JSONL)")
    p_an.add_argument("--benchmark", help="benchmark CSV (validity)")
    p_an.add_argument("--term", help="term to count (weight)")
    p_an.add_argument("--variable", help="identity variable to cross-tabulate (cramers)")
    p_an.add_argument("--cohorts", help="cohort directory (cramers)")
    p_an.add_argument(
        "--inflation-factor",
        type=float,
        default=analysis.DEFAULT_INFLATION_FACTOR,
        help="benchmark error inflation (default 0.65)",
    )
    p_an.add_argument("--out", default="reports", help="report directory")
    p_an.set_defaults(func=cmd_analyze)

    p_cmp = sub.add_parser("compare", help="knowledge-discovery verdict for two logs")
    p_cmp.add_argument("--log-a", required=True, help="baseline run log")
    p_cmp.add_argument("--log-b", required=True, help="candidate run log")
    p_cmp.add_argument("--benchmark", required=True)
    p_cmp.add_argument(
        "--inflation-factor",
        type=float,
        default=analysis.DEFAULT_INFLATION_FACTOR,
    )
    p_cmp.add_argument("--out", default="reports")
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ExperimentAborted as exc:
        _print_summary(exc.summary)
        print(f"{PROG}: backend failure: {exc}", file=sys.stderr)
        return 3
    except BackendError as exc:
        print(f"{PROG}: backend failure: {exc}", file=sys.stderr)
        return 3
    except IcsmError as exc:
        return _fail(str(exc))
    except FileNotFoundError as exc:
        return _fail(f"{exc.filename or exc} not found")


def entrypoint() -> None:
    sys.exit(main())


def _print_summary(summary) -> None:
    print(
        f"records: expected {summary.expected_total}, "
        f"already present {summary.persisted_before}, "
        f"persisted now {summary.persisted_new}, "
        f"aborted remainder {summary.aborted_remainder}"
    )


def cmd_synthesize(args) -> int:
    config = load_config(args.config)
    census = args.census or (config.synthesis.census if config.synthesis else None)
    if not census:
        return _fail("no census file: pass --census or set [synthesis].census")
    if not Path(census).exists():
        return _fail(f"census file {census} does not exist")
    n = args.size or (config.synthesis.cohort_size if config.synthesis else 1000)
    seed = args.seed if args.seed is not None else config.root_seed
    out_dir = Path(args.out or config.cohort_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    schema_mode = config.synthesis.schema if config.synthesis else "auto"
    schema = DEFAULT_VARIABLES if schema_mode == "builtin" else None
    marginals = load_marginals(census, schema)
    by_state: dict[str, list] = {}
    for m in marginals:
        by_state.setdefault(m.state, []).append(m)

    manifest = reports.Manifest(out_dir / "manifest.json")
    manifest.record("experiment_id", config.experiment_id)
    manifest.record(
        "census", {"path": str(census), "digest": reports.file_digest(census)}
    )
    manifest.record(
        "config", {"path": str(args.config), "digest": reports.file_digest(args.config)}
    )
    cohort_entries = {}
    total = 0
    for state in config.states:
        if state not in by_state:
            return _fail(f"census file has no rows for state {state!r}")
        cohort = synthesize_cohort(by_state[state], n, seed)
        path = cohort_path(out_dir, state)
        write_cohort(cohort, path)
        cohort_entries[state] = {
            "path": str(path),
            "digest": reports.file_digest(path),
        }
        total += cohort.size
        print(f"{state}: {cohort.size} agents -> {path}")
        for m in by_state[state]:
            counts = attribute_counts(cohort, m.variable.name)
            deviation = max(
                abs(counts.get(c, 0) / n - m.proportions[c])
                for c in m.variable.categories
            )
            print(
                f"  {m.variable.name}: max |freq - target| = {deviation:.5f} "
                f"(bound 1/n = {1 / n:.5f})"
            )
    manifest.record("cohorts", cohort_entries)
    manifest.save()
    print(f"wrote {len(config.states)} cohort files, {total} agents total")
    return 0


def _manifest_for_log(log_path: Path) -> reports.Manifest:
    return reports.Manifest(log_path.with_name(log_path.name + ".manifest.json"))


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.rounds is not None:
        config = replace(config, rounds=args.rounds)
    log_path = Path(args.out or f"{config.experiment_id}.jsonl")
    if log_path.exists() and log_path.stat().st_size > 0 and not args.resume:
        return _fail(
            f"run log {log_path} already exists; pass --resume to continue it"
        )

    backend = make_backend(config.backend, config.scenario, config.root_seed)

    def progress(round_number: int, persisted: int) -> None:
        print(f"round {round_number}/{config.rounds}: {persisted} records persisted")

    try:
        summary = run_experiment(
            config, log_path, backend=backend, resume=args.resume, progress=progress
        )
    finally:
        if log_path.exists():
            _save_run_manifest(args.config, config, log_path)
    _print_summary(summary)
    print(f"run log: {log_path}")
    return 0


def _save_run_manifest(config_path, config: ExperimentConfig, log_path: Path) -> None:
    manifest = _manifest_for_log(log_path)
    manifest.record("experiment_id", config.experiment_id)
    manifest.record(
        "config",
        {"path": str(config_path), "digest": reports.file_digest(config_path)},
    )
    cohort_entries = {}
    for state in config.states:
        path = cohort_path(config.cohort_dir, state)
        if path.exists():
            cohort_entries[state] = {
                "path": str(path),
                "digest": reports.file_digest(path),
            }
    manifest.record("cohorts", cohort_entries)
    manifest.record(
        "run_log",
        {
            "path": str(log_path),
            "content_digest": log_content_digest(read_run_log(log_path)),
        },
    )
    manifest.save()


def cmd_analyze(args) -> int:
    log_path = Path(args.log)
    records = read_run_log(log_path)
    if not records:
        return _fail(f"run log {log_path} is empty")

    digest = log_content_digest(records)
    provenance = {"run_log": str(log_path), "run_log_content_digest": digest}

    manifest = None
    manifest_path = log_path.with_name(log_path.name + ".manifest.json")
    if manifest_path.exists():
        manifest = reports.Manifest(manifest_path)
        problems = manifest.verify()
        recorded = manifest.data.get("run_log", {}).get("content_digest")
        if recorded and recorded != digest:
            problems.append("run log content no longer matches its recorded digest")
        if problems:
            for problem in problems:
                print(f"{PROG}: manifest: {problem}", file=sys.stderr)
            return 2
        if "config" in manifest.data:
            provenance["config_digest"] = manifest.data["config"]["digest"]

    name = args.what
    if name == "shares":
        headers, rows = reports.shares_rows(
            analysis.round_shares(records), analysis.pooled_shares(records)
        )
        footer: list[str] = []
    elif name == "reliability":
        headers, rows = reports.reliability_rows(analysis.reliability_by_state(records))
        footer = []
    elif name == "validity":
        if not args.benchmark:
            return _fail("validity needs --benchmark")
        benchmark = analysis.load_benchmark(args.benchmark, args.inflation_factor)
        report = analysis.validity(analysis.pooled_shares(records), benchmark)
        headers, rows, footer = reports.validity_rows(report)
        provenance["benchmark"] = str(args.benchmark)
    elif name == "weight":
        if not args.term:
            return _fail("weight needs --term")
        report = analysis.explanatory_weight(records, args.term)
        headers, rows, footer = reports.weight_rows(report)
    else:
        if not args.variable:
            return _fail("cramers needs --variable")
        if not args.cohorts:
            return _fail("cramers needs --cohorts (to join agent attributes)")
        headers, rows, footer = _cramers_report(args, records)

    _, txt_path, text = reports.write_report(
        args.out, name, headers, rows, footer, provenance
    )
    if manifest is not None:
        manifest.record_report(name, txt_path.with_suffix(".csv"))
        manifest.record_report(f"{name}_text", txt_path)
        manifest.save()
    print(text, end="")
    return 0


def _cramers_report(args, records):
    variable = args.variable
    states = sorted({r.state for r in records})
    lookup: dict[tuple[str, int], str] = {}
    declared_order: list[str] = []
    for state in states:
        path = cohort_path(args.cohorts, state)
        if not path.exists():
            raise ConfigError(f"no cohort file for {state!r} at {path}")
        cohort = read_cohort(path)
        for var in cohort.variables:
            if var.name == variable and not declared_order:
                declared_order = list(var.categories)
        for agent in cohort.agents:
            if variable not in agent.attributes:
                raise ConfigError(
                    f"cohort for {state!r} has no variable {variable!r}"
                )
            lookup[(state, agent.agent_id)] = agent.attributes[variable]

    pairs = []
    ties = 0
    for record in records:
        if record.parsed is None:
            continue
        key = (record.state, record.agent_id)
        if key not in lookup:
            raise ConfigError(
                f"agent {record.agent_id} of {record.state!r} missing from cohorts"
            )
        if analysis.support_tie(record.parsed):
            ties += 1
        pairs.append((lookup[key], analysis.binary_support(record.parsed)))

    observed = {category for category, _ in pairs}
    if declared_order:
        row_order = [c for c in declared_order if c in observed]
    else:
        row_order = sorted(observed)
    table = analysis.build_contingency(pairs, row_order=row_order)
    chi2 = analysis.chi_square(table)
    v = analysis.cramers_v(table)
    return reports.cramers_rows(variable, table, chi2, v, ties)


def cmd_compare(args) -> int:
    benchmark = analysis.load_benchmark(args.benchmark, args.inflation_factor)
    records_a = read_run_log(Path(args.log_a))
    records_b = read_run_log(Path(args.log_b))
    if not records_a or not records_b:
        return _fail("both run logs must be non-empty")
    report_a = analysis.validity(analysis.pooled_shares(records_a), benchmark)
    report_b = analysis.validity(analysis.pooled_shares(records_b), benchmark)
    comparison = analysis.compare_configs(report_a, report_b)
    headers, rows, footer = reports.compare_rows(comparison)
    provenance = {
        "run_log_a": str(args.log_a),
        "run_log_a_content_digest": log_content_digest(records_a),
        "run_log_b": str(args.log_b),
        "run_log_b_content_digest": log_content_digest(records_b),
        "benchmark": str(args.benchmark),
    }
    _, _, text = reports.write_report(
        args.out, "compare", headers, rows, footer, provenance
    )
    print(text, end="")
    return 0
