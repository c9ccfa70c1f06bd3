"""Command-line surface: assemble, golden, inject, campaign, analyze.

Every behavior here is a thin shell over the library; the JSON printed by
`golden` and `inject` is byte-identical to what the corresponding library
calls produce. All randomness flows from configured seeds; wall-clock time
appears only in the names of preserved output directories.

Exit codes: 0 success; 2 usage, file, or configuration errors; 1 runtime
failures (failed golden run, failed audit). `inject` encodes the outcome
instead: 0 masked, 10 sdc, 20 crash, 30 timeout.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .asm import AsmError, LoadError, assemble, image_to_json, load_image
from .campaign import (
    MASKED,
    OUTCOMES,
    CampaignError,
    CampaignSpec,
    classify,
    delta_mean,
    delta_table_rows,
    distribution_rows,
    divergent_from_zero,
    golden_run,
    report_json_bytes,
    run_campaign,
    run_single,
    runs_csv_rows,
)
from .config import ConfigError, FileConfig, load_config, resolve_program
from .injector import FaultConfigError
from .machine import HPC_NAMES
from .memsys import MemorySystemError

OUTCOME_EXIT_CODES = {"masked": 0, "sdc": 10, "crash": 20, "timeout": 30}

REPORT_FILES = ("report.json", "runs.csv", "outcome_distribution.csv",
                "delta_tables.csv")

OUT_DIR_ENV = "RVFAULT_OUT"


def golden_report_dict(name: str, golden) -> dict:
    doc = {"program": name}
    doc.update(golden.as_dict())
    return doc


def inject_report_dict(name: str, engine_id: str, seed: int, golden,
                       trace, outcome: str) -> dict:
    doc = {
        "program": name,
        "engine": engine_id,
        "seed": seed,
        "outcome": outcome,
        "status": trace.status,
        "exit_code": trace.exit_code,
        "trap": None if trace.trap is None else {
            "kind": trace.trap.kind,
            "pc_at_trap": trace.trap.pc_at_trap,
            "detail": trace.trap.detail,
        },
        "cycles": trace.cycles,
        "output_hex": trace.output.hex(),
        "hpc": dict(zip(HPC_NAMES, trace.hpc)),
        "fault_records": [r.as_dict() for r in trace.fault_records],
        "golden": golden.as_dict(),
    }
    if outcome in ("sdc", "masked"):
        doc["delta_mean"] = delta_mean(golden.hpc, trace.hpc)
        doc["divergent_from_zero"] = divergent_from_zero(golden.hpc, trace.hpc)
    return doc


def _print_json(doc: dict):
    print(json.dumps(doc, indent=2, sort_keys=True))


def _load_file_config(path: str | None) -> FileConfig:
    if path is None:
        return FileConfig()
    return load_config(path)


# -- subcommands ---------------------------------------------------------------


def cmd_assemble(args) -> int:
    name, source = resolve_program(args.program, Path.cwd())
    image = assemble(source)
    doc = image_to_json(image)
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.output:
        Path(args.output).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_golden(args) -> int:
    cfg = _load_file_config(args.config)
    name, source = resolve_program(args.program, Path.cwd())
    golden = golden_run(assemble(source), cfg.machine)
    _print_json(golden_report_dict(name, golden))
    return 0


def cmd_inject(args) -> int:
    cfg = _load_file_config(args.config)
    if args.engine not in cfg.engines:
        print(f"error: no [engines.{args.engine}] block in the configuration",
              file=sys.stderr)
        return 2
    name, source = resolve_program(args.program, Path.cwd())
    image = assemble(source)
    golden = golden_run(image, cfg.machine)
    budget = cfg.machine.timeout_factor * golden.cycles
    trace = run_single(image, cfg.machine, {args.engine: cfg.engines[args.engine]},
                       args.seed, budget)
    outcome = classify(trace, golden)
    _print_json(inject_report_dict(name, args.engine, args.seed, golden,
                                   trace, outcome))
    return OUTCOME_EXIT_CODES[outcome]


def _write_csv(path: Path, rows: list[list]):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def _preserve_previous(outdir: Path):
    existing = [f for f in REPORT_FILES if (outdir / f).exists()]
    if not existing:
        return
    stamp = datetime.now(timezone.utc).strftime("prev-%Y%m%d-%H%M%S-%f")
    prev = outdir / stamp
    prev.mkdir()
    for f in existing:
        (outdir / f).rename(prev / f)


def write_report_files(report: dict, outdir: Path, formats=("json", "csv")):
    """Emit campaign outputs; report.json lands last and atomically."""
    outdir.mkdir(parents=True, exist_ok=True)
    _preserve_previous(outdir)
    if "csv" in formats:
        _write_csv(outdir / "runs.csv", runs_csv_rows(report))
        _write_csv(outdir / "outcome_distribution.csv", distribution_rows(report))
        _write_csv(outdir / "delta_tables.csv", delta_table_rows(report))
    if "json" in formats:
        tmp = outdir / ".report.json.tmp"
        tmp.write_bytes(report_json_bytes(report))
        os.replace(tmp, outdir / "report.json")


def cmd_campaign(args) -> int:
    cfg = load_config(args.config)
    if not cfg.benchmark_paths:
        print("error: benchmarks.paths is empty", file=sys.stderr)
        return 2
    if not cfg.engines:
        print("error: no [engines.*] blocks configured", file=sys.stderr)
        return 2
    benchmarks = [resolve_program(p, cfg.base_dir) for p in cfg.benchmark_paths]
    spec = CampaignSpec(
        benchmarks=benchmarks,
        engines=cfg.engines,
        tiers=cfg.tiers,
        seed=cfg.seed,
        parallelism=cfg.parallelism,
        machine=cfg.machine,
    )
    report = run_campaign(spec)
    outdir = Path(args.out or os.environ.get(OUT_DIR_ENV) or cfg.out_dir)
    write_report_files(report, outdir, cfg.formats)
    total = sum(cell["n_runs"] for cell in report["cells"])
    print(f"campaign complete: {total} runs across {len(report['cells'])} cells "
          f"-> {outdir}")
    return 0


def _cell_key(row: dict) -> tuple:
    return (row["benchmark"], row["engine"], row["tier"])


def audit_report(outdir: Path) -> list[str]:
    """Recompute aggregates from runs.csv and diff them against report.json."""
    report = json.loads((outdir / "report.json").read_text())
    with open(outdir / "runs.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    grouped: dict[tuple, list[dict]] = {}
    for row in rows:
        grouped.setdefault(_cell_key(row), []).append(row)

    problems = []
    seen = set()
    for cell in report["cells"]:
        key = (cell["benchmark"], cell["engine"], cell["tier"])
        seen.add(key)
        cell_rows = grouped.get(key, [])
        if len(cell_rows) != cell["n_runs"]:
            problems.append(f"{key}: {len(cell_rows)} csv rows, report says "
                            f"{cell['n_runs']}")
            continue
        counts = {oc: 0 for oc in OUTCOMES}
        deltas = {"sdc": [], "masked": []}
        for row in cell_rows:
            oc = row["outcome"]
            if oc not in counts:
                problems.append(f"{key}: unknown outcome {oc!r} in csv")
                break
            counts[oc] += 1
            if oc in deltas and row["delta_mean"] != "":
                deltas[oc].append(float(row["delta_mean"]))
        if counts != cell["outcomes"]:
            problems.append(f"{key}: outcome counts differ "
                            f"(csv {counts}, report {cell['outcomes']})")
        for oc, field_name in (("sdc", "delta_mean_sdc"),
                               ("masked", "delta_mean_masked")):
            got = sum(deltas[oc]) / len(deltas[oc]) if deltas[oc] else None
            want = cell[field_name]
            if (got is None) != (want is None):
                problems.append(f"{key}: {field_name} presence differs")
            elif got is not None and not math.isclose(got, want,
                                                      rel_tol=1e-9, abs_tol=1e-9):
                problems.append(f"{key}: {field_name} csv {got!r} != report {want!r}")
    extra = set(grouped) - seen
    for key in sorted(extra):
        problems.append(f"{key}: present in csv but not in report")
    return problems


def render_tables(report: dict) -> str:
    """Human-readable distribution and delta tables ('-' = empty class)."""
    lines = ["Outcome distribution [%]:",
             f"  {'benchmark':<12} {'engine':<11} {'tier':<7} {'n':>6}  "
             f"{'crash':>7} {'sdc':>7} {'masked':>7} {'timeout':>7}"]
    for cell in report["cells"]:
        n = cell["n_runs"]
        pcts = [cell["outcomes"][oc] * 100.0 / n for oc in OUTCOMES]
        lines.append(f"  {cell['benchmark']:<12} {cell['engine']:<11} "
                     f"{cell['tier']:<7} {n:>6}  "
                     + " ".join(f"{p:>7.1f}" for p in pcts))
    lines.append("")
    lines.append("HPC deviation, mean over class [%]:")
    lines.append(f"  {'engine':<11} {'tier':<7} {'benchmark':<12} "
                 f"{'sdc':>12} {'masked':>12}")
    for cell in report["cells"]:
        def fmt(v):
            return "-" if v is None else f"{v:.2f}"
        lines.append(f"  {cell['engine']:<11} {cell['tier']:<7} "
                     f"{cell['benchmark']:<12} {fmt(cell['delta_mean_sdc']):>12} "
                     f"{fmt(cell['delta_mean_masked']):>12}")
    return "\n".join(lines)


def cmd_analyze(args) -> int:
    path = Path(args.report)
    outdir = path.parent if path.is_file() else path
    report = json.loads((outdir / "report.json").read_text())
    problems = audit_report(outdir)
    print(render_tables(report))
    print()
    if problems:
        print(f"audit FAILED: {len(problems)} divergent cells")
        for p in problems:
            print(f"  {p}")
        return 1
    print("audit clean")
    return 0


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rvfault",
        description="Fault-injection campaigns against a deterministic "
                    "RV32IM emulator.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("assemble", help="assemble a program to an image JSON")
    p.add_argument("program", help="assembly file path or kernel:<name>")
    p.add_argument("-o", "--output", help="write image JSON here instead of stdout")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("golden", help="fault-free run; print digest and HPCs")
    p.add_argument("program")
    p.add_argument("--config", help="TOML configuration file")
    p.set_defaults(func=cmd_golden)

    p = sub.add_parser("inject", help="single faulty run; exit code encodes outcome")
    p.add_argument("program")
    p.add_argument("--config", required=True)
    p.add_argument("--engine", required=True,
                   help="engine id: reg, cache_l1i, cache_l1d, cache_l2, mem")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("campaign", help="full statistical campaign")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help=f"output directory (overrides ${OUT_DIR_ENV} "
                                 "and the config file)")
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("analyze", help="print tables and audit a report directory")
    p.add_argument("report", help="report directory or report.json path")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: no such file: {e.filename}", file=sys.stderr)
        return 2
    except (ConfigError, AsmError, LoadError, FaultConfigError, MemorySystemError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CampaignError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
