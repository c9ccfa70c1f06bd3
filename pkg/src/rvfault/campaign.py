"""Statistical fault-injection campaigns.

A campaign runs, for each (benchmark, engine, tier) cell, one fault-free
golden execution followed by n statistically sized faulty executions, then
classifies every faulty run against the golden reference:

  * crash   - the run ended in a hardware trap;
  * timeout - the run exceeded timeout_factor x golden cycles;
  * masked  - the run exited with byte-identical output and exit code;
  * sdc     - the run exited but output or exit code differ.

For runs that complete (sdc and masked), the mean absolute percentage
deviation of the hardware performance counters quantifies how much the
execution diverged internally even when the output looks plausible.
Counters whose golden value is zero are excluded from both the sum and the
divisor; a faulty run that moves such a counter off zero is flagged
separately instead.

Tier sizes follow the standard proportion-estimate formula at worst-case
p = 0.5: n = z^2 / (4 e^2), which yields 384, 663, and 16587 runs for the
(5%, 95%), (5%, 99%), and (1%, 99%) tiers.

Everything is a pure function of (programs, configuration, master seed):
per-run seeds are derived by hashing, runs never share mutable state, and
aggregation is keyed by run index, so serial and parallel executions of the
same campaign produce byte-identical reports.
"""

from __future__ import annotations

import json
import multiprocessing
from dataclasses import dataclass, field

from .asm import assemble, load_image
from .injector import ENGINE_IDS, FaultConfig, InjectorSet, derive_seed
from .machine import HPC_NAMES, Machine, RunTrace
from .memsys import DEFAULT_RAM_SIZE, CacheGeometry, MemorySystem

CRASH = "crash"
SDC = "sdc"
MASKED = "masked"
TIMEOUT = "timeout"
OUTCOMES = (CRASH, SDC, MASKED, TIMEOUT)

TIER_PARAMS = {"low": (0.05, 0.95), "medium": (0.05, 0.99), "high": (0.01, 0.99)}
Z_VALUES = {0.95: 1.9600, 0.99: 2.5758}

REPORT_SCHEMA_VERSION = 1

RUNS_CSV_FIELDS = ("benchmark", "engine", "tier", "run_index", "seed",
                   "outcome", "delta_mean", "fault_count")


class CampaignError(Exception):
    pass


def sample_size(margin: float, confidence: float, z: float | None = None) -> int:
    """Required run count for a proportion estimate at worst-case p = 0.5."""
    if not 0.0 < margin < 1.0:
        raise CampaignError(f"margin of error must be in (0, 1), got {margin}")
    if z is None:
        z = Z_VALUES.get(confidence)
        if z is None:
            raise CampaignError(
                f"no z-value for confidence {confidence}; pass z explicitly")
    return int(z * z * 0.25 / (margin * margin) + 0.5)


def tier_runs(tier: str, n_override: int | None = None) -> int:
    if tier not in TIER_PARAMS:
        raise CampaignError(f"unknown tier {tier!r}")
    if n_override is not None:
        if n_override < 1:
            raise CampaignError(f"tier n override must be positive, got {n_override}")
        return n_override
    return sample_size(*TIER_PARAMS[tier])


@dataclass(frozen=True)
class MachineConfig:
    ram_size: int = DEFAULT_RAM_SIZE
    l1i: CacheGeometry = CacheGeometry(16 * 1024)
    l1d: CacheGeometry = CacheGeometry(64 * 1024)
    l2: CacheGeometry = CacheGeometry(256 * 1024)
    l2_hit_stall: int = 10
    ram_stall: int = 80
    timeout_factor: int = 10
    golden_cycle_ceiling: int = 10_000_000

    def build(self) -> Machine:
        mem = MemorySystem(ram_size=self.ram_size, l1i=self.l1i, l1d=self.l1d,
                           l2=self.l2, l2_hit_stall=self.l2_hit_stall,
                           ram_stall=self.ram_stall)
        return Machine(mem)

    def as_dict(self) -> dict:
        return {
            "ram_size": self.ram_size,
            "l1i": {"size": self.l1i.size_bytes, "block": self.l1i.block_bytes,
                    "assoc": self.l1i.associativity},
            "l1d": {"size": self.l1d.size_bytes, "block": self.l1d.block_bytes,
                    "assoc": self.l1d.associativity},
            "l2": {"size": self.l2.size_bytes, "block": self.l2.block_bytes,
                   "assoc": self.l2.associativity},
            "l2_hit_stall": self.l2_hit_stall,
            "ram_stall": self.ram_stall,
            "timeout_factor": self.timeout_factor,
            "golden_cycle_ceiling": self.golden_cycle_ceiling,
        }


@dataclass(frozen=True)
class GoldenReference:
    """Fault-free reference execution of one benchmark."""

    output: bytes
    exit_code: int
    hpc: tuple
    cycles: int

    def as_dict(self) -> dict:
        return {
            "output_hex": self.output.hex(),
            "exit_code": self.exit_code,
            "cycles": self.cycles,
            "hpc": dict(zip(HPC_NAMES, self.hpc)),
        }


def golden_run(image, machine_cfg: MachineConfig) -> GoldenReference:
    """Run fault-free; any trap or timeout here is a configuration error."""
    machine = machine_cfg.build()
    load_image(image, machine)
    trace = machine.run(cycle_budget=machine_cfg.golden_cycle_ceiling)
    if trace.status != "exited":
        detail = trace.trap.kind if trace.trap else f"{trace.cycles} cycles"
        raise CampaignError(
            f"golden run did not exit cleanly: {trace.status} ({detail})")
    return GoldenReference(output=trace.output, exit_code=trace.exit_code,
                           hpc=tuple(trace.hpc), cycles=trace.cycles)


def classify(run: RunTrace, golden: GoldenReference) -> str:
    """Map one completed run to exactly one outcome class.

    HPC differences deliberately play no part here: a masked run may still
    show counter variation, which is the whole point of the delta analysis.
    """
    if run.status == "trapped":
        return CRASH
    if run.status == "timed_out":
        return TIMEOUT
    if run.output == golden.output and run.exit_code == golden.exit_code:
        return MASKED
    return SDC


def delta_mean(h_ff, h_f) -> float:
    """Mean absolute percentage deviation over counters with nonzero golden.

    delta = (100 / n') * sum_i |h_ff[i] - h_f[i]| / h_ff[i], where i ranges
    over the counters with h_ff[i] > 0.
    """
    total = 0.0
    n = 0
    for g, f in zip(h_ff, h_f):
        if g > 0:
            total += abs(g - f) / g
            n += 1
    if n == 0:
        raise CampaignError("all-zero golden HPC vector")
    return total / n * 100.0


def divergent_from_zero(h_ff, h_f) -> bool:
    """True when a counter that is zero in the golden run is nonzero here."""
    return any(g == 0 and f > 0 for g, f in zip(h_ff, h_f))


@dataclass
class CampaignSpec:
    """Everything run_campaign needs; the CLI builds this from a TOML file."""

    benchmarks: list[tuple[str, str]]            # (name, assembly source)
    engines: dict[str, FaultConfig]
    tiers: list[tuple[str, int | None]] = field(default_factory=lambda: [("low", None)])
    seed: int = 0
    parallelism: int = 1
    machine: MachineConfig = MachineConfig()

    def engine_order(self) -> list[str]:
        return [e for e in ENGINE_IDS if e in self.engines]


def run_single(image, machine_cfg: MachineConfig, engine_cfgs: dict,
               run_seed: int, cycle_budget: int,
               collect_trace: bool = False) -> RunTrace:
    """One faulty execution with a fresh machine, memory system, and engines."""
    machine = machine_cfg.build()
    load_image(image, machine)
    injectors = InjectorSet.build(engine_cfgs, machine, machine.mem, run_seed)
    return machine.run(injectors=injectors, cycle_budget=cycle_budget,
                       collect_trace=collect_trace)


def run_seed_for(master_seed: int, benchmark: str, engine: str, tier: str,
                 run_index: int) -> int:
    return derive_seed(master_seed, benchmark, engine, tier, run_index)


_WORKER_CTX = {}


def _worker_init(images, goldens, machine_cfg, engines):
    _WORKER_CTX["images"] = images
    _WORKER_CTX["goldens"] = goldens
    _WORKER_CTX["machine_cfg"] = machine_cfg
    _WORKER_CTX["engines"] = engines


def _run_task(task):
    bench, engine_id, tier, run_index, run_seed = task
    image = _WORKER_CTX["images"][bench]
    golden = _WORKER_CTX["goldens"][bench]
    machine_cfg = _WORKER_CTX["machine_cfg"]
    cfg = _WORKER_CTX["engines"][engine_id]
    budget = machine_cfg.timeout_factor * golden.cycles
    trace = run_single(image, machine_cfg, {engine_id: cfg}, run_seed, budget)
    outcome = classify(trace, golden)
    row = {
        "run_index": run_index,
        "seed": run_seed,
        "outcome": outcome,
        "delta_mean": None,
        "divergent_from_zero": False,
        "fault_count": sum(1 for r in trace.fault_records if not r.skipped),
        "cycles": trace.cycles,
        "exit_code": trace.exit_code,
        "trap": trace.trap.kind if trace.trap else None,
    }
    if outcome in (SDC, MASKED):
        row["delta_mean"] = delta_mean(golden.hpc, trace.hpc)
        row["divergent_from_zero"] = divergent_from_zero(golden.hpc, trace.hpc)
    return row


def run_campaign(spec: CampaignSpec, progress=None) -> dict:
    """Execute the full campaign and return the report as a plain dict.

    The report is a pure function of (benchmarks, config, seed): identical
    regardless of execution order or parallelism degree.
    """
    if not spec.benchmarks:
        raise CampaignError("no benchmarks configured")
    if not spec.engines:
        raise CampaignError("no engines configured")
    for engine_id, cfg in spec.engines.items():
        if engine_id not in ENGINE_IDS:
            raise CampaignError(f"unknown engine {engine_id!r}")
        cfg.validate()

    images = {}
    goldens = {}
    for name, source in spec.benchmarks:
        if name in images:
            raise CampaignError(f"duplicate benchmark name {name!r}")
        image = assemble(source)
        images[name] = image
        goldens[name] = golden_run(image, spec.machine)

    cells = []
    tasks = []
    spans = []
    for name, _ in spec.benchmarks:
        for engine_id in spec.engine_order():
            for tier, n_override in spec.tiers:
                n = tier_runs(tier, n_override)
                start = len(tasks)
                for i in range(n):
                    tasks.append((name, engine_id, tier, i,
                                  run_seed_for(spec.seed, name, engine_id, tier, i)))
                spans.append((name, engine_id, tier, n, start))

    initargs = (images, goldens, spec.machine, spec.engines)
    if spec.parallelism > 1:
        with multiprocessing.Pool(spec.parallelism, initializer=_worker_init,
                                  initargs=initargs) as pool:
            rows = []
            for row in pool.imap(_run_task, tasks, chunksize=16):
                rows.append(row)
                if progress:
                    progress(len(rows), len(tasks))
    else:
        _worker_init(*initargs)
        rows = []
        for task in tasks:
            rows.append(_run_task(task))
            if progress:
                progress(len(rows), len(tasks))

    for name, engine_id, tier, n, start in spans:
        cell_rows = rows[start:start + n]
        counts = {oc: 0 for oc in OUTCOMES}
        sdc_deltas = []
        masked_deltas = []
        divergent = 0
        for row in cell_rows:
            counts[row["outcome"]] += 1
            if row["outcome"] == SDC:
                sdc_deltas.append(row["delta_mean"])
            elif row["outcome"] == MASKED:
                masked_deltas.append(row["delta_mean"])
            if row["divergent_from_zero"]:
                divergent += 1
        cells.append({
            "benchmark": name,
            "engine": engine_id,
            "tier": tier,
            "n_runs": n,
            "outcomes": counts,
            "delta_mean_sdc": sum(sdc_deltas) / len(sdc_deltas) if sdc_deltas else None,
            "delta_mean_masked": sum(masked_deltas) / len(masked_deltas) if masked_deltas else None,
            "divergent_from_zero_runs": divergent,
            "runs": cell_rows,
        })

    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "seed": spec.seed,
        "machine": spec.machine.as_dict(),
        "engines": {eid: vars(cfg).copy() for eid, cfg in spec.engines.items()},
        "tiers": [{"name": t, "n_runs": tier_runs(t, n)} for t, n in spec.tiers],
        "benchmarks": [name for name, _ in spec.benchmarks],
        "goldens": {name: g.as_dict() for name, g in goldens.items()},
        "cells": cells,
    }


# -- serialization ------------------------------------------------------------


def report_json_bytes(report: dict) -> bytes:
    return (json.dumps(report, indent=2, sort_keys=True) + "\n").encode()


def runs_csv_rows(report: dict) -> list[list]:
    rows = [list(RUNS_CSV_FIELDS)]
    for cell in report["cells"]:
        for run in cell["runs"]:
            delta = run["delta_mean"]
            rows.append([
                cell["benchmark"], cell["engine"], cell["tier"],
                run["run_index"], run["seed"], run["outcome"],
                "" if delta is None else repr(delta),
                run["fault_count"],
            ])
    return rows


def distribution_rows(report: dict) -> list[list]:
    """Stacked-bar source: outcome percentage per (benchmark, engine, tier)."""
    rows = [["benchmark", "engine", "tier", "n_runs",
             "crash_pct", "sdc_pct", "masked_pct", "timeout_pct"]]
    for cell in report["cells"]:
        n = cell["n_runs"]
        rows.append([cell["benchmark"], cell["engine"], cell["tier"], n]
                    + [repr(cell["outcomes"][oc] * 100.0 / n) for oc in OUTCOMES])
    return rows


def delta_table_rows(report: dict) -> list[list]:
    """Per-(engine, tier, benchmark) mean delta over SDC and Masked runs."""
    rows = [["engine", "tier", "benchmark", "sdc_delta_mean", "masked_delta_mean"]]
    for cell in report["cells"]:
        sdc = cell["delta_mean_sdc"]
        masked = cell["delta_mean_masked"]
        rows.append([cell["engine"], cell["tier"], cell["benchmark"],
                     "-" if sdc is None else repr(sdc),
                     "-" if masked is None else repr(masked)])
    return rows
