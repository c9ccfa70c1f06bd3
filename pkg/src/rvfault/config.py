"""TOML campaign configuration: parsing, schema validation, program lookup.

The file form mirrors the library objects one to one:

    [machine]            ram_size, stall latencies, timeout_factor, ...
    [machine.l1i]        size / block / assoc   (same for l1d, l2)
    [benchmarks]         paths = ["kernel:crc", "path/to/prog.s", ...]
    [engines.<id>]       one FaultConfig block per engine
    [campaign]           tiers, seed, parallelism
    [output]             dir, formats

Unknown keys anywhere are rejected, and every violation names the offending
key. Paths are resolved relative to the config file; the `kernel:` scheme
names a bundled benchmark.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import BUNDLED_KERNELS, kernel_source
from .campaign import TIER_PARAMS, MachineConfig
from .injector import ENGINE_IDS, RANDOM, FAULT_TYPES, FaultConfig, FaultConfigError
from .memsys import CacheGeometry, MemorySystemError


class ConfigError(Exception):
    pass


def _check_keys(table: dict, allowed: set, path: str):
    for key in table:
        if key not in allowed:
            raise ConfigError(f"unknown key {path}.{key}" if path else f"unknown key {key}")


def _want(table: dict, key: str, kinds, path: str, default=None, required=False):
    if key not in table:
        if required:
            raise ConfigError(f"missing required key {path}.{key}")
        return default
    value = table[key]
    if kinds is int and isinstance(value, bool):
        raise ConfigError(f"{path}.{key} must be an integer, got a boolean")
    if kinds is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kinds):
        kind_name = kinds.__name__ if isinstance(kinds, type) else "/".join(k.__name__ for k in kinds)
        raise ConfigError(f"{path}.{key} must be {kind_name}, got {type(value).__name__}")
    return value


def _geometry(table: dict, path: str, default: CacheGeometry) -> CacheGeometry:
    _check_keys(table, {"size", "block", "assoc"}, path)
    try:
        return CacheGeometry(
            size_bytes=_want(table, "size", int, path, default.size_bytes),
            block_bytes=_want(table, "block", int, path, default.block_bytes),
            associativity=_want(table, "assoc", int, path, default.associativity),
        )
    except MemorySystemError as e:
        raise ConfigError(f"{path}: {e}")


_MACHINE_KEYS = {"ram_size", "l1i", "l1d", "l2", "l2_hit_stall", "ram_stall",
                 "timeout_factor", "golden_cycle_ceiling"}


def _machine_config(table: dict) -> MachineConfig:
    _check_keys(table, _MACHINE_KEYS, "machine")
    base = MachineConfig()
    return MachineConfig(
        ram_size=_want(table, "ram_size", int, "machine", base.ram_size),
        l1i=_geometry(table.get("l1i", {}), "machine.l1i", base.l1i),
        l1d=_geometry(table.get("l1d", {}), "machine.l1d", base.l1d),
        l2=_geometry(table.get("l2", {}), "machine.l2", base.l2),
        l2_hit_stall=_want(table, "l2_hit_stall", int, "machine", base.l2_hit_stall),
        ram_stall=_want(table, "ram_stall", int, "machine", base.ram_stall),
        timeout_factor=_want(table, "timeout_factor", int, "machine", base.timeout_factor),
        golden_cycle_ceiling=_want(table, "golden_cycle_ceiling", int, "machine",
                                   base.golden_cycle_ceiling),
    )


_ENGINE_KEYS = {"probability", "start", "end", "fault_type", "mask", "faulty_bits",
                "target_class", "pc_target", "corruption_size", "cache_id",
                "target_start", "target_end", "seed"}


def _fault_config(table: dict, path: str) -> FaultConfig:
    _check_keys(table, _ENGINE_KEYS, path)
    fb = table.get("faulty_bits", 1)
    if isinstance(fb, str) and fb != RANDOM:
        raise ConfigError(f"{path}.faulty_bits must be a count or '{RANDOM}'")
    if not isinstance(fb, (int, str)) or isinstance(fb, bool):
        raise ConfigError(f"{path}.faulty_bits must be a count or '{RANDOM}'")
    ftype = _want(table, "fault_type", str, path, "bit_flip")
    if ftype not in FAULT_TYPES + (RANDOM,):
        raise ConfigError(f"{path}.fault_type must be one of "
                          f"{FAULT_TYPES + (RANDOM,)}, got {ftype!r}")
    cfg = FaultConfig(
        probability=_want(table, "probability", float, path, required=True),
        start=_want(table, "start", int, path, 0),
        end=_want(table, "end", int, path, FaultConfig.end),
        fault_type=ftype,
        mask=_want(table, "mask", int, path, 0),
        faulty_bits=fb,
        target_class=_want(table, "target_class", str, path, RANDOM),
        pc_target=_want(table, "pc_target", int, path, 0),
        corruption_size=_want(table, "corruption_size", int, path, 1),
        cache_id=_want(table, "cache_id", str, path, None),
        target_start=_want(table, "target_start", int, path, None),
        target_end=_want(table, "target_end", int, path, None),
        seed=_want(table, "seed", int, path, 0),
    )
    try:
        cfg.validate()
    except FaultConfigError as e:
        raise ConfigError(f"{path}: {e}")
    return cfg


def _tiers(raw, path: str) -> list[tuple[str, int | None]]:
    tiers = []
    for i, item in enumerate(raw):
        if isinstance(item, str):
            name, n = item, None
        elif isinstance(item, dict):
            _check_keys(item, {"name", "n"}, f"{path}[{i}]")
            name = _want(item, "name", str, f"{path}[{i}]", required=True)
            n = _want(item, "n", int, f"{path}[{i}]", None)
        else:
            raise ConfigError(f"{path}[{i}] must be a tier name or a table")
        if name not in TIER_PARAMS:
            raise ConfigError(f"{path}[{i}].name must be one of "
                              f"{sorted(TIER_PARAMS)}, got {name!r}")
        if n is not None and n < 1:
            raise ConfigError(f"{path}[{i}].n must be positive")
        tiers.append((name, n))
    if not tiers:
        raise ConfigError(f"{path} must name at least one tier")
    return tiers


@dataclass
class FileConfig:
    machine: MachineConfig = MachineConfig()
    benchmark_paths: list[str] = field(default_factory=list)
    engines: dict[str, FaultConfig] = field(default_factory=dict)
    tiers: list[tuple[str, int | None]] = field(default_factory=lambda: [("low", None)])
    seed: int = 0
    parallelism: int = 1
    out_dir: str = "rvfault-out"
    formats: tuple[str, ...] = ("json", "csv")
    base_dir: Path = Path(".")


def parse_config(text: str, base_dir: Path | str = ".") -> FileConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML: {e}")
    _check_keys(doc, {"machine", "benchmarks", "engines", "campaign", "output"}, "")

    machine = _machine_config(_want(doc, "machine", dict, "", {}))

    bench_tbl = _want(doc, "benchmarks", dict, "", {})
    _check_keys(bench_tbl, {"paths"}, "benchmarks")
    paths = _want(bench_tbl, "paths", list, "benchmarks", [])
    for i, p in enumerate(paths):
        if not isinstance(p, str):
            raise ConfigError(f"benchmarks.paths[{i}] must be a string")

    engines_tbl = _want(doc, "engines", dict, "", {})
    engines = {}
    for engine_id, table in engines_tbl.items():
        if engine_id not in ENGINE_IDS:
            raise ConfigError(f"unknown engine engines.{engine_id}; "
                              f"valid ids: {', '.join(ENGINE_IDS)}")
        if not isinstance(table, dict):
            raise ConfigError(f"engines.{engine_id} must be a table")
        cfg = _fault_config(table, f"engines.{engine_id}")
        if (cfg.cache_id is not None
                and engine_id != f"cache_{cfg.cache_id}"):
            raise ConfigError(f"engines.{engine_id}.cache_id {cfg.cache_id!r} "
                              f"does not match the engine name")
        engines[engine_id] = cfg

    camp = _want(doc, "campaign", dict, "", {})
    _check_keys(camp, {"tiers", "seed", "parallelism"}, "campaign")
    tiers = _tiers(_want(camp, "tiers", list, "campaign", ["low"]), "campaign.tiers")
    seed = _want(camp, "seed", int, "campaign", 0)
    parallelism = _want(camp, "parallelism", int, "campaign", 1)
    if parallelism < 1:
        raise ConfigError("campaign.parallelism must be at least 1")

    out = _want(doc, "output", dict, "", {})
    _check_keys(out, {"dir", "formats"}, "output")
    formats = _want(out, "formats", list, "output", ["json", "csv"])
    for i, f in enumerate(formats):
        if f not in ("json", "csv"):
            raise ConfigError(f"output.formats[{i}] must be 'json' or 'csv'")

    return FileConfig(
        machine=machine,
        benchmark_paths=paths,
        engines=engines,
        tiers=tiers,
        seed=seed,
        parallelism=parallelism,
        out_dir=_want(out, "dir", str, "output", "rvfault-out"),
        formats=tuple(formats),
        base_dir=Path(base_dir),
    )


def load_config(path: str | Path) -> FileConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)


def resolve_program(spec: str, base_dir: Path | str = ".") -> tuple[str, str]:
    """Return (name, assembly source) for a path or `kernel:` reference."""
    if spec.startswith("kernel:"):
        name = spec[len("kernel:"):]
        if name not in BUNDLED_KERNELS:
            raise ConfigError(f"no bundled kernel {name!r}; "
                              f"available: {', '.join(BUNDLED_KERNELS)}")
        return name, kernel_source(name)
    path = Path(spec)
    if not path.is_absolute():
        path = Path(base_dir) / path
    return path.stem, path.read_text()
