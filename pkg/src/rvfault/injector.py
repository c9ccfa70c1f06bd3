"""Fault mask algebra, probability-driven scheduling, and injection engines.

Three engines corrupt live state while a program runs:

  * register engine: flips or sticks bits in a uniformly chosen integer or
    FP architectural register (x0 excluded), gated by a cycle window or a
    program-counter match;
  * cache engine (one per level): samples a valid block in the target cache
    and corrupts one or more bytes of its data array in place;
  * memory engine: corrupts a uniformly chosen byte in a RAM address range.

Bit flips are transient. Stuck-at-0/1 faults are permanent: they enter a
registry keyed by the physical cell and are re-applied on every subsequent
write to that cell (and each machine step for registers), so the stuck bits
survive for the rest of the run.

Each engine fires on its own renewal schedule: inter-event gaps are drawn
from Geometric(p), which makes the per-cycle firing probability exactly the
configured value. Engines own independent RNG streams derived from the run
seed and the engine id, so enabling one engine never perturbs another's
draws.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field

BIT_FLIP = "bit_flip"
STUCK_AT_0 = "stuck_at_0"
STUCK_AT_1 = "stuck_at_1"
RANDOM = "random"

FAULT_TYPES = (BIT_FLIP, STUCK_AT_0, STUCK_AT_1)

ENGINE_IDS = ("reg", "cache_l1i", "cache_l1d", "cache_l2", "mem")

UINT64_MAX = 2**64 - 1


class FaultConfigError(ValueError):
    pass


class ConflictingFaultError(ValueError):
    """Opposite-polarity stuck-at masks overlap on the same cell bit."""


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary parts (independent of hash PYTHONHASHSEED)."""
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


def apply_fault(value: int, mask: int, fault_type: str) -> int:
    """Bitwise fault operator: XOR for flips, AND-NOT / OR for stuck-at."""
    if fault_type == BIT_FLIP:
        return value ^ mask
    if fault_type == STUCK_AT_0:
        return value & ~mask
    if fault_type == STUCK_AT_1:
        return value | mask
    raise ValueError(f"not a concrete fault type: {fault_type!r}")


def random_mask(faulty_bits: int, width: int, rng: random.Random) -> int:
    """Mask with exactly `faulty_bits` set bits, uniform over k-subsets."""
    if not 1 <= faulty_bits <= width:
        raise ValueError(f"faulty_bits {faulty_bits} outside [1, {width}]")
    mask = 0
    for pos in rng.sample(range(width), faulty_bits):
        mask |= 1 << pos
    return mask


def next_delay(probability: float, rng: random.Random) -> int | None:
    """Geometric(p) gap in cycles until the next event; None means never."""
    if probability <= 0.0:
        return None
    if probability >= 1.0:
        return 1
    u = rng.random()
    return int(math.log1p(-u) / math.log1p(-probability)) + 1


@dataclass
class FaultConfig:
    """Parameter block for one injection engine.

    `mask = 0` means generate a fresh random mask per injection with
    `faulty_bits` set bits (`faulty_bits = "random"` draws the count
    uniformly over [1, width] each time). `target_start`/`target_end`
    default to the full RAM range when left unset.
    """

    probability: float
    start: int = 0
    end: int = UINT64_MAX
    fault_type: str = BIT_FLIP
    mask: int = 0
    faulty_bits: int | str = 1
    target_class: str = RANDOM          # register engine: integer|float|random
    pc_target: int = 0                  # register engine: 0 disables PC gating
    corruption_size: int = 1            # cache engine: bytes per event
    cache_id: str | None = None         # cache engine: l1i|l1d|l2
    target_start: int | None = None     # memory engine bounds, inclusive
    target_end: int | None = None
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.probability <= 1.0:
            raise FaultConfigError(f"probability must be in [0, 1], got {self.probability}")
        if self.start < 0 or self.end < 0 or self.start > self.end:
            raise FaultConfigError(f"bad cycle window [{self.start}, {self.end}]")
        if self.fault_type not in FAULT_TYPES + (RANDOM,):
            raise FaultConfigError(f"unknown fault_type {self.fault_type!r}")
        if self.mask < 0:
            raise FaultConfigError("mask must be non-negative")
        if isinstance(self.faulty_bits, str):
            if self.faulty_bits != RANDOM:
                raise FaultConfigError(f"faulty_bits must be a count or 'random', got {self.faulty_bits!r}")
        elif self.faulty_bits < 1:
            raise FaultConfigError(f"faulty_bits must be at least 1, got {self.faulty_bits}")
        if self.target_class not in ("integer", "float", RANDOM):
            raise FaultConfigError(f"unknown target_class {self.target_class!r}")
        if self.corruption_size < 1:
            raise FaultConfigError(f"corruption_size must be at least 1, got {self.corruption_size}")
        if self.cache_id is not None and self.cache_id not in ("l1i", "l1d", "l2"):
            raise FaultConfigError(f"unknown cache_id {self.cache_id!r}")
        if (self.target_start is None) != (self.target_end is None):
            raise FaultConfigError("target_start and target_end must be set together")
        if self.target_start is not None and self.target_start > self.target_end:
            raise FaultConfigError("target_start must not exceed target_end")
        return self


@dataclass
class FaultRecord:
    """Evidence trail for one injection event (or a recorded skip)."""

    cycle: int
    engine: str
    location: tuple
    mask: int
    fault_type: str
    value_before: int
    value_after: int
    skipped: bool = False
    skip_reason: str | None = None
    address: int | None = None

    def as_dict(self) -> dict:
        return {
            "cycle": self.cycle,
            "engine": self.engine,
            "location": list(self.location),
            "mask": self.mask,
            "fault_type": self.fault_type,
            "value_before": self.value_before,
            "value_after": self.value_after,
            "skipped": self.skipped,
            "skip_reason": self.skip_reason,
            "address": self.address,
        }


class PermanentFaultRegistry:
    """Stuck-at entries keyed by physical cell, enforced for the rest of a run.

    Register masks are re-applied by the machine after every retired
    instruction; cache and RAM masks are re-applied by the memory system
    after every byte write to the cell. Bit flips never enter the registry.
    """

    def __init__(self):
        self.int_regs: dict[int, tuple[int, int]] = {}
        self.float_regs: dict[int, tuple[int, int]] = {}
        self.cache_cells = {"l1i": {}, "l1d": {}, "l2": {}}
        self.ram_cells: dict[int, tuple[int, int]] = {}
        self.entries: list[tuple[tuple, int, str]] = []
        self._machine = None
        self._memsys = None

    def bind(self, machine=None, memsys=None):
        if machine is not None:
            self._machine = machine
            machine.attach_fault_maps(self.int_regs, self.float_regs)
        if memsys is not None and memsys is not self._memsys:
            if self._memsys is not None:
                raise ValueError("registry is already bound to another memory system")
            if any(self.cache_cells.values()) or self.ram_cells:
                raise ValueError("cannot bind a registry that already holds cell entries")
            self._memsys = memsys
            self.cache_cells = memsys.cell_faults
            self.ram_cells = memsys.ram_faults

    # -- location plumbing ---------------------------------------------------

    def _resolve(self, location):
        """Return (dict, key, width) for a location tuple."""
        kind = location[0]
        if kind == "reg":
            _, cls, idx = location
            if not 0 <= idx < 32:
                raise ValueError(f"register index {idx} out of range")
            if cls == "integer":
                return self.int_regs, idx, 32
            if cls == "float":
                return self.float_regs, idx, 32
            raise ValueError(f"unknown register class {cls!r}")
        if kind == "cache":
            _, level, set_idx, way, off = location
            if self._memsys is None:
                raise ValueError("registry not bound to a memory system")
            cache, cell = self._memsys._cell_index(level, (set_idx, way, off))
            return self.cache_cells[level], cell, 8
        if kind == "ram":
            _, addr = location
            if self._memsys is None:
                raise ValueError("registry not bound to a memory system")
            off = addr - self._memsys.ram_base
            if not 0 <= off < self._memsys.ram_size:
                raise ValueError(f"address 0x{addr:x} outside RAM")
            return self.ram_cells, off, 8
        raise ValueError(f"unknown location kind {kind!r}")

    def conflict_free(self, location, mask: int, kind: str) -> int:
        """Subset of mask not contradicted by an opposite-polarity entry."""
        d, key, _ = self._resolve(location)
        cur = d.get(key)
        if cur is None:
            return mask
        opposite = cur[1] if kind == STUCK_AT_0 else cur[0]
        return mask & ~opposite

    def add(self, location, mask: int, kind: str):
        """Register a permanent stuck-at fault and apply it to live state.

        Rejects masks that overlap an opposite-polarity entry on the same
        cell (a bit cannot be stuck at both 0 and 1).
        """
        if kind not in (STUCK_AT_0, STUCK_AT_1):
            raise ValueError(f"only stuck-at faults are permanent, got {kind!r}")
        d, key, width = self._resolve(location)
        if mask <= 0 or mask >> width:
            raise ValueError(f"mask 0x{mask:x} invalid for width {width}")
        clear, setm = d.get(key, (0, 0))
        opposite = setm if kind == STUCK_AT_0 else clear
        if opposite & mask:
            raise ConflictingFaultError(
                f"mask 0x{mask:x} conflicts with existing opposite stuck-at "
                f"on {location}")
        if kind == STUCK_AT_0:
            clear |= mask
        else:
            setm |= mask
        d[key] = (clear, setm)
        self.entries.append((location, mask, kind))
        self._apply_now(location, key, (clear, setm))

    def _apply_now(self, location, key, masks):
        clear, setm = masks
        kind = location[0]
        if kind == "reg":
            if self._machine is None:
                return
            regs = self._machine.x if location[1] == "integer" else self._machine.f
            if location[1] == "integer" and key == 0:
                return
            regs[key] = (regs[key] & ~clear) | setm
        elif kind == "cache":
            cache = self._memsys._levels[location[1]]
            cache.data[key] = (cache.data[key] & ~clear) | setm
        else:
            self._memsys.ram[key] = (self._memsys.ram[key] & ~clear) | setm

    def enforce(self, location, value: int) -> int:
        """Apply every registered mask matching the location to a value."""
        d, key, _ = self._resolve(location)
        m = d.get(key)
        if m is None:
            return value
        return (value & ~m[0]) | m[1]


class _EngineBase:
    engine_id = "?"

    def __init__(self, cfg: FaultConfig, rng: random.Random,
                 registry: PermanentFaultRegistry, records: list):
        self.cfg = cfg
        self.rng = rng
        self.registry = registry
        self.records = records
        self.next_cycle = next_delay(cfg.probability, rng)

    def deliver(self, machine, memsys):
        """Consume the pending event, schedule the next one, maybe inject."""
        sched = self.next_cycle
        gap = next_delay(self.cfg.probability, self.rng)
        self.next_cycle = None if gap is None else sched + gap
        self._fire(sched, machine, memsys)

    def _resolve_mask(self, width: int) -> int:
        mask = self.cfg.mask
        if mask:
            return mask
        fb = self.cfg.faulty_bits
        if fb == RANDOM:
            fb = self.rng.randrange(width) + 1
        return random_mask(fb, width, self.rng)

    def _resolve_type(self) -> str:
        ftype = self.cfg.fault_type
        if ftype == RANDOM:
            return FAULT_TYPES[self.rng.randrange(3)]
        return ftype

    def _inject_cell(self, sched, location, address, read, write) -> FaultRecord:
        """Shared mask/type resolution + apply + stuck-at registration."""
        mask = self._resolve_mask(8)
        ftype = self._resolve_type()
        before = read()
        eff = mask
        if ftype != BIT_FLIP:
            eff = self.registry.conflict_free(location, mask, ftype)
            if eff == 0:
                rec = FaultRecord(sched, self.engine_id, location, mask, ftype,
                                  before, before, skipped=True,
                                  skip_reason="conflicting_permanent_fault",
                                  address=address)
                self.records.append(rec)
                return rec
        after = apply_fault(before, eff, ftype)
        write(after)
        if ftype != BIT_FLIP:
            self.registry.add(location, eff, ftype)
        rec = FaultRecord(sched, self.engine_id, location, eff, ftype,
                          before, after, address=address)
        self.records.append(rec)
        return rec


class RegisterEngine(_EngineBase):
    engine_id = "reg"

    def _fire(self, sched, machine, memsys):
        cfg = self.cfg
        if cfg.pc_target:
            if machine.pc != cfg.pc_target:
                return
        elif not cfg.start <= sched <= cfg.end:
            return
        rng = self.rng
        cls = cfg.target_class
        if cls == RANDOM:
            cls = ("integer", "float")[rng.randrange(2)]
        if cls == "integer":
            idx = rng.randrange(1, 32)
            regs = machine.x
        else:
            idx = rng.randrange(32)
            regs = machine.f
        location = ("reg", cls, idx)
        mask = self._resolve_mask(32)
        ftype = self._resolve_type()
        before = regs[idx]
        eff = mask
        if ftype != BIT_FLIP:
            eff = self.registry.conflict_free(location, mask, ftype)
            if eff == 0:
                self.records.append(FaultRecord(
                    sched, self.engine_id, location, mask, ftype,
                    before, before, skipped=True,
                    skip_reason="conflicting_permanent_fault"))
                return
        after = apply_fault(before, eff, ftype)
        regs[idx] = after
        if ftype != BIT_FLIP:
            self.registry.add(location, eff, ftype)
        else:
            regs[idx] = self.registry.enforce(location, after)
        self.records.append(FaultRecord(
            sched, self.engine_id, location, eff, ftype, before, after))


class CacheEngine(_EngineBase):
    def __init__(self, cfg, rng, registry, records, level: str):
        super().__init__(cfg, rng, registry, records)
        self.level = level
        self.engine_id = "cache_" + level

    def _fire(self, sched, machine, memsys):
        cfg = self.cfg
        if not cfg.start <= sched <= cfg.end:
            return
        rng = self.rng
        blk = memsys.sample_valid_block(self.level, rng)
        if blk is None:
            self.records.append(FaultRecord(
                sched, self.engine_id, ("cache", self.level), 0,
                cfg.fault_type, 0, 0, skipped=True, skip_reason="no_valid_block"))
            return
        set_idx, way = blk
        cache = memsys._levels[self.level]
        block_addr = cache.slot_addr(set_idx * cache.assoc + way)
        for _ in range(cfg.corruption_size):
            off = rng.randrange(cache.block)
            location = ("cache", self.level, set_idx, way, off)
            cell = (set_idx, way, off)
            self._inject_cell(
                sched, location, block_addr + off,
                lambda: memsys.peek_byte(self.level, cell),
                lambda v: memsys.poke_byte(self.level, cell, v))


class MemoryEngine(_EngineBase):
    engine_id = "mem"

    def __init__(self, cfg, rng, registry, records, ram_base: int, ram_size: int):
        super().__init__(cfg, rng, registry, records)
        self.lo = cfg.target_start if cfg.target_start is not None else ram_base
        self.hi = cfg.target_end if cfg.target_end is not None else ram_base + ram_size - 1

    def _fire(self, sched, machine, memsys):
        cfg = self.cfg
        if not cfg.start <= sched <= cfg.end:
            return
        addr = self.lo + self.rng.randrange(self.hi - self.lo + 1)
        self._inject_cell(
            sched, ("ram", addr), addr,
            lambda: memsys.peek_byte("ram", addr),
            lambda v: memsys.poke_byte("ram", addr, v))


def _build_engine(engine_id: str, cfg: FaultConfig, rng, registry, records, memsys):
    cfg.validate()
    if engine_id == "reg":
        if cfg.mask >> 32:
            raise FaultConfigError("register mask wider than 32 bits")
        if isinstance(cfg.faulty_bits, int) and cfg.faulty_bits > 32:
            raise FaultConfigError("register faulty_bits above 32")
        return RegisterEngine(cfg, rng, registry, records)
    if engine_id.startswith("cache_"):
        level = engine_id[len("cache_"):]
        if level not in ("l1i", "l1d", "l2"):
            raise FaultConfigError(f"unknown cache engine {engine_id!r}")
        if cfg.cache_id is not None and cfg.cache_id != level:
            raise FaultConfigError(
                f"cache_id {cfg.cache_id!r} does not match engine {engine_id!r}")
        if cfg.mask >> 8:
            raise FaultConfigError("cache mask wider than 8 bits")
        if isinstance(cfg.faulty_bits, int) and cfg.faulty_bits > 8:
            raise FaultConfigError("cache faulty_bits above 8")
        return CacheEngine(cfg, rng, registry, records, level)
    if engine_id == "mem":
        if cfg.mask >> 8:
            raise FaultConfigError("memory mask wider than 8 bits")
        if isinstance(cfg.faulty_bits, int) and cfg.faulty_bits > 8:
            raise FaultConfigError("memory faulty_bits above 8")
        lo = cfg.target_start if cfg.target_start is not None else memsys.ram_base
        hi = cfg.target_end if cfg.target_end is not None else memsys.ram_base + memsys.ram_size - 1
        if not (memsys.in_ram(lo) and memsys.in_ram(hi)):
            raise FaultConfigError(
                f"target range [0x{lo:x}, 0x{hi:x}] outside RAM")
        return MemoryEngine(cfg, rng, registry, records,
                            memsys.ram_base, memsys.ram_size)
    raise FaultConfigError(f"unknown engine {engine_id!r}")


@dataclass
class InjectorSet:
    """The engines bound to one run, their shared registry and record list."""

    engines: list
    registry: PermanentFaultRegistry
    records: list = field(default_factory=list)

    @classmethod
    def build(cls, configs: dict[str, FaultConfig], machine, memsys,
              base_seed: int) -> "InjectorSet":
        """Wire engines to a machine/memsys pair with derived RNG streams."""
        registry = PermanentFaultRegistry()
        registry.bind(machine=machine, memsys=memsys)
        records: list[FaultRecord] = []
        engines = []
        unknown = set(configs) - set(ENGINE_IDS)
        if unknown:
            raise FaultConfigError(f"unknown engine ids: {sorted(unknown)}")
        for engine_id in ENGINE_IDS:
            cfg = configs.get(engine_id)
            if cfg is None:
                continue
            rng = random.Random(derive_seed(base_seed, engine_id, cfg.seed))
            engines.append(_build_engine(engine_id, cfg, rng, registry,
                                         records, memsys))
        return cls(engines, registry, records)
