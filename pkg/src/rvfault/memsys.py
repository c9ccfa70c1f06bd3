"""Main RAM plus a two-level set-associative write-back cache hierarchy.

L1I and L1D sit above a unified L2; all levels carry real data arrays so
corruption planted in a cache block propagates (or is discarded) exactly the
way the replacement and writeback machinery moves bytes around:

  * dirty block evicted -> its bytes, corrupted or not, land one level down;
  * clean block evicted -> in-cache corruption is simply dropped.

Fault injectors access storage through ``poke_byte``/``peek_byte``, which
bypass lookup, LRU, dirty bits, and event counters entirely; only normal
program activity moves corrupted data between levels.

Stuck-at fault masks for cache cells and RAM bytes live in plain dicts
(``cell_faults``/``ram_faults``) that the permanent-fault registry populates;
every byte-write path re-applies matching masks so reads are always
consistent with registered permanent faults.
"""

from __future__ import annotations

from dataclasses import dataclass

DEFAULT_RAM_BASE = 0x8000_0000
DEFAULT_RAM_SIZE = 8 * 1024 * 1024

CACHE_LEVELS = ("l1i", "l1d", "l2")


class MemorySystemError(ValueError):
    """Invalid geometry or an out-of-range poke/peek location."""


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class CacheGeometry:
    size_bytes: int
    block_bytes: int = 64
    associativity: int = 4

    def __post_init__(self):
        for name in ("size_bytes", "block_bytes", "associativity"):
            if not _is_pow2(getattr(self, name)):
                raise MemorySystemError(f"{name} must be a power of two, got {getattr(self, name)}")
        if self.block_bytes < 4:
            raise MemorySystemError("block_bytes must be at least 4")
        if self.size_bytes < self.block_bytes * self.associativity:
            raise MemorySystemError("cache smaller than one set")

    @property
    def sets(self) -> int:
        return self.size_bytes // (self.block_bytes * self.associativity)


class Cache:
    """Storage arrays for one cache instance; policy lives in MemorySystem."""

    def __init__(self, name: str, geom: CacheGeometry):
        self.name = name
        self.geom = geom
        self.block = geom.block_bytes
        self.assoc = geom.associativity
        self.nsets = geom.sets
        self.block_bits = self.block.bit_length() - 1
        self.set_bits = self.nsets.bit_length() - 1
        self.set_mask = self.nsets - 1
        self.off_mask = self.block - 1
        self.tag_shift = self.block_bits + self.set_bits
        n = self.nsets * self.assoc
        self.tags = [0] * n
        self.valid = bytearray(n)
        self.dirty = bytearray(n)
        self.stamp = [0] * n
        self.data = bytearray(n * self.block)
        self.tick = 0

    def find(self, addr: int) -> int:
        """Slot holding addr's block, or -1. No LRU side effects."""
        base = ((addr >> self.block_bits) & self.set_mask) * self.assoc
        tag = addr >> self.tag_shift
        valid = self.valid
        tags = self.tags
        for w in range(self.assoc):
            i = base + w
            if valid[i] and tags[i] == tag:
                return i
        return -1

    def victim(self, addr: int) -> int:
        """Slot to evict for a fill of addr: an invalid way if any, else LRU."""
        base = ((addr >> self.block_bits) & self.set_mask) * self.assoc
        valid = self.valid
        for w in range(self.assoc):
            if not valid[base + w]:
                return base + w
        stamp = self.stamp
        best = base
        for w in range(1, self.assoc):
            if stamp[base + w] < stamp[best]:
                best = base + w
        return best

    def slot_addr(self, slot: int) -> int:
        """Base address of the (valid) block held in slot."""
        return ((self.tags[slot] << self.set_bits) | (slot // self.assoc)) << self.block_bits

    def reset(self):
        n = self.nsets * self.assoc
        self.valid[:] = bytes(n)
        self.dirty[:] = bytes(n)


class MemorySystem:
    def __init__(self, ram_size: int = DEFAULT_RAM_SIZE, ram_base: int = DEFAULT_RAM_BASE,
                 l1i: CacheGeometry | None = None, l1d: CacheGeometry | None = None,
                 l2: CacheGeometry | None = None,
                 l2_hit_stall: int = 10, ram_stall: int = 80):
        if ram_size <= 0 or ram_size % 4096:
            raise MemorySystemError(f"ram_size must be a positive multiple of 4096, got {ram_size}")
        self.ram_base = ram_base
        self.ram_size = ram_size
        self.ram = bytearray(ram_size)
        self.l1i = Cache("l1i", l1i or CacheGeometry(16 * 1024))
        self.l1d = Cache("l1d", l1d or CacheGeometry(64 * 1024))
        self.l2 = Cache("l2", l2 or CacheGeometry(256 * 1024))
        for l1 in (self.l1i, self.l1d):
            if l1.block > self.l2.block:
                raise MemorySystemError("L2 block must be at least as large as L1 blocks")
        self.l2_hit_stall = l2_hit_stall
        self.ram_stall = ram_stall
        self.l1i_misses = 0
        self.l1d_misses = 0
        self.l1d_writebacks = 0
        self.l2_misses = 0
        # Permanent-fault masks, keyed by data-array index (caches) or RAM
        # offset: key -> (clear_mask, set_mask). Populated by the registry.
        self.cell_faults = {"l1i": {}, "l1d": {}, "l2": {}}
        self.ram_faults: dict[int, tuple[int, int]] = {}
        self._levels = {"l1i": self.l1i, "l1d": self.l1d, "l2": self.l2}

    # -- address helpers ---------------------------------------------------

    def in_ram(self, addr: int, width: int = 1) -> bool:
        off = addr - self.ram_base
        return 0 <= off and off + width <= self.ram_size

    # -- internal byte movement (enforcement-aware) ------------------------

    def _ram_write_block(self, off: int, payload: bytes | bytearray):
        self.ram[off:off + len(payload)] = payload
        rf = self.ram_faults
        if rf:
            end = off + len(payload)
            ram = self.ram
            for cell, (cl, se) in rf.items():
                if off <= cell < end:
                    ram[cell] = (ram[cell] & ~cl) | se

    def _cache_write_range(self, cache: Cache, start: int, payload: bytes | bytearray):
        cache.data[start:start + len(payload)] = payload
        cf = self.cell_faults[cache.name]
        if cf:
            end = start + len(payload)
            d = cache.data
            for cell, (cl, se) in cf.items():
                if start <= cell < end:
                    d[cell] = (d[cell] & ~cl) | se

    def _spill_l2_to_ram(self, slot: int):
        l2 = self.l2
        addr = l2.slot_addr(slot)
        self._ram_write_block(addr - self.ram_base, l2.data[slot * l2.block:(slot + 1) * l2.block])
        l2.dirty[slot] = 0

    def _writeback_l1(self, l1: Cache, slot: int):
        """Move a dirty L1 block one level down: into L2 if present, else RAM."""
        addr = l1.slot_addr(slot)
        payload = l1.data[slot * l1.block:(slot + 1) * l1.block]
        l2 = self.l2
        j = l2.find(addr)
        if j >= 0:
            inner = addr & l2.off_mask
            self._cache_write_range(l2, j * l2.block + inner, payload)
            l2.dirty[j] = 1
        else:
            self._ram_write_block(addr - self.ram_base, payload)
        l1.dirty[slot] = 0

    def _l2_slot(self, addr: int) -> tuple[int, int]:
        """Ensure addr's block is resident in L2; return (slot, stall)."""
        l2 = self.l2
        base = (addr >> l2.block_bits) & l2.set_mask
        tag = addr >> l2.tag_shift
        base *= l2.assoc
        for w in range(l2.assoc):
            i = base + w
            if l2.valid[i] and l2.tags[i] == tag:
                l2.tick += 1
                l2.stamp[i] = l2.tick
                return i, self.l2_hit_stall
        self.l2_misses += 1
        blk = addr & ~l2.off_mask
        if not self.in_ram(blk, l2.block):
            raise MemorySystemError(f"access at 0x{addr:x} outside RAM")
        slot = l2.victim(addr)
        if l2.valid[slot] and l2.dirty[slot]:
            self._spill_l2_to_ram(slot)
        off = blk - self.ram_base
        self._cache_write_range(l2, slot * l2.block, self.ram[off:off + l2.block])
        l2.tags[slot] = tag
        l2.valid[slot] = 1
        l2.dirty[slot] = 0
        l2.tick += 1
        l2.stamp[slot] = l2.tick
        return slot, self.ram_stall

    def _fill_l1(self, l1: Cache, addr: int) -> tuple[int, int]:
        """Fill addr's block into l1 (through L2); return (slot, stall)."""
        l2slot, stall = self._l2_slot(addr)
        slot = l1.victim(addr)
        if l1.valid[slot] and l1.dirty[slot]:
            self.l1d_writebacks += 1
            self._writeback_l1(l1, slot)
        l2 = self.l2
        blk = addr & ~l1.off_mask
        src = l2slot * l2.block + (blk & l2.off_mask)
        self._cache_write_range(l1, slot * l1.block, l2.data[src:src + l1.block])
        l1.tags[slot] = addr >> l1.tag_shift
        l1.valid[slot] = 1
        l1.dirty[slot] = 0
        l1.tick += 1
        l1.stamp[slot] = l1.tick
        return slot, stall

    # -- architectural access paths ----------------------------------------

    def fetch32(self, addr: int) -> tuple[int, int]:
        """Fetch one aligned instruction word via L1I; returns (word, stall)."""
        l1 = self.l1i
        base = ((addr >> l1.block_bits) & l1.set_mask) * l1.assoc
        tag = addr >> l1.tag_shift
        valid = l1.valid
        tags = l1.tags
        slot = -1
        for w in range(l1.assoc):
            i = base + w
            if valid[i] and tags[i] == tag:
                slot = i
                break
        if slot < 0:
            self.l1i_misses += 1
            slot, stall = self._fill_l1(l1, addr)
        else:
            l1.tick += 1
            l1.stamp[slot] = l1.tick
            stall = 0
        d = l1.data
        j = slot * l1.block + (addr & l1.off_mask)
        return d[j] | (d[j + 1] << 8) | (d[j + 2] << 16) | (d[j + 3] << 24), stall

    def load(self, addr: int, width: int) -> tuple[int, int]:
        """Data load via L1D; returns (raw little-endian value, stall)."""
        l1 = self.l1d
        base = ((addr >> l1.block_bits) & l1.set_mask) * l1.assoc
        tag = addr >> l1.tag_shift
        valid = l1.valid
        tags = l1.tags
        slot = -1
        for w in range(l1.assoc):
            i = base + w
            if valid[i] and tags[i] == tag:
                slot = i
                break
        if slot < 0:
            self.l1d_misses += 1
            slot, stall = self._fill_l1(l1, addr)
        else:
            l1.tick += 1
            l1.stamp[slot] = l1.tick
            stall = 0
        d = l1.data
        j = slot * l1.block + (addr & l1.off_mask)
        if width == 4:
            return d[j] | (d[j + 1] << 8) | (d[j + 2] << 16) | (d[j + 3] << 24), stall
        if width == 2:
            return d[j] | (d[j + 1] << 8), stall
        return d[j], stall

    def store(self, addr: int, width: int, value: int) -> int:
        """Data store via L1D (write-back, write-allocate); returns stall."""
        l1 = self.l1d
        base = ((addr >> l1.block_bits) & l1.set_mask) * l1.assoc
        tag = addr >> l1.tag_shift
        valid = l1.valid
        tags = l1.tags
        slot = -1
        for w in range(l1.assoc):
            i = base + w
            if valid[i] and tags[i] == tag:
                slot = i
                break
        if slot < 0:
            self.l1d_misses += 1
            slot, stall = self._fill_l1(l1, addr)
        else:
            l1.tick += 1
            l1.stamp[slot] = l1.tick
            stall = 0
        d = l1.data
        j = slot * l1.block + (addr & l1.off_mask)
        d[j] = value & 0xFF
        if width >= 2:
            d[j + 1] = (value >> 8) & 0xFF
        if width == 4:
            d[j + 2] = (value >> 16) & 0xFF
            d[j + 3] = (value >> 24) & 0xFF
        cf = self.cell_faults["l1d"]
        if cf:
            for k in range(j, j + width):
                m = cf.get(k)
                if m:
                    d[k] = (d[k] & ~m[0]) | m[1]
        l1.dirty[slot] = 1
        return stall

    def read_coherent(self, addr: int, length: int) -> bytes:
        """Data-view bytes without any cache or counter side effects.

        Resolves each byte through the nearest level holding it (L1D, else
        L2, else RAM); used for output capture and debugging.
        """
        if not self.in_ram(addr, length):
            raise MemorySystemError(f"range 0x{addr:x}+{length} outside RAM")
        out = bytearray(length)
        l1d = self.l1d
        l2 = self.l2
        rb = self.ram_base
        for k in range(length):
            a = addr + k
            i = l1d.find(a)
            if i >= 0:
                out[k] = l1d.data[i * l1d.block + (a & l1d.off_mask)]
                continue
            i = l2.find(a)
            if i >= 0:
                out[k] = l2.data[i * l2.block + (a & l2.off_mask)]
                continue
            out[k] = self.ram[a - rb]
        return bytes(out)

    # -- injector-facing raw access -----------------------------------------

    def _cell_index(self, level: str, location) -> tuple[Cache, int]:
        cache = self._levels.get(level)
        if cache is None:
            raise MemorySystemError(f"unknown cache level {level!r}")
        try:
            set_idx, way, off = location
        except (TypeError, ValueError):
            raise MemorySystemError(f"cache location must be (set, way, offset), got {location!r}")
        if not (0 <= set_idx < cache.nsets and 0 <= way < cache.assoc and 0 <= off < cache.block):
            raise MemorySystemError(f"location {location!r} outside {level} geometry")
        return cache, (set_idx * cache.assoc + way) * cache.block + off

    def peek_byte(self, level: str, location) -> int:
        """Raw byte read; no LRU/dirty/counter effects. Applies stuck-at masks."""
        if level == "ram":
            off = location - self.ram_base
            if not 0 <= off < self.ram_size:
                raise MemorySystemError(f"address 0x{location:x} outside RAM")
            v = self.ram[off]
            m = self.ram_faults.get(off)
        else:
            cache, cell = self._cell_index(level, location)
            v = cache.data[cell]
            m = self.cell_faults[level].get(cell)
        if m:
            v = (v & ~m[0]) | m[1]
        return v

    def poke_byte(self, level: str, location, value: int):
        """Raw byte write; no LRU/dirty/counter effects. Applies stuck-at masks."""
        value &= 0xFF
        if level == "ram":
            off = location - self.ram_base
            if not 0 <= off < self.ram_size:
                raise MemorySystemError(f"address 0x{location:x} outside RAM")
            m = self.ram_faults.get(off)
            if m:
                value = (value & ~m[0]) | m[1]
            self.ram[off] = value
        else:
            cache, cell = self._cell_index(level, location)
            m = self.cell_faults[level].get(cell)
            if m:
                value = (value & ~m[0]) | m[1]
            cache.data[cell] = value

    def sample_valid_block(self, level: str, rng) -> tuple[int, int] | None:
        """Uniform (set, way) among valid blocks of a cache; None if all invalid.

        Rejection sampling over all slots (uniform conditioned on validity)
        with a full-scan fallback for sparsely populated caches; both paths
        draw uniformly over the valid set.
        """
        cache = self._levels.get(level)
        if cache is None:
            raise MemorySystemError(f"unknown cache level {level!r}")
        valid = cache.valid
        n = len(valid)
        for _ in range(16):
            slot = rng.randrange(n)
            if valid[slot]:
                return slot // cache.assoc, slot % cache.assoc
        slots = [i for i, v in enumerate(valid) if v]
        if not slots:
            return None
        slot = slots[rng.randrange(len(slots))]
        return slot // cache.assoc, slot % cache.assoc

    # -- maintenance ---------------------------------------------------------

    def flush_all(self):
        """Write every dirty block back to RAM and invalidate all levels."""
        for l1 in (self.l1d, self.l1i):
            for slot in range(l1.nsets * l1.assoc):
                if l1.valid[slot] and l1.dirty[slot]:
                    self._writeback_l1(l1, slot)
            l1.reset()
        l2 = self.l2
        for slot in range(l2.nsets * l2.assoc):
            if l2.valid[slot] and l2.dirty[slot]:
                self._spill_l2_to_ram(slot)
        l2.reset()

    def invalidate_all(self):
        """Drop all cached blocks without writing anything back."""
        for cache in (self.l1i, self.l1d, self.l2):
            cache.reset()

    def write_ram(self, addr: int, payload: bytes):
        """Direct RAM write, bypassing caches (program loading)."""
        if not self.in_ram(addr, len(payload)):
            raise MemorySystemError(f"range 0x{addr:x}+{len(payload)} outside RAM")
        self._ram_write_block(addr - self.ram_base, payload)

    def read_ram(self, addr: int, length: int) -> bytes:
        """Direct RAM read, bypassing caches."""
        if not self.in_ram(addr, length):
            raise MemorySystemError(f"range 0x{addr:x}+{length} outside RAM")
        off = addr - self.ram_base
        return bytes(self.ram[off:off + length])
