"""Deterministic RV32IM fault-injection framework.

Register, cache, and main-memory fault injection against a bundled
cycle-counting emulator, with statistical campaign orchestration, outcome
classification, and performance-counter deviation analysis.
"""

from importlib import resources

from .asm import AsmError, LoadError, ProgramImage, assemble, load_image
from .campaign import (
    CampaignError,
    CampaignSpec,
    GoldenReference,
    MachineConfig,
    classify,
    delta_mean,
    golden_run,
    run_campaign,
    run_single,
    sample_size,
)
from .injector import (
    BIT_FLIP,
    ENGINE_IDS,
    RANDOM,
    STUCK_AT_0,
    STUCK_AT_1,
    ConflictingFaultError,
    FaultConfig,
    FaultConfigError,
    FaultRecord,
    InjectorSet,
    PermanentFaultRegistry,
    apply_fault,
    next_delay,
    random_mask,
)
from .isa import IllegalInstructionError, Instruction, decode, encode
from .machine import HpcVector, Machine, RunTrace, TrapCause
from .memsys import CacheGeometry, MemorySystem

__version__ = "0.1.0"

BUNDLED_KERNELS = ("bitcount", "qsort", "crc")


def kernel_source(name: str) -> str:
    """Assembly source of a bundled benchmark kernel."""
    if name not in BUNDLED_KERNELS:
        raise KeyError(f"no bundled kernel {name!r}; have {BUNDLED_KERNELS}")
    return (resources.files(__name__) / "kernels" / f"{name}.s").read_text()
