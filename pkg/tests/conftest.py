import random

import pytest

import rvfault as rv
from rvfault import isa

RAM_BASE = 0x8000_0000

SMALL_MACHINE = rv.MachineConfig(ram_size=256 * 1024)


def build_machine(cfg: rv.MachineConfig = SMALL_MACHINE) -> rv.Machine:
    return cfg.build()


def run_source(source: str, budget: int = 1_000_000, cfg: rv.MachineConfig = SMALL_MACHINE,
               injectors=None, collect_trace: bool = False) -> rv.RunTrace:
    machine = cfg.build()
    rv.load_image(rv.assemble(source), machine)
    if injectors is not None:
        inj = rv.InjectorSet.build(injectors, machine, machine.mem, 0)
        return machine.run(injectors=inj, cycle_budget=budget,
                           collect_trace=collect_trace)
    return machine.run(cycle_budget=budget, collect_trace=collect_trace)


EXIT0 = """
        li   a0, 0
        li   a7, 93
        ecall
"""


def random_instruction(rng: random.Random) -> isa.Instruction:
    """Uniformly pick a supported mnemonic and fill its fields in range."""
    mn = rng.choice(sorted(isa.MNEMONICS))
    rd = rng.randrange(32)
    rs1 = rng.randrange(32)
    rs2 = rng.randrange(32)
    if mn in isa._R_ENC:
        return isa.Instruction(mn, rd, rs1, rs2, 0)
    if mn in ("slli", "srli", "srai"):
        return isa.Instruction(mn, rd, rs1, 0, rng.randrange(32))
    if mn in ("addi", "slti", "sltiu", "xori", "ori", "andi",
              "jalr", "lb", "lh", "lw", "lbu", "lhu", "flw"):
        return isa.Instruction(mn, rd, rs1, 0, rng.randrange(-2048, 2048))
    if mn in ("sb", "sh", "sw", "fsw"):
        return isa.Instruction(mn, 0, rs1, rs2, rng.randrange(-2048, 2048))
    if mn in ("beq", "bne", "blt", "bge", "bltu", "bgeu"):
        return isa.Instruction(mn, 0, rs1, rs2, rng.randrange(-2048, 2048) * 2)
    if mn == "jal":
        return isa.Instruction(mn, rd, 0, 0, rng.randrange(-(1 << 19), 1 << 19) * 2)
    if mn in ("lui", "auipc"):
        val = rng.randrange(1 << 20) << 12
        if val & 0x80000000:
            val -= 0x100000000
        return isa.Instruction(mn, rd, 0, 0, val)
    if mn == "fence":
        return isa.Instruction(mn, rd, rs1, 0, rng.randrange(4096))
    if mn == "ecall":
        return isa.Instruction(mn)
    if mn in ("fmv.w.x", "fmv.x.w"):
        return isa.Instruction(mn, rd, rs1, 0, 0)
    raise AssertionError(mn)


@pytest.fixture
def rng():
    return random.Random(0xC0FFEE)
