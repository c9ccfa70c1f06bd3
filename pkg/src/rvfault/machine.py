"""Deterministic, cycle-counting RV32IM interpreter with trap model and HPCs.

The machine owns an architectural register file (integer and FP, the latter
reachable only through load/store/move), a program counter, a cycle counter,
and a 20-slot hardware performance counter vector. Every step fetches through
the instruction path of the attached memory system, retires exactly one
instruction, and charges fixed stall cycles for cache misses.

Branch misprediction accounting uses a static backward-taken/forward-not-taken
rule; jalr targets are never predicted. The trap model is the mechanical
source of crash outcomes: illegal opcodes, misaligned accesses and fetches,
accesses outside mapped RAM, and unknown ecall numbers all stop the machine.

Permanent register faults are re-applied from the attached fault maps after
every retired instruction, so a stuck-at bit survives any architectural write
by the next read.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

from .isa import IllegalInstructionError, decode
from .memsys import MemorySystem

M32 = 0xFFFFFFFF

RUNNING = "running"
EXITED = "exited"
TRAPPED = "trapped"
TIMED_OUT = "timed_out"

ILLEGAL_INSTRUCTION = "illegal_instruction"
MISALIGNED_ACCESS = "misaligned_access"
ACCESS_OUT_OF_BOUNDS = "access_out_of_bounds"
MISALIGNED_FETCH = "misaligned_fetch"
ECALL_UNKNOWN = "ecall_unknown"

SYS_EXIT = 93
SYS_WRITE = 64


class HpcVector(NamedTuple):
    """The 20 monitored hardware performance counters.

    mtime always equals mcycle (one tick per cycle at the nominal clock);
    mhpmcounter15, 30, and 31 are structurally zero here (no FP compute
    instructions and no TLBs are modeled).
    """

    mcycle: int
    mtime: int
    minstret: int
    mhpmcounter4: int   # integer loads retired
    mhpmcounter5: int   # integer stores retired
    mhpmcounter7: int   # system instructions retired
    mhpmcounter8: int   # integer arithmetic retired
    mhpmcounter9: int   # conditional branches retired
    mhpmcounter10: int  # JAL retired
    mhpmcounter11: int  # JALR retired
    mhpmcounter12: int  # integer multiplies retired
    mhpmcounter13: int  # integer divides retired
    mhpmcounter14: int  # FP load/store/move retired
    mhpmcounter15: int  # FP other retired
    mhpmcounter22: int  # branch/jump mispredictions
    mhpmcounter27: int  # instruction cache misses
    mhpmcounter28: int  # data cache misses
    mhpmcounter29: int  # data cache writebacks
    mhpmcounter30: int  # instruction TLB misses
    mhpmcounter31: int  # data TLB misses


HPC_NAMES = HpcVector._fields

# Internal counter-list slots (counters 27..31 are materialized from memsys).
_MINSTRET = 2
_C4, _C5, _C7, _C8, _C9, _C10, _C11, _C12, _C13, _C14 = range(3, 13)
_C22 = 14

CLASS_OF = {}
for _mn in ("lb", "lh", "lw", "lbu", "lhu"):
    CLASS_OF[_mn] = _C4
for _mn in ("sb", "sh", "sw"):
    CLASS_OF[_mn] = _C5
for _mn in ("ecall", "fence"):
    CLASS_OF[_mn] = _C7
for _mn in ("lui", "auipc", "addi", "slti", "sltiu", "xori", "ori", "andi",
            "slli", "srli", "srai", "add", "sub", "sll", "slt", "sltu",
            "xor", "srl", "sra", "or", "and"):
    CLASS_OF[_mn] = _C8
for _mn in ("beq", "bne", "blt", "bge", "bltu", "bgeu"):
    CLASS_OF[_mn] = _C9
CLASS_OF["jal"] = _C10
CLASS_OF["jalr"] = _C11
for _mn in ("mul", "mulh", "mulhsu", "mulhu"):
    CLASS_OF[_mn] = _C12
for _mn in ("div", "divu", "rem", "remu"):
    CLASS_OF[_mn] = _C13
for _mn in ("flw", "fsw", "fmv.w.x", "fmv.x.w"):
    CLASS_OF[_mn] = _C14


@dataclass(frozen=True)
class TrapCause:
    kind: str
    pc_at_trap: int
    detail: int


@dataclass
class RunTrace:
    """Everything observable from one execution."""

    status: str                      # exited | trapped | timed_out
    exit_code: int | None
    trap: TrapCause | None
    cycles: int
    hpc: HpcVector
    output: bytes
    fault_records: list
    trace: list[str] | None = None   # retired mnemonics, when collected


class Machine:
    def __init__(self, mem: MemorySystem):
        self.mem = mem
        self.x = [0] * 32
        self.f = [0] * 32
        self.pc = mem.ram_base
        self.cur_pc = mem.ram_base
        self.cycle = 0
        self.counters = [0] * 20
        self.status = RUNNING
        self.exit_code: int | None = None
        self.trap: TrapCause | None = None
        self.output = bytearray()
        self.trace: list[str] | None = None
        self._xstall = 0
        self._memo: dict[int, tuple] = {}
        self._dispatch = {}
        for mn in CLASS_OF:
            self._dispatch[mn] = getattr(self, "_i_" + mn.replace(".", "_"))
        # Stuck-at masks for registers: index -> (clear, set). The permanent
        # fault registry swaps real dicts in; default is no faults.
        self._xf: dict[int, tuple[int, int]] = {}
        self._ff: dict[int, tuple[int, int]] = {}

    def attach_fault_maps(self, int_map: dict, float_map: dict):
        self._xf = int_map
        self._ff = float_map

    # -- trap plumbing -----------------------------------------------------

    def _do_trap(self, kind: str, pc: int, detail: int):
        self.status = TRAPPED
        self.trap = TrapCause(kind, pc & M32, detail & M32)

    # -- execution ----------------------------------------------------------

    def step(self) -> str:
        """Fetch, decode, and retire exactly one instruction."""
        if self.status != RUNNING:
            return self.status
        pc = self.pc
        mem = self.mem
        if pc & 3:
            self._do_trap(MISALIGNED_FETCH, pc, pc)
            self.cycle += 1
            return self.status
        off = pc - mem.ram_base
        if off < 0 or off + 4 > mem.ram_size:
            self._do_trap(ACCESS_OUT_OF_BOUNDS, pc, pc)
            self.cycle += 1
            return self.status
        word, fstall = mem.fetch32(pc)
        ent = self._memo.get(word)
        if ent is None:
            try:
                ins = decode(word)
                ent = (self._dispatch[ins.mnemonic], ins.rd, ins.rs1, ins.rs2,
                       ins.imm, CLASS_OF[ins.mnemonic], ins.mnemonic)
            except IllegalInstructionError:
                ent = ()
            self._memo[word] = ent
        if not ent:
            self._do_trap(ILLEGAL_INSTRUCTION, pc, word)
            self.cycle += 1 + fstall
            return self.status
        self.cur_pc = pc
        self.pc = (pc + 4) & M32
        self._xstall = 0
        ent[0](ent[1], ent[2], ent[3], ent[4])
        self.cycle += 1 + fstall + self._xstall
        if self.status == TRAPPED:
            return TRAPPED
        c = self.counters
        c[_MINSTRET] += 1
        c[ent[5]] += 1
        xf = self._xf
        if xf:
            x = self.x
            for i, (cl, se) in xf.items():
                if i:
                    x[i] = (x[i] & ~cl) | se
        ff = self._ff
        if ff:
            f = self.f
            for i, (cl, se) in ff.items():
                f[i] = (f[i] & ~cl) | se
        if self.trace is not None:
            self.trace.append(ent[6])
        return self.status

    def run(self, injectors=None, cycle_budget: int = 1_000_000,
            collect_trace: bool = False) -> RunTrace:
        """Run until exit, trap, or the cycle budget is exceeded.

        Pending injector events are delivered before each step; permanent
        faults are enforced on access by the machine and memory system.
        """
        if cycle_budget <= 0:
            raise ValueError("cycle_budget must be positive")
        if collect_trace:
            self.trace = []
        engines = injectors.engines if injectors is not None else ()
        records = injectors.records if injectors is not None else []
        timed_out = False
        mem = self.mem
        step = self.step
        while self.status == RUNNING:
            cyc = self.cycle
            for eng in engines:
                nc = eng.next_cycle
                while nc is not None and nc <= cyc:
                    eng.deliver(self, mem)
                    nc = eng.next_cycle
            step()
            if self.cycle > cycle_budget:
                if self.status == RUNNING:
                    timed_out = True
                break
        status = TIMED_OUT if timed_out else self.status
        return RunTrace(
            status=status,
            exit_code=self.exit_code,
            trap=self.trap,
            cycles=self.cycle,
            hpc=self.hpc_vector(),
            output=bytes(self.output),
            fault_records=records,
            trace=self.trace,
        )

    def hpc_vector(self) -> HpcVector:
        c = self.counters
        mem = self.mem
        return HpcVector(
            self.cycle, self.cycle, c[_MINSTRET],
            c[_C4], c[_C5], c[_C7], c[_C8], c[_C9], c[_C10], c[_C11],
            c[_C12], c[_C13], c[_C14], 0, c[_C22],
            mem.l1i_misses, mem.l1d_misses, mem.l1d_writebacks, 0, 0,
        )

    # -- data access helpers -------------------------------------------------

    def _load(self, addr: int, width: int):
        if width > 1 and addr & (width - 1):
            self._do_trap(MISALIGNED_ACCESS, self.cur_pc, addr)
            return None
        mem = self.mem
        off = addr - mem.ram_base
        if off < 0 or off + width > mem.ram_size:
            self._do_trap(ACCESS_OUT_OF_BOUNDS, self.cur_pc, addr)
            return None
        v, stall = mem.load(addr, width)
        self._xstall = stall
        return v

    def _store(self, addr: int, width: int, value: int) -> bool:
        if width > 1 and addr & (width - 1):
            self._do_trap(MISALIGNED_ACCESS, self.cur_pc, addr)
            return False
        mem = self.mem
        off = addr - mem.ram_base
        if off < 0 or off + width > mem.ram_size:
            self._do_trap(ACCESS_OUT_OF_BOUNDS, self.cur_pc, addr)
            return False
        self._xstall = mem.store(addr, width, value)
        return True

    # -- instruction semantics ------------------------------------------------

    def _i_lui(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = imm & M32

    def _i_auipc(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = (self.cur_pc + imm) & M32

    def _i_jal(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = self.pc
        self.pc = (self.cur_pc + imm) & M32

    def _i_jalr(self, rd, rs1, rs2, imm):
        target = (self.x[rs1] + imm) & 0xFFFFFFFE
        if rd:
            self.x[rd] = self.pc
        self.pc = target
        self.counters[_C22] += 1

    def _branch(self, taken: bool, imm: int):
        if taken:
            self.pc = (self.cur_pc + imm) & M32
        if taken != (imm < 0):
            self.counters[_C22] += 1

    def _i_beq(self, rd, rs1, rs2, imm):
        self._branch(self.x[rs1] == self.x[rs2], imm)

    def _i_bne(self, rd, rs1, rs2, imm):
        self._branch(self.x[rs1] != self.x[rs2], imm)

    def _i_blt(self, rd, rs1, rs2, imm):
        a = self.x[rs1]
        b = self.x[rs2]
        if a & 0x80000000:
            a -= 0x100000000
        if b & 0x80000000:
            b -= 0x100000000
        self._branch(a < b, imm)

    def _i_bge(self, rd, rs1, rs2, imm):
        a = self.x[rs1]
        b = self.x[rs2]
        if a & 0x80000000:
            a -= 0x100000000
        if b & 0x80000000:
            b -= 0x100000000
        self._branch(a >= b, imm)

    def _i_bltu(self, rd, rs1, rs2, imm):
        self._branch(self.x[rs1] < self.x[rs2], imm)

    def _i_bgeu(self, rd, rs1, rs2, imm):
        self._branch(self.x[rs1] >= self.x[rs2], imm)

    def _i_lb(self, rd, rs1, rs2, imm):
        v = self._load((self.x[rs1] + imm) & M32, 1)
        if v is None:
            return
        if v & 0x80:
            v |= 0xFFFFFF00
        if rd:
            self.x[rd] = v

    def _i_lbu(self, rd, rs1, rs2, imm):
        v = self._load((self.x[rs1] + imm) & M32, 1)
        if v is not None and rd:
            self.x[rd] = v

    def _i_lh(self, rd, rs1, rs2, imm):
        v = self._load((self.x[rs1] + imm) & M32, 2)
        if v is None:
            return
        if v & 0x8000:
            v |= 0xFFFF0000
        if rd:
            self.x[rd] = v

    def _i_lhu(self, rd, rs1, rs2, imm):
        v = self._load((self.x[rs1] + imm) & M32, 2)
        if v is not None and rd:
            self.x[rd] = v

    def _i_lw(self, rd, rs1, rs2, imm):
        v = self._load((self.x[rs1] + imm) & M32, 4)
        if v is not None and rd:
            self.x[rd] = v

    def _i_sb(self, rd, rs1, rs2, imm):
        self._store((self.x[rs1] + imm) & M32, 1, self.x[rs2] & 0xFF)

    def _i_sh(self, rd, rs1, rs2, imm):
        self._store((self.x[rs1] + imm) & M32, 2, self.x[rs2] & 0xFFFF)

    def _i_sw(self, rd, rs1, rs2, imm):
        self._store((self.x[rs1] + imm) & M32, 4, self.x[rs2])

    def _i_addi(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = (self.x[rs1] + imm) & M32

    def _i_slti(self, rd, rs1, rs2, imm):
        a = self.x[rs1]
        if a & 0x80000000:
            a -= 0x100000000
        if rd:
            self.x[rd] = 1 if a < imm else 0

    def _i_sltiu(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = 1 if self.x[rs1] < (imm & M32) else 0

    def _i_xori(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = (self.x[rs1] ^ imm) & M32

    def _i_ori(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = (self.x[rs1] | imm) & M32

    def _i_andi(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = (self.x[rs1] & imm) & M32

    def _i_slli(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = (self.x[rs1] << imm) & M32

    def _i_srli(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = self.x[rs1] >> imm

    def _i_srai(self, rd, rs1, rs2, imm):
        a = self.x[rs1]
        if a & 0x80000000:
            a -= 0x100000000
        if rd:
            self.x[rd] = (a >> imm) & M32

    def _i_add(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = (self.x[rs1] + self.x[rs2]) & M32

    def _i_sub(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = (self.x[rs1] - self.x[rs2]) & M32

    def _i_sll(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = (self.x[rs1] << (self.x[rs2] & 31)) & M32

    def _i_slt(self, rd, rs1, rs2, imm):
        a = self.x[rs1]
        b = self.x[rs2]
        if a & 0x80000000:
            a -= 0x100000000
        if b & 0x80000000:
            b -= 0x100000000
        if rd:
            self.x[rd] = 1 if a < b else 0

    def _i_sltu(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = 1 if self.x[rs1] < self.x[rs2] else 0

    def _i_xor(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = self.x[rs1] ^ self.x[rs2]

    def _i_srl(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = self.x[rs1] >> (self.x[rs2] & 31)

    def _i_sra(self, rd, rs1, rs2, imm):
        a = self.x[rs1]
        if a & 0x80000000:
            a -= 0x100000000
        if rd:
            self.x[rd] = (a >> (self.x[rs2] & 31)) & M32

    def _i_or(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = self.x[rs1] | self.x[rs2]

    def _i_and(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = self.x[rs1] & self.x[rs2]

    def _i_mul(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = (self.x[rs1] * self.x[rs2]) & M32

    @staticmethod
    def _signed(v: int) -> int:
        return v - 0x100000000 if v & 0x80000000 else v

    def _i_mulh(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = ((self._signed(self.x[rs1]) * self._signed(self.x[rs2])) >> 32) & M32

    def _i_mulhsu(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = ((self._signed(self.x[rs1]) * self.x[rs2]) >> 32) & M32

    def _i_mulhu(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = ((self.x[rs1] * self.x[rs2]) >> 32) & M32

    def _i_div(self, rd, rs1, rs2, imm):
        a = self._signed(self.x[rs1])
        b = self._signed(self.x[rs2])
        if b == 0:
            q = -1
        elif a == -0x80000000 and b == -1:
            q = a
        else:
            q = -(-a // b) if (a < 0) != (b < 0) else a // b
        if rd:
            self.x[rd] = q & M32

    def _i_divu(self, rd, rs1, rs2, imm):
        b = self.x[rs2]
        q = M32 if b == 0 else self.x[rs1] // b
        if rd:
            self.x[rd] = q

    def _i_rem(self, rd, rs1, rs2, imm):
        a = self._signed(self.x[rs1])
        b = self._signed(self.x[rs2])
        if b == 0:
            r = a
        elif a == -0x80000000 and b == -1:
            r = 0
        else:
            q = -(-a // b) if (a < 0) != (b < 0) else a // b
            r = a - b * q
        if rd:
            self.x[rd] = r & M32

    def _i_remu(self, rd, rs1, rs2, imm):
        b = self.x[rs2]
        r = self.x[rs1] if b == 0 else self.x[rs1] % b
        if rd:
            self.x[rd] = r

    def _i_fence(self, rd, rs1, rs2, imm):
        pass

    def _i_ecall(self, rd, rs1, rs2, imm):
        x = self.x
        num = x[17]
        if num == SYS_EXIT:
            self.status = EXITED
            self.exit_code = x[10] & 0xFF
        elif num == SYS_WRITE and x[10] == 1:
            addr = x[11]
            n = x[12]
            mem = self.mem
            off = addr - mem.ram_base
            if off < 0 or off + n > mem.ram_size:
                self._do_trap(ACCESS_OUT_OF_BOUNDS, self.cur_pc, addr)
                return
            if n:
                self.output += mem.read_coherent(addr, n)
            x[10] = n
        else:
            self._do_trap(ECALL_UNKNOWN, self.cur_pc, num)

    def _i_flw(self, rd, rs1, rs2, imm):
        v = self._load((self.x[rs1] + imm) & M32, 4)
        if v is not None:
            self.f[rd] = v

    def _i_fsw(self, rd, rs1, rs2, imm):
        self._store((self.x[rs1] + imm) & M32, 4, self.f[rs2])

    def _i_fmv_w_x(self, rd, rs1, rs2, imm):
        self.f[rd] = self.x[rs1]

    def _i_fmv_x_w(self, rd, rs1, rs2, imm):
        if rd:
            self.x[rd] = self.f[rs1]
