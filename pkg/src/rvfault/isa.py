"""RV32IM instruction encoding and decoding.

Supported forms: the RV32I base integer set, the M extension, the FP
load/store/move quartet (flw, fsw, fmv.w.x, fmv.x.w), ecall, and fence.
Every other 32-bit word decodes as an illegal instruction, which is how
corrupted opcodes turn into traps downstream.
"""

from __future__ import annotations

from typing import NamedTuple

XLEN_MASK = 0xFFFFFFFF


class IllegalInstructionError(ValueError):
    def __init__(self, word: int):
        word &= XLEN_MASK
        super().__init__(f"illegal instruction word 0x{word:08x}")
        self.word = word


class EncodeError(ValueError):
    pass


class Instruction(NamedTuple):
    """One decoded instruction; operand slots unused by a form are 0.

    `imm` holds the effective immediate: sign-extended byte offsets for
    branches/jumps, the full shifted value for lui/auipc, the shift amount
    for slli/srli/srai, and the raw 12-bit field for fence.
    """

    mnemonic: str
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: int = 0


def _sext(value: int, bits: int) -> int:
    if value & (1 << (bits - 1)):
        return value - (1 << bits)
    return value


_OP_R = ("add", "sll", "slt", "sltu", "xor", "srl", "or", "and")
_OP_M = ("mul", "mulh", "mulhsu", "mulhu", "div", "divu", "rem", "remu")
_OP_I = ("addi", None, "slti", "sltiu", "xori", None, "ori", "andi")
_LOADS = ("lb", "lh", "lw", None, "lbu", "lhu", None, None)
_STORES = ("sb", "sh", "sw")
_BRANCHES = ("beq", "bne", None, None, "blt", "bge", "bltu", "bgeu")


def decode(word: int) -> Instruction:
    """Decode one 32-bit word, raising IllegalInstructionError otherwise."""
    word &= XLEN_MASK
    op = word & 0x7F
    rd = (word >> 7) & 31
    f3 = (word >> 12) & 7
    rs1 = (word >> 15) & 31
    rs2 = (word >> 20) & 31
    f7 = word >> 25

    if op == 0x33:
        if f7 == 0x00:
            return Instruction(_OP_R[f3], rd, rs1, rs2, 0)
        if f7 == 0x20:
            if f3 == 0:
                return Instruction("sub", rd, rs1, rs2, 0)
            if f3 == 5:
                return Instruction("sra", rd, rs1, rs2, 0)
            raise IllegalInstructionError(word)
        if f7 == 0x01:
            return Instruction(_OP_M[f3], rd, rs1, rs2, 0)
        raise IllegalInstructionError(word)

    if op == 0x13:
        if f3 == 1:
            if f7 != 0x00:
                raise IllegalInstructionError(word)
            return Instruction("slli", rd, rs1, 0, rs2)
        if f3 == 5:
            if f7 == 0x00:
                return Instruction("srli", rd, rs1, 0, rs2)
            if f7 == 0x20:
                return Instruction("srai", rd, rs1, 0, rs2)
            raise IllegalInstructionError(word)
        return Instruction(_OP_I[f3], rd, rs1, 0, _sext(word >> 20, 12))

    if op == 0x03:
        mn = _LOADS[f3]
        if mn is None:
            raise IllegalInstructionError(word)
        return Instruction(mn, rd, rs1, 0, _sext(word >> 20, 12))

    if op == 0x23:
        if f3 > 2:
            raise IllegalInstructionError(word)
        imm = _sext((f7 << 5) | rd, 12)
        return Instruction(_STORES[f3], 0, rs1, rs2, imm)

    if op == 0x63:
        mn = _BRANCHES[f3]
        if mn is None:
            raise IllegalInstructionError(word)
        imm = ((word >> 31) << 12) | (((word >> 7) & 1) << 11) \
            | (((word >> 25) & 0x3F) << 5) | (((word >> 8) & 0xF) << 1)
        return Instruction(mn, 0, rs1, rs2, _sext(imm, 13))

    if op == 0x6F:
        imm = ((word >> 31) << 20) | (((word >> 12) & 0xFF) << 12) \
            | (((word >> 20) & 1) << 11) | (((word >> 21) & 0x3FF) << 1)
        return Instruction("jal", rd, 0, 0, _sext(imm, 21))

    if op == 0x67:
        if f3 != 0:
            raise IllegalInstructionError(word)
        return Instruction("jalr", rd, rs1, 0, _sext(word >> 20, 12))

    if op == 0x37:
        return Instruction("lui", rd, 0, 0, _sext(word & 0xFFFFF000, 32))

    if op == 0x17:
        return Instruction("auipc", rd, 0, 0, _sext(word & 0xFFFFF000, 32))

    if op == 0x0F:
        if f3 != 0:
            raise IllegalInstructionError(word)
        return Instruction("fence", rd, rs1, 0, (word >> 20) & 0xFFF)

    if op == 0x73:
        if word == 0x00000073:
            return Instruction("ecall")
        raise IllegalInstructionError(word)

    if op == 0x07:
        if f3 != 2:
            raise IllegalInstructionError(word)
        return Instruction("flw", rd, rs1, 0, _sext(word >> 20, 12))

    if op == 0x27:
        if f3 != 2:
            raise IllegalInstructionError(word)
        imm = _sext((f7 << 5) | rd, 12)
        return Instruction("fsw", 0, rs1, rs2, imm)

    if op == 0x53:
        if f3 == 0 and rs2 == 0:
            if f7 == 0x78:
                return Instruction("fmv.w.x", rd, rs1, 0, 0)
            if f7 == 0x70:
                return Instruction("fmv.x.w", rd, rs1, 0, 0)
        raise IllegalInstructionError(word)

    raise IllegalInstructionError(word)


_R_ENC = {
    "add": 0x00 * 8 + 0, "sll": 0x00 * 8 + 1, "slt": 0x00 * 8 + 2,
    "sltu": 0x00 * 8 + 3, "xor": 0x00 * 8 + 4, "srl": 0x00 * 8 + 5,
    "or": 0x00 * 8 + 6, "and": 0x00 * 8 + 7,
    "sub": 0x20 * 8 + 0, "sra": 0x20 * 8 + 5,
    "mul": 0x01 * 8 + 0, "mulh": 0x01 * 8 + 1, "mulhsu": 0x01 * 8 + 2,
    "mulhu": 0x01 * 8 + 3, "div": 0x01 * 8 + 4, "divu": 0x01 * 8 + 5,
    "rem": 0x01 * 8 + 6, "remu": 0x01 * 8 + 7,
}
_I_ENC = {
    "addi": (0x13, 0), "slti": (0x13, 2), "sltiu": (0x13, 3),
    "xori": (0x13, 4), "ori": (0x13, 6), "andi": (0x13, 7),
    "jalr": (0x67, 0),
    "lb": (0x03, 0), "lh": (0x03, 1), "lw": (0x03, 2),
    "lbu": (0x03, 4), "lhu": (0x03, 5),
    "flw": (0x07, 2),
}
_SHIFT_ENC = {"slli": 0x00, "srli": 0x00, "srai": 0x20}
_S_ENC = {"sb": (0x23, 0), "sh": (0x23, 1), "sw": (0x23, 2), "fsw": (0x27, 2)}
_B_ENC = {"beq": 0, "bne": 1, "blt": 4, "bge": 5, "bltu": 6, "bgeu": 7}
_U_ENC = {"lui": 0x37, "auipc": 0x17}

MNEMONICS = frozenset(
    list(_R_ENC) + list(_I_ENC) + list(_SHIFT_ENC) + list(_S_ENC)
    + list(_B_ENC) + list(_U_ENC)
    + ["jal", "fence", "ecall", "fmv.w.x", "fmv.x.w"]
)


def _check_range(imm: int, lo: int, hi: int, what: str) -> None:
    if not lo <= imm <= hi:
        raise EncodeError(f"{what} immediate {imm} out of range [{lo}, {hi}]")


def encode(instr: Instruction) -> int:
    """Encode back to a 32-bit word; inverse of decode on the supported set."""
    mn, rd, rs1, rs2, imm = instr
    if mn in _R_ENC:
        key = _R_ENC[mn]
        return ((key >> 3) << 25) | (rs2 << 20) | (rs1 << 15) \
            | ((key & 7) << 12) | (rd << 7) | 0x33
    if mn in _I_ENC:
        op, f3 = _I_ENC[mn]
        _check_range(imm, -2048, 2047, mn)
        return ((imm & 0xFFF) << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | op
    if mn in _SHIFT_ENC:
        _check_range(imm, 0, 31, mn)
        f3 = 1 if mn == "slli" else 5
        return (_SHIFT_ENC[mn] << 25) | (imm << 20) | (rs1 << 15) \
            | (f3 << 12) | (rd << 7) | 0x13
    if mn in _S_ENC:
        op, f3 = _S_ENC[mn]
        _check_range(imm, -2048, 2047, mn)
        i = imm & 0xFFF
        return ((i >> 5) << 25) | (rs2 << 20) | (rs1 << 15) | (f3 << 12) \
            | ((i & 31) << 7) | op
    if mn in _B_ENC:
        _check_range(imm, -4096, 4094, mn)
        if imm & 1:
            raise EncodeError(f"branch offset {imm} is odd")
        i = imm & 0x1FFF
        return ((i >> 12) << 31) | (((i >> 5) & 0x3F) << 25) | (rs2 << 20) \
            | (rs1 << 15) | (_B_ENC[mn] << 12) | (((i >> 1) & 0xF) << 8) \
            | (((i >> 11) & 1) << 7) | 0x63
    if mn == "jal":
        _check_range(imm, -(1 << 20), (1 << 20) - 2, mn)
        if imm & 1:
            raise EncodeError(f"jump offset {imm} is odd")
        i = imm & 0x1FFFFF
        return ((i >> 20) << 31) | (((i >> 1) & 0x3FF) << 21) \
            | (((i >> 11) & 1) << 20) | (((i >> 12) & 0xFF) << 12) \
            | (rd << 7) | 0x6F
    if mn in _U_ENC:
        if imm & 0xFFF:
            raise EncodeError(f"{mn} immediate 0x{imm & XLEN_MASK:x} has nonzero low bits")
        _check_range(imm, -(1 << 31), (1 << 31) - 1, mn)
        return (imm & 0xFFFFF000) | (rd << 7) | _U_ENC[mn]
    if mn == "fence":
        return ((imm & 0xFFF) << 20) | (rs1 << 15) | (rd << 7) | 0x0F
    if mn == "ecall":
        return 0x00000073
    if mn == "fmv.w.x":
        return (0x78 << 25) | (rs1 << 15) | (rd << 7) | 0x53
    if mn == "fmv.x.w":
        return (0x70 << 25) | (rs1 << 15) | (rd << 7) | 0x53
    raise EncodeError(f"unknown mnemonic {mn!r}")


_X_ABI = (
    "zero", "ra", "sp", "gp", "tp", "t0", "t1", "t2",
    "s0", "s1", "a0", "a1", "a2", "a3", "a4", "a5",
    "a6", "a7", "s2", "s3", "s4", "s5", "s6", "s7",
    "s8", "s9", "s10", "s11", "t3", "t4", "t5", "t6",
)
_F_ABI = (
    "ft0", "ft1", "ft2", "ft3", "ft4", "ft5", "ft6", "ft7",
    "fs0", "fs1", "fa0", "fa1", "fa2", "fa3", "fa4", "fa5",
    "fa6", "fa7", "fs2", "fs3", "fs4", "fs5", "fs6", "fs7",
    "fs8", "fs9", "fs10", "fs11", "ft8", "ft9", "ft10", "ft11",
)

X_REGISTERS = {f"x{i}": i for i in range(32)}
X_REGISTERS.update({name: i for i, name in enumerate(_X_ABI)})
X_REGISTERS["fp"] = 8

F_REGISTERS = {f"f{i}": i for i in range(32)}
F_REGISTERS.update({name: i for i, name in enumerate(_F_ABI)})
