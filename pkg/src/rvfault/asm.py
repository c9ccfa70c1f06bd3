"""Two-pass assembler and program-image loader for the supported ISA subset.

Benchmark kernels ship as readable assembly source so no external toolchain
is needed. Syntax is one instruction or directive per line, `#` comments,
`label:` definitions (optionally followed by an instruction on the same
line), and the directives .org, .word, .byte, .ascii, and .space.

Pseudo-instructions: li, la, mv, j, ret, call, nop.
"""

from __future__ import annotations

import base64
import re
from dataclasses import dataclass, field

from . import isa
from .machine import Machine
from .memsys import DEFAULT_RAM_BASE

_M32 = 0xFFFFFFFF


class AsmError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class LoadError(ValueError):
    pass


@dataclass
class ProgramImage:
    entry: int
    segments: list[tuple[int, bytes]]
    symbols: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        spans = sorted((base, base + len(data)) for base, data in self.segments)
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 < a1:
                raise AsmError(f"overlapping segments at 0x{b0:x}")
        if not any(base <= self.entry < base + len(data)
                   for base, data in self.segments):
            raise AsmError(f"entry 0x{self.entry:x} outside all segments")


def image_to_json(image: ProgramImage) -> dict:
    return {
        "entry": image.entry,
        "segments": [
            {"base": base, "data": base64.b64encode(data).decode("ascii")}
            for base, data in image.segments
        ],
        "symbols": dict(sorted(image.symbols.items())),
    }


def image_from_json(doc: dict) -> ProgramImage:
    return ProgramImage(
        entry=int(doc["entry"]),
        segments=[(int(s["base"]), base64.b64decode(s["data"]))
                  for s in doc["segments"]],
        symbols={k: int(v) for k, v in doc.get("symbols", {}).items()},
    )


_LABEL_RE = re.compile(r"^([A-Za-z_]\w*):\s*(.*)$")
_MEM_RE = re.compile(r"^(-?\w*)\((\w+)\)$")

_ESCAPES = {"n": "\n", "t": "\t", "0": "\0", "\\": "\\", '"': '"', "r": "\r"}


def _strip_comment(line: str) -> str:
    out = []
    in_str = False
    i = 0
    while i < len(line):
        ch = line[i]
        if ch == '"' and (i == 0 or line[i - 1] != "\\"):
            in_str = not in_str
        if ch == "#" and not in_str:
            break
        out.append(ch)
        i += 1
    return "".join(out).strip()


def _parse_int(tok: str, line: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise AsmError(f"expected integer, got {tok!r}", line)


def _parse_string(tok: str, line: int) -> bytes:
    tok = tok.strip()
    if len(tok) < 2 or tok[0] != '"' or tok[-1] != '"':
        raise AsmError(f".ascii expects a double-quoted string", line)
    body = tok[1:-1]
    out = bytearray()
    i = 0
    while i < len(body):
        ch = body[i]
        if ch == "\\":
            i += 1
            if i >= len(body) or body[i] not in _ESCAPES:
                raise AsmError(f"bad escape in string literal", line)
            out.append(ord(_ESCAPES[body[i]]))
        else:
            out.append(ord(ch))
        i += 1
    return bytes(out)


def _xreg(tok: str, line: int) -> int:
    r = isa.X_REGISTERS.get(tok)
    if r is None:
        raise AsmError(f"unknown integer register {tok!r}", line)
    return r


def _freg(tok: str, line: int) -> int:
    r = isa.F_REGISTERS.get(tok)
    if r is None:
        raise AsmError(f"unknown FP register {tok!r}", line)
    return r


def _split_ops(rest: str) -> list[str]:
    rest = rest.strip()
    if not rest:
        return []
    return [p.strip() for p in rest.split(",")]


def _li_words(rd: int, value: int) -> list[int]:
    value &= _M32
    signed = value - 0x100000000 if value & 0x80000000 else value
    if -2048 <= signed <= 2047:
        return [isa.encode(isa.Instruction("addi", rd, 0, 0, signed))]
    hi20 = ((value + 0x800) >> 12) & 0xFFFFF
    lo = value & 0xFFF
    if lo & 0x800:
        lo -= 0x1000
    hi_val = (hi20 << 12) & _M32
    if hi_val & 0x80000000:
        hi_val -= 0x100000000
    words = [isa.encode(isa.Instruction("lui", rd, 0, 0, hi_val))]
    if lo:
        words.append(isa.encode(isa.Instruction("addi", rd, rd, 0, lo)))
    else:
        words.append(isa.encode(isa.Instruction("addi", rd, rd, 0, 0)))
    return words


_R3 = set(isa._R_ENC)
_I3 = {"addi", "slti", "sltiu", "xori", "ori", "andi"}
_SHIFTS = {"slli", "srli", "srai"}
_LOADS = {"lb", "lh", "lw", "lbu", "lhu"}
_STORES = {"sb", "sh", "sw"}
_BRANCHES = set(isa._B_ENC)


class _Item:
    __slots__ = ("line", "addr", "kind", "args")

    def __init__(self, line, kind, args):
        self.line = line
        self.addr = 0
        self.kind = kind
        self.args = args


def assemble(source: str, base: int = DEFAULT_RAM_BASE) -> ProgramImage:
    """Assemble source text into a ProgramImage (two passes)."""
    symbols: dict[str, int] = {}
    segments: list[list] = []  # [start_addr, item list]
    cursor = base
    seg = [base, []]
    segments.append(seg)

    def item_size(it: _Item) -> int:
        if it.kind == "insn":
            return 4
        if it.kind == "li":
            return 4 * len(_li_words(0, it.args[1]))
        if it.kind == "la":
            return 8
        if it.kind == "word":
            return 4 * len(it.args)
        if it.kind == "byte":
            return len(it.args)
        if it.kind == "ascii":
            return len(it.args)
        return it.args  # space

    # pass 1: sizes, addresses, symbols
    for lineno, raw in enumerate(source.splitlines(), start=1):
        text = _strip_comment(raw)
        if not text:
            continue
        m = _LABEL_RE.match(text)
        if m:
            name, text = m.group(1), m.group(2).strip()
            if name in symbols:
                raise AsmError(f"duplicate label {name!r}", lineno)
            symbols[name] = cursor
            if not text:
                continue
        if text.startswith("."):
            parts = text.split(None, 1)
            directive = parts[0]
            rest = parts[1] if len(parts) > 1 else ""
            if directive == ".org":
                cursor = _parse_int(rest.strip(), lineno)
                seg = [cursor, []]
                segments.append(seg)
                continue
            if directive == ".word":
                toks = _split_ops(rest)
                if not toks:
                    raise AsmError(".word needs at least one value", lineno)
                it = _Item(lineno, "word", toks)
            elif directive == ".byte":
                toks = _split_ops(rest)
                if not toks:
                    raise AsmError(".byte needs at least one value", lineno)
                it = _Item(lineno, "byte",
                           [_parse_int(t, lineno) & 0xFF for t in toks])
            elif directive == ".ascii":
                it = _Item(lineno, "ascii", _parse_string(rest, lineno))
            elif directive == ".space":
                n = _parse_int(rest.strip(), lineno)
                if n < 0:
                    raise AsmError(".space needs a non-negative size", lineno)
                it = _Item(lineno, "space", n)
            else:
                raise AsmError(f"unknown directive {directive}", lineno)
        else:
            parts = text.split(None, 1)
            mn = parts[0].lower()
            rest = parts[1] if len(parts) > 1 else ""
            ops = _split_ops(rest)
            if mn == "nop":
                it = _Item(lineno, "insn", ("addi", ["x0", "x0", "0"]))
            elif mn == "mv":
                if len(ops) != 2:
                    raise AsmError("mv needs rd, rs", lineno)
                it = _Item(lineno, "insn", ("addi", [ops[0], ops[1], "0"]))
            elif mn == "j":
                if len(ops) != 1:
                    raise AsmError("j needs a target", lineno)
                it = _Item(lineno, "insn", ("jal", ["x0", ops[0]]))
            elif mn == "call":
                if len(ops) != 1:
                    raise AsmError("call needs a target", lineno)
                it = _Item(lineno, "insn", ("jal", ["ra", ops[0]]))
            elif mn == "ret":
                it = _Item(lineno, "insn", ("jalr", ["x0", "0(ra)"]))
            elif mn == "li":
                if len(ops) != 2:
                    raise AsmError("li needs rd, imm", lineno)
                it = _Item(lineno, "li", (ops[0], _parse_int(ops[1], lineno)))
            elif mn == "la":
                if len(ops) != 2:
                    raise AsmError("la needs rd, symbol", lineno)
                it = _Item(lineno, "la", (ops[0], ops[1]))
            elif mn in isa.MNEMONICS:
                it = _Item(lineno, "insn", (mn, ops))
            else:
                raise AsmError(f"unknown mnemonic {mn!r}", lineno)
            if cursor & 3:
                raise AsmError("instruction at unaligned address; pad data "
                               "to a 4-byte boundary", lineno)
        it.addr = cursor
        seg[1].append(it)
        cursor += item_size(it)

    def resolve(tok: str, line: int) -> int:
        if tok in symbols:
            return symbols[tok]
        return _parse_int(tok, line)

    def enc(mn, line, **fields) -> int:
        try:
            return isa.encode(isa.Instruction(mn, **fields))
        except isa.EncodeError as e:
            raise AsmError(str(e), line)

    def encode_insn(it: _Item) -> list[int]:
        mn, ops = it.args
        line = it.line
        n = len(ops)
        if mn in _R3:
            if n != 3:
                raise AsmError(f"{mn} needs rd, rs1, rs2", line)
            return [enc(mn, line, rd=_xreg(ops[0], line),
                        rs1=_xreg(ops[1], line), rs2=_xreg(ops[2], line))]
        if mn in _I3 or mn in _SHIFTS:
            if n != 3:
                raise AsmError(f"{mn} needs rd, rs1, imm", line)
            return [enc(mn, line, rd=_xreg(ops[0], line),
                        rs1=_xreg(ops[1], line), imm=_parse_int(ops[2], line))]
        if mn in _LOADS or mn == "flw":
            if n != 2:
                raise AsmError(f"{mn} needs rd, offset(rs1)", line)
            m = _MEM_RE.match(ops[1])
            if not m:
                raise AsmError(f"bad memory operand {ops[1]!r}", line)
            off = _parse_int(m.group(1), line) if m.group(1) else 0
            rd = _freg(ops[0], line) if mn == "flw" else _xreg(ops[0], line)
            return [enc(mn, line, rd=rd, rs1=_xreg(m.group(2), line), imm=off)]
        if mn in _STORES or mn == "fsw":
            if n != 2:
                raise AsmError(f"{mn} needs rs2, offset(rs1)", line)
            m = _MEM_RE.match(ops[1])
            if not m:
                raise AsmError(f"bad memory operand {ops[1]!r}", line)
            off = _parse_int(m.group(1), line) if m.group(1) else 0
            rs2 = _freg(ops[0], line) if mn == "fsw" else _xreg(ops[0], line)
            return [enc(mn, line, rs1=_xreg(m.group(2), line), rs2=rs2, imm=off)]
        if mn in _BRANCHES:
            if n != 3:
                raise AsmError(f"{mn} needs rs1, rs2, target", line)
            target = resolve(ops[2], line)
            return [enc(mn, line, rs1=_xreg(ops[0], line),
                        rs2=_xreg(ops[1], line), imm=target - it.addr)]
        if mn == "jal":
            if n == 1:
                rd, target = 1, resolve(ops[0], line)
            elif n == 2:
                rd, target = _xreg(ops[0], line), resolve(ops[1], line)
            else:
                raise AsmError("jal needs [rd,] target", line)
            return [enc(mn, line, rd=rd, imm=target - it.addr)]
        if mn == "jalr":
            if n == 1:
                m = _MEM_RE.match(ops[0])
                if m:
                    off = _parse_int(m.group(1), line) if m.group(1) else 0
                    return [enc(mn, line, rd=1, rs1=_xreg(m.group(2), line), imm=off)]
                return [enc(mn, line, rd=1, rs1=_xreg(ops[0], line), imm=0)]
            if n == 2:
                m = _MEM_RE.match(ops[1])
                if not m:
                    raise AsmError(f"bad jalr operand {ops[1]!r}", line)
                off = _parse_int(m.group(1), line) if m.group(1) else 0
                return [enc(mn, line, rd=_xreg(ops[0], line),
                            rs1=_xreg(m.group(2), line), imm=off)]
            if n == 3:
                return [enc(mn, line, rd=_xreg(ops[0], line),
                            rs1=_xreg(ops[1], line), imm=_parse_int(ops[2], line))]
            raise AsmError("jalr needs rd, offset(rs1)", line)
        if mn in ("lui", "auipc"):
            if n != 2:
                raise AsmError(f"{mn} needs rd, imm20", line)
            imm20 = _parse_int(ops[1], line)
            if not -(1 << 19) <= imm20 < (1 << 20):
                raise AsmError(f"{mn} immediate {imm20} out of 20-bit range", line)
            val = (imm20 << 12) & _M32
            if val & 0x80000000:
                val -= 0x100000000
            return [enc(mn, line, rd=_xreg(ops[0], line), imm=val)]
        if mn == "fence":
            if n:
                raise AsmError("fence takes no operands here", line)
            return [0x0FF0000F]
        if mn == "ecall":
            if n:
                raise AsmError("ecall takes no operands", line)
            return [0x00000073]
        if mn == "fmv.w.x":
            if n != 2:
                raise AsmError("fmv.w.x needs fd, rs", line)
            return [enc(mn, line, rd=_freg(ops[0], line), rs1=_xreg(ops[1], line))]
        if mn == "fmv.x.w":
            if n != 2:
                raise AsmError("fmv.x.w needs rd, fs", line)
            return [enc(mn, line, rd=_xreg(ops[0], line), rs1=_freg(ops[1], line))]
        raise AsmError(f"unhandled mnemonic {mn!r}", line)

    # pass 2: encode into segment payloads
    out_segments: list[tuple[int, bytes]] = []
    for seg_base, seg_items in segments:
        payload = bytearray()
        for it in seg_items:
            if it.kind == "insn":
                words = encode_insn(it)
            elif it.kind == "li":
                words = _li_words(_xreg(it.args[0], it.line), it.args[1])
            elif it.kind == "la":
                name = it.args[1]
                if name not in symbols:
                    raise AsmError(f"undefined label {name!r}", it.line)
                words = _li_words(_xreg(it.args[0], it.line), symbols[name])
                if len(words) == 1:
                    words.append(isa.encode(isa.Instruction("addi", 0, 0, 0, 0)))
            elif it.kind == "word":
                words = []
                for tok in it.args:
                    if tok in symbols:
                        words.append(symbols[tok])
                    else:
                        words.append(_parse_int(tok, it.line) & _M32)
            elif it.kind == "byte":
                payload.extend(it.args)
                continue
            elif it.kind == "ascii":
                payload.extend(it.args)
                continue
            else:  # space
                payload.extend(bytes(it.args))
                continue
            for w in words:
                payload.extend(w.to_bytes(4, "little"))
        if payload:
            out_segments.append((seg_base, bytes(payload)))

    if not out_segments:
        raise AsmError("empty program")
    entry = symbols.get("_start", out_segments[0][0])
    return ProgramImage(entry=entry, segments=out_segments, symbols=symbols)


def load_image(image: ProgramImage, machine: Machine):
    """Place a program image into RAM and reset the machine to run it.

    Payload bytes bypass the caches (which are reset to all-invalid); the
    stack pointer starts at the top of RAM, 16-byte aligned.
    """
    mem = machine.mem
    for seg_base, data in image.segments:
        if not mem.in_ram(seg_base, len(data)):
            raise LoadError(
                f"segment 0x{seg_base:x}+{len(data)} outside RAM "
                f"[0x{mem.ram_base:x}, 0x{mem.ram_base + mem.ram_size:x})")
    for seg_base, data in image.segments:
        mem.write_ram(seg_base, data)
    mem.invalidate_all()
    mem.l1i_misses = 0
    mem.l1d_misses = 0
    mem.l1d_writebacks = 0
    mem.l2_misses = 0
    machine.x = [0] * 32
    machine.x[2] = (mem.ram_base + mem.ram_size) & ~0xF
    machine.f = [0] * 32
    machine.pc = image.entry
    machine.cur_pc = image.entry
    machine.cycle = 0
    machine.counters = [0] * 20
    machine.status = "running"
    machine.exit_code = None
    machine.trap = None
    machine.output = bytearray()
