"""
Linear-sweep x86/x64 decoder for the instruction subset found in callback
prologues.

Output text follows the Intel syntax conventions of common disassemblers
(``mov eax, dword ptr fs:[0x2c]``).  Anything outside the supported subset
terminates the sweep with a one-byte ``(bad)`` pseudo-instruction.
"""

from __future__ import annotations

import dataclasses
import enum
import functools
from typing import Optional

from .pe import Arch

BAD = "(bad)"
MAX_INSN_LENGTH = 15
HEX_THRESHOLD = 9

REG8_LEGACY = ("al", "cl", "dl", "bl", "ah", "ch", "dh", "bh")
REG8_REX = ("al", "cl", "dl", "bl", "spl", "bpl", "sil", "dil",
            "r8b", "r9b", "r10b", "r11b", "r12b", "r13b", "r14b", "r15b")
REG16 = ("ax", "cx", "dx", "bx", "sp", "bp", "si", "di",
         "r8w", "r9w", "r10w", "r11w", "r12w", "r13w", "r14w", "r15w")
REG32 = ("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi",
         "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d")
REG64 = ("rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
         "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15")

SEGMENT_PREFIXES = {0x26: "es", 0x2E: "cs", 0x36: "ss", 0x3E: "ds", 0x64: "fs", 0x65: "gs"}
SIZE_NAMES = {1: "byte", 2: "word", 4: "dword", 8: "qword"}

ALU_OPS = ("add", "or", "adc", "sbb", "and", "sub", "xor", "cmp")
SHIFT_OPS = ("rol", "ror", "rcl", "rcr", "shl", "shr", "sal", "sar")
UNARY_OPS = {2: "not", 3: "neg", 4: "mul", 5: "imul", 6: "div", 7: "idiv"}
JCC = ("jo", "jno", "jb", "jae", "je", "jne", "jbe", "ja",
       "js", "jns", "jp", "jnp", "jl", "jge", "jle", "jg")

# immediates of these mnemonics are never rendered negative
_UNSIGNED_IMM_MNEMONICS = frozenset({"and", "or", "xor", "mov", "movabs"})
_BRANCH_MNEMONICS = frozenset({"call", "jmp", "ret"}) | frozenset(JCC)


class OperandKind(enum.Enum):
    REGISTER = "register"
    IMMEDIATE = "immediate"
    MEMORY = "memory"
    RELATIVE = "relative"


@dataclasses.dataclass(frozen=True)
class MemRef:
    size: int  # access width in bytes; 0 = no "ptr" qualifier (lea)
    base: Optional[str] = None
    index: Optional[str] = None
    scale: int = 1
    disp: int = 0
    segment: Optional[str] = None
    absolute: bool = False  # no base and no index; disp is an address


@dataclasses.dataclass(frozen=True)
class Operand:
    kind: OperandKind
    size: int = 0
    register: Optional[str] = None
    value: Optional[int] = None
    mem: Optional[MemRef] = None
    target_va: Optional[int] = None

    @classmethod
    def reg(cls, name: str, size: int) -> "Operand":
        return cls(OperandKind.REGISTER, size=size, register=name)

    @classmethod
    def imm(cls, value: int, size: int) -> "Operand":
        return cls(OperandKind.IMMEDIATE, size=size, value=value)


@dataclasses.dataclass(frozen=True)
class Instruction:
    address: int
    length: int
    mnemonic: str
    operands: tuple = ()
    raw: bytes = b""

    @functools.cached_property
    def text(self) -> str:
        return render(self)

    @property
    def is_bad(self) -> bool:
        return self.mnemonic == BAD

    def __str__(self) -> str:
        return f"0x{self.address:x}: {self.text}"


class _Bad(Exception):
    pass


def _fmt_number(value: int) -> str:
    if value < 0:
        return f"-0x{-value:x}" if -value > HEX_THRESHOLD else f"-{-value}"
    return f"0x{value:x}" if value > HEX_THRESHOLD else str(value)


def _fmt_imm(value: int, size: int, mnemonic: str) -> str:
    if value < 0 and mnemonic in _UNSIGNED_IMM_MNEMONICS:
        value &= (1 << (8 * size)) - 1
        return f"0x{value:x}"
    return _fmt_number(value)


def _fmt_mem(m: MemRef) -> str:
    if m.absolute:
        inner = _fmt_number(m.disp)
    else:
        parts = []
        if m.base:
            parts.append(m.base)
        if m.index:
            parts.append(m.index if m.scale == 1 else f"{m.index}*{m.scale}")
        inner = " + ".join(parts)
        if m.disp > 0:
            inner += f" + {_fmt_number(m.disp)}"
        elif m.disp < 0:
            inner += f" - {_fmt_number(-m.disp)}"
    seg = f"{m.segment}:" if m.segment else ""
    prefix = f"{SIZE_NAMES[m.size]} ptr " if m.size else ""
    return f"{prefix}{seg}[{inner}]"


def render_operand(op: Operand, mnemonic: str) -> str:
    if op.kind is OperandKind.REGISTER:
        return op.register
    if op.kind is OperandKind.IMMEDIATE:
        return _fmt_imm(op.value, op.size, mnemonic)
    if op.kind is OperandKind.RELATIVE:
        return _fmt_number(op.target_va)
    return _fmt_mem(op.mem)


def render(insn: Instruction) -> str:
    """Canonical ``"mnemonic op1, op2"`` text for an instruction."""
    if not insn.operands:
        return insn.mnemonic
    ops = ", ".join(render_operand(op, insn.mnemonic) for op in insn.operands)
    return f"{insn.mnemonic} {ops}"


def resolve_rel_target(insn: Instruction) -> Optional[int]:
    """Absolute target of a relative call/jmp/jcc, else ``None``."""
    if insn.mnemonic in _BRANCH_MNEMONICS and len(insn.operands) == 1:
        op = insn.operands[0]
        if op.kind is OperandKind.RELATIVE:
            return op.target_va
    return None


class _Decoder:
    """Decodes a single instruction; raises ``_Bad`` on unsupported input."""

    def __init__(self, data: bytes, pos: int, address: int, arch: Arch):
        self.data = data
        self.start = pos
        self.pos = pos
        self.address = address
        self.x64 = arch is Arch.X64
        self.opsize16 = False
        self.segment: Optional[str] = None
        self.rex = 0

    # byte readers ------------------------------------------------------

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data) or self.pos + n - self.start > MAX_INSN_LENGTH:
            raise _Bad
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def uint(self, n: int) -> int:
        return int.from_bytes(self._take(n), "little")

    def sint(self, n: int) -> int:
        return int.from_bytes(self._take(n), "little", signed=True)

    # register helpers --------------------------------------------------

    @property
    def rex_w(self) -> bool:
        return bool(self.rex & 8)

    def _ext(self, bit: int) -> int:
        return 8 if self.rex & bit else 0

    def opsize(self) -> int:
        if self.rex_w:
            return 8
        return 2 if self.opsize16 else 4

    def stack_opsize(self) -> int:
        # push/pop default to the native width
        if self.x64 and self.rex_w:
            if self.opsize16:
                # conflicting width overrides; reference decoders disagree
                raise _Bad
            return 8
        if self.opsize16:
            return 2
        return 8 if self.x64 else 4

    def regname(self, num: int, size: int) -> str:
        if size == 1:
            return REG8_REX[num] if self.rex else REG8_LEGACY[num]
        if num >= 8 and not self.x64:
            raise _Bad
        return {2: REG16, 4: REG32, 8: REG64}[size][num]

    def reg(self, num: int, size: int) -> Operand:
        return Operand.reg(self.regname(num, size), size)

    def addr_reg(self, num: int) -> str:
        return REG64[num] if self.x64 else REG32[num]

    # modrm -------------------------------------------------------------

    def modrm(self) -> tuple:
        """Return (mod, reg field incl. REX.R, rm operand factory)."""
        m = self.u8()
        mod, reg, rm = m >> 6, ((m >> 3) & 7) | self._ext(4), m & 7
        if mod == 3:
            num = rm | self._ext(1)
            return mod, reg, lambda size: self.reg(num, size)

        base = index = None
        scale, disp, absolute = 1, 0, False
        if rm == 4:
            sib = self.u8()
            scale = 1 << (sib >> 6)
            idx = ((sib >> 3) & 7) | self._ext(2)
            b = sib & 7
            if idx != 4:
                index = self.addr_reg(idx)
            elif self.x64 and (scale != 1 or (b != 4 and not (b == 5 and mod == 0))):
                # SIB without an index register; x64 syntax spells it out
                index = "riz"
            if b == 5 and mod == 0:
                disp = self.sint(4)
            else:
                base = self.addr_reg(b | self._ext(1))
            if index is None and base is None:
                absolute = True
        elif rm == 5 and mod == 0:
            disp = self.sint(4)
            if self.x64:
                base = "rip"
            else:
                absolute = True
        else:
            base = self.addr_reg(rm | self._ext(1))
        if mod == 1:
            disp = self.sint(1)
        elif mod == 2:
            disp = self.sint(4)
        if absolute:
            disp &= (1 << 64) - 1 if self.x64 else 0xFFFFFFFF
        if index is None:
            scale = 1

        def make(size: int) -> Operand:
            return Operand(OperandKind.MEMORY, size=size,
                           mem=MemRef(size, base, index, scale, disp, self.segment, absolute))
        return mod, reg, make

    # immediates --------------------------------------------------------

    def imm_sized(self, size: int) -> Operand:
        """Iz/Iv-style immediate: 16/32 bits, sign-extended into 64-bit operands."""
        if size == 2:
            return Operand.imm(self.uint(2), 2)
        if size == 4:
            return Operand.imm(self.uint(4), 4)
        return Operand.imm(self.sint(4), 8)

    def imm8_sext(self, size: int) -> Operand:
        return Operand.imm(self.sint(1), size)

    def rel(self, n: int) -> Operand:
        disp = self.sint(n)
        end = self.address + (self.pos - self.start)
        mask = (1 << 64) - 1 if self.x64 else 0xFFFFFFFF
        return Operand(OperandKind.RELATIVE, size=n, target_va=(end + disp) & mask)

    # decoding ----------------------------------------------------------

    def decode(self) -> Instruction:
        while True:
            b = self.u8()
            if b == 0x66:
                self.opsize16 = True
            elif b in SEGMENT_PREFIXES:
                self.segment = SEGMENT_PREFIXES[b]
            elif b in (0x67, 0xF0, 0xF2, 0xF3):
                raise _Bad
            else:
                break
        if self.x64 and 0x40 <= b <= 0x4F:
            self.rex = b
            b = self.u8()
            if 0x40 <= b <= 0x4F or b == 0x66 or b in SEGMENT_PREFIXES:
                raise _Bad
        mnemonic, operands = self.dispatch(b)
        length = self.pos - self.start
        return Instruction(self.address, length, mnemonic, tuple(operands),
                           bytes(self.data[self.start:self.pos]))

    def dispatch(self, b: int) -> tuple:
        if b == 0x0F:
            return self.two_byte(self.u8())
        if b < 0x40 and (b & 7) < 6:
            return self.alu(b)
        if 0x40 <= b <= 0x4F:  # x86 only; REX handled earlier
            size = self.opsize()
            return ("inc" if b < 0x48 else "dec"), [self.reg(b & 7, size)]
        if 0x50 <= b <= 0x5F:
            num = (b & 7) | self._ext(1)
            return ("push" if b < 0x58 else "pop"), [self.reg(num, self.stack_opsize())]
        if b == 0x63 and self.x64:
            _, reg, rm = self.modrm()
            return "movsxd", [self.reg(reg, self.opsize()), rm(4)]
        if b == 0x68:
            size = self.stack_opsize()
            return "push", [self.imm_sized(size)]
        if b == 0x6A:
            return "push", [self.imm8_sext(self.stack_opsize())]
        if b in (0x69, 0x6B):
            size = self.opsize()
            _, reg, rm = self.modrm()
            src = rm(size)
            imm = self.imm_sized(size) if b == 0x69 else self.imm8_sext(size)
            return "imul", [self.reg(reg, size), src, imm]
        if 0x70 <= b <= 0x7F:
            self.no_opsize_branch()
            return JCC[b & 0xF], [self.rel(1)]
        if b in (0x80, 0x81, 0x83):
            size = 1 if b == 0x80 else self.opsize()
            _, reg, rm = self.modrm()
            dst = rm(size)
            if b == 0x80:
                imm = Operand.imm(self.uint(1), 1)
            elif b == 0x81:
                imm = self.imm_sized(size)
            else:
                imm = self.imm8_sext(size)
            return ALU_OPS[reg & 7], [dst, imm]
        if b in (0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8A, 0x8B):
            size = 1 if b in (0x84, 0x86, 0x88, 0x8A) else self.opsize()
            _, reg, rm = self.modrm()
            name = {0x84: "test", 0x85: "test", 0x86: "xchg", 0x87: "xchg"}.get(b, "mov")
            if b in (0x8A, 0x8B):
                return name, [self.reg(reg, size), rm(size)]
            return name, [rm(size), self.reg(reg, size)]
        if b == 0x8D:
            mod, reg, rm = self.modrm()
            if mod == 3:
                raise _Bad
            return "lea", [self.reg(reg, self.opsize()), rm(0)]
        if b == 0x8F:
            _, reg, rm = self.modrm()
            if reg & 7:
                raise _Bad
            return "pop", [rm(self.stack_opsize())]
        if b == 0x90:
            if self.rex & 1:
                size = self.opsize()
                return "xchg", [self.reg(8, size), self.reg(0, size)]
            return "nop", []
        if 0x91 <= b <= 0x97:
            size = self.opsize()
            return "xchg", [self.reg((b & 7) | self._ext(1), size), self.reg(0, size)]
        if b == 0x98:
            return {2: "cbw", 4: "cwde", 8: "cdqe"}[self.opsize()], []
        if b == 0x99:
            return {2: "cwd", 4: "cdq", 8: "cqo"}[self.opsize()], []
        if 0xA0 <= b <= 0xA3:
            return self.moffs(b)
        if b == 0xA8:
            return "test", [self.reg(0, 1), Operand.imm(self.uint(1), 1)]
        if b == 0xA9:
            size = self.opsize()
            return "test", [self.reg(0, size), self.imm_sized(size)]
        if 0xB0 <= b <= 0xB7:
            return "mov", [self.reg((b & 7) | self._ext(1), 1), Operand.imm(self.uint(1), 1)]
        if 0xB8 <= b <= 0xBF:
            size = self.opsize()
            dst = self.reg((b & 7) | self._ext(1), size)
            if size == 8:
                return "movabs", [dst, Operand.imm(self.uint(8), 8)]
            return "mov", [dst, Operand.imm(self.uint(size), size)]
        if b in (0xC0, 0xC1, 0xD0, 0xD1, 0xD2, 0xD3):
            size = 1 if b in (0xC0, 0xD0, 0xD2) else self.opsize()
            _, reg, rm = self.modrm()
            dst = rm(size)
            if b in (0xC0, 0xC1):
                count = Operand.imm(self.uint(1), 1)
            elif b in (0xD0, 0xD1):
                count = Operand.imm(1, 1)
            else:
                count = Operand.reg("cl", 1)
            return SHIFT_OPS[reg & 7], [dst, count]
        if b == 0xC2:
            self.no_opsize_branch()
            return "ret", [Operand.imm(self.uint(2), 2)]
        if b == 0xC3:
            self.no_opsize_branch()
            return "ret", []
        if b in (0xC6, 0xC7):
            size = 1 if b == 0xC6 else self.opsize()
            _, reg, rm = self.modrm()
            if reg & 7:
                raise _Bad
            dst = rm(size)
            imm = Operand.imm(self.uint(1), 1) if size == 1 else self.imm_sized(size)
            return "mov", [dst, imm]
        if b == 0xC9:
            return "leave", []
        if b == 0xCC:
            return "int3", []
        if b == 0xCD:
            return "int", [Operand.imm(self.uint(1), 1)]
        if b == 0xE8:
            self.no_opsize_branch()
            return "call", [self.rel(4)]
        if b == 0xE9:
            self.no_opsize_branch()
            return "jmp", [self.rel(4)]
        if b == 0xEB:
            self.no_opsize_branch()
            return "jmp", [self.rel(1)]
        if b in (0xF6, 0xF7):
            size = 1 if b == 0xF6 else self.opsize()
            _, reg, rm = self.modrm()
            dst = rm(size)
            op = reg & 7
            if op == 0:
                imm = Operand.imm(self.uint(1), 1) if size == 1 else self.imm_sized(size)
                return "test", [dst, imm]
            if op == 1:
                raise _Bad
            return UNARY_OPS[op], [dst]
        if b == 0xFE:
            _, reg, rm = self.modrm()
            if reg & 7 > 1:
                raise _Bad
            return ("inc", "dec")[reg & 7], [rm(1)]
        if b == 0xFF:
            return self.group5()
        raise _Bad

    def no_opsize_branch(self) -> None:
        # operand-size overrides on branches truncate the target, and 3E on
        # call/jmp is the CET notrack marker; neither is supported
        if self.opsize16 or self.segment == "ds":
            raise _Bad

    def alu(self, b: int) -> tuple:
        name = ALU_OPS[b >> 3]
        form = b & 7
        if form == 4:
            return name, [self.reg(0, 1), Operand.imm(self.uint(1), 1)]
        if form == 5:
            size = self.opsize()
            return name, [self.reg(0, size), self.imm_sized(size)]
        size = 1 if form in (0, 2) else self.opsize()
        _, reg, rm = self.modrm()
        if form in (0, 1):
            return name, [rm(size), self.reg(reg, size)]
        return name, [self.reg(reg, size), rm(size)]

    def moffs(self, b: int) -> tuple:
        size = 1 if b in (0xA0, 0xA2) else self.opsize()
        addr = self.uint(8 if self.x64 else 4)
        mem = Operand(OperandKind.MEMORY, size=size,
                      mem=MemRef(size, disp=addr, segment=self.segment, absolute=True))
        acc = self.reg(0, size)
        ops = [acc, mem] if b in (0xA0, 0xA1) else [mem, acc]
        return ("movabs" if self.x64 else "mov"), ops

    def group5(self) -> tuple:
        mod, reg, rm = self.modrm()
        op = reg & 7
        if op in (0, 1):
            return ("inc", "dec")[op], [rm(self.opsize())]
        if op in (2, 4):
            self.no_opsize_branch()
            return ("call" if op == 2 else "jmp"), [rm(8 if self.x64 else 4)]
        if op == 6:
            return "push", [rm(self.stack_opsize())]
        raise _Bad

    def two_byte(self, b: int) -> tuple:
        if b == 0x1F:
            _, _reg, rm = self.modrm()
            return "nop", [rm(self.opsize())]
        if 0x80 <= b <= 0x8F:
            self.no_opsize_branch()
            return JCC[b & 0xF], [self.rel(4)]
        if b == 0xAF:
            size = self.opsize()
            _, reg, rm = self.modrm()
            return "imul", [self.reg(reg, size), rm(size)]
        if b in (0xB6, 0xB7, 0xBE, 0xBF):
            size = self.opsize()
            _, reg, rm = self.modrm()
            name = "movzx" if b < 0xBE else "movsx"
            return name, [self.reg(reg, size), rm(1 if b in (0xB6, 0xBE) else 2)]
        if b == 0x31:
            return "rdtsc", []
        if b == 0xA2:
            return "cpuid", []
        if b == 0x0B:
            return "ud2", []
        raise _Bad


def decode_one(data: bytes, base_va: int, arch: Arch, pos: int = 0) -> Instruction:
    """Decode the instruction at ``data[pos]`` located at ``base_va + pos``."""
    address = base_va + pos
    try:
        return _Decoder(data, pos, address, arch).decode()
    except _Bad:
        return Instruction(address, 1, BAD, (), bytes(data[pos:pos + 1]))


def decode(data: bytes, base_va: int, arch: Arch) -> list:
    """Linear sweep from ``base_va``; stops after the first ``(bad)``."""
    data = bytes(data)
    out = []
    pos = 0
    while pos < len(data):
        insn = decode_one(data, base_va, arch, pos)
        out.append(insn)
        if insn.is_bad:
            break
        pos += insn.length
    return out
