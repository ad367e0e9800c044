"""
Suspicious-pattern detectors over decoded callback instructions.

Each detector classifies instructions into a small trait (``*_trait``) and
then scans the trait sequence (``*_scan``).  The scans only ever see traits,
which keeps them cheap to check against brute-force references.
"""

from __future__ import annotations

import dataclasses
import enum
from typing import Optional, Sequence

from .disasm import Instruction, OperandKind
from .pe import Arch

PRINTABLE = range(0x20, 0x7F)
FRAME_REGISTERS = frozenset({"ebp", "esp", "rbp", "rsp"})
STACK_POINTERS = frozenset({"esp", "rsp"})
HASH_MNEMONICS = frozenset({"xor", "rol", "ror"})
MEMORY_WRITE_MNEMONICS = frozenset({
    "mov", "movabs", "xchg", "add", "adc", "sub", "sbb", "and", "or", "xor",
    "inc", "dec", "not", "neg",
})
REASON_CODES = frozenset({1, 2, 3})
# (frame register, displacement) of the reason argument after a standard prologue
REASON_SLOTS = {
    Arch.X86: frozenset({("ebp", 0xC)}),
    Arch.X64: frozenset({("rbp", 0x18), ("rsp", 0x18)}),
}
XOR_ADJACENCY = 8


class Category(enum.Enum):
    NOP_SLED = "nop_sled"
    CONTROL_FLOW_HIJACK = "control_flow_hijack"
    STACK_STRING = "stack_string"
    API_HASHING = "api_hashing"
    DYNAMIC_MEM_WRITE = "dynamic_mem_write"
    ANTI_DEBUG = "anti_debug"
    REGEX_MATCH = "regex_match"
    YARA_MATCH = "yara_match"

    @property
    def order(self) -> int:
        return _CATEGORY_ORDER[self]


_CATEGORY_ORDER = {c: i for i, c in enumerate(Category)}


@dataclasses.dataclass(frozen=True)
class Finding:
    category: Category
    message: str
    anchor_index: int  # instruction index; byte offset for YARA matches
    anchor_va: int

    def sort_key(self) -> tuple:
        return (self.anchor_index, self.category.order)


@dataclasses.dataclass(frozen=True)
class HeuristicConfig:
    nop_sled_min_run: int = 3
    api_hash_window: int = 8
    stack_string_min_pushes: int = 2
    stack_string_min_movs: int = 3

    def __post_init__(self):
        for field in dataclasses.fields(self):
            if getattr(self, field.name) < 1:
                raise ValueError(f"{field.name} must be >= 1")


DEFAULT_CONFIG = HeuristicConfig()


def _finding(category: Category, message: str, insns: Sequence[Instruction], index: int) -> Finding:
    return Finding(category, message, index, insns[index].address)


def _same_register_pair(insn: Instruction) -> bool:
    ops = insn.operands
    return (len(ops) == 2
            and ops[0].kind is OperandKind.REGISTER
            and ops[1].kind is OperandKind.REGISTER
            and ops[0].register == ops[1].register)


# -- NOP sleds ---------------------------------------------------------------

NOP_OTHER, NOP_LITERAL, NOP_SEMANTIC = 0, 1, 2


def nop_trait(insn: Instruction) -> int:
    if insn.mnemonic == "nop":
        return NOP_LITERAL
    if insn.mnemonic in ("xchg", "mov") and _same_register_pair(insn):
        return NOP_SEMANTIC
    return NOP_OTHER


def nop_scan(traits: Sequence[int], min_run: int) -> list:
    """Return ``(start, count, mixed)`` per maximal run of NOP equivalents.

    ``count`` is the leading literal-NOP streak when that streak alone reaches
    ``min_run`` (or the run is all literal NOPs); otherwise the whole run
    length, with ``mixed`` set.
    """
    out = []
    n = len(traits)
    i = 0
    while i < n:
        if traits[i] == NOP_OTHER:
            i += 1
            continue
        j = i
        while j < n and traits[j] != NOP_OTHER:
            j += 1
        length = j - i
        if length >= min_run:
            lead = 0
            while i + lead < j and traits[i + lead] == NOP_LITERAL:
                lead += 1
            if lead == length or lead >= min_run:
                out.append((i, lead, False))
            else:
                out.append((i, length, True))
        i = j
    return out


def detect_nop_sled(insns: Sequence[Instruction], cfg: HeuristicConfig = DEFAULT_CONFIG) -> list:
    findings = []
    for start, count, mixed in nop_scan([nop_trait(i) for i in insns], cfg.nop_sled_min_run):
        msg = f"NOP Sled Detected: {count} consecutive NOPs at offset {start}"
        if mixed:
            msg += " (incl. semantic NOPs)"
        findings.append(_finding(Category.NOP_SLED, msg, insns, start))
    return findings


# -- control flow --------------------------------------------------------------

def control_flow_trait(insn: Instruction) -> bool:
    return (insn.mnemonic in ("call", "jmp")
            and len(insn.operands) == 1
            and insn.operands[0].kind is OperandKind.REGISTER)


def detect_control_flow_hijack(insns: Sequence[Instruction]) -> list:
    return [_finding(Category.CONTROL_FLOW_HIJACK, f"Suspicious Control Flow: {insn.text}", insns, k)
            for k, insn in enumerate(insns) if control_flow_trait(insn)]


# -- stack strings -------------------------------------------------------------

def _printable_imm_bytes(value: int, size: int) -> Optional[int]:
    """Number of printable bytes, or None if any nonzero byte is unprintable."""
    raw = (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little")
    count = 0
    for b in raw:
        if b == 0:
            continue
        if b not in PRINTABLE:
            return None
        count += 1
    return count


def _frame_byte_slot(insn: Instruction) -> Optional[tuple]:
    """(frame register, disp) when the first operand is ``byte ptr [frame +/- disp]``."""
    if not insn.operands or insn.operands[0].kind is not OperandKind.MEMORY:
        return None
    mem = insn.operands[0].mem
    if mem.size != 1 or mem.index is not None or mem.segment or mem.base not in FRAME_REGISTERS:
        return None
    return mem.base, mem.disp


def stack_trait(insn: Instruction) -> tuple:
    """One of ``("push", printable, width)``, ``("mov", reg, disp)``,
    ``("xor", reg, disp)`` or ``()``."""
    ops = insn.operands
    if insn.mnemonic == "push" and len(ops) == 1 and ops[0].kind is OperandKind.IMMEDIATE:
        count = _printable_imm_bytes(ops[0].value, ops[0].size)
        if count is not None:
            return ("push", count, ops[0].size)
        return ()
    if insn.mnemonic in ("mov", "xor") and len(ops) == 2 and ops[1].kind is OperandKind.IMMEDIATE:
        slot = _frame_byte_slot(insn)
        if slot is None:
            return ()
        if insn.mnemonic == "mov":
            if ops[1].value & 0xFF in PRINTABLE:
                return ("mov",) + slot
            return ()
        return ("xor",) + slot
    return ()


def _push_regions(traits: Sequence[tuple], min_pushes: int) -> list:
    regions = []
    n = len(traits)
    i = 0
    while i < n:
        if not traits[i] or traits[i][0] != "push":
            i += 1
            continue
        j = i
        while j < n and traits[j] and traits[j][0] == "push":
            j += 1
        run = traits[i:j]
        if len(run) >= min_pushes and max(t[1] for t in run) >= 2:
            regions.append((i, j - i, sum(t[2] for t in run)))
        i = j
    return regions


def _mov_pairs(a: tuple, b: tuple) -> Optional[int]:
    if a and b and a[0] == "mov" and b[0] == "mov" and a[1] == b[1] and abs(b[2] - a[2]) == 1:
        return b[2] - a[2]
    return None


def _mov_regions(traits: Sequence[tuple], min_movs: int) -> list:
    """Maximal runs of byte stores walking one frame slot per instruction."""
    regions = []
    n = len(traits)
    i = 0
    while i < n:
        if not traits[i] or traits[i][0] != "mov":
            i += 1
            continue
        j, step = i, None
        while j + 1 < n:
            d = _mov_pairs(traits[j], traits[j + 1])
            if d is None or (step is not None and d != step):
                break
            step, j = d, j + 1
        if j - i + 1 >= min_movs:
            disps = [traits[k][2] for k in range(i, j + 1)]
            regions.append((i, traits[i][1], min(disps), max(disps)))
        if j > i and j + 1 < n and _mov_pairs(traits[j], traits[j + 1]) is not None:
            i = j  # direction reversal: the turning store starts the next run
        else:
            i = j + 1
    return regions


def stack_scan(traits: Sequence[tuple], min_pushes: int, min_movs: int) -> list:
    """Return ``(index, kind, detail)`` with kind in push/mov/xor."""
    pushes = _push_regions(traits, min_pushes)
    movs = _mov_regions(traits, min_movs)
    out = [(start, "push", count) for start, count, _ in pushes]
    out += [(start, "mov", reg) for start, reg, _, _ in movs]
    for k, t in enumerate(traits):
        if not t or t[0] != "xor":
            continue
        _, reg, disp = t
        near_mov = any(reg == r and lo - XOR_ADJACENCY <= disp <= hi + XOR_ADJACENCY
                       for _, r, lo, hi in movs)
        near_push = reg in STACK_POINTERS and any(
            -XOR_ADJACENCY <= disp < width + XOR_ADJACENCY for _, _, width in pushes)
        if near_mov or near_push:
            out.append((k, "xor", reg))
    out.sort(key=lambda f: f[0])
    return out


def detect_stack_strings(insns: Sequence[Instruction], cfg: HeuristicConfig = DEFAULT_CONFIG) -> list:
    traits = [stack_trait(i) for i in insns]
    findings = []
    for index, kind, detail in stack_scan(traits, cfg.stack_string_min_pushes, cfg.stack_string_min_movs):
        if kind == "push":
            text = f"{detail} consecutive printable pushes at offset {index}"
        elif kind == "mov":
            text = f"byte-wise build over [{detail}] at offset {index}"
        else:
            text = f"xor-obfuscated stack bytes at offset {index}"
        findings.append(_finding(Category.STACK_STRING, f"Stack String Construction: {text}", insns, index))
    return findings


# -- API hashing ---------------------------------------------------------------

HASH_OTHER, HASH_OP, HASH_INDIRECT_CALL = 0, 1, 2


def api_hash_trait(insn: Instruction) -> int:
    if insn.mnemonic in HASH_MNEMONICS:
        if insn.mnemonic == "xor" and _same_register_pair(insn):
            return HASH_OTHER
        return HASH_OP
    if insn.mnemonic == "call" and len(insn.operands) == 1 and insn.operands[0].kind in (
            OperandKind.REGISTER, OperandKind.MEMORY):
        return HASH_INDIRECT_CALL
    return HASH_OTHER


def api_hash_scan(traits: Sequence[int], window: int) -> list:
    """Return ``(call_index, hash_op_count)`` for calls preceded by >= 2 hash ops."""
    out = []
    running = 0  # hash ops within the trailing window
    for k, t in enumerate(traits):
        if k - window - 1 >= 0 and traits[k - window - 1] == HASH_OP:
            running -= 1
        if t == HASH_INDIRECT_CALL and running >= 2:
            out.append((k, running))
        if t == HASH_OP:
            running += 1
    return out


def detect_api_hashing(insns: Sequence[Instruction], cfg: HeuristicConfig = DEFAULT_CONFIG) -> list:
    traits = [api_hash_trait(i) for i in insns]
    return [_finding(Category.API_HASHING,
                     f"API Hashing Pattern: {n} hash ops before indirect call at offset {k}", insns, k)
            for k, n in api_hash_scan(traits, cfg.api_hash_window)]


# -- dynamic memory writes -----------------------------------------------------

def dynamic_write_trait(insn: Instruction) -> bool:
    ops = insn.operands
    if insn.mnemonic not in MEMORY_WRITE_MNEMONICS or not ops or ops[0].kind is not OperandKind.MEMORY:
        return False
    mem = ops[0].mem
    index = mem.index if mem.index != "riz" else None
    if mem.base and index:
        return True
    if mem.base and mem.base not in FRAME_REGISTERS and mem.base != "rip" and index is None:
        return (len(ops) == 2 and ops[1].kind is OperandKind.REGISTER
                and ops[1].size == mem.size)
    return False


def detect_dynamic_mem_write(insns: Sequence[Instruction]) -> list:
    return [_finding(Category.DYNAMIC_MEM_WRITE, f"Dynamic Memory Write: {insn.text}", insns, k)
            for k, insn in enumerate(insns) if dynamic_write_trait(insn)]


# -- anti-debugging ------------------------------------------------------------

ANTI_OTHER, ANTI_INT3, ANTI_REASON_CHECK = 0, 1, 2


def anti_debug_trait(insn: Instruction, arch: Arch) -> int:
    if insn.mnemonic == "int3":
        return ANTI_INT3
    ops = insn.operands
    if (insn.mnemonic == "cmp" and len(ops) == 2
            and ops[0].kind is OperandKind.MEMORY and ops[1].kind is OperandKind.IMMEDIATE):
        mem = ops[0].mem
        if (mem.index is None and not mem.segment
                and (mem.base, mem.disp) in REASON_SLOTS[arch]
                and ops[1].value in REASON_CODES):
            return ANTI_REASON_CHECK
    return ANTI_OTHER


def detect_anti_debug(insns: Sequence[Instruction], arch: Arch) -> list:
    findings = []
    for k, insn in enumerate(insns):
        trait = anti_debug_trait(insn, arch)
        if trait == ANTI_INT3:
            what = "int3 (software breakpoint) usage in anti-debugging routine"
        elif trait == ANTI_REASON_CHECK:
            what = "TLS callback anti-debugging check (reason code)"
        else:
            continue
        findings.append(_finding(Category.ANTI_DEBUG,
                                 f"Anti-Debugging Detected: {what} at 0x{insn.address:x}", insns, k))
    return findings


def scan(insns: Sequence[Instruction], arch: Arch, cfg: HeuristicConfig = DEFAULT_CONFIG) -> list:
    """Run every detector; findings ordered by instruction index, then category."""
    findings = (detect_nop_sled(insns, cfg)
                + detect_control_flow_hijack(insns)
                + detect_stack_strings(insns, cfg)
                + detect_api_hashing(insns, cfg)
                + detect_dynamic_mem_write(insns)
                + detect_anti_debug(insns, arch))
    return sorted(findings, key=Finding.sort_key)
