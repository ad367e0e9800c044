"""API-name annotation of call/jmp targets and follow-the-call disassembly."""

from __future__ import annotations

import dataclasses
from typing import Callable, Optional, Sequence

from .disasm import Instruction, OperandKind, decode, decode_one, resolve_rel_target
from .heuristics import DEFAULT_CONFIG, HeuristicConfig, scan
from .pe import IatMap, PeError, PeImage, rva_to_offset
from .tls import DEFAULT_DISASM_BYTES, CallbackRecord, read_callback_bytes

BRANCH_MNEMONICS = ("call", "jmp")


@dataclasses.dataclass
class CallTargetAnalysis:
    caller_va: int
    target_va: int
    depth: int
    root_va: int = 0  # the callback this chain started from
    raw_bytes: bytes = b""
    truncated: bool = False
    instructions: list = dataclasses.field(default_factory=list)
    annotations: list = dataclasses.field(default_factory=list)
    findings: list = dataclasses.field(default_factory=list)
    warnings: list = dataclasses.field(default_factory=list)

    @property
    def header(self) -> str:
        return f"Disassembling call target at address: 0x{self.target_va:x}"

    @property
    def end_va(self) -> int:
        return self.target_va + len(self.raw_bytes)


def unknown_label(rva: int) -> str:
    return f"Unknown_API_0x{rva:x}"


def memory_slot(insn: Instruction) -> Optional[int]:
    """VA of the pointer slot read by ``call/jmp [abs]`` or ``call/jmp [rip + d]``."""
    if len(insn.operands) != 1 or insn.operands[0].kind is not OperandKind.MEMORY:
        return None
    mem = insn.operands[0].mem
    if mem.segment or mem.index:
        return None
    if mem.absolute:
        return mem.disp & ((1 << 64) - 1)
    if mem.base == "rip":
        return (insn.address + insn.length + mem.disp) & ((1 << 64) - 1)
    return None


def _in_image(va: int, image_base: int, size_of_image: int) -> bool:
    return image_base <= va < image_base + size_of_image


def thunk_slot(img: PeImage, target_va: int) -> Optional[int]:
    """Slot VA if ``target_va`` holds an import thunk stub ``jmp [slot]``."""
    try:
        offset = rva_to_offset(img, target_va - img.image_base)
    except PeError:
        return None
    insn = decode_one(img.raw[offset:offset + 15], target_va, img.arch)
    if insn.mnemonic != "jmp":
        return None
    return memory_slot(insn)


def annotate(insns: Sequence[Instruction], iat: Optional[IatMap], image_base: int, size_of_image: int,
             img: Optional[PeImage] = None, label_unknown_slots: bool = False) -> list:
    """Return ``(index, label)`` pairs for call/jmp instructions.

    Slot-indirect branches are labelled with their import name.  A slot with no
    import is labelled ``Unknown_API_0x<rva>`` only when ``label_unknown_slots``
    is set.  Direct in-image targets get the import name when they land on a
    thunk stub (needs ``img``), otherwise ``Unknown_API_0x<rva>``.
    """
    entries = iat.entries if iat is not None else {}
    out = []
    for k, insn in enumerate(insns):
        if insn.mnemonic not in BRANCH_MNEMONICS:
            continue
        slot = memory_slot(insn)
        if slot is not None:
            if slot in entries:
                out.append((k, entries[slot]))
            elif label_unknown_slots and _in_image(slot, image_base, size_of_image):
                out.append((k, unknown_label(slot - image_base)))
            continue
        target = resolve_rel_target(insn)
        if target is None or not _in_image(target, image_base, size_of_image):
            continue
        if img is not None:
            stub_slot = thunk_slot(img, target)
            if stub_slot is not None and stub_slot in entries:
                out.append((k, entries[stub_slot]))
                continue
        out.append((k, unknown_label(target - image_base)))
    return out


def _direct_call_targets(insns: Sequence[Instruction]) -> list:
    return [t for t in (resolve_rel_target(i) for i in insns if i.mnemonic == "call") if t is not None]


def follow_call_targets(img: PeImage, cb: CallbackRecord, depth_limit: int = 1,
                        budget: int = DEFAULT_DISASM_BYTES,
                        cfg: HeuristicConfig = DEFAULT_CONFIG,
                        analyze: Optional[Callable[[list, bytes], list]] = None) -> list:
    """Disassemble in-image direct call targets, depth-first, up to ``depth_limit`` levels.

    Each target is visited once per analysis (the callback itself counts as
    visited).  ``analyze(instructions, raw_bytes)`` produces findings for a
    target window; by default the heuristic scan runs.
    """
    if analyze is None:
        analyze = lambda insns, _raw: scan(insns, img.arch, cfg)  # noqa: E731
    iat = img.imports
    entries = iat.entries if iat is not None else {}
    visited = {cb.va}
    results: list = []

    def visit(caller_va: int, insns: Sequence[Instruction], depth: int) -> None:
        if depth > depth_limit:
            return
        for target in _direct_call_targets(insns):
            if target in visited or not _in_image(target, img.image_base, img.size_of_image):
                continue
            stub_slot = thunk_slot(img, target)
            if stub_slot is not None and stub_slot in entries:
                continue
            visited.add(target)
            analysis = _disassemble_target(img, caller_va, target, depth, budget, analyze)
            analysis.root_va = cb.va
            results.append(analysis)
            visit(target, analysis.instructions, depth + 1)

    visit(cb.va, cb.instructions, 1)
    return results


def _disassemble_target(img: PeImage, caller_va: int, target: int, depth: int, budget: int,
                        analyze: Callable[[list, bytes], list]) -> CallTargetAnalysis:
    analysis = CallTargetAnalysis(caller_va=caller_va, target_va=target, depth=depth)
    rva = target - img.image_base
    try:
        offset = rva_to_offset(img, rva)
    except PeError as exc:
        analysis.warnings.append(f"call target 0x{target:x} unreadable: {exc}")
        return analysis
    probe = CallbackRecord(va=target, rva=rva, file_offset=offset)
    read_callback_bytes(img, probe, budget, analysis.warnings)
    analysis.raw_bytes, analysis.truncated = probe.raw_bytes, probe.truncated
    analysis.instructions = decode(probe.raw_bytes, target, img.arch)
    analysis.annotations = annotate(analysis.instructions, img.imports, img.image_base,
                                    img.size_of_image, img)
    analysis.findings = analyze(analysis.instructions, analysis.raw_bytes)
    return analysis
