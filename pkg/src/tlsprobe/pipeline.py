"""Per-input orchestration: parse, extract, disassemble, annotate, scan, recurse."""

from __future__ import annotations

import dataclasses
import os
from typing import Optional

from .disasm import decode
from .heuristics import DEFAULT_CONFIG, HeuristicConfig, scan
from .pe import IMAGE_DIRECTORY_ENTRY_TLS, Layout, PeImage, data_directory, parse_image
from .resolver import annotate, follow_call_targets
from .rules import RuleSet, match_regex, match_rules
from .tls import DEFAULT_DISASM_BYTES, DEFAULT_MAX_CALLBACKS, TlsStatus, extract_callbacks


@dataclasses.dataclass
class TargetMeta:
    pid: Optional[int] = None
    ppid: Optional[int] = None
    process_name: str = ""
    path: str = ""
    offset_v: Optional[int] = None

    @classmethod
    def for_file(cls, path: str) -> "TargetMeta":
        return cls(process_name=os.path.basename(path), path=path)

    def merged(self, sidecar: dict) -> "TargetMeta":
        """Apply ``key=value`` sidecar fields (pid, ppid, name, path, offset_v)."""
        out = dataclasses.replace(self)
        if "pid" in sidecar:
            out.pid = int(sidecar["pid"], 0)
        if "ppid" in sidecar:
            out.ppid = int(sidecar["ppid"], 0)
        if "name" in sidecar:
            out.process_name = sidecar["name"]
        if "path" in sidecar:
            out.path = sidecar["path"]
        if "offset_v" in sidecar:
            out.offset_v = int(sidecar["offset_v"], 16)
        return out


def parse_sidecar(text: str) -> dict:
    """Read ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    fields = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"sidecar line {lineno}: expected key=value")
        fields[key.strip().lower()] = value.strip()
    return fields


@dataclasses.dataclass
class AnalysisOptions:
    layout: Layout = Layout.AUTO
    image_base: Optional[int] = None
    disasm_bytes: int = DEFAULT_DISASM_BYTES
    max_callbacks: int = DEFAULT_MAX_CALLBACKS
    scan_suspicious: bool = False
    regex: object = None  # compiled pattern
    rules: Optional[RuleSet] = None
    depth: int = 1
    heuristics: HeuristicConfig = DEFAULT_CONFIG


@dataclasses.dataclass
class AnalysisReport:
    meta: TargetMeta
    arch: str
    tls_rva: int
    status: TlsStatus
    callbacks: list = dataclasses.field(default_factory=list)
    recursive: list = dataclasses.field(default_factory=list)  # CallTargetAnalysis, callback order
    unresolved: list = dataclasses.field(default_factory=list)
    warnings: list = dataclasses.field(default_factory=list)


def _findings(img: PeImage, insns: list, raw: bytes, base_va: int, opts: AnalysisOptions) -> list:
    out = scan(insns, img.arch, opts.heuristics) if opts.scan_suspicious else []
    if opts.regex is not None:
        out += match_regex(insns, opts.regex)
    if opts.rules is not None:
        out += match_rules(raw, opts.rules, base_va)
    return out


def analyze_image(img: PeImage, meta: TargetMeta, opts: Optional[AnalysisOptions] = None) -> AnalysisReport:
    opts = opts or AnalysisOptions()
    if opts.image_base is not None:
        img = img.with_image_base(opts.image_base)
    img = img.with_imports()
    result = extract_callbacks(img, opts.max_callbacks, opts.disasm_bytes)
    report = AnalysisReport(
        meta=meta,
        arch=img.arch.value,
        tls_rva=data_directory(img, IMAGE_DIRECTORY_ENTRY_TLS).virtual_address,
        status=result.status,
        unresolved=list(result.unresolved),
        warnings=list(img.imports.warnings) + result.warnings,
    )
    for cb in result.callbacks:
        cb.instructions = decode(cb.raw_bytes, cb.va, img.arch)
        cb.annotations = annotate(cb.instructions, img.imports, img.image_base, img.size_of_image, img)
        cb.findings = _findings(img, cb.instructions, cb.raw_bytes, cb.va, opts)
        report.callbacks.append(cb)
        if opts.depth > 0:
            targets = follow_call_targets(
                img, cb, opts.depth, opts.disasm_bytes, opts.heuristics,
                analyze=lambda insns, raw: _findings(img, insns, raw, insns[0].address if insns else 0, opts))
            for t in targets:
                report.warnings += t.warnings
            report.recursive += targets
    return report


def analyze_bytes(data: bytes, meta: TargetMeta, opts: Optional[AnalysisOptions] = None) -> AnalysisReport:
    opts = opts or AnalysisOptions()
    return analyze_image(parse_image(data, opts.layout), meta, opts)
