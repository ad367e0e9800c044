"""Text and JSON rendering of analysis reports."""

from __future__ import annotations

import json
from typing import Optional

from .pipeline import AnalysisReport, TargetMeta
from .tls import TlsStatus

SEPARATOR = "-----"
HEADER_ROW = "PID PPID Process Name Offset(V) TLS RVA(V) Architecture Path"
FINDINGS_HEADER = "[*] Potentially Suspicious Instruction(s) Identified:"
EMPTY_TABLE_MESSAGE = ("The process has a non-empty TLS callback table, but no TLS callback "
                       "procedures could be located within the process.")
NO_DIRECTORY_MESSAGE = "No TLS directory is present in the process image."
BYTES_PER_LINE = 16


def _opt(value: Optional[int], hexadecimal: bool = False) -> str:
    if value is None:
        return "-"
    return f"0x{value:x}" if hexadecimal else str(value)


def _hx(value: int) -> str:
    return f"0x{value:x}"


def hexdump(data: bytes) -> list:
    """16 bytes per line: hex pairs, two-space gutter, ASCII with '.' for the rest."""
    lines = []
    for i in range(0, len(data), BYTES_PER_LINE):
        chunk = data[i:i + BYTES_PER_LINE]
        pairs = " ".join(f"{b:02x}" for b in chunk).ljust(3 * BYTES_PER_LINE - 1)
        text = "".join(chr(b) if 0x20 <= b < 0x7F else "." for b in chunk)
        lines.append(f"{pairs}  {text}")
    return lines


def _process(meta: TargetMeta) -> str:
    return f"{meta.process_name} (PID: {_opt(meta.pid)})"


def _disassembly(insns: list, annotations: list) -> list:
    labels = dict(annotations)
    lines = ["Disassembly:"]
    for k, insn in enumerate(insns):
        line = f"0x{insn.address:x}: {insn.text}"
        if k in labels:
            line += f" [API: {labels[k]}]"
        lines.append(line)
    return lines


def _findings_block(findings: list) -> list:
    if not findings:
        return []
    return [FINDINGS_HEADER, SEPARATOR] + [f"[SUSPICIOUS]: {f.message}" for f in findings]


def render_text(report: AnalysisReport) -> str:
    meta = report.meta
    out = [
        HEADER_ROW,
        SEPARATOR,
        " ".join([_opt(meta.pid), _opt(meta.ppid), meta.process_name or "-", _opt(meta.offset_v, True),
                  _hx(report.tls_rva), report.arch, meta.path or "-"]),
        "",
    ]
    for va in report.unresolved:
        out.append(f"Unresolvable TLS callback pointer: {_hx(va)}")
    if report.status is TlsStatus.NO_TLS_DIRECTORY:
        out += [SEPARATOR, NO_DIRECTORY_MESSAGE]
    elif report.status is TlsStatus.EMPTY_CALLBACK_TABLE:
        out += [SEPARATOR, EMPTY_TABLE_MESSAGE]

    for cb in report.callbacks:
        out += [SEPARATOR, f"TLS-Callback Found in Process: {_process(meta)}",
                f"Address range: {_hx(cb.va)} - {_hx(cb.end_va)}", SEPARATOR]
        out += hexdump(cb.raw_bytes)
        out += _disassembly(cb.instructions, cb.annotations)
        out.append(SEPARATOR)
        out += _findings_block(cb.findings)
        for t in (t for t in report.recursive if t.root_va == cb.va):
            out += [SEPARATOR, f"{t.header} For Process: {_process(meta)}",
                    f"Address range: {_hx(t.target_va)} - {_hx(t.end_va)}", SEPARATOR]
            out += hexdump(t.raw_bytes)
            out.append(SEPARATOR)
            out += _disassembly(t.instructions, t.annotations)
            out.append(SEPARATOR)
            out += _findings_block(t.findings)
    return "\n".join(out) + "\n"


def _instructions_json(insns: list, annotations: list) -> list:
    labels = dict(annotations)
    out = []
    for k, insn in enumerate(insns):
        item = {"va": _hx(insn.address), "text": insn.text}
        if k in labels:
            item["api_label"] = labels[k]
        out.append(item)
    return out


def _findings_json(findings: list) -> list:
    return [{"category": f.category.value, "message": f.message, "va": _hx(f.anchor_va)} for f in findings]


def report_to_dict(report: AnalysisReport) -> dict:
    meta = report.meta
    return {
        "meta": {
            "pid": meta.pid,
            "ppid": meta.ppid,
            "name": meta.process_name,
            "path": meta.path,
            "offset_v": None if meta.offset_v is None else _hx(meta.offset_v),
        },
        "arch": report.arch,
        "tls_rva": _hx(report.tls_rva),
        "status": report.status.value,
        "callbacks": [
            {
                "va": _hx(cb.va),
                "rva": _hx(cb.rva),
                "bytes_hex": cb.raw_bytes.hex(),
                "truncated": cb.truncated,
                "instructions": _instructions_json(cb.instructions, cb.annotations),
                "findings": _findings_json(cb.findings),
            }
            for cb in report.callbacks
        ],
        "recursive": [
            {
                "callback_va": _hx(t.root_va),
                "caller_va": _hx(t.caller_va),
                "target_va": _hx(t.target_va),
                "depth": t.depth,
                "header": t.header,
                "bytes_hex": t.raw_bytes.hex(),
                "instructions": _instructions_json(t.instructions, t.annotations),
                "findings": _findings_json(t.findings),
            }
            for t in report.recursive
        ],
        "unresolved": [_hx(va) for va in report.unresolved],
        "warnings": list(report.warnings),
    }


def render_json(report) -> bytes:
    """UTF-8 JSON for one report, or a list of reports, with fixed key order."""
    if isinstance(report, AnalysisReport):
        doc = report_to_dict(report)
    else:
        doc = [report_to_dict(r) for r in report]
    return (json.dumps(doc, indent=2, ensure_ascii=False) + "\n").encode("utf-8")
