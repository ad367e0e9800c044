"""Command-line entry point."""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional

from .forge import main as forge_main
from .heuristics import HeuristicConfig
from .pe import Layout, PeError
from .pipeline import AnalysisOptions, TargetMeta, analyze_bytes, parse_sidecar
from .report import render_json, render_text
from .rules import RuleError, compile_regex, load_rules

EXIT_OK, EXIT_USAGE, EXIT_ALL_FAILED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> int:
    value = int(text, 0)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _non_negative(text: str) -> int:
    value = int(text, 0)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tlsprobe", description="Find, disassemble and scan TLS callbacks in PE files and dumps.")
    p.add_argument("inputs", nargs="+", metavar="FILE", help="PE file or dumped process image")
    p.add_argument("--pid", nargs="*", type=int, metavar="PID",
                   help="Process IDs to include (matched against sidecar metadata)")
    p.add_argument("--disasm-bytes", type=_positive, default=64, metavar="N",
                   help="Bytes to disassemble (Default: 64)")
    p.add_argument("--scan-suspicious", action="store_true",
                   help="Report suspicious instruction patterns along with the disassembly")
    p.add_argument("--regex", help="Regex matched against each disassembled instruction line")
    p.add_argument("--yara-file", help="Rule file applied to callback bytes")
    p.add_argument("--layout", choices=[l.value for l in Layout], default="auto")
    p.add_argument("--image-base", type=lambda s: int(s, 16), metavar="HEX",
                   help="Override the header image base (for rebased dumps)")
    p.add_argument("--depth", type=_non_negative, default=1, help="Call-following depth (Default: 1)")
    p.add_argument("--json", metavar="PATH", help="Also write a JSON report array to PATH")
    p.add_argument("--meta", action="append", default=[], metavar="PATH",
                   help="key=value sidecar (pid, ppid, name, path, offset_v); repeat per input. "
                        "Without it, FILE.meta is used when present")
    return p


def _load_meta(path: str, sidecar: Optional[str]) -> tuple:
    """(TargetMeta, had_sidecar)."""
    meta = TargetMeta.for_file(path)
    if sidecar is None and os.path.exists(path + ".meta"):
        sidecar = path + ".meta"
    if sidecar is None:
        return meta, False
    with open(sidecar, encoding="utf-8") as fh:
        return meta.merged(parse_sidecar(fh.read())), True


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv[:1] == ["forge"]:
        return forge_main(argv[1:])
    args = build_parser().parse_args(argv)

    if len(args.meta) > len(args.inputs):
        print("tlsprobe: error: more --meta files than inputs", file=sys.stderr)
        return EXIT_USAGE
    opts = AnalysisOptions(layout=Layout(args.layout), image_base=args.image_base,
                           disasm_bytes=args.disasm_bytes, scan_suspicious=args.scan_suspicious,
                           depth=args.depth, heuristics=HeuristicConfig())
    try:
        if args.regex is not None:
            opts.regex = compile_regex(args.regex)
        if args.yara_file is not None:
            opts.rules = load_rules(args.yara_file)
    except (RuleError, OSError, UnicodeDecodeError) as exc:
        print(f"tlsprobe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    reports, failures = [], 0
    for i, path in enumerate(args.inputs):
        try:
            meta, had_sidecar = _load_meta(path, args.meta[i] if i < len(args.meta) else None)
        except (OSError, ValueError) as exc:
            print(f"tlsprobe: {path}: bad metadata: {exc}", file=sys.stderr)
            failures += 1
            continue
        if args.pid is not None:
            if meta.pid is None:
                print(f"tlsprobe: warning: {path}: no pid metadata, --pid filter not applied", file=sys.stderr)
            elif meta.pid not in args.pid:
                continue
        try:
            with open(path, "rb") as fh:
                data = fh.read()
            report = analyze_bytes(data, meta, opts)
        except (OSError, PeError) as exc:
            print(f"tlsprobe: {path}: {exc}", file=sys.stderr)
            failures += 1
            continue
        for w in report.warnings:
            print(f"tlsprobe: warning: {path}: {w}", file=sys.stderr)
        sys.stdout.write(render_text(report))
        reports.append(report)

    if args.json:
        with open(args.json, "wb") as fh:
            fh.write(render_json(reports))
    if failures and failures == len(args.inputs):
        return EXIT_ALL_FAILED
    return EXIT_OK


def main() -> None:
    sys.exit(run())
