"""Locate, disassemble and scan TLS callbacks in PE files and process dumps."""

from .disasm import Instruction, Operand, OperandKind, decode, render, resolve_rel_target
from .forge import ForgeSpec, ImportSpec, InconsistentSpec, SectionSpec, TlsSpec, forge
from .heuristics import Category, Finding, HeuristicConfig, scan
from .pe import Arch, Layout, PeError, PeImage, parse_image
from .pipeline import AnalysisOptions, AnalysisReport, TargetMeta, analyze_bytes, analyze_image
from .report import render_json, render_text
from .rules import match_regex, match_rules, parse_rules
from .tls import TlsStatus, extract_callbacks

__all__ = [
    "AnalysisOptions", "AnalysisReport", "Arch", "Category", "Finding", "ForgeSpec", "HeuristicConfig",
    "ImportSpec", "InconsistentSpec", "Instruction", "Layout", "Operand", "OperandKind", "PeError",
    "PeImage", "SectionSpec", "TargetMeta", "TlsSpec", "TlsStatus", "analyze_bytes", "analyze_image",
    "decode", "extract_callbacks", "forge", "match_regex", "match_rules", "parse_image", "parse_rules",
    "render", "render_json", "render_text", "resolve_rel_target", "scan",
]
