"""
Regex matching over rendered disassembly and a small YARA-compatible rule engine.

Supported rule language::

    rule NAME [: tag ...] {
        meta:      key = "value" ...          (ignored)
        strings:   $id = "text" [nocase]
                   $id = { 64 a1 ?? 0? ... }
        condition: any of them | all of them | $a and (not $b or $c) | true | false
    }

Anything else the full language offers raises :class:`UnsupportedConstruct`.
"""

from __future__ import annotations

import dataclasses
import enum
import re
from typing import Optional, Sequence

from .disasm import Instruction
from .heuristics import Category, Finding


class RuleError(ValueError):
    pass


class InvalidRegex(RuleError):
    pass


class ParseError(RuleError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnsupportedConstruct(RuleError):
    def __init__(self, construct: str, line: int = 0):
        where = f" (line {line})" if line else ""
        super().__init__(f"unsupported construct: {construct}{where}")
        self.construct = construct
        self.line = line


# -- regex -----------------------------------------------------------------------

def compile_regex(pattern: str) -> "re.Pattern":
    try:
        return re.compile(pattern)
    except re.error as exc:
        raise InvalidRegex(f"invalid regex {pattern!r}: {exc}") from exc


def instruction_line(insn: Instruction) -> str:
    return f"0x{insn.address:x}: {insn.text}"


def match_regex(insns: Sequence[Instruction], pattern) -> list:
    """Search ``pattern`` in each ``0x<addr>: <text>`` line on its own."""
    rx = pattern if isinstance(pattern, re.Pattern) else compile_regex(pattern)
    findings = []
    for k, insn in enumerate(insns):
        line = instruction_line(insn)
        if rx.search(line):
            findings.append(Finding(Category.REGEX_MATCH, f"Regex Match: {line}", k, insn.address))
    return findings


# -- rule model ------------------------------------------------------------------

class PatternKind(enum.Enum):
    TEXT = "text"
    TEXT_NOCASE = "text_nocase"
    HEX = "hex"


@dataclasses.dataclass(frozen=True)
class Pattern:
    id: str
    kind: PatternKind
    bytes: bytes
    mask: Optional[bytes] = None  # HEX only: 0xff = exact, 0x00 = wild, 0xf0/0x0f = nibble
    text: Optional[str] = None

    def regex(self) -> "re.Pattern":
        if self.kind is PatternKind.HEX:
            parts = []
            for value, mask in zip(self.bytes, self.mask):
                if mask == 0xFF:
                    parts.append(re.escape(bytes([value])))
                elif mask == 0:
                    parts.append(b".")
                else:
                    options = sorted({(value & mask) | b for b in range(256) if b & mask == 0})
                    parts.append(b"[" + b"".join(re.escape(bytes([o])) for o in options) + b"]")
            body = b"".join(parts)
            flags = re.DOTALL
        else:
            body = re.escape(self.bytes)
            flags = re.DOTALL | (re.IGNORECASE if self.kind is PatternKind.TEXT_NOCASE else 0)
        return re.compile(b"(?=(" + body + b"))", flags)

    def find_all(self, data: bytes) -> list:
        return [m.start() for m in self.regex().finditer(data)]


@dataclasses.dataclass(frozen=True)
class Rule:
    name: str
    strings: tuple
    condition: tuple  # expression tree, see _eval

    def evaluate(self, data: bytes) -> tuple:
        """(satisfied, first match offset or None)."""
        offsets = {p.id: p.find_all(data) for p in self.strings}
        hit = {pid: bool(v) for pid, v in offsets.items()}
        firsts = [v[0] for v in offsets.values() if v]
        return _eval(self.condition, hit), (min(firsts) if firsts else None)


@dataclasses.dataclass(frozen=True)
class RuleSet:
    rules: tuple = ()

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)


def _eval(node: tuple, hit: dict) -> bool:
    op = node[0]
    if op == "const":
        return node[1]
    if op == "ref":
        return hit[node[1]]
    if op == "any":
        return any(hit.values())
    if op == "all":
        return bool(hit) and all(hit.values())
    if op == "not":
        return not _eval(node[1], hit)
    if op == "and":
        return _eval(node[1], hit) and _eval(node[2], hit)
    return _eval(node[1], hit) or _eval(node[2], hit)


def match_rules(data: bytes, rules: RuleSet, base_va: int = 0) -> list:
    """One ``YARA Match`` finding per satisfied rule, anchored at its first match offset."""
    data = bytes(data)
    findings = []
    for rule in rules:
        ok, first = rule.evaluate(data)
        if ok:
            offset = first if first is not None else 0
            findings.append(Finding(Category.YARA_MATCH, f"YARA Match: rule {rule.name}",
                                    offset, base_va + offset))
    return findings


# -- tokenizer -------------------------------------------------------------------

_UNSUPPORTED_KEYWORDS = {
    "import": "module import",
    "include": "include directive",
    "global": "rule modifier",
    "private": "rule modifier",
    "for": "for loop",
    "at": "offset-qualified condition (at)",
    "in": "range-qualified condition (in)",
    "filesize": "filesize",
    "entrypoint": "entrypoint",
    "of": None,
    "wide": "string modifier wide",
    "ascii": "string modifier ascii",
    "fullword": "string modifier fullword",
    "xor": "string modifier xor",
    "base64": "string modifier base64",
    "base64wide": "string modifier base64wide",
    "matches": "matches operator",
    "contains": "contains operator",
    "defined": "defined operator",
}
_UNSUPPORTED_PUNCT = {
    "#": "count expression",
    "@": "offset expression",
    "!": "match length expression",
    "/": "regular expression string",
    "<": "comparison", ">": "comparison", "==": "comparison", "!=": "comparison",
    "+": "arithmetic", "-": "arithmetic", "*": "wildcard string set", "%": "arithmetic",
    ".": "module reference", "[": "indexing", ",": "string set",
}

_TOKEN_RX = re.compile(r"""
    (?P<ws>[ \t\r\f\v]+)
  | (?P<nl>\n)
  | (?P<line_comment>//[^\n]*)
  | (?P<block_comment>/\*.*?\*/)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<strid>\$[A-Za-z0-9_]*\*?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<number>0x[0-9A-Fa-f]+|\d+(?:KB|MB)?)
  | (?P<punct>==|!=|<=|>=|[{}():=#@!/<>+\-*%.\[\],|~^&])
""", re.VERBOSE | re.DOTALL)


@dataclasses.dataclass
class _Tok:
    kind: str
    value: str
    line: int


def _tokenize(text: str) -> list:
    toks = []
    pos, line = 0, 1
    while pos < len(text):
        if text[pos] == "{" and toks and toks[-1].kind == "punct" and toks[-1].value == "=":
            # hex string body: take everything up to the closing brace verbatim
            end = text.find("}", pos)
            if end < 0:
                raise ParseError("unterminated hex string", line)
            toks.append(_Tok("hex", text[pos + 1:end], line))
            line += text.count("\n", pos, end)
            pos = end + 1
            continue
        if text.startswith("/*", pos) and text.find("*/", pos + 2) < 0:
            raise ParseError("unterminated comment", line)
        m = _TOKEN_RX.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line)
        kind, value = m.lastgroup, m.group()
        if kind == "block_comment":
            line += value.count("\n")
        elif kind == "nl":
            line += 1
        elif kind == "line_comment" or kind == "ws":
            pass
        elif kind == "punct" and value == "/":
            raise UnsupportedConstruct(_UNSUPPORTED_PUNCT["/"], line)
        else:
            toks.append(_Tok(kind, value, line))
        pos = m.end()
    return toks


# -- parser ----------------------------------------------------------------------

_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", "\\": "\\", '"': '"'}


def _unescape(literal: str, line: int) -> bytes:
    body = literal[1:-1]
    out = bytearray()
    i = 0
    while i < len(body):
        c = body[i]
        if c != "\\":
            out += c.encode("utf-8")
            i += 1
            continue
        nxt = body[i + 1]
        if nxt in _ESCAPES:
            out += _ESCAPES[nxt].encode()
            i += 2
        elif nxt == "x" and re.fullmatch(r"[0-9A-Fa-f]{2}", body[i + 2:i + 4]):
            out.append(int(body[i + 2:i + 4], 16))
            i += 4
        else:
            raise ParseError(f"invalid escape sequence \\{nxt}", line)
    return bytes(out)


def _parse_hex(body: str, line: int) -> tuple:
    if "[" in body:
        raise UnsupportedConstruct("hex jump", line)
    if "|" in body or "(" in body:
        raise UnsupportedConstruct("hex alternation", line)
    if "~" in body:
        raise UnsupportedConstruct("hex negation", line)
    body = re.sub(r"//[^\n]*|/\*.*?\*/", " ", body, flags=re.DOTALL)
    digits = re.sub(r"\s+", "", body)
    if not digits or len(digits) % 2 or not re.fullmatch(r"[0-9A-Fa-f?]+", digits):
        raise ParseError("malformed hex string", line)
    values, masks = bytearray(), bytearray()
    for i in range(0, len(digits), 2):
        value = mask = 0
        for nibble, shift in ((digits[i], 4), (digits[i + 1], 0)):
            if nibble != "?":
                value |= int(nibble, 16) << shift
                mask |= 0xF << shift
        values.append(value)
        masks.append(mask)
    return bytes(values), bytes(masks)


class _Parser:
    def __init__(self, toks: list):
        self.toks = toks
        self.i = 0
        self.string_lines: dict = {}

    def peek(self) -> Optional[_Tok]:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def line(self) -> int:
        tok = self.peek()
        if tok is not None:
            return tok.line
        return self.toks[-1].line if self.toks else 1

    def next(self) -> _Tok:
        tok = self.peek()
        if tok is None:
            raise ParseError("unexpected end of input", self.line())
        self.i += 1
        return tok

    def expect(self, kind: str, value: Optional[str] = None) -> _Tok:
        tok = self.next()
        if tok.kind != kind or (value is not None and tok.value != value):
            self._unsupported(tok)
            want = value if value is not None else kind
            raise ParseError(f"expected {want!r}, found {tok.value!r}", tok.line)
        return tok

    def at(self, kind: str, value: Optional[str] = None) -> bool:
        tok = self.peek()
        return tok is not None and tok.kind == kind and (value is None or tok.value == value)

    @staticmethod
    def _unsupported(tok: _Tok) -> None:
        if tok.kind == "ident" and _UNSUPPORTED_KEYWORDS.get(tok.value):
            raise UnsupportedConstruct(_UNSUPPORTED_KEYWORDS[tok.value], tok.line)
        if tok.kind == "punct" and tok.value in _UNSUPPORTED_PUNCT:
            raise UnsupportedConstruct(_UNSUPPORTED_PUNCT[tok.value], tok.line)
        if tok.kind == "number":
            raise UnsupportedConstruct("numeric expression", tok.line)
        if tok.kind == "strid" and tok.value.endswith("*"):
            raise UnsupportedConstruct("wildcard string set", tok.line)

    # rules -------------------------------------------------------------------

    def ruleset(self) -> RuleSet:
        rules, names = [], set()
        while self.peek() is not None:
            rule = self.rule()
            if rule.name in names:
                raise ParseError(f"duplicate rule name {rule.name!r}", self.line())
            names.add(rule.name)
            rules.append(rule)
        return RuleSet(tuple(rules))

    def rule(self) -> Rule:
        self.expect("ident", "rule")
        name = self.expect("ident").value
        if self.at("punct", ":"):
            self.next()
            while self.at("ident"):
                self.next()
        self.expect("punct", "{")
        if self.at("ident", "meta"):
            self.meta()
        strings = self.strings() if self.at("ident", "strings") else []
        self.expect("ident", "condition")
        self.expect("punct", ":")
        ids = [p.id for p in strings]
        self.referenced = set()
        self.uses_them = False
        cond = self.expr(ids)
        self.expect("punct", "}")
        if not self.uses_them:
            unused = [pid for pid in ids if pid not in self.referenced]
            if unused:
                raise ParseError(f"unreferenced string {unused[0]} in rule {name}", self.string_lines[unused[0]])
        return Rule(name, tuple(strings), cond)

    def meta(self) -> None:
        self.next()
        self.expect("punct", ":")
        while self.at("ident") and self.peek().value not in ("strings", "condition"):
            self.next()
            self.expect("punct", "=")
            tok = self.next()
            if tok.kind not in ("string", "number", "ident"):
                raise ParseError(f"bad meta value {tok.value!r}", tok.line)

    def strings(self) -> list:
        self.next()
        self.expect("punct", ":")
        out, seen = [], set()
        while self.at("strid"):
            tok = self.next()
            if tok.value.endswith("*"):
                raise UnsupportedConstruct("wildcard string set", tok.line)
            if tok.value == "$":
                raise UnsupportedConstruct("anonymous string", tok.line)
            if tok.value in seen:
                raise ParseError(f"duplicate string identifier {tok.value}", tok.line)
            seen.add(tok.value)
            self.string_lines[tok.value] = tok.line
            self.expect("punct", "=")
            value = self.next()
            if value.kind == "hex":
                data, mask = _parse_hex(value.value, value.line)
                out.append(Pattern(tok.value, PatternKind.HEX, data, mask))
                self._no_modifiers(allow_nocase=False)
            elif value.kind == "string":
                data = _unescape(value.value, value.line)
                if not data:
                    raise ParseError(f"empty string {tok.value}", value.line)
                nocase = self._no_modifiers(allow_nocase=True)
                kind = PatternKind.TEXT_NOCASE if nocase else PatternKind.TEXT
                out.append(Pattern(tok.value, kind, data, text=data.decode("utf-8", "replace")))
            else:
                self._unsupported(value)
                raise ParseError(f"expected string or hex pattern after {tok.value}", value.line)
        if not out:
            raise ParseError("empty strings section", self.line())
        return out

    def _no_modifiers(self, allow_nocase: bool) -> bool:
        nocase = False
        while self.at("ident") and self.peek().value != "condition":
            tok = self.next()
            if tok.value == "nocase" and allow_nocase and not nocase:
                nocase = True
                continue
            if (_UNSUPPORTED_KEYWORDS.get(tok.value) or "").startswith("string modifier"):
                raise UnsupportedConstruct(_UNSUPPORTED_KEYWORDS[tok.value], tok.line)
            raise ParseError(f"unexpected modifier {tok.value!r}", tok.line)
        return nocase

    # conditions (precedence: not > and > or) ------------------------------------

    def expr(self, ids: list) -> tuple:
        node = self.conj(ids)
        while self.at("ident", "or"):
            self.next()
            node = ("or", node, self.conj(ids))
        return node

    def conj(self, ids: list) -> tuple:
        node = self.unary(ids)
        while self.at("ident", "and"):
            self.next()
            node = ("and", node, self.unary(ids))
        return node

    def unary(self, ids: list) -> tuple:
        if self.at("ident", "not"):
            self.next()
            return ("not", self.unary(ids))
        return self.atom(ids)

    def atom(self, ids: list) -> tuple:
        tok = self.next()
        if tok.kind == "punct" and tok.value == "(":
            node = self.expr(ids)
            self.expect("punct", ")")
            return self._no_trailing_qualifier(node)
        if tok.kind == "strid":
            if tok.value.endswith("*"):
                raise UnsupportedConstruct("wildcard string set", tok.line)
            if tok.value not in ids:
                raise ParseError(f"undefined string identifier {tok.value}", tok.line)
            self.referenced.add(tok.value)
            return self._no_trailing_qualifier(("ref", tok.value))
        if tok.kind == "ident" and tok.value in ("any", "all"):
            self.expect("ident", "of")
            self.expect("ident", "them")
            if not ids:
                raise ParseError("'them' used in a rule without strings", tok.line)
            self.uses_them = True
            return self._no_trailing_qualifier((tok.value,))
        if tok.kind == "ident" and tok.value in ("true", "false"):
            return self._no_trailing_qualifier(("const", tok.value == "true"))
        if tok.kind == "ident" and tok.value == "none":
            raise UnsupportedConstruct("none of", tok.line)
        if tok.kind == "ident" and self.at("punct", "."):
            raise UnsupportedConstruct("module reference", tok.line)
        if tok.kind == "ident" and self.at("punct", "("):
            raise UnsupportedConstruct("function call", tok.line)
        self._unsupported(tok)
        raise ParseError(f"unexpected token {tok.value!r} in condition", tok.line)

    def _no_trailing_qualifier(self, node: tuple) -> tuple:
        tok = self.peek()
        if tok is not None and tok.kind != "hex":
            if tok.kind == "ident" and tok.value in ("at", "in", "matches", "contains"):
                self._unsupported(tok)
            if tok.kind == "punct" and tok.value in _UNSUPPORTED_PUNCT and tok.value not in ("/",):
                self._unsupported(tok)
        return node


def parse_rules(text: str) -> RuleSet:
    """Parse a rule file into a :class:`RuleSet` (empty input gives an empty set)."""
    return _Parser(_tokenize(text)).ruleset()


def load_rules(path) -> RuleSet:
    with open(path, encoding="utf-8") as fh:
        return parse_rules(fh.read())
