"""Build tests/fixtures/rule_golden.json with yara-python as the reference engine.

Run offline; the package itself never imports yara.
"""

import argparse
import json
import random
from pathlib import Path

import yara

RULES = r"""
rule fig4_prologue { strings: $a = { 64 a1 2c 00 00 00 } condition: any of them }
rule push_wild { strings: $a = { 68 ?? 21 40 00 } condition: $a }
rule nibble_wild { strings: $a = { 6? 10 2? 40 } condition: $a }
rule text_cmd { strings: $a = "cmd.exe" condition: $a }
rule text_nocase { strings: $a = "KERNEL32" nocase condition: $a }
rule two_all { strings: $a = { cc cc } $b = { c3 } condition: all of them }
rule two_any { strings: $a = "http" $b = { ff d0 } condition: any of them }
rule and_not { strings: $a = { 90 90 } $b = { 87 c0 } condition: $a and not $b }
rule or_paren {
    strings:
        $a = { e8 ?? ?? ?? ?? }
        $b = "Hell"
        $c = { 31 c0 }
    condition: ($a or $b) and not $c
}
rule nested_not { strings: $a = { 00 00 00 00 } $b = { ff ff } condition: not ($a or $b) }
rule true_rule { condition: true }
rule false_or { strings: $a = { 4d 5a } condition: false or $a }
rule escape_text { strings: $a = "a\x00b" condition: $a }
rule quote_text { strings: $a = "say \"hi\"" condition: $a }
rule long_hex { strings: $a = { 48 8d 05 ?? ?? 00 00 48 89 c2 } condition: $a }
rule three_and {
    strings: $a = { 55 } $b = { 48 89 e5 } $c = { 5d c3 }
    condition: $a and $b and $c
}
rule precedence { strings: $a = { 41 } $b = { 42 } $c = { 43 } condition: $a or $b and $c }
rule double_not { strings: $a = { 7f } condition: not not $a }
rule mixed_case_nocase { strings: $a = "ExitProcess" nocase $b = { 00 ?? 00 } condition: $a or $b }
/* trailing comment */
rule text_and_hex { strings: $a = "dll" $b = { 2e ?? ?? ?? } condition: $a and $b } // done
"""

PLANTS = [
    bytes.fromhex("64a12c000000"), bytes.fromhex("6810214000"), bytes.fromhex("6a102440"), b"cmd.exe",
    b"kernel32", b"KeRnEl32", b"\xcc\xcc", b"\xc3", b"http", b"\xff\xd0", b"\x90\x90", b"\x87\xc0",
    bytes.fromhex("e812345678"), b"Hell", b"\x31\xc0", b"\xff\xff", b"MZ", b"a\x00b", b'say "hi"',
    bytes.fromhex("488d05aabb00004889c2"), b"\x55", bytes.fromhex("4889e5"), b"\x5d\xc3", b"A", b"B",
    b"C", b"\x7f", b"exitprocess", b".dll",
]

CONJUNCTIONS = [
    [],  # buffer 0 is replaced by zeros
    [bytes.fromhex("64a12c000000")], [bytes.fromhex("6877214000")], [bytes.fromhex("6a102a40")],
    [b"cmd.exe"], [b"Kernel32"], [b"\xcc\xcc", b"\xc3"], [b"http"], [b"\x90\x90"],
    [b"Hell"], [b"\x31\xc0", b"Hell"], [b"MZ"], [b"a\x00b"], [b'say "hi"'],
    [bytes.fromhex("488d05aabb00004889c2")], [b"\x55", bytes.fromhex("4889e5"), b"\x5d\xc3"],
    [b"B", b"C"], [b"\x7f"], [b"EXITPROCESS"], [b"x.dll"],
]


def make_buffers(rng: random.Random, count: int) -> list:
    buffers = []
    for i in range(count):
        # printable-ish noise keeps accidental matches of the binary patterns rare
        size = rng.randint(16, 96)
        buf = bytearray(rng.choice(b"qrstuvwxyz0123456789") for _ in range(size))
        for plant in rng.sample(PLANTS, rng.randint(0, 4)):
            at = rng.randint(0, max(0, len(buf) - len(plant)))
            buf[at:at + len(plant)] = plant
        # every rule's requirements show up intact in at least one buffer
        buf += b"-".join(CONJUNCTIONS[i % len(CONJUNCTIONS)])
        if i == 0:
            buf = bytearray(64)  # all zeros
        buffers.append(bytes(buf))
    return buffers


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=8)
    ap.add_argument("--count", type=int, default=20)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests/fixtures/rule_golden.json"))
    args = ap.parse_args()
    compiled = yara.compile(source=RULES)
    names = [line.split()[1] for line in RULES.splitlines() if line.startswith("rule ")]
    buffers = make_buffers(random.Random(args.seed), args.count)
    cases = []
    for buf in buffers:
        matched = sorted(m.rule for m in compiled.match(data=buf))
        cases.append({"hex": buf.hex(), "matches": matched})
    doc = {"reference": f"yara-python {yara.__version__} (libyara {yara.YARA_VERSION})",
           "seed": args.seed, "rules": RULES, "rule_names": names, "cases": cases}
    Path(args.out).write_text(json.dumps(doc, indent=1) + "\n")
    print(f"wrote {len(cases)} buffers x {len(names)} rules to {args.out}")


if __name__ == "__main__":
    main()
