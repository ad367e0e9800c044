"""Disassemble the reconstructed listing bytes with capstone and store the result.

Writes tests/fixtures/figure_reference.json; the package never imports capstone.

    python tools/gen_figure_reference.py
"""

import json
import pathlib
import sys

import capstone

ROOT = pathlib.Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

import figures  # noqa: E402

LISTINGS = {
    "fig4": (figures.FIG4_CODE, 0x401000, capstone.CS_MODE_32),
    "fig8": (figures.FIG8_CODE, figures.FIG8_BASE + figures.FIG8_RVA, capstone.CS_MODE_64),
    "fig11": (figures.FIG11_CODE, figures.FIG11_BASE + figures.FIG11_RVA, capstone.CS_MODE_64),
}


def main() -> None:
    doc = {"reference": f"capstone {capstone.__version__}", "listings": {}}
    for name, (code, va, mode) in LISTINGS.items():
        md = capstone.Cs(capstone.CS_ARCH_X86, mode)
        lines = [f"0x{i.address:x}: {i.mnemonic} {i.op_str}".rstrip() for i in md.disasm(code, va)]
        doc["listings"][name] = {"hex": code.hex(), "address": hex(va), "lines": lines}
    out = ROOT / "tests" / "fixtures" / "figure_reference.json"
    out.write_text(json.dumps(doc, indent=1) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
