"""Random forge specifications with known ground truth, and byte mutators for fuzzing."""

import random

from tlsprobe.forge import ForgeSpec, ImportSpec, SectionSpec, TlsSpec
from tlsprobe.pe import Arch, Layout

RAW_SIZES = (0x200, 0x400, 0x800, 0x1000)
SLOT = 0x10


def random_spec(rng: random.Random, arch=None, layout=None, n_callbacks=None):
    """(ForgeSpec, expected [(va, rva), ...]) for a valid randomized image."""
    arch = arch or rng.choice([Arch.X86, Arch.X64])
    layout = layout or rng.choice([Layout.FILE, Layout.MEMORY])
    if arch is Arch.X86:
        base = rng.randrange(0x40, 0x7000) << 16
    else:
        base = rng.randrange(0x1, 0x7FFF_FFFF) << 16
    sections, rva = [], 0x1000
    for k in range(rng.randint(1, 3)):
        raw = rng.choice(RAW_SIZES)
        sections.append(SectionSpec(f".s{k}", rva, raw))
        rva += (raw + 0xFFF) // 0x1000 * 0x1000
    slots = [s.rva + off for s in sections for off in range(0, s.raw_size, SLOT)]
    n = n_callbacks or rng.randint(1, 8)
    callback_rvas = rng.sample(slots, n)
    code = {r: bytes(rng.randrange(256) for _ in range(rng.randint(1, SLOT))) for r in callback_rvas}
    imports = ()
    if rng.random() < 0.3:
        imports = (ImportSpec("KERNEL32.dll", "ExitProcess", rva + 0x100),)
        sections.append(SectionSpec(".idata", rva, 0x200))
    tls = TlsSpec(callback_rvas=tuple(callback_rvas), store_as_rva_bug=rng.random() < 0.1)
    spec = ForgeSpec(arch=arch, image_base=base, layout=layout, sections=tuple(sections), tls=tls,
                     imports=imports, callback_code=code)
    return spec, [(base + r, r) for r in callback_rvas]


def mutate(data: bytes, rng: random.Random) -> bytes:
    """Truncate, flip bits, or both."""
    out = bytearray(data)
    mode = rng.choice(("truncate", "flip", "both"))
    if mode in ("flip", "both"):
        # bias flips toward headers, where they change parsing decisions
        for _ in range(rng.randint(1, 8)):
            limit = 0x400 if rng.random() < 0.7 else len(out)
            pos = rng.randrange(min(limit, len(out)))
            out[pos] ^= 1 << rng.randrange(8)
    if mode in ("truncate", "both"):
        out = out[:rng.randrange(len(out))]
    return bytes(out)


class CaseTimeout(Exception):
    pass


def _alarm(_signum, _frame):
    raise CaseTimeout()


def fuzz_case(data: bytes, limit: float = 5.0):
    """Run the whole pipeline on ``data``; returns None, or a description of the failure."""
    import signal
    import traceback

    from tlsprobe.pe import PeError
    from tlsprobe.pipeline import AnalysisOptions, TargetMeta, analyze_bytes
    from tlsprobe.report import render_json, render_text

    opts = AnalysisOptions(scan_suspicious=True, depth=2)
    previous = signal.signal(signal.SIGALRM, _alarm)
    signal.setitimer(signal.ITIMER_REAL, limit)
    try:
        report = analyze_bytes(data, TargetMeta.for_file("fuzz.bin"), opts)
        render_text(report)
        render_json(report)
    except PeError:
        return None
    except CaseTimeout:
        return f"exceeded {limit}s"
    except Exception:
        return traceback.format_exc()
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0)
        signal.signal(signal.SIGALRM, previous)
    return None
