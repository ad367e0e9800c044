import random

from hypothesis import given, strategies as st

from tlsprobe.disasm import decode
from tlsprobe.forge import ForgeSpec, ImportSpec, SectionSpec, TlsSpec, forge
from tlsprobe.pe import Arch, Layout, parse_image
from tlsprobe.resolver import annotate, follow_call_targets, memory_slot
from tlsprobe.tls import extract_callbacks

import figures

BASE = 0x400000


def call(from_rva, to_rva):
    return b"\xe8" + ((to_rva - (from_rva + 5)) & 0xFFFFFFFF).to_bytes(4, "little")


def build(code, imports=(), arch=Arch.X86, layout=Layout.FILE, text_raw=0x1000, text_vsize=None):
    spec = ForgeSpec(arch=arch, image_base=BASE if arch is Arch.X86 else 0x140000000, layout=layout,
                     sections=(SectionSpec(".text", 0x1000, text_raw, virtual_size=text_vsize),
                               SectionSpec(".rdata", 0x1000 + max(text_raw, text_vsize or 0), 0x400)),
                     tls=TlsSpec(callback_rvas=(0x1000,)), imports=imports, callback_code=code)
    img = parse_image(forge(spec)).with_imports()
    [cb] = extract_callbacks(img).callbacks
    cb.instructions = decode(cb.raw_bytes, cb.va, img.arch)
    return img, cb


def test_fig11_unknown_api_labels():
    insns = decode(figures.FIG11_CODE, figures.FIG11_BASE + figures.FIG11_RVA, Arch.X64)
    labels = annotate(insns, None, figures.FIG11_BASE, 0xC1000)
    assert [label for _, label in labels] == ["Unknown_API_0xb06d0", "Unknown_API_0x71ab0"]
    assert insns[labels[0][0]].text == f"call 0x{figures.FIG11_BASE + 0xb06d0:x}"


def test_iat_slot_label():
    img, cb = build({0x1000: figures.FIG4_CODE}, imports=(ImportSpec("KERNEL32.dll", "ExitProcess", 0x2098),))
    labels = annotate(cb.instructions, img.imports, img.image_base, img.size_of_image, img)
    assert labels == [(7, "KERNEL32.dll!ExitProcess")]


def test_unknown_slot_unlabelled_by_default():
    img, cb = build({0x1000: figures.FIG4_CODE})
    assert annotate(cb.instructions, img.imports, img.image_base, img.size_of_image, img) == []
    assert annotate(cb.instructions, img.imports, img.image_base, img.size_of_image, img,
                    label_unknown_slots=True) == [(7, "Unknown_API_0x2098")]


def test_register_call_unlabelled():
    insns = decode(bytes.fromhex("ffd0"), 0x140001000, Arch.X64)
    assert annotate(insns, None, 0x140000000, 0x3000) == []


def test_rip_relative_slot():
    # call qword ptr [rip + d] at rva 0x1000 reading slot rva 0x2010
    disp = 0x2010 - (0x1000 + 6)
    code = b"\xff\x15" + disp.to_bytes(4, "little")
    img, cb = build({0x1000: code}, imports=(ImportSpec("ntdll.dll", "NtClose", 0x2010),), arch=Arch.X64)
    assert memory_slot(cb.instructions[0]) == 0x140002010
    assert annotate(cb.instructions, img.imports, img.image_base, img.size_of_image, img) == [(0, "ntdll.dll!NtClose")]


def test_out_of_image_direct_target_unlabelled():
    insns = decode(call(0x1000, 0x100000), BASE + 0x1000, Arch.X86)
    assert annotate(insns, None, BASE, 0x3000) == []


def thunk_image(layout=Layout.FILE):
    # callback calls a stub "jmp dword ptr [0x402098]" at rva 0x1100
    stub = b"\xff\x25" + (BASE + 0x2098).to_bytes(4, "little")
    return build({0x1000: call(0x1000, 0x1100) + b"\xc3", 0x1100: stub}, layout=layout,
                 imports=(ImportSpec("KERNEL32.dll", "ExitProcess", 0x2098),))


def test_thunk_stub_resolves_to_import():
    img, cb = thunk_image()
    assert annotate(cb.instructions, img.imports, img.image_base, img.size_of_image, img) == [
        (0, "KERNEL32.dll!ExitProcess")]


def test_thunk_stub_not_followed():
    img, cb = thunk_image(Layout.MEMORY)
    assert follow_call_targets(img, cb, depth_limit=3) == []


def chain_image():
    # A (callback) -> B twice; B -> C; C -> A
    code = {
        0x1000: call(0x1000, 0x1100) + call(0x1005, 0x1100) + b"\xc3",
        0x1100: call(0x1100, 0x1200) + b"\xc3",
        0x1200: call(0x1200, 0x1000) + b"\xc3",
    }
    return build(code)


def test_chain_depth_two():
    img, cb = chain_image()
    out = follow_call_targets(img, cb, depth_limit=2)
    assert [(a.caller_va, a.target_va, a.depth) for a in out] == [(0x401000, 0x401100, 1), (0x401100, 0x401200, 2)]
    assert all(a.root_va == cb.va for a in out)
    assert out[0].header == "Disassembling call target at address: 0x401100"


def test_chain_depth_one_and_zero():
    img, cb = chain_image()
    assert [a.target_va for a in follow_call_targets(img, cb, depth_limit=1)] == [0x401100]
    assert follow_call_targets(img, cb, depth_limit=0) == []


def test_cycle_back_to_callback_terminates():
    img, cb = chain_image()
    out = follow_call_targets(img, cb, depth_limit=10)
    assert [a.target_va for a in out] == [0x401100, 0x401200]


def test_unreadable_target_recorded_with_warning():
    # .text is 0x200 bytes on disk but 0x2000 in memory; the target has no file backing
    img, cb = build({0x1000: call(0x1000, 0x2800) + b"\xc3"}, text_raw=0x200, text_vsize=0x2000)
    [a] = follow_call_targets(img, cb)
    assert a.target_va == BASE + 0x2800
    assert a.instructions == [] and a.warnings


def test_target_findings_use_heuristics():
    # 64-byte window: four nops then a run of "mov eax, ebx" (not NOP-equivalent)
    body = b"\x90" * 4 + b"\x89\xd8" * 30
    img, cb = build({0x1000: call(0x1000, 0x1100) + b"\xc3", 0x1100: body})
    [a] = follow_call_targets(img, cb)
    assert [f.message for f in a.findings] == ["NOP Sled Detected: 4 consecutive NOPs at offset 0"]


@given(st.integers(0, 4), st.lists(st.integers(0, 5), min_size=6, max_size=6), st.data())
def test_depth_limit_and_visit_once(depth_limit, fanout_seed, data):
    # random call graph over six functions at 0x40-byte spacing
    rvas = [0x1000 + 0x40 * k for k in range(6)]
    code = {}
    for k, rva in enumerate(rvas):
        targets = data.draw(st.lists(st.sampled_from(rvas), max_size=3))
        body = b"".join(call(rva + 5 * j, t) for j, t in enumerate(targets)) + b"\xc3"
        code[rva] = body
    img, cb = build(code)
    out = follow_call_targets(img, cb, depth_limit=depth_limit)
    seen = [a.target_va for a in out]
    assert len(seen) == len(set(seen)) and cb.va not in seen
    assert all(1 <= a.depth <= depth_limit for a in out)


def test_annotation_soundness_random_imports():
    rng = random.Random(3)
    for _ in range(30):
        names = rng.sample(["ExitProcess", "Sleep", "VirtualAlloc", "GetProcAddress", "#7", "#42"], 4)
        slots = [0x2100 + 4 * k for k in range(4)]
        imports = tuple(ImportSpec("KERNEL32.dll", n, s) for n, s in zip(names, slots))
        code = b"".join(b"\xff\x15" + (BASE + s).to_bytes(4, "little") for s in rng.sample(slots, 4)) + b"\xc3"
        img, cb = build({0x1000: code}, imports=imports)
        expected = {BASE + s: f"KERNEL32.dll!{n}" for n, s in zip(names, slots)}
        for k, label in annotate(cb.instructions, img.imports, img.image_base, img.size_of_image, img):
            assert label == expected[memory_slot(cb.instructions[k])]
