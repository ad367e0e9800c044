"""Byte-level reconstructions of the published example listings, plus forge helpers."""

from tlsprobe.forge import ForgeSpec, SectionSpec, TlsSpec, forge
from tlsprobe.pe import Arch, Layout

# 32-bit callback: 38 bytes of code, int3 padding, then the next function's prologue
FIG4_CODE = bytes.fromhex(
    "64a12c000000"      # mov eax, dword ptr fs:[0x2c]
    "6a00"              # push 0
    "6810214000"        # push 0x402110
    "6810214000"        # push 0x402110
    "8b00"              # mov eax, dword ptr [eax]
    "6a00"              # push 0
    "c740041f020000"    # mov dword ptr [eax + 4], 0x21f
    "ff1598204000"      # call dword ptr [0x402098]
    "c20c00"            # ret 0xc
    + "cc" * 10
    + "64a12c0000008b00ff70046820214000"
)
FIG4_LINES = [
    "0x401000: mov eax, dword ptr fs:[0x2c]",
    "0x401006: push 0",
    "0x401008: push 0x402110",
    "0x40100d: push 0x402110",
    "0x401012: mov eax, dword ptr [eax]",
    "0x401014: push 0",
    "0x401016: mov dword ptr [eax + 4], 0x21f",
    "0x40101d: call dword ptr [0x402098]",
    "0x401023: ret 0xc",
]
FIG4_ADDRESSES = [0x401000, 0x401006, 0x401008, 0x40100D, 0x401012, 0x401014, 0x401016, 0x40101D, 0x401023]

# 64-bit anti-debug sample, as far as the hex dump reaches complete instructions
FIG8_CODE = bytes.fromhex(
    "83ec20"                # sub esp, 0x20
    "488b05b1bd0000"        # mov rax, qword ptr [rip + 0xbdb1]
    "ffd0"                  # call rax
    "4883c420"              # add rsp, 0x20
    "5d" "c3"               # pop rbp; ret
    "55" "4889e5"           # push rbp; mov rbp, rsp
    "cc" "90"               # int3; nop
    "5d" "c3"               # pop rbp; ret
    "55" "4889e5"           # push rbp; mov rbp, rsp
    "4883ec30"              # sub rsp, 0x30
    "48894d10"              # mov qword ptr [rbp + 0x10], rcx
    "895518"                # mov dword ptr [rbp + 0x18], edx
    "4c894520"              # mov qword ptr [rbp + 0x20], r8
    "837d1801"              # cmp dword ptr [rbp + 0x18], 1
    "0f85ac000000"          # jne
    "c7056aab000001000000"  # mov dword ptr [rip + 0xab6a], 1
    "e8b5ffffff"            # call (rva 0x1480 when placed at rva 0x1485)
    "8945fc"                # mov dword ptr [rbp - 4], eax
    "e8c4ffffff"            # call
    "488d05267b0000"        # lea rax, [rip + 0x7b26]
    "4889c2"                # mov rdx, rax
    "488d051e7b0000"        # lea rax, [rip + 0x7b1e]
    "4889c1"                # mov rcx, rax
)
FIG8_BASE = 0x7FF69AC00000
FIG8_RVA = 0x1485

# 64-bit NOP-sled function reached through a call; 64 bytes exactly
FIG11_CODE = bytes.fromhex(
    "83ec20"            # sub esp, 0x20
    "909090"            # nop x3
    "87c087c0"          # xchg eax, eax x2
    "909090"
    "89ff89ff"          # mov edi, edi x2
    "909090"
    "488d0566b70000"    # lea rax, [rip + 0xb766]
    "4889c2"            # mov rdx, rax
    "488b0526d80b00"    # mov rax, qword ptr [rip + 0xbd826]
    "4889c1"            # mov rcx, rax
    "e81ef20a00"        # call rva 0xb06d0
    "4889c1"            # mov rcx, rax
    "488b0524d80b00"    # mov rax, qword ptr [rip + 0xbd824]
    "4889c2"            # mov rdx, rax
    "e8ec050700"        # call rva 0x71ab0
    "90"                # nop
)
FIG11_BASE = 0x7FF64FA10000
FIG11_RVA = 0x1485

# a framed x64 callback that calls the function above, followed by the next function
FIG11_CALLER_PROLOGUE = bytes.fromhex(
    "55" "4889e5" "4883ec20"    # push rbp; mov rbp, rsp; sub rsp, 0x20
    "48894d10" "895518" "4c894520"  # spill rcx, edx, r8 to the home area
)
FIG11_CALLER_TAIL = bytes.fromhex(
    "4883c420" "5d" "c3"        # add rsp, 0x20; pop rbp; ret
    "55" "4889e5" "4883ec20" "48894d10" "895518" "4c894520"
    "8b4518" "4883c420" "5d" "c3"
    "55" "4889e5" "5d" "c3"
)

EMPTY_TABLE_SENTENCE = ("The process has a non-empty TLS callback table, but no TLS callback "
                        "procedures could be located within the process.")


def fig4_spec(layout=Layout.FILE) -> ForgeSpec:
    return ForgeSpec(
        arch=Arch.X86, image_base=0x400000, layout=layout,
        sections=(SectionSpec(".text", 0x1000, 0x200), SectionSpec(".rdata", 0x2000, 0x400)),
        tls=TlsSpec(callback_rvas=(0x1000,), directory_rva=0x2180),
        callback_code={0x1000: FIG4_CODE},
    )


def fig4_image(layout=Layout.FILE) -> bytes:
    return forge(fig4_spec(layout))


def fig8_image(layout=Layout.FILE) -> bytes:
    return forge(ForgeSpec(
        arch=Arch.X64, image_base=FIG8_BASE, layout=layout,
        sections=(SectionSpec(".text", 0x1000, 0x1000),),
        tls=TlsSpec(callback_rvas=(FIG8_RVA,)),
        callback_code={FIG8_RVA: FIG8_CODE},
    ))


def _call_rel32(from_rva: int, to_rva: int) -> bytes:
    return b"\xe8" + ((to_rva - (from_rva + 5)) & 0xFFFFFFFF).to_bytes(4, "little")


def fig11_image(layout=Layout.FILE) -> bytes:
    """A callback at rva 0x1000 calls the NOP-sled function at 0x1485.

    The code section's virtual size covers rva 0xb06d0 so the inner calls
    land inside the image.
    """
    callback = FIG11_CALLER_PROLOGUE + _call_rel32(0x1000 + len(FIG11_CALLER_PROLOGUE), FIG11_RVA) + FIG11_CALLER_TAIL
    assert len(callback) == 64
    return forge(ForgeSpec(
        arch=Arch.X64, image_base=FIG11_BASE, layout=layout,
        sections=(SectionSpec(".text", 0x1000, 0x1000, virtual_size=0xC0000),),
        tls=TlsSpec(callback_rvas=(0x1000,)),
        callback_code={0x1000: callback, FIG11_RVA: FIG11_CODE},
    ))


def fig9_image(all_out_of_image: bool = False) -> bytes:
    """TLS directory present but no resolvable callback."""
    pointers = (0x10, 0x7FFFFFFF0000) if all_out_of_image else (0,)
    return forge(ForgeSpec(
        arch=Arch.X64, image_base=0x140000000,
        sections=(SectionSpec(".text", 0x1000, 0x200),),
        tls=TlsSpec(raw_pointers=pointers, include_terminator=all_out_of_image),
    ))
