"""
Synthesize small PE images with chosen sections, TLS callbacks and imports.

``forge(spec)`` is deterministic.  Anything the ForgeSpec leaves unplaced (TLS
directory, callback array, import tables) goes into an extra ``.rdata``
section appended after the last declared one; ``spec.resolved()`` exposes
the final placement so tests can compare parsed output against it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import struct
import sys
from typing import Optional

from .pe import Arch, Layout

FILE_ALIGNMENT = 0x200
SECTION_ALIGNMENT = 0x1000
E_LFANEW = 0x80
DEFAULT_CHARACTERISTICS = 0xE0000060
DEFAULT_BASE = {Arch.X86: 0x400000, Arch.X64: 0x140000000}
AUX_SECTION_NAME = ".rdata"


class InconsistentSpec(ValueError):
    pass


def _align(value: int, alignment: int) -> int:
    return (value + alignment - 1) // alignment * alignment


@dataclasses.dataclass(frozen=True)
class SectionSpec:
    name: str
    rva: int
    raw_size: int
    content: bytes = b""
    virtual_size: Optional[int] = None  # defaults to raw_size
    characteristics: int = DEFAULT_CHARACTERISTICS

    @property
    def vsize(self) -> int:
        return self.raw_size if self.virtual_size is None else self.virtual_size


@dataclasses.dataclass(frozen=True)
class TlsSpec:
    callback_rvas: tuple = ()
    include_terminator: bool = True
    store_as_rva_bug: bool = False
    directory_rva: Optional[int] = None
    array_rva: Optional[int] = None
    # written verbatim instead of image_base + rva (for out-of-image pointers)
    raw_pointers: Optional[tuple] = None
    characteristics: int = 0


@dataclasses.dataclass(frozen=True)
class ImportSpec:
    dll: str
    function: str  # "#123" forges an ordinal import
    iat_slot_rva: int


@dataclasses.dataclass(frozen=True)
class ForgeSpec:
    arch: Arch = Arch.X86
    image_base: Optional[int] = None
    layout: Layout = Layout.FILE
    sections: tuple = ()
    tls: Optional[TlsSpec] = None
    imports: tuple = ()
    callback_code: dict = dataclasses.field(default_factory=dict)
    import_directory_rva: Optional[int] = None

    @property
    def base(self) -> int:
        return DEFAULT_BASE[self.arch] if self.image_base is None else self.image_base

    @property
    def pointer_size(self) -> int:
        return self.arch.pointer_size

    @property
    def tls_directory_size(self) -> int:
        return 0x18 if self.arch is Arch.X86 else 0x28

    def resolved(self) -> "ForgeSpec":
        return _resolve(self)[0]

    # JSON ------------------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "ForgeSpec":
        num = lambda v: int(v, 0) if isinstance(v, str) else v  # noqa: E731
        opt = lambda v: None if v is None else num(v)  # noqa: E731
        sections = tuple(
            SectionSpec(s["name"], num(s["rva"]), num(s["raw_size"]), bytes.fromhex(s.get("content", "")),
                        opt(s.get("virtual_size")), num(s.get("characteristics", DEFAULT_CHARACTERISTICS)))
            for s in d.get("sections", []))
        tls = None
        if d.get("tls") is not None:
            t = d["tls"]
            raw = t.get("raw_pointers")
            tls = TlsSpec(tuple(num(r) for r in t.get("callback_rvas", [])),
                          t.get("include_terminator", True), t.get("store_as_rva_bug", False),
                          opt(t.get("directory_rva")), opt(t.get("array_rva")),
                          None if raw is None else tuple(num(r) for r in raw),
                          num(t.get("characteristics", 0)))
        imports = tuple(ImportSpec(i["dll"], i["function"], num(i["iat_slot_rva"]))
                        for i in d.get("imports", []))
        code = {num(k): bytes.fromhex(v) for k, v in d.get("callback_code", {}).items()}
        return cls(Arch(d.get("arch", "x86")), opt(d.get("image_base")), Layout(d.get("layout", "file")),
                   sections, tls, imports, code, opt(d.get("import_directory_rva")))


class _Image:
    """Sparse RVA-addressed byte store that rejects conflicting writes."""

    def __init__(self):
        self.data: dict = {}

    def put(self, rva: int, blob: bytes, what: str) -> None:
        for k, b in enumerate(blob):
            prev = self.data.get(rva + k)
            if prev is not None and prev != b:
                raise InconsistentSpec(f"{what} at rva 0x{rva:x} overlaps other content at 0x{rva + k:x}")
            self.data[rva + k] = b


def _check_sections(spec: ForgeSpec) -> None:
    prev_end = SECTION_ALIGNMENT
    for s in spec.sections:
        if s.rva % SECTION_ALIGNMENT or s.rva < SECTION_ALIGNMENT:
            raise InconsistentSpec(f"section {s.name} rva 0x{s.rva:x} not a multiple of 0x{SECTION_ALIGNMENT:x}")
        if s.rva < prev_end:
            raise InconsistentSpec(f"section {s.name} overlaps the previous section or is out of order")
        if len(s.content) > s.raw_size:
            raise InconsistentSpec(f"section {s.name} content exceeds raw_size")
        if len(s.name.encode()) > 8:
            raise InconsistentSpec(f"section name {s.name!r} longer than 8 bytes")
        prev_end = _align(s.rva + max(s.vsize, s.raw_size, 1), SECTION_ALIGNMENT)


def _covering(spec: ForgeSpec, rva: int, size: int = 1) -> Optional[SectionSpec]:
    for s in spec.sections:
        if s.rva <= rva and rva + size <= s.rva + s.raw_size:
            return s
    return None


def _import_blob(spec: ForgeSpec, at: int) -> tuple:
    """Descriptors, lookup tables and names laid out from rva ``at``.

    Returns ``(blob, iat_writes)`` where iat_writes maps slot rva -> thunk value.
    """
    ptr = spec.pointer_size
    ptr_fmt = "<I" if ptr == 4 else "<Q"
    ordinal_flag = 1 << (8 * ptr - 1)
    dlls: dict = {}
    for imp in spec.imports:
        dlls.setdefault(imp.dll, []).append(imp)
    for dll, imps in dlls.items():
        imps.sort(key=lambda i: i.iat_slot_rva)
        for a, b in zip(imps, imps[1:]):
            if b.iat_slot_rva != a.iat_slot_rva + ptr:
                raise InconsistentSpec(f"IAT slots for {dll} must be consecutive {ptr}-byte entries")

    desc_size = 20 * (len(dlls) + 1)
    cursor = at + desc_size
    ilt_rvas = {}
    for dll, imps in dlls.items():
        ilt_rvas[dll] = cursor
        cursor += ptr * (len(imps) + 1)
    strings = bytearray()
    name_rvas, hint_rvas = {}, {}
    for dll, imps in dlls.items():
        name_rvas[dll] = cursor + len(strings)
        strings += dll.encode() + b"\0"
        for imp in imps:
            if not imp.function.startswith("#"):
                if len(strings) % 2:
                    strings += b"\0"
                hint_rvas[(dll, imp.function)] = cursor + len(strings)
                strings += b"\0\0" + imp.function.encode() + b"\0"

    blob = bytearray()
    iat_writes = {}
    for dll, imps in dlls.items():
        blob += struct.pack("<IIIII", ilt_rvas[dll], 0, 0, name_rvas[dll], imps[0].iat_slot_rva)
    blob += bytes(20)
    for dll, imps in dlls.items():
        for imp in imps:
            if imp.function.startswith("#"):
                thunk = ordinal_flag | int(imp.function[1:], 0)
            else:
                thunk = hint_rvas[(dll, imp.function)]
            blob += struct.pack(ptr_fmt, thunk)
            iat_writes[imp.iat_slot_rva] = thunk
        blob += bytes(ptr)
        # the slot after each dll's last import terminates its IAT
        iat_writes.setdefault(imps[-1].iat_slot_rva + ptr, 0)
    blob += strings
    return bytes(blob), iat_writes


def _resolve(spec: ForgeSpec) -> tuple:
    """Fix every placement; returns (resolved spec, list of (rva, bytes, what) writes)."""
    _check_sections(spec)
    base, ptr = spec.base, spec.pointer_size
    ptr_fmt = "<I" if ptr == 4 else "<Q"
    writes: list = []
    floating: list = []  # blobs needing a home in the aux section: (key, bytes)
    tls = spec.tls

    for rva, code in sorted(spec.callback_code.items()):
        writes.append((rva, bytes(code), f"callback code 0x{rva:x}"))

    # TLS blobs are built once we know where the array and index slot live
    if tls is not None:
        for rva in tls.callback_rvas:
            if _covering(spec, rva) is None:
                raise InconsistentSpec(f"callback rva 0x{rva:x} is not covered by a section")
        pointers = tls.raw_pointers if tls.raw_pointers is not None else tuple(base + r for r in tls.callback_rvas)
        array = b"".join(struct.pack(ptr_fmt, p & ((1 << 8 * ptr) - 1)) for p in pointers)
        if tls.include_terminator:
            array += bytes(ptr)
    imports_needed = bool(spec.imports)

    # aux section: directory + index slot (+ array) and import tables when unplaced
    aux_items = []
    if tls is not None and tls.directory_rva is None:
        aux_items.append("tls")
    if tls is not None and tls.array_rva is None and tls.directory_rva is None:
        aux_items.append("array")
    if imports_needed and spec.import_directory_rva is None:
        aux_items.append("imports")

    sections = list(spec.sections)
    aux_rva = None
    if aux_items:
        last_end = max((_align(s.rva + max(s.vsize, s.raw_size, 1), SECTION_ALIGNMENT) for s in sections),
                       default=SECTION_ALIGNMENT)
        aux_rva = last_end
    cursor = aux_rva

    def take(size: int, align: int = 8) -> int:
        nonlocal cursor
        cursor = _align(cursor, align)
        at = cursor
        cursor += size
        return at

    dir_rva = array_rva = index_rva = import_rva = None
    if tls is not None:
        if tls.directory_rva is not None:
            dir_rva = tls.directory_rva
            index_rva = _align(dir_rva + spec.tls_directory_size, ptr)
            array_rva = tls.array_rva if tls.array_rva is not None else _align(index_rva + 4, ptr)
        else:
            dir_rva = take(spec.tls_directory_size)
            index_rva = take(4, ptr)
            array_rva = tls.array_rva if tls.array_rva is not None else take(max(len(array), ptr), ptr)
    if imports_needed:
        if spec.import_directory_rva is not None:
            import_rva = spec.import_directory_rva
            import_blob, iat_writes = _import_blob(spec, import_rva)
        else:
            import_rva = take(0, 4)
            import_blob, iat_writes = _import_blob(spec, import_rva)
            take(len(import_blob), 1)

    if aux_items:
        used = cursor - aux_rva
        aux_name = AUX_SECTION_NAME
        if any(s.name == aux_name for s in sections):
            aux_name = ".forge"
        sections.append(SectionSpec(aux_name, aux_rva, _align(max(used, 1), FILE_ALIGNMENT)))

    resolved_tls = None
    if tls is not None:
        resolved_tls = dataclasses.replace(tls, directory_rva=dir_rva, array_rva=array_rva)
    resolved = dataclasses.replace(spec, image_base=base, sections=tuple(sections), tls=resolved_tls,
                                   import_directory_rva=import_rva)

    if tls is not None:
        callbacks_field = array_rva if tls.store_as_rva_bug else base + array_rva
        if spec.arch is Arch.X86:
            directory = struct.pack("<IIIIII", 0, 0, base + index_rva, callbacks_field, 0, tls.characteristics)
        else:
            directory = struct.pack("<QQQQII", 0, 0, base + index_rva, callbacks_field, 0, tls.characteristics)
        writes.append((dir_rva, directory, "TLS directory"))
        writes.append((index_rva, bytes(4), "TLS index slot"))
        writes.append((array_rva, array, "TLS callback array"))
    if imports_needed:
        writes.append((import_rva, import_blob, "import tables"))
        for slot, thunk in sorted(iat_writes.items()):
            writes.append((slot, struct.pack(ptr_fmt, thunk), f"IAT slot 0x{slot:x}"))
    return resolved, writes


def _headers(spec: ForgeSpec, size_of_image: int, size_of_headers: int, pointers: list) -> bytes:
    x64 = spec.arch is Arch.X64
    dirs = [(0, 0)] * 16
    if spec.imports:
        dirs[1] = (spec.import_directory_rva, 20 * (len({i.dll for i in spec.imports}) + 1))
    if spec.tls is not None:
        dirs[9] = (spec.tls.directory_rva, spec.tls_directory_size)
    entry = spec.sections[0].rva if spec.sections else 0

    dos = bytearray(E_LFANEW)
    dos[0:2] = b"MZ"
    struct.pack_into("<I", dos, 0x3C, E_LFANEW)
    size_opt = 0xF0 if x64 else 0xE0
    file_header = struct.pack("<HHIIIHH", 0x8664 if x64 else 0x14C, len(spec.sections), 0, 0, 0, size_opt,
                              0x22 if x64 else 0x102)
    if x64:
        opt = struct.pack("<HBBIIIIIQIIHHHHHHIIIIHHQQQQII", 0x20B, 14, 0, 0, 0, 0, entry, 0,
                          spec.base, SECTION_ALIGNMENT, FILE_ALIGNMENT, 6, 0, 0, 0, 6, 0, 0,
                          size_of_image, size_of_headers, 0, 3, 0x8160,
                          0x100000, 0x1000, 0x100000, 0x1000, 0, 16)
    else:
        opt = struct.pack("<HBBIIIIIIIIIHHHHHHIIIIHHIIIIII", 0x10B, 14, 0, 0, 0, 0, entry, 0, 0,
                          spec.base, SECTION_ALIGNMENT, FILE_ALIGNMENT, 6, 0, 0, 0, 6, 0, 0,
                          size_of_image, size_of_headers, 0, 3, 0x8140,
                          0x100000, 0x1000, 0x100000, 0x1000, 0, 16)
    opt += b"".join(struct.pack("<II", va, size) for va, size in dirs)
    table = b""
    for s, ptr in zip(spec.sections, pointers):
        table += struct.pack("<8sIIIIIIHHI", s.name.encode(), s.vsize, s.rva, s.raw_size, ptr,
                             0, 0, 0, 0, s.characteristics)
    return bytes(dos) + b"PE\0\0" + file_header + opt + table


def forge(spec: ForgeSpec) -> bytes:
    """Emit PE bytes for ``spec`` in its requested layout."""
    if spec.layout not in (Layout.FILE, Layout.MEMORY):
        raise InconsistentSpec("layout must be FILE or MEMORY")
    resolved, writes = _resolve(spec)
    image = _Image()
    for s in resolved.sections:
        image.put(s.rva, s.content, f"section {s.name} content")
    for rva, blob, what in writes:
        if _covering(resolved, rva, len(blob)) is None:
            raise InconsistentSpec(f"{what} at rva 0x{rva:x} (+0x{len(blob):x}) lies outside section raw data")
        image.put(rva, blob, what)

    header_len = E_LFANEW + 4 + 20 + (0xF0 if spec.arch is Arch.X64 else 0xE0) + 40 * len(resolved.sections)
    size_of_headers = _align(header_len, FILE_ALIGNMENT)
    if resolved.sections and size_of_headers > resolved.sections[0].rva:
        raise InconsistentSpec("too many sections for the header region")
    size_of_image = _align(max((s.rva + max(s.vsize, s.raw_size) for s in resolved.sections),
                               default=size_of_headers), SECTION_ALIGNMENT)
    pointers, ptr = [], size_of_headers
    for s in resolved.sections:
        pointers.append(ptr)
        ptr += _align(s.raw_size, FILE_ALIGNMENT)
    headers = _headers(resolved, size_of_image, size_of_headers, pointers)

    if spec.layout is Layout.MEMORY:
        out = bytearray(size_of_image)
        out[:len(headers)] = headers
        for rva, b in image.data.items():
            out[rva] = b
    else:
        out = bytearray(ptr)
        out[:len(headers)] = headers
        for s, p in zip(resolved.sections, pointers):
            for k in range(s.raw_size):
                b = image.data.get(s.rva + k)
                if b is not None:
                    out[p + k] = b
    return bytes(out)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tlsprobe forge", description="Forge a PE image from a JSON spec.")
    parser.add_argument("--spec", required=True, help="JSON forge specification")
    parser.add_argument("--out", help="output file (default: stdout)")
    args = parser.parse_args(argv)
    try:
        with open(args.spec, encoding="utf-8") as fh:
            spec = ForgeSpec.from_dict(json.load(fh))
        data = forge(spec)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(data)
    else:
        sys.stdout.buffer.write(data)
    return 0
