"""
Minimal PE32/PE32+ header parser.

Covers what TLS callback extraction needs: DOS/NT headers, the section
table, the 16 data directories and the import table.  Images can be laid
out as on disk (``FileLayout``) or as mapped by the loader
(``MemoryLayout``, e.g. a dumped process image).
"""

from __future__ import annotations

import dataclasses
import enum
import struct
from typing import Optional

MAX_SECTIONS = 96
MAX_IMPORT_DESCRIPTORS = 1024
MAX_THUNKS_PER_DLL = 4096
NUM_DATA_DIRECTORIES = 16

IMAGE_DIRECTORY_ENTRY_IMPORT = 1
IMAGE_DIRECTORY_ENTRY_TLS = 9

OPTIONAL_MAGIC_PE32 = 0x10B
OPTIONAL_MAGIC_PE32_PLUS = 0x20B


class PeError(ValueError):
    """Base class for PE parsing and translation failures."""


class NotPeError(PeError):
    """Missing 'MZ' or 'PE\\0\\0' signature."""


class TruncatedError(PeError):
    """A header extends past the end of the input."""


class UnsupportedMagicError(PeError):
    """Optional header magic is neither PE32 nor PE32+."""


class UnmappedError(PeError):
    """RVA is not covered by any section nor by the header region."""


class OutOfFileError(PeError):
    """Translated offset lies beyond the input bytes."""


class OutOfImageError(PeError):
    """VA lies outside [image_base, image_base + size_of_image)."""


class Arch(enum.Enum):
    X86 = "x86"
    X64 = "x64"

    @property
    def pointer_size(self) -> int:
        return 4 if self is Arch.X86 else 8


class Layout(enum.Enum):
    FILE = "file"
    MEMORY = "memory"
    AUTO = "auto"


@dataclasses.dataclass(frozen=True)
class SectionHeader:
    name: bytes
    virtual_address: int
    virtual_size: int
    pointer_to_raw_data: int
    size_of_raw_data: int
    characteristics: int

    @property
    def display_name(self) -> str:
        return self.name.rstrip(b"\0").decode("latin-1")

    @property
    def virtual_extent(self) -> int:
        # some linkers emit VirtualSize == 0
        return max(self.virtual_size, self.size_of_raw_data)

    def contains_rva(self, rva: int) -> bool:
        return self.virtual_address <= rva < self.virtual_address + self.virtual_extent


@dataclasses.dataclass(frozen=True)
class DataDirectoryEntry:
    virtual_address: int
    size: int

    @property
    def present(self) -> bool:
        return self.virtual_address != 0


@dataclasses.dataclass(frozen=True)
class IatMap:
    """IAT slot VA -> ``"dll!function"`` (or ``"dll!#ordinal"``)."""

    entries: dict = dataclasses.field(default_factory=dict)
    warnings: tuple = ()

    def get(self, va: int) -> Optional[str]:
        return self.entries.get(va)

    def __contains__(self, va: int) -> bool:
        return va in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def malformed(self) -> bool:
        return bool(self.warnings)


@dataclasses.dataclass(frozen=True, eq=True)
class PeImage:
    raw: bytes = dataclasses.field(repr=False)
    layout: Layout
    arch: Arch
    image_base: int
    size_of_image: int
    entry_point_rva: int
    size_of_headers: int
    sections: tuple
    data_directories: tuple
    imports: Optional[IatMap] = dataclasses.field(default=None, compare=False, repr=False)

    def with_image_base(self, image_base: int) -> "PeImage":
        return dataclasses.replace(self, image_base=image_base, imports=None)

    def with_imports(self) -> "PeImage":
        return dataclasses.replace(self, imports=parse_imports(self))

    # thin method aliases over the module functions
    def rva_to_offset(self, rva: int) -> int:
        return rva_to_offset(self, rva)

    def va_to_rva(self, va: int) -> int:
        return va_to_rva(self, va)

    def data_directory(self, index: int) -> DataDirectoryEntry:
        return data_directory(self, index)

    def read(self, offset: int, size: int) -> bytes:
        """Bytes at ``offset``, clamped to the input; never raises."""
        if offset < 0 or offset >= len(self.raw):
            return b""
        return self.raw[offset:offset + size]

    def read_rva(self, rva: int, size: int) -> bytes:
        return self.read(rva_to_offset(self, rva), size)


def _unpack(fmt: str, data: bytes, offset: int, what: str) -> tuple:
    size = struct.calcsize(fmt)
    if offset < 0 or offset + size > len(data):
        raise TruncatedError(f"{what} at 0x{offset:x} extends past end of input ({len(data)} bytes)")
    return struct.unpack_from(fmt, data, offset)


def parse_image(data: bytes, layout: Layout = Layout.AUTO) -> PeImage:
    """Parse PE headers from ``data``.

    With ``Layout.AUTO`` the image is treated as a file unless some section's
    raw extent runs past the input while its virtual extent still fits, which
    is what a loader-mapped dump looks like.  An input exactly ``SizeOfImage``
    long whose sections do not sit at their file offsets is also a dump.
    """
    data = bytes(data)
    if not data:
        raise NotPeError("empty input")
    if data[:2] != b"MZ":
        raise NotPeError("missing MZ signature")
    (e_lfanew,) = _unpack("<I", data, 0x3C, "e_lfanew")
    if e_lfanew + 4 > len(data):
        raise TruncatedError(f"e_lfanew 0x{e_lfanew:x} points past end of input")
    if data[e_lfanew:e_lfanew + 4] != b"PE\0\0":
        raise NotPeError("missing PE signature")

    file_header = e_lfanew + 4
    (_machine, num_sections, _ts, _symptr, _nsyms, size_opt, _chars) = _unpack(
        "<HHIIIHH", data, file_header, "file header")
    opt = file_header + 20
    (magic,) = _unpack("<H", data, opt, "optional header magic")
    if magic == OPTIONAL_MAGIC_PE32:
        arch = Arch.X86
        fields = _unpack("<HBBIIIIIIIIIHHHHHHIIIIHHIIIIII", data, opt, "optional header")
        entry_point, image_base = fields[6], fields[9]
        size_of_image, size_of_headers = fields[19], fields[20]
        num_dirs = fields[29]
        dir_offset = opt + 96
    elif magic == OPTIONAL_MAGIC_PE32_PLUS:
        arch = Arch.X64
        fields = _unpack("<HBBIIIIIQIIHHHHHHIIIIHHQQQQII", data, opt, "optional header")
        entry_point, image_base = fields[6], fields[8]
        size_of_image, size_of_headers = fields[18], fields[19]
        num_dirs = fields[28]
        dir_offset = opt + 112
    else:
        raise UnsupportedMagicError(f"optional header magic 0x{magic:x}")

    # never trust NumberOfRvaAndSizes beyond what the optional header can hold
    max_dirs_in_header = max(0, (opt + size_opt - dir_offset) // 8)
    num_dirs = min(num_dirs, NUM_DATA_DIRECTORIES, max_dirs_in_header)
    directories = []
    for i in range(NUM_DATA_DIRECTORIES):
        if i < num_dirs:
            va, size = _unpack("<II", data, dir_offset + 8 * i, f"data directory {i}")
            directories.append(DataDirectoryEntry(va, size))
        else:
            directories.append(DataDirectoryEntry(0, 0))

    sections = []
    section_table = opt + size_opt
    for i in range(min(num_sections, MAX_SECTIONS)):
        off = section_table + 40 * i
        (name, vsize, va, raw_size, raw_ptr, _r, _l, _nr, _nl, chars) = _unpack(
            "<8sIIIIIIHHI", data, off, f"section header {i}")
        sections.append(SectionHeader(name, va, vsize, raw_ptr, raw_size, chars))

    if layout is Layout.AUTO:
        layout = _detect_layout(data, sections, size_of_image)

    return PeImage(
        raw=data,
        layout=layout,
        arch=arch,
        image_base=image_base,
        size_of_image=size_of_image,
        entry_point_rva=entry_point,
        size_of_headers=size_of_headers,
        sections=tuple(sections),
        data_directories=tuple(directories),
    )


def _detect_layout(data: bytes, sections: list, size_of_image: int) -> Layout:
    n = len(data)
    for s in sections:
        raw_overflows = s.size_of_raw_data and s.pointer_to_raw_data + s.size_of_raw_data > n
        virtual_fits = s.virtual_address + s.virtual_extent <= max(n, size_of_image)
        if raw_overflows and virtual_fits:
            return Layout.MEMORY
    # a dump sized exactly to the image whose sections are not file-aligned in place
    if n == size_of_image and any(
            s.virtual_address and s.pointer_to_raw_data != s.virtual_address for s in sections):
        return Layout.MEMORY
    return Layout.FILE


def _header_limit(img: PeImage) -> int:
    candidates = [s.virtual_address for s in img.sections if s.virtual_address]
    return min(candidates) if candidates else img.size_of_image


def rva_to_offset(img: PeImage, rva: int) -> int:
    """Translate an RVA to an offset into ``img.raw``."""
    if rva < 0 or rva >= img.size_of_image:
        raise UnmappedError(f"rva 0x{rva:x} outside size_of_image 0x{img.size_of_image:x}")
    if img.layout is Layout.MEMORY:
        offset = rva
    elif rva < _header_limit(img):
        offset = rva
    else:
        for s in img.sections:
            if s.virtual_address and s.contains_rva(rva):
                offset = s.pointer_to_raw_data + (rva - s.virtual_address)
                break
        else:
            raise UnmappedError(f"rva 0x{rva:x} not covered by any section")
    if offset >= len(img.raw):
        raise OutOfFileError(f"rva 0x{rva:x} maps to offset 0x{offset:x} beyond input")
    return offset


def offset_to_rva(img: PeImage, offset: int) -> int:
    """Inverse of :func:`rva_to_offset` using the same section table."""
    if img.layout is Layout.MEMORY:
        return offset
    for s in img.sections:
        if s.virtual_address and s.pointer_to_raw_data <= offset < s.pointer_to_raw_data + s.size_of_raw_data:
            return s.virtual_address + (offset - s.pointer_to_raw_data)
    raw_starts = [s.pointer_to_raw_data for s in img.sections if s.virtual_address and s.size_of_raw_data]
    if offset < min(raw_starts + [_header_limit(img)]):
        return offset
    raise UnmappedError(f"offset 0x{offset:x} not inside any section's raw data")


def va_to_rva(img: PeImage, va: int) -> int:
    if not img.image_base <= va < img.image_base + img.size_of_image:
        raise OutOfImageError(
            f"va 0x{va:x} outside image [0x{img.image_base:x}, 0x{img.image_base + img.size_of_image:x})")
    return va - img.image_base


def data_directory(img: PeImage, index: int) -> DataDirectoryEntry:
    if not 0 <= index < NUM_DATA_DIRECTORIES:
        raise IndexError(f"data directory index {index} out of range")
    return img.data_directories[index]


def _read_cstring(img: PeImage, rva: int, limit: int = 256) -> str:
    raw = img.read_rva(rva, limit)
    end = raw.find(b"\0")
    if end < 0:
        raise OutOfFileError(f"unterminated string at rva 0x{rva:x}")
    return raw[:end].decode("latin-1")


def parse_imports(img: PeImage) -> IatMap:
    """Walk the import descriptors and map every IAT slot VA to its API label.

    Malformed tables yield a partial map with warnings instead of raising.
    """
    entry = data_directory(img, IMAGE_DIRECTORY_ENTRY_IMPORT)
    if not entry.present:
        return IatMap()

    ptr_size = img.arch.pointer_size
    ptr_fmt = "<I" if ptr_size == 4 else "<Q"
    ordinal_flag = 1 << (ptr_size * 8 - 1)
    entries: dict = {}
    warnings: list = []
    seen_descriptors: set = set()

    for i in range(MAX_IMPORT_DESCRIPTORS):
        desc_rva = entry.virtual_address + 20 * i
        try:
            raw = img.read_rva(desc_rva, 20)
        except PeError as exc:
            warnings.append(f"import descriptor {i} unreadable: {exc}")
            break
        if len(raw) < 20:
            warnings.append(f"import descriptor {i} truncated")
            break
        ilt_rva, _ts, _fwd, name_rva, iat_rva = struct.unpack("<IIIII", raw)
        if not any((ilt_rva, name_rva, iat_rva)):
            break
        if (name_rva, iat_rva) in seen_descriptors:
            warnings.append(f"import descriptor {i} repeats an earlier descriptor")
            break
        seen_descriptors.add((name_rva, iat_rva))
        try:
            dll = _read_cstring(img, name_rva)
        except PeError as exc:
            warnings.append(f"import descriptor {i} name unreadable: {exc}")
            continue

        lookup_rva = ilt_rva or iat_rva
        for k in range(MAX_THUNKS_PER_DLL):
            try:
                thunk_raw = img.read_rva(lookup_rva + k * ptr_size, ptr_size)
            except PeError as exc:
                warnings.append(f"{dll}: thunk {k} unreadable: {exc}")
                break
            if len(thunk_raw) < ptr_size:
                warnings.append(f"{dll}: thunk {k} truncated")
                break
            (thunk,) = struct.unpack(ptr_fmt, thunk_raw)
            if thunk == 0:
                break
            if thunk & ordinal_flag:
                label = f"{dll}!#{thunk & 0xFFFF}"
            else:
                try:
                    label = f"{dll}!{_read_cstring(img, (thunk & 0x7FFFFFFF) + 2)}"
                except PeError as exc:
                    warnings.append(f"{dll}: hint/name {k} unreadable: {exc}")
                    continue
            entries[img.image_base + iat_rva + k * ptr_size] = label
        else:
            warnings.append(f"{dll}: thunk array exceeds {MAX_THUNKS_PER_DLL} entries")
    else:
        warnings.append(f"import descriptor count exceeds {MAX_IMPORT_DESCRIPTORS}")

    return IatMap(entries, tuple(warnings))
