"""TLS directory decoding and callback-array enumeration."""

from __future__ import annotations

import dataclasses
import enum
import struct
from typing import Optional

from .pe import (
    IMAGE_DIRECTORY_ENTRY_TLS,
    Arch,
    Layout,
    OutOfImageError,
    PeError,
    PeImage,
    data_directory,
    rva_to_offset,
    va_to_rva,
)

DEFAULT_MAX_CALLBACKS = 64
DEFAULT_DISASM_BYTES = 64
NONSTANDARD_RVA_FLAG = "nonstandard-rva-callbacks"


class TlsStatus(enum.Enum):
    NO_TLS_DIRECTORY = "no_tls_directory"
    EMPTY_CALLBACK_TABLE = "empty_callback_table"
    CALLBACKS_FOUND = "callbacks_found"


@dataclasses.dataclass(frozen=True)
class TlsDirectoryInfo:
    directory_rva: int
    start_address_of_raw_data: int
    end_address_of_raw_data: int
    address_of_index: int
    address_of_callbacks: int
    size_of_zero_fill: int
    characteristics: int
    bitness: int  # 32 or 64


@dataclasses.dataclass
class CallbackRecord:
    va: int
    rva: int
    file_offset: int
    raw_bytes: bytes = b""
    truncated: bool = False
    instructions: list = dataclasses.field(default_factory=list)
    annotations: list = dataclasses.field(default_factory=list)  # (index, label)
    findings: list = dataclasses.field(default_factory=list)

    @property
    def end_va(self) -> int:
        return self.va + len(self.raw_bytes)


@dataclasses.dataclass
class TlsExtractionResult:
    status: TlsStatus
    directory: Optional[TlsDirectoryInfo] = None
    callbacks: list = dataclasses.field(default_factory=list)
    unresolved: list = dataclasses.field(default_factory=list)  # callback VAs outside the image
    warnings: list = dataclasses.field(default_factory=list)


def locate_tls_directory(img: PeImage, warnings: Optional[list] = None) -> Optional[TlsDirectoryInfo]:
    """Decode ``IMAGE_TLS_DIRECTORY`` (32- or 64-bit) from data directory 9."""
    entry = data_directory(img, IMAGE_DIRECTORY_ENTRY_TLS)
    if not entry.present:
        return None
    if img.arch is Arch.X86:
        fmt, bitness = "<IIIIII", 32
    else:
        fmt, bitness = "<QQQQII", 64
    size = struct.calcsize(fmt)
    try:
        raw = img.read_rva(entry.virtual_address, size)
    except PeError as exc:
        _warn(warnings, f"TLS directory at rva 0x{entry.virtual_address:x} unreadable: {exc}")
        return None
    if len(raw) < size:
        _warn(warnings, f"TLS directory at rva 0x{entry.virtual_address:x} truncated")
        return None
    start, end, index, callbacks, zero_fill, chars = struct.unpack(fmt, raw)
    return TlsDirectoryInfo(entry.virtual_address, start, end, index, callbacks, zero_fill, chars, bitness)


def _callback_array_rva(img: PeImage, tls: TlsDirectoryInfo, warnings: list) -> Optional[int]:
    va = tls.address_of_callbacks
    if va == 0:
        return None
    try:
        return va_to_rva(img, va)
    except OutOfImageError:
        pass
    # some packers store an RVA here instead of a VA
    if va < img.image_base and va < img.size_of_image:
        warnings.append(f"{NONSTANDARD_RVA_FLAG}: AddressOfCallBacks 0x{va:x} treated as an RVA")
        return va
    warnings.append(f"AddressOfCallBacks 0x{va:x} lies outside the image")
    return None


def enumerate_callbacks(img: PeImage, tls: TlsDirectoryInfo,
                        max_callbacks: int = DEFAULT_MAX_CALLBACKS) -> TlsExtractionResult:
    """Walk the callback pointer array up to its null terminator."""
    result = TlsExtractionResult(TlsStatus.EMPTY_CALLBACK_TABLE, directory=tls)
    array_rva = _callback_array_rva(img, tls, result.warnings)
    if array_rva is None:
        return result

    ptr_size = tls.bitness // 8
    ptr_fmt = "<I" if ptr_size == 4 else "<Q"
    for k in range(max_callbacks):
        slot_rva = array_rva + k * ptr_size
        try:
            raw = img.read_rva(slot_rva, ptr_size)
        except PeError as exc:
            result.warnings.append(f"callback array read stopped at entry {k}: {exc}")
            break
        if len(raw) < ptr_size:
            result.warnings.append(f"callback array read stopped at entry {k}: end of input")
            break
        (pointer,) = struct.unpack(ptr_fmt, raw)
        if pointer == 0:
            break
        try:
            rva = va_to_rva(img, pointer)
            offset = rva_to_offset(img, rva)
        except PeError as exc:
            result.unresolved.append(pointer)
            result.warnings.append(f"callback 0x{pointer:x} unresolvable: {exc}")
            continue
        result.callbacks.append(CallbackRecord(va=pointer, rva=rva, file_offset=offset))
    else:
        if _pointer_at(img, array_rva + max_callbacks * ptr_size, ptr_fmt):
            result.warnings.append(f"callback array truncated at {max_callbacks} entries")

    if result.callbacks:
        result.status = TlsStatus.CALLBACKS_FOUND
    return result


def _pointer_at(img: PeImage, rva: int, fmt: str) -> int:
    """Pointer value at ``rva``, or 0 when it cannot be read."""
    size = struct.calcsize(fmt)
    try:
        raw = img.read_rva(rva, size)
    except PeError:
        return 0
    return struct.unpack(fmt, raw)[0] if len(raw) == size else 0


def _readable_end(img: PeImage, rva: int) -> int:
    """Offset one past the last byte that is contiguous with ``rva`` in the input."""
    limit = len(img.raw)
    if img.layout is Layout.MEMORY:
        return min(limit, img.size_of_image)
    for s in img.sections:
        if s.virtual_address and s.contains_rva(rva):
            return min(limit, s.pointer_to_raw_data + s.size_of_raw_data)
    return limit


def read_callback_bytes(img: PeImage, cb: CallbackRecord, budget: int = DEFAULT_DISASM_BYTES,
                        warnings: Optional[list] = None) -> bytes:
    """Read up to ``budget`` bytes at the callback; sets ``cb.truncated`` on a short read."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    end = _readable_end(img, cb.rva)
    if cb.file_offset >= end:
        _warn(warnings, f"callback 0x{cb.va:x}: offset 0x{cb.file_offset:x} unreadable")
        data = b""
    else:
        data = img.raw[cb.file_offset:min(end, cb.file_offset + budget)]
    cb.raw_bytes = data
    cb.truncated = len(data) < budget
    return data


def extract_callbacks(img: PeImage, max_callbacks: int = DEFAULT_MAX_CALLBACKS,
                      budget: int = DEFAULT_DISASM_BYTES) -> TlsExtractionResult:
    """Locate the directory, enumerate callbacks and read each callback's bytes."""
    warnings: list = []
    tls = locate_tls_directory(img, warnings)
    if tls is None:
        return TlsExtractionResult(TlsStatus.NO_TLS_DIRECTORY, warnings=warnings)
    result = enumerate_callbacks(img, tls, max_callbacks)
    result.warnings[:0] = warnings
    for cb in result.callbacks:
        read_callback_bytes(img, cb, budget, result.warnings)
        if cb.truncated:
            result.warnings.append(
                f"callback 0x{cb.va:x}: read {len(cb.raw_bytes)} of {budget} bytes (image end)")
    return result


def _warn(warnings: Optional[list], message: str) -> None:
    if warnings is not None:
        warnings.append(message)
