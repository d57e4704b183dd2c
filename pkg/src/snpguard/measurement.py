"""Measured boot of the first stage: hash injection into firmware and the
launch digest.

A firmware blob carries a 16-byte marker followed by a 96-byte hash table
(three 32-byte slots for kernel, initramfs, and kernel command line). The
host patches component hashes into the table before launch; the launch
digest then covers the patched blob plus the initial vCPU state, so the
injected hashes are part of the measurement. At boot, the firmware re-hashes
the components it was given and refuses to continue on any mismatch.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from .errors import MalformedError, Verdict

HASH_TABLE_MARKER = b"SNPGUARD-HASHES!"
COMPONENT_DIGEST_SIZE = 32
HASH_SLOTS = ("kernel", "initramfs", "cmdline")
HASH_TABLE_SIZE = COMPONENT_DIGEST_SIZE * len(HASH_SLOTS)
LAUNCH_DIGEST_SIZE = 48

_VCPU_ENCODING = struct.Struct("<IQ")


def _locate_hash_table(blob: bytes) -> int:
    """Offset of the hash table (just past the marker); strict validation."""
    first = blob.find(HASH_TABLE_MARKER)
    if first < 0:
        raise MalformedError("firmware has no hash-table marker")
    if blob.find(HASH_TABLE_MARKER, first + 1) >= 0:
        raise MalformedError("firmware has more than one hash-table marker")
    table = first + len(HASH_TABLE_MARKER)
    if len(blob) < table + HASH_TABLE_SIZE:
        raise MalformedError("firmware truncated before end of hash table")
    return table


@dataclass(frozen=True)
class FirmwareImage:
    """Raw firmware blob with exactly one embedded hash table."""

    blob: bytes

    def __post_init__(self):
        _locate_hash_table(self.blob)

    def hash_slots(self) -> tuple[bytes, bytes, bytes]:
        """The stored (kernel, initramfs, cmdline) digests."""
        table = _locate_hash_table(self.blob)
        return tuple(
            self.blob[table + i * COMPONENT_DIGEST_SIZE : table + (i + 1) * COMPONENT_DIGEST_SIZE]
            for i in range(len(HASH_SLOTS))
        )


@dataclass(frozen=True)
class VcpuState:
    """Abstract initial vCPU state: count and launch policy bits."""

    vcpu_count: int
    policy: int = 0

    def __post_init__(self):
        if self.vcpu_count < 1:
            raise ValueError("vcpu_count must be >= 1")

    def encode(self) -> bytes:
        return _VCPU_ENCODING.pack(self.vcpu_count, self.policy)


@dataclass(frozen=True)
class LaunchDigest:
    digest: bytes

    def __post_init__(self):
        if len(self.digest) != LAUNCH_DIGEST_SIZE:
            raise MalformedError("launch digest must be 48 bytes")

    def hex(self) -> str:
        return self.digest.hex()


def make_test_firmware(size: int = 4096, marker_offset: int = 128) -> FirmwareImage:
    """Synthetic firmware blob with zeroed hash slots for tests and demos.

    Filler bytes are a fixed pattern, so equal parameters produce identical
    blobs.
    """
    if marker_offset < 0 or marker_offset + len(HASH_TABLE_MARKER) + HASH_TABLE_SIZE > size:
        raise ValueError("marker does not fit in requested firmware size")
    blob = bytearray(i & 0xFF for i in range(size))
    table = marker_offset + len(HASH_TABLE_MARKER)
    blob[marker_offset:table] = HASH_TABLE_MARKER
    blob[table : table + HASH_TABLE_SIZE] = bytes(HASH_TABLE_SIZE)
    return FirmwareImage(bytes(blob))


def hash_component(data: bytes) -> bytes:
    """SHA-256 of one boot component."""
    return hashlib.sha256(data).digest()


def inject_hashes(
    fw: FirmwareImage, kernel: bytes, initramfs: bytes, cmdline: bytes
) -> FirmwareImage:
    """Patch the component hashes into the firmware's hash table.

    Only the 96 slot bytes change; everything else is preserved.
    """
    table = _locate_hash_table(fw.blob)
    patched = bytearray(fw.blob)
    for i, component in enumerate((kernel, initramfs, cmdline)):
        start = table + i * COMPONENT_DIGEST_SIZE
        patched[start : start + COMPONENT_DIGEST_SIZE] = hash_component(component)
    return FirmwareImage(bytes(patched))


def compute_launch_digest(fw: FirmwareImage, vcpu: VcpuState) -> LaunchDigest:
    """SHA-384 over the firmware blob and the canonical vCPU encoding."""
    h = hashlib.sha384()
    h.update(fw.blob)
    h.update(vcpu.encode())
    return LaunchDigest(h.digest())


def verify_first_stage(
    fw: FirmwareImage, kernel: bytes, initramfs: bytes, cmdline: bytes
) -> Verdict:
    """Re-hash each component and compare against the stored slots.

    The reject reason names the first mismatching component, modeling a
    firmware that refuses to boot.
    """
    stored = fw.hash_slots()
    for name, slot, component in zip(HASH_SLOTS, stored, (kernel, initramfs, cmdline)):
        if hash_component(component) != slot:
            return Verdict.reject(name, f"{name} hash does not match stored slot")
    return Verdict.accept()
