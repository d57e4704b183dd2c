"""Owner-side artifact preparation: canonical archives, second-stage disk
images (integrity-only or encrypted), and measured first-stage bundles.

Root filesystems are modeled as a canonical archive, not a real filesystem:
entries are sorted by path and serialization is a pure function of the entry
set, so byte-equality means set-equality. The stage-two entry point is the
archive entry at ``/init``. Declarations the boot stage needs at runtime are
stored inside the image itself under ``/.snpguard/``.

Archive layout (little-endian):

    magic  8 bytes "SNPGARC1"
    count  u32
    per entry: path_len u16, path (UTF-8), mode u32, content_len u64, content
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

from . import cryptdisk, measurement, verity
from .cryptdisk import CryptHeader, DiskKey
from .errors import MalformedError
from .measurement import FirmwareImage, VcpuState
from .verity import MerkleTreeBlob, VerityMetadata

ARCHIVE_MAGIC = b"SNPGARC1"

INIT_PATH = "/init"
WRITABLE_DECLARATION = "/.snpguard/writable"
SCRUBBED_DECLARATION = "/.snpguard/scrubbed"
DECLARATION_MODE = 0o444

DEFAULT_SCRUB_PREFIXES = ("/etc/ssh",)
DEFAULT_WRITABLE_MOUNTS = ("/home", "/tmp", "/var")

ROOT_HASH_PARAMETER = "verity_root_hash"

MANIFEST_NAME = "manifest.json"
FIRMWARE_NAME = "firmware.bin"
KERNEL_NAME = "kernel.bin"
INITRAMFS_NAME = "initramfs.bin"


@dataclass(frozen=True)
class ArchiveEntry:
    path: str
    mode: int
    content: bytes


@dataclass(frozen=True)
class Archive:
    """Canonical, path-sorted collection of file entries."""

    entries: tuple[ArchiveEntry, ...]

    @classmethod
    def from_entries(cls, entries: Iterable[ArchiveEntry]) -> "Archive":
        ordered = sorted(entries, key=lambda e: e.path)
        for a, b in zip(ordered, ordered[1:]):
            if a.path == b.path:
                raise MalformedError(f"duplicate archive path {a.path!r}")
        return cls(tuple(ordered))

    def paths(self) -> list[str]:
        return [e.path for e in self.entries]

    def get(self, path: str) -> ArchiveEntry | None:
        for entry in self.entries:
            if entry.path == path:
                return entry
        return None

    def with_entry(self, entry: ArchiveEntry) -> "Archive":
        """Archive with ``entry`` added, replacing any entry at its path."""
        kept = [e for e in self.entries if e.path != entry.path]
        kept.append(entry)
        return Archive.from_entries(kept)


def pack_archive(archive: Archive) -> bytes:
    """Serialize to canonical bytes; equal entry sets give identical output."""
    out = bytearray(ARCHIVE_MAGIC)
    out += struct.pack("<I", len(archive.entries))
    for entry in archive.entries:
        path = entry.path.encode("utf-8")
        if len(path) > 0xFFFF:
            raise MalformedError(f"path too long: {entry.path!r}")
        out += struct.pack("<H", len(path))
        out += path
        out += struct.pack("<IQ", entry.mode, len(entry.content))
        out += entry.content
    return bytes(out)


def unpack_archive(data: bytes, allow_trailing_zeros: bool = False) -> Archive:
    """Parse archive bytes; set ``allow_trailing_zeros`` for padded images."""
    if len(data) < len(ARCHIVE_MAGIC) + 4 or data[:8] != ARCHIVE_MAGIC:
        raise MalformedError("bad archive magic")
    (count,) = struct.unpack_from("<I", data, 8)
    off = 12
    entries = []
    for _ in range(count):
        try:
            (path_len,) = struct.unpack_from("<H", data, off)
            off += 2
            if len(data) < off + path_len:
                raise MalformedError("archive truncated inside path")
            path = data[off : off + path_len].decode("utf-8")
            off += path_len
            mode, content_len = struct.unpack_from("<IQ", data, off)
            off += 12
            if len(data) < off + content_len:
                raise MalformedError("archive truncated inside content")
            content = data[off : off + content_len]
            off += content_len
        except (struct.error, UnicodeDecodeError) as exc:
            raise MalformedError(f"archive decode failed: {exc}") from None
        entries.append(ArchiveEntry(path=path, mode=mode, content=content))
    trailer = data[off:]
    if trailer and not (allow_trailing_zeros and not any(trailer)):
        raise MalformedError(f"{len(trailer)} unexpected trailing bytes")
    archive = Archive.from_entries(entries)
    if pack_archive(archive) != data[:off]:
        raise MalformedError("archive is not in canonical order")
    return archive


def archive_from_dir(root: str) -> Archive:
    """Build an archive from a directory tree (regular files only)."""
    entries = []
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            full = os.path.join(dirpath, name)
            rel = os.path.relpath(full, root).replace(os.sep, "/")
            with open(full, "rb") as fh:
                content = fh.read()
            entries.append(
                ArchiveEntry(
                    path="/" + rel,
                    mode=os.stat(full).st_mode & 0o7777,
                    content=content,
                )
            )
    return Archive.from_entries(entries)


def path_is_under(path: str, prefix: str) -> bool:
    """Component-wise prefix test: ``/etc/ssh`` covers ``/etc/ssh/key`` but
    not ``/etc/sshd_config``."""
    prefix = prefix.rstrip("/")
    return path == prefix or path.startswith(prefix + "/")


def scrub_paths(archive: Archive, prefixes: Sequence[str]) -> tuple[Archive, list[str]]:
    """Remove every entry under any of the prefixes; returns removed paths."""
    removed = [
        e.path for e in archive.entries if any(path_is_under(e.path, p) for p in prefixes)
    ]
    kept = [e for e in archive.entries if e.path not in removed]
    return Archive.from_entries(kept), removed


@dataclass(frozen=True)
class ImagePrepConfig:
    """Parameters for second-stage image preparation.

    ``mode`` selects integrity-only ("verity", requires ``salt``) or
    confidential ("encrypted", requires ``disk_key``).
    """

    mode: str
    scrub_prefixes: tuple[str, ...] = DEFAULT_SCRUB_PREFIXES
    writable_mounts: tuple[str, ...] = DEFAULT_WRITABLE_MOUNTS
    block_size: int = verity.DEFAULT_BLOCK_SIZE
    salt: bytes = b""
    disk_key: DiskKey | None = None
    disk_uuid: bytes | None = None

    def __post_init__(self):
        if self.mode not in ("verity", "encrypted"):
            raise ValueError(f"unknown image mode {self.mode!r}")
        if self.mode == "encrypted":
            if self.disk_key is None:
                raise ValueError("encrypted mode requires a disk key")
            if self.salt:
                raise ValueError("salt is a verity-mode parameter")
        else:
            if self.disk_key is not None or self.disk_uuid is not None:
                raise ValueError("disk key material is an encrypted-mode parameter")


@dataclass(frozen=True)
class VerityImage:
    image: bytes
    meta: VerityMetadata
    tree: MerkleTreeBlob

    @property
    def root_hash(self) -> bytes:
        return self.meta.root_hash


@dataclass(frozen=True)
class EncryptedImage:
    header: CryptHeader
    cipher: bytes
    tags: bytes


def _pad_to_block(data: bytes, block_size: int) -> bytes:
    rem = len(data) % block_size
    return data if rem == 0 else data + bytes(block_size - rem)


def _declaration(path: str, values: Sequence[str]) -> ArchiveEntry:
    return ArchiveEntry(path=path, mode=DECLARATION_MODE, content="\n".join(values).encode())


def build_second_stage(archive: Archive, config: ImagePrepConfig):
    """Turn a root archive into a bootable second-stage image.

    Verity mode scrubs secrets (SSH keys by default), records the scrubbed
    prefixes and writable mounts inside the image, packs, pads to a block
    multiple, and builds the hash tree. Encrypted mode keeps secrets in
    place (confidentiality at rest covers them) and seals the packed archive
    under the disk key.

    Returns :class:`VerityImage` or :class:`EncryptedImage` by mode.
    """
    if archive.get(INIT_PATH) is None:
        raise MalformedError(f"archive has no {INIT_PATH} entry")
    archive = archive.with_entry(
        _declaration(WRITABLE_DECLARATION, config.writable_mounts)
    )
    if config.mode == "verity":
        archive, _removed = scrub_paths(archive, config.scrub_prefixes)
        archive = archive.with_entry(
            _declaration(SCRUBBED_DECLARATION, config.scrub_prefixes)
        )
        image = _pad_to_block(pack_archive(archive), config.block_size)
        meta, tree = verity.build_tree(image, config.block_size, config.salt)
        return VerityImage(image=image, meta=meta, tree=tree)
    header, cipher, tags = cryptdisk.encrypt_image(
        pack_archive(archive),
        config.disk_key,
        disk_uuid=config.disk_uuid,
        block_size=config.block_size,
    )
    return EncryptedImage(header=header, cipher=cipher, tags=tags)


@dataclass(frozen=True)
class BundleManifest:
    """What the owner expects of the first stage: component files, launch
    parameters, and the launch digest they must produce."""

    firmware_path: str
    kernel_path: str
    initramfs_path: str
    cmdline: str
    vcpu_count: int
    policy: int
    expected_launch_digest: str  # lowercase hex, 48 bytes

    def to_json(self) -> str:
        return json.dumps(
            {
                "firmware_path": self.firmware_path,
                "kernel_path": self.kernel_path,
                "initramfs_path": self.initramfs_path,
                "cmdline": self.cmdline,
                "vcpu_count": self.vcpu_count,
                "policy": self.policy,
                "expected_launch_digest": self.expected_launch_digest,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "BundleManifest":
        try:
            doc = json.loads(text)
            return cls(
                firmware_path=doc["firmware_path"],
                kernel_path=doc["kernel_path"],
                initramfs_path=doc["initramfs_path"],
                cmdline=doc["cmdline"],
                vcpu_count=int(doc["vcpu_count"]),
                policy=int(doc["policy"]),
                expected_launch_digest=doc["expected_launch_digest"],
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MalformedError(f"bad bundle manifest: {exc}") from None


def build_bundle(
    firmware: FirmwareImage,
    kernel: bytes,
    initramfs: bytes,
    cmdline: str,
    vcpu: VcpuState,
) -> tuple[FirmwareImage, BundleManifest]:
    """Patch component hashes into the firmware and record the expected
    launch digest.

    For the integrity-only workflow the caller embeds
    ``verity_root_hash=<hex>`` in the command line, which ties the disk root
    hash into the measured first stage.
    """
    patched = measurement.inject_hashes(firmware, kernel, initramfs, cmdline.encode())
    digest = measurement.compute_launch_digest(patched, vcpu)
    manifest = BundleManifest(
        firmware_path=FIRMWARE_NAME,
        kernel_path=KERNEL_NAME,
        initramfs_path=INITRAMFS_NAME,
        cmdline=cmdline,
        vcpu_count=vcpu.vcpu_count,
        policy=vcpu.policy,
        expected_launch_digest=digest.hex(),
    )
    return patched, manifest


@dataclass(frozen=True)
class Bundle:
    """A loaded first-stage bundle: manifest plus the referenced files."""

    manifest: BundleManifest
    firmware: FirmwareImage
    kernel: bytes
    initramfs: bytes

    @property
    def cmdline(self) -> str:
        return self.manifest.cmdline

    def vcpu(self) -> VcpuState:
        return VcpuState(vcpu_count=self.manifest.vcpu_count, policy=self.manifest.policy)


def write_bundle(
    out_dir: str,
    firmware: FirmwareImage,
    kernel: bytes,
    initramfs: bytes,
    manifest: BundleManifest,
) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, manifest.firmware_path), "wb") as fh:
        fh.write(firmware.blob)
    with open(os.path.join(out_dir, manifest.kernel_path), "wb") as fh:
        fh.write(kernel)
    with open(os.path.join(out_dir, manifest.initramfs_path), "wb") as fh:
        fh.write(initramfs)
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        fh.write(manifest.to_json() + "\n")


def load_bundle(bundle_dir: str) -> Bundle:
    with open(os.path.join(bundle_dir, MANIFEST_NAME)) as fh:
        manifest = BundleManifest.from_json(fh.read())
    with open(os.path.join(bundle_dir, manifest.firmware_path), "rb") as fh:
        firmware = FirmwareImage(fh.read())
    with open(os.path.join(bundle_dir, manifest.kernel_path), "rb") as fh:
        kernel = fh.read()
    with open(os.path.join(bundle_dir, manifest.initramfs_path), "rb") as fh:
        initramfs = fh.read()
    return Bundle(manifest=manifest, firmware=firmware, kernel=kernel, initramfs=initramfs)
