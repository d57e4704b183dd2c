"""End-to-end guest boot simulation.

Runs the boot chain a real guest would: first-stage hash verification, then
either a verified read-only mount of the integrity-protected image (root
hash taken solely from the measured kernel command line) or a paused boot
that serves exactly one key-provisioning session before unlocking the
encrypted image. Integrity violations do not crash the simulator; they end
the boot with a machine-readable failure reason, standing in for the kernel
panic a real guest would suffer.

After the stage transition the simulated second stage offers tmpfs-like
semantics: paths under declared writable mounts accept writes held only in
memory; everything else is read-only; scrubbed secret paths get fresh
random marker files, modeling per-boot key regeneration.
"""

from __future__ import annotations

import secrets
import socket
from dataclasses import dataclass, field
from typing import Optional

from . import cryptdisk, imaging, measurement, provision, verity
from .attestation import CertChain, SpState
from .cryptdisk import DiskKey
from .errors import (
    AuthenticationError,
    BlockIntegrityError,
    MalformedError,
    ReadOnlyError,
    RootMismatchError,
)
from .imaging import Archive, Bundle, EncryptedImage, VerityImage

STAGE_FIRMWARE_FAILED = "firmware_failed"
STAGE_FIRST_STAGE_VERIFIED = "first_stage_verified"
STAGE_PROVISIONED = "provisioned"
STAGE_SECOND_STAGE_RUNNING = "second_stage_running"
STAGE_BOOT_FAILED = "boot_failed"

REGENERATED_MARKER_NAME = "host_key"
MARKER_SIZE = 32


class SecondStage:
    """In-memory view of the mounted root filesystem.

    Backed by the verified image entries plus a tmpfs overlay for writable
    mounts; nothing ever flows back to the on-disk image.
    """

    def __init__(self, archive: Archive, writable_mounts: list[str]):
        self._files = {e.path: e.content for e in archive.entries}
        self._overlay: dict[str, bytes] = {}
        self.writable_mounts = list(writable_mounts)

    def _writable(self, path: str) -> bool:
        return any(imaging.path_is_under(path, m) for m in self.writable_mounts)

    def write_file(self, path: str, data: bytes) -> None:
        """Write into tmpfs; raises :class:`ReadOnlyError` elsewhere."""
        if not self._writable(path):
            raise ReadOnlyError(f"{path} is not under a writable mount")
        self._overlay[path] = data

    def read_file(self, path: str) -> bytes:
        if path in self._overlay:
            return self._overlay[path]
        if path in self._files:
            return self._files[path]
        raise FileNotFoundError(path)

    def exists(self, path: str) -> bool:
        return path in self._overlay or path in self._files

    def paths(self) -> list[str]:
        return sorted(set(self._files) | set(self._overlay))

    def _place(self, path: str, data: bytes) -> None:
        # boot-time regeneration writes bypass mount checks (early userspace)
        self._overlay[path] = data


@dataclass
class BootOutcome:
    """Result of one simulated boot."""

    stage_reached: str
    reason: Optional[str] = None
    regenerated_paths: list[str] = field(default_factory=list)
    writable_paths: list[str] = field(default_factory=list)
    transcript: list[dict] = field(default_factory=list)
    second_stage: Optional[SecondStage] = None

    @property
    def running(self) -> bool:
        return self.stage_reached == STAGE_SECOND_STAGE_RUNNING


def parse_root_hash_parameter(cmdline: str) -> Optional[bytes]:
    """Extract the verity root hash from kernel command-line tokens."""
    for token in cmdline.split():
        if token.startswith(imaging.ROOT_HASH_PARAMETER + "="):
            value = token.split("=", 1)[1]
            try:
                root = bytes.fromhex(value)
            except ValueError:
                return None
            return root if len(root) == verity.DIGEST_SIZE else None
    return None


def _parse_declaration(archive: Archive, path: str) -> list[str]:
    entry = archive.get(path)
    if entry is None:
        return []
    return [line for line in entry.content.decode("utf-8").splitlines() if line]


def boot(
    bundle: Bundle,
    mode: str,
    verity_disk: Optional[VerityImage] = None,
    encrypted_disk: Optional[EncryptedImage] = None,
    sp: Optional[SpState] = None,
    chain: Optional[CertChain] = None,
    listener: Optional[socket.socket] = None,
    accept_timeout: float = 30.0,
) -> BootOutcome:
    """Run the full boot chain and report how far it got.

    ``mode`` is "verity" or "encrypted" and must match the disk supplied.
    Encrypted mode pauses after first-stage verification and serves exactly
    one provisioning session on ``listener`` (an already-bound, listening
    TCP socket); a retry requires a fresh boot.
    """
    if mode not in ("verity", "encrypted"):
        raise ValueError(f"unknown boot mode {mode!r}")
    if mode == "verity" and (verity_disk is None or encrypted_disk is not None):
        raise ValueError("verity mode takes exactly the verity disk")
    if mode == "encrypted" and (
        encrypted_disk is None or verity_disk is not None or listener is None
    ):
        raise ValueError("encrypted mode takes the encrypted disk and a channel")

    outcome = BootOutcome(stage_reached=STAGE_BOOT_FAILED)
    events = outcome.transcript

    def fail(reason: str, stage: str = STAGE_BOOT_FAILED) -> BootOutcome:
        outcome.stage_reached = stage
        outcome.reason = reason
        events.append({"event": "boot_failed", "reason": reason})
        return outcome

    events.append({"event": "boot_start", "mode": mode})
    verdict = measurement.verify_first_stage(
        bundle.firmware, bundle.kernel, bundle.initramfs, bundle.cmdline.encode()
    )
    events.append(
        {"event": "first_stage_verify", "ok": verdict.ok, "reason": verdict.reason}
    )
    if not verdict:
        return fail(verdict.reason, stage=STAGE_FIRMWARE_FAILED)
    outcome.stage_reached = STAGE_FIRST_STAGE_VERIFIED

    if mode == "verity":
        root = parse_root_hash_parameter(bundle.cmdline)
        if root is None:
            return fail("missing_root_hash")
        events.append({"event": "root_hash_parameter", "root_hash": root.hex()})
        try:
            reader = verity.open_verified(
                verity_disk.meta, verity_disk.tree, verity_disk.image, root
            )
        except RootMismatchError:
            return fail("root_mismatch")
        except MalformedError:
            return fail("malformed_image")
        try:
            plain = reader.read_all()
        except BlockIntegrityError as exc:
            return fail(f"block_integrity:{exc.index}")
        allow_padding = True
    else:
        unlocked: list[cryptdisk.EncryptedReader] = []

        def unlock(key: DiskKey) -> None:
            unlocked.append(
                cryptdisk.open_encrypted(
                    encrypted_disk.header, encrypted_disk.cipher, encrypted_disk.tags, key
                )
            )

        events.append({"event": "provision_wait"})
        listener.settimeout(accept_timeout)
        try:
            conn, _ = listener.accept()
        except (socket.timeout, OSError):
            return fail("channel_timeout")
        session = provision.GuestSession(sp, chain, bundle.firmware, bundle.vcpu())
        with conn, conn.makefile("rb") as rfile, conn.makefile("wb") as wfile:
            conn.settimeout(accept_timeout)
            try:
                provision.serve_guest_session(rfile, wfile, session, unlock=unlock)
            except (OSError, MalformedError):
                pass
        if not unlocked:
            if session.state == "completed":
                return fail("unlock")  # key unwrapped but did not open the disk
            if session.state == "failed":
                return fail("unwrap_failed")
            return fail("channel_closed")
        events.append({"event": "key_provisioned"})
        outcome.stage_reached = STAGE_PROVISIONED
        try:
            plain = unlocked[0].read_all()
        except AuthenticationError as exc:
            return fail(f"block_integrity:{exc}")
        allow_padding = False

    try:
        archive = imaging.unpack_archive(plain, allow_trailing_zeros=allow_padding)
    except MalformedError:
        return fail("malformed_image")
    if archive.get(imaging.INIT_PATH) is None:
        return fail("missing_init")

    writable = _parse_declaration(archive, imaging.WRITABLE_DECLARATION)
    scrubbed = _parse_declaration(archive, imaging.SCRUBBED_DECLARATION)
    stage = SecondStage(archive, writable)
    outcome.writable_paths = list(writable)
    events.append({"event": "mounts", "writable": writable})

    for prefix in scrubbed:
        marker = prefix.rstrip("/") + "/" + REGENERATED_MARKER_NAME
        stage._place(marker, secrets.token_bytes(MARKER_SIZE))
        outcome.regenerated_paths.append(marker)
        events.append({"event": "regenerate", "path": marker})

    events.append({"event": "switch_root", "init": imaging.INIT_PATH})
    outcome.stage_reached = STAGE_SECOND_STAGE_RUNNING
    outcome.second_stage = stage
    return outcome
