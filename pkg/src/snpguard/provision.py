"""Nonce-fresh attestation and disk-key provisioning between a VM owner and
a guest, plus the framed wire encoding the two sides speak over TCP.

Protocol (one session per connection):

1. Owner sends a 32-byte random nonce.
2. Guest generates an ephemeral X25519 keypair, places nonce and public key
   in the report's 64-byte guest-data field, and returns the signed report
   with its certificate chain.
3. Owner verifies chain, signature, launch measurement, and nonce, then
   derives a wrapping key from the DH shared secret bound to the nonce and
   the report hash, and sends the sealed disk key with its own public key.
4. Guest derives the same key, unwraps, and acknowledges.

The owner is never separately authenticated: delivering a key that actually
unlocks the disk is the proof. The wrap AEAD uses an all-zero nonce because
each derived key is used exactly once; the associated data binds the full
report so a wrapped key cannot be replayed against a different session.

Frame layout: u32 LE length of (type byte + payload), then type u8, then
payload. Types: 1 request, 2 response, 3 key injection, 4 ack,
5 error (code u16 LE + UTF-8 detail).
"""

from __future__ import annotations

import hashlib
import secrets
import socket
import struct
import threading
from dataclasses import dataclass
from typing import BinaryIO, Callable, Optional, Union

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from . import attestation
from .attestation import AttestationReport, CertChain, SpState
from .cryptdisk import DiskKey
from .errors import (
    AuthenticationError,
    MalformedError,
    SessionStateError,
    SpUnavailableError,
    Verdict,
    WeakKeyError,
)
from .kdf import hkdf_sha256
from .measurement import FirmwareImage, VcpuState, compute_launch_digest

NONCE_SIZE = 32
DH_PUBLIC_SIZE = 32
WRAPPED_KEY_SIZE = 32 + 16  # disk key + AEAD tag

PROVISION_CONTEXT = b"snpguard-provision-v1"
_WRAP_NONCE = bytes(12)

MSG_ATTESTATION_REQUEST = 1
MSG_ATTESTATION_RESPONSE = 2
MSG_KEY_INJECTION = 3
MSG_ACK = 4
MSG_ERROR = 5

MAX_PAYLOAD = 1 << 24

ERR_MALFORMED = 1
ERR_STATE = 2
ERR_UNWRAP = 3
ERR_UNLOCK = 4
ERR_SP_UNAVAILABLE = 5


# ---------------------------------------------------------------------------
# Wire messages


@dataclass(frozen=True)
class AttestationRequest:
    nonce: bytes


@dataclass(frozen=True)
class AttestationResponse:
    report: AttestationReport
    chain: CertChain


@dataclass(frozen=True)
class KeyInjection:
    owner_public: bytes
    wrapped: bytes


@dataclass(frozen=True)
class Ack:
    pass


@dataclass(frozen=True)
class ErrorMessage:
    code: int
    detail: str


Message = Union[AttestationRequest, AttestationResponse, KeyInjection, Ack, ErrorMessage]


def _encode_payload(message: Message) -> tuple[int, bytes]:
    if isinstance(message, AttestationRequest):
        if len(message.nonce) != NONCE_SIZE:
            raise MalformedError("nonce must be 32 bytes")
        return MSG_ATTESTATION_REQUEST, message.nonce
    if isinstance(message, AttestationResponse):
        return (
            MSG_ATTESTATION_RESPONSE,
            attestation.encode_report(message.report) + message.chain.to_bytes(),
        )
    if isinstance(message, KeyInjection):
        if len(message.owner_public) != DH_PUBLIC_SIZE:
            raise MalformedError("owner public key must be 32 bytes")
        if len(message.wrapped) != WRAPPED_KEY_SIZE:
            raise MalformedError("wrapped key must be 48 bytes")
        return MSG_KEY_INJECTION, message.owner_public + message.wrapped
    if isinstance(message, Ack):
        return MSG_ACK, b""
    if isinstance(message, ErrorMessage):
        return MSG_ERROR, struct.pack("<H", message.code) + message.detail.encode("utf-8")
    raise TypeError(f"not a wire message: {message!r}")


def _decode_payload(msg_type: int, payload: bytes) -> Message:
    if msg_type == MSG_ATTESTATION_REQUEST:
        if len(payload) != NONCE_SIZE:
            raise MalformedError("attestation request payload must be 32 bytes")
        return AttestationRequest(nonce=payload)
    if msg_type == MSG_ATTESTATION_RESPONSE:
        if len(payload) != attestation.REPORT_SIZE + attestation.CHAIN_SIZE:
            raise MalformedError("attestation response payload has wrong length")
        return AttestationResponse(
            report=attestation.decode_report(payload[: attestation.REPORT_SIZE]),
            chain=CertChain.from_bytes(payload[attestation.REPORT_SIZE :]),
        )
    if msg_type == MSG_KEY_INJECTION:
        if len(payload) != DH_PUBLIC_SIZE + WRAPPED_KEY_SIZE:
            raise MalformedError("key injection payload has wrong length")
        return KeyInjection(
            owner_public=payload[:DH_PUBLIC_SIZE], wrapped=payload[DH_PUBLIC_SIZE:]
        )
    if msg_type == MSG_ACK:
        if payload:
            raise MalformedError("ack carries no payload")
        return Ack()
    if msg_type == MSG_ERROR:
        if len(payload) < 2:
            raise MalformedError("error payload too short")
        (code,) = struct.unpack_from("<H", payload)
        try:
            detail = payload[2:].decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedError("error detail is not UTF-8") from None
        return ErrorMessage(code=code, detail=detail)
    raise MalformedError(f"unknown message type {msg_type}")


def frame(message: Message) -> bytes:
    """Encode one message as a length-prefixed frame."""
    msg_type, payload = _encode_payload(message)
    if len(payload) > MAX_PAYLOAD:
        raise MalformedError("payload too large to frame")
    return struct.pack("<IB", 1 + len(payload), msg_type) + payload


def deframe(data: bytes) -> Message:
    """Decode exactly one frame; raises :class:`MalformedError` otherwise."""
    if len(data) < 5:
        raise MalformedError("frame too short")
    (length,) = struct.unpack_from("<I", data)
    if length < 1 or length > 1 + MAX_PAYLOAD:
        raise MalformedError("bad frame length")
    if len(data) != 4 + length:
        raise MalformedError("frame length mismatch")
    return _decode_payload(data[4], data[5:])


def write_message(stream: BinaryIO, message: Message) -> None:
    stream.write(frame(message))
    stream.flush()


def read_message(stream: BinaryIO) -> Optional[Message]:
    """Read one frame from a blocking stream; None on clean EOF."""
    prefix = stream.read(4)
    if not prefix:
        return None
    if len(prefix) < 4:
        raise MalformedError("truncated frame prefix")
    (length,) = struct.unpack("<I", prefix)
    if length < 1 or length > 1 + MAX_PAYLOAD:
        raise MalformedError("bad frame length")
    body = stream.read(length)
    if len(body) < length:
        raise MalformedError("truncated frame body")
    return _decode_payload(body[0], body[1:])


# ---------------------------------------------------------------------------
# Key wrapping


def derive_wrap_key(shared_secret: bytes, nonce: bytes, report_hash: bytes) -> bytes:
    """Session AEAD key, bound to the nonce and the full report bytes."""
    return hkdf_sha256(shared_secret, PROVISION_CONTEXT + nonce + report_hash)


def _exchange(private_key: X25519PrivateKey, peer_public: bytes) -> bytes:
    try:
        shared = private_key.exchange(X25519PublicKey.from_public_bytes(peer_public))
    except ValueError as exc:
        raise WeakKeyError(f"degenerate peer public key: {exc}") from None
    if not any(shared):
        raise WeakKeyError("all-zero shared secret")
    return shared


def wrap_key_bytes(
    owner_private: X25519PrivateKey,
    guest_public: bytes,
    nonce: bytes,
    report_bytes: bytes,
    disk_key: DiskKey,
) -> tuple[KeyInjection, bytes]:
    """Seal a disk key for the peer of one session; returns the injection
    message and the derived wrap key (for transcript checks)."""
    report_hash = hashlib.sha256(report_bytes).digest()
    wrap_key = derive_wrap_key(_exchange(owner_private, guest_public), nonce, report_hash)
    wrapped = ChaCha20Poly1305(wrap_key).encrypt(_WRAP_NONCE, disk_key.key, report_hash)
    injection = KeyInjection(
        owner_public=owner_private.public_key().public_bytes_raw(), wrapped=wrapped
    )
    return injection, wrap_key


def open_wrapped_key(
    guest_private: X25519PrivateKey,
    nonce: bytes,
    report_bytes: bytes,
    injection: KeyInjection,
) -> tuple[DiskKey, bytes]:
    """Recover the disk key from an injection aimed at this session.

    Raises :class:`AuthenticationError` if the injection was built against a
    different session or report, or was tampered with in transit.
    """
    report_hash = hashlib.sha256(report_bytes).digest()
    wrap_key = derive_wrap_key(
        _exchange(guest_private, injection.owner_public), nonce, report_hash
    )
    try:
        key = ChaCha20Poly1305(wrap_key).decrypt(_WRAP_NONCE, injection.wrapped, report_hash)
    except InvalidTag:
        raise AuthenticationError("wrapped key failed authentication") from None
    return DiskKey(key), wrap_key


# ---------------------------------------------------------------------------
# Session state machines


class OwnerSession:
    """Owner-side protocol state: one nonce, one ephemeral keypair, one key.

    States move monotonically: new -> started -> verified -> completed,
    with failed terminal from any point. Drive a session from a single
    thread.
    """

    def __init__(self, expected_launch_digest: bytes, trusted_ark: bytes):
        if len(expected_launch_digest) != 48:
            raise ValueError("expected launch digest must be 48 bytes")
        self.expected_launch_digest = expected_launch_digest
        self.trusted_ark = trusted_ark
        self.state = "new"
        self.nonce: bytes | None = None
        self.guest_public: bytes | None = None
        self._dh_private: X25519PrivateKey | None = None
        self._report_bytes: bytes | None = None
        self._wrap_key: bytes | None = None

    def _require(self, state: str) -> None:
        if self.state != state:
            raise SessionStateError(f"owner session is {self.state}, expected {state}")

    def start(self) -> AttestationRequest:
        """Sample the session nonce and emit the attestation request."""
        self._require("new")
        self.nonce = secrets.token_bytes(NONCE_SIZE)
        self._dh_private = X25519PrivateKey.generate()
        self.state = "started"
        return AttestationRequest(nonce=self.nonce)

    def verify(self, response: AttestationResponse) -> Verdict:
        """Check chain, signature, measurement, and nonce, in that order."""
        self._require("started")
        verdict = attestation.verify_report(
            response.report, response.chain, self.trusted_ark
        )
        if verdict:
            if response.report.measurement != self.expected_launch_digest:
                verdict = Verdict.reject(
                    "measurement_mismatch", "report measurement is not the expected digest"
                )
            elif response.report.guest_data[:NONCE_SIZE] != self.nonce:
                verdict = Verdict.reject("nonce_mismatch", "report does not carry this session's nonce")
        if not verdict:
            self.state = "failed"
            return verdict
        self.guest_public = response.report.guest_data[NONCE_SIZE:]
        self._report_bytes = attestation.encode_report(response.report)
        self.state = "verified"
        return verdict

    def wrap_key(self, disk_key: DiskKey) -> KeyInjection:
        """Seal the disk key for the verified peer; completes the session."""
        self._require("verified")
        try:
            injection, self._wrap_key = wrap_key_bytes(
                self._dh_private,
                self.guest_public,
                self.nonce,
                self._report_bytes,
                disk_key,
            )
        except WeakKeyError:
            self.state = "failed"
            raise
        self.state = "completed"
        return injection


class GuestSession:
    """Guest-side protocol state, mirroring :class:`OwnerSession`.

    Holds the simulated SP, the platform certificate chain, and the launch
    context the measurement is computed from. The DH private key is erased
    once the unwrap completes.
    """

    def __init__(
        self,
        sp: SpState | None,
        chain: CertChain,
        firmware: FirmwareImage,
        vcpu: VcpuState,
    ):
        self._sp = sp
        self._chain = chain
        self._firmware = firmware
        self._vcpu = vcpu
        self.state = "new"
        self.nonce: bytes | None = None
        self._dh_private: X25519PrivateKey | None = None
        self._report_bytes: bytes | None = None
        self._wrap_key: bytes | None = None

    def _require(self, state: str) -> None:
        if self.state != state:
            raise SessionStateError(f"guest session is {self.state}, expected {state}")

    def handle_request(self, nonce: bytes) -> AttestationResponse:
        """Produce the signed report for an owner's nonce."""
        self._require("new")
        if len(nonce) != NONCE_SIZE:
            self.state = "failed"
            raise MalformedError("nonce must be 32 bytes")
        if self._sp is None:
            self.state = "failed"
            raise SpUnavailableError("secure processor not reachable")
        self._dh_private = X25519PrivateKey.generate()
        guest_data = nonce + self._dh_private.public_key().public_bytes_raw()
        measurement = compute_launch_digest(self._firmware, self._vcpu)
        report = attestation.make_report(
            self._sp,
            policy=self._vcpu.policy,
            measurement=measurement.digest,
            guest_data=guest_data,
        )
        self.nonce = nonce
        self._report_bytes = attestation.encode_report(report)
        self.state = "responded"
        return AttestationResponse(report=report, chain=self._chain)

    def unwrap(self, injection: KeyInjection) -> DiskKey:
        """Recover the disk key; erases the DH private key on success."""
        self._require("responded")
        try:
            disk_key, self._wrap_key = open_wrapped_key(
                self._dh_private, self.nonce, self._report_bytes, injection
            )
        except (AuthenticationError, WeakKeyError):
            self.state = "failed"
            raise
        self._dh_private = None
        self.state = "completed"
        return disk_key


# ---------------------------------------------------------------------------
# Guest agent (runtime attestation / secret-injection service)


class GuestAgent:
    """TCP service answering attestation requests for a running guest.

    Each connection carries one session: a request, the response, and
    optionally a key injection that is unwrapped and acknowledged (runtime
    secret delivery; there is no disk to unlock here). Sessions are
    isolated, so any number of connections may be served concurrently.
    """

    def __init__(
        self,
        session_factory: Callable[[], GuestSession],
        host: str = "127.0.0.1",
        port: int = 0,
    ):
        self._factory = session_factory
        self._sock = socket.create_server((host, port))
        self._sock.settimeout(0.2)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.address: tuple[str, int] = self._sock.getsockname()[:2]

    @property
    def port(self) -> int:
        return self.address[1]

    def serve_forever(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._serve_connection, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def serve_once(self) -> None:
        """Block until one connection arrives, serve it, and return."""
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            self._serve_connection(conn)
            return

    def start(self) -> None:
        """Serve in a background thread (returns immediately)."""
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        self._threads.append(t)

    def shutdown(self) -> None:
        self._stop.set()
        self._sock.close()
        for t in self._threads:
            t.join(timeout=2)

    def _serve_connection(self, conn: socket.socket) -> None:
        conn.settimeout(10)
        with conn, conn.makefile("rb") as rfile, conn.makefile("wb") as wfile:
            try:
                serve_guest_session(rfile, wfile, self._factory())
            except (OSError, MalformedError):
                pass  # peer went away or spoke garbage mid-frame


def serve_guest_session(
    rfile: BinaryIO,
    wfile: BinaryIO,
    session: GuestSession,
    unlock: Callable[[DiskKey], None] | None = None,
) -> Optional[DiskKey]:
    """Serve one session over a stream pair; returns the delivered key, if any.

    ``unlock`` is called with the unwrapped key before acknowledging; if it
    raises, the guest reports the unlock failure instead of an ack. Protocol
    violations are answered with an error message and end the session.
    """
    try:
        message = read_message(rfile)
    except MalformedError as exc:
        write_message(wfile, ErrorMessage(ERR_MALFORMED, str(exc)))
        return None
    if message is None:
        return None
    if not isinstance(message, AttestationRequest):
        write_message(wfile, ErrorMessage(ERR_STATE, "expected attestation request"))
        return None
    try:
        response = session.handle_request(message.nonce)
    except SpUnavailableError as exc:
        write_message(wfile, ErrorMessage(ERR_SP_UNAVAILABLE, str(exc)))
        return None
    except MalformedError as exc:
        write_message(wfile, ErrorMessage(ERR_MALFORMED, str(exc)))
        return None
    write_message(wfile, response)

    try:
        message = read_message(rfile)
    except MalformedError as exc:
        write_message(wfile, ErrorMessage(ERR_MALFORMED, str(exc)))
        return None
    if message is None:
        return None  # attest-only peer
    if not isinstance(message, KeyInjection):
        write_message(wfile, ErrorMessage(ERR_STATE, "expected key injection"))
        return None
    try:
        disk_key = session.unwrap(message)
    except (AuthenticationError, WeakKeyError) as exc:
        write_message(wfile, ErrorMessage(ERR_UNWRAP, str(exc)))
        return None
    if unlock is not None:
        try:
            unlock(disk_key)
        except Exception as exc:
            write_message(wfile, ErrorMessage(ERR_UNLOCK, str(exc)))
            return None
    write_message(wfile, Ack())
    return disk_key


# ---------------------------------------------------------------------------
# Owner-side drivers


@dataclass(frozen=True)
class OwnerFlowResult:
    """Outcome of one owner-side protocol run."""

    ok: bool
    stage: str  # "verified" | "provisioned" | "verify_failed" | "guest_error" | "protocol_error"
    verdict: Verdict | None = None
    error_code: int | None = None
    detail: str = ""


def _request_report(
    rfile: BinaryIO, wfile: BinaryIO, session: OwnerSession
) -> tuple[Optional[AttestationResponse], Optional[OwnerFlowResult]]:
    write_message(wfile, session.start())
    message = read_message(rfile)
    if isinstance(message, ErrorMessage):
        return None, OwnerFlowResult(
            False, "guest_error", error_code=message.code, detail=message.detail
        )
    if not isinstance(message, AttestationResponse):
        return None, OwnerFlowResult(
            False, "protocol_error", detail="guest did not return an attestation response"
        )
    return message, None


def run_owner_attest(
    rfile: BinaryIO, wfile: BinaryIO, session: OwnerSession
) -> OwnerFlowResult:
    """Request and verify one fresh report."""
    response, failure = _request_report(rfile, wfile, session)
    if failure is not None:
        return failure
    verdict = session.verify(response)
    if not verdict:
        return OwnerFlowResult(False, "verify_failed", verdict=verdict)
    return OwnerFlowResult(True, "verified", verdict=verdict)


def run_owner_provision(
    rfile: BinaryIO, wfile: BinaryIO, session: OwnerSession, disk_key: DiskKey
) -> OwnerFlowResult:
    """Full flow: attest, then deliver the disk key and await the ack."""
    result = run_owner_attest(rfile, wfile, session)
    if not result.ok:
        return result
    try:
        injection = session.wrap_key(disk_key)
    except WeakKeyError as exc:
        return OwnerFlowResult(
            False, "verify_failed", verdict=Verdict.reject("weak_key", str(exc))
        )
    write_message(wfile, injection)
    message = read_message(rfile)
    if isinstance(message, Ack):
        return OwnerFlowResult(True, "provisioned", verdict=result.verdict)
    if isinstance(message, ErrorMessage):
        return OwnerFlowResult(
            False, "guest_error", error_code=message.code, detail=message.detail
        )
    return OwnerFlowResult(False, "protocol_error", detail="guest did not acknowledge")
