"""Attestation reports, the simulated secure-processor key hierarchy, and
chain-of-trust verification.

The secure processor (SP) holds a chip secret from which it derives a
TCB-versioned signing key (the VCEK). Reports are signed with the VCEK;
verifiers walk a three-certificate chain (platform root -> intermediate ->
VCEK) anchored at a trusted root public key.

Report layout (228 bytes, little-endian integers, fields in order):

    version     u32   (= 1)
    tcb_version u64
    policy      u64
    measurement 48 bytes
    guest_data  64 bytes
    report_id   32 bytes
    signature   64 bytes  (Ed25519 over the preceding 164 bytes)

Certificates are self-describing binary records (105 bytes):

    alg_id      u8    (1 = Ed25519)
    public_key  32 bytes
    tcb_version u64
    signature   64 bytes  (issuer signature over the first 41 bytes)

A chain file is the three certificates concatenated: root, intermediate,
VCEK (315 bytes total).
"""

from __future__ import annotations

import secrets
import struct
from dataclasses import dataclass, replace
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .errors import MalformedError, Verdict
from .kdf import hkdf_sha256

REPORT_VERSION = 1
REPORT_SIZE = 228
SIGNED_REGION_SIZE = 164  # everything before the signature field

MEASUREMENT_SIZE = 48
GUEST_DATA_SIZE = 64
REPORT_ID_SIZE = 32
SIGNATURE_SIZE = 64
PUBLIC_KEY_SIZE = 32
CHIP_SECRET_SIZE = 32

SIG_ALG_ED25519 = 1
CERT_SIZE = 1 + PUBLIC_KEY_SIZE + 8 + SIGNATURE_SIZE  # 105
CHAIN_SIZE = 3 * CERT_SIZE

VCEK_DERIVATION_CONTEXT = b"vcek-derivation"
ASK_DERIVATION_CONTEXT = b"ask-derivation"

_REPORT_HEADER = struct.Struct("<IQQ")


@dataclass(frozen=True)
class AttestationReport:
    """Signed evidence binding a launch measurement, platform TCB, and 64
    bytes of guest-chosen data."""

    version: int
    tcb_version: int
    policy: int
    measurement: bytes
    guest_data: bytes
    report_id: bytes
    signature: bytes

    def __post_init__(self):
        if len(self.measurement) != MEASUREMENT_SIZE:
            raise MalformedError("measurement must be 48 bytes")
        if len(self.guest_data) != GUEST_DATA_SIZE:
            raise MalformedError("guest_data must be 64 bytes")
        if len(self.report_id) != REPORT_ID_SIZE:
            raise MalformedError("report_id must be 32 bytes")
        if len(self.signature) != SIGNATURE_SIZE:
            raise MalformedError("signature must be 64 bytes")


def signed_region(report: AttestationReport) -> bytes:
    """The canonical encoding of every field before the signature."""
    return (
        _REPORT_HEADER.pack(report.version, report.tcb_version, report.policy)
        + report.measurement
        + report.guest_data
        + report.report_id
    )


def encode_report(report: AttestationReport) -> bytes:
    """Serialize a report to its 228-byte wire form."""
    return signed_region(report) + report.signature


def decode_report(data: bytes) -> AttestationReport:
    """Parse a 228-byte report; raises :class:`MalformedError` on bad input."""
    if len(data) != REPORT_SIZE:
        raise MalformedError(f"report must be {REPORT_SIZE} bytes, got {len(data)}")
    version, tcb_version, policy = _REPORT_HEADER.unpack_from(data, 0)
    if version != REPORT_VERSION:
        raise MalformedError(f"unsupported report version {version}")
    off = _REPORT_HEADER.size
    measurement = data[off : off + MEASUREMENT_SIZE]
    off += MEASUREMENT_SIZE
    guest_data = data[off : off + GUEST_DATA_SIZE]
    off += GUEST_DATA_SIZE
    report_id = data[off : off + REPORT_ID_SIZE]
    off += REPORT_ID_SIZE
    signature = data[off : off + SIGNATURE_SIZE]
    return AttestationReport(
        version=version,
        tcb_version=tcb_version,
        policy=policy,
        measurement=measurement,
        guest_data=guest_data,
        report_id=report_id,
        signature=signature,
    )


@dataclass(frozen=True)
class Certificate:
    """Self-describing binary certificate: a public key, the TCB version it
    was issued for (0 for root/intermediate), and the issuer's signature."""

    alg_id: int
    public_key: bytes
    tcb_version: int
    signature: bytes

    def __post_init__(self):
        if len(self.public_key) != PUBLIC_KEY_SIZE:
            raise MalformedError("certificate public key must be 32 bytes")
        if len(self.signature) != SIGNATURE_SIZE:
            raise MalformedError("certificate signature must be 64 bytes")

    def tbs(self) -> bytes:
        """The to-be-signed prefix: alg_id, public key, tcb_version."""
        return struct.pack("<B", self.alg_id) + self.public_key + struct.pack(
            "<Q", self.tcb_version
        )

    def to_bytes(self) -> bytes:
        return self.tbs() + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "Certificate":
        if len(data) != CERT_SIZE:
            raise MalformedError(f"certificate must be {CERT_SIZE} bytes")
        alg_id = data[0]
        public_key = data[1 : 1 + PUBLIC_KEY_SIZE]
        (tcb_version,) = struct.unpack_from("<Q", data, 1 + PUBLIC_KEY_SIZE)
        signature = data[1 + PUBLIC_KEY_SIZE + 8 :]
        return cls(alg_id, public_key, tcb_version, signature)


@dataclass(frozen=True)
class CertChain:
    """Root -> intermediate -> VCEK certificate hierarchy."""

    ark_cert: Certificate
    ask_cert: Certificate
    vcek_cert: Certificate

    def to_bytes(self) -> bytes:
        return self.ark_cert.to_bytes() + self.ask_cert.to_bytes() + self.vcek_cert.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CertChain":
        if len(data) != CHAIN_SIZE:
            raise MalformedError(f"certificate chain must be {CHAIN_SIZE} bytes")
        return cls(
            ark_cert=Certificate.from_bytes(data[:CERT_SIZE]),
            ask_cert=Certificate.from_bytes(data[CERT_SIZE : 2 * CERT_SIZE]),
            vcek_cert=Certificate.from_bytes(data[2 * CERT_SIZE :]),
        )


@dataclass(frozen=True)
class SpState:
    """Simulated secure-processor state: fused chip secret plus the platform
    TCB version the signing key is derived for."""

    chip_secret: bytes
    tcb_version: int

    def __post_init__(self):
        if len(self.chip_secret) != CHIP_SECRET_SIZE:
            raise MalformedError("chip secret must be 32 bytes")

    @classmethod
    def generate(cls, tcb_version: int = 1) -> "SpState":
        return cls(chip_secret=secrets.token_bytes(CHIP_SECRET_SIZE), tcb_version=tcb_version)

    def vcek_private(self) -> Ed25519PrivateKey:
        return _vcek_from_seed(derive_vcek_seed(self.chip_secret, self.tcb_version))

    def vcek_public(self) -> bytes:
        return self.vcek_private().public_key().public_bytes_raw()

    def to_bytes(self) -> bytes:
        return self.chip_secret + struct.pack("<Q", self.tcb_version)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SpState":
        if len(data) != CHIP_SECRET_SIZE + 8:
            raise MalformedError("secure-processor state must be 40 bytes")
        (tcb_version,) = struct.unpack_from("<Q", data, CHIP_SECRET_SIZE)
        return cls(chip_secret=data[:CHIP_SECRET_SIZE], tcb_version=tcb_version)


@lru_cache(maxsize=64)
def derive_vcek_seed(chip_secret: bytes, tcb_version: int) -> bytes:
    """Deterministic 32-byte signing-key seed for (chip secret, TCB)."""
    info = VCEK_DERIVATION_CONTEXT + struct.pack("<Q", tcb_version)
    return hkdf_sha256(chip_secret, info)


def _vcek_from_seed(seed: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(seed)


def derive_vcek(chip_secret: bytes, tcb_version: int) -> Ed25519PrivateKey:
    """Derive the TCB-versioned signing keypair from the chip secret."""
    return _vcek_from_seed(derive_vcek_seed(chip_secret, tcb_version))


def sign_report(sp: SpState, unsigned: AttestationReport) -> AttestationReport:
    """Sign a report with the SP's VCEK; any prior signature is replaced."""
    signature = sp.vcek_private().sign(signed_region(unsigned))
    return replace(unsigned, signature=signature)


def make_report(
    sp: SpState,
    *,
    policy: int,
    measurement: bytes,
    guest_data: bytes,
    report_id: bytes | None = None,
) -> AttestationReport:
    """Build and sign a fresh report for the SP's current TCB version."""
    if report_id is None:
        report_id = secrets.token_bytes(REPORT_ID_SIZE)
    unsigned = AttestationReport(
        version=REPORT_VERSION,
        tcb_version=sp.tcb_version,
        policy=policy,
        measurement=measurement,
        guest_data=guest_data,
        report_id=report_id,
        signature=bytes(SIGNATURE_SIZE),
    )
    return sign_report(sp, unsigned)


def _ark_private(ark_seed: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(ark_seed)


def _ask_private(ark_seed: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(
        hkdf_sha256(ark_seed, ASK_DERIVATION_CONTEXT)
    )


def ark_public(ark_seed: bytes) -> bytes:
    """Raw public key of the platform root for a given root seed."""
    return _ark_private(ark_seed).public_key().public_bytes_raw()


def make_certificate(
    signing_key: Ed25519PrivateKey, public_key: bytes, tcb_version: int = 0
) -> Certificate:
    """Issue a certificate over ``public_key`` with the given signer."""
    unsigned = Certificate(
        alg_id=SIG_ALG_ED25519,
        public_key=public_key,
        tcb_version=tcb_version,
        signature=bytes(SIGNATURE_SIZE),
    )
    return replace(unsigned, signature=signing_key.sign(unsigned.tbs()))


def issue_cert_chain(ark_seed: bytes, sp: SpState) -> CertChain:
    """Issue the platform certificate chain for an SP.

    The root key is generated from ``ark_seed`` directly and self-signs its
    certificate; the intermediate key is derived from the same seed via the
    KDF and is signed by the root; the VCEK certificate carries the SP's
    public key and TCB version and is signed by the intermediate.
    """
    ark = _ark_private(ark_seed)
    ask = _ask_private(ark_seed)
    ark_cert = make_certificate(ark, ark.public_key().public_bytes_raw())
    ask_cert = make_certificate(ark, ask.public_key().public_bytes_raw())
    vcek_cert = make_certificate(ask, sp.vcek_public(), tcb_version=sp.tcb_version)
    return CertChain(ark_cert=ark_cert, ask_cert=ask_cert, vcek_cert=vcek_cert)


def _signature_valid(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


def verify_chain(chain: CertChain, trusted_ark: bytes) -> Verdict:
    """Verify the chain bottom-up against a trusted root public key."""
    if chain.ark_cert.public_key != trusted_ark:
        return Verdict.reject("bad_chain", "root certificate key is not the trusted root")
    for cert in (chain.ark_cert, chain.ask_cert, chain.vcek_cert):
        if cert.alg_id != SIG_ALG_ED25519:
            return Verdict.reject("bad_chain", f"unsupported algorithm {cert.alg_id}")
    if not _signature_valid(chain.ark_cert.public_key, chain.ark_cert.signature, chain.ark_cert.tbs()):
        return Verdict.reject("bad_chain", "root certificate is not self-signed")
    if not _signature_valid(chain.ark_cert.public_key, chain.ask_cert.signature, chain.ask_cert.tbs()):
        return Verdict.reject("bad_chain", "intermediate certificate not signed by root")
    if not _signature_valid(chain.ask_cert.public_key, chain.vcek_cert.signature, chain.vcek_cert.tbs()):
        return Verdict.reject("bad_chain", "VCEK certificate not signed by intermediate")
    return Verdict.accept()


def verify_report(report: AttestationReport, chain: CertChain, trusted_ark: bytes) -> Verdict:
    """Full chain-of-trust check for a report.

    Accepts iff the chain verifies up to ``trusted_ark``, the report
    signature verifies under the VCEK public key, and the report's TCB
    version matches the one the VCEK certificate was issued for. The
    reason names the first failing check.
    """
    chain_verdict = verify_chain(chain, trusted_ark)
    if not chain_verdict:
        return chain_verdict
    if not _signature_valid(chain.vcek_cert.public_key, report.signature, signed_region(report)):
        return Verdict.reject("bad_signature", "report signature does not verify under VCEK")
    if report.tcb_version != chain.vcek_cert.tcb_version:
        return Verdict.reject(
            "tcb_mismatch",
            f"report TCB {report.tcb_version} != certificate TCB {chain.vcek_cert.tcb_version}",
        )
    return Verdict.accept()


def verify_report_bytes(data: bytes, chain: CertChain, trusted_ark: bytes) -> Verdict:
    """Decode-and-verify; decode failures become ``reject(malformed)``."""
    try:
        report = decode_report(data)
    except MalformedError as exc:
        return Verdict.reject("malformed", str(exc))
    return verify_report(report, chain, trusted_ark)
