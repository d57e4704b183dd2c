"""Shared error types and the accept/reject verdict used by verification paths.

Verification operations (report checks, first-stage checks, block checks)
return a :class:`Verdict` instead of raising, so callers can branch on the
machine-readable reason code. Exceptions are reserved for contract
violations and for failures that must abort an operation (bad encodings,
authentication failures, state-machine misuse).
"""

from __future__ import annotations

from dataclasses import dataclass


class SnpGuardError(Exception):
    """Base class for all errors raised by this package."""


class MalformedError(SnpGuardError):
    """A binary structure does not decode (wrong length, magic, or version)."""


class IntegrityError(SnpGuardError):
    """Block-level integrity verification failed."""


class RootMismatchError(IntegrityError):
    """The integrity metadata does not commit to the expected root hash."""


class BlockIntegrityError(IntegrityError):
    """A block read failed verification against the hash tree."""

    def __init__(self, index: int, reason: str = "block_mismatch"):
        super().__init__(f"block {index}: {reason}")
        self.index = index
        self.reason = reason


class AuthenticationError(SnpGuardError):
    """An AEAD tag did not verify; no plaintext was released."""


class UnlockError(SnpGuardError):
    """The supplied key does not unlock the encrypted image."""


class WeakKeyError(SnpGuardError):
    """A Diffie-Hellman public key produced a degenerate shared secret."""


class SessionStateError(SnpGuardError):
    """A protocol session was driven out of order or reused."""


class SpUnavailableError(SnpGuardError):
    """The simulated secure processor cannot be reached (fault injection)."""


class ReadOnlyError(SnpGuardError):
    """Write attempted outside the declared writable mounts."""


@dataclass(frozen=True)
class Verdict:
    """Outcome of a verification step: accept, or reject with a reason code.

    ``reason`` is a short stable identifier (e.g. ``"bad_signature"``,
    ``"nonce_mismatch"``); ``detail`` carries optional human-readable context.
    """

    ok: bool
    reason: str = ""
    detail: str = ""

    @classmethod
    def accept(cls) -> "Verdict":
        return cls(True)

    @classmethod
    def reject(cls, reason: str, detail: str = "") -> "Verdict":
        return cls(False, reason, detail)

    def __bool__(self) -> bool:
        return self.ok
