"""HKDF-SHA256 with fixed per-call-site context strings.

Every key derivation in the package goes through :func:`hkdf_sha256` so the
derivation discipline (empty salt, context carried in ``info``) is uniform.
"""

from __future__ import annotations

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF


def hkdf_sha256(ikm: bytes, info: bytes, length: int = 32) -> bytes:
    """Derive ``length`` bytes from ``ikm`` bound to the ``info`` context."""
    return HKDF(
        algorithm=hashes.SHA256(),
        length=length,
        salt=None,
        info=info,
    ).derive(ikm)
