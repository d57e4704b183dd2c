"""Per-block authenticated encryption of a disk image.

Each block is sealed with ChaCha20-Poly1305 under a 256-bit disk key. The
nonce is derived from the disk UUID and the block index, and the same pair
is bound into the associated data, so a ciphertext block moved to another
position (or onto another disk) fails authentication. Tags live in a
separate region, 16 bytes per block.

The nonce derivation is deterministic, which is safe only because a disk key
encrypts exactly one image: re-encrypting with the same key would repeat
(key, nonce) pairs and is forbidden by contract.

Header file layout (little-endian):

    magic        8 bytes  "SNPGCRPT"
    version      u32      (= 1)
    block_size   u32
    data_blocks  u64
    disk_uuid    16 bytes
    aead_alg     u8       (1 = ChaCha20-Poly1305)
    plain_length u64      (true byte length before padding)
"""

from __future__ import annotations

import hashlib
import secrets
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from .errors import AuthenticationError, MalformedError, UnlockError

CRYPT_MAGIC = b"SNPGCRPT"
CRYPT_VERSION = 1
AEAD_ALG_CHACHA20_POLY1305 = 1
KEY_SIZE = 32
TAG_SIZE = 16
NONCE_SIZE = 12
UUID_SIZE = 16
DEFAULT_BLOCK_SIZE = 4096
MIN_BLOCK_SIZE = 512

HEADER_SIZE = 8 + 4 + 4 + 8 + UUID_SIZE + 1 + 8  # 49


def _check_block_size(block_size: int) -> None:
    if block_size < MIN_BLOCK_SIZE or block_size & (block_size - 1):
        raise ValueError(f"block_size must be a power of two >= {MIN_BLOCK_SIZE}")


@dataclass(frozen=True)
class DiskKey:
    """A 256-bit disk encryption key. Never serialized by this package."""

    key: bytes

    def __post_init__(self):
        if len(self.key) != KEY_SIZE:
            raise ValueError("disk key must be 32 bytes")

    def __repr__(self) -> str:  # keep key bytes out of logs and tracebacks
        return "DiskKey(<redacted>)"

    @classmethod
    def generate(cls) -> "DiskKey":
        return cls(secrets.token_bytes(KEY_SIZE))


@dataclass(frozen=True)
class CryptHeader:
    """Public parameters of one encrypted image."""

    block_size: int
    data_blocks: int
    disk_uuid: bytes
    aead_alg: int
    plain_length: int

    def __post_init__(self):
        if len(self.disk_uuid) != UUID_SIZE:
            raise MalformedError("disk uuid must be 16 bytes")

    def to_bytes(self) -> bytes:
        return (
            CRYPT_MAGIC
            + struct.pack("<IIQ", CRYPT_VERSION, self.block_size, self.data_blocks)
            + self.disk_uuid
            + struct.pack("<BQ", self.aead_alg, self.plain_length)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "CryptHeader":
        if len(data) != HEADER_SIZE or data[:8] != CRYPT_MAGIC:
            raise MalformedError("bad encrypted-image header")
        version, block_size, data_blocks = struct.unpack_from("<IIQ", data, 8)
        if version != CRYPT_VERSION:
            raise MalformedError(f"unsupported header version {version}")
        disk_uuid = data[24 : 24 + UUID_SIZE]
        aead_alg, plain_length = struct.unpack_from("<BQ", data, 24 + UUID_SIZE)
        if aead_alg != AEAD_ALG_CHACHA20_POLY1305:
            raise MalformedError(f"unsupported AEAD algorithm {aead_alg}")
        _check_block_size(block_size)
        return cls(
            block_size=block_size,
            data_blocks=data_blocks,
            disk_uuid=disk_uuid,
            aead_alg=aead_alg,
            plain_length=plain_length,
        )


def block_nonce(disk_uuid: bytes, index: int) -> bytes:
    """Deterministic per-block nonce: leading bytes of SHA-256(uuid, index)."""
    return hashlib.sha256(disk_uuid + struct.pack("<Q", index)).digest()[:NONCE_SIZE]


def _block_aad(disk_uuid: bytes, index: int) -> bytes:
    return disk_uuid + struct.pack("<Q", index)


def encrypt_image(
    plain: bytes,
    key: DiskKey,
    disk_uuid: bytes | None = None,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> tuple[CryptHeader, bytes, bytes]:
    """Encrypt an image block by block; returns (header, ciphertext, tags).

    The key must be fresh for this image. The last block is zero-padded to
    the block size; the true length is recorded in the header.
    """
    _check_block_size(block_size)
    if not plain:
        raise ValueError("image is empty")
    if disk_uuid is None:
        disk_uuid = secrets.token_bytes(UUID_SIZE)
    if len(disk_uuid) != UUID_SIZE:
        raise ValueError("disk uuid must be 16 bytes")

    aead = ChaCha20Poly1305(key.key)
    data_blocks = -(-len(plain) // block_size)
    cipher = bytearray()
    tags = bytearray()
    for index in range(data_blocks):
        block = plain[index * block_size : (index + 1) * block_size]
        if len(block) < block_size:
            block = block + bytes(block_size - len(block))
        sealed = aead.encrypt(block_nonce(disk_uuid, index), block, _block_aad(disk_uuid, index))
        cipher += sealed[:-TAG_SIZE]
        tags += sealed[-TAG_SIZE:]

    header = CryptHeader(
        block_size=block_size,
        data_blocks=data_blocks,
        disk_uuid=disk_uuid,
        aead_alg=AEAD_ALG_CHACHA20_POLY1305,
        plain_length=len(plain),
    )
    return header, bytes(cipher), bytes(tags)


def decrypt_block(
    header: CryptHeader, cipher: bytes, tags: bytes, key: DiskKey, index: int
) -> bytes:
    """Decrypt and authenticate one block, truncated to its true length.

    Any failure (wrong key, tampered ciphertext or tag, misplaced block)
    raises the same :class:`AuthenticationError`; no plaintext is released.
    """
    if index < 0 or index >= header.data_blocks:
        raise IndexError(f"block index {index} out of range")
    aead = ChaCha20Poly1305(key.key)
    sealed = (
        cipher[index * header.block_size : (index + 1) * header.block_size]
        + tags[index * TAG_SIZE : (index + 1) * TAG_SIZE]
    )
    try:
        block = aead.decrypt(
            block_nonce(header.disk_uuid, index), sealed, _block_aad(header.disk_uuid, index)
        )
    except InvalidTag:
        raise AuthenticationError(f"block {index} failed authentication") from None
    remaining = header.plain_length - index * header.block_size
    return block[:remaining] if remaining < header.block_size else block


class EncryptedReader:
    """Read-only plaintext view of an encrypted image.

    Safe for concurrent block reads: decryption is stateless per call.
    """

    def __init__(self, header: CryptHeader, cipher: bytes, tags: bytes, key: DiskKey):
        self._header = header
        self._cipher = cipher
        self._tags = tags
        self._key = key

    @property
    def data_blocks(self) -> int:
        return self._header.data_blocks

    def read_block(self, index: int) -> bytes:
        return decrypt_block(self._header, self._cipher, self._tags, self._key, index)

    def read_all(self) -> bytes:
        return b"".join(self.read_block(i) for i in range(self.data_blocks))


def open_encrypted(
    header: CryptHeader, cipher: bytes, tags: bytes, key: DiskKey
) -> EncryptedReader:
    """Unlock an encrypted image for lazy block reads.

    Block 0 is decrypted eagerly as a key check; a wrong key is reported as
    an :class:`UnlockError` before any reader is returned. Tampered blocks
    elsewhere surface later, on their own reads.
    """
    try:
        decrypt_block(header, cipher, tags, key, 0)
    except AuthenticationError:
        raise UnlockError("key does not unlock this image") from None
    return EncryptedReader(header, cipher, tags, key)
