"""Block-level read integrity: a salted Merkle tree over a disk image.

The image is split into fixed-size blocks. Each leaf is the SHA-256 of the
salt followed by the (zero-padded) block; each inner node hashes the salt
followed by the concatenation of its children, zero-padded to one block, with
a fan-out of ``block_size / 32``. The single top node is the root hash, which
is published out of band. Reads re-verify lazily: a block read recomputes its
leaf and walks the stored tree up to the root.

Metadata file layout (little-endian):

    magic       8 bytes  "SNPGVRTY"
    version     u32      (= 1)
    block_size  u32
    data_blocks u64
    hash_alg    u8       (1 = SHA-256)
    salt_len    u8
    salt        salt_len bytes
    root_hash   32 bytes

The tree file is the raw node arrays, leaves first.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator, Union

from .errors import (
    BlockIntegrityError,
    MalformedError,
    RootMismatchError,
    Verdict,
)

VERITY_MAGIC = b"SNPGVRTY"
VERITY_VERSION = 1
HASH_ALG_SHA256 = 1
DIGEST_SIZE = 32
DEFAULT_BLOCK_SIZE = 4096
MIN_BLOCK_SIZE = 512
MAX_SALT_SIZE = 32


def _check_block_size(block_size: int) -> None:
    if block_size < MIN_BLOCK_SIZE or block_size & (block_size - 1):
        raise ValueError(f"block_size must be a power of two >= {MIN_BLOCK_SIZE}")


def level_widths(data_blocks: int, fanout: int) -> list[int]:
    """Node counts per level, leaves first, ending at the single root."""
    widths = [data_blocks]
    while widths[-1] > 1:
        widths.append(-(-widths[-1] // fanout))
    return widths


@dataclass(frozen=True)
class VerityMetadata:
    """Parameters and root commitment for one protected image."""

    block_size: int
    data_blocks: int
    hash_alg: int
    salt: bytes
    root_hash: bytes
    tree_levels: int

    def fanout(self) -> int:
        return self.block_size // DIGEST_SIZE

    def to_bytes(self) -> bytes:
        return (
            VERITY_MAGIC
            + struct.pack(
                "<IIQBB",
                VERITY_VERSION,
                self.block_size,
                self.data_blocks,
                self.hash_alg,
                len(self.salt),
            )
            + self.salt
            + self.root_hash
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "VerityMetadata":
        if len(data) < len(VERITY_MAGIC) + 18 or data[:8] != VERITY_MAGIC:
            raise MalformedError("bad verity metadata magic")
        version, block_size, data_blocks, hash_alg, salt_len = struct.unpack_from(
            "<IIQBB", data, 8
        )
        if version != VERITY_VERSION:
            raise MalformedError(f"unsupported verity metadata version {version}")
        if hash_alg != HASH_ALG_SHA256:
            raise MalformedError(f"unsupported hash algorithm {hash_alg}")
        off = 8 + 18
        if len(data) != off + salt_len + DIGEST_SIZE:
            raise MalformedError("verity metadata length mismatch")
        salt = data[off : off + salt_len]
        root_hash = data[off + salt_len :]
        _check_block_size(block_size)
        return cls(
            block_size=block_size,
            data_blocks=data_blocks,
            hash_alg=hash_alg,
            salt=salt,
            root_hash=root_hash,
            tree_levels=len(level_widths(data_blocks, block_size // DIGEST_SIZE)),
        )


@dataclass(frozen=True)
class MerkleTreeBlob:
    """Hash-tree node storage, one bytes object per level, leaves first."""

    levels: tuple[bytes, ...]

    def node(self, level: int, index: int) -> bytes:
        return self.levels[level][index * DIGEST_SIZE : (index + 1) * DIGEST_SIZE]

    def to_bytes(self) -> bytes:
        return b"".join(self.levels)

    @classmethod
    def from_bytes(cls, meta: VerityMetadata, data: bytes) -> "MerkleTreeBlob":
        widths = level_widths(meta.data_blocks, meta.fanout())
        if len(data) != sum(widths) * DIGEST_SIZE:
            raise MalformedError("tree blob length does not match metadata")
        levels = []
        off = 0
        for width in widths:
            levels.append(data[off : off + width * DIGEST_SIZE])
            off += width * DIGEST_SIZE
        return cls(tuple(levels))


def _iter_blocks(image: Union[bytes, BinaryIO], block_size: int) -> Iterator[bytes]:
    if isinstance(image, (bytes, bytearray, memoryview)):
        view = memoryview(image)
        for off in range(0, len(view), block_size):
            yield bytes(view[off : off + block_size])
    else:
        while True:
            block = image.read(block_size)
            if not block:
                return
            yield block


def _hash_padded(salt: bytes, data: bytes, block_size: int) -> bytes:
    h = hashlib.sha256(salt)
    h.update(data)
    if len(data) < block_size:
        h.update(bytes(block_size - len(data)))
    return h.digest()


def build_tree(
    image: Union[bytes, BinaryIO],
    block_size: int = DEFAULT_BLOCK_SIZE,
    salt: bytes = b"",
) -> tuple[VerityMetadata, MerkleTreeBlob]:
    """Build the hash tree over an image and commit to its root.

    The image may be a bytes object or a binary stream; it is consumed in
    one block-at-a-time pass. The last block is zero-padded for hashing only
    (the padding is never stored).
    """
    _check_block_size(block_size)
    if len(salt) > MAX_SALT_SIZE:
        raise ValueError(f"salt must be at most {MAX_SALT_SIZE} bytes")

    leaves = bytearray()
    for block in _iter_blocks(image, block_size):
        leaves += _hash_padded(salt, block, block_size)
    if not leaves:
        raise ValueError("image is empty")

    fanout = block_size // DIGEST_SIZE
    levels = [bytes(leaves)]
    while len(levels[-1]) > DIGEST_SIZE:
        below = levels[-1]
        above = bytearray()
        for off in range(0, len(below), fanout * DIGEST_SIZE):
            above += _hash_padded(salt, below[off : off + fanout * DIGEST_SIZE], block_size)
        levels.append(bytes(above))

    tree = MerkleTreeBlob(tuple(levels))
    meta = VerityMetadata(
        block_size=block_size,
        data_blocks=len(leaves) // DIGEST_SIZE,
        hash_alg=HASH_ALG_SHA256,
        salt=salt,
        root_hash=levels[-1],
        tree_levels=len(levels),
    )
    return meta, tree


def verify_block(
    meta: VerityMetadata, tree: MerkleTreeBlob, image: bytes, index: int
) -> Verdict:
    """Check one image block against the stored tree and the root hash.

    Recomputes the leaf from the image bytes, then re-derives each parent
    along the authentication path from the stored nodes, and finally
    compares the top node with the committed root.
    """
    if index < 0 or index >= meta.data_blocks:
        raise IndexError(f"block index {index} out of range")
    block = image[index * meta.block_size : (index + 1) * meta.block_size]
    if _hash_padded(meta.salt, block, meta.block_size) != tree.node(0, index):
        return Verdict.reject("block_mismatch", f"block {index} does not match its leaf")

    fanout = meta.fanout()
    group_bytes = fanout * DIGEST_SIZE
    node_index = index
    for level in range(len(tree.levels) - 1):
        parent = node_index // fanout
        group = tree.levels[level][parent * group_bytes : (parent + 1) * group_bytes]
        if _hash_padded(meta.salt, group, meta.block_size) != tree.node(level + 1, parent):
            return Verdict.reject(
                "tree_mismatch", f"level {level + 1} node {parent} inconsistent"
            )
        node_index = parent
    if tree.node(len(tree.levels) - 1, 0) != meta.root_hash:
        return Verdict.reject("root_mismatch", "tree top does not match committed root")
    return Verdict.accept()


class VerifiedReader:
    """Read-only block reader that re-verifies every block it returns.

    Thread-safe: all state is immutable after construction.
    """

    def __init__(self, meta: VerityMetadata, tree: MerkleTreeBlob, image: bytes):
        self._meta = meta
        self._tree = tree
        self._image = image

    @property
    def data_blocks(self) -> int:
        return self._meta.data_blocks

    def read_block(self, index: int) -> bytes:
        verdict = verify_block(self._meta, self._tree, self._image, index)
        if not verdict:
            raise BlockIntegrityError(index, verdict.reason)
        return self._image[index * self._meta.block_size : (index + 1) * self._meta.block_size]

    def read_all(self) -> bytes:
        return b"".join(self.read_block(i) for i in range(self.data_blocks))


def open_verified(
    meta: VerityMetadata, tree: MerkleTreeBlob, image: bytes, expected_root: bytes
) -> VerifiedReader:
    """Open an image for verified reads after checking the root commitment.

    Fails up front if the metadata does not commit to ``expected_root``;
    individual blocks are verified lazily on read, and a mismatch surfaces
    as a hard :class:`BlockIntegrityError` rather than a crash.
    """
    if meta.root_hash != expected_root:
        raise RootMismatchError("metadata root hash does not match expected root")
    if meta.data_blocks != -(-len(image) // meta.block_size):
        raise MalformedError("image length does not match metadata block count")
    return VerifiedReader(meta, tree, image)
