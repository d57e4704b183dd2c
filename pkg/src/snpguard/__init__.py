"""Confidential-VM boot chain simulation: measured boot with hash injection,
Merkle-tree disk integrity, per-block authenticated disk encryption, and a
nonce-fresh Diffie-Hellman key-provisioning protocol, all verifiable against
a simulated secure processor."""

__version__ = "0.1.0"
