import pytest

from snpguard import attestation, imaging, measurement
from snpguard.imaging import Archive, ArchiveEntry

ARK_SEED = bytes.fromhex("11" * 32)
CHIP_SECRET = bytes.fromhex("22" * 32)


@pytest.fixture(scope="session")
def sp():
    return attestation.SpState(chip_secret=CHIP_SECRET, tcb_version=3)


@pytest.fixture(scope="session")
def chain(sp):
    return attestation.issue_cert_chain(ARK_SEED, sp)


@pytest.fixture(scope="session")
def trusted_ark():
    return attestation.ark_public(ARK_SEED)


@pytest.fixture()
def firmware():
    return measurement.make_test_firmware(size=2048, marker_offset=64)


@pytest.fixture()
def boot_components():
    return b"kernel code", b"initramfs contents", b"console=ttyS0 quiet"


@pytest.fixture()
def root_archive():
    return Archive.from_entries(
        [
            ArchiveEntry("/init", 0o755, b"#!/bin/sh\nexec /usr/bin/app\n"),
            ArchiveEntry("/usr/bin/app", 0o755, b"\x7fELF application bytes"),
            ArchiveEntry("/etc/ssh/ssh_host_ed25519_key", 0o600, b"SECRET HOST KEY"),
            ArchiveEntry("/etc/sshd_notes", 0o644, b"not a key directory"),
            ArchiveEntry("/home/user/readme", 0o644, b"hello"),
            ArchiveEntry("/var/log/placeholder", 0o644, b""),
        ]
    )
