"""Simulated boots: verity and encrypted workflows, mount semantics, and
failure reporting."""

import socket
import threading

import pytest

from snpguard import bootsim, imaging, measurement, provision
from snpguard.bootsim import (
    STAGE_FIRMWARE_FAILED,
    STAGE_SECOND_STAGE_RUNNING,
    boot,
    parse_root_hash_parameter,
)
from snpguard.cryptdisk import DiskKey
from snpguard.errors import ReadOnlyError
from snpguard.imaging import Bundle, ImagePrepConfig, VerityImage, build_second_stage
from snpguard.measurement import VcpuState, compute_launch_digest


def make_bundle(firmware, kernel, initramfs, cmdline, vcpus=1, policy=0) -> Bundle:
    patched, manifest = imaging.build_bundle(
        firmware, kernel, initramfs, cmdline, VcpuState(vcpus, policy)
    )
    return Bundle(manifest=manifest, firmware=patched, kernel=kernel, initramfs=initramfs)


@pytest.fixture()
def verity_setup(root_archive, firmware, boot_components):
    kernel, initramfs, _ = boot_components
    disk = build_second_stage(
        root_archive, ImagePrepConfig(mode="verity", block_size=512, salt=b"s")
    )
    cmdline = f"console=ttyS0 verity_root_hash={disk.root_hash.hex()}"
    bundle = make_bundle(firmware, kernel, initramfs, cmdline)
    return bundle, disk


@pytest.fixture()
def encrypted_setup(root_archive, firmware, boot_components):
    kernel, initramfs, _ = boot_components
    key = DiskKey.generate()
    disk = build_second_stage(
        root_archive,
        ImagePrepConfig(mode="encrypted", block_size=512, disk_key=key),
    )
    bundle = make_bundle(firmware, kernel, initramfs, "console=ttyS0 root=/dev/crypt")
    return bundle, disk, key


class TestCmdlineParsing:
    def test_extracts_root_hash(self):
        root = "ab" * 32
        assert parse_root_hash_parameter(f"quiet verity_root_hash={root} ro").hex() == root

    def test_missing_or_bad_values(self):
        assert parse_root_hash_parameter("quiet ro") is None
        assert parse_root_hash_parameter("verity_root_hash=zz") is None
        assert parse_root_hash_parameter("verity_root_hash=abcd") is None


class TestVerityBoot:
    def test_honest_boot_reaches_second_stage(self, verity_setup):
        bundle, disk = verity_setup
        outcome = boot(bundle, "verity", verity_disk=disk)
        assert outcome.stage_reached == STAGE_SECOND_STAGE_RUNNING
        assert outcome.running
        assert outcome.reason is None

    def test_regenerates_ssh_markers(self, verity_setup):
        bundle, disk = verity_setup
        outcome = boot(bundle, "verity", verity_disk=disk)
        assert any(p.startswith("/etc/ssh/") for p in outcome.regenerated_paths)
        marker = outcome.regenerated_paths[0]
        content = outcome.second_stage.read_file(marker)
        assert len(content) == 32
        # fresh per boot
        second = boot(bundle, "verity", verity_disk=disk)
        assert second.second_stage.read_file(marker) != content

    def test_writable_mounts_recorded(self, verity_setup):
        bundle, disk = verity_setup
        outcome = boot(bundle, "verity", verity_disk=disk)
        assert outcome.writable_paths == list(imaging.DEFAULT_WRITABLE_MOUNTS)

    def test_tampered_kernel_fails_first_stage(self, verity_setup):
        bundle, disk = verity_setup
        broken = Bundle(
            manifest=bundle.manifest,
            firmware=bundle.firmware,
            kernel=bundle.kernel + b"\x00",
            initramfs=bundle.initramfs,
        )
        outcome = boot(broken, "verity", verity_disk=disk)
        assert outcome.stage_reached == STAGE_FIRMWARE_FAILED
        assert outcome.reason == "kernel"

    def test_altered_root_hash_fails_open(self, verity_setup, firmware):
        bundle, disk = verity_setup
        # attacker rebuilds the bundle so the first stage passes, but the
        # cmdline now names a different root
        bad_root = bytearray(disk.root_hash)
        bad_root[-1] ^= 0x01
        cmdline = f"console=ttyS0 verity_root_hash={bytes(bad_root).hex()}"
        rebuilt = make_bundle(firmware, bundle.kernel, bundle.initramfs, cmdline)
        outcome = boot(rebuilt, "verity", verity_disk=disk)
        assert outcome.stage_reached == "boot_failed"
        assert outcome.reason == "root_mismatch"

    def test_tampered_data_block_fails(self, verity_setup):
        bundle, disk = verity_setup
        image = bytearray(disk.image)
        image[len(image) // 2] ^= 0x01
        tampered = VerityImage(image=bytes(image), meta=disk.meta, tree=disk.tree)
        outcome = boot(bundle, "verity", verity_disk=tampered)
        assert outcome.stage_reached == "boot_failed"
        assert outcome.reason.startswith("block_integrity")

    def test_tampered_tree_node_fails(self, verity_setup):
        from snpguard.verity import MerkleTreeBlob

        bundle, disk = verity_setup
        leaves = bytearray(disk.tree.levels[0])
        leaves[0] ^= 0x01
        tampered = VerityImage(
            image=disk.image,
            meta=disk.meta,
            tree=MerkleTreeBlob((bytes(leaves),) + disk.tree.levels[1:]),
        )
        outcome = boot(bundle, "verity", verity_disk=tampered)
        assert outcome.stage_reached == "boot_failed"
        assert outcome.reason.startswith("block_integrity")

    def test_missing_root_hash_parameter_fails(self, verity_setup, firmware):
        bundle, disk = verity_setup
        rebuilt = make_bundle(firmware, bundle.kernel, bundle.initramfs, "quiet ro")
        outcome = boot(rebuilt, "verity", verity_disk=disk)
        assert outcome.reason == "missing_root_hash"

    def test_disk_image_unchanged_by_boot(self, verity_setup):
        bundle, disk = verity_setup
        before = bytes(disk.image)
        outcome = boot(bundle, "verity", verity_disk=disk)
        outcome.second_stage.write_file("/tmp/scratch", b"data")
        assert disk.image == before

    def test_mode_disk_mismatch_rejected(self, verity_setup):
        bundle, disk = verity_setup
        with pytest.raises(ValueError):
            boot(bundle, "encrypted", verity_disk=disk)
        with pytest.raises(ValueError):
            boot(bundle, "tarball", verity_disk=disk)


class TestSecondStage:
    @pytest.fixture()
    def running(self, verity_setup):
        bundle, disk = verity_setup
        return boot(bundle, "verity", verity_disk=disk).second_stage

    def test_write_under_tmp_succeeds(self, running):
        running.write_file("/tmp/note", b"hello")
        assert running.read_file("/tmp/note") == b"hello"

    def test_write_under_usr_fails_read_only(self, running):
        with pytest.raises(ReadOnlyError):
            running.write_file("/usr/bin/app", b"pwned")
        assert running.read_file("/usr/bin/app") == b"\x7fELF application bytes"

    def test_write_under_var_reads_back_identically(self, running):
        payload = bytes(range(256))
        running.write_file("/var/cache/blob", payload)
        assert running.read_file("/var/cache/blob") == payload

    def test_missing_file(self, running):
        with pytest.raises(FileNotFoundError):
            running.read_file("/no/such/path")


def run_encrypted_boot(bundle, disk, sp, chain, owner_actions):
    """Boot in a thread while the test drives the owner side."""
    listener = socket.create_server(("127.0.0.1", 0))
    address = listener.getsockname()[:2]
    box = {}

    def run():
        box["outcome"] = boot(
            bundle,
            "encrypted",
            encrypted_disk=disk,
            sp=sp,
            chain=chain,
            listener=listener,
            accept_timeout=10,
        )

    thread = threading.Thread(target=run)
    thread.start()
    try:
        result = owner_actions(address)
    finally:
        thread.join(timeout=15)
        listener.close()
    assert not thread.is_alive(), "boot did not finish"
    return box["outcome"], result


def owner_provision_action(expected_digest, trusted_ark, disk_key):
    def action(address):
        with socket.create_connection(address, timeout=5) as conn:
            conn.settimeout(10)
            owner = provision.OwnerSession(expected_digest, trusted_ark)
            with conn.makefile("rb") as rfile, conn.makefile("wb") as wfile:
                return provision.run_owner_provision(rfile, wfile, owner, disk_key)

    return action


class TestEncryptedBoot:
    def test_honest_flow_reaches_second_stage(self, encrypted_setup, sp, chain, trusted_ark):
        bundle, disk, key = encrypted_setup
        expected = compute_launch_digest(bundle.firmware, bundle.vcpu()).digest
        outcome, result = run_encrypted_boot(
            bundle, disk, sp, chain, owner_provision_action(expected, trusted_ark, key)
        )
        assert result.ok and result.stage == "provisioned"
        assert outcome.stage_reached == STAGE_SECOND_STAGE_RUNNING
        # secrets survive in the encrypted image
        assert (
            outcome.second_stage.read_file("/etc/ssh/ssh_host_ed25519_key")
            == b"SECRET HOST KEY"
        )
        assert outcome.regenerated_paths == []

    def test_wrong_key_fails_unlock(self, encrypted_setup, sp, chain, trusted_ark):
        bundle, disk, _key = encrypted_setup
        expected = compute_launch_digest(bundle.firmware, bundle.vcpu()).digest
        wrong = DiskKey.generate()
        outcome, result = run_encrypted_boot(
            bundle, disk, sp, chain, owner_provision_action(expected, trusted_ark, wrong)
        )
        assert not result.ok
        assert result.stage == "guest_error"
        assert result.error_code == provision.ERR_UNLOCK
        assert outcome.stage_reached == "boot_failed"
        assert outcome.reason == "unlock"

    def test_owner_rejecting_cuts_boot(self, encrypted_setup, sp, chain, trusted_ark):
        bundle, disk, key = encrypted_setup
        wrong_digest = bytes(48)

        outcome, result = run_encrypted_boot(
            bundle, disk, sp, chain, owner_provision_action(wrong_digest, trusted_ark, key)
        )
        assert not result.ok
        assert result.verdict.reason == "measurement_mismatch"
        assert outcome.stage_reached == "boot_failed"
        assert outcome.reason == "channel_closed"

    def test_encrypted_mode_requires_channel(self, encrypted_setup):
        bundle, disk, _ = encrypted_setup
        with pytest.raises(ValueError):
            boot(bundle, "encrypted", encrypted_disk=disk, listener=None)


class TestMissingInit:
    def test_image_without_init_fails_boot(self, firmware, boot_components):
        from snpguard import verity as verity_mod
        from snpguard.imaging import Archive, ArchiveEntry, pack_archive

        kernel, initramfs, _ = boot_components
        archive = Archive.from_entries([ArchiveEntry("/only", 0o644, b"x")])
        image = pack_archive(archive)
        image += bytes(-len(image) % 512)
        meta, tree = verity_mod.build_tree(image, 512, b"")
        disk = VerityImage(image=image, meta=meta, tree=tree)
        bundle = make_bundle(
            firmware, kernel, initramfs, f"verity_root_hash={meta.root_hash.hex()}"
        )
        outcome = boot(bundle, "verity", verity_disk=disk)
        assert outcome.reason == "missing_init"
