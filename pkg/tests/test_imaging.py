"""Canonical archives, secret scrubbing, second-stage images, and bundles."""

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snpguard import cryptdisk, imaging, measurement, verity
from snpguard.cryptdisk import DiskKey
from snpguard.errors import MalformedError
from snpguard.imaging import (
    Archive,
    ArchiveEntry,
    BundleManifest,
    ImagePrepConfig,
    build_bundle,
    build_second_stage,
    pack_archive,
    scrub_paths,
    unpack_archive,
)

paths = st.text(
    alphabet=st.characters(min_codepoint=97, max_codepoint=122), min_size=1, max_size=12
)


def entry_set(names):
    return [ArchiveEntry("/" + n, 0o644, n.encode() * 3) for n in names]


class TestArchiveFormat:
    def test_canonical_roundtrip(self, root_archive):
        packed = pack_archive(root_archive)
        assert pack_archive(unpack_archive(packed)) == packed

    def test_empty_archive_is_header_only(self):
        packed = pack_archive(Archive.from_entries([]))
        assert packed == b"SNPGARC1" + bytes(4)
        assert unpack_archive(packed).entries == ()

    def test_order_independent_bytes(self):
        a = Archive.from_entries(entry_set(["b", "a", "c"]))
        b = Archive.from_entries(entry_set(["c", "a", "b"]))
        assert pack_archive(a) == pack_archive(b)

    def test_duplicate_paths_rejected(self):
        with pytest.raises(MalformedError):
            Archive.from_entries(entry_set(["a", "a"]))

    def test_layout_against_struct_oracle(self):
        import struct

        archive = Archive.from_entries([ArchiveEntry("/x", 0o755, b"hi")])
        oracle = (
            b"SNPGARC1"
            + struct.pack("<I", 1)
            + struct.pack("<H", 2)
            + b"/x"
            + struct.pack("<IQ", 0o755, 2)
            + b"hi"
        )
        assert pack_archive(archive) == oracle

    def test_trailing_garbage_rejected_but_zero_padding_allowed(self, root_archive):
        packed = pack_archive(root_archive)
        with pytest.raises(MalformedError):
            unpack_archive(packed + b"\x01")
        with pytest.raises(MalformedError):
            unpack_archive(packed + bytes(64))
        padded = unpack_archive(packed + bytes(64), allow_trailing_zeros=True)
        assert padded == root_archive

    def test_truncated_rejected(self, root_archive):
        packed = pack_archive(root_archive)
        with pytest.raises(MalformedError):
            unpack_archive(packed[:-3])

    @given(names=st.lists(paths, min_size=0, max_size=6, unique=True))
    @settings(max_examples=20)
    def test_roundtrip_property(self, names):
        archive = Archive.from_entries(entry_set(names))
        assert unpack_archive(pack_archive(archive)) == archive

    def test_from_directory(self, tmp_path):
        (tmp_path / "etc").mkdir()
        (tmp_path / "etc" / "conf").write_bytes(b"c")
        (tmp_path / "init").write_bytes(b"#!/bin/sh")
        archive = imaging.archive_from_dir(str(tmp_path))
        assert archive.paths() == ["/etc/conf", "/init"]


class TestScrub:
    def test_ssh_keys_removed(self, root_archive):
        scrubbed, removed = scrub_paths(root_archive, ["/etc/ssh"])
        assert removed == ["/etc/ssh/ssh_host_ed25519_key"]
        assert scrubbed.get("/etc/ssh/ssh_host_ed25519_key") is None

    def test_empty_prefix_list_is_identity(self, root_archive):
        scrubbed, removed = scrub_paths(root_archive, [])
        assert scrubbed == root_archive
        assert removed == []

    def test_matching_is_component_wise(self):
        cases = {
            "/etc/ssh": True,
            "/etc/ssh/key": True,
            "/etc/ssh/sub/dir/key": True,
            "/etc/sshd_config_backup": False,
            "/etc/ss": False,
            "/var/etc/ssh": False,
        }
        archive = Archive.from_entries(
            [ArchiveEntry(p, 0o600, b"x") for p in cases]
        )
        _, removed = scrub_paths(archive, ["/etc/ssh"])
        assert sorted(removed) == sorted(p for p, hit in cases.items() if hit)

    def test_trailing_slash_prefix_equivalent(self):
        archive = Archive.from_entries([ArchiveEntry("/etc/ssh/key", 0o600, b"x")])
        _, removed = scrub_paths(archive, ["/etc/ssh/"])
        assert removed == ["/etc/ssh/key"]


class TestBuildSecondStage:
    def test_verity_roundtrip_reproduces_scrubbed_archive(self, root_archive):
        config = ImagePrepConfig(mode="verity", block_size=512, salt=b"s")
        built = build_second_stage(root_archive, config)
        reader = verity.open_verified(built.meta, built.tree, built.image, built.root_hash)
        recovered = imaging.unpack_archive(reader.read_all(), allow_trailing_zeros=True)
        assert recovered.get("/etc/ssh/ssh_host_ed25519_key") is None
        assert recovered.get("/etc/sshd_notes") is not None
        assert recovered.get("/init") is not None

    def test_verity_mode_scrubs_every_configured_prefix(self, root_archive):
        config = ImagePrepConfig(mode="verity", block_size=512)
        built = build_second_stage(root_archive, config)
        reader = verity.open_verified(built.meta, built.tree, built.image, built.root_hash)
        recovered = imaging.unpack_archive(reader.read_all(), allow_trailing_zeros=True)
        assert not [
            p for p in recovered.paths() if imaging.path_is_under(p, "/etc/ssh")
        ]

    def test_verity_image_padded_to_block_multiple(self, root_archive):
        built = build_second_stage(
            root_archive, ImagePrepConfig(mode="verity", block_size=512)
        )
        assert len(built.image) % 512 == 0

    def test_declarations_written(self, root_archive):
        built = build_second_stage(
            root_archive,
            ImagePrepConfig(
                mode="verity",
                block_size=512,
                writable_mounts=("/home", "/tmp"),
                scrub_prefixes=("/etc/ssh",),
            ),
        )
        reader = verity.open_verified(built.meta, built.tree, built.image, built.root_hash)
        recovered = imaging.unpack_archive(reader.read_all(), allow_trailing_zeros=True)
        assert recovered.get(imaging.WRITABLE_DECLARATION).content == b"/home\n/tmp"
        assert recovered.get(imaging.SCRUBBED_DECLARATION).content == b"/etc/ssh"

    def test_encrypted_roundtrip_keeps_secrets(self, root_archive):
        key = DiskKey.generate()
        config = ImagePrepConfig(mode="encrypted", block_size=512, disk_key=key)
        built = build_second_stage(root_archive, config)
        reader = cryptdisk.open_encrypted(built.header, built.cipher, built.tags, key)
        recovered = imaging.unpack_archive(reader.read_all())
        assert recovered.get("/etc/ssh/ssh_host_ed25519_key").content == b"SECRET HOST KEY"

    def test_missing_init_rejected(self):
        archive = Archive.from_entries(entry_set(["a"]))
        with pytest.raises(MalformedError):
            build_second_stage(archive, ImagePrepConfig(mode="verity", block_size=512))

    def test_encrypted_mode_requires_key(self):
        with pytest.raises(ValueError):
            ImagePrepConfig(mode="encrypted")

    def test_mode_specific_fields_enforced(self):
        with pytest.raises(ValueError):
            ImagePrepConfig(mode="verity", disk_key=DiskKey.generate())
        with pytest.raises(ValueError):
            ImagePrepConfig(mode="encrypted", disk_key=DiskKey.generate(), salt=b"s")

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            ImagePrepConfig(mode="tarball")


class TestBundle:
    def test_manifest_digest_matches_independent_recomputation(
        self, firmware, boot_components
    ):
        kernel, initramfs, _ = boot_components
        cmdline = "console=ttyS0 verity_root_hash=" + "ab" * 32
        vcpu = measurement.VcpuState(vcpu_count=2, policy=3)
        patched, manifest = build_bundle(firmware, kernel, initramfs, cmdline, vcpu)
        recomputed = measurement.compute_launch_digest(patched, vcpu)
        assert manifest.expected_launch_digest == recomputed.hex()
        assert measurement.verify_first_stage(
            patched, kernel, initramfs, cmdline.encode()
        ).ok

    def test_cmdline_root_hash_changes_digest(self, firmware, boot_components):
        kernel, initramfs, _ = boot_components
        vcpu = measurement.VcpuState(vcpu_count=1)
        _, a = build_bundle(firmware, kernel, initramfs, "verity_root_hash=" + "00" * 32, vcpu)
        _, b = build_bundle(firmware, kernel, initramfs, "verity_root_hash=" + "01" * 32, vcpu)
        assert a.expected_launch_digest != b.expected_launch_digest

    def test_rebuild_is_deterministic(self, firmware, boot_components):
        kernel, initramfs, cmdline = boot_components
        vcpu = measurement.VcpuState(vcpu_count=4, policy=1)
        one = build_bundle(firmware, kernel, initramfs, cmdline.decode(), vcpu)
        two = build_bundle(firmware, kernel, initramfs, cmdline.decode(), vcpu)
        assert one[0].blob == two[0].blob
        assert one[1] == two[1]

    def test_manifest_json_roundtrip(self, firmware, boot_components):
        kernel, initramfs, _ = boot_components
        _, manifest = build_bundle(
            firmware, kernel, initramfs, "quiet", measurement.VcpuState(1, 9)
        )
        parsed = BundleManifest.from_json(manifest.to_json())
        assert parsed == manifest
        doc = json.loads(manifest.to_json())
        assert doc["expected_launch_digest"] == doc["expected_launch_digest"].lower()

    def test_write_and_load_bundle(self, tmp_path, firmware, boot_components):
        kernel, initramfs, cmdline = boot_components
        patched, manifest = build_bundle(
            firmware, kernel, initramfs, cmdline.decode(), measurement.VcpuState(2)
        )
        imaging.write_bundle(str(tmp_path), patched, kernel, initramfs, manifest)
        bundle = imaging.load_bundle(str(tmp_path))
        assert bundle.firmware.blob == patched.blob
        assert bundle.kernel == kernel
        assert bundle.manifest == manifest
