"""Operator command surface for the two workflows.

Owner, offline: ``sp init``, ``bundle build``, ``image build``, ``digest``.
Guest: ``guest boot``, ``guest agent``. Owner, online: ``owner attest``,
``owner provision``.

Exit codes are fixed for scriptability: 0 success, 2 transport failure,
3 verification failure, 4 disk unlock failure, 5 usage or malformed input.
Standard output carries exactly one machine-parseable line or JSON object
per invocation; diagnostics go to standard error. Key material is always
passed by file path, never on the command line.
"""

from __future__ import annotations

import argparse
import json
import os
import secrets
import socket
import sys
from typing import Optional

from . import attestation, bootsim, imaging, measurement, provision, verity
from .cryptdisk import CryptHeader, DiskKey
from .errors import MalformedError, SnpGuardError
from .imaging import EncryptedImage, VerityImage
from .measurement import FirmwareImage, VcpuState
from .verity import MerkleTreeBlob, VerityMetadata

EXIT_OK = 0
EXIT_TRANSPORT = 2
EXIT_VERIFY = 3
EXIT_UNLOCK = 4
EXIT_USAGE = 5

DEFAULT_PORT = 4415
PORT_ENV = "SNPGUARD_PORT"

SP_STATE_NAME = "sp_state.bin"
ARK_PUBLIC_NAME = "ark_public.bin"
CERT_CHAIN_NAME = "cert_chain.bin"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 5, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _read(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write(path: str, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)


def _emit(obj: dict) -> None:
    print(json.dumps(obj))


def _diag(message: str) -> None:
    print(message, file=sys.stderr)


def _env_port() -> Optional[int]:
    value = os.environ.get(PORT_ENV)
    return int(value) if value else None


def _listen_address(listen: Optional[str], port_flag: Optional[int] = None) -> tuple[str, int]:
    """Bind address for guest services; SNPGUARD_PORT overrides any flag."""
    host, port = "127.0.0.1", port_flag if port_flag else DEFAULT_PORT
    if listen:
        if ":" in listen:
            host, port_text = listen.rsplit(":", 1)
            port = int(port_text)
        else:
            host = listen
    env = _env_port()
    if env is not None:
        port = env
    return host, port


def _connect_address(addr: str, port_flag: Optional[int] = None) -> tuple[str, int]:
    if ":" in addr:
        host, port_text = addr.rsplit(":", 1)
        return host, int(port_text)
    env = _env_port()
    if env is not None:
        return addr, env
    return addr, port_flag if port_flag else DEFAULT_PORT


def _write_trace(path: Optional[str], events: list[dict]) -> None:
    if not path:
        return
    with open(path, "w") as fh:
        for event in events:
            fh.write(json.dumps(event) + "\n")


# ---------------------------------------------------------------------------
# Offline owner commands


def _cmd_sp_init(args) -> int:
    sp = attestation.SpState.generate(tcb_version=args.tcb)
    ark_seed = secrets.token_bytes(32)
    chain = attestation.issue_cert_chain(ark_seed, sp)
    os.makedirs(args.out, exist_ok=True)
    sp_path = os.path.join(args.out, SP_STATE_NAME)
    ark_path = os.path.join(args.out, ARK_PUBLIC_NAME)
    chain_path = os.path.join(args.out, CERT_CHAIN_NAME)
    _write(sp_path, sp.to_bytes())
    _write(ark_path, attestation.ark_public(ark_seed))
    _write(chain_path, chain.to_bytes())
    _emit(
        {
            "sp_state": sp_path,
            "ark_public": ark_path,
            "cert_chain": chain_path,
            "tcb_version": sp.tcb_version,
        }
    )
    return EXIT_OK


def _cmd_bundle_build(args) -> int:
    firmware = FirmwareImage(_read(args.firmware))
    kernel = _read(args.kernel)
    initramfs = _read(args.initramfs)
    vcpu = VcpuState(vcpu_count=args.vcpus, policy=args.policy)
    patched, manifest = imaging.build_bundle(firmware, kernel, initramfs, args.cmdline, vcpu)
    imaging.write_bundle(args.out, patched, kernel, initramfs, manifest)
    _emit(
        {
            "bundle": args.out,
            "expected_launch_digest": manifest.expected_launch_digest,
        }
    )
    return EXIT_OK


def _cmd_digest(args) -> int:
    firmware = FirmwareImage(_read(args.firmware))
    patched = measurement.inject_hashes(
        firmware, _read(args.kernel), _read(args.initramfs), args.cmdline.encode()
    )
    vcpu = VcpuState(vcpu_count=args.vcpus, policy=args.policy)
    print(measurement.compute_launch_digest(patched, vcpu).hex())
    return EXIT_OK


def _load_archive_arg(path: str) -> imaging.Archive:
    if os.path.isdir(path):
        return imaging.archive_from_dir(path)
    return imaging.unpack_archive(_read(path))


def _cmd_image_build(args) -> int:
    archive = _load_archive_arg(getattr(args, "in"))
    scrub = tuple(args.scrub) if args.scrub else imaging.DEFAULT_SCRUB_PREFIXES
    writable = tuple(args.writable) if args.writable else imaging.DEFAULT_WRITABLE_MOUNTS
    if args.mode == "verity":
        config = imaging.ImagePrepConfig(
            mode="verity",
            scrub_prefixes=scrub,
            writable_mounts=writable,
            block_size=args.block_size,
            salt=bytes.fromhex(args.salt) if args.salt else b"",
        )
        built: VerityImage = imaging.build_second_stage(archive, config)
        image_path = args.out + ".image"
        meta_path = args.out + ".verity-meta"
        tree_path = args.out + ".verity-tree"
        _write(image_path, built.image)
        _write(meta_path, built.meta.to_bytes())
        _write(tree_path, built.tree.to_bytes())
        _emit(
            {
                "mode": "verity",
                "root_hash": built.root_hash.hex(),
                "image": image_path,
                "metadata": meta_path,
                "tree": tree_path,
            }
        )
        return EXIT_OK
    if not args.keyfile:
        raise _UsageError("encrypted mode requires --keyfile")
    key = DiskKey(_read(args.keyfile))
    config = imaging.ImagePrepConfig(
        mode="encrypted",
        scrub_prefixes=scrub,
        writable_mounts=writable,
        block_size=args.block_size,
        disk_key=key,
        disk_uuid=bytes.fromhex(args.uuid) if args.uuid else None,
    )
    built: EncryptedImage = imaging.build_second_stage(archive, config)
    header_path = args.out + ".crypt-header"
    cipher_path = args.out + ".crypt-image"
    tags_path = args.out + ".crypt-tags"
    _write(header_path, built.header.to_bytes())
    _write(cipher_path, built.cipher)
    _write(tags_path, built.tags)
    _emit(
        {
            "mode": "encrypted",
            "uuid": built.header.disk_uuid.hex(),
            "header": header_path,
            "cipher": cipher_path,
            "tags": tags_path,
        }
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Guest commands


_BOOT_FAILURE_EXITS = {
    "unlock": EXIT_UNLOCK,
    "channel_timeout": EXIT_TRANSPORT,
    "channel_closed": EXIT_TRANSPORT,
}


def _cmd_guest_boot(args) -> int:
    bundle = imaging.load_bundle(args.bundle)
    verity_disk = encrypted_disk = None
    sp = chain = listener = None
    if args.mode == "verity":
        if not (args.image and args.meta and args.tree):
            raise _UsageError("verity mode requires --image, --meta, and --tree")
        meta = VerityMetadata.from_bytes(_read(args.meta))
        verity_disk = VerityImage(
            image=_read(args.image),
            meta=meta,
            tree=MerkleTreeBlob.from_bytes(meta, _read(args.tree)),
        )
    else:
        if not (args.header and args.cipher and args.tags and args.sp and args.chain):
            raise _UsageError(
                "encrypted mode requires --header, --cipher, --tags, --sp, and --chain"
            )
        encrypted_disk = EncryptedImage(
            header=CryptHeader.from_bytes(_read(args.header)),
            cipher=_read(args.cipher),
            tags=_read(args.tags),
        )
        sp = attestation.SpState.from_bytes(_read(args.sp))
        chain = attestation.CertChain.from_bytes(_read(args.chain))
        host, port = _listen_address(args.listen, args.port)
        listener = socket.create_server((host, port))
        _diag(f"provisioning channel on {host}:{listener.getsockname()[1]}")

    try:
        outcome = bootsim.boot(
            bundle,
            args.mode,
            verity_disk=verity_disk,
            encrypted_disk=encrypted_disk,
            sp=sp,
            chain=chain,
            listener=listener,
        )
    finally:
        if listener is not None:
            listener.close()

    _write_trace(args.trace, outcome.transcript)
    _emit(
        {
            "stage": outcome.stage_reached,
            "reason": outcome.reason,
            "regenerated_paths": outcome.regenerated_paths,
            "writable_paths": outcome.writable_paths,
        }
    )
    if outcome.running:
        return EXIT_OK
    return _BOOT_FAILURE_EXITS.get(outcome.reason or "", EXIT_VERIFY)


def _cmd_guest_agent(args) -> int:
    bundle = imaging.load_bundle(args.bundle)
    sp = attestation.SpState.from_bytes(_read(args.sp))
    chain = attestation.CertChain.from_bytes(_read(args.chain))

    def factory() -> provision.GuestSession:
        return provision.GuestSession(sp, chain, bundle.firmware, bundle.vcpu())

    host, port = _listen_address(args.listen, args.port)
    agent = provision.GuestAgent(factory, host=host, port=port)
    _emit({"listening": f"{agent.address[0]}:{agent.port}"})
    try:
        if args.once:
            agent.serve_once()
        else:
            agent.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        agent.shutdown()
    return EXIT_OK


# ---------------------------------------------------------------------------
# Online owner commands


def _owner_session(args) -> provision.OwnerSession:
    path = args.manifest
    if os.path.isdir(path):
        path = os.path.join(path, imaging.MANIFEST_NAME)
    with open(path) as fh:
        manifest = imaging.BundleManifest.from_json(fh.read())
    expected = bytes.fromhex(manifest.expected_launch_digest)
    trusted_ark = _read(args.ark)
    return provision.OwnerSession(expected, trusted_ark)


def _owner_flow_exit(result: provision.OwnerFlowResult) -> int:
    if result.ok:
        return EXIT_OK
    if result.stage == "verify_failed":
        return EXIT_VERIFY
    if result.stage == "guest_error":
        if result.error_code == provision.ERR_UNLOCK:
            return EXIT_UNLOCK
        return EXIT_VERIFY
    return EXIT_TRANSPORT


def _emit_flow(result: provision.OwnerFlowResult) -> None:
    doc: dict = {"verdict": "accept" if result.ok else "reject", "stage": result.stage}
    if result.verdict is not None and not result.verdict.ok:
        doc["reason"] = result.verdict.reason
    if result.error_code is not None:
        doc["guest_error_code"] = result.error_code
    if result.detail:
        doc["detail"] = result.detail
    _emit(doc)


def _run_owner(args, flow) -> int:
    session = _owner_session(args)
    host, port = _connect_address(args.addr, args.port)
    try:
        with socket.create_connection((host, port), timeout=10) as conn:
            conn.settimeout(30)
            with conn.makefile("rb") as rfile, conn.makefile("wb") as wfile:
                result = flow(rfile, wfile, session)
    except (OSError, MalformedError) as exc:
        _diag(f"transport failure: {exc}")
        _emit({"verdict": "error", "stage": "transport", "detail": str(exc)})
        return EXIT_TRANSPORT
    _emit_flow(result)
    return _owner_flow_exit(result)


def _cmd_owner_attest(args) -> int:
    def flow(rfile, wfile, session):
        return provision.run_owner_attest(rfile, wfile, session)

    return _run_owner(args, flow)


def _cmd_owner_provision(args) -> int:
    disk_key = DiskKey(_read(args.keyfile))

    def flow(rfile, wfile, session):
        return provision.run_owner_provision(rfile, wfile, session, disk_key)

    return _run_owner(args, flow)


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> _Parser:
    parser = _Parser(prog="snpguard", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    net = argparse.ArgumentParser(add_help=False)
    net.add_argument(
        "--port",
        type=int,
        help=f"default TCP port (SNPGUARD_PORT overrides; built-in default {DEFAULT_PORT})",
    )

    p = sub.add_parser("sp", help="simulated secure-processor management")
    sp_sub = p.add_subparsers(dest="subcommand", required=True)
    p = sp_sub.add_parser("init", help="create SP state, root key, and cert chain")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tcb", type=int, default=1, help="platform TCB version")
    p.set_defaults(func=_cmd_sp_init)

    p = sub.add_parser("bundle", help="first-stage bundle operations")
    bundle_sub = p.add_subparsers(dest="subcommand", required=True)
    p = bundle_sub.add_parser("build", help="patch firmware and write the bundle")
    p.add_argument("--firmware", required=True)
    p.add_argument("--kernel", required=True)
    p.add_argument("--initramfs", required=True)
    p.add_argument("--cmdline", required=True)
    p.add_argument("--vcpus", type=int, required=True)
    p.add_argument("--policy", type=int, default=0)
    p.add_argument("--out", required=True, help="output bundle directory")
    p.set_defaults(func=_cmd_bundle_build)

    p = sub.add_parser("digest", help="print the expected launch digest")
    p.add_argument("--firmware", required=True)
    p.add_argument("--kernel", required=True)
    p.add_argument("--initramfs", required=True)
    p.add_argument("--cmdline", required=True)
    p.add_argument("--vcpus", type=int, required=True)
    p.add_argument("--policy", type=int, default=0)
    p.set_defaults(func=_cmd_digest)

    p = sub.add_parser("image", help="second-stage image operations")
    image_sub = p.add_subparsers(dest="subcommand", required=True)
    p = image_sub.add_parser("build", help="build a verity or encrypted image")
    p.add_argument("--mode", choices=("verity", "encrypted"), required=True)
    p.add_argument("--in", required=True, help="packed archive file or directory")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--scrub", action="append", help="path prefix to scrub (repeatable)")
    p.add_argument("--writable", action="append", help="writable mount (repeatable)")
    p.add_argument("--block-size", type=int, default=verity.DEFAULT_BLOCK_SIZE)
    p.add_argument("--salt", help="hex salt (verity mode)")
    p.add_argument("--keyfile", help="32-byte disk key file (encrypted mode)")
    p.add_argument("--uuid", help="hex disk uuid (encrypted mode; random if omitted)")
    p.set_defaults(func=_cmd_image_build)

    p = sub.add_parser("guest", help="guest-side simulation")
    guest_sub = p.add_subparsers(dest="subcommand", required=True)
    p = guest_sub.add_parser("boot", parents=[net], help="simulate a guest boot")
    p.add_argument("--bundle", required=True)
    p.add_argument("--mode", choices=("verity", "encrypted"), required=True)
    p.add_argument("--image")
    p.add_argument("--meta")
    p.add_argument("--tree")
    p.add_argument("--header")
    p.add_argument("--cipher")
    p.add_argument("--tags")
    p.add_argument("--sp", help="SP state file (encrypted mode)")
    p.add_argument("--chain", help="certificate chain file (encrypted mode)")
    p.add_argument("--listen", help="host[:port] for the provisioning channel")
    p.add_argument("--trace", help="write the boot transcript as JSON lines")
    p.set_defaults(func=_cmd_guest_boot)
    p = guest_sub.add_parser("agent", parents=[net], help="serve attestation sessions")
    p.add_argument("--bundle", required=True)
    p.add_argument("--sp", required=True)
    p.add_argument("--chain", required=True)
    p.add_argument("--listen", help="host[:port] to bind")
    p.add_argument("--once", action="store_true", help="serve one connection and exit")
    p.set_defaults(func=_cmd_guest_agent)

    p = sub.add_parser("owner", help="owner-side online operations")
    owner_sub = p.add_subparsers(dest="subcommand", required=True)
    p = owner_sub.add_parser("attest", parents=[net], help="request and verify a fresh report")
    p.add_argument("--addr", required=True, help="guest host[:port]")
    p.add_argument("--manifest", required=True, help="bundle manifest (file or bundle dir)")
    p.add_argument("--ark", required=True, help="trusted root public key file")
    p.set_defaults(func=_cmd_owner_attest)
    p = owner_sub.add_parser("provision", parents=[net], help="attest and deliver the disk key")
    p.add_argument("--addr", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ark", required=True)
    p.add_argument("--keyfile", required=True)
    p.set_defaults(func=_cmd_owner_provision)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except _UsageError as exc:
        _diag(f"error: {exc}")
        return EXIT_USAGE
    except FileNotFoundError as exc:
        _diag(f"error: {exc}")
        return EXIT_USAGE
    except (MalformedError, ValueError) as exc:
        _diag(f"error: {exc}")
        return EXIT_USAGE
    except SnpGuardError as exc:
        _diag(f"error: {exc}")
        return EXIT_VERIFY


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
