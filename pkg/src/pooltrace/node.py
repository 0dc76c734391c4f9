"""Per-partner node: publish, fetch, answer share requests, reissue and revoke.

All side effects go through the shared :class:`Pool` (ledger submissions and
block-network calls). Nodes never touch each other's state; the simulator
delivers confirmed ledger messages to every member one at a time.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Optional

from . import crypto, messaging, sharing
from .blockstore import BlockKey, BlockNetwork, StoredBlock, chunk
from .crypto import Digest, NodeIdentity, PublicIdentity, SymmetricKey
from .errors import (
    AuthenticationFailure,
    CorruptWrappedKey,
    EmptyFile,
    ForgedMessage,
    MissingDigest,
    NotAuthorized,
    NotRecipient,
    ParseError,
    ReconstructionImpossible,
    Unavailable,
    UnknownFile,
)
from .ledger import Ledger
from .messaging import Command, MessageEnvelope
from .sharing import SecretShare, ShareDigestList, ShareScheme

log = logging.getLogger(__name__)

BEHAVIORS = ("honest", "silent", "wrong_share", "junk_uploader")
JUNK_BLOCKS_PER_ROUND = 2


@dataclass(frozen=True)
class PoolConfig:
    block_size: int = 1024
    replication: int = 2
    round_budget: int = 3


@dataclass(frozen=True)
class FileManifest:
    file_id: str
    file_name: str
    source_node: str
    block_count: int
    metadata: dict
    plaintext_digest: Digest
    ciphertext_digest: Digest

    def to_command(self) -> Command:
        return Command.create(
            "FileAnnouncement",
            file_id=self.file_id,
            file_name=self.file_name,
            source_node=self.source_node,
            block_count=self.block_count,
            metadata=self.metadata,
            plaintext_digest=self.plaintext_digest.hex,
            ciphertext_digest=self.ciphertext_digest.hex,
        )

    @classmethod
    def from_command(cls, cmd: Command) -> "FileManifest":
        return cls(
            cmd["file_id"], cmd["file_name"], cmd["source_node"], int(cmd["block_count"]),
            dict(cmd["metadata"]), Digest.from_hex(cmd["plaintext_digest"]),
            Digest.from_hex(cmd["ciphertext_digest"]),
        )


@dataclass(frozen=True)
class SchemeInfo:
    """Public part of a share version: (k, n), and whether it is a revocation."""

    k: int
    n: int
    version: int
    revoked: bool = False

    def scheme(self) -> ShareScheme:
        return ShareScheme(self.k, self.n, self.version)


@dataclass(frozen=True)
class Acquisition:
    """Ground-truth record of a node obtaining a file's plaintext."""

    node: str
    file_id: str
    round: int
    path: str  # publish | protocol | collusion
    reference: Optional[str] = None
    shares_used: int = 0


@dataclass
class FetchOutcome:
    file_id: str
    status: str = "pending"  # pending | ok | cached | failed
    reason: Optional[str] = None
    message_reference: Optional[str] = None
    version: Optional[int] = None
    responses_received: int = 0
    bad_share_indices: tuple = ()
    blocks_local: int = 0
    started: int = 0
    finished: Optional[int] = None
    plaintext: Optional[bytes] = field(default=None, repr=False)
    ciphertext: Optional[bytes] = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status in ("ok", "cached")

    def to_json(self) -> dict:
        return {
            "file_id": self.file_id,
            "status": self.status,
            "reason": self.reason,
            "message_reference": self.message_reference,
            "version": self.version,
            "responses_received": self.responses_received,
            "bad_share_indices": list(self.bad_share_indices),
            "blocks_local": self.blocks_local,
            "started": self.started,
            "finished": self.finished,
        }


@dataclass
class _OpenFetch:
    outcome: FetchOutcome
    manifest: FileManifest
    ciphertext: bytes
    deadline: int
    responses: dict = field(default_factory=dict)  # share index -> (responder, SecretShare)


class Pool:
    """Shared environment: ledger, block network, public-key directory, membership, clock."""

    def __init__(self, config: PoolConfig = PoolConfig(), ledger: Optional[Ledger] = None):
        self.config = config
        self.ledger = ledger if ledger is not None else Ledger()
        self.blocks = BlockNetwork(config.block_size, config.replication, responsive=self.responsive)
        self.directory: dict[str, PublicIdentity] = {}
        self.nodes: dict[str, PoolNode] = {}
        self.round = 0
        self.submitted: list[tuple[str, bytes]] = []

    def members(self) -> list[str]:
        return sorted(self.nodes)

    def responsive(self, node_id: str) -> bool:
        node = self.nodes.get(node_id)
        return node is not None and node.behavior != "silent"

    def add(self, node: "PoolNode"):
        self.directory[node.id] = node.identity.public
        self.nodes[node.id] = node
        node.store = self.blocks.join(node.id, node.announced_block_count)

    def remove(self, node_id: str):
        self.nodes.pop(node_id)
        self.blocks.leave(node_id)

    def submit(self, sender: str, envelope: MessageEnvelope) -> list[str]:
        data = messaging.serialize_xml(envelope)
        self.submitted.append((sender, data))
        return self.ledger.submit(sender, data)


class PoolNode:
    def __init__(self, identity: NodeIdentity, pool: Pool, behavior: str = "honest",
                 rng: Optional[random.Random] = None):
        if behavior not in BEHAVIORS:
            raise ValueError(f"unknown behavior {behavior!r}")
        self.identity = identity
        self.pool = pool
        self.behavior = behavior
        self.rng = rng if rng is not None else random.Random(identity.id)
        self.store = None
        self.manifests: dict[str, FileManifest] = {}
        self.schemes: dict[str, dict[int, SchemeInfo]] = {}
        self.lookup: dict[tuple, dict[int, str]] = {}
        self.digest_lists: dict[tuple, ShareDigestList] = {}
        self.share_store: dict[tuple, SecretShare] = {}
        self.files_local: dict[str, bytes] = {}
        self.keys_local: dict[str, tuple] = {}  # file_id -> (key, salt, version)
        self.open_requests: dict[str, _OpenFetch] = {}
        self.outcomes: list[FetchOutcome] = []
        self.acquisitions: list[Acquisition] = []
        self.received_shares: list[tuple] = []  # (reference, responder, SecretShare)
        self.forged_dropped = 0
        self.rejected_updates = 0
        self._pending_uploads: dict[str, list[StoredBlock]] = {}
        self._confirmed_uploads: list[str] = []
        self.junk_offers = 0  # (block, replica) pairs offered by a junk uploader

    @property
    def id(self) -> str:
        return self.identity.id

    def __repr__(self):
        return f"PoolNode({self.id!r}, {self.behavior})"

    def announced_block_count(self, file_id: str) -> Optional[int]:
        m = self.manifests.get(file_id)
        return m.block_count if m else None

    def latest_version(self, file_id: str) -> Optional[int]:
        versions = self.schemes.get(file_id)
        return max(versions) if versions else None

    # -- sending -----------------------------------------------------------

    def _broadcast(self, command: Command):
        return self.pool.submit(self.id, messaging.build_broadcast(self.identity, command))

    def _seal(self, recipients: list[str], command: Command) -> MessageEnvelope:
        pubs = [self.pool.directory[r] for r in recipients]
        envelope = messaging.build_sealed(self.identity, pubs, command, self.rng)
        self.pool.submit(self.id, envelope)
        return envelope

    def _acquire(self, file_id, plaintext, path, reference=None, shares_used=0):
        self.files_local[file_id] = plaintext
        self.acquisitions.append(
            Acquisition(self.id, file_id, self.pool.round, path, reference, shares_used)
        )

    # -- publishing --------------------------------------------------------

    def publish(self, file_name: str, content: bytes, metadata: Optional[dict] = None) -> FileManifest:
        if not content:
            raise EmptyFile("cannot publish an empty file")
        key = crypto.generate_key(self.rng)
        ciphertext = crypto.encrypt(key, content, self.rng).to_bytes()
        file_id = self.rng.randbytes(16).hex()
        pieces = chunk(ciphertext, self.pool.config.block_size)
        manifest = FileManifest(
            file_id, file_name, self.id, len(pieces), dict(metadata or {}),
            crypto.hash(content), crypto.hash(ciphertext),
        )
        self.manifests[file_id] = manifest
        self._pending_uploads[file_id] = [
            StoredBlock.make(BlockKey(file_id, i), p) for i, p in enumerate(pieces)
        ]
        self._broadcast(manifest.to_command())

        members = self.pool.members()
        scheme = ShareScheme.auto(len(members), 1, self.rng)
        shares = sharing.split(key, scheme.salt, scheme, self.rng, file_id)
        self._distribute(file_id, scheme, shares, members, revoked=False)

        self.keys_local[file_id] = (key, scheme.salt, 1)
        self._acquire(file_id, content, "publish")
        return manifest

    def _distribute(self, file_id, scheme: ShareScheme, shares, members, revoked: bool):
        scheme_json = {"k": scheme.k, "n": scheme.n}
        self._broadcast(Command.create(
            "ShareVersionUpdate", file_id=file_id, version=scheme.version,
            scheme=scheme_json, revoked=revoked,
        ))
        # share index i goes to the i-th member in canonical id order
        for share, holder in zip(shares, members):
            self._seal([holder], Command.create(
                "ShareDistribution", file_id=file_id, version=scheme.version,
                scheme=scheme_json, share_index=share.index,
                share_value=messaging.b64(share.value),
            ))
        self._broadcast(Command.create(
            "ShareLookupList", file_id=file_id, version=scheme.version,
            assignments=[{"share_index": s.index, "node_id": m} for s, m in zip(shares, members)],
        ))
        digests = ShareDigestList.from_shares(shares)
        self._broadcast(Command.create(
            "ShareDigestBroadcast", file_id=file_id, version=scheme.version,
            digests=[{"share_index": i, "digest_hex": d.hex} for i, d in sorted(digests.digests.items())],
        ))

    def _require_source(self, file_id):
        manifest = self.manifests.get(file_id)
        if manifest is None:
            raise UnknownFile(file_id)
        if manifest.source_node != self.id or file_id not in self.keys_local:
            raise NotAuthorized(f"{self.id} is not the source of {file_id}")
        return manifest

    def reissue_shares(self, file_id: str) -> int:
        """New salt and version over the current membership; old shares stay but cannot mix."""
        self._require_source(file_id)
        key, _, version = self.keys_local[file_id]
        new_version = max(version, self.latest_version(file_id) or 0) + 1
        members = self.pool.members()
        scheme = ShareScheme.auto(len(members), new_version, self.rng)
        shares = sharing.split(key, scheme.salt, scheme, self.rng, file_id)
        self._distribute(file_id, scheme, shares, members, revoked=False)
        self.keys_local[file_id] = (key, scheme.salt, new_version)
        return new_version

    def revoke(self, file_id: str) -> int:
        """Publish a version of random pseudo shares so no newer fetch can rebuild the key."""
        self._require_source(file_id)
        key, salt, version = self.keys_local[file_id]
        new_version = max(version, self.latest_version(file_id) or 0) + 1
        members = self.pool.members()
        scheme = ShareScheme.auto(len(members), new_version, self.rng)
        shares = sharing.make_pseudo_shares(file_id, scheme, self.rng)
        self._distribute(file_id, scheme, shares, members, revoked=True)
        self.keys_local[file_id] = (key, salt, new_version)
        return new_version

    def forge_version_update(self, file_id: str, revoked: bool = True) -> int:
        """Adversarial: broadcast a version update for a file this node does not own."""
        latest = self.latest_version(file_id) or 0
        k = len(self.pool.members())
        self._broadcast(Command.create(
            "ShareVersionUpdate", file_id=file_id, version=latest + 1,
            scheme={"k": k, "n": sharing.derive_threshold(k)}, revoked=revoked,
        ))
        return latest + 1

    # -- fetching ----------------------------------------------------------

    def fetch(self, file_id: str) -> FetchOutcome:
        manifest = self.manifests.get(file_id)
        if manifest is None:
            raise UnknownFile(file_id)
        outcome = FetchOutcome(file_id, started=self.pool.round)
        self.outcomes.append(outcome)
        if file_id in self.files_local:
            outcome.status = "cached"
            outcome.finished = self.pool.round
            outcome.plaintext = self.files_local[file_id]
            return outcome

        pieces = []
        try:
            for i in range(manifest.block_count):
                got = self.pool.blocks.get_block(self.id, BlockKey(file_id, i), source=manifest.source_node)
                outcome.blocks_local += got.provider == self.id
                pieces.append(got.block.data)
        except Unavailable as exc:
            return self._finish(outcome, "failed", f"BlocksUnavailable: {exc}")
        ciphertext = b"".join(pieces)
        if crypto.hash(ciphertext) != manifest.ciphertext_digest:
            return self._finish(outcome, "failed", "BlocksUnavailable: ciphertext digest mismatch")

        outcome.ciphertext = ciphertext
        version = self.latest_version(file_id) or 1
        reference = messaging.new_reference(self.rng)
        outcome.message_reference = reference
        outcome.version = version
        self._broadcast(Command.create(
            "ShareRequest", file_id=file_id, version=version, message_reference=reference,
        ))
        self.open_requests[reference] = _OpenFetch(
            outcome, manifest, ciphertext, self.pool.round + self.pool.config.round_budget
        )
        return outcome

    def _finish(self, outcome, status, reason=None, bad=()):
        outcome.status = status
        outcome.reason = reason
        outcome.bad_share_indices = tuple(sorted(bad))
        outcome.finished = self.pool.round
        if outcome.message_reference:
            self.open_requests.pop(outcome.message_reference, None)
        return outcome

    def _validator(self, manifest, ciphertext):
        ct = crypto.Ciphertext.from_bytes(ciphertext)

        def accept(key: SymmetricKey) -> bool:
            try:
                return crypto.hash(crypto.decrypt(key, ct)) == manifest.plaintext_digest
            except AuthenticationFailure:
                return False
        return accept

    def _available_shares(self, pending: _OpenFetch) -> list[SecretShare]:
        out = {idx: share for idx, (_, share) in pending.responses.items()}
        own = self.share_store.get((pending.outcome.file_id, pending.outcome.version))
        if own is not None:
            out.setdefault(own.index, own)
        return [out[i] for i in sorted(out)]

    def _try_reconstruct(self, pending: _OpenFetch, info: SchemeInfo):
        """Returns (plaintext or None, bad indices)."""
        shares = self._available_shares(pending)
        accept = self._validator(pending.manifest, pending.ciphertext)
        scheme = info.scheme()
        bad = set()
        digests = self.digest_lists.get((pending.outcome.file_id, info.version))
        if digests is not None:
            good = []
            for share in shares:
                try:
                    ok = sharing.verify_against_digests(share, digests)
                except MissingDigest:
                    ok = False
                if ok:
                    good.append(share)
                else:
                    bad.add(share.index)
            if len(good) >= scheme.n:
                key, _ = sharing.reconstruct(good, scheme)
                if accept(key):
                    return key, bad
        try:
            key, _, faulty = sharing.reconstruct_with_faults(shares, scheme, accept)
        except ReconstructionImpossible:
            return None, bad
        return key, bad | set(faulty)

    def _progress(self, reference: str):
        pending = self.open_requests[reference]
        outcome = pending.outcome
        info = self.schemes.get(outcome.file_id, {}).get(outcome.version)
        if info is None:
            if self.pool.round >= pending.deadline:
                self._finish(outcome, "failed", "InsufficientResponses")
            return
        shares = self._available_shares(pending)
        holders = set(self.lookup.get((outcome.file_id, outcome.version), {}).values()) - {self.id}
        everyone_answered = holders <= {r for r, _ in pending.responses.values()}
        timed_out = self.pool.round >= pending.deadline
        if len(shares) < info.n:
            if timed_out or everyone_answered:
                self._finish(outcome, "failed", "InsufficientResponses")
            return
        key, bad = self._try_reconstruct(pending, info)
        if key is None:
            if timed_out or everyone_answered:
                self._finish(outcome, "failed", "ReconstructionImpossible", bad)
            return
        plaintext = crypto.decrypt(key, crypto.Ciphertext.from_bytes(pending.ciphertext))
        outcome.plaintext = plaintext
        self._acquire(outcome.file_id, plaintext, "protocol", reference, len(shares))
        self._finish(outcome, "ok", None, bad)

    def collude(self, file_id: str, partners: list["PoolNode"]) -> bool:
        """Out-of-band cheat: pool the partners' shares directly, leaving no ledger trace."""
        manifest = self.manifests[file_id]
        version = self.latest_version(file_id)
        info = self.schemes[file_id][version]
        pooled = {}
        for node in [self, *partners]:
            share = node.share_store.get((file_id, version))
            if share is not None:
                pooled.setdefault(share.index, share)
        if len(pooled) < info.n:
            return False
        try:
            pieces = [
                self.pool.blocks.get_block(self.id, BlockKey(file_id, i), source=manifest.source_node).block.data
                for i in range(manifest.block_count)
            ]
        except Unavailable:
            return False
        ciphertext = b"".join(pieces)
        try:
            key, _, _ = sharing.reconstruct_with_faults(
                list(pooled.values()), info.scheme(), self._validator(manifest, ciphertext)
            )
        except ReconstructionImpossible:
            return False
        plaintext = crypto.decrypt(key, crypto.Ciphertext.from_bytes(ciphertext))
        self._acquire(file_id, plaintext, "collusion", shares_used=len(pooled))
        return True

    # -- answering ---------------------------------------------------------

    def respond_share_request(self, request: Command, requester: str) -> Optional[MessageEnvelope]:
        share = self.share_store.get((request["file_id"], request["version"]))
        if share is None or self.behavior == "silent" or requester not in self.pool.directory:
            return None
        value = share.value
        if self.behavior == "wrong_share":
            noise = bytes(self.rng.randrange(1, 256) for _ in value)
            value = bytes(a ^ b for a, b in zip(value, noise))
        return self._seal([requester], Command.create(
            "ShareResponse", file_id=share.file_id, version=share.version,
            share_index=share.index, share_value=messaging.b64(value),
            message_reference=request["message_reference"],
        ))

    # -- incoming ----------------------------------------------------------

    def handle_incoming(self, envelope: MessageEnvelope, replay: bool = False):
        if (not envelope.is_broadcast and envelope.sender_id == self.id
                and self.id not in envelope.receiver_ids):
            return  # own outgoing sealed message; nothing new to learn
        try:
            cmd = messaging.open_envelope(envelope, self.identity, self.pool.directory)
        except NotRecipient:
            return
        except (ForgedMessage, CorruptWrappedKey, ParseError) as exc:
            log.debug("%s dropped message from %s: %s", self.id, envelope.sender_id, exc)
            self.forged_dropped += 1
            return
        sender = envelope.sender_id
        handler = getattr(self, f"_on_{cmd.type}")
        handler(cmd, sender, replay)

    def _from_source(self, cmd, sender) -> bool:
        manifest = self.manifests.get(cmd["file_id"])
        return manifest is not None and manifest.source_node == sender

    def _on_FileAnnouncement(self, cmd, sender, replay):
        if cmd["source_node"] != sender:
            self.forged_dropped += 1
            return
        manifest = FileManifest.from_command(cmd)
        self.manifests.setdefault(manifest.file_id, manifest)
        if sender == self.id and manifest.file_id in self._pending_uploads and not replay:
            self._confirmed_uploads.append(manifest.file_id)

    def _on_ShareVersionUpdate(self, cmd, sender, replay):
        if not self._from_source(cmd, sender):
            self.rejected_updates += 1
            return
        file_id, version = cmd["file_id"], cmd["version"]
        latest = self.latest_version(file_id) or 0
        if version <= latest:
            self.rejected_updates += 1
            return
        scheme = cmd["scheme"]
        self.schemes.setdefault(file_id, {})[version] = SchemeInfo(
            scheme["k"], scheme["n"], version, bool(cmd["revoked"])
        )

    def _on_ShareLookupList(self, cmd, sender, replay):
        if self._from_source(cmd, sender):
            self.lookup[(cmd["file_id"], cmd["version"])] = {
                a["share_index"]: a["node_id"] for a in cmd["assignments"]
            }

    def _on_ShareDigestBroadcast(self, cmd, sender, replay):
        if self._from_source(cmd, sender):
            self.digest_lists[(cmd["file_id"], cmd["version"])] = ShareDigestList(
                cmd["file_id"], cmd["version"],
                {d["share_index"]: Digest.from_hex(d["digest_hex"]) for d in cmd["digests"]},
            )

    def _on_ShareDistribution(self, cmd, sender, replay):
        if not self._from_source(cmd, sender):
            self.forged_dropped += 1
            return
        self.share_store[(cmd["file_id"], cmd["version"])] = SecretShare(
            cmd["file_id"], cmd["share_index"], cmd["version"], messaging.unb64(cmd["share_value"])
        )

    def _on_ShareRequest(self, cmd, sender, replay):
        if replay or sender == self.id:
            return
        self.respond_share_request(cmd, sender)

    def _on_ShareResponse(self, cmd, sender, replay):
        if sender == self.id:
            return
        pending = self.open_requests.get(cmd["message_reference"])
        if pending is None:
            return
        outcome = pending.outcome
        if cmd["file_id"] != outcome.file_id or cmd["version"] != outcome.version:
            return
        holder = self.lookup.get((outcome.file_id, outcome.version), {}).get(cmd["share_index"])
        if holder != sender:
            self.forged_dropped += 1
            return
        share = SecretShare(
            cmd["file_id"], cmd["share_index"], cmd["version"], messaging.unb64(cmd["share_value"])
        )
        pending.responses.setdefault(share.index, (sender, share))
        outcome.responses_received = len(pending.responses)
        self.received_shares.append((cmd["message_reference"], sender, share))

    # -- post-delivery work ------------------------------------------------

    def tick(self):
        for file_id in self._confirmed_uploads:
            self._upload(file_id)
        self._confirmed_uploads = []
        if self.behavior == "junk_uploader":
            self._upload_junk()
        for reference in sorted(self.open_requests):
            self._progress(reference)

    def _upload(self, file_id):
        blocks = self._pending_uploads.pop(file_id)
        for block in blocks:
            # the source always keeps its original copy
            self.store.blocks[block.key] = block
            self.pool.blocks.upload(self.id, block, exclude=(self.id,))

    def _upload_junk(self):
        for _ in range(JUNK_BLOCKS_PER_ROUND):
            key = BlockKey(self.rng.randbytes(16).hex(), 0)
            self._offer_junk(key)
        for file_id in sorted(self.manifests):
            manifest = self.manifests[file_id]
            self._offer_junk(BlockKey(file_id, manifest.block_count))  # one past the end
            break

    def _offer_junk(self, key):
        block = StoredBlock.make(key, self.rng.randbytes(64))
        self.junk_offers += len(self.pool.blocks.upload(self.id, block, exclude=(self.id,)))
