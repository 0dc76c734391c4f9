"""Ledger replay: access evidence, denial checks, and offender identification.

Replay needs no private material. Broadcasts are verified against the
public-key directory stored in the ledger header; sealed envelopes are
judged by their headers only (sender, receivers, context) plus the fact that
the chain attributes the carrying transactions to that sender.

A node N has *proven access* to file F once the ledger holds N's
ShareRequest and enough share holders (per the source's lookup list) have
answered that reference with a response sealed to N. N's own assigned share
counts toward the threshold, since that share was delivered to N on the
ledger as well.
"""

from __future__ import annotations

import base64
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from . import crypto, messaging, sharing
from .crypto import Digest, PublicIdentity
from .errors import (
    AuthenticationFailure,
    CorruptWrappedKey,
    EvidenceIncomplete,
    ForgedMessage,
    LedgerError,
    ParseError,
    ReconstructionImpossible,
    ReplayError,
    UnknownAccess,
    UnwrapFailure,
)
from .ledger import Ledger, reassemble_blocks
from .sharing import SecretShare, ShareDigestList, ShareScheme

EVENT_KINDS = (
    "FileAnnounced",
    "ShareDistributed",
    "ShareRequested",
    "ShareResponded",
    "AccessProven",
    "VersionUpdated",
    "Revoked",
    "ForgedUpdateRejected",
)

OFFENSES = ("WrongShare", "SilentHolder", "ForgedUpdate", "JunkUpload")


@dataclass(frozen=True)
class AuditEvent:
    kind: str
    actor: str
    file_id: str
    version: Optional[int]
    block_height: int
    txids: tuple
    message_reference: Optional[str] = None
    target: Optional[str] = None
    stale: bool = False
    branch: str = "main"

    def identity(self) -> tuple:
        return (self.kind, self.actor, self.file_id, self.version, self.txids,
                self.message_reference, self.target)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "actor": self.actor,
            "file_id": self.file_id,
            "version": self.version,
            "block_height": self.block_height,
            "txids": list(self.txids),
            "message_reference": self.message_reference,
            "target": self.target,
            "stale": self.stale,
            "branch": self.branch,
        }


@dataclass
class _Request:
    requester: str
    file_id: str
    version: int
    height: int
    responders: set = field(default_factory=set)
    proven: bool = False


@dataclass
class AuditTrail:
    """Everything replay learns from the public ledger."""

    events: list
    manifests: dict  # file_id -> FileAnnouncement command body
    schemes: dict  # (file_id, version) -> {"k", "n", "revoked"}
    lookup: dict  # (file_id, version) -> {index: node}
    digest_lists: dict  # (file_id, version) -> ShareDigestList
    directory: dict
    skipped: int = 0

    def access_proven(self, exclude_refs: Iterable[str] = ()) -> set:
        excluded = set(exclude_refs)
        return {
            (e.actor, e.file_id) for e in self.events
            if e.kind == "AccessProven" and e.message_reference not in excluded
        }


def _directory_from(meta: dict) -> dict:
    raw = meta.get("directory")
    if not isinstance(raw, dict):
        raise ReplayError("ledger header carries no public-key directory", line=1)
    return {
        node: PublicIdentity(node, base64.b64decode(keys["signing"]), base64.b64decode(keys["encryption"]))
        for node, keys in raw.items()
    }


def directory_meta(directory: Mapping[str, PublicIdentity]) -> dict:
    """Ledger-header form of a public-key directory."""
    return {
        "directory": {
            node: {
                "signing": messaging.b64(pub.signing_key),
                "encryption": messaging.b64(pub.encryption_key),
            }
            for node, pub in sorted(directory.items())
        }
    }


class _Replayer:
    def __init__(self, directory, branch):
        self.directory = directory
        self.branch = branch
        self.events = []
        self.manifests = {}
        self.schemes = {}
        self.latest = {}
        self.lookup = {}
        self.digest_lists = {}
        self.requests: dict[str, _Request] = {}
        self.skipped = 0

    def _emit(self, kind, actor, file_id, version, msg, **extra):
        self.events.append(AuditEvent(
            kind, actor, file_id, version, msg.height, msg.txids, branch=self.branch, **extra
        ))

    def _source(self, file_id):
        m = self.manifests.get(file_id)
        return m["source_node"] if m else None

    def feed(self, msg):
        try:
            env = messaging.parse_xml(msg.data)
        except ParseError:
            self.skipped += 1
            return
        if env.sender_id != msg.submitter:
            self.skipped += 1
            return
        if env.is_broadcast:
            self._broadcast(env, msg)
        else:
            self._sealed(env, msg)

    def _broadcast(self, env, msg):
        try:
            cmd = messaging.open_envelope(env, None, self.directory)
        except (ForgedMessage, ParseError):
            self.skipped += 1
            return
        sender, t = env.sender_id, cmd.type
        if t == "FileAnnouncement":
            if cmd["source_node"] == sender and cmd["file_id"] not in self.manifests:
                self.manifests[cmd["file_id"]] = dict(cmd.body)
                self._emit("FileAnnounced", sender, cmd["file_id"], None, msg)
        elif t == "ShareVersionUpdate":
            file_id, version = cmd["file_id"], cmd["version"]
            if sender != self._source(file_id):
                self._emit("ForgedUpdateRejected", sender, file_id, version, msg)
            elif version > self.latest.get(file_id, 0):
                self.latest[file_id] = version
                self.schemes[(file_id, version)] = {
                    "k": cmd["scheme"]["k"], "n": cmd["scheme"]["n"], "revoked": bool(cmd["revoked"]),
                }
                self._emit("Revoked" if cmd["revoked"] else "VersionUpdated", sender, file_id, version, msg)
        elif t == "ShareLookupList":
            if sender == self._source(cmd["file_id"]):
                self.lookup[(cmd["file_id"], cmd["version"])] = {
                    a["share_index"]: a["node_id"] for a in cmd["assignments"]
                }
        elif t == "ShareDigestBroadcast":
            if sender == self._source(cmd["file_id"]):
                self.digest_lists[(cmd["file_id"], cmd["version"])] = ShareDigestList(
                    cmd["file_id"], cmd["version"],
                    {d["share_index"]: Digest.from_hex(d["digest_hex"]) for d in cmd["digests"]},
                )
        elif t == "ShareRequest":
            file_id, version, ref = cmd["file_id"], cmd["version"], cmd["message_reference"]
            stale = version < self.latest.get(file_id, 0)
            self._emit("ShareRequested", sender, file_id, version, msg, message_reference=ref, stale=stale)
            self.requests.setdefault(ref, _Request(sender, file_id, version, msg.height))
        else:
            self.skipped += 1

    def _sealed(self, env, msg):
        ctx = env.context
        if ctx is None or len(env.receivers) != 1:
            self.skipped += 1
            return
        sender, target = env.sender_id, env.receiver_ids[0]
        if ctx.command_type == "ShareDistribution":
            if sender == self._source(ctx.file_id):
                self._emit("ShareDistributed", sender, ctx.file_id, ctx.version, msg, target=target)
        elif ctx.command_type == "ShareResponse":
            self._emit("ShareResponded", sender, ctx.file_id, ctx.version, msg,
                       message_reference=ctx.reference, target=target)
            req = self.requests.get(ctx.reference)
            if req is None or req.proven or target != req.requester:
                return
            if (ctx.file_id, ctx.version) != (req.file_id, req.version):
                return
            holders = set(self.lookup.get((req.file_id, req.version), {}).values())
            if sender in holders and sender != req.requester:
                req.responders.add(sender)
            scheme = self.schemes.get((req.file_id, req.version))
            if scheme is None or scheme["revoked"]:
                return
            count = len(req.responders) + (req.requester in holders)
            if count >= scheme["n"]:
                req.proven = True
                self._emit("AccessProven", req.requester, req.file_id, req.version, msg,
                           message_reference=ctx.reference)
        else:
            self.skipped += 1


def _load(ledger_log) -> Ledger:
    if isinstance(ledger_log, Ledger):
        return ledger_log
    if isinstance(ledger_log, bytes):
        ledger_log = ledger_log.decode("utf-8")
    try:
        return Ledger.loads(ledger_log)
    except LedgerError as exc:
        raise ReplayError(str(exc).split(": ", 1)[-1], line=getattr(exc, "line", None)) from None


def audit_ledger(ledger_log, include_retained: bool = True) -> AuditTrail:
    """Replay a ledger (object or persisted log text) into an :class:`AuditTrail`.

    With ``include_retained`` every reverted branch is replayed on top of its
    own prefix and the results merged, so evidence dropped from the main
    branch by a revert still counts.
    """
    ledger = _load(ledger_log)
    directory = _directory_from(ledger.meta)
    lineages = ledger.lineages() if include_retained else [ledger.main_branch]
    merged = {}
    first = None
    skipped = 0
    for rank, blocks in enumerate(lineages):
        rp = _Replayer(directory, "main" if rank == 0 else f"retained-{rank}")
        for msg in reassemble_blocks(blocks).messages:
            rp.feed(msg)
        if first is None:
            first = rp
        skipped += rp.skipped
        for seq, event in enumerate(rp.events):
            merged.setdefault(event.identity(), (event.block_height, rank, seq, event))
        for attr in ("manifests", "schemes", "lookup", "digest_lists"):
            for k, v in getattr(rp, attr).items():
                getattr(first, attr).setdefault(k, v)
    events = [e for *_, e in sorted(merged.values(), key=lambda t: t[:3])]
    return AuditTrail(events, first.manifests, first.schemes, first.lookup,
                      first.digest_lists, directory, skipped)


def replay(ledger_log, include_retained: bool = True) -> list[AuditEvent]:
    return audit_ledger(ledger_log, include_retained).events


def first_access_report(events: Sequence[AuditEvent], file_id: str,
                        exclude_refs: Iterable[str] = ()) -> dict:
    """node -> block height of its earliest proven access to ``file_id`` (publisher never listed)."""
    excluded = set(exclude_refs)
    sources = {e.actor for e in events if e.kind == "FileAnnounced" and e.file_id == file_id}
    out = {}
    for e in events:
        if (e.kind == "AccessProven" and e.file_id == file_id and e.actor not in sources
                and e.message_reference not in excluded):
            out[e.actor] = min(out.get(e.actor, e.block_height), e.block_height)
    return out


# -- denial claims -------------------------------------------------------------


@dataclass(frozen=True)
class DenialClaim:
    """A node disputing that one of its AccessProven events gave it the plaintext.

    Evidence is either the claimant's private key-wrapping key (the auditor
    re-opens the sealed shares itself) or the decrypted share values. The
    encrypted file is attached so the auditor can test reconstructed keys.
    """

    claimant: str
    file_id: str
    message_reference: str
    ciphertext: bytes = field(repr=False)
    private_key: Optional[bytes] = field(default=None, repr=False)
    shares: Optional[tuple] = None  # ((index, value), ...)

    def to_json(self) -> dict:
        evidence = {}
        if self.private_key is not None:
            evidence["private_key"] = messaging.b64(self.private_key)
        if self.shares is not None:
            evidence["shares"] = [
                {"share_index": i, "share_value": messaging.b64(v)} for i, v in self.shares
            ]
        return {
            "format_version": 1,
            "claimant": self.claimant,
            "file_id": self.file_id,
            "message_reference": self.message_reference,
            "ciphertext": messaging.b64(self.ciphertext),
            "evidence": evidence,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DenialClaim":
        try:
            evidence = obj.get("evidence", {})
            shares = evidence.get("shares")
            return cls(
                obj["claimant"], obj["file_id"], obj["message_reference"],
                messaging.unb64(obj["ciphertext"]),
                messaging.unb64(evidence["private_key"]) if "private_key" in evidence else None,
                tuple((s["share_index"], messaging.unb64(s["share_value"])) for s in shares)
                if shares is not None else None,
            )
        except (KeyError, TypeError, ParseError) as exc:
            raise EvidenceIncomplete(f"malformed claim: {exc}") from None


@dataclass
class DenialVerdict:
    outcome: str  # Upheld | Refuted
    transcript: dict

    def to_json(self) -> dict:
        return {"outcome": self.outcome, "transcript": self.transcript}


def _envelopes_for(ledger: Ledger, claimant: str, file_id: str, version: int, reference: str):
    """Sealed ShareResponses for ``reference`` and the claimant's own ShareDistribution."""
    responses, distribution = [], None
    for msg in ledger.reassemble(include_retained=True).messages:
        try:
            env = messaging.parse_xml(msg.data)
        except ParseError:
            continue
        ctx = env.context
        if ctx is None or env.sender_id != msg.submitter or env.receiver_ids != (claimant,):
            continue
        if ctx.command_type == "ShareResponse" and ctx.reference == reference:
            responses.append(env)
        elif (ctx.command_type == "ShareDistribution" and distribution is None
              and (ctx.file_id, ctx.version) == (file_id, version)):
            distribution = env
    return responses, distribution


def verify_denial(claim: DenialClaim, ledger_log, manifests: Optional[dict] = None) -> DenialVerdict:
    """Replay the disputed reconstruction. Refuted if the evidence yields a working key."""
    ledger = _load(ledger_log)
    trail = audit_ledger(ledger)
    access = [
        e for e in trail.events
        if e.kind == "AccessProven" and e.actor == claim.claimant
        and e.file_id == claim.file_id and e.message_reference == claim.message_reference
    ]
    if not access:
        raise UnknownAccess(f"no AccessProven for {claim.claimant} / {claim.message_reference}")
    version = access[0].version
    manifest = (manifests or trail.manifests).get(claim.file_id)
    if manifest is None:
        raise EvidenceIncomplete(f"file {claim.file_id} was never announced")
    ciphertext_digest = manifest["ciphertext_digest"] if isinstance(manifest, dict) else manifest.ciphertext_digest.hex
    plaintext_digest = manifest["plaintext_digest"] if isinstance(manifest, dict) else manifest.plaintext_digest.hex
    if crypto.hash(claim.ciphertext).hex != ciphertext_digest:
        raise EvidenceIncomplete("attached ciphertext does not match the announced digest")
    holders = trail.lookup.get((claim.file_id, version), {})
    transcript = {"version": version, "responses": []}
    shares: dict[int, SecretShare] = {}

    if claim.private_key is not None:
        claimant_pub = trail.directory.get(claim.claimant)
        try:
            derived = crypto.public_encryption_key(claim.private_key)
        except UnwrapFailure:
            derived = None
        if claimant_pub is None or derived != claimant_pub.encryption_key:
            raise EvidenceIncomplete("disclosed private key does not match the claimant's public key")
        responses, distribution = _envelopes_for(
            ledger, claim.claimant, claim.file_id, version, claim.message_reference
        )
        for env in ([distribution] if distribution else []) + responses:
            entry = {"sender": env.sender_id, "type": env.context.command_type}
            try:
                cmd = messaging.open_envelope(env, claim.claimant, trail.directory,
                                              private_key=claim.private_key)
            except CorruptWrappedKey:
                entry["status"] = "undecodable"
            except ForgedMessage:
                entry["status"] = "forged"
            else:
                idx = cmd["share_index"]
                if holders.get(idx) != env.sender_id and env.context.command_type == "ShareResponse":
                    entry["status"] = "not-assigned-holder"
                else:
                    entry.update(status="decoded", share_index=idx)
                    shares.setdefault(idx, SecretShare(
                        claim.file_id, idx, version, messaging.unb64(cmd["share_value"])
                    ))
            transcript["responses"].append(entry)
    elif claim.shares is not None:
        for idx, value in claim.shares:
            shares.setdefault(idx, SecretShare(claim.file_id, idx, version, value))
        transcript["responses"] = [{"share_index": i, "status": "disclosed"} for i in sorted(shares)]
    else:
        raise EvidenceIncomplete("claim carries neither a private key nor share values")

    scheme_info = trail.schemes[(claim.file_id, version)]
    scheme = ShareScheme(scheme_info["k"], scheme_info["n"], version)
    ct = crypto.Ciphertext.from_bytes(claim.ciphertext)

    def accept(key):
        try:
            return crypto.hash(crypto.decrypt(key, ct)).hex == plaintext_digest
        except AuthenticationFailure:
            return False

    transcript["shares_available"] = len(shares)
    transcript["threshold"] = scheme.n
    if len(shares) < scheme.n:
        transcript["result"] = "too few decodable shares"
        return DenialVerdict("Upheld", transcript)
    try:
        key, _, bad = sharing.reconstruct_with_faults(
            [shares[i] for i in sorted(shares)], scheme, accept
        )
    except ReconstructionImpossible:
        transcript["result"] = "no subset of shares yields a key that decrypts the file"
        return DenialVerdict("Upheld", transcript)
    transcript["result"] = "shares reconstruct a key that decrypts the file"
    transcript["bad_indices"] = sorted(bad)
    transcript["key_digest"] = crypto.hash(key.material).hex
    return DenialVerdict("Refuted", transcript)


# -- offenders -----------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Offense:
    node: str
    offense: str
    file_id: Optional[str] = None
    message_reference: Optional[str] = None
    count: int = 1

    def to_json(self) -> dict:
        return {
            "node": self.node, "offense": self.offense, "file_id": self.file_id,
            "message_reference": self.message_reference, "count": self.count,
        }


def identify_malicious(
    events: Sequence[AuditEvent],
    digest_lists: Mapping[tuple, ShareDigestList],
    disclosed_shares: Iterable[tuple] = (),
    *,
    lookup: Optional[Mapping[tuple, dict]] = None,
    budget: int = 3,
    departed: Optional[Mapping[str, int]] = None,
    junk_rejections: Optional[Mapping[str, int]] = None,
) -> list[Offense]:
    """Name nodes that sent wrong shares, stayed silent, forged updates or uploaded junk.

    ``disclosed_shares`` holds (reference, responder, SecretShare) triples that
    requesters decrypted. ``departed`` maps node -> height it left the pool;
    holders that left before a request are not counted as silent.
    """
    found = set()
    for ref, responder, share in disclosed_shares:
        dl = digest_lists.get((share.file_id, share.version))
        if dl is None or share.index not in dl.digests:
            continue
        if not sharing.verify_against_digests(share, dl):
            found.add(Offense(responder, "WrongShare", share.file_id, ref))

    if lookup is not None:
        departed = departed or {}
        answered = defaultdict(set)
        for e in events:
            if e.kind == "ShareResponded":
                answered[e.message_reference].add((e.actor, e.block_height))
        for e in events:
            if e.kind != "ShareRequested":
                continue
            holders = set(lookup.get((e.file_id, e.version), {}).values())
            in_time = {a for a, h in answered[e.message_reference] if h <= e.block_height + budget}
            for holder in sorted(holders - in_time - {e.actor}):
                if holder in departed and departed[holder] <= e.block_height:
                    continue
                found.add(Offense(holder, "SilentHolder", e.file_id, e.message_reference))

    for e in events:
        if e.kind == "ForgedUpdateRejected":
            found.add(Offense(e.actor, "ForgedUpdate", e.file_id))

    for uploader, count in sorted((junk_rejections or {}).items()):
        if count:
            found.add(Offense(uploader, "JunkUpload", count=count))
    return sorted(found, key=lambda o: (o.node, o.offense, o.file_id or "", o.message_reference or ""))
