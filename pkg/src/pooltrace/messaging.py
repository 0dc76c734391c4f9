"""Message envelopes and the protocol command vocabulary.

Envelopes follow the MessageStructure XML layout: a Header with Version,
Sender and Receiver, followed by a Base64 Payload. Broadcast payloads are
``signature || command``; sealed payloads are ``nonce || AES-GCM(k, signature || command)``
with ``k`` wrapped for every receiver and for the sender.

Sealed envelopes additionally carry a public ``Context`` element in the
header (command type, file id, version, message reference). The ledger is
meant to be transparent about *who asked whom for what*; only share values
stay confidential. The context is checked against the signed inner command
when the envelope is opened.
"""

from __future__ import annotations

import base64
import binascii
import json
import random
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

from . import crypto
from .crypto import NodeIdentity, PublicIdentity
from .errors import (
    AuthenticationFailure,
    CorruptWrappedKey,
    ForgedMessage,
    NotRecipient,
    ParseError,
    UnwrapFailure,
    VerificationError,
)

PROTOCOL_VERSION = "1.0.0"

COMMAND_FIELDS = {
    "FileAnnouncement": (
        "file_id", "file_name", "source_node", "block_count",
        "metadata", "plaintext_digest", "ciphertext_digest",
    ),
    "ShareDistribution": ("file_id", "version", "scheme", "share_index", "share_value"),
    "ShareLookupList": ("file_id", "version", "assignments"),
    "ShareDigestBroadcast": ("file_id", "version", "digests"),
    "ShareRequest": ("file_id", "version", "message_reference"),
    "ShareResponse": ("file_id", "version", "share_index", "share_value", "message_reference"),
    "ShareVersionUpdate": ("file_id", "version", "scheme", "revoked"),
}


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    try:
        return base64.b64decode(text.strip(), validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ParseError(f"invalid base64: {exc}") from None


def new_reference(rng: random.Random) -> str:
    return rng.randbytes(16).hex()


@dataclass(frozen=True)
class Command:
    type: str
    body: Mapping

    def __post_init__(self):
        fields = COMMAND_FIELDS.get(self.type)
        if fields is None:
            raise ParseError(f"unknown command type {self.type!r}")
        missing = set(fields) - set(self.body)
        extra = set(self.body) - set(fields)
        if missing or extra:
            raise ParseError(
                f"{self.type}: missing {sorted(missing)} unexpected {sorted(extra)}"
            )

    @classmethod
    def create(cls, type_: str, **fields) -> "Command":
        return cls(type_, fields)

    def __getitem__(self, name):
        return self.body[name]

    def to_bytes(self) -> bytes:
        obj = {"type": self.type, **self.body}
        return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Command":
        try:
            obj = json.loads(data)
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"command is not JSON: {exc}") from None
        if not isinstance(obj, dict) or "type" not in obj:
            raise ParseError("command must be a JSON object with a 'type' field")
        type_ = obj.pop("type")
        return cls(type_, obj)

    @property
    def reference(self) -> Optional[str]:
        return self.body.get("message_reference")


@dataclass(frozen=True)
class Context:
    """Public routing metadata of a sealed envelope."""

    command_type: str
    file_id: str
    version: int
    reference: Optional[str] = None

    @classmethod
    def of(cls, command: Command) -> "Context":
        return cls(command.type, command["file_id"], command["version"], command.reference)


@dataclass(frozen=True)
class MessageEnvelope:
    sender_id: str
    payload: bytes
    receivers: tuple = ()  # ((id, wrapped_key), ...)
    sender_key: Optional[bytes] = None
    context: Optional[Context] = None
    version: str = PROTOCOL_VERSION

    @property
    def is_broadcast(self) -> bool:
        return not self.receivers

    @property
    def receiver_ids(self) -> tuple:
        return tuple(rid for rid, _ in self.receivers)


def _signed_scope(command_bytes: bytes, sender_id: str, receiver_ids: Sequence[str]) -> bytes:
    header = json.dumps([sender_id, list(receiver_ids)], separators=(",", ":")).encode()
    return header + b"\n" + command_bytes


def build_broadcast(sender: NodeIdentity, command: Command) -> MessageEnvelope:
    body = command.to_bytes()
    signature = crypto.sign(sender, _signed_scope(body, sender.id, ()))
    return MessageEnvelope(sender.id, signature + body)


def build_sealed(
    sender: NodeIdentity,
    recipients: Sequence[PublicIdentity],
    command: Command,
    rng: random.Random,
) -> MessageEnvelope:
    if not recipients:
        raise ValueError("sealed messages need at least one recipient")
    body = command.to_bytes()
    receiver_ids = [r.id for r in recipients]
    signature = crypto.sign(sender, _signed_scope(body, sender.id, receiver_ids))
    key = crypto.generate_key(rng)
    sealed = crypto.encrypt(key, signature + body, rng).to_bytes()
    sender_key = crypto.wrap_key(sender.public.encryption_key, key, rng)
    receivers = tuple((r.id, crypto.wrap_key(r.encryption_key, key, rng)) for r in recipients)
    return MessageEnvelope(
        sender.id, sealed, receivers, sender_key=sender_key, context=Context.of(command)
    )


def _verified_command(envelope, plaintext, directory):
    signer = directory.get(envelope.sender_id)
    if signer is None:
        raise ForgedMessage(f"unknown sender {envelope.sender_id!r}")
    signature, body = plaintext[: crypto.SIGNATURE_SIZE], plaintext[crypto.SIGNATURE_SIZE:]
    scope = _signed_scope(body, envelope.sender_id, envelope.receiver_ids)
    try:
        ok = crypto.verify(signer.signing_key, scope, signature)
    except VerificationError:
        ok = False
    if not ok:
        raise ForgedMessage(f"signature of {envelope.sender_id!r} does not verify")
    try:
        return Command.from_bytes(body)
    except ParseError as exc:
        raise ForgedMessage(f"signed payload is not a valid command: {exc}") from None


def open_envelope(
    envelope: MessageEnvelope,
    me,
    directory: Mapping[str, PublicIdentity],
    *,
    private_key: Optional[bytes] = None,
) -> Command:
    """Verify and decode an envelope for ``me``.

    ``me`` is a NodeIdentity, or just a node id when ``private_key`` (raw
    X25519 bytes) is supplied; the latter is how an auditor replays a
    disclosed key. Broadcasts can be opened by anyone (``me`` may be None).
    For sealed envelopes the caller must be the sender or a listed receiver,
    otherwise NotRecipient is raised.
    """
    if envelope.is_broadcast:
        return _verified_command(envelope, envelope.payload, directory)

    my_id = me if isinstance(me, str) or me is None else me.id
    if my_id == envelope.sender_id:
        wrapped = envelope.sender_key
    else:
        wrapped = dict(envelope.receivers).get(my_id)
    if wrapped is None:
        raise NotRecipient(f"{my_id!r} is not a recipient")
    try:
        key = crypto.unwrap_key(private_key if private_key is not None else me, wrapped)
    except UnwrapFailure as exc:
        raise CorruptWrappedKey(str(exc)) from None
    try:
        plaintext = crypto.decrypt(key, crypto.Ciphertext.from_bytes(envelope.payload))
    except AuthenticationFailure:
        raise ForgedMessage("sealed payload fails authentication") from None
    command = _verified_command(envelope, plaintext, directory)
    if envelope.context != Context.of(command):
        raise ForgedMessage("header context disagrees with signed command")
    return command


# -- XML ---------------------------------------------------------------------

_XML_DECL = b'<?xml version="1.0" encoding="UTF-8" standalone="yes"?>\n'


def serialize_xml(envelope: MessageEnvelope) -> bytes:
    root = ET.Element("MessageStructure")
    header = ET.SubElement(root, "Header")
    ET.SubElement(header, "Version").text = envelope.version
    sender = ET.SubElement(ET.SubElement(header, "Sender"), "ID")
    if envelope.sender_key is not None:
        sender.set("Key", b64(envelope.sender_key))
    sender.text = b64(envelope.sender_id.encode())
    receiver = ET.SubElement(header, "Receiver")
    for rid, wrapped in envelope.receivers:
        el = ET.SubElement(receiver, "ID", Key=b64(wrapped))
        el.text = b64(rid.encode())
    if envelope.context is not None:
        ctx = envelope.context
        attrs = {"Type": ctx.command_type, "FileID": ctx.file_id, "Version": str(ctx.version)}
        if ctx.reference is not None:
            attrs["Reference"] = ctx.reference
        ET.SubElement(header, "Context", attrs)
    ET.SubElement(root, "Payload").text = b64(envelope.payload)
    return _XML_DECL + ET.tostring(root, encoding="utf-8")


def _required(parent, tag):
    el = parent.find(tag)
    if el is None:
        raise ParseError(f"missing <{tag}> in <{parent.tag}>")
    return el


def _id_text(el) -> str:
    try:
        return unb64(el.text or "").decode("utf-8")
    except UnicodeDecodeError:
        raise ParseError("identifier is not UTF-8") from None


def parse_xml(data: bytes) -> MessageEnvelope:
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise ParseError(f"malformed XML: {exc}") from None
    if root.tag != "MessageStructure":
        raise ParseError(f"unexpected root <{root.tag}>")
    header = _required(root, "Header")
    version = (_required(header, "Version").text or "").strip()
    sender_el = _required(_required(header, "Sender"), "ID")
    sender_key = sender_el.get("Key")
    receivers = tuple(
        (_id_text(el), unb64(el.get("Key", ""))) for el in _required(header, "Receiver").findall("ID")
    )
    if any(not key for _, key in receivers):
        raise ParseError("receiver without wrapped key")
    context = None
    ctx_el = header.find("Context")
    if ctx_el is not None:
        try:
            context = Context(
                ctx_el.attrib["Type"], ctx_el.attrib["FileID"],
                int(ctx_el.attrib["Version"]), ctx_el.get("Reference"),
            )
        except (KeyError, ValueError) as exc:
            raise ParseError(f"bad <Context>: {exc}") from None
    payload = unb64(_required(root, "Payload").text or "")
    return MessageEnvelope(
        sender_id=_id_text(sender_el),
        payload=payload,
        receivers=receivers,
        sender_key=unb64(sender_key) if sender_key is not None else None,
        context=context,
        version=version,
    )
