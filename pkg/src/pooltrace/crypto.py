"""Cryptographic primitives used across the pool.

Everything that needs randomness takes an explicit ``random.Random`` so that a
scenario seed reproduces keys, nonces and therefore ledger bytes exactly.

Backends:
  - AES-256-GCM for file and envelope encryption
  - SHA-256 for digests (hex form doubles as the TXID format)
  - Ed25519 for signatures (deterministic)
  - X25519 + HKDF-SHA256 + AES-GCM for per-recipient key wrapping
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import AuthenticationFailure, UnwrapFailure, VerificationError

KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16
SIGNATURE_SIZE = 64
DIGEST_SIZE = 32

_RAW = serialization.Encoding.Raw
_RAW_PUB = serialization.PublicFormat.Raw
_RAW_PRIV = serialization.PrivateFormat.Raw
_NO_ENC = serialization.NoEncryption()


def make_rng(seed) -> random.Random:
    """Seeded random source. str/bytes/int seeds are all stable across processes."""
    return random.Random(seed)


@dataclass(frozen=True)
class SymmetricKey:
    material: bytes

    def __post_init__(self):
        if len(self.material) != KEY_SIZE:
            raise ValueError(f"symmetric key must be {KEY_SIZE} bytes, got {len(self.material)}")

    def __bytes__(self):
        return self.material

    def __repr__(self):
        return "SymmetricKey(<redacted>)"


@dataclass(frozen=True)
class Digest:
    value: bytes

    def __post_init__(self):
        if len(self.value) != DIGEST_SIZE:
            raise ValueError("digest must be 32 bytes")

    @property
    def hex(self) -> str:
        return self.value.hex()

    @classmethod
    def from_hex(cls, text: str) -> "Digest":
        if len(text) != 2 * DIGEST_SIZE or text != text.lower():
            raise ValueError(f"not a lowercase 64-char digest: {text!r}")
        return cls(bytes.fromhex(text))

    def __str__(self):
        return self.hex


@dataclass(frozen=True)
class Ciphertext:
    nonce: bytes
    body: bytes  # includes the 16-byte GCM tag

    def to_bytes(self) -> bytes:
        return self.nonce + self.body

    @classmethod
    def from_bytes(cls, data: bytes) -> "Ciphertext":
        if len(data) < NONCE_SIZE + TAG_SIZE:
            raise AuthenticationFailure("ciphertext too short")
        return cls(data[:NONCE_SIZE], data[NONCE_SIZE:])


@dataclass(frozen=True)
class PublicIdentity:
    """What every pool member knows about a node: its id and two public keys."""

    id: str
    signing_key: bytes
    encryption_key: bytes


class NodeIdentity:
    """A node's identifier plus its signing and key-wrapping key pairs.

    The identifier is a plain string chosen by the consortium and is unrelated
    to either public key, so keys can be replaced without renaming the node.
    """

    def __init__(self, node_id: str, signing: Ed25519PrivateKey, encryption: X25519PrivateKey):
        self.id = node_id
        self._signing = signing
        self._encryption = encryption
        self.public = PublicIdentity(
            node_id,
            signing.public_key().public_bytes(_RAW, _RAW_PUB),
            encryption.public_key().public_bytes(_RAW, _RAW_PUB),
        )

    @classmethod
    def generate(cls, node_id: str, rng: random.Random) -> "NodeIdentity":
        signing = Ed25519PrivateKey.from_private_bytes(rng.randbytes(32))
        encryption = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
        return cls(node_id, signing, encryption)

    def encryption_private_bytes(self) -> bytes:
        return self._encryption.private_bytes(_RAW, _RAW_PRIV, _NO_ENC)

    def __eq__(self, other):
        return isinstance(other, NodeIdentity) and other.id == self.id

    def __hash__(self):
        return self.id.__hash__()

    def __repr__(self):
        return f"NodeIdentity({self.id!r})"


def generate_key(rng: random.Random) -> SymmetricKey:
    return SymmetricKey(rng.randbytes(KEY_SIZE))


def encrypt(key: SymmetricKey, plaintext: bytes, rng: random.Random, aad: bytes = b"") -> Ciphertext:
    nonce = rng.randbytes(NONCE_SIZE)
    return Ciphertext(nonce, AESGCM(key.material).encrypt(nonce, plaintext, aad or None))


def decrypt(key: SymmetricKey, ciphertext: Ciphertext, aad: bytes = b"") -> bytes:
    try:
        return AESGCM(key.material).decrypt(ciphertext.nonce, ciphertext.body, aad or None)
    except InvalidTag:
        raise AuthenticationFailure("authenticated decryption failed") from None


def hash(data: bytes) -> Digest:  # noqa: A001 - mirrors the protocol vocabulary
    return Digest(hashlib.sha256(data).digest())


def sign(identity: NodeIdentity, data: bytes) -> bytes:
    return identity._signing.sign(data)


def verify(public_signing_key: bytes, data: bytes, signature: bytes) -> bool:
    if len(signature) != SIGNATURE_SIZE:
        raise VerificationError(f"signature must be {SIGNATURE_SIZE} bytes")
    try:
        pub = Ed25519PublicKey.from_public_bytes(public_signing_key)
    except ValueError as exc:
        raise VerificationError(f"malformed public key: {exc}") from None
    try:
        pub.verify(signature, data)
    except InvalidSignature:
        return False
    return True


def _kek(shared: bytes, ephemeral_pub: bytes, recipient_pub: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=KEY_SIZE,
        salt=None,
        info=b"pooltrace-wrap" + ephemeral_pub + recipient_pub,
    ).derive(shared)


def wrap_key(recipient_public_key: bytes, key: SymmetricKey, rng: random.Random) -> bytes:
    """Encrypt ``key`` so that only the holder of the matching X25519 private key can read it.

    Layout: ephemeral public key (32) || nonce (12) || AES-GCM(kek, key) (48).
    """
    ephemeral = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
    ephemeral_pub = ephemeral.public_key().public_bytes(_RAW, _RAW_PUB)
    shared = ephemeral.exchange(X25519PublicKey.from_public_bytes(recipient_public_key))
    nonce = rng.randbytes(NONCE_SIZE)
    body = AESGCM(_kek(shared, ephemeral_pub, recipient_public_key)).encrypt(nonce, key.material, None)
    return ephemeral_pub + nonce + body


def unwrap_key(recipient_private_key, wrapped: bytes) -> SymmetricKey:
    """Inverse of :func:`wrap_key`. Accepts a NodeIdentity, an X25519 key or raw private bytes."""
    if isinstance(recipient_private_key, NodeIdentity):
        priv = recipient_private_key._encryption
    elif isinstance(recipient_private_key, (bytes, bytearray)):
        try:
            priv = X25519PrivateKey.from_private_bytes(bytes(recipient_private_key))
        except ValueError:
            raise UnwrapFailure("malformed private key") from None
    else:
        priv = recipient_private_key
    if len(wrapped) != 32 + NONCE_SIZE + KEY_SIZE + TAG_SIZE:
        raise UnwrapFailure("wrapped key has wrong length")
    ephemeral_pub, nonce, body = wrapped[:32], wrapped[32:32 + NONCE_SIZE], wrapped[32 + NONCE_SIZE:]
    recipient_pub = priv.public_key().public_bytes(_RAW, _RAW_PUB)
    try:
        shared = priv.exchange(X25519PublicKey.from_public_bytes(ephemeral_pub))
        material = AESGCM(_kek(shared, ephemeral_pub, recipient_pub)).decrypt(nonce, body, None)
    except (InvalidTag, ValueError):
        raise UnwrapFailure("wrapped key does not open under this private key") from None
    return SymmetricKey(material)


def public_encryption_key(private_bytes: bytes) -> bytes:
    """Derive the X25519 public key for raw private key bytes."""
    try:
        priv = X25519PrivateKey.from_private_bytes(private_bytes)
    except ValueError:
        raise UnwrapFailure("malformed private key") from None
    return priv.public_key().public_bytes(_RAW, _RAW_PUB)
