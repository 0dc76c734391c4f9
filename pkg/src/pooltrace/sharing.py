"""Shamir threshold sharing of salted file keys over GF(256).

The shared secret is ``key || salt``. Each byte position carries its own
random polynomial of degree ``n - 1``; a share is the evaluation of all of
them at the share index (1..k). Multiplication by a constant is done with
``bytes.translate`` over precomputed 256-entry tables, so a whole share is
processed per call instead of per byte.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

from . import crypto
from .crypto import SymmetricKey
from .errors import (
    DuplicateIndex,
    InsufficientShares,
    InvalidPoolSize,
    MissingDigest,
    ReconstructionImpossible,
    SharingError,
    VersionMismatch,
)

SALT_SIZE = 16
SECRET_SIZE = crypto.KEY_SIZE + SALT_SIZE

# AES field polynomial x^8 + x^4 + x^3 + x + 1, generator 3
_EXP = [0] * 510
_LOG = [0] * 256


def _build_tables():
    x = 1
    for i in range(255):
        _EXP[i] = x
        _LOG[x] = i
        # multiply by 3 = x * 2 ^ x
        doubled = x << 1
        if doubled & 0x100:
            doubled ^= 0x11B
        x = doubled ^ x
    for i in range(255, 510):
        _EXP[i] = _EXP[i - 255]


_build_tables()


def gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return _EXP[_LOG[a] + _LOG[b]]


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("0 has no inverse in GF(256)")
    return _EXP[255 - _LOG[a]]


# _MUL_TABLE[c] maps byte b -> c*b; usable with bytes.translate
_MUL_TABLE = [bytes(gf_mul(c, b) for b in range(256)) for c in range(256)]


def _scale(data: bytes, c: int) -> bytes:
    return data.translate(_MUL_TABLE[c])


def _xor(a: bytes, b: bytes) -> bytes:
    n = len(a)
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(n, "big")


def split_secret(secret: bytes, n: int, xs: Sequence[int], rng: random.Random) -> list[bytes]:
    """Evaluate fresh random degree-(n-1) polynomials with constant term ``secret`` at ``xs``."""
    if not 1 <= n <= len(xs):
        raise SharingError(f"threshold {n} outside 1..{len(xs)}")
    if any(not 1 <= x <= 255 for x in xs) or len(set(xs)) != len(xs):
        raise SharingError("x-coordinates must be distinct and in 1..255")
    coeffs = [rng.randbytes(len(secret)) for _ in range(n - 1)]
    values = []
    for x in xs:
        acc = bytes(len(secret))
        for c in reversed(coeffs):  # Horner
            acc = _xor(_scale(acc, x), c)
        values.append(_xor(_scale(acc, x), secret))
    return values


def lagrange_at_zero(xs: Sequence[int]) -> list[int]:
    """Coefficients c_i with f(0) = sum c_i * f(x_i) for deg f < len(xs)."""
    out = []
    for i, xi in enumerate(xs):
        num, den = 1, 1
        for j, xj in enumerate(xs):
            if i != j:
                num = gf_mul(num, xj)
                den = gf_mul(den, xj ^ xi)
        out.append(gf_mul(num, gf_inv(den)))
    return out


def interpolate_at_zero(points: Sequence[tuple[int, bytes]]) -> bytes:
    """Unchecked bytewise interpolation. Callers are responsible for version/index guards."""
    xs = [x for x, _ in points]
    if len(set(xs)) != len(xs):
        raise DuplicateIndex("duplicate x-coordinate")
    acc = bytes(len(points[0][1]))
    for c, (_, y) in zip(lagrange_at_zero(xs), points):
        acc = _xor(acc, _scale(y, c))
    return acc


def derive_threshold(k: int) -> int:
    """Reconstruction threshold for a pool of ``k`` nodes: ceil(2k/3)."""
    if k < 1:
        raise InvalidPoolSize(f"pool size must be >= 1, got {k}")
    return -(-2 * k // 3)


@dataclass(frozen=True)
class ShareScheme:
    k: int
    n: int
    version: int
    salt: bytes = field(default=b"", repr=False)

    def __post_init__(self):
        if not 1 <= self.n <= self.k:
            raise SharingError(f"need 1 <= n <= k, got n={self.n}, k={self.k}")
        if self.k > 255:
            raise SharingError("at most 255 shares in GF(256)")
        if self.version < 1:
            raise SharingError("versions start at 1")

    @classmethod
    def auto(cls, k: int, version: int, rng: random.Random) -> "ShareScheme":
        return cls(k, derive_threshold(k), version, rng.randbytes(SALT_SIZE))


@dataclass(frozen=True)
class SecretShare:
    file_id: str
    index: int
    version: int
    value: bytes = field(repr=False)


@dataclass(frozen=True)
class ShareDigestList:
    file_id: str
    version: int
    digests: dict  # index -> Digest

    @classmethod
    def from_shares(cls, shares: Sequence[SecretShare]) -> "ShareDigestList":
        first = shares[0]
        return cls(first.file_id, first.version, {s.index: crypto.hash(s.value) for s in shares})


def split(
    secret_key: SymmetricKey,
    salt: bytes,
    scheme: ShareScheme,
    rng: random.Random,
    file_id: str = "",
) -> list[SecretShare]:
    secret = secret_key.material + salt
    xs = list(range(1, scheme.k + 1))
    values = split_secret(secret, scheme.n, xs, rng)
    return [SecretShare(file_id, x, scheme.version, v) for x, v in zip(xs, values)]


def _check_shares(shares: Sequence[SecretShare], scheme: ShareScheme):
    if len(shares) < scheme.n:
        raise InsufficientShares(f"need {scheme.n} shares, got {len(shares)}")
    versions = {s.version for s in shares}
    if len(versions) > 1 or versions != {scheme.version}:
        raise VersionMismatch(f"shares span versions {sorted(versions)}, scheme is v{scheme.version}")
    if len({s.file_id for s in shares}) > 1:
        raise SharingError("shares belong to different files")
    indices = [s.index for s in shares]
    if len(set(indices)) != len(indices):
        raise DuplicateIndex(f"duplicate share indices in {sorted(indices)}")
    if len({len(s.value) for s in shares}) > 1:
        raise SharingError("share values differ in length")


def _split_secret(secret: bytes) -> tuple[SymmetricKey, bytes]:
    return SymmetricKey(secret[: crypto.KEY_SIZE]), secret[crypto.KEY_SIZE:]


def reconstruct(shares: Sequence[SecretShare], scheme: ShareScheme) -> tuple[SymmetricKey, bytes]:
    """Recover (key, salt) from at least ``scheme.n`` shares of one version.

    Only the first ``n`` shares (in index order) are interpolated.
    """
    _check_shares(shares, scheme)
    chosen = sorted(shares, key=lambda s: s.index)[: scheme.n]
    return _split_secret(interpolate_at_zero([(s.index, s.value) for s in chosen]))


def reconstruct_with_faults(
    shares: Sequence[SecretShare],
    scheme: ShareScheme,
    validator: Callable[[SymmetricKey], bool],
) -> tuple[SymmetricKey, bytes, frozenset]:
    """Search n-subsets of the received shares for one whose key the validator accepts.

    Subsets are enumerated lexicographically by index. The returned key comes
    from the first accepted subset; ``bad_indices`` are those that appear in no
    accepted subset at all. Validator results are cached per candidate key, so
    the expensive check runs once per distinct interpolation result.
    """
    _check_shares(shares, scheme)
    ordered = sorted(shares, key=lambda s: s.index)
    verdicts: dict[bytes, bool] = {}
    first = None
    good: set[int] = set()
    for subset in itertools.combinations(ordered, scheme.n):
        secret = interpolate_at_zero([(s.index, s.value) for s in subset])
        key_bytes = secret[: crypto.KEY_SIZE]
        if key_bytes not in verdicts:
            verdicts[key_bytes] = bool(validator(SymmetricKey(key_bytes)))
        if verdicts[key_bytes]:
            if first is None:
                first = secret
            good.update(s.index for s in subset)
    if first is None:
        raise ReconstructionImpossible(
            f"no {scheme.n}-subset of {len(ordered)} shares yields an accepted key"
        )
    key, salt = _split_secret(first)
    bad = frozenset(s.index for s in ordered) - good
    return key, salt, bad


def verify_against_digests(share: SecretShare, digest_list: ShareDigestList) -> bool:
    if share.file_id != digest_list.file_id or share.version != digest_list.version:
        raise VersionMismatch("digest list is for a different file or version")
    expected = digest_list.digests.get(share.index)
    if expected is None:
        raise MissingDigest(f"no digest broadcast for share {share.index}")
    return crypto.hash(share.value) == expected


def make_pseudo_shares(file_id: str, scheme: ShareScheme, rng: random.Random) -> list[SecretShare]:
    """Uniformly random share values under ``scheme.version``; they interpolate to garbage."""
    return [
        SecretShare(file_id, i, scheme.version, rng.randbytes(SECRET_SIZE))
        for i in range(1, scheme.k + 1)
    ]

