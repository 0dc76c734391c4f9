"""Simulated DHT for encrypted file blocks.

Blocks are keyed by ``file_id:index`` and placed on ``r`` peers chosen by
rendezvous hashing. Stores only accept blocks of files their owner has seen
announced on the ledger, and requesters check block digests before use.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from . import crypto
from .crypto import Digest
from .errors import EmptyFile, InsufficientPeers, Unavailable

DEFAULT_BLOCK_SIZE = 1024
DEFAULT_REPLICATION = 2


@dataclass(frozen=True, order=True)
class BlockKey:
    file_id: str
    index: int

    def __str__(self):
        return f"{self.file_id}:{self.index}"

    @classmethod
    def parse(cls, text: str) -> "BlockKey":
        file_id, _, index = text.rpartition(":")
        return cls(file_id, int(index))


@dataclass(frozen=True)
class StoredBlock:
    key: BlockKey
    data: bytes = field(repr=False)
    digest: Digest

    @classmethod
    def make(cls, key: BlockKey, data: bytes) -> "StoredBlock":
        return cls(key, data, crypto.hash(data))

    def is_intact(self) -> bool:
        return crypto.hash(self.data) == self.digest


def chunk(ciphertext: bytes, block_size: int = DEFAULT_BLOCK_SIZE) -> list[bytes]:
    if not ciphertext:
        raise EmptyFile("nothing to chunk")
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    return [ciphertext[i:i + block_size] for i in range(0, len(ciphertext), block_size)]


def _score(node_id: str, key: str) -> bytes:
    return hashlib.sha256(f"{node_id}\x00{key}".encode()).digest()


def place(key, nodes: Iterable[str], r: int) -> tuple:
    """Rendezvous placement: the ``r`` nodes with the highest hash(node, key)."""
    nodes = list(nodes)
    if r > len(nodes):
        raise InsufficientPeers(f"replication {r} exceeds {len(nodes)} available peers")
    ranked = sorted(nodes, key=lambda n: _score(n, str(key)), reverse=True)
    return tuple(ranked[:r])


class BlockStore:
    """One node's block storage. ``announced(file_id)`` returns the announced block count or None."""

    def __init__(self, owner: str, announced: Callable[[str], Optional[int]]):
        self.owner = owner
        self.announced = announced
        self.blocks: dict[BlockKey, StoredBlock] = {}
        self.rejections: Counter = Counter()

    def __len__(self):
        return len(self.blocks)

    def __contains__(self, key):
        return key in self.blocks

    def get(self, key: BlockKey) -> Optional[StoredBlock]:
        return self.blocks.get(key)

    def dump(self) -> dict:
        return {str(k): b.digest.hex for k, b in sorted(self.blocks.items())}


def put_block(store: BlockStore, submitter: str, block: StoredBlock) -> bool:
    count = store.announced(block.key.file_id)
    if count is None or not 0 <= block.key.index < count or not block.is_intact():
        store.rejections[submitter] += 1
        return False
    store.blocks[block.key] = block
    return True


@dataclass
class BlockFetch:
    block: StoredBlock
    provider: str


class BlockNetwork:
    """All stores of the pool plus the request/response plumbing between them."""

    def __init__(
        self,
        block_size: int = DEFAULT_BLOCK_SIZE,
        replication: int = DEFAULT_REPLICATION,
        responsive: Callable[[str], bool] = lambda node: True,
    ):
        self.block_size = block_size
        self.replication = replication
        self.responsive = responsive
        self.stores: dict[str, BlockStore] = {}
        self.nonresponders: Counter = Counter()
        self.false_providers: Counter = Counter()
        self.source_fallbacks = 0

    def join(self, node_id: str, announced: Callable[[str], Optional[int]]) -> BlockStore:
        store = self.stores[node_id] = BlockStore(node_id, announced)
        return store

    def leave(self, node_id: str):
        self.stores.pop(node_id, None)

    @property
    def nodes(self) -> list[str]:
        return sorted(self.stores)

    def replicas(self, key: BlockKey, exclude: Sequence[str] = ()) -> tuple:
        peers = [n for n in self.nodes if n not in exclude]
        return place(key, peers, min(self.replication, len(peers)))

    def upload(self, uploader: str, block: StoredBlock, exclude: Sequence[str] = ()) -> dict:
        """Offer ``block`` to its replicas; returns replica -> accepted."""
        return {
            node: put_block(self.stores[node], uploader, block)
            for node in self.replicas(block.key, exclude)
        }

    def _ask(self, node: str, key: BlockKey, expected: Optional[Digest]) -> Optional[StoredBlock]:
        store = self.stores.get(node)
        if store is None or not self.responsive(node):
            self.nonresponders[node] += 1
            return None
        block = store.get(key)
        if block is None:
            return None
        if (expected is not None and block.digest != expected) or not block.is_intact():
            self.false_providers[node] += 1
            return None
        return block

    def get_block(
        self,
        requester: str,
        key: BlockKey,
        source: Optional[str] = None,
        expected_digest: Optional[Digest] = None,
    ) -> BlockFetch:
        """Fetch from the local store, then the replicas, then (if given) the source."""
        local = self.stores.get(requester)
        if local is not None:
            block = local.get(key)
            if block is not None and block.is_intact():
                return BlockFetch(block, requester)
        for node in self.replicas(key, exclude=(source,) if source else ()):
            if node == requester:
                continue
            block = self._ask(node, key, expected_digest)
            if block is not None:
                return BlockFetch(block, node)
        if source is not None and source != requester:
            block = self._ask(source, key, expected_digest)
            if block is not None:
                self.source_fallbacks += 1
                return BlockFetch(block, source)
        raise Unavailable(f"block {key} unavailable")

    def rejected_total(self) -> int:
        return sum(sum(s.rejections.values()) for s in self.stores.values())

    def rejections_by_uploader(self) -> Counter:
        total = Counter()
        for s in self.stores.values():
            total.update(s.rejections)
        return total

    def unannounced_blocks(self) -> list[tuple[str, str]]:
        """(holder, key) for every stored block its holder has no covering announcement for."""
        bad = []
        for node, store in sorted(self.stores.items()):
            for key in sorted(store.blocks):
                count = store.announced(key.file_id)
                if count is None or key.index >= count:
                    bad.append((node, str(key)))
        return bad


def get_block(network: BlockNetwork, requester: str, key: BlockKey, **kwargs) -> StoredBlock:
    return network.get_block(requester, key, **kwargs).block
