"""Simulated append-only chain and the message segmentation wrapper.

A message is cut into data segments of at most 69 bytes, one per
transaction by default. Every transaction also carries one link output:
64 ``X`` on the first transaction, the predecessor's TXID on the others, and
four extra ``X`` appended on the last one. A one-transaction message is both
first and last, so its link reads 68 ``X``.

Each transaction also records which wallet input it spends
(``submitter/sequence``). That keeps two identical messages from the same
node from producing identical TXIDs.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .errors import EmptyMessage, InvalidHeight, LedgerError

SEGMENT_SIZE = 69
MAX_OUTPUTS = 250
HEAD_MARKER = "X" * 64
TERMINAL_SUFFIX = "XXXX"
GENESIS_PREV = "0" * 64
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TxOutput:
    kind: str  # "data" | "link"
    payload: bytes

    def __post_init__(self):
        if self.kind == "data":
            if not 1 <= len(self.payload) <= SEGMENT_SIZE:
                raise LedgerError(f"data output must hold 1..{SEGMENT_SIZE} bytes")
        elif self.kind == "link":
            if len(self.payload) not in (64, 68):
                raise LedgerError("link output must be 64 or 68 characters")
        else:
            raise LedgerError(f"unknown output kind {self.kind!r}")


def _tx_bytes(submitter: str, spends: str, outputs: Sequence[TxOutput]) -> bytes:
    parts = [b"tx", submitter.encode(), spends.encode()]
    for out in outputs:
        parts.append(out.kind.encode() + b":" + out.payload.hex().encode())
    return b"|".join(parts)


@dataclass(frozen=True)
class ChainTransaction:
    submitter: str
    spends: str
    outputs: tuple
    txid: str = field(default="", compare=False)

    def __post_init__(self):
        if len(self.outputs) > MAX_OUTPUTS:
            raise LedgerError(f"at most {MAX_OUTPUTS} outputs per transaction")
        if sum(o.kind == "link" for o in self.outputs) != 1:
            raise LedgerError("a transaction carries exactly one link output")
        digest = hashlib.sha256(_tx_bytes(self.submitter, self.spends, self.outputs)).hexdigest()
        if self.txid and self.txid != digest:
            raise LedgerError(f"txid mismatch for {self.txid}")
        object.__setattr__(self, "txid", digest)

    @property
    def link(self) -> str:
        return next(o.payload for o in self.outputs if o.kind == "link").decode("ascii")

    @property
    def data(self) -> bytes:
        return b"".join(o.payload for o in self.outputs if o.kind == "data")

    @property
    def is_head(self) -> bool:
        return self.link[:64] == HEAD_MARKER

    @property
    def is_terminal(self) -> bool:
        return len(self.link) == 68

    @property
    def predecessor(self) -> Optional[str]:
        return None if self.is_head else self.link[:64]

    def to_json(self) -> dict:
        return {
            "txid": self.txid,
            "submitter": self.submitter,
            "spends": self.spends,
            "outputs": [
                {"link": o.payload.decode("ascii")} if o.kind == "link"
                else {"data": base64.b64encode(o.payload).decode("ascii")}
                for o in self.outputs
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ChainTransaction":
        outputs = tuple(
            TxOutput("link", o["link"].encode("ascii")) if "link" in o
            else TxOutput("data", base64.b64decode(o["data"], validate=True))
            for o in obj["outputs"]
        )
        return cls(obj["submitter"], obj["spends"], outputs, txid=obj["txid"])


def segment(
    message: bytes,
    submitter: str = "",
    first_sequence: int = 0,
    segments_per_transaction: int = 1,
) -> list[ChainTransaction]:
    if not message:
        raise EmptyMessage("cannot segment an empty message")
    if not 1 <= segments_per_transaction <= MAX_OUTPUTS - 1:
        raise LedgerError("segments_per_transaction must be in 1..249")
    pieces = [message[i:i + SEGMENT_SIZE] for i in range(0, len(message), SEGMENT_SIZE)]
    groups = [
        pieces[i:i + segments_per_transaction]
        for i in range(0, len(pieces), segments_per_transaction)
    ]
    txs = []
    prev = HEAD_MARKER
    for i, group in enumerate(groups):
        link = prev + (TERMINAL_SUFFIX if i == len(groups) - 1 else "")
        outputs = tuple(TxOutput("data", p) for p in group) + (TxOutput("link", link.encode("ascii")),)
        tx = ChainTransaction(submitter, f"{submitter}/{first_sequence + i}", outputs)
        txs.append(tx)
        prev = tx.txid
    return txs


@dataclass(frozen=True)
class Block:
    height: int
    prev: str
    transactions: tuple
    digest: str = field(default="", compare=False)

    def __post_init__(self):
        body = json.dumps(
            [self.height, self.prev, [tx.txid for tx in self.transactions]], separators=(",", ":")
        ).encode()
        digest = hashlib.sha256(body).hexdigest()
        if self.digest and self.digest != digest:
            raise LedgerError(f"block digest mismatch at height {self.height}")
        object.__setattr__(self, "digest", digest)

    def to_json(self) -> dict:
        return {
            "height": self.height,
            "prev": self.prev,
            "digest": self.digest,
            "transactions": [tx.to_json() for tx in self.transactions],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Block":
        txs = tuple(ChainTransaction.from_json(t) for t in obj["transactions"])
        return cls(obj["height"], obj["prev"], txs, digest=obj["digest"])


@dataclass(frozen=True)
class Message:
    """A reassembled message with where (and by whom) it landed on the chain."""

    submitter: str
    data: bytes
    txids: tuple
    height: int  # block in which the message became complete
    position: int  # transaction position inside that block


@dataclass
class Reassembly:
    messages: list
    incomplete: list  # txid lists of chains without a terminal (or broken)


def reassemble_blocks(blocks: Iterable[Block]) -> Reassembly:
    """Rebuild every complete message from the transactions of ``blocks``.

    Transaction order on the chain is irrelevant: chains are followed from each
    head through the TXID links. A message is ordered by the position of its
    last-mined transaction, i.e. the moment it became readable.
    """
    where = {}
    by_txid = {}
    successor = {}
    heads = []
    for block in blocks:
        for pos, tx in enumerate(block.transactions):
            where[tx.txid] = (block.height, pos)
            by_txid[tx.txid] = tx
            if tx.is_head:
                heads.append(tx)
            else:
                successor[tx.predecessor] = tx
    messages, incomplete = [], []
    for head in heads:
        chain = [head]
        while not chain[-1].is_terminal:
            nxt = successor.get(chain[-1].txid)
            if nxt is None or nxt.submitter != head.submitter:
                break
            chain.append(nxt)
        txids = tuple(tx.txid for tx in chain)
        if not chain[-1].is_terminal:
            incomplete.append(txids)
            continue
        height, pos = max(where[t] for t in txids)
        messages.append(Message(head.submitter, b"".join(tx.data for tx in chain), txids, height, pos))
    messages.sort(key=lambda m: (m.height, m.position))
    return Reassembly(messages, incomplete)


class Ledger:
    """Single-writer chain: pending queue, main branch, and retained reverted branches.

    Every mutation is mirrored as one JSON line in ``log_lines``; feeding those
    lines to :meth:`loads` rebuilds an identical ledger.
    """

    def __init__(self, meta: Optional[dict] = None, segments_per_transaction: int = 1):
        self.meta = dict(meta or {})
        self.segments_per_transaction = segments_per_transaction
        self.main_branch: list[Block] = []
        self.retained_branches: list[tuple[int, list[Block]]] = []
        self.pending: list[ChainTransaction] = []
        self._wallet: dict[str, int] = {}
        header = {"format_version": FORMAT_VERSION, **self.meta}
        self.log_lines: list[str] = [_dump(header)]

    @property
    def height(self) -> int:
        return len(self.main_branch) - 1

    def submit(self, node: str, envelope_bytes: bytes) -> list[str]:
        seq = self._wallet.get(node, 0)
        txs = segment(envelope_bytes, node, seq, self.segments_per_transaction)
        self._wallet[node] = seq + len(txs)
        self.pending.extend(txs)
        return [tx.txid for tx in txs]

    def advance_round(self) -> Block:
        prev = self.main_branch[-1].digest if self.main_branch else GENESIS_PREV
        block = Block(self.height + 1, prev, tuple(self.pending))
        self.pending = []
        self._append(block)
        return block

    def _append(self, block: Block):
        expected_prev = self.main_branch[-1].digest if self.main_branch else GENESIS_PREV
        if block.height != self.height + 1 or block.prev != expected_prev:
            raise LedgerError(f"block {block.height} does not extend the main branch")
        self.main_branch.append(block)
        self.log_lines.append(_dump({"block": block.to_json()}))

    def revert_to(self, height: int):
        """Drop every block above ``height`` from the main branch, keeping them as evidence."""
        if not 0 <= height < self.height:
            raise InvalidHeight(f"cannot revert to {height} at height {self.height}")
        dropped = self.main_branch[height + 1:]
        del self.main_branch[height + 1:]
        self.retained_branches.append((height, dropped))
        self.log_lines.append(_dump({"revert": height}))

    def all_transactions(self) -> int:
        return sum(len(b.transactions) for b in self.main_branch) + sum(
            len(b.transactions) for _, blocks in self.retained_branches for b in blocks
        )

    def lineages(self) -> list[list[Block]]:
        """Full chains ending at each tip: the main branch first, then one per retained branch.

        Prefixes of retained branches are rebuilt from ``prev`` links, so a
        branch reverted away below an earlier fork still resolves completely.
        """
        by_digest = {b.digest: b for b in self.main_branch}
        for _, blocks in self.retained_branches:
            by_digest.update((b.digest, b) for b in blocks)
        out = [list(self.main_branch)]
        for _, blocks in self.retained_branches:
            chain = list(blocks)
            cursor = chain[0].prev if chain else GENESIS_PREV
            while cursor != GENESIS_PREV:
                block = by_digest[cursor]
                chain.insert(0, block)
                cursor = block.prev
            out.append(chain)
        return out

    def reassemble(self, include_retained: bool = False) -> Reassembly:
        blocks = list(self.main_branch)
        if include_retained:
            blocks += [b for _, bs in self.retained_branches for b in bs]
        return reassemble_blocks(blocks)

    def dumps(self) -> str:
        return "\n".join(self.log_lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Ledger":
        lines = text.splitlines()
        if not lines:
            raise LedgerError("empty ledger log")
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise LedgerError(f"line 1: {exc}") from None
        if header.get("format_version") != FORMAT_VERSION:
            raise LedgerError("line 1: unsupported or missing format_version")
        header.pop("format_version")
        ledger = cls(meta=header)
        for lineno, line in enumerate(lines[1:], start=2):
            try:
                obj = json.loads(line)
                if "block" in obj:
                    ledger._append(Block.from_json(obj["block"]))
                elif "revert" in obj:
                    ledger.revert_to(obj["revert"])
                else:
                    raise LedgerError("neither block nor revert")
            except (LedgerError, KeyError, TypeError, ValueError) as exc:
                err = LedgerError(f"line {lineno}: {exc}")
                err.line = lineno
                raise err from None
        return ledger


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def reassemble(ledger: Ledger) -> list[tuple[str, bytes]]:
    return [(m.submitter, m.data) for m in ledger.reassemble().messages]
