import json
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from pooltrace.errors import EmptyMessage, InvalidHeight, LedgerError
from pooltrace.ledger import (
    HEAD_MARKER,
    Block,
    Ledger,
    reassemble,
    reassemble_blocks,
    segment,
)


def test_single_transaction_links():
    (tx,) = segment(b"a" * 69, "A")
    assert tx.link == "X" * 68 and tx.is_head and tx.is_terminal


def test_two_transactions():
    t1, t2 = segment(b"a" * 70, "A")
    assert t1.link == "X" * 64
    assert t2.link == t1.txid + "XXXX"
    assert [len(t.data) for t in (t1, t2)] == [69, 1]


def test_150_bytes():
    assert [len(t.data) for t in segment(b"z" * 150, "A")] == [69, 69, 12]


def test_empty_message():
    with pytest.raises(EmptyMessage):
        segment(b"", "A")


def test_spends_make_txids_unique():
    a = segment(b"same", "A", 0)
    b = segment(b"same", "A", 1)
    assert a[0].txid != b[0].txid


def test_random_messages_shuffled():
    rng = random.Random(2024)
    messages = [rng.randbytes(rng.randint(1, 100 * 1024)) for _ in range(150)]
    txs, expected = [], []
    seq = 0
    for i, m in enumerate(messages):
        chain = segment(m, f"N{i % 7}", seq)
        seq += len(chain)
        assert len(chain) == math.ceil(len(m) / 69)
        assert chain[0].link[:64] == HEAD_MARKER and chain[-1].link.endswith("XXXX")
        assert all(len(t.link) == 64 for t in chain[:-1])
        txs.extend(chain)
        expected.append((f"N{i % 7}", m))
    rng.shuffle(txs)
    blocks = [Block(h, "0" * 64, tuple(txs[i:i + 5000])) for h, i in enumerate(range(0, len(txs), 5000))]
    got = reassemble_blocks(blocks)
    assert not got.incomplete
    assert sorted((m.submitter, m.data) for m in got.messages) == sorted(expected)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.binary(min_size=1, max_size=400), min_size=1, max_size=6), st.randoms(use_true_random=False),
       st.integers(1, 4))
def test_interleaved_messages_round_trip(msgs, rnd, per_tx):
    ledger = Ledger(segments_per_transaction=per_tx)
    for i, m in enumerate(msgs):
        ledger.submit("AB"[i % 2], m)
    rnd.shuffle(ledger.pending)
    ledger.advance_round()
    assert sorted(reassemble(ledger)) == sorted(("AB"[i % 2], m) for i, m in enumerate(msgs))


def test_missing_terminal_is_incomplete():
    chain = segment(b"q" * 200, "A")
    got = reassemble_blocks([Block(0, "0" * 64, tuple(chain[:-1]))])
    assert got.messages == [] and got.incomplete == [tuple(t.txid for t in chain[:-1])]


def test_reverse_block_order():
    chain = segment(b"r" * 300, "A")
    blocks = [Block(i, "0" * 64, (tx,)) for i, tx in enumerate(reversed(chain))]
    assert [m.data for m in reassemble_blocks(blocks).messages] == [b"r" * 300]


def test_submit_and_advance():
    ledger = Ledger()
    ledger.submit("A", b"one")
    ledger.submit("B", b"two")
    assert reassemble(ledger) == []
    block = ledger.advance_round()
    assert block.height == 0
    assert reassemble(ledger) == [("A", b"one"), ("B", b"two")]
    assert ledger.advance_round().transactions == () and ledger.height == 1


def test_block_digest_sensitivity():
    a = Block(0, "0" * 64, tuple(segment(b"x", "A")))
    b = Block(0, "0" * 64, tuple(segment(b"y", "A")))
    assert a.digest != b.digest


def _ledger_with(n_blocks):
    ledger = Ledger()
    for h in range(n_blocks):
        ledger.submit("A", f"message {h}".encode())
        ledger.advance_round()
    return ledger


def test_revert_and_retention():
    ledger = _ledger_with(6)
    ledger.revert_to(2)
    assert ledger.height == 2
    assert len(ledger.retained_branches) == 1 and len(ledger.retained_branches[0][1]) == 3
    assert (("A", b"message 4") not in reassemble(ledger))
    assert b"message 4" in [m.data for m in ledger.reassemble(include_retained=True).messages]
    ledger.advance_round()
    ledger.revert_to(1)
    assert len(ledger.retained_branches) == 2
    lineages = ledger.lineages()
    assert [len(x) for x in lineages] == [2, 6, 4]


def test_revert_height_guard():
    ledger = _ledger_with(3)
    for bad in (-1, 2, 7):
        with pytest.raises(InvalidHeight):
            ledger.revert_to(bad)


def test_persistence_round_trip():
    ledger = Ledger(meta={"directory": {}})
    for h in range(4):
        ledger.submit("A", bytes([h]) * 100)
        ledger.advance_round()
    ledger.revert_to(1)
    ledger.submit("B", b"after")
    ledger.advance_round()
    text = ledger.dumps()
    again = Ledger.loads(text)
    assert again.dumps() == text
    assert again.meta == {"directory": {}}
    assert json.loads(text.splitlines()[0])["format_version"] == 1


def test_corrupt_line_reports_line_number():
    text = _ledger_with(3).dumps().splitlines()
    text[2] = text[2].replace('"height":1', '"height":5')
    with pytest.raises(LedgerError) as info:
        Ledger.loads("\n".join(text))
    assert info.value.line == 3
