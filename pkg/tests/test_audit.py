import pytest

from pooltrace import audit
from pooltrace.audit import DenialClaim
from pooltrace.messaging import Command
from pooltrace.errors import EvidenceIncomplete, ReplayError, UnknownAccess

from helpers import MiniPool


def run_fetch(ids="ABCDE", behaviors=None, fetchers=("B",), rounds=3):
    mp = MiniPool(ids, behaviors)
    manifest = mp["A"].publish("doc", b"plain text body " * 100)
    mp.step()
    outcomes = {}
    for f in fetchers:
        outcomes[f] = mp[f].fetch(manifest.file_id)
    mp.step(rounds)
    return mp, manifest, outcomes


def kinds(events):
    return [e.kind for e in events]


def test_publish_only_events():
    mp = MiniPool("ABCDE")
    mp["A"].publish("doc", b"data")
    mp.step()
    events = audit.replay(mp.ledger.dumps())
    assert kinds(events).count("FileAnnounced") == 1
    assert kinds(events).count("ShareDistributed") == 5
    assert kinds(events).count("VersionUpdated") == 1
    assert "AccessProven" not in kinds(events)


def test_honest_fetch_one_proof():
    mp, manifest, _ = run_fetch()
    events = audit.replay(mp.ledger.dumps())
    proofs = [e for e in events if e.kind == "AccessProven"]
    assert [(e.actor, e.file_id) for e in proofs] == [("B", manifest.file_id)]
    heights = [e.block_height for e in events]
    assert heights == sorted(heights)


def test_replay_is_deterministic():
    mp, _, _ = run_fetch()
    text = mp.ledger.dumps()
    assert audit.replay(text) == audit.replay(text)


def test_below_threshold_no_proof():
    # n = 4 of 6: own share + A + C = 3
    mp, manifest, _ = run_fetch("ABCDEF", {x: "silent" for x in "DEF"}, rounds=4)
    events = audit.replay(mp.ledger.dumps())
    assert "ShareRequested" in kinds(events) and "AccessProven" not in kinds(events)


def test_first_access_report():
    mp, manifest, _ = run_fetch(fetchers=("B", "C"))
    report = audit.first_access_report(audit.replay(mp.ledger), manifest.file_id)
    assert set(report) == {"B", "C"}
    assert "A" not in report
    assert audit.first_access_report(audit.replay(mp.ledger), "unknown") == {}


def test_first_access_keeps_earliest():
    mp, manifest, _ = run_fetch()
    # a second protocol request by B (bypassing the cache) lands later
    del mp["B"].files_local[manifest.file_id]
    mp["B"].fetch(manifest.file_id)
    mp.step(2)
    events = audit.replay(mp.ledger)
    proofs = [e.block_height for e in events if e.kind == "AccessProven"]
    assert len(proofs) == 2
    assert audit.first_access_report(events, manifest.file_id) == {"B": min(proofs)}


def test_corrupt_log_line():
    mp, _, _ = run_fetch()
    lines = mp.ledger.dumps().splitlines()
    lines[3] = lines[3][:-10]
    with pytest.raises(ReplayError) as info:
        audit.replay("\n".join(lines))
    assert info.value.line == 4 and "line 4" in str(info.value)


def test_forged_update_event_and_offense():
    mp = MiniPool("ABCDE")
    m = mp["A"].publish("doc", b"x" * 50)
    mp.step()
    mp["D"].forge_version_update(m.file_id)
    mp.step()
    trail = audit.audit_ledger(mp.ledger)
    assert [e.actor for e in trail.events if e.kind == "ForgedUpdateRejected"] == ["D"]
    offenses = audit.identify_malicious(trail.events, trail.digest_lists, lookup=trail.lookup)
    assert [(o.node, o.offense) for o in offenses] == [("D", "ForgedUpdate")]


def test_honest_run_has_no_offenses():
    mp, _, _ = run_fetch()
    trail = audit.audit_ledger(mp.ledger)
    disclosed = mp["B"].received_shares
    assert audit.identify_malicious(trail.events, trail.digest_lists, disclosed, lookup=trail.lookup) == []


def test_wrong_share_offense():
    mp, manifest, _ = run_fetch("ABCDEF", {"E": "wrong_share"})
    trail = audit.audit_ledger(mp.ledger)
    offenses = audit.identify_malicious(trail.events, trail.digest_lists, mp["B"].received_shares,
                                        lookup=trail.lookup)
    assert [(o.node, o.offense) for o in offenses] == [("E", "WrongShare")]


def test_silent_holder_three_requests():
    mp = MiniPool("ABCDEF", {"F": "silent"})
    m = mp["A"].publish("doc", b"x" * 500)
    mp.step()
    for f in "BCD":
        mp[f].fetch(m.file_id)
        mp.step(2)
    mp.step(3)
    trail = audit.audit_ledger(mp.ledger)
    offenses = audit.identify_malicious(trail.events, trail.digest_lists, lookup=trail.lookup, budget=3)
    assert [(o.node, o.offense) for o in offenses] == [("F", "SilentHolder")] * 3


def test_junk_offense():
    offenses = audit.identify_malicious([], {}, junk_rejections={"E": 4, "B": 0})
    assert [(o.node, o.offense, o.count) for o in offenses] == [("E", "JunkUpload", 4)]


def _claim(mp, manifest, node, ref, **evidence):
    ct = b"".join(mp.pool.blocks.stores[manifest.source_node].blocks[k].data
                  for k in sorted(mp.pool.blocks.stores[manifest.source_node].blocks)
                  if k.file_id == manifest.file_id)
    return DenialClaim(node, manifest.file_id, ref, ct, **evidence)


def test_false_denial_refuted():
    mp, manifest, outcomes = run_fetch()
    claim = _claim(mp, manifest, "B", outcomes["B"].message_reference,
                   private_key=mp["B"].identity.encryption_private_bytes())
    verdict = audit.verify_denial(claim, mp.ledger.dumps())
    assert verdict.outcome == "Refuted"
    assert verdict.transcript["shares_available"] >= 4


def test_denial_with_disclosed_shares():
    mp, manifest, outcomes = run_fetch()
    ref = outcomes["B"].message_reference
    shares = tuple(sorted((s.index, s.value) for r, _, s in mp["B"].received_shares if r == ref))
    verdict = audit.verify_denial(_claim(mp, manifest, "B", ref, shares=shares), mp.ledger)
    assert verdict.outcome == "Refuted"


def test_flood_denial_upheld():
    mp, manifest, outcomes = run_fetch("ABCDEF", {x: "wrong_share" for x in "DEF"})
    assert outcomes["B"].reason == "ReconstructionImpossible"
    claim = _claim(mp, manifest, "B", outcomes["B"].message_reference,
                   private_key=mp["B"].identity.encryption_private_bytes())
    assert audit.verify_denial(claim, mp.ledger).outcome == "Upheld"
    assert DenialClaim.from_json(claim.to_json()) == claim


def test_denial_with_wrong_key_is_incomplete():
    mp, manifest, outcomes = run_fetch()
    claim = _claim(mp, manifest, "B", outcomes["B"].message_reference,
                   private_key=mp["C"].identity.encryption_private_bytes())
    with pytest.raises(EvidenceIncomplete):
        audit.verify_denial(claim, mp.ledger)
    claim = _claim(mp, manifest, "B", outcomes["B"].message_reference)
    with pytest.raises(EvidenceIncomplete):
        audit.verify_denial(claim, mp.ledger)


def test_denial_without_access_event():
    mp, manifest, outcomes = run_fetch()
    claim = _claim(mp, manifest, "C", "feedface", shares=())
    with pytest.raises(UnknownAccess):
        audit.verify_denial(claim, mp.ledger)


def test_revert_keeps_evidence():
    mp, manifest, _ = run_fetch()
    before = audit.audit_ledger(mp.ledger).access_proven()
    mp.ledger.revert_to(0)
    assert audit.audit_ledger(mp.ledger, include_retained=False).access_proven() == set()
    after = audit.audit_ledger(mp.ledger.dumps()).access_proven()
    assert before == after == {("B", manifest.file_id)}


def test_revoked_version_never_proves_access():
    mp = MiniPool("ABCDEF")
    m = mp["A"].publish("doc", b"x" * 400)
    mp.step()
    mp["A"].revoke(m.file_id)
    mp.step()
    mp["C"].fetch(m.file_id)
    mp.step(3)
    events = audit.replay(mp.ledger)
    assert "Revoked" in kinds(events) and "AccessProven" not in kinds(events)


def test_stale_request_flagged():
    mp = MiniPool("ABCDE")
    m = mp["A"].publish("doc", b"x" * 400)
    mp.step()
    mp["A"].reissue_shares(m.file_id)
    mp.step()
    mp["B"]._broadcast(Command.create("ShareRequest", file_id=m.file_id, version=1, message_reference="01"))
    mp["C"].fetch(m.file_id)
    mp.step(2)
    reqs = {e.actor: (e.version, e.stale) for e in audit.replay(mp.ledger) if e.kind == "ShareRequested"}
    assert reqs == {"B": (1, True), "C": (2, False)}
