"""Deterministic round-based scenario runner.

One round = scripted actions, then one mined block, then delivery of that
block's messages to every member (in id order), then each member's tick.
After the script ends the loop keeps mining until nothing is pending.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Optional

from . import audit, crypto
from .crypto import NodeIdentity
from .errors import (
    ConfigError,
    EvidenceIncomplete,
    InvalidHeight,
    NotAuthorized,
    UnknownAccess,
    UnknownFile,
)
from .ledger import Ledger, reassemble_blocks
from .messaging import parse_xml
from .node import BEHAVIORS, Pool, PoolConfig, PoolNode

FORMAT_VERSION = 1
ACTIONS = (
    "publish", "fetch", "reissue", "revoke", "revert",
    "add_node", "remove_node", "collude", "forge_update",
)
SETTLE_ROUNDS = 50


@dataclass
class Action:
    round: int
    actor: Optional[str]
    action: str
    params: dict


@dataclass
class Scenario:
    seed: int
    nodes: list  # [(id, behavior)]
    actions: list
    block_size: int = 1024
    replication: int = 2
    round_budget: int = 3
    segments_per_transaction: int = 1
    assertions: list = field(default_factory=list)
    name: str = ""

    def all_node_ids(self) -> list:
        ids = [n for n, _ in self.nodes]
        ids += [a.actor for a in self.actions if a.action == "add_node"]
        return sorted(ids)


def _need(obj, key, path, kind):
    if key not in obj:
        raise ConfigError(f"{path}.{key}", "missing")
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{path}.{key}", "must be an integer")
    if kind is not int and not isinstance(value, kind):
        raise ConfigError(f"{path}.{key}", f"must be {kind.__name__}")
    return value


def parse_scenario(obj: dict, name: str = "") -> Scenario:
    if not isinstance(obj, dict):
        raise ConfigError("$", "scenario must be a JSON object")
    if obj.get("format_version") != FORMAT_VERSION:
        raise ConfigError("$.format_version", f"must be {FORMAT_VERSION}")
    seed = _need(obj, "seed", "$", int)
    nodes = []
    for i, n in enumerate(_need(obj, "nodes", "$", list)):
        path = f"$.nodes[{i}]"
        if not isinstance(n, dict):
            raise ConfigError(path, "must be an object")
        node_id = _need(n, "id", path, str)
        behavior = n.get("behavior", "honest")
        if behavior not in BEHAVIORS:
            raise ConfigError(f"{path}.behavior", f"unknown behavior {behavior!r}")
        if node_id in dict(nodes):
            raise ConfigError(f"{path}.id", f"duplicate node {node_id!r}")
        nodes.append((node_id, behavior))
    if not nodes:
        raise ConfigError("$.nodes", "at least one node required")

    members = {n for n, _ in nodes}
    known = set(members)
    actions, last_round = [], 0
    for i, a in enumerate(_need(obj, "actions", "$", list)):
        path = f"$.actions[{i}]"
        if not isinstance(a, dict):
            raise ConfigError(path, "must be an object")
        rnd = _need(a, "round", path, int)
        if rnd < 1:
            raise ConfigError(f"{path}.round", "rounds start at 1")
        if rnd < last_round:
            raise ConfigError(f"{path}.round", "rounds must be non-decreasing")
        last_round = rnd
        kind = _need(a, "action", path, str)
        if kind not in ACTIONS:
            raise ConfigError(f"{path}.action", f"unknown action {kind!r}")
        params = a.get("params", {})
        if not isinstance(params, dict):
            raise ConfigError(f"{path}.params", "must be an object")
        actor = a.get("actor")
        if kind == "revert":
            _need(params, "height", f"{path}.params", int)
        elif kind == "add_node":
            if not isinstance(actor, str) or actor in known:
                raise ConfigError(f"{path}.actor", "add_node needs a new node id")
            if params.get("behavior", "honest") not in BEHAVIORS:
                raise ConfigError(f"{path}.params.behavior", "unknown behavior")
            known.add(actor)
            members.add(actor)
        else:
            if actor not in members:
                raise ConfigError(f"{path}.actor", f"{actor!r} is not a pool member at round {rnd}")
            if kind == "remove_node":
                members.discard(actor)
            elif kind == "publish":
                _need(params, "name", f"{path}.params", str)
                if "content" not in params and "size" not in params:
                    raise ConfigError(f"{path}.params", "publish needs content or size")
            elif kind in ("fetch", "reissue", "revoke", "collude", "forge_update"):
                _need(params, "file", f"{path}.params", str)
                if kind == "collude":
                    for j, p in enumerate(_need(params, "partners", f"{path}.params", list)):
                        if p not in members:
                            raise ConfigError(f"{path}.params.partners[{j}]", f"unknown member {p!r}")
        actions.append(Action(rnd, actor, kind, dict(params)))

    cfg = {}
    for key, default in (("block_size", 1024), ("replication", 2), ("round_budget", 3),
                         ("segments_per_transaction", 1)):
        value = obj.get(key, default)
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            raise ConfigError(f"$.{key}", "must be a positive integer")
        cfg[key] = value
    assertions = obj.get("assertions", [])
    if not isinstance(assertions, list):
        raise ConfigError("$.assertions", "must be a list")
    for i, rule in enumerate(assertions):
        if not isinstance(rule, dict) or rule.get("kind") not in ASSERTIONS:
            raise ConfigError(f"$.assertions[{i}].kind", "unknown assertion kind")
    return Scenario(seed, nodes, actions, assertions=assertions,
                    name=obj.get("name", name), **cfg)


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("$", f"invalid JSON: {exc}") from None
    return parse_scenario(obj, name=str(path).rsplit("/", 1)[-1].removesuffix(".json"))


@dataclass
class RunResult:
    report: dict
    ledger: Ledger
    pool: Pool
    nodes: dict
    files: dict  # name -> file_id

    @property
    def passed(self) -> bool:
        return self.report["passed"]

    def report_bytes(self) -> bytes:
        return dumps_report(self.report)


def dumps_report(report: dict) -> bytes:
    return (json.dumps(report, sort_keys=True, indent=2) + "\n").encode()


class Simulation:
    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        seed = scenario.seed
        self.identities = {
            nid: NodeIdentity.generate(nid, random.Random(f"{seed}:identity:{nid}"))
            for nid in scenario.all_node_ids()
        }
        directory = {nid: ident.public for nid, ident in self.identities.items()}
        self.ledger = Ledger(
            meta=audit.directory_meta(directory),
            segments_per_transaction=scenario.segments_per_transaction,
        )
        config = PoolConfig(scenario.block_size, scenario.replication, scenario.round_budget)
        self.pool = Pool(config, self.ledger)
        self.nodes: dict[str, PoolNode] = {}
        for nid, behavior in scenario.nodes:
            self._join(nid, behavior)
        self.files: dict[str, str] = {}
        self.action_log: list[dict] = []
        self.departed: dict[str, int] = {}
        self.revert_checks: list[dict] = []

    def _join(self, nid, behavior):
        node = PoolNode(self.identities[nid], self.pool, behavior,
                        random.Random(f"{self.scenario.seed}:node:{nid}"))
        self.nodes[nid] = node
        self.pool.add(node)
        return node

    # -- actions -------------------------------------------------------------

    def _file(self, name):
        if name not in self.files:
            raise UnknownFile(f"no file named {name!r} has been published")
        return self.files[name]

    def _content(self, params):
        if "content" in params:
            return str(params["content"]).encode()
        rng = random.Random(f"{self.scenario.seed}:content:{params['name']}")
        return rng.randbytes(int(params["size"]))

    def _run_action(self, index: int, act: Action):
        entry = {"round": act.round, "actor": act.actor, "action": act.action, "result": "ok"}
        node = self.nodes.get(act.actor)
        try:
            if act.action == "publish":
                manifest = node.publish(act.params["name"], self._content(act.params),
                                        act.params.get("metadata", {}))
                self.files[act.params["name"]] = manifest.file_id
                entry["file_id"] = manifest.file_id
            elif act.action == "fetch":
                outcome = node.fetch(self._file(act.params["file"]))
                entry["message_reference"] = outcome.message_reference
            elif act.action == "reissue":
                entry["version"] = node.reissue_shares(self._file(act.params["file"]))
            elif act.action == "revoke":
                entry["version"] = node.revoke(self._file(act.params["file"]))
            elif act.action == "forge_update":
                entry["version"] = node.forge_version_update(self._file(act.params["file"]))
            elif act.action == "collude":
                partners = [self.nodes[p] for p in act.params["partners"]]
                entry["result"] = "ok" if node.collude(self._file(act.params["file"]), partners) else "failed"
            elif act.action == "revert":
                self._revert(index, act.params["height"])
            elif act.action == "add_node":
                new = self._join(act.actor, act.params.get("behavior", "honest"))
                # a newcomer learns the public state from the chain
                for msg in self.ledger.reassemble().messages:
                    new.handle_incoming(parse_xml(msg.data), replay=True)
            elif act.action == "remove_node":
                self.pool.remove(act.actor)
                self.departed[act.actor] = self.ledger.height
        except (NotAuthorized, UnknownFile) as exc:
            entry["result"] = f"{type(exc).__name__}: {exc}"
        self.action_log.append(entry)

    def _revert(self, index, height):
        before = audit.audit_ledger(self.ledger).access_proven()
        try:
            self.ledger.revert_to(height)
        except InvalidHeight as exc:
            raise ConfigError(f"$.actions[{index}].params.height", str(exc)) from None
        after_main = audit.audit_ledger(self.ledger, include_retained=False).access_proven()
        after = audit.audit_ledger(self.ledger).access_proven()
        self.revert_checks.append({
            "height": height,
            "before": sorted(map(list, before)),
            "after_main_only": sorted(map(list, after_main)),
            "after_with_retained": sorted(map(list, after)),
            "evidence_retained": before <= after,
        })

    # -- round loop ----------------------------------------------------------

    def _round(self):
        block = self.ledger.advance_round()
        for msg in reassemble_blocks([block]).messages:
            envelope = parse_xml(msg.data)
            for nid in self.pool.members():
                self.pool.nodes[nid].handle_incoming(envelope)
        for nid in self.pool.members():
            self.pool.nodes[nid].tick()

    def _busy(self) -> bool:
        return bool(self.ledger.pending) or any(
            n.open_requests or n._pending_uploads for n in self.pool.nodes.values()
        )

    def run(self) -> RunResult:
        actions = list(enumerate(self.scenario.actions))
        rnd = 0
        while actions or self._busy():
            rnd += 1
            if not actions and rnd > self._last_round() + SETTLE_ROUNDS:
                break
            self.pool.round = rnd
            while actions and actions[0][1].round == rnd:
                self._run_action(*actions.pop(0))
            self._round()
        return RunResult(self._report(), self.ledger, self.pool, self.nodes, self.files)

    def _last_round(self):
        return self.scenario.actions[-1].round if self.scenario.actions else 0

    # -- reporting -----------------------------------------------------------

    def _denials(self, trail):
        proven_refs = {e.message_reference for e in trail.events if e.kind == "AccessProven"}
        out = []
        for nid in sorted(self.nodes):
            node = self.nodes[nid]
            for outcome in node.outcomes:
                if outcome.reason != "ReconstructionImpossible" or outcome.message_reference not in proven_refs:
                    continue
                claim = audit.DenialClaim(
                    nid, outcome.file_id, outcome.message_reference, outcome.ciphertext,
                    private_key=node.identity.encryption_private_bytes(),
                )
                try:
                    verdict = audit.verify_denial(claim, self.ledger)
                    result = verdict.to_json()
                except (EvidenceIncomplete, UnknownAccess) as exc:
                    result = {"outcome": type(exc).__name__, "transcript": {"error": str(exc)}}
                out.append({
                    "claimant": nid, "file_id": outcome.file_id,
                    "message_reference": outcome.message_reference, **result,
                    "claim": claim.to_json(),
                })
        return out

    def _conservation(self) -> bool:
        submitted = sorted(data for _, data in self.pool.submitted)
        landed = sorted(m.data for m in self.ledger.reassemble(include_retained=True).messages)
        return submitted == landed

    def _report(self) -> dict:
        trail = audit.audit_ledger(self.ledger)
        denials = self._denials(trail)
        upheld = {d["message_reference"] for d in denials if d["outcome"] == "Upheld"}
        sources = {fid: m["source_node"] for fid, m in trail.manifests.items()}
        proven = {
            (n, f) for n, f in trail.access_proven(exclude_refs=upheld) if sources.get(f) != n
        }
        acquisitions = [a for nid in sorted(self.nodes) for a in self.nodes[nid].acquisitions]
        protocol = {(a.node, a.file_id) for a in acquisitions if a.path == "protocol"}

        disclosed = [t for nid in sorted(self.nodes) for t in self.nodes[nid].received_shares]
        offenses = audit.identify_malicious(
            trail.events, trail.digest_lists, disclosed,
            lookup=trail.lookup, budget=self.scenario.round_budget, departed=self.departed,
            junk_rejections=self.pool.blocks.rejections_by_uploader(),
        )
        all_blocks = len(self.ledger.main_branch) + sum(len(b) for _, b in self.ledger.retained_branches)
        counters = {
            "messages": len(self.ledger.reassemble(include_retained=True).messages),
            "transactions": self.ledger.all_transactions(),
            "blocks": all_blocks,
            "rejected_blocks": self.pool.blocks.rejected_total(),
            "source_fallbacks": self.pool.blocks.source_fallbacks,
            "unannounced_blocks": len(self.pool.blocks.unannounced_blocks()),
            "forged_dropped": sum(n.forged_dropped for n in self.nodes.values()),
            "rejected_updates": sum(n.rejected_updates for n in self.nodes.values()),
            "nonresponding_block_peers": sum(self.pool.blocks.nonresponders.values()),
            "junk_offers": sum(n.junk_offers for n in self.nodes.values()),
        }
        report = {
            "format_version": FORMAT_VERSION,
            "scenario": self.scenario.name,
            "seed": self.scenario.seed,
            "files": dict(sorted(self.files.items())),
            "actions": self.action_log,
            "events": [e.to_json() for e in trail.events],
            "first_access": {
                fid: audit.first_access_report(trail.events, fid, exclude_refs=upheld)
                for fid in sorted(trail.manifests)
            },
            "offenses": [o.to_json() for o in offenses],
            "counters": counters,
            "fetches": {
                nid: [o.to_json() for o in self.nodes[nid].outcomes]
                for nid in sorted(self.nodes) if self.nodes[nid].outcomes
            },
            "acquisitions": [
                {"node": a.node, "file_id": a.file_id, "round": a.round, "path": a.path,
                 "reference": a.reference, "shares_used": a.shares_used}
                for a in acquisitions
            ],
            "denials": denials,
            "revert_checks": self.revert_checks,
            "ground_truth": {
                "protocol_acquisitions": sorted(map(list, protocol)),
                "access_proven": sorted(map(list, proven)),
                "matches": protocol == proven,
            },
            "conservation": self._conservation(),
            "ledger_digest": crypto.hash(self.ledger.dumps().encode()).hex,
        }
        report["assertions"] = [_check(rule, report, self) for rule in self.scenario.assertions]
        report["passed"] = all(a["passed"] for a in report["assertions"])
        return report


def run(scenario: Scenario) -> RunResult:
    return Simulation(scenario).run()


# -- assertions ------------------------------------------------------------


def _cmp(actual, op, expected) -> bool:
    return {
        "==": actual == expected, "!=": actual != expected, ">=": actual >= expected,
        "<=": actual <= expected, ">": actual > expected, "<": actual < expected,
    }[op]


def _a_access_proven(rule, report, sim):
    fid = sim.files.get(rule["file"])
    actual = [rule["node"], fid] in report["ground_truth"]["access_proven"]
    return actual == rule.get("expect", True), actual


def _a_fetch_outcome(rule, report, sim):
    fid = sim.files.get(rule["file"])
    fetches = [f for f in report["fetches"].get(rule["node"], []) if f["file_id"] == fid]
    if not fetches:
        return False, None
    got = fetches[rule.get("index", -1)]
    ok = got["status"] == rule["status"] and ("reason" not in rule or got["reason"] == rule["reason"])
    return ok, {"status": got["status"], "reason": got["reason"]}


def _a_offense(rule, report, sim):
    actual = sum(
        1 for o in report["offenses"]
        if o["offense"] == rule["offense"] and ("node" not in rule or o["node"] == rule["node"])
    )
    return _cmp(actual, rule.get("op", "=="), rule.get("count", 1)), actual


def _a_counter(rule, report, sim):
    actual = report["counters"][rule["name"]]
    return _cmp(actual, rule.get("op", "=="), rule["value"]), actual


def _a_proof(rule, report, sim):
    actual = report["ground_truth"]["matches"]
    return actual, actual


def _a_denial(rule, report, sim):
    fid = sim.files.get(rule["file"])
    got = [d["outcome"] for d in report["denials"] if d["claimant"] == rule["node"] and d["file_id"] == fid]
    return rule["outcome"] in got, got


def _a_acquisition(rule, report, sim):
    fid = sim.files.get(rule["file"])
    actual = any(a["node"] == rule["node"] and a["file_id"] == fid and a["path"] == rule["path"]
                 for a in report["acquisitions"])
    return actual == rule.get("expect", True), actual


def _a_evidence(rule, report, sim):
    actual = all(c["evidence_retained"] for c in report["revert_checks"]) and bool(report["revert_checks"])
    return actual, actual


ASSERTIONS = {
    "access_proven": _a_access_proven,
    "fetch_outcome": _a_fetch_outcome,
    "offense": _a_offense,
    "counter": _a_counter,
    "proof_matches_ground_truth": _a_proof,
    "denial": _a_denial,
    "acquisition": _a_acquisition,
    "evidence_retained": _a_evidence,
}


def _check(rule, report, sim) -> dict:
    try:
        ok, actual = ASSERTIONS[rule["kind"]](rule, report, sim)
    except (KeyError, IndexError, TypeError) as exc:
        ok, actual = False, f"bad assertion: {exc!r}"
    return {"rule": rule, "passed": bool(ok), "actual": actual}
