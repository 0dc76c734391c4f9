"""Command line: ``pooltrace run | audit | verify-claim``."""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from . import audit, sim
from .errors import ConfigError, EvidenceIncomplete, ReplayError, UnknownAccess

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def bundled_scenarios() -> list[str]:
    root = resources.files("pooltrace") / "scenarios"
    return sorted(p.name.removesuffix(".json") for p in root.iterdir() if p.name.endswith(".json"))


def resolve_scenario(arg: str) -> Path:
    """A path, or the name of a bundled scenario (with or without .json)."""
    path = Path(arg)
    if path.exists():
        return path
    bundled = resources.files("pooltrace") / "scenarios" / (arg.removesuffix(".json") + ".json")
    if bundled.is_file():
        return Path(str(bundled))
    raise FileNotFoundError(arg)


def _emit(obj, out=None):
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    scenario = sim.load_scenario(resolve_scenario(args.scenario))
    result = sim.run(scenario)
    if args.ledger:
        Path(args.ledger).write_text(result.ledger.dumps(), encoding="utf-8")
    if args.out:
        Path(args.out).write_bytes(result.report_bytes())
    failed = [a for a in result.report["assertions"] if not a["passed"]]
    gt = result.report["ground_truth"]
    print(f"{scenario.name or args.scenario}: {len(result.report['events'])} events, "
          f"{len(gt['access_proven'])} proven accesses, "
          f"{len(result.report['assertions']) - len(failed)}/{len(result.report['assertions'])} assertions passed")
    for a in failed:
        print(f"  FAILED {json.dumps(a['rule'], sort_keys=True)} -> {a['actual']}")
    return EXIT_OK if result.passed else EXIT_FAILED


def cmd_audit(args) -> int:
    text = Path(args.ledger).read_text(encoding="utf-8")
    trail = audit.audit_ledger(text)
    events = trail.events
    files = [args.file] if args.file else sorted(trail.manifests)
    if args.file:
        events = [e for e in events if e.file_id == args.file]
    report = {
        "format_version": 1,
        "events": [e.to_json() for e in events],
        "first_access": {fid: audit.first_access_report(trail.events, fid) for fid in files},
    }
    if args.json:
        _emit(report)
    else:
        for e in events:
            ref = f" ref={e.message_reference}" if e.message_reference else ""
            target = f" -> {e.target}" if e.target else ""
            print(f"{e.block_height:>5} {e.branch:<11} {e.kind:<21} {e.actor}{target} "
                  f"{e.file_id} v{e.version}{ref}")
        for fid, first in report["first_access"].items():
            for node, height in sorted(first.items()):
                print(f"first access: {node} read {fid} at height {height}")
    return EXIT_OK


def cmd_verify_claim(args) -> int:
    text = Path(args.ledger).read_text(encoding="utf-8")
    claim = audit.DenialClaim.from_json(json.loads(Path(args.claim).read_text(encoding="utf-8")))
    verdict = audit.verify_denial(claim, text)
    _emit(verdict.to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pooltrace", description="Simulate and audit a traceable data pool.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run a scenario and evaluate its assertions")
    p.add_argument("scenario", help="scenario JSON path or bundled scenario name")
    p.add_argument("--out", help="write the report JSON here")
    p.add_argument("--ledger", help="write the ledger log here")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("audit", help="replay a ledger log")
    p.add_argument("ledger")
    p.add_argument("--file", help="restrict to one file id")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("verify-claim", help="check a denial claim against a ledger log")
    p.add_argument("ledger")
    p.add_argument("claim")
    p.set_defaults(func=cmd_verify_claim)

    p = sub.add_parser("list", help="list bundled scenarios")
    p.set_defaults(func=lambda a: print("\n".join(bundled_scenarios())) or EXIT_OK)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
    except (ReplayError, EvidenceIncomplete, UnknownAccess) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_USAGE
