"""Traceable file access for a private peer-to-peer data pool.

Files are encrypted and spread over the pool's block store; their keys are
split into salted threshold shares that travel as messages embedded in a
ledger. Replaying the ledger tells who asked for, and received, enough shares
to read a file.
"""

from .audit import AuditEvent, DenialClaim, audit_ledger, first_access_report, identify_malicious, replay, verify_denial
from .crypto import NodeIdentity
from .ledger import Ledger
from .node import Pool, PoolConfig, PoolNode
from .sharing import ShareScheme, derive_threshold, reconstruct, reconstruct_with_faults, split
from .sim import load_scenario, parse_scenario, run

__all__ = [
    "AuditEvent", "DenialClaim", "Ledger", "NodeIdentity", "Pool", "PoolConfig", "PoolNode",
    "ShareScheme", "audit_ledger", "derive_threshold", "first_access_report", "identify_malicious",
    "load_scenario", "parse_scenario", "reconstruct", "reconstruct_with_faults", "replay",
    "run", "split", "verify_denial",
]
