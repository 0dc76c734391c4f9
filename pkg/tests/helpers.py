import random

from pooltrace import audit
from pooltrace.crypto import NodeIdentity
from pooltrace.ledger import Ledger, reassemble_blocks
from pooltrace.messaging import parse_xml
from pooltrace.node import Pool, PoolConfig, PoolNode


class MiniPool:
    """A hand-driven pool for unit tests; mirrors the simulator's round loop."""

    def __init__(self, ids="ABCDE", behaviors=None, **config):
        behaviors = behaviors or {}
        idents = {n: NodeIdentity.generate(n, random.Random(f"mini:{n}")) for n in ids}
        self.ledger = Ledger(meta=audit.directory_meta({n: i.public for n, i in idents.items()}))
        self.pool = Pool(PoolConfig(**config), self.ledger)
        self.nodes = {}
        for n in ids:
            node = PoolNode(idents[n], self.pool, behaviors.get(n, "honest"), random.Random(f"rng:{n}"))
            self.nodes[n] = node
            self.pool.add(node)

    def __getitem__(self, node_id):
        return self.nodes[node_id]

    def step(self, rounds=1):
        for _ in range(rounds):
            self.pool.round += 1
            block = self.ledger.advance_round()
            for msg in reassemble_blocks([block]).messages:
                env = parse_xml(msg.data)
                for nid in self.pool.members():
                    self.pool.nodes[nid].handle_incoming(env)
            for nid in self.pool.members():
                self.pool.nodes[nid].tick()

    def messages(self):
        out = []
        for m in self.ledger.reassemble(include_retained=True).messages:
            env = parse_xml(m.data)
            kind = env.context.command_type if env.context else None
            out.append((m.submitter, env, kind))
        return out
