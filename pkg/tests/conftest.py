import random

import pytest

from pooltrace.crypto import NodeIdentity


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def identities():
    return {n: NodeIdentity.generate(n, random.Random(f"id:{n}")) for n in "ABCDEF"}


@pytest.fixture
def directory(identities):
    return {n: i.public for n, i in identities.items()}
