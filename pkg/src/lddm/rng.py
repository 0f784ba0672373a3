"""Seed handling.

Every stochastic routine takes an explicit ``torch.Generator`` (or numpy
``Generator`` for data generation). Derived streams are keyed by integer
tuples so that serial and parallel runs draw identical numbers.
"""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np
import torch


def derive_seed(*keys: int) -> int:
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


@contextlib.contextmanager
def seeded_init(seed: int) -> Iterator[None]:
    """Run module construction under a fixed global torch seed without leaking it."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield
