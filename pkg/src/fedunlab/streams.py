"""Counter-based random streams keyed by purpose.

Every random decision in the simulator is drawn from its own Philox
generator whose 128-bit key is derived from a tuple

    (seed, domain, epoch, ...context integers)

so that any draw can be reproduced in isolation and, crucially, fresh
randomness after a partial re-computation never reuses a key that was
consumed before: re-computation bumps the epoch component.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# Key domains. Each domain uses a fixed arity of context integers, so
# variable-length tuples cannot collide across domains.
DOMAIN_DATA = 1  # synthetic data generation: (seed, DOMAIN_DATA)
DOMAIN_CLIENT_SAMPLING = 2  # per-round multiset: (seed, dom, epoch, round)
DOMAIN_MINIBATCH = 3  # per-iteration batch: (seed, dom, epoch, t, client)
DOMAIN_TRIAL = 4  # derived per-trial seeds: (seed, dom, index)
DOMAIN_PROBE = 5  # estimator probes: (seed, dom, index)


def _splitmix64(value: int) -> int:
    value = (value + _GOLDEN) & _MASK64
    z = value
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def stream_key(seed: int, domain: int, *parts: int) -> tuple[int, int]:
    """Mix (seed, domain, parts) into a 128-bit Philox key."""
    lo = _splitmix64((seed & _MASK64) ^ _splitmix64(domain))
    hi = _splitmix64(lo ^ _GOLDEN)
    for part in parts:
        lo = _splitmix64(lo ^ (part & _MASK64))
        hi = _splitmix64(hi ^ lo)
    return lo, hi


def substream(seed: int, domain: int, *parts: int) -> np.random.Generator:
    """Return an independent generator for one keyed decision."""
    lo, hi = stream_key(seed, domain, *parts)
    key = np.array([lo, hi], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_trial_seeds(base_seed: int, count: int, salt: int = 0) -> list[int]:
    """Derive independent per-trial seeds for Monte-Carlo harnesses."""
    return [
        stream_key(base_seed, DOMAIN_TRIAL, salt, index)[0]
        for index in range(count)
    ]
