"""Deterministic counter-based random generators.

All randomness in the package flows through :func:`seeded_rng`, which maps an
arbitrary tuple of integers to a Philox generator via ``SeedSequence``, so any
derived stream (per trajectory, per epoch, per sample set) is reproducible and
independent of execution order.
"""

from __future__ import annotations

import numpy as np

__all__ = ["seeded_rng"]


def _flatten(key) -> tuple[int, ...]:
    if isinstance(key, (tuple, list)):
        out: list[int] = []
        for part in key:
            out.extend(_flatten(part))
        return tuple(out)
    return (int(key) & 0xFFFFFFFFFFFFFFFF,)


def seeded_rng(*key) -> np.random.Generator:
    """Philox generator keyed on an arbitrary tuple of integers."""
    entropy = _flatten(key)
    return np.random.Generator(np.random.Philox(seed=np.random.SeedSequence(entropy)))
