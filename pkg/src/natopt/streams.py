"""Deterministic random-stream derivation.

Every stochastic component in the package draws from a numpy Generator that
is derived here, so that results depend only on integer seeds and never on
call order, worker count, or global state.
"""

from __future__ import annotations

import numpy as np

# Domain tags for deriving independent sub-seeds from one run seed.
TAG_CHAIN = 1
TAG_DATASET = 2
TAG_MODEL_INIT = 3
TAG_TRAIN = 4
TAG_EVAL = 5
TAG_REFERENCE = 6
TAG_GENERATE = 7


def make_generator(*entropy: int) -> np.random.Generator:
    """PCG64 generator keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(tuple(entropy))))


def sample_stream(base_seed: int, index: int) -> np.random.Generator:
    """Independent stream for one generated sample, keyed by (base seed, index)."""
    return make_generator(base_seed, index)


def derive_seed(base_seed: int, tag: int) -> int:
    """Stable 63-bit sub-seed for the given domain tag."""
    state = np.random.SeedSequence((base_seed, tag)).generate_state(2, np.uint64)
    return int(state[0] & np.uint64(0x7FFFFFFFFFFFFFFF))
