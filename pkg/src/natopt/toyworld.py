"""Synthetic ground truth: a class-conditional first-order Markov chain.

The chain gives exact joints and conditionals by dynamic programming, so it
serves both as the data source and as the oracle that evaluation metrics and
the perfect-predictor baseline are checked against.  Sequences are int64
arrays over tokens 0..K-1; the value K is the MASK sentinel.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .streams import TAG_CHAIN, TAG_DATASET, make_generator

ENUMERATION_LIMIT = 1_000_000
_STOCHASTIC_TOL = 1e-12


@dataclass(frozen=True)
class GroundTruthChain:
    """Class-conditional Markov chain over token positions.

    pi[c] is the length-K initial distribution of class c and A[c] its KxK
    row-stochastic transition matrix.
    """

    K: int
    N: int
    C: int
    pi: np.ndarray  # (C, K)
    A: np.ndarray  # (C, K, K)

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        A = np.asarray(self.A, dtype=float)
        if pi.shape != (self.C, self.K):
            raise ValueError(f"pi has shape {pi.shape}, expected {(self.C, self.K)}")
        if A.shape != (self.C, self.K, self.K):
            raise ValueError(f"A has shape {A.shape}, expected {(self.C, self.K, self.K)}")
        if np.any(pi < 0) or np.any(A < 0):
            raise ValueError("probabilities must be non-negative")
        if np.max(np.abs(pi.sum(axis=1) - 1.0)) > _STOCHASTIC_TOL:
            raise ValueError("pi rows must sum to 1")
        if np.max(np.abs(A.sum(axis=2) - 1.0)) > _STOCHASTIC_TOL:
            raise ValueError("A rows must sum to 1")
        pi.setflags(write=False)
        A.setflags(write=False)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "A", A)

    @property
    def mask_value(self) -> int:
        return self.K


@dataclass(frozen=True)
class Dataset:
    """Fully observed sequences with class labels and their provenance seeds."""

    labels: np.ndarray  # (M,)
    tokens: np.ndarray  # (M, N)
    chain_seed: int
    sample_seed: int

    def __post_init__(self):
        if self.labels.shape[0] != self.tokens.shape[0]:
            raise ValueError("labels and tokens disagree on example count")

    def __len__(self) -> int:
        return self.labels.shape[0]


def _sharpened_dirichlet(rng: np.random.Generator, k: int) -> np.ndarray:
    """Dirichlet(0.5) draw sharpened by squaring and renormalizing."""
    d = rng.dirichlet(np.full(k, 0.5))
    d = d * d
    return d / d.sum()


def make_chain(K: int, N: int, C: int, seed: int) -> GroundTruthChain:
    """Deterministic random chain with peaky, class-distinguishable rows."""
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if N < 2:
        raise ValueError(f"N must be >= 2, got {N}")
    if C < 1:
        raise ValueError(f"C must be >= 1, got {C}")
    rng = make_generator(seed, TAG_CHAIN)
    pi = np.stack([_sharpened_dirichlet(rng, K) for _ in range(C)])
    A = np.stack(
        [np.stack([_sharpened_dirichlet(rng, K) for _ in range(K)]) for _ in range(C)]
    )
    return GroundTruthChain(K=K, N=N, C=C, pi=pi, A=A)


def joint_prob(chain: GroundTruthChain, label: int, seq: np.ndarray) -> float:
    """Exact probability of a fully observed sequence under class `label`."""
    seq = np.asarray(seq)
    if seq.shape != (chain.N,):
        raise ValueError(f"sequence has shape {seq.shape}, expected ({chain.N},)")
    if np.any(seq == chain.mask_value):
        raise ValueError("joint_prob requires a fully observed sequence")
    if np.any(seq < 0) or np.any(seq >= chain.K):
        raise ValueError("token out of range")
    p = chain.pi[label, seq[0]]
    for i in range(chain.N - 1):
        p *= chain.A[label, seq[i], seq[i + 1]]
    return float(p)


def _evidence_indicators(chain: GroundTruthChain, tokens: np.ndarray) -> np.ndarray:
    """(B, N, K) indicator of allowed values: one-hot where observed, ones where masked."""
    B, N = tokens.shape
    e = np.zeros((B, N, chain.K))
    masked = tokens == chain.mask_value
    e[masked] = 1.0
    b_idx, n_idx = np.nonzero(~masked)
    e[b_idx, n_idx, tokens[b_idx, n_idx]] = 1.0
    return e


def batch_posteriors(
    chain: GroundTruthChain, tokens: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Forward-backward posterior marginals for a batch of partial sequences.

    Returns (post, loglik) where post[b, i] is the length-K distribution
    p(V_i | observed tokens of b, class labels[b]) and loglik[b] is the log
    evidence probability.  Masked entries in `tokens` use the chain's mask
    value.  At observed positions the posterior is the corresponding one-hot.
    """
    tokens = np.asarray(tokens)
    labels = np.asarray(labels)
    B, N = tokens.shape
    if N != chain.N:
        raise ValueError(f"sequence length {N} does not match chain N={chain.N}")
    if np.any((tokens < 0) | (tokens > chain.K)):
        raise ValueError("token out of range")
    e = _evidence_indicators(chain, tokens)
    A = chain.A[labels]  # (B, K, K)
    fwd = np.empty((B, N, chain.K))
    fwd[:, 0] = chain.pi[labels]
    lognorm = np.zeros(B)
    for i in range(N - 1):
        m = fwd[:, i] * e[:, i]
        z = m.sum(axis=1)
        if np.any(z <= 0.0):
            raise ValueError("evidence has probability zero under the chain")
        lognorm += np.log(z)
        fwd[:, i + 1] = np.einsum("bk,bkl->bl", m / z[:, None], A)
    # Per-step backward normalization cancels in the posterior ratio and does
    # not enter the likelihood (which uses forward normalizers only).
    bwd = np.empty((B, N, chain.K))
    bwd[:, N - 1] = 1.0
    for i in range(N - 2, -1, -1):
        m = e[:, i + 1] * bwd[:, i + 1]
        z = m.sum(axis=1)
        if np.any(z <= 0.0):
            raise ValueError("evidence has probability zero under the chain")
        bwd[:, i] = np.einsum("bkl,bl->bk", A, m / z[:, None])
    post = fwd * e * bwd
    z = post.sum(axis=2)
    if np.any(z <= 0.0):
        raise ValueError("evidence has probability zero under the chain")
    post /= z[:, :, None]
    final = (fwd[:, N - 1] * e[:, N - 1]).sum(axis=1)
    loglik = lognorm + np.log(final)
    return post, loglik


def exact_conditional(
    chain: GroundTruthChain, label: int, partial: np.ndarray, position: int
) -> np.ndarray:
    """p(V_position = v | unmasked tokens, class) for a masked position."""
    partial = np.asarray(partial)
    if partial.shape != (chain.N,):
        raise ValueError(f"sequence has shape {partial.shape}, expected ({chain.N},)")
    if partial[position] != chain.mask_value:
        raise ValueError(f"position {position} is not masked")
    post, _ = batch_posteriors(chain, partial[None, :], np.array([label]))
    return post[0, position]


def sample_dataset(chain: GroundTruthChain, per_class: int, seed: int, chain_seed: int = -1) -> Dataset:
    """Ancestral sampling of `per_class` sequences for every class."""
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    rng = make_generator(seed, TAG_DATASET)
    M = per_class * chain.C
    labels = np.repeat(np.arange(chain.C), per_class)
    tokens = np.empty((M, chain.N), dtype=np.int64)
    for c in range(chain.C):
        rows = slice(c * per_class, (c + 1) * per_class)
        u = rng.random((per_class, chain.N))
        cdf0 = np.cumsum(chain.pi[c])
        tokens[rows, 0] = (cdf0[None, :] < (u[:, 0] * cdf0[-1])[:, None]).sum(axis=1)
        cdfA = np.cumsum(chain.A[c], axis=1)
        for i in range(1, chain.N):
            rowcdf = cdfA[tokens[rows, i - 1]]
            tokens[rows, i] = (rowcdf < (u[:, i] * rowcdf[:, -1])[:, None]).sum(axis=1)
    return Dataset(labels=labels, tokens=tokens, chain_seed=chain_seed, sample_seed=seed)


def enumerate_sequences(N: int, K: int):
    """All K^N full sequences in lexicographic order, one int64 array each."""
    if K**N > ENUMERATION_LIMIT:
        raise ValueError(f"K^N = {K**N} exceeds enumeration limit {ENUMERATION_LIMIT}")
    for combo in itertools.product(range(K), repeat=N):
        yield np.array(combo, dtype=np.int64)


def all_sequences(N: int, K: int) -> np.ndarray:
    """(K^N, N) array of all full sequences in lexicographic order."""
    if K**N > ENUMERATION_LIMIT:
        raise ValueError(f"K^N = {K**N} exceeds enumeration limit {ENUMERATION_LIMIT}")
    grids = np.indices([K] * N).reshape(N, -1).T
    return np.ascontiguousarray(grids, dtype=np.int64)


def encode_sequences(tokens: np.ndarray, K: int) -> np.ndarray:
    """Map full sequences to their lexicographic enumeration index."""
    tokens = np.asarray(tokens)
    N = tokens.shape[-1]
    weights = K ** np.arange(N - 1, -1, -1, dtype=np.int64)
    return tokens @ weights


def true_distribution(chain: GroundTruthChain, mixture: np.ndarray) -> np.ndarray:
    """Class-mixture-marginal probability of every enumerable sequence."""
    seqs = all_sequences(chain.N, chain.K)
    probs = np.zeros(seqs.shape[0])
    for c in range(chain.C):
        p = chain.pi[c, seqs[:, 0]].copy()
        for i in range(chain.N - 1):
            p *= chain.A[c, seqs[:, i], seqs[:, i + 1]]
        probs += mixture[c] * p
    return probs


def chain_to_json(chain: GroundTruthChain, seed: int) -> str:
    obj = {
        "K": chain.K,
        "N": chain.N,
        "C": chain.C,
        "seed": seed,
        "pi": chain.pi.tolist(),
        "A": chain.A.tolist(),
    }
    return json.dumps(obj, sort_keys=True) + "\n"


def chain_from_json(text: str) -> tuple[GroundTruthChain, int]:
    obj = json.loads(text)
    chain = GroundTruthChain(
        K=obj["K"],
        N=obj["N"],
        C=obj["C"],
        pi=np.array(obj["pi"], dtype=float),
        A=np.array(obj["A"], dtype=float),
    )
    return chain, obj["seed"]


def save_sequences(path, labels: np.ndarray, tokens: np.ndarray, meta: dict) -> None:
    """Text format: one JSON meta line, then 'class tok tok ...' lines."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#" + json.dumps(meta, sort_keys=True) + "\n")
        for lab, row in zip(labels, tokens):
            fh.write(str(int(lab)) + " " + " ".join(str(int(v)) for v in row) + "\n")


def load_sequences(path) -> tuple[np.ndarray, np.ndarray, dict]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ValueError("sequence file missing meta line")
        meta = json.loads(first[1:])
        labels = []
        rows = []
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            labels.append(int(parts[0]))
            rows.append([int(v) for v in parts[1:]])
    tokens = np.array(rows, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError("inconsistent sequence lengths in file")
    return np.array(labels, dtype=np.int64), tokens, meta
