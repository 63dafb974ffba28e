"""Quality functional F: exact total variation and a token-level Fréchet distance.

Both metrics are driven by the same frozen evaluation harness: one
`Evaluator` fixes the per-sample random streams (common random numbers), the
class assignment, and the reference statistics, so F is a deterministic pure
function of (predictor parameters, schedule, policy).  That determinism is
what makes finite differences over schedules meaningful.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .sampler import SelectionPolicy, confidence_policy, generate_batch
from .strategy import GenerationSchedule
from .streams import TAG_REFERENCE, derive_seed, make_generator, sample_stream
from .toyworld import GroundTruthChain, encode_sequences, true_distribution

METRIC_KINDS = ("exact-tv", "token-frechet")
_EIG_TOL = -1e-8


@dataclass(frozen=True)
class EvalSpec:
    """Frozen description of one F instantiation."""

    metric: str
    samples: int
    base_seed: int
    class_mixture: tuple[float, ...] | None = None
    reference_size: int = 10_000

    def __post_init__(self):
        if self.metric not in METRIC_KINDS:
            raise ValueError(f"unknown metric {self.metric!r}; expected one of {METRIC_KINDS}")
        if self.samples < 100:
            raise ValueError(f"samples must be >= 100, got {self.samples}")
        if self.metric == "token-frechet" and self.reference_size < 2:
            raise ValueError("token-frechet needs a reference set of at least 2 sequences")
        if self.class_mixture is not None:
            mix = np.asarray(self.class_mixture, dtype=float)
            if np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
                raise ValueError("class_mixture must be a probability vector")


@dataclass(frozen=True)
class FeatureStats:
    """Mean and covariance of per-sequence token statistics."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.sigma.shape != (self.mu.shape[0], self.mu.shape[0]):
            raise ValueError("sigma shape does not match mu")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-10):
            raise ValueError("sigma must be symmetric")


def sequence_features(tokens: np.ndarray, K: int) -> np.ndarray:
    """Per-sequence feature vector: K unigram counts then K^2 adjacent-bigram counts."""
    tokens = np.asarray(tokens)
    B, N = tokens.shape
    rows = np.arange(B)
    uni = np.zeros((B, K))
    np.add.at(uni, (rows[:, None], tokens), 1.0)
    bi = np.zeros((B, K * K))
    pair = tokens[:, :-1] * K + tokens[:, 1:]
    np.add.at(bi, (rows[:, None], pair), 1.0)
    return np.concatenate([uni, bi], axis=1)


def fit_stats(tokens: np.ndarray, K: int) -> FeatureStats:
    """Sample mean and unbiased covariance of the feature vectors."""
    tokens = np.asarray(tokens)
    if tokens.shape[0] < 2:
        raise ValueError("need at least 2 sequences to fit statistics")
    feats = sequence_features(tokens, K)
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / (feats.shape[0] - 1)
    sigma = 0.5 * (sigma + sigma.T)
    return FeatureStats(mu=mu, sigma=sigma)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() < _EIG_TOL * max(1.0, abs(vals.max())):
        raise ValueError(f"matrix is not PSD within tolerance: min eigenvalue {vals.min()}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T

def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """Squared 2-Wasserstein distance between Gaussians fit to feature stats.

    ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2), with matrix
    square roots taken by symmetric eigendecomposition; tiny negative
    eigenvalues from rounding are clipped at zero.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    diff = a.mu - b.mu
    sqrt_a = _psd_sqrt(a.sigma)
    inner = sqrt_a @ b.sigma @ sqrt_a
    inner = 0.5 * (inner + inner.T)
    cross = _psd_sqrt(inner)
    val = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def exact_tv(tokens: np.ndarray, chain: GroundTruthChain, mixture: np.ndarray) -> float:
    """Total variation between the empirical multiset and the exact mixture joint."""
    truth = true_distribution(chain, mixture)
    idx = encode_sequences(np.asarray(tokens), chain.K)
    counts = np.bincount(idx, minlength=truth.shape[0]).astype(float)
    emp = counts / counts.sum()
    return float(0.5 * np.abs(emp - truth).sum())


def sample_from_chain(chain: GroundTruthChain, classes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Ancestral sampling of one sequence per entry of `classes`."""
    B = classes.shape[0]
    tokens = np.empty((B, chain.N), dtype=np.int64)
    u = rng.random((B, chain.N))
    cdf0 = np.cumsum(chain.pi, axis=1)[classes]
    tokens[:, 0] = (cdf0 < (u[:, 0] * cdf0[:, -1])[:, None]).sum(axis=1)
    cdfA = np.cumsum(chain.A, axis=2)
    for i in range(1, chain.N):
        rowcdf = cdfA[classes, tokens[:, i - 1]]
        tokens[:, i] = (rowcdf < (u[:, i] * rowcdf[:, -1])[:, None]).sum(axis=1)
    return tokens


def build_reference_stats(chain: GroundTruthChain, spec: EvalSpec, mixture: np.ndarray) -> tuple[FeatureStats, int]:
    """Reference feature statistics for token-frechet, drawn once from the chain.

    The reference seed is derived from the evaluation base seed and returned
    so manifests can record it.
    """
    ref_seed = derive_seed(spec.base_seed, TAG_REFERENCE)
    rng = make_generator(ref_seed)
    cdf = np.cumsum(mixture)
    classes = (cdf[None, :] <= rng.random(spec.reference_size)[:, None] * cdf[-1]).sum(axis=1)
    np.clip(classes, 0, chain.C - 1, out=classes)
    tokens = sample_from_chain(chain, classes, rng)
    return fit_stats(tokens, chain.K), ref_seed


class Evaluator:
    """Frozen F evaluation harness with common random numbers.

    Per-sample class draws and decode uniforms come from streams keyed by
    (base seed, sample index) and are materialized once, so every evaluation
    of any schedule reuses exactly the same randomness.  `call_log` records a
    seed digest per evaluation for instrumentation.
    """

    def __init__(
        self,
        chain: GroundTruthChain,
        spec: EvalSpec,
        T: int,
        policy: SelectionPolicy | None = None,
    ):
        self.chain = chain
        self.spec = spec
        self.T = T
        self.policy = policy if policy is not None else confidence_policy()
        if spec.class_mixture is None:
            self.mixture = np.full(chain.C, 1.0 / chain.C)
        else:
            mix = np.asarray(spec.class_mixture, dtype=float)
            if mix.shape != (chain.C,):
                raise ValueError(f"class mixture has length {mix.shape[0]}, expected {chain.C}")
            self.mixture = mix
        n = spec.samples
        self.classes = np.empty(n, dtype=np.int64)
        self.utables = np.empty((n, T, 2, chain.N))
        cdf = np.cumsum(self.mixture)
        for j in range(n):
            g = sample_stream(spec.base_seed, j)
            u0 = g.random()
            c = int((cdf <= u0 * cdf[-1]).sum())
            self.classes[j] = min(c, chain.C - 1)
            self.utables[j] = g.random((T, 2, chain.N))
        self.truth = None
        self.reference_stats = None
        if spec.metric == "exact-tv":
            self.truth = true_distribution(chain, self.mixture)
            self.reference_seed = None
        else:
            self.reference_stats, self.reference_seed = build_reference_stats(chain, spec, self.mixture)
        self.call_log: list[tuple] = []

    def seed_digest(self) -> tuple:
        return (
            self.spec.base_seed,
            self.spec.samples,
            float(self.utables.flat[0]),
            float(self.utables.flat[-1]),
        )

    def generate_samples(self, predictor, sched: GenerationSchedule) -> np.ndarray:
        if sched.T != self.T:
            raise ValueError(f"schedule has T={sched.T}, evaluator was built for T={self.T}")
        return generate_batch(predictor, sched, self.classes, self.policy, self.utables)

    def evaluate(self, predictor, sched: GenerationSchedule) -> float:
        tokens = self.generate_samples(predictor, sched)
        self.call_log.append(self.seed_digest())
        if self.spec.metric == "exact-tv":
            idx = encode_sequences(tokens, self.chain.K)
            counts = np.bincount(idx, minlength=self.truth.shape[0]).astype(float)
            emp = counts / counts.sum()
            return float(0.5 * np.abs(emp - self.truth).sum())
        return frechet_distance(fit_stats(tokens, self.chain.K), self.reference_stats)


def evaluate_F(
    predictor,
    sched: GenerationSchedule,
    chain: GroundTruthChain,
    spec: EvalSpec,
    policy: SelectionPolicy | None = None,
) -> float:
    """One-shot F evaluation (lower is better); builds a fresh harness."""
    return Evaluator(chain, spec, sched.T, policy).evaluate(predictor, sched)


def append_metric_row(path, run_id: str, metric: str, value: float, samples: int, seed: int) -> None:
    """Append one metric report row, writing the header on first use."""
    new = not os.path.exists(path)
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["run_id", "metric", "F", "samples", "seed"])
        writer.writerow([run_id, metric, repr(float(value)), samples, seed])
