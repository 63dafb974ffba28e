"""Generation schedules and training mask-ratio distributions.

A generation schedule holds, per decoding step, the re-masking ratio, the two
temperatures (token sampling / re-masking) and the guidance scale.  A training
strategy is a Beta(alpha, beta) distribution over mask ratios.  This module
also provides the heuristic baseline schedule, the feasibility projection used
by the optimizer, and JSON (de)serialization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln

TAU1_FLOOR = 1e-4

# Tolerance for deciding how many tokens a ratio masks.  r*N is rounded to 12
# decimals before the ceiling so that ratios stored as count/N reproduce the
# intended integer count despite float rounding.
_COUNT_DECIMALS = 12


def mask_count(ratio: float, n: int) -> int:
    """Number of positions left masked by `ratio` on a length-`n` sequence."""
    c = math.ceil(round(ratio * n, _COUNT_DECIMALS))
    return max(0, min(n, c))


@dataclass(frozen=True)
class GenerationSchedule:
    """Per-step decoding hyperparameters; immutable after construction.

    All four vectors have length T.  The final re-masking ratio is zero so
    generation finishes in exactly T steps.  Whether the mask counts decrease
    strictly depends on the sequence length, so that check lives in
    `validate_for_length`, not here.
    """

    T: int
    r: tuple[float, ...]
    tau1: tuple[float, ...]
    tau2: tuple[float, ...]
    s: tuple[float, ...]

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        for name in ("r", "tau1", "tau2", "s"):
            vals = getattr(self, name)
            if len(vals) != self.T:
                raise ValueError(f"{name} has length {len(vals)}, expected T={self.T}")
            if not all(math.isfinite(v) for v in vals):
                raise ValueError(f"{name} contains non-finite entries")
        if any(v < 0.0 or v > 1.0 for v in self.r):
            raise ValueError("r entries must lie in [0, 1]")
        if self.r[-1] != 0.0:
            raise ValueError("final re-masking ratio must be 0")
        if any(v <= 0.0 for v in self.tau1):
            raise ValueError("tau1 entries must be positive")
        if any(v < 0.0 for v in self.tau2):
            raise ValueError("tau2 entries must be non-negative")
        if any(v < 0.0 for v in self.s):
            raise ValueError("s entries must be non-negative")

    def mask_counts(self, n: int) -> list[int]:
        return [mask_count(v, n) for v in self.r]

    def validate_for_length(self, n: int) -> None:
        """Check the strictly-decreasing mask-count invariant for length n."""
        if self.T > n:
            raise ValueError(f"schedule has T={self.T} steps but sequence length is {n}")
        prev = n
        for t, c in enumerate(self.mask_counts(n)):
            if c >= prev:
                raise ValueError(
                    f"mask counts not strictly decreasing at step {t}: {c} >= {prev}"
                )
            prev = c
        if prev != 0:
            raise ValueError(f"final mask count is {prev}, expected 0")


@dataclass(frozen=True)
class TrainingStrategy:
    """Beta(alpha, beta) distribution over training mask ratios."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive and finite, got {self.alpha}")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be positive and finite, got {self.beta}")

    def density(self, ratio: float) -> float:
        return beta_density(ratio, self)

    def sample(self, rng: np.random.Generator) -> float:
        return sample_mask_ratio(self, rng)

    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)


class ArcsineMaskRatio:
    """Baseline mask-ratio law with density 2 / (pi * sqrt(1 - r^2)).

    Used only as the reference training distribution in comparison runs;
    sampled through its inverse CDF r = sin(pi * u / 2).
    """

    def density(self, ratio: float) -> float:
        return arcsine_density(ratio)

    def sample(self, rng: np.random.Generator) -> float:
        return math.sin(0.5 * math.pi * rng.random())

    def mean(self) -> float:
        return 2.0 / math.pi

    def __repr__(self):
        return "ArcsineMaskRatio()"


@dataclass(frozen=True)
class HeuristicParams:
    """Free constants of the baseline schedule.

    `lam` scales the linearly decaying re-masking temperature, `k` is the
    final (maximal) guidance scale.
    """

    lam: float = 4.5
    k: float = 2.0

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError(f"lam must be positive, got {self.lam}")
        if not (self.k >= 0 and math.isfinite(self.k)):
            raise ValueError(f"k must be non-negative, got {self.k}")


def heuristic_values(T: int, params: HeuristicParams) -> dict[str, np.ndarray]:
    """Raw baseline schedule values before projection, for t = 1..T.

    r(t) = cos(pi*t / 2T), tau1(t) = 1, tau2(t) = lam*(T-t+1)/T, s(t) = k*t/T.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    t = np.arange(1, T + 1, dtype=float)
    return {
        "r": np.cos(math.pi * t / (2.0 * T)),
        "tau1": np.ones(T),
        "tau2": params.lam * (T - t + 1.0) / T,
        "s": params.k * t / T,
    }


def heuristic_schedule(T: int, N: int, params: HeuristicParams | None = None) -> GenerationSchedule:
    """Baseline schedule, projected so all schedule invariants hold for length N."""
    if params is None:
        params = HeuristicParams()
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if T > N:
        raise ValueError(f"need T <= N for strictly decreasing mask counts, got T={T}, N={N}")
    vals = heuristic_values(T, params)
    raw = GenerationSchedule(
        T=T,
        r=tuple(np.clip(vals["r"], 0.0, 1.0)[:-1]) + (0.0,),
        tau1=tuple(vals["tau1"]),
        tau2=tuple(vals["tau2"]),
        s=tuple(vals["s"]),
    )
    return project_schedule(raw, N)


def schedule_to_vector(sched: GenerationSchedule) -> np.ndarray:
    """Concatenated [r, tau1, tau2, s] vector of length 4T."""
    return np.array(sched.r + sched.tau1 + sched.tau2 + sched.s, dtype=float)


def schedule_from_vector(vec: np.ndarray, T: int) -> GenerationSchedule:
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (4 * T,):
        raise ValueError(f"expected vector of shape ({4 * T},), got {vec.shape}")
    return GenerationSchedule(
        T=T,
        r=tuple(vec[:T]),
        tau1=tuple(vec[T : 2 * T]),
        tau2=tuple(vec[2 * T : 3 * T]),
        s=tuple(vec[3 * T :]),
    )


def project_vector(vec: np.ndarray, T: int, N: int) -> np.ndarray:
    """Project a raw [r, tau1, tau2, s] vector onto the feasible set.

    Ratios are clipped into [0, 1] with the final entry forced to 0, then the
    mask counts ceil(r*N) are made strictly decreasing from N down to 0 by
    adjusting individual entries minimally (an entry is only touched if its
    count violates the corridor left by its neighbors).  Temperatures and
    guidance scales are clipped to their lower bounds.  Idempotent.
    """
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (4 * T,):
        raise ValueError(f"expected vector of shape ({4 * T},), got {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("cannot project non-finite vector")
    if T > N:
        raise ValueError(f"need T <= N, got T={T}, N={N}")
    out = vec.copy()
    r = np.clip(out[:T], 0.0, 1.0)
    r[T - 1] = 0.0
    prev = N
    for t in range(T):
        lo = T - 1 - t  # room for the remaining strictly-decreasing steps
        hi = prev - 1
        c = mask_count(float(r[t]), N)
        c_fixed = min(max(c, lo), hi)
        if c_fixed != c:
            r[t] = c_fixed / N
        prev = c_fixed
    out[:T] = r
    out[T : 2 * T] = np.maximum(out[T : 2 * T], TAU1_FLOOR)
    out[2 * T : 3 * T] = np.maximum(out[2 * T : 3 * T], 0.0)
    out[3 * T :] = np.maximum(out[3 * T :], 0.0)
    return out


def project_schedule(sched: GenerationSchedule, N: int) -> GenerationSchedule:
    """Schedule-level wrapper around `project_vector`."""
    vec = project_vector(schedule_to_vector(sched), sched.T, N)
    return schedule_from_vector(vec, sched.T)


def beta_density(ratio: float, strat: TrainingStrategy) -> float:
    """Beta(alpha, beta) density at `ratio`; +inf at an endpoint whose exponent is negative."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    a, b = strat.alpha, strat.beta
    if ratio == 0.0:
        if a < 1.0:
            return math.inf
        if a > 1.0:
            return 0.0
        return math.exp(-betaln(a, b))
    if ratio == 1.0:
        if b < 1.0:
            return math.inf
        if b > 1.0:
            return 0.0
        return math.exp(-betaln(a, b))
    logpdf = (a - 1.0) * math.log(ratio) + (b - 1.0) * math.log1p(-ratio) - betaln(a, b)
    return math.exp(logpdf)


def sample_mask_ratio(strat: TrainingStrategy, rng: np.random.Generator) -> float:
    """One Beta(alpha, beta) draw, rejecting exact endpoints."""
    while True:
        x = float(rng.beta(strat.alpha, strat.beta))
        if 0.0 < x < 1.0:
            return x


def arcsine_density(ratio: float) -> float:
    """Density 2 / (pi * sqrt(1 - r^2)) of the baseline mask-ratio law."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"ratio must lie in [0, 1), got {ratio}")
    return 2.0 / (math.pi * math.sqrt(1.0 - ratio * ratio))


def serialize_schedule(sched: GenerationSchedule) -> str:
    obj = {
        "T": sched.T,
        "r": list(sched.r),
        "tau1": list(sched.tau1),
        "tau2": list(sched.tau2),
        "s": list(sched.s),
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def deserialize_schedule(text: str) -> GenerationSchedule:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed schedule JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ValueError("schedule JSON must be an object")
    missing = {"T", "r", "tau1", "tau2", "s"} - obj.keys()
    if missing:
        raise ValueError(f"schedule JSON missing keys: {sorted(missing)}")
    T = obj["T"]
    if not isinstance(T, int) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    vecs = {}
    for name in ("r", "tau1", "tau2", "s"):
        vals = obj[name]
        if not isinstance(vals, list) or len(vals) != T:
            raise ValueError(f"{name} must be a list of length T={T}")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
            raise ValueError(f"{name} must contain only numbers")
        vecs[name] = tuple(float(v) for v in vals)
    return GenerationSchedule(T=T, r=vecs["r"], tau1=vecs["tau1"], tau2=vecs["tau2"], s=vecs["s"])


def serialize_strategy(strat: TrainingStrategy) -> str:
    return json.dumps({"alpha": strat.alpha, "beta": strat.beta}, sort_keys=True) + "\n"


def deserialize_strategy(text: str) -> TrainingStrategy:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed strategy JSON: {exc}") from exc
    if not isinstance(obj, dict) or {"alpha", "beta"} - obj.keys():
        raise ValueError("strategy JSON must be an object with keys alpha, beta")
    return TrainingStrategy(alpha=float(obj["alpha"]), beta=float(obj["beta"]))
