"""T-step parallel decoding with confidence-based re-masking.

Every step samples all masked positions from the (optionally guided,
temperature-scaled) predictor, scores the fresh draws by the log-probability
they were sampled with, keeps the required number of them (Gumbel-top-k over
confidence/tau2, or a fixed order for exactness tests), and re-masks the
rest.  Previously decoded positions are never touched again.

Randomness contract: one decode step consumes exactly 2N uniforms from its
sample's stream (N for token sampling, N for Gumbel noise), in that order,
regardless of the mask pattern.  This keeps the sequential single-sample
path and the vectorized batch path bit-identical and makes results
independent of any parallel scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .strategy import GenerationSchedule, mask_count

_GUMBEL_U_LO = 1e-300
_GUMBEL_U_HI = 1.0 - 1e-16


@dataclass(frozen=True)
class SelectionPolicy:
    """How freshly decoded positions are chosen for keeping.

    "confidence" keeps the Gumbel-top-k by confidence/tau2; "fixed-order"
    keeps candidates in the stored position order and exists to make
    chain-rule exactness testable.
    """

    kind: str
    order: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("confidence", "fixed-order"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "fixed-order":
            if self.order is None:
                raise ValueError("fixed-order policy needs a position order")
            if sorted(self.order) != list(range(len(self.order))):
                raise ValueError("order must be a permutation of 0..N-1")
        elif self.order is not None:
            raise ValueError("confidence policy takes no order")


def confidence_policy() -> SelectionPolicy:
    return SelectionPolicy(kind="confidence")


def fixed_order_policy(order) -> SelectionPolicy:
    return SelectionPolicy(kind="fixed-order", order=tuple(int(i) for i in order))


@dataclass(frozen=True)
class DecodeState:
    """Canvas after `t` completed steps plus that step's fresh decode record."""

    t: int
    tokens: np.ndarray
    decoded: np.ndarray  # positions committed in step t
    confidences: np.ndarray  # their log-probabilities


def apply_guidance(cond, uncond, scale: float):
    """Combine conditional and unconditional logits: uncond + s*(cond - uncond).

    s=1 returns the conditional logits object unchanged (exact identity, so
    callers may skip the unconditional pass entirely), s=0 the unconditional.
    """
    cond_arr = cond.logits if hasattr(cond, "logits") else np.asarray(cond)
    uncond_arr = uncond.logits if hasattr(uncond, "logits") else np.asarray(uncond)
    if cond_arr.shape != uncond_arr.shape:
        raise ValueError(f"shape mismatch: {cond_arr.shape} vs {uncond_arr.shape}")
    if scale == 1.0:
        return cond
    if scale == 0.0:
        return uncond
    out = uncond_arr + scale * (cond_arr - uncond_arr)
    return type(cond)(logits=out) if hasattr(cond, "logits") else out


def _categorical_rows(probs: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample one token per row of `probs` using uniforms `u`; returns (tokens, probs)."""
    c = np.cumsum(probs, axis=1)
    scaled = u * c[:, -1]
    tok = (c <= scaled[:, None]).sum(axis=1)
    np.minimum(tok, probs.shape[1] - 1, out=tok)
    p = probs[np.arange(probs.shape[0]), tok]
    if np.any(p <= 0.0):
        raise ValueError("sampled a zero-probability token")
    return tok, p


def _softmax_rows(logits: np.ndarray, tau: float) -> np.ndarray:
    z = logits / tau
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def sample_masked(logits_row: np.ndarray, tau1: float, rng: np.random.Generator):
    """Draw one token from softmax(logits / tau1); returns (token, its probability)."""
    logits_row = np.asarray(logits_row, dtype=float)
    if not np.all(np.isfinite(logits_row)):
        raise ValueError("logits must be finite")
    if not tau1 > 0:
        raise ValueError(f"tau1 must be positive, got {tau1}")
    probs = _softmax_rows(logits_row[None, :], tau1)
    tok, p = _categorical_rows(probs, np.array([rng.random()]))
    return int(tok[0]), float(p[0])


def confidences(probs: np.ndarray) -> np.ndarray:
    """Log-probabilities of this step's freshly decoded tokens.

    Previously decoded positions never enter the candidate pool, which
    realizes their "infinitely confident" treatment without non-finite
    arithmetic.
    """
    probs = np.asarray(probs, dtype=float)
    if np.any(probs <= 0.0):
        raise ValueError("probabilities must be positive")
    if np.any(probs > 1.0):
        raise ValueError("probabilities must be <= 1")
    return np.log(probs)


def _selection_keys(
    conf: np.ndarray,
    positions: np.ndarray,
    tau2: float,
    policy: SelectionPolicy,
    gumbel_u: np.ndarray,
) -> np.ndarray:
    """Higher key = kept earlier. Shapes are (B, n_candidates)."""
    if policy.kind == "fixed-order":
        rank = np.empty(len(policy.order), dtype=np.int64)
        rank[np.array(policy.order)] = np.arange(len(policy.order))
        return -rank[positions].astype(float)
    if tau2 == 0.0:
        return conf
    u = np.clip(gumbel_u, _GUMBEL_U_LO, _GUMBEL_U_HI)
    gumbel = -np.log(-np.log(u))
    return conf / tau2 + gumbel


def _top_k_stable(keys: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k largest keys per row; ties break to lower index."""
    order = np.argsort(-keys, axis=1, kind="stable")
    return order[:, :k]


def select_kept(
    conf: np.ndarray,
    k: int,
    tau2: float,
    policy: SelectionPolicy,
    rng: np.random.Generator,
    candidates: np.ndarray | None = None,
) -> np.ndarray:
    """Candidate positions to keep decoded this step (sorted ascending).

    With the confidence policy this is Gumbel-top-k over conf/tau2, i.e. a
    without-replacement draw proportional to softmax(conf/tau2); tau2=0
    degenerates to the deterministic top-k.  The fixed-order policy keeps the
    first k candidates in the stored position order.
    """
    conf = np.asarray(conf, dtype=float)
    n = conf.shape[0]
    if candidates is None:
        candidates = np.arange(n, dtype=np.int64)
    else:
        candidates = np.asarray(candidates, dtype=np.int64)
    if k > n:
        raise ValueError(f"cannot keep {k} of {n} candidates")
    if tau2 < 0:
        raise ValueError(f"tau2 must be >= 0, got {tau2}")
    u = rng.random(n)
    keys = _selection_keys(conf[None, :], candidates[None, :], tau2, policy, u[None, :])
    kept_cols = _top_k_stable(keys, k)[0]
    return np.sort(candidates[kept_cols])


def _decode_step_batch(
    tokens: np.ndarray,
    classes: np.ndarray,
    predictor,
    sched: GenerationSchedule,
    t: int,
    policy: SelectionPolicy,
    u_tok: np.ndarray,
    u_gum: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Advance a batch of canvases through step t (0-based) in place.

    Returns (decoded positions, their confidences) as (B, k) arrays.
    """
    B, N = tokens.shape
    mask_value = predictor.K
    masked = tokens == mask_value
    m_prev = N if t == 0 else mask_count(sched.r[t - 1], N)
    counts = masked.sum(axis=1)
    if np.any(counts != m_prev):
        raise ValueError(f"state inconsistent with schedule at step {t}")
    m_next = mask_count(sched.r[t], N)
    k_keep = m_prev - m_next

    row_b, row_i = np.nonzero(masked)  # row-major: each sample's rows contiguous
    scale = sched.s[t]
    cond = predictor.row_logits(tokens, row_b, row_i, classes[row_b])
    if scale != 1.0:
        null_cls = np.full(row_b.shape[0], predictor.C, dtype=np.int64)
        uncond = predictor.row_logits(tokens, row_b, row_i, null_cls)
        logits = apply_guidance(cond, uncond, scale)
    else:
        logits = cond

    probs = _softmax_rows(logits, sched.tau1[t])
    sampled, p_chosen = _categorical_rows(probs, u_tok[row_b, row_i])
    conf = confidences(p_chosen)

    cand_pos = row_i.reshape(B, m_prev)
    keys = _selection_keys(
        conf.reshape(B, m_prev),
        cand_pos,
        sched.tau2[t],
        policy,
        u_gum[np.arange(B)[:, None], cand_pos],
    )
    kept_cols = _top_k_stable(keys, k_keep)
    rows = np.repeat(np.arange(B), k_keep)
    cols = kept_cols.ravel()
    kept_pos = cand_pos[rows, cols]
    tokens[rows, kept_pos] = sampled.reshape(B, m_prev)[rows, cols]
    kept_conf = conf.reshape(B, m_prev)[rows, cols]
    order = np.argsort(kept_pos.reshape(B, k_keep), axis=1, kind="stable")
    kept_pos = np.take_along_axis(kept_pos.reshape(B, k_keep), order, axis=1)
    kept_conf = np.take_along_axis(kept_conf.reshape(B, k_keep), order, axis=1)
    return kept_pos, kept_conf


def initial_state(N: int, mask_value: int) -> DecodeState:
    return DecodeState(
        t=0,
        tokens=np.full(N, mask_value, dtype=np.int64),
        decoded=np.empty(0, dtype=np.int64),
        confidences=np.empty(0),
    )


def decode_step(
    state: DecodeState,
    predictor,
    sched: GenerationSchedule,
    t: int,
    label: int,
    policy: SelectionPolicy,
    rng: np.random.Generator,
) -> DecodeState:
    """One decoding step for a single sample; step index t is 1-based here."""
    tokens = state.tokens.copy()
    u_tok = rng.random(tokens.shape[0])[None, :]
    u_gum = rng.random(tokens.shape[0])[None, :]
    kept_pos, kept_conf = _decode_step_batch(
        tokens[None, :],
        np.array([label], dtype=np.int64),
        predictor,
        sched,
        t - 1,
        policy,
        u_tok,
        u_gum,
    )
    return DecodeState(t=t, tokens=tokens, decoded=kept_pos[0], confidences=kept_conf[0])


def generate(
    predictor,
    sched: GenerationSchedule,
    label: int,
    policy: SelectionPolicy,
    rng: np.random.Generator,
) -> np.ndarray:
    """Decode one full sequence from the all-mask canvas in T steps."""
    _validate(predictor, sched, policy)
    state = initial_state(predictor.N, predictor.K)
    for t in range(1, sched.T + 1):
        state = decode_step(state, predictor, sched, t, label, policy, rng)
    if np.any(state.tokens == predictor.K):
        raise RuntimeError("masks remain after the final step")
    return state.tokens


def generate_batch(
    predictor,
    sched: GenerationSchedule,
    classes: np.ndarray,
    policy: SelectionPolicy,
    utables: np.ndarray,
) -> np.ndarray:
    """Vectorized generation for B samples with precomputed uniform tables.

    utables has shape (B, T, 2, N): per sample and step, N uniforms for token
    sampling and N for Gumbel noise, exactly as the sequential path consumes
    them.
    """
    _validate(predictor, sched, policy)
    classes = np.asarray(classes, dtype=np.int64)
    B = classes.shape[0]
    N = predictor.N
    if utables.shape != (B, sched.T, 2, N):
        raise ValueError(f"utables has shape {utables.shape}, expected {(B, sched.T, 2, N)}")
    tokens = np.full((B, N), predictor.K, dtype=np.int64)
    for t in range(sched.T):
        _decode_step_batch(
            tokens, classes, predictor, sched, t, policy, utables[:, t, 0], utables[:, t, 1]
        )
    if np.any(tokens == predictor.K):
        raise RuntimeError("masks remain after the final step")
    return tokens


def _validate(predictor, sched: GenerationSchedule, policy: SelectionPolicy) -> None:
    sched.validate_for_length(predictor.N)
    if policy.kind == "fixed-order" and len(policy.order) != predictor.N:
        raise ValueError(
            f"fixed order has length {len(policy.order)}, expected {predictor.N}"
        )
