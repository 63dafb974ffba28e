"""Token predictors: the exact chain-backed oracle and a trainable model.

The trainable model is a windowed two-layer tanh perceptron over token,
class and position embeddings, with hand-derived gradients so no autodiff
dependency is needed.  Both predictors expose the same row-logits interface
consumed by the sampler: given a batch of partial sequences and a set of
(sample, position, class) rows, return one unnormalized log-distribution
over the K codebook entries per row.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .streams import TAG_MODEL_INIT, TAG_TRAIN, make_generator
from .toyworld import Dataset, GroundTruthChain, batch_posteriors

_LOG_FLOOR = 1e-300  # keeps oracle logits finite at zero-probability tokens


@dataclass(frozen=True)
class PredictorOutput:
    """Per-position unnormalized log-probabilities, shape (N, K)."""

    logits: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 1
    lr: float = 0.05
    null_prob: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.null_prob <= 1.0:
            raise ValueError(f"null_prob must lie in [0, 1], got {self.null_prob}")


class TrainableModel:
    """Windowed MLP predicting each position's token from its neighborhood.

    Parameters: token embeddings (K+1 rows, row K is MASK), class embeddings
    (C+1 rows, row C is the null class used for guidance), positional
    embeddings, and a tanh hidden layer.  Position i sees exactly the tokens
    within `w` of i, its own position embedding, and the class embedding.
    """

    PARAM_NAMES = ("tok_emb", "cls_emb", "pos_emb", "W1", "b1", "W2", "b2")

    def __init__(self, K, N, C, D, H, w, params):
        if D < 1 or H < 1:
            raise ValueError("D and H must be >= 1")
        if w < 0:
            raise ValueError("window radius must be >= 0")
        self.K, self.N, self.C, self.D, self.H, self.w = K, N, C, D, H, w
        self.S = 2 * w + 1
        self.in_dim = (self.S + 2) * D
        self.params = params
        for name in self.PARAM_NAMES:
            if name not in params:
                raise ValueError(f"missing parameter {name}")
            if not np.all(np.isfinite(params[name])):
                raise ValueError(f"parameter {name} contains non-finite values")
        expected = self._shapes()
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name} has shape {params[name].shape}, expected {shape}")

    def _shapes(self):
        return {
            "tok_emb": (self.K + 1, self.D),
            "cls_emb": (self.C + 1, self.D),
            "pos_emb": (self.N, self.D),
            "W1": (self.in_dim, self.H),
            "b1": (self.H,),
            "W2": (self.H, self.K),
            "b2": (self.K,),
        }

    @property
    def arch(self) -> dict:
        return {"K": self.K, "N": self.N, "C": self.C, "D": self.D, "H": self.H, "w": self.w}

    def copy(self) -> "TrainableModel":
        return TrainableModel(
            self.K, self.N, self.C, self.D, self.H, self.w,
            {k: v.copy() for k, v in self.params.items()},
        )

    # -- training-path forward (keeps activations for backprop) --

    def _input_matrix(self, tokens: np.ndarray, label: int) -> np.ndarray:
        """(N, in_dim) input rows: window embeddings | class | position."""
        p = self.params
        win = window_matrix(tokens[None, :], self.w, pad_value=self.K + 1)[0]
        tok_ext = np.vstack([p["tok_emb"], np.zeros((1, self.D))])
        x = np.empty((self.N, self.in_dim))
        x[:, : self.S * self.D] = tok_ext[win].reshape(self.N, self.S * self.D)
        x[:, self.S * self.D : (self.S + 1) * self.D] = p["cls_emb"][label]
        x[:, (self.S + 1) * self.D :] = p["pos_emb"]
        return x

    def forward_train(self, tokens: np.ndarray, label: int):
        """Returns (x, h, logits) with shapes (N,in_dim), (N,H), (N,K)."""
        p = self.params
        x = self._input_matrix(tokens, label)
        h = np.tanh(x @ p["W1"] + p["b1"])
        logits = h @ p["W2"] + p["b2"]
        return x, h, logits


def window_matrix(tokens: np.ndarray, w: int, pad_value: int) -> np.ndarray:
    """(B, N, 2w+1) token values in each position's window, padded out of range."""
    B, N = tokens.shape
    padded = np.full((B, N + 2 * w), pad_value, dtype=np.int64)
    padded[:, w : w + N] = tokens
    S = 2 * w + 1
    out = np.empty((B, N, S), dtype=np.int64)
    for o in range(S):
        out[:, :, o] = padded[:, o : o + N]
    return out


def init_model(K, N, C, D=16, H=64, w=2, seed=0) -> TrainableModel:
    """Deterministic random initialization, scaled to keep tanh unsaturated."""
    rng = make_generator(seed, TAG_MODEL_INIT)
    S = 2 * w + 1
    in_dim = (S + 2) * D
    params = {
        "tok_emb": rng.normal(0.0, 0.5, (K + 1, D)),
        "cls_emb": rng.normal(0.0, 0.5, (C + 1, D)),
        "pos_emb": rng.normal(0.0, 0.5, (N, D)),
        "W1": rng.normal(0.0, 1.0 / math.sqrt(in_dim), (in_dim, H)),
        "b1": np.zeros(H),
        "W2": rng.normal(0.0, 1.0 / math.sqrt(H), (H, K)),
        "b2": np.zeros(K),
    }
    return TrainableModel(K, N, C, D, H, w, params)


def mask_for_training(seq: np.ndarray, ratio: float, rng: np.random.Generator, mask_value: int):
    """Mask max(1, ceil(ratio * N)) positions chosen uniformly without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    n = seq.shape[0]
    n_mask = max(1, math.ceil(round(ratio * n, 12)))
    idx = rng.permutation(n)[:n_mask]
    masked = seq.copy()
    masked[idx] = mask_value
    return masked, np.sort(idx)


def loss_and_grad(model: TrainableModel, masked_seq, mask_idx, targets, label):
    """Mean cross-entropy over masked positions and its gradient per parameter."""
    mask_idx = np.asarray(mask_idx)
    targets = np.asarray(targets)
    if mask_idx.size == 0:
        raise ValueError("mask set must be nonempty")
    p = model.params
    x, h, logits = model.forward_train(np.asarray(masked_seq), label)
    xm, hm, lm = x[mask_idx], h[mask_idx], logits[mask_idx]
    n_m = mask_idx.size

    shifted = lm - lm.max(axis=1, keepdims=True)
    expl = np.exp(shifted)
    softmax = expl / expl.sum(axis=1, keepdims=True)
    logZ = np.log(expl.sum(axis=1)) + lm.max(axis=1)
    loss = float(np.mean(logZ - lm[np.arange(n_m), targets]))

    dl = softmax.copy()
    dl[np.arange(n_m), targets] -= 1.0
    dl /= n_m

    grads = {name: np.zeros_like(p[name]) for name in model.PARAM_NAMES}
    grads["W2"] = hm.T @ dl
    grads["b2"] = dl.sum(axis=0)
    dh = dl @ p["W2"].T
    dpre = dh * (1.0 - hm * hm)
    grads["W1"] = xm.T @ dpre
    grads["b1"] = dpre.sum(axis=0)
    dx = dpre @ p["W1"].T

    S, D = model.S, model.D
    win = window_matrix(np.asarray(masked_seq)[None, :], model.w, model.K + 1)[0][mask_idx]
    tok_grad_ext = np.zeros((model.K + 2, D))
    for o in range(S):
        np.add.at(tok_grad_ext, win[:, o], dx[:, o * D : (o + 1) * D])
    grads["tok_emb"] = tok_grad_ext[: model.K + 1]
    grads["cls_emb"][label] = dx[:, S * D : (S + 1) * D].sum(axis=0)
    np.add.at(grads["pos_emb"], mask_idx, dx[:, (S + 1) * D :])
    return loss, grads


def train(
    model: TrainableModel,
    dataset: Dataset,
    mask_dist,
    cfg: TrainConfig,
) -> tuple[TrainableModel, list[float]]:
    """Masked-token-modeling SGD; returns the trained model and per-step losses.

    Each step draws `batch_size` examples; for each one, a mask ratio from
    `mask_dist`, a uniform mask of max(1, ceil(r*N)) positions, and with
    probability `null_prob` the class label is replaced by the null class so
    the model also learns unconditional predictions for guidance.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be nonempty")
    model = model.copy()
    p = model.params
    rng = make_generator(cfg.seed, TAG_TRAIN)
    losses: list[float] = []
    for _ in range(cfg.steps):
        batch_grads = None
        batch_loss = 0.0
        for _ in range(cfg.batch_size):
            idx = int(rng.integers(len(dataset)))
            seq = dataset.tokens[idx]
            label = int(dataset.labels[idx])
            ratio = mask_dist.sample(rng)
            masked, mask_idx = mask_for_training(seq, ratio, rng, model.K)
            if rng.random() < cfg.null_prob:
                label = model.C
            loss, grads = loss_and_grad(model, masked, mask_idx, seq[mask_idx], label)
            batch_loss += loss
            if batch_grads is None:
                batch_grads = grads
            else:
                for name in grads:
                    batch_grads[name] += grads[name]
        for name in model.PARAM_NAMES:
            p[name] -= cfg.lr / cfg.batch_size * batch_grads[name]
        losses.append(batch_loss / cfg.batch_size)
    return model, losses


class ModelPredictor:
    """Inference-side view of a trained model.

    Precomputes the first-layer projection of every (offset, token value)
    pair and every (class, position) pair, so a row's hidden pre-activation
    is a sum of S+1 table lookups.  Identical rows across the batch are
    evaluated once (windows repeat heavily on mostly-masked canvases).
    """

    def __init__(self, model: TrainableModel):
        self.model = model
        self.K, self.N, self.C, self.w = model.K, model.N, model.C, model.w
        self.S = model.S
        p = model.params
        D, H = model.D, model.H
        tok_ext = np.vstack([p["tok_emb"], np.zeros((1, D))])  # value K+1 = padding
        self._proj = np.empty((self.S, self.K + 2, H))
        for o in range(self.S):
            block = p["W1"][o * D : (o + 1) * D]
            self._proj[o] = tok_ext @ block
        cls_part = p["cls_emb"] @ p["W1"][self.S * D : (self.S + 1) * D]  # (C+1, H)
        pos_part = p["pos_emb"] @ p["W1"][(self.S + 1) * D :]  # (N, H)
        self._clspos = (cls_part[:, None, :] + pos_part[None, :, :] + p["b1"]).reshape(-1, H)
        self._W2 = np.ascontiguousarray(p["W2"])
        self._b2 = np.ascontiguousarray(p["b2"])
        n_keys = float(self.K + 2) ** self.S * (self.C + 1) * self.N
        if n_keys >= 2**62:
            raise ValueError("window key space too large for int64 dedup keys")

    def row_logits(self, tokens, row_b, row_i, row_class) -> np.ndarray:
        """Logits for selected (sample, position) rows under per-row classes."""
        win = window_matrix(tokens, self.w, pad_value=self.K + 1)
        rows_win = win[row_b, row_i]  # (M, S)
        keys = rows_win[:, 0].astype(np.int64)
        V = self.K + 2
        for o in range(1, self.S):
            keys = keys * V + rows_win[:, o]
        cp_idx = row_class.astype(np.int64) * self.N + row_i
        keys = keys * ((self.C + 1) * self.N) + cp_idx
        first, inverse = kernels.dedup_rows(np.ascontiguousarray(keys))
        uniq_logits = kernels.rows_forward(
            self._proj,
            self._clspos,
            self._W2,
            self._b2,
            np.ascontiguousarray(rows_win[first]),
            np.ascontiguousarray(cp_idx[first]),
        )
        return uniq_logits[inverse]

    def predict(self, partial: np.ndarray, label: int) -> PredictorOutput:
        """Full (N, K) logits for one partial sequence; class C is the null class."""
        partial = np.asarray(partial)
        if np.any((partial < 0) | (partial > self.K)):
            raise ValueError("token out of range")
        if not 0 <= label <= self.C:
            raise ValueError(f"class must lie in [0, {self.C}], got {label}")
        rows = np.arange(self.N, dtype=np.int64)
        logits = self.row_logits(
            partial[None, :].astype(np.int64),
            np.zeros(self.N, dtype=np.int64),
            rows,
            np.full(self.N, label, dtype=np.int64),
        )
        return PredictorOutput(logits=logits)


class OraclePredictor:
    """Exact posterior-marginal predictor backed by the ground-truth chain.

    For a real class the logits at position i are log p(V_i | evidence,
    class); for the null class the class is marginalized under `mixture`
    (uniform by default), weighted by each class's evidence likelihood.
    """

    def __init__(self, chain: GroundTruthChain, mixture: np.ndarray | None = None):
        self.chain = chain
        self.K, self.N, self.C = chain.K, chain.N, chain.C
        if mixture is None:
            mixture = np.full(chain.C, 1.0 / chain.C)
        mixture = np.asarray(mixture, dtype=float)
        if mixture.shape != (chain.C,) or abs(mixture.sum() - 1.0) > 1e-9 or np.any(mixture < 0):
            raise ValueError("mixture must be a length-C probability vector")
        self.mixture = mixture

    def _posteriors_for(self, tokens: np.ndarray, label: int) -> np.ndarray:
        if label < self.C:
            post, _ = batch_posteriors(self.chain, tokens, np.full(tokens.shape[0], label))
            return post
        posts = []
        logliks = []
        for c in range(self.C):
            post_c, ll_c = batch_posteriors(self.chain, tokens, np.full(tokens.shape[0], c))
            posts.append(post_c)
            logliks.append(ll_c + math.log(self.mixture[c]) if self.mixture[c] > 0 else ll_c - math.inf)
        logw = np.stack(logliks, axis=1)  # (B, C)
        logw -= logw.max(axis=1, keepdims=True)
        wgt = np.exp(logw)
        wgt /= wgt.sum(axis=1, keepdims=True)
        stacked = np.stack(posts, axis=1)  # (B, C, N, K)
        return np.einsum("bc,bcnk->bnk", wgt, stacked)

    def row_logits(self, tokens, row_b, row_i, row_class) -> np.ndarray:
        tokens = np.asarray(tokens)
        out = np.empty((row_b.shape[0], self.K))
        for label in np.unique(row_class):
            sel = row_class == label
            b_sel = row_b[sel]
            samples, local = np.unique(b_sel, return_inverse=True)
            post = self._posteriors_for(tokens[samples], int(label))
            out[sel] = np.log(np.maximum(post[local, row_i[sel]], _LOG_FLOOR))
        return out

    def predict(self, partial: np.ndarray, label: int) -> PredictorOutput:
        partial = np.asarray(partial)
        if not 0 <= label <= self.C:
            raise ValueError(f"class must lie in [0, {self.C}], got {label}")
        rows = np.arange(self.N, dtype=np.int64)
        logits = self.row_logits(
            partial[None, :].astype(np.int64),
            np.zeros(self.N, dtype=np.int64),
            rows,
            np.full(self.N, label, dtype=np.int64),
        )
        return PredictorOutput(logits=logits)


def checkpoint_to_json(model: TrainableModel) -> str:
    obj = {
        "format_version": 1,
        "arch": model.arch,
        "params": {name: model.params[name].tolist() for name in model.PARAM_NAMES},
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def model_from_json(text: str, expect_arch: dict | None = None) -> TrainableModel:
    obj = json.loads(text)
    if obj.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint version: {obj.get('format_version')!r}")
    arch = obj["arch"]
    if expect_arch is not None:
        mismatched = {k: (arch.get(k), expect_arch[k]) for k in expect_arch if arch.get(k) != expect_arch[k]}
        if mismatched:
            raise ValueError(f"checkpoint architecture mismatch: {mismatched}")
    params = {name: np.array(vals, dtype=float) for name, vals in obj["params"].items()}
    return TrainableModel(arch["K"], arch["N"], arch["C"], arch["D"], arch["H"], arch["w"], params)
