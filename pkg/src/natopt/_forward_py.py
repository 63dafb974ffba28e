"""Pure-numpy fallback for the hot evaluation kernels.

Same contracts as the compiled `_fastcore` module; see `kernels` for the
backend selection logic.
"""

from __future__ import annotations

import numpy as np


def rows_forward(
    proj: np.ndarray,
    clspos: np.ndarray,
    W2: np.ndarray,
    b2: np.ndarray,
    win: np.ndarray,
    cp_idx: np.ndarray,
) -> np.ndarray:
    """Hidden-layer forward for a batch of (window, class, position) rows.

    proj[o, v] is the first-layer contribution of token value v at window
    offset o (value K is MASK, K+1 is out-of-range padding, contributing
    zero); clspos[c * N + i] carries the class/position contribution plus the
    bias.  Returns logits of shape (rows, K).
    """
    z = clspos[cp_idx].copy()
    for o in range(win.shape[1]):
        z += proj[o, win[:, o]]
    np.tanh(z, out=z)
    return z @ W2 + b2


def dedup_rows(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First-occurrence indices and inverse map for an int64 key array.

    The order of the unique set is unspecified (rows are processed
    independently downstream); only determinism given `keys` is required.
    """
    _, idx, inverse = np.unique(keys, return_index=True, return_inverse=True)
    return idx.astype(np.int64), inverse.astype(np.int64)
