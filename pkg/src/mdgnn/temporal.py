"""Causal self-attention over a window of daily embeddings with ALiBi bias."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_SENTINEL, Node, Tape


@dataclass
class WindowBatch:
    H: np.ndarray      # (window + 1) x d_h, oldest first, newest row is day t
    valid: np.ndarray  # bool per row; False for days before the series start
    day: int


def slopes(n_heads: int) -> np.ndarray:
    """Geometric slope schedule ``2 ** (-8 k / n_heads)`` for k = 1..n_heads."""
    if n_heads < 1:
        raise ValueError("need at least one head")
    k = np.arange(1, n_heads + 1)
    return 2.0 ** (-8.0 * k / n_heads)


def assemble_window(embeddings, t: int, window: int, v: int | None = None) -> WindowBatch:
    """Rows for days ``t - window .. t``; missing early days are zero and invalid.

    ``embeddings`` is indexable by day and gives an (n_S x d) matrix, or a d-vector
    per day when ``v`` is None.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    first = np.asarray(embeddings[t])
    d = first.shape[-1]
    H = np.zeros((window + 1, d))
    valid = np.zeros(window + 1, dtype=bool)
    for r, day in enumerate(range(t - window, t + 1)):
        if day >= 0:
            row = np.asarray(embeddings[day])
            H[r] = row if v is None else row[v]
            valid[r] = True
    return WindowBatch(H, valid, t)


def alibi_bias(length: int, slope: float) -> np.ndarray:
    """``out[q, j] = -slope * (q - j)`` for ``j <= q``; entries above the diagonal are 0."""
    if length < 1:
        raise ValueError("length must be >= 1")
    q = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    return np.where(j <= q, -slope * (q - j), 0.0)


def forward_mask(length: int, valid: np.ndarray | None = None) -> np.ndarray:
    """Additive mask: 0 where key ``j <= q`` (and valid), else the sentinel."""
    if length < 1:
        raise ValueError("length must be >= 1")
    q = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    keep = j <= q
    if valid is not None:
        keep = keep & np.asarray(valid, dtype=bool)[None, :]
    return np.where(keep, 0.0, NEG_SENTINEL)


def temporal_attend(tape: Tape, P: dict[str, Node], H: Node, valid: np.ndarray,
                    n_heads: int, slope_values=None) -> tuple[Node, np.ndarray]:
    """Full window attention; returns the newest row (1 x d) and the head-averaged weights.

    ``slope_values`` overrides the default per-head slope schedule.
    """
    valid = np.asarray(valid, dtype=bool)
    length, d = H.shape
    if not valid.any():
        raise ValueError("window has no valid day")
    Q = ad.matmul(H, P["tmp.WQ"])
    K = ad.matmul(H, P["tmp.WK"])
    V = ad.matmul(H, P["tmp.WV"])
    scores = ad.scale(ad.matmul(Q, ad.transpose(K)), 1.0 / np.sqrt(d))
    mask = forward_mask(length, valid)
    # padded rows are never read as queries; let them attend to themselves
    pad = np.flatnonzero(~valid)
    mask[pad, pad] = 0.0
    heads = []
    ms = slopes(n_heads) if slope_values is None else np.asarray(slope_values, dtype=np.float64)
    for m in ms:
        heads.append(ad.softmax_rows(ad.add_const(scores, alibi_bias(length, m)), mask))
    A = ad.mean_over(heads)
    Z = ad.matmul(ad.matmul(A, V), P["tmp.WO"])
    return ad.slice_rows(Z, length - 1, length), A.value


def window_index(days: list[int], n_stocks: int, window: int, row_of_day: dict[int, int]):
    """Embedding-table rows for every (day, stock) target.

    Returns ``index`` (B x (window+1), -1 for padding) with targets ordered
    day-major, matching a table where day ``d`` occupies rows
    ``row_of_day[d] * n_stocks + stock``.
    """
    B = len(days) * n_stocks
    index = np.full((B, window + 1), -1, dtype=np.intp)
    r = 0
    for t in days:
        for v in range(n_stocks):
            for c, day in enumerate(range(t - window, t + 1)):
                if day in row_of_day:
                    index[r, c] = row_of_day[day] * n_stocks + v
            r += 1
    return index


def temporal_attend_last(tape: Tape, P: dict[str, Node], E: Node, index: np.ndarray,
                         n_heads: int, trace: list | None = None) -> Node:
    """Newest-position output for many windows at once.

    ``E`` is an embedding table and ``index`` (B x L) selects each window's rows,
    -1 marking padding. Under the causal mask the newest query sees every valid
    key, so only that query row is computed.
    """
    B, L = index.shape
    d = E.shape[1]
    valid = index >= 0
    if not np.all(valid[:, -1]):
        raise ValueError("newest row of every window must be valid")
    flat = np.where(valid, index, 0).ravel()
    Hw = ad.gather_rows(E, flat)
    K = ad.matmul(Hw, P["tmp.WK"])
    V = ad.matmul(Hw, P["tmp.WV"])
    q = ad.matmul(ad.gather_rows(E, index[:, -1]), P["tmp.WQ"])
    qrep = ad.gather_rows(q, np.repeat(np.arange(B), L))
    scores = ad.scale(ad.reshape(ad.row_sum(ad.mul(qrep, K)), B, L), 1.0 / np.sqrt(d))
    mask = np.where(valid, 0.0, NEG_SENTINEL)
    dist = np.arange(L)[None, :] - (L - 1)
    heads = []
    for m in slopes(n_heads):
        heads.append(ad.softmax_rows(ad.add_const(scores, np.repeat(m * dist, B, 0)), mask))
    A = ad.mean_over(heads)
    if trace is not None:
        trace.extend(h.value for h in heads)
    pooled = ad.segment_sum(ad.mul_col(V, ad.reshape(A, B * L, 1)), np.repeat(np.arange(B), L), B)
    return ad.matmul(pooled, P["tmp.WO"])
