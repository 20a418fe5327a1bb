"""Batch objectives over a square similarity matrix.

Positives sit on the diagonal: ``S[i, i]`` pairs image ``i`` with text ``i``.
Every loss returns its value together with ``dL/dS``, which
:func:`hubvse.embed.backward` chains back into the encoders. All four share a
"lower is better" contract.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HAL_POSITIVE_FLOOR = 1e-9


@dataclass(frozen=True)
class TripletLossConfig:
    margin: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.margin <= 2.0:
            raise ValueError(f"margin must lie in [0, 2], got {self.margin}")


@dataclass(frozen=True)
class HalLossConfig:
    gamma: float = 30.0
    epsilon: float = 0.3

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not 0.0 <= self.epsilon <= 2.0:
            raise ValueError(f"epsilon must lie in [0, 2], got {self.epsilon}")


@dataclass(frozen=True)
class LossResult:
    value: float
    grad: np.ndarray  # dL/dS, same shape as S


class HalDomainError(ValueError):
    """``1 + W_ii * S_ii`` fell below the positive-term floor."""

    def __init__(self, index, value):
        self.index = int(index)
        self.value = float(value)
        super().__init__(
            f"positive term 1 + W_ii*S_ii = {value:.3e} < {HAL_POSITIVE_FLOOR:g} at pair {index}")


def _square(S):
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"similarity matrix must be square, got shape {S.shape}")
    return S


def unit_weights(n):
    """The weight matrix used when the memory bank is disabled."""
    return np.ones((n, n))


def sum_margin(S, cfg: TripletLossConfig = TripletLossConfig()) -> LossResult:
    S = _square(S)
    n = S.shape[0]
    pos = np.diag(S)
    off = ~np.eye(n, dtype=bool)
    # image anchor i against texts j, text anchor j against images i
    h_img = cfg.margin - pos[:, None] + S
    h_txt = cfg.margin - pos[None, :] + S
    act_img = (h_img > 0) & off
    act_txt = (h_txt > 0) & off
    value = h_img[act_img].sum() + h_txt[act_txt].sum()
    grad = act_img.astype(np.float64) + act_txt
    grad[np.diag_indices(n)] -= act_img.sum(axis=1) + act_txt.sum(axis=0)
    return LossResult(float(value), grad)


def max_margin(S, cfg: TripletLossConfig = TripletLossConfig()) -> LossResult:
    S = _square(S)
    n = S.shape[0]
    grad = np.zeros_like(S)
    if n < 2:
        return LossResult(0.0, grad)
    pos = np.diag(S)
    rows = np.arange(n)
    masked = S.copy()
    masked[rows, rows] = -np.inf
    # argmax returns the lowest index on ties
    j_star = masked.argmax(axis=1)
    i_star = masked.argmax(axis=0)
    v_img = cfg.margin - pos + masked[rows, j_star]
    v_txt = cfg.margin - pos + masked[i_star, rows]
    a_img = v_img > 0
    a_txt = v_txt > 0
    np.add.at(grad, (rows[a_img], j_star[a_img]), 1.0)
    np.add.at(grad, (i_star[a_txt], rows[a_txt]), 1.0)
    grad[rows, rows] -= a_img.astype(np.float64) + a_txt
    value = v_img[a_img].sum() + v_txt[a_txt].sum()
    return LossResult(float(value), grad)


def _logsumexp_rows(x):
    m = x.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True)))[:, 0]


def nca_loss(S) -> LossResult:
    """Negated NCA log-likelihood with the diagonal as each row's only positive."""
    S = _square(S)
    lse = _logsumexp_rows(S)
    value = float((lse - np.diag(S)).sum())
    grad = np.exp(S - lse[:, None])
    grad[np.diag_indices(S.shape[0])] -= 1.0
    return LossResult(value, grad)


def nca_weights(S):
    """Positive/negative gradient magnitudes of the NCA objective.

    Returns ``(w_pos, w_neg)``: ``w_pos[i]`` for the diagonal entry of row
    ``i``, ``w_neg[i, k]`` the softmax weight of every entry in the row
    (including ``k == i``), so each row of ``w_neg`` sums to one.
    """
    S = _square(S)
    w_neg = np.exp(S - _logsumexp_rows(S)[:, None])
    # the positive set is {i}, so its own normaliser ratio is exactly 1
    w_pos = 1.0 - np.diag(w_neg)
    return w_pos, w_neg


def smooth_max(a, gamma, axis=-1):
    """``(1/gamma) * log(1 + sum(exp(gamma * a)))`` along ``axis``, max-shifted.

    Entries equal to ``-inf`` are treated as absent terms.
    """
    a = np.asarray(a, dtype=np.float64)
    # shifting in units of a keeps the result >= max(0, a*) exactly: total >= 1
    m = np.maximum(a.max(axis=axis, keepdims=True), 0.0)
    total = np.exp(-gamma * m) + np.exp(gamma * (a - m)).sum(axis=axis, keepdims=True)
    return np.squeeze(m + np.log(total) / gamma, axis=axis)


def hal_loss(S, W=None, cfg: HalLossConfig = HalLossConfig()) -> LossResult:
    """Hubness-aware loss with per-pair weights ``W`` (all ones if omitted).

    ``W`` is held constant: no gradient flows into it.
    """
    S = _square(S)
    n = S.shape[0]
    W = unit_weights(n) if W is None else np.asarray(W, dtype=np.float64)
    if W.shape != S.shape:
        raise ValueError(f"weight matrix shape {W.shape} differs from S {S.shape}")
    rows = np.arange(n)
    pos_term = 1.0 + W[rows, rows] * S[rows, rows]
    bad = np.flatnonzero(pos_term < HAL_POSITIVE_FLOOR)
    if bad.size:
        raise HalDomainError(bad[0], pos_term[bad[0]])

    a = W * (S - cfg.epsilon)
    a[rows, rows] = -np.inf
    # column i: images m competing for text i; row i: texts n competing for image i
    col = smooth_max(a, cfg.gamma, axis=0)
    row = smooth_max(a, cfg.gamma, axis=1)
    value = (col.sum() + row.sum() - np.log(pos_term).sum()) / n

    g = cfg.gamma
    p_col = np.exp(g * (a - col[None, :]))
    p_row = np.exp(g * (a - row[:, None]))
    grad = W * (p_col + p_row)
    grad[rows, rows] = -W[rows, rows] / pos_term
    return LossResult(float(value), grad / n)


LOSSES = {
    "SUM": sum_margin,
    "MAX": max_margin,
    "NCA": nca_loss,
    "HAL": hal_loss,
}
