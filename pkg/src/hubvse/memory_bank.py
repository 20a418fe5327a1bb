"""Epoch-level embedding snapshot and hub-sensitive global pair weights."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .embed import EncoderPair, ShapeError, encode, l2_normalize_rows


class BankTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class GlobalWeightConfig:
    k: int = 10
    alpha: float = 40.0
    beta: float = 40.0
    eps1: float = 0.2
    eps2: float = 0.1
    bank_fraction: float = 0.05

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be positive")
        if not 0.0 < self.bank_fraction <= 1.0:
            raise ValueError(f"bank_fraction must lie in (0, 1], got {self.bank_fraction}")


@dataclass(frozen=True)
class MemoryBank:
    """Unit-norm text/image encodings of a sample of training pairs.

    Row ``r`` of both banks comes from dataset pair ``source_indices[r]``.
    """

    text_bank: np.ndarray
    image_bank: np.ndarray
    source_indices: np.ndarray

    def __post_init__(self):
        if self.text_bank.shape != self.image_bank.shape:
            raise ShapeError(
                f"bank sides differ: {self.text_bank.shape} vs {self.image_bank.shape}")
        if len(self.source_indices) != self.text_bank.shape[0]:
            raise ShapeError("one source index per bank row is required")
        if len(np.unique(self.source_indices)) != len(self.source_indices):
            raise ValueError("bank source indices must be unique")

    @property
    def size(self) -> int:
        return self.text_bank.shape[0]

    @property
    def dim(self) -> int:
        return self.text_bank.shape[1]


def knn(query, points, k, exclude=()):
    """Indices of the ``k`` points closest to ``query`` in l2 distance.

    Sorted by ascending distance, ties by lowest index; indices in ``exclude``
    are never returned.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    query = np.asarray(query, dtype=np.float64).reshape(1, -1)
    if query.shape[1] != points.shape[1]:
        raise ShapeError(f"query has dim {query.shape[1]}, points have {points.shape[1]}")
    mask = np.zeros((1, points.shape[0]), dtype=bool)
    excl = np.fromiter(exclude, dtype=np.int64) if len(exclude) else np.empty(0, np.int64)
    mask[0, excl[(excl >= 0) & (excl < points.shape[0])]] = True
    usable = points.shape[0] - int(mask.sum())
    if k > usable:
        raise BankTooSmallError(
            f"k={k} exceeds the {usable} usable points "
            f"({points.shape[0]} total, {points.shape[0] - usable} excluded)")
    return [int(i) for i in kernels.knn_rows(query, points, k, mask)[0]]


def bank_size(n_pairs, fraction):
    # round() guards against 0.07 * 100 = 7.000000000000001
    return math.ceil(round(fraction * n_pairs, 9))


def sample_bank(dataset, encoder: EncoderPair, cfg: GlobalWeightConfig, seed) -> MemoryBank:
    """Encode a uniform without-replacement sample of training pairs."""
    n_pairs = dataset.n_pairs
    b = bank_size(n_pairs, cfg.bank_fraction)
    if b < cfg.k + 1:
        raise BankTooSmallError(
            f"bank of {b} rows ({cfg.bank_fraction:g} x {n_pairs} pairs) needs at least k+1 = {cfg.k + 1}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n_pairs, size=b, replace=False))
    t_raw, i_raw = encode(encoder, dataset.text_features[idx],
                          dataset.image_features[dataset.pair_index[idx]])
    t_hat, _, _ = l2_normalize_rows(t_raw)
    i_hat, _, _ = l2_normalize_rows(i_raw)
    return MemoryBank(t_hat, i_hat, idx.astype(np.int64))


def _expit(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _lse(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    return np.squeeze(m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True)), axis=axis)


def positive_neighbor_sims(img_nbr_sims, txt_nbr_sims):
    """Neighbour similarities entering the positive weight of each pair.

    Pair ``i`` sees its image's text neighbours and, mirrored, its own text's
    image neighbours. Swap the second block here to change which bank side
    the second sum scans.
    """
    return np.concatenate([img_nbr_sims, txt_nbr_sims], axis=1)


def weight_logits(pos_sims, img_nbr_sims, txt_nbr_sims, cfg: GlobalWeightConfig):
    """Logits of the global weight matrix; ``W = expit(logits)``.

    ``pos_sims[i]`` is the similarity of batch pair ``i``; ``img_nbr_sims[i]``
    the similarities of image ``i`` to its k nearest bank texts;
    ``txt_nbr_sims[t]`` those of text ``t`` to its k nearest bank images.
    Finite logits put every weight strictly inside (0, 1), even where float64
    rounds the weight itself to an endpoint.
    """
    pos = np.asarray(pos_sims, dtype=np.float64)
    s1 = np.asarray(img_nbr_sims, dtype=np.float64)
    s2 = np.asarray(txt_nbr_sims, dtype=np.float64)
    a, b = cfg.alpha, cfg.beta

    # positive: 1 - e^p / (e^p + sum e^nbr) == expit(lse(nbr) - p)
    nbr = a * (positive_neighbor_sims(s1, s2) - cfg.eps2)
    pos_logit = _lse(nbr, axis=1) - a * (pos - cfg.eps1)

    # negative (i, t): neighbours of image i and of text t against both positives
    img_part = _lse(b * (s1 - cfg.eps2), axis=1)
    txt_part = _lse(b * (s2 - cfg.eps2), axis=1)
    num = np.logaddexp(img_part[:, None], txt_part[None, :])
    p = b * (pos - cfg.eps1)
    logits = num - np.logaddexp(p[:, None], p[None, :])
    logits[np.diag_indices(len(pos))] = pos_logit
    return logits


def weights_from_similarities(pos_sims, img_nbr_sims, txt_nbr_sims, cfg: GlobalWeightConfig):
    """Global weight matrix: diagonal positive weights, off-diagonal negative ones."""
    return _expit(weight_logits(pos_sims, img_nbr_sims, txt_nbr_sims, cfg))


def global_weights(batch_text_enc, batch_image_enc, batch_pair_ids, bank: MemoryBank,
                   cfg: GlobalWeightConfig):
    """Hub weights for one mini-batch against the memory bank.

    A batch pair never finds its own bank row among its neighbours: rows are
    excluded by dataset pair id, not by embedding equality.
    """
    t_hat, _, _ = l2_normalize_rows(batch_text_enc)
    i_hat, _, _ = l2_normalize_rows(batch_image_enc)
    if t_hat.shape != i_hat.shape:
        raise ShapeError(f"batch sides differ: {t_hat.shape} vs {i_hat.shape}")
    if t_hat.shape[1] != bank.dim:
        raise ShapeError(f"batch dim {t_hat.shape[1]} differs from bank dim {bank.dim}")
    ids = np.asarray(batch_pair_ids, dtype=np.int64)
    excluded = bank.source_indices[None, :] == ids[:, None]
    usable = bank.size - excluded.sum(axis=1).max()
    if cfg.k > usable:
        raise BankTooSmallError(f"k={cfg.k} exceeds {usable} usable bank rows")

    k1 = kernels.knn_rows(i_hat, bank.text_bank, cfg.k, excluded)
    k2 = kernels.knn_rows(t_hat, bank.image_bank, cfg.k, excluded)
    s1 = np.einsum("nd,nkd->nk", i_hat, bank.text_bank[k1])
    s2 = np.einsum("nd,nkd->nk", t_hat, bank.image_bank[k2])
    pos = np.clip(np.einsum("nd,nd->n", i_hat, t_hat), -1.0, 1.0)
    return weights_from_similarities(pos, np.clip(s1, -1, 1), np.clip(s2, -1, 1), cfg)
