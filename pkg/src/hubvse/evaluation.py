"""Retrieval metrics in both directions and k-occurrence hubness diagnostics.

Conventions: similarity ties rank the lower index first; Med r of an even
number of queries is the mean of the two central ranks; a k-occurrence
distribution with zero variance has skewness 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .embed import EncoderPair, cosine_similarity_matrix, encode

I2T = "i2t"
T2I = "t2i"
DIRECTIONS = (I2T, T2I)


@dataclass(frozen=True)
class RetrievalReport:
    direction: str
    r_at_1: float
    r_at_5: float
    r_at_10: float
    med_r: float
    mean_r: float

    @property
    def recall_sum(self) -> float:
        return self.r_at_1 + self.r_at_5 + self.r_at_10


@dataclass(frozen=True)
class HubnessReport:
    k: int
    direction: str
    occurrence: np.ndarray
    skewness: float
    max_hub_share: float


@dataclass(frozen=True)
class EvalResult:
    i2t: RetrievalReport
    t2i: RetrievalReport

    @property
    def rsum(self) -> float:
        return rsum(self.i2t, self.t2i)


def _check_direction(direction):
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


def rank_ground_truth(S, direction, captions_per_image):
    """1-based rank of the best ground-truth item for every query.

    ``S`` has one row per image and one column per caption; captions
    ``i*m .. i*m+m-1`` belong to image ``i``. For ``i2t`` the best of an
    image's captions counts, for ``t2i`` the caption's single image.
    """
    _check_direction(direction)
    S = np.asarray(S, dtype=np.float64)
    m = int(captions_per_image)
    n_img, n_cap = S.shape
    if m < 1 or n_cap != n_img * m:
        raise ValueError(
            f"{n_cap} caption columns are not {n_img} images x {m} captions")
    if direction == I2T:
        return kernels.best_ground_truth_rank(S, np.arange(n_img) * m, m)
    return kernels.best_ground_truth_rank(S.T, np.arange(n_cap) // m, 1)


def retrieval_report(ranks, direction=I2T) -> RetrievalReport:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no ranks to summarise")
    n = ranks.size
    return RetrievalReport(
        direction=direction,
        r_at_1=100.0 * np.count_nonzero(ranks <= 1) / n,
        r_at_5=100.0 * np.count_nonzero(ranks <= 5) / n,
        r_at_10=100.0 * np.count_nonzero(ranks <= 10) / n,
        med_r=float(np.median(ranks)),
        mean_r=float(np.mean(ranks)),
    )


def rsum(a: RetrievalReport, b: RetrievalReport) -> float:
    return a.recall_sum + b.recall_sum


def evaluate_similarity(S, captions_per_image) -> EvalResult:
    return EvalResult(
        retrieval_report(rank_ground_truth(S, I2T, captions_per_image), I2T),
        retrieval_report(rank_ground_truth(S, T2I, captions_per_image), T2I),
    )


def dataset_similarity(encoder: EncoderPair, dataset):
    t, im = encode(encoder, dataset.text_features, dataset.image_features)
    return cosine_similarity_matrix(t, im)


def evaluate_encoder(encoder: EncoderPair, dataset) -> EvalResult:
    return evaluate_similarity(dataset_similarity(encoder, dataset), dataset.captions_per_image)


def fold_average(S, captions_per_image, fold_size) -> EvalResult:
    """Average metrics over consecutive folds of ``fold_size`` images.

    Each fold ranks only against its own images and captions. Trailing
    images that do not fill a fold are ignored.
    """
    S = np.asarray(S, dtype=np.float64)
    m = captions_per_image
    n_folds = S.shape[0] // fold_size
    if n_folds < 1:
        raise ValueError(f"fold size {fold_size} exceeds {S.shape[0]} images")
    results = []
    for f in range(n_folds):
        rows = slice(f * fold_size, (f + 1) * fold_size)
        cols = slice(f * fold_size * m, (f + 1) * fold_size * m)
        results.append(evaluate_similarity(S[rows, cols], m))

    def mean_report(direction, reports):
        return RetrievalReport(direction, *(
            float(np.mean([getattr(r, name) for r in reports]))
            for name in ("r_at_1", "r_at_5", "r_at_10", "med_r", "mean_r")))

    return EvalResult(mean_report(I2T, [r.i2t for r in results]),
                      mean_report(T2I, [r.t2i for r in results]))


def skewness(x) -> float:
    """Population third standardised moment; 0 when the variance vanishes."""
    x = np.asarray(x, dtype=np.float64)
    d = x - x.mean()
    var = np.mean(d * d)
    if var <= 0.0:
        return 0.0
    return float(np.mean(d ** 3) / var ** 1.5)


def hubness_report(S, k, direction=T2I) -> HubnessReport:
    """k-occurrence of every gallery item and the skewness of that distribution.

    For ``t2i`` the queries are the columns of ``S`` (texts) and the gallery
    its rows (images); ``i2t`` is the transpose.
    """
    _check_direction(direction)
    S = np.asarray(S, dtype=np.float64)
    scores = S.T if direction == T2I else S
    n_queries, n_gallery = scores.shape
    if not 1 <= k <= n_gallery:
        raise ValueError(f"k={k} must lie in [1, {n_gallery}] (gallery size)")
    occ = kernels.k_occurrence(scores, k)
    return HubnessReport(
        k=int(k),
        direction=direction,
        occurrence=occ,
        skewness=skewness(occ),
        max_hub_share=float(occ.max() / (k * n_queries)),
    )
