"""Linear encoders, row normalisation, cosine similarity and its reverse pass.

Matrices are plain float64 ``numpy.ndarray`` objects. Similarity matrices are
indexed ``S[i, j] = <image_i, text_j>`` after l2 normalisation of both sides.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGENERATE_NORM = 1e-12


class ShapeError(ValueError):
    """Raised when matrix operands have incompatible shapes."""


@dataclass(frozen=True)
class EncoderPair:
    """Two linear maps into a shared ``joint_dim``-dimensional space.

    ``text_weights`` has shape (d, d_text), ``image_weights`` (d, d_image);
    an encoding is ``features @ weights.T``.
    """

    text_weights: np.ndarray
    image_weights: np.ndarray

    def __post_init__(self):
        tw = np.array(self.text_weights, dtype=np.float64)
        iw = np.array(self.image_weights, dtype=np.float64)
        if tw.ndim != 2 or iw.ndim != 2:
            raise ShapeError("encoder weights must be 2-d")
        if tw.shape[0] != iw.shape[0] or tw.shape[0] < 1:
            raise ShapeError(
                f"joint dimension mismatch: text {tw.shape}, image {iw.shape}")
        if not (np.isfinite(tw).all() and np.isfinite(iw).all()):
            raise ValueError("encoder weights must be finite")
        tw.setflags(write=False)
        iw.setflags(write=False)
        object.__setattr__(self, "text_weights", tw)
        object.__setattr__(self, "image_weights", iw)

    @property
    def joint_dim(self) -> int:
        return self.text_weights.shape[0]

    @property
    def text_dim(self) -> int:
        return self.text_weights.shape[1]

    @property
    def image_dim(self) -> int:
        return self.image_weights.shape[1]

    @classmethod
    def xavier(cls, joint_dim, text_dim, image_dim, rng) -> "EncoderPair":
        """Glorot-uniform initialisation, drawn text block first."""
        def draw(fan_in):
            limit = np.sqrt(6.0 / (fan_in + joint_dim))
            return rng.uniform(-limit, limit, size=(joint_dim, fan_in))
        return cls(draw(text_dim), draw(image_dim))

    def replace(self, text_weights=None, image_weights=None) -> "EncoderPair":
        return EncoderPair(
            self.text_weights if text_weights is None else text_weights,
            self.image_weights if image_weights is None else image_weights,
        )


@dataclass(frozen=True)
class GradientTape:
    loss: float
    text_weights: np.ndarray
    image_weights: np.ndarray


def _as_matrix(m, name):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {m.shape}")
    return m


def encode(encoder: EncoderPair, text_features, image_features):
    """Raw (un-normalised) joint-space encodings of both modalities."""
    tf = _as_matrix(text_features, "text_features")
    imf = _as_matrix(image_features, "image_features")
    if tf.shape[1] != encoder.text_dim:
        raise ShapeError(
            f"text features have {tf.shape[1]} columns, encoder expects {encoder.text_dim}")
    if imf.shape[1] != encoder.image_dim:
        raise ShapeError(
            f"image features have {imf.shape[1]} columns, encoder expects {encoder.image_dim}")
    return tf @ encoder.text_weights.T, imf @ encoder.image_weights.T


def l2_normalize_rows(m):
    """Return ``(normalised, norms, degenerate)``.

    Rows whose norm is below 1e-12 are passed through unchanged and flagged in
    the boolean ``degenerate`` vector.
    """
    m = _as_matrix(m, "m")
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    degenerate = norms < DEGENERATE_NORM
    safe = np.where(degenerate, 1.0, norms)
    return m / safe[:, None], norms, degenerate


def cosine_similarity_matrix(text_enc, image_enc):
    """``S[i, j]`` = cosine of image row ``i`` with text row ``j``, clamped to [-1, 1]."""
    t = _as_matrix(text_enc, "text_enc")
    im = _as_matrix(image_enc, "image_enc")
    if t.shape[1] != im.shape[1]:
        raise ShapeError(f"encoding widths differ: text {t.shape}, image {im.shape}")
    t_hat, _, _ = l2_normalize_rows(t)
    im_hat, _, _ = l2_normalize_rows(im)
    return np.clip(im_hat @ t_hat.T, -1.0, 1.0)


def _normalize_backward(grad_hat, hat, norms, degenerate):
    # d(u/|u|) = (I - u_hat u_hat^T) / |u|; degenerate rows were passed through
    proj = np.einsum("ij,ij->i", grad_hat, hat)
    safe = np.where(degenerate, 1.0, norms)
    grad = (grad_hat - hat * proj[:, None]) / safe[:, None]
    grad[degenerate] = grad_hat[degenerate]
    return grad


def forward(encoder: EncoderPair, text_features, image_features):
    """Similarity matrix plus the cache that :func:`backward` needs.

    ``S`` is N_image x N_text, so a batch need not be square here; the losses
    require it.
    """
    t_raw, i_raw = encode(encoder, text_features, image_features)
    t_hat, t_norm, t_deg = l2_normalize_rows(t_raw)
    i_hat, i_norm, i_deg = l2_normalize_rows(i_raw)
    S = np.clip(i_hat @ t_hat.T, -1.0, 1.0)
    cache = dict(
        text_features=np.asarray(text_features, dtype=np.float64),
        image_features=np.asarray(image_features, dtype=np.float64),
        t_hat=t_hat, t_norm=t_norm, t_deg=t_deg,
        i_hat=i_hat, i_norm=i_norm, i_deg=i_deg,
    )
    return S, cache


def backward_cached(cache, dloss_ds, loss=0.0) -> GradientTape:
    """Chain ``dL/dS`` back to both weight matrices using a :func:`forward` cache.

    The clamp on ``S`` only removes rounding excursions, so it is treated as
    the identity here.
    """
    g = np.asarray(dloss_ds, dtype=np.float64)
    t_hat, i_hat = cache["t_hat"], cache["i_hat"]
    if g.shape != (i_hat.shape[0], t_hat.shape[0]):
        raise ShapeError(
            f"dLoss/dS has shape {g.shape}, expected {(i_hat.shape[0], t_hat.shape[0])}")
    grad_i_hat = g @ t_hat
    grad_t_hat = g.T @ i_hat
    grad_i = _normalize_backward(grad_i_hat, i_hat, cache["i_norm"], cache["i_deg"])
    grad_t = _normalize_backward(grad_t_hat, t_hat, cache["t_norm"], cache["t_deg"])
    return GradientTape(
        loss=float(loss),
        text_weights=grad_t.T @ cache["text_features"],
        image_weights=grad_i.T @ cache["image_features"],
    )


def backward(encoder: EncoderPair, text_features, image_features, dloss_ds,
             loss=0.0) -> GradientTape:
    """Gradients of a loss w.r.t. both weight matrices, given ``dL/dS``."""
    _, cache = forward(encoder, text_features, image_features)
    return backward_cached(cache, dloss_ds, loss)
