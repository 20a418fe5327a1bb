import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hubvse.embed import (EncoderPair, ShapeError, backward, cosine_similarity_matrix, encode,
                          forward, l2_normalize_rows)
from hubvse.gradcheck import numeric_gradient, relative_error

from . import oracles


def test_identity_encoder_returns_input(rng):
    x_t, x_i = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    t, i = encode(EncoderPair(np.eye(4), np.eye(4)), x_t, x_i)
    np.testing.assert_array_equal(t, x_t)
    np.testing.assert_array_equal(i, x_i)


def test_zero_encoder_gives_zero_encodings(rng):
    t, i = encode(EncoderPair(np.zeros((3, 4)), np.zeros((3, 6))),
                  rng.normal(size=(2, 4)), rng.normal(size=(2, 6)))
    assert not t.any() and not i.any()


def test_encode_matches_naive_matmul(rng):
    w = rng.normal(size=(3, 4))
    x = rng.normal(size=(2, 4))
    t, _ = encode(EncoderPair(w, w), x, x)
    expected = oracles.matmul(x.tolist(), w.T.tolist())
    np.testing.assert_allclose(t, expected, rtol=0, atol=1e-14)


def test_encode_rejects_wrong_widths(rng):
    enc = EncoderPair(np.eye(3), np.eye(3))
    with pytest.raises(ShapeError, match="text features have 4 columns"):
        encode(enc, np.ones((2, 4)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="image features have 2 columns"):
        encode(enc, np.ones((2, 3)), np.ones((2, 2)))


def test_normalize_examples():
    out, norms, deg = l2_normalize_rows(np.array([[3.0, 4.0], [1.0, 0.0], [0.0, 0.0]]))
    np.testing.assert_allclose(out[0], [0.6, 0.8], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(out[1], [1.0, 0.0])
    np.testing.assert_array_equal(out[2], [0.0, 0.0])
    assert deg.tolist() == [False, False, True]
    np.testing.assert_allclose(norms, [5.0, 1.0, 0.0])


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                     elements=st.floats(-1e3, 1e3, allow_nan=False))


@given(finite_rows)
def test_normalize_is_idempotent(m):
    once, _, deg = l2_normalize_rows(m)
    twice, _, _ = l2_normalize_rows(once)
    np.testing.assert_allclose(twice[~deg], once[~deg], rtol=0, atol=1e-12)
    assert np.isfinite(once).all()


def test_cosine_examples():
    S = cosine_similarity_matrix(np.array([[1.0, 1.0], [0.0, 2.0]]), np.array([[1.0, 0.0], [0.0, 3.0]]))
    assert S[0, 0] == pytest.approx(1 / np.sqrt(2), abs=1e-12)
    assert S[1, 1] == pytest.approx(1.0, abs=1e-15)
    assert S[0, 1] == 0.0
    assert S.min() >= -1 and S.max() <= 1


def test_cosine_rejects_mismatched_widths():
    with pytest.raises(ShapeError):
        cosine_similarity_matrix(np.ones((2, 3)), np.ones((2, 4)))


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_cosine_invariant_under_positive_row_scaling(seed):
    rng = np.random.default_rng(seed)
    t, i = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    c_t, c_i = rng.uniform(0.01, 100, size=(4, 1)), rng.uniform(0.01, 100, size=(4, 1))
    np.testing.assert_allclose(cosine_similarity_matrix(c_t * t, c_i * i),
                               cosine_similarity_matrix(t, i), rtol=0, atol=1e-9)


def test_backward_zero_upstream_gives_zero_gradients(rng):
    enc = EncoderPair(rng.normal(size=(3, 4)), rng.normal(size=(3, 5)))
    tape = backward(enc, rng.normal(size=(6, 4)), rng.normal(size=(6, 5)), np.zeros((6, 6)))
    assert not tape.text_weights.any() and not tape.image_weights.any()
    assert tape.text_weights.shape == (3, 4) and tape.image_weights.shape == (3, 5)


def test_backward_stationary_at_perfect_alignment(rng):
    # loss = S_11 with collinear encodings: cosine is at its maximum
    enc = EncoderPair(np.eye(3), np.eye(3))
    x = rng.normal(size=(1, 3))
    tape = backward(enc, x, 2.5 * x, np.ones((1, 1)))
    np.testing.assert_allclose(tape.text_weights, 0, atol=1e-15)
    np.testing.assert_allclose(tape.image_weights, 0, atol=1e-15)


def test_backward_rejects_bad_shape(rng):
    enc = EncoderPair(np.eye(3), np.eye(3))
    with pytest.raises(ShapeError):
        backward(enc, np.ones((2, 3)), np.ones((2, 3)), np.ones((3, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences_for_linear_probe(seed):
    # arbitrary fixed upstream gradient: L = sum(G * S)
    rng = np.random.default_rng(seed)
    enc = EncoderPair(rng.normal(size=(5, 6)), rng.normal(size=(5, 4)))
    x_t, x_i = rng.normal(size=(7, 6)), rng.normal(size=(7, 4))
    G = rng.normal(size=(7, 7))
    tape = backward(enc, x_t, x_i, G)
    num = numeric_gradient(lambda e: float((G * forward(e, x_t, x_i)[0]).sum()), enc)
    assert relative_error(tape.text_weights, num["text_weights"]) < 1e-7
    assert relative_error(tape.image_weights, num["image_weights"]) < 1e-7


def test_degenerate_rows_pass_through_backward():
    enc = EncoderPair(np.eye(2), np.eye(2))
    x_t = np.array([[0.0, 0.0], [1.0, 2.0]])
    x_i = np.array([[1.0, 0.0], [0.0, 1.0]])
    S, cache = forward(enc, x_t, x_i)
    assert cache["t_deg"].tolist() == [True, False]
    assert np.isfinite(S).all()
    tape = backward(enc, x_t, x_i, np.ones((2, 2)))
    assert np.isfinite(tape.text_weights).all()


def test_encoder_validates_shapes():
    with pytest.raises(ShapeError):
        EncoderPair(np.ones((3, 2)), np.ones((4, 2)))
    with pytest.raises(ValueError):
        EncoderPair(np.full((2, 2), np.nan), np.ones((2, 2)))


def test_xavier_bounds_and_determinism():
    a = EncoderPair.xavier(8, 32, 16, np.random.default_rng(3))
    b = EncoderPair.xavier(8, 32, 16, np.random.default_rng(3))
    np.testing.assert_array_equal(a.text_weights, b.text_weights)
    assert np.abs(a.text_weights).max() <= np.sqrt(6 / 40)
    assert np.abs(a.image_weights).max() <= np.sqrt(6 / 24)


@pytest.mark.parametrize("kind", ["SUM", "MAX", "NCA", "HAL", "HAL+MB"])
@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_finite_differences_for_every_loss(kind, seed):
    from hubvse.gradcheck import check_loss

    res = check_loss(kind, seed, n=4, dim=4, h=1e-5, tolerance=1e-5)
    assert res.passed, res
