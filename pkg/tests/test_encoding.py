import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lrpdmap import lrpd
from lrpdmap.encoding import (
    FilmWeights,
    decode_element,
    decode_features,
    element_confidence,
    embed,
    encode_element,
    encode_map,
    feature_dim,
    film_modulate,
)
from lrpdmap.geometry import ClassProbs
from lrpdmap.lrpd import ElementDistribution, LrpdParams, ProbMap


def test_hand_worked_two_point_rank_one():
    p = LrpdParams(
        mu=[1.0, 2.0, 3.0, 4.0],
        log_d=np.log([0.1, 0.2, 0.3, 0.4]),
        L=[[1.0], [2.0], [3.0], [4.0]],
        kappa=4.0,
    )
    f = encode_element(p)
    expected = np.array([
        [1.0, 2.0, 0.1, 0.2, 2.0, 4.0],
        [3.0, 4.0, 0.3, 0.4, 6.0, 8.0],
    ])
    np.testing.assert_allclose(f, expected, rtol=1e-15)
    assert f.shape == (2, feature_dim(1))


@given(st.integers(0, 10_000), st.integers(2, 12), st.integers(0, 4))
def test_round_trip_is_exact_up_to_kappa_folding(seed, n, r):
    p = lrpd.random_params(np.random.default_rng(seed), n, r)
    mu, d, Lf = decode_features(encode_element(p))
    np.testing.assert_array_equal(mu, p.mu)
    np.testing.assert_array_equal(d, p.d)
    np.testing.assert_array_equal(Lf, np.sqrt(p.kappa) * p.L)
    q = decode_element(encode_element(p))
    assert q.kappa == 1.0
    np.testing.assert_allclose(lrpd.dense_cov(q), lrpd.dense_cov(p), rtol=1e-12, atol=1e-14)


def test_kappa_is_folded_not_carried():
    g = np.random.default_rng(1)
    p = lrpd.random_params(g, 4, 2, kappa=2.25)
    q = LrpdParams(p.mu, p.log_d, 1.5 * p.L, 1.0)
    np.testing.assert_allclose(encode_element(p), encode_element(q), rtol=1e-15)


def test_decode_rejects_bad_width():
    with pytest.raises(ValueError):
        decode_features(np.zeros((3, 5)))


def hand_weights(embed_dim=3, rank=1, **over):
    f = feature_dim(rank)
    base = dict(
        embed_w=np.arange(embed_dim * f, dtype=float).reshape(embed_dim, f) / 10,
        embed_b=np.ones(embed_dim),
        gamma_w=np.zeros(embed_dim),
        gamma_b=np.ones(embed_dim),
        beta_w=np.zeros(embed_dim),
        beta_b=np.zeros(embed_dim),
    )
    base.update(over)
    return FilmWeights(**base)


def test_film_identity_when_gamma_one_and_beta_zero():
    w = hand_weights()
    e = np.array([0.5, -1.0, 2.0, 0.1, 0.3, -0.2])
    for c in (0.0, 0.4, 1.0):
        np.testing.assert_allclose(film_modulate(e, c, w), embed(e, w), rtol=1e-15)


def test_film_direct_arithmetic():
    w = hand_weights(
        embed_dim=2,
        gamma_w=np.array([2.0, -4.0]),
        gamma_b=np.array([0.5, 1.0]),
        beta_w=np.array([1.0, 0.0]),
        beta_b=np.array([0.0, -1.0]),
    )
    e = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    h = embed(e, w)  # [0.0 + 1, 0.6 + 1]
    np.testing.assert_allclose(h, [1.0, 1.6])
    # c = 0.5: gamma = [1.5, max(-1, 0)] = [1.5, 0]; beta = [0.5, -1]
    np.testing.assert_allclose(film_modulate(e, 0.5, w), [1.5 * 1.0 + 0.5, -1.0])


def test_film_saturated_gamma_discards_embedding():
    w = hand_weights(gamma_b=-np.ones(3), beta_b=np.array([1.0, 2.0, 3.0]))
    out = film_modulate(np.random.default_rng(0).normal(size=(5, 6)), 0.7, w)
    np.testing.assert_array_equal(out, np.tile([1.0, 2.0, 3.0], (5, 1)))


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_film_is_affine_in_confidence_where_gamma_positive(c0, c1, t):
    w = hand_weights(gamma_w=np.array([0.5, 1.0, 2.0]), gamma_b=np.full(3, 0.1), beta_w=np.array([1.0, -1.0, 3.0]))
    e = np.linspace(-1, 1, 6)
    mid = (1 - t) * c0 + t * c1
    lhs = film_modulate(e, mid, w)
    rhs = (1 - t) * film_modulate(e, c0, w) + t * film_modulate(e, c1, w)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-12)


def test_film_validation():
    w = hand_weights()
    with pytest.raises(ValueError):
        film_modulate(np.zeros(6), 1.5, w)
    with pytest.raises(ValueError):
        film_modulate(np.zeros(5), 0.5, w)
    with pytest.raises(ValueError):
        hand_weights(beta_b=np.zeros(2))


def test_random_weights_are_seeded_and_round_trip():
    a, b = FilmWeights.random(3, rank=2), FilmWeights.random(3, rank=2)
    assert a.embed_dim == 128 and a.in_dim == 8
    np.testing.assert_array_equal(a.embed_w, b.embed_w)
    c = FilmWeights.from_dict(a.to_dict())
    np.testing.assert_array_equal(c.gamma_b, a.gamma_b)


def test_encode_map_is_finite_and_uses_confidence():
    g = np.random.default_rng(4)
    elements = [
        ElementDistribution(ClassProbs([0.6, 0.1, 0.1, 0.2]), lrpd.random_params(g, 20, 3)),
        ElementDistribution(ClassProbs([0.0, 0.0, 1.0, 0.0]), lrpd.random_params(g, 20, 3)),
        ElementDistribution(ClassProbs([0.3, 0.7]), lrpd.random_params(g, 20, 3)),
    ]
    pmap = ProbMap(tuple(elements))
    w = FilmWeights.random(0, rank=3)
    out = encode_map(pmap, w)
    assert [o.shape for o in out] == [(20, 128)] * 3
    assert all(np.all(np.isfinite(o)) for o in out)
    # default confidence: centerline probability, or the own-class probability without a centerline entry
    assert [element_confidence(el) for el in elements] == [0.2, 0.0, 0.7]
    np.testing.assert_allclose(out[0], film_modulate(encode_element(elements[0].params), 0.2, w))
    alt = encode_map(pmap, w, confidence_class=2)
    np.testing.assert_allclose(alt[1], film_modulate(encode_element(elements[1].params), 1.0, w))
    np.testing.assert_allclose(alt[0], film_modulate(encode_element(elements[0].params), 0.1, w))


def test_zero_kappa_still_emits_factor_columns():
    g = np.random.default_rng(2)
    p = lrpd.random_params(g, 5, 3, kappa=0.0)
    f = encode_element(p)
    assert f.shape == (5, feature_dim(3))
    np.testing.assert_array_equal(f[:, 4:], 0.0)


def test_two_confidences_match_direct_arithmetic():
    w = FilmWeights.random(9, rank=2, embed_dim=16)
    e = np.random.default_rng(0).normal(size=8)
    outs = []
    for c in (0.2, 0.9):
        direct = np.maximum(w.gamma_w * c + w.gamma_b, 0) * (w.embed_w @ e + w.embed_b) + (w.beta_w * c + w.beta_b)
        got = film_modulate(e, c, w)
        np.testing.assert_allclose(got, direct, rtol=1e-14)
        outs.append(got)
    assert not np.allclose(outs[0], outs[1])


@given(st.integers(0, 1000), st.floats(-2, 2), st.floats(0, 1))
def test_film_is_affine_in_features(seed, alpha, c):
    g = np.random.default_rng(seed)
    w = FilmWeights.random(seed, rank=1, embed_dim=8)
    e1, e2 = g.normal(size=6), g.normal(size=6)
    lhs = film_modulate(alpha * e1 + (1 - alpha) * e2, c, w)
    rhs = alpha * film_modulate(e1, c, w) + (1 - alpha) * film_modulate(e2, c, w)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9)


def test_extreme_parameters_stay_finite():
    p = LrpdParams(np.full(40, 1e3), np.full(40, 10.0), np.full((40, 24), 1e2), 1.0)
    out = film_modulate(encode_element(p), 1.0, FilmWeights.random(1, rank=24))
    assert np.all(np.isfinite(out))
