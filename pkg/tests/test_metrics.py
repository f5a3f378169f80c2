import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import entropy

from conftest import hist
from mpf.core import FeatureHistogram, FeatureScores, HyperParams, ValidationError, Weights
from mpf.metrics import (
    ArrayObjective,
    calibration_error,
    compose_histogram,
    kl_divergence,
    l2_regularizer,
    objective,
    sparsity_penalty,
)
from mpf.mitigator import simplex_lattice


def simplex_points(n, min_size=2, max_size=6):
    """Hypothesis strategy for points on the simplex (some exactly zero)."""
    raw = arrays(np.float64, n, elements=st.floats(0, 1, allow_nan=False))
    return raw.filter(lambda a: a.sum() > 1e-3).map(lambda a: a / a.sum())


def histograms(bins):
    return simplex_points(bins).map(lambda m: FeatureHistogram(np.linspace(0, 1, bins + 1), m))


# composition


def test_compose_identity():
    out = compose_histogram(Weights([1.0, 0.0]), [hist(0.3, 0.7), hist(0.9, 0.1)])
    np.testing.assert_allclose(out.masses, [0.3, 0.7])


def test_compose_half_half():
    out = compose_histogram(Weights([0.5, 0.5]), [hist(1, 0), hist(0, 1)])
    np.testing.assert_allclose(out.masses, [0.5, 0.5])


def test_compose_identical_components():
    h = hist(0.2, 0.5, 0.3)
    out = compose_histogram(Weights([0.1, 0.6, 0.3]), [h, h, h])
    np.testing.assert_allclose(out.masses, h.masses, atol=1e-15)


def test_compose_errors():
    with pytest.raises(ValidationError):
        compose_histogram(Weights([0.5, 0.5]), [hist(1, 0), hist(0, 0, 1)])
    with pytest.raises(ValidationError):
        compose_histogram(Weights([0.5, 0.5]), [hist(1, 0), hist(0, 1, edges=[0, 0.4, 1])])
    with pytest.raises(ValidationError):
        compose_histogram(Weights([0.2, 0.3, 0.5]), [hist(1, 0), hist(0, 1)])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5).flatmap(lambda n: st.tuples(simplex_points(n), st.lists(simplex_points(6), min_size=n, max_size=n))))
def test_compose_conserves_mass(case):
    w, comps = case
    out = compose_histogram(Weights(w), [FeatureHistogram(np.linspace(0, 1, 7), c) for c in comps])
    assert abs(out.masses.sum() - 1.0) <= 1e-9
    assert np.all(out.masses >= 0)


# KL


def test_kl_identity():
    assert kl_divergence(hist(0.25, 0.75), hist(0.25, 0.75)) == 0.0


def test_kl_hand_value():
    # independent route: scipy's relative entropy, natural log, no smoothing
    oracle = entropy([0.5, 0.5], [0.25, 0.75])
    assert oracle == pytest.approx(0.14384, abs=1e-4)
    value = kl_divergence(hist(0.5, 0.5), hist(0.25, 0.75))
    assert value == pytest.approx(0.14384, abs=1e-4)
    assert abs(value - oracle) < 1e-6


def test_kl_disjoint_support_is_finite():
    eps = 1e-9
    value = kl_divergence(hist(1, 0), hist(0, 1), smoothing_epsilon=eps)
    assert math.isfinite(value)
    assert 0.9 * math.log(1 / eps) < value <= math.log(1 / eps) * 1.01


def test_kl_mismatched_bins():
    with pytest.raises(ValidationError):
        kl_divergence(hist(0.5, 0.5), hist(0.2, 0.3, 0.5))


@settings(max_examples=100, deadline=None)
@given(histograms(10))
def test_kl_self_is_zero(p):
    assert abs(kl_divergence(p, p)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(histograms(8), histograms(8))
def test_gibbs_inequality(p, q):
    assert kl_divergence(p, q) >= -1e-12


# calibration


def scores_2x2(baseline):
    return FeatureScores("c", ["a", "b"], [[0.8, 0.6], [0.2, 0.4]], baseline)


def test_calibration_examples():
    assert calibration_error(Weights([0.5, 0.5]), scores_2x2([0.5, 0.5])) == pytest.approx(0.0, abs=1e-12)
    assert calibration_error(Weights([0.5, 0.5]), scores_2x2([0.6, 0.4])) == pytest.approx(0.1, abs=1e-12)
    single = FeatureScores("c", ["a", "b"], [[0.3, 0.9]], [0.3, 0.9])
    assert calibration_error(Weights([1.0]), single) == 0.0


def test_calibration_dimension_mismatch():
    with pytest.raises(ValidationError):
        calibration_error(Weights([0.2, 0.3, 0.5]), scores_2x2([0.5, 0.5]))


@settings(max_examples=100, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.integers(2, 5),
    st.floats(0, 1),
)
def test_calibration_convex(seed, n, t):
    rng = np.random.default_rng(seed)
    d = 7
    fs = FeatureScores("c", [str(i) for i in range(d)], rng.random((n, d)), rng.random(d))
    w1, w2 = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
    mid = Weights(np.clip(t * w1 + (1 - t) * w2, 0, 1) / np.clip(t * w1 + (1 - t) * w2, 0, 1).sum())
    lhs = calibration_error(mid, fs)
    rhs = t * calibration_error(Weights(w1 / w1.sum()), fs) + (1 - t) * calibration_error(Weights(w2 / w2.sum()), fs)
    assert lhs <= rhs + 1e-9


# regularizers


@pytest.mark.parametrize("n", [2, 3, 5, 9])
def test_l2_zero_at_uniform(n):
    assert l2_regularizer(Weights.uniform(n)) == pytest.approx(0.0, abs=1e-30)


def test_l2_examples():
    assert l2_regularizer(Weights([1.0, 0.0])) == pytest.approx(0.5, abs=1e-12)
    assert l2_regularizer(Weights.one_hot(5, 0)) == pytest.approx(0.8, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6).flatmap(simplex_points))
def test_l2_minimized_at_uniform(w):
    assert l2_regularizer(Weights(w)) >= l2_regularizer(Weights.uniform(w.size)) - 1e-15


def test_sparsity_examples():
    assert sparsity_penalty(Weights.one_hot(5, 3)) == pytest.approx(0.2, abs=1e-12)
    assert sparsity_penalty(Weights.uniform(5)) == pytest.approx(1.8, abs=1e-12)
    assert sparsity_penalty(Weights([0.5, 0.5, 0, 0, 0])) == pytest.approx(0.9, abs=1e-12)


def test_sparsity_threshold():
    # entries at or below nonzero_epsilon do not count as active
    assert sparsity_penalty(Weights([0.999, 0.001]), nonzero_epsilon=1e-3) == pytest.approx(0.5 + 0.001)
    assert sparsity_penalty(Weights([0.998, 0.002]), nonzero_epsilon=1e-3) == pytest.approx(1.0 + 0.002)


@pytest.mark.parametrize("n,step", [(2, 0.01), (3, 0.02), (4, 0.05)])
def test_sparsity_minimum_at_vertices(n, step):
    pts = simplex_lattice(n, step)
    values = np.array([sparsity_penalty(Weights(p)) for p in pts])
    assert values.min() == pytest.approx(1.0 / n, abs=1e-12)
    winners = pts[values <= values.min() + 1e-12]
    assert len(winners) == n
    assert np.all(winners.max(axis=1) == 1.0)


# objective


def test_objective_identity_cases():
    h = hist(0.2, 0.8)
    fs = scores_2x2([0.5, 0.5])
    hp = HyperParams(alpha=0, beta=0, lambda_kl=1, lambda_cal=0)
    assert objective(Weights([0.5, 0.5]), [h, h], h, fs, hp).total == pytest.approx(0.0, abs=1e-12)
    hp = HyperParams(alpha=1, beta=0, lambda_kl=0, lambda_cal=0)
    assert objective(Weights.uniform(2), [hist(1, 0), hist(0, 1)], h, fs, hp).total == 0.0


def test_objective_recombination_example():
    comps = [hist(1, 0), hist(0, 1)]
    target = hist(0.25, 0.75)
    w = Weights([0.5, 0.5])
    fs = scores_2x2([0.6, 0.4])
    out = objective(w, comps, target, fs, HyperParams())
    kl = entropy([0.5, 0.5], [0.25, 0.75])
    expected = 0.2 * kl + 0.8 * 0.1 + 1.0 * (2 / 2 + 1 - 0.5)
    assert out.total == pytest.approx(expected, abs=1e-6)
    assert out.total == pytest.approx(0.2 * out.kl + 0.8 * out.calibration + out.sparsity, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.integers(2, 5),
    st.tuples(*[st.floats(0, 5) for _ in range(4)]).filter(lambda t: sum(t) > 0),
)
def test_objective_recombination_identity(seed, n, strengths):
    a, b, lk, lc = strengths
    rng = np.random.default_rng(seed)
    edges = np.linspace(0, 1, 11)
    comps = [FeatureHistogram(edges, rng.dirichlet(np.ones(10))) for _ in range(n)]
    target = FeatureHistogram(edges, rng.dirichlet(np.ones(10)))
    fs = FeatureScores("c", [str(i) for i in range(6)], rng.random((n, 6)), rng.random(6))
    hp = HyperParams(alpha=a, beta=b, lambda_kl=lk, lambda_cal=lc)
    w = Weights(rng.dirichlet(np.ones(n)))
    br = objective(w, comps, target, fs, hp)
    assert br.total == pytest.approx(lk * br.kl + lc * br.calibration + a * br.l2 + b * br.sparsity, abs=1e-9)
    # the batched evaluator agrees with the scalar one
    batched = ArrayObjective.from_domain(comps, target, fs, hp).total(w.values)
    assert float(batched) == pytest.approx(br.total, abs=1e-12)
