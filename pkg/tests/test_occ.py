import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from rads.errors import ConfigError, InsufficientDataError
from rads.occ import (
    EPSILON,
    OccLabel,
    combine_log_density,
    fit_class_probability,
    fit_occ,
    fit_reference,
    occ_classify,
    occ_log_score,
    occ_score,
    sample_artificial,
    train_occ,
)
from rads.wtsa import FeatureMode, build_training_set


def cluster(rng, center, scale, n):
    return rng.normal(center, scale, size=(n, len(center)))


def oracle_density(model, x):
    """P(X|C) as the literal three-factor product, computed in linear space."""

    def class_density(components):
        return sum(
            c.weight * np.prod(stats.norm.pdf(x, loc=c.mean, scale=np.sqrt(c.variance)))
            for c in components
        )

    prior = model.target_prior
    target = prior * class_density(model.estimator.target)
    artificial = (1 - prior) * class_density(model.estimator.artificial)
    p = target / (target + artificial)
    reference = stats.multivariate_normal(model.reference.mean, model.reference.covariance).pdf(x)
    return ((1 - prior) / prior) * (p / (1 - p)) * reference


def test_occ_score_matches_the_three_factor_product():
    cases = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        positives = cluster(rng, [0.4, 0.4], 0.1, 60)
        model = fit_occ(positives, spike_positives=np.ones((60, 2)), seed=seed)
        for x in cluster(rng, [0.4, 0.4], 0.15, 100):
            expected = math.log(oracle_density(model, x))
            assert occ_log_score(model, x) == pytest.approx(expected, rel=1e-9, abs=1e-9)
            cases += 1
    assert cases == 1000


def test_occ_score_is_the_exponent_of_the_log_score():
    rng = np.random.default_rng(3)
    model = fit_occ(cluster(rng, [0.5], 0.1, 50), seed=3)
    assert occ_score(model, [0.5]) == pytest.approx(math.exp(occ_log_score(model, [0.5])))


def test_combine_log_density_at_even_odds_is_the_reference_density():
    assert combine_log_density(0.5, 0.5, -3.25) == pytest.approx(-3.25)


def test_one_dimensional_separable_accuracy():
    rng = np.random.default_rng(11)
    model = fit_occ(rng.normal(0, 1, 500), seed=0)
    normal = rng.normal(0, 1, 500)
    shifted = rng.normal(6, 1, 500)

    correct = sum(occ_classify(model, [x]) is OccLabel.POSITIVE for x in normal)
    correct += sum(occ_classify(model, [x]) is OccLabel.NEGATIVE for x in shifted)
    assert correct / 1000 >= 0.95


def test_high_average_low_spread_is_negative_and_spike_point_is_positive():
    for draw in range(100):
        rng = np.random.default_rng(draw)
        real = np.clip(cluster(rng, [0.3, 0.2], 0.05, 60), 0.0, None)
        model = fit_occ(real, spike_positives=np.ones((60, 2)), seed=draw)
        max_sd = real[:, 1].max()

        points = np.column_stack([rng.uniform(1.0 + 1e-6, 3.0, 20), rng.uniform(0.0, max_sd, 20)])
        assert all(occ_classify(model, p) is OccLabel.NEGATIVE for p in points), draw
        assert occ_classify(model, [1.0, 1.0]) is OccLabel.POSITIVE, draw


def test_training_windows_are_accepted(noisy_cpu):
    matrix = build_training_set(noisy_cpu, FeatureMode.AVG_SD, 60.0)
    model = train_occ(matrix, seed=0)
    accepted = sum(occ_classify(model, row) is OccLabel.POSITIVE for row in matrix.real)
    assert accepted / len(matrix.real) >= 0.95
    assert model.mode is FeatureMode.AVG_SD
    assert model.bounds == matrix.bounds


def test_fit_reference_floors_the_covariance():
    density = fit_reference([[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]])
    assert np.all(np.diag(density.covariance) >= EPSILON)
    with pytest.raises(InsufficientDataError):
        fit_reference([[0.5, 0.5]])


def test_sample_artificial_is_seeded():
    density = fit_reference([[0.1, 0.2], [0.3, 0.1], [0.2, 0.4]])
    first = sample_artificial(density, 25, seed=4)
    assert first.shape == (25, 2)
    np.testing.assert_array_equal(first, sample_artificial(density, 25, seed=4))
    assert not np.array_equal(first, sample_artificial(density, 25, seed=5))
    with pytest.raises(ConfigError):
        sample_artificial(density, 0, seed=4)


def test_class_probability_prior_is_the_class_proportion():
    rng = np.random.default_rng(0)
    estimator = fit_class_probability(rng.normal(0, 1, (30, 1)), rng.normal(0, 5, (90, 1)))
    assert estimator.target_prior == pytest.approx(0.25)
    probabilities = estimator.target_probability(np.linspace(-20, 20, 41)[:, None])
    assert np.all((probabilities > 0) & (probabilities < 1))


def test_class_probability_needs_both_classes():
    with pytest.raises(InsufficientDataError):
        fit_class_probability(np.empty((0, 1)), [[1.0]])


def test_same_seed_same_model(noisy_cpu):
    matrix = build_training_set(noisy_cpu, FeatureMode.AVG_SD, 60.0)
    first, second = train_occ(matrix, seed=9), train_occ(matrix, seed=9)
    assert first.to_dict() == second.to_dict()


def test_fit_reference_recovers_the_mean_of_many_draws():
    rng = np.random.default_rng(21)
    density = fit_reference(rng.normal([0.3, 0.6], 0.1, size=(10_000, 2)))
    np.testing.assert_allclose(density.mean, [0.3, 0.6], atol=0.05)
    np.testing.assert_allclose(np.diag(density.covariance), [0.01, 0.01], atol=0.002)


def test_artificial_draws_average_to_the_reference_mean():
    density = fit_reference([[0.1, 0.2], [0.3, 0.1], [0.2, 0.4], [0.4, 0.3]])
    draws = sample_artificial(density, 10_000, seed=8)
    np.testing.assert_allclose(draws.mean(axis=0), density.mean, atol=0.05)


def test_swapping_the_classes_mirrors_the_probability():
    rng = np.random.default_rng(4)
    a, b = rng.normal(0, 1, (40, 1)), rng.normal(2, 1.5, (40, 1))
    points = np.linspace(-4, 6, 21)[:, None]

    forward = fit_class_probability(a, b).target_probability(points)
    backward = fit_class_probability(b, a).target_probability(points)
    np.testing.assert_allclose(forward + backward, 1.0, atol=1e-9)


def test_indistinguishable_classes_give_even_odds():
    data = np.random.default_rng(6).normal(0.5, 0.2, (30, 2))
    estimator = fit_class_probability(data, data.copy())
    np.testing.assert_allclose(estimator.target_probability(np.random.default_rng(7).uniform(0, 1, (10, 2))), 0.5)


@given(
    st.floats(0.001, 0.999),
    st.floats(0.001, 0.999),
    st.floats(0.05, 0.95),
    st.floats(-20, 5),
)
def test_score_rises_with_the_target_probability(p, q, prior, reference):
    low, high = min(p, q), max(p, q)
    assert combine_log_density(low, prior, reference) <= combine_log_density(high, prior, reference)
    if high - low > 1e-6:
        assert combine_log_density(low, prior, reference) < combine_log_density(high, prior, reference)
