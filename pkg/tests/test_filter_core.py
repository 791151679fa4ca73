from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from elasticpf.errors import (DegenerateEnsembleError, InvalidEnsembleError, NumericError,
                              ShapeError)
from elasticpf.filtering import (NoiseSpec, ResampleMultiset, accumulate_weight,
                                 effective_sample_size, init_weights, likelihood, normalize,
                                 resample)

weight_vectors = st.lists(st.floats(0.0, 1e6, allow_nan=False), min_size=1, max_size=64).filter(
    lambda w: sum(w) > 0)


class TestInitWeights:
    def test_small(self):
        assert init_weights(4).tolist() == [0.25] * 4
        assert init_weights(1).tolist() == [1.0]

    def test_large_ensemble_sums_to_one(self):
        w = init_weights(2555)
        assert np.all(w == 1 / 2555)
        assert abs(math.fsum(w) - 1.0) < 1e-12

    def test_zero_rejected(self):
        with pytest.raises(InvalidEnsembleError):
            init_weights(0)


class TestLikelihood:
    def test_zero_residual(self):
        assert likelihood([1.5, -2.0], [1.5, -2.0], NoiseSpec(0.7)) == 1.0

    def test_one_sigma(self):
        assert likelihood([0.0], [0.5], NoiseSpec(0.5)) == pytest.approx(math.exp(-0.5))

    def test_only_scaled_residual_matters(self):
        assert likelihood([0.0, 0.0], [2.0, 0.0], NoiseSpec(2.0)) == pytest.approx(0.60653, abs=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            likelihood([0.0], [0.0, 1.0], NoiseSpec(1.0))

    def test_non_finite(self):
        with pytest.raises(NumericError):
            likelihood([np.nan], [0.0], NoiseSpec(1.0))

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            NoiseSpec(0.0)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(0.01, 100))
    def test_bounded(self, r, sigma):
        like = likelihood(np.zeros(len(r)), r, NoiseSpec(sigma))
        assert 0.0 <= like <= 1.0


class TestAccumulate:
    def test_examples(self):
        assert accumulate_weight(0.25, 0.0) == 0.0
        assert accumulate_weight(0.25, 0.5) == 0.125
        assert accumulate_weight(0.25, math.exp(-0.5)) == pytest.approx(0.15163, abs=1e-5)

    def test_overflow(self):
        with pytest.raises(NumericError):
            accumulate_weight(1e308, 1e10)

    def test_negative(self):
        with pytest.raises(NumericError):
            accumulate_weight(-1.0, 0.5)


class TestNormalize:
    def test_examples(self):
        assert normalize([1, 1, 1, 1]).tolist() == [0.25] * 4
        assert normalize([2, 6]).tolist() == [0.25, 0.75]

    def test_all_zero_is_degenerate(self):
        with pytest.raises(DegenerateEnsembleError):
            normalize([0, 0, 0])

    @given(weight_vectors)
    def test_sums_to_one(self, w):
        n = normalize(w)
        assert abs(math.fsum(n) - 1.0) < 1e-12
        assert np.all(n >= 0)

    @given(weight_vectors, st.floats(1e-3, 1e3))
    def test_scale_invariant(self, w, c):
        # scaling subnormal weights loses precision, so keep clear of that range
        assume(all(x == 0 or min(x, c * x) >= 1e-290 for x in w))
        np.testing.assert_allclose(normalize(w), normalize([c * x for x in w]), rtol=1e-9,
                                   atol=1e-15)


class TestResample:
    def test_degenerate_weights(self):
        for seed in range(20):
            m = resample([1, 0, 0, 0], seed)
            assert m.parents == (0,) and m.counts == (4,)

    def test_uniform_valid(self):
        m = resample(init_weights(4), 123)
        m.validate(4)

    def test_unnormalized_rejected(self):
        with pytest.raises(InvalidEnsembleError):
            resample([1.0, 2.0], 0)

    def test_monte_carlo_mean(self):
        w = np.array([0.5, 0.3, 0.2])
        acc = np.zeros(3)
        for seed in range(10_000):
            m = resample(w, seed)
            for p, c in zip(m.parents, m.counts):
                acc[p] += c
        np.testing.assert_allclose(acc / 10_000, [1.5, 0.9, 0.6], atol=0.05)

    @given(weight_vectors, st.integers(0, 2**64 - 1))
    def test_multiset_invariants(self, w, seed):
        n = normalize(w)
        m = resample(n, seed)
        m.validate(len(w))
        assert list(m.parents) == sorted(m.parents)
        assert all(n[p] > 0 for p in m.parents)
        assert resample(n, seed) == m

    def test_multiset_validation(self):
        from elasticpf.errors import InvalidMultisetError
        with pytest.raises(InvalidMultisetError):
            ResampleMultiset((0, 1), (2, 1)).validate(4)
        with pytest.raises(InvalidMultisetError):
            ResampleMultiset((0, 0), (2, 2)).validate(4)
        with pytest.raises(InvalidMultisetError):
            ResampleMultiset((0, 5), (2, 2)).validate(4)
        ResampleMultiset.identity(5).validate(5)


class TestESS:
    def test_examples(self):
        assert effective_sample_size(init_weights(4)) == pytest.approx(4.0)
        assert effective_sample_size([1, 0, 0, 0]) == 1.0
        assert effective_sample_size([0.25, 0.75]) == pytest.approx(1.6)

    @given(weight_vectors)
    def test_range(self, w):
        ess = effective_sample_size(normalize(w))
        assert 1.0 - 1e-9 <= ess <= len(w) + 1e-9
