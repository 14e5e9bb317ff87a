"""
Preconditioning Tests
=====================

Boundary identities, unit-variance scalings and the input gradient of the
wrapped networks.

Run with: pytest tests/test_precondition.py -v
"""
import asyncio
import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from oracle import sample_batch
from precondition import denoiser_coeffs, noiser_coeffs


# =============================================================================
# COEFFICIENTS
# =============================================================================

class TestDenoiserCoeffs:

    def test_boundary_at_t_min(self, schedule):
        c = denoiser_coeffs(schedule.t_min, schedule.sigma, schedule.t_min)
        assert c.c_skip == 1.0
        assert c.c_out == 0.0

    def test_formulas(self):
        c = denoiser_coeffs(1.0, 0.5, 0.002)
        assert c.c_skip == pytest.approx(0.25 / (0.998 ** 2 + 0.25))
        assert c.c_out == pytest.approx(0.5 * 0.998 / math.sqrt(1.25))
        assert c.c_in == pytest.approx(1.0 / math.sqrt(1.25))
        assert c.c_noise == pytest.approx(0.0)

    def test_below_t_min_rejected(self, schedule):
        with pytest.raises(ValueError):
            denoiser_coeffs(schedule.t_min / 2, schedule.sigma, schedule.t_min)

    def test_vectorized(self, schedule):
        c = denoiser_coeffs(np.array([schedule.t_min, 1.0, 80.0]), schedule.sigma, schedule.t_min)
        assert c.c_skip.shape == (3,)
        assert c.c_skip[0] == 1.0


class TestNoiserCoeffs:

    def test_boundary_at_t_max(self, schedule):
        c = noiser_coeffs(schedule.t_max, schedule.sigma, schedule.t_max)
        assert c.c_skip == 1.0
        assert c.c_out == 0.0

    def test_zero_level_allowed_for_inspection(self, schedule):
        c = noiser_coeffs(0.0, schedule.sigma, schedule.t_max)
        assert c.c_out == schedule.t_max
        assert c.c_noise == -math.inf

    def test_out_of_range_rejected(self, schedule):
        with pytest.raises(ValueError):
            noiser_coeffs(schedule.t_max + 1.0, schedule.sigma, schedule.t_max)
        with pytest.raises(ValueError):
            noiser_coeffs(-0.1, schedule.sigma, schedule.t_max)


# =============================================================================
# BOUNDARY IDENTITIES
# =============================================================================

class TestBoundaryIdentities:
    """Exact to the last bit, with a non-zero network output layer"""

    def test_denoiser_identity_at_t_min(self, make_denoiser, schedule, rng):
        denoiser = make_denoiser(seed=3)
        x = rng.standard_normal((1000, 1)) * 5.0
        classes = rng.integers(-1, 2, size=1000)
        w = rng.uniform(1.0, 15.0, size=1000)
        assert np.array_equal(denoiser(x, schedule.t_min, classes, w), x)

    def test_noiser_identity_at_t_max(self, make_noiser, schedule, rng):
        noiser = make_noiser(seed=4)
        x = rng.standard_normal((1000, 1)) * 80.0
        classes = rng.integers(0, 2, size=1000)
        assert np.array_equal(noiser(x, schedule.t_max, classes), x)

    def test_zero_init_is_skip_path(self, make_denoiser, schedule, rng):
        denoiser = make_denoiser(zero_init_output=True)
        x = rng.standard_normal((10, 1))
        c = denoiser_coeffs(5.0, schedule.sigma, schedule.t_min)
        assert np.allclose(denoiser(x, 5.0, 1, 3.0), c.c_skip * x, rtol=0, atol=1e-15)


# =============================================================================
# UNIT VARIANCE
# =============================================================================

class TestUnitVariance:
    """Monte Carlo variance checks on the two-mode world"""

    @pytest.mark.parametrize("t", [0.01, 1.0, 10.0, 79.0])
    def test_denoiser_input_has_unit_variance(self, world, schedule, rng, t):
        x0, _ = sample_batch(rng, world, 10 ** 6)
        z = rng.standard_normal(x0.shape)
        c = denoiser_coeffs(t, schedule.sigma, schedule.t_min)
        assert np.var(c.c_in * (x0 + t * z)) == pytest.approx(1.0, rel=0.02)

    @pytest.mark.parametrize("t", [0.01, 1.0, 10.0, 79.0])
    def test_noiser_effective_target_has_unit_variance(self, world, schedule, rng, t):
        x0, _ = sample_batch(rng, world, 10 ** 6)
        z = rng.standard_normal(x0.shape)
        c = noiser_coeffs(t, schedule.sigma, schedule.t_max)
        x_t = x0 + t * z
        x_end = x0 + schedule.t_max * z
        assert np.var((x_end - c.c_skip * x_t) / c.c_out) == pytest.approx(1.0, rel=0.02)


# =============================================================================
# WRAPPED NETWORKS
# =============================================================================

class TestPreconditionedNet:

    def test_input_gradient_matches_finite_differences(self, make_denoiser, rng):
        denoiser = make_denoiser(seed=5)
        x = rng.standard_normal((6, 1)) * 2.0
        t = np.array([0.01, 0.3, 1.0, 4.0, 12.0, 60.0])
        classes = np.array([0, 1, -1, 0, 1, -1])
        w = np.array([1.0, 2.0, 5.0, 7.0, 11.0, 15.0])
        upstream = rng.standard_normal((6, 1))

        _, tape = denoiser.forward(x, t, classes, w)
        _, dx = denoiser.backward(tape, upstream)

        h = 1e-5
        numeric = np.zeros_like(x)
        for i in range(x.shape[0]):
            plus, minus = x.copy(), x.copy()
            plus[i, 0] += h
            minus[i, 0] -= h
            numeric[i, 0] = (np.sum(upstream * denoiser(plus, t, classes, w))
                             - np.sum(upstream * denoiser(minus, t, classes, w))) / (2 * h)
        np.testing.assert_allclose(dx, numeric, rtol=1e-4, atol=1e-9)

    def test_stop_gradient_call_matches_forward(self, make_denoiser, rng):
        denoiser = make_denoiser(seed=6)
        x = rng.standard_normal((8, 1))
        out, _ = denoiser.forward(x, 2.0, 1, 4.0)
        assert np.array_equal(denoiser(x, 2.0, 1, 4.0), out)

    def test_calls_counter(self, make_denoiser, make_noiser, rng):
        denoiser, noiser = make_denoiser(), make_noiser()
        x = rng.standard_normal((4, 1))
        denoiser(x, 1.0, 0, 2.0)
        denoiser.forward(x, 1.0, 0, 2.0)
        noiser(x, 1.0, 0)
        assert denoiser.calls == 2
        assert noiser.calls == 1

    @pytest.mark.asyncio
    async def test_calls_counted_across_worker_threads(self, make_denoiser, rng):
        denoiser = make_denoiser()
        x = rng.standard_normal((4, 1))

        def evaluate_many():
            for _ in range(200):
                denoiser(x, 1.0, 0, 2.0)

        await asyncio.gather(*[asyncio.to_thread(evaluate_many) for _ in range(8)])
        assert denoiser.calls == 8 * 200

    def test_noiser_ignores_guidance(self, make_noiser, rng):
        noiser = make_noiser()
        x = rng.standard_normal((4, 1))
        assert np.array_equal(noiser(x, 1.0, 0, 13.0), noiser(x, 1.0, 0))
