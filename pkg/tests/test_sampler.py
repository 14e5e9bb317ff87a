"""
Sampler Tests
=============

Consistency sampling, Heun sampling, inversion round trips and class edits,
mostly against the analytic oracle.

Run with: pytest tests/test_sampler.py -v
"""
import os
import sys

import numpy as np
import pytest
from pydantic import ValidationError

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from metrics import edit_preservation
from oracle import sample_batch
from precondition import denoiser_coeffs
from sampler import (
    CFGModel,
    OracleModel,
    SampleRequest,
    cm_sample,
    ddim_generate,
    ddim_invert,
    edit,
    heun_sample,
    latent_noise,
    round_trip,
)


# =============================================================================
# REQUESTS / NOISE
# =============================================================================

class TestSampleRequest:

    def test_consistency_models_take_one_or_two_steps(self):
        SampleRequest(model_kind="igct-denoiser", class_id=0, nfe=2)
        with pytest.raises(ValidationError):
            SampleRequest(model_kind="igct-denoiser", class_id=0, nfe=3)
        with pytest.raises(ValidationError):
            SampleRequest(model_kind="guided-cd", class_id=0, nfe=4)

    def test_ode_samplers_take_any_step_count(self):
        assert SampleRequest(model_kind="cfg-edm", class_id=1, nfe=18).nfe == 18

    def test_negative_class_rejected(self):
        with pytest.raises(ValidationError):
            SampleRequest(model_kind="oracle", class_id=-1)


class TestLatentNoise:

    def test_prefix_is_stable(self):
        assert np.array_equal(latent_noise(3, 0, 10, 2)[:4], latent_noise(3, 0, 4, 2))

    def test_streams_differ(self):
        assert not np.array_equal(latent_noise(3, 0, 5, 1), latent_noise(3, 1, 5, 1))


# =============================================================================
# GENERATION
# =============================================================================

class TestConsistencySampling:

    def test_zero_init_denoiser_scales_latent(self, make_denoiser, schedule):
        request = SampleRequest(model_kind="igct-denoiser", class_id=1, w=5.0, nfe=1, count=20, seed=2)
        x = cm_sample(make_denoiser(zero_init_output=True), request, schedule)
        c_skip = denoiser_coeffs(schedule.t_max, schedule.sigma, schedule.t_min).c_skip
        expected = c_skip * schedule.t_max * latent_noise(2, 0, 20, 1)
        assert np.allclose(x, expected, rtol=1e-12)

    @pytest.mark.parametrize("nfe", [1, 2])
    def test_network_calls_equal_nfe(self, make_denoiser, schedule, nfe):
        denoiser = make_denoiser()
        cm_sample(denoiser, SampleRequest(model_kind="igct-denoiser", class_id=0, nfe=nfe, count=8), schedule)
        assert denoiser.calls == nfe

    def test_unknown_class(self, make_denoiser, schedule):
        with pytest.raises(ValueError):
            cm_sample(make_denoiser(), SampleRequest(model_kind="igct-denoiser", class_id=5, count=4), schedule)

    def test_same_seed_same_samples(self, make_denoiser, schedule):
        denoiser = make_denoiser()
        request = SampleRequest(model_kind="igct-denoiser", class_id=0, w=3.0, nfe=2, count=16, seed=9)
        assert np.array_equal(cm_sample(denoiser, request, schedule), cm_sample(denoiser, request, schedule))


class TestHeunSampling:

    def test_oracle_calls_twice_per_step(self, world, schedule):
        model = OracleModel(world)
        request = SampleRequest(model_kind="oracle", class_id=1, nfe=10, count=50)
        x, trajectory = heun_sample(model, request, schedule, world.dims, record=True)
        assert model.calls == 20
        assert x.shape == (50, 1)
        assert len(trajectory) == 11

    def test_oracle_samples_land_on_class_mode(self, world, schedule):
        request = SampleRequest(model_kind="oracle", class_id=0, nfe=64, count=2000)
        x, _ = heun_sample(OracleModel(world), request, schedule, world.dims)
        assert abs(x.mean() + 2.0) < 0.03

    def test_cfg_model_skips_unconditional_at_w_one(self, make_denoiser, rng):
        model = CFGModel(make_denoiser(with_guidance=False))
        x = rng.standard_normal((4, 1))
        model(x, 2.0, 1, 1.0)
        assert model.calls == 1
        model(x, 2.0, 1, 3.0)
        assert model.calls == 3

    def test_cfg_model_combination(self, make_denoiser, rng):
        denoiser = make_denoiser(with_guidance=False)
        model = CFGModel(denoiser)
        x = rng.standard_normal((4, 1))
        cond, uncond = denoiser(x, 2.0, 1), denoiser(x, 2.0, -1)
        assert np.allclose(model(x, 2.0, 1, 4.0), 4.0 * cond - 3.0 * uncond)


# =============================================================================
# INVERSION
# =============================================================================

class TestInversion:

    def test_ddim_oracle_round_trip(self, world, schedule, rng):
        x0, _ = sample_batch(rng, world, 200, classes=1)
        latent, recon = round_trip("ddim", x0, 1, schedule, model=OracleModel(world), n_steps=512)
        assert latent.shape == x0.shape
        assert np.max(np.abs(recon - x0)) < 1e-3 * world.sigma_data

    def test_coarse_grid_inverts_worse(self, world, schedule, rng):
        x0, _ = sample_batch(rng, world, 200, classes=1)
        errors = {}
        for n_steps in (18, 512):
            _, recon = round_trip("ddim", x0, 1, schedule, model=OracleModel(world), n_steps=n_steps)
            errors[n_steps] = np.mean(np.abs(recon - x0))
        assert errors[18] > errors[512]

    def test_generate_then_invert_recovers_latent(self, world, schedule):
        model = OracleModel(world)
        latent = schedule.t_max * latent_noise(0, 0, 200, 1)
        x = ddim_generate(model, latent, 1, 1.0, schedule, 512)
        assert np.max(np.abs(ddim_invert(model, x, 1, schedule, 512) - latent)) < 1e-3 * schedule.t_max

    def test_igct_round_trip_uses_both_networks(self, make_denoiser, make_noiser, schedule, rng):
        denoiser, noiser = make_denoiser(), make_noiser()
        latent, recon = round_trip("igct", rng.standard_normal((6, 1)), 0, schedule, denoiser=denoiser,
                                   noiser=noiser)
        assert latent.shape == recon.shape == (6, 1)
        assert denoiser.calls == 1 and noiser.calls == 1

    def test_unknown_method(self, schedule, rng):
        with pytest.raises(ValueError):
            round_trip("ode", rng.standard_normal((2, 1)), 0, schedule)


# =============================================================================
# EDITING
# =============================================================================

class TestEditing:

    def test_igct_edit_is_two_evaluations(self, make_denoiser, make_noiser, schedule, rng):
        denoiser, noiser = make_denoiser(), make_noiser()
        out = edit("igct", rng.standard_normal((32, 1)), 0, 1, 5.0, schedule, 2, denoiser=denoiser, noiser=noiser)
        assert out.shape == (32, 1)
        assert denoiser.calls + noiser.calls == 2

    def test_igct_edit_needs_both_networks(self, make_denoiser, schedule, rng):
        with pytest.raises(ValueError):
            edit("igct", rng.standard_normal((2, 1)), 0, 1, 1.0, schedule, 2, denoiser=make_denoiser())

    def test_unknown_target_class(self, make_denoiser, make_noiser, schedule, rng):
        with pytest.raises(ValueError):
            edit("igct", rng.standard_normal((2, 1)), 0, 7, 1.0, schedule, 2, denoiser=make_denoiser(),
                 noiser=make_noiser())

    def test_oracle_ddim_edit_moves_to_target_and_keeps_offsets(self, world, schedule, rng):
        x_src, _ = sample_batch(rng, world, 500, classes=0)
        x_edit = edit("ddim", x_src, 0, 1, 1.0, schedule, 2, model=OracleModel(world), n_steps=128)
        assert np.mean(x_edit[:, 0] > 0) >= 0.95
        assert edit_preservation(x_src, np.zeros(500), x_edit, np.ones(500), world) > 0.9
