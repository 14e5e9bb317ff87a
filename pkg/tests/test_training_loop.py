"""
Training Loop Tests
===================

Small end-to-end runs of iGCT and both baselines: determinism, exact resume,
the noiser ablation, the reconstruction cadence and the divergence guard.

Run with: pytest tests/test_training_loop.py -v
"""
import json
import os
import shutil
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import training_loop
from config import lr_at, parse_run_config
from errors import ConfigError, DivergenceError, ERROR_LOG_NAME
from losses import LossResult, loss_gct
from persistence import load_checkpoint, read_csv
from training_loop import (
    FINAL_CHECKPOINT_NAME,
    LAST_GOOD_CHECKPOINT_NAME,
    RUN_RECORD_NAME,
    TrainingLoop,
    checkpoint_name,
    run_cfg_edm,
    run_guided_cd,
    run_igct,
    run_training,
    spawn_streams,
)

pytestmark = pytest.mark.integration


def record_column(path, column: str):
    header, rows = read_csv(path)
    idx = header.index(column)
    return [float(r[idx]) for r in rows]


# =============================================================================
# SETUP
# =============================================================================

class TestSetup:

    def test_streams_are_independent(self):
        streams = spawn_streams(0, 'igct')
        assert sorted(streams) == ['eval', 'gct', 'ict', 'init', 'recon']
        assert streams['gct'].random() != streams['ict'].random()

    def test_unknown_algorithm(self, small_run, tmp_path):
        with pytest.raises(ConfigError):
            TrainingLoop(small_run, 'ddpm', tmp_path)

    def test_stop_iteration_capped_by_halvings(self, small_run_dict, tmp_path):
        cfg = parse_run_config(small_run_dict(train={"max_halvings": 0}))
        assert TrainingLoop(cfg, 'igct', tmp_path).stop_iteration() == 50
        assert TrainingLoop(cfg, 'cfg-edm', tmp_path).stop_iteration() == 60

    def test_stop_iteration_uncapped(self, small_run_dict, tmp_path):
        cfg = parse_run_config(small_run_dict(train={"max_halvings": None}))
        assert TrainingLoop(cfg, 'igct', tmp_path).stop_iteration() == 60

    def test_ablation_has_no_noiser(self, small_run, tmp_path):
        state = TrainingLoop(small_run, 'igct', tmp_path, with_noiser=False).init_state()
        assert state.noiser is None and state.opt_phi is None

    def test_cfg_edm_denoiser_has_no_guidance_input(self, small_run, tmp_path):
        state = TrainingLoop(small_run, 'cfg-edm', tmp_path).init_state()
        assert not state.denoiser.params.arch.with_guidance
        assert state.noiser is None


# =============================================================================
# IGCT RUNS
# =============================================================================

class TestIGCTRun:

    def test_outputs(self, small_run, tmp_path):
        out = tmp_path / "run"
        state = run_igct(small_run, out)
        assert state.k == 60
        for name in (checkpoint_name(30), checkpoint_name(60), FINAL_CHECKPOINT_NAME, RUN_RECORD_NAME):
            assert (out / name).exists()
        header, rows = read_csv(out / RUN_RECORD_NAME)
        assert header == ['k', 'loss_gct', 'loss_ict', 'loss_recon', 'lambda_recon', 'delta_t_stage', 'wall_ms']
        assert [int(r[0]) for r in rows] == list(range(60))
        assert all(float(r[-1]) == 0.0 for r in rows)
        assert load_checkpoint(out / FINAL_CHECKPOINT_NAME)["iteration"] == 60

    def test_losses_finite(self, small_run, tmp_path):
        run_igct(small_run, tmp_path / "run")
        for column in ('loss_gct', 'loss_ict', 'loss_recon'):
            assert np.all(np.isfinite(record_column(tmp_path / "run" / RUN_RECORD_NAME, column)))

    def test_same_seed_is_byte_identical(self, small_run, tmp_path):
        run_igct(small_run, tmp_path / "a")
        run_igct(small_run, tmp_path / "b")
        for name in (RUN_RECORD_NAME, FINAL_CHECKPOINT_NAME):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_resume_matches_uninterrupted_run(self, small_run, tmp_path):
        full = tmp_path / "full"
        run_igct(small_run, full)

        resumed = tmp_path / "resumed"
        resumed.mkdir()
        shutil.copy(full / checkpoint_name(30), resumed / checkpoint_name(30))
        shutil.copy(full / RUN_RECORD_NAME, resumed / RUN_RECORD_NAME)
        state = run_igct(small_run, resumed, resume_from=resumed / checkpoint_name(30))

        assert state.k == 60
        for name in (RUN_RECORD_NAME, FINAL_CHECKPOINT_NAME):
            assert (full / name).read_bytes() == (resumed / name).read_bytes()

    def test_recon_cadence(self, small_run, tmp_path):
        run_igct(small_run, tmp_path / "run")
        values = record_column(tmp_path / "run" / RUN_RECORD_NAME, 'loss_recon')
        for k, value in enumerate(values):
            if k % 3 == 0:
                assert value > 0.0
            else:
                assert value == 0.0

    def test_zero_lambda_never_computes_recon(self, small_run_dict, tmp_path, mocker):
        cfg = parse_run_config(small_run_dict(train={"lambda_recon_schedule": [[None, 0.0]]}))
        spy = mocker.spy(training_loop, 'loss_recon')
        run_igct(cfg, tmp_path / "with_noiser")
        assert spy.call_count == 0

        run_igct(cfg, tmp_path / "ablated", with_noiser=False)
        with_noiser = record_column(tmp_path / "with_noiser" / RUN_RECORD_NAME, 'loss_gct')
        ablated = record_column(tmp_path / "ablated" / RUN_RECORD_NAME, 'loss_gct')
        assert with_noiser == ablated
        assert all(v == 0.0 for v in record_column(tmp_path / "ablated" / RUN_RECORD_NAME, 'loss_ict'))

        denoisers = [load_checkpoint(tmp_path / name / FINAL_CHECKPOINT_NAME)["networks"]["denoiser"]["params"]
                     for name in ("with_noiser", "ablated")]
        assert denoisers[0] == denoisers[1]

    def test_lr_final_anneals_both_optimizers(self, small_run_dict, tmp_path):
        cfg = parse_run_config(small_run_dict(train={"lr_final": 1e-5}))
        run_igct(cfg, tmp_path / "run")
        optimizer = load_checkpoint(tmp_path / "run" / FINAL_CHECKPOINT_NAME)["optimizer"]
        expected = lr_at(59, cfg.train, 60)
        assert optimizer["denoiser"]["lr"] == pytest.approx(expected, rel=1e-12)
        assert optimizer["noiser"]["lr"] == pytest.approx(expected, rel=1e-12)
        assert 1e-5 < expected < 1e-3

    def test_constant_lr_without_lr_final(self, small_run, tmp_path):
        run_igct(small_run, tmp_path / "run")
        optimizer = load_checkpoint(tmp_path / "run" / FINAL_CHECKPOINT_NAME)["optimizer"]
        assert optimizer["denoiser"]["lr"] == 1e-3

    def test_ablated_checkpoint_has_only_denoiser(self, small_run, tmp_path):
        run_igct(small_run, tmp_path / "run", with_noiser=False)
        body = load_checkpoint(tmp_path / "run" / FINAL_CHECKPOINT_NAME)
        assert sorted(body["networks"]) == ['denoiser']

    def test_periodic_evaluation(self, small_run_dict, tmp_path):
        cfg = parse_run_config(small_run_dict(train={"eval_every": 30}))
        state = run_igct(cfg, tmp_path / "run")
        assert [e['k'] for e in state.record.evaluations] == [30, 60]
        assert all(e['n_samples'] == 40 for e in state.record.evaluations)

    def test_wrong_algorithm_resume(self, small_run, tmp_path):
        run_igct(small_run, tmp_path / "run")
        with pytest.raises(ConfigError):
            run_cfg_edm(small_run, tmp_path / "run", resume_from=tmp_path / "run" / FINAL_CHECKPOINT_NAME)

    def test_resume_with_noiser_needs_noiser(self, small_run, tmp_path):
        run_igct(small_run, tmp_path / "run", with_noiser=False)
        with pytest.raises(ConfigError):
            run_igct(small_run, tmp_path / "run", resume_from=tmp_path / "run" / FINAL_CHECKPOINT_NAME)


# =============================================================================
# DIVERGENCE GUARD
# =============================================================================

class TestDivergence:

    def test_nan_loss(self, small_run, tmp_path, mocker):
        def flaky(state, *args, **kwargs):
            result = loss_gct(state, *args, **kwargs)
            if state.k == 5:
                result.value = float('nan')
            return result

        mocker.patch('training_loop.loss_gct', side_effect=flaky)
        out = tmp_path / "run"
        with pytest.raises(DivergenceError) as exc:
            run_igct(small_run, out)
        assert exc.value.exit_code == 3
        assert exc.value.details['k'] == 5

        lines = (out / ERROR_LOG_NAME).read_text().splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0])["error_type"] == "NON_FINITE_LOSS"
        assert load_checkpoint(out / LAST_GOOD_CHECKPOINT_NAME)["iteration"] == 5
        _, rows = read_csv(out / RUN_RECORD_NAME)
        assert len(rows) == 5

    def test_nan_gradient(self, small_run, tmp_path, mocker):
        def poisoned(state, *args, **kwargs):
            result = loss_gct(state, *args, **kwargs)
            result.grads_theta['out.b'][:] = np.nan
            return result

        mocker.patch('training_loop.loss_gct', side_effect=poisoned)
        out = tmp_path / "run"
        with pytest.raises(DivergenceError):
            run_igct(small_run, out)
        record = json.loads((out / ERROR_LOG_NAME).read_text().splitlines()[0])
        assert record["error_type"] == "NON_FINITE_GRADIENT"
        assert "out.b" in record["context"]
        body = load_checkpoint(out / LAST_GOOD_CHECKPOINT_NAME)
        assert body["iteration"] == 0
        assert np.all(np.isfinite(body["networks"]["denoiser"]["params"]["out.b"]["data"]))

    def test_baseline_nan_loss(self, small_run, tmp_path, mocker):
        mocker.patch('training_loop.loss_edm_denoise', return_value=LossResult(value=float('inf')))
        with pytest.raises(DivergenceError):
            run_cfg_edm(small_run, tmp_path / "run")
        assert (tmp_path / "run" / ERROR_LOG_NAME).exists()


# =============================================================================
# BASELINES
# =============================================================================

class TestBaselines:

    def test_cfg_edm_run(self, small_run, tmp_path):
        state = run_cfg_edm(small_run, tmp_path / "run")
        assert state.k == 60
        header, rows = read_csv(tmp_path / "run" / RUN_RECORD_NAME)
        assert header == ['k', 'loss_edm', 'null_fraction', 'wall_ms']
        assert all(0.0 <= float(r[2]) <= 1.0 for r in rows)

    def test_guided_cd_run(self, small_run, tmp_path):
        state = run_guided_cd(small_run, tmp_path / "run")
        assert state.k == 60
        assert np.all(np.isfinite(record_column(tmp_path / "run" / RUN_RECORD_NAME, 'loss_gcd')))
        assert load_checkpoint(tmp_path / "run" / FINAL_CHECKPOINT_NAME)["algorithm"] == "guided-cd"

    @pytest.mark.parametrize("algorithm", ['cfg-edm', 'guided-cd'])
    def test_baseline_evaluation(self, small_run_dict, tmp_path, algorithm):
        cfg = parse_run_config(small_run_dict(train={"eval_every": 60}))
        state = run_training(cfg, algorithm, tmp_path / "run")
        assert len(state.record.evaluations) == 1
        assert state.record.evaluations[0]['method'] == algorithm
