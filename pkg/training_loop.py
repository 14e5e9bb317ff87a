"""
igct-lab - Training Loops
=========================
The three training procedures:

- igct:      L = L_gct + L_ict + λ_recon·L_recon; θ gets ∇(L_gct + λ_recon·L_recon),
             φ gets ∇(L_ict + λ_recon·L_recon)
- cfg-edm:   denoising objective with label dropout (classifier-free guidance baseline)
- guided-cd: guided consistency distillation against the analytic teacher

Features:
- Independent RNG streams spawned from the run seed (init / gct / ict / recon / eval),
  so ablating the noiser never perturbs the denoiser's draws
- Δt curriculum: iGCT stops at total_iterations or after the last halving stage
- Staged λ_recon schedule, reconstruction every i_skip iterations
- Periodic checkpoints carrying optimizer and RNG states (exact resume)
- Divergence guard: a non-finite loss or gradient writes error_log.jsonl, keeps
  the last good checkpoint and raises DivergenceError

Usage:
    from training_loop import run_igct
    state = run_igct(run_cfg, output_dir)

Author: igct-lab Team
"""
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from config import RunConfig, dump_run_config, lambda_recon_at, lr_at
from errors import ConfigError, DivergenceError, log_error
from losses import LossResult, loss_edm_denoise, loss_gcd, loss_gct, loss_ict, loss_recon
from metrics import evaluate_samples
from net import NetArch, OptState, add_grads, grads_finite, init_opt_state, init_params, optimizer_step
from oracle import MixtureWorld, sample_batch
from persistence import (
    checkpoint_networks,
    load_checkpoint,
    opt_from_json,
    opt_to_json,
    params_to_json,
    read_run_record_rows,
    save_checkpoint,
    write_csv,
)
from precondition import Denoiser, Noiser
from sampler import CFGModel, SampleRequest, cm_sample, heun_sample
from schedule import final_stage_reached, halving_stage

logger = logging.getLogger("TRAINING_LOOP")

# ==================== CONFIGURATION ====================

RUN_RECORD_NAME = "run_record.csv"
FINAL_CHECKPOINT_NAME = "checkpoint_final.json"
LAST_GOOD_CHECKPOINT_NAME = "checkpoint_last_good.json"

RNG_STREAMS = {
    'igct': ['init', 'gct', 'ict', 'recon', 'eval'],
    'cfg-edm': ['init', 'train', 'eval'],
    'guided-cd': ['init', 'train', 'eval'],
}

RECORD_COLUMNS = {
    'igct': ['k', 'loss_gct', 'loss_ict', 'loss_recon', 'lambda_recon', 'delta_t_stage', 'wall_ms'],
    'cfg-edm': ['k', 'loss_edm', 'null_fraction', 'wall_ms'],
    'guided-cd': ['k', 'loss_gcd', 'wall_ms'],
}


def checkpoint_name(k: int) -> str:
    return f"checkpoint_{k:07d}.json"


def spawn_streams(seed: int, algorithm: str) -> Dict[str, np.random.Generator]:
    names = RNG_STREAMS[algorithm]
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


@dataclass
class RunRecord:
    """Per-iteration rows plus the periodic evaluation reports."""
    columns: List[str]
    rows: List[List] = field(default_factory=list)
    evaluations: List[Dict] = field(default_factory=list)

    def append(self, row: List):
        self.rows.append(row)

    def last(self) -> Dict:
        return dict(zip(self.columns, self.rows[-1])) if self.rows else {}


@dataclass
class TrainState:
    """Everything that changes while training."""
    k: int
    denoiser: Denoiser
    opt_theta: OptState
    rngs: Dict[str, np.random.Generator]
    record: RunRecord
    noiser: Optional[Noiser] = None
    opt_phi: Optional[OptState] = None


# ==================== LOOP ====================

class TrainingLoop:
    """
    Single-threaded training driver shared by all three algorithms.
    """

    def __init__(self, run_cfg: RunConfig, algorithm: str, output_dir, with_noiser: bool = True):
        """
        Args:
            run_cfg: Validated run configuration
            algorithm: igct | cfg-edm | guided-cd
            output_dir: Where checkpoints, run_record.csv and error_log.jsonl go
            with_noiser: False trains iGCT's denoiser alone (ablation)
        """
        if algorithm not in RNG_STREAMS:
            raise ConfigError(f"unknown algorithm: {algorithm}")
        self.cfg = run_cfg
        self.algorithm = algorithm
        self.output_dir = Path(output_dir)
        self.with_noiser = with_noiser and algorithm == 'igct'
        self.schedule = run_cfg.schedule
        self.train_cfg = run_cfg.train
        self.world = MixtureWorld.from_config(run_cfg.world)
        self.logger = logging.getLogger('TRAINING_LOOP')

    # ---------- setup ----------

    def _denoiser_arch(self) -> NetArch:
        return NetArch.from_config(self.world.dims, self.world.n_classes,
                                   with_guidance=self.algorithm != 'cfg-edm', net_cfg=self.cfg.net)

    def init_state(self) -> TrainState:
        rngs = spawn_streams(self.cfg.seed, self.algorithm)
        zero_out = self.cfg.net.zero_init_output
        theta = init_params(rngs['init'], self._denoiser_arch(), zero_out)
        state = TrainState(
            k=0,
            denoiser=Denoiser(theta, self.schedule),
            opt_theta=init_opt_state(theta, self.train_cfg),
            rngs=rngs,
            record=RunRecord(columns=RECORD_COLUMNS[self.algorithm]),
        )
        if self.with_noiser:
            phi_arch = NetArch.from_config(self.world.dims, self.world.n_classes, with_guidance=False,
                                           net_cfg=self.cfg.net)
            phi = init_params(rngs['init'], phi_arch, zero_out)
            state.noiser = Noiser(phi, self.schedule)
            state.opt_phi = init_opt_state(phi, self.train_cfg)
        return state

    def resume_state(self, checkpoint_path) -> TrainState:
        """Rebuild the exact state stored in a checkpoint written by this loop."""
        body = load_checkpoint(checkpoint_path)
        if body.get("algorithm") != self.algorithm:
            raise ConfigError(f"checkpoint was trained with {body.get('algorithm')}, not {self.algorithm}")
        nets = checkpoint_networks(body)
        rngs = spawn_streams(self.cfg.seed, self.algorithm)
        for name, rng_state in body["rng_states"].items():
            rngs[name].bit_generator.state = rng_state
        state = TrainState(
            k=int(body["iteration"]),
            denoiser=Denoiser(nets['denoiser'], self.schedule),
            opt_theta=opt_from_json(body["optimizer"]["denoiser"]),
            rngs=rngs,
            record=RunRecord(columns=RECORD_COLUMNS[self.algorithm]),
        )
        if self.with_noiser:
            if 'noiser' not in nets:
                raise ConfigError("checkpoint has no noiser; cannot resume an iGCT run with the noiser enabled")
            state.noiser = Noiser(nets['noiser'], self.schedule)
            state.opt_phi = opt_from_json(body["optimizer"]["noiser"])
        previous = read_run_record_rows(self.output_dir / RUN_RECORD_NAME, state.k)
        if previous is not None:
            header, rows = previous
            if header == state.record.columns:
                state.record.rows = [[_parse_cell(col, v) for col, v in zip(header, r)] for r in rows]
        self.logger.info(f"⏳ Resuming {self.algorithm} at k={state.k} from {checkpoint_path}")
        return state

    def stop_iteration(self) -> int:
        total = self.train_cfg.total_iterations
        if self.algorithm == 'igct' and self.train_cfg.max_halvings is not None:
            total = min(total, self.schedule.d * (self.train_cfg.max_halvings + 1))
        return total

    # ---------- steps ----------

    def _step_igct(self, state: TrainState) -> List:
        cfg = self.train_cfg
        k = state.k
        lam = lambda_recon_at(k, cfg.lambda_recon_schedule)
        gct = loss_gct(state, cfg, self.schedule, self.world, state.rngs['gct'])
        ict = LossResult(value=0.0)
        recon = LossResult(value=0.0)
        if state.noiser is not None:
            ict = loss_ict(state, cfg, self.schedule, self.world, state.rngs['ict'])
            if lam > 0:
                recon = loss_recon(state, cfg, self.schedule, self.world, state.rngs['recon'])
        self._guard(state, {'loss_gct': gct.value, 'loss_ict': ict.value, 'loss_recon': recon.value})

        grads_theta = gct.grads_theta
        if recon.grads_theta is not None:
            grads_theta = add_grads(grads_theta, recon.grads_theta, lam)
        grads_phi = None
        if state.noiser is not None:
            grads_phi = ict.grads_phi
            if recon.grads_phi is not None:
                grads_phi = add_grads(grads_phi, recon.grads_phi, lam)
            self._guard_grads(state, grads_phi, 'noiser')
        self._guard_grads(state, grads_theta, 'denoiser')

        state.denoiser.params = self._apply(state, state.denoiser.params, grads_theta, state.opt_theta, 'denoiser')
        if grads_phi is not None:
            state.noiser.params = self._apply(state, state.noiser.params, grads_phi, state.opt_phi, 'noiser')
        return [k, gct.value, ict.value, recon.value, lam, halving_stage(k, self.schedule)]

    def _step_edm(self, state: TrainState) -> List:
        result = loss_edm_denoise(state, self.train_cfg, self.schedule, self.world, state.rngs['train'])
        self._guard(state, {'loss_edm': result.value})
        state.denoiser.params = self._apply(state, state.denoiser.params, result.grads_theta, state.opt_theta, 'denoiser')
        return [state.k, result.value, result.info['null_fraction']]

    def _step_gcd(self, state: TrainState) -> List:
        result = loss_gcd(state, self.train_cfg, self.schedule, self.world, state.rngs['train'])
        self._guard(state, {'loss_gcd': result.value})
        state.denoiser.params = self._apply(state, state.denoiser.params, result.grads_theta, state.opt_theta, 'denoiser')
        return [state.k, result.value]

    def _apply(self, state: TrainState, params, grads, opt: OptState, which: str):
        # optimizer_step leaves opt untouched when it refuses the gradients
        if self.train_cfg.lr_final is not None:
            opt.lr = lr_at(state.k, self.train_cfg, self.stop_iteration())
        try:
            return optimizer_step(params, grads, opt)
        except DivergenceError as e:
            self._diverged(state, "NON_FINITE_GRADIENT", f"{which}: {e.message}", e.details)

    def _guard_grads(self, state: TrainState, grads: Dict[str, np.ndarray], which: str):
        if not grads_finite(grads):
            bad = sorted(name for name, g in grads.items() if not np.all(np.isfinite(g)))
            self._diverged(state, "NON_FINITE_GRADIENT", f"{which}: non-finite gradient at k={state.k}",
                           {"parameters": bad})

    def _guard(self, state: TrainState, losses: Dict[str, float]):
        bad = {name: v for name, v in losses.items() if not math.isfinite(v)}
        if bad:
            self._diverged(state, "NON_FINITE_LOSS", f"non-finite loss at k={state.k}: {sorted(bad)}",
                           {name: repr(v) for name, v in losses.items()})

    def _diverged(self, state: TrainState, error_type: str, message: str, context: Dict):
        """Log, keep the last good state on disk, abort."""
        context = dict(context, k=state.k, algorithm=self.algorithm)
        self.logger.error(f"❌ {message}")
        log_error(self.output_dir, error_type, message, context)
        self.save(state, LAST_GOOD_CHECKPOINT_NAME)
        self.write_record(state)
        raise DivergenceError(message, details=context)

    # ---------- evaluation ----------

    def evaluate(self, state: TrainState) -> Dict:
        """Samples at w = w_min against fresh data, per class in proportion to the class prior."""
        rng = state.rngs['eval']
        n = self.train_cfg.eval_samples
        reference, labels = sample_batch(rng, self.world, n)
        seed = int(rng.integers(0, 2 ** 31 - 1))
        parts = []
        for c in range(self.world.n_classes):
            count = int(np.sum(labels == c))
            if count == 0:
                continue
            if self.algorithm == 'cfg-edm':
                request = SampleRequest(model_kind='cfg-edm', class_id=c, w=self.schedule.w_min,
                                        nfe=self.cfg.eval.heun_steps, count=count, seed=seed + c)
                x, _ = heun_sample(CFGModel(state.denoiser), request, self.schedule, self.world.dims,
                                   rho=self.train_cfg.rho)
            else:
                request = SampleRequest(model_kind='igct-denoiser' if self.algorithm == 'igct' else 'guided-cd',
                                        class_id=c, w=self.schedule.w_min, nfe=1, count=count, seed=seed + c)
                x = cm_sample(state.denoiser, request, self.schedule)
            parts.append(x)
        samples = np.concatenate(parts, axis=0)
        nfe = self.cfg.eval.heun_steps if self.algorithm == 'cfg-edm' else 1
        report = evaluate_samples(samples, reference, self.world, self.cfg.eval, self.algorithm,
                                  self.schedule.w_min, nfe, run_id=self.cfg.run_id)
        entry = dict(report.to_dict(), k=state.k)
        state.record.evaluations.append(entry)
        self.logger.info(f"📊 eval k={state.k}: W1={report.w1:.4f} P={report.precision:.3f} R={report.recall:.3f}")
        return entry

    # ---------- persistence ----------

    def checkpoint_payload(self, state: TrainState) -> Dict:
        networks = {'denoiser': params_to_json(state.denoiser.params)}
        optimizer = {'denoiser': opt_to_json(state.opt_theta)}
        if state.noiser is not None:
            networks['noiser'] = params_to_json(state.noiser.params)
            optimizer['noiser'] = opt_to_json(state.opt_phi)
        config = dump_run_config(self.cfg)
        return {
            'algorithm': self.algorithm,
            'run_id': self.cfg.run_id,
            'iteration': state.k,
            'schedule': config['schedule'],
            'world': config['world'],
            'train': config['train'],
            'eval': config['eval'],
            'networks': networks,
            'optimizer': optimizer,
            'rng_states': {name: rng.bit_generator.state for name, rng in state.rngs.items()},
        }

    def save(self, state: TrainState, name: str) -> Path:
        return save_checkpoint(self.output_dir / name, self.checkpoint_payload(state))

    def write_record(self, state: TrainState) -> Path:
        return write_csv(self.output_dir / RUN_RECORD_NAME, state.record.columns, state.record.rows)

    # ---------- main loop ----------

    def run(self, state: Optional[TrainState] = None) -> TrainState:
        """Train until the stop iteration; returns the final state."""
        if state is None:
            state = self.init_state()
        stop = self.stop_iteration()
        step = {'igct': self._step_igct, 'cfg-edm': self._step_edm, 'guided-cd': self._step_gcd}[self.algorithm]
        cfg = self.train_cfg
        self.logger.info(f"🚀 Training {self.algorithm} from k={state.k} to k={stop} "
                         f"(seed={self.cfg.seed}, batch={cfg.batch_size}, output={self.output_dir})")

        while state.k < stop:
            started = time.perf_counter()
            row = step(state)
            wall_ms = (time.perf_counter() - started) * 1000.0 if cfg.record_wall_time else 0.0
            state.record.append(row + [wall_ms])
            state.k += 1

            if state.k % cfg.log_every == 0:
                last = state.record.last()
                losses = ", ".join(f"{col}={last[col]:.5g}" for col in state.record.columns[1:-1])
                self.logger.info(f"📝 k={state.k}/{stop} {losses}")
            if cfg.eval_every is not None and state.k % cfg.eval_every == 0:
                self.evaluate(state)
            if cfg.checkpoint_every is not None and state.k % cfg.checkpoint_every == 0:
                self.save(state, checkpoint_name(state.k))
                self.write_record(state)

        if self.algorithm == 'igct' and final_stage_reached(state.k, self.schedule, cfg.max_halvings):
            self.logger.info(f"✅ Δt curriculum finished after {cfg.max_halvings} halvings")
        self.save(state, FINAL_CHECKPOINT_NAME)
        self.write_record(state)
        self.logger.info(f"✅ {self.algorithm} finished at k={state.k}")
        return state


def _parse_cell(column: str, value: str):
    if column in ('k', 'delta_t_stage'):
        return int(value)
    return float(value)


# ==================== ENTRY POINTS ====================

def run_training(run_cfg: RunConfig, algorithm: str, output_dir, with_noiser: bool = True,
                 resume_from=None) -> TrainState:
    loop = TrainingLoop(run_cfg, algorithm, output_dir, with_noiser=with_noiser)
    state = loop.resume_state(resume_from) if resume_from is not None else None
    return loop.run(state)


def run_igct(run_cfg: RunConfig, output_dir, with_noiser: bool = True, resume_from=None) -> TrainState:
    return run_training(run_cfg, 'igct', output_dir, with_noiser, resume_from)


def run_cfg_edm(run_cfg: RunConfig, output_dir, resume_from=None) -> TrainState:
    return run_training(run_cfg, 'cfg-edm', output_dir, resume_from=resume_from)


def run_guided_cd(run_cfg: RunConfig, output_dir, resume_from=None) -> TrainState:
    return run_training(run_cfg, 'guided-cd', output_dir, resume_from=resume_from)
