"""
igct-lab - Command Line
=======================
Batch front end for training, sampling, inversion, editing, evaluation and plots.

    python main.py train  --config configs/two_mode.json --algorithm igct
    python main.py sample --config configs/two_mode.json --checkpoint runs/two_mode/checkpoint_final.json --class 1 --w 7
    python main.py invert --config ... --checkpoint ... --method igct --count 1000
    python main.py edit   --config ... --checkpoint ... --class 0 --target-class 1 --w 1 7 13
    python main.py eval   --config ... --checkpoint ... --w 1 7 13
    python main.py plot   --kind histogram --inputs a.csv b.csv --labels data iGCT --out fig.svg

Without --checkpoint, sample / invert(ddim) / edit(ddim) / eval use the analytic oracle.

Environment:
    IGCT_LAB_OUTPUT_DIR  overrides output_dir from the config
    IGCT_LAB_LOG_LEVEL   logging level (default INFO)

Exit codes: 0 success, 2 configuration error, 3 numeric divergence, 4 checkpoint schema mismatch.

Author: igct-lab Team
"""
import argparse
import asyncio
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from dotenv import load_dotenv

from config import ALGORITHMS, LOG_LEVEL_ENV, RunConfig, ScheduleConfig, load_run_config, resolve_output_dir
from errors import EXIT_CONFIG_ERROR, EXIT_OK, LabError
from metrics import (
    edit_preservation,
    evaluate_samples,
    latent_statistics,
    reconstruction_mae,
    sweep_reports,
)
from oracle import MixtureWorld, sample_batch
from persistence import (
    checkpoint_networks,
    load_checkpoint,
    read_eval_csv,
    read_samples_csv,
    read_trajectory_csv,
    upsert_eval_csv,
    write_json,
    write_samples_csv,
    write_trajectory_csv,
)
from plots import render_histogram, render_sweep, render_trajectories, write_svg
from precondition import Denoiser, Noiser
from sampler import (
    CFGModel,
    OracleModel,
    SampleRequest,
    cm_sample,
    edit,
    heun_sample,
    round_trip,
)
from training_loop import run_training

logger = logging.getLogger("MAIN")

EVAL_CSV_NAME = "eval.csv"
EVAL_SUMMARY_NAME = "eval_summary.json"

MODEL_KIND = {'igct': 'igct-denoiser', 'cfg-edm': 'cfg-edm', 'guided-cd': 'guided-cd', 'oracle': 'oracle'}


# ==================== MODELS ====================

class LoadedModels:
    """Networks restored from a checkpoint, or the oracle when there is none."""

    def __init__(self, algorithm: str, schedule: ScheduleConfig, world: MixtureWorld,
                 denoiser: Optional[Denoiser] = None, noiser: Optional[Noiser] = None):
        self.algorithm = algorithm
        self.schedule = schedule
        self.world = world
        self.denoiser = denoiser
        self.noiser = noiser

    @property
    def kind(self) -> str:
        return MODEL_KIND[self.algorithm]

    def diffusion_model(self):
        """Denoiser-type model for Heun sampling and DDIM inversion."""
        if self.algorithm == 'oracle':
            return OracleModel(self.world)
        if self.algorithm == 'cfg-edm':
            return CFGModel(self.denoiser)
        raise LabError(f"{self.algorithm} checkpoints are not diffusion models")


def load_models(cfg: RunConfig, checkpoint: Optional[str]) -> LoadedModels:
    world = MixtureWorld.from_config(cfg.world)
    if checkpoint is None:
        return LoadedModels('oracle', cfg.schedule, world)
    body = load_checkpoint(checkpoint)
    schedule = ScheduleConfig(**body['schedule'])
    nets = checkpoint_networks(body)
    noiser = Noiser(nets['noiser'], schedule) if 'noiser' in nets else None
    logger.info(f"✅ Loaded {body['algorithm']} checkpoint at k={body['iteration']} from {checkpoint}")
    return LoadedModels(body['algorithm'], schedule, world, Denoiser(nets['denoiser'], schedule), noiser)


def generate(models: LoadedModels, class_id: int, w: float, nfe: int, count: int, seed: int,
             eval_cfg, record: bool = False):
    """Samples (and trajectory, for ODE samplers) for one class."""
    request = SampleRequest(model_kind=models.kind, class_id=class_id, w=w, nfe=nfe, count=count, seed=seed)
    if models.kind in ('igct-denoiser', 'guided-cd'):
        return cm_sample(models.denoiser, request, models.schedule, eval_cfg.t_mid), []
    return heun_sample(models.diffusion_model(), request, models.schedule, models.world.dims, record=record)


def default_nfe(models: LoadedModels, cfg: RunConfig, nfe: Optional[int]) -> int:
    if nfe is not None:
        return nfe
    return 1 if models.kind in ('igct-denoiser', 'guided-cd') else cfg.eval.heun_steps


def generate_mixture(models: LoadedModels, w: float, nfe: int, count: int, seed: int, eval_cfg):
    """count samples with classes drawn from the class prior; class c uses seed + c."""
    rng = np.random.default_rng(seed)
    labels = rng.choice(models.world.n_classes, size=count, p=models.world.class_prior())
    xs, cs = [], []
    for c in range(models.world.n_classes):
        n = int(np.sum(labels == c))
        if n:
            x, _ = generate(models, c, w, nfe, n, seed + c, eval_cfg)
            xs.append(x)
            cs.append(np.full(n, c))
    return np.concatenate(xs), np.concatenate(cs)


# ==================== COMMANDS ====================

def cmd_train(args, cfg: RunConfig, out: Path) -> int:
    run_training(cfg, args.algorithm, out, with_noiser=not args.no_noiser, resume_from=args.resume)
    return EXIT_OK


def cmd_sample(args, cfg: RunConfig, out: Path) -> int:
    models = load_models(cfg, args.checkpoint)
    nfe = default_nfe(models, cfg, args.nfe)
    record = args.trajectories > 0
    if record and models.kind in ('igct-denoiser', 'guided-cd'):
        raise LabError("trajectories are only available for ODE samplers (cfg-edm, oracle)")
    x, trajectory = generate(models, args.class_id, args.w, nfe, args.count, args.seed, cfg.eval, record=record)
    stem = f"samples_{models.algorithm}_c{args.class_id}_w{args.w:g}_nfe{nfe}"
    write_samples_csv(out / f"{stem}.csv", x, args.class_id, args.w)
    if record:
        write_trajectory_csv(out / f"trajectories_{models.algorithm}_c{args.class_id}_w{args.w:g}_nfe{nfe}.csv",
                             trajectory, args.trajectories)
    logger.info(f"✅ {args.count} samples written to {out / (stem + '.csv')}")
    return EXIT_OK


def cmd_invert(args, cfg: RunConfig, out: Path) -> int:
    models = load_models(cfg, args.checkpoint)
    rng = np.random.default_rng(args.seed)
    x, classes = sample_batch(rng, models.world, args.count, classes=args.class_id)
    steps = args.nfe or cfg.eval.ddim_steps
    if args.method == 'igct':
        if models.noiser is None:
            raise LabError("igct inversion needs a checkpoint with a noiser")
        latents, recon = round_trip('igct', x, classes, models.schedule, denoiser=models.denoiser, noiser=models.noiser)
    else:
        latents, recon = round_trip('ddim', x, classes, models.schedule, model=models.diffusion_model(), n_steps=steps)
    mae = float(np.mean(np.linalg.norm(recon - x, axis=1)))
    summary = dict(latent_statistics(latents, models.schedule.t_max), method=args.method,
                   recon_mae=mae, count=args.count, nfe=1 if args.method == 'igct' else steps)
    write_samples_csv(out / f"latents_{args.method}.csv", latents, classes, 1.0)
    write_json(out / f"invert_{args.method}.json", summary)
    logger.info(f"📊 inversion {args.method}: recon MAE={mae:.5f}, latent std/t_max={summary['latent_std_ratio']:.4f}")
    return EXIT_OK


def cmd_edit(args, cfg: RunConfig, out: Path) -> int:
    models = load_models(cfg, args.checkpoint)
    if args.target_class is None:
        raise LabError("edit needs --target-class")
    src_class = 0 if args.class_id is None else args.class_id
    rng = np.random.default_rng(args.seed)
    x_src, c_src = sample_batch(rng, models.world, args.count, classes=src_class)
    steps = args.nfe or cfg.eval.ddim_steps
    summary = {'method': args.method, 'source_class': src_class, 'target_class': args.target_class, 'edits': []}
    for w in args.w:
        if args.method == 'igct':
            if models.noiser is None:
                raise LabError("igct editing needs a checkpoint with a noiser")
            before = models.denoiser.calls + models.noiser.calls
            x_edit = edit('igct', x_src, c_src, args.target_class, w, models.schedule, models.world.n_classes,
                          denoiser=models.denoiser, noiser=models.noiser)
            nfe = models.denoiser.calls + models.noiser.calls - before
        else:
            x_edit = edit('ddim', x_src, c_src, args.target_class, w, models.schedule, models.world.n_classes,
                          model=models.diffusion_model(), n_steps=steps)
            nfe = steps
        c_tar = np.full(args.count, args.target_class)
        nearest = np.argmin(np.linalg.norm(x_edit[:, None, :] - models.world.means[None], axis=2), axis=1)
        landed = float(np.mean(models.world.class_ids[nearest] == args.target_class))
        write_samples_csv(out / f"edits_{args.method}_c{src_class}to{args.target_class}_w{w:g}.csv", x_edit, c_tar, w)
        summary['edits'].append({
            'w': w,
            'nfe_per_edit': nfe,
            'target_basin_fraction': landed,
            'preservation_spearman': edit_preservation(x_src, c_src, x_edit, c_tar, models.world),
        })
        logger.info(f"📊 edit {args.method} w={w:g}: {landed:.1%} landed in class {args.target_class}, NFE/edit={nfe}")
    write_samples_csv(out / f"edit_sources_c{src_class}.csv", x_src, c_src, 1.0)
    write_json(out / f"edit_{args.method}.json", summary)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig, out: Path) -> int:
    models = load_models(cfg, args.checkpoint)
    nfe = default_nfe(models, cfg, args.nfe)
    count = args.count or cfg.eval.n_samples
    reference, ref_classes = sample_batch(np.random.default_rng(args.seed + 1), models.world, count)
    extra: Dict = {}
    if models.noiser is not None:
        latents = models.noiser(reference, models.schedule.t_min, ref_classes)
        extra = dict(latent_statistics(latents, models.schedule.t_max),
                     recon_mae=reconstruction_mae(models.denoiser, models.noiser, reference, ref_classes,
                                                  models.schedule))

    def evaluate_one(w: float):
        samples, _ = generate_mixture(models, w, nfe, count, args.seed, cfg.eval)
        return evaluate_samples(samples, reference, models.world, cfg.eval, models.algorithm, w, nfe,
                                run_id=cfg.run_id, **extra)

    w_values = args.w or cfg.eval.w_values
    reports = asyncio.run(sweep_reports(w_values, evaluate_one))
    upsert_eval_csv(out / EVAL_CSV_NAME, reports)
    write_json(out / EVAL_SUMMARY_NAME, {'reports': [r.to_dict() for r in reports]})
    return EXIT_OK


def cmd_plot(args, cfg: Optional[RunConfig], out: Optional[Path]) -> int:
    labels = args.labels or [Path(p).stem for p in args.inputs]
    if len(labels) != len(args.inputs):
        raise LabError("--labels must match --inputs one to one")
    if args.kind == 'histogram':
        series = []
        for label, path in zip(labels, args.inputs):
            x, _, _ = read_samples_csv(path)
            series.append((label, x[:, 0]))
        svg = render_histogram(series, title=args.title or "Sample density")
    elif args.kind == 'trajectory':
        svg = render_trajectories([(label, read_trajectory_csv(path)) for label, path in zip(labels, args.inputs)],
                                  title=args.title or "PF-ODE trajectories")
    else:
        rows = [row for path in args.inputs for row in read_eval_csv(path)]
        svg = render_sweep(rows, metric=args.metric, title=args.title or "")
    write_svg(args.out, svg)
    return EXIT_OK


COMMANDS = {
    'train': cmd_train,
    'sample': cmd_sample,
    'invert': cmd_invert,
    'edit': cmd_edit,
    'eval': cmd_eval,
    'plot': cmd_plot,
}


# ==================== ARGUMENTS ====================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="igct-lab", description="Invertible guided consistency training lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument('--config', required=required, help="JSON run config")
        return p

    train = with_config(sub.add_parser('train', help="train a model"))
    train.add_argument('--algorithm', choices=ALGORITHMS, default='igct')
    train.add_argument('--resume', help="checkpoint to continue from")
    train.add_argument('--no-noiser', action='store_true', help="iGCT without the noiser (ablation)")

    for name in ('sample', 'invert', 'edit', 'eval'):
        p = with_config(sub.add_parser(name))
        p.add_argument('--checkpoint', help="trained checkpoint; omit for the analytic oracle")
        p.add_argument('--nfe', type=int)
        p.add_argument('--count', type=int, default=None if name == 'eval' else 1000)
        p.add_argument('--seed', type=int, default=0)
        if name in ('sample', 'invert', 'edit'):
            p.add_argument('--class', dest='class_id', type=int, default=None if name != 'sample' else 0)
        if name == 'sample':
            p.add_argument('--w', type=float, default=1.0)
            p.add_argument('--trajectories', type=int, default=0, help="dump the first N ODE paths")
        if name in ('invert', 'edit'):
            p.add_argument('--method', choices=('igct', 'ddim'), default='igct')
        if name == 'edit':
            p.add_argument('--target-class', type=int)
            p.add_argument('--w', type=float, nargs='+', default=[1.0])
        if name == 'eval':
            p.add_argument('--w', type=float, nargs='+')

    plot = sub.add_parser('plot', help="render CSV outputs as SVG")
    plot.add_argument('--kind', choices=('histogram', 'trajectory', 'sweep'), required=True)
    plot.add_argument('--inputs', nargs='+', required=True)
    plot.add_argument('--labels', nargs='+')
    plot.add_argument('--metric', default='w1')
    plot.add_argument('--title')
    plot.add_argument('--out', required=True)
    return parser


def setup_logging():
    level = os.getenv(LOG_LEVEL_ENV, "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO))


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg, out = None, None
        if args.command != 'plot':
            cfg = load_run_config(args.config)
            out = resolve_output_dir(cfg)
            out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out)
    except LabError as e:
        logger.error(f"❌ {type(e).__name__}: {e.message}")
        return e.exit_code
    except ValueError as e:
        logger.error(f"❌ {e}")
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
