"""
igct-lab - Checkpoints & CSV Exports
====================================
File formats written and read by the training loop and the CLI.

Checkpoint (JSON):
    {
      "schema_version": 1,
      "algorithm": "igct" | "cfg-edm" | "guided-cd",
      "run_id": "...",
      "iteration": k,
      "schedule": {...}, "world": {...}, "train": {...},
      "networks":  {"denoiser": {"arch": {...}, "params": {name: {"shape": [...], "data": [...]}}}, ...},
      "optimizer": {"denoiser": {"step", "lr", "beta1", "beta2", "eps", "m", "v"}, ...},
      "rng_states": {"gct": {...bit generator state...}, ...}
    }

CSV files (one header row, floats written with repr so they round-trip):
- samples / latents:  index, class, w, x_0, x_1, ...
- run record:         k, loss columns..., lambda_recon, delta_t_stage, wall_ms
- evaluations:        EVAL_COLUMNS, upserted on (run_id, method, w, nfe)

Author: igct-lab Team
"""
import csv
import io
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import SCHEMA_VERSION
from errors import ConfigError, SchemaMismatchError
from metrics import EVAL_COLUMNS, EvalReport
from net import NetArch, NetParams, OptState

logger = logging.getLogger("PERSISTENCE")


# ==================== ARRAYS ====================

def array_to_json(a: np.ndarray) -> Dict:
    return {"shape": list(a.shape), "data": np.asarray(a, dtype=np.float64).ravel().tolist()}


def array_from_json(entry: Dict) -> np.ndarray:
    return np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])


def params_to_json(params: NetParams) -> Dict:
    return {
        "arch": params.arch.to_dict(),
        "params": {name: array_to_json(a) for name, a in params.arrays.items()},
    }


def params_from_json(entry: Dict) -> NetParams:
    arch = NetArch(**entry["arch"])
    arrays = {name: array_from_json(a) for name, a in entry["params"].items()}
    expected = arch.shapes()
    for name, shape in expected.items():
        if name not in arrays or arrays[name].shape != shape:
            raise SchemaMismatchError(f"parameter {name} missing or misshapen in checkpoint")
    return NetParams(arch=arch, arrays={name: arrays[name] for name in expected})


def opt_to_json(opt: OptState) -> Dict:
    return {
        "step": opt.step, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
        "m": {name: array_to_json(a) for name, a in opt.m.items()},
        "v": {name: array_to_json(a) for name, a in opt.v.items()},
    }


def opt_from_json(entry: Dict) -> OptState:
    return OptState(
        m={name: array_from_json(a) for name, a in entry["m"].items()},
        v={name: array_from_json(a) for name, a in entry["v"].items()},
        step=entry["step"], lr=entry["lr"], beta1=entry["beta1"], beta2=entry["beta2"], eps=entry["eps"],
    )


# ==================== CHECKPOINTS ====================

def save_checkpoint(path, payload: Dict) -> Path:
    """Write a checkpoint dict (schema_version stamped) as sorted-key JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = dict(payload)
    body["schema_version"] = SCHEMA_VERSION
    path.write_text(json.dumps(body, sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path) -> Dict:
    """
    Read a checkpoint.

    Raises:
        ConfigError: file missing or not JSON
        SchemaMismatchError: schema_version differs from this build
    """
    path = Path(path)
    try:
        body = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"checkpoint not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"checkpoint is not valid JSON: {path}") from e
    found = body.get("schema_version")
    if found != SCHEMA_VERSION:
        raise SchemaMismatchError(
            f"checkpoint schema_version {found} does not match {SCHEMA_VERSION}",
            details={"path": str(path), "found": found, "expected": SCHEMA_VERSION},
        )
    return body


def checkpoint_networks(body: Dict) -> Dict[str, NetParams]:
    return {name: params_from_json(entry) for name, entry in body.get("networks", {}).items()}


# ==================== CSV ====================

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def render_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return output.getvalue()


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_csv(header, rows), encoding="utf-8")
    return path


def read_csv(path) -> Tuple[List[str], List[List[str]]]:
    """
    Raises:
        ConfigError: missing file or no header
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise ConfigError(f"CSV file not found: {path}") from e
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ConfigError(f"malformed CSV (no header): {path}")
    return rows[0], rows[1:]


def sample_header(dims: int) -> List[str]:
    return ["index", "class", "w"] + [f"x_{j}" for j in range(dims)]


def write_samples_csv(path, x: np.ndarray, classes, w) -> Path:
    """One row per point: index, class, w, coordinates."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    classes = np.broadcast_to(np.asarray(classes), (n,))
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), (n,))
    rows = [[i, int(classes[i]), float(w[i])] + [float(v) for v in x[i]] for i in range(n)]
    return write_csv(path, sample_header(x.shape[1]), rows)


def read_samples_csv(path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Returns:
        (x of shape (N, dims), classes (N,), w (N,))

    Raises:
        ConfigError: header or values malformed
    """
    header, rows = read_csv(path)
    if header[:3] != ["index", "class", "w"] or len(header) < 4:
        raise ConfigError(f"malformed sample CSV header in {path}: {header}")
    dims = len(header) - 3
    try:
        classes = np.array([int(r[1]) for r in rows], dtype=np.int64)
        w = np.array([float(r[2]) for r in rows], dtype=np.float64)
        x = np.array([[float(v) for v in r[3:]] for r in rows], dtype=np.float64).reshape(len(rows), dims)
    except (ValueError, IndexError) as e:
        raise ConfigError(f"malformed sample CSV {path}: {e}") from e
    return x, classes, w


def read_trajectory_csv(path) -> Dict[int, List[Tuple[float, float]]]:
    """index -> [(t, x_0), ...] from a trajectory dump (index, t, x_0, ...)."""
    header, rows = read_csv(path)
    if header[:3] != ["index", "t", "x_0"]:
        raise ConfigError(f"malformed trajectory CSV header in {path}: {header}")
    paths: Dict[int, List[Tuple[float, float]]] = {}
    try:
        for r in rows:
            paths.setdefault(int(r[0]), []).append((float(r[1]), float(r[2])))
    except (ValueError, IndexError) as e:
        raise ConfigError(f"malformed trajectory CSV {path}: {e}") from e
    return paths


def write_trajectory_csv(path, trajectory: List[Tuple[float, np.ndarray]], n_paths: int) -> Path:
    """Rows (index, t, coordinates) for the first n_paths trajectories, in time order."""
    dims = trajectory[0][1].shape[1]
    rows = []
    for i in range(min(n_paths, trajectory[0][1].shape[0])):
        for t, x in trajectory:
            rows.append([i, float(t)] + [float(v) for v in x[i]])
    return write_csv(path, ["index", "t"] + [f"x_{j}" for j in range(dims)], rows)


# ==================== EVALUATION TABLE ====================

def _eval_row(report: EvalReport) -> List:
    d = report.to_dict()
    return [d[col] for col in EVAL_COLUMNS]


def _row_key(row: List[str]) -> Tuple[str, str, float, int]:
    return (row[0], row[1], float(row[2]), int(row[3]))


def upsert_eval_csv(path, reports: Sequence[EvalReport]) -> Path:
    """
    Merge reports into the evaluation CSV, replacing rows with the same
    (run_id, method, w, nfe). Rows are kept sorted by that key.
    """
    path = Path(path)
    merged: Dict[Tuple, List] = {}
    if path.exists():
        header, rows = read_csv(path)
        if header != EVAL_COLUMNS:
            raise ConfigError(f"evaluation CSV {path} has unexpected columns")
        for row in rows:
            merged[_row_key(row)] = row
    for report in reports:
        merged[report.key] = [_fmt(v) for v in _eval_row(report)]
    ordered = [merged[key] for key in sorted(merged)]
    logger.info(f"📝 {len(reports)} evaluation row(s) upserted into {path} ({len(ordered)} total)")
    return write_csv(path, EVAL_COLUMNS, ordered)


def read_eval_csv(path) -> List[Dict[str, str]]:
    header, rows = read_csv(path)
    if header != EVAL_COLUMNS:
        raise ConfigError(f"malformed evaluation CSV {path}")
    return [dict(zip(header, row)) for row in rows]


def write_json(path, payload: Dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2), encoding="utf-8")
    return path


def read_run_record_rows(path, before_k: int) -> Optional[Tuple[List[str], List[List[str]]]]:
    """Existing run-record rows with k < before_k (used when resuming), or None if absent."""
    path = Path(path)
    if not path.exists():
        return None
    header, rows = read_csv(path)
    return header, [r for r in rows if int(r[0]) < before_k]
