"""Training stages that communicate only through files under ``cfg.out``."""

from __future__ import annotations

import json
import logging
import subprocess
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, modelfile
from .cae import Architecture, CaeModel, finetune, parse_filters, pretrain_layerwise
from .config import RunConfig, phase_rng, phase_seed
from .data import Dataset, load_idx, load_pgm_dir, resize_bilinear, split
from .dnm import LossConfig, train_dnm, write_metrics_csv
from .export import backproject, project, write_projection_csv, write_scatter_svg
from .pnm import write_pgm
from .som import Schedules, init_som, pretrain_som, quantization_error

log = logging.getLogger(__name__)

AE_MODEL = "ae.dnm"
SOM_MODEL = "som.dnm"
DNM_MODEL = "dnm.dnm"
METRICS = "metrics.csv"
PROJECTION_CSV = "projection.csv"
PROJECTION_SVG = "projection.svg"
BACKPROJECTION = "backprojection.pgm"


class StageOrderError(RuntimeError):
    """A stage ran before the stage that produces its input."""


def version_string() -> str:
    try:
        sha = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             cwd=Path(__file__).parent, capture_output=True, text=True,
                             timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"v{__version__}-g{sha}" if sha else f"v{__version__}"


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Load, optionally truncate and resize, then split into (train, test)."""
    if cfg.data_format == "idx":
        if not cfg.images or not cfg.labels:
            raise FileNotFoundError("idx data needs both 'images' and 'labels' paths")
        ds = load_idx(cfg.images, cfg.labels)
    else:
        if not cfg.pgm_dir:
            raise FileNotFoundError("pgm data needs 'pgm_dir'")
        ds = load_pgm_dir(cfg.pgm_dir)
    if cfg.limit:
        ds = ds.subset(np.arange(min(cfg.limit, len(ds))))
    if cfg.resize:
        ds = resize_bilinear(ds, cfg.resize, cfg.resize)
    train_count = cfg.train_count or len(ds)
    train, test = split(ds, min(train_count, len(ds)), phase_seed(cfg.seed, "split"))
    if cfg.test_count:
        test = test.subset(np.arange(min(cfg.test_count, len(test))))
    return train, test


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Path, stage: str, producer: str) -> Path:
    if not path.exists():
        raise StageOrderError(f"{stage} needs {path}; run '{producer}' first")
    return path


def _write_meta(out: Path, stage: str, cfg: RunConfig, started: float, extra: dict | None = None) -> None:
    meta = {
        "stage": stage,
        "version": version_string(),
        "seed": cfg.seed,
        "split_seed": phase_seed(cfg.seed, "split"),
        "wall_time_s": round(time.perf_counter() - started, 3),
        "config": asdict(cfg),
    }
    meta.update(extra or {})
    (out / f"{stage}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def run_pretrain_ae(cfg: RunConfig) -> Path:
    started = time.perf_counter()
    out = _out(cfg)
    train, _ = load_data(cfg)
    arch = Architecture(train.dims, parse_filters(cfg.filters), cfg.embedding_dim)
    model = CaeModel.initialize(arch, phase_rng(cfg.seed, "init"))
    history = pretrain_layerwise(model, train.images, cfg.ae_iterations, cfg.batch_size, cfg.ae_lr,
                                 phase_rng(cfg.seed, "layerwise"))
    losses = finetune(model, train.images, cfg.finetune_iterations, cfg.batch_size, cfg.ae_lr,
                      phase_rng(cfg.seed, "finetune"))
    path = out / AE_MODEL
    modelfile.save(path, model)
    _write_meta(out, "pretrain-ae", cfg, started, {
        "layer_loss_first_last": [[h[0], h[-1]] if h else [] for h in history],
        "finetune_loss_first_last": [losses[0], losses[-1]] if losses else [],
    })
    log.info("wrote %s", path)
    return path


def run_pretrain_som(cfg: RunConfig, model_path=None) -> Path:
    started = time.perf_counter()
    out = _out(cfg)
    model, _, _ = modelfile.load(_require(Path(model_path or out / AE_MODEL), "pretrain-som", "pretrain-ae"))
    train, _ = load_data(cfg)
    z = model.embed(train.images)
    lattice = init_som(cfg.rows, cfg.cols, cfg.embedding_dim, z, seed=phase_rng(cfg.seed, "som_init"))
    schedules = Schedules(cfg.sigma0, cfg.alpha, cfg.eta0)
    qe_start = quantization_error(lattice, z)
    pretrain_som(lattice, z, cfg.som_iterations, schedules, phase_rng(cfg.seed, "som"))
    path = out / SOM_MODEL
    modelfile.save(path, model, lattice, schedules.n)
    _write_meta(out, "pretrain-som", cfg, started,
                {"qe_start": qe_start, "qe_end": quantization_error(lattice, z), "som_step": schedules.n})
    log.info("wrote %s", path)
    return path


def run_train(cfg: RunConfig, model_path=None) -> Path:
    started = time.perf_counter()
    out = _out(cfg)
    model, lattice, step = modelfile.load(_require(Path(model_path or out / SOM_MODEL), "train", "pretrain-som"))
    if lattice is None:
        raise StageOrderError("train needs a model file with a pretrained map; run 'pretrain-som' first")
    train, _ = load_data(cfg)
    schedules = Schedules(cfg.sigma0, cfg.alpha, cfg.eta0, n=step)
    loss_cfg = LossConfig(cfg.gamma, cfg.beta, cfg.joint_lr, cfg.joint_iterations, cfg.batch_size,
                          cfg.squared_reg)
    rows = train_dnm(train.images, model, lattice, schedules, loss_cfg, phase_rng(cfg.seed, "joint"))
    path = out / DNM_MODEL
    modelfile.save(path, model, lattice, schedules.n)
    write_metrics_csv(rows, out / METRICS)
    _write_meta(out, "train", cfg, started, {"som_step": schedules.n})
    log.info("wrote %s and %s", path, out / METRICS)
    return path


def _trained(cfg: RunConfig, stage: str, model_path=None):
    out = _out(cfg)
    model, lattice, _ = modelfile.load(_require(Path(model_path or out / DNM_MODEL), stage, "train"))
    if lattice is None:
        raise StageOrderError(f"{stage} needs a model file with a map; run 'train' first")
    return out, model, lattice


def run_project(cfg: RunConfig, model_path=None) -> tuple[Path, Path]:
    started = time.perf_counter()
    out, model, lattice = _trained(cfg, "project", model_path)
    train, test = load_data(cfg)
    data = {"train": train, "test": test}.get(cfg.project_split)
    if data is None:
        data = Dataset(np.concatenate([train.images, test.images]),
                       np.concatenate([train.labels, test.labels]), train.name)
    records = project(data, model, lattice)
    write_projection_csv(records, out / PROJECTION_CSV)
    write_scatter_svg(records, lattice, out / PROJECTION_SVG)
    _write_meta(out, "project", cfg, started, {"records": len(records)})
    return out / PROJECTION_CSV, out / PROJECTION_SVG


def run_backproject(cfg: RunConfig, model_path=None) -> Path:
    started = time.perf_counter()
    out, model, lattice = _trained(cfg, "backproject", model_path)
    image = backproject(model, lattice)
    write_pgm(image, out / BACKPROJECTION)
    _write_meta(out, "backproject", cfg, started, {"dims": list(image.shape)})
    return out / BACKPROJECTION
