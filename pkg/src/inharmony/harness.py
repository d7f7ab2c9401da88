"""Run-level orchestration: data generation, training, evaluation, analysis, inference.

A run directory holds::

    config.txt        resolved configuration
    train_log.csv     step,ddm,di,loc,total (code losses blank when unused)
    checkpoint/       parameters + optimizer state, rewritten after every epoch
    eval.csv          metric,value on the test split after training
    eval.txt          the same as a text table
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from . import gradsuite
from .colormap import compute_guidance, predict_grid, slice_grid
from .config import TrainConfig, parse_key_values
from .dataset import (DataError, DatasetConfig, SampleManifest, build_dataset, from_uint8,
                      load_split, read_ppm, to_uint8, write_pgm, write_ppm)
from .diffcore import NumericalError
from .estimator import ESTIMATOR_FILE, DiscrepancyStats, InharmonyLocalizer, parse_literal
from .metrics import MetricsReport

log = logging.getLogger(__name__)

CONFIG_FILE = "config.txt"
TRAIN_LOG = "train_log.csv"
CHECKPOINT_DIR = "checkpoint"
EVAL_CSV = "eval.csv"
EVAL_TABLE = "eval.txt"
MANIFEST_FILE = "manifest.tsv"
LOG_FIELDS = ("step", "ddm", "di", "loc", "total")

# estimator parameters that fix the parameter layout or the forward computation
ARCHITECTURE_KEYS = ("color_map", "localizer", "unet_width", "theta", "lowres_size",
                     "grid_size", "grid_depth", "code_dim", "encoder_seed")


def estimator_from_config(cfg: TrainConfig) -> InharmonyLocalizer:
    return InharmonyLocalizer(
        color_map=cfg.color_map, localizer=cfg.localizer, unet_width=cfg.unet_width,
        lambda_ddm=cfg.lambda_ddm, lambda_di=cfg.lambda_di, margin=cfg.margin,
        learning_rate=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2,
        batch_size=cfg.batch_size, epochs=cfg.epochs, theta=cfg.theta,
        lowres_size=cfg.lowres_size, grid_size=cfg.grid_size, grid_depth=cfg.grid_depth,
        code_dim=cfg.code_dim, encoder_seed=cfg.encoder_seed, threshold=cfg.threshold,
        random_state=cfg.seed)


def generate_data(cfg: TrainConfig) -> SampleManifest:
    dcfg = DatasetConfig(n_train=cfg.n_train, n_test=cfg.n_test, image_size=cfg.image_size)
    return build_dataset(cfg.data_dir, dcfg, cfg.data_seed)


def load_data(cfg: TrainConfig, split: str):
    path = Path(cfg.data_dir) / MANIFEST_FILE
    if not path.exists():
        raise DataError(f"no dataset manifest at {path}; run gen-data first")
    X, y, paths, skipped = load_split(SampleManifest.read(path), split, cfg.max_area, cfg.allow_empty_masks)
    if X.shape[2] % 16 or X.shape[3] % 16:
        raise DataError(f"image size {X.shape[2]}x{X.shape[3]} is not divisible by 16")
    return X, y, paths, skipped


def _fmt(value: float) -> str:
    return "" if isinstance(value, float) and math.isnan(value) else repr(value)


@dataclass
class TrainResult:
    estimator: InharmonyLocalizer
    out_dir: Path
    metrics: MetricsReport

    @property
    def checkpoint(self) -> Path:
        return self.out_dir / CHECKPOINT_DIR


def _dump_failure(out: Path, est: InharmonyLocalizer) -> Path:
    dump = out / "nan_dump"
    x, m = est.last_batch_
    tensors = {"batch.images": x, "batch.masks": m, **dict(est.params_.items())}
    ckpt_io.save_tensors(dump, tensors)
    return dump


def train(cfg: TrainConfig) -> TrainResult:
    """Train on the train split, checkpoint every epoch, evaluate on the test split."""
    torch.set_num_threads(cfg.threads)
    X, y, _, skipped = load_data(cfg, "train")
    if skipped:
        log.info("%d training pairs rejected", skipped)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / CONFIG_FILE)
    est = estimator_from_config(cfg)

    with open(out / TRAIN_LOG, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)

        def on_step(row):
            writer.writerow([row["step"]] + [_fmt(row[k]) for k in LOG_FIELDS[1:]])

        def on_epoch_end(est, epoch):
            fh.flush()
            est.save(out / CHECKPOINT_DIR)
            log.info("epoch %d done, last total loss %s", epoch + 1, est.history_[-1]["total"])

        try:
            est.fit(X, y, on_step=on_step, on_epoch_end=on_epoch_end)
        except NumericalError:
            if getattr(est, "last_batch_", None) is not None:
                log.error("non-finite loss; last batch and parameters dumped to %s", _dump_failure(out, est))
            raise
    if cfg.epochs == 0:
        est.save(out / CHECKPOINT_DIR)
    metrics = _evaluate_estimator(est, cfg)
    write_metrics(metrics, out)
    return TrainResult(est, out, metrics)


def write_metrics(report: MetricsReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / EVAL_CSV).write_text(report.to_csv())
    (out / EVAL_TABLE).write_text(report.to_table())


def _evaluate_estimator(est: InharmonyLocalizer, cfg: TrainConfig, split: str = "test") -> MetricsReport:
    X, y, _, skipped = load_data(cfg, split)
    report = est.evaluate(X, y, pooled_ap=cfg.pooled_ap)
    if skipped:
        log.info("%d %s pairs rejected", skipped, split)
    return report


def load_for_config(cfg: TrainConfig, checkpoint) -> InharmonyLocalizer:
    """Build the architecture described by ``cfg`` and load ``checkpoint`` into it strictly."""
    path = Path(checkpoint)
    est = estimator_from_config(cfg)
    saved = path / ESTIMATOR_FILE
    if saved.exists():
        stored = {k: parse_literal(v) for k, v in parse_key_values(saved.read_text()).items()}
        ours = est.get_params()
        diff = [k for k in ARCHITECTURE_KEYS if k in stored and stored[k] != ours[k]]
        if diff:
            detail = ", ".join(f"{k}: checkpoint {stored[k]!r} vs config {ours[k]!r}" for k in diff)
            raise ckpt_io.CheckpointError(f"checkpoint/config architecture mismatch ({detail})")
    return est.load_weights(path)


def evaluate(cfg: TrainConfig, checkpoint, split: str = "test") -> MetricsReport:
    """Metrics of ``checkpoint`` on ``split``; the checkpoint is only read."""
    torch.set_num_threads(cfg.threads)
    return _evaluate_estimator(load_for_config(cfg, checkpoint), cfg, split)


def discrepancy_stats(cfg: TrainConfig, checkpoint, split: str = "test") -> DiscrepancyStats:
    torch.set_num_threads(cfg.threads)
    est = load_for_config(cfg, checkpoint)
    X, y, _, _ = load_data(cfg, split)
    return est.discrepancy_stats(X, y)


def _read_image(path, multiple: int = 16) -> np.ndarray:
    rgb = read_ppm(path)
    h, w = rgb.shape[:2]
    if h % multiple or w % multiple:
        raise DataError(f"{path}: image size {h}x{w} is not divisible by {multiple}")
    return from_uint8(rgb)


def infer(checkpoint, image_path, out_mask_path, out_retouched_path=None) -> float:
    """Write the binary mask (PGM, values 0/255) and optionally I' (PPM); return the mask area fraction."""
    est = InharmonyLocalizer.load(checkpoint)
    image = _read_image(image_path)[None]
    mask = est.predict(image)[0]
    write_pgm(out_mask_path, mask * 255)
    if out_retouched_path is not None:
        write_ppm(out_retouched_path, to_uint8(est.transform(image)[0]))
    return float(mask.mean())


def dump_field(checkpoint, image_path, out_dir) -> Path:
    """Write the per-pixel affine field and guidance map for one image as a tensor container."""
    est = InharmonyLocalizer.load(checkpoint)
    if not est.color_map:
        raise ValueError("checkpoint has no color-mapping stage")
    image = torch.from_numpy(_read_image(image_path)[None])
    params = est.params_.view("colormap.")
    with torch.no_grad():
        guide = compute_guidance(image, params)
        field = slice_grid(predict_grid(image, params, est._cm_cfg), guide)
    ckpt_io.save_tensors(out_dir, {"field": field[0], "guidance": guide[0]})
    return Path(out_dir)


@dataclass
class GradcheckSummary:
    results: list[gradsuite.CaseResult]
    fault_err: float
    tol: float

    @property
    def fault_caught(self) -> bool:
        return self.fault_err > 0.3

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results) and self.fault_caught

    def to_table(self) -> str:
        lines = [f"{'op':<20} {'seed':>4} {'max_rel_err':>12}  status"]
        for r in self.results:
            lines.append(f"{r.name:<20} {r.seed:>4} {r.max_rel_err:>12.3e}  {'ok' if r.passed else 'FAIL'}")
        lines.append(f"{'planted fault':<20} {'':>4} {self.fault_err:>12.3e}  "
                     f"{'caught' if self.fault_caught else 'MISSED'}")
        return "\n".join(lines) + "\n"


def gradcheck_all(seeds=(0, 1, 2), tol: float = 1e-4) -> GradcheckSummary:
    results = [gradsuite.run_case(name, s, tol) for name in gradsuite.CASES for s in seeds]
    return GradcheckSummary(results, gradsuite.planted_fault(), tol)
