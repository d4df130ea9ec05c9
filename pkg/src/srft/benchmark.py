"""Start/end PSNR comparison over a set of test images."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .degradation import DegradationSpec, apply
from .finetune import FinetuneConfig, finetune, lr_psnr
from .metrics import psnr
from .models import Model, predict, prepare_input

logger = logging.getLogger(__name__)

HEADER_NOTES = (
    "PSNR over all RGB channels jointly in [0,1], peak 1.0, no border cropping",
    "PS (perceptual similarity): n/a (out of scope)",
)
COLUMNS = ("model", "image", "psnr_start_db", "psnr_end_db", "lr_psnr_start_db", "lr_psnr_end_db",
           "iterations", "stop_reason", "ps_start", "ps_end", "error")


@dataclass
class EvalRecord:
    model_id: str
    image_id: str
    psnr_start_db: float = float("nan")
    psnr_end_db: float = float("nan")
    lr_psnr_start_db: float = float("nan")
    lr_psnr_end_db: float = float("nan")
    iterations: int = 0
    stop_reason: str = ""
    wall_seconds: float = 0.0
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


def evaluate_one(model: Model, x: np.ndarray, a_test: DegradationSpec, cfg: FinetuneConfig,
                 a_finetune: Optional[DegradationSpec] = None, model_id: str = "model",
                 image_id: str = "image") -> EvalRecord:
    """Degrade ``x`` with ``a_test``, then fine-tune with ``a_finetune`` (defaults to ``a_test``)."""
    rec = EvalRecord(model_id, image_id)
    t0 = time.perf_counter()
    try:
        a_ft = a_finetune or a_test
        y = apply(a_test, x)
        net_in = prepare_input(model, y, a_ft.scale)
        rec.psnr_start_db = psnr(predict(model, net_in), x)
        rec.lr_psnr_start_db = lr_psnr(model, y, a_ft, net_in)
        tuned, trace = finetune(model, y, a_ft, cfg, net_input=net_in)
        rec.psnr_end_db = psnr(predict(tuned, net_in), x)
        rec.lr_psnr_end_db = lr_psnr(tuned, y, a_ft, net_in)
        rec.iterations = trace.iterations
        rec.stop_reason = trace.stop_reason
    except Exception as exc:  # recorded in the row; the run continues
        logger.error("%s/%s failed: %s", model_id, image_id, exc)
        rec.error = f"{type(exc).__name__}: {exc}"
    rec.wall_seconds = time.perf_counter() - t0
    return rec


def run_benchmark(models: Mapping[str, Model], images: Mapping[str, np.ndarray],
                  a_train: Optional[DegradationSpec], a_test: DegradationSpec,
                  cfg: FinetuneConfig = None, *, a_finetune: Optional[DegradationSpec] = None,
                  threads: int = 1) -> list:
    """One :class:`EvalRecord` per (model, image), ordered by model then image id.

    ``a_train`` is only recorded for reporting; the observation is produced by
    ``a_test`` and fine-tuning uses ``a_finetune`` when given (blind setting).
    """
    cfg = cfg or FinetuneConfig()
    jobs = [(mid, iid) for mid in models for iid in sorted(images)]

    def run(job):
        mid, iid = job
        return evaluate_one(models[mid], images[iid], a_test, cfg, a_finetune, mid, iid)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, jobs))
    return [run(j) for j in jobs]


def average_rows(records: list) -> list:
    """One ``average`` row per model over its successful images."""
    out = []
    for mid in dict.fromkeys(r.model_id for r in records):
        ok = [r for r in records if r.model_id == mid and r.ok]
        avg = EvalRecord(mid, "average")
        if ok:
            for name in ("psnr_start_db", "psnr_end_db", "lr_psnr_start_db", "lr_psnr_end_db"):
                setattr(avg, name, float(np.mean([getattr(r, name) for r in ok])))
            avg.iterations = int(round(np.mean([r.iterations for r in ok])))
            avg.wall_seconds = float(np.sum([r.wall_seconds for r in ok]))
        else:
            avg.error = "no successful images"
        out.append(avg)
    return out


def _cells(r: EvalRecord) -> list:
    return [r.model_id, r.image_id, f"{r.psnr_start_db:.4f}", f"{r.psnr_end_db:.4f}",
            f"{r.lr_psnr_start_db:.4f}", f"{r.lr_psnr_end_db:.4f}", str(r.iterations),
            r.stop_reason, "n/a", "n/a", r.error.replace(",", ";")]


def _header(a_train, a_test, a_finetune) -> list:
    lines = list(HEADER_NOTES)
    if a_train is not None:
        lines.append(f"a_train: {a_train.describe()}")
    lines.append(f"a_test: {a_test.describe()}")
    if a_finetune is not None:
        lines.append(f"a_finetune: {a_finetune.describe()}")
    return lines


def to_csv(records: list, a_train=None, a_test=None, a_finetune=None) -> str:
    """CSV with per-image rows followed by per-model average rows.

    Wall-clock time is left out so the file is reproducible.
    """
    lines = [f"# {h}" for h in _header(a_train, a_test, a_finetune)] if a_test is not None else []
    lines.append(",".join(COLUMNS))
    for r in list(records) + average_rows(records):
        lines.append(",".join(_cells(r)))
    return "\n".join(lines) + "\n"


def to_table(records: list, a_train=None, a_test=None, a_finetune=None) -> str:
    rows = [list(COLUMNS)] + [_cells(r) for r in list(records) + average_rows(records)]
    widths = [max(len(row[i]) for row in rows) for i in range(len(COLUMNS))]
    text = [f"# {h}" for h in _header(a_train, a_test, a_finetune)] if a_test is not None else []
    for k, row in enumerate(rows):
        text.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if k == 0:
            text.append("  ".join("-" * w for w in widths))
    return "\n".join(text) + "\n"
