"""Self-supervised test-time fine-tuning of an SR network.

Starting from pretrained parameters, minimize mean ||A_test f(y) - y||^2 with
SGD + momentum on the single observed image, monitoring LR-PSNR for plateau
based early stopping, and return the best snapshot seen.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .degradation import DegradationSpec, apply, degrade
from .metrics import psnr
from .models import Model, forward, predict, prepare_input

logger = logging.getLogger(__name__)

STOP_REASONS = ("plateau", "max_iters", "already_consistent", "non_finite")


@dataclass
class FinetuneConfig:
    lr: float = 0.01
    momentum: float = 0.9
    max_iters: int = 4000
    plateau_delta_db: float = 0.04
    patience: int = 50
    monitor: str = "lr_psnr"
    # custom_scalar monitors: "max" if larger is better, "min" otherwise
    monitor_mode: str = "max"
    stop_when_consistent: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.plateau_delta_db < 0:
            raise ValueError(f"plateau_delta_db must be >= 0, got {self.plateau_delta_db}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.monitor not in ("lr_psnr", "custom_scalar"):
            raise ValueError(f"unknown monitor {self.monitor!r}")
        if self.monitor_mode not in ("max", "min"):
            raise ValueError(f"monitor_mode must be 'max' or 'min', got {self.monitor_mode!r}")


@dataclass
class TraceRecord:
    iter: int
    loss: float
    lr_psnr_db: float
    monitor: float


@dataclass
class FinetuneTrace:
    records: list = field(default_factory=list)
    stop_reason: str = ""
    best_iter: int = 0

    @property
    def iterations(self) -> int:
        """Number of parameter updates performed."""
        return max(len(self.records) - 1, 0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("iter,loss,lr_psnr_db\n")
        for r in self.records:
            buf.write(f"{r.iter},{r.loss!r},{r.lr_psnr_db!r}\n")
        buf.write(f"# stop_reason={self.stop_reason}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "FinetuneTrace":
        trace = cls()
        lines = text.strip().splitlines()
        if not lines or lines[0].strip() != "iter,loss,lr_psnr_db":
            raise ValueError("trace CSV must start with header 'iter,loss,lr_psnr_db'")
        for ln in lines[1:]:
            if ln.startswith("# stop_reason="):
                trace.stop_reason = ln.split("=", 1)[1].strip()
                continue
            i, loss, db = ln.split(",")
            trace.records.append(TraceRecord(int(i), float(loss), float(db), float(db)))
        return trace


def lr_psnr(model: Model, y: np.ndarray, a_test: DegradationSpec,
            net_input: Optional[np.ndarray] = None) -> float:
    """PSNR between A_test f(y) and the observation y (peak 1)."""
    if net_input is None:
        net_input = prepare_input(model, y, a_test.scale)
    return psnr(apply(a_test, predict(model, net_input)), y)


def _check_shapes(model: Model, y: np.ndarray, net_input: np.ndarray, a_test: DegradationSpec) -> None:
    n, c, h, w = net_input.shape
    s = model.spec.scale
    out_shape = (n, model.spec.channels, h * s, w * s)
    try:
        lr_shape = a_test.output_shape(out_shape)
    except ValueError as exc:
        raise ValueError(f"A_test cannot be applied to model output {out_shape}: {exc}") from None
    if lr_shape != tuple(y.shape):
        raise ValueError(
            f"A_test maps model output {out_shape} to {lr_shape}, which does not match observation {tuple(y.shape)}"
        )


def finetune(model: Model, y: np.ndarray, a_test: DegradationSpec, cfg: FinetuneConfig = None,
             *, net_input: Optional[np.ndarray] = None,
             custom_monitor: Optional[Callable[[np.ndarray], float]] = None,
             rng: Optional[np.random.Generator] = None):
    """Fine-tune a copy of ``model`` on observation ``y``.

    ``custom_monitor`` receives the current SR estimate when
    ``cfg.monitor == "custom_scalar"``.  ``rng`` drives dropout if the model has
    it enabled.  Returns ``(model, FinetuneTrace)``.
    """
    cfg = cfg or FinetuneConfig()
    y = np.asarray(y)
    if net_input is None:
        net_input = prepare_input(model, y, a_test.scale)
    _check_shapes(model, y, net_input, a_test)
    if cfg.monitor == "custom_scalar" and custom_monitor is None:
        raise ValueError("custom_scalar monitor selected but no custom_monitor given")

    work = model.copy()
    state = T.OptimState(cfg.lr, cfg.momentum)
    trace = FinetuneTrace()
    sign = 1.0 if (cfg.monitor == "lr_psnr" or cfg.monitor_mode == "max") else -1.0
    best_val = -math.inf
    best_params = {k: v.copy() for k, v in work.params.items()}
    ref_val = -math.inf
    stale = 0
    y_t = T.Tensor(y)

    for it in range(cfg.max_iters + 1):
        leaves = T.leaves_of(work.params)
        x_hat = forward(work, net_input, rng, leaves)
        lr_pred = degrade(a_test, x_hat)
        loss = T.mse_loss(lr_pred, y_t)
        loss_val = float(loss.data)
        db = psnr(lr_pred.data, y)
        mon = db if cfg.monitor == "lr_psnr" else float(custom_monitor(x_hat.data))
        trace.records.append(TraceRecord(it, loss_val, db, mon))

        if not (math.isfinite(loss_val) and math.isfinite(mon)):
            logger.error("non-finite loss at iteration %d; returning best snapshot (iter %d)", it, trace.best_iter)
            trace.stop_reason = "non_finite"
            break
        score = sign * mon
        if score > best_val:
            best_val = score
            trace.best_iter = it
            if it > 0:
                best_params = {k: v.copy() for k, v in work.params.items()}
        if score > ref_val + cfg.plateau_delta_db:
            ref_val = score
            stale = 0
        else:
            stale += 1
        if it == 0 and cfg.stop_when_consistent and loss_val == 0.0:
            trace.stop_reason = "already_consistent"
            break
        if stale >= cfg.patience:
            trace.stop_reason = "plateau"
            break
        if it == cfg.max_iters:
            trace.stop_reason = "max_iters"
            break

        loss.backward()
        T.sgd_step(work.params, T.collect_grads(leaves), state)

    work.params = best_params
    logger.info(
        "finetune stopped (%s) after %d updates; best iter %d, LR-PSNR %.3f -> %.3f dB",
        trace.stop_reason, trace.iterations, trace.best_iter,
        trace.records[0].lr_psnr_db, trace.records[trace.best_iter].lr_psnr_db,
    )
    return work, trace
