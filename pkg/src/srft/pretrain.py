"""Supervised pretraining of the toy models on synthetic HR/LR pairs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .degradation import DegradationSpec, apply
from .models import Model, forward, prepare_input

logger = logging.getLogger(__name__)


# ------------------------------------------------------------ synthetic corpus


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Smooth noise: a random lattice upsampled with smoothstep interpolation."""
    grid = rng.random((cells + 2, cells + 2))
    t = np.linspace(0, cells, size, endpoint=False)
    i = t.astype(int)
    f = t - i
    f = f * f * (3 - 2 * f)
    rows = grid[i] * (1 - f)[:, None] + grid[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def synthetic_image(rng: np.random.Generator, size: int = 96) -> np.ndarray:
    """One RGB texture image in [0, 1]: multi-octave noise plus hard-edged shapes."""
    img = np.zeros((3, size, size))
    base = rng.random((3, 1, 1))
    img += base
    for octave, amp in ((2, 0.5), (4, 0.3), (8, 0.2), (16, 0.12)):
        for ch in range(3):
            img[ch] += amp * (_value_noise(rng, size, octave) - 0.5)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(int(rng.integers(4, 9))):
        color = rng.random((3, 1, 1))
        kind = rng.integers(0, 3)
        if kind == 0:  # rectangle
            x0, y0 = rng.uniform(-0.2, 1.0, 2) * size
            w, h = rng.uniform(0.1, 0.5, 2) * size
            mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
        elif kind == 1:  # disc
            cx, cy = rng.uniform(0, 1, 2) * size
            r = rng.uniform(0.05, 0.3) * size
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
        else:  # stripes in a half-plane
            ang = rng.uniform(0, math.pi)
            period = rng.uniform(3, 12)
            proj = xx * math.cos(ang) + yy * math.sin(ang)
            mask = (np.floor(proj / period) % 2 == 0) & (proj > rng.uniform(0, size))
        alpha = rng.uniform(0.5, 1.0)
        img = np.where(mask[None], (1 - alpha) * img + alpha * color, img)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None]


def generate_corpus(rng: np.random.Generator, count: int, size: int = 96) -> list:
    return [synthetic_image(rng, size) for _ in range(count)]


# ------------------------------------------------------------------- datasets


@dataclass
class PairDataset:
    hr: np.ndarray  # (count, C, P, P)
    lr: np.ndarray  # (count, C, P/s, P/s)
    patch_size: int
    a_train: DegradationSpec
    seed: int = 0
    coords: list = field(default_factory=list)  # (source image index, row, col) per pair

    def __len__(self) -> int:
        return int(self.hr.shape[0])


def synthesize(hr_images: Sequence[np.ndarray], a_train: DegradationSpec, patch_size: int, count: int,
               rng: np.random.Generator, seed: int = 0) -> PairDataset:
    """Random HR crops, each paired with its degraded counterpart."""
    s = a_train.scale
    if patch_size % s:
        raise ValueError(f"patch size {patch_size} is not divisible by scale {s}")
    usable = []
    for idx, im in enumerate(hr_images):
        if im.shape[2] < patch_size or im.shape[3] < patch_size:
            logger.warning("skipping image %d of size %s: smaller than patch %d", idx, im.shape[2:], patch_size)
            continue
        usable.append(idx)
    c = hr_images[0].shape[1] if hr_images else 3
    if count == 0:
        lp = patch_size // s
        return PairDataset(np.zeros((0, c, patch_size, patch_size), np.float32),
                           np.zeros((0, c, lp, lp), np.float32), patch_size, a_train, seed)
    if not usable:
        raise ValueError("no usable HR images: all are smaller than the patch size")
    hr = np.empty((count, c, patch_size, patch_size), dtype=np.float32)
    coords = []
    for k in range(count):
        idx = usable[int(rng.integers(len(usable)))]
        im = hr_images[idx]
        r0 = int(rng.integers(im.shape[2] - patch_size + 1))
        c0 = int(rng.integers(im.shape[3] - patch_size + 1))
        hr[k] = im[0, :, r0 : r0 + patch_size, c0 : c0 + patch_size]
        coords.append((idx, r0, c0))
    lr = apply(a_train, hr)
    return PairDataset(hr, lr, patch_size, a_train, seed, coords)


# ------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    loss: str = "mse"
    epochs: int = 30
    batch_size: int = 16
    lr: float = 2.0
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("mae", "mse"):
            raise ValueError(f"loss must be 'mae' or 'mse', got {self.loss!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError(f"invalid training configuration {self}")


def train(model: Model, dataset: PairDataset, cfg: TrainConfig):
    """Minibatch SGD with momentum.  Returns ``(model, per-epoch mean loss)``."""
    if model.spec.family != "vsr_style" and model.spec.scale != dataset.a_train.scale:
        raise ValueError(f"model scale {model.spec.scale} does not match dataset scale {dataset.a_train.scale}")
    work = model.copy()
    if cfg.epochs == 0 or len(dataset) == 0:
        return work, []
    loss_fn = T.mae_loss if cfg.loss == "mae" else T.mse_loss
    state = T.OptimState(cfg.lr, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    curve = []
    n = len(dataset)
    inputs = prepare_input(work, dataset.lr, dataset.a_train.scale)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            leaves = T.leaves_of(work.params)
            pred = forward(work, inputs[idx], None, leaves)
            loss = loss_fn(pred, dataset.hr[idx])
            val = float(loss.data)
            if not math.isfinite(val):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            T.sgd_step(work.params, T.collect_grads(leaves), state)
            total += val * len(idx)
        curve.append(total / n)
        logger.info("epoch %d: %s loss %.6f", epoch, cfg.loss, curve[-1])
    return work, curve
