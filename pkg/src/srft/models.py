"""Toy SR networks in three families, with scale surgery, dropout and artifact injection.

edsr_style
    head conv, residual trunk at LR resolution, learnable sub-pixel tail
    (conv + pixel shuffle per upsampling module), output conv, plus a bicubic
    skip of the input.
enet_style
    same trunk; the tail interleaves fixed bicubic interpolation with convs.
vsr_style
    input is already bicubically interpolated to HR size; no tail, the input
    itself is the global skip.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .degradation import bicubic_resize, upsample

logger = logging.getLogger(__name__)

FAMILIES = ("edsr_style", "enet_style", "vsr_style")
ENET_SLOPE = 0.2


@dataclass(frozen=True)
class ModelSpec:
    family: str = "edsr_style"
    trunk_blocks: int = 4
    width: int = 16
    train_scale: int = 4
    channels: int = 3
    tail: tuple = (2, 2)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.trunk_blocks < 1:
            raise ValueError(f"trunk_blocks must be >= 1, got {self.trunk_blocks}")
        if self.width < 4:
            raise ValueError(f"width must be >= 4, got {self.width}")
        if any(f < 1 for f in self.tail):
            raise ValueError(f"tail factors must be >= 1, got {self.tail}")
        if self.family == "vsr_style" and self.tail:
            raise ValueError("vsr_style models have no upsampling tail")

    @property
    def scale(self) -> int:
        """Spatial factor between network input and output."""
        return math.prod(self.tail) if self.tail else 1

    def to_text(self) -> str:
        tail = ",".join(str(f) for f in self.tail) or "-"
        return (
            f"family={self.family} trunk_blocks={self.trunk_blocks} width={self.width} "
            f"train_scale={self.train_scale} channels={self.channels} tail={tail}"
        )

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        fields = dict(tok.split("=", 1) for tok in text.split())
        try:
            tail = () if fields["tail"] == "-" else tuple(int(f) for f in fields["tail"].split(","))
            return cls(
                family=fields["family"],
                trunk_blocks=int(fields["trunk_blocks"]),
                width=int(fields["width"]),
                train_scale=int(fields["train_scale"]),
                channels=int(fields["channels"]),
                tail=tail,
            )
        except KeyError as exc:
            raise ValueError(f"model spec record is missing field {exc}") from None


def default_spec(family: str = "edsr_style", scale: int = 4, **kw) -> ModelSpec:
    """Spec for a model trained at ``scale`` (x2 modules for powers of two)."""
    if family == "vsr_style":
        tail: tuple = ()
    elif scale == 1:
        tail = ()
    elif scale in (2, 3):
        tail = (scale,)
    elif scale == 4:
        tail = (2, 2)
    else:
        raise ValueError(f"unsupported training scale {scale}")
    return ModelSpec(family=family, train_scale=scale, tail=tail, **kw)


@dataclass
class Model:
    spec: ModelSpec
    params: dict = field(default_factory=dict)
    dropout_p: float = 0.0

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()}, self.dropout_p)

    @property
    def scale(self) -> int:
        return self.spec.scale

    def num_params(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def has_artifact(self) -> bool:
        return "artifact.bias" in self.params


@dataclass
class SurgeryReport:
    old_scale: int
    new_scale: int
    removed: list = field(default_factory=list)
    added: list = field(default_factory=list)
    degraded_start: bool = False
    note: str = ""


def _conv_init(rng: np.random.Generator, out_c: int, in_c: int, k: int = 3, gain: float = 1.0):
    bound = gain / math.sqrt(in_c * k * k)
    w = rng.uniform(-bound, bound, size=(out_c, in_c, k, k)).astype(np.float32)
    return w, np.zeros(out_c, dtype=np.float32)


def _tail_module_params(rng, spec: ModelSpec, idx: int, factor: int) -> dict:
    w = spec.width
    out_c = w * factor * factor if spec.family == "edsr_style" else w
    weight, bias = _conv_init(rng, out_c, w)
    return {f"tail.{idx}.weight": weight, f"tail.{idx}.bias": bias}


def build(spec: ModelSpec, rng: np.random.Generator) -> Model:
    """Fresh model with fan-in scaled uniform weights and zero biases."""
    w, c = spec.width, spec.channels
    params: dict = {}
    params["head.weight"], params["head.bias"] = _conv_init(rng, w, c)
    for i in range(spec.trunk_blocks):
        params[f"body.{i}.conv1.weight"], params[f"body.{i}.conv1.bias"] = _conv_init(rng, w, w)
        params[f"body.{i}.conv2.weight"], params[f"body.{i}.conv2.bias"] = _conv_init(rng, w, w, gain=0.1)
    for j, f in enumerate(spec.tail):
        params.update(_tail_module_params(rng, spec, j, f))
    # small output layer: an untrained network is close to bicubic interpolation
    params["out.weight"], params["out.bias"] = _conv_init(rng, c, w, gain=0.1)
    return Model(spec, params)


def prepare_input(model: Model, y: np.ndarray, scale: int) -> np.ndarray:
    """Network input for an LR observation ``y`` to be super-resolved by ``scale``."""
    if model.spec.family == "vsr_style":
        return bicubic_resize(y, scale, "up") if scale > 1 else y
    return y


def forward(model: Model, y, rng: Optional[np.random.Generator] = None,
            leaves: Optional[dict] = None) -> T.Tensor:
    """Run the network.

    ``leaves`` maps parameter names to grad-requiring tensors when building a
    graph for training; otherwise parameters enter as constants.  Dropout is
    active only when ``model.dropout_p > 0`` and ``rng`` is given.
    """
    spec = model.spec
    x = y if isinstance(y, T.Tensor) else T.Tensor(np.asarray(y))
    if x.data.ndim != 4 or x.data.shape[1] != spec.channels:
        raise ValueError(f"model expects N x {spec.channels} x H x W input, got {x.data.shape}")
    P = leaves if leaves is not None else {}

    def p(name):
        return P[name] if name in P else T.Tensor(model.params[name])

    def conv(h, name):
        return T.conv2d(h, p(f"{name}.weight"), p(f"{name}.bias"), pad=1)

    drop_rng = rng if model.dropout_p > 0 else None
    h = conv(x, "head")
    for i in range(spec.trunk_blocks):
        r = conv(T.relu(conv(h, f"body.{i}.conv1")), f"body.{i}.conv2")
        h = T.add(h, r)
        if i == spec.trunk_blocks - 1 and "artifact.bias" in model.params:
            h = T.tile_add(h, p("artifact.bias"))
        h = T.dropout(h, model.dropout_p, drop_rng)
    for j, f in enumerate(spec.tail):
        if spec.family == "edsr_style":
            h = T.pixel_shuffle(conv(h, f"tail.{j}"), f)
        else:
            if f > 1:
                h = upsample(h, f)
            h = T.leaky_relu(conv(h, f"tail.{j}"), ENET_SLOPE)
    out = conv(h, "out")
    skip = upsample(x, spec.scale) if spec.scale > 1 else x
    return T.add(out, skip)


def predict(model: Model, y: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    return forward(model, y, rng).data


def scale_surgery(model: Model, new_scale: int, rng: Optional[np.random.Generator] = None):
    """Adapt a x4 model to super-resolve by ``new_scale`` (2 or 3).

    Returns ``(model, SurgeryReport)``.  Surviving parameters are copied
    bit-exactly; the input model is not modified.
    """
    spec = model.spec
    current = spec.train_scale if spec.family == "vsr_style" else spec.scale
    if current != 4:
        raise ValueError(f"scale surgery expects a x4 model, got scale {current}")
    if new_scale not in (2, 3):
        raise ValueError(f"unsupported target scale {new_scale} for {spec.family}")
    report = SurgeryReport(old_scale=4, new_scale=new_scale)
    out = model.copy()
    if spec.family == "vsr_style":
        report.note = "no modification: the caller interpolates the input to the new scale"
        return out, report
    if spec.family == "enet_style":
        if len(spec.tail) != 2:
            raise ValueError(f"enet_style surgery expects two interpolation stages, got {spec.tail}")
        out.spec = replace(spec, tail=(new_scale, 1))
        report.note = f"interpolation factors {spec.tail} -> {out.spec.tail}; no weights removed"
        return out, report
    # edsr_style
    if spec.tail != (2, 2):
        raise ValueError(f"edsr_style surgery expects two x2 modules, got {spec.tail}")
    if new_scale == 2:
        report.removed = [k for k in out.params if k.startswith("tail.1.")]
        for k in report.removed:
            del out.params[k]
        out.spec = replace(spec, tail=(2,))
        report.note = "removed the second x2 sub-pixel module"
    else:
        if rng is None:
            raise ValueError("x3 surgery needs an rng to initialize the new upsampling module")
        report.removed = [k for k in out.params if k.startswith("tail.")]
        for k in report.removed:
            del out.params[k]
        out.spec = replace(spec, tail=(3,))
        fresh = _tail_module_params(rng, out.spec, 0, 3)
        # keep the parameter order stable: tail before out
        rebuilt = {}
        for k, v in out.params.items():
            if k.startswith("out.") and fresh:
                rebuilt.update(fresh)
                fresh = {}
            rebuilt[k] = v
        out.params = rebuilt
        report.added = ["tail.0.weight", "tail.0.bias"]
        report.degraded_start = True
        report.note = "replaced both x2 modules with a randomly initialized x3 module"
        logger.warning("edsr_style x4 -> x3 surgery starts from a randomly initialized tail module")
    return out, report


def insert_dropout(model: Model, p: float) -> Model:
    """Copy of ``model`` with dropout after every residual block."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    out = model.copy()
    out.dropout_p = float(p)
    return out


def _dot_tile(period: int, phase: tuple) -> np.ndarray:
    """Zero-mean periodic dot: a Gaussian blob of width period/4 per tile."""
    sigma = period / 4.0
    ax = np.arange(period, dtype=np.float64)
    dy = (ax - phase[0] + period / 2) % period - period / 2
    dx = (ax - phase[1] + period / 2) % period - period / 2
    blob = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2 * sigma * sigma))
    return blob - blob.mean()


def inject_artifact(model: Model, eps: float, period: int, rng: np.random.Generator,
                    probe_size: int = 8) -> Model:
    """Copy of ``model`` whose output carries an additive periodic dot pattern.

    The pattern is a zero-mean periodic bias added to the trunk output (before
    the last dropout), calibrated so that the output difference has max
    absolute value ``eps`` on a flat probe image.  ``period`` is measured in
    output pixels and must be a multiple of the model scale.
    """
    if eps < 0:
        raise ValueError(f"artifact amplitude must be non-negative, got {eps}")
    if eps == 0:
        return model.copy()
    s = model.spec.scale
    if period < 2 * s or period % s:
        raise ValueError(f"period {period} must be a multiple of the scale {s} and at least {2 * s}")
    tp = period // s
    c, w = model.spec.channels, model.spec.width
    phase = tuple(rng.uniform(0, tp, size=2))
    direction = rng.standard_normal(w)
    direction /= np.linalg.norm(direction)
    tile = direction[:, None, None] * _dot_tile(tp, phase)[None]

    out = model.copy()
    clean = model.copy()
    clean.params.pop("artifact.bias", None)
    side = probe_size * tp
    probe = np.full((1, c, side, side), 0.5, dtype=np.float32)
    base_art = model.params.get("artifact.bias")
    if base_art is None or base_art.shape != (1, w, tp, tp):
        base_art = np.zeros((1, w, tp, tp), dtype=np.float32)
    ref = predict(Model(clean.spec, {**clean.params, "artifact.bias": base_art}), probe)
    amp = 1.0
    for _ in range(8):
        out.params["artifact.bias"] = (base_art + amp * tile[None]).astype(np.float32)
        diff = np.abs(predict(out, probe) - ref)
        m = float(diff[:, :, s:-s or None, s:-s or None].max())
        if m == 0:
            raise ValueError("artifact has no effect on the output; model output layer is degenerate")
        if abs(m - eps) <= 1e-3 * eps:
            break
        amp *= eps / m
    logger.info("injected dot artifact: eps=%g period=%d feature amplitude=%.4g", eps, period, amp)
    return out
