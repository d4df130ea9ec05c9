"""Image-formation operators y = A x with exact adjoints.

A :class:`DegradationSpec` is an ordered list of stages (blur, bicubic
downsampling, identity).  ``apply`` and ``apply_adjoint`` act on N x C x H x W
arrays; :func:`degrade` wraps the pair as an autodiff node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, linear_map

SUPPORTED_SCALES = (1, 2, 3, 4)


@dataclass(frozen=True)
class KernelSpec:
    """Parametric blur kernel.

    ``kind`` is ``"gaussian"`` (``sigma_x``, ``sigma_y`` in pixels, ``theta`` in
    radians), ``"disk"`` (``radius``) or ``"explicit"`` (``matrix``).
    """

    kind: str
    support: int
    sigma_x: float = 0.0
    sigma_y: float = 0.0
    theta: float = 0.0
    radius: float = 0.0
    matrix: Optional[tuple] = None

    @classmethod
    def gaussian(cls, sigma_x: float, sigma_y: Optional[float] = None, theta: float = 0.0,
                 support: Optional[int] = None) -> "KernelSpec":
        sigma_y = sigma_x if sigma_y is None else sigma_y
        if support is None:
            support = 2 * math.ceil(3 * max(sigma_x, sigma_y)) + 1
        return cls("gaussian", int(support), sigma_x=float(sigma_x), sigma_y=float(sigma_y), theta=float(theta))

    @classmethod
    def disk(cls, radius: float, support: Optional[int] = None) -> "KernelSpec":
        if support is None:
            support = 2 * math.ceil(radius) + 1
        return cls("disk", int(support), radius=float(radius))

    @classmethod
    def explicit(cls, matrix) -> "KernelSpec":
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"explicit kernel must be square, got shape {m.shape}")
        return cls("explicit", m.shape[0], matrix=tuple(tuple(float(v) for v in row) for row in m))

    def to_text(self) -> str:
        if self.kind == "gaussian":
            return f"gaussian {self.sigma_x!r} {self.sigma_y!r} {self.theta!r} {self.support}\n"
        if self.kind == "disk":
            return f"disk {self.radius!r} {self.support}\n"
        rows = "\n".join(" ".join(repr(v) for v in row) for row in self.matrix)
        return f"explicit\n{rows}\n"

    @classmethod
    def from_text(cls, text: str) -> "KernelSpec":
        lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        if not lines:
            raise ValueError("empty kernel spec")
        head = lines[0].split()
        kind = head[0].lower()
        try:
            if kind == "gaussian":
                if len(head) != 5:
                    raise ValueError("expected 'gaussian sx sy theta support'")
                return cls.gaussian(float(head[1]), float(head[2]), float(head[3]), int(head[4]))
            if kind == "disk":
                if len(head) != 3:
                    raise ValueError("expected 'disk r support'")
                return cls.disk(float(head[1]), int(head[2]))
            if kind == "explicit":
                rows = [[float(v) for v in ln.replace(",", " ").split()] for ln in lines[1:]]
                return cls.explicit(rows)
        except ValueError as exc:
            raise ValueError(f"malformed kernel spec {lines[0]!r}: {exc}") from None
        raise ValueError(f"unknown kernel kind {head[0]!r}")


def _disk_quadrant_area(x: np.ndarray, y: np.ndarray, r: float) -> np.ndarray:
    """Area of {0<=u<=x, 0<=v<=y, u^2+v^2<=r^2} for x, y >= 0."""

    def prim(t):
        t = np.minimum(t, r)
        return 0.5 * (t * np.sqrt(np.maximum(r * r - t * t, 0.0)) + r * r * np.arcsin(t / r))

    xc = np.minimum(x, r)
    yc = np.minimum(y, r)
    uc = np.sqrt(np.maximum(r * r - yc * yc, 0.0))  # where the arc crosses v = y
    flat = yc * np.minimum(xc, uc)
    arc = np.where(xc > uc, prim(xc) - prim(uc), 0.0)
    return flat + arc


def _disk_rect_area(x0, x1, y0, y1, r: float) -> np.ndarray:
    def g(x, y):
        return np.sign(x) * np.sign(y) * _disk_quadrant_area(np.abs(x), np.abs(y), r)

    return g(x1, y1) - g(x0, y1) - g(x1, y0) + g(x0, y0)


def realize_kernel(spec: KernelSpec) -> np.ndarray:
    """Return the normalized kernel as a float64 (1, 1, k, k) array."""
    k = spec.support
    if k < 3 or k % 2 == 0:
        if not (spec.kind == "explicit" and k % 2 == 1):
            raise ValueError(f"kernel support must be odd and >= 3, got {k}")
    half = k // 2
    off = np.arange(-half, half + 1, dtype=np.float64)
    if spec.kind == "gaussian":
        if spec.sigma_x <= 0 or spec.sigma_y <= 0:
            raise ValueError(f"gaussian sigmas must be positive, got {spec.sigma_x}, {spec.sigma_y}")
        c, s = math.cos(spec.theta), math.sin(spec.theta)
        rot = np.array([[c, -s], [s, c]])
        cov = rot @ np.diag([spec.sigma_x ** 2, spec.sigma_y ** 2]) @ rot.T
        inv = np.linalg.inv(cov)
        # rows index v (vertical), columns index u (horizontal)
        v, u = np.meshgrid(off, off, indexing="ij")
        q = inv[0, 0] * u * u + 2 * inv[0, 1] * u * v + inv[1, 1] * v * v
        ker = np.exp(-0.5 * q)
    elif spec.kind == "disk":
        if spec.radius <= 0:
            raise ValueError(f"disk radius must be positive, got {spec.radius}")
        v, u = np.meshgrid(off, off, indexing="ij")
        ker = np.maximum(_disk_rect_area(u - 0.5, u + 0.5, v - 0.5, v + 0.5, spec.radius), 0.0)
    elif spec.kind == "explicit":
        ker = np.array(spec.matrix, dtype=np.float64)
        if (ker < 0).any() or not np.isfinite(ker).all():
            raise ValueError("explicit kernel must be finite and non-negative")
    else:
        raise ValueError(f"unknown kernel kind {spec.kind!r}")
    total = ker.sum()
    if total <= 0:
        raise ValueError("kernel has zero mass")
    return (ker / total)[None, None]


def random_gaussian_spec(rng: np.random.Generator, scale: int) -> KernelSpec:
    """Random anisotropic Gaussian with sigmas in [0.35 s, 1.25 s]."""
    sx, sy = rng.uniform(0.35 * scale, 1.25 * scale, size=2)
    theta = rng.uniform(0.0, math.pi)
    return KernelSpec.gaussian(float(sx), float(sy), float(theta))


def perturb_kernel(spec: KernelSpec, rel: float, rng: np.random.Generator) -> KernelSpec:
    """Inexact kernel estimate: sigmas scaled by U[1-rel, 1+rel], theta jittered by +-rel*pi/8."""
    if not 0.0 <= rel <= 0.5:
        raise ValueError(f"rel must be in [0, 0.5], got {rel}")
    if rel == 0.0:
        return spec
    fx, fy, ft = rng.uniform(-1.0, 1.0, size=3)
    if spec.kind == "gaussian":
        return replace(
            spec,
            sigma_x=spec.sigma_x * (1 + rel * fx),
            sigma_y=spec.sigma_y * (1 + rel * fy),
            theta=spec.theta + rel * math.pi / 8 * ft,
        )
    if spec.kind == "disk":
        return replace(spec, radius=spec.radius * (1 + rel * fx))
    return spec


# ------------------------------------------------------------------- bicubic


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


@lru_cache(maxsize=256)
def resize_matrix(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """(n_out, n_in) resampling matrix for one axis, edge-replicated borders."""
    scale = n_out / n_in
    kscale = min(scale, 1.0) if antialias else 1.0
    radius = 2.0 / kscale
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        center = (i + 0.5) / scale - 0.5
        lo = math.floor(center - radius)
        hi = math.ceil(center + radius)
        taps = np.arange(lo, hi + 1)
        wts = kscale * cubic((center - taps) * kscale)
        wts /= wts.sum()
        np.add.at(mat[i], np.clip(taps, 0, n_in - 1), wts)
    mat.setflags(write=False)
    return mat


def _apply_separable(x: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    out = np.einsum("ih,nchw->nciw", mh, x.astype(np.float64), optimize=True)
    out = np.einsum("nciw,jw->ncij", out, mw, optimize=True)
    return out.astype(x.dtype)


def bicubic_resize(x: np.ndarray, scale: int, direction: str = "down", antialias: bool = True) -> np.ndarray:
    """Integer-factor bicubic resampling of an N x C x H x W array."""
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    n, c, h, w = x.shape
    if scale == 1:
        return x.copy()
    if direction == "down":
        if h % scale or w % scale:
            raise ValueError(f"cannot downsample {h}x{w} by {scale}: dimensions not divisible")
        oh, ow = h // scale, w // scale
    elif direction == "up":
        oh, ow = h * scale, w * scale
    else:
        raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")
    return _apply_separable(x, resize_matrix(h, oh, antialias), resize_matrix(w, ow, antialias))


def bicubic_resize_adjoint(g: np.ndarray, in_hw: tuple, scale: int, direction: str = "down",
                           antialias: bool = True) -> np.ndarray:
    h, w = in_hw
    if scale == 1:
        return g.copy()
    oh, ow = g.shape[2], g.shape[3]
    return _apply_separable(g, resize_matrix(h, oh, antialias).T, resize_matrix(w, ow, antialias).T)


def upsample(x, scale: int) -> Tensor:
    """Differentiable bicubic upsampling (used inside the models)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    hw = x.data.shape[2:]
    return linear_map(
        x,
        lambda a: bicubic_resize(a, scale, "up"),
        lambda g: bicubic_resize_adjoint(g, hw, scale, "up"),
        op=f"bicubic_up{scale}",
    )


# ---------------------------------------------------------------------- blur


def _blur(x: np.ndarray, ker: np.ndarray) -> np.ndarray:
    """True convolution with replicate padding, output same size as input."""
    k = ker.shape[-1]
    half = k // 2
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (half, half), (half, half)), mode="edge")
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return np.einsum("nchwij,ij->nchw", win, ker[0, 0, ::-1, ::-1], optimize=True).astype(x.dtype)


def _blur_adjoint(g: np.ndarray, ker: np.ndarray) -> np.ndarray:
    k = ker.shape[-1]
    half = k // 2
    n, c, h, w = g.shape
    # transpose of the valid correlation: full correlation with the rotated kernel
    gp = np.pad(g.astype(np.float64), ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    win = sliding_window_view(gp, (k, k), axis=(2, 3))
    full = np.einsum("nchwij,ij->nchw", win, ker[0, 0], optimize=True)  # (h + 2 half, w + 2 half)
    # transpose of edge padding: fold the margins back onto the border rows/cols
    top, bottom = full[:, :, :half].sum(axis=2), full[:, :, half + h:].sum(axis=2)
    full = full[:, :, half:half + h]
    full[:, :, 0] += top
    full[:, :, -1] += bottom
    left, right = full[:, :, :, :half].sum(axis=3), full[:, :, :, half + w:].sum(axis=3)
    full = full[:, :, :, half:half + w].copy()
    full[:, :, :, 0] += left
    full[:, :, :, -1] += right
    return full.astype(g.dtype)


# ----------------------------------------------------------- composed operator


@dataclass(frozen=True)
class Blur:
    kernel: KernelSpec

    def realized(self) -> np.ndarray:
        return realize_kernel(self.kernel)


@dataclass(frozen=True)
class BicubicDown:
    scale: int
    antialias: bool = True

    def __post_init__(self):
        if self.scale not in SUPPORTED_SCALES:
            raise ValueError(f"unsupported downsampling scale {self.scale}; expected one of {SUPPORTED_SCALES}")


@dataclass(frozen=True)
class Identity:
    pass


Stage = Union[Blur, BicubicDown, Identity]


@dataclass(frozen=True)
class DegradationSpec:
    stages: tuple = field(default_factory=tuple)

    @classmethod
    def bicubic(cls, scale: int, antialias: bool = True, kernel: Optional[KernelSpec] = None) -> "DegradationSpec":
        stages: list = []
        if kernel is not None:
            stages.append(Blur(kernel))
        if scale > 1:
            stages.append(BicubicDown(scale, antialias))
        return cls(tuple(stages) if stages else (Identity(),))

    @property
    def scale(self) -> int:
        s = 1
        for st in self.stages:
            if isinstance(st, BicubicDown):
                s *= st.scale
        return s

    def output_shape(self, shape: tuple) -> tuple:
        n, c, h, w = shape
        for st in self.stages:
            if isinstance(st, BicubicDown):
                if h % st.scale or w % st.scale:
                    raise ValueError(f"stage {st} cannot take spatial size {h}x{w}")
                h, w = h // st.scale, w // st.scale
        return (n, c, h, w)

    def describe(self) -> str:
        parts = []
        for st in self.stages:
            if isinstance(st, Blur):
                parts.append("blur[" + st.kernel.to_text().strip().replace("\n", "; ") + "]")
            elif isinstance(st, BicubicDown):
                parts.append(f"bicubic_down[x{st.scale}{'' if st.antialias else ', no-aa'}]")
            else:
                parts.append("identity")
        return " -> ".join(parts) or "identity"


def apply(spec: DegradationSpec, x: np.ndarray) -> np.ndarray:
    spec.output_shape(x.shape)
    out = x
    for st in spec.stages:
        if isinstance(st, Blur):
            out = _blur(out, st.realized())
        elif isinstance(st, BicubicDown):
            out = bicubic_resize(out, st.scale, "down", st.antialias)
        else:
            out = out.copy()
    return out


def apply_adjoint(spec: DegradationSpec, g: np.ndarray, in_shape: Optional[tuple] = None) -> np.ndarray:
    """Exact transpose of :func:`apply`.

    ``in_shape`` defaults to the shape obtained by undoing every downsampling.
    """
    shapes = []
    n, c, h, w = g.shape
    if in_shape is None:
        in_shape = (n, c, h * spec.scale, w * spec.scale)
    if tuple(in_shape[:2]) != (n, c) or spec.output_shape(tuple(in_shape)) != tuple(g.shape):
        raise ValueError(f"adjoint: gradient shape {g.shape} does not match output of {in_shape}")
    cur = tuple(in_shape)
    for st in spec.stages:
        shapes.append(cur)
        if isinstance(st, BicubicDown):
            cur = (cur[0], cur[1], cur[2] // st.scale, cur[3] // st.scale)
    out = g
    for st, shp in zip(reversed(spec.stages), reversed(shapes)):
        if isinstance(st, Blur):
            out = _blur_adjoint(out, st.realized())
        elif isinstance(st, BicubicDown):
            out = bicubic_resize_adjoint(out, shp[2:], st.scale, "down", st.antialias)
        else:
            out = out.copy()
    return out


def degrade(spec: DegradationSpec, x) -> Tensor:
    """Autodiff node for ``apply(spec, x)``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    shape = x.data.shape
    return linear_map(x, lambda a: apply(spec, a), lambda g: apply_adjoint(spec, g, shape), op="degrade")
