"""Minimal reverse-mode autodiff over the fixed operator set used by the SR models.

Values are plain ``numpy`` arrays (N x C x H x W, float32 by default).  A
:class:`Tensor` wraps one value plus the closure that pushes its gradient back
to its inputs.  Only the operators needed for fine-tuning are provided.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_THREADS = 1


def set_threads(n: int) -> None:
    """Number of worker threads used to split batched convolutions.

    Work is split per sample and every per-sample product is computed the same
    way regardless of ``n``, so results are bit-identical for any thread count.
    """
    global _THREADS
    if n < 1:
        raise ValueError(f"threads must be >= 1, got {n}")
    _THREADS = int(n)


def get_threads() -> int:
    return _THREADS


class Tensor:
    """A node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: Sequence["Tensor"] = (),
        backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
    ):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(x) -> Tensor:
    return Tensor(np.asarray(x), requires_grad=True)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], bw) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward=bw)


def _check_same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------- convolution


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, oh: int, ow: int) -> np.ndarray:
    """(n, c, h, w) -> (n, c*kh*kw, oh*ow) in float64."""
    n, c, _, _ = x.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _per_sample(fn: Callable[[slice], None], n: int) -> None:
    if _THREADS == 1 or n == 1:
        fn(slice(0, n))
        return
    chunks = np.array_split(np.arange(n), min(_THREADS, n))
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        list(pool.map(lambda idx: fn(slice(int(idx[0]), int(idx[-1]) + 1)), chunks))


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding (the usual CNN "convolution")."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and kernel, got {xd.shape} and {wd.shape}")
    n, c, h, w = xd.shape
    oc, ic, kh, kw = wd.shape
    if ic != c:
        raise ValueError(f"conv2d: input {xd.shape} has {c} channels but kernel {wd.shape} expects {ic}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: invalid stride={stride} pad={pad}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel {wd.shape} must have odd spatial size")
    if bias is not None and bias.data.shape != (oc,):
        raise ValueError(f"conv2d: bias {bias.data.shape} does not match kernel {wd.shape}")
    oh, ow = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: input {xd.shape} too small for kernel {wd.shape}")

    cols = _im2col(xd, kh, kw, stride, pad, oh, ow)
    wmat = wd.reshape(oc, -1).astype(np.float64)  # (oc, K)
    out = np.empty((n, oc, oh * ow), dtype=np.float64)

    def fwd(sl):
        out[sl] = np.matmul(wmat, cols[sl])

    _per_sample(fwd, n)
    if bias is not None:
        out += bias.data.astype(np.float64)[:, None]
    y = out.reshape(n, oc, oh, ow).astype(xd.dtype)

    def bw(g):
        g64 = g.astype(np.float64).reshape(n, oc, oh * ow)
        gx = gw = gb = None
        if weight.requires_grad:
            part = np.empty((n, oc, cols.shape[1]), dtype=np.float64)

            def wgrad(sl):
                part[sl] = np.matmul(g64[sl], cols[sl].transpose(0, 2, 1))

            _per_sample(wgrad, n)
            gw = part.sum(axis=0).reshape(wd.shape).astype(wd.dtype)
        if bias is not None and bias.requires_grad:
            gb = g64.sum(axis=(0, 2)).astype(bias.data.dtype)
        if x.requires_grad:
            dcols = np.empty((n, cols.shape[1], oh * ow), dtype=np.float64)

            def xgrad(sl):
                dcols[sl] = np.matmul(wmat.T, g64[sl])

            _per_sample(xgrad, n)
            dcols = dcols.reshape(n, c, kh, kw, oh, ow)
            gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
            gx = gxp[:, :, pad : pad + h, pad : pad + w].astype(xd.dtype)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(y, "conv2d", parents, bw)


# ------------------------------------------------------------- pixel shuffle


def _shuffle(a: np.ndarray, s: int) -> np.ndarray:
    n, cs2, h, w = a.shape
    c = cs2 // (s * s)
    return a.reshape(n, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * s, w * s)


def _unshuffle(a: np.ndarray, s: int) -> np.ndarray:
    n, c, hs, ws = a.shape
    h, w = hs // s, ws // s
    return a.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, h, w)


def pixel_shuffle(x, s: int) -> Tensor:
    """Depth-to-space: (n, c*s*s, h, w) -> (n, c, h*s, w*s)."""
    x = as_tensor(x)
    if s < 1 or x.data.ndim != 4 or x.data.shape[1] % (s * s):
        raise ValueError(f"pixel_shuffle: channels of {x.data.shape} not divisible by {s}^2")
    return _make(_shuffle(x.data, s), "pixel_shuffle", (x,), lambda g: (_unshuffle(g, s),))


def pixel_unshuffle(x, s: int) -> Tensor:
    """Space-to-depth, the inverse of :func:`pixel_shuffle`."""
    x = as_tensor(x)
    if s < 1 or x.data.ndim != 4 or x.data.shape[2] % s or x.data.shape[3] % s:
        raise ValueError(f"pixel_unshuffle: spatial dims of {x.data.shape} not divisible by {s}")
    return _make(_unshuffle(x.data, s), "pixel_unshuffle", (x,), lambda g: (_shuffle(g, s),))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a.data, b.data)
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.data.dtype), "relu", (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    factor = np.where(mask, 1.0, slope).astype(x.data.dtype)
    return _make(x.data * factor, "leaky_relu", (x,), lambda g: (g * factor,))


def mul_scalar(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.data.dtype.type(c)
    return _make(x.data * c, "mul_scalar", (x,), lambda g: (g * c,))


def tile_add(x, tile) -> Tensor:
    """Add a (1, c, th, tw) tile periodically over the spatial extent of ``x``."""
    x, tile = as_tensor(x), as_tensor(tile)
    n, c, h, w = x.data.shape
    _, tc, th, tw = tile.data.shape
    if tc != c:
        raise ValueError(f"tile_add: tile {tile.data.shape} does not match input {x.data.shape}")
    reps = (1, 1, -(-h // th), -(-w // tw))
    full = np.tile(tile.data, reps)[:, :, :h, :w]

    def bw(g):
        gt = None
        if tile.requires_grad:
            gp = np.zeros((c, reps[2] * th, reps[3] * tw), dtype=np.float64)
            gp[:, :h, :w] = g.astype(np.float64).sum(axis=0)
            gt = gp.reshape(c, reps[2], th, reps[3], tw).sum(axis=(1, 3))[None].astype(tile.data.dtype)
        return g, gt

    return _make(x.data + full, "tile_add", (x, tile), bw)


def linear_map(x, forward: Callable[[np.ndarray], np.ndarray], adjoint: Callable[[np.ndarray], np.ndarray], op: str = "linear") -> Tensor:
    """Apply a fixed linear operator given its forward and exact adjoint."""
    x = as_tensor(x)
    return _make(forward(x.data), op, (x,), lambda g: (adjoint(g),))


def dropout(x, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout.  ``rng=None`` or ``p=0`` is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if p == 0.0 or rng is None:
        return x
    keep = rng.random(x.data.shape) >= p
    scale = np.where(keep, 1.0 / (1.0 - p), 0.0).astype(x.data.dtype)
    return _make(x.data * scale, "dropout", (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------------- losses


def mse_loss(a, b) -> Tensor:
    """Mean squared error, accumulated in float64."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("mse_loss", a.data, b.data)
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    m = diff.size
    val = np.array(np.dot(diff.ravel(), diff.ravel()) / m)

    def bw(g):
        d = (2.0 * float(g) / m) * diff
        return d.astype(a.data.dtype), (-d).astype(b.data.dtype)

    return _make(val, "mse_loss", (a, b), bw)


def mae_loss(a, b) -> Tensor:
    """Mean absolute error; subgradient at 0 is 0."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("mae_loss", a.data, b.data)
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    m = diff.size
    val = np.array(np.abs(diff).sum() / m)

    def bw(g):
        d = (float(g) / m) * np.sign(diff)
        return d.astype(a.data.dtype), (-d).astype(b.data.dtype)

    return _make(val, "mae_loss", (a, b), bw)


# ------------------------------------------------------------------- optimizer


class OptimState:
    """SGD with classical (heavy-ball) momentum: v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState) -> None:
    """Update ``params`` in place; missing gradients count as zero."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"sgd_step: gradient {g.shape} does not match parameter {name} {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ValueError(f"sgd_step: velocity {v.shape} does not match parameter {name} {p.shape}")
        v = (p.dtype.type(state.momentum) * v + g.astype(p.dtype)).astype(p.dtype)
        state.velocity[name] = v
        p -= p.dtype.type(state.lr) * v


def collect_grads(leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.grad for k, t in leaves.items() if t.grad is not None}


def leaves_of(params: dict[str, np.ndarray], names: Optional[Iterable[str]] = None) -> dict[str, Tensor]:
    """Wrap parameter arrays as grad-requiring leaves (sharing memory)."""
    keys = params.keys() if names is None else names
    return {k: Tensor(params[k], requires_grad=True) for k in keys}
