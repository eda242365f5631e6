"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run engine: every operation returns a fresh graph node holding the
forward value plus a closure that routes the upstream gradient to its
parents.  Graphs are rebuilt on each forward pass and garbage-collected with
the last reference.  A single graph is confined to one thread; parameter
tensors may be shared across threads as long as nobody mutates ``values``
during a forward/backward pass.

All arrays are float64.  There is no broadcasting: elementwise operations
require equal shapes and replication is done with the explicit tile ops.
Spatial ops (conv2d, bilinear_sample, avg_pool2) accept either a single
``[C, H, W]`` map or a batch ``[N, C, H, W]``; the batch axis is used by the
model to process all camera views of a frame in one graph node.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "DiffTensor",
    "GradCheckReport",
    "ShapeError",
    "add",
    "add_scalar",
    "avg_pool2",
    "backward",
    "bce_with_logits",
    "bilinear_sample",
    "conv2d",
    "div",
    "elementwise_mul",
    "expand_batch_dim",
    "grad_check",
    "grad_reverse",
    "mean_all",
    "mean_per_sample",
    "mse",
    "relu",
    "scalar_mul",
    "set_finite_checks",
    "softplus",
    "sse",
    "stack_views",
    "sub",
    "sum_all",
    "sum_axis0",
    "sum_over_views",
    "tile_axis0",
    "tile_channels",
    "unstack_views",
]

_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    """Enable per-op finiteness assertions (debug mode; costs one array scan per op)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending dimension."""


class AutodiffError(RuntimeError):
    """Misuse of the graph machinery (non-scalar loss, repeated backward, cycles, non-finite values)."""


class DiffTensor:
    """A node in the computation graph: value, lazily allocated gradient, provenance."""

    __slots__ = ("values", "grad", "requires_grad", "op", "parents", "name",
                 "_backward_fn", "_backward_done")

    def __init__(self, values, *, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn: Callable[[np.ndarray], None] | None = None,
                 name: str | None = None):
        arr = np.asarray(values, dtype=np.float64)
        if _CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise AutodiffError(f"non-finite values produced by op '{op}'"
                                + (f" (node '{name}')" if name else ""))
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self.name = name
        self._backward_fn = backward_fn
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @classmethod
    def const(cls, values, name: str | None = None) -> "DiffTensor":
        return cls(values, requires_grad=False, op="const", name=name)

    @classmethod
    def param(cls, values, name: str | None = None) -> "DiffTensor":
        return cls(values, requires_grad=True, op="param", name=name)

    def detach(self) -> "DiffTensor":
        return DiffTensor.const(self.values.copy(), name=self.name)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = self.name or self.op
        return f"DiffTensor({tag}, shape={self.shape}, requires_grad={self.requires_grad})"


def _node(values, parents: Sequence[DiffTensor], op: str,
          backward_fn: Callable[[np.ndarray], None] | None) -> DiffTensor:
    req = any(p.requires_grad for p in parents)
    return DiffTensor(values, requires_grad=req, op=op, parents=tuple(parents),
                      backward_fn=backward_fn if req else None)


def _require_same_shape(a: DiffTensor, b: DiffTensor, op: str) -> None:
    if a.values.shape == b.values.shape:
        return
    sa, sb = a.values.shape, b.values.shape
    if len(sa) != len(sb):
        raise ShapeError(f"{op}: rank mismatch, {len(sa)}-d vs {len(sb)}-d ({sa} vs {sb})")
    axis = next(i for i, (x, y) in enumerate(zip(sa, sb)) if x != y)
    raise ShapeError(f"{op}: shapes {sa} vs {sb} differ at axis {axis}")


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: DiffTensor) -> list[DiffTensor]:
    """Post-order over the subgraph that requires grad; iterative, cycle-guarded."""
    order: list[DiffTensor] = []
    visited: set[int] = set()
    in_stack: set[int] = set()
    stack: list[tuple[DiffTensor, int]] = [(root, 0)]
    while stack:
        node, idx = stack.pop()
        if idx == 0:
            if id(node) in visited:
                continue
            in_stack.add(id(node))
        parents = [p for p in node.parents if p.requires_grad]
        if idx < len(parents):
            stack.append((node, idx + 1))
            child = parents[idx]
            if id(child) in in_stack:
                raise AutodiffError(f"cycle detected at op '{child.op}'")
            if id(child) not in visited:
                stack.append((child, 0))
        else:
            visited.add(id(node))
            in_stack.discard(id(node))
            order.append(node)
    return order


def backward(loss: DiffTensor) -> None:
    """Populate ``grad`` on every requires_grad ancestor of ``loss`` with d(loss)/d(node)."""
    if loss.values.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise AutodiffError("backward already ran on this graph; rebuild the graph before calling again")
    if not loss.requires_grad:
        raise AutodiffError("loss does not depend on any requires_grad tensor")
    order = _topo_order(loss)
    loss.accumulate_grad(np.ones_like(loss.values))
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
    loss._backward_done = True


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _require_same_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _node(a.values + b.values, (a, b), "add", bw)


def sub(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _require_same_shape(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _node(a.values - b.values, (a, b), "sub", bw)


def elementwise_mul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _require_same_shape(a, b, "elementwise_mul")
    av, bv = a.values, b.values

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * bv)
        if b.requires_grad:
            b.accumulate_grad(g * av)

    return _node(av * bv, (a, b), "elementwise_mul", bw)


def div(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Elementwise a / b. The caller is responsible for keeping b away from 0."""
    _require_same_shape(a, b, "div")
    av, bv = a.values, b.values
    out = av / bv

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g / bv)
        if b.requires_grad:
            b.accumulate_grad(-g * out / bv)

    return _node(out, (a, b), "div", bw)


def scalar_mul(a: DiffTensor, s: float) -> DiffTensor:
    s = float(s)

    def bw(g):
        a.accumulate_grad(g * s)

    return _node(a.values * s, (a,), "scalar_mul", bw)


def add_scalar(a: DiffTensor, s: float) -> DiffTensor:
    s = float(s)

    def bw(g):
        a.accumulate_grad(g)

    return _node(a.values + s, (a,), "add_scalar", bw)


def relu(x: DiffTensor) -> DiffTensor:
    mask = x.values > 0.0

    def bw(g):
        x.accumulate_grad(g * mask)

    return _node(np.where(mask, x.values, 0.0), (x,), "relu", bw)


def softplus(x: DiffTensor) -> DiffTensor:
    v = x.values
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    sig = 1.0 / (1.0 + np.exp(-v))

    def bw(g):
        x.accumulate_grad(g * sig)

    return _node(out, (x,), "softplus", bw)


def grad_reverse(x: DiffTensor, scale: float = 1.0) -> DiffTensor:
    """Identity forward, -scale * grad backward (adversarial feature path)."""
    scale = float(scale)

    def bw(g):
        x.accumulate_grad(-scale * g)

    return _node(x.values.copy(), (x,), "grad_reverse", bw)


# ---------------------------------------------------------------------------
# reductions, stacking and tiling


def sum_all(x: DiffTensor) -> DiffTensor:
    shape = x.values.shape

    def bw(g):
        x.accumulate_grad(np.full(shape, float(g)))

    return _node(np.asarray(x.values.sum()), (x,), "sum_all", bw)


def mean_all(x: DiffTensor) -> DiffTensor:
    shape = x.values.shape
    n = x.values.size

    def bw(g):
        x.accumulate_grad(np.full(shape, float(g) / n))

    return _node(np.asarray(x.values.mean()), (x,), "mean_all", bw)


def mean_per_sample(x: DiffTensor) -> DiffTensor:
    """[N, ...] -> [N]: mean over all non-batch axes."""
    if x.values.ndim < 2:
        raise ShapeError(f"mean_per_sample: need a batch axis, got shape {x.shape}")
    n = x.values.shape[0]
    per = x.values.size // n
    shape = x.values.shape

    def bw(g):
        x.accumulate_grad(np.broadcast_to(g.reshape((n,) + (1,) * (len(shape) - 1)), shape) / per)

    return _node(x.values.reshape(n, -1).mean(axis=1), (x,), "mean_per_sample", bw)


def sum_over_views(tensors: Sequence[DiffTensor]) -> DiffTensor:
    """Elementwise sum of a list of equal-shape tensors, in list order."""
    if not tensors:
        raise ShapeError("sum_over_views: empty input list")
    for t in tensors[1:]:
        _require_same_shape(tensors[0], t, "sum_over_views")
    acc = tensors[0].values.copy()
    for t in tensors[1:]:
        acc += t.values

    def bw(g):
        for t in tensors:
            if t.requires_grad:
                t.accumulate_grad(g)

    return _node(acc, tuple(tensors), "sum_over_views", bw)


def sum_axis0(x: DiffTensor) -> DiffTensor:
    if x.values.ndim < 1:
        raise ShapeError("sum_axis0: input must have a leading axis")
    n = x.values.shape[0]

    def bw(g):
        x.accumulate_grad(np.broadcast_to(g, (n,) + g.shape))

    return _node(x.values.sum(axis=0), (x,), "sum_axis0", bw)


def tile_axis0(x: DiffTensor, n: int) -> DiffTensor:
    """Replicate x along a new leading axis: [...] -> [n, ...]."""
    if n < 1:
        raise ShapeError(f"tile_axis0: n must be >= 1, got {n}")

    def bw(g):
        x.accumulate_grad(g.sum(axis=0))

    vals = np.broadcast_to(x.values, (n,) + x.values.shape).copy()
    return _node(vals, (x,), "tile_axis0", bw)


def tile_channels(x: DiffTensor, channels: int) -> DiffTensor:
    """Replicate a 1-channel map across the channel axis: [..., 1, H, W] -> [..., C, H, W]."""
    if x.values.ndim < 3:
        raise ShapeError(f"tile_channels: need at least 3 axes, got shape {x.shape}")
    ax = x.values.ndim - 3
    if x.values.shape[ax] != 1:
        raise ShapeError(f"tile_channels: channel axis {ax} must be 1, got {x.values.shape[ax]}")

    def bw(g):
        x.accumulate_grad(g.sum(axis=ax, keepdims=True))

    return _node(np.repeat(x.values, channels, axis=ax), (x,), "tile_channels", bw)


def stack_views(tensors: Sequence[DiffTensor]) -> DiffTensor:
    """Stack equal-shape tensors along a new leading axis, in list order."""
    if not tensors:
        raise ShapeError("stack_views: empty input list")
    for t in tensors[1:]:
        _require_same_shape(tensors[0], t, "stack_views")

    def bw(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t.accumulate_grad(g[i])

    return _node(np.stack([t.values for t in tensors]), tuple(tensors), "stack_views", bw)


def unstack_views(x: DiffTensor) -> list[DiffTensor]:
    """Split [N, ...] into N tensors of shape [...], each connected to the parent slice."""
    if x.values.ndim < 1 or x.values.shape[0] < 1:
        raise ShapeError(f"unstack_views: need a leading axis, got shape {x.shape}")
    out = []
    for i in range(x.values.shape[0]):
        def bw(g, i=i):
            full = np.zeros_like(x.values)
            full[i] = g
            x.accumulate_grad(full)

        out.append(_node(x.values[i].copy(), (x,), f"unstack_views[{i}]", bw))
    return out


def expand_batch_dim(x: DiffTensor) -> DiffTensor:
    """[C, H, W] -> [1, C, H, W]."""

    def bw(g):
        x.accumulate_grad(g[0])

    return _node(x.values[None], (x,), "expand_batch_dim", bw)


# ---------------------------------------------------------------------------
# losses


def mse(pred: DiffTensor, target: DiffTensor) -> DiffTensor:
    """Mean of squared elementwise differences; scalar output."""
    _require_same_shape(pred, target, "mse")
    d = pred.values - target.values
    n = d.size

    def bw(g):
        scaled = (2.0 * float(g) / n) * d
        if pred.requires_grad:
            pred.accumulate_grad(scaled)
        if target.requires_grad:
            target.accumulate_grad(-scaled)

    return _node(np.asarray((d * d).mean()), (pred, target), "mse", bw)


def sse(pred: DiffTensor, target: DiffTensor) -> DiffTensor:
    """Sum of squared elementwise differences; scalar output."""
    _require_same_shape(pred, target, "sse")
    d = pred.values - target.values

    def bw(g):
        scaled = (2.0 * float(g)) * d
        if pred.requires_grad:
            pred.accumulate_grad(scaled)
        if target.requires_grad:
            target.accumulate_grad(-scaled)

    return _node(np.asarray((d * d).sum()), (pred, target), "sse", bw)


def bce_with_logits(logits: DiffTensor, label: float) -> DiffTensor:
    """Mean binary cross-entropy of logits against a constant label in [0, 1]."""
    z = logits.values
    y = float(label)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    sig = 1.0 / (1.0 + np.exp(-z))
    n = z.size

    def bw(g):
        logits.accumulate_grad((float(g) / n) * (sig - y))

    return _node(np.asarray(loss.mean()), (logits,), "bce_with_logits", bw)


# ---------------------------------------------------------------------------
# spatial ops


def _as_batched(x: np.ndarray, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{op}: expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def conv2d(x: DiffTensor, kernel: DiffTensor, bias: DiffTensor, padding: int = 0) -> DiffTensor:
    """Cross-correlation with square odd kernel, stride 1, zero padding.

    x: [C_in, H, W] or [N, C_in, H, W]; kernel: [C_out, C_in, k, k]; bias: [C_out].
    Output spatial size is H + 2*padding - k + 1.
    """
    xb, squeeze = _as_batched(x.values, "conv2d")
    kv, bv = kernel.values, bias.values
    if kv.ndim != 4 or kv.shape[2] != kv.shape[3]:
        raise ShapeError(f"conv2d: kernel must be [C_out, C_in, k, k], got {kv.shape}")
    cout, cin, k, _ = kv.shape
    if k % 2 != 1:
        raise ShapeError(f"conv2d: kernel size must be odd, got k={k}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got {padding}")
    n, cx, h, w = xb.shape
    if cx != cin:
        raise ShapeError(f"conv2d: input channel axis has {cx} channels, kernel expects {cin}")
    if bv.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bv.shape} does not match C_out={cout}")
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel k={k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    if padding:
        padded = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
        padded[:, :, padding:padding + h, padding:padding + w] = xb
    else:
        padded = xb
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
    # [N, Cin, Ho, Wo, k, k] -> [Cin*k*k, N*Ho*Wo]
    cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(cin * k * k, n * ho * wo)
    kmat = kv.reshape(cout, cin * k * k)
    out = (kmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3) + bv[None, :, None, None]

    def bw(g):
        gb = g if g.ndim == 4 else g[None]
        gmat = gb.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        if kernel.requires_grad:
            kernel.accumulate_grad((gmat @ cols.T).reshape(kv.shape))
        if bias.requires_grad:
            bias.accumulate_grad(gb.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (kmat.T @ gmat).reshape(cin, k, k, n, ho, wo)
            dpad = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
            for di in range(k):
                for dj in range(k):
                    dpad[:, :, di:di + ho, dj:dj + wo] += dcols[:, di, dj].transpose(1, 0, 2, 3)
            dx = dpad[:, :, padding:padding + h, padding:padding + w] if padding else dpad
            x.accumulate_grad(dx[0] if squeeze else dx)

    return _node(out[0] if squeeze else out, (x, kernel, bias), "conv2d", bw)


def avg_pool2(x: DiffTensor) -> DiffTensor:
    """2x2 mean pooling with stride 2; spatial dims must be even."""
    xb, squeeze = _as_batched(x.values, "avg_pool2")
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        axis = 2 if h % 2 else 3
        raise ShapeError(f"avg_pool2: spatial axis {axis} has odd size {h if h % 2 else w}")
    out = xb.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        gb = g if g.ndim == 4 else g[None]
        dx = np.repeat(np.repeat(gb, 2, axis=2), 2, axis=3) / 4.0
        x.accumulate_grad(dx[0] if squeeze else dx)

    return _node(out[0] if squeeze else out, (x,), "avg_pool2", bw)


def _bilinear_one(img: np.ndarray, grid: np.ndarray):
    """Forward bilinear sampling of [C,H,W] at grid [Ho,Wo,2] (x,y source pixel coords).

    Returns (out, corner list) where corners hold flat indices and effective
    weights for the backward scatter.  Out-of-bounds corners contribute 0.
    """
    c, h, w = img.shape
    ho, wo = grid.shape[:2]
    gx = grid[..., 0].ravel()
    gy = grid[..., 1].ravel()
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    fx = gx - x0
    fy = gy - y0
    flat = img.reshape(c, h * w)
    out = np.zeros((c, ho * wo))
    corners = []
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        ix = x0 + dx
        iy = y0 + dy
        wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
        valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        wgt = np.where(valid, wgt, 0.0)
        idx = (np.clip(iy, 0, h - 1) * w + np.clip(ix, 0, w - 1)).astype(np.intp)
        out += flat[:, idx] * wgt[None, :]
        corners.append((idx, wgt))
    return out.reshape(c, ho, wo), corners


def bilinear_sample(x: DiffTensor, grid: np.ndarray) -> DiffTensor:
    """Bilinear interpolation of x at continuous source coordinates.

    x: [C, H, W] with grid [H_out, W_out, 2], or [N, C, H, W] with grid
    [N, H_out, W_out, 2].  grid[..., 0] is x (column), grid[..., 1] is y (row),
    in source pixel units.  Samples outside the source produce 0.  Differentiable
    w.r.t. x only; grids are fixed by calibration.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if x.values.ndim == 3:
        if grid.ndim != 3 or grid.shape[-1] != 2:
            raise ShapeError(f"bilinear_sample: grid shape {grid.shape}, expected [H_out, W_out, 2]")
        out, corners = _bilinear_one(x.values, grid)
        c, h, w = x.values.shape

        def bw(g):
            gmat = g.reshape(c, -1)
            dflat = np.zeros(c * h * w)
            base = np.arange(c)[:, None] * (h * w)
            for idx, wgt in corners:
                contrib = gmat * wgt[None, :]
                dflat += np.bincount((base + idx[None, :]).ravel(),
                                     weights=contrib.ravel(), minlength=c * h * w)
            x.accumulate_grad(dflat.reshape(c, h, w))

        return _node(out, (x,), "bilinear_sample", bw)

    if x.values.ndim == 4:
        n, c, h, w = x.values.shape
        if grid.ndim != 4 or grid.shape[-1] != 2 or grid.shape[0] != n:
            raise ShapeError(f"bilinear_sample: grid shape {grid.shape}, expected [{n}, H_out, W_out, 2]")
        outs, all_corners = [], []
        for i in range(n):
            o, crn = _bilinear_one(x.values[i], grid[i])
            outs.append(o)
            all_corners.append(crn)

        def bw(g):
            dx = np.zeros_like(x.values)
            base = np.arange(c)[:, None] * (h * w)
            for i in range(n):
                gmat = g[i].reshape(c, -1)
                dflat = np.zeros(c * h * w)
                for idx, wgt in all_corners[i]:
                    contrib = gmat * wgt[None, :]
                    dflat += np.bincount((base + idx[None, :]).ravel(),
                                         weights=contrib.ravel(), minlength=c * h * w)
                dx[i] = dflat.reshape(c, h, w)
            x.accumulate_grad(dx)

        return _node(np.stack(outs), (x,), "bilinear_sample", bw)

    raise ShapeError(f"bilinear_sample: expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tolerance: float
    worst_param: str = ""

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"gradcheck {status}: max_rel_error={self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.1e}, worst: {self.worst_param or 'n/a'})")


def grad_check(build_loss: Callable[[dict], DiffTensor], params: dict[str, DiffTensor],
               h: float = 1e-4, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients with central finite differences, coordinate by coordinate.

    ``build_loss`` must be deterministic and rebuild the graph from the current
    parameter values on every call.  Relative error per coordinate is
    |a - n| / max(|a|, |n|, 1e-8).
    """
    for p in params.values():
        p.zero_grad()
    loss = build_loss(params)
    if loss.values.size != 1:
        raise AutodiffError(f"grad_check: loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.values).all():
        raise AutodiffError("grad_check: non-finite loss at the base point")
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
                for k, p in params.items()}

    max_rel = 0.0
    worst = ""
    for name, p in params.items():
        flat = p.values.ravel()
        aflat = analytic[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(build_loss(params).values)
            flat[i] = orig - h
            lm = float(build_loss(params).values)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise AutodiffError(f"grad_check: non-finite loss while perturbing '{name}' coord {i}")
            numeric = (lp - lm) / (2.0 * h)
            rel = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel = rel
                worst = f"{name}[{i}]"
    return GradCheckReport(max_rel_error=max_rel, passed=max_rel < tolerance,
                           tolerance=tolerance, worst_param=worst)
