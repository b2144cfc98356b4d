"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Only the operations the restoration blocks need are provided. Every op
checks its output for non-finite values and raises :class:`NonFiniteError`
instead of letting NaN/Inf propagate.

Broadcasting follows numpy rules for the binary elementwise ops (the common
case is a ``[N, C, 1, 1]`` descriptor scaling a ``[N, C, H, W]`` map); the
backward pass sums gradients over the broadcast axes.

Precision is carried by the arrays themselves: parameters and inputs built
as float32 give a float32 graph, float64 inputs give a float64 graph (used
by :func:`grad_check`).
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "NonFiniteError", "MacCounter", "no_grad", "build_tape", "backward",
    "grad_check", "conv2d", "layer_norm", "softmax_lastdim", "batched_matmul",
    "transpose_last2", "reshape", "pixel_shuffle", "pixel_unshuffle", "pixel_resample",
    "global_avg_pool", "channel_chunk2", "concat_channels", "add", "sub", "mul",
    "div", "scale", "sum_all", "mean_all", "log", "l2_normalize_lastdim",
    "clamp_abs_min",
]


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
_mac_counter: contextvars.ContextVar["MacCounter | None"] = contextvars.ContextVar(
    "mac_counter", default=None
)


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class MacCounter:
    """Counts multiply-accumulates of :func:`batched_matmul` calls made inside the block.

    The counter lives in a context variable, so concurrent evaluations in other
    threads or contexts never see each other's counts.
    """

    def __init__(self):
        self.macs = 0
        self._token = None

    def __enter__(self):
        self.macs = 0
        self._token = _mac_counter.set(self)
        return self

    def __exit__(self, *exc):
        _mac_counter.reset(self._token)
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite output in {op}")
    return arr


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(_finite(data, op))
    out.op = op
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ----------------------------------------------------------------------------
# tape and backward
# ----------------------------------------------------------------------------

def build_tape(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode pass from a scalar loss.

    Leaf tensors with ``requires_grad`` get their gradient accumulated into
    ``.grad``; the returned map holds the gradient contributed by this pass.
    Leaves not connected to the loss are absent from the map (their gradient
    is zero).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf, g in leaves.items():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves


# ----------------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, groups: int = 1) -> Tensor:
    """Stride-1 "same" convolution with a 1x1 or 3x3 kernel (zero padding 1 for 3x3).

    ``w`` is ``[Cout, Cin/groups, k, k]``. ``groups`` must be 1, or equal to
    ``Cin`` for a depthwise 3x3 kernel with ``Cout == Cin``.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got {x.shape}")
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if groups not in (1, cin):
        raise ValueError(f"groups must be 1 or Cin={cin}, got {groups}")
    if groups == 1 and cin_g != cin:
        raise ValueError(f"weight expects {cin_g} input channels, input has {cin}")
    if groups == cin and groups != 1 and (cin_g != 1 or cout != cin):
        raise ValueError(f"depthwise weight must be [{cin},1,k,k], got {w.shape}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},), got {b.shape}")

    if kh == 1:
        out, bwd = _conv_pointwise(x, w)
    elif groups == 1:
        out, bwd = _conv3x3_full(x, w)
    else:
        out, bwd = _conv3x3_depthwise(x, w)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
        parents = (x, w, b)

        def backward_fn(g):
            gx, gw = bwd(g)
            return gx, gw, g.sum(axis=(0, 2, 3))
    else:
        parents = (x, w)
        backward_fn = bwd
    return _make(out, parents, backward_fn, "conv2d")


def _conv_pointwise(x: Tensor, w: Tensor):
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    w2 = w.data.reshape(cout, cin)
    xf = x.data.reshape(n, cin, h * wd)
    out = np.matmul(w2, xf).reshape(n, cout, h, wd)

    def bwd(g):
        gf = g.reshape(n, cout, h * wd)
        gx = np.matmul(w2.T, gf).reshape(x.shape) if x.requires_grad else None
        gw = np.einsum("nok,nck->oc", gf, xf).reshape(w.shape) if w.requires_grad else None
        return gx, gw

    return out, bwd


def _conv3x3_depthwise(x: Tensor, w: Tensor):
    n, c, h, wd = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    taps = w.data.reshape(c, 9)
    out = np.zeros_like(x.data)
    for t in range(9):
        i, j = divmod(t, 3)
        out += taps[:, t].reshape(1, c, 1, 1) * xp[:, :, i:i + h, j:j + wd]

    def bwd(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for t in range(9):
                i, j = divmod(t, 3)
                gxp[:, :, i:i + h, j:j + wd] += taps[:, t].reshape(1, c, 1, 1) * g
            gx = gxp[:, :, 1:-1, 1:-1]
        if w.requires_grad:
            gw = np.empty((c, 9), dtype=g.dtype)
            for t in range(9):
                i, j = divmod(t, 3)
                gw[:, t] = np.einsum("nchw,nchw->c", g, xp[:, :, i:i + h, j:j + wd])
            gw = gw.reshape(w.shape)
        return gx, gw

    return out, bwd


def _im2col3(xp: np.ndarray, h: int, wd: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, 9, h, wd), dtype=xp.dtype)
    for t in range(9):
        i, j = divmod(t, 3)
        cols[:, :, t] = xp[:, :, i:i + h, j:j + wd]
    return cols.reshape(n, c * 9, h * wd)


def _conv3x3_full(x: Tensor, w: Tensor):
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col3(xp, h, wd)
    w2 = w.data.reshape(cout, cin * 9)
    out = np.matmul(w2, cols).reshape(n, cout, h, wd)

    def bwd(g):
        gf = g.reshape(n, cout, h * wd)
        gx = gw = None
        if w.requires_grad:
            gw = np.einsum("nok,nck->oc", gf, cols).reshape(w.shape)
        if x.requires_grad:
            gcols = np.matmul(w2.T, gf).reshape(n, cin, 9, h, wd)
            gxp = np.zeros_like(xp)
            for t in range(9):
                i, j = divmod(t, 3)
                gxp[:, :, i:i + h, j:j + wd] += gcols[:, :, t]
            gx = gxp[:, :, 1:-1, 1:-1]
        return gx, gw

    return out, bwd


# ----------------------------------------------------------------------------
# normalization, attention primitives
# ----------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta_shift: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the channel axis at every spatial position, then apply a per-channel affine."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta_shift.shape != (c,):
        raise ValueError(f"layer_norm affine params must have shape ({c},)")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    g4 = gamma.data.reshape(1, c, 1, 1)
    out = g4 * xhat + beta_shift.data.reshape(1, c, 1, 1)

    def backward_fn(g):
        gx = None
        if x.requires_grad:
            gxh = g * g4
            gx = inv_std * (
                gxh
                - gxh.mean(axis=1, keepdims=True)
                - xhat * (gxh * xhat).mean(axis=1, keepdims=True)
            )
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta_shift.requires_grad else None
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta_shift), backward_fn, "layer_norm")


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), backward_fn, "softmax")


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[..., m, k] @ [..., k, n]`` with identical leading dims."""
    if a.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise ValueError(f"batched_matmul rank mismatch: {a.shape} vs {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"batched_matmul non-conformant: {a.shape} @ {b.shape}")
    counter = _mac_counter.get()
    if counter is not None:
        m, k = a.shape[-2:]
        counter.macs += math.prod(a.shape[:-2]) * m * k * b.shape[-1]
    out = np.matmul(a.data, b.data)

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward_fn, "matmul")


def transpose_last2(x: Tensor) -> Tensor:
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def l2_normalize_lastdim(x: Tensor, eps: float = 1e-12) -> Tensor:
    """``x / max(||x||, eps)`` along the last axis."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom
    active = norm > eps

    def backward_fn(g):
        proj = np.where(active, (g * y).sum(axis=-1, keepdims=True), 0.0)
        return ((g - y * proj) / denom,)

    return _make(y, (x,), backward_fn, "l2_normalize")


def clamp_abs_min(x: Tensor, floor: float) -> Tensor:
    """Push values with ``|x| < floor`` out to ``sign(x) * floor`` (zero maps to ``+floor``)."""
    small = np.abs(x.data) < floor
    sign = np.where(x.data < 0, -1.0, 1.0).astype(x.dtype)
    out = np.where(small, sign * floor, x.data).astype(x.dtype)
    return _make(out, (x,), lambda g: (np.where(small, 0.0, g).astype(g.dtype),), "clamp_abs_min")


# ----------------------------------------------------------------------------
# resampling, pooling, channel plumbing
# ----------------------------------------------------------------------------

def _unshuffle_array(a: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = a.shape
    a = a.reshape(n, c, h // r, r, w // r, r)
    return a.transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h // r, w // r)


def _shuffle_array(a: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = a.shape
    co = c // (r * r)
    a = a.reshape(n, co, r, r, h, w)
    return a.transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)


def pixel_unshuffle(x: Tensor, r: int = 2) -> Tensor:
    """Space-to-channel: output channel ``c*r*r + i*r + j`` holds sub-grid offset ``(i, j)`` of channel ``c``."""
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ValueError(f"pixel_unshuffle needs H, W divisible by {r}, got {h}x{w}")
    return _make(np.ascontiguousarray(_unshuffle_array(x.data, r)), (x,),
                 lambda g: (_shuffle_array(g, r),), "pixel_unshuffle")


def pixel_shuffle(x: Tensor, r: int = 2) -> Tensor:
    """Exact inverse of :func:`pixel_unshuffle`."""
    if x.shape[1] % (r * r):
        raise ValueError(f"pixel_shuffle needs C divisible by {r * r}, got {x.shape[1]}")
    return _make(np.ascontiguousarray(_shuffle_array(x.data, r)), (x,),
                 lambda g: (_unshuffle_array(g, r),), "pixel_shuffle")


def pixel_resample(x: Tensor, r: int = 2, direction: str = "unshuffle") -> Tensor:
    if direction == "unshuffle":
        return pixel_unshuffle(x, r)
    if direction == "shuffle":
        return pixel_shuffle(x, r)
    raise ValueError(f"direction must be 'shuffle' or 'unshuffle', got {direction!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    scale_ = 1.0 / (h * w)
    return _make(out, (x,), lambda g: (np.broadcast_to(g * scale_, x.shape).copy(),), "gap")


def _channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _make(x.data[:, start:stop].copy(), (x,), backward_fn, "channel_slice")


def channel_chunk2(x: Tensor) -> tuple[Tensor, Tensor]:
    c = x.shape[1]
    if c % 2:
        raise ValueError(f"channel_chunk2 needs an even channel count, got {c}")
    return _channel_slice(x, 0, c // 2), _channel_slice(x, c // 2, c)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    sizes = [t.shape[1] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _make(np.concatenate([t.data for t in xs], axis=1), tuple(xs), backward_fn, "concat")


# ----------------------------------------------------------------------------
# elementwise and reductions
# ----------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    return shape


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")

    def backward_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward_fn, "mul")


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward_fn, "div")


def scale(a: Tensor, s: float) -> Tensor:
    s_arr = a.data.dtype.type(s)
    return _make(a.data * s_arr, (a,), lambda g: (g * s_arr,), "scale")


def sum_all(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape).astype(a.dtype),), "mean")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# ----------------------------------------------------------------------------
# finite-difference checker
# ----------------------------------------------------------------------------

def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
    order: int = 2,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` closes over ``params`` (float64 tensors) and returns a scalar. The
    error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``. With
    ``max_coords`` only that many coordinates per tensor are probed, chosen
    deterministically from ``seed``; the gradient of every tensor is still
    exercised.

    ``order=4`` uses the five-point central stencil, whose truncation error
    is small enough to allow a larger ``eps``. That keeps the roundoff of
    ``f`` from swamping very small gradients in deep graphs.
    """
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 tensors")
        p.grad = None
    loss = f()
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = analytic.reshape(-1)
        for i in coords:
            orig = flat[i]

            def at(delta):
                flat[i] = orig + delta
                with no_grad():
                    val = float(f().data)
                flat[i] = orig
                if not math.isfinite(val):
                    raise NonFiniteError("non-finite evaluation in grad_check")
                return val

            if order == 2:
                num = (at(eps) - at(-eps)) / (2 * eps)
            else:
                num = (8 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12 * eps)
            a = float(a_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
