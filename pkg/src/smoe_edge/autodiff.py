"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is deliberately minimal: exactly the primitives the edge model
needs (conv2d, pooling, 2x upsampling, channel concat, a handful of
elementwise maps, broadcasting binary ops and scalar reductions). Each op
records a backward closure; `backward` replays the recorded graph once in
reverse topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphError, NumericError, ShapeError


class Tensor:
    """N-d float64 array that optionally participates in the gradient graph.

    Leaf tensors created with requires_grad=True receive a populated `grad`
    after `backward`. Tensors produced by ops carry the recorded closure and
    references to their inputs; a graph is single-use (one forward recording,
    one backward pass).
    """

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward", "_op",
                 "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._prev: tuple = ()
        self._backward = None
        self._op = ""
        self._backward_done = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """View of the same data outside the gradient graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    # Operator sugar used throughout the model code.
    def __add__(self, other):
        return zip_binary(self, _lift(other), "add")

    def __sub__(self, other):
        return zip_binary(self, _lift(other), "sub")

    def __mul__(self, other):
        return zip_binary(self, _lift(other), "mul")

    def __truediv__(self, other):
        return zip_binary(self, _lift(other), "div")

    def __rsub__(self, other):
        return zip_binary(_lift(other), self, "sub")

    def __radd__(self, other):
        return zip_binary(_lift(other), self, "add")

    def __rmul__(self, other):
        return zip_binary(_lift(other), self, "mul")


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: np.ndarray, inputs: tuple, op: str, backward_fn) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out._prev = inputs
        out._backward = backward_fn
        out._op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` over the axes that were broadcast to produce it from `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# convolution / pooling / resampling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-d cross-correlation over NCHW input (no kernel flip).

    Output extent (H + 2p - dilation*(kh-1) - 1)/stride + 1 must be a
    positive integer; gradients are defined for input, weight and bias.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW weight, got {x.shape} and {weight.shape}")
    if stride < 1 or padding < 0 or dilation < 1:
        raise ShapeError(f"conv2d: invalid stride/padding/dilation ({stride},{padding},{dilation})")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels (shape {x.shape}) but weight expects {cin_w} (shape {weight.shape})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    kh_eff = dilation * (kh - 1) + 1
    kw_eff = dilation * (kw - 1) + 1
    num_h = h + 2 * padding - kh_eff
    num_w = w + 2 * padding - kw_eff
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise ShapeError(f"conv2d: window {kh}x{kw} (dilation {dilation}, padding {padding}, stride {stride}) "
                         f"does not tile input {h}x{w} to a positive integer extent")
    out_h = num_h // stride + 1
    out_w = num_w // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"conv2d: non-positive output extent {out_h}x{out_w}")

    inputs = (x, weight) if bias is None else (x, weight, bias)

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        # Pointwise fast path: a single channel-mixing matmul.
        w2 = weight.data[:, :, 0, 0]
        out_data = np.tensordot(w2, x.data, axes=([1], [1])).transpose(1, 0, 2, 3)
        if bias is not None:
            out_data += bias.data[None, :, None, None]

        def _bw_pointwise(out: Tensor):
            g = out.grad
            if bias is not None and bias.requires_grad:
                _accumulate(bias, g.sum(axis=(0, 2, 3)))
            if weight.requires_grad:
                gw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))
                _accumulate(weight, gw[:, :, None, None])
            if x.requires_grad:
                _accumulate(x, np.tensordot(w2.T, g, axes=([1], [1])).transpose(1, 0, 2, 3))

        return _from_op(np.ascontiguousarray(out_data), inputs, "conv2d", _bw_pointwise)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # im2col: one contiguous copy [N*H'*W', Cin*kh*kw], then a single matmul.
    cols = sliding_window_view(xp, (kh_eff, kw_eff), axis=(2, 3))
    cols = cols[:, :, ::stride, ::stride, ::dilation, ::dilation]
    cols_mat = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(n * out_h * out_w, cin * kh * kw)
    w_mat = weight.data.reshape(cout, cin * kh * kw)
    out_data = (cols_mat @ w_mat.T).reshape(n, out_h, out_w, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out_data += bias.data[None, :, None, None]

    def _bw(out: Tensor):
        g_mat = np.ascontiguousarray(out.grad.transpose(0, 2, 3, 1)).reshape(n * out_h * out_w, cout)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g_mat.sum(axis=0))
        if weight.requires_grad:
            _accumulate(weight, (g_mat.T @ cols_mat).reshape(cout, cin, kh, kw))
        if x.requires_grad:
            gcols = (g_mat @ w_mat).reshape(n, out_h, out_w, cin, kh, kw)
            gxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :,
                        i * dilation: i * dilation + out_h * stride: stride,
                        j * dilation: j * dilation + out_w * stride: stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            _accumulate(x, gxp)

    return _from_op(np.ascontiguousarray(out_data), inputs, "conv2d", _bw)


def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Per-window max; backward routes gradient to the first row-major argmax."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % stride or w % stride:
        raise ShapeError(f"max_pool2d: spatial extents {h}x{w} not divisible by stride {stride}")
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, out_h, out_w, window * window)
    arg = np.argmax(flat, axis=-1)  # first occurrence == first row-major scan index
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _bw(out: Tensor):
        if not x.requires_grad:
            return
        g = out.grad
        gx = np.zeros_like(x.data)
        ni, ci, oi, oj = np.indices(arg.shape)
        ri = oi * stride + arg // window
        cj = oj * stride + arg % window
        np.add.at(gx, (ni, ci, ri, cj), g)
        _accumulate(x, gx)

    return _from_op(out_data, (x,), "max_pool2d", _bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling; backward sums each 2x2 block."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2x expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def _bw(out: Tensor):
        if x.requires_grad:
            g = out.grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
            _accumulate(x, g)

    return _from_op(out_data, (x,), "upsample2x", _bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Channel concatenation [N,Ca+Cb,H,W] with `a` first."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels expects NCHW inputs, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def _bw(out: Tensor):
        g = out.grad
        if a.requires_grad:
            _accumulate(a, g[:, :ca])
        if b.requires_grad:
            _accumulate(b, g[:, ca:])

    return _from_op(out_data, (a, b), "concat_channels", _bw)


# ---------------------------------------------------------------------------
# elementwise maps and broadcasting binary ops
# ---------------------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    # Branch form avoids exp overflow on either tail.
    d = x.data
    pos = d >= 0
    s = np.empty_like(d)
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    s[~pos] = e / (1.0 + e)

    def _bw(out: Tensor):
        if x.requires_grad:
            _accumulate(x, out.grad * s * (1.0 - s))

    return _from_op(s, (x,), "sigmoid", _bw)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)

    def _bw(out: Tensor):
        if x.requires_grad:
            _accumulate(x, out.grad * e)

    return _from_op(e, (x,), "exp", _bw)


def neg(x: Tensor) -> Tensor:
    def _bw(out: Tensor):
        if x.requires_grad:
            _accumulate(x, -out.grad)

    return _from_op(-x.data, (x,), "neg", _bw)


def square(x: Tensor) -> Tensor:
    def _bw(out: Tensor):
        if x.requires_grad:
            _accumulate(x, out.grad * 2.0 * x.data)

    return _from_op(x.data * x.data, (x,), "square", _bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def _bw(out: Tensor):
        if x.requires_grad:
            _accumulate(x, out.grad * mask)

    return _from_op(np.where(mask, x.data, 0.0), (x,), "relu", _bw)


_UNARY = {"sigmoid": sigmoid, "exp": exp, "neg": neg, "square": square, "relu": relu}


def map_unary(x: Tensor, f: str) -> Tensor:
    if f not in _UNARY:
        raise ValueError(f"map_unary: unknown function {f!r}, expected one of {sorted(_UNARY)}")
    return _UNARY[f](x)


def zip_binary(a: Tensor, b: Tensor, f: str) -> Tensor:
    """Elementwise add/sub/mul/div with extent-1 broadcasting.

    Backward sums gradients over the broadcast axes of each operand.
    Division by exact zero propagates non-finite values (the training guard
    catches them downstream).
    """
    a, b = _lift(a), _lift(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"zip_binary: shapes {a.shape} and {b.shape} do not broadcast") from None

    if f == "add":
        out_data = a.data + b.data

        def _bw(out: Tensor):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(out.grad, b.shape))
    elif f == "sub":
        out_data = a.data - b.data

        def _bw(out: Tensor):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-out.grad, b.shape))
    elif f == "mul":
        out_data = a.data * b.data

        def _bw(out: Tensor):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))
    elif f == "div":
        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = a.data / b.data

        def _bw(out: Tensor):
            with np.errstate(divide="ignore", invalid="ignore"):
                if a.requires_grad:
                    _accumulate(a, _unbroadcast(out.grad / b.data, a.shape))
                if b.requires_grad:
                    _accumulate(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))
    else:
        raise ValueError(f"zip_binary: unknown function {f!r}, expected add/sub/mul/div")

    return _from_op(out_data, (a, b), f, _bw)


def reduce(x: Tensor, mode: str = "sum") -> Tensor:
    """Full reduction to a scalar tensor (sum or mean)."""
    if mode not in ("sum", "mean"):
        raise ValueError(f"reduce: unknown mode {mode!r}")
    n = x.data.size
    out_data = x.data.sum() if mode == "sum" else x.data.sum() / n

    def _bw(out: Tensor):
        if x.requires_grad:
            scale = 1.0 if mode == "sum" else 1.0 / n
            _accumulate(x, np.full_like(x.data, out.grad * scale))

    return _from_op(np.asarray(out_data), (x,), mode, _bw)


# ---------------------------------------------------------------------------
# graph replay
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate `grad` on every requires_grad tensor the loss depends on.

    Gradients accumulate (+=) when a tensor feeds several ops. A graph is
    single-use: a second call on the same root is rejected.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise GraphError("backward already ran on this graph; rebuild the forward pass first")
    loss._backward_done = True

    # Iterative post-order DFS (graphs from long training paths can be deep).
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in node._prev:
            if id(child) not in visited and child._backward is not None:
                stack.append((child, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: float
    passed: bool
    worst_coord: tuple = ()
    failures: list = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.passed


def finite_diff_gradcheck(f, point: Tensor, step: float = 1e-5,
                          rtol: float = 1e-4, coords=None) -> GradcheckReport:
    """Compare analytic gradients of the scalar function `f` at `point`
    against central finite differences.

    `coords` optionally restricts the check to a subset of flat indices
    (useful on large parameter tensors). Non-finite evaluations are reported
    as failures with the offending coordinate.
    """
    if step <= 0:
        raise ValueError("finite_diff_gradcheck: step must be positive")
    probe = Tensor(point.data.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ShapeError("finite_diff_gradcheck: f must return a scalar tensor")
    backward(out)
    analytic = (probe.grad if probe.grad is not None else np.zeros_like(probe.data)).reshape(-1)

    base = point.data.reshape(-1).copy()
    if coords is None:
        coords = range(base.size)

    max_rel = 0.0
    worst = ()
    failures = []
    if not np.isfinite(out.data).all():
        failures.append((-1, "non-finite function value at the base point"))
    for c in coords:
        if not np.isfinite(analytic[c]):
            failures.append((int(c), "non-finite analytic gradient"))
            continue
        shifted = base.copy()
        shifted[c] = base[c] + step
        f_plus = f(Tensor(shifted.reshape(point.shape))).item()
        shifted[c] = base[c] - step
        f_minus = f(Tensor(shifted.reshape(point.shape))).item()
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            failures.append((int(c), "non-finite evaluation"))
            continue
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = analytic[c]
        denom = max(abs(a), abs(numeric))
        rel = abs(a - numeric) / denom if denom > 1e-8 else 0.0
        if rel > max_rel:
            max_rel = rel
            worst = np.unravel_index(c, point.shape)

    passed = not failures and max_rel < rtol
    return GradcheckReport(max_rel_error=max_rel, passed=passed,
                           worst_coord=worst, failures=failures)


def assert_finite(data: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in {where}")
