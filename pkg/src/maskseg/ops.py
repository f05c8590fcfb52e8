"""Forward primitives with their vector-Jacobian products.

Every primitive accepts :class:`Tensor` or array-like inputs and returns a
Tensor.  Broadcasting follows numpy rules for the elementwise ops; gradients
are summed back to the input shape.

FLOP convention (also used by the analytic cost model): a multiply-accumulate
is 2 FLOPs; elementwise arithmetic and activations are 1 per output element;
softmax is 5 per element; normalization is 4 per element; bilinear resize is
4 per output element; pooling is 1 per input element.
"""

from __future__ import annotations

import threading

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, as_tensor, make_result

_flops = threading.local()


class FlopCounter:
    """Tally FLOPs of primitives executed on this thread inside the block."""

    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)

    def __enter__(self) -> "FlopCounter":
        self._prev = getattr(_flops, "counter", None)
        _flops.counter = self
        return self

    def __exit__(self, *exc) -> None:
        _flops.counter = self._prev


def _tally(op: str, n) -> None:
    counter = getattr(_flops, "counter", None)
    if counter is not None:
        counter.add(op, n)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a, b)
    _tally("add", np.prod(shape))
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a, b)
    _tally("add", np.prod(shape))
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a, b)
    _tally("mul", np.prod(shape))
    return make_result(a.data * b.data, (a, b),
                       lambda g: (_unbroadcast(g * b.data, a.shape),
                                  _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a, b)
    _tally("mul", np.prod(shape))
    out = a.data / b.data
    return make_result(out, (a, b),
                       lambda g: (_unbroadcast(g / b.data, a.shape),
                                  _unbroadcast(-g * out / b.data, b.shape)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    _tally("act", x.size)
    pos = x.data > 0
    return make_result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    _tally("act", x.size)
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    _tally("act", x.size)
    e = np.exp(x.data)
    return make_result(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    _tally("act", x.size)
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise ``-[t log s(x) + (1-t) log(1-s(x))]`` evaluated stably."""
    x = as_tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=DTYPE)
    if t.shape != x.shape:
        raise ShapeError(f"bce target shape {t.shape} != logits shape {x.shape}")
    _tally("act", 4 * x.size)
    out = _softplus(x.data) - t * x.data
    return make_result(out, (x,), lambda g: (g * (_sigmoid(x.data) - t),))


# ----------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(out, (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_result(out, (x,), vjp)


def global_avg_pool(x) -> Tensor:
    """Per-channel mean over the two trailing spatial axes, kept as 1x1."""
    x = as_tensor(x)
    if x.ndim < 3 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"global_avg_pool needs (..., C, H, W), got {x.shape}")
    _tally("pool", x.size)
    return mean(x, axis=(-2, -1), keepdims=True)


# ------------------------------------------------------------------ structure

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = np.argsort(axes)
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x, key) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return make_result(np.array(x.data[key], dtype=DTYPE), (x,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0]
    ax = axis % ref.ndim
    for t in ts[1:]:
        if t.ndim != ref.ndim or any(
                t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat along {axis}: {ref.shape} vs {t.shape}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(ts)))

    return make_result(np.concatenate([t.data for t in ts], axis=ax), ts, vjp)


# --------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy batch broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    _tally("matmul", 2 * m * k * n * int(np.prod(out.shape[:-2])))

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(out, (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` for weight of shape (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B, Cin, H, W) or (Cin, H, W) input.

    Evaluated as a sum over kernel offsets of (Cout, Cin) channel mixes applied
    to strided views of the zero-padded input.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d needs (B,C,H,W) input and (Co,Ci,kh,kw) kernel, "
                         f"got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride {stride} / padding {padding}")
    B, cin, H, W = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    _tally("conv", 2 * cout * cin * kh * kw * Ho * Wo * B)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    # (Cin, B, Hp, Wp) puts channels first so each offset is one matmul
    xc = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
    # (kh, kw, Cout, Cin): contiguous per-offset slices keep matmul on BLAS
    K = np.ascontiguousarray(kernel.data.transpose(2, 3, 0, 1))
    out = np.zeros((cout, B, Ho, Wo), dtype=DTYPE)
    hs = (Ho - 1) * stride + 1
    ws = (Wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            patch = xc[:, :, i:i + hs:stride, j:j + ws:stride].reshape(cin, -1)
            out += (K[i, j] @ patch).reshape(cout, B, Ho, Wo)
    out = out.transpose(1, 0, 2, 3)
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)

    def vjp(g):
        gc = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gk = np.empty_like(kernel.data)
        gxp = np.zeros((cin, B, Hp, Wp), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                patch = xc[:, :, i:i + hs:stride, j:j + ws:stride].reshape(cin, -1)
                gk[:, :, i, j] = gc @ patch.T
                gxp[:, :, i:i + hs:stride, j:j + ws:stride] += \
                    (K[i, j].T @ gc).reshape(cin, B, Ho, Wo)
        gx = gxp[:, :, padding:padding + H, padding:padding + W].transpose(1, 0, 2, 3)
        grads = [np.ascontiguousarray(gx), gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    y = make_result(out, inputs, vjp)
    return reshape(y, y.shape[1:]) if squeeze else y


# -------------------------------------------------------------- normalization

def normalize_affine(x, mean_, var, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-channel ``gamma * (x - mean) / sqrt(var + eps) + beta``.

    Channels are axis -3 of a (..., C, H, W) input.  ``mean_``/``var`` are
    constants (running statistics); gradients flow to x, gamma and beta.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = np.asarray(getattr(mean_, "data", mean_), dtype=DTYPE)
    v = np.asarray(getattr(var, "data", var), dtype=DTYPE)
    C = x.shape[-3]
    for name, arr in (("mean", mu), ("var", v), ("gamma", gamma.data), ("beta", beta.data)):
        if arr.shape != (C,):
            raise ShapeError(f"{name} shape {arr.shape} != ({C},)")
    if eps < 0 or np.any(v + eps <= 0):
        raise ValueError("normalize_affine needs var + eps > 0")
    _tally("norm", 4 * x.size)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - mu[:, None, None]) * inv[:, None, None]
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]
    red = tuple(a for a in range(x.ndim) if a != x.ndim - 3)

    def vjp(g):
        gx = g * (gamma.data * inv)[:, None, None]
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(out, (x, gamma, beta), vjp)


def batch_norm_train(x, gamma, beta, eps: float = 1e-5):
    """Normalize (B, C, H, W) with batch statistics over (B, H, W).

    Returns the output tensor and the (mean, biased var) used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm_train needs (B,C,H,W), got {x.shape}")
    red = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=red)
    var = x.data.var(axis=red)
    _tally("norm", 4 * x.size)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def vjp(g):
        gg = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gx = (gamma.data * inv)[None, :, None, None] / n * (
            n * g - gb[None, :, None, None] - xhat * gg[None, :, None, None])
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), vjp), mu, var


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    D = x.shape[-1]
    _tally("norm", 4 * x.size)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    red = tuple(range(x.ndim - 1))

    def vjp(g):
        gh = g * gamma.data
        gx = inv / D * (D * gh - gh.sum(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(out, (x, gamma, beta), vjp)


# -------------------------------------------------------------------- softmax

def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Softmax with max subtraction; ``mask`` (bool, broadcastable) marks
    allowed entries, the rest get exactly zero weight.  Every slice along
    ``axis`` must keep at least one allowed entry."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not np.all(mask.any(axis=axis)):
            raise ValueError("softmax mask leaves an empty slice")
        z = np.where(mask, z, -np.inf)
    _tally("softmax", 5 * x.size)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), vjp)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _tally("softmax", 5 * x.size)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def vjp(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), vjp)


# ------------------------------------------------------------------- resizing

def interp_matrix(n_in: int, n_out: int, mode: str = "bilinear") -> np.ndarray:
    """(n_out, n_in) 1-D resampling weights, half-pixel centers."""
    scale = n_in / n_out
    A = np.zeros((n_out, n_in), dtype=DTYPE)
    dst = np.arange(n_out)
    if mode == "nearest":
        src = np.minimum(np.floor((dst + 0.5) * scale).astype(int), n_in - 1)
        A[dst, src] = 1.0
        return A
    if mode != "bilinear":
        raise ValueError(f"unknown resize mode {mode!r}")
    src = np.maximum((dst + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    np.add.at(A, (dst, i0), 1.0 - lam)
    np.add.at(A, (dst, i1), lam)
    return A


def resize(x, out_h: int, out_w: int, mode: str = "bilinear") -> Tensor:
    """Resample the two trailing axes to (out_h, out_w)."""
    x = as_tensor(x)
    h, w = x.shape[-2], x.shape[-1]
    Ah = interp_matrix(h, out_h, mode)
    Aw = interp_matrix(w, out_w, mode)
    lead = int(np.prod(x.shape[:-2]))
    _tally("resize", 4 * lead * out_h * out_w)
    out = Ah @ x.data @ Aw.T

    def vjp(g):
        return (Ah.T @ g @ Aw,)

    return make_result(out, (x,), vjp)


def bilinear_upsample(x, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    if out_h < x.shape[-2] or out_w < x.shape[-1]:
        raise ShapeError(f"upsample target {out_h}x{out_w} smaller than input {x.shape[-2:]}")
    return resize(x, out_h, out_w, "bilinear")
