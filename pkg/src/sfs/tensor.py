"""Minimal reverse-mode autodiff engine over numpy arrays.

Every layer primitive used by the three networks lives here: dense and
dilated convolution, average pooling/unpooling, bilinear warping,
correlation volumes, locally connected convolution, batch norm, and the
usual pointwise ops.  Gradients are recorded on an explicit Tape so the
whole engine stays oracle-testable against central differences.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float64


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class Activation(enum.Enum):
    NONE = "none"
    LEAKY_RELU = "leaky_relu"
    SOFTMAX = "softmax"


@dataclass
class LayerConfig:
    kernel_h: int = 3
    kernel_w: int = 3
    stride: int = 1
    dilation: int = 1
    in_channels: int = 1
    out_channels: int = 1
    padding: int = 0
    activation: Activation = Activation.NONE
    leaky_slope: float = 0.01
    batch_norm: bool = False

    def __post_init__(self):
        if self.stride < 1 or self.dilation < 1:
            raise ConfigurationError("stride and dilation must be >= 1")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ConfigurationError("kernel extents must be positive")
        if not (0.0 < self.leaky_slope < 1.0):
            raise ConfigurationError("leaky_slope must lie in (0,1)")


# ---------------------------------------------------------------------------
# Tape


class TapeError(RuntimeError):
    pass


class Tape:
    """Ordered record of differentiable operations.

    Backward replays the record in exact reverse order.  A tape can be
    consumed only once; re-running backward without re-recording raises.
    """

    def __init__(self):
        self._ops = []
        self._used = False

    def record(self, fn):
        self._ops.append(fn)

    def __len__(self):
        return len(self._ops)

    def backward(self, root: "Tensor"):
        if self._used:
            raise TapeError("tape already consumed; re-record before backward")
        self._used = True
        if root.grad is None:
            root.grad = np.ones_like(root.data)
        for fn in reversed(self._ops):
            fn()

    def __enter__(self):
        push_tape(self)
        return self

    def __exit__(self, *exc):
        pop_tape(self)
        return False


_TAPE_STACK: list[Tape] = []


def push_tape(tape: Tape):
    _TAPE_STACK.append(tape)


def pop_tape(tape: Tape):
    assert _TAPE_STACK and _TAPE_STACK[-1] is tape
    _TAPE_STACK.pop()


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")
    # make ndarray defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs, backward_fn):
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    if tape is not None and needs:
        out.requires_grad = True

        def guarded():
            # ops whose outputs never fed the loss receive no gradient
            if out.grad is not None:
                backward_fn()

        tape.record(guarded)
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Pointwise / reduction ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad, b.shape))

    return _record(out, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-out.grad, b.shape))

    return _record(out, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad * a.data, b.shape))

    return _record(out, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-out.grad * a.data / (b.data ** 2), b.shape))

    return _record(out, (a, b), bwd)


def power(a, p: float):
    a = as_tensor(a)
    out = Tensor(a.data ** p)

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(out.grad * p * a.data ** (p - 1.0))

    return _record(out, (a,), bwd)


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data))

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(out.grad / a.data)

    return _record(out, (a,), bwd)


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(out.grad * out.data)

    return _record(out, (a,), bwd)


def sqrt(a):
    return power(a, 0.5)


def clamp(a, lo=None, hi=None):
    """Clamp with straight pass-through gradient inside the window."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    inside = np.ones_like(a.data)
    if lo is not None:
        inside *= a.data >= lo
    if hi is not None:
        inside *= a.data <= hi

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(out.grad * inside)

    return _record(out, (a,), bwd)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd():
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    return _record(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def sigmoid(a):
    a = as_tensor(a)
    out = Tensor(1.0 / (1.0 + np.exp(-a.data)))

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(out.grad * out.data * (1.0 - out.data))

    return _record(out, (a,), bwd)


def leaky_relu(a, slope=0.01):
    a = as_tensor(a)
    mask = np.where(a.data >= 0, 1.0, slope)
    out = Tensor(a.data * mask)

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(out.grad * mask)

    return _record(out, (a,), bwd)


def softmax(a, axis=0):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def bwd():
        if a.requires_grad:
            g = out.grad
            dot = (g * s).sum(axis=axis, keepdims=True)
            a.accumulate_grad(s * (g - dot))

    return _record(out, (a,), bwd)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data)

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(out.grad @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b.accumulate_grad(a.data.swapaxes(-1, -2) @ out.grad)

    return _record(out, (a, b), bwd)


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(out.grad.reshape(a.shape))

    return _record(out, (a,), bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(out.grad[tuple(idx)])

    return _record(out, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# Spatial ops.  Inputs may be [C,H,W] or batched [N,C,H,W]; the unbatched
# form is expanded internally and squeezed on the way out.


def _batched(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected rank-3 or rank-4 input, got shape {x.shape}")


def _debatch(y: Tensor, squeeze: bool):
    return reshape(y, y.shape[1:]) if squeeze else y


def conv_output_extent(extent, kernel, padding, stride, dilation):
    eff = kernel + (kernel - 1) * (dilation - 1)
    return (extent + 2 * padding - eff) // stride + 1, eff


def conv2d(inp: Tensor, weights: Tensor, cfg: LayerConfig) -> Tensor:
    """2-D convolution (cross-correlation) with stride/dilation/zero padding.

    weights: [K, C, kh, kw].  Accumulates one BLAS call per kernel tap.
    """
    x, squeeze = _batched(inp)
    N, C, H, W = x.shape
    K, Cw, kh, kw = weights.shape
    if Cw != C:
        raise DimensionError(f"input has {C} channels but weights expect {Cw}")
    if (kh, kw) != (cfg.kernel_h, cfg.kernel_w):
        raise DimensionError("weight kernel extents disagree with LayerConfig")
    s, d, p = cfg.stride, cfg.dilation, cfg.padding
    Ho, eff_h = conv_output_extent(H, kh, p, s, d)
    Wo, eff_w = conv_output_extent(W, kw, p, s, d)
    if eff_h > H + 2 * p or eff_w > W + 2 * p:
        raise DimensionError("effective kernel extent exceeds padded input")
    if Ho <= 0 or Wo <= 0:
        raise ConfigurationError("zero-sized convolution output")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    out_data = np.zeros((N, K, Ho, Wo), dtype=x.dtype)
    w = weights.data
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i * d: i * d + (Ho - 1) * s + 1: s,
                       j * d: j * d + (Wo - 1) * s + 1: s]
            out_data += np.einsum("kc,nchw->nkhw", w[:, :, i, j], patch, optimize=True)
    out = Tensor(out_data)

    def bwd():
        g = out.grad  # [N,K,Ho,Wo]
        if weights.requires_grad:
            gw = np.zeros_like(w)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i * d: i * d + (Ho - 1) * s + 1: s,
                               j * d: j * d + (Wo - 1) * s + 1: s]
                    gw[:, :, i, j] = np.einsum("nkhw,nchw->kc", g, patch, optimize=True)
            weights.accumulate_grad(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.einsum("kc,nkhw->nchw", w[:, :, i, j], g, optimize=True)
                    gxp[:, :, i * d: i * d + (Ho - 1) * s + 1: s,
                        j * d: j * d + (Wo - 1) * s + 1: s] += contrib
            if p:
                gxp = gxp[:, :, p:-p, p:-p]
            x.accumulate_grad(gxp)

    return _debatch(_record(out, (x, weights), bwd), squeeze)


def avg_pool2d(inp: Tensor, stride: int = 2, window: int = 2) -> Tensor:
    x, squeeze = _batched(inp)
    N, C, H, W = x.shape
    if window > H or window > W:
        raise DimensionError("pooling window larger than input")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    out_data = np.zeros((N, C, Ho, Wo), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            out_data += x.data[:, :, i: i + (Ho - 1) * stride + 1: stride,
                               j: j + (Wo - 1) * stride + 1: stride]
    out_data /= window * window
    out = Tensor(out_data)

    def bwd():
        if x.requires_grad:
            g = out.grad / (window * window)
            gx = np.zeros_like(x.data)
            for i in range(window):
                for j in range(window):
                    gx[:, :, i: i + (Ho - 1) * stride + 1: stride,
                       j: j + (Wo - 1) * stride + 1: stride] += g
            x.accumulate_grad(gx)

    return _debatch(_record(out, (x,), bwd), squeeze)


def avg_unpool2d(inp: Tensor, factor: int = 2) -> Tensor:
    """Replicate each cell into a factor x factor block (inverse of pooling
    on constant fields)."""
    if factor < 2:
        raise ConfigurationError("unpool factor must be >= 2")
    x, squeeze = _batched(inp)
    out = Tensor(np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3))

    def bwd():
        if x.requires_grad:
            N, C, H, W = x.shape
            g = out.grad.reshape(N, C, H, factor, W, factor).sum(axis=(3, 5))
            x.accumulate_grad(g)

    return _debatch(_record(out, (x,), bwd), squeeze)


def activation_apply(inp: Tensor, cfg: LayerConfig, softmax_axis=None) -> Tensor:
    if cfg.activation is Activation.NONE:
        return inp
    if cfg.activation is Activation.LEAKY_RELU:
        return leaky_relu(inp, cfg.leaky_slope)
    if cfg.activation is Activation.SOFTMAX:
        axis = softmax_axis if softmax_axis is not None else (0 if inp.ndim == 3 else 1)
        return softmax(inp, axis=axis)
    raise ConfigurationError(f"unknown activation {cfg.activation}")


def bilinear_warp(image: Tensor, flow: Tensor) -> Tensor:
    """Sample image at p + flow(p) with bilinear weights and border clamp.

    image: [C,H,W]; flow: [2,H,W] in pixel units, channel 0 = dx (columns),
    channel 1 = dy (rows).  Differentiable w.r.t. both inputs.
    """
    if image.ndim != 3 or flow.ndim != 3 or flow.shape[0] != 2:
        raise DimensionError("bilinear_warp expects image [C,H,W] and flow [2,H,W]")
    C, H, W = image.shape
    if flow.shape[1:] != (H, W):
        raise DimensionError("flow spatial dims must match image")
    gy, gx = np.meshgrid(np.arange(H, dtype=image.dtype),
                         np.arange(W, dtype=image.dtype), indexing="ij")
    sx = gx + flow.data[0]
    sy = gy + flow.data[1]
    sxc = np.clip(sx, 0.0, W - 1.0)
    syc = np.clip(sy, 0.0, H - 1.0)
    x0 = np.floor(sxc).astype(np.int64)
    y0 = np.floor(syc).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = sxc - x0
    fy = syc - y0
    im = image.data
    v00 = im[:, y0, x0]
    v01 = im[:, y0, x1]
    v10 = im[:, y1, x0]
    v11 = im[:, y1, x1]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out = Tensor(w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11)

    # clamped samples have zero gradient w.r.t. flow
    in_x = ((sx > 0.0) & (sx < W - 1.0)).astype(image.dtype)
    in_y = ((sy > 0.0) & (sy < H - 1.0)).astype(image.dtype)

    def bwd():
        g = out.grad  # [C,H,W]
        if image.requires_grad:
            gi = np.zeros_like(im)
            flat = lambda yy, xx: (yy * W + xx).ravel()
            gi_flat = gi.reshape(C, H * W)
            for wgt, yy, xx in ((w00, y0, x0), (w01, y0, x1), (w10, y1, x0), (w11, y1, x1)):
                np.add.at(gi_flat, (slice(None), flat(yy, xx)), (g * wgt).reshape(C, -1))
            image.accumulate_grad(gi)
        if flow.requires_grad:
            dvdx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
            dvdy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
            gf = np.zeros_like(flow.data)
            gf[0] = (g * dvdx).sum(axis=0) * in_x
            gf[1] = (g * dvdy).sum(axis=0) * in_y
            flow.accumulate_grad(gf)

    return _record(out, (image, flow), bwd)


def correlation_volume(featA: Tensor, featB: Tensor, max_disp: int) -> Tensor:
    """Channel-mean dot product of featA(p) with featB(p+d) over the
    (2*max_disp+1)^2 displacement square; out-of-frame samples are zero.

    Channel order: d = (dy, dx) in row-major over dy, dx in
    [-max_disp, max_disp].
    """
    if featA.shape != featB.shape:
        raise DimensionError("correlation inputs must share shape")
    if max_disp < 0:
        raise ConfigurationError("max_disp must be >= 0")
    C, H, W = featA.shape
    m = max_disp
    D = 2 * m + 1
    Bp = np.pad(featB.data, ((0, 0), (m, m), (m, m)))
    out_data = np.empty((D * D, H, W), dtype=featA.dtype)
    for idx in range(D * D):
        dy, dx = idx // D - m, idx % D - m
        shifted = Bp[:, m + dy: m + dy + H, m + dx: m + dx + W]
        out_data[idx] = (featA.data * shifted).mean(axis=0)
    out = Tensor(out_data)

    def bwd():
        g = out.grad
        inv_c = 1.0 / C
        if featA.requires_grad:
            ga = np.zeros_like(featA.data)
            for idx in range(D * D):
                dy, dx = idx // D - m, idx % D - m
                shifted = Bp[:, m + dy: m + dy + H, m + dx: m + dx + W]
                ga += g[idx] * shifted * inv_c
            featA.accumulate_grad(ga)
        if featB.requires_grad:
            gbp = np.zeros_like(Bp)
            for idx in range(D * D):
                dy, dx = idx // D - m, idx % D - m
                gbp[:, m + dy: m + dy + H, m + dx: m + dx + W] += g[idx] * featA.data * inv_c
            featB.accumulate_grad(gbp[:, m: m + H, m: m + W])

    return _record(out, (featA, featB), bwd)


def locally_connected_conv(inp: Tensor, kernels: Tensor) -> Tensor:
    """Per-position convolution without weight sharing.

    inp: [C,H,W]; kernels: [H,W,kh,kw], one filter per output position,
    shared across channels; neighborhoods are zero-padded 'same'.
    """
    if inp.ndim != 3 or kernels.ndim != 4:
        raise DimensionError("expected input [C,H,W] and kernels [H,W,kh,kw]")
    C, H, W = inp.shape
    Hk, Wk, kh, kw = kernels.shape
    if (Hk, Wk) != (H, W):
        raise DimensionError("need exactly one kernel per output position")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(inp.data, ((0, 0), (ph, ph), (pw, pw)))
    out_data = np.zeros((C, H, W), dtype=inp.dtype)
    kdat = kernels.data
    for i in range(kh):
        for j in range(kw):
            out_data += kdat[:, :, i, j] * xp[:, i: i + H, j: j + W]
    out = Tensor(out_data)

    def bwd():
        g = out.grad
        if kernels.requires_grad:
            gk = np.zeros_like(kdat)
            for i in range(kh):
                for j in range(kw):
                    gk[:, :, i, j] = (g * xp[:, i: i + H, j: j + W]).sum(axis=0)
            kernels.accumulate_grad(gk)
        if inp.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i: i + H, j: j + W] += kdat[:, :, i, j] * g
            inp.accumulate_grad(gxp[:, ph: ph + H, pw: pw + W])

    return _record(out, (inp, kernels), bwd)


def batch_norm(inp: Tensor, gamma: Tensor, beta: Tensor, running: dict,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N,H,W) or (N,) statistics.

    `running` holds 'mean'/'var' arrays updated in place during training.
    """
    x, squeeze = (inp, False)
    if inp.ndim == 3:
        x, squeeze = reshape(inp, (1,) + inp.shape), True
    if x.ndim == 4:
        axes = (0, 2, 3)
        bshape = (1, -1, 1, 1)
    elif x.ndim == 2:
        axes = (0,)
        bshape = (1, -1)
    else:
        raise DimensionError("batch_norm expects rank 2, 3, or 4 input")

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running["mean"] = momentum * running["mean"] + (1 - momentum) * mean
        running["var"] = momentum * running["var"] + (1 - momentum) * var
    else:
        mean, var = running["mean"], running["var"]

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = Tensor(xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape))

    n = x.data.size // x.shape[1 if x.ndim == 4 else -1]

    def bwd():
        g = out.grad
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes))
        if x.requires_grad:
            gh = g * gamma.data.reshape(bshape)
            if training:
                mean_gh = gh.mean(axis=axes).reshape(bshape)
                mean_ghx = (gh * xhat).mean(axis=axes).reshape(bshape)
                gx = inv_std.reshape(bshape) * (gh - mean_gh - xhat * mean_ghx)
            else:
                gx = gh * inv_std.reshape(bshape)
            x.accumulate_grad(gx)

    y = _record(out, (x, gamma, beta), bwd)
    return reshape(y, y.shape[1:]) if squeeze else y


# ---------------------------------------------------------------------------
# Optimizer


class AdamState:
    def __init__(self):
        self.step = 0
        self.m = {}
        self.v = {}


def adam_step(params: dict, grads: dict, state: AdamState, lr=1e-3,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update over a dict of named parameter Tensors (in place)."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(fn, point: Tensor, step: float = 1e-4) -> float:
    """Worst relative error between tape gradient and central differences.

    fn must map a Tensor to a scalar Tensor; evaluated in 64-bit.
    """
    x = Tensor(point.data.astype(np.float64), requires_grad=True)
    with Tape() as tape:
        y = fn(x)
        if y.size != 1:
            raise ConfigurationError("grad_check requires a scalar-valued fn")
        tape.backward(y)
    tape_grad = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    worst = 0.0
    flat = x.data.ravel()
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        yp = fn(Tensor(x.data)).item()
        flat[idx] = orig - step
        ym = fn(Tensor(x.data)).item()
        flat[idx] = orig
        fd = (yp - ym) / (2 * step)
        tg = tape_grad.ravel()[idx]
        rel = abs(tg - fd) / max(abs(tg), abs(fd), 1e-6)
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Initialization


def kaiming_conv(rng: np.random.Generator, out_ch, in_ch, kh, kw, dtype=DEFAULT_DTYPE):
    fan_in = in_ch * kh * kw
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=(out_ch, in_ch, kh, kw)).astype(dtype),
                  requires_grad=True)


def kaiming_dense(rng: np.random.Generator, n_in, n_out, dtype=DEFAULT_DTYPE):
    std = np.sqrt(2.0 / n_in)
    return Tensor(rng.normal(0.0, std, size=(n_in, n_out)).astype(dtype),
                  requires_grad=True)


def zeros(shape, requires_grad=False, dtype=DEFAULT_DTYPE):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad=False, dtype=DEFAULT_DTYPE):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)
