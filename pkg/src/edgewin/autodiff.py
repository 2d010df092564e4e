"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything the network needs lives here: a `Tensor` wrapper around a numpy
array, a recording `Tape`, and the differentiable primitives (convolutions,
batched matmul, layer norm, softmax, GeLU, concatenation, reshapes).

Design notes:
  * Define-by-run. Ops record onto the currently active tape; with no active
    tape they run in plain inference mode and keep no graph.
  * All math is float64. Convolution is cross-correlation (no kernel flip).
  * Outputs of ops are treated as immutable; a tape and its tensors belong
    to a single worker.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "ConfigError",
    "ContractError",
    "CheckerboardError",
    "NumericsError",
    "set_debug_checks",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "conv2d",
    "conv_transpose2d",
    "depthwise_conv2d",
    "layer_norm",
    "softmax",
    "gelu",
    "concat",
    "concat_channels",
    "replicate_pad2d",
    "reshape",
    "transpose",
    "mean",
    "sum_",
    "backward",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DimensionError(ValueError):
    """Shape disagreement between operands, names the offending axis."""


class ConfigError(ValueError):
    """Structurally invalid configuration (head counts, window sizes, ...)."""


class ContractError(ValueError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class CheckerboardError(ValueError):
    """Transpose convolution with kernel size not divisible by stride."""


class NumericsError(FloatingPointError):
    """Non-finite values produced by a forward op (debug checks only)."""


_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf screening of every op output. Off by default (speed)."""
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor:
    """N-d float64 value, optionally participating in gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; real work happens in the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops; inputs always precede their op.

    Usable as a context manager. `backward` walks the records exactly once,
    in reverse recording order, accumulating gradients into `Tensor.grad`.
    """

    _stack: list = []

    def __init__(self):
        self._records: list[_Record] = []
        self._watched: list[Tensor] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._stack.pop()
        return False

    @staticmethod
    def active() -> Optional["Tape"]:
        return Tape._stack[-1] if Tape._stack else None

    def watch(self, *tensors: Tensor) -> None:
        """Register leaves that must receive a grad even if never used."""
        for t in tensors:
            self._watched.append(t)

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tracked: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self._records):
            g = grads.get(id(rec.out))
            if g is None:
                continue
            in_grads = rec.backward_fn(g)
            for t, gt in zip(rec.inputs, in_grads):
                if gt is None or not t.requires_grad:
                    continue
                buf = grads.get(id(t))
                if buf is None:
                    grads[id(t)] = np.array(gt, dtype=np.float64, copy=True)
                    tracked[id(t)] = t
                else:
                    buf += gt
        for tid, t in tracked.items():
            if t.requires_grad:
                t.grad = grads[tid]
        for t in self._watched:
            if t.requires_grad and id(t) not in grads:
                t.grad = np.zeros_like(t.data)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate grads of every requires_grad tensor reachable from `loss`."""
    tape = tape if tape is not None else Tape.active()
    if tape is None:
        raise ContractError("backward called with no tape (active or given)")
    tape.backward(loss)


def _emit(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    rg = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=rg)
    if _debug_checks and not np.all(np.isfinite(out.data)):
        raise NumericsError("non-finite value in op output")
    tape = Tape.active()
    if tape is not None and rg:
        tape._records.append(_Record(out, inputs, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _emit(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit(a.data * s, (a,), lambda g: (g * s,))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.data.shape

    def bwd(g):
        return (np.full(shape, float(g) / n),)

    return _emit(np.asarray(a.data.mean()), (a,), bwd)


def sum_(a: Tensor) -> Tensor:
    shape = a.data.shape

    def bwd(g):
        return (np.full(shape, float(g)),)

    return _emit(np.asarray(a.data.sum()), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return _emit(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _emit(a.data.transpose(axes), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate(datas, axis=axis), tuple(tensors), bwd)


def replicate_pad2d(x: Tensor, p: int) -> Tensor:
    """Edge-replicating pad of the two spatial axes of a BCHW tensor."""
    if x.data.ndim != 4:
        raise DimensionError(f"replicate_pad2d expects BCHW, got {x.data.shape}")
    if p == 0:
        return x
    h, w = x.data.shape[2], x.data.shape[3]
    ii = np.clip(np.arange(h + 2 * p) - p, 0, h - 1)
    jj = np.clip(np.arange(w + 2 * p) - p, 0, w - 1)
    out = x.data[:, :, ii[:, None], jj[None, :]]
    shape = x.data.shape

    def bwd(g):
        gx = np.zeros(shape)
        np.add.at(gx, (slice(None), slice(None), ii[:, None], jj[None, :]), g)
        return (gx,)

    return _emit(out, (x,), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two BCHW maps along channels; spatial dims must match."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError("concat_channels expects BCHW tensors")
    for axis, name in ((0, "batch"), (2, "height"), (3, "width")):
        if a.data.shape[axis] != b.data.shape[axis]:
            raise DimensionError(
                f"concat_channels: {name} (axis {axis}) mismatch, "
                f"{a.data.shape} vs {b.data.shape}"
            )
    return concat((a, b), axis=1)


# ---------------------------------------------------------------------------
# matmul / normalization / activations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-d")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(
            f"matmul inner dims disagree: {ad.shape} @ {bd.shape} "
            f"({ad.shape[-1]} vs {bd.shape[-2]} on the contraction axis)"
        )

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape)
        if bd.ndim == 2 and ad.ndim > 2:
            # batched tokens @ shared weight: one flat GEMM instead of a
            # batched product followed by a reduction
            k, n = bd.shape
            gb = np.matmul(ad.reshape(-1, k).T, g.reshape(-1, n))
        else:
            gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bd.shape)
        return ga, gb

    return _emit(np.matmul(ad, bd), (a, b), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(
            f"layer_norm gamma/beta must have shape ({c},) to match the "
            f"last axis of {x.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bwd(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        return dx, dgamma, dbeta

    return _emit(gd * xhat + beta.data, (x, gamma, beta), bwd)


def softmax(x: Tensor) -> Tensor:
    """Row softmax over the last axis, computed max-subtracted."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _emit(s, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GeLU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    xd = x.data
    phi_cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (phi_cdf + xd * pdf),)

    return _emit(xd * phi_cdf, (x,), bwd)


# ---------------------------------------------------------------------------
# convolutions (im2col / col2im based)
# ---------------------------------------------------------------------------

def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * p, w + 2 * p))
    out[:, :, p:-p, p:-p] = x
    return out


def _im2col(xp: np.ndarray, k: int, s: int):
    """(B,C,Hp,Wp) -> (B, C*k*k, Ho*Wo) patch matrix plus output dims."""
    b, c, hp, wp = xp.shape
    ho = (hp - k) // s + 1
    wo = (wp - k) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::s, ::s]  # (B, C, Ho, Wo, k, k)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols: np.ndarray, b: int, c: int, k: int, s: int,
            hp: int, wp: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back to a padded image."""
    xp = np.zeros((b, c, hp, wp))
    cols6 = cols.reshape(b, c, k, k, ho, wo)
    for dy in range(k):
        for dx in range(k):
            xp[:, :, dy:dy + s * ho:s, dx:dx + s * wo:s] += cols6[:, :, dy, dx]
    return xp


def _check_conv_args(stride: int, padding: int) -> None:
    if int(stride) != stride or stride < 1:
        raise ContractError(f"stride must be a positive integer, got {stride}")
    if int(padding) != padding or padding < 0:
        raise ContractError(f"padding must be a non-negative integer, got {padding}")


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of BCHW input with an OutC x InC x K x K kernel.

    Output H' = floor((H + 2p - K) / s) + 1, same for W'.
    """
    _check_conv_args(stride, padding)
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d input must be BCHW, got ndim {x.data.ndim}")
    if w.data.ndim != 4 or w.data.shape[2] != w.data.shape[3]:
        raise DimensionError(f"conv2d weight must be OxIxKxK, got {w.data.shape}")
    if w.data.shape[1] != x.data.shape[1]:
        raise DimensionError(
            f"conv2d: weight expects {w.data.shape[1]} input channels (weight "
            f"axis 1), input has {x.data.shape[1]} (input axis 1)"
        )
    if bias is not None and bias.data.shape != (w.data.shape[0],):
        raise DimensionError(
            f"conv2d bias must have shape ({w.data.shape[0]},), got {bias.data.shape}"
        )
    b, cin, h, wdt = x.data.shape
    cout, _, k, _ = w.data.shape
    if h + 2 * padding < k or wdt + 2 * padding < k:
        raise DimensionError(
            f"conv2d: kernel {k} exceeds padded input {h + 2 * padding}x{wdt + 2 * padding}"
        )
    xp = _pad_hw(x.data, padding)
    cols, ho, wo = _im2col(xp, k, stride)
    wmat = w.data.reshape(cout, cin * k * k)
    out = np.matmul(wmat, cols).reshape(b, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    hp, wp = xp.shape[2], xp.shape[3]
    need_x = x.requires_grad
    need_w = w.requires_grad
    inputs = (x, w) if bias is None else (x, w, bias)

    def bwd(g):
        gmat = g.reshape(b, cout, ho * wo)
        gw = None
        if need_w:
            gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(cout, cin, k, k)
        gx = None
        if need_x:
            gcols = np.matmul(wmat.T, gmat)
            gxp = _col2im(gcols, b, cin, k, stride, hp, wp, ho, wo)
            gx = gxp if padding == 0 else gxp[:, :, padding:-padding, padding:-padding]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _emit(out, inputs, bwd)


def conv_transpose2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0,
                     on_uneven_overlap: str = "error") -> Tensor:
    """Transpose convolution; the exact adjoint of conv2d with the same weight.

    Weight layout is InC x OutC x K x K. Output H' = (H - 1) * s - 2p + K.
    Kernel sizes not divisible by the stride overlap unevenly and produce
    checkerboard artifacts; that configuration raises unless
    on_uneven_overlap="warn".
    """
    _check_conv_args(stride, padding)
    if x.data.ndim != 4:
        raise DimensionError(f"conv_transpose2d input must be BCHW, got ndim {x.data.ndim}")
    if w.data.ndim != 4 or w.data.shape[2] != w.data.shape[3]:
        raise DimensionError(f"conv_transpose2d weight must be IxOxKxK, got {w.data.shape}")
    if w.data.shape[0] != x.data.shape[1]:
        raise DimensionError(
            f"conv_transpose2d: weight expects {w.data.shape[0]} input channels "
            f"(weight axis 0), input has {x.data.shape[1]} (input axis 1)"
        )
    k = w.data.shape[2]
    if k % stride != 0:
        msg = (
            f"kernel size {k} is not divisible by stride {stride}: uneven "
            f"overlap risks checkerboard artifacts"
        )
        if on_uneven_overlap == "warn":
            import warnings

            warnings.warn(msg, RuntimeWarning, stacklevel=2)
        else:
            raise CheckerboardError(msg)
    cin, cout = w.data.shape[0], w.data.shape[1]
    if bias is not None and bias.data.shape != (cout,):
        raise DimensionError(
            f"conv_transpose2d bias must have shape ({cout},), got {bias.data.shape}"
        )
    b, _, h, wdt = x.data.shape
    ho = (h - 1) * stride - 2 * padding + k
    wo = (wdt - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv_transpose2d: output size {ho}x{wo} is not positive"
        )
    hp, wp = ho + 2 * padding, wo + 2 * padding
    wmat = w.data.reshape(cin, cout * k * k)
    xmat = x.data.reshape(b, cin, h * wdt)
    cols = np.matmul(wmat.T, xmat)  # (B, cout*k*k, h*w)
    outp = _col2im(cols, b, cout, k, stride, hp, wp, h, wdt)
    out = outp if padding == 0 else outp[:, :, padding:-padding, padding:-padding]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    need_x = x.requires_grad
    need_w = w.requires_grad
    inputs = (x, w) if bias is None else (x, w, bias)

    def bwd(g):
        gp = _pad_hw(g, padding)
        gcols, gho, gwo = _im2col(gp, k, stride)  # gho == h, gwo == wdt
        gx = None
        if need_x:
            gx = np.matmul(wmat, gcols).reshape(b, cin, h, wdt)
        gw = None
        if need_w:
            gw = np.matmul(xmat, gcols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(cin, cout, k, k)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _emit(out, inputs, bwd)


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution: weight C x 1 x K x K, one kernel per channel."""
    _check_conv_args(stride, padding)
    if x.data.ndim != 4:
        raise DimensionError(f"depthwise_conv2d input must be BCHW, got ndim {x.data.ndim}")
    if w.data.ndim != 4 or w.data.shape[1] != 1 or w.data.shape[2] != w.data.shape[3]:
        raise DimensionError(f"depthwise_conv2d weight must be Cx1xKxK, got {w.data.shape}")
    if w.data.shape[0] != x.data.shape[1]:
        raise DimensionError(
            f"depthwise_conv2d: weight has {w.data.shape[0]} kernels (weight "
            f"axis 0), input has {x.data.shape[1]} channels (input axis 1)"
        )
    b, c, h, wdt = x.data.shape
    k = w.data.shape[2]
    xp = _pad_hw(x.data, padding)
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    wd = w.data
    out = np.zeros((b, c, ho, wo))
    buf = np.empty((b, c, ho, wo))
    for dy in range(k):
        for dx in range(k):
            sl = xp[:, :, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride]
            np.multiply(sl, wd[None, :, 0, dy, dx, None, None], out=buf)
            out += buf
    need_x = x.requires_grad
    need_w = w.requires_grad

    def bwd(g):
        gw = None
        if need_w:
            tmp = np.empty((b, c, ho, wo))
            gw = np.zeros_like(wd)
            for dy in range(k):
                for dx in range(k):
                    sl = xp[:, :, dy:dy + stride * ho:stride,
                            dx:dx + stride * wo:stride]
                    np.multiply(sl, g, out=tmp)
                    gw[:, 0, dy, dx] = tmp.sum(axis=(0, 2, 3))
        gx = None
        if need_x:
            gxp = np.zeros((b, c, hp, wp))
            tmp = np.empty((b, c, ho, wo))
            for dy in range(k):
                for dx in range(k):
                    np.multiply(g, wd[None, :, 0, dy, dx, None, None], out=tmp)
                    gxp[:, :, dy:dy + stride * ho:stride,
                        dx:dx + stride * wo:stride] += tmp
            gx = gxp if padding == 0 else \
                gxp[:, :, padding:-padding, padding:-padding]
        return gx, gw

    return _emit(out, (x, w), bwd)


if __name__ == "__main__":
    # quick smoke: d(sum(x*x))/dx == 2x
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = sum_(mul(x, x))
        backward(loss)
    print("grad ok:", np.allclose(x.grad, 2 * x.data))
