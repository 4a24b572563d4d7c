"""Minimal dense-tensor engine with reverse-mode differentiation.

Exactly the operator set a recurrent conv/pixel-shuffle SR network needs:
conv2d (with optional fused per-channel input/output scaling), pixel
shuffle/unshuffle, channel scaling, elementwise add, leaky relu, channel
concat/gather/scatter, bilinear resize, integer shift, and the scalar
losses. Values are float32; convolution dot products and all scalar
reductions accumulate in float64 before rounding, which keeps the
pruned-vs-masked equivalence checks tight.

Gradients are recorded on an explicit :class:`Tape`. Ops executed while a
tape is active append a backward closure; replaying the closures in
reverse visits every node after all of its consumers, and gradients
accumulate additively in float64.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Tensor extents do not satisfy an op's contract."""


class ConfigError(ValueError):
    """Op hyperparameters produce an invalid computation (e.g. empty output)."""


class EvaluationError(RuntimeError):
    """A checked evaluation produced a non-finite value."""


class ValueTensor:
    """Immutable rank-4 value: (batch, channels, height, width), float32."""

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float32, order="C", copy=True)
        if arr.ndim != 4:
            raise ShapeError(f"ValueTensor needs 4 extents, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "ValueTensor":
        # Internal: adopt a freshly created float32 array without copying.
        out = object.__new__(cls)
        arr.flags.writeable = False
        object.__setattr__(out, "data", arr)
        return out

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "ValueTensor":
        return cls._wrap(np.zeros(tuple(shape), dtype=np.float32))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def __repr__(self) -> str:
        return f"ValueTensor{self.shape}"


class KernelTensor:
    """Conv weights (out_channels, in_channels, kh, kw) plus optional bias."""

    __slots__ = ("data", "bias")

    def __init__(self, data, bias=None) -> None:
        arr = np.array(data, dtype=np.float32, order="C", copy=True)
        if arr.ndim != 4:
            raise ShapeError(f"KernelTensor needs 4 extents, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"KernelTensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        if bias is not None:
            b = np.array(bias, dtype=np.float32, copy=True)
            if b.shape != (arr.shape[0],):
                raise ShapeError(
                    f"bias length {b.shape} does not match out_channels {arr.shape[0]}"
                )
            self.bias = b
        else:
            self.bias = None

    @property
    def out_channels(self) -> int:
        return self.data.shape[0]

    @property
    def in_channels(self) -> int:
        return self.data.shape[1]

    def copy(self) -> "KernelTensor":
        return KernelTensor(self.data, None if self.bias is None else self.bias)

    def __repr__(self) -> str:
        return f"KernelTensor{self.data.shape}{'' if self.bias is None else '+bias'}"


class Scalar:
    """Scalar op result participating in the tape (losses, penalties)."""

    __slots__ = ("value",)

    def __init__(self, value: float) -> None:
        self.value = float(value)

    def __add__(self, other: "Scalar") -> "Scalar":
        return scalar_add(self, other)

    def __mul__(self, c: float) -> "Scalar":
        return scalar_scale(self, c)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Scalar({self.value})"


_LOCAL = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_LOCAL, "tape", None)


class Tape:
    """Wengert list of executed primitives.

    Ops executed inside ``with Tape() as tape:`` append backward closures in
    execution order. ``backward(loss)`` replays them in reverse, so every
    node is visited after all of its consumers; gradients accumulate
    additively in float64 keyed by object identity of the underlying array
    (or of the Scalar).
    """

    def __init__(self) -> None:
        self._nodes: list[Callable[[dict], None]] = []
        self._grads: dict[int, object] = {}
        self._keepalive: list[object] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _LOCAL.tape = None

    def _record(self, backward: Callable[[dict], None], *keep: object) -> None:
        self._nodes.append(backward)
        self._keepalive.extend(keep)

    def backward(self, loss: Scalar) -> None:
        """Seed d(loss)=1 and accumulate gradients for everything on the tape."""
        if not isinstance(loss, Scalar):
            raise TypeError("backward() expects the Scalar returned by a loss op")
        self._grads = {id(loss): 1.0}
        for node in reversed(self._nodes):
            node(self._grads)

    def grad(self, x) -> np.ndarray | float | None:
        """Gradient for a ValueTensor, parameter array, or Scalar (None if absent)."""
        if isinstance(x, ValueTensor):
            return self._grads.get(id(x.data))
        return self._grads.get(id(x))


def _key(x) -> int:
    return id(x.data) if isinstance(x, ValueTensor) else id(x)


def _out_grad(grads: dict, out) -> np.ndarray | float | None:
    return grads.get(_key(out))


def _accum(grads: dict, obj, delta) -> None:
    k = _key(obj)
    if k in grads:
        grads[k] = grads[k] + delta
    else:
        grads[k] = delta


def _as_f64_vec(v, n: int, what: str) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (n,):
        raise ShapeError(f"{what} length {a.shape} does not match channel count {n}")
    return a


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
    return cols.reshape(b, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    b, c, hp, wp = shape
    xg = np.zeros((b, c, hp, wp), dtype=np.float64)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xg[:, :, i : i + s * ho : s, j : j + s * wo : s] += cols[:, :, i, j]
    return xg


def conv2d(
    x: ValueTensor,
    kernel: KernelTensor,
    stride: int = 1,
    padding: int = 0,
    gamma_in=None,
    gamma_out=None,
) -> ValueTensor:
    """2-D convolution with optional fused per-channel scaling.

    Computes ``gamma_out * (conv(gamma_in * x, W) + bias)`` entirely in
    float64 before rounding once to float32, so scaling factors folded into
    the kernel later reproduce these outputs to within one rounding of the
    weights. ``gamma_in``/``gamma_out`` default to no scaling.
    """
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ConfigError(f"padding must be non-negative, got {padding}")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.data.shape
    if cin != kcin:
        raise ShapeError(
            f"input has {cin} channels but kernel expects {kcin} (kernel {kernel.data.shape})"
        )
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigError(
            f"conv output extent non-positive: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )

    gi = None if gamma_in is None else _as_f64_vec(gamma_in, cin, "gamma_in")
    go = None if gamma_out is None else _as_f64_vec(gamma_out, cout, "gamma_out")

    xf = x.data.astype(np.float64)
    if gi is not None:
        xf = xf * gi[None, :, None, None]
    if padding:
        xf = np.pad(xf, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xf, kh, kw, stride, ho, wo)
    w2 = kernel.data.reshape(cout, -1).astype(np.float64)
    z = np.matmul(w2, cols)  # (b, cout, ho*wo)
    if kernel.bias is not None:
        z = z + kernel.bias.astype(np.float64)[None, :, None]
    pre = z.reshape(b, cout, ho, wo)
    y = pre if go is None else pre * go[None, :, None, None]
    out = ValueTensor._wrap(y.astype(np.float32))

    tape = _active_tape()
    if tape is not None:
        pre32 = pre.astype(np.float32)  # cached pre-gamma_out activations
        cols_cache = cols
        padded_shape = xf.shape

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            g = np.asarray(g, dtype=np.float64)
            if go is not None:
                _accum(grads, go_param, (pre32 * g).sum(axis=(0, 2, 3)))
                dz = g * go[None, :, None, None]
            else:
                dz = g
            if kernel.bias is not None:
                _accum(grads, kernel.bias, dz.sum(axis=(0, 2, 3)))
            dzm = dz.reshape(b, cout, ho * wo)
            dw = np.matmul(dzm, cols_cache.transpose(0, 2, 1)).sum(axis=0)
            _accum(grads, kernel.data, dw.reshape(kernel.data.shape))
            dcols = np.matmul(w2.T, dzm)
            dxp = _col2im(dcols, padded_shape, kh, kw, stride, ho, wo)
            if padding:
                dxp = dxp[:, :, padding:-padding or None, padding:-padding or None]
            if gi is not None:
                _accum(grads, gi_param, (x.data * dxp).sum(axis=(0, 2, 3)))
                dxp = dxp * gi[None, :, None, None]
            _accum(grads, x, dxp)

        gi_param = gamma_in
        go_param = gamma_out
        tape._record(_bw, x, out, kernel, gamma_in, gamma_out)
    return out


# ---------------------------------------------------------------------------
# shape/permutation ops


def pixel_shuffle(x: ValueTensor, r: int) -> ValueTensor:
    """Periodic shuffle: (b, c*r^2, h, w) -> (b, c, h*r, w*r)."""
    b, c, h, w = x.shape
    if r < 1:
        raise ConfigError(f"upscale factor must be positive, got {r}")
    if c % (r * r) != 0:
        raise ShapeError(f"channels {c} not divisible by r^2 = {r * r}")
    co = c // (r * r)
    y = (
        x.data.reshape(b, co, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(b, co, h * r, w * r)
        .copy()
    )
    out = ValueTensor._wrap(y)
    tape = _active_tape()
    if tape is not None:

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            g = np.asarray(g, dtype=np.float64)
            gx = (
                g.reshape(b, co, h, r, w, r)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(b, c, h, w)
                .copy()
            )
            _accum(grads, x, gx)

        tape._record(_bw, x, out)
    return out


def pixel_unshuffle(x: ValueTensor, r: int) -> ValueTensor:
    """Inverse of :func:`pixel_shuffle`: (b, c, h*r, w*r) -> (b, c*r^2, h, w)."""
    b, c, hr, wr = x.shape
    if r < 1:
        raise ConfigError(f"downscale factor must be positive, got {r}")
    if hr % r != 0 or wr % r != 0:
        raise ShapeError(f"spatial extents {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    y = (
        x.data.reshape(b, c, h, r, w, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(b, c * r * r, h, w)
        .copy()
    )
    out = ValueTensor._wrap(y)
    tape = _active_tape()
    if tape is not None:

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            g = np.asarray(g, dtype=np.float64)
            gx = (
                g.reshape(b, c, r, r, h, w)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(b, c, hr, wr)
                .copy()
            )
            _accum(grads, x, gx)

        tape._record(_bw, x, out)
    return out


def channel_scale(x: ValueTensor, gamma) -> ValueTensor:
    """Multiply every channel by its scaling factor: y[:, c] = gamma[c] * x[:, c]."""
    b, c, h, w = x.shape
    g = np.asarray(gamma, dtype=np.float32)
    if g.shape != (c,):
        raise ShapeError(f"gamma length {g.shape} does not match {c} channels")
    y = x.data * g[None, :, None, None]
    out = ValueTensor._wrap(y)
    tape = _active_tape()
    if tape is not None:

        def _bw(grads: dict) -> None:
            go = _out_grad(grads, out)
            if go is None:
                return
            go = np.asarray(go, dtype=np.float64)
            _accum(grads, gamma, np.einsum("bchw,bchw->c", x.data.astype(np.float64), go))
            _accum(grads, x, go * g.astype(np.float64)[None, :, None, None])

        tape._record(_bw, x, out, gamma)
    return out


def add(x: ValueTensor, y: ValueTensor) -> ValueTensor:
    if x.shape != y.shape:
        raise ShapeError(f"add shapes differ: {x.shape} vs {y.shape}")
    out = ValueTensor._wrap(x.data + y.data)
    tape = _active_tape()
    if tape is not None:

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            _accum(grads, x, g)
            _accum(grads, y, g)

        tape._record(_bw, x, y, out)
    return out


def leaky_relu(x: ValueTensor, slope: float = 0.1) -> ValueTensor:
    y = np.where(x.data >= 0, x.data, np.float32(slope) * x.data)
    out = ValueTensor._wrap(y.astype(np.float32))
    tape = _active_tape()
    if tape is not None:

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            mask = np.where(x.data >= 0, 1.0, slope)
            _accum(grads, x, np.asarray(g, dtype=np.float64) * mask)

        tape._record(_bw, x, out)
    return out


def concat_channels(parts: Sequence[ValueTensor]) -> ValueTensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    b, _, h, w = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != b or p.shape[2:] != (h, w):
            raise ShapeError(
                f"concat extents differ: {parts[0].shape} vs {p.shape}"
            )
    out = ValueTensor._wrap(np.concatenate([p.data for p in parts], axis=1))
    tape = _active_tape()
    if tape is not None:
        sizes = [p.shape[1] for p in parts]

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            g = np.asarray(g, dtype=np.float64)
            offset = 0
            for p, n in zip(parts, sizes):
                _accum(grads, p, g[:, offset : offset + n])
                offset += n

        tape._record(_bw, out, *parts)
    return out


def concat_batch(parts: Sequence[ValueTensor]) -> ValueTensor:
    """Stack tensors along the batch axis (e.g. frames for a frame-mean loss)."""
    if not parts:
        raise ShapeError("concat of zero tensors")
    for p in parts[1:]:
        if p.shape[1:] != parts[0].shape[1:]:
            raise ShapeError(f"concat extents differ: {parts[0].shape} vs {p.shape}")
    out = ValueTensor._wrap(np.concatenate([p.data for p in parts], axis=0))
    tape = _active_tape()
    if tape is not None:
        sizes = [p.shape[0] for p in parts]

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            g = np.asarray(g, dtype=np.float64)
            offset = 0
            for p, n in zip(parts, sizes):
                _accum(grads, p, g[offset : offset + n])
                offset += n

        tape._record(_bw, out, *parts)
    return out


def gather_channels(x: ValueTensor, indices: Sequence[int]) -> ValueTensor:
    """Select a channel subset (pruned-network read primitive)."""
    idx = _check_channel_indices(indices, x.shape[1])
    out = ValueTensor._wrap(np.ascontiguousarray(x.data[:, idx]))
    tape = _active_tape()
    if tape is not None:

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            gx = np.zeros(x.shape, dtype=np.float64)
            gx[:, idx] = g
            _accum(grads, x, gx)

        tape._record(_bw, x, out)
    return out


def scatter_channels(x: ValueTensor, indices: Sequence[int], width: int) -> ValueTensor:
    """Place channels of x at the given indices of a zero tensor of the target width."""
    idx = _check_channel_indices(indices, width)
    if len(idx) != x.shape[1]:
        raise ShapeError(f"scatter of {x.shape[1]} channels into {len(idx)} indices")
    b, _, h, w = x.shape
    y = np.zeros((b, width, h, w), dtype=np.float32)
    y[:, idx] = x.data
    out = ValueTensor._wrap(y)
    tape = _active_tape()
    if tape is not None:

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            _accum(grads, x, np.asarray(g, dtype=np.float64)[:, idx])

        tape._record(_bw, x, out)
    return out


def scatter_add_channels(base: ValueTensor, delta: ValueTensor, indices: Sequence[int]) -> ValueTensor:
    """Residual write restricted to kept channels: out = base; out[:, idx] += delta."""
    idx = _check_channel_indices(indices, base.shape[1])
    if len(idx) != delta.shape[1]:
        raise ShapeError(f"scatter-add of {delta.shape[1]} channels into {len(idx)} indices")
    if base.shape[0] != delta.shape[0] or base.shape[2:] != delta.shape[2:]:
        raise ShapeError(f"scatter-add extents differ: {base.shape} vs {delta.shape}")
    y = base.data.copy()
    y[:, idx] += delta.data
    out = ValueTensor._wrap(y)
    tape = _active_tape()
    if tape is not None:

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            g = np.asarray(g, dtype=np.float64)
            _accum(grads, base, g)
            _accum(grads, delta, g[:, idx])

        tape._record(_bw, base, delta, out)
    return out


def _check_channel_indices(indices: Sequence[int], width: int) -> np.ndarray:
    idx = np.asarray(list(indices), dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("channel index set must be a non-empty 1-D sequence")
    if idx.min() < 0 or idx.max() >= width:
        raise ShapeError(f"channel index out of range [0, {width}): {idx.tolist()}")
    if np.unique(idx).size != idx.size:
        raise ShapeError(f"duplicate channel indices: {idx.tolist()}")
    return idx


def bilinear_resize(x: ValueTensor, factor: int) -> ValueTensor:
    """Bilinear upsampling by an integer factor (half-pixel-centre convention)."""
    if factor < 1:
        raise ConfigError(f"resize factor must be positive, got {factor}")
    b, c, h, w = x.shape
    ah = _bilinear_matrix(h, factor)
    aw = _bilinear_matrix(w, factor)
    y = np.einsum(
        "Yh,bchw,Xw->bcYX", ah, x.data.astype(np.float64), aw, optimize=True
    )
    out = ValueTensor._wrap(y.astype(np.float32))
    tape = _active_tape()
    if tape is not None:

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            g = np.asarray(g, dtype=np.float64)
            _accum(grads, x, np.einsum("Yh,bcYX,Xw->bchw", ah, g, aw, optimize=True))

        tape._record(_bw, x, out)
    return out


_BILINEAR_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    key = (n_in, factor)
    m = _BILINEAR_CACHE.get(key)
    if m is None:
        n_out = n_in * factor
        m = np.zeros((n_out, n_in), dtype=np.float64)
        for o in range(n_out):
            src = (o + 0.5) / factor - 0.5
            i0 = int(np.floor(src))
            t = src - i0
            lo = min(max(i0, 0), n_in - 1)
            hi = min(max(i0 + 1, 0), n_in - 1)
            m[o, lo] += 1.0 - t
            m[o, hi] += t
        _BILINEAR_CACHE[key] = m
    return m


def shift2d(x: ValueTensor, dy: int, dx: int) -> ValueTensor:
    """Integer translation with zero fill: out[y, x] = in[y - dy, x - dx]."""
    b, c, h, w = x.shape
    y = np.zeros_like(x.data)
    ys0, ys1 = max(dy, 0), min(h + dy, h)
    xs0, xs1 = max(dx, 0), min(w + dx, w)
    if ys0 < ys1 and xs0 < xs1:
        y[:, :, ys0:ys1, xs0:xs1] = x.data[:, :, ys0 - dy : ys1 - dy, xs0 - dx : xs1 - dx]
    out = ValueTensor._wrap(y)
    tape = _active_tape()
    if tape is not None:

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            g = np.asarray(g, dtype=np.float64)
            gx = np.zeros((b, c, h, w), dtype=np.float64)
            if ys0 < ys1 and xs0 < xs1:
                gx[:, :, ys0 - dy : ys1 - dy, xs0 - dx : xs1 - dx] = g[:, :, ys0:ys1, xs0:xs1]
            _accum(grads, x, gx)

        tape._record(_bw, x, out)
    return out


# ---------------------------------------------------------------------------
# scalar reductions


def charbonnier(pred: ValueTensor, target: ValueTensor, eps: float = 1e-6) -> Scalar:
    """Robust reconstruction loss: mean over frames of sqrt(SSE_frame + eps^2).

    Frames are the batch entries of ``pred``/``target``.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"charbonnier shapes differ: {pred.shape} vs {target.shape}")
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    t = pred.shape[0]
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    sse = np.einsum("bchw,bchw->b", diff, diff)
    root = np.sqrt(sse + eps * eps)
    out = Scalar(root.mean())
    tape = _active_tape()
    if tape is not None:

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            scale = float(g) / t / root
            d = diff * scale[:, None, None, None]
            _accum(grads, pred, d)
            _accum(grads, target, -d)

        tape._record(_bw, pred, target, out)
    return out


def mae(a: ValueTensor, b: ValueTensor) -> Scalar:
    """Mean absolute error over all entries."""
    if a.shape != b.shape:
        raise ShapeError(f"mae shapes differ: {a.shape} vs {b.shape}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    out = Scalar(np.abs(diff).mean())
    tape = _active_tape()
    if tape is not None:

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            d = np.sign(diff) * (float(g) / diff.size)
            _accum(grads, a, d)
            _accum(grads, b, -d)

        tape._record(_bw, a, b, out)
    return out


def mse(a: ValueTensor, b: ValueTensor) -> Scalar:
    """Mean squared error over all entries."""
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    out = Scalar(np.mean(diff * diff))
    tape = _active_tape()
    if tape is not None:

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            d = diff * (2.0 * float(g) / diff.size)
            _accum(grads, a, d)
            _accum(grads, b, -d)

        tape._record(_bw, a, b, out)
    return out


def reduce_sum(x: ValueTensor) -> Scalar:
    out = Scalar(x.data.astype(np.float64).sum())
    tape = _active_tape()
    if tape is not None:

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            _accum(grads, x, np.full(x.shape, float(g), dtype=np.float64))

        tape._record(_bw, x, out)
    return out


def masked_sq_sum(vec, indices: Sequence[int]) -> Scalar:
    """Squared L2 penalty of the selected entries of a 1-D parameter vector."""
    v = np.asarray(vec)
    if v.ndim != 1:
        raise ShapeError(f"masked_sq_sum expects a 1-D vector, got shape {v.shape}")
    idx = np.asarray(list(indices), dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= v.size):
        raise ShapeError(f"penalty index out of range [0, {v.size})")
    sel = v[idx].astype(np.float64)
    out = Scalar(float(np.dot(sel, sel)))
    tape = _active_tape()
    if tape is not None:

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            gv = np.zeros(v.size, dtype=np.float64)
            gv[idx] = 2.0 * float(g) * sel
            _accum(grads, vec, gv)

        tape._record(_bw, vec, out)
    return out


def scalar_add(a: Scalar, b: Scalar) -> Scalar:
    out = Scalar(a.value + b.value)
    tape = _active_tape()
    if tape is not None:

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            _accum(grads, a, float(g))
            _accum(grads, b, float(g))

        tape._record(_bw, a, b, out)
    return out


def scalar_scale(a: Scalar, c: float) -> Scalar:
    out = Scalar(a.value * c)
    tape = _active_tape()
    if tape is not None:

        def _bw(grads: dict) -> None:
            g = _out_grad(grads, out)
            if g is None:
                return
            _accum(grads, a, float(g) * c)

        tape._record(_bw, a, out)
    return out


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckReport:
    """Outcome of a central-difference check of the tape gradients."""

    def __init__(self, max_rel_error: float, passed: bool, per_param: list[float]) -> None:
        self.max_rel_error = max_rel_error
        self.passed = passed
        self.per_param = per_param

    def __repr__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"GradCheckReport({status}, max_rel_error={self.max_rel_error:.3e})"


def grad_check(f, params: Sequence[np.ndarray], h: float = 1e-3, tol: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` must be a zero-argument callable returning a Scalar; it is run once
    under a fresh Tape for the analytic gradients and twice per parameter
    entry for the numeric ones. Differencing uses the realised float32
    perturbation measured in float64. The relative error of each entry is
    normalised by the largest gradient magnitude of its parameter, and the
    check passes iff the maximum is <= tol.
    """
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.value):
        raise EvaluationError(f"function value is not finite: {loss.value}")
    tape.backward(loss)
    analytic = []
    for p in params:
        g = tape.grad(p)
        analytic.append(np.zeros(p.shape, dtype=np.float64) if g is None else np.asarray(g, dtype=np.float64))

    per_param: list[float] = []
    for p, ga in zip(params, analytic):
        flat = p.reshape(-1)
        numeric = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = np.float64(flat[i])
            f_hi = f().value
            flat[i] = orig - h
            lo = np.float64(flat[i])
            f_lo = f().value
            flat[i] = orig
            if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
                raise EvaluationError("perturbed function value is not finite")
            numeric[i] = (f_hi - f_lo) / (hi - lo)
        gn = numeric.reshape(p.shape)
        scale = max(np.abs(ga).max(initial=0.0), np.abs(gn).max(initial=0.0), 1e-8)
        per_param.append(float(np.abs(ga - gn).max(initial=0.0) / scale))

    worst = max(per_param) if per_param else 0.0
    return GradCheckReport(worst, worst <= tol, per_param)
