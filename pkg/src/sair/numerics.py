"""Reverse-mode differentiation over dense float64 arrays.

Define-by-run: operations executed while a :class:`GradientTape` is active
append themselves to that tape; ``tape.backward(loss)`` replays the record
once in reverse and accumulates adjoints into the leaves that requested
gradients.  The op set is deliberately small: exactly what the restoration
objective, the degradation operator, and the toy generator/embedder need.

Everything is float64.  Non-finite values anywhere are treated as a
contract violation and raise :class:`NonFiniteError` at the op boundary.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Array",
    "GradientTape",
    "NonFiniteError",
    "DegenerateVectorError",
    "array",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "dot",
    "sqnorm",
    "sigmoid",
    "tanh",
    "cumsum",
    "soft_round",
    "cosine_similarity",
    "conv2d",
    "dct8_forward",
    "dct8_inverse",
    "dct8_blocks",
    "downsample_area",
    "upsample_nearest",
    "resize_bilinear",
    "channel",
    "stack_channels",
    "record_op",
]


class NonFiniteError(ValueError):
    """A value that is required to be finite contains NaN or Inf."""


class DegenerateVectorError(ValueError):
    """A vector that must have positive norm is numerically zero."""


_NORM_EPS = 1e-12

_state = threading.local()


def _tape_stack() -> list["GradientTape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def _active_tape() -> "GradientTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def _ensure_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values in {what}")


class Array:
    """A dense float64 array, optionally tracked for gradients.

    ``data`` is the raw ndarray, ``requires_grad`` marks the array as a
    differentiation target (leaves) or as lying on a differentiable path
    (op outputs recorded on a tape), and ``grad`` is filled in by
    ``GradientTape.backward`` for leaves only.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _ensure_finite(arr, "array")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Array":
        return Array(self.data)

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    # -- arithmetic sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self) -> "Array":
        return _sum_all(self)

    def mean(self) -> "Array":
        return _mean_all(self)

    def abs(self) -> "Array":
        return _abs(self)

    def reshape(self, shape) -> "Array":
        return _reshape(self, shape)

    def flatten(self) -> "Array":
        return _reshape(self, (self.size,))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Array(shape={self.data.shape}{flag})"


def array(data, requires_grad: bool = False) -> Array:
    """Create a leaf array (copies its input)."""
    return Array(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def constant(data) -> Array:
    """Create a non-differentiable leaf without copying ndarray input."""
    return Array(data)


class GradientTape:
    """Ordered record of operations executed while the tape is active.

    Execution order is a valid topological order, so ``backward`` simply
    walks the record in reverse, visiting every recorded node exactly
    once.  Adjoints of intermediate nodes live in a scratch map and are
    dropped after use; only leaves with ``requires_grad`` end up with a
    populated ``.grad``.
    """

    def __init__(self):
        self._entries: list[tuple[Array, tuple[Array, ...], Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not active")
        stack.pop()

    def _record(self, out: Array, parents: tuple[Array, ...], backward: Callable) -> None:
        self._entries.append((out, parents, backward))
        self._produced.add(id(out))

    @property
    def num_recorded(self) -> int:
        return len(self._entries)

    def backward(self, loss: Array) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for tracked leaves."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        adjoints: dict[int, np.ndarray] = {}
        leaves: dict[int, Array] = {}
        seed = np.ones_like(loss.data)
        if id(loss) in self._produced:
            adjoints[id(loss)] = seed
        elif loss.requires_grad:
            adjoints[id(loss)] = seed
            leaves[id(loss)] = loss
        else:
            raise ValueError("loss was not recorded on this tape and is not a tracked leaf")

        for out, parents, backward in reversed(self._entries):
            g = adjoints.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg
                if key not in self._produced:
                    leaves[key] = parent

        for key, leaf in leaves.items():
            g = adjoints[key]
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def _coerce(x) -> Array:
    if isinstance(x, Array):
        return x
    return Array(np.asarray(x, dtype=np.float64))


def record_op(out_data: np.ndarray, parents: Sequence, backward: Callable) -> Array:
    """Build an op output, recording it on the active tape when tracked.

    ``backward(g)`` must return one gradient (or None) per parent, each
    shaped like that parent.  Used by modules that define fused ops with
    hand-derived adjoints (JPEG blocks, soft histograms, ...).
    """
    par = tuple(_coerce(p) for p in parents)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in par):
        out = Array(out_data, requires_grad=True)
        tape._record(out, par, backward)
    else:
        out = Array(out_data)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _binary_shapes(a: Array, b: Array, op: str) -> None:
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _collapse(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # fold a broadcast gradient back onto a size-1 operand
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Array:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        return (_collapse(g, a.data.shape), _collapse(g, b.data.shape))

    return record_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Array:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        return (_collapse(g, a.data.shape), _collapse(-g, b.data.shape))

    return record_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Array:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (_collapse(g * bd, ad.shape), _collapse(g * ad, bd.shape))

    return record_op(ad * bd, (a, b), backward)


def scale(a, c: float) -> Array:
    a = _coerce(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return record_op(a.data * c, (a,), backward)


def _sum_all(a: Array) -> Array:
    shape = a.data.shape

    def backward(g):
        return (np.full(shape, float(g.reshape(()))),)

    return record_op(np.sum(a.data), (a,), backward)


def _mean_all(a: Array) -> Array:
    shape = a.data.shape
    n = a.data.size

    def backward(g):
        return (np.full(shape, float(g.reshape(())) / n),)

    return record_op(np.mean(a.data), (a,), backward)


def _abs(a: Array) -> Array:
    # subgradient convention: d|x|/dx = 0 at x = 0
    sign = np.sign(a.data)

    def backward(g):
        return (g * sign,)

    return record_op(np.abs(a.data), (a,), backward)


def sqnorm(a) -> Array:
    """Squared Frobenius norm: sum of squared entries."""
    a = _coerce(a)
    ad = a.data

    def backward(g):
        return (2.0 * float(g.reshape(())) * ad,)

    return record_op(np.sum(ad * ad), (a,), backward)


def sigmoid(a) -> Array:
    a = _coerce(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return record_op(out, (a,), backward)


def tanh(a) -> Array:
    a = _coerce(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return record_op(out, (a,), backward)


def cumsum(a, axis: int = 0) -> Array:
    a = _coerce(a)

    def backward(g):
        rev = np.flip(g, axis=axis)
        return (np.flip(np.cumsum(rev, axis=axis), axis=axis),)

    return record_op(np.cumsum(a.data, axis=axis), (a,), backward)


def soft_round(a) -> Array:
    """Differentiable rounding: nearest(x) + (x - nearest(x))**3.

    ``nearest`` rounds half away from zero.  The residual stays within
    [-0.125, 0.125] of the nearest integer and the derivative is
    3*(x - nearest(x))**2.
    """
    a = _coerce(a)
    x = a.data
    nearest = np.sign(x) * np.floor(np.abs(x) + 0.5)
    delta = x - nearest

    def backward(g):
        return (g * 3.0 * delta * delta,)

    return record_op(nearest + delta**3, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Array:
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"matmul: inner dims {ad.shape} @ {bd.shape}")
        out = ad @ bd

        def backward(g):
            return (g @ bd.T, ad.T @ g)

    elif ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"matmul: inner dims {ad.shape} @ {bd.shape}")
        out = ad @ bd

        def backward(g):
            return (np.outer(g, bd), ad.T @ g)

    elif ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise ValueError(f"matmul: inner dims {ad.shape} @ {bd.shape}")
        out = ad @ bd

        def backward(g):
            return (bd @ g, np.outer(ad, g))

    else:
        raise ValueError(f"matmul: unsupported ranks {ad.ndim} and {bd.ndim}")
    return record_op(out, (a, b), backward)


def dot(a, b) -> Array:
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    if ad.ndim != 1 or bd.ndim != 1 or ad.shape != bd.shape:
        raise ValueError(f"dot: need equal-length vectors, got {ad.shape} and {bd.shape}")

    def backward(g):
        gs = float(g.reshape(()))
        return (gs * bd, gs * ad)

    return record_op(np.dot(ad, bd), (a, b), backward)


def cosine_similarity(a, b, eps: float = _NORM_EPS) -> Array:
    """Cosine of the angle between two vectors, with analytic gradient.

    Raises DegenerateVectorError when either norm falls below ``eps``.
    """
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    if ad.ndim != 1 or bd.ndim != 1 or ad.shape != bd.shape:
        raise ValueError(f"cosine_similarity: need equal-length vectors, got {ad.shape} and {bd.shape}")
    na = float(np.linalg.norm(ad))
    nb = float(np.linalg.norm(bd))
    if na < eps or nb < eps:
        raise DegenerateVectorError("cosine_similarity: vector norm below tolerance")
    cos = float(np.dot(ad, bd) / (na * nb))
    cos = min(1.0, max(-1.0, cos))

    def backward(g):
        gs = float(g.reshape(()))
        ga = gs * (bd / (na * nb) - cos * ad / (na * na))
        gb = gs * (ad / (na * nb) - cos * bd / (nb * nb))
        return (ga, gb)

    return record_op(np.float64(cos), (a, b), backward)


# ---------------------------------------------------------------------------
# image ops


def _as_hwc(data: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    if data.ndim == 2:
        return data[:, :, None], True
    if data.ndim == 3:
        return data, False
    raise ValueError(f"{what}: need a 2-D or 3-D (H, W, C) array, got shape {data.shape}")


def conv2d(image, kernel, padding: str = "same") -> Array:
    """Depthwise 2-D convolution (kernel flipped) of every channel.

    ``padding="same"`` zero-pads so the spatial size is preserved;
    ``"valid"`` keeps only fully-overlapping positions.  Kernel sides must
    be odd.  Differentiable in both the image and the kernel.
    """
    img = _coerce(image)
    ker = _coerce(kernel)
    if ker.data.ndim != 2:
        raise ValueError(f"conv2d: kernel must be 2-D, got shape {ker.data.shape}")
    kh, kw = ker.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel sides must be odd, got {ker.data.shape}")
    work, squeeze = _as_hwc(img.data, "conv2d")
    H, W, C = work.shape
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        padded = np.pad(work, ((ph, ph), (pw, pw), (0, 0)))
        Ho, Wo = H, W
    elif padding == "valid":
        if kh > H or kw > W:
            raise ValueError(f"conv2d: kernel {ker.data.shape} larger than image {(H, W)}")
        ph = pw = 0
        padded = work
        Ho, Wo = H - kh + 1, W - kw + 1
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")

    flipped = ker.data[::-1, ::-1]
    out = np.zeros((Ho, Wo, C))
    for i in range(kh):
        for j in range(kw):
            out += flipped[i, j] * padded[i : i + Ho, j : j + Wo, :]

    need_img = img.requires_grad
    need_ker = ker.requires_grad

    def backward(g):
        gw = g if not squeeze else g[:, :, None]
        gi = gk = None
        if need_img:
            gp = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    gp[i : i + Ho, j : j + Wo, :] += flipped[i, j] * gw
            gi = gp[ph : ph + H, pw : pw + W, :] if padding == "same" else gp
            if squeeze:
                gi = gi[:, :, 0]
        if need_ker:
            gkf = np.empty((kh, kw))
            for i in range(kh):
                for j in range(kw):
                    gkf[i, j] = np.sum(gw * padded[i : i + Ho, j : j + Wo, :])
            gk = gkf[::-1, ::-1]
        return (gi, gk)

    return record_op(out[:, :, 0] if squeeze else out, (img, ker), backward)


def _dct8_matrix() -> np.ndarray:
    n = np.arange(8)
    k = n[:, None]
    mat = np.cos((2 * n[None, :] + 1) * k * np.pi / 16.0)
    mat[0, :] *= np.sqrt(1.0 / 8.0)
    mat[1:, :] *= np.sqrt(2.0 / 8.0)
    return mat


_DCT8 = _dct8_matrix()


def _dct8_blocks_value(x: np.ndarray, inverse: bool) -> np.ndarray:
    H, W = x.shape
    m = _DCT8.T if inverse else _DCT8
    blocks = x.reshape(H // 8, 8, W // 8, 8)
    out = np.einsum("ai,hiwj,bj->hawb", m, blocks, m, optimize=True)
    return np.ascontiguousarray(out).reshape(H, W)


def dct8_blocks(x, inverse: bool = False) -> Array:
    """Orthonormal type-II DCT applied independently to each 8x8 tile."""
    x = _coerce(x)
    if x.data.ndim != 2:
        raise ValueError(f"dct8_blocks: need a 2-D array, got shape {x.data.shape}")
    H, W = x.data.shape
    if H % 8 != 0 or W % 8 != 0:
        raise ValueError(f"dct8_blocks: sides must be multiples of 8, got {(H, W)}")

    def backward(g):
        # the transform is orthogonal, so the adjoint is its inverse
        return (_dct8_blocks_value(g, not inverse),)

    return record_op(_dct8_blocks_value(x.data, inverse), (x,), backward)


def dct8_forward(block) -> Array:
    block = _coerce(block)
    if block.data.shape != (8, 8):
        raise ValueError(f"dct8_forward: need an 8x8 block, got shape {block.data.shape}")
    return dct8_blocks(block, inverse=False)


def dct8_inverse(block) -> Array:
    block = _coerce(block)
    if block.data.shape != (8, 8):
        raise ValueError(f"dct8_inverse: need an 8x8 block, got shape {block.data.shape}")
    return dct8_blocks(block, inverse=True)


def downsample_area(image, factor: int) -> Array:
    """Box-average downsampling by an integer factor."""
    img = _coerce(image)
    s = int(factor)
    if s < 1:
        raise ValueError(f"downsample_area: factor must be >= 1, got {factor}")
    if s == 1:
        return img
    work, squeeze = _as_hwc(img.data, "downsample_area")
    H, W, C = work.shape
    if H % s != 0 or W % s != 0:
        raise ValueError(f"downsample_area: factor {s} does not divide {(H, W)}")
    out = work.reshape(H // s, s, W // s, s, C).mean(axis=(1, 3))

    def backward(g):
        gw = g if not squeeze else g[:, :, None]
        gi = np.repeat(np.repeat(gw, s, axis=0), s, axis=1) / (s * s)
        return (gi[:, :, 0] if squeeze else gi,)

    return record_op(out[:, :, 0] if squeeze else out, (img,), backward)


def upsample_nearest(image, factor: int) -> Array:
    img = _coerce(image)
    s = int(factor)
    if s < 1:
        raise ValueError(f"upsample_nearest: factor must be >= 1, got {factor}")
    if s == 1:
        return img
    work, squeeze = _as_hwc(img.data, "upsample_nearest")
    H, W, C = work.shape
    out = np.repeat(np.repeat(work, s, axis=0), s, axis=1)

    def backward(g):
        gw = g if not squeeze else g[:, :, None]
        gi = gw.reshape(H, s, W, s, C).sum(axis=(1, 3))
        return (gi[:, :, 0] if squeeze else gi,)

    return record_op(out[:, :, 0] if squeeze else out, (img,), backward)


def _linear_resize_matrix(n_out: int, n_in: int) -> np.ndarray:
    # triangle filter at half-pixel centers; support widens with the
    # minification factor so downscales are antialiased, and rows
    # renormalize where the support runs off the edge
    if n_in == 1:
        return np.ones((n_out, 1))
    scale = n_in / n_out
    support = max(1.0, scale)
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    taps = np.arange(n_in)
    mat = np.maximum(0.0, 1.0 - np.abs(taps[None, :] - src[:, None]) / support)
    return mat / mat.sum(axis=1, keepdims=True)


def resize_bilinear(image, out_hw: tuple[int, int]) -> Array:
    """Bilinear resize to (H, W) with half-pixel centers; exact adjoint.

    Downscales widen the filter support by the shrink factor, matching
    how mainstream imaging libraries avoid aliasing when minifying.
    """
    img = _coerce(image)
    Ho, Wo = int(out_hw[0]), int(out_hw[1])
    if Ho < 1 or Wo < 1:
        raise ValueError(f"resize_bilinear: bad target size {out_hw}")
    work, squeeze = _as_hwc(img.data, "resize_bilinear")
    H, W, C = work.shape
    if (Ho, Wo) == (H, W):
        return img
    rows = _linear_resize_matrix(Ho, H)
    cols = _linear_resize_matrix(Wo, W)
    out = np.einsum("oh,hwc,pw->opc", rows, work, cols, optimize=True)

    def backward(g):
        gw = g if not squeeze else g[:, :, None]
        gi = np.einsum("oh,opc,pw->hwc", rows, gw, cols, optimize=True)
        return (gi[:, :, 0] if squeeze else gi,)

    return record_op(out[:, :, 0] if squeeze else out, (img,), backward)


# ---------------------------------------------------------------------------
# data movement


def _reshape(a: Array, shape) -> Array:
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    old = a.data.shape
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return record_op(out, (a,), backward)


def channel(image, index: int) -> Array:
    """Extract one channel of an (H, W, C) image as an (H, W) array."""
    img = _coerce(image)
    if img.data.ndim != 3:
        raise ValueError(f"channel: need an (H, W, C) array, got shape {img.data.shape}")
    c = int(index)
    H, W, C = img.data.shape
    if not 0 <= c < C:
        raise ValueError(f"channel: index {c} out of range for {C} channels")

    def backward(g):
        gi = np.zeros((H, W, C))
        gi[:, :, c] = g
        return (gi,)

    return record_op(np.ascontiguousarray(img.data[:, :, c]), (img,), backward)


def stack_channels(channels: Sequence) -> Array:
    """Stack (H, W) arrays into an (H, W, C) image."""
    chans = [_coerce(ch) for ch in channels]
    if not chans:
        raise ValueError("stack_channels: need at least one channel")
    shape = chans[0].data.shape
    for ch in chans:
        if ch.data.ndim != 2 or ch.data.shape != shape:
            raise ValueError("stack_channels: channels must all be 2-D with equal shape")
    out = np.stack([ch.data for ch in chans], axis=-1)

    def backward(g):
        return tuple(np.ascontiguousarray(g[:, :, i]) for i in range(len(chans)))

    return record_op(out, chans, backward)
