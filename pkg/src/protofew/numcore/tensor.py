"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays (float32 for training, float64 for oracle
re-runs); the tape is rebuilt on every forward pass. Broadcasting is
deliberately restricted to scalar*tensor and channel-wise bias/affine:
any other shape mix raises ``ContractViolation`` instead of silently
broadcasting.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping

import numpy as np

from ..errors import ContractViolation, NumericDomainError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class _TapeFlag(threading.local):
    def __init__(self):
        self.enabled = True


_tape = _TapeFlag()


class no_grad:
    """Context manager that suppresses tape recording (thread-local)."""

    def __enter__(self):
        self._prev = _tape.enabled
        _tape.enabled = False
        return self

    def __exit__(self, *exc):
        _tape.enabled = self._prev
        return False


class Tensor:
    """A dense n-d array plus optional gradient.

    ``_parents`` holds ``(input_tensor, vjp)`` pairs recorded during the
    forward pass; ``backward`` replays them in reverse topological order.
    Leaves created with ``requires_grad=True`` receive their gradient in
    ``.grad``. Instances are treated as immutable after construction;
    only the optimizer rewrites ``.data`` in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = ()):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents

    # -- basic protocol ------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        head = f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}"
        if self.name:
            head += f", name={self.name!r}"
        return head + ")"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, float(other))
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -float(other))
        return add(self, neg(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap ``x`` as a constant Tensor (no gradient)."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32 if dtype is None else dtype)
    return Tensor(arr)


def parameter(data, name: str | None = None, dtype=np.float32) -> Tensor:
    """A trainable leaf. Always copies: the optimizer rewrites the buffer
    in place, which must never alias caller-owned memory."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def _track(*pairs) -> tuple:
    """Keep only the (tensor, vjp) pairs that can need gradient."""
    if not _tape.enabled:
        return ()
    return tuple((t, fn) for t, fn in pairs
                 if t.requires_grad or t._parents)


def _needs_grad(*tensors) -> bool:
    return _tape.enabled and any(t.requires_grad or t._parents for t in tensors)


def _result(data, parents) -> Tensor:
    out = Tensor(data)
    if parents:
        out.requires_grad = True
        out._parents = parents
    return out


def _same_dtype(op: str, *tensors: Tensor):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ContractViolation(
                f"{op}: mixed dtypes {dt.name} vs {t.data.dtype.name}")
    return dt


def _check_finite(op: str, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericDomainError(f"{op}: non-finite input")


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Same-shape addition, or channel bias-add of a 1-d ``b`` along axis 1."""
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype("add", a, b)
    if a.shape == b.shape:
        data = a.data + b.data
        parents = _track((a, lambda g: g), (b, lambda g: g))
        return _result(data, parents)
    if b.data.ndim == 1 and a.data.ndim >= 2 and a.shape[1] == b.size:
        # bias along the channel axis: [B,C,...] + [C]
        ax = (0,) + tuple(range(2, a.data.ndim))
        bshape = (1, b.size) + (1,) * (a.data.ndim - 2)
        data = a.data + b.data.reshape(bshape)
        parents = _track((a, lambda g: g), (b, lambda g: g.sum(axis=ax)))
        return _result(data, parents)
    raise ContractViolation(f"add: shapes {a.shape} and {b.shape} do not conform "
                            "(only same-shape or channel bias-add)")


def add_scalar(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data + a.data.dtype.type(c), _track((a, lambda g: g)))


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, _track((a, lambda g: -g)))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return _result(a.data * c, _track((a, lambda g: g * c)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise ContractViolation(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _result(ad * bd, _track((a, lambda g: g * bd), (b, lambda g: g * ad)))


def channel_affine(x: Tensor, scale_c: np.ndarray, shift_c: np.ndarray) -> Tensor:
    """Per-channel ``x * scale + shift`` with constant 1-d coefficients."""
    x = as_tensor(x)
    if x.data.ndim < 2 or scale_c.shape != (x.shape[1],) or shift_c.shape != (x.shape[1],):
        raise ContractViolation(
            f"channel_affine: input {x.shape} vs coefficients {scale_c.shape}")
    cshape = (1, x.shape[1]) + (1,) * (x.data.ndim - 2)
    s = scale_c.reshape(cshape).astype(x.dtype, copy=False)
    data = x.data * s + shift_c.reshape(cshape).astype(x.dtype, copy=False)
    return _result(data, _track((x, lambda g: g * s)))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = np.maximum(x.data, 0)
    mask = x.data > 0
    return _result(data, _track((x, lambda g: g * mask)))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _result(t, _track((x, lambda g: g * (1 - t * t))))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _result(e, _track((x, lambda g: g * e)))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericDomainError("log: non-positive input")
    xd = x.data
    return _result(np.log(xd), _track((x, lambda g: g / xd)))


def tanh_clip(x: Tensor, bound: float) -> Tensor:
    """Soft clip to |value| <= bound via bound * tanh(x / bound)."""
    if bound <= 0:
        raise ContractViolation("tanh_clip: bound must be positive")
    return scale(tanh(scale(x, 1.0 / bound)), bound)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return _result(ad @ bd, _track((a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w.T + b`` with ``x: [B, I]`` and ``w: [O, I]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ContractViolation(f"linear: input {x.shape} vs weight {w.shape}")
    out = matmul(x, transpose(w, (1, 0)))
    if b is not None:
        out = add(out, b)
    return out


def dot_product_pairwise(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs dot products: ``[m, d] x [n, d] -> [m, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype("dot_product_pairwise", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractViolation(
            f"dot_product_pairwise: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return _result(ad @ bd.T, _track((a, lambda g: g @ bd), (b, lambda g: g.T @ ad)))


def squared_euclidean_pairwise(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs squared Euclidean distances: ``[m, d] x [n, d] -> [m, n]``.

    Computed from explicit differences so that identical rows give an
    exactly-zero distance (no catastrophic cancellation).
    """
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype("squared_euclidean_pairwise", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractViolation(
            f"squared_euclidean_pairwise: shapes {a.shape} and {b.shape} do not conform")
    diff = a.data[:, None, :] - b.data[None, :, :]          # [m, n, d]
    data = np.einsum("mnd,mnd->mn", diff, diff, optimize=True)

    def vjp_a(g):
        return 2.0 * np.einsum("mn,mnd->md", g, diff, optimize=True)

    def vjp_b(g):
        return -2.0 * np.einsum("mn,mnd->nd", g, diff, optimize=True)

    return _result(data, _track((a, vjp_a), (b, vjp_b)))


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale rows to unit Euclidean norm (norm floored at ``eps``)."""
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    norm = np.maximum(norm, eps).astype(x.dtype, copy=False)
    y = x.data / norm

    def vjp(g):
        return (g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm

    return _result(y, _track((x, vjp)))


def position_dot_scores(a: Tensor, b: Tensor) -> Tensor:
    """Per-position pairwise scores for two local grids.

    ``a, b: [B, D, P] -> [B, B, P]`` where entry (i, j, p) is the dot
    product of a's item i with b's item j at spatial position p.
    """
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype("position_dot_scores", a, b)
    if a.data.ndim != 3 or a.shape != b.shape:
        raise ContractViolation(
            f"position_dot_scores: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    data = np.einsum("idp,jdp->ijp", ad, bd, optimize=True)

    def vjp_a(g):
        return np.einsum("ijp,jdp->idp", g, bd, optimize=True)

    def vjp_b(g):
        return np.einsum("ijp,idp->jdp", g, ad, optimize=True)

    return _result(data, _track((a, vjp_a), (b, vjp_b)))


def global_local_scores(vec: Tensor, grid: Tensor) -> Tensor:
    """Scores between global vectors and every grid position.

    ``vec: [B, D]``, ``grid: [B, D, P] -> [B, B, P]`` with entry
    (i, j, p) = vec_i . grid_j[:, p].
    """
    vec, grid = as_tensor(vec), as_tensor(grid)
    _same_dtype("global_local_scores", vec, grid)
    if vec.data.ndim != 2 or grid.data.ndim != 3 or vec.shape[0] != grid.shape[0] \
            or vec.shape[1] != grid.shape[1]:
        raise ContractViolation(
            f"global_local_scores: shapes {vec.shape} and {grid.shape} do not conform")
    vd, gd = vec.data, grid.data
    data = np.einsum("id,jdp->ijp", vd, gd, optimize=True)

    def vjp_vec(g):
        return np.einsum("ijp,jdp->id", g, gd, optimize=True)

    def vjp_grid(g):
        return np.einsum("ijp,id->jdp", g, vd, optimize=True)

    return _result(data, _track((vec, vjp_vec), (grid, vjp_grid)))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return np.full(shape, g, dtype=g.dtype)
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return _result(data, _track((x, vjp)))


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis=axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    data = x.data.reshape(shape)
    return _result(data, _track((x, lambda g: g.reshape(old))))


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), _track((x, lambda g: g.transpose(inv))))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return y * (g - np.sum(g * y, axis=axis, keepdims=True))

    return _result(y, _track((x, vjp)))


def log_sum_exp(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-stabilized log-sum-exp, reducing ``axis``. Supports -inf entries."""
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = np.squeeze(m + np.log(s), axis=axis)
    p = e / s  # softmax, reused by the pullback

    def vjp(g):
        return np.expand_dims(g, axis) * p

    return _result(data, _track((x, vjp)))


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv_output_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def _im2col(xd: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = xd.shape
    hp = conv_output_extent(h, kh, stride, pad)
    wp = conv_output_extent(w, kw, stride, pad)
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                     # [B,C,hp,wp,kh,kw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * hp * wp, c * kh * kw)
    return np.ascontiguousarray(cols), hp, wp


def _col2im(dcols: np.ndarray, xshape, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = xshape
    hp = conv_output_extent(h, kh, stride, pad)
    wp = conv_output_extent(w, kw, stride, pad)
    dwin = dcols.reshape(b, hp, wp, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * hp:stride, j:j + stride * wp:stride] += dwin[..., i, j]
    if pad:
        return dxp[:, :, pad:pad + h, pad:pad + w]
    return dxp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution (cross-correlation): ``x [B,Cin,H,W]``, ``w [Cout,Cin,kh,kw]``."""
    x, w = as_tensor(x), as_tensor(w)
    _same_dtype("conv2d", x, w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ContractViolation(f"conv2d: input {x.shape} vs kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise ContractViolation(f"conv2d: bad stride/pad ({stride}, {pad})")
    bsz, _, h, wth = x.shape
    cout, cin, kh, kw = w.shape
    if h + 2 * pad < kh or wth + 2 * pad < kw:
        raise ContractViolation(
            f"conv2d: kernel {(kh, kw)} exceeds padded input {(h + 2 * pad, wth + 2 * pad)}")
    cols, hp, wp = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (cols @ wmat.T).reshape(bsz, hp, wp, cout).transpose(0, 3, 1, 2)
    xshape = x.shape

    def vjp_x(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(bsz * hp * wp, cout)
        return _col2im(gmat @ wmat, xshape, kh, kw, stride, pad)

    def vjp_w(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(bsz * hp * wp, cout)
        return (gmat.T @ cols).reshape(cout, cin, kh, kw)

    out_t = _result(out, _track((x, vjp_x), (w, vjp_w)))
    if b is not None:
        out_t = add(out_t, b)
    return out_t


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: ``[B,C,H,W] -> [B,C]``."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ContractViolation(f"global_avg_pool: expected 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    data = x.data.mean(axis=(2, 3))
    inv = x.data.dtype.type(1.0 / (h * w))

    def vjp(g):
        return np.broadcast_to(g[:, :, None, None], (b, c, h, w)) * inv

    return _result(data, _track((x, vjp)))


def _pool_matrix(extent: int, target: int, dtype) -> np.ndarray:
    """Averaging matrix [target, extent] with adaptive bin edges."""
    m = np.zeros((target, extent), dtype=np.float64)
    for i in range(target):
        lo = (i * extent) // target
        hi = -(-((i + 1) * extent) // target)  # ceil
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m.astype(dtype)


def adaptive_avg_pool2d(x: Tensor, target: int) -> Tensor:
    """Average-pool a ``[B,C,H,W]`` map to a ``target x target`` grid."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ContractViolation(f"adaptive_avg_pool2d: expected 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    if target < 1 or target > h or target > w:
        raise ContractViolation(f"adaptive_avg_pool2d: target {target} vs extent {(h, w)}")
    if target == h and target == w:
        return x
    ph = _pool_matrix(h, target, x.dtype)
    pw = _pool_matrix(w, target, x.dtype)
    data = np.einsum("oh,bchw,pw->bcop", ph, x.data, pw, optimize=True)

    def vjp(g):
        return np.einsum("oh,bcop,pw->bchw", ph, g, pw, optimize=True)

    return _result(data, _track((x, vjp)))


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Batch normalization over (B, H, W) per channel, training statistics.

    Returns ``(y, batch_mean, batch_var)``; the caller folds the batch
    statistics into its running buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ContractViolation(
            f"batch_norm_train: input {x.shape} vs gamma {gamma.shape} beta {beta.shape}")
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    cshape = (1, x.shape[1], 1, 1)
    xhat = (x.data - mean.reshape(cshape)) * inv_std.reshape(cshape)
    y = xhat * gamma.data.reshape(cshape) + beta.data.reshape(cshape)
    gdat = gamma.data

    def vjp_x(g):
        gsum = g.sum(axis=axes, keepdims=True)
        gx = (g * xhat).sum(axis=axes, keepdims=True)
        return (gdat.reshape(cshape) * inv_std.reshape(cshape)) * (
            g - gsum / n - xhat * gx / n)

    def vjp_gamma(g):
        return (g * xhat).sum(axis=axes)

    def vjp_beta(g):
        return g.sum(axis=axes)

    out = _result(y, _track((x, vjp_x), (gamma, vjp_gamma), (beta, vjp_beta)))
    return out, mean, var


def batch_norm_eval(x: Tensor, gamma: np.ndarray, beta: np.ndarray,
                    running_mean: np.ndarray, running_var: np.ndarray,
                    eps: float = 1e-5) -> Tensor:
    """Batch normalization with frozen statistics; gamma/beta are constants."""
    inv_std = 1.0 / np.sqrt(running_var + eps)
    return channel_affine(x, gamma * inv_std, beta - running_mean * gamma * inv_std)


# ---------------------------------------------------------------------------
# public dispatcher and backward pass
# ---------------------------------------------------------------------------

_OP_TABLE: Mapping[str, Callable] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "global_avg_pool": global_avg_pool,
    "linear": linear,
    "add": add,
    "scale": scale,
    "softmax": softmax,
    "log_sum_exp": log_sum_exp,
    "squared_euclidean_pairwise": squared_euclidean_pairwise,
    "dot_product_pairwise": dot_product_pairwise,
    "l2_normalize": l2_normalize,
}


def forward_op(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Validated entry point for the supported op vocabulary.

    Checks the op kind, input finiteness and shape conformance, then
    dispatches; a graph edge is recorded whenever any input requires grad.
    """
    fn = _OP_TABLE.get(op_kind)
    if fn is None:
        raise ContractViolation(
            f"forward_op: unknown op kind {op_kind!r}; expected one of {sorted(_OP_TABLE)}")
    tensors = [as_tensor(t) for t in inputs]
    _check_finite(op_kind, *(t.data for t in tensors))
    return fn(*tensors, **kwargs)


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    """Reverse-mode sweep from a scalar loss.

    Returns ``{tensor: gradient}`` for every reachable ``requires_grad``
    leaf and sets each leaf's ``.grad``. When ``params`` is given, listed
    parameters that the loss never touched receive an explicit zero
    gradient of their own shape.
    """
    if not isinstance(loss, Tensor):
        raise ContractViolation("backward: loss must be a Tensor")
    if loss.size != 1:
        raise ContractViolation(f"backward: loss must be scalar, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NumericDomainError("backward: loss is not finite")

    # iterative topological order over the tape
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
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and not node._parents:
            acc = result.get(node)
            result[node] = g if acc is None else acc + g
        for parent, vjp in node._parents:
            pg = vjp(g)
            if pg.shape != parent.shape:
                raise ContractViolation(
                    f"backward: vjp produced shape {pg.shape} for parent {parent.shape}")
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg

    for t, g in result.items():
        t.grad = g.astype(t.dtype, copy=False)
    if params is not None:
        for p in params:
            if p not in result:
                z = np.zeros_like(p.data)
                result[p] = z
                p.grad = z
    return result
