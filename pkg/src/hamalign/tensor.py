"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation builds the graph as it runs (define-by-run): an op returns a
new Tensor holding the forward value plus a closure that knows how to push a
gradient back into its parents. `backward(loss)` walks the recorded graph
once, in reverse topological order, accumulating gradients additively across
fan-out. The tape lives in the tensors themselves and is rebuilt on every
forward pass.

All computation is float64. Broadcasting is deliberately narrow - scalars
against anything, and (C,1,1) against (C,H,W) - so every backward reduction
is auditable. Richer broadcasts are rejected with a DimensionError.

Thread safety: building one graph and running its backward is single
threaded. Distinct graphs over distinct tensors may run on different threads
(the grad-enable flag is thread local); a Tensor must not be shared between
two graphs executing at the same time.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class ConfigurationError(ValueError):
    """A structural parameter (group count, factor, ...) is invalid."""


_node_ids = itertools.count()
_tls = threading.local()


def grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class no_grad:
    """Context manager: ops run inside build no backward graph."""

    def __enter__(self):
        self._prev = grad_enabled()
        _tls.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


class Tensor:
    """A node in the differentiation graph: value, optional grad, parents."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut out of the graph (constant from here on)."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar; the module-level functions are the real API
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, shape):
        return reshape(self, shape)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled():
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = parents
                out._backward = backward_fn
                break
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _toposort(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate d(loss)/d(leaf) for every requires_grad leaf under `loss`.

    Each graph node is visited exactly once; gradients from multiple uses
    of the same tensor accumulate additively.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not require grad (no leaf to differentiate)")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# broadcasting (scalar, or (C,1,1) vs (C,H,W))

def _check_broadcast(op: str, sa, sb):
    if sa == sb:
        return
    if sa == () or sb == ():
        return
    if len(sa) == 3 and len(sb) == 3 and sa[0] == sb[0]:
        if sa[1:] == (1, 1) or sb[1:] == (1, 1):
            return
    raise DimensionError(f"{op}: shapes {sa} and {sb} do not conform")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the (smaller) broadcast operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=(1, 2), keepdims=True)


# ---------------------------------------------------------------------------
# elementwise primitives

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a.shape, b.shape)
    def bwd(g):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(g, b.shape))
    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a.shape, b.shape)
    def bwd(g):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, -_reduce_to(g, b.shape))
    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a.shape, b.shape)
    def bwd(g):
        _accumulate(a, _reduce_to(g * b.data, a.shape))
        _accumulate(b, _reduce_to(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("div", a.shape, b.shape)
    inv = 1.0 / b.data
    out = a.data * inv
    def bwd(g):
        _accumulate(a, _reduce_to(g * inv, a.shape))
        _accumulate(b, _reduce_to(-g * out * inv, b.shape))
    return _make(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _lift(a)
    def bwd(g):
        _accumulate(a, -g)
    return _make(-a.data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    a = _lift(a)
    # stable on both tails
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    def bwd(g):
        _accumulate(a, g * y * (1.0 - y))
    return _make(y, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    y = np.exp(a.data)
    def bwd(g):
        _accumulate(a, g * y)
    return _make(y, (a,), bwd)


def log(a: Tensor) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0.0):
        worst = float(a.data.min())
        raise ValueError(f"log: non-positive input (min value {worst})")
    def bwd(g):
        _accumulate(a, g / a.data)
    return _make(np.log(a.data), (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    a = _lift(a)
    if np.any(a.data < 0.0):
        raise ValueError(f"sqrt: negative input (min value {float(a.data.min())})")
    y = np.sqrt(a.data)
    def bwd(g):
        _accumulate(a, g * 0.5 / y)
    return _make(y, (a,), bwd)


def abs_(a: Tensor) -> Tensor:
    a = _lift(a)
    def bwd(g):
        _accumulate(a, g * np.sign(a.data))
    return _make(np.abs(a.data), (a,), bwd)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    a = _lift(a)
    mask = a.data >= 0
    def bwd(g):
        _accumulate(a, g * np.where(mask, 1.0, slope))
    return _make(np.where(mask, a.data, slope * a.data), (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient flows only where unclipped."""
    a = _lift(a)
    inside = (a.data >= lo) & (a.data <= hi)
    def bwd(g):
        _accumulate(a, g * inside)
    return _make(np.clip(a.data, lo, hi), (a,), bwd)


# ---------------------------------------------------------------------------
# reductions

def sum_all(a: Tensor) -> Tensor:
    a = _lift(a)
    def bwd(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy() if a.data.shape else g)
    return _make(np.asarray(a.data.sum()), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    a = _lift(a)
    n = a.data.size
    def bwd(g):
        _accumulate(a, np.full(a.data.shape, float(g) / n) if a.data.shape else g)
    return _make(np.asarray(a.data.mean()), (a,), bwd)


def mean_tensors(ts: Sequence[Tensor]) -> Tensor:
    """Mean of a list of same-shape tensors (used for batch averaging)."""
    total = ts[0]
    for t in ts[1:]:
        total = add(total, t)
    return mul(total, 1.0 / len(ts))


def global_avg_pool(a: Tensor) -> Tensor:
    """(C,H,W) -> (C,1,1), the per-channel spatial mean."""
    a = _lift(a)
    if a.data.ndim != 3:
        raise DimensionError(f"global_avg_pool: expected rank-3 input, got shape {a.shape}")
    c, h, w = a.data.shape
    out = a.data.mean(axis=(1, 2), keepdims=True)
    def bwd(g):
        _accumulate(a, np.broadcast_to(g / (h * w), a.data.shape).copy())
    return _make(out, (a,), bwd)


def avg_pool2d(a: Tensor, factor: int) -> Tensor:
    """Average-resize (C,H,W) down by an integer factor per axis."""
    a = _lift(a)
    if a.data.ndim != 3:
        raise DimensionError(f"avg_pool2d: expected rank-3 input, got shape {a.shape}")
    c, h, w = a.data.shape
    f = int(factor)
    if f < 1 or h % f or w % f:
        raise ConfigurationError(f"avg_pool2d: size {h}x{w} not divisible by factor {factor}")
    if f == 1:
        return identity(a)
    out = a.data.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))
    def bwd(g):
        up = np.repeat(np.repeat(g, f, axis=1), f, axis=2) / (f * f)
        _accumulate(a, up)
    return _make(out, (a,), bwd)


def identity(a: Tensor) -> Tensor:
    a = _lift(a)
    def bwd(g):
        _accumulate(a, g)
    return _make(a.data, (a,), bwd)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view shape {a.shape} as {shape}")
    def bwd(g):
        _accumulate(a, g.reshape(a.data.shape))
    return _make(a.data.reshape(shape), (a,), bwd)


def transpose2d(a: Tensor) -> Tensor:
    a = _lift(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose2d: expected rank-2 input, got shape {a.shape}")
    def bwd(g):
        _accumulate(a, g.T)
    return _make(a.data.T.copy(), (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along one axis; all other dims must match exactly."""
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ValueError("concat: empty input list")
    ref = parts[0].data.shape
    for p in parts[1:]:
        s = p.data.shape
        if len(s) != len(ref) or s[:axis] != ref[:axis] or s[axis + 1:] != ref[axis + 1:]:
            raise DimensionError(f"concat: shapes {ref} and {s} differ off axis {axis}")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(idx)])
    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


def split(a: Tensor, parts: int, axis: int = 0):
    """Split into `parts` equal pieces along an axis; inverse of concat."""
    a = _lift(a)
    n = a.data.shape[axis]
    if n % parts:
        raise DimensionError(f"split: axis {axis} of shape {a.shape} not divisible into {parts} parts")
    step = n // parts
    outs = []
    for i in range(parts):
        idx = [slice(None)] * a.data.ndim
        idx[axis] = slice(i * step, (i + 1) * step)
        idx = tuple(idx)
        def bwd(g, idx=idx):
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[idx] += g
        piece = a.data[idx].copy()
        if grad_enabled() and a.requires_grad:
            outs.append(_make(piece, (a,), bwd))
        else:
            outs.append(Tensor(piece))
    return tuple(outs)


def permute_channels(a: Tensor, perm) -> Tensor:
    """Reorder axis-0 entries: out[i] = a[perm[i]]. perm must be a bijection."""
    a = _lift(a)
    perm = np.asarray(perm, dtype=np.intp)
    if perm.shape != (a.data.shape[0],) or sorted(perm.tolist()) != list(range(a.data.shape[0])):
        raise DimensionError(f"permute_channels: perm of length {perm.size} is not a permutation "
                             f"of axis 0 of shape {a.shape}")
    def bwd(g):
        back = np.empty_like(g)
        back[perm] = g
        _accumulate(a, back)
    return _make(a.data[perm].copy(), (a,), bwd)


def shuffle_permutation(channels: int, sub_groups: int) -> np.ndarray:
    """The reshape-transpose-flatten channel shuffle as an index permutation."""
    if channels % sub_groups:
        raise ConfigurationError(f"channel_shuffle: {channels} channels not divisible "
                                 f"into {sub_groups} sub-groups")
    return np.arange(channels).reshape(sub_groups, channels // sub_groups).T.reshape(-1)


def channel_shuffle(a: Tensor, sub_groups: int = 2) -> Tensor:
    """Fixed channel permutation interleaving `sub_groups` contiguous blocks."""
    a = _lift(a)
    return permute_channels(a, shuffle_permutation(a.data.shape[0], sub_groups))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor = None) -> Tensor:
    """Affine map of row vectors: (n,in) x (out,in)^T + (out,)."""
    x, weight = _lift(x), _lift(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = (x, weight)
    if bias is not None:
        bias = _lift(bias)
        if bias.data.shape != (weight.data.shape[0],):
            raise DimensionError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
        out = out + bias.data
        parents = (x, weight, bias)
    def bwd(g):
        _accumulate(x, g @ weight.data)
        _accumulate(weight, g.T @ x.data)
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))
    return _make(out, parents, bwd)


# ---------------------------------------------------------------------------
# softmax family

def softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Max-stabilized softmax along one axis; outputs sum to 1 there."""
    x = _lift(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(x, (g - dot) * y)
    return _make(y, (x,), bwd)


def log_softmax_axis(x: Tensor, axis: int) -> Tensor:
    x = _lift(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    def bwd(g):
        _accumulate(x, g - sm * g.sum(axis=axis, keepdims=True))
    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization and convolution

def group_norm(x: Tensor, num_groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize (C,H,W) to zero mean / unit variance within channel groups.

    Statistics are taken over (channels-in-group x H x W). A constant input
    has zero variance and maps to exact zeros (eps guards the division).
    """
    x = _lift(x)
    if x.data.ndim != 3:
        raise DimensionError(f"group_norm: expected rank-3 input, got shape {x.shape}")
    c, h, w = x.data.shape
    if num_groups < 1 or c % num_groups:
        raise ConfigurationError(f"group_norm: {c} channels not divisible into {num_groups} groups")
    if eps <= 0:
        raise ConfigurationError(f"group_norm: eps must be positive, got {eps}")
    n = (c // num_groups) * h * w
    xg = x.data.reshape(num_groups, n)
    mu = xg.mean(axis=1, keepdims=True)
    cent = xg - mu
    var = (cent * cent).mean(axis=1, keepdims=True)
    s = np.sqrt(var + eps)
    y = cent / s

    def bwd(g):
        gg = g.reshape(num_groups, n)
        gm = gg.mean(axis=1, keepdims=True)
        gy = (gg * y).mean(axis=1, keepdims=True)
        _accumulate(x, ((gg - gm - y * gy) / s).reshape(c, h, w))

    return _make(y.reshape(c, h, w), (x,), bwd)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct 2D convolution: (Cin,H,W) * (Cout,Cin,k,k) + (Cout,).

    Zero padding; output H' = (H + 2*pad - k)//stride + 1. Implemented as
    im2col + one matrix product, with the matching scatter in backward.
    """
    x, weight, bias = _lift(x), _lift(weight), _lift(bias)
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d: expected (Cin,H,W) and (Cout,Cin,k,k), "
                             f"got {x.shape} and {weight.shape}")
    cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d: input channels {cin} != weight channels {cin_w} "
                             f"(shapes {x.shape}, {weight.shape})")
    if kh != kw:
        raise DimensionError(f"conv2d: kernel must be square, got {kh}x{kw}")
    k = kh
    if bias.data.shape != (cout,):
        raise DimensionError(f"conv2d: bias {bias.shape} incompatible with {cout} output channels")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise DimensionError(f"conv2d: padded input {h + 2 * pad}x{w + 2 * pad} smaller than kernel {k}")
    if stride < 1:
        raise ConfigurationError(f"conv2d: stride must be >= 1, got {stride}")

    if pad:
        xp = np.zeros((cin, h + 2 * pad, w + 2 * pad))
        xp[:, pad:pad + h, pad:pad + w] = x.data
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * k * k, ho * wo)
    w2 = weight.data.reshape(cout, cin * k * k)
    out = (w2 @ cols + bias.data[:, None]).reshape(cout, ho, wo)

    def bwd(g):
        gmat = g.reshape(cout, ho * wo)
        _accumulate(bias, gmat.sum(axis=1))
        _accumulate(weight, (gmat @ cols.T).reshape(weight.data.shape))
        if x.requires_grad:
            dcols = (w2.T @ gmat).reshape(cin, k, k, ho, wo)
            dxp = np.zeros((cin, h + 2 * pad, w + 2 * pad))
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            _accumulate(x, dxp[:, pad:pad + h, pad:pad + w] if pad else dxp)

    return _make(out, (x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# gradient reversal

def grl(x: Tensor, scale: float) -> Tensor:
    """Gradient reversal: identity forward, -scale * gradient backward."""
    if scale <= 0:
        raise ValueError(f"grl: scale must be positive, got {scale}")
    x = _lift(x)
    def bwd(g):
        _accumulate(x, -scale * g)
    return _make(x.data, (x,), bwd)


# ---------------------------------------------------------------------------
# verification oracle

def grad_check(build: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               coords=None) -> float:
    """Compare reverse-mode gradients against central finite differences.

    `build` must deterministically map a leaf tensor to a scalar loss. For
    each checked coordinate i the oracle evaluates
    (f(x + h e_i) - f(x - h e_i)) / 2h and returns the maximum of
    |g_ad - g_fd| / max(1, |g_ad|, |g_fd|). `coords` restricts the check to
    a subset of flat indices (default: all of them).
    """
    if h <= 0:
        raise ValueError(f"grad_check: step h must be positive, got {h}")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    loss = build(leaf)
    backward(loss)
    if leaf.grad is None:
        g_ad = np.zeros_like(leaf.data)
    else:
        g_ad = leaf.grad.copy()
    if not np.all(np.isfinite(g_ad)):
        bad = int(np.argmin(np.isfinite(g_ad.ravel())))
        raise FloatingPointError(f"grad_check: non-finite autodiff gradient at flat coordinate {bad}")

    flat = leaf.data.ravel()
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(build(leaf).data)
            flat[i] = orig - h
            f_minus = float(build(leaf).data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"grad_check: non-finite forward value at flat coordinate {i}")
            g_fd = (f_plus - f_minus) / (2.0 * h)
            gi = g_ad.ravel()[i]
            err = abs(gi - g_fd) / max(1.0, abs(gi), abs(g_fd))
            worst = max(worst, err)
    return worst


def assert_finite(t: Tensor, name: str = "tensor"):
    """Raise if any value (or gradient) is NaN/Inf; names the coordinate."""
    for label, arr in (("data", t.data), ("grad", t.grad)):
        if arr is None:
            continue
        finite = np.isfinite(arr)
        if not finite.all():
            bad = int(np.argmin(finite.ravel()))
            raise FloatingPointError(f"{name}.{label}: non-finite value at flat coordinate {bad}")
