"""Dense-array arithmetic with reverse-mode differentiation.

A small computation graph over numpy arrays, sized for this model: strided
2-D convolution, (batched) affine maps, relu/sigmoid, row softmax, and the
usual reshaping/reduction glue. Ops are pure (inputs never mutated), reject
non-finite values at their boundaries, and accumulate in fixed orders so a
given graph evaluates bit-identically every time. Training graphs run in
float64; inside :func:`no_grad` the same code path skips node bookkeeping,
which is what inference (float32) uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteValue, NonScalarRoot, ShapeMismatch

_GRAD_ENABLED = True


class no_grad:
    """Context manager: build no graph, just evaluate."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A numpy array plus optional gradient bookkeeping.

    Doubles as the graph node: it remembers the op that produced it, its
    parent tensors, and a closure that routes an incoming cotangent to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        # single-pass probe: a float64 sum of finite float32/64 entries cannot
        # overflow here, so a non-finite sum pinpoints NaN/Inf in the data
        if not np.isfinite(arr.sum(dtype=np.float64)):
            if not np.isfinite(arr).all():
                raise NonFiniteValue(f"non-finite values entering op '{op}'")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar used sparingly by callers
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str = "param") -> Tensor:
    return Tensor(np.array(data), requires_grad=True, op=name)


def _node(data, parents, backward_fn, op) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward_fn)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(x, y) -> Tensor:
    if not isinstance(y, Tensor) and np.isscalar(y):
        xt = as_tensor(x)

        def bwd(g):
            xt._accum(_unbroadcast(g, xt.data.shape))

        return _node(xt.data + y, (xt,), bwd, "add")
    xt, yt = as_tensor(x), as_tensor(y)

    def bwd(g):
        if xt.requires_grad:
            xt._accum(_unbroadcast(g, xt.data.shape))
        if yt.requires_grad:
            yt._accum(_unbroadcast(g, yt.data.shape))

    return _node(xt.data + yt.data, (xt, yt), bwd, "add")


def sub(x, y) -> Tensor:
    if not isinstance(x, Tensor) and np.isscalar(x):
        yt = as_tensor(y)

        def bwd(g):
            yt._accum(_unbroadcast(-g, yt.data.shape))

        return _node(x - yt.data, (yt,), bwd, "sub")
    if not isinstance(y, Tensor) and np.isscalar(y):
        xt = as_tensor(x)

        def bwd(g):
            xt._accum(_unbroadcast(g, xt.data.shape))

        return _node(xt.data - y, (xt,), bwd, "sub")
    xt, yt = as_tensor(x), as_tensor(y)

    def bwd(g):
        if xt.requires_grad:
            xt._accum(_unbroadcast(g, xt.data.shape))
        if yt.requires_grad:
            yt._accum(_unbroadcast(-g, yt.data.shape))

    return _node(xt.data - yt.data, (xt, yt), bwd, "sub")


def neg(x) -> Tensor:
    xt = as_tensor(x)

    def bwd(g):
        xt._accum(-g)

    return _node(-xt.data, (xt,), bwd, "neg")


def mul(x, y) -> Tensor:
    if not isinstance(y, Tensor) and np.isscalar(y):
        xt = as_tensor(x)

        def bwd(g):
            xt._accum(_unbroadcast(g * y, xt.data.shape))

        return _node(xt.data * y, (xt,), bwd, "mul")
    xt, yt = as_tensor(x), as_tensor(y)

    def bwd(g):
        if xt.requires_grad:
            xt._accum(_unbroadcast(g * yt.data, xt.data.shape))
        if yt.requires_grad:
            yt._accum(_unbroadcast(g * xt.data, yt.data.shape))

    return _node(xt.data * yt.data, (xt, yt), bwd, "mul")


def scale(x, s: float) -> Tensor:
    return mul(x, float(s))


def div(x, y) -> Tensor:
    xt, yt = as_tensor(x), as_tensor(y)

    def bwd(g):
        if xt.requires_grad:
            xt._accum(_unbroadcast(g / yt.data, xt.data.shape))
        if yt.requires_grad:
            yt._accum(_unbroadcast(-g * xt.data / (yt.data * yt.data), yt.data.shape))

    return _node(xt.data / yt.data, (xt, yt), bwd, "div")


def clamp_away_from_zero(x, eps: float) -> Tensor:
    """Replace entries with |v| < eps by sign(v)*eps (sign(0) -> +1).

    Gradient passes only where the input was left untouched.
    """
    xt = as_tensor(x)
    small = np.abs(xt.data) < eps
    signed = np.where(xt.data < 0.0, -eps, eps)
    out = np.where(small, signed, xt.data)

    def bwd(g):
        xt._accum(g * (~small))

    return _node(out, (xt,), bwd, "clamp_away_from_zero")


def clamp(x, lo: float, hi: float) -> Tensor:
    xt = as_tensor(x)
    inside = (xt.data > lo) & (xt.data < hi)

    def bwd(g):
        xt._accum(g * inside)

    return _node(np.clip(xt.data, lo, hi), (xt,), bwd, "clamp")


def log(x) -> Tensor:
    xt = as_tensor(x)

    def bwd(g):
        xt._accum(g / xt.data)

    with np.errstate(divide="ignore", invalid="ignore"):  # finiteness check raises instead
        return _node(np.log(xt.data), (xt,), bwd, "log")


# ---------------------------------------------------------------------------
# activations

def relu(x) -> Tensor:
    xt = as_tensor(x)

    def bwd(g):
        xt._accum(g * (xt.data > 0))

    return _node(np.maximum(xt.data, 0), (xt,), bwd, "relu")


def sigmoid(x) -> Tensor:
    xt = as_tensor(x)
    # tanh form is stable for large |x| and gives sigmoid(0) = 0.5 exactly
    out = 0.5 * (1.0 + np.tanh(0.5 * xt.data))

    def bwd(g):
        xt._accum(g * out * (1.0 - out))

    return _node(out, (xt,), bwd, "sigmoid")


def act(x, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis."""
    xt = as_tensor(x)
    shifted = xt.data - xt.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        xt._accum(out * (g - inner))

    return _node(out, (xt,), bwd, "softmax_rows")


# ---------------------------------------------------------------------------
# linear algebra

def _swap_last2(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(x, y) -> Tensor:
    """Matrix product; supports stacked operands and a shared 2-D weight."""
    xt, yt = as_tensor(x), as_tensor(y)
    xd, yd = xt.data, yt.data
    if xd.ndim < 2 or yd.ndim < 2:
        raise ShapeMismatch(f"matmul needs >= 2-D operands, got {xd.shape} @ {yd.shape}")
    if xd.shape[-1] != yd.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {xd.shape} @ {yd.shape}")

    def bwd(g):
        if xt.requires_grad:
            xt._accum(_unbroadcast(np.matmul(g, _swap_last2(yd)), xd.shape))
        if yt.requires_grad:
            yt._accum(_unbroadcast(np.matmul(_swap_last2(xd), g), yd.shape))

    return _node(np.matmul(xd, yd), (xt, yt), bwd, "matmul")


def affine(x, w, bias=None) -> Tensor:
    out = matmul(x, w)
    if bias is not None:
        out = add(out, bias)
    return out


def transpose(x) -> Tensor:
    """Swap the last two axes (plain transpose for 2-D input)."""
    xt = as_tensor(x)

    def bwd(g):
        xt._accum(_swap_last2(g))

    return _node(_swap_last2(xt.data).copy(), (xt,), bwd, "transpose")


def reshape(x, shape) -> Tensor:
    xt = as_tensor(x)

    def bwd(g):
        xt._accum(g.reshape(xt.data.shape))

    return _node(xt.data.reshape(shape), (xt,), bwd, "reshape")


def flatten(x) -> Tensor:
    """Flatten everything but the leading batch axis (identity on 1-D)."""
    xt = as_tensor(x)
    if xt.data.ndim <= 1:
        return reshape(xt, (-1,))
    return reshape(xt, (xt.data.shape[0], -1))


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        moved = np.moveaxis(g, axis, 0)
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accum(np.moveaxis(moved[lo:hi], 0, axis))

    return _node(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bwd, "concat")


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    xt = as_tensor(x)

    def bwd(g):
        if axis is None:
            xt._accum(np.broadcast_to(g, xt.data.shape))
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        xt._accum(np.broadcast_to(gg, xt.data.shape))

    return _node(xt.data.sum(axis=axis, keepdims=keepdims), (xt,), bwd, "sum")


def mean(x) -> Tensor:
    xt = as_tensor(x)
    n = xt.data.size

    def bwd(g):
        xt._accum(np.broadcast_to(g / n, xt.data.shape))

    return _node(np.asarray(xt.data.mean()), (xt,), bwd, "mean")


# ---------------------------------------------------------------------------
# strided 2-D convolution (cross-correlation, no padding)

def _conv_check(xshape, kshape, stride):
    cin, h, w = xshape[-3:]
    cout, kc, kh, kw = kshape
    sh, sw = stride
    if kc != cin:
        raise ShapeMismatch(f"kernel channels {kc} != input channels {cin}")
    if h < kh or w < kw or (h - kh) % sh != 0 or (w - kw) % sw != 0:
        raise ShapeMismatch(
            f"conv geometry not exact: input {h}x{w}, kernel {kh}x{kw}, stride {stride}")
    return cout, (h - kh) // sh + 1, (w - kw) // sw + 1


def conv2d_strided(x, kernels, stride) -> Tensor:
    """Strided cross-correlation.

    Input is (C_in, H, W) or (N, C_in, H, W); kernels are
    (C_out, C_in, kh, kw). Accumulation over kernel taps is serial in
    (channel, kh, kw) order, so the result matches a scalar reference loop
    bit for bit; vectorization happens only across independent output cells.
    """
    xt, kt = as_tensor(x), as_tensor(kernels)
    if kt.data.ndim != 4 or xt.data.ndim not in (3, 4):
        raise ShapeMismatch(
            f"conv expects 3/4-D input and 4-D kernels, got {xt.data.shape}, {kt.data.shape}")
    squeeze = xt.data.ndim == 3
    x4 = xt.data[None] if squeeze else xt.data
    kd = kt.data
    sh, sw = stride
    cout, hp, wp = _conv_check(x4.shape, kd.shape, stride)
    n, cin, _, _ = x4.shape
    kh, kw = kd.shape[2:]

    # accumulate with channels innermost (contiguous SIMD axis) and in
    # cache-sized batch blocks; per output cell this is still one scalar
    # multiply-add per tap, serially in (channel, kh, kw) order
    dtype = np.result_type(x4.dtype, kd.dtype)
    acc = np.zeros((n, hp, wp, cout), dtype=dtype)
    taps = kd.astype(dtype, copy=False)
    block = max(1, (1 << 18) // max(hp * wp * cout * acc.itemsize, 1))
    tmp = np.empty((min(block, n), hp, wp, cout), dtype=dtype)
    for n0 in range(0, n, block):
        n1 = min(n0 + block, n)
        acc_blk = acc[n0:n1]
        tmp_blk = tmp[:n1 - n0]
        for c in range(cin):
            for i in range(kh):
                for j in range(kw):
                    win = np.ascontiguousarray(
                        x4[n0:n1, c, i:i + sh * hp:sh, j:j + sw * wp:sw], dtype=dtype)
                    np.multiply(win[..., None], taps[:, c, i, j], out=tmp_blk)
                    np.add(acc_blk, tmp_blk, out=acc_blk)
    out = np.ascontiguousarray(np.moveaxis(acc, 3, 1))

    def bwd(g):
        g4 = g[None] if squeeze else g
        if kt.requires_grad:
            gk = np.zeros_like(kd)
            for c in range(cin):
                for i in range(kh):
                    for j in range(kw):
                        win = x4[:, c, i:i + sh * hp:sh, j:j + sw * wp:sw]
                        gk[:, c, i, j] = np.tensordot(g4, win, axes=([0, 2, 3], [0, 1, 2]))
            kt._accum(gk)
        if xt.requires_grad:
            gx = np.zeros_like(x4)
            for c in range(cin):
                for i in range(kh):
                    for j in range(kw):
                        gx[:, c, i:i + sh * hp:sh, j:j + sw * wp:sw] += np.tensordot(
                            g4, kd[:, c, i, j], axes=([1], [0]))
            xt._accum(gx[0] if squeeze else gx)

    return _node(out[0] if squeeze else out, (xt, kt), bwd, "conv2d_strided")


# ---------------------------------------------------------------------------
# reverse pass

def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable tensor.

    The traversal order is a fixed function of graph construction order, so
    gradient accumulation is deterministic.
    """
    if root.data.size != 1:
        raise NonScalarRoot(f"backward root must be scalar, got shape {root.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass
class GradCheckFailure:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    tol: float
    n_checked: int = 0
    max_rel_err: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "PASS" if self.passed else f"FAIL ({len(self.failures)} entries)"
        return (f"gradcheck {status}: {self.n_checked} entries, "
                f"max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e})")


def grad_check(f, params: dict, h: float = 1e-5, tol: float = 1e-4,
               exclude: dict | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    ``params`` maps names to requires-grad Tensors that ``f`` closes over.
    ``exclude`` optionally maps a name to a boolean mask of entries to skip
    (documented nondifferentiable points such as relu kinks at exactly 0).
    Relative error is |analytic - numeric| / max(1, |analytic|, |numeric|).
    Parameter data is perturbed in place and restored exactly.
    """
    for p in params.values():
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise NonScalarRoot("grad_check target must be scalar-valued")
    backward(out)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        mask = None if exclude is None else exclude.get(name)
        flat = p.data.reshape(-1)
        ana_flat = analytic[name].reshape(-1)
        mask_flat = None if mask is None else np.asarray(mask, bool).reshape(-1)
        for idx in range(flat.size):
            if mask_flat is not None and mask_flat[idx]:
                continue
            orig = flat[idx]
            flat[idx] = orig + h
            with no_grad():
                f_plus = f().item()
            flat[idx] = orig - h
            with no_grad():
                f_minus = f().item()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            ana = float(ana_flat[idx])
            rel = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            report.n_checked += 1
            report.max_rel_err = max(report.max_rel_err, rel)
            if rel > tol:
                index = np.unravel_index(idx, p.data.shape)
                report.failures.append(GradCheckFailure(name, index, ana, numeric, rel))
    return report


def finite_diff_gradient(f, param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Plain central-difference gradient of scalar ``f()`` w.r.t. one tensor."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        with no_grad():
            fp = f().item()
        flat[idx] = orig - h
        with no_grad():
            fm = f().item()
        flat[idx] = orig
        gflat[idx] = (fp - fm) / (2.0 * h)
    return grad


def relu_kink_mask(preactivation: np.ndarray, h: float) -> np.ndarray:
    """Entries whose finite-difference step would straddle a relu kink."""
    return np.abs(preactivation) <= h
