"""Reverse-mode automatic differentiation on dense float64 numpy arrays.

A forward computation builds a DAG of `Tensor` nodes; `backward` walks the
DAG once in reverse topological order and accumulates vector-Jacobian
products into the `.grad` field of leaf tensors created with
``requires_grad=True``.  Tensors are treated as immutable during the forward
pass; optimizers swap ``.data`` on leaves between steps, which implicitly
invalidates any previously recorded graph.

The op set is intentionally small: elementwise arithmetic with numpy
broadcasting, matmul, reductions (sum / mean / max / prod), the nonlinear
primitives needed by box losses (softplus, relu, abs, log, exp, sqrt),
structural ops (concat, basic slicing, reshape), and batched graph ops
(gather_rows, scatter_rows, segment_max).  New differentiable ops can be
defined externally through `node`.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "constant",
    "node",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "sum_",
    "mean",
    "max_reduce",
    "prod",
    "softplus",
    "relu",
    "abs_",
    "log",
    "exp",
    "sqrt",
    "maximum",
    "minimum",
    "concat",
    "reshape",
    "transpose",
    "gather_rows",
    "scatter_rows",
    "segment_max",
    "Adam",
    "finite_diff_check",
    "kink_watch",
    "KinkWatch",
]


class Tensor:
    """Node in the autodiff DAG wrapping a float64 numpy array.

    Leaves are created directly; interior nodes are produced by ops and carry
    a closure computing the vector-Jacobian product for their parents.
    """

    __slots__ = ("data", "requires_grad", "retain_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.retain_grad = False
        self.grad = None
        self._parents: tuple = ()
        self._vjp = None

    # -- convenience ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; all dispatch to module-level ops

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)


def as_tensor(x) -> Tensor:
    """Wrap arrays and scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def node(data, parents, vjp) -> Tensor:
    """Create an interior DAG node.

    `vjp(grad_out)` must return one gradient array per parent (or None for
    parents that need no gradient).  This is the extension point for defining
    ops outside this module.
    """
    out = Tensor(data)
    tracked = tuple(p for p in parents if isinstance(p, Tensor))
    if any(p.requires_grad or p._parents or p.retain_grad for p in tracked):
        out.requires_grad = False  # interior; grads flow but are not stored
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _needs_graph(*tensors) -> bool:
    return any(t._parents or t.requires_grad or t.retain_grad for t in tensors)


# -- kink monitoring ---------------------------------------------------------


class KinkWatch:
    """Records, during a forward pass, the smallest distance of any
    piecewise-defined op's input to its kink (relu/abs at 0, max/min ties,
    sqrt at 0).  Used to reject finite-difference sample points that sit too
    close to a non-differentiable point."""

    def __init__(self):
        self.min_gap = math.inf

    def record(self, gaps) -> None:
        a = np.asarray(gaps, dtype=np.float64)
        if a.size:
            m = float(np.min(a))
            if m < self.min_gap:
                self.min_gap = m

    def __enter__(self):
        _WATCHES.append(self)
        return self

    def __exit__(self, *exc):
        _WATCHES.remove(self)
        return False


_WATCHES: list[KinkWatch] = []


def kink_watch() -> KinkWatch:
    return KinkWatch()


def _record_gap(gaps) -> None:
    if _WATCHES:
        for w in _WATCHES:
            w.record(gaps)


# -- broadcasting helpers ----------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.add(a.data, b.data)
    return node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.subtract(a.data, b.data)
    return node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.multiply(a.data, b.data)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return node(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.divide(a.data, b.data)

    def vjp(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return node(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return node(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return (g @ b.data.T, a.data.T @ g)

    return node(out, (a, b), vjp)


# -- reductions ---------------------------------------------------------------


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return node(out, (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        gg = np.expand_dims(g, axis) / n
        return (np.broadcast_to(gg, a.shape).copy(),)

    return node(out, (a,), vjp)


def max_reduce(a, axis=None) -> Tensor:
    """Max along an axis; gradient routes to the first maximal element
    (ties break toward the lowest index)."""
    a = as_tensor(a)
    if axis is None:
        flat = a.data.ravel()
        idx = int(np.argmax(flat))
        out = flat[idx]
        if flat.size > 1:
            rest = np.delete(flat, idx)
            _record_gap(out - rest.max())

        def vjp(g):
            ga = np.zeros_like(a.data)
            ga.ravel()[idx] = g
            return (ga,)

        return node(out, (a,), vjp)

    idx = np.argmax(a.data, axis=axis)
    out = np.max(a.data, axis=axis)
    if a.data.shape[axis] > 1:
        top2 = np.partition(a.data, -2, axis=axis)
        second = np.take(top2, -2, axis=axis)
        _record_gap(out - second)

    def vjp(g):
        ga = np.zeros_like(a.data)
        gg = np.expand_dims(g, axis)
        np.put_along_axis(ga, np.expand_dims(idx, axis), gg, axis=axis)
        return (ga,)

    return node(out, (a,), vjp)


def prod(a) -> Tensor:
    """Product along the last axis, with zero-aware gradients: a slice with
    one zero routes all gradient to that entry, two or more zeros kill it."""
    a = as_tensor(a)
    x = a.data
    out = np.prod(x, axis=-1)

    def vjp(g):
        zeros = x == 0.0
        nzero = zeros.sum(axis=-1, keepdims=True)
        swapped = np.where(zeros, 1.0, x)
        prod_nonzero = np.prod(swapped, axis=-1, keepdims=True)
        # no zeros: p / x_i ; one zero: product of the others at that slot
        with np.errstate(divide="ignore", invalid="ignore"):
            base = np.where(nzero == 0, out[..., None] / swapped, 0.0)
        single = np.where(zeros & (nzero == 1), prod_nonzero, 0.0)
        return ((base + single) * g[..., None],)

    return node(out, (a,), vjp)


# -- elementwise nonlinearities ------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    """Numerically stable log(1 + exp(x)) = max(x, 0) + log1p(exp(-|x|))."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        return (g * _sigmoid(x),)

    return node(out, (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    _record_gap(np.abs(a.data))
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return node(out, (a,), vjp)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    _record_gap(np.abs(a.data))
    out = np.abs(a.data)

    def vjp(g):
        return (g * np.sign(a.data),)

    return node(out, (a,), vjp)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log of non-positive value")
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return node(out, (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return node(out, (a,), vjp)


def sqrt(a) -> Tensor:
    """Square root with the subgradient convention sqrt'(0) := 0, so that
    norms of clamped-to-zero vectors have a well-defined zero gradient."""
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise ValueError("sqrt of negative value")
    _record_gap(a.data)
    out = np.sqrt(a.data)

    def vjp(g):
        with np.errstate(divide="ignore"):
            d = np.where(a.data > 0.0, 0.5 / out, 0.0)
        return (g * d,)

    return node(out, (a,), vjp)


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    _record_gap(np.abs(np.subtract(a.data, b.data)))
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def vjp(g):
        return (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape))

    return node(out, (a, b), vjp)


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient routes to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    _record_gap(np.abs(np.subtract(a.data, b.data)))
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def vjp(g):
        return (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape))

    return node(out, (a, b), vjp)


# -- structural ops ------------------------------------------------------------


def concat(tensors, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return node(out, tuple(ts), vjp)


def _getitem(a: Tensor, key) -> Tensor:
    """Basic (slice / integer) indexing.  Fancy integer-array indexing must go
    through gather_rows, whose backward handles duplicate indices."""
    out = a.data[key]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)

    return node(out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return node(out, (a,), vjp)


def transpose(a) -> Tensor:
    """Matrix transpose of a 2-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")

    def vjp(g):
        return (g.T,)

    return node(a.data.T, (a,), vjp)


def gather_rows(a, idx) -> Tensor:
    """Select rows `idx` (1-D int array, duplicates allowed) from a 2-D tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return node(out, (a,), vjp)


def scatter_rows(values, idx, num_rows: int) -> Tensor:
    """Sum rows of `values` into a zero matrix at positions `idx`."""
    values = as_tensor(values)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((num_rows, values.shape[1]), dtype=np.float64)
    np.add.at(out, idx, values.data)

    def vjp(g):
        return (g[idx],)

    return node(out, (values,), vjp)


def segment_max(values, seg_ids, num_segments: int) -> Tensor:
    """Per-segment columnwise max over rows of a 2-D tensor.

    Every segment in [0, num_segments) must receive at least one row.  The
    gradient routes to the first (lowest row index) maximal entry per
    segment and column.
    """
    values = as_tensor(values)
    seg = np.asarray(seg_ids, dtype=np.int64)
    x = values.data
    n, d = x.shape
    out = np.full((num_segments, d), -np.inf)
    np.maximum.at(out, seg, x)
    if np.any(np.isinf(out)):
        raise ValueError("segment_max: some segment received no rows")

    # winner per (segment, column): lowest row index attaining the max
    hit = x == out[seg]
    row_ids = np.where(hit, np.arange(n)[:, None], n)
    winner = np.full((num_segments, d), n, dtype=np.int64)
    np.minimum.at(winner, seg, row_ids)

    if _WATCHES:
        runner = np.full((num_segments, d), -np.inf)
        masked = np.where(row_ids == winner[seg], -np.inf, x)
        np.maximum.at(runner, seg, masked)
        gaps = out - runner
        _record_gap(gaps[np.isfinite(gaps)])

    def vjp(g):
        gv = np.zeros_like(x)
        cols = np.broadcast_to(np.arange(d), (num_segments, d))
        gv[winner.ravel(), cols.ravel()] += g.ravel()
        return (gv,)

    return node(out, (values,), vjp)


# -- backward pass -------------------------------------------------------------


def backward(root: Tensor, seed=None, leaves=None) -> None:
    """Accumulate gradients of `root` into `.grad` of reachable leaves.

    `root` must be scalar unless an explicit `seed` gradient of matching
    shape is given.  Leaves listed in `leaves` but not reachable from `root`
    get a zero gradient.
    """
    if seed is None:
        if root.data.ndim != 0:
            raise ValueError("backward on non-scalar root requires a seed gradient")
        seed = np.ones((), dtype=np.float64)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != root.data.shape:
            raise ValueError("seed gradient shape does not match root shape")

    # iterative post-order topological sort
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if isinstance(p, Tensor) and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): seed}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad or t.retain_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t._vjp is None:
            continue
        parent_grads = t._vjp(g)
        for p, pg in zip(t._parents, parent_grads):
            if pg is None or not isinstance(p, Tensor):
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg

    if leaves is not None:
        for p in leaves:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# -- optimizer -----------------------------------------------------------------


class Adam:
    """Adam with bias correction.  State is per-parameter first and second
    moment arrays plus a shared step counter; `lr` may be reassigned between
    steps (used for per-epoch decay schedules)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- gradient verification -------------------------------------------------------


def finite_diff_check(f, point, step: float = 1e-5, ignore=None) -> float:
    """Compare analytic gradients of a scalar function against central
    differences.

    `point` is one array-like or a list of them; `f` receives tensors in the
    same structure and must return a scalar Tensor.  Returns the maximum of
    |analytic - numeric| / max(1e-8, |numeric|) over all coordinates.
    `ignore` optionally gives boolean masks (same structure as `point`)
    marking coordinates to skip.
    """
    single = not isinstance(point, (list, tuple))
    pts = [np.array(point, dtype=np.float64)] if single else [
        np.array(p, dtype=np.float64) for p in point
    ]
    masks = None
    if ignore is not None:
        masks = [np.asarray(ignore, bool)] if single else [np.asarray(m, bool) for m in ignore]

    def call(arrays):
        ts = [Tensor(a) for a in arrays]
        return f(ts[0] if single else ts).item()

    params = [Tensor(p.copy(), requires_grad=True) for p in pts]
    out = f(params[0] if single else params)
    backward(out, leaves=params)
    analytic = [p.grad for p in params]

    worst = 0.0
    for k, base in enumerate(pts):
        flat = base.ravel()
        for i in range(flat.size):
            if masks is not None and masks[k].ravel()[i]:
                continue
            orig = flat[i]
            flat[i] = orig + step
            f_plus = call(pts)
            flat[i] = orig - step
            f_minus = call(pts)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[k].ravel()[i]
            err = abs(a - numeric) / max(1e-8, abs(numeric))
            if err > worst:
                worst = err
    return worst
