"""Dense float64 tensors with a reverse-mode gradient tape.

Storage is a row-major numpy array per tensor; every op records a node on
the active tape (if any) holding parent references and a vector-Jacobian
closure.  Tapes are created per forward pass and discarded after backward.
Broadcasting is deliberately restricted to a handful of named ops
(scalar ops, row-vector add/mul, per-row shift/scale) so every gradient
rule stays auditable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Append-only record of ops for one forward pass.

    Use as a context manager; ops executed inside record nodes whose parents
    always precede them (execution order is a topological order).
    """

    def __init__(self):
        self.nodes = []          # list of _Node
        self.leaves = []         # requires_grad tensors seen as op inputs
        self._leaf_ids = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def _note_leaf(self, t):
        if id(t) not in self._leaf_ids:
            self._leaf_ids.add(id(t))
            self.leaves.append(t)


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out, parents, vjp):
        self.out = out
        self.parents = parents
        self.vjp = vjp


_TAPE_STACK: list[Tape] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    """A dense float64 array that can participate in a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_tracked")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.tape_id = None
        self._tracked = requires_grad

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape))


def ones(*shape) -> Tensor:
    return Tensor(np.ones(shape))


def _record(out: Tensor, parents, vjp):
    """Put a node on the active tape if any parent is tracked."""
    tape = active_tape()
    if tape is None:
        return out
    tracked = False
    for p in parents:
        if p._tracked:
            tracked = True
        if p.requires_grad:
            tape._note_leaf(p)
    if tracked:
        out._tracked = True
        out.tape_id = len(tape.nodes)
        tape.nodes.append(_Node(out, parents, vjp))
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into .grad for every leaf on the tape.

    Leaves that took part in the forward pass but do not influence the loss
    get a zero gradient.  Returns a mapping tensor -> gradient array.
    """
    tape = active_tape()
    if tape is None:
        raise ValueError("backward() requires an active Tape")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if loss.tape_id is None:
        raise ValueError("loss is not on the active tape")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        contribs = node.vjp(g)
        for p, c in zip(node.parents, contribs):
            if c is None or not p._tracked:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + c
            else:
                grads[key] = c

    out = {}
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        else:
            g = g.reshape(leaf.data.shape)
        if leaf.grad is None:
            leaf.grad = g.copy()
        else:
            leaf.grad = leaf.grad + g
        out[leaf] = g
    return out


def zero_grad(params):
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise / shape ops


def _same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a, b):
    """a + b for equal shapes, or tensor + scalar."""
    a = as_tensor(a)
    if np.isscalar(b):
        out = Tensor(a.data + b)
        return _record(out, (a,), lambda g: (g,))
    b = as_tensor(b)
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a, b):
    a = as_tensor(a)
    if np.isscalar(b):
        out = Tensor(a.data - b)
        return _record(out, (a,), lambda g: (g,))
    b = as_tensor(b)
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def neg(a):
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def mul(a, b):
    """Elementwise product for equal shapes, or tensor * scalar."""
    a = as_tensor(a)
    if np.isscalar(b):
        out = Tensor(a.data * b)
        return _record(out, (a,), lambda g: (g * b,))
    b = as_tensor(b)
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g: (g * bd, g * ad))


def div(a, b):
    a = as_tensor(a)
    if np.isscalar(b):
        return mul(a, 1.0 / b)
    b = as_tensor(b)
    _same_shape(a, b, "div")
    out = Tensor(a.data / b.data)
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def add_rowvec(a, v):
    """Add vector v (shape [n]) to every row of a (shape [m, n])."""
    a, v = as_tensor(a), as_tensor(v)
    if a.ndim != 2 or v.ndim != 1 or a.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec: shapes {a.shape} and {v.shape}")
    out = Tensor(a.data + v.data[None, :])
    return _record(out, (a, v), lambda g: (g, g.sum(axis=0)))


def mul_rowvec(a, v):
    """Multiply every row of a (shape [m, n]) elementwise by v (shape [n])."""
    a, v = as_tensor(a), as_tensor(v)
    if a.ndim != 2 or v.ndim != 1 or a.shape[1] != v.shape[0]:
        raise ShapeError(f"mul_rowvec: shapes {a.shape} and {v.shape}")
    out = Tensor(a.data * v.data[None, :])
    ad, vd = a.data, v.data
    return _record(out, (a, v), lambda g: (g * vd[None, :], (g * ad).sum(axis=0)))


def shift_rows(a, s):
    """Add scalar s[i] (shape [m]) to row i of a (shape [m, n])."""
    a, s = as_tensor(a), as_tensor(s)
    if a.ndim != 2 or s.ndim != 1 or a.shape[0] != s.shape[0]:
        raise ShapeError(f"shift_rows: shapes {a.shape} and {s.shape}")
    out = Tensor(a.data + s.data[:, None])
    return _record(out, (a, s), lambda g: (g, g.sum(axis=1)))


def scale_rows(a, s):
    """Multiply row i of a (shape [m, n]) by scalar s[i] (shape [m])."""
    a, s = as_tensor(a), as_tensor(s)
    if a.ndim != 2 or s.ndim != 1 or a.shape[0] != s.shape[0]:
        raise ShapeError(f"scale_rows: shapes {a.shape} and {s.shape}")
    out = Tensor(a.data * s.data[:, None])
    ad, sd = a.data, s.data
    return _record(out, (a, s), lambda g: (g * sd[:, None], (g * ad).sum(axis=1)))


def matmul(a, b):
    """Matrix product: 2-D x 2-D, or batched 3-D x 3-D with equal batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: batched shapes {a.shape} and {b.shape} incompatible")
    else:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data
    return _record(
        out,
        (a, b),
        lambda g: (g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g),
    )


def permute(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def transpose(a):
    return permute(a, (1, 0))


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))
    src = a.data.shape
    return _record(out, (a,), lambda g: (g.reshape(src),))


def concat(parts, axis: int = 0):
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty input")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _record(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=axis)))


def expand0(a, k: int):
    """Tile a new leading axis of size k; gradient sums over it."""
    a = as_tensor(a)
    out = Tensor(np.broadcast_to(a.data[None, ...], (k,) + a.data.shape).copy())
    return _record(out, (a,), lambda g: (g.sum(axis=0),))


def gather_rows(a, idx):
    """Select rows of a 2-D tensor; gradient scatter-adds back."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows: need 2-D, got {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {a.shape[0]} rows")
    out = Tensor(a.data[idx])
    nrows, idx_ = a.shape[0], idx

    def vjp(g):
        ga = np.zeros((nrows, g.shape[1]))
        np.add.at(ga, idx_, g)
        return (ga,)

    return _record(out, (a,), vjp)


def take(a, flat_index: int):
    """Pick one element (by flat index) as a scalar tensor."""
    a = as_tensor(a)
    flat_index = int(flat_index)
    if not 0 <= flat_index < a.size:
        raise IndexError(f"take: index {flat_index} out of range for size {a.size}")
    out = Tensor(a.data.reshape(-1)[flat_index])
    shape = a.data.shape

    def vjp(g):
        ga = np.zeros(shape)
        ga.reshape(-1)[flat_index] = g
        return (ga,)

    return _record(out, (a,), vjp)


def detach(a):
    return Tensor(as_tensor(a).data.copy())


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def sum_all(a):
    a = as_tensor(a)
    out = Tensor(a.data.sum())
    shape = a.data.shape
    return _record(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_axis(a, axis: int, keepdims: bool = False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.data.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), vjp)


def mean_all(a):
    a = as_tensor(a)
    return mul(sum_all(a), 1.0 / a.size)


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    od = out.data
    return _record(out, (a,), lambda g: (g * od,))


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    ad = a.data
    return _record(out, (a,), lambda g: (g / ad,))


def sqrt(a):
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))
    od = out.data
    return _record(out, (a,), lambda g: (g * 0.5 / od,))


def power(a, p: float):
    """Elementwise a**p for a constant exponent."""
    a = as_tensor(a)
    out = Tensor(a.data ** p)
    ad = a.data
    return _record(out, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def absolute(a):
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    sgn = np.sign(a.data)
    return _record(out, (a,), lambda g: (g * sgn,))


def maximum(a, b):
    """Elementwise max; on exact ties the gradient goes to a."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "maximum")
    out = Tensor(np.maximum(a.data, b.data))
    amask = a.data >= b.data
    return _record(out, (a, b), lambda g: (g * amask, g * ~amask))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "minimum")
    out = Tensor(np.minimum(a.data, b.data))
    amask = a.data <= b.data
    return _record(out, (a, b), lambda g: (g * amask, g * ~amask))


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient passes only inside the open interval."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi
    return _record(out, (a,), lambda g: (g * inside,))


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0
    return _record(out, (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
                 np.exp(a.data) / (1.0 + np.exp(a.data)))
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (1.0 - y * y),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """tanh-form gelu; smooth activation for the FFN blocks."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
    return _record(out, (a,), lambda g: (g * d,))


def softmax(a, axis: int = -1):
    """Numerically safe softmax along one axis (max-subtracted)."""
    a = as_tensor(a)
    if a.size == 0 or a.data.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} in shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, (a,), vjp)


def log_softmax(a, axis: int = -1):
    a = as_tensor(a)
    if a.size == 0 or a.data.shape[axis] == 0:
        raise ShapeError(f"log_softmax: empty axis {axis} in shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse)
    soft = np.exp(shifted - lse)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, b, stride: int = 1, padding: int = 0):
    """2-D convolution on a single image: x [C,H,W], w [K,C,kh,kw], b [K]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 3 or w.ndim != 4 or b.ndim != 1:
        raise ShapeError(f"conv2d: ranks {x.shape}, {w.shape}, {b.shape}")
    C, H, W = x.shape
    K, Cw, kh, kw = w.shape
    if Cw != C or b.shape[0] != K:
        raise ShapeError(f"conv2d: channel mismatch x={x.shape} w={w.shape} b={b.shape}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: output would be empty for input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(C, kh, kw, Ho, Wo),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
        writeable=False,
    )
    cols = view.reshape(C * kh * kw, Ho * Wo)
    w2 = w.data.reshape(K, C * kh * kw)
    out = Tensor((w2 @ cols + b.data[:, None]).reshape(K, Ho, Wo))

    def vjp(g):
        g2 = g.reshape(K, Ho * Wo)
        gw = (g2 @ cols.T).reshape(K, C, kh, kw)
        gb = g2.sum(axis=1)
        gcols = (w2.T @ g2).reshape(C, kh, kw, Ho, Wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + Ho * stride:stride, j:j + Wo * stride:stride] += gcols[:, i, j]
        if padding:
            gx = gxp[:, padding:-padding, padding:-padding]
        else:
            gx = gxp
        return (gx, gw, gb)

    return _record(out, (x, w, b), vjp)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class FdReport:
    """Outcome of a finite-difference pass over named parameters."""

    per_param: dict = field(default_factory=dict)   # name -> max relative error
    failures: list = field(default_factory=list)    # (name, flat_index, analytic, numeric, rel)
    checked: int = 0

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self):
        return {
            "passed": self.passed,
            "checked": self.checked,
            "max_rel_error": self.max_rel_error,
            "per_param": dict(self.per_param),
            "failures": [
                {"param": n, "index": int(i), "analytic": a, "numeric": f, "rel_error": r}
                for n, i, a, f, r in self.failures
            ],
        }


def finite_diff_check(f, params: dict, eps: float = 1e-5, tol: float = 1e-4,
                      max_entries_per_param=None, seed: int = 0,
                      rel_floor: float = 1e-2) -> FdReport:
    """Compare tape gradients of f() against central differences.

    f is a zero-argument callable returning a scalar Tensor; it must re-read
    the tensors in `params` on every call and be deterministic.  When a
    parameter has more entries than max_entries_per_param, a seeded subset is
    probed.  Relative error uses |fd - ad| / max(|fd|, |ad|, rel_floor), so
    tiny gradients are compared absolutely.
    """
    zero_grad(params)
    with Tape():
        loss = f()
        if not np.isfinite(loss.data).all():
            raise ArithmeticError("finite_diff_check: f returned a non-finite value")
        backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    rng = np.random.default_rng(seed)
    report = FdReport()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            entries = np.sort(rng.choice(n, size=max_entries_per_param, replace=False))
        else:
            entries = np.arange(n)
        worst = 0.0
        for e in entries:
            e = int(e)
            saved = flat[e]
            flat[e] = saved + eps
            fp = f().item()
            flat[e] = saved - eps
            fm = f().item()
            flat[e] = saved
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ArithmeticError(f"finite_diff_check: non-finite f while probing {name}[{e}]")
            fd = (fp - fm) / (2.0 * eps)
            ad = float(analytic[name].reshape(-1)[e])
            rel = abs(fd - ad) / max(abs(fd), abs(ad), rel_floor)
            worst = max(worst, rel)
            report.checked += 1
            if rel > tol:
                report.failures.append((name, e, ad, fd, rel))
        report.per_param[name] = worst
    return report
