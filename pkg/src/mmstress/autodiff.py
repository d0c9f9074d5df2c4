"""Tape-style reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable quantity in the pipeline is a :class:`Tensor`.  Operations
record their parents and a closure mapping the output gradient to parent
gradients; :func:`backward` walks the recorded graph in reverse topological
order and accumulates gradients additively across fan-out.

Broadcasting is deliberately narrow: scalar-times-tensor, and row-bias
addition (``[n, k] + [k]``).  Every other shape mismatch raises
:class:`ShapeError`.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "GradCheckReport",
    "ShapeError",
    "Tensor",
    "add",
    "apply_unary",
    "backward",
    "clip_min",
    "concat",
    "constant",
    "diagonal",
    "exp",
    "grad_check",
    "l2_normalize_rows",
    "log",
    "logsumexp_rows",
    "lstm",
    "matmul",
    "mul",
    "parameter",
    "reduce",
    "relative_error",
    "reshape",
    "row_scale",
    "sigmoid",
    "softmax_row",
    "sub",
    "take",
    "tanh",
    "transpose",
]

_ids = itertools.count(1)


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    """A float64 array that may participate in a differentiation graph.

    ``node_id`` is ``None`` for constants; parameters and every value derived
    from a parameter carry an id, which keys the gradient map returned by
    :func:`backward`.
    """

    __slots__ = ("value", "grad", "node_id", "parents", "backward_fn", "name")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = next(_ids) if requires_grad else None
        self.parents: tuple = ()
        self.backward_fn: Optional[Callable] = None
        self.name = name

    @property
    def requires_grad(self) -> bool:
        return self.node_id is not None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return apply_unary(self, "negate")

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Tensor:
    return Tensor(value)


def parameter(value, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.node_id = next(_ids)
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------


def _binary_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.value.ndim == 0:
        return "scalar_b"
    if a.value.ndim == 0:
        return "scalar_a"
    if op == "add" and a.value.ndim == 2 and b.value.ndim == 1 and a.shape[1] == b.shape[0]:
        return "row_bias"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    kind = _binary_kind(a, b, "add")
    if kind == "scalar_a":
        return add(b, a)

    def bw(g):
        if kind == "same":
            return g, g
        if kind == "scalar_b":
            return g, np.sum(g)
        return g, g.sum(axis=0)

    return _node(a.value + b.value, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    kind = _binary_kind(a, b, "sub")

    def bw(g):
        if kind == "same":
            return g, -g
        if kind == "scalar_b":
            return g, -np.sum(g)
        return np.sum(g), -g

    return _node(a.value - b.value, (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise product, or scalar times tensor."""
    a, b = _lift(a), _lift(b)
    kind = _binary_kind(a, b, "mul")
    if kind == "scalar_a":
        return mul(b, a)
    av, bv = a.value, b.value

    def bw(g):
        if kind == "same":
            return g * bv, g * av
        return g * bv, np.sum(g * av)

    return _node(av * bv, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``[m, k]`` and ``[k, n]``."""
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        return g @ bv.T, av.T @ g

    return _node(av @ bv, (a, b), bw)


def row_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row ``i`` of ``x [n, k]`` by ``s[i]`` (``s`` has shape ``[n]``)."""
    x, s = _lift(x), _lift(s)
    if x.value.ndim != 2 or s.value.ndim != 1 or s.shape[0] != x.shape[0]:
        raise ShapeError(f"row_scale: cannot scale rows of {x.shape} by {s.shape}")
    xv, sv = x.value, s.value

    def bw(g):
        return g * sv[:, None], np.einsum("ij,ij->i", g, xv)

    return _node(xv * sv[:, None], (x, s), bw)


# ---------------------------------------------------------------------------
# unary ops
# ---------------------------------------------------------------------------

_UNARY = ("tanh", "sigmoid", "exp", "log", "negate", "scale")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def apply_unary(x: Tensor, f: str, c: float = 1.0) -> Tensor:
    """Apply ``f`` elementwise; ``c`` is the constant for ``f="scale"``."""
    x = _lift(x)
    v = x.value
    if f == "tanh":
        out = np.tanh(v)
        return _node(out, (x,), lambda g: (g * (1.0 - out * out),))
    if f == "sigmoid":
        out = _sigmoid(v)
        return _node(out, (x,), lambda g: (g * out * (1.0 - out),))
    if f == "exp":
        out = np.exp(v)
        return _node(out, (x,), lambda g: (g * out,))
    if f == "log":
        bad = np.argwhere(~(v > 0))
        if bad.size:
            idx = tuple(int(i) for i in bad[0])
            raise DomainError(f"log: non-positive value {v[idx]!r} at index {idx}")
        return _node(np.log(v), (x,), lambda g: (g / v,))
    if f == "negate":
        return _node(-v, (x,), lambda g: (-g,))
    if f == "scale":
        c = float(c)
        return _node(v * c, (x,), lambda g: (g * c,))
    raise ValueError(f"unknown unary function {f!r}; expected one of {_UNARY}")


def tanh(x: Tensor) -> Tensor:
    return apply_unary(x, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    return apply_unary(x, "sigmoid")


def exp(x: Tensor) -> Tensor:
    return apply_unary(x, "exp")


def log(x: Tensor) -> Tensor:
    return apply_unary(x, "log")


def clip_min(x: Tensor, lo: float) -> Tensor:
    """``max(x, lo)``; the gradient is passed only where ``x`` was not clipped."""
    x = _lift(x)
    keep = x.value >= lo
    return _node(np.where(keep, x.value, lo), (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and normalisations
# ---------------------------------------------------------------------------


def softmax_row(x: Tensor) -> Tensor:
    """Softmax over the last axis of a 1-D or 2-D tensor."""
    x = _lift(x)
    if x.value.ndim not in (1, 2) or x.shape[-1] < 1:
        raise ShapeError(f"softmax_row: expected [n] or [b, n] with n >= 1, got {x.shape}")
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), bw)


def reduce(x: Tensor, kind: str = "sum", axis: Optional[int] = None) -> Tensor:
    x = _lift(x)
    if axis is not None and not -x.value.ndim <= axis < x.value.ndim:
        raise ShapeError(f"reduce: axis {axis} invalid for shape {x.shape}")
    if kind not in ("sum", "mean"):
        raise ValueError(f"reduce: unknown kind {kind!r}")
    shape = x.shape
    if axis is None:
        count = x.size
        out = x.value.sum() if kind == "sum" else x.value.sum() / max(count, 1)
    else:
        count = shape[axis]
        out = x.value.sum(axis=axis)
        if kind == "mean":
            out = out / count
    scale = 1.0 if kind == "sum" else 1.0 / max(count, 1)

    def bw(g):
        g = np.asarray(g) * scale
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(out, dtype=np.float64), (x,), bw)


def logsumexp_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise ``log(sum(exp(x)))`` over the entries where ``mask`` is True.

    Every row must keep at least one entry.
    """
    x = _lift(x)
    if x.value.ndim != 2:
        raise ShapeError(f"logsumexp_rows: expected a matrix, got {x.shape}")
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    elif mask.shape != x.shape:
        raise ShapeError(f"logsumexp_rows: mask {mask.shape} does not match {x.shape}")
    if not mask.any(axis=1).all():
        raise ValueError("logsumexp_rows: a row has no unmasked entries")
    masked = np.where(mask, x.value, -np.inf)
    top = masked.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(masked - top), 0.0)
    total = e.sum(axis=1, keepdims=True)
    out = (top + np.log(total))[:, 0]
    weights = e / total

    return _node(out, (x,), lambda g: (weights * g[:, None],))


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by ``max(||row||_2, eps)``."""
    x = _lift(x)
    if x.value.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expected a matrix, got {x.shape}")
    v = x.value
    norm = np.sqrt(np.einsum("ij,ij->i", v, v))
    guarded = norm < eps
    denom = np.where(guarded, eps, norm)[:, None]
    out = v / denom

    def bw(g):
        proj = np.einsum("ij,ij->i", g, out)[:, None]
        gx = (g - np.where(guarded[:, None], 0.0, out * proj)) / denom
        return (gx,)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _lift(x)
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from exc
    return _node(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    x = _lift(x)
    if x.value.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {x.shape}")
    return _node(x.value.T, (x,), lambda g: (g.T,))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_lift(x) for x in xs]
    if not xs:
        raise ShapeError("concat: nothing to concatenate")
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, xs, bw)


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select a single index along ``axis`` (that axis is dropped)."""
    x = _lift(x)
    if not -x.value.ndim <= axis < x.value.ndim or not 0 <= index < x.shape[axis]:
        raise ShapeError(f"take: index {index} on axis {axis} invalid for {x.shape}")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _node(np.take(x.value, index, axis=axis), (x,), bw)


def diagonal(x: Tensor) -> Tensor:
    x = _lift(x)
    if x.value.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"diagonal: expected a square matrix, got {x.shape}")
    n = x.shape[0]
    return _node(np.diagonal(x.value).copy(), (x,), lambda g: (np.diag(g).reshape(n, n),))


# ---------------------------------------------------------------------------
# fused recurrent op
# ---------------------------------------------------------------------------


def lstm(x: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """Run an LSTM over ``x [B, T, I]`` and return the final hidden state ``[B, H]``.

    Gate layout along the ``4H`` axis is input, forget, output, candidate.
    ``reverse`` consumes the sequence from the last step to the first.  The
    whole recurrence is a single graph node with a hand-written
    backpropagation-through-time rule.
    """
    x, w_x, w_h, b = (_lift(t) for t in (x, w_x, w_h, b))
    if x.value.ndim != 3:
        raise ShapeError(f"lstm: expected input [B, T, I], got {x.shape}")
    n, steps, width = x.shape
    H = w_h.shape[0]
    if w_x.shape != (width, 4 * H) or w_h.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeError(
            f"lstm: weights {w_x.shape}, {w_h.shape}, {b.shape} inconsistent "
            f"with input width {width}")
    if steps < 1:
        raise ShapeError("lstm: sequence must have at least one step")
    wx, wh = w_x.value, w_h.value
    xv = x.value
    order = list(range(steps - 1, -1, -1)) if reverse else list(range(steps))
    # feature-major per step ([4H, n]) so every gate block is a contiguous slab
    xt = xv[:, order].transpose(1, 0, 2).reshape(steps * n, width)
    xs = (xt @ wx + b.value).reshape(steps, n, 4 * H).transpose(0, 2, 1).copy()
    wh_t = np.ascontiguousarray(wh.T)

    hs = np.zeros((steps + 1, H, n))  # hs[k] is the state entering step k
    cs = np.zeros((steps + 1, H, n))
    tcs = np.empty((steps, H, n))
    with np.errstate(over="ignore"):  # exp(-a) -> inf gives sigmoid 0 exactly
        for k in range(steps):
            a = xs[k]
            a += wh_t @ hs[k]
            s = a[: 3 * H]
            np.negative(s, out=s)
            np.exp(s, out=s)
            s += 1.0
            np.reciprocal(s, out=s)
            np.tanh(a[3 * H:], out=a[3 * H:])
            c = cs[k + 1]
            np.multiply(a[H: 2 * H], cs[k], out=c)
            c += a[:H] * a[3 * H:]
            np.tanh(c, out=tcs[k])
            np.multiply(a[2 * H: 3 * H], tcs[k], out=hs[k + 1])
    gates = xs  # activated gates, overwritten in place

    def bw(dh_last):
        das = np.empty((steps, 4 * H, n))
        dh = np.ascontiguousarray(dh_last.T)
        dc = np.zeros((H, n))
        for k in range(steps - 1, -1, -1):
            gk, tc = gates[k], tcs[k]
            da = das[k]
            dc += dh * gk[2 * H: 3 * H] * (1.0 - tc * tc)
            np.multiply(dc, gk[3 * H:], out=da[:H])
            np.multiply(dc, cs[k], out=da[H: 2 * H])
            np.multiply(dh, tc, out=da[2 * H: 3 * H])
            s = gk[: 3 * H]
            da[: 3 * H] *= s * (1.0 - s)
            g = gk[3 * H:]
            np.multiply(dc * gk[:H], 1.0 - g * g, out=da[3 * H:])
            dh = wh @ da
            dc *= gk[H: 2 * H]
        flat = das.transpose(0, 2, 1).reshape(steps * n, 4 * H)
        h_prev = hs[:steps].transpose(0, 2, 1).reshape(steps * n, H)
        dwh = h_prev.T @ flat
        dwx = xt.T @ flat
        dx_t = (flat @ wx.T).reshape(steps, n, width).transpose(1, 0, 2)
        dx = np.empty_like(xv)
        dx[:, order] = dx_t
        return dx, dwx, dwh, flat.sum(axis=0)

    return _node(np.ascontiguousarray(hs[steps].T), (x, w_x, w_h, b), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topological(loss: Tensor) -> list:
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> dict:
    """Back-propagate from scalar ``loss``; return ``{node_id: gradient}``.

    Leaf tensors reached by the traversal get their ``.grad`` set.  Tensors in
    ``params`` that are not reachable from ``loss`` receive zero gradients.
    """
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict = {}
    if loss.requires_grad:
        grads[loss.node_id] = np.ones_like(loss.value)
        for node in reversed(_topological(loss)):
            g = grads.get(node.node_id)
            if node.backward_fn is None:
                node.grad = g
                continue
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if not p.requires_grad:
                    continue
                prev = grads.get(p.node_id)
                grads[p.node_id] = pg if prev is None else prev + pg
    for p in params or ():
        if p.node_id not in grads:
            grads[p.node_id] = np.zeros_like(p.value)
            p.grad = grads[p.node_id]
    return grads


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


class GradCheckReport:
    """Per-parameter maximum relative error between reverse mode and central differences."""

    def __init__(self, tol: float):
        self.tol = tol
        self.max_rel_error: dict = {}
        self.failures: dict = {}
        self.checked: dict = {}

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list:
        out = []
        for name, err in self.max_rel_error.items():
            status = "FAIL" if name in self.failures else "ok"
            out.append(f"{status:4s} {name:40s} n={self.checked[name]:6d} max_rel_err={err:.3e}")
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[], Tensor], params: dict, step: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` takes no arguments and reads the current values of the tensors in
    ``params`` (``{name: Tensor}``); values are perturbed in place and restored.
    """
    loss = f()
    tensors = list(params.values())
    grads = backward(loss, tensors)
    report = GradCheckReport(tol)
    for name, p in params.items():
        analytic = grads[p.node_id]
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        nflat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = float(f().value)
            flat[k] = orig - step
            down = float(f().value)
            flat[k] = orig
            nflat[k] = (up - down) / (2.0 * step)
        err = relative_error(analytic, numeric)
        worst = float(err.max()) if err.size else 0.0
        report.max_rel_error[name] = worst
        report.checked[name] = int(err.size)
        if worst >= tol:
            report.failures[name] = int(np.argmax(err))
    return report
