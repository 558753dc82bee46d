"""Dense 2-D matrices with a reverse-mode gradient tape.

Every value in the model is a 2-D float array wrapped in a Tensor. Operations
record their inputs and a backward closure on the fly; calling ``backward()``
on a scalar (1x1) result accumulates gradients into every tensor created with
``requires_grad=True``. A finite-difference checker (`grad_check`) validates
the analytic rules.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# When enabled, every op asserts that its output is finite and names itself
# in the failure. Off by default: the checks cost a full pass over the data.
_debug_finite = False


def set_debug_finite(enabled: bool) -> None:
    global _debug_finite
    _debug_finite = bool(enabled)


def _check_finite(value: np.ndarray, op: str) -> None:
    if _debug_finite and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite output of op '{op}'")


class Tensor:
    """A 2-D array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(value)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.value = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g: np.ndarray, own: bool = False) -> None:
        # own=True promises g is a fresh array the caller will not reuse, so
        # the first contribution can take it without copying.
        if self.grad is None:
            self.grad = g if own else np.array(g)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar (1x1) tensor."""
        if self.shape != (1, 1):
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the heavy lifting lives in the module-level functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def _result(value, parents, backward, op: str) -> Tensor:
    _check_finite(value, op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value)
    return Tensor(value, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy row/scalar broadcasting)."""
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    if out.shape != shape:
        raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")
    return out


def _acc_reduced(p: Tensor, g: np.ndarray, fresh: bool) -> None:
    """Accumulate g into p, reducing broadcast axes; `fresh` marks arrays the
    closure just allocated (safe to hand over without a copy)."""
    reduced = _unbroadcast(g, p.shape)
    p._accumulate(reduced, own=fresh or reduced is not g)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    ok = (
        sa == sb
        or (sa[1] == sb[1] and (sa[0] == 1 or sb[0] == 1))
        or sa == (1, 1)
        or sb == (1, 1)
    )
    if not ok:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    out = a.value + b.value

    def backward(g):
        if a.requires_grad:
            _acc_reduced(a, g, fresh=False)
        if b.requires_grad:
            _acc_reduced(b, g, fresh=False)

    return _result(out, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    out = a.value - b.value

    def backward(g):
        if a.requires_grad:
            _acc_reduced(a, g, fresh=False)
        if b.requires_grad:
            _acc_reduced(b, -g, fresh=True)

    return _result(out, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    out = a.value * b.value

    def backward(g):
        if a.requires_grad:
            _acc_reduced(a, g * b.value, fresh=True)
        if b.requires_grad:
            _acc_reduced(b, g * a.value, fresh=True)

    return _result(out, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "div")
    out = a.value / b.value

    def backward(g):
        if a.requires_grad:
            _acc_reduced(a, g / b.value, fresh=True)
        if b.requires_grad:
            _acc_reduced(b, -g * a.value / (b.value * b.value), fresh=True)

    return _result(out, (a, b), backward, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} x {b.shape}")
    out = a.value @ b.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T, own=True)
        if b.requires_grad:
            b._accumulate(a.value.T @ g, own=True)

    return _result(out, (a, b), backward, "matmul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.value * c

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * c, own=True)

    return _result(out, (a,), backward, "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = a.value + float(c)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)

    return _result(out, (a,), backward, "add_scalar")


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0  # subgradient 0 at the kink
    out = np.where(mask, a.value, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask, own=True)

    return _result(out, (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.value)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out * (1.0 - out), own=True)

    return _result(out, (a,), backward, "sigmoid")


def glu(a: Tensor, units: int) -> Tensor:
    """Gated linear unit over a 2*units-wide input: first half times the
    sigmoid of the second half. Fused so the backward pass writes one array."""
    if a.shape[1] != 2 * units:
        raise ShapeError(f"glu: expected {2 * units} columns, got {a.shape[1]}")
    lin = a.value[:, :units]
    gate = expit(a.value[:, units:])
    out = lin * gate

    def backward(g):
        if a.requires_grad:
            dh = np.empty_like(a.value)
            np.multiply(g, gate, out=dh[:, :units])
            np.multiply(g * out, 1.0 - gate, out=dh[:, units:])
            a._accumulate(dh, own=True)

    return _result(out, (a,), backward, "glu")


def log(a: Tensor) -> Tensor:
    out = np.log(a.value)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.value, own=True)

    return _result(out, (a,), backward, "log")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out, own=True)

    return _result(out, (a,), backward, "exp")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out, own=True)

    return _result(out, (a,), backward, "sqrt")


def square(a: Tensor) -> Tensor:
    out = a.value * a.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 2.0 * a.value, own=True)

    return _result(out, (a,), backward, "square")


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum to a scalar (axis=None), a row (axis=0) or a column (axis=1)."""
    if axis is None:
        out = a.value.sum().reshape(1, 1)
    elif axis == 0:
        out = a.value.sum(axis=0, keepdims=True)
    elif axis == 1:
        out = a.value.sum(axis=1, keepdims=True)
    else:
        raise ShapeError(f"sum: bad axis {axis}")

    def backward(g):
        if a.requires_grad:
            if g.shape != a.shape:
                a._accumulate(np.broadcast_to(g, a.shape).copy(), own=True)
            else:
                a._accumulate(g)

    return _result(out, (a,), backward, "sum")


def tmean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.value.size)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.value[:, start:stop]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.value)
            full[:, start:stop] = g
            a._accumulate(full, own=True)

    return _result(out, (a,), backward, "slice_cols")


def concat_cols(parts: list[Tensor]) -> Tensor:
    rows = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows:
            raise ShapeError("concat_cols: row counts differ")
    out = np.concatenate([p.value for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return _result(out, tuple(parts), backward, "concat_cols")


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Look rows of `table` up by integer index; used for embeddings."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeError("gather_rows: index must be 1-D")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(
            f"gather_rows: index out of range [0, {table.shape[0]}): "
            f"min={index.min()}, max={index.max()}"
        )
    out = table.value[index]

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.value)
            np.add.at(full, index, g)
            table._accumulate(full, own=True)

    return _result(out, (table,), backward, "gather_rows")


def _sparsemax_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise Euclidean projection onto the probability simplex.

    Returns (projection, support mask). Sort each row descending, take the
    largest k with 1 + k*z_(k) > cumsum_k(z), threshold at
    tau = (cumsum_k - 1)/k and clip. The row max is subtracted up front; the
    projection is shift invariant, and this keeps the cumulative sums small.
    """
    z = z - z.max(axis=1, keepdims=True)
    srt = -np.sort(-z, axis=1)
    csum = np.cumsum(srt, axis=1)
    ks = np.arange(1, z.shape[1] + 1, dtype=z.dtype)
    feasible = 1.0 + ks * srt > csum
    k = feasible.sum(axis=1)  # strict inequality: ties keep the larger support
    tau = (csum[np.arange(z.shape[0]), k - 1] - 1.0) / k
    out = np.maximum(z - tau[:, None], 0.0)
    return out, out > 0


def sparsemax(z: Tensor) -> Tensor:
    if not np.all(np.isfinite(np.abs(z.value))):
        raise NonFiniteError("sparsemax: non-finite input")
    out, support = _sparsemax_rows(z.value)

    def backward(g):
        if z.requires_grad:
            nnz = support.sum(axis=1, keepdims=True)
            vhat = (g * support).sum(axis=1, keepdims=True) / nnz
            z._accumulate(np.where(support, g - vhat, 0.0), own=True)

    return _result(out, (z,), backward, "sparsemax")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy of integer labels against softmax of the logits."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, k = logits.shape
    if labels.size != n:
        raise ShapeError(f"cross entropy: {labels.size} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"cross entropy: label out of range [0, {k})")
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    ez = np.exp(shifted)
    probs = ez / ez.sum(axis=1, keepdims=True)
    picked = shifted[np.arange(n), labels] - np.log(ez.sum(axis=1))
    out = np.array([[-picked.mean()]])

    def backward(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(n), labels] -= 1.0
            logits._accumulate(g[0, 0] * d / n, own=True)

    return _result(out, (logits,), backward, "softmax_cross_entropy")


def batch_norm_train(
    x: Tensor,
    gain: Tensor,
    shift: Tensor,
    groups: list[tuple[int, int]],
    eps: float,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize each (start, stop) row group by its own mean/variance.

    One fused op rather than a subgraph per group: the encoder calls this in
    an inner loop and node count dominates the runtime. Also returns the
    per-group means and variances (group x d) for running-stat updates.
    """
    d = x.shape[1]
    means = np.empty((len(groups), d))
    variances = np.empty((len(groups), d))
    xhat = np.empty_like(x.value)
    inv = np.empty((len(groups), d))
    if len(groups) > 1 and all((b - a) == (groups[0][1] - groups[0][0]) for a, b in groups):
        # equal-size groups: vectorize via reshape, reuse the centered buffer
        n = groups[0][1] - groups[0][0]
        g3 = x.value[: len(groups) * n].reshape(len(groups), n, d)
        xh3 = xhat[: len(groups) * n].reshape(len(groups), n, d)
        means[:] = g3.mean(axis=1)
        np.subtract(g3, means[:, None, :], out=xh3)
        variances[:] = np.mean(xh3 * xh3, axis=1)
        inv[:] = 1.0 / np.sqrt(variances + eps)
        xh3 *= inv[:, None, :]
    else:
        for gi, (a, b) in enumerate(groups):
            seg = x.value[a:b]
            means[gi] = seg.mean(axis=0)
            variances[gi] = seg.var(axis=0)
            inv[gi] = 1.0 / np.sqrt(variances[gi] + eps)
            xhat[a:b] = (seg - means[gi]) * inv[gi]
    out = xhat * gain.value
    out += shift.value

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=0, keepdims=True))
        if shift.requires_grad:
            shift._accumulate(g.sum(axis=0, keepdims=True))
        if x.requires_grad:
            dxhat = g * gain.value
            n0 = groups[0][1] - groups[0][0]
            if len(groups) > 1 and all((b - a) == n0 for a, b in groups):
                seg = dxhat.reshape(len(groups), n0, d)
                xh = xhat.reshape(len(groups), n0, d)
                t = seg * xh
                s2 = t.sum(axis=1, keepdims=True)
                s1 = seg.sum(axis=1, keepdims=True)
                np.multiply(xh, s2, out=t)
                t += s1
                t *= -1.0 / n0
                t += seg
                t *= inv[:, None, :]
                x._accumulate(t.reshape(-1, d), own=True)
            else:
                dx = np.empty_like(x.value)
                for gi, (a, b) in enumerate(groups):
                    n = b - a
                    seg = dxhat[a:b]
                    xh = xhat[a:b]
                    dx[a:b] = (inv[gi] / n) * (
                        n * seg - seg.sum(axis=0) - xh * (seg * xh).sum(axis=0)
                    )
                x._accumulate(dx, own=True)

    return _result(out, (x, gain, shift), backward, "batch_norm_train"), means, variances


def batch_norm_infer(
    x: Tensor,
    gain: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float,
) -> Tensor:
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.value - running_mean) * inv

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=0, keepdims=True))
        if shift.requires_grad:
            shift._accumulate(g.sum(axis=0, keepdims=True))
        if x.requires_grad:
            x._accumulate(g * gain.value * inv, own=True)

    return _result(gain.value * xhat + shift.value, (x, gain, shift), backward, "batch_norm_infer")


@dataclass
class GradReport:
    op_name: str
    max_rel_error: float
    worst_coordinate: tuple[int, int, int]  # (param index, row, col)
    passed: bool

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (
            f"{self.op_name}: max rel err {self.max_rel_error:.3e} "
            f"at param {self.worst_coordinate} -> {status}"
        )


def grad_check(forward, params: list[Tensor], tolerance: float = 1e-4,
               h: float = 1e-5, name: str = "op", atol: float = 1e-6) -> GradReport:
    """Compare analytic gradients of `forward()` against central differences.

    `forward` must rebuild its graph from `params` on every call and return a
    scalar Tensor. Coordinates where both gradients are below `atol` count as
    matching: structurally-zero gradients (e.g. a bias absorbed by batch
    norm) sit beneath the finite-difference noise floor.
    """
    for p in params:
        p.zero_grad()
        if not np.all(np.isfinite(p.value)):
            raise NonFiniteError(f"grad_check({name}): non-finite parameter")
    loss = forward()
    if loss.shape != (1, 1):
        raise ShapeError(f"grad_check({name}): loss is not scalar, shape {loss.shape}")
    loss.backward()
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    worst_coord = (0, 0, 0)
    for pi, p in enumerate(params):
        it = np.nditer(p.value, flags=["multi_index"])
        for _ in it:
            i, j = it.multi_index
            orig = p.value[i, j]
            p.value[i, j] = orig + h
            up = forward().value[0, 0]
            p.value[i, j] = orig - h
            down = forward().value[0, 0]
            p.value[i, j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"grad_check({name}): NaN in perturbed forward")
            numeric = (up - down) / (2.0 * h)
            ga = analytic[pi][i, j]
            if abs(ga) < atol and abs(numeric) < atol:
                continue
            rel = abs(ga - numeric) / max(abs(ga), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
                worst_coord = (pi, i, j)
    return GradReport(name, worst, worst_coord, worst <= tolerance)
