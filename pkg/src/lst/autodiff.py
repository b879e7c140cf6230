"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every operation appends a node to the tape of its operands. Backward rules are
themselves written with taped operations, so ``backward(..., create_graph=True)``
records the gradient computation and the result can be differentiated again.
That is what lets the meta-learner differentiate through inner-loop updates.

Example::

    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0, 3.0]), name="x")
    loss = sum_(multiply(x, x))
    grads = backward(tape, loss)        # {"x": array([2., 4., 6.])}
"""

from __future__ import annotations

import heapq
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericDomainError(FloatingPointError):
    """A non-finite value entered or left an operation."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


def _check_finite(kind: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericDomainError(f"{kind}: non-finite value encountered")


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    forward: Callable[..., np.ndarray] | None
    vjp: Callable | None
    requires_grad: bool
    name: str | None = None


class Var:
    """Handle to a value recorded on a tape (or a detached value)."""

    __slots__ = ("tape", "id", "value", "requires_grad")
    __array_priority__ = 100

    def __init__(self, tape: "Tape", id: int | None, value: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.id = id
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def name(self) -> str | None:
        return None if self.id is None else self.tape.nodes[self.id].name

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the named functions in ``ops`` are the canonical API.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Append-only record of operations.

    Node ids are positions in ``nodes``; inputs always reference earlier ids,
    so the list is already in topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.recording = True

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def frontier(self) -> int | None:
        return len(self.nodes) - 1 if self.nodes else None

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value, name: str | None = None, requires_grad: bool = True) -> Var:
        arr = np.array(value, dtype=np.float64)
        _check_finite("leaf", arr)
        nid = self._append(Node("leaf", (), arr, None, None, requires_grad, name))
        return Var(self, nid, arr, requires_grad)

    def constant(self, value, name: str | None = None) -> Var:
        return self.leaf(value, name=name, requires_grad=False)

    @contextmanager
    def no_record(self):
        prev = self.recording
        self.recording = False
        try:
            yield self
        finally:
            self.recording = prev

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from its inputs, returning the fresh outputs."""
        out: list[np.ndarray] = []
        for node in self.nodes:
            if node.forward is None:
                out.append(node.value)
            else:
                out.append(node.forward(*(out[i] for i in node.inputs)))
        return out

    def leaves(self) -> dict[str, Var]:
        return {
            n.name: Var(self, i, n.value, n.requires_grad)
            for i, n in enumerate(self.nodes)
            if n.kind == "leaf" and n.name is not None and n.requires_grad
        }


# ---------------------------------------------------------------------------
# recording machinery


def _tape_of(operands: Sequence) -> Tape:
    for o in operands:
        if isinstance(o, Var):
            return o.tape
    raise ContractError("at least one operand must be a Var")


def _as_var(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ContractError("operands live on different tapes")
        return x
    arr = np.asarray(x, dtype=np.float64)
    if tape.recording:
        return tape.constant(arr)
    return Var(tape, None, arr, False)


def record(kind: str, operands: Sequence, forward: Callable[..., np.ndarray], vjp: Callable | None) -> Var:
    """Evaluate ``forward`` on operand values and append the node.

    ``vjp(g, out, *inputs)`` receives the output cotangent ``g`` and returns one
    cotangent (Var or None) per operand. ``vjp=None`` marks a stop-gradient.
    """
    tape = _tape_of(operands)
    ins = [_as_var(tape, o) for o in operands]
    vals = [v.value for v in ins]
    _check_finite(kind, *vals)
    out = forward(*vals)
    _check_finite(kind, out)
    req = vjp is not None and any(v.requires_grad for v in ins)
    if not tape.recording:
        return Var(tape, None, out, False)
    nid = tape._append(Node(kind, tuple(v.id for v in ins), out, forward, vjp if req else None, req))
    return Var(tape, nid, out, req)


def _unbroadcast(g: Var, shape: tuple[int, ...]) -> Var:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while len(g.shape) > len(shape):
        g = sum_(g, axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = sum_(g, axis=ax, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitive operations


def add(a, b) -> Var:
    def fwd(x, y):
        return x + y

    def vjp(g, out, x, y):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    tape = _tape_of((a, b))
    av, bv = _as_var(tape, a), _as_var(tape, b)
    _broadcast_shape("add", av.value, bv.value)
    return record("add", (av, bv), fwd, vjp)


def sub(a, b) -> Var:
    def fwd(x, y):
        return x - y

    def vjp(g, out, x, y):
        return _unbroadcast(g, x.shape), _unbroadcast(multiply(g, -1.0), y.shape)

    tape = _tape_of((a, b))
    av, bv = _as_var(tape, a), _as_var(tape, b)
    _broadcast_shape("sub", av.value, bv.value)
    return record("sub", (av, bv), fwd, vjp)


def multiply(a, b) -> Var:
    def fwd(x, y):
        return x * y

    def vjp(g, out, x, y):
        gx = _unbroadcast(multiply(g, y), x.shape) if x.requires_grad else None
        gy = _unbroadcast(multiply(g, x), y.shape) if y.requires_grad else None
        return gx, gy

    tape = _tape_of((a, b))
    av, bv = _as_var(tape, a), _as_var(tape, b)
    _broadcast_shape("multiply", av.value, bv.value)
    return record("multiply", (av, bv), fwd, vjp)


def matmul(a, b) -> Var:
    def vjp(g, out, x, y):
        gx = matmul(g, transpose(y)) if x.requires_grad else None
        gy = matmul(transpose(x), g) if y.requires_grad else None
        return gx, gy

    tape = _tape_of((a, b))
    av, bv = _as_var(tape, a), _as_var(tape, b)
    if av.value.ndim != 2 or bv.value.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    return record("matmul", (av, bv), np.matmul, vjp)


def transpose(a) -> Var:
    def vjp(g, out, x):
        return (transpose(g),)

    return record("transpose", (a,), np.transpose, vjp)


def reciprocal(a) -> Var:
    def vjp(g, out, x):
        return (multiply(g, multiply(multiply(out, out), -1.0)),)

    return record("reciprocal", (a,), lambda x: 1.0 / x, vjp)


def relu(a) -> Var:
    def vjp(g, out, x):
        return (multiply(g, (x.value > 0).astype(np.float64)),)

    return record("relu", (a,), lambda x: np.maximum(x, 0.0), vjp)


def log(a) -> Var:
    """Natural log with inputs clamped from below at ``LOG_CLAMP``."""

    def vjp(g, out, x):
        # zero derivative where the clamp is active
        mask = (x.value > LOG_CLAMP).astype(np.float64)
        return (multiply(g, multiply(reciprocal(maximum_const(x, LOG_CLAMP)), mask)),)

    return record("log", (a,), lambda x: np.log(np.maximum(x, LOG_CLAMP)), vjp)


def maximum_const(a, c: float) -> Var:
    def vjp(g, out, x):
        return (multiply(g, (x.value > c).astype(np.float64)),)

    return record("maximum_const", (a,), lambda x: np.maximum(x, c), vjp)


def exp(a) -> Var:
    def vjp(g, out, x):
        return (multiply(g, out),)

    return record("exp", (a,), np.exp, vjp)


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Var:
    def fwd(x):
        return np.asarray(np.sum(x, axis=axis, keepdims=keepdims), dtype=np.float64)

    def vjp(g, out, x):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(out.value, axis).shape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * x.value.ndim)
        return (expand(g, x.shape),)

    return record("sum", (a,), fwd, vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Var:
    av = a.value if isinstance(a, Var) else np.asarray(a)
    n = av.size if axis is None else av.shape[axis]
    return multiply(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def expand(a, shape: tuple[int, ...]) -> Var:
    shape = tuple(shape)

    def vjp(g, out, x):
        return (_unbroadcast(g, x.shape),)

    return record("expand", (a,), lambda x: np.broadcast_to(x, shape).copy(), vjp)


def reshape(a, shape: tuple[int, ...]) -> Var:
    shape = tuple(shape)

    def vjp(g, out, x):
        return (reshape(g, x.shape),)

    av = a.value if isinstance(a, Var) else np.asarray(a)
    if int(np.prod(shape)) != av.size:
        raise ShapeError(f"reshape: cannot reshape {av.shape} to {shape}")
    return record("reshape", (a,), lambda x: x.reshape(shape).copy(), vjp)


def softmax_rows(a) -> Var:
    def fwd(x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def vjp(g, out, x):
        gy = multiply(g, out)
        return (sub(gy, multiply(out, sum_(gy, axis=1, keepdims=True))),)

    _require_2d("softmax_rows", a)
    return record("softmax_rows", (a,), fwd, vjp)


def log_softmax_rows(a) -> Var:
    def fwd(x):
        z = x - x.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def vjp(g, out, x):
        return (sub(g, multiply(softmax_rows(x), sum_(g, axis=1, keepdims=True))),)

    _require_2d("log_softmax_rows", a)
    return record("log_softmax_rows", (a,), fwd, vjp)


def concat_cols(a, b) -> Var:
    tape = _tape_of((a, b))
    av, bv = _as_var(tape, a), _as_var(tape, b)
    if av.value.ndim != 2 or bv.value.ndim != 2 or av.shape[0] != bv.shape[0]:
        raise ShapeError(f"concat_cols: incompatible shapes {av.shape} and {bv.shape}")
    k = av.shape[1]

    def vjp(g, out, x, y):
        return slice_cols(g, 0, k), slice_cols(g, k, g.shape[1])

    return record("concat_cols", (av, bv), lambda x, y: np.concatenate([x, y], axis=1), vjp)


def concat_rows(a, b) -> Var:
    tape = _tape_of((a, b))
    av, bv = _as_var(tape, a), _as_var(tape, b)
    if av.value.ndim != 2 or bv.value.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ShapeError(f"concat_rows: incompatible shapes {av.shape} and {bv.shape}")
    k = av.shape[0]
    idx_a = np.arange(k)
    idx_b = np.arange(k, k + bv.shape[0])

    def vjp(g, out, x, y):
        return gather_rows(g, idx_a), gather_rows(g, idx_b)

    return record("concat_rows", (av, bv), lambda x, y: np.concatenate([x, y], axis=0), vjp)


def slice_cols(a, start: int, stop: int) -> Var:
    av = a.value if isinstance(a, Var) else np.asarray(a)
    ncol = av.shape[1]

    def vjp(g, out, x):
        n = x.shape[0]
        left = np.zeros((n, start))
        right = np.zeros((n, ncol - stop))
        parts = g
        if start > 0:
            parts = concat_cols(left, parts)
        if stop < ncol:
            parts = concat_cols(parts, right)
        return (parts,)

    return record("slice_cols", (a,), lambda x: x[:, start:stop].copy(), vjp)


def gather_rows(a, index) -> Var:
    index = np.asarray(index, dtype=np.int64)
    av = a.value if isinstance(a, Var) else np.asarray(a)
    if index.size and (index.min() < 0 or index.max() >= av.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {av.shape}")
    nrows = av.shape[0]

    def vjp(g, out, x):
        return (scatter_rows(g, index, nrows),)

    return record("gather_rows", (a,), lambda x: x[index].copy(), vjp)


def scatter_rows(a, index, nrows: int) -> Var:
    """Sum rows of ``a`` into an ``nrows``-row zero array at ``index``."""
    index = np.asarray(index, dtype=np.int64)

    def fwd(x):
        out = np.zeros((nrows,) + x.shape[1:])
        np.add.at(out, index, x)
        return out

    def vjp(g, out, x):
        return (gather_rows(g, index),)

    return record("scatter_rows", (a,), fwd, vjp)


def scale_shift_affine(x, weight, scale, bias, shift) -> Var:
    """``x @ (weight * scale) + (bias + shift)``, recorded as primitive ops."""
    for nm, v in (("weight", weight), ("scale", scale)):
        if _val(v).ndim != 2:
            raise ShapeError(f"scale_shift_affine: {nm} must be 2-D, got {_val(v).shape}")
    if _val(weight).shape != _val(scale).shape:
        raise ShapeError(f"scale_shift_affine: weight {_val(weight).shape} vs scale {_val(scale).shape}")
    if _val(bias).shape != _val(shift).shape:
        raise ShapeError(f"scale_shift_affine: bias {_val(bias).shape} vs shift {_val(shift).shape}")
    return add(matmul(x, multiply(weight, scale)), add(bias, shift))


def stop_gradient(a: Var) -> Var:
    """Same value, no gradient flows back through it."""
    return record("stop_gradient", (a,), lambda x: x.copy(), None)


def detach(a: Var, name: str | None = None) -> Var:
    """Fresh differentiable leaf holding ``a``'s value, cut from its history."""
    return a.tape.leaf(a.value, name=name)


def _val(v) -> np.ndarray:
    return v.value if isinstance(v, Var) else np.asarray(v)


def _require_2d(kind: str, a) -> None:
    if _val(a).ndim != 2:
        raise ShapeError(f"{kind}: expected a 2-D array, got shape {_val(a).shape}")


# ---------------------------------------------------------------------------
# composite losses


def cross_entropy(logits, labels) -> Var:
    """Mean softmax cross-entropy of ``logits`` (n x C) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = _val(logits).shape
    if labels.shape != (n,) or (n and (labels.min() < 0 or labels.max() >= c)):
        raise ContractError(f"cross_entropy: labels must be {n} integers in [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return multiply(sum_(multiply(log_softmax_rows(logits), onehot)), -1.0 / n)


# ---------------------------------------------------------------------------
# backward


def backward(
    tape: Tape,
    loss: Var,
    wrt: Iterable[Var] | None = None,
    create_graph: bool = False,
) -> dict:
    """Gradients of the scalar ``loss``.

    With ``wrt=None`` the result maps every named grad-requiring leaf to its
    gradient (zeros when unreachable). Otherwise it maps each requested Var's
    id to its gradient; with ``create_graph=True`` those gradients are Vars
    recorded on the tape, else plain arrays.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.id is None:
        raise ContractError("backward: loss was not recorded on a tape")
    named = wrt is None
    targets = list(tape.leaves().values()) if named else list(wrt)
    target_ids = {t.id for t in targets if t.id is not None}

    # nodes on some path from a target to the loss
    relevant: set[int] = set()
    if target_ids:
        lo = min(target_ids)
        for i in range(lo, loss.id + 1):
            node = tape.nodes[i]
            if i in target_ids or (node.requires_grad and any(j in relevant for j in node.inputs)):
                relevant.add(i)

    grads: dict[int, Var] = {}
    ctx = tape.no_record() if not create_graph else _null_ctx(tape)
    with ctx:
        if loss.id in relevant:
            seed = np.ones_like(loss.value)
            grads[loss.id] = tape.constant(seed) if create_graph else Var(tape, None, seed, False)
            heap = [-loss.id]
            queued = {loss.id}
            while heap:
                i = -heapq.heappop(heap)
                node = tape.nodes[i]
                if node.vjp is None:
                    continue
                g = grads[i]
                ins = [Var(tape, j, tape.nodes[j].value, tape.nodes[j].requires_grad) for j in node.inputs]
                out = Var(tape, i, node.value, node.requires_grad)
                contribs = node.vjp(g, out, *ins)
                for j, c in zip(node.inputs, contribs):
                    if c is None or j not in relevant:
                        continue
                    grads[j] = c if j not in grads else add(grads[j], c)
                    if j not in queued:
                        queued.add(j)
                        heapq.heappush(heap, -j)

    result = {}
    for t in targets:
        g = grads.get(t.id)
        key = t.name if named else t.id
        if g is None:
            result[key] = (tape.constant(np.zeros_like(t.value)) if create_graph else np.zeros_like(t.value))
        else:
            result[key] = g if create_graph else g.value
    return result


class _null_ctx:
    def __init__(self, tape):
        self.tape = tape

    def __enter__(self):
        return self.tape

    def __exit__(self, *exc):
        return False


def grad(loss: Var, wrt: Sequence[Var], create_graph: bool = False) -> list:
    """List form of ``backward`` for explicit targets."""
    out = backward(loss.tape, loss, wrt=wrt, create_graph=create_graph)
    return [out[w.id] for w in wrt]


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tolerance: float
    checked: int
    skipped: int
    worst: tuple[str, tuple[int, ...]] | None
    failures: list[tuple[str, tuple[int, ...], float, float, float]] = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        s = f"{status}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:g}, {self.checked} coords, {self.skipped} skipped)"
        if self.failures:
            name, idx, a, n, r = self.failures[0]
            s += f"; first failure {name}{list(idx)} analytic={a:.6g} numeric={n:.6g} rel={r:.3e}"
        return s


def grad_check(
    fn: Callable[[Tape, dict[str, Var]], Var],
    params: dict[str, np.ndarray],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare ``backward`` against central differences, coordinate by coordinate.

    ``fn(tape, vars)`` must build a scalar loss from the leaves in ``vars``.
    """
    if epsilon <= 0:
        raise ContractError("grad_check: epsilon must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(p):
        tape = Tape()
        leaves = {k: tape.leaf(v, name=k) for k, v in p.items()}
        return tape, leaves, fn(tape, leaves)

    tape, _, loss = evaluate(params)
    analytic = backward(tape, loss)

    def scalar(p):
        return float(evaluate(p)[2].value.reshape(()))

    max_rel = 0.0
    worst = None
    failures = []
    checked = skipped = 0
    for name, base in params.items():
        for idx in np.ndindex(base.shape):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += epsilon
            minus[name][idx] -= epsilon
            num = (scalar(plus) - scalar(minus)) / (2 * epsilon)
            ana = float(analytic[name][idx])
            if abs(ana) < floor and abs(num) < floor:
                skipped += 1
                continue
            checked += 1
            rel = abs(ana - num) / max(abs(ana), abs(num))
            if rel > max_rel:
                max_rel, worst = rel, (name, idx)
            if rel >= tolerance:
                failures.append((name, idx, ana, num, rel))
    return GradCheckReport(not failures, max_rel, tolerance, checked, skipped, worst, failures)
