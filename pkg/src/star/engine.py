"""Dense float64 tensors on a reverse-mode gradient tape.

Values are plain ``numpy.ndarray`` objects (float64, row-major).  A :class:`Tape`
records every op eagerly as it is applied, so model code can branch on values
(greedy decoding), and the recorded graph can later be re-evaluated against a
fresh set of bindings for the named leaves.

Supported broadcasting is deliberately narrow: same shape, scalar with anything,
and a matrix with a vector along its rows.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LOG_CLAMP = 1e-12


class EngineError(Exception):
    pass


class ShapeError(EngineError):
    pass


class NonFiniteError(EngineError, FloatingPointError):
    pass


class UnboundNameError(EngineError, KeyError):
    pass


# ---------------------------------------------------------------------------
# op rules
# ---------------------------------------------------------------------------

def _bcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if len(a) == 2 and len(b) == 1 and a[1] == b[0]:
        return a
    if len(b) == 2 and len(a) == 1 and b[1] == a[0]:
        return b
    raise ShapeError(f"cannot broadcast {a} with {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # matrix-by-row-vector case
    return g.sum(axis=0)


def _mm_forward(a, b, transpose_b=False):
    if transpose_b:
        if b.ndim != 2:
            raise ShapeError("transpose_b needs a matrix operand")
        b = b.T
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul needs 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    return np.asarray(a @ b)


def _mm_backward(g, out, a, b, transpose_b=False):
    bb = b.T if transpose_b else b
    a2 = a if a.ndim == 2 else a[None, :]
    b2 = bb if bb.ndim == 2 else bb[:, None]
    g2 = np.reshape(g, (a2.shape[0], b2.shape[1]))
    ga = (g2 @ b2.T).reshape(a.shape)
    gb = a2.T @ g2
    gb = gb.reshape(bb.shape)
    if transpose_b:
        gb = gb.T
    return ga, gb


def _add_forward(a, b):
    _bcast_shape(a.shape, b.shape)
    return a + b


def _add_backward(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _mul_forward(a, b):
    _bcast_shape(a.shape, b.shape)
    return a * b


def _mul_backward(g, out, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _concat_forward(*xs):
    return np.concatenate([np.ravel(x) for x in xs])


def _concat_backward(g, out, *xs):
    grads = []
    pos = 0
    for x in xs:
        n = x.size
        grads.append(g[pos:pos + n].reshape(x.shape))
        pos += n
    return tuple(grads)


def _slice_forward(a, key):
    try:
        return np.array(a[key], dtype=np.float64)
    except IndexError as exc:
        raise ShapeError(str(exc)) from None


def _slice_backward(g, out, a, key):
    ga = np.zeros_like(a)
    ga[key] += g
    return (ga,)


def _sum_forward(a, axis=None):
    return np.asarray(a.sum(axis=axis))


def _sum_backward(g, out, a, axis=None):
    if axis is None:
        return (np.full(a.shape, float(g)),)
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)


def _mean_forward(a, axis=None):
    return np.asarray(a.mean(axis=axis))


def _mean_backward(g, out, a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    (ga,) = _sum_backward(g, out, a, axis)
    return (ga / n,)


def _sigmoid_forward(a):
    # tanh form avoids exp overflow for large |a|
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _sigmoid_backward(g, out, a):
    return (g * out * (1.0 - out),)


def _tanh_forward(a):
    return np.tanh(a)


def _tanh_backward(g, out, a):
    return (g * (1.0 - out * out),)


def _softmax_forward(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(g, out, a):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _log_forward(a):
    return np.log(np.maximum(a, LOG_CLAMP))


def _log_backward(g, out, a):
    return (np.where(a > LOG_CLAMP, g / np.maximum(a, LOG_CLAMP), 0.0),)


def _relu_forward(a):
    return np.maximum(a, 0.0)


def _relu_backward(g, out, a):
    return (g * (a > 0),)


def _l1_forward(a):
    return np.asarray(np.abs(a).sum())


def _l1_backward(g, out, a):
    return (g * np.sign(a),)


def _l2sq_forward(a):
    return np.asarray((a * a).sum())


def _l2sq_backward(g, out, a):
    return (2.0 * g * a,)


@dataclass(frozen=True)
class OpRule:
    forward: Callable
    backward: Callable
    arity: int | None  # None = variadic


OPS: dict[str, OpRule] = {
    "matmul": OpRule(_mm_forward, _mm_backward, 2),
    "add": OpRule(_add_forward, _add_backward, 2),
    "mul": OpRule(_mul_forward, _mul_backward, 2),
    "concat": OpRule(_concat_forward, _concat_backward, None),
    "slice": OpRule(_slice_forward, _slice_backward, 1),
    "sum": OpRule(_sum_forward, _sum_backward, 1),
    "mean": OpRule(_mean_forward, _mean_backward, 1),
    "sigmoid": OpRule(_sigmoid_forward, _sigmoid_backward, 1),
    "tanh": OpRule(_tanh_forward, _tanh_backward, 1),
    "softmax": OpRule(_softmax_forward, _softmax_backward, 1),
    "log": OpRule(_log_forward, _log_backward, 1),
    "relu": OpRule(_relu_forward, _relu_backward, 1),
    "l1": OpRule(_l1_forward, _l1_backward, 1),
    "l2sq": OpRule(_l2sq_forward, _l2sq_backward, 1),
}

# Ops whose backward rule is deliberately wrong; a negative control for the
# gradient checker.
_FAULTY: set[str] = set()


@contextlib.contextmanager
def inject_fault(*ops: str):
    """Scale the backward rule of ``ops`` by 1.1 while the context is active."""
    unknown = set(ops) - set(OPS)
    if unknown:
        raise KeyError(f"unknown ops: {sorted(unknown)}")
    added = set(ops) - _FAULTY
    _FAULTY.update(added)
    try:
        yield
    finally:
        _FAULTY.difference_update(added)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class Node:
    __slots__ = ("tape", "id", "op", "inputs", "attrs", "value", "name", "requires_grad")

    def __init__(self, tape, id, op, inputs, attrs, value, name, requires_grad):
        self.tape = tape
        self.id = id
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node #{self.id} {self.op}{label} shape={self.shape}>"


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    return arr


class Tape:
    """Append-only record of ops.  Node ids are positions in ``nodes``."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._vars: dict[str, Node] = {}

    # -- leaves -----------------------------------------------------------
    def var(self, name: str, value, requires_grad: bool = True) -> Node:
        """A named free leaf, rebindable through :meth:`eval`."""
        if name in self._vars:
            raise EngineError(f"name {name!r} already bound on this tape")
        arr = _as_array(value)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"leaf {name!r} holds non-finite values")
        node = self._append("var", (), {}, arr, name, requires_grad)
        self._vars[name] = node
        return node

    def const(self, value) -> Node:
        arr = _as_array(value)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("constant holds non-finite values")
        return self._append("const", (), {}, arr, None, False)

    def _append(self, op, inputs, attrs, value, name, requires_grad) -> Node:
        node = Node(self, len(self.nodes), op, inputs, attrs, value, name, requires_grad)
        self.nodes.append(node)
        return node

    @property
    def free_names(self) -> list[str]:
        return list(self._vars)

    def bindings(self) -> dict[str, np.ndarray]:
        """Current values of every free name (copies)."""
        return {k: n.value.copy() for k, n in self._vars.items()}

    # -- ops --------------------------------------------------------------
    def apply(self, op: str, *inputs: Node, name: str | None = None, **attrs) -> Node:
        rule = OPS[op]
        if rule.arity is not None and len(inputs) != rule.arity:
            raise EngineError(f"{op} takes {rule.arity} inputs, got {len(inputs)}")
        for x in inputs:
            if x.tape is not self:
                raise EngineError(f"{op}: input {x!r} belongs to another tape")
        node_id = len(self.nodes)
        try:
            with np.errstate(over="ignore", invalid="ignore"):  # reported below
                value = rule.forward(*(x.value for x in inputs), **attrs)
        except ShapeError as exc:
            raise ShapeError(f"node #{node_id} ({op}): {exc}") from None
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"node #{node_id} ({op}) produced a non-finite value")
        requires_grad = any(x.requires_grad for x in inputs)
        return self._append(op, tuple(x.id for x in inputs), attrs, value, name, requires_grad)

    def matmul(self, a, b, transpose_b=False, name=None):
        return self.apply("matmul", a, b, transpose_b=transpose_b, name=name)

    def add(self, a, b, name=None):
        return self.apply("add", a, b, name=name)

    def mul(self, a, b, name=None):
        return self.apply("mul", a, b, name=name)

    def sub(self, a, b, name=None):
        return self.add(a, self.scale(b, -1.0), name=name)

    def scale(self, a, k: float, name=None):
        return self.mul(a, self.const(k), name=name)

    def concat(self, xs: Sequence[Node], name=None):
        return self.apply("concat", *xs, name=name)

    def slice(self, a, key, name=None):
        return self.apply("slice", a, key=key, name=name)

    def sum(self, a, axis=None, name=None):
        return self.apply("sum", a, axis=axis, name=name)

    def mean(self, a, axis=None, name=None):
        return self.apply("mean", a, axis=axis, name=name)

    def sigmoid(self, a, name=None):
        return self.apply("sigmoid", a, name=name)

    def tanh(self, a, name=None):
        return self.apply("tanh", a, name=name)

    def softmax(self, a, name=None):
        return self.apply("softmax", a, name=name)

    def log(self, a, name=None):
        return self.apply("log", a, name=name)

    def relu(self, a, name=None):
        return self.apply("relu", a, name=name)

    def l1(self, a, name=None):
        return self.apply("l1", a, name=name)

    def l2sq(self, a, name=None):
        return self.apply("l2sq", a, name=name)

    # -- evaluation -------------------------------------------------------
    def eval(self, bindings: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Recompute every node from ``bindings``; returns values of named nodes.

        Control flow taken while the tape was recorded (e.g. greedy argmax) is
        frozen; only values are recomputed.
        """
        missing = [k for k in self._vars if k not in bindings]
        if missing:
            raise UnboundNameError(f"unbound names: {missing}")
        out: dict[str, np.ndarray] = {}
        for node in self.nodes:
            if node.op == "var":
                arr = _as_array(bindings[node.name])
                if arr.shape != node.value.shape:
                    raise ShapeError(
                        f"node #{node.id} ({node.name!r}): bound shape {arr.shape}, "
                        f"expected {node.value.shape}")
                if not np.all(np.isfinite(arr)):
                    raise NonFiniteError(f"binding {node.name!r} holds non-finite values")
                node.value = arr
            elif node.op != "const":
                ins = [self.nodes[i].value for i in node.inputs]
                try:
                    with np.errstate(over="ignore", invalid="ignore"):
                        val = OPS[node.op].forward(*ins, **node.attrs)
                except ShapeError as exc:
                    raise ShapeError(f"node #{node.id} ({node.op}): {exc}") from None
                val = np.asarray(val, dtype=np.float64)
                if not np.all(np.isfinite(val)):
                    raise NonFiniteError(
                        f"node #{node.id} ({node.op}) produced a non-finite value")
                node.value = val
            if node.name is not None:
                out[node.name] = node.value
        return out

    def backward(self, output: Node, bindings: Mapping[str, np.ndarray] | None = None,
                 wrt: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        """Gradients of scalar ``output`` with respect to the free names."""
        if output.tape is not self:
            raise EngineError("output node belongs to another tape")
        if bindings is not None:
            self.eval(bindings)
        if output.value.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        grads: list[np.ndarray | None] = [None] * (output.id + 1)
        grads[output.id] = np.ones_like(output.value)
        nodes = self.nodes
        for node in reversed(nodes[:output.id + 1]):
            g = grads[node.id]
            if g is None or not node.inputs:
                continue
            ins = [nodes[i] for i in node.inputs]
            if not any(x.requires_grad for x in ins):
                continue
            in_grads = OPS[node.op].backward(g, node.value, *(x.value for x in ins),
                                             **node.attrs)
            if node.op in _FAULTY:
                in_grads = tuple(1.1 * gi for gi in in_grads)
            for x, gx in zip(ins, in_grads):
                if not x.requires_grad:
                    continue
                if grads[x.id] is None:
                    grads[x.id] = np.array(gx, dtype=np.float64)
                else:
                    grads[x.id] = grads[x.id] + gx
        names = self.free_names if wrt is None else list(wrt)
        result = {}
        for name in names:
            if name not in self._vars:
                raise UnboundNameError(f"unknown name {name!r}")
            node = self._vars[name]
            g = grads[node.id] if node.id < len(grads) else None
            result[name] = np.zeros_like(node.value) if g is None else g
        return result


# ---------------------------------------------------------------------------
# module-level API
# ---------------------------------------------------------------------------

def eval(tape: Tape, bindings: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:  # noqa: A001
    return tape.eval(bindings)


def backward(tape: Tape, output: Node, bindings: Mapping[str, np.ndarray] | None = None):
    return tape.backward(output, bindings)


@dataclass
class GradReport:
    errors: dict[str, float]
    tol: float
    step: float
    max_error: float = field(init=False)
    passed: bool = field(init=False)

    def __post_init__(self):
        self.max_error = max(self.errors.values(), default=0.0)
        self.passed = bool(self.max_error <= self.tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(tape: Tape, output: Node, bindings: Mapping[str, np.ndarray] | None = None,
                    step: float = 1e-5, tol: float = 1e-6, floor: float = 1e-8,
                    names: Iterable[str] | None = None) -> GradReport:
    """Compare analytic gradients against central differences, coordinate by coordinate."""
    if not step > 0 or not tol > 0:
        raise ValueError("step and tol must be positive")
    base = tape.bindings() if bindings is None else {k: _as_array(v) for k, v in bindings.items()}
    if names is None:
        names = [k for k in tape.free_names if tape._vars[k].requires_grad]
    names = list(names)
    analytic = tape.backward(output, base, wrt=names)
    errors = {}
    try:
        for name in names:
            x = base[name]
            numeric = np.zeros_like(x)
            flat = x.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                if orig + step == orig or orig - step == orig:
                    raise ValueError(
                        f"step {step} underflows at {name}[{j}] = {orig}")
                flat[j] = orig + step
                tape.eval(base)
                f_plus = float(output.value)
                flat[j] = orig - step
                tape.eval(base)
                f_minus = float(output.value)
                flat[j] = orig
                numeric.reshape(-1)[j] = (f_plus - f_minus) / (2.0 * step)
            err = relative_error(analytic[name], numeric, floor)
            errors[name] = float(err.max()) if err.size else 0.0
    finally:
        tape.eval(base)
    return GradReport(errors=errors, tol=tol, step=step)
