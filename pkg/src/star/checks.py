"""Self-checks: per-op and full-loss gradient checks and the attended-response identity."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .engine import OPS, Tape, check_gradients
from .localizer import class_weights, st_gradcam
from .model import ModelDims, ModelParams, init_params, unroll
from .objective import Hyperparams, Sample, build_batch_loss

OP_TOL = 1e-6
LOSS_TOL = 1e-4
# gradients below this are compared absolutely; central-difference round-off
# on an O(1) loss with step 1e-5 is ~1e-11
LOSS_FLOOR = 1e-6
IDENTITY_TOL = 1e-9
LOSS_DIMS = ModelDims(N=8, K=4, H=8, A=8, C=3)


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: float
    tol: float
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28s} err={self.error:.3e}  tol={self.tol:.0e}"


def _away_from_zero(rng, shape, lo=0.2, hi=1.5):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _op_case(op: str, rng: np.random.Generator):
    """A scalar-valued tape exercising ``op``; broadcasting variants included."""
    tape = Tape()
    M = lambda *s: rng.normal(size=s)  # noqa: E731
    if op == "matmul":
        a, b, c = tape.var("a", M(3, 4)), tape.var("b", M(4, 2)), tape.var("c", M(2, 4))
        v = tape.var("v", M(4))
        outs = [tape.matmul(a, b), tape.matmul(a, c, transpose_b=True), tape.matmul(a, v),
                tape.matmul(v, tape.var("u", M(4)))]
    elif op in ("add", "mul"):
        a, b = tape.var("a", M(3, 4)), tape.var("b", M(3, 4))
        row, s = tape.var("row", M(4)), tape.var("s", M())
        f = getattr(tape, op)
        outs = [f(a, b), f(a, row), f(row, a), f(s, a), f(a, s)]
    elif op == "concat":
        outs = [tape.concat([tape.var("a", M(3)), tape.var("b", M(2)), tape.var("s", M())])]
    elif op == "slice":
        a = tape.var("a", M(5, 3))
        outs = [tape.slice(a, 2), tape.slice(a, (slice(1, 4), 1)), tape.slice(tape.var("v", M(6)), slice(2, 5))]
    elif op in ("sum", "mean"):
        a = tape.var("a", M(3, 4))
        f = getattr(tape, op)
        outs = [f(a), f(a, axis=0), f(a, axis=1)]
    elif op in ("sigmoid", "tanh", "softmax"):
        outs = [getattr(tape, op)(tape.var("a", M(5)))]
    elif op == "log":
        outs = [tape.log(tape.var("a", rng.uniform(0.2, 3.0, 5)))]
    elif op in ("relu", "l1"):
        outs = [getattr(tape, op)(tape.var("a", _away_from_zero(rng, (6,))))]
    elif op == "l2sq":
        outs = [tape.l2sq(tape.var("a", M(6)))]
    else:
        raise KeyError(op)
    total = None
    for j, o in enumerate(outs):
        w = tape.const(rng.normal(size=o.shape))
        term = tape.sum(tape.mul(o, w)) if o.shape else tape.mul(o, w)
        total = term if total is None else tape.add(total, term)
    return tape, total


def check_ops(seed: int = 0, tol: float = OP_TOL) -> list[CheckResult]:
    out = []
    for op in sorted(OPS):
        t0 = time.perf_counter()
        tape, total = _op_case(op, np.random.default_rng([seed, len(out)]))
        rep = check_gradients(tape, total, tol=tol)
        out.append(CheckResult(f"op:{op}", rep.passed, rep.max_error, tol, time.perf_counter() - t0))
    return out


def loss_instance(seed: int = 0, dims: ModelDims = LOSS_DIMS):
    """Random parameters and a two-step (one action + END) video of the loss-check size."""
    rng = np.random.default_rng(seed)
    base = init_params(dims, seed)
    tensors = {k: v + 0.3 * rng.normal(size=v.shape) for k, v in base.tensors.items()}
    params = ModelParams(dims, tensors)
    feats = rng.normal(size=(dims.N, dims.K))
    sample = Sample(feats, [int(rng.integers(0, dims.end)), dims.end], [1.0, 0.0])
    return params, sample


def check_full_loss(seed: int = 0, tol: float = LOSS_TOL, hp: Hyperparams | None = None) -> CheckResult:
    # weights large enough that every term moves the total measurably
    hp = hp or Hyperparams(beta=0.1, gamma=0.1, delta=0.1)
    t0 = time.perf_counter()
    params, sample = loss_instance(seed)
    tape = Tape()
    terms, _ = build_batch_loss(tape, [sample], params, hp)
    rep = check_gradients(tape, terms["total"], tol=tol, floor=LOSS_FLOOR)
    return CheckResult("loss:total", rep.passed, rep.max_error, tol, time.perf_counter() - t0)


def identity_gap(params: ModelParams, S: np.ndarray, t: int, c: int, labels) -> tuple[float, float]:
    """(|sum_i alpha_i xi_i - sum_k w_k x_k|, |rhs|) at step ``t`` for class ``c``."""
    un = unroll({"s": S}, {"s": params}, labels=labels, t_max=len(labels))
    tr = un.traces["s"]
    w = class_weights(tr, params, t, c)
    xi = st_gradcam(w, S)
    lhs = float(np.dot(tr[t].alpha, xi))
    rhs = float(np.dot(w, tr[t].x))
    return abs(lhs - rhs), abs(rhs)


def check_identity(draws: int = 100, seed: int = 0, tol: float = IDENTITY_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    t0 = time.perf_counter()
    for j in range(draws):
        dims = ModelDims(N=int(rng.integers(2, 30)), K=int(rng.integers(1, 12)),
                         H=int(rng.integers(1, 12)), A=int(rng.integers(1, 12)),
                         C=int(rng.integers(2, 7)))
        base = init_params(dims, int(rng.integers(1 << 30)))
        params = ModelParams(dims, {k: v + rng.normal(scale=0.5, size=v.shape)
                                    for k, v in base.tensors.items()})
        S = rng.normal(scale=float(rng.uniform(0.1, 5.0)), size=(dims.N, dims.K))
        T = int(rng.integers(1, dims.C + 1))
        labels = [int(x) for x in rng.integers(0, dims.end, T - 1)] + [dims.end] if dims.end else [dims.end]
        t = int(rng.integers(0, len(labels)))
        c = int(rng.integers(0, dims.C))
        gap, scale = identity_gap(params, S, t, c, labels)
        worst = max(worst, gap / max(1.0, scale))
    return CheckResult(f"identity:{draws} draws", worst <= tol, worst, tol, time.perf_counter() - t0)


def run_all(seed: int = 0) -> list[CheckResult]:
    return check_ops(seed) + [check_full_loss(seed), check_identity(seed=seed)]
