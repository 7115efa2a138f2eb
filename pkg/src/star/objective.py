"""Four-term training objective and the Adam update."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .engine import Node, Tape
from .model import ModelOptions, ModelParams, StepTrace, bind_params, unroll


@dataclass
class Hyperparams:
    beta: float = 1e-4    # sparsity weight
    gamma: float = 1e-4   # coverage weight
    delta: float = 1e-6   # repetition (RAM) weight
    lr: float = 1e-4
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    lam: float = 0.5      # RGB share when fusing attention across streams
    batch_size: int = 8
    clip_norm: float | None = None
    dropout: float = 0.0  # drop probability on segment features, training only

    def __post_init__(self):
        for f in ("beta", "gamma", "delta"):
            if getattr(self, f) < 0:
                raise ValueError(f"Hyperparams.{f} must be >= 0")
        if not self.lr > 0:
            raise ValueError("Hyperparams.lr must be > 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("Hyperparams.lam must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("Hyperparams.batch_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("Hyperparams.dropout must lie in [0, 1)")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("Hyperparams.clip_norm must be > 0 when set")


@dataclass
class LossBreakdown:
    class_loss: float
    sparsity_loss: float
    cov_loss: float
    ram_loss: float
    total: float
    weights: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def row(self) -> list[float]:
        return [self.class_loss, self.sparsity_loss, self.cov_loss, self.ram_loss, self.total]


def _nodes(traces: Sequence[StepTrace], key: str) -> list[Node]:
    return [tr.nodes[key] for tr in traces]


def classification_loss(tape: Tape, traces: Sequence[StepTrace], labels: Sequence[int]) -> Node:
    """Mean negative log-likelihood of the target label over the steps."""
    if len(traces) != len(labels):
        raise ValueError(f"{len(traces)} traces for {len(labels)} labels")
    terms = []
    for tr, y in zip(traces, labels):
        probs = tr.nodes["y_prob"]
        if not 0 <= y < probs.shape[0]:
            raise ValueError(f"label {y} out of range")
        terms.append(tape.log(tape.slice(probs, y)))
    return tape.scale(tape.sum(tape.concat(terms)), -1.0 / len(terms))


def coverage_loss(tape: Tape, traces: Sequence[StepTrace]) -> Node:
    """Hinge on the growth of cumulative attention from one step to the next.

    The inner sum over prefix sums collapses to a weighted sum with weight
    ``N - k + 1`` on position ``k``.
    """
    if len(traces) < 2:
        return tape.const(0.0)
    alphas = _nodes(traces, "alpha")
    N = alphas[0].shape[0]
    w = tape.const(np.arange(N, 0, -1, dtype=np.float64))
    terms = [tape.relu(tape.matmul(tape.sub(cur, prev), w))
             for prev, cur in zip(alphas[:-1], alphas[1:])]
    return tape.scale(tape.sum(tape.concat(terms)), 1.0 / len(terms))


def ram_loss(tape: Tape, traces: Sequence[StepTrace], counts: Sequence[float]) -> Node:
    if len(traces) != len(counts):
        raise ValueError(f"{len(traces)} traces for {len(counts)} counts")
    rams = tape.concat(_nodes(traces, "ram"))
    diff = tape.sub(tape.const(np.asarray(counts, dtype=np.float64)), rams)
    return tape.scale(tape.l2sq(diff), 1.0 / (2 * len(traces)))


def sparsity_loss(tape: Tape, traces: Sequence[StepTrace]) -> Node:
    alphas = tape.concat(_nodes(traces, "alpha"))
    return tape.scale(tape.l1(alphas), 1.0 / alphas.shape[0])


def video_terms(tape: Tape, traces, labels, counts) -> dict[str, Node]:
    return {
        "class_loss": classification_loss(tape, traces, labels),
        "sparsity_loss": sparsity_loss(tape, traces),
        "cov_loss": coverage_loss(tape, traces),
        "ram_loss": ram_loss(tape, traces, counts),
    }


def compose(tape: Tape, terms: Mapping[str, Node], hp: Hyperparams) -> Node:
    total = terms["class_loss"]
    for key, weight in (("sparsity_loss", hp.beta), ("cov_loss", hp.gamma),
                        ("ram_loss", hp.delta)):
        total = tape.add(total, tape.scale(terms[key], weight))
    return total


@dataclass
class Sample:
    """One video as seen by one stream's objective."""
    features: np.ndarray
    labels: list[int]
    counts: list[float]


def build_batch_loss(tape: Tape, batch: Sequence[Sample], params: ModelParams, hp: Hyperparams,
                     opts: ModelOptions | None = None, prefix: str = "",
                     rng: np.random.Generator | None = None) -> tuple[dict[str, Node], dict[str, Node]]:
    """Record the batch-mean loss on ``tape``; returns (term nodes incl. total, param nodes)."""
    if not batch:
        raise ValueError("empty batch")
    pnodes = bind_params(tape, params, prefix)
    per_video = {k: [] for k in ("class_loss", "sparsity_loss", "cov_loss", "ram_loss")}
    for sample in batch:
        feats = sample.features
        if rng is not None and hp.dropout > 0:
            keep = 1.0 - hp.dropout
            mask = rng.random(feats.shape) < keep
            feats = feats * mask / keep
        un = unroll({"s": feats}, {"s": params}, labels=sample.labels, opts=opts, tape=tape,
                    param_nodes={"s": pnodes}, t_max=len(sample.labels))
        terms = video_terms(tape, un.traces["s"], sample.labels, sample.counts)
        for k, v in terms.items():
            per_video[k].append(v)
    terms = {k: tape.mean(tape.concat(v)) for k, v in per_video.items()}
    terms["total"] = compose(tape, terms, hp)
    return terms, pnodes


def total_loss(batch: Sequence[Sample], params: ModelParams, hp: Hyperparams,
               opts: ModelOptions | None = None, with_grads: bool = False,
               rng: np.random.Generator | None = None):
    """Batch loss breakdown; with ``with_grads`` also the parameter gradients."""
    tape = Tape()
    terms, _ = build_batch_loss(tape, batch, params, hp, opts, rng=rng)
    breakdown = LossBreakdown(*(float(terms[k].value) for k in
                                ("class_loss", "sparsity_loss", "cov_loss", "ram_loss", "total")),
                              weights=(hp.beta, hp.gamma, hp.delta))
    if not with_grads:
        return breakdown
    grads = tape.backward(terms["total"])
    return breakdown, grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def like(cls, tensors: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in tensors.items()},
                   {k: np.zeros_like(v) for k, v in tensors.items()}, 0)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              hp: Hyperparams) -> None:
    """Bias-corrected Adam, applied to ``params`` in place (sorted key order)."""
    if not state.m:
        state.m = {k: np.zeros_like(v) for k, v in params.items()}
        state.v = {k: np.zeros_like(v) for k, v in params.items()}
    state.t += 1
    b1, b2 = hp.adam_b1, hp.adam_b2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for k in sorted(params):
        g = np.asarray(grads[k], dtype=np.float64)
        p = params[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"{k}: parameter {p.shape}, gradient {g.shape}, "
                             f"moment {state.m[k].shape}")
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        p -= hp.lr * m_hat / (np.sqrt(v_hat) + hp.adam_eps)
