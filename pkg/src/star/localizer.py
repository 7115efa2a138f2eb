"""Class responses from logit gradients, attended proposal scoring and NMS."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .engine import Tape
from .model import ModelParams, StepTrace, bind_params, recurrent_step

DEFAULT_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)
DEFAULT_NMS_IOU = 0.4


@dataclass(frozen=True)
class Proposal:
    cls: int
    start: int  # inclusive segment indices
    end: int
    score: float
    step: int = 0
    stream: str = "fused"

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ValueError(f"bad proposal span [{self.start}, {self.end}]")


@dataclass
class ClassResponse:
    step: int
    cls: int
    xi: np.ndarray
    w: np.ndarray


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _lstm_logits(tape, h_prev, cell_prev, y_prev, x, ram, p):
    return recurrent_step(tape, h_prev, cell_prev, y_prev, x, ram, p)["logits"]


def class_weights(traces: Sequence[StepTrace], params: ModelParams, t: int, c: int,
                  recurrent: Callable | None = None) -> np.ndarray:
    """Gradient of the step-``t`` logit of class ``c`` w.r.t. the assembled feature.

    Every other input of the step (previous state, previous label, repetition
    value) and all parameters are held at their recorded values.  ``recurrent``
    swaps in another step function ``(tape, h_prev, cell_prev, y_prev, x, ram,
    params) -> logits`` node.
    """
    if not 0 <= t < len(traces):
        raise IndexError(f"step {t} outside [0, {len(traces)})")
    if not 0 <= c < params.dims.C:
        raise IndexError(f"class {c} outside [0, {params.dims.C})")
    tr = traces[t]
    recurrent = recurrent or _lstm_logits
    tape = Tape()
    p = bind_params(tape, params, requires_grad=False)
    x = tape.var("x", tr.x)
    logits = recurrent(tape, tape.const(tr.h_prev), tape.const(tr.cell_prev), tr.y_prev, x,
                       tape.const(tr.ram), p)
    target = tape.slice(logits, c)
    return tape.backward(target, wrt=["x"])["x"]


def st_gradcam(w: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Per-segment class response ``S @ w``."""
    w = np.asarray(w, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or w.shape != (S.shape[1],):
        raise ValueError(f"weights {w.shape} do not match features {S.shape}")
    return S @ w


def class_response(traces, params, S, t, c, recurrent=None) -> ClassResponse:
    w = class_weights(traces, params, t, c, recurrent)
    return ClassResponse(t, c, st_gradcam(w, S), w)


def fuse_attention(alpha_rgb: np.ndarray, alpha_flow: np.ndarray, lam: float = 0.5) -> np.ndarray:
    alpha_rgb = np.asarray(alpha_rgb, dtype=np.float64)
    alpha_flow = np.asarray(alpha_flow, dtype=np.float64)
    if alpha_rgb.shape != alpha_flow.shape:
        raise ValueError(f"attention lengths differ: {alpha_rgb.shape} vs {alpha_flow.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    mixed = lam * alpha_rgb + (1.0 - lam) * alpha_flow
    return np.where(alpha_rgb == alpha_flow, alpha_rgb, mixed)  # exact where the streams agree


def runs_above(signal: np.ndarray, thresh: float) -> list[tuple[int, int]]:
    """Maximal runs of consecutive indices with ``signal > thresh`` (inclusive ends)."""
    above = np.concatenate([[False], np.asarray(signal) > thresh, [False]])
    edges = np.flatnonzero(above[1:] != above[:-1])
    return [(int(a), int(b) - 1) for a, b in zip(edges[::2], edges[1::2])]


def generate_proposals(fused_alpha: np.ndarray, xi: np.ndarray,
                       thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                       cls: int = 0, step: int = 0, stream: str = "fused") -> list[Proposal]:
    """Threshold the attended response and score each run by its mean.

    Runs found at several thresholds appear once.
    """
    fused_alpha = np.asarray(fused_alpha, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    if fused_alpha.shape != xi.shape:
        raise ValueError(f"attention {fused_alpha.shape} vs response {xi.shape}")
    signal = fused_alpha * _sigmoid(xi)
    spans: dict[tuple[int, int], float] = {}
    for th in thresholds:
        for a, b in runs_above(signal, th):
            score = float(signal[a:b + 1].sum() / (b - a + 1))
            spans[(a, b)] = max(score, spans.get((a, b), -np.inf))
    return [Proposal(cls, a, b, s, step, stream) for (a, b), s in sorted(spans.items())]


def segment_iou(a: Proposal, b: Proposal) -> float:
    """IoU of inclusive segment ranges, i.e. of [start, end + 1)."""
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    union = (a.end - a.start + 1) + (b.end - b.start + 1) - inter
    return inter / union


def _rank_key(p: Proposal):
    return (-p.score, p.start, p.cls)


def nms(proposals: Sequence[Proposal], iou_thresh: float = DEFAULT_NMS_IOU) -> list[Proposal]:
    """Greedy same-class suppression; kept proposals come out by descending score."""
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in (0, 1]")
    kept: dict[int, list[Proposal]] = {}
    out = []
    for p in sorted(proposals, key=_rank_key):
        same = kept.setdefault(p.cls, [])
        if all(segment_iou(p, q) <= iou_thresh for q in same):
            same.append(p)
            out.append(p)
    return out


@dataclass
class Detection:
    video_id: str
    cls: int
    start: float  # seconds
    end: float
    score: float


def localize(traces: Mapping[str, Sequence[StepTrace]], params: Mapping[str, ModelParams],
             streams: Mapping[str, np.ndarray], labels: Sequence[int], probs: Sequence[np.ndarray],
             end_class: int, lam: float = 0.5, thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
             nms_iou: float = DEFAULT_NMS_IOU, signal: str = "attended",
             rng: np.random.Generator | None = None) -> list[Proposal]:
    """Proposals for every non-END label emitted by a joint decode, after NMS.

    Attention is fused across streams with RGB share ``lam``; candidates are
    then generated once per stream with that stream's class response.  Final
    scores are proposal score times the step's fused class probability.

    ``signal`` selects the localisation signal: ``attended`` (default),
    ``attention`` (responses ignored), ``gradcam`` (attention ignored) or
    ``random`` (uniform noise in place of the response; needs ``rng``).
    """
    names = list(traces)
    cands: list[Proposal] = []
    for t, c in enumerate(labels):
        if c == end_class:
            continue
        if len(names) == 1:
            fused = traces[names[0]][t].alpha
        else:
            fused = fuse_attention(traces["rgb"][t].alpha, traces["flow"][t].alpha, lam)
        conf = float(probs[t][c])
        for s in names:
            if signal == "random":
                sig_alpha = np.ones_like(fused)
                u = rng.random(fused.shape)
                xi = np.log(u) - np.log1p(-u)  # sigmoid(xi) == u
            else:
                w = class_weights(traces[s], params[s], t, c)
                xi = st_gradcam(w, streams[s])
                sig_alpha = fused
                if signal == "attention":
                    xi = np.full_like(xi, 50.0)  # sigmoid == 1
                elif signal == "gradcam":
                    sig_alpha = np.ones_like(fused)
                elif signal != "attended":
                    raise ValueError(f"unknown signal {signal!r}")
            for p in generate_proposals(sig_alpha, xi, thresholds, c, t, s):
                cands.append(Proposal(p.cls, p.start, p.end, p.score * conf, t, s))
    return nms(cands, nms_iou)
