"""Training and inference loops shared by the CLI and the acceptance suite."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataio import VideoRecord
from .engine import NonFiniteError
from .localizer import DEFAULT_NMS_IOU, DEFAULT_THRESHOLDS, Detection, Proposal, localize
from .model import (ModelDims, ModelOptions, ModelParams, init_params, load_checkpoint,
                    save_checkpoint, split_streams, unroll)
from .objective import AdamState, Hyperparams, LossBreakdown, Sample, adam_step, \
    clip_by_global_norm, total_loss

log = logging.getLogger(__name__)

LOSS_FIELDS = ["step", "class_loss", "sparsity_loss", "cov_loss", "ram_loss", "total"]


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"non-finite loss at step {step}{': ' + detail if detail else ''}")
        self.step = step


@dataclass
class TrainState:
    params: dict[str, ModelParams]
    adam: AdamState
    step: int = 0
    history: list[LossBreakdown] = field(default_factory=list)

    @property
    def dims(self) -> ModelDims:
        return next(iter(self.params.values())).dims

    def flat_tensors(self) -> dict[str, np.ndarray]:
        return {f"{s}.{k}": v for s, p in self.params.items() for k, v in p.tensors.items()}

    def checkpoint_tensors(self) -> dict[str, np.ndarray]:
        out = self.flat_tensors()
        for k in self.adam.m:
            out[f"adam.m.{k}"] = self.adam.m[k]
            out[f"adam.v.{k}"] = self.adam.v[k]
        out["meta.step"] = np.asarray(float(self.step))
        out["meta.adam_t"] = np.asarray(float(self.adam.t))
        return out

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.dims, self.checkpoint_tensors())

    @classmethod
    def load(cls, path: str | Path, streams: Sequence[str] = ("rgb", "flow")) -> "TrainState":
        dims, tensors = load_checkpoint(path)
        params = split_streams(tensors, dims, streams)
        flat = {f"{s}.{k}": v for s, p in params.items() for k, v in p.tensors.items()}
        m = {k: tensors[f"adam.m.{k}"] for k in flat if f"adam.m.{k}" in tensors}
        v = {k: tensors[f"adam.v.{k}"] for k in flat if f"adam.v.{k}" in tensors}
        t = int(tensors.get("meta.adam_t", np.asarray(0.0)))
        step = int(tensors.get("meta.step", np.asarray(0.0)))
        adam = AdamState(m, v, t) if len(m) == len(flat) else AdamState()
        return cls(params, adam, step)


def fresh_state(dims: ModelDims, seed: int, streams: Sequence[str] = ("rgb", "flow")) -> TrainState:
    params = {s: init_params(dims, seed * 1000 + j) for j, s in enumerate(streams)}
    return TrainState(params, AdamState())


def samples_for(videos: Sequence[VideoRecord], stream: str) -> list[Sample]:
    return [Sample(v.features[stream], v.annotation.weak_labels,
                   [float(c) for c in v.annotation.counts]) for v in videos]


def train(videos: Sequence[VideoRecord], state: TrainState, hp: Hyperparams, max_steps: int,
          seed: int = 0, opts: ModelOptions | None = None,
          on_step: Callable[[int, LossBreakdown], None] | None = None,
          checkpoint: str | Path | None = None, checkpoint_every: int = 100) -> TrainState:
    """Adam on the batch-mean loss of every stream until ``state.step == max_steps``.

    Batches are drawn from per-epoch permutations seeded by ``(seed, epoch)``,
    so a resumed run sees the same batches as an uninterrupted one.
    """
    if not videos:
        raise ValueError("no training videos")
    streams = list(state.params)
    n = len(videos)
    bs = min(hp.batch_size, n)
    per_epoch = max(n // bs, 1)
    while state.step < max_steps:
        epoch, pos = divmod(state.step, per_epoch)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        batch_videos = [videos[i] for i in perm[pos * bs:(pos + 1) * bs]]
        drop_rng = np.random.default_rng([seed, epoch, pos, 1]) if hp.dropout > 0 else None
        grads = {}
        parts = []
        for s in streams:
            try:
                br, g = total_loss(samples_for(batch_videos, s), state.params[s], hp, opts,
                                   with_grads=True, rng=drop_rng)
            except NonFiniteError as exc:
                raise NonFiniteLoss(state.step, str(exc)) from None
            if not np.isfinite(br.total):
                raise NonFiniteLoss(state.step)
            parts.append(br)
            grads.update({f"{s}.{k}": v for k, v in g.items()})
        if hp.clip_norm is not None:
            clip_by_global_norm(grads, hp.clip_norm)
        flat = state.flat_tensors()
        adam_step(flat, grads, state.adam, hp)
        mean = LossBreakdown(*np.mean([p.row() for p in parts], axis=0).tolist(),
                             weights=(hp.beta, hp.gamma, hp.delta))
        state.history.append(mean)
        if on_step is not None:
            on_step(state.step, mean)
        state.step += 1
        if checkpoint is not None and (state.step % checkpoint_every == 0 or state.step == max_steps):
            state.save(checkpoint)
    return state


@dataclass
class VideoResult:
    video_id: str
    labels: list[int]              # emitted labels, END included when reached
    probs: list[np.ndarray]
    rams: list[float]              # stream-averaged repetition value per step
    proposals: list[Proposal]
    detections: list[Detection]
    truncated: bool

    @property
    def predicted_classes(self) -> list[int]:
        return sorted(set(self.labels[:-1] if not self.truncated else self.labels))


def infer_video(rec: VideoRecord, params: Mapping[str, ModelParams], lam: float = 0.5,
                thresholds: Sequence[float] = DEFAULT_THRESHOLDS, nms_iou: float = DEFAULT_NMS_IOU,
                opts: ModelOptions | None = None, t_max: int | None = None,
                signal: str = "attended", rng: np.random.Generator | None = None) -> VideoResult:
    streams = {s: rec.features[s] for s in params}
    dims = next(iter(params.values())).dims
    un = unroll(streams, dict(params), t_max=t_max, opts=opts)
    end = dims.end
    props = localize(un.traces, params, streams, un.labels, un.probs, end, lam, thresholds,
                     nms_iou, signal=signal, rng=rng)
    dets = []
    for p in props:
        start, stop = rec.segments_to_seconds(p.start, p.end)
        dets.append(Detection(rec.id, p.cls, start, stop, p.score))
    rams = [float(np.mean([un.traces[s][t].ram for s in un.traces])) for t in range(len(un.labels))]
    return VideoResult(rec.id, un.labels, un.probs, rams, props, dets, un.truncated)


def infer(videos: Sequence[VideoRecord], params: Mapping[str, ModelParams], **kw) -> list[VideoResult]:
    return [infer_video(v, params, **kw) for v in videos]


def exact_set_accuracy(results: Sequence[VideoResult], videos: Sequence[VideoRecord]) -> float:
    gt = {v.id: sorted({i.cls for i in v.annotation.instances}) for v in videos}
    hits = sum(r.predicted_classes == gt[r.video_id] for r in results)
    return hits / max(len(results), 1)


def write_loss_row(path: Path, step: int, br: LossBreakdown) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(LOSS_FIELDS)
        w.writerow([step] + [repr(float(x)) for x in br.row()])
