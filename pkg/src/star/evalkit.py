"""Interval IoU, non-interpolated average precision, mAP and action density."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataio import GtInstance
from .localizer import Detection

DEFAULT_IOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)
N_DENSITY_BUCKETS = 10


def interval_iou(a: Sequence[float], b: Sequence[float]) -> float:
    if not (a[0] < a[1] and b[0] < b[1]):
        raise ValueError(f"degenerate interval in {a} / {b}")
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    return inter / ((a[1] - a[0]) + (b[1] - b[0]) - inter)


def average_precision(detections: Sequence[Detection], gts: Sequence[GtInstance],
                      iou_thresh: float) -> float:
    """Sum of precision at each true positive, divided by the number of GT.

    Detections are ranked by descending score (stable).  A detection is a true
    positive when some unmatched GT of its video reaches ``iou_thresh``; the
    best-overlapping such GT is consumed.
    """
    if not gts:
        raise ValueError("average precision is undefined without ground truth")
    by_video: dict[str, list[GtInstance]] = {}
    for g in gts:
        by_video.setdefault(g.video_id, []).append(g)
    used = {v: np.zeros(len(g), dtype=bool) for v, g in by_video.items()}
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    tp = 0
    ap = 0.0
    for rank, i in enumerate(order, start=1):
        d = detections[i]
        cands = by_video.get(d.video_id, [])
        best, best_iou = -1, -1.0
        for j, g in enumerate(cands):
            if used[d.video_id][j]:
                continue
            iou = interval_iou((d.start, d.end), (g.start, g.end))
            if iou >= iou_thresh and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            used[d.video_id][best] = True
            tp += 1
            ap += tp / rank
    return ap / len(gts)


@dataclass
class EvalReport:
    thresholds: list[float]
    ap: dict[int, dict[float, float]]            # class -> threshold -> AP
    map: dict[float, float]                      # threshold -> mAP
    ave_map: float
    density_buckets: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "mAP": {f"{t:g}": self.map[t] for t in self.thresholds},
            "ave_mAP": self.ave_map,
            "density_buckets": self.density_buckets,
        }

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class"] + [f"AP@{t:g}" for t in self.thresholds])
            for c in sorted(self.ap):
                w.writerow([c] + [repr(self.ap[c][t]) for t in self.thresholds])
            w.writerow(["mAP"] + [repr(self.map[t]) for t in self.thresholds])
        json_path = out_dir / f"{stem}.json"
        json_path.write_text(json.dumps(self.summary(), indent=1, sort_keys=True))
        return csv_path, json_path


def _map_core(detections: Sequence[Detection], gts: Sequence[GtInstance],
              thresholds: Sequence[float]):
    classes = sorted({g.cls for g in gts})
    det_by_cls: dict[int, list[Detection]] = {}
    for d in detections:
        det_by_cls.setdefault(d.cls, []).append(d)
    skipped = sorted({d.cls for d in detections} - set(classes))
    if skipped:
        warnings.warn(f"classes {skipped} have no ground truth; excluded from mAP", stacklevel=3)
    ap = {c: {} for c in classes}
    maps = {}
    for t in thresholds:
        for c in classes:
            ap[c][t] = average_precision(det_by_cls.get(c, []),
                                         [g for g in gts if g.cls == c], t)
        maps[t] = float(np.mean([ap[c][t] for c in classes])) if classes else 0.0
    ave = float(np.mean([maps[t] for t in thresholds]))
    return ap, maps, ave


def mean_ap(detections: Sequence[Detection], gts: Sequence[GtInstance],
            thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS,
            densities: Mapping[str, float] | None = None) -> EvalReport:
    """Per-class AP at every IoU threshold, their means, and the mean over thresholds.

    With ``densities`` (video id -> action density) the report also breaks
    mAP down over ten uniform density buckets.
    """
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ValueError("need at least one IoU threshold")
    ap, maps, ave = _map_core(detections, gts, thresholds)
    buckets = []
    if densities is not None:
        for b in range(N_DENSITY_BUCKETS):
            lo, hi = b / N_DENSITY_BUCKETS, (b + 1) / N_DENSITY_BUCKETS
            vids = {v for v, d in densities.items()
                    if lo <= d < hi or (b == N_DENSITY_BUCKETS - 1 and d == hi)}
            entry = {"lo": lo, "hi": hi, "videos": len(vids)}
            bgts = [g for g in gts if g.video_id in vids]
            if bgts:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    _, bm, bave = _map_core([d for d in detections if d.video_id in vids],
                                            bgts, thresholds)
                entry.update({"mAP": {f"{t:g}": bm[t] for t in thresholds}, "ave_mAP": bave})
            buckets.append(entry)
    return EvalReport(thresholds, ap, maps, ave, buckets)


def action_density(gts: Iterable[GtInstance] | Iterable[Sequence[float]], duration: float) -> float:
    """Length of the union of GT intervals over the video duration."""
    if not duration > 0:
        raise ValueError("duration must be positive")
    spans = sorted((g.start, g.end) if isinstance(g, GtInstance) else (g[0], g[1]) for g in gts)
    total = 0.0
    cur_s = cur_e = None
    for s, e in spans:
        s, e = max(s, 0.0), min(e, duration)
        if e <= s:
            continue
        if cur_e is None or s > cur_e:
            if cur_e is not None:
                total += cur_e - cur_s
            cur_s, cur_e = s, e
        else:
            cur_e = max(cur_e, e)
    if cur_e is not None:
        total += cur_e - cur_s
    return min(total / duration, 1.0)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

DETECTION_FIELDS = ["video_id", "class_id", "start", "end", "score"]


class SchemaError(Exception):
    pass


def write_detections(path: str | Path, detections: Sequence[Detection]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTION_FIELDS)
        for d in detections:
            w.writerow([d.video_id, d.cls, f"{d.start:.3f}", f"{d.end:.3f}", repr(float(d.score))])


def read_detections(path: str | Path) -> list[Detection]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DETECTION_FIELDS:
            raise SchemaError(f"{path}: header {header}, expected {DETECTION_FIELDS}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(DETECTION_FIELDS):
                raise SchemaError(f"{path}:{lineno}: expected {len(DETECTION_FIELDS)} fields")
            try:
                out.append(Detection(row[0], int(row[1]), float(row[2]), float(row[3]),
                                     float(row[4])))
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
    return out
