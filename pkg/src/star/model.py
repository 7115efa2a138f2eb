"""The per-stream STAR network: sigmoid attention assembly with coverage gating
and a repetition head, followed by an LSTM label generator."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .engine import Node, Tape

CKPT_MAGIC = b"STARCKPT1"

PARAM_NAMES = ("W_alpha", "U_alpha", "v_alpha", "Z", "u_cov", "w_r", "W_x", "W_h", "b", "W_o")


@dataclass(frozen=True)
class ModelDims:
    N: int  # segments
    K: int  # feature dim
    H: int  # hidden dim
    A: int  # attention dim
    C: int  # classes, including END

    def __post_init__(self):
        for f in ("N", "K", "H", "A", "C"):
            v = getattr(self, f)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ValueError(f"ModelDims.{f} must be a positive integer, got {v!r}")
        if self.C < 2:
            raise ValueError("ModelDims.C must leave room for at least one action class plus END")

    @property
    def end(self) -> int:
        return self.C - 1

    @property
    def lstm_in(self) -> int:
        return self.K + self.C + 1

    def param_shapes(self) -> dict[str, tuple]:
        N, K, H, A, C = self.N, self.K, self.H, self.A, self.C
        return {
            "W_alpha": (A, H),
            "U_alpha": (A, K),
            "v_alpha": (A,),
            "Z": (N,),
            "u_cov": (H,),
            "w_r": (),
            "W_x": (4 * H, self.lstm_in),
            "W_h": (4 * H, H),
            "b": (4 * H,),
            "W_o": (C, H),
        }


@dataclass
class ModelParams:
    dims: ModelDims
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = self.dims.param_shapes()
        if set(self.tensors) != set(shapes):
            raise ValueError(f"parameter names {sorted(self.tensors)} != {sorted(shapes)}")
        for k, shape in shapes.items():
            arr = np.asarray(self.tensors[k], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{k}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{k}: non-finite values")
            self.tensors[k] = arr

    def __getitem__(self, key):
        return self.tensors[key]

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.tensors.items()})

    @classmethod
    def zeros(cls, dims: ModelDims) -> "ModelParams":
        return cls(dims, {k: np.zeros(s) for k, s in dims.param_shapes().items()})


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, LSTM forget-gate bias 1.

    ``Z`` and ``w_r`` start at zero as well: both scale quantities that are
    far from unit size (segment positions up to N, attention mass up to N), so
    random draws at Glorot scale would saturate the coverage gate and put the
    repetition head many counts away from its targets.
    """
    rng = np.random.default_rng(seed)
    H = dims.H
    tensors = {}
    for name, shape in dims.param_shapes().items():
        if name in ("b", "Z", "w_r"):
            tensors[name] = np.zeros(shape)
            continue
        if len(shape) == 2:
            fan_out, fan_in = shape
        else:
            fan_in, fan_out = shape[0], 1
        r = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-r, r, size=shape)
    tensors["b"][H:2 * H] = 1.0
    return ModelParams(dims, tensors)


@dataclass
class ModelOptions:
    use_coverage: bool = True
    use_ram: bool = True


@dataclass
class StepTrace:
    alpha: np.ndarray
    cov: np.ndarray
    energy_hat: np.ndarray
    x: np.ndarray
    ram: float
    h: np.ndarray
    cell: np.ndarray
    logits: np.ndarray
    y_prob: np.ndarray
    y_prev: int
    h_prev: np.ndarray
    cell_prev: np.ndarray
    nodes: dict[str, Node] = field(default_factory=dict, repr=False)


def bind_params(tape: Tape, params: ModelParams, prefix: str = "",
                requires_grad: bool = True) -> dict[str, Node]:
    return {k: tape.var(prefix + k, v, requires_grad=requires_grad)
            for k, v in params.tensors.items()}


def project_segments(tape: Tape, S: Node, p: Mapping[str, Node]) -> Node:
    """U_alpha s_i for every segment, as an N x A matrix (step-invariant)."""
    return tape.matmul(S, p["U_alpha"], transpose_b=True)


def attention_step(tape: Tape, S: Node, h_prev: Node, alpha_prev: Node, p: Mapping[str, Node],
                   proj: Node | None = None, opts: ModelOptions | None = None) -> dict[str, Node]:
    """One assembly step; returns nodes ``alpha, cov, energy_hat, x, ram``."""
    opts = opts or ModelOptions()
    N = S.shape[0]
    if proj is None:
        proj = project_segments(tape, S, p)
    pre = tape.add(proj, tape.matmul(p["W_alpha"], h_prev))
    energy = tape.matmul(tape.tanh(pre), p["v_alpha"])
    if opts.use_coverage:
        pos = tape.const(np.arange(1, N + 1, dtype=np.float64))
        centroid = tape.matmul(alpha_prev, pos)
        offset = tape.sub(pos, centroid)
        gate_in = tape.add(tape.mul(p["Z"], offset), tape.matmul(p["u_cov"], h_prev))
        cov = tape.sigmoid(gate_in)
        energy_hat = tape.mul(cov, energy)
    else:
        cov = tape.const(np.ones(N))
        energy_hat = energy
    alpha = tape.sigmoid(energy_hat)
    x = tape.matmul(alpha, S)
    if opts.use_ram:
        ram = tape.mul(p["w_r"], tape.sum(alpha))
    else:
        ram = tape.const(0.0)
    return {"alpha": alpha, "cov": cov, "energy_hat": energy_hat, "x": x, "ram": ram}


def lstm_cell(tape: Tape, inp: Node, h_prev: Node, cell_prev: Node,
              p: Mapping[str, Node]) -> tuple[Node, Node]:
    H = h_prev.shape[0]
    gates = tape.add(tape.add(tape.matmul(p["W_x"], inp), tape.matmul(p["W_h"], h_prev)), p["b"])
    i = tape.sigmoid(tape.slice(gates, slice(0, H)))
    f = tape.sigmoid(tape.slice(gates, slice(H, 2 * H)))
    g = tape.tanh(tape.slice(gates, slice(2 * H, 3 * H)))
    o = tape.sigmoid(tape.slice(gates, slice(3 * H, 4 * H)))
    cell = tape.add(tape.mul(f, cell_prev), tape.mul(i, g))
    h = tape.mul(o, tape.tanh(cell))
    return h, cell


def onehot(index: int, size: int) -> np.ndarray:
    v = np.zeros(size)
    v[index] = 1.0
    return v


def recurrent_step(tape: Tape, h_prev: Node, cell_prev: Node, y_prev: int, x: Node, ram: Node,
                   p: Mapping[str, Node]) -> dict[str, Node]:
    C = p["W_o"].shape[0]
    if not 0 <= y_prev < C:
        raise ValueError(f"previous label {y_prev} outside [0, {C})")
    inp = tape.concat([x, tape.const(onehot(y_prev, C)), ram])
    h, cell = lstm_cell(tape, inp, h_prev, cell_prev, p)
    logits = tape.matmul(p["W_o"], h)
    return {"h": h, "cell": cell, "logits": logits, "y_prob": tape.softmax(logits)}


@dataclass
class Unroll:
    traces: dict[str, list[StepTrace]]
    labels: list[int]        # fed/emitted label per step
    probs: list[np.ndarray]  # fused class distribution per step
    truncated: bool
    tape: Tape
    param_nodes: dict[str, dict[str, Node]]


def unroll(streams: Mapping[str, np.ndarray] | np.ndarray,
           params: Mapping[str, ModelParams] | ModelParams,
           labels: list[int] | None = None, t_max: int | None = None,
           opts: ModelOptions | None = None, tape: Tape | None = None,
           requires_grad: bool = False, stream_weights: Mapping[str, float] | None = None,
           feature_transform: Callable[[str, np.ndarray], np.ndarray] | None = None,
           param_nodes: Mapping[str, Mapping[str, Node]] | None = None) -> Unroll:
    """Run the recurrent assembler over one video.

    With ``labels`` each stream is teacher forced independently.  Without,
    decoding is greedy on the stream-fused class distribution (equal weights
    by default) and every stream is fed the same emitted label; decoding
    stops after the first END or after ``t_max`` steps (``truncated`` set).

    ``param_nodes`` reuses parameters already bound on ``tape`` (several videos
    sharing one graph); otherwise they are bound here under ``<stream>.`` names.
    """
    if isinstance(streams, np.ndarray):
        streams = {"rgb": streams}
    if isinstance(params, ModelParams):
        params = {name: params for name in streams}
    names = list(streams)
    dims = params[names[0]].dims
    end = dims.end
    t_max = dims.C if t_max is None else t_max
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    if labels is not None:
        if len(labels) == 0:
            raise ValueError("empty label sequence")
        if labels[-1] != end:
            raise ValueError("label sequence must end with END")
        if len(labels) > t_max:
            raise ValueError(f"label sequence of length {len(labels)} exceeds t_max={t_max}")
        for y in labels:
            if not 0 <= y < dims.C:
                raise ValueError(f"label {y} outside [0, {dims.C})")
    if stream_weights is None:
        stream_weights = {s: 1.0 / len(names) for s in names}
    tape = tape or Tape()

    state = {}
    pnodes = {}
    for s in names:
        sp = params[s]
        if sp.dims != dims:
            raise ValueError("all streams must share ModelDims")
        feats = np.asarray(streams[s], dtype=np.float64)
        if feats.shape != (dims.N, dims.K):
            raise ValueError(f"stream {s!r}: features {feats.shape}, expected {(dims.N, dims.K)}")
        if feature_transform is not None:
            feats = feature_transform(s, feats)
        if param_nodes is not None:
            p = param_nodes[s]
        else:
            p = bind_params(tape, sp, f"{s}.", requires_grad)
        S = tape.const(feats)
        pnodes[s] = p
        state[s] = {
            "S": S, "proj": project_segments(tape, S, p),
            "h": tape.const(np.zeros(dims.H)), "cell": tape.const(np.zeros(dims.H)),
            "alpha": tape.const(np.zeros(dims.N)),
        }

    traces: dict[str, list[StepTrace]] = {s: [] for s in names}
    fed: list[int] = []
    probs: list[np.ndarray] = []
    y_prev = end
    truncated = False
    steps = len(labels) if labels is not None else t_max
    for t in range(steps):
        fused = np.zeros(dims.C)
        for s in names:
            st = state[s]
            p = pnodes[s]
            att = attention_step(tape, st["S"], st["h"], st["alpha"], p, st["proj"], opts)
            rec = recurrent_step(tape, st["h"], st["cell"], y_prev, att["x"], att["ram"], p)
            nodes = {**att, **rec}
            traces[s].append(StepTrace(
                alpha=att["alpha"].value, cov=att["cov"].value,
                energy_hat=att["energy_hat"].value, x=att["x"].value,
                ram=float(att["ram"].value), h=rec["h"].value, cell=rec["cell"].value,
                logits=rec["logits"].value, y_prob=rec["y_prob"].value,
                y_prev=y_prev, h_prev=st["h"].value, cell_prev=st["cell"].value, nodes=nodes))
            st["h"], st["cell"], st["alpha"] = rec["h"], rec["cell"], att["alpha"]
            fused = fused + stream_weights[s] * rec["y_prob"].value
        probs.append(fused)
        if labels is not None:
            y = labels[t]
        else:
            y = int(np.argmax(fused))  # first maximum: ties go to the lowest index
        fed.append(y)
        y_prev = y
        if labels is None and y == end:
            break
    else:
        if labels is None:
            truncated = True
    return Unroll(traces, fed, probs, truncated, tape, pnodes)


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

class CheckpointError(Exception):
    pass


def save_checkpoint(path: str | Path, dims: ModelDims, tensors: Mapping[str, np.ndarray]) -> None:
    """Binary layout: magic, dims (5 x u64), tensor count (u64), then per tensor
    name length (u64), utf-8 name, ndim (u64), extents (u64 each), float64 LE data."""
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<5Q", dims.N, dims.K, dims.H, dims.A, dims.C)
    buf += struct.pack("<Q", len(tensors))
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f8", order="C")
        raw = name.encode()
        buf += struct.pack("<Q", len(raw)) + raw
        buf += struct.pack("<Q", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[ModelDims, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    off = len(CKPT_MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte offset {off}")
        chunk = data[off:off + n]
        off += n
        return chunk

    dims = ModelDims(*struct.unpack("<5Q", take(40)))
    (count,) = struct.unpack("<Q", take(8))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<Q", take(8))
        name = take(n).decode()
        (ndim,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = arr
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes at offset {off}")
    return dims, tensors


def split_streams(tensors: Mapping[str, np.ndarray], dims: ModelDims,
                  streams=("rgb", "flow")) -> dict[str, ModelParams]:
    out = {}
    for s in streams:
        sub = {k[len(s) + 1:]: v for k, v in tensors.items() if k.startswith(s + ".")}
        if sub:
            out[s] = ModelParams(dims, sub)
    if not out:
        raise CheckpointError("checkpoint holds no stream parameters")
    return out
