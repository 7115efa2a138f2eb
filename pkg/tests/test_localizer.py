import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_nms, brute_runs, set_iou
from star.engine import Tape
from star.localizer import (Proposal, class_response, class_weights, fuse_attention,
                            generate_proposals, localize, nms, runs_above, segment_iou,
                            st_gradcam)
from star.model import ModelDims, ModelParams, bind_params, init_params, recurrent_step, unroll

DIMS = ModelDims(N=10, K=4, H=5, A=3, C=4)


def _model(seed=0, dims=DIMS):
    rng = np.random.default_rng(seed)
    base = init_params(dims, seed)
    return ModelParams(dims, {k: v + 0.4 * rng.normal(size=v.shape) for k, v in base.tensors.items()})


def _traces(seed=0, labels=(1, 2, 3)):
    params = _model(seed)
    S = np.random.default_rng(seed + 50).normal(size=(DIMS.N, DIMS.K))
    return params, S, unroll(S, params, labels=list(labels)).traces["rgb"]


def test_identity_surrogate_gives_output_row():
    dims = ModelDims(N=6, K=4, H=4, A=2, C=3)
    params = _model(1, dims)
    S = np.random.default_rng(1).normal(size=(6, 4))
    traces = unroll(S, params, labels=[0, dims.end]).traces["rgb"]

    def linear(tape, h_prev, cell_prev, y_prev, x, ram, p):
        return tape.matmul(p["W_o"], x)  # h = x

    for c in range(dims.C):
        w = class_weights(traces, params, 1, c, recurrent=linear)
        assert np.array_equal(w, params["W_o"][c])


@pytest.mark.parametrize("t,c", [(0, 0), (1, 3), (2, 1)])
def test_weights_match_finite_differences(t, c):
    params, S, traces = _traces(2)
    tr = traces[t]
    w = class_weights(traces, params, t, c)

    def logit(x):
        tape = Tape()
        p = bind_params(tape, params, requires_grad=False)
        out = recurrent_step(tape, tape.const(tr.h_prev), tape.const(tr.cell_prev), tr.y_prev,
                             tape.const(x), tape.const(tr.ram), p)
        return float(out["logits"].value[c])

    h = 1e-5
    num = np.array([(logit(tr.x + h * e) - logit(tr.x - h * e)) / (2 * h) for e in np.eye(DIMS.K)])
    rel = np.abs(w - num) / np.maximum(np.maximum(np.abs(w), np.abs(num)), 1e-8)
    assert rel.max() <= 1e-6


def test_weights_defined_without_attention():
    params, S, traces = _traces(3)
    tr = traces[0]
    tr.x = np.zeros_like(tr.x)
    tr.alpha = np.zeros_like(tr.alpha)
    w = class_weights(traces, params, 0, 1)
    assert np.all(np.isfinite(w))


def test_weights_index_errors():
    params, S, traces = _traces(0)
    with pytest.raises(IndexError):
        class_weights(traces, params, 3, 0)
    with pytest.raises(IndexError):
        class_weights(traces, params, 0, DIMS.C)


def test_gradcam_values():
    S = np.random.default_rng(0).normal(size=(7, 3))
    assert np.array_equal(st_gradcam(np.zeros(3), S), np.zeros(7))
    w = np.array([0.5, -1.0, 2.0])
    xi = st_gradcam(w, S)
    for i in range(7):
        assert xi[i] == pytest.approx(sum(w[k] * S[i, k] for k in range(3)), abs=1e-15)
    with pytest.raises(ValueError):
        st_gradcam(np.zeros(2), S)


def test_class_response_identity():
    params, S, traces = _traces(4)
    r = class_response(traces, params, S, 1, 2)
    lhs = float(traces[1].alpha @ r.xi)
    rhs = float(r.w @ traces[1].x)
    assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(rhs))


def test_fuse_attention():
    a = np.array([0.2, 0.9])
    b = np.array([0.6, 0.1])
    assert np.array_equal(fuse_attention(a, a, 0.3), a)
    assert np.array_equal(fuse_attention(a, b, 1.0), a)
    assert np.allclose(fuse_attention(a, b), [0.4, 0.5])
    with pytest.raises(ValueError):
        fuse_attention(a, np.ones(3))
    with pytest.raises(ValueError):
        fuse_attention(a, b, 1.2)


def test_constant_block_proposal():
    alpha = np.zeros(12)
    alpha[3:8] = 0.8
    xi = np.full(12, -50.0)
    xi[3:8] = 0.0
    props = generate_proposals(alpha, xi, [0.2])
    assert [(p.start, p.end) for p in props] == [(3, 7)]
    assert props[0].score == pytest.approx(0.4, abs=1e-15)


def test_zero_signal_gives_nothing():
    assert generate_proposals(np.zeros(8), np.zeros(8)) == []


def test_dedup_keeps_max_score():
    alpha = np.array([0.0, 0.9, 0.9, 0.0])
    xi = np.full(4, 50.0)
    props = generate_proposals(alpha, xi, [0.1, 0.2, 0.5])
    assert len(props) == 1 and props[0].score == pytest.approx(0.9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=20),
       st.sampled_from([0.1, 0.2, 0.3, 0.4, 0.5]))
def test_runs_match_brute_force(signal, th):
    assert runs_above(np.array(signal), th) == brute_runs(signal, th)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_proposals_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    alpha = rng.uniform(0, 1, 20)
    xi = rng.normal(scale=3, size=20)
    thresholds = (0.1, 0.2, 0.3, 0.4, 0.5)
    sig = [a / (1 + np.exp(-x)) for a, x in zip(alpha, xi)]
    want = set()
    for th in thresholds:
        want |= set(brute_runs(sig, th))
    props = generate_proposals(alpha, xi, thresholds)
    assert {(p.start, p.end) for p in props} == want
    for p in props:
        assert p.score == pytest.approx(np.mean(sig[p.start:p.end + 1]), rel=1e-12)
        assert 0 < p.score < 1
    # refinement across thresholds
    for lo, hi in zip(thresholds[:-1], thresholds[1:]):
        for a, b in brute_runs(sig, hi):
            assert any(c <= a and b <= d for c, d in brute_runs(sig, lo))


def test_nms_basics():
    one = Proposal(0, 2, 5, 0.7)
    assert nms([one], 0.5) == [one]
    a, b = Proposal(0, 2, 5, 0.9), Proposal(0, 2, 5, 0.8)
    assert nms([b, a], 0.5) == [a]
    other = Proposal(1, 2, 5, 0.8)
    assert nms([b, a, other], 0.5) == [a, other]
    with pytest.raises(ValueError):
        nms([a], 0.0)


def test_segment_iou_inclusive():
    assert segment_iou(Proposal(0, 0, 1, 1), Proposal(0, 1, 2, 1)) == pytest.approx(1 / 3)
    assert segment_iou(Proposal(0, 0, 0, 1), Proposal(0, 1, 1, 1)) == 0.0


def random_proposals(rng, n, N=30, classes=3):
    out = []
    for _ in range(n):
        a = int(rng.integers(0, N))
        b = int(rng.integers(a, min(N, a + 12)))
        out.append(Proposal(int(rng.integers(0, classes)), a, b, float(rng.choice([0.3, 0.5, rng.random()]))))
    return out


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([0.2, 0.4, 0.5, 0.7, 1.0]))
def test_nms_matches_brute_force(seed, th):
    rng = np.random.default_rng(seed)
    props = random_proposals(rng, int(rng.integers(1, 50)))
    kept = nms(props, th)
    want = brute_nms([(p.cls, p.start, p.end, p.score) for p in props], th)
    assert [(p.cls, p.start, p.end, p.score) for p in kept] == want
    for i, p in enumerate(kept):
        for q in kept[:i]:
            assert q.score >= p.score
            if q.cls == p.cls:
                assert set_iou((p.start, p.end), (q.start, q.end)) <= th


def test_localize_skips_end_and_scales_by_confidence():
    params = {"rgb": _model(5), "flow": _model(6)}
    rng = np.random.default_rng(5)
    streams = {s: rng.normal(size=(DIMS.N, DIMS.K)) for s in params}
    un = unroll(streams, params, labels=[1, DIMS.end])
    props = localize(un.traces, params, streams, un.labels, un.probs, DIMS.end, nms_iou=1.0)
    assert props and all(p.cls == 1 and p.step == 0 for p in props)
    fused = fuse_attention(un.traces["rgb"][0].alpha, un.traces["flow"][0].alpha)
    conf = un.probs[0][1]
    for s in params:
        w = class_weights(un.traces[s], params[s], 0, 1)
        raw = generate_proposals(fused, st_gradcam(w, streams[s]), cls=1)
        mine = sorted((p.start, p.end, p.score) for p in props if p.stream == s)
        assert mine == sorted((p.start, p.end, p.score * conf) for p in raw)


def test_localize_signal_variants():
    params = {"rgb": _model(7)}
    streams = {"rgb": np.random.default_rng(7).normal(size=(DIMS.N, DIMS.K))}
    un = unroll(streams, params, labels=[2, DIMS.end])
    args = (un.traces, params, streams, un.labels, un.probs, DIMS.end)
    for sig in ("attended", "attention", "gradcam"):
        assert all(0 < p.score < 1 for p in localize(*args, signal=sig))
    a = localize(*args, signal="random", rng=np.random.default_rng(1))
    b = localize(*args, signal="random", rng=np.random.default_rng(1))
    assert a == b
    with pytest.raises(ValueError):
        localize(*args, signal="nope")
