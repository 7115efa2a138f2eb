import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from star.dataio import (DataError, GtInstance, SynthConfig, derive_weak_labels, entry_checksum,
                         load_features, make_prototypes, read_feature_file, save_features,
                         synthesize_dataset, write_feature_file)
from star.evalkit import action_density

SMALL = SynthConfig(n_train=6, n_test=3, seed=4)


def _same_records(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert (x.id, x.duration, x.segment_duration, x.split) == (y.id, y.duration, y.segment_duration, y.split)
        assert set(x.features) == set(y.features)
        for s in x.features:
            assert x.features[s].tobytes() == y.features[s].tobytes()
        assert x.annotation == y.annotation


def test_weak_labels_examples():
    inst = [GtInstance("v", 0, 1, 2), GtInstance("v", 1, 3, 4), GtInstance("v", 0, 5, 6)]
    assert derive_weak_labels(inst, 5) == ([0, 1, 5], [2, 1, 0])
    assert derive_weak_labels([GtInstance("v", 3, 0, 1)], 5) == ([3, 5], [1, 0])
    assert derive_weak_labels([], 5) == ([5], [0])
    with pytest.raises(ValueError):
        derive_weak_labels([GtInstance("v", 5, 0, 1)], 5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 4), max_size=12))
def test_counts_sum_to_instances(classes):
    inst = [GtInstance("v", c, float(i), float(i) + 1) for i, c in enumerate(classes)]
    labels, counts = derive_weak_labels(inst, 5)
    assert sum(counts) == len(classes)
    assert labels[-1] == 5 and counts[-1] == 0
    assert labels[:-1] == sorted(set(classes))
    assert all(counts[i] == classes.count(c) for i, c in enumerate(labels[:-1]))


def test_feature_file_round_trip_and_errors(tmp_path):
    arr = np.random.default_rng(0).normal(size=(7, 3))
    p = tmp_path / "f.bin"
    write_feature_file(p, arr)
    raw = p.read_bytes()
    assert raw[:9] == b"STARFEAT1" and len(raw) == 9 + 16 + 7 * 3 * 8
    assert read_feature_file(p).tobytes() == arr.tobytes()
    p.write_bytes(raw[:100])
    with pytest.raises(DataError, match=r"vid7.*offset 100"):
        read_feature_file(p, "vid7")
    p.write_bytes(raw[:12])
    with pytest.raises(DataError, match="offset 12"):
        read_feature_file(p, "vid7")
    bad = arr.copy()
    bad[2, 1] = np.nan
    write_feature_file(p, bad)
    with pytest.raises(DataError, match="vid7"):
        read_feature_file(p, "vid7")


def test_save_load_round_trip(tmp_path):
    ds = synthesize_dataset(SMALL)
    manifest = save_features(ds.train + ds.test, tmp_path)
    back = load_features(manifest, verify_checksum=True)
    _same_records(back, ds.train + ds.test)
    _same_records(load_features(tmp_path, split="test"), ds.test)


def test_manifest_contents_and_checksum(tmp_path):
    ds = synthesize_dataset(SMALL)
    manifest = save_features(ds.train, tmp_path)
    entries = json.loads(manifest.read_text())
    assert {"id", "duration", "segment_duration", "streams", "annotation"} <= set(entries[0])
    assert set(entries[0]["streams"]) == {"rgb", "flow"}
    for e in entries:
        assert e["checksum"] == entry_checksum(e, tmp_path)
    # tamper with one feature file
    f = tmp_path / entries[0]["streams"]["rgb"]
    data = bytearray(f.read_bytes())
    data[-1] ^= 1
    f.write_bytes(bytes(data))
    with pytest.raises(DataError, match=entries[0]["id"]):
        load_features(manifest, verify_checksum=True)


def test_empty_manifest(tmp_path):
    manifest = save_features([], tmp_path)
    assert json.loads(manifest.read_text()) == []
    assert load_features(manifest) == []


def test_missing_and_mismatched_files(tmp_path):
    ds = synthesize_dataset(SMALL)
    manifest = save_features(ds.train[:2], tmp_path)
    entries = json.loads(manifest.read_text())
    vid = entries[1]["id"]
    (tmp_path / entries[1]["streams"]["flow"]).unlink()
    with pytest.raises(DataError, match=vid):
        load_features(manifest)
    write_feature_file(tmp_path / entries[1]["streams"]["flow"], np.zeros((5, SMALL.K)))
    with pytest.raises(DataError, match=vid):
        load_features(manifest)
    with pytest.raises(DataError):
        load_features(tmp_path / "nope.json")


def test_long_videos_accepted(tmp_path):
    cfg = SynthConfig(N=400, n_train=1, n_test=0, length_max=40)
    ds = synthesize_dataset(cfg)
    back = load_features(save_features(ds.train, tmp_path))
    assert back[0].N == 400


def test_same_seed_identical():
    _same_records(synthesize_dataset(SMALL).train, synthesize_dataset(SMALL).train)
    other = synthesize_dataset(SynthConfig(n_train=6, n_test=3, seed=5))
    assert other.train[0].features["rgb"].tobytes() != synthesize_dataset(SMALL).train[0].features["rgb"].tobytes()


def test_zero_noise_writes_prototypes_exactly():
    cfg = SynthConfig(n_train=20, n_test=0, noise_sigma=0.0, seed=1)
    ds = synthesize_dataset(cfg)
    for v in ds.train:
        for g in v.annotation.instances:
            a = int(round(g.start / cfg.segment_duration))
            b = int(round(g.end / cfg.segment_duration))
            for s in cfg.streams:
                assert np.array_equal(v.features[s][a:b], np.tile(ds.prototypes[s][g.cls], (b - a, 1)))


def test_prototypes_unit_and_separated():
    rng = np.random.default_rng(0)
    for n, k, sep in [(5, 16, 0.5), (5, 16, 1.0), (8, 3, 0.3), (3, 2, 1.4)]:
        p = make_prototypes(n, k, sep, rng)
        assert np.allclose(np.linalg.norm(p, axis=1), 1.0)
        cos = p @ p.T
        np.fill_diagonal(cos, -1)
        assert 1 - cos.max() >= sep - 1e-12
    with pytest.raises(ValueError, match="infeasible"):
        make_prototypes(5, 16, 1.5, rng)


def test_streams_use_independent_prototypes():
    ds = synthesize_dataset(SMALL)
    assert not np.allclose(ds.prototypes["rgb"], ds.prototypes["flow"])


@pytest.mark.parametrize("bad", [dict(K=0), dict(N=-1), dict(actions_max=0), dict(length_min=5, length_max=4),
                                 dict(length_max=100), dict(noise_sigma=-0.1), dict(n_test=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SynthConfig(**bad)


def test_layout_contract():
    cfg = SynthConfig(n_train=100, n_test=0, seed=2)
    ds = synthesize_dataset(cfg)
    for v in ds.train:
        inst = v.annotation.instances
        assert 1 <= len(inst) <= 3
        spans = sorted((round(g.start / 0.5), round(g.end / 0.5)) for g in inst)
        for a, b in spans:
            assert 4 <= b - a <= 12
        for (a1, b1), (a2, b2) in zip(spans, spans[1:]):
            assert a2 > b1  # disjoint, gap of at least one segment
        assert v.duration == pytest.approx(v.N * v.segment_duration)


def test_forced_class_videos():
    ds = synthesize_dataset(SMALL)
    extra = ds.extra_videos(5, classes=[2, 2], prefix="rep")
    assert all(v.annotation.weak_labels == [2, 5] and v.annotation.counts == [2, 0] for v in extra)
    again = ds.extra_videos(5, classes=[2, 2], prefix="rep")
    _same_records(extra, again)


def test_acceptance_split_density_and_nearest_prototype():
    ds = synthesize_dataset(SynthConfig())
    assert len(ds.train) == 200 and len(ds.test) == 50
    dens = [action_density(v.annotation.instances, v.duration) for v in ds.test]
    assert 0.2 <= np.mean(dens) <= 0.6
    hits = total = 0
    for v in ds.test:
        for g in v.annotation.instances:
            a, b = round(g.start / 0.5), round(g.end / 0.5)
            for s in ("rgb", "flow"):
                seg = v.features[s][a:b]
                pred = np.argmin(((seg[:, None, :] - ds.prototypes[s][None]) ** 2).sum(-1), axis=1)
                hits += int((pred == g.cls).sum())
                total += len(pred)
    assert hits / total >= 0.99
