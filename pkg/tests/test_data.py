import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from denseact.data import (FeatureSequence, LabelGrid, SyntheticSpec, Video, generate_synthetic,
                           load_manifest, pack_external_features, read_features, read_labels,
                           recover_labels, save_dataset, write_features, write_labels,
                           write_manifest)
from denseact.errors import ConfigurationError, ConsistencyError, FormatError

finite32 = st.floats(-1e6, 1e6, width=32, allow_nan=False)
shapes = st.tuples(st.integers(1, 40), st.integers(1, 12))


# ------------------------------------------------------------ binary formats

@settings(max_examples=40, deadline=None)
@given(arr=hnp.arrays(np.float32, shapes, elements=finite32))
def test_feature_round_trip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("f") / "x.dadf"
    write_features(path, FeatureSequence(arr, "x"))
    back = read_features(path)
    assert back.tokens.tobytes() == arr.tobytes()
    assert back.video_id == "x"


@settings(max_examples=40, deadline=None)
@given(arr=hnp.arrays(np.uint8, shapes, elements=st.integers(0, 1)))
def test_label_round_trip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("l") / "x.dadl"
    write_labels(path, LabelGrid(arr))
    np.testing.assert_array_equal(read_labels(path).labels, arr)


def test_feature_header_layout(tmp_path):
    path = tmp_path / "a.dadf"
    write_features(path, FeatureSequence(np.arange(6, dtype=np.float32).reshape(3, 2)))
    blob = path.read_bytes()
    assert struct.unpack_from("<4sHII", blob) == (b"DADF", 1, 3, 2)
    assert len(blob) == 14 + 24
    assert struct.unpack_from("<f", blob, 14 + 4 * 5)[0] == 5.0


def test_bad_magic_offset_zero(tmp_path):
    path = tmp_path / "a.dadf"
    write_features(path, FeatureSequence(np.ones((2, 2))))
    path.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(FormatError) as exc:
        read_features(path)
    assert exc.value.offset == 0


def test_zero_length_header_rejected(tmp_path):
    path = tmp_path / "a.dadf"
    path.write_bytes(struct.pack("<4sHII", b"DADF", 1, 0, 4))
    with pytest.raises(FormatError, match="T=0"):
        read_features(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "a.dadf"
    write_features(path, FeatureSequence(np.ones((4, 3))))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FormatError, match="truncated") as exc:
        read_features(path)
    assert exc.value.offset == 14 + 48 - 5


def test_shape_overflow(tmp_path):
    path = tmp_path / "a.dadf"
    path.write_bytes(struct.pack("<4sHII", b"DADF", 1, 2 ** 31 - 1, 4))
    with pytest.raises(FormatError, match="overflow"):
        read_features(path)


def test_non_binary_label_names_position(tmp_path):
    path = tmp_path / "a.dadl"
    write_labels(path, LabelGrid(np.zeros((3, 4), np.uint8)))
    blob = bytearray(path.read_bytes())
    blob[14 + 2 * 4 + 1] = 7
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="step 2, class 1") as exc:
        read_labels(path)
    assert exc.value.offset == 14 + 9


def test_label_class_mismatch(tmp_path):
    path = tmp_path / "a.dadl"
    write_labels(path, LabelGrid(np.zeros((3, 4), np.uint8)))
    with pytest.raises(ConsistencyError):
        read_labels(path, expected_classes=5)


def test_types_validate():
    with pytest.raises(ValueError):
        FeatureSequence(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        FeatureSequence(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        LabelGrid(np.array([[0, 2]]))


# ----------------------------------------------------------------- manifest

def _video(vid, t, d, c, split="train", seed=0):
    rng = np.random.default_rng(seed)
    return Video(FeatureSequence(rng.standard_normal((t, d)), vid),
                 LabelGrid((rng.random((t, c)) < 0.3).astype(np.uint8)), split)


def test_empty_manifest(tmp_path):
    path = save_dataset(tmp_path, [])
    ds = load_manifest(path)
    assert len(ds) == 0 and ds.train() == [] and ds.test() == []


def test_manifest_splits(tmp_path):
    videos = [_video("a", 5, 3, 2, "train"), _video("b", 7, 3, 2, "test", 1),
              _video("c", 4, 3, 2, "train", 2)]
    ds = load_manifest(save_dataset(tmp_path, videos))
    assert (ds.D, ds.C) == (3, 2)
    assert [v.video_id for v in ds.train()] == ["a", "c"]
    assert [v.video_id for v in ds.test()] == ["b"]
    np.testing.assert_array_equal(ds.test()[0].features.tokens, videos[1].features.tokens)


def test_manifest_rejects_mixed_d(tmp_path):
    path = save_dataset(tmp_path, [_video("a", 5, 3, 2), _video("b", 5, 4, 2)])
    with pytest.raises(ConsistencyError, match="D=4"):
        load_manifest(path)


def test_manifest_rejects_class_mismatch(tmp_path):
    path = save_dataset(tmp_path, [_video("a", 5, 3, 2), _video("b", 5, 3, 3)])
    with pytest.raises(ConsistencyError):
        load_manifest(path)


def test_manifest_rejects_length_mismatch(tmp_path):
    v = _video("a", 5, 3, 2)
    save_dataset(tmp_path, [v])
    write_labels(tmp_path / "labels/a.dadl", LabelGrid(np.zeros((6, 2), np.uint8)))
    with pytest.raises(ConsistencyError, match="label steps"):
        load_manifest(tmp_path / "manifest.json")


def test_manifest_missing_file(tmp_path):
    path = save_dataset(tmp_path, [_video("a", 5, 3, 2)])
    (tmp_path / "features/a.dadf").unlink()
    with pytest.raises(FileNotFoundError):
        load_manifest(path)
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "absent.json")


def test_manifest_malformed(tmp_path):
    (tmp_path / "m.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_manifest(tmp_path / "m.json")
    write_manifest(tmp_path / "m2.json", [{"video_id": "a"}], 3, 2)
    with pytest.raises(FormatError, match="lacks"):
        load_manifest(tmp_path / "m2.json")
    doc = {"format": "denseact-manifest", "version": 1, "D": 3, "C": 2, "videos": []}
    assert json.loads((tmp_path / "m2.json").read_text()).keys() == doc.keys()


# -------------------------------------------------------------- converter

def test_pack_external_policies():
    tokens = np.zeros((4, 6), np.float32)
    intervals = [(0, 0.9, 2.2), (1, 3.6, 3.7)]
    _, any_grid = pack_external_features(tokens, intervals, 2, 1.0, "any-overlap")
    _, maj_grid = pack_external_features(tokens, intervals, 2, 1.0, "majority")
    np.testing.assert_array_equal(any_grid.labels[:, 0], [1, 1, 1, 0])
    np.testing.assert_array_equal(maj_grid.labels[:, 0], [0, 1, 0, 0])
    np.testing.assert_array_equal(any_grid.labels[:, 1], [0, 0, 0, 1])
    assert not maj_grid.labels[:, 1].any()
    with pytest.raises(ConfigurationError):
        pack_external_features(tokens, intervals, 2, 1.0, "centre")


# ---------------------------------------------------------------- generator

def test_generator_deterministic():
    spec = SyntheticSpec(num_videos=5, t_min=40, t_max=60, co_occurrence_pairs=[[0, 3, 0.5]])
    a, b = generate_synthetic(spec, 7), generate_synthetic(spec, 7)
    for va, vb in zip(a, b):
        assert va.features.tokens.tobytes() == vb.features.tokens.tobytes()
        np.testing.assert_array_equal(va.labels.labels, vb.labels.labels)
        assert va.split == vb.split
    c = generate_synthetic(spec, 8)
    assert any(x.features.tokens.shape != y.features.tokens.shape
               or not np.array_equal(x.features.tokens, y.features.tokens) for x, y in zip(a, c))


def test_generator_split_and_lengths():
    spec = SyntheticSpec(num_videos=10, t_min=32, t_max=48, test_fraction=0.3)
    videos = generate_synthetic(spec, 0)
    assert [v.split for v in videos] == ["train"] * 7 + ["test"] * 3
    assert all(32 <= len(v) <= 48 for v in videos)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_concurrency_bound(k):
    spec = SyntheticSpec(num_videos=20, t_min=64, t_max=64, C=6, max_concurrency=k,
                         events_per_class=3.0, co_occurrence_pairs=[[0, 1, 1.0]])
    for v in generate_synthetic(spec, k):
        assert v.labels.labels.sum(axis=1).max() <= k


def test_co_occurrence_probability_one():
    spec = SyntheticSpec(num_videos=30, C=6, max_concurrency=4, events_per_class=2.0,
                         co_occurrence_pairs=[[2, 5, 1.0]])
    steps = 0
    for v in generate_synthetic(spec, 3):
        g = v.labels.labels
        on = g[:, 2] == 1
        steps += on.sum()
        assert (g[on, 5] == 1).all()
    assert steps > 0


def test_zero_noise_single_class_is_signature():
    spec = SyntheticSpec(num_videos=6, C=4, D=8, max_concurrency=1, noise_sigma=0.0)
    videos, sig = generate_synthetic(spec, 2, return_signatures=True)
    np.testing.assert_allclose(sig @ sig.T, np.eye(4), atol=1e-12)
    hits = 0
    for v in videos:
        for t, row in enumerate(v.labels.labels):
            if row.sum() == 1:
                np.testing.assert_allclose(v.features.tokens[t], sig[row.argmax()], atol=1e-6)
                hits += 1
    assert hits > 0


def test_zero_noise_labels_recoverable():
    spec = SyntheticSpec(num_videos=8, C=8, D=8, max_concurrency=4, noise_sigma=0.0,
                         events_per_class=2.0)
    videos, sig = generate_synthetic(spec, 5, return_signatures=True)
    for v in videos:
        np.testing.assert_array_equal(recover_labels(v.features.tokens, sig), v.labels.labels)


@pytest.mark.parametrize("kw", [
    dict(max_concurrency=9, C=8),
    dict(t_min=10, t_max=5),
    dict(t_min=16, duration_ranges=[[1, 20]] * 8),
    dict(co_occurrence_pairs=[[0, 0, 0.5]]),
    dict(co_occurrence_pairs=[[0, 1, 1.5]]),
    dict(noise_sigma=-1.0),
])
def test_infeasible_specs(kw):
    with pytest.raises(ConfigurationError):
        SyntheticSpec(**kw)


def test_spec_dict_round_trip():
    spec = SyntheticSpec(co_occurrence_pairs=[[0, 1, 0.5]])
    assert SyntheticSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigurationError, match="unknown"):
        SyntheticSpec.from_dict({"videos": 3})


def test_amplitudes_scale_signatures():
    amps = [2.0, 0.5, 1.0, 0.25]
    spec = SyntheticSpec(num_videos=6, C=4, D=8, max_concurrency=1, noise_sigma=0.0,
                         amplitudes=amps)
    videos, sig = generate_synthetic(spec, 2, return_signatures=True)
    for v in videos:
        for t, row in enumerate(v.labels.labels):
            if row.sum() == 1:
                c = row.argmax()
                np.testing.assert_allclose(v.features.tokens[t], amps[c] * sig[c], atol=1e-6)
    with pytest.raises(ConfigurationError):
        SyntheticSpec(C=4, amplitudes=[1.0, 1.0])
    with pytest.raises(ConfigurationError):
        SyntheticSpec(C=2, max_concurrency=1, amplitudes=[1.0, 0.0])
