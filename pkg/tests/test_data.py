import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lddm.data import (
    LabeledClip,
    LabeledVideoDataset,
    ToyGenParams,
    blob_centers,
    blob_track,
    generate_toy_dataset,
    generate_toy_images,
    oracle_motion_label,
    read_dataset,
    render_toy_video,
    resize_frames,
    round_half_up,
    sample_indices,
    segment_and_sample,
    segment_dataset,
    split_counts,
    split_dataset,
    split_halves,
    write_dataset,
)
from lddm.errors import GeometryError
from lddm.video import VideoClip


def ramp_video(n: int) -> VideoClip:
    """Frame f is filled with f/n, so frame identity is recoverable."""
    vals = (np.arange(n, dtype=np.float32) / max(n, 1))[:, None, None, None]
    return VideoClip(np.broadcast_to(vals, (n, 2, 2, 1)).copy())


def frame_ids(clip: VideoClip, n: int) -> list[int]:
    return [int(round(v * n)) for v in clip.frames[:, 0, 0, 0]]


def labeled(n0: int, n1: int) -> LabeledVideoDataset:
    clip = VideoClip(np.zeros((1, 1, 1, 1), np.float32))
    items = [LabeledClip(clip, 0, f"a{i}") for i in range(n0)] + [LabeledClip(clip, 1, f"b{i}") for i in range(n1)]
    return LabeledVideoDataset(tuple(items), "real")


class TestToyGenerator:
    def test_drift_kinematics(self):
        p = ToyGenParams(1, 6, 16, 16, 2, blob_size=1.0, speed=1.0, noise_std=0.0)
        traj = {"kind": "drift", "start_x": 3.0, "direction": 1, "cy": 8.0, "sy": 1.0}
        assert blob_centers(p, traj)[5] == 8.0
        clip = render_toy_video(p, traj, np.random.default_rng(0))
        assert blob_track(clip)[5] == pytest.approx(8.0, abs=0.05)
        assert int(np.argmax(clip.frames[5, 8, :, 0])) == 8

    def test_oscillation_periodic(self):
        p = ToyGenParams(1, 30, 16, 16, 2, amplitude=3.0, period=12.0)
        traj = {"kind": "oscillation", "center_x": 8.0, "phase": 0.7, "cy": 8.0, "sy": 1.5}
        x = blob_centers(p, traj)
        assert abs(x[12] - x[0]) < 0.5
        assert abs(x[24] - x[0]) < 0.5

    def test_deterministic(self):
        p = ToyGenParams(3, 12, 12, 12, 2, blob_size=1.0, amplitude=2.0, period=8.0, seed=9)
        a, b = generate_toy_dataset(p), generate_toy_dataset(p)
        assert a.ids == b.ids
        assert all(x.clip.frames.tobytes() == y.clip.frames.tobytes() for x, y in zip(a, b))
        c = generate_toy_dataset(ToyGenParams(3, 12, 12, 12, 2, blob_size=1.0, amplitude=2.0, period=8.0, seed=10))
        assert a.items[0].clip.frames.tobytes() != c.items[0].clip.frames.tobytes()

    def test_structure(self, small_toy):
        params, ds = small_toy
        assert len(ds) == 2 * params.n_per_class
        assert list(ds.labels[:4]) == [0, 1, 0, 1]
        assert ds.geometry == (16, 12, 12, 2)
        for it in ds:
            assert it.clip.frames.min() >= 0 and it.clip.frames.max() <= 1
            assert np.array_equal(it.clip.frames[..., 0], it.clip.frames[..., 1])

    def test_oracle_fidelity(self):
        p = ToyGenParams(32, 48, 16, 16, 2, noise_std=0.05, seed=0)
        ds = generate_toy_dataset(p)
        preds = [oracle_motion_label(it.clip) for it in ds]
        assert np.array_equal(preds, ds.labels)

    def test_motion_only_option(self):
        p = ToyGenParams(2, 12, 12, 12, 2, blob_size=1.0, amplitude=2.0, period=8.0, class1_elongation=1.0)
        traj = generate_toy_dataset(p).items[1].meta["trajectory"]
        assert traj["kind"] == "oscillation" and traj["sy"] == 1.0

    @pytest.mark.parametrize("kw", [dict(channels=3), dict(speed=5.0), dict(amplitude=7.0),
                                    dict(blob_size=10.0), dict(n_per_class=0)])
    def test_rejects(self, kw):
        base = dict(n_per_class=2, frames=16, height=16, width=16, channels=2)
        base.update(kw)
        with pytest.raises(GeometryError):
            ToyGenParams(**base)

    def test_images(self):
        p = ToyGenParams(2, 12, 12, 12, 2, blob_size=1.0, amplitude=2.0, period=8.0)
        imgs = generate_toy_images(p, (3, 1))
        assert [lab for _, lab, _ in imgs] == [0, 0, 0, 1]
        assert len({iid for _, _, iid in imgs}) == 4
        assert imgs[0][0].shape == (12, 12, 2)


class TestSegmentation:
    def test_two_windows(self):
        clips = segment_and_sample(ramp_video(96))
        assert len(clips) == 2 and all(c.shape[0] == 16 for c in clips)
        assert frame_ids(clips[1], 96) == [48 + 3 * i for i in range(16)]

    def test_stride(self):
        assert sample_indices(48, 16) == list(range(0, 48, 3))
        assert frame_ids(segment_and_sample(ramp_video(48))[0], 48) == list(range(0, 48, 3))

    def test_remainder_dropped(self):
        assert len(segment_and_sample(ramp_video(50))) == 1

    def test_short_video_padded(self):
        clips = segment_and_sample(ramp_video(20))
        assert len(clips) == 1
        ids = frame_ids(clips[0], 20)
        assert ids == sorted(ids) and ids[-1] == 19

    def test_errors(self):
        with pytest.raises(ValueError):
            segment_and_sample(ramp_video(48), 16, 48)

    @given(st.integers(1, 200), st.integers(1, 64).flatmap(lambda s: st.tuples(st.just(s), st.integers(s, 96))))
    @settings(max_examples=60, deadline=None)
    def test_order_and_count(self, n, sl):
        sampled, clip_len = sl
        for clip in segment_and_sample(ramp_video(n), clip_len, sampled):
            assert clip.shape[0] == sampled
            ids = frame_ids(clip, n)
            assert ids == sorted(ids)

    def test_dataset_ids(self, small_toy):
        _, ds = small_toy
        seg = segment_dataset(ds, 8, 4)
        assert len(seg) == 2 * len(ds)
        assert seg.ids[:2] == [f"{ds.ids[0]}#0", f"{ds.ids[0]}#1"]

    def test_resize(self):
        out = resize_frames(ramp_video(4), 5, 7)
        assert out.shape == (4, 5, 7, 1)
        assert np.allclose(out.frames[2], 0.5)


class TestSplit:
    def test_seventy_percent(self):
        train, test = split_dataset(labeled(10, 10), 0.7, 0)
        assert np.bincount(train.labels).tolist() == [7, 7]
        assert np.bincount(test.labels).tolist() == [3, 3]

    def test_nearest_rounding(self):
        assert round_half_up(22.5) == 23
        assert split_counts(113, 0.3) == 34 and split_counts(75, 0.3) == 23
        train, test = split_dataset(labeled(113, 75), 0.3, 1)
        assert np.bincount(train.labels).tolist() == [34, 23]
        assert np.bincount(test.labels).tolist() == [79, 52]

    def test_each_side_keeps_a_member(self):
        train, test = split_dataset(labeled(2, 3), 0.05, 0)
        assert set(train.labels) == {0, 1} and set(test.labels) == {0, 1}

    @pytest.mark.parametrize("f", [0.0, 1.0, -0.1, 1.5])
    def test_bad_fraction(self, f):
        with pytest.raises(ValueError):
            split_dataset(labeled(4, 4), f, 0)

    def test_missing_class(self):
        with pytest.raises(ValueError):
            split_dataset(labeled(4, 0), 0.5, 0)

    @given(st.integers(2, 40), st.integers(2, 40), st.floats(0.01, 0.99), st.integers(0, 2 ** 31))
    @settings(max_examples=80, deadline=None)
    def test_properties(self, n0, n1, frac, seed):
        ds = labeled(n0, n1)
        train, test = split_dataset(ds, frac, seed)
        train2, test2 = split_dataset(ds, frac, seed)
        assert train.ids == train2.ids and test.ids == test2.ids
        assert not set(train.ids) & set(test.ids)
        assert sorted(train.ids + test.ids) == sorted(ds.ids)
        for cls, n in ((0, n0), (1, n1)):
            k = int(np.sum(train.labels == cls))
            assert 1 <= k <= n - 1
            assert k == min(max(round_half_up(n * frac), 1), n - 1)


class TestDataset:
    def test_invariants(self):
        clip = VideoClip(np.zeros((1, 2, 2, 1), np.float32))
        with pytest.raises(ValueError):
            LabeledVideoDataset((LabeledClip(clip, 2, "x"),))
        with pytest.raises(ValueError):
            LabeledVideoDataset((LabeledClip(clip, 0, "x"), LabeledClip(clip, 1, "x")))
        with pytest.raises(GeometryError):
            LabeledVideoDataset((LabeledClip(clip, 0, "x"),
                                 LabeledClip(VideoClip(np.zeros((1, 3, 2, 1), np.float32)), 1, "y")))
        with pytest.raises(ValueError):
            LabeledVideoDataset((), "medical")

    def test_concat_provenance(self):
        a = labeled(1, 1)
        b = LabeledVideoDataset(tuple(LabeledClip(it.clip, it.label, "s" + it.source_id) for it in a), "synthetic")
        assert a.concat(b).provenance == "mixed"
        assert a.concat(labeled(0, 0)).provenance == "real"

    def test_manifest_round_trip(self, small_toy, tmp_path):
        _, ds = small_toy
        manifest = write_dataset(tmp_path, ds)
        rows = manifest.read_text().splitlines()
        assert len(rows) == len(ds)
        back = read_dataset(manifest)
        assert back.ids == ds.ids and back.provenance == "toy"
        assert np.array_equal(back.labels, ds.labels)
        assert all(x.clip.frames.tobytes() == y.clip.frames.tobytes() for x, y in zip(back, ds))


def test_split_halves_are_class_balanced(small_toy):
    _, ds = small_toy
    a, b = split_halves(ds)
    assert np.bincount(a.labels).tolist() == np.bincount(b.labels).tolist() == [4, 4]
    assert not set(a.ids) & set(b.ids)
    assert sorted(a.ids + b.ids) == sorted(ds.ids)
