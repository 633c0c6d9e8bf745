import numpy as np
import pytest

from uncodec.frames import (
    Frame,
    VideoSequence,
    load_frame,
    load_sequence,
    make_gop,
    moving_shapes_clip,
    random_crop_pair,
    save_frame,
    save_sequence,
    write_moving_shapes_corpus,
)


def _random_sequence(rng, n=4, h=16, w=24, c=3):
    frames = [Frame(np.rint(rng.random((h, w, c)) * 255) / 255) for _ in range(n)]
    return VideoSequence(frames, name="rand")


class TestFrame:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            Frame(np.full((16, 16, 3), 1.5, dtype=np.float32))

    def test_rejects_nan(self):
        data = np.zeros((16, 16, 3), dtype=np.float32)
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            Frame(data)

    def test_rejects_tiny(self):
        with pytest.raises(ValueError):
            Frame(np.zeros((4, 16, 3), dtype=np.float32))

    def test_grayscale_gets_channel_axis(self):
        f = Frame(np.zeros((16, 16), dtype=np.float32))
        assert f.channels == 1


class TestSequenceIO:
    def test_round_trip_exact_at_8bit(self, rng, tmp_path):
        seq = _random_sequence(rng)
        save_sequence(seq, tmp_path)
        loaded = load_sequence(tmp_path)
        assert len(loaded) == len(seq)
        for a, b in zip(seq.frames, loaded.frames):
            np.testing.assert_array_equal(a.data, b.data)

    def test_save_load_single_frame(self, rng, tmp_path):
        f = Frame(np.rint(rng.random((16, 16, 3)) * 255) / 255)
        save_frame(f, tmp_path / "x.png")
        np.testing.assert_array_equal(load_frame(tmp_path / "x.png").data, f.data)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_sequence(tmp_path / "nope")

    def test_too_few_frames(self, rng, tmp_path):
        save_frame(Frame(np.zeros((16, 16, 3), dtype=np.float32)), tmp_path / "00000.png")
        with pytest.raises(ValueError, match="at least 2"):
            load_sequence(tmp_path)

    def test_inconsistent_dimensions(self, rng, tmp_path):
        save_frame(Frame(np.zeros((64, 64, 3), dtype=np.float32)), tmp_path / "00000.png")
        save_frame(Frame(np.zeros((32, 32, 3), dtype=np.float32)), tmp_path / "00001.png")
        with pytest.raises(ValueError, match="nhomogeneous"):
            load_sequence(tmp_path)

    def test_max_frames_truncates(self, rng, tmp_path):
        save_sequence(_random_sequence(rng, n=7), tmp_path)
        assert len(load_sequence(tmp_path, max_frames=2)) == 2

    def test_order_preserved(self, tmp_path):
        frames = [Frame(np.full((16, 16, 3), i / 255.0, dtype=np.float32)) for i in range(5)]
        save_sequence(VideoSequence(frames), tmp_path)
        loaded = load_sequence(tmp_path)
        for i, f in enumerate(loaded.frames):
            assert f.data[0, 0, 0] == pytest.approx(i / 255.0)


class TestGop:
    def test_100_frames_gop_10(self):
        gop = make_gop(100, 10)
        assert len(gop.groups) == 10
        for i_idx, p_idxs in gop.groups:
            assert len(p_idxs) == 9

    def test_partial_group(self):
        gop = make_gop(5, 12)
        assert gop.groups == [(0, [1, 2, 3, 4])]

    def test_120_frames_gop_12(self):
        assert len(make_gop(120, 12).groups) == 10

    def test_partition_property(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 200))
            gop = make_gop(n, int(rng.integers(1, 20)))
            idxs = gop.all_indices()
            assert sorted(idxs) == list(range(n))
            assert len(set(idxs)) == n

    def test_bad_gop_size(self):
        with pytest.raises(ValueError):
            make_gop(10, 0)


class TestRandomCropPair:
    def test_full_frame_when_size_matches(self, rng):
        seq = _random_sequence(rng, h=16, w=16)
        a, b = random_crop_pair(seq, 16, rng_seed=0)
        assert a.data.shape == (16, 16, 3)

    def test_determinism(self, rng):
        seq = _random_sequence(rng, h=48, w=64)
        a1, b1 = random_crop_pair(seq, 16, rng_seed=7)
        a2, b2 = random_crop_pair(seq, 16, rng_seed=7)
        np.testing.assert_array_equal(a1.data, a2.data)
        np.testing.assert_array_equal(b1.data, b2.data)

    def test_crops_are_colocated_successive(self, rng):
        # frame index is encoded in the value, so co-location is checkable
        n, h, w = 5, 32, 40
        frames = []
        for t in range(n):
            grid = np.zeros((h, w, 1), dtype=np.float32)
            grid[:, :, 0] = (np.arange(h)[:, None] * w + np.arange(w)[None, :]) / (h * w)
            frames.append(Frame(np.clip(grid + t / 255.0, 0, 1)))
        seq = VideoSequence(frames)
        for seed in range(10):
            a, b = random_crop_pair(seq, 8, rng_seed=seed)
            diff = b.data - a.data
            np.testing.assert_allclose(diff, 1 / 255.0, atol=1e-6)

    def test_size_too_large(self, rng):
        seq = _random_sequence(rng, h=16, w=16)
        with pytest.raises(ValueError):
            random_crop_pair(seq, 17, rng_seed=0)


class TestMovingShapes:
    def test_shapes_stay_in_bounds_and_move(self):
        seq, tracks = moving_shapes_clip(n_frames=10, height=64, width=64, n_shapes=3, seed=3)
        assert len(seq) == 10
        for tr in tracks:
            assert tr.vy != 0 or tr.vx != 0
            for t in range(10):
                top, left, sh, sw = tr.rect_at(t)
                assert 0 <= top and top + sh <= 64
                assert 0 <= left and left + sw <= 64

    def test_deterministic(self):
        a, _ = moving_shapes_clip(seed=5)
        b, _ = moving_shapes_clip(seed=5)
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa.data, fb.data)

    def test_consecutive_frames_differ(self):
        seq, _ = moving_shapes_clip(seed=1)
        assert not np.array_equal(seq.frames[0].data, seq.frames[1].data)

    def test_values_on_8bit_grid(self):
        seq, _ = moving_shapes_clip(seed=2)
        arr = seq.frames[0].data
        np.testing.assert_allclose(arr, np.rint(arr * 255) / 255, atol=1e-7)

    def test_corpus_layout(self, tmp_path):
        paths = write_moving_shapes_corpus(tmp_path, n_clips=2, n_frames=3, height=16, width=16)
        assert [p.name for p in paths] == ["clip_000", "clip_001"]
        assert sorted(p.name for p in paths[0].iterdir()) == ["00000.png", "00001.png", "00002.png"]
