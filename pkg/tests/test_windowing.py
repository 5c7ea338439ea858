import numpy as np
import pytest
from numpy.testing import assert_array_equal, assert_allclose

from utils.autodiff import Tensor, Graph, backward
from utils.windowing import WindowConfig, SegmentStack, split_windows, merge_windows, cover_counts


class TestWindowConfig:
    def test_default_frames_for_1024_samples(self):
        cfg = WindowConfig()
        assert cfg.segment_len == 32
        assert cfg.n_frames(1024) == 63

    @pytest.mark.parametrize("slide,overlap", [(0, 0), (4, -1), (-1, 4)])
    def test_invalid_window(self, slide, overlap):
        with pytest.raises(ValueError):
            WindowConfig(slide=slide, overlap=overlap)

    def test_indivisible_length(self):
        with pytest.raises(ValueError):
            WindowConfig(16, 16).n_frames(1000)

    def test_too_short(self):
        with pytest.raises(ValueError):
            WindowConfig(16, 16).n_frames(16)

    def test_cover_counts(self):
        counts = cover_counts(1024, WindowConfig())
        assert_array_equal(counts[:16], 1)
        assert_array_equal(counts[16:-16], 2)
        assert_array_equal(counts[-16:], 1)

    def test_overlap_longer_than_slide(self):
        cfg = WindowConfig(slide=4, overlap=8)
        assert cfg.n_frames(40) == 8
        counts = cover_counts(40, cfg)
        assert_array_equal(counts[:4], 1)
        assert_array_equal(counts[4:8], 2)
        assert_array_equal(counts[8:32], 3)
        assert_array_equal(counts[32:36], 2)
        assert_array_equal(counts[36:], 1)


class TestSplitMerge:
    def test_segment_contents(self, rng):
        x = rng.normal(size=(1024, 2))
        stack = split_windows(x, WindowConfig())
        assert stack.segments.shape == (63, 32, 2)
        for k in (0, 1, 31, 62):
            assert_array_equal(stack.segments.data[k], x[k * 16:k * 16 + 32])

    @pytest.mark.parametrize("slide,overlap,length", [(16, 16, 1024), (16, 8, 520), (8, 0, 64), (4, 4, 20), (5, 3, 38)])
    def test_round_trip_is_exact(self, rng, slide, overlap, length):
        cfg = WindowConfig(slide, overlap)
        for _ in range(20):
            x = rng.normal(size=(length, 2)) * rng.uniform(1e-3, 1e3)
            assert_array_equal(merge_windows(split_windows(x, cfg)).data, x)

    @pytest.mark.parametrize("slide,overlap,length", [(4, 8, 40), (2, 7, 23), (1, 3, 12)])
    def test_round_trip_with_wide_overlap(self, rng, slide, overlap, length):
        cfg = WindowConfig(slide, overlap)
        x = rng.normal(size=(2, length, 2))
        stack = split_windows(x, cfg)
        assert stack.segments.shape == (2, cfg.n_frames(length), slide + overlap, 2)
        assert_allclose(merge_windows(stack).data, x, rtol=1e-12, atol=1e-12)

    def test_batched_round_trip(self, rng):
        x = rng.normal(size=(3, 256, 1))
        stack = split_windows(x, WindowConfig())
        assert stack.segments.shape == (3, 15, 32, 1)
        assert_array_equal(merge_windows(stack).data, x)

    def test_overlaps_are_averaged(self):
        cfg = WindowConfig(4, 4)
        segments = np.repeat(np.arange(4.0)[:, None, None], 8, axis=1)
        merged = merge_windows(SegmentStack(Tensor(segments), cfg)).data[:, 0]
        assert_array_equal(merged[:4], 0.0)
        assert_array_equal(merged[4:8], 0.5)
        assert_array_equal(merged[8:12], 1.5)
        assert_array_equal(merged[12:16], 2.5)
        assert_array_equal(merged[16:], 3.0)

    def test_round_trip_gradient_is_identity(self, rng):
        x = Tensor(rng.normal(size=(20, 2)), requires_grad=True)
        c = rng.normal(size=(20, 2))
        with Graph() as graph:
            loss = (merge_windows(split_windows(x, WindowConfig(4, 4))) * c).sum()
        backward(loss, graph)
        assert_allclose(x.grad, c, atol=1e-15)

    def test_wrong_segment_length(self):
        with pytest.raises(ValueError):
            merge_windows(SegmentStack(Tensor(np.zeros((3, 7, 2))), WindowConfig(4, 4)))
