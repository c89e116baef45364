"""Sampler contracts: temporal selection, bilinear resize, crops, fragment
grids, the fusion mask, and the full mask-fusion sampler."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvqa.errors import ConfigError, DimError
from mvqa.sampling import (
    SamplerConfig,
    build_mask,
    center_crop,
    expand_lowres,
    fragments,
    resize_bilinear,
    temporal_sample,
    usds,
)
from mvqa.video_io import VideoTensor


def _video(rng, c, t, h, w):
    return VideoTensor(rng.integers(0, 256, size=(c, t, h, w), dtype=np.uint8))


def oracle_bilinear(frame: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Independent half-pixel bilinear resampler (plain loops over output)."""
    h, w = frame.shape
    out = np.empty((out_h, out_w), dtype=np.float64)
    for oy in range(out_h):
        sy = min(max((oy + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
        y0 = min(int(np.floor(sy)), h - 2) if h > 1 else 0
        fy = sy - y0
        for ox in range(out_w):
            sx = min(max((ox + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
            x0 = min(int(np.floor(sx)), w - 2) if w > 1 else 0
            fx = sx - x0
            y1 = min(y0 + 1, h - 1)
            x1 = min(x0 + 1, w - 1)
            top = frame[y0, x0] * (1 - fx) + frame[y0, x1] * fx
            bot = frame[y1, x0] * (1 - fx) + frame[y1, x1] * fx
            out[oy, ox] = top * (1 - fy) + bot * fy
    return out


class TestTemporalSample:
    def test_stride_two(self):
        rng = np.random.default_rng(0)
        video = _video(rng, 1, 64, 2, 2)
        out = temporal_sample(video, 32)
        assert np.array_equal(out.data, video.data[:, 0:64:2])

    def test_identity(self):
        rng = np.random.default_rng(1)
        video = _video(rng, 3, 32, 2, 2)
        out = temporal_sample(video, 32)
        assert np.array_equal(out.data, video.data)

    def test_floor_indices(self):
        """T=10, t_out=4 selects floor(i*10/4) = 0, 2, 5, 7."""
        video = VideoTensor(np.arange(10, dtype=np.uint8).reshape(1, 10, 1, 1))
        out = temporal_sample(video, 4)
        assert out.data.ravel().tolist() == [0, 2, 5, 7]

    def test_bounds_checked(self):
        video = VideoTensor(np.zeros((1, 4, 2, 2), np.uint8))
        with pytest.raises(DimError):
            temporal_sample(video, 5)
        with pytest.raises(DimError):
            temporal_sample(video, 0)


class TestResizeBilinear:
    def test_constant_stays_constant(self):
        video = VideoTensor(np.full((3, 2, 17, 23), 77, np.uint8))
        out = resize_bilinear(video, 9, 5)
        assert out.shape == (3, 2, 9, 5)
        assert (out.data == 77).all()

    def test_identity_at_same_dims(self):
        rng = np.random.default_rng(3)
        video = _video(rng, 3, 2, 12, 15)
        out = resize_bilinear(video, 12, 15)
        assert np.array_equal(out.data, video.data)

    def test_hand_case_row_downsample(self):
        """1x4 row [0, 60, 120, 180] halves to [30, 150]: the half-pixel
        source centers 0.5 and 2.5 average adjacent pairs."""
        video = VideoTensor(np.array([0, 60, 120, 180], np.uint8).reshape(1, 1, 1, 4))
        out = resize_bilinear(video, 1, 2)
        assert out.data.ravel().tolist() == [30, 150]

    def test_matches_oracle_on_random_frames(self):
        rng = np.random.default_rng(4)
        frame = rng.integers(0, 256, size=(11, 14)).astype(np.float64)
        video = VideoTensor(frame[None, None].astype(np.uint8))
        for oh, ow in ((5, 7), (11, 14), (23, 3), (1, 1)):
            got = resize_bilinear(video, oh, ow).data[0, 0].astype(np.float64)
            want = oracle_bilinear(frame, oh, ow)
            assert np.abs(got - np.floor(want + 0.5)).max() == 0

    def test_bad_dims_rejected(self):
        video = VideoTensor(np.zeros((1, 1, 4, 4), np.uint8))
        with pytest.raises(DimError):
            resize_bilinear(video, 0, 4)


class TestCenterCrop:
    def test_full_size_identity(self):
        rng = np.random.default_rng(5)
        video = _video(rng, 3, 2, 8, 8)
        assert np.array_equal(center_crop(video, 8, 8).data, video.data)

    def test_floor_placement(self):
        """H=6 cropped to 4 keeps rows 1..4."""
        video = VideoTensor(np.arange(6, dtype=np.uint8).reshape(1, 1, 6, 1))
        out = center_crop(video, 4, 1)
        assert out.data.ravel().tolist() == [1, 2, 3, 4]

    def test_copies_bytes_exactly(self):
        rng = np.random.default_rng(6)
        video = _video(rng, 3, 2, 10, 12)
        out = center_crop(video, 4, 6)
        assert np.array_equal(out.data, video.data[:, :, 3:7, 3:9])

    def test_oversize_rejected(self):
        video = VideoTensor(np.zeros((1, 1, 4, 4), np.uint8))
        with pytest.raises(DimError):
            center_crop(video, 5, 4)


class TestFragments:
    CFG = SamplerConfig(fragments_h=14, fragments_w=14, fsize_h=16, fsize_w=16)

    def test_exact_tiling_is_identity(self):
        """A 224x224 source with 14x14 cells of 16px has zero offset slack,
        so the fragments output is the input byte for byte."""
        rng = np.random.default_rng(7)
        video = _video(rng, 3, 2, 224, 224)
        out, grid = fragments(video, self.CFG, seed=123)
        assert np.array_equal(out.data, video.data)
        assert (grid.offsets == 0).all()

    def test_zero_offsets_flag(self):
        rng = np.random.default_rng(8)
        video = _video(rng, 3, 1, 448, 448)
        out, grid = fragments(video, self.CFG, zero_offsets=True)
        assert (grid.offsets == 0).all()
        assert np.array_equal(out.data[:, :, :16, :16], video.data[:, :, :16, :16])

    def test_every_patch_matches_some_source_patch(self):
        """Brute-force oracle: each output patch must be a byte-exact copy of
        a contiguous source patch somewhere inside its grid cell."""
        rng = np.random.default_rng(9)
        video = _video(rng, 3, 2, 448, 448)
        cfg = self.CFG
        out, grid = fragments(video, cfg, seed=11)
        s = cfg.fsize_h
        from numpy.lib.stride_tricks import sliding_window_view

        for t in range(2):
            for i in range(cfg.fragments_h):
                for j in range(cfg.fragments_w):
                    patch = out.data[:, t, i * s:(i + 1) * s, j * s:(j + 1) * s]
                    y0, y1 = grid.row_starts[i], (grid.row_starts[i + 1]
                                                  if i + 1 < cfg.fragments_h else 448)
                    x0, x1 = grid.col_starts[j], (grid.col_starts[j + 1]
                                                  if j + 1 < cfg.fragments_w else 448)
                    cell = video.data[:, t, y0:y1, x0:x1]
                    windows = sliding_window_view(cell, (s, s), axis=(1, 2))
                    hits = (windows == patch[:, None, None]).all(axis=(0, 3, 4))
                    assert hits.any()
                    dy, dx = grid.offsets[t, i, j]
                    assert hits[dy, dx]

    def test_aligned_offsets_shared_across_frames(self):
        rng = np.random.default_rng(10)
        video = _video(rng, 1, 4, 448, 448)
        _, grid = fragments(video, self.CFG, seed=3)
        assert grid.aligned
        for t in range(1, 4):
            assert np.array_equal(grid.offsets[t], grid.offsets[0])

    def test_unaligned_offsets_vary(self):
        cfg = SamplerConfig(fragments_h=14, fragments_w=14, fsize_h=16,
                            fsize_w=16, aligned_offsets=False)
        rng = np.random.default_rng(11)
        video = _video(rng, 1, 4, 448, 448)
        _, grid = fragments(video, cfg, seed=3)
        assert any(not np.array_equal(grid.offsets[t], grid.offsets[0])
                   for t in range(1, 4))

    def test_too_small_source_rejected(self):
        video = VideoTensor(np.zeros((1, 1, 100, 224), np.uint8))
        with pytest.raises(DimError):
            fragments(video, self.CFG)

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(12)
        video = _video(rng, 3, 2, 300, 300)
        a, ga = fragments(video, self.CFG, seed=77)
        b, gb = fragments(video, self.CFG, seed=77)
        assert np.array_equal(a.data, b.data)
        assert np.array_equal(ga.offsets, gb.offsets)


class TestBuildMask:
    def test_counts_for_standard_grid(self):
        """224x224 with 16px cells: 49 blocks x 256 ones = 12544."""
        mask = build_mask(SamplerConfig(14, 14, 16, 16)).mask
        assert mask.shape == (224, 224)
        assert int(mask.sum()) == 12544

    def test_pointwise_condition(self):
        mask = build_mask(SamplerConfig(4, 4, 16, 16)).mask
        assert mask[16, 16] == 1
        assert mask[0, 0] == 0
        assert mask[16, 0] == 0
        assert mask[0, 16] == 0

    def test_periodicity(self):
        cfg = SamplerConfig(6, 4, 8, 10)
        mask = build_mask(cfg).mask
        assert np.array_equal(mask, np.roll(mask, (16, 20), axis=(0, 1)))

    def test_odd_grid_rejected(self):
        with pytest.raises(ConfigError):
            build_mask(SamplerConfig(3, 4, 16, 16))

    @settings(max_examples=30, deadline=None)
    @given(fh=st.integers(1, 5), fw=st.integers(1, 5),
           sh=st.integers(1, 12), sw=st.integers(1, 12))
    def test_ones_fraction_exactly_quarter(self, fh, fw, sh, sw):
        cfg = SamplerConfig(2 * fh, 2 * fw, sh, sw)
        spec = build_mask(cfg)
        assert spec.ones_fraction == 0.25


class TestExpandLowres:
    CFG = SamplerConfig(4, 6, 8, 5)

    def test_support_equals_mask(self):
        rng = np.random.default_rng(13)
        low = VideoTensor(rng.integers(1, 256, size=(3, 2, 16, 15), dtype=np.uint8))
        out = expand_lowres(low, self.CFG)
        mask = build_mask(self.CFG).mask.astype(bool)
        assert ((out.data != 0) == mask).all()

    def test_values_are_a_bijection(self):
        rng = np.random.default_rng(14)
        low = VideoTensor(rng.integers(1, 256, size=(1, 1, 16, 15), dtype=np.uint8))
        out = expand_lowres(low, self.CFG)
        mask = build_mask(self.CFG).mask.astype(bool)
        placed = np.sort(out.data[0, 0][mask])
        assert np.array_equal(placed, np.sort(low.data.ravel()))

    def test_constant_input(self):
        low = VideoTensor(np.full((1, 1, 16, 15), 9, np.uint8))
        out = expand_lowres(low, self.CFG)
        mask = build_mask(self.CFG).mask.astype(bool)
        assert (out.data[0, 0][mask] == 9).all()
        assert (out.data[0, 0][~mask] == 0).all()

    def test_wrong_dims_rejected(self):
        with pytest.raises(DimError):
            expand_lowres(VideoTensor(np.zeros((1, 1, 8, 8), np.uint8)), self.CFG)


class TestUsds:
    CFG = SamplerConfig(4, 4, 16, 16)  # 64x64 target

    def test_constant_video_stays_constant(self):
        video = VideoTensor(np.full((3, 2, 128, 128), 201, np.uint8))
        out = usds(video, self.CFG, seed=5)
        assert (out.clip.data == 201).all()

    def test_output_dims_and_fraction(self):
        rng = np.random.default_rng(15)
        video = _video(rng, 3, 3, 100, 140)
        out = usds(video, self.CFG, seed=2)
        assert out.clip.shape == (3, 3, 64, 64)
        assert out.provenance.mean() == 0.25

    def test_provenance_oracle(self):
        """Mask-zero pixels are byte-exact fragment copies; mask-one pixels
        match an independently recomputed bilinear downsample within 1."""
        rng = np.random.default_rng(16)
        video = _video(rng, 3, 2, 150, 170)
        cfg = self.CFG
        out = usds(video, cfg, seed=8)
        mask = out.provenance.astype(bool)
        s = cfg.fsize_h

        frag_ok = 0
        for t in range(2):
            low = np.stack([
                oracle_bilinear(video.data[c, t].astype(np.float64), 32, 32)
                for c in range(3)
            ])
            for y in range(64):
                for x in range(64):
                    if mask[y, x]:
                        ky, kx = y // (2 * s), x // (2 * s)
                        ly = ky * s + (y % (2 * s)) - s
                        lx = kx * s + (x % (2 * s)) - s
                        want = np.floor(low[:, ly, lx] + 0.5)
                        got = out.clip.data[:, t, y, x].astype(np.float64)
                        assert np.abs(got - want).max() <= 1
                    else:
                        i, j = y // s, x // s
                        sy, sx = out.grid.patch_origin(t, i, j)
                        src = video.data[:, t, sy + y % s, sx + x % s]
                        assert np.array_equal(out.clip.data[:, t, y, x], src)
                        frag_ok += 1
        assert frag_ok == 2 * 64 * 64 * 3 // 4

    def test_deterministic(self):
        rng = np.random.default_rng(17)
        video = _video(rng, 3, 2, 90, 90)
        a = usds(video, self.CFG, seed=21)
        b = usds(video, self.CFG, seed=21)
        assert np.array_equal(a.clip.data, b.clip.data)

    def test_upscale_guard(self):
        """Sources below the target are bilinearly upscaled first."""
        rng = np.random.default_rng(18)
        video = _video(rng, 3, 1, 40, 200)
        out = usds(video, self.CFG, seed=1)
        assert out.clip.shape == (3, 1, 64, 64)

    def test_odd_grid_rejected(self):
        video = VideoTensor(np.zeros((1, 1, 64, 64), np.uint8))
        with pytest.raises(ConfigError):
            usds(video, SamplerConfig(3, 4, 16, 16))
