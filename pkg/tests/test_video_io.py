"""Container round-trips, synthetic clip properties, and normalization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvqa.errors import ConfigError, DimError, FormatError, TruncationError
from mvqa.video_io import (
    ManifestEntry,
    SynthSpec,
    VideoTensor,
    generate_synthetic,
    read_manifest,
    read_rvid,
    to_float,
    write_manifest,
    write_rvid,
)


def _random_video(rng, c, t, h, w):
    return VideoTensor(rng.integers(0, 256, size=(c, t, h, w), dtype=np.uint8))


class TestRvidContainer:
    def test_header_plus_payload_size(self, tmp_path):
        """A 3x1x2x2 all-zero clip serializes to exactly 36 bytes."""
        path = tmp_path / "zero.rvid"
        write_rvid(VideoTensor(np.zeros((3, 1, 2, 2), np.uint8)), path)
        assert path.stat().st_size == 4 + 4 + 16 + 12

    def test_roundtrip_identity(self, tmp_path):
        rng = np.random.default_rng(42)
        video = _random_video(rng, 3, 4, 9, 7)
        path = tmp_path / "clip.rvid"
        write_rvid(video, path)
        assert np.array_equal(read_rvid(path).data, video.data)

    def test_writes_are_deterministic(self, tmp_path):
        rng = np.random.default_rng(7)
        video = _random_video(rng, 1, 2, 5, 5)
        a, b = tmp_path / "a.rvid", tmp_path / "b.rvid"
        write_rvid(video, a)
        write_rvid(video, b)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.rvid"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(FormatError):
            read_rvid(path)

    def test_truncated_payload_rejected(self, tmp_path):
        """Header declares 3x2x4x4 (96 payload bytes) but only 95 are present."""
        import struct

        path = tmp_path / "short.rvid"
        header = b"RVID" + struct.pack("<5I", 1, 3, 2, 4, 4)
        path.write_bytes(header + b"\x01" * 95)
        with pytest.raises(TruncationError):
            read_rvid(path)

    def test_truncated_header_rejected(self, tmp_path):
        path = tmp_path / "stub.rvid"
        path.write_bytes(b"RVID\x01")
        with pytest.raises(TruncationError):
            read_rvid(path)

    def test_bad_dims_rejected(self, tmp_path):
        import struct

        path = tmp_path / "dims.rvid"
        path.write_bytes(b"RVID" + struct.pack("<5I", 1, 2, 1, 4, 4))
        with pytest.raises(DimError):
            read_rvid(path)

    @settings(max_examples=25, deadline=None)
    @given(
        c=st.sampled_from([1, 3]),
        t=st.integers(1, 8),
        h=st.integers(1, 64),
        w=st.integers(1, 64),
        seed=st.integers(0, 2**31),
    )
    def test_roundtrip_property(self, tmp_path_factory, c, t, h, w, seed):
        """Round-trip is the identity for any valid tensor."""
        rng = np.random.default_rng(seed)
        video = _random_video(rng, c, t, h, w)
        path = tmp_path_factory.mktemp("rt") / "v.rvid"
        write_rvid(video, path)
        back = read_rvid(path)
        assert back.shape == video.shape
        assert np.array_equal(back.data, video.data)


class TestVideoTensorInvariants:
    def test_channel_count_restricted(self):
        with pytest.raises(DimError):
            VideoTensor(np.zeros((2, 1, 4, 4), np.uint8))

    def test_rank_checked(self):
        with pytest.raises(DimError):
            VideoTensor(np.zeros((3, 4, 4), np.uint8))


class TestSyntheticGenerator:
    def test_zero_level_scores_100(self):
        _, record = generate_synthetic(SynthSpec(level=0.0, dims=(2, 16, 16), seed=1))
        assert record.mos == 100.0

    def test_pure_function_of_spec(self):
        spec = SynthSpec(base_pattern="moving_blob", distortion="additive_noise",
                         level=0.4, dims=(3, 24, 24), seed=9)
        a, ra = generate_synthetic(spec)
        b, rb = generate_synthetic(spec)
        assert np.array_equal(a.data, b.data)
        assert ra == rb

    def test_blur_reduces_variance(self):
        """Per-frame variance strictly drops between level 0 and level 0.3."""
        base = SynthSpec(base_pattern="noise_texture", distortion="gaussian_blur",
                         dims=(2, 32, 32), seed=5)
        clean, _ = generate_synthetic(base)
        blurred, _ = generate_synthetic(
            SynthSpec(base_pattern="noise_texture", distortion="gaussian_blur",
                      level=0.3, dims=(2, 32, 32), seed=5))
        for t in range(2):
            v_clean = clean.data[:, t].astype(np.float64).var()
            v_blur = blurred.data[:, t].astype(np.float64).var()
            assert v_blur < v_clean

    def test_blur_laplacian_monotone(self):
        """Mean |Laplacian| is non-increasing along the blur-level grid."""
        def lap_energy(video):
            f = video.data.astype(np.float64)
            lap = (-4 * f[:, :, 1:-1, 1:-1] + f[:, :, :-2, 1:-1] + f[:, :, 2:, 1:-1]
                   + f[:, :, 1:-1, :-2] + f[:, :, 1:-1, 2:])
            return np.abs(lap).mean()

        energies = []
        for level in (0.0, 0.25, 0.5, 0.75, 1.0):
            clip, _ = generate_synthetic(
                SynthSpec(base_pattern="noise_texture", distortion="gaussian_blur",
                          level=level, dims=(2, 32, 32), seed=3))
            energies.append(lap_energy(clip))
        assert all(b <= a + 1e-9 for a, b in zip(energies, energies[1:]))

    def test_noise_strength_monotone(self):
        """Additive-noise distortion departs further from the clean clip as
        level grows."""
        clean, _ = generate_synthetic(
            SynthSpec(distortion="additive_noise", level=0.0, dims=(2, 24, 24), seed=2))
        dists = []
        for level in (0.2, 0.5, 0.9):
            noisy, _ = generate_synthetic(
                SynthSpec(distortion="additive_noise", level=level,
                          dims=(2, 24, 24), seed=2))
            dists.append(np.abs(noisy.data.astype(float) - clean.data.astype(float)).mean())
        assert dists[0] < dists[1] < dists[2]

    def test_score_tracks_level(self):
        _, rec = generate_synthetic(SynthSpec(level=0.3, dims=(1, 8, 8), seed=0))
        assert rec.mos == pytest.approx(70.0)

    def test_unknown_enums_rejected(self):
        with pytest.raises(ConfigError):
            generate_synthetic(SynthSpec(base_pattern="plasma", dims=(1, 8, 8)))
        with pytest.raises(ConfigError):
            generate_synthetic(SynthSpec(distortion="vignette", dims=(1, 8, 8)))

    def test_all_patterns_render(self):
        for pattern in ("gradient", "checker", "noise_texture", "moving_blob"):
            clip, _ = generate_synthetic(
                SynthSpec(base_pattern=pattern, dims=(2, 16, 16), seed=1))
            assert clip.shape == (3, 2, 16, 16)


class TestToFloat:
    def test_endpoints_and_midpoint(self):
        video = VideoTensor(np.array([0, 128, 255], np.uint8).reshape(1, 1, 1, 3))
        out = to_float(video)
        np.testing.assert_allclose(out.data.ravel(),
                                   [0.0, 128 / 255, 1.0], rtol=1e-6)
        assert out.data.dtype == np.float32

    def test_unknown_mode_rejected(self):
        video = VideoTensor(np.zeros((1, 1, 1, 1), np.uint8))
        with pytest.raises(ConfigError):
            to_float(video, mode="imagenet")


class TestManifest:
    def test_roundtrip(self, tmp_path):
        entries = [ManifestEntry("a", "a.rvid", 91.5), ManifestEntry("b", "b.rvid", 10.0)]
        path = tmp_path / "manifest.csv"
        write_manifest(entries, path)
        back = read_manifest(path)
        assert [e.clip_id for e in back] == ["a", "b"]
        assert back[0].mos == 91.5
        # relative paths resolve against the manifest directory
        assert back[0].path == str(tmp_path / "a.rvid")

    def test_duplicate_ids_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("clip_id,path,mos\nx,a.rvid,1.0\nx,b.rvid,2.0\n")
        with pytest.raises(FormatError):
            read_manifest(path)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("id,file,score\nx,a.rvid,1.0\n")
        with pytest.raises(FormatError):
            read_manifest(path)
