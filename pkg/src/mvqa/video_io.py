"""Raw video container, synthetic clip generation, and score manifests.

Video volumes are carried as C x T x H x W unsigned-8-bit arrays (channel-major,
then time, then rows, then columns).  The on-disk container is deliberately
codec-free so pixels survive a round trip bit-exactly:

    bytes 0..3   magic "RVID"
    bytes 4..7   version (u32 little-endian, currently 1)
    bytes 8..23  C, T, H, W (u32 little-endian each)
    bytes 24..   C*T*H*W payload bytes, C-major order

Score manifests are CSV files with header ``clip_id,path,mos``; relative clip
paths are resolved against the manifest's own directory.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DimError, FormatError, IoError, TruncationError

RVID_MAGIC = b"RVID"
RVID_VERSION = 1

# Guard against absurd headers before allocating the payload buffer.
_MAX_PAYLOAD_BYTES = 1 << 33

BASE_PATTERNS = ("gradient", "checker", "noise_texture", "moving_blob")
DISTORTIONS = ("gaussian_blur", "additive_noise", "blockiness")


@dataclass
class VideoTensor:
    """A C x T x H x W volume of u8 samples."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.ndim != 4:
            raise DimError(f"expected 4 axes (C,T,H,W), got {self.data.ndim}")
        c, t, h, w = self.data.shape
        if c not in (1, 3):
            raise DimError(f"channel count must be 1 or 3, got {c}")
        if min(t, h, w) < 1:
            raise DimError(f"degenerate dims {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape


@dataclass
class FloatClip:
    """Float32 counterpart of :class:`VideoTensor`, same axis order."""

    data: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape


@dataclass
class ScoreRecord:
    clip_id: str
    mos: float


@dataclass
class SynthSpec:
    """Recipe for one synthetic distorted clip.

    ``level`` in [0, 1] controls distortion strength; the ground-truth score is
    100 * (1 - level) so harder distortion always means a lower score.
    """

    base_pattern: str = "noise_texture"
    distortion: str = "gaussian_blur"
    level: float = 0.0
    dims: tuple[int, int, int] = (8, 64, 64)  # (T, H, W)
    seed: int = 0

    def validate(self):
        if self.base_pattern not in BASE_PATTERNS:
            raise ConfigError(f"unknown base_pattern {self.base_pattern!r}")
        if self.distortion not in DISTORTIONS:
            raise ConfigError(f"unknown distortion {self.distortion!r}")
        if not 0.0 <= self.level <= 1.0:
            raise ConfigError(f"level must be in [0,1], got {self.level}")
        t, h, w = self.dims
        if min(t, h, w) < 1:
            raise ConfigError(f"dims must be positive, got {self.dims}")


@dataclass
class ManifestEntry:
    clip_id: str
    path: str
    mos: float


def write_rvid(video: VideoTensor, path) -> None:
    """Serialize ``video`` to ``path``.  Byte-identical for identical tensors."""
    c, t, h, w = video.shape
    header = RVID_MAGIC + struct.pack("<5I", RVID_VERSION, c, t, h, w)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(video.data.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_rvid(path) -> VideoTensor:
    """Read an RVID file back into a :class:`VideoTensor`."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(24)
            if len(head) < 24:
                raise TruncationError(f"{path}: header truncated ({len(head)} bytes)")
            if head[:4] != RVID_MAGIC:
                raise FormatError(f"{path}: bad magic {head[:4]!r}")
            version, c, t, h, w = struct.unpack("<5I", head[4:])
            if version != RVID_VERSION:
                raise FormatError(f"{path}: unsupported version {version}")
            if c not in (1, 3) or min(t, h, w) < 1:
                raise DimError(f"{path}: invalid dims C={c} T={t} H={h} W={w}")
            n = c * t * h * w
            if n > _MAX_PAYLOAD_BYTES:
                raise DimError(f"{path}: payload of {n} bytes exceeds sanity bound")
            payload = fh.read(n)
            if len(payload) < n:
                raise TruncationError(
                    f"{path}: payload has {len(payload)} bytes, header needs {n}"
                )
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    data = np.frombuffer(payload, dtype=np.uint8).reshape(c, t, h, w)
    return VideoTensor(data.copy())


def to_float(video: VideoTensor, mode: str = "unit") -> FloatClip:
    """Map u8 samples to float32; ``unit`` divides by 255 into [0, 1]."""
    if mode != "unit":
        raise ConfigError(f"unknown normalization mode {mode!r}")
    return FloatClip(video.data.astype(np.float32) / np.float32(255.0))


def _quantize(frames: np.ndarray) -> np.ndarray:
    # Single rounding point: round half up, then clamp into u8 range.
    return np.clip(np.floor(frames + 0.5), 0, 255).astype(np.uint8)


def _base_pattern(spec: SynthSpec) -> np.ndarray:
    """Render the undistorted pattern as float (T, H, W) in [0, 255]."""
    t_n, h, w = spec.dims
    rng = np.random.default_rng([spec.seed & 0xFFFFFFFF, 0])
    tt = np.arange(t_n)[:, None, None]
    yy = np.arange(h)[None, :, None]
    xx = np.arange(w)[None, None, :]
    if spec.base_pattern == "gradient":
        fx = rng.uniform(0.5, 2.0)
        fy = rng.uniform(0.5, 2.0)
        phase = rng.uniform(0, 2 * np.pi)
        arg = 2 * np.pi * (fx * xx / w + fy * yy / h) + 0.4 * tt + phase
        return 127.5 * (1.0 + np.sin(arg))
    if spec.base_pattern == "checker":
        cell = max(2, min(h, w) // 8)
        return 255.0 * (((yy // cell) + (xx // cell) + tt) % 2).astype(np.float64)
    if spec.base_pattern == "noise_texture":
        base = rng.uniform(0.0, 255.0, size=(h, w))
        frames = np.empty((t_n, h, w))
        for t in range(t_n):
            # Shift the texture over time so the clip is not static.
            frames[t] = np.roll(base, shift=(2 * t, 3 * t), axis=(0, 1))
        return frames
    if spec.base_pattern == "moving_blob":
        sigma = max(2.0, min(h, w) / 8.0)
        y0 = rng.uniform(0.2, 0.8) * h
        x0 = rng.uniform(0.2, 0.8) * w
        vy = rng.uniform(-1.5, 1.5)
        vx = rng.uniform(-1.5, 1.5)
        cy = y0 + vy * np.arange(t_n)
        cx = x0 + vx * np.arange(t_n)
        d2 = (yy - cy[:, None, None]) ** 2 + (xx - cx[:, None, None]) ** 2
        return 30.0 + 200.0 * np.exp(-0.5 * d2 / sigma**2)
    raise ConfigError(f"unknown base_pattern {spec.base_pattern!r}")


def _distort(frames: np.ndarray, spec: SynthSpec) -> np.ndarray:
    if spec.level == 0.0:
        return frames
    if spec.distortion == "gaussian_blur":
        sigma = 4.0 * spec.level
        return gaussian_filter(frames, sigma=(0, sigma, sigma), mode="nearest")
    if spec.distortion == "additive_noise":
        rng = np.random.default_rng([spec.seed & 0xFFFFFFFF, 1])
        noise = rng.normal(0.0, 60.0 * spec.level, size=frames.shape)
        return frames + noise
    if spec.distortion == "blockiness":
        t_n, h, w = frames.shape
        bs = 8
        ph, pw = (-h) % bs, (-w) % bs
        padded = np.pad(frames, ((0, 0), (0, ph), (0, pw)), mode="edge")
        hb, wb = padded.shape[1] // bs, padded.shape[2] // bs
        blocks = padded.reshape(t_n, hb, bs, wb, bs)
        means = blocks.mean(axis=(2, 4), keepdims=True)
        blocky = np.broadcast_to(means, blocks.shape).reshape(padded.shape)
        blocky = blocky[:, :h, :w]
        return (1.0 - spec.level) * frames + spec.level * blocky
    raise ConfigError(f"unknown distortion {spec.distortion!r}")


def generate_synthetic(spec: SynthSpec) -> tuple[VideoTensor, ScoreRecord]:
    """Render a deterministic distorted clip and its ground-truth score.

    The same spec always yields the same bytes; distortion strength grows
    monotonically with ``level`` and the score is 100 * (1 - level).
    """
    spec.validate()
    frames = _distort(_base_pattern(spec), spec)
    volume = np.repeat(_quantize(frames)[None], 3, axis=0)
    clip_id = (
        f"{spec.base_pattern}_{spec.distortion}_l{spec.level:.4f}_s{spec.seed}"
    )
    return VideoTensor(volume), ScoreRecord(clip_id, 100.0 * (1.0 - spec.level))


def write_manifest(entries: list[ManifestEntry], path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["clip_id", "path", "mos"])
            for e in entries:
                writer.writerow([e.clip_id, e.path, repr(float(e.mos))])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_manifest(path) -> list[ManifestEntry]:
    """Load a manifest CSV, resolving relative clip paths against its directory."""
    base = Path(path).parent
    entries: list[ManifestEntry] = []
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["clip_id", "path", "mos"]:
                raise FormatError(f"{path}: expected header clip_id,path,mos, got {header}")
            for row in reader:
                if not row:
                    continue
                if len(row) != 3:
                    raise FormatError(f"{path}: malformed row {row}")
                clip_id, rel, mos = row
                clip_path = rel if os.path.isabs(rel) else str(base / rel)
                entries.append(ManifestEntry(clip_id, clip_path, float(mos)))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    ids = [e.clip_id for e in entries]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate clip_id values")
    return entries
