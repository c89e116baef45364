"""Spatial and temporal samplers that shrink a video to the encoder input size.

Four spatial samplers are provided: plain bilinear ``resize``, ``center_crop``,
``fragments`` (grid mini-patch sampling: one raw patch per grid cell, copied
byte-exact so local distortion texture survives), and ``usds``, which fuses a
fragments frame with a bilinear downsample through a periodic quarter mask.

The fusion partitions the target frame into 2*s_h x 2*s_w blocks.  Within each
block the bottom-right s_h x s_w quadrant (mask = 1) shows a tile of the
half-resolution downsample, carrying scene-level content; the other three
quadrants (mask = 0) keep raw fragment pixels, carrying distortion detail.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimError
from .video_io import VideoTensor

_U64 = 0xFFFFFFFFFFFFFFFF


@dataclass
class SamplerConfig:
    """Grid geometry: fragments_h x fragments_w cells of fsize_h x fsize_w pixels.

    The target output is (fragments_h * fsize_h) x (fragments_w * fsize_w),
    e.g. 14 * 16 = 224.  The mask fusion needs even fragment counts so the
    frame splits exactly into 2*fsize blocks.
    """

    fragments_h: int = 14
    fragments_w: int = 14
    fsize_h: int = 16
    fsize_w: int = 16
    aligned_offsets: bool = True
    seed: int = 0

    def __post_init__(self):
        if min(self.fragments_h, self.fragments_w, self.fsize_h, self.fsize_w) < 1:
            raise ConfigError(f"grid geometry must be positive: {self}")

    @property
    def target_h(self) -> int:
        return self.fragments_h * self.fsize_h

    @property
    def target_w(self) -> int:
        return self.fragments_w * self.fsize_w

    def require_even_grid(self):
        if self.fragments_h % 2 or self.fragments_w % 2:
            raise ConfigError(
                f"fragments_h/fragments_w must be even for mask fusion, got "
                f"{self.fragments_h}x{self.fragments_w}"
            )


@dataclass
class FragmentGrid:
    """Provenance of a fragments pass: where every patch was copied from.

    ``row_starts[i]`` / ``col_starts[j]`` give the top-left corner of grid cell
    (i, j) in the source frame; ``offsets[t, i, j]`` is the (dy, dx) jitter of
    the patch taken for frame t.  With aligned offsets all frames share row 0.
    """

    row_starts: np.ndarray  # (fragments_h,)
    col_starts: np.ndarray  # (fragments_w,)
    offsets: np.ndarray  # (T, fragments_h, fragments_w, 2)
    aligned: bool

    def patch_origin(self, t: int, i: int, j: int) -> tuple[int, int]:
        dy, dx = self.offsets[t, i, j]
        return int(self.row_starts[i] + dy), int(self.col_starts[j] + dx)


@dataclass
class MaskSpec:
    """Binary fusion mask of shape (target_h, target_w), broadcast over C and T."""

    mask: np.ndarray

    @property
    def ones_fraction(self) -> float:
        return float(self.mask.mean())


@dataclass
class SampledClip:
    """A sampled clip plus per-pixel provenance (1 = semantic, 0 = fragment)."""

    clip: VideoTensor
    provenance: np.ndarray
    grid: FragmentGrid | None = None


def temporal_sample(video: VideoTensor, t_out: int, mode: str = "uniform",
                    seed: int = 0) -> VideoTensor:
    """Select ``t_out`` frames; uniform mode takes indices floor(i*T/t_out)."""
    if mode != "uniform":
        raise ConfigError(f"unknown temporal mode {mode!r}")
    t_in = video.frames
    if t_out < 1 or t_out > t_in:
        raise DimError(f"t_out={t_out} invalid for T={t_in}")
    idx = (np.arange(t_out) * t_in) // t_out
    return VideoTensor(video.data[:, idx])


def _axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Half-pixel-center source coordinates for one axis, split into floor+frac."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.minimum(np.floor(src).astype(np.int64), max(n_in - 2, 0))
    return lo, src - lo


def _resize_float(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (..., H, W) array; returns float64, no rounding."""
    h, w = data.shape[-2:]
    ylo, yfrac = _axis_coords(h, out_h)
    xlo, xfrac = _axis_coords(w, out_w)
    yhi = np.minimum(ylo + 1, h - 1)
    xhi = np.minimum(xlo + 1, w - 1)
    src = data.astype(np.float64)
    v00 = src[..., ylo[:, None], xlo[None, :]]
    v01 = src[..., ylo[:, None], xhi[None, :]]
    v10 = src[..., yhi[:, None], xlo[None, :]]
    v11 = src[..., yhi[:, None], xhi[None, :]]
    fy = yfrac[:, None]
    fx = xfrac[None, :]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def _round_u8(values: np.ndarray) -> np.ndarray:
    # Round half up, single quantization point shared by all float paths.
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def resize_bilinear(video: VideoTensor, out_h: int, out_w: int) -> VideoTensor:
    """Bilinear resize per frame per channel, half-pixel-center convention."""
    if out_h < 1 or out_w < 1:
        raise DimError(f"output dims must be positive, got {out_h}x{out_w}")
    if (out_h, out_w) == (video.height, video.width):
        return VideoTensor(video.data.copy())
    return VideoTensor(_round_u8(_resize_float(video.data, out_h, out_w)))


def center_crop(video: VideoTensor, out_h: int, out_w: int) -> VideoTensor:
    """Copy the centered out_h x out_w window (floor placement), byte-exact."""
    h, w = video.height, video.width
    if out_h < 1 or out_w < 1 or out_h > h or out_w > w:
        raise DimError(f"crop {out_h}x{out_w} invalid for source {h}x{w}")
    top = (h - out_h) // 2
    left = (w - out_w) // 2
    return VideoTensor(video.data[:, :, top:top + out_h, left:left + out_w].copy())


def _grid_starts(extent: int, cells: int) -> np.ndarray:
    return (np.arange(cells) * extent) // cells


def _frame_rng(seed: int, stream: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=seed & _U64, spawn_key=(stream,))
    return np.random.default_rng(seq)


def fragments(video: VideoTensor, cfg: SamplerConfig, seed: int | None = None,
              zero_offsets: bool = False) -> tuple[VideoTensor, FragmentGrid]:
    """Tile the target frame with one randomly offset raw patch per grid cell.

    Cell (i, j) of frame t contributes the patch whose top-left corner is
    (row_starts[i] + dy, col_starts[j] + dx) in the source, with (dy, dx)
    drawn uniformly so the patch stays inside the cell.  Offsets are shared
    across frames when ``cfg.aligned_offsets`` so patch tubes stay coherent
    in time; otherwise each frame draws from its own derived stream, making
    serial and per-frame-parallel execution identical.  ``zero_offsets`` is a
    debugging aid that pins every patch to its cell's top-left corner.
    """
    if seed is None:
        seed = cfg.seed
    f_h, f_w, s_h, s_w = cfg.fragments_h, cfg.fragments_w, cfg.fsize_h, cfg.fsize_w
    c, t_n, h, w = video.shape
    row_starts = _grid_starts(h, f_h)
    col_starts = _grid_starts(w, f_w)
    row_ends = np.append(row_starts[1:], h)
    col_ends = np.append(col_starts[1:], w)
    cell_h = row_ends - row_starts
    cell_w = col_ends - col_starts
    if cell_h.min() < s_h or cell_w.min() < s_w:
        raise DimError(
            f"grid cell {cell_h.min()}x{cell_w.min()} smaller than patch "
            f"{s_h}x{s_w}; upscale the source to at least "
            f"{cfg.target_h}x{cfg.target_w} first"
        )
    slack_h = cell_h - s_h  # inclusive upper bound on dy per row of cells
    slack_w = cell_w - s_w

    offsets = np.zeros((t_n, f_h, f_w, 2), dtype=np.int64)
    if not zero_offsets:
        n_streams = 1 if cfg.aligned_offsets else t_n
        for stream in range(n_streams):
            rng = _frame_rng(seed, stream)
            dy = rng.integers(0, slack_h[:, None] + 1, size=(f_h, f_w))
            dx = rng.integers(0, slack_w[None, :] + 1, size=(f_h, f_w))
            offsets[stream, :, :, 0] = dy
            offsets[stream, :, :, 1] = dx
        if cfg.aligned_offsets:
            offsets[:] = offsets[0]

    out = np.empty((c, t_n, cfg.target_h, cfg.target_w), dtype=np.uint8)
    for t in range(t_n):
        for i in range(f_h):
            for j in range(f_w):
                sy = row_starts[i] + offsets[t, i, j, 0]
                sx = col_starts[j] + offsets[t, i, j, 1]
                out[:, t, i * s_h:(i + 1) * s_h, j * s_w:(j + 1) * s_w] = \
                    video.data[:, t, sy:sy + s_h, sx:sx + s_w]
    grid = FragmentGrid(row_starts, col_starts, offsets, cfg.aligned_offsets)
    return VideoTensor(out), grid


def build_mask(cfg: SamplerConfig) -> MaskSpec:
    """Periodic quarter mask: 1 on the bottom-right quadrant of each block.

    mask[x, y] = 1  iff  (x mod 2*s_h) >= s_h  and  (y mod 2*s_w) >= s_w,
    so exactly a quarter of positions are 1 for any even grid.
    """
    cfg.require_even_grid()
    s_h, s_w = cfg.fsize_h, cfg.fsize_w
    rows = (np.arange(cfg.target_h) % (2 * s_h)) >= s_h
    cols = (np.arange(cfg.target_w) % (2 * s_w)) >= s_w
    return MaskSpec((rows[:, None] & cols[None, :]).astype(np.uint8))


def _expand_float(low: np.ndarray, cfg: SamplerConfig) -> np.ndarray:
    """Place half-resolution tiles into bottom-right quadrants; float canvas."""
    s_h, s_w = cfg.fsize_h, cfg.fsize_w
    c, t_n = low.shape[:2]
    canvas = np.zeros((c, t_n, cfg.target_h, cfg.target_w), dtype=low.dtype)
    for k in range(cfg.fragments_h // 2):
        for l in range(cfg.fragments_w // 2):
            canvas[
                :, :,
                2 * k * s_h + s_h:2 * (k + 1) * s_h,
                2 * l * s_w + s_w:2 * (l + 1) * s_w,
            ] = low[:, :, k * s_h:(k + 1) * s_h, l * s_w:(l + 1) * s_w]
    return canvas


def expand_lowres(low: VideoTensor, cfg: SamplerConfig) -> VideoTensor:
    """Scatter a (target/2)-sized clip onto a zero canvas at the mask-one sites."""
    cfg.require_even_grid()
    want = (cfg.target_h // 2, cfg.target_w // 2)
    if (low.height, low.width) != want:
        raise DimError(
            f"low-res dims {low.height}x{low.width} must be {want[0]}x{want[1]}"
        )
    return VideoTensor(_expand_float(low.data, cfg).astype(np.uint8))


def usds(video: VideoTensor, cfg: SamplerConfig,
         seed: int | None = None) -> SampledClip:
    """Unified semantic and distortion sampling.

    Fragments give the distortion layer; a bilinear downsample of the source
    to half the target size, expanded onto the block grid, gives the semantic
    layer.  The two are fused through the quarter mask: semantic pixels where
    the mask is 1, raw fragment pixels elsewhere.  The downsample stays in
    float until the single rounding at fusion.
    """
    cfg.require_even_grid()
    src = video
    if video.height < cfg.target_h or video.width < cfg.target_w:
        # Upscale guard: short sides are brought up to the target so the grid
        # math stays valid; fragment pixels then come from the upscaled frame.
        src = resize_bilinear(
            video, max(video.height, cfg.target_h), max(video.width, cfg.target_w)
        )
    frag, grid = fragments(src, cfg, seed=seed)
    mask = build_mask(cfg).mask
    low = _resize_float(src.data, cfg.target_h // 2, cfg.target_w // 2)
    semantic = _round_u8(_expand_float(low, cfg))
    fused = np.where(mask.astype(bool), semantic, frag.data)
    return SampledClip(VideoTensor(fused), mask.copy(), grid)
