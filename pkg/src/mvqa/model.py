"""The quality-prediction network and its bookkeeping.

A clip is cut into non-overlapping 1 x 16 x 16 patches, each linearly mapped to
an embedding; tokens are ordered spatial-first / temporal-next, a learnable
regression token is prepended, and spatial + temporal position embeddings are
added.  A stack of bidirectional selective-scan blocks encodes the sequence;
the final regression-token state goes through layer norm and a two-layer GELU
head to produce the scalar quality score.

Also here: exact parameter counting, analytic multiply-accumulate estimates,
and a versioned binary checkpoint ("MVQC") with bitwise round-trips.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import ssm_core
from .autodiff import Parameter, Tensor, concat, layer_norm, no_grad
from .errors import ConfigError, DimError, FormatError, IoError
from .ssm_core import VimBlockParams, init_vim_block
from .video_io import FloatClip

CHECKPOINT_MAGIC = b"MVQC"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class ModelConfig:
    depth: int = 24
    dim: int = 192
    frames: int = 32
    height: int = 224
    width: int = 224
    patch_t: int = 1
    patch_h: int = 16
    patch_w: int = 16
    channels: int = 3
    head_hidden: int | None = None
    d_state: int = 16
    expand: int = 2
    conv_width: int = 4
    variant: str = "custom"

    def __post_init__(self):
        if self.head_hidden is None:
            self.head_hidden = self.dim
        if self.patch_t != 1:
            raise ConfigError("temporal patch size is fixed to 1")
        if self.height % self.patch_h or self.width % self.patch_w:
            raise ConfigError(
                f"input {self.height}x{self.width} not divisible by patch "
                f"{self.patch_h}x{self.patch_w}"
            )
        if min(self.depth, self.dim, self.frames) < 1:
            raise ConfigError("depth, dim, and frames must be positive")

    @property
    def grid_h(self) -> int:
        return self.height // self.patch_h

    @property
    def grid_w(self) -> int:
        return self.width // self.patch_w

    @property
    def tokens_per_frame(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def seq_len(self) -> int:
        """Total sequence length including the regression token."""
        return self.frames * self.tokens_per_frame + 1

    @property
    def embed_in(self) -> int:
        return self.channels * self.patch_t * self.patch_h * self.patch_w

    def to_dict(self) -> dict:
        return {
            "depth": self.depth, "dim": self.dim, "frames": self.frames,
            "height": self.height, "width": self.width,
            "patch_t": self.patch_t, "patch_h": self.patch_h,
            "patch_w": self.patch_w, "channels": self.channels,
            "head_hidden": self.head_hidden, "d_state": self.d_state,
            "expand": self.expand, "conv_width": self.conv_width,
            "variant": self.variant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


PRESETS = {
    # Desk-scale preset used by the gradient-check and overfit suites.
    "nano": dict(depth=2, dim=32, frames=8, height=64, width=64, variant="nano"),
    "tiny": dict(depth=24, dim=192, frames=32, height=224, width=224, variant="tiny"),
    "middle": dict(depth=32, dim=576, frames=32, height=224, width=224, variant="middle"),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


@dataclass
class MvqaParams:
    config: ModelConfig
    embed_w: Parameter  # (embed_in, dim)
    embed_b: Parameter  # (dim,)
    x_reg: Parameter  # (dim,) regression token
    p_s: Parameter  # (tokens_per_frame + 1, dim) spatial positions, row 0 = reg
    p_t: Parameter  # (frames, dim) temporal positions
    blocks: list[VimBlockParams]
    final_norm_w: Parameter
    final_norm_b: Parameter
    head_w1: Parameter  # (dim, head_hidden)
    head_b1: Parameter
    head_w2: Parameter  # (head_hidden, 1)
    head_b2: Parameter

    def named_parameters(self):
        for name in ("embed_w", "embed_b", "x_reg", "p_s", "p_t"):
            yield name, getattr(self, name)
        for i, blk in enumerate(self.blocks):
            yield from blk.named_parameters(f"blocks.{i}.")
        for name in ("final_norm_w", "final_norm_b",
                     "head_w1", "head_b1", "head_w2", "head_b2"):
            yield name, getattr(self, name)

    @property
    def dtype(self):
        return self.embed_w.dtype


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> MvqaParams:
    """Deterministic initialization: truncated normal (std 0.02, cut at 2 std)
    for embeddings, tokens, and projections; zero biases; scan-specific values
    (state ramp, step-size bias, unit skip) per the block initializer."""
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    tn = lambda shape: Parameter(ssm_core._trunc_normal(rng, shape, 0.02, dtype))
    zeros = lambda shape: Parameter(np.zeros(shape, dtype=dtype))
    return MvqaParams(
        config=config,
        embed_w=tn((config.embed_in, config.dim)),
        embed_b=zeros((config.dim,)),
        x_reg=tn((config.dim,)),
        p_s=tn((config.tokens_per_frame + 1, config.dim)),
        p_t=tn((config.frames, config.dim)),
        blocks=[
            init_vim_block(config.dim, rng, d_state=config.d_state,
                           expand=config.expand, conv_width=config.conv_width,
                           dtype=dtype)
            for _ in range(config.depth)
        ],
        final_norm_w=Parameter(np.ones(config.dim, dtype=dtype)),
        final_norm_b=zeros((config.dim,)),
        head_w1=tn((config.dim, config.head_hidden)),
        head_b1=zeros((config.head_hidden,)),
        head_w2=tn((config.head_hidden, 1)),
        head_b2=zeros((1,)),
    )


def cast_params(params: MvqaParams, dtype) -> MvqaParams:
    """Copy of the parameter set in another float dtype (for f64 checks)."""
    out = init_params(params.config, seed=0, dtype=dtype)
    for (_, src), (_, dst) in zip(params.named_parameters(), out.named_parameters()):
        dst.data = src.data.astype(dtype)
    return out


def _clip_array(clip) -> np.ndarray:
    if isinstance(clip, FloatClip):
        return clip.data
    return np.asarray(clip)


def embed_3d(clip, params: MvqaParams):
    """Patchify and linearly embed; returns a (T, Hp, Wp, dim) token grid
    (batched input (B, C, T, H, W) yields a leading batch axis)."""
    cfg = params.config
    x = _clip_array(clip)
    squeeze = x.ndim == 4
    if squeeze:
        x = x[None]
    b, c, t, h, w = x.shape
    if (c, t, h, w) != (cfg.channels, cfg.frames, cfg.height, cfg.width):
        raise DimError(
            f"clip dims {(c, t, h, w)} do not match config "
            f"{(cfg.channels, cfg.frames, cfg.height, cfg.width)}"
        )
    hp, wp, ph, pw = cfg.grid_h, cfg.grid_w, cfg.patch_h, cfg.patch_w
    patches = (
        x.reshape(b, c, t, hp, ph, wp, pw)
        .transpose(0, 2, 3, 5, 1, 4, 6)
        .reshape(b, t, hp, wp, c * ph * pw)
        .astype(params.dtype)
    )
    grid = Tensor(patches) @ params.embed_w + params.embed_b
    return grid.reshape(grid.shape[1:]) if squeeze else grid


def assemble_sequence(grid, params: MvqaParams) -> Tensor:
    """Flatten spatial-first/temporal-next, prepend the regression token, and
    add position embeddings.

    Spatial embeddings repeat per frame (slot 0 is reserved for the regression
    token); each frame's temporal embedding broadcasts over that frame's
    tokens.  The regression token receives no temporal embedding: it stands
    outside every frame.
    """
    g = grid if isinstance(grid, Tensor) else Tensor(grid)
    squeeze = g.ndim == 4
    if squeeze:
        g = g.reshape(1, *g.shape)
    b, t, hp, wp, dim = g.shape
    cfg = params.config
    if (t, hp, wp, dim) != (cfg.frames, cfg.grid_h, cfg.grid_w, cfg.dim):
        raise DimError(f"grid shape {(t, hp, wp, dim)} does not match config")
    per_frame = hp * wp
    flat = g.reshape(b, t * per_frame, dim)
    spatial = (
        params.p_s[1:].reshape(1, per_frame, dim)
        .broadcast_to((t, per_frame, dim))
        .reshape(t * per_frame, dim)
    )
    temporal = (
        params.p_t.reshape(t, 1, dim)
        .broadcast_to((t, per_frame, dim))
        .reshape(t * per_frame, dim)
    )
    body = flat + (spatial + temporal)
    reg = (params.x_reg + params.p_s[0]).reshape(1, 1, dim).broadcast_to((b, 1, dim))
    seq = concat([reg, body], axis=1)
    return seq.reshape(seq.shape[1:]) if squeeze else seq


def forward(clip, params: MvqaParams) -> Tensor:
    """Full forward pass; returns a scalar Tensor (or (B,) for batched input)."""
    x = _clip_array(clip)
    squeeze = x.ndim == 4
    grid = embed_3d(x[None] if squeeze else x, params)
    seq = assemble_sequence(grid, params)
    for blk in params.blocks:
        seq = ssm_core.vim_block(seq, blk)
    token0 = seq[:, 0, :]
    feat = layer_norm(token0, params.final_norm_w, params.final_norm_b)
    hidden = (feat @ params.head_w1 + params.head_b1).gelu()
    score = hidden @ params.head_w2 + params.head_b2
    score = score.reshape(score.shape[0])
    return score.reshape(()) if squeeze else score


def predict(clip, params: MvqaParams) -> float:
    """Inference-only score for one clip."""
    with no_grad():
        return float(forward(clip, params).data)


def encode_tokens(tokens, params: MvqaParams) -> Tensor:
    """Run only the block stack over a raw (B, L, dim) token sequence."""
    seq = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    for blk in params.blocks:
        seq = ssm_core.vim_block(seq, blk)
    return seq


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------


def count_params(config: ModelConfig) -> int:
    """Exact parameter count, matching init_params tensor for tensor."""
    dim = config.dim
    di = config.expand * dim
    n = config.d_state
    r = math.ceil(dim / 16)
    k = config.conv_width
    per_dir = (di * k + di) + (di * (r + 2 * n) + (r + 2 * n)) \
        + (r * di + di) + di * n + di
    per_block = 2 * dim + 3 * dim * di + 2 * per_dir
    embed = config.embed_in * dim + dim
    tokens = dim + (config.tokens_per_frame + 1) * dim + config.frames * dim
    head = dim * config.head_hidden + config.head_hidden + config.head_hidden + 1
    return embed + tokens + config.depth * per_block + 2 * dim + head


def flop_breakdown(config: ModelConfig) -> dict[str, int]:
    """Analytic multiply-accumulate counts for one clip at the config's input
    size, itemized over embedding, block projections, scans, and the head.

    Counts are multiply-accumulates (the convention under which published
    model-cost figures in this area are comparable); one MAC = one fused
    multiply-add.
    """
    dim = config.dim
    di = config.expand * dim
    n = config.d_state
    r = math.ceil(dim / 16)
    k = config.conv_width
    seq = config.seq_len
    body = seq - 1
    per_tok_proj = 2 * dim * di + di * dim  # input expansion + output projection
    per_tok_dbc = 2 * (di * (r + 2 * n) + r * di)  # step/B/C projections, both dirs
    per_tok_conv = 2 * di * k
    per_tok_scan = 2 * (4 * di * n + 2 * di)  # recurrence + readout + skip, both dirs
    per_tok_misc = 2 * dim + 3 * di  # pre-norm and gating
    blocks = config.depth * seq * (
        per_tok_proj + per_tok_dbc + per_tok_conv + per_tok_scan + per_tok_misc
    )
    return {
        "embedding": body * config.embed_in * dim,
        "block_projections": config.depth * seq * (per_tok_proj + per_tok_dbc),
        "block_conv": config.depth * seq * per_tok_conv,
        "block_scan": config.depth * seq * per_tok_scan,
        "block_misc": config.depth * seq * per_tok_misc,
        "head": 2 * dim + dim * config.head_hidden + config.head_hidden,
        "total": blocks + body * config.embed_in * dim
        + 2 * dim + dim * config.head_hidden + config.head_hidden,
    }


def estimate_flops(config: ModelConfig) -> int:
    """Total analytic multiply-accumulate count for one clip."""
    return flop_breakdown(config)["total"]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: MvqaParams, path) -> None:
    """Versioned binary dump; load_checkpoint restores it bitwise."""
    config_blob = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    names = list(params.named_parameters())
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(config_blob)))
            fh.write(config_blob)
            fh.write(struct.pack("<I", len(names)))
            for name, p in names:
                raw = name.encode()
                arr = np.ascontiguousarray(p.data)
                if arr.dtype not in _DTYPE_CODES:
                    raise FormatError(f"unsupported dtype {arr.dtype} for {name}")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> MvqaParams:
    """Restore a checkpoint; the stored config must match ``expect_config``
    when given, and the tensor table must cover the model exactly."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, cfg_len = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    config = ModelConfig.from_dict(json.loads(blob[off:off + cfg_len].decode()))
    if expect_config is not None and config.to_dict() != expect_config.to_dict():
        raise FormatError(f"{path}: checkpoint config does not match expected config")
    off += cfg_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode()
        off += name_len
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        if code not in _CODE_DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name}")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if off + nbytes > len(blob):
            raise FormatError(f"{path}: truncated tensor payload for {name}")
        table[name] = np.frombuffer(blob[off:off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
    dtype = next(iter(table.values())).dtype if table else np.float32
    params = init_params(config, seed=0, dtype=dtype)
    for name, p in params.named_parameters():
        if name not in table:
            raise FormatError(f"{path}: missing parameter {name}")
        stored = table.pop(name)
        if stored.shape != p.data.shape:
            raise FormatError(
                f"{path}: shape mismatch for {name}: {stored.shape} vs {p.data.shape}"
            )
        p.data = stored
    if table:
        raise FormatError(f"{path}: unexpected parameters {sorted(table)}")
    return params
