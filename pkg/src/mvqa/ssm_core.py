"""State-space sequence engine.

Two layers live here.  The verification layer works on plain numpy: zero-order
hold discretization of a diagonal continuous-time system, the exact recurrent
scan, and the equivalent convolution kernel.  The model layer is built on the
autodiff engine: the input-dependent (selective) scan, where the step size and
the state input/output projections are functions of the current token, and the
bidirectional gated block that wraps two such scans around a shared output
projection and residual connection.

The sequential scan is the reference semantics; the convolutional form exists
to cross-check the time-invariant case, not to run the selective path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    causal_conv1d,
    layer_norm,
    selective_scan_core,
)
from .errors import DimError, ParamError

# Threshold below which (exp(x) - 1) / x is replaced by its limit value 1.
_ZOH_LIMIT = 1e-8


@dataclass
class SSMParams:
    """Continuous-time diagonal system: h' = a*h + b*x, y = c.h + d*x.

    ``a`` stores the diagonal of the state matrix (length N); ``delta`` is the
    sampling timescale used by discretization.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: float
    delta: float


@dataclass
class DiscreteSSM:
    """Discrete diagonal system produced by :func:`discretize_zoh`."""

    a_bar: np.ndarray
    b_bar: np.ndarray


@dataclass
class SSMKernel:
    """Length-L convolution kernel equivalent to the discrete recurrence."""

    k_bar: np.ndarray


def discretize_zoh(params: SSMParams) -> DiscreteSSM:
    """Zero-order-hold discretization of a diagonal system.

    a_bar = exp(delta * a) elementwise, and
    b_bar = (exp(delta * a) - 1) / a * b, with the analytic limit
    b_bar -> delta * b used when |delta * a| < 1e-8 (covers a = 0 exactly).
    """
    if params.delta <= 0:
        raise ParamError(f"delta must be positive, got {params.delta}")
    a = np.asarray(params.a)
    b = np.asarray(params.b)
    da = params.delta * a
    a_bar = np.exp(da)
    small = np.abs(da) < _ZOH_LIMIT
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = (a_bar - 1.0) / a
    b_bar = np.where(small, params.delta * b, factor * b)
    return DiscreteSSM(a_bar.astype(a.dtype), b_bar.astype(b.dtype))


def scan_recurrent(disc: DiscreteSSM, c: np.ndarray, d: float,
                   x: np.ndarray) -> np.ndarray:
    """Exact left-to-right recurrence h_k = a_bar*h_{k-1} + b_bar*x_k,
    y_k = c.h_k + d*x_k, starting from h = 0."""
    x = np.asarray(x)
    h = np.zeros_like(disc.a_bar)
    y = np.empty_like(x)
    for k in range(x.shape[0]):
        h = disc.a_bar * h + disc.b_bar * x[k]
        y[k] = np.dot(c, h) + d * x[k]
    return y


def build_kernel(disc: DiscreteSSM, c: np.ndarray, length: int) -> SSMKernel:
    """k_bar[j] = c . (a_bar^j * b_bar) for j in [0, length)."""
    if length < 1:
        raise DimError(f"kernel length must be >= 1, got {length}")
    powers = disc.a_bar[None, :] ** np.arange(length)[:, None]
    return SSMKernel(powers @ (np.asarray(c) * disc.b_bar))


def apply_kernel(kernel: SSMKernel, d: float, x: np.ndarray) -> np.ndarray:
    """Causal convolution y_k = sum_{j<=k} k_bar[j]*x[k-j] + d*x[k]."""
    x = np.asarray(x)
    if kernel.k_bar.shape[0] != x.shape[0]:
        raise DimError(
            f"kernel length {kernel.k_bar.shape[0]} != sequence length {x.shape[0]}"
        )
    return np.convolve(x, kernel.k_bar)[: x.shape[0]] + d * x


# ---------------------------------------------------------------------------
# Selective scan and the bidirectional block
# ---------------------------------------------------------------------------


@dataclass
class VimDirectionParams:
    """Parameters of one scan direction (forward and backward are independent)."""

    conv_w: Parameter  # (d_inner, conv_width) depthwise causal kernel
    conv_b: Parameter  # (d_inner,)
    x_proj_w: Parameter  # (d_inner, dt_rank + 2*d_state): step, B, C projections
    x_proj_b: Parameter  # (dt_rank + 2*d_state,)
    dt_w: Parameter  # (dt_rank, d_inner) low-rank step-size expansion
    dt_b: Parameter  # (d_inner,)
    a_log: Parameter  # (d_inner, d_state); state matrix is -exp(a_log)
    d_skip: Parameter  # (d_inner,)


@dataclass
class VimBlockParams:
    """One bidirectional block: pre-norm, gated two-direction scan, residual."""

    dim: int
    d_inner: int
    d_state: int
    dt_rank: int
    conv_width: int
    norm_w: Parameter
    norm_b: Parameter
    in_proj_x: Parameter  # (dim, d_inner)
    in_proj_z: Parameter  # (dim, d_inner) gate branch
    out_proj: Parameter  # (d_inner, dim), shared by both directions
    fwd: VimDirectionParams
    bwd: VimDirectionParams

    def named_parameters(self, prefix: str = ""):
        for name in ("norm_w", "norm_b", "in_proj_x", "in_proj_z", "out_proj"):
            yield f"{prefix}{name}", getattr(self, name)
        for dname, dparams in (("fwd", self.fwd), ("bwd", self.bwd)):
            for f in fields(VimDirectionParams):
                yield f"{prefix}{dname}.{f.name}", getattr(dparams, f.name)


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) with samples outside 2 std redrawn."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def _init_direction(rng: np.random.Generator, d_inner: int, d_state: int,
                    dt_rank: int, conv_width: int, dtype) -> VimDirectionParams:
    # Step-size bias: softplus(dt_b) lands log-uniformly in [1e-3, 1e-1].
    dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=d_inner))
    dt_b = np.log(np.expm1(dt))
    dt_std = dt_rank ** -0.5
    # State matrix starts at -(1..d_state) per channel, a real diagonal ramp.
    a_log = np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (d_inner, 1))
    return VimDirectionParams(
        conv_w=Parameter(_trunc_normal(rng, (d_inner, conv_width), 0.02, dtype)),
        conv_b=Parameter(np.zeros(d_inner, dtype=dtype)),
        x_proj_w=Parameter(
            _trunc_normal(rng, (d_inner, dt_rank + 2 * d_state), 0.02, dtype)
        ),
        x_proj_b=Parameter(np.zeros(dt_rank + 2 * d_state, dtype=dtype)),
        dt_w=Parameter(rng.uniform(-dt_std, dt_std, size=(dt_rank, d_inner)).astype(dtype)),
        dt_b=Parameter(dt_b.astype(dtype)),
        a_log=Parameter(a_log.astype(dtype)),
        d_skip=Parameter(np.ones(d_inner, dtype=dtype)),
    )


def init_vim_block(dim: int, rng: np.random.Generator, d_state: int = 16,
                   expand: int = 2, conv_width: int = 4,
                   dtype=np.float32) -> VimBlockParams:
    d_inner = expand * dim
    dt_rank = math.ceil(dim / 16)
    return VimBlockParams(
        dim=dim,
        d_inner=d_inner,
        d_state=d_state,
        dt_rank=dt_rank,
        conv_width=conv_width,
        norm_w=Parameter(np.ones(dim, dtype=dtype)),
        norm_b=Parameter(np.zeros(dim, dtype=dtype)),
        in_proj_x=Parameter(_trunc_normal(rng, (dim, d_inner), 0.02, dtype)),
        in_proj_z=Parameter(_trunc_normal(rng, (dim, d_inner), 0.02, dtype)),
        out_proj=Parameter(_trunc_normal(rng, (d_inner, dim), 0.02, dtype)),
        fwd=_init_direction(rng, d_inner, d_state, dt_rank, conv_width, dtype),
        bwd=_init_direction(rng, d_inner, d_state, dt_rank, conv_width, dtype),
    )


def _flip(t: Tensor, axis: int) -> Tensor:
    idx = [slice(None)] * t.ndim
    idx[axis] = slice(None, None, -1)
    return t[tuple(idx)]


def _as_batched(x) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 2:
        return t.reshape(1, *t.shape), True
    if t.ndim == 3:
        return t, False
    raise DimError(f"expected (L, d) or (B, L, d), got shape {t.shape}")


def selective_scan(x, p: VimDirectionParams, direction: str = "forward") -> Tensor:
    """Run the input-dependent scan over a (B, L, d_inner) or (L, d_inner) input.

    Per token: step delta = softplus(low-rank projection of x), state input B
    and readout C are linear in x, and the recurrence
    h_k = exp(delta_k * a) h_{k-1} + delta_k B_k x_k, y_k = C_k . h_k + d * x_k
    runs in the requested direction ("backward" = forward on the reversed
    sequence, then reversed back).
    """
    if direction not in ("forward", "backward"):
        raise DimError(f"unknown direction {direction!r}")
    t, squeeze = _as_batched(x)
    if direction == "backward":
        t = _flip(t, 1)
    dt_rank = p.dt_w.shape[0]
    d_state = p.a_log.shape[1]
    dbc = t @ p.x_proj_w + p.x_proj_b
    delta = (dbc[:, :, :dt_rank] @ p.dt_w + p.dt_b).softplus()
    b_seq = dbc[:, :, dt_rank:dt_rank + d_state]
    c_seq = dbc[:, :, dt_rank + d_state:]
    a = -p.a_log.exp()
    y = selective_scan_core(t, delta, a, b_seq, c_seq, p.d_skip)
    if direction == "backward":
        y = _flip(y, 1)
    return y.reshape(y.shape[1:]) if squeeze else y


def vim_block(tokens, p: VimBlockParams) -> Tensor:
    """Pre-norm bidirectional block with gating and a residual connection.

    Both directions share the input expansion and the gate; each direction has
    its own causal convolution and scan parameters.  Direction outputs are
    summed, projected back to ``dim``, and added to the input.
    """
    t, squeeze = _as_batched(tokens)
    normed = layer_norm(t, p.norm_w, p.norm_b)
    xs = normed @ p.in_proj_x
    gate = (normed @ p.in_proj_z).silu()
    branches = []
    for dirp, backward in ((p.fwd, False), (p.bwd, True)):
        u = _flip(xs, 1) if backward else xs
        u = causal_conv1d(u, dirp.conv_w, dirp.conv_b).silu()
        y = selective_scan(u, dirp, "forward")
        if backward:
            y = _flip(y, 1)
        branches.append(y * gate)
    out = t + (branches[0] + branches[1]) @ p.out_proj
    return out.reshape(out.shape[1:]) if squeeze else out


def scan_order(token_grid, direction: str = "forward"):
    """Flatten a (T, Hp, Wp, dim) grid spatial-first, temporal-next.

    Each frame is flattened row-major, frames are concatenated in time order;
    "backward" reverses the resulting sequence.
    """
    if direction not in ("forward", "backward"):
        raise DimError(f"unknown direction {direction!r}")
    grid = token_grid if isinstance(token_grid, Tensor) else Tensor(token_grid)
    if grid.ndim != 4:
        raise DimError(f"expected (T, Hp, Wp, dim), got shape {grid.shape}")
    t, hp, wp, dim = grid.shape
    seq = grid.reshape(t * hp * wp, dim)
    if direction == "backward":
        seq = _flip(seq, 0)
    return seq
