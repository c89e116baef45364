"""Losses, gradient verification, the optimizer, and the training loop.

Two losses drive training: a pairwise hinge that rewards correct score
ordering with margins matching the ground-truth gaps, and a linearity term
(1 - Pearson) / 2 that rewards an affine relationship between predictions and
targets.  Both are differentiable through the autodiff engine and are checked
against central finite differences.

The loop is deliberately plain: decoupled-weight-decay adaptive updates with a
cosine-annealed rate, per-epoch resampling of the sampler's random offsets as
augmentation, and bit-reproducible behavior for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics, model, sampling, video_io
from .autodiff import Tensor, no_grad
from .errors import ConfigError, DimError, NumericError
from .model import ModelConfig, MvqaParams
from .sampling import SamplerConfig
from .video_io import ManifestEntry

_LIN_EPS = 1e-8


@dataclass
class ScoreBatch:
    """Paired predicted and ground-truth scores."""

    predicted: np.ndarray
    truth: np.ndarray


@dataclass
class LossWeights:
    alpha: float = 1.0  # ordering term
    beta: float = 1.0  # linearity term

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise ConfigError("at least one loss weight must be positive")


@dataclass
class TrainConfig:
    learning_rate: float = 0.0025
    weight_decay: float = 0.05
    schedule: str = "cosine"
    steps: int = 300
    batch_size: int = 8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (linearity loss needs variance)")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")


def _as_pred(pred) -> Tensor:
    return pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred))


def loss_mon(pred, truth) -> Tensor:
    """Pairwise ordering hinge, averaged over all m*m ordered pairs.

    term(i, j) = max(0, |q_i - q_j| - sign(q_i - q_j) * (p_i - p_j)) with
    sign(0) taken as +1; diagonal pairs contribute exactly zero.  Zero iff
    every predicted difference matches or exceeds the true gap in the right
    direction; invariant to adding a constant to the predictions.
    """
    p = _as_pred(pred)
    q = np.asarray(truth, dtype=p.dtype)
    if p.ndim != 1 or p.shape != q.shape:
        raise DimError(f"score shapes differ: {p.shape} vs {q.shape}")
    m = q.size
    if m < 1:
        raise DimError("need at least one score")
    gaps = np.abs(q[:, None] - q[None, :])
    direction = np.where(q[:, None] >= q[None, :], 1.0, -1.0).astype(p.dtype)
    diffs = p.reshape(m, 1) - p.reshape(1, m)
    hinge = (Tensor(gaps) - Tensor(direction) * diffs).relu()
    return hinge.sum() * (1.0 / (m * m))


def loss_lin(pred, truth) -> Tensor:
    """(1 - Pearson(pred, truth)) / 2 with the denominator stabilized by
    adding 1e-8 inside the square root, so constant predictions give ~0.5
    rather than an error (training must survive degenerate batches)."""
    p = _as_pred(pred)
    q = np.asarray(truth, dtype=p.dtype)
    if p.ndim != 1 or p.shape != q.shape:
        raise DimError(f"score shapes differ: {p.shape} vs {q.shape}")
    if q.size < 2:
        raise DimError("linearity loss needs at least two scores")
    qc = q - q.mean()
    pc = p - p.mean()
    sxy = (pc * Tensor(qc)).sum()
    sxx = (pc * pc).sum()
    syy = float(np.dot(qc, qc))
    r = sxy / (sxx * syy + _LIN_EPS).sqrt()
    return (1.0 - r) * 0.5


def loss_total(pred, truth, weights: LossWeights) -> Tensor:
    terms = []
    if weights.alpha != 0.0:
        terms.append(loss_mon(pred, truth) * weights.alpha)
    if weights.beta != 0.0:
        terms.append(loss_lin(pred, truth) * weights.beta)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def grad_check(fn, params: list[Tensor], epsilon: float = 1e-6,
               samples: int | None = None, seed: int = 0,
               atol: float = 1e-7) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` recomputes the scalar output from ``params`` (the point being
    checked).  When ``samples`` is given, that many coordinates are drawn
    uniformly across all parameters; otherwise every coordinate is checked.
    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.

    A coordinate where both |analytic| and |numeric| fall below ``atol``
    counts as agreeing: a central difference of two nearly equal function
    values cannot resolve slopes under the float rounding floor, so such
    pairs are zero within measurement resolution.  A mismatch where only one
    side is tiny still fails, so silently dropped gradients are caught.
    """
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    for p in params:
        p.grad = None
    out = fn()
    if not np.isfinite(out.data).all():
        raise NumericError("non-finite output in grad_check")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if samples is not None and samples < len(coords):
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[int(c)] for c in picked]

    worst = 0.0
    for pi, flat in coords:
        p = params[pi]
        orig = p.data.flat[flat]
        p.data.flat[flat] = orig + epsilon
        with no_grad():
            f_plus = float(fn().data)
        p.data.flat[flat] = orig - epsilon
        with no_grad():
            f_minus = float(fn().data)
        p.data.flat[flat] = orig
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        if not (math.isfinite(numeric) and math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError(f"non-finite finite-difference value at coordinate {flat}")
        a = float(analytic[pi].flat[flat])
        if max(abs(a), abs(numeric)) <= atol:
            continue
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, named_params, lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 no_decay: tuple[str, ...] = ("_b", "_b1", "_b2", "norm_w",
                                              "a_log", "d_skip", "x_reg",
                                              "p_s", "p_t")):
        self.params = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for _, p in self.params]
        self._v = [np.zeros_like(p.data) for _, p in self.params]
        self._decay_mask = [
            0.0 if any(name.endswith(s) for s in no_decay) else 1.0
            for name, _ in self.params
        ]

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        rate = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (_, p) in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            update = (self._m[i] / c1) / (np.sqrt(self._v[i] / c2) + self.eps)
            if self.weight_decay and self._decay_mask[i]:
                update = update + self.weight_decay * p.data
            p.data = (p.data - rate * update).astype(p.data.dtype)


def cosine_lr(step: int, total: int, base: float) -> float:
    """Cosine annealing from ``base`` at step 0 toward 0 at step ``total``."""
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


@dataclass
class TrainHistory:
    steps: list[tuple[int, float, float]] = field(default_factory=list)  # step, loss, lr
    epochs: list[tuple[int, float, float]] = field(default_factory=list)  # epoch, srocc, plcc

    def loss_csv(self) -> str:
        lines = ["step,loss,lr"]
        lines += [f"{s},{l!r},{r!r}" for s, l, r in self.steps]
        return "\n".join(lines) + "\n"

    def metrics_csv(self) -> str:
        lines = ["epoch,srocc,plcc"]
        lines += [f"{e},{s!r},{p!r}" for e, s, p in self.epochs]
        return "\n".join(lines) + "\n"

    @property
    def final_srocc(self) -> float:
        return self.epochs[-1][1] if self.epochs else float("nan")


def _derived_seed(*parts: int) -> int:
    seq = np.random.SeedSequence(entropy=[p & 0xFFFFFFFF for p in parts])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def _prepare_clip(clip, frames: int, sampler_cfg: SamplerConfig, seed: int) -> np.ndarray:
    sampled = sampling.temporal_sample(clip, frames)
    fused = sampling.usds(sampled, sampler_cfg, seed=seed)
    return video_io.to_float(fused.clip).data


def default_sampler_for(config: ModelConfig) -> SamplerConfig:
    """Sampler whose target matches the model input (16-pixel patches)."""
    return SamplerConfig(
        fragments_h=config.height // 16, fragments_w=config.width // 16,
        fsize_h=16, fsize_w=16,
    )


def train(entries: list[ManifestEntry], model_config: ModelConfig,
          train_config: TrainConfig,
          sampler_config: SamplerConfig | None = None,
          log=None) -> tuple[MvqaParams, TrainHistory]:
    """Fit the model on the manifest's clips.

    Per step: uniform temporal sampling, mask-fusion spatial sampling with
    per-epoch reseeded offsets, forward over the batch, combined loss,
    reverse-mode gradients, one decoupled-weight-decay update on the
    cosine-annealed schedule.  History records every step's loss and each
    epoch's training rank correlation (predictions on deterministically
    sampled clips).
    """
    if not entries:
        raise ConfigError("empty dataset manifest")
    if len(entries) < 2:
        raise ConfigError("training needs at least two clips")
    sampler_cfg = sampler_config or default_sampler_for(model_config)
    if (sampler_cfg.target_h, sampler_cfg.target_w) != (model_config.height,
                                                        model_config.width):
        raise ConfigError(
            f"sampler target {sampler_cfg.target_h}x{sampler_cfg.target_w} "
            f"does not match model input {model_config.height}x{model_config.width}"
        )

    clips = [video_io.read_rvid(e.path) for e in entries]
    scores = np.array([e.mos for e in entries], dtype=np.float64)
    n = len(clips)
    batch_size = min(train_config.batch_size, n)
    if batch_size < 2:
        raise ConfigError("batch size after clamping must be >= 2")

    params = model.init_params(model_config, seed=train_config.seed)
    opt = AdamW(params.named_parameters(), lr=train_config.learning_rate,
                weight_decay=train_config.weight_decay,
                betas=(train_config.beta1, train_config.beta2),
                eps=train_config.eps)
    order_rng = np.random.default_rng(_derived_seed(train_config.seed, 1))

    # Evaluation inputs are sampled once with a fixed seed so per-epoch
    # metrics measure the model, not the augmentation.
    eval_batch = np.stack([
        _prepare_clip(c, model_config.frames, sampler_cfg,
                      _derived_seed(train_config.seed, 2, i))
        for i, c in enumerate(clips)
    ])

    history = TrainHistory()
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    perm = order_rng.permutation(n)
    cursor = 0
    epoch = 0
    cache_epoch = -1
    cached: dict[int, np.ndarray] = {}

    for step in range(train_config.steps):
        if cursor + batch_size > n:
            perm = order_rng.permutation(n)
            cursor = 0
        idx = perm[cursor:cursor + batch_size]
        cursor += batch_size

        if cache_epoch != epoch:
            cached = {}
            cache_epoch = epoch
        batch = []
        for i in idx:
            i = int(i)
            if i not in cached:
                cached[i] = _prepare_clip(
                    clips[i], model_config.frames, sampler_cfg,
                    _derived_seed(train_config.seed, 4, epoch, i))
            batch.append(cached[i])
        inputs = np.stack(batch)
        target = scores[idx]

        if train_config.schedule == "cosine":
            lr = cosine_lr(step, train_config.steps, train_config.learning_rate)
        else:
            lr = train_config.learning_rate

        pred = model.forward(inputs, params)
        loss = loss_total(pred, target, train_config.weights)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            raise NumericError(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step(lr)
        history.steps.append((step, loss_val, lr))

        if (step + 1) % steps_per_epoch == 0 or step + 1 == train_config.steps:
            with no_grad():
                preds = model.forward(eval_batch, params).data
            epoch_srocc = metrics.srocc(preds, scores)
            epoch_plcc = metrics.plcc(preds, scores)
            if not history.epochs or history.epochs[-1][0] != epoch:
                history.epochs.append((epoch, epoch_srocc, epoch_plcc))
            else:
                history.epochs[-1] = (epoch, epoch_srocc, epoch_plcc)
            if log is not None:
                log(f"step {step + 1}/{train_config.steps} "
                    f"loss {loss_val:.4f} lr {lr:.2e} "
                    f"train srocc {epoch_srocc:+.4f}")
            if (step + 1) % steps_per_epoch == 0:
                epoch += 1

    return params, history
