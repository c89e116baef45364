"""Command-line entry point.

Subcommands: gen-synth, sample, train, eval, bench, flops, grad-check.
Configuration comes from an optional JSON file with "model", "sampler", and
"train" sections; command-line flags override file values, which override
defaults.  Unknown keys are rejected and every run echoes its fully resolved
configuration so artifacts are reproducible from logs alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics, model, sampling, training, video_io
from .autodiff import Tensor, no_grad
from .errors import ConfigError, DegenerateError, MvqaError
from .model import ModelConfig
from .sampling import SamplerConfig
from .training import LossWeights, TrainConfig

_SECTIONS = ("model", "sampler", "train")


def _dataclass_keys(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    allowed = {
        "model": _dataclass_keys(ModelConfig) | {"preset"},
        "sampler": _dataclass_keys(SamplerConfig),
        "train": _dataclass_keys(TrainConfig) | {"alpha", "beta"} - {"weights"},
    }
    for section, keys in allowed.items():
        extra = set(raw.get(section, {})) - keys
        if extra:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")
    return raw


def _build_model_config(file_cfg: dict, args) -> ModelConfig:
    section = dict(file_cfg.get("model", {}))
    preset_name = getattr(args, "model", None) or section.pop("preset", None)
    if preset_name:
        return model.preset(preset_name, **section)
    return ModelConfig(**section) if section else model.preset("nano")


def _build_sampler_config(file_cfg: dict, args, mconfig: ModelConfig | None) -> SamplerConfig:
    section = dict(file_cfg.get("sampler", {}))
    if getattr(args, "seed", None) is not None:
        section["seed"] = args.seed
    if section:
        return SamplerConfig(**section)
    if mconfig is not None:
        cfg = training.default_sampler_for(mconfig)
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
        return cfg
    return SamplerConfig()


def _build_train_config(file_cfg: dict, args) -> TrainConfig:
    section = dict(file_cfg.get("train", {}))
    alpha = section.pop("alpha", None)
    beta = section.pop("beta", None)
    if alpha is not None or beta is not None:
        section["weights"] = LossWeights(
            alpha=1.0 if alpha is None else alpha,
            beta=1.0 if beta is None else beta,
        )
    for flag in ("steps", "batch_size", "seed"):
        val = getattr(args, flag, None)
        if val is not None:
            section[flag] = val
    lr = getattr(args, "lr", None)
    if lr is not None:
        section["learning_rate"] = lr
    return TrainConfig(**section)


def _echo(label: str, payload) -> None:
    if dataclasses.is_dataclass(payload):
        payload = dataclasses.asdict(payload)
    print(f"resolved {label}: {json.dumps(payload, default=str)}")


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ConfigError(f"dims must look like TxHxW, got {text!r}")
    t, h, w = (int(p) for p in parts)
    return t, h, w


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dims = _parse_dims(args.dims)
    count = args.count
    if count < 1:
        raise ConfigError("count must be >= 1")
    levels = [0.0] if count == 1 else [i / (count - 1) for i in range(count)]
    entries = []
    for i, level in enumerate(levels):
        spec = video_io.SynthSpec(
            base_pattern=args.pattern, distortion=args.distortion,
            level=level, dims=dims, seed=(args.seed or 0) * 100003 + i,
        )
        clip, record = video_io.generate_synthetic(spec)
        name = f"clip_{i:03d}.rvid"
        video_io.write_rvid(clip, out_dir / name)
        entries.append(video_io.ManifestEntry(f"{i:03d}_{record.clip_id}", name,
                                              record.mos))
    manifest = out_dir / "manifest.csv"
    video_io.write_manifest(entries, manifest)
    _echo("gen-synth", {"count": count, "dims": args.dims, "seed": args.seed,
                        "pattern": args.pattern, "distortion": args.distortion,
                        "out_dir": str(out_dir)})
    print(f"wrote {count} clips and {manifest}")
    return 0


def cmd_sample(args) -> int:
    file_cfg = load_config_file(args.config) if args.config else {}
    cfg = _build_sampler_config(file_cfg, args, None)
    video = video_io.read_rvid(args.input)
    out_path = Path(args.out)
    if args.sampler == "resize":
        result = sampling.resize_bilinear(video, cfg.target_h, cfg.target_w)
        video_io.write_rvid(result, out_path)
    elif args.sampler == "crop":
        result = sampling.center_crop(video, cfg.target_h, cfg.target_w)
        video_io.write_rvid(result, out_path)
    elif args.sampler == "fragments":
        result, _ = sampling.fragments(video, cfg, seed=cfg.seed,
                                       zero_offsets=args.zero_offsets)
        video_io.write_rvid(result, out_path)
    elif args.sampler == "usds":
        sampled = sampling.usds(video, cfg, seed=cfg.seed)
        video_io.write_rvid(sampled.clip, out_path)
        prov = video_io.VideoTensor(sampled.provenance[None, None])
        prov_path = out_path.with_suffix(".provenance.rvid")
        video_io.write_rvid(prov, prov_path)
        stats = {
            "semantic_fraction": float(sampled.provenance.mean()),
            "mask_period": [2 * cfg.fsize_h, 2 * cfg.fsize_w],
            "target": [cfg.target_h, cfg.target_w],
        }
        stats_path = out_path.with_suffix(".stats.json")
        stats_path.write_text(json.dumps(stats, indent=2))
        print(f"wrote {prov_path} and {stats_path}")
    else:
        raise ConfigError(f"unknown sampler {args.sampler!r}")
    _echo("sampler", cfg)
    print(f"wrote {out_path}")
    return 0


def cmd_train(args) -> int:
    file_cfg = load_config_file(args.config) if args.config else {}
    mconfig = _build_model_config(file_cfg, args)
    sconfig = _build_sampler_config(file_cfg, args, mconfig)
    tconfig = _build_train_config(file_cfg, args)
    entries = video_io.read_manifest(args.manifest)
    _echo("model", mconfig.to_dict())
    _echo("sampler", sconfig)
    _echo("train", tconfig)
    params, history = training.train(entries, mconfig, tconfig, sconfig,
                                     log=print)
    ckpt = Path(args.out_checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(params, ckpt)
    loss_path = ckpt.with_suffix(".loss.csv")
    metrics_path = ckpt.with_suffix(".metrics.csv")
    loss_path.write_text(history.loss_csv())
    metrics_path.write_text(history.metrics_csv())
    print(f"wrote {ckpt}, {loss_path}, {metrics_path}")
    print(f"final train srocc: {history.final_srocc:+.4f}")
    return 0


def cmd_eval(args) -> int:
    file_cfg = load_config_file(args.config) if args.config else {}
    params = model.load_checkpoint(args.checkpoint)
    mconfig = params.config
    sconfig = _build_sampler_config(file_cfg, args, mconfig)
    entries = video_io.read_manifest(args.manifest)
    if len(entries) < 2:
        raise DegenerateError("evaluation needs at least two clips")
    seed = args.seed if args.seed is not None else 0
    preds, truths = [], []
    for i, entry in enumerate(entries):
        clip = video_io.read_rvid(entry.path)
        clip = sampling.temporal_sample(clip, mconfig.frames)
        sampled = sampling.usds(clip, sconfig, seed=seed * 9973 + i)
        preds.append(model.predict(video_io.to_float(sampled.clip).data, params))
        truths.append(entry.mos)
    report = metrics.evaluate(np.array(preds), np.array(truths))
    _echo("eval", {"checkpoint": args.checkpoint, "manifest": args.manifest,
                   "seed": seed, "n": report.n})
    print(report.to_table())
    if args.out:
        Path(args.out).write_text(report.to_json())
        print(f"wrote {args.out}")
    return 0


def cmd_bench(args) -> int:
    lengths = [int(x) for x in args.lengths.split(",")]
    if any(l < 2 for l in lengths) or len(lengths) < 2:
        raise ConfigError("need at least two token lengths >= 2")
    mconfig = model.preset(args.model) if args.model else model.preset("nano")
    params = model.init_params(mconfig, seed=args.seed or 0)
    rng = np.random.default_rng(args.seed or 0)
    per_token = model.flop_breakdown(mconfig)
    per_token_macs = (per_token["total"] - per_token["embedding"] - per_token["head"]) \
        / mconfig.seq_len
    rows = []
    for length in lengths:
        tokens = rng.standard_normal((1, length, mconfig.dim)).astype(np.float32)
        with no_grad():
            model.encode_tokens(tokens, params)  # warmup
            reps = []
            for _ in range(args.repeats):
                t0 = time.perf_counter()
                model.encode_tokens(tokens, params)
                reps.append(time.perf_counter() - t0)
        best = float(np.median(reps))
        rows.append((length, best, int(per_token_macs * length)))
        print(f"L={length:<6d} time={best:.4f}s flops={per_token_macs * length:.3e}")
    ls = np.log([r[0] for r in rows])
    ts = np.log([r[1] for r in rows])
    exponent = float(np.polyfit(ls, ts, 1)[0])
    print(f"fitted growth exponent: {exponent:.3f}")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "bench.csv"
    csv_path.write_text(
        "tokens,seconds,flops\n"
        + "\n".join(f"{l},{t!r},{f}" for l, t, f in rows) + "\n"
    )
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog([r[0] for r in rows], [r[1] for r in rows], "o-", label="measured")
    ref = rows[0][1] * np.array([r[0] / rows[0][0] for r in rows])
    ax.loglog([r[0] for r in rows], ref, "--", label="linear reference")
    ax.set_xlabel("token count")
    ax.set_ylabel("forward wall time (s)")
    ax.set_title(f"encoder scaling, exponent {exponent:.2f}")
    ax.legend()
    fig.tight_layout()
    plot_path = out_dir / "bench.png"
    fig.savefig(plot_path, dpi=120)
    plt.close(fig)
    _echo("bench", {"lengths": lengths, "repeats": args.repeats,
                    "exponent": exponent, "model": mconfig.variant})
    print(f"wrote {csv_path} and {plot_path}")
    return 0


def cmd_flops(args) -> int:
    file_cfg = load_config_file(args.config) if args.config else {}
    mconfig = _build_model_config(file_cfg, args)
    breakdown = model.flop_breakdown(mconfig)
    payload = {
        "variant": mconfig.variant,
        "input": [mconfig.frames, mconfig.height, mconfig.width],
        "tokens": mconfig.seq_len,
        "params": model.count_params(mconfig),
        "flops": breakdown,
    }
    print(json.dumps(payload, indent=2))
    return 0


def cmd_grad_check(args) -> int:
    rng = np.random.default_rng(args.seed or 0)
    failures = []

    # Loss gradients at f64.
    p = Tensor(rng.normal(50.0, 10.0, size=8).astype(np.float64), requires_grad=True)
    q = rng.normal(50.0, 10.0, size=8)
    err_lin = training.grad_check(lambda: training.loss_lin(p, q), [p],
                                  epsilon=args.epsilon)
    err_mon = training.grad_check(lambda: training.loss_mon(p, q), [p],
                                  epsilon=args.epsilon)
    print(f"loss_lin max rel err: {err_lin:.3e}")
    print(f"loss_mon max rel err: {err_mon:.3e}")
    if err_lin > 1e-6:
        failures.append("loss_lin")
    if err_mon > 1e-6:
        failures.append("loss_mon")

    # Model gradients at f64 on the nano preset.
    mconfig = model.preset("nano")
    params64 = model.init_params(mconfig, seed=args.seed or 0, dtype=np.float64)
    clip = rng.uniform(0, 1, size=(2, 3, mconfig.frames, mconfig.height,
                                   mconfig.width)).astype(np.float64)
    target = np.array([30.0, 70.0])
    plist = [t for _, t in params64.named_parameters()]

    def closure():
        out = model.forward(clip, params64)
        return training.loss_total(out, target, LossWeights())

    err_model = training.grad_check(closure, plist, epsilon=args.epsilon,
                                    samples=args.samples, seed=args.seed or 0)
    print(f"model max rel err ({args.samples} sampled coords): {err_model:.3e}")
    if err_model > 1e-4:
        failures.append("model")
    if failures:
        print(f"FAILED: {', '.join(failures)}")
        return 1
    print("all gradient checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvqa",
        description="Video quality assessment with a state-space encoder "
                    "and unified semantic/distortion sampling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate synthetic distorted clips")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--dims", default="8x64x64", help="TxHxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pattern", default="noise_texture",
                   choices=video_io.BASE_PATTERNS)
    p.add_argument("--distortion", default="gaussian_blur",
                   choices=video_io.DISTORTIONS)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("sample", help="run one spatial sampler on a clip")
    p.add_argument("--input", required=True)
    p.add_argument("--sampler", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--zero-offsets", action="store_true",
                   help="debug: force all fragment offsets to zero")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train on a manifest of clips")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--model", help="model preset name")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time the encoder at several token counts")
    p.add_argument("--lengths", default="1024,2048,4096,8192")
    p.add_argument("--model", default="nano")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("flops", help="report parameter and flop accounting")
    p.add_argument("--model", help="model preset name")
    p.add_argument("--config")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MvqaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
