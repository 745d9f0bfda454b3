"""Command-line surface: synth, train, eval, predict, bench, trace.

Configuration is a flat JSON file; unknown keys are rejected by name, every
key has a documented default, and each run directory receives the fully
resolved configuration actually used. Exit codes: 0 success, 2 configuration,
3 I/O, 4 checkpoint/config compatibility, 1 internal.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .errors import CompatibilityError, ConfigError, DataIOError, DfvError
from .focus import trace_demo, write_trace_csv
from .imgio import colorize, write_pfm, write_ppm
from .network import DFVNet, NetworkConfig, count_parameters
from .optics import CameraModel, SynthConfig, generate_dataset, read_sample
from .regression import write_metric_lines
from .training import (
    Checkpoint,
    TrainConfig,
    ablate_stack_size,
    evaluate_model,
    predict_stack,
    train,
)

# key -> (section, default, help); this table is the single source of truth
# for config parsing, defaults, and the effective-config echo.
CONFIG_KEYS = {
    # camera
    "focal_length": ("camera", 0.05, "thin-lens focal length in meters"),
    "aperture_diameter": ("camera", 0.025, "aperture diameter in meters"),
    "pixel_pitch": ("camera", 1e-4, "sensor pixel pitch in meters/pixel"),
    "sensor_height": ("camera", 64, "rendered image height in pixels"),
    "sensor_width": ("camera", 64, "rendered image width in pixels"),
    # synthesis
    "num_samples": ("synth", 20, "samples per generated dataset"),
    "num_frames": ("synth", 5, "frames per focal stack"),
    "depth_min": ("synth", 0.5, "nearest focus distance in meters"),
    "depth_max": ("synth", 2.0, "farthest focus distance in meters"),
    "max_layers": ("synth", 3, "max foreground layers per scene"),
    "noise_sigma": ("synth", 0.0, "additive Gaussian noise sigma (0 disables)"),
    "mask_protocol": ("synth", True, "record out-of-range masking protocol"),
    # network
    "base_width": ("network", 8, "channels at the finest feature scale"),
    "num_scales": ("network", 4, "number of volume scales (1..4)"),
    "use_dfv": ("network", True, "frame-difference the focus volumes"),
    "use_spp_2d": ("network", True, "2D pyramid pooling in the encoder"),
    "spp3d_levels": ("network", 2, "largest scales that get 3D pyramid pooling"),
    "input_channels": ("network", 3, "encoder input channels (1 or 3)"),
    # training
    "epochs": ("train", 10, "training epochs"),
    "batch_size": ("train", 4, "stacks per optimization step"),
    "lr": ("train", 1e-4, "Adam learning rate"),
    "beta1": ("train", 0.9, "Adam beta1"),
    "beta2": ("train", 0.999, "Adam beta2"),
    "crop": ("train", 64, "square training crop in pixels"),
    "frames_per_stack": ("train", 5, "frames sampled per stack while training"),
    "flip_augment": ("train", True, "random horizontal/vertical flips"),
    "seed": ("train", 0, "seed for synthesis/training randomness"),
    "alpha": ("train", ["8/15", "4/15", "2/15", "1/15"],
              "per-scale loss weights as exact fractions"),
    "mask_out_of_range": ("train", True,
                          "exclude pixels with gt outside the focal span"),
    "val_limit": ("train", 8, "per-epoch validation sample cap (0 skips)"),
}


def load_config(path=None, overrides=None) -> dict:
    """Defaults, then the JSON file, then CLI overrides; unknown keys fail."""
    cfg = {k: d for k, (_, d, _) in CONFIG_KEYS.items()}
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        for key, value in user.items():
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key {key!r} in {path}")
            cfg[key] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    return cfg


def _section(cfg: dict, name: str) -> dict:
    return {k: cfg[k] for k, (sec, _, _) in CONFIG_KEYS.items() if sec == name}


def build_camera(cfg: dict) -> CameraModel:
    return CameraModel(**_section(cfg, "camera"))


def build_synth(cfg: dict) -> SynthConfig:
    return SynthConfig(camera=build_camera(cfg), **_section(cfg, "synth"))


def build_network(cfg: dict) -> NetworkConfig:
    return NetworkConfig(**_section(cfg, "network"))


def build_train(cfg: dict) -> TrainConfig:
    return TrainConfig(**_section(cfg, "train"))


def echo_config(cfg: dict, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.json"), "w") as f:
        json.dump(cfg, f, indent=1, sort_keys=True)


def _check_checkpoint_overrides(ckpt: Checkpoint, args) -> None:
    """Reject --variant/--scales values that contradict the checkpoint."""
    if getattr(args, "variant", None) is not None:
        want = args.variant == "dfv"
        if ckpt.net_cfg.use_dfv != want:
            raise CompatibilityError(
                f"use_dfv: checkpoint has {ckpt.net_cfg.use_dfv}, "
                f"--variant asks for {want}")
    if getattr(args, "scales", None) is not None:
        if ckpt.net_cfg.num_scales != args.scales:
            raise CompatibilityError(
                f"num_scales: checkpoint has {ckpt.net_cfg.num_scales}, "
                f"--scales asks for {args.scales}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed})
    synth_cfg = build_synth(cfg)
    manifest = generate_dataset(synth_cfg, seed=cfg["seed"], out_dir=args.out)
    echo_config(cfg, args.out)
    span = manifest["focal_span"]
    print(f"wrote {manifest['count']} samples to {args.out} "
          f"(focal span {span[0]:g}..{span[1]:g} m, "
          f"{manifest['num_frames']} frames/stack)")
    return 0


def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "frames_per_stack": args.frames}
    cfg = load_config(args.config, overrides)
    if args.variant is not None:
        cfg["use_dfv"] = args.variant == "dfv"
    if args.scales is not None:
        cfg["num_scales"] = args.scales
        cfg["spp3d_levels"] = min(cfg["spp3d_levels"], args.scales)
    net_cfg = build_network(cfg)
    train_cfg = build_train(cfg)
    echo_config(cfg, args.out)
    net, ckpt, history = train(args.data, train_cfg, net_cfg, out_dir=args.out,
                               val_dir=args.val_data)
    losses = [h["loss"] for h in history if h["type"] == "train"]
    print(f"trained {net_cfg.num_scales}-scale "
          f"{'DFV' if net_cfg.use_dfv else 'FV'} model "
          f"({count_parameters(net)} params) for {train_cfg.epochs} epochs; "
          f"loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    print(f"checkpoint: {os.path.join(args.out, 'checkpoint.dfv')}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    _check_checkpoint_overrides(ckpt, args)
    net = ckpt.build_model()
    records, agg = evaluate_model(
        net, args.data, frames=args.frames, policy=args.policy,
        mask_out_of_range=bool(ckpt.train_cfg.get("mask_out_of_range", True)))
    if args.out is not None:
        write_metric_lines(args.out, records, agg)
        print(f"wrote {len(records)} per-sample records to {args.out}")
    print(agg.to_json())
    return 0


def _read_stack_dir(path):
    path = os.path.normpath(path)
    return read_sample(os.path.dirname(path) or ".", os.path.basename(path))


def cmd_predict(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    _check_checkpoint_overrides(ckpt, args)
    net = ckpt.build_model()
    stack = _read_stack_dir(args.stack)
    if args.frames is not None:
        from .training import sample_frames

        stack = sample_frames(stack, args.frames, "equidistant")
    result = predict_stack(net, stack)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "effective_config.json"), "w") as f:
        json.dump({"network": ckpt.net_cfg.to_dict(), "train": ckpt.train_cfg},
                  f, indent=1, sort_keys=True)
    write_pfm(os.path.join(args.out, "depth.pfm"), result.depth)
    write_pfm(os.path.join(args.out, "uncertainty.pfm"), result.unc)
    write_pfm(os.path.join(args.out, "frame_id.pfm"), result.frame_id)
    l = stack.focal_distances
    write_ppm(os.path.join(args.out, "depth_preview.ppm"),
              colorize(result.depth, vmin=l[0], vmax=l[-1]))
    write_ppm(os.path.join(args.out, "uncertainty_preview.ppm"),
              colorize(result.unc))
    print(f"avgUnc: {result.unc.mean():.6f}")
    print(f"mean depth: {result.depth.mean():.4f} m "
          f"(focal span {l[0]:g}..{l[-1]:g})")
    return 0


def cmd_bench(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    net = ckpt.build_model()
    net.eval()
    rng = np.random.default_rng(0)
    frames = rng.random((1, args.frames, 1, args.resolution, args.resolution))
    from .autodiff import no_grad

    for _ in range(args.warmup):
        with no_grad():
            net.forward(frames)
    times = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        with no_grad():
            net.forward(frames)
        times.append((time.perf_counter() - t0) * 1000.0)
    times_sorted = np.sort(times)
    mean = float(np.mean(times))
    p50 = float(np.percentile(times_sorted, 50))
    p95 = float(np.percentile(times_sorted, 95))
    print(f"forward {args.resolution}x{args.resolution}x{args.frames}: "
          f"mean {mean:.1f} ms, p50 {p50:.1f} ms, p95 {p95:.1f} ms "
          f"over {args.repeats} runs ({args.warmup} warm-up excluded)")
    return 0


def cmd_trace(args) -> int:
    stack = _read_stack_dir(args.stack)
    try:
        y, x = (int(v) for v in args.pixel.split(","))
    except ValueError as e:
        raise ConfigError(f"--pixel must be 'row,col', got {args.pixel!r}") from e
    rows = trace_demo(stack, (y, x), window=args.window)
    if args.out is not None:
        write_trace_csv(rows, args.out)
        print(f"wrote {len(rows)} rows to {args.out}")
    print(f"{'frame':>5} {'raw':>12} {'differential':>14} {'normalized':>11}")
    for idx, raw, diff, norm in rows:
        print(f"{idx:>5} {raw:>12.5f} {diff:>14.5f} {norm:>11.5f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed})
    rows = ablate_stack_size(args.data, build_train(cfg), build_network(cfg),
                             k_list=args.k, val_dir=args.val_data)
    table = [{"frames": k, **rec.to_dict()} for k, rec in rows]
    if args.out is not None:
        with open(args.out, "w") as f:
            for row in table:
                f.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"{'frames':>6} {'mse':>10} {'rms':>10} {'abs_rel':>9} {'avgUnc':>9}")
    for row in table:
        print(f"{row['frames']:>6} {row['mse']:>10.5f} {row['rms']:>10.5f} "
              f"{row['abs_rel']:>9.4f} {row['avg_unc']:>9.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfvdepth",
        description="Depth from focus with differential focus volumes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic focal-stack dataset")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--out", required=True, help="run directory for outputs")
    p.add_argument("--val-data", help="validation dataset directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--frames", type=int, help="frames sampled per stack")
    p.add_argument("--variant", choices=["fv", "dfv"],
                   help="plain focus volumes or differenced ones")
    p.add_argument("--scales", type=int, choices=[1, 2, 3, 4],
                   help="number of volume scales")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint over a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="JSON-lines metrics file")
    p.add_argument("--frames", type=int, help="frames per stack at test time")
    p.add_argument("--policy", choices=["random", "equidistant"],
                   default="equidistant")
    p.add_argument("--variant", choices=["fv", "dfv"])
    p.add_argument("--scales", type=int, choices=[1, 2, 3, 4])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="predict depth/uncertainty for one stack")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stack", required=True, help="sample directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--frames", type=int, help="equidistant frame count")
    p.add_argument("--variant", choices=["fv", "dfv"])
    p.add_argument("--scales", type=int, choices=[1, 2, 3, 4])
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("bench", help="forward-pass latency statistics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("trace", help="per-frame focus curves at one pixel")
    p.add_argument("--stack", required=True, help="sample directory")
    p.add_argument("--pixel", required=True, help="row,col")
    p.add_argument("--window", type=int, default=9)
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("ablate", help="train/evaluate across stack sizes")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--out", help="JSON-lines table path")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, nargs="+", required=True,
                   help="stack sizes to sweep")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except CompatibilityError as e:
        print(f"checkpoint/config mismatch: {e}", file=sys.stderr)
        return 4
    except (DataIOError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 3
    except DfvError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
