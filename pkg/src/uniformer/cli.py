"""Command-line interface.

Subcommands: describe, params, flops, gradcheck, sample-indices,
train-toy, eval.  ``--config`` accepts either a JSON file with the model
config fields or a builtin preset name (S, Sdagger, B, L), optionally as
``NAME@CLASSES`` or ``NAME@CLASSES:image``.

Exit status is 0 on success; any failure prints a single
``error: <message>`` line to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis, model as model_mod, pipeline, tensorfile
from .tensor import Tensor, gradcheck


def _resolve_config(spec: str) -> model_mod.ModelConfig:
    path = Path(spec)
    if path.exists():
        return model_mod.load_config(path)
    name, _, rest = spec.partition("@")
    classes = 400
    mode = "video"
    if rest:
        cls_part, _, mode_part = rest.partition(":")
        classes = int(cls_part)
        if mode_part:
            mode = mode_part
    try:
        return model_mod.preset_config(name, num_classes=classes, input_mode=mode)
    except ValueError:
        raise ValueError(f"--config {spec!r} is neither a readable file nor a preset") from None


def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"bad shape {text!r}; expected e.g. 3x16x224x224") from None


def _cmd_describe(args) -> int:
    config = _resolve_config(args.config)
    net = model_mod.build_model(config, seed=args.seed, init="zeros")
    print(f"stage channels: {config.stage_channels}")
    print(f"stage depths:   {config.stage_depths}")
    print(f"stage types:    {config.stage_types}")
    print(f"tube:           {config.tube}   head dim: {config.head_dim}")
    print(f"input mode:     {config.input_mode}   classes: {config.num_classes}")
    print(f"parameters:     {analysis.count_params(net):,}")
    if args.input:
        shape = _parse_shape(args.input)
        print("shape trace:")
        for name, out in analysis.shape_trace(net, shape):
            print(f"  {name:<28} {'x'.join(str(s) for s in out)}")
    return 0


def _cmd_params(args) -> int:
    config = _resolve_config(args.config)
    net = model_mod.build_model(config, seed=args.seed, init="zeros")
    print(analysis.count_params(net))
    return 0


def _cmd_flops(args) -> int:
    config = _resolve_config(args.config)
    net = model_mod.build_model(config, seed=args.seed, init="zeros")
    shape = _parse_shape(args.input)
    report = analysis.count_flops(net, shape, views=args.views)
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    print(report.to_text())
    return 0


def _cmd_gradcheck(args) -> int:
    config = _resolve_config(args.config)
    net = model_mod.build_model(config, seed=args.seed)
    net.eval()
    rng = np.random.default_rng(args.seed)
    c, t, h, w = (3, 2, 32, 32) if config.video else (3, 1, 32, 32)
    x = Tensor(rng.standard_normal((1, c, t, h, w)))
    probe = Tensor(rng.standard_normal((config.num_classes,)))

    def objective(inp, *params):
        return (net(inp) * probe.reshape(1, -1).expand((1, config.num_classes))).sum()

    wrt = [x] + [p for _, p in net.named_parameters()]
    report = gradcheck(
        objective, wrt, tolerance=args.tolerance, max_checks_per_input=args.max_checks, rng=rng
    )
    print(report)
    return 0 if report.passed else 1


def _cmd_sample_indices(args) -> int:
    if args.protocol == "dense":
        plan = pipeline.dense_sample(args.video_len, args.frames, args.stride, args.clips)
    else:
        plan = pipeline.uniform_sample(args.video_len, args.segments, args.mode, args.seed)
    for view in plan.views:
        print(f"clip={view.clip} crop={view.crop} " + ",".join(str(i) for i in view.frames))
    return 0


def _cmd_train_toy(args) -> int:
    config = _resolve_config(args.config)
    train_config = pipeline.load_train_config(args.train_config)
    if args.seed is not None:
        train_config.seed = args.seed
    dataset = pipeline.make_synthetic_dataset(
        num_classes=config.num_classes, clips_per_class=args.clips_per_class, seed=train_config.seed
    )
    net = model_mod.build_model(config, seed=train_config.seed)
    log = pipeline.train_toy(net, dataset, train_config, log_path=args.log)
    print(f"steps: {len(log.steps)}  final train accuracy: {log.final_accuracy:.4f}")
    if args.params:
        model_mod.save_params(net, args.params)
    return 0


def _cmd_eval(args) -> int:
    config = _resolve_config(args.config)
    net = model_mod.build_model(config, seed=0)
    model_mod.load_params(net, args.params)
    files = sorted(Path(args.input_dir).glob("*.uft"))
    if not files:
        raise ValueError(f"no .uft tensor files under {args.input_dir}")
    for path in files:
        video = tensorfile.read_tensor(path)
        scores, _ = pipeline.predict_video(
            net,
            video,
            frames=args.frames,
            stride=args.stride,
            num_clips=args.clips,
            num_crops=args.crops,
            crop_size=args.crop_size,
            resize_to=args.resize,
        )
        pred = int(scores.argmax())
        print(f"{path.name},{pred},{scores[pred]:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uniformer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", required=True, help="model config JSON file or preset name")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("describe", help="print architecture summary")
    add_config(p)
    p.add_argument("--input", help="optional CxTxHxW input for a shape trace")
    p.set_defaults(fn=_cmd_describe)

    p = sub.add_parser("params", help="print the learnable parameter count")
    add_config(p)
    p.set_defaults(fn=_cmd_params)

    p = sub.add_parser("flops", help="per-layer cost report")
    add_config(p)
    p.add_argument("--input", required=True, help="input shape CxTxHxW")
    p.add_argument("--views", type=int, default=1)
    p.add_argument("--csv", help="also write the report as CSV")
    p.set_defaults(fn=_cmd_flops)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    add_config(p)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max-checks", type=int, default=5, help="sampled coordinates per tensor")
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("sample-indices", help="print frame indices for a protocol")
    p.add_argument("--protocol", choices=("dense", "uniform"), required=True)
    p.add_argument("--video-len", type=int, required=True)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--clips", type=int, default=1)
    p.add_argument("--segments", type=int, default=16)
    p.add_argument("--mode", choices=("center", "random"), default="center")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_sample_indices)

    p = sub.add_parser("train-toy", help="overfit the synthetic moving-patch set")
    p.add_argument("--config", required=True)
    p.add_argument("--train-config", required=True, help="train config JSON file")
    p.add_argument("--seed", type=int, default=None, help="overrides the train config seed")
    p.add_argument("--clips-per-class", type=int, default=2)
    p.add_argument("--log", help="write one step,lr,loss,acc line per step")
    p.add_argument("--params", help="save trained parameters here")
    p.set_defaults(fn=_cmd_train_toy)

    p = sub.add_parser("eval", help="multi-clip / multi-crop scoring of stored videos")
    p.add_argument("--config", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--input-dir", required=True, help="directory of .uft video tensors")
    p.add_argument("--clips", type=int, default=1)
    p.add_argument("--crops", type=int, default=1)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--crop-size", type=int, default=None)
    p.add_argument("--resize", type=int, default=None)
    p.set_defaults(fn=_cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:  # pragma: no cover
        return 0
    except Exception as err:  # single-line machine-parsable failure
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
