"""Command line front end: train, render, export, bench, synth.

Exit codes: 0 success, 1 usage error (bad flags), 2 data error (missing or
malformed files, unknown ids, bad config values).

Heavy imports happen inside the subcommand handlers so that --threads can
cap the BLAS pools via environment variables before numpy first loads;
with threads already spawned the caps are best effort only.

The train config is a JSON object; recognized keys:
  model            ModelConfig field overrides (near/far default from scene)
  steps            total optimizer steps (default 500)
  warmup_steps     linear warmup length (default steps // 10 + 1)
  peak_lr          schedule peak (default 2e-4)
  n_targets        target views sampled per step (default 2)
  seed             run seed (default 0)
  clip_norm        gradient norm clip (default 1.0)
  loss             LossConfig field overrides
"""

from __future__ import annotations

import argparse
import json
import os
import sys


class _Parser(argparse.ArgumentParser):
    # exit-code contract: argparse defaults to 2 on usage errors, we use 1
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _int_list(text):
    try:
        return [int(s) for s in text.split(",") if s != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated int list: {text!r}")


def _set_thread_env(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="localsplat",
                     description="local-attention multi-view splat pipeline")
    sub = parser.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="cap BLAS thread pools (1 = reproducible)")

    p = sub.add_parser("train", parents=[common],
                       help="optimize a model on one scene")
    p.add_argument("--config", required=True, help="JSON training config")
    p.add_argument("--scene", required=True, help="scene manifest path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--input-stride", type=int, default=2,
                   help="take every k-th non-target view as input")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("render", parents=[common],
                       help="render target views from a checkpoint")
    p.add_argument("--model", required=True, help="checkpoint .npz")
    p.add_argument("--scene", required=True, help="scene manifest path")
    p.add_argument("--targets", required=True, type=_int_list,
                   help="comma-separated target view ids")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--input-stride", type=int, default=2)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("export", parents=[common],
                       help="export predicted splats to PLY")
    p.add_argument("--model", required=True, help="checkpoint .npz")
    p.add_argument("--scene", required=True, help="scene manifest path")
    p.add_argument("--ply", required=True, help="output PLY path")
    p.add_argument("--input-stride", type=int, default=2)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("bench", parents=[common],
                       help="attention scaling benchmark")
    p.add_argument("--n", type=_int_list, default=[8, 16, 32, 64],
                   help="ascending view counts, e.g. 8,16,32,64")
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--tokens", type=int, default=16)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default=None, help="write the report here too")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic scene")
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--splats", type=int, default=48)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_synth)

    return parser


def _write_png(path, img):
    import numpy as np
    from PIL import Image
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _input_ids(scene, target_ids, stride):
    taken = set(target_ids)
    rest = [c.id for c in scene.cameras if c.id not in taken]
    ids = rest[::max(stride, 1)]
    if not ids:
        raise ValueError("no input views left after removing targets")
    return ids


def _predict_splats(p, cfg, scene, input_ids):
    from . import autodiff as ad
    from .model import forward
    from .scenes import make_batch
    batch = make_batch(scene, input_ids, [])
    with ad.no_grad():
        splats = forward(p, batch["images"], batch["cameras"], cfg)
    return splats.detached()


def _cmd_train(args):
    import numpy as np
    from .model import ModelConfig, init_params, save_checkpoint
    from .scenes import load_scene, make_batch, split_views
    from .training import (LossConfig, ScheduleConfig, init_adam,
                           training_run)

    scene, _ = load_scene(args.scene)
    with open(args.config) as f:
        cfgd = json.load(f)
    if not isinstance(cfgd, dict):
        raise ValueError("train config must be a JSON object")

    mdict = dict(cfgd.get("model", {}))
    mdict.setdefault("near", scene.near)
    mdict.setdefault("far", scene.far)
    mcfg = ModelConfig(**mdict)

    steps = int(cfgd.get("steps", 500))
    sched = ScheduleConfig(
        peak_lr=float(cfgd.get("peak_lr", 2e-4)),
        warmup_steps=int(cfgd.get("warmup_steps", steps // 10 + 1)),
        total_steps=steps)
    lcfg = LossConfig(**cfgd.get("loss", {}))
    n_targets = int(cfgd.get("n_targets", 2))
    clip_norm = float(cfgd.get("clip_norm", 1.0))
    seed = int(cfgd.get("seed", 0))

    rng = np.random.default_rng(seed)
    p = init_params(mcfg, rng)
    state = init_adam(p)
    os.makedirs(args.out, exist_ok=True)

    def batch_fn(step, rng):
        inputs, targets = split_views(scene.n_views, rng, n_targets,
                                      input_stride=args.input_stride)
        return make_batch(scene, inputs, targets)

    metrics_path = os.path.join(args.out, "metrics.jsonl")
    with open(metrics_path, "w") as log:
        for metrics in training_run(p, state, batch_fn, steps, mcfg, lcfg,
                                    sched, rng, clip_norm=clip_norm):
            log.write(json.dumps(metrics) + "\n")
            log.flush()
    ckpt = os.path.join(args.out, "model.npz")
    save_checkpoint(ckpt, p, mcfg, extra={"step": steps, "seed": seed})
    print(f"wrote {ckpt} and {metrics_path}")
    return 0


def _cmd_render(args):
    import numpy as np
    from . import autodiff as ad
    from .model import load_checkpoint
    from .renderer import RenderTarget, render
    from .scenes import load_scene
    from .training import psnr

    p, cfg, _ = load_checkpoint(args.model)
    scene, _ = load_scene(args.scene)
    known = {c.id for c in scene.cameras}
    missing = [i for i in args.targets if i not in known]
    if missing:
        raise ValueError(f"target view ids not in manifest: {missing}")

    inputs = _input_ids(scene, args.targets, args.input_stride)
    splats = _predict_splats(p, cfg, scene, inputs)
    os.makedirs(args.out, exist_ok=True)
    by_id = {c.id: i for i, c in enumerate(scene.cameras)}
    for tid in args.targets:
        cam = scene.cameras[by_id[tid]]
        with ad.no_grad():
            fb = render(splats, RenderTarget(cam, scene.background))
        path = os.path.join(args.out, f"render_{tid:03d}.png")
        _write_png(path, fb.color.value)
        db = psnr(float(np.mean((fb.color.value - scene.images[by_id[tid]]) ** 2)))
        print(f"view {tid}: {path} psnr {db:.2f}")
    return 0


def _cmd_export(args):
    from .model import load_checkpoint
    from .plyio import export_ply
    from .scenes import load_scene

    p, cfg, _ = load_checkpoint(args.model)
    scene, _ = load_scene(args.scene)
    inputs = _input_ids(scene, [], args.input_stride)
    splats = _predict_splats(p, cfg, scene, inputs)
    ply_dir = os.path.dirname(os.path.abspath(args.ply))
    os.makedirs(ply_dir, exist_ok=True)
    export_ply(splats, args.ply)
    print(f"wrote {splats.count} splats to {args.ply}")
    return 0


def _cmd_bench(args):
    from .bench import bench_attention, format_report

    report = bench_attention(args.n, window=args.window, tokens=args.tokens,
                             repeats=args.repeats)
    text = format_report(report)
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    return 0


def _cmd_synth(args):
    from .scenes import generate_synthetic_scene, save_scene

    scene, gt = generate_synthetic_scene(seed=args.seed, n_views=args.views,
                                         n_splats=args.splats,
                                         resolution=args.resolution)
    manifest = save_scene(scene, args.out, gt=gt)
    print(f"wrote {manifest}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", None):
        _set_thread_env(args.threads)

    from .plyio import MalformedPly
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError, MalformedPly,
            ValueError, KeyError, TypeError, ArithmeticError) as e:
        sys.stderr.write(f"localsplat {args.cmd}: error: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
