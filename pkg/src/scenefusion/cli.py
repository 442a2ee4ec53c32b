"""Command-line entry points: generate / train / eval / render-bev / selftest."""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from .config import RunConfig


def _add_config_arg(p):
    p.add_argument("--config", required=True, help="flat key = value config file")


def cmd_generate(args) -> int:
    from .synthscene import SceneSpec, build_dataset

    config = RunConfig.load(args.config)
    spec = SceneSpec(seed=config.seed,
                     num_boxes=(config.scene_min_boxes, config.scene_max_boxes),
                     num_cameras=config.num_cameras,
                     half_range=config.half_range)
    paths = build_dataset(args.out, spec, config.num_scenes,
                          splits={"train": 0.8, "val": 0.2} if args.val_split
                          else {"train": 1.0})
    print(f"wrote {len(paths)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .train import train

    config = RunConfig.load(args.config)
    t0 = time.time()

    def log(step, totals):
        if step % max(args.log_every, 1) == 0:
            print(f"step {step}: total={totals['total']:.4f} "
                  f"cls={totals['cls']:.4f} reg={totals['reg']:.4f} "
                  f"heatmap={totals['heatmap']:.4f}")

    train(config, args.data, out_path=args.out,
          log_path=Path(args.out) / "loss_log.txt", log_fn=log)
    print(f"trained {config.steps} steps in {time.time() - t0:.1f}s -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluate import evaluate

    model, config, step = load_checkpoint(args.ckpt)
    model.eval()
    report = evaluate(model, args.data, split=args.split,
                      score_threshold=config.score_threshold,
                      metadata={"checkpoint": str(args.ckpt), "step": str(step)})
    text = report.to_text()
    if args.report:
        Path(args.report).write_text(text)
    print(text, end="")
    return 0


def cmd_render_bev(args) -> int:
    from .checkpoint import load_checkpoint
    from .render import render_bev
    from .synthscene import read_scene

    model, _, _ = load_checkpoint(args.ckpt)
    model.eval()
    scene = read_scene(args.scene)
    maps = [m.strip() for m in args.maps.split(",") if m.strip()]
    written = render_bev(model, scene, maps, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_selftest(args) -> int:
    from .selfcheck import gradient_suite, oracle_suite

    results = oracle_suite()
    results += gradient_suite(num_seeds=args.seeds)
    failed = 0
    for res in results:
        print(res)
        failed += not res.passed
    if failed:
        print(f"{failed} check(s) FAILED")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="scenefusion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    _add_config_arg(p)
    p.add_argument("--out", required=True)
    p.add_argument("--val-split", action="store_true",
                   help="hold out 20%% of scenes as a val split")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a model")
    _add_config_arg(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--log-every", type=int, default=25)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--report", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("render-bev", help="export BEV feature visualizations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--maps", default="bf,bpf,bhatf,heatmap")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render_bev)

    p = sub.add_parser("selftest", help="run gradient and oracle suites")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(fn=cmd_selftest)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
