"""Command-line surface: encoding, dataset generation, training, evaluation.

Exit codes: 0 success, 1 usage or configuration problems, 2 malformed
files, 3 numeric failures (non-finite losses, gradient-check violations).
"""

from __future__ import annotations

import argparse
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import netpbm, report
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    FormatError,
    NumericError,
    OracleError,
    PixelGraphError,
    TrainingDivergedError,
)
from .geometry import CameraIntrinsics, DepthMap, NeighborhoodParams, encode_normals
from .pipeline import (
    SegmentationModel,
    evaluate,
    node_usage_entropy,
    prepare_scene,
    prepare_scenes,
    train,
    visualize_assignment,
)
from .scenes import CLASS_NAMES, SceneParams, generate_scene, load_scene, save_scene
from .tensor import finite_difference_check, set_backward_fault

GRAD_TOLERANCE = 1e-4


class UsageError(PixelGraphError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="pixelgraph", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode-normals", help="depth PGM -> normal PPM + sidecar")
    p.add_argument("--depth", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--gamma", type=float, default=0.05)
    p.set_defaults(func=cmd_encode_normals)

    p = sub.add_parser("gen-dataset", help="write synthetic scene directories")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train on a scene directory")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ablation", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a scene directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report-dir", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict labels for one scene directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("viz-assignment", help="per-pixel max assignment as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("grad-check", help="finite differences vs the tape")
    p.add_argument("--config", default=None)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", default=None,
                   help="testing hook: corrupt one op's backward pass")
    p.set_defaults(func=cmd_grad_check)
    return parser


def cmd_encode_normals(args) -> int:
    z, valid = netpbm.read_depth_pgm(args.depth)
    intr = CameraIntrinsics(**netpbm.read_intrinsics_text(args.intrinsics))
    params = NeighborhoodParams(k=args.k, gamma=args.gamma)
    nm = encode_normals(DepthMap(z=z, valid=valid), intr, params)
    netpbm.write_normal_ppm(args.out, nm.n, nm.valid)
    netpbm.write_normal_sidecar(str(args.out) + ".f64", nm.n, nm.valid)
    fraction = nm.valid.mean()
    print(f"valid-pixel fraction {fraction:.4f}")
    return 0


def cmd_gen_dataset(args) -> int:
    out = Path(args.out)
    params = SceneParams(height=args.size, width=args.size)
    seeds = list(range(args.seed, args.seed + args.count))

    def build(seed):
        save_scene(generate_scene(seed, params), out / f"scene_{seed}")
        return seed

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            list(pool.map(build, seeds))
    else:
        for seed in seeds:
            build(seed)
    print(f"wrote {args.count} scenes to {out}")
    return 0


def _scene_dirs(data_dir) -> list[Path]:
    def order(p: Path):
        m = re.search(r"(\d+)$", p.name)
        return (int(m.group(1)) if m else -1, p.name)

    dirs = sorted((p for p in Path(data_dir).iterdir() if p.is_dir()), key=order)
    if not dirs:
        raise UsageError(f"no scene directories under {data_dir}")
    return dirs


def cmd_train(args) -> int:
    model_cfg, train_cfg = cfgmod.load_config(args.config)
    if args.ablation:
        model_cfg, train_cfg, warnings = cfgmod.apply_ablation(
            model_cfg, train_cfg, args.ablation
        )
        for w in warnings:
            print(f"warning: {w}", file=sys.stderr)

    scenes = [load_scene(d) for d in _scene_dirs(args.data)]
    val = [s for i, s in enumerate(scenes) if i % 5 == 4]
    fit = [s for i, s in enumerate(scenes) if i % 5 != 4]
    print(f"preparing {len(fit)} train / {len(val)} held-out scenes")
    fit_prep = prepare_scenes(fit, model_cfg, threads=args.threads)
    val_prep = prepare_scenes(val, model_cfg, threads=args.threads)

    model = SegmentationModel(model_cfg, seed=args.seed)
    result = train(model, fit_prep, train_cfg, seed=args.seed, progress=print)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, model.params)
    Path(str(out) + ".config").write_text(
        cfgmod.render_config_text(model_cfg, train_cfg)
    )
    report.write_loss_csv(str(out) + ".loss.csv", result.history)
    report.plot_loss_curve(str(out) + ".loss.png", result.history)
    if model_cfg.graph_enabled:
        report.plot_entropy_curve(str(out) + ".entropy.png",
                                  result.entropy_history,
                                  model_cfg.graph.num_nodes)
        print(f"final node-usage entropy {result.entropy_history[-1]:.4f} "
              f"(uniform {np.log(model_cfg.graph.num_nodes):.4f})")
    if val_prep:
        print("held-out report:")
        print(evaluate(model, val_prep).summary(CLASS_NAMES))
    print(f"checkpoint written to {out}")
    return 0


def _load_model(checkpoint_path) -> tuple[SegmentationModel, object]:
    cfg_path = Path(str(checkpoint_path) + ".config")
    if not cfg_path.exists():
        raise UsageError(f"missing config sidecar {cfg_path}")
    model_cfg, train_cfg = cfgmod.load_config(cfg_path)
    model = SegmentationModel(model_cfg, seed=0)
    model.load_state(load_checkpoint(checkpoint_path))
    return model, model_cfg


def cmd_eval(args) -> int:
    model, model_cfg = _load_model(args.checkpoint)
    scenes = [load_scene(d) for d in _scene_dirs(args.data)]
    prepared = prepare_scenes(scenes, model_cfg, threads=args.threads)
    result = evaluate(model, prepared)
    print(result.summary(CLASS_NAMES))
    if args.report_dir:
        rdir = Path(args.report_dir)
        rdir.mkdir(parents=True, exist_ok=True)
        report.write_eval_csv(rdir / "eval_report.csv", result, CLASS_NAMES)
        report.plot_eval_report(rdir / "eval_report.png", result, CLASS_NAMES)
        print(f"report written to {rdir}")
    return 0


def cmd_infer(args) -> int:
    model, model_cfg = _load_model(args.checkpoint)
    prepared = prepare_scene(load_scene(args.scene), model_cfg)
    labels = model.predict(prepared)
    netpbm.write_pgm(args.out, labels.astype(np.uint8), 255)
    print(f"predicted labels written to {args.out}")
    return 0


def cmd_viz(args) -> int:
    model, model_cfg = _load_model(args.checkpoint)
    if not model_cfg.graph_enabled:
        raise ConfigError("no projection matrix: the graph module is disabled")
    prepared = prepare_scene(load_scene(args.scene), model_cfg)
    _, diag = model.forward(prepared)
    image = visualize_assignment(diag["projection"])
    netpbm.write_pgm(args.out, image, 255)
    print(f"mean brightness {image.mean():.2f}  "
          f"entropy {node_usage_entropy(diag['projection']):.4f}")
    return 0


def cmd_grad_check(args) -> int:
    if args.config:
        model_cfg, _ = cfgmod.load_config(args.config)
        model_cfg = replace(model_cfg, image_size=args.size)
    else:
        model_cfg, _ = cfgmod.grad_check_configs(args.size)
    scene = generate_scene(args.seed, SceneParams(height=args.size, width=args.size))
    prepared = prepare_scene(scene, model_cfg)
    model = SegmentationModel(model_cfg, seed=args.seed)

    if args.inject_fault:
        set_backward_fault(args.inject_fault)
    started = time.monotonic()
    worst = 0.0
    try:
        for group, names in sorted(model.parameter_groups().items()):
            tensors = [model.params[n] for n in names]

            def loss_fn(trial, names=names):
                saved = {n: model.params[n] for n in names}
                try:
                    for n, t in zip(names, trial):
                        model.params[n] = t
                    return model.loss_terms(prepared)["total"]
                finally:
                    model.params.update(saved)

            err = finite_difference_check(loss_fn, tensors, epsilon=1e-6)
            worst = max(worst, err)
            size = sum(t.size for t in tensors)
            print(f"{group:<12} {size:5d} coords  max rel err {err:.3e}")
    finally:
        set_backward_fault(None)
    elapsed = time.monotonic() - started
    print(f"overall max rel err {worst:.3e} (tolerance {GRAD_TOLERANCE:.0e}), "
          f"{elapsed:.1f}s")
    if worst >= GRAD_TOLERANCE:
        print("gradient check FAILED", file=sys.stderr)
        return 3
    print("gradient check passed")
    return 0


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, CheckpointMismatchError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, TrainingDivergedError, OracleError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (PixelGraphError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
