"""Command-line entry point: ``sveavatar <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("sveavatar")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", type=Path, default=None, help="JSON config file")
    p.add_argument("--out", type=Path, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sveavatar", description="SVE-conditioned SDF radiance fields at toy scale")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--width", type=int, default=48)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--expr-dim", type=int, default=4)
    p.add_argument("--bumps", type=int, default=3)
    p.add_argument("--camera", choices=("sway", "fixed"), default="sway")

    p = sub.add_parser("train", help="train a model on a dataset")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--preset", choices=("toy", "default"), default="toy")
    p.add_argument("--dump-config", action="store_true", help="print the full config and exit")

    p = sub.add_parser("evaluate", help="metrics on a dataset split")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="heldout")
    p.add_argument("--masked", action="store_true", help="score foreground pixels only")

    p = sub.add_parser("render", help="render dataset frames with a trained model")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--frames", type=int, nargs="*", default=None)

    p = sub.add_parser("reenact", help="drive a model with an expression sequence")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--source", type=Path, default=None,
                   help="dataset providing the expression sequence (default: own held-out split)")
    p.add_argument("--camera-frame", type=int, default=None)

    p = sub.add_parser("extract-mesh", help="marching cubes on the trained field")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--frame", type=int, default=None)
    p.add_argument("--resolution", type=int, default=64)

    p = sub.add_parser("ablate", help="train and compare the ablation variants")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--preset", choices=("toy", "default"), default="toy")
    return parser


def _load_train_config(args):
    from .trainer import TrainConfig, toy_config

    cfg = toy_config() if args.preset == "toy" else TrainConfig()
    if args.config is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **json.loads(args.config.read_text())})
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _require_out(args):
    if args.out is None:
        raise UsageError("--out is required")
    return args.out


def cmd_synth_data(args):
    from .scene import DatasetConfig, SceneConfig, generate_dataset, make_scene

    out = _require_out(args)
    seed = 0 if args.seed is None else args.seed
    scene_cfg = SceneConfig(n_bumps=args.bumps, n_expr=args.expr_dim)
    data_cfg = DatasetConfig(n_frames=args.frames, width=args.width, height=args.height,
                             camera_rule=args.camera, seed=seed)
    if args.config is not None:
        extra = json.loads(args.config.read_text())
        scene_cfg = dataclasses.replace(scene_cfg, **extra.get("scene", {}))
        data_cfg = dataclasses.replace(data_cfg, **extra.get("dataset", {}))
    manifest = generate_dataset(make_scene(seed, scene_cfg), out, data_cfg)
    n_held = len(manifest.ids("heldout"))
    print(f"wrote {len(manifest.frames)} frames ({n_held} held out) to {out}")


def cmd_train(args):
    from .scene import Dataset
    from .trainer import train

    cfg = _load_train_config(args)
    if args.dump_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return
    if args.data is None:
        raise UsageError("--data is required")
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    trainer = train(Dataset(args.data), cfg, out)
    print(f"trained {trainer.step} steps, checkpoint in {out}")


def _model_and_data(args):
    from .checkpoint import load_model, read_manifest
    from .evaluate import check_compatible
    from .scene import Dataset
    from .trainer import TrainConfig

    dataset = Dataset(args.data)
    model = load_model(args.checkpoint)
    check_compatible(model, dataset)
    manifest = read_manifest(args.checkpoint)
    cfg = TrainConfig.from_dict(manifest["train_config"])
    return model, dataset, dataclasses.replace(cfg.eval_render, bound_radius=dataset.bound_radius)


def cmd_evaluate(args):
    from .evaluate import evaluate

    model, dataset, rcfg = _model_and_data(args)
    rep = evaluate(model, dataset, args.split, rcfg, masked=args.masked)
    text = json.dumps(rep.to_dict(), indent=2, sort_keys=True)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n")
    print(f"{args.split}: mae={rep.mae:.5f} psnr={rep.psnr:.3f} ssim={rep.ssim:.4f} "
          f"frames={rep.n_frames}")


def _write_render(out_dir, name, img):
    from . import io as sio
    from .renderer import normal_to_image

    sio.write_png(out_dir / f"{name}.png", img["rgb"])
    sio.write_png(out_dir / f"{name}.normal.png", normal_to_image(img["normal"]))
    sio.write_png(out_dir / f"{name}.mask.png", img["mask"])
    sio.write_depth(out_dir / f"{name}.depth.f32", img["depth"])


def cmd_render(args):
    from .renderer import render_image

    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    model, dataset, rcfg = _model_and_data(args)
    ids = args.frames if args.frames else dataset.manifest.ids("heldout")
    for t in ids:
        frame = dataset.frames[t]
        _write_render(out, str(t), render_image(model, frame.camera, frame.expression, rcfg))
    print(f"rendered {len(ids)} frames to {out}")


def cmd_reenact(args):
    from .evaluate import reenact
    from .scene import Dataset

    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    model, dataset, rcfg = _model_and_data(args)
    if args.source is not None:
        src = Dataset(args.source)
        seq = [f.expression for f in src.split("all")]
    else:
        seq = [f.expression for f in dataset.split("heldout")]
    cam_id = args.camera_frame if args.camera_frame is not None else dataset.manifest.ids("heldout")[0]
    frames = reenact(model, seq, dataset.frames[cam_id].camera, rcfg, dataset.bound_radius)
    for i, img in enumerate(frames):
        _write_render(out, f"{i:04d}", img)
    print(f"reenacted {len(frames)} frames to {out}")


def cmd_extract_mesh(args):
    import torch

    from . import io as sio
    from .renderer import extract_mesh

    out = _require_out(args)
    model, dataset, _ = _model_and_data(args)
    t = args.frame if args.frame is not None else dataset.manifest.ids("heldout")[0]
    eps = torch.as_tensor(dataset.frames[t].expression, dtype=torch.float32)
    verts, faces = extract_mesh(model, eps, args.resolution, dataset.bound_radius)
    out.parent.mkdir(parents=True, exist_ok=True)
    sio.write_obj(out, verts, faces)
    print(f"mesh with {len(verts)} vertices, {len(faces)} faces -> {out}")


def cmd_ablate(args):
    from .scene import Dataset
    from .trainer import run_ablation_suite

    out = _require_out(args)
    cfg = _load_train_config(args)
    result = run_ablation_suite(Dataset(args.data), cfg, seeds=tuple(args.seeds), out_dir=out)
    print(result.markdown())


COMMANDS = {
    "synth-data": cmd_synth_data, "train": cmd_train, "evaluate": cmd_evaluate,
    "render": cmd_render, "reenact": cmd_reenact, "extract-mesh": cmd_extract_mesh,
    "ablate": cmd_ablate,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        print(f"sveavatar: error: {exc}", file=sys.stderr)
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"sveavatar: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"sveavatar: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 2
    return 0


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
