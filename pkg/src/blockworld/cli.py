"""Command line entry point: fit, render, eval, synth, export."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .dataio import DatasetError, load_dataset, look_at, load_points, save_dataset, save_points, \
    write_image, export_scene_obj, Camera
from .evaluation import DEFAULT_SYNTH_SPEC, evaluate, generate_synthetic_scene
from .losses import LossWeights
from .optim import Schedule, TrainConfig, multi_run_select, write_metrics
from .renderer import SIGMA_FINETUNE, RenderSettings, render_views
from .report import plot_loss_curves, plot_render_comparison, plot_run_losses
from .scene import SceneConfig, count_primitives, load_checkpoint, save_checkpoint

log = logging.getLogger("blockworld")


def _weights(args) -> LossWeights:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text()).get("weights", {})
    for flag, key in (("lambda_parsi", "parsi"), ("lambda_tv", "tv"), ("lambda_over", "over")):
        v = getattr(args, flag)
        if v is not None:
            base[key] = v
    return LossWeights(**base)


def cmd_fit(args) -> int:
    ds = load_dataset(args.manifest)
    config = TrainConfig(weights=_weights(args), schedule=Schedule.scaled(args.iters), k_max=args.k_max)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    best, results = multi_run_select(ds, config, n_runs=args.runs, seed=args.seed,
                                     scene_config=SceneConfig(scene_scale=ds.scene_scale), out_dir=out)
    best_idx = results.index(best)
    save_checkpoint(out / "best.ckpt", best.scene,
                    extra={"seed": best.seed, "run": best_idx,
                           "manifest": str(Path(args.manifest).resolve())})
    rows = ["run\tseed\trender_loss\tprimitives"]
    for i, r in enumerate(results):
        rows.append(f"{i}\t{r.seed}\t{r.render_loss!r}\t{count_primitives(r.scene)}")
    (out / "runs.tsv").write_text("\n".join(rows) + "\n")
    plot_loss_curves(best.metrics, out / "loss_curves.png", title=f"best run {best_idx}")
    plot_run_losses([r.render_loss for r in results], best_idx, out / "run_losses.png")
    with torch.no_grad():
        n = min(4, len(ds))
        idx = np.linspace(0, len(ds) - 1, n).astype(int)
        renders = [o.image.numpy() for o in
                   render_views(best.scene, [ds.cameras[i] for i in idx], RenderSettings(sigma=SIGMA_FINETUNE))]
    plot_render_comparison(renders, [ds.images[i] for i in idx], out / "renders.png")
    print("\n".join(rows))
    print(f"best\t{best_idx}\t{out / 'best.ckpt'}")
    return 0


def _orbit_cameras(scene, n: int, width: int, height: int):
    r = 3.2 * scene.config.scene_scale
    target = np.array([0.0, -0.3, 0.0]) * scene.config.scene_scale
    return [look_at((r * np.cos(a), 1.6 * scene.config.scene_scale, r * np.sin(a)), target,
                    width, height, 45.0)
            for a in np.linspace(0, 2 * np.pi, n, endpoint=False)]


def cmd_render(args) -> int:
    scene, _, header, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.camera == "orbit":
        cams = _orbit_cameras(scene, args.frames, args.size, args.size)
    elif args.camera.endswith(".json"):
        cams = [Camera.from_dict(json.loads(Path(args.camera).read_text()))]
    else:
        manifest = args.manifest or header.get("extra", {}).get("manifest")
        if not manifest:
            raise DatasetError("a camera index needs --manifest")
        cams = [load_dataset(manifest).cameras[int(args.camera)]]
    settings = RenderSettings(sigma=args.sigma)
    paths = []
    with torch.no_grad():
        for i in range(0, len(cams), 4):
            for j, o in enumerate(render_views(scene, cams[i:i + 4], settings)):
                p = out / f"frame_{i + j:04d}.png"
                write_image(p, o.image.numpy())
                paths.append(p)
    for p in paths:
        print(p)
    return 0


def cmd_eval(args) -> int:
    scene, _, header, _ = load_checkpoint(args.checkpoint)
    gt = load_points(args.gt_points)
    ds = load_dataset(args.manifest) if args.manifest else None
    report, renders = evaluate(scene, gt, ds, max_dist=args.max_dist, n_points=args.n_points,
                               seed=args.seed)
    print(report.to_text())
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    if renders is not None:
        plot_render_comparison(renders, ds.images, out.with_suffix(".png"))
    return 0


def cmd_synth(args) -> int:
    spec = DEFAULT_SYNTH_SPEC if args.spec == "default" else json.loads(Path(args.spec).read_text())
    scene, ds, cloud = generate_synthetic_scene(spec, seed=args.seed, n_points=args.n_points)
    out = Path(args.out)
    manifest = save_dataset(ds, out)
    save_points(out / "gt_points.xyz", cloud.points)
    save_checkpoint(out / "gt.ckpt", scene, extra={"manifest": str(manifest.resolve())})
    print(manifest)
    print(out / "gt_points.xyz")
    return 0


def cmd_export(args) -> int:
    scene, *_ = load_checkpoint(args.checkpoint)
    obj = export_scene_obj(scene, args.out, name=args.name)
    print(obj)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blockworld", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit blocks to a multi-view dataset")
    f.add_argument("manifest")
    f.add_argument("--k-max", type=int, default=10)
    f.add_argument("--iters", type=int, default=25000)
    f.add_argument("--lambda-parsi", type=float, default=None)
    f.add_argument("--lambda-tv", type=float, default=None)
    f.add_argument("--lambda-over", type=float, default=None)
    f.add_argument("--config", help="JSON file with a 'weights' mapping; flags override it")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--runs", type=int, default=5)
    f.add_argument("--out", default="fit_out")
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("render", help="render a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("camera", help="'orbit', a camera JSON file, or a view index into --manifest")
    r.add_argument("--manifest")
    r.add_argument("--frames", type=int, default=36)
    r.add_argument("--size", type=int, default=256)
    r.add_argument("--sigma", type=float, default=SIGMA_FINETUNE)
    r.add_argument("--out", default="renders")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="Chamfer distance, image metrics and #P")
    e.add_argument("checkpoint")
    e.add_argument("gt_points")
    e.add_argument("--manifest", help="also compute PSNR/SSIM against these views")
    e.add_argument("--max-dist", type=float, default=None)
    e.add_argument("--n-points", type=int, default=10000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report", default="eval_report.json")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("spec", help="JSON spec file or 'default'")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-points", type=int, default=10000)
    s.set_defaults(func=cmd_synth)

    x = sub.add_parser("export", help="write OBJ/MTL/PNG for a checkpoint")
    x.add_argument("checkpoint")
    x.add_argument("--out", required=True)
    x.add_argument("--name", default="scene")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (DatasetError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
