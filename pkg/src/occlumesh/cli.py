"""Command-line entry points.

Subcommands: ``gen`` (synthetic scene corpus), ``pretrain`` / ``finetune``
(the two training stages), ``render`` (novel view from a checkpoint),
``mesh`` (marching-cubes extraction), ``eval`` (geometric + photometric
report). Report paths write JSON/JSONL plus matplotlib figures next to
them. Every command echoes its resolved configuration before running and
removes partial outputs when it fails.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np


def _echo(label: str, payload: dict) -> None:
    print(f"[{label}] " + json.dumps(payload, sort_keys=True, default=str))


def _load_config_file(path) -> dict:
    with open(path) as f:
        return json.load(f)


def _train_config(args, stage: str):
    from .trainer import TrainConfig

    base = {}
    if args.config:
        base = _load_config_file(args.config)
        base.pop("stage", None)
        base.pop("profile", None)
    overrides = dict(base)
    for key in ("iterations", "seed", "lr", "rays_per_view", "supervision_views",
                "pose_noise_sigma", "holdout_view", "checkpoint_every", "log_every"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return TrainConfig.make(stage, args.profile, **overrides)


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_gen(args) -> int:
    from .synthgen import SceneConfig, generate_scene_with_coverage
    from .synthgen.io import write_scene

    out = Path(args.out)
    cfg = SceneConfig(n_views=args.views, resolution=args.resolution)
    _echo("gen", {"out": out, "scenes": args.scenes, "seed": args.seed,
                  "views": cfg.n_views, "resolution": cfg.resolution})
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"schema": 1, "seed": args.seed, "scenes": []}
    for i in range(args.scenes):
        scene_dir = out / f"scene_{i:03}"
        try:
            spec, sample = generate_scene_with_coverage(args.seed + i, cfg)
            write_scene(scene_dir, spec, sample)
        except Exception:
            shutil.rmtree(scene_dir, ignore_errors=True)
            raise
        cov = sample.covered_fractions()
        manifest["scenes"].append({"dir": scene_dir.name, "seed": spec.seed,
                                   "max_covered_fraction": float(cov.max())})
        print(f"  {scene_dir.name}: covered {cov.max():.3f}")
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
    return 0


def _cmd_train(args, stage: str) -> int:
    from .trainer import run_training

    cfg = _train_config(args, stage)
    _echo(stage, {"data": args.data, "out": args.out, **cfg.to_json()})
    ck = run_training(cfg, args.data, args.out,
                      init_checkpoint=getattr(args, "init", None),
                      resume_checkpoint=getattr(args, "resume", None),
                      progress=lambda it, rep: print(
                          f"  iter {it}: total {rep.total:.4f}"))
    print(f"checkpoint: {ck}")
    return 0


def cmd_render(args) -> int:
    from .synthgen.io import SceneDataset, save_png
    from .trainer import load_model, render_image

    model, _, header = load_model(args.checkpoint)
    _echo("render", {"checkpoint": args.checkpoint, "scene": args.scene,
                     "ref_view": args.ref_view, "view": args.view,
                     "stage": header.get("stage")})
    ds = SceneDataset(args.data, include_free=False)
    scene = ds.scene(args.scene)
    cam = scene.view(args.view).camera
    img = render_image(model, scene, args.ref_view, cam)
    out = Path(args.out)
    try:
        save_png(out, img)
    except Exception:
        out.unlink(missing_ok=True)
        raise
    print(f"wrote {out}")
    return 0


def cmd_mesh(args) -> int:
    from .conditioning import SemanticProvider
    from .metrics import extract_mesh
    from .synthgen.io import SceneDataset, write_obj
    from .trainer import (build_scene_context, field_color_fn, field_sdf_fn,
                          load_model)

    model, _, _ = load_model(args.checkpoint)
    _echo("mesh", {"checkpoint": args.checkpoint, "scene": args.scene,
                   "resolution": args.resolution})
    ds = SceneDataset(args.data, include_free=False)
    scene = ds.scene(args.scene)
    ctx = build_scene_context(model, scene, args.ref_view, SemanticProvider())
    c, r = scene.meta.norm_center, scene.meta.norm_radius
    mesh = extract_mesh(field_sdf_fn(model, scene, ctx), (c - r, c + r),
                        args.resolution,
                        color_fn=field_color_fn(model, scene, ctx))
    out = Path(args.out)
    try:
        write_obj(out, mesh.verts, mesh.faces, mesh.colors)
    except Exception:
        out.unlink(missing_ok=True)
        raise
    print(f"wrote {out} ({len(mesh.verts)} verts, {len(mesh.faces)} faces)")
    return 0


def cmd_eval(args) -> int:
    from .conditioning import SemanticProvider
    from .figures import plot_metric_bars, plot_view_comparison
    from .metrics import (MetricReport, chamfer_and_fscore, extract_mesh, psnr,
                          sample_surface, ssim)
    from .synthgen.io import SceneDataset
    from .trainer import (TrainConfig, build_scene_context, field_sdf_fn,
                          load_model, render_image)

    model, _, header = load_model(args.checkpoint)
    if args.pose_noise_sigma is not None:
        model.cfg.pose_noise_sigma = args.pose_noise_sigma
    _echo("eval", {"checkpoint": args.checkpoint, "data": args.data,
                   "holdout_view": args.view,
                   "pose_noise_sigma": model.cfg.pose_noise_sigma})
    ds = SceneDataset(args.data, include_free=True)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    try:
        per_scene = []
        rng = np.random.default_rng(args.seed)
        scene_ids = range(len(ds)) if args.scene is None else [args.scene]
        for i in scene_ids:
            scene = ds.scene(i)
            ctx = build_scene_context(model, scene, args.ref_view, SemanticProvider())
            c, r = scene.meta.norm_center, scene.meta.norm_radius
            mesh = extract_mesh(field_sdf_fn(model, scene, ctx), (c - r, c + r),
                                args.resolution)
            rep = MetricReport()
            if not mesh.is_empty:
                gv, gf, _ = scene.gt_mesh()
                a = sample_surface(mesh.verts, mesh.faces, args.samples, rng)
                b = sample_surface(gv, gf, args.samples, rng)
                rep.chamfer, (rep.f5, rep.f10) = chamfer_and_fscore(a, b)
            hold = scene.view(args.view)
            img = render_image(model, scene, args.ref_view, hold.camera)
            rep.psnr = psnr(img, hold.rgb_free, hold.mask_full)
            rep.ssim = ssim(img, hold.rgb_free, hold.mask_full)
            entry = rep.to_json()
            entry["scene"] = i
            per_scene.append(entry)
            print("  scene %d: %s" % (i, json.dumps(rep.to_json())))
            if args.figures:
                plot_view_comparison(img, hold.rgb_free, hold.mask_full,
                                     out_dir / f"scene_{i:03}_view.png")
        keys = ("chamfer", "f5", "f10", "psnr", "ssim")
        mean = {k: float(np.mean([e[k] for e in per_scene if k in e]))
                for k in keys if any(k in e for e in per_scene)}
        report = {"schema": 1, "checkpoint": str(args.checkpoint),
                  "pose_noise_sigma": model.cfg.pose_noise_sigma,
                  "per_scene": per_scene, "mean": mean}
        with open(report_path, "w") as f:
            json.dump(report, f, sort_keys=True, indent=1)
        if args.figures:
            plot_metric_bars(per_scene, out_dir / "metrics.png")
    except Exception:
        report_path.unlink(missing_ok=True)
        raise
    print(f"wrote {report_path}")
    return 0


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def _apply_thread_limit(threads: int | None) -> None:
    """Cap BLAS/OpenMP pools; deterministic mode forces a single thread so
    floating-point reductions have a fixed order."""
    if threads is None:
        if os.environ.get("OCCLUMESH_DETERMINISTIC"):
            threads = 1
        else:
            return
    if threads < 1:
        raise SystemExit("--threads must be >= 1")
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(threads)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occlumesh")
    p.add_argument("--threads", type=int, default=None,
                   help="thread cap for numeric libraries "
                        "(default: machine parallelism; 1 when "
                        "OCCLUMESH_DETERMINISTIC is set)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic grasp-scene corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--views", type=int, default=10)
    g.add_argument("--resolution", type=int, default=128)
    g.set_defaults(fn=cmd_gen)

    for stage in ("pretrain", "finetune"):
        t = sub.add_parser(stage, help=f"run the {stage} stage")
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--config", help="JSON file with TrainConfig overrides")
        t.add_argument("--profile", default="desk", choices=("desk", "paper"))
        t.add_argument("--iterations", type=int)
        t.add_argument("--seed", type=int)
        t.add_argument("--lr", type=float)
        t.add_argument("--rays-per-view", dest="rays_per_view", type=int)
        t.add_argument("--supervision-views", dest="supervision_views", type=int)
        t.add_argument("--pose-noise-sigma", dest="pose_noise_sigma", type=float)
        t.add_argument("--holdout-view", dest="holdout_view", type=int)
        t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
        t.add_argument("--log-every", dest="log_every", type=int)
        t.add_argument("--resume", help="checkpoint to resume this stage from")
        if stage == "finetune":
            t.add_argument("--init", required=True,
                           help="stage-one checkpoint to start from")
        t.set_defaults(fn=lambda a, s=stage: _cmd_train(a, s))

    r = sub.add_parser("render", help="render a view from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--scene", type=int, default=0)
    r.add_argument("--ref-view", dest="ref_view", type=int, default=0)
    r.add_argument("--view", type=int, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)

    m = sub.add_parser("mesh", help="extract a mesh from a checkpoint")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--scene", type=int, default=0)
    m.add_argument("--ref-view", dest="ref_view", type=int, default=0)
    m.add_argument("--resolution", type=int, default=64)
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_mesh)

    e = sub.add_parser("eval", help="geometric + photometric evaluation report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--scene", type=int, help="evaluate one scene only")
    e.add_argument("--ref-view", dest="ref_view", type=int, default=0)
    e.add_argument("--view", type=int, default=9, help="held-out view index")
    e.add_argument("--resolution", type=int, default=64)
    e.add_argument("--samples", type=int, default=30000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--pose-noise-sigma", dest="pose_noise_sigma", type=float)
    e.add_argument("--figures", action="store_true", default=True)
    e.add_argument("--no-figures", dest="figures", action="store_false")
    e.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_thread_limit(args.threads)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
