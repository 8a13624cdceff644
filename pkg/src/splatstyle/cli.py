"""Command-line front end for the whole pipeline."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import kernels, metrics, rasterizer, scene, stylefield, trainer
from .errors import ConfigurationError
from .imageio import load_png, save_png
from .styletransfer2d import style_latent

log = logging.getLogger("splatstyle")


def _setup_logging():
    level = os.environ.get("SPLATSTYLE_LOG", "error").strip().lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_scene(args) -> scene.SceneBundle:
    bundle = scene.load_bundle(args.scene)
    if getattr(args, "cams", None):
        cams = scene.load_cameras(args.cams)
        bundle = scene.SceneBundle(cloud=bundle.cloud, cameras=cams,
                                   background=bundle.background)
    return bundle


def _bilinear_weights(px: float, py: float) -> np.ndarray:
    return np.array([(1 - px) * (1 - py), px * (1 - py), (1 - px) * py, px * py])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    bundle = scene.make_synthetic_scene(args.kind, args.n, args.cams, args.seed,
                                        width=args.width, height=args.height)
    side = scene.save_bundle(bundle, args.out)
    log.info("wrote %s and %s", args.out, side)
    return 0


def cmd_fit_colors(args) -> int:
    bundle = _load_scene(args)
    targets = [rasterizer.render(bundle.cloud, cam, background=bundle.background).color
               for cam in bundle.cameras]
    colors, history = trainer.fit_colors(bundle.cloud, bundle.cameras, targets,
                                         iterations=args.iters, lr=args.lr,
                                         background=bundle.background)
    fitted = scene.GaussianCloud(means=bundle.cloud.means,
                                 rotations=bundle.cloud.rotations,
                                 scales=bundle.cloud.scales,
                                 opacities=bundle.cloud.opacities,
                                 base_colors=colors)
    scene.save_ply(fitted, args.out)
    print(f"fit-colors: final loss {history[-1]['loss']:.6f} "
          f"(first {history[0]['loss']:.6f}) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.config:
        config = trainer.TrainConfig.from_file(args.config)
    else:
        config = trainer.TrainConfig(
            lambda_g=args.lambda_g, lambda_c=args.lambda_c, lr=args.lr,
            iterations=args.iters, seed=args.seed, style_dir=args.style_dir,
            scene=args.scene, checkpoint_every=args.checkpoint_every,
            checkpoint_dir=args.checkpoint_dir or str(Path(args.out).parent))
    result = trainer.train(config, resume=args.resume)
    stylefield.save_field(result.field, args.out)
    if args.loss_csv:
        trainer.write_loss_csv(result.history, args.loss_csv)
    final = result.history[-1]
    print(f"train: {len(result.history)} iterations, "
          f"final total {final['total']:.6f} -> {args.out}")
    return 0


def _stylized_colors(bundle, args):
    if not args.field:
        return None
    if not args.style:
        raise ConfigurationError("--field requires --style")
    field = stylefield.load_field(args.field)
    latent = style_latent(load_png(args.style[0]))
    return stylefield.predict_colors(field, bundle.cloud.means, latent)


def cmd_render(args) -> int:
    bundle = _load_scene(args)
    colors = _stylized_colors(bundle, args)
    if args.cam is not None:
        cams = [(args.cam, bundle.cameras[args.cam])]
        single = True
    else:
        cams = list(enumerate(bundle.cameras))
        single = False
    out = Path(args.out)
    if not single:
        out.mkdir(parents=True, exist_ok=True)
    for idx, cam in cams:
        img = rasterizer.render(bundle.cloud, cam, color_override=colors,
                                background=bundle.background,
                                color_only=True).color
        save_png(img, out if single else out / f"view_{idx:03d}.png")
    return 0


def cmd_interpolate(args) -> int:
    if len(args.style) != 4:
        raise ConfigurationError("interpolate needs exactly 4 --style images")
    bundle = _load_scene(args)
    field = stylefield.load_field(args.field)
    latents = np.stack([style_latent(load_png(p)) for p in args.style])
    cam = bundle.cameras[args.cam]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = args.grid
    for iy in range(grid):
        for ix in range(grid):
            px = ix / (grid - 1) if grid > 1 else 0.0
            py = iy / (grid - 1) if grid > 1 else 0.0
            latent = _bilinear_weights(px, py) @ latents
            colors = stylefield.predict_colors(field, bundle.cloud.means, latent)
            img = rasterizer.render(bundle.cloud, cam, color_override=colors,
                                    background=bundle.background,
                                    color_only=True).color
            save_png(img, out / f"blend_{iy}_{ix}.png")
    return 0


def cmd_eval(args) -> int:
    bundle = _load_scene(args)
    style = load_png(args.style)
    modes = [m.strip() for m in args.mode.split(",") if m.strip()]
    rows = []
    for mode in modes:
        if mode == "gss":
            field = stylefield.load_field(args.field)
            views = metrics.render_views_gss(bundle.cloud, bundle.cameras, field,
                                             style_latent(style), bundle.background)
        elif mode == "gs-adain":
            views = metrics.render_views_gs_adain(bundle.cloud, bundle.cameras,
                                                  style, bundle.background)
        elif mode == "adain-gs":
            views = metrics.render_views_adain_gs(bundle.cloud, bundle.cameras,
                                                  style, bundle.background,
                                                  fit_iterations=args.fit_iters)
        else:
            raise ConfigurationError(f"unknown eval mode {mode!r}")
        mode_rows = metrics.consistency_report(views, pairing=args.pairing, mode=mode)
        means = metrics.report_means(mode_rows)
        print(f"eval[{mode}] {args.pairing}: mean wrmse {means['wrmse']:.4f}, "
              f"mean wperc {means['wperc']:.4f} over {len(mode_rows)} pairs")
        rows.extend(mode_rows)
    metrics.write_report_csv(rows, args.out)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_snapshot, create_app

    snapshot = build_snapshot(args.scene, args.field, args.style_dir,
                              cams=getattr(args, "cams", None))
    app = create_app(snapshot)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatstyle",
        description="Style-conditioned Gaussian splatting: synthesize scenes, "
                    "train the color field, render, evaluate, serve.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, cams=True, threads=True, backend=False):
        if cams:
            p.add_argument("--cams", help="camera list JSON (defaults to the "
                                          "scene's sidecar file)")
        if threads:
            p.add_argument("--threads", type=int, default=0,
                           help="cap worker threads (1 = bit-reproducible)")
        if backend:
            p.add_argument("--backend", choices=("stat", "neural"),
                           default="stat", help="2D stylization backend")
            p.add_argument("--neural-weights",
                           help="weight blob for the neural backend")

    p = sub.add_parser("synth", help="generate a deterministic synthetic scene")
    p.add_argument("--kind", required=True, choices=scene.SCENE_KINDS)
    p.add_argument("--n", type=int, required=True, help="number of Gaussians")
    p.add_argument("--cams", type=int, required=True, help="number of cameras")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.add_argument("--out", required=True, help="output PLY path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-colors", help="photometric color fit against the "
                                          "scene's own renders")
    p.add_argument("--scene", required=True)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output PLY path")
    common(p)
    p.set_defaults(func=cmd_fit_colors)

    p = sub.add_parser("train", help="train the style field")
    p.add_argument("--scene")
    p.add_argument("--style-dir")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lambda-g", type=float, default=1.0)
    p.add_argument("--lambda-c", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="key=value config file (overrides flags)")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--checkpoint-dir", default="")
    p.add_argument("--resume", help="resume from a training checkpoint (.npz)")
    p.add_argument("--loss-csv", help="write the loss history CSV here")
    p.add_argument("--out", required=True, help="output style-field checkpoint")
    common(p, backend=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render unstyled or stylized views")
    p.add_argument("--scene", required=True)
    p.add_argument("--field", help="style-field checkpoint (omit for unstyled)")
    p.add_argument("--style", action="append", default=[],
                   help="style image (with --field)")
    p.add_argument("--cam", type=int, help="camera index; omit to render all")
    p.add_argument("--out", required=True, help="PNG path (or directory for all)")
    common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("interpolate", help="4-corner bilinear style blend grid")
    p.add_argument("--scene", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--style", action="append", required=True,
                   help="style image; give exactly 4")
    p.add_argument("--grid", type=int, default=5)
    p.add_argument("--cam", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    common(p)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("eval", help="multi-view consistency report")
    p.add_argument("--scene", required=True)
    p.add_argument("--field", help="needed for the gss mode")
    p.add_argument("--style", required=True)
    p.add_argument("--mode", default="gss,gs-adain",
                   help="comma list of gss,gs-adain,adain-gs")
    p.add_argument("--pairing", choices=("short", "long"), default="short")
    p.add_argument("--fit-iters", type=int, default=150,
                   help="color-fit iterations for adain-gs")
    p.add_argument("--out", required=True, help="report CSV path")
    common(p, backend=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="websocket render service")
    p.add_argument("--scene", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--style-dir", required=True,
                   help="directory with the 4 corner styles (sorted order)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8642)
    common(p)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 0):
        kernels.set_threads(args.threads)
    try:
        if getattr(args, "backend", None):
            from .styletransfer2d import set_default_backend

            set_default_backend(args.backend,
                                weights=getattr(args, "neural_weights", None))
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
