"""Multi-view consistency: exact geometric flow, occlusion-masked warping,
warped RMSE / warped perceptual distance, and the per-frame baselines."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rasterizer, stylefield, trainer
from .errors import ConfigurationError, EvaluationError
from .scene import Camera
from .styletransfer2d import CHANNELS_PER_SCALE, N_SCALES, extract_features, stylize2d

ALPHA_VALID = 0.5
DEPTH_REL_TOL = 0.02


@dataclass
class FlowField:
    """Displacement (H,W,2) in pixels on the reference grid, pointing into the
    source view, plus the validity mask."""

    flow: np.ndarray
    mask: np.ndarray


def _bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Sample img at (u,v); returns (values, inside-frame mask)."""
    h, w = img.shape[:2]
    inside = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    x0 = np.clip(np.floor(u), 0, w - 2).astype(np.int64)
    y0 = np.clip(np.floor(v), 0, h - 2).astype(np.int64)
    fx = np.clip(u - x0, 0.0, 1.0)
    fy = np.clip(v - y0, 0.0, 1.0)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v00 = img[y0, x0]
    v01 = img[y0, x0 + 1]
    v10 = img[y0 + 1, x0]
    v11 = img[y0 + 1, x0 + 1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy, inside


def exact_flow(ref_depth, ref_alpha, ref_cam: Camera,
               src_depth, src_alpha, src_cam: Camera) -> FlowField:
    """Flow for warping the source view onto the reference view, from rendered
    depth and known poses. Masks out weak coverage, out-of-frame reprojections
    and occlusions (reprojected depth off by more than 2%)."""
    h, w = ref_depth.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    valid = (ref_alpha >= ALPHA_VALID) & (ref_depth > 0.0)

    z = ref_depth
    px = (xs - ref_cam.cx) / ref_cam.fx * z
    py = (ys - ref_cam.cy) / ref_cam.fy * z
    cam_pts = np.stack([px, py, z], axis=-1)
    world = (cam_pts - ref_cam.translation) @ ref_cam.rotation
    src_pts = world @ src_cam.rotation.T + src_cam.translation

    z_src = src_pts[..., 2]
    valid &= z_src > 0.0
    safe_z = np.where(z_src > 0.0, z_src, 1.0)
    u = src_cam.fx * src_pts[..., 0] / safe_z + src_cam.cx
    v = src_cam.fy * src_pts[..., 1] / safe_z + src_cam.cy

    sampled_depth, inside = _bilinear(src_depth, u, v)
    sampled_alpha, _ = _bilinear(src_alpha, u, v)
    valid &= inside
    valid &= sampled_alpha >= ALPHA_VALID
    valid &= np.abs(z_src - sampled_depth) <= DEPTH_REL_TOL * np.abs(z_src)

    flow = np.stack([u - xs, v - ys], axis=-1)
    flow[~valid] = 0.0
    return FlowField(flow=flow, mask=valid)


def flow_between(ref: rasterizer.RenderOutput, ref_cam: Camera,
                 src: rasterizer.RenderOutput, src_cam: Camera) -> FlowField:
    return exact_flow(ref.depth, ref.alpha, ref_cam, src.depth, src.alpha, src_cam)


def warp_image(image: np.ndarray, flow: FlowField, src_valid=None):
    """Bilinear sample of image at (pixel + flow); returns (warped, mask)."""
    h, w = flow.mask.shape
    if image.shape[:2] != (h, w):
        raise ValueError(f"image {image.shape[:2]} does not match flow {(h, w)}")
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    u = xs + flow.flow[..., 0]
    v = ys + flow.flow[..., 1]
    warped, inside = _bilinear(np.asarray(image, dtype=np.float64), u, v)
    mask = flow.mask & inside
    if src_valid is not None:
        x0 = np.clip(np.floor(u), 0, w - 2).astype(np.int64)
        y0 = np.clip(np.floor(v), 0, h - 2).astype(np.int64)
        support = (src_valid[y0, x0] & src_valid[y0, x0 + 1]
                   & src_valid[y0 + 1, x0] & src_valid[y0 + 1, x0 + 1])
        mask = mask & support
    warped = np.where(mask[..., None] if warped.ndim == 3 else mask, warped, 0.0)
    return warped, mask


def warped_rmse(o_v: np.ndarray, o_v_prime: np.ndarray, flow: FlowField) -> float:
    """RMSE between the reference view and the masked warp of the other view."""
    warped, mask = warp_image(o_v_prime, flow)
    if not mask.any():
        raise EvaluationError("no valid pixels for warped RMSE")
    diff = (np.asarray(o_v, dtype=np.float64) - warped)[mask]
    return float(np.sqrt(np.mean(diff * diff)))


def warped_perceptual(o_v: np.ndarray, o_v_prime: np.ndarray, flow: FlowField) -> float:
    """Masked RMSE in the pyramid feature space, averaged over scale levels.

    Invalid pixels are filled from the reference view before feature
    extraction so the mask boundary contributes nothing; statistics are then
    taken over valid pixels only.
    """
    warped, mask = warp_image(o_v_prime, flow)
    if not mask.any():
        raise EvaluationError("no valid pixels for warped perceptual distance")
    o_v = np.asarray(o_v, dtype=np.float64)
    filled = np.where(mask[..., None], warped, o_v)
    f_ref = extract_features(o_v)
    f_warp = extract_features(filled)
    levels = []
    for lvl in range(N_SCALES):
        sl = slice(lvl * CHANNELS_PER_SCALE, (lvl + 1) * CHANNELS_PER_SCALE)
        diff = (f_ref[sl] - f_warp[sl])[:, mask]
        levels.append(np.sqrt(np.mean(diff * diff)))
    return float(np.mean(levels))


# ---------------------------------------------------------------------------
# render-set construction (GSS and the two per-frame baselines)
# ---------------------------------------------------------------------------


@dataclass
class EvalView:
    camera: Camera
    image: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray


def render_views_unstyled(cloud, cameras, background=None) -> list:
    views = []
    for cam in cameras:
        out = rasterizer.render(cloud, cam, background=background)
        views.append(EvalView(camera=cam, image=out.color, depth=out.depth,
                              alpha=out.alpha))
    return views


def render_views_gss(cloud, cameras, field, latent, background=None) -> list:
    colors = stylefield.predict_colors(field, cloud.means, latent)
    views = []
    for cam in cameras:
        out = rasterizer.render(cloud, cam, color_override=colors,
                                background=background)
        views.append(EvalView(camera=cam, image=out.color, depth=out.depth,
                              alpha=out.alpha))
    return views


def render_views_gs_adain(cloud, cameras, style_image, background=None) -> list:
    """Per-frame baseline: stylize each rendered view independently."""
    views = []
    for view in render_views_unstyled(cloud, cameras, background):
        views.append(EvalView(camera=view.camera,
                              image=stylize2d(view.image, style_image),
                              depth=view.depth, alpha=view.alpha))
    return views


def render_views_adain_gs(cloud, cameras, style_image, background=None,
                          fit_iterations: int = 150) -> list:
    """Per-style baseline: refit base colors against pre-stylized targets."""
    unstyled = render_views_unstyled(cloud, cameras, background)
    targets = [stylize2d(v.image, style_image) for v in unstyled]
    colors, _ = trainer.fit_colors(cloud, cameras, targets,
                                   iterations=fit_iterations, background=background)
    views = []
    for cam in cameras:
        out = rasterizer.render(cloud, cam, color_override=colors,
                                background=background)
        views.append(EvalView(camera=cam, image=out.color, depth=out.depth,
                              alpha=out.alpha))
    return views


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def view_pairs(n_views: int, pairing: str) -> list:
    if pairing == "short":
        return [(i, i + 1) for i in range(n_views - 1)]
    if pairing == "long":
        half = n_views // 2
        return [(i, i + half) for i in range(n_views - half)]
    raise ValueError(f"unknown pairing {pairing!r} (expected short|long)")


def consistency_report(views: list, pairing: str = "short", mode: str = "gss") -> list:
    """Per-pair warped scores; short = adjacent views, long = half-arc apart."""
    if len(views) < 2:
        raise ConfigurationError("consistency report needs at least 2 views")
    rows = []
    for pair_id, (ia, ib) in enumerate(view_pairs(len(views), pairing)):
        va, vb = views[ia], views[ib]
        flow = exact_flow(va.depth, va.alpha, va.camera, vb.depth, vb.alpha, vb.camera)
        rows.append({
            "pair_id": pair_id, "view_a": ia, "view_b": ib,
            "wrmse": warped_rmse(va.image, vb.image, flow),
            "wperc": warped_perceptual(va.image, vb.image, flow),
            "mode": mode,
        })
    return rows


def report_means(rows: list) -> dict:
    return {"wrmse": float(np.mean([r["wrmse"] for r in rows])),
            "wperc": float(np.mean([r["wperc"] for r in rows]))}


def write_report_csv(rows: list, path) -> None:
    lines = ["pair_id,view_a,view_b,wrmse,wperc,mode"]
    lines += [f"{r['pair_id']},{r['view_a']},{r['view_b']},"
              f"{r['wrmse']:.8f},{r['wperc']:.8f},{r['mode']}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")
