"""Tile-based forward splatting with an analytic backward pass for colors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .scene import Camera, GaussianCloud

LOW_PASS = 0.3          # px^2 added to the projected covariance diagonal
NEAR_CLIP = 0.01
CULL_SIGMA = 3.0        # image-overlap cull uses the 3-sigma extent
# tile binning must reach every pixel where alpha can exceed 1/255,
# i.e. mahalanobis^2 <= 2 ln 255, or sqrt(2 ln 255) sigma ~= 3.33 sigma
BIN_SIGMA = math.sqrt(2.0 * math.log(255.0))


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    gaussian_index: int


@dataclass
class ContribRecords:
    """Compact per-pixel (gaussian_index, weight) stream, pixel-major offsets."""

    offsets: np.ndarray   # (H*W+1,) int64
    index: np.ndarray     # (R,) int64 gaussian indices
    weight: np.ndarray    # (R,) float64 compositing weights


@dataclass
class RenderOutput:
    color: np.ndarray     # (H, W, 3) in [0,1]
    alpha: np.ndarray     # (H, W) accumulated opacity
    depth: np.ndarray     # (H, W) alpha-weighted expected depth, 0 where empty
    n_gaussians: int
    background: np.ndarray
    contrib: Optional[ContribRecords] = None


class _Projected:
    """Depth-sorted surviving splats plus their tile assignment."""

    __slots__ = ("index", "mean2d", "conic", "cov2d", "depth", "m_max", "r_bin",
                 "tile_splats", "tile_starts")


def _project_arrays(cloud: GaussianCloud, camera: Camera, opacities: np.ndarray):
    means = cloud.means
    pc = means @ camera.rotation.T + camera.translation
    z = pc[:, 2]
    keep = z > NEAR_CLIP
    # opacity below the skip threshold can never contribute
    keep &= opacities >= kernels.ALPHA_MIN
    if not keep.any():
        return None

    idx = np.nonzero(keep)[0]
    pc = pc[idx]
    z = z[idx]
    u = camera.fx * pc[:, 0] / z + camera.cx
    v = camera.fy * pc[:, 1] / z + camera.cy

    cov3d = cloud.covariances()[idx]
    n = idx.size
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = camera.fx / z
    jac[:, 0, 2] = -camera.fx * pc[:, 0] / (z * z)
    jac[:, 1, 1] = camera.fy / z
    jac[:, 1, 2] = -camera.fy * pc[:, 1] / (z * z)
    m = jac @ camera.rotation[None, :, :]
    cov2d = m @ cov3d @ np.transpose(m, (0, 2, 1))
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    r_cull = CULL_SIGMA * np.sqrt(lam_max)
    on_image = ((u + r_cull >= 0.0) & (u - r_cull <= camera.width - 1.0)
                & (v + r_cull >= 0.0) & (v - r_cull <= camera.height - 1.0)
                & (det > 0.0))
    if not on_image.any():
        return None
    sel = np.nonzero(on_image)[0]

    out = _Projected.__new__(_Projected)
    out.index = idx[sel]
    out.mean2d = np.stack([u[sel], v[sel]], axis=1)
    out.cov2d = cov2d[sel]
    inv_det = 1.0 / det[sel]
    out.conic = np.stack([c[sel] * inv_det, -b[sel] * inv_det, a[sel] * inv_det], axis=1)
    out.depth = z[sel]
    out.m_max = 2.0 * np.log(255.0 * opacities[out.index])
    out.r_bin = BIN_SIGMA * np.sqrt(lam_max[sel])
    return out


def project_splat(mean, rotation, scale, camera: Camera, index: int = 0):
    """Project one Gaussian; returns a Splat2D or None when culled."""
    cloud = GaussianCloud(means=np.asarray(mean, dtype=float).reshape(1, 3),
                          rotations=np.asarray(rotation, dtype=float).reshape(1, 4),
                          scales=np.asarray(scale, dtype=float).reshape(1, 3),
                          opacities=np.ones(1), base_colors=np.full((1, 3), 0.5))
    proj = _project_arrays(cloud, camera, np.ones(1))
    if proj is None:
        return None
    return Splat2D(mean2d=proj.mean2d[0], cov2d=proj.cov2d[0],
                   depth=float(proj.depth[0]), gaussian_index=index)


def _project_arrays_numba(cloud: GaussianCloud, camera: Camera, opacities):
    ok, mean2d, conic, depth, m_max, r_bin = kernels.project_splats_numba(
        cloud.means, cloud.covariances(), camera.rotation, camera.translation,
        camera.fx, camera.fy, camera.cx, camera.cy,
        camera.width, camera.height, opacities)
    if not ok.any():
        return None
    idx = np.nonzero(ok)[0]
    # compact and depth-sort in one gather; stable sort on an ascending index
    # set resolves depth ties by gaussian index
    sel = idx[np.argsort(depth[idx], kind="stable")]
    out = _Projected.__new__(_Projected)
    out.index = sel
    out.mean2d = mean2d[sel]
    out.conic = conic[sel]
    out.cov2d = None
    out.depth = depth[sel]
    out.m_max = m_max[sel]
    out.r_bin = r_bin[sel]
    return out


def _sort_by_depth(proj: _Projected):
    # stable sort on depth == lexsort((index, depth)): proj.index is ascending,
    # so ties resolve by gaussian index
    order = np.argsort(proj.depth, kind="stable")
    for name in ("index", "mean2d", "conic", "depth", "m_max", "r_bin"):
        setattr(proj, name, getattr(proj, name)[order])
    if proj.cov2d is not None:
        proj.cov2d = proj.cov2d[order]


def _bin_tiles(proj: _Projected, height: int, width: int):
    """Scatter depth-sorted splats into overlapping 16x16 tiles."""
    if kernels.NUMBA_ENABLED:
        n_ty = (height + kernels.TILE - 1) // kernels.TILE
        n_tx = (width + kernels.TILE - 1) // kernels.TILE
        proj.tile_splats, proj.tile_starts = kernels.bin_splats_numba(
            np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.r_bin),
            n_tx, n_ty)
        return
    r_bin = proj.r_bin

    n_ty = (height + kernels.TILE - 1) // kernels.TILE
    n_tx = (width + kernels.TILE - 1) // kernels.TILE
    u = proj.mean2d[:, 0]
    v = proj.mean2d[:, 1]
    tx0 = np.clip(np.floor((u - r_bin) / kernels.TILE), 0, n_tx - 1).astype(np.int64)
    tx1 = np.clip(np.floor((u + r_bin) / kernels.TILE), 0, n_tx - 1).astype(np.int64)
    ty0 = np.clip(np.floor((v - r_bin) / kernels.TILE), 0, n_ty - 1).astype(np.int64)
    ty1 = np.clip(np.floor((v + r_bin) / kernels.TILE), 0, n_ty - 1).astype(np.int64)

    span_x = tx1 - tx0 + 1
    span_y = ty1 - ty0 + 1
    counts = span_x * span_y
    total = int(counts.sum())
    rep = np.repeat(np.arange(counts.size), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.arange(total) - np.repeat(starts, counts)
    dx = rank % span_x[rep]
    dy = rank // span_x[rep]
    tiles = (ty0[rep] + dy) * n_tx + (tx0[rep] + dx)

    # stable sort by tile keeps the global depth order inside each tile
    shuffle = np.argsort(tiles, kind="stable")
    tiles = tiles[shuffle]
    proj.tile_splats = rep[shuffle]
    proj.tile_starts = np.searchsorted(tiles, np.arange(n_ty * n_tx + 1))


def _empty_output(camera: Camera, background, n_gaussians, with_contrib):
    h, w = camera.height, camera.width
    color = np.tile(background, (h, w, 1)).astype(np.float64)
    out = RenderOutput(color=color, alpha=np.zeros((h, w)), depth=np.zeros((h, w)),
                       n_gaussians=n_gaussians, background=background)
    if with_contrib:
        out.contrib = ContribRecords(offsets=np.zeros(h * w + 1, dtype=np.int64),
                                     index=np.zeros(0, dtype=np.int64),
                                     weight=np.zeros(0))
    return out


def render(cloud: GaussianCloud, camera: Camera, color_override=None,
           background=None, with_contrib: bool = False,
           color_only: bool = False) -> RenderOutput:
    """Front-to-back composite of the cloud; optionally keeps backward records.

    color_only skips the alpha/depth outputs (returned as None); the color
    image is bit-identical to the full render.
    """
    n = len(cloud)
    if background is None:
        background = np.zeros(3)
    background = np.clip(np.asarray(background, dtype=np.float64).reshape(3), 0.0, 1.0)
    if color_override is not None:
        color_override = np.asarray(color_override, dtype=np.float64)
        if color_override.shape != (n, 3):
            raise ValueError(
                f"color_override shape {color_override.shape} does not match N={n}")
        if not np.all(np.isfinite(color_override)):
            raise ValueError("color_override contains non-finite values")
        colors = color_override
    else:
        colors = cloud.base_colors

    if n == 0:
        proj = None
    elif kernels.NUMBA_ENABLED:
        proj = _project_arrays_numba(cloud, camera, cloud.opacities)
    else:
        proj = _project_arrays(cloud, camera, cloud.opacities)
        if proj is not None:
            _sort_by_depth(proj)
    if proj is None:
        return _empty_output(camera, background, n, with_contrib)
    _bin_tiles(proj, camera.height, camera.width)

    opac = np.ascontiguousarray(cloud.opacities[proj.index])
    cols = np.ascontiguousarray(colors[proj.index])
    mean2d = np.ascontiguousarray(proj.mean2d)
    conic = np.ascontiguousarray(proj.conic)
    depth = np.ascontiguousarray(proj.depth)
    m_max = np.ascontiguousarray(proj.m_max)
    r_bin = np.ascontiguousarray(proj.r_bin)
    h, w = camera.height, camera.width

    if color_only and not with_contrib:
        color = kernels.render_tiles_color(
            mean2d, conic, m_max, r_bin, opac, cols, depth,
            proj.tile_splats, proj.tile_starts, h, w, background)
        return RenderOutput(color=color, alpha=None, depth=None,
                            n_gaussians=n, background=background)

    if not with_contrib:
        color, alpha, depth_img = kernels.render_tiles(
            mean2d, conic, m_max, r_bin, opac, cols, depth,
            proj.tile_splats, proj.tile_starts, h, w, background)
        return RenderOutput(color=color, alpha=alpha, depth=depth_img,
                            n_gaussians=n, background=background)

    counts = kernels.count_records(mean2d, conic, m_max, r_bin, opac,
                                   proj.tile_splats, proj.tile_starts, h, w)
    offsets = np.zeros(h * w + 1, dtype=np.int64)
    np.cumsum(counts.ravel(), out=offsets[1:])
    total = int(offsets[-1])
    rec_index = np.empty(total, dtype=np.int64)
    rec_weight = np.empty(total)
    color, alpha, depth_img = kernels.render_tiles_records(
        mean2d, conic, m_max, r_bin, opac, cols, depth,
        proj.tile_splats, proj.tile_starts, h, w, background,
        offsets, rec_index, rec_weight)
    contrib = ContribRecords(offsets=offsets, index=proj.index[rec_index],
                             weight=rec_weight)
    return RenderOutput(color=color, alpha=alpha, depth=depth_img,
                        n_gaussians=n, background=background, contrib=contrib)


def render_backward_colors(output: RenderOutput, grad_color_image: np.ndarray) -> np.ndarray:
    """dL/dcolors (N,3) from cached weights: exact for the forward as implemented."""
    if output.contrib is None:
        raise RuntimeError("render output has no contribution records; "
                           "call render(..., with_contrib=True)")
    h, w = output.alpha.shape
    grad = np.asarray(grad_color_image, dtype=np.float64)
    if grad.shape != (h, w, 3):
        raise ValueError(f"gradient image shape {grad.shape} != {(h, w, 3)}")
    rec = output.contrib
    return kernels.splat_color_grads(rec.offsets, rec.index, rec.weight,
                                     np.ascontiguousarray(grad.reshape(-1, 3)),
                                     output.n_gaussians)
