"""Hot numeric kernels: tile compositing and hash-grid interpolation.

Every kernel exists twice, as a numba ``@njit`` function and as a pure-numpy
implementation. The backend is selected once at import time; set
``SPLATSTYLE_NO_NUMBA=1`` to force the numpy path (the numba path is the
default whenever numba imports). Both variants stay importable so
``benchmarks/kernel_bench.py`` can time them on identical inputs.

Per-pixel compositing semantics are identical in both paths and in the
brute-force test oracle: front-to-back, alpha clamped at 0.99, contributions
below 1/255 skipped, pixel terminated once transmittance drops below 1e-4.
"""

from __future__ import annotations

import math
import os

import numpy as np

TILE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4

HASH_PRIME_Y = 2654435761
HASH_PRIME_Z = 805459861

# shared lookup table for exp(-m/2), m in [0, 2 ln 255]: linear interpolation
# keeps the relative error ~1e-6, far inside every rendering tolerance, and
# both backends read the same table so they stay in lockstep
_EXP_TABLE_SIZE = 16384
_EXP_TABLE_MAX = 2.0 * math.log(255.0) * (1.0 + 1e-12)
_EXP_TABLE_SCALE = (_EXP_TABLE_SIZE - 1) / _EXP_TABLE_MAX
EXP_TABLE = np.exp(-0.5 * np.arange(_EXP_TABLE_SIZE) / _EXP_TABLE_SCALE)


def exp_neg_half_numpy(m):
    """Table-interpolated exp(-m/2) for m in [0, 2 ln 255]."""
    pos = m * _EXP_TABLE_SCALE
    lo = np.minimum(pos.astype(np.int64), _EXP_TABLE_SIZE - 2)
    frac = pos - lo
    return EXP_TABLE[lo] * (1.0 - frac) + EXP_TABLE[lo + 1] * frac


def _numba_wanted() -> bool:
    flag = os.environ.get("SPLATSTYLE_NO_NUMBA", "").strip().lower()
    return flag in ("", "0", "false", "no")


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _tile_grid(height, width):
    return (height + TILE - 1) // TILE, (width + TILE - 1) // TILE


def render_tiles_numpy(mean2d, conic, m_max, r_bin, opac, color, depth,
                       tile_splats, tile_starts, height, width, background):
    """Composite depth-sorted splats tile by tile. Returns (color, alpha, depth)."""
    out_c = np.zeros((height, width, 3))
    out_a = np.zeros((height, width))
    out_d = np.zeros((height, width))
    n_ty, n_tx = _tile_grid(height, width)
    for ty in range(n_ty):
        y0, y1 = ty * TILE, min((ty + 1) * TILE, height)
        for tx in range(n_tx):
            x0, x1 = tx * TILE, min((tx + 1) * TILE, width)
            tid = ty * n_tx + tx
            s0, s1 = tile_starts[tid], tile_starts[tid + 1]
            if s1 == s0:
                out_c[y0:y1, x0:x1] = background
                continue
            ys, xs = np.mgrid[y0:y1, x0:x1]
            px = xs.astype(np.float64)
            py = ys.astype(np.float64)
            trans = np.ones(px.shape)
            acc_c = np.zeros(px.shape + (3,))
            acc_d = np.zeros(px.shape)
            acc_a = np.zeros(px.shape)
            for k in range(s0, s1):
                si = tile_splats[k]
                alive = trans >= T_MIN
                if not alive.any():
                    break
                dx = px - mean2d[si, 0]
                dy = py - mean2d[si, 1]
                inside = (np.abs(dx) <= r_bin[si]) & (np.abs(dy) <= r_bin[si])
                a, b, c = conic[si]
                m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                hit = alive & inside & (m <= m_max[si]) & (m >= 0.0)
                if not hit.any():
                    continue
                alpha = np.where(
                    hit,
                    np.minimum(ALPHA_MAX,
                               opac[si] * exp_neg_half_numpy(np.where(hit, m, 0.0))),
                    0.0,
                )
                w = alpha * trans
                acc_c += w[..., None] * color[si]
                acc_d += w * depth[si]
                acc_a += w
                trans = trans * (1.0 - alpha)
            out_c[y0:y1, x0:x1] = acc_c + trans[..., None] * background
            out_a[y0:y1, x0:x1] = acc_a
            safe = np.where(acc_a > 0.0, acc_a, 1.0)
            out_d[y0:y1, x0:x1] = np.where(acc_a > 0.0, acc_d / safe, 0.0)
    return out_c, out_a, out_d


def count_records_numpy(mean2d, conic, m_max, r_bin, opac,
                        tile_splats, tile_starts, height, width):
    """Count per-pixel contributions under the exact compositing rules."""
    counts = np.zeros((height, width), dtype=np.int64)
    n_ty, n_tx = _tile_grid(height, width)
    for ty in range(n_ty):
        y0, y1 = ty * TILE, min((ty + 1) * TILE, height)
        for tx in range(n_tx):
            x0, x1 = tx * TILE, min((tx + 1) * TILE, width)
            tid = ty * n_tx + tx
            s0, s1 = tile_starts[tid], tile_starts[tid + 1]
            if s1 == s0:
                continue
            ys, xs = np.mgrid[y0:y1, x0:x1]
            px = xs.astype(np.float64)
            py = ys.astype(np.float64)
            trans = np.ones(px.shape)
            cnt = np.zeros(px.shape, dtype=np.int64)
            for k in range(s0, s1):
                si = tile_splats[k]
                alive = trans >= T_MIN
                if not alive.any():
                    break
                dx = px - mean2d[si, 0]
                dy = py - mean2d[si, 1]
                inside = (np.abs(dx) <= r_bin[si]) & (np.abs(dy) <= r_bin[si])
                a, b, c = conic[si]
                m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                hit = alive & inside & (m <= m_max[si]) & (m >= 0.0)
                if not hit.any():
                    continue
                alpha = np.where(
                    hit,
                    np.minimum(ALPHA_MAX,
                               opac[si] * exp_neg_half_numpy(np.where(hit, m, 0.0))),
                    0.0,
                )
                cnt += hit
                trans = trans * (1.0 - alpha)
            counts[y0:y1, x0:x1] = cnt
    return counts


def render_tiles_records_numpy(mean2d, conic, m_max, r_bin, opac, color, depth,
                               tile_splats, tile_starts, height, width, background,
                               offsets, rec_index, rec_weight):
    """Like render_tiles, additionally writing the (index, weight) record stream.

    ``offsets`` is pixel-major (length H*W+1); each pixel's records land at
    ``offsets[y*W+x]`` so tiles write disjoint ranges.
    """
    out_c = np.zeros((height, width, 3))
    out_a = np.zeros((height, width))
    out_d = np.zeros((height, width))
    n_ty, n_tx = _tile_grid(height, width)
    for ty in range(n_ty):
        y0, y1 = ty * TILE, min((ty + 1) * TILE, height)
        for tx in range(n_tx):
            x0, x1 = tx * TILE, min((tx + 1) * TILE, width)
            tid = ty * n_tx + tx
            s0, s1 = tile_starts[tid], tile_starts[tid + 1]
            if s1 == s0:
                out_c[y0:y1, x0:x1] = background
                continue
            ys, xs = np.mgrid[y0:y1, x0:x1]
            px = xs.astype(np.float64)
            py = ys.astype(np.float64)
            shape = px.shape
            trans = np.ones(shape)
            acc_c = np.zeros(shape + (3,))
            acc_d = np.zeros(shape)
            acc_a = np.zeros(shape)
            pix = (ys * width + xs).ravel()
            cursor = offsets[pix].copy()
            for k in range(s0, s1):
                si = tile_splats[k]
                alive = trans >= T_MIN
                if not alive.any():
                    break
                dx = px - mean2d[si, 0]
                dy = py - mean2d[si, 1]
                inside = (np.abs(dx) <= r_bin[si]) & (np.abs(dy) <= r_bin[si])
                a, b, c = conic[si]
                m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                hit = alive & inside & (m <= m_max[si]) & (m >= 0.0)
                if not hit.any():
                    continue
                alpha = np.where(
                    hit,
                    np.minimum(ALPHA_MAX,
                               opac[si] * exp_neg_half_numpy(np.where(hit, m, 0.0))),
                    0.0,
                )
                w = alpha * trans
                flat_hit = hit.ravel()
                pos = cursor[flat_hit]
                rec_index[pos] = si
                rec_weight[pos] = w.ravel()[flat_hit]
                cursor[flat_hit] += 1
                acc_c += w[..., None] * color[si]
                acc_d += w * depth[si]
                acc_a += w
                trans = trans * (1.0 - alpha)
            out_c[y0:y1, x0:x1] = acc_c + trans[..., None] * background
            out_a[y0:y1, x0:x1] = acc_a
            safe = np.where(acc_a > 0.0, acc_a, 1.0)
            out_d[y0:y1, x0:x1] = np.where(acc_a > 0.0, acc_d / safe, 0.0)
    return out_c, out_a, out_d


def splat_color_grads_numpy(offsets, rec_index, rec_weight, grad_pixels, n_gaussians):
    """dL/dcolor_i = sum over records of weight * dL/dC(pixel)."""
    counts = np.diff(offsets)
    per_rec = np.repeat(grad_pixels, counts, axis=0)
    out = np.zeros((n_gaussians, 3))
    np.add.at(out, rec_index, rec_weight[:, None] * per_rec)
    return out


def adam_update_numpy(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def _corner_weights(frac, ox, oy, oz):
    wx = frac[:, 0] if ox else 1.0 - frac[:, 0]
    wy = frac[:, 1] if oy else 1.0 - frac[:, 1]
    wz = frac[:, 2] if oz else 1.0 - frac[:, 2]
    return wx * wy * wz


def _corner_index_numpy(cx, cy, cz, res, table_size):
    if (res + 1) ** 3 <= table_size:
        return cx + cy * (res + 1) + cz * (res + 1) ** 2
    h = (cx.astype(np.uint32)
         ^ (cy.astype(np.uint32) * np.uint32(HASH_PRIME_Y))
         ^ (cz.astype(np.uint32) * np.uint32(HASH_PRIME_Z)))
    return (h & np.uint32(table_size - 1)).astype(np.int64)


def encode_numpy(points01, tables, resolutions):
    """Multi-level trilinear feature lookup for points in [0,1]^3."""
    n_levels, table_size, n_feat = tables.shape
    n = points01.shape[0]
    out = np.empty((n, n_levels * n_feat))
    for lvl in range(n_levels):
        res = int(resolutions[lvl])
        xs = points01 * res
        cell = np.clip(np.floor(xs), 0, res - 1).astype(np.int64)
        frac = xs - cell
        acc = np.zeros((n, n_feat))
        for corner in range(8):
            ox, oy, oz = corner & 1, (corner >> 1) & 1, (corner >> 2) & 1
            idx = _corner_index_numpy(cell[:, 0] + ox, cell[:, 1] + oy,
                                      cell[:, 2] + oz, res, table_size)
            w = _corner_weights(frac, ox, oy, oz)
            acc += w[:, None] * tables[lvl, idx]
        out[:, lvl * n_feat:(lvl + 1) * n_feat] = acc
    return out


def encode_backward_numpy(points01, grad_features, tables_shape, resolutions, grad_tables):
    """Scatter feature gradients back into (pre-allocated) table gradients."""
    n_levels, table_size, n_feat = tables_shape
    for lvl in range(n_levels):
        res = int(resolutions[lvl])
        xs = points01 * res
        cell = np.clip(np.floor(xs), 0, res - 1).astype(np.int64)
        frac = xs - cell
        g = grad_features[:, lvl * n_feat:(lvl + 1) * n_feat]
        for corner in range(8):
            ox, oy, oz = corner & 1, (corner >> 1) & 1, (corner >> 2) & 1
            idx = _corner_index_numpy(cell[:, 0] + ox, cell[:, 1] + oy,
                                      cell[:, 2] + oz, res, table_size)
            w = _corner_weights(frac, ox, oy, oz)
            np.add.at(grad_tables[lvl], idx, w[:, None] * g)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

NUMBA_ENABLED = False

if _numba_wanted():
    try:
        import numba
        from numba import njit, prange

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False

if NUMBA_ENABLED:

    @njit(cache=True, nogil=True, inline="always")
    def _exp_neg_half(m):
        pos = m * _EXP_TABLE_SCALE
        lo = int(pos)
        if lo > _EXP_TABLE_SIZE - 2:
            lo = _EXP_TABLE_SIZE - 2
        frac = pos - lo
        return EXP_TABLE[lo] * (1.0 - frac) + EXP_TABLE[lo + 1] * frac

    @njit(cache=True, parallel=True, nogil=True)
    def render_tiles_numba(mean2d, conic, m_max, r_bin, opac, color, depth,
                           tile_splats, tile_starts, height, width, background):
        # splat-major within each tile: the splat's row data stays in registers
        # and the Mahalanobis form advances by forward differences along each
        # scanline (2 adds per pixel). Per-pixel compositing order and skip
        # rules are identical to the pixel-major record kernels.
        out_c = np.empty((height, width, 3))   # every pixel written below
        out_a = np.empty((height, width))
        out_d = np.zeros((height, width))
        n_ty = (height + TILE - 1) // TILE
        n_tx = (width + TILE - 1) // TILE
        for tid in prange(n_ty * n_tx):
            ty = tid // n_tx
            tx = tid % n_tx
            y0 = ty * TILE
            y1 = min(y0 + TILE, height)
            x0 = tx * TILE
            x1 = min(x0 + TILE, width)
            tw = x1 - x0
            npix = tw * (y1 - y0)
            s0 = tile_starts[tid]
            s1 = tile_starts[tid + 1]
            # one row per pixel: c0 c1 c2 depth alpha transmittance
            acc = np.zeros((npix, 6))
            acc[:, 5] = 1.0
            alive = npix
            for k in range(s0, s1):
                if alive == 0:
                    break
                si = tile_splats[k]
                mx = mean2d[si, 0]
                my = mean2d[si, 1]
                qa = conic[si, 0]
                qb = conic[si, 1]
                qc = conic[si, 2]
                mm = m_max[si]
                r = r_bin[si]
                # exact ellipse row spans need a sqrt per row; for small
                # footprints the bbox span plus the in-loop m test is cheaper
                use_ellipse = r > 8.0
                if use_ellipse:
                    det_q = qa * qc - qb * qb
                    dy_lim = math.sqrt(max(qa * mm / det_q, 0.0))
                else:
                    det_q = 0.0
                    dy_lim = r
                by0 = max(y0, int(math.ceil(my - dy_lim)))
                by1 = min(y1 - 1, int(math.floor(my + dy_lim)))
                if by1 < by0:
                    continue
                op = opac[si]
                col0 = color[si, 0]
                col1 = color[si, 1]
                col2 = color[si, 2]
                dz = depth[si]
                ddm = 2.0 * qa
                for y in range(by0, by1 + 1):
                    dy = float(y) - my
                    if use_ellipse:
                        # row span: a dx^2 + 2b dy dx + (c dy^2 - mm) <= 0
                        disc = qa * mm - det_q * dy * dy
                        if disc < 0.0:
                            continue
                        sq = math.sqrt(disc)
                        lo = mx + (-qb * dy - sq) / qa
                        hi = mx + (-qb * dy + sq) / qa
                    else:
                        lo = mx - r
                        hi = mx + r
                    bx0 = max(x0, int(math.ceil(lo)))
                    bx1 = min(x1 - 1, int(math.floor(hi)))
                    if bx1 < bx0:
                        continue
                    dx = float(bx0) - mx
                    m = qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy
                    dm = qa * (2.0 * dx + 1.0) + 2.0 * qb * dy
                    base = (y - y0) * tw - x0
                    for x in range(bx0, bx1 + 1):
                        i = base + x
                        t = acc[i, 5]
                        if t >= T_MIN and m <= mm and m >= 0.0:
                            alpha = op * _exp_neg_half(m)
                            if alpha > ALPHA_MAX:
                                alpha = ALPHA_MAX
                            w = alpha * t
                            acc[i, 0] += w * col0
                            acc[i, 1] += w * col1
                            acc[i, 2] += w * col2
                            acc[i, 3] += w * dz
                            acc[i, 4] += w
                            t = t * (1.0 - alpha)
                            acc[i, 5] = t
                            if t < T_MIN:
                                alive -= 1
                        m += dm
                        dm += ddm
            for y in range(y0, y1):
                base = (y - y0) * tw - x0
                for x in range(x0, x1):
                    i = base + x
                    trans = acc[i, 5]
                    out_c[y, x, 0] = acc[i, 0] + trans * background[0]
                    out_c[y, x, 1] = acc[i, 1] + trans * background[1]
                    out_c[y, x, 2] = acc[i, 2] + trans * background[2]
                    asum = acc[i, 4]
                    out_a[y, x] = asum
                    if asum > 0.0:
                        out_d[y, x] = acc[i, 3] / asum
        return out_c, out_a, out_d

    @njit(cache=True, parallel=True, nogil=True)
    def count_records_numba(mean2d, conic, m_max, r_bin, opac,
                            tile_splats, tile_starts, height, width):
        counts = np.zeros((height, width), dtype=np.int64)
        n_ty = (height + TILE - 1) // TILE
        n_tx = (width + TILE - 1) // TILE
        for tid in prange(n_ty * n_tx):
            ty = tid // n_tx
            tx = tid % n_tx
            y0 = ty * TILE
            y1 = min(y0 + TILE, height)
            x0 = tx * TILE
            x1 = min(x0 + TILE, width)
            s0 = tile_starts[tid]
            s1 = tile_starts[tid + 1]
            if s0 == s1:
                continue
            for y in range(y0, y1):
                py = float(y)
                for x in range(x0, x1):
                    px = float(x)
                    trans = 1.0
                    cnt = 0
                    for k in range(s0, s1):
                        if trans < T_MIN:
                            break
                        si = tile_splats[k]
                        dx = px - mean2d[si, 0]
                        if dx > r_bin[si] or dx < -r_bin[si]:
                            continue
                        dy = py - mean2d[si, 1]
                        if dy > r_bin[si] or dy < -r_bin[si]:
                            continue
                        m = (conic[si, 0] * dx * dx
                             + 2.0 * conic[si, 1] * dx * dy
                             + conic[si, 2] * dy * dy)
                        if m > m_max[si] or m < 0.0:
                            continue
                        alpha = opac[si] * _exp_neg_half(m)
                        if alpha > ALPHA_MAX:
                            alpha = ALPHA_MAX
                        cnt += 1
                        trans = trans * (1.0 - alpha)
                    counts[y, x] = cnt
        return counts

    @njit(cache=True, parallel=True, nogil=True)
    def render_tiles_records_numba(mean2d, conic, m_max, r_bin, opac, color, depth,
                                   tile_splats, tile_starts, height, width, background,
                                   offsets, rec_index, rec_weight):
        out_c = np.zeros((height, width, 3))
        out_a = np.zeros((height, width))
        out_d = np.zeros((height, width))
        n_ty = (height + TILE - 1) // TILE
        n_tx = (width + TILE - 1) // TILE
        for tid in prange(n_ty * n_tx):
            ty = tid // n_tx
            tx = tid % n_tx
            y0 = ty * TILE
            y1 = min(y0 + TILE, height)
            x0 = tx * TILE
            x1 = min(x0 + TILE, width)
            s0 = tile_starts[tid]
            s1 = tile_starts[tid + 1]
            for y in range(y0, y1):
                py = float(y)
                for x in range(x0, x1):
                    px = float(x)
                    trans = 1.0
                    c0 = 0.0
                    c1 = 0.0
                    c2 = 0.0
                    dsum = 0.0
                    asum = 0.0
                    ptr = offsets[y * width + x]
                    for k in range(s0, s1):
                        if trans < T_MIN:
                            break
                        si = tile_splats[k]
                        dx = px - mean2d[si, 0]
                        if dx > r_bin[si] or dx < -r_bin[si]:
                            continue
                        dy = py - mean2d[si, 1]
                        if dy > r_bin[si] or dy < -r_bin[si]:
                            continue
                        m = (conic[si, 0] * dx * dx
                             + 2.0 * conic[si, 1] * dx * dy
                             + conic[si, 2] * dy * dy)
                        if m > m_max[si] or m < 0.0:
                            continue
                        alpha = opac[si] * _exp_neg_half(m)
                        if alpha > ALPHA_MAX:
                            alpha = ALPHA_MAX
                        w = alpha * trans
                        rec_index[ptr] = si
                        rec_weight[ptr] = w
                        ptr += 1
                        c0 += w * color[si, 0]
                        c1 += w * color[si, 1]
                        c2 += w * color[si, 2]
                        dsum += w * depth[si]
                        asum += w
                        trans = trans * (1.0 - alpha)
                    out_c[y, x, 0] = c0 + trans * background[0]
                    out_c[y, x, 1] = c1 + trans * background[1]
                    out_c[y, x, 2] = c2 + trans * background[2]
                    out_a[y, x] = asum
                    if asum > 0.0:
                        out_d[y, x] = dsum / asum
        return out_c, out_a, out_d

    @njit(cache=True, nogil=True)
    def splat_color_grads_numba(offsets, rec_index, rec_weight, grad_pixels, n_gaussians):
        out = np.zeros((n_gaussians, 3))
        n_pix = offsets.shape[0] - 1
        for p in range(n_pix):
            g0 = grad_pixels[p, 0]
            g1 = grad_pixels[p, 1]
            g2 = grad_pixels[p, 2]
            for r in range(offsets[p], offsets[p + 1]):
                gi = rec_index[r]
                w = rec_weight[r]
                out[gi, 0] += w * g0
                out[gi, 1] += w * g1
                out[gi, 2] += w * g2
        return out

    @njit(cache=True, parallel=True, nogil=True)
    def project_splats_numba(means, cov3d, rot, trans, fx, fy, cx, cy,
                             width, height, opac):
        n = means.shape[0]
        ok = np.zeros(n, dtype=np.bool_)
        mean2d = np.empty((n, 2))
        conic = np.empty((n, 3))
        depth_z = np.empty(n)
        m_max = np.empty(n)
        r_bin = np.empty(n)
        bin_sigma = math.sqrt(2.0 * math.log(255.0))
        for i in prange(n):
            if opac[i] < ALPHA_MIN:
                continue
            x0 = means[i, 0]
            x1 = means[i, 1]
            x2 = means[i, 2]
            pcx = rot[0, 0] * x0 + rot[0, 1] * x1 + rot[0, 2] * x2 + trans[0]
            pcy = rot[1, 0] * x0 + rot[1, 1] * x1 + rot[1, 2] * x2 + trans[1]
            pcz = rot[2, 0] * x0 + rot[2, 1] * x1 + rot[2, 2] * x2 + trans[2]
            if pcz <= 0.01:
                continue
            u = fx * pcx / pcz + cx
            v = fy * pcy / pcz + cy
            j00 = fx / pcz
            j02 = -fx * pcx / (pcz * pcz)
            j11 = fy / pcz
            j12 = -fy * pcy / (pcz * pcz)
            # rows of M = J @ R
            m00 = j00 * rot[0, 0] + j02 * rot[2, 0]
            m01 = j00 * rot[0, 1] + j02 * rot[2, 1]
            m02 = j00 * rot[0, 2] + j02 * rot[2, 2]
            m10 = j11 * rot[1, 0] + j12 * rot[2, 0]
            m11 = j11 * rot[1, 1] + j12 * rot[2, 1]
            m12 = j11 * rot[1, 2] + j12 * rot[2, 2]
            s00 = cov3d[i, 0, 0]
            s01 = cov3d[i, 0, 1]
            s02 = cov3d[i, 0, 2]
            s11 = cov3d[i, 1, 1]
            s12 = cov3d[i, 1, 2]
            s22 = cov3d[i, 2, 2]
            t0 = m00 * s00 + m01 * s01 + m02 * s02
            t1 = m00 * s01 + m01 * s11 + m02 * s12
            t2 = m00 * s02 + m01 * s12 + m02 * s22
            ca = t0 * m00 + t1 * m01 + t2 * m02 + 0.3
            cb = t0 * m10 + t1 * m11 + t2 * m12
            u0 = m10 * s00 + m11 * s01 + m12 * s02
            u1 = m10 * s01 + m11 * s11 + m12 * s12
            u2 = m10 * s02 + m11 * s12 + m12 * s22
            cc = u0 * m10 + u1 * m11 + u2 * m12 + 0.3
            det = ca * cc - cb * cb
            if det <= 0.0:
                continue
            half = 0.5 * (ca - cc)
            lam = 0.5 * (ca + cc) + math.sqrt(max(half * half + cb * cb, 0.0))
            r_cull = 3.0 * math.sqrt(lam)
            if (u + r_cull < 0.0 or u - r_cull > width - 1.0
                    or v + r_cull < 0.0 or v - r_cull > height - 1.0):
                continue
            ok[i] = True
            mean2d[i, 0] = u
            mean2d[i, 1] = v
            inv_det = 1.0 / det
            conic[i, 0] = cc * inv_det
            conic[i, 1] = -cb * inv_det
            conic[i, 2] = ca * inv_det
            depth_z[i] = pcz
            m_max[i] = 2.0 * math.log(255.0 * opac[i])
            r_bin[i] = bin_sigma * math.sqrt(lam)
        return ok, mean2d, conic, depth_z, m_max, r_bin

    @njit(cache=True, nogil=True)
    def bin_splats_numba(mean2d, r_bin, n_tx, n_ty):
        """Counting sort into overlapping tiles; input is depth-sorted so each
        tile list inherits the global order."""
        n = mean2d.shape[0]
        n_tiles = n_tx * n_ty
        tx0 = np.empty(n, dtype=np.int64)
        tx1 = np.empty(n, dtype=np.int64)
        ty0 = np.empty(n, dtype=np.int64)
        ty1 = np.empty(n, dtype=np.int64)
        counts = np.zeros(n_tiles, dtype=np.int64)
        for i in range(n):
            a0 = int(math.floor((mean2d[i, 0] - r_bin[i]) / TILE))
            a1 = int(math.floor((mean2d[i, 0] + r_bin[i]) / TILE))
            b0 = int(math.floor((mean2d[i, 1] - r_bin[i]) / TILE))
            b1 = int(math.floor((mean2d[i, 1] + r_bin[i]) / TILE))
            tx0[i] = min(max(a0, 0), n_tx - 1)
            tx1[i] = min(max(a1, 0), n_tx - 1)
            ty0[i] = min(max(b0, 0), n_ty - 1)
            ty1[i] = min(max(b1, 0), n_ty - 1)
            for ty in range(ty0[i], ty1[i] + 1):
                for tx in range(tx0[i], tx1[i] + 1):
                    counts[ty * n_tx + tx] += 1
        starts = np.zeros(n_tiles + 1, dtype=np.int64)
        for t in range(n_tiles):
            starts[t + 1] = starts[t] + counts[t]
        cursor = starts[:-1].copy()
        tile_splats = np.empty(starts[n_tiles], dtype=np.int64)
        for i in range(n):
            for ty in range(ty0[i], ty1[i] + 1):
                for tx in range(tx0[i], tx1[i] + 1):
                    t = ty * n_tx + tx
                    tile_splats[cursor[t]] = i
                    cursor[t] += 1
        return tile_splats, starts

    @njit(cache=True, parallel=True, nogil=True)
    def render_tiles_color_numba(mean2d, conic, m_max, r_bin, opac, color, depth,
                                 tile_splats, tile_starts, height, width,
                                 background):
        # color-only variant of render_tiles_numba: skips the depth/alpha
        # accumulators the render service never sends; the color chain runs
        # the same op sequence, so pixels are bit-identical to the full kernel
        out_c = np.empty((height, width, 3))
        n_ty = (height + TILE - 1) // TILE
        n_tx = (width + TILE - 1) // TILE
        for tid in prange(n_ty * n_tx):
            ty = tid // n_tx
            tx = tid % n_tx
            y0 = ty * TILE
            y1 = min(y0 + TILE, height)
            x0 = tx * TILE
            x1 = min(x0 + TILE, width)
            tw = x1 - x0
            npix = tw * (y1 - y0)
            s0 = tile_starts[tid]
            s1 = tile_starts[tid + 1]
            acc = np.zeros((npix, 4))      # c0 c1 c2 transmittance
            acc[:, 3] = 1.0
            alive = npix
            for k in range(s0, s1):
                if alive == 0:
                    break
                si = tile_splats[k]
                mx = mean2d[si, 0]
                my = mean2d[si, 1]
                qa = conic[si, 0]
                qb = conic[si, 1]
                qc = conic[si, 2]
                mm = m_max[si]
                r = r_bin[si]
                use_ellipse = r > 8.0
                if use_ellipse:
                    det_q = qa * qc - qb * qb
                    dy_lim = math.sqrt(max(qa * mm / det_q, 0.0))
                else:
                    det_q = 0.0
                    dy_lim = r
                by0 = max(y0, int(math.ceil(my - dy_lim)))
                by1 = min(y1 - 1, int(math.floor(my + dy_lim)))
                if by1 < by0:
                    continue
                op = opac[si]
                col0 = color[si, 0]
                col1 = color[si, 1]
                col2 = color[si, 2]
                ddm = 2.0 * qa
                for y in range(by0, by1 + 1):
                    dy = float(y) - my
                    if use_ellipse:
                        disc = qa * mm - det_q * dy * dy
                        if disc < 0.0:
                            continue
                        sq = math.sqrt(disc)
                        lo = mx + (-qb * dy - sq) / qa
                        hi = mx + (-qb * dy + sq) / qa
                    else:
                        lo = mx - r
                        hi = mx + r
                    bx0 = max(x0, int(math.ceil(lo)))
                    bx1 = min(x1 - 1, int(math.floor(hi)))
                    if bx1 < bx0:
                        continue
                    dx = float(bx0) - mx
                    m = qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy
                    dm = qa * (2.0 * dx + 1.0) + 2.0 * qb * dy
                    base = (y - y0) * tw - x0
                    for x in range(bx0, bx1 + 1):
                        i = base + x
                        t = acc[i, 3]
                        if t >= T_MIN and m <= mm and m >= 0.0:
                            alpha = op * _exp_neg_half(m)
                            if alpha > ALPHA_MAX:
                                alpha = ALPHA_MAX
                            w = alpha * t
                            acc[i, 0] += w * col0
                            acc[i, 1] += w * col1
                            acc[i, 2] += w * col2
                            t = t * (1.0 - alpha)
                            acc[i, 3] = t
                            if t < T_MIN:
                                alive -= 1
                        m += dm
                        dm += ddm
            for y in range(y0, y1):
                base = (y - y0) * tw - x0
                for x in range(x0, x1):
                    i = base + x
                    trans = acc[i, 3]
                    out_c[y, x, 0] = acc[i, 0] + trans * background[0]
                    out_c[y, x, 1] = acc[i, 1] + trans * background[1]
                    out_c[y, x, 2] = acc[i, 2] + trans * background[2]
        return out_c

    @njit(cache=True, parallel=True, nogil=True)
    def pack_rgb8_numba(img, out):
        """clip(img,0,1)*255 + 0.5, truncated to uint8 (same math as
        imageio.to_uint8), written into a preallocated byte buffer."""
        flat = img.reshape(-1)
        n = flat.shape[0]
        for i in prange(n):
            v = flat[i]
            if v < 0.0:
                v = 0.0
            elif v > 1.0:
                v = 1.0
            out[i] = np.uint8(v * 255.0 + 0.5)

    @njit(cache=True, parallel=True, nogil=True)
    def adam_update_numba(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
        n = p.shape[0]
        for i in prange(n):
            mi = beta1 * m[i] + (1.0 - beta1) * g[i]
            vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            m[i] = mi
            v[i] = vi
            p[i] -= lr * (mi / bc1) / (math.sqrt(vi / bc2) + eps)

    @njit(cache=True, parallel=True, nogil=True)
    def encode_numba(points01, tables, resolutions):
        n_levels, table_size, n_feat = tables.shape
        n = points01.shape[0]
        out = np.empty((n, n_levels * n_feat))
        mask = np.uint32(table_size - 1)
        for i in prange(n):
            for lvl in range(n_levels):
                res = resolutions[lvl]
                dense = (res + 1) ** 3 <= table_size
                base = lvl * n_feat
                for f in range(n_feat):
                    out[i, base + f] = 0.0
                cx = 0
                cy = 0
                cz = 0
                fx = 0.0
                fy = 0.0
                fz = 0.0
                xs = points01[i, 0] * res
                ys = points01[i, 1] * res
                zs = points01[i, 2] * res
                cx = min(max(int(math.floor(xs)), 0), res - 1)
                cy = min(max(int(math.floor(ys)), 0), res - 1)
                cz = min(max(int(math.floor(zs)), 0), res - 1)
                fx = xs - cx
                fy = ys - cy
                fz = zs - cz
                for corner in range(8):
                    ox = corner & 1
                    oy = (corner >> 1) & 1
                    oz = (corner >> 2) & 1
                    wx = fx if ox else 1.0 - fx
                    wy = fy if oy else 1.0 - fy
                    wz = fz if oz else 1.0 - fz
                    w = wx * wy * wz
                    if dense:
                        idx = (cx + ox) + (cy + oy) * (res + 1) + (cz + oz) * (res + 1) ** 2
                    else:
                        h = (np.uint32(cx + ox)
                             ^ (np.uint32(cy + oy) * np.uint32(HASH_PRIME_Y))
                             ^ (np.uint32(cz + oz) * np.uint32(HASH_PRIME_Z)))
                        idx = np.int64(h & mask)
                    for f in range(n_feat):
                        out[i, base + f] += w * tables[lvl, idx, f]
        return out

    @njit(cache=True, parallel=True, nogil=True)
    def encode_backward_numba(points01, grad_features, resolutions, grad_tables):
        n_levels, table_size, n_feat = grad_tables.shape
        n = points01.shape[0]
        mask = np.uint32(table_size - 1)
        # parallel over levels: each level owns its gradient rows, points stay
        # serial within a level so accumulation order is fixed
        for lvl in prange(n_levels):
            res = resolutions[lvl]
            dense = (res + 1) ** 3 <= table_size
            base = lvl * n_feat
            for i in range(n):
                xs = points01[i, 0] * res
                ys = points01[i, 1] * res
                zs = points01[i, 2] * res
                cx = min(max(int(math.floor(xs)), 0), res - 1)
                cy = min(max(int(math.floor(ys)), 0), res - 1)
                cz = min(max(int(math.floor(zs)), 0), res - 1)
                fx = xs - cx
                fy = ys - cy
                fz = zs - cz
                for corner in range(8):
                    ox = corner & 1
                    oy = (corner >> 1) & 1
                    oz = (corner >> 2) & 1
                    wx = fx if ox else 1.0 - fx
                    wy = fy if oy else 1.0 - fy
                    wz = fz if oz else 1.0 - fz
                    w = wx * wy * wz
                    if dense:
                        idx = (cx + ox) + (cy + oy) * (res + 1) + (cz + oz) * (res + 1) ** 2
                    else:
                        h = (np.uint32(cx + ox)
                             ^ (np.uint32(cy + oy) * np.uint32(HASH_PRIME_Y))
                             ^ (np.uint32(cz + oz) * np.uint32(HASH_PRIME_Z)))
                        idx = np.int64(h & mask)
                    for f in range(n_feat):
                        grad_tables[lvl, idx, f] += w * grad_features[i, base + f]


# ---------------------------------------------------------------------------
# backend dispatch
# ---------------------------------------------------------------------------

def render_tiles_color_numpy(mean2d, conic, m_max, r_bin, opac, color, depth,
                             tile_splats, tile_starts, height, width, background):
    color_img, _, _ = render_tiles_numpy(mean2d, conic, m_max, r_bin, opac, color,
                                         depth, tile_splats, tile_starts,
                                         height, width, background)
    return color_img


if NUMBA_ENABLED:
    BACKEND = "numba"
    render_tiles = render_tiles_numba
    render_tiles_color = render_tiles_color_numba
    count_records = count_records_numba
    render_tiles_records = render_tiles_records_numba
    splat_color_grads = splat_color_grads_numba
    encode = encode_numba

    def encode_backward(points01, grad_features, tables_shape, resolutions, grad_tables):
        encode_backward_numba(points01, grad_features, resolutions, grad_tables)

    def adam_update(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
        if not (p.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous):
            adam_update_numpy(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2)
            return
        adam_update_numba(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                          m.reshape(-1), v.reshape(-1),
                          lr, beta1, beta2, eps, bc1, bc2)

else:
    BACKEND = "numpy"
    render_tiles = render_tiles_numpy
    render_tiles_color = render_tiles_color_numpy
    count_records = count_records_numpy
    render_tiles_records = render_tiles_records_numpy
    splat_color_grads = splat_color_grads_numpy
    encode = encode_numpy
    encode_backward = encode_backward_numpy
    adam_update = adam_update_numpy


def set_threads(n: int) -> None:
    """Cap worker threads for the numba kernels (no-op on the numpy path)."""
    if NUMBA_ENABLED:
        import numba

        n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
        numba.set_num_threads(n)
