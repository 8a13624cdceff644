"""Parity between the numba kernels and the pure-numpy fallback."""

import os
import subprocess
import sys

import numpy as np
import pytest

from splatstyle import kernels, rasterizer
from splatstyle.encoding import HashGrid
from splatstyle.scene import make_synthetic_scene


@pytest.fixture(scope="module")
def splat_inputs():
    bundle = make_synthetic_scene("spheres", 400, 1, seed=8, width=64, height=48)
    cloud, cam = bundle.cloud, bundle.cameras[0]
    proj = rasterizer._project_arrays(cloud, cam, cloud.opacities)
    rasterizer._sort_by_depth(proj)
    rasterizer._bin_tiles(proj, cam.height, cam.width)
    return {
        "mean2d": np.ascontiguousarray(proj.mean2d),
        "conic": np.ascontiguousarray(proj.conic),
        "m_max": np.ascontiguousarray(proj.m_max),
        "r_bin": np.ascontiguousarray(proj.r_bin),
        "opac": np.ascontiguousarray(cloud.opacities[proj.index]),
        "color": np.ascontiguousarray(cloud.base_colors[proj.index]),
        "depth": np.ascontiguousarray(proj.depth),
        "tile_splats": proj.tile_splats,
        "tile_starts": proj.tile_starts,
        "h": cam.height, "w": cam.width,
        "bg": np.array([0.2, 0.1, 0.4]),
    }


needs_numba = pytest.mark.skipif(not kernels.NUMBA_ENABLED,
                                 reason="numba backend not active")


@needs_numba
def test_render_tiles_parity(splat_inputs):
    s = splat_inputs
    args = (s["mean2d"], s["conic"], s["m_max"], s["r_bin"], s["opac"], s["color"],
            s["depth"], s["tile_splats"], s["tile_starts"], s["h"], s["w"], s["bg"])
    c_nb, a_nb, d_nb = kernels.render_tiles_numba(*args)
    c_np, a_np, d_np = kernels.render_tiles_numpy(*args)
    np.testing.assert_allclose(c_nb, c_np, atol=1e-12)
    np.testing.assert_allclose(a_nb, a_np, atol=1e-12)
    np.testing.assert_allclose(d_nb, d_np, atol=1e-10)


@needs_numba
def test_record_stream_parity(splat_inputs):
    s = splat_inputs
    count_args = (s["mean2d"], s["conic"], s["m_max"], s["r_bin"], s["opac"],
                  s["tile_splats"], s["tile_starts"], s["h"], s["w"])
    counts_nb = kernels.count_records_numba(*count_args)
    counts_np = kernels.count_records_numpy(*count_args)
    np.testing.assert_array_equal(counts_nb, counts_np)

    offsets = np.zeros(s["h"] * s["w"] + 1, dtype=np.int64)
    np.cumsum(counts_nb.ravel(), out=offsets[1:])
    total = int(offsets[-1])
    full_args = (s["mean2d"], s["conic"], s["m_max"], s["r_bin"], s["opac"],
                 s["color"], s["depth"], s["tile_splats"], s["tile_starts"],
                 s["h"], s["w"], s["bg"])
    idx_nb = np.empty(total, dtype=np.int64)
    w_nb = np.empty(total)
    kernels.render_tiles_records_numba(*full_args, offsets, idx_nb, w_nb)
    idx_np = np.empty(total, dtype=np.int64)
    w_np = np.empty(total)
    kernels.render_tiles_records_numpy(*full_args, offsets, idx_np, w_np)
    np.testing.assert_array_equal(idx_nb, idx_np)
    np.testing.assert_allclose(w_nb, w_np, atol=1e-12)

    grad = np.random.default_rng(0).normal(size=(s["h"] * s["w"], 3))
    g_nb = kernels.splat_color_grads_numba(offsets, idx_nb, w_nb, grad, 400)
    g_np = kernels.splat_color_grads_numpy(offsets, idx_np, w_np, grad, 400)
    np.testing.assert_allclose(g_nb, g_np, atol=1e-10)


@needs_numba
def test_encode_parity(rng):
    grid = HashGrid.create(seed=3)
    grid.tables = rng.normal(size=grid.tables.shape)
    pts = np.ascontiguousarray(rng.uniform(0, 1, (300, 3)))
    res = np.ascontiguousarray(grid.resolutions)
    out_nb = kernels.encode_numba(pts, grid.tables, res)
    out_np = kernels.encode_numpy(pts, grid.tables, res)
    np.testing.assert_allclose(out_nb, out_np, atol=1e-12)

    grad = np.ascontiguousarray(rng.normal(size=out_nb.shape))
    acc_nb = np.zeros_like(grid.tables)
    kernels.encode_backward_numba(pts, grad, res, acc_nb)
    acc_np = np.zeros_like(grid.tables)
    kernels.encode_backward_numpy(pts, grad, grid.tables.shape, res, acc_np)
    np.testing.assert_allclose(acc_nb, acc_np, atol=1e-10)


@needs_numba
def test_adam_parity(rng):
    p1 = rng.normal(size=1000)
    p2 = p1.copy()
    g = rng.normal(size=1000)
    m1, v1 = np.zeros(1000), np.zeros(1000)
    m2, v2 = np.zeros(1000), np.zeros(1000)
    for t in range(1, 4):
        bc1 = 1 - 0.9 ** t
        bc2 = 1 - 0.999 ** t
        kernels.adam_update(p1, g, m1, v1, 1e-3, 0.9, 0.999, 1e-8, bc1, bc2)
        kernels.adam_update_numpy(p2, g, m2, v2, 1e-3, 0.9, 0.999, 1e-8, bc1, bc2)
    np.testing.assert_allclose(p1, p2, atol=1e-14)


def test_numpy_backend_renders_same_scene(tmp_path):
    """Full-pipeline smoke on the fallback path in a subprocess."""
    script = (
        "import numpy as np\n"
        "from splatstyle import kernels, rasterizer, scene\n"
        "from splatstyle.imageio import save_raw\n"
        "assert kernels.BACKEND == 'numpy', kernels.BACKEND\n"
        "b = scene.make_synthetic_scene('spheres', 300, 1, seed=8, width=48, height=32)\n"
        f"out = rasterizer.render(b.cloud, b.cameras[0], background=b.background)\n"
        f"save_raw(out.color, r'{tmp_path}/np_render.raw')\n"
    )
    env = dict(os.environ, SPLATSTYLE_NO_NUMBA="1")
    subprocess.run([sys.executable, "-c", script], check=True, env=env,
                   timeout=600)
    from splatstyle.imageio import load_raw
    from splatstyle.scene import make_synthetic_scene as mss

    b = mss("spheres", 300, 1, seed=8, width=48, height=32)
    here = rasterizer.render(b.cloud, b.cameras[0], background=b.background)
    other = load_raw(tmp_path / "np_render.raw")
    np.testing.assert_allclose(here.color, other, atol=1e-6)
