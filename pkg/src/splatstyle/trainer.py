"""Stage-2 optimization of the style field, plus the photometric color fit."""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import nn, rasterizer, stylefield
from .errors import ConfigurationError, TrainingError
from .imageio import load_png
from .scene import SceneBundle, load_bundle
from .styletransfer2d import style_latent, stylize2d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class TrainConfig:
    lambda_g: float = 1.0
    lambda_c: float = 0.1
    lr: float = 1e-4
    iterations: int = 2000
    seed: int = 0
    style_dir: str = ""
    scene: str = ""
    checkpoint_every: int = 0
    checkpoint_dir: str = ""

    def __post_init__(self):
        if self.lambda_g < 0 or self.lambda_c < 0:
            raise ValueError("loss weights must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Flat key=value UTF-8 config."""
        kwargs = {}
        casts = {"lambda_g": float, "lambda_c": float, "lr": float,
                 "iterations": int, "seed": int, "checkpoint_every": int,
                 "style_dir": str, "scene": str, "checkpoint_dir": str}
        for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{ln}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in casts:
                raise ConfigurationError(f"{path}:{ln}: unknown key {key!r}")
            kwargs[key] = casts[key](value)
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def compute_losses(i_gen, i_style2d, i_unstyled, lambda_g: float = 1.0,
                   lambda_c: float = 0.1) -> dict:
    """Mean-L1 guide and content losses and their weighted total."""
    i_gen = np.asarray(i_gen, dtype=np.float64)
    for name, img in (("i_style2d", i_style2d), ("i_unstyled", i_unstyled)):
        if np.shape(img) != i_gen.shape:
            raise ValueError(f"{name} shape {np.shape(img)} != {i_gen.shape}")
    guide = float(np.mean(np.abs(i_style2d - i_gen)))
    content = float(np.mean(np.abs(i_gen - i_unstyled)))
    return {"guide": guide, "content": content,
            "total": lambda_g * guide + lambda_c * content}


def _loss_grad_wrt_gen(i_gen, i_style2d, i_unstyled, lambda_g, lambda_c):
    n = i_gen.size
    return (lambda_g * np.sign(i_gen - i_style2d)
            + lambda_c * np.sign(i_gen - i_unstyled)) / n


def _ssim_kernel():
    half = SSIM_WINDOW // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(ax ** 2) / (2.0 * SSIM_SIGMA ** 2))
    k = np.outer(g, g)
    return k / k.sum()


_SSIM_K = _ssim_kernel()


def _filt(x):
    # zero padding keeps the convolution self-adjoint; the border is cropped
    # out of the SSIM mean instead
    return ndimage.convolve(x, _SSIM_K, mode="constant", cval=0.0)


def _ssim_channel(x, y):
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_x, mu_y = _filt(x), _filt(y)
    sxx, syy, sxy = _filt(x * x), _filt(y * y), _filt(x * y)
    var_x = sxx - mu_x ** 2
    var_y = syy - mu_y ** 2
    cov = sxy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + c1
    a2 = 2.0 * cov + c2
    b1 = mu_x ** 2 + mu_y ** 2 + c1
    b2 = var_x + var_y + c2
    return {"mu_x": mu_x, "mu_y": mu_y, "a1": a1, "a2": a2, "b1": b1, "b2": b2,
            "smap": (a1 * a2) / (b1 * b2)}


def dssim_l1_loss(rendered, target, lam: float = 0.2) -> float:
    """(1-lam)*L1 + lam*(1-SSIM)/2 with an 11x11 Gaussian SSIM window."""
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x = x[:, :, None]
        y = y[:, :, None]
    h, w = x.shape[:2]
    half = SSIM_WINDOW // 2
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}px per side")
    interior = (slice(half, h - half), slice(half, w - half))
    ssim_vals = [
        _ssim_channel(x[:, :, c], y[:, :, c])["smap"][interior].mean()
        for c in range(x.shape[2])
    ]
    mssim = float(np.mean(ssim_vals))
    l1 = float(np.mean(np.abs(x - y)))
    return (1.0 - lam) * l1 + lam * (1.0 - mssim) / 2.0


def dssim_l1_grad(rendered, target, lam: float = 0.2) -> np.ndarray:
    """Analytic gradient of dssim_l1_loss w.r.t. the rendered image."""
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
        y = y[:, :, None]
    h, w, n_ch = x.shape
    half = SSIM_WINDOW // 2
    interior = np.zeros((h, w))
    interior[half:h - half, half:w - half] = 1.0
    n_interior = interior.sum() * n_ch

    grad = (1.0 - lam) * np.sign(x - y) / x.size
    for c in range(n_ch):
        xc, yc = x[:, :, c], y[:, :, c]
        t = _ssim_channel(xc, yc)
        # d loss / d smap, averaged over interior pixels and channels
        g = (-lam / 2.0) * interior / n_interior
        inv_b = 1.0 / (t["b1"] * t["b2"])
        g_a1 = g * t["a2"] * inv_b
        g_a2 = g * t["a1"] * inv_b
        g_b1 = -g * t["smap"] / t["b1"]
        g_b2 = -g * t["smap"] / t["b2"]
        g_mu_x = (2.0 * t["mu_y"] * g_a1 + 2.0 * t["mu_x"] * g_b1
                  - 2.0 * t["mu_y"] * g_a2 - 2.0 * t["mu_x"] * g_b2)
        g_sxx = g_b2
        g_sxy = 2.0 * g_a2
        grad[:, :, c] += (_filt(g_mu_x) + 2.0 * xc * _filt(g_sxx) + yc * _filt(g_sxy))
    return grad[:, :, 0] if squeeze else grad


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class _Caches:
    """Frozen-base-color renders and 2D guides, keyed by camera/style index."""

    unstyled: dict = dc_field(default_factory=dict)
    guides: dict = dc_field(default_factory=dict)

    def unstyled_render(self, cloud, camera, cam_idx, background):
        if cam_idx not in self.unstyled:
            self.unstyled[cam_idx] = rasterizer.render(cloud, camera,
                                                       background=background)
        return self.unstyled[cam_idx]

    def guide(self, unstyled_color, style_image, cam_idx, style_idx):
        key = (cam_idx, style_idx)
        if key not in self.guides:
            self.guides[key] = stylize2d(unstyled_color, style_image)
        return self.guides[key]


def train_step(field, scene: SceneBundle, camera, style_image, adam, config,
               *, caches=None, cam_idx=0, style_idx=0, latent=None,
               iteration=0) -> dict:
    """One (camera, style) update of the field; geometry is never touched."""
    cloud = scene.cloud
    assert not cloud.means.flags.writeable  # frozen geometry by construction
    caches = caches if caches is not None else _Caches()
    if latent is None:
        latent = style_latent(style_image)

    unstyled = caches.unstyled_render(cloud, camera, cam_idx, scene.background)
    i_unstyled = unstyled.color
    i_guide = caches.guide(i_unstyled, style_image, cam_idx, style_idx)

    colors, cache = stylefield.predict_colors(field, cloud.means, latent,
                                              return_cache=True)
    if not np.all(np.isfinite(colors)):
        raise TrainingError(
            f"non-finite predicted colors at iteration {iteration} "
            f"(camera {cam_idx}, style {style_idx})")
    gen = rasterizer.render(cloud, camera, color_override=colors,
                            background=scene.background, with_contrib=True)
    record = compute_losses(gen.color, i_guide, i_unstyled,
                            config.lambda_g, config.lambda_c)
    if not np.isfinite(record["total"]):
        raise TrainingError(
            f"non-finite loss at iteration {iteration} "
            f"(camera {cam_idx}, style {style_idx}): {record}")

    grad_img = _loss_grad_wrt_gen(gen.color, i_guide, i_unstyled,
                                  config.lambda_g, config.lambda_c)
    grad_colors = rasterizer.render_backward_colors(gen, grad_img)
    grads = stylefield.predict_colors_backward(field, cache, grad_colors)
    try:
        nn.adam_step(adam, field.parameters(), stylefield.grads_as_list(grads))
    except FloatingPointError as exc:
        raise TrainingError(
            f"non-finite gradient at iteration {iteration} "
            f"(camera {cam_idx}, style {style_idx})") from exc
    return record


def _load_styles(style_dir) -> list:
    style_dir = Path(style_dir)
    paths = sorted(p for p in style_dir.glob("*")
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not paths:
        raise ConfigurationError(f"no style images found in {style_dir}")
    return [(p.name, load_png(p)) for p in paths]


@dataclass
class TrainResult:
    field: object
    history: list
    adam: nn.AdamState


def save_training_checkpoint(path, field, adam, rng, iteration: int) -> None:
    """Full-precision resume state (the portable field checkpoint stores
    float32, which would break bit-exact loss-trace continuation)."""
    grid = field.grid
    arrays = {
        "t": np.int64(adam.t), "iteration": np.int64(iteration),
        "grid_meta": np.array([grid.levels, grid.table_size, grid.features,
                               grid.base_resolution], dtype=np.int64),
        "grid_growth": np.float64(grid.growth),
        "grid_bounds": np.concatenate([grid.bounds_min, grid.bounds_max]),
        "tables": grid.tables, "fc_weight": field.fc_weight,
        "fc_bias": field.fc_bias,
        "mlp_dims": np.asarray(field.mlp.dims(), dtype=np.int64),
        "rng_state": np.frombuffer(
            json.dumps(rng.bit_generator.state).encode(), dtype=np.uint8),
    }
    for i, (w, b) in enumerate(zip(field.mlp.weights, field.mlp.biases)):
        arrays[f"mlp_w{i}"] = w
        arrays[f"mlp_b{i}"] = b
    for i, (m, v) in enumerate(zip(adam.m, adam.v)):
        arrays[f"adam_m{i}"] = m
        arrays[f"adam_v{i}"] = v
    np.savez(path, **arrays)


def load_training_checkpoint(path, lr: float):
    from .encoding import HashGrid

    data = np.load(path)
    levels, table_size, features, base = (int(v) for v in data["grid_meta"])
    bounds = data["grid_bounds"]
    grid = HashGrid(levels=levels, table_size=table_size, features=features,
                    base_resolution=base, growth=float(data["grid_growth"]),
                    bounds_min=bounds[:3], bounds_max=bounds[3:],
                    tables=data["tables"].copy())
    n_layers = len(data["mlp_dims"]) - 1
    mlp = nn.MlpParams(weights=[data[f"mlp_w{i}"].copy() for i in range(n_layers)],
                       biases=[data[f"mlp_b{i}"].copy() for i in range(n_layers)])
    field = stylefield.StyleField(grid=grid, fc_weight=data["fc_weight"].copy(),
                                  fc_bias=data["fc_bias"].copy(), mlp=mlp)
    n = sum(1 for k in data.files if k.startswith("adam_m"))
    adam = nn.AdamState(lr=lr, t=int(data["t"]),
                        m=[data[f"adam_m{i}"].copy() for i in range(n)],
                        v=[data[f"adam_v{i}"].copy() for i in range(n)])
    rng = np.random.default_rng(0)
    rng.bit_generator.state = json.loads(data["rng_state"].tobytes().decode())
    return field, adam, rng, int(data["iteration"])


def train(config: TrainConfig, scene: SceneBundle = None, styles=None,
          resume=None, field=None) -> TrainResult:
    """Optimize a style field over uniformly sampled (camera, style) pairs."""
    if scene is None:
        if not config.scene:
            raise ConfigurationError("no scene source configured")
        scene = load_bundle(config.scene)
    if styles is None:
        styles = _load_styles(config.style_dir)
    if not scene.cameras:
        raise ConfigurationError("scene has no cameras")

    start_iter = 0
    if resume is not None:
        field, adam, rng, start_iter = load_training_checkpoint(resume, config.lr)
    else:
        if field is None:
            field = stylefield.StyleField.for_cloud(scene.cloud, seed=config.seed)
        adam = nn.AdamState.for_params(field.parameters(), lr=config.lr)
        rng = np.random.default_rng(config.seed)

    latents = [style_latent(img) for _, img in styles]
    caches = _Caches()
    digest_before = scene.cloud.geometry_digest()
    history = []
    for it in range(start_iter, config.iterations):
        cam_idx = int(rng.integers(len(scene.cameras)))
        style_idx = int(rng.integers(len(styles)))
        record = train_step(field, scene, scene.cameras[cam_idx],
                            styles[style_idx][1], adam, config,
                            caches=caches, cam_idx=cam_idx, style_idx=style_idx,
                            latent=latents[style_idx], iteration=it)
        record["iteration"] = it
        history.append(record)
        if (config.checkpoint_every and config.checkpoint_dir
                and (it + 1) % config.checkpoint_every == 0):
            ckpt = Path(config.checkpoint_dir) / f"ckpt_{it + 1:06d}.npz"
            ckpt.parent.mkdir(parents=True, exist_ok=True)
            save_training_checkpoint(ckpt, field, adam, rng, it + 1)
    assert scene.cloud.geometry_digest() == digest_before
    return TrainResult(field=field, history=history, adam=adam)


def write_loss_csv(history, path) -> None:
    lines = ["iteration,guide,content,total"]
    lines += [f"{r['iteration']},{r['guide']:.8f},{r['content']:.8f},{r['total']:.8f}"
              for r in history]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# photometric color fit (stage-1 stand-in for synthetic clouds)
# ---------------------------------------------------------------------------


def fit_colors(cloud, cameras, targets, iterations: int = 200, lr: float = 0.05,
               background=None, lam: float = 0.2):
    """Optimize per-Gaussian base colors against target views with the
    L1 + D-SSIM photometric loss. Returns (colors, history)."""
    if len(cameras) != len(targets):
        raise ValueError("need one target image per camera")
    colors = np.full((len(cloud), 3), 0.5)
    adam = nn.AdamState.for_params([colors], lr=lr)
    history = []
    for it in range(iterations):
        cam_idx = it % len(cameras)
        out = rasterizer.render(cloud, cameras[cam_idx], color_override=colors,
                                background=background, with_contrib=True)
        loss = dssim_l1_loss(out.color, targets[cam_idx], lam)
        grad_img = dssim_l1_grad(out.color, targets[cam_idx], lam)
        grad_colors = rasterizer.render_backward_colors(out, grad_img)
        nn.adam_step(adam, [colors], [grad_colors])
        history.append({"iteration": it, "camera": cam_idx, "loss": loss})
    return np.clip(colors, 0.0, 1.0), history
