"""AdaIN statistics transfer, the 2D stylization guide, and style latents.

Feature maps are plain (C, H, W) float arrays. The default "stat" extractor is
a fixed 3-scale pyramid: per scale, the three band-pass color planes plus five
3x3 gradient responses of the luminance, 8 channels per scale, C = 24. The
band planes sum back to the input image, so inversion is a pyramid collapse.
A style latent is the 48-vector of per-channel feature means and stds.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError

ADAIN_EPS = 1e-5
N_SCALES = 3
CHANNELS_PER_SCALE = 8
C_FEAT = N_SCALES * CHANNELS_PER_SCALE
LATENT_DIM = 2 * C_FEAT

_BINOMIAL = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0
_LUMA = np.array([0.299, 0.587, 0.114])

_GRAD_FILTERS = [
    np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float) / 8.0,   # d/dx
    np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=float) / 8.0,   # d/dy
    np.array([[0, 1, 2], [-1, 0, 1], [-2, -1, 0]], dtype=float) / 8.0,   # diag
    np.array([[2, 1, 0], [1, 0, -1], [0, -1, -2]], dtype=float) / 8.0,   # anti-diag
    np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=float) / 4.0,     # laplacian
]


def _blur(img: np.ndarray) -> np.ndarray:
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.convolve(img[:, :, c], _BINOMIAL, mode="nearest")
    return out


def extract_features(image: np.ndarray) -> np.ndarray:
    """RGB (H,W,3) in [0,1] -> FeatureMap (24,H,W)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H,W,3) image, got {image.shape}")
    a0 = image
    a1 = _blur(a0)
    a2 = _blur(_blur(a1))
    lowpass = [a0, a1, a2]
    bands = [a0 - a1, a1 - a2, a2]

    feats = np.empty((C_FEAT, image.shape[0], image.shape[1]))
    for lvl in range(N_SCALES):
        base = lvl * CHANNELS_PER_SCALE
        feats[base:base + 3] = np.moveaxis(bands[lvl], 2, 0)
        luma = lowpass[lvl] @ _LUMA
        for k, filt in enumerate(_GRAD_FILTERS):
            feats[base + 3 + k] = ndimage.convolve(luma, filt, mode="nearest")
    return feats


def invert_features(features: np.ndarray) -> np.ndarray:
    """Pyramid collapse: sum of the band-pass color planes, clamped to [0,1]."""
    planes = sum(np.moveaxis(features[lvl * CHANNELS_PER_SCALE:
                                      lvl * CHANNELS_PER_SCALE + 3], 0, 2)
                 for lvl in range(N_SCALES))
    return np.clip(planes, 0.0, 1.0)


def _channel_stats(fm: np.ndarray):
    flat = fm.reshape(fm.shape[0], -1)
    return flat.mean(axis=1), flat.std(axis=1)


def adain_transfer(content: np.ndarray, style: np.ndarray) -> np.ndarray:
    """Per channel: sigma_s * (x - mu_c) / (sigma_c + eps) + mu_s."""
    content = np.asarray(content, dtype=np.float64)
    style = np.asarray(style, dtype=np.float64)
    if content.ndim != 3 or style.ndim != 3:
        raise ValueError("feature maps must be (C,H,W)")
    if content.shape[0] != style.shape[0]:
        raise ValueError(
            f"channel mismatch: content has {content.shape[0]}, style {style.shape[0]}")
    mu_c, sd_c = _channel_stats(content)
    mu_s, sd_s = _channel_stats(style)
    scale = sd_s / (sd_c + ADAIN_EPS)
    return (content - mu_c[:, None, None]) * scale[:, None, None] + mu_s[:, None, None]


def style_latent(style_image: np.ndarray) -> np.ndarray:
    """48-vector: per-channel mean ++ per-channel std of the extractor features."""
    mu, sd = _channel_stats(extract_features(style_image))
    return np.concatenate([mu, sd])


_default_backend = ("stat", None)


def set_default_backend(backend: str, weights=None) -> None:
    """Pick the stylization backend used when callers do not pass one."""
    if backend not in ("stat", "neural"):
        raise ValueError(f"unknown stylization backend {backend!r}")
    if backend == "neural" and weights is not None:
        weights = (weights if isinstance(weights, NeuralBackend)
                   else load_neural_weights(weights))
    global _default_backend
    _default_backend = (backend, weights)


def stylize2d(content_image: np.ndarray, style_image: np.ndarray,
              backend: str = None, weights=None) -> np.ndarray:
    """2D stylization guide: extract -> adain -> invert, clamped to [0,1]."""
    if backend is None:
        backend, default_weights = _default_backend
        weights = weights if weights is not None else default_weights
    for name, img in (("content", content_image), ("style", style_image)):
        img = np.asarray(img)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"{name} image must be (H,W,3)")
    if backend == "stat":
        transferred = adain_transfer(extract_features(content_image),
                                     extract_features(style_image))
        return invert_features(transferred)
    if backend == "neural":
        if weights is None:
            raise ConfigurationError("neural backend requires loaded weights")
        net = weights if isinstance(weights, NeuralBackend) else load_neural_weights(weights)
        return net.stylize(content_image, style_image)
    raise ValueError(f"unknown stylization backend {backend!r}")


# ---------------------------------------------------------------------------
# loadable conv encoder/decoder ("neural" backend)
# ---------------------------------------------------------------------------

_NEURAL_MAGIC = b"SSNW"
_LAYER_CONV = 0
_LAYER_RELU = 1


class NeuralBackend:
    """Conv encoder -> AdaIN -> conv decoder with weights from a blob file."""

    def __init__(self, encoder, decoder):
        self.encoder = encoder
        self.decoder = decoder

    def _run(self, layers, fm):
        for kind, payload in layers:
            if kind == _LAYER_RELU:
                fm = np.maximum(fm, 0.0)
            else:
                w, b = payload
                fm = _conv3x3(fm, w, b)
        return fm

    def stylize(self, content_image, style_image):
        f_c = self._run(self.encoder, np.moveaxis(np.asarray(content_image, float), 2, 0))
        f_s = self._run(self.encoder, np.moveaxis(np.asarray(style_image, float), 2, 0))
        out = self._run(self.decoder, adain_transfer(f_c, f_s))
        if out.shape[0] != 3:
            raise ValueError("decoder must end with 3 channels")
        return np.clip(np.moveaxis(out, 0, 2), 0.0, 1.0)


def _conv3x3(fm: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    padded = np.pad(fm, ((0, 0), (1, 1), (1, 1)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    return np.einsum("chwkl,ockl->ohw", windows, w) + b[:, None, None]


def _write_layers(fh, layers):
    fh.write(struct.pack("<I", len(layers)))
    for kind, payload in layers:
        fh.write(struct.pack("<I", kind))
        if kind == _LAYER_CONV:
            w, b = payload
            fh.write(struct.pack("<II", w.shape[0], w.shape[1]))
            fh.write(w.astype("<f4").tobytes())
            fh.write(b.astype("<f4").tobytes())


def _read_layers(fh):
    (n,) = struct.unpack("<I", fh.read(4))
    layers = []
    for _ in range(n):
        (kind,) = struct.unpack("<I", fh.read(4))
        if kind == _LAYER_RELU:
            layers.append((kind, None))
        elif kind == _LAYER_CONV:
            out_c, in_c = struct.unpack("<II", fh.read(8))
            w = np.frombuffer(fh.read(out_c * in_c * 9 * 4), dtype="<f4")
            w = w.astype(np.float64).reshape(out_c, in_c, 3, 3)
            b = np.frombuffer(fh.read(out_c * 4), dtype="<f4").astype(np.float64)
            layers.append((kind, (w, b)))
        else:
            raise ValueError(f"unknown layer kind {kind}")
    return layers


def save_neural_weights(backend: NeuralBackend, path) -> None:
    with Path(path).open("wb") as fh:
        fh.write(_NEURAL_MAGIC)
        _write_layers(fh, backend.encoder)
        _write_layers(fh, backend.decoder)


def load_neural_weights(path) -> NeuralBackend:
    with Path(path).open("rb") as fh:
        if fh.read(4) != _NEURAL_MAGIC:
            raise ValueError("bad neural weight file magic")
        return NeuralBackend(_read_layers(fh), _read_layers(fh))
