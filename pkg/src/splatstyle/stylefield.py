"""3D color module: (Gaussian position, style latent) -> per-Gaussian RGB."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encoding, nn
from .encoding import HashGrid
from .styletransfer2d import LATENT_DIM

FC_DIM = 32
HIDDEN_DIM = 64

_FIELD_MAGIC = b"SSFD"
_FIELD_VERSION = 1


@dataclass
class StyleField:
    grid: HashGrid
    fc_weight: np.ndarray    # (32, 48)
    fc_bias: np.ndarray      # (32,)
    mlp: nn.MlpParams        # 56 -> 64 -> 64 -> 3

    def __post_init__(self):
        expected_in = self.grid.output_dim + self.fc_weight.shape[0]
        if self.mlp.input_dim != expected_in:
            raise ValueError(
                f"mlp input {self.mlp.input_dim} != grid {self.grid.output_dim} "
                f"+ fc {self.fc_weight.shape[0]}")
        if self.mlp.output_dim != 3:
            raise ValueError("mlp must output 3 color channels")

    @classmethod
    def create(cls, bounds_min, bounds_max, seed: int = 0) -> "StyleField":
        """Fresh field; the zero-init output layer makes the initial color 0.5 gray."""
        grid = HashGrid.create(seed=seed, bounds_min=bounds_min, bounds_max=bounds_max)
        rng = np.random.default_rng(seed + 1)
        limit = np.sqrt(6.0 / LATENT_DIM)
        fc_w = rng.uniform(-limit, limit, size=(FC_DIM, LATENT_DIM))
        fc_b = np.zeros(FC_DIM)
        mlp = nn.he_uniform_mlp([grid.output_dim + FC_DIM, HIDDEN_DIM, HIDDEN_DIM, 3],
                                seed=seed + 2, zero_last=True)
        return cls(grid=grid, fc_weight=fc_w, fc_bias=fc_b, mlp=mlp)

    @classmethod
    def for_cloud(cls, cloud, seed: int = 0, dilation: float = 0.05) -> "StyleField":
        """Grid bounds = bounding box of the cloud means, dilated 5%."""
        lo = cloud.means.min(axis=0)
        hi = cloud.means.max(axis=0)
        extent = np.maximum(hi - lo, 1e-3)
        return cls.create(lo - dilation * extent, hi + dilation * extent, seed=seed)

    def parameters(self) -> list:
        return ([self.grid.tables, self.fc_weight, self.fc_bias]
                + self.mlp.weights + self.mlp.biases)


def _check_latent(field: StyleField, latent: np.ndarray) -> np.ndarray:
    latent = np.asarray(latent, dtype=np.float64).reshape(-1)
    if latent.shape[0] != field.fc_weight.shape[1]:
        raise ValueError(
            f"latent dimension {latent.shape[0]} != {field.fc_weight.shape[1]}")
    return latent


def predict_colors(field: StyleField, positions: np.ndarray, latent: np.ndarray,
                   return_cache: bool = False):
    """Per-position RGB in (0,1); view independent and deterministic."""
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    if not np.all(np.isfinite(positions)):
        raise ValueError("positions must be finite")
    latent = _check_latent(field, latent)

    gamma = encoding.encode(field.grid, positions)
    fc_pre = field.fc_weight @ latent + field.fc_bias
    fc_out = np.maximum(fc_pre, 0.0)
    x = np.concatenate([gamma, np.broadcast_to(fc_out, (gamma.shape[0], FC_DIM))], axis=1)
    colors, mlp_cache = nn.mlp_forward(field.mlp, x)
    if not return_cache:
        return colors
    cache = {"field": field, "positions": positions, "latent": latent,
             "fc_pre": fc_pre, "mlp_cache": mlp_cache}
    return colors, cache


def zero_grads(field: StyleField) -> dict:
    return {
        "tables": np.zeros_like(field.grid.tables),
        "fc_weight": np.zeros_like(field.fc_weight),
        "fc_bias": np.zeros_like(field.fc_bias),
        "mlp_weights": [np.zeros_like(w) for w in field.mlp.weights],
        "mlp_biases": [np.zeros_like(b) for b in field.mlp.biases],
    }


def predict_colors_backward(field: StyleField, cache: dict,
                            grad_colors: np.ndarray) -> dict:
    """Chain rule into grid tables, FC layer, and MLP. Latent stays frozen."""
    if cache.get("field") is not field:
        raise RuntimeError("cache does not belong to this field")
    grad_colors = np.asarray(grad_colors, dtype=np.float64)
    mlp_grads, grad_x = nn.mlp_backward(field.mlp, cache["mlp_cache"], grad_colors)

    grids = zero_grads(field)
    grids["mlp_weights"] = mlp_grads["weights"]
    grids["mlp_biases"] = mlp_grads["biases"]

    gamma_dim = field.grid.output_dim
    encoding.encode_backward(field.grid, cache["positions"],
                             grad_x[:, :gamma_dim], grids["tables"])

    grad_fc_out = grad_x[:, gamma_dim:].sum(axis=0)      # fc output broadcast over rows
    grad_fc_pre = grad_fc_out * (cache["fc_pre"] > 0.0)
    grids["fc_weight"] = np.outer(grad_fc_pre, cache["latent"])
    grids["fc_bias"] = grad_fc_pre
    return grids


def grads_as_list(grads: dict) -> list:
    """Same ordering as StyleField.parameters(), for the optimizer."""
    return ([grads["tables"], grads["fc_weight"], grads["fc_bias"]]
            + grads["mlp_weights"] + grads["mlp_biases"])


# ---------------------------------------------------------------------------
# checkpoint: magic/version || HashGrid || FC blob || MLP blob
# ---------------------------------------------------------------------------


def write_field(field: StyleField, fh) -> None:
    fh.write(_FIELD_MAGIC)
    fh.write(struct.pack("<I", _FIELD_VERSION))
    encoding.save_grid(field.grid, fh)
    fh.write(struct.pack("<II", *field.fc_weight.shape))
    fh.write(field.fc_weight.astype("<f4").tobytes())
    fh.write(field.fc_bias.astype("<f4").tobytes())
    dims = field.mlp.dims()
    fh.write(struct.pack("<I", len(dims)))
    fh.write(struct.pack(f"<{len(dims)}I", *dims))
    for w, b in zip(field.mlp.weights, field.mlp.biases):
        fh.write(w.astype("<f4").tobytes())
        fh.write(b.astype("<f4").tobytes())


def read_field(fh) -> StyleField:
    if fh.read(4) != _FIELD_MAGIC:
        raise ValueError("bad style-field checkpoint magic")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != _FIELD_VERSION:
        raise ValueError(f"unsupported style-field version {version}")
    grid = encoding.load_grid(fh)
    out_d, in_d = struct.unpack("<II", fh.read(8))
    fc_w = np.frombuffer(fh.read(out_d * in_d * 4), dtype="<f4")
    fc_w = fc_w.astype(np.float64).reshape(out_d, in_d)
    fc_b = np.frombuffer(fh.read(out_d * 4), dtype="<f4").astype(np.float64)
    (n_dims,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{n_dims}I", fh.read(4 * n_dims))
    weights, biases = [], []
    for i in range(n_dims - 1):
        w = np.frombuffer(fh.read(dims[i + 1] * dims[i] * 4), dtype="<f4")
        weights.append(w.astype(np.float64).reshape(dims[i + 1], dims[i]))
        b = np.frombuffer(fh.read(dims[i + 1] * 4), dtype="<f4")
        biases.append(b.astype(np.float64))
    mlp = nn.MlpParams(weights=weights, biases=biases)
    return StyleField(grid=grid, fc_weight=fc_w, fc_bias=fc_b, mlp=mlp)


def save_field(field: StyleField, path) -> None:
    with Path(path).open("wb") as fh:
        write_field(field, fh)


def load_field(path) -> StyleField:
    with Path(path).open("rb") as fh:
        return read_field(fh)
