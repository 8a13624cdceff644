"""Gaussian cloud data model, covariance math, PLY import/export, synthetic scenes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SH_C0 = 0.28209479177387814
OPACITY_EPS = 1e-6

_QUAT_TOL = 1e-6


class PlyParseError(ValueError):
    """Raised when a PLY file does not match the expected 3DGS layout."""


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quaternions_to_matrices(quats: np.ndarray) -> np.ndarray:
    """Batched quaternion (N,4) to rotation matrices (N,3,3)."""
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    out = np.empty((quats.shape[0], 3, 3))
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def covariance_from_rotation_scale(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T for one Gaussian; eigenvalues are the squared scales."""
    q = np.asarray(q, dtype=float)
    s = np.asarray(s, dtype=float)
    if q.shape != (4,) or s.shape != (3,):
        raise ValueError("expected quaternion (4,) and scales (3,)")
    if abs(np.linalg.norm(q) - 1.0) > _QUAT_TOL:
        raise ValueError(f"quaternion is not unit-norm: |q|={np.linalg.norm(q):.8f}")
    if np.any(s <= 0):
        raise ValueError("scales must be strictly positive")
    rot = quaternion_to_matrix(q)
    m = rot * s[None, :]
    return m @ m.T


def covariances_from_rotation_scale(quats: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Batched covariance factorization (N,4),(N,3) -> (N,3,3)."""
    rots = quaternions_to_matrices(quats)
    m = rots * scales[:, None, :]
    return m @ np.transpose(m, (0, 2, 1))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GaussianCloud:
    """Per-Gaussian arrays; immutable after construction.

    means (N,3), rotations (N,4) unit quaternions (w,x,y,z), scales (N,3)
    positive stddevs, opacities (N,) in [0,1], base_colors (N,3) RGB in [0,1].
    """

    means: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    base_colors: np.ndarray

    def __post_init__(self):
        n = len(self.means)
        means = np.asarray(self.means, dtype=float).reshape(n, 3)
        rots = np.asarray(self.rotations, dtype=float).reshape(n, 4)
        scales = np.asarray(self.scales, dtype=float).reshape(n, 3)
        opac = np.asarray(self.opacities, dtype=float).reshape(n)
        colors = np.asarray(self.base_colors, dtype=float).reshape(n, 3)
        if n:
            norms = np.linalg.norm(rots, axis=1)
            if np.any(np.abs(norms - 1.0) > _QUAT_TOL):
                worst = int(np.argmax(np.abs(norms - 1.0)))
                raise ValueError(
                    f"rotation {worst} is not unit-norm (|q|={norms[worst]:.8f})")
            if np.any(scales <= 0):
                raise ValueError("scales must be strictly positive")
        opac = np.clip(opac, 0.0, 1.0)
        colors = np.clip(colors, 0.0, 1.0)
        object.__setattr__(self, "means", _readonly(means))
        object.__setattr__(self, "rotations", _readonly(rots))
        object.__setattr__(self, "scales", _readonly(scales))
        object.__setattr__(self, "opacities", _readonly(opac))
        object.__setattr__(self, "base_colors", _readonly(colors))

    def __len__(self) -> int:
        return self.means.shape[0]

    def covariances(self) -> np.ndarray:
        """Per-Gaussian 3x3 covariances; memoized (the cloud is immutable)."""
        cached = getattr(self, "_cov_cache", None)
        if cached is None:
            cached = covariances_from_rotation_scale(self.rotations, self.scales)
            cached.setflags(write=False)
            object.__setattr__(self, "_cov_cache", cached)
        return cached

    def geometry_digest(self) -> bytes:
        """Byte-level fingerprint of everything a stylizer must never touch."""
        import hashlib

        h = hashlib.sha256()
        for a in (self.means, self.rotations, self.scales, self.opacities):
            h.update(a.tobytes())
        return h.digest()


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels plus world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-6:
            raise ValueError("rotation is not orthonormal within 1e-6")
        object.__setattr__(self, "rotation", _readonly(rot))
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, fx, fy, cx, cy, width, height):
        eye = np.asarray(eye, dtype=float)
        fwd = np.asarray(target, dtype=float) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=float))
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        return cls(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                   rotation=rot, translation=-rot @ eye)

    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray):
        """Returns pixel coordinates (N,2) and camera-space depths (N,)."""
        pc = self.world_to_camera(np.atleast_2d(points))
        z = pc[:, 2]
        safe_z = np.where(z != 0, z, 1.0)
        u = self.fx * pc[:, 0] / safe_z + self.cx
        v = self.fy * pc[:, 1] / safe_z + self.cy
        return np.stack([u, v], axis=1), z

    def resized(self, width: int, height: int) -> "Camera":
        sx = width / self.width
        sy = height / self.height
        return Camera(fx=self.fx * sx, fy=self.fy * sy, cx=self.cx * sx,
                      cy=self.cy * sy, width=width, height=height,
                      rotation=self.rotation, translation=self.translation)

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "w": self.width, "h": self.height,
            "R": [float(v) for v in self.rotation.ravel()],
            "t": [float(v) for v in self.translation],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                   cy=float(d["cy"]), width=int(d["w"]), height=int(d["h"]),
                   rotation=np.asarray(d["R"], dtype=float).reshape(3, 3),
                   translation=np.asarray(d["t"], dtype=float))


@dataclass(frozen=True)
class SceneBundle:
    cloud: GaussianCloud
    cameras: list
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.cameras:
            raise ValueError("a scene bundle needs at least one camera")
        bg = np.clip(np.asarray(self.background, dtype=float).reshape(3), 0.0, 1.0)
        object.__setattr__(self, "background", _readonly(bg))


# ---------------------------------------------------------------------------
# PLY import/export (de-facto 3DGS binary layout)
# ---------------------------------------------------------------------------

_BASE_PROPS = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
_TAIL_PROPS = ["opacity", "scale_0", "scale_1", "scale_2",
               "rot_0", "rot_1", "rot_2", "rot_3"]


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def load_ply(path) -> GaussianCloud:
    """Read a 3DGS PLY: log-scales, logit opacities and DC colors are decoded."""
    path = Path(path)
    data = path.read_bytes()
    end = data.find(b"end_header\n")
    if end < 0:
        raise PlyParseError("missing end_header")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    payload = data[end + len(b"end_header\n"):]

    if not header or header[0].strip() != "ply":
        raise PlyParseError("missing ply magic line")
    n_vertex = None
    props = []
    fmt_seen = False
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1:] != ["binary_little_endian", "1.0"]:
                raise PlyParseError(f"unsupported format: {' '.join(parts[1:])}")
            fmt_seen = True
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise PlyParseError(f"unexpected element: {parts[1]}")
            if n_vertex is not None:
                raise PlyParseError("duplicate vertex element")
            n_vertex = int(parts[2])
        elif parts[0] == "property":
            if n_vertex is None:
                raise PlyParseError(f"property before vertex element: {line.strip()}")
            if parts[1] != "float":
                raise PlyParseError(f"non-float property: {parts[2]}")
            props.append(parts[2])
    if not fmt_seen:
        raise PlyParseError("missing format line")
    if n_vertex is None:
        raise PlyParseError("missing vertex element")

    n_rest = len(props) - len(_BASE_PROPS) - len(_TAIL_PROPS)
    expected = list(_BASE_PROPS)
    if n_rest > 0:
        expected += [f"f_rest_{i}" for i in range(n_rest)]
    expected += _TAIL_PROPS
    if props != expected:
        for got, want in zip(props, expected):
            if got != want:
                raise PlyParseError(f"unexpected property {got!r} (expected {want!r})")
        raise PlyParseError("property list truncated")

    n_props = len(props)
    need = n_vertex * n_props * 4
    if len(payload) < need:
        raise PlyParseError(
            f"truncated payload: need {need} bytes for vertex data, have {len(payload)}")
    raw = np.frombuffer(payload[:need], dtype="<f4").reshape(n_vertex, n_props)
    raw = raw.astype(np.float64)

    col = {name: i for i, name in enumerate(props)}
    means = raw[:, [col["x"], col["y"], col["z"]]]
    f_dc = raw[:, [col["f_dc_0"], col["f_dc_1"], col["f_dc_2"]]]
    colors = np.clip(0.5 + SH_C0 * f_dc, 0.0, 1.0)
    opac = _sigmoid(raw[:, col["opacity"]])
    scales = np.exp(raw[:, [col["scale_0"], col["scale_1"], col["scale_2"]]])
    rots = raw[:, [col["rot_0"], col["rot_1"], col["rot_2"], col["rot_3"]]]
    if n_vertex:
        norms = np.linalg.norm(rots, axis=1)
        if np.any(norms < 1e-12):
            raise PlyParseError("rot_0..3 contains a zero quaternion")
        # only renormalize quaternions that actually deviate, so that
        # save -> load -> save stays bit-identical for writer output
        off = np.abs(norms - 1.0) > _QUAT_TOL
        rots = rots.copy()
        rots[off] /= norms[off, None]
    return GaussianCloud(means=means, rotations=rots, scales=scales,
                         opacities=opac, base_colors=colors)


def save_ply(cloud: GaussianCloud, path) -> None:
    """Write the minimal 3DGS layout (no f_rest), float32 little-endian."""
    path = Path(path)
    n = len(cloud)
    names = _BASE_PROPS + _TAIL_PROPS
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")

    out = np.zeros((n, len(names)), dtype=np.float64)
    out[:, 0:3] = cloud.means
    out[:, 6:9] = (cloud.base_colors - 0.5) / SH_C0
    op = np.clip(cloud.opacities, OPACITY_EPS, 1.0 - OPACITY_EPS)
    out[:, 9] = np.log(op / (1.0 - op))
    out[:, 10:13] = np.log(cloud.scales)
    out[:, 13:17] = cloud.rotations
    blob = "\n".join(header).encode("ascii") + b"\n" + out.astype("<f4").tobytes()
    path.write_bytes(blob)


def save_bundle(bundle: SceneBundle, ply_path) -> Path:
    """PLY plus a sidecar JSON holding cameras and background."""
    ply_path = Path(ply_path)
    save_ply(bundle.cloud, ply_path)
    side = ply_path.with_suffix(".cameras.json")
    side.write_text(json.dumps({
        "background": [float(v) for v in bundle.background],
        "cameras": [cam.to_json() for cam in bundle.cameras],
    }, indent=1))
    return side


def load_bundle(ply_path) -> SceneBundle:
    ply_path = Path(ply_path)
    cloud = load_ply(ply_path)
    side = ply_path.with_suffix(".cameras.json")
    meta = json.loads(side.read_text())
    cams = [Camera.from_json(d) for d in meta["cameras"]]
    return SceneBundle(cloud=cloud, cameras=cams,
                       background=np.asarray(meta["background"], dtype=float))


def load_cameras(path) -> list:
    """Cameras from either a sidecar bundle JSON or a bare JSON list."""
    meta = json.loads(Path(path).read_text())
    if isinstance(meta, dict):
        meta = meta["cameras"]
    return [Camera.from_json(d) for d in meta]


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

SCENE_KINDS = ("lattice", "spheres", "textured-box")


def _arc_cameras(n_cameras, width, height, radius=2.35, span_deg=64.0):
    fy = (height / 2.0) / np.tan(np.deg2rad(30.0))
    if n_cameras == 1:
        angles = np.array([0.0])
    else:
        half = np.deg2rad(span_deg / 2.0)
        angles = np.linspace(-half, half, n_cameras)
    cams = []
    for th in angles:
        eye = np.array([radius * np.sin(th), 0.4, radius * np.cos(th)])
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0),
                                   fx=fy, fy=fy, cx=width / 2.0, cy=height / 2.0,
                                   width=width, height=height))
    return cams


def _unit_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _lattice(rng, n):
    side = int(np.ceil(n ** (1.0 / 3.0)))
    axis = np.linspace(-0.8, 0.8, side) if side > 1 else np.array([0.0])
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    means = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)[:n]
    spacing = 1.6 / max(side - 1, 1)
    scales = np.full((n, 3), 0.35 * spacing)
    rots = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    colors = np.clip(means / 1.6 + 0.5, 0.0, 1.0)
    opac = np.full(n, 0.85)
    return means, rots, scales, opac, colors


def _spheres(rng, n):
    # lateral spread roughly fills a 60-degree frustum seen from the arc
    k = int(np.clip(n // 600, 3, 10))
    centers = rng.uniform(-0.85, 0.85, size=(k, 3))
    centers[:, 1] *= 0.65
    centers[:, 2] *= 0.4
    radii = rng.uniform(0.45, 0.65, size=k)
    palette = rng.uniform(0.15, 0.95, size=(k, 3))
    counts = np.full(k, n // k)
    counts[: n - counts.sum()] += 1
    means, colors, scales = [], [], []
    for ci in range(k):
        m = counts[ci]
        d = rng.normal(size=(m, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = centers[ci] + radii[ci] * d
        means.append(pts)
        # banded texture over the sphere so view statistics vary
        stripe = 0.5 + 0.5 * np.sin(5.0 * np.arctan2(d[:, 1], d[:, 0]) + 3.0 * d[:, 2])
        base = palette[ci][None, :] * (0.55 + 0.45 * stripe[:, None])
        jitter = rng.uniform(-0.08, 0.08, size=(m, 3))
        colors.append(np.clip(base + jitter, 0.0, 1.0))
        s = radii[ci] * np.sqrt(4.0 * np.pi / m)
        scales.append(rng.uniform(0.7 * s, 1.3 * s, size=(m, 3)))
    means = np.concatenate(means)
    colors = np.concatenate(colors)
    scales = np.concatenate(scales)
    opac = rng.uniform(0.2, 1.0, size=n)
    rots = _unit_quats(rng, n)
    return means, rots, scales, opac, colors


def _textured_box(rng, n):
    # near-opaque fine splats on a frame-filling box: the dense-surface
    # archetype used for throughput work
    half = 0.95
    per_face = np.full(6, n // 6)
    per_face[: n - per_face.sum()] += 1
    palette = rng.uniform(0.1, 0.95, size=(6, 2, 3))
    means, colors = [], []
    for f in range(6):
        m = per_face[f]
        uv = rng.uniform(-half, half, size=(m, 2))
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        pts = np.empty((m, 3))
        pts[:, axis] = sign * half
        pts[:, (axis + 1) % 3] = uv[:, 0]
        pts[:, (axis + 2) % 3] = uv[:, 1]
        means.append(pts)
        checker = ((np.floor(uv[:, 0] * 4 / half) + np.floor(uv[:, 1] * 4 / half)) % 2)
        col = np.where(checker[:, None] > 0, palette[f, 0][None, :], palette[f, 1][None, :])
        colors.append(np.clip(col + rng.uniform(-0.05, 0.05, size=(m, 3)), 0.0, 1.0))
    means = np.concatenate(means)
    colors = np.concatenate(colors)
    spacing = np.sqrt(6 * (2 * half) ** 2 / n)
    scales = np.full((n, 3), 0.18 * spacing)
    rots = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    opac = rng.uniform(0.8, 1.0, size=n)
    return means, rots, scales, opac, colors


def make_synthetic_scene(kind: str, n_gaussians: int, n_cameras: int, seed: int,
                         width: int = 160, height: int = 120) -> SceneBundle:
    """Deterministic desk-scale scene with cameras on a front-facing arc."""
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    if n_gaussians < 1 or n_cameras < 1:
        raise ValueError("n_gaussians and n_cameras must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "lattice":
        arrays = _lattice(rng, n_gaussians)
    elif kind == "spheres":
        arrays = _spheres(rng, n_gaussians)
    else:
        arrays = _textured_box(rng, n_gaussians)
    means, rots, scales, opac, colors = arrays
    cloud = GaussianCloud(means=means, rotations=rots, scales=scales,
                          opacities=opac, base_colors=colors)
    cams = _arc_cameras(n_cameras, width, height)
    return SceneBundle(cloud=cloud, cameras=cams, background=np.full(3, 0.5))
