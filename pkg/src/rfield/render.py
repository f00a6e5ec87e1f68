"""Cameras, ray generation, stratified sampling, and compositing.

Rendering is read-only over field parameters. Rays march through the grid
with constant-width segments (delta = (far - near) / N), so a homogeneous
medium composites to the closed form 1 - exp(-sigma * (far - near)) exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from .field import RelationField, sigmoid, softplus

DEFAULT_N_SAMPLES = 64
TAU_HIT = 0.5
WHITE = np.array([1.0, 1.0, 1.0])


@dataclass
class Camera:
    """Pinhole camera with a rigid camera-to-world pose."""

    cam_id: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray  # (4,4) row-major camera-to-world
    near: float
    far: float

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        R = self.c2w[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-6:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.c2w[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.c2w[:3, 3]

    def to_dict(self):
        return {
            "id": self.cam_id,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "pose": [float(x) for x in self.c2w.reshape(-1)],
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            cam_id=str(d["id"]),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            c2w=np.asarray(d["pose"], dtype=np.float64).reshape(4, 4),
            near=float(d["near"]),
            far=float(d["far"]),
        )


def save_cameras(cameras: list[Camera], path) -> None:
    with open(path, "w") as f:
        json.dump([c.to_dict() for c in cameras], f, indent=2, sort_keys=True)
        f.write("\n")


def load_cameras(path) -> list[Camera]:
    with open(path) as f:
        return [Camera.from_dict(d) for d in json.load(f)]


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose looking from position toward target, z-up world."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = down
    c2w[:3, 2] = forward
    c2w[:3, 3] = position
    return c2w


def make_orbit_cameras(
    n: int,
    center=(0.0, 0.0, 0.5),
    radius: float = 3.5,
    height: float = 2.2,
    width: int = 64,
    image_height: int = 64,
    focal: float = 70.0,
    near: float = 0.5,
    far: float = 8.0,
) -> list[Camera]:
    """Ring of cameras around `center`, all looking at it."""
    cams = []
    for i in range(n):
        a = 2.0 * np.pi * i / n
        pos = np.array([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a), height])
        cams.append(
            Camera(
                cam_id=f"cam{i:03d}",
                fx=focal,
                fy=focal,
                cx=width / 2.0,
                cy=image_height / 2.0,
                width=width,
                height=image_height,
                c2w=look_at_pose(pos, center),
                near=near,
                far=far,
            )
        )
    return cams


def generate_ray(camera: Camera, pixel) -> tuple[np.ndarray, np.ndarray]:
    """Ray through the pixel center (u + 0.5, v + 0.5)."""
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise ValueError(f"pixel {(u, v)} outside {camera.width}x{camera.height} image")
    o, d = generate_rays(camera, np.array([[u, v]]))
    return o[0], d[0]


def generate_rays(camera: Camera, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pixels = np.asarray(pixels, dtype=np.float64)
    x = (pixels[:, 0] + 0.5 - camera.cx) / camera.fx
    y = (pixels[:, 1] + 0.5 - camera.cy) / camera.fy
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    dirs = dirs_cam @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.origin, dirs.shape).copy()
    return origins, dirs


def frame_pixels(width: int, height: int) -> np.ndarray:
    """All (u, v) pixel coordinates of a frame, row-major."""
    vv, uu = np.mgrid[0:height, 0:width]
    return np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1).astype(np.float64)


def sample_along_ray(near: float, far: float, n: int, jitter: bool = False, rng=None):
    """Stratified depths, one per equal-width bin; returns (depths, deltas)."""
    d, dl = sample_depths_batch(near, far, 1, n, jitter, rng)
    return d[0], dl[0]


def sample_depths_batch(near: float, far: float, n_rays: int, n: int, jitter: bool = False, rng=None):
    if n < 1:
        raise ValueError("need at least one sample per ray")
    width = (far - near) / n
    edges = near + width * np.arange(n)
    if jitter:
        if rng is None:
            raise ValueError("jitter sampling needs an rng")
        offs = rng.uniform(0.0, 1.0, size=(n_rays, n))
    else:
        offs = np.full((n_rays, n), 0.5)
    depths = edges[None, :] + offs * width
    deltas = np.full((n_rays, n), width)
    return depths, deltas


@dataclass
class RaySamples:
    """One ray's sampled depths, densities, and compositing weights."""

    origin: np.ndarray
    direction: np.ndarray
    depths: np.ndarray
    deltas: np.ndarray
    sigma: np.ndarray
    weights: np.ndarray
    t_res: float


def composite(sigma, delta, values, v_bg=None):
    """Emission-absorption compositing: out = sum_k w_k v_k + T_res * v_bg.

    Accepts a single ray (sigma (K,), values (K, C)) or a batch
    (sigma (R, K), values (R, K, C)). Returns (out, weights, t_res).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    single = sigma.ndim == 1
    sigma2 = np.atleast_2d(sigma)
    delta2 = np.atleast_2d(np.asarray(delta, dtype=np.float64))
    if np.any(sigma2 < 0):
        raise ValueError("sigma must be non-negative")
    if np.any(delta2 <= 0):
        raise ValueError("deltas must be positive")
    weights, t_res = kernels.composite_forward(
        np.ascontiguousarray(sigma2), np.ascontiguousarray(np.broadcast_to(delta2, sigma2.shape))
    )
    values = np.asarray(values, dtype=np.float64)
    vals3 = values[None] if single else values
    if vals3.ndim == 2:
        vals3 = vals3[..., None]
    out = np.einsum("rk,rkc->rc", weights, vals3)
    if v_bg is not None:
        out = out + t_res[:, None] * np.atleast_1d(np.asarray(v_bg, dtype=np.float64))[None, :]
    if single:
        return out[0], weights[0], float(t_res[0])
    return out, weights, t_res


def expected_depth(weights, depths, tau_hit: float = TAU_HIT):
    """Weight-averaged depth, or None when accumulated weight is below tau_hit."""
    weights = np.asarray(weights, dtype=np.float64)
    acc = weights.sum()
    if acc < tau_hit:
        return None
    return float((weights * np.asarray(depths)).sum() / acc)


def expected_depth_batch(weights, depths, tau_hit: float = TAU_HIT):
    acc = weights.sum(axis=1)
    hit = acc >= tau_hit
    safe = np.where(acc > 0, acc, 1.0)
    z = (weights * depths).sum(axis=1) / safe
    return z, hit


def eval_grid_masked(field: RelationField, name: str, pts: np.ndarray, inside: np.ndarray) -> np.ndarray:
    """Grid read returning zeros at out-of-bounds points (rays may exit the volume)."""
    out = np.zeros((pts.shape[0], field.grids[name].n_channels), dtype=np.float64)
    if inside.any():
        out[inside] = field.grids[name].sample(pts[inside])
    return out


def inside_bounds(field: RelationField, pts: np.ndarray) -> np.ndarray:
    lo = np.asarray(field.config.bounds_lo)
    hi = np.asarray(field.config.bounds_hi)
    return np.all((pts >= lo) & (pts <= hi), axis=1)


def ray_points(origins, dirs, depths):
    return origins[:, None, :] + depths[..., None] * dirs[:, None, :]


def render_rays(
    field: RelationField,
    origins: np.ndarray,
    dirs: np.ndarray,
    near: float,
    far: float,
    heads=("color",),
    n_samples: int = DEFAULT_N_SAMPLES,
    background=WHITE,
    jitter: bool = False,
    rng=None,
):
    """Composite the requested heads along a ray batch with one density pass.

    Returns a dict with the requested heads plus 'weights', 'depths', 'acc',
    't_res'; 'depth' holds NaN for rays that miss (acc < TAU_HIT).
    """
    n_rays = origins.shape[0]
    depths, deltas = sample_depths_batch(near, far, n_rays, n_samples, jitter, rng)
    pts = ray_points(origins, dirs, depths).reshape(-1, 3)
    inside = inside_bounds(field, pts)
    raw_d = eval_grid_masked(field, "density", pts, inside)[:, 0]
    sigma = np.where(inside, softplus(raw_d), 0.0).reshape(n_rays, n_samples)
    weights, t_res = kernels.composite_forward(sigma, deltas)
    out = {"weights": weights, "depths": depths, "t_res": t_res, "acc": weights.sum(axis=1)}
    for head in heads:
        if head == "depth":
            z, hit = expected_depth_batch(weights, depths)
            out["depth"] = np.where(hit, z, np.nan)
        elif head == "color":
            raw = eval_grid_masked(field, "color", pts, inside).reshape(n_rays, n_samples, 3)
            vals = np.where(inside.reshape(n_rays, n_samples, 1), sigmoid(raw), 0.0)
            out["color"], _, _ = composite_with_weights(weights, t_res, vals, background)
        elif head in ("semantic", "instance"):
            c = field.grids[head].n_channels
            raw = eval_grid_masked(field, head, pts, inside).reshape(n_rays, n_samples, c)
            out[head], _, _ = composite_with_weights(weights, t_res, raw, None)
        else:
            raise ValueError(f"unknown head {head!r}")
    return out


def composite_with_weights(weights, t_res, values, v_bg):
    out = np.einsum("rk,rkc->rc", weights, values)
    if v_bg is not None:
        out = out + t_res[:, None] * np.atleast_1d(np.asarray(v_bg, dtype=np.float64))[None, :]
    return out, weights, t_res


def render_frame(
    field: RelationField,
    camera: Camera,
    heads=("color",),
    n_samples: int = DEFAULT_N_SAMPLES,
    background=WHITE,
):
    """Render whole-frame maps; each head shares the frame's single density pass."""
    pixels = frame_pixels(camera.width, camera.height)
    origins, dirs = generate_rays(camera, pixels)
    flat = render_rays(field, origins, dirs, camera.near, camera.far, heads, n_samples, background)
    maps = {}
    for head in list(heads) + ["acc"]:
        arr = flat[head]
        shape = (camera.height, camera.width) if arr.ndim == 1 else (camera.height, camera.width, arr.shape[1])
        maps[head] = arr.reshape(shape)
    return maps
