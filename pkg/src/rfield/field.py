"""Learnable field: multi-channel voxel grids plus a small relation fusion net.

All heads live on dense axis-aligned grids read by trilinear interpolation.
Forward passes are pure; gradients are exact and accumulate into per-parameter
buffers that the trainer zeroes at the start of every step. Math is float64
in memory; checkpoints serialize float32 blocks.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ChecksumError, OutOfBoundsError, SchemaVersionError

CHECKPOINT_MAGIC = b"RFLD"
CHECKPOINT_VERSION = 1

RAW_DENSITY_INIT = -2.0
FEATURE_INIT_STD = 0.01

GRID_HEADS = ("density", "color", "semantic", "instance", "relfeat")


def softplus(x):
    """log(1 + e^x), stable for large |x|."""
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


def sigmoid(x):
    from scipy.special import expit

    return expit(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class GridConfig:
    """Grid resolution, world bounds, and per-head channel counts."""

    resolution: tuple[int, int, int] = (64, 64, 64)
    bounds_lo: tuple[float, float, float] = (-2.0, -2.0, -2.0)
    bounds_hi: tuple[float, float, float] = (2.0, 2.0, 2.0)
    d_semantic: int = 16
    d_instance: int = 8
    d_relation: int = 16
    d_relfeat: int = 16
    hidden: int = 32

    def __post_init__(self):
        if any(r < 2 for r in self.resolution):
            raise ValueError(f"resolution must be >= 2 per axis, got {self.resolution}")
        lo, hi = np.asarray(self.bounds_lo), np.asarray(self.bounds_hi)
        if not np.all(hi > lo):
            raise ValueError("bounds must have positive extent per axis")
        for name in ("d_semantic", "d_instance", "d_relation", "d_relfeat", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def channels(self) -> dict[str, int]:
        return {
            "density": 1,
            "color": 3,
            "semantic": self.d_semantic,
            "instance": self.d_instance,
            "relfeat": self.d_relfeat,
        }

    def to_dict(self):
        return {
            "resolution": list(self.resolution),
            "bounds_lo": list(self.bounds_lo),
            "bounds_hi": list(self.bounds_hi),
            "d_semantic": self.d_semantic,
            "d_instance": self.d_instance,
            "d_relation": self.d_relation,
            "d_relfeat": self.d_relfeat,
            "hidden": self.hidden,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            resolution=tuple(d["resolution"]),
            bounds_lo=tuple(d["bounds_lo"]),
            bounds_hi=tuple(d["bounds_hi"]),
            d_semantic=d["d_semantic"],
            d_instance=d["d_instance"],
            d_relation=d["d_relation"],
            d_relfeat=d["d_relfeat"],
            hidden=d["hidden"],
        )


class FeatureGrid:
    """Dense voxel grid of learnable vectors with trilinear read/backprop.

    Points are world coordinates; reads clamp to the boundary for points up to
    one voxel outside the bounds and reject anything further out.
    """

    def __init__(self, config: GridConfig, n_channels: int):
        self.config = config
        rx, ry, rz = config.resolution
        self.values = np.zeros((rx, ry, rz, n_channels), dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self._lo = np.asarray(config.bounds_lo, dtype=np.float64)
        self._hi = np.asarray(config.bounds_hi, dtype=np.float64)
        res = np.asarray(config.resolution, dtype=np.float64)
        self._scale = (res - 1.0) / (self._hi - self._lo)
        self._voxel = (self._hi - self._lo) / (res - 1.0)

    @property
    def n_channels(self) -> int:
        return self.values.shape[3]

    def world_to_grid(self, pts: np.ndarray) -> np.ndarray:
        """Map world points to continuous grid coords, clamped to the boundary."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        below = self._lo - self._voxel
        above = self._hi + self._voxel
        if np.any(pts < below) or np.any(pts > above):
            bad = pts[np.any((pts < below) | (pts > above), axis=1)][0]
            raise OutOfBoundsError(
                f"point {bad.tolist()} outside bounds "
                f"{self._lo.tolist()}..{self._hi.tolist()} beyond one-voxel tolerance"
            )
        t = (pts - self._lo) * self._scale
        res = np.asarray(self.config.resolution, dtype=np.float64)
        return np.clip(t, 0.0, res - 1.0)

    def sample(self, pts: np.ndarray) -> np.ndarray:
        return kernels.trilerp_forward(self.values, self.world_to_grid(pts))

    def sample_backward(self, pts: np.ndarray, upstream: np.ndarray) -> None:
        upstream = np.ascontiguousarray(np.atleast_2d(upstream), dtype=np.float64)
        kernels.trilerp_backward(self.grad, self.world_to_grid(pts), upstream)

    # coordinate-level fast path: callers precompute coords once per batch
    # (all heads share one GridConfig) and have already bounds-masked points
    def sample_coords(self, coords: np.ndarray) -> np.ndarray:
        return kernels.trilerp_forward(self.values, coords)

    def backward_coords(self, coords: np.ndarray, upstream: np.ndarray) -> None:
        kernels.trilerp_backward(self.grad, coords, np.ascontiguousarray(upstream, dtype=np.float64))

    def zero_grad(self) -> None:
        self.grad[:] = 0.0


def trilerp(grid: FeatureGrid, p) -> np.ndarray:
    """Trilinear read of the 8 enclosing corner vectors at world point(s) p."""
    out = grid.sample(p)
    return out[0] if np.asarray(p).ndim == 1 else out


def trilerp_backward(grid: FeatureGrid, p, upstream) -> None:
    """Accumulate upstream (scaled by the trilinear weights) into corner grads."""
    grid.sample_backward(p, upstream)


@dataclass
class FieldSample:
    """Field heads evaluated at one point: squashed density/color, raw features."""

    sigma: float
    color: np.ndarray
    semantic: np.ndarray
    instance: np.ndarray


class RelationFusionNet:
    """Two affine layers with tanh between: concat(feat_a, feat_b) -> hidden -> D_r."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator):
        self.w1 = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, hidden))
        self.b1 = np.zeros(hidden, dtype=np.float64)
        self.w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, d_out))
        self.b2 = np.zeros(d_out, dtype=np.float64)
        self.g_w1 = np.zeros_like(self.w1)
        self.g_b1 = np.zeros_like(self.b1)
        self.g_w2 = np.zeros_like(self.w2)
        self.g_b2 = np.zeros_like(self.b2)

    def forward(self, x: np.ndarray):
        h = np.tanh(x @ self.w1 + self.b1)
        out = h @ self.w2 + self.b2
        return out, (x, h)

    def backward(self, cache, upstream: np.ndarray) -> np.ndarray:
        """Accumulate parameter grads; return gradient wrt the input."""
        x, h = cache
        self.g_w2 += h.T @ upstream
        self.g_b2 += upstream.sum(axis=0)
        dh = upstream @ self.w2.T
        dz = dh * (1.0 - h * h)
        self.g_w1 += x.T @ dz
        self.g_b1 += dz.sum(axis=0)
        return dz @ self.w1.T

    def zero_grad(self) -> None:
        for g in (self.g_w1, self.g_b1, self.g_w2, self.g_b2):
            g[:] = 0.0


class RelationField:
    """All learnable state: one FeatureGrid per head plus the fusion net."""

    def __init__(self, config: GridConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.grids = {name: FeatureGrid(config, c) for name, c in config.channels.items()}
        self.grids["density"].values[:] = RAW_DENSITY_INIT
        for name in ("semantic", "instance", "relfeat"):
            g = self.grids[name]
            g.values[:] = rng.normal(0.0, FEATURE_INIT_STD, size=g.values.shape)
        self.fusion = RelationFusionNet(
            2 * config.d_relfeat, config.hidden, config.d_relation, rng
        )

    # -- forward -----------------------------------------------------------

    def grid_coords(self, pts: np.ndarray) -> np.ndarray:
        """Grid coordinates shared by every head (one GridConfig for all)."""
        return self.grids["density"].world_to_grid(pts)

    def density(self, pts: np.ndarray) -> np.ndarray:
        return softplus(self.grids["density"].sample(pts)[:, 0])

    def sample_field(self, p) -> FieldSample:
        p = np.asarray(p, dtype=np.float64)
        raw_d = self.grids["density"].sample(p)[0, 0]
        raw_c = self.grids["color"].sample(p)[0]
        return FieldSample(
            sigma=float(softplus(raw_d)),
            color=sigmoid(raw_c),
            semantic=self.grids["semantic"].sample(p)[0],
            instance=self.grids["instance"].sample(p)[0],
        )

    def relation_forward(self, p_ray: np.ndarray, z: np.ndarray, with_cache: bool = False):
        """Fusion of relfeat reads at ray point(s) and query point(s) z.

        z may be a single point shared across all rows of p_ray.
        """
        p_ray = np.atleast_2d(np.asarray(p_ray, dtype=np.float64))
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            z = np.broadcast_to(z, p_ray.shape)
        f_ray = self.grids["relfeat"].sample(p_ray)
        f_z = self.grids["relfeat"].sample(z)
        x = np.concatenate([f_ray, f_z], axis=1)
        out, cache = self.fusion.forward(x)
        if with_cache:
            return out, (p_ray, z, cache)
        return out

    def relation_backward(self, cache, upstream: np.ndarray) -> None:
        """Chain rule through the fusion net and both relfeat reads."""
        p_ray, z, net_cache = cache
        dx = self.fusion.backward(net_cache, np.atleast_2d(upstream))
        d_f = self.config.d_relfeat
        self.grids["relfeat"].sample_backward(p_ray, dx[:, :d_f])
        self.grids["relfeat"].sample_backward(z, dx[:, d_f:])

    # -- parameters --------------------------------------------------------

    def parameters(self):
        """Ordered (name, values, grad) triples; order fixes the checkpoint layout."""
        out = [(name, self.grids[name].values, self.grids[name].grad) for name in GRID_HEADS]
        out += [
            ("fusion.w1", self.fusion.w1, self.fusion.g_w1),
            ("fusion.b1", self.fusion.b1, self.fusion.g_b1),
            ("fusion.w2", self.fusion.w2, self.fusion.g_w2),
            ("fusion.b2", self.fusion.b2, self.fusion.g_b2),
        ]
        return out

    def zero_grad(self) -> None:
        for g in self.grids.values():
            g.zero_grad()
        self.fusion.zero_grad()

    # -- checkpoint --------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "RelationField":
        return load_checkpoint(path)


def save_checkpoint(field: RelationField, path) -> None:
    """Binary container: magic, version, JSON header, then float32 blocks.

    A JSON sidecar (<path>.manifest.json) lists block names, byte offsets,
    and sha256 checksums; load verifies them.
    """
    path = str(path)
    blocks = [(name, np.ascontiguousarray(values, dtype="<f4")) for name, values, _ in field.parameters()]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "grid_config": field.config.to_dict(),
        "dims": {
            "d_semantic": field.config.d_semantic,
            "d_instance": field.config.d_instance,
            "d_relation": field.config.d_relation,
            "d_relfeat": field.config.d_relfeat,
            "hidden": field.config.hidden,
        },
        "blocks": [{"name": n, "shape": list(b.shape)} for n, b in blocks],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    manifest_blocks = []
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for name, b in blocks:
            raw = b.tobytes()
            manifest_blocks.append(
                {
                    "name": name,
                    "offset": f.tell(),
                    "nbytes": len(raw),
                    "sha256": hashlib.sha256(raw).hexdigest(),
                }
            )
            f.write(raw)
    manifest = {"format_version": CHECKPOINT_VERSION, "blocks": manifest_blocks}
    with open(path + ".manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path) -> RelationField:
    path = str(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise SchemaVersionError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise SchemaVersionError(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
        header = json.loads(f.read(header_len).decode("utf-8"))
        config = GridConfig.from_dict(header["grid_config"])
        field = RelationField(config, seed=0)
        params = {name: values for name, values, _ in field.parameters()}
        manifest = None
        try:
            with open(path + ".manifest.json") as mf:
                manifest = {b["name"]: b for b in json.load(mf)["blocks"]}
        except FileNotFoundError:
            pass
        for spec in header["blocks"]:
            name, shape = spec["name"], tuple(spec["shape"])
            n = int(np.prod(shape))
            raw = f.read(n * 4)
            if len(raw) != n * 4:
                raise ChecksumError(f"checkpoint truncated in block {name!r}")
            if manifest is not None:
                got = hashlib.sha256(raw).hexdigest()
                if got != manifest[name]["sha256"]:
                    raise ChecksumError(f"checksum mismatch for block {name!r}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
            if name not in params:
                raise SchemaVersionError(f"unexpected block {name!r} in checkpoint")
            params[name][:] = arr
    return field
