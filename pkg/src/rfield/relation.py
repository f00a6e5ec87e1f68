"""Pair-pixel sampling, relationship target lookup, and relation rendering.

The RelationStore keeps one 16-bit segmentation map per image plus a keyed
table (ordered instance-id pair -> embedding row). Rows live in a shared
pool, one per distinct phrase combination, so memory stays O(pixels +
pairs + unique_relations * D_r) instead of O(pixels^2 * D_r).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embeddings import EmbeddingTable, NULL_PHRASE
from .errors import DatasetError
from .field import RelationField
from .render import Camera, generate_rays, expected_depth, sample_depths_batch, ray_points, inside_bounds, eval_grid_masked
from . import kernels
from .field import softplus


@dataclass
class PixelPair:
    """One supervision pair: the ray pixel renders, the query pixel resolves to z."""

    image_id: str
    ray_pixel: tuple[int, int]
    query_pixel: tuple[int, int]
    id_ray: int
    id_query: int
    target: np.ndarray | None
    has_relation: bool = False


class RelationStore:
    """Per-image segmentation maps plus keyed relation tables over a shared row pool."""

    def __init__(self, table: EmbeddingTable):
        self.table = table
        self.none_embedding = table.embedding(NULL_PHRASE).copy()
        self.segmaps: dict[str, np.ndarray] = {}
        self.tables: dict[str, dict[tuple[int, int], int]] = {}
        self.pool: list[np.ndarray] = []
        self.pool_phrases: list[tuple[str, ...]] = []
        self._pool_index: dict[tuple[str, ...], int] = {}

    def add_image(self, image_id: str, segmap: np.ndarray, pairs) -> None:
        """pairs: iterable of {"subject_id","object_id","phrases"} for this image."""
        segmap = np.asarray(segmap, dtype=np.uint16)
        visible = set(int(i) for i in np.unique(segmap)) - {0}
        table: dict[tuple[int, int], int] = {}
        for rec in pairs:
            s, o = int(rec["subject_id"]), int(rec["object_id"])
            if s not in visible or o not in visible:
                raise DatasetError(
                    f"image {image_id}: relation pair ({s},{o}) references ids "
                    f"not present in its segmentation map"
                )
            phrases = tuple(sorted(rec["phrases"]))
            row = self._pool_index.get(phrases)
            if row is None:
                row = len(self.pool)
                self.pool.append(self.table.mean_embedding(phrases))
                self.pool_phrases.append(phrases)
                self._pool_index[phrases] = row
            table[(s, o)] = row
        self.segmaps[image_id] = segmap
        self.tables[image_id] = table

    def id_at(self, image_id: str, pixel) -> int:
        u, v = int(pixel[0]), int(pixel[1])
        return int(self.segmaps[image_id][v, u])

    def lookup(self, image_id: str, id_query: int, id_ray: int):
        """Embedding for ordered key (query instance, ray instance).

        Self-pairs return None (skipped); a missing key returns the
        null-relation ("none") embedding.
        """
        if id_query == id_ray:
            return None
        row = self.tables[image_id].get((id_query, id_ray))
        if row is None:
            return self.none_embedding
        return self.pool[row]

    def has_relation(self, image_id: str, id_query: int, id_ray: int) -> bool:
        return (id_query, id_ray) in self.tables[image_id]

    def phrases_for(self, image_id: str, id_query: int, id_ray: int):
        row = self.tables[image_id].get((id_query, id_ray))
        return None if row is None else self.pool_phrases[row]

    # -- memory accounting --------------------------------------------------

    def store_nbytes(self) -> int:
        """Bytes held by the store: uint16 maps, float32 pool rows, key entries."""
        n = sum(m.nbytes for m in self.segmaps.values())
        n += sum(len(row) * 4 for row in self.pool)
        n += sum(len(t) for t in self.tables.values()) * 8  # 2x uint16 key + uint32 row
        n += sum(sum(len(p.encode()) for p in ph) for ph in self.pool_phrases)
        return n

    @staticmethod
    def dense_reference_nbytes(n_images: int, n_masks: int, width: int, height: int, d: int) -> int:
        """Size of materializing every ordered mask pair per pixel (float32)."""
        return n_images * n_masks * (n_masks - 1) * width * height * d * 4


def lookup_target(store: RelationStore, pair: PixelPair):
    """Two-step lookup: segmentation ids at both pixels, then the keyed table."""
    id_ray = store.id_at(pair.image_id, pair.ray_pixel)
    id_query = store.id_at(pair.image_id, pair.query_pixel)
    if id_ray == 0 or id_query == 0:
        raise DatasetError("lookup_target requires both pixels to be annotated")
    return store.lookup(pair.image_id, id_query, id_ray)


MAX_SAMPLE_ATTEMPTS = 32


def pair_pixel_sampler(dataset, batch_size: int, rng: np.random.Generator) -> list[PixelPair]:
    """Uniform pixel pairs on a uniformly chosen image, resampling slots whose
    pixels are unannotated (up to MAX_SAMPLE_ATTEMPTS, then the slot drops).
    """
    store = dataset.store
    image_ids = list(store.segmaps.keys())
    if not any(np.any(store.segmaps[i] != 0) for i in image_ids):
        raise DatasetError("no annotated pixels in any image")
    out: list[PixelPair] = []
    for _ in range(batch_size):
        for _ in range(MAX_SAMPLE_ATTEMPTS):
            image_id = image_ids[int(rng.integers(len(image_ids)))]
            seg = store.segmaps[image_id]
            h, w = seg.shape
            ua, va, ub, vb = (
                int(rng.integers(w)),
                int(rng.integers(h)),
                int(rng.integers(w)),
                int(rng.integers(h)),
            )
            id_ray = int(seg[va, ua])
            id_query = int(seg[vb, ub])
            if id_ray == 0 or id_query == 0:
                continue
            pair = PixelPair(
                image_id=image_id,
                ray_pixel=(ua, va),
                query_pixel=(ub, vb),
                id_ray=id_ray,
                id_query=id_query,
                target=store.lookup(image_id, id_query, id_ray),
                has_relation=store.has_relation(image_id, id_query, id_ray),
            )
            out.append(pair)
            break
    return out


@dataclass
class PairSupervision:
    """Resolved training tuple for one pair: a ray, a fixed query point, a target."""

    origin: np.ndarray
    direction: np.ndarray
    z: np.ndarray
    target: np.ndarray
    has_relation: bool
    key: tuple[int, int]  # (subject = query instance, object = ray instance)


def training_pair_to_supervision(
    pair: PixelPair,
    field: RelationField,
    store: RelationStore,
    camera: Camera,
    n_samples: int = 64,
    invert_direction: bool = False,
):
    """Resolve a pixel pair to (ray, z, target), or None when it must be skipped.

    z is the expected depth along the query pixel's ray (no hit -> skip).
    With invert_direction the ray/query roles swap and the lookup key order
    reverses accordingly.
    """
    ray_px, query_px = pair.ray_pixel, pair.query_pixel
    id_ray, id_query = pair.id_ray, pair.id_query
    if invert_direction:
        ray_px, query_px = query_px, ray_px
        id_ray, id_query = id_query, id_ray
    target = store.lookup(pair.image_id, id_query, id_ray)
    if target is None:
        return None
    origins, dirs = generate_rays(camera, np.array([ray_px, query_px], dtype=np.float64))
    depths, deltas = sample_depths_batch(camera.near, camera.far, 1, n_samples)
    pts = ray_points(origins[1:2], dirs[1:2], depths).reshape(-1, 3)
    inside = inside_bounds(field, pts)
    raw = eval_grid_masked(field, "density", pts, inside)[:, 0]
    sigma = np.where(inside, softplus(raw), 0.0).reshape(1, -1)
    weights, _ = kernels.composite_forward(sigma, deltas)
    z_depth = expected_depth(weights[0], depths[0])
    if z_depth is None:
        return None
    z = origins[1] + z_depth * dirs[1]
    return PairSupervision(
        origin=origins[0],
        direction=dirs[0],
        z=z,
        target=target,
        has_relation=store.has_relation(pair.image_id, id_query, id_ray),
        key=(id_query, id_ray),
    )


def render_relation(
    field: RelationField,
    origin: np.ndarray,
    direction: np.ndarray,
    z: np.ndarray,
    near: float,
    far: float,
    n_samples: int = 64,
    swap_args: bool = False,
):
    """Composite relation features along one ray against query point z.

    swap_args evaluates the fusion with (z, sample) argument order, answering
    the opposite query direction on the same field.
    """
    depths, deltas = sample_depths_batch(near, far, 1, n_samples)
    pts = ray_points(origin[None], direction[None], depths).reshape(-1, 3)
    inside = inside_bounds(field, pts)
    raw = eval_grid_masked(field, "density", pts, inside)[:, 0]
    sigma = np.where(inside, softplus(raw), 0.0).reshape(1, -1)
    weights, _ = kernels.composite_forward(sigma, deltas)
    feats = np.zeros((pts.shape[0], field.config.d_relation))
    if inside.any():
        zz = np.broadcast_to(np.asarray(z, dtype=np.float64), pts[inside].shape)
        a, b = (zz, pts[inside]) if swap_args else (pts[inside], zz)
        feats[inside] = field.relation_forward(a, b)
    return (weights.reshape(-1, 1) * feats).sum(axis=0)
