"""Open-vocabulary object and relationship querying over a trained field.

Relationship responses use the pairwise-softmax relevancy score against the
canonical phrases ("and", "next to", "none"): the minimum over canonicals of
sigmoid(q.r - c.r) on the unit-normalized relation feature. Object scores are
cosines mapped affinely from [-1, 1] to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .embeddings import CANONICAL_PHRASES, EmbeddingTable
from .errors import UnknownPhraseError
from .field import RelationField, softplus
from .render import (
    Camera,
    expected_depth,
    eval_grid_masked,
    frame_pixels,
    generate_ray,
    generate_rays,
    inside_bounds,
    ray_points,
    sample_depths_batch,
)


@dataclass
class RelevancyConfig:
    """Canonical phrases competing against the query in the relevancy softmax."""

    phrases: tuple[str, ...]
    embeddings: np.ndarray  # (n_canon, D), unit rows

    @classmethod
    def from_table(cls, table: EmbeddingTable, phrases=CANONICAL_PHRASES):
        phrases = tuple(phrases)
        if not phrases:
            raise ValueError("need at least one canonical phrase")
        return cls(phrases=phrases, embeddings=np.stack([table.embedding(p) for p in phrases]))


@dataclass
class QueryResult:
    """Per-pixel or per-point scores in [0,1] plus the query metadata."""

    scores: np.ndarray
    text: str
    click: tuple[int, int] | None = None
    direction: str = "subject"
    no_hit: bool = False
    z: np.ndarray | None = None


def relevancy(r: np.ndarray, query_emb: np.ndarray, canon: RelevancyConfig) -> float:
    """Relationship response for one relation feature (normalized before scoring)."""
    return float(relevancy_batch(np.atleast_2d(r), query_emb, canon)[0])


def relevancy_batch(r: np.ndarray, query_emb: np.ndarray, canon: RelevancyConfig) -> np.ndarray:
    norms = np.linalg.norm(r, axis=1)
    ok = norms > 1e-12
    r_hat = r / np.where(ok, norms, 1.0)[:, None]
    dq = r_hat @ query_emb
    dc = r_hat @ canon.embeddings.T  # (N, n_canon)
    rho = _sigmoid(dq[:, None] - dc).min(axis=1)
    return np.where(ok, rho, 0.0)


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def resolve_query_embedding(table: EmbeddingTable, text: str | None, embedding=None) -> np.ndarray:
    if embedding is not None:
        e = np.asarray(embedding, dtype=np.float64)
        return e / np.linalg.norm(e)
    if text is None or text not in table:
        raise UnknownPhraseError(text, table.phrases)
    return table.embedding(text)


def cosine_to_score(cos: np.ndarray) -> np.ndarray:
    return 0.5 * (cos + 1.0)


def _normalized(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(feats, axis=-1, keepdims=True)
    ok = norms[..., 0] > 1e-12
    return np.where(ok[..., None], feats / np.where(norms > 1e-12, norms, 1.0), 0.0), ok


def query_object(
    field: RelationField,
    query_emb: np.ndarray,
    camera: Camera | None = None,
    points: np.ndarray | None = None,
    n_samples: int = 64,
) -> np.ndarray:
    """Cosine of the (rendered or point) semantic feature with the query,
    mapped to [0,1]; zero-norm features score 0.5 (cosine treated as 0)."""
    if (camera is None) == (points is None):
        raise ValueError("pass exactly one of camera or points")
    if points is not None:
        feats = field.grids["semantic"].sample(points)
    else:
        feats = _render_feature_frame(field, camera, "semantic", n_samples)
    flat = feats.reshape(-1, feats.shape[-1])
    f_hat, _ = _normalized(flat)
    scores = cosine_to_score(f_hat @ query_emb)
    return scores.reshape(feats.shape[:-1])


def _render_feature_frame(field, camera, head, n_samples):
    from .render import render_frame

    return render_frame(field, camera, heads=(head,), n_samples=n_samples)[head]


def click_to_query(field: RelationField, camera: Camera, pixel, n_samples: int = 64):
    """Expected-depth surface point under a clicked pixel, or None on no-hit."""
    origin, direction = generate_ray(camera, pixel)
    depths, deltas = sample_depths_batch(camera.near, camera.far, 1, n_samples)
    pts = ray_points(origin[None], direction[None], depths).reshape(-1, 3)
    inside = inside_bounds(field, pts)
    raw = eval_grid_masked(field, "density", pts, inside)[:, 0]
    sigma = np.where(inside, softplus(raw), 0.0).reshape(1, -1)
    weights, _ = kernels.composite_forward(sigma, deltas)
    z_depth = expected_depth(weights[0], depths[0])
    if z_depth is None:
        return None
    return origin + z_depth * direction


def relation_feature_frame(
    field: RelationField,
    camera: Camera,
    z: np.ndarray,
    n_samples: int = 64,
    swap_args: bool = False,
) -> np.ndarray:
    """Composited relation feature of every pixel's ray against query point z."""
    pixels = frame_pixels(camera.width, camera.height)
    origins, dirs = generate_rays(camera, pixels)
    n_rays = origins.shape[0]
    depths, deltas = sample_depths_batch(camera.near, camera.far, n_rays, n_samples)
    pts = ray_points(origins, dirs, depths).reshape(-1, 3)
    inside = inside_bounds(field, pts)
    raw = eval_grid_masked(field, "density", pts, inside)[:, 0]
    sigma = np.where(inside, softplus(raw), 0.0).reshape(n_rays, n_samples)
    weights, _ = kernels.composite_forward(sigma, deltas)
    feats = np.zeros((pts.shape[0], field.config.d_relation))
    if inside.any():
        zz = np.broadcast_to(np.asarray(z, dtype=np.float64), pts[inside].shape)
        a, b = (zz, pts[inside]) if swap_args else (pts[inside], zz)
        feats[inside] = field.relation_forward(a, b)
    feats3 = feats.reshape(n_rays, n_samples, -1)
    out = np.einsum("rk,rkc->rc", weights, feats3)
    return out.reshape(camera.height, camera.width, -1)


def query_relation(
    field: RelationField,
    z: np.ndarray,
    query_emb: np.ndarray,
    canon: RelevancyConfig,
    camera: Camera | None = None,
    points: np.ndarray | None = None,
    direction: str = "subject",
    n_samples: int = 64,
    text: str = "",
) -> QueryResult:
    """Relevancy map of a relationship query against the clicked point z.

    direction="subject" means the click selects the subject (rays answer
    "what is <click> <predicate>?"); "object" swaps the argument order.
    """
    if direction not in ("subject", "object"):
        raise ValueError("direction must be 'subject' or 'object'")
    swap = direction == "object"
    if (camera is None) == (points is None):
        raise ValueError("pass exactly one of camera or points")
    if points is not None:
        zz = np.broadcast_to(np.asarray(z, dtype=np.float64), points.shape)
        a, b = (zz, points) if swap else (points, zz)
        feats = field.relation_forward(a, b)
        scores = relevancy_batch(feats, query_emb, canon)
    else:
        feats = relation_feature_frame(field, camera, z, n_samples, swap_args=swap)
        flat = feats.reshape(-1, feats.shape[-1])
        scores = relevancy_batch(flat, query_emb, canon).reshape(camera.height, camera.width)
    return QueryResult(scores=scores, text=text, direction=direction, z=np.asarray(z))


def top_fraction_mask(scores: np.ndarray, fraction: float) -> np.ndarray:
    """Mask of the top `fraction` of scores; ties at the threshold included."""
    if not (0 < fraction <= 1):
        raise ValueError("fraction must be in (0, 1]")
    flat = np.sort(scores.reshape(-1))
    k = int(np.ceil(fraction * flat.size))
    threshold = flat[flat.size - k]
    return scores >= threshold


# -- heatmap export -------------------------------------------------------------


def score_colormap(scores: np.ndarray) -> np.ndarray:
    """Fixed viridis color map over [0,1] scores, uint8 RGB."""
    import matplotlib

    cmap = matplotlib.colormaps["viridis"]
    rgba = cmap(np.clip(scores, 0.0, 1.0))
    return np.round(rgba[..., :3] * 255.0).astype(np.uint8)


def export_heatmap(path_prefix: str, result: QueryResult, extra_meta: dict | None = None) -> None:
    """<prefix>.png (colormapped), <prefix>.bin (float32 plane), <prefix>.json."""
    import json

    from PIL import Image

    from .dataset import save_planes

    Image.fromarray(score_colormap(result.scores), mode="RGB").save(path_prefix + ".png")
    save_planes(path_prefix + ".bin", result.scores.astype(np.float32))
    record = {
        "text": result.text,
        "click": list(result.click) if result.click is not None else None,
        "direction": result.direction,
        "no_hit": result.no_hit,
        "stats": {
            "min": float(result.scores.min()),
            "max": float(result.scores.max()),
            "mean": float(result.scores.mean()),
        },
    }
    if extra_meta:
        record.update(extra_meta)
    with open(path_prefix + ".json", "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")
