"""Analytic ray tracer for ground-truth RGB, depth, and instance id maps.

Nearest ray-sphere / ray-box / ray-floor hit per pixel with flat Lambertian
shading; background is white with instance id 0 and depth 0.
"""

from __future__ import annotations

import numpy as np

from .render import Camera, frame_pixels, generate_rays
from .scene import Box, Floor, SceneSpec, Sphere

AMBIENT = 0.25
BACKGROUND_RGB = (1.0, 1.0, 1.0)


def intersect_sphere(origins, dirs, sphere: Sphere):
    """Smallest positive hit distance per unit-direction ray, inf on miss."""
    oc = origins - np.asarray(sphere.center)
    b = np.einsum("rd,rd->r", oc, dirs)
    c = np.einsum("rd,rd->r", oc, oc) - sphere.radius**2
    disc = b * b - c
    t = np.full(origins.shape[0], np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t1 = -b - sq
    t2 = -b + sq
    cand = np.where(t1 > 1e-9, t1, np.where(t2 > 1e-9, t2, np.inf))
    t[ok] = cand[ok]
    return t


def _to_box_frame(origins, dirs, box: Box):
    c, s = np.cos(-box.rot_z), np.sin(-box.rot_z)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    o = (origins - np.asarray(box.center)) @ rot.T
    d = dirs @ rot.T
    return o, d


def intersect_box(origins, dirs, box: Box):
    """Slab test in the box frame; returns (t, local frame o, d) for normals."""
    o, d = _to_box_frame(origins, dirs, box)
    h = np.asarray(box.half_extents)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-h - o) * inv
        t2 = (h - o) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    parallel_miss = np.any((np.abs(d) < 1e-12) & (np.abs(o) > h), axis=1)
    hit = (tmax >= tmin) & (tmax > 1e-9) & ~parallel_miss
    t = np.where(hit, np.where(tmin > 1e-9, tmin, tmax), np.inf)
    return t, o, d


def intersect_floor(origins, dirs, floor: Floor):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origins[:, 2] / dirs[:, 2]
    x = origins[:, 0] + t * dirs[:, 0]
    y = origins[:, 1] + t * dirs[:, 1]
    ok = (np.abs(dirs[:, 2]) > 1e-12) & (t > 1e-9) & (np.abs(x) <= floor.extent) & (np.abs(y) <= floor.extent)
    return np.where(ok, t, np.inf)


def _box_normal(local_pt, box: Box):
    h = np.asarray(box.half_extents)
    ratios = np.abs(local_pt) / h
    axis = np.argmax(ratios, axis=1)
    n_local = np.zeros_like(local_pt)
    rows = np.arange(local_pt.shape[0])
    n_local[rows, axis] = np.sign(local_pt[rows, axis])
    c, s = np.cos(box.rot_z), np.sin(box.rot_z)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return n_local @ rot.T


def trace_scene(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """Nearest hit over all instances: (t, instance ids, normals, albedo)."""
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    ids = np.zeros(n, dtype=np.uint16)
    normals = np.zeros((n, 3))
    albedo = np.ones((n, 3))
    items = [(scene.floor.instance_id, scene.floor)] + [
        (p.instance_id, p) for p in scene.primitives
    ]
    for inst_id, prim in items:
        if isinstance(prim, Floor):
            t = intersect_floor(origins, dirs, prim)
            n_hit = np.broadcast_to(np.array([0.0, 0.0, 1.0]), (n, 3))
        elif isinstance(prim, Sphere):
            t = intersect_sphere(origins, dirs, prim)
            pts = origins + t[:, None] * dirs
            n_hit = (pts - np.asarray(prim.center)) / prim.radius
        else:
            t, o_loc, d_loc = intersect_box(origins, dirs, prim)
            local_pts = o_loc + np.where(np.isfinite(t), t, 0.0)[:, None] * d_loc
            n_hit = _box_normal(local_pts, prim)
        closer = t < best_t
        best_t[closer] = t[closer]
        ids[closer] = inst_id
        normals[closer] = n_hit[closer]
        albedo[closer] = np.asarray(prim.albedo)
    return best_t, ids, normals, albedo


def shade(normals, albedo, light_dir):
    l = np.asarray(light_dir, dtype=np.float64)
    l = l / np.linalg.norm(l)
    lam = np.clip(normals @ l, 0.0, None)
    return np.clip(albedo * (AMBIENT + (1.0 - AMBIENT) * lam)[:, None], 0.0, 1.0)


def render_ground_truth(scene: SceneSpec, camera: Camera):
    """Per-pixel RGB in [0,1], hit-distance depth (0 at background), instance ids."""
    pixels = frame_pixels(camera.width, camera.height)
    origins, dirs = generate_rays(camera, pixels)
    t, ids, normals, albedo = trace_scene(scene, origins, dirs)
    hit = np.isfinite(t)
    rgb = np.tile(np.asarray(BACKGROUND_RGB), (origins.shape[0], 1))
    rgb[hit] = shade(normals[hit], albedo[hit], scene.light_dir)
    h, w = camera.height, camera.width
    return (
        rgb.reshape(h, w, 3),
        np.where(hit, t, 0.0).reshape(h, w),
        ids.reshape(h, w),
    )


def render_ground_truth_all(scene: SceneSpec, cameras):
    return {cam.cam_id: render_ground_truth(scene, cam) for cam in cameras}


# -- analytic point utilities (used by evaluation oracles) -------------------


def signed_distance(scene: SceneSpec, pts: np.ndarray) -> np.ndarray:
    """Distance to the nearest instance surface (floor included), per point."""
    d = np.full(pts.shape[0], np.inf)
    for prim in scene.primitives:
        if isinstance(prim, Sphere):
            dist = np.abs(np.linalg.norm(pts - np.asarray(prim.center), axis=1) - prim.radius)
        else:
            o, _ = _to_box_frame(pts, pts, prim)
            h = np.asarray(prim.half_extents)
            q = np.abs(o) - h
            outside = np.linalg.norm(np.clip(q, 0.0, None), axis=1)
            inside = np.clip(q.max(axis=1), None, 0.0)
            dist = np.abs(outside + inside)
        d = np.minimum(d, dist)
    in_floor = (np.abs(pts[:, 0]) <= scene.floor.extent) & (np.abs(pts[:, 1]) <= scene.floor.extent)
    floor_d = np.where(in_floor, np.abs(pts[:, 2]), np.inf)
    return np.minimum(d, floor_d)


def nearest_instance(scene: SceneSpec, pts: np.ndarray) -> np.ndarray:
    """Instance id of the nearest surface per point (floor included)."""
    best = np.full(pts.shape[0], np.inf)
    ids = np.zeros(pts.shape[0], dtype=np.uint16)
    for prim in scene.primitives:
        if isinstance(prim, Sphere):
            dist = np.abs(np.linalg.norm(pts - np.asarray(prim.center), axis=1) - prim.radius)
        else:
            o, _ = _to_box_frame(pts, pts, prim)
            h = np.asarray(prim.half_extents)
            q = np.abs(o) - h
            outside = np.linalg.norm(np.clip(q, 0.0, None), axis=1)
            inside = np.clip(q.max(axis=1), None, 0.0)
            dist = np.abs(outside + inside)
        closer = dist < best
        best[closer] = dist[closer]
        ids[closer] = prim.instance_id
    in_floor = (np.abs(pts[:, 0]) <= scene.floor.extent) & (np.abs(pts[:, 1]) <= scene.floor.extent)
    floor_d = np.where(in_floor, np.abs(pts[:, 2]), np.inf)
    closer = floor_d < best
    ids[closer] = scene.floor.instance_id
    return ids


def surface_point_cloud(scene: SceneSpec, points_per_instance: int, seed: int = 0):
    """Uniform-ish samples on every instance surface with their instance ids."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    pts, ids = [], []
    for prim in scene.primitives:
        if isinstance(prim, Sphere):
            v = rng.normal(size=(points_per_instance, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            pts.append(np.asarray(prim.center) + prim.radius * v)
        else:
            h = np.asarray(prim.half_extents)
            areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
            face = rng.choice(6, size=points_per_instance, p=areas / areas.sum())
            uv = rng.uniform(-1.0, 1.0, size=(points_per_instance, 2))
            local = np.empty((points_per_instance, 3))
            axis = face // 2
            sign = np.where(face % 2 == 0, 1.0, -1.0)
            for i in range(points_per_instance):
                a = axis[i]
                rest = [j for j in range(3) if j != a]
                local[i, a] = sign[i] * h[a]
                local[i, rest[0]] = uv[i, 0] * h[rest[0]]
                local[i, rest[1]] = uv[i, 1] * h[rest[1]]
            c, s = np.cos(prim.rot_z), np.sin(prim.rot_z)
            rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            pts.append(local @ rot.T + np.asarray(prim.center))
        ids.append(np.full(points_per_instance, prim.instance_id, dtype=np.uint16))
    # floor sampled on its square, denser toward nothing in particular
    fl = scene.floor
    xy = rng.uniform(-fl.extent, fl.extent, size=(points_per_instance, 2))
    pts.append(np.column_stack([xy, np.zeros(points_per_instance)]))
    ids.append(np.full(points_per_instance, fl.instance_id, dtype=np.uint16))
    return np.concatenate(pts), np.concatenate(ids)
