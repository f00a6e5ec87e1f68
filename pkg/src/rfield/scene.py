"""Synthetic scenes with analytic ground truth and geometric relation rules.

Scenes are spheres and boxes resting on a finite floor in a z-up world.
`annotate_relations` plays the role of the multi-modal-LLM relationship
oracle: deterministic geometric predicate rules over all ordered pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .embeddings import INVERSE_PREDICATE, SYMMETRIC_PREDICATES

CONTACT_FRACTION = 0.01  # epsilon_c as a fraction of scene extent
PROXIMITY_FACTOR = 1.5  # kappa for "next to"
ALBEDO_TOLERANCE = 0.05  # delta_c for "same as"
SIZE_TOLERANCE = 0.10

FLOOR_ID = 1


@dataclass
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]
    instance_id: int = 0
    cls: str = "sphere"

    @property
    def bottom(self) -> float:
        return self.center[2] - self.radius

    @property
    def top(self) -> float:
        return self.center[2] + self.radius

    @property
    def footprint_radius(self) -> float:
        return self.radius

    def aabb(self):
        c, r = np.asarray(self.center), self.radius
        return c - r, c + r


@dataclass
class Box:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    rot_z: float
    albedo: tuple[float, float, float]
    instance_id: int = 0
    cls: str = "box"

    @property
    def bottom(self) -> float:
        return self.center[2] - self.half_extents[2]

    @property
    def top(self) -> float:
        return self.center[2] + self.half_extents[2]

    @property
    def footprint_radius(self) -> float:
        return float(np.hypot(self.half_extents[0], self.half_extents[1]))

    def footprint_corners(self) -> np.ndarray:
        hx, hy = self.half_extents[0], self.half_extents[1]
        local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
        c, s = np.cos(self.rot_z), np.sin(self.rot_z)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(self.center[:2])

    def aabb(self):
        corners = self.footprint_corners()
        lo = np.array([corners[:, 0].min(), corners[:, 1].min(), self.bottom])
        hi = np.array([corners[:, 0].max(), corners[:, 1].max(), self.top])
        return lo, hi


@dataclass
class Floor:
    extent: float = 1.8
    albedo: tuple[float, float, float] = (0.55, 0.55, 0.55)
    instance_id: int = FLOOR_ID
    cls: str = "floor"

    @property
    def top(self) -> float:
        return 0.0


@dataclass
class SceneSpec:
    primitives: list
    floor: Floor = dc_field(default_factory=Floor)
    light_dir: tuple[float, float, float] = (0.35, 0.25, 0.9)
    bounds_lo: tuple[float, float, float] = (-2.0, -2.0, -0.5)
    bounds_hi: tuple[float, float, float] = (2.0, 2.0, 2.5)
    part_of: list = dc_field(default_factory=list)  # declared (part_id, whole_id) pairs
    seed: int = 0

    @property
    def extent(self) -> float:
        return float(np.max(np.asarray(self.bounds_hi) - np.asarray(self.bounds_lo)))

    @property
    def contact_tol(self) -> float:
        return CONTACT_FRACTION * self.extent

    def instances(self):
        """All annotated instances including the floor, id order."""
        return sorted([self.floor] + list(self.primitives), key=lambda p: p.instance_id)

    def by_id(self, instance_id: int):
        for p in self.instances():
            if p.instance_id == instance_id:
                return p
        raise KeyError(f"no instance with id {instance_id}")

    def to_dict(self):
        prims = []
        for p in self.primitives:
            if isinstance(p, Sphere):
                prims.append(
                    {"type": "sphere", "center": list(p.center), "radius": p.radius,
                     "albedo": list(p.albedo), "instance_id": p.instance_id}
                )
            else:
                prims.append(
                    {"type": "box", "center": list(p.center), "half_extents": list(p.half_extents),
                     "rot_z": p.rot_z, "albedo": list(p.albedo), "instance_id": p.instance_id}
                )
        return {
            "primitives": prims,
            "floor": {"extent": self.floor.extent, "albedo": list(self.floor.albedo),
                      "instance_id": self.floor.instance_id},
            "light_dir": list(self.light_dir),
            "bounds_lo": list(self.bounds_lo),
            "bounds_hi": list(self.bounds_hi),
            "part_of": [list(p) for p in self.part_of],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        prims = []
        for p in d["primitives"]:
            if p["type"] == "sphere":
                prims.append(Sphere(tuple(p["center"]), p["radius"], tuple(p["albedo"]),
                                    p["instance_id"]))
            elif p["type"] == "box":
                prims.append(Box(tuple(p["center"]), tuple(p["half_extents"]), p["rot_z"],
                                 tuple(p["albedo"]), p["instance_id"]))
            else:
                raise ValueError(f"unknown primitive type {p['type']!r}")
        fd = d["floor"]
        return cls(
            primitives=prims,
            floor=Floor(fd["extent"], tuple(fd["albedo"]), fd["instance_id"]),
            light_dir=tuple(d["light_dir"]),
            bounds_lo=tuple(d["bounds_lo"]),
            bounds_hi=tuple(d["bounds_hi"]),
            part_of=[tuple(p) for p in d.get("part_of", [])],
            seed=d.get("seed", 0),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class GroundTruthGraph:
    nodes: list[dict]  # {"id": int, "class": str}
    edges: list[dict]  # {"subject": int, "object": int, "predicate": str}

    def edge_set(self):
        return {(e["subject"], e["object"], e["predicate"]) for e in self.edges}

    def pair_predicates(self):
        """(subject, object) -> sorted list of predicate phrases."""
        out: dict[tuple[int, int], list[str]] = {}
        for e in self.edges:
            out.setdefault((e["subject"], e["object"]), []).append(e["predicate"])
        return {k: sorted(v) for k, v in out.items()}

    def to_dict(self):
        return {"nodes": self.nodes, "edges": self.edges}

    @classmethod
    def from_dict(cls, d):
        return cls(nodes=d["nodes"], edges=d["edges"])


# -- footprint geometry ------------------------------------------------------


def _footprint_overlap(a, b) -> bool:
    """True when the vertical projections of a and b intersect."""
    if isinstance(a, Floor) or isinstance(b, Floor):
        obj = b if isinstance(a, Floor) else a
        fl = a if isinstance(a, Floor) else b
        square = Box((0.0, 0.0, 0.0), (fl.extent, fl.extent, 1.0), 0.0, (0, 0, 0))
        return _footprint_overlap(obj, square)
    if isinstance(a, Sphere) and isinstance(b, Sphere):
        d = np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
        return bool(d < a.radius + b.radius)
    if isinstance(a, Sphere) and isinstance(b, Box):
        return _disc_rect_overlap(a, b)
    if isinstance(a, Box) and isinstance(b, Sphere):
        return _disc_rect_overlap(b, a)
    return _rect_rect_overlap(a, b)


def _disc_rect_overlap(sph: Sphere, box: Box) -> bool:
    c, s = np.cos(-box.rot_z), np.sin(-box.rot_z)
    dx = sph.center[0] - box.center[0]
    dy = sph.center[1] - box.center[1]
    local = np.array([c * dx - s * dy, s * dx + c * dy])
    h = np.asarray(box.half_extents[:2])
    closest = np.clip(local, -h, h)
    return bool(np.linalg.norm(local - closest) < sph.radius)


def _rect_rect_overlap(a: Box, b: Box) -> bool:
    """Separating axis test over both rectangles' edge normals."""
    ca, cb = a.footprint_corners(), b.footprint_corners()
    for rect in (a, b):
        for angle in (rect.rot_z, rect.rot_z + np.pi / 2.0):
            axis = np.array([np.cos(angle), np.sin(angle)])
            pa, pb = ca @ axis, cb @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True


def _horizontal_center_distance(a, b) -> float:
    return float(np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]))


def _z_intervals_overlap(a, b) -> bool:
    return a.bottom < b.top and b.bottom < a.top


def _same_size(a, b) -> bool:
    if isinstance(a, Sphere):
        big = max(a.radius, b.radius)
        return abs(a.radius - b.radius) <= SIZE_TOLERANCE * big
    ha, hb = sorted(a.half_extents), sorted(b.half_extents)
    return all(abs(x - y) <= SIZE_TOLERANCE * max(x, y) for x, y in zip(ha, hb))


def _same_albedo(a, b) -> bool:
    return all(abs(x - y) <= ALBEDO_TOLERANCE for x, y in zip(a.albedo, b.albedo))


def _aabb_inside(a, b) -> bool:
    lo_a, hi_a = a.aabb()
    lo_b, hi_b = b.aabb()
    return bool(np.all(lo_a > lo_b) and np.all(hi_a < hi_b))


# -- the relation annotator (LLM-oracle substitute) --------------------------


def annotate_relations(scene: SceneSpec) -> GroundTruthGraph:
    """Deterministic geometric predicate rules over all ordered instance pairs.

    standing on: vertical gap below the contact tolerance with overlapping
    footprints; above/below: separation beyond it; next to: centers within
    PROXIMITY_FACTOR * (size_a + size_b) at overlapping heights; same as:
    same primitive type, albedo and size within tolerance; inside: strict
    bounding-box containment; part of: declared in the spec only. Every
    edge's inverse-predicate edge is emitted as well.
    """
    eps = scene.contact_tol
    nodes = [{"id": p.instance_id, "class": p.cls} for p in scene.instances()]
    edges: list[tuple[int, int, str]] = []

    def add(subj, obj, pred):
        edges.append((subj, obj, pred))
        inv = INVERSE_PREDICATE[pred]
        if (obj, subj, inv) not in edges:
            edges.append((obj, subj, inv))

    prims = list(scene.primitives)
    for a in prims:
        # relations with the floor: support only
        gap = a.bottom - scene.floor.top
        if _footprint_overlap(a, scene.floor):
            if abs(gap) < eps:
                add(a.instance_id, scene.floor.instance_id, "standing on")
            elif gap > eps:
                add(a.instance_id, scene.floor.instance_id, "above")
        for b in prims:
            if a.instance_id == b.instance_id:
                continue
            gap = a.bottom - b.top
            if _footprint_overlap(a, b):
                if abs(gap) < eps:
                    add(a.instance_id, b.instance_id, "standing on")
                elif gap > eps:
                    add(a.instance_id, b.instance_id, "above")
            if a.instance_id < b.instance_id:
                sizes = a.footprint_radius + b.footprint_radius
                if (
                    _horizontal_center_distance(a, b) < PROXIMITY_FACTOR * sizes
                    and _z_intervals_overlap(a, b)
                ):
                    add(a.instance_id, b.instance_id, "next to")
                if type(a) is type(b) and _same_albedo(a, b) and _same_size(a, b):
                    add(a.instance_id, b.instance_id, "same as")
            if _aabb_inside(a, b):
                add(a.instance_id, b.instance_id, "inside")
    for part, whole in scene.part_of:
        add(part, whole, "part of")

    seen = set()
    uniq = []
    for subj, obj, pred in edges:
        if (subj, obj, pred) not in seen:
            seen.add((subj, obj, pred))
            uniq.append({"subject": subj, "object": obj, "predicate": pred})
    return GroundTruthGraph(nodes=nodes, edges=uniq)


# -- scene generation --------------------------------------------------------


def _volumes_overlap(a, b) -> bool:
    if isinstance(a, Sphere) and isinstance(b, Sphere):
        d = np.linalg.norm(np.asarray(a.center) - np.asarray(b.center))
        return bool(d < a.radius + b.radius)
    if isinstance(a, Sphere) or isinstance(b, Sphere):
        sph, box = (a, b) if isinstance(a, Sphere) else (b, a)
        lo, hi = box.aabb()  # rot-z boxes fall back to their AABB here
        closest = np.clip(np.asarray(sph.center), lo, hi)
        return bool(np.linalg.norm(closest - np.asarray(sph.center)) < sph.radius)
    lo_a, hi_a = a.aabb()
    lo_b, hi_b = b.aabb()
    return bool(np.all(lo_a < hi_b) and np.all(lo_b < hi_a))


def _primitive_overlaps(p, others) -> bool:
    return any(_volumes_overlap(p, q) for q in others)


def validate_scene(scene: SceneSpec) -> None:
    lo = np.asarray(scene.bounds_lo)
    hi = np.asarray(scene.bounds_hi)
    ids = [p.instance_id for p in scene.instances()]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate instance ids")
    for p in scene.primitives:
        plo, phi = p.aabb()
        if np.any(plo < lo) or np.any(phi > hi):
            raise ValueError(f"primitive id={p.instance_id} outside scene bounds")
        if isinstance(p, Sphere) and p.radius <= 0:
            raise ValueError("sphere radius must be positive")
        if isinstance(p, Box) and any(h <= 0 for h in p.half_extents):
            raise ValueError("box half extents must be positive")
    for i, p in enumerate(scene.primitives):
        rest = [q for j, q in enumerate(scene.primitives) if j != i and not _is_stacked(p, q, scene)]
        if _primitive_overlaps(p, rest):
            raise ValueError(f"primitive id={p.instance_id} overlaps another primitive")


def _is_stacked(a, b, scene) -> bool:
    return abs(a.bottom - b.top) < scene.contact_tol or abs(b.bottom - a.top) < scene.contact_tol


def generate_scene(
    n_objects: int = 2,
    seed: int = 0,
    spec: SceneSpec | None = None,
    p_stack: float = 0.45,
    p_duplicate: float = 0.3,
) -> tuple[SceneSpec, GroundTruthGraph]:
    """Explicit mode validates the given spec; random mode places objects on
    the floor or stacked on boxes, duplicating some primitives to create
    "same as" pairs. Deterministic under seed either way.
    """
    if spec is not None:
        validate_scene(spec)
        return spec, annotate_relations(spec)
    if n_objects < 1:
        raise ValueError("need at least one object")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    scene = SceneSpec(primitives=[], seed=seed)
    next_id = FLOOR_ID + 1
    place_r = scene.floor.extent - 0.55
    for i in range(n_objects):
        placed = None
        for _ in range(200):
            dup_src = None
            if i > 0 and rng.uniform() < p_duplicate:
                dup_src = scene.primitives[int(rng.integers(len(scene.primitives)))]
            if dup_src is not None:
                kind = "sphere" if isinstance(dup_src, Sphere) else "box"
                albedo = dup_src.albedo
            else:
                kind = "sphere" if rng.uniform() < 0.5 else "box"
                albedo = tuple(np.round(rng.uniform(0.15, 0.9, size=3), 3))
            boxes = [p for p in scene.primitives if isinstance(p, Box)]
            stack_on = None
            if boxes and rng.uniform() < p_stack:
                stack_on = boxes[int(rng.integers(len(boxes)))]
            if kind == "sphere":
                r = dup_src.radius if isinstance(dup_src, Sphere) else float(np.round(rng.uniform(0.25, 0.42), 3))
                if stack_on is not None and min(stack_on.half_extents[:2]) > 0.6 * r:
                    cx = stack_on.center[0] + rng.uniform(-0.2, 0.2) * stack_on.half_extents[0]
                    cy = stack_on.center[1] + rng.uniform(-0.2, 0.2) * stack_on.half_extents[1]
                    cz = stack_on.top + r
                else:
                    stack_on = None
                    cx, cy = rng.uniform(-place_r, place_r, size=2)
                    cz = r
                cand = Sphere((round(cx, 3), round(cy, 3), round(cz, 3)), r, albedo, next_id)
            else:
                if isinstance(dup_src, Box):
                    hx, hy, hz = dup_src.half_extents
                else:
                    hx, hy, hz = (float(np.round(rng.uniform(0.25, 0.45), 3)) for _ in range(3))
                if stack_on is not None and stack_on.half_extents[0] > 0.7 * hx and stack_on.half_extents[1] > 0.7 * hy:
                    cx = stack_on.center[0] + rng.uniform(-0.15, 0.15) * stack_on.half_extents[0]
                    cy = stack_on.center[1] + rng.uniform(-0.15, 0.15) * stack_on.half_extents[1]
                    cz = stack_on.top + hz
                else:
                    stack_on = None
                    cx, cy = rng.uniform(-place_r, place_r, size=2)
                    cz = hz
                cand = Box((round(cx, 3), round(cy, 3), round(cz, 3)), (hx, hy, hz), 0.0, albedo, next_id)
            others = [p for p in scene.primitives if p is not stack_on]
            lo, hi = cand.aabb()
            if np.any(lo < np.asarray(scene.bounds_lo)) or np.any(hi > np.asarray(scene.bounds_hi)):
                continue
            if not _primitive_overlaps(cand, others):
                placed = cand
                break
        if placed is None:
            raise RuntimeError(f"could not place object {i} without overlap")
        scene.primitives.append(placed)
        next_id += 1
    return scene, annotate_relations(scene)
