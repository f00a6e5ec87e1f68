"""Dataset generation and I/O.

Directory layout: cameras.json, rgb/<id>.png, segmap/<id>.png (16-bit),
depth/<id>.bin and semfeat/<id>.bin (float32 planes with a JSON header),
relations/<id>.json, vocab.bin, graph_gt.json, scene.json (synthetic only),
manifest.json with schema version and per-file sha256 checksums. Externally
produced features (real SAM masks, LLM relation JSON, encoder vectors) drop
into the same schema.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .embeddings import (
    CANONICAL_PHRASES,
    EmbeddingTable,
    OBJECT_CLASSES,
    PREDICATES,
    default_table,
    load_vocab,
    save_vocab,
)
from .errors import ChecksumError, DatasetError, SchemaVersionError
from .gtrender import render_ground_truth
from .relation import RelationStore
from .render import Camera, load_cameras, make_orbit_cameras, save_cameras, generate_rays
from .scene import GroundTruthGraph, SceneSpec, generate_scene

SCHEMA_VERSION = 1


@dataclass
class ImageRecord:
    image_id: str
    rgb: np.ndarray  # (H,W,3) float64 in [0,1], quantized to the stored uint8
    depth: np.ndarray  # (H,W) float32, 0 at background
    segmap: np.ndarray  # (H,W) uint16, 0 = unannotated
    semfeat: np.ndarray  # (H,W,D) float32
    relations: list  # [{"subject_id","object_id","phrases":[...]}]


@dataclass
class SceneDataset:
    cameras: list[Camera]
    images: dict[str, ImageRecord]
    table: EmbeddingTable
    graph: GroundTruthGraph
    splits: dict[str, list[str]]
    vocab_roles: dict[str, list[str]]
    scene: SceneSpec | None = None
    store: RelationStore = None

    def __post_init__(self):
        if self.store is None:
            self.store = RelationStore(self.table)
            for image_id, rec in self.images.items():
                self.store.add_image(image_id, rec.segmap, rec.relations)
        self._camera_map = {c.cam_id: c for c in self.cameras}

    def camera(self, cam_id: str) -> Camera:
        try:
            return self._camera_map[cam_id]
        except KeyError:
            raise KeyError(f"no camera {cam_id!r}") from None

    @property
    def train_ids(self) -> list[str]:
        return self.splits["train"]

    @property
    def val_ids(self) -> list[str]:
        return self.splits["val"]

    def class_of_instance(self) -> dict[int, str]:
        return {n["id"]: n["class"] for n in self.graph.nodes}


def semantic_feature_maps(
    segmap: np.ndarray,
    table: EmbeddingTable,
    class_of_id: dict[int, str],
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-pixel class embedding (background phrase for id 0), optionally
    perturbed by Gaussian noise and re-normalized."""
    h, w = segmap.shape
    feat = np.empty((h, w, table.dim), dtype=np.float64)
    for inst_id in np.unique(segmap):
        inst_id = int(inst_id)
        if inst_id == 0:
            phrase = "background"
        elif inst_id in class_of_id:
            phrase = class_of_id[inst_id]
        else:
            raise DatasetError(f"segmentation id {inst_id} has no class in the graph")
        feat[segmap == inst_id] = table.embedding(phrase)
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noise needs an rng")
        feat = feat + rng.normal(0.0, noise_sigma, size=feat.shape)
        feat /= np.linalg.norm(feat, axis=2, keepdims=True)
    return feat.astype(np.float32)


def visible_relations(graph: GroundTruthGraph, segmap: np.ndarray) -> list:
    """GT edges restricted to id pairs both visible in this image, grouped by pair."""
    visible = set(int(i) for i in np.unique(segmap)) - {0}
    out = []
    for (s, o), phrases in sorted(graph.pair_predicates().items()):
        if s in visible and o in visible:
            out.append({"subject_id": s, "object_id": o, "phrases": phrases})
    return out


def generate_dataset(
    scene: SceneSpec | None = None,
    n_objects: int = 2,
    seed: int = 0,
    n_cameras: int = 22,
    n_val: int = 2,
    image_size: int = 64,
    noise_sigma: float = 0.0,
    embed_dim: int = 16,
    focal: float | None = None,
) -> SceneDataset:
    """Render a synthetic scene into a full training dataset, deterministically."""
    scene, graph = generate_scene(n_objects=n_objects, seed=seed, spec=scene)
    table = default_table(dim=embed_dim, seed=seed)
    cameras = make_orbit_cameras(
        n_cameras,
        center=(0.0, 0.0, 0.55),
        radius=3.3,
        height=2.4,
        width=image_size,
        image_height=image_size,
        focal=focal if focal is not None else 1.1 * image_size,
        near=1.0,
        far=6.5,
    )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFEA7]))
    class_of_id = {n["id"]: n["class"] for n in graph.nodes}
    images: dict[str, ImageRecord] = {}
    for cam in cameras:
        rgb, depth, seg = render_ground_truth(scene, cam)
        rgb_u8 = np.round(rgb * 255.0).astype(np.uint8)
        images[cam.cam_id] = ImageRecord(
            image_id=cam.cam_id,
            rgb=rgb_u8.astype(np.float64) / 255.0,
            depth=depth.astype(np.float32),
            segmap=seg,
            semfeat=semantic_feature_maps(seg, table, class_of_id, noise_sigma, rng),
            relations=visible_relations(graph, seg),
        )
    ids = [c.cam_id for c in cameras]
    splits = {"train": ids[: len(ids) - n_val], "val": ids[len(ids) - n_val :]}
    roles = {
        "classes": list(OBJECT_CLASSES),
        "predicates": list(PREDICATES),
        "canonicals": list(CANONICAL_PHRASES),
    }
    return SceneDataset(
        cameras=cameras,
        images=images,
        table=table,
        graph=graph,
        splits=splits,
        vocab_roles=roles,
        scene=scene,
    )


# -- float32 plane files ------------------------------------------------------


def save_planes(path, array: np.ndarray) -> None:
    """u32 header length, JSON header {dtype, shape}, then raw float32 LE."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = json.dumps({"dtype": "<f4", "shape": list(arr.shape)}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(arr.tobytes())


def load_planes(path) -> np.ndarray:
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        shape = tuple(header["shape"])
        n = int(np.prod(shape))
        raw = f.read(n * 4)
        if len(raw) != n * 4:
            raise ChecksumError(f"{path}: truncated float plane")
        return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def _save_png16(path, arr: np.ndarray) -> None:
    Image.fromarray(arr.astype("<u2"), mode="I;16").save(path)


def _load_png16(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint16)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def save_dataset(ds: SceneDataset, path) -> None:
    root = Path(path)
    for sub in ("rgb", "segmap", "depth", "semfeat", "relations"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    save_cameras(ds.cameras, root / "cameras.json")
    save_vocab(ds.table, root / "vocab.bin")
    _dump_json(root / "graph_gt.json", ds.graph.to_dict())
    if ds.scene is not None:
        ds.scene.save(root / "scene.json")
    for image_id, rec in ds.images.items():
        Image.fromarray(np.round(rec.rgb * 255.0).astype(np.uint8), mode="RGB").save(
            root / "rgb" / f"{image_id}.png"
        )
        _save_png16(root / "segmap" / f"{image_id}.png", rec.segmap)
        save_planes(root / "depth" / f"{image_id}.bin", rec.depth)
        save_planes(root / "semfeat" / f"{image_id}.bin", rec.semfeat)
        _dump_json(
            root / "relations" / f"{image_id}.json",
            {"image_id": image_id, "pairs": rec.relations},
        )
    files = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[str(p.relative_to(root))] = _sha256(p)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "image_ids": list(ds.images.keys()),
        "splits": ds.splits,
        "vocab_roles": ds.vocab_roles,
        "has_scene": ds.scene is not None,
        "files": files,
    }
    _dump_json(root / "manifest.json", manifest)


def load_dataset(path) -> SceneDataset:
    root = Path(path)
    try:
        with open(root / "manifest.json") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise DatasetError(f"{root}: no manifest.json; not a dataset directory") from None
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{root}: dataset schema version {manifest.get('schema_version')}, "
            f"expected {SCHEMA_VERSION}"
        )
    for rel, digest in manifest["files"].items():
        p = root / rel
        if not p.is_file():
            raise ChecksumError(f"{root}: missing file {rel}")
        if _sha256(p) != digest:
            raise ChecksumError(f"{root}: checksum mismatch for {rel}")
    cameras = load_cameras(root / "cameras.json")
    table = load_vocab(root / "vocab.bin")
    with open(root / "graph_gt.json") as f:
        graph = GroundTruthGraph.from_dict(json.load(f))
    scene = SceneSpec.load(root / "scene.json") if manifest.get("has_scene") else None
    images: dict[str, ImageRecord] = {}
    for image_id in manifest["image_ids"]:
        rgb = np.asarray(Image.open(root / "rgb" / f"{image_id}.png"), dtype=np.uint8)
        with open(root / "relations" / f"{image_id}.json") as f:
            relations = json.load(f)["pairs"]
        images[image_id] = ImageRecord(
            image_id=image_id,
            rgb=rgb.astype(np.float64) / 255.0,
            depth=load_planes(root / "depth" / f"{image_id}.bin"),
            segmap=_load_png16(root / "segmap" / f"{image_id}.png"),
            semfeat=load_planes(root / "semfeat" / f"{image_id}.bin"),
            relations=relations,
        )
    return SceneDataset(
        cameras=cameras,
        images=images,
        table=table,
        graph=graph,
        splits=manifest["splits"],
        vocab_roles=manifest["vocab_roles"],
        scene=scene,
    )


def cloud_from_dataset(ds: SceneDataset, max_points: int = 6000, seed: int = 0):
    """Backproject annotated pixels at their GT depth into a labeled point cloud."""
    pts, ids = [], []
    for image_id in ds.train_ids:
        rec = ds.images[image_id]
        cam = ds.camera(image_id)
        mask = rec.segmap != 0
        if not mask.any():
            continue
        vv, uu = np.nonzero(mask)
        pixels = np.stack([uu, vv], axis=1).astype(np.float64)
        origins, dirs = generate_rays(cam, pixels)
        t = rec.depth[vv, uu].astype(np.float64)
        pts.append(origins + t[:, None] * dirs)
        ids.append(rec.segmap[vv, uu])
    if not pts:
        raise DatasetError("no annotated pixels anywhere; cannot build a point cloud")
    pts = np.concatenate(pts)
    ids = np.concatenate(ids)
    if len(pts) > max_points:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC10D]))
        keep = rng.choice(len(pts), size=max_points, replace=False)
        keep.sort()
        pts, ids = pts[keep], ids[keep]
    return pts, ids


# -- ASCII PLY (xyz) ----------------------------------------------------------


def write_ply_xyz(path, pts: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(pts)}\n")
        f.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for p in pts:
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")


def read_ply_xyz(path) -> np.ndarray:
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise DatasetError(f"{path}: not a PLY file")
        n = None
        while True:
            line = f.readline()
            if not line:
                raise DatasetError(f"{path}: unterminated PLY header")
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            if line.strip() == "end_header":
                break
        if n is None:
            raise DatasetError(f"{path}: no vertex element")
        pts = np.loadtxt(f, max_rows=n, dtype=np.float64)
    return pts.reshape(n, -1)[:, :3]
