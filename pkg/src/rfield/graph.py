"""Explicit 3D scene-graph extraction from a trained field, plus metrics.

Instances come from DBSCAN over point instance embeddings; each ordered
cluster pair is scored by evaluating the relation head at the object
cluster's points against the subject centroid, and an edge is kept when its
best predicate response reaches the 0.5 threshold.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .embeddings import EmbeddingTable
from .errors import DatasetError
from .field import RelationField, softplus
from .query import RelevancyConfig, cosine_to_score, relevancy_batch
from .render import inside_bounds

EDGE_RHO_THRESHOLD = 0.5


@dataclass
class PointSet:
    """3D points with their view-independent semantic and instance features."""

    points: np.ndarray
    semantic: np.ndarray
    instance: np.ndarray


def sample_points(
    field: RelationField,
    points: np.ndarray | None = None,
    n_candidates: int = 60000,
    density_quantile: float = 0.97,
    max_points: int = 6000,
    seed: int = 0,
) -> PointSet:
    """Supplied cloud, or points drawn where density exceeds a quantile."""
    if points is None:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x90B5]))
        lo = np.asarray(field.config.bounds_lo)
        hi = np.asarray(field.config.bounds_hi)
        cand = rng.uniform(lo, hi, size=(n_candidates, 3))
        sigma = field.density(cand)
        threshold = np.quantile(sigma, density_quantile)
        keep = sigma > threshold
        if not keep.any():
            raise DatasetError("field is empty: no density above the quantile")
        pts = cand[keep]
        if len(pts) > max_points:
            sel = rng.choice(len(pts), size=max_points, replace=False)
            sel.sort()
            pts = pts[sel]
    else:
        pts = np.asarray(points, dtype=np.float64)
        if len(pts) == 0:
            raise DatasetError("empty point cloud")
    return PointSet(
        points=pts,
        semantic=field.grids["semantic"].sample(pts),
        instance=field.grids["instance"].sample(pts),
    )


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density-based clustering; -1 marks noise.

    Core points expand in index order, so the labeling is deterministic for
    a fixed point order.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    n = len(points)
    labels = np.full(n, -1, dtype=np.int64)
    visited = np.zeros(n, dtype=bool)

    def neighbors(i):
        d2 = np.einsum("nd,nd->n", points - points[i], points - points[i])
        return np.nonzero(d2 <= eps * eps)[0]

    cluster = 0
    for i in range(n):
        if visited[i]:
            continue
        visited[i] = True
        seeds = neighbors(i)
        if len(seeds) < min_pts:
            continue  # noise unless later claimed as a border point
        labels[i] = cluster
        queue = [int(j) for j in seeds]
        in_queue = np.zeros(n, dtype=bool)
        in_queue[seeds] = True
        qi = 0
        while qi < len(queue):
            j = queue[qi]
            qi += 1
            if labels[j] == -1:
                labels[j] = cluster
            if visited[j]:
                continue
            visited[j] = True
            nb = neighbors(j)
            if len(nb) >= min_pts:
                for x in nb:
                    if not in_queue[x]:
                        in_queue[x] = True
                        queue.append(int(x))
        cluster += 1
    return labels


@dataclass
class InstanceCluster:
    cluster_id: int
    indices: np.ndarray  # rows into the PointSet
    points: np.ndarray
    instance_embedding: np.ndarray  # mean over members
    semantic_embedding: np.ndarray  # normalized mean over members
    centroid: np.ndarray


def extract_instances(
    point_set: PointSet, eps: float = 0.35, min_pts: int = 8
) -> list[InstanceCluster]:
    labels = dbscan(point_set.instance, eps, min_pts)
    clusters = []
    for cid in sorted(set(labels.tolist()) - {-1}):
        idx = np.nonzero(labels == cid)[0]
        sem = point_set.semantic[idx].mean(axis=0)
        norm = np.linalg.norm(sem)
        clusters.append(
            InstanceCluster(
                cluster_id=int(cid),
                indices=idx,
                points=point_set.points[idx],
                instance_embedding=point_set.instance[idx].mean(axis=0),
                semantic_embedding=sem / norm if norm > 0 else sem,
                centroid=point_set.points[idx].mean(axis=0),
            )
        )
    return clusters


def score_labels(embedding: np.ndarray, labels: list[tuple[str, np.ndarray]]):
    """Cosine per label mapped to [0,1], sorted descending with lexicographic
    tiebreak; zero-norm embeddings score 0.5 everywhere."""
    norm = np.linalg.norm(embedding)
    e_hat = embedding / norm if norm > 1e-12 else np.zeros_like(embedding)
    scored = []
    for name, emb in labels:
        c = float(e_hat @ emb) if norm > 1e-12 else 0.0
        scored.append((name, float(cosine_to_score(np.asarray(c)))))
    return sorted(scored, key=lambda x: (-x[1], x[0]))


@dataclass
class GraphNode:
    node_id: int
    centroid: np.ndarray
    indices: np.ndarray
    semantic_embedding: np.ndarray
    instance_embedding: np.ndarray
    labels: list  # [(label, score)] sorted desc


@dataclass
class GraphEdge:
    subject: int
    object: int
    embedding: np.ndarray
    rho: float
    predicates: list  # [(label, score)] sorted desc


@dataclass
class SceneGraph:
    nodes: list[GraphNode] = dc_field(default_factory=list)
    edges: list[GraphEdge] = dc_field(default_factory=list)


def relation_features_at(
    field: RelationField, pts: np.ndarray, z: np.ndarray, swap_args: bool = False
) -> np.ndarray:
    zz = np.broadcast_to(np.asarray(z, dtype=np.float64), pts.shape)
    a, b = (zz, pts) if swap_args else (pts, zz)
    return field.relation_forward(a, b)


def pairwise_relations(
    field: RelationField,
    clusters: list[InstanceCluster],
    predicate_labels: list[tuple[str, np.ndarray]],
    canon: RelevancyConfig,
    threshold: float = EDGE_RHO_THRESHOLD,
    aggregate: str = "mean",
    max_points_per_cluster: int = 400,
) -> list[GraphEdge]:
    """Ordered cluster pairs -> retained edges (max predicate rho >= threshold).

    The subject cluster queries at its centroid; features are evaluated at the
    object cluster's points and aggregated by normalized mean (or per-point
    max response with aggregate="max").
    """
    if aggregate not in ("mean", "max"):
        raise ValueError("aggregate must be 'mean' or 'max'")
    edges = []
    for i, subj in enumerate(clusters):
        for j, obj in enumerate(clusters):
            if i == j:
                continue
            pts = obj.points[:max_points_per_cluster]
            feats = relation_features_at(field, pts, subj.centroid)
            mean_emb = feats.mean(axis=0)
            norm = np.linalg.norm(mean_emb)
            emb = mean_emb / norm if norm > 0 else mean_emb
            rhos = []
            for _, pred_emb in predicate_labels:
                if aggregate == "mean":
                    rhos.append(float(relevancy_batch(emb[None], pred_emb, canon)[0]))
                else:
                    rhos.append(float(relevancy_batch(feats, pred_emb, canon).max()))
            best = float(np.max(rhos))
            if best >= threshold:
                edges.append(
                    GraphEdge(
                        subject=i,
                        object=j,
                        embedding=emb,
                        rho=best,
                        predicates=score_labels(emb, predicate_labels),
                    )
                )
    return edges


def build_scene_graph(
    field: RelationField,
    point_set: PointSet,
    table: EmbeddingTable,
    class_names: list[str],
    predicate_names: list[str],
    canon: RelevancyConfig | None = None,
    eps: float = 0.35,
    min_pts: int = 8,
    aggregate: str = "mean",
) -> SceneGraph:
    canon = canon or RelevancyConfig.from_table(table)
    class_labels = [(n, table.embedding(n)) for n in class_names]
    pred_labels = [(n, table.embedding(n)) for n in predicate_names]
    clusters = extract_instances(point_set, eps, min_pts)
    nodes = [
        GraphNode(
            node_id=i,
            centroid=c.centroid,
            indices=c.indices,
            semantic_embedding=c.semantic_embedding,
            instance_embedding=c.instance_embedding,
            labels=score_labels(c.semantic_embedding, class_labels),
        )
        for i, c in enumerate(clusters)
    ]
    edges = pairwise_relations(field, clusters, pred_labels, canon, aggregate=aggregate)
    return SceneGraph(nodes=nodes, edges=edges)


# -- metrics ---------------------------------------------------------------------


def match_nodes(graph: SceneGraph, gt_point_ids: np.ndarray) -> dict[int, int]:
    """Greedy maximal point-overlap matching: graph node id -> GT instance id."""
    overlaps = []
    for node in graph.nodes:
        ids, counts = np.unique(gt_point_ids[node.indices], return_counts=True)
        for inst, cnt in zip(ids.tolist(), counts.tolist()):
            overlaps.append((cnt, node.node_id, int(inst)))
    overlaps.sort(key=lambda x: (-x[0], x[1], x[2]))
    matched, used_gt, out = set(), set(), {}
    for cnt, node_id, inst in overlaps:
        if node_id in matched or inst in used_gt:
            continue
        matched.add(node_id)
        used_gt.add(inst)
        out[node_id] = inst
    return out


def node_iou(graph: SceneGraph, node_to_gt: dict[int, int], gt_point_ids: np.ndarray) -> dict[int, float]:
    """Point-set IoU of each matched node against its GT instance."""
    out = {}
    for node in graph.nodes:
        if node.node_id not in node_to_gt:
            continue
        inst = node_to_gt[node.node_id]
        pred = set(node.indices.tolist())
        gt = set(np.nonzero(gt_point_ids == inst)[0].tolist())
        out[node.node_id] = len(pred & gt) / len(pred | gt) if pred | gt else 0.0
    return out


def topk_recall(
    graph: SceneGraph,
    gt_graph,
    k: int,
    mode: str,
    node_to_gt: dict[int, int],
) -> float:
    """Fraction of GT labels (or triplets) recovered in the top-k predictions.

    object: GT class among a matched node's top-k labels. predicate: GT
    predicate among the matched pair's edge top-k. relationship: GT triplet
    among the pair's top-k (subject label, predicate, object label) combos
    ranked by score product.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if mode not in ("object", "predicate", "relationship"):
        raise ValueError(f"unknown mode {mode!r}")
    gt_to_node = {v: kk for kk, v in node_to_gt.items()}
    class_of = {n["id"]: n["class"] for n in gt_graph.nodes}
    edges_by_pair = {(e.subject, e.object): e for e in graph.edges}
    nodes_by_id = {n.node_id: n for n in graph.nodes}

    if mode == "object":
        gt_nodes = gt_graph.nodes
        if not gt_nodes:
            raise ValueError("ground truth has no nodes")
        hits = 0
        for gn in gt_nodes:
            node = nodes_by_id.get(gt_to_node.get(gn["id"], -1))
            if node is None:
                continue
            top = [name for name, _ in node.labels[:k]]
            hits += gn["class"] in top
        return hits / len(gt_nodes)

    gt_edges = gt_graph.edges
    if not gt_edges:
        raise ValueError("ground truth has no edges")
    hits = 0
    for ge in gt_edges:
        s_node = gt_to_node.get(ge["subject"])
        o_node = gt_to_node.get(ge["object"])
        edge = edges_by_pair.get((s_node, o_node)) if s_node is not None and o_node is not None else None
        if edge is None:
            continue
        if mode == "predicate":
            top = [name for name, _ in edge.predicates[:k]]
            hits += ge["predicate"] in top
        else:
            subj_labels = nodes_by_id[s_node].labels
            obj_labels = nodes_by_id[o_node].labels
            triplets = [
                (ss * ps * os_, sn, pn, on)
                for sn, ss in subj_labels
                for pn, ps in edge.predicates
                for on, os_ in obj_labels
            ]
            triplets.sort(key=lambda t: (-t[0], t[1], t[2], t[3]))
            want = (class_of[ge["subject"]], ge["predicate"], class_of[ge["object"]])
            hits += want in [(t[1], t[2], t[3]) for t in triplets[:k]]
    return hits / len(gt_edges)


# -- export / import ---------------------------------------------------------------


def export_graph(graph: SceneGraph, path) -> None:
    """graph.json plus a float/int sidecar so embeddings round-trip exactly."""
    path = str(path)
    doc = {
        "nodes": [
            {
                "id": n.node_id,
                "centroid": [float(x) for x in n.centroid],
                "n_points": int(len(n.indices)),
                "labels": [{"label": l, "score": float(s)} for l, s in n.labels],
            }
            for n in graph.nodes
        ],
        "edges": [
            {
                "subject": e.subject,
                "object": e.object,
                "rho": float(e.rho),
                "predicates": [{"label": l, "score": float(s)} for l, s in e.predicates],
            }
            for e in graph.edges
        ],
        "sidecar": "graph_emb.bin",
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    blocks = []
    for n in graph.nodes:
        blocks.append((f"node{n.node_id}.semantic", n.semantic_embedding.astype("<f4")))
        blocks.append((f"node{n.node_id}.instance", n.instance_embedding.astype("<f4")))
        blocks.append((f"node{n.node_id}.indices", n.indices.astype("<i4")))
    for i, e in enumerate(graph.edges):
        blocks.append((f"edge{i}.embedding", e.embedding.astype("<f4")))
    _write_blocks(_sidecar_path(path), blocks)


def _sidecar_path(path: str) -> str:
    import os.path

    return os.path.join(os.path.dirname(path) or ".", "graph_emb.bin")


def _write_blocks(path, blocks) -> None:
    header = json.dumps(
        [{"name": n, "dtype": str(a.dtype), "shape": list(a.shape)} for n, a in blocks],
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for _, a in blocks:
            f.write(np.ascontiguousarray(a).tobytes())


def _read_blocks(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        out = {}
        for spec in header:
            n = int(np.prod(spec["shape"])) if spec["shape"] else 1
            dt = np.dtype(spec["dtype"])
            out[spec["name"]] = np.frombuffer(f.read(n * dt.itemsize), dtype=dt).reshape(
                spec["shape"]
            )
    return out


def import_graph(path) -> SceneGraph:
    path = str(path)
    with open(path) as f:
        doc = json.load(f)
    blocks = _read_blocks(_sidecar_path(path))
    nodes = [
        GraphNode(
            node_id=nd["id"],
            centroid=np.asarray(nd["centroid"]),
            indices=blocks[f"node{nd['id']}.indices"].astype(np.int64),
            semantic_embedding=blocks[f"node{nd['id']}.semantic"].astype(np.float64),
            instance_embedding=blocks[f"node{nd['id']}.instance"].astype(np.float64),
            labels=[(l["label"], l["score"]) for l in nd["labels"]],
        )
        for nd in doc["nodes"]
    ]
    edges = [
        GraphEdge(
            subject=ed["subject"],
            object=ed["object"],
            embedding=blocks[f"edge{i}.embedding"].astype(np.float64),
            rho=ed["rho"],
            predicates=[(l["label"], l["score"]) for l in ed["predicates"]],
        )
        for i, ed in enumerate(doc["edges"])
    ]
    return SceneGraph(nodes=nodes, edges=edges)
