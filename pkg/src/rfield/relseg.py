"""Relationship-guided 3D instance segmentation benchmark harness.

Queries follow the template "the? <subject> <predicate> the? <object>". The
subject noun shortlists candidate clusters, the object noun shortlists
anchors, and candidates survive only when the relation head aligns with the
predicate toward some anchor. An object-only ablation (filter disabled)
reduces to the argmax over subject-noun scores.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field as dc_field

import numpy as np

from .embeddings import EmbeddingTable
from .errors import QueryParseError
from .field import RelationField
from .graph import InstanceCluster, relation_features_at
from .query import RelevancyConfig, cosine_to_score, relevancy_batch

ARTICLES = ("the", "a", "an")
SHORTLIST_M = 5
RHO_THRESHOLD = 0.5


@dataclass
class RelSegQuery:
    text: str
    subject: str
    predicate: str
    object: str
    gt_instance_id: int = -1
    scene_id: str = ""


def parse_query(text: str, predicates) -> tuple[str, str, str]:
    """Split a query into (subject, predicate, object) by longest predicate match.

    Case-insensitive and idempotent; leading articles are stripped from both
    noun parts.
    """
    lowered = " ".join(text.lower().split())
    best = None
    for pred in sorted(predicates, key=len, reverse=True):
        m = re.search(rf"\b{re.escape(pred.lower())}\b", lowered)
        if m:
            best = (pred.lower(), m.start(), m.end())
            break
    if best is None:
        raise QueryParseError(
            f"no relationship predicate found in {text!r}; known predicates: "
            + ", ".join(sorted(predicates))
        )
    pred, start, end = best
    subject = _strip_articles(lowered[:start])
    obj = _strip_articles(lowered[end:])
    if not subject or not obj:
        raise QueryParseError(f"query {text!r} must name a subject and an object around {pred!r}")
    return subject, pred, obj


def _strip_articles(part: str) -> str:
    words = [w for w in part.split() if w not in ARTICLES]
    return " ".join(words)


@dataclass
class RelSegPrediction:
    cluster: InstanceCluster | None
    combined_score: float
    diagnostics: dict


def relseg(
    field: RelationField,
    clusters: list[InstanceCluster],
    query: RelSegQuery,
    table: EmbeddingTable,
    canon: RelevancyConfig | None = None,
    m: int = SHORTLIST_M,
    rho_threshold: float = RHO_THRESHOLD,
    use_relation_filter: bool = True,
    max_anchor_points: int = 300,
) -> RelSegPrediction:
    """Localize the query's subject instance; empty prediction when nothing survives."""
    canon = canon or RelevancyConfig.from_table(table)
    subj_emb = table.embedding(query.subject)
    obj_emb = table.embedding(query.object)
    pred_emb = table.embedding(query.predicate)
    sem = np.stack([c.semantic_embedding for c in clusters])
    subj_scores = cosine_to_score(sem @ subj_emb)
    obj_scores = cosine_to_score(sem @ obj_emb)
    if not use_relation_filter:
        best = int(np.argmax(subj_scores))
        return RelSegPrediction(
            cluster=clusters[best],
            combined_score=float(subj_scores[best]),
            diagnostics={"mode": "object-only", "subject_scores": subj_scores.tolist()},
        )
    candidates = list(np.argsort(-subj_scores, kind="stable")[:m])
    anchors = list(np.argsort(-obj_scores, kind="stable")[:m])
    best_cluster, best_score, diag = None, -1.0, []
    for ci in candidates:
        z = clusters[ci].centroid
        best_pair = 0.0
        best_rho = 0.0
        for ai in anchors:
            if ai == ci:
                continue
            pts = clusters[ai].points[:max_anchor_points]
            feats = relation_features_at(field, pts, z)
            mean = feats.mean(axis=0)
            n = np.linalg.norm(mean)
            emb = mean / n if n > 0 else mean
            rho = float(relevancy_batch(emb[None], pred_emb, canon)[0])
            if rho >= rho_threshold:
                best_pair = max(best_pair, rho * float(obj_scores[ai]))
                best_rho = max(best_rho, rho)
        diag.append({"candidate": int(ci), "subject_score": float(subj_scores[ci]), "best_rho": best_rho})
        if best_pair > 0:
            combined = float(subj_scores[ci]) * best_pair
            if combined > best_score:
                best_score = combined
                best_cluster = clusters[ci]
    return RelSegPrediction(
        cluster=best_cluster,
        combined_score=best_score,
        diagnostics={"mode": "full", "candidates": diag},
    )


def point_iou(pred_indices, gt_indices) -> float:
    pred, gt = set(map(int, pred_indices)), set(map(int, gt_indices))
    union = pred | gt
    return len(pred & gt) / len(union) if union else 0.0


@dataclass
class RelSegReport:
    outcomes: list = dc_field(default_factory=list)

    def add(self, query: RelSegQuery, prediction: RelSegPrediction, iou: float) -> None:
        self.outcomes.append(
            {
                "scene": query.scene_id,
                "query": query.text,
                "gt_instance_id": query.gt_instance_id,
                "predicted": prediction.cluster is not None,
                "iou": float(iou),
                "hit": bool(iou >= 0.5),
                "combined_score": float(prediction.combined_score),
                "diagnostics": prediction.diagnostics,
            }
        )

    @property
    def accuracy(self) -> float:
        if not self.outcomes:
            return 0.0
        return sum(o["hit"] for o in self.outcomes) / len(self.outcomes)

    @property
    def mean_iou(self) -> float:
        if not self.outcomes:
            return 0.0
        return float(np.mean([o["iou"] for o in self.outcomes]))

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_iou": self.mean_iou,
            "n_queries": len(self.outcomes),
            "per_query": self.outcomes,
        }


def evaluate_queries(
    queries: list[RelSegQuery],
    field: RelationField,
    clusters: list[InstanceCluster],
    gt_point_ids: np.ndarray,
    table: EmbeddingTable,
    use_relation_filter: bool = True,
    report: RelSegReport | None = None,
) -> RelSegReport:
    """Score queries against one scene's clusters and labeled evaluation cloud."""
    report = report if report is not None else RelSegReport()
    for q in queries:
        pred = relseg(field, clusters, q, table, use_relation_filter=use_relation_filter)
        if pred.cluster is None:
            report.add(q, pred, 0.0)
            continue
        gt_idx = np.nonzero(gt_point_ids == q.gt_instance_id)[0]
        report.add(q, pred, point_iou(pred.cluster.indices, gt_idx))
    return report
