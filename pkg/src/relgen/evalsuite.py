"""Triplet recall, the text-to-image retrieval proxy, SPICE-style PR curves,
diversity counts and commonsense-prior re-ranking."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .matcher import box_iou
from .synthworld import ConceptSpace, WorldConfig, caption_embedding

log = logging.getLogger(__name__)

DEFAULT_K_GRID = (1, 2, 3, 5, 8, 10, 15, 20)


@dataclass
class TripletPrediction:
    subject: tuple        # (id, category, box)
    predicate: str
    object: tuple         # (id, category, box)
    score: float
    refined_score: float | None = None

    def categories(self) -> tuple:
        return (self.subject[1], self.predicate, self.object[1])

    def to_record(self) -> dict:
        rec = {"s": {"cat": self.subject[1], "box": [float(x) for x in self.subject[2]]},
               "p": self.predicate,
               "o": {"cat": self.object[1], "box": [float(x) for x in self.object[2]]},
               "score": float(self.score)}
        if self.refined_score is not None:
            rec["refined_score"] = float(self.refined_score)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "TripletPrediction":
        return cls((None, rec["s"]["cat"], list(rec["s"]["box"])), rec["p"],
                   (None, rec["o"]["cat"], list(rec["o"]["box"])), float(rec["score"]),
                   rec.get("refined_score"))

    def validate(self, phrases=None) -> None:
        for _, _, b in (self.subject, self.object):
            if not (b[2] > b[0] and b[3] > b[1]):
                raise ValueError(f"malformed box {b}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")
        if phrases is not None and self.predicate not in phrases:
            raise ValueError(f"unknown predicate {self.predicate!r}")


def sort_predictions(preds: list[TripletPrediction]) -> list[TripletPrediction]:
    """Descending score; ties keep their incoming order."""
    return sorted(preds, key=lambda p: -p.score)


def save_predictions(per_scene: dict, path: str | Path) -> None:
    """``per_scene``: {scene_id: [TripletPrediction]}, written in scene-id order."""
    lines = [json.dumps({"scene_id": sid, "triplets": [p.to_record() for p in per_scene[sid]]}, sort_keys=True)
             for sid in sorted(per_scene)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_predictions(path: str | Path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec["scene_id"]] = [TripletPrediction.from_record(t) for t in rec["triplets"]]
    return out


def gt_triplets(scene) -> list:
    """A scene's GT as ((cat, box), predicate, (cat, box)) records."""
    return [((scene.obj(s)[1], scene.obj(s)[2]), p, (scene.obj(o)[1], scene.obj(o)[2]))
            for s, p, o in scene.triplets]


def _hits(pred: TripletPrediction, gt, synonym_map, iou_thr: float) -> bool:
    (gs_cat, gs_box), gp, (go_cat, go_box) = gt
    if pred.subject[1] != gs_cat or pred.object[1] != go_cat:
        return False
    if pred.predicate not in synonym_map.get(gp, {gp}) | {gp}:
        return False
    return box_iou(pred.subject[2], gs_box) >= iou_thr and box_iou(pred.object[2], go_box) >= iou_thr


def recall_at_k(preds_per_scene, gts, K: int, synonym_map: dict | None = None, iou_thr: float = 0.5) -> float:
    """Micro-averaged recall of GT triplets among each scene's top-K predictions.

    ``preds_per_scene`` and ``gts`` are parallel lists (one entry per scene).
    Each prediction claims the first still-unmatched GT it hits.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    synonym_map = synonym_map or {}
    matched = total = 0
    for preds, gt in zip(preds_per_scene, gts):
        total += len(gt)
        free = [True] * len(gt)
        for pred in sort_predictions(preds)[:K]:
            for g, rec in enumerate(gt):
                if free[g] and _hits(pred, rec, synonym_map, iou_thr):
                    free[g] = False
                    matched += 1
                    break
    return matched / total if total else 0.0


def caption_concepts(triplets) -> list:
    """Concepts of a tiled caption; repeated triplets are dropped before tiling."""
    seen, out = set(), []
    for tr in triplets:
        if tr not in seen:
            seen.add(tr)
            out.extend(tr)
    return out


def t2i_retrieval(per_image_triplets, image_embeddings, space: ConceptSpace, ks=(1, 5, 10)) -> dict:
    """Caption-to-image recall at each K.

    ``per_image_triplets``: one list of (subj_cat, predicate, obj_cat) per
    image (the caption's tiled triplets). An image's rank counts images with
    a strictly higher cosine plus tied images with a smaller index.
    """
    emb = np.asarray(image_embeddings, dtype=np.float64)
    n = len(emb)
    if n != len(per_image_triplets):
        raise ValueError("need exactly one caption per image")
    if n < max(ks):
        raise ValueError(f"need at least {max(ks)} images, got {n}")
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = np.divide(emb, norms, out=np.zeros_like(emb), where=norms > 0)
    ranks = np.empty(n, dtype=int)
    for i, triplets in enumerate(per_image_triplets):
        scores = emb @ caption_embedding(caption_concepts(triplets), space)
        own = scores[i]
        ranks[i] = int((scores > own).sum() + (scores[:i] == own).sum())
    return {k: float((ranks < k).mean()) for k in ks}


def spice_pr_curve(ranked_preds, target_tuples, k_grid=DEFAULT_K_GRID) -> list[tuple]:
    """(k, precision, recall) for the top-k tuples of every scene, micro-averaged.

    ``ranked_preds``: per scene, (subj_cat, predicate, obj_cat) tuples in
    rank order. Top-k lists collapse duplicates; precision divides by the
    number of distinct tuples among the top k.
    """
    k_grid = list(k_grid)
    if any(b <= a for a, b in zip(k_grid, k_grid[1:])) or not k_grid or k_grid[0] < 1:
        raise ValueError("k_grid must be strictly ascending positive integers")
    n_targets = sum(len(t) for t in target_tuples)
    if n_targets == 0:
        raise ValueError("every scene has an empty target set")
    curve = []
    for k in k_grid:
        hits = valid = 0
        for preds, targets in zip(ranked_preds, target_tuples):
            top = set(preds[:k])
            valid += len(top)
            hits += len(top & set(targets))
        curve.append((k, hits / valid if valid else 0.0, hits / n_targets))
    return curve


def diversity_count(preds, targets) -> tuple[int, int]:
    """Distinct (predicate, object category) combos predicted, and those hitting a target.

    ``preds`` / ``targets``: per scene, (subj_cat, predicate, obj_cat) tuples
    and target tuple sets.
    """
    predicted, correct = set(), set()
    for scene_preds, scene_targets in zip(preds, targets):
        scene_targets = set(scene_targets)
        for tr in scene_preds:
            predicted.add((tr[1], tr[2]))
            if tuple(tr) in scene_targets:
                correct.add((tr[1], tr[2]))
    return len(predicted), len(correct)


class CommonsensePrior:
    """p(predicate | subject category, object category) behind a lookup interface."""

    def __init__(self, phrases, rows: dict):
        self.phrases = list(phrases)
        self.index = {p: i for i, p in enumerate(self.phrases)}
        self.rows = {}
        for key, row in rows.items():
            row = np.asarray(row, dtype=np.float64)
            if row.shape != (len(self.phrases),) or (row < 0).any() or abs(row.sum() - 1.0) > 1e-9:
                raise ValueError(f"prior row {key} must be a distribution over the vocabulary")
            self.rows[tuple(key)] = row
        self.missing = 0

    @classmethod
    def from_world(cls, world: WorldConfig) -> "CommonsensePrior":
        rows = {}
        for key, opts in world.table().items():
            row = np.zeros(len(world.predicates))
            for p, w in opts.items():
                row[world.predicates.index(p)] = w
            rows[key] = row / row.sum()
        return cls(world.predicates, rows)

    @classmethod
    def uniform(cls, phrases, keys) -> "CommonsensePrior":
        row = np.full(len(phrases), 1.0 / len(phrases))
        return cls(phrases, {k: row for k in keys})

    def row(self, s_cat: str, o_cat: str) -> np.ndarray:
        row = self.rows.get((s_cat, o_cat))
        if row is None:
            self.missing += 1
            log.warning("no prior row for (%s, %s); using uniform", s_cat, o_cat)
            return np.full(len(self.phrases), 1.0 / len(self.phrases))
        return row

    def prob(self, predicate: str, s_cat: str, o_cat: str) -> float:
        return float(self.row(s_cat, o_cat)[self.index[predicate]])

    def argmax(self, s_cat: str, o_cat: str) -> str:
        return self.phrases[int(np.argmax(self.row(s_cat, o_cat)))]

    def to_json(self, path: str | Path) -> None:
        doc = {"phrases": self.phrases,
               "rows": [{"s": s, "o": o, "p": row.tolist()} for (s, o), row in sorted(self.rows.items())]}
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def from_json(cls, path: str | Path) -> "CommonsensePrior":
        doc = json.loads(Path(path).read_text())
        return cls(doc["phrases"], {(r["s"], r["o"]): r["p"] for r in doc["rows"]})


def rerank_with_prior(preds: list[TripletPrediction], prior: CommonsensePrior) -> list[TripletPrediction]:
    """Copies with refined_score = score * p_prior, sorted by (refined, score, predicate)."""
    out = [TripletPrediction(p.subject, p.predicate, p.object, p.score,
                             p.score * prior.prob(p.predicate, p.subject[1], p.object[1]))
           for p in preds]
    return sorted(out, key=lambda p: (-p.refined_score, -p.score, p.predicate))


def metrics_report(scenes, predictions: dict, space: ConceptSpace, synonym_map: dict,
                   image_embeddings, k_grid=DEFAULT_K_GRID) -> dict:
    """The full metrics document for a set of scenes and their predictions."""
    preds = [sort_predictions(predictions.get(s.id, [])) for s in scenes]
    gts = [gt_triplets(s) for s in scenes]
    tuples = [[p.categories() for p in ps] for ps in preds]
    targets = [s.targets() for s in scenes]
    report = {f"recall@{k}": recall_at_k(preds, gts, k, synonym_map) for k in (5, 10, 15)}
    ks = tuple(k for k in (1, 5, 10) if k <= len(scenes))
    t2i = t2i_retrieval([t[:10] for t in tuples], image_embeddings, space, ks)
    report.update({f"t2i@{k}": v for k, v in t2i.items()})
    report["spice"] = [{"k": k, "p": p, "r": r} for k, p, r in spice_pr_curve(tuples, targets, k_grid)]
    predicted, correct = diversity_count(tuples, targets)
    report["diversity"] = {"predicted": predicted, "correct": correct}
    return report
