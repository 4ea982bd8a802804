"""Seeded synthetic scenes and a mock joint visual/text embedding space.

A world is a set of object categories, predicate phrases and a
compatibility table saying which predicates may link which (subject,
object) category pairs. The table drives scene generation, pseudo labels,
the commonsense prior and evaluation targets.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import ConditionSet
from .matcher import GTMatching, MatchingMatrix, build_gt_matching
from .numerics import OptimizerState, adam_step
from .relvocab import RelationSequence, RelationVocabulary

OBJECTS = ["person", "horse", "bicycle", "dog", "cup", "table",
           "ball", "car", "chair", "bottle", "kite", "book"]

PREDICATES = [
    "hold", "carry", "ride", "sit on", "stand on", "lie on", "lean on", "eat",
    "drink from", "push", "pull", "throw", "catch", "kick", "feed", "pet",
    "hug", "wash", "cut", "open", "close", "fly", "chase", "look at",
    "watch", "read", "drive", "park", "repair", "board", "jump over", "talk to",
    "play with", "hit", "clean", "lift", "touch", "wear", "next to", "near",
    "in front of", "behind", "above", "over", "under", "on", "in", "beside",
]

SYNONYM_GROUPS = [("hold", "carry"), ("look at", "watch"), ("next to", "near", "beside"),
                  ("above", "over"), ("sit on", "on")]

ENCODE_KINDS = ("object_text", "object_visual", "union_visual", "predicate_text", "image")


@dataclass
class WorldConfig:
    objects: list
    predicates: list
    compat: list                      # [predicate, subject_cat, object_cat, weight]
    synonyms: dict = field(default_factory=dict)
    d_feat: int = 32
    nu: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not self.compat:
            raise ValueError("world compatibility table is empty")
        known_o, known_p = set(self.objects), set(self.predicates)
        for p, s, o, w in self.compat:
            if p not in known_p or s not in known_o or o not in known_o:
                raise ValueError(f"compat entry references unknown concept: {(p, s, o)}")
            if w <= 0:
                raise ValueError("compat weights must be positive")

    def table(self) -> dict:
        """(subject_cat, object_cat) -> {predicate: weight}."""
        out: dict = {}
        for p, s, o, w in self.compat:
            out.setdefault((s, o), {})[p] = float(w)
        return out

    def synonym_map(self) -> dict:
        return {p: set(self.synonyms.get(p, [])) | {p} for p in self.predicates}

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1))

    @classmethod
    def from_json(cls, path: str | Path) -> "WorldConfig":
        return cls(**json.loads(Path(path).read_text()))


def default_world(seed: int = 0, d_feat: int = 32, nu: float = 0.05, active_frac: float = 0.45,
                  preds_per_pair: tuple = (4, 7)) -> WorldConfig:
    """The desk-scale world: 12 object categories, 48 predicates.

    Each ordered category pair is active with probability ``active_frac``
    and then admits a random handful of predicates with Dirichlet weights.
    """
    rng = np.random.default_rng(seed)
    compat = []
    for s in OBJECTS:
        for o in OBJECTS:
            if rng.random() >= active_frac:
                continue
            k = int(rng.integers(preds_per_pair[0], preds_per_pair[1] + 1))
            chosen = rng.choice(len(PREDICATES), size=k, replace=False)
            weights = rng.dirichlet(np.ones(k))
            for p, w in zip(chosen, weights):
                compat.append([PREDICATES[p], s, o, round(float(w), 6) or 1e-6])
    synonyms = {}
    for group in SYNONYM_GROUPS:
        for p in group:
            synonyms[p] = [q for q in group if q != p]
    return WorldConfig(list(OBJECTS), list(PREDICATES), compat, synonyms, d_feat, nu, seed)


@dataclass
class ConceptSpace:
    names: list
    kinds: list
    vectors: np.ndarray
    seed: int
    d_feat: int
    nu: float = 0.05

    def __post_init__(self):
        self.index = {n: i for i, n in enumerate(self.names)}

    def base(self, name: str) -> np.ndarray:
        if name not in self.index:
            raise KeyError(f"unknown concept {name!r}")
        return self.vectors[self.index[name]]

    def to_json(self, path: str | Path) -> None:
        doc = {"seed": self.seed, "d_feat": self.d_feat, "nu": self.nu,
               "concepts": [{"name": n, "kind": k, "vector": [float(x) for x in v]}
                            for n, k, v in zip(self.names, self.kinds, self.vectors)]}
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def from_json(cls, path: str | Path) -> "ConceptSpace":
        doc = json.loads(Path(path).read_text())
        cs = doc["concepts"]
        return cls([c["name"] for c in cs], [c["kind"] for c in cs],
                   np.array([c["vector"] for c in cs], dtype=np.float64),
                   doc["seed"], doc["d_feat"], doc.get("nu", 0.05))


def _spread(vecs: np.ndarray, iters: int = 400, lr: float = 0.01, power: int = 16) -> np.ndarray:
    """Lower the worst pairwise |cos| by descending a smooth max (an l_p norm of the Gram matrix)."""
    x = torch.tensor(vecs, dtype=torch.float64, requires_grad=True)
    eye = torch.eye(len(vecs), dtype=torch.float64)
    state = OptimizerState(lr=lr)
    for _ in range(iters):
        y = x / x.norm(dim=1, keepdim=True)
        loss = ((y @ y.T - eye).abs() ** power).sum() ** (1.0 / power)
        (g,) = torch.autograd.grad(loss, [x])
        with torch.no_grad():
            adam_step({"x": x}, {"x": g}, state)
    with torch.no_grad():
        return (x / x.norm(dim=1, keepdim=True)).numpy().copy()


def build_concept_space(world: WorldConfig, seed: int | None = None, max_cos: float = 0.5,
                        candidates: int = 64, spread_iters: int = 400) -> ConceptSpace:
    """Unit base vectors, one per concept, kept pairwise |cos| < ``max_cos``.

    Each vector starts as the least coherent of ``candidates`` seeded
    Gaussian draws against those already placed; the whole frame is then
    spread to push the worst pairwise |cos| towards the Welch bound
    (about 0.138 for 60 concepts in 32 dimensions). Below 1/7 a pair's
    union embedding scores every one of up to two GT predicates strictly
    above any other predicate.
    """
    seed = world.seed if seed is None else seed
    rng = np.random.default_rng([seed, 7919])
    names = list(world.objects) + list(world.predicates)
    kinds = ["object"] * len(world.objects) + ["predicate"] * len(world.predicates)
    vecs = np.zeros((len(names), world.d_feat))
    for i in range(len(names)):
        cand = rng.standard_normal((candidates, world.d_feat))
        cand /= np.linalg.norm(cand, axis=1, keepdims=True)
        coh = np.abs(cand @ vecs[:i].T).max(axis=1) if i else np.zeros(candidates)
        vecs[i] = cand[int(np.argmin(coh))]
    if spread_iters:
        vecs = _spread(vecs, spread_iters)
    gram = np.abs(vecs @ vecs.T)
    np.fill_diagonal(gram, 0.0)
    if gram.max() >= max_cos:
        raise RuntimeError(f"concept vectors reach |cos| = {gram.max():.3f} >= {max_cos}; raise d_feat")
    return ConceptSpace(names, kinds, vecs, seed, world.d_feat, world.nu)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def mock_encode(kind: str, payload, space: ConceptSpace, rng: np.random.Generator | None = None,
                nu: float | None = None) -> np.ndarray:
    """Unit vector for a concept (text kinds) or a composite (visual kinds).

    Payloads: object_text/object_visual -> category; predicate_text -> phrase;
    union_visual -> (subject_cat, object_cat, [predicates]);
    image -> (categories, predicates), each concept counted once.
    Visual kinds add ``nu`` times an isotropic direction of expected unit
    length to the normalised sum of their base vectors.
    """
    nu = space.nu if nu is None else nu
    if kind in ("object_text", "predicate_text"):
        return space.base(payload).copy()
    if kind == "object_visual":
        parts = [payload]
    elif kind == "union_visual":
        s, o, preds = payload
        parts = [s, o, *preds]
    elif kind == "image":
        cats, preds = payload
        parts = sorted(set(cats)) + sorted(set(preds))
    else:
        raise ValueError(f"unknown encoder kind {kind!r}")
    if len(parts) == 1 and nu == 0:
        return space.base(parts[0]).copy()
    v = _unit(np.sum([space.base(p) for p in parts], axis=0))
    if nu > 0:
        if rng is None:
            raise ValueError("visual encoding with nu > 0 needs an rng")
        v = v + nu * rng.standard_normal(space.d_feat) / np.sqrt(space.d_feat)
    return _unit(v)


def caption_embedding(concepts, space: ConceptSpace) -> np.ndarray:
    """Mock text encoder for a tiled caption: normalised mean of distinct concepts."""
    names = sorted(set(concepts))
    if not names:
        return np.zeros(space.d_feat)
    return _unit(np.mean([space.base(n) for n in names], axis=0))


@dataclass
class SceneInstance:
    id: int
    objects: list       # [(id, category, [x1, y1, x2, y2])]
    triplets: list      # [(subject_id, predicate, object_id)]

    def obj(self, oid: int):
        for o in self.objects:
            if o[0] == oid:
                return o
        raise KeyError(oid)

    def pairs(self) -> list:
        """Distinct (subject_id, object_id) pairs carrying a relation, sorted."""
        return sorted({(s, o) for s, _, o in self.triplets})

    def pair_predicates(self) -> dict:
        out: dict = {}
        for s, p, o in self.triplets:
            out.setdefault((s, o), []).append(p)
        return out

    def targets(self) -> set:
        """Caption-target tuples (subject_cat, predicate, object_cat)."""
        return {(self.obj(s)[1], p, self.obj(o)[1]) for s, p, o in self.triplets}

    def to_record(self) -> dict:
        return {"id": self.id,
                "objects": [{"id": i, "cat": c, "box": [float(x) for x in b]} for i, c, b in self.objects],
                "triplets": [[s, p, o] for s, p, o in self.triplets]}

    @classmethod
    def from_record(cls, rec: dict) -> "SceneInstance":
        return cls(rec["id"], [(o["id"], o["cat"], list(o["box"])) for o in rec["objects"]],
                   [(s, p, o) for s, p, o in rec["triplets"]])

    def validate(self, world: WorldConfig | None = None) -> None:
        ids = {o[0] for o in self.objects}
        if not self.triplets:
            raise ValueError(f"scene {self.id} has no triplets")
        for _, _, b in self.objects:
            if not (0 <= b[0] < b[2] <= 1 and 0 <= b[1] < b[3] <= 1):
                raise ValueError(f"scene {self.id}: box {b} outside the unit canvas")
        table = world.table() if world else None
        for s, p, o in self.triplets:
            if s not in ids or o not in ids:
                raise ValueError(f"scene {self.id}: triplet references a missing object")
            if table is not None and p not in table.get((self.obj(s)[1], self.obj(o)[1]), {}):
                raise ValueError(f"scene {self.id}: incompatible triplet {(s, p, o)}")


def _random_box(rng: np.random.Generator) -> list:
    w, h = rng.uniform(0.1, 0.4, size=2)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    return [round(float(v), 4) for v in (x1, y1, min(x1 + w, 1.0), min(y1 + h, 1.0))]


def _gen_scene(scene_id: int, world: WorldConfig, table: dict, rng: np.random.Generator,
               max_triplets: int = 6) -> SceneInstance:
    while True:
        n_obj = int(rng.integers(2, 6))
        cats = [world.objects[i] for i in rng.integers(0, len(world.objects), size=n_obj)]
        cand = [(i, j) for i in range(n_obj) for j in range(n_obj) if i != j and (cats[i], cats[j]) in table]
        coverable = sorted({k for pair in cand for k in pair})
        if len(coverable) < 2:
            continue
        keep = {old: new for new, old in enumerate(coverable)}
        cats = [cats[k] for k in coverable]
        cand = [(keep[i], keep[j]) for i, j in cand]
        n_obj = len(cats)
        target = int(rng.integers(1, max_triplets + 1))
        chosen: list = []
        used: set = set()

        def add(pair):
            s, o = pair
            opts = table[(cats[s], cats[o])]
            names = sorted(opts)
            free = [p for p in names if (s, p, o) not in used]
            if not free:
                return
            w = np.array([opts[p] for p in free])
            p = free[int(rng.choice(len(free), p=w / w.sum()))]
            used.add((s, p, o))
            chosen.append((s, p, o))

        covered: set = set()
        for k in rng.permutation(n_obj):
            if k in covered or len(chosen) >= max_triplets:
                continue
            mine = [c for c in cand if k in c]
            add(mine[int(rng.integers(len(mine)))])
            covered.update(chosen[-1][0::2] if chosen else ())
        while len(chosen) < min(target, max_triplets):
            before = len(chosen)
            add(cand[int(rng.integers(len(cand)))])
            if len(chosen) == before and all(
                    all((s, p, o) in used for p in table[(cats[s], cats[o])]) for s, o in cand):
                break
        if {k for s, _, o in chosen for k in (s, o)} != set(range(n_obj)):
            continue
        objects = [(k, cats[k], _random_box(rng)) for k in range(n_obj)]
        return SceneInstance(scene_id, objects, chosen)


def gen_dataset(n_scenes: int, world: WorldConfig, seed: int, start_id: int = 0) -> list[SceneInstance]:
    """Scenes with 2-5 objects and 1-6 compatible triplets; every object takes part.

    Scene k draws from its own stream derived from (seed, k).
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    table = world.table()
    return [_gen_scene(i, world, table, np.random.default_rng([seed, i]))
            for i in range(start_id, start_id + n_scenes)]


def save_dataset(scenes, path: str | Path) -> None:
    lines = [json.dumps(s.to_record(), sort_keys=True) for s in scenes]
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> list[SceneInstance]:
    return [SceneInstance.from_record(json.loads(line))
            for line in Path(path).read_text().splitlines() if line.strip()]


def vocabulary_from_space(world: WorldConfig, space: ConceptSpace, sigma0: float = 0.1, dtype=None):
    kwargs = {} if dtype is None else {"dtype": dtype}
    return RelationVocabulary(world.predicates, np.stack([space.base(p) for p in world.predicates]),
                              sigma0=sigma0, **kwargs)


def scene_conditions(scene: SceneInstance, space: ConceptSpace, L: int, rng: np.random.Generator | None,
                     nu: float | None = None) -> ConditionSet:
    """Per-pair features [subj visual, obj visual, union visual, subj text, obj text], truncated at L."""
    preds = scene.pair_predicates()
    rows, so_rows = [], []
    pairs = scene.pairs()[:L]
    for s, o in pairs:
        sc, oc = scene.obj(s)[1], scene.obj(o)[1]
        union = mock_encode("union_visual", (sc, oc, preds[(s, o)]), space, rng, nu)
        rows.append(np.concatenate([
            mock_encode("object_visual", sc, space, rng, nu),
            mock_encode("object_visual", oc, space, rng, nu),
            union,
            mock_encode("object_text", sc, space),
            mock_encode("object_text", oc, space),
        ]))
        so_rows.append(union)
    return ConditionSet.from_rows(rows, so_rows, L, pairs)


@dataclass
class TrainingExample:
    seq: RelationSequence
    cond: ConditionSet
    M: MatchingMatrix
    scene_id: int = -1
    dropped: int = 0

    def validate(self, vocab_size: int, L: int) -> None:
        self.seq.validate(vocab_size, L)
        self.cond.validate(L)
        m = self.M.M
        if m.shape != (L, self.cond.n) or not np.isin(m, (0.0, 1.0)).all():
            raise ValueError("matching matrix must be binary L x N")
        pad_rows = [i for i, p in enumerate(self.seq.provenance) if p != "gt"]
        if pad_rows and m[pad_rows].any():
            raise ValueError("non-annotated slots must have all-zero matching rows")


def build_training_example(scene: SceneInstance, vocab: RelationVocabulary, L: int, space: ConceptSpace,
                           rng: np.random.Generator | None, nu: float | None = None,
                           pseudo_top_k: int = 1, pseudo_pad: bool = True) -> TrainingExample:
    """GT slots first, then pseudo labels round-robin over pairs.

    Pair j's r-th pseudo label is its (r mod ``pseudo_top_k``)-th most
    similar phrase to its union-region embedding. With ``pseudo_pad`` off
    the tail is filled with ``pad`` slots instead.
    """
    cond = scene_conditions(scene, space, L, rng, nu)
    pairs = cond.pairs
    detected = [((scene.obj(s)[1], scene.obj(s)[2]), (scene.obj(o)[1], scene.obj(o)[2])) for s, o in pairs]
    gt = [((scene.obj(s)[1], scene.obj(s)[2]), p, (scene.obj(o)[1], scene.obj(o)[2]))
          for s, p, o in sorted(scene.triplets, key=lambda tr: (tr[0], tr[2], tr[1]))]
    gm: GTMatching = build_gt_matching(detected, gt, L, iou_thr=1.0)
    tokens = [vocab.index[p] for p in gm.tokens]
    prov = ["gt"] * len(tokens)
    n_fill = L - len(tokens)
    if n_fill and pseudo_pad and cond.n:
        text = np.stack([space.base(p) for p in vocab.phrases])
        sims = cond.y_so[: cond.n] @ text.T
        ranked = np.argsort(-sims, axis=1, kind="stable")
        visits = [0] * cond.n
        for k in range(n_fill):
            j = k % cond.n
            tokens.append(int(ranked[j, visits[j] % pseudo_top_k]))
            visits[j] += 1
            prov.append("pseudo")
    while len(tokens) < L:
        tokens.append(0)
        prov.append("pad")
    return TrainingExample(RelationSequence(tokens, prov), cond, gm.M, scene.id, gm.dropped)


def build_examples(scenes, vocab, L, space, seed: int, nu: float | None = None, **kw) -> list[TrainingExample]:
    return [build_training_example(s, vocab, L, space, np.random.default_rng([seed, s.id, 1]), nu, **kw)
            for s in scenes]


def pseudo_pair_assignment(example: TrainingExample) -> list[int]:
    """Pair index each slot was built for (pseudo slots follow the round-robin)."""
    out, k = [], 0
    for i, p in enumerate(example.seq.provenance):
        if p == "gt":
            out.append(int(np.argmax(example.M.M[i])))
        elif p == "pseudo":
            out.append(k % example.cond.n)
            k += 1
        else:
            out.append(-1)
    return out
