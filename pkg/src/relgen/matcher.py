"""Relation-to-pair similarity, Hungarian assignment and multi-round matching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SIMILARITY_MODES = ("union_visual", "projected")


@dataclass
class SimilarityMatrix:
    S: np.ndarray
    mode: str = "union_visual"


@dataclass
class Assignment:
    """(relation_index, pair_index, round_number) triples, one per relation."""

    links: list = field(default_factory=list)

    def pair_of(self) -> dict[int, int]:
        return {r: p for r, p, _ in self.links}

    @property
    def rounds(self) -> int:
        return max((k for _, _, k in self.links), default=0)


@dataclass
class MatchingMatrix:
    M: np.ndarray


def cosine_matrix(a, b) -> np.ndarray:
    """Row-wise cosine similarities; a zero-norm row scores 0 against everything."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    a_hat = np.divide(a, na, out=np.zeros_like(a), where=na > 0)
    b_hat = np.divide(b, nb, out=np.zeros_like(b), where=nb > 0)
    return np.clip(a_hat @ b_hat.T, -1.0, 1.0)


def similarity_matrix(emb_rows, cond, mode: str = "union_visual", projected=None) -> SimilarityMatrix:
    """L x N cosine similarities between relation embeddings and the real pairs.

    ``union_visual`` compares with the union-region embeddings ``cond.y_so``;
    ``projected`` with the encoder output, passed as ``projected`` ([L, d] or
    [N, d] rows).
    """
    if mode not in SIMILARITY_MODES:
        raise ValueError(f"unknown similarity mode {mode!r}")
    n = cond.n
    if mode == "union_visual":
        targets = np.asarray(cond.y_so)[:n]
    else:
        if projected is None:
            raise ValueError("projected mode needs the encoded condition rows")
        targets = np.asarray(projected)[:n]
    return SimilarityMatrix(cosine_matrix(emb_rows, targets), mode)


def _solve(cost: np.ndarray):
    """Shortest-augmenting-path Hungarian; returns (col -> row, u, v)."""
    n = cost.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)      # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=int)
    a = np.zeros((n + 1, n + 1))
    a[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, INF)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    return p[1:] - 1, u[1:], v[1:]


def _has_perfect_matching(adj: np.ndarray, rows: list[int], cols: list[int]) -> bool:
    match_row = {}

    def try_col(c, seen):
        for r in rows:
            if adj[r, c] and r not in seen:
                seen.add(r)
                if r not in match_row or try_col(match_row[r], seen):
                    match_row[r] = c
                    return True
        return False

    return all(try_col(c, set()) for c in cols)


def hungarian(cost) -> np.ndarray:
    """Permutation ``sigma`` (column j -> row sigma[j]) minimising sum_j cost[sigma[j], j].

    Among optimal permutations the lexicographically smallest sigma is
    returned: optimal assignments are exactly the perfect matchings on the
    zero-reduced-cost edges of an optimal dual, and the smallest one is
    found greedily column by column.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost entries must be finite")
    n = cost.shape[0]
    if n == 0:
        return np.zeros(0, dtype=int)
    _, u, v = _solve(cost)
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight = (cost - u[:, None] - v[None, :]) <= tol
    sigma = np.empty(n, dtype=int)
    rows_left = list(range(n))
    for j in range(n):
        rest_cols = list(range(j + 1, n))
        for r in rows_left:
            if not tight[r, j]:
                continue
            others = [x for x in rows_left if x != r]
            if _has_perfect_matching(tight, others, rest_cols):
                sigma[j] = r
                rows_left = others
                break
        else:  # numerical trouble; fall back to the solver's own matching
            return _solve(cost)[0]
    return sigma


def assignment_cost(cost, sigma) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[sigma[j], j] for j in range(len(sigma))))


def multi_round_match(S) -> Assignment:
    """Assign every relation (row of S) to a pair (column) over repeated rounds.

    Each round pads the pairs with empty slots up to the number of relations
    still unassigned (empty slots cost 0, real pairs cost -S), solves the
    assignment, keeps the relations that landed on real pairs and repeats.
    Every round re-offers all pairs. When fewer relations than pairs remain,
    dummy zero-cost rows pad the problem instead.
    """
    S = np.asarray(S.S if isinstance(S, SimilarityMatrix) else S, dtype=np.float64)
    L, N = S.shape
    if N == 0:
        raise ValueError("multi_round_match needs at least one pair")
    remaining = list(range(L))
    links = []
    rnd = 0
    while remaining:
        rnd += 1
        k = len(remaining)
        size = max(k, N)
        cost = np.zeros((size, size))
        cost[:k, :N] = -S[remaining][:, :N]
        sigma = hungarian(cost)
        taken = []
        for j in range(N):
            r = sigma[j]
            if r < k:
                links.append((remaining[r], j, rnd))
                taken.append(r)
        remaining = [rel for i, rel in enumerate(remaining) if i not in set(taken)]
    links.sort()
    return Assignment(links)


def box_iou(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for box in (a, b):
        if box.shape != (4,) or not (box[2] > box[0] and box[3] > box[1]):
            raise ValueError(f"malformed box {box.tolist()}; need x2 > x1 and y2 > y1")
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


@dataclass
class GTMatching:
    M: MatchingMatrix
    tokens: list            # predicate of every attached GT triplet, in slot order
    slot_pairs: list        # detected-pair indices each slot attached to
    dropped: int


def build_gt_matching(detected_pairs, gt_triplets, L: int, iou_thr: float = 0.5) -> GTMatching:
    """Attach GT triplets to detected pairs by box IoU and category.

    ``detected_pairs``: [((subj_cat, subj_box), (obj_cat, obj_box)), ...];
    ``gt_triplets``: [((subj_cat, subj_box), predicate, (obj_cat, obj_box)), ...].
    A triplet attaches to every pair whose subject and object both reach
    ``iou_thr`` with matching categories. Unattached triplets are dropped and
    counted; attached ones fill slots in order, truncated at L.
    """
    N = len(detected_pairs)
    M = np.zeros((L, N))
    tokens, slot_pairs = [], []
    dropped = 0
    for (s_cat, s_box), pred, (o_cat, o_box) in gt_triplets:
        hits = [j for j, ((ds_cat, ds_box), (do_cat, do_box)) in enumerate(detected_pairs)
                if ds_cat == s_cat and do_cat == o_cat
                and box_iou(ds_box, s_box) >= iou_thr and box_iou(do_box, o_box) >= iou_thr]
        if not hits:
            dropped += 1
            continue
        if len(tokens) >= L:
            continue
        M[len(tokens), hits] = 1.0
        tokens.append(pred)
        slot_pairs.append(hits)
    return GTMatching(MatchingMatrix(M), tokens, slot_pairs, dropped)
