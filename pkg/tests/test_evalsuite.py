import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from relgen.evalsuite import (CommonsensePrior, TripletPrediction, caption_concepts, diversity_count, gt_triplets,
                              load_predictions, metrics_report, recall_at_k, rerank_with_prior, save_predictions,
                              spice_pr_curve, t2i_retrieval)
from relgen.synthworld import gen_dataset, mock_encode

A, B, C = (0.0, 0.0, 0.4, 0.4), (0.5, 0.5, 0.9, 0.9), (0.1, 0.5, 0.3, 0.9)


def pred(s_cat, s_box, p, o_cat, o_box, score):
    return TripletPrediction((None, s_cat, list(s_box)), p, (None, o_cat, list(o_box)), score)


GT = [(("person", A), "ride", ("horse", B)), (("person", A), "hold", ("cup", C)), (("dog", B), "chase", ("horse", C))]


def test_recall_hand_counted_two_of_three():
    preds = [pred("person", A, "ride", "horse", B, 0.9),
             pred("person", A, "ride", "horse", B, 0.85),       # duplicate cannot match twice
             pred("person", A, "carry", "cup", C, 0.8),          # synonym of hold, but no synonym map given
             pred("dog", A, "chase", "horse", C, 0.7),           # subject box off
             pred("dog", B, "chase", "horse", C, 0.6),
             pred("person", A, "hold", "cup", C, 0.1)]          # outside the top 5
    assert recall_at_k([preds], [GT], 5) == pytest.approx(2 / 3)
    assert recall_at_k([preds], [GT], 6) == 1.0
    assert recall_at_k([preds], [GT], 5, {"hold": {"hold", "carry"}}) == 1.0


def test_recall_identical_and_disjoint():
    exact = [pred(s[0], s[1], p, o[0], o[1], 0.5) for s, p, o in GT]
    assert recall_at_k([exact], [GT], 3) == 1.0
    other = [pred(s[0], s[1], "wear", o[0], o[1], 0.5) for s, p, o in GT]
    assert recall_at_k([other], [GT], 10) == 0.0
    with pytest.raises(ValueError):
        recall_at_k([exact], [GT], 0)


def test_recall_is_micro_averaged():
    one = [pred("person", A, "ride", "horse", B, 0.5)]
    assert recall_at_k([one, []], [GT, GT[:1]], 5) == pytest.approx(1 / 4)


@given(st.integers(0, 10 ** 6))
def test_recall_non_decreasing_in_k(seed):
    rng = np.random.default_rng(seed)
    cats, preds_ = ["person", "horse", "cup", "dog"], ["ride", "hold", "chase", "wear"]
    boxes = [A, B, C]
    preds = [pred(cats[rng.integers(4)], boxes[rng.integers(3)], preds_[rng.integers(4)], cats[rng.integers(4)],
                  boxes[rng.integers(3)], float(rng.random())) for _ in range(12)]
    values = [recall_at_k([preds], [GT], k) for k in range(1, 14)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_prediction_record_round_trip(tmp_path):
    p = pred("person", A, "ride", "horse", B, 0.75)
    p.refined_score = 0.5
    save_predictions({3: [p], 1: []}, tmp_path / "p.jsonl")
    lines = (tmp_path / "p.jsonl").read_text().splitlines()
    assert lines[0].startswith('{"scene_id": 1')
    back = load_predictions(tmp_path / "p.jsonl")
    assert back[3][0].to_record() == p.to_record() and back[1] == []
    with pytest.raises(ValueError):
        pred("person", (0.5, 0, 0.4, 1), "ride", "horse", B, 0.5).validate()
    with pytest.raises(ValueError):
        pred("person", A, "ride", "horse", B, 1.5).validate()
    with pytest.raises(ValueError):
        p.validate(phrases=["hold"])


def test_spice_hand_computed_points():
    a, b, c, x = ("person", "ride", "horse"), ("person", "hold", "cup"), ("dog", "chase", "horse"), \
        ("dog", "wear", "cup")
    curve = spice_pr_curve([[a, x, b, a, c]], [{a, b, c}], k_grid=(1, 2, 3, 5))
    expected = [(1, 1.0, 1 / 3), (2, 0.5, 1 / 3), (3, 2 / 3, 2 / 3), (5, 0.75, 1.0)]
    for (k, p, r), (ek, ep, er) in zip(curve, expected):
        assert k == ek and p == pytest.approx(ep) and r == pytest.approx(er)


def test_spice_perfect_list_and_errors():
    targets = [("a", "p", "b"), ("a", "q", "b"), ("c", "p", "d")]
    (k, p, r), = spice_pr_curve([targets], [set(targets)], k_grid=(3,))
    assert (p, r) == (1.0, 1.0)
    with pytest.raises(ValueError):
        spice_pr_curve([targets], [set()])
    with pytest.raises(ValueError):
        spice_pr_curve([targets], [set(targets)], k_grid=(3, 2))


@given(st.lists(st.lists(st.tuples(st.sampled_from("ab"), st.sampled_from("pqr"), st.sampled_from("cd")),
                         max_size=10), min_size=1, max_size=4), st.integers(0, 10 ** 6))
def test_spice_recall_monotone_and_bounded(ranked, seed):
    rng = np.random.default_rng(seed)
    targets = [{("a", "p", "c"), ("b", rng.choice(list("pqr")), "d")} for _ in ranked]
    curve = spice_pr_curve(ranked, targets)
    recalls = [r for _, _, r in curve]
    assert all(x <= y for x, y in zip(recalls, recalls[1:]))
    assert all(0 <= p <= 1 and 0 <= r <= 1 for _, p, r in curve)


def test_diversity_counts():
    assert diversity_count([], []) == (0, 0)
    targets = [{("a", "p", "b"), ("a", "q", "b"), ("c", "p", "b")}]
    assert diversity_count([list(targets[0])], targets) == (2, 2)
    preds = [[("a", "p", "b"), ("x", "p", "b"), ("a", "r", "c")]]
    assert diversity_count(preds, targets) == (2, 1)


def test_diversity_matches_set_union_oracle(world):
    rng = np.random.default_rng(0)
    scenes = gen_dataset(40, world, seed=9)
    preds = [[(o1[1], world.predicates[rng.integers(48)], o2[1]) for o1 in s.objects for o2 in s.objects]
             + sorted(s.targets())[:1] for s in scenes]
    targets = [s.targets() for s in scenes]
    predicted = set().union(*[{(p, o) for _, p, o in ps} for ps in preds])
    correct = set().union(*[{(p, o) for s, p, o in ps if (s, p, o) in ts} for ps, ts in zip(preds, targets)])
    assert diversity_count(preds, targets) == (len(predicted), len(correct))


def _retrieval_setup(world, space, n=64):
    scenes, seen = [], set()
    for s in gen_dataset(400, world, seed=21):
        key = frozenset(s.targets())
        if key not in seen:
            seen.add(key)
            scenes.append(s)
        if len(scenes) == n:
            break
    images = np.stack([mock_encode("image", ([o[1] for o in s.objects], [p for _, p, _ in s.triplets]), space,
                                   nu=0.0) for s in scenes])
    return scenes, images


def test_t2i_ground_truth_captions_retrieve_their_image(world, space):
    scenes, images = _retrieval_setup(world, space)
    res = t2i_retrieval([sorted(s.targets()) for s in scenes], images, space)
    assert res == {1: 1.0, 5: 1.0, 10: 1.0}


def test_t2i_shuffled_captions_are_near_chance(world, space):
    scenes, images = _retrieval_setup(world, space)
    captions = [sorted(s.targets()) for s in scenes]
    rng = np.random.default_rng(0)
    r1 = [t2i_retrieval([captions[j] for j in rng.permutation(64)], images, space, ks=(1,))[1] for _ in range(200)]
    assert abs(np.mean(r1) - 1 / 64) < 0.01


def test_t2i_ties_go_to_the_smaller_index(space):
    caption = [("person", "ride", "horse")]
    img = mock_encode("image", (["person", "horse"], ["ride"]), space, nu=0.0)
    images = np.stack([img, img, img])
    assert t2i_retrieval([caption] * 3, images, space, ks=(1, 2, 3)) == {1: 1 / 3, 2: 2 / 3, 3: 1.0}
    with pytest.raises(ValueError):
        t2i_retrieval([caption] * 3, images, space, ks=(5,))


def test_caption_dedupes_repeated_triplets():
    assert caption_concepts([("a", "p", "b"), ("a", "p", "b"), ("c", "q", "b")]) == ["a", "p", "b", "c", "q", "b"]


def test_prior_rows_are_distributions(world):
    prior = CommonsensePrior.from_world(world)
    for row in prior.rows.values():
        assert abs(row.sum() - 1) < 1e-12 and (row >= 0).all()
    key = next(iter(world.table()))
    row = world.table()[key]
    assert prior.argmax(*key) == max(row, key=row.get)
    with pytest.raises(ValueError):
        CommonsensePrior(["a", "b"], {("x", "y"): [0.7, 0.7]})


def test_prior_json_round_trip_and_missing_rows(tmp_path, world):
    prior = CommonsensePrior.from_world(world)
    prior.to_json(tmp_path / "prior.json")
    back = CommonsensePrior.from_json(tmp_path / "prior.json")
    assert back.rows.keys() == prior.rows.keys()
    assert back.prob("ride", "zebra", "cloud") == pytest.approx(1 / 48)
    assert back.missing == 1


def test_rerank_hand_multiplied_order():
    prior = CommonsensePrior(["a", "b", "c"], {("s", "o"): [0.1, 0.6, 0.3]})
    preds = [pred("s", A, "a", "o", B, 0.9), pred("s", A, "b", "o", B, 0.5), pred("s", A, "c", "o", B, 0.4)]
    out = rerank_with_prior(preds, prior)
    assert [p.predicate for p in out] == ["b", "c", "a"]
    assert [p.refined_score for p in out] == pytest.approx([0.3, 0.12, 0.09])
    assert [p.score for p in preds] == [0.9, 0.5, 0.4]


def test_rerank_zero_prior_sinks_and_uniform_keeps_order():
    prior = CommonsensePrior(["a", "b", "c"], {("s", "o"): [0.0, 0.5, 0.5]})
    preds = [pred("s", A, "a", "o", B, 0.99), pred("s", A, "b", "o", B, 0.2)]
    out = rerank_with_prior(preds, prior)
    assert out[-1].predicate == "a" and out[-1].refined_score == 0.0
    uniform = CommonsensePrior.uniform(["a", "b", "c"], [("s", "o")])
    ranked = [pred("s", A, "abc"[i % 3], "o", B, 1 - i / 10) for i in range(6)]
    assert [p.score for p in rerank_with_prior(ranked, uniform)] == [p.score for p in ranked]


def test_metrics_report_document(world, space):
    scenes = gen_dataset(12, world, seed=4)
    preds = {s.id: [pred(g[0][0], g[0][1], g[1], g[2][0], g[2][1], 0.9) for g in gt_triplets(s)] for s in scenes}
    images = np.stack([mock_encode("image", ([o[1] for o in s.objects], [p for _, p, _ in s.triplets]), space,
                                   nu=0.0) for s in scenes])
    rep = metrics_report(scenes, preds, space, world.synonym_map(), images)
    assert set(rep) == {"recall@5", "recall@10", "recall@15", "t2i@1", "t2i@5", "t2i@10", "spice", "diversity"}
    assert rep["recall@10"] == 1.0
    assert rep["spice"][-1]["r"] == 1.0
