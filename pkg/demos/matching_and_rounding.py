"""How generated relations are tied back to subject-object pairs, and how latents become phrases.

    python3 demos/matching_and_rounding.py
"""

import numpy as np
import torch

from relgen.matcher import hungarian, multi_round_match
from relgen.relvocab import RelationVocabulary, decode_sequence, embed_step, round_distribution
from relgen.schedule import build_schedule, q_sample


def main():
    # three pairs, seven generated relations: every relation must end up with a pair
    rng = np.random.default_rng(0)
    S = rng.uniform(-1, 1, (7, 3)).round(2)
    print("similarity S (relations x pairs):\n", S)
    a = multi_round_match(S)
    for round_k in range(1, a.rounds + 1):
        links = [(r, p) for r, p, k in a.links if k == round_k]
        print(f"round {round_k}: " + ", ".join(f"relation {r} -> pair {p}" for r, p in links))

    # ties: the lexicographically smallest optimal permutation wins
    print("\nall-zero 3x3 cost ->", hungarian(np.zeros((3, 3))).tolist())

    # rounding: x0 near an embedding row decodes to that phrase
    phrases = ["ride", "hold", "look at", "near"]
    table = torch.eye(4, dtype=torch.float64) * 2.0
    vocab = RelationVocabulary(phrases, table.numpy(), sigma0=0.1, dtype=torch.float64)
    tokens = [0, 3, 1]
    x0 = embed_step(tokens, vocab, torch.Generator().manual_seed(0))
    seq, probs = decode_sequence(x0, vocab)
    print("\nembed then round:", [phrases[t] for t in tokens], "->", [phrases[t] for t in seq.tokens])
    print("rounding scores:", np.round(seq.scores, 3).tolist())

    # the same row after forward noising: the rounding distribution flattens as t grows
    s = build_schedule(200)
    eps = torch.randn(4, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    for t in (1, 50, 100, 200):
        xt = q_sample(vocab.lookup([0])[0], t, eps, s)
        p = round_distribution(xt, vocab)
        print(f"t = {t:3d}: p(ride | x_t) = {p[0].item():.3f}")


if __name__ == "__main__":
    main()
