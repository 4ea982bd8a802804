import numpy as np
import pytest
import torch
from hypothesis import settings

from relgen.denoiser import ConditionSet, DenoiserConfig, RelationModel
from relgen.numerics import make_generator
from relgen.relvocab import RelationSequence, RelationVocabulary
from relgen.synthworld import build_concept_space, default_world

settings.register_profile("repo", max_examples=40, deadline=None)
settings.load_profile("repo")

torch.set_num_threads(1)

F64 = torch.float64

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


class Example:
    def __init__(self, seq, cond, M):
        self.seq, self.cond, self.M = seq, cond, M


def make_model(d=16, L=4, n_layers=1, n_heads=2, vocab_size=5, T=50, seed=0, dtype=F64, tau_r=1.0):
    gen = np.random.default_rng(seed)
    cfg = DenoiserConfig(d=d, n_layers=n_layers, n_heads=n_heads, ffn_dim=2 * d, L=L, d_feat=d, T=T)
    vocab = RelationVocabulary([f"p{i}" for i in range(vocab_size)], gen.standard_normal((vocab_size, d)),
                               sigma0=0.1, dtype=dtype)
    return RelationModel(cfg, vocab, tau_r=tau_r, dtype=dtype).reset_parameters(make_generator(seed, 1))


def make_examples(model, n_pairs=(2, 1), seed=0):
    gen = np.random.default_rng(seed)
    L, d_y, d = model.cfg.L, model.cfg.d_y, model.cfg.d_feat
    out = []
    for n in n_pairs:
        so = gen.standard_normal((n, d))
        so /= np.linalg.norm(so, axis=1, keepdims=True)
        cond = ConditionSet.from_rows(gen.standard_normal((n, d_y)), so, L)
        tokens = gen.integers(0, model.emb.size, L)
        prov = (["gt"] * n + ["pseudo"] * L)[: L - 1] + ["pad"]
        M = np.zeros((L, n))
        M[np.arange(n), np.arange(n)] = 1.0
        out.append(Example(RelationSequence(tokens, prov), cond, M))
    return out


@pytest.fixture
def tiny_model():
    return make_model()


@pytest.fixture(scope="session")
def world():
    return default_world(0)


@pytest.fixture(scope="session")
def space(world):
    return build_concept_space(world)
