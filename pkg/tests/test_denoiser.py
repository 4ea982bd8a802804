import numpy as np
import pytest
import torch

from conftest import make_examples, make_model
from relgen.denoiser import (ConditionEncoder, ConditionSet, DenoiserConfig, MultiHeadAttention, RelationModel,
                             collate_conditions, cross_attention, denoise, timestep_embedding)
from relgen.numerics import finite_difference_check, gradient_of, make_generator
from relgen.objectives import collate_examples, draw_noise, loss_total
from relgen.schedule import build_schedule

F64 = torch.float64


def randn(*shape, seed=0):
    return torch.randn(*shape, generator=make_generator(seed), dtype=F64)


def test_config_invariants():
    with pytest.raises(ValueError):
        DenoiserConfig(d=10, n_heads=3)
    with pytest.raises(ValueError):
        DenoiserConfig(L=0)
    cfg = DenoiserConfig(d_feat=12, ffn_dim=40)
    assert cfg.d_y == 60 and cfg.tau_hidden == 40


def test_condition_set_padding_and_validation():
    rng = np.random.default_rng(0)
    so = rng.standard_normal((3, 4))
    so /= np.linalg.norm(so, axis=1, keepdims=True)
    c = ConditionSet.from_rows(rng.standard_normal((3, 20)), so, L=5, pairs=[(0, 1), (1, 0), (2, 0)])
    c.validate(L=5)
    assert c.n == 3 and c.mask.tolist() == [True] * 3 + [False] * 2
    assert np.all(c.y[3:] == 0)
    short = ConditionSet.from_rows(rng.standard_normal((3, 20)), so, L=2, pairs=[(0, 1), (1, 0), (2, 0)])
    assert short.n == 2 and short.y.shape == (2, 20) and len(short.pairs) == 2
    c.y[4, 0] = 1.0
    with pytest.raises(ValueError):
        c.validate()


def test_encoder_matches_two_matmul_oracle():
    enc = ConditionEncoder(d_y=5, hidden=4, d=3, dtype=F64)
    w1, b1, w2, b2 = randn(4, 5, seed=1), randn(4, seed=2), randn(3, 4, seed=3), randn(3, seed=4)
    with torch.no_grad():
        enc.fc1.weight.copy_(w1)
        enc.fc1.bias.copy_(b1)
        enc.fc2.weight.copy_(w2)
        enc.fc2.bias.copy_(b2)
    y = randn(6, 5, seed=5).numpy()
    h = np.maximum(y @ w1.numpy().T + b1.numpy(), 0)
    oracle = h @ w2.numpy().T + b2.numpy()
    np.testing.assert_allclose(enc(torch.tensor(y)).detach().numpy(), oracle, rtol=0, atol=1e-12)
    zero_row = enc(torch.zeros(1, 5, dtype=F64)).detach().numpy()[0]
    np.testing.assert_allclose(zero_row, np.maximum(b1.numpy(), 0) @ w2.numpy().T + b2.numpy(), atol=1e-12)


def test_encoder_rejects_wrong_width():
    with pytest.raises(ValueError):
        ConditionEncoder(5, 4, 3, F64)(torch.zeros(2, 6, dtype=F64))


def _hand_attention(seed=0):
    attn = MultiHeadAttention(4, 2, F64)
    with torch.no_grad():
        attn.w_q.weight.copy_(randn(4, 4, seed=seed + 1))
        attn.w_k.weight.copy_(randn(4, 4, seed=seed + 2))
        attn.w_v.weight.copy_(randn(4, 4, seed=seed + 3))
        attn.w_o.weight.copy_(randn(4, 4, seed=seed + 4))
        attn.w_o.bias.copy_(randn(4, seed=seed + 5))
    return attn


def test_cross_attention_matches_direct_oracle():
    attn = _hand_attention()
    q, kv = randn(2, 4, seed=10), randn(3, 4, seed=11)
    W = {k: getattr(attn, k).weight.detach().numpy() for k in ("w_q", "w_k", "w_v", "w_o")}
    Q, K, V = q.numpy() @ W["w_q"].T, kv.numpy() @ W["w_k"].T, kv.numpy() @ W["w_v"].T
    heads = []
    for h in range(2):
        sl = slice(2 * h, 2 * h + 2)
        logits = Q[:, sl] @ K[:, sl].T / np.sqrt(2)
        a = np.exp(logits - logits.max(1, keepdims=True))
        a /= a.sum(1, keepdims=True)
        heads.append(a @ V[:, sl])
    oracle = np.concatenate(heads, 1) @ W["w_o"].T + attn.w_o.bias.detach().numpy()
    out = cross_attention(attn, q, kv, kv).detach().numpy()
    np.testing.assert_allclose(out, oracle, rtol=0, atol=1e-12)


def test_single_unmasked_key_returns_its_value():
    attn = _hand_attention(1)
    q, kv = randn(2, 4, seed=12), randn(3, 4, seed=13)
    out = cross_attention(attn, q, kv, kv, mask=torch.tensor([False, True, False]))
    expected = attn.w_o(attn.w_v(kv[1]))
    assert torch.allclose(out, expected.expand(2, 4), rtol=0, atol=1e-12)


def test_identical_rows_make_output_independent_of_count():
    attn = _hand_attention(2)
    q, row = randn(2, 4, seed=14), randn(1, 4, seed=15)
    one = cross_attention(attn, q, row, row)
    five = cross_attention(attn, q, row.expand(5, 4), row.expand(5, 4))
    assert torch.allclose(one, five, rtol=0, atol=1e-12)


def test_cross_attention_rejects_fully_masked_keys():
    attn = _hand_attention()
    with pytest.raises(ValueError):
        cross_attention(attn, randn(2, 4), randn(3, 4), randn(3, 4), mask=torch.zeros(3, dtype=torch.bool))


def test_timestep_embedding_shape_and_distinct_rows():
    emb = timestep_embedding(torch.tensor([1, 2, 200]), 7, F64)
    assert emb.shape == (3, 7)
    assert torch.all(emb[:, -1] == 0)
    assert not torch.allclose(emb[0], emb[1])


def _inputs(model, n=2, seed=0):
    cond = make_examples(model, (n,), seed=seed)[0].cond
    x_t = randn(model.cfg.L, model.cfg.d, seed=seed + 100)
    return x_t, cond


def test_denoise_output_shape(tiny_model):
    for n in (1, 2, 4):
        x_t, cond = _inputs(tiny_model, n)
        assert denoise(tiny_model, x_t, 7, cond).shape == (4, 16)


def test_denoise_rejects_out_of_range_t(tiny_model):
    x_t, cond = _inputs(tiny_model)
    for t in (0, 51):
        with pytest.raises(ValueError):
            denoise(tiny_model, x_t, t, cond)


def test_masked_condition_row_contents_are_ignored(tiny_model):
    x_t, cond = _inputs(tiny_model)
    y, mask = collate_conditions([cond], F64)
    base = tiny_model(x_t[None], torch.tensor([9]), y, mask)
    y2 = y.clone()
    y2[0, 3] = randn(y.shape[-1], seed=7)
    assert torch.equal(tiny_model(x_t[None], torch.tensor([9]), y2, mask), base)


def test_single_pair_leaves_one_key(tiny_model):
    _, cond = _inputs(tiny_model, n=1)
    _, mask = collate_conditions([cond], F64)
    assert int(mask.sum()) == 1


def test_condition_permutation_invariance():
    model = make_model(n_layers=2)
    x_t, cond = _inputs(model, n=3, seed=3)
    y, mask = collate_conditions([cond], F64)
    perm = torch.tensor([2, 3, 0, 1])
    a = model(x_t[None], torch.tensor([20]), y, mask)
    b = model(x_t[None], torch.tensor([20]), y[:, perm], mask[:, perm])
    assert torch.allclose(a, b, rtol=0, atol=1e-12)


def test_slot_permutation_equivariance():
    model = make_model(n_layers=2)
    x_t, cond = _inputs(model, seed=4)
    perm = torch.tensor([3, 1, 0, 2])
    a = denoise(model, x_t, 11, cond)
    b = denoise(model, x_t[perm], 11, cond)
    assert torch.allclose(a[perm], b, rtol=0, atol=1e-12)


def test_time_is_injected(tiny_model):
    for seed in range(5):
        x_t, cond = _inputs(tiny_model, seed=seed)
        assert not torch.allclose(denoise(tiny_model, x_t, 5, cond), denoise(tiny_model, x_t, 6, cond))


def _loss_fn(model, T=50, seed=0):
    batch = collate_examples(make_examples(model), F64)
    sched = build_schedule(T)
    noise = draw_noise((*batch.shape, model.cfg.d), sched, make_generator(seed, 9), F64)
    return lambda: loss_total(batch, model, sched, lam=1.0, kappa=0.5, noise=noise).l_total


def test_no_dead_parameters(tiny_model):
    grads = gradient_of(_loss_fn(tiny_model)(), tiny_model.params())
    dead = [name for name, g in grads.items() if float(g.abs().max()) == 0.0]
    assert not dead
    assert {n.split(".")[0] for n in grads} == {"denoiser", "tau", "emb"}


def test_parameter_names_and_checkpoint_round_trip(tmp_path, tiny_model):
    sched = build_schedule(50)
    tiny_model.save(tmp_path / "m.ckpt", sched, extra={"run": 1})
    back, header = RelationModel.load(tmp_path / "m.ckpt", dtype=F64)
    assert header["run"] == 1 and header["schedule"]["T"] == 50
    x_t, cond = _inputs(tiny_model)
    # parameters are stored as float32
    assert torch.allclose(denoise(back, x_t, 3, cond), denoise(tiny_model, x_t, 3, cond), atol=1e-4)
    assert set(back.params()) == set(tiny_model.params())


def test_reset_parameters_is_seeded():
    a, b = make_model(seed=3), make_model(seed=3)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n


def test_gradients_match_finite_differences_sampled(tiny_model):
    errs = finite_difference_check(_loss_fn(tiny_model), tiny_model.params(), h=1e-6, max_entries=12)
    assert max(errs.values()) < 1e-4, {k: v for k, v in errs.items() if v >= 1e-4}
