import math

import numpy as np
import pytest

from ct2rep.config import RunConfig
from ct2rep.decoding import beam_search, generate, greedy
from ct2rep.layers import make_rng
from ct2rep.model import CT2Rep, MCLN, RelationalMemory, TransformerEncoder
from ct2rep.tensor import ContractError, ShapeError, Tensor, backward, layer_norm, no_grad
from ct2rep.textproc import BOS, EOS, MAX_TOKENS

from conftest import tiny_model_config
from gradcheck import sampled_param_check

V = 12


@pytest.fixture
def model(tiny_cfg):
    return CT2Rep(tiny_cfg, V, seed=0)


# -- relational memory ------------------------------------------------------------------


def test_memory_step_keeps_shape():
    rm = RelationalMemory(3, 8, 2, make_rng(0))
    y = Tensor(np.random.default_rng(1).normal(size=8))
    assert rm.step(rm.initial, y).shape == (3, 8)
    assert len(rm.run(Tensor(np.zeros((5, 8))))) == 5


def test_memory_attends_over_slots_plus_token():
    rm = RelationalMemory(3, 8, 2, make_rng(0))
    rm.step(rm.initial, Tensor(np.ones(8)))
    assert rm.attn.last_weights.shape == (2, 3, 4)  # heads, S queries, S+1 keys


def test_memory_rejects_bad_token_shape():
    rm = RelationalMemory(3, 8, 2, make_rng(0))
    with pytest.raises(ShapeError):
        rm.step(rm.initial, Tensor(np.ones(7)))


def _forced_gates(rm, input_bias, forget_bias):
    for proj in (rm.input_gate_proj, rm.memory_gate_proj):
        proj.weight.data[...] = 0.0
        proj.bias.data[...] = 0.0
    rm.input_gate_proj.bias.data[: rm.dim] = input_bias
    rm.input_gate_proj.bias.data[rm.dim:] = forget_bias


def test_closed_input_gate_keeps_memory():
    rm = RelationalMemory(3, 8, 2, make_rng(0))
    _forced_gates(rm, -1000.0, 1000.0)
    m = Tensor(np.random.default_rng(2).normal(size=(3, 8)))
    out = rm.step(m, Tensor(np.random.default_rng(3).normal(size=8)))
    np.testing.assert_allclose(out.data, m.data, atol=1e-12)


def test_open_input_gate_replaces_memory():
    rm = RelationalMemory(3, 8, 2, make_rng(0))
    _forced_gates(rm, 1000.0, -1000.0)
    m = Tensor(np.random.default_rng(2).normal(size=(3, 8)))
    y = Tensor(np.random.default_rng(3).normal(size=8))
    out = rm.step(m, y)
    kv = np.concatenate([m.data, y.data[None]])
    cand = m.data + rm.attn(m, Tensor(kv), Tensor(kv)).data
    cand = cand + rm.mlp(Tensor(cand)).data
    np.testing.assert_allclose(out.data, np.tanh(cand), atol=1e-12)


def test_memory_initial_state_is_identity_block():
    rm = RelationalMemory(3, 8, 2, make_rng(0))
    np.testing.assert_array_equal(rm.initial.data, np.eye(3, 8))


# -- MCLN --------------------------------------------------------------------------------


def test_mcln_with_zero_deltas_is_layer_norm():
    mc = MCLN(8, make_rng(0))
    mc.delta_gamma.zero_()
    mc.delta_beta.zero_()
    rng = np.random.default_rng(1)
    x, mem = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    plain = layer_norm(Tensor(x), mc.gamma, mc.beta, mc.eps).data
    assert np.max(np.abs(mc(Tensor(x), Tensor(mem)).data - plain)) < 1e-12


def test_mcln_depends_on_memory():
    mc = MCLN(8, make_rng(0))
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 8)))
    a = mc(x, Tensor(rng.normal(size=(2, 8)))).data
    b = mc(x, Tensor(rng.normal(size=(2, 8)))).data
    assert not np.allclose(a, b)


def test_mcln_rejects_mismatched_memory():
    mc = MCLN(8, make_rng(0))
    with pytest.raises(ShapeError):
        mc(Tensor(np.ones((2, 8))), Tensor(np.ones((2, 4))))


def test_encoder_rejects_empty_input():
    enc = TransformerEncoder(8, 1, 2, 2, make_rng(0))
    with pytest.raises(ShapeError):
        enc(Tensor(np.zeros((0, 8))))


# -- teacher forcing and decoding ---------------------------------------------------------


def test_teacher_forcing_is_causal(model, tiny_volume):
    ids = [BOS, 4, 5, 6, 7, 8]
    h = model.encode(tiny_volume)
    base = model.logits(ids, h).data
    for t in range(len(ids) - 1):
        changed = list(ids)
        changed[t + 1] = 9 if ids[t + 1] != 9 else 10
        out = model.logits(changed, h).data
        np.testing.assert_array_equal(out[: t + 1], base[: t + 1])


def test_teacher_forcing_future_gradient_is_zero(model, tiny_volume):
    ids = [BOS, 4, 5, 6, 7]
    h = model.encode(tiny_volume)
    x = Tensor(model.decoder.embed_tokens(ids).data, requires_grad=True)
    states = model.memory.run(x)
    logits = model.decoder(x, h, model.readout(states))
    t = 2
    backward(logits[t].sum())
    assert np.all(x.grad[t + 1:] == 0.0)
    assert np.any(x.grad[: t + 1] != 0.0)


def test_decode_step_matches_teacher_forcing(model, tiny_volume):
    ids = [BOS, 4, 5, 6]
    with no_grad():
        h = model.encode(tiny_volume)
        full = model.logits(ids, h).data
        memory = []
        for i in range(len(ids)):
            step, memory = model.decode_step(ids[: i + 1], h, memory)
            np.testing.assert_allclose(step.data, full[i], atol=1e-12)


def test_decode_step_checks_memory_length(model, tiny_volume):
    h = model.encode(tiny_volume)
    with pytest.raises(ContractError):
        model.decode_step([BOS, 4], h, [])


def test_greedy_is_deterministic_and_bounded(model, tiny_volume):
    a = generate(model, tiny_volume, max_tokens=15)
    b = generate(model, tiny_volume, max_tokens=15)
    assert a == b
    assert a[0] == BOS and len(a) <= 15


def test_beam_of_one_equals_greedy(model, tiny_volume):
    h = model.encode(tiny_volume)
    with no_grad():
        assert beam_search(model, h, 1, max_tokens=15) == greedy(model, h, max_tokens=15)


def test_beam_search_is_bounded(model, tiny_volume):
    out = generate(model, tiny_volume, mode="beam", beam_size=3, max_tokens=12)
    assert out[0] == BOS and len(out) <= 12


def test_generation_never_exceeds_cap(tiny_volume):
    cfg = tiny_model_config(max_tokens=400)
    m = CT2Rep(cfg, V, seed=0)
    m.decoder.head.zero_()
    m.decoder.head.bias.data[5] = 10.0  # never emits EOS
    out = generate(m, tiny_volume, max_tokens=10_000)
    assert len(out) == MAX_TOKENS
    assert EOS not in out


def test_uniform_logits_give_log_vocab_loss(model, tiny_volume):
    model.decoder.head.zero_()
    loss = model.loss(tiny_volume, [BOS, 4, 5, 6, EOS]).item()
    assert loss == pytest.approx(math.log(V), abs=1e-12)


def test_loss_needs_a_target(model, tiny_volume):
    with pytest.raises(ContractError):
        model.loss(tiny_volume, [BOS])


def test_end_to_end_gradients(model, tiny_volume):
    ids = [BOS, 4, 7, 5, EOS]
    err, name, worst = sampled_param_check(model, lambda: model.loss(tiny_volume, ids), per_param=3)
    assert err < 1e-3, (name, worst)
    assert worst < 1e-3, name


def test_param_groups_split_visual_from_rest(model):
    groups = model.param_groups()
    assert len(groups["visual"]) == len(model.visual.parameters())
    assert len(groups["visual"]) + len(groups["other"]) == len(model.parameters())


def test_same_seed_same_weights(tiny_cfg):
    a, b = CT2Rep(tiny_cfg, V, seed=3).state_dict(), CT2Rep(tiny_cfg, V, seed=3).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_single_sample_overfits():
    """Desk config, one sample, 200 Adam steps: loss falls below 0.1."""
    from ct2rep.optim import Adam

    cfg = RunConfig.desk()
    m = CT2Rep(cfg.model, 40, seed=0)
    vol = np.random.default_rng(0).uniform(-1, 1, size=cfg.model.volume_shape)
    ids = [BOS] + list(np.random.default_rng(1).integers(4, 40, size=20)) + [EOS]
    opt = Adam(m.param_groups(), {"visual": cfg.optim.lr_visual, "other": cfg.optim.lr_other},
               (cfg.optim.beta1, cfg.optim.beta2))
    for _ in range(200):
        opt.zero_grad()
        loss = m.loss(vol, ids)
        loss.backward()
        opt.step()
    assert m.loss(vol, ids).item() < 0.1
