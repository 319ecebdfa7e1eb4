import numpy as np
import pytest

from moeforge import tensor as T
from moeforge.model import (BOS, EOS, EXPERT, GATE, LARGE, NON_EXPERT, PAD, TOY, ArchConfig,
                            ModelParams, build_model, forward, generate, layer_names, param_count,
                            bucket_order, sequence_loss, teacher_forcing)
from moeforge.routing import EVAL, GROUPED, TRAIN, RouterConfig

from conftest import numeric_grad, rel_err

TABLE3 = {8: 1.8e9, 16: 3e9, 32: 5.5e9, 64: 10e9, 128: 20e9}


@pytest.mark.parametrize("E", sorted(TABLE3))
def test_large_param_counts_match_table(E):
    total = param_count(LARGE.replace(num_experts=E)).total
    assert abs(total / TABLE3[E] - 1) < 0.05


def test_dense_count_close_to_table():
    assert abs(param_count(LARGE.replace(num_experts=1, dense=True)).total / 0.7e9 - 1) < 0.15


def test_count_is_affine_in_experts():
    counts = {E: param_count(LARGE.replace(num_experts=E)).total for E in (1, 2, 4)}
    d, f = LARGE.d_model, LARGE.ffn_dim
    per_expert = (2 * d * f + d + f + d) * 18
    assert counts[2] - counts[1] == per_expert
    assert counts[4] - counts[2] == 2 * per_expert


def test_breakdown_sums():
    c = param_count(LARGE)
    assert c.total == c.non_expert + c.expert + c.gate
    assert c.gate == 18 * LARGE.d_model * 64


def test_moe_layer_count():
    assert LARGE.num_moe_layers == 18
    assert sum(LARGE.is_moe(i) for i in range(24)) == 12
    assert not LARGE.is_moe(0) and LARGE.is_moe(1)


def test_stride_one_has_more_layers_and_params():
    a, b = LARGE, LARGE.replace(moe_every=1)
    assert b.num_moe_layers == 36
    assert param_count(b).total > param_count(a).total


def test_invalid_arch():
    with pytest.raises(ValueError):
        ArchConfig(vocab=10, d_model=10, ffn_dim=4, enc_layers=1, dec_layers=1, heads=3)
    with pytest.raises(ValueError):
        TOY.replace(num_experts=0)


def test_build_deterministic():
    a, b = build_model(TOY, 5), build_model(TOY, 5)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a.names())


def test_experts_differ():
    m = build_model(TOY, 0)
    assert not np.array_equal(m["enc.1.moe.expert.0.w1"].data, m["enc.1.moe.expert.1.w1"].data)


def test_tensor_count_closed_form():
    m = build_model(TOY, 0)
    enc, dec, E = TOY.enc_layers, TOY.dec_layers, TOY.num_experts
    n_moe = TOY.num_moe_layers
    per_enc, per_dec = 2 + 8 + 2, 2 + 8 + 2 + 8 + 2  # norms have g and b
    expected = 1 + enc * per_enc + dec * per_dec + 4 + (enc + dec - n_moe) * 4 + n_moe * (1 + 4 * E)
    assert len(m.names()) == expected
    assert m.num_params() == param_count(TOY).total


def test_every_tensor_has_one_role():
    m = build_model(TOY, 0)
    kinds = {r.kind for r in m.roles.values()}
    assert kinds == {NON_EXPERT, EXPERT, GATE}
    assert sum(r.kind == GATE for r in m.roles.values()) == TOY.num_moe_layers
    with pytest.raises(ValueError):
        ModelParams(TOY, dict(m.tensors), {})


def test_layer_names_matches_count_for_large():
    rows = layer_names(LARGE)
    assert sum(int(np.prod(s)) for _, _, s, _ in rows) == param_count(LARGE).total
    assert sum(r.kind == GATE for _, r, _, _ in rows) == 18


def test_forward_shape_and_finite():
    m = build_model(TOY, 0)
    logits, aux, decisions = forward(m, [3, 4, 5], [BOS, 6, 7, 8], RouterConfig(2), EVAL)
    assert logits.shape == (4, TOY.vocab)
    assert np.isfinite(logits.data).all()
    assert len(decisions) == TOY.num_moe_layers
    assert aux.item() > 0


def test_forward_rejects_out_of_range_id():
    m = build_model(TOY, 0)
    with pytest.raises(IndexError):
        forward(m, [TOY.vocab], [BOS], RouterConfig(2), EVAL)


def test_single_expert_matches_dense():
    arch = TOY.replace(num_experts=1)
    moe = build_model(arch, 3)
    dense_arch = arch.replace(dense=True)
    dense = build_model(dense_arch, 3)
    for n in dense.names():
        if ".ffn." in n:
            moe_name = n.replace(".ffn.", ".moe.expert.0.")
            src = moe[moe_name] if moe_name in moe.tensors else moe[n]
        else:
            src = moe[n]
        dense[n].data[...] = src.data
    src, tgt = np.array([[3, 4, 5, 6]]), np.array([[BOS, 7, 8]])
    a, _, _ = forward(moe, src, tgt, RouterConfig(1), EVAL)
    b, _, _ = forward(dense, src, tgt, RouterConfig(1), EVAL)
    np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-10)


def test_batch_permutation_equivariant():
    m = build_model(TOY, 1)
    rng = np.random.default_rng(0)
    src = rng.integers(3, TOY.vocab, (3, 5))
    tgt = rng.integers(3, TOY.vocab, (3, 4))
    cfg = RouterConfig(2, capacity_factor_eval=4.0)
    a, _, _ = forward(m, src, tgt, cfg, EVAL)
    perm = np.array([2, 0, 1])
    b, _, _ = forward(m, src[perm], tgt[perm], cfg, EVAL)
    np.testing.assert_allclose(a.data[perm], b.data, rtol=0, atol=1e-12)


def test_padding_keys_are_ignored():
    m = build_model(TOY.replace(num_experts=1, dense=True), 0)
    cfg = RouterConfig(1)
    a, _, _ = forward(m, [[3, 4, 5]], [[BOS, 6]], cfg, EVAL)
    b, _, _ = forward(m, [[3, 4, 5, PAD, PAD]], [[BOS, 6]], cfg, EVAL)
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_teacher_forcing_shifts():
    dec_in, labels = teacher_forcing(np.array([[5, 6, PAD], [7, 8, 9]]))
    assert dec_in.tolist() == [[BOS, 5, 6, PAD], [BOS, 7, 8, 9]]
    assert labels.tolist() == [[5, 6, EOS, PAD], [7, 8, 9, EOS]]


def test_full_loss_gradient_check():
    m = build_model(TOY, 2)
    cfg = RouterConfig(2)
    src = np.array([[3, 4, 5, 6], [7, 8, 9, 10]])
    tgt = np.array([[11, 12, 13], [14, 15, PAD]])

    def loss():
        ce, aux, _ = sequence_loss(m, src, tgt, cfg, TRAIN, np.random.default_rng(0))
        return T.add(ce, aux)

    loss().backward()
    rng = np.random.default_rng(1)
    names = m.names()
    for _ in range(40):
        t = m[names[rng.integers(len(names))]]
        index = tuple(int(rng.integers(s)) for s in t.shape)
        fd = numeric_grad(lambda: loss().item(), t, index)
        assert rel_err(t.grad[index], fd) < 1e-4


def test_generate_contract():
    m = build_model(TOY, 0)
    cfg = RouterConfig(2)
    assert generate(m, [3, 4], 0, cfg) == []
    a = generate(m, [3, 4, 5], 6, cfg)
    assert a == generate(m, [3, 4, 5], 6, cfg)
    assert len(a) <= 6 and EOS not in a


def test_bucket_order_groups_whole_sentences():
    order = bucket_order(3, 4, 2)
    assert sorted(order) == list(range(12))
    # rows are pos * B + b; first block holds sentences 0 and 1 only
    assert set(order[:6] % 4) == {0, 1} and set(order[6:] % 4) == {2, 3}
    assert list(order[:6] // 4) == [0, 0, 1, 1, 2, 2]
    with pytest.raises(ValueError):
        bucket_order(3, 4, 3)


def test_grouped_single_group_matches_plain():
    m = build_model(TOY, 0)
    src, tgt = np.array([[3, 4, 5], [6, 7, 8]]), np.array([[9, 10], [11, 12]])
    a, _, _ = sequence_loss(m, src, tgt, RouterConfig(2), TRAIN, np.random.default_rng(0))
    b, _, _ = sequence_loss(m, src, tgt, RouterConfig(2, assignment_mode=GROUPED, group_count=1),
                            TRAIN, np.random.default_rng(0))
    assert a.item() == b.item()


def test_grouped_gradient_check():
    m = build_model(TOY, 3)
    cfg = RouterConfig(2, assignment_mode=GROUPED, group_count=2)
    src = np.array([[3, 4, 5], [6, 7, 8], [9, 10, 11], [12, 13, 14]])
    tgt = np.array([[15, 16], [17, 18], [19, 20], [21, 22]])

    def loss():
        ce, aux, _ = sequence_loss(m, src, tgt, cfg, TRAIN, np.random.default_rng(0))
        return T.add(ce, aux)

    loss().backward()
    for name in ("enc.1.moe.gate", "enc.1.moe.expert.0.w1", "dec.1.moe.expert.1.w2", "embed"):
        t = m[name]
        index = tuple(s // 2 for s in t.shape)
        fd = numeric_grad(lambda: loss().item(), t, index)
        assert rel_err(t.grad[index], fd) < 1e-4
