import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from cortex.errors import ContractError, ShapeError
from cortex.itda import (
    VisualFeatureGrid,
    attention_weights,
    attn,
    dynamic_align,
    dynamic_cross,
    dynamic_loss,
    itda_forward,
    static_align,
    static_loss,
    static_self,
)
from cortex.text_encoding import SentenceFeatureSet

D = torch.float64


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def rand_instance(rng, L, c, N, M):
    return (rng.standard_normal((L, c)), rng.standard_normal((L, c)),
            rng.standard_normal((N, c)), rng.standard_normal((M, c)))


def test_attn_hand_oracle():
    out = attn(t64([[1, 0]]), t64([[1, 0], [0, 1]]), t64([[2, 0], [0, 4]]))
    w = math.exp(1 / math.sqrt(2)) / (math.exp(1 / math.sqrt(2)) + 1)
    np.testing.assert_allclose(out.numpy()[0], [2 * w, 4 * (1 - w)], atol=1e-12)
    # the 4-digit figures come from weights rounded before multiplying
    np.testing.assert_allclose(out.numpy()[0], [1.3396, 1.3208], atol=2e-4)


def test_attn_single_key_returns_value():
    rng = np.random.default_rng(0)
    v = t64(rng.standard_normal((1, 5)))
    out = attn(t64(rng.standard_normal((3, 5))), t64(rng.standard_normal((1, 5))), v)
    np.testing.assert_allclose(out.numpy(), np.repeat(v.numpy(), 3, 0), atol=1e-12)


def test_attn_shape_errors():
    with pytest.raises(ShapeError):
        attn(torch.zeros(1, 3), torch.zeros(2, 4), torch.zeros(2, 4))
    with pytest.raises(ShapeError):
        attn(torch.zeros(1, 3), torch.zeros(0, 3), torch.zeros(0, 3))


def test_attn_stable_for_huge_logits():
    q = t64([[1e4, 0]])
    out = attn(q, t64([[1e4, 0], [0, 1]]), t64([[1, 2], [3, 4]]))
    assert torch.isfinite(out).all()
    np.testing.assert_allclose(out.numpy(), [[1, 2]])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), q=st.integers(1, 6), k=st.integers(1, 9), c=st.sampled_from([2, 8, 16]))
def test_attn_convex_and_stochastic(seed, q, k, c):
    rng = np.random.default_rng(seed)
    Q, K, V = (t64(rng.standard_normal(s) * 3) for s in ((q, c), (k, c), (k, c)))
    w = attention_weights(Q, K)
    np.testing.assert_allclose(w.sum(-1).numpy(), 1.0, atol=1e-6)
    out = attn(Q, K, V).numpy()
    assert np.all(out >= V.numpy().min(0) - 1e-12) and np.all(out <= V.numpy().max(0) + 1e-12)
    np.testing.assert_allclose(out, oracles.attn(Q.numpy(), K.numpy(), V.numpy()), atol=1e-10)


def test_static_align_degenerate_cases():
    rng = np.random.default_rng(1)
    f, t = t64(rng.standard_normal((4, 8))), t64(rng.standard_normal((1, 8)))
    np.testing.assert_allclose(static_align(f, t).numpy(), attn(t, f, f)[0].numpy(), atol=1e-12)
    np.testing.assert_allclose(static_align(f, t.repeat(4, 1)).numpy(), static_align(f, t).numpy(), atol=1e-12)


def test_static_align_oracle():
    rng = np.random.default_rng(2)
    f, t = rng.standard_normal((4, 8)), rng.standard_normal((3, 8))
    np.testing.assert_allclose(static_align(t64(f), t64(t)).numpy(), oracles.text_mean(f, t), atol=1e-6)


def test_static_self_cases():
    rng = np.random.default_rng(3)
    row = t64(rng.standard_normal((1, 6)))
    np.testing.assert_allclose(static_self(row).numpy(), row.numpy(), atol=1e-12)
    const = row.repeat(5, 1)
    np.testing.assert_allclose(static_self(const).numpy(), const.numpy(), atol=1e-12)
    f = rng.standard_normal((9, 8))
    np.testing.assert_allclose(static_self(t64(f)).numpy(), oracles.attn(f, f, f), atol=1e-6)


def test_static_loss_hand_values():
    z = torch.zeros(2, dtype=D)
    grid0 = torch.zeros(3, 2, dtype=D)
    assert static_loss(t64([1, 0]), z, grid0, grid0).item() == pytest.approx(0.5)
    assert static_loss(z, z, grid0, grid0).item() == 0.0
    rng = np.random.default_rng(4)
    a, b = t64(rng.standard_normal(4)), t64(rng.standard_normal(4))
    ga, gb = t64(rng.standard_normal((3, 4))), t64(rng.standard_normal((3, 4)))
    assert static_loss(a, b, ga, gb).item() == pytest.approx(static_loss(b, a, gb, ga).item(), abs=1e-12)


def test_static_loss_shape_error():
    with pytest.raises(ShapeError):
        static_loss(torch.zeros(3), torch.zeros(3), torch.zeros(2, 4), torch.zeros(2, 3))


def test_dynamic_align_and_cross():
    rng = np.random.default_rng(5)
    fb, fa, tb, ta = rand_instance(rng, 4, 8, 3, 2)
    np.testing.assert_allclose(dynamic_align(t64(fb), t64(ta)).numpy(), oracles.text_mean(fb, ta), atol=1e-6)
    np.testing.assert_allclose(dynamic_align(t64(fb), t64(tb)).numpy(), static_align(t64(fb), t64(tb)).numpy(),
                               atol=0)
    np.testing.assert_allclose(dynamic_cross(t64(fb), t64(fa)).numpy(), oracles.attn(fa, fb, fb), atol=1e-6)
    np.testing.assert_allclose(dynamic_cross(t64(fb), t64(fb)).numpy(), static_self(t64(fb)).numpy(), atol=0)
    one_b, one_a = t64(rng.standard_normal((1, 8))), t64(rng.standard_normal((1, 8)))
    np.testing.assert_allclose(dynamic_cross(one_b, one_a).numpy(), one_b.numpy(), atol=1e-12)


def test_scene_contracts():
    rng = np.random.default_rng(6)
    grid = VisualFeatureGrid(t64(rng.standard_normal((4, 8))), (2, 2), "before")
    before = SentenceFeatureSet(rng.standard_normal((2, 8)), ["a b c", "d e f"], "before")
    after = SentenceFeatureSet(rng.standard_normal((1, 8)), ["g h i"], "after")
    static_align(grid, before)
    dynamic_align(grid, after)
    with pytest.raises(ContractError):
        static_align(grid, after)
    with pytest.raises(ContractError):
        dynamic_align(grid, before)
    with pytest.raises(ShapeError):
        VisualFeatureGrid(torch.zeros(5, 8), (2, 2))


def test_dynamic_loss_scaling():
    rng = np.random.default_rng(7)
    args = [t64(rng.standard_normal(4)), t64(rng.standard_normal(4)),
            t64(rng.standard_normal((3, 4))), t64(rng.standard_normal((3, 4)))]
    base = dynamic_loss(*args).item()
    assert dynamic_loss(*[a * 2.5 for a in args]).item() == pytest.approx(base * 6.25, rel=1e-12)
    assert dynamic_loss(args[0], args[1], args[0].expand(3, 4), args[1].expand(3, 4)).item() == pytest.approx(0.0)


def test_itda_seed42_oracle():
    rng = np.random.default_rng(42)
    fb, fa, tb, ta = rand_instance(rng, 4, 8, 3, 2)
    feats, losses = itda_forward(t64(fb), t64(fa), t64(tb), t64(ta))
    want, l_sa, l_da = oracles.itda(fb, fa, tb, ta)
    np.testing.assert_allclose(feats.f_itda.numpy(), want, atol=1e-6)
    assert losses.l_sa.item() == pytest.approx(l_sa, abs=1e-6)
    assert losses.l_da.item() == pytest.approx(l_da, abs=1e-6)
    assert losses.l_align.item() == losses.l_sa.item() + losses.l_da.item()


def test_f_itda_row_order():
    rng = np.random.default_rng(8)
    fb, fa, tb, ta = (t64(x) for x in rand_instance(rng, 4, 8, 2, 2))
    feats, _ = itda_forward(fb, fa, tb, ta)
    rows = [feats.static_bef, feats.static_aft, feats.dynamic_bef, feats.dynamic_aft]
    for i, r in enumerate(rows):
        assert torch.equal(feats.f_itda[i], r)


def test_coincident_inputs_make_branches_equal():
    rng = np.random.default_rng(9)
    f, t = t64(rng.standard_normal((4, 8))), t64(rng.standard_normal((3, 8)))
    feats, losses = itda_forward(f, f, t, t)
    assert torch.equal(feats.static_bef, feats.dynamic_bef)
    assert losses.l_sa.item() == losses.l_da.item()


def test_losses_vanish_when_pooled_terms_coincide():
    # a constant grid makes every attention output equal the constant row
    v = t64(np.random.default_rng(10).standard_normal((1, 8)))
    f = v.repeat(4, 1)
    _, losses = itda_forward(f, f, t64(np.ones((2, 8))), t64(np.ones((3, 8))))
    assert losses.l_sa.item() == pytest.approx(0.0, abs=1e-12)
    assert losses.l_da.item() == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 5), m=st.integers(1, 5))
def test_sentence_permutation_invariance(seed, n, m):
    rng = np.random.default_rng(seed)
    fb, fa, tb, ta = rand_instance(rng, 4, 8, n, m)
    a_feats, a_loss = itda_forward(t64(fb), t64(fa), t64(tb), t64(ta))
    b_feats, b_loss = itda_forward(t64(fb), t64(fa), t64(tb[rng.permutation(n)]), t64(ta[rng.permutation(m)]))
    np.testing.assert_allclose(a_feats.f_itda.numpy(), b_feats.f_itda.numpy(), atol=1e-6)
    assert abs(a_loss.l_align.item() - b_loss.l_align.item()) < 1e-6
    assert a_loss.l_sa.item() >= 0 and a_loss.l_da.item() >= 0


def test_masked_batch_matches_unpadded():
    rng = np.random.default_rng(11)
    fb, fa, tb, ta = rand_instance(rng, 4, 8, 2, 3)
    pad_b = np.concatenate([tb, rng.standard_normal((3, 8))])
    mask_b = torch.tensor([True, True, False, False, False])
    mask_a = torch.tensor([True, True, True, False, False])
    pad_a = np.concatenate([ta, rng.standard_normal((2, 8))])
    feats, losses = itda_forward(t64(fb)[None], t64(fa)[None], t64(pad_b)[None], t64(pad_a)[None],
                                 mask_b[None], mask_a[None])
    want, l_sa, l_da = oracles.itda(fb, fa, tb, ta)
    np.testing.assert_allclose(feats.f_itda[0].numpy(), want, atol=1e-6)
    assert losses.l_sa[0].item() == pytest.approx(l_sa, abs=1e-6)
    assert losses.l_da[0].item() == pytest.approx(l_da, abs=1e-6)


def test_gradcheck_l_align():
    rng = np.random.default_rng(12)
    inputs = [t64(x).requires_grad_() for x in rand_instance(rng, 4, 8, 3, 2)]
    assert torch.autograd.gradcheck(lambda *xs: itda_forward(*xs)[1].l_align, inputs, eps=1e-3, atol=1e-6,
                                    rtol=1e-4)
