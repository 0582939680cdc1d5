import numpy as np
import pytest

from glamor.attention import (AttentionVariant, GlobalLocalAttention, attend, fold_context, pool_face,
                              unfold_context)
from glamor.errors import ShapeError, StateError
from glamor.gradcheck import numerical_grad, rel_error
from glamor.tensor import Rng


def make(variant="gla", dim=4, hidden=5, seed=0):
    return GlobalLocalAttention(variant, dim, dim, hidden, rng=Rng(seed), precision="f64")


def test_pool_face():
    assert np.array_equal(pool_face(np.full((1, 256, 6, 6), 0.25)), np.full((1, 256), 0.25))
    x = np.zeros((1, 2, 6, 6))
    x[0, 1, 4, 2] = 36 * 3.0
    assert pool_face(x)[0].tolist() == [0.0, 3.0]
    x = Rng(1).normal(size=(2, 3, 6, 6))
    ref = np.array([[sum(x[n, c, i, j] for i in range(6) for j in range(6)) / 36 for c in range(3)]
                    for n in range(2)])
    np.testing.assert_allclose(pool_face(x), ref, rtol=1e-13)


def test_unfold_and_fold():
    fc = Rng(2).normal(size=(2, 5, 7, 7))
    cells = unfold_context(fc)
    assert cells.shape == (2, 49, 5)
    assert np.array_equal(cells[:, 1], fc[:, :, 0, 1])
    assert np.array_equal(fold_context(cells, 7, 7), fc)


def test_identical_cells_score_identically():
    att = make()
    r = Rng(3)
    cells = np.broadcast_to(r.normal(size=(1, 1, 4)), (1, 9, 4)).copy()
    s = att.scores(r.normal(size=(1, 4)), cells)
    assert np.all(s == s[0, 0])


def test_zero_weights_zero_scores():
    att = GlobalLocalAttention("gla", 4, 4, 5, rng=None, precision="f64")
    r = Rng(4)
    assert not att.scores(r.normal(size=(2, 4)), r.normal(size=(2, 6, 4))).any()


def test_scores_are_permutation_equivariant():
    att = make()
    r = Rng(5)
    v_f, cells = r.normal(size=(2, 4)), r.normal(size=(2, 9, 4))
    perm = r.permutation(9)
    np.testing.assert_array_equal(att.scores(v_f, cells)[:, perm], att.scores(v_f, cells[:, perm]))


def test_equal_scores_give_mean():
    cells = Rng(6).normal(size=(2, 9, 4))
    v_c, a = attend(np.zeros((2, 9)), cells)
    np.testing.assert_allclose(a, 1 / 9, rtol=1e-15)
    np.testing.assert_allclose(v_c, cells.mean(axis=1), rtol=1e-14)


def test_saturated_score_selects_cell():
    cells = Rng(7).normal(size=(1, 9, 4))
    s = np.zeros((1, 9))
    s[0, 4] = 50
    v_c, _ = attend(s, cells)
    np.testing.assert_allclose(v_c[0], cells[0, 4], atol=1e-6)


def test_attend_matches_double_loop():
    r = Rng(8)
    fc = r.normal(size=(1, 3, 4, 5))
    s = r.normal(size=(1, 20))
    v_c, a = attend(s, unfold_context(fc))
    e = np.exp(s[0].reshape(4, 5))
    a_ref = e / e.sum()
    ref = np.zeros(3)
    for i in range(4):
        for j in range(5):
            ref += a_ref[i, j] * fc[0, :, i, j]
    np.testing.assert_allclose(v_c[0], ref, rtol=1e-12, atol=1e-12)


def test_forward_shapes_and_map_normalisation():
    att = make("gla", dim=8, hidden=6)
    r = Rng(9)
    v_c, amap = att.forward(r.normal(size=(3, 8)), r.normal(size=(3, 8, 7, 7)))
    assert v_c.shape == (3, 8) and amap.shape == (3, 7, 7)
    assert np.all(amap > 0)
    np.testing.assert_allclose(amap.sum(axis=(1, 2)), 1, atol=1e-12)


def test_variants():
    r = Rng(10)
    fc = r.normal(size=(2, 4, 3, 3))
    none = make("none")
    _, amap = none.forward(None, fc)
    np.testing.assert_allclose(amap, 1 / 9)
    assert list(none.named_parameters()) == []
    ca = make("ca")
    assert ca.hidden.in_dim == 4
    ca.forward(None, fc)  # no face vector needed
    assert make("gla").hidden.in_dim == 8
    with pytest.raises(ShapeError):
        make("gla").forward(None, fc)


@pytest.mark.parametrize("variant", ["gla", "ca", "none"])
@pytest.mark.parametrize("seed", range(3))
def test_finite_differences(variant, seed):
    att = make(variant, seed=seed)
    r = Rng(100 + seed)
    v_f, fc = r.normal(size=(2, 4)), r.normal(size=(2, 4, 2, 2))
    proj = r.normal(size=(2, 4))
    f = lambda: float((att.forward(v_f, fc)[0] * proj).sum())  # noqa: E731
    f()
    d_vf, d_fc = att.backward(proj)
    assert rel_error(d_fc, numerical_grad(f, fc)) < 1e-6
    if variant == "gla":
        assert rel_error(d_vf, numerical_grad(f, v_f)) < 1e-6
    else:
        assert d_vf is None
    for name, p, g in att.named_parameters():
        if name == "out.bias":
            # a shared score offset cancels in the softmax
            assert np.abs(g).max() < 1e-12
            continue
        assert rel_error(g, numerical_grad(f, p)) < 1e-6, name


def test_zero_upstream():
    att = make()
    r = Rng(11)
    att.forward(r.normal(size=(1, 4)), r.normal(size=(1, 4, 3, 3)))
    d_vf, d_fc = att.backward(np.zeros((1, 4)))
    assert not d_vf.any() and not d_fc.any()
    assert all(not g.any() for _, _, g in att.named_parameters())


def test_uniform_backward_is_mean_broadcast():
    att = make("none")
    r = Rng(12)
    att.forward(None, r.normal(size=(2, 4, 3, 3)))
    g = r.normal(size=(2, 4))
    _, d_fc = att.backward(g)
    np.testing.assert_allclose(d_fc, np.broadcast_to(g[:, :, None, None] / 9, d_fc.shape), rtol=1e-14)


def test_backward_before_forward():
    with pytest.raises(StateError):
        make().backward(np.zeros((1, 4)))


def test_variant_enum_values():
    assert {v.value for v in AttentionVariant} == {"gla", "ca", "none"}
