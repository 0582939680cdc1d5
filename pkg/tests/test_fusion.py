import math

import numpy as np
import pytest

from glamor.errors import ConfigError, StateError
from glamor.fusion import Fusion, FusionVariant, fusion_weights
from glamor.gradcheck import numerical_grad, rel_error
from glamor.tensor import Rng


def make(variant="net", dim=8, seed=0, dropout=0.0):
    return Fusion(variant, dim, 6, 3, rng=Rng(seed), precision="f64", dropout=dropout)


def test_weight_cases():
    w_f, w_c = fusion_weights(np.array([1.3]), np.array([1.3]))
    assert (w_f.item(), w_c.item()) == (0.5, 0.5)
    w_f, _ = fusion_weights(np.array([math.log(3)]), np.array([0.0]))
    assert w_f.item() == pytest.approx(0.75, abs=1e-12)


def test_weights_sum_to_one_on_random_inputs():
    r = Rng(1)
    fus = make(dim=16)
    v_f, v_c = r.normal(0, 3, (1000, 16)), r.normal(0, 3, (1000, 16))
    fus.forward(v_f, v_c)
    w = fus.last_weights
    assert np.all((w > 0) & (w < 1))
    np.testing.assert_allclose(w.sum(axis=1), 1, atol=1e-7)


def test_swapping_branches_swaps_weights():
    r = Rng(2)
    fus = make()
    v_f, v_c = r.normal(size=(5, 8)), r.normal(size=(5, 8))
    fus.forward(v_f, v_c)
    w = fus.last_weights.copy()
    fus.face_score, fus.context_score = fus.context_score, fus.face_score
    fus.forward(v_c, v_f)
    assert np.array_equal(fus.last_weights[:, ::-1], w)


def test_saturated_net_equals_face_only_input():
    fus = make()
    r = Rng(3)
    v_f = r.normal(size=(2, 8))
    v_c = np.zeros((2, 8))
    # force s_f - s_c = +50 through the output biases
    fus.face_score.layers[-1].params["bias"][:] = 50.0 - fus.face_score.forward(v_f)[:, 0].mean()
    fus.context_score.layers[-1].params["bias"][:] = -fus.context_score.forward(v_c)[:, 0].mean()
    s_f = fus.face_score.forward(v_f)[:, 0]
    s_c = fus.context_score.forward(v_c)[:, 0]
    assert np.all(s_f - s_c > 49)
    logits = fus.forward(v_f, v_c)
    ref = fus.classifier.forward(np.concatenate([v_f, np.zeros_like(v_c)], axis=1))
    np.testing.assert_allclose(logits, ref, atol=1e-12)


def test_add_and_max():
    r = Rng(4)
    v = r.normal(size=(3, 8))
    add, mx = make("add"), make("max")
    np.testing.assert_array_equal(add.forward(v, np.zeros_like(v)), add.classifier.forward(v))
    np.testing.assert_array_equal(mx.forward(v, v), mx.classifier.forward(v))
    np.testing.assert_array_equal(add.forward(v, v), add.classifier.forward(2 * v))
    assert add.face_score is None and add.classifier.layers[0].in_dim == 8


def test_unknown_variant():
    with pytest.raises(ConfigError):
        make("concat")


@pytest.mark.parametrize("variant", ["net", "add", "max"])
@pytest.mark.parametrize("seed", range(3))
def test_finite_differences(variant, seed):
    fus = make(variant, seed=seed)
    r = Rng(50 + seed)
    v_f, v_c = r.normal(size=(3, 8)), r.normal(size=(3, 8))
    proj = r.normal(size=(3, 3))
    f = lambda: float((fus.forward(v_f, v_c) * proj).sum())  # noqa: E731
    f()
    d_vf, d_vc = fus.backward(proj)
    assert rel_error(d_vf, numerical_grad(f, v_f)) < 1e-6
    assert rel_error(d_vc, numerical_grad(f, v_c)) < 1e-6
    for name, p, g in fus.named_parameters():
        assert rel_error(g, numerical_grad(f, p)) < 1e-6, name


def test_zero_upstream():
    fus = make()
    r = Rng(5)
    fus.forward(r.normal(size=(2, 8)), r.normal(size=(2, 8)))
    d_vf, d_vc = fus.backward(np.zeros((2, 3)))
    assert not d_vf.any() and not d_vc.any()


def test_add_splits_gradient_equally():
    fus = make("add")
    r = Rng(6)
    fus.forward(r.normal(size=(2, 8)), r.normal(size=(2, 8)))
    d_vf, d_vc = fus.backward(r.normal(size=(2, 3)))
    assert np.array_equal(d_vf, d_vc)


def test_backward_before_forward():
    with pytest.raises(StateError):
        make().backward(np.zeros((1, 3)))


def test_dropout_sits_before_final_layer():
    fus = Fusion("net", 8, 6, 7, rng=Rng(0))
    kinds = [type(layer).__name__ for layer in fus.classifier.layers]
    assert kinds == ["Linear", "ReLU", "Dropout", "Linear"]
    assert fus.classifier.layers[2].p == 0.5
    assert {v.value for v in FusionVariant} == {"net", "add", "max"}
