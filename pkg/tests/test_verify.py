import io

import numpy as np
import pytest

from glamor import verify
from glamor.layers import Conv2d
from glamor.tensor import Rng


@pytest.fixture(scope="module")
def clean_results():
    out = io.StringIO()
    return verify.run_battery(seeds=(0, 1), out=out), out.getvalue()


def test_battery_passes(clean_results):
    results, text = clean_results
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]
    assert len(text.splitlines()) == len(results)
    assert "[PASS] conv2d_backward" in text


def test_battery_names_unique(clean_results):
    names = [r.name for r in clean_results[0]]
    assert len(names) == len(set(names))


@pytest.fixture
def broken_conv(monkeypatch):
    """Conv backward whose weight gradient is off by 0.1%."""
    original = Conv2d.backward

    def backward(self, grad_out):
        gx = original(self, grad_out)
        self.grads["weight"] = self.grads["weight"] * 1.001
        return gx

    monkeypatch.setattr(Conv2d, "backward", backward)


def test_fault_injection_names_conv(broken_conv):
    results = {r.name: r for r in verify.run_battery(seeds=(0,))}
    assert not results["conv2d_backward"].passed
    assert results["linear_backward"].passed
    assert results["attention_invariants"].passed


def test_crashing_check_is_a_failure(monkeypatch):
    def boom(seed):
        raise RuntimeError("kaput")

    monkeypatch.setattr(verify, "encoder_gradient_error", boom)
    res = {r.name: r for r in verify.run_battery(seeds=(0,))}["encoder_end_to_end"]
    assert not res.passed and "kaput" in res.detail


def test_directional_error_detects_wrong_gradient():
    x = np.linspace(-1, 1, 20)
    f = lambda: float((x ** 3).sum())  # noqa: E731
    assert verify.directional_error(f, x, 3 * x ** 2, Rng(0)) < 1e-8
    assert verify.directional_error(f, x, 3.1 * x ** 2, Rng(0)) > 1e-3


def test_kink_probe_sees_ties():
    from glamor.layers import MaxPool2x2, ReLU
    x = np.ones((1, 1, 2, 2))
    x[0, 0, 0, 0] = 1 + 1e-6
    with verify.kink_probe() as margin:
        MaxPool2x2().forward(x)
    assert margin[0] < 2e-6
    with verify.kink_probe() as margin:
        ReLU().forward(np.array([[0.5, -3e-5]]))
    assert margin[0] == pytest.approx(3e-5)
    # restored afterwards
    assert ReLU.forward.__qualname__ == "ReLU.forward"
