"""Built-in verification battery: gradient checks, attention/fusion invariants, oracles.

Each check returns a ``CheckResult``; ``run_battery`` runs them all and is what
``glamor verify`` prints.
"""

from __future__ import annotations

import functools
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import layers as _layers
from .attention import GlobalLocalAttention, attend, unfold_context
from .encoder import Encoder
from .fusion import Fusion, fusion_weights
from .gradcheck import grad_close, numerical_grad, rel_error
from .layers import (BatchNorm2d, Conv2d, Dropout, GlobalAvgPool, Linear, MaxPool2x2, ReLU,
                     cross_entropy)
from .metrics import chi_square_survival, stuart_maxwell
from .model import GlamorNet, ModelConfig
from .tensor import Rng, matmul, softmax

LAYER_TOL = 1e-6
MODEL_TOL = 1e-5
KINK_MARGIN = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def directional_error(f, x, analytic, rng: Rng, h=1e-5, n_dirs=5):
    """Directional-derivative check of ``analytic`` along random unit vectors ``u``.

    The gap between ``analytic . u`` and the central difference is scaled by
    ``|analytic|``, matching the norm-relative error used for full checks (a
    single projection can cancel to near zero, so dividing by it is unstable).
    """
    scale = max(float(np.linalg.norm(analytic)), 1e-8)
    worst = 0.0
    for _ in range(n_dirs):
        u = rng.normal(size=x.shape)
        u /= np.linalg.norm(u)
        orig = x.copy()
        x += h * u
        fp = f()
        x[...] = orig - h * u
        fm = f()
        x[...] = orig
        num = (fp - fm) / (2 * h)
        ana = float((analytic * u).sum())
        worst = max(worst, abs(num - ana) / scale)
    return worst


def _layer_errors(layer, x, proj, train=False):
    """Worst gradient error over the input and every parameter of ``layer``."""
    f = lambda: float((layer.forward(x, train) * proj).sum())  # noqa: E731
    f()
    gi = layer.backward(proj)
    errs = {"input": rel_error(gi, numerical_grad(f, x))}
    for name, p, g in layer.named_parameters():
        errs[name] = rel_error(g, numerical_grad(f, p))
    return errs


@functools.lru_cache(maxsize=64)
def layer_gradient_errors(seed):
    """Per-layer worst relative errors for one random draw (F64, h = 1e-5)."""
    r = Rng(seed)
    out = {}

    conv = Conv2d(2, 3, r, precision="f64")
    conv.params["bias"][:] = r.normal(size=3)
    out["conv2d"] = max(_layer_errors(conv, r.normal(size=(2, 2, 5, 4)),
                                      r.normal(size=(2, 3, 5, 4))).values())

    bn = BatchNorm2d(3, precision="f64")
    bn.params["gamma"][:] = r.uniform(0.5, 2.0, 3)
    bn.params["beta"][:] = r.normal(size=3)
    out["batchnorm"] = max(_layer_errors(bn, r.normal(size=(4, 3, 3, 3)),
                                         r.normal(size=(4, 3, 3, 3)), train=True).values())

    x = r.normal(size=(3, 7))
    x[np.abs(x) < 1e-4] = 0.5
    out["relu"] = max(_layer_errors(ReLU(), x, r.normal(size=(3, 7))).values())

    # distinct values, spaced far beyond h, so no 2x2 window has a near-tie
    x = r.permutation(2 * 2 * 36).reshape(2, 2, 6, 6) * 0.01 + r.uniform(0, 1e-3, (2, 2, 6, 6))
    out["maxpool2x2"] = max(_layer_errors(MaxPool2x2(), x, r.normal(size=(2, 2, 3, 3))).values())

    out["global_avg_pool"] = max(_layer_errors(GlobalAvgPool(), r.normal(size=(2, 3, 4, 4)),
                                               r.normal(size=(2, 3))).values())

    lin = Linear(5, 4, r, precision="f64")
    lin.params["bias"][:] = r.normal(size=4)
    out["linear"] = max(_layer_errors(lin, r.normal(size=(3, 5)), r.normal(size=(3, 4))).values())

    drop = Dropout(0.5, r.spawn(1))
    x = r.normal(size=(4, 6))
    drop.forward(x, train=True)
    mask = drop._mask.copy()
    proj = r.normal(size=(4, 6))
    f = lambda: float((x * mask * proj).sum())  # noqa: E731  # fixed mask
    out["dropout"] = rel_error(drop.backward(proj), numerical_grad(f, x))

    logits = r.normal(size=(4, 5))
    y = r.integers(5, 4)
    _, g = cross_entropy(logits, y)
    out["cross_entropy"] = rel_error(g, numerical_grad(lambda: cross_entropy(logits, y)[0], logits))

    for variant in ("gla", "ca", "none"):
        att = GlobalLocalAttention(variant, 4, 4, 5, rng=r.spawn(2), precision="f64")
        for _, p, _ in att.named_parameters():
            p[...] = r.normal(0, 0.5, p.shape)
        v_f, fc, proj = r.normal(size=(2, 4)), r.normal(size=(2, 4, 2, 2)), r.normal(size=(2, 4))
        f = lambda: float((att.forward(v_f, fc)[0] * proj).sum())  # noqa: E731
        f()
        d_vf, d_fc = att.backward(proj)
        errs = [rel_error(d_fc, numerical_grad(f, fc))]
        if d_vf is not None:
            errs.append(rel_error(d_vf, numerical_grad(f, v_f)))
        errs += [rel_error(g, numerical_grad(f, p)) for n, p, g in att.named_parameters()
                 if n != "out.bias"]  # a common score offset cancels in the softmax
        out[f"attention_{variant}"] = max(errs)

    for variant in ("net", "add", "max"):
        fus = Fusion(variant, 8, 6, 3, rng=r.spawn(3), precision="f64", dropout=0.0)
        v_f, v_c, proj = r.normal(size=(3, 8)), r.normal(size=(3, 8)), r.normal(size=(3, 3))
        f = lambda: float((fus.forward(v_f, v_c) * proj).sum())  # noqa: E731
        f()
        d_vf, d_vc = fus.backward(proj)
        errs = [rel_error(d_vf, numerical_grad(f, v_f)), rel_error(d_vc, numerical_grad(f, v_c))]
        errs += [rel_error(g, numerical_grad(f, p)) for _, p, g in fus.named_parameters()]
        out[f"fusion_{variant}"] = max(errs)
    return out


TINY = dict(channels=(2, 2, 2, 2, 4), hidden=4, n_classes=3, face_size=(16, 16),
            context_size=(32, 32), dropout=0.0)


@contextmanager
def kink_probe():
    """Record how close a forward pass comes to a ReLU kink or a max-pool tie.

    Yields a one-element list holding the smallest |pre-activation| over all
    ReLUs and the smallest winner/runner-up gap over all pooling windows.
    """
    margin = [math.inf]
    relu_forward, pool_forward = _layers.ReLU.forward, _layers.maxpool2x2_forward

    def relu(self, x, train=False):
        if x.size:
            margin[0] = min(margin[0], float(np.abs(x).min()))
        return relu_forward(self, x, train)

    def pool(x):
        out, idx = pool_forward(x)
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
        top2 = np.sort(win, axis=1)[:, -2:]
        # windows of exact post-ReLU zeros tie harmlessly: every candidate has zero gradient
        top2 = top2[top2[:, 1] != 0]
        if top2.size:
            margin[0] = min(margin[0], float((top2[:, 1] - top2[:, 0]).min()))
        return out, idx

    _layers.ReLU.forward, _layers.maxpool2x2_forward = relu, pool
    try:
        yield margin
    finally:
        _layers.ReLU.forward, _layers.maxpool2x2_forward = relu_forward, pool_forward


def model_gradient_error(seed, max_draws=500, **overrides):
    """End-to-end check on the reduced-width model.

    Inputs and biases are redrawn until the forward pass stays KINK_MARGIN away
    from every ReLU kink and pooling tie. Every parameter is then compared
    element-wise; the image-input gradients are compared along random
    directions. Returns (worst relative error, all close).
    """
    cfg = ModelConfig(**{**TINY, **overrides})
    net = GlamorNet(cfg, seed=seed, precision="f64")
    r = Rng(seed).spawn(99)
    y = np.arange(3) % cfg.n_classes
    for _ in range(max_draws):
        for name, p, _ in net.named_parameters():
            if name.endswith("bias") or name.endswith("beta"):
                # nonzero biases keep all-zero feature cells off the ReLU kink
                p[...] = r.normal(0, 0.1, p.shape)
        face = r.uniform(0, 1, (3, 3, *cfg.face_size))
        ctx = r.uniform(0, 1, (3, 3, *cfg.context_size))
        with kink_probe() as margin:
            net.forward(face, ctx, train=True)
        if margin[0] >= KINK_MARGIN:
            break
    else:
        raise RuntimeError(f"no draw cleared the kink margin in {max_draws} attempts")

    def loss():
        return cross_entropy(net.forward(face, ctx, train=True).logits, y)[0]

    _, g = cross_entropy(net.forward(face, ctx, train=True).logits, y)
    d_face, d_ctx = net.backward(g)
    worst, ok = 0.0, True
    for _, p, grad in net.named_parameters():
        num = numerical_grad(loss, p)
        ok &= grad_close(grad, num, MODEL_TOL)
        if np.linalg.norm(num) > 1e-8:
            worst = max(worst, rel_error(grad, num))
    for x, d in ((face, d_face), (ctx, d_ctx)):
        if d is not None:
            e = directional_error(loss, x, d, r)
            ok &= e < MODEL_TOL
            worst = max(worst, e)
    return worst, bool(ok)


def encoder_gradient_error(seed, max_draws=500):
    """Same protocol as ``model_gradient_error`` for a lone 16x16 encoder."""
    r = Rng(seed)
    enc = Encoder((2, 2, 2, 2, 2), rng=r, precision="f64")
    for _ in range(max_draws):
        for name, p, _ in enc.named_parameters():
            if name.endswith("bias") or name.endswith("beta"):
                p[...] = r.normal(0, 0.1, p.shape)
        x = r.normal(size=(2, 3, 16, 16))
        with kink_probe() as margin:
            enc.forward(x, train=True)
        if margin[0] >= KINK_MARGIN:
            break
    else:
        raise RuntimeError(f"no draw cleared the kink margin in {max_draws} attempts")
    proj = r.normal(size=(2, 2, 1, 1))
    f = lambda: float((enc.forward(x, train=True) * proj).sum())  # noqa: E731
    f()
    gi = enc.backward(proj)
    worst = directional_error(f, x, gi, r)
    ok = worst < MODEL_TOL
    for _, p, g in enc.named_parameters():
        num = numerical_grad(f, p)
        ok &= grad_close(g, num, MODEL_TOL)
        if np.linalg.norm(num) > 1e-8:
            worst = max(worst, rel_error(g, num))
    return worst, bool(ok)


# ---------------------------------------------------------------------------
# invariants


def attention_invariants(n_trials=1000, seed=0):
    """Worst deviations over random attention problems.

    Returns a dict with the map-sum error, the double-loop oracle error, whether
    the context vector stayed inside the per-dimension cell range, and the
    score shift-invariance error.
    """
    r = Rng(seed)
    sum_err = oracle_err = shift_err = 0.0
    in_hull = True
    att = GlobalLocalAttention("gla", 6, 6, 8, rng=r.spawn(1), precision="f64")
    for t in range(n_trials):
        h, w = 1 + r.integers(4), 1 + r.integers(4)
        fc = r.normal(0, 2, (1, 6, h, w))
        v_f = r.normal(size=(1, 6))
        v_c, amap = att.forward(v_f, fc)
        sum_err = max(sum_err, abs(amap.sum() - 1.0))
        ref = np.zeros(6)
        for i in range(h):
            for j in range(w):
                ref += amap[0, i, j] * fc[0, :, i, j]
        oracle_err = max(oracle_err, float(np.abs(v_c[0] - ref).max()))
        cells = fc[0].reshape(6, -1)
        in_hull &= bool(np.all(v_c[0] >= cells.min(axis=1) - 1e-12)
                        and np.all(v_c[0] <= cells.max(axis=1) + 1e-12))
        s = r.normal(0, 3, (1, h * w))
        a1 = attend(s, unfold_context(fc))[1]
        a2 = attend(s + r.normal(0, 100), unfold_context(fc))[1]
        shift_err = max(shift_err, float(np.abs(a1 - a2).max()))
    return {"map_sum": sum_err, "oracle": oracle_err, "in_range": in_hull, "shift": shift_err}


def fusion_invariants(n_trials=1000, seed=0):
    r = Rng(seed)
    fus = Fusion("net", 8, 6, 7, rng=r.spawn(1), precision="f64", dropout=0.0)
    v_f, v_c = r.normal(0, 3, (n_trials, 8)), r.normal(0, 3, (n_trials, 8))
    fus.forward(v_f, v_c)
    w = fus.last_weights.copy()
    sum_err = float(np.abs(w.sum(axis=1) - 1).max())
    open_interval = bool(np.all((w > 0) & (w < 1)))
    fus.face_score, fus.context_score = fus.context_score, fus.face_score
    fus.forward(v_c, v_f)
    swap_exact = bool(np.array_equal(fus.last_weights[:, ::-1], w))
    w_f, _ = fusion_weights(np.array([math.log(3)]), np.array([0.0]))
    return {"sum": sum_err, "open_interval": open_interval, "swap_exact": swap_exact,
            "ln3": abs(float(w_f[0]) - 0.75)}


# ---------------------------------------------------------------------------
# battery


def _timed(name, fn):
    t = time.perf_counter()
    try:
        passed, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        passed, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(passed), detail, time.perf_counter() - t)


def _layer_check(name, seeds):
    def run():
        worst = max(layer_gradient_errors(s)[name] for s in seeds)
        return worst < LAYER_TOL, f"max rel err {worst:.2e} over {len(seeds)} seeds"
    return run


def _naive_matmul_check():
    r = Rng(0)
    a, b = r.normal(size=(5, 4)), r.normal(size=(4, 3))
    ref = np.array([[sum(a[i, k] * b[k, j] for k in range(4)) for j in range(3)] for i in range(5)])
    err = float(np.abs(matmul(a, b) - ref).max() / np.abs(ref).max())
    return err < 1e-12, f"rel err {err:.1e}"


def _softmax_check():
    r = Rng(1)
    worst = 0.0
    for _ in range(1000):
        x = r.normal(0, 50, (3, 1 + r.integers(9)))
        worst = max(worst, float(np.abs(softmax(x, axis=1).sum(axis=1) - 1).max()))
    return worst < 1e-6, f"max |sum-1| {worst:.1e}"


def _stats_check():
    sym = stuart_maxwell(np.array([[5, 3, 2], [3, 4, 1], [2, 1, 6]]))
    mc = stuart_maxwell(np.array([[10, 9], [1, 10]]))
    ok = (sym.statistic == 0 and sym.p_value == 1 and abs(mc.statistic - 6.4) < 1e-9
          and abs(mc.p_value - 0.01141) < 1e-4
          and all(abs(chi_square_survival(x, 2) - math.exp(-x / 2)) < 1e-10 for x in (1, 2, 5)))
    return ok, f"McNemar case {mc.statistic:.4f}, p {mc.p_value:.5f}"


def battery(seeds=(0, 1, 2)):
    """(name, callable) pairs; each callable returns (passed, detail)."""
    # the cache only shares one battery's per-seed layer draws between its checks
    layer_gradient_errors.cache_clear()
    checks = []
    for name in ("conv2d", "batchnorm", "relu", "maxpool2x2", "global_avg_pool", "linear", "dropout",
                 "cross_entropy", "attention_gla", "attention_ca", "attention_none", "fusion_net",
                 "fusion_add", "fusion_max"):
        checks.append((f"{name}_backward", _layer_check(name, seeds)))

    def encoder():
        res = [encoder_gradient_error(s) for s in seeds]
        return all(ok for _, ok in res), f"max rel err {max(e for e, _ in res):.2e}"

    def model():
        res = [model_gradient_error(s) for s in seeds]
        return all(ok for _, ok in res), f"max rel err {max(e for e, _ in res):.2e}"

    def attention():
        inv = attention_invariants(1000)
        ok = inv["map_sum"] < 1e-6 and inv["oracle"] < 1e-12 and inv["in_range"] and inv["shift"] < 1e-6
        return ok, ", ".join(f"{k}={v}" for k, v in inv.items())

    def fusion():
        inv = fusion_invariants(1000)
        ok = inv["sum"] < 1e-7 and inv["open_interval"] and inv["swap_exact"] and inv["ln3"] < 1e-9
        return ok, ", ".join(f"{k}={v}" for k, v in inv.items())

    checks += [("encoder_end_to_end", encoder), ("model_end_to_end", model),
               ("attention_invariants", attention), ("fusion_invariants", fusion),
               ("matmul_oracle", _naive_matmul_check), ("softmax_normalization", _softmax_check),
               ("stuart_maxwell", _stats_check)]
    return checks


def run_battery(seeds=(0, 1, 2), out=None):
    results = []
    for name, fn in battery(seeds):
        res = _timed(name, fn)
        results.append(res)
        if out is not None:
            print(res.line(), file=out, flush=True)
    return results
