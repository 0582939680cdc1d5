import json

import numpy as np
import pytest

from glamor.errors import ConfigError, InputError
from glamor.model import GlamorNet, ModelConfig
from glamor.training import PreparedSet, TrainConfig, evaluate, fit, pretrain_branch, train_joint


@pytest.fixture(scope="module")
def small_set(synth_corpus):
    """First three synthetic classes, prepared at the reduced network sizes."""
    _, records = synth_corpus
    recs = [r for r in records if int(r.label) < 3]
    return PreparedSet.from_records(recs, mask=True, face_size=(16, 16), context_resize=(36, 48),
                                    crop=(32, 32), dtype=np.float64)


def small_net(seed=0, **kw):
    cfg = ModelConfig(channels=(4, 4, 8, 8, 8), hidden=8, n_classes=3, face_size=(16, 16),
                      context_size=(32, 32), **kw)
    return GlamorNet(cfg, seed=seed, precision="f64")


def params(net):
    return {n: p.copy() for n, p, _ in net.named_parameters()}


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-0.1)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs_joint=-1)
    with pytest.raises(ConfigError):
        TrainConfig(precision="f16")
    assert TrainConfig().digest() == TrainConfig().digest()
    assert TrainConfig(seed=1).digest() != TrainConfig().digest()


def test_batches_cover_and_merge_singletons(small_set):
    order = np.arange(31)
    sizes = [len(b) for b in small_set.batch_indices(10, order)]
    assert sizes == [10, 10, 11]
    idx = np.concatenate([b[3] for b in small_set.batches(8)])
    assert np.array_equal(idx, np.arange(len(small_set)))


def test_train_batches_reproducible(small_set):
    from glamor.tensor import Rng
    a = [(c.copy(), i) for _, c, _, i in small_set.batches(8, True, Rng(3))]
    b = [(c.copy(), i) for _, c, _, i in small_set.batches(8, True, Rng(3))]
    for (ca, ia), (cb, ib) in zip(a, b):
        assert np.array_equal(ia, ib) and np.array_equal(ca, cb)


def test_pretrain_loss_decreases(small_set):
    net = small_net()
    history = []
    cfg = TrainConfig(learning_rate=0.02, batch_size=10, epochs_branch_pretrain=6, epochs_joint=0)
    pretrain_branch(net, "face", small_set, cfg, history=history)
    losses = [h["loss"] for h in history]
    assert len(losses) == 6 and losses[-1] < losses[0]
    assert all(h["stage"] == "pretrain_face" for h in history)


def test_pretrain_changes_only_that_encoder(small_set):
    net = small_net()
    before = params(net)
    pretrain_branch(net, "context", small_set, TrainConfig(epochs_branch_pretrain=1, batch_size=10))
    after = params(net)
    for name in before:
        same = np.array_equal(before[name], after[name])
        assert same != name.startswith("context_encoder."), name


def test_pretrained_branch_is_deterministic(small_set):
    net = small_net()
    pretrain_branch(net, "face", small_set, TrainConfig(epochs_branch_pretrain=1, batch_size=10))
    x = small_set.faces[:5]
    assert np.array_equal(net.face_encoder.forward(x), net.face_encoder.forward(x))


def test_pretrain_errors(small_set):
    with pytest.raises(ConfigError):
        pretrain_branch(small_net(), "scene", small_set, TrainConfig())
    with pytest.raises(ConfigError):
        pretrain_branch(small_net(ablation="wF"), "context", small_set, TrainConfig())
    with pytest.raises(InputError):
        PreparedSet.from_records([])


def test_zero_lr_is_frozen(small_set):
    net = small_net()
    before = params(net)
    fit(net, small_set, TrainConfig(learning_rate=0.0, batch_size=10, epochs_branch_pretrain=1,
                                    epochs_joint=1))
    after = params(net)
    assert all(np.array_equal(before[n], after[n]) for n in before)


def test_first_steps_bit_identical(small_set):
    runs = []
    for _ in range(2):
        net = small_net(seed=5)
        res = train_joint(net, small_set, TrainConfig(batch_size=8, epochs_joint=2, seed=5),
                          max_steps=5)
        runs.append(res.step_losses)
    assert len(runs[0]) == 5 and runs[0] == runs[1]


def test_seed_changes_trajectory(small_set):
    a = train_joint(small_net(seed=1), small_set, TrainConfig(batch_size=8, seed=1), max_steps=3)
    b = train_joint(small_net(seed=2), small_set, TrainConfig(batch_size=8, seed=2), max_steps=3)
    assert a.step_losses != b.step_losses


def test_joint_log_and_fusion_weights(small_set):
    net = small_net()
    lines = []
    cfg = TrainConfig(learning_rate=0.02, batch_size=10, epochs_branch_pretrain=1, epochs_joint=4)
    res = fit(net, small_set, cfg, sink=lambda rec: lines.append(json.dumps(rec)))
    joint = [h for h in res.history if h["stage"] == "joint"]
    assert [h["epoch"] for h in joint] == [1, 2, 3, 4]
    for h in joint:
        assert {"epoch", "split", "loss", "accuracy"} <= set(h)
        assert 0 < h["fusion_w_min"] <= h["fusion_w_max"] < 1
    assert len(lines) == 2 + 4
    assert joint[-1]["accuracy"] > 1 / 3


def test_evaluate_matches_forward(small_set):
    net = small_net()
    ev = evaluate(net, small_set, batch_size=7)
    preds = []
    for face, ctx, _, _ in small_set.batches(64):
        preds.append(net.predict(face, ctx))
    assert np.array_equal(ev["preds"], np.concatenate(preds))
    assert ev["accuracy"] == np.mean(ev["preds"] == small_set.labels)
