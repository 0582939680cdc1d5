import hashlib
import json
import os

import numpy as np
import pytest

from glamor import cli
from glamor.checkpoint import load_checkpoint
from glamor.data import read_pnm

TINY = {"channels": [4, 4, 8, 8, 8], "hidden": 8, "face_size": [16, 16], "context_size": [32, 32],
        "epochs_branch_pretrain": 1, "epochs_joint": 2, "batch_size": 8}


def tree_hash(root):
    h = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for f in sorted(files):
            path = os.path.join(dirpath, f)
            h.update(os.path.relpath(path, root).encode())
            h.update(open(path, "rb").read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "syn"
    assert cli.main(["gen-synth", "--out", str(out), "--per-class", "3", "--seed", "0"]) == 0
    return out


@pytest.fixture(scope="module")
def tiny_cfg(corpus):
    path = corpus.parent / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture(scope="module")
def trained(corpus, tiny_cfg):
    ckpt = corpus.parent / "m.ckpt"
    rc = cli.main(["train", "--manifest", str(corpus / "manifest.jsonl"), "--config", tiny_cfg,
                   "--out", str(ckpt), "--seed", "1"])
    assert rc == 0
    return ckpt


def test_gen_synth_counts_and_determinism(tmp_path, capsys):
    assert cli.main(["gen-synth", "--out", str(tmp_path / "a"), "--per-class", "10"]) == 0
    assert "Total        70" in capsys.readouterr().out
    assert len((tmp_path / "a" / "manifest.jsonl").read_text().splitlines()) == 70
    cli.main(["gen-synth", "--out", str(tmp_path / "b"), "--per-class", "2", "--seed", "4"])
    cli.main(["gen-synth", "--out", str(tmp_path / "c"), "--per-class", "2", "--seed", "4"])
    assert tree_hash(tmp_path / "b") == tree_hash(tmp_path / "c")


def test_usage_errors(capsys):
    assert cli.main(["gen-synth"]) == 2
    assert cli.main([]) == 2
    assert cli.main(["train", "--manifest", "m", "--out", "o", "--variant", "bogus"]) == 2
    assert cli.main(["infer", "--image", "i", "--bbox", "1,2,3", "--ckpt", "c"]) == 2
    assert cli.main(["gen-synth", "--out", "x", "--per-class", "0"]) == 2


def test_split_table_totals(corpus, capsys, tmp_path):
    out = tmp_path / "split.jsonl"
    assert cli.main(["split", "--manifest", str(corpus / "manifest.jsonl"), "--out", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    header = lines[0].split()
    assert header == ["Class", "train", "val", "test"]
    rows = [list(map(int, line.split()[1:])) for line in lines[1:8]]
    total = list(map(int, lines[8].split()[1:]))
    assert lines[8].startswith("Total")
    assert total == [sum(col) for col in zip(*rows)]
    assert sum(total) == len(out.read_text().splitlines())


def test_split_empty_manifest(tmp_path, capsys):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert cli.main(["split", "--manifest", str(path)]) == 2
    assert "no records" in capsys.readouterr().err


def test_split_missing_manifest(tmp_path):
    assert cli.main(["split", "--manifest", str(tmp_path / "none.jsonl")]) == 3


def test_train_writes_log_and_checkpoint(trained, capsys):
    log = [json.loads(line) for line in open(f"{trained}.log.jsonl")]
    assert log[0]["stage"] == "config" and log[0]["hidden"] == 8 and log[0]["seed"] == 1
    joint = [r for r in log if r.get("stage") == "joint"]
    assert [r["epoch"] for r in joint] == [1, 2]
    for r in joint:
        assert {"epoch", "split", "loss", "accuracy"} <= set(r)
    net, meta = load_checkpoint(trained)
    assert meta["config"]["hidden"] == 8 and net.config.channels == (4, 4, 8, 8, 8)


def test_flag_overrides_file(corpus, tiny_cfg, tmp_path):
    ckpt = tmp_path / "add.ckpt"
    rc = cli.main(["train", "--manifest", str(corpus / "manifest.jsonl"), "--config", tiny_cfg,
                   "--out", str(ckpt), "--fusion", "add", "--epochs-joint", "1"])
    assert rc == 0
    net, meta = load_checkpoint(ckpt)
    assert meta["config"]["epochs_joint"] == 1 and meta["config"]["hidden"] == 8
    names = [n for n, _, _ in net.named_parameters()]
    assert not any("score" in n for n in names)


def test_bad_config_file(corpus, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"learning_rate": 0.1, "colour": "red"}')
    args = ["train", "--manifest", str(corpus / "manifest.jsonl"), "--out", str(tmp_path / "x"),
            "--config", str(bad)]
    assert cli.main(args) == 2
    bad.write_text("{not json")
    assert cli.main(args) == 2
    bad.write_text('{"variant": "spotlight"}')
    assert cli.main(args) == 2


def test_same_seed_same_checkpoint(corpus, tiny_cfg, tmp_path):
    paths = []
    for name in ("a", "b"):
        ckpt = tmp_path / f"{name}.ckpt"
        cli.main(["train", "--manifest", str(corpus / "manifest.jsonl"), "--config", tiny_cfg,
                  "--out", str(ckpt), "--seed", "3", "--threads", "2" if name == "b" else "1",
                  "--epochs-joint", "1"])
        paths.append(ckpt)
    assert paths[0].read_bytes() != b""
    a, b = (load_checkpoint(p)[0].state_dict() for p in paths)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_eval_matches_final_log_line(trained, corpus, capsys, tmp_path):
    final = [json.loads(line) for line in open(f"{trained}.log.jsonl")][-1]
    preds = tmp_path / "preds.txt"
    assert cli.main(["eval", "--manifest", str(corpus / "manifest.jsonl"), "--ckpt", str(trained),
                     "--save-preds", str(preds)]) == 0
    out = capsys.readouterr().out
    acc = float(next(line for line in out.splitlines() if line.startswith("accuracy:")).split()[1])
    assert acc == pytest.approx(final["accuracy"], abs=5e-5)
    assert "confusion_json:" in out and "stuart-maxwell (prediction vs truth)" in out
    cm = json.loads(out.split("confusion_json: ")[1].splitlines()[0])
    assert np.array(cm["counts"]).sum() == 21

    assert cli.main(["eval", "--manifest", str(corpus / "manifest.jsonl"), "--ckpt", str(trained),
                     "--compare", str(preds)]) == 0
    line = [x for x in capsys.readouterr().out.splitlines() if "model vs compare" in x][0]
    assert line.endswith("p=1")


def test_eval_missing_checkpoint(corpus, tmp_path):
    assert cli.main(["eval", "--manifest", str(corpus / "manifest.jsonl"),
                     "--ckpt", str(tmp_path / "nope")]) == 3


def test_eval_corrupt_checkpoint(corpus, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert cli.main(["eval", "--manifest", str(corpus / "manifest.jsonl"), "--ckpt", str(bad)]) == 3


def _bbox(corpus, stem):
    for line in open(corpus / "manifest.jsonl"):
        rec = json.loads(line)
        if stem in rec["image_path"]:
            return rec["image_path"], ",".join(map(str, rec["face_bbox"]))
    raise KeyError(stem)


def test_infer_twice_identical(trained, corpus, capsys, tmp_path):
    image, bbox = _bbox(corpus, "sad_0002")
    outs = []
    for name in ("a", "b"):
        pgm = tmp_path / f"{name}.pgm"
        assert cli.main(["infer", "--image", str(corpus / image), "--bbox", bbox, "--ckpt", str(trained),
                         "--attn-out", str(pgm), "--attn-size", "56x56"]) == 0
        outs.append((capsys.readouterr().out.replace(str(pgm), ""), pgm.read_bytes()))
    assert outs[0] == outs[1]
    text = outs[0][0]
    assert text.startswith("prediction: ")
    probs = [float(line.split()[1]) for line in text.splitlines()[1:8]]
    assert sum(probs) == pytest.approx(1, abs=1e-5)
    img = read_pnm(tmp_path / "a.pgm")
    assert img.shape == (1, 56, 56) and img.max() == 255


def test_infer_bad_bbox(trained, corpus):
    image, _ = _bbox(corpus, "sad_0002")
    assert cli.main(["infer", "--image", str(corpus / image), "--bbox", "0,0,999,999",
                     "--ckpt", str(trained)]) == 2


def test_verify_exit_codes(monkeypatch, capsys):
    from glamor import verify
    from glamor.layers import Conv2d

    monkeypatch.setattr(verify, "battery", lambda seeds: [("ok", lambda: (True, ""))])
    assert cli.main(["verify", "--seeds", "1"]) == 0
    original = Conv2d.backward

    def skewed(self, g):
        gx = original(self, g)
        self.grads["weight"] = self.grads["weight"] + 1e-3
        return gx

    monkeypatch.undo()
    monkeypatch.setattr(Conv2d, "backward", skewed)
    assert cli.main(["verify", "--seeds", "1"]) == 1
    out = capsys.readouterr().out
    assert "[FAIL] conv2d_backward" in out and "failed: conv2d_backward" in out
