"""Acceptance criteria, each at its stated tolerance and time budget.

Every test records a one-line outcome that the terminal summary prints.
"""

import json
import time

import numpy as np
import pytest

from adenet import checkpoint, data, explain, metrics, models, train
from adenet.cli import run
from adenet.metrics import ConfusionMatrix2

import gradcheck
from acceptance_log import record
from oracles import mann_whitney_auc


def _timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


def test_c01_architecture_counts(capsys):
    code, secs = _timed(lambda: run(["params", "--arch", "adenet"]))
    out = capsys.readouterr().out.strip()
    ok = code == 0 and out == "trainable=102082 non_trainable=448" and secs < 1
    record(1, "architecture fidelity", ok, f"{out!r} in {secs:.2f}s")
    assert ok


def test_c02_twenty_epoch_row():
    r, secs = _timed(lambda: metrics.metrics_from_confusion(ConfusionMatrix2(1026, 424, 213, 3962)))
    ok = (abs(r.accuracy - 0.8868) <= 0.0005 and abs(r.precision - 0.87) <= 0.02
          and abs(r.recall - 0.83) <= 0.02 and abs(r.f1 - 0.84) <= 0.02 and secs < 1)
    record(2, "20-epoch metric row", ok,
           f"acc {r.accuracy:.4f} P {r.precision:.4f} R {r.recall:.4f} F1 {r.f1:.4f}")
    assert ok


def test_c03_ten_epoch_row():
    r, secs = _timed(lambda: metrics.metrics_from_confusion(ConfusionMatrix2(947, 503, 257, 3918)))
    ok = (abs(r.accuracy - 0.8649) <= 0.0005 and abs(r.f1 - 0.81) <= 0.02
          and abs(r.recall - 0.80) <= 0.02 and secs < 1)
    record(3, "10-epoch metric row", ok, f"acc {r.accuracy:.4f} F1 {r.f1:.4f} R {r.recall:.4f}")
    assert ok


def test_c04_false_negative_rate():
    rate = metrics.false_negative_rate(ConfusionMatrix2(1026, 424, 213, 3962))
    ok = rate == 424 / 5625 and 0.065 <= rate <= 0.085
    record(4, "false-negative rate", ok, f"{rate:.4f}")
    assert ok


def test_c05_gradient_suite():
    t = time.perf_counter()
    worst = {kind: gradcheck.run_trials(kind, 100)[0] for kind in gradcheck.CHECKS}
    secs = time.perf_counter() - t
    ok = set(worst) == {"conv3x3-same", "conv5x5-valid", "batchnorm-train", "relu", "maxpool2",
                        "avgpool2", "global-avg-pool", "dense", "softmax-xent"}
    ok = ok and max(worst.values()) <= 1e-4 and secs < 120
    record(5, "gradient suite", ok, f"max rel err {max(worst.values()):.1e} over 9x100 trials, {secs:.0f}s")
    assert ok


def test_c06_overfit(overfit_set):
    items, labels = overfit_set
    t = time.perf_counter()
    reached = []
    for seed in range(10):
        m = models.build_adenet(seed=seed)
        hit = []

        def full_accuracy(ep, hist, m=m, hit=hit):
            if ((train.predict_scores(m, items) >= 0.5) == labels).all():
                hit.append(ep)
                return True
            return False

        train.train(m, overfit_set, config=train.TrainConfig(epochs=200, seed=seed), on_epoch=full_accuracy)
        reached.append(hit[0] if hit else None)
    secs = time.perf_counter() - t
    n_ok = sum(e is not None for e in reached)
    ok = n_ok >= 9 and secs < 300
    record(6, "overfit sanity", ok, f"{n_ok}/10 seeds at 100% (epochs {reached}), {secs:.0f}s")
    assert ok


@pytest.fixture(scope="module")
def desk_experiment(tmp_path_factory):
    """The 600-image, 5-fold, 20-epoch run through the command line."""
    out = tmp_path_factory.mktemp("desk")
    t = time.perf_counter()
    assert run(["--seed", "7", "synth", "--n", "600", "--damaged-ratio", "0.333",
                "--out", str(out / "data")]) == 0
    code = run(["cv", "--manifest", str(out / "data" / "manifest.csv"), "--k", "5", "--epochs", "20",
                "--batch-size", "16", "--gradcam", "--out", str(out / "cv.json")])
    secs = time.perf_counter() - t
    assert code == 0
    return json.loads((out / "cv.json").read_text()), secs


def test_c07_desk_experiment(desk_experiment):
    report, secs = desk_experiment
    f1 = {name: arm["fold_mean"]["f1"] for name, arm in report["arms"].items()}
    ok = (report["counts"] == {"damaged": 200, "undamaged": 400} and report["k"] == 5
          and f1["adenet"] >= 0.90 and f1["adenet"] > f1["lenet5"] and f1["adenet"] > f1["forest"]
          and secs < 900)
    detail = ", ".join(f"{n} {v:.4f}" for n, v in f1.items())
    record(7, "desk-scale experiment", ok, f"fold-mean macro F1 {detail}; {secs:.0f}s")
    assert ok


def test_c08_auc_oracle():
    r = np.random.default_rng(8)
    t = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        n = int(r.integers(2, 65))
        labels = r.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # coarse scores so ties are common
        scores = r.integers(0, int(r.integers(2, 20)), n) / 10
        num, den = mann_whitney_auc(scores, labels)
        mismatches += metrics.roc_auc(scores, labels)[0] != num / den
    secs = time.perf_counter() - t
    ok = mismatches == 0 and secs < 30
    record(8, "AUC oracle", ok, f"{1000 - mismatches}/1000 exact, {secs:.1f}s")
    assert ok


def test_c09_determinism_and_serialization(tmp_path):
    t = time.perf_counter()
    assert run(["--seed", "4", "synth", "--n", "30", "--out", str(tmp_path / "data")]) == 0
    outputs = []
    for i in range(2):
        argv = ["--seed", "4", "--deterministic", "cv", "--manifest", str(tmp_path / "data/manifest.csv"),
                "--k", "3", "--epochs", "2", "--trees", "10", "--out", str(tmp_path / f"cv{i}.json")]
        assert run(argv) == 0
        argv = ["--seed", "4", "--deterministic", "train", "--manifest", str(tmp_path / "data/manifest.csv"),
                "--epochs", "2", "--out", str(tmp_path / f"train{i}")]
        assert run(argv) == 0
        outputs.append([(tmp_path / f"cv{i}.json").read_bytes()]
                       + [(tmp_path / f"train{i}" / n).read_bytes()
                          for n in ("model.ckpt", "history.json", "split.json", "report.json")])
    reports_equal = outputs[0] == outputs[1]

    r = np.random.default_rng(9)
    m = checkpoint.load_checkpoint(tmp_path / "train0" / "model.ckpt")
    checkpoint.save_checkpoint(m, tmp_path / "again.ckpt")
    back = checkpoint.load_checkpoint(tmp_path / "again.ckpt")
    crops = [r.integers(0, 256, (int(r.integers(8, 60)), int(r.integers(8, 60)), 3), dtype=np.uint8)
             for _ in range(100)]
    same = all(np.array_equal(models.predict_proba(m, data.pad_batch([c]).x),
                              models.predict_proba(back, data.pad_batch([c]).x)) for c in crops)
    secs = time.perf_counter() - t
    ok = reports_equal and same and secs < 120
    record(9, "determinism and serialization", ok,
           f"reports identical: {reports_equal}; 100 crops identical: {same}; {secs:.0f}s")
    assert ok


def test_c10_gradcam(desk_experiment):
    report, _ = desk_experiment
    r = np.random.default_rng(10)
    nets = [models.build_adenet(seed=s) for s in range(3)]
    degenerate = models.build_adenet(seed=3)
    [l for l in degenerate.layers if l.kind == "dense"][-1].params["w"][:] = 0
    nets.append(degenerate)
    t = time.perf_counter()
    bad = 0
    zero_maps = 0
    for i in range(1000):
        m = nets[i % len(nets)]
        crop = r.integers(0, 256, (int(r.integers(8, 48)), int(r.integers(8, 48)), 3), dtype=np.uint8)
        hm = explain.gradcam(m, crop)
        for a in (hm.raw, hm.upsampled):
            bad += not (np.isfinite(a).all() and a.min() >= 0 and a.max() <= 1)
        zero_maps += m is degenerate and not hm.upsampled.any()
    secs = time.perf_counter() - t
    median = report["localization"]["median"]
    ok = bad == 0 and zero_maps == 250 and median >= 1.5 and secs < 300
    record(10, "Grad-CAM", ok,
           f"1000 maps in [0,1] without NaN: {bad == 0}; degenerate all-zero: {zero_maps}/250; "
           f"median localization {median:.2f} over {report['localization']['n']} damaged crops "
           f"(target 2.0, gate 1.5); {secs:.0f}s")
    assert ok


def test_c11_batchnorm_ablation(tmp_path):
    assert run(["--seed", "5", "synth", "--n", "30", "--out", str(tmp_path / "data")]) == 0
    code = run(["cv", "--manifest", str(tmp_path / "data/manifest.csv"), "--k", "3", "--epochs", "2",
                "--arms", "adenet", "--ablation", "--out", str(tmp_path / "cv.json")])
    report = json.loads((tmp_path / "cv.json").read_text())
    ab = report.get("ablation", {})
    both = {"with_batchnorm", "without_batchnorm"} <= set(ab) and all(
        ab[k]["f1"] is not None for k in ("with_batchnorm", "without_batchnorm"))
    delta = ab.get("param_delta")
    # with minus without; batch norm carries 448 trainable scale/shift values and
    # 448 non-trainable running statistics (the 448 of criterion 1)
    ok = code == 0 and both and delta == {"trainable": 448, "non_trainable": 448}
    record(11, "batch-norm ablation", ok, f"both variants complete: {both}; delta (with - without) {delta}")
    assert ok
