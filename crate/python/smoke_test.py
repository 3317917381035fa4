#!/usr/bin/env python3
"""Smoke test for the floodcnn_py extension module.

Builds the cdylib if needed, imports it, and exercises every exported
surface: param tables, model build/save/load, forward/predict, synthetic
datasets, k-fold splitting, training, evaluation, metrics, and the
gradient check.

Run from anywhere:  python3 python/smoke_test.py
"""

import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_module():
    so = REPO / "target" / "debug" / "libfloodcnn_py.so"
    if not so.exists():
        subprocess.run(
            ["cargo", "build", "-p", "floodcnn-py"], cwd=REPO, check=True
        )
    staging = Path(tempfile.mkdtemp(prefix="floodcnn_py_"))
    shutil.copy2(so, staging / "floodcnn_py.so")
    sys.path.insert(0, str(staging))
    import floodcnn_py

    return floodcnn_py


def main():
    fc = import_module()
    print(f"floodcnn_py {fc.__version__}, classes {fc.CLASS_NAMES}")

    table = fc.param_table("vgg3block", input_size=128)
    assert "Total: 151,298,338" in table, table
    print("param_table: full-size total matches")

    side = 16
    model = fc.Model.build("vgg3block", input_size=side, seed=3)
    assert model.arch == "vgg3block" and model.seed == 3
    assert model.input_shape == (side, side, 3)
    assert "Total:" in model.param_table()
    print(f"built {model!r}")

    n = 4
    zeros = [0.0] * (n * side * side * 3)
    probs, shape = model.forward(zeros, [n, side, side, 3])
    assert shape == [n, 2]
    for i in range(n):
        row = probs[2 * i : 2 * i + 2]
        assert all(0.0 <= p <= 1.0 for p in row), row
        assert math.isclose(sum(row), 1.0, rel_tol=0, abs_tol=1e-5), row
    labels = model.predict(zeros, [n, side, side, 3])
    assert len(labels) == n and set(labels) <= set(fc.CLASS_NAMES)
    print("forward/predict: rows are probability distributions")

    ds = fc.Dataset.synthetic(per_class=40, side=side, seed=1)
    assert len(ds) == 80 and ds.class_counts() == (40, 40)
    data, dims, label, path = ds.sample(0)
    assert dims == [side, side, 3] and len(data) == side * side * 3
    assert label in fc.CLASS_NAMES and path
    folds = ds.kfold(5, seed=1)
    assert len(folds) == 5
    train_ds, val_ds = folds[0]
    assert len(train_ds) == 64 and len(val_ds) == 16
    print(f"dataset: {ds!r} -> fold0 {len(train_ds)}/{len(val_ds)}")

    history = fc.train(
        model, train_ds, val_ds, batch_size=16, max_epochs=3, seed=3
    )
    assert 1 <= history["best_epoch"] <= len(history["epochs"]) <= 3
    assert history["stop_reason"] in ("early_stopped", "max_epochs")
    best = history["epochs"][history["best_epoch"] - 1]
    print(
        f"train: {len(history['epochs'])} epochs, best {history['best_epoch']} "
        f"(val_loss {best['val_loss']:.4f}, val_acc {best['val_acc']:.2f})"
    )

    cm = fc.evaluate(model, val_ds, batch_size=16)
    assert cm["tp"] + cm["fp"] + cm["fn"] + cm["tn"] == len(val_ds)
    report = fc.metrics(cm["tp"], cm["fp"], cm["fn"], cm["tn"])
    # The model holds the best epoch's weights, so evaluating now must
    # reproduce the monitored validation accuracy exactly.
    assert math.isclose(report["accuracy"], best["val_acc"], rel_tol=0, abs_tol=0)
    print(f"evaluate: counts {cm}, accuracy {report['accuracy']:.2f}")

    exact = fc.metrics(991, 8, 9, 992)
    assert exact["accuracy"] == 0.9915
    assert abs(exact["f1"] - 0.9915) <= 1e-4
    empty = fc.metrics(0, 0, 0, 10)
    assert empty["tpr"] is None and empty["accuracy"] == 1.0
    print("metrics: reference counts give accuracy 0.9915 exactly")

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = Path(tmp) / "model.ckpt"
        model.save(ckpt)
        reloaded = fc.Model.load(ckpt)
        assert reloaded.seed == model.seed and reloaded.arch == model.arch
        val_data, val_dims, _, _ = val_ds.sample(0)
        a, _ = model.forward(val_data, [1] + val_dims)
        b, _ = reloaded.forward(val_data, [1] + val_dims)
        assert a == b, "reloaded model must predict identically"
    print("checkpoint: save/load round trip is prediction-identical")

    checks = fc.gradcheck(trials=3, seed=1)
    layers = {c["layer"] for c in checks}
    assert {"conv2d", "dense", "batchnorm", "model"} <= layers
    assert all(c["passed"] for c in checks), checks
    print(f"gradcheck: {len(checks)} checks passed")

    print("smoke test passed")


if __name__ == "__main__":
    main()
