"""Smoke tests for the python bindings and the CLI binary."""

import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

import octa


def test_elu_values():
    assert octa.elu(2.0) == 2.0
    assert octa.elu(0.0) == 0.0
    assert octa.elu(-1.0) == pytest.approx(math.expm1(-1.0), rel=1e-12)


def test_corruption_count():
    batch = np.ones((4, 100), dtype=np.float32)
    kept = octa.corrupt(batch, 0.5, seed=3)
    assert kept.shape == (4, 100)
    assert (np.sum(kept == 0.0, axis=1) == 50).all()


def test_phantom_surfaces_and_patches():
    phantom = octa.generate_phantom("late", seed=11, width=128, height=128, bscans=2)
    bscan = phantom["bscans"][0]
    assert bscan.shape == (128, 128)
    assert np.asarray(phantom["mask"][0]).sum() > 0

    ilm, bm = octa.find_surfaces(bscan)
    truth_ilm = np.asarray(phantom["ilm"][0])
    truth_bm = np.asarray(phantom["bm"][0])
    assert np.abs(np.asarray(ilm) - truth_ilm).mean() <= 2.0
    assert np.abs(np.asarray(bm) - truth_bm).mean() <= 2.0

    normalized = octa.normalize(bscan)
    small, large = octa.extract_patch_pair(normalized, 64, 64)
    assert small.shape == (1024,)
    assert large.shape == (1024,)
    assert small.min() >= 0.0 and small.max() <= 1.0


def test_ddae_training_and_embedding():
    rng = np.random.default_rng(5)
    patches = rng.random((120, 64), dtype=np.float32)
    model, trace = octa.train_ddae(
        patches, [16, 8], lr_schedule=[(4, 1e-2)], minibatch=30,
        corruption=0.3, seed=9,
    )
    assert model.input_dim == 64
    assert model.code_dim == 8
    assert len(trace) == 4
    codes = model.encode(patches)
    assert codes.shape == (120, 8)
    assert trace[-1][1] <= trace[0][1]


def test_gradient_check_small():
    rng = np.random.default_rng(7)
    batch = rng.random((5, 12))
    assert octa.gradient_check(batch, [6, 3], seed=2) < 1e-4


def test_ocsvm_nu_property():
    rng = np.random.default_rng(3)
    Z = rng.normal(size=(1000, 8)).astype(np.float32)
    model = octa.ocsvm_fit(Z, 0.2)
    fraction = float(np.mean(model.decision_batch(Z) < 0))
    assert abs(fraction - 0.2) <= max(0.02, 3 * math.sqrt(0.2 * 0.8 / 1000))


def test_spherical_kmeans_recovery():
    rng = np.random.default_rng(1)
    blobs = []
    for k in range(3):
        center = np.zeros(8)
        center[2 * k] = 1.0
        blobs.append(center + 0.05 * rng.random((50, 8)))
    Z = np.abs(np.vstack(blobs)).astype(np.float32)
    shifted, _ = octa.shift_nonnegative(Z)
    best, curve = octa.select_n_clusters(shifted, 2, 6, seed=4)
    assert best.n_clusters == 3
    assert len(curve) == 5
    labels = best.assign_batch(shifted)
    assert len(set(labels[:50])) == 1


def test_forest_and_metrics():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(80, 3)).astype(np.float32)
    y = (X[:, 0] > 0).astype(int).tolist()
    model = octa.fit_forest(X, y, ["neg", "pos"], ["a", "b", "c"],
                            n_trees=16, seed=3)
    cls, votes = octa.forest_predict(model, np.array([3.0, 0, 0], dtype=np.float32))
    assert cls == 1
    assert sum(votes) == pytest.approx(1.0)
    overall, signed = octa.permutation_importance(model, X, y)
    assert int(np.argmax(overall)) == 0

    assert octa.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)
    m = octa.seg_metrics_from_counts(2, 1, 1, 6)
    assert m["dice"] == pytest.approx(2 * 2 / 6.0)
    p = octa.wilcoxon_signed_rank(list(range(1, 9)), [0] * 8)
    assert p == pytest.approx(2.0 / 256.0)


def test_cli_micro_pipeline(tmp_path):
    cli = os.environ.get("OCTA_CLI")
    if not cli or not os.path.exists(cli):
        pytest.skip("octa binary not provided via OCTA_CLI")

    config = {
        "run_dir": str(tmp_path / "run"),
        "seed": 5,
        "profile": "desk",
        "synth": {
            "width": 96, "height": 96, "bscans": 2,
            "plan": [
                {"label": "healthy", "split": "train", "count": 3},
                {"label": "healthy", "split": "test", "count": 2},
                {"label": "late", "split": "validation", "count": 1},
                {"label": "late", "split": "categorization", "count": 2},
                {"label": "late", "split": "test", "count": 2},
                {"label": "early", "split": "categorization", "count": 2},
                {"label": "early", "split": "test", "count": 2},
            ],
        },
        "features": {
            "embedders": ["ddae"],
            "patches_per_volume": 60,
            "scale_arch": [64, 32],
            "fuse_dim": 16,
            "minibatch": 25,
            "lr_schedule": [{"epochs": 2, "rate": 1e-4}],
        },
        "svm": {"nu_grid": [0.1, 0.3]},
        "cluster": {"c_min": 2, "c_max": 3, "restarts": 4},
        "forest": {"n_trees": 8, "train_per_class": 3},
        "output": {"eval_max_volumes": 2, "overlays": True},
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))

    # Prerequisite ordering is enforced with a distinct exit code.
    out = subprocess.run([cli, "segment", "--config", str(config_path)],
                         capture_output=True, text=True)
    assert out.returncode == 2
    assert "fit-svm" in out.stderr

    subprocess.run([cli, "run", "--config", str(config_path)], check=True)
    report = json.loads((tmp_path / "run" / "eval" / "report.json").read_text())
    assert "ddae" in report["embedders"]
    assert (tmp_path / "run" / "classify" / "classify_report.json").exists()

    # The bindings drive the same pipeline entry point.
    octa.run_stage("eval", config_path)


def test_run_stage_unknown_raises(tmp_path):
    config_path = tmp_path / "c.json"
    config_path.write_text("{}")
    with pytest.raises(Exception):
        octa.run_stage("bogus", config_path)
