import math

import numpy as np
import pytest

import incseg


def test_version_is_semver():
    assert incseg.version().count(".") == 2


def test_dice_hand_case():
    pred = np.zeros((4, 4), np.uint8)
    gt = np.zeros((4, 4), np.uint8)
    pred[0, :2] = 1
    gt[0, 1:3] = 1
    assert incseg.dice(pred, gt) == pytest.approx(0.5)
    assert incseg.dice(gt, gt) == 1.0


def test_assd_shifted_square():
    a = np.zeros((12, 12), np.uint8)
    b = np.zeros((12, 12), np.uint8)
    a[2:6, 2:6] = 1
    b[2:6, 5:9] = 1
    d = incseg.assd(a, b, [1.0, 1.0])
    assert 0 < d <= 3.0
    assert incseg.assd(a, b, [2.0, 2.0]) == pytest.approx(2 * d)
    assert incseg.assd(a, np.zeros_like(a), [1.0, 1.0]) is None


def test_greedy_matches_bound_against_exhaustive():
    rng = np.random.default_rng(3)
    aff = rng.uniform(size=(6, 9))
    picked = incseg.greedy_max_coverage(aff, 2)
    best = max(aff[[i, j]].max(axis=0).sum() for i in range(6) for j in range(i + 1, 6))
    assert picked["objective"][-1] >= (1 - 1 / math.e) * best - 1e-12
    assert incseg.coverage_objective(aff, picked["order"]) == pytest.approx(picked["objective"][-1])
    assert picked["order"][0] == int(np.argmax(aff.sum(axis=1)))


def test_generated_volume_shapes_and_determinism():
    v = incseg.generate_volume(7, 0)
    w = incseg.generate_volume(7, 0)
    assert v["image"].shape == (16, 64, 64)
    assert v["image"].dtype == np.float32
    np.testing.assert_array_equal(v["image"], w["image"])
    assert set(v["masks"]) == {1, 2}
    assert not np.any(v["masks"][1] & v["masks"][2])
    b = incseg.generate_volume(7, 0, "B")
    np.testing.assert_array_equal(b["masks"][1], v["masks"][1])


def test_config_resolution_and_errors():
    text = incseg.resolve_config("[experiment]\ncase = 2\n", {"train.epochs": "3"})
    assert "case = 2" in text
    assert "epochs = 3" in text
    with pytest.raises(incseg.IncsegError):
        incseg.resolve_config("[train]\nno_such_key = 1\n")


def test_cli_reports_usage_errors():
    code, _, err = incseg.run_cli(["evaluate", "--config", "/nonexistent/run.ini"])
    assert code != 0
    assert err
