import numpy as np
import pytest

from conftest import random_samples, small_model
from parkflow.model import forward_full, predict
from parkflow.train import (
    TrainConfig,
    TrainingAborted,
    evaluate,
    fit,
    historical_mean_predict,
    loss,
    mse_r2,
    persistence_predict,
)


def test_loss_examples():
    theta = np.array([1.0, 2.0])
    assert loss(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]), theta, 0.0) == 1.0
    assert loss(np.array([[0.3, 0.2]]), np.array([[0.3, 0.2]]), theta, 0.0) == 0.0
    assert loss(np.array([[0.3, 0.2]]), np.array([[0.3, 0.2]]), theta, 0.01) == pytest.approx(0.05, abs=1e-15)
    with pytest.raises(ValueError):
        loss(np.zeros((1, 2)), np.zeros((1, 3)), theta, 0.0)


def test_mse_r2_examples():
    y = np.array([0.0, 0.5, 1.0])
    mse, r2 = mse_r2(np.array([0.0, 0.5, 0.5]), y)
    assert mse == pytest.approx(1 / 12, abs=1e-15)
    # SS_res = 0.25, SS_tot = 0.5
    assert r2 == pytest.approx(0.5, abs=1e-12)
    assert mse_r2(y, y) == (0.0, 1.0)
    assert mse_r2(np.full(3, y.mean()), y)[1] == pytest.approx(0.0, abs=1e-15)
    assert np.isnan(mse_r2(np.zeros(3), np.full(3, 0.4))[1])


def test_baselines(rng):
    S = random_samples(rng, 6, 3, K=2)
    assert np.array_equal(persistence_predict(S), S.short[:, -1, :])
    hm = historical_mean_predict(S[:4], S[4:])
    assert hm.shape == (2, 3)
    assert np.allclose(hm[0], S.target[:4].mean(axis=0))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(weight_decay=-1.0)


def test_zero_epochs_returns_initial_params(rng):
    p = small_model(N=2, K=1, dh=2)
    S = random_samples(rng, 8, 2)
    best, rep = fit(S[:6], S[6:], p, TrainConfig(max_iter=0))
    assert best.flat.tobytes() == p.flat.tobytes()
    assert rep.best_epoch == 0 and len(rep.val_mse) == 1


def test_one_epoch_on_one_sample_reduces_its_loss(rng):
    p = small_model(N=2, K=1, dh=2)
    S = random_samples(rng, 1, 2)
    before = float(np.sum((forward_full(S[0], p).y_hat - S.target[0]) ** 2))
    best, rep = fit(S, S, p, TrainConfig(max_iter=1, batch_size=1, lr=1e-3, weight_decay=0.0))
    after = float(np.sum((forward_full(S[0], best).y_hat - S.target[0]) ** 2))
    assert after < before
    assert rep.best_epoch == 1


def test_training_is_deterministic_and_selects_best(rng, tmp_path):
    p = small_model(N=2, K=1, dh=2)
    S = random_samples(rng, 30, 2)
    cfg = TrainConfig(max_iter=4, batch_size=8, lr=1e-2, seed=7)
    a, ra = fit(S[:24], S[24:], p, cfg)
    b, rb = fit(S[:24], S[24:], p, cfg)
    assert a.flat.tobytes() == b.flat.tobytes()
    ra.write_csv(tmp_path / "a.csv")
    rb.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert ra.val_mse[ra.best_epoch] == min(ra.val_mse)
    assert ra.val_mse[ra.best_epoch] <= ra.val_mse[0]
    assert evaluate(a, S[24:])[0] == pytest.approx(ra.val_mse[ra.best_epoch], abs=1e-15)


def test_elasticity_stays_non_negative(rng):
    p = small_model(N=2, K=1, dh=2)
    p.c[:] = 1e-4
    S = random_samples(rng, 20, 2)
    # targets far above predictions push c downward; projection must hold it at zero
    S.target[:] = 1.0
    best, rep = fit(S[:16], S[16:], p, TrainConfig(max_iter=3, batch_size=4, lr=5e-2))
    assert np.all(best.c >= 0)


def test_non_finite_gradient_aborts_with_best_params(rng):
    p = small_model(N=2, K=1, dh=2)
    S = random_samples(rng, 6, 2)
    S.target[2, 0] = np.nan
    with pytest.raises(TrainingAborted) as err:
        fit(S[:5], S[5:], p, TrainConfig(max_iter=2, batch_size=6))
    assert err.value.params.flat.tobytes() == p.flat.tobytes()
    assert len(err.value.report.val_mse) == 1


def test_adjoint_and_backprop_training_agree(rng):
    p = small_model(N=2, K=1, dh=2)
    S = random_samples(rng, 12, 2)
    a, _ = fit(S[:10], S[10:], p, TrainConfig(max_iter=1, batch_size=5, lr=1e-3, grad_mode="adjoint"))
    b, _ = fit(S[:10], S[10:], p, TrainConfig(max_iter=1, batch_size=5, lr=1e-3, grad_mode="backprop"))
    assert np.max(np.abs(predict(S, a) - predict(S, b))) < 1e-6
