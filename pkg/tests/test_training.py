import numpy as np
import pytest

from garnn import autodiff as ad
from garnn.autodiff import Tape
from garnn.data import MtsWindow, Normalizer
from garnn.model import GarnnModel, ModelConfig
from garnn.training import (Adam, TrainConfig, TrainingDiverged, fit, grid, objective, parse_config_text,
                            predict_batch, read_train_config, write_curve, write_train_config)

SMALL = dict(embed_dim=4, attn_dim=4, hidden_dim=8, mlp_hidden=8)


def windows(rng, n, N=3, T=6, scale=1.0):
    X = rng.normal(0, scale, (n, N, T))
    y = X[:, 0, -1] * 0.5 + 0.1 * X[:, 1, -2]
    return [MtsWindow(X[i], float(y[i]), "p", i) for i in range(n)]


# --- objective -------------------------------------------------------------------------------

def test_objective_zero_on_perfect_fit():
    assert objective(np.array([1.0, 2.0]), [1.0, 2.0], {}, 0.0).item() == 0.0


def test_objective_squared_error():
    assert objective(np.array([2.0]), [0.0], {}, 0.0).item() == 4.0


def test_objective_l2_term():
    # mse 4 plus (3 / 2) * |(1, 1)|^2 = 3
    params = {"w": ad.as_tensor(np.array([1.0, 1.0]))}
    assert objective(np.array([2.0]), [0.0], params, 3.0).item() == pytest.approx(7.0, abs=1e-15)


def test_objective_rejects_bad_shapes():
    with pytest.raises(ValueError):
        objective(np.zeros(0), np.zeros(0), {}, 0.0)
    with pytest.raises(ValueError):
        objective(np.zeros(2), np.zeros(3), {}, 0.0)


def test_l2_gradient_is_lambda_theta():
    tape = Tape()
    w = tape.watch("w", np.array([0.5, -2.0]))
    g = tape.backward(objective(np.array([0.0]), [0.0], {"w": w}, 0.1))
    np.testing.assert_allclose(g["w"], [0.05, -0.2], rtol=0, atol=1e-15)


# --- optimizer ----------------------------------------------------------------------------

def test_adam_zero_learning_rate_keeps_params():
    params = {"w": np.array([1.0, -3.0])}
    before = params["w"].tobytes()
    opt = Adam(params, lr=0.0)
    for _ in range(3):
        opt.step(params, {"w": np.array([10.0, -7.0])})
    assert params["w"].tobytes() == before


def test_adam_first_step_moves_by_lr_times_sign():
    params = {"w": np.array([1.0, 1.0])}
    Adam(params, lr=0.01).step(params, {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(params["w"], [0.99, 1.01], atol=1e-8)


# --- fitting --------------------------------------------------------------------------------

def test_overfits_single_window():
    rng = np.random.default_rng(0)
    w = windows(rng, 1)
    cfg = TrainConfig(learning_rate=1e-2, l2=0.0, batch_size=1, max_epochs=300, patience=300)
    res = fit(w, w, ModelConfig(n_vars=3, **SMALL), cfg)
    assert res.curve[-1].train_loss < 1e-3
    assert res.best_val_rmse ** 2 < 1e-3


def test_fit_is_deterministic():
    rng = np.random.default_rng(1)
    tr, va = windows(rng, 40), windows(rng, 10)
    cfg = TrainConfig(max_epochs=3, batch_size=16, seed=5)
    a = fit(tr, va, ModelConfig(n_vars=3, **SMALL), cfg)
    b = fit(tr, va, ModelConfig(n_vars=3, **SMALL), cfg)
    assert [r.val_rmse for r in a.curve] == [r.val_rmse for r in b.curve]
    assert all(a.model.params[k].tobytes() == b.model.params[k].tobytes() for k in a.model.params)


def test_seed_changes_run():
    rng = np.random.default_rng(1)
    tr, va = windows(rng, 40), windows(rng, 10)
    a = fit(tr, va, ModelConfig(n_vars=3, **SMALL), TrainConfig(max_epochs=1, seed=0))
    b = fit(tr, va, ModelConfig(n_vars=3, **SMALL), TrainConfig(max_epochs=1, seed=1))
    assert a.curve[0].val_rmse != b.curve[0].val_rmse


def test_best_epoch_model_is_returned():
    rng = np.random.default_rng(2)
    tr, va = windows(rng, 60), windows(rng, 20)
    norm = Normalizer(np.array([100.0, 0, 0]), np.array([20.0, 1, 1]))
    res = fit(tr, va, ModelConfig(n_vars=3, **SMALL), TrainConfig(max_epochs=8, learning_rate=5e-3), norm)
    best = min(res.curve, key=lambda r: r.val_rmse)
    assert res.best_epoch == best.epoch
    pred = predict_batch(res.model, va, norm)
    truth = norm.inverse_target(np.array([w.y for w in va]))
    assert np.sqrt(np.mean((pred - truth) ** 2)) == pytest.approx(best.val_rmse, rel=1e-12)


def test_patience_stops_training():
    rng = np.random.default_rng(3)
    tr, va = windows(rng, 20), windows(rng, 10)
    # a huge step size makes validation error bounce around, so improvement stalls early
    res = fit(tr, va, ModelConfig(n_vars=3, **SMALL), TrainConfig(max_epochs=200, patience=2, learning_rate=0.5))
    assert res.stopped_early
    assert len(res.curve) - res.best_epoch == 2


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_overflowing_inputs_raise_diverged():
    rng = np.random.default_rng(4)
    tr = windows(rng, 8, scale=1e200)
    va = windows(rng, 4)
    with pytest.raises(TrainingDiverged):
        fit(tr, va, ModelConfig(n_vars=3, **SMALL), TrainConfig(max_epochs=2))


def test_fit_rejects_empty_and_mismatched():
    rng = np.random.default_rng(5)
    tr = windows(rng, 4)
    with pytest.raises(ValueError):
        fit([], tr, ModelConfig(n_vars=3, **SMALL))
    with pytest.raises(ValueError):
        fit(tr, tr, ModelConfig(n_vars=4, **SMALL))


def test_fit_from_existing_model_leaves_it_untouched():
    rng = np.random.default_rng(6)
    tr = windows(rng, 10)
    start = GarnnModel.initialize(ModelConfig(n_vars=3, **SMALL), seed=3)
    snapshot = {k: v.copy() for k, v in start.params.items()}
    fit(tr, tr, start, TrainConfig(max_epochs=1))
    assert all(np.array_equal(start.params[k], snapshot[k]) for k in snapshot)


def test_curve_csv(tmp_path):
    rng = np.random.default_rng(7)
    tr = windows(rng, 10)
    res = fit(tr, tr, ModelConfig(n_vars=3, **SMALL), TrainConfig(max_epochs=2))
    write_curve(res, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_rmse" and len(lines) == 3
    assert float(lines[2].split(",")[2]) == res.curve[1].val_rmse


# --- prediction -----------------------------------------------------------------------------

def test_predict_batch_empty():
    model = GarnnModel.zeros(ModelConfig(n_vars=3, **SMALL))
    assert predict_batch(model, []).shape == (0,)


def test_predict_batch_identity_and_denormalized():
    rng = np.random.default_rng(8)
    model = GarnnModel.initialize(ModelConfig(n_vars=3, **SMALL), seed=1)
    ws = windows(rng, 5)
    raw = predict_batch(model, ws)
    np.testing.assert_array_equal(raw, predict_batch(model, ws, Normalizer.identity(3)))
    norm = Normalizer(np.array([140.0, 0, 0]), np.array([30.0, 1, 1]))
    np.testing.assert_allclose(predict_batch(model, ws, norm), raw * 30.0 + 140.0, rtol=1e-15)


def test_predict_batch_wrong_width():
    model = GarnnModel.zeros(ModelConfig(n_vars=2, **SMALL))
    with pytest.raises(ValueError):
        predict_batch(model, windows(np.random.default_rng(0), 2))


# --- configuration ----------------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = TrainConfig(learning_rate=1e-4, l2=1e-6, seed=3, batch_size=32)
    write_train_config(cfg, tmp_path / "t.txt")
    assert read_train_config(tmp_path / "t.txt") == cfg


def test_config_comments_and_unknown_keys(tmp_path):
    assert parse_config_text("# header\nlr = 1 # trailing\n\n") == {"lr": "1"}
    (tmp_path / "bad.txt").write_text("momentum = 0.9\n")
    with pytest.raises(ValueError, match="momentum"):
        read_train_config(tmp_path / "bad.txt")
    with pytest.raises(ValueError):
        parse_config_text("no equals sign")


@pytest.mark.parametrize("kwargs", [dict(learning_rate=0), dict(l2=-1), dict(patience=0), dict(batch_size=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_grid_enumeration():
    g = grid()
    assert len(g) == 36
    assert len({(c.learning_rate, c.l2, c.seed) for c in g}) == 36
