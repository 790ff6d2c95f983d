import math

import numpy as np
import pytest

from ctkae.autodiff import NonFiniteError
from ctkae.data import generate_linear_oracle, linear_oracle_system, window_count
from ctkae.linalg import matrix_exp
from ctkae.losses import LossWeights
from ctkae.model import KoopmanAutoencoder, ModelConfig
from ctkae.trainer import (AdamState, TrainConfig, TrainState, TrainingError, decays, evaluate, gradcheck,
                           lr_schedule, optimizer_step, train)


def small_setup(seed=0, n_traj=4, T=14, horizon=4, epochs=3, **loss):
    ds = generate_linear_oracle(seed=seed, nz_true=3, n_d=8, T=T, n_traj=n_traj)
    model = KoopmanAutoencoder(ModelConfig(n_d=8, nz=4, hidden=(8,), rank=2, seed=seed))
    cfg = TrainConfig(epochs=epochs, warmup_epochs=1, batch_size=8, horizon=horizon, seed=seed,
                      loss=LossWeights(**loss))
    return ds, model, cfg


# -- schedule --------------------------------------------------------------------------

def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(20, cfg) == 5e-4
    assert math.isclose(lr_schedule(199, cfg), 1e-5, rel_tol=1e-12)
    assert lr_schedule(10, cfg) == pytest.approx(2.5e-4)


def test_lr_schedule_monotone_pieces():
    cfg = TrainConfig()
    lrs = np.array([lr_schedule(e, cfg) for e in range(cfg.epochs)])
    assert np.all(np.diff(lrs[:21]) > 0)
    assert np.all(np.diff(lrs[20:]) < 0)


@pytest.mark.parametrize("epoch", [-1, 200, 1000])
def test_lr_schedule_out_of_range(epoch):
    with pytest.raises(ValueError):
        lr_schedule(epoch, TrainConfig())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, warmup_epochs=10)
    with pytest.raises(ValueError):
        TrainConfig(lr_peak=0.0)
    with pytest.raises(ValueError):
        TrainConfig(scheme="exp")
    with pytest.raises(ValueError):
        TrainConfig(loss={"alpha": -1.0})


# -- optimizer ---------------------------------------------------------------------------

def test_zero_gradient_is_pure_decay():
    cfg = TrainConfig(weight_decay=0.01)
    p = {"w.weight": np.array([[1.0, -2.0]]), "w.bias": np.array([3.0])}
    g = {k: np.zeros_like(v) for k, v in p.items()}
    new, st = optimizer_step(p, g, AdamState(), cfg, lr=0.1)
    np.testing.assert_array_equal(new["w.weight"], p["w.weight"] * (1 - 0.1 * 0.01))
    np.testing.assert_array_equal(new["w.bias"], p["w.bias"])
    assert st.step == 1


def test_first_step_is_signed_lr():
    cfg = TrainConfig(weight_decay=0.0)
    p = {"w.weight": np.array([0.5, 0.5, 0.5])}
    g = {"w.weight": np.array([3.0, -0.2, 1e-3])}
    new, _ = optimizer_step(p, g, AdamState(), cfg, lr=1e-3)
    # m_hat = g and v_hat = g^2 after bias correction
    expected = -1e-3 * g["w.weight"] / (np.abs(g["w.weight"]) + cfg.adam_eps)
    np.testing.assert_allclose(new["w.weight"] - p["w.weight"], expected, rtol=1e-12)
    np.testing.assert_allclose(new["w.weight"] - p["w.weight"], -1e-3 * np.sign(g["w.weight"]), rtol=1e-4)


def test_optimizer_leaves_inputs_untouched():
    cfg = TrainConfig()
    p = {"a.weight": np.ones(3)}
    g = {"a.weight": np.ones(3)}
    st = AdamState()
    optimizer_step(p, g, st, cfg, lr=0.1)
    np.testing.assert_array_equal(p["a.weight"], np.ones(3))
    assert st.step == 0 and not st.m


def test_optimizer_rejects_non_finite_gradient():
    p = {"a.weight": np.ones(3)}
    with pytest.raises(NonFiniteError, match="a.weight"):
        optimizer_step(p, {"a.weight": np.array([1.0, np.nan, 0.0])}, AdamState(), TrainConfig(), lr=0.1)


def test_adam_state_round_trip():
    p = {"a.weight": np.ones(3)}
    _, st = optimizer_step(p, {"a.weight": np.arange(3.0)}, AdamState(), TrainConfig(), lr=0.1)
    back = AdamState.from_arrays(st.to_arrays())
    assert back.step == st.step
    np.testing.assert_array_equal(back.m["a.weight"], st.m["a.weight"])
    np.testing.assert_array_equal(back.v["a.weight"], st.v["a.weight"])


def test_decay_excludes_biases_and_dissipation():
    assert decays("encoder.present.0.weight") and decays("koopman.S") and decays("koopman.hyper.W1")
    for name in ("decoder.1.bias", "koopman.d", "koopman.hyper.b1", "koopman.hyper.b2"):
        assert not decays(name)


def test_gradient_clip_caps_global_norm():
    cfg = TrainConfig(grad_clip=1.0, weight_decay=0.0, beta1=0.0, beta2=0.0)
    p = {"a.weight": np.zeros(2)}
    _, st = optimizer_step(p, {"a.weight": np.array([30.0, 40.0])}, AdamState(), cfg, lr=0.1)
    np.testing.assert_allclose(st.m["a.weight"], [0.6, 0.8])


# -- training loop -----------------------------------------------------------------------

def test_training_is_bit_deterministic():
    outs = []
    for _ in range(2):
        ds, model, cfg = small_setup()
        record, _ = train(ds, model, cfg)
        outs.append((record.losses, model.state_dict()))
    np.testing.assert_array_equal(outs[0][0], outs[1][0])
    for k, v in outs[0][1].items():
        assert v.tobytes() == outs[1][1][k].tobytes(), k


def test_resume_matches_uninterrupted_run():
    ds, model, cfg = small_setup(epochs=4)
    full, _ = train(ds, model, cfg)

    ds, model2, cfg = small_setup(epochs=4)
    first, state = train(ds, model2, cfg, stop_epoch=2)
    assert state.epoch == 2 and len(first.epochs) == 2
    resumed = KoopmanAutoencoder(model2.cfg)
    resumed.load_state_dict(model2.state_dict())
    state = TrainState(state.epoch, AdamState.from_arrays(state.adam.to_arrays()))
    rest, state = train(ds, resumed, cfg, state=state)
    assert state.epoch == 4
    np.testing.assert_array_equal(np.concatenate([first.losses, rest.losses]), full.losses)
    for k, v in model.state_dict().items():
        assert v.tobytes() == resumed.state_dict()[k].tobytes(), k


def test_recon_only_smoke_run_decreases_monotonically():
    ds = generate_linear_oracle(seed=1, nz_true=4, n_d=16, T=20, n_traj=8)
    model = KoopmanAutoencoder(ModelConfig(n_d=16, nz=8, hidden=(32,), rank=2, seed=1))
    cfg = TrainConfig(epochs=10, warmup_epochs=1, batch_size=16, lr_peak=3e-3,
                      loss=LossWeights(alpha=0.0, beta=0.0, lambda_phys=0.0))
    record, _ = train(ds, model, cfg)
    losses = record.losses
    assert np.all(np.diff(losses) < 0), losses
    assert set(record.epochs[0]) >= {"epoch", "lr", "steps", "total", "recon"}
    np.testing.assert_allclose([r["total"] for r in record.epochs], [r["recon"] for r in record.epochs])


def test_steps_per_epoch_follow_window_counts():
    ds, _, _ = small_setup(n_traj=3, T=26, horizon=4)
    counts = {}
    for stride in (1, 6):
        _, model, cfg = small_setup(n_traj=3, T=26, horizon=4, epochs=2)
        cfg.stride, cfg.batch_size = stride, 1
        record, _ = train(ds, model, cfg)
        counts[stride] = record.epochs[0]["steps"]
    assert counts[1] == 3 * window_count(26, 2, 4, 1) == 3 * 21
    assert counts[6] == 3 * window_count(26, 2, 4, 6) == 3 * 4
    assert counts[1] / counts[6] == window_count(26, 2, 4, 1) / window_count(26, 2, 4, 6)


def test_training_error_carries_batch_provenance():
    ds, model, cfg = small_setup(epochs=2)
    model.params["koopman.S"].data[:] = np.nan
    with pytest.raises(TrainingError, match=r"epoch 0, batch 0 \(traj"):
        train(ds, model, cfg)


def test_too_short_trajectories_rejected():
    ds, model, cfg = small_setup(T=5, horizon=4)
    with pytest.raises(ValueError):
        train(ds, model, cfg)


def test_end_to_end_gradcheck_tiny_config():
    ds = generate_linear_oracle(seed=0, nz_true=2, n_d=6, T=6, n_traj=2)
    model = KoopmanAutoencoder(ModelConfig(n_d=6, nz=3, hidden=(4,), rank=2, hyper_hidden=4, embed_count=3))
    model.params["koopman.lora_B"].data = np.random.default_rng([0, 7]).normal(scale=0.3, size=(3, 2))
    cfg = TrainConfig(epochs=2, warmup_epochs=0, horizon=2,
                      loss=LossWeights(alpha=1.0, beta=1.0, lambda_phys=1.0, w_cos=1.0))
    errs = gradcheck(model, ds, cfg)
    assert set(errs) == set(model.params)
    assert max(errs.values()) < 1e-4, errs


# -- evaluation -----------------------------------------------------------------------------

def _perfect_model(seed, phi, nz, n_d, dt):
    gen, G = linear_oracle_system(seed, nz, n_d)
    K = gen(phi)
    sym = 0.5 * (K + K.T)
    assert np.allclose(sym, np.diag(np.diag(sym)), atol=1e-14)
    Gp = np.linalg.pinv(G)
    model = KoopmanAutoencoder(ModelConfig(n_d=n_d, nz=nz, hidden=(nz,), rank=2, linear=True))
    p = model.params
    for name in p:
        p[name].data = np.zeros(p[name].shape)
    eye = np.eye(nz)
    p["encoder.present.0.weight"].data = Gp
    p["encoder.present.1.weight"].data = eye
    # the history stream sees x_{t-1}, so it must advance its latent one step
    p["encoder.history.0.weight"].data = matrix_exp(K * dt) @ Gp
    p["encoder.history.1.weight"].data = eye.copy()
    p["decoder.0.weight"].data = eye.copy()
    p["decoder.1.weight"].data = G
    p["koopman.S"].data = 0.5 * (K - K.T)
    p["koopman.d"].data = np.log(np.expm1(-np.diag(K)))
    return model


def test_perfect_model_has_negligible_error():
    phi = 0.4
    ds = generate_linear_oracle(seed=3, nz_true=4, n_d=12, T=20, n_traj=3, phi_range=(phi, phi))
    model = _perfect_model(3, phi, 4, 12, ds.dt)
    for scheme in ("rk4", "exp", "implicit_midpoint"):
        res = evaluate(ds, model, horizon=8, scheme=scheme)
        assert np.all(res.per_step_mse < 1e-4), (scheme, res.per_step_mse)
        assert np.all(res.per_step_mse >= 0)
    assert np.all(evaluate(ds, model, 8, "exp").per_step_mse < 1e-20)


def test_rk4_and_exp_mse_agree_to_four_figures():
    ds, model, _ = small_setup(n_traj=3, T=20)
    a = evaluate(ds, model, horizon=8, scheme="rk4")
    b = evaluate(ds, model, horizon=8, scheme="exp")
    np.testing.assert_allclose(a.per_step_mse, b.per_step_mse, rtol=5e-5)
    assert float(f"{a.mean_mse:.4g}") == float(f"{b.mean_mse:.4g}")
    assert np.all(b.latent_discrepancy == 0.0)
    assert np.all(a.latent_discrepancy < 1e-6)


def test_horizon_sixty_supported():
    ds, model, _ = small_setup(n_traj=2, T=62)
    res = evaluate(ds, model, horizon=60, scheme="rk4")
    assert res.per_step_mse.shape == (60,) and res.n_windows == 2
    assert len(res.rows(ds.dt)) == 60 and res.rows(ds.dt)[-1]["step"] == 60
    with pytest.raises(ValueError):
        evaluate(ds, model, horizon=61)


def test_evaluation_independent_of_thread_count(monkeypatch):
    ds, model, _ = small_setup(n_traj=5, T=20)
    monkeypatch.setenv("KAE_THREADS", "1")
    a = evaluate(ds, model, horizon=6)
    monkeypatch.setenv("KAE_THREADS", "4")
    b = evaluate(ds, model, horizon=6)
    np.testing.assert_array_equal(a.per_step_mse, b.per_step_mse)
    np.testing.assert_array_equal(a.latent_discrepancy, b.latent_discrepancy)


def test_evaluate_rejects_unknown_scheme():
    ds, model, _ = small_setup()
    with pytest.raises(ValueError):
        evaluate(ds, model, scheme="leapfrog")


# -- trained reference model (shared with the acceptance suite) ---------------------------------

def _spearman(x, y):
    rx, ry = np.argsort(np.argsort(x)), np.argsort(np.argsort(y))
    return float(np.corrcoef(rx, ry)[0, 1])


@pytest.mark.slow
def test_error_accumulates_over_rollout(trained_oracle):
    res = evaluate(trained_oracle.test_ds, trained_oracle.model, horizon=8)
    assert _spearman(np.arange(1, 9), res.per_step_mse) > 0


@pytest.mark.slow
def test_trained_round_trip_reconstruction(trained_oracle):
    ds, model = trained_oracle.test_ds, trained_oracle.model
    x = ds.trajectories.reshape(ds.n_traj, ds.length, -1)
    cur, prev = x[:, 1:].reshape(-1, x.shape[-1]), x[:, :-1].reshape(-1, x.shape[-1])
    rec = model.decode(model.encode(cur, prev)).data
    assert np.sum((rec - cur) ** 2) / np.sum(cur ** 2) < 1e-2


def test_optimizer_rejects_overflowing_update():
    p = {"a.weight": np.ones(2)}
    with pytest.raises(NonFiniteError, match="overflowed"):
        optimizer_step(p, {"a.weight": np.array([1e200, 0.0])}, AdamState(), TrainConfig(), lr=0.1)
