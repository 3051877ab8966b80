import os
from dataclasses import replace

import numpy as np
import pytest
from joblib import Parallel, delayed

from photonic_pinn import zo_trainer
from photonic_pinn.baseline_bp import init_mlp, map_and_degrade, offchip_train
from photonic_pinn.config import load_config
from photonic_pinn.errors import EpochAbortedError, NonFiniteLossError
from photonic_pinn.photonic_mesh import TWO_PI
from photonic_pinn.pinn import validation_mse
from photonic_pinn.zo_trainer import (NetworkConfig, ProblemConfig, SeedConfig, SPSAConfig,
                                      TrainConfig, TrainState, build_chip, chip_network,
                                      circular_distance, sign_step, spsa_gradient, train,
                                      train_epoch)

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")
TINY_TT = dict(arch="tonn", hidden=4, tt_out_factors=(2, 2), tt_in_factors=(2, 2), tt_ranks=(1, 2, 1))


def tiny_config(**overrides):
    base = dict(
        problem=ProblemConfig("hjb-toy", 2),
        network=NetworkConfig(**TINY_TT),
        epochs=6,
        batch_size=8,
        lr=1e-2,
        spsa=SPSAConfig(num_perturbations=4, radius=0.01, seed=3),
        val_every=2,
        n_val=50,
    )
    base.update(overrides)
    return TrainConfig(**base)


def strip_wall_time(records):
    # NaN marks unvalidated epochs and never compares equal
    return [(r.epoch, r.train_loss, -1.0 if np.isnan(r.val_mse) else r.val_mse,
             r.inferences, r.cum_inferences, r.cum_inferences_perturbed, r.lr) for r in records]


# =========================================
# ========= SPSA ==========================
# =========================================

def test_constant_loss_gives_zero_gradient(rng):
    phi = rng.uniform(0, TWO_PI, 16)
    g = spsa_gradient(lambda p: 3.0, phi, 3.0, SPSAConfig(5, 0.01), rng)
    np.testing.assert_array_equal(g, np.zeros(16))


def test_linear_loss_estimate_is_unbiased():
    rng = np.random.default_rng(0)
    c = rng.standard_normal(64)
    phi = rng.standard_normal(64)
    cfg = SPSAConfig(num_perturbations=1, radius=1e-3)

    def loss(p):
        return float(c @ p)

    total = np.zeros(64)
    for _ in range(2000):
        total += spsa_gradient(loss, phi, loss(phi), cfg, rng)
    mean = total / 2000
    cosine = mean @ c / (np.linalg.norm(mean) * np.linalg.norm(c))
    assert cosine >= 0.9


def test_estimate_is_reproducible():
    phi = np.linspace(0, 1, 10)
    cfg = SPSAConfig(num_perturbations=1, radius=0.01)

    def loss(p):
        return float(np.sum(p ** 2))

    a = spsa_gradient(loss, phi, loss(phi), cfg, np.random.default_rng(42))
    b = spsa_gradient(loss, phi, loss(phi), cfg, np.random.default_rng(42))
    np.testing.assert_array_equal(a, b)


def test_exactly_n_loss_calls():
    calls = []
    cfg = SPSAConfig(num_perturbations=7, radius=0.01)
    spsa_gradient(lambda p: calls.append(1) or 0.0, np.zeros(5), 0.0, cfg, np.random.default_rng(0))
    assert len(calls) == 7


def test_thread_count_does_not_change_estimate():
    phi = np.linspace(0, 2, 30)
    cfg = SPSAConfig(num_perturbations=9, radius=0.01)

    def loss(p):
        return float(np.sum(np.sin(p) * np.arange(30)))

    serial = spsa_gradient(loss, phi, loss(phi), cfg, np.random.default_rng(5), n_jobs=1)
    threaded = spsa_gradient(loss, phi, loss(phi), cfg, np.random.default_rng(5), n_jobs=4)
    np.testing.assert_array_equal(serial, threaded)


def test_non_finite_losses_raise():
    cfg = SPSAConfig(num_perturbations=3, radius=0.01)
    with pytest.raises(NonFiniteLossError):
        spsa_gradient(lambda p: 0.0, np.zeros(3), float("nan"), cfg, np.random.default_rng(0))
    with pytest.raises(NonFiniteLossError):
        spsa_gradient(lambda p: float("inf"), np.zeros(3), 0.0, cfg, np.random.default_rng(0))


@pytest.mark.parametrize("kwargs", [dict(num_perturbations=0), dict(radius=0.0)])
def test_invalid_spsa_config(kwargs):
    with pytest.raises(ValueError):
        SPSAConfig(**kwargs)


# =========================================
# ========= SIGN STEP =====================
# =========================================

def test_positive_gradient_lowers_every_phase(rng):
    phi = rng.uniform(0.5, 6.0, 40)
    stepped = sign_step(phi, np.abs(rng.standard_normal(40)) + 0.1, 0.01)
    np.testing.assert_allclose(stepped, phi - 0.01, rtol=0, atol=1e-15)


def test_zero_gradient_leaves_phases(rng):
    phi = rng.uniform(0, TWO_PI, 40)
    np.testing.assert_array_equal(sign_step(phi, np.zeros(40), 0.01), phi)


def test_mixed_signs_match_elementwise_oracle(rng):
    phi = rng.uniform(0, TWO_PI, 200)
    phi[:5] = [0.0, 0.004, TWO_PI - 0.004, 1.0, 2.0]
    g = rng.standard_normal(200)
    g[3] = 0.0
    alpha = 0.01
    stepped = sign_step(phi, g, alpha)

    for i in range(200):
        s = 0.0 if g[i] == 0 else (1.0 if g[i] > 0 else -1.0)
        expected = np.mod(phi[i] - alpha * s, TWO_PI)
        assert circular_distance(stepped[i], expected) <= 1e-12
        assert 0.0 <= stepped[i] < TWO_PI
    assert np.max(circular_distance(stepped, phi)) <= alpha + 1e-12


def test_non_periodic_coordinates_are_not_wrapped():
    phi = np.array([0.001, 0.001])
    stepped = sign_step(phi, np.array([1.0, 1.0]), 0.01, periodic=np.array([True, False]))
    assert stepped[0] == pytest.approx(TWO_PI - 0.009)
    assert stepped[1] == pytest.approx(-0.009)


def test_length_mismatch_raises():
    with pytest.raises(ValueError):
        sign_step(np.zeros(3), np.zeros(4), 0.1)


def test_sign_sgd_shrinks_quadratic():
    successes = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        target = rng.standard_normal(128)
        phi = target + rng.uniform(-0.25, 0.25, 128)
        no_wrap = np.zeros(128, dtype=bool)
        cfg = SPSAConfig(num_perturbations=10, radius=1e-3)

        def loss(p):
            return float(np.sum((p - target) ** 2))

        start = loss(phi)
        for _ in range(500):
            g = spsa_gradient(loss, phi, loss(phi), cfg, rng)
            phi = sign_step(phi, g, 1e-3, periodic=no_wrap)
        successes += loss(phi) <= 0.5 * start
    assert successes >= 9


# =========================================
# ========= TRAINING LOOP =================
# =========================================

def test_config_validation():
    with pytest.raises(ValueError):
        ProblemConfig("hjb20", 3)
    with pytest.raises(ValueError):
        ProblemConfig("heat", 2)
    with pytest.raises(ValueError):
        NetworkConfig(arch="tonn", hidden=8, tt_out_factors=(2, 2), tt_in_factors=(2, 2), tt_ranks=(1, 2, 1))
    with pytest.raises(ValueError):
        tiny_config(batch_size=0)


def test_full_network_parameter_counts():
    net = NetworkConfig()
    assert net.param_count(21) == 1536
    assert NetworkConfig(arch="onn-dense", hidden=1024).param_count(21) == 1_071_104


def test_lr_step_decay():
    cfg = tiny_config(lr=1e-3, lr_decay=True)
    assert cfg.lr_at(0) == 1e-3
    assert cfg.lr_at(1999) == 1e-3
    assert cfg.lr_at(2000) == 5e-4
    assert cfg.lr_at(4500) == 2.5e-4
    assert tiny_config(lr=1e-3).lr_at(4500) == 1e-3


def test_epoch_inference_count_at_full_dimension():
    cfg = tiny_config(
        problem=ProblemConfig("hjb20", 20),
        network=NetworkConfig(arch="onn-dense", hidden=8),
        batch_size=100,
        spsa=SPSAConfig(num_perturbations=10, radius=0.01),
        epochs=1,
    )
    state = TrainState(build_chip(cfg))
    record = train_epoch(state, cfg.problem.build(), cfg)
    assert record.inferences == 46_200
    assert record.cum_inferences == 46_200
    assert record.cum_inferences_perturbed == 42_000
    assert state.epoch == 1


def test_zero_learning_rate_is_a_no_op():
    cfg = tiny_config(lr=0.0, epochs=1)
    problem = cfg.problem.build()
    chip = build_chip(cfg)
    before = validation_mse(chip_network(chip), cfg.n_val, cfg.seeds.validation, problem)
    state = TrainState(chip)
    record = train_epoch(state, problem, cfg)
    np.testing.assert_array_equal(state.chip.params, chip.params)
    assert record.val_mse == before


def test_updates_stay_within_one_step():
    cfg = tiny_config(lr=0.02, epochs=1)
    chip = build_chip(cfg)
    state = TrainState(chip)
    train_epoch(state, cfg.problem.build(), cfg)
    mask = chip.angle_mask
    assert np.max(circular_distance(state.chip.params[mask], chip.params[mask])) <= 0.02 + 1e-12
    assert np.max(np.abs(state.chip.params[~mask] - chip.params[~mask])) <= 0.02 + 1e-12
    assert np.all(state.chip.params[~mask] >= 0.0)


def test_zero_epochs_returns_initial_chip():
    cfg = tiny_config(epochs=0)
    run = train(cfg)
    assert run.records == []
    np.testing.assert_array_equal(run.final_chip.params, build_chip(cfg).params)


def test_run_records_and_accounting():
    cfg = tiny_config()
    run = train(cfg)
    assert len(run.records) == cfg.epochs
    per_epoch = 8 * 6 * 5
    assert [r.cum_inferences for r in run.records] == [per_epoch * (k + 1) for k in range(cfg.epochs)]
    assert run.records[-1].cum_inferences_perturbed == cfg.epochs * 8 * 6 * 4
    validated = [r.epoch for r in run.records if not np.isnan(r.val_mse)]
    assert validated == [0, 2, 4, 5]


def test_runs_are_deterministic_across_thread_counts():
    cfg = tiny_config()
    a = train(cfg, n_jobs=1)
    b = train(cfg, n_jobs=1)
    c = train(cfg, n_jobs=3)
    assert strip_wall_time(a.records) == strip_wall_time(b.records)
    assert strip_wall_time(a.records) == strip_wall_time(c.records)
    np.testing.assert_array_equal(a.final_chip.params, c.final_chip.params)


def test_noise_free_config_builds_clean_chip():
    chip = build_chip(tiny_config(noise=None))
    assert chip.noise.is_identity
    assert chip.noise_config is None


def test_non_finite_loss_aborts_after_retries(monkeypatch):
    calls = []

    def broken(net, batch, cfg, prob):
        calls.append(1)
        return float("nan"), 0

    monkeypatch.setattr(zo_trainer, "residual_loss", broken)
    cfg = tiny_config(max_retries=2)
    with pytest.raises(EpochAbortedError):
        train(cfg)
    assert len(calls) == 3


def test_aborted_epoch_is_retried_with_fresh_draws(monkeypatch):
    real = zo_trainer.residual_loss
    calls = []

    def flaky(net, batch, cfg, prob):
        calls.append(1)
        if len(calls) == 1:
            return float("nan"), 0
        return real(net, batch, cfg, prob)

    monkeypatch.setattr(zo_trainer, "residual_loss", flaky)
    cfg = tiny_config(epochs=2)
    chip = build_chip(cfg)
    state = TrainState(chip)
    with pytest.raises(EpochAbortedError):
        train_epoch(state, cfg.problem.build(), cfg)
    assert state.epoch == 0 and state.cum_inferences == 0
    np.testing.assert_array_equal(state.chip.params, chip.params)

    run = train(cfg)
    assert len(run.records) == 2


def test_checkpoints_are_written(tmp_path):
    cfg = tiny_config(epochs=4)
    train(cfg, checkpoint_dir=str(tmp_path), checkpoint_every=2)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["chip_epoch000002.json", "chip_epoch000004.json",
                     "optimizer_epoch000002.json", "optimizer_epoch000004.json"]


@pytest.mark.slow
def test_smoke_training_lowers_loss():
    improved = 0
    for seed in range(10):
        cfg = TrainConfig(
            problem=ProblemConfig("hjb-toy", 2),
            network=NetworkConfig(arch="tonn", hidden=16, tt_out_factors=(4, 4),
                                  tt_in_factors=(4, 4), tt_ranks=(1, 2, 1)),
            epochs=200,
            batch_size=50,
            lr=5e-3,
            spsa=SPSAConfig(10, 0.01, seed),
            seeds=SeedConfig(train=seed, validation=99, noise=seed, init=seed),
            val_every=200,
            n_val=200,
        )
        losses = [r.train_loss for r in train(cfg).records]
        improved += np.mean(losses[-20:]) < np.mean(losses[:20])
    assert improved >= 9


def desk_scale_final_mse(seed):
    train_cfg = load_config(os.path.join(CONFIG_DIR, "toy.json")).train
    cfg = replace(train_cfg, spsa=replace(train_cfg.spsa, seed=seed),
                  seeds=SeedConfig(train=seed, validation=99, noise=seed, init=seed))
    return train(cfg).records[-1].val_mse


@pytest.mark.nightly
def test_desk_scale_on_chip_training():
    finals = Parallel(n_jobs=-1)(delayed(desk_scale_final_mse)(seed) for seed in range(10))
    assert sum(mse <= 5e-2 for mse in finals) >= 8


@pytest.mark.nightly
def test_full_scale_training_beats_mapped_dense_baseline():
    config = load_config(os.path.join(CONFIG_DIR, "hjb20.json"))
    train_cfg = config.train
    problem = train_cfg.problem.build()

    on_chip = train(train_cfg, n_jobs=os.cpu_count() or 1).records[-1].val_mse
    assert on_chip <= 2e-2

    baseline = config.baseline
    dense = offchip_train(init_mlp(problem.dim + 1, baseline.hidden, train_cfg.seeds.init),
                          baseline.offchip, problem).mlp
    mapped = map_and_degrade(dense, train_cfg.noise, baseline.n_noise_seeds, problem,
                             n_val=train_cfg.n_val, val_seed=train_cfg.seeds.validation,
                             noise_seed=train_cfg.seeds.noise)
    assert on_chip < mapped.median_noisy
