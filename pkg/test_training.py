#!/usr/bin/env python3
"""
Tests for the training loop: subcell schedule, penalty ramp, Adam, determinism, checkpoints
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from schemas import LossReport, LossWeights, NetworkConfig, ProblemPreset, TrainConfig
from services.neural_field import NetworkGradients
from services.preset_service import get_preset, setup_problem
from services.training_service import (
    AdamState,
    Checkpoint,
    TrainingService,
    adam_step,
    alpha_schedule,
    load_checkpoint,
    network_from_config,
    read_epoch_log,
    save_checkpoint,
    select_subcells,
    write_epoch_log,
)


def _tiny_setup(name: str = "stretch", **changes):
    record = get_preset(name).model_dump()
    record.update({"macro_dims": (2, 1), "micro_dims": (4, 4)})
    record.update(changes)
    return setup_problem(ProblemPreset.model_validate(record))


def _tiny_config(**changes) -> TrainConfig:
    values = dict(
        epochs=4,
        learning_rate=0.01,
        network=NetworkConfig(local_kernels_per_dim=2, global_kernels_per_dim=2),
        weights=LossWeights(alpha=1.0, alpha_max=5.0),
    )
    values.update(changes)
    return TrainConfig(**values)


def test_subcell_schedule_cycles_row_major():
    seen = [tuple(select_subcells(e, (2, 1), 2)[0]) for e in range(5)]
    assert seen == [(0, 0), (1, 0), (0, 1), (1, 1), (0, 0)]
    assert np.all(select_subcells(3, (3, 2), 2) == [1, 1])
    assert np.all(select_subcells(7, (2, 2), 1) == 0)


def test_alpha_ramp():
    w = LossWeights(alpha=1.0, alpha_max=51.0, alpha_ramp_fraction=0.5)
    assert alpha_schedule(0, 100, w) == 1.0
    assert np.isclose(alpha_schedule(25, 100, w), 26.0)
    assert alpha_schedule(50, 100, w) == 51.0
    assert alpha_schedule(99, 100, w) == 51.0


def test_adam_first_step_is_learning_rate_sized():
    net = network_from_config(_tiny_config())
    rng = np.random.default_rng(0)
    grads = NetworkGradients(rng.standard_normal(net.kernels.shape), rng.standard_normal(net.n_kernels))
    new, state = adam_step(net, AdamState.zeros_like(net), grads, 1e-3)
    assert state.step == 1
    assert np.allclose(np.abs(new.weights - net.weights), 1e-3, rtol=1e-4)
    assert np.allclose(np.sign(net.weights - new.weights), np.sign(grads.d_weights))

    scaled = NetworkGradients(1e3 * grads.d_kernels, 1e3 * grads.d_weights)
    new_scaled, _ = adam_step(net, AdamState.zeros_like(net), scaled, 1e-3)
    assert np.allclose(new_scaled.weights, new.weights, atol=1e-7)
    assert np.allclose(new_scaled.kernels, new.kernels, atol=1e-7)


def test_zero_learning_rate_leaves_network_unchanged():
    setup = _tiny_setup()
    config = _tiny_config(learning_rate=0.0, epochs=2)
    net = network_from_config(config)
    result = TrainingService(verbose=False).train(net, setup, config)
    assert np.array_equal(result.net.weights, net.weights)
    assert np.array_equal(result.net.kernels, net.kernels)
    assert len(result.log) == 2


def test_total_loss_gradient_matches_finite_differences():
    setup = _tiny_setup()
    config = _tiny_config()
    net = network_from_config(config)
    net = net.replace(net.kernels, net.weights + 0.05 * np.random.default_rng(2).standard_normal(net.n_kernels))
    service = TrainingService(verbose=False)
    result = service.evaluate(net, setup, config, epoch=0)

    h = 1e-6
    fd = np.zeros(net.n_kernels)
    for k in range(net.n_kernels):
        w = net.weights.copy()
        w[k] += h
        up = service.evaluate(net.replace(net.kernels, w), setup, config, epoch=0).report.total
        w[k] -= 2 * h
        down = service.evaluate(net.replace(net.kernels, w), setup, config, epoch=0).report.total
        fd[k] = (up - down) / (2 * h)
    assert np.linalg.norm(result.grads.d_weights - fd) <= 1e-4 * np.linalg.norm(fd)


def test_training_is_deterministic():
    setup = _tiny_setup()
    config = _tiny_config()
    a = TrainingService(verbose=False).train(network_from_config(config), setup, config)
    b = TrainingService(verbose=False).train(network_from_config(config), setup, config)
    assert np.array_equal(a.net.weights, b.net.weights)
    assert np.array_equal(a.net.kernels, b.net.kernels)
    assert [r.total for r in a.log] == [r.total for r in b.log]


def test_resume_from_checkpoint_matches_uninterrupted_run():
    setup = _tiny_setup()
    config = _tiny_config()
    service = TrainingService(verbose=False)
    full = service.train(network_from_config(config), setup, config)

    first = service.train(network_from_config(config), setup, config, stop_epoch=2)
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(Checkpoint(first.net, first.adam_state, 2, "abc", (2, 1), (4, 4), 1),
                               Path(tmp) / "checkpoint.json")
        ckpt = load_checkpoint(path)
    assert ckpt.epoch == 2 and ckpt.config_hash == "abc"
    rest = service.train(ckpt.net, setup, config, start_epoch=ckpt.epoch, adam_state=ckpt.adam_state)
    assert np.array_equal(rest.net.weights, full.net.weights)
    assert np.array_equal(rest.net.kernels, full.net.kernels)
    assert [r.total for r in first.log + rest.log] == [r.total for r in full.log]


def test_bulk_only_mode_needs_no_macro_solve():
    setup = _tiny_setup("bulk_bench")
    config = _tiny_config(mode="bulk_only", epochs=2)
    result = TrainingService(verbose=False).train(network_from_config(config), setup, config)
    assert all(r.structural == 0.0 and r.bulk < 0.0 for r in result.log)


def test_epoch_log_roundtrip():
    log = [
        LossReport(epoch=0, total=1.25, structural=0.5, volume=0.1, alpha=1.0, rmse=0.3),
        LossReport(epoch=1, total=0.75, structural=0.25, volume=0.05, alpha=2.0),
    ]
    with tempfile.TemporaryDirectory() as tmp:
        rows = read_epoch_log(write_epoch_log(log, Path(tmp) / "epochs.csv"))
    assert [r["epoch"] for r in rows] == [0, 1]
    assert rows[0]["total"] == 1.25 and rows[0]["rmse"] == 0.3
    assert rows[1]["rmse"] is None
    assert LossReport(**rows[1]).alpha == 2.0


if __name__ == "__main__":
    print("🧪 Training tests")
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_") and callable(v)]
    failed = 0
    for test in tests:
        try:
            test()
            print(f"   ✅ {test.__name__}")
        except Exception as e:
            failed += 1
            print(f"   ❌ {test.__name__}: {e}")
    sys.exit(1 if failed else 0)
