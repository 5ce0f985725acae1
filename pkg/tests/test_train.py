"""Optimizer, schedule, clipping and training-loop contracts at toy scale."""

import dataclasses
import math

import numpy as np
import pytest

from lgnk.datagen import FHNParams, gen_fitzhugh_nagumo
from lgnk.generator import softplus
from lgnk.model import Model, ModelConfig, ModelParams, init_model
from lgnk.train import (
    AdamW,
    DegenerateTarget,
    TrainConfig,
    TrainLog,
    clip_gradients,
    cosine_lr,
    relative_l2,
    sweep_channels,
    train_loop,
    transfer_finetune,
)

TINY_MODEL = ModelConfig(n=16, T_in=4, T_out=3, r=4, M=4, w=8, hidden=16, seed=0)


@pytest.fixture(scope="module")
def tiny_dataset():
    return gen_fitzhugh_nagumo(FHNParams(n=16, T_snapshots=7, dt_solver=0.05, seed=5),
                               count=8, n_train=6)


# ---------------------------------------------------------------------------
# relative_l2
# ---------------------------------------------------------------------------

def test_relative_l2_basics():
    u = np.random.default_rng(0).standard_normal((3, 4, 4))
    assert relative_l2(u, u) == 0.0
    assert relative_l2(np.zeros_like(u), u) == pytest.approx(1.0)
    assert relative_l2(2 * u, u) == pytest.approx(1.0)
    with pytest.raises(DegenerateTarget):
        relative_l2(u, np.zeros_like(u))


# ---------------------------------------------------------------------------
# optimizer / schedule / clipping
# ---------------------------------------------------------------------------

def test_adamw_matches_hand_rolled_oracle():
    # Quadratic in three scalar parameters, 100 steps, lr with decay active.
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal(3)
    target = np.array([1.0, -2.0, 0.5])
    weights = np.array([1.0, 0.3, 2.0])
    lr, wd, b1, b2, eps = 0.01, 0.1, 0.9, 0.999, 1e-8

    params = ModelParams({"x": x0.copy()}, variant="sd")
    opt = AdamW(params, weight_decay=wd)

    # Independent oracle following the update formulas directly.
    x = x0.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for t in range(1, 101):
        g = 2 * weights * (params.tensors["x"] - target)
        opt.step({"x": g}, lr)

        g2 = 2 * weights * (x - target)
        x = x - lr * wd * x
        m = b1 * m + (1 - b1) * g2
        v = b2 * v + (1 - b2) * g2 * g2
        x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        assert np.max(np.abs(params.tensors["x"] - x)) < 1e-12, f"step {t}"


def test_adamw_decay_mask_excludes_generator():
    params = ModelParams(
        {"generator.P": np.ones((2, 2)), "decoder.w": np.ones((2, 2))}, variant="sd"
    )
    opt = AdamW(params, weight_decay=0.5)
    zero = {"generator.P": np.zeros((2, 2)), "decoder.w": np.zeros((2, 2))}
    opt.step(zero, lr=0.1)
    np.testing.assert_array_equal(params.tensors["generator.P"], np.ones((2, 2)))
    assert np.all(params.tensors["decoder.w"] < 1.0)  # decayed


def test_adamw_freeze_skips_everything():
    params = ModelParams({"generator.P": np.ones((2, 2)), "w": np.ones(2)}, variant="sd")
    opt = AdamW(params, weight_decay=0.5, freeze=frozenset({"generator.P"}))
    opt.step({"generator.P": np.full((2, 2), 9.0), "w": np.ones(2)}, lr=0.1)
    np.testing.assert_array_equal(params.tensors["generator.P"], np.ones((2, 2)))
    assert not np.array_equal(params.tensors["w"], np.ones(2))


def test_adamw_complex_parameters_update_as_real_pairs():
    z = np.array([1.0 + 2.0j, -0.5 + 0.0j])
    params = ModelParams({"generator.spec": z.copy()}, variant="sd")
    opt = AdamW(params, weight_decay=0.0)
    g = np.array([1.0 + 0.0j, 0.0 + 1.0j])
    opt.step({"generator.spec": g}, lr=0.1)
    # With zero moments, the first Adam step moves each real component with a
    # nonzero gradient by exactly -lr * g / (|g| + eps) ~= -lr * sign.
    moved = params.tensors["generator.spec"] - z
    assert moved[0].real == pytest.approx(-0.1, rel=1e-6)
    assert moved[0].imag == 0.0
    assert moved[1].real == 0.0
    assert moved[1].imag == pytest.approx(-0.1, rel=1e-6)


def test_cosine_schedule_endpoints_exact():
    assert cosine_lr(0, 100, 1e-3, 0.0) == 1e-3
    assert cosine_lr(100, 100, 1e-3, 0.0) == 0.0
    assert cosine_lr(50, 100, 1e-3, 0.0) == pytest.approx(5e-4)
    assert cosine_lr(10, 10, 2e-3, 1e-4) == 1e-4


def test_clip_gradients_global_norm():
    g = {"a": np.full(4, 3.0), "b": np.full((2, 2), -3.0) + 0j}
    pre = clip_gradients(g, clip_norm=1.0)
    assert pre == pytest.approx(math.sqrt(8 * 9.0))
    post = math.sqrt(sum(float(np.vdot(v, v).real) for v in g.values()))
    assert post <= 1.0 + 1e-12
    # below the threshold nothing changes
    g2 = {"a": np.array([0.1, 0.2])}
    clip_gradients(g2, clip_norm=1.0)
    np.testing.assert_array_equal(g2["a"], np.array([0.1, 0.2]))


# ---------------------------------------------------------------------------
# train_loop
# ---------------------------------------------------------------------------

def test_train_loop_smoke_and_determinism(tiny_dataset, tmp_path):
    cfg = TrainConfig(epochs=3, batch_size=3, seed=0)
    params1, log1 = train_loop(TINY_MODEL, cfg, tiny_dataset, out_dir=tmp_path / "run1")
    assert log1.rows[-1]["train_loss"] < log1.rows[0]["train_loss"]

    params2, log2 = train_loop(TINY_MODEL, cfg, tiny_dataset, out_dir=tmp_path / "run2")
    for k in params1.tensors:
        np.testing.assert_array_equal(params1.tensors[k], params2.tensors[k])
    for r1, r2 in zip(log1.rows, log2.rows):
        for col in ("epoch", "train_loss", "test_l2", "lr", "max_re_lambda"):
            assert r1[col] == r2[col]  # wall_ms is the only non-deterministic column

    # checkpoints exist and roundtrip
    from lgnk.model import load_checkpoint

    best = load_checkpoint(tmp_path / "run1" / "best.lgnk")
    assert best.config == TINY_MODEL
    log_read = TrainLog.read_csv(tmp_path / "run1" / "train_log.csv")
    assert [r["epoch"] for r in log_read.rows] == [0, 1, 2]


def test_train_loop_architectural_stability_column(tiny_dataset):
    cfg = TrainConfig(epochs=2, batch_size=3, seed=1)
    params, log = train_loop(TINY_MODEL, cfg, tiny_dataset)
    # Left-half-plane at every epoch regardless of parameter values; the last
    # row must also respect the damping floor of the final parameters.
    for row in log.rows:
        assert row["max_re_lambda"] < 0.0
    bound = -softplus(float(np.min(params.tensors["generator.d"])))
    assert log.rows[-1]["max_re_lambda"] <= bound + 1e-9


def test_train_loop_validation(tiny_dataset):
    with pytest.raises(ValueError, match="batch size"):
        train_loop(TINY_MODEL, TrainConfig(epochs=1, batch_size=50), tiny_dataset)
    short = ModelConfig(n=16, T_in=6, T_out=6, r=2, M=2, w=4, hidden=8)
    with pytest.raises(ValueError, match="T_in"):
        train_loop(short, TrainConfig(epochs=1, batch_size=2), tiny_dataset)


def test_train_config_validation():
    with pytest.raises(ValueError, match="init_checkpoint"):
        TrainConfig(mode="freeze_s")
    with pytest.raises(ValueError, match="mode"):
        TrainConfig(mode="warm")


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------

def test_freeze_s_leaves_P_bit_identical(tiny_dataset):
    base_params, _ = train_loop(TINY_MODEL, TrainConfig(epochs=1, batch_size=3, seed=2), tiny_dataset)
    pre = Model(config=TINY_MODEL, params=base_params)
    P_before = base_params.tensors["generator.P"].copy()

    cfg = TrainConfig(epochs=2, batch_size=3, seed=3, mode="freeze_s", init_checkpoint="x")
    tuned, _ = transfer_finetune(pre, "freeze_s", tiny_dataset, cfg)
    np.testing.assert_array_equal(tuned.tensors["generator.P"], P_before)
    # other parameters did move
    assert not np.array_equal(tuned.tensors["generator.d"], base_params.tensors["generator.d"])

    tuned_all, _ = transfer_finetune(pre, "transfer_all", tiny_dataset,
                                     dataclasses.replace(cfg, mode="transfer_all"))
    assert not np.array_equal(tuned_all.tensors["generator.P"], P_before)


def test_transfer_config_mismatch_lists_fields(tiny_dataset):
    pre = Model(config=TINY_MODEL, params=init_model(TINY_MODEL))
    other = dataclasses.replace(TINY_MODEL, r=8, M=2)
    cfg = TrainConfig(epochs=1, batch_size=3, mode="freeze_s", init_checkpoint="x")
    with pytest.raises(ValueError) as err:
        transfer_finetune(pre, "freeze_s", tiny_dataset, cfg, model_config=other)
    assert "r: 4 != 8" in str(err.value)
    assert "M: 4 != 2" in str(err.value)
    with pytest.raises(ValueError, match="freeze_s or transfer_all"):
        transfer_finetune(pre, "scratch", tiny_dataset, cfg)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def test_sweep_channels_rows(tiny_dataset, tmp_path):
    rows = sweep_channels([2, 4], TINY_MODEL, TrainConfig(epochs=1, batch_size=3, seed=0),
                          tiny_dataset, out_dir=tmp_path)
    assert [row["r"] for row in rows] == [2, 4]
    for row in rows:
        assert 0 <= row["best_test_l2"] <= 2.0
        assert -1.0 <= row["dissipation_r2"] <= 1.0
    assert (tmp_path / "r2" / "best.lgnk").exists()
