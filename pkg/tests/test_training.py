"""Trainer tests: schedule, batching, Adam, divergence, checkpoint/resume."""

import math

import numpy as np
import pytest

from notegen.model import (
    ARCH_DECODER_ONLY,
    ARCH_ENCODER_DECODER,
    ModelConfig,
    init_params,
    loss,
    make_batch,
)
from notegen.training import (
    AdamState,
    CheckpointError,
    TrainConfig,
    TrainingDivergedError,
    adam_update,
    batch_indices,
    init_adam,
    learning_rate,
    load_checkpoint,
    save_checkpoint,
    train,
)


def small_cfg(arch=ARCH_ENCODER_DECODER, **over):
    base = dict(
        arch=arch,
        d_model=32,
        n_heads=4,
        n_layers=2,
        d_ff=64,
        vocab_size=50,
        max_len=64,
        seed=1,
    )
    base.update(over)
    return ModelConfig(**base)


def toy_examples(n=8, seed=0):
    rng = np.random.default_rng(seed)
    return [
        (
            rng.integers(2, 50, size=rng.integers(4, 8)).tolist(),
            rng.integers(2, 50, size=rng.integers(3, 7)).tolist(),
        )
        for _ in range(n)
    ]


# --- schedule -----------------------------------------------------------------------


def test_learning_rate_warmup_then_decay():
    tcfg = TrainConfig(warmup_steps=100)
    # linear during warmup
    assert learning_rate(tcfg, 64, 50) == pytest.approx(
        2 * learning_rate(tcfg, 64, 25)
    )
    # peak at the warmup boundary, then inverse square root
    peak = learning_rate(tcfg, 64, 100)
    assert learning_rate(tcfg, 64, 400) == pytest.approx(peak / 2)
    assert learning_rate(tcfg, 64, 100) == pytest.approx(
        64 ** -0.5 * 100 ** -0.5
    )
    with pytest.raises(ValueError):
        learning_rate(tcfg, 64, 0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(beta2=1.0)


# --- batching -----------------------------------------------------------------------


def test_batch_indices_cover_each_epoch_exactly_once():
    n, b = 10, 4
    per_epoch = 3
    for epoch in range(3):
        seen = []
        for k in range(per_epoch):
            seen += batch_indices(n, b, seed=5, step=epoch * per_epoch + k + 1)
        assert sorted(seen) == list(range(n))
    # last batch of an epoch is short
    assert len(batch_indices(n, b, seed=5, step=3)) == 2


def test_batch_indices_deterministic_and_epoch_dependent():
    a = batch_indices(20, 5, seed=9, step=2)
    assert a == batch_indices(20, 5, seed=9, step=2)
    epoch0 = [batch_indices(20, 5, 9, s) for s in range(1, 5)]
    epoch1 = [batch_indices(20, 5, 9, s) for s in range(5, 9)]
    assert sum(epoch0, []) != sum(epoch1, [])


# --- optimizer ----------------------------------------------------------------------


def test_adam_single_step_hand_computed():
    tcfg = TrainConfig()
    params = {"w": np.array([1.0, 2.0])}
    grads = {"w": np.array([0.5, -1.0])}
    state = init_adam(params)
    adam_update(params, grads, state, lr=0.1, tcfg=tcfg)
    g = np.array([0.5, -1.0])
    m = 0.1 * g
    v = 0.02 * g * g
    mhat = m / (1 - 0.9)
    vhat = v / (1 - 0.98)
    expected = np.array([1.0, 2.0]) - 0.1 * mhat / (np.sqrt(vhat) + 1e-9)
    assert np.allclose(params["w"], expected, atol=1e-12)
    assert state.t == 1


def test_zero_learning_rate_leaves_params_bitwise_unchanged():
    cfg = small_cfg()
    params = init_params(cfg)
    before = {k: v.copy() for k, v in params.items()}
    tcfg = TrainConfig(steps=5, batch_size=4, lr_scale=0.0, seed=3)
    train(params, cfg, toy_examples(), tcfg)
    for k in params:
        assert np.array_equal(params[k], before[k])


# --- training loop ------------------------------------------------------------------


def test_overfit_single_batch_below_tenth_nat():
    cfg = small_cfg(ARCH_ENCODER_DECODER)
    params = init_params(cfg)
    examples = toy_examples(4, seed=2)
    tcfg = TrainConfig(steps=200, batch_size=4, lr_scale=2.0, warmup_steps=50,
                       seed=0, log_every=0)
    _, history = train(params, cfg, examples, tcfg)
    final = loss(params, cfg, make_batch(cfg, examples))
    assert final < 0.1, f"failed to overfit: {final}"
    assert history[-1]["step"] == 200


def test_divergence_aborts_with_step_number():
    cfg = small_cfg()
    params = init_params(cfg)
    params["embed"][:] = np.inf
    tcfg = TrainConfig(steps=3, batch_size=2, seed=0, log_every=0)
    with np.errstate(invalid="ignore"), pytest.raises(TrainingDivergedError) as err:
        train(params, cfg, toy_examples(4), tcfg)
    assert err.value.step == 1


def test_training_is_deterministic_per_seed():
    cfg = small_cfg(ARCH_DECODER_ONLY, dropout=0.1)
    tcfg = TrainConfig(steps=6, batch_size=4, seed=7, log_every=0)
    runs = []
    for _ in range(2):
        params = init_params(cfg)
        train(params, cfg, toy_examples(8, seed=1), tcfg)
        runs.append(params)
    for k in runs[0]:
        assert np.array_equal(runs[0][k], runs[1][k])

    other = init_params(cfg)
    train(other, cfg, toy_examples(8, seed=1),
          TrainConfig(steps=6, batch_size=4, seed=8, log_every=0))
    assert any(not np.array_equal(other[k], runs[0][k]) for k in other)


def test_validation_loss_recorded():
    cfg = small_cfg()
    params = init_params(cfg)
    tcfg = TrainConfig(steps=4, batch_size=4, seed=0, log_every=2)
    _, history = train(params, cfg, toy_examples(4), tcfg,
                       val_examples=toy_examples(4, seed=9))
    logged = [h for h in history if "val_loss" in h]
    assert {h["step"] for h in logged} == {2, 4}
    assert all(math.isfinite(h["val_loss"]) for h in logged)


# --- checkpointing ------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = small_cfg()
    params = init_params(cfg)
    state = init_adam(params)
    state.t = 5
    state.m["embed"] += 0.25
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, cfg, params, step=42, opt=state)
    cfg2, params2, step, opt2 = load_checkpoint(path)
    assert cfg2 == cfg
    assert step == 42
    assert opt2.t == 5
    for k in params:
        assert np.array_equal(params[k], params2[k])
        assert np.array_equal(state.m[k], opt2.m[k])
        assert np.array_equal(state.v[k], opt2.v[k])


def test_checkpoint_without_optimizer_state(tmp_path):
    cfg = small_cfg()
    params = init_params(cfg)
    path = tmp_path / "bare.ckpt"
    save_checkpoint(path, cfg, params, step=1)
    _, params2, step, opt = load_checkpoint(path)
    assert opt is None and step == 1
    assert np.array_equal(params["embed"], params2["embed"])


def test_checkpoint_rejects_mismatch_and_garbage(tmp_path):
    cfg = small_cfg()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, cfg, init_params(cfg), step=0)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect_cfg=small_cfg(d_model=64, n_heads=4))
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    truncated = tmp_path / "trunc.ckpt"
    truncated.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(CheckpointError):
        load_checkpoint(truncated)


def test_resume_reproduces_uninterrupted_run_bitwise(tmp_path):
    cfg = small_cfg(ARCH_DECODER_ONLY)
    examples = toy_examples(10, seed=4)
    tcfg = TrainConfig(steps=12, batch_size=4, seed=11, log_every=0)

    straight = init_params(cfg)
    _, full_history = train(straight, cfg, examples, tcfg)

    resumed = init_params(cfg)
    half = TrainConfig(steps=6, batch_size=4, seed=11, log_every=0)
    path = tmp_path / "resume.ckpt"
    state, first_half = train(resumed, cfg, examples, half, checkpoint_path=path)
    _, loaded_params, step, opt = load_checkpoint(path, expect_cfg=cfg)
    assert step == 6
    _, second_half = train(loaded_params, cfg, examples, tcfg,
                           opt_state=opt, start_step=step)

    for k in straight:
        assert np.array_equal(straight[k], loaded_params[k])
    assert [h["loss"] for h in first_half + second_half] == [
        h["loss"] for h in full_history
    ]
