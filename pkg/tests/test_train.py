import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from residua import model
from residua.errors import ArgumentError, DataError, ShapeError
from residua.tensor import Rng
from residua.train import AdamState, ArraySource, TrainConfig, TrainLog, adam_step, train


def store(values: dict):
    p = model.ParamStore({k: np.asarray(v, dtype=np.float64) for k, v in values.items()})
    return p


def test_adam_first_step():
    p = store({"a.weight": [0.5, -2.0]})
    state = AdamState.create(p)
    adam_step(p, {"a.weight": np.ones(2)}, state)
    # bias correction makes m_hat = v_hat = 1
    np.testing.assert_allclose(p["a.weight"] - [0.5, -2.0], -1e-3 / (1 + 1e-8), rtol=0, atol=1e-15)
    assert state.t == 1
    assert p.version == 1


def test_adam_zero_gradient():
    p = store({"a.weight": [0.25, 3.0]})
    state = AdamState.create(p)
    adam_step(p, {"a.weight": np.zeros(2)}, state)
    assert p["a.weight"].tolist() == [0.25, 3.0]


def test_adam_two_constant_steps():
    p = store({"a.weight": [1.0]})
    state = AdamState.create(p)
    for _ in range(2):
        adam_step(p, {"a.weight": np.ones(1)}, state)
    assert abs((1.0 - p["a.weight"][0]) - 2e-3) < 1e-6


def test_adam_zero_lr_is_bitwise_noop():
    p = store({"a.weight": [0.1, 0.2, 0.3]})
    before = p["a.weight"].tobytes()
    state = AdamState.create(p, lr=0.0)
    adam_step(p, {"a.weight": np.array([1.0, -2.0, 3.0])}, state)
    assert p["a.weight"].tobytes() == before
    assert state.t == 1 and state.m["a.weight"].any() and state.v["a.weight"].any()


def test_adam_leaves_running_stats_alone():
    arch = model.build_default_architecture()
    p = model.init_params(arch, Rng(0))
    p["x1.running_mean"][:] = 0.5
    state = AdamState.create(p)
    assert "x1.running_mean" not in state.m
    grads = {k: np.ones_like(p[k]) for k in p.learnable()}
    adam_step(p, grads, state)
    assert np.all(p["x1.running_mean"] == 0.5) and np.all(p["x1.running_var"] == 1)


def test_adam_shape_errors():
    p = store({"a.weight": [1.0, 2.0]})
    state = AdamState.create(p)
    with pytest.raises(ShapeError):
        adam_step(p, {"a.weight": np.ones(3)}, state)
    with pytest.raises(ShapeError):
        adam_step(p, {"b.weight": np.ones(2)}, state)


@settings(max_examples=40, deadline=None)
@given(steps=st.integers(1, 30), seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
def test_adam_update_bounded(steps, seed, scale):
    """|delta| <= lr * (1-b1)/sqrt(1-b2) / sqrt(1 - b1^2/b2) * sqrt(1-b2^t)/(1-b1^t)."""
    rng = np.random.default_rng(seed)
    p = store({"a.weight": np.zeros(50)})
    state = AdamState.create(p)
    b1, b2, lr = state.beta1, state.beta2, state.lr
    for t in range(1, steps + 1):
        before = p["a.weight"].copy()
        adam_step(p, {"a.weight": scale * rng.standard_normal(50)}, state)
        bound = lr * (1 - b1) / np.sqrt(1 - b2) / np.sqrt(1 - b1 ** 2 / b2) * np.sqrt(1 - b2 ** t) / (1 - b1 ** t)
        assert np.all(np.abs(p["a.weight"] - before) <= bound * (1 + 1e-9))


def test_train_config_validation():
    with pytest.raises(ArgumentError):
        TrainConfig(epochs=0)
    with pytest.raises(ArgumentError):
        TrainConfig(batch_size=1)
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.batch_size) == (50, 1e-3, 0.9, 0.999, 1e-8, 8)


def _images(n, size=24, seed=0):
    return np.random.default_rng(seed).random((n, size, size)).astype(np.float32)


def test_single_epoch_single_batch():
    arch = model.build_default_architecture()
    p = model.init_params(arch, Rng(0))
    _, state, log = train(arch, p, ArraySource(_images(4)), TrainConfig(epochs=1, batch_size=4))
    assert len(log) == 1 and state.t == 1


def test_training_is_deterministic():
    arch = model.build_default_architecture()
    runs = []
    for _ in range(2):
        p = model.init_params(arch, Rng(1))
        _, _, log = train(arch, p, ArraySource(_images(6)), TrainConfig(epochs=2, batch_size=4, seed=3))
        runs.append((p, log))
    (p1, l1), (p2, l2) = runs
    assert l1.losses == l2.losses
    assert all(p1[k].tobytes() == p2[k].tobytes() for k in p1)


def test_anomalous_record_rejected_before_loading():
    arch = model.build_default_architecture()
    src = ArraySource(_images(3), labels=["normal", "anomalous", "normal"], ids=["a.png", "b.png", "c.png"])
    with pytest.raises(DataError, match="b.png"):
        train(arch, model.init_params(arch, Rng(0)), src, TrainConfig(epochs=1, batch_size=2))
    assert src.loaded == []


def test_nonconforming_image_named():
    arch = model.build_default_architecture()
    src = ArraySource(np.zeros((2, 30, 30), np.float32), ids=["odd.png", "odd2.png"])
    with pytest.raises(ShapeError, match="odd.png"):
        train(arch, model.init_params(arch, Rng(0)), src, TrainConfig(epochs=1, batch_size=2))


def test_empty_training_set():
    arch = model.build_default_architecture()
    with pytest.raises(DataError):
        train(arch, model.init_params(arch, Rng(0)), ArraySource(np.zeros((0, 24, 24))), TrainConfig(epochs=1))


def test_train_log_text_round_trip():
    log = TrainLog()
    log.append(0.5, 1.25)
    log.append(0.125, 1.0)
    text = log.to_text()
    rows = [line for line in text.splitlines() if not line.startswith("#")]
    assert rows == ["1\t0.5\t1.250", "2\t0.125\t1.000"]
    assert all(len(line.split("\t")) == 3 for line in text.splitlines())
    assert TrainLog.from_text(text).losses == [0.5, 0.125]
