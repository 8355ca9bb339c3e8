import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from latflow.numerics import (EMA, MLP, AdamW, MinMaxNormalizer, Parameter, Tape, Tensor, clip_grad_norm,
                              ema_update, stream)
from latflow.numerics import autodiff as ad
from latflow.numerics.checkpoint import CheckpointError, config_hash, load_checkpoint, save_checkpoint
from latflow.numerics.gradcheck import check_gradients


# ----------------------------------------------------------------- backward


def test_square_derivative():
    x = Parameter(np.array(3.0))
    with Tape() as tape:
        y = x * x
    assert tape.backward(y, [x])[x] == pytest.approx(6.0)


def test_sum_wx_gradient_is_column_sums():
    W = np.array([[1.0, 2.0], [3.0, 4.0]])
    x = Parameter(np.ones(2))
    with Tape() as tape:
        y = ad.tsum(ad.matmul(Tensor(W), x))
    np.testing.assert_array_equal(tape.backward(y, [x])[x], [4.0, 6.0])


def test_unused_parameter_gets_zero_gradient():
    a, b = Parameter(np.ones(3)), Parameter(np.ones((2, 2)))
    with Tape() as tape:
        loss = ad.tsum(a * 2.0)
    g = tape.backward(loss, [a, b])
    np.testing.assert_array_equal(g[b], np.zeros((2, 2)))


def test_non_scalar_loss_rejected():
    a = Parameter(np.ones(3))
    with Tape() as tape:
        y = a * 2.0
    with pytest.raises(ValueError):
        tape.backward(y, [a])


def test_tape_replays_in_reverse_order():
    a = Parameter(np.array([0.3, -0.2]))
    with Tape() as tape:
        loss = ad.tsum(ad.tanh(ad.exp(a) * 2.0 + 1.0))
    order = []
    for i, node in enumerate(tape.nodes):
        inner = node.backward
        node.backward = lambda g, i=i, inner=inner: (order.append(i), inner(g))[1]
    tape.backward(loss, [a])
    assert order == sorted(order, reverse=True)
    assert order[0] == len(tape.nodes) - 1


def test_tape_is_single_use():
    a = Parameter(np.array(1.0))
    with Tape() as tape:
        y = a * a
    tape.backward(y, [a])
    with pytest.raises(RuntimeError):
        tape.backward(y, [a])


def test_no_grad_records_nothing():
    a = Parameter(np.ones(2))
    with Tape() as tape:
        with ad.no_grad():
            ad.tsum(a * a)
    assert tape.nodes == []


def test_mlp_matches_finite_differences():
    rng = np.random.default_rng(0)
    net = MLP([1, 2, 2, 2], rng, act="tanh")
    assert sum(p.data.size for p in net.parameters()) == 16
    x = rng.standard_normal((5, 1))
    err = check_gradients(lambda: ad.mean(ad.square(net(x))), net.parameters(), max_entries=None)
    assert err < 1e-4


@pytest.mark.parametrize("op", ["silu", "sigmoid", "tanh", "exp", "relu_shifted", "clip", "div", "max", "getitem",
                                "pad", "stack", "concat", "transpose", "broadcast"])
def test_primitive_gradients(op):
    rng = np.random.default_rng(1)
    p = Parameter(rng.standard_normal((3, 4)))
    q = Parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    fns = {
        "silu": lambda: ad.silu(p),
        "sigmoid": lambda: ad.sigmoid(p),
        "tanh": lambda: ad.tanh(p),
        "exp": lambda: ad.exp(p),
        "relu_shifted": lambda: ad.relu(p + 0.05),
        "clip": lambda: ad.clip(p, -0.5, 0.5),
        "div": lambda: ad.div(p, q),
        "max": lambda: ad.tmax(p, axis=1),
        "getitem": lambda: p[np.array([0, 2, 2])][:, 1:3],
        "pad": lambda: ad.pad_axis(p, 0, 1, 2),
        "stack": lambda: ad.stack([p, q], axis=1),
        "concat": lambda: ad.concat([p, q * 2.0], axis=0),
        "transpose": lambda: ad.transpose(p) @ q,
        "broadcast": lambda: ad.broadcast_to(p[0], (2, 4)) * q[:2],
    }
    w = rng.standard_normal(np.shape(fns[op]().data))
    err = check_gradients(lambda: ad.tsum(fns[op]() * w), [p, q], max_entries=None)
    assert err < 1e-6


@settings(max_examples=30, deadline=None)
@given(shape_a=st.sampled_from([(3, 4), (1, 4), (4,), (3, 1)]), seed=st.integers(0, 10_000))
def test_broadcast_add_mul_gradients(shape_a, seed):
    rng = np.random.default_rng(seed)
    a = Parameter(rng.standard_normal(shape_a))
    b = Parameter(rng.standard_normal((3, 4)))
    err = check_gradients(lambda: ad.tsum(ad.square(a * b + a - b)), [a, b], max_entries=None)
    assert err < 1e-6


def test_non_finite_check():
    with pytest.raises(FloatingPointError):
        ad.check_finite(Tensor(np.array([1.0, np.nan])))


# -------------------------------------------------------------------- optim


def test_adamw_zero_grad_zero_decay_is_identity():
    p = Parameter(np.array([1.0, -2.0]))
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    opt.step({p: np.zeros(2)})
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_first_step_is_unit_magnitude():
    p = Parameter(np.array(1.0))
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    opt.step({p: np.array(1.0)})
    # m_hat = 1, v_hat = 1 -> step = lr * 1 / (1 + eps)
    assert p.data == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-12)


def test_adamw_constant_gradient_monotone():
    p = Parameter(np.array(1.0))
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    vals = []
    for _ in range(2):
        opt.step({p: np.array(1.0)})
        vals.append(float(p.data))
    assert 1.0 > vals[0] > vals[1]
    assert vals[1] == pytest.approx(0.8, abs=1e-6)


def test_adamw_weight_decay_shrinks_with_zero_grad():
    p = Parameter(np.array([3.0, -3.0]))
    opt = AdamW([p], lr=0.01, weight_decay=0.1)
    opt.step({p: np.zeros(2)})
    assert np.all(np.abs(p.data) < 3.0)


@pytest.mark.parametrize("grad, err", [(np.zeros(3), ValueError), (np.array([np.inf, 0.0]), FloatingPointError)])
def test_adamw_rejects_bad_gradients(grad, err):
    p = Parameter(np.zeros(2))
    with pytest.raises(err):
        AdamW([p]).step({p: grad})


def test_adamw_steps_strictly_increase():
    p = Parameter(np.zeros(2))
    opt = AdamW([p])
    for i in range(3):
        opt.step({p: np.ones(2)})
        assert opt.step_count == i + 1
    assert opt.m[0].shape == opt.v[0].shape == p.data.shape


def test_ema_examples():
    assert ema_update(np.array(0.0), np.array(1.0), 0.95) == pytest.approx(0.05)
    np.testing.assert_array_equal(ema_update(np.array([2.0]), np.array([2.0]), 0.95), [2.0])
    s = np.array(0.0)
    for _ in range(100):
        s = ema_update(s, np.array(1.0), 0.95)
    assert abs(s - 1.0) < 0.01
    with pytest.raises(ValueError):
        ema_update(s, s, 1.0)


def test_ema_swap_roundtrip():
    p = Parameter(np.array([1.0]))
    ema = EMA([p], 0.5)
    p.data = np.array([3.0])
    ema.update()
    ema.swap()
    np.testing.assert_array_equal(p.data, [2.0])
    ema.swap()
    np.testing.assert_array_equal(p.data, [3.0])


def test_clip_grad_norm():
    a, b = Parameter(np.zeros(2)), Parameter(np.zeros(1))
    grads = {a: np.array([3.0, 0.0]), b: np.array([4.0])}
    norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    total = np.sqrt(sum((g**2).sum() for g in grads.values()))
    assert total == pytest.approx(1.0)


# -------------------------------------------------------------- normalizer


def test_normalizer_endpoints_and_midpoint():
    data = np.array([[0.0, -2.0], [4.0, 2.0]])
    n = MinMaxNormalizer.fit(data)
    np.testing.assert_array_equal(n.normalize(data[0]), [-1.0, -1.0])
    np.testing.assert_array_equal(n.normalize(data[1]), [1.0, 1.0])
    np.testing.assert_array_equal(n.normalize(data.mean(0)), [0.0, 0.0])


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, (1000, 3), elements=st.floats(-50, 50)))
def test_normalizer_round_trip(x):
    n = MinMaxNormalizer(np.array([-60.0, -1.0, 0.0]), np.array([60.0, 2.0, 100.0]))
    assert np.max(np.abs(n.denormalize(n.normalize(x)) - x)) < 1e-12


def test_normalizer_degenerate_dimension_warns(caplog):
    with caplog.at_level(logging.WARNING):
        n = MinMaxNormalizer.fit(np.array([[1.0, 5.0], [2.0, 5.0]]))
    assert "degenerate" in caplog.text
    np.testing.assert_array_equal(n.normalize(np.array([1.5, 5.0])), [0.0, 0.0])


def test_clamp_only_at_execution():
    n = MinMaxNormalizer(np.array([0.0]), np.array([1.0]))
    assert n.denormalize(np.array([2.0]))[0] == pytest.approx(1.5)
    assert n.denormalize(np.array([2.0]), clamp=True)[0] == pytest.approx(1.0)


# ----------------------------------------------------------------- streams


def test_named_streams_are_independent_of_other_consumers():
    a1 = stream(7, "init").standard_normal(4)
    stream(7, "new-consumer").standard_normal(100)
    a2 = stream(7, "init").standard_normal(4)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, stream(7, "data").standard_normal(4))


# -------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_and_hash(tmp_path):
    cfg = {"lr": 1e-4, "task": "reach"}
    arrays = {"w": np.arange(6.0).reshape(2, 3), "b": np.zeros(2)}
    path = save_checkpoint(tmp_path / "c.npz", arrays, cfg, {"note": 1})
    loaded, meta = load_checkpoint(path, expected_hash=config_hash(cfg))
    np.testing.assert_array_equal(loaded["w"], arrays["w"])
    assert meta["extra"] == {"note": 1}
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected_hash=config_hash({**cfg, "lr": 2e-4}))


def test_config_hash_is_key_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
