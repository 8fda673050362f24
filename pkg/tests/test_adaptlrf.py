import numpy as np
import pytest

from lrfnet.adaptlrf import (
    V_CAP,
    AdaptiveLRF,
    OverfitSignal,
    Strategy,
    apply_regularization,
    select_layers,
)
from lrfnet.conditioning import ConditionReport
from lrfnet.netcore import Dense, Network, build_mlp
from lrfnet.trainer import OptimState, adam_step

from oracles import jacobi_singular_values


def report(gamma):
    return ConditionReport(kappa=list(gamma), gamma=list(gamma), sncn=sum(gamma))


def test_record_errors():
    sig = OverfitSignal()
    assert sig.record_errors(0.1, 0.2) == 2.0
    assert sig.record_errors(0.3, 0.3) == 1.0


def test_record_zero_train_error_is_capped():
    sig = OverfitSignal()
    assert sig.record_errors(0.0, 0.5) == V_CAP


def test_window_mean():
    sig = OverfitSignal(patience=3)
    for val in (1.0, 1.2, 1.4):
        sig.record_errors(1.0, val)
    assert sig.mean() == pytest.approx(1.2)
    sig.record_errors(1.0, 2.0)
    assert list(sig.window) == [1.2, 1.4, 2.0]


@pytest.mark.parametrize("values,expected", [([1.0, 1.0, 1.0], False), ([1.6, 1.5, 1.7], True)])
def test_overfit_detected(values, expected):
    sig = OverfitSignal(patience=3, tau=1.4)
    for v in values:
        sig.record_errors(1.0, v)
    assert sig.overfit_detected() is expected


def test_warm_up():
    sig = OverfitSignal(patience=3, tau=1.4)
    sig.record_errors(1.0, 9.0)
    sig.record_errors(1.0, 9.0)
    assert not sig.overfit_detected()


def test_select_first_last():
    rng = np.random.default_rng(0)
    assert select_layers(Strategy("first_k", 2), None, 5, rng) == [0, 1]
    assert select_layers(Strategy("last_d", 2), None, 5, rng) == [3, 4]


def test_select_adaptive_forces_gamma_one():
    rng = np.random.default_rng(0)
    for _ in range(200):
        assert 1 in select_layers(Strategy(), report([0.5, 1.0]), 2, rng)


def test_select_adaptive_rate():
    rng = np.random.default_rng(123)
    hits = sum(0 in select_layers(Strategy(), report([0.5, 1.0]), 2, rng) for _ in range(10_000))
    assert abs(hits / 10_000 - 0.5) < 0.02


def test_select_adaptive_needs_report():
    with pytest.raises(ValueError):
        select_layers(Strategy(), None, 2, np.random.default_rng(0))


def test_strategy_validation():
    with pytest.raises(ValueError):
        Strategy("middle")
    with pytest.raises(ValueError):
        Strategy("first_k", 0)


def test_apply_nothing_selected():
    net = build_mlp(3, [4], 2, rng=np.random.default_rng(0))
    before = net.get_params()
    assert apply_regularization(net, []) == 0
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params()))


def test_apply_rank1_dense_unchanged():
    d = Dense(3, 2)
    d.W = np.outer([1.0, 2.0, 3.0], [1.0, -1.0])
    net = Network([d], (3,), loss="mse")
    W = d.W.copy()
    assert apply_regularization(net, [0]) == 1
    np.testing.assert_allclose(d.W, W, atol=1e-10)


def test_apply_makes_rank1_keeps_bias_and_norm():
    net = build_mlp(4, [5], 3, rng=np.random.default_rng(2))
    for layer in net.trainable:
        layer.b = np.random.default_rng(3).standard_normal(layer.b.shape)
    biases = [l.b.copy() for l in net.trainable]
    norms = [np.linalg.norm(l.W) for l in net.trainable]
    assert apply_regularization(net, [0, 1]) == 2
    for layer, b, n in zip(net.trainable, biases, norms):
        s = jacobi_singular_values(layer.W)
        assert s[1] / s[0] < 1e-8
        assert np.array_equal(layer.b, b)
        assert np.linalg.norm(layer.W) <= n + 1e-12


def test_apply_resets_moments():
    net = build_mlp(2, [3], 2, rng=np.random.default_rng(0))
    opt = OptimState()
    adam_step(net.params(), [np.ones_like(p) for p in net.params()], opt)
    apply_regularization(net, [1], opt)
    assert not opt.m[2].any() and not opt.v[2].any()
    assert opt.m[0].any() and opt.m[3].any()


def test_step_no_trigger_on_low_v():
    net = build_mlp(2, [3], 2, rng=np.random.default_rng(0))
    before = net.get_params()
    ctl = AdaptiveLRF(tau=1.4)
    for e in range(1, 4):
        log = ctl.step(net, 1.0, 1.05, report([1.0, 0.3]), e)
        assert not log.triggered
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params()))


def test_step_forced_trigger():
    net = Network([Dense(3, 2, rng=np.random.default_rng(1))], (3,), loss="mse")
    ctl = AdaptiveLRF(tau=1.4)
    logs = [ctl.step(net, 1.0, 2.0, report([1.0]), e) for e in (1, 2, 3)]
    assert [l.triggered for l in logs] == [False, False, True]
    assert logs[-1].selected_layers == [0]
    s = jacobi_singular_values(net.trainable[0].W)
    assert s[1] < 1e-8 * s[0]
    assert len(ctl.signal.window) == 0  # cleared after trigger
    assert logs[-1].to_dict()["triggered"] is True


def test_step_consumes_rng_only_on_trigger():
    net = build_mlp(2, [3], 2, rng=np.random.default_rng(0))
    rng = np.random.default_rng(5)
    state = rng.bit_generator.state
    ctl = AdaptiveLRF(tau=float("inf"), rng=rng)
    for e in range(1, 10):
        ctl.step(net, 1.0, 100.0, report([1.0, 0.5]), e)
    assert rng.bit_generator.state == state
