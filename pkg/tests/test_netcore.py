import math

import numpy as np
import pytest

from lrfnet.errors import DomainError, ShapeError, StaleCache
from lrfnet.netcore import (
    Activation,
    Conv2D,
    Dense,
    Flatten,
    Network,
    PenaltyConfig,
    build_mlp,
    load_checkpoint,
    loss,
    lrf_anchor,
    lrf_penalty_loss,
    save_checkpoint,
)

from oracles import cross_entropy_scalar, max_rel_grad_err, mse_scalar, numeric_grads


def identity_net(n=2):
    d = Dense(n, n, "none")
    d.W = np.eye(n)
    return Network([d], (n,), loss="mse")


def test_forward_identity():
    net = identity_net()
    np.testing.assert_array_equal(net.forward(np.array([[1.0, 0.0]])), [[1.0, 0.0]])


def test_dropout_zero_equals_eval():
    net = build_mlp(3, [5], 2, rng=np.random.default_rng(1))
    x = np.random.default_rng(2).standard_normal((4, 3))
    a = net.forward(x, mode="train", dropout=0.0, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(a, net.forward(x))


def test_dropout_zero_fraction_and_expectation():
    d = Dense(1, 10_000, "none")
    d.W = np.ones((1, 10_000))
    net = Network([d], (1,), loss="mse")
    out = net.forward(np.ones((1, 1)), mode="train", dropout=[0.5], rng=np.random.default_rng(42))
    assert abs(np.mean(out == 0.0) - 0.5) < 0.02
    # inverted scaling keeps the mean activation
    assert abs(out.mean() - 1.0) < 0.02 * 1.0 + 0.02


def test_eval_forward_ignores_rng():
    net = build_mlp(3, [4], 2, rng=np.random.default_rng(1))
    x = np.ones((2, 3))
    rng = np.random.default_rng(0)
    state = rng.bit_generator.state
    a = net.forward(x, mode="eval", dropout=0.5, rng=rng)
    assert rng.bit_generator.state == state
    np.testing.assert_array_equal(a, net.forward(x))


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        identity_net().forward(np.ones((1, 3)))


def test_loss_examples():
    p = np.array([[0.2, 0.8], [1.0, 0.0]])
    assert loss(p, p, "mse") == 0.0
    uniform = np.full((3, 10), 0.1)
    assert loss(uniform, np.array([0, 4, 9]), "cross_entropy") == pytest.approx(math.log(10), abs=1e-12)


def test_loss_matches_scalar_reimplementation():
    rng = np.random.default_rng(13)
    logits = rng.standard_normal((6, 4))
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    y = rng.integers(0, 4, 6)
    assert loss(p, y, "cross_entropy") == pytest.approx(cross_entropy_scalar(p, y), abs=1e-12)
    t = rng.standard_normal((6, 4))
    assert loss(p, t, "mse") == pytest.approx(mse_scalar(p, t), abs=1e-12)


def test_cross_entropy_domain_error():
    with pytest.raises(DomainError):
        loss(np.array([[-0.1, 1.1]]), np.array([0]), "cross_entropy")


def test_penalty_examples():
    net = identity_net()
    zero = [np.zeros((2, 2)), np.zeros(2)]
    assert lrf_penalty_loss(net, 1.0, PenaltyConfig(0.0, zero)) == 1.0
    assert lrf_penalty_loss(net, 1.0, PenaltyConfig(0.7, net.get_params())) == 1.0
    assert lrf_penalty_loss(net, 1.0, PenaltyConfig(0.5, zero)) == 2.0


def test_penalty_shape_error():
    with pytest.raises(ShapeError):
        lrf_penalty_loss(identity_net(), 0.0, PenaltyConfig(1.0, [np.zeros((3, 2)), np.zeros(2)]))


def test_penalty_ge_base():
    net = build_mlp(3, [4], 2, rng=np.random.default_rng(0))
    anchor = lrf_anchor(net.params())
    assert lrf_penalty_loss(net, 0.3, PenaltyConfig(0.5, anchor)) > 0.3


def test_backward_hand_case():
    d = Dense(1, 1, "none")
    d.W = np.array([[2.0]])
    net = Network([d], (1,), loss="mse")
    net.forward(np.array([[1.0]]), mode="train")
    (dW, db), = net.backward(np.array([[1.0]]))
    assert dW[0, 0] == 2.0
    assert db[0] == 2.0


def test_backward_weight_decay_only():
    d = Dense(2, 2, "none", rng=np.random.default_rng(4))
    net = Network([d], (2,), loss="mse")
    x = np.zeros((1, 2))
    net.forward(x, mode="train")
    (dW, db), = net.backward(np.zeros((1, 2)), weight_decay=0.1)
    np.testing.assert_allclose(dW, 0.1 * d.W)


def test_backward_stale_cache():
    net = identity_net()
    with pytest.raises(StaleCache):
        net.backward(np.zeros((1, 2)))
    net.forward(np.ones((1, 2)))  # eval mode does not arm backward
    with pytest.raises(StaleCache):
        net.backward(np.zeros((1, 2)))
    net.forward(np.ones((1, 2)), mode="train")
    net.backward(np.zeros((1, 2)))
    with pytest.raises(StaleCache):
        net.backward(np.zeros((1, 2)))


def conv_net(loss_kind, rng):
    layers = [
        Conv2D(2, 2, 2, 3, stride=1, activation="tanh", rng=rng),
        Conv2D(2, 2, 3, 2, stride=2, activation="relu", rng=rng),
        Flatten(),
        Dense(8, 4, "sigmoid", rng=rng),
        Dense(4, 3, "softmax" if loss_kind == "cross_entropy" else "none", rng=rng),
    ]
    return Network(layers, (5, 5, 2), loss=loss_kind)


def mlp_net(loss_kind, rng):
    layers = [Dense(4, 6, "relu", rng=rng), Dense(6, 5, "tanh", rng=rng), Activation("sigmoid"),
              Dense(5, 3, "softmax", rng=rng)]
    return Network(layers, (4,), loss=loss_kind)


def grad_check(net, x, y, penalty=None, weight_decay=0.0):
    for layer in net.trainable:
        layer.b = layer.b + 0.05  # keep relu away from its kink
    net.forward(x, mode="train")
    grads = net.backward(y, penalty=penalty, weight_decay=weight_decay)
    analytic = [g for pair in grads for g in pair]
    numeric = numeric_grads(lambda: net.objective(x, y, penalty, weight_decay), net.params())
    return max_rel_grad_err(analytic, numeric)


@pytest.mark.parametrize("builder", [mlp_net, conv_net])
@pytest.mark.parametrize("loss_kind", ["cross_entropy", "mse"])
@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(builder, loss_kind, seed):
    rng = np.random.default_rng(seed)
    net = builder(loss_kind, rng)
    assert net.n_params() <= 200
    x = rng.standard_normal((3, *net.input_shape))
    y = rng.integers(0, 3, 3) if loss_kind == "cross_entropy" else rng.standard_normal((3, 3))
    assert grad_check(net, x, y) < 1e-5


def test_gradients_with_penalty_and_decay():
    rng = np.random.default_rng(5)
    net = mlp_net("cross_entropy", rng)
    x = rng.standard_normal((4, 4))
    y = rng.integers(0, 3, 4)
    anchor = lrf_anchor(net.get_params())
    err = grad_check(net, x, y, penalty=PenaltyConfig(0.5, anchor), weight_decay=0.01)
    assert err < 1e-5


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    net = conv_net("cross_entropy", rng)
    for layer in net.trainable:
        layer.b = rng.standard_normal(layer.b.shape)
    path = tmp_path / "ck.json"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    assert back.spec() == net.spec()
    for a, b in zip(net.params(), back.params()):
        assert np.array_equal(a, b)
    x = rng.standard_normal((2, 5, 5, 2))
    np.testing.assert_array_equal(net.forward(x), back.forward(x))
