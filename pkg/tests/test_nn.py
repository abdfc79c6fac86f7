import numpy as np
import pytest

from osmhedge import nn
from osmhedge.errors import IncompatibleArtifact, ShapeMismatch

from oracles import SHAPES, gradient_check




@pytest.mark.parametrize("d,shape", SHAPES)
def test_gradient_check_solver_shapes(d, shape):
    spec = nn.MLPSpec(d, shape, hidden_layers=2, width=8)
    for draw in range(5):
        assert gradient_check(spec, seed=100 * draw + d + len(shape)) < 1e-4


def test_gradient_check_without_batch_norm():
    spec = nn.MLPSpec(3, (2,), hidden_layers=2, width=6, batch_norm=False)
    assert gradient_check(spec) < 1e-6


def test_random_small_net_matches_finite_differences():
    spec = nn.MLPSpec(2, (2,), hidden_layers=1, width=3)
    assert gradient_check(spec, seed=5, h=1e-4, per_array=100) < 1e-6


def test_input_jacobian_of_fixed_net():
    spec = nn.MLPSpec(2, (3,), hidden_layers=2, width=4, batch_norm=False)
    p = nn.init_params(spec, np.random.default_rng(3))
    x0 = np.array([[0.3, -0.7]])
    jac_bp = np.empty((3, 2))
    for o in range(3):
        up = np.zeros((1, 3))
        up[0, o] = 1.0
        _, cache = nn.forward(p, x0, training=True)
        jac_bp[o] = nn.backward(p, cache, up)[1][0]
    jac_fd = np.empty((3, 2))
    for j in range(2):
        e = np.zeros((1, 2))
        e[0, j] = 1e-5
        jac_fd[:, j] = (nn.forward(p, x0 + e) - nn.forward(p, x0 - e))[0] / 2e-5
    assert np.linalg.norm(jac_bp - jac_fd) / np.linalg.norm(jac_bp) < 1e-6


def test_zero_network_outputs_zero():
    spec = nn.MLPSpec(3, (2,), hidden_layers=2, width=4, batch_norm=False)
    p = nn.init_params(spec, np.random.default_rng(0))
    for k in p.weights:
        p.weights[k][...] = 0.0
    assert np.all(nn.forward(p, np.ones((5, 3))) == 0.0)


def test_single_affine_layer():
    spec = nn.MLPSpec(2, (1,), hidden_layers=0, batch_norm=False)
    p = nn.init_params(spec, np.random.default_rng(0))
    p.weights["W0"][...] = [[2.0], [-1.0]]
    p.weights["b0"][...] = 0.5
    x = np.array([[1.0, 3.0], [0.0, 0.0]])
    np.testing.assert_allclose(nn.forward(p, x)[:, 0], [-0.5, 0.5])


def test_zero_upstream_gives_zero_gradients():
    spec = nn.MLPSpec(2, (3,), hidden_layers=2, width=5)
    p = nn.init_params(spec, np.random.default_rng(1))
    out, cache = nn.forward(p, np.random.default_rng(2).normal(size=(6, 2)), training=True)
    grads, dx = nn.backward(p, cache, np.zeros_like(out))
    assert all(np.all(g == 0) for g in grads.values()) and np.all(dx == 0)


def test_quadratic_loss_one_parameter():
    # out = w x, loss = 0.5 (w x - y)^2 -> dL/dw = (w x - y) x
    spec = nn.MLPSpec(1, (1,), hidden_layers=0, batch_norm=False)
    p = nn.init_params(spec, np.random.default_rng(0))
    p.weights["W0"][...] = 1.5
    p.weights["b0"][...] = 0.0
    x, y = np.array([[2.0]]), 1.0
    out, cache = nn.forward(p, x, training=True)
    grads, _ = nn.backward(p, cache, out - y)
    assert grads["W0"][0, 0] == pytest.approx((1.5 * 2.0 - y) * 2.0)


def test_adam_first_steps():
    spec = nn.MLPSpec(1, (1,), hidden_layers=0, batch_norm=False)
    p = nn.init_params(spec, np.random.default_rng(0))
    w0 = p.weights["W0"].copy()
    opt = nn.OptimizerState.for_params(p, lr=1e-3)
    nn.adam_step(opt, p, {"W0": np.zeros((1, 1)), "b0": np.zeros(1)})
    assert np.array_equal(p.weights["W0"], w0)
    opt = nn.OptimizerState.for_params(p, lr=1e-3)
    nn.adam_step(opt, p, {"W0": np.ones((1, 1)), "b0": np.zeros(1)})
    assert (p.weights["W0"] - w0)[0, 0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
    steps = []
    for g in (-2.0, -200.0):
        q = nn.init_params(spec, np.random.default_rng(0))
        start = q.weights["W0"].copy()
        o = nn.OptimizerState.for_params(q, lr=1e-3)
        nn.adam_step(o, q, {"W0": np.full((1, 1), g), "b0": np.zeros(1)})
        steps.append((q.weights["W0"] - start)[0, 0])
    assert steps[0] == pytest.approx(steps[1], rel=1e-6)


def test_adam_solves_convex_quadratic():
    spec = nn.MLPSpec(1, (1,), hidden_layers=0, batch_norm=False)
    p = nn.init_params(spec, np.random.default_rng(0))
    A = np.array([[3.0]])
    target = {"W0": np.array([[0.7]]), "b0": np.array([-0.2])}
    opt = nn.OptimizerState.for_params(p, lr=nn.piecewise_lr(10_000, (1e-2, 1e-3, 1e-4)))
    for _ in range(10_000):
        grads = {k: A[0, 0] * (p.weights[k] - target[k]) for k in p.weights}
        nn.adam_step(opt, p, grads)
    gn = np.sqrt(sum(np.sum((A[0, 0] * (p.weights[k] - target[k])) ** 2) for k in p.weights))
    assert gn < 1e-6


def test_inference_independent_of_batch_composition():
    spec = nn.MLPSpec(2, (2,), hidden_layers=2, width=6)
    p = nn.init_params(spec, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for _ in range(20):
        nn.forward(p, rng.normal(size=(32, 2)), training=True)
    x = rng.normal(size=(10, 2))
    full = nn.forward(p, x)
    part = nn.forward(p, np.vstack([x[3:4], rng.normal(size=(4, 2))]))
    np.testing.assert_array_equal(full[3], part[0])


def test_constant_features_are_not_amplified():
    spec = nn.MLPSpec(1, (1,), hidden_layers=2, width=5)
    p = nn.init_params(spec, np.random.default_rng(0))
    x = np.full((64, 1), 100.0)
    out_train, _ = nn.forward(p, x, training=True)
    out_inf = nn.forward(p, x)
    np.testing.assert_allclose(out_train, out_inf, atol=1e-12)


def test_transfer_init_value_semantics_and_reset():
    spec = nn.MLPSpec(2, (1,), hidden_layers=1, width=4)
    src = nn.init_params(spec, np.random.default_rng(0))
    nn.forward(src, np.random.default_rng(1).normal(size=(16, 2)) + 3.0, training=True)
    dst = nn.transfer_init(src, spec)
    before = {k: v.copy() for k, v in dst.weights.items()}
    src.weights["W0"] += 1.0
    assert all(np.array_equal(before[k], dst.weights[k]) for k in before)
    assert all(np.all(v == 0) for k, v in dst.running.items() if k.startswith("rm"))
    assert all(np.all(v == 1) for k, v in dst.running.items() if k.startswith("rv"))
    with pytest.raises(ShapeMismatch):
        nn.transfer_init(src, nn.MLPSpec(3, (1,), hidden_layers=1, width=4))


def test_save_load_round_trip(tmp_path):
    spec = nn.MLPSpec(3, (2, 3), hidden_layers=2, width=4)
    p = nn.init_params(spec, np.random.default_rng(0))
    nn.forward(p, np.random.default_rng(1).normal(size=(8, 3)), training=True)
    nn.save_params(tmp_path / "a.bin", p, "z", 4)
    q = nn.load_params(tmp_path / "a.bin", "z", 4)
    x = np.random.default_rng(2).normal(size=(5, 3))
    np.testing.assert_array_equal(nn.forward(p, x), nn.forward(q, x))
    with pytest.raises(IncompatibleArtifact):
        nn.load_params(tmp_path / "a.bin", "y", 4)


def test_shape_errors():
    spec = nn.MLPSpec(3, (1,))
    p = nn.init_params(spec, np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        nn.forward(p, np.ones((4, 2)))
