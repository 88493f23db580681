from fractions import Fraction

import numpy as np
import pytest

from geolora import linalg
from geolora.errors import InvalidArgument
from geolora.lowrank import assemble_dense, make_adapter, random_orthonormal, zero_adapter
from geolora.problems import (
    STIFFNESS_TAU,
    CountingProblem,
    LayerSpec,
    MatrixRegressionProblem,
    TinyNetProblem,
    adapter_factors,
    build_problem,
    build_stiffness_case,
    build_tiny_net,
    finite_diff_gradient,
    gradient_trick_residual,
    matreg_loss_and_grads,
    net_forward,
    problem_from_json,
    problem_to_json,
    random_lowrank_target,
)


def random_factors(rng, n, m, r, dense_s=False):
    U = rng.standard_normal((n, r))
    V = rng.standard_normal((m, r))
    S = rng.standard_normal((r, r)) if dense_s else np.diag(rng.uniform(0.5, 1.5, r))
    return U, S, V, None


def rel_err(a, b):
    return linalg.frobenius_norm(a - b) / max(linalg.frobenius_norm(b), 1e-12)


def test_matreg_at_optimum(rng):
    a = make_adapter(random_orthonormal(rng, 6, 2), [2.0, 1.0], random_orthonormal(rng, 5, 2))
    b = matreg_loss_and_grads(MatrixRegressionProblem(assemble_dense(a)), a)
    assert b.loss == 0.0
    g = b.grads[0]
    assert not np.any(g.g_U) and not np.any(g.g_S) and not np.any(g.g_V)


def test_matreg_scalar():
    p = MatrixRegressionProblem(np.array([[3.0]]))
    loss, (G,) = p.dense_gradients([np.zeros((1, 1))])
    assert loss == 4.5 and G[0, 0] == -3.0


def test_matreg_factor_gradients_finite_differences():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        p = MatrixRegressionProblem(rng.standard_normal((6, 5)))
        f = random_factors(rng, 6, 5, 3, dense_s=True)
        g = p.factor_gradients([f]).grads[0]
        for which, analytic in zip("USV", g):
            worst = max(worst, rel_err(analytic, finite_diff_gradient(p, [f], which, 1e-5)))
    assert worst < 1e-6


def test_finite_diff_exact_on_quadratic(rng):
    # the loss is quadratic in each single factor, so central differences are exact up to round-off
    p = MatrixRegressionProblem(rng.standard_normal((4, 3)))
    f = random_factors(rng, 4, 3, 2)
    g = p.factor_gradients([f]).grads[0]
    for eps in (1e-4, 1e-2):
        assert rel_err(finite_diff_gradient(p, [f], "S", eps), g.g_S) < 1e-8
    with pytest.raises(InvalidArgument):
        finite_diff_gradient(p, [f], "S", 0.0)


def test_stiffness_case():
    p, a, (U, S, V) = build_stiffness_case()
    assert np.allclose(linalg.svd(p.target).singular_values[:3], [15.0, 2.0, 0.0])
    assert p.tau == STIFFNESS_TAU == 0.15
    assert a.rank == 4 and np.array_equal(np.diag(S), a.s)
    # exact rational evaluation of 1/2 (||T||^2 + ||S0||^2), cross term vanishes
    s0 = [Fraction(10), Fraction(1, 100), Fraction(1, 10_000), Fraction(1, 1_000_000)]
    exact = Fraction(1, 2) * (Fraction(229) + sum(x * x for x in s0))
    assert float(exact) == 164.5000500050005
    assert abs(p.loss_factors(a) - float(exact)) < 1e-12
    assert p.loss_factors([(U, S, V)]) == p.loss_factors(a)


def test_net_forward_zero_adapter_is_frozen_network(rng):
    net = build_tiny_net([5, 4, 3], ["identity", "identity"], batch=7, seed=3)
    adapters = [zero_adapter(rng, o, i, 2) for o, i in net.layer_shapes]
    out, _ = net_forward(net, adapters)
    frozen = net.layers[1].base @ (net.layers[0].base @ net.inputs)
    assert np.allclose(out, frozen, atol=1e-14)


def test_net_forward_single_linear_layer(rng):
    X = rng.standard_normal((4, 6))
    net = TinyNetProblem([LayerSpec(np.zeros((3, 4)), "identity")], X, np.zeros((3, 6)))
    U, S, V, _ = random_factors(rng, 3, 4, 2)
    out, _ = net_forward(net, [(U, S, V)])
    assert np.allclose(out, U @ S @ V.T @ X, atol=1e-14)


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_net_forward_matches_dense_oracle(rng, act):
    net = build_tiny_net([6, 5, 4], [act, act], batch=9, seed=11)
    fl = [random_factors(rng, o, i, 2) for o, i in net.layer_shapes]
    out, _ = net_forward(net, fl)
    oracle = net.dense_forward([U @ S @ V.T for U, S, V, _ in fl])
    assert np.max(np.abs(out - oracle)) < 1e-12


def test_net_forward_dimension_mismatch(rng):
    net = build_tiny_net([6, 5, 4], ["tanh", "tanh"], seed=0)
    with pytest.raises(InvalidArgument):
        net_forward(net, [random_factors(rng, 5, 6, 2), random_factors(rng, 5, 4, 2)])


def test_backprop_zero_residual(rng):
    net = build_tiny_net([4, 3], ["tanh"], batch=5, seed=1)
    fl = [random_factors(rng, 3, 4, 2)]
    out, _ = net_forward(net, fl)
    fitted = TinyNetProblem(net.layers, net.inputs, out)
    b = fitted.factor_gradients(fl)
    assert b.loss == 0.0
    assert all(not np.any(x) for x in b.grads[0])


def test_backprop_single_linear_layer_closed_form(rng):
    net = build_tiny_net([5, 4], ["identity"], batch=8, seed=2)
    U, S, V, _ = f = random_factors(rng, 4, 5, 3, dense_s=True)
    W = net.layers[0].base + U @ S @ V.T
    X, Y = net.inputs, net.targets
    N = X.shape[1]
    G = (W @ X - Y) @ X.T / N
    b = net.factor_gradients([f], dense=True)
    assert np.allclose(b.dense_gradients[0], G, atol=1e-13)
    g = b.grads[0]
    assert np.allclose(g.g_U, G @ V @ S.T, atol=1e-12)
    assert np.allclose(g.g_S, U.T @ G @ V, atol=1e-12)
    assert np.allclose(g.g_V, G.T @ U @ S, atol=1e-12)
    assert abs(b.loss - 0.5 * np.sum((W @ X - Y) ** 2) / N) < 1e-12


def test_backprop_no_dense_gradient_by_default(rng):
    net = build_tiny_net([4, 3], ["tanh"], seed=0)
    assert net.factor_gradients([random_factors(rng, 3, 4, 2)]).dense_gradients is None


@pytest.mark.parametrize("acts", [["tanh", "tanh"], ["relu", "identity"], ["tanh", "relu", "tanh"]])
def test_backprop_finite_differences(acts):
    worst = 0.0
    dims = [5, 6, 4, 3][:len(acts) + 1]
    for seed in range(20):
        rng = np.random.default_rng(seed)
        net = build_tiny_net(dims, acts, batch=6, seed=seed)
        fl = [random_factors(rng, o, i, 2, dense_s=True) for o, i in net.layer_shapes]
        b = net.factor_gradients(fl)
        for layer in range(len(fl)):
            for which, analytic in zip("USV", b.grads[layer]):
                fd = finite_diff_gradient(net, fl, which, 1e-6, layer)
                worst = max(worst, rel_err(analytic, fd))
    assert worst < 1e-5


def test_dense_gradients_consistent_with_factor_path(rng):
    net = build_tiny_net([5, 6, 4], ["tanh", "tanh"], batch=6, seed=4)
    fl = [random_factors(rng, o, i, 2) for o, i in net.layer_shapes]
    b = net.factor_gradients(fl, dense=True)
    loss, grads = net.dense_gradients([U @ S @ V.T for U, S, V, _ in fl])
    assert abs(loss - b.loss) < 1e-12
    for g1, g2 in zip(grads, b.dense_gradients):
        assert np.allclose(g1, g2, atol=1e-12)


def test_gradient_trick_matrix_regression(rng):
    p = MatrixRegressionProblem(rng.standard_normal((8, 6)))
    a = make_adapter(random_orthonormal(rng, 8, 3), [3.0, 1.0, 0.2], random_orthonormal(rng, 6, 3))
    rk, rl = gradient_trick_residual(p, a)
    assert rk < 1e-10 and rl < 1e-10


def test_gradient_trick_zero_gradient(rng):
    a = make_adapter(random_orthonormal(rng, 5, 2), [2.0, 1.0], random_orthonormal(rng, 5, 2))
    assert gradient_trick_residual(MatrixRegressionProblem(assemble_dense(a)), a) == (0.0, 0.0)


def test_gradient_trick_tanh_net(rng):
    net = build_tiny_net([6, 8, 5], ["tanh", "tanh"], batch=10, seed=7)
    adapters = [make_adapter(random_orthonormal(rng, o, 3), [2.0, 0.7, 0.01],
                             random_orthonormal(rng, i, 3)) for o, i in net.layer_shapes]
    rk, rl = gradient_trick_residual(net, adapters)
    assert rk < 1e-8 and rl < 1e-8


def test_gradient_trick_requires_invertible_s(rng):
    with pytest.raises(InvalidArgument):
        gradient_trick_residual(MatrixRegressionProblem(np.ones((4, 4))), zero_adapter(rng, 4, 4, 2))


def test_minibatch_average_equals_full_batch(rng):
    net = build_tiny_net([5, 6, 4], ["tanh", "relu"], batch=24, seed=8)
    fl = [random_factors(rng, o, i, 2) for o, i in net.layer_shapes]
    full = net.factor_gradients(fl)
    parts = net.minibatches(6, seed=3)
    assert sorted(np.concatenate([p.inputs[0] for p in parts])) == sorted(net.inputs[0])
    for layer in range(2):
        for k in range(3):
            avg = sum(p.factor_gradients(fl).grads[layer][k] for p in parts) / len(parts)
            assert np.max(np.abs(avg - full.grads[layer][k])) < 1e-12


def test_random_lowrank_target_spectrum(rng):
    T = random_lowrank_target(rng, 20, 15, 4, [4.0, 3.0, 2.0, 1.0])
    assert np.allclose(linalg.svd(T).singular_values[:5], [4, 3, 2, 1, 0], atol=1e-12)


def test_json_roundtrip():
    for desc in ({"kind": "stiffness"},
                 {"kind": "matrix_regression", "n": 12, "m": 9, "rank": 3, "seed": 4},
                 {"kind": "tiny_net", "dims": [4, 5, 3], "activations": ["tanh", "relu"], "seed": 2}):
        p = build_problem(desc)
        q = problem_from_json(problem_to_json(p))
        if hasattr(p, "target"):
            assert np.array_equal(p.target, q.target)
        else:
            assert np.array_equal(p.inputs, q.inputs) and np.array_equal(p.targets, q.targets)
    explicit = MatrixRegressionProblem(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(problem_from_json(problem_to_json(explicit)).target, explicit.target)


def test_build_problem_rejects_bad_descriptors():
    for bad in ({"n": 3}, {"kind": "nope"}, {"kind": "stiffness", "n": 3},
                {"kind": "matrix_regression", "n": 4, "rank": 9},
                {"kind": "matrix_regression", "n": 4, "rank": 2, "colour": 1}):
        with pytest.raises(InvalidArgument):
            build_problem(bad)


def test_counting_problem(rng):
    p = CountingProblem(MatrixRegressionProblem(np.ones((3, 3))))
    a = zero_adapter(rng, 3, 3, 1)
    p.factor_gradients([adapter_factors(a)])
    p.dense_gradients([np.zeros((3, 3))])
    assert p.count == 2 and p.shape == (3, 3)
