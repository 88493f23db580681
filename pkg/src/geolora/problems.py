"""Differentiable objectives and their factor gradients.

Every problem takes a list of per-layer factorizations ``(U, S, V, base)``,
with ``S`` a dense r x r matrix and ``base`` an optional frozen weight, and
returns the loss plus ``(G_U, G_S, G_V)`` for every layer from a single
reverse pass. The network problem never forms a dense layer gradient unless
asked to (``dense=True``), which is how the oracle checks get hold of it.
"""

import json
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np

from . import linalg
from .errors import InvalidArgument
from .lowrank import LowRankAdapter, make_adapter


class FactorGradients(NamedTuple):
    g_U: np.ndarray
    g_S: np.ndarray
    g_V: np.ndarray


@dataclass
class GradientBundle:
    loss: float
    grads: List[FactorGradients]
    dense_gradients: Optional[List[np.ndarray]] = None


def adapter_factors(adapter):
    """``(U, S, V, base)`` for a LowRankAdapter."""
    return adapter.U, np.diag(adapter.s), adapter.V, adapter.frozen_base


def _as_factor_list(factors):
    if isinstance(factors, LowRankAdapter):
        return [adapter_factors(factors)]
    out = []
    for f in factors:
        if isinstance(f, LowRankAdapter):
            out.append(adapter_factors(f))
        elif len(f) == 3:
            out.append((f[0], f[1], f[2], None))
        else:
            out.append(tuple(f))
    return out


# ---------------------------------------------------------------------------
# matrix regression
# ---------------------------------------------------------------------------


@dataclass
class MatrixRegressionProblem:
    """``L(W) = 1/2 ||W_target - W||_F^2``."""

    target: np.ndarray
    true_rank: Optional[int] = None
    descriptor: dict = field(default_factory=dict)
    # optional (U, s, V) starting point carried by hand-built instances
    init: Optional[tuple] = None
    tau: Optional[float] = None
    lipschitz: float = 1.0

    num_layers = 1

    @property
    def shape(self):
        return self.target.shape

    @property
    def layer_shapes(self):
        return [self.target.shape]

    def loss_dense(self, W):
        R = W - self.target
        return 0.5 * float(np.sum(R * R))

    def gradient_dense(self, W):
        return W - self.target

    def _weight(self, U, S, V, base):
        W = U @ S @ V.T
        return W if base is None else W + base

    def loss_factors(self, factors):
        (U, S, V, base), = _as_factor_list(factors)
        return self.loss_dense(self._weight(U, S, V, base))

    def factor_gradients(self, factors, dense=False):
        fl = _as_factor_list(factors)
        if len(fl) != 1:
            raise InvalidArgument("matrix regression has exactly one layer")
        U, S, V, base = fl[0]
        if U.shape[0] != self.target.shape[0] or V.shape[0] != self.target.shape[1]:
            raise InvalidArgument(f"factors of shape {U.shape}/{V.shape} do not fit target {self.target.shape}")
        G = self.gradient_dense(self._weight(U, S, V, base))
        gv = G @ V
        gtu = G.T @ U
        grads = FactorGradients(gv @ S.T, U.T @ gv, gtu @ S)
        loss = 0.5 * float(np.sum(G * G))
        return GradientBundle(loss, [grads], [G] if dense else None)

    def dense_gradients(self, weights):
        """Loss and ``grad_W`` for dense adapter increments (one per layer)."""
        if len(weights) != 1:
            raise InvalidArgument("matrix regression has exactly one layer")
        W = np.asarray(weights[0], dtype=np.float64)
        if W.shape != self.target.shape:
            raise InvalidArgument(f"weight {W.shape} does not match target {self.target.shape}")
        G = self.gradient_dense(W)
        return 0.5 * float(np.sum(G * G)), [G]


def matreg_loss_and_grads(problem, adapter):
    """Loss, factor gradients and dense gradient for one adapter."""
    return problem.factor_gradients([adapter_factors(adapter)], dense=True)


def random_lowrank_target(rng, n, m, rank, singular_values=None):
    X = linalg.qr_orthonormalize(rng.standard_normal((n, rank)))
    Y = linalg.qr_orthonormalize(rng.standard_normal((m, rank)))
    if singular_values is None:
        singular_values = np.linspace(2.0, 1.0, rank) if rank > 1 else np.array([1.5])
    sv = np.asarray(singular_values, dtype=np.float64)
    if sv.shape != (rank,):
        raise InvalidArgument(f"need {rank} singular values, got {sv.shape[0]}")
    return (X * sv) @ Y.T


STIFFNESS_TAU = 0.15


def build_stiffness_case():
    """20 x 20 target with singular values 15 and 2 plus its 4-rank starting point.

    Returns ``(problem, adapter, dense_factors)``: the first for the diagonal
    integrator, the second ``(U, S, V)`` with a dense ``S`` for the baselines.
    """
    n = 20
    target = np.zeros((n, n))
    target[0, 1] = 15.0
    target[1, 0] = -2.0
    U = np.eye(n)[:, :4]
    s = np.array([10.0, 1e-2, 1e-4, 1e-6])
    problem = MatrixRegressionProblem(
        target, true_rank=2, descriptor={"kind": "stiffness"},
        init=(U.copy(), s.copy(), U.copy()), tau=STIFFNESS_TAU,
    )
    adapter = make_adapter(U.copy(), s.copy(), U.copy())
    dense = (U.copy(), np.diag(s), U.copy())
    return problem, adapter, dense


# ---------------------------------------------------------------------------
# tiny adapter network
# ---------------------------------------------------------------------------

_ACTIVATIONS = ("identity", "tanh", "relu")


def _act(kind, a):
    if kind == "identity":
        return a
    if kind == "tanh":
        return np.tanh(a)
    return np.maximum(a, 0.0)


def _act_grad(kind, a, z):
    if kind == "identity":
        return np.ones_like(a)
    if kind == "tanh":
        return 1.0 - z * z
    # relu'(0) := 0
    return (a > 0.0).astype(np.float64)


@dataclass
class LayerSpec:
    base: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=np.float64)
        if self.activation not in _ACTIVATIONS:
            raise InvalidArgument(f"unknown activation {self.activation!r}")


@dataclass
class ForwardCache:
    inputs: list     # z_l entering each layer
    projected: list  # V_l^T z_l
    pre: list        # pre-activations
    outputs: list    # z_{l+1}


@dataclass
class TinyNetProblem:
    """Stack of ``z' = act(W_pt z + U S V^T z)`` layers under a mean-squared loss.

    ``inputs`` holds one sample per column; the loss is
    ``1/(2N) sum_j ||z_L(x_j) - y_j||^2``.
    """

    layers: List[LayerSpec]
    inputs: np.ndarray
    targets: np.ndarray
    descriptor: dict = field(default_factory=dict)
    tau: Optional[float] = None
    init: Optional[tuple] = None
    lipschitz: Optional[float] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        d = self.inputs.shape[0]
        for i, layer in enumerate(self.layers):
            if layer.base.shape[1] != d:
                raise InvalidArgument(f"layer {i} expects input dim {layer.base.shape[1]}, got {d}")
            d = layer.base.shape[0]
        if self.targets.shape != (d, self.inputs.shape[1]):
            raise InvalidArgument(f"targets must be {(d, self.inputs.shape[1])}, got {self.targets.shape}")

    @property
    def num_layers(self):
        return len(self.layers)

    @property
    def layer_shapes(self):
        return [layer.base.shape for layer in self.layers]

    @property
    def batch_size(self):
        return self.inputs.shape[1]

    def subset(self, columns):
        """The same network restricted to a minibatch of samples."""
        columns = np.asarray(columns)
        return TinyNetProblem(self.layers, self.inputs[:, columns], self.targets[:, columns],
                              dict(self.descriptor), self.tau)

    def minibatches(self, batch_size, seed):
        """Seeded shuffle of the samples split into consecutive minibatches."""
        order = np.random.default_rng(seed).permutation(self.batch_size)
        return [self.subset(order[i:i + batch_size]) for i in range(0, self.batch_size, batch_size)]

    def loss_factors(self, factors):
        out, _ = net_forward(self, factors)
        R = out - self.targets
        return 0.5 * float(np.sum(R * R)) / self.batch_size

    def factor_gradients(self, factors, dense=False):
        out, cache = net_forward(self, factors)
        return net_backprop_factors(self, factors, cache, dense=dense)

    def dense_gradients(self, weights):
        """Loss and ``grad_W`` for dense adapter increments (one per layer)."""
        if len(weights) != self.num_layers:
            raise InvalidArgument(f"expected {self.num_layers} weights, got {len(weights)}")
        factors = []
        for W, layer in zip(weights, self.layers):
            W = np.asarray(W, dtype=np.float64)
            if W.shape != layer.base.shape:
                raise InvalidArgument(f"weight {W.shape} does not match layer {layer.base.shape}")
            eye = np.eye(W.shape[1])
            factors.append((W, eye, eye, None))
        bundle = self.factor_gradients(factors, dense=True)
        return bundle.loss, bundle.dense_gradients

    def dense_forward(self, weights):
        """Forward pass with explicit per-layer weights (oracle path)."""
        z = self.inputs
        for layer, W in zip(self.layers, weights):
            z = _act(layer.activation, (layer.base + W) @ z)
        return z


def net_forward(problem, factors):
    fl = _as_factor_list(factors)
    if len(fl) != problem.num_layers:
        raise InvalidArgument(f"need {problem.num_layers} adapters, got {len(fl)}")
    z = problem.inputs
    cache = ForwardCache([], [], [], [])
    for i, (layer, (U, S, V, _)) in enumerate(zip(problem.layers, fl)):
        if U.shape[0] != layer.base.shape[0] or V.shape[0] != layer.base.shape[1]:
            raise InvalidArgument(f"adapter {i} has shape {U.shape[0]}x{V.shape[0]}, "
                                  f"layer is {layer.base.shape}")
        h = V.T @ z
        a = layer.base @ z + U @ (S @ h)
        cache.inputs.append(z)
        cache.projected.append(h)
        cache.pre.append(a)
        z = _act(layer.activation, a)
        cache.outputs.append(z)
    return z, cache


def net_backprop_factors(problem, factors, cache, dense=False):
    """One reverse sweep producing ``(G_U, G_S, G_V)`` for every layer."""
    fl = _as_factor_list(factors)
    n_samples = problem.batch_size
    R = cache.outputs[-1] - problem.targets
    loss = 0.5 * float(np.sum(R * R)) / n_samples
    delta = R / n_samples
    grads = [None] * len(fl)
    dense_grads = [None] * len(fl) if dense else None
    for i in range(len(fl) - 1, -1, -1):
        U, S, V, _ = fl[i]
        layer = problem.layers[i]
        ga = delta * _act_grad(layer.activation, cache.pre[i], cache.outputs[i])
        h = cache.projected[i]
        z = cache.inputs[i]
        utga = U.T @ ga
        grads[i] = FactorGradients(ga @ (S @ h).T, utga @ h.T, z @ (utga.T @ S))
        if dense:
            dense_grads[i] = ga @ z.T
        if i > 0:
            delta = layer.base.T @ ga + V @ (S.T @ utga)
    return GradientBundle(loss, grads, dense_grads)


def build_tiny_net(dims, activations, batch=32, seed=0, base_scale=None, teacher_rank=1,
                   teacher_scale=0.5):
    """Random frozen network plus targets from a low-rank perturbed teacher."""
    if len(activations) != len(dims) - 1:
        raise InvalidArgument("need one activation per layer")
    rng = np.random.default_rng(seed)
    layers = []
    teacher = []
    for d_in, d_out, act in zip(dims[:-1], dims[1:], activations):
        scale = base_scale if base_scale is not None else 1.0 / np.sqrt(d_in)
        base = scale * rng.standard_normal((d_out, d_in))
        layers.append(LayerSpec(base, act))
        k = min(teacher_rank, d_in, d_out)
        delta = teacher_scale * (rng.standard_normal((d_out, k)) @ rng.standard_normal((k, d_in))) / np.sqrt(d_in * k)
        teacher.append(delta)
    X = rng.standard_normal((dims[0], batch))
    descriptor = {"kind": "tiny_net", "dims": list(dims), "activations": list(activations),
                  "batch": batch, "seed": seed, "teacher_rank": teacher_rank,
                  "teacher_scale": teacher_scale}
    if base_scale is not None:
        descriptor["base_scale"] = base_scale
    probe = TinyNetProblem(layers, X, np.zeros((dims[-1], batch)))
    Y = probe.dense_forward(teacher)
    return TinyNetProblem(layers, X, Y, descriptor)


class CountingProblem:
    """Wraps a problem and counts gradient evaluations (backprop sweeps)."""

    def __init__(self, problem):
        self.inner = problem
        self.count = 0

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def factor_gradients(self, factors, dense=False):
        self.count += 1
        return self.inner.factor_gradients(factors, dense=dense)

    def dense_gradients(self, weights):
        self.count += 1
        return self.inner.dense_gradients(weights)


# ---------------------------------------------------------------------------
# verification helpers
# ---------------------------------------------------------------------------


def gradient_trick_residual(problem, adapters):
    """Compare ``G_U S^-T`` with ``grad_K L(K V^T)`` at ``K = U S`` (and likewise for L).

    The first path goes through the factor gradients of ``U S V^T``; the second
    re-parametrizes each layer as ``K I V^T`` (resp. ``U I L^T``) and
    differentiates that. Returns the largest residual over all layers for
    ``(K, L)``.
    """
    if isinstance(adapters, LowRankAdapter):
        adapters = [adapters]
    if any(a.first_step for a in adapters):
        raise InvalidArgument("gradient trick needs an invertible S")
    bundle = problem.factor_gradients([adapter_factors(a) for a in adapters])
    k_fact = []
    l_fact = []
    for a in adapters:
        eye = np.eye(a.rank)
        k_fact.append((a.U * a.s, eye, a.V, a.frozen_base))
        l_fact.append((a.U, eye, a.V * a.s, a.frozen_base))
    k_bundle = problem.factor_gradients(k_fact)
    l_bundle = problem.factor_gradients(l_fact)
    res_k = 0.0
    res_l = 0.0
    for a, g, gk, gl in zip(adapters, bundle.grads, k_bundle.grads, l_bundle.grads):
        res_k = max(res_k, linalg.frobenius_norm(g.g_U * a.s_inv - gk.g_U))
        res_l = max(res_l, linalg.frobenius_norm(g.g_V * a.s_inv - gl.g_V))
    return res_k, res_l


def finite_diff_gradient(problem, factors, which, epsilon=1e-6, layer=0):
    """Central differences of the loss in every entry of one factor (U, S or V)."""
    if epsilon <= 0:
        raise InvalidArgument("epsilon must be positive")
    slot = {"U": 0, "S": 1, "V": 2}[which]
    fl = [tuple(np.array(x, dtype=np.float64, copy=True) if x is not None else None for x in f)
          for f in _as_factor_list(factors)]
    target = fl[layer][slot]
    out = np.zeros_like(target)
    for idx in np.ndindex(target.shape):
        orig = target[idx]
        target[idx] = orig + epsilon
        plus = problem.loss_factors(fl)
        target[idx] = orig - epsilon
        minus = problem.loss_factors(fl)
        target[idx] = orig
        out[idx] = (plus - minus) / (2.0 * epsilon)
    return out


# ---------------------------------------------------------------------------
# JSON descriptors
# ---------------------------------------------------------------------------

_MATREG_KEYS = {"kind", "n", "m", "rank", "singular_values", "seed", "normalize", "target"}
_NET_KEYS = {"kind", "dims", "activations", "batch", "seed", "base_scale", "teacher_rank",
             "teacher_scale"}


def build_problem(desc):
    """Instantiate a problem from its JSON descriptor."""
    if not isinstance(desc, dict) or "kind" not in desc:
        raise InvalidArgument("problem descriptor needs a 'kind'")
    kind = desc["kind"]
    if kind == "stiffness":
        extra = set(desc) - {"kind"}
        if extra:
            raise InvalidArgument(f"unknown problem fields: {sorted(extra)}")
        return build_stiffness_case()[0]
    if kind == "matrix_regression":
        extra = set(desc) - _MATREG_KEYS
        if extra:
            raise InvalidArgument(f"unknown problem fields: {sorted(extra)}")
        if "target" in desc:
            target = linalg.as_matrix(desc["target"], "target")
            return MatrixRegressionProblem(target, desc.get("rank"), dict(desc))
        n = int(desc["n"])
        m = int(desc.get("m", n))
        rank = int(desc["rank"])
        if not 1 <= rank <= min(n, m):
            raise InvalidArgument(f"target rank {rank} invalid for {n}x{m}")
        rng = np.random.default_rng(desc.get("seed", 0))
        target = random_lowrank_target(rng, n, m, rank, desc.get("singular_values"))
        if desc.get("normalize", False):
            target = target / linalg.frobenius_norm(target)
        return MatrixRegressionProblem(target, rank, dict(desc))
    if kind == "tiny_net":
        extra = set(desc) - _NET_KEYS
        if extra:
            raise InvalidArgument(f"unknown problem fields: {sorted(extra)}")
        return build_tiny_net(desc["dims"], desc["activations"], desc.get("batch", 32),
                              desc.get("seed", 0), desc.get("base_scale"),
                              desc.get("teacher_rank", 1), desc.get("teacher_scale", 0.5))
    raise InvalidArgument(f"unknown problem kind {kind!r}")


def problem_to_json(problem):
    desc = dict(problem.descriptor)
    if not desc:
        desc = {"kind": "matrix_regression", "target": problem.target.tolist()}
    return json.dumps(desc, sort_keys=True)


def problem_from_json(text):
    return build_problem(json.loads(text))
