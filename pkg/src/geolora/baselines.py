"""Comparison optimizers sharing the problem interface of the integrator.

Every step function accepts a single adapter or a list (one per layer) and
returns the same kind of object. One call costs exactly one gradient
evaluation, except ``dlrt_sequential_step`` which costs three.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import linalg
from .errors import InvalidArgument, NumericFailure
from .lowrank import AugmentedState, select_rank, threshold_value
from .integrator import truncate_states


@dataclass(frozen=True)
class DenseFactorAdapter:
    """``U S V^T`` with a dense ``S`` and no orthonormality guarantee."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray
    frozen_base: Optional[np.ndarray] = None

    def __post_init__(self):
        r = self.S.shape
        if len(r) != 2 or r[0] != r[1] or self.U.shape[1] != r[0] or self.V.shape[1] != r[1]:
            raise InvalidArgument(f"inconsistent factor shapes {self.U.shape}, {self.S.shape}, {self.V.shape}")

    @property
    def rank(self):
        return self.S.shape[0]

    def factors(self):
        return self.U, self.S, self.V, self.frozen_base

    def dense(self):
        return self.U @ self.S @ self.V.T

    def ortho_error(self):
        return max(linalg.orthonormality_error(self.U), linalg.orthonormality_error(self.V))


@dataclass(frozen=True)
class AbAdapter:
    """``scale * A B^T``; the usual LoRA parametrization."""

    A: np.ndarray
    B: np.ndarray
    scale: float = 1.0
    frozen_base: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[1]:
            raise InvalidArgument(f"inconsistent factor shapes {self.A.shape}, {self.B.shape}")

    @property
    def rank(self):
        return self.A.shape[1]

    def factors(self):
        return self.A, self.scale * np.eye(self.rank), self.B, self.frozen_base

    def dense(self):
        return self.scale * (self.A @ self.B.T)


def lora_init(rng, n, m, r, alpha=None, frozen_base=None):
    """Gaussian ``A`` with variance ``1/r``, zero ``B``, scale ``alpha / r``."""
    alpha = float(r) if alpha is None else alpha
    A = rng.standard_normal((n, r)) / np.sqrt(r)
    return AbAdapter(A, np.zeros((m, r)), alpha / r, frozen_base)


def _listify(x):
    if isinstance(x, (list, tuple)):
        return list(x), False
    return [x], True


def _unlist(items, single):
    return items[0] if single else items


def _check_finite(arrays, stage):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericFailure("non-finite values", stage=stage)


def full_gd_step(W, problem, lr):
    """``W - lr * grad_W L`` for one dense increment or a list of them."""
    weights, single = _listify(W)
    _, grads = problem.dense_gradients(weights)
    out = [w - lr * g for w, g in zip(weights, grads)]
    _check_finite(out, "full_gd")
    return _unlist(out, single)


def lora_ab_step(adapter, problem, lr):
    """Simultaneous descent on ``A`` and ``B``."""
    layers, single = _listify(adapter)
    bundle = problem.factor_gradients([a.factors() for a in layers])
    out = []
    for a, g in zip(layers, bundle.grads):
        # with the factorization (A, scale I, B): g_U = G B scale, g_V = G^T A scale
        new = AbAdapter(a.A - lr * g.g_U, a.B - lr * g.g_V, a.scale, a.frozen_base)
        _check_finite([new.A, new.B], "lora_ab")
        out.append(new)
    return _unlist(out, single)


def _simultaneous(layers, problem, lr, gamma=0.0):
    bundle = problem.factor_gradients([a.factors() for a in layers])
    out = []
    for a, g in zip(layers, bundle.grads):
        gU, gS, gV = g.g_U, g.g_S, g.g_V
        if gamma:
            eye = np.eye(a.rank)
            gU = gU + 4.0 * gamma * a.U @ (a.U.T @ a.U - eye)
            gV = gV + 4.0 * gamma * a.V @ (a.V.T @ a.V - eye)
        new = DenseFactorAdapter(a.U - lr * gU, a.S - lr * gS, a.V - lr * gV, a.frozen_base)
        _check_finite([new.U, new.S, new.V], "simultaneous")
        out.append(new)
    return out


def svd_lora_step(adapter, problem, lr):
    """Simultaneous explicit Euler step on ``U``, ``S`` and ``V``."""
    layers, single = _listify(adapter)
    return _unlist(_simultaneous(layers, problem, lr), single)


def orthogonality_penalty(adapter):
    """``||U^T U - I||_F^2 + ||V^T V - I||_F^2``."""
    eye = np.eye(adapter.rank)
    du = adapter.U.T @ adapter.U - eye
    dv = adapter.V.T @ adapter.V - eye
    return float(np.sum(du * du) + np.sum(dv * dv))


def svd_truncate_dense(adapter, policy, min_rank=5):
    """Diagonalize ``S`` by SVD and drop singular values per ``policy``.

    The rotations are absorbed into ``U`` and ``V`` without orthonormalizing
    them, so any orthogonality defect is left for the penalty to handle.
    """
    P, s, Q = linalg.svd(adapter.S)
    theta = threshold_value(s, policy.tau, policy.threshold_norm)
    r = select_rank(s, theta, min(max(min_rank, policy.min_rank), len(s)))
    return DenseFactorAdapter(adapter.U @ P[:, :r], np.diag(s[:r]), adapter.V @ Q[:, :r],
                              adapter.frozen_base)


def adalora_lite_step(adapter, problem, lr, gamma, policy=None, step_index=0, truncate_every=None,
                      min_rank=5):
    """Simultaneous descent plus a soft orthogonality penalty and periodic SVD truncation.

    The penalty is ``gamma * (||U^T U - I||^2 + ||V^T V - I||^2)``. When
    ``truncate_every`` is set, the step with ``(step_index + 1) % truncate_every == 0``
    finishes with an SVD truncation under ``policy`` keeping at least
    ``min_rank`` values.
    """
    if gamma < 0:
        raise InvalidArgument("gamma must be non-negative")
    layers, single = _listify(adapter)
    out = _simultaneous(layers, problem, lr, gamma)
    if truncate_every and (step_index + 1) % truncate_every == 0:
        if policy is None:
            raise InvalidArgument("truncation requested without a policy")
        out = [svd_truncate_dense(a, policy, min_rank) for a in out]
    return _unlist(out, single)


def dlrt_sequential_step(adapter, problem, lr, policy):
    """Basis update then coefficient update, with three gradient evaluations.

    K and L are stepped from separate evaluations at ``(U S) I V^T`` and
    ``U I (V S^T)^T``; both bases are augmented with the new directions; the
    coefficients, embedded as ``[[S, 0], [0, 0]]`` in the augmented bases, take
    a gradient step from a third evaluation; then the state is truncated.
    """
    layers, single = _listify(adapter)
    k_fact = []
    l_fact = []
    for a in layers:
        eye = np.eye(a.rank)
        k_fact.append((a.U * a.s, eye, a.V, a.frozen_base))
        l_fact.append((a.U, eye, a.V * a.s, a.frozen_base))
    gk = problem.factor_gradients(k_fact).grads
    gl = problem.factor_gradients(l_fact).grads
    aug = []
    for a, g1, g2 in zip(layers, gk, gl):
        K = a.U * a.s - lr * g1.g_U
        L = a.V * a.s - lr * g2.g_V
        _check_finite([K, L], "dlrt_basis")
        U_hat = np.hstack([a.U, linalg.orthonormal_complement(a.U, K)])
        V_hat = np.hstack([a.V, linalg.orthonormal_complement(a.V, L)])
        S_tilde = np.zeros((U_hat.shape[1], V_hat.shape[1]))
        S_tilde[:a.rank, :a.rank] = np.diag(a.s)
        aug.append((a, U_hat, S_tilde, V_hat))
    gs = problem.factor_gradients([(U, S, V, a.frozen_base) for a, U, S, V in aug]).grads
    states = []
    for (a, U, S, V), g in zip(aug, gs):
        S_hat = S - lr * g.g_S
        _check_finite([S_hat], "dlrt_coefficients")
        states.append(AugmentedState(U, S_hat, V, a.rank, a.frozen_base))
    return _unlist(truncate_states(states, policy), single)

