"""Low-rank adapter representation, tangent projections and truncation."""

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import linalg
from .errors import InvalidArgument


@dataclass(frozen=True)
class LowRankAdapter:
    """Factorized adapter increment ``U diag(s) V^T``.

    ``U`` is n x r and ``V`` is m x r, both orthonormal. ``s_inv`` caches the
    reciprocal of ``s``. On the very first fine-tuning step ``s`` may be zero,
    in which case ``first_step`` is set and ``s_inv`` is all ones.
    """

    U: np.ndarray
    s: np.ndarray
    V: np.ndarray
    s_inv: np.ndarray
    frozen_base: Optional[np.ndarray] = None
    first_step: bool = False

    @property
    def rank(self):
        return self.s.shape[0]

    @property
    def shape(self):
        return (self.U.shape[0], self.V.shape[0])

    @property
    def S(self):
        return np.diag(self.s)

    def factors(self):
        """``(U, S, V)`` with a dense coefficient matrix."""
        return self.U, np.diag(self.s), self.V

    def ortho_error(self):
        return max(linalg.orthonormality_error(self.U), linalg.orthonormality_error(self.V))


def make_adapter(U, s, V, frozen_base=None):
    """Build an adapter, deriving ``s_inv`` and ``first_step`` from ``s``.

    Any zero coefficient switches the adapter into first-step mode, where the
    inverse is taken to be the identity.
    """
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if U.ndim != 2 or V.ndim != 2:
        raise InvalidArgument("U and V must be 2-D")
    r = s.shape[0]
    if U.shape[1] != r or V.shape[1] != r:
        raise InvalidArgument(f"factor ranks disagree: U {U.shape}, s {s.shape}, V {V.shape}")
    if r < 1 or r > min(U.shape[0], V.shape[0]):
        raise InvalidArgument(f"rank {r} outside [1, {min(U.shape[0], V.shape[0])}]")
    if frozen_base is not None:
        frozen_base = np.asarray(frozen_base, dtype=np.float64)
        if frozen_base.shape != (U.shape[0], V.shape[0]):
            raise InvalidArgument("frozen base shape does not match the adapter")
    if np.any(s == 0.0):
        return LowRankAdapter(U, s, V, np.ones(r), frozen_base, first_step=True)
    return LowRankAdapter(U, s, V, 1.0 / s, frozen_base, first_step=False)


def random_orthonormal(rng, n, r):
    return linalg.qr_orthonormalize(rng.standard_normal((n, r)))


def zero_adapter(rng, n, m, r, frozen_base=None):
    """Fine-tuning initialization: random orthonormal bases, zero coefficients."""
    return make_adapter(random_orthonormal(rng, n, r), np.zeros(r), random_orthonormal(rng, m, r),
                        frozen_base)


@dataclass(frozen=True)
class AugmentedState:
    """Pre-truncation factorization ``[U0|U~] S^ [V0|V~]^T``."""

    aug_U: np.ndarray
    aug_S: np.ndarray
    aug_V: np.ndarray
    old_rank: int
    frozen_base: Optional[np.ndarray] = None

    def dense(self):
        return self.aug_U @ self.aug_S @ self.aug_V.T


class TruncationMode(str, Enum):
    LOCAL_RELATIVE = "local"
    GLOBAL_RELATIVE = "global"
    GLOBAL_BUDGET = "budget"


@dataclass(frozen=True)
class TruncationPolicy:
    """How many singular values survive a truncation.

    ``threshold_norm`` selects how the absolute threshold is derived from
    ``tau``: ``"frobenius"`` uses ``tau * ||S^||_F^2`` and ``"nuclear"`` uses
    ``tau * sum(s_i)``. The discarded tail is always measured as ``sum s_i^2``.
    """

    mode: TruncationMode = TruncationMode.LOCAL_RELATIVE
    tau: float = 0.0
    budget: Optional[int] = None
    min_rank: int = 1
    threshold_norm: str = "frobenius"

    def __post_init__(self):
        object.__setattr__(self, "mode", TruncationMode(self.mode))
        if not 0.0 <= self.tau < 1.0:
            raise InvalidArgument(f"tau must lie in [0, 1), got {self.tau}")
        if self.min_rank < 1:
            raise InvalidArgument("min_rank must be at least 1")
        if self.mode is TruncationMode.GLOBAL_BUDGET and (self.budget is None or self.budget < 1):
            raise InvalidArgument("budget mode needs a positive budget")
        if self.threshold_norm not in ("frobenius", "nuclear"):
            raise InvalidArgument(f"unknown threshold norm {self.threshold_norm!r}")


def assemble_dense(adapter):
    """The adapter increment ``U diag(s) V^T``; the frozen base is not added."""
    return (adapter.U * adapter.s) @ adapter.V.T


def _check_shape(adapter, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape != adapter.shape:
        raise InvalidArgument(f"expected a {adapter.shape} matrix, got {z.shape}")
    return z


def tangent_project(adapter, z):
    """Orthogonal projection onto the tangent space of the rank-r manifold.

    ``P Z = U U^T Z + Z V V^T - U U^T Z V V^T``.
    """
    z = _check_shape(adapter, z)
    U, V = adapter.U, adapter.V
    utz = U.T @ z
    zv = z @ V
    return U @ utz + zv @ V.T - U @ (utz @ V) @ V.T


def tangent_norm(U, V, z):
    """``||P Z||_F`` without forming the projection (U, V orthonormal)."""
    utz = U.T @ z
    zv = z @ V
    normal_part = zv - U @ (utz @ V)
    return float(np.sqrt(np.sum(utz * utz) + np.sum(normal_part * normal_part)))


def hat_project(adapter, z):
    """The non-orthogonal map of simultaneous factor descent.

    ``Z V S^2 V^T - U U^T Z V V^T + U (S^T)^2 U^T Z`` with the signs exactly as
    in the published flow; for ``S = I`` this coincides with ``tangent_project``.
    """
    z = _check_shape(adapter, z)
    U, V, s2 = adapter.U, adapter.V, adapter.s ** 2
    zv = z @ V
    utz = U.T @ z
    return (zv * s2) @ V.T - U @ (utz @ V) @ V.T + (U * s2) @ utz


def simultaneous_velocity(U, S, V, grad):
    """First-order change of ``U S V^T`` under one simultaneous factor step.

    Chain rule with dense ``S``: ``-(G V S^T S V^T + U U^T G V V^T + U S S^T U^T G)``.
    """
    return -(grad @ V @ S.T @ S @ V.T + U @ (U.T @ grad @ V) @ V.T + U @ S @ S.T @ U.T @ grad)


def _tail_sums(s):
    # tails[k] = sum_{i >= k} s_i^2, with tails[len(s)] = 0
    sq = s * s
    return np.concatenate([np.cumsum(sq[::-1])[::-1], [0.0]])


def threshold_value(s, tau, threshold_norm="frobenius"):
    """Absolute threshold derived from the relative ``tau``."""
    if threshold_norm == "nuclear":
        return tau * float(np.sum(s))
    return tau * float(np.sum(s * s))


def select_rank(s, theta, min_rank=1):
    """Smallest ``r1`` whose discarded tail ``sum_{i > r1} s_i^2`` is below ``theta``.

    A tail of exact zeros always counts as discardable. The result is clamped
    to ``[min_rank, len(s)]``.
    """
    tails = _tail_sums(s)
    k = len(s)
    r1 = k
    for j in range(k + 1):
        if tails[j] < theta or tails[j] == 0.0:
            r1 = j
            break
    return int(min(max(r1, min_rank), k))


def truncate_to_rank(state, rank, svd_result=None):
    """Keep the leading ``rank`` singular triplets of the augmented state."""
    res = svd_result if svd_result is not None else linalg.svd(state.aug_S)
    P, s, Q = res
    rank = int(min(max(rank, 1), len(s)))
    U1 = state.aug_U @ P[:, :rank]
    V1 = state.aug_V @ Q[:, :rank]
    return make_adapter(U1, s[:rank], V1, state.frozen_base)


def truncate(state, policy):
    """Local relative truncation of an augmented state to a new adapter."""
    if policy.mode is not TruncationMode.LOCAL_RELATIVE:
        raise InvalidArgument("global truncation modes are handled by global_truncate")
    res = linalg.svd(state.aug_S)
    s = res.singular_values
    theta = threshold_value(s, policy.tau, policy.threshold_norm)
    rank = select_rank(s, theta, policy.min_rank)
    return truncate_to_rank(state, rank, res)


def truncation_drop(state, result):
    """``||U^ S^ V^T - U1 S1 V1^T||_F`` computed in augmented coordinates.

    ``result`` must live inside the augmented bases (true for anything produced
    by ``truncate``), so both matrices can be compared through ``U^T . V^``.
    """
    coeff = (state.aug_U.T @ result.U * result.s) @ (result.V.T @ state.aug_V)
    return linalg.frobenius_norm(state.aug_S - coeff)
