"""One GeoLoRA iteration and its multi-layer variant.

Per layer an iteration is: one backprop for ``(G_U, G_S, G_V)``; parallel
updates of ``S``, ``K = U S`` and ``L = V S^T``; augmentation of both bases
with the new directions carried by ``K`` and ``L``; assembly of the
augmented coefficient matrix; SVD truncation back to a diagonal adapter.
"""

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np

from . import linalg
from .errors import InvalidArgument, NumericFailure
from .lowrank import (
    AugmentedState,
    TruncationMode,
    TruncationPolicy,
    select_rank,
    tangent_norm,
    threshold_value,
    truncate,
    truncate_to_rank,
    truncation_drop,
)
from .problems import FactorGradients, adapter_factors


@dataclass(frozen=True)
class OptimizerOpts:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidArgument("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidArgument("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidArgument("weight_decay must be non-negative")


def optimizer_step(param, grad, opts, buffer=None, lr=None):
    """SGD step with optional momentum and weight decay.

    Returns ``(new_param, new_buffer)``; the buffer is ``None`` when momentum
    is off.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise InvalidArgument(f"param {param.shape} and grad {grad.shape} differ in shape")
    lr = opts.learning_rate if lr is None else lr
    if opts.weight_decay:
        grad = grad + opts.weight_decay * param
    if opts.momentum:
        buffer = grad.copy() if buffer is None else opts.momentum * buffer + grad
        return param - lr * buffer, buffer
    return param - lr * grad, None


@dataclass
class KLSMomentum:
    """Momentum buffers in (K, L, S) coordinates for one layer."""

    rank: int
    S: Optional[np.ndarray] = None
    K: Optional[np.ndarray] = None
    L: Optional[np.ndarray] = None


class KLSUpdate(NamedTuple):
    S_new: np.ndarray
    K_new: np.ndarray
    L_new: np.ndarray
    momentum: Optional[KLSMomentum]


def _run(tasks, parallel):
    if not parallel:
        return [t() for t in tasks]
    with ThreadPoolExecutor(max_workers=len(tasks)) as pool:
        futures = [pool.submit(t) for t in tasks]
        return [f.result() for f in futures]


def kls_step(adapter, grads, opts, momentum=None, lr=None, parallel=False):
    """Gradient step on ``S``, ``K = U S`` and ``L = V S^T``.

    The K and L "gradients" are ``G_U S^-T`` and ``G_V S^-1``; on a first step
    the inverse is the identity. Momentum accumulates these rescaled
    quantities.
    """
    for name, g in zip(("G_U", "G_S", "G_V"), grads):
        if not np.all(np.isfinite(g)):
            raise NumericFailure(f"non-finite {name}", stage="kls")
    r = adapter.rank
    if momentum is None or momentum.rank != r:
        momentum = KLSMomentum(r)
    S0 = np.diag(adapter.s)
    tasks = [
        lambda: optimizer_step(S0, grads.g_S, opts, momentum.S, lr),
        lambda: optimizer_step(adapter.U * adapter.s, grads.g_U * adapter.s_inv, opts, momentum.K, lr),
        lambda: optimizer_step(adapter.V * adapter.s, grads.g_V * adapter.s_inv, opts, momentum.L, lr),
    ]
    (S_new, bS), (K_new, bK), (L_new, bL) = _run(tasks, parallel)
    new_momentum = KLSMomentum(r, bS, bK, bL) if opts.momentum else None
    return KLSUpdate(S_new, K_new, L_new, new_momentum)


def basis_augmentation(adapter, K_new, L_new, parallel=False):
    """Orthonormal complements ``(U~, V~)`` carrying the new directions of K and L.

    At most ``min(r, n - r)`` (resp. ``m - r``) columns are added, so the
    augmented rank never exceeds the ambient dimension.
    """
    if K_new.shape != adapter.U.shape or L_new.shape != adapter.V.shape:
        raise InvalidArgument("K/L shapes do not match the adapter bases")
    tasks = [
        lambda: linalg.orthonormal_complement(adapter.U, K_new),
        lambda: linalg.orthonormal_complement(adapter.V, L_new),
    ]
    U_tilde, V_tilde = _run(tasks, parallel)
    return U_tilde, V_tilde


def assemble_augmented_S(S_new, K_new, L_new, U_tilde, V_tilde):
    """``[[S_new, L_new^T V~], [U~^T K_new, 0]]``."""
    top = np.hstack([S_new, L_new.T @ V_tilde])
    bottom = np.hstack([U_tilde.T @ K_new, np.zeros((U_tilde.shape[1], V_tilde.shape[1]))])
    return np.vstack([top, bottom])


def augment(adapter, grads, opts, momentum=None, lr=None, parallel=False):
    """Steps 1-3 of an iteration: returns ``(AugmentedState, momentum)``."""
    upd = kls_step(adapter, grads, opts, momentum, lr, parallel)
    U_tilde, V_tilde = basis_augmentation(adapter, upd.K_new, upd.L_new, parallel)
    S_hat = assemble_augmented_S(upd.S_new, upd.K_new, upd.L_new, U_tilde, V_tilde)
    if not np.all(np.isfinite(S_hat)):
        raise NumericFailure("non-finite augmented coefficients", stage="assemble")
    state = AugmentedState(
        np.hstack([adapter.U, U_tilde]), S_hat, np.hstack([adapter.V, V_tilde]),
        adapter.rank, adapter.frozen_base,
    )
    return state, upd.momentum


@dataclass
class StepInfo:
    """What one iteration measured, about the state it started from and the one it produced."""

    loss: float
    grad_norm: Optional[float]
    proj_grad_norm: Optional[float]
    ranks: List[int]
    singular_values: List[np.ndarray]
    truncation_drop: float
    ortho_error: float
    states: list = field(default_factory=list, repr=False)
    momentum: list = field(default_factory=list, repr=False)


def _gradient_norms(adapters, bundle):
    if bundle.dense_gradients is None:
        return None, None
    gsq = 0.0
    psq = 0.0
    for a, G in zip(adapters, bundle.dense_gradients):
        gsq += float(np.sum(G * G))
        psq += tangent_norm(a.U, a.V, G) ** 2
    return float(np.sqrt(gsq)), float(np.sqrt(psq))


def geolora_iteration(adapter, problem, opts, policy, momentum=None, lr=None,
                      diagnostics=True, parallel=False, iteration=None):
    """One full iteration on a single adapter.

    Returns ``(new_adapter, StepInfo)``. With ``diagnostics`` the dense
    gradient is requested as well so that ``||P(W) grad||`` can be logged.
    """
    stack = LayerStack([adapter], policy)
    new_stack, info = stack_iteration(stack, problem, opts, [momentum], lr, diagnostics,
                                      parallel, iteration)
    return new_stack.layers[0], info


@dataclass
class LayerStack:
    layers: List
    policy: TruncationPolicy

    def __post_init__(self):
        self.layers = list(self.layers)
        if not self.layers:
            raise InvalidArgument("a layer stack needs at least one layer")

    @property
    def ranks(self):
        return [a.rank for a in self.layers]


def stack_augment(stack, problem, opts, momenta=None, lr=None, diagnostics=True, parallel=False,
                  iteration=None):
    """Shared backprop plus steps 1-3 for every layer.

    Returns ``(states, bundle, momenta)``.
    """
    momenta = list(momenta) if momenta is not None else [None] * len(stack.layers)
    bundle = problem.factor_gradients([adapter_factors(a) for a in stack.layers], dense=diagnostics)
    if not np.isfinite(bundle.loss):
        raise NumericFailure("non-finite loss", iteration=iteration, stage="backprop")

    def one(i):
        try:
            return augment(stack.layers[i], bundle.grads[i], opts, momenta[i], lr, parallel)
        except NumericFailure as exc:
            raise exc.located(iteration=iteration, layer=i) from None

    results = _run([lambda i=i: one(i) for i in range(len(stack.layers))],
                   parallel and len(stack.layers) > 1)
    return [r[0] for r in results], bundle, [r[1] for r in results]


def truncate_states(states, policy):
    """Local or global truncation of every augmented state."""
    if policy.mode is TruncationMode.LOCAL_RELATIVE:
        return [truncate(st, policy) for st in states]
    return global_truncate(states, policy)


def stack_iteration(stack, problem, opts, momenta=None, lr=None, diagnostics=True,
                    parallel=False, iteration=None):
    """One iteration on every layer from a single shared gradient evaluation."""
    states, bundle, momenta = stack_augment(stack, problem, opts, momenta, lr, diagnostics,
                                            parallel, iteration)
    try:
        new_layers = truncate_states(states, stack.policy)
    except NumericFailure as exc:
        raise exc.located(iteration=iteration, stage="truncate") from None
    drop_sq = 0.0
    for st, a in zip(states, new_layers):
        drop_sq += truncation_drop(st, a) ** 2
    # momentum buffers do not survive a rank change
    momenta = [m if m is not None and m.rank == a.rank else None
               for m, a in zip(momenta, new_layers)]
    grad_norm, proj_norm = _gradient_norms(stack.layers, bundle)
    info = StepInfo(
        loss=bundle.loss,
        grad_norm=grad_norm,
        proj_grad_norm=proj_norm,
        ranks=[a.rank for a in new_layers],
        singular_values=[a.s.copy() for a in new_layers],
        truncation_drop=float(np.sqrt(drop_sq)),
        ortho_error=max(a.ortho_error() for a in new_layers),
        states=states,
        momentum=momenta,
    )
    return LayerStack(new_layers, stack.policy), info


# ---------------------------------------------------------------------------
# global truncation
# ---------------------------------------------------------------------------


def global_allocation(singular_values, policy):
    """Per-layer ranks for global relative or budget truncation.

    ``singular_values`` holds one non-increasing array per layer. Relative
    mode discards the globally smallest ``s^2`` while the discarded total stays
    below ``tau/(1-tau)`` times the kept total. Budget mode keeps the globally
    largest ``s^2`` until that criterion is met or ``budget`` ranks are used.
    Every layer keeps at least ``min_rank`` values (or all it has).
    """
    mode = policy.mode
    if mode is TruncationMode.LOCAL_RELATIVE:
        raise InvalidArgument("local mode does not use a global allocation")
    floors = [min(policy.min_rank, len(s)) for s in singular_values]
    if mode is TruncationMode.GLOBAL_BUDGET and policy.budget < sum(floors):
        raise InvalidArgument(
            f"budget {policy.budget} cannot cover min_rank for {len(singular_values)} layers")
    sq = [np.asarray(s, dtype=np.float64) ** 2 for s in singular_values]
    total = float(sum(x.sum() for x in sq))
    ratio = policy.tau / (1.0 - policy.tau)

    def criterion_met(discarded, kept):
        return discarded == 0.0 or discarded < ratio * kept

    if mode is TruncationMode.GLOBAL_RELATIVE:
        ranks = [len(x) for x in sq]
        candidates = sorted(
            ((x[i], l, i) for l, x in enumerate(sq) for i in range(floors[l], len(x))),
            key=lambda c: (c[0], -c[1], -c[2]),
        )
        discarded = 0.0
        for val, l, i in candidates:
            # values of one layer are discarded from its tail inwards
            if i != ranks[l] - 1:
                continue
            if not criterion_met(discarded + val, total - discarded - val):
                break
            discarded += val
            ranks[l] -= 1
        return ranks

    ranks = list(floors)
    kept = float(sum(x[:f].sum() for x, f in zip(sq, floors)))
    candidates = sorted(
        ((x[i], l, i) for l, x in enumerate(sq) for i in range(floors[l], len(x))),
        key=lambda c: (-c[0], c[1], c[2]),
    )
    for val, l, i in candidates:
        if sum(ranks) >= policy.budget:
            break
        if criterion_met(total - kept, kept):
            break
        ranks[l] += 1
        kept += val
    return ranks


def global_truncate(states, policy):
    """Truncate several layers against one shared threshold or rank budget."""
    svds = [linalg.svd(st.aug_S) for st in states]
    ranks = global_allocation([res.singular_values for res in svds], policy)
    return [truncate_to_rank(st, r, res) for st, r, res in zip(states, ranks, svds)]


def brute_force_allocation(singular_values, policy):
    """Exhaustive search over per-layer ranks; the reference for ``global_allocation``.

    Among allocations within budget whose discarded energy meets the relative
    criterion, the one with the fewest total ranks wins (ties: most kept
    energy). If none meets it, the allocation keeping the most energy wins.
    """
    sq = [np.asarray(s, dtype=np.float64) ** 2 for s in singular_values]
    floors = [min(policy.min_rank, len(x)) for x in sq]
    total = float(sum(x.sum() for x in sq))
    ratio = policy.tau / (1.0 - policy.tau)
    budget = policy.budget if policy.mode is TruncationMode.GLOBAL_BUDGET else sum(len(x) for x in sq)
    best_ok = None
    best_any = None
    for ranks in itertools.product(*[range(f, len(x) + 1) for f, x in zip(floors, sq)]):
        count = sum(ranks)
        if count > budget:
            continue
        kept = float(sum(x[:r].sum() for x, r in zip(sq, ranks)))
        discarded = total - kept
        if discarded == 0.0 or discarded < ratio * kept:
            key = (count, -kept)
            if best_ok is None or key < best_ok[0]:
                best_ok = (key, list(ranks))
        key = (-kept, count)
        if best_any is None or key < best_any[0]:
            best_any = (key, list(ranks))
    return best_ok[1] if best_ok is not None else best_any[1]
