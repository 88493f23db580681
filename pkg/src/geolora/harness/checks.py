"""Numerical verification suites: invariants, descent, error scaling, gradient trick, global truncation."""

from dataclasses import dataclass, field
from typing import List

import numpy as np

from .. import linalg
from ..errors import InvalidArgument
from ..integrator import (
    LayerStack,
    OptimizerOpts,
    brute_force_allocation,
    geolora_iteration,
    global_allocation,
    stack_augment,
    stack_iteration,
)
from ..lowrank import (
    TruncationPolicy,
    assemble_dense,
    make_adapter,
    random_orthonormal,
    tangent_project,
    zero_adapter,
)
from ..problems import (
    MatrixRegressionProblem,
    build_tiny_net,
    gradient_trick_residual,
    random_lowrank_target,
)

ORTHO_TOL = 1e-10
IDENTITY_TOL = 1e-9
GRADTRICK_TOL = 1e-8
# floating point slack for the descent inequality once losses reach round-off level
DESCENT_SLACK = 1e-13


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: dict = field(default_factory=dict)

    def line(self):
        vals = ", ".join(f"{k}={_fmt(v)}" for k, v in self.measured.items())
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {vals}"


@dataclass
class CheckReport:
    suite: str
    results: List[CheckResult]

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    def lines(self):
        return [r.line() for r in self.results]


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.3e}"
    return str(v)


def _matreg(rng, n, m, rank, normalize=False):
    T = random_lowrank_target(rng, n, m, rank)
    if normalize:
        T = T / linalg.frobenius_norm(T)
    return MatrixRegressionProblem(T, rank, {})


def _random_adapter(rng, n, m, r, lo=0.5, hi=2.0):
    s = np.sort(rng.uniform(lo, hi, r))[::-1]
    return make_adapter(random_orthonormal(rng, n, r), s, random_orthonormal(rng, m, r))


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------


def check_orthonormality(seed=0, runs=50, iters=30):
    """Max ``||U^T U - I||_F``, ``||V^T V - I||_F`` over seeded runs with random problems and ranks."""
    worst = 0.0
    rank_ok = True
    for k in range(runs):
        rng = np.random.default_rng([seed, k])
        n, m = rng.integers(6, 41, size=2)
        target_rank = int(rng.integers(1, min(n, m) // 2 + 1))
        r0 = int(rng.integers(1, min(4, min(n, m) // 2) + 1))
        problem = _matreg(rng, n, m, target_rank)
        policy = TruncationPolicy(tau=float(rng.choice([0.0, 1e-4, 1e-2, 0.1])))
        opts = OptimizerOpts(float(rng.uniform(0.05, 0.9)))
        a = zero_adapter(rng, n, m, r0)
        for _ in range(iters):
            prev = a.rank
            a, info = geolora_iteration(a, problem, opts, policy, diagnostics=False)
            worst = max(worst, info.ortho_error)
            rank_ok &= 1 <= a.rank <= min(2 * prev, n, m)
    return [
        CheckResult("orthonormality", worst < ORTHO_TOL, {"max_error": worst, "runs": runs}),
        CheckResult("rank bounds", bool(rank_ok), {"runs": runs}),
    ]


def check_rank_recovery(seed=0, n=100, target_rank=8, lr=0.5, tau=1e-8, iters=60, deadline=6):
    """Rank grows from 1 to the target rank within ``deadline`` iterations and settles there."""
    rng = np.random.default_rng(seed)
    problem = _matreg(rng, n, n, target_rank)
    a = _random_adapter(rng, n, n, 1, 0.1, 0.1)
    policy = TruncationPolicy(tau=tau)
    opts = OptimizerOpts(lr)
    reached = None
    ranks = []
    for it in range(1, iters + 1):
        a, _ = geolora_iteration(a, problem, opts, policy, diagnostics=False)
        ranks.append(a.rank)
        if reached is None and a.rank >= target_rank:
            reached = it
    final_loss = problem.loss_factors(a)
    return [CheckResult(
        "rank recovery",
        reached is not None and reached <= deadline and a.rank == target_rank,
        {"reached_at": reached, "final_rank": a.rank, "final_loss": final_loss,
         "first_ranks": ranks[:deadline]},
    )]


# ---------------------------------------------------------------------------
# descent and convergence
# ---------------------------------------------------------------------------


def descent_trajectory(problem, adapter, opts, policy, iters, lipschitz=1.0):
    """Per-iteration slack of the descent inequality (negative means violated).

    slack_t = L_t - lr (1 - L lr / 2) ||P f||^2 + L * drop_t - L_{t+1}
    """
    lr = opts.learning_rate
    slacks = []
    infos = []
    a = adapter
    for _ in range(iters):
        new, info = geolora_iteration(a, problem, opts, policy, diagnostics=True)
        next_loss = problem.loss_factors(new)
        bound = (info.loss - lr * (1.0 - lipschitz * lr / 2.0) * info.proj_grad_norm ** 2
                 + lipschitz * info.truncation_drop)
        slacks.append(bound - next_loss)
        infos.append(info)
        a = new
    return np.array(slacks), infos, a


def check_descent(seed=0, runs=12, iters=60):
    """Descent inequality with unit Lipschitz constant on unit-norm regression targets."""
    violations = 0
    worst = np.inf
    count = 0
    for k in range(runs):
        rng = np.random.default_rng([seed, 100 + k])
        n = int(rng.integers(10, 41))
        problem = _matreg(rng, n, n, int(rng.integers(1, 6)), normalize=True)
        lr = float(rng.choice([0.05, 0.2, 0.5, 1.0]))
        tau = float(rng.choice([0.0, 0.01, 0.1, 0.3]))
        # invertible starting coefficients: the zero-coefficient first step is not a projected step
        a = _random_adapter(rng, n, n, int(rng.integers(1, 4)), 0.01, 0.5)
        slacks, _, _ = descent_trajectory(problem, a, OptimizerOpts(lr), TruncationPolicy(tau=tau),
                                          iters)
        violations += int(np.sum(slacks < -DESCENT_SLACK))
        worst = min(worst, float(slacks.min()))
        count += len(slacks)
    return [CheckResult("descent inequality", violations == 0,
                        {"violations": violations, "iterations": count, "min_slack": worst})]


def check_convergence_trend(seed=0, iters=200, lr=0.5, tau=1e-3):
    """Projected gradient norms shrink and their weighted sum obeys the telescoped bound."""
    rng = np.random.default_rng(seed)
    problem = _matreg(rng, 30, 30, 4, normalize=True)
    a = _random_adapter(rng, 30, 30, 2, 0.01, 0.5)
    slacks, infos, a = descent_trajectory(problem, a, OptimizerOpts(lr), TruncationPolicy(tau=tau),
                                          iters)
    pg = np.array([i.proj_grad_norm for i in infos])
    drops = np.array([i.truncation_drop for i in infos])
    lhs = lr * (1 - lr / 2) * float(np.sum(pg ** 2))
    rhs = infos[0].loss - problem.loss_factors(a) + float(np.sum(drops))
    ratio = float(pg[-1] / pg[0])
    return [
        CheckResult("projected gradient decay", ratio < 1e-6, {"final_over_initial": ratio}),
        CheckResult("telescoped descent bound", lhs <= rhs + DESCENT_SLACK,
                    {"sum_weighted_grad_sq": lhs, "bound": rhs}),
    ]


# ---------------------------------------------------------------------------
# error scaling in the step size
# ---------------------------------------------------------------------------


def flow_error(lr, seed=0, n=16, rank=2, t_end=1.0):
    """``||W_flow(t_end) - W_lr||_F`` with no truncation on a rank-reachable target.

    The exact gradient flow of the regression loss is
    ``W(t) = T + (W0 - T) exp(-t)``.
    """
    rng = np.random.default_rng(seed)
    problem = _matreg(rng, n, n, rank)
    a = _random_adapter(rng, n, n, rank)
    W0 = assemble_dense(a)
    steps = int(round(t_end / lr))
    policy = TruncationPolicy(tau=0.0)
    opts = OptimizerOpts(lr)
    for _ in range(steps):
        a, _ = geolora_iteration(a, problem, opts, policy, diagnostics=False)
    exact = problem.target + (W0 - problem.target) * np.exp(-steps * lr)
    return linalg.frobenius_norm(exact - assemble_dense(a))


def check_error_scaling(seed=0, lr=0.1):
    e1 = flow_error(lr, seed)
    e2 = flow_error(lr / 2, seed)
    ratio = e1 / e2
    return [CheckResult("first-order error scaling", 1.6 <= ratio <= 2.4,
                        {"err_lr": e1, "err_half_lr": e2, "ratio": ratio})]


# ---------------------------------------------------------------------------
# augmentation identity and gradient trick
# ---------------------------------------------------------------------------


def identity_residual(rng):
    """Relative gap between the augmented iterate and ``W + lr P(W)(-grad)``."""
    n = int(rng.integers(12, 41))
    m = int(rng.integers(12, 41))
    r = int(rng.integers(1, min(n, m) // 3 + 1))
    problem = _matreg(rng, n, m, int(rng.integers(1, 6)))
    a = _random_adapter(rng, n, m, r, 0.1, 3.0)
    lr = float(rng.uniform(0.01, 1.0))
    states, bundle, _ = stack_augment(LayerStack([a], TruncationPolicy()), problem,
                                      OptimizerOpts(lr), diagnostics=True)
    W = assemble_dense(a)
    expected = W - lr * tangent_project(a, bundle.dense_gradients[0])
    gap = linalg.frobenius_norm(states[0].dense() - expected)
    return gap / linalg.frobenius_norm(expected)


def check_identity(seed=0, trials=20):
    worst = 0.0
    for k in range(trials):
        worst = max(worst, identity_residual(np.random.default_rng([seed, 200 + k])))
    return [CheckResult("augmented iterate identity", worst < IDENTITY_TOL,
                        {"max_relative_gap": worst, "trials": trials})]


def check_gradient_trick(seed=0):
    rng = np.random.default_rng(seed)
    problem = _matreg(rng, 30, 25, 4)
    a = _random_adapter(rng, 30, 25, 4, 1e-2, 5.0)
    cond_mr = float(a.s.max() / a.s.min())
    rk, rl = gradient_trick_residual(problem, a)
    net = build_tiny_net([6, 8, 5], ["tanh", "tanh"], batch=16, seed=seed)
    adapters = [_random_adapter(rng, d_out, d_in, 3, 0.1, 2.0)
                for d_out, d_in in net.layer_shapes]
    cond_net = max(float(x.s.max() / x.s.min()) for x in adapters)
    nk, nl = gradient_trick_residual(net, adapters)
    return [
        CheckResult("gradient trick (regression)", max(rk, rl) < GRADTRICK_TOL and cond_mr < 1e6,
                    {"res_K": rk, "res_L": rl, "cond_S": cond_mr}),
        CheckResult("gradient trick (tanh net)", max(nk, nl) < GRADTRICK_TOL and cond_net < 1e6,
                    {"res_K": nk, "res_L": nl, "cond_S": cond_net}),
    ]


# ---------------------------------------------------------------------------
# global truncation
# ---------------------------------------------------------------------------


def linear_stack(seed, dims=(8, 7, 6, 5), batch=24):
    return build_tiny_net(list(dims), ["identity"] * (len(dims) - 1), batch=batch, seed=seed,
                          teacher_rank=2, teacher_scale=1.0)


def check_global(seed=0, seeds=10, iters=40):
    """Greedy budget allocation against exhaustive search, and budgets along trajectories."""
    mismatches = 0
    worst_gap = 0.0
    exceeded = 0
    for k in range(seeds):
        rng = np.random.default_rng([seed, 300 + k])
        net = linear_stack(int(rng.integers(0, 2 ** 31)))
        adapters = [_random_adapter(rng, d_out, d_in, int(rng.integers(1, 4)), 0.05, 1.0)
                    for d_out, d_in in net.layer_shapes]
        states, _, _ = stack_augment(LayerStack(adapters, TruncationPolicy()), net,
                                     OptimizerOpts(0.05), diagnostics=False)
        svals = [linalg.svd(st.aug_S).singular_values for st in states]
        total = sum(len(s) for s in svals)
        budget = int(rng.integers(len(svals), total + 1))
        tau = float(rng.choice([0.0, 1e-3, 0.05]))
        policy = TruncationPolicy("budget", tau, budget)
        greedy = global_allocation(svals, policy)
        brute = brute_force_allocation(svals, policy)
        kept_g = sum(float(np.sum(s[:r] ** 2)) for s, r in zip(svals, greedy))
        kept_b = sum(float(np.sum(s[:r] ** 2)) for s, r in zip(svals, brute))
        gap = abs(kept_g - kept_b) / max(kept_b, 1e-300)
        worst_gap = max(worst_gap, gap)
        if sum(greedy) != sum(brute) or gap > 1e-12 or sum(greedy) > budget:
            mismatches += 1

        policy = TruncationPolicy("budget", 1e-3, 2 * len(svals) + 1)
        stack = LayerStack([zero_adapter(rng, d_out, d_in, 1) for d_out, d_in in net.layer_shapes],
                           policy)
        for _ in range(iters):
            stack, info = stack_iteration(stack, net, OptimizerOpts(0.05), diagnostics=False)
            exceeded += int(sum(info.ranks) > policy.budget)
    return [
        CheckResult("budget allocation matches exhaustive search", mismatches == 0,
                    {"mismatches": mismatches, "seeds": seeds, "max_kept_gap": worst_gap}),
        CheckResult("budget respected along trajectories", exceeded == 0,
                    {"violations": exceeded, "iterations": seeds * iters}),
    ]


SUITES = {
    "invariants": lambda seed: check_orthonormality(seed) + check_rank_recovery(seed),
    "theorem1": lambda seed: check_descent(seed),
    "theorem2": lambda seed: check_convergence_trend(seed),
    "theorem3": lambda seed: check_error_scaling(seed),
    "identity": lambda seed: check_identity(seed),
    "gradtrick": lambda seed: check_gradient_trick(seed),
    "global": lambda seed: check_global(seed),
}


def run_checks(suite, seed=0):
    if suite not in SUITES:
        raise InvalidArgument(f"unknown suite {suite!r}; choose from {', '.join(sorted(SUITES))}")
    return CheckReport(suite, SUITES[suite](seed))
