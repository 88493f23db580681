"""Run one experiment or a method comparison and write CSV/JSON outputs."""

import csv
import io
import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .. import baselines as bl
from ..errors import InvalidArgument, NumericFailure
from ..integrator import LayerStack, OptimizerOpts, stack_iteration
from ..lowrank import (TruncationPolicy, assemble_dense, make_adapter, random_orthonormal,
                       tangent_norm, zero_adapter)
from ..problems import CountingProblem, build_problem

CSV_COLUMNS = ("iter", "loss", "data_loss", "grad_norm", "proj_grad_norm", "ranks",
               "singular_values", "ortho_error", "truncation_drop", "grad_evals")


@dataclass
class IterationLog:
    iter: int
    loss: float
    data_loss: float
    grad_norm: float
    proj_grad_norm: float
    ranks: List[int]
    singular_values: List[List[float]]
    ortho_error: float
    truncation_drop: float
    grad_evals: int
    wall_time_ms: float = 0.0

    def csv_row(self):
        return [
            str(self.iter), repr(self.loss), repr(self.data_loss), repr(self.grad_norm),
            repr(self.proj_grad_norm), ";".join(str(r) for r in self.ranks),
            "|".join(";".join(repr(float(x)) for x in sv) for sv in self.singular_values),
            repr(self.ortho_error), repr(self.truncation_drop), str(self.grad_evals),
        ]


@dataclass
class RunResult:
    config: object
    logs: List[IterationLog]
    summary: dict
    failure: Optional[NumericFailure] = None
    state: object = field(default=None, repr=False)

    @property
    def ok(self):
        return self.failure is None


# ---------------------------------------------------------------------------
# per-method drivers
# ---------------------------------------------------------------------------


def _orth(a):
    q, _ = np.linalg.qr(a)
    return q


def _policy(cfg):
    return TruncationPolicy(cfg.policy_mode, cfg.tau, cfg.budget, cfg.effective_min_rank,
                            cfg.threshold_norm)


def _uses_problem_init(cfg, problem):
    has = getattr(problem, "init", None) is not None
    return cfg.init == "problem" or (cfg.init == "auto" and has)


def initial_state(cfg, problem, rng):
    """Starting parameters of ``cfg.method`` as a list with one entry per layer."""
    shapes = problem.layer_shapes
    if _uses_problem_init(cfg, problem):
        U, s, V = problem.init
        U, s, V = np.array(U), np.array(s, dtype=np.float64), np.array(V)
        if cfg.method in ("geolora", "dlrt"):
            return [make_adapter(U, s, V)]
        if cfg.method in ("svd_lora", "adalora_lite"):
            return [bl.DenseFactorAdapter(U, np.diag(s), V)]
        if cfg.method == "lora_ab":
            root = np.sqrt(s)
            return [bl.AbAdapter(U * root, V * root, 1.0)]
        return [(U * s) @ V.T]
    r = cfg.init_rank
    out = []
    # frozen weights live in the problem, so adapters carry no base of their own
    base = None
    for n, m in shapes:
        if cfg.method in ("geolora", "dlrt"):
            out.append(zero_adapter(rng, n, m, r, base))
        elif cfg.method in ("svd_lora", "adalora_lite"):
            out.append(bl.DenseFactorAdapter(random_orthonormal(rng, n, r), np.zeros((r, r)),
                                             random_orthonormal(rng, m, r), base))
        elif cfg.method == "lora_ab":
            out.append(bl.lora_init(rng, n, m, r, cfg.alpha, base))
        else:
            out.append(np.zeros((n, m)))
    return out


def _dense_increments(method, state):
    if method in ("geolora", "dlrt"):
        return [assemble_dense(a) for a in state]
    if method == "full_gd":
        return list(state)
    return [a.dense() for a in state]


def _layer_summary(method, state):
    """``(ranks, singular values, orthonormality error, tangent bases)`` per layer."""
    if method in ("geolora", "dlrt"):
        return ([a.rank for a in state], [a.s.tolist() for a in state],
                max(a.ortho_error() for a in state), [(a.U, a.V) for a in state])
    if method == "full_gd":
        svs = [np.linalg.svd(W, compute_uv=False).tolist() for W in state]
        return [min(W.shape) for W in state], svs, 0.0, [None] * len(state)
    if method == "lora_ab":
        svs = [np.linalg.svd(a.dense(), compute_uv=False)[:a.rank].tolist() for a in state]
        return [a.rank for a in state], svs, 0.0, [(_orth(a.A), _orth(a.B)) for a in state]
    svs = []
    for a in state:
        _, Ru = np.linalg.qr(a.U)
        _, Rv = np.linalg.qr(a.V)
        svs.append(np.linalg.svd(Ru @ a.S @ Rv.T, compute_uv=False).tolist())
    return ([a.rank for a in state], svs, max(a.ortho_error() for a in state),
            [(_orth(a.U), _orth(a.V)) for a in state])


def _diagnostics(cfg, problem, state):
    """Loss, gradient norms and layer summary of ``state`` (uncounted evaluation)."""
    data_loss, grads = problem.dense_gradients(_dense_increments(cfg.method, state))
    gsq = sum(float(np.sum(G * G)) for G in grads)
    if not (math.isfinite(data_loss) and math.isfinite(gsq)):
        raise NumericFailure("non-finite loss", stage="loss")
    ranks, svs, ortho, tangents = _layer_summary(cfg.method, state)
    psq = 0.0
    for G, tb in zip(grads, tangents):
        psq += float(np.sum(G * G)) if tb is None else tangent_norm(tb[0], tb[1], G) ** 2
    loss = data_loss
    if cfg.method == "adalora_lite" and cfg.gamma:
        loss = data_loss + cfg.gamma * sum(bl.orthogonality_penalty(a) for a in state)
    if not (math.isfinite(loss) and math.isfinite(gsq)):
        raise NumericFailure("non-finite loss", stage="loss")
    return loss, data_loss, math.sqrt(gsq), math.sqrt(psq), ranks, svs, ortho


def _step(cfg, problem, state, extra, it):
    """Advance ``state`` by one iteration; returns ``(state, truncation_drop)``."""
    lr = cfg.learning_rate_at(it)
    m = cfg.method
    if m == "geolora":
        opts = OptimizerOpts(lr, cfg.momentum, cfg.weight_decay)
        stack, info = stack_iteration(LayerStack(state, _policy(cfg)), problem, opts,
                                      extra.get("momentum"), diagnostics=False,
                                      parallel=cfg.parallel, iteration=it)
        extra["momentum"] = info.momentum
        return stack.layers, info.truncation_drop
    if m == "dlrt":
        return bl.dlrt_sequential_step(state, problem, lr, _policy(cfg)), float("nan")
    if m == "full_gd":
        return bl.full_gd_step(state, problem, lr), 0.0
    if m == "lora_ab":
        return bl.lora_ab_step(state, problem, lr), 0.0
    if m == "svd_lora":
        return bl.svd_lora_step(state, problem, lr), 0.0
    if m == "adalora_lite":
        new = bl.adalora_lite_step(state, problem, lr, cfg.gamma or 0.0, _policy(cfg), it - 1,
                                   cfg.truncate_every, cfg.effective_min_rank)
        return new, 0.0
    raise InvalidArgument(f"unknown method {m!r}")


def _record(cfg, problem, state, it, drop, evals, t0):
    loss, data_loss, gn, pgn, ranks, svs, ortho = _diagnostics(cfg, problem, state)
    return IterationLog(it, loss, data_loss, gn, pgn, ranks, svs, ortho, drop, evals,
                        (time.perf_counter() - t0) * 1e3)


def run_experiment(cfg, write=True, problem=None):
    """Run ``cfg`` to completion (or numeric failure) and summarise it.

    ``trajectory.csv`` and ``summary.json`` go to ``cfg.output_dir`` when set
    and ``write`` is true.
    """
    problem = problem if problem is not None else build_problem(cfg.problem)
    counted = CountingProblem(problem)
    rng = np.random.default_rng(cfg.seed)
    state = initial_state(cfg, problem, rng)
    logs = []
    extra = {}
    failure = None
    t0 = time.perf_counter()
    hit = None
    try:
        last = _record(cfg, problem, state, 0, 0.0, 0, t0)
        logs.append(last)
        for it in range(1, cfg.max_iters + 1):
            try:
                # divergence is reported through NumericFailure, not warnings
                with np.errstate(over="ignore", invalid="ignore"):
                    state, drop = _step(cfg, counted, state, extra, it)
                    last = _record(cfg, problem, state, it, drop, counted.count, t0)
            except NumericFailure as exc:
                raise exc.located(iteration=it) from None
            if hit is None and last.loss < cfg.loss_threshold:
                hit = last
            if it % cfg.log_every == 0 or it == cfg.max_iters:
                logs.append(last)
            if cfg.stop_loss is not None and last.loss < cfg.stop_loss:
                if logs[-1] is not last:
                    logs.append(last)
                break
    except NumericFailure as exc:
        failure = exc
    if hit is None and logs and logs[0].loss < cfg.loss_threshold:
        hit = logs[0]
    wall = (time.perf_counter() - t0) * 1e3
    final = logs[-1]
    summary = {
        "method": cfg.method,
        "status": "ok" if failure is None else "numeric_failure",
        "iterations": final.iter,
        "final_loss": final.loss,
        "final_data_loss": final.data_loss,
        "final_ranks": final.ranks,
        "final_singular_values": final.singular_values,
        "loss_threshold": cfg.loss_threshold,
        "iterations_to_threshold": hit.iter if hit is not None else None,
        "grad_evals_to_threshold": hit.grad_evals if hit is not None else None,
        "grad_evals": counted.count,
        "max_ortho_error": max(l.ortho_error for l in logs),
        "wall_time_ms": wall,
    }
    if failure is not None:
        summary["failure"] = {"message": str(failure), "iteration": failure.iteration,
                              "stage": failure.stage, "layer": failure.layer}
    result = RunResult(cfg, logs, summary, failure, state)
    if write and cfg.output_dir:
        write_outputs(result, cfg.output_dir)
    return result


def trajectory_csv(logs):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for log in logs:
        w.writerow(log.csv_row())
    return buf.getvalue()


def write_outputs(result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "trajectory.csv"), "w") as fh:
        fh.write(trajectory_csv(result.logs))
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


COMPARISON_COLUMNS = ("method", "iter", "grad_evals", "loss", "data_loss", "ranks")


def run_comparison(configs, out_dir=None):
    """Run several methods on one problem; returns ``(results, csv_text)``.

    The CSV is long format: one row per method and logged iteration.
    """
    configs = list(configs)
    if not configs:
        raise InvalidArgument("nothing to compare")
    key = json.dumps(configs[0].problem, sort_keys=True)
    for c in configs[1:]:
        if json.dumps(c.problem, sort_keys=True) != key:
            raise InvalidArgument("all compared configs must share one problem")
    if len(configs) == 1:
        res = run_experiment(configs[0], write=out_dir is None)
        if out_dir is not None:
            write_outputs(res, out_dir)
        return [res], trajectory_csv(res.logs)
    problem = build_problem(configs[0].problem)
    results = []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARISON_COLUMNS)
    for c in configs:
        res = run_experiment(c, write=False, problem=problem)
        results.append(res)
        for log in res.logs:
            w.writerow([c.method, log.iter, log.grad_evals, repr(log.loss), repr(log.data_loss),
                        ";".join(str(r) for r in log.ranks)])
        if out_dir is not None:
            write_outputs(res, os.path.join(out_dir, f"{len(results) - 1:02d}_{c.method}"))
    text = buf.getvalue()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "comparison.csv"), "w") as fh:
            fh.write(text)
        with open(os.path.join(out_dir, "comparison_summary.json"), "w") as fh:
            json.dump([r.summary for r in results], fh, indent=2, sort_keys=True)
            fh.write("\n")
    return results, text
