"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line (visible even under output
capture) before asserting. Set ``GEOLORA_FULL_SCALE=1`` to also run the toy
comparison at n=5000.
"""

import os
import time

import numpy as np
import pytest

from geolora.harness import checks
from geolora.harness.config import config_from_dict, load_config
from geolora.harness.runner import run_experiment

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")
TOY_METHODS = ("geolora", "full_gd", "dlrt", "lora_ab", "adalora_lite")


@pytest.fixture
def report(capsys):
    def emit(number, passed, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
        return passed
    return emit


def cfg(name, **changes):
    c = load_config(os.path.join(CONFIGS, name))
    return c.replace(**changes) if changes else c


def timed(c):
    t0 = time.perf_counter()
    res = run_experiment(c, write=False)
    return res, time.perf_counter() - t0


def test_criterion_1_stiffness_geolora(report):
    res, secs = timed(cfg("stiffness_geolora.json"))
    s = res.summary
    sv = s["final_singular_values"][0]
    ok = (res.ok and s["iterations_to_threshold"] is not None and s["final_loss"] < 1e-6
          and s["final_ranks"] == [2] and len(sv) == 2
          and np.max(np.abs(np.array(sv) - [15.0, 2.0])) < 1e-3 and secs < 1.0)
    assert report(1, ok, f"loss={s['final_loss']:.3e} ranks={s['final_ranks']} "
                         f"sv={[round(x, 6) for x in sv]} hit={s['iterations_to_threshold']} "
                         f"time={secs:.2f}s")


def test_criterion_2_stiffness_baselines(report):
    ada, t1 = timed(cfg("stiffness_adalora.json"))
    svd, t2 = timed(cfg("stiffness_svd_lora.json"))
    a, b = ada.summary, svd.summary
    ada_ok = (ada.ok and a["iterations"] == 1000 and a["final_loss"] > 1.0
              and a["final_ranks"][0] >= 4)
    svd_ok = svd.ok and b["iterations"] == 1000 and b["final_loss"] > 1.0
    ok = ada_ok and svd_ok and t1 + t2 < 5.0
    assert report(2, ok, f"adalora status={a['status']} iters={a['iterations']} "
                         f"loss={a['final_loss']:.3e} ranks={a['final_ranks']}; "
                         f"svd_lora loss={b['final_loss']:.3e}; time={t1 + t2:.2f}s")


def toy_ordering(n=None):
    changes = {} if n is None else {"problem": {"kind": "matrix_regression", "n": n, "rank": 5,
                                                "seed": 0}}
    t0 = time.perf_counter()
    out = {}
    for m in TOY_METHODS:
        name = "toy_adalora.json" if m == "adalora_lite" else f"toy_{m}.json"
        c = cfg(name, **changes)
        assert c.loss_threshold == 1e-6 and c.learning_rate == 0.1
        out[m] = run_experiment(c, write=False).summary
    return out, time.perf_counter() - t0


def toy_verdict(s, secs, limit):
    g, f, d, lo, ad = (s[m] for m in TOY_METHODS)
    parts = {
        "geolora<=1.2*full_gd": g["iterations_to_threshold"] is not None
        and f["iterations_to_threshold"] is not None
        and g["iterations_to_threshold"] <= 1.2 * f["iterations_to_threshold"],
        "dlrt>=1.8*geolora evals": d["grad_evals_to_threshold"] is not None
        and g["grad_evals_to_threshold"] is not None
        and d["grad_evals_to_threshold"] >= 1.8 * g["grad_evals_to_threshold"],
        "adalora plateau": ad["status"] == "ok" and 1e-4 <= ad["final_loss"] <= 1e-2,
        "lora_ab>=10*geolora": lo["final_loss"] >= 10 * g["final_loss"],
        "runtime": secs < limit,
    }
    detail = (f"iters geolora={g['iterations_to_threshold']} full_gd={f['iterations_to_threshold']}; "
              f"evals dlrt={d['grad_evals_to_threshold']} geolora={g['grad_evals_to_threshold']}; "
              f"adalora={ad['final_loss']:.3e} lora_ab={lo['final_loss']:.3e} "
              f"geolora={g['final_loss']:.3e}; time={secs:.1f}s; "
              + " ".join(f"{k}={'ok' if v else 'no'}" for k, v in parts.items()))
    return all(parts.values()), detail


def test_criterion_3_toy_ordering(report):
    s, secs = toy_ordering()
    ok, detail = toy_verdict(s, secs, 30.0)
    assert report(3, ok, detail)


@pytest.mark.skipif(os.environ.get("GEOLORA_FULL_SCALE") != "1", reason="full scale is opt-in")
def test_criterion_3_toy_ordering_full_scale(report):
    s, secs = toy_ordering(5000)
    ok, detail = toy_verdict(s, secs, float("inf"))
    assert report("3 (n=5000)", ok, detail)


def run_suite(number, results):
    ok = all(r.passed for r in results)
    return ok, "; ".join(r.line() for r in results)


def test_criterion_4_orthonormality(report):
    ok, detail = run_suite(4, checks.check_orthonormality(seed=0, runs=50))
    assert report(4, ok, detail)


def test_criterion_5_descent(report):
    ok, detail = run_suite(5, checks.check_descent(seed=0))
    assert report(5, ok, detail)


def test_criterion_6_identity(report):
    ok, detail = run_suite(6, checks.check_identity(seed=0, trials=20))
    assert report(6, ok, detail)


def test_criterion_7_gradient_trick(report):
    ok, detail = run_suite(7, checks.check_gradient_trick(seed=0))
    assert report(7, ok, detail)


def test_criterion_8_error_scaling(report):
    ok, detail = run_suite(8, checks.check_error_scaling(seed=0))
    assert report(8, ok, detail)


def test_criterion_9_rank_recovery(report):
    ok, detail = run_suite(9, checks.check_rank_recovery(seed=0, n=100, target_rank=8, deadline=6))
    assert report(9, ok, detail)


def test_criterion_10_global_truncation(report):
    ok, detail = run_suite(10, checks.check_global(seed=0, seeds=10))
    assert report(10, ok, detail)
