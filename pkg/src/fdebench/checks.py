"""Self-check suites run by ``fdebench kernel-check``.

Each suite returns ``{"name", "passed", ...details}``. They are quick versions
of the test-suite oracles so an installed copy can verify itself.
"""

from __future__ import annotations

import time
from typing import Any, Callable

import numpy as np

from . import fusion, losses
from .metrics import absrel, aggregate, delta1, evaluate_triplet, fit_scale_shift
from .oracles import brute_band, brute_edt, grid_search_affine, loop_absrel, loop_delta1, sorted_quantile, sse
from .regions import boundary_band, exact_edt


def morphology_suite(seed: int = 0, n_masks: int = 40, max_size: int = 48) -> dict[str, Any]:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n_masks):
        h, w = rng.integers(1, max_size + 1, size=2)
        mask = rng.random((h, w)) < rng.uniform(0.0, 0.4)
        if not np.array_equal(exact_edt(mask), brute_edt(mask)):
            mismatches += 1
        for r in (1, 3, 10):
            if not np.array_equal(boundary_band(mask, r), brute_band(mask, r)):
                mismatches += 1
    return {"name": "morphology", "passed": mismatches == 0, "mismatches": mismatches, "cases": n_masks}


def alignment_suite(seed: int = 0, n: int = 10) -> dict[str, Any]:
    rng = np.random.default_rng(seed)
    worst_excess = 0.0
    worst_recovery = 0.0
    for _ in range(n):
        pred = rng.uniform(0.5, 5.0, size=200)
        gt = 1.7 * pred + 0.4 + rng.normal(0, 0.2, size=200)
        p = fit_scale_shift(pred[None], gt[None], np.ones((1, 200), bool))
        best, _, _ = grid_search_affine(pred, gt, (p.a, p.b), half_width=0.05, steps=21)
        fitted = sse(pred, gt, p.a, p.b)
        worst_excess = max(worst_excess, (fitted - best) / max(best, 1e-300))
        a, b = rng.uniform(0.1, 3.0), rng.uniform(-1.0, 1.0)
        q = fit_scale_shift(pred[None], (a * pred + b)[None], np.ones((1, 200), bool))
        worst_recovery = max(worst_recovery, abs(q.a - a), abs(q.b - b))
    passed = worst_excess <= 1e-9 and worst_recovery <= 1e-10
    return {"name": "alignment", "passed": passed, "worst_excess": worst_excess, "worst_recovery": worst_recovery}


def metric_suite(seed: int = 0, n: int = 5, size: int = 32) -> dict[str, Any]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    affine_ok = True
    for _ in range(n):
        gt = rng.uniform(0.5, 10.0, size=(size, size))
        pred = gt * rng.uniform(0.6, 1.5, size=(size, size))
        region = rng.random((size, size)) < 0.5
        worst = max(worst, abs(delta1(pred, gt, region) - loop_delta1(pred, gt, region)))
        worst = max(worst, abs(absrel(pred, gt, region) - loop_absrel(pred, gt, region)))
        mask = np.zeros((size, size), bool)
        mask[size // 4 : size // 2, size // 4 : 3 * size // 4] = True
        res = evaluate_triplet(2.5 * gt + 1.0, gt, mask, np.ones_like(mask))
        for m in res.regions.values():
            if m.n_pixels and (m.delta1 != 1.0 or m.absrel > 1e-12):
                affine_ok = False
    return {"name": "metrics", "passed": worst <= 1e-12 and affine_ok, "worst_abs_diff": worst, "affine_invariance": affine_ok}


def aggregation_suite(seed: int = 0, n: int = 100) -> dict[str, Any]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        xs = rng.random(int(rng.integers(1, 50))).tolist()
        st = aggregate(xs)
        for got, q in ((st.q25, 0.25), (st.median, 0.5), (st.q75, 0.75)):
            worst = max(worst, abs(got - sorted_quantile(xs, q)))
        worst = max(worst, abs(st.mean - sum(sorted(xs)) / len(xs)))
    return {"name": "aggregation", "passed": worst <= 1e-12, "worst_abs_diff": worst}


def fusion_structure_suite(seed: int = 0) -> dict[str, Any]:
    rng = np.random.default_rng(seed)
    cfg = fusion.default_check_config()
    params = fusion.init_params(cfg, seed)
    x_g = rng.normal(size=(cfg.n_tokens, cfg.c_g))
    x_p = rng.normal(size=(cfg.n_tokens, cfg.c_p))
    y, tr = fusion.mssa_forward_scale(x_g, x_p, params[0])
    route_err = float(np.max(np.abs(tr.route.sum(axis=1) - 1.0)))
    lo = np.minimum(tr.fused, x_g) - 1e-12
    hi = np.maximum(tr.fused, x_g) + 1e-12
    convex = bool(np.all((y >= lo) & (y <= hi)))
    gate_open = bool(np.all((tr.gate > 0) & (tr.gate < 1)))
    const_p = np.tile(x_p[:1], (cfg.n_tokens, 1))
    same = np.array_equal(
        fusion.mssa_forward_scale(x_g, const_p, params[0], "full")[0],
        fusion.mssa_forward_scale(x_g, const_p, params[0], "shuffled_tokens")[0],
    )
    differs = bool(
        np.max(np.abs(fusion.mssa_forward_scale(x_g, x_p, params[0], "full")[0] - fusion.mssa_forward_scale(x_g, x_p, params[0], "shuffled_tokens")[0]))
        > 0
    )
    passed = route_err < 1e-12 and convex and gate_open and same and differs
    return {
        "name": "fusion_structure",
        "passed": bool(passed),
        "router_sum_err": route_err,
        "gate_convexity": convex,
        "gate_in_open_interval": gate_open,
        "shuffle_invariant_on_constant_prompt": bool(same),
        "shuffle_changes_distinct_prompt": differs,
    }


def fusion_gradient_suite(seed: int = 0) -> dict[str, Any]:
    reports = [fusion.grad_check(fusion.default_check_config(v), seed=seed) for v in fusion.VARIANTS]
    return {"name": "fusion_gradients", "passed": all(r["passed"] for r in reports), "reports": reports}


def loss_gradient_suite(seed: int = 0) -> dict[str, Any]:
    reports = [
        losses.loss_grad_check(seed=seed, config=losses.LossConfig(disparity_space=ds)) for ds in (False, True)
    ]
    return {"name": "loss_gradients", "passed": all(r["passed"] for r in reports), "reports": reports}


SUITES: dict[str, Callable[[int], dict[str, Any]]] = {
    "morphology": morphology_suite,
    "alignment": alignment_suite,
    "metrics": metric_suite,
    "aggregation": aggregation_suite,
    "fusion_structure": fusion_structure_suite,
    "fusion_gradients": fusion_gradient_suite,
    "loss_gradients": loss_gradient_suite,
}


def run_all(seed: int = 0) -> dict[str, Any]:
    results = []
    for name, suite in SUITES.items():
        t0 = time.perf_counter()
        try:
            res = suite(seed)
        except Exception as exc:  # a crashing suite is reported as a failure
            res = {"name": name, "passed": False, "error": f"{type(exc).__name__}: {exc}"}
        res["seconds"] = round(time.perf_counter() - t0, 3)
        results.append(res)
    return {"seed": seed, "passed": all(r["passed"] for r in results), "suites": results}
