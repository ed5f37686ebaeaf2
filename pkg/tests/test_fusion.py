import math

import numpy as np
import pytest

from fdebench import fusion
from fdebench.fusion import (
    VARIANTS,
    Expert,
    MSSAConfig,
    MSSAScaleParams,
    default_check_config,
    grad_check,
    init_params,
    load_params,
    mssa_backward,
    mssa_backward_scale,
    mssa_forward,
    mssa_forward_scale,
    save_params,
    shuffle_permutation,
)


def _scalar_forward(xg, xp, P):
    """Token-by-token reference with python floats and math.erf."""

    def gelu(v):
        return v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0)))

    def matvec(vec, mat):
        return [sum(vec[i] * mat[i][j] for i in range(len(vec))) for j in range(len(mat[0]))]

    out = []
    for g, p in zip(xg, xp):
        z = list(g) + matvec(p, P["w_proj"])
        logits = matvec(z, P["router_w"])
        m = max(logits)
        ex = [math.exp(v - m) for v in logits]
        route = [v / sum(ex) for v in ex]
        f = [0.0] * len(g)
        for k, e in enumerate(P["experts"]):
            h = [hv + bv for hv, bv in zip(matvec(z, e["w1"]), e["b1"])]
            a = [gelu(v) for v in h]
            o = [ov + bv for ov, bv in zip(matvec(a, e["w2"]), e["b2"])]
            f = [fv + route[k] * ov for fv, ov in zip(f, o)]
        s = sum(fv * w[0] for fv, w in zip(f, P["w_gate"])) + P["gate_bias"]
        gate = 1.0 / (1.0 + math.exp(-s))
        out.append([gate * fv + (1 - gate) * gv for fv, gv in zip(f, g)])
    return out


def _as_params(P):
    arr = np.array
    return MSSAScaleParams(
        arr(P["w_proj"], float),
        arr(P["router_w"], float),
        [Expert(arr(e["w1"], float), arr(e["b1"], float), arr(e["w2"], float), arr(e["b2"], float)) for e in P["experts"]],
        arr(P["w_gate"], float),
        arr(P["gate_bias"], float),
    )


def test_forward_matches_scalar_reference():
    P = {
        "w_proj": [[0.7, -0.4]],
        "router_w": [[0.3, -0.2], [0.1, 0.5], [-0.6, 0.2], [0.4, 0.4]],
        "experts": [
            {"w1": [[0.2, -0.3], [0.5, 0.1], [-0.4, 0.6], [0.3, 0.2]], "b1": [0.1, -0.2],
             "w2": [[0.6, -0.1], [0.2, 0.8]], "b2": [0.05, -0.05]},
            {"w1": [[-0.5, 0.4], [0.3, -0.2], [0.1, 0.7], [-0.3, 0.1]], "b1": [0.0, 0.3],
             "w2": [[-0.2, 0.5], [0.9, -0.4]], "b2": [0.1, 0.2]},
        ],
        "w_gate": [[0.8], [-0.6]],
        "gate_bias": 0.25,
    }
    xg, xp = [[1.2, -0.7]], [[0.9]]
    y, _ = mssa_forward_scale(np.array(xg), np.array(xp), _as_params(P))
    assert np.max(np.abs(y - np.array(_scalar_forward(xg, xp, P)))) <= 1e-12


def _random_setup(seed=0, **kw):
    cfg = MSSAConfig(**{"n_tokens": 6, "c_g": 5, "c_p": 3, "c_h": 7, "n_experts": 3, "n_scales": 2, "init_std": 0.4, **kw})
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    x_gs = [rng.normal(size=(cfg.n_tokens, cfg.c_g)) for _ in range(cfg.n_scales)]
    x_p = rng.normal(size=(cfg.n_tokens, cfg.c_p))
    return cfg, params, x_gs, x_p


def test_router_and_gate_structure():
    _, params, x_gs, x_p = _random_setup()
    y, tr = mssa_forward_scale(x_gs[0], x_p, params[0])
    assert np.allclose(tr.route.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((tr.gate > 0) & (tr.gate < 1))
    lo, hi = np.minimum(tr.fused, x_gs[0]), np.maximum(tr.fused, x_gs[0])
    assert np.all((y >= lo - 1e-12) & (y <= hi + 1e-12))


def test_zero_gate_weights_give_half_gate():
    _, params, x_gs, x_p = _random_setup()
    p = params[0]
    p.w_gate[:] = 0.0
    y, tr = mssa_forward_scale(x_gs[0], x_p, p)
    assert np.all(tr.gate == 0.5)
    assert np.allclose(y, 0.5 * (tr.fused + x_gs[0]), atol=1e-15)


def test_identical_experts_make_router_irrelevant():
    _, params, x_gs, x_p = _random_setup()
    p = params[0]
    e0 = p.experts[0]
    p.experts = [Expert(e0.w1, e0.b1, e0.w2, e0.b2) for _ in p.experts]
    y1, tr1 = mssa_forward_scale(x_gs[0], x_p, p)
    p.router_w = np.random.default_rng(9).normal(size=p.router_w.shape) * 5
    y2, _ = mssa_forward_scale(x_gs[0], x_p, p)
    assert np.allclose(tr1.fused, tr1.expert_out[0], atol=1e-12)
    assert np.allclose(y1, y2, atol=1e-12)


def test_shuffle_variant():
    cfg, params, x_gs, x_p = _random_setup()
    perm = shuffle_permutation(cfg.n_tokens, 0)
    assert not np.array_equal(perm, np.arange(cfg.n_tokens))
    assert np.array_equal(np.sort(perm), np.arange(cfg.n_tokens))
    const = np.tile(x_p[:1], (cfg.n_tokens, 1))
    a = mssa_forward_scale(x_gs[0], const, params[0], "full")[0]
    b = mssa_forward_scale(x_gs[0], const, params[0], "shuffled_tokens")[0]
    assert np.array_equal(a, b)
    c = mssa_forward_scale(x_gs[0], x_p, params[0], "shuffled_tokens")[0]
    d = mssa_forward_scale(x_gs[0], x_p[perm], params[0], "full")[0]
    assert np.array_equal(c, d)
    assert np.max(np.abs(c - mssa_forward_scale(x_gs[0], x_p, params[0], "full")[0])) > 0


def test_shared_scale_reuses_parameters():
    cfg, params, x_gs, x_p = _random_setup(variant="shared_scale", n_scales=3)
    assert all(p is params[0] for p in params)
    ys, _ = mssa_forward([x_gs[0]] * 3, x_p, params, cfg)
    assert np.array_equal(ys[0], ys[1]) and np.array_equal(ys[1], ys[2])
    full = init_params(MSSAConfig(n_tokens=6, c_g=5, c_p=3, n_scales=3, init_std=0.4), 0)
    assert full[0] is not full[1]


def test_single_mlp_equals_one_expert_full():
    cfg, params, x_gs, x_p = _random_setup(variant="single_mlp")
    assert params[0].n_experts == 1
    y_single, tr = mssa_forward_scale(x_gs[0], x_p, params[0], "single_mlp")
    y_full, _ = mssa_forward_scale(x_gs[0], x_p, params[0], "full")
    assert tr.route is None
    assert np.allclose(y_single, y_full, atol=1e-15)


def test_no_gate_returns_fused():
    _, params, x_gs, x_p = _random_setup(variant="no_gate")
    y, tr = mssa_forward_scale(x_gs[0], x_p, params[0], "no_gate")
    assert tr.gate is None and np.array_equal(y, tr.fused)
    grads, _, _ = mssa_backward_scale(tr, np.ones_like(y))
    assert np.all(grads.w_gate == 0) and float(grads.gate_bias) == 0.0


def test_zero_upstream_gives_zero_gradients():
    _, params, x_gs, x_p = _random_setup()
    _, tr = mssa_forward_scale(x_gs[0], x_p, params[0])
    grads, d_xg, d_xp = mssa_backward_scale(tr, np.zeros_like(x_gs[0]))
    assert all(np.all(a == 0) for _, a in grads.named_arrays())
    assert np.all(d_xg == 0) and np.all(d_xp == 0)


def test_backward_accumulates_shared_record():
    cfg, params, x_gs, x_p = _random_setup(variant="shared_scale")
    _, traces = mssa_forward(x_gs, x_p, params, cfg)
    ups = [np.ones_like(x) for x in x_gs]
    grads, _, _ = mssa_backward(traces, ups)
    assert grads[0] is grads[1]
    g0, _, _ = mssa_backward_scale(traces[0], ups[0])
    g1, _, _ = mssa_backward_scale(traces[1], ups[1])
    assert np.allclose(grads[0].w_proj, g0.w_proj + g1.w_proj, atol=1e-14)


@pytest.mark.parametrize("variant", VARIANTS)
def test_grad_check_every_variant(variant):
    report = grad_check(default_check_config(variant), seed=0)
    assert report["passed"], report["max_rel_err"]
    assert report["worst_rel_err"] < 1e-4
    assert set(report["max_rel_err"]) >= {"params.w_proj", "inputs.x_g", "inputs.x_p"}


def test_grad_check_zero_tolerance_fails_and_is_deterministic():
    cfg = default_check_config("full")
    a = grad_check(cfg, seed=3, tolerance=0.0)
    assert not a["passed"]
    assert grad_check(cfg, seed=3, tolerance=0.0) == a


def test_init_is_seeded():
    cfg = MSSAConfig()
    a, b, c = init_params(cfg, 1), init_params(cfg, 1), init_params(cfg, 2)
    assert np.array_equal(a[0].router_w, b[0].router_w)
    assert not np.array_equal(a[0].router_w, c[0].router_w)
    assert float(np.std(init_params(MSSAConfig(c_g=64, c_p=64), 0)[0].w_proj)) == pytest.approx(0.02, rel=0.1)


@pytest.mark.parametrize("variant", ["full", "shared_scale", "single_mlp"])
def test_save_load_roundtrip(tmp_path, variant):
    cfg, params, x_gs, x_p = _random_setup(variant=variant)
    save_params(tmp_path, params, cfg)
    loaded, cfg2 = load_params(tmp_path)
    assert cfg2 == cfg
    if variant == "shared_scale":
        assert loaded[0] is loaded[1]
    for p, q in zip(params, loaded):
        for (n1, a1), (n2, a2) in zip(p.named_arrays(), q.named_arrays()):
            assert n1 == n2 and a1.dtype == a2.dtype == np.float64 and np.array_equal(a1, a2)
    assert np.array_equal(mssa_forward(x_gs, x_p, params, cfg)[0][1], mssa_forward(x_gs, x_p, loaded, cfg)[0][1])


def test_dimension_errors():
    cfg, params, x_gs, x_p = _random_setup()
    with pytest.raises(ValueError, match="token count"):
        mssa_forward_scale(x_gs[0], x_p[:-1], params[0])
    with pytest.raises(ValueError, match="channel"):
        mssa_forward_scale(x_gs[0][:, :-1], x_p, params[0])
    with pytest.raises(ValueError, match="scales"):
        mssa_forward(x_gs[:1], x_p, params, cfg)
    with pytest.raises(ValueError, match="grid"):
        MSSAConfig(n_tokens=10, grid_h=3, grid_w=3)
    with pytest.raises(ValueError, match="variant"):
        MSSAConfig(variant="bogus")
    with pytest.raises(ValueError):
        mssa_forward_scale(x_gs[0], x_p, params[0], "bogus")
