"""NumPy reference of the gated multi-scale prompt/geometry token fusion block.

Per scale ``s`` and per token::

    P  = X_p @ W_proj                      prompt tokens projected to C_g
    Z  = [X_g | P]                         (N, 2 C_g)
    R  = softmax(Z @ W_router)             (N, E) dense routing weights
    F  = sum_e R[:, e] * expert_e(Z)       expert_e = Linear -> x*Phi(x) -> Linear
    G  = sigmoid(F @ w_gate + gate_bias)   (N, 1), broadcast over channels
    Y  = G * F + (1 - G) * X_g

Everything is float64 so that central differences can verify the hand-written
backward pass. Ablation variants:

``shuffled_tokens``  prompt rows are permuted by a fixed seeded permutation
``shared_scale``     one parameter record reused at every scale
``single_mlp``       one expert, no router
``no_gate``          ``Y = F``
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from scipy.special import expit, ndtr

from .oracles import central_difference, relative_error

VARIANTS = ("full", "shuffled_tokens", "shared_scale", "single_mlp", "no_gate")

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class MSSAConfig:
    n_tokens: int = 9
    c_g: int = 8
    c_p: int = 4
    c_h: int | None = None  # expert hidden width; defaults to c_g
    n_experts: int = 4
    n_scales: int = 4
    variant: str = "full"
    shuffle_seed: int = 0
    gate_bias: float = 0.0
    init_std: float = 0.02
    grid_h: int | None = None
    grid_w: int | None = None

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.c_h is None:
            self.c_h = self.c_g
        if min(self.n_tokens, self.c_g, self.c_p, self.c_h, self.n_experts, self.n_scales) < 1:
            raise ValueError("all dimensions must be positive")
        if self.grid_h is not None and self.grid_w is not None and self.grid_h * self.grid_w != self.n_tokens:
            raise ValueError(f"grid {self.grid_h}x{self.grid_w} does not hold {self.n_tokens} tokens")

    def to_json(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class Expert:
    w1: np.ndarray  # (2 C_g, C_h)
    b1: np.ndarray  # (C_h,)
    w2: np.ndarray  # (C_h, C_g)
    b2: np.ndarray  # (C_g,)


@dataclass
class MSSAScaleParams:
    w_proj: np.ndarray  # (C_p, C_g)
    router_w: np.ndarray  # (2 C_g, E); unused by single_mlp
    experts: list[Expert]
    w_gate: np.ndarray  # (C_g, 1)
    gate_bias: np.ndarray = field(default_factory=lambda: np.zeros(()))  # 0-d, perturbable in place

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [("w_proj", self.w_proj), ("router_w", self.router_w)]
        for i, e in enumerate(self.experts):
            out += [(f"expert{i}.w1", e.w1), (f"expert{i}.b1", e.b1), (f"expert{i}.w2", e.w2), (f"expert{i}.b2", e.b2)]
        out += [("w_gate", self.w_gate), ("gate_bias", self.gate_bias)]
        return out

    def zeros_like(self) -> "MSSAScaleParams":
        return MSSAScaleParams(
            np.zeros_like(self.w_proj),
            np.zeros_like(self.router_w),
            [Expert(*(np.zeros_like(a) for a in (e.w1, e.b1, e.w2, e.b2))) for e in self.experts],
            np.zeros_like(self.w_gate),
            np.zeros(()),
        )


def _normal(rng: np.random.Generator, std: float, shape) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def init_params(config: MSSAConfig, seed: int = 0) -> list[MSSAScaleParams]:
    """Seeded N(0, std^2) weights, zero biases.

    ``shared_scale`` returns the same record at every scale; ``single_mlp``
    allocates exactly one expert.
    """
    rng = np.random.default_rng(seed)
    c_g, c_p, c_h = config.c_g, config.c_p, config.c_h
    n_experts = 1 if config.variant == "single_mlp" else config.n_experts

    def one() -> MSSAScaleParams:
        std = config.init_std
        w_proj = _normal(rng, std, (c_p, c_g))
        router_w = _normal(rng, std, (2 * c_g, n_experts))
        experts = [
            Expert(_normal(rng, std, (2 * c_g, c_h)), np.zeros(c_h), _normal(rng, std, (c_h, c_g)), np.zeros(c_g))
            for _ in range(n_experts)
        ]
        w_gate = _normal(rng, std, (c_g, 1))
        return MSSAScaleParams(w_proj, router_w, experts, w_gate, np.array(float(config.gate_bias)))

    if config.variant == "shared_scale":
        shared = one()
        return [shared] * config.n_scales
    return [one() for _ in range(config.n_scales)]


def shuffle_permutation(n_tokens: int, seed: int) -> np.ndarray:
    """Fixed token permutation for the shuffled-correspondence ablation (never the identity for N > 1)."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_tokens)
    while n_tokens > 1 and np.array_equal(perm, np.arange(n_tokens)):
        perm = rng.permutation(n_tokens)
    return perm


def gelu(x: np.ndarray) -> np.ndarray:
    return x * ndtr(x)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class ScaleTrace:
    variant: str
    x_g: np.ndarray
    xp_used: np.ndarray
    perm: np.ndarray | None
    z: np.ndarray
    route: np.ndarray | None  # (N, E) softmax weights
    hidden: list[np.ndarray]  # pre-activation per expert
    act: list[np.ndarray]
    expert_out: list[np.ndarray]
    fused: np.ndarray  # F
    gate: np.ndarray | None  # (N, 1)
    params: MSSAScaleParams


def _check_tokens(x_g: np.ndarray, x_p: np.ndarray, params: MSSAScaleParams) -> None:
    if x_g.ndim != 2 or x_p.ndim != 2:
        raise ValueError("token grids must be (N, C) matrices")
    if x_g.shape[0] != x_p.shape[0]:
        raise ValueError(f"token count mismatch: geometry {x_g.shape[0]} vs prompt {x_p.shape[0]}")
    c_p, c_g = params.w_proj.shape
    if x_g.shape[1] != c_g or x_p.shape[1] != c_p:
        raise ValueError(f"channel mismatch: expected C_g={c_g}, C_p={c_p}, got {x_g.shape[1]}, {x_p.shape[1]}")


def mssa_forward_scale(x_g, x_p, params: MSSAScaleParams, variant: str = "full", shuffle_seed: int = 0):
    """Fuse prompt tokens into one scale of geometry tokens; returns ``(Y, trace)``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    x_g = np.asarray(x_g, dtype=np.float64)
    x_p = np.asarray(x_p, dtype=np.float64)
    _check_tokens(x_g, x_p, params)

    perm = None
    xp_used = x_p
    if variant == "shuffled_tokens":
        perm = shuffle_permutation(x_p.shape[0], shuffle_seed)
        xp_used = x_p[perm]
    z = np.concatenate([x_g, xp_used @ params.w_proj], axis=1)

    hidden, act, outs = [], [], []
    experts = params.experts[:1] if variant == "single_mlp" else params.experts
    for e in experts:
        h = z @ e.w1 + e.b1
        a = gelu(h)
        hidden.append(h)
        act.append(a)
        outs.append(a @ e.w2 + e.b2)

    if variant == "single_mlp":
        route = None
        fused = outs[0]
    else:
        route = softmax(z @ params.router_w)
        fused = np.zeros_like(x_g)
        for i, o in enumerate(outs):
            fused += route[:, i : i + 1] * o

    if variant == "no_gate":
        gate = None
        y = fused.copy()
    else:
        gate = expit(fused @ params.w_gate + params.gate_bias)
        y = gate * fused + (1.0 - gate) * x_g

    trace = ScaleTrace(variant, x_g, xp_used, perm, z, route, hidden, act, outs, fused, gate, params)
    return y, trace


def mssa_backward_scale(trace: ScaleTrace, upstream, grads: MSSAScaleParams | None = None):
    """Reverse-mode pass for one scale.

    Returns ``(param_grads, d_x_g, d_x_p)``. Parameter gradients are added into
    ``grads`` when given (used when several scales share one record).
    """
    dy = np.asarray(upstream, dtype=np.float64)
    if dy.shape != trace.fused.shape:
        raise ValueError(f"upstream gradient shape {dy.shape} != output shape {trace.fused.shape}")
    p = trace.params
    if grads is None:
        grads = p.zeros_like()
    c_g = trace.x_g.shape[1]

    if trace.gate is None:
        d_fused = dy.copy()
        d_xg = np.zeros_like(trace.x_g)
    else:
        g = trace.gate
        d_fused = g * dy
        d_xg = (1.0 - g) * dy
        d_gate = np.sum((trace.fused - trace.x_g) * dy, axis=1, keepdims=True)
        d_logit = d_gate * g * (1.0 - g)
        grads.w_gate += trace.fused.T @ d_logit
        grads.gate_bias += d_logit.sum()
        d_fused += d_logit @ p.w_gate.T

    if trace.route is None:
        d_outs = [d_fused]
        d_z = np.zeros_like(trace.z)
    else:
        r = trace.route
        d_outs = [r[:, i : i + 1] * d_fused for i in range(len(trace.expert_out))]
        d_r = np.stack([np.sum(d_fused * o, axis=1) for o in trace.expert_out], axis=1)
        d_router_logits = r * (d_r - np.sum(r * d_r, axis=1, keepdims=True))
        grads.router_w += trace.z.T @ d_router_logits
        d_z = d_router_logits @ p.router_w.T

    for i, d_o in enumerate(d_outs):
        e, ge = p.experts[i], grads.experts[i]
        ge.w2 += trace.act[i].T @ d_o
        ge.b2 += d_o.sum(axis=0)
        d_h = (d_o @ e.w2.T) * gelu_grad(trace.hidden[i])
        ge.w1 += trace.z.T @ d_h
        ge.b1 += d_h.sum(axis=0)
        d_z += d_h @ e.w1.T

    d_xg += d_z[:, :c_g]
    d_proj = d_z[:, c_g:]
    grads.w_proj += trace.xp_used.T @ d_proj
    d_xp_used = d_proj @ p.w_proj.T
    if trace.perm is None:
        d_xp = d_xp_used
    else:
        d_xp = np.empty_like(d_xp_used)
        d_xp[trace.perm] = d_xp_used
    return grads, d_xg, d_xp


def mssa_forward(x_g_scales, x_p, params: list[MSSAScaleParams], config: MSSAConfig):
    """Apply the block independently at every scale; returns ``(outputs, traces)``."""
    if len(x_g_scales) != config.n_scales or len(params) != config.n_scales:
        raise ValueError(f"expected {config.n_scales} scales, got {len(x_g_scales)} inputs / {len(params)} params")
    outputs, traces = [], []
    for x_g, p in zip(x_g_scales, params):
        y, tr = mssa_forward_scale(x_g, x_p, p, config.variant, config.shuffle_seed)
        outputs.append(y)
        traces.append(tr)
    return outputs, traces


def mssa_backward(traces: list[ScaleTrace], upstream):
    """Backward over all scales.

    Returns ``(param_grads, d_x_g_scales, d_x_p)`` where ``param_grads[s]`` is the
    gradient of the record used at scale ``s``; scales sharing a record share
    one accumulated gradient object.
    """
    if len(upstream) != len(traces):
        raise ValueError(f"{len(upstream)} upstream grads for {len(traces)} scales")
    by_record: dict[int, MSSAScaleParams] = {}
    param_grads, d_xg_scales = [], []
    d_xp = None
    for tr, up in zip(traces, upstream):
        key = id(tr.params)
        acc = by_record.get(key)
        acc, d_xg, d_xp_s = mssa_backward_scale(tr, up, acc)
        by_record[key] = acc
        param_grads.append(acc)
        d_xg_scales.append(d_xg)
        d_xp = d_xp_s if d_xp is None else d_xp + d_xp_s
    return param_grads, d_xg_scales, d_xp


def _unique_records(params: list[MSSAScaleParams], grads: list[MSSAScaleParams]):
    seen = set()
    for s, (p, g) in enumerate(zip(params, grads)):
        if id(p) in seen:
            continue
        seen.add(id(p))
        yield s, p, g


def grad_check(
    config: MSSAConfig,
    seed: int = 0,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    input_samples: int = 16,
) -> dict[str, Any]:
    """Compare the analytic backward against central differences.

    The scalar objective is ``sum_s <U_s, Y_s>`` with fixed random ``U_s``.
    Every parameter scalar is checked; ``input_samples`` random entries of
    each input grid are checked. Relative error is
    ``|g - fd| / max(|g|, |fd|, 1e-8)``.
    """
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    n = config.n_tokens
    x_gs = [rng.normal(size=(n, config.c_g)) for _ in range(config.n_scales)]
    x_p = rng.normal(size=(n, config.c_p))
    ups = [rng.normal(size=(n, config.c_g)) for _ in range(config.n_scales)]

    def objective() -> float:
        ys, _ = mssa_forward(x_gs, x_p, params, config)
        return float(sum(np.sum(u * y) for u, y in zip(ups, ys)))

    _, traces = mssa_forward(x_gs, x_p, params, config)
    p_grads, d_xgs, d_xp = mssa_backward(traces, ups)

    groups: dict[str, float] = {}
    n_checked = 0

    def record(group: str, analytic: float, numeric: float) -> None:
        nonlocal n_checked
        err = relative_error(analytic, numeric)
        groups[group] = max(groups.get(group, 0.0), err)
        n_checked += 1

    for s, p, g in _unique_records(params, p_grads):
        for (name, arr), (_, garr) in zip(p.named_arrays(), g.named_arrays()):
            group = name.split(".", 1)[-1] if name.startswith("expert") else name
            for idx in np.ndindex(arr.shape):
                record(f"params.{group}", float(garr[idx]), central_difference(objective, arr, idx, step))

    for s, x in enumerate(x_gs):
        flat = rng.choice(x.size, size=min(input_samples, x.size), replace=False)
        for k in flat:
            idx = np.unravel_index(k, x.shape)
            record("inputs.x_g", float(d_xgs[s][idx]), central_difference(objective, x, idx, step))
    flat = rng.choice(x_p.size, size=min(input_samples, x_p.size), replace=False)
    for k in flat:
        idx = np.unravel_index(k, x_p.shape)
        record("inputs.x_p", float(d_xp[idx]), central_difference(objective, x_p, idx, step))

    worst = max(groups.values()) if groups else 0.0
    return {
        "variant": config.variant,
        "config": config.to_json(),
        "seed": seed,
        "step": step,
        "tolerance": tolerance,
        "n_checked": n_checked,
        "max_rel_err": groups,
        "worst_rel_err": worst,
        "passed": bool(worst < tolerance),
    }


def default_check_config(variant: str = "full") -> MSSAConfig:
    # weights at std 0.3 keep every gradient entry well above the central-difference
    # round-off floor (~eps * |objective| / step); at 0.02 some entries fall below it
    return MSSAConfig(
        n_tokens=9, c_g=8, c_p=4, c_h=8, n_experts=4, n_scales=2, variant=variant, grid_h=3, grid_w=3, init_std=0.3
    )


def save_params(directory: str | Path, params: list[MSSAScaleParams], config: MSSAConfig) -> None:
    """Write every matrix as an ``.npy`` (float64) file plus ``params.json`` describing shapes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index: dict[str, Any] = {"config": config.to_json(), "scales": []}
    seen: dict[int, int] = {}
    for s, p in enumerate(params):
        if id(p) in seen:
            index["scales"].append({"shared_with": seen[id(p)]})
            continue
        seen[id(p)] = s
        arrays = {}
        for name, arr in p.named_arrays():
            fname = f"scale{s}.{name}.npy"
            np.save(directory / fname, np.asarray(arr, dtype="<f8"), allow_pickle=False)
            arrays[name] = {"file": fname, "shape": list(arr.shape)}
        index["scales"].append({"n_experts": p.n_experts, "arrays": arrays})
    (directory / "params.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def load_params(directory: str | Path) -> tuple[list[MSSAScaleParams], MSSAConfig]:
    directory = Path(directory)
    index = json.loads((directory / "params.json").read_text())
    config = MSSAConfig(**index["config"])
    params: list[MSSAScaleParams] = []
    for entry in index["scales"]:
        if "shared_with" in entry:
            params.append(params[entry["shared_with"]])
            continue
        arrays = {name: np.load(directory / meta["file"]) for name, meta in entry["arrays"].items()}
        experts = [
            Expert(arrays[f"expert{i}.w1"], arrays[f"expert{i}.b1"], arrays[f"expert{i}.w2"], arrays[f"expert{i}.b2"])
            for i in range(entry["n_experts"])
        ]
        params.append(MSSAScaleParams(arrays["w_proj"], arrays["router_w"], experts, arrays["w_gate"], arrays["gate_bias"]))
    return params, config


def with_variant(config: MSSAConfig, variant: str) -> MSSAConfig:
    return replace(config, variant=variant)
