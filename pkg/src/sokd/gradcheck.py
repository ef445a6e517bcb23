"""Randomized gradient cross-checks.

Builds seeded random graphs that jointly cover every differentiable
primitive plus the relaxed-Bernoulli gate and the soft-mixture path,
freezes all sampling noise, and compares reverse-mode gradients against
central finite differences. The straight-through magnitude parameters
are excluded here by design: their backward deliberately disagrees with
the true derivative and is checked separately, bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dafa import AugPolicy, OpChoice, SubPolicy, build_search_graph, draw_mix_noise
from .oracle import finite_diff_grad
from .tensor import Rng, Tensor


@dataclass
class GradCheckRow:
    graph: int
    template: str
    param: str
    rel_err: float
    passed: bool


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float((np.abs(a - b) / scale).max())


def _compare(build, init: dict[str, Tensor], eps: float) -> dict[str, float]:
    """Autodiff vs central differences for every parameter of one graph."""
    tape = ad.Tape()
    nodes = {name: tape.param(value) for name, value in init.items()}
    grads = ad.backward(build(tape, nodes))
    errs = {}
    for name, value in init.items():
        def f(t, _name=name):
            tape2 = ad.Tape()
            nodes2 = {n: tape2.param(t if n == _name else v) for n, v in init.items()}
            return build(tape2, nodes2).tensor.item()

        fd = finite_diff_grad(f, value, eps)
        errs[name] = _rel_err(grads[nodes[name]].data, fd.data)
    return errs


def _away_from_zero(rng: Rng, shape, margin: float = 0.15) -> Tensor:
    vals = rng.uniform(shape) * (2.0 - margin) + margin
    signs = np.where(rng.uniform(shape) < 0.5, -1.0, 1.0)
    return Tensor(vals * signs)


def _conv_classifier(rng: Rng):
    x = Tensor(rng.normal((2, 2, 6, 6)).astype(np.float32) * 0.7)
    labels = rng.integers(0, 3, 2)
    init = {
        "conv1.w": Tensor(rng.normal((3, 2, 3, 3)).astype(np.float32) * 0.3),
        "conv1.b": Tensor(rng.normal(3).astype(np.float32) * 0.1),
        "conv2.w": Tensor(rng.normal((2, 3, 3, 3)).astype(np.float32) * 0.3),
        "conv2.b": Tensor(rng.normal(2).astype(np.float32) * 0.1),
        "dense.w": Tensor(rng.normal((2, 3)).astype(np.float32) * 0.4),
        "dense.b": Tensor(rng.normal(3).astype(np.float32) * 0.1),
    }

    def build(tape, p):
        h = ad.bias_add(ad.conv2d(tape.constant(x), p["conv1.w"], "same"), p["conv1.b"])
        h = ad.sigmoid(h)
        h = ad.avg_pool2d(h)
        h = ad.bias_add(ad.conv2d(h, p["conv2.w"], "valid"), p["conv2.b"])
        flat = ad.reshape(h, (2, h.dims[1] * h.dims[2] * h.dims[3]))
        logits = ad.bias_add(ad.matmul(flat, p["dense.w"]), p["dense.b"])
        return ad.cross_entropy(logits, labels)

    return "conv-classifier", init, build


def _elementwise_chain(rng: Rng):
    init = {
        "x": _away_from_zero(rng, (3, 4)),
        "y": Tensor(rng.normal((3, 4)).astype(np.float32) * 0.6),
        "s": Tensor(rng.normal(1).astype(np.float32) * 0.5),
    }
    c = Tensor(rng.normal((3, 4)).astype(np.float32) * 0.4)

    def build(tape, p):
        z = ad.mul(ad.add(p["x"], p["y"]), ad.sub(tape.constant(c), ad.lin(p["y"], 0.7, 0.1)))
        z = ad.exp(ad.clip(z, -2.0, 2.0))
        z = ad.log(ad.lin(ad.sigmoid(z), 1.0, 0.5))
        gated = ad.mul(z, p["s"])
        rectified = ad.relu(p["x"])
        return ad.add(ad.mean_all(gated), ad.lin(ad.sum_all(rectified), 0.05, 0.0))

    return "elementwise-chain", init, build


def _softmax_pick(rng: Rng):
    init = {"v": Tensor(rng.normal(6).astype(np.float32))}
    target = Tensor((rng.uniform(6) / 6.0).astype(np.float32))
    tau = 0.4 + float(rng.uniform()) * 1.2
    k = int(rng.integers(0, 6))

    def build(tape, p):
        w = ad.softmax_temp(p["v"], tau)
        d = ad.sub(w, tape.constant(target))
        return ad.add(ad.mean_all(ad.mul(d, d)), ad.mul(ad.pick(w, k), ad.pick(w, (k + 2) % 6)))

    return "softmax-pick", init, build


def _policy_graph(rng: Rng, name: str):
    """Relaxed-gate and mixture graphs with frozen draws.

    Noise ops are kept first in their chains so the frozen noise-scale
    statistic sees only the constant input; every remaining path is
    exactly differentiable and must match finite differences.
    """
    dims = (2, 3, 4)
    f_t = Tensor(rng.normal(dims).astype(np.float32))
    target = Tensor(rng.normal(dims).astype(np.float32))
    betas = 0.3 + rng.uniform(4) * 0.4
    ms = 0.2 + rng.uniform(4) * 0.6
    alpha = rng.normal(3)

    if name == "relaxed-bernoulli":
        layout = [[("additive_gaussian_noise", 0), ("uniform_scale", 1)]]
    else:
        layout = [[("identity", None)],
                  [("additive_gaussian_noise", 0), ("uniform_scale", 1)],
                  [("feature_mask", 2)]]

    def make_policy(alpha_arr, beta_arr):
        subs = [SubPolicy([OpChoice(kind, 0.5 if slot is None else float(beta_arr[slot]),
                                    0.0 if slot is None else float(ms[slot]))
                           for kind, slot in ops])
                for ops in layout]
        return AugPolicy(np.asarray(alpha_arr[: len(subs)], dtype=np.float64), subs,
                         tau=0.8, lam=0.5, k_max=2)

    noise = draw_mix_noise(make_policy(alpha, betas), dims, rng.child("noise"))

    def loss_value(alpha_arr, beta_arr) -> float:
        tape = ad.Tape()
        node, _ = build_search_graph(tape, make_policy(alpha_arr, beta_arr), f_t, noise, "soft")
        d = ad.sub(node, tape.constant(target))
        return ad.lin(ad.mean_all(ad.mul(d, d)), 0.5, 0.0).tensor.item()

    tape = ad.Tape()
    node, params = build_search_graph(tape, make_policy(alpha, betas), f_t, noise, "soft")
    d = ad.sub(node, tape.constant(target))
    grads = ad.backward(ad.lin(ad.mean_all(ad.mul(d, d)), 0.5, 0.0))

    eps = 1e-3
    errs = {}
    n_alpha = len(layout)
    fd_alpha = finite_diff_grad(
        lambda t: loss_value(np.concatenate([t.data, alpha[n_alpha:]]), betas),
        Tensor(alpha[:n_alpha]), eps)
    errs["alpha"] = _rel_err(grads[params["alpha"]].data, fd_alpha.data)
    slot_of = {(i, j): slot for i, ops in enumerate(layout)
               for j, (_, slot) in enumerate(ops) if slot is not None}
    for key in (k for k in params if isinstance(k, tuple) and k[0] == "beta"):
        slot = slot_of[(key[1], key[2])]

        def f_beta(t, _slot=slot):
            bumped = betas.copy()
            bumped[_slot] = float(t.data[0])
            return loss_value(alpha, bumped)

        fd = finite_diff_grad(f_beta, Tensor([betas[slot]]), eps)
        errs[f"beta{slot}"] = _rel_err(grads[params[key]].data, fd.data)
    return name, errs


_SIMPLE_TEMPLATES = (_conv_classifier, _elementwise_chain, _softmax_pick)


def run_gradient_suite(n_graphs: int = 20, eps: float = 1e-3,
                       tol: float = 1e-3) -> list[GradCheckRow]:
    """n_graphs seeded random graphs; every row must pass at tolerance tol."""
    rows: list[GradCheckRow] = []
    for seed in range(n_graphs):
        rng = Rng(1000 + seed)
        slot = seed % 5
        if slot < 3:
            name, init, build = _SIMPLE_TEMPLATES[slot](rng)
            errs = _compare(build, init, eps)
        elif slot == 3:
            name, errs = _policy_graph(rng, "soft-mixture")
        else:
            name, errs = _policy_graph(rng, "relaxed-bernoulli")
        for param, err in errs.items():
            rows.append(GradCheckRow(seed, name, param, err, err <= tol))
    return rows
