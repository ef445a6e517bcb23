"""Independent verification oracles.

Everything here deliberately avoids the code paths it checks: gradients
come from central differences, policy quality from brute-force
enumeration, and sampling laws from empirical frequencies. Stochastic
objectives are made comparable by freezing noise streams (common random
numbers) across the evaluations being compared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeError
from .tensor import Rng, Tensor, gumbel_from_uniform


def finite_diff_grad(f, x: Tensor, eps: float = 1e-3) -> Tensor:
    """Central-difference gradient of a scalar function of one tensor.

    The caller is responsible for freezing any sampling noise inside f so
    that both sides of each difference see identical draws.
    """
    if eps <= 0:
        raise ShapeError(f"finite difference step must be positive, got {eps}")
    flat = x.data.ravel().astype(np.float64)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += eps
        f_plus = float(f(Tensor(bumped.reshape(x.dims))))
        bumped[i] -= 2 * eps
        f_minus = float(f(Tensor(bumped.reshape(x.dims))))
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NonFiniteError("objective returned a non-finite value during differencing")
        grad[i] = (f_plus - f_minus) / (2 * eps)
    return Tensor(grad.reshape(x.dims))


def gumbel_frequency_test(alpha, n: int, rng: Rng) -> float:
    """L1 distance between empirical Gumbel-argmax frequencies and softmax(alpha)."""
    if n < 1:
        raise ShapeError("frequency test needs at least one draw")
    logits = np.asarray(alpha, dtype=np.float64)
    g = gumbel_from_uniform(rng.uniform((n, logits.size)))
    counts = np.bincount(np.argmax(logits[None, :] + g, axis=1), minlength=logits.size)
    z = logits - logits.max()
    probs = np.exp(z) / np.exp(z).sum()
    return float(np.abs(counts / n - probs).sum())


def ks_two_sample(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup_x |F_a(x) - F_b(x)|."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ShapeError("KS statistic needs two nonempty samples")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.abs(cdf_a - cdf_b).max())


def ks_critical_value(n: int, m: int) -> float:
    """Asymptotic two-sample critical value at the 5% level."""
    if n < 1 or m < 1:
        raise ShapeError("KS critical value needs positive sample sizes")
    return 1.358 * math.sqrt((n + m) / (n * m))


_GRID_LIMIT = 10_000


@dataclass
class PolicyGrid:
    """Finite candidate set for brute-force policy evaluation.

    Each candidate is a SubPolicy; optionally every op's magnitude is swept
    over a shared grid, expanding the candidate set combinatorially.
    """

    candidates: list
    magnitude_grid: list[float] = field(default_factory=list)

    def expanded(self) -> list:
        from .dafa import OpChoice, SubPolicy

        if not self.magnitude_grid:
            out = list(self.candidates)
        else:
            out = []
            for cand in self.candidates:
                combos = [[]]
                for op in cand.ops:
                    combos = [prefix + [m] for prefix in combos for m in self.magnitude_grid]
                for combo in combos:
                    ops = [OpChoice(op.kind, op.beta, m) for op, m in zip(cand.ops, combo)]
                    out.append(SubPolicy(ops))
        if len(out) == 0:
            raise ShapeError("empty policy grid")
        if len(out) > _GRID_LIMIT:
            raise ShapeError(f"policy grid of {len(out)} candidates exceeds limit {_GRID_LIMIT}")
        return out


@dataclass
class FeatureSnapshot:
    """Frozen teacher features and aligned student features for one batch."""

    teacher_feature: Tensor
    student_aligned: Tensor


_ENUM_DRAWS = 16


def enumerate_policies(grid: PolicyGrid, snapshot: FeatureSnapshot,
                       rng: Rng) -> list[tuple[object, float]]:
    """Rank candidates by consistency loss, averaged over frozen noise draws.

    Every candidate sees the same noise streams, so the ranking reflects the
    candidates rather than sampling luck. Ties keep enumeration order.
    """
    from .dafa import apply_subpolicy, consistency_loss

    candidates = grid.expanded()
    f_t = snapshot.teacher_feature
    f_s = snapshot.student_aligned
    if f_t.size == 0:
        raise ShapeError("empty feature snapshot")
    scored = []
    for idx, cand in enumerate(candidates):
        total = 0.0
        for draw in range(_ENUM_DRAWS):
            stream = rng.child("enum-draw").child(draw)
            augmented = apply_subpolicy(cand, f_t, lam=0.5, rng=stream, mode="hard")
            total += consistency_loss(augmented, f_s)
        scored.append((idx, cand, total / _ENUM_DRAWS))
    scored.sort(key=lambda item: (item[2], item[0]))
    return [(cand, loss) for _, cand, loss in scored]
