"""Finite-difference verification of analytic gradients.

The harness evaluates a scalar loss twice per sampled parameter coordinate
(central differences) and compares against the analytic gradient returned by
the function under test.  Checks should run in float64: the caller receives a
float64 copy of the parameter tree so discretization error is separated from
implementation error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import tree_flatten, tree_map, tree_unflatten


class GradCheckError(RuntimeError):
    """Raised when an analytic gradient is non-finite; carries the parameter path."""


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_path: str
    worst_index: int
    worst_analytic: float
    worst_numeric: float
    n_checked: int

    def __str__(self) -> str:
        return (
            f"max rel error {self.max_rel_error:.3e} at {self.worst_path}[{self.worst_index}] "
            f"(analytic {self.worst_analytic:.6e}, numeric {self.worst_numeric:.6e}, "
            f"{self.n_checked} coordinates)"
        )


def perturb_tree(params: dict, seed: int, std: float = 0.05) -> dict:
    """Add Gaussian noise to every array; used to test at a generic point."""
    rng = np.random.default_rng(seed)
    return tree_map(lambda a: a + rng.normal(0.0, std, a.shape).astype(a.dtype), params)


def grad_check(
    loss_and_grads: Callable[[dict], tuple[float, dict]],
    params: dict,
    fraction: float = 0.01,
    step: float = 1e-3,
    seed: int = 0,
) -> GradCheckResult:
    """Compare analytic gradients against central differences.

    ``loss_and_grads(params) -> (loss, grad_tree)`` is evaluated once for the
    analytic gradients, then ``2 * k`` more times for the numeric ones, where
    ``k`` is ``fraction`` of the total scalar parameter count (at least 1).
    Relative error uses the guard ``max(|analytic|, |numeric|, 1e-8)``.
    """
    params64 = tree_map(lambda a: np.asarray(a, dtype=np.float64), params)
    _, grads = loss_and_grads(params64)

    flat_params = tree_flatten(params64)
    flat_grads = tree_flatten(grads)
    for path, g in flat_grads.items():
        if not np.isfinite(g).all():
            raise GradCheckError(f"non-finite analytic gradient at {path}")

    sizes = {path: a.size for path, a in flat_params.items()}
    total = sum(sizes.values())
    k = max(1, int(round(fraction * total)))
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(k, total), replace=False)

    paths = sorted(flat_params)
    bounds = np.cumsum([sizes[p] for p in paths])

    worst = GradCheckResult(0.0, "", 0, 0.0, 0.0, len(picks))
    for flat_idx in picks:
        slot = int(np.searchsorted(bounds, flat_idx, side="right"))
        path = paths[slot]
        local = int(flat_idx - (bounds[slot - 1] if slot else 0))
        arr = flat_params[path]
        orig = arr.flat[local]

        arr.flat[local] = orig + step
        loss_plus, _ = loss_and_grads(tree_unflatten(flat_params))
        arr.flat[local] = orig - step
        loss_minus, _ = loss_and_grads(tree_unflatten(flat_params))
        arr.flat[local] = orig

        numeric = (loss_plus - loss_minus) / (2.0 * step)
        analytic = float(flat_grads[path].flat[local])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        if rel >= worst.max_rel_error:
            worst = GradCheckResult(
                rel, path, local, analytic, float(numeric), len(picks)
            )
    return worst
