"""Finite-difference verification of reverse-mode gradients.

Central differences against the analytic gradients produced by backward();
the numeric side never touches the tape, so the two routes stay independent.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, backward, no_grad, use_tape


@dataclass
class FDReport:
    """Per-parameter maximum relative errors from a finite-difference run."""

    per_param: dict = field(default_factory=dict)
    coords_checked: int = 0

    @property
    def max_rel_error(self):
        return max(self.per_param.values()) if self.per_param else 0.0

    def __str__(self):
        lines = [f"{name}: max rel err {err:.3e}" for name, err in self.per_param.items()]
        lines.append(f"overall: {self.max_rel_error:.3e} over {self.coords_checked} coordinates")
        return "\n".join(lines)


def finite_difference_check(f, params, eps=1e-4, max_coords_per_param=None, seed=0):
    """Compare analytic gradients of f against central differences.

    f is a zero-argument callable returning a scalar Tensor built from the
    given parameters; it must be deterministic. params is a list of Tensors
    or a name->Tensor mapping. Relative error uses a max(1, |analytic|)
    denominator. When max_coords_per_param is set, a seeded sample of
    coordinates per parameter is checked instead of every entry.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"param{i}", p) for i, p in enumerate(params)]

    for _, p in named:
        p.grad = None
    with use_tape(Tape()):
        loss = f()
        backward(loss)
        analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in named}

    rng = np.random.default_rng(seed)
    report = FDReport()
    for name, p in named:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = np.arange(n)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                hi = f().item()
                flat[i] = orig - eps
                lo = f().item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError(
                    f"non-finite loss at perturbed coordinate {i} of {name}: f+={hi}, f-={lo}"
                )
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(1.0, abs(float(a_flat[i])))
            worst = max(worst, abs(float(a_flat[i]) - numeric) / denom)
            report.coords_checked += 1
        report.per_param[name] = worst
    return report
