"""Central finite-difference validation of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    passed: bool
    tol: float

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}: max rel err {self.max_rel_error:.3e} over {self.n_checked} coords (tol {self.tol:g})"


def finite_difference_check(f, p: Tensor, h: float = 1e-5, tol: float = 1e-4,
                            max_coords: int | None = None, rng=None, floor: float = 1e-7) -> GradCheckReport:
    """Compare the backward-pass gradient of ``f()`` w.r.t. ``p`` with central differences.

    ``f`` takes no arguments and returns a scalar Tensor built from ``p``.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_coords`` limits the check to a random subset of coordinates.
    """
    p.grad = None
    f().backward()
    analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
    p.grad = None

    coords = np.arange(p.size)
    if max_coords is not None and p.size > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))

    flat = p.data.reshape(-1)
    numeric = np.empty(len(coords))
    for i, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        fp = f().item()
        flat[c] = orig - h
        fm = f().item()
        flat[c] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    a = analytic.reshape(-1)[coords]
    abs_err = np.abs(a - numeric)
    rel = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel, float(abs_err.max()) if abs_err.size else 0.0,
                           len(coords), max_rel < tol, tol)
