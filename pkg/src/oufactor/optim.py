"""Box-constrained quasi-Newton minimizer used inside the block updates.

scipy's line searches assume the objective is finite everywhere, while the
OU block has an infeasible region (drift eigenvalues in the left half plane)
that can only be detected by evaluating. Here infeasible trial points are
rejected and the step is halved, following nlm-style stopping rules.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = ["MinimizeResult", "minimize_bfgs", "fd_gradient", "safe_call"]


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    n_eval: int
    reason: str  # gradtol | steptol | maxiter | linesearch
    inv_hess: Optional[np.ndarray] = None


def safe_call(f: Callable, x) -> float:
    """f(x), mapping numerical failures to +inf."""
    try:
        val = float(f(x))
    except (ValueError, ArithmeticError, np.linalg.LinAlgError):
        return np.inf
    return val if np.isfinite(val) else np.inf


def fd_gradient(f: Callable, x: np.ndarray, fx: float, rel_step: float = 1e-5,
                lower=None, upper=None, central: bool = True):
    """Finite-difference gradient; one-sided where a neighbour is infeasible or out of bounds.

    Forward differences use the smaller step rel_step**1.5 relative to the
    central step. Returns (gradient, number of evaluations).
    """
    x = np.asarray(x, dtype=float)
    lo = np.full(x.size, -np.inf) if lower is None else lower
    hi = np.full(x.size, np.inf) if upper is None else upper
    g = np.zeros(x.size)
    evals = 0
    for i in range(x.size):
        h = (rel_step if central else rel_step**1.5) * (1.0 + abs(x[i]))
        e = np.zeros(x.size)
        e[i] = h
        fp = safe_call(f, x + e) if x[i] + h <= hi[i] else np.inf
        evals += 1
        if not central and np.isfinite(fp):
            g[i] = (fp - fx) / h
            continue
        fm = safe_call(f, x - e) if x[i] - h >= lo[i] else np.inf
        evals += 1
        if np.isfinite(fp) and np.isfinite(fm):
            g[i] = (fp - fm) / (2 * h)
        elif np.isfinite(fp):
            g[i] = (fp - fx) / h
        elif np.isfinite(fm):
            g[i] = (fx - fm) / h
        else:
            g[i] = 0.0
    return g, evals


def minimize_bfgs(
    fun: Callable,
    x0,
    grad: Optional[Callable] = None,
    lower=None,
    upper=None,
    gradtol: float = 1e-6,
    steptol: float = 1e-6,
    max_step: float = 10.0,
    max_iter: int = 200,
    fd_step: float = 1e-5,
    inv_hess0=None,
) -> MinimizeResult:
    """Minimize ``fun`` from ``x0`` within the box [lower, upper].

    ``grad(x)`` returns (f, g), or is None for finite differences (forward
    differences until the scaled gradient nears gradtol or a line search
    fails, central afterwards); ``inv_hess0`` warm-starts the inverse Hessian
    approximation. The
    search direction is projected onto the free variables; trial points are
    clipped to the box, and non-finite trial values halve the step.
    """
    x = np.asarray(x0, dtype=float).copy()
    m = x.size
    lo = np.full(m, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    hi = np.full(m, np.inf) if upper is None else np.asarray(upper, dtype=float)
    x = np.clip(x, lo, hi)

    n_eval = 0
    central = grad is not None

    def value_and_grad(z, fz=None):
        nonlocal n_eval
        if grad is not None:
            n_eval += 1
            fz, gz = grad(z)
            return float(fz), np.asarray(gz, dtype=float)
        if fz is None:
            fz = safe_call(fun, z)
            n_eval += 1
        gz, k = fd_gradient(fun, z, fz, fd_step, lo, hi, central)
        n_eval += k
        return fz, gz

    f, g = value_and_grad(x)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the starting point")
    first = inv_hess0 is None
    H = np.eye(m) if first else np.array(inv_hess0, dtype=float)

    def scaled_grad(z, gz, fz):
        return np.max(np.abs(gz) * np.maximum(np.abs(z), 1.0)) / max(abs(fz), 1.0)

    def free_mask(z, gz):
        return ~(((z <= lo) & (gz > 0)) | ((z >= hi) & (gz < 0)))

    def near_optimum(z, gz, fz):
        return scaled_grad(z, gz * free_mask(z, gz), fz) < 100 * gradtol

    if not central and near_optimum(x, g, f):
        central = True
        f, g = value_and_grad(x, f)
    if scaled_grad(x, g * free_mask(x, g), f) < gradtol:
        return MinimizeResult(x, f, g, 0, n_eval, "gradtol", H)

    reason = "maxiter"
    it = 0
    for it in range(1, max_iter + 1):
        free = free_mask(x, g)
        Hf = H * np.outer(free, free)
        d = -(Hf @ g)
        if first:
            d = d / max(1.0, np.linalg.norm(d))
        if d @ g >= 0:  # lost descent, restart from steepest descent
            H = np.eye(m)
            d = -g * free
            d = d / max(1.0, np.linalg.norm(d))
        norm = np.linalg.norm(d)
        if norm > max_step:
            d *= max_step / norm

        step = 1.0
        accepted = False
        for _ in range(60):
            x_new = np.clip(x + step * d, lo, hi)
            s = x_new - x
            if not np.any(s):
                break
            f_new = safe_call(fun, x_new)
            n_eval += 1
            if np.isfinite(f_new) and f_new <= f + 1e-4 * (g @ s):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if not central:
                central = True
                f, g = value_and_grad(x, f)
                continue
            reason = "linesearch"
            break

        f_old = f
        f_new, g_new = value_and_grad(x_new, f_new)
        if not central and near_optimum(x_new, g_new, f_new):
            central = True
            f_new, g_new = value_and_grad(x_new, f_new)
        y = g_new - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if first:
                H = np.eye(m) * (sy / (y @ y))
            rho = 1.0 / sy
            V = np.eye(m) - rho * np.outer(s, y)
            H = V @ H @ V.T + rho * np.outer(s, s)
            first = False
        x, f, g = x_new, f_new, g_new

        if scaled_grad(x, g * free_mask(x, g), f) < gradtol:
            reason = "gradtol"
            break
        if np.max(np.abs(s) / np.maximum(np.abs(x), 1.0)) < steptol or f_old - f <= 0.0:
            if not central:
                central = True
                f, g = value_and_grad(x, f)
                continue
            reason = "steptol"
            break
    return MinimizeResult(x, f, g, it, n_eval, reason, H)
