"""Limited-memory quasi-Newton minimizer with a strong Wolfe line search.

Small and self-contained so the refinement stage has full control over the
pieces its contract fixes: the memory length, the Wolfe constants, the trial
step of the very first line search, and the behavior on line-search failure
(keep the best point seen, never a worse one). Objective values along the
accepted iterates are therefore non-increasing by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["MinimizeResult", "minimize_lbfgs"]

# Line-search outcome codes used internally.
_LS_OK = 0
_LS_DECREASE_ONLY = 1
_LS_FAILED = 2


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    f_history: list = field(default_factory=list)
    status: str = "max_iter"  # "gtol" | "max_iter" | "line_search_failure"


def _two_loop_direction(grad, s_list, y_list):
    """Implicit inverse-Hessian product -H*grad from stored (s, y) pairs."""
    q = grad.copy()
    alphas = []
    for s, y in zip(reversed(s_list), reversed(y_list)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        q -= a * y
        alphas.append((a, rho))
    if s_list:
        s, y = s_list[-1], y_list[-1]
        gamma = float(s @ y) / float(y @ y)
    else:
        gamma = 1.0
    r = gamma * q
    for (s, y), (a, rho) in zip(zip(s_list, y_list), reversed(alphas)):
        b = rho * float(y @ r)
        r += (a - b) * s
    return -r


def _quad_interp(lo, f_lo, d_lo, hi, f_hi):
    """Minimizer of the quadratic through (lo, f_lo, d_lo) and (hi, f_hi)."""
    denom = 2.0 * (f_hi - f_lo - d_lo * (hi - lo))
    if denom == 0.0 or not np.isfinite(denom):
        return 0.5 * (lo + hi)
    alpha = lo - d_lo * (hi - lo) ** 2 / denom
    # Keep strictly inside the bracket so the search cannot stall at an end.
    left, right = (lo, hi) if lo < hi else (hi, lo)
    span = right - left
    if not np.isfinite(alpha) or alpha < left + 0.1 * span or alpha > right - 0.1 * span:
        return 0.5 * (lo + hi)
    return alpha


def _zoom(phi, phi0, dphi0, lo, f_lo, d_lo, hi, f_hi, c1, c2, max_evals):
    """Narrow a bracket [lo, hi] that contains strong-Wolfe points."""
    for _ in range(max_evals):
        alpha = _quad_interp(lo, f_lo, d_lo, hi, f_hi)
        f, d = phi(alpha)
        if f > phi0 + c1 * alpha * dphi0 or f >= f_lo:
            hi, f_hi = alpha, f
        else:
            if abs(d) <= -c2 * dphi0:
                return alpha, f, _LS_OK
            if d * (hi - lo) >= 0.0:
                hi, f_hi = lo, f_lo
            lo, f_lo, d_lo = alpha, f, d
        if abs(hi - lo) <= 1e-14 * max(1.0, abs(lo), abs(hi)):
            break
    if f_lo < phi0:
        return lo, f_lo, _LS_DECREASE_ONLY
    return 0.0, phi0, _LS_FAILED


def _wolfe_search(phi, phi0, dphi0, alpha0, c1, c2, max_evals):
    """Strong Wolfe line search: bracket outward, then zoom.

    Returns (alpha, f_at_alpha, code). alpha == 0 means no acceptable step.
    """
    alpha_prev, f_prev, d_prev = 0.0, phi0, dphi0
    alpha = alpha0
    for i in range(max_evals):
        f, d = phi(alpha)
        if f > phi0 + c1 * alpha * dphi0 or (i > 0 and f >= f_prev):
            return _zoom(phi, phi0, dphi0, alpha_prev, f_prev, d_prev, alpha, f, c1, c2, max_evals)
        if abs(d) <= -c2 * dphi0:
            return alpha, f, _LS_OK
        if d >= 0.0:
            return _zoom(phi, phi0, dphi0, alpha, f, d, alpha_prev, f_prev, c1, c2, max_evals)
        alpha_prev, f_prev, d_prev = alpha, f, d
        alpha = 2.0 * alpha
    if f_prev < phi0:
        return alpha_prev, f_prev, _LS_DECREASE_ONLY
    return 0.0, phi0, _LS_FAILED


def minimize_lbfgs(
    fun_and_grad,
    x0,
    max_iter: int = 40,
    memory: int = 10,
    c1: float = 1e-4,
    c2: float = 0.9,
    first_step: float = 1.0,
    gtol: float = 1e-8,
    max_line_evals: int = 25,
) -> MinimizeResult:
    """Minimize a smooth function given a ``theta -> (f, grad)`` callable.

    ``first_step`` is the trial step of the first line search only; later
    searches start from the natural quasi-Newton unit step. Iterates are
    accepted only on decrease, so ``f_history`` never increases. On
    line-search failure the best point reached so far is returned with
    status ``"line_search_failure"``.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = fun_and_grad(x)
    f = float(f)
    g = np.asarray(g, dtype=np.float64)
    s_list, y_list = [], []
    history = [f]
    n_iter = 0
    status = "max_iter"

    for it in range(max_iter):
        if np.max(np.abs(g)) <= gtol * (1.0 + abs(f)):
            status = "gtol"
            break
        p = _two_loop_direction(g, s_list, y_list)
        dphi0 = float(g @ p)
        if not np.isfinite(dphi0) or dphi0 >= 0.0:
            p = -g
            dphi0 = -float(g @ g)
            if dphi0 == 0.0:
                status = "gtol"
                break

        cache = {}

        def phi(alpha):
            xt = x + alpha * p
            ft, gt = fun_and_grad(xt)
            cache[alpha] = (xt, float(ft), np.asarray(gt, dtype=np.float64))
            return float(ft), float(gt @ p)

        alpha0 = first_step if it == 0 else 1.0
        alpha, f_new, code = _wolfe_search(phi, f, dphi0, alpha0, c1, c2, max_line_evals)
        if code == _LS_FAILED or alpha == 0.0 or not (f_new < f):
            status = "line_search_failure"
            break
        x_new, f_new, g_new = cache[alpha]
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_list.append(s)
            y_list.append(y)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
        x, f, g = x_new, f_new, g_new
        history.append(f)
        n_iter = it + 1

    return MinimizeResult(x=x, fun=f, grad=g, n_iter=n_iter, f_history=history, status=status)
