"""Truncation engines: rank-k factorization of a weight matrix under an
activation Gram.

All engines minimize (or approximate the minimizer of) the Frobenius error
of the compressed layer's OUTPUT, not of the weights themselves: for a
weight W and calibration batch X the loss is ||W X - W' X||_F, which
depends on X only through the Gram G = X X^T. The engines:

- ``truncate_plain``: activation-blind SVD truncation of W (reference).
- ``truncate_cholesky``: whiten with a Cholesky factor of G, truncate, undo.
  Requires strict positive definiteness; a single jittered retry is allowed.
  Failure is an outcome, not an exception: this baseline's fragility on
  rank-deficient statistics is part of its contract.
- ``truncate_double_svd``: whiten with the Gram's own singular-value
  square root, truncate, undo with a thresholded pseudo-inverse. Defined
  for any symmetric PSD Gram and achieves the theoretical minimum loss.
- ``truncate_admm_noise``: inject a norm-bounded perturbation chosen by an
  ADMM nuclear-norm minimization before truncating, to thin the whitened
  spectrum (needs an invertible Gram).
- ``refine_lbfgs``: local quasi-Newton polish of an existing factor pair
  under the quadratic Gram objective.

``theoretical_min_loss`` is the exact floor any rank-k factorization can
reach for a realized batch, straight from the tail spectrum of W X.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import (
    DegenerateGram,
    GramNotInvertible,
    LineSearchWarning,
    NonMonotoneWarning,
    NotPositiveDefinite,
)
from .linalg import SvdResult, default_pinv_rtol, pseudo_inverse_factors, svd, svdvals
from .validation import as_matrix, check_composable, check_rank, check_symmetric

__all__ = [
    "LowRankFactors",
    "CholeskyOutcome",
    "AdmmNoiseResult",
    "RefineResult",
    "EngineOutcome",
    "ENGINES",
    "theoretical_min_loss",
    "tail_loss_from_sigma",
    "gram_loss",
    "activation_loss",
    "whitened_spectrum",
    "truncate_plain",
    "truncate_cholesky",
    "truncate_double_svd",
    "truncate_admm_noise",
    "refine_lbfgs",
    "gradient_check",
    "nuclear_norm",
    "run_engine",
]

ENGINES = ("plain", "cholesky", "double_svd", "admm_noise")


@dataclass(frozen=True)
class LowRankFactors:
    """Factor pair (a, b) representing the rank-limited matrix a @ b.

    ``a`` is (rows, k) and ``b`` is (k, cols); both finite.
    """

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = as_matrix(self.a, "a")
        b = as_matrix(self.b, "b")
        check_composable(a, b, ("a", "b"))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def shape(self) -> tuple:
        return (self.a.shape[0], self.b.shape[1])

    def densify(self) -> np.ndarray:
        return self.a @ self.b


@dataclass(frozen=True)
class CholeskyOutcome:
    """Result of the whitening baseline: factors or a recorded failure."""

    factors: LowRankFactors | None
    status: str  # "ok" | "jittered" | "failed"
    detail: str = ""

    @property
    def failed(self) -> bool:
        return self.status == "failed"


@dataclass
class AdmmNoiseResult:
    """Perturb-then-truncate result with the optimizer's iteration trace."""

    factors: LowRankFactors
    delta_w: np.ndarray
    objective_trace: list
    selected_iteration: int
    non_monotone: bool
    primal_residuals: list = field(default_factory=list)

    @property
    def final_objective(self) -> float:
        return self.objective_trace[self.selected_iteration]


@dataclass
class RefineResult:
    """Polished factors plus the (non-increasing) objective trajectory."""

    factors: LowRankFactors
    objective_curve: list
    n_iter: int
    line_search_failed: bool

    @property
    def initial_objective(self) -> float:
        return self.objective_curve[0]

    @property
    def final_objective(self) -> float:
        return self.objective_curve[-1]


@dataclass
class EngineOutcome:
    """Uniform wrapper the pipeline and estimator consume."""

    engine: str
    factors: LowRankFactors | None
    status: str  # "ok" | "jittered" | "failed"
    detail: str = ""
    admm: AdmmNoiseResult | None = None
    refine: RefineResult | None = None


def tail_loss_from_sigma(sigma: np.ndarray, k: int) -> float:
    """sqrt of the energy past the first k singular values."""
    if k >= sigma.shape[0]:
        return 0.0
    return float(np.linalg.norm(sigma[k:]))


def theoretical_min_loss(w, x, k: int) -> float:
    """Exact minimum of ||W X - M X||_F over matrices M of rank <= k.

    Computed from the tail spectrum of the explicitly formed product W X;
    no engine can do better on the same batch, and the optimal engines
    match it to rounding.
    """
    wm = as_matrix(w, "w")
    xm = as_matrix(x, "x")
    check_composable(wm, xm, ("w", "x"))
    k = check_rank(k, min(wm.shape), "k")
    return tail_loss_from_sigma(svdvals(wm @ xm), k)


def gram_loss(w, w_approx, gram) -> float:
    """Output-space loss sqrt(trace((W - W') G (W - W')^T)) from a Gram."""
    wm = as_matrix(w, "w")
    am = w_approx.densify() if isinstance(w_approx, LowRankFactors) else as_matrix(w_approx, "w_approx")
    if am.shape != wm.shape:
        raise ValueError(f"approximation shape {am.shape} != weight shape {wm.shape}")
    g = check_symmetric(as_matrix(gram, "gram"), "gram")
    check_composable(wm, g, ("w", "gram"))
    r = wm - am
    val = float(np.sum((r @ g) * r))
    return math.sqrt(max(val, 0.0))


def activation_loss(w, w_approx, x) -> float:
    """Output-space loss ||W X - W' X||_F on a realized batch."""
    wm = as_matrix(w, "w")
    am = w_approx.densify() if isinstance(w_approx, LowRankFactors) else as_matrix(w_approx, "w_approx")
    xm = as_matrix(x, "x")
    check_composable(wm, xm, ("w", "x"))
    return float(np.linalg.norm((wm - am) @ xm, "fro"))


def _whitening(gram, pinv_rtol=None):
    """Split a symmetric PSD Gram into (white, white_pinv, spectrum).

    ``white`` maps weights into the whitened domain (W @ white), and
    ``white_pinv`` is its thresholded pseudo-inverse for the way back.
    """
    g = check_symmetric(as_matrix(gram, "gram"), "gram")
    gs = svd(g)
    if gs.sigma.size == 0 or gs.sigma[0] <= 0.0:
        raise DegenerateGram("gram carries no signal: all singular values are zero")
    sqrt_sigma = np.sqrt(gs.sigma)
    white = gs.u * sqrt_sigma
    tol = default_pinv_rtol(g.shape[0]) if pinv_rtol is None else float(pinv_rtol)
    half = SvdResult(u=gs.u, sigma=sqrt_sigma, vt=np.eye(g.shape[0]))
    white_pinv = pseudo_inverse_factors(half, tol)
    return white, white_pinv, gs.sigma


def whitened_spectrum(w, gram, pinv_rtol=None) -> np.ndarray:
    """Singular values of the Gram-whitened weight, descending.

    The tail past rank k equals the theoretical minimum loss at rank k for
    any batch realizing the Gram, so this is the scoring primitive for
    budget allocation and for loss floors when only G (not X) is stored.
    """
    wm = as_matrix(w, "w")
    g = as_matrix(gram, "gram")
    check_composable(wm, g, ("w", "gram"))
    white, _, _ = _whitening(g, pinv_rtol)
    return svdvals(wm @ white)


def truncate_plain(w, k: int) -> LowRankFactors:
    """Activation-blind rank-k truncation: best Frobenius fit to W itself."""
    wm = as_matrix(w, "w")
    k = check_rank(k, min(wm.shape), "k")
    sr = svd(wm)
    a = sr.u[:, :k] * sr.sigma[:k]
    b = sr.vt[:k, :]
    return LowRankFactors(a=a, b=b)


def truncate_cholesky(w, gram, k: int, jitter: float = 1e-6) -> CholeskyOutcome:
    """Whitening baseline via a Cholesky factor of the Gram.

    Factors W through the whitened matrix W @ L (L lower triangular with
    L L^T = G), truncates, and maps back with a triangular solve. If G is
    not strictly positive definite the factorization fails; one retry with
    ``jitter * mean(diag(G))`` added to the diagonal is attempted when
    jitter > 0. Failure (including a non-finite back-substitution on a
    barely-positive pivot) is reported in the outcome, never raised.
    """
    wm = as_matrix(w, "w")
    g = as_matrix(gram, "gram")
    check_composable(wm, g, ("w", "gram"))
    k = check_rank(k, min(wm.shape), "k")
    from .linalg import cholesky as chol

    status = "ok"
    try:
        lower = chol(g)
    except NotPositiveDefinite as exc:
        if jitter <= 0.0:
            return CholeskyOutcome(None, "failed", f"not positive definite: {exc}")
        bump = jitter * (float(np.trace(g)) / g.shape[0])
        try:
            lower = chol(g + bump * np.eye(g.shape[0]))
            status = "jittered"
        except NotPositiveDefinite as exc2:
            return CholeskyOutcome(
                None, "failed", f"not positive definite even with jitter {bump:.3e}: {exc2}"
            )

    sr = svd(wm @ lower)
    kk = min(k, sr.rank_limit)
    a = sr.u[:, :kk] * sr.sigma[:kk]
    # b = V_k^T L^{-1}, applied as the triangular solve L^T z = V_k.
    with np.errstate(all="ignore"):
        z = solve_triangular(lower, sr.vt[:kk, :].T, lower=True, trans="T")
    b = z.T
    if not np.all(np.isfinite(b)):
        return CholeskyOutcome(None, "failed", "whitening inverse overflowed")
    return CholeskyOutcome(LowRankFactors(a=a, b=b), status, "")


def truncate_double_svd(w, gram, k: int, pinv_rtol: float | None = None) -> LowRankFactors:
    """Loss-optimal rank-k truncation under a symmetric PSD Gram.

    Whitens with the Gram's own singular-value square root (defined for any
    PSD Gram, rank-deficient included), truncates the whitened matrix, and
    maps back through the thresholded pseudo-inverse. Achieves the
    theoretical minimum loss for any batch realizing the Gram. Invariant to
    positive rescaling of the Gram.
    """
    wm = as_matrix(w, "w")
    g = as_matrix(gram, "gram")
    check_composable(wm, g, ("w", "gram"))
    k = check_rank(k, min(wm.shape), "k")
    white, white_pinv, _ = _whitening(g, pinv_rtol)
    sr = svd(wm @ white)
    kk = min(k, sr.rank_limit)
    a = sr.u[:, :kk] * sr.sigma[:kk]
    b = sr.vt[:kk, :] @ white_pinv
    return LowRankFactors(a=a, b=b)


def nuclear_norm(m) -> float:
    """Sum of singular values."""
    return float(np.sum(svdvals(m)))


def _soft_threshold_spectrum(m: np.ndarray, tau: float) -> np.ndarray:
    sr = svd(m)
    shrunk = np.maximum(sr.sigma - tau, 0.0)
    return (sr.u * shrunk) @ sr.vt


def truncate_admm_noise(
    w,
    gram,
    k: int,
    eps: float = 1e-3,
    rho: float = 1.0,
    max_iter: int = 50,
    tol: float = 1e-6,
    pinv_rtol: float | None = None,
) -> AdmmNoiseResult:
    """Perturb W to thin its whitened spectrum, then truncate optimally.

    Adds dW = eps * Q @ L where L is the inverse Cholesky factor of the
    Gram (so ||dW X||_F = eps for any batch realizing G) and Q has unit
    Frobenius norm, choosing Q to minimize the nuclear norm of the whitened
    perturbed weight via ADMM splitting with singular-value thresholding.
    The iterate with the lowest recorded objective is kept, so the final
    objective never exceeds the unperturbed one; an objective increase
    between consecutive iterations is recorded as ``non_monotone``. With
    eps == 0 this reduces exactly to ``truncate_double_svd``.
    """
    wm = as_matrix(w, "w")
    g = check_symmetric(as_matrix(gram, "gram"), "gram")
    check_composable(wm, g, ("w", "gram"))
    k = check_rank(k, min(wm.shape), "k")
    if eps < 0.0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    if rho <= 0.0:
        raise ValueError(f"rho must be > 0, got {rho}")

    d = g.shape[0]
    white, _, gram_sigma = _whitening(g, pinv_rtol)
    base = wm @ white

    if eps == 0.0:
        factors = truncate_double_svd(wm, g, k, pinv_rtol)
        return AdmmNoiseResult(
            factors=factors,
            delta_w=np.zeros_like(wm),
            objective_trace=[nuclear_norm(base)],
            selected_iteration=0,
            non_monotone=False,
        )

    cutoff = default_pinv_rtol(d) if pinv_rtol is None else float(pinv_rtol)
    if gram_sigma[-1] <= cutoff * gram_sigma[0]:
        raise GramNotInvertible(
            f"gram condition {gram_sigma[0] / max(gram_sigma[-1], np.finfo(np.float64).tiny):.3e} "
            "is beyond the invertibility cutoff"
        )
    from .linalg import cholesky as chol

    try:
        cfac = chol(g)
    except NotPositiveDefinite as exc:
        raise GramNotInvertible(f"gram is not positive definite: {exc}") from exc
    # noise_basis^T @ noise_basis reproduces the Gram inverse exactly.
    noise_basis = solve_triangular(cfac, np.eye(d), lower=True)

    noise_white = noise_basis @ white
    q = np.zeros_like(wm)
    dual = np.zeros_like(base)
    trace = [nuclear_norm(base)]
    residuals = []
    best_obj = trace[0]
    best_q = q
    base_scale = max(1.0, float(np.linalg.norm(base, "fro")))
    pinv_noise_white = np.linalg.pinv(noise_white)

    for _ in range(max_iter):
        target = base + eps * (q @ noise_white) - dual
        z = _soft_threshold_spectrum(target, 1.0 / rho)
        q = ((z - base + dual) @ pinv_noise_white) / eps
        qn = float(np.linalg.norm(q, "fro"))
        if qn > 0.0:
            q = q / qn
        fit = base + eps * (q @ noise_white)
        dual = dual + (z - fit)
        obj = nuclear_norm(fit)
        trace.append(obj)
        if obj < best_obj:
            best_obj = obj
            best_q = q
        residuals.append(float(np.linalg.norm(z - fit, "fro")) / base_scale)
        if residuals[-1] < tol:
            break

    arr = np.asarray(trace)
    non_monotone = bool(np.any(arr[1:] > arr[:-1] * (1.0 + 1e-6)))
    if non_monotone:
        warnings.warn(
            "ADMM objective increased between iterations; keeping the best iterate",
            NonMonotoneWarning,
            stacklevel=2,
        )
    selected = int(np.argmin(arr))
    delta_w = eps * (best_q @ noise_basis)
    factors = truncate_double_svd(wm + delta_w, g, k, pinv_rtol)
    return AdmmNoiseResult(
        factors=factors,
        delta_w=delta_w,
        objective_trace=trace,
        selected_iteration=selected,
        non_monotone=non_monotone,
        primal_residuals=residuals,
    )


def _factor_objective(wm: np.ndarray, g: np.ndarray, m: int, k: int, d: int):
    """Quadratic Gram objective and gradient over flattened (a, b)."""

    def fun_and_grad(theta):
        a = theta[: m * k].reshape(m, k)
        b = theta[m * k :].reshape(k, d)
        r = wm - a @ b
        rg = r @ g
        f = float(np.sum(rg * r))
        ga = -2.0 * (rg @ b.T)
        gb = -2.0 * (a.T @ rg)
        return f, np.concatenate([ga.ravel(), gb.ravel()])

    return fun_and_grad


def refine_lbfgs(
    w,
    gram,
    init: LowRankFactors,
    lr: float = 0.01,
    max_iter: int = 40,
    memory: int = 10,
    gtol: float = 1e-8,
) -> RefineResult:
    """Quasi-Newton polish of a factor pair under the quadratic Gram loss.

    Minimizes trace((W - A B) G (W - A B)^T) over both factors jointly,
    starting from ``init``. ``lr`` seeds the trial step of the first line
    search only; afterwards the unit quasi-Newton step is tried first. The
    objective curve is non-increasing; at a stationary start the gradient
    test stops the loop immediately with zero iterations. If a line search
    fails, the best iterate reached so far is returned and flagged.
    """
    from .optimize import minimize_lbfgs

    wm = as_matrix(w, "w")
    g = check_symmetric(as_matrix(gram, "gram"), "gram")
    check_composable(wm, g, ("w", "gram"))
    m, d = wm.shape
    if init.shape != (m, d):
        raise ValueError(f"init factors have shape {init.shape}, expected {(m, d)}")
    k = init.rank
    theta0 = np.concatenate([init.a.ravel(), init.b.ravel()])
    res = minimize_lbfgs(
        _factor_objective(wm, g, m, k, d),
        theta0,
        max_iter=max_iter,
        memory=memory,
        first_step=lr,
        gtol=gtol,
    )
    a = res.x[: m * k].reshape(m, k)
    b = res.x[m * k :].reshape(k, d)
    failed = res.status == "line_search_failure"
    if failed:
        warnings.warn(
            "line search failed during refinement; keeping the best iterate",
            LineSearchWarning,
            stacklevel=2,
        )
    return RefineResult(
        factors=LowRankFactors(a=a, b=b),
        objective_curve=res.f_history,
        n_iter=res.n_iter,
        line_search_failed=failed,
    )


def gradient_check(w, gram, a, b, step_scale: float = 1e-6) -> float:
    """Max relative gap between analytic and central-difference gradients.

    The objective is quadratic along every coordinate, so the central
    difference is exact up to rounding; discrepancies flag a wrong analytic
    gradient, not finite-difference truncation.
    """
    wm = as_matrix(w, "w")
    g = check_symmetric(as_matrix(gram, "gram"), "gram")
    am = as_matrix(a, "a")
    bm = as_matrix(b, "b")
    m, k = am.shape
    d = bm.shape[1]
    fun_and_grad = _factor_objective(wm, g, m, k, d)
    theta = np.concatenate([am.ravel(), bm.ravel()])
    _, analytic = fun_and_grad(theta)
    fd = np.zeros_like(theta)
    for i in range(theta.size):
        h = step_scale * (1.0 + abs(theta[i]))
        up = theta.copy()
        up[i] += h
        dn = theta.copy()
        dn[i] -= h
        f_up, _ = fun_and_grad(up)
        f_dn, _ = fun_and_grad(dn)
        fd[i] = (f_up - f_dn) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(analytic - fd) / denom))


def run_engine(
    w,
    gram,
    k: int,
    engine: str,
    *,
    jitter: float = 1e-6,
    noise_eps: float = 1e-3,
    admm_rho: float = 1.0,
    admm_max_iter: int = 50,
    admm_tol: float = 1e-6,
    refine: bool = False,
    refine_lr: float = 0.01,
    refine_max_iter: int = 40,
    pinv_rtol: float | None = None,
) -> EngineOutcome:
    """Dispatch one site through a named engine, optionally polishing.

    The whitening baseline reports failure in the outcome; other engines
    raise their documented errors. Refinement applies to whatever factors
    the engine produced.
    """
    if engine not in ENGINES:
        raise ValueError(f"engine must be one of {ENGINES}, got {engine!r}")
    admm_result = None
    status = "ok"
    detail = ""
    if engine == "plain":
        factors = truncate_plain(w, k)
    elif engine == "cholesky":
        outcome = truncate_cholesky(w, gram, k, jitter=jitter)
        if outcome.failed:
            return EngineOutcome(engine=engine, factors=None, status="failed", detail=outcome.detail)
        factors = outcome.factors
        status = outcome.status
    elif engine == "double_svd":
        factors = truncate_double_svd(w, gram, k, pinv_rtol)
    else:
        admm_result = truncate_admm_noise(
            w, gram, k, eps=noise_eps, rho=admm_rho,
            max_iter=admm_max_iter, tol=admm_tol, pinv_rtol=pinv_rtol,
        )
        factors = admm_result.factors
    refine_result = None
    if refine:
        refine_result = refine_lbfgs(w, gram, factors, lr=refine_lr, max_iter=refine_max_iter)
        factors = refine_result.factors
        if refine_result.line_search_failed:
            detail = "line search failed during refinement; kept best iterate"
    return EngineOutcome(
        engine=engine,
        factors=factors,
        status=status,
        detail=detail,
        admm=admm_result,
        refine=refine_result,
    )
