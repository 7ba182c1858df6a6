"""Maximum likelihood for the semiparametric logistic VE model with a B-spline sieve.

Only infected participants contribute; each row is a Bernoulli (or categorical)
contrast between the preventable and irrelevant cause with linear predictor
Z * beta' psi(T-V) + alpha(T), where alpha is a spline expansion, a free scalar,
or a fixed surveillance-derived offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .core import (
    Dataset,
    FitResult,
    NonIdentifiableError,
    NotConvergedError,
    OnlyOneCauseError,
    VEBasisSpec,
    VewaneError,
    eval_ve_basis,
)
from .smoothing import (
    BSplineBasis,
    ConstantFn,
    SmoothFn,
    SumFn,
    bspline_eval,
    knot_rule,
    place_knots,
)

_LOG_ZERO = -700.0  # exp() underflows to exactly 0.0 below this
SEPARATION_BOUND = 30.0
CONDITION_BOUND = 1e12
SCORE_TOL = 1e-8
LOGLIK_TOL = 1e-10
MAX_ITER = 100


@dataclass(frozen=True)
class FixedOffset:
    """alpha(t) pinned to a known function, optionally plus a free scalar intercept."""

    offset: SmoothFn | None = None
    free_intercept: bool = False
    fixed_value: float = 0.0


@dataclass
class SieveDesign:
    y: np.ndarray  # 0 = irrelevant, 1..m = preventable (strain code)
    X_ve: list[np.ndarray]  # per strain block of Z * psi_s(tau) columns
    X_alpha: np.ndarray  # spline columns, a lone intercept column, or empty
    offsets: np.ndarray  # (n, m) fixed per-class offsets
    T: np.ndarray
    tau: np.ndarray
    Z: np.ndarray
    ve_basis: VEBasisSpec | list[VEBasisSpec] | None
    alpha: BSplineBasis | FixedOffset
    strains: list[int] | None
    n_dropped_censored: int

    @property
    def n_rows(self) -> int:
        return self.y.shape[0]

    @property
    def n_classes(self) -> int:
        return self.offsets.shape[1]

    @property
    def d_blocks(self) -> list[int]:
        return [x.shape[1] for x in self.X_ve]

    @property
    def d_total(self) -> int:
        return sum(self.d_blocks)

    @property
    def n_params(self) -> int:
        return self.d_total + self.X_alpha.shape[1]


def _infected_arrays(dataset: Dataset):
    arr = dataset.arrays()
    keep = arr["cause"] >= 0
    n_dropped = int((~keep).sum())
    T = arr["time"][keep]
    vax = arr["vax"][keep]
    Z = np.where(np.isnan(vax), False, vax <= T)
    tau = np.where(Z, T - np.where(np.isnan(vax), 0.0, vax), 0.0)
    return T, Z.astype(float), tau, arr["cause"][keep], arr["strain"][keep], n_dropped


def default_alpha_basis(
    event_times: np.ndarray,
    knots: int | None = None,
    placement: str = "quantile",
    degree: int = 3,
) -> BSplineBasis:
    """Cubic spline over the event-time range, K = floor(n**(1/3.5)) quantile knots."""
    lo, hi = float(event_times.min()), float(event_times.max())
    k = knot_rule(len(event_times)) if knots is None else int(knots)
    return BSplineBasis(degree, place_knots(event_times, k, (lo, hi), placement), (lo, hi))


def build_design(
    dataset: Dataset,
    ve_basis: VEBasisSpec | list[VEBasisSpec] | None,
    alpha: BSplineBasis | FixedOffset,
    mixture=None,
    extra_offset: SmoothFn | None = None,
) -> SieveDesign:
    """Rows for every infected participant; censored records are dropped and counted."""
    T, Z, tau, cause, strain, n_dropped = _infected_arrays(dataset)
    if T.size == 0:
        raise VewaneError("no infected participants")

    if mixture is None:
        strains = None
        y = (cause == 1).astype(np.int64)
        bases = [ve_basis] if ve_basis is not None else []
    else:
        strains = list(mixture.strains)
        y = np.zeros(T.size, dtype=np.int64)
        prevent = cause == 1
        if np.any(prevent & (strain == 0)):
            raise VewaneError("strain label missing on a preventable record; impute first")
        for k, s in enumerate(strains, start=1):
            y[prevent & (strain == s)] = k
        unknown = prevent & (y == 0)
        if np.any(unknown):
            bad = set(strain[unknown].tolist())
            raise VewaneError(f"strain labels {sorted(bad)} not present in the mixture")
        if isinstance(ve_basis, VEBasisSpec) or ve_basis is None:
            bases = [ve_basis or VEBasisSpec("linear")] * len(strains)
        else:
            bases = list(ve_basis)
            if len(bases) != len(strains):
                raise VewaneError("need one VE basis per strain")

    X_ve = [Z[:, None] * eval_ve_basis(b, tau) for b in bases] if bases else [np.zeros((T.size, 0))]

    if isinstance(alpha, BSplineBasis):
        lo, hi = alpha.boundary
        if T.min() < lo or T.max() > hi:
            raise VewaneError("event time outside spline boundary")
        X_alpha = bspline_eval(alpha, T)
        base_offset = np.zeros(T.size)
    elif isinstance(alpha, FixedOffset):
        X_alpha = np.ones((T.size, 1)) if alpha.free_intercept else np.zeros((T.size, 0))
        base_offset = np.full(T.size, alpha.fixed_value)
        if alpha.offset is not None:
            base_offset = base_offset + alpha.offset(T)
    else:
        raise TypeError("alpha must be a BSplineBasis or FixedOffset")
    if extra_offset is not None:
        base_offset = base_offset + extra_offset(T)

    n_classes = 1 if mixture is None else len(strains)
    offsets = np.tile(base_offset[:, None], (1, n_classes))
    if mixture is not None:
        for k, s in enumerate(strains):
            p = mixture.proportions_at(T, s)
            rows_s = y == k + 1
            if np.any(p[rows_s] <= 0):
                raise VewaneError(f"mixture proportion is zero at an observed strain-{s} event")
            offsets[:, k] += np.where(p > 0, np.log(np.maximum(p, 1e-320)), _LOG_ZERO)

    if not np.all(np.isfinite(np.concatenate([x.ravel() for x in X_ve] + [offsets.ravel()]))):
        raise VewaneError("non-finite covariate or offset values")

    return SieveDesign(
        y=y,
        X_ve=X_ve,
        X_alpha=X_alpha,
        offsets=offsets,
        T=T,
        tau=tau,
        Z=Z,
        ve_basis=ve_basis if mixture is None else bases,
        alpha=alpha,
        strains=strains,
        n_dropped_censored=n_dropped,
    )


def _split_theta(design: SieveDesign, theta: np.ndarray):
    betas = []
    pos = 0
    for d in design.d_blocks:
        betas.append(theta[pos : pos + d])
        pos += d
    return betas, theta[pos:]


def _linear_predictors(design: SieveDesign, theta: np.ndarray) -> np.ndarray:
    """(n, m) matrix of per-class predictors including fixed offsets."""
    betas, alpha = _split_theta(design, theta)
    a = design.X_alpha @ alpha if design.X_alpha.shape[1] else 0.0
    eta = np.empty((design.n_rows, design.n_classes))
    for k in range(design.n_classes):
        xb = design.X_ve[k] @ betas[k] if design.d_blocks[k] else 0.0
        eta[:, k] = xb + a + design.offsets[:, k]
    return eta


def _stacked_design(design: SieveDesign, k: int) -> np.ndarray:
    """Full (n, P) design for class k: zero-padded VE blocks plus shared alpha columns."""
    parts = []
    for j, X in enumerate(design.X_ve):
        parts.append(X if j == k else np.zeros_like(X))
    parts.append(design.X_alpha)
    return np.hstack(parts)


def loglik_derivs(design: SieveDesign, beta, alpha_coefs=None):
    """Exact log-likelihood, gradient, and hessian of the (multinomial) logistic model.

    `beta` may be the full stacked parameter vector (with alpha_coefs=None) or
    just the VE blocks with the alpha coefficients passed separately.
    """
    beta = np.asarray(beta, dtype=float)
    if alpha_coefs is None:
        theta = beta
    else:
        theta = np.concatenate([beta, np.asarray(alpha_coefs, dtype=float)])
    if theta.shape[0] != design.n_params:
        raise ValueError(f"expected {design.n_params} parameters, got {theta.shape[0]}")

    eta = _linear_predictors(design, theta)
    m = design.n_classes
    if m == 1:
        eta1 = eta[:, 0]
        yb = (design.y == 1).astype(float)
        ll = float(np.sum(yb * eta1 - np.logaddexp(0.0, eta1)))
        p = expit(eta1)
        X = _stacked_design(design, 0)
        resid = yb - p
        grad = X.T @ resid
        w = p * (1.0 - p)
        hess = -(X.T * w) @ X
        return ll, grad, hess

    padded = np.concatenate([np.zeros((design.n_rows, 1)), eta], axis=1)
    lse = logsumexp(padded, axis=1)
    picked = np.where(design.y > 0, np.take_along_axis(padded, design.y[:, None], axis=1)[:, 0], 0.0)
    ll = float(np.sum(picked - lse))
    Q = np.exp(eta - lse[:, None])

    P = design.n_params
    grad = np.zeros(P)
    h1 = np.zeros((P, P))
    B = np.zeros((design.n_rows, P))
    for k in range(m):
        Xk = _stacked_design(design, k)
        yk = (design.y == k + 1).astype(float)
        grad += Xk.T @ (yk - Q[:, k])
        h1 += (Xk.T * Q[:, k]) @ Xk
        B += Q[:, k][:, None] * Xk
    hess = -(h1 - B.T @ B)
    return ll, grad, hess


def _newton(derivs, theta0, max_iter=MAX_ITER, score_tol=SCORE_TOL, ll_tol=LOGLIK_TOL):
    """Newton-Raphson with step-halving; raises on singular information."""
    theta = np.asarray(theta0, dtype=float)
    ll, grad, hess = derivs(theta)
    iterations = 0
    step_norm = np.inf
    converged = theta.size == 0 or float(np.max(np.abs(grad))) < score_tol
    while not converged and iterations < max_iter:
        iterations += 1
        neg_h = -hess
        if not np.all(np.isfinite(neg_h)) or np.linalg.cond(neg_h) > CONDITION_BOUND:
            raise NonIdentifiableError("singular or ill-conditioned observed information")
        step = np.linalg.solve(neg_h, grad)
        scale = 1.0
        accepted = False
        for _ in range(40):
            cand = theta + scale * step
            ll_new, grad_new, hess_new = derivs(cand)
            if np.isfinite(ll_new) and ll_new >= ll:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            if np.isfinite(ll_new) and abs(ll_new - ll) < ll_tol:
                converged = True
                break
            raise NotConvergedError("step-halving failed to improve the log-likelihood")
        step_norm = float(np.max(np.abs(scale * step)))
        delta_ll = ll_new - ll
        theta, ll, grad, hess = cand, ll_new, grad_new, hess_new
        if float(np.max(np.abs(grad))) < score_tol or delta_ll < ll_tol:
            converged = True
    return theta, ll, grad, hess, converged, iterations, step_norm


def _check_identification(design: SieveDesign, theta: np.ndarray, ll: float | None = None) -> None:
    # fixed offsets (surveillance anchors, log-mixture terms) are data, not
    # parameters, so separation is judged on the parametric predictor part
    eta = _linear_predictors(design, theta) - design.offsets
    if np.max(np.abs(eta)) > SEPARATION_BOUND:
        raise NonIdentifiableError(
            f"separation: |linear predictor| exceeds {SEPARATION_BOUND} at the optimum"
        )
    # a numerically perfect fit means the optimizer was chasing an infinite MLE
    if ll is not None and ll > -1e-6:
        raise NonIdentifiableError("separation: the likelihood is saturated at the optimum")


def _alpha_fn(design: SieveDesign, theta: np.ndarray) -> SmoothFn:
    """The fitted alpha(t) as an evaluable function, fixed offsets included."""
    _, alpha_coefs = _split_theta(design, theta)
    if isinstance(design.alpha, BSplineBasis):
        from .smoothing import SplineFn

        return SplineFn(design.alpha, alpha_coefs)
    parts = []
    if design.alpha.offset is not None:
        parts.append(design.alpha.offset)
    const = design.alpha.fixed_value + (float(alpha_coefs[0]) if alpha_coefs.size else 0.0)
    parts.append(ConstantFn(const))
    return SumFn(parts) if len(parts) > 1 else parts[0]


def _resolve_alpha(dataset, alpha, knots, knot_placement):
    if alpha == "spline" or alpha is None:
        T = _infected_arrays(dataset)[0]
        if np.isscalar(knots) or knots is None:
            return default_alpha_basis(T, knots, knot_placement)
        lo, hi = float(T.min()), float(T.max())
        return BSplineBasis(3, tuple(float(k) for k in knots), (lo, hi))
    return alpha


def _fit_diagnostics(design, ll, grad, converged, iterations, step_norm):
    diag = {
        "iterations": iterations,
        "final_update_norm": step_norm if np.isfinite(step_norm) else 0.0,
        "loglik": ll,
        "score_max": float(np.max(np.abs(grad))) if grad.size else 0.0,
        "converged": bool(converged),
        "n_rows": design.n_rows,
        "n_dropped_censored": design.n_dropped_censored,
    }
    if isinstance(design.alpha, BSplineBasis):
        diag["alpha_mode"] = "spline"
        diag["knots"] = list(design.alpha.interior_knots)
        diag["boundary"] = list(design.alpha.boundary)
    else:
        diag["alpha_mode"] = "offset"
        diag["free_intercept"] = design.alpha.free_intercept
    return diag


def fit_design_theta(design: SieveDesign, free: np.ndarray | None = None):
    """Newton MLE over the free parameters of a design; returns the full theta."""
    if free is None:
        free = np.ones(design.n_params, dtype=bool)
    if design.n_rows < int(free.sum()) + 1:
        raise VewaneError(f"{design.n_rows} events cannot support {int(free.sum())} parameters")

    def derivs(th_free):
        th = np.zeros(design.n_params)
        th[free] = th_free
        ll, g, h = loglik_derivs(design, th)
        return ll, g[free], h[np.ix_(free, free)]

    th_free, ll, grad, hess, converged, iterations, step_norm = _newton(
        derivs, np.zeros(int(free.sum()))
    )
    theta = np.zeros(design.n_params)
    theta[free] = th_free
    _check_identification(design, theta, ll)
    return theta, ll, grad, hess, converged, iterations, step_norm


def fit_sieve_binary(
    dataset: Dataset,
    ve_basis: VEBasisSpec | None,
    knots=None,
    alpha="spline",
    offset: SmoothFn | None = None,
    knot_placement: str = "quantile",
) -> FitResult:
    """Newton MLE of (beta, alpha); covariance is the beta block of the inverse
    full observed information (profile covariance)."""
    alpha = _resolve_alpha(dataset, alpha, knots, knot_placement)
    design = build_design(dataset, ve_basis, alpha, extra_offset=offset)
    counts = np.bincount(design.y, minlength=2)
    if counts[0] == 0 or counts[1] == 0:
        raise OnlyOneCauseError("need events of both causes")
    d = design.d_total

    theta, ll, grad, hess, converged, iterations, step_norm = fit_design_theta(design)
    cov_full = np.linalg.inv(-hess)
    diag = _fit_diagnostics(design, ll, grad, converged, iterations, step_norm)
    return FitResult(
        method="sieve",
        beta=theta[:d],
        beta_cov=cov_full[:d, :d],
        basis=ve_basis if ve_basis is not None else VEBasisSpec("constant"),
        nuisance=_alpha_fn(design, theta),
        diagnostics=diag,
    )


def fit_sieve_multinomial(
    dataset: Dataset,
    ve_bases,
    mixture,
    knots=None,
    alpha="spline",
    offset: SmoothFn | None = None,
    knot_placement: str = "quantile",
) -> FitResult:
    """Stacked per-strain Newton MLE with log p_s(T) entering as class offsets.

    Strains without events are flagged non-identifiable: their coefficients are
    pinned at zero during optimization and reported as NaN.
    """
    alpha = _resolve_alpha(dataset, alpha, knots, knot_placement)
    design = build_design(dataset, ve_bases, alpha, mixture=mixture, extra_offset=offset)
    m = design.n_classes
    class_counts = np.bincount(design.y, minlength=m + 1)
    if class_counts[0] == 0 or class_counts[1:].sum() == 0:
        raise OnlyOneCauseError("need both irrelevant and preventable events")
    dead = [k for k in range(m) if class_counts[k + 1] == 0]

    free = np.ones(design.n_params, dtype=bool)
    pos = 0
    for k, dk in enumerate(design.d_blocks):
        if k in dead:
            free[pos : pos + dk] = False
        pos += dk

    theta, ll, grad, hess, converged, iterations, step_norm = fit_design_theta(design, free)
    cov_free = np.linalg.inv(-hess)
    cov_full = np.full((design.n_params, design.n_params), np.nan)
    cov_full[np.ix_(free, free)] = cov_free
    d = design.d_total
    beta = theta[:d].copy()
    pos = 0
    for k, dk in enumerate(design.d_blocks):
        if k in dead:
            beta[pos : pos + dk] = np.nan
        pos += dk

    diag = _fit_diagnostics(design, ll, grad, converged, iterations, step_norm)
    diag["nonidentifiable_strains"] = [design.strains[k] for k in dead]
    return FitResult(
        method="sieve-multinomial",
        beta=beta,
        beta_cov=cov_full[:d, :d],
        basis=list(design.ve_basis),
        nuisance=_alpha_fn(design, theta),
        diagnostics=diag,
        strains=design.strains,
    )
