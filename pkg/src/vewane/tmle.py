"""Targeted maximum likelihood estimation of the VE parameters.

Starting from the sieve MLE, each iteration re-estimates the conditional-mean
nuisance r(t), forms the clever covariate H = Z psi(tau) - r(T), fluctuates the
fitted probabilities along H via an offset (multinomial) logistic regression,
and profile-re-smooths alpha(t).  The final targeted probabilities solve the
efficient-influence-curve equation to solver precision; the covariance is the
n-scaled empirical covariance of the estimated EIC.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, logit

from .core import (
    Dataset,
    FitResult,
    NonIdentifiableError,
    OnlyOneCauseError,
    VEBasisSpec,
    VewaneError,
)
from .sieve import SieveDesign, _resolve_alpha, build_design, fit_design_theta
from .smoothing import (
    BSplineBasis,
    SmoothFn,
    kernel_smooth,
    silverman_bandwidth,
    weighted_spline_smooth,
)

POSITIVITY_DELTA = 1e-6
DEGENERATE_WEIGHT = 1e-12


@dataclass
class TmleNuisance:
    """Final targeted state: alpha fit, r estimates, clever covariates, probabilities."""

    alpha_fn: SmoothFn
    r_fns: list  # per strain: list of d SmoothFn components
    H: np.ndarray  # (n, D) stacked clever covariates
    q_final: np.ndarray  # (n, m) targeted class probabilities
    score_rows: np.ndarray  # (n, D) efficient score at the targeted fit
    info_eff: np.ndarray  # (D, D) derivation-form efficient information
    y: np.ndarray  # class codes, used to check fit/dataset pairing
    free: np.ndarray  # identifiable beta coordinates

    def to_dict(self) -> dict:
        return {
            "tmle_nuisance": True,
            "alpha": self.alpha_fn.to_dict(),
            "r_fns": [[r.to_dict() for r in block] for block in self.r_fns],
            "H": self.H.tolist(),
            "q_final": self.q_final.tolist(),
            "score_rows": self.score_rows.tolist(),
            "info_eff": self.info_eff.tolist(),
            "y": self.y.tolist(),
            "free": self.free.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "TmleNuisance":
        from .smoothing import smooth_fn_from_dict

        return TmleNuisance(
            alpha_fn=smooth_fn_from_dict(d["alpha"]),
            r_fns=[[smooth_fn_from_dict(r) for r in block] for block in d["r_fns"]],
            H=np.asarray(d["H"]),
            q_final=np.asarray(d["q_final"]),
            score_rows=np.asarray(d["score_rows"]),
            info_eff=np.asarray(d["info_eff"]),
            y=np.asarray(d["y"]),
            free=np.asarray(d["free"], dtype=bool),
        )


def estimate_r(
    T,
    values,
    weights,
    smoother: str = "pspline",
    kernel: str = "epanechnikov",
    bandwidth=None,
    n_knots=None,
) -> list[SmoothFn]:
    """Weighted smooth of each column of `values` against T.

    Using the same weights in numerator and denominator enforces the ratio form
    E[value * w | T] / E[w | T].
    """
    values = np.atleast_2d(np.asarray(values, dtype=float).T).T
    weights = np.asarray(weights, dtype=float)
    if np.max(weights) < DEGENERATE_WEIGHT:
        raise VewaneError("degenerate probability weights: nothing to smooth")
    fns = []
    for j in range(values.shape[1]):
        if smoother == "pspline":
            fns.append(weighted_spline_smooth(T, values[:, j], weights, n_knots=n_knots))
        elif smoother == "kernel":
            fns.append(kernel_smooth(T, values[:, j], weights, kernel=kernel, bandwidth=bandwidth))
        else:
            raise ValueError(f"unknown smoother {smoother!r}")
    return fns


def clever_covariate(z_psi, T, r_fns) -> np.ndarray:
    """H = Z(T) psi(T-V) - r(T), rowwise."""
    z_psi = np.atleast_2d(np.asarray(z_psi, dtype=float))
    T = np.atleast_1d(np.asarray(T, dtype=float))
    r_vals = np.column_stack([fn(T) for fn in r_fns])
    return z_psi - r_vals


def _class_probs(eta: np.ndarray):
    """Q (n, m) and the baseline-inclusive normalizer for per-class predictors."""
    padded = np.concatenate([np.zeros((eta.shape[0], 1)), eta], axis=1)
    lse = logsumexp(padded, axis=1)
    return np.exp(eta - lse[:, None])


def _block_slices(dims: list[int]):
    out, pos = [], 0
    for d in dims:
        out.append(slice(pos, pos + d))
        pos += d
    return out


def _fluctuation_fit(eta_base: np.ndarray, H_blocks: list[np.ndarray], y: np.ndarray, free: np.ndarray):
    """Offset (multinomial) logistic regression of the class labels on the clever
    covariates; returns the stacked fluctuation coefficients."""
    m = eta_base.shape[1]
    dims = [h.shape[1] for h in H_blocks]
    slices = _block_slices(dims)
    D = sum(dims)
    eps = np.zeros(D)

    def derivs(e):
        eta = eta_base.copy()
        for k in range(m):
            eta[:, k] += H_blocks[k] @ e[slices[k]]
        Q = _class_probs(eta)
        grad = np.zeros(D)
        h1 = np.zeros((D, D))
        B = np.zeros((eta.shape[0], D))
        ll = 0.0
        for k in range(m):
            yk = (y == k + 1).astype(float)
            Hk = H_blocks[k]
            grad[slices[k]] = Hk.T @ (yk - Q[:, k])
            h1[slices[k], slices[k]] += (Hk.T * Q[:, k]) @ Hk
            B[:, slices[k]] = Q[:, k][:, None] * Hk
        # off-diagonal blocks of sum_s X' diag(Q_s) X vanish (block-diagonal H)
        hess = -(h1 - B.T @ B)
        padded = np.concatenate([np.zeros((eta.shape[0], 1)), eta], axis=1)
        lse = logsumexp(padded, axis=1)
        picked = np.where(y > 0, np.take_along_axis(padded, y[:, None], axis=1)[:, 0], 0.0)
        ll = float(np.sum(picked - lse))
        return ll, grad, hess

    ll, grad, hess = derivs(eps)
    for _ in range(60):
        g = grad[free]
        if g.size == 0 or float(np.max(np.abs(g))) < 1e-11:
            break
        h = hess[np.ix_(free, free)]
        try:
            step = np.linalg.solve(-h, g)
        except np.linalg.LinAlgError:
            raise NonIdentifiableError("singular fluctuation information") from None
        scale = 1.0
        for _ in range(40):
            cand = eps.copy()
            cand[free] += scale * step
            ll_new, grad_new, hess_new = derivs(cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12:
                break
            scale *= 0.5
        eps, ll, grad, hess = cand, ll_new, grad_new, hess_new
    return eps


def _efficient_scores(design: SieveDesign, Q: np.ndarray, r_vals: list[np.ndarray]):
    """Per-row efficient score S and the derivation-form information P_n[E(SS'|V,T)].

    S_s = Z psi_s (Y_s - Q_s) - r_s(T) (J - Q);  the conditional second moment
    uses Cov(Y_s, Y_r | V, T) = Q_s (1{s=r} - Q_r).
    """
    n, m = Q.shape
    dims = design.d_blocks
    D = sum(dims)
    slices = _block_slices(dims)
    qtot = Q.sum(axis=1)
    J = (design.y > 0).astype(float)

    S = np.zeros((n, D))
    for k in range(m):
        yk = (design.y == k + 1).astype(float)
        S[:, slices[k]] = design.X_ve[k] * (yk - Q[:, k])[:, None] - r_vals[k] * (J - qtot)[:, None]

    info = np.zeros((D, D))
    u = np.zeros((n, D))  # sum_s Q_s G_s rows
    v = np.zeros((n, D))  # sum_s Q_s (1 - Q) G_s rows
    a = np.zeros((n, D))  # stacked r_s(T)
    for k in range(m):
        Gk = design.X_ve[k]
        info[slices[k], slices[k]] += (Gk.T * Q[:, k]) @ Gk
        u[:, slices[k]] = Q[:, k][:, None] * Gk
        v[:, slices[k]] = (Q[:, k] * (1.0 - qtot))[:, None] * Gk
        a[:, slices[k]] = r_vals[k]
    info -= u.T @ u
    info -= v.T @ a + a.T @ v
    info += (a.T * (qtot * (1.0 - qtot))) @ a
    return S, info / n


def _tmle_engine(
    design: SieveDesign,
    theta0: np.ndarray,
    free: np.ndarray,
    smoother: str,
    kernel: str,
    bandwidth,
    tol: float,
    max_iter: int,
    delta: float,
    update_alpha: bool,
    alpha_fn0: SmoothFn,
    n_knots_r=None,
):
    m = design.n_classes
    dims = design.d_blocks
    D = sum(dims)
    slices = _block_slices(dims)
    T = design.T
    y = design.y
    betas = [theta0[s].copy() for s in slices]
    c_vec = design.X_alpha @ theta0[D:] if design.X_alpha.shape[1] else np.zeros(design.n_rows)
    alpha_fn = alpha_fn0

    if bandwidth is None and smoother == "kernel":
        bandwidth = silverman_bandwidth(T)

    def predictors():
        eta = np.empty((design.n_rows, m))
        for k in range(m):
            eta[:, k] = design.X_ve[k] @ betas[k] + c_vec + design.offsets[:, k]
        return eta

    truncated_max = 0
    eps_norm = np.inf
    converged = False
    iterations = 0
    eta = predictors()
    for it in range(1, max_iter + 1):
        iterations = it
        Q = _class_probs(eta)
        qtot = Q.sum(axis=1)
        clipped = np.clip(qtot, delta, 1.0 - delta)
        truncated_max = max(truncated_max, int(np.sum(clipped != qtot)))
        b = clipped * (1.0 - clipped)
        if np.max(b) < DEGENERATE_WEIGHT:
            raise VewaneError("degenerate probability weights")

        r_fns, r_vals, H_blocks = [], [], []
        with np.errstate(invalid="ignore"):
            ratio = np.where(b > 0, 1.0 / b, 0.0)
        for k in range(m):
            scale = (Q[:, k] * (1.0 - qtot)) * ratio
            vals = design.X_ve[k] * scale[:, None]
            fns = estimate_r(T, vals, b, smoother, kernel, bandwidth, n_knots_r)
            rv = np.column_stack([fn(T) for fn in fns])
            r_fns.append(fns)
            r_vals.append(rv)
            H_blocks.append(design.X_ve[k] - rv)

        eps = _fluctuation_fit(eta, H_blocks, y, free)
        eps_norm = float(np.max(np.abs(eps))) if eps.size else 0.0
        eta_star = eta.copy()
        for k in range(m):
            betas[k] = betas[k] + eps[slices[k]]
            eta_star[:, k] += H_blocks[k] @ eps[slices[k]]
        q_star = _class_probs(eta_star)

        if eps_norm < tol:
            converged = True
            Q_final, r_vals_final, r_fns_final, H_final = q_star, r_vals, r_fns, H_blocks
            break

        if update_alpha:
            # profile update: shift alpha so the total-preventable odds match the
            # fluctuated fit, then re-smooth over calendar time
            qs_tot = np.clip(q_star.sum(axis=1), delta, 1.0 - delta)
            eta_beta = np.empty_like(eta)
            for k in range(m):
                eta_beta[:, k] = design.X_ve[k] @ betas[k] + design.offsets[:, k]
            log_denom = logsumexp(eta_beta, axis=1)
            target = logit(qs_tot) - log_denom
            w_star = qs_tot * (1.0 - qs_tot)
            fn = weighted_spline_smooth(T, target, w_star)
            alpha_fn = fn
            c_vec = fn(T)
        eta = predictors()
        Q_final, r_vals_final, r_fns_final, H_final = q_star, r_vals, r_fns, H_blocks

    S, info = _efficient_scores(design, Q_final, r_vals_final)
    H_stacked = np.hstack(H_final)
    info_free = info[np.ix_(free, free)]
    if info_free.size and np.linalg.cond(info_free) > 1e12:
        raise NonIdentifiableError("singular efficient information")
    eic = np.full((design.n_rows, D), np.nan)
    beta_cov = np.full((D, D), np.nan)
    if info_free.size:
        eic_free = S[:, free] @ np.linalg.inv(info_free)
        eic[:, free] = eic_free
        centered = eic_free - eic_free.mean(axis=0)
        beta_cov[np.ix_(free, free)] = (centered.T @ centered) / design.n_rows**2

    return {
        "beta": np.concatenate(betas) if betas else np.zeros(0),
        "beta_cov": beta_cov,
        "eic": eic,
        "H": H_stacked,
        "q_final": Q_final,
        "score_rows": S,
        "info_eff": info,
        "free": free,
        "r_fns": r_fns_final,
        "alpha_fn": alpha_fn,
        "iterations": iterations,
        "last_eps_norm": eps_norm,
        "converged": converged,
        "truncated_rows_max": truncated_max,
    }


def _loglik_at(design, Q):
    y = design.y
    qtot = Q.sum(axis=1)
    pick = np.where(y > 0, np.take_along_axis(Q, np.maximum(y - 1, 0)[:, None], axis=1)[:, 0], 1 - qtot)
    return float(np.sum(np.log(np.clip(pick, 1e-300, None))))


def _finish_fit(design, engine, init_iterations, tol):
    eic_free = engine["eic"][:, engine["free"]]
    diag = {
        "iterations": engine["iterations"],
        "final_update_norm": engine["last_eps_norm"],
        "loglik": _loglik_at(design, engine["q_final"]),
        "converged": engine["converged"],
        "n_rows": design.n_rows,
        "n_dropped_censored": design.n_dropped_censored,
        "tol": tol,
        "truncated_rows_max": engine["truncated_rows_max"],
        "truncated_fraction_max": engine["truncated_rows_max"] / design.n_rows,
        "eic_abs_mean_max": float(np.max(np.abs(eic_free.mean(axis=0)))) if eic_free.size else 0.0,
        "init_iterations": init_iterations,
        "smoother_note": "penalized B-spline / NW kernel in place of GAM nuisance smoothers",
        "info_eff_form": "Pn[Q(1-Q) H H'] derivation form (printed (J-Q) form not used)",
    }
    nuis = TmleNuisance(
        alpha_fn=engine["alpha_fn"],
        r_fns=engine["r_fns"],
        H=engine["H"],
        q_final=engine["q_final"],
        score_rows=engine["score_rows"],
        info_eff=engine["info_eff"],
        y=design.y,
        free=engine["free"],
    )
    return diag, nuis


def fit_tmle_binary(
    dataset: Dataset,
    ve_basis: VEBasisSpec,
    smoother: str = "pspline",
    kernel: str = "epanechnikov",
    bandwidth=None,
    knots=None,
    alpha="spline",
    offset: SmoothFn | None = None,
    tol: float = 1e-6,
    max_iter: int = 50,
    delta: float = POSITIVITY_DELTA,
    knot_placement: str = "quantile",
) -> FitResult:
    """Iterative targeting of the binary VE model initialized at the sieve MLE."""
    alpha_struct = _resolve_alpha(dataset, alpha, knots, knot_placement)
    design = build_design(dataset, ve_basis, alpha_struct, extra_offset=offset)
    counts = np.bincount(design.y, minlength=2)
    if counts[0] == 0 or counts[1] == 0:
        raise OnlyOneCauseError("need events of both causes")
    if design.n_rows < 50:
        raise VewaneError(f"targeting needs at least 50 events, got {design.n_rows}")

    theta0, _, _, _, _, init_iter, _ = fit_design_theta(design)
    from .sieve import _alpha_fn

    engine = _tmle_engine(
        design,
        theta0,
        np.ones(design.d_total, dtype=bool),
        smoother,
        kernel,
        bandwidth,
        tol,
        max_iter,
        delta,
        update_alpha=isinstance(design.alpha, BSplineBasis),
        alpha_fn0=_alpha_fn(design, theta0),
    )
    diag, nuis = _finish_fit(design, engine, init_iter, tol)
    return FitResult(
        method="tmle",
        beta=engine["beta"],
        beta_cov=engine["beta_cov"],
        basis=ve_basis,
        nuisance=nuis,
        diagnostics=diag,
    )


def fit_tmle_multinomial(
    dataset: Dataset,
    ve_bases,
    mixture,
    kernel: str = "epanechnikov",
    bandwidth=None,
    smoother: str = "kernel",
    knots=None,
    alpha="spline",
    offset: SmoothFn | None = None,
    tol: float = 1e-6,
    max_iter: int = 50,
    delta: float = POSITIVITY_DELTA,
    knot_placement: str = "quantile",
) -> FitResult:
    """Per-strain targeting with NW kernel nuisance estimates and class offsets log p_s(t)."""
    alpha_struct = _resolve_alpha(dataset, alpha, knots, knot_placement)
    design = build_design(dataset, ve_bases, alpha_struct, mixture=mixture, extra_offset=offset)
    m = design.n_classes
    class_counts = np.bincount(design.y, minlength=m + 1)
    if class_counts[0] == 0 or class_counts[1:].sum() == 0:
        raise OnlyOneCauseError("need both irrelevant and preventable events")
    if design.n_rows < 50:
        raise VewaneError(f"targeting needs at least 50 events, got {design.n_rows}")
    dead = [k for k in range(m) if class_counts[k + 1] == 0]

    free_theta = np.ones(design.n_params, dtype=bool)
    free_beta = np.ones(design.d_total, dtype=bool)
    pos = 0
    for k, dk in enumerate(design.d_blocks):
        if k in dead:
            free_theta[pos : pos + dk] = False
            free_beta[pos : pos + dk] = False
        pos += dk

    theta0, _, _, _, _, init_iter, _ = fit_design_theta(design, free_theta)
    from .sieve import _alpha_fn

    engine = _tmle_engine(
        design,
        theta0,
        free_beta,
        smoother,
        kernel,
        bandwidth,
        tol,
        max_iter,
        delta,
        update_alpha=isinstance(design.alpha, BSplineBasis),
        alpha_fn0=_alpha_fn(design, theta0),
    )
    beta = engine["beta"].copy()
    cov = engine["beta_cov"]
    beta[~free_beta] = np.nan

    diag, nuis = _finish_fit(design, engine, init_iter, tol)
    diag["nonidentifiable_strains"] = [design.strains[k] for k in dead]
    return FitResult(
        method="tmle-multinomial",
        beta=beta,
        beta_cov=cov,
        basis=list(design.ve_basis),
        nuisance=nuis,
        diagnostics=diag,
        strains=design.strains,
    )


def eic_values(fit: FitResult, dataset: Dataset) -> np.ndarray:
    """Per-observation efficient influence curve rows of a TMLE fit on its dataset."""
    if not fit.method.startswith("tmle"):
        raise VewaneError(f"eic_values needs a TMLE fit, got method {fit.method!r}")
    nuis = fit.nuisance
    if isinstance(nuis, dict):
        nuis = TmleNuisance.from_dict(nuis)
    if not isinstance(nuis, TmleNuisance):
        raise VewaneError("fit carries no TMLE nuisance state")
    arr = dataset.arrays()
    cause = arr["cause"][arr["cause"] >= 0]
    if cause.shape[0] != nuis.y.shape[0]:
        raise VewaneError("dataset does not match the fitted rows")
    j_data = (cause == 1).astype(np.int64)
    j_fit = (nuis.y > 0).astype(np.int64)
    if not np.array_equal(j_data, j_fit):
        raise VewaneError("dataset does not match the fitted rows")
    out = np.full(nuis.score_rows.shape, np.nan)
    free = nuis.free
    info_free = nuis.info_eff[np.ix_(free, free)]
    out[:, free] = nuis.score_rows[:, free] @ np.linalg.inv(info_free)
    return out
