"""Estimator-style wrappers: hyperparameters at construction, `fit(dataset)`,
fitted attributes with trailing underscores, and get_params/set_params so the
models compose with pipeline-style tooling."""

from __future__ import annotations

import inspect

import numpy as np

from .core import Dataset, VEBasisSpec, ve_from_f, eval_ve_basis
from .cox import fit_cox_tv
from .report import ve_curve
from .sieve import fit_sieve_binary, fit_sieve_multinomial
from .tmle import fit_tmle_binary, fit_tmle_multinomial


class BaseVEEstimator:
    """Minimal estimator protocol; subclasses implement _fit(dataset)."""

    def get_params(self, deep: bool = True) -> dict:
        names = [
            p.name
            for p in inspect.signature(type(self).__init__).parameters.values()
            if p.name != "self" and p.kind != p.VAR_KEYWORD
        ]
        return {name: getattr(self, name) for name in names}

    def set_params(self, **params) -> "BaseVEEstimator":
        valid = self.get_params()
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"invalid parameter {key!r} for {type(self).__name__}")
            setattr(self, key, value)
        return self

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"

    def _basis(self) -> VEBasisSpec:
        return VEBasisSpec(self.basis, ramp_length=self.ramp_length)

    def fit(self, dataset: Dataset) -> "BaseVEEstimator":
        if not isinstance(dataset, Dataset):
            raise TypeError("fit expects a validated Dataset")
        result = self._fit(dataset)
        self.result_ = result
        self.beta_ = result.beta
        self.beta_cov_ = result.beta_cov
        self.diagnostics_ = result.diagnostics
        return self

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise ValueError("call fit() first")

    def predict_f(self, tau, strain: int | None = None) -> np.ndarray:
        """Log hazard ratio at times-since-vaccination tau."""
        self._check_fitted()
        if self.result_.strains is not None:
            beta, _, basis = self.result_.strain_block(strain)
        else:
            beta, basis = self.result_.beta, self.result_.basis
        return eval_ve_basis(basis, np.asarray(tau, dtype=float)) @ beta

    def predict(self, tau, strain: int | None = None) -> np.ndarray:
        """VE(tau) = 1 - exp(f(tau))."""
        return ve_from_f(self.predict_f(tau, strain=strain))

    def curve(self, tau_grid, level: float = 0.95, strain: int | None = None):
        self._check_fitted()
        return ve_curve(self.result_, tau_grid, level=level, strain=strain)


class CoxVE(BaseVEEstimator):
    def __init__(self, basis: str = "linear", ramp_length: float | None = None):
        self.basis = basis
        self.ramp_length = ramp_length

    def _fit(self, dataset):
        return fit_cox_tv(dataset, self._basis())


class SieveVE(BaseVEEstimator):
    def __init__(
        self,
        basis: str = "linear",
        ramp_length: float | None = None,
        knots: int | None = None,
        knot_placement: str = "quantile",
        mixture=None,
    ):
        self.basis = basis
        self.ramp_length = ramp_length
        self.knots = knots
        self.knot_placement = knot_placement
        self.mixture = mixture

    def _fit(self, dataset):
        if self.mixture is None:
            return fit_sieve_binary(
                dataset, self._basis(), knots=self.knots, knot_placement=self.knot_placement
            )
        return fit_sieve_multinomial(
            dataset, self._basis(), self.mixture, knots=self.knots,
            knot_placement=self.knot_placement,
        )


class TmleVE(BaseVEEstimator):
    def __init__(
        self,
        basis: str = "linear",
        ramp_length: float | None = None,
        smoother: str = "pspline",
        knots: int | None = None,
        knot_placement: str = "quantile",
        tol: float = 1e-6,
        max_iter: int = 50,
        mixture=None,
    ):
        self.basis = basis
        self.ramp_length = ramp_length
        self.smoother = smoother
        self.knots = knots
        self.knot_placement = knot_placement
        self.tol = tol
        self.max_iter = max_iter
        self.mixture = mixture

    def _fit(self, dataset):
        if self.mixture is None:
            return fit_tmle_binary(
                dataset, self._basis(), smoother=self.smoother, knots=self.knots,
                knot_placement=self.knot_placement, tol=self.tol, max_iter=self.max_iter,
            )
        return fit_tmle_multinomial(
            dataset, self._basis(), self.mixture, smoother=self.smoother, knots=self.knots,
            knot_placement=self.knot_placement, tol=self.tol, max_iter=self.max_iter,
        )
