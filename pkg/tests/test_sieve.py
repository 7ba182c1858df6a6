import math

import numpy as np
import pytest

from vewane.core import Cause, EventRecord, OnlyOneCauseError, NonIdentifiableError, VEBasisSpec, VewaneError, validate_dataset
from vewane.sieve import (
    FixedOffset,
    build_design,
    default_alpha_basis,
    fit_sieve_binary,
    fit_sieve_multinomial,
    loglik_derivs,
)
from vewane.simulate import ScenarioSpec, simulate_cohort, substream_seed
from vewane.smoothing import BSplineBasis, ConstantFn
from vewane.surveillance import VariantMix

from .conftest import make_records
from .oracles import finite_diff_gradient, finite_diff_jacobian, logistic_loglik_reference, max_rel_err

LINEAR = VEBasisSpec("linear")
INTERCEPT_ONLY = FixedOffset(free_intercept=True)


def two_cause_records(n_prev=6, n_irr=5):
    rows = []
    for i in range(n_prev):
        rows.append((f"p{i}", 0.05 * i, 0.1 + 0.08 * i, Cause.PREVENTABLE))
    for i in range(n_irr):
        rows.append((f"i{i}", None, 0.15 + 0.08 * i, Cause.IRRELEVANT))
    return make_records(rows)


class TestBuildDesign:
    def test_vaccinated_row(self):
        ds = make_records([("a", 0.2, 0.5, Cause.PREVENTABLE), ("b", None, 0.4, Cause.IRRELEVANT)])
        design = build_design(ds, LINEAR, INTERCEPT_ONLY)
        assert np.allclose(design.X_ve[0][0], [1.0, 0.3])

    def test_unvaccinated_row(self):
        ds = make_records([("a", None, 0.5, Cause.IRRELEVANT), ("b", 0.1, 0.4, Cause.PREVENTABLE)])
        design = build_design(ds, LINEAR, INTERCEPT_ONLY)
        assert np.allclose(design.X_ve[0][0], [0.0, 0.0])

    def test_censored_dropped_and_counted(self, rng):
        rows = []
        for i in range(60):
            cause = Cause.PREVENTABLE if i % 2 else Cause.IRRELEVANT
            rows.append((f"e{i}", None, 0.1 + 0.8 * i / 60, cause))
        for i in range(40):
            rows.append((f"c{i}", None, 1.0, Cause.CENSORED))
        design = build_design(make_records(rows), LINEAR, INTERCEPT_ONLY)
        assert design.n_rows == 60
        assert design.n_dropped_censored == 40

    def test_event_outside_boundary(self):
        ds = two_cause_records()
        basis = BSplineBasis(3, (), (0.0, 0.3))
        with pytest.raises(VewaneError, match="boundary"):
            build_design(ds, LINEAR, basis)


class TestLoglikDerivs:
    def test_all_zero_parameters(self):
        ds = two_cause_records()
        design = build_design(ds, LINEAR, INTERCEPT_ONLY)
        ll, _, _ = loglik_derivs(design, np.zeros(3))
        assert ll == pytest.approx(design.n_rows * math.log(0.5))

    def test_matches_reference_loglik(self, rng):
        sc = ScenarioSpec(n=3000, seed=17)
        ds, _ = simulate_cohort(sc)
        design = build_design(ds, LINEAR, default_alpha_basis(
            np.array([r.event_time for r in ds.records if r.cause != Cause.CENSORED])))
        theta = rng.normal(0, 0.4, design.n_params)
        ll, _, _ = loglik_derivs(design, theta)
        eta = np.hstack([design.X_ve[0], design.X_alpha]) @ theta + design.offsets[:, 0]
        assert ll == pytest.approx(logistic_loglik_reference(eta, design.y), rel=1e-12)

    def test_intercept_only_closed_form(self):
        ds = make_records([("a", None, 0.3, Cause.PREVENTABLE), ("b", None, 0.5, Cause.IRRELEVANT)])
        fit = fit_sieve_binary(ds, None, alpha=INTERCEPT_ONLY)
        assert fit.nuisance(0.4)[0] == pytest.approx(0.0, abs=1e-9)
        assert fit.diagnostics["loglik"] == pytest.approx(2 * math.log(0.5))

    def test_offset_only_logit_of_mean(self):
        rows = [(f"p{i}", None, 0.1 + 0.01 * i, Cause.PREVENTABLE) for i in range(30)]
        rows += [(f"i{i}", None, 0.12 + 0.01 * i, Cause.IRRELEVANT) for i in range(10)]
        fit = fit_sieve_binary(make_records(rows), None, alpha=INTERCEPT_ONLY)
        assert fit.nuisance(0.2)[0] == pytest.approx(math.log(30 / 10), abs=1e-8)

    def test_gradient_hessian_finite_diff(self, rng):
        sc = ScenarioSpec(n=2000, seed=23)
        ds, _ = simulate_cohort(sc)
        design = build_design(ds, LINEAR, default_alpha_basis(
            np.array([r.event_time for r in ds.records if r.cause != Cause.CENSORED]), knots=2))
        for _ in range(5):
            theta = rng.normal(0, 0.3, design.n_params)
            ll, grad, hess = loglik_derivs(design, theta)
            fd_grad = finite_diff_gradient(lambda th: loglik_derivs(design, th)[0], theta)
            assert max_rel_err(grad, fd_grad) < 1e-6
            fd_hess = finite_diff_jacobian(lambda th: loglik_derivs(design, th)[1], theta)
            assert max_rel_err(hess, (fd_hess + fd_hess.T) / 2) < 1e-6

    def test_dimension_mismatch(self):
        design = build_design(two_cause_records(), LINEAR, INTERCEPT_ONLY)
        with pytest.raises(ValueError):
            loglik_derivs(design, np.zeros(7))


class TestFitSieveBinary:
    def test_recovers_truth_small_mc(self, rng):
        base = ScenarioSpec(n=10_000, sigma_u=2.0)
        betas = []
        for r in range(12):
            ds, _ = simulate_cohort(ScenarioSpec(**{**base.to_dict(), "ve_basis": base.ve_basis,
                                                    "beta_true": base.beta_true, "seed": substream_seed(51, r)}))
            betas.append(fit_sieve_binary(ds, LINEAR).beta)
        mean = np.mean(betas, axis=0)
        assert np.allclose(mean, [-1.0, 0.0], atol=0.2)

    def test_only_one_cause(self):
        rows = [(f"p{i}", 0.01 * i, 0.1 + 0.01 * i, Cause.PREVENTABLE) for i in range(40)]
        with pytest.raises(OnlyOneCauseError):
            fit_sieve_binary(make_records(rows), LINEAR, alpha=INTERCEPT_ONLY)

    def test_separation_detected(self):
        rows = [(f"p{i}", 0.0, 0.1 + 0.01 * i, Cause.PREVENTABLE) for i in range(40)]
        rows += [(f"i{i}", None, 0.1 + 0.01 * i, Cause.IRRELEVANT) for i in range(40)]
        with pytest.raises((NonIdentifiableError,)):
            fit_sieve_binary(make_records(rows), VEBasisSpec("constant"), alpha=INTERCEPT_ONLY)

    def test_offset_invariance(self, small_cohort):
        _, ds, _ = small_cohort
        base = fit_sieve_binary(ds, LINEAR)
        shifted = fit_sieve_binary(ds, LINEAR, offset=ConstantFn(2.5))
        assert np.allclose(base.beta, shifted.beta, atol=1e-8)

    def test_time_translation_equivariance(self, small_cohort):
        _, ds, _ = small_cohort
        delta = 3.0
        shifted_records = [
            EventRecord(r.id, None if r.vax_time is None else r.vax_time + delta,
                        r.event_time + delta, r.cause, r.strain)
            for r in ds.records
        ]
        shifted = validate_dataset(shifted_records, ds.horizon + delta)
        fit0 = fit_sieve_binary(ds, LINEAR)
        knots0 = np.asarray(fit0.diagnostics["knots"])
        b0 = fit0.diagnostics["boundary"]
        basis_shifted = BSplineBasis(3, tuple(knots0 + delta), (b0[0] + delta, b0[1] + delta))
        fit1 = fit_sieve_binary(shifted, LINEAR, alpha=basis_shifted)
        assert np.allclose(fit0.beta, fit1.beta, atol=1e-8)

    def test_monotone_ascent_endpoint(self, small_cohort):
        _, ds, _ = small_cohort
        fit = fit_sieve_binary(ds, LINEAR)
        design = build_design(ds, LINEAR, BSplineBasis(3, tuple(fit.diagnostics["knots"]),
                                                       tuple(fit.diagnostics["boundary"])))
        ll0 = loglik_derivs(design, np.zeros(design.n_params))[0]
        assert fit.diagnostics["loglik"] >= ll0
        assert fit.diagnostics["converged"]
        assert fit.diagnostics["score_max"] < 1e-6

    def test_ispl_product_equals_loglik(self, rng):
        # the individually-stratified partial likelihood, written directly
        sc = ScenarioSpec(n=1500, seed=29)
        ds, _ = simulate_cohort(sc)
        fit = fit_sieve_binary(ds, LINEAR)
        alpha_fn = fit.nuisance
        ll = 0.0
        for r in ds.records:
            if r.cause == Cause.CENSORED:
                continue
            z = r.vax_time is not None and r.vax_time <= r.event_time
            f = fit.beta @ [1.0, r.event_time - r.vax_time] if z else 0.0
            eta = f + float(alpha_fn(r.event_time)[0])
            p = math.exp(eta) / (1 + math.exp(eta))
            ll += math.log(p if r.cause == Cause.PREVENTABLE else 1 - p)
        assert ll == pytest.approx(fit.diagnostics["loglik"], rel=1e-10)


def step_mixture():
    return VariantMix((0.25, 0.75), (1, 2), ((1.0, 0.0), (0.0, 1.0)))


class TestFitSieveMultinomial:
    def test_single_strain_degenerates_to_binary(self, small_cohort):
        _, ds, _ = small_cohort
        labeled = validate_dataset(
            [EventRecord(r.id, r.vax_time, r.event_time, r.cause,
                         1 if r.cause == Cause.PREVENTABLE else None) for r in ds.records],
            ds.horizon)
        mix = VariantMix((0.5,), (1,), ((1.0,),))
        multi = fit_sieve_multinomial(labeled, LINEAR, mix)
        binary = fit_sieve_binary(ds, LINEAR)
        assert np.allclose(multi.beta, binary.beta, atol=1e-8)
        assert np.allclose(multi.beta_cov, binary.beta_cov, atol=1e-8)

    def test_missing_strain_rejected(self, small_cohort):
        _, ds, _ = small_cohort
        with pytest.raises(VewaneError, match="impute"):
            fit_sieve_multinomial(ds, LINEAR, step_mixture())

    def test_zero_mixture_at_event_rejected(self):
        rows = [(f"p{i}", 0.0, 0.1 + 0.005 * i, Cause.PREVENTABLE, 2) for i in range(25)]
        rows += [(f"i{i}", None, 0.1 + 0.005 * i, Cause.IRRELEVANT) for i in range(25)]
        # strain-2 events all before 0.25 where p_2 = 0
        with pytest.raises(VewaneError, match="zero"):
            fit_sieve_multinomial(make_records(rows), LINEAR, step_mixture())

    def test_dead_strain_flagged_other_returned(self, small_cohort):
        _, ds, _ = small_cohort
        labeled = validate_dataset(
            [EventRecord(r.id, r.vax_time, r.event_time, r.cause,
                         1 if r.cause == Cause.PREVENTABLE else None) for r in ds.records],
            ds.horizon)
        mix = VariantMix((0.5,), (1, 2), ((0.6, 0.4),))
        fit = fit_sieve_multinomial(labeled, LINEAR, mix)
        assert fit.diagnostics["nonidentifiable_strains"] == [2]
        b1, _, _ = fit.strain_block(1)
        assert np.all(np.isfinite(b1))
        b2, _, _ = fit.strain_block(2)
        assert np.all(np.isnan(b2))
