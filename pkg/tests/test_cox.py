import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from vewane.core import Cause, EventRecord, NonIdentifiableError, VEBasisSpec, VewaneError, validate_dataset
from vewane.cox import build_risk_sets, cox_partial_loglik, fit_cox_tv
from vewane.simulate import ScenarioSpec, simulate_cohort, substream_seed

from .conftest import make_records, workers
from .oracles import finite_diff_gradient, finite_diff_jacobian, max_rel_err

CONST = VEBasisSpec("constant")
LINEAR = VEBasisSpec("linear")


def _null_fit(seed):
    scenario = ScenarioSpec(
        n=10_000, beta_true=(0.0, 0.0), sigma_u=1e-3, baseline_shape="constant", seed=seed
    )
    ds, _ = simulate_cohort(scenario)
    return fit_cox_tv(ds, LINEAR).beta


def three_subject_dataset():
    # covariates (1, 0, 1): events at t=1, 2 for the first two; third at risk throughout
    return make_records(
        [
            ("s1", 0.0, 1.0, Cause.PREVENTABLE),
            ("s2", None, 2.0, Cause.PREVENTABLE),
            ("s3", 0.0, 3.0, Cause.CENSORED),
        ],
        horizon=3.0,
    )


class TestPartialLikelihood:
    def test_closed_form_three_subjects(self):
        fit = fit_cox_tv(three_subject_dataset(), CONST)
        assert fit.beta[0] == pytest.approx(-0.5 * math.log(2), abs=1e-8)

    def test_closed_form_score_zero(self):
        beta = np.array([-0.5 * math.log(2)])
        _, grad, _ = cox_partial_loglik(three_subject_dataset(), CONST, beta)
        assert abs(grad[0]) < 1e-12

    def test_all_unvaccinated_nonidentifiable(self):
        ds = make_records(
            [("a", None, 0.3, Cause.PREVENTABLE), ("b", None, 0.6, Cause.PREVENTABLE),
             ("c", None, 1.0, Cause.CENSORED)]
        )
        with pytest.raises(NonIdentifiableError):
            fit_cox_tv(ds, CONST)

    def test_no_preventable_events(self):
        ds = make_records([("a", 0.1, 0.5, Cause.IRRELEVANT)])
        with pytest.raises(VewaneError):
            cox_partial_loglik(ds, CONST, np.zeros(1))

    def test_fast_matches_scan(self, rng):
        sc = ScenarioSpec(n=1500, seed=43)
        ds, _ = simulate_cohort(sc)
        for _ in range(6):
            beta = rng.normal(0, 0.5, 2)
            ll_f, g_f, h_f = cox_partial_loglik(ds, LINEAR, beta, fast=True)
            ll_s, g_s, h_s = cox_partial_loglik(ds, LINEAR, beta, fast=False)
            assert ll_f == pytest.approx(ll_s, rel=1e-10)
            assert np.allclose(g_f, g_s, rtol=1e-9, atol=1e-9)
            assert np.allclose(h_f, h_s, rtol=1e-9, atol=1e-9)

    def test_fast_matches_scan_with_ties(self):
        rows = [
            ("a", 0.0, 0.4, Cause.PREVENTABLE),
            ("b", None, 0.4, Cause.PREVENTABLE),
            ("c", 0.3, 0.4, Cause.PREVENTABLE),
            ("d", 0.2, 0.9, Cause.PREVENTABLE),
            ("e", None, 1.0, Cause.CENSORED),
            ("f", 0.8, 1.0, Cause.CENSORED),
        ]
        ds = make_records(rows)
        beta = np.array([-0.3, 0.7])
        ll_f, g_f, h_f = cox_partial_loglik(ds, LINEAR, beta, fast=True)
        ll_s, g_s, h_s = cox_partial_loglik(ds, LINEAR, beta, fast=False)
        assert ll_f == pytest.approx(ll_s, rel=1e-12)
        assert np.allclose(g_f, g_s, atol=1e-12)
        assert np.allclose(h_f, h_s, atol=1e-12)

    def test_breslow_hand_example(self):
        # two tied events at t=0.5 among four subjects; x = Z (constant basis)
        ds = make_records(
            [
                ("a", 0.0, 0.5, Cause.PREVENTABLE),
                ("b", None, 0.5, Cause.PREVENTABLE),
                ("c", 0.0, 0.8, Cause.CENSORED),
                ("d", None, 0.9, Cause.CENSORED),
            ]
        )
        beta = np.array([0.4])
        u = math.exp(0.4)
        # Breslow: both tied events share the full risk-set denominator (2u + 2)
        want = (0.4 + 0.0) - 2 * math.log(2 * u + 2)
        ll, _, _ = cox_partial_loglik(ds, CONST, beta)
        assert ll == pytest.approx(want, rel=1e-12)

    def test_gradient_hessian_finite_diff(self, rng):
        sc = ScenarioSpec(n=400, seed=47)
        ds, _ = simulate_cohort(sc)
        for basis in (CONST, LINEAR, VEBasisSpec("ramp", ramp_length=0.1)):
            for _ in range(3):
                beta = rng.normal(0, 0.4, basis.dimension)
                ll, grad, hess = cox_partial_loglik(ds, basis, beta)
                fd_g = finite_diff_gradient(lambda b: cox_partial_loglik(ds, basis, b)[0], beta)
                assert max_rel_err(grad, fd_g) < 1e-6
                fd_h = finite_diff_jacobian(lambda b: cox_partial_loglik(ds, basis, b)[1], beta)
                assert max_rel_err(hess, (fd_h + fd_h.T) / 2) < 1e-6


class TestRiskSets:
    def test_nested_and_self_inclusion(self):
        sc = ScenarioSpec(n=300, seed=53)
        ds, _ = simulate_cohort(sc)
        idx = build_risk_sets(ds)
        prev = None
        for t in idx.times:
            cur = set(idx.at_risk(t))
            if prev is not None:
                assert cur.issubset(prev)
            prev = cur
        by_id = {r.id: r for r in ds.records}
        for t in idx.times:
            at_risk = set(idx.at_risk(t))
            owners = [r.id for r in ds.records if r.event_time == t and r.cause == Cause.PREVENTABLE]
            for rid in owners:
                assert rid in at_risk

    def test_removing_irrelevant_censored_subject(self):
        ds = three_subject_dataset()
        extra = validate_dataset(
            ds.records + [EventRecord("ghost", None, 0.5, Cause.CENSORED)], ds.horizon
        )
        fit_a = fit_cox_tv(ds, CONST)
        fit_b = fit_cox_tv(extra, CONST)
        assert fit_a.beta[0] == pytest.approx(fit_b.beta[0], abs=1e-12)


class TestTimeTransform:
    def test_monotone_transform_invariance_constant_basis(self):
        sc = ScenarioSpec(n=800, seed=59)
        ds, _ = simulate_cohort(sc)
        fit_raw = fit_cox_tv(ds, CONST)
        transformed = validate_dataset(
            [
                EventRecord(
                    r.id,
                    None if r.vax_time is None else r.vax_time**3,
                    r.event_time**3,
                    r.cause,
                )
                for r in ds.records
            ],
            ds.horizon**3,
        )
        fit_t = fit_cox_tv(transformed, CONST)
        assert fit_raw.beta[0] == pytest.approx(fit_t.beta[0], abs=1e-9)

    def test_comparator_bias_directions(self, small_cohort):
        # with frailty and VE, ignoring the negative control leaves spurious waning
        sc, ds, truth = small_cohort
        fit = fit_cox_tv(ds, LINEAR)
        assert fit.diagnostics["converged"]
        assert fit.beta[0] < 0


class TestNullCalibration:
    def test_unbiased_without_frailty_or_effect(self):
        seeds = [substream_seed(606, r) for r in range(200)]
        with ProcessPoolExecutor(max_workers=workers()) as pool:
            betas = np.array(list(pool.map(_null_fit, seeds, chunksize=10)))
        mean = betas.mean(axis=0)
        assert np.all(np.abs(mean) < 0.05), mean
