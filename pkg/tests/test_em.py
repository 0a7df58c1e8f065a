import numpy as np
import pytest

from ivcace.em import (
    EStepError,
    FitConfig,
    e_step,
    fit_em,
    latent_support,
    m_step,
    observed_loglik,
    tabulate_observed,
)
from ivcace.logistic import fit_binomial_logit
from ivcace.model import (
    ComplianceClass,
    CovariateSpec,
    Dataset,
    ModelError,
    ParamSet,
    Record,
)
from ivcace.simulation import sample_from_params

from helpers import brute_loglik, brute_posterior, random_params

TWO_MISS_SPEC = CovariateSpec(
    names=("x2", "x3", "x4"), levels=(2, 2, 2), observed=(True, False, False)
)
ONE_MISS_SPEC = CovariateSpec(names=("a", "b"), levels=(2, 2), observed=(True, False))
FULL_SPEC = CovariateSpec(names=("a", "b"), levels=(2, 2), observed=(True, True))


def _dataset(spec, seed, n=400, scale=0.6):
    rng = np.random.default_rng(seed)
    params = random_params(spec, rng, scale=scale)
    return params, sample_from_params(params, n, seed=seed + 1)


class TestTabulate:
    def test_empty(self):
        counts = tabulate_observed([], TWO_MISS_SPEC)
        assert counts.n == 0
        assert all((t == 0).all() for t in counts.tables.values())

    def test_single_record(self):
        rec = Record(x=(1, 2, 1), z=1, d=1, y=0)
        counts = tabulate_observed([rec], TWO_MISS_SPEC)
        assert counts.nn[0, 1, 0, 1, 1, 0] == 1
        assert counts.nn.sum() == 1
        assert counts.n3.sum() == 0 and counts.n4.sum() == 0 and counts.nb.sum() == 0

    def test_pattern_totals_match_direct_scan(self):
        _, ds = _dataset(TWO_MISS_SPEC, seed=7, n=1000)
        counts = tabulate_observed(ds, TWO_MISS_SPEC)
        m3 = ds.x[:, 1] >= 0
        m4 = ds.x[:, 2] >= 0
        assert counts.nn.sum() == (m3 & m4).sum()
        assert counts.n3.sum() == (~m3 & m4).sum()
        assert counts.n4.sum() == (m3 & ~m4).sum()
        assert counts.nb.sum() == (~m3 & ~m4).sum()
        assert counts.n == len(ds)

    def test_named_views_require_two_missing(self):
        counts = tabulate_observed([], ONE_MISS_SPEC)
        with pytest.raises(ModelError):
            counts.nn


class TestLatentSupport:
    def test_class_support_by_arm(self):
        assert latent_support(1, 0) == {ComplianceClass.ALWAYS_TAKER}
        assert latent_support(0, 1) == {ComplianceClass.NEVER_TAKER}
        assert latent_support(1, 1) == {ComplianceClass.ALWAYS_TAKER, ComplianceClass.COMPLIER}
        assert latent_support(0, 0) == {ComplianceClass.NEVER_TAKER, ComplianceClass.COMPLIER}

    def test_rejects_bad_values(self):
        with pytest.raises(ModelError):
            latent_support(2, 0)


class TestEStep:
    def test_point_mass_on_always_taker(self):
        rec = Record(x=(1, 1, 1), z=0, d=1, y=1)
        counts = tabulate_observed([rec], TWO_MISS_SPEC)
        rng = np.random.default_rng(0)
        expect = e_step(random_params(TWO_MISS_SPEC, rng), counts)
        n = expect.n  # (pattern, x2, x3, x4, u, z, y)
        assert n[-1, 0, 0, 0, 2, 0, 1] == pytest.approx(1.0)
        assert n.sum() == pytest.approx(1.0)

    def test_symmetric_split(self):
        rec = Record(x=(1, 1, 1), z=1, d=1, y=1)
        counts = tabulate_observed([rec], TWO_MISS_SPEC)
        expect = e_step(ParamSet.zeros(TWO_MISS_SPEC), counts)
        n = expect.n
        # always taker and complier have equal prior and identical factors
        assert n[-1, 0, 0, 0, 2, 1, 1] == pytest.approx(0.5, abs=1e-12)
        assert n[-1, 0, 0, 0, 1, 1, 1] == pytest.approx(0.5, abs=1e-12)

    def test_matches_bayes_rule_oracle(self):
        rng = np.random.default_rng(1)
        params = random_params(TWO_MISS_SPEC, rng)
        records = [
            Record(x=(2, None, None), z=0, d=0, y=1),
            Record(x=(1, 2, None), z=1, d=1, y=0),
            Record(x=(1, None, 1), z=0, d=1, y=1),
            Record(x=(2, 1, 2), z=1, d=0, y=0),
        ]
        counts = tabulate_observed(records, TWO_MISS_SPEC)
        expect = e_step(params, counts)
        lat_patterns = [(0, 0), (0, 1), (1, 0), (1, 1)]
        for rec in records:
            r = tuple(int(v is not None) for v in rec.x[1:])
            obs = {i: v for i, v in enumerate(rec.x) if v is not None}
            post = brute_posterior(params, r, obs, rec.d, rec.z, rec.y)
            p_idx = lat_patterns.index(r)
            for (cell, u), want in post.items():
                got = expect.n[(p_idx,) + tuple(c - 1 for c in cell) + (u, rec.z, rec.y)]
                assert got == pytest.approx(want, abs=1e-12)

    def test_conservation(self):
        params, ds = _dataset(TWO_MISS_SPEC, seed=9, n=500)
        counts = tabulate_observed(ds, TWO_MISS_SPEC)
        expect = e_step(params, counts)
        assert expect.n.sum() == pytest.approx(len(ds), abs=1e-9)

    def test_structural_zeros(self):
        # with every record treated under encouragement, never takers are
        # impossible; with every record untreated, always takers are
        params, ds = _dataset(TWO_MISS_SPEC, seed=11, n=500)
        counts = tabulate_observed(ds, TWO_MISS_SPEC)
        treated = ds.subset((ds.d == 1) & (ds.z == 1))
        n = e_step(params, tabulate_observed(treated, TWO_MISS_SPEC)).n
        assert np.all(n[..., 0, :, :] == 0)
        untreated = ds.subset(ds.d == 0)
        n = e_step(params, tabulate_observed(untreated, TWO_MISS_SPEC)).n
        assert np.all(n[..., 2, :, :] == 0)

    def test_zero_probability_stratum_raises(self):
        params = ParamSet.zeros(ONE_MISS_SPEC)
        params.w = np.array([[1.0, 0.0], [0.0, 0.0]])
        rec = Record(x=(2, 2), z=1, d=1, y=1)  # cell has zero mass
        counts = tabulate_observed([rec], ONE_MISS_SPEC)
        with pytest.raises(EStepError):
            e_step(params, counts)


class TestObservedLoglik:
    def test_single_record_hand_sum(self):
        rng = np.random.default_rng(2)
        params = random_params(ONE_MISS_SPEC, rng)
        rec = Record(x=(1, 2), z=0, d=0, y=1)
        counts = tabulate_observed([rec], ONE_MISS_SPEC)
        got = observed_loglik(params, counts)
        want = brute_loglik(params, Dataset.from_records([rec], ONE_MISS_SPEC))
        assert got == pytest.approx(want, abs=1e-12)

    def test_matches_enumeration_oracle(self):
        params, ds = _dataset(TWO_MISS_SPEC, seed=13, n=50)
        counts = tabulate_observed(ds, TWO_MISS_SPEC)
        assert observed_loglik(params, counts) == pytest.approx(
            brute_loglik(params, ds), abs=1e-10
        )


class TestMStep:
    def test_w_proportionality(self):
        params, ds = _dataset(ONE_MISS_SPEC, seed=15, n=300)
        counts = tabulate_observed(ds, ONE_MISS_SPEC)
        expect = e_step(params, counts)
        new = m_step(expect, ONE_MISS_SPEC, FitConfig(), prev=params)
        marg = expect.n.sum(axis=(0, -3, -2, -1))
        assert np.allclose(new.w, marg / marg.sum(), atol=1e-12)

    def test_alpha_equals_plain_logistic_mle(self):
        params, ds = _dataset(FULL_SPEC, seed=17, n=600)
        counts = tabulate_observed(ds, FULL_SPEC)
        expect = e_step(params, counts)
        new = m_step(expect, FULL_SPEC, FitConfig(), prev=params)
        X = np.column_stack([np.ones(len(ds)), ds.x.astype(float)])
        ref, _ = fit_binomial_logit(X, ds.z.astype(float), np.ones(len(ds)))
        assert np.allclose(new.alpha, ref, atol=1e-6)

    def test_multinomial_symmetry(self):
        # symmetric class mass at every cell drives the compliance logits to 0
        params, ds = _dataset(ONE_MISS_SPEC, seed=19, n=200)
        counts = tabulate_observed(ds, ONE_MISS_SPEC)
        expect = e_step(ParamSet.zeros(ONE_MISS_SPEC), counts)
        sym = expect.counts.copy()
        sym[...] = sym.sum(axis=-4, keepdims=True) / 3.0
        expect.counts[...] = sym
        new = m_step(expect, ONE_MISS_SPEC, FitConfig(), prev=ParamSet.zeros(ONE_MISS_SPEC))
        assert np.allclose(new.delta_a, 0.0, atol=1e-6)
        assert np.allclose(new.delta_c, 0.0, atol=1e-6)

    def test_eta_yz_stays_zero_without_flag(self):
        params, ds = _dataset(ONE_MISS_SPEC, seed=21, n=300)
        counts = tabulate_observed(ds, ONE_MISS_SPEC)
        expect = e_step(params, counts)
        new = m_step(expect, ONE_MISS_SPEC, FitConfig(), prev=ParamSet.zeros(ONE_MISS_SPEC))
        assert np.all(new.eta_yz == 0.0)
        new = m_step(
            expect, ONE_MISS_SPEC, FitConfig(complier_response_yz=True),
            prev=ParamSet.zeros(ONE_MISS_SPEC),
        )
        assert np.any(new.eta_yz != 0.0)


class TestFitEm:
    def test_validates_input(self):
        with pytest.raises(ModelError):
            fit_em([], ONE_MISS_SPEC)
        recs = [Record(x=(1, 1), z=0, d=0, y=0), Record(x=(1, 1), z=0, d=1, y=1)]
        with pytest.raises(ModelError):
            fit_em(recs, ONE_MISS_SPEC)  # only one z arm

    def test_monotone_trace_and_convergence(self):
        _, ds = _dataset(ONE_MISS_SPEC, seed=23, n=400)
        fit = fit_em(ds, ONE_MISS_SPEC, FitConfig(n_restarts=2))
        trace = np.array(fit.loglik_trace)
        assert np.all(np.diff(trace) >= -1e-8)
        assert fit.converged

    def test_mle_dominance(self):
        params, ds = _dataset(ONE_MISS_SPEC, seed=25, n=100)
        counts = tabulate_observed(ds, ONE_MISS_SPEC)
        fit = fit_em(ds, ONE_MISS_SPEC, FitConfig(n_restarts=3))
        assert fit.loglik >= observed_loglik(params, counts) - 1e-6

    def test_no_missingness_reduction(self):
        _, ds = _dataset(FULL_SPEC, seed=27, n=500)
        fit = fit_em(ds, FULL_SPEC, FitConfig(n_restarts=1))
        cells, freq = np.unique(ds.x, axis=0, return_counts=True)
        w_ref = np.zeros(FULL_SPEC.levels)
        for cell, f in zip(cells, freq):
            w_ref[tuple(cell - 1)] = f / len(ds)
        assert np.allclose(fit.params.w, w_ref, atol=1e-8)
        X = np.column_stack([np.ones(len(ds)), ds.x.astype(float)])
        ref, _ = fit_binomial_logit(X, ds.z.astype(float), np.ones(len(ds)))
        assert np.allclose(fit.params.alpha, ref, atol=1e-4)

    def test_degenerate_cell_support(self):
        rng = np.random.default_rng(29)
        params = random_params(FULL_SPEC, rng)
        params.w = np.array([[1.0, 0.0], [0.0, 0.0]])
        ds = sample_from_params(params, 200, seed=31)
        fit = fit_em(ds, FULL_SPEC, FitConfig(n_restarts=1))
        assert fit.params.w[0, 0] == pytest.approx(1.0, abs=1e-9)
        assert np.all(np.diff(fit.loglik_trace) >= -1e-8)

    def test_fixed_seed_reproducible(self):
        _, ds = _dataset(ONE_MISS_SPEC, seed=33, n=300)
        f1 = fit_em(ds, ONE_MISS_SPEC, FitConfig(n_restarts=2, init_seed=5))
        f2 = fit_em(ds, ONE_MISS_SPEC, FitConfig(n_restarts=2, init_seed=5))
        assert np.array_equal(f1.params.pack(), f2.params.pack())
        assert f1.loglik_trace == f2.loglik_trace
