import numpy as np
import pytest
from scipy.stats import chi2_contingency

from ivcace.model import ModelError
from ivcace.simulation import (
    NICU_LIKE_SPEC,
    SINGLE_COV_SPEC,
    TRUE_CACE,
    SingleCovScenario,
    StudyConfig,
    generate,
    nicu_like_params,
    run_study,
    sample_from_params,
    scenario_params,
    scenario_to_params,
)


class TestScenarioParams:
    def test_mcar_flat(self):
        sc = scenario_params("mcar")
        assert np.all(sc.rho_arr == 0.88)

    def test_nonignorable_block(self):
        sc = scenario_params("nonignorable")
        rh = sc.rho_arr  # (y, z, u) with u in (n, c, a) order
        assert rh[1, 0, 2] == 1.0 and rh[1, 1, 2] == 1.0
        assert rh[1, 1, 1] == 0.8
        assert rh[1, 0, 1] == 0.97

    def test_shared_block(self):
        sc = scenario_params("mar")
        assert sc.w_u == (0.2, 0.425, 0.375)
        assert sc.m_u == (0.5, 0.8, 0.25)
        assert sc.xi_x == (0.6, 0.4)
        assert sc.true_cace(1) == pytest.approx(0.25)
        assert sc.true_cace(0) == pytest.approx(0.15)
        assert TRUE_CACE == {1: 0.25, 0: 0.15}

    def test_unknown_scenario(self):
        with pytest.raises(ModelError):
            scenario_params("banana")

    def test_exclusion_ties_enforced(self):
        sc = scenario_params("mcar")
        bad_theta = np.asarray(sc.theta).copy()
        bad_theta[0, 0, 0] += 0.1  # break the never-taker tie
        with pytest.raises(ModelError):
            SingleCovScenario(
                w_u=sc.w_u, m_u=sc.m_u, xi_x=sc.xi_x,
                theta=tuple(map(tuple, (tuple(r) for r in bad_theta))),
                rho=sc.rho,
            )

    def test_missing_rates_near_published_level(self):
        # the printed tables imply rates close to, not exactly, 12 percent
        for name in ("mcar", "mar", "nonignorable"):
            sc = scenario_params(name)
            assert 0.10 < sc.missing_rate() < 0.14
        assert scenario_params("mcar").missing_rate() == pytest.approx(0.12, abs=1e-12)


class TestGenerate:
    def test_deterministic(self):
        sc = scenario_params("mar")
        a = generate(sc, 500, seed=1)
        b = generate(sc, 500, seed=1)
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)

    def test_treatment_deterministic_in_class_and_iv(self):
        sc = scenario_params("mcar")
        ds = generate(sc, 20_000, seed=2, debug=True)
        u = ds.debug["u_true"]
        assert np.all(ds.d[u == 0] == 0)
        assert np.all(ds.d[u == 2] == 1)
        assert np.array_equal(ds.d[u == 1], ds.z[u == 1])

    def test_complier_share(self):
        sc = scenario_params("mcar")
        n = 200_000
        ds = generate(sc, n, seed=3, debug=True)
        share = (ds.debug["u_true"] == 1).mean()
        se = np.sqrt(0.425 * 0.575 / n)
        assert abs(share - 0.425) < 3 * se

    def test_empirical_missing_rate_matches_analytic(self):
        for name in ("mcar", "mar", "nonignorable"):
            sc = scenario_params(name)
            n = 200_000
            ds = generate(sc, n, seed=4)
            rate = (ds.x[:, 0] < 0).mean()
            truth = sc.missing_rate()
            se = np.sqrt(truth * (1 - truth) / n)
            assert abs(rate - truth) < 3.5 * se, name

    def test_generation_exclusion_restriction(self):
        # outcome distribution identical across IV arms within always takers
        # conditional on X, since the IV distribution itself depends on X
        sc = scenario_params("nonignorable")
        ds = generate(sc, 100_000, seed=5, debug=True)
        for xv in (0, 1):
            at = (ds.debug["u_true"] == 2) & (ds.debug["x_true"] == xv)
            table = np.array([
                [((ds.z == z) & at & (ds.y == y)).sum() for y in (0, 1)]
                for z in (0, 1)
            ])
            _, pval, _, _ = chi2_contingency(table)
            assert pval > 0.001, xv

    def test_rejects_bad_n(self):
        with pytest.raises(ModelError):
            generate(scenario_params("mcar"), 0, seed=0)


class TestScenarioEncoding:
    def test_forward_simulation_agrees(self):
        """The encoded general model generates the same law as the scenario."""
        sc = scenario_params("nonignorable")
        params = scenario_to_params(sc)
        n = 100_000
        a = generate(sc, n, seed=6)
        b = sample_from_params(params, n, seed=7)
        # compare the full observed-table frequencies
        for col_a, col_b in (((a.x[:, 0]), (b.x[:, 0])), (a.z, b.z), (a.d, b.d), (a.y, b.y)):
            va, ca = np.unique(col_a, return_counts=True)
            vb, cb = np.unique(col_b, return_counts=True)
            assert np.array_equal(va, vb)
            assert np.allclose(ca / n, cb / n, atol=0.01)


class TestNicuLike:
    def test_truth_shape(self):
        from ivcace.model import cace

        p = nicu_like_params()
        effects = [cace(p, NICU_LIKE_SPEC.x_row((g, 1))) for g in (1, 2, 3)]
        assert all(e < 0 for e in effects)
        assert effects[0] < effects[1] < effects[2] < -0.01
        assert effects[2] > -0.06


class TestRunStudy:
    def test_empty_methods(self):
        res = run_study(StudyConfig(n_replications=2, n_per_dataset=200, methods=(), seed=1))
        assert res.rows == []

    def test_unknown_method_rejected(self):
        with pytest.raises(ModelError):
            StudyConfig(methods=("em_ni", "oracle"))

    def test_deterministic_summary(self):
        cfg = dict(
            n_replications=3, n_per_dataset=800, scenario="mcar",
            methods=("complete_case",), seed=11, n_workers=2,
        )
        r1 = run_study(StudyConfig(**cfg))
        r2 = run_study(StudyConfig(**cfg))
        assert [(a.mean, a.sd) for a in r1.rows] == [(b.mean, b.sd) for b in r2.rows]
