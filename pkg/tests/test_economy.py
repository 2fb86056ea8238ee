from __future__ import annotations

import json
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eelearn import (
    ContractError,
    DomainError,
    Economy,
    amdahl,
    ces,
    demand,
    eval_features,
    eval_utility,
    linear,
    load_economy,
    sample_feedback,
)
from eelearn.economy import (
    ParametricUtility,
    check_allocation,
    check_prices,
    monte_carlo_search,
    normalize_prices,
    project_budget_box,
    save_economy,
)

from conftest import WORKED_ENDOWMENTS, make_worked_economy


class TestFeatures:
    def test_amdahl_full_allocation_is_one(self):
        assert eval_features(amdahl([0.5], 0.5), np.array([1.0]))[0] == pytest.approx(1.0)

    def test_amdahl_half(self):
        assert eval_features(amdahl([0.5], 0.2), np.array([0.5]))[0] == pytest.approx(0.5 / 0.6)

    def test_ces_square_root(self):
        np.testing.assert_allclose(eval_features(ces([0.5, 0.5], 0.5), np.array([0.25, 0.25])), [0.5, 0.5])

    @pytest.mark.parametrize("u", [linear([0.3, 0.4]), ces([0.3, 0.4], 0.75), amdahl([0.3, 0.4], [0.2, 0.6])])
    def test_endpoints(self, u):
        np.testing.assert_allclose(eval_features(u, np.zeros(2)), 0.0)
        np.testing.assert_allclose(eval_features(u, np.ones(2)), 1.0)

    def test_out_of_range_rejected(self):
        with pytest.raises(DomainError):
            eval_features(linear([0.5, 0.5]), np.array([1.2, 0.0]))
        with pytest.raises(DomainError):
            eval_features(linear([0.5, 0.5]), np.array([-0.1, 0.0]))

    @given(st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3), st.sampled_from(["linear", "ces", "amdahl"]))
    def test_feature_range(self, x, fam):
        u = {"linear": linear([0.5] * 3), "ces": ces([0.5] * 3, 0.5), "amdahl": amdahl([0.5] * 3, 0.3)}[fam]
        phi = eval_features(u, np.array(x))
        assert np.all(phi >= 0.0) and np.all(phi <= 1.0)


class TestUtility:
    def test_worked_endowment_utility(self):
        assert eval_utility(linear([0.1, 1.0]), np.array([0.45, 0.05])) == pytest.approx(0.095)

    @pytest.mark.parametrize("u", [linear([0.3, 0.4]), ces([0.3, 0.4], 0.5), amdahl([0.3, 0.4], 0.5)])
    def test_zero_bundle(self, u):
        assert eval_utility(u, np.zeros(2)) == 0.0

    def test_ces_full(self):
        assert eval_utility(ces([0.5, 0.5], 0.5), np.ones(2)) == pytest.approx(1.0)

    @settings(max_examples=200)
    @given(
        st.lists(st.floats(0.0, 1.0), min_size=2, max_size=2),
        st.lists(st.floats(0.0, 1.0), min_size=2, max_size=2),
        st.sampled_from([1.0, 0.75, 0.5]),
        st.sampled_from(["ces", "amdahl"]),
    )
    def test_monotone(self, a, b, rho, fam):
        u = ces([0.4, 0.9], rho) if fam == "ces" else amdahl([0.4, 0.9], 0.3)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        assert eval_utility(u, lo) <= eval_utility(u, hi) + 1e-15

    def test_parameter_validation(self):
        with pytest.raises(ContractError):
            ces([0.5], 1.5)
        with pytest.raises(ContractError):
            amdahl([0.5], 1.0)
        with pytest.raises(ContractError):
            linear([2.0])  # outside the default box
        with pytest.raises(ContractError):
            linear([0.5], theta_min=0.0)

    def test_round_trip(self):
        for u in (linear([0.3, 0.4]), ces([0.3, 0.4], 0.5), amdahl([0.3, 0.4], [0.2, 0.5])):
            v = ParametricUtility.from_dict(json.loads(json.dumps(u.to_dict())))
            x = np.array([0.3, 0.8])
            assert v(x) == u(x)

    def test_link_constants(self):
        assert linear([0.5, 0.5]).link_constants() == (1.0, 1.0)
        assert amdahl([0.5, 0.5], 0.3).link_constants() == (1.0, 1.0)
        c, l = ces([0.5, 0.5], 0.5, theta_min=0.05, theta_max=1.2).link_constants()
        # mu'(y) = 2y on [0.05, 2.4]
        assert c == pytest.approx(0.1)
        assert l == pytest.approx(4.8)


class TestDemand:
    def test_worked_agent_one(self):
        x = demand(linear([0.1, 1.0]), np.array([0.5, 0.5]), 0.25, method="exact_linear")
        np.testing.assert_allclose(x, [0.0, 0.5])
        assert eval_utility(linear([0.1, 1.0]), x) == pytest.approx(0.5)

    def test_worked_agent_three(self):
        x = demand(linear([1.0, 0.1]), np.array([0.5, 0.5]), 0.5, method="exact_linear")
        np.testing.assert_allclose(x, [1.0, 0.0])

    @pytest.mark.parametrize("method", ["exact_linear", "kkt", "projected_ascent", "monte_carlo"])
    def test_zero_budget(self, method):
        args = (linear([0.3, 0.7]), np.array([0.4, 0.6]), 0.0)
        if method == "monte_carlo":
            with pytest.warns(RuntimeWarning, match="no samples"):
                x = demand(*args, method=method, rng=np.random.default_rng(0))
        else:
            x = demand(*args, method=method, rng=np.random.default_rng(0))
        np.testing.assert_allclose(x, 0.0, atol=1e-12)

    def test_free_good_taken_first(self):
        x = demand(linear([0.3, 0.7]), np.array([0.0, 1.0]), 0.2, method="exact_linear")
        np.testing.assert_allclose(x, [1.0, 0.2])

    def test_tie_break_lower_index(self):
        x = demand(linear([0.5, 0.5]), np.array([0.5, 0.5]), 0.25, method="exact_linear")
        np.testing.assert_allclose(x, [0.5, 0.0])

    def test_exact_linear_needs_linear(self):
        with pytest.raises(ContractError):
            demand(ces([0.5, 0.5], 0.5), np.array([0.5, 0.5]), 0.2, method="exact_linear")

    def test_exact_linear_beats_vertices(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            m = int(rng.integers(1, 4))
            th = rng.uniform(0.05, 1.0, m)
            p = rng.dirichlet(np.ones(m))
            b = float(rng.uniform(0, 1))
            u = linear(th)
            best = eval_utility(u, demand(u, p, b, method="exact_linear"))
            # vertices of box intersect budget: all but at most one coordinate at a bound
            for free in range(m):
                for bits in product([0.0, 1.0], repeat=m):
                    v = np.array(bits)
                    rest = b - p @ v + p[free] * v[free]
                    v[free] = 0.0 if p[free] == 0 else min(max(rest / p[free], 0.0), 1.0)
                    if p @ v <= b * (1 + 1e-9):
                        assert best >= eval_utility(u, v) - 1e-12

    def test_projected_ascent_dominates_monte_carlo(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            m = int(rng.integers(1, 4))
            th = rng.uniform(0.05, 1.0, m)
            u = linear(th) if rng.random() < 0.5 else ces(th, float(rng.choice([0.5, 0.75])))
            p = rng.dirichlet(np.ones(m))
            b = float(rng.uniform(0.05, 0.8))
            pa = eval_utility(u, demand(u, p, b, method="projected_ascent"))
            mc = eval_utility(u, demand(u, p, b, method="monte_carlo", k=50, rng=rng))
            assert pa >= mc - 1e-6

    def test_projected_ascent_close_to_kkt(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            th = rng.uniform(0.05, 1.0, 3)
            u = ces(th, 0.5) if rng.random() < 0.5 else amdahl(th, 0.3)
            p = rng.dirichlet(np.ones(3))
            b = float(rng.uniform(0.05, 0.8))
            a = eval_utility(u, demand(u, p, b, method="projected_ascent"))
            k = eval_utility(u, demand(u, p, b, method="kkt"))
            assert a == pytest.approx(k, abs=2e-4)

    @pytest.mark.parametrize("method", ["exact_linear", "kkt", "projected_ascent"])
    def test_budget_exhaustion(self, method):
        rng = np.random.default_rng(6)
        for _ in range(30):
            th = rng.uniform(0.1, 1.0, 3)
            u = linear(th)
            p = rng.dirichlet(np.ones(3))
            b = float(rng.uniform(0.05, 0.9))
            x = demand(u, p, b, method=method)
            assert p @ x == pytest.approx(b, abs=1e-6)
            assert np.all(x >= -1e-12) and np.all(x <= 1 + 1e-12)

    def test_budget_respected_all_methods(self):
        rng = np.random.default_rng(7)
        u = ces([0.2, 0.9, 0.5], 0.75)
        for method in ("kkt", "projected_ascent", "monte_carlo"):
            for _ in range(20):
                p = rng.dirichlet(np.ones(3))
                b = float(rng.uniform(0.0, 0.6))
                x = demand(u, p, b, method=method, rng=rng)
                assert p @ x <= b * (1 + 1e-9) + 1e-15

    def test_monte_carlo_nested(self):
        u = ces([0.3, 0.8, 0.5], 0.5)
        p = np.array([0.2, 0.5, 0.3])
        _, small, _ = monte_carlo_search(u, p, 0.2, 50, np.random.default_rng(11))
        _, large, _ = monte_carlo_search(u, p, 0.2, 200, np.random.default_rng(11))
        assert large >= small

    def test_monte_carlo_reports_starvation(self):
        u = linear([0.5, 0.5])
        x, val, acc = monte_carlo_search(u, np.array([0.5, 0.5]), 1e-9, 10, np.random.default_rng(0),
                                         max_proposals=512)
        assert acc == 0 and val == 0.0
        np.testing.assert_array_equal(x, 0.0)

    def test_projection_is_feasible_and_idempotent(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            p = rng.dirichlet(np.ones(3))
            b = float(rng.uniform(0.0, 1.0))
            y = rng.normal(0.5, 1.0, 3)
            z = project_budget_box(y, p, b)
            assert np.all(z >= -1e-12) and np.all(z <= 1 + 1e-12)
            assert p @ z <= b + 1e-9
            np.testing.assert_allclose(project_budget_box(z, p, b), z, atol=1e-9)


class TestFeedback:
    def test_noiseless(self):
        e = make_worked_economy(sigma=0.0)
        x = np.array([0.2, 0.3])
        assert sample_feedback(e, 0, x, np.random.default_rng(0)) == eval_utility(e.utilities[0], x)

    def test_seeded(self):
        e = make_worked_economy()
        x = np.array([0.2, 0.3])
        a = sample_feedback(e, 1, x, np.random.default_rng(42))
        b = sample_feedback(e, 1, x, np.random.default_rng(42))
        assert a == b

    def test_mean(self):
        e = make_worked_economy()
        x = np.array([0.2, 0.3])
        rng = np.random.default_rng(1)
        ys = np.array([sample_feedback(e, 2, x, rng) for _ in range(100_000)])
        assert abs(ys.mean() - eval_utility(e.utilities[2], x)) <= 3 * 0.1 / np.sqrt(1e5)


class TestEconomy:
    def test_supply_must_normalise(self):
        with pytest.raises(ContractError):
            Economy(np.array([[0.5, 0.5], [0.4, 0.5]]), (linear([0.5, 0.5]), linear([0.5, 0.5])))

    def test_negative_endowment(self):
        with pytest.raises(ContractError):
            Economy(np.array([[1.5], [-0.5]]), (linear([0.5]), linear([0.5])))

    def test_utility_count(self):
        with pytest.raises(ContractError):
            Economy(WORKED_ENDOWMENTS, (linear([0.5, 0.5]),))

    def test_file_round_trip(self, tmp_path):
        e = make_worked_economy()
        path = tmp_path / "economy.json"
        save_economy(e, path)
        back = load_economy(path)
        np.testing.assert_array_equal(back.endowments, e.endowments)
        np.testing.assert_array_equal(back.thetas, e.thetas)
        assert back.sigma == e.sigma

    def test_file_rejects_bad_supply(self, tmp_path):
        d = make_worked_economy().to_dict()
        d["endowments"][0][0] = 0.9
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(d))
        with pytest.raises(ContractError):
            load_economy(path)

    def test_value_checks(self):
        with pytest.raises(ContractError):
            check_allocation(np.array([[0.6], [0.6]]))
        with pytest.raises(ContractError):
            check_prices(np.array([0.6, 0.6]))
        np.testing.assert_allclose(normalize_prices(np.array([1.0, 3.0])), [0.25, 0.75])
