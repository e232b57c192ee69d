import logging

import numpy as np
import pytest
from scipy.stats import ortho_group

from utils.errors import ConfigError, TheoryConstructionError
from utils.graph_store import adjacency_from_edges, normalize
from utils.kernel import make_rng
from utils.theory import (
    ALPHA_GRID, MAX_RESAMPLES, TheoryInstance, build_instance, empirical_risk, monte_carlo_distance, run_trials,
    sample_distance, summarize_trials, trace_coefficients, trace_distance, verify_theorem,
)


@pytest.fixture(scope="module")
def instance():
    return build_instance(60, 8, 3, 4, 0.9, seed=0)


@pytest.fixture(scope="module")
def default_instance():
    return build_instance(200, 16, 4, 8, 0.9, seed=0)


@pytest.fixture(scope="module")
def perfect():
    return build_instance(60, 6, 3, 6, 1.0, seed=1)


def test_repair_shrinks_the_feature_error(instance):
    shifted = np.mean(np.sum((instance.X @ instance.C.T) ** 2, axis=1))
    repaired = np.mean(np.sum((instance.X @ instance.D.T) ** 2, axis=1))
    assert repaired < shifted


def test_quadratic_matches_the_trace_formula(instance):
    q = trace_coefficients(instance)
    for alpha in ALPHA_GRID:
        assert q.distance(alpha) == pytest.approx(trace_distance(instance, alpha), rel=1e-9)


def test_monte_carlo_agrees_with_the_trace_formula(default_instance):
    estimate = monte_carlo_distance(default_instance, ALPHA_GRID)
    direct = np.array([trace_distance(default_instance, a) for a in ALPHA_GRID])
    np.testing.assert_allclose(estimate, direct, rtol=0.02)


def test_perfect_repair_has_zero_risk_at_alpha_one(perfect):
    np.testing.assert_allclose(perfect.repair @ perfect.Q, np.eye(6), atol=1e-10)
    assert empirical_risk(perfect, 1.0) < 1e-10
    assert sample_distance(perfect, 1.0) < 1e-20
    q = trace_coefficients(perfect)
    assert q.alpha_star == pytest.approx(1.0, abs=1e-9)
    assert abs(q.G) < 1e-12


def test_theorem_report_on_a_valid_instance(instance):
    report = verify_theorem(instance, monte_carlo=False)
    assert report.d1 < report.d0
    assert report.d_star <= report.d0
    assert report.quadratic_error < 1e-9
    assert report.lipschitz_bound_holds
    assert np.isnan(report.monte_carlo_error)


def test_assembled_labels_are_distributions(instance):
    rebuilt = TheoryInstance.assemble(instance.norm_adj, instance.X, instance.W, instance.Q,
                                      instance.U, instance.V)
    np.testing.assert_allclose(rebuilt.Y.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(rebuilt.Y, instance.Y)


def test_invalid_arguments():
    with pytest.raises(ConfigError):
        build_instance(30, 6, 2, 0, 0.9, seed=0)
    with pytest.raises(ConfigError):
        build_instance(30, 6, 2, 7, 0.9, seed=0)
    with pytest.raises(ConfigError):
        build_instance(30, 6, 2, 3, 2.0, seed=0)


def test_identity_shift_is_rejected_by_the_repair_gate(caplog):
    with caplog.at_level(logging.WARNING, logger="utils.theory"):
        with pytest.raises(TheoryConstructionError):
            build_instance(30, 6, 2, 3, 0.9, seed=0, force_identity_shift=True)
    rejected = [r for r in caplog.records if "rejected" in r.getMessage()]
    assert len(rejected) == MAX_RESAMPLES + 1
    assert all("shifted 0.0000" in r.getMessage() for r in rejected)


def _hand_set(Q, U, V, seed=0):
    rng = make_rng(seed, "hand-set")
    X = rng.standard_normal((5, 3))
    norm_adj = normalize(adjacency_from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)]))
    return TheoryInstance.assemble(norm_adj, X - X.mean(axis=0), rng.standard_normal((3, 2)), Q, U, V)


def test_no_shift_has_zero_shift_coefficients():
    inst = _hand_set(np.eye(3), np.eye(3)[:, :2], make_rng(0, "v").standard_normal((2, 3)))
    q = trace_coefficients(inst)
    assert q.E == 0.0 and q.F == 0.0
    assert q.G > 0.0
    assert q.alpha_star == 0.0


def test_no_shift_and_identity_repair_have_zero_risk():
    inst = _hand_set(np.eye(3), np.eye(3), np.eye(3))
    for alpha in ALPHA_GRID:
        assert empirical_risk(inst, alpha) < 1e-12


@pytest.mark.parametrize("alpha", ALPHA_GRID[:-1])
def test_risk_is_continuous_in_alpha(instance, alpha):
    risk = empirical_risk(instance, alpha)
    assert abs(empirical_risk(instance, alpha + 1e-4) - risk) < 1e-2
    assert abs(empirical_risk(instance, alpha + 1e-8) - risk) < 1e-5


def test_flat_quadratic_falls_back_to_an_endpoint(caplog):
    Q = ortho_group.rvs(3, random_state=make_rng(0, "q"))
    inst = _hand_set(Q, np.eye(3), np.eye(3))
    with caplog.at_level(logging.WARNING, logger="utils.theory"):
        q = trace_coefficients(inst)
    assert q.E > 0.0
    assert abs(q.a) <= 1e-12 * q.E and abs(q.b) <= 1e-12 * q.E
    assert not q.interior_minimum
    assert q.alpha_star == 0.0
    assert q.distance(0.0) == pytest.approx(q.distance(1.0), rel=1e-9)
    assert "no interior minimum" in caplog.text


def test_single_perfect_trial_passes():
    table = run_trials(1, n=40, d=6, classes=3, m=6, repair_quality=1.0, seed=0, draws=200)
    summary = summarize_trials(table)
    assert summary["valid"] == 1
    assert summary["pass_rate"] == 1.0
    assert summary["distance_passed"] == 1


def test_summary_counts_inequalities_separately():
    table = run_trials(3, n=40, d=6, classes=3, m=3, repair_quality=0.9, seed=0, monte_carlo=False)
    summary = summarize_trials(table)
    assert summary["trials"] == 3
    assert summary["valid"] == 3
    assert summary["d1_below_d0"] == 3
    assert 0 <= summary["risk_passed"] <= 3
