import numpy as np
import pytest

from sgfopt import analysis
from sgfopt.analysis import (
    CONTINUUM_S2,
    ConstantsReport,
    ControlProblem,
    InequalityRecord,
    admissible_convergence,
    check_smallness,
    continuation_alpha,
    estimate_constants,
    fit_order,
    gateaux_probe,
    identity_convergence,
    lipschitz_probe,
    manufactured_case,
    manufactured_convergence,
    manufactured_velocity,
    poincare_constant,
    random_control,
    random_velocity,
    verify_identities,
    verify_state_estimates,
)
from sgfopt.control import AdmissibleSet, CostSpec, OptimizerConfig
from sgfopt.grid import FluidParams, VectorField, curl_vector, make_grid, norms, velocity_from_stream
from sgfopt.solvers import SolverConfig, solve_state


PARAMS = FluidParams(nu=1.0, alpha=0.05)
WIDE = AdmissibleSet((-100.0, -100.0), (100.0, 100.0))


def test_fit_order() -> None:
    hs = [0.1, 0.05, 0.025]
    assert fit_order(hs, [h**2 for h in hs]) == pytest.approx(2.0)
    assert fit_order(hs, [0.0, 0.0, 0.0]) == float("inf")
    with pytest.raises(ValueError, match="ゼロまたは負"):
        fit_order(hs, [1.0, 0.0, 0.5])
    with pytest.raises(ValueError, match="2 点以上"):
        fit_order([0.1], [1.0])


def test_inequality_record_tolerance() -> None:
    assert InequalityRecord("tight", 1.0 + 1e-10, 1.0).passed
    assert not InequalityRecord("loose", 1.1, 1.0).passed
    assert InequalityRecord("slack", 0.5, 1.0).slack == pytest.approx(0.5)


def test_random_fields_vanish_near_walls(grid17, rng) -> None:
    v = random_velocity(grid17, rng)

    assert norms(v).h1_semi == pytest.approx(1.0)
    assert np.all(v.values[:, grid17.boundary_mask] == 0.0)
    assert norms(random_control(grid17, rng, amplitude=3.0)).l2 == pytest.approx(3.0)


def test_random_fields_do_not_depend_on_resolution() -> None:
    coarse = analysis.random_stream_field(make_grid(33, 33), np.random.default_rng(5))
    fine = analysis.random_stream_field(make_grid(65, 65), np.random.default_rng(5))

    assert np.allclose(coarse.values, fine.values[::2, ::2])


def test_poincare_constant_converges_from_above() -> None:
    values = [poincare_constant(make_grid(n, n)) for n in (17, 33, 65)]

    assert values[0] > values[1] > values[2] > CONTINUUM_S2
    assert values[2] == pytest.approx(CONTINUUM_S2, abs=1e-3)


def test_estimate_constants_bounds_fresh_fields() -> None:
    grid = make_grid(17, 17)
    constants = estimate_constants(grid, trials=100, seed=0)
    fresh = np.random.default_rng(99)

    assert constants.kappa_bar == pytest.approx(2.0 * constants.s4**2 * constants.s2)
    for _ in range(20):
        v = random_velocity(grid, fresh)
        assert norms(v).l4 <= constants.s4 * (1 + 1e-8)


def test_estimate_constants_validation(grid17) -> None:
    with pytest.raises(ValueError, match="trials"):
        estimate_constants(grid17, trials=10)
    with pytest.raises(ValueError, match="kappa_bar"):
        estimate_constants(grid17, trials=100, kappa_bar=1e-9)


def test_check_smallness_flips_at_critical_scale(grid17) -> None:
    constants = ConstantsReport(s2=0.23, s4=0.5, kappa_bar=1.0)
    assert check_smallness(VectorField.zeros(grid17), PARAMS, constants).margin == pytest.approx(1.0)

    u = random_control(grid17, np.random.default_rng(3))
    load = norms(u).l2 + PARAMS.alpha * norms(curl_vector(u)).l2
    critical = PARAMS.nu**2 / (constants.kappa_bar * load)

    assert check_smallness(u * (0.99 * critical), PARAMS, constants).holds
    assert not check_smallness(u * (1.01 * critical), PARAMS, constants).holds


def test_state_estimates_hold_for_random_controls(grid17) -> None:
    constants = ConstantsReport(s2=poincare_constant(grid17), s4=0.5, kappa_bar=1.0)
    rng = np.random.default_rng(21)
    for _ in range(5):
        u = random_control(grid17, rng, amplitude=2.0)
        report = verify_state_estimates(solve_state(u, PARAMS), u, PARAMS, constants)
        assert report.passed
        assert [row[0] for row in report.rows] == ["h1_energy", "transport_l2"]


def test_gateaux_remainder_decays_linearly(grid17) -> None:
    rng = np.random.default_rng(31)
    u = random_control(grid17, rng, amplitude=5.0)
    w = random_control(grid17, rng, amplitude=5.0)

    report = gateaux_probe(u, w, (1e-1, 1e-2, 1e-3), PARAMS, SolverConfig(picard_tol=1e-12))

    assert report.passed
    assert report.measured["slope"] >= 0.9
    assert len(report.rows) == 3


def test_lipschitz_probe_with_identical_controls(grid17) -> None:
    constants = ConstantsReport(s2=poincare_constant(grid17), s4=0.5, kappa_bar=1.0)
    u = random_control(grid17, np.random.default_rng(41))

    report = lipschitz_probe(u, u, PARAMS, SolverConfig(), constants)

    assert report.measured["ratio"] == 0.0
    assert report.passed


def test_identities_hold_on_random_fields(grid17) -> None:
    report = verify_identities(grid17, seed=1, trials=20)

    assert report.passed
    assert report.measured["energy_neutrality"] <= 1e-12
    assert len(report.rows) == 20
    with pytest.raises(ValueError, match="trials"):
        verify_identities(grid17, trials=5)


def test_identity_residuals_converge_at_second_order() -> None:
    report = identity_convergence((33, 65, 129), seed=2, trials=20, min_order=1.8)

    assert report.passed
    assert report.measured["order_one"] >= 1.8
    assert report.measured["order_two"] >= 1.8


@pytest.mark.parametrize("case_id", ["poly-quartic", "trig"])
def test_manufactured_profiles_are_consistent(case_id) -> None:
    t = np.linspace(0.0, 1.0, 2001)
    profile = analysis._profile(case_id, t)
    for k in range(4):
        numeric = np.gradient(profile[k], t, edge_order=2)
        scale = np.abs(profile[k + 1]).max()
        assert np.abs(numeric - profile[k + 1])[5:-5].max() <= 1e-3 * scale


def test_manufactured_velocity_matches_stream(grid17) -> None:
    psi, _ = manufactured_case("poly-quartic", PARAMS, grid17)
    exact = manufactured_velocity("poly-quartic", grid17)

    assert np.all(psi.values[grid17.boundary_mask] == 0.0)
    assert norms(velocity_from_stream(psi) - exact).linf <= 1e-2


def test_unknown_manufactured_case(grid17) -> None:
    with pytest.raises(ValueError, match="未知の製造解"):
        manufactured_case("cubic", PARAMS, grid17)


@pytest.mark.parametrize("alpha", [0.0, 0.05])
def test_manufactured_solution_is_recovered(alpha) -> None:
    report = manufactured_convergence("poly-quartic", FluidParams(1.0, alpha), (17, 33, 65, 129))

    assert report.passed
    assert report.measured["order"] >= 1.0


def test_admissible_convergence_is_monotone(grid17) -> None:
    u = random_control(grid17, np.random.default_rng(51), amplitude=5.0)

    report = admissible_convergence(u, (0.1, 0.05, 0.025, 0.0125, 0.0), 1.0)

    assert report.passed
    assert report.rows[-1] == (0.0, 0.0)
    deltas = [row[1] for row in report.rows[:-1]]
    assert deltas[-1] < deltas[0]


def test_alpha_list_must_end_at_zero(grid17) -> None:
    with pytest.raises(ValueError, match="0 で終わる"):
        admissible_convergence(VectorField.zeros(grid17), (0.1, 0.05), 1.0)
    with pytest.raises(ValueError, match="狭義単調減少"):
        admissible_convergence(VectorField.zeros(grid17), (0.05, 0.1, 0.0), 1.0)


def _problem(grid, solver: SolverConfig = SolverConfig()) -> ControlProblem:
    target = random_velocity(grid, np.random.default_rng(61)) * 0.05
    return ControlProblem(CostSpec(0.01, target), WIDE, VectorField.zeros(grid), solver)


def test_continuation_at_zero_only_has_no_gaps(grid17) -> None:
    report = continuation_alpha(_problem(grid17), (0.0,), FluidParams(1.0, 0.0))

    assert report.passed
    assert len(report.rows) == 1
    assert report.rows[0][2:] == (0.0, 0.0, 0.0, 0.0)
    assert report.measured["final_gap_ratio"] == 0.0


def test_continuation_reports_each_alpha(grid17) -> None:
    seen = []
    report = continuation_alpha(
        _problem(grid17),
        (0.1, 0.05, 0.0),
        FluidParams(1.0, 0.0),
        OptimizerConfig(),
        on_result=lambda index, alpha, trace: seen.append((index, alpha, trace.converged)),
    )

    assert [row[0] for row in report.rows] == [0.1, 0.05, 0.0]
    assert report.rows[-1][2:] == (0.0, 0.0, 0.0, 0.0)
    assert seen == [(0, 0.1, True), (1, 0.05, True), (2, 0.0, True)]
    assert {"J_limit", "final_gap_ratio", "adjoint_limit_residual", "adjoint_mode_gap"} <= set(report.measured)


def test_parallel_continuation_matches_alpha_order(grid17) -> None:
    report = continuation_alpha(_problem(grid17), (0.05, 0.0), FluidParams(1.0, 0.0), workers=2)

    assert [row[0] for row in report.rows] == [0.05, 0.0]
    assert report.inputs["workers"] == 2


def test_continuation_gaps_shrink_toward_zero_alpha(grid17) -> None:
    target = random_velocity(grid17, np.random.default_rng(61)) * 0.5
    problem = ControlProblem(CostSpec(0.01, target), WIDE, VectorField.zeros(grid17), SolverConfig())
    alphas = (0.1, 0.05, 0.025, 0.0125, 0.0)

    report = continuation_alpha(problem, alphas, FluidParams(1.0, 0.0))

    assert report.passed
    deltas = [row[3] for row in report.rows[:-1]]
    assert all(delta > 0.0 for delta in deltas)
    assert deltas[-1] < deltas[0]
    assert report.measured["final_gap_ratio"] < 1.0


def test_sequential_and_parallel_continuation_agree(grid17) -> None:
    alphas = (0.05, 0.0)
    sequential = continuation_alpha(_problem(grid17), alphas, FluidParams(1.0, 0.0))
    parallel = continuation_alpha(_problem(grid17), alphas, FluidParams(1.0, 0.0), workers=2)

    for left, right in zip(sequential.rows, parallel.rows):
        assert left == pytest.approx(right, rel=1e-12, abs=1e-14)


def test_continuation_abort_returns_partial_report(grid17) -> None:
    problem = ControlProblem(
        CostSpec(0.01, VectorField.zeros(grid17)),
        WIDE,
        random_control(grid17, np.random.default_rng(71), amplitude=5.0),
        SolverConfig(picard_max_iters=1),
    )

    report = continuation_alpha(problem, (0.05, 0.0), FluidParams(1.0, 0.0))

    assert not report.passed
    assert "aborted" in report.notes


def test_contraction_audit_skips_controls_outside_smallness(grid17) -> None:
    constants = ConstantsReport(s2=poincare_constant(grid17), s4=0.5, kappa_bar=1.0)
    rng = np.random.default_rng(81)
    controls = [random_control(grid17, rng, amplitude=0.1), random_control(grid17, rng, amplitude=100.0)]

    report = analysis.contraction_audit(controls, PARAMS, SolverConfig(), constants)

    assert report.passed
    assert [row[0] for row in report.rows] == [0]


def test_smallness_sweep_stays_within_bound(grid17) -> None:
    constants = ConstantsReport(s2=poincare_constant(grid17), s4=0.5, kappa_bar=1.0)
    rng = np.random.default_rng(91)
    u = random_control(grid17, rng)
    direction = random_control(grid17, rng)

    report = analysis.smallness_sweep(u, direction, PARAMS, SolverConfig(), constants)

    assert report.passed
    assert [row[0] for row in report.rows] == [0.25, 0.5, 0.75, 0.9]
    with pytest.raises(ValueError, match="非ゼロ"):
        analysis.smallness_sweep(VectorField.zeros(grid17), direction, PARAMS, SolverConfig(), constants)
