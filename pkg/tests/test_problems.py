import numpy as np
import pytest

from conftest import central_jacobian
from drmor.dynsys import NewtonConfig, TimeGrid, integrate_implicit_euler_batch, newton_step_solve
from drmor.problems import (
    HeatProblemSpec,
    OdeFamilySpec,
    PressureField,
    TwoPhaseSpec,
    brooks_corey,
    build_heat_fom,
    build_problem123,
    build_saturation_fom,
    fractional_flow,
    heat_source,
    load_permeability_csv,
    ode3_initial_state,
    ode3_jacobian,
    ode3_rhs,
    sequential_implicit_run,
    solve_pressure,
    stability_bound,
    upwind_operator,
)

VERBATIM = TwoPhaseSpec(corey="verbatim")

# Problems 1-3 -------------------------------------------------------------------


def test_ode3_rhs_point():
    assert ode3_rhs(np.array([1.0, 0.1, 0.0])) == pytest.approx([0.0, 0.0, -0.99])


def test_ode3_jacobian_at_origin_is_zero():
    assert np.array_equal(ode3_jacobian(np.zeros(3)), np.zeros((3, 3)))


def test_ode3_jacobian_matches_differences(rng):
    for y in rng.uniform(-1, 1, size=(50, 3)):
        fd = central_jacobian(ode3_rhs, y)
        assert np.max(np.abs(ode3_jacobian(y) - fd)) <= 1e-5 * max(1.0, np.abs(fd).max())


@pytest.mark.parametrize("variant,inputs,expected", [
    ("P1", [-0.3], [1.0, -0.03, 0.0]),
    ("P2", [0.5, -0.2], [1.0, 0.05, -0.2]),
    ("P3", [0.1, 0.2, 0.3], [0.1, 0.2, 0.3]),
])
def test_initial_states(variant, inputs, expected):
    system, y0 = build_problem123(OdeFamilySpec(variant, inputs))
    assert y0 == pytest.approx(expected)
    assert np.array_equal(system.linear_op, np.zeros((3, 3)))


def test_initial_states_batched():
    y0 = ode3_initial_state("P1", np.array([[0.5], [-1.0]]))
    assert y0 == pytest.approx(np.array([[1.0, 0.05, 0.0], [1.0, -0.1, 0.0]]))


def test_family_spec_checks_input_count():
    with pytest.raises(ValueError):
        OdeFamilySpec("P2", [0.1])
    with pytest.raises(ValueError):
        OdeFamilySpec("P7", [0.1])


def test_sign_of_y2_is_preserved():
    x = np.concatenate([np.linspace(-1, -0.1, 10), np.linspace(0.1, 1, 10)])
    system, _ = build_problem123(OdeFamilySpec("P1", [0.0]))
    states = integrate_implicit_euler_batch(system, ode3_initial_state("P1", x[:, None]),
                                            TimeGrid(0.1, 100))
    assert np.array_equal(np.sign(states[:, -1, 1]), np.sign(x))


# Problem 4 -----------------------------------------------------------------------


def test_heat_dimension_and_initial_state():
    system, y0 = build_heat_fom(HeatProblemSpec(alpha=0.05))
    assert system.n == 99
    assert np.array_equal(y0, np.zeros(99))


def test_heat_stencil_row():
    alpha, dx = 0.05, 0.01
    system, _ = build_heat_fom(HeatProblemSpec(alpha=alpha, dx=dx))
    row = system.linear_op[50]
    expected = np.zeros(99)
    expected[49:52] = np.array([1.0, -2.0, 1.0]) * alpha / dx ** 2
    assert row == pytest.approx(expected, rel=1e-14)
    # Dirichlet folding drops the outside neighbour
    assert system.linear_op[0, :2] == pytest.approx(np.array([-2.0, 1.0]) * alpha / dx ** 2)


def test_heat_source_support():
    spec = HeatProblemSpec()
    b = heat_source(spec)
    x = spec.nodes
    assert b[np.argmin(np.abs(x - 0.5))] == 1.0
    assert b[np.argmin(np.abs(x - 0.2))] == 0.0
    assert b[np.argmin(np.abs(x - 0.4))] == 1.0 and b[np.argmin(np.abs(x - 0.6))] == 1.0


def test_heat_steady_state_maximum_principle():
    spec = HeatProblemSpec(alpha=0.03)
    system, _ = build_heat_fom(spec)
    y_inf = np.linalg.solve(system.linear_op, -system.forcing)
    assert np.all(y_inf >= 0)
    assert np.allclose(y_inf, y_inf[::-1], atol=1e-12 * y_inf.max())
    lo, hi = spec.source_support
    assert lo <= spec.nodes[np.argmax(y_inf)] <= hi


def test_heat_dx_must_divide_interval():
    with pytest.raises(ValueError):
        HeatProblemSpec(dx=0.3).n


# Problem 5: closures -------------------------------------------------------------


def test_brooks_corey_verbatim_examples():
    assert brooks_corey(0.4, VERBATIM) == pytest.approx((0.0, 1.0))
    assert brooks_corey(0.9, VERBATIM) == pytest.approx((0.25, 0.25))


def test_brooks_corey_sum_minimal_at_half():
    star = np.linspace(0, 1, 1001)
    total = star ** 2 + (1 - star) ** 2
    assert star[np.argmin(total)] == pytest.approx(0.5)
    krw, kro = brooks_corey(0.9, VERBATIM)
    assert krw + kro == pytest.approx(total.min())


def test_fractional_flow_verbatim_examples():
    assert fractional_flow(0.4, VERBATIM)[0] == pytest.approx(0.0)
    assert fractional_flow(0.8, VERBATIM)[0] == pytest.approx(1.6 / 1.96, abs=1e-12)
    assert fractional_flow(0.8, VERBATIM)[0] == pytest.approx(0.816327, abs=1e-6)


def test_fractional_flow_normalized_endpoints():
    spec = TwoPhaseSpec()
    assert fractional_flow(0.2, spec)[0] == 0.0
    assert fractional_flow(0.8, spec)[0] == pytest.approx(1.0)


@pytest.mark.parametrize("spec", [TwoPhaseSpec(), VERBATIM])
def test_fractional_flow_derivative(spec, rng):
    lo, hi = (0.2, 0.8) if spec.corey == "normalized" else (0.4, 0.8)
    s = rng.uniform(lo + 1e-3, hi - 1e-3, size=20)
    h = 1e-6
    fd = (fractional_flow(s + h, spec)[0] - fractional_flow(s - h, spec)[0]) / (2 * h)
    df = fractional_flow(s, spec)[1]
    assert np.max(np.abs(df - fd) / np.maximum(np.abs(df), 1e-12)) < 1e-6


def test_unknown_corey_mode():
    with pytest.raises(ValueError):
        TwoPhaseSpec(corey="squared")


# Problem 5: pressure ---------------------------------------------------------------


def test_pressure_uniform_velocity():
    spec = TwoPhaseSpec()
    field = solve_pressure(np.full(64, 0.5), spec)
    assert field.velocity[1:-1] == pytest.approx(np.full(63, 0.1), abs=1e-12)
    assert field.pressure[-1] == 0.0


def test_pressure_divergence_equals_source(rng):
    spec = TwoPhaseSpec(permeability=tuple(rng.uniform(0.5, 2.0, 64)))
    field = solve_pressure(rng.uniform(0.2, 0.8, 64), spec)
    div = field.velocity[1:] - field.velocity[:-1]
    assert np.max(np.abs(div - spec.sources())) < 1e-10


def test_pressure_scales_with_permeability():
    s = np.linspace(0.8, 0.2, 64)
    a = solve_pressure(s, TwoPhaseSpec())
    b = solve_pressure(s, TwoPhaseSpec(permeability=(2.0,) * 64))
    assert np.allclose(a.velocity, b.velocity, atol=1e-12)
    drop_a = a.pressure[0] - a.pressure[-1]
    drop_b = b.pressure[0] - b.pressure[-1]
    assert drop_b == pytest.approx(drop_a / 2, rel=1e-12)


def test_pressure_shape_checked():
    with pytest.raises(ValueError):
        solve_pressure(np.full(10, 0.5), TwoPhaseSpec())


def test_permeability_length_checked():
    with pytest.raises(ValueError):
        TwoPhaseSpec(permeability=(1.0, 2.0))


def test_load_permeability_csv(tmp_path):
    path = tmp_path / "k.csv"
    path.write_text("# permeability\n" + "\n".join(f"{1 + i / 64}" for i in range(64)))
    k = load_permeability_csv(path)
    assert len(k) == 64 and k[0] == 1.0
    assert TwoPhaseSpec(permeability=k).perm[-1] == pytest.approx(1 + 63 / 64)


# Problem 5: saturation FOM ---------------------------------------------------------


def test_stagnant_flow_has_no_transport(rng):
    spec = TwoPhaseSpec(q_inj=0.0, q_prod=0.0)
    system = build_saturation_fom(PressureField(np.zeros(64), np.zeros(65)), spec)
    s = rng.uniform(0.2, 0.8, 64)
    assert np.array_equal(system.rhs(s), np.zeros(64))


def test_uniform_flux_telescopes():
    spec = TwoPhaseSpec(q_inj=0.0, q_prod=0.0)
    A = upwind_operator(np.full(65, 0.1), spec)
    assert np.max(np.abs(A @ np.full(64, 0.37))[1:-1]) < 1e-12


def test_implicit_step_conserves_mass(rng):
    spec = TwoPhaseSpec(porosity=0.25)
    s_prev = np.clip(np.linspace(0.8, 0.2, 64) + rng.normal(0, 0.01, 64), 0.2, 0.8)
    system = build_saturation_fom(solve_pressure(s_prev, spec), spec)
    dt = 0.01
    s_next, _ = newton_step_solve(system, s_prev, dt)
    produced = -spec.q_prod * fractional_flow(s_next[-1], spec)[0]
    lhs = spec.porosity * spec.dx * np.sum(s_next - s_prev)
    assert lhs == pytest.approx(dt * (spec.q_inj - produced), abs=1e-9)


@pytest.fixture(scope="module")
def reference_run():
    spec = TwoPhaseSpec()
    return spec, sequential_implicit_run(spec, TimeGrid(0.015, 100), NewtonConfig())


def test_sequential_zero_steps():
    spec = TwoPhaseSpec()
    traj = sequential_implicit_run(spec, TimeGrid(0.015, 0))
    assert np.array_equal(traj.states[:, 0], np.full(64, 0.2))


def test_sequential_front_is_monotone(reference_run):
    _, traj = reference_run
    assert np.all(np.diff(traj.states, axis=0) <= 1e-8)


def test_sequential_bounds(reference_run):
    spec, traj = reference_run
    lo, hi = spec.s_bounds
    assert traj.states.min() >= lo - 1e-8 and traj.states.max() <= hi + 1e-8
    assert traj.states[0, -1] > 0.5


def test_sequential_update_interval_checked():
    with pytest.raises(ValueError):
        sequential_implicit_run(TwoPhaseSpec(), TimeGrid(0.015, 2), pressure_update_every=0)


def test_stability_bound_below_reference_dt():
    spec = TwoPhaseSpec()
    bound = stability_bound(spec)
    s = np.linspace(0.2, 0.8, 10_000)
    oracle = spec.porosity * spec.dx / (0.1 * np.max(fractional_flow(s, spec)[1]))
    assert bound == pytest.approx(oracle, rel=1e-12)
    assert bound < 0.03
