import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsse_admm import analysis, fixtures
from dsse_admm.grid import AreaProblem, GridConfig, ParseError, make_instance
from dsse_admm.solver import (
    IterateState,
    LocalSystem,
    SingularLocalSystem,
    SolverParams,
    assemble_state,
    consensus_update,
    dual_update,
    ergodic_point,
    extrapolate,
    local_update,
    momentum_update,
    next_alpha,
    read_residual_csv,
    residuals,
    solve,
    solve_aadmm,
    solve_admm,
)


def scalar_problem(z=1.0, coupled=True):
    kw = dict(coupling_index=[0], coupling_pos=[0], coupling_sign=[1.0]) if coupled else {}
    return AreaProblem(area=0, buses=(0,), H=[[1.0]], z=[z], **kw)


def oracle_error(grid, problems, v):
    x = analysis.centralized_solve(grid, problems)
    return max(float(np.abs(vk - x[list(p.buses)]).max()) for vk, p in zip(v, problems))


# --- local update ---------------------------------------------------------


def test_local_update_scalar():
    v = local_update(scalar_problem(), np.zeros(1), np.zeros(1), 1.0)
    assert v[0] == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("z, y, u, mu", [(1.0, 0.3, -0.2, 2.0), (-3.0, 1.0, 4.0, 0.5)])
def test_local_update_scalar_closed_form(z, y, u, mu):
    # stationarity: (v - z) + y + mu (v - u) = 0
    v = local_update(scalar_problem(z), np.array([y]), np.array([u]), mu)
    assert v[0] == pytest.approx((z - y + mu * u) / (1 + mu), abs=1e-14)


def test_local_update_partner_sign():
    p = AreaProblem(area=1, buses=(0,), H=[[1.0]], z=[1.0], coupling_index=[0], coupling_pos=[0],
                    coupling_sign=[-1.0])
    v = local_update(p, np.array([0.4]), np.zeros(1), 1.0)
    # partner copy carries -y: (v - 1) - 0.4 + v = 0
    assert v[0] == pytest.approx(0.7, abs=1e-15)


def test_local_update_at_optimum_is_unconstrained_ls():
    g, problems, x = fixtures.two_area_instance(noise_std=0.0)
    for p in problems:
        u = x[[p.buses[i] for i in p.coupling_pos]]
        v = local_update(p, np.zeros(len(u)), u, 3.0)
        # zero residual: v minimizes the area's own least squares (H may have a gauge null space)
        np.testing.assert_allclose(p.H @ v, p.z, atol=1e-10)
        np.testing.assert_allclose(v, x[list(p.buses)], atol=1e-10)


def test_local_update_matches_stacked_least_squares(two_area):
    # subproblem = least squares on [H; sqrt(mu) S] v ~ [z; sqrt(mu) (u - s*y/mu)]
    _, problems, _ = two_area
    rng = np.random.default_rng(3)
    for p in problems:
        m = p.coupling_index.size
        y, u, mu = rng.normal(size=m), rng.normal(size=m), 1.7
        S = np.zeros((m, p.n))
        S[np.arange(m), p.coupling_pos] = 1.0
        A = np.vstack([p.H, math.sqrt(mu) * S])
        b = np.concatenate([p.z, math.sqrt(mu) * (u - p.coupling_sign * y / mu)])
        ref = np.linalg.lstsq(A, b, rcond=None)[0]
        np.testing.assert_allclose(local_update(p, y, u, mu), ref, atol=1e-8)


def test_local_system_singular():
    p = AreaProblem(area=0, buses=(0, 1), H=[[1.0, 0.0]], z=[1.0])
    with pytest.raises(SingularLocalSystem):
        LocalSystem(p, 1.0)


# --- consensus / dual -----------------------------------------------------


def test_consensus_update_examples():
    assert consensus_update(np.array([2.0]), np.array([4.0]))[0] == 3.0
    assert consensus_update(np.array([1.25]), np.array([1.25]))[0] == 1.25
    assert consensus_update(np.array([0.7]), np.array([-0.7]))[0] == 0.0


def test_dual_update_examples():
    assert dual_update(np.zeros(1), np.array([3.0]), np.array([3.0]), 1.0)[0] == 0.0
    assert dual_update(np.ones(1), np.array([1.5]), np.array([1.0]), 2.0)[0] == 2.0
    own, other = np.array([2.0]), np.array([4.0])
    u = consensus_update(own, other)
    assert dual_update(np.zeros(1), own, u, 1.0)[0] == -1.0


# --- momentum -------------------------------------------------------------


def test_first_alpha():
    assert next_alpha(1.0) == pytest.approx((1 + math.sqrt(2)) / 2, abs=1e-15)
    assert next_alpha(1.0) == pytest.approx(1.20711, abs=1e-5)


def test_first_momentum_step_is_plain():
    u, up = np.array([1.0, 2.0]), np.array([0.0, 5.0])
    y, yp = np.array([0.3, 0.1]), np.array([-1.0, 0.0])
    uh, yh, a = momentum_update(u, up, y, yp, 1.0)
    np.testing.assert_array_equal(uh, u)
    np.testing.assert_array_equal(yh, y)
    assert a == next_alpha(1.0)


def test_no_extrapolation_on_stagnation():
    u = np.array([0.2, -0.4])
    np.testing.assert_array_equal(extrapolate(u, u.copy(), 0.7), u)


def test_momentum_extrapolation_value():
    a1 = next_alpha(1.0)
    a2 = next_alpha(a1)
    uh, _, a = momentum_update(np.array([1.0]), np.array([0.0]), np.zeros(1), np.zeros(1), a1)
    assert a == a2
    assert uh[0] == pytest.approx(1.0 + (a1 - 1.0) / a2, abs=1e-15)


@given(st.integers(1, 500))
def test_alpha_sequence_monotone(n):
    # the recursion has fixed point 4/3; strict growth is visible until it
    # falls below double resolution, after which consecutive values tie
    a = 1.0
    for i in range(n):
        b = next_alpha(a)
        if i < 30:
            assert b > a
        assert b >= a >= 1.0
        assert b <= 4.0 / 3.0 + 1e-15
        assert 0.0 <= (a - 1.0) / b < 1.0
        a = b


# --- residuals / ergodic --------------------------------------------------


def test_residual_examples():
    r, s = residuals(np.array([2.0]), np.array([4.0]), np.array([3.0]), np.array([0.0]))
    assert r == pytest.approx(math.sqrt(2), abs=1e-15)
    assert s == 3.0
    r, s = residuals(np.array([1.0, 2.0]), np.array([1.0, 2.0]), np.array([1.0, 2.0]), np.array([1.0, 2.0]))
    assert r == 0.0 and s == 0.0


def test_ergodic_point_examples():
    p = scalar_problem()
    st_ = IterateState.initial([p], 1)
    with pytest.raises(ValueError):
        ergodic_point(st_)
    st_.v, st_.u, st_.y = [np.array([0.0])], np.array([5.0]), np.array([1.0])
    st_.accumulate()
    v, u, y = ergodic_point(st_)
    assert v[0][0] == 0.0 and u[0] == 5.0 and y[0] == 1.0
    st_.v = [np.array([2.0])]
    st_.accumulate()
    v, u, y = ergodic_point(st_)
    assert v[0][0] == 1.0 and u[0] == 5.0 and y[0] == 1.0


# --- full iteration against a straight-line transcription ----------------


def straight_line_iteration(problems, y, u, mu):
    """One ADMM round written out without any of the solver's helpers."""
    v = []
    for p in problems:
        G = p.H.T @ p.H
        rhs = p.H.T @ p.z
        for c, pos, sign in zip(p.coupling_index, p.coupling_pos, p.coupling_sign):
            G[pos, pos] += mu
            rhs[pos] += mu * u[c] - sign * y[c]
        v.append(np.linalg.solve(G, rhs))
    m = len(u)
    copies = {}
    for k, p in enumerate(problems):
        for c, pos, sign in zip(p.coupling_index, p.coupling_pos, p.coupling_sign):
            copies[(c, sign > 0)] = v[k][pos]
    u_new = np.array([(copies[(c, True)] + copies[(c, False)]) / 2 for c in range(m)])
    y_new = np.array([y[c] + mu * (copies[(c, True)] - u_new[c]) for c in range(m)])
    return v, u_new, y_new


def test_one_iteration_matches_transcription(two_area):
    g, problems, _ = two_area
    assert len(g.registry) == 2
    mu = 1.3
    rep = solve_admm(problems, g.registry, SolverParams(mu, max_iter=1), keep_history=True)
    v, u, y = straight_line_iteration(problems, np.zeros(2), np.zeros(2), mu)
    for a, b in zip(rep.v, v):
        np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)
    np.testing.assert_allclose(rep.u, u, atol=1e-12, rtol=0)
    np.testing.assert_allclose(rep.y, y, atol=1e-12, rtol=0)


def test_five_iterations_match_transcription(block4):
    g, problems, _ = block4
    mu = 2.0
    rep = solve_admm(problems, g.registry, SolverParams(mu, max_iter=5), keep_history=True)
    m = len(g.registry)
    u, y = np.zeros(m), np.zeros(m)
    for (hv, hu, hy) in rep.history:
        v, u, y = straight_line_iteration(problems, y, u, mu)
        np.testing.assert_allclose(hu, u, atol=1e-12, rtol=0)
        np.testing.assert_allclose(hy, y, atol=1e-12, rtol=0)


def test_aadmm_two_iterations_match_transcription(two_area):
    g, problems, _ = two_area
    rho = 1.0
    rep = solve_aadmm(problems, g.registry, SolverParams(rho, max_iter=3), keep_history=True)
    u0 = y0 = np.zeros(2)
    _, u1, y1 = straight_line_iteration(problems, y0, u0, rho)
    a1 = (1 + math.sqrt(2)) / 2
    # second round reads the extrapolation with coefficient (alpha_1 - 1) / alpha_2
    a2 = (1 + math.sqrt(1 + a1 * a1)) / 2
    uh = u1 + (a1 - 1) / a2 * (u1 - u0)
    yh = y1 + (a1 - 1) / a2 * (y1 - y0)
    # first round coefficient is 0, so round 2 reads (u1, y1); round 3 reads (uh, yh)
    _, u2, y2 = straight_line_iteration(problems, y1, u1, rho)
    np.testing.assert_allclose(rep.history[1][1], u2, atol=1e-12, rtol=0)
    uh = u2 + (a1 - 1) / a2 * (u2 - u1)
    yh = y2 + (a1 - 1) / a2 * (y2 - y1)
    _, u3, y3 = straight_line_iteration(problems, yh, uh, rho)
    np.testing.assert_allclose(rep.history[2][1], u3, atol=1e-12, rtol=0)
    np.testing.assert_allclose(rep.history[2][2], y3, atol=1e-12, rtol=0)


# --- full runs ------------------------------------------------------------


def test_single_area_converges_immediately():
    p = AreaProblem(area=0, buses=(0, 1), H=[[1.0, 0.0], [1.0, -1.0], [0.0, 1.0]], z=[0.1, 0.3, -0.1])
    ls = np.linalg.lstsq(p.H, p.z, rcond=None)[0]
    a = solve_admm([p], 0, SolverParams(1.0))
    b = solve_aadmm([p], 0, SolverParams(1.0))
    assert a.iterations == b.iterations == 1 and a.converged
    np.testing.assert_allclose(a.v[0], ls, atol=1e-12)
    np.testing.assert_array_equal(a.v[0], b.v[0])


def test_two_area_final_state_near_oracle(two_area):
    g, problems, _ = two_area
    rep = solve_admm(problems, g.registry, SolverParams(1.0))
    assert rep.converged
    assert oracle_error(g, problems, rep.v) < 10 * math.sqrt(1e-3)
    r2 = solve_admm(problems, g.registry, SolverParams(1.0, 1e-7, 1e-8))
    assert oracle_error(g, problems, r2.v) < oracle_error(g, problems, rep.v) / 10


def test_two_area_same_limit_point(two_area):
    g, problems, _ = two_area
    p = SolverParams(1.0, eps_primal=1e-15, eps_dual=1e-16, max_iter=10_000)
    a = solve_admm(problems, g.registry, p)
    b = solve_aadmm(problems, g.registry, p)
    assert a.converged and b.converged
    for x, y in zip(a.v, b.v):
        np.testing.assert_allclose(x, y, atol=1e-6, rtol=0)
    assert oracle_error(g, problems, a.v) < 1e-6


@pytest.mark.parametrize("num_areas", [2, 4, 8])
@pytest.mark.parametrize("method", ["admm", "aadmm"])
def test_tightening_moves_toward_oracle(num_areas, method):
    rng = np.random.default_rng(num_areas)
    for seed in rng.integers(0, 2**31, size=2):
        g, problems, _ = fixtures.instance(num_areas, seed=int(seed))
        loose = solve(method, problems, g.registry, SolverParams(1.0, max_iter=5000))
        tight = solve(method, problems, g.registry, SolverParams(1.0, 1e-7, 1e-8, max_iter=50_000))
        assert loose.converged and tight.converged
        assert oracle_error(g, problems, tight.v) < oracle_error(g, problems, loose.v) / 10


def test_history_lengths_and_max_iter(block4):
    g, problems, _ = block4
    rep = solve_admm(problems, g.registry, SolverParams(1.0, max_iter=7))
    assert not rep.converged
    assert rep.iterations == 7 == len(rep.primal_history) == len(rep.dual_history)
    assert rep.summary() == {"converged": False, "iterations": 7, "penalty": 1.0}


def test_reported_count_is_first_stop(block4):
    g, problems, _ = block4
    params = SolverParams(1.0)
    rep = solve_admm(problems, g.registry, params)
    r, s = rep.primal_history, rep.dual_history
    hit = (r ** 2 < params.eps_primal) & (s ** 2 < params.eps_dual)
    assert hit[-1] and not hit[:-1].any()


def test_parallel_matches_sequential(chain8):
    g, problems, _ = chain8
    for method in ("admm", "aadmm"):
        a = solve(method, problems, g.registry, SolverParams(2.0), workers=1)
        b = solve(method, problems, g.registry, SolverParams(2.0), workers=4)
        np.testing.assert_array_equal(a.primal_history, b.primal_history)
        np.testing.assert_array_equal(a.dual_history, b.dual_history)
        for x, y in zip(a.v_bar, b.v_bar):
            np.testing.assert_array_equal(x, y)


def test_ergodic_sums_match_history(two_area):
    g, problems, _ = two_area
    rep = solve_aadmm(problems, g.registry, SolverParams(1.0), keep_history=True)
    n = len(rep.history)
    np.testing.assert_allclose(rep.u_bar, sum(h[1] for h in rep.history) / n, atol=1e-15)
    np.testing.assert_allclose(rep.y_bar, sum(h[2] for h in rep.history) / n, atol=1e-15)
    np.testing.assert_allclose(rep.v_bar[1], sum(h[0][1] for h in rep.history) / n, atol=1e-15)


def test_assemble_state(two_area):
    g, problems, x = fixtures.two_area_instance(noise_std=0.0)
    v = [x[list(p.buses)] for p in problems]
    np.testing.assert_allclose(assemble_state(problems, v, g.num_buses), x)


def test_unknown_method(two_area):
    g, problems, _ = two_area
    with pytest.raises(ValueError):
        solve("admm2", problems, g.registry, SolverParams())


@pytest.mark.parametrize("kw", [dict(penalty=0.0), dict(penalty=-1.0), dict(eps_primal=0.0),
                                dict(eps_dual=-1e-3), dict(max_iter=0)])
def test_invalid_params(kw, two_area):
    g, problems, _ = two_area
    with pytest.raises(ValueError):
        solve_admm(problems, g.registry, SolverParams(**kw))


def test_residual_csv_round_trip(tmp_path, two_area):
    g, problems, _ = two_area
    rep = solve_admm(problems, g.registry, SolverParams())
    rep.to_csv(tmp_path / "r.csv")
    r, s = read_residual_csv(tmp_path / "r.csv")
    np.testing.assert_array_equal(r, rep.primal_history)
    np.testing.assert_array_equal(s, rep.dual_history)


@pytest.mark.parametrize("text", ["", "iter,primal_residual,dual_residual\n", "a,b\n1,2\n",
                                  "iter,primal_residual,dual_residual\n1,x,0.1\n"])
def test_residual_csv_malformed(tmp_path, text):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(ParseError):
        read_residual_csv(path)


# Published 40-area figures; the block split and sensor placement here are
# not the published ones, so these are recorded but not met.

@pytest.mark.xfail(strict=True, reason="ring instance takes ~159 iterations at mu=4; see notes on iteration counts")
def test_forty_area_ring_mu4_iteration_range():
    g, problems, _ = make_instance(GridConfig("ring", 10))
    rep = solve_admm(problems, g.registry, SolverParams(4.0))
    assert rep.converged and 20 <= rep.iterations <= 100


@pytest.mark.xfail(strict=True, reason="A-ADMM at rho=4 needs more iterations than ADMM at mu=4 here")
def test_forty_area_ring_aadmm_fewer_at_4():
    g, problems, _ = make_instance(GridConfig("ring", 10))
    a = solve_admm(problems, g.registry, SolverParams(4.0))
    b = solve_aadmm(problems, g.registry, SolverParams(4.0))
    assert b.iterations < a.iterations
