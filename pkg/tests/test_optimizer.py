import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dsmpl.graph import MixingMatrix, metropolis_weights, path_graph
from dsmpl.optimizer import (
    SCAMPL,
    SMPL,
    AgentState,
    AlgorithmConfig,
    BadInit,
    DegenerateSchedule,
    NonFiniteIterate,
    SolverFailure,
    assemble_scampl_subproblem,
    assemble_smpl_subproblem,
    consensus_x,
    default_schedule,
    init_run,
    momentum_update,
    run,
    run_algorithm,
    scampl_linear_coefficient,
    solve_subproblem,
    tracking_update,
)
from dsmpl.problems import ProblemSpec, desk_scale_params, make_quartic_problem, make_trajectory_problem
from oracles import single_constraint_prox, smpl_penalized_objective_1d

PATH3 = metropolis_weights(path_graph(3))
QUARTIC3 = make_quartic_problem(3, noise_std=1.0, seed=2, gamma=50.0)
QUIET3 = make_quartic_problem(3, noise_std=0.0, seed=2, gamma=50.0)
GRID = np.arange(-8.0, 4.0 + 5e-5, 1e-4)
WIDE_GRID = np.arange(-30.0, 30.0 + 5e-5, 1e-4)


def _agent(x, y, z=None, **kw):
    x = np.atleast_1d(np.asarray(x, float))
    y = np.atleast_1d(np.asarray(y, float))
    kw = {k: np.atleast_1d(np.asarray(v, float)) for k, v in kw.items()}
    return AgentState(x=x, z=y.copy() if z is None else np.atleast_1d(np.asarray(z, float)), y=y, **kw)


def _solve_x(inst, d):
    return solve_subproblem(inst, d).z[:d]


# ---------------------------------------------------------------- schedules


def test_schedule_rate_with_inactive_caps():
    s = default_schedule(SMPL, n=10, nu=1.19, L=1e-4, sigma_bar_sq=1.0, T=10**6, gamma=1.0)
    assert s.eta == pytest.approx((100 / (1.19**2 * 1e6)) ** (1 / 3), rel=1e-12)
    assert s.eta == pytest.approx(0.0413, abs=5e-5)
    assert s.b0 == 216
    assert s.beta == pytest.approx(576 * 1.19**2 * 1e-8 * s.eta**2 / 10, rel=1e-12)
    assert s.warnings == []


def test_initial_batch_rounding():
    s = default_schedule(SMPL, n=10, nu=1.2, L=1.0, sigma_bar_sq=1.0, T=1000, gamma=1.0)
    assert s.b0 == 22  # ceil(21.54)
    s = default_schedule(SMPL, n=1, nu=1.0, L=1.0, sigma_bar_sq=1.0, T=1000, gamma=1.0)
    assert s.b0 == 10  # exact cube root must not round up


def test_schedule_shrinks_with_penalty():
    etas = [default_schedule(SMPL, 10, 1.2, 5.0, 1.0, 1000, g).eta for g in (1.0, 1e2, 1e4, 1e8)]
    assert all(a > b for a, b in zip(etas, etas[1:]))
    assert etas[-1] < 1e-8


def test_scampl_schedule_and_clamps():
    s = default_schedule(SCAMPL, n=10, nu=1.19, L=320.0, sigma_bar_sq=1.0, T=2000, gamma=2000.0, mu=5000.0, lam=0.4)
    cap = min(0.5, math.sqrt(2) / (13 * math.sqrt(3) * 0.4 * 1.19**2), math.sqrt(10) / (3 * 1.19)) * 5000 / (8 * 320)
    base = 5000 * (100 / (1.19**2 * 2000)) ** (1 / 3)
    assert s.alpha == pytest.approx(min(base, cap, 1.0), rel=1e-12)
    assert s.beta == pytest.approx(min(1.0, 576 * 1.19**2 * 320**2 * s.alpha**2 / (10 * 5000**2)), rel=1e-12)
    assert s.warnings == []
    # a prox weight far above the smoothness pushes the relaxation past 1
    big = default_schedule(SCAMPL, n=10, nu=1.19, L=1.0, sigma_bar_sq=1.0, T=100, gamma=1.0, mu=5000.0, lam=0.4)
    assert big.alpha == 1.0 and any("alpha" in w for w in big.warnings)
    assert big.beta <= 1.0
    with pytest.raises(DegenerateSchedule):
        default_schedule(SCAMPL, n=10, nu=1.19, L=1.0, sigma_bar_sq=1.0, T=100, gamma=1.0, mu=5000.0, lam=0.4,
                         strict=True)
    with pytest.raises(ValueError):
        default_schedule(SCAMPL, 10, 1.2, 1.0, 1.0, 100, 1.0)


def test_explicit_experiment_parameters_are_accepted():
    cfg = AlgorithmConfig(variant="SCAMPL", gamma=2000.0, mu=5000.0, alpha=0.05, beta=3.5e-6)
    assert (cfg.gamma, cfg.mu, cfg.alpha, cfg.beta) == (2000.0, 5000.0, 0.05, 3.5e-6)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(variant="SMPL", eta=0.0),
        dict(variant="SCAMPL", alpha=1.5, mu=1.0),
        dict(variant="SCAMPL", alpha=0.5, mu=0.0),
        dict(variant="SMPL", eta=0.1, beta=0.0),
        dict(variant="SMPL", eta=0.1, beta=1.1),
        dict(variant="SMPL", eta=0.1, gamma=-1.0),
        dict(variant="SMPL", eta=0.1, b0=0),
        dict(variant="ADMM", eta=0.1),
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        AlgorithmConfig(**kwargs)


# ---------------------------------------------------------------- assembly


def test_slack_constraints_and_zero_tracker_stay_put():
    prob = make_quartic_problem(1, noise_std=0.0)
    x_i = np.array([-2.05])  # both constraints strictly satisfied
    inst = assemble_smpl_subproblem(_agent(x_i, [0.0]), prob, eta=0.1, gamma=10.0)
    sol = solve_subproblem(inst, 1)
    assert sol.z[0] == pytest.approx(-2.05, abs=1e-10)
    assert sol.z[1] == pytest.approx(0.0, abs=1e-10)


def _ball_problem(d, radius=1.0):
    def g(x):
        return np.array([x @ x - radius**2]), 2 * x[None, :]

    return ProblemSpec("ball", d, 1, 1, lambda i, x, k: np.zeros(d), g, gamma=1.0, sigma_bar_sq=0.0)


@given(seed=st.integers(0, 2**32 - 1), eta=st.floats(0.01, 2.0), gamma=st.floats(0.1, 50.0))
def test_single_constraint_closed_form(seed, eta, gamma):
    rng = np.random.default_rng(seed)
    d = 3
    prob = _ball_problem(d)
    x_i = rng.uniform(-2, 2, d)
    y = rng.uniform(-3, 3, d)
    inst = assemble_smpl_subproblem(_agent(x_i, y), prob, eta, gamma)
    got = _solve_x(inst, d)
    values, jac = prob.constraint_eval(x_i)
    ref = single_constraint_prox(x_i, y, eta, gamma, values[0], jac[0])
    np.testing.assert_allclose(got, ref, atol=1e-7 * max(1.0, np.abs(ref).max()))


def test_quartic_smpl_step_matches_grid_search():
    prob = make_quartic_problem(1, noise_std=0.0, seed=0, gamma=10.0)
    x_i = np.array([0.0])
    y = prob.mean_grad(0, x_i)
    values, jac = prob.constraint_eval(x_i)
    for eta in (0.002, 0.02, 0.2):
        got = _solve_x(assemble_smpl_subproblem(_agent(x_i, y), prob, eta, 10.0), 1)[0]
        obj = smpl_penalized_objective_1d(GRID, y[0], 0.0, eta, 10.0, values, jac[:, 0])
        assert got == pytest.approx(GRID[np.argmin(obj)], abs=1.5e-4)


@given(seed=st.integers(0, 2**32 - 1))
def test_quartic_scampl_step_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    prob = QUARTIC3
    mu, gamma, beta = rng.uniform(5, 50), rng.uniform(0.5, 20), rng.uniform(0.05, 1)
    x_i = rng.uniform(-4, 2, 1)
    ag = _agent(x_i, rng.normal(0, 20, 1), z=rng.normal(0, 20, 1), grad_cur=rng.normal(0, 20, 1),
                grad_prev=rng.normal(0, 20, 1), z_prev=rng.normal(0, 20, 1))
    coef = ag.grad_cur + (1 - beta) * (ag.z_prev - ag.grad_prev) + (ag.y - ag.z)
    values, jac = prob.constraint_eval(x_i)
    got = _solve_x(assemble_scampl_subproblem(ag, prob, mu, gamma, beta), 1)[0]
    # prox weight mu corresponds to eta = 1/mu in the shared grid objective
    obj = smpl_penalized_objective_1d(WIDE_GRID, coef[0], x_i[0], 1.0 / mu, gamma, values, jac[:, 0])
    assert abs(WIDE_GRID[np.argmin(obj)]) < 29.9  # interior of the grid
    assert got == pytest.approx(WIDE_GRID[np.argmin(obj)], abs=1.5e-4)


def test_scampl_coefficient_reductions():
    ag = _agent([0.5], [3.0], z=[2.0], grad_cur=[1.0], grad_prev=[4.0], z_prev=[6.0])
    assert scampl_linear_coefficient(ag, 1.0)[0] == pytest.approx(1.0 + 3.0 - 2.0)
    assert scampl_linear_coefficient(ag, 0.5)[0] == pytest.approx(1.0 + 0.5 * 2.0 + 1.0)
    first = _agent([0.5], [3.0], z=[2.0])
    assert scampl_linear_coefficient(first, 0.3)[0] == pytest.approx(3.0)


def test_scampl_with_unit_momentum_equals_smpl_instance():
    prob = QUARTIC3
    eta = 0.05
    ag = _agent([-1.0], [7.0], z=[2.0], grad_cur=[2.0], grad_prev=[9.0], z_prev=[1.0])
    a = assemble_smpl_subproblem(ag, prob, eta, 30.0)
    b = assemble_scampl_subproblem(ag, prob, 1.0 / eta, 30.0, beta=1.0)
    for name in ("P", "q", "A_in", "u", "A_eq", "b", "lb"):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), rtol=1e-14, atol=1e-14)


def test_curvature_matrix_replaces_prox_weight():
    prob = _ball_problem(2, radius=10.0)
    K = np.array([[4.0, 1.0], [1.0, 3.0]])
    ag = _agent([0.2, -0.1], [1.0, -2.0])
    x = _solve_x(assemble_scampl_subproblem(ag, prob, 1.0, 1.0, 1.0, curvature=K), 2)
    # interior: K (x - x_i) = -coef
    np.testing.assert_allclose(x, ag.x - np.linalg.solve(K, ag.y), atol=1e-9)


def test_l1_regularizer_epigraph():
    from dsmpl.problems import L1Regularizer

    d = 2
    base = _ball_problem(d, radius=100.0)
    from dataclasses import replace

    prob = replace(base, regularizer=L1Regularizer(np.array([1.0, 0.5])))
    ag = _agent([0.0, 0.0], [0.4, -2.0])
    x = _solve_x(assemble_smpl_subproblem(ag, prob, 1.0, 1.0), d)
    # soft threshold of -y with weights w
    np.testing.assert_allclose(x, [0.0, 1.5], atol=1e-8)


def test_subproblem_infeasible_equalities_raise():
    d = 2
    prob = ProblemSpec("eq", d, 1, 0, lambda i, x, k: np.zeros(d), lambda x: (np.zeros(0), np.zeros((0, d))),
                       gamma=1.0, sigma_bar_sq=0.0, A_eq=np.array([[1.0, 0.0]]), b_eq=np.array([1.0]))
    inst = assemble_smpl_subproblem(_agent([1.0, 0.0], [0.0, 0.0]), prob, 1.0, 1.0)
    inst.b = np.array([5.0])
    inst.A_eq = np.vstack([inst.A_eq, inst.A_eq])
    inst.b = np.array([5.0, 6.0])
    with pytest.raises(SolverFailure):
        solve_subproblem(inst, d)


# ---------------------------------------------------------------- updates


def test_momentum_examples():
    assert momentum_update(np.array([2.0]), np.array([1.0]), np.array([3.0]), 0.25)[0] == pytest.approx(0.25)
    np.testing.assert_array_equal(momentum_update(np.array([5.0]), np.array([1.0]), np.array([3.0]), 1.0), [1.0])
    g = np.array([4.0, -1.0])
    np.testing.assert_array_equal(momentum_update(g, np.array([0.3, 0.2]), g, 0.7), [0.3, 0.2])
    with pytest.raises(ValueError):
        momentum_update(g, g, g, 0.0)


def test_tracking_update_examples():
    W = PATH3.W
    y = np.array([[1.0], [2.0], [4.0]])
    z0 = np.array([[0.5], [0.0], [1.0]])
    np.testing.assert_allclose(tracking_update(y, z0, z0, W), W @ y)
    z1 = np.array([[1.5], [-1.0], [2.0]])
    # hand computation with W = [[2,1,0],[1,1,1],[0,1,2]]/3 and s = y + z1 - z0 = (2, 1, 5)
    np.testing.assert_allclose(tracking_update(y, z1, z0, PATH3), [[5 / 3], [8 / 3], [11 / 3]], atol=1e-15)


@given(seed=st.integers(0, 2**32 - 1), alpha=st.floats(0.01, 1.0))
def test_consensus_matches_kronecker_product(seed, alpha):
    rng = np.random.default_rng(seed)
    n, d = 3, 4
    Xc, X = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    big = np.kron(PATH3.W, np.eye(d))
    np.testing.assert_allclose(consensus_x(Xc, X, PATH3, SMPL).reshape(-1), big @ Xc.reshape(-1), atol=1e-14)
    ref = big @ (X + alpha * (Xc - X)).reshape(-1)
    np.testing.assert_allclose(consensus_x(Xc, X, PATH3, SCAMPL, alpha).reshape(-1), ref, atol=1e-14)
    np.testing.assert_allclose(consensus_x(Xc, X, PATH3, SCAMPL, 1.0), consensus_x(Xc, X, PATH3, SMPL), atol=1e-15)
    out = consensus_x(Xc, X, PATH3, SCAMPL, alpha)
    np.testing.assert_allclose(out.mean(0), (X + alpha * (Xc - X)).mean(0), atol=1e-12)


def test_uniform_mixing_agrees_in_one_step():
    n = 4
    J = MixingMatrix(np.full((n, n), 1.0 / n), 0.0, 1.0)
    Xc = np.random.default_rng(0).standard_normal((n, 2))
    out = consensus_x(Xc, Xc, J, SMPL)
    assert np.max(np.abs(out - out[0])) <= 1e-15


# ---------------------------------------------------------------- driver


def test_init_noiseless_single_sample():
    cfg = AlgorithmConfig(variant="SMPL", eta=0.01, beta=0.5, b0=1, T=5, compute_pi=False)
    st_ = init_run(QUIET3, PATH3, cfg, np.array([0.3]))
    for i, ag in enumerate(st_.agents):
        np.testing.assert_array_equal(ag.z, QUIET3.mean_grad(i, np.array([0.3])))
        np.testing.assert_array_equal(ag.y, ag.z)


def test_init_batch_average_and_tracker_average():
    cfg = AlgorithmConfig(variant="SMPL", eta=0.01, beta=0.5, b0=7, T=5, compute_pi=False)
    st_ = init_run(QUARTIC3, PATH3, cfg, np.array([0.3]))
    np.testing.assert_array_equal(st_.stack("y").mean(0), st_.stack("z").mean(0))
    assert len({float(a.z[0]) for a in st_.agents}) == 3


def test_bad_init():
    prob = make_trajectory_problem(desk_scale_params(), 3)
    cfg = AlgorithmConfig(variant="SMPL", eta=0.01, beta=0.5, T=2)
    x0 = desk_scale_params().straight_line()
    with pytest.raises(BadInit):
        init_run(prob, PATH3, cfg, x0 + 1.0)
    with pytest.raises(BadInit):
        init_run(prob, PATH3, cfg, x0[:-1])
    with pytest.raises(BadInit):
        init_run(QUARTIC3, metropolis_weights(path_graph(4)), cfg, np.zeros(1))


def test_nonfinite_iterate_aborts_with_trace():
    def blowup(i, x, key):
        return np.array([1e308 * 10 if x[0] > 0.5 else -1e3])

    prob = ProblemSpec("inf", 1, 1, 0, blowup, lambda x: (np.zeros(0), np.zeros((0, 1))), gamma=0.0,
                       sigma_bar_sq=0.0)
    cfg = AlgorithmConfig(variant="SMPL", eta=1.0, beta=1.0, gamma=0.0, T=10, compute_pi=False)
    with pytest.raises(NonFiniteIterate) as info:
        run_algorithm(prob, MixingMatrix(np.ones((1, 1)), 0.0, 1.0), cfg, np.zeros(1))
    assert len(info.value.trace) >= 1


def test_outputs_random_and_best_iterates():
    cfg = AlgorithmConfig(variant="SCAMPL", alpha=0.5, mu=100.0, beta=0.3, gamma=50.0, T=20, seed=4)
    res = run_algorithm(QUARTIC3, PATH3, cfg, np.zeros(1))
    assert 1 <= res.random_time <= 20
    assert res.random_iterate.shape == (3, 1)
    pi = res.trace.column("Pi")
    assert res.best_pi_time == int(np.argmin(pi)) + 1
    assert len(res.trace) == 20


@given(seed=st.integers(0, 2**20), variant=st.sampled_from([SMPL, SCAMPL]), n=st.integers(1, 5),
       beta=st.floats(0.05, 1.0))
def test_run_invariants(seed, variant, n, beta):
    prob = make_quartic_problem(n, noise_std=2.0, seed=seed % 5, gamma=30.0) if n != 3 else QUARTIC3
    mixing = metropolis_weights(path_graph(n)) if n > 1 else MixingMatrix(np.ones((1, 1)), 0.0, 1.0)
    cfg = AlgorithmConfig(variant=variant, eta=0.005, alpha=0.7, mu=200.0, beta=beta, gamma=30.0, T=15,
                          seed=seed, compute_pi=False, record_time=False)
    worst = {"track": 0.0, "avg": 0.0}

    def hook(s):
        worst["track"] = max(worst["track"], float(np.linalg.norm(s.y.mean(0) - s.z.mean(0))))
        worst["track"] = max(worst["track"], float(np.linalg.norm(s.y_next.mean(0) - s.z_next.mean(0))))
        if variant == SMPL:
            worst["avg"] = max(worst["avg"], float(np.linalg.norm(s.x_next.mean(0) - s.x_check.mean(0))))

    res = run_algorithm(prob, mixing, cfg, np.array([-1.0]), hooks=[hook])
    assert worst["track"] <= 1e-9
    assert worst["avg"] <= 1e-12
    again = run_algorithm(prob, mixing, cfg, np.array([-1.0]))
    np.testing.assert_array_equal(res.x_final, again.x_final)
    tr = res.trace
    for col in ("theta", "delta", "phi", "upsilon", "eps_track", "violation"):
        assert np.all(tr.column(col) >= 0)


def test_noiseless_momentum_is_exact():
    errs = [0.0]

    def hook(s):
        G = np.array([QUIET3.mean_grad(i, s.x_next[i]) for i in range(3)])
        errs[0] = max(errs[0], float(np.max(np.abs(s.z_next - G))))

    cfg = AlgorithmConfig(variant="SCAMPL", alpha=0.3, mu=300.0, beta=0.2, gamma=50.0, T=40, compute_pi=False)
    res = run_algorithm(QUIET3, PATH3, cfg, np.array([0.5]), hooks=[hook])
    assert errs[0] <= 1e-10
    assert np.all(res.trace.column("phi") == 0.0) and np.all(res.trace.column("upsilon") == 0.0)


def test_threads_do_not_change_results():
    params = desk_scale_params()
    prob = make_trajectory_problem(params, 3)
    base = dict(variant="SCAMPL", alpha=0.5, mu=20.0, beta=0.1, gamma=100.0, T=4, seed=3, record_time=False)
    one = run_algorithm(prob, PATH3, AlgorithmConfig(**base, threads=1), params.straight_line())
    many = run_algorithm(prob, PATH3, AlgorithmConfig(**base, threads=3), params.straight_line())
    np.testing.assert_array_equal(one.x_final, many.x_final)
    assert one.trace.records == many.trace.records


def test_resuming_a_state_continues_the_same_run():
    cfg = AlgorithmConfig(variant="SMPL", eta=0.002, beta=0.4, gamma=50.0, T=10, seed=1, compute_pi=False,
                          record_time=False)
    full = run_algorithm(QUARTIC3, PATH3, cfg, np.zeros(1))
    from dataclasses import replace

    state = init_run(QUARTIC3, PATH3, replace(cfg, T=4), np.zeros(1))
    run(state)
    state.cfg = cfg
    rest = run(state)
    np.testing.assert_array_equal(rest.x_final, full.x_final)
