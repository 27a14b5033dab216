import numpy as np
import pytest
from scipy import sparse

from densityctl.parser import parse_poly
from densityctl.sdp import SolverSettings, certify, solve
from densityctl.sos import PSDBlock, SDPProblem, SOSProgram, extract, monomial_basis


def gram_with_corner_fixed():
    # 2x2 PSD matrix with G11 = 1
    blk = PSDBlock(2, np.zeros(3), sparse.identity(3, format="csr"), "G")
    return SDPProblem(3, [blk], sparse.csr_matrix([[1.0, 0.0, 0.0]]), np.array([1.0]), ["G11"])


def scalar_pinned_negative():
    blk = PSDBlock(1, np.zeros(1), sparse.csr_matrix([[1.0]]), "x")
    return SDPProblem(1, [blk], sparse.csr_matrix([[1.0]]), np.array([-1.0]), ["x"])


def lyapunov_program():
    names = ["x1", "x2"]
    prog = SOSProgram(2)
    V = prog.new_poly("V", [m for m in monomial_basis(2, 2) if sum(m) == 2])
    f = [parse_poly("-x1 + x2", names), parse_poly("-x1 - 2*x2", names)]
    prog.add_sos(V - parse_poly("1e-4*(x1^2 + x2^2)", names), name="pos")
    prog.add_sos(-(V.partial(0) * f[0] + V.partial(1) * f[1]) - parse_poly("1e-4*(x1^2 + x2^2)", names),
                 name="dec")
    return prog, V


@pytest.mark.parametrize("backend", ["ipm", "clarabel"])
def test_fixed_corner_is_feasible(backend):
    prob = gram_with_corner_fixed()
    sol = solve(prob, backend=backend)
    assert sol.feasible
    G = prob.blocks[0].matrix(sol.y)
    assert G[0, 0] == pytest.approx(1.0, abs=1e-8)
    assert certify(prob, sol).ok


def test_rank_one_point_is_admissible():
    prob = gram_with_corner_fixed()
    from densityctl.sos import SDPSolution
    sol = SDPSolution("feasible", np.array([1.0, 0.0, 0.0]), 0.0, [], 0.0)
    assert certify(prob, sol).ok


@pytest.mark.parametrize("backend", ["ipm", "clarabel"])
def test_negative_pinned_scalar_is_infeasible(backend):
    assert solve(scalar_pinned_negative(), backend=backend).status == "infeasible"


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        solve(gram_with_corner_fixed(), backend="nope")


def test_perturbed_solution_fails_certify():
    prog, _ = lyapunov_program()
    prob = prog.compile()
    sol = solve(prob)
    assert certify(prob, sol).ok
    bad = sol.y.copy()
    bad[0] += 1e-3
    from densityctl.sos import SDPSolution
    rep = certify(prob, SDPSolution("feasible", bad, 0.0, [], 0.0))
    assert not rep.ok
    assert rep.worst_eq_residual > rep.tol
    assert "FAIL" in rep.summary()


def test_feasible_passes_certify_at_ten_times_tolerance():
    prog, _ = lyapunov_program()
    prob = prog.compile()
    sol = solve(prob)
    assert sol.feasible
    assert certify(prob, sol, tol=10 * SolverSettings().feas_tol).ok


@pytest.mark.parametrize("backend", ["ipm", "clarabel"])
def test_solver_is_deterministic(backend):
    prog, _ = lyapunov_program()
    prob = prog.compile()
    a, b = solve(prob, backend=backend), solve(prob, backend=backend)
    assert a.status == b.status
    assert np.allclose(a.y, b.y, atol=1e-10, rtol=0)
    assert abs(a.max_eq_residual - b.max_eq_residual) < 1e-10


def test_backends_agree_on_verdicts():
    # two independent solvers must both find a valid certificate for the same program
    prog, V = lyapunov_program()
    prob = prog.compile()
    sols = {k: solve(prob, backend=k) for k in ("ipm", "clarabel")}
    for k, sol in sols.items():
        assert sol.feasible, k
        assert certify(prob, sol).ok, k
        Vk = extract(V, sol)
        pts = np.random.default_rng(0).uniform(-2, 2, (200, 2))
        assert np.all(Vk.eval(pts) > 0)
    assert solve(scalar_pinned_negative(), backend="ipm").status == \
        solve(scalar_pinned_negative(), backend="clarabel").status


def test_second_example_verification_blocks(ex2):
    sol = ex2.verify("cor6", 4).certificate.solution
    assert min(sol.block_min_eigs) >= -1e-7
