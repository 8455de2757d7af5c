import json

import numpy as np
import pytest
import scipy.linalg as sla

from homdefect import coeffs
from homdefect.assembly import Problem, gram
from homdefect.cell import homogenize
from homdefect.coeffs import make_nonlinearity
from homdefect.corrector import build_approximate_solution
from homdefect.mesh import build_domain_mesh, build_unit_cell_grid
from homdefect.solver import (NonContractiveError, SingularJacobianError, SolverConfig, estimate_rho,
                              frozen_newton_solve, local_uniqueness_probe, newton, newton_homogenized, sup_norm)
from homdefect.study import bump_target, manufactured_load

BOX = [(-0.5, 0.5), (-0.5, 0.5)]


@pytest.fixture(scope="module")
def laminate():
    a = coeffs.laminate(2)
    corr, ahat = homogenize(build_unit_cell_grid(2, 32), a)
    return a, corr, ahat


def _setup(laminate, nl, eps=0.125, m=128):
    a, corr, ahat = laminate
    mesh = build_domain_mesh(2, BOX, m)
    u0 = newton_homogenized(mesh, ahat, nl, estimate=False).values
    approx = build_approximate_solution("plain-2D", u0, corr, eps, mesh)
    return mesh, u0, approx, Problem(mesh, a, eps, None, nl)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(tol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(max_iter=0)


def test_sup_norm_sums_components():
    u = np.array([[1.0, -3.0], [-2.0, 0.5]])
    assert sup_norm(u) == 5.0
    assert sup_norm(np.array([-4.0, 1.0])) == 4.0


class TestNewtonHomogenized:
    def test_zero_nonlinearity(self, laminate):
        mesh = build_domain_mesh(2, BOX, 16)
        res = newton_homogenized(mesh, laminate[2], make_nonlinearity("zero"), estimate=False)
        assert np.all(res.values == 0.0) and res.iterations == 0

    def test_linear_one_step(self, laminate):
        mesh = build_domain_mesh(2, BOX, 32)
        res = newton_homogenized(mesh, laminate[2], make_nonlinearity("linear", kappa=1.0, source=5.0))
        assert res.iterations == 1
        assert res.rho_hat > 0

    def test_manufactured_cubic_target(self, laminate):
        mesh = build_domain_mesh(2, BOX, 64)
        nl = make_nonlinearity("cubic", kappa=1.0)
        target = bump_target(BOX, amplitude=2.0)
        load = manufactured_load(mesh, laminate[2], nl, target)
        res = newton_homogenized(mesh, laminate[2], nl, load=load, estimate=False)
        assert np.abs(res.values - target(mesh.points)).max() <= 1e-8

    def test_coarse_start_matches_cold_start(self, laminate):
        mesh = build_domain_mesh(2, BOX, 256)
        nl = make_nonlinearity("cubic", source=10.0)
        warm = newton_homogenized(mesh, laminate[2], nl, estimate=False)
        cold = newton_homogenized(mesh, laminate[2], nl, initial=np.zeros((mesh.n_nodes, 1)), estimate=False)
        assert np.abs(warm.values - cold.values).max() <= 1e-8
        assert warm.iterations <= cold.iterations


class TestEstimateRho:
    def _dense_rho(self, J, G):
        Jd, Gd = J.toarray(), G.toarray()
        lam = sla.eigh(Jd.T @ np.linalg.solve(Gd, Jd), Gd, eigvals_only=True)
        return float(np.sqrt(lam.min()))

    @pytest.mark.parametrize("nl", [None, make_nonlinearity("cubic", source=4.0)], ids=["laplace", "cubic"])
    def test_matches_dense_oracle(self, laminate, nl):
        mesh = build_domain_mesh(2, BOX, 16)
        a = coeffs.trig(2)
        prob = Problem(mesh, a, 1.0, None, nl)
        u = np.zeros((mesh.n_nodes, 1)) if nl is None else newton(prob).values
        J = prob.jacobian(u)
        exact = self._dense_rho(J, gram(mesh).G)
        assert estimate_rho(J, mesh, tol=1e-10) == pytest.approx(exact, rel=1e-6)
        # the default loose tolerance errs upward only slightly
        loose = estimate_rho(J, mesh)
        assert exact * (1 - 1e-10) <= loose <= 1.05 * exact

    def test_singular_jacobian(self):
        mesh = build_domain_mesh(2, BOX, 8)
        prob = Problem(mesh, coeffs.constant(1.0, d=2), np.inf, None, None)
        J = 0.0 * prob.jacobian(np.zeros((mesh.n_nodes, 1)))
        with pytest.raises(SingularJacobianError):
            estimate_rho(J, mesh)


class TestFrozenNewton:
    def test_linear_one_iteration(self, laminate):
        nl = make_nonlinearity("linear", kappa=1.0, source=5.0)
        mesh, u0, approx, prob = _setup(laminate, nl)
        rep = frozen_newton_solve(prob, approx.values)
        assert rep.converged and rep.iterations == 1
        assert rep.ratios == []

    def test_cubic_contracts_and_matches_full_newton(self, laminate):
        nl = make_nonlinearity("cubic", source=10.0)
        mesh, u0, approx, prob = _setup(laminate, nl)
        rep = frozen_newton_solve(prob, approx.values)
        full = newton(prob, approx.values)
        assert rep.converged and rep.q_max <= 0.5
        assert np.abs(rep.values - full.values).max() <= 1e-8
        # the returned field reproduces the reported residual
        again = gram(mesh).dual(prob.residual(rep.values))
        assert again == pytest.approx(rep.residuals[-1], abs=1e-12)
        assert rep.residuals[-1] <= SolverConfig().tol
        assert rep.bound_ratio is not None and rep.bound_ratio <= 1.1

    def test_report_json(self, laminate, tmp_path):
        nl = make_nonlinearity("cubic", source=10.0)
        _, _, approx, prob = _setup(laminate, nl)
        rep = frozen_newton_solve(prob, approx.values)
        data = json.loads(rep.to_json(tmp_path / "r.json"))
        for key in ("iterations", "residuals", "ratios", "rho_hat", "q_max", "bound_ratio"):
            assert key in data
        assert "values" not in data

    def test_noncontractive_detected(self):
        a = coeffs.laminate(2, amplitude=1.9)
        nl = make_nonlinearity("sine", lam=100.0, kappa=1.0, source=400.0)
        corr, ahat = homogenize(build_unit_cell_grid(2, 64), a)
        mesh = build_domain_mesh(2, BOX, 64)
        u0 = newton_homogenized(mesh, ahat, nl, estimate=False).values
        approx = build_approximate_solution("plain-2D", u0, corr, 0.2, mesh)
        prob = Problem(mesh, a, 0.2, None, nl)
        with pytest.raises(NonContractiveError) as info:
            frozen_newton_solve(prob, approx.values, SolverConfig(max_iter=200))
        rep = info.value.report
        assert rep is not None and not rep.converged
        assert rep.ratios[-1] >= 1.0


class TestProbe:
    def test_zero_radius(self, laminate):
        nl = make_nonlinearity("cubic", source=10.0)
        _, _, approx, prob = _setup(laminate, nl)
        ref = frozen_newton_solve(prob, approx.values, estimate=False).values
        rep = local_uniqueness_probe(prob, approx.values, ref, 0.0, trials=3)
        assert rep.spread == 0.0 and rep.diverged == 0

    def test_linear_any_radius(self, laminate):
        nl = make_nonlinearity("linear", kappa=1.0, source=5.0)
        _, _, approx, prob = _setup(laminate, nl)
        ref = frozen_newton_solve(prob, approx.values, estimate=False).values
        rep = local_uniqueness_probe(prob, approx.values, ref, 5.0, trials=4, seed=3)
        assert rep.spread <= 1e-8 and rep.diverged == 0

    def test_cubic_unique_and_seeded(self, laminate):
        nl = make_nonlinearity("cubic", source=10.0)
        _, _, approx, prob = _setup(laminate, nl)
        ref = frozen_newton_solve(prob, approx.values, estimate=False).values
        r1 = local_uniqueness_probe(prob, approx.values, ref, 0.1, trials=4, seed=11)
        r2 = local_uniqueness_probe(prob, approx.values, ref, 0.1, trials=4, seed=11)
        assert r1.spread <= 1e-6
        assert r1.to_dict() == r2.to_dict()
