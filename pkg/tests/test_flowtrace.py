import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from delayplate.basis import project
from delayplate.delaykernel import DelayParams, build_kernel, compute_tstar, eval_q_slots
from delayplate.flowtrace import (
    InsufficientCoverage,
    ModalTrajectory,
    SampledTrajectory,
    TracePoint,
    _wall_roots,
    eval_phi2,
    eval_phi2_t,
    eval_phi2_x,
    interior_points,
    phi2_t_terms,
    q_direct,
    reduction_residual,
    standing_mode,
)

U = 0.5


@pytest.fixture(scope="module")
def setup3(basis3):
    ts = compute_tstar(U, basis3.domain)
    _, V = np.linalg.eigh(basis3.K)
    return basis3, ts, standing_mode(basis3, V[:, 0], 3.0), V


def frozen(basis, shape):
    return ModalTrajectory(basis, lambda t: np.ones((len(t), 1)) * shape, lambda t: np.zeros((len(t), len(shape))))


class TestInputs:
    def test_point_validation(self):
        with pytest.raises(ValueError):
            TracePoint(0.5, 0.5, -0.1, 1.0)
        with pytest.raises(ValueError):
            TracePoint(0.5, 0.5, 0.0, -1.0)

    def test_coverage_required(self, setup3):
        basis, ts, _, V = setup3
        t = np.linspace(0, 1.0, 50)
        traj = SampledTrajectory(basis, t, np.outer(np.sin(t), V[:, 0]), np.outer(np.cos(t), V[:, 0]))
        with pytest.raises(InsufficientCoverage, match="coverage"):
            eval_phi2(TracePoint(0.5, 0.5, 0.0, 1.0), traj, U, ts)

    def test_before_arrival_is_zero(self, setup3):
        basis, ts, traj, _ = setup3
        assert eval_phi2(TracePoint(0.5, 0.5, 0.8, 0.5), traj, U, ts) == 0.0

    @settings(max_examples=60, deadline=None)
    @given(c=st.floats(-3, 3), a=st.floats(0.1, 3), b=st.floats(-3, 3))
    def test_wall_roots_solve_the_crossing_equation(self, c, a, b):
        for sig in _wall_roots(c, a, b):
            assert sig > 0
            assert abs(a * np.cosh(sig) + b * np.sinh(sig) - c) <= 1e-8 * max(1.0, abs(c), np.exp(sig))


class TestPotential:
    @pytest.mark.parametrize("z", [0.0, 0.2, 0.7])
    def test_time_derivative_matches_finite_difference(self, setup3, z):
        basis, ts, traj, _ = setup3
        t, h = 2 * ts, 1e-4
        phi = lambda tt: eval_phi2(TracePoint(0.37, 0.61, z, tt), traj, U, ts, 64, 48)
        fd = (phi(t + h) - phi(t - h)) / (2 * h)
        an = eval_phi2_t(TracePoint(0.37, 0.61, z, t), traj, U, ts, 64, 48)
        assert abs(fd - an) <= 1e-6 * max(abs(an), 1.0)

    def test_x_derivative_matches_finite_difference(self, setup3):
        basis, ts, traj, _ = setup3
        t, h = 2 * ts, 1e-5
        phi = lambda x: eval_phi2(TracePoint(x, 0.4, 0.0, t), traj, U, ts, 64, 48)
        fd = (phi(0.45 + h) - phi(0.45 - h)) / (2 * h)
        an = eval_phi2_x(TracePoint(0.45, 0.4, 0.0, t), traj, U, ts, 64, 48)
        assert abs(fd - an) <= 1e-5 * max(abs(an), 1.0)

    def test_stationary_plate_cancels(self, setup3):
        """u_t = 0 with U > 0: phi** is constant in time, so the four terms cancel."""
        basis, ts, _, V = setup3
        traj = frozen(basis, V[:, 0] + 0.3 * V[:, 2])
        terms = phi2_t_terms(TracePoint(0.4, 0.55, 0.0, 2 * ts), traj, U, ts)
        parts = [terms.far, terms.near, terms.transport, terms.directional]
        assert max(abs(p) for p in parts) > 1.0
        assert abs(terms.total) <= 1e-10 * max(abs(p) for p in parts)

    def test_linear_in_trajectory(self, setup3):
        basis, ts, traj, V = setup3
        other = standing_mode(basis, V[:, 1], 5.0, phase=0.3)
        p = TracePoint(0.3, 0.7, 0.1, 2 * ts)
        lhs = eval_phi2(p, traj + other.scaled(2.0), U, ts)
        rhs = eval_phi2(p, traj, U, ts) + 2 * eval_phi2(p, other, U, ts)
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))

    def test_sampled_trajectory_agrees_with_analytic(self, setup3):
        basis, ts, traj, _ = setup3
        t = np.linspace(0, 3 * ts, 3000)
        samp = SampledTrajectory(basis, t, traj.coeffs(t, 0), traj.coeffs(t, 1))
        p = TracePoint(0.5, 0.5, 0.0, 2 * ts)
        assert abs(eval_phi2(p, samp, U, ts) - eval_phi2(p, traj, U, ts)) <= 1e-6


class TestReduction:
    def test_residual_small_and_converging(self, setup3):
        basis, ts, traj, _ = setup3
        pts = interior_points(basis, 3)
        r1 = reduction_residual(pts, 2 * ts, traj, U, ts, 16, 6).residual.max()
        r2 = reduction_residual(pts, 2 * ts, traj, U, ts, 32, 12).residual.max()
        assert r2 <= 1e-3
        assert r2 <= 0.5 * r1

    def test_pointwise_q_projects_onto_the_modal_kernel(self, setup3):
        basis, ts, traj, _ = setup3
        n_s, t = 512, 2 * ts
        k = build_kernel(basis, DelayParams(U, ts, 32, n_s))
        slots = traj.coeffs(t - k.s_nodes, 0)
        q_modal = eval_q_slots(k, slots)
        qf = np.vectorize(lambda x, y: q_direct(x, y, t, traj, U, ts, 32, 12))
        q_proj = project(basis, qf)
        assert np.linalg.norm(q_modal - q_proj) <= 1e-3 * np.linalg.norm(q_proj)
