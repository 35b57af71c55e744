import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from delayplate.basis import PlateDomain, basis_values, build_basis
from delayplate.delaykernel import (
    DegenerateDelay,
    DelayHistory,
    DelayParams,
    HistoryUnderfilled,
    build_kernel,
    cached_kernel,
    compute_tstar,
    eval_q,
    eval_q_slots,
    exit_time,
    kernel_slabs,
    load_kernel,
    new_history,
    save_kernel,
)

# brute-force ray bisection from the corners with 400000 directions
TSTAR_U03 = 1.848375633561552
TSTAR_U05 = 2.430475891378983


def bisect_tstar(U, domain, n_theta=4000, n_pts=21, iters=60):
    """Exit time by bisection on membership along each characteristic."""
    x = np.linspace(0, domain.Lx, n_pts)
    y = np.linspace(0, domain.Ly, n_pts)
    th = np.linspace(0, 2 * np.pi, n_theta, endpoint=False)
    X, Y, T = (a.ravel() for a in np.meshgrid(x, y, th, indexing="ij"))
    vx, vy = U + np.sin(T), np.cos(T)
    lo = np.zeros_like(X)
    hi = np.full_like(X, 50.0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        px, py = X - mid * vx, Y - mid * vy
        inside = (px >= 0) & (px <= domain.Lx) & (py >= 0) & (py <= domain.Ly)
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return float(hi.max())


@pytest.fixture(scope="module")
def kernel3(basis3):
    return build_kernel(basis3, DelayParams(0.5, compute_tstar(0.5, basis3.domain), 32, 48))


class TestHorizon:
    @pytest.mark.parametrize("U, ref", [(0.0, np.sqrt(2)), (2.0, 1.0)])
    def test_closed_forms(self, unit_square, U, ref):
        assert abs(compute_tstar(U, unit_square) - ref) <= 1e-8 * ref

    @pytest.mark.parametrize("U, ref", [(0.3, TSTAR_U03), (0.5, TSTAR_U05)])
    def test_frozen_oracle(self, unit_square, U, ref):
        assert abs(compute_tstar(U, unit_square) / ref - 1) <= 1e-3

    def test_bisection_oracle_reproduces_frozen_values(self, unit_square):
        assert abs(bisect_tstar(0.5, unit_square) / TSTAR_U05 - 1) <= 1e-3

    def test_degenerate_speed(self, unit_square):
        with pytest.raises(DegenerateDelay, match="degenerate"):
            compute_tstar(1.0 + 1e-7, unit_square)

    def test_rectangle_scales(self):
        a = compute_tstar(0.5, PlateDomain(1.0, 1.0))
        b = compute_tstar(0.5, PlateDomain(2.0, 2.0))
        assert abs(b - 2 * a) <= 1e-9 * a

    @settings(max_examples=50, deadline=None)
    @given(x=st.floats(0.01, 0.99), y=st.floats(0.01, 0.99), th=st.floats(0, 2 * np.pi),
           U=st.sampled_from([0.0, 0.3, 0.5, 2.0]))
    def test_exit_time_lands_on_boundary_and_is_bounded(self, unit_square, x, y, th, U):
        s = float(exit_time(x, y, th, U, unit_square))
        px, py = x - s * (U + np.sin(th)), y - s * np.cos(th)
        on_edge = min(abs(px), abs(px - 1), abs(py), abs(py - 1))
        assert on_edge < 1e-9
        assert s <= compute_tstar(U, unit_square)


class TestKernel:
    def test_angular_average_at_zero_delay(self, kernel3, basis3):
        assert np.max(np.abs(kernel3.C[0] + 0.5 * basis3.G)) <= 1e-6

    def test_vanishes_at_horizon(self, kernel3):
        assert np.max(np.abs(kernel3.C[-1])) <= 1e-6 * np.max(np.abs(kernel3.C))

    @pytest.mark.parametrize("j", [0, 1])
    def test_entry_matches_direct_overlap_quadrature(self, basis3, j):
        s = 0.37
        n_theta = 16
        val = kernel_slabs(basis3, 0.0, np.array([s]), n_theta)[0, j, j]
        t, w = np.polynomial.legendre.leggauss(60)
        ref = 0.0
        for th in 2 * np.pi * np.arange(n_theta) / n_theta:
            dx, dy = s * np.sin(th), s * np.cos(th)
            x0, x1 = max(0, dx), min(1, 1 + dx)
            y0, y1 = max(0, dy), min(1, 1 + dy)
            if x1 <= x0 or y1 <= y0:
                continue
            qx, qy = x0 + (x1 - x0) * (t + 1) / 2, y0 + (y1 - y0) * (t + 1) / 2
            W = np.outer(w, w).ravel() * (x1 - x0) * (y1 - y0) / 4
            X, Y = (a.ravel() for a in np.meshgrid(qx, qy, indexing="ij"))
            sh = np.c_[X - dx, Y - dy]
            m2 = (np.sin(th) ** 2 * basis_values(basis3, sh, (2, 0))[:, j]
                  + 2 * np.sin(th) * np.cos(th) * basis_values(basis3, sh, (1, 1))[:, j]
                  + np.cos(th) ** 2 * basis_values(basis3, sh, (0, 2))[:, j])
            ref += np.sum(W * m2 * basis_values(basis3, np.c_[X, Y])[:, j]) / n_theta
        assert abs(val - ref) <= 1e-6 * max(1.0, abs(ref))

    def test_coarse_delay_grid_warns(self, basis3):
        with pytest.warns(UserWarning, match="insufficient quadrature"):
            build_kernel(basis3, DelayParams(0.0, np.sqrt(2) * 1.0000001, 8, 4))

    def test_angular_refinement_converges(self, basis3, rng):
        ts = compute_tstar(0.5, basis3.domain)
        k1 = build_kernel(basis3, DelayParams(0.5, ts, 64, 32))
        k2 = build_kernel(basis3, DelayParams(0.5, ts, 128, 32))
        h = rng.standard_normal((33, 9))
        q1, q2 = eval_q_slots(k1, h), eval_q_slots(k2, h)
        assert np.linalg.norm(q1 - q2) <= 1e-4 * np.linalg.norm(q2)

    @settings(max_examples=20, deadline=None)
    @given(a=st.floats(-10, 10), b=st.floats(-10, 10), seed=st.integers(0, 2**32 - 1))
    def test_eval_q_is_linear(self, kernel3, a, b, seed):
        r = np.random.default_rng(seed)
        h1, h2 = r.standard_normal((2, kernel3.n_slots, 9))
        lhs = eval_q_slots(kernel3, a * h1 + b * h2)
        rhs = a * eval_q_slots(kernel3, h1) + b * eval_q_slots(kernel3, h2)
        assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(lhs)))

    def test_q_bound_constant_stable_under_angular_doubling(self, basis3, rng):
        """||q||^2 <= c t* int ||Lap u||^2: the calibrated c barely moves."""
        ts = compute_tstar(0.5, basis3.domain)
        lam, V = np.linalg.eigh(basis3.K)
        cs = []
        for nt in (32, 64):
            k = build_kernel(basis3, DelayParams(0.5, ts, nt, 32))
            worst = 0.0
            for _ in range(20):
                h = rng.standard_normal((33, 9))
                q = eval_q_slots(k, h)
                lapnorm = np.einsum("mi,ij,mj->m", h, basis3.K, h)
                worst = max(worst, (q @ q) / (ts * np.sum(k.s_w * lapnorm)))
            cs.append(worst)
        assert abs(cs[1] / cs[0] - 1) <= 0.1

    def test_cache_roundtrip(self, basis3, kernel3, tmp_path):
        save_kernel(kernel3, tmp_path / "k.bin")
        k = load_kernel(tmp_path / "k.bin", basis3, kernel3.params)
        assert k.C.tobytes() == kernel3.C.tobytes()
        with pytest.raises(ValueError, match="mismatch"):
            load_kernel(tmp_path / "k.bin", basis3, DelayParams(0.5, kernel3.params.t_star, 16, 48))

    def test_cached_kernel_is_reused(self, basis3, tmp_path):
        p = DelayParams(0.5, compute_tstar(0.5, basis3.domain), 16, 32)
        a = cached_kernel(basis3, p, tmp_path)
        b = cached_kernel(basis3, p, tmp_path)
        assert a.C.tobytes() == b.C.tobytes()
        assert len(list(tmp_path.glob("kernel-*.bin"))) == 1

    def test_params_validated(self):
        with pytest.raises(ValueError):
            DelayParams(1.0, 1.0, 32, 16)
        with pytest.raises(ValueError):
            DelayParams(0.5, 1.0, 32, 1)


class TestHistory:
    def test_ring_order(self):
        h = DelayHistory(3, 2, 0.1)
        for i in range(5):
            h.push(np.full(2, float(i)))
        assert np.array_equal(h.ordered()[:, 0], [4.0, 3.0, 2.0])
        assert h.full and abs(h.t_head - 0.5) < 1e-15

    def test_underfilled_history_rejected(self, kernel3):
        h = new_history(kernel3, 9)
        h.push(np.zeros(9))
        with pytest.raises(HistoryUnderfilled):
            eval_q(kernel3, h)

    def test_eval_q_matches_slots(self, kernel3, rng):
        slots = rng.standard_normal((kernel3.n_slots, 9))
        h = new_history(kernel3, 9).fill(slots)
        assert np.array_equal(eval_q(kernel3, h), eval_q_slots(kernel3, slots))

    def test_grid_mismatch_rejected(self, kernel3):
        h = DelayHistory(kernel3.n_slots, 9, kernel3.dt * 2).fill(np.zeros((kernel3.n_slots, 9)))
        with pytest.raises(ValueError):
            eval_q(kernel3, h)

    def test_copy_is_independent(self):
        h = DelayHistory(2, 1, 1.0).push(np.ones(1))
        c = h.copy()
        c.push(np.zeros(1))
        assert h.steps == 1 and c.steps == 2
