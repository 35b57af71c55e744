import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from delayplate.basis import basis_values, build_basis, evaluate, gauss_legendre
from delayplate.functionals import (
    DeterminingReport,
    EmptyFunctionalSet,
    FunctionalSet,
    UnderResolved,
    completeness_defect,
    defect_scaling_study,
    determining_test,
    empty_set,
    interpolation_error,
    interpolation_inequality_constant,
    make_averages,
    make_modes,
    make_nodes,
    modal_pencil,
)
from delayplate.longtime import DifferenceRecord, DifferenceResult, difference_experiment
from delayplate.scenario import setup


@pytest.fixture(scope="module")
def basis6(unit_square):
    return build_basis(unit_square, 6, 6)


class TestBuilders:
    def test_nodes_are_point_values(self, basis4, rng):
        fs = make_nodes(basis4, 0.25)
        a = rng.standard_normal(basis4.N)
        pts = np.array(fs.meta["points"])
        assert len(pts) == 9
        np.testing.assert_allclose(fs(a), evaluate(basis4, a, pts), atol=1e-13)

    def test_empty_node_set(self, basis4):
        with pytest.raises(EmptyFunctionalSet):
            make_nodes(basis4, 2.0)
        with pytest.raises(ValueError):
            make_nodes(basis4, 0.0)

    def test_averages_match_brute_force(self, basis4, rng):
        h = 0.5
        fs = make_averages(basis4, h)
        a = rng.standard_normal(basis4.N)
        g, w = gauss_legendre(40, 0.0, h)
        X, Y = np.meshgrid(g, g, indexing="ij")
        W = np.outer(w, w).ravel() / h ** 2
        vals = []
        for i in range(2):
            for j in range(2):
                pts = np.column_stack([(X + i * h).ravel(), (Y + j * h).ravel()])
                vals.append(W @ evaluate(basis4, a, pts))
        np.testing.assert_allclose(fs(a), vals, rtol=1e-10, atol=1e-12)

    def test_kernel_must_integrate_to_one(self, basis4):
        with pytest.raises(ValueError, match="kernel integral"):
            make_averages(basis4, 0.5, kernel=lambda x, y: 2.0 + 0 * x)

    def test_nonconstant_kernel(self, basis4):
        bump = lambda x, y: 36 * x * (1 - x) * y * (1 - y)
        fs = make_averages(basis4, 0.5, bump, kernel_name="bump")
        assert fs.m == 4 and fs.rank == 4

    def test_modes_range(self, basis4):
        with pytest.raises(ValueError):
            make_modes(basis4, basis4.N + 1)
        assert make_modes(basis4, 0).m == 0

    def test_serialization_roundtrip(self, basis4):
        fs = make_nodes(basis4, 0.25)
        back = FunctionalSet.from_text(fs.to_text())
        assert back.kind == fs.kind and back.meta == fs.meta
        np.testing.assert_array_equal(back.L, fs.L)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            FunctionalSet("custom", np.array([[1.0, np.nan]]))


class TestDefect:
    def test_empty_set_is_inverse_sqrt_of_smallest_eigenvalue(self, basis4):
        lam, _ = modal_pencil(basis4)
        assert completeness_defect(empty_set(basis4), basis4).epsilon == pytest.approx(lam[0] ** -0.5, rel=1e-12)

    @pytest.mark.parametrize("n", [1, 3, 7, 15])
    def test_modes_oracle(self, basis4, n):
        lam, _ = modal_pencil(basis4)
        fs = make_modes(basis4, n)
        res = completeness_defect(fs, basis4)
        assert res.epsilon == pytest.approx(lam[n] ** -0.5, rel=1e-12)
        assert res.check(fs, basis4)

    def test_full_rank_gives_zero(self, basis4):
        res = completeness_defect(make_modes(basis4, basis4.N), basis4)
        assert res.epsilon == 0.0 and res.null_dim == 0

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10 ** 6), k=st.integers(1, 4))
    def test_augmentation_never_increases(self, basis4, seed, k):
        rng = np.random.default_rng(seed)
        fs = make_nodes(basis4, 0.5)
        e0 = completeness_defect(fs, basis4).epsilon
        e1 = completeness_defect(fs.augment(rng.standard_normal((k, basis4.N))), basis4).epsilon
        assert e1 <= e0 * (1 + 1e-10)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10 ** 6))
    def test_interpolation_inequality_holds(self, basis6, seed):
        rng = np.random.default_rng(seed)
        fs = make_nodes(basis6, 0.25)
        eps = completeness_defect(fs, basis6).epsilon
        C = interpolation_inequality_constant(fs, basis6)
        v = rng.standard_normal(basis6.N) * rng.uniform(0, 1) ** 3
        lhs = np.sqrt(v @ basis6.M @ v)
        rhs = eps * np.sqrt(v @ basis6.K @ v) + C * np.abs(fs(v)).max()
        assert lhs <= rhs * (1 + 1e-10)

    @pytest.mark.parametrize("kind", ["nodes", "averages", "modes"])
    def test_defect_below_interpolation_error(self, basis6, kind):
        fs = {"nodes": make_nodes(basis6, 0.25), "averages": make_averages(basis6, 0.5),
              "modes": make_modes(basis6, 9)}[kind]
        eps = completeness_defect(fs, basis6).epsilon
        assert eps <= interpolation_error(fs, basis6) * (1 + 1e-10)

    def test_weak_norm_h(self, basis4):
        lam, _ = modal_pencil(basis4)
        eps = completeness_defect(make_modes(basis4, 3), basis4, "h", 0.5).epsilon
        assert eps == pytest.approx(lam[3] ** -0.125, rel=1e-10)

    def test_saturation_guard_flags_coarse_basis(self, unit_square):
        with pytest.raises(UnderResolved, match="under-resolved") as exc:
            defect_scaling_study("nodes", [0.125], unit_square, build_basis, resolution=lambda k, h: (4, 4))
        assert not exc.value.args[1].saturated

    def test_modes_study_slope(self, basis6):
        study = defect_scaling_study("modes", [1, 4, 9, 16, 25], None, None, basis=basis6)
        assert study.exact_error <= 1e-12
        eps = [r.epsilon for r in study.rows]
        assert all(b < a for a, b in zip(eps, eps[1:]))
        assert study.slope < 0


def fake_result(t, H, f_rows):
    recs = [DifferenceRecord(float(a), 0.5 * float(h) ** 2, 0.0, 0.0) for a, h in zip(t, H)]
    z = np.asarray(f_rows)
    zeros = np.zeros_like(z)
    return DifferenceResult(recs, None, np.arange(len(t)), z, zeros, zeros, zeros, 1.0)


class TestDetermining:
    fs = FunctionalSet("custom", np.array([[1.0, 0.0]]))
    t = np.linspace(0, 10, 11)

    def test_verdicts(self):
        decay = np.exp(-2 * self.t)
        z = np.column_stack([decay, np.ones_like(decay)])
        rep = determining_test(self.fs, None, None, None, result=fake_result(self.t, decay, z))
        assert rep.verdict == "consistent with determining"
        rep = determining_test(self.fs, None, None, None, result=fake_result(self.t, np.ones(11), z))
        assert rep.verdict == "epsilon too large"
        assert rep.t_functional < np.inf and rep.t_state == np.inf
        rep = determining_test(self.fs, None, None, None, result=fake_result(self.t, np.ones(11), np.ones((11, 2))))
        assert rep.verdict == "functionals did not converge"

    def test_identical_pair(self, small_cfg, cache):
        sc = setup(small_cfg, cache)
        x = sc.initial()[0]
        res = difference_experiment(sc, (x.a, x.adot), (x.a, x.adot), 64, 8, fit=False)
        rep = determining_test(make_modes(sc.basis, 3), sc, None, None, result=res)
        assert rep.verdict == "identical trajectories"
        assert isinstance(rep, DeterminingReport) and "verdict" in rep.text()
