"""Determining-functional families and completeness defects.

A FunctionalSet is the matrix L[i, k] = l_i(e_k).  The completeness defect

    eps = sup{ |w|_weak : l_i(w) = 0 for all i, |Lap w| <= 1 }

is computed in the Galerkin truncation as the largest generalized eigenvalue
of (Z^T W Z, Z^T K Z) on an orthonormal null-space basis Z of L.  Being a
sup over a subspace, the truncated value can only grow with the basis; the
scaling study therefore re-solves at doubled resolution and requires the
value to be saturated.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .basis import BasisSet, basis_values, gauss_legendre


class EmptyFunctionalSet(ValueError):
    pass


class UnderResolved(RuntimeError):
    pass


@dataclass
class FunctionalSet:
    kind: str  # nodes | modes | averages | custom
    L: np.ndarray  # (m, N)
    meta: dict = field(default_factory=dict)
    rank: int = -1

    def __post_init__(self):
        L = np.asarray(self.L, dtype=float)
        self.L = L[None, :] if L.ndim == 1 else L
        if not np.all(np.isfinite(self.L)):
            raise ValueError("functional matrix has non-finite entries")
        if self.rank < 0:
            self.rank = int(np.linalg.matrix_rank(self.L)) if self.L.shape[0] else 0

    @property
    def m(self) -> int:
        return self.L.shape[0]

    @property
    def N(self) -> int:
        return self.L.shape[1]

    def __call__(self, coeffs) -> np.ndarray:
        return self.L @ np.asarray(coeffs)

    def augment(self, rows, kind: str = "custom") -> "FunctionalSet":
        rows = np.atleast_2d(rows)
        return FunctionalSet(kind, np.vstack([self.L, rows]), dict(self.meta, augmented=self.meta.get("augmented", 0) + len(rows)))

    def to_text(self) -> str:
        lines = [f"kind {self.kind}", "meta " + json.dumps(self.meta, sort_keys=True),
                 f"shape {self.m} {self.N}"]
        lines += [" ".join("%.17g" % x for x in row) for row in self.L]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FunctionalSet":
        lines = text.splitlines()
        kind = lines[0].split(" ", 1)[1]
        meta = json.loads(lines[1].split(" ", 1)[1])
        m, N = map(int, lines[2].split()[1:])
        L = np.array([[float(x) for x in ln.split()] for ln in lines[3:3 + m]]).reshape(m, N)
        return cls(kind, L, meta)


def empty_set(basis: BasisSet) -> FunctionalSet:
    return FunctionalSet("custom", np.zeros((0, basis.N)), {}, 0)


# -- builders ---------------------------------------------------------------

def mesh_counts(basis: BasisSet, h: float) -> tuple[int, int]:
    """Cells per direction of the uniform mesh with side <= h."""
    d = basis.domain
    return max(1, math.ceil(d.Lx / h - 1e-12)), max(1, math.ceil(d.Ly / h - 1e-12))


def node_points(basis: BasisSet, h: float) -> np.ndarray:
    """Interior vertices of the uniform right-triangulation, lexicographic in (x, y)."""
    d = basis.domain
    nx, ny = mesh_counts(basis, h)
    xs = d.Lx * np.arange(1, nx) / nx
    ys = d.Ly * np.arange(1, ny) / ny
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()])


def make_nodes(basis: BasisSet, h: float) -> FunctionalSet:
    """Point evaluations at the interior vertices (boundary vertices carry no
    information under clamping)."""
    if not h > 0:
        raise ValueError(f"h must be > 0, got {h}")
    pts = node_points(basis, h)
    if len(pts) == 0:
        raise EmptyFunctionalSet(f"empty set: no interior vertex for h={h}")
    nx, ny = mesh_counts(basis, h)
    return FunctionalSet("nodes", basis_values(basis, pts), {"h": h, "cells": [nx, ny], "points": pts.tolist()})


def modal_pencil(basis: BasisSet) -> tuple[np.ndarray, np.ndarray]:
    """Ascending eigenpairs of K v = lam M v with M-orthonormal vectors."""
    try:
        lam, V = sla.eigh(basis.K, basis.M)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"(K, M) eigensolve failed: cond(M)={np.linalg.cond(basis.M):.3e}, "
            f"cond(K)={np.linalg.cond(basis.K):.3e}: {exc}") from None
    return lam, V


def make_modes(basis: BasisSet, n: int) -> FunctionalSet:
    """M-inner products with the first n (K, M)-eigenvectors."""
    if not 0 <= n <= basis.N:
        raise ValueError(f"n must be in [0, {basis.N}], got {n}")
    lam, V = modal_pencil(basis)
    L = (basis.M @ V[:, :n]).T
    return FunctionalSet("modes", L, {"n": n, "eigenvalues": lam[:n].tolist()})


def constant_kernel(xi, eta):
    return np.ones(np.broadcast(xi, eta).shape)


def make_averages(basis: BasisSet, h: float, kernel=constant_kernel, nq: int = 12,
                  kernel_name: str = "constant") -> FunctionalSet:
    """l_j(w) = h^-2 int w(x) lam(x/h - j) dx for the lattice j h in [0, Lx) x [0, Ly).

    ``kernel(xi, eta)`` is supported in the unit square and must integrate
    to 1.  Substituting x = h (j + xi) gives l_j(w) = int_[0,1]^2 w(h(j + xi)) lam(xi),
    integrated by a tensor Gauss rule clipped to the rectangle.
    """
    if not h > 0:
        raise ValueError(f"h must be > 0, got {h}")
    g, gw = gauss_legendre(2 * nq, 0.0, 1.0)
    G1, G2 = np.meshgrid(g, g, indexing="ij")
    total = float(gw @ np.asarray(kernel(G1, G2)) @ gw)
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"kernel integral {total:.8g} != 1")
    d = basis.domain
    jx = np.arange(math.ceil(d.Lx / h - 1e-12))
    jy = np.arange(math.ceil(d.Ly / h - 1e-12))
    rows = []
    for a in jx:
        tx = min(1.0, (d.Lx - a * h) / h)  # clip cells that overhang the rectangle
        xi, wx = gauss_legendre(nq, 0.0, tx)
        X = basis.beam_x.values(h * (a + xi), 0)
        for b in jy:
            ty = min(1.0, (d.Ly - b * h) / h)
            eta, wy = gauss_legendre(nq, 0.0, ty)
            Y = basis.beam_y.values(h * (b + eta), 0)
            lam = np.asarray(kernel(xi[:, None], eta[None, :])) * np.outer(wx, wy)
            rows.append((X.T @ lam @ Y).ravel())
    return FunctionalSet("averages", np.array(rows),
                         {"h": h, "kernel": kernel_name, "lattice": [len(jx), len(jy)]})


# -- defects ---------------------------------------------------------------

@dataclass
class DefectResult:
    epsilon: float
    maximizer: np.ndarray
    target_norm: str
    null_dim: int

    def check(self, fs: FunctionalSet, basis: BasisSet, tol: float = 1e-10) -> bool:
        """Maximizer annihilates every functional and has unit strong norm."""
        if self.null_dim == 0:
            return self.epsilon == 0.0
        w = self.maximizer
        scale = max(np.abs(fs.L).max() if fs.m else 0.0, 1.0) * np.linalg.norm(w)
        return bool((fs.m == 0 or np.abs(fs.L @ w).max() <= tol * scale)
                    and abs(w @ basis.K @ w - 1.0) <= tol)


def weak_gram(basis: BasisSet, weak_norm: str = "l2", eta: float = 0.5) -> np.ndarray:
    """Gram matrix of the weak norm: M for L^2, the spectral H^(2-eta) form otherwise."""
    if weak_norm == "l2":
        return basis.M
    if weak_norm == "h":
        lam, V = modal_pencil(basis)
        MV = basis.M @ V
        return (MV * lam ** ((2.0 - eta) / 2.0)) @ MV.T
    raise ValueError(f"unknown weak norm {weak_norm!r}")


def null_basis(L: np.ndarray, N: int) -> np.ndarray:
    if L.shape[0] == 0:
        return np.eye(N)
    return sla.null_space(L, rcond=1e-12)


def completeness_defect(fs: FunctionalSet, basis: BasisSet, weak_norm: str = "l2",
                        eta: float = 0.5, W: np.ndarray | None = None) -> DefectResult:
    Z = null_basis(fs.L, basis.N)
    if Z.shape[1] == 0:
        return DefectResult(0.0, np.zeros(basis.N), weak_norm, 0)
    W = weak_gram(basis, weak_norm, eta) if W is None else W
    A = Z.T @ W @ Z
    B = Z.T @ basis.K @ Z
    n = Z.shape[1]
    try:
        mu, x = sla.eigh(A, B, subset_by_index=[n - 1, n - 1])
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"projected K is not positive definite (null dim {n}, "
            f"min eig {np.linalg.eigvalsh(B)[0]:.3e}): {exc}") from None
    w = Z @ x[:, 0]
    w /= np.sqrt(w @ basis.K @ w)
    if w[np.argmax(np.abs(w))] < 0:
        w = -w
    return DefectResult(float(np.sqrt(max(mu[0], 0.0))), w, weak_norm, n)


def interpolation_inequality_constant(fs: FunctionalSet, basis: BasisSet, W: np.ndarray | None = None) -> float:
    """C(L) with |v|_W <= eps |v|_K + C(L) max_j |l_j(v)| for every v.

    Splitting v into its K-orthogonal projection onto null(L) and the rest,
    the rest is sum_j l_j(v) psi_j for the dual family
    psi = K^-1 L^T (L K^-1 L^T)^+; C(L) = sum_j |psi_j|_W.
    """
    if fs.m == 0:
        return 0.0
    W = basis.M if W is None else W
    KiLt = sla.solve(basis.K, fs.L.T, assume_a="pos")
    Psi = KiLt @ np.linalg.pinv(fs.L @ KiLt, rcond=1e-12)
    return float(np.sqrt(np.einsum("ij,ik,kj->j", Psi, W, Psi)).sum())


# -- interpolation -----------------------------------------------------------

def hat_function(xc: float, yc: float, hx: float, hy: float):
    """P1 hat of the right-triangulation (diagonals along (1, 1)) at vertex (xc, yc)."""
    def f(x, y):
        xi = (x - xc) / hx
        et = (y - yc) / hy
        return np.maximum(0.0, 1.0 - np.maximum(np.maximum(np.abs(xi), np.abs(et)), np.abs(xi - et)))
    return f


def _cell_project(basis: BasisSet, funcs, nx_cells: int, ny_cells: int, nq: int = 8) -> np.ndarray:
    """Projections <f, e_k> by composite rules on a nx_cells x ny_cells grid.

    Each cell is split along its (1, 1) diagonal and each triangle gets a
    collapsed (Duffy) tensor Gauss rule, so integrands that are smooth on
    the triangles, like P1 hats times basis functions, converge rapidly."""
    d = basis.domain
    hx, hy = d.Lx / nx_cells, d.Ly / ny_cells
    g, gw = gauss_legendre(nq, 0.0, 1.0)
    U, V = np.meshgrid(g, g, indexing="ij")
    WU = np.outer(gw, gw)
    # lower triangle {eta <= xi} and upper {eta >= xi} of the unit cell via (u, v) -> (u, u v)
    tri = []
    for upper in (False, True):
        xi = U.ravel()
        et = (U * V).ravel()
        w = (WU * U).ravel()
        if upper:
            xi, et = et, xi
        tri.append((xi, et, w))
    pts, wts = [], []
    for i in range(nx_cells):
        for j in range(ny_cells):
            for xi, et, w in tri:
                pts.append(np.column_stack([(i + xi) * hx, (j + et) * hy]))
                wts.append(w * hx * hy)
    P = np.vstack(pts)
    w = np.concatenate(wts)
    E = basis_values(basis, P)
    F = np.column_stack([f(P[:, 0], P[:, 1]) for f in funcs])
    return (E * w[:, None]).T @ F  # (N, n_funcs)


def dual_family(fs: FunctionalSet, basis: BasisSet) -> np.ndarray:
    """Columns phi_j (coefficients) of the interpolant R w = sum_j l_j(w) phi_j.

    modes: the eigenvectors; nodes: projected P1 hats; averages: projected
    cell indicators (the constant-kernel translates)."""
    if fs.kind == "modes":
        lam, V = modal_pencil(basis)
        return V[:, :fs.m]
    d = basis.domain
    if fs.kind == "nodes":
        nx, ny = fs.meta["cells"]
        hx, hy = d.Lx / nx, d.Ly / ny
        funcs = [hat_function(x, y, hx, hy) for x, y in fs.meta["points"]]
        return sla.solve(basis.M, _cell_project(basis, funcs, nx, ny), assume_a="pos")
    if fs.kind == "averages":
        h = fs.meta["h"]
        nx, ny = fs.meta["lattice"]
        funcs = []
        for a in range(nx):
            for b in range(ny):
                funcs.append(lambda x, y, a=a, b=b: ((x >= a * h) & (x < (a + 1) * h)
                                                     & (y >= b * h) & (y < (b + 1) * h)).astype(float))
        # cells align with the projection grid when h divides the sides
        return sla.solve(basis.M, _cell_project(basis, funcs, nx, ny), assume_a="pos")
    raise ValueError(f"no dual family for kind {fs.kind!r}")


def interpolation_error(fs: FunctionalSet, basis: BasisSet, probes=None, Phi: np.ndarray | None = None,
                        W: np.ndarray | None = None) -> float:
    """sup of |w - R w|_W over |Lap w| = 1.

    Without ``probes`` the sup is taken over the whole truncated space (a
    generalized eigenvalue); with probes (columns of coefficients) it is the
    max over the normalized probes.
    """
    W = basis.M if W is None else W
    Phi = dual_family(fs, basis) if Phi is None else Phi
    E = np.eye(basis.N) - Phi @ fs.L
    if probes is not None:
        P = np.atleast_2d(np.asarray(probes, dtype=float).T).T
        nrm = np.sqrt(np.einsum("ij,ik,kj->j", P, basis.K, P))
        R = E @ (P / nrm)
        return float(np.sqrt(np.einsum("ij,ik,kj->j", R, W, R)).max())
    A = E.T @ W @ E
    mu = sla.eigh(A, basis.K, eigvals_only=True, subset_by_index=[basis.N - 1, basis.N - 1])
    return float(np.sqrt(max(mu[0], 0.0)))


# -- scaling study -----------------------------------------------------------

@dataclass
class ScalingRow:
    param: float
    epsilon: float
    epsilon_doubled: float | None
    nx: int
    ny: int

    @property
    def saturation_change(self) -> float:
        if self.epsilon_doubled is None:
            return 0.0
        return abs(self.epsilon_doubled - self.epsilon) / max(self.epsilon_doubled, 1e-300)


@dataclass
class ScalingStudy:
    kind: str
    rows: list[ScalingRow]
    slope: float
    intercept: float
    saturated: bool
    exact_error: float | None = None  # modes: max |eps - lam_{n+1}^-1/2|

    def table(self) -> str:
        out = ["param,epsilon,epsilon_doubled,nx,ny,saturation_change"]
        for r in self.rows:
            ed = "" if r.epsilon_doubled is None else "%.17g" % r.epsilon_doubled
            out.append(f"{r.param!r},{'%.17g' % r.epsilon},{ed},{r.nx},{r.ny},{'%.6g' % r.saturation_change}")
        return "\n".join(out) + "\n"


def default_resolution(kind: str, h: float) -> tuple[int, int]:
    """Basis sizes for a mesh h: the maximizer oscillates at wavelength 2h
    (nodes) or h (averages) along one axis, so that axis needs about 1/h or
    2/h beam modes; the other axis stays coarse."""
    per = {"nodes": 1.5, "averages": 2.5}[kind]
    return int(math.ceil(per / h)) + 4, 8


def fit_slope(x, y) -> tuple[float, float]:
    """Least-squares log-log slope over the positive pairs; nan below two."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0)
    if keep.sum() < 2:
        return float("nan"), float("nan")
    p = np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)
    return float(p[0]), float(p[1])


def defect_scaling_study(kind: str, grid, domain, basis_factory, resolution=None,
                         saturation: bool = True, tol: float = 0.05, weak_norm: str = "l2",
                         eta: float = 0.5, basis: BasisSet | None = None) -> ScalingStudy:
    """Defects over a parameter grid with a log-log slope.

    nodes/averages: ``grid`` holds mesh sizes h; the basis for each h comes
    from ``basis_factory(domain, nx, ny)`` with (nx, ny) from ``resolution(kind, h)``
    and is re-solved at (2 nx, 2 ny) when ``saturation``; a change above
    ``tol`` raises UnderResolved.
    modes: ``grid`` holds counts n on the fixed ``basis``; eps is compared with
    lam_{n+1}^-1/2.
    """
    grid = list(grid)
    rows = []
    if kind == "modes":
        if basis is None:
            raise ValueError("modes study needs a basis")
        lam, _ = modal_pencil(basis)
        exact = 0.0
        for n in grid:
            n = int(n)
            eps = completeness_defect(make_modes(basis, n), basis, weak_norm, eta).epsilon
            if n < basis.N:
                target = lam[n] ** -0.5 if weak_norm == "l2" else lam[n] ** (-eta / 4.0)
                exact = max(exact, abs(eps - target))
            rows.append(ScalingRow(float(n), eps, None, basis.nx, basis.ny))
        slope, icpt = fit_slope([r.param for r in rows], [r.epsilon for r in rows])
        return ScalingStudy(kind, rows, slope, icpt, True, exact)
    build = make_nodes if kind == "nodes" else make_averages
    resolution = resolution or default_resolution
    saturated = True
    for h in grid:
        nx, ny = resolution(kind, h)
        b = basis_factory(domain, nx, ny)
        eps = completeness_defect(build(b, h), b, weak_norm, eta).epsilon
        eps2 = None
        if saturation:
            b2 = basis_factory(domain, 2 * nx, 2 * ny)
            eps2 = completeness_defect(build(b2, h), b2, weak_norm, eta).epsilon
        row = ScalingRow(float(h), eps, eps2, nx, ny)
        rows.append(row)
        if row.saturation_change > tol:
            saturated = False
    slope, icpt = fit_slope([r.param for r in rows], [r.epsilon for r in rows])
    study = ScalingStudy(kind, rows, slope, icpt, saturated)
    if not saturated:
        worst = max(rows, key=lambda r: r.saturation_change)
        raise UnderResolved(f"under-resolved: h={worst.param} changes by "
                            f"{100 * worst.saturation_change:.1f}% at doubled basis ({worst.nx}x{worst.ny})",
                            study)
    return study


# -- determining experiment -----------------------------------------------

@dataclass
class DeterminingReport:
    t: np.ndarray
    functional_diff: np.ndarray  # max_j |l_j(u1 - u2)|
    state_diff: np.ndarray  # |z|_H
    verdict: str
    t_functional: float  # time after which the relative functional difference stays below tol
    t_state: float

    def text(self) -> str:
        return (f"verdict = {self.verdict}\nt_functional = {self.t_functional!r}\n"
                f"t_state = {self.t_state!r}\n")


def _settle_time(t, rel, tol) -> float:
    above = np.flatnonzero(rel > tol)
    if len(above) == 0:
        return float(t[0])
    if above[-1] == len(rel) - 1:
        return float("inf")
    return float(t[above[-1] + 1])


def determining_test(fs: FunctionalSet, scenario, x1, x2, n_steps: int | None = None,
                     stride: int = 8, tol: float = 1e-3, result=None) -> DeterminingReport:
    """Co-evolve a pair and compare functional and state convergence.

    Each series is measured relative to its own peak, so the scale of the
    functionals does not matter.  Verdicts: "consistent with determining"
    (both settle below tol), "epsilon too large" (functionals settle, the
    state does not), "functionals did not converge" otherwise.  The converse
    implication is never claimed.  ``result`` reuses an existing
    difference experiment so several sets can share one pair.
    """
    from .longtime import difference_experiment

    res = result if result is not None else difference_experiment(scenario, x1, x2, n_steps, stride, fit=False)
    t = res.series("t")
    H = np.sqrt(res.series("H2"))
    z = res.a1 - res.a2
    f = np.abs(z @ fs.L.T).max(axis=1) if fs.m else np.zeros(len(t))
    if H.max() == 0:
        return DeterminingReport(t, f, H, "identical trajectories", float(t[0]), float(t[0]))
    tf = _settle_time(t, f / f.max(), tol) if f.max() > 0 else float(t[0])
    ts = _settle_time(t, H / H.max(), tol)
    if not np.isfinite(tf):
        verdict = "functionals did not converge"
    elif np.isfinite(ts):
        verdict = "consistent with determining"
    else:
        verdict = "epsilon too large"
    return DeterminingReport(t, f, H, verdict, tf, ts)
