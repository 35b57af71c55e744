"""Neumann flow potential phi** from the explicit half-space representation.

With g = u_t + U u_x (extended by zero) and the shifted argument

    f^dag(x, t, s, th) = f(x - U s - r sin th, y - r cos th, t - s),   r = sqrt(s^2 - z^2),

the potential is phi** = -chi(t - z)/(2 pi) int_z^t* int_0^2pi g^dag dth ds.
Differentiating under the integral (d/ds g^dag = -[g_t + U g_x + (s/r) M_th g]^dag) gives

    phi**_t = (1/2pi) { int g^dag(t*) - int g^dag(z) + U int int (g_x)^dag
                        + int int (s/r) (M_th g)^dag }.

At z = 0 the trace (d_t + U d_x) phi** reduces to -g + (1/2pi) int int (M_th g)^dag,
and one more integration by parts turns the double integral into -q, so the
reduction identity reads (d_t + U d_x) phi** = -(u_t + U u_x) - q.

phi* (the free Kirchhoff part) is not evaluated: by Huygens' principle it
vanishes on any bounded observation set after a finite time.

Quadrature: trapezoid in theta; in s, Gauss-Legendre on each smooth piece of
the characteristic.  For z > 0 the path is parametrized by s = z cosh(sigma),
which absorbs the s/r singularity, and split where it crosses the edges of
the rectangle (the integrands have derivative jumps there).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .basis import BasisSet, basis_values, gauss_legendre
from .delaykernel import exit_time


class InsufficientCoverage(ValueError):
    pass


@dataclass(frozen=True)
class TracePoint:
    x: float
    y: float
    z: float
    t: float

    def __post_init__(self):
        if self.z < 0:
            raise ValueError(f"z must be >= 0, got {self.z}")
        if self.t < 0:
            raise ValueError(f"t must be >= 0, got {self.t}")


class ModalTrajectory:
    """Plate trajectory given by coefficient functions of time.

    ``a(t)`` and ``adot(t)`` take an array of times and return (len(t), N).
    """

    def __init__(self, basis: BasisSet, a, adot, t_start: float = -np.inf, t_end: float = np.inf):
        self.basis = basis
        self._a = a
        self._adot = adot
        self.t_start = t_start
        self.t_end = t_end

    def coeffs(self, t, order: int) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.asarray((self._a, self._adot)[order](t), dtype=float).reshape(len(t), -1)

    def scaled(self, c: float) -> "ModalTrajectory":
        return ModalTrajectory(self.basis, lambda t: c * self.coeffs(t, 0), lambda t: c * self.coeffs(t, 1),
                               self.t_start, self.t_end)

    def __add__(self, other: "ModalTrajectory") -> "ModalTrajectory":
        return ModalTrajectory(self.basis, lambda t: self.coeffs(t, 0) + other.coeffs(t, 0),
                               lambda t: self.coeffs(t, 1) + other.coeffs(t, 1),
                               max(self.t_start, other.t_start), min(self.t_end, other.t_end))


def standing_mode(basis: BasisSet, shape: np.ndarray, omega: float, amplitude: float = 1.0,
                  phase: float = 0.0) -> ModalTrajectory:
    """a(t) = amplitude sin(omega t + phase) shape."""
    shape = np.asarray(shape, dtype=float)
    return ModalTrajectory(
        basis,
        lambda t: amplitude * np.sin(omega * t + phase)[:, None] * shape,
        lambda t: amplitude * omega * np.cos(omega * t + phase)[:, None] * shape,
    )


class SampledTrajectory(ModalTrajectory):
    """Recorded (t, a, adot) samples, interpolated by cubic Hermite splines."""

    def __init__(self, basis: BasisSet, t, a, adot):
        t = np.asarray(t, dtype=float)
        spline = CubicHermiteSpline(t, np.asarray(a), np.asarray(adot), axis=0)
        deriv = spline.derivative()
        super().__init__(basis, spline, deriv, float(t[0]), float(t[-1]))


@dataclass
class PathNodes:
    """Quadrature nodes of all characteristics for one evaluation point."""

    X: np.ndarray
    Y: np.ndarray
    s: np.ndarray
    w: np.ndarray  # weight for ds (theta weight / 2pi included)
    w_sing: np.ndarray  # weight for (s/r) ds
    sin: np.ndarray
    cos: np.ndarray


def _wall_roots(c: float, a: float, b: float) -> list[float]:
    """sigma >= 0 with z(a cosh sigma + b sinh sigma) = c z, via w = e^sigma:
    (a + b) w^2 - 2 c w + (a - b) = 0."""
    A, B, C = a + b, -2.0 * c, a - b
    if abs(A) < 1e-15:
        ws = [] if abs(B) < 1e-15 else [-C / B]
    else:
        disc = B * B - 4 * A * C
        if disc < 0:
            return []
        sq = np.sqrt(disc)
        ws = [(-B + sq) / (2 * A), (-B - sq) / (2 * A)]
    return [float(np.log(w)) for w in ws if w > 1.0]


def path_nodes(basis: BasisSet, x: float, y: float, z: float, U: float, t_star: float,
               n_theta: int, n_s: int) -> PathNodes:
    dom = basis.domain
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    wth = 1.0 / n_theta  # (1/2pi) * 2pi/n
    out = {k: [] for k in ("X", "Y", "s", "w", "w_sing", "sin", "cos")}
    for th in theta:
        sn, cs = np.sin(th), np.cos(th)
        if z == 0.0:
            top = min(float(exit_time(x, y, th, U, dom)), t_star)
            if top <= 0:
                continue
            s, ws = gauss_legendre(n_s, 0.0, top)
            r = s
            wsing = ws
        else:
            if t_star <= z:
                continue
            smax = np.arccosh(t_star / z)
            cuts = {0.0, smax}
            for wall in (0.0, dom.Lx):
                cuts.update(_wall_roots((x - wall) / z, U, sn))
            for wall in (0.0, dom.Ly):
                cuts.update(_wall_roots((y - wall) / z, 0.0, cs))
            cuts = sorted(c for c in cuts if 0.0 <= c <= smax)
            sig, wsig = [], []
            for lo, hi in zip(cuts[:-1], cuts[1:]):
                if hi - lo > 1e-14:
                    q, w = gauss_legendre(n_s, lo, hi)
                    sig.append(q)
                    wsig.append(w)
            sig = np.concatenate(sig)
            wsig = np.concatenate(wsig)
            s = z * np.cosh(sig)
            r = z * np.sinh(sig)
            ws = r * wsig  # ds = z sinh(sigma) d sigma
            wsing = s * wsig  # (s/r) ds = z cosh(sigma) d sigma
        out["X"].append(x - U * s - r * sn)
        out["Y"].append(y - r * cs)
        out["s"].append(s)
        out["w"].append(wth * ws)
        out["w_sing"].append(wth * wsing)
        out["sin"].append(np.full(len(s), sn))
        out["cos"].append(np.full(len(s), cs))
    cat = {k: (np.concatenate(v) if v else np.zeros(0)) for k, v in out.items()}
    return PathNodes(**cat)


def _check_coverage(traj: ModalTrajectory, t: float, t_star: float):
    if traj.t_start > t - t_star + 1e-12 or traj.t_end < t - 1e-12:
        raise InsufficientCoverage(
            f"insufficient trajectory coverage: need [{t - t_star:.6g}, {t:.6g}], "
            f"have [{traj.t_start:.6g}, {traj.t_end:.6g}]")


class _Fields:
    """u and u_t derivatives of the trajectory at scattered (x, y, t) nodes."""

    def __init__(self, traj: ModalTrajectory, X, Y, T):
        self.basis = traj.basis
        self.pts = np.column_stack([X, Y])
        self.A = traj.coeffs(T, 0)
        self.Ad = traj.coeffs(T, 1)
        self._E = {}

    def E(self, d):
        if d not in self._E:
            self._E[d] = basis_values(self.basis, self.pts, d)
        return self._E[d]

    def u(self, d):
        return np.einsum("pn,pn->p", self.E(d), self.A)

    def ut(self, d):
        return np.einsum("pn,pn->p", self.E(d), self.Ad)

    def g(self, U, d=(0, 0)):
        """Derivative ``d`` of g = u_t + U u_x."""
        return self.ut(d) + U * self.u((d[0] + 1, d[1]))


def _g_at(traj, U, X, Y, T):
    X, Y, T = np.broadcast_arrays(np.atleast_1d(X), np.atleast_1d(Y), np.atleast_1d(T))
    if len(X) == 0:
        return np.zeros(0)
    return _Fields(traj, X, Y, T).g(U)


def eval_phi2(point: TracePoint, traj: ModalTrajectory, U: float, t_star: float,
              n_theta: int = 64, n_s: int = 24) -> float:
    """phi**(x, t) by quadrature of the representation formula."""
    x, y, z, t = point.x, point.y, point.z, point.t
    if t < z:
        return 0.0
    _check_coverage(traj, t, t_star)
    P = path_nodes(traj.basis, x, y, z, U, t_star, n_theta, n_s)
    if len(P.s) == 0:
        return 0.0
    F = _Fields(traj, P.X, P.Y, t - P.s)
    return float(-(P.w @ F.g(U)))


@dataclass
class Phi2tTerms:
    far: float  # int g^dag(t*) / 2pi
    near: float  # -int g^dag(z) / 2pi
    transport: float  # U int int (g_x)^dag / 2pi
    directional: float  # int int (s/r)(M g)^dag / 2pi

    @property
    def total(self) -> float:
        return self.far + self.near + self.transport + self.directional


def phi2_t_terms(point: TracePoint, traj: ModalTrajectory, U: float, t_star: float,
                 n_theta: int = 64, n_s: int = 24) -> Phi2tTerms:
    x, y, z, t = point.x, point.y, point.z, point.t
    if t < z:
        return Phi2tTerms(0.0, 0.0, 0.0, 0.0)
    _check_coverage(traj, t, t_star)
    basis = traj.basis
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    r_top = np.sqrt(max(t_star * t_star - z * z, 0.0))
    far = float(np.mean(_g_at(traj, U, x - U * t_star - r_top * np.sin(theta),
                              y - r_top * np.cos(theta), np.full(n_theta, t - t_star))))
    near = -float(_g_at(traj, U, x - U * z, y, t - z)[0])
    P = path_nodes(basis, x, y, z, U, t_star, n_theta, n_s)
    if len(P.s) == 0:
        return Phi2tTerms(far, near, 0.0, 0.0)
    F = _Fields(traj, P.X, P.Y, t - P.s)
    gx = F.g(U, (1, 0))
    gy = F.g(U, (0, 1))
    transport = float(U * (P.w @ gx))
    directional = float(P.w_sing @ (P.sin * gx + P.cos * gy))
    return Phi2tTerms(far, near, transport, directional)


def eval_phi2_t(point: TracePoint, traj: ModalTrajectory, U: float, t_star: float,
                n_theta: int = 64, n_s: int = 24) -> float:
    """Time derivative of phi** by the four-term formula (z = 0 is the direct limit)."""
    return phi2_t_terms(point, traj, U, t_star, n_theta, n_s).total


def eval_phi2_x(point: TracePoint, traj: ModalTrajectory, U: float, t_star: float,
                n_theta: int = 64, n_s: int = 24) -> float:
    x, y, z, t = point.x, point.y, point.z, point.t
    if t < z:
        return 0.0
    _check_coverage(traj, t, t_star)
    P = path_nodes(traj.basis, x, y, z, U, t_star, n_theta, n_s)
    if len(P.s) == 0:
        return 0.0
    return float(-(P.w @ _Fields(traj, P.X, P.Y, t - P.s).g(U, (1, 0))))


def flow_trace(x: float, y: float, t: float, traj: ModalTrajectory, U: float, t_star: float,
               n_theta: int = 64, n_s: int = 24) -> float:
    """(d_t + U d_x) phi** at z = 0."""
    p = TracePoint(x, y, 0.0, t)
    return (eval_phi2_t(p, traj, U, t_star, n_theta, n_s)
            + U * eval_phi2_x(p, traj, U, t_star, n_theta, n_s))


def q_direct(x: float, y: float, t: float, traj: ModalTrajectory, U: float, t_star: float,
             n_theta: int = 64, n_s: int = 24) -> float:
    """Pointwise delay potential (1/2pi) int_0^t* int (M_th^2 u)^dag by direct quadrature."""
    _check_coverage(traj, t, t_star)
    P = path_nodes(traj.basis, x, y, 0.0, U, t_star, n_theta, n_s)
    if len(P.s) == 0:
        return 0.0
    F = _Fields(traj, P.X, P.Y, t - P.s)
    m2 = P.sin ** 2 * F.u((2, 0)) + 2 * P.sin * P.cos * F.u((1, 1)) + P.cos ** 2 * F.u((0, 2))
    return float(P.w @ m2)


@dataclass
class ReductionReport:
    points: np.ndarray  # (P, 2)
    t: float
    trace: np.ndarray  # flow side
    g: np.ndarray  # u_t + U u_x
    q: np.ndarray
    residual: np.ndarray  # |trace + g + q| / max_points(|g| + |q|)


def reduction_residual(points, t: float, traj: ModalTrajectory, U: float, t_star: float,
                       n_theta: int = 64, n_s: int = 24) -> ReductionReport:
    """Compare the flow-side trace with -(u_t + U u_x) - q at points on z = 0.

    Residuals are relative to the largest |g| + |q| over the sample set.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    tr, gs, qs = [], [], []
    for x, y in pts:
        tr.append(flow_trace(x, y, t, traj, U, t_star, n_theta, n_s))
        gs.append(float(_g_at(traj, U, x, y, t)[0]))
        qs.append(q_direct(x, y, t, traj, U, t_star, n_theta, n_s))
    tr, gs, qs = map(np.array, (tr, gs, qs))
    scale = np.max(np.abs(gs) + np.abs(qs)) if len(pts) else 0.0
    diff = np.abs(tr + gs + qs)
    res = diff / scale if scale > 0 else diff
    return ReductionReport(pts, t, tr, gs, qs, res)


def interior_points(basis: BasisSet, n: int) -> np.ndarray:
    """n x n grid of interior points at (i/(n+1)) Lx, (j/(n+1)) Ly."""
    d = basis.domain
    xs = d.Lx * np.arange(1, n + 1) / (n + 1)
    ys = d.Ly * np.arange(1, n + 1) / (n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()])
