"""Long-time diagnostics: absorbing ball, quasi-stability, decomposition, dimension.

State differences z = u1 - u2 use the H-norm

    |z|_H^2 = |Lap z|^2 + |z_t|^2 + int_{t-t*}^t |Lap z|^2,

and the weak (low) norm is L^2.  Every fit reports its window and quality
so that no diagnostic passes silently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import least_squares, linprog
from scipy.spatial.distance import pdist

from .basis import BasisSet
from .dynamics import RunState, berger_force


class NoScalingWindow(ValueError):
    pass


# -- difference experiments ------------------------------------------------

@dataclass
class DifferenceRecord:
    t: float
    E_z: float  # (|Lap z|^2 + |z_t|^2)/2
    low_norm: float  # |z| in L^2
    history_norm: float  # int_{t-t*}^t |Lap z|^2

    @property
    def H2(self) -> float:
        """Squared H-norm of the difference."""
        return 2.0 * self.E_z + self.history_norm


@dataclass
class QuasiFit:
    gamma: float
    C: float
    C_q: float
    rms_fit_error: float  # RMS(model - Z) / max Z
    success: bool
    message: str = ""


@dataclass
class DifferenceResult:
    records: list[DifferenceRecord]
    fit: QuasiFit | None
    steps: np.ndarray
    a1: np.ndarray
    v1: np.ndarray
    a2: np.ndarray
    v2: np.ndarray
    dt: float

    def series(self, name: str) -> np.ndarray:
        if name == "H2":
            return np.array([r.H2 for r in self.records])
        return np.array([getattr(r, name) for r in self.records])


def _window_norm(basis: BasisSet, h1, h2, dt: float) -> float:
    z = h1.ordered() - h2.ordered()
    g = np.einsum("mi,mi->m", z @ basis.K, z)
    w = np.full(len(g), dt)
    w[0] = w[-1] = 0.5 * dt
    return float(w @ g)


def _difference_record(basis, t, s1, s2, h1, h2, dt) -> DifferenceRecord:
    z = s1.a - s2.a
    zt = s1.adot - s2.adot
    E = 0.5 * (z @ (basis.K @ z) + zt @ zt)
    return DifferenceRecord(t, float(E), float(np.sqrt(z @ z)), _window_norm(basis, h1, h2, dt))


def co_evolve(stepper, rs1: RunState, rs2: RunState, n_steps: int, stride: int = 1):
    """Advance both runs in lockstep; yields (step, rs1, rs2) every ``stride`` steps."""
    for n in range(n_steps + 1):
        if n % stride == 0 or n == n_steps:
            yield n, rs1, rs2
        if n == n_steps:
            return
        for rs in (rs1, rs2):
            rs.state, rs.forces = stepper.step(rs.state, rs.hist, rs.forces)


def difference_experiment(scenario, x1, x2, n_steps: int | None = None, stride: int = 8,
                          fit: bool = True) -> DifferenceResult:
    """Co-evolve x1 = (a0, v0) and x2 from the scenario's history rule.

    Records E_z, the L^2 norm of z and the delay-window norm every
    ``stride`` steps and fits the quasi-stability ansatz to the H-norm.
    """
    sc = scenario
    n_steps = sc.n_steps if n_steps is None else n_steps
    rs1, rs2 = sc.start(*x1), sc.start(*x2)
    recs, steps, a1, v1, a2, v2 = [], [], [], [], [], []
    for n, r1, r2 in co_evolve(sc.stepper, rs1, rs2, n_steps, stride):
        recs.append(_difference_record(sc.basis, r1.state.t, r1.state, r2.state, r1.hist, r2.hist, sc.dt))
        steps.append(n)
        a1.append(r1.state.a.copy())
        v1.append(r1.state.adot.copy())
        a2.append(r2.state.a.copy())
        v2.append(r2.state.adot.copy())
    res = DifferenceResult(recs, None, np.array(steps), np.array(a1), np.array(v1),
                           np.array(a2), np.array(v2), sc.dt)
    if fit:
        res.fit = quasi_fit(res.series("t"), res.series("H2"), res.series("low_norm"))
    return res


def quasi_fit(t, Z, low) -> QuasiFit:
    """Fit Z(t) ~ C Z(0) exp(-gamma t) + C_q sup_{[0,t]} low^2 by least squares on logs."""
    t, Z, low = (np.asarray(x, dtype=float) for x in (t, Z, low))
    if not np.any(Z > 0):
        return QuasiFit(0.0, 0.0, 0.0, 0.0, False, "zero difference")
    keep = Z > 0
    t, Z, low = t[keep], Z[keep], low[keep]
    S = np.maximum.accumulate(low ** 2)
    Z0 = Z[0]
    slope = np.polyfit(t, np.log(Z), 1)[0]
    g0 = max(-slope, 1e-3)
    cq0 = max(Z.min() / max(S.max(), 1e-300), 1e-300)

    def model(p):
        return np.exp(p[0]) * Z0 * np.exp(-p[1] * t) + np.exp(p[2]) * S

    def resid(p):
        return np.log(model(p)) - np.log(Z)

    sol = least_squares(resid, [0.0, g0, np.log(cq0)], method="trf", x_scale="jac", max_nfev=2000)
    m = model(sol.x)
    rms = float(np.sqrt(np.mean((m - Z) ** 2)) / Z.max())
    gamma = float(sol.x[1])
    ok = bool(sol.success and gamma > 0)
    msg = "" if ok else f"fit failed: {sol.message}; gamma={gamma:.3g}"
    return QuasiFit(gamma, float(np.exp(sol.x[0])), float(np.exp(sol.x[2])), rms, ok, msg)


def lipschitz_envelope(t, Z) -> tuple[float, float]:
    """(C, a) with Z(t) <= C exp(a t) Z(0) on every sample, minimizing int_0^T log(C) + a t.

    A linear program in (log C, a); ``a`` finite certifies the exponential
    Lipschitz bound on the horizon.
    """
    t = np.asarray(t, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Z[0] <= 0:
        return 0.0, 0.0
    keep = Z > 0
    y = np.log(Z[keep] / Z[0])
    tt = t[keep]
    T = tt[-1] - tt[0] if len(tt) > 1 else 1.0
    res = linprog([T, 0.5 * T * T], A_ub=-np.column_stack([np.ones_like(tt), tt - tt[0]]), b_ub=-y,
                  bounds=[(None, None), (None, None)], method="highs")
    if not res.success:
        return float("inf"), float("inf")
    return float(np.exp(res.x[0])), float(res.x[1])


# -- absorbing ball -----------------------------------------------------

@dataclass
class DissipativityReport:
    delta: float
    C_fit: float
    radius: float  # the ball is {V <= radius}, radius = 1 + C_fit / delta
    entry_time: float  # inf when never entered
    invariant: bool  # no exit after entry
    table: list[tuple[float, float, float]] = field(default_factory=list)  # (delta, C_fit, radius)


def dissipativity_check(t, V, deltas=None) -> DissipativityReport:
    """Best (delta, C) with (V(t+h) - V(t))/h + delta V(t) <= C on the series.

    The best pair minimizes the ball radius 1 + C/delta over ``deltas``
    (ties go to the larger delta, the faster guaranteed entry).
    """
    t = np.asarray(t, dtype=float)
    V = np.asarray(V, dtype=float)
    if deltas is None:
        deltas = np.logspace(-4, 0, 41)
    rate = np.diff(V) / np.diff(t)
    table = []
    for d in deltas:
        # C >= 0 as in the continuous estimate; a negative constant would only
        # reward taking delta -> 0
        C = max(float(np.max(rate + d * V[:-1])), 0.0)
        table.append((float(d), C, 1.0 + C / float(d)))
    d, C, R = min(table, key=lambda row: (row[2], -row[0]))
    inside = V <= R
    if not inside.any():
        return DissipativityReport(d, C, R, float("inf"), False, table)
    i = int(np.argmax(inside))
    return DissipativityReport(d, C, R, float(t[i]), bool(inside[i:].all()), table)


# -- nonlinear decomposition ------------------------------------------------

def decomposition_terms(basis: BasisSet, a1, a2, dt: float, b1: float, b2: float):
    """(<F(z), z_t>, Q1' / 2 + P1) on the step midpoints of two sampled series.

    Midpoint states are step averages and time derivatives are step
    differences, so both sides are centred at t_{n+1/2}.
    """
    G = basis.G
    a1 = np.asarray(a1)
    a2 = np.asarray(a2)
    m1 = 0.5 * (a1[1:] + a1[:-1])
    m2 = 0.5 * (a2[1:] + a2[:-1])
    u1t = np.diff(a1, axis=0) / dt
    zt = np.diff(a1 - a2, axis=0) / dt
    z = a1 - a2
    g = lambda x, y: np.einsum("ni,ij,nj->n", x, G, y)
    F = np.array([berger_force(basis, p, b1, b2) - berger_force(basis, q, b1, b2) for p, q in zip(m1, m2)])
    lhs = np.einsum("ni,ni->n", F, zt)
    Q1 = (b2 * g(a1, a1) - b1) * g(z, z)
    zm = m1 - m2
    P1 = -b2 * g(m1, u1t) * g(zm, zm) + b2 * (g(m1, m1) - g(m2, m2)) * g(m2, zt)
    rhs = 0.5 * np.diff(Q1) / dt + P1
    return lhs, rhs


def decomposition_check(basis: BasisSet, a1, a2, dt: float, b1: float, b2: float) -> np.ndarray:
    """Residual |lhs - rhs| per step, relative to max(sup |lhs|, 1).

    The scale is the sup over the series: a pointwise denominator blows up
    wherever <F(z), z_t> changes sign.
    """
    lhs, rhs = decomposition_terms(basis, a1, a2, dt, b1, b2)
    scale = max(float(np.abs(lhs).max(initial=0.0)), 1.0)
    return np.abs(lhs - rhs) / scale


# -- observability ------------------------------------------------------------

@dataclass
class ObservabilityReport:
    a0: float
    C: float
    fraction: float  # share of held-out pairs satisfying the bound
    lhs: np.ndarray
    rhs: np.ndarray


def observability_terms(res: DifferenceResult, T: float, t_star: float) -> tuple[float, float, float]:
    """(T/2 [E_z(T) + int_{T-t*}^T E_z], E_z(0) + window norm(0), sup_[0,T] |z|^2)."""
    t = res.series("t")
    E = res.series("E_z")
    i = int(np.searchsorted(t, T - 1e-12))
    i = min(i, len(t) - 1)
    sel = (t >= t[i] - t_star - 1e-12) & (t <= t[i] + 1e-12)
    tail = trapezoid(E[sel], t[sel])
    lhs = 0.5 * t[i] * (E[i] + tail)
    r0 = res.records[0]
    init = r0.E_z + r0.history_norm
    sup = float(np.max(res.series("low_norm")[: i + 1] ** 2))
    return float(lhs), float(init), sup


def observability_check(results: list[DifferenceResult], T: float, t_star: float,
                        train: int | None = None) -> ObservabilityReport:
    """Fit lhs <= a0 init + C sup on the first ``train`` pairs, test on the rest."""
    terms = np.array([observability_terms(r, T, t_star) for r in results])
    lhs, init, sup = terms.T
    n_train = train if train is not None else max(1, len(results) // 2)
    tr = slice(0, n_train)
    A = -np.column_stack([init[tr], sup[tr]])
    res = linprog([init[tr].mean(), sup[tr].mean()], A_ub=A, b_ub=-lhs[tr],
                  bounds=[(0, None), (0, None)], method="highs")
    a0, C = (res.x if res.success else (np.inf, np.inf))
    rhs = a0 * init + C * sup
    test = slice(n_train, None) if n_train < len(results) else slice(0, None)
    ok = lhs[test] <= rhs[test] * (1 + 1e-9) + 1e-300
    return ObservabilityReport(float(a0), float(C), float(ok.mean()), lhs, rhs)


# -- correlation dimension -------------------------------------------------

@dataclass
class DimensionEstimate:
    dimension: float
    fit_error: float  # standard error of the slope
    window: tuple[float, float] | None
    r2: float
    radii: np.ndarray
    correlation: np.ndarray
    label: str = "correlation dimension (lower surrogate for the fractal dimension)"


def embed_states(a, adot) -> np.ndarray:
    """Concatenate (a, adot), each block divided by its standard deviation."""
    a = np.asarray(a, dtype=float)
    adot = np.asarray(adot, dtype=float)
    blocks = []
    for b in (a, adot):
        s = b.std()
        blocks.append(b / s if s > 0 else b)
    return np.hstack(blocks)


def correlation_sum(samples, radii) -> np.ndarray:
    d = np.sort(pdist(np.asarray(samples, dtype=float)))
    return np.searchsorted(d, radii, side="right") / len(d)


def correlation_dimension(samples, radii=None, n_radii: int = 24, min_points: int | None = None,
                          r2_min: float = 0.98) -> DimensionEstimate:
    """Grassberger-Procaccia slope of log C(r) against log r.

    Default radii span from the 0.1% to the 50% quantile of the pair
    distances.  The scaling window is the contiguous run of at least
    ``min_points`` radii with the highest R^2; none reaching ``r2_min``
    raises NoScalingWindow.
    """
    X = np.asarray(samples, dtype=float)
    d = pdist(X)
    if not np.any(d > 0):
        r = np.zeros(0) if radii is None else np.asarray(radii, dtype=float)
        return DimensionEstimate(0.0, 0.0, None, 1.0, r, np.ones_like(r))
    if radii is None:
        pos = d[d > 0]
        lo, hi = np.quantile(pos, [1e-3, 0.5])
        radii = np.logspace(np.log10(lo), np.log10(hi), n_radii)
    radii = np.asarray(radii, dtype=float)
    ds = np.sort(d)
    C = np.searchsorted(ds, radii, side="right") / len(ds)
    ok = C > 0
    x, y = np.log(radii[ok]), np.log(C[ok])
    n = len(x)
    w = min_points or max(5, n // 3)
    best = None
    for i in range(n - w + 1):
        for j in range(i + w, n + 1):
            xs, ys = x[i:j], y[i:j]
            A = np.vstack([xs, np.ones_like(xs)]).T
            coef, res, *_ = np.linalg.lstsq(A, ys, rcond=None)
            ss = float(((ys - ys.mean()) ** 2).sum())
            sse = float(((A @ coef - ys) ** 2).sum())
            r2 = 1.0 - sse / ss if ss > 0 else 0.0
            key = (r2, j - i)
            if best is None or key > best[0]:
                se = np.sqrt(sse / max(j - i - 2, 1) / float(((xs - xs.mean()) ** 2).sum()))
                best = (key, coef[0], se, (float(np.exp(xs[0])), float(np.exp(xs[-1]))))
    if best is None or best[0][0] < r2_min:
        got = -1.0 if best is None else best[0][0]
        raise NoScalingWindow(f"no scaling window with R^2 >= {r2_min} (best {got:.4f})")
    (r2, _), slope, se, window = best
    return DimensionEstimate(float(slope), float(se), window, float(r2), radii, C)


def synthetic_circle(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Points on a unit circle in a random 2-plane of R^dim."""
    Q, _ = np.linalg.qr(rng.standard_normal((dim, 2)))
    th = rng.uniform(0, 2 * np.pi, n)
    return np.column_stack([np.cos(th), np.sin(th)]) @ Q.T


def synthetic_torus(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Points on a flat 2-torus (a product of unit circles) in a random 4-space of R^dim."""
    Q, _ = np.linalg.qr(rng.standard_normal((dim, 4)))
    t1 = rng.uniform(0, 2 * np.pi, n)
    t2 = rng.uniform(0, 2 * np.pi, n)
    P = np.column_stack([np.cos(t1), np.sin(t1), np.cos(t2), np.sin(t2)])
    return P @ Q.T
