"""Time integration of the reduced delayed Berger plate and its energies.

Modal equation (the basis is L2-orthonormal, so the mass matrix is I):

    a'' + c a' + K a + berger(a) = p - U Dx^T a + sigma q(a^t),   c = (1 + k) * damping_scale

Crank-Nicolson handles (K, c) and transport is extrapolated with
Adams-Bashforth 2.  By default the Berger force uses a discrete gradient and
the delay force the trapezoid rule in time, so the only extrapolated term
is transport; fully explicit AB2 variants remain selectable (IMEXStepper).
``sigma`` is the delay sign (+1 by default; -1 gives the sign of the flow
trace).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.integrate import cumulative_trapezoid

from .basis import BasisSet
from .delaykernel import DelayHistory, DelayKernel, eval_q

BLOWUP_NORM = 1e8
BERGER_MODES = ("conservative", "semi-implicit", "explicit")
DELAY_MODES = ("trapezoid", "ab2")


class BlowUp(RuntimeError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class PhysParams:
    U: float = 0.0
    k: float = 0.0
    b1: float = 0.0
    b2: float = 1.0
    p0: np.ndarray | None = None
    t_star: float = 1.0
    delay_enabled: bool = True
    delay_sign: float = 1.0
    damping_scale: float = 1.0

    def __post_init__(self):
        errors = []
        if not self.b2 > 0:
            errors.append(f"b2 must be > 0, got {self.b2}")
        if not self.k >= 0:
            errors.append(f"k must be >= 0, got {self.k}")
        if abs(self.U - 1.0) <= 1e-6:
            errors.append(f"U={self.U} within 1e-6 of 1")
        if self.delay_sign not in (1.0, -1.0):
            errors.append(f"delay_sign must be +1 or -1, got {self.delay_sign}")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def damping(self) -> float:
        return (1.0 + self.k) * self.damping_scale

    def load(self, N: int) -> np.ndarray:
        return np.zeros(N) if self.p0 is None else np.asarray(self.p0, dtype=float)


@dataclass
class ModalState:
    t: float
    a: np.ndarray
    adot: np.ndarray
    step: int = 0
    f_prev: np.ndarray | None = None  # explicit force of the previous step (AB2)
    g_prev: float | None = None  # a.Ga of the previous step (linearly implicit Berger)

    def copy(self) -> "ModalState":
        return ModalState(self.t, self.a.copy(), self.adot.copy(), self.step,
                          None if self.f_prev is None else self.f_prev.copy(), self.g_prev)


@dataclass
class EnergyRecord:
    t: float
    E_pl: float
    Pi: float
    Pi_star: float
    E_star: float
    V: float
    diss_accum: float = 0.0
    identity_residual: float = 0.0

    FIELDS = ("t", "E_pl", "Pi", "Pi_star", "E_star", "V", "diss_accum", "identity_residual")

    def row(self) -> list[float]:
        return [getattr(self, f) for f in self.FIELDS]


def berger_force(basis: BasisSet, a, b1: float, b2: float) -> np.ndarray:
    """Galerkin projection of f_B(u) = (b1 - b2 |grad u|^2) Lap u, i.e.
    -(b1 - b2 a.Ga) G a; the gradient of b2/4 (a.Ga)^2 - b1/2 a.Ga."""
    Ga = basis.G @ a
    return -(b1 - b2 * (a @ Ga)) * Ga


def berger_potential(basis: BasisSet, a, b1: float, b2: float) -> float:
    g = a @ basis.G @ a
    return 0.25 * b2 * g * g - 0.5 * b1 * g


@dataclass
class StepForces:
    """Delay and transport forces at one time level."""

    q: np.ndarray  # raw q(a^t), before the delay sign
    transport: np.ndarray  # U Dx^T a, the modal <U u_x, e_j>
    explicit: np.ndarray  # the part of the right-hand side extrapolated by AB2

    def delay(self, sign: float) -> np.ndarray:
        return sign * self.q


class NoConvergence(RuntimeError):
    pass


class IMEXStepper:
    """Crank-Nicolson for (K, c) with selectable treatment of the other terms.

    berger: "conservative" (discrete gradient, force (b2 (g_n + g_{n+1})/2 - b1) G a_mid,
    solved by scalar fixed-point iteration), "semi-implicit" (g extrapolated by AB2)
    or "explicit" (AB2 on the force).
    delay: "trapezoid" (average of q_n and q_{n+1}; q_{n+1} uses a_{n+1} only in slot 0,
    which joins the implicit solve) or "ab2".
    Transport is always AB2.
    """

    def __init__(self, basis: BasisSet, phys: PhysParams, dt: float, kernel: DelayKernel | None = None,
                 berger: str = "conservative", delay: str = "trapezoid", tol: float = 1e-14,
                 max_iter: int = 100):
        if berger not in BERGER_MODES:
            raise ValueError(f"berger must be one of {BERGER_MODES}, got {berger!r}")
        if delay not in DELAY_MODES:
            raise ValueError(f"delay must be one of {DELAY_MODES}, got {delay!r}")
        if phys.delay_enabled:
            if kernel is None:
                raise ValueError("delay enabled but no kernel supplied")
            if kernel.C.shape[1] != basis.N:
                raise ValueError("kernel and basis sizes differ")
            if abs(kernel.dt - dt) > 1e-12 * dt:
                raise ValueError(f"dt={dt} does not match kernel spacing {kernel.dt}")
        self.basis = basis
        self.phys = phys
        self.dt = float(dt)
        self.kernel = kernel
        self.berger = berger
        self.delay = delay
        self.tol = tol
        self.max_iter = max_iter
        N = basis.N
        self.c = phys.damping
        self.p = phys.load(N)
        self.DxT = np.ascontiguousarray(basis.Dx.T)
        dt, c = self.dt, self.c
        A0 = (1.0 + 0.5 * c * dt) * np.eye(N) + 0.25 * dt * dt * basis.K
        self._implicit_delay = phys.delay_enabled and delay == "trapezoid"
        if self._implicit_delay:
            self._C0w = kernel.Cw[0]
            self._Crest = kernel.Cw[1:]
            A0 = A0 - phys.delay_sign * 0.25 * dt * dt * self._C0w
        self._A0 = A0
        self._lu = sla.lu_factor(A0) if berger == "explicit" else None

    @property
    def sign(self) -> float:
        return self.phys.delay_sign

    def forces(self, state: ModalState, hist: DelayHistory | None, q: np.ndarray | None = None) -> StepForces:
        a = state.a
        phys = self.phys
        if q is None:
            q = eval_q(self.kernel, hist) if phys.delay_enabled else np.zeros_like(a)
        transport = phys.U * (self.DxT @ a)
        explicit = self.p - transport
        if phys.delay_enabled and not self._implicit_delay:
            explicit = explicit + phys.delay_sign * q
        if self.berger == "explicit":
            explicit = explicit - berger_force(self.basis, a, phys.b1, phys.b2)
        return StepForces(q, transport, explicit)

    def _solve(self, beta, r0, Gw):
        if self._lu is not None:
            return sla.lu_solve(self._lu, r0)
        A = self._A0 + (0.25 * self.dt * self.dt * beta) * self.basis.G
        return sla.solve(A, r0 - beta * Gw, check_finite=False)

    def step(self, state: ModalState, hist: DelayHistory | None,
             forces: StepForces | None = None) -> tuple[ModalState, StepForces]:
        """One step; pushes a_{n+1} into ``hist`` and returns the new forces."""
        if forces is None:
            forces = self.forces(state, hist)
        dt, c, phys = self.dt, self.c, self.phys
        a, v = state.a, state.adot
        G, K = self.basis.G, self.basis.K
        F = forces.explicit
        Fs = F if state.f_prev is None else 1.5 * F - 0.5 * state.f_prev
        aq = a + 0.25 * dt * v
        r0 = (1.0 - 0.5 * c * dt) * v - dt * (K @ aq) + dt * Fs
        q_known = None
        if self._implicit_delay:
            hs = hist.ordered()
            q_known = np.tensordot(self._Crest, hs[:-1], axes=([0, 2], [0, 1]))
            r0 = r0 + (0.5 * dt * phys.delay_sign) * (forces.q + q_known + self._C0w @ (a + 0.5 * dt * v))
        Gw = dt * (G @ aq)
        g_now = float(a @ (G @ a))
        if self.berger == "explicit":
            v_new = self._solve(0.0, r0, Gw)
        elif self.berger == "semi-implicit":
            gs = g_now if state.g_prev is None else 1.5 * g_now - 0.5 * state.g_prev
            v_new = self._solve(phys.b2 * gs - phys.b1, r0, Gw)
        else:
            g_guess = g_now if state.g_prev is None else 2.0 * g_now - state.g_prev
            beta = phys.b2 * 0.5 * (g_now + g_guess) - phys.b1
            for _ in range(self.max_iter):
                v_new = self._solve(beta, r0, Gw)
                a1 = a + 0.5 * dt * (v + v_new)
                beta_new = phys.b2 * 0.5 * (g_now + float(a1 @ (G @ a1))) - phys.b1
                done = abs(beta_new - beta) <= self.tol * max(abs(beta_new), phys.b2 * g_now, 1.0)
                beta = beta_new
                if done:
                    break
            else:
                raise NoConvergence(f"Berger fixed point did not converge at t={state.t:.6g}")
            v_new = self._solve(beta, r0, Gw)
        a_new = a + 0.5 * dt * (v + v_new)
        n = state.step + 1
        new = ModalState(_time(state, dt, n), a_new, v_new, n, F, g_now)
        if not np.all(np.isfinite(a_new)) or np.linalg.norm(a_new) > BLOWUP_NORM:
            raise BlowUp(f"blow-up at t={new.t:.6g}: |a|={np.linalg.norm(a_new):.3e}", new)
        if hist is not None:
            hist.push(a_new)
        q_new = None
        if self._implicit_delay:
            q_new = q_known + self._C0w @ a_new
        return new, self.forces(new, hist, q=q_new)


def _time(state: ModalState, dt: float, n: int) -> float:
    # integer step counter keeps the clock drift-free and aligned with the history
    return state.t - state.step * dt + n * dt


_STEPPERS: dict = {}


def step(state: ModalState, hist: DelayHistory | None, kernel: DelayKernel | None,
         basis: BasisSet, phys: PhysParams, dt: float, berger: str = "conservative",
         delay: str = "trapezoid") -> ModalState:
    key = (id(basis), id(kernel), id(phys), float(dt), berger, delay)
    stepper = _STEPPERS.get(key)
    if stepper is None or stepper.basis is not basis or stepper.phys is not phys:
        if len(_STEPPERS) > 32:
            _STEPPERS.clear()
        stepper = _STEPPERS[key] = IMEXStepper(basis, phys, dt, kernel, berger, delay)
    return stepper.step(state, hist)[0]


def history_pi_star(basis: BasisSet, slots: np.ndarray, b2: float) -> np.ndarray:
    g = np.einsum("mi,mi->m", slots @ basis.G, slots)
    return 0.25 * b2 * g * g


def _trap_weights(n: int, dt: float) -> np.ndarray:
    w = np.full(n, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def lyapunov_delay_terms(basis: BasisSet, slots: np.ndarray, dt: float, b2: float) -> tuple[float, float]:
    """(int_{t-t*}^t Pi_*, int_0^t* int_{t-s}^t Pi_*) on the history grid.

    Slot m is the time t - m dt; the inner integral over [t - s_m, t] is the
    cumulative trapezoid over slots 0..m."""
    pis = history_pi_star(basis, slots, b2)
    w = _trap_weights(len(pis), dt)
    inner = cumulative_trapezoid(pis, dx=dt, initial=0.0)
    return float(w @ pis), float(w @ inner)


def energies(state: ModalState, hist: DelayHistory | None, basis: BasisSet, phys: PhysParams,
             mu: float = 0.01, nu: float = 0.01, kernel: DelayKernel | None = None,
             q: np.ndarray | None = None) -> EnergyRecord:
    """All scalar energies.  V includes the delay terms only when ``hist`` is full;
    ``q`` avoids recomputing q(a^t) when the caller already has it."""
    a, v = state.a, state.adot
    g = a @ (basis.G @ a)
    p = phys.load(basis.N)
    pi_star = 0.25 * phys.b2 * g * g
    pi = pi_star - 0.5 * phys.b1 * g - p @ a
    quad = 0.5 * (v @ v + a @ (basis.K @ a))
    E_pl = quad + pi
    E_star = quad + pi_star
    V = E_pl + nu * (v @ a + 0.5 * (1.0 + phys.k) * (a @ a))
    if hist is not None and hist.full:
        if phys.delay_enabled:
            if q is None:
                q = eval_q(kernel, hist)
            V -= phys.delay_sign * (q @ a)
        single, double = lyapunov_delay_terms(basis, hist.ordered(), hist.dt, phys.b2)
        V += mu * (single + double)
    return EnergyRecord(state.t, float(E_pl), float(pi), float(pi_star), float(E_star), float(V))


def plate_energy(basis: BasisSet, phys: PhysParams, a, v) -> float:
    g = a @ (basis.G @ a)
    return float(0.5 * (v @ v + a @ (basis.K @ a)) + 0.25 * phys.b2 * g * g
                 - 0.5 * phys.b1 * g - phys.load(basis.N) @ a)


@dataclass
class IdentityLog:
    """Per-step data for the discrete energy identity.

    Node values (time t_n) feed the trapezoid rule; interval values use the
    step-midpoint state ((a_n + a_{n+1})/2, (v_n + v_{n+1})/2), which is
    the quadrature Crank-Nicolson integrates exactly for the linear part.
    """

    t: list = field(default_factory=list)
    E_pl: list = field(default_factory=list)
    kinetic: list = field(default_factory=list)  # |u_t|^2 at t_n
    power: list = field(default_factory=list)  # <d - U u_x, u_t> at t_n
    mid_kinetic: list = field(default_factory=list)
    mid_power: list = field(default_factory=list)

    def node(self, t, E_pl, v, d, transport):
        self.t.append(t)
        self.E_pl.append(E_pl)
        self.kinetic.append(float(v @ v))
        self.power.append(float((d - transport) @ v))

    def interval(self, v0, v1, d0, d1, tr0, tr1):
        vm = 0.5 * (v0 + v1)
        self.mid_kinetic.append(float(vm @ vm))
        self.mid_power.append(float((0.5 * (d0 + d1) - 0.5 * (tr0 + tr1)) @ vm))


def energy_identity_residual(log: IdentityLog, damping: float, start: int = 0,
                             rule: str = "midpoint") -> np.ndarray:
    """Residual r(t) of E(t) + c int_s^t |u_t|^2 - E(s) - int_s^t <d - U u_x, u_t>
    for s = t_start and every later grid time t, divided by max(|E_pl|, 1)
    over [s, t].  ``rule`` is "midpoint" or "trapezoid"."""
    t = np.asarray(log.t[start:])
    E = np.asarray(log.E_pl[start:])
    if rule == "trapezoid":
        diss = cumulative_trapezoid(np.asarray(log.kinetic[start:]), t, initial=0.0)
        work = cumulative_trapezoid(np.asarray(log.power[start:]), t, initial=0.0)
    elif rule == "midpoint":
        n = len(t) - 1
        h = np.diff(t)
        diss = np.concatenate([[0.0], np.cumsum(h * np.asarray(log.mid_kinetic[start:start + n]))])
        work = np.concatenate([[0.0], np.cumsum(h * np.asarray(log.mid_power[start:start + n]))])
    else:
        raise ValueError(f"unknown rule {rule!r}")
    res = E - E[0] + damping * diss - work
    return res / np.maximum(np.maximum.accumulate(np.abs(E)), 1.0)


@dataclass
class RunningIdentity:
    """Streaming midpoint identity residual; small enough to checkpoint."""

    E0: float
    scale: float
    diss: float = 0.0
    work: float = 0.0

    @classmethod
    def start(cls, E0: float) -> "RunningIdentity":
        return cls(E0, max(abs(E0), 1.0))

    def add(self, dt, v0, v1, d0, d1, tr0, tr1, E1):
        vm = 0.5 * (v0 + v1)
        self.diss += dt * float(vm @ vm)
        self.work += dt * float((0.5 * (d0 + d1) - 0.5 * (tr0 + tr1)) @ vm)
        self.scale = max(self.scale, abs(E1))

    def residual(self, E: float, damping: float) -> float:
        return (E - self.E0 + damping * self.diss - self.work) / self.scale

    def as_array(self) -> np.ndarray:
        return np.array([self.E0, self.scale, self.diss, self.work])

    @classmethod
    def from_array(cls, x) -> "RunningIdentity":
        return cls(*map(float, x))


@dataclass
class RunState:
    """Everything the time loop carries between steps."""

    state: ModalState
    hist: DelayHistory | None
    forces: StepForces
    running: RunningIdentity


def start_run(stepper: IMEXStepper, state: ModalState, hist: DelayHistory | None,
              running: RunningIdentity | None = None, q: np.ndarray | None = None) -> RunState:
    forces = stepper.forces(state, hist, q=q)
    if running is None:
        running = RunningIdentity.start(plate_energy(stepper.basis, stepper.phys, state.a, state.adot))
    return RunState(state, hist, forces, running)


def run(rs: RunState, stepper: IMEXStepper, n_steps: int, mu: float = 0.01, nu: float = 0.01,
        stride: int = 1, log: IdentityLog | None = None, on_record=None,
        record_first: bool = True, record_last: bool = True):
    """Advance ``n_steps`` from ``rs`` (mutated in place).

    A record is taken at every global step divisible by ``stride``, plus the
    final state when ``record_last``.  Forces are evaluated once per step and
    shared by the stepper, the energies and the identity bookkeeping, so
    splitting a run into chunks reproduces the unsplit run bit for bit.
    Returns (rs, records, log).
    """
    basis, phys = stepper.basis, stepper.phys
    c, sign = stepper.c, stepper.sign
    state, hist, forces, running = rs.state, rs.hist, rs.forces, rs.running
    if log is not None and not log.t:
        log.node(state.t, plate_energy(basis, phys, state.a, state.adot), state.adot,
                 forces.delay(sign), forces.transport)
    records = []
    i = 0
    while True:
        due = state.step % stride == 0 and (i > 0 or record_first)
        if due or (i == n_steps and record_last):
            rec = energies(state, hist, basis, phys, mu, nu, stepper.kernel, q=forces.q)
            rec.diss_accum = c * running.diss
            rec.identity_residual = running.residual(rec.E_pl, c)
            records.append(rec)
            if on_record is not None:
                on_record(state, hist, rec, running)
        if i == n_steps:
            break
        new, new_forces = stepper.step(state, hist, forces)
        d0, d1 = forces.delay(sign), new_forces.delay(sign)
        E1 = plate_energy(basis, phys, new.a, new.adot)
        running.add(stepper.dt, state.adot, new.adot, d0, d1, forces.transport, new_forces.transport, E1)
        if log is not None:
            log.interval(state.adot, new.adot, d0, d1, forces.transport, new_forces.transport)
            log.node(new.t, E1, new.adot, d1, new_forces.transport)
        state, forces = new, new_forces
        rs.state, rs.forces = state, forces
        i += 1
    return rs, records, log


def initial_history(n_slots: int, dt: float, a0: np.ndarray, mode: str = "frozen",
                    slots: np.ndarray | None = None, t0: float = 0.0) -> DelayHistory:
    """History ring at t0 with slot 0 = a0.

    frozen: eta(s) = u0;  zero: eta = 0 on (-t*, 0);  file: ``slots`` gives
    a(t0 - m dt) for m = 1..n_slots-1.
    """
    N = a0.shape[0]
    hist = DelayHistory(n_slots, N, dt, t0)
    arr = np.zeros((n_slots, N))
    if mode == "frozen":
        arr[:] = a0
    elif mode == "zero":
        arr[0] = a0
    elif mode == "file":
        if slots is None or slots.shape != (n_slots - 1, N):
            raise ValueError(f"history file must hold ({n_slots - 1}, {N}) values")
        arr[0] = a0
        arr[1:] = slots
    else:
        raise ValueError(f"unknown history mode {mode!r}")
    return hist.fill(arr)
