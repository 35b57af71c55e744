"""Delay potential of the reduced flow: horizon, kernel tensors, history ring.

The modal delay potential is

    q_j(t) = sum_m w_m sum_k C[m, j, k] a_k(t - s_m),

    C[m, j, k] = (1/2pi) sum_q wth_q  < [M_th^2 e_k]_ext(. - shift(th_q, s_m)), e_j >,

with M_th = sin(th) d/dx + cos(th) d/dy and shift = ((U + sin th) s, s cos th).
Because the basis is a tensor product, every overlap integral factors into
1-D shifted overlaps, each integrated exactly on the intersection interval
[0, L] cap [d, L + d] (extension by zero).
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from .basis import BasisSet, BeamData, PlateDomain

KERNEL_MAGIC = b"DPKERNL\0"
KERNEL_VERSION = 1
_KHEADER = struct.Struct("<8s64sddiii")
TSTAR_SAFETY = 1.0 + 1e-9


class DegenerateDelay(ValueError):
    pass


class HistoryUnderfilled(RuntimeError):
    pass


@dataclass(frozen=True)
class DelayParams:
    U: float
    t_star: float
    n_theta: int = 64
    n_s: int = 256

    def __post_init__(self):
        errors = []
        if not self.U >= 0:
            errors.append(f"U must be >= 0, got {self.U}")
        if abs(self.U - 1.0) <= 1e-6:
            errors.append(f"U={self.U} is within 1e-6 of 1 (degenerate)")
        if not self.t_star > 0:
            errors.append(f"t_star must be > 0, got {self.t_star}")
        if self.n_theta < 8:
            errors.append(f"n_theta must be >= 8, got {self.n_theta}")
        if self.n_s < 2:
            errors.append(f"n_s must be >= 2, got {self.n_s}")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def dt(self) -> float:
        return self.t_star / self.n_s


def _horizon_by_direction(theta, U, domain: PlateDomain):
    """Largest exit time over starting points for each direction.

    The trajectory s -> x - s v, v = (U + sin th, cos th), exits the box when
    its first coordinate does; starting from the far corner this takes
    min(Lx/|v_x|, Ly/|v_y|)."""
    vx = np.abs(U + np.sin(theta))
    vy = np.abs(np.cos(theta))
    with np.errstate(divide="ignore"):
        tx = np.where(vx > 0, domain.Lx / np.where(vx > 0, vx, 1.0), np.inf)
        ty = np.where(vy > 0, domain.Ly / np.where(vy > 0, vy, 1.0), np.inf)
    return np.minimum(tx, ty)


def exit_time(x, y, theta, U, domain: PlateDomain):
    """Closed-form exit time of s -> (x - (U + sin th) s, y - s cos th) from the
    closed rectangle, for starting points inside it."""
    vx = -(U + np.sin(theta))
    vy = -np.cos(theta)

    def axis(p, v, L):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(v > 0, (L - p) / v, np.where(v < 0, -p / v, np.inf))
        return t

    return np.minimum(axis(x, vx, domain.Lx), axis(y, vy, domain.Ly))


def compute_tstar(U: float, domain: PlateDomain, grid: int = 1024) -> float:
    if abs(U - 1.0) <= 1e-6:
        raise DegenerateDelay(f"degenerate: U={U} within 1e-6 of 1, exit time unbounded")
    if grid < 64:
        raise ValueError(f"grid must be >= 64, got {grid}")
    theta = np.linspace(0.0, 2 * np.pi, grid, endpoint=False)
    h = _horizon_by_direction(theta, U, domain)
    best = float(h.max())
    step = theta[1] - theta[0]
    # refine every grid-local maximum within 10% of the best
    neighbours = np.maximum(np.roll(h, 1), np.roll(h, -1))
    for i in np.flatnonzero((h >= neighbours) & (h >= 0.9 * best)):
        res = minimize_scalar(
            lambda th: -float(_horizon_by_direction(th, U, domain)),
            bounds=(theta[i] - step, theta[i] + step),
            method="bounded",
            options={"xatol": 1e-13},
        )
        best = max(best, -float(res.fun))
    return best * TSTAR_SAFETY


def shifted_overlaps(beam: BeamData, shifts: np.ndarray, order: int, nq: int) -> np.ndarray:
    """O[s, c, a] = int phi_a^(order)(x - d_s) phi_c(x) dx over [0,L] cap [d_s, L+d_s]."""
    d = np.asarray(shifts, dtype=float).ravel()
    L = beam.length
    lo = np.clip(d, 0.0, L)
    hi = np.clip(L + d, 0.0, L)
    width = np.maximum(hi - lo, 0.0)
    t, w = np.polynomial.legendre.leggauss(nq)
    x = lo[:, None] + 0.5 * width[:, None] * (t[None, :] + 1.0)
    wq = 0.5 * width[:, None] * w[None, :]
    n = beam.n
    test = beam.values(x.ravel(), 0).reshape(len(d), nq, n)
    trial = beam.values((x - d[:, None]).ravel(), order).reshape(len(d), nq, n)
    return np.einsum("sq,sqc,sqa->sca", wq, test, trial)


@dataclass(frozen=True)
class DelayKernel:
    params: DelayParams
    theta: np.ndarray
    theta_w: np.ndarray
    s_nodes: np.ndarray
    s_w: np.ndarray
    C: np.ndarray
    basis_hash: str
    Cw: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.Cw is None:
            cw = self.s_w[:, None, None] * self.C
            cw.setflags(write=False)
            object.__setattr__(self, "Cw", cw)

    @property
    def n_slots(self) -> int:
        return len(self.s_nodes)

    @property
    def dt(self) -> float:
        return self.params.dt


def kernel_slabs(basis: BasisSet, U: float, s: np.ndarray, n_theta: int, nq: int | None = None) -> np.ndarray:
    """C[m] for arbitrary delays s (shape (len(s), N, N))."""
    nq = nq or basis.quad_order
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    s = np.asarray(s, dtype=float)
    sin, cos = np.sin(theta), np.cos(theta)
    dx = (U + sin)[None, :] * s[:, None]
    dy = cos[None, :] * s[:, None]
    shape = (len(s), n_theta, basis.nx, basis.nx)
    Ox = [shifted_overlaps(basis.beam_x, dx, p, nq).reshape(shape) for p in range(3)]
    shape = (len(s), n_theta, basis.ny, basis.ny)
    Oy = [shifted_overlaps(basis.beam_y, dy, p, nq).reshape(shape) for p in range(3)]
    w = np.full(n_theta, 1.0 / n_theta)  # (1/2pi) * trapezoid weight 2pi/n
    C = (
        np.einsum("q,mqca,mqdb->mcdab", w * sin**2, Ox[2], Oy[0])
        + np.einsum("q,mqca,mqdb->mcdab", 2.0 * w * sin * cos, Ox[1], Oy[1])
        + np.einsum("q,mqca,mqdb->mcdab", w * cos**2, Ox[0], Oy[2])
    )
    return C.reshape(len(s), basis.N, basis.N)


def build_kernel(basis: BasisSet, params: DelayParams, nq: int | None = None) -> DelayKernel:
    n_s = params.n_s
    dt = params.dt
    s = dt * np.arange(n_s + 1)
    nq = nq or basis.quad_order
    # shift per s-step measured in quadrature cells of the finer direction
    cell = min(basis.domain.Lx, basis.domain.Ly) / basis.quad_order
    if (1.0 + params.U) * dt > 4 * cell:
        warnings.warn(
            f"insufficient quadrature: shift per delay node {(1 + params.U) * dt:.3g} exceeds 4 cells ({cell:.3g})",
            stacklevel=2,
        )
    # chunk over s to bound memory
    chunk = max(1, int(2e6 // max(1, params.n_theta * max(basis.nx, basis.ny) ** 2 * nq)))
    C = np.concatenate(
        [kernel_slabs(basis, params.U, s[i:i + chunk], params.n_theta, nq) for i in range(0, len(s), chunk)]
    )
    sw = np.full(n_s + 1, dt)
    sw[0] = sw[-1] = 0.5 * dt
    theta = 2 * np.pi * np.arange(params.n_theta) / params.n_theta
    thw = np.full(params.n_theta, 2 * np.pi / params.n_theta)
    arrays = [theta, thw, s, sw, C]
    for a in arrays:
        a.setflags(write=False)
    return DelayKernel(params, *arrays, basis_hash=basis.fingerprint())


class DelayHistory:
    """Ring of the last ``n_slots`` displacement coefficient vectors.

    Slot m holds a(t_head - m*dt).  The head time is derived from an integer
    step counter, so timestamps never drift.
    """

    def __init__(self, n_slots: int, N: int, dt: float, t0: float = 0.0):
        self.buffer = np.zeros((n_slots, N))
        self.dt = float(dt)
        self.t0 = float(t0)
        self.head = 0
        self.steps = 0
        self.filled = 0

    @property
    def n_slots(self) -> int:
        return self.buffer.shape[0]

    @property
    def t_head(self) -> float:
        return self.t0 + self.steps * self.dt

    def push(self, a) -> "DelayHistory":
        self.head = (self.head - 1) % self.n_slots
        self.buffer[self.head] = a
        self.filled = min(self.filled + 1, self.n_slots)
        self.steps += 1
        return self

    def fill(self, slots: np.ndarray) -> "DelayHistory":
        """Set every slot at once: ``slots[m]`` becomes a(t_head - m*dt)."""
        slots = np.asarray(slots, dtype=float)
        if slots.shape != self.buffer.shape:
            raise ValueError(f"history shape {slots.shape} != {self.buffer.shape}")
        self.buffer[:] = slots
        self.head = 0
        self.filled = self.n_slots
        return self

    def slot(self, m: int) -> np.ndarray:
        return self.buffer[(self.head + m) % self.n_slots]

    def ordered(self) -> np.ndarray:
        idx = (self.head + np.arange(self.n_slots)) % self.n_slots
        return self.buffer[idx]

    @property
    def full(self) -> bool:
        return self.filled == self.n_slots

    def copy(self) -> "DelayHistory":
        h = DelayHistory.__new__(DelayHistory)
        h.buffer = self.buffer.copy()
        h.dt, h.t0, h.head, h.steps, h.filled = self.dt, self.t0, self.head, self.steps, self.filled
        return h


def push_history(hist: DelayHistory, a) -> DelayHistory:
    return hist.push(a)


def new_history(kernel: DelayKernel, N: int, t0: float = 0.0) -> DelayHistory:
    return DelayHistory(kernel.n_slots, N, kernel.dt, t0)


def eval_q(kernel: DelayKernel, hist: DelayHistory) -> np.ndarray:
    if not hist.full:
        raise HistoryUnderfilled(f"history underfilled: {hist.filled}/{hist.n_slots} slots")
    if hist.n_slots != kernel.n_slots or abs(hist.dt - kernel.dt) > 1e-12 * kernel.dt:
        raise ValueError("history grid does not match kernel s-grid")
    return np.tensordot(kernel.Cw, hist.ordered(), axes=([0, 2], [0, 1]))


def eval_q_slots(kernel: DelayKernel, slots: np.ndarray) -> np.ndarray:
    """Same contraction on an explicit (n_slots, N) array of history values."""
    return np.tensordot(kernel.Cw, np.asarray(slots), axes=([0, 2], [0, 1]))


def save_kernel(kernel: DelayKernel, path) -> None:
    p = kernel.params
    with open(path, "wb") as fh:
        fh.write(_KHEADER.pack(KERNEL_MAGIC, kernel.basis_hash.encode(), p.U, p.t_star,
                               p.n_theta, p.n_s, KERNEL_VERSION))
        fh.write(np.ascontiguousarray(kernel.C, dtype="<f8").tobytes())


def load_kernel(path, basis: BasisSet, params: DelayParams) -> DelayKernel:
    raw = Path(path).read_bytes()
    magic, bhash, U, t_star, n_theta, n_s, version = _KHEADER.unpack(raw[: _KHEADER.size])
    if magic != KERNEL_MAGIC or version != KERNEL_VERSION:
        raise ValueError("not a delay-kernel cache file")
    if bhash.decode() != basis.fingerprint():
        raise ValueError("kernel cache basis hash mismatch")
    if (U, t_star, n_theta, n_s) != (params.U, params.t_star, params.n_theta, params.n_s):
        raise ValueError(f"kernel cache parameter mismatch: {(U, t_star, n_theta, n_s)}")
    N = basis.N
    C = np.frombuffer(raw[_KHEADER.size:], dtype="<f8").reshape(n_s + 1, N, N).copy()
    sw = np.full(n_s + 1, params.dt)
    sw[0] = sw[-1] = 0.5 * params.dt
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    thw = np.full(n_theta, 2 * np.pi / n_theta)
    s = params.dt * np.arange(n_s + 1)
    for a in (theta, thw, s, sw, C):
        a.setflags(write=False)
    return DelayKernel(params, theta, thw, s, sw, C, basis_hash=basis.fingerprint())


def cached_kernel(basis: BasisSet, params: DelayParams, cache_dir=None) -> DelayKernel:
    if cache_dir is None:
        return build_kernel(basis, params)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = hashlib.sha256(
        f"{basis.fingerprint()}|{params.U!r}|{params.t_star!r}|{params.n_theta}|{params.n_s}".encode()
    ).hexdigest()[:16]
    path = cache_dir / f"kernel-{key}.bin"
    if path.exists():
        return load_kernel(path, basis, params)
    kernel = build_kernel(basis, params)
    save_kernel(kernel, path)
    return kernel
