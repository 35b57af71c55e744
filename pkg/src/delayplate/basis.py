"""Clamped-plate Galerkin basis on a rectangle.

Basis functions are tensor products e_(a,b)(x, y) = phi_a(x) psi_b(y) of
L2-normalised clamped-clamped beam eigenfunctions.  Flat mode index is
``a * ny + b``.  All bilinear-form matrices are assembled by Gauss-Legendre
quadrature on the tensor grid; separability lets the 2-D forms be written as
Kronecker products of 1-D quadrature matrices.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

CACHE_MAGIC = b"DPBASIS\0"
CACHE_VERSION = 1
_HEADER = struct.Struct("<8sddiiii")


class InsufficientQuadrature(ValueError):
    pass


@dataclass(frozen=True)
class PlateDomain:
    Lx: float = 1.0
    Ly: float = 1.0

    def __post_init__(self):
        if not (self.Lx > 0 and self.Ly > 0):
            raise ValueError(f"plate dimensions must be positive, got Lx={self.Lx}, Ly={self.Ly}")

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.Lx, self.Ly))

    def contains(self, x, y, tol: float = 0.0):
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= -tol) & (x <= self.Lx + tol) & (y >= -tol) & (y <= self.Ly + tol)


def beam_roots(n: int, tol: float = 1e-13) -> np.ndarray:
    """First ``n`` positive roots of cos(b) cosh(b) = 1.

    Uses the scaled residual cos(b) - sech(b), which never overflows.  The
    j-th root lies in (j*pi, (j+1)*pi), centred on the seed (j + 1/2)*pi, and
    the residual is monotone there, so plain bisection is safe.
    """
    roots = np.empty(n)
    for j in range(1, n + 1):
        lo, hi = j * np.pi, (j + 1) * np.pi
        flo = np.cos(lo) - 1.0 / np.cosh(lo)
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            fm = np.cos(mid) - 1.0 / np.cosh(mid)
            if (fm > 0) == (flo > 0):
                lo, flo = mid, fm
            else:
                hi = mid
        roots[j - 1] = 0.5 * (lo + hi)
    return roots


@dataclass(frozen=True)
class BeamData:
    """Per-direction clamped-beam records: roots beta_j, wavenumbers beta_j/L,
    and the coefficients of the overflow-free representation."""

    length: float
    beta: np.ndarray
    kappa: np.ndarray
    sigma: np.ndarray
    amp_grow: np.ndarray
    amp_decay: np.ndarray
    norm: float

    @classmethod
    def build(cls, length: float, n: int) -> "BeamData":
        beta = beam_roots(n)
        eb = np.exp(-beta)
        # phi(xi) = A e^{xi-beta} + B e^{-xi} - cos(xi) + sigma sin(xi)
        A = (np.cos(beta) - np.sin(beta) - eb) / (1.0 - eb**2 - 2.0 * eb * np.sin(beta))
        sigma = 1.0 - 2.0 * A * eb
        B = 1.0 - A * eb
        arrays = [beta, beta / length, sigma, A, B]
        for a in arrays:
            a.setflags(write=False)
        return cls(length, *arrays, norm=1.0 / np.sqrt(length))

    @property
    def n(self) -> int:
        return len(self.beta)

    def values(self, x, order: int = 0) -> np.ndarray:
        """Derivative of the given order of every mode at ``x``; shape (len(x), n).

        No masking: callers decide what happens outside [0, L].
        """
        x = np.asarray(x, dtype=float).reshape(-1, 1)
        k = self.kappa[None, :]
        xi = k * x
        grow = self.amp_grow * np.exp(xi - self.beta)
        decay = self.amp_decay * np.exp(-xi)
        c, s = np.cos(xi), np.sin(xi)
        sg = self.sigma
        if order == 0:
            v = grow + decay - c + sg * s
        elif order == 1:
            v = grow - decay + s + sg * c
        elif order == 2:
            v = grow + decay + c - sg * s
        elif order == 3:
            v = grow - decay - s - sg * c
        else:
            raise ValueError(f"beam derivative order {order} not supported")
        return self.norm * v * k**order


@dataclass(frozen=True)
class QuadRule:
    x: np.ndarray
    wx: np.ndarray
    y: np.ndarray
    wy: np.ndarray

    @property
    def order(self) -> int:
        return len(self.x)


def gauss_legendre(n: int, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    t, w = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (b - a)
    return a + half * (t + 1.0), half * w


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BasisSet:
    domain: PlateDomain
    nx: int
    ny: int
    beam_x: BeamData
    beam_y: BeamData
    quad: QuadRule
    M: np.ndarray
    K: np.ndarray
    G: np.ndarray
    Dx: np.ndarray
    _fingerprint: str = field(default="", compare=False, repr=False)

    @property
    def N(self) -> int:
        return self.nx * self.ny

    @property
    def quad_order(self) -> int:
        return self.quad.order

    def fingerprint(self) -> str:
        """sha256 over the defining tuple and the assembled matrices."""
        if not self._fingerprint:
            h = hashlib.sha256()
            h.update(_header_bytes(self.domain, self.nx, self.ny, self.quad_order))
            for a in (self.M, self.K, self.G, self.Dx):
                h.update(a.tobytes())
            object.__setattr__(self, "_fingerprint", h.hexdigest())
        return self._fingerprint

    def index(self, a: int, b: int) -> int:
        return a * self.ny + b


def quad_floor(nx: int, ny: int) -> int:
    return 2 * max(nx, ny) + 4


def quad_default(nx: int, ny: int) -> int:
    """Default order: at the floor, integration by parts between G and the
    curvature forms only holds to ~1e-4, because the cosh/sinh parts of the
    beam functions are not polynomial.  Doubling it brings this to roundoff."""
    return 4 * max(nx, ny) + 8


def build_basis(domain: PlateDomain, nx: int, ny: int, quad_order: int | None = None) -> BasisSet:
    if nx < 1 or ny < 1:
        raise ValueError(f"mode counts must be >= 1, got nx={nx}, ny={ny}")
    floor = quad_floor(nx, ny)
    if quad_order is None:
        quad_order = quad_default(nx, ny)
    if quad_order < floor:
        raise InsufficientQuadrature(
            f"insufficient quadrature: order {quad_order} < floor {floor} for nx={nx}, ny={ny}"
        )
    bx = BeamData.build(domain.Lx, nx)
    by = BeamData.build(domain.Ly, ny)
    qx, wx = gauss_legendre(quad_order, 0.0, domain.Lx)
    qy, wy = gauss_legendre(quad_order, 0.0, domain.Ly)
    quad = QuadRule(_frozen(qx), _frozen(wx), _frozen(qy), _frozen(wy))

    def forms(beam, q, w):
        v0, v1, v2 = (beam.values(q, k) for k in range(3))
        mass = v0.T @ (w[:, None] * v0)
        stiff = v1.T @ (w[:, None] * v1)
        bend = v2.T @ (w[:, None] * v2)
        curv = v2.T @ (w[:, None] * v0)  # [a, c] = int phi_a'' phi_c
        drift = v1.T @ (w[:, None] * v0)  # [a, c] = int phi_a' phi_c
        return mass, stiff, bend, curv, drift

    Mx, Sx, Bx, Tx, Px = forms(bx, qx, wx)
    My, Sy, By, Ty, _ = forms(by, qy, wy)
    M = np.kron(Mx, My)
    G = np.kron(Sx, My) + np.kron(Mx, Sy)
    K = np.kron(Bx, My) + np.kron(Mx, By) + np.kron(Tx, Ty.T) + np.kron(Tx.T, Ty)
    Dx = np.kron(Px, My)
    return BasisSet(domain, nx, ny, bx, by, quad, _frozen(M), _frozen(K), _frozen(G), _frozen(Dx))


def _split_deriv(deriv) -> tuple[int, int]:
    dx, dy = (int(d) for d in deriv)
    if dx < 0 or dy < 0 or dx + dy > 2:
        raise ValueError(f"derivative multi-index {deriv} must have total order <= 2")
    return dx, dy


def basis_values(basis: BasisSet, points, deriv=(0, 0)) -> np.ndarray:
    """Matrix E[p, k] = (d^deriv e_k)(points[p]); rows outside the closed
    rectangle are zero (extension by zero)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    dx, dy = _split_deriv(deriv)
    inside = basis.domain.contains(pts[:, 0], pts[:, 1])
    X = basis.beam_x.values(pts[:, 0], dx)
    Y = basis.beam_y.values(pts[:, 1], dy)
    E = (X[:, :, None] * Y[:, None, :]).reshape(len(pts), -1)
    E[~inside] = 0.0
    return E


def evaluate(basis: BasisSet, coeffs, points, deriv=(0, 0)) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    return basis_values(basis, points, deriv) @ coeffs


def quad_grid(basis: BasisSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tensor quadrature nodes as 2-D arrays (indexing='ij') and weights."""
    X, Y = np.meshgrid(basis.quad.x, basis.quad.y, indexing="ij")
    W = np.outer(basis.quad.wx, basis.quad.wy)
    return X, Y, W


def project(basis: BasisSet, f: Callable) -> np.ndarray:
    """Coefficients <f, e_k> by the stored tensor quadrature; ``f(X, Y)`` must
    accept broadcastable arrays."""
    X, Y, W = quad_grid(basis)
    F = np.broadcast_to(np.asarray(f(X, Y), dtype=float), X.shape)
    if not np.all(np.isfinite(F)):
        raise ValueError("projected function has non-finite samples at quadrature nodes")
    Phi = basis.beam_x.values(basis.quad.x, 0)
    Psi = basis.beam_y.values(basis.quad.y, 0)
    return (Phi.T @ (W * F) @ Psi).ravel()


def quad_values(basis: BasisSet, deriv=(0, 0)) -> np.ndarray:
    """E[p, k] on the flattened tensor quadrature grid (row-major in (x, y))."""
    dx, dy = _split_deriv(deriv)
    X = basis.beam_x.values(basis.quad.x, dx)
    Y = basis.beam_y.values(basis.quad.y, dy)
    nq = basis.quad_order
    return (X[:, None, :, None] * Y[None, :, None, :]).reshape(nq * nq, -1)


def _header_bytes(domain: PlateDomain, nx: int, ny: int, quad_order: int) -> bytes:
    return _HEADER.pack(CACHE_MAGIC, domain.Lx, domain.Ly, nx, ny, quad_order, CACHE_VERSION)


def save_basis(basis: BasisSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_header_bytes(basis.domain, basis.nx, basis.ny, basis.quad_order))
        for a in (basis.M, basis.K, basis.G, basis.Dx):
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_basis(path, domain: PlateDomain, nx: int, ny: int, quad_order: int) -> BasisSet:
    """Load a cached basis; refuses on any header mismatch."""
    raw = Path(path).read_bytes()
    expected = _header_bytes(domain, nx, ny, quad_order)
    if raw[: _HEADER.size] != expected:
        got = _HEADER.unpack(raw[: _HEADER.size]) if len(raw) >= _HEADER.size else None
        raise ValueError(f"basis cache header mismatch: expected {_HEADER.unpack(expected)}, got {got}")
    N = nx * ny
    body = np.frombuffer(raw[_HEADER.size:], dtype="<f8")
    if body.size != 4 * N * N:
        raise ValueError("basis cache truncated")
    M, K, G, Dx = (_frozen(body[i * N * N:(i + 1) * N * N].reshape(N, N)) for i in range(4))
    bx = BeamData.build(domain.Lx, nx)
    by = BeamData.build(domain.Ly, ny)
    qx, wx = gauss_legendre(quad_order, 0.0, domain.Lx)
    qy, wy = gauss_legendre(quad_order, 0.0, domain.Ly)
    quad = QuadRule(_frozen(qx), _frozen(wx), _frozen(qy), _frozen(wy))
    return BasisSet(domain, nx, ny, bx, by, quad, M, K, G, Dx)


def cached_basis(domain: PlateDomain, nx: int, ny: int, quad_order: int | None = None,
                 cache_dir=None) -> BasisSet:
    """build_basis with an optional on-disk cache keyed by the defining tuple."""
    if quad_order is None:
        quad_order = quad_default(nx, ny)
    if cache_dir is None:
        return build_basis(domain, nx, ny, quad_order)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = hashlib.sha256(_header_bytes(domain, nx, ny, quad_order)).hexdigest()[:16]
    path = cache_dir / f"basis-{key}.bin"
    if path.exists():
        return load_basis(path, domain, nx, ny, quad_order)
    basis = build_basis(domain, nx, ny, quad_order)
    save_basis(basis, path)
    return basis
