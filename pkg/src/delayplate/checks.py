"""Cheap invariant suite behind ``delayplate check``.

Each check returns ``(name, ok, detail)``.  They use small bases and short
runs so the whole suite finishes in about a minute; the full-size versions
live in the test suite.
"""

from __future__ import annotations

import numpy as np

from .basis import PlateDomain, cached_basis
from .config import ScenarioConfig


def brute_tstar(U: float, domain: PlateDomain, n_theta: int = 20000, n_pts: int = 21) -> float:
    """Largest exit time by exhaustive search over a point grid and a fine
    angle grid, marching each ray wall by wall."""
    x = np.linspace(0.0, domain.Lx, n_pts)
    y = np.linspace(0.0, domain.Ly, n_pts)
    th = np.linspace(0.0, 2 * np.pi, n_theta, endpoint=False)
    X, Y, T = np.meshgrid(x, y, th, indexing="ij")
    vx, vy = U + np.sin(T), np.cos(T)
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(vx > 0, X / vx, np.where(vx < 0, (X - domain.Lx) / vx, np.inf))
        ty = np.where(vy > 0, Y / vy, np.where(vy < 0, (Y - domain.Ly) / vy, np.inf))
    return float(np.minimum(tx, ty).max())


def check_basis(basis):
    M, K = basis.M, basis.K
    sym = max(np.abs(M - M.T).max(), np.abs(K - K.T).max() / np.abs(K).max())
    lam = np.linalg.eigvalsh(K)
    ok = sym <= 1e-12 and lam[0] > 0 and np.linalg.eigvalsh(M)[0] > 0
    return "mass and stiffness symmetric positive definite", ok, f"asym {sym:.1e}, lam_min {lam[0]:.4g}"


def check_tstar(domain):
    from .delaykernel import compute_tstar

    worst = 0.0
    for U in (0.0, 0.3, 0.5, 2.0):
        worst = max(worst, abs(compute_tstar(U, domain) / brute_tstar(U, domain) - 1.0))
    closed = abs(compute_tstar(0.0, domain) - np.hypot(domain.Lx, domain.Ly)) / np.hypot(domain.Lx, domain.Ly)
    ok = worst <= 1e-3 and closed <= 1e-6
    return "delay horizon matches the brute-force oracle", ok, f"max rel err {worst:.1e}"


def check_kernel(basis, rng):
    from .delaykernel import DelayParams, build_kernel, compute_tstar, eval_q_slots

    k = build_kernel(basis, DelayParams(0.5, compute_tstar(0.5, basis.domain), 32, 32))
    c0 = np.abs(k.C[0] + 0.5 * basis.G).max()
    tail = np.abs(k.C[-1]).max() / np.abs(k.C).max()
    h1, h2 = rng.standard_normal((2, k.n_slots, basis.N))
    a, b = rng.standard_normal(2)
    lhs = eval_q_slots(k, a * h1 + b * h2)
    lin = np.abs(lhs - a * eval_q_slots(k, h1) - b * eval_q_slots(k, h2)).max() / np.abs(lhs).max()
    ok = c0 <= 1e-6 and tail <= 1e-6 and lin <= 1e-12
    return "kernel: C[0] = -G/2, vanishing at t*, linear", ok, f"{c0:.1e} / {tail:.1e} / {lin:.1e}"


def check_berger(basis, rng):
    from .dynamics import berger_force, berger_potential

    worst = 0.0
    for _ in range(20):
        a = rng.standard_normal(basis.N) * 0.1
        d = rng.standard_normal(basis.N)
        h = 1e-5
        fd = (berger_potential(basis, a + h * d, 0.3, 1.0) - berger_potential(basis, a - h * d, 0.3, 1.0)) / (2 * h)
        an = berger_force(basis, a, 0.3, 1.0) @ d
        worst = max(worst, abs(fd - an) / max(abs(an), 1e-300))
    return "Berger force is the gradient of its potential", worst <= 1e-6, f"max rel err {worst:.1e}"


def _small_config(cfg: ScenarioConfig, **kw) -> ScenarioConfig:
    base = dict(basis__nx=3, basis__ny=3, delay__n_s=64, delay__n_theta=32, output__stride=16,
                output__checkpoint_every=0, time__t_end=2.0)
    base.update(kw)
    return cfg.replace(**base)


def check_conservation(cfg, cache):
    from .dynamics import run
    from .scenario import setup

    c = _small_config(cfg, physics__U=0.0, physics__k=0.0, physics__delay=False, physics__load="zero",
                      physics__damping_scale=0.0, physics__b1=0.0)
    sc = setup(c, cache)
    _, recs, _ = run(sc.start(), sc.stepper, 2000, stride=100)
    E = np.array([r.E_pl for r in recs])
    drift = float(np.abs(E / E[0] - 1.0).max())
    return "conservative linear run keeps the plate energy", drift <= 1e-5, f"drift {drift:.1e}"


def check_zero(cfg, cache):
    from .dynamics import run
    from .scenario import setup

    sc = setup(_small_config(cfg, physics__load="zero", time__init="zero", time__history="zero"), cache)
    rs, recs, _ = run(sc.start(), sc.stepper, 200, stride=50)
    ok = not np.any(rs.state.a) and not np.any(rs.state.adot)
    return "zero data gives the zero solution", ok, ""


def check_identity(cfg, cache):
    from .dynamics import run
    from .scenario import setup

    sc = setup(_small_config(cfg), cache)
    _, recs, _ = run(sc.start(), sc.stepper, 4 * sc.n_s, stride=sc.n_s)
    scale = max(abs(recs[0].E_pl), 1e-300)
    res = max(abs(r.identity_residual) for r in recs) / scale
    return "discrete energy identity holds", res <= 1e-3, f"rel residual {res:.1e}"


def check_determinism(cfg, cache):
    import tempfile
    from pathlib import Path

    from .scenario import simulate

    c = _small_config(cfg, output__checkpoint_every=64)
    with tempfile.TemporaryDirectory() as tmp:
        outs = []
        for name in ("a", "b"):
            simulate(c, Path(tmp) / name, cache)
            outs.append({p.name: p.read_bytes() for p in (Path(tmp) / name).rglob("*") if p.is_file()})
        same = outs[0] == outs[1]
    return "rerun of a config is byte-identical", same, ""


def check_decomposition(cfg, cache):
    from .longtime import decomposition_check, difference_experiment
    from .scenario import setup

    sc = setup(_small_config(cfg), cache)
    x1 = sc.initial()[0]
    res = difference_experiment(sc, (x1.a, x1.adot), (1.2 * x1.a, x1.adot.copy()), 64, 1, fit=False)
    r = float(decomposition_check(sc.basis, res.a1, res.a2, sc.dt, sc.phys.b1, 0.0).max())
    return "decomposition identity exact without the cubic term", r <= 1e-8, f"max residual {r:.1e}"


def check_defects(basis, rng):
    from .functionals import completeness_defect, make_modes, make_nodes, modal_pencil

    lam, _ = modal_pencil(basis)
    err = max(abs(completeness_defect(make_modes(basis, n), basis).epsilon - lam[n] ** -0.5)
              for n in range(1, basis.N))
    fs = make_nodes(basis, 0.5)
    eps = completeness_defect(fs, basis).epsilon
    mono = True
    for _ in range(5):
        fs = fs.augment(rng.standard_normal((1, basis.N)))
        e2 = completeness_defect(fs, basis).epsilon
        mono &= e2 <= eps + 1e-12
        eps = e2
    return "modes defect oracle and monotone augmentation", err <= 1e-10 and mono, f"oracle err {err:.1e}"


def check_dimension(rng):
    from .longtime import correlation_dimension, synthetic_circle, synthetic_torus

    fixed = correlation_dimension(np.zeros((200, 4))).dimension
    c = correlation_dimension(synthetic_circle(1000, 6, rng)).dimension
    t = correlation_dimension(synthetic_torus(2000, 6, rng)).dimension
    ok = fixed == 0.0 and abs(c - 1.0) <= 0.1 and abs(t - 2.0) <= 0.2
    return "correlation dimension of point, circle, torus", ok, f"{fixed:.3f} / {c:.3f} / {t:.3f}"


def check_flowtrace(basis):
    from .delaykernel import compute_tstar
    from .flowtrace import interior_points, reduction_residual, standing_mode

    U = 0.5
    ts = compute_tstar(U, basis.domain)
    _, V = np.linalg.eigh(basis.K)
    traj = standing_mode(basis, V[:, 0], 3.0)
    pts = interior_points(basis, 2)
    r = float(reduction_residual(pts, 2 * ts, traj, U, ts, 32, 12).residual.max())
    return "flow trace reduces to the delay potential", r <= 1e-3, f"max residual {r:.1e}"


def run_checks(cfg: ScenarioConfig, cache_dir=None):
    d = cfg["domain"]
    domain = PlateDomain(d["Lx"], d["Ly"])
    basis = cached_basis(domain, 3, 3, cache_dir=cache_dir)
    rng = np.random.default_rng(cfg.seed)
    yield check_basis(basis)
    yield check_tstar(domain)
    yield check_kernel(basis, rng)
    yield check_berger(basis, rng)
    yield check_conservation(cfg, cache_dir)
    yield check_zero(cfg, cache_dir)
    yield check_identity(cfg, cache_dir)
    yield check_determinism(cfg, cache_dir)
    yield check_decomposition(cfg, cache_dir)
    yield check_defects(basis, rng)
    yield check_dimension(rng)
    yield check_flowtrace(basis)
