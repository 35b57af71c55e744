"""Config-driven runs: scenario assembly, output files and checkpoints.

Run directory layout::

    config.ini       canonical configuration (re-running it reproduces the directory)
    energies.csv     step + EnergyRecord fields, one row per record
    states.csv       step, t, a_0..a_{N-1}, adot_0..adot_{N-1} (when write_states)
    checkpoints/     ckpt-<step>.bin snapshots
    summary.txt      key = value lines

Floats are written with 17 significant digits.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import BasisSet, PlateDomain, cached_basis, project
from .config import AUTO, ConfigError, ScenarioConfig, resolve_step
from .delaykernel import DelayHistory, DelayKernel, DelayParams, cached_kernel, compute_tstar
from .dynamics import (EnergyRecord, IMEXStepper, ModalState, PhysParams, RunningIdentity,
                       RunState, initial_history, run, start_run)

CKPT_MAGIC = b"DPCKPT\0\0"
CKPT_VERSION = 1
FLOAT_FMT = "%.17g"


@dataclass
class Scenario:
    config: ScenarioConfig
    basis: BasisSet
    phys: PhysParams
    kernel: DelayKernel | None
    t_star: float
    n_s: int
    dt: float
    n_steps: int
    stepper: IMEXStepper

    @property
    def N(self) -> int:
        return self.basis.N

    def shape(self) -> np.ndarray:
        """Unit-amplitude initial displacement shape from [time] init / init_index."""
        cfg = self.config["time"]
        N = self.N
        kind = cfg["init"]
        if kind == "zero":
            return np.zeros(N)
        if kind == "mode":
            e = np.zeros(N)
            e[self.basis.index(*cfg["init_index"])] = 1.0
            return e
        lam, V = np.linalg.eigh(self.basis.K)
        if kind == "eigen":
            # weights 1, 1/2, 1/4, ... on the listed K-eigenvectors
            return sum(2.0 ** -n * V[:, i] for n, i in enumerate(cfg["init_index"]))
        rng = np.random.default_rng(self.config.seed)
        xi = rng.standard_normal(N) * np.sqrt(lam[0] / lam)
        return V @ (xi / np.linalg.norm(xi))

    def initial(self, a0: np.ndarray | None = None, v0: np.ndarray | None = None,
                history: np.ndarray | None = None) -> tuple[ModalState, DelayHistory]:
        cfg = self.config["time"]
        s = self.shape()
        a0 = cfg["init_amplitude"] * s if a0 is None else np.asarray(a0, dtype=float)
        v0 = cfg["init_velocity"] * s if v0 is None else np.asarray(v0, dtype=float)
        mode = cfg["history"]
        if history is not None:
            mode = "file"
        elif mode == "file":
            history = np.load(cfg["history_file"])
        hist = initial_history(self.n_s + 1, self.dt, a0, mode, history)
        return ModalState(0.0, a0.copy(), v0.copy(), 0), hist

    def start(self, a0=None, v0=None, history=None) -> RunState:
        state, hist = self.initial(a0, v0, history)
        return start_run(self.stepper, state, hist)


def load_vector(basis: BasisSet, kind: str, amplitude: float) -> np.ndarray:
    if kind == "zero" or amplitude == 0.0:
        return np.zeros(basis.N)
    return project(basis, lambda x, y: np.full(np.shape(x), amplitude))


def setup(cfg: ScenarioConfig, cache_dir=None, overrides: dict | None = None) -> Scenario:
    """Assemble basis, delay horizon, kernel and stepper.  ``overrides`` maps
    PhysParams fields to replacement values (e.g. {"k": 2.0})."""
    d, b, ph, dl, tm = (cfg[s] for s in ("domain", "basis", "physics", "delay", "time"))
    domain = PlateDomain(d["Lx"], d["Ly"])
    qo = None if b["quad_order"] == AUTO else b["quad_order"]
    basis = cached_basis(domain, b["nx"], b["ny"], qo, cache_dir)
    lam_max = float(np.linalg.eigvalsh(basis.K)[-1])
    t_star, n_s, errors = resolve_step(cfg, compute_tstar(ph["U"], domain), lam_max)
    if errors:
        raise ConfigError(errors)
    dt = t_star / n_s
    n_steps = max(1, math.ceil(tm["t_end"] / dt - 1e-9))
    kw = dict(U=ph["U"], k=ph["k"], b1=ph["b1"], b2=ph["b2"],
              p0=load_vector(basis, ph["load"], ph["load_amplitude"]), t_star=t_star,
              delay_enabled=ph["delay"], delay_sign=float(ph["delay_sign"]),
              damping_scale=ph["damping_scale"])
    kw.update(overrides or {})
    phys = PhysParams(**kw)
    kernel = None
    if phys.delay_enabled:
        kernel = cached_kernel(basis, DelayParams(phys.U, t_star, dl["n_theta"], n_s), cache_dir)
    stepper = IMEXStepper(basis, phys, dt, kernel, berger=tm["berger"], delay=tm["delay_scheme"])
    return Scenario(cfg, basis, phys, kernel, t_star, n_s, dt, n_steps, stepper)


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(path, rs: RunState, config_hash: str) -> None:
    st, h = rs.state, rs.hist
    arrays = {
        "a": st.a, "adot": st.adot,
        "f_prev": np.zeros(0) if st.f_prev is None else st.f_prev,
        "q": rs.forces.q,
        "buffer": h.buffer,
        "running": rs.running.as_array(),
    }
    header = {
        "config_hash": config_hash, "t": st.t.hex(), "step": st.step,
        "g_prev": None if st.g_prev is None else float(st.g_prev).hex(),
        "head": h.head, "steps": h.steps, "filled": h.filled, "dt": float(h.dt).hex(),
        "t0": float(h.t0).hex(), "shapes": {k: list(v.shape) for k, v in arrays.items()},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<ii", CKPT_VERSION, len(hb)))
    buf.write(hb)
    for k in sorted(arrays):
        buf.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, stepper: IMEXStepper, config_hash: str | None = None) -> RunState:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<ii", raw[8:16])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    header = json.loads(raw[16:16 + hlen])
    if config_hash is not None and header["config_hash"] != config_hash:
        raise ValueError(f"{path}: checkpoint was written by a different configuration")
    off = 16 + hlen
    arrays = {}
    for k in sorted(header["shapes"]):
        shape = header["shapes"][k]
        n = int(np.prod(shape)) if shape else 1
        arrays[k] = np.frombuffer(raw[off:off + 8 * n], dtype="<f8").reshape(shape).copy()
        off += 8 * n
    f_prev = arrays["f_prev"] if arrays["f_prev"].size else None
    g_prev = None if header["g_prev"] is None else float.fromhex(header["g_prev"])
    state = ModalState(float.fromhex(header["t"]), arrays["a"], arrays["adot"], header["step"], f_prev, g_prev)
    buffer = arrays["buffer"]
    hist = DelayHistory(buffer.shape[0], buffer.shape[1], float.fromhex(header["dt"]), float.fromhex(header["t0"]))
    hist.buffer[:] = buffer
    hist.head, hist.steps, hist.filled = header["head"], header["steps"], header["filled"]
    running = RunningIdentity.from_array(arrays["running"])
    q = arrays["q"] if stepper.phys.delay_enabled else None
    return start_run(stepper, state, hist, running, q=q)


# -- simulation ----------------------------------------------------------

@dataclass
class RunArtifacts:
    scenario: Scenario
    records: list[EnergyRecord] = field(default_factory=list)
    steps: list[int] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    velocities: list[np.ndarray] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    final: RunState | None = None
    summary: dict = field(default_factory=dict)
    out_dir: Path | None = None

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def times(self) -> np.ndarray:
        return self.series("t")


def _fmt(x) -> str:
    return FLOAT_FMT % x


def _energy_row(step: int, rec: EnergyRecord) -> str:
    return ",".join([str(step)] + [_fmt(x) for x in rec.row()])


def _state_row(step: int, st: ModalState) -> str:
    return ",".join([str(step), _fmt(st.t)] + [_fmt(x) for x in st.a] + [_fmt(x) for x in st.adot])


def _truncate_csv(path: Path, last_step: int) -> list[str]:
    lines = path.read_text().splitlines()
    return [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= last_step]


def simulate(cfg: ScenarioConfig, out_dir=None, cache_dir=None, scenario: Scenario | None = None,
             resume=None, stop_step: int | None = None, a0=None, v0=None) -> RunArtifacts:
    """Deterministic run of ``cfg``; writes the run directory when ``out_dir`` is given.

    ``resume`` is a checkpoint path; ``stop_step`` ends the run early (the
    final state is checkpointed either way).
    """
    sc = scenario or setup(cfg, cache_dir)
    out = cfg["output"]
    chash = cfg.hash()
    if resume is not None:
        rs = load_checkpoint(resume, sc.stepper, chash)
    else:
        rs = sc.start(a0, v0)
    first_step = rs.state.step
    end = sc.n_steps if stop_step is None else min(stop_step, sc.n_steps)
    art = RunArtifacts(sc)
    write_states = out["write_states"]

    def on_record(state, hist, rec, running):
        art.records.append(rec)
        art.steps.append(state.step)
        art.states.append(state.a.copy())
        art.velocities.append(state.adot.copy())

    out_path = None
    if out_dir is not None:
        out_path = Path(out_dir)
        (out_path / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out_path / "config.ini").write_text(cfg.to_text())

    every = out["checkpoint_every"] or (end - first_step)
    while True:
        n = min(every, end - rs.state.step)
        last = rs.state.step + n == end
        run(rs, sc.stepper, n, out["mu"], out["nu"], out["stride"], on_record=on_record,
            record_first=rs.state.step == first_step and resume is None, record_last=last)
        if out_path is not None:
            p = out_path / "checkpoints" / f"ckpt-{rs.state.step:09d}.bin"
            save_checkpoint(p, rs, chash)
            art.checkpoints.append(p)
        if last:
            break
    art.final = rs
    art.out_dir = out_path
    if out_path is not None:
        recs = _write_outputs(art, out_path, resume is not None, first_step, write_states)
    else:
        recs = art.records
    art.summary = summarize(sc, recs, rs)
    if out_path is not None:
        write_summary(out_path / "summary.txt", art.summary)
    return art


def read_energies(path) -> list[EnergyRecord]:
    """EnergyRecords from an energies.csv (17 digits round-trip exactly)."""
    lines = Path(path).read_text().splitlines()[1:]
    return [EnergyRecord(*map(float, ln.split(",")[1:])) for ln in lines]


def summarize(sc: Scenario, recs: list[EnergyRecord], final: RunState) -> dict:
    """Summary of a whole run from its complete record series."""
    from .longtime import dissipativity_check

    art_final = final
    s = {
        "N": sc.N, "t_star": sc.t_star, "n_s": sc.n_s, "dt": sc.dt,
        "final_step": art_final.state.step, "final_t": art_final.state.t,
        "final_E_star": recs[-1].E_star if recs else float("nan"),
        "final_E_pl": recs[-1].E_pl if recs else float("nan"),
        "max_identity_residual": max((abs(r.identity_residual) for r in recs), default=0.0),
        "config_hash": sc.config.hash(),
    }
    if len(recs) >= 3:
        rep = dissipativity_check(np.array([r.t for r in recs]), np.array([r.V for r in recs]))
        s.update({"ball_delta": rep.delta, "ball_C": rep.C_fit, "ball_radius": rep.radius,
                  "ball_entry_time": rep.entry_time, "ball_invariant": rep.invariant})
    return s


def _write_outputs(art: RunArtifacts, out: Path, resumed: bool, first_step: int, write_states: bool):
    en = out / "energies.csv"
    header = ",".join(("step",) + EnergyRecord.FIELDS)
    rows = [_energy_row(s, r) for s, r in zip(art.steps, art.records)]
    if resumed and en.exists():
        lines = _truncate_csv(en, first_step) + rows
    else:
        lines = [header] + rows
    en.write_text("\n".join(lines) + "\n")
    if write_states:
        sp = out / "states.csv"
        N = art.scenario.N
        header = ",".join(["step", "t"] + [f"a_{i}" for i in range(N)] + [f"adot_{i}" for i in range(N)])
        rows = [_state_row(s, ModalState(r.t, a, v, s)) for s, r, a, v in
                zip(art.steps, art.records, art.states, art.velocities)]
        if resumed and sp.exists():
            lines = _truncate_csv(sp, first_step) + rows
        else:
            lines = [header] + rows
        sp.write_text("\n".join(lines) + "\n")
    return read_energies(en)


def write_summary(path, summary: dict) -> None:
    lines = []
    for k, v in summary.items():
        lines.append(f"{k} = {_fmt(v) if isinstance(v, float) else v}")
    Path(path).write_text("\n".join(lines) + "\n")
