"""Scenario configuration: an INI document with a fixed, documented schema.

Every key has a type, a default (or is required) and a unit.  Unknown
sections and keys are errors; validation reports every violation at once.
The canonical text (``ScenarioConfig.to_text``) is what a run directory
embeds, and its hash identifies checkpoints.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

REQUIRED = object()
AUTO = "auto"


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _auto_float(s: str):
    return AUTO if s.strip().lower() == AUTO else float(s)


def _auto_int(s: str):
    return AUTO if s.strip().lower() == AUTO else int(s)


def _float_list(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(",", " ").split())


def _int_list(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _choice(*options):
    def parse(s: str) -> str:
        v = s.strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return v
    parse.__name__ = "one of " + "|".join(options)
    return parse


def _str(s: str) -> str:
    return s.strip()


# section -> key -> (parser, default, unit / description)
SCHEMA: dict[str, dict[str, tuple]] = {
    "domain": {
        "Lx": (float, 1.0, "plate length along the flow (dimensionless)"),
        "Ly": (float, 1.0, "plate width (dimensionless)"),
    },
    "basis": {
        "nx": (int, REQUIRED, "clamped-beam modes along x"),
        "ny": (int, REQUIRED, "clamped-beam modes along y"),
        "quad_order": (_auto_int, AUTO, "Gauss points per direction; auto = 4 max(nx, ny) + 8"),
    },
    "physics": {
        "U": (float, REQUIRED, "unperturbed flow speed (Mach-normalized)"),
        "k": (float, 0.0, "imposed structural damping"),
        "b1": (float, 0.0, "Berger prestress"),
        "b2": (float, REQUIRED, "Berger stiffness (> 0)"),
        "load": (_choice("uniform", "zero"), "uniform", "static pressure p0 shape"),
        "load_amplitude": (float, 1.0, "static pressure magnitude"),
        "delay": (_bool, True, "include the delay potential q"),
        "delay_sign": (int, 1, "sign of q on the right-hand side (+1 or -1)"),
        "damping_scale": (float, 1.0, "multiplier on the (k+1) damping (diagnostic)"),
    },
    "delay": {
        "t_star": (_auto_float, AUTO, "delay horizon (time); auto = computed exit time"),
        "n_theta": (int, 64, "angular trapezoid nodes"),
        "n_s": (_auto_int, AUTO, "delay steps; dt = t_star / n_s"),
    },
    "time": {
        "t_end": (float, REQUIRED, "final time"),
        "dt": (_auto_float, AUTO, "step; must divide t_star"),
        "init": (_choice("eigen", "mode", "random", "zero"), "eigen", "initial displacement shape"),
        "init_index": (_int_list, (0,), "eigen: K-eigenvector indices; mode: tensor indices a b"),
        "init_amplitude": (float, 0.5, "initial displacement amplitude"),
        "init_velocity": (float, 0.0, "initial velocity amplitude (same shape)"),
        "history": (_choice("frozen", "zero", "file"), "frozen", "initial delay history"),
        "history_file": (_str, "", "npy file of shape (n_s, N) when history = file"),
        "berger": (_choice("conservative", "semi-implicit", "explicit"), "conservative",
                   "Berger time discretization"),
        "delay_scheme": (_choice("trapezoid", "ab2"), "trapezoid", "delay time discretization"),
    },
    "output": {
        "stride": (int, 64, "steps between records"),
        "checkpoint_every": (int, 0, "steps between checkpoints (0 = final only)"),
        "write_states": (_bool, True, "write the modal state series"),
        "mu": (float, 0.01, "Lyapunov weight of the delay integrals"),
        "nu": (float, 0.01, "Lyapunov weight of the multiplier term"),
    },
    "run": {
        "seed": (int, 0, "seed for every randomized probe"),
    },
    "quasi": {
        "directions": (int, 5, "perturbation directions"),
        "perturbation": (float, 1e-3, "relative size of the perturbation"),
        "t_end": (_auto_float, AUTO, "horizon; auto = [time] t_end"),
    },
    "defect": {
        "kind": (_choice("modes", "nodes", "averages"), "modes", "functional family"),
        "grid": (_float_list, (1.0, 2.0, 4.0, 8.0), "mode counts (modes) or mesh sizes h"),
        "weak_norm": (_choice("l2", "h"), "l2", "weak norm (h = H^(2-eta))"),
        "eta": (float, 0.5, "exponent in H^(2-eta)"),
        "saturation": (_bool, True, "re-solve at doubled basis resolution"),
    },
    "determine": {
        "kind": (_choice("modes", "nodes", "averages"), "modes", "functional family"),
        "grid": (_float_list, (1.0, 2.0, 4.0, 8.0, 16.0), "mode counts or mesh sizes"),
        "tolerance": (float, 1e-3, "relative decay required of both series"),
        "perturbation": (float, 0.5, "relative size of the second initial state"),
    },
    "dimension": {
        "transient": (_auto_float, AUTO, "discarded initial time; auto = 10 t_star"),
        "samples": (int, 2000, "post-transient samples"),
        "radii": (int, 24, "number of log-spaced radii"),
    },
    "flowtrace": {
        "points": (int, 3, "interior sample points per direction"),
        "t": (_auto_float, AUTO, "evaluation time; auto = 2 t_star"),
        "z": (float, 0.0, "height above the plate"),
        "n_theta": (int, 64, "angular nodes"),
        "n_s": (int, 24, "Gauss nodes per smooth piece of each characteristic"),
        "omega": (float, 3.0, "frequency of the synthetic trajectory"),
        "mode": (int, 0, "K-eigenvector used by the synthetic trajectory"),
    },
}

REQUIRED_SECTIONS = ("domain", "basis", "physics", "time")


@dataclass
class ScenarioConfig:
    values: dict = field(default_factory=dict)  # section -> key -> parsed value
    present: dict = field(default_factory=dict)  # section -> set of keys given explicitly
    source: str = ""

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def has_section(self, section: str) -> bool:
        return section in self.present

    def to_text(self) -> str:
        """Canonical form: every section and key, in schema order."""
        out = []
        for sec, keys in SCHEMA.items():
            out.append(f"[{sec}]")
            for key in keys:
                out.append(f"{key} = {_format(self.values[sec][key])}")
            out.append("")
        return "\n".join(out)

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def replace(self, **changes) -> "ScenarioConfig":
        """Copy with ``section__key=value`` overrides (values pre-parsed)."""
        vals = {s: dict(d) for s, d in self.values.items()}
        present = {s: set(k) for s, k in self.present.items()}
        for name, v in changes.items():
            sec, key = name.split("__", 1)
            if key not in SCHEMA.get(sec, {}):
                raise ConfigError([f"unknown key [{sec}] {key}"])
            vals[sec][key] = v
            present.setdefault(sec, set()).add(key)
        cfg = ScenarioConfig(vals, present, self.source)
        errors = validate(cfg)
        if errors:
            raise ConfigError(errors)
        return cfg


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    return str(v)


def describe() -> str:
    """Every section and key with its default and meaning, as INI comments."""
    out = []
    for sec, keys in SCHEMA.items():
        out.append(f"[{sec}]")
        for key, (_, default, doc) in keys.items():
            shown = "(required)" if default is REQUIRED else _format(default)
            out.append(f"# {key} = {shown}    {doc}")
        out.append("")
    return "\n".join(out)


def parse(text: str) -> ScenarioConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"),
                                   default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from None
    errors = []
    values, present = {}, {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            errors.append(f"unknown section [{sec}]")
    for sec in REQUIRED_SECTIONS:
        if not cp.has_section(sec):
            errors.append(f"missing required section [{sec}]")
    for sec, keys in SCHEMA.items():
        given = dict(cp.items(sec)) if cp.has_section(sec) else {}
        if cp.has_section(sec):
            present[sec] = set(given)
        for key in given:
            if key not in keys:
                errors.append(f"unknown key [{sec}] {key}")
        vals = {}
        for key, (parser, default, _) in keys.items():
            if key in given:
                try:
                    vals[key] = parser(given[key])
                except ValueError as exc:
                    errors.append(f"[{sec}] {key}: {exc}")
                    vals[key] = None
            elif default is REQUIRED:
                if cp.has_section(sec):
                    errors.append(f"missing required key [{sec}] {key}")
                vals[key] = None
            else:
                vals[key] = default
        values[sec] = vals
    cfg = ScenarioConfig(values, present, text)
    if not errors:
        errors = validate(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def load(path) -> ScenarioConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read {p}: {exc}"]) from None
    return parse(text)


def validate(cfg: ScenarioConfig) -> list[str]:
    """Constraint checks that need no numerics (t_star-dependent ones run at setup)."""
    v = cfg.values
    e = []
    d, b, ph, dl, tm, out = (v[s] for s in ("domain", "basis", "physics", "delay", "time", "output"))
    if not d["Lx"] > 0:
        e.append(f"[domain] Lx must be > 0, got {d['Lx']}")
    if not d["Ly"] > 0:
        e.append(f"[domain] Ly must be > 0, got {d['Ly']}")
    for key in ("nx", "ny"):
        if not b[key] >= 1:
            e.append(f"[basis] {key} must be >= 1, got {b[key]}")
    if b["quad_order"] != AUTO and b["nx"] >= 1 and b["ny"] >= 1:
        floor = 2 * max(b["nx"], b["ny"]) + 4
        if b["quad_order"] < floor:
            e.append(f"[basis] quad_order {b['quad_order']} below the floor {floor}")
    if not ph["b2"] > 0:
        e.append(f"[physics] b2 must be > 0, got {ph['b2']}")
    if not ph["U"] >= 0:
        e.append(f"[physics] U must be >= 0, got {ph['U']}")
    if abs(ph["U"] - 1.0) <= 1e-6:
        e.append(f"[physics] U = {ph['U']} is within 1e-6 of 1 (degenerate delay)")
    if not ph["k"] >= 0:
        e.append(f"[physics] k must be >= 0, got {ph['k']}")
    if ph["delay_sign"] not in (1, -1):
        e.append(f"[physics] delay_sign must be 1 or -1, got {ph['delay_sign']}")
    if not ph["damping_scale"] >= 0:
        e.append(f"[physics] damping_scale must be >= 0, got {ph['damping_scale']}")
    if dl["t_star"] != AUTO and not dl["t_star"] > 0:
        e.append(f"[delay] t_star must be > 0, got {dl['t_star']}")
    if dl["n_theta"] < 8:
        e.append(f"[delay] n_theta must be >= 8, got {dl['n_theta']}")
    if dl["n_s"] != AUTO and dl["n_s"] < 2:
        e.append(f"[delay] n_s must be >= 2, got {dl['n_s']}")
    if not tm["t_end"] > 0:
        e.append(f"[time] t_end must be > 0, got {tm['t_end']}")
    if tm["dt"] != AUTO and not tm["dt"] > 0:
        e.append(f"[time] dt must be > 0, got {tm['dt']}")
    if tm["history"] == "file" and not tm["history_file"]:
        e.append("[time] history = file needs history_file")
    n_idx = {"eigen": None, "mode": 2}.get(tm["init"])
    if n_idx == 2 and len(tm["init_index"]) != 2:
        e.append("[time] init = mode needs init_index = a, b")
    if out["stride"] < 1:
        e.append(f"[output] stride must be >= 1, got {out['stride']}")
    if out["checkpoint_every"] < 0:
        e.append(f"[output] checkpoint_every must be >= 0, got {out['checkpoint_every']}")
    if v["quasi"]["directions"] < 1:
        e.append("[quasi] directions must be >= 1")
    if v["dimension"]["samples"] < 2:
        e.append("[dimension] samples must be >= 2")
    if v["flowtrace"]["z"] < 0:
        e.append("[flowtrace] z must be >= 0")
    return e


def resolve_step(cfg: ScenarioConfig, t_star_computed: float, lam_max: float) -> tuple[float, int, list[str]]:
    """(t_star, n_s, errors) from the [delay]/[time] keys.

    n_s = auto picks the smallest n_s with dt <= (2 pi / sqrt(lam_max)) / 20;
    an explicit [time] dt must divide t_star to 1e-9 relative.
    """
    import math

    errors = []
    dl, tm = cfg["delay"], cfg["time"]
    t_star = t_star_computed if dl["t_star"] == AUTO else float(dl["t_star"])
    if dl["t_star"] != AUTO and t_star < t_star_computed * (1 - 1e-9):
        errors.append(f"[delay] t_star = {t_star} is below the exit time {t_star_computed:.10g}")
    n_s = dl["n_s"]
    if tm["dt"] != AUTO:
        ratio = t_star / tm["dt"]
        n_dt = round(ratio)
        if n_dt < 2 or abs(ratio - n_dt) > 1e-9 * ratio:
            errors.append(f"[time] dt = {tm['dt']} does not divide t_star = {t_star:.10g}")
        elif n_s != AUTO and n_s != n_dt:
            errors.append(f"[time] dt implies n_s = {n_dt} but [delay] n_s = {n_s}")
        n_s = n_dt
    if n_s == AUTO:
        target = (2 * math.pi / math.sqrt(lam_max)) / 20
        n_s = max(2, math.ceil(t_star / target))
    return t_star, int(n_s), errors
