"""Case files: ``[SECTION]`` headers with ``key = value`` lines.

``#`` starts a comment.  Session blocks are written ``[SESSION 0]``,
``[SESSION 1]``, ...  Every error carries the line number it refers to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..reference import dealias_order


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _int(s):
    return int(s.strip())


def _float(s):
    v = float(s.strip())
    if math.isnan(v):
        raise ValueError("NaN is not allowed")
    return v


def _bool(s):
    v = s.strip().lower()
    if v in ("true", "yes", "on", "1"):
        return True
    if v in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {s.strip()!r}")


def _ints(s):
    return tuple(int(x) for x in s.replace(",", " ").split())


def _floats(s):
    return tuple(_float(x) for x in s.replace(",", " ").split())


def _str(s):
    v = s.strip()
    if not v:
        raise ValueError("empty value")
    return v


def _choice(*options):
    def parse(s):
        v = s.strip()
        for o in options:
            if v.lower() == o.lower():
                return o
        raise ValueError(f"expected one of {', '.join(options)}, got {v!r}")

    parse.__name__ = "one of " + "/".join(options)
    return parse


def _bc(s):
    parts = s.split()
    kind = parts[0].lower() if parts else ""
    if kind in ("insulated", "symmetry") and len(parts) == 1:
        return (kind,)
    if kind in ("dirichlet", "neumann") and len(parts) == 2:
        return (kind, _float(parts[1]))
    if kind == "interface" and len(parts) == 1:
        return (kind,)
    raise ValueError(f"boundary condition must be 'dirichlet V', 'neumann V', 'insulated', "
                     f"'symmetry' or 'interface', got {s.strip()!r}")


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], str):
            return " ".join(_fmt(x) for x in v)
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


REQUIRED = object()
BC_KEYS = ("bcXmin", "bcXmax", "bcYmin", "bcYmax", "bcZmin", "bcZmax")
SOLVER_KEYS = {
    "residualTol": (_float, 1e-6),
    "maxIterations": (_int, 500),
    "preconditioner": (_choice("pmg", "jacobi", "none"), "jacobi"),
    "pMGSchedule": (_ints, None),
    "chebyshevOrder": (_int, 6),
    "projectionL": (_int, 0),
    "precision": (_choice("FP64", "FP32"), "FP64"),
}

SCHEMA = {
    "GENERAL": {
        "dt": (_float, REQUIRED),
        "numSteps": (_int, REQUIRED),
        "polynomialOrder": (_int, 7),
        "dealiasOrder": (_int, None),
        "integratorOrder": (_int, 2),
        "writeInterval": (_int, 0),
        "statsInterval": (_int, 500),
        "autotune": (_bool, True),
    },
    "MESH": {
        "elements": (_ints, REQUIRED),
        "domain": (_floats, (0.0, 1.0, 0.0, 1.0, 0.0, 1.0)),
        "deformAmplitude": (_float, 0.0),
    },
    "PROBLEM": {
        "type": (_choice("conduction", "taylor_green", "cht", "overset"), "conduction"),
        "Re": (_float, 100.0),
        "Pr": (_float, 1.0),
        "source": (_str, "0"),
        "initialTemperature": (_float, 0.0),
        "solidConductivity": (_float, 1.0),
        "solidRhoCp": (_float, 1.0),
        **{k: (_bc, ("insulated",)) for k in BC_KEYS},
    },
    "PRESSURE": {**SOLVER_KEYS, "preconditioner": (SOLVER_KEYS["preconditioner"][0], "pmg"), "projectionL": (_int, 8)},
    "VELOCITY": dict(SOLVER_KEYS),
    "SCALAR": dict(SOLVER_KEYS),
    "COMM": {
        "ranks": (_int, 1),
        "seed": (_int, 0),
        "scheduler": (_choice("concurrent", "serial"), "concurrent"),
    },
}

SESSION_SCHEMA = {
    "kind": (_choice("fluid_cht", "solid"), "solid"),
    "elements": (_ints, REQUIRED),
    "domain": (_floats, REQUIRED),
    "polynomialOrder": (_int, None),
    "ranks": (_int, 1),
    "extrapolationOrder": (_int, 0),
    "corrections": (_int, None),
    **{k: (_bc, ("insulated",)) for k in BC_KEYS},
}

ORDER = ("GENERAL", "MESH", "PROBLEM", "PRESSURE", "VELOCITY", "SCALAR", "COMM")


@dataclass
class CaseConfig:
    sections: dict = field(default_factory=dict)
    sessions: list = field(default_factory=list)

    def __getitem__(self, name):
        return self.sections[name]

    @property
    def N(self):
        return self.sections["GENERAL"]["polynomialOrder"]

    @property
    def Nq(self):
        v = self.sections["GENERAL"]["dealiasOrder"]
        return dealias_order(self.N) if v is None else v

    def echo(self) -> str:
        """All settings, defaults included, in case-file syntax."""
        return serialize(self)


def _validate(cfg: CaseConfig, lines: dict):
    g = cfg["GENERAL"]
    if not 1 <= g["polynomialOrder"] <= 15:
        raise ConfigError(f"polynomialOrder must be in 1..15, got {g['polynomialOrder']}",
                          lines.get(("GENERAL", "polynomialOrder")))
    if g["integratorOrder"] not in (1, 2, 3):
        raise ConfigError("integratorOrder must be 1, 2 or 3", lines.get(("GENERAL", "integratorOrder")))
    if not g["dt"] > 0:
        raise ConfigError("dt must be positive", lines.get(("GENERAL", "dt")))
    if g["numSteps"] < 0:
        raise ConfigError("numSteps must be >= 0", lines.get(("GENERAL", "numSteps")))
    if g["dealiasOrder"] is not None and g["dealiasOrder"] < g["polynomialOrder"]:
        raise ConfigError("dealiasOrder must be >= polynomialOrder", lines.get(("GENERAL", "dealiasOrder")))
    m = cfg["MESH"]
    if len(m["elements"]) != 3:
        raise ConfigError("elements needs three integers", lines.get(("MESH", "elements")))
    if len(m["domain"]) != 6:
        raise ConfigError("domain needs six numbers (xmin, xmax, ymin, ymax, zmin, zmax)", lines.get(("MESH", "domain")))
    p = cfg["PROBLEM"]
    if not p["Re"] > 0 or not p["Pr"] > 0:
        raise ConfigError("Re and Pr must be positive", lines.get(("PROBLEM", "Re")))
    if cfg["COMM"]["ranks"] < 1:
        raise ConfigError("ranks must be >= 1", lines.get(("COMM", "ranks")))
    for i, s in enumerate(cfg.sessions):
        if len(s["elements"]) != 3 or len(s["domain"]) != 6:
            raise ConfigError(f"session {i}: elements needs 3 values and domain 6", lines.get((f"SESSION {i}", "elements")))
    if p["type"] == "overset" and len(cfg.sessions) < 2:
        raise ConfigError("overset problems need at least two [SESSION n] blocks")
    if len(cfg.sessions) > 3:
        raise ConfigError("at most three sessions are supported")


def parse_config(text: str) -> CaseConfig:
    if not isinstance(text, str):
        raise ConfigError("config text must be a string")
    values: dict = {}
    lines: dict = {}
    section = None
    seen_sections = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno)
            name = " ".join(line[1:-1].split()).upper()
            if name not in SCHEMA and not (name.startswith("SESSION ") and name[8:].isdigit()):
                raise ConfigError(f"unknown section [{name}]", lineno)
            if name in seen_sections:
                raise ConfigError(f"duplicate section [{name}]", lineno)
            seen_sections.add(name)
            section = name
            values.setdefault(section, {})
            continue
        if section is None:
            raise ConfigError("key outside of any section", lineno)
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, val = (x.strip() for x in line.split("=", 1))
        schema = SESSION_SCHEMA if section.startswith("SESSION") else SCHEMA[section]
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        if key in values[section]:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", lineno)
        conv = schema[key][0]
        try:
            values[section][key] = conv(val)
        except (ValueError, TypeError, IndexError, OverflowError) as exc:
            raise ConfigError(f"{key}: cannot read {val!r} as {conv.__name__.lstrip('_')}: {exc}", lineno) from None
        lines[(section, key)] = lineno

    cfg = CaseConfig()
    for name in ORDER:
        given = values.get(name, {})
        out = {}
        for key, (_, default) in SCHEMA[name].items():
            if key in given:
                out[key] = given[key]
            elif default is REQUIRED:
                raise ConfigError(f"missing required key {key!r} in [{name}]")
            else:
                out[key] = default
        cfg.sections[name] = out
    sess = sorted((int(n.split()[1]), n) for n in values if n.startswith("SESSION"))
    for expect, (idx, name) in enumerate(sess):
        if idx != expect:
            raise ConfigError(f"session blocks must be numbered 0, 1, ...; found [SESSION {idx}]")
        given = values[name]
        out = {}
        for key, (_, default) in SESSION_SCHEMA.items():
            if key in given:
                out[key] = given[key]
            elif default is REQUIRED:
                raise ConfigError(f"missing required key {key!r} in [{name}]")
            else:
                out[key] = default
        cfg.sessions.append(out)
    _validate(cfg, lines)
    return cfg


def serialize(cfg: CaseConfig) -> str:
    out = []
    for name in ORDER:
        out.append(f"[{name}]")
        for key, v in cfg.sections[name].items():
            if v is not None:
                out.append(f"{key} = {_fmt(v)}")
        out.append("")
    for i, s in enumerate(cfg.sessions):
        out.append(f"[SESSION {i}]")
        for key, v in s.items():
            if v is not None:
                out.append(f"{key} = {_fmt(v)}")
        out.append("")
    return "\n".join(out)
