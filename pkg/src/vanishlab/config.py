"""Typed, sectioned run configuration.

Every entry carries its type next to the key::

    [run]
    kind:str = sweep-nu
    seed:int = 7

    [sweep]
    nus:floats = 0.0625, 0.03125

Supported types are ``int``, ``float``, ``bool``, ``str``, ``ints`` and
``floats`` (comma separated, possibly empty).  Keys are case sensitive.
Unknown sections or keys, keys that do not apply to the chosen experiment,
field or datum, and type mismatches are rejected with the key path.
:func:`echo` writes the fully resolved configuration back in the same
format; parsing an echo gives the same configuration.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

KINDS = ("solve", "sweep-nu", "sweep-delta", "duality", "dissipation", "depauw-demo", "mc-estimate",
         "check-weak", "backward-probe")
FIELDS = ("zero", "shear", "stream", "dyadic-exchange")
DATA = ("checkerboard", "single-mode", "constant", "file")
TYPES = ("int", "float", "bool", "str", "ints", "floats")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is ``section.key`` (or a section)."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _ladder(lo: int, hi: int) -> tuple[float, ...]:
    return tuple(2.0 ** -i for i in range(lo, hi + 1))


@dataclass(frozen=True)
class _Key:
    type: str
    default: Any  # a value, or a callable of the partially resolved config
    applies: Callable[[dict], bool] = lambda c: True
    check: Callable[[Any], str | None] = lambda v: None


def _kind(*kinds):
    return lambda c: c["run"]["kind"] in kinds


def _ftype(*types):
    return lambda c: c["field"]["type"] in types


def _dtype(*types):
    return lambda c: c["datum"].get("type") in types


def _one_of(options):
    return lambda v: None if v in options else f"must be one of {', '.join(options)}"


def _positive(v):
    return None if v > 0 else "must be > 0"


def _nonneg(v):
    return None if v >= 0 else "must be >= 0"


def _pow2(v):
    return None if v >= 4 and not v & (v - 1) else "must be a power of two >= 4"


def _all_positive(v):
    return None if all(x > 0 for x in v) else "entries must be > 0"


_SWEEPS = ("sweep-nu", "sweep-delta", "dissipation")
_FORWARD = ("solve", "sweep-nu", "sweep-delta", "dissipation", "duality", "mc-estimate", "check-weak")


def _default_n_max(c):
    n = c["grid"]["n"]
    return max(1, n.bit_length() - 1 - 2)


SCHEMA: dict[str, dict[str, _Key]] = {
    "run": {
        "kind": _Key("str", None, check=_one_of(KINDS)),
        "seed": _Key("int", 0, check=_nonneg),
        "output": _Key("str", "vanishlab-out"),
    },
    "grid": {
        "n": _Key("int", 64, check=_pow2),
    },
    "field": {
        "type": _Key("str", lambda c: "dyadic-exchange" if c["run"]["kind"] == "depauw-demo" else "zero",
                     check=_one_of(FIELDS)),
        "horizon": _Key("float", 1.0, check=_positive),
        "n_min": _Key("int", 1, _ftype("dyadic-exchange"), check=lambda v: None if v >= 1 else "must be >= 1"),
        "n_max": _Key("int", _default_n_max, _ftype("dyadic-exchange"), check=_positive),
        "orientation": _Key("str", "xy", _ftype("dyadic-exchange"), check=_one_of(("xy", "yx"))),
        "axis": _Key("int", 0, _ftype("shear"), check=_one_of((0, 1))),
        "amplitude": _Key("float", lambda c: 1.0 if c["field"]["type"] == "shear" else 1.0 / (2.0 * math.pi),
                          _ftype("shear", "stream")),
        "k": _Key("int", 1, _ftype("shear", "stream"), check=_positive),
        "phase": _Key("float", 0.0, _ftype("shear")),
        "delta": _Key("float", 0.0, _kind("solve", "sweep-nu", "dissipation", "mc-estimate", "check-weak",
                                          "backward-probe"),
                      check=lambda v: None if 0 <= v < 1 else "must lie in [0, 1) (0 disables mollification)"),
    },
    "datum": {
        "type": _Key("str", lambda c: "constant" if c["run"]["kind"] == "depauw-demo" else "single-mode",
                     _kind(*_FORWARD, "depauw-demo"), check=_one_of(DATA)),
        "level": _Key("int", 1, _dtype("checkerboard"), check=_positive),
        "k1": _Key("int", 1, _dtype("single-mode")),
        "k2": _Key("int", 0, _dtype("single-mode")),
        "amplitude": _Key("float", 1.0, _dtype("single-mode")),
        "phase": _Key("float", 0.0, _dtype("single-mode")),
        "value": _Key("float", lambda c: 0.0 if c["run"]["kind"] == "depauw-demo" else 1.0, _dtype("constant")),
        "path": _Key("str", "", _dtype("file")),
    },
    "solver": {
        "nu": _Key("float", 0.0, _kind("solve", "duality", "mc-estimate", "check-weak"), check=_nonneg),
        "scheme": _Key("str", "splitting", _kind("solve", "duality", "check-weak"),
                       check=_one_of(("splitting", "spectral-galerkin", "characteristics"))),
        "interpolation": _Key("str", "monotone-bilinear",
                              _kind("solve", "sweep-nu", "dissipation", "duality", "mc-estimate", "check-weak",
                                    "backward-probe"),
                              check=_one_of(("monotone-bilinear", "cubic"))),
        "diffusion": _Key("str", "auto", _kind("solve", "sweep-nu", "dissipation", "duality", "mc-estimate",
                                               "check-weak"),
                          check=_one_of(("auto", "spectral", "discrete"))),
        "cfl": _Key("float", 1.0, _kind("solve", "sweep-nu", "dissipation", "duality", "mc-estimate", "check-weak"),
                    check=lambda v: None if 0 < v <= 1 else "must lie in (0, 1]"),
        "max_dt": _Key("float", 1.0 / 256, _kind("solve", "sweep-nu", "dissipation", "duality", "mc-estimate",
                                                 "check-weak", "backward-probe"), check=_positive),
        "outputs": _Key("floats", lambda c: (c["field"]["horizon"],), _kind("solve")),
    },
    "sweep": {
        "nus": _Key("floats", _ladder(4, 9), _kind("sweep-nu", "dissipation", "backward-probe"),
                    check=_all_positive),
        "deltas": _Key("floats", _ladder(3, 8), _kind("sweep-delta", "duality"), check=_all_positive),
        "early_times": _Key("floats", (), _kind("sweep-nu", "dissipation")),
        "probe_times": _Key("floats", (), _kind("backward-probe")),
        "allow_underresolved": _Key("bool", False, _kind("sweep-nu", "dissipation", "backward-probe", "solve",
                                                         "duality", "mc-estimate", "check-weak")),
    },
    "mollifier": {
        "quadrature_order": _Key("int", 16, _kind("sweep-delta", "duality"), check=_positive),
        "method": _Key("str", "heun", _kind("sweep-delta", "duality"), check=_one_of(("heun", "rk4"))),
        "steps": _Key("int", 256, _kind("sweep-delta", "duality"), check=_positive),
        "refine": _Key("int", 1, _kind("sweep-delta", "duality"), check=_positive),
    },
    "panel": {
        "kind": _Key("str", "default", _kind(*_SWEEPS, "duality", "mc-estimate", "backward-probe"),
                     check=_one_of(("default", "custom"))),
        "t0": _Key("floats", (), lambda c: c["panel"].get("kind") == "custom"),
        "x1": _Key("floats", (), lambda c: c["panel"].get("kind") == "custom"),
        "x2": _Key("floats", (), lambda c: c["panel"].get("kind") == "custom"),
        "r_t": _Key("floats", (), lambda c: c["panel"].get("kind") == "custom", check=_all_positive),
        "r_x": _Key("floats", (), lambda c: c["panel"].get("kind") == "custom", check=_all_positive),
        "amplitude": _Key("floats", (), lambda c: c["panel"].get("kind") == "custom"),
        "test_lo": _Key("float", lambda c: 0.0, _kind("check-weak"), check=_nonneg),
    },
    "duality": {
        "mode": _Key("str", "adjoint", _kind("duality"), check=_one_of(("adjoint", "independent", "regularized"))),
    },
    "mc": {
        "samples": _Key("int", 10_000, _kind("mc-estimate"), check=lambda v: None if v >= 100 else "must be >= 100"),
        "probes": _Key("int", 16, _kind("mc-estimate"), check=_positive),
        "time": _Key("float", lambda c: 0.5 * c["field"]["horizon"], _kind("mc-estimate"), check=_positive),
        "dt_sde": _Key("float", 0.0, _kind("mc-estimate"), check=_nonneg),
        "bins": _Key("int", 8, _kind("mc-estimate"), check=_positive),
    },
    "weak": {
        "space_rule": _Key("str", "trigonometric", _kind("check-weak"), check=_one_of(("trigonometric", "cell"))),
        "strides": _Key("ints", (4, 2, 1), _kind("check-weak")),
        "refinements": _Key("ints", (1, 2, 4), _kind("check-weak")),
    },
    "depauw": {
        "nu_check": _Key("float", 0.0, _kind("depauw-demo"), check=_nonneg),
    },
}


def _parse_scalar(kind: str, text: str, path: str):
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            v = float(text)
            if not math.isfinite(v):
                raise ValueError
            return v
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError
        if kind == "str":
            return text
        base = kind[:-1]
        if not text:
            return ()
        return tuple(_parse_scalar(base, part, path) for part in text.split(","))
    except ValueError:
        raise ConfigError(path, f"cannot read {text!r} as {kind}") from None


def _format(kind: str, value) -> str:
    if kind == "float":
        return repr(float(value))
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("ints", "floats"):
        return ", ".join(_format(kind[:-1], v) for v in value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration: ``sections[section][key]`` holds typed values
    for exactly the keys that apply to this run."""

    sections: dict

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)

    @property
    def kind(self) -> str:
        return self.sections["run"]["kind"]

    def replace(self, section: str, key: str, value) -> "RunConfig":
        raw = {s: dict(v) for s, v in self.sections.items()}
        raw.setdefault(section, {})[key] = value
        return resolve(raw)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.sections == other.sections

    def __hash__(self):
        return hash(echo(self))


def _read(text: str, source: str = "<config>") -> dict:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=None, strict=True, empty_lines_in_values=False)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0]) from None
    raw: dict = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
        raw[section] = {}
        for name, text_value in parser.items(section):
            if ":" not in name:
                raise ConfigError(f"{section}.{name}", "missing type annotation (write key:type = value)")
            key, kind = (p.strip() for p in name.split(":", 1))
            path = f"{section}.{key}"
            if kind not in TYPES:
                raise ConfigError(path, f"unknown type {kind!r}")
            spec = SCHEMA[section].get(key)
            if spec is None:
                raise ConfigError(path, "unknown key")
            if kind != spec.type:
                raise ConfigError(path, f"declared as {kind}, expected {spec.type}")
            if key in raw[section]:
                raise ConfigError(path, "duplicate key")
            raw[section][key] = _parse_scalar(kind, text_value, path)
    return raw


def resolve(raw: dict) -> RunConfig:
    """Validate ``raw`` typed values and fill every applicable default."""
    for section, entries in raw.items():
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
        for key in entries:
            if key not in SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
    if "kind" not in raw.get("run", {}):
        raise ConfigError("run.kind", "required")
    out: dict = {}
    for section, keys in SCHEMA.items():
        out[section] = {}
        given = raw.get(section, {})
        for key, spec in keys.items():
            path = f"{section}.{key}"
            if not spec.applies(out):
                if key in given:
                    raise ConfigError(path, "does not apply to this run")
                continue
            if key in given:
                value = given[key]
            elif callable(spec.default):
                value = spec.default(out)
            elif spec.default is None:
                raise ConfigError(path, "required")
            else:
                value = spec.default
            value = _coerce(spec.type, value, path)
            problem = spec.check(value)
            if problem:
                raise ConfigError(path, problem)
            out[section][key] = value
        if not out[section]:
            if given:
                raise ConfigError(section, "section does not apply to this run")
            del out[section]
    _cross_checks(out)
    return RunConfig(out)


def _coerce(kind: str, value, path: str):
    scalar = {"int": int, "float": float, "bool": bool, "str": str}
    try:
        if kind in scalar:
            if kind == "int" and (isinstance(value, bool) or int(value) != value):
                raise TypeError
            if kind == "bool" and not isinstance(value, bool):
                raise TypeError
            return scalar[kind](value)
        return tuple(_coerce(kind[:-1], v, path) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(path, f"expected {kind}, got {value!r}") from None


def _cross_checks(c: dict) -> None:
    f = c["field"]
    n = c["grid"]["n"]
    if f["type"] == "dyadic-exchange":
        if f["n_max"] < f["n_min"]:
            raise ConfigError("field.n_max", "must be >= field.n_min")
        if n % 2 ** (f["n_max"] + 2):
            raise ConfigError("field.n_max", f"grid.n={n} does not resolve the finest slab (needs 2^(n_max+2) | n)")
    if c["run"]["kind"] == "depauw-demo" and f["type"] != "dyadic-exchange":
        raise ConfigError("field.type", "depauw-demo requires dyadic-exchange")
    if c["run"]["kind"] == "depauw-demo" and c["datum"] != {"type": "constant", "value": 0.0}:
        raise ConfigError("datum", "depauw-demo uses the zero datum")
    d = c.get("datum", {})
    if d.get("type") == "checkerboard" and n % 2 ** (d["level"] + 1):
        raise ConfigError("datum.level", f"grid.n={n} cannot represent the checkerboard")
    if d.get("type") == "file" and not d["path"]:
        raise ConfigError("datum.path", "required for a file datum")
    p = c.get("panel", {})
    if p.get("kind") == "custom":
        lens = {len(p[k]) for k in ("t0", "x1", "x2", "r_t", "r_x", "amplitude")}
        if len(lens) != 1 or 0 in lens:
            raise ConfigError("panel", "custom panel lists must be non-empty and of equal length")
    s = c.get("sweep", {})
    for key in ("nus", "deltas"):
        if key in s and not s[key]:
            raise ConfigError(f"sweep.{key}", "empty ladder")
    if c["run"]["kind"] == "duality" and c["duality"]["mode"] == "adjoint" \
            and c["solver"]["scheme"] != "spectral-galerkin":
        raise ConfigError("solver.scheme", "adjoint mode requires spectral-galerkin")
    if c["run"]["kind"] == "check-weak" and len(c["weak"]["strides"]) != len(c["weak"]["refinements"]):
        raise ConfigError("weak.refinements", "must have as many entries as weak.strides")
    outputs = c.get("solver", {}).get("outputs", ())
    if any(not 0 <= t <= f["horizon"] for t in outputs):
        raise ConfigError("solver.outputs", "times must lie in [0, horizon]")


def parse(text: str, source: str = "<config>") -> RunConfig:
    return resolve(_read(text, source))


def load(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {p}: {exc.strerror}") from None
    return parse(text, str(p))


def echo(config: RunConfig, *, omit: tuple[str, ...] = ()) -> str:
    """Canonical text of a resolved configuration (schema order)."""
    lines = []
    for section, keys in SCHEMA.items():
        entries = config.sections.get(section)
        if not entries:
            continue
        body = [f"{key}:{keys[key].type} = {_format(keys[key].type, entries[key])}"
                for key in keys if key in entries and f"{section}.{key}" not in omit]
        if body:
            lines.append(f"[{section}]")
            lines.extend(body)
            lines.append("")
    return "\n".join(lines)
