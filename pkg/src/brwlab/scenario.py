"""Scenario files: flat key = value text describing one experiment run.

The format is deliberately flat for diffability in experiment logs: one
``key = value`` pair per line, ``#`` comments, no nesting.  The
``experiment`` key selects the schema; unknown keys are rejected with the
offending line and column.  Values are typed per key: scalars, comma lists,
sites ("1,0,0"), site lists ("0,0; 4,0"), and source lists ("0,0,0:0.3;
2,0,0:0.15").
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .errors import ParseError, ValidationError

_GLOBAL_KEYS = {
    "experiment": "str",
    "kernel": "str",
    "out": "str",
    "seed": "int",
    "threads": "int",
    "tolerance_profile": "str",
}

_SCHEMAS = {
    "kernels": {
        "t": "float_list",
        "x": "site",
        "y": "site",
        "lam": "float_list",
        "grid_n": "int",
        "fit_radii": "float_list",
        "transience_grids": "int_list",
    },
    "spectral": {
        "sigma": "float_list",
        "mu": "float",
        "grid_n": "int",
        "box_l": "int_list",
        "delta0": "float",
    },
    "moments": {
        "radius": "int",
        "boundary": "str",
        "sources": "source_list",
        "mu": "float",
        "orders": "int",
        "t_end": "float",
        "dt": "float",
        "y0": "site",
        "checkpoints": "float_list",
        "probes": "site_list",
        "bound_check": "bool",
        "grid_n": "int",
        "error_estimate": "bool",
    },
    "simulate": {
        "sources": "source_list",
        "mu": "float",
        "init": "str",
        "init_site": "site",
        "window": "int",
        "t_end": "float",
        "checkpoints": "float_list",
        "replicas": "int",
        "probes": "site_list",
        "obs_window": "int",
        "max_particles": "int",
        "max_events": "float",
        "raw_snapshots": "bool",
    },
    "sweep": {
        "target": "str",
        "parameter": "str",
        "values": "str_list",
    },
}
# sweep scenarios carry the target experiment's keys as the base configuration
_SWEEP_EXTRA = {k: t for s in ("kernels", "spectral", "moments", "simulate")
                for k, t in _SCHEMAS[s].items()}

_DEFAULTS = {
    "kernel": "srw-d3",
    "out": "results",
    "seed": 20260811,
    "threads": 0,
    "tolerance_profile": "strict",
}


@dataclass(frozen=True)
class Scenario:
    experiment: str
    kernel: str = _DEFAULTS["kernel"]
    out: str = _DEFAULTS["out"]
    seed: int = _DEFAULTS["seed"]
    threads: int = _DEFAULTS["threads"]
    tolerance_profile: str = _DEFAULTS["tolerance_profile"]
    params: dict = field(default_factory=dict)

    def with_overrides(self, **kw) -> "Scenario":
        base = {k: v for k, v in kw.items() if v is not None and k != "params"}
        merged = dict(self.params)
        for k, v in (kw.get("params") or {}).items():
            if v is not None:
                merged[k] = v
        return replace(self, params=merged, **base)

    def get(self, key, default=None):
        return self.params.get(key, default)


def _parse_site(text, line, col):
    try:
        return tuple(int(p.strip()) for p in text.split(","))
    except ValueError:
        raise ParseError(f"expected comma-separated integers, got {text!r}",
                         line, col) from None


def _parse_value(kind, text, line, col):
    try:
        if kind == "str":
            return text
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind == "float_list":
            if ":" in text:
                # inclusive range: start:stop:step
                start, stop, step = (float(p) for p in text.split(":"))
                n = int(math.floor((stop - start) / step + 1e-9)) + 1
                return tuple(round(start + i * step, 12) for i in range(n))
            return tuple(float(p.strip()) for p in text.split(",") if p.strip())
        if kind == "int_list":
            return tuple(int(p.strip()) for p in text.split(",") if p.strip())
        if kind == "str_list":
            return tuple(p.strip() for p in text.split(",") if p.strip())
        if kind == "site":
            return _parse_site(text, line, col)
        if kind == "site_list":
            return tuple(_parse_site(p.strip(), line, col)
                         for p in text.split(";") if p.strip())
        if kind == "source_list":
            out = []
            for part in text.split(";"):
                part = part.strip()
                if not part:
                    continue
                site_text, sep, s_text = part.rpartition(":")
                if not sep:
                    raise ValueError(part)
                out.append((_parse_site(site_text.strip(), line, col),
                            float(s_text)))
            return tuple(out)
    except ParseError:
        raise
    except ValueError:
        raise ParseError(f"cannot parse {text!r} as {kind}", line, col) from None
    raise ParseError(f"unknown value kind {kind}", line, col)


def _format_value(kind, value):
    if kind in ("str",):
        return str(value)
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("int", "float"):
        return repr(value)
    if kind in ("float_list", "int_list"):
        return ", ".join(repr(v) for v in value)
    if kind == "str_list":
        return ", ".join(str(v) for v in value)
    if kind == "site":
        return ",".join(str(c) for c in value)
    if kind == "site_list":
        return "; ".join(",".join(str(c) for c in site) for site in value)
    if kind == "source_list":
        return "; ".join(",".join(str(c) for c in site) + f":{s!r}"
                         for site, s in value)
    raise ValueError(kind)


def _key_schema(experiment):
    schema = dict(_GLOBAL_KEYS)
    if experiment not in _SCHEMAS:
        raise ValidationError(
            f"unknown experiment {experiment!r}; expected one of {sorted(_SCHEMAS)}")
    schema.update(_SCHEMAS[experiment])
    if experiment == "sweep":
        schema.update(_SWEEP_EXTRA)
    return schema


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file.

    Raises ``ParseError`` (with line/column) on malformed input or unknown
    keys, ``ValidationError`` when a value violates the owning operation's
    preconditions.
    """
    raw: dict[str, tuple[str, int, int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, rawline in enumerate(fh, start=1):
            line = rawline.rstrip("\n")
            stripped = line.split("#", 1)[0].rstrip()
            if not stripped.strip():
                continue
            if "=" not in stripped:
                raise ParseError("expected 'key = value'", lineno, 1)
            key, _, value = stripped.partition("=")
            col = len(key) - len(key.lstrip()) + 1
            key = key.strip()
            value = value.strip()
            if key in raw:
                raise ParseError(f"duplicate key {key!r}", lineno, col)
            raw[key] = (value, lineno, col)
    if "experiment" not in raw:
        raise ParseError("missing required key 'experiment'", 1, 1)
    experiment = raw["experiment"][0]
    schema = _key_schema(experiment)
    parsed: dict = {}
    for key, (text, line, col) in raw.items():
        if key not in schema:
            raise ParseError(f"unknown key {key!r} for experiment {experiment!r}",
                             line, col)
        parsed[key] = _parse_value(schema[key], text, line, col)
    top = {k: parsed.pop(k) for k in list(_GLOBAL_KEYS) if k in parsed}
    top.pop("experiment", None)
    scenario = Scenario(experiment=experiment, params=parsed,
                        **{k: v for k, v in top.items()})
    validate_scenario(scenario)
    return scenario


def write_scenario(scenario: Scenario, path) -> None:
    """Write the canonical text form; load_scenario(write(s)) == s."""
    schema = _key_schema(scenario.experiment)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"experiment = {scenario.experiment}\n")
        fh.write(f"kernel = {scenario.kernel}\n")
        fh.write(f"out = {scenario.out}\n")
        fh.write(f"seed = {scenario.seed}\n")
        fh.write(f"threads = {scenario.threads}\n")
        fh.write(f"tolerance_profile = {scenario.tolerance_profile}\n")
        for key in sorted(scenario.params):
            fh.write(f"{key} = {_format_value(schema[key], scenario.params[key])}\n")


def validate_scenario(scenario: Scenario) -> None:
    """Check every referenced parameter against the owning preconditions."""
    p = scenario.params
    if scenario.tolerance_profile not in ("fast", "strict"):
        raise ValidationError("tolerance_profile must be 'fast' or 'strict'")
    if scenario.threads < 0:
        raise ValidationError("threads must be >= 0")
    for key in ("sigma",):
        for v in p.get(key, ()):  # type: ignore[union-attr]
            if v <= 0:
                raise ValidationError(f"{key} values must be > 0 (got {v})")
    for site, s in p.get("sources", ()):
        if s <= 0:
            raise ValidationError(f"source strength must be > 0 (got {s} at {site})")
    sources = p.get("sources", ())
    if len({tuple(site) for site, _ in sources}) != len(sources):
        raise ValidationError("source sites must be distinct")
    if p.get("mu", 0.0) < 0:
        raise ValidationError("mu must be >= 0")
    if scenario.experiment == "simulate":
        if p.get("replicas", 1) < 1:
            raise ValidationError("replicas must be >= 1")
        if p.get("init", "single") not in ("single", "window"):
            raise ValidationError("init must be 'single' or 'window'")
        if p.get("init") == "window" and p.get("window", -1) < 0:
            raise ValidationError("window half-width required for one-per-site init")
    if scenario.experiment == "moments":
        if p.get("radius", 1) < 1:
            raise ValidationError("box radius must be >= 1")
        if p.get("boundary", "absorbing") not in ("absorbing", "periodic"):
            raise ValidationError("boundary must be 'absorbing' or 'periodic'")
        if p.get("orders", 1) < 1:
            raise ValidationError("orders must be >= 1")
        if p.get("dt", 1.0) <= 0:
            raise ValidationError("dt must be > 0")
    if scenario.experiment == "kernels":
        if p.get("grid_n", 8) < 8 or p.get("grid_n", 8) % 2:
            raise ValidationError("grid_n must be even and >= 8")
        for lam in p.get("lam", ()):
            if lam < 0:
                raise ValidationError("lam values must be >= 0")
    if scenario.experiment == "sweep":
        if "target" not in p or p["target"] not in ("kernels", "spectral",
                                                    "moments", "simulate"):
            raise ValidationError("sweep target must name a base experiment")
        if "parameter" not in p or "values" not in p:
            raise ValidationError("sweep needs 'parameter' and 'values'")
    for key in ("t_end",):
        if key in p and p[key] <= 0:
            raise ValidationError(f"{key} must be > 0")
    cks = p.get("checkpoints")
    if cks is not None:
        if any(b <= a for a, b in zip(cks, cks[1:])) or cks[0] <= 0:
            raise ValidationError("checkpoints must be strictly increasing and positive")
