"""Flat ``key = value`` run configuration with dotted module prefixes.

Example::

    # cohort and scenarios
    run.n = 10
    run.scenarios = S0..S9
    mpc.N_tdi_max = 3.0
    scenario.S5.basal_bias = [1, 1.25, 1, 0.75, 1]

Values are numbers, ``true``/``false``, bare strings, ``none`` or bracket
arrays. Environment variables ``HAID_<KEY>`` override file values, with dots
written as double underscores (``HAID_MPC__NP=18``). Command-line flags
override both.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .mpc import MpcConfig
from .pipeline import CohortConfig
from .scenarios import STANDARD_SCENARIOS, ScenarioSpec, parse_scenario_ids
from .simulation import SimConfig

ENV_PREFIX = "HAID_"

# keys that do not influence any output and so stay out of the config hash
UNHASHED = frozenset({"run.out", "run.workers"})

_RUN_DEFAULTS: dict[str, Any] = {
    "run.n": 10,
    "run.seed": 1,
    "run.scenarios": "S0",
    "run.noise": False,
    "run.noise_sd": 2.0,
    "run.workers": 1,
    "run.out": "out",
}
_COHORT_DEFAULTS: dict[str, Any] = {
    "cohort.cv": 0.15,
    "cohort.bw_range": [55.0, 95.0],
    "cohort.basal_share": 0.4,
    "fit.n_starts": 5,
    "fit.max_evals": 2000,
    "sim.target": 120.0,
    "sim.substep": 1.0,
    "ekf.q_frac": 0.05,
    "ekf.p0_frac": 0.5,
}
_SCENARIO_FIELDS = ("days", "basal_bias", "cc_error", "announce_delay", "initial_glucose", "rescue",
                    "cc_magnitude", "cc_normal_clip")


class ConfigError(ValueError):
    """Bad key or value; ``where`` names the source line or flag."""

    def __init__(self, where: str, msg: str):
        super().__init__(f"{where}: {msg}")
        self.where = where


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def defaults() -> dict[str, Any]:
    out = dict(_RUN_DEFAULTS) | dict(_COHORT_DEFAULTS)
    for f in fields(MpcConfig):
        out[f"mpc.{f.name}"] = getattr(MpcConfig(), f.name)
    for sid, spec in STANDARD_SCENARIOS.items():
        for name in _SCENARIO_FIELDS:
            out[f"scenario.{sid}.{name}"] = _plain(getattr(spec, name))
    return out


# --- parsing ----------------------------------------------------------------

def parse_value(text: str) -> Any:
    s = text.strip()
    if s.startswith("["):
        if not s.endswith("]"):
            raise ValueError("unterminated array")
        inner = s[1:-1].strip()
        return [] if not inner else [parse_value(part) for part in inner.split(",")]
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    if low == "none":
        return None
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    if not s:
        raise ValueError("empty value")
    return s


def _coerce(key: str, value: Any, default: Any) -> Any:
    """Match the default's type; ints widen to floats, scalars never become lists."""
    if default is None or key.endswith(".initial_glucose") or key.endswith(".announce_delay"):
        if value is None:
            return None
        if key.endswith(".announce_delay"):
            if not (isinstance(value, list) and len(value) == 2):
                raise ValueError("expected [a, b] or none")
            return [float(v) for v in value]
        return float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError("expected true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError("expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError("expected a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not value:
            raise ValueError("expected a non-empty [array]")
        proto = default[0]
        return [_coerce(key + "[]", v, proto) for v in value]
    if isinstance(default, str):
        if value is None:
            return "none"  # the error-free carb-counting model shares the null literal
        if isinstance(value, (list, bool)):
            raise ValueError("expected a string")
        return str(value)
    raise ValueError(f"unsupported type for {key}")


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse config text into raw values; unknown keys are rejected later."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", "expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}", "missing key")
        try:
            out[key] = (parse_value(val), f"{source}:{lineno}")
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}", f"field {key!r}: {exc}") from None
    return out


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    known = {k.lower(): k for k in defaults()}
    out = {}
    for name, val in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = name[len(ENV_PREFIX):].replace("__", ".").lower()
        key = known.get(dotted)
        if key is None:
            raise ConfigError(f"env {name}", "unknown configuration key")
        try:
            out[key] = (parse_value(val), f"env {name}")
        except ValueError as exc:
            raise ConfigError(f"env {name}", str(exc)) from None
    return out


def resolve(*layers: Mapping[str, tuple[Any, str]]) -> dict[str, Any]:
    """Apply layers (lowest precedence first) on top of the defaults."""
    values = defaults()
    for layer in layers:
        for key, (value, where) in layer.items():
            if key not in values:
                raise ConfigError(where, f"unknown configuration key {key!r}")
            try:
                values[key] = _coerce(key, value, values[key])
            except ValueError as exc:
                raise ConfigError(where, f"field {key!r}: {exc}") from None
    try:
        build(values)
    except (ValueError, TypeError) as exc:
        raise ConfigError("config", str(exc)) from None
    return values


# --- rendering and hashing --------------------------------------------------

def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(format_value(x) for x in v) + "]"
    return str(v)


def render(values: Mapping[str, Any], include_unhashed: bool = True) -> str:
    keys = sorted(k for k in values if include_unhashed or k not in UNHASHED)
    return "".join(f"{k} = {format_value(values[k])}\n" for k in keys)


def config_hash(values: Mapping[str, Any]) -> str:
    return hashlib.sha256(render(values, include_unhashed=False).encode()).hexdigest()


# --- typed views --------------------------------------------------------------

@dataclass
class RunConfig:
    n: int
    seed: int
    scenarios: list[str]
    noise: bool
    workers: int
    out: Path
    cohort: CohortConfig = field(repr=False)
    values: dict[str, Any] = field(repr=False, default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.values)


def _scenario(values: Mapping[str, Any], sid: str) -> ScenarioSpec:
    kw = {name: values[f"scenario.{sid}.{name}"] for name in _SCENARIO_FIELDS}
    for name in ("basal_bias", "cc_error"):
        kw[name] = tuple(kw[name])
    if kw["announce_delay"] is not None:
        kw["announce_delay"] = tuple(kw["announce_delay"])
    return dataclasses.replace(STANDARD_SCENARIOS[sid], **kw)


def build(values: Mapping[str, Any]) -> RunConfig:
    mpc = MpcConfig(**{f.name: values[f"mpc.{f.name}"] for f in fields(MpcConfig)})
    noise = values["run.noise"]
    if values["run.noise_sd"] < 0:
        raise ValueError("run.noise_sd must be non-negative")
    sim = SimConfig(mpc=mpc, sensor_sd=values["run.noise_sd"] if noise else 0.0, target=values["sim.target"],
                    substep=values["sim.substep"], ekf_q_frac=values["ekf.q_frac"],
                    ekf_p0_frac=values["ekf.p0_frac"])
    bw = values["cohort.bw_range"]
    if len(bw) != 2 or not 0 < bw[0] <= bw[1]:
        raise ValueError("cohort.bw_range must be [lo, hi] with 0 < lo <= hi")
    if values["run.n"] < 1:
        raise ValueError("run.n must be >= 1")
    if values["run.workers"] < 1:
        raise ValueError("run.workers must be >= 1")
    if not 0 < values["cohort.basal_share"] <= 1:
        raise ValueError("cohort.basal_share must be in (0, 1]")
    scenarios = {sid: _scenario(values, sid) for sid in STANDARD_SCENARIOS}
    cohort = CohortConfig(n=values["run.n"], seed=values["run.seed"], cv=values["cohort.cv"], bw_range=tuple(bw),
                          basal_share=values["cohort.basal_share"], fit_starts=values["fit.n_starts"],
                          fit_max_evals=values["fit.max_evals"], sim=sim, scenarios=scenarios)
    ids = parse_scenario_ids(values["run.scenarios"])
    if not ids:
        raise ValueError("run.scenarios selects nothing")
    return RunConfig(n=values["run.n"], seed=values["run.seed"], scenarios=ids, noise=noise,
                     workers=values["run.workers"], out=Path(values["run.out"]), cohort=cohort,
                     values=dict(values))


def load(path: str | Path | None = None, flags: Mapping[str, Any] | None = None,
         environ: Mapping[str, str] | None = None) -> RunConfig:
    """Defaults < file < environment < flags."""
    layers = []
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(str(p), f"cannot read config: {exc.strerror}") from None
        layers.append(parse_text(text, str(p)))
    layers.append(env_overrides(environ))
    if flags:
        layers.append({k: (v, f"--{k.split('.')[-1]}") for k, v in flags.items() if v is not None})
    return build(resolve(*layers))
