"""Scenario configuration: an INI file with ``[scenario]``, ``[nuisance]`` and ``[schema]`` sections.

Example::

    [scenario]
    preset = table1-all-n2000
    reps = 200
    seed = 1

    [nuisance]
    QD = intercept_only/identity

Keys in ``[nuisance]`` override single entries of the named strategy. Values
are learner strings (``kind[/link]``, see :meth:`LearnerSpec.parse`) or
``known:<probability>`` / ``known:design``.
"""

from __future__ import annotations

import configparser
import io
import os
import re
from dataclasses import dataclass, replace

from . import regress
from .estimators import ESTIMATORS
from .nuisance import NAMES, NuisanceStrategy, parse_entry, uniform_strategy
from .regress import LearnerSpec
from .simulate import COVID_PRESETS, DISCRETE_PRESETS, DGP2_ALPHAS, strategy_preset

DGPS = ("discrete", "covid")
DEFAULT_STRATEGY = {"discrete": "all", "covid": "glm-inter"}
TABLE1_NS = (500, 1000, 2000, 4000, 8000)
DESK_REPS = 200
FULL_REPS = 1000


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.line = line


@dataclass(frozen=True)
class ScenarioConfig:
    dgp: str = "discrete"
    n: int = 2000
    reps: int = DESK_REPS
    seed: int = 1
    alpha: float = -3.1
    estimators: tuple = ("classic", "alternative")
    strategy_name: str = ""  # empty: the dgp's default preset
    nuisance: tuple = ()  # sorted (name, entry-string) overrides
    p_min: float = regress.P_MIN
    ci_level: float = 0.95
    truth_draws: int = 1_000_000
    threads: int = 0  # 0: one worker per CPU
    out: str = "results"
    schema: tuple = ()  # sorted (key, value) pairs for ``estimate``

    @property
    def setting(self) -> str:
        return self.strategy_name or DEFAULT_STRATEGY[self.dgp]

    @property
    def workers(self) -> int:
        return self.threads or os.cpu_count() or 1

    def strategy(self) -> NuisanceStrategy:
        name = self.setting
        if name.startswith("uniform:"):
            base = uniform_strategy(LearnerSpec.parse(name.split(":", 1)[1]), p_min=self.p_min)
            base = replace(base, name=name)
        else:
            base = strategy_preset(self.dgp, name, self.p_min)
        if self.nuisance:
            base = base.with_entries(**{k: parse_entry(v, k) for k, v in self.nuisance})
        return base

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        sc = {
            "dgp": self.dgp, "n": str(self.n), "reps": str(self.reps), "seed": str(self.seed),
            "alpha": repr(self.alpha), "estimators": ", ".join(self.estimators),
            "strategy": self.strategy_name, "p_min": repr(self.p_min), "ci_level": repr(self.ci_level),
            "truth_draws": str(self.truth_draws), "threads": str(self.threads), "out": self.out,
        }
        cp["scenario"] = sc
        if self.nuisance:
            cp["nuisance"] = dict(self.nuisance)
        if self.schema:
            cp["schema"] = dict(self.schema)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def preset_names() -> list[str]:
    names = [f"table1-{s}-n{n}" for s in DISCRETE_PRESETS for n in TABLE1_NS]
    names += [f"table3-{s}-a{a}" for s in COVID_PRESETS for a in DGP2_ALPHAS]
    return names


def scenario_preset(name: str) -> dict:
    m = re.fullmatch(r"table1-([a-z-]+)-n(\d+)", name)
    if m and m.group(1) in DISCRETE_PRESETS:
        return {"dgp": "discrete", "strategy_name": m.group(1), "n": int(m.group(2))}
    m = re.fullmatch(r"table3-([a-z-]+)-a(-?\d+(?:\.\d+)?)", name)
    if m and m.group(1) in COVID_PRESETS:
        return {"dgp": "covid", "strategy_name": m.group(1), "alpha": float(m.group(2)), "n": 30000}
    raise KeyError(name)


def _line_index(text: str) -> dict:
    """Map (section, key) and (section, None) to 1-based line numbers."""
    idx = {}
    section = None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.fullmatch(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            idx.setdefault((section, None), i)
            continue
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip()
        idx.setdefault((section, key), i)
    return idx


_SCENARIO_KEYS = {"preset", "dgp", "n", "reps", "seed", "alpha", "estimators", "strategy", "p_min",
                  "ci_level", "truth_draws", "threads", "out"}
_SCHEMA_KEYS = {"w", "a", "r", "s", "c", "y", "gr"}


def parse_config(text: str, source: str = "<config>") -> ScenarioConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], line, source) from None
    lines = _line_index(text)

    def err(msg, section, key=None):
        return ConfigError(msg, lines.get((section, key), lines.get((section, None))), source)

    for sec in cp.sections():
        if sec not in ("scenario", "nuisance", "schema"):
            raise err(f"unknown section [{sec}]", sec)
    sc = cp["scenario"] if cp.has_section("scenario") else {}
    for k in sc:
        if k not in _SCENARIO_KEYS:
            raise err(f"unknown key {k!r} in [scenario]", "scenario", k)

    values: dict = {}
    if "preset" in sc:
        try:
            values.update(scenario_preset(sc["preset"].strip()))
        except KeyError:
            raise err(f"unknown preset {sc['preset'].strip()!r}", "scenario", "preset") from None

    def conv(key, fn, target=None):
        if key in sc:
            try:
                values[target or key] = fn(sc[key].strip())
            except ValueError as exc:
                raise err(f"bad value for {key}: {exc}", "scenario", key) from None

    conv("dgp", str)
    conv("n", int)
    conv("reps", int)
    conv("seed", int)
    conv("alpha", float)
    conv("estimators", lambda v: tuple(x.strip() for x in v.split(",") if x.strip()))
    conv("strategy", str, "strategy_name")
    conv("p_min", float)
    conv("ci_level", float)
    conv("truth_draws", int)
    conv("threads", int)
    conv("out", str)

    if cp.has_section("nuisance"):
        nu = []
        for k, v in cp["nuisance"].items():
            if k not in NAMES:
                raise err(f"unknown nuisance {k!r}", "nuisance", k)
            try:
                parse_entry(v, k)
            except ValueError as exc:
                raise err(f"{k}: {exc}", "nuisance", k) from None
            nu.append((k, v.strip()))
        values["nuisance"] = tuple(sorted(nu))
    if cp.has_section("schema"):
        sch = []
        for k, v in cp["schema"].items():
            if k not in _SCHEMA_KEYS:
                raise err(f"unknown schema key {k!r}", "schema", k)
            sch.append((k, v.strip()))
        values["schema"] = tuple(sorted(sch))

    cfg = ScenarioConfig(**values)
    problems = validate(cfg)
    if problems:
        key, msg = problems[0]
        section = "nuisance" if key in NAMES else "scenario"
        raise err(msg, section, key)
    return cfg


def validate(cfg: ScenarioConfig) -> list[tuple[str, str]]:
    """Return ``(key, message)`` for every invalid field."""
    out = []
    if cfg.dgp not in DGPS:
        out.append(("dgp", f"dgp must be one of {', '.join(DGPS)}"))
    if cfg.reps < 1:
        out.append(("reps", "reps must be at least 1"))
    if cfg.n < 1:
        out.append(("n", "n must be at least 1"))
    if cfg.dgp == "covid" and cfg.n < 8 * 128:
        out.append(("n", "covid dgp needs n >= 1024"))
    if not cfg.estimators:
        out.append(("estimators", "at least one estimator is required"))
    for e in cfg.estimators:
        if e not in ESTIMATORS:
            out.append(("estimators", f"unknown estimator {e!r}"))
    if cfg.dgp == "covid" and "density_ratio" in cfg.estimators:
        out.append(("estimators", "density_ratio needs a discrete mediator; the covid dgp has a continuous one"))
    if not (0 < cfg.p_min < 0.5):
        out.append(("p_min", "p_min must lie in (0, 0.5)"))
    if not (0 < cfg.ci_level < 1):
        out.append(("ci_level", "ci_level must lie in (0, 1)"))
    if cfg.truth_draws < 1:
        out.append(("truth_draws", "truth_draws must be positive"))
    if cfg.threads < 0:
        out.append(("threads", "threads must be non-negative"))
    if not out and cfg.dgp in DGPS:
        try:
            cfg.strategy()
        except (KeyError, ValueError) as exc:
            out.append(("strategy", f"invalid strategy: {exc}"))
    return out


def load_config(path) -> ScenarioConfig:
    with open(path) as fh:
        text = fh.read()
    return parse_config(text, source=str(path))
