"""Experiment configuration: an INI file with ``[section]`` headers and ``key = value`` lines.

Example::

    [problem]
    id = P4

    [grid]
    dt = 0.03
    steps = 40

    [ensemble]
    count = 500
    seed = 7

Keys left out take the problem's defaults.  Unknown sections or keys are
errors reported with their line number.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .problems import STOCHASTIC_DIM

PROBLEMS = ("P1", "P2", "P3", "P4", "P5")


class ConfigError(ValueError):
    def __init__(self, message, line=None, key=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    problem: str
    dt: float
    steps: int
    dx: float
    n_cells: int
    count: int
    seed: int
    train: int
    test: int
    lower: tuple
    upper: tuple
    rank: int
    deim_m: int
    layers: int
    learning_rate: float
    batch_size: int
    iterations: int
    eps: float
    train_U: bool
    init_U: str
    dt_multiplier: int
    threads: int
    out_dir: str
    experiment: str
    permeability_file: Optional[str] = None
    restarts: int = 1

    @property
    def bounds(self) -> tuple:
        return tuple(zip(self.lower, self.upper))

    @property
    def state_dim(self) -> int:
        if self.problem == "P4":
            return int(round(1.0 / self.dx)) - 1
        if self.problem == "P5":
            return self.n_cells
        return 3


# key -> (section, field, type)
_SCHEMA = {
    ("problem", "id"): ("problem", str),
    ("problem", "permeability_file"): ("permeability_file", str),
    ("grid", "dt"): ("dt", float),
    ("grid", "steps"): ("steps", int),
    ("grid", "dx"): ("dx", float),
    ("grid", "n_cells"): ("n_cells", int),
    ("ensemble", "count"): ("count", int),
    ("ensemble", "seed"): ("seed", int),
    ("ensemble", "train"): ("train", int),
    ("ensemble", "test"): ("test", int),
    ("ensemble", "lower"): ("lower", "floats"),
    ("ensemble", "upper"): ("upper", "floats"),
    ("reduction", "rank"): ("rank", int),
    ("reduction", "deim_m"): ("deim_m", int),
    ("model", "layers"): ("layers", int),
    ("model", "learning_rate"): ("learning_rate", float),
    ("model", "batch_size"): ("batch_size", int),
    ("model", "iterations"): ("iterations", int),
    ("model", "eps"): ("eps", float),
    ("model", "train_u"): ("train_U", bool),
    ("model", "init_u"): ("init_U", str),
    ("model", "dt_multiplier"): ("dt_multiplier", int),
    ("model", "restarts"): ("restarts", int),
    ("run", "threads"): ("threads", int),
    ("output", "dir"): ("out_dir", str),
    ("output", "experiment"): ("experiment", str),
}
_FIELD_KEY = {f: k for k, (f, _) in _SCHEMA.items()}


def problem_defaults(problem: str) -> dict:
    """Default settings of each benchmark protocol."""
    base = dict(problem=problem, dx=0.01, n_cells=64, seed=0, rank=15, deim_m=35,
                layers=4, learning_rate=3e-3, batch_size=15, iterations=15, eps=0.1,
                train_U=False, init_U="identity", dt_multiplier=1, threads=1,
                out_dir="out", experiment=problem.lower(), permeability_file=None)
    if problem in ("P1", "P2", "P3"):
        d = STOCHASTIC_DIM[problem]
        base.update(dt=0.1, steps=100, count=1500, train=500, test=1000,
                    lower=(-1.0,) * d, upper=(1.0,) * d, rank=3, deim_m=3)
    elif problem == "P4":
        base.update(dt=0.03, steps=40, count=500, train=100, test=400,
                    lower=(0.01,), upper=(0.08,), train_U=True, init_U="uniform",
                    eps=1000.0, iterations=200)
    elif problem == "P5":
        base.update(dt=0.03, steps=100, count=500, train=100, test=400,
                    lower=(0.18,), upper=(0.38,), rank=35, train_U=True, init_U="uniform",
                    eps=1000.0, iterations=200)
    else:
        raise ConfigError(f"unknown problem {problem!r}; expected one of {PROBLEMS}", key="id")
    return base


def _convert(raw: str, kind, key, line):
    try:
        if kind == "floats":
            return tuple(float(v) for v in raw.replace(",", " ").split())
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"cannot read {key!r} from {raw!r}", line, key) from None


def _line_index(text: str):
    """Map (section, key) to line numbers by a light scan of the file."""
    where = {}
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip().lower()
            where.setdefault((section, None), no)
            continue
        m = re.match(r"([^=:]+?)\s*[=:]", s)
        if m and section is not None:
            where.setdefault((section, m.group(1).strip().lower()), no)
    return where


def validate(cfg: RunConfig, lines: Optional[dict] = None) -> RunConfig:
    lines = lines or {}

    def fail(field, message):
        sec_key = _FIELD_KEY.get(field, (None, field))
        raise ConfigError(f"{sec_key[1]}: {message}", lines.get(sec_key), sec_key[1])

    if cfg.problem not in PROBLEMS:
        fail("problem", f"unknown problem {cfg.problem!r}")
    if not cfg.dt > 0:
        fail("dt", f"must be positive, got {cfg.dt}")
    if cfg.steps < 1:
        fail("steps", f"must be at least 1, got {cfg.steps}")
    if not 0 < cfg.dx < 1:
        fail("dx", f"must lie in (0, 1), got {cfg.dx}")
    if cfg.n_cells < 2:
        fail("n_cells", f"must be at least 2, got {cfg.n_cells}")
    if cfg.count < 1:
        fail("count", f"must be at least 1, got {cfg.count}")
    if cfg.train < 0 or cfg.test < 0 or cfg.train + cfg.test > cfg.count:
        fail("train", f"train + test = {cfg.train + cfg.test} exceeds count {cfg.count}")
    if len(cfg.lower) != len(cfg.upper):
        fail("lower", "lower and upper bounds differ in length")
    if cfg.problem in STOCHASTIC_DIM and len(cfg.lower) != STOCHASTIC_DIM[cfg.problem]:
        fail("lower", f"{cfg.problem} has {STOCHASTIC_DIM[cfg.problem]} random inputs")
    if cfg.problem in ("P4", "P5") and len(cfg.lower) != 1:
        fail("lower", f"{cfg.problem} has one random parameter")
    for lo, hi in zip(cfg.lower, cfg.upper):
        if lo > hi:
            fail("lower", f"bound {lo} exceeds upper bound {hi}")
    if cfg.problem == "P4" and any(lo <= 0 for lo in cfg.lower):
        fail("lower", "diffusivity bounds must be positive")
    if cfg.problem == "P5" and any(not 0 < v < 1 for v in cfg.lower + cfg.upper):
        fail("lower", "porosity bounds must lie in (0, 1)")
    if not 1 <= cfg.rank <= cfg.state_dim:
        fail("rank", f"must lie in 1..{cfg.state_dim}, got {cfg.rank}")
    if not 1 <= cfg.deim_m <= cfg.state_dim:
        fail("deim_m", f"must lie in 1..{cfg.state_dim}, got {cfg.deim_m}")
    if cfg.layers < 1:
        fail("layers", f"must be at least 1, got {cfg.layers}")
    if not cfg.learning_rate > 0:
        fail("learning_rate", f"must be positive, got {cfg.learning_rate}")
    if cfg.batch_size < 1:
        fail("batch_size", f"must be at least 1, got {cfg.batch_size}")
    if cfg.iterations < 0:
        fail("iterations", f"must be non-negative, got {cfg.iterations}")
    if not cfg.eps > 0:
        fail("eps", f"must be positive, got {cfg.eps}")
    if cfg.init_U not in ("identity", "uniform"):
        fail("init_U", f"must be 'identity' or 'uniform', got {cfg.init_U!r}")
    if cfg.dt_multiplier < 1 or cfg.steps % cfg.dt_multiplier:
        fail("dt_multiplier", f"must be a positive divisor of steps={cfg.steps}")
    if cfg.restarts < 1:
        fail("restarts", f"must be at least 1, got {cfg.restarts}")
    if cfg.threads < 1:
        fail("threads", f"must be at least 1, got {cfg.threads}")
    if cfg.permeability_file is not None and not Path(cfg.permeability_file).is_file():
        fail("permeability_file", f"file {cfg.permeability_file!r} does not exist")
    return cfg


def parse_string(text: str, base_dir: Optional[Path] = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"expected a [section] header, found {exc.line.strip()!r}",
                          exc.lineno) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError(f"malformed line {exc.errors[0][1]!r}" if exc.errors else str(exc),
                          line) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r}", exc.lineno, exc.option) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section {exc.section!r}", exc.lineno) from None
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None)) from None
    lines = _line_index(text)

    sections = {s.lower() for s, _ in _SCHEMA}
    values = {}
    for section in parser.sections():
        sec = section.lower()
        if sec not in sections:
            raise ConfigError(f"unknown section [{section}]", lines.get((sec, None)))
        for key, raw in parser.items(section):
            entry = _SCHEMA.get((sec, key))
            if entry is None:
                raise ConfigError(f"unknown key {key!r} in [{section}]", lines.get((sec, key)), key)
            field_name, kind = entry
            values[field_name] = _convert(raw, kind, key, lines.get((sec, key)))

    problem = values.pop("problem", None)
    if problem is None:
        raise ConfigError("missing [problem] id", None, "id")
    problem = problem.upper()
    try:
        merged = problem_defaults(problem)
    except ConfigError as exc:
        raise ConfigError(str(exc), lines.get(("problem", "id")), "id") from None
    merged.update(values)
    perm = merged.get("permeability_file")
    if perm is not None and base_dir is not None and not Path(perm).is_absolute():
        merged["permeability_file"] = str(Path(base_dir) / perm)
    return validate(RunConfig(**merged), lines)


def parse_config(path) -> RunConfig:
    """Parse and validate a configuration file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_string(text, base_dir=path.parent)


def serialize(cfg: RunConfig) -> str:
    """Render every setting explicitly; ``parse_string(serialize(c)) == c``."""
    by_section = {}
    for (sec, key), (field_name, kind) in _SCHEMA.items():
        value = getattr(cfg, field_name)
        if value is None:
            continue
        if kind == "floats":
            text = ", ".join(repr(float(v)) for v in value)
        elif kind is float:
            text = repr(float(value))
        elif kind is bool:
            text = "true" if value else "false"
        else:
            text = str(value)
        by_section.setdefault(sec, []).append(f"{key} = {text}")
    out = []
    for sec, items in by_section.items():
        out.append(f"[{sec}]")
        out.extend(items)
        out.append("")
    return "\n".join(out)


def with_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Apply non-``None`` overrides (command-line flags) and re-validate."""
    known = {f.name for f in fields(RunConfig)}
    clean = {k: v for k, v in overrides.items() if v is not None}
    unknown = set(clean) - known
    if unknown:
        raise ConfigError(f"unknown settings {sorted(unknown)}")
    return validate(replace(cfg, **clean))
