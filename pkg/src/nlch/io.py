"""Run configuration, snapshot and telemetry files.

Config files are flat ``section.key = value`` lines; ``#`` starts a comment.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .experiments import PRESETS, StudySpec, preset
from .krylov import PRECONDITIONERS

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SNAPSHOT_TAG = "nlch-snapshot v1"
TELEMETRY_HEADER = ["step", "t", "mass", "r", "sqrtE1C0",
                    "modified_energy", "original_energy", "cg_iters"]


class ConfigError(ValueError):
    pass


SCHEMES = ("sav1", "sav2")
PREDICTORS = ("extrapolate", "solve")
SOLVERS = ("fast_cg", "direct")

# config key -> (RunConfig attribute, type, allowed values)
KEYS = {
    "version": ("version", int, None),
    "domain.L": ("L", float, None),
    "grid.M": ("M", int, None),
    "time.dt": ("dt", float, None),
    "time.T": ("T", float, None),
    "model.epsilon": ("epsilon", float, None),
    "model.mobility": ("mobility", float, None),
    "model.delta": ("delta", float, None),
    "model.C0": ("C0", float, None),
    "scheme": ("scheme", str, SCHEMES),
    "predictor": ("predictor", str, PREDICTORS),
    "solver": ("solver", str, SOLVERS),
    "cg.tol": ("cg_tol", float, None),
    "cg.max_iter": ("cg_max_iter", int, None),
    "cg.precond": ("cg_precond", str, PRECONDITIONERS),
    "init": ("init", str, PRESETS),
    "init.seed": ("seed", int, None),
    "output.dir": ("output_dir", str, None),
    "output.snapshot_every": ("snapshot_every", int, None),
}


@dataclass(frozen=True)
class RunConfig:
    init: str = "example1"
    L: float = 1.0
    M: int = 32
    dt: float = 0.05 / 16
    T: float = 0.05
    epsilon: float = math.sqrt(0.1)
    mobility: float = 1.0
    delta: float = math.sqrt(0.1)
    C0: float = 1.0
    scheme: str = "sav2"
    predictor: str = "extrapolate"
    solver: str = "fast_cg"
    cg_tol: float = 1e-10
    cg_max_iter: int = 5000
    cg_precond: str = "none"
    seed: int = 0
    output_dir: str = "out"
    snapshot_every: int = 0
    version: int = FORMAT_VERSION
    # keys given explicitly in the parsed text
    explicit: frozenset = field(default=frozenset(), compare=False, repr=False)

    def to_spec(self, base: StudySpec | None = None) -> StudySpec:
        """Merge into a :class:`StudySpec`.

        With ``base`` (a preset study) only explicitly set keys override it.
        """
        values = {
            "preset": self.init, "L": self.L, "M": self.M, "dt": self.dt, "T": self.T,
            "epsilon": self.epsilon, "mobility": self.mobility, "delta": self.delta,
            "C0": self.C0, "scheme": self.scheme, "predictor": self.predictor,
            "solver": self.solver, "cg_tol": self.cg_tol, "cg_max_iter": self.cg_max_iter,
            "cg_precond": self.cg_precond, "seed": self.seed,
        }
        if base is None:
            return StudySpec(**values)
        attrs = {KEYS[k][0] for k in self.explicit}
        keep = {k: v for k, v in values.items() if k in attrs}
        return replace(base, **keep)


def config_from_spec(spec: StudySpec, **extra) -> RunConfig:
    return RunConfig(
        init=spec.preset, L=spec.L, M=spec.M, dt=spec.dt, T=spec.T, epsilon=spec.epsilon,
        mobility=spec.mobility, delta=spec.delta, C0=spec.C0, scheme=spec.scheme,
        predictor=spec.predictor, solver=spec.solver, cg_tol=spec.cg_tol,
        cg_max_iter=spec.cg_max_iter, cg_precond=spec.cg_precond, seed=spec.seed, **extra,
    )


def preset_config(name: str, paper_scale: bool = False) -> RunConfig:
    return config_from_spec(preset(name, paper_scale=paper_scale))


def preset_path(name: str) -> Path:
    """Location of the shipped config file for a preset."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}")
    return Path(__file__).with_name("presets") / f"{name}.cfg"


def _where(lineno: int) -> str:
    return f"line {lineno}: " if lineno else ""


def _convert(key: str, raw: str, lineno: int = 0):
    attr, typ, allowed = KEYS[key]
    if typ is int:
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{_where(lineno)}{key} expects an integer, got {raw!r}") from None
    elif typ is float:
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError(f"{_where(lineno)}{key} expects a number, got {raw!r}") from None
        if not math.isfinite(value):
            raise ConfigError(f"{_where(lineno)}{key} must be finite, got {raw!r}")
    else:
        value = raw
    if typ is str and key == "solver" and value in ("fast", "cg"):
        value = "fast_cg"
    if allowed is not None and value not in allowed:
        raise ConfigError(f"{_where(lineno)}{key} = {raw!r} is not one of {', '.join(allowed)}")
    return attr, value


def parse_config(text: str) -> RunConfig:
    """Parse config text; keys that are not given fall back to the ``init`` preset."""
    values: dict[str, object] = {}
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if not raw:
            raise ConfigError(f"line {lineno}: missing value for {key}")
        seen.add(key)
        attr, value = _convert(key, raw, lineno)
        values[attr] = value

    if values.get("version", FORMAT_VERSION) != FORMAT_VERSION:
        raise ConfigError(f"unsupported config version {values['version']}")
    base = preset_config(values.get("init", "example1"))
    missing = sorted(k for k in KEYS if k not in seen)
    if missing:
        log.info("config keys defaulted from preset %s: %s", base.init, ", ".join(missing))
    cfg = replace(base, explicit=frozenset(seen), **values)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    for key in ("domain.L", "time.dt", "time.T", "model.epsilon", "model.mobility",
                "model.delta", "model.C0"):
        if not getattr(cfg, KEYS[key][0]) > 0:
            raise ConfigError(f"{key} must be positive")
    if cfg.M < 2:
        raise ConfigError("grid.M must be at least 2")
    if not 0 < cfg.cg_tol < 1:
        raise ConfigError("cg.tol must lie in (0, 1)")
    if cfg.cg_max_iter < 1:
        raise ConfigError("cg.max_iter must be at least 1")
    if cfg.snapshot_every < 0:
        raise ConfigError("output.snapshot_every must be non-negative")
    if cfg.T < cfg.dt:
        raise ConfigError("time.T must be at least one step time.dt")


def render_config(cfg: RunConfig) -> str:
    lines = []
    for key, (attr, typ, _) in KEYS.items():
        value = getattr(cfg, attr)
        lines.append(f"{key} = {value!r}" if typ is float else f"{key} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config(text)


# --- snapshots ----------------------------------------------------------------

def write_snapshot(path, t: float, field: np.ndarray, L: float = 1.0) -> None:
    """Write ``phi`` as text: header, then row ``j`` holds ``phi[0..M, j]``."""
    field = np.asarray(field, dtype=float)
    M = field.shape[0] - 1
    with open(path, "w") as fh:
        fh.write(f"# {SNAPSHOT_TAG} t={float(t)!r} M={M} L={float(L)!r}\n")
        for row in field:
            fh.write(" ".join("%.17g" % x for x in row))
            fh.write("\n")


def read_snapshot(path):
    """Return ``(t, field, L)`` from a snapshot file."""
    with open(path) as fh:
        header = fh.readline().split()
        if header[:3] != ["#"] + SNAPSHOT_TAG.split():
            raise ValueError(f"{path}: not an nlch snapshot")
        meta = dict(item.split("=", 1) for item in header[3:])
        M = int(meta["M"])
        field = np.loadtxt(fh, ndmin=2)
    if field.shape != (M + 1, M + 1):
        raise ValueError(f"{path}: expected {M + 1} x {M + 1} values, got {field.shape}")
    return float(meta["t"]), field, float(meta["L"])


def write_telemetry(path, samples: Iterable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TELEMETRY_HEADER)
        for s in samples:
            w.writerow([s.step, repr(float(s.t)), repr(float(s.mass)), repr(float(s.r)),
                        repr(float(s.sqrtE1C0)), repr(float(s.modified_energy)),
                        repr(float(s.original_energy)), s.cg_iterations])


def read_telemetry(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        rec = {k: float(v) for k, v in row.items()}
        rec["step"] = int(rec["step"])
        rec["cg_iters"] = int(rec["cg_iters"])
        out.append(rec)
    return out
