"""Run configuration: grid parameters plus pipeline knobs.

Config files are flat ``key = value`` text — one key per line, ``#``
comments, no sections.  Every key mirrors a field here or on GridConfig,
so the file format and the API never drift apart.  CLI flags override
file values; file values override defaults.

Recognised keys::

    h_min h_max delta sigma a_self p_min m_init      (grid)
    update_stride window snapshot_every baseline      (pipeline)
    dataset out seed                                  (run)
    exclusion_box = x0,y0,z0,x1,y1,z1                 (repeatable)
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from terramap.errors import InvalidConfigError
from terramap.hmm_grid import GridConfig
from terramap.observation import Box

_GRID_KEYS = {f.name for f in fields(GridConfig)}
_INT_KEYS = {"m_init", "update_stride", "window", "snapshot_every", "seed", "baseline"}
_STR_KEYS = {"dataset", "out"}


@dataclass(frozen=True)
class RunConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    update_stride: int = 10
    window: int = 1000
    snapshot_every: int = 100
    exclusion_boxes: tuple[Box, ...] = ()
    dataset: str | None = None
    out: str | None = None
    seed: int = 0
    baseline: int = 0

    def __post_init__(self):
        if self.update_stride < 1:
            raise InvalidConfigError(f"update_stride must be >= 1, got {self.update_stride}")
        if self.window < 1:
            raise InvalidConfigError(f"window must be >= 1, got {self.window}")
        if self.snapshot_every < 1:
            raise InvalidConfigError(
                f"snapshot_every must be >= 1, got {self.snapshot_every}"
            )
        if self.baseline < 0:
            raise InvalidConfigError(f"baseline must be >= 0, got {self.baseline}")


def _parse_box(text: str, where: str) -> Box:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 6:
        raise InvalidConfigError(f"{where}: exclusion_box needs 6 numbers, got {text!r}")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise InvalidConfigError(f"{where}: exclusion_box has a non-numeric field: {text!r}")
    return Box(lo=np.array(vals[:3]), hi=np.array(vals[3:]))


def parse_config_text(text: str, where: str = "<config>") -> dict:
    """Parse key=value lines into a raw {key: parsed value} dict."""
    raw: dict = {}
    boxes: list[Box] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"{where}:{line_no}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "exclusion_box":
            boxes.append(_parse_box(value, f"{where}:{line_no}"))
            continue
        if key not in _GRID_KEYS and key not in _INT_KEYS and key not in _STR_KEYS:
            raise InvalidConfigError(f"{where}:{line_no}: unknown key {key!r}")
        if key in _STR_KEYS:
            raw[key] = value
        elif key in _INT_KEYS:
            try:
                raw[key] = int(value)
            except ValueError:
                raise InvalidConfigError(
                    f"{where}:{line_no}: {key} needs an integer, got {value!r}"
                )
        else:
            if key == "sigma" and value.lower() == "none":
                raw[key] = None
                continue
            try:
                raw[key] = float(value)
            except ValueError:
                raise InvalidConfigError(
                    f"{where}:{line_no}: {key} needs a number, got {value!r}"
                )
    if boxes:
        raw["exclusion_boxes"] = tuple(boxes)
    return raw


def build_run_config(raw: dict) -> RunConfig:
    """Assemble a RunConfig from a raw key dict (grid keys picked out)."""
    grid_kwargs = {k: v for k, v in raw.items() if k in _GRID_KEYS}
    run_kwargs = {k: v for k, v in raw.items() if k not in _GRID_KEYS}
    return RunConfig(grid=GridConfig(**grid_kwargs), **run_kwargs)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise InvalidConfigError(f"config file not found: {path}")
    return build_run_config(parse_config_text(path.read_text(), where=str(path)))


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Override individual fields (None values are ignored)."""
    live = {k: v for k, v in overrides.items() if v is not None}
    grid_kwargs = {k: live.pop(k) for k in list(live) if k in _GRID_KEYS}
    if grid_kwargs:
        cfg = replace(cfg, grid=replace(cfg.grid, **grid_kwargs))
    return replace(cfg, **live) if live else cfg


def config_echo(cfg: RunConfig) -> str:
    """The effective mapping configuration in config-file syntax.

    Paths and the output location are run-local and deliberately left
    out, so the echo is stable across reruns in different directories.
    """
    g = cfg.grid
    lines = [
        f"h_min = {g.h_min:.9g}",
        f"h_max = {g.h_max:.9g}",
        f"delta = {g.delta:.9g}",
        f"sigma = {g.sigma:.9g}",
        f"a_self = {g.a_self:.9g}",
        f"p_min = {g.p_min:.9g}",
        f"m_init = {g.m_init}",
        f"update_stride = {cfg.update_stride}",
        f"window = {cfg.window}",
        f"snapshot_every = {cfg.snapshot_every}",
        f"seed = {cfg.seed}",
        f"baseline = {cfg.baseline}",
    ]
    for box in cfg.exclusion_boxes:
        vals = ",".join("%.9g" % v for v in (*box.lo, *box.hi))
        lines.append(f"exclusion_box = {vals}")
    return "\n".join(lines) + "\n"
