"""Run configuration files.

A configuration is a sequence of ``[section]`` headers followed by
``key = value [unit]`` lines; ``#`` starts a comment. Every physical quantity
carries a unit (lengths nm, µm/um, mm, cm, m; times ps, ns, s; rates Hz,
kHz) and is stored in SI. Unknown sections or keys, duplicate keys, missing
required keys and malformed values are errors that name the line and key.

Example::

    [source]
    wavelength = 780 nm
    coherence_time = 0.2 ns
    mean_rate = 600 kHz
"""

import math
import re
from decimal import Decimal
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .detection import DetectorSpec
from .errors import ConfigError, InvalidArgumentError
from .field import Grid1D, SourceSpec
from .optics import BenchGeometry, MaskSpec, pinhole_array, uniform_mask
from .scenarios import (GhostConfig, HbtConfig, image_plane_coherence_width,
                        suggested_temporal_modes)

SCENARIOS = ("hbt", "ghost", "check-lens", "ideal-curve", "selftest")

# decimal exponent of each unit; scaling is done in decimal so that
# "12.4 cm" becomes the double nearest 0.124
UNITS = {
    "length": {"nm": -9, "µm": -6, "μm": -6, "um": -6, "mm": -3, "cm": -2, "m": 0},
    "time": {"ps": -12, "ns": -9, "s": 0},
    "rate": {"Hz": 0, "kHz": 3},
}
BASE_UNIT = {"length": "m", "time": "s", "rate": "Hz"}

REQUIRED = object()

# kind is a unit family, "float", "int", "bool", "path", or a tuple of choices;
# "length|auto" and "float|suggested" additionally accept the given word
SCHEMA: Dict[str, Dict[str, Tuple[Any, Any]]] = {
    "run": {
        "scenario": (SCENARIOS, None),
        "seed": ("int", 0),
        "threads": ("int", 1),
    },
    "source": {
        "diameter": ("length", 1e-3),
        "wavelength": ("length", REQUIRED),
        "coherence_time": ("time", REQUIRED),
        "mean_rate": ("rate", REQUIRED),
    },
    "detector1": {
        "center": ("length", 0.0),
        "aperture": ("length", 2e-3),
        "efficiency": ("float", 1.0),
        "jitter": ("time", 0.0),
    },
    "detector2": {
        "center": ("length", 0.0),
        "aperture": ("length", 2e-3),
        "efficiency": ("float", 1.0),
        "jitter": ("time", 0.0),
    },
    "tac": {
        "range_min": ("time", REQUIRED),
        "range_max": ("time", REQUIRED),
        "bin_width": ("time", REQUIRED),
        "mode": (("first-stop", "all-pairs"), "first-stop"),
        "peak_halfwidth": ("time", 0.25e-9),
        "baseline_exclusion": ("time", 5e-9),
        "stop_delay": ("time", 0.0),
    },
    "hbt": {
        "integration_time": ("time", 1.0),
        "segment": ("time", 5.0),
        "intensity": (("shared", "independent"), "shared"),
        "route": (("events", "trace"), "events"),
        "lineshape": (("lorentzian", "gaussian"), "lorentzian"),
        "dark_rate": ("rate", 0.0),
        "dead_time": ("time", 0.0),
        "save_tags": ("bool", False),
    },
    "tags": {
        "start_file": ("path", REQUIRED),
        "stop_file": ("path", REQUIRED),
    },
    "geometry": {
        "z1": ("length", REQUIRED),
        "z2": ("length", REQUIRED),
        "z3": ("length", REQUIRED),
        "f": ("length", REQUIRED),
        "tolerance": ("float", 0.005),
        "warn_tolerance": ("float", 0.01),
    },
    "mask": {
        "type": (("pinholes", "open"), "pinholes"),
        "count": ("int", 2),
        "separation": ("length", 1.3e-3),
        "hole_diameter": ("length", 0.5e-3),
    },
    "reference": {
        "aperture": ("length", 2e-3),
        "efficiency": ("float", 1.0),
    },
    "bucket": {
        "efficiency": ("float", 1.0),
    },
    "scan": {
        "start": ("length", REQUIRED),
        "stop": ("length", REQUIRED),
        "step": ("length", REQUIRED),
        "frames": ("int", 2000),
        "temporal_modes": ("float|suggested", 1.0),
        "window_halfwidth": ("time", 0.25e-9),
        "jitter": ("time", 1.3e-9),
        "lens_aperture": ("length|auto", "auto"),
    },
    "grid": {
        "points": ("int", 8192),
        "pitch": ("length", 10e-6),
    },
    "ideal": {
        "coherence_width": ("length|auto", 0.0),
        "n_features": ("int|auto", "auto"),
    },
}

SCENARIO_SECTIONS = {
    "hbt": ("source", "detector1", "detector2", "tac"),
    "ghost": ("source", "geometry", "scan"),
    "check-lens": ("geometry",),
    "ideal-curve": ("geometry", "scan"),
    "selftest": (),
}

_NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_QUANTITY = re.compile(rf"^({_NUMBER})\s*([^\s\d].*)?$")


@dataclass
class RunConfig:
    """Parsed configuration; section values are in SI with defaults filled.

    The ``[run]`` section is held in ``scenario``, ``seed`` and ``threads``.
    """

    scenario: Optional[str]
    seed: int
    threads: int
    sections: Dict[str, Dict[str, Any]]
    lines: Dict[Tuple[str, str], int] = field(default_factory=dict, compare=False,
                                              repr=False)

    def has(self, section: str) -> bool:
        return section in self.sections

    def section(self, name: str) -> Dict[str, Any]:
        """Values of ``name``; defaults if the section is absent but fully defaultable."""
        if name in self.sections:
            return self.sections[name]
        values = {}
        for key, (_, default) in SCHEMA[name].items():
            if default is REQUIRED:
                raise ConfigError(f"section [{name}] is required", key=f"{name}.{key}")
            values[key] = default
        return values

    def line_of(self, section: str, key: str) -> Optional[int]:
        return self.lines.get((section, key))


def _parse_value(kind, text, lineno, key):
    def fail(msg):
        raise ConfigError(msg, line=lineno, key=key)

    if isinstance(kind, tuple):
        if text not in kind:
            fail(f"expected one of {', '.join(kind)}, got {text!r}")
        return text
    if "|" in kind:
        base, word = kind.split("|")
        if text == word:
            return word
        kind = base
    if kind == "path":
        if not text:
            fail("empty path")
        return text
    if kind == "bool":
        lowered = text.lower()
        if lowered in ("true", "yes", "1"):
            return True
        if lowered in ("false", "no", "0"):
            return False
        fail(f"expected true or false, got {text!r}")
    match = _QUANTITY.match(text)
    if not match:
        fail(f"malformed value {text!r}")
    number, unit = match.group(1), (match.group(2) or "").strip()
    if kind == "int":
        if unit:
            fail(f"count takes no unit, got {unit!r}")
        try:
            return int(number)
        except ValueError:
            fail(f"expected an integer, got {number!r}")
    if kind == "float":
        if unit:
            fail(f"dimensionless value takes no unit, got {unit!r}")
        return float(number)
    if not unit:
        fail(f"missing unit; use one of {', '.join(UNITS[kind])}")
    if unit not in UNITS[kind]:
        fail(f"unknown {kind} unit {unit!r}; use one of {', '.join(UNITS[kind])}")
    return float(Decimal(number).scaleb(UNITS[kind][unit]))


def parse_config(text: str) -> RunConfig:
    """Parse configuration text. Raises :class:`ConfigError` with line and key."""
    sections: Dict[str, Dict[str, Any]] = {}
    lines: Dict[Tuple[str, str], int] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", line=lineno)
            name = line[1:-1].strip()
            if name not in SCHEMA:
                raise ConfigError(f"unknown section [{name}]", line=lineno)
            if name in sections:
                raise ConfigError(f"section [{name}] appears twice", line=lineno)
            sections[name] = {}
            lines[(name, "")] = lineno
            current = name
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=lineno)
        if current is None:
            raise ConfigError("key outside any [section]", line=lineno, key=key)
        qualified = f"{current}.{key}"
        if key not in SCHEMA[current]:
            raise ConfigError(f"unknown key in [{current}]", line=lineno, key=qualified)
        if key in sections[current]:
            first = lines[(current, key)]
            raise ConfigError(f"duplicate key (first set on line {first})", line=lineno,
                              key=qualified)
        kind = SCHEMA[current][key][0]
        sections[current][key] = _parse_value(kind, value, lineno, qualified)
        lines[(current, key)] = lineno
    for name, values in sections.items():
        for key, (_, default) in SCHEMA[name].items():
            if key not in values:
                if default is REQUIRED:
                    raise ConfigError(f"missing required key in [{name}]",
                                      line=lines[(name, "")], key=f"{name}.{key}")
                values[key] = default
    run = sections.pop("run", {})
    return RunConfig(run.get("scenario"), int(run.get("seed", 0)), int(run.get("threads", 1)),
                     sections, lines)


def _format_value(kind, value) -> str:
    if isinstance(kind, tuple) or kind == "path":
        return str(value)
    if isinstance(value, str):
        return value
    if kind == "bool":
        return "true" if value else "false"
    base = kind.split("|")[0]
    if base in ("int",):
        return str(int(value))
    if base == "float":
        return repr(float(value))
    return f"{float(value)!r} {BASE_UNIT[base]}"


def format_config(cfg: RunConfig, include_run: bool = True) -> str:
    """Serialise in SI base units; :func:`parse_config` recovers an equal config."""
    out = []
    for name in SCHEMA:
        if name == "run":
            if not include_run:
                continue
            values = {"scenario": cfg.scenario, "seed": cfg.seed, "threads": cfg.threads}
        elif name in cfg.sections:
            values = cfg.sections[name]
        else:
            continue
        out.append(f"[{name}]")
        for key, (kind, _) in SCHEMA[name].items():
            if key in values and values[key] is not None:
                out.append(f"{key} = {_format_value(kind, values[key])}")
        out.append("")
    return "\n".join(out)


# -- builders ---------------------------------------------------------------------

def require_sections(cfg: RunConfig, scenario: str):
    for name in SCENARIO_SECTIONS[scenario]:
        if name == "source" and scenario == "hbt" and cfg.has("tags"):
            continue
        if not cfg.has(name):
            raise ConfigError(f"scenario '{scenario}' needs a [{name}] section", key=name)


def _checked(build, cfg: RunConfig, section: str):
    try:
        return build()
    except ConfigError:
        raise
    except InvalidArgumentError as exc:
        # bad values are configuration errors; geometry and numerical
        # failures keep their own exit codes
        raise ConfigError(f"[{section}] {exc}", line=None) from None


def source_spec(cfg: RunConfig) -> SourceSpec:
    s = cfg.section("source")
    return _checked(lambda: SourceSpec(s["diameter"], s["wavelength"], s["coherence_time"],
                                       s["mean_rate"]), cfg, "source")


def detector_spec(cfg: RunConfig, name: str) -> DetectorSpec:
    d = cfg.section(name)
    return _checked(lambda: DetectorSpec(d["center"], d["aperture"], d["efficiency"],
                                         d["jitter"]), cfg, name)


def bench_geometry(cfg: RunConfig) -> BenchGeometry:
    g = cfg.section("geometry")
    return _checked(lambda: BenchGeometry(g["z1"], g["z2"], g["z3"], g["f"]), cfg, "geometry")


def mask_spec(cfg: RunConfig) -> MaskSpec:
    m = cfg.section("mask")
    if m["type"] == "open":
        return uniform_mask(1.0, "open")
    return _checked(lambda: pinhole_array(m["count"], m["separation"], m["hole_diameter"]),
                    cfg, "mask")


def scan_positions(cfg: RunConfig) -> np.ndarray:
    s = cfg.section("scan")
    start, stop, step = s["start"], s["stop"], s["step"]
    if not step > 0 or stop < start:
        raise ConfigError("scan needs step > 0 and stop >= start", key="scan.step",
                          line=cfg.line_of("scan", "step"))
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return start + np.arange(n) * step


def hbt_config(cfg: RunConfig) -> HbtConfig:
    require_sections(cfg, "hbt")
    t = cfg.section("tac")
    h = cfg.section("hbt")
    return _checked(lambda: HbtConfig(
        source=source_spec(cfg),
        detectors=(detector_spec(cfg, "detector1"), detector_spec(cfg, "detector2")),
        tau_range=(t["range_min"], t["range_max"]), bin_width=t["bin_width"],
        integration_time=h["integration_time"], master_seed=cfg.seed,
        segment_duration=h["segment"], tac_mode=t["mode"],
        peak_halfwidth=t["peak_halfwidth"], baseline_exclusion=t["baseline_exclusion"],
        stop_delay=t["stop_delay"], shared_intensity=h["intensity"] == "shared",
        route=h["route"], dark_rate=h["dark_rate"], dead_time=h["dead_time"],
        lineshape=h["lineshape"]), cfg, "hbt")


def ghost_config(cfg: RunConfig) -> GhostConfig:
    require_sections(cfg, "ghost")
    source = source_spec(cfg)
    s = cfg.section("scan")
    r = cfg.section("reference")
    grid = cfg.section("grid")
    modes = s["temporal_modes"]
    if modes == "suggested":
        modes = suggested_temporal_modes(source.coherence_time, s["jitter"],
                                         s["window_halfwidth"])
    lens = None if s["lens_aperture"] == "auto" else s["lens_aperture"]
    return _checked(lambda: GhostConfig(
        source=source, geometry=bench_geometry(cfg), mask=mask_spec(cfg),
        reference=DetectorSpec(0.0, r["aperture"], r["efficiency"]),
        positions=tuple(scan_positions(cfg)), frames_per_position=s["frames"],
        temporal_modes=modes, master_seed=cfg.seed, grid=Grid1D(grid["points"], grid["pitch"]),
        lens_aperture=lens, bucket_efficiency=cfg.section("bucket")["efficiency"],
        lens_tolerance=cfg.section("geometry")["warn_tolerance"]), cfg, "scan")


def ideal_inputs(cfg: RunConfig):
    """Arguments for :func:`ghostsim.scenarios.ideal_ghost_curve`."""
    require_sections(cfg, "ideal-curve")
    geom = bench_geometry(cfg)
    mask = mask_spec(cfg)
    ideal = cfg.section("ideal")
    n = ideal["n_features"]
    if n == "auto":
        if mask.n_features is None:
            raise ConfigError("n_features must be given for an open mask",
                              key="ideal.n_features")
        n = mask.n_features
    width = ideal["coherence_width"]
    if width == "auto":
        width = image_plane_coherence_width(source_spec(cfg), geom.z1)
    r = cfg.section("reference")
    det = DetectorSpec(0.0, r["aperture"], r["efficiency"])
    return geom, mask, n, det, width, scan_positions(cfg)
