"""Run configuration: INI file plus command-line overrides.

Every key has a default; a file only needs the keys it changes. The config
hash covers everything that can change an artifact, so it excludes the
worker count and the output directory.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .counterfactual import MODES
from .equilibrium import CostFamily
from .synthetic import CartelSpec, MarketConfig, XDist


def _family(text: str) -> CostFamily:
    """``uniform LO HI`` | ``power LO HI SHAPE`` | ``truncnormal LO HI MU SIGMA``."""
    kind, *nums = text.split()
    v = [float(x) for x in nums]
    if kind == "uniform" and len(v) == 2:
        return CostFamily("uniform", *v)
    if kind == "power" and len(v) == 3:
        return CostFamily("power", v[0], v[1], shape=v[2])
    if kind == "truncnormal" and len(v) == 4:
        return CostFamily("truncnormal", v[0], v[1], mu=v[2], sigma=v[3])
    raise ValueError(f"bad cost family {text!r}")


def _xdist(text: str) -> XDist:
    kind, *nums = text.split()
    v = [float(x) for x in nums]
    if kind == "constant" and len(v) == 1:
        return XDist("constant", v[0], v[0] + 1.0)
    if kind in ("uniform", "lognormal") and len(v) == 2:
        return XDist(kind, *v)
    raise ValueError(f"bad engineer-estimate distribution {text!r}")


def _ids(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.replace(";", ",").split(",") if s.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class SimulateSection:
    n_auctions: int = 600
    n_min: int = 3
    n_max: int = 6
    p_regular: float = 0.5
    n_regular: int = 8
    n_fringe: int = 40
    family0: str = "uniform 0.2 1.0"
    family1: str = "uniform 0.0 1.0"
    estimate: str = "uniform 1.0 10.0"
    cartel: str = "R001,R002,R003,R004"
    conduct: str = "designated-low"
    cover_low: float = 0.05
    cover_high: float = 0.15
    markup: float = 0.1
    duration_days: int = 182
    grid_size: int = 2000


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    input: str = ""  # bids CSV; empty means simulate
    # classify
    types: str = "classify"  # classify | keep
    rev_threshold: float = 0.01
    part_threshold: float = 0.03
    # estimate
    log_bids: bool = True
    density: str = "cdf-slope"
    h_n: float = 1.0
    h_G0: float = math.nan
    h_g0: float = math.nan
    h_G1: float = math.nan
    h_g1: float = math.nan
    # screen
    alpha: float = 0.05
    min_joint: int = 15
    whiten: bool = True
    # counterfactual
    pricing_mode: str = "cm"
    meb: float = 0.3
    reserve: bool = True
    rings: str = "tight,broad"
    custom_ring: str = ""
    # verify-cm
    cm_n: int = 3
    cm_grid: str = "1,2,3,4,5"
    cm_t: float = 1.0
    simulate: SimulateSection = field(default_factory=SimulateSection)

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.min_joint < 1:
            raise ValueError("min_joint must be >= 1")
        if self.pricing_mode not in MODES:
            raise ValueError(f"pricing_mode must be one of {MODES}")
        if self.meb < 0:
            raise ValueError("meb must be nonnegative")
        if self.types not in ("classify", "keep"):
            raise ValueError("types must be 'classify' or 'keep'")
        unknown = set(_ids(self.rings)) - {"tight", "broad", "custom", "planted"}
        if unknown:
            raise ValueError(f"unknown ring label(s) {sorted(unknown)}")

    # derived objects
    def market_config(self) -> MarketConfig:
        s = self.simulate
        cartel = None
        if _ids(s.cartel):
            cartel = CartelSpec(_ids(s.cartel), s.conduct, s.markup, (s.cover_low, s.cover_high))
        return MarketConfig(
            n_auctions=s.n_auctions,
            n_range=(s.n_min, s.n_max),
            p_regular=s.p_regular,
            family0=_family(s.family0),
            family1=_family(s.family1),
            x_dist=_xdist(s.estimate),
            n_regular=s.n_regular,
            n_fringe=s.n_fringe,
            seed=self.seed,
            cartel=cartel,
            duration_days=s.duration_days,
            grid_size=s.grid_size,
        )

    def ring_labels(self) -> tuple[str, ...]:
        return _ids(self.rings)

    def cm_grid_values(self) -> tuple[float, ...]:
        return tuple(float(x) for x in _ids(self.cm_grid))

    def canonical(self) -> dict:
        d = asdict(self)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# INI section -> RunConfig field names living there
_SECTIONS = {
    "run": ("seed", "input"),
    "classify": ("types", "rev_threshold", "part_threshold"),
    "estimate": ("log_bids", "density", "h_n", "h_G0", "h_g0", "h_G1", "h_g1"),
    "screen": ("alpha", "min_joint", "whiten"),
    "counterfactual": ("pricing_mode", "meb", "reserve", "rings", "custom_ring"),
    "verify": ("cm_n", "cm_grid", "cm_t"),
}


def _convert(kind, text: str):
    if kind in (bool, "bool"):
        return _bool(text)
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return math.nan if text.strip().lower() in ("", "auto", "nan") else float(text)
    return text.strip()


def _types(cls) -> dict[str, str]:
    return {f.name: f.type for f in fields(cls)}


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Read an INI file (sections ``run``, ``simulate``, ``classify``, ``estimate``,
    ``screen``, ``counterfactual``, ``verify``) and apply non-None overrides."""
    top: dict = {}
    sim: dict = {}
    base_dir = None
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(str(path))
        base_dir = path.parent
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        cp.optionxform = str  # keys are case-sensitive (h_G0 vs h_g0)
        cp.read(path)
        known = set(_SECTIONS) | {"simulate"}
        extra = set(cp.sections()) - known
        if extra:
            raise ValueError(f"{path}: unknown section(s) {sorted(extra)}")
        rt, st = _types(RunConfig), _types(SimulateSection)
        for sec, names in _SECTIONS.items():
            if cp.has_section(sec):
                for key, val in cp.items(sec):
                    if key not in names:
                        raise ValueError(f"{path}: unknown key [{sec}] {key}")
                    top[key] = _convert(rt[key], val)
        if cp.has_section("simulate"):
            for key, val in cp.items("simulate"):
                if key not in st:
                    raise ValueError(f"{path}: unknown key [simulate] {key}")
                sim[key] = _convert(st[key], val)
    cfg = RunConfig(**top, simulate=SimulateSection(**sim))
    if cfg.input and base_dir is not None and not Path(cfg.input).is_absolute():
        cfg = replace(cfg, input=str(base_dir / cfg.input))
    ov = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **ov) if ov else cfg
