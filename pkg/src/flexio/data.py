"""Datasets: CSV ingestion, synthetic ground truth, bounds and serialisation.

Serialised files are JSON documents tagged with the magic string ``FLEXIO``
and a format version.  Floats are stored with ``float.hex`` so every numeric
field survives a round trip bit for bit.
"""
from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .fop import FopSolution, KktCertificate, solve_fop
from .model import (
    ComfortCosts,
    DaySample,
    DemandAttributes,
    FlexBounds,
    FlexDecision,
    Hyperparams,
    PriceSignal,
    build_comfort_costs,
    build_tou_prices,
)

__all__ = [
    "Dataset",
    "SchemaConfig",
    "SyntheticSpec",
    "load_csv",
    "default_bounds",
    "tdiff",
    "scale_half",
    "generate_synthetic",
    "save",
    "load",
    "MAGIC",
    "FORMAT_VERSION",
]

MAGIC = "FLEXIO"
FORMAT_VERSION = "1.0.0"


@dataclass(frozen=True)
class Dataset:
    """Ordered training or evaluation days with shared horizon and features."""

    days: tuple
    feature_names: tuple = ()
    dates: tuple = ()
    weekday: tuple = ()
    season: tuple = ()

    def __post_init__(self):
        days = tuple(self.days)
        if not days:
            raise ValueError("a dataset needs at least one day")
        T, F = days[0].T, days[0].features.shape[1]
        for i, d in enumerate(days):
            if d.T != T or d.features.shape[1] != F:
                raise ValueError(f"day {i} has shape ({d.T}, {d.features.shape[1]}), expected ({T}, {F})")
        idx = [d.day_index for d in days]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("day_index must be strictly increasing")
        names = tuple(self.feature_names) or tuple(f"x{j}" for j in range(F))
        if len(names) != F:
            raise ValueError(f"{len(names)} feature names for {F} features")
        object.__setattr__(self, "days", days)
        object.__setattr__(self, "feature_names", names)
        for name in ("dates", "weekday", "season"):
            value = tuple(getattr(self, name))
            if value and len(value) != len(days):
                raise ValueError(f"{name} has {len(value)} entries for {len(days)} days")
            object.__setattr__(self, name, value)

    @property
    def S(self) -> int:
        return len(self.days)

    @property
    def T(self) -> int:
        return self.days[0].T

    def demand(self) -> np.ndarray:
        return np.array([d.demand_hat for d in self.days])

    def generation(self) -> np.ndarray:
        return np.array([d.gen_hat for d in self.days])

    def split(self, n_train: int) -> tuple["Dataset", "Dataset"]:
        """First ``n_train`` days and the remainder."""
        if not 0 < n_train < self.S:
            raise ValueError(f"n_train must lie in [1, {self.S - 1}]")

        def part(sl):
            meta = {k: getattr(self, k)[sl] for k in ("dates", "weekday", "season") if getattr(self, k)}
            return Dataset(self.days[sl], self.feature_names, **meta)

        return part(slice(None, n_train)), part(slice(n_train, None))


# --------------------------------------------------------------------------
# CSV ingestion


@dataclass(frozen=True)
class SchemaConfig:
    """Column mapping of a demand CSV.

    ``tdiff`` optionally names a ``temperature`` and an ``apparent`` column
    (plus ``name`` and an additive ``offset``, e.g. 273.15 for Celsius); the
    derived feature is appended after ``features``.
    """

    date: str = "date"
    hour: str = "hour"
    net_demand: str = "net_demand_kwh"
    generation: str = "generation_kwh"
    features: tuple = ()
    weekdays_only: bool = False
    aggregate: str = "mean"
    tdiff: Optional[dict] = None
    scale_features: bool = False

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if self.aggregate not in ("mean", "sum"):
            raise ValueError("aggregate must be 'mean' or 'sum'")
        if self.tdiff is not None:
            missing = {"temperature", "apparent"} - set(self.tdiff)
            if missing:
                raise ValueError(f"tdiff config lacks {sorted(missing)}")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SchemaConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ValueError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**mapping)


def tdiff(temperature, apparent, offset: float = 0.0) -> np.ndarray:
    """Logarithmic-mean temperature ``(T - Ta) / (log T - log Ta)``.

    Equal arguments give the limit ``T``.  Both inputs (after ``offset``)
    must be positive.
    """
    a = np.asarray(temperature, dtype=float) + offset
    b = np.asarray(apparent, dtype=float) + offset
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("tdiff needs positive temperatures; set an offset")
    la, lb = np.log(a), np.log(b)
    same = np.isclose(a, b, rtol=1e-12, atol=0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(same, a, (a - b) / np.where(same, 1.0, la - lb))
    return out


def scale_half(x) -> np.ndarray:
    """Affine map of ``x`` onto [-0.5, 0.5]; constant input maps to 0."""
    x = np.asarray(x, dtype=float)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo) - 0.5


def _number(text: str, line: int, column: str) -> float:
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ValueError(f"line {line}, column {column!r}: not a number: {text!r}") from None
    if not math.isfinite(value):
        raise ValueError(f"line {line}, column {column!r}: non-finite value {text!r}")
    return value


def load_csv(path, schema: SchemaConfig | dict | None = None) -> Dataset:
    """Read an hourly (or finer, aggregated per hour) demand CSV.

    Rows sharing a date and hour are aggregated with the schema's statistic.
    Every date must cover the same hours ``0 .. T-1``.
    """
    if schema is None:
        schema = SchemaConfig()
    elif isinstance(schema, dict):
        schema = SchemaConfig.from_mapping(schema)
    path = Path(path)
    extra = []
    if schema.tdiff is not None:
        extra = [schema.tdiff["temperature"], schema.tdiff["apparent"]]
    wanted = [schema.date, schema.hour, schema.net_demand, schema.generation, *schema.features, *extra]
    cells: dict = defaultdict(list)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in dict.fromkeys(wanted) if c not in header]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        numeric = [schema.net_demand, schema.generation, *schema.features, *extra]
        for line, row in enumerate(reader, start=2):
            try:
                date = dt.date.fromisoformat(row[schema.date].strip()[:10])
            except (AttributeError, ValueError):
                raise ValueError(f"line {line}, column {schema.date!r}: bad date {row[schema.date]!r}") from None
            hour = _number(row[schema.hour], line, schema.hour)
            if hour != int(hour) or hour < 0:
                raise ValueError(f"line {line}, column {schema.hour!r}: bad hour {row[schema.hour]!r}")
            cells[(date, int(hour))].append([_number(row[c], line, c) for c in numeric])
    if not cells:
        raise ValueError(f"{path}: no data rows")
    dates = sorted({d for d, _ in cells})
    T = max(h for _, h in cells) + 1
    reduce = np.mean if schema.aggregate == "mean" else np.sum
    if schema.weekdays_only:
        dates = [d for d in dates if d.weekday() < 5]
        if not dates:
            raise ValueError(f"{path}: no weekdays left after filtering")
    values = np.empty((len(dates), T, len(wanted) - 2))
    for i, d in enumerate(dates):
        for h in range(T):
            rows = cells.get((d, h))
            if rows is None:
                raise ValueError(f"{path}: day {d.isoformat()} (index {i}) has no data for hour {h}")
            values[i, h] = reduce(np.array(rows), axis=0)
    demand, gen = values[..., 0], values[..., 1]
    feats = values[..., 2:2 + len(schema.features)]
    names = list(schema.features)
    if schema.scale_features and feats.shape[-1]:
        feats = np.stack([scale_half(feats[..., j]) for j in range(feats.shape[-1])], axis=-1)
    if schema.tdiff is not None:
        temp, app = values[..., -2], values[..., -1]
        td = scale_half(tdiff(temp, app, float(schema.tdiff.get("offset", 0.0))))
        feats = np.concatenate([feats, td[..., None]], axis=-1)
        names.append(schema.tdiff.get("name", "tdiff"))
    if np.any(gen < 0):
        raise ValueError(f"{path}: negative generation values")
    days = tuple(DaySample(demand[i], gen[i], feats[i].reshape(T, -1), i) for i in range(len(dates)))
    return Dataset(days, tuple(names), tuple(d.isoformat() for d in dates),
                   tuple(d.weekday() < 5 for d in dates), tuple(_season(d) for d in dates))


def _season(d: dt.date) -> str:
    return ("winter", "spring", "summer", "autumn")[(d.month % 12) // 3]


def default_bounds(dataset: Dataset | Sequence[DaySample]) -> list[FlexBounds]:
    """Envelope caps equal to the absolute observed demand, per day and hour."""
    days = dataset.days if isinstance(dataset, Dataset) else dataset
    out = []
    for d in days:
        K = np.abs(d.demand_hat)
        out.append(FlexBounds(K, K, K))
    return out


# --------------------------------------------------------------------------
# synthetic ground truth


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings for a household with known flexibility behaviour.

    Envelopes follow ``base * (1 + slope * temperature)`` per family, clipped
    at zero, where ``temperature`` is the first feature (scaled to about
    [-0.5, 0.5]).  Solar generation is a midday bell whose height varies from
    day to day.  ``noise_sigma`` is in kWh.
    """

    T: int = 24
    S: int = 10
    d_bl: Optional[tuple] = None
    env_base: tuple = (0.4, 0.5, 0.3)
    env_slope: tuple = (0.0, 0.0, 0.0)
    flat_price: float = 22.0
    tou: Optional[tuple] = None
    t_max: int = 8
    noise_sigma: float = 0.0
    gen_peak: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.T < 1 or self.S < 1:
            raise ValueError("need T >= 1 and S >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.t_max <= self.T:
            raise ValueError("t_max must lie in [0, T]")
        if len(self.env_base) != 3 or len(self.env_slope) != 3 or min(self.env_base) < 0:
            raise ValueError("env_base and env_slope need three entries, env_base nonnegative")
        for name in ("d_bl", "tou"):
            value = getattr(self, name)
            if value is not None:
                value = tuple(float(v) for v in value)
                if len(value) != self.T:
                    raise ValueError(f"{name} needs {self.T} entries")
                object.__setattr__(self, name, value)

    def baseload(self) -> np.ndarray:
        if self.d_bl is not None:
            return np.array(self.d_bl)
        h = np.arange(self.T) * 24.0 / self.T
        return 0.6 + 0.3 * np.exp(-((h - 8.0) ** 2) / 4.0) + 0.5 * np.exp(-((h - 19.0) ** 2) / 6.0)

    def tou_schedule(self) -> np.ndarray:
        if self.tou is not None:
            return np.array(self.tou)
        h = np.arange(self.T) * 24.0 / self.T
        tou = np.full(self.T, 15.0)
        tou[(h >= 7) & (h < 16)] = 22.0
        tou[(h >= 16) & (h < 21)] = 29.0
        if self.T < 6:
            tou = np.full(self.T, 15.0)
            tou[self.T // 2:] = 29.0
        return tou

    def tariff(self) -> tuple[PriceSignal, ComfortCosts]:
        tou = self.tou_schedule()
        prices = build_tou_prices(self.flat_price, tou)
        return prices, build_comfort_costs(prices, self.flat_price, tou)

    def envelopes(self, features) -> np.ndarray:
        """True envelopes (3, T) for one day's features."""
        temp = np.asarray(features, dtype=float)[:, 0]
        base = np.array(self.env_base)[:, None]
        slope = np.array(self.env_slope)[:, None]
        return np.maximum(base * (1.0 + slope * temp[None, :]), 0.0)


def _features(spec: SyntheticSpec, rng) -> np.ndarray:
    h = np.arange(spec.T) * 24.0 / spec.T
    level = rng.uniform(-0.3, 0.3)
    temp = level + 0.2 * np.sin(2 * np.pi * (h - 9.0) / 24.0) + rng.normal(0.0, 0.02, spec.T)
    return np.c_[np.clip(temp, -0.5, 0.5), np.sin(2 * np.pi * h / 24.0), np.cos(2 * np.pi * h / 24.0)]


def _generation(spec: SyntheticSpec, rng) -> np.ndarray:
    h = np.arange(spec.T) * 24.0 / spec.T
    bell = np.exp(-((h - 12.5) ** 2) / 8.0)
    return spec.gen_peak * rng.uniform(0.1, 1.0) * bell


def generate_synthetic(spec: SyntheticSpec):
    """Simulate a household that optimally responds to its tariff every day.

    Returns
    -------
    dataset : Dataset
        Observed net demand ``d_bl + d_sf + d_sd - g + noise``.
    truth : list of DemandAttributes
        True baseload and envelopes per day.
    decisions : list of FlexDecision
        The consumer's optimal decisions.
    """
    streams = np.random.SeedSequence(spec.seed).spawn(2)
    rng, noise_rng = np.random.default_rng(streams[0]), np.random.default_rng(streams[1])
    prices, costs = spec.tariff()
    d_bl = spec.baseload()
    days, truth, decisions = [], [], []
    for s in range(spec.S):
        X = _features(spec, rng)
        g = _generation(spec, rng)
        env = spec.envelopes(X)
        attrs = DemandAttributes(d_bl, env[0], env[1], env[2])
        sol = solve_fop(prices, costs, attrs, spec.t_max, g)
        eps = noise_rng.normal(0.0, spec.noise_sigma, spec.T) if spec.noise_sigma > 0 else np.zeros(spec.T)
        demand = d_bl + sol.d_sf + sol.d_sd - g + eps
        days.append(DaySample(demand, g, X, s))
        truth.append(attrs)
        decisions.append(sol.theta)
    ds = Dataset(tuple(days), ("temperature", "hour_sin", "hour_cos"))
    return ds, truth, decisions


# --------------------------------------------------------------------------
# serialisation


def _registry():
    from .fit import FitConfig, FitResult, SolverMode
    from .kernel import FeatureScaler, KernelEnvelopeModel

    classes = [Dataset, DaySample, FlexBounds, FlexDecision, DemandAttributes, PriceSignal, ComfortCosts,
               Hyperparams, KktCertificate, FopSolution, FeatureScaler, KernelEnvelopeModel, FitResult,
               FitConfig, SyntheticSpec]
    return {c.__name__: c for c in classes}, {"SolverMode": SolverMode}


def _encode(obj):
    if isinstance(obj, Enum):
        return {"__enum__": type(obj).__name__, "value": obj.value}
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {"__type__": type(obj).__name__,
                "fields": {f.name: _encode(getattr(obj, f.name)) for f in dataclasses.fields(obj)}}
    if isinstance(obj, np.ndarray):
        if obj.dtype.kind == "f":
            data = [float(v).hex() for v in obj.reshape(-1)]
        elif obj.dtype.kind in "iub":
            data = [int(v) for v in obj.reshape(-1)]
        else:
            raise TypeError(f"cannot serialise array of dtype {obj.dtype}")
        return {"__array__": obj.dtype.str, "shape": list(obj.shape), "data": data}
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return {"__float__": float(obj).hex()}
    if isinstance(obj, (list, tuple)):
        return {"__seq__": "tuple" if isinstance(obj, tuple) else "list", "items": [_encode(v) for v in obj]}
    if isinstance(obj, dict):
        return {"__dict__": [[k, _encode(v)] for k, v in obj.items()]}
    if obj is None or isinstance(obj, str):
        return obj
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _decode(obj, classes, enums):
    if isinstance(obj, list):
        return [_decode(v, classes, enums) for v in obj]
    if not isinstance(obj, dict):
        return obj
    if "__float__" in obj:
        return float.fromhex(obj["__float__"])
    if "__array__" in obj:
        dtype = np.dtype(obj["__array__"])
        if dtype.kind == "f":
            flat = np.array([float.fromhex(v) for v in obj["data"]], dtype=dtype)
        else:
            flat = np.array(obj["data"], dtype=dtype)
        return flat.reshape(obj["shape"])
    if "__enum__" in obj:
        return enums[obj["__enum__"]](obj["value"])
    if "__seq__" in obj:
        items = [_decode(v, classes, enums) for v in obj["items"]]
        return tuple(items) if obj["__seq__"] == "tuple" else items
    if "__dict__" in obj:
        return {k: _decode(v, classes, enums) for k, v in obj["__dict__"]}
    if "__type__" in obj:
        cls = classes[obj["__type__"]]
        kwargs = {k: _decode(v, classes, enums) for k, v in obj["fields"].items()}
        return cls(**kwargs)
    raise ValueError("malformed document")


def save(obj, path) -> None:
    """Write a dataset, fit result or other package object to a JSON file."""
    doc = {"magic": MAGIC, "version": FORMAT_VERSION, "payload": _encode(obj)}
    Path(path).write_text(json.dumps(doc, separators=(",", ":")), encoding="utf-8")


def load(path):
    """Read an object written by :func:`save`."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict) or doc.get("magic") != MAGIC:
        raise ValueError(f"{path}: not a {MAGIC} file")
    major = str(doc.get("version", "")).split(".")[0]
    if major != FORMAT_VERSION.split(".")[0]:
        raise ValueError(f"{path}: unsupported format version {doc.get('version')!r}")
    classes, enums = _registry()
    return _decode(doc["payload"], classes, enums)
