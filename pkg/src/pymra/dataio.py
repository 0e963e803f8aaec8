"""Binary data formats, deduplication, prediction locations and the parameter file.

All binary files start with an unsigned 64-bit little-endian count followed
by contiguous blocks of 64-bit little-endian IEEE-754 reals.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from pymra.errors import ConfigError, FormatError

log = logging.getLogger(__name__)

_COUNT = np.dtype("<u8")
_REAL = np.dtype("<f8")


@dataclass
class ObservationSet:
    lon: np.ndarray
    lat: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        self.lon = np.ascontiguousarray(self.lon, dtype=np.float64)
        self.lat = np.ascontiguousarray(self.lat, dtype=np.float64)
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        if not (self.lon.shape == self.lat.shape == self.value.shape and self.lon.ndim == 1):
            raise FormatError(
                f"array lengths differ: lon {self.lon.shape}, lat {self.lat.shape}, value {self.value.shape}"
            )

    @property
    def n(self) -> int:
        return len(self.lon)

    @property
    def locations(self) -> np.ndarray:
        return np.column_stack([self.lon, self.lat])

    def subset(self, index) -> "ObservationSet":
        return ObservationSet(self.lon[index], self.lat[index], self.value[index])


def _read_blocks(path, nblocks: int, what: str) -> tuple[int, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _COUNT.itemsize:
        raise FormatError(f"{path}: {what} file is {len(raw)} bytes, too short for the count header")
    n = int(np.frombuffer(raw, dtype=_COUNT, count=1)[0])
    expected = _COUNT.itemsize + nblocks * n * _REAL.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: {what} file declares n={n}, expected {expected} bytes but found {len(raw)}")
    body = np.frombuffer(raw, dtype=_REAL, offset=_COUNT.itemsize).astype(np.float64)
    return n, body.reshape(nblocks, n)


def _write_blocks(path, blocks) -> Path:
    path = Path(path)
    n = len(blocks[0]) if blocks else 0
    with open(path, "wb") as fh:
        fh.write(np.array([n], dtype=_COUNT).tobytes())
        for b in blocks:
            b = np.asarray(b, dtype=np.float64)
            if len(b) != n:
                raise FormatError(f"{path}: block lengths differ ({len(b)} vs {n})")
            fh.write(b.astype(_REAL).tobytes())
    return path


def deduplicate(data: ObservationSet) -> tuple[ObservationSet, int]:
    """Keep the first occurrence of every (lon, lat) pair; returns the set and the drop count."""
    key = np.column_stack([data.lon, data.lat])
    key = key + 0.0  # fold -0.0 into 0.0 so equal coordinates share a key
    _, first = np.unique(key.view([("x", np.float64), ("y", np.float64)]).ravel(), return_index=True)
    keep = np.sort(first)
    return data.subset(keep), data.n - len(keep)


def read_observations(path, dedup: bool = False) -> ObservationSet:
    n, body = _read_blocks(path, 3, "data")
    if n == 0:
        raise FormatError(f"{path}: data file contains no observations")
    data = ObservationSet(body[0], body[1], body[2])
    if dedup:
        data, dropped = deduplicate(data)
        if dropped:
            log.info("removed %d duplicate locations", dropped)
    return data


def write_observations(path, data: ObservationSet) -> Path:
    return _write_blocks(path, [data.lon, data.lat, data.value])


def read_locations(path) -> np.ndarray:
    """Prediction-location file: count, lon block, lat block. Returns shape (n, 2)."""
    _, body = _read_blocks(path, 2, "prediction-location")
    return np.column_stack([body[0], body[1]])


def write_locations(path, locations) -> Path:
    locations = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
    return _write_blocks(path, [locations[:, 0], locations[:, 1]])


def resolve_prediction_locations(mode: str, data: ObservationSet, file=None) -> np.ndarray:
    """Locations to predict at: N = NaN-valued rows, D = every data row, A = external file."""
    if mode == "N":
        mask = np.isnan(data.value)
        return np.column_stack([data.lon[mask], data.lat[mask]])
    if mode == "D":
        return data.locations
    if mode == "A":
        if file is None:
            raise ConfigError("PREDICTION_LOCATION_MODE = A needs a location file", key="PREDICTION_LOCATION_FILE")
        return read_locations(file)
    raise ConfigError(f"unknown prediction location mode {mode!r}", key="PREDICTION_LOCATION_MODE")


@dataclass
class PredictionResults:
    lon: np.ndarray
    lat: np.ndarray
    mean: np.ndarray
    variance: np.ndarray

    @property
    def n(self) -> int:
        return len(self.lon)

    @classmethod
    def empty(cls) -> "PredictionResults":
        z = np.empty(0)
        return cls(z, z.copy(), z.copy(), z.copy())

    @classmethod
    def concatenate(cls, parts) -> "PredictionResults":
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(cls)))


def prediction_file_name(stem, worker_id: int) -> Path:
    return Path(f"{stem}_{worker_id}")


def write_predictions(stem, worker_id: int, results: PredictionResults) -> Path:
    """One file per worker: count, then lon, lat, mean and variance blocks."""
    path = prediction_file_name(stem, worker_id)
    if results.n == 0:
        path.write_bytes(np.array([0], dtype=_COUNT).tobytes())
        return path
    return _write_blocks(path, [results.lon, results.lat, results.mean, results.variance])


def read_predictions(path) -> PredictionResults:
    _, body = _read_blocks(path, 4, "prediction-results")
    return PredictionResults(*body)


# --------------------------------------------------------------------------- config

MODES = ("build_structure_only", "likelihood", "prediction", "optimization")
LOCATION_MODES = ("N", "D", "A")


@dataclass
class Config:
    """User parameters. ``None`` marks keys absent from the file.

    Optional keys and their documented defaults: ELIMINATION_DUPLICATES_FLAG
    (true), OFFSET (e/100), NUM_LEVELS_M ("default" rule), PRINT_DETAIL_FLAG,
    DUMP_PREDICTION_RESULTS_FLAG, SAVE_TO_DISK_FLAG, DYNAMIC_SCHEDULE_FLAG (false).
    """

    DATA_FILE_NAME: str = None
    ELIMINATION_DUPLICATES_FLAG: bool = True
    OFFSET: float = math.e / 100.0
    NUM_PARTITIONS_J: int = None
    NUM_KNOTS_r: int = None
    NUM_LEVELS_M: int | str = "default"
    PRINT_DETAIL_FLAG: bool = False
    CALCULATION_MODE: str = None
    PREDICTION_LOCATION_MODE: str = None
    PREDICTION_LOCATION_FILE: str = None
    DUMP_PREDICTION_RESULTS_FLAG: bool = False
    PREDICTION_RESULTS_FILE_NAME: str = None
    SAVE_TO_DISK_FLAG: bool = False
    TMP_DIRECTORY: str = None
    DYNAMIC_SCHEDULE_FLAG: bool = False
    ALPHA: float = None
    BETA: float = None
    TAU: float = None
    MAX_ITERATIONS: int = None
    ALPHA_LOWER_BOUND: float = None
    BETA_LOWER_BOUND: float = None
    TAU_LOWER_BOUND: float = None
    ALPHA_UPPER_BOUND: float = None
    BETA_UPPER_BOUND: float = None
    TAU_UPPER_BOUND: float = None
    ALPHA_INITIAL_GUESS: float = None
    BETA_INITIAL_GUESS: float = None
    TAU_INITIAL_GUESS: float = None
    lines: dict = field(default_factory=dict, repr=False)


_STR_KEYS = {"DATA_FILE_NAME", "PREDICTION_LOCATION_FILE", "PREDICTION_RESULTS_FILE_NAME", "TMP_DIRECTORY"}
_BOOL_KEYS = {
    "ELIMINATION_DUPLICATES_FLAG",
    "PRINT_DETAIL_FLAG",
    "DUMP_PREDICTION_RESULTS_FLAG",
    "SAVE_TO_DISK_FLAG",
    "DYNAMIC_SCHEDULE_FLAG",
}
_INT_KEYS = {"NUM_PARTITIONS_J", "NUM_KNOTS_r", "NUM_LEVELS_M", "MAX_ITERATIONS"}
_PARAMS = ("ALPHA", "BETA", "TAU")
_REAL_KEYS = {"OFFSET", *_PARAMS} | {f"{p}_{s}" for p in _PARAMS for s in ("LOWER_BOUND", "UPPER_BOUND", "INITIAL_GUESS")}
_KNOWN = _STR_KEYS | _BOOL_KEYS | _INT_KEYS | _REAL_KEYS | {"CALCULATION_MODE", "PREDICTION_LOCATION_MODE"}
_LINE = re.compile(r"^\s*([A-Za-z_]+)\s*=\s*(.*?)\s*$")


def _convert(key: str, text: str, line: int):
    text = text.strip().strip('"').strip("'")
    if key in _STR_KEYS:
        if not text:
            raise ConfigError("empty value", key, line)
        return text
    if key in _BOOL_KEYS:
        if text not in ("true", "false"):
            raise ConfigError(f"must be either true or false, got {text!r}", key, line)
        return text == "true"
    if key == "OFFSET" and text == "default":
        return math.e / 100.0
    if key == "NUM_LEVELS_M" and text == "default":
        return "default"
    if key in _INT_KEYS:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"not an integer: {text!r}", key, line) from None
    if key in _REAL_KEYS:
        try:
            v = float(text)
        except ValueError:
            raise ConfigError(f"not a number: {text!r}", key, line) from None
        if not math.isfinite(v):
            raise ConfigError(f"not a finite number: {text!r}", key, line)
        return v
    return text


def _check_domains(cfg: Config) -> None:
    ln = cfg.lines.get
    if cfg.NUM_PARTITIONS_J not in (2, 4):
        raise ConfigError(
            f"requires to be either 2 or 4, got {cfg.NUM_PARTITIONS_J}", "NUM_PARTITIONS_J", ln("NUM_PARTITIONS_J")
        )
    if cfg.NUM_KNOTS_r < 1:
        raise ConfigError("must be a positive integer", "NUM_KNOTS_r", ln("NUM_KNOTS_r"))
    if cfg.NUM_LEVELS_M != "default" and cfg.NUM_LEVELS_M < 1:
        raise ConfigError("must be a positive integer or default", "NUM_LEVELS_M", ln("NUM_LEVELS_M"))
    if not 0.0 < cfg.OFFSET < 0.5:
        raise ConfigError("must lie strictly between 0 and 0.5", "OFFSET", ln("OFFSET"))
    if cfg.CALCULATION_MODE not in MODES:
        raise ConfigError(
            f"must be one of {', '.join(MODES)}, got {cfg.CALCULATION_MODE!r}", "CALCULATION_MODE", ln("CALCULATION_MODE")
        )
    if cfg.PREDICTION_LOCATION_MODE is not None and cfg.PREDICTION_LOCATION_MODE not in LOCATION_MODES:
        raise ConfigError(
            f"must be one of N, D, A, got {cfg.PREDICTION_LOCATION_MODE!r}",
            "PREDICTION_LOCATION_MODE",
            ln("PREDICTION_LOCATION_MODE"),
        )
    for p in ("ALPHA", "BETA"):
        for key in (p, f"{p}_LOWER_BOUND", f"{p}_UPPER_BOUND", f"{p}_INITIAL_GUESS"):
            v = getattr(cfg, key)
            if v is not None and not v > 0:
                raise ConfigError("must be positive", key, ln(key))
    for key in ("TAU", "TAU_LOWER_BOUND", "TAU_UPPER_BOUND", "TAU_INITIAL_GUESS"):
        v = getattr(cfg, key)
        if v is not None and v < 0:
            raise ConfigError("must be non-negative", key, ln(key))
    if cfg.MAX_ITERATIONS is not None and cfg.MAX_ITERATIONS < 1:
        raise ConfigError("must be a positive integer", "MAX_ITERATIONS", ln("MAX_ITERATIONS"))


def _require(cfg: Config, keys) -> None:
    for key in keys:
        if getattr(cfg, key) is None:
            raise ConfigError(f"missing required key for mode {cfg.CALCULATION_MODE}", key)


def _check_required(cfg: Config) -> None:
    _require(cfg, ("DATA_FILE_NAME", "NUM_PARTITIONS_J", "NUM_KNOTS_r", "CALCULATION_MODE"))
    _check_domains(cfg)
    mode = cfg.CALCULATION_MODE
    if mode in ("likelihood", "prediction"):
        _require(cfg, _PARAMS)
    if mode == "prediction":
        _require(cfg, ("PREDICTION_LOCATION_MODE",))
        if cfg.PREDICTION_LOCATION_MODE == "A":
            _require(cfg, ("PREDICTION_LOCATION_FILE",))
        if cfg.DUMP_PREDICTION_RESULTS_FLAG:
            _require(cfg, ("PREDICTION_RESULTS_FILE_NAME",))
    if cfg.SAVE_TO_DISK_FLAG:
        _require(cfg, ("TMP_DIRECTORY",))
    if mode == "optimization":
        _require(cfg, ("MAX_ITERATIONS",))
        for p in _PARAMS:
            keys = (f"{p}_LOWER_BOUND", f"{p}_UPPER_BOUND", f"{p}_INITIAL_GUESS")
            _require(cfg, keys)
            lo, hi, x0 = (getattr(cfg, k) for k in keys)
            if not lo < hi:
                raise ConfigError(f"lower bound {lo} must be below upper bound {hi}", keys[0], cfg.lines.get(keys[0]))
            if not lo <= x0 <= hi:
                raise ConfigError(f"initial guess {x0} outside [{lo}, {hi}]", keys[2], cfg.lines.get(keys[2]))


def parse_config_text(text: str) -> Config:
    cfg = Config()
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        m = _LINE.match(line)
        if m is None:
            raise ConfigError(f"expected KEY = VALUE, got {raw.strip()!r}", line=lineno)
        key, value = m.group(1), m.group(2)
        if key not in _KNOWN:
            raise ConfigError("unknown parameter", key, lineno)
        if key in seen:
            raise ConfigError(f"duplicate parameter (first on line {seen[key]})", key, lineno)
        seen[key] = lineno
        setattr(cfg, key, _convert(key, value, lineno))
    cfg.lines = seen
    _check_required(cfg)
    return cfg


def parse_config(path) -> Config:
    """Read a ``KEY = VALUE`` parameter file into a validated Config."""
    return parse_config_text(Path(path).read_text(encoding="utf-8"))
