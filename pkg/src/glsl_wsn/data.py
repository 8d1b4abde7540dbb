"""IBRL ingestion, uniform resampling, z-scoring, sliding windows and a
synthetic WSN stream generator."""

from __future__ import annotations

import datetime as _dt
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

IBRL_MODES = ("temperature", "humidity", "light", "voltage")
DEFAULT_MODES = ("temperature", "humidity", "voltage")


class DataError(ValueError):
    pass


@dataclass
class RawReading:
    timestamp: float
    mote_id: int
    values: dict[str, float]


@dataclass
class ParseResult:
    readings: list[RawReading]
    malformed: int


@dataclass
class UniformGrid:
    """Dense ``modes x nodes x ticks`` tensor with its axis labels."""

    values: np.ndarray
    node_ids: list[int]
    mode_names: list[str]
    period: float = 1.0
    start: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DataError(f"grid must be 3-D, got shape {self.values.shape}")
        m, n, _ = self.values.shape
        if len(self.node_ids) != n or len(self.mode_names) != m:
            raise DataError("grid labels do not match tensor shape")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def n_modes(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def n_ticks(self) -> int:
        return self.values.shape[2]

    def with_values(self, values: np.ndarray) -> "UniformGrid":
        return UniformGrid(values, list(self.node_ids), list(self.mode_names), self.period, self.start)

    def time_slice(self, lo: int, hi: int) -> "UniformGrid":
        return UniformGrid(
            self.values[:, :, lo:hi].copy(),
            list(self.node_ids),
            list(self.mode_names),
            self.period,
            self.start + lo * self.period,
        )

    def node_subset(self, idx: Sequence[int]) -> "UniformGrid":
        idx = list(idx)
        return UniformGrid(
            self.values[:, idx, :].copy(),
            [self.node_ids[i] for i in idx],
            list(self.mode_names),
            self.period,
            self.start,
        )


@dataclass
class NormStats:
    mean: np.ndarray  # (M, N)
    std: np.ndarray  # (M, N)
    upper: np.ndarray  # (M,) 99% quantile, standardized units
    lower: np.ndarray  # (M,) 1% quantile, standardized units
    degenerate: list[tuple[int, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "upper": self.upper.tolist(),
            "lower": self.lower.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("mean", "std", "upper", "lower")))


# --------------------------------------------------------------------------
# IBRL


def _parse_line(line: str) -> RawReading | None:
    parts = line.split()
    if len(parts) != 8:
        return None
    date, clock, _epoch, mote, *vals = parts
    try:
        whole, _, frac = clock.partition(".")
        stamp = _dt.datetime.fromisoformat(f"{date} {whole}")
        # fractions in the log vary in length, which fromisoformat rejects on 3.10
        fraction = float(f"0.{frac}") if frac else 0.0
        mote_id = int(mote)
        nums = [float(v) for v in vals]
    except ValueError:
        return None
    if mote_id < 1 or not all(np.isfinite(nums)):
        return None
    ts = stamp.replace(tzinfo=_dt.timezone.utc).timestamp() + fraction
    return RawReading(ts, mote_id, dict(zip(IBRL_MODES, nums)))


def parse_ibrl(path) -> ParseResult:
    """Parse the Intel Berkeley lab log (``date time epoch moteid temp hum light volt``).

    Malformed lines are skipped and counted; order of the file is kept.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    readings: list[RawReading] = []
    bad = 0
    for line in text.splitlines():
        if not line.strip():
            continue
        r = _parse_line(line)
        if r is None:
            bad += 1
        else:
            readings.append(r)
    if not readings:
        raise DataError(f"{path}: no parseable lines ({bad} malformed)")
    if bad:
        log.info("parse_ibrl: skipped %d malformed lines", bad)
    return ParseResult(readings, bad)


def resample_grid(
    readings: Sequence[RawReading],
    node_ids: Sequence[int],
    mode_names: Sequence[str],
    period: float,
    n_ticks: int,
    start: float | None = None,
) -> UniformGrid:
    """Sample every (mode, node) series on a uniform clock.

    Each tick takes the last reading at or before it; ticks before a series'
    first reading are backfilled with that first reading.
    """
    if not node_ids:
        raise DataError("node_ids is empty")
    if period <= 0:
        raise DataError("period must be positive")
    if start is None:
        start = min(r.timestamp for r in readings)
    ticks = start + period * np.arange(n_ticks)
    by_node: dict[int, list[RawReading]] = {}
    for r in readings:
        by_node.setdefault(r.mote_id, []).append(r)
    missing = [n for n in node_ids if n not in by_node]
    if missing:
        raise DataError(f"nodes absent from data: {missing}")

    out = np.empty((len(mode_names), len(node_ids), n_ticks))
    for j, nid in enumerate(node_ids):
        for i, mode in enumerate(mode_names):
            pts = [(r.timestamp, r.values[mode]) for r in by_node[nid] if mode in r.values]
            if not pts:
                raise DataError(f"node {nid} has no '{mode}' readings")
            pts.sort(key=lambda p: p[0])
            ts = np.array([p[0] for p in pts])
            vs = np.array([p[1] for p in pts])
            idx = np.searchsorted(ts, ticks, side="right") - 1
            out[i, j] = vs[np.maximum(idx, 0)]
    return UniformGrid(out, list(node_ids), list(mode_names), float(period), float(start))


def read_layout(path) -> tuple[list[int], np.ndarray]:
    """Read ``node_id x y`` lines (the IBRL ``mote_locs.txt`` format)."""
    ids, xy = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if len(parts) < 3:
            continue
        ids.append(int(parts[0]))
        xy.append((float(parts[1]), float(parts[2])))
    if not ids:
        raise DataError(f"{path}: empty layout")
    return ids, np.array(xy)


# --------------------------------------------------------------------------
# standardization and windows


def zscore_fit(grid: UniformGrid, train_range: tuple[int, int], eps: float = 1e-8) -> NormStats:
    """Per-(mode, node) population mean/std over ``train_range`` only, plus
    per-mode 1%/99% quantiles of the standardized training values."""
    lo, hi = train_range
    if not 0 <= lo < hi <= grid.n_ticks:
        raise DataError(f"bad train range {train_range} for {grid.n_ticks} ticks")
    train = grid.values[:, :, lo:hi]
    mu = train.mean(axis=2)
    sd = train.std(axis=2)
    degenerate = [tuple(map(int, ij)) for ij in np.argwhere(sd == 0)]
    if degenerate:
        warnings.warn(f"zero std for (mode, node) {degenerate}; using eps={eps}", RuntimeWarning)
        sd = np.where(sd == 0, eps, sd)
    z = (train - mu[:, :, None]) / sd[:, :, None]
    flat = z.reshape(z.shape[0], -1)
    upper = np.quantile(flat, 0.99, axis=1)
    lower = np.quantile(flat, 0.01, axis=1)
    return NormStats(mu, sd, upper, lower, degenerate)


def zscore_apply(grid: UniformGrid, stats: NormStats) -> UniformGrid:
    return grid.with_values((grid.values - stats.mean[:, :, None]) / stats.std[:, :, None])


def window_at(values: np.ndarray, t: int, w: int) -> np.ndarray:
    """The ``M x N x W`` slice ending at tick ``t`` (inclusive)."""
    n_ticks = values.shape[-1]
    if w < 1 or t < w - 1 or t >= n_ticks:
        raise DataError(f"window end {t} out of range for W={w}, T={n_ticks}")
    return values[:, :, t - w + 1 : t + 1]


def window_ends(n_ticks: int, w: int) -> range:
    return range(w - 1, n_ticks)


def split_train_test(n_ticks: int, train_fraction: float = 0.6) -> tuple[tuple[int, int], tuple[int, int]]:
    cut = int(round(n_ticks * train_fraction))
    return (0, cut), (cut, n_ticks)


# --------------------------------------------------------------------------
# grid cache
#
# line 1: "GLSLGRID 1 <M> <N> <T> <period> <start>"
# line 2: node ids, space separated
# line 3: mode names, space separated
# rest:   M*N*T little-endian float64, mode-major (C order of M x N x T)


def save_grid(path, grid: UniformGrid) -> None:
    m, n, t = grid.shape
    head = (
        f"GLSLGRID 1 {m} {n} {t} {grid.period!r} {grid.start!r}\n"
        + " ".join(map(str, grid.node_ids))
        + "\n"
        + " ".join(grid.mode_names)
        + "\n"
    )
    with open(path, "wb") as fh:
        fh.write(head.encode())
        fh.write(np.ascontiguousarray(grid.values, dtype="<f8").tobytes())


def load_grid(path) -> UniformGrid:
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        if len(header) != 7 or header[0] != "GLSLGRID":
            raise DataError(f"{path}: not a grid cache")
        if header[1] != "1":
            raise DataError(f"{path}: unsupported grid version {header[1]}")
        m, n, t = map(int, header[2:5])
        period, start = float(header[5]), float(header[6])
        ids = [int(x) for x in fh.readline().decode().split()]
        modes = fh.readline().decode().split()
        body = fh.read()
    vals = np.frombuffer(body, dtype="<f8")
    if vals.size != m * n * t:
        raise DataError(f"{path}: truncated body")
    return UniformGrid(vals.reshape(m, n, t).copy(), ids, modes, period, start)


# --------------------------------------------------------------------------
# synthetic streams


@dataclass
class SynthSpec:
    n_nodes: int = 10
    n_modes: int = 3
    n_ticks: int = 2000
    noise: float = 0.02
    seed: int = 0
    extent: float = 40.0
    period: float = 120.0
    n_events: int = 12
    coords: np.ndarray | None = None


@dataclass
class SynthData:
    grid: UniformGrid
    coords: np.ndarray


def synth_generate(spec: SynthSpec) -> SynthData:
    """Spatially and cross-modally correlated WSN streams.

    A shared field (a daily-like cycle plus drifting Gaussian events) is
    sampled at each node position. Mode 0 is the field itself, mode 1 follows
    it positively and mode 2 negatively; further modes alternate sign. Nodes at
    the same coordinates produce identical noiseless series.
    """
    rng = np.random.default_rng(spec.seed)
    n, m, t_len = spec.n_nodes, spec.n_modes, spec.n_ticks
    if spec.coords is not None:
        coords = np.asarray(spec.coords, dtype=np.float64)
    else:
        coords = rng.uniform(0.0, spec.extent, size=(n, 2))
    t = np.arange(t_len, dtype=np.float64)

    phase = rng.uniform(0, 2 * np.pi)
    cycle = np.sin(2 * np.pi * t / spec.period + phase)
    # spatial gradient of the cycle amplitude gives nodes distinct but related flows
    grad = rng.normal(size=2)
    grad /= np.linalg.norm(grad)
    amp = 1.0 + 0.4 * ((coords - spec.extent / 2) @ grad) / spec.extent
    field_ = amp[:, None] * cycle[None, :]

    width = spec.extent / 4
    for _ in range(spec.n_events):
        t0 = rng.uniform(0, t_len)
        dur = rng.uniform(0.3, 0.8) * spec.period
        center = rng.uniform(0, spec.extent, size=2)
        drift = rng.normal(scale=spec.extent / 4, size=2)
        height = rng.uniform(0.5, 1.2) * rng.choice([-1.0, 1.0])
        env = np.exp(-0.5 * ((t - t0) / (dur / 2)) ** 2)
        frac = np.clip((t - t0) / dur + 0.5, 0, 1)
        pos = center[None, :] + frac[:, None] * drift[None, :]
        d2 = ((coords[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
        field_ += height * env[None, :] * np.exp(-0.5 * d2 / width**2)

    slow = np.cumsum(rng.normal(scale=0.02, size=(m, t_len)), axis=1)
    slow -= slow.mean(axis=1, keepdims=True)
    values = np.empty((m, n, t_len))
    for i in range(m):
        sign = 1.0 if i < 2 else (-1.0) ** (i - 1)
        values[i] = sign * 0.9 * field_ + 0.1 * slow[i][None, :]
    if spec.noise > 0:
        values += rng.normal(scale=spec.noise, size=values.shape)
    grid = UniformGrid(values, list(range(1, n + 1)), [f"mode{i + 1}" for i in range(m)], 1.0, 0.0)
    return SynthData(grid, coords)
