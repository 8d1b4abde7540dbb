"""Self-supervised anomaly injectors.

All injectors act on an ``M x N x T`` array (a window or a whole grid), never
mutate their input, and touch only the ``(mode, node, [t_s, t_e])`` target
cells. Intervals are inclusive on both ends.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("scale", "negation", "sudden", "intermodal", "internode")
BASIC_KINDS = ("scale", "negation", "sudden")
SCALE_FACTORS = (0.5, 1.5, 2.0)
CORR_GATE = 0.8


class InjectionError(ValueError):
    pass


@dataclass
class AnomalySpec:
    kind: str
    t_start: int
    t_end: int
    p: float = 40.0
    k: int = 3

    @property
    def duration(self) -> int:
        return self.t_end - self.t_start


@dataclass
class InjectionResult:
    data: np.ndarray
    t_start: int
    t_end: int
    node: int
    mode: int
    kind: str
    requested: str
    detail: dict = field(default_factory=dict)

    @property
    def fell_back(self) -> bool:
        return self.kind != self.requested


@dataclass
class InjectionContext:
    """What the dispatching injector needs beyond the data itself."""

    upper: np.ndarray  # per-mode 99% quantile
    lower: np.ndarray  # per-mode 1% quantile
    distances: np.ndarray | None = None
    p: float = 40.0
    k: int = 3
    kinds: tuple[str, ...] = KINDS


def pearson(a, b) -> tuple[float, bool]:
    """Correlation coefficient and a flag that is False when either input is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise InjectionError("pearson needs two equal-length vectors of length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    saa = float(da @ da)
    sbb = float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        return 0.0, False
    r = float(da @ db) / np.sqrt(saa * sbb)
    return float(np.clip(r, -1.0, 1.0)), True


def passes_gate(r: float) -> bool:
    """Open-interval gate ``-1 < r < -0.8 or 0.8 < r < 1``."""
    return (-1.0 < r < -CORR_GATE) or (CORR_GATE < r < 1.0)


def trend_slope(series) -> float:
    y = np.asarray(series, dtype=np.float64)
    t = np.arange(y.size, dtype=np.float64)
    t -= t.mean()
    return float(t @ (y - y.mean()) / (t @ t))


def _check_interval(data: np.ndarray, t_start: int, t_end: int) -> None:
    if not 0 <= t_start <= t_end < data.shape[-1]:
        raise InjectionError(f"interval [{t_start}, {t_end}] outside 0..{data.shape[-1] - 1}")


def _pick_target(rng, data, node, mode):
    m, n, _ = data.shape
    if mode is None:
        mode = int(rng.integers(m))
    if node is None:
        node = int(rng.integers(n))
    return node, mode


# --------------------------------------------------------------------------
# basic anomalies


def inject_scale(data, t_start, t_end, rng, node=None, mode=None, factor=None) -> InjectionResult:
    data = np.asarray(data, dtype=np.float64)
    _check_interval(data, t_start, t_end)
    node, mode = _pick_target(rng, data, node, mode)
    if factor is None:
        factor = float(SCALE_FACTORS[int(rng.integers(len(SCALE_FACTORS)))])
    out = data.copy()
    out[mode, node, t_start : t_end + 1] *= factor
    return InjectionResult(out, t_start, t_end, node, mode, "scale", "scale", {"factor": factor})


def inject_negation(data, t_start, t_end, rng=None, node=None, mode=None) -> InjectionResult:
    data = np.asarray(data, dtype=np.float64)
    _check_interval(data, t_start, t_end)
    if node is None or mode is None:
        if rng is None:
            raise InjectionError("negation needs a target or an rng to draw one")
        node, mode = _pick_target(rng, data, node, mode)
    out = data.copy()
    out[mode, node, t_start : t_end + 1] *= -1.0
    return InjectionResult(out, t_start, t_end, node, mode, "negation", "negation")


def inject_sudden(data, t_start, t_end, upper, lower, rng, node=None, mode=None, direction=None) -> InjectionResult:
    """Shift the target by +/-(upper - lower) of its mode over the whole interval."""
    data = np.asarray(data, dtype=np.float64)
    _check_interval(data, t_start, t_end)
    node, mode = _pick_target(rng, data, node, mode)
    span = float(upper[mode] - lower[mode])
    if span <= 0:
        raise InjectionError(f"mode {mode} has a degenerate quantile range; sudden change impossible")
    if direction is None:
        direction = 1.0 if rng.random() < 0.5 else -1.0
    out = data.copy()
    out[mode, node, t_start : t_end + 1] += direction * span
    return InjectionResult(
        out, t_start, t_end, node, mode, "sudden", "sudden", {"direction": direction, "offset": span}
    )


def _inject_basic(kind, data, t_start, t_end, ctx: InjectionContext, rng, node, mode) -> InjectionResult:
    if kind == "scale":
        return inject_scale(data, t_start, t_end, rng, node, mode)
    if kind == "negation":
        return inject_negation(data, t_start, t_end, rng, node, mode)
    return inject_sudden(data, t_start, t_end, ctx.upper, ctx.lower, rng, node, mode)


# --------------------------------------------------------------------------
# correlation-breaking anomalies


def _reverse_trend(series_before: float, flow: np.ndarray, step: float, rng) -> tuple[np.ndarray, str]:
    """Walk against the flow's trend: V-shape for an uptrend, inverted V otherwise."""
    n = flow.size
    mid = (n - 1) // 2
    up = trend_slope(flow) >= 0
    sign_first = -1.0 if up else 1.0
    sigma_max = step / 2.0
    jitter = rng.uniform(0.0, sigma_max, size=n) * rng.choice([-1.0, 1.0], size=n)
    out = np.empty(n)
    prev = series_before
    for t in range(n):
        direction = sign_first if t < mid else -sign_first
        prev = prev + direction * step + jitter[t]
        out[t] = prev
    return out, ("v" if up else "inverted-v")


def _corr_break(
    data, t_start, t_end, ctx, rng, node, mode, requested, candidates
) -> InjectionResult:
    flow = data[mode, node, t_start : t_end + 1]
    scanned = []
    for label, other in candidates:
        r, ok = pearson(flow, other[t_start : t_end + 1])
        scanned.append((label, r))
        if ok and passes_gate(r):
            span = float(ctx.upper[mode] - ctx.lower[mode])
            step = span / ctx.p
            before = data[mode, node, t_start - 1] if t_start > 0 else data[mode, node, t_start]
            walk, shape = _reverse_trend(before, flow, step, rng)
            out = data.copy()
            out[mode, node, t_start : t_end + 1] = walk
            return InjectionResult(
                out, t_start, t_end, node, mode, requested, requested,
                {"partner": label, "r": r, "shape": shape, "step": step, "scanned": scanned},
            )
    kind = BASIC_KINDS[int(rng.integers(len(BASIC_KINDS)))]
    res = _inject_basic(kind, data, t_start, t_end, ctx, rng, node, mode)
    res.requested = requested
    res.detail["scanned"] = scanned
    return res


def inject_intermodal(data, t_start, t_end, ctx: InjectionContext, rng, node=None, mode=None) -> InjectionResult:
    """Break the correlation between the target flow and the other modes on its node.

    Scans modes in order; the first with ``0.8 < |r| < 1`` over the interval
    triggers a trend reversal, otherwise a random basic anomaly is injected.
    """
    data = np.asarray(data, dtype=np.float64)
    _check_interval(data, t_start, t_end)
    if t_end - t_start < 1:
        raise InjectionError("intermodal injection needs an interval of at least 2 ticks")
    if data.shape[0] < 2:
        raise InjectionError("intermodal injection needs at least 2 modes")
    node, mode = _pick_target(rng, data, node, mode)
    cands = [(m, data[m, node]) for m in range(data.shape[0]) if m != mode]
    return _corr_break(data, t_start, t_end, ctx, rng, node, mode, "intermodal", cands)


def inject_internode(data, t_start, t_end, ctx: InjectionContext, rng, node=None, mode=None) -> InjectionResult:
    """Break the correlation between the target flow and the same mode on its
    ``k`` nearest nodes (by the distance matrix)."""
    from .topology import nearest_neighbors

    data = np.asarray(data, dtype=np.float64)
    _check_interval(data, t_start, t_end)
    if t_end - t_start < 1:
        raise InjectionError("internode injection needs an interval of at least 2 ticks")
    n = data.shape[1]
    if n < 2:
        raise InjectionError("internode injection needs at least 2 nodes")
    if ctx.distances is None:
        raise InjectionError("internode injection needs a distance matrix")
    node, mode = _pick_target(rng, data, node, mode)
    k = min(ctx.k, n - 1)
    neigh = nearest_neighbors(ctx.distances, node, k)
    cands = [(int(j), data[mode, j]) for j in neigh]
    return _corr_break(data, t_start, t_end, ctx, rng, node, mode, "internode", cands)


def inject_random(data, t_start, t_end, ctx: InjectionContext, rng, node=None, mode=None) -> InjectionResult:
    """Uniformly pick one of ``ctx.kinds`` and dispatch to it."""
    if not ctx.kinds:
        raise InjectionError("no anomaly kinds enabled")
    for kind in ctx.kinds:
        if kind not in KINDS:
            raise InjectionError(f"unknown anomaly kind {kind!r}")
    kind = ctx.kinds[int(rng.integers(len(ctx.kinds)))]
    return inject(kind, data, t_start, t_end, ctx, rng, node, mode)


def inject(kind, data, t_start, t_end, ctx: InjectionContext, rng, node=None, mode=None) -> InjectionResult:
    if kind in BASIC_KINDS:
        data = np.asarray(data, dtype=np.float64)
        node, mode = _pick_target(rng, data, node, mode)
        return _inject_basic(kind, data, t_start, t_end, ctx, rng, node, mode)
    if kind == "intermodal":
        return inject_intermodal(data, t_start, t_end, ctx, rng, node, mode)
    if kind == "internode":
        return inject_internode(data, t_start, t_end, ctx, rng, node, mode)
    raise InjectionError(f"unknown anomaly kind {kind!r}")
