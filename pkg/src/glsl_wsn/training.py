"""Two-phase training, checkpoint-based evaluation, metrics and the p sweep."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .data import window_at
from .injection import KINDS, InjectionContext, inject_random
from .model import GLSLModel, LatentState, ModelConfig, loss_blend, loss_ce, loss_rec

log = logging.getLogger(__name__)

THRESHOLD = 0.5


class TrainingError(RuntimeError):
    pass


class EvaluationError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 5e-4
    window: int = 20
    d: int = 32
    d_g: int = 32
    kernel: str = "gat"
    heads: int = 2
    quota: float = 0.5  # share of windows per epoch turned into injected negatives
    tau: int = 10
    p: float = 40.0
    k_neighbors: int = 3
    kinds: tuple[str, ...] = KINDS
    seed: int = 0

    def model_config(self, n_modes: int, n_nodes: int) -> ModelConfig:
        return ModelConfig(
            n_modes, n_nodes, self.window, d=self.d, d_g=self.d_g,
            kernel=self.kernel, heads=self.heads, seed=self.seed,
        )


@dataclass
class EvalConfig:
    n_checkpoints: int = 100
    delaystep: int | None = None  # None -> W
    tau: int = 10
    p: float = 40.0
    k_neighbors: int = 3
    kinds: tuple[str, ...] = KINDS
    seed: int = 0


@dataclass
class EpochLoss:
    epoch: int
    rec: float
    ce: float
    blended: float


@dataclass
class TrainResult:
    model: GLSLModel
    history: list[EpochLoss]
    seconds: float


# --------------------------------------------------------------------------
# training


def _training_negative(window, ctx, rng, tau):
    w = window.shape[-1]
    t_s = int(rng.integers(0, w - 1))
    t_e = min(t_s + tau, w - 1)
    return inject_random(window, t_s, t_e, ctx, rng)


def train_two_phase(
    values: np.ndarray,
    adjacency: np.ndarray,
    ctx: InjectionContext,
    config: TrainConfig,
    callback=None,
) -> TrainResult:
    """Fit a GLSL model on a standardised ``M x N x T`` training array.

    Every window contributes the reconstruction loss against its clean
    content. A ``quota`` share of windows per epoch is corrupted on a private
    copy and labelled 1; the rest are labelled 0. The two losses are blended
    with weight ``1/epoch`` on reconstruction, so epoch 1 is pure
    reconstruction and later epochs shift towards classification.
    """
    values = np.asarray(values, dtype=np.float64)
    m, n, t_total = values.shape
    w = config.window
    if t_total < w:
        raise TrainingError(f"training range has {t_total} ticks, fewer than W={w}")
    if not 0.0 <= config.quota <= 1.0:
        raise TrainingError(f"quota must be in [0, 1], got {config.quota}")
    model = GLSLModel(config.model_config(m, n), adjacency)
    adam = ad.AdamState.for_params(model.params, lr=config.lr)
    ctx = InjectionContext(ctx.upper, ctx.lower, ctx.distances, ctx.p, ctx.k, tuple(config.kinds))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    ends = np.arange(w - 1, t_total)
    n_neg = int(round(config.quota * len(ends)))
    history: list[EpochLoss] = []
    params = model.params
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        negative = np.zeros(len(ends), dtype=bool)
        negative[rng.permutation(len(ends))[:n_neg]] = True
        state = model.init_state()
        sums = np.zeros(3)
        for i, t in enumerate(ends):
            clean = window_at(values, int(t), w)
            if negative[i]:
                x, y = _training_negative(clean, ctx, rng, config.tau).data, 1
            else:
                x, y = clean, 0
            try:
                with ad.Tape() as tape:
                    out = model.forward(x, state)
                    l_rec = loss_rec(clean, out.recon)
                    l_ce = loss_ce(y, out.probs[1])
                    loss = loss_blend(l_rec, l_ce, epoch)
            except Exception as exc:  # noqa: BLE001 - re-raised with coordinates
                raise TrainingError(f"epoch {epoch}, window ending at {t}: {exc}") from exc
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise TrainingError(f"non-finite loss at epoch {epoch}, window ending at {t}")
            grads = ad.backward(tape, loss)
            ad.adam_step(params, {k: grads[p.uid] for k, p in params.items() if p.uid in grads}, adam)
            state = out.state
            sums += (float(l_rec.data), float(l_ce.data), lv)
        mean = sums / len(ends)
        rec = EpochLoss(epoch, *map(float, mean))
        history.append(rec)
        log.info("epoch %d  rec %.5f  ce %.5f  blended %.5f", epoch, rec.rec, rec.ce, rec.blended)
        if callback is not None:
            callback(rec)
    return TrainResult(model, history, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# detectors


class Detector(Protocol):
    def init_state(self): ...

    def step(self, window: np.ndarray, t: int, state) -> tuple[float, object]: ...


class ModelDetector:
    def __init__(self, model: GLSLModel):
        self.model = model

    def init_state(self) -> LatentState:
        return self.model.init_state()

    def step(self, window, t, state):
        return self.model.p_anomaly(window, state)


class ConstantDetector:
    def __init__(self, p: float):
        self.p = p

    def init_state(self):
        return None

    def step(self, window, t, state):
        return self.p, None


class OracleDetector:
    """Flags a window iff it differs from the clean data at the same position."""

    def __init__(self, clean: np.ndarray, window: int):
        self.clean = clean
        self.w = window

    def init_state(self):
        return None

    def step(self, window, t, state):
        return float(not np.array_equal(window, window_at(self.clean, t, self.w))), None


# --------------------------------------------------------------------------
# evaluation


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    accuracy: float
    counts: ConfusionCounts

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = asdict(self.counts)
        return d


def _ratio(a: float, b: float) -> float:
    return a / b if b else 0.0


def metrics(counts: ConfusionCounts) -> MetricsReport:
    """Precision, recall, F1 and accuracy; every 0/0 is reported as 0."""
    c = counts
    if min(c.tp, c.fp, c.tn, c.fn) < 0:
        raise EvaluationError(f"negative confusion counts: {c}")
    prec = _ratio(c.tp, c.tp + c.fp)
    rec = _ratio(c.tp, c.tp + c.fn)
    f1 = _ratio(2 * prec * rec, prec + rec)
    acc = _ratio(c.tp + c.tn, c.total)
    return MetricsReport(prec, rec, f1, acc, c)


@dataclass
class Decision:
    checkpoint: int
    set: str  # "S1" (injected) or "S2" (clean)
    kind: str
    decision_window: int
    verdict: str  # TP / FN / TN / FP


@dataclass
class EvalResult:
    counts: ConfusionCounts
    report: MetricsReport
    decisions: list[Decision]
    seconds_per_checkpoint: float  # wall time of the full test pass / checkpoints
    seconds_total: float
    latency_per_checkpoint: float  # median window latency x windows judged per checkpoint
    windows_judged: int
    detail: list[dict] = field(default_factory=list)


def checkpoint_schedule(n_ticks: int, window: int, tau: int, delaystep: int, n_checkpoints: int) -> list[int]:
    """Evenly spaced distinct checkpoints in ``[W-1, T-1-max(tau, delaystep)]``."""
    lo = window - 1
    hi = n_ticks - 1 - max(tau, delaystep)
    available = hi - lo + 1
    if n_checkpoints < 1:
        raise EvaluationError("need at least one checkpoint")
    if available < n_checkpoints:
        raise EvaluationError(
            f"{n_checkpoints} checkpoints requested but only {max(available, 0)} positions in the test range"
        )
    pos = np.linspace(lo, hi, n_checkpoints)
    return [int(round(x)) for x in pos]


def _window(values, t, w):
    return values[:, :, t - w + 1 : t + 1]


def evaluate(
    detector: Detector,
    values: np.ndarray,
    window: int,
    ctx: InjectionContext,
    config: EvalConfig,
) -> EvalResult:
    """Checkpoint protocol on a standardised test array.

    Checkpoints alternate between S1 (injected) and S2 (clean). For an S1
    checkpoint ``c`` a random anomaly covers ``[c, c + tau]`` and it counts as
    a TP if any window ending in ``[c, c + delaystep]`` is flagged. For S2 only
    the window ending at ``c`` is judged. Injections go into a local copy, so
    ``values`` is never modified.

    The detector's recurrent state is carried along one clean pass over the
    test range; each S1 scan restarts from the clean state right before ``c``.
    """
    values = np.asarray(values, dtype=np.float64)
    _, _, t_total = values.shape
    w = window
    delay = w if config.delaystep is None else config.delaystep
    cps = checkpoint_schedule(t_total, w, config.tau, delay, config.n_checkpoints)
    ctx = InjectionContext(ctx.upper, ctx.lower, ctx.distances, config.p, config.k_neighbors, tuple(config.kinds))

    # clean pass: state before each window and its verdict
    t_start = time.perf_counter()
    last_needed = max(cps)
    states_before: dict[int, object] = {}
    p_clean: dict[int, float] = {}
    wanted = set(cps)
    latencies: list[float] = []
    clock = time.perf_counter

    def step(win, t, state):
        t0 = clock()
        out = detector.step(win, t, state)
        latencies.append(clock() - t0)
        return out

    state = detector.init_state()
    for t in range(w - 1, last_needed + 1):
        if t in wanted:
            states_before[t] = state
        p, state = step(_window(values, t, w), t, state)
        p_clean[t] = p

    counts = ConfusionCounts()
    decisions: list[Decision] = []
    detail: list[dict] = []
    seeds = np.random.SeedSequence([config.seed, 2]).spawn(len(cps))
    for idx, c in enumerate(cps):
        if idx % 2 == 0:
            rng = np.random.default_rng(seeds[idx])
            lo = c - w + 1
            seg = values[:, :, lo : c + max(delay, config.tau) + 1]
            res = inject_random(seg, w - 1, w - 1 + config.tau, ctx, rng)
            injected = res.data
            state = states_before[c]
            verdict, decided_at = "FN", c + delay
            for t in range(c, c + delay + 1):
                win = injected[:, :, t - lo - w + 1 : t - lo + 1]
                p, state = step(win, t, state)
                if p > THRESHOLD:
                    verdict, decided_at = "TP", t
                    break
            if verdict == "TP":
                counts.tp += 1
            else:
                counts.fn += 1
            decisions.append(Decision(c, "S1", res.kind, decided_at, verdict))
            detail.append({"checkpoint": c, "requested": res.requested, "kind": res.kind,
                           "node": res.node, "mode": res.mode})
        else:
            verdict = "FP" if p_clean[c] > THRESHOLD else "TN"
            if verdict == "FP":
                counts.fp += 1
            else:
                counts.tn += 1
            decisions.append(Decision(c, "S2", "none", c, verdict))
    total = time.perf_counter() - t_start
    n = len(cps)
    latency = float(np.median(latencies)) * len(latencies) / n
    return EvalResult(counts, metrics(counts), decisions, total / n, total, latency, len(latencies), detail)


def counts_from_decisions(decisions: list[Decision]) -> ConfusionCounts:
    c = ConfusionCounts()
    for d in decisions:
        setattr(c, d.verdict.lower(), getattr(c, d.verdict.lower()) + 1)
    return c


@dataclass
class SweepRow:
    p: float
    report: MetricsReport


def sensitivity_sweep(
    detector: Detector,
    values: np.ndarray,
    window: int,
    ctx: InjectionContext,
    config: EvalConfig,
    p_values,
) -> list[SweepRow]:
    """Evaluate once per deviation factor ``p`` with an identical seed schedule."""
    p_values = [float(p) for p in p_values]
    if any(p <= 0 for p in p_values):
        raise EvaluationError("p values must be positive")
    if p_values != sorted(p_values):
        raise EvaluationError("p values must be ascending")
    rows = []
    for p in p_values:
        cfg = EvalConfig(**{**asdict(config), "p": p})
        rows.append(SweepRow(p, evaluate(detector, values, window, ctx, cfg).report))
    return rows
