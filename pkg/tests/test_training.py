import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glsl_wsn.data import SynthSpec, synth_generate, window_at
from glsl_wsn.injection import InjectionContext, inject_sudden
from glsl_wsn.model import blend_weight
from glsl_wsn.pipeline import TopologySpec, prepare
from glsl_wsn.training import (
    ConfusionCounts,
    ConstantDetector,
    EvalConfig,
    EvaluationError,
    ModelDetector,
    OracleDetector,
    TrainConfig,
    TrainingError,
    checkpoint_schedule,
    counts_from_decisions,
    evaluate,
    metrics,
    sensitivity_sweep,
    train_two_phase,
)

# -- metrics -----------------------------------------------------------------


def test_metrics_symmetric_example():
    r = metrics(ConfusionCounts(tp=9, fp=1, tn=9, fn=1))
    assert (r.precision, r.recall, r.f1, r.accuracy) == pytest.approx((0.9, 0.9, 0.9, 0.9))


def test_f1_from_reported_precision_and_recall():
    # counts chosen so precision is exactly 0.945 and recall exactly 0.870
    r = metrics(ConfusionCounts(tp=16443, fp=957, tn=0, fn=2457))
    assert r.precision == pytest.approx(0.945, abs=1e-12)
    assert r.recall == pytest.approx(0.870, abs=1e-12)
    assert r.f1 == pytest.approx(0.9060, abs=1e-4)


def test_zero_over_zero_is_zero():
    r = metrics(ConfusionCounts())
    assert (r.precision, r.recall, r.f1, r.accuracy) == (0.0, 0.0, 0.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_between_precision_and_recall(tp, fp, tn, fn):
    r = metrics(ConfusionCounts(tp, fp, tn, fn))
    for v in (r.precision, r.recall, r.f1, r.accuracy):
        assert 0.0 <= v <= 1.0
    if tp > 0:
        assert min(r.precision, r.recall) - 1e-12 <= r.f1 <= max(r.precision, r.recall) + 1e-12


def test_blend_weights_decrease():
    ws = [blend_weight(n) for n in range(1, 101)]
    assert all(a > b for a, b in zip(ws, ws[1:]))
    assert 1 - ws[-1] == pytest.approx(0.99, abs=1e-15)


# -- evaluation protocol -----------------------------------------------------


def toy():
    rng = np.random.default_rng(0)
    t = np.arange(400)
    base = np.sin(t / 15.0)
    values = base + 0.2 * rng.normal(size=(3, 4, 400))
    xs = np.arange(4.0)
    ctx = InjectionContext(np.full(3, 2.0), np.full(3, -2.0), np.abs(xs[:, None] - xs[None, :]))
    return values, ctx


def test_schedule_even_and_in_range():
    cps = checkpoint_schedule(400, 10, 10, 10, 20)
    assert cps[0] == 9 and cps[-1] == 389
    assert len(set(cps)) == 20


def test_too_many_checkpoints_errors():
    with pytest.raises(EvaluationError):
        checkpoint_schedule(100, 10, 10, 10, 200)


def test_oracle_detector_is_perfect():
    values, ctx = toy()
    res = evaluate(OracleDetector(values, 10), values, 10, ctx, EvalConfig(n_checkpoints=40))
    r = res.report
    assert (r.precision, r.recall, r.f1, r.accuracy) == (1.0, 1.0, 1.0, 1.0)


def test_always_anomalous_detector():
    values, ctx = toy()
    res = evaluate(ConstantDetector(1.0), values, 10, ctx, EvalConfig(n_checkpoints=40))
    assert res.counts == ConfusionCounts(tp=20, fp=20, tn=0, fn=0)
    assert res.report.recall == 1.0 and res.report.precision == 0.5


def test_always_normal_detector():
    values, ctx = toy()
    res = evaluate(ConstantDetector(0.0), values, 10, ctx, EvalConfig(n_checkpoints=40))
    assert res.counts.tp == 0
    assert (res.report.recall, res.report.precision, res.report.accuracy) == (0.0, 0.0, 0.5)


@pytest.mark.parametrize("p_const", [0.0, 0.3, 0.7, 1.0])
def test_accounting_and_rollback(p_const):
    values, ctx = toy()
    before = values.copy()
    res = evaluate(ConstantDetector(p_const), values, 10, ctx, EvalConfig(n_checkpoints=31))
    c = res.counts
    assert c.tp + c.fn == 16 and c.tn + c.fp == 15
    assert np.array_equal(values, before)
    assert counts_from_decisions(res.decisions) == c
    assert metrics(counts_from_decisions(res.decisions)) == res.report


def test_decision_log_layout():
    values, ctx = toy()
    res = evaluate(OracleDetector(values, 10), values, 10, ctx, EvalConfig(n_checkpoints=10))
    for d in res.decisions:
        if d.set == "S1":
            assert d.checkpoint <= d.decision_window <= d.checkpoint + 10
        else:
            assert d.kind == "none" and d.decision_window == d.checkpoint


def test_sweep_validates_p_values():
    values, ctx = toy()
    with pytest.raises(EvaluationError):
        sensitivity_sweep(ConstantDetector(0.0), values, 10, ctx, EvalConfig(n_checkpoints=4), [20, 10])
    with pytest.raises(EvaluationError):
        sensitivity_sweep(ConstantDetector(0.0), values, 10, ctx, EvalConfig(n_checkpoints=4), [0, 10])


def test_training_rejects_bad_quota():
    values, ctx = toy()
    with pytest.raises(TrainingError):
        train_two_phase(values[:, :, :50], np.ones((4, 4)), ctx, TrainConfig(epochs=1, window=10, quota=1.5))


# -- desk-scale training on the synthetic fixture ----------------------------

FIXTURE = SynthSpec(n_nodes=6, n_modes=3, n_ticks=1000, seed=7)


@pytest.fixture(scope="module")
def prepared():
    sd = synth_generate(FIXTURE)
    prep = prepare(sd.grid, sd.coords, TopologySpec(), 0.6)
    assert prep.train.shape == (3, 6, 600)
    return prep


@pytest.fixture(scope="module")
def two_phase(prepared):
    cfg = TrainConfig(epochs=30, window=10, d=16, d_g=16, seed=0)
    return train_two_phase(prepared.train, prepared.adjacency, prepared.ctx, cfg)


@pytest.fixture(scope="module")
def reconstruction_only(prepared):
    cfg = TrainConfig(epochs=30, window=10, d=16, d_g=16, seed=0, quota=0.0)
    return train_two_phase(prepared.train, prepared.adjacency, prepared.ctx, cfg)


def test_history_shape_and_first_epoch(two_phase):
    h = two_phase.history
    assert len(h) == 30
    assert h[0].blended == h[0].rec
    assert [e.epoch for e in h] == list(range(1, 31))


def test_reconstruction_loss_descends(two_phase):
    assert two_phase.history[-1].rec < two_phase.history[0].rec


def test_reconstruction_residual_on_held_out_windows(reconstruction_only, prepared):
    m = reconstruction_only.model
    state = m.init_state()
    residuals = []
    for t in range(9, prepared.test.shape[2]):
        x = window_at(prepared.test, t, 10)
        out = m.forward(x, state)
        residuals.append(float(((x - out.recon.data) ** 2).mean()))
        state = out.state
    assert np.mean(residuals) < 0.1


def test_sudden_change_window_is_flagged(two_phase, prepared):
    m = two_phase.model
    state = m.init_state()
    for t in range(9, 200):
        state = m.forward(window_at(prepared.test, t, 10), state).state
    x = window_at(prepared.test, 200, 10)
    res = inject_sudden(x, 4, 9, prepared.ctx.upper, prepared.ctx.lower, np.random.default_rng(0), node=2, mode=0)
    assert m.forward(res.data, state).probs.data[1] > 0.5


def test_training_is_deterministic(prepared):
    cfg = TrainConfig(epochs=2, window=10, d=8, d_g=4, seed=3)
    a = train_two_phase(prepared.train[:, :, :120], prepared.adjacency, prepared.ctx, cfg)
    b = train_two_phase(prepared.train[:, :, :120], prepared.adjacency, prepared.ctx, cfg)
    assert a.history == b.history
    for k, v in a.model.param_arrays().items():
        assert np.array_equal(v, b.model.param_arrays()[k])


def test_sweep_shape_and_determinism(two_phase, prepared):
    det = ModelDetector(two_phase.model)
    cfg = EvalConfig(n_checkpoints=20, seed=1)
    a = sensitivity_sweep(det, prepared.test, 10, prepared.ctx, cfg, [10, 20, 40, 80])
    b = sensitivity_sweep(det, prepared.test, 10, prepared.ctx, cfg, [10, 20, 40, 80])
    assert [r.p for r in a] == [10, 20, 40, 80]
    assert [r.report for r in a] == [r.report for r in b]


def test_model_evaluation_accounting(two_phase, prepared):
    before = prepared.test.copy()
    res = evaluate(ModelDetector(two_phase.model), prepared.test, 10, prepared.ctx, EvalConfig(n_checkpoints=30))
    assert res.counts.tp + res.counts.fn == 15 and res.counts.tn + res.counts.fp == 15
    assert np.array_equal(prepared.test, before)
    assert res.seconds_per_checkpoint > 0 and res.latency_per_checkpoint > 0
