import functools

import numpy as np
import pytest

from cldssm import continual as cl
from cldssm.continual import ImportanceState, Kind
from cldssm.data import synth_regimes
from cldssm.enkf import EmissionModel
from cldssm.errors import DimensionMismatch, NonFiniteLoss
from cldssm.nets import DSSM, ModelConfig
from cldssm.training import (AdamState, SequenceRunner, TrainConfig, adam_step, derive_seed,
                             evaluate_task, mse, predict_task, run_sequence, train_task)

SMALL = ModelConfig(d_z=3, hidden=(6,), recog_hidden=4)


def cfg(**kw):
    base = dict(epochs=3, ensemble=8, seed=1, model=SMALL)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tasks():
    return synth_regimes(2, d_x=2, seed=0, n_windows=2, T=10, test_len=8)


def reports_equal(a, b):
    return (np.array_equal(a.grid, b.grid, equal_nan=True) and np.array_equal(a.theta, b.theta)
            and all(np.array_equal(p, q) for p, q in zip(a.phis, b.phis)) and a.losses == b.losses)


# Adam ------------------------------------------------------------------------------------

def test_adam_zero_gradient():
    state = AdamState(np.array([0.5, -0.2]), np.array([0.1, 0.3]), 4)
    theta = np.array([1.0, 2.0])
    new, out = adam_step(state, theta, np.zeros(2), 0.01)
    assert np.array_equal(new.m, 0.9 * state.m) and np.array_equal(new.v, 0.999 * state.v)
    assert new.t == 5
    fresh, out = adam_step(AdamState.zeros(2), theta, np.zeros(2), 0.01)
    assert np.array_equal(out, theta)


def test_adam_constant_gradient_unit_step():
    state, theta = AdamState.zeros(3), np.zeros(3)
    g = np.array([0.3, -5.0, 1e-3])
    for _ in range(500):
        prev = theta
        state, theta = adam_step(state, theta, g, 0.01)
    assert np.allclose(np.abs(theta - prev), 0.01, rtol=1e-4)


def test_adam_first_step_hand_evaluation():
    g, lr, eps = np.array([2.0, -0.5, 0.0]), 0.1, 1e-8
    _, theta = adam_step(AdamState.zeros(3), np.ones(3), g, lr, eps=eps)
    m_hat = (0.1 * g) / 0.1
    v_hat = (0.001 * g * g) / 0.001
    assert np.allclose(theta, 1 - lr * m_hat / (np.sqrt(v_hat) + eps), rtol=1e-15)
    assert np.allclose(theta, 1 - lr * g / (np.abs(g) + eps), rtol=1e-12)


def test_adam_shape_check():
    with pytest.raises(DimensionMismatch):
        adam_step(AdamState.zeros(2), np.zeros(3), np.zeros(3), 0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    c = TrainConfig(lambdas={"si": 5})
    assert c.regularizer("si").lam == 5.0 and c.regularizer("mas").lam == 800.0


# metric ----------------------------------------------------------------------------------

def test_mse_examples():
    rng = np.random.default_rng(0)
    truth = rng.standard_normal((7, 3))
    assert mse(truth, truth) == 0.0
    assert mse(truth + 1.0, truth) == pytest.approx(1.0, abs=1e-15)
    pred = rng.standard_normal((7, 3))
    total = 0.0
    for i in range(7):
        for j in range(3):
            total += (pred[i, j] - truth[i, j]) ** 2
    assert abs(mse(pred, truth) - total / 21) < 1e-12
    with pytest.raises(DimensionMismatch):
        mse(pred, truth[:5])


# training --------------------------------------------------------------------------------

def test_derive_seed_distinct_and_stable():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert len({derive_seed(0, k) for k in range(50)}) == 50


def test_baseline_reduction_bit_identical(tasks):
    c = cfg()
    assert reports_equal(run_sequence(tasks, Kind.NONE, c), run_sequence(tasks, None, c))


def test_determinism(tasks):
    c = cfg()
    a, b = run_sequence(tasks, Kind.MAS, c), run_sequence(tasks, Kind.MAS, c)
    assert reports_equal(a, b)
    assert cl.state_to_bytes(a.regularizer, a.state) == cl.state_to_bytes(b.regularizer, b.state)


def test_single_task_equals_standalone(tasks):
    c = cfg()
    report = run_sequence(tasks[:1], Kind.EWC_ONLINE, c)
    model = DSSM.build(2, 1, c.model, np.random.default_rng(derive_seed(c.seed, 3)))
    model.reset_recognition(np.random.default_rng(derive_seed(c.seed, 5, 0)))
    em = EmissionModel.selector(2, c.model.d_z, c.model.r_var)
    res = train_task(tasks[0], model, em, c)
    assert np.array_equal(res.theta, report.theta)
    assert evaluate_task(tasks[0], model, em, c.ensemble, derive_seed(c.seed, 2, 0)) == report.grid[0, 0]
    assert report.grid.shape == (1, 1)


def test_grid_layout_and_csv(tasks):
    report = run_sequence(tasks, Kind.SI, cfg())
    g = report.grid
    assert np.isnan(g[0, 1]) and np.all(np.isfinite(g[np.tril_indices(2)]))
    assert report.averaged[1] == pytest.approx(g[1, :2].mean())
    assert report.forgetting() == g[1, 0] - g[0, 0]
    lines = report.to_csv().splitlines()
    assert lines[0] == "stage,task,mse" and len(lines) == 1 + 2 + 3
    assert lines[2].startswith("1,avg,")


@pytest.mark.parametrize("kind", [Kind.SI, Kind.EWC_ONLINE, Kind.LWF, None])
def test_fork_matches_independent_run(kind, tasks):
    c = cfg()
    base = SequenceRunner(2, 1, c, c.regularizer(Kind.SI))
    base.train(tasks[0])
    forked = base.fork(None if kind is None else c.regularizer(kind))
    forked.consolidate()
    forked.evaluate()
    forked.step(tasks[1])
    assert reports_equal(forked.report(), run_sequence(tasks, kind, c))


def test_fork_refused_after_consolidation(tasks):
    c = cfg()
    r = SequenceRunner(2, 1, c, c.regularizer(Kind.MAS))
    r.step(tasks[0])
    with pytest.raises(ValueError):
        r.fork(c.regularizer(Kind.SI))


def test_si_omega_is_sum_of_increments(tasks):
    c = cfg()
    model = DSSM.build(2, 1, c.model, np.random.default_rng(0))
    em = EmissionModel.selector(2, 3, 0.01)
    state = ImportanceState(model.theta.size)
    res = train_task(tasks[0], model, em, c, c.regularizer(Kind.SI), state, record_si=True)
    assert len(res.si_increments) == c.epochs * len(tasks[0].windows)
    total = functools.reduce(lambda acc, inc: acc + inc, res.si_increments, np.zeros(model.theta.size))
    assert np.array_equal(state.omega, total)


def test_anchored_stability(tasks):
    c = cfg()
    report = run_sequence(tasks[:1], Kind.EWC_ONLINE, c)
    model = DSSM.build(2, 1, c.model, np.random.default_rng(0))
    model.theta.assign(report.theta)
    em = EmissionModel.selector(2, 3, 0.01)
    assert cl.penalty(report.regularizer, report.state, model, em).value == 0.0


def test_huge_lambda_pins_theta(tasks):
    c = cfg(epochs=40, lambdas={"ewc_online": 1e9})
    r = SequenceRunner(2, 1, c, c.regularizer(Kind.EWC_ONLINE))
    r.step(tasks[0])
    anchor = r.stage.state.anchor.copy()
    r.train(tasks[1])
    assert np.max(np.abs(r.model.theta.flatten() - anchor)) < 1e-3


def test_training_loss_decreases_on_linear_data():
    tasks = synth_regimes(2, d_x=2, seed=3, n_windows=4, T=20, test_len=10, angles=[0.3, 0.6])
    c = cfg(epochs=80, ensemble=16, seed=0, lr=0.01)
    model = DSSM.build(2, 1, c.model, np.random.default_rng(0))
    em = EmissionModel.selector(2, 3, 0.01)
    losses = np.array(train_task(tasks[0], model, em, c).losses)
    avg = np.convolve(losses, np.ones(20) / 20, mode="valid")
    # non-increasing up to the Monte-Carlo noise of one window of 20 epochs
    assert np.all(np.diff(avg[::20]) <= 0)
    assert avg[-1] < avg[0]


def test_trained_model_beats_random_init():
    ratios = []
    for seed in range(5):
        tasks = synth_regimes(2, d_x=2, seed=seed, n_windows=4, T=30, test_len=30)
        c = cfg(epochs=40, ensemble=20, seed=seed, model=ModelConfig(d_z=4, hidden=(16,), recog_hidden=8))
        em = EmissionModel.selector(2, 4, 0.01)
        model = DSSM.build(2, 1, c.model, np.random.default_rng(seed))
        before = evaluate_task(tasks[0], model, em, c.ensemble, 0)
        train_task(tasks[0], model, em, c)
        ratios.append(evaluate_task(tasks[0], model, em, c.ensemble, 0) / before)
    assert np.mean(np.array(ratios) < 0.5) >= 0.6, ratios


def test_non_finite_loss_raises(tasks):
    c = cfg()
    model = DSSM.build(2, 1, c.model, np.random.default_rng(0))
    model.transition.biases[-1].value = np.full(3, np.nan)
    em = EmissionModel.selector(2, 3, 0.01)
    with pytest.raises(NonFiniteLoss) as e:
        train_task(tasks[0], model, em, c)
    assert e.value.epoch == 0 and e.value.batch == 0


def test_predict_shape(tasks):
    c = cfg()
    model = DSSM.build(2, 1, c.model, np.random.default_rng(0))
    em = EmissionModel.selector(2, 3, 0.01)
    pred = predict_task(tasks[0], model, em, 8, 0)
    assert pred.shape == tasks[0].test_x.shape
    assert np.array_equal(pred, predict_task(tasks[0], model, em, 8, 0))
