"""Adam, per-task training, sequential-task orchestration and evaluation."""

from __future__ import annotations

import copy
import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import continual as cl
from . import numcore as nc
from .continual import ImportanceState, Kind, Regularizer
from .data import TaskDataset
from .enkf import EmissionModel, rollout_forecast, run_filter
from .errors import DimensionMismatch, NonFiniteLoss
from .nets import DSSM, ModelConfig


# streams used to derive independent seeds
_TRAIN, _FISHER, _EVAL, _INIT, _SHUFFLE, _RECOG = range(6)


def derive_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(state: AdamState, theta, grads, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new state, new parameters)."""
    theta, grads = np.asarray(theta, dtype=np.float64), np.asarray(grads, dtype=np.float64)
    if theta.shape != grads.shape or theta.shape != state.m.shape:
        raise DimensionMismatch(f"theta {theta.shape}, grads {grads.shape}, state {state.m.shape}")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return AdamState(m, v, t), theta - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainConfig:
    lr: float = 0.005
    epochs: int = 400
    ensemble: int = 100
    seed: int = 0
    lambdas: dict = field(default_factory=lambda: dict(cl.PAPER_LAMBDA))
    gamma: float = 1.0
    si_eps: float = cl.SI_DAMPING
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.ensemble < 2:
            raise ValueError(f"invalid training configuration {self}")
        self.lambdas = {Kind.parse(k): float(v) for k, v in self.lambdas.items()}

    def regularizer(self, kind) -> Regularizer:
        kind = Kind.parse(kind)
        return Regularizer(kind, self.lambdas.get(kind, cl.PAPER_LAMBDA[kind]), self.gamma,
                           self.si_eps)


@dataclass
class TaskResult:
    theta: np.ndarray
    phi: np.ndarray
    losses: list
    penalties: list
    epoch_seconds: list
    si_increments: list = field(default_factory=list)


def train_task(task: TaskDataset, model: DSSM, em: EmissionModel, cfg: TrainConfig,
               reg: Regularizer | None = None, state: ImportanceState | None = None,
               task_index: int = 0, record_si: bool = False) -> TaskResult:
    """Minimize sequence loss (+ penalty) window by window, in shuffled order each epoch.

    ``reg=None`` skips the continual-learning machinery entirely. With
    ``Kind.NONE`` the penalty is still evaluated and asserted to be zero.
    The caller is responsible for resetting phi before a new task.
    """
    P = model.theta.size
    adam = AdamState.zeros(P + model.phi.size)
    shuffle_rng = np.random.default_rng(derive_seed(cfg.seed, _SHUFFLE, task_index))
    use_si = reg is not None and reg.kind is Kind.SI
    if use_si:
        cl.si_begin_task(state, model.theta.flatten())
    losses, penalties, times, increments = [], [], [], []
    n_win = len(task.windows)
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        epoch_loss = epoch_pen = 0.0
        for batch, w in enumerate(shuffle_rng.permutation(n_win)):
            x, u = task.windows[w]
            rng = np.random.default_rng(derive_seed(cfg.seed, _TRAIN, task_index, epoch, w))
            model.zero_grad()
            try:
                loss = run_filter(x, u, model, em, cfg.ensemble, rng).loss
                nc.backward(loss)
            except DimensionMismatch:
                raise
            except (ValueError, np.linalg.LinAlgError) as exc:
                # NaN/Inf reaching a factorization, or a covariance that lost definiteness
                raise NonFiniteLoss(epoch, batch, float("nan")) from exc
            task_grad = model.theta.flat_grad()
            pen_value = 0.0
            if reg is not None:
                pen = cl.penalty(reg, state, model, em)
                pen_value = float(pen.value)
                if reg.kind is Kind.NONE:
                    assert pen_value == 0.0, "baseline penalty must vanish"
                nc.backward(pen)
            total = float(loss.value) + pen_value
            grads = np.concatenate([model.theta.flat_grad(), model.phi.flat_grad()])
            if not (np.isfinite(total) and np.all(np.isfinite(grads))):
                raise NonFiniteLoss(epoch, batch, total)
            before = np.concatenate([model.theta.flatten(), model.phi.flatten()])
            adam, after = adam_step(adam, before, grads, cfg.lr)
            model.theta.assign(after[:P])
            model.phi.assign(after[P:])
            if use_si:
                # path integral uses the task-loss gradient only
                if record_si:
                    increments.append(-task_grad * (after[:P] - before[:P]))
                cl.si_step_update(state, task_grad, before[:P], after[:P])
            epoch_loss += float(loss.value)
            epoch_pen += pen_value
        losses.append(epoch_loss / n_win)
        penalties.append(epoch_pen / n_win)
        times.append(time.perf_counter() - start)
    model.zero_grad()
    return TaskResult(model.theta.flatten(), model.phi.flatten(), losses, penalties, times,
                      increments)


def forecast_init(task: TaskDataset, model: DSSM, em: EmissionModel, n: int, seed: int):
    """Filtered ensemble at the end of the task's last training window."""
    x, u = task.windows[-1]
    with nc.no_grad():
        res = run_filter(x, u, model, em, n, np.random.default_rng(seed))
    return res.particles.value.copy()


def mse(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionMismatch(f"prediction {pred.shape} vs truth {truth.shape}")
    return float(np.mean((pred - truth) ** 2))


def predict_task(task: TaskDataset, model: DSSM, em: EmissionModel, n: int, seed: int,
                 horizon: int | None = None) -> np.ndarray:
    """Filter the last training window, then forecast over the test segment."""
    horizon = task.horizon if horizon is None else horizon
    init = forecast_init(task, model, em, n, derive_seed(seed, 0))
    with nc.no_grad():
        pred = rollout_forecast(init, task.test_u, model, em, horizon,
                                np.random.default_rng(derive_seed(seed, 1)))
    return pred.value


def evaluate_task(task: TaskDataset, model: DSSM, em: EmissionModel, n: int, seed: int) -> float:
    return mse(predict_task(task, model, em, n, seed), task.test_x)


def consolidate(reg: Regularizer, state: ImportanceState, task: TaskDataset, model: DSSM,
                em: EmissionModel, cfg: TrainConfig, task_index: int) -> ImportanceState:
    """Post-task update of the importance state at the trained theta*."""
    seeds = [derive_seed(cfg.seed, _FISHER, task_index, w) for w in range(len(task.windows))]
    kind = reg.kind
    if kind in (Kind.EWC_ONLINE, Kind.EWC_VANILLA):
        return cl.ewc_consolidate(state, task.windows, model, em, cfg.ensemble, seeds,
                                  reg.gamma, vanilla=kind is Kind.EWC_VANILLA)
    if kind is Kind.MAS:
        return cl.mas_consolidate(state, task.windows, model, em, cfg.ensemble, seeds)
    if kind is Kind.SI:
        return cl.si_consolidate(state, state.theta_start, model.theta.flatten(), reg.eps)
    if kind is Kind.LWF:
        seed = derive_seed(cfg.seed, _EVAL, task_index)
        init = forecast_init(task, model, em, cfg.ensemble, derive_seed(seed, 0))
        ctx = cl.ForecastContext(task.task_id, init, task.test_u.copy(),
                                 np.zeros((task.horizon, task.d_x)), derive_seed(seed, 1))
        return cl.lwf_snapshot(state, ctx, model, em)
    return state


@dataclass
class TaskReport:
    kind: str
    grid: np.ndarray
    losses: list
    epoch_seconds: list
    theta: np.ndarray
    phis: list
    state: ImportanceState | None
    regularizer: Regularizer | None = None

    @property
    def averaged(self) -> np.ndarray:
        return np.array([np.mean(self.grid[j, :j + 1]) for j in range(self.grid.shape[0])])

    def forgetting(self, task: int = 0, stage: int | None = None) -> float:
        stage = self.grid.shape[0] - 1 if stage is None else stage
        return float(self.grid[stage, task] - self.grid[task, task])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "task", "mse"])
        J = self.grid.shape[0]
        for j in range(J):
            for k in range(j + 1):
                w.writerow([j + 1, k + 1, repr(float(self.grid[j, k]))])
            w.writerow([j + 1, "avg", repr(float(self.averaged[j]))])
        return buf.getvalue()


@dataclass
class _Stage:
    """Everything needed to continue a sequence from a given point."""

    model: DSSM
    state: ImportanceState | None
    phis: list
    grid_rows: list
    losses: list
    epoch_seconds: list


class SequenceRunner:
    """Trains tasks one after another, consolidating and evaluating after each.

    ``fork`` copies the runner so several regularizers can share a common prefix.
    """

    def __init__(self, d_x: int, d_u: int, cfg: TrainConfig, reg: Regularizer | None = None):
        self.cfg = cfg
        self.reg = reg
        init_rng = np.random.default_rng(derive_seed(cfg.seed, _INIT))
        model = DSSM.build(d_x, d_u, cfg.model, init_rng)
        self.em = EmissionModel.selector(d_x, cfg.model.d_z, cfg.model.r_var)
        state = None if reg is None else ImportanceState(model.theta.size)
        self.stage = _Stage(model, state, [], [], [], [])
        self.tasks: list[TaskDataset] = []

    @property
    def model(self) -> DSSM:
        return self.stage.model

    def fork(self, reg: Regularizer | None) -> "SequenceRunner":
        """Copy of this runner continuing under ``reg``.

        Only valid before the first consolidation, when every kind has trained
        identically. A runner started under SI keeps its path integral when
        forked to SI; any other switch starts from an empty state.
        """
        if self.stage.state is not None and self.stage.state.n_tasks:
            raise ValueError("cannot switch regularizer after a consolidation")
        other = copy.copy(self)
        other.reg = reg
        other.stage = copy.deepcopy(self.stage)
        other.tasks = list(self.tasks)
        same_kind = reg is not None and self.reg is not None and reg.kind is self.reg.kind
        if reg is None:
            other.stage.state = None
        elif not same_kind:
            other.stage.state = ImportanceState(other.model.theta.size)
        return other

    def train(self, task: TaskDataset, record_si: bool = False) -> TaskResult:
        j = len(self.tasks)
        self.tasks.append(task)
        st = self.stage
        st.model.reset_recognition(np.random.default_rng(derive_seed(self.cfg.seed, _RECOG, j)))
        result = train_task(task, st.model, self.em, self.cfg, self.reg, st.state, j, record_si)
        st.phis.append(result.phi)
        st.losses.append(result.losses)
        st.epoch_seconds.append(result.epoch_seconds)
        self.last_result = result
        return result

    def consolidate(self) -> None:
        if self.reg is None:
            return
        j = len(self.tasks) - 1
        self.stage.state = consolidate(self.reg, self.stage.state, self.tasks[j], self.model,
                                       self.em, self.cfg, j)

    def evaluate(self) -> list[float]:
        st = self.stage
        current_phi = st.model.phi.flatten()
        row = []
        for k, task in enumerate(self.tasks):
            st.model.phi.assign(st.phis[k])
            row.append(evaluate_task(task, st.model, self.em, self.cfg.ensemble,
                                     derive_seed(self.cfg.seed, _EVAL, k)))
        st.model.phi.assign(current_phi)
        st.grid_rows.append(row)
        return row

    def step(self, task: TaskDataset) -> list[float]:
        self.train(task)
        self.consolidate()
        return self.evaluate()

    def report(self) -> TaskReport:
        st = self.stage
        J = len(st.grid_rows)
        grid = np.full((J, J), np.nan)
        for j, row in enumerate(st.grid_rows):
            grid[j, :len(row)] = row
        kind = "disabled" if self.reg is None else self.reg.kind.value
        return TaskReport(kind, grid, st.losses, st.epoch_seconds, st.model.theta.flatten(),
                          list(st.phis), st.state, self.reg)


def run_sequence(tasks: list[TaskDataset], kind, cfg: TrainConfig) -> TaskReport:
    """Train on ``tasks`` in order under one regularizer kind.

    ``kind=None`` disables the continual module altogether (no penalty, no
    consolidation); ``Kind.NONE`` is the baseline DSSM through the same path.
    """
    if not tasks:
        raise ValueError("run_sequence needs at least one task")
    reg = None if kind is None else cfg.regularizer(kind)
    runner = SequenceRunner(tasks[0].d_x, tasks[0].d_u, cfg, reg)
    for task in tasks:
        runner.step(task)
    return runner.report()
