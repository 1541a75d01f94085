"""Regularization-based continual learning for the DSSM parameters theta.

Every strategy exposes a penalty on theta during training and a consolidation
step once a task has finished. The recognition parameters phi are task-specific
and never penalized.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .enkf import EmissionModel, rollout_forecast, run_filter
from .errors import IncompatibleCheckpoint
from .nets import DSSM
from .numcore import Node


class Kind(enum.Enum):
    NONE = "none"
    EWC_VANILLA = "ewc_vanilla"
    EWC_ONLINE = "ewc_online"
    MAS = "mas"
    SI = "si"
    LWF = "lwf"

    @classmethod
    def parse(cls, text) -> "Kind":
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower().replace("-", "_")
        aliases = {"dssm": "none", "baseline": "none", "ewc": "ewc_online"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown regularizer kind {text!r}") from None


PAPER_LAMBDA = {Kind.NONE: 0.0, Kind.EWC_VANILLA: 1000.0, Kind.EWC_ONLINE: 1000.0,
                Kind.MAS: 800.0, Kind.SI: 1.0, Kind.LWF: 1.0}
# Stronger weights for the short desk benchmark (two tasks, four windows, 100 epochs):
# with few optimizer steps SI's path integral and LwF's forecast gap stay small, so
# the published values barely constrain theta at that scale.
DESK_LAMBDA = {Kind.NONE: 0.0, Kind.EWC_VANILLA: 1000.0, Kind.EWC_ONLINE: 1000.0,
               Kind.MAS: 8000.0, Kind.SI: 100.0, Kind.LWF: 100.0}
SI_DAMPING = 0.01
_KIND_CODES = {k: i for i, k in enumerate(Kind)}


@dataclass
class Regularizer:
    kind: Kind
    lam: float | None = None
    gamma: float = 1.0
    eps: float = SI_DAMPING

    def __post_init__(self):
        self.kind = Kind.parse(self.kind)
        if self.lam is None:
            self.lam = PAPER_LAMBDA[self.kind]
        if self.lam < 0 or not 0 <= self.gamma <= 1 or self.eps <= 0:
            raise ValueError(f"invalid regularizer settings {self}")


@dataclass
class ForecastContext:
    task_id: int
    init: np.ndarray
    controls: np.ndarray
    forecast: np.ndarray
    seed: int

    @property
    def horizon(self) -> int:
        return self.forecast.shape[0]


@dataclass
class ImportanceState:
    """Consolidated knowledge about earlier tasks; which fields matter depends on the kind."""

    P: int
    n_tasks: int = 0
    anchor: np.ndarray | None = None
    weights: np.ndarray | None = None
    omega: np.ndarray | None = None
    theta_start: np.ndarray | None = None
    pairs: list = field(default_factory=list)
    contexts: list = field(default_factory=list)

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.zeros(self.P)
        if self.omega is None:
            self.omega = np.zeros(self.P)


def penalty(reg: Regularizer | None, state: ImportanceState, model: DSSM,
            em: EmissionModel | None = None) -> Node:
    """The regularization term for the current theta (zero before the first consolidation)."""
    if reg is None or reg.kind is Kind.NONE or state.n_tasks == 0:
        return nc.constant(0.0)
    kind, lam = reg.kind, reg.lam
    if kind is Kind.LWF:
        return _lwf_penalty(reg, state, model, em)
    theta = model.theta.as_node()
    if kind is Kind.EWC_VANILLA:
        terms = [nc.sum(m * nc.square(theta - anchor)) for anchor, m in state.pairs]
        return nc.add_n(terms) * (0.5 * lam)
    quad = nc.sum(state.weights * nc.square(theta - state.anchor))
    return quad * (0.5 * lam if kind is Kind.EWC_ONLINE else lam)


def _lwf_penalty(reg, state, model, em):
    terms = []
    for ctx in state.contexts:
        pred = rollout_forecast(ctx.init, ctx.controls, model, em, ctx.horizon,
                                np.random.default_rng(ctx.seed))
        terms.append(nc.mean(nc.square(pred - ctx.forecast)))
    return nc.add_n(terms) * (reg.lam / len(state.contexts))


# EWC ---------------------------------------------------------------------------------

def empirical_fisher(windows, model: DSSM, em: EmissionModel, n: int, seeds) -> np.ndarray:
    """Mean over windows of the squared gradient of the sequence loss w.r.t. theta."""
    total = np.zeros(model.theta.size)
    for (x, u), seed in zip(windows, seeds):
        model.zero_grad()
        nc.backward(run_filter(x, u, model, em, n, np.random.default_rng(seed)).loss)
        total += model.theta.flat_grad() ** 2
    model.zero_grad()
    return total / len(windows)


def ewc_update(state: ImportanceState, theta_star, fisher, gamma: float,
               vanilla: bool = False) -> ImportanceState:
    """Fold one task's Fisher diagonal into the state.

    Online: weights <- gamma * weights + fisher (the first task just stores
    fisher). Vanilla keeps every (anchor, fisher) pair.
    """
    theta_star = np.array(theta_star, dtype=np.float64)
    fisher = np.array(fisher, dtype=np.float64)
    if vanilla:
        state.pairs.append((theta_star, fisher))
    else:
        state.weights = fisher.copy() if state.n_tasks == 0 else gamma * state.weights + fisher
    state.anchor = theta_star
    state.n_tasks += 1
    return state


def ewc_consolidate(state, windows, model, em, n, seeds, gamma, vanilla=False):
    fisher = empirical_fisher(windows, model, em, n, seeds)
    return ewc_update(state, model.theta.flatten(), fisher, gamma, vanilla)


# MAS ---------------------------------------------------------------------------------

def mas_importance(states, controls, model: DSSM) -> np.ndarray:
    """Average over states of |d ||F(z, u)||^2 / d theta|."""
    total = np.zeros(model.theta.size)
    for z, u in zip(states, controls):
        model.zero_grad()
        out = model.transition(np.asarray(z, dtype=np.float64), u if model.d_u else None)
        nc.backward(nc.sum(nc.square(out)))
        total += np.abs(model.theta.flat_grad())
    model.zero_grad()
    return total / max(len(states), 1)


def filtered_states(windows, model: DSSM, em: EmissionModel, n: int, seeds):
    """(state, control) pairs the transition is applied to while filtering the windows."""
    states, controls = [], []
    with nc.no_grad():
        for (x, u), seed in zip(windows, seeds):
            res = run_filter(x, u, model, em, n, np.random.default_rng(seed))
            states += res.filtered_means
            controls += list(u) if model.d_u else [None] * len(res.filtered_means)
    return states, controls


def mas_update(state: ImportanceState, theta_star, omega_task) -> ImportanceState:
    state.weights = state.weights + np.asarray(omega_task, dtype=np.float64)
    state.anchor = np.array(theta_star, dtype=np.float64)
    state.n_tasks += 1
    return state


def mas_consolidate(state, windows, model, em, n, seeds):
    states, controls = filtered_states(windows, model, em, n, seeds)
    return mas_update(state, model.theta.flatten(), mas_importance(states, controls, model))


# SI ----------------------------------------------------------------------------------

def si_begin_task(state: ImportanceState, theta) -> ImportanceState:
    if state.theta_start is None:
        state.theta_start = np.array(theta, dtype=np.float64)
    return state


def si_step_update(state: ImportanceState, grads, theta_before, theta_after) -> ImportanceState:
    """omega += -grad * (theta_after - theta_before) for one optimizer step."""
    state.omega = state.omega - np.asarray(grads) * (np.asarray(theta_after) - np.asarray(theta_before))
    return state


def si_consolidate(state: ImportanceState, theta_start, theta_end, eps: float = SI_DAMPING):
    theta_end = np.array(theta_end, dtype=np.float64)
    delta = theta_end - np.asarray(theta_start, dtype=np.float64)
    # Under Adam a step can move against its own gradient, so a parameter's path
    # integral may come out negative; clipping keeps the penalty a PSD quadratic.
    state.weights = state.weights + np.maximum(state.omega, 0.0) / (delta ** 2 + eps)
    state.omega = np.zeros(state.P)
    state.theta_start = theta_end.copy()
    state.anchor = theta_end
    state.n_tasks += 1
    return state


# LwF ---------------------------------------------------------------------------------

def lwf_snapshot(state: ImportanceState, context: ForecastContext, model: DSSM,
                 em: EmissionModel) -> ImportanceState:
    """Store the finished task's context and re-target every stored forecast at theta*.

    The stored forecasts are the current model's free-running predictions, so
    the penalty is zero right after the snapshot.
    """
    state.contexts.append(context)
    with nc.no_grad():
        for ctx in state.contexts:
            ctx.forecast = rollout_forecast(ctx.init, ctx.controls, model, em, ctx.horizon,
                                            np.random.default_rng(ctx.seed)).value.copy()
    state.anchor = model.theta.flatten()
    state.n_tasks += 1
    return state


# serialization -------------------------------------------------------------------------

STATE_MAGIC = b"CLDSSMS\x00"
_STATE_HEAD = struct.Struct("<8sIIdddQI")
_CTX_HEAD = struct.Struct("<IQIIIII")


def state_to_bytes(reg: Regularizer, state: ImportanceState) -> bytes:
    head = _STATE_HEAD.pack(STATE_MAGIC, 1, _KIND_CODES[reg.kind], reg.lam, reg.gamma, reg.eps,
                            state.P, state.n_tasks)
    zeros = np.zeros(state.P)
    anchor = zeros if state.anchor is None else state.anchor
    kind = reg.kind
    if kind is Kind.NONE:
        arrays = []
    elif kind in (Kind.EWC_ONLINE, Kind.MAS):
        arrays = [anchor, state.weights]
    elif kind is Kind.SI:
        start = zeros if state.theta_start is None else state.theta_start
        arrays = [anchor, state.weights, state.omega, start]
    elif kind is Kind.EWC_VANILLA:
        arrays = [a for pair in state.pairs for a in pair]
    else:
        arrays = [anchor]
    body = b"".join(np.asarray(a, dtype="<f8").tobytes() for a in arrays)
    if kind is Kind.LWF:
        for ctx in state.contexts:
            n, d_z = ctx.init.shape
            body += _CTX_HEAD.pack(ctx.task_id, ctx.seed, n, d_z, ctx.horizon,
                                   ctx.controls.shape[1], ctx.forecast.shape[1])
            body += b"".join(np.asarray(a, dtype="<f8").tobytes()
                             for a in (ctx.init, ctx.controls, ctx.forecast))
    return head + body


def state_from_bytes(raw: bytes):
    """Inverse of :func:`state_to_bytes`; returns (Regularizer, ImportanceState)."""
    try:
        magic, _, code, lam, gamma, eps, P, n_tasks = _STATE_HEAD.unpack_from(raw, 0)
    except struct.error:
        raise IncompatibleCheckpoint("truncated importance-state header") from None
    if magic != STATE_MAGIC:
        raise IncompatibleCheckpoint("not an importance-state file")
    kinds = list(Kind)
    if code >= len(kinds):
        raise IncompatibleCheckpoint(f"unknown regularizer code {code}")
    reg = Regularizer(kinds[code], lam, gamma, eps)
    state = ImportanceState(P, n_tasks)
    pos = _STATE_HEAD.size

    def take(count, shape=None):
        nonlocal pos
        end = pos + 8 * count
        if end > len(raw):
            raise IncompatibleCheckpoint("truncated importance-state payload")
        arr = np.frombuffer(raw[pos:end], dtype="<f8").astype(np.float64)
        pos = end
        return arr.reshape(shape) if shape else arr

    kind = reg.kind
    if kind in (Kind.EWC_ONLINE, Kind.MAS):
        state.anchor, state.weights = take(P), take(P)
    elif kind is Kind.SI:
        state.anchor, state.weights, state.omega, state.theta_start = (take(P) for _ in range(4))
    elif kind is Kind.EWC_VANILLA:
        state.pairs = [(take(P), take(P)) for _ in range(n_tasks)]
        state.anchor = state.pairs[-1][0] if state.pairs else None
    elif kind is Kind.LWF:
        state.anchor = take(P)
        for _ in range(n_tasks):
            if pos + _CTX_HEAD.size > len(raw):
                raise IncompatibleCheckpoint("truncated forecast context")
            task_id, seed, n, d_z, horizon, d_u, d_x = _CTX_HEAD.unpack_from(raw, pos)
            pos += _CTX_HEAD.size
            state.contexts.append(ForecastContext(task_id, take(n * d_z, (n, d_z)),
                                                  take(horizon * d_u, (horizon, d_u)),
                                                  take(horizon * d_x, (horizon, d_x)), seed))
    if pos != len(raw):
        raise IncompatibleCheckpoint("trailing bytes after importance state")
    return reg, state


def save_state(path, reg: Regularizer, state: ImportanceState) -> None:
    with open(path, "wb") as fh:
        fh.write(state_to_bytes(reg, state))


def load_state(path):
    with open(path, "rb") as fh:
        return state_from_bytes(fh.read())
