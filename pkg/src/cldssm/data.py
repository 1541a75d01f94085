"""Time-series ingestion, task partitioning and synthetic benchmark generators."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .errors import InsufficientData, MissingColumn, ParseError


@dataclass
class SeriesSpec:
    """Which CSV columns are observations, controls and (optionally) the timestamp."""

    observations: list
    controls: list = field(default_factory=list)
    timestamp: str | None = None
    delimiter: str = ","
    header: bool = True

    def __post_init__(self):
        self.observations = list(self.observations)
        self.controls = list(self.controls)
        if not self.observations:
            raise ValueError("at least one observation column is required")
        obs = {c.lower() if isinstance(c, str) else c for c in self.observations}
        ctrl = {c.lower() if isinstance(c, str) else c for c in self.controls}
        if obs & ctrl:
            raise ValueError(f"columns used as both observation and control: {sorted(obs & ctrl)}")


@dataclass
class Series:
    x: np.ndarray
    u: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    @property
    def values(self) -> np.ndarray:
        return np.hstack([self.x, self.u])

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def d_u(self) -> int:
        return self.u.shape[1]


def _parse_time(text):
    try:
        return float(text)
    except ValueError:
        return datetime.fromisoformat(text.strip()).timestamp()


def load_csv(path, spec: SeriesSpec) -> Series:
    """Read observation and control columns in row order.

    Columns are matched case-insensitively by name (or by zero-based index when
    the file has no header). Empty or non-numeric cells raise :class:`ParseError`
    naming the 1-based data row; timestamps must be strictly increasing.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=spec.delimiter)
        rows = [r for r in reader if r]
    if spec.header:
        if not rows:
            raise MissingColumn(spec.observations[0])
        names = [h.strip().lower() for h in rows[0]]
        rows = rows[1:]

        def resolve(col):
            key = str(col).strip().lower()
            if key not in names:
                raise MissingColumn(col)
            return names.index(key)
    else:
        width = len(rows[0]) if rows else 0

        def resolve(col):
            idx = int(col)
            if not 0 <= idx < width:
                raise MissingColumn(col)
            return idx

    obs_idx = [resolve(c) for c in spec.observations]
    ctrl_idx = [resolve(c) for c in spec.controls]
    time_idx = resolve(spec.timestamp) if spec.timestamp is not None else None
    cols = list(zip(spec.observations + spec.controls, obs_idx + ctrl_idx))
    out = np.empty((len(rows), len(cols)))
    last_time = None
    for i, row in enumerate(rows, start=1):
        for j, (name, idx) in enumerate(cols):
            cell = row[idx].strip() if idx < len(row) else ""
            try:
                val = float(cell)
            except ValueError:
                raise ParseError(i, name, f"cannot parse {cell!r} as a number") from None
            if not math.isfinite(val):
                raise ParseError(i, name, f"non-finite value {cell!r}")
            out[i - 1, j] = val
        if time_idx is not None:
            cell = row[time_idx] if time_idx < len(row) else ""
            try:
                stamp = _parse_time(cell)
            except ValueError:
                raise ParseError(i, spec.timestamp, f"bad timestamp {cell!r}") from None
            if last_time is not None and stamp <= last_time:
                raise ParseError(i, spec.timestamp, "timestamps are not increasing")
            last_time = stamp
    d_x = len(obs_idx)
    return Series(out[:, :d_x], out[:, d_x:])


def write_csv(path, series: Series, obs_names=None, ctrl_names=None, with_time=True) -> None:
    """Write a series in the loader's schema: ``t, x1.., u1..`` with LF line endings."""
    obs_names = obs_names or [f"x{i + 1}" for i in range(series.d_x)]
    ctrl_names = ctrl_names or [f"u{i + 1}" for i in range(series.d_u)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["t"] if with_time else []) + obs_names + ctrl_names)
        for t in range(len(series)):
            vals = [repr(float(v)) for v in np.concatenate([series.x[t], series.u[t]])]
            w.writerow(([str(t)] if with_time else []) + vals)


def default_spec(d_x: int, d_u: int, with_time=True) -> SeriesSpec:
    return SeriesSpec([f"x{i + 1}" for i in range(d_x)], [f"u{i + 1}" for i in range(d_u)],
                      timestamp="t" if with_time else None)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values) -> "Standardizer":
        values = np.asarray(values, dtype=np.float64)
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        # constant columns keep unit scale
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    def apply(self, values):
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def invert(self, values):
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


@dataclass
class TaskDataset:
    task_id: int
    windows: list
    test_x: np.ndarray
    test_u: np.ndarray
    standardizer: Standardizer | None = None
    train_range: tuple = (0, 0)
    test_range: tuple = (0, 0)

    @property
    def d_x(self) -> int:
        return self.test_x.shape[1]

    @property
    def d_u(self) -> int:
        return self.test_u.shape[1]

    @property
    def horizon(self) -> int:
        return self.test_x.shape[0]

    @property
    def window_len(self) -> int:
        return self.windows[0][0].shape[0]


def _cut(values, d_x, start, n_windows, T, test_len, task_id, standardizer, offset, train_len=None):
    train_len = n_windows * T if train_len is None else train_len
    windows = []
    for w in range(n_windows):
        block = values[start + w * T:start + (w + 1) * T]
        windows.append((block[:, :d_x].copy(), block[:, d_x:].copy()))
    test_start = start + train_len
    test = values[test_start:test_start + test_len]
    return TaskDataset(task_id, windows, test[:, :d_x].copy(), test[:, d_x:].copy(), standardizer,
                       (offset + start, offset + test_start),
                       (offset + test_start, offset + test_start + test_len))


def partition_tasks(series: Series, n_tasks: int, T: int, n_windows: int, test_len: int,
                    seed: int, train_len: int | None = None) -> list[TaskDataset]:
    """Chronological equal segments, one task each.

    Inside each segment a seeded random block of ``train_len + test_len``
    samples is chosen (``train_len`` defaults to ``n_windows * T``). The
    first ``n_windows * T`` samples of its training part are cut into
    windows; the ``test_len`` samples after the training part are the test
    segment. Standardization is fitted on the first task's training windows
    and applied to every task.
    """
    train_len = n_windows * T if train_len is None else int(train_len)
    if train_len < n_windows * T:
        raise ValueError(f"train_len={train_len} cannot hold {n_windows} windows of length {T}")
    total = len(series)
    seg_len = total // max(n_tasks, 1)
    block = train_len + test_len
    if n_tasks < 1 or block > seg_len:
        raise InsufficientData(block * max(n_tasks, 1), total)
    rng = np.random.default_rng(seed)
    starts = [int(rng.integers(0, seg_len - block + 1)) for _ in range(n_tasks)]
    raw = series.values
    first = raw[starts[0]:starts[0] + n_windows * T]
    std = Standardizer.fit(first)
    values = std.apply(raw)
    tasks = []
    for j, s in enumerate(starts):
        offset = j * seg_len
        seg = values[offset:offset + seg_len]
        tasks.append(_cut(seg, series.d_x, s, n_windows, T, test_len, j + 1, std, offset, train_len))
    return tasks


# linear-Gaussian oracle ---------------------------------------------------------

@dataclass
class KalmanResult:
    loglik: float
    step_loglik: np.ndarray
    pred_means: np.ndarray
    pred_covs: np.ndarray
    filt_means: np.ndarray
    filt_covs: np.ndarray


def kalman_filter(x, A, H, Q, R, m0, P0) -> KalmanResult:
    """Exact Kalman filter for z_t = A z_{t-1} + q, x_t = H z_t + r, z_0 ~ N(m0, P0)."""
    A, H, Q, R = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (A, H, Q, R))
    m = np.atleast_1d(np.asarray(m0, dtype=np.float64))
    P = np.atleast_2d(np.asarray(P0, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    T, d = x.shape[0], m.shape[0]
    out = KalmanResult(0.0, np.empty(T), np.empty((T, d)), np.empty((T, d, d)),
                       np.empty((T, d)), np.empty((T, d, d)))
    for t in range(T):
        m = A @ m
        P = A @ P @ A.T + Q
        out.pred_means[t], out.pred_covs[t] = m, P
        S = H @ P @ H.T + R
        r = x[t] - H @ m
        sign, logdet = np.linalg.slogdet(S)
        out.step_loglik[t] = -0.5 * (len(r) * math.log(2 * math.pi) + logdet
                                     + r @ np.linalg.solve(S, r))
        K = P @ H.T @ np.linalg.inv(S)
        m = m + K @ r
        P = (np.eye(d) - K @ H) @ P
        P = 0.5 * (P + P.T)
        out.filt_means[t], out.filt_covs[t] = m, P
    out.loglik = float(out.step_loglik.sum())
    return out


@dataclass
class LGSSMData:
    x: np.ndarray
    z: np.ndarray
    A: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    m0: np.ndarray
    P0: np.ndarray
    oracle: KalmanResult

    @property
    def loglik(self) -> float:
        return self.oracle.loglik

    @property
    def series(self) -> Series:
        return Series(self.x, np.zeros((self.x.shape[0], 0)))


def synth_lgssm(A, H, Q, R, T_total: int, seed: int, m0=None, P0=None) -> LGSSMData:
    """Simulate a linear-Gaussian SSM and attach the exact Kalman-filter oracle.

    Without ``P0`` the initial covariance is the stationary one when A is
    stable, else the identity. ``P0 = 0`` pins z_0 to ``m0``.
    """
    A, H, Q, R = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (A, H, Q, R))
    d_z = A.shape[0]
    m0 = np.zeros(d_z) if m0 is None else np.atleast_1d(np.asarray(m0, dtype=np.float64))
    if P0 is None:
        stable = np.max(np.abs(np.linalg.eigvals(A))) < 1
        P0 = solve_discrete_lyapunov(A, Q) if stable else np.eye(d_z)
    P0 = np.atleast_2d(np.asarray(P0, dtype=np.float64))
    rng = np.random.default_rng(seed)

    def draw(cov, size):
        # eigh tolerates singular (e.g. zero) covariances
        vals, vecs = np.linalg.eigh(cov)
        root = vecs * np.sqrt(np.clip(vals, 0.0, None))
        return rng.standard_normal((size, cov.shape[0])) @ root.T

    z = np.empty((T_total, d_z))
    prev = m0 + draw(P0, 1)[0]
    q_noise, r_noise = draw(Q, T_total), draw(R, T_total)
    for t in range(T_total):
        prev = A @ prev + q_noise[t]
        z[t] = prev
    x = z @ H.T + r_noise
    oracle = kalman_filter(x, A, H, Q, R, m0, P0)
    return LGSSMData(x, z, A, H, Q, R, m0, P0, oracle)


# regime-switching benchmark -------------------------------------------------------

DEFAULT_DECAY = 0.9
DEFAULT_ANGLE_STEP = 0.5


def regime_angles(n_tasks: int) -> list[float]:
    return [DEFAULT_ANGLE_STEP * (j + 1) for j in range(n_tasks)]


def simulate_regime(angle: float, steps: int, rng, decay: float = DEFAULT_DECAY,
                    process_std: float = 0.05, obs_std: float = 0.05, forcing: float = 1.0,
                    d_x: int = 2, z0=None):
    """Damped 2-D rotation driven by a scalar white-noise control.

    z_t = decay * Rot(angle) z_{t-1} + forcing * (u_t, 0) + process noise,
    x_t = first ``d_x`` coordinates of z_t + observation noise.
    Returns (x, u, z).
    """
    c, s = math.cos(angle), math.sin(angle)
    A = decay * np.array([[c, -s], [s, c]])
    u = rng.standard_normal((steps, 1))
    z = np.empty((steps, 2))
    prev = np.array([1.0, 0.0]) if z0 is None else np.asarray(z0, dtype=np.float64)
    noise = rng.standard_normal((steps, 2)) * process_std
    for t in range(steps):
        prev = A @ prev + noise[t]
        prev[0] += forcing * u[t, 0]
        z[t] = prev
    x = z[:, :d_x] + rng.standard_normal((steps, d_x)) * obs_std
    return x, u, z


def synth_regimes(n_tasks: int, d_x: int = 2, seed: int = 0, n_windows: int = 4, T: int = 50,
                  test_len: int = 50, angles=None, decay: float = DEFAULT_DECAY,
                  burn_in: int = 20) -> list[TaskDataset]:
    """Related but distinct forced rotation systems, one per task.

    Task j rotates by ``angles[j]`` per step (default 0.5 * (j + 1) rad). All
    tasks share the observation model and the task-1 standardization.
    """
    if n_tasks < 2 and angles is None:
        raise ValueError("synth_regimes needs at least two tasks")
    angles = regime_angles(n_tasks) if angles is None else list(angles)
    rng = np.random.default_rng(seed)
    length = n_windows * T + test_len
    raw = []
    for angle in angles[:n_tasks]:
        x, u, _ = simulate_regime(angle, burn_in + length, rng, decay=decay, d_x=d_x)
        raw.append(np.hstack([x, u])[burn_in:])
    std = Standardizer.fit(raw[0][:n_windows * T])
    tasks = []
    for j, values in enumerate(raw):
        tasks.append(_cut(std.apply(values), d_x, 0, n_windows, T, test_len, j + 1, std,
                          j * length))
    return tasks


def regime_series(n_tasks: int, d_x: int = 2, seed: int = 0, length: int = 250,
                  angles=None, decay: float = DEFAULT_DECAY) -> list[Series]:
    """Raw (unstandardized) per-task series from the same generator, for CSV export."""
    angles = regime_angles(n_tasks) if angles is None else list(angles)
    rng = np.random.default_rng(seed)
    out = []
    for angle in angles[:n_tasks]:
        x, u, _ = simulate_regime(angle, length, rng, decay=decay, d_x=d_x)
        out.append(Series(x, u))
    return out
