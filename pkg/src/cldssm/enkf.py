"""Differentiable stochastic ensemble Kalman filter for the deep state-space model.

Particles are an ``(N, d_z)`` node. Every random draw comes from the ``rng``
passed in, in a fixed order, so fixing the seed fixes the noise and the filter
becomes a deterministic differentiable map of the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import cho_solve

from . import numcore as nc
from .errors import DimensionMismatch
from .nets import DSSM
from .numcore import GaussianDiag, Node


@dataclass
class EmissionModel:
    """Fixed linear-Gaussian observation model x = H z + eta, eta ~ N(0, R)."""

    H: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=np.float64))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=np.float64))
        d_x = self.H.shape[0]
        if self.R.shape != (d_x, d_x):
            raise DimensionMismatch(f"R has shape {self.R.shape}, expected {(d_x, d_x)}")
        nc.cholesky(self.R)

    @classmethod
    def selector(cls, d_x: int, d_z: int, r_var: float = 0.01) -> "EmissionModel":
        """Observe the first ``d_x`` latent coordinates with noise variance ``r_var``."""
        if d_z < d_x:
            raise DimensionMismatch(f"latent dimension {d_z} is smaller than d_x={d_x}")
        return cls(np.eye(d_x, d_z), r_var * np.eye(d_x))

    @property
    def d_x(self) -> int:
        return self.H.shape[0]

    @property
    def d_z(self) -> int:
        return self.H.shape[1]

    @cached_property
    def chol_R(self) -> np.ndarray:
        return nc.cholesky(self.R)


@dataclass
class ForecastMoments:
    mean: Node
    cov: Node


def ensemble_moments(particles) -> ForecastMoments:
    """Sample mean and unbiased, exactly symmetric sample covariance.

    Deviations are taken from the first particle before averaging, so an
    ensemble of identical particles has a covariance of exactly zero.
    """
    z = nc.as_node(particles)
    zv = z.value
    n, d = zv.shape
    if n < 2:
        raise DimensionMismatch("an ensemble needs at least two particles")
    dev = zv - zv[0]
    shift = dev.mean(axis=0)
    centred = dev - shift
    cov = centred.T @ centred / (n - 1)
    cov = 0.5 * (cov + cov.T)
    packed = np.vstack([zv[0] + shift, cov])

    def vjp(g):
        gs = 0.5 * (g[1:] + g[1:].T)
        gz = centred @ (2.0 * gs / (n - 1))
        gz -= gz.mean(axis=0)
        return (gz + g[0] / n,)

    node = nc.make_op(packed, (z,), vjp)
    return ForecastMoments(node[0], node[1:])


def _add_process_noise(mean_next, beta, eps) -> Node:
    mean_next, beta = nc.as_node(mean_next), nc.as_node(beta)
    scale = np.exp(0.5 * beta.value)
    return nc.make_op(mean_next.value + scale * eps, (mean_next, beta),
                      lambda g: (g, 0.5 * scale * (g * eps).sum(axis=0)))


def forecast_step(particles, u_t, model: DSSM, rng, eps=None):
    """Push every particle through the transition and add reparameterized noise."""
    z = nc.as_node(particles)
    if eps is None:
        eps = rng.standard_normal(z.shape)
    forecast = _add_process_noise(model.transition(z, u_t), model.noise.beta, eps)
    return forecast, ensemble_moments(forecast)


def innovation_cov(moments: ForecastMoments, em: EmissionModel) -> np.ndarray:
    """H C H^T + R as a plain array."""
    c = nc.value_of(moments.cov)
    return em.H @ c @ em.H.T + em.R


def kalman_gain(moments: ForecastMoments, em: EmissionModel) -> np.ndarray:
    c = nc.value_of(moments.cov)
    s = innovation_cov(moments, em)
    return np.linalg.solve(s, em.H @ c).T


def filter_step(forecast, moments: ForecastMoments, x_t, em: EmissionModel, rng, eta=None):
    """Perturbed-observation update; returns the analysis ensemble and the gain.

    Each particle moves by K (x_t + eta_n - H z_n) with K = C H^T (H C H^T + R)^-1
    and eta_n ~ N(0, R). Differentiable in the particles and in C.
    """
    z, cov = nc.as_node(forecast), nc.as_node(moments.cov)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (em.d_x,):
        raise DimensionMismatch(f"observation has shape {x_t.shape}, expected ({em.d_x},)")
    if eta is None:
        eta = rng.standard_normal((z.shape[0], em.d_x)) @ em.chol_R.T
    H = em.H
    zv, cv = z.value, cov.value
    s = H @ cv @ H.T + em.R
    # C and S are symmetric, so K^T = S^-1 H C.
    gain_t = np.linalg.solve(s, H @ cv)
    innov = (x_t + eta) - zv @ H.T
    out = zv + innov @ gain_t

    def vjp(g):
        d_innov = g @ gain_t.T
        gz = g - d_innov @ H
        d_gain = innov.T @ g
        d_hc = np.linalg.solve(s, d_gain)
        d_s = -d_hc @ gain_t.T
        gc = H.T @ d_hc + H.T @ d_s @ H
        return gz, gc

    return nc.make_op(out, (z, cov), vjp), gain_t.T


def step_loglik(moments: ForecastMoments, x_t, em: EmissionModel) -> Node:
    """log N(x_t; H m, H C H^T + R)."""
    mean, cov = nc.as_node(moments.mean), nc.as_node(moments.cov)
    H = em.H
    x_t = np.asarray(x_t, dtype=np.float64)
    s = H @ cov.value @ H.T + em.R
    chol = nc.cholesky(s)
    r = x_t - H @ mean.value
    alpha = cho_solve((chol, True), r)
    d = r.shape[0]
    out = -0.5 * (d * nc.LOG_2PI + 2.0 * np.log(np.diag(chol)).sum() + r @ alpha)

    def vjp(g):
        s_inv = cho_solve((chol, True), np.eye(d))
        gs = -0.5 * g * (s_inv - np.outer(alpha, alpha))
        return g * (H.T @ alpha), H.T @ gs @ H

    return nc.make_op(out, (mean, cov), vjp)


def kl_gaussian_diag(q: GaussianDiag, p: GaussianDiag) -> Node:
    """KL(q || p) between diagonal Gaussians."""
    if q.dim != p.dim:
        raise DimensionMismatch(f"KL between dimensions {q.dim} and {p.dim}")
    qm, qlv = nc.as_node(q.mean), nc.as_node(q.logvar)
    pm, plv = nc.as_node(p.mean), nc.as_node(p.logvar)
    d = qlv - plv
    maha = nc.square(qm - pm) / nc.exp(plv)
    # expm1(d) - d >= 0 holds in floating point; exp(d) - 1 - d can round below zero
    return nc.sum(nc.expm1(d) - d + maha) * 0.5


def initial_ensemble(q: GaussianDiag, n: int, rng) -> Node:
    """Reparameterized draw of ``n`` particles from q."""
    eps = rng.standard_normal((n, q.dim))
    return nc.as_node(q.mean) + nc.exp(nc.as_node(q.logvar) * 0.5) * eps


@dataclass
class FilterResult:
    loglik: Node
    kl: Node
    particles: Node
    filtered_means: list

    @property
    def loss(self) -> Node:
        return self.kl - self.loglik


def run_filter(x_seq, u_seq, model: DSSM, em: EmissionModel, n: int, rng,
               init: Node | np.ndarray | None = None) -> FilterResult:
    """Filter one window; the initial ensemble comes from q_phi unless ``init`` is given.

    ``filtered_means[t]`` is the ensemble mean entering the transition at step t,
    so ``filtered_means[0]`` is the initial ensemble mean.
    """
    x_seq = np.asarray(x_seq, dtype=np.float64)
    steps = x_seq.shape[0]
    u_seq = _controls(u_seq, steps, model.d_u)
    if init is None:
        q = model.recognition(x_seq)
        kl = kl_gaussian_diag(q, GaussianDiag.standard(model.d_z))
        z = initial_ensemble(q, n, rng)
    else:
        kl = nc.constant(0.0)
        z = nc.as_node(init)
    means, terms = [], []
    for t in range(steps):
        means.append(z.value.mean(axis=0))
        z, moments = forecast_step(z, u_seq[t] if model.d_u else None, model, rng)
        terms.append(step_loglik(moments, x_seq[t], em))
        z, _ = filter_step(z, moments, x_seq[t], em, rng)
    return FilterResult(nc.add_n(terms), kl, z, means)


def sequence_loss(x_seq, u_seq, model: DSSM, em: EmissionModel, n: int, rng) -> Node:
    """Negative EnKF log-likelihood of the window plus KL(q_phi(z0 | x) || N(0, I))."""
    return run_filter(x_seq, u_seq, model, em, n, rng).loss


def rollout_forecast(init, u_future, model: DSSM, em: EmissionModel, horizon: int, rng) -> Node:
    """Free-running forecast: forecast steps only, prediction H * ensemble mean."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    u_future = _controls(u_future, horizon, model.d_u)
    z = nc.as_node(init)
    preds = []
    for t in range(horizon):
        z, moments = forecast_step(z, u_future[t] if model.d_u else None, model, rng)
        preds.append(em.H @ moments.mean)
    return nc.stack(preds)


def _controls(u_seq, steps, d_u):
    if u_seq is None:
        u_seq = np.zeros((steps, 0))
    u_seq = np.asarray(u_seq, dtype=np.float64)
    if u_seq.ndim != 2 or u_seq.shape[1] != d_u or u_seq.shape[0] < steps:
        raise DimensionMismatch(f"controls have shape {u_seq.shape}, need ({steps}, {d_u})")
    return u_seq
