"""Transition network, process noise, recognition network and parameter registry."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import DimensionMismatch, IncompatibleCheckpoint, LengthMismatch
from .numcore import GaussianDiag, Node

INIT_LOG_NOISE = float(np.log(0.1))


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ParamRegistry:
    """Ordered collection of named leaves with a flat-vector view."""

    def __init__(self, leaves: Sequence[Node] = ()):
        self.leaves = list(leaves)

    def __iter__(self):
        return iter(self.leaves)

    def __len__(self):
        return len(self.leaves)

    @property
    def size(self) -> int:
        return int(np.sum([leaf.value.size for leaf in self.leaves], dtype=int))

    @property
    def names(self):
        return [leaf.name for leaf in self.leaves]

    def flatten(self) -> np.ndarray:
        if not self.leaves:
            return np.zeros(0)
        return np.concatenate([leaf.value.ravel() for leaf in self.leaves])

    def flat_grad(self) -> np.ndarray:
        if not self.leaves:
            return np.zeros(0)
        return np.concatenate([leaf.grad.ravel() for leaf in self.leaves])

    def assign(self, v) -> None:
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1 or v.size != self.size:
            raise LengthMismatch(f"expected flat vector of length {self.size}, got {v.shape}")
        pos = 0
        for leaf in self.leaves:
            n = leaf.value.size
            leaf.value = v[pos:pos + n].reshape(leaf.value.shape).copy()
            pos += n

    def as_node(self) -> Node:
        """The parameters as one differentiable flat vector."""
        return nc.concat([nc.reshape(leaf, (-1,)) for leaf in self.leaves])

    def zero_grad(self) -> None:
        nc.zero_grad(self.leaves)


def registry_flatten(reg: ParamRegistry) -> np.ndarray:
    return reg.flatten()


def registry_assign(reg: ParamRegistry, v) -> None:
    reg.assign(v)


class TransitionNet:
    """MLP mapping [z; u] to the mean next latent state; tanh hidden layers, linear head."""

    def __init__(self, d_z: int, d_u: int = 0, hidden: Sequence[int] = (32,), rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.d_z, self.d_u = d_z, d_u
        self.hidden = tuple(int(h) for h in hidden)
        self.widths = (d_z + d_u, *self.hidden, d_z)
        self.weights, self.biases = [], []
        for k, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            self.weights.append(nc.param(glorot(rng, a, b), name=f"transition.W{k}"))
            self.biases.append(nc.param(np.zeros(b), name=f"transition.b{k}"))

    @property
    def params(self) -> list[Node]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, z, u=None) -> Node:
        z = nc.as_node(z)
        if z.value.ndim not in (1, 2) or z.shape[-1] != self.d_z:
            raise DimensionMismatch(f"state has shape {z.shape}, expected (..., {self.d_z})")
        if self.d_u:
            if u is None:
                raise DimensionMismatch(f"transition expects {self.d_u} control inputs")
            u = np.asarray(nc.value_of(u), dtype=np.float64)
            if u.shape != (self.d_u,):
                raise DimensionMismatch(f"control has shape {u.shape}, expected ({self.d_u},)")
            if z.value.ndim == 2:
                u = np.broadcast_to(u, (z.shape[0], self.d_u))
            h = nc.concat([z, u], axis=-1)
        else:
            h = z
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = nc.affine(h, w, b, activation="tanh" if k < last else None)
        return h


def transition_forward(net: TransitionNet, z, u=None) -> Node:
    return net(z, u)


class NoiseParams:
    """Diagonal process-noise covariance exp(beta) parameterized by log-variances."""

    def __init__(self, d_z: int, init_logvar: float = INIT_LOG_NOISE):
        self.d_z = d_z
        self.beta = nc.param(np.full(d_z, init_logvar), name="noise.beta")

    @property
    def params(self) -> list[Node]:
        return [self.beta]

    def scale(self) -> Node:
        return nc.exp(self.beta * 0.5)

    def covariance(self) -> np.ndarray:
        return np.diag(np.exp(self.beta.value))


def scale_noise(noise: NoiseParams, eps) -> Node:
    """Reparameterized draw diag(exp(beta/2)) eps for standard-normal ``eps``."""
    return noise.scale() * eps


def sample_process_noise(noise: NoiseParams, rng, size=None) -> Node:
    shape = (noise.d_z,) if size is None else (size, noise.d_z)
    return scale_noise(noise, rng.standard_normal(shape))


class RecognitionNet:
    """Gated recurrent encoder producing q(z0 | x_1:T) as a diagonal Gaussian.

    h' = (1 - s) * h + s * tanh(c), with s = sigmoid(gate) and (gate, c) an
    affine function of [x_t; h].
    """

    def __init__(self, d_x: int, d_z: int, hidden: int = 32, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.d_x, self.d_z, self.hidden = d_x, d_z, hidden
        h = hidden
        self.w_in = nc.param(glorot(rng, d_x, 2 * h), name="recognition.W_in")
        self.w_rec = nc.param(glorot(rng, h, 2 * h), name="recognition.W_rec")
        self.b = nc.param(np.zeros(2 * h), name="recognition.b")
        self.w_mean = nc.param(glorot(rng, h, d_z), name="recognition.W_mean")
        self.b_mean = nc.param(np.zeros(d_z), name="recognition.b_mean")
        self.w_logvar = nc.param(glorot(rng, h, d_z), name="recognition.W_logvar")
        self.b_logvar = nc.param(np.zeros(d_z), name="recognition.b_logvar")

    @property
    def params(self) -> list[Node]:
        return [self.w_in, self.w_rec, self.b, self.w_mean, self.b_mean,
                self.w_logvar, self.b_logvar]

    def __call__(self, x_seq) -> GaussianDiag:
        x_seq = np.asarray(nc.value_of(x_seq), dtype=np.float64)
        if x_seq.ndim != 2 or x_seq.shape[1] != self.d_x or x_seq.shape[0] < 1:
            raise DimensionMismatch(f"observations have shape {x_seq.shape}, expected (T, {self.d_x})")
        proj = nc.affine(x_seq, self.w_in, self.b)
        state = gated_scan(proj, self.w_rec)
        mean = nc.affine(state, self.w_mean, self.b_mean)
        logvar = nc.affine(state, self.w_logvar, self.b_logvar)
        return GaussianDiag(mean, logvar)


def gated_scan(proj, w_rec) -> Node:
    """Final hidden state of the gated cell run over pre-projected inputs.

    ``proj`` is (T, 2h): input contributions to the gate and candidate
    pre-activations. The whole recurrence is one graph node.
    """
    proj, w_rec = nc.as_node(proj), nc.as_node(w_rec)
    pv, wv = proj.value, w_rec.value
    steps, h = pv.shape[0], pv.shape[1] // 2
    states = np.zeros((steps + 1, h))
    gates = np.empty((steps, h))
    cands = np.empty((steps, h))
    for t in range(steps):
        pre = pv[t] + states[t] @ wv
        gates[t] = 0.5 * (np.tanh(0.5 * pre[:h]) + 1.0)
        cands[t] = np.tanh(pre[h:])
        states[t + 1] = states[t] + gates[t] * (cands[t] - states[t])

    def vjp(g):
        gproj = np.empty_like(pv)
        gw = np.zeros_like(wv)
        dh = g
        for t in range(steps - 1, -1, -1):
            prev, s, c = states[t], gates[t], cands[t]
            dpre = np.concatenate([dh * (c - prev) * s * (1.0 - s), dh * s * (1.0 - c * c)])
            gproj[t] = dpre
            gw += np.outer(prev, dpre)
            dh = dh * (1.0 - s) + wv @ dpre
        return gproj, gw

    return nc.make_op(states[-1], (proj, w_rec), vjp)


def recognition_forward(net: RecognitionNet, x_seq) -> GaussianDiag:
    return net(x_seq)


@dataclass
class ModelConfig:
    d_z: int = 8
    hidden: tuple = (32,)
    recog_hidden: int = 32
    r_var: float = 0.01

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.d_z < 1 or self.recog_hidden < 1 or self.r_var <= 0:
            raise ValueError(f"invalid model configuration {self}")


@dataclass
class DSSM:
    """Bundle of theta = (transition weights, noise log-variances) and phi = recognition weights."""

    transition: TransitionNet
    noise: NoiseParams
    recognition: RecognitionNet
    theta: ParamRegistry = field(init=False)
    phi: ParamRegistry = field(init=False)

    def __post_init__(self):
        self.theta = ParamRegistry(self.transition.params + self.noise.params)
        self.phi = ParamRegistry(self.recognition.params)

    @classmethod
    def build(cls, d_x: int, d_u: int, config: ModelConfig, rng) -> "DSSM":
        return cls(TransitionNet(config.d_z, d_u, config.hidden, rng),
                   NoiseParams(config.d_z),
                   RecognitionNet(d_x, config.d_z, config.recog_hidden, rng))

    @property
    def d_z(self):
        return self.transition.d_z

    @property
    def d_u(self):
        return self.transition.d_u

    @property
    def d_x(self):
        return self.recognition.d_x

    def reset_recognition(self, rng) -> None:
        """Fresh task-specific phi, reusing the same leaf objects."""
        fresh = RecognitionNet(self.d_x, self.d_z, self.recognition.hidden, rng)
        self.phi.assign(ParamRegistry(fresh.params).flatten())

    def zero_grad(self) -> None:
        self.theta.zero_grad()
        self.phi.zero_grad()


# checkpoint file --------------------------------------------------------------

CHECKPOINT_MAGIC = b"CLDSSMP\x00"
CHECKPOINT_VERSION = 1
_HEAD = struct.Struct("<8sIIIIIIdI")


@dataclass
class Checkpoint:
    model_config: ModelConfig
    d_x: int
    d_u: int
    ensemble: int
    theta: np.ndarray
    phis: list
    std_mean: np.ndarray | None = None
    std_scale: np.ndarray | None = None

    def build_model(self) -> DSSM:
        model = DSSM.build(self.d_x, self.d_u, self.model_config, np.random.default_rng(0))
        model.theta.assign(self.theta)
        if self.phis:
            model.phi.assign(self.phis[-1])
        return model


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Little-endian layout: fixed header, hidden widths, sizes, then float64 payloads."""
    cfg = ckpt.model_config
    has_std = ckpt.std_mean is not None
    head = _HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.d_z, ckpt.d_u, ckpt.d_x,
                      cfg.recog_hidden, ckpt.ensemble, cfg.r_var, len(cfg.hidden))
    head += struct.pack(f"<{len(cfg.hidden)}I", *cfg.hidden)
    n_theta, n_phi = ckpt.theta.size, (ckpt.phis[0].size if ckpt.phis else 0)
    head += struct.pack("<QQII", n_theta, n_phi, len(ckpt.phis), int(has_std))
    parts = []
    if has_std:
        parts += [ckpt.std_mean, ckpt.std_scale]
    parts += [ckpt.theta, *ckpt.phis]
    payload = np.concatenate([np.asarray(p, dtype="<f8").ravel() for p in parts])
    return head + payload.astype("<f8").tobytes()


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    try:
        magic, version, d_z, d_u, d_x, h_r, ens, r_var, n_hidden = _HEAD.unpack_from(raw, 0)
        if magic != CHECKPOINT_MAGIC:
            raise IncompatibleCheckpoint("not a parameter checkpoint")
        if version != CHECKPOINT_VERSION:
            raise IncompatibleCheckpoint(f"unsupported checkpoint version {version}")
        pos = _HEAD.size
        hidden = struct.unpack_from(f"<{n_hidden}I", raw, pos)
        pos += 4 * n_hidden
        n_theta, n_phi, count_phi, has_std = struct.unpack_from("<QQII", raw, pos)
        pos += 24
    except struct.error as exc:
        raise IncompatibleCheckpoint(f"truncated checkpoint header: {exc}") from None
    cfg = ModelConfig(d_z=d_z, hidden=hidden, recog_hidden=h_r, r_var=r_var)
    d_io = d_x + d_u
    expected = (2 * d_io if has_std else 0) + n_theta + n_phi * count_phi
    body = raw[pos:]
    if len(body) != 8 * expected:
        raise IncompatibleCheckpoint(f"payload has {len(body)} bytes, expected {8 * expected}")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    std_mean = std_scale = None
    if has_std:
        std_mean, std_scale = values[:d_io].copy(), values[d_io:2 * d_io].copy()
        values = values[2 * d_io:]
    theta = values[:n_theta].copy()
    phis = [values[n_theta + k * n_phi:n_theta + (k + 1) * n_phi].copy() for k in range(count_phi)]
    ckpt = Checkpoint(cfg, d_x, d_u, ens, theta, phis, std_mean, std_scale)
    probe = DSSM.build(d_x, d_u, cfg, np.random.default_rng(0))
    if probe.theta.size != n_theta or (count_phi and probe.phi.size != n_phi):
        raise IncompatibleCheckpoint("parameter counts do not match the stored layer widths")
    return ckpt


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
