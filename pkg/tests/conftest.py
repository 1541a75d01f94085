import numpy as np
import pytest

from cldssm.nets import DSSM, ModelConfig


def linear_dssm(A, d_x=1, d_u=0, logvar=0.0, recog_hidden=4, seed=0):
    """DSSM whose transition is exactly z -> A z (+ 0 u) with noise variance exp(logvar)."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    d_z = A.shape[0]
    model = DSSM.build(d_x, d_u, ModelConfig(d_z=d_z, hidden=(), recog_hidden=recog_hidden),
                       np.random.default_rng(seed))
    W = np.zeros((d_z + d_u, d_z))
    W[:d_z] = A.T
    model.transition.weights[0].value = W
    model.transition.biases[0].value = np.zeros(d_z)
    model.noise.beta.value = np.full(d_z, float(logvar))
    return model


def zero_recognition(model, mean=0.0, logvar=0.0):
    """Make q(z0 | x) independent of x: N(mean, exp(logvar)) in every coordinate."""
    for p in model.phi:
        p.value = np.zeros_like(p.value)
    model.recognition.b_mean.value = np.full(model.d_z, float(mean))
    model.recognition.b_logvar.value = np.full(model.d_z, float(logvar))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
