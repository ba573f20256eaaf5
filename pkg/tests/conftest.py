import numpy as np
import pytest

from ipr.data import SynthConfig, generate_synthetic
from ipr.numerics import finite_diff_gradient


def flatten(params):
    return np.concatenate([a.reshape(-1) for _, a in params.named_arrays()])


def assign(params, flat):
    i = 0
    for _, a in params.named_arrays():
        a[...] = flat[i:i + a.size].reshape(a.shape)
        i += a.size


def numeric_param_grad(params, loss_fn, h=1e-5):
    """Central differences of ``loss_fn(params)`` wrt every parameter, flattened."""
    base = flatten(params)
    work = params.copy()

    def f(flat):
        assign(work, flat)
        return loss_fn(work)

    return finite_diff_gradient(f, base, h)


def flat_grads(params, grads):
    return np.concatenate([grads[name].reshape(-1) for name, _ in params.named_arrays()])


def max_rel_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic).reshape(-1)
    numeric = np.asarray(numeric).reshape(-1)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture(scope="session")
def small_dataset():
    cfg = SynthConfig(n_classes=3, d_in=6, separation=3.0, overlap=0.3, n_d1=48, n_d2=64,
                      n_d3=24, seed=11)
    return generate_synthetic(cfg)
