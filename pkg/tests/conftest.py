"""Shared fixtures and oracle helpers."""

import numpy as np
import pytest

from cvloc import autodiff as ad
from cvloc.model import ModelConfig


def finite_diff_grad(loss_fn, tensor, indices=None, eps=1e-3):
    """Central finite differences of a scalar re-evaluable loss w.r.t. chosen
    elements of `tensor`. `loss_fn()` must rebuild the graph from scratch."""
    flat = tensor.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    grads = {}
    for idx in indices:
        orig = flat[idx]
        flat[idx] = orig + eps
        up = float(loss_fn().data)
        flat[idx] = orig - eps
        down = float(loss_fn().data)
        flat[idx] = orig
        grads[idx] = (up - down) / (2.0 * eps)
    return grads


def rel_err(a, b, floor=0.1):
    """Relative error with a denominator floor: float32 evaluations make the
    FD quotient meaningless for tiny gradients, so below `floor` this degrades
    into an absolute comparison at tol * floor."""
    a, b = float(a), float(b)
    return abs(a - b) / max(abs(a), abs(b), floor)


def _is_kink(loss_fn, tensor, idx, eps):
    """True when the one-sided difference quotients disagree, i.e. the loss is
    not differentiable at this point (relu/max boundaries)."""
    flat = tensor.data.reshape(-1)
    orig = flat[idx]
    f0 = float(loss_fn().data)
    flat[idx] = orig + eps
    up = float(loss_fn().data)
    flat[idx] = orig - eps
    down = float(loss_fn().data)
    flat[idx] = orig
    s_plus = (up - f0) / eps
    s_minus = (f0 - down) / eps
    scale = max(abs(s_plus), abs(s_minus), 1e-12)
    return abs(s_plus - s_minus) / scale > 0.1


def check_gradients(loss_fn, tensor, indices=None, eps=1e-3, tol=1e-3):
    """Build the graph once, backprop, and compare against finite differences.

    Indices where the loss is provably non-smooth (one-sided slopes disagree)
    are skipped: subgradients of relu/max kinks cannot match a central
    difference quotient.
    """
    tensor.grad = None
    loss = loss_fn()
    ad.backward(loss)
    analytic = tensor.grad.reshape(-1).copy()
    tensor.grad = None
    fd = finite_diff_grad(loss_fn, tensor, indices=indices, eps=eps)
    for idx, g_fd in fd.items():
        err = rel_err(analytic[idx], g_fd)
        if err >= tol and _is_kink(loss_fn, tensor, idx, eps):
            continue
        assert err < tol, (
            f"gradient mismatch at flat index {idx}: "
            f"analytic {analytic[idx]:.6g} vs fd {g_fd:.6g} (rel {err:.3g})"
        )


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def f64():
    """Run the test in the engine's double-precision mode (gradient checks)."""
    with ad.double_precision():
        yield


def mini_model_config(seed=3) -> ModelConfig:
    """Smallest config the architecture supports; used by fast end-to-end tests."""
    return ModelConfig(
        L=16,
        L_feat=2,
        N=2,
        C=8,
        K=2,
        ground_h=8,
        ground_w=16,
        decoder_stages=3,
        seed=seed,
    ).validate()


def rand_tensor(rng, shape, requires_grad=False, scale=1.0):
    return ad.Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad)
