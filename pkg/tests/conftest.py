import numpy as np
import pytest

from maneuverlab import ndtensor as nd


def finite_difference_grad(loss_fn, tensor, h=1e-6):
    """Central-difference gradient of a scalar-valued loss wrt one tensor's data."""
    base = tensor.data
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = base[idx]
        base[idx] = orig + h
        up = loss_fn()
        base[idx] = orig - h
        down = loss_fn()
        base[idx] = orig
        grad[idx] = (up - down) / (2.0 * h)
        it.iternext()
    return grad


def relative_error(a, b, floor=1e-12):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return np.linalg.norm(a - b) / denom


def check_gradients(build_loss, params, tol, h=1e-6):
    """Compare analytic gradients of ``build_loss()`` against central differences.

    ``build_loss`` must rebuild the graph from ``params`` (dict of leaf
    tensors) on every call and return the scalar loss tensor.
    """
    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    nd.backward(loss)
    worst = 0.0
    for name, p in params.items():
        with nd.no_grad():
            fd = finite_difference_grad(lambda: build_loss().item(), p, h=h)
        assert p.grad is not None, f"no gradient reached {name}"
        err = relative_error(p.grad, fd)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch for {name}: rel err {err:.3g} >= {tol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
