import numpy as np
import pytest

from gatefuse import tensor as T


@pytest.fixture
def f64():
    """Gradient checks need 64-bit; finite differences drown in f32 noise."""
    with T.using_dtype(np.float64):
        yield


@pytest.fixture(autouse=True)
def _eval_default():
    T.set_training(False)
    yield
    T.set_training(False)


def numeric_grad(f, arrays, eps=1e-5):
    """Central finite differences of scalar f() w.r.t. each array, in place."""
    grads = []
    for x in arrays:
        g = np.zeros_like(x)
        it = np.nditer(x, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = x[idx]
            x[idx] = old + eps
            f_plus = f()
            x[idx] = old - eps
            f_minus = f()
            x[idx] = old
            g[idx] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g)
    return grads


def check_grads(build, arrays, rtol=1e-4, eps=1e-5):
    """`build(tensors) -> scalar Tensor`; compares tape grads to central FD.

    Relative error is measured against the finite-difference scale, with an
    absolute floor so near-zero gradients do not divide by zero.
    """
    tensors = [T.tensor(a, requires_grad=True) for a in arrays]
    loss = build(tensors)
    assert loss.data.shape == (), "gradient check needs a scalar loss"
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]

    def f():
        return float(build([T.tensor(a) for a in arrays]).data)

    numeric = numeric_grad(f, arrays, eps=eps)
    for i, (ga, gn) in enumerate(zip(analytic, numeric)):
        scale = max(float(np.max(np.abs(gn))), 1e-6)
        err = float(np.max(np.abs(ga - gn))) / scale
        assert err < rtol, f"input {i}: rel err {err:.3e} >= {rtol}"
    return analytic
