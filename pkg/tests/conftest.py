import numpy as np
import pytest

from sinematch.tensor import Tensor, backward


def central_diff(loss_fn, arrays: dict, h: float = 1e-5) -> dict:
    """Central-difference gradients of loss_fn w.r.t. each array.

    loss_fn receives {name: ndarray} and must return a python float; it is
    evaluated 2*size times per array. This stays independent of the autodiff
    path it checks.
    """
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat_view = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat_view.size):
            orig = flat_view[i]
            flat_view[i] = orig + h
            f_plus = loss_fn(arrays)
            flat_view[i] = orig - h
            f_minus = loss_fn(arrays)
            flat_view[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads[name] = g
    return grads


def check_gradients(make_loss, arrays: dict, rel_tol: float = 1e-4, h: float = 1e-5):
    """Assert autodiff gradients match central differences in relative norm."""
    tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    loss = make_loss(tensors)
    backward(loss)

    def loss_value(arrs):
        return make_loss({k: Tensor(v) for k, v in arrs.items()}).item()

    numeric = central_diff(loss_value, arrays, h=h)
    for name in arrays:
        a = tensors[name].grad
        assert a is not None, f"no gradient for {name}"
        n = numeric[name]
        denom = max(np.linalg.norm(n), 1e-8)
        rel = np.linalg.norm(a - n) / denom
        assert rel <= rel_tol, f"gradient mismatch for {name}: rel err {rel:.3e}"
    return tensors


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
