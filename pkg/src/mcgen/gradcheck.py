"""Central finite-difference oracle for autodiff gradients (f64 only)."""
import numpy as np

from .tensor import Tensor


def numerical_gradient(fn, inputs, eps=1e-6):
    """d fn(*inputs) / d input for each input, by central differences.

    ``fn`` maps Tensors to a scalar Tensor; inputs are perturbed in place and
    restored.
    """
    grads = []
    for t in inputs:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn(*inputs).data)
            flat[i] = orig - eps
            down = float(fn(*inputs).data)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def analytic_gradient(fn, inputs):
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    out.backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def relative_error(a, b, floor=1e-12):
    """Norm-wise relative error ||a-b|| / (||a|| + ||b||)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), floor))


def check_gradients(fn, inputs, eps=1e-6, floor=1e-12):
    """Return the worst relative error between autodiff and finite differences."""
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradient checks need f64 tensors")
        if not t.requires_grad:
            raise ValueError("every checked input must require grad")
    analytic = analytic_gradient(fn, inputs)
    numeric = numerical_gradient(fn, inputs, eps)
    return max(relative_error(a, n, floor) for a, n in zip(analytic, numeric))


__all__ = ["Tensor", "numerical_gradient", "analytic_gradient", "relative_error", "check_gradients"]
