"""Shared test utilities: central finite-difference gradient checking at
64-bit, and small model/data builders."""

import numpy as np

import deepinvert.tensor as T
from deepinvert.tensor import Tensor


def numeric_grad(fn, arrays, k, h=1e-4):
    """Central-difference gradient of scalar fn(*arrays) w.r.t. arrays[k]."""
    base = [np.asarray(a, dtype=np.float64) for a in arrays]
    num = np.zeros_like(base[k])
    it = np.nditer(base[k], flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        ap = [a.copy() for a in base]
        am = [a.copy() for a in base]
        ap[k][idx] += h
        am[k][idx] -= h
        num[idx] = (float(fn(*ap)) - float(fn(*am))) / (2 * h)
    return num


def gradcheck(fn, *arrays, h=1e-4, rtol=1e-4, atol=1e-7, wrt=None):
    """Assert analytic gradients of the Tensor function fn match central
    finite differences at float64. fn takes Tensors and returns a scalar
    Tensor; wrt selects which inputs to check (default: all)."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    with T.default_dtype(np.float64):
        ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*ts)
        assert out.data.size == 1, "gradcheck needs a scalar output"
        out.backward()
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                    for t in ts]

        def scalar(*arrs):
            return float(fn(*[Tensor(a) for a in arrs]).data)

        for k in wrt:
            num = numeric_grad(scalar, arrays, k, h=h)
            err = np.abs(analytic[k] - num)
            tol = rtol * np.maximum(np.abs(analytic[k]), np.abs(num)) + atol
            assert np.all(err <= tol), (
                f"gradient mismatch on input {k}: max abs err {err.max():.3e}, "
                f"analytic {analytic[k].ravel()[np.argmax(err)]:.6e} vs "
                f"numeric {num.ravel()[np.argmax(err)]:.6e}")
    return True


def weighted_sum(t, w):
    """Reduce a tensor to a scalar with fixed random weights so every element
    contributes a distinct gradient signal."""
    return T.tsum(t * Tensor(np.asarray(w, dtype=t.data.dtype)))


def rand_weights(rng, shape):
    return rng.uniform(0.5, 1.5, shape)
