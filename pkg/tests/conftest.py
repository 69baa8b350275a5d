"""Shared test helpers: central-difference gradient checking and samplers."""

from __future__ import annotations

import numpy as np
import pytest

from flocknet.tensor import Tensor


def numeric_grad(fn, tensors, target, weights, h=1e-5):
    """Central-difference gradient of sum(fn(*tensors) * weights) wrt target.

    Perturbs ``target.data`` in place one entry at a time; ``fn`` must
    recompute its forward pass from the tensors on every call.
    """
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float((fn(*tensors).data * weights).sum())
        flat[i] = orig - h
        lo = float((fn(*tensors).data * weights).sum())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def relative_error(analytic, numeric):
    # global form: one scale for the whole tensor, floored at 1 so that
    # near-zero gradients are compared absolutely
    denom = max(1.0, float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / denom


def assert_grads_close(fn, tensors, rng, h=1e-5, tol=1e-4):
    """Check every input's analytic gradient against central differences.

    The objective is a random linear functional of the output, which keeps
    the check sensitive for operations whose plain sum has an identically
    zero gradient (softmax rows, normalized activations).
    """
    out = fn(*tensors)
    weights = rng.standard_normal(out.shape)
    out.backward(weights)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]
    for t, a in zip(tensors, analytic):
        n = numeric_grad(fn, tensors, t, weights, h=h)
        err = relative_error(a, n)
        assert err <= tol, f"gradient mismatch for shape {t.shape}: rel err {err:.3e}"
    for t in tensors:
        t.zero_grad()


def grad_tensor(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def away_from_kinks(values, kinks, margin=1e-3):
    """Push entries of ``values`` at least ``margin`` away from each kink."""
    out = np.asarray(values, dtype=float).copy()
    for k in kinks:
        close = np.abs(out - k) < margin
        side = np.where(out >= k, 1.0, -1.0)
        out = np.where(close, k + side * margin, out)
    return out


def distinct_grid(rng, shape, gap=1e-2):
    """Random tensor whose entries are pairwise at least ``gap`` apart.

    Keeps max-pool argmax selections stable under small perturbations.
    """
    n = int(np.prod(shape))
    vals = rng.permutation(n).astype(float) * gap
    return (vals - vals.mean()).reshape(shape)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
