"""Finite-difference verification of analytic gradients.

Checks run in float64: central differences at eps=1e-3 are meaningless in
float32. The program under test must be deterministic.
"""

import numpy as np

from .errors import ContractError
from .tensor import Tensor, backward, no_grad, tape


def _project(y, r):
    """Deterministic scalar reduction of a (possibly non-scalar) output."""
    if y.size == 1:
        return y
    return (y * Tensor(r)).sum()


def check_gradients(f, x, eps=1e-3, wrt=None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a Tensor; non-scalar outputs are reduced with a
    fixed random projection so a single backward pass covers them. Gradients
    are checked for every tensor in ``wrt`` (default: just ``x``).

    Error metric per element: |analytic - numeric| / max(1, |analytic|).
    """
    if x.dtype != np.float64:
        raise ContractError("check_gradients requires a float64 input")
    wrt = list(wrt) if wrt is not None else [x]
    rng = np.random.default_rng(seed)

    with no_grad():
        probe = f(x)
    r = rng.standard_normal(probe.data.shape).astype(np.float64)

    with no_grad():
        again = f(x)
    if not np.array_equal(probe.data, again.data):
        raise ContractError("check_gradients requires a deterministic program")

    def scalar_eval():
        y = f(x)
        return _project(y, r)

    tape().clear()
    for t in wrt:
        t.zero_grad(free=True)
    loss = scalar_eval()
    backward(loss)
    analytic = [None if t.grad is None else t.grad.copy() for t in wrt]

    max_err = 0.0
    for t, a in zip(wrt, analytic):
        if a is None:
            a = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                hi = scalar_eval().item()
            flat[i] = orig - eps
            with no_grad():
                lo = scalar_eval().item()
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            ana = a.reshape(-1)[i]
            err = abs(ana - num) / max(1.0, abs(ana))
            if err > max_err:
                max_err = err
    return max_err
